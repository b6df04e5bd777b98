use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use distilrank::data::collection::CollectionPaths;
use distilrank::data::{format_run, parse_qrels, parse_run, SyntheticSpec};
use distilrank::distill::{
    finetune, format_log, DistillMode, DistillPlan, Distiller, FinetunePlan, KDHyper, StageSettings, TrainOutcome,
    Validator,
};
use distilrank::encoder::{estimate_macs, format_giga, load_checkpoint, save_checkpoint, speedup, Encoder, EncoderConfig};
use distilrank::eval::{rankings_from_run, MetricReport};
use distilrank::experiment::{desk_split_config, Split, Workspace, SPLITS_FILE, VOCAB_FILE};
use distilrank::rank::{PairOptions, PassageSplitConfig};

const CHECKPOINT_FILE: &str = "model.ckpt";
const RUN_FILE: &str = "run.trec";
const METRICS_FILE: &str = "metrics.json";
const LOG_FILE: &str = "train_log.jsonl";
const CONFIG_FILE: &str = "config.json";

#[derive(Parser)]
#[command(name = "distilrank", version, about = "Passage re-ranking and knowledge distillation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: GlobalArgs,
}

#[derive(Args, Serialize)]
struct GlobalArgs {
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for scoring and teacher passes (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run on a single worker thread.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    deterministic: bool,
    /// TOML file of settings; flags given on the command line win.
    #[arg(long, global = true)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Base defaults for training and passage settings.
    #[arg(long, global = true, value_enum)]
    scale: Option<Scale>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum Scale {
    /// Batch sizes divided by 8, raised learning rate, 16-token passages.
    Desk,
    /// Batch 128/128/64, learning rates 1e-6/5e-5, 200-token passages.
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic ranking corpus.
    GenSynth(GenSynthArgs),
    /// Train a teacher on hard labels.
    Finetune(FinetuneArgs),
    /// Distill a teacher into a smaller student.
    Distill(DistillArgs),
    /// Re-rank candidate lists with a model and write a run file.
    Rerank(RerankArgs),
    /// Score a run against relevance judgments.
    Evaluate(EvaluateArgs),
    /// Print the multiply-accumulate count of one forward pass.
    Flops(FlopsArgs),
}

#[derive(Args, Serialize)]
struct PassageArgs {
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    max_query_tokens: Option<usize>,
    #[arg(long)]
    max_input_tokens: Option<usize>,
}

#[derive(Args, Serialize)]
struct PairArgs {
    #[arg(long)]
    negatives_per_positive: Option<usize>,
    #[arg(long)]
    passages_per_doc: Option<usize>,
}

#[derive(Args, Serialize)]
struct GenSynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    num_queries: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    docs_per_query: Option<usize>,
    /// Inclusive range in words, as `MIN,MAX`.
    #[arg(long, value_delimiter = ',')]
    doc_length: Option<Vec<usize>>,
    /// Inclusive range of terms per query, as `MIN,MAX`.
    #[arg(long, value_delimiter = ',')]
    query_terms: Option<Vec<usize>>,
    #[arg(long)]
    signal_strength: Option<f64>,
    #[arg(long)]
    hard_negative_rate: Option<f64>,
    #[arg(long)]
    min_query_term_rank: Option<usize>,
    #[arg(long)]
    zipf_exponent: Option<f64>,
    #[arg(long)]
    train_fraction: Option<f64>,
}

#[derive(Args, Serialize)]
struct FinetuneArgs {
    /// Corpus directory written by gen-synth (or laid out the same way).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Keep the epoch with the best validation MRR@10.
    #[arg(long)]
    select_best_epoch: Option<bool>,
    #[command(flatten)]
    #[serde(flatten)]
    passages: PassageArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pairs: PairArgs,
}

#[derive(Args, Serialize)]
struct DistillArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Fine-tuned teacher checkpoint.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<DistillMode>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Copy the teacher's embeddings and first k layers into the student.
    #[arg(long)]
    init_from_first_k: Option<usize>,
    #[arg(long)]
    intermediate_epochs: Option<usize>,
    #[arg(long)]
    intermediate_batch_size: Option<usize>,
    #[arg(long)]
    intermediate_learning_rate: Option<f64>,
    #[arg(long)]
    prediction_epochs: Option<usize>,
    #[arg(long)]
    prediction_batch_size: Option<usize>,
    #[arg(long)]
    prediction_learning_rate: Option<f64>,
    /// Soft-loss temperature outside the Standard KD grid search.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    select_best_epoch: Option<bool>,
    #[command(flatten)]
    #[serde(flatten)]
    passages: PassageArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pairs: PairArgs,
}

#[derive(Args, Serialize)]
struct RerankArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    split: Option<Split>,
    /// Candidates re-scored per query (default: all).
    #[arg(long)]
    depth: Option<usize>,
    /// Run tag written in the last column.
    #[arg(long)]
    tag: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    passages: PassageArgs,
}

#[derive(Args, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    qrels: Option<PathBuf>,
    /// Run to test against, as `[LETTER=]PATH`; repeatable.
    #[arg(long = "baseline")]
    baseline: Option<Vec<String>>,
    /// Directory for metrics.json; the summary is always printed.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct FlopsArgs {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    intermediate: Option<usize>,
    #[arg(long)]
    seq: Option<usize>,
    /// Reference shape as `LAYERS,HIDDEN`.
    #[arg(long)]
    baseline: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GenSynthConfig {
    out: Option<PathBuf>,
    seed: u64,
    #[serde(flatten)]
    spec: SyntheticSpec,
}

#[derive(Debug, Serialize, Deserialize)]
struct FinetuneConfig {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    scale: Scale,
    seed: u64,
    threads: Option<usize>,
    deterministic: bool,
    layers: usize,
    hidden: usize,
    heads: Option<usize>,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    weight_decay: f64,
    select_best_epoch: bool,
    #[serde(flatten)]
    passages: PassageSplitConfig,
    negatives_per_positive: usize,
    passages_per_doc: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct DistillConfig {
    data: Option<PathBuf>,
    teacher: Option<PathBuf>,
    out: Option<PathBuf>,
    scale: Scale,
    seed: u64,
    threads: Option<usize>,
    deterministic: bool,
    mode: DistillMode,
    layers: usize,
    hidden: usize,
    heads: Option<usize>,
    init_from_first_k: Option<usize>,
    intermediate_epochs: usize,
    intermediate_batch_size: usize,
    intermediate_learning_rate: f64,
    prediction_epochs: usize,
    prediction_batch_size: usize,
    prediction_learning_rate: f64,
    temperature: f64,
    alpha: f64,
    /// Standard KD candidates, in tie-break order.
    kd_grid: Vec<KDHyper>,
    weight_decay: f64,
    select_best_epoch: bool,
    #[serde(flatten)]
    passages: PassageSplitConfig,
    negatives_per_positive: usize,
    passages_per_doc: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct RerankConfig {
    data: Option<PathBuf>,
    model: Option<PathBuf>,
    out: Option<PathBuf>,
    scale: Scale,
    threads: Option<usize>,
    deterministic: bool,
    split: Split,
    depth: Option<usize>,
    tag: String,
    #[serde(flatten)]
    passages: PassageSplitConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct EvaluateConfig {
    run: Option<PathBuf>,
    qrels: Option<PathBuf>,
    baseline: Vec<String>,
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FlopsConfig {
    layers: usize,
    hidden: usize,
    intermediate: Option<usize>,
    seq: usize,
    baseline: Option<String>,
}

fn passages_for(scale: Scale) -> PassageSplitConfig {
    match scale {
        Scale::Desk => desk_split_config(),
        Scale::Full => PassageSplitConfig::default(),
    }
}

impl FinetuneConfig {
    fn defaults(scale: Scale) -> Self {
        let plan = match scale {
            Scale::Desk => FinetunePlan::desk(0),
            Scale::Full => FinetunePlan::full_scale(0),
        };
        let pairs = PairOptions::default();
        Self {
            data: None,
            out: None,
            scale,
            seed: 0,
            threads: None,
            deterministic: false,
            layers: 4,
            hidden: 64,
            heads: None,
            epochs: plan.settings.epochs,
            batch_size: plan.settings.batch_size,
            learning_rate: plan.settings.learning_rate,
            weight_decay: plan.weight_decay,
            select_best_epoch: plan.select_best_epoch,
            passages: passages_for(scale),
            negatives_per_positive: pairs.negatives_per_positive,
            passages_per_doc: pairs.passages_per_doc,
        }
    }
}

impl DistillConfig {
    fn defaults(scale: Scale) -> Self {
        let mode = DistillMode::SimplifiedOneStep;
        let plan = match scale {
            Scale::Desk => DistillPlan::desk(mode, 0),
            Scale::Full => DistillPlan::full_scale(mode, 0),
        };
        let pairs = PairOptions::default();
        Self {
            data: None,
            teacher: None,
            out: None,
            scale,
            seed: 0,
            threads: None,
            deterministic: false,
            mode,
            layers: 2,
            hidden: 32,
            heads: None,
            init_from_first_k: plan.init_from_first_k,
            intermediate_epochs: plan.intermediate.epochs,
            intermediate_batch_size: plan.intermediate.batch_size,
            intermediate_learning_rate: plan.intermediate.learning_rate,
            prediction_epochs: plan.prediction.epochs,
            prediction_batch_size: plan.prediction.batch_size,
            prediction_learning_rate: plan.prediction.learning_rate,
            temperature: plan.hyper.temperature,
            alpha: plan.hyper.alpha,
            kd_grid: plan.kd_grid,
            weight_decay: plan.weight_decay,
            select_best_epoch: plan.select_best_epoch,
            passages: passages_for(scale),
            negatives_per_positive: pairs.negatives_per_positive,
            passages_per_doc: pairs.passages_per_doc,
        }
    }

    fn plan(&self) -> DistillPlan {
        DistillPlan {
            mode: self.mode,
            intermediate: StageSettings {
                epochs: self.intermediate_epochs,
                batch_size: self.intermediate_batch_size,
                learning_rate: self.intermediate_learning_rate,
            },
            prediction: StageSettings {
                epochs: self.prediction_epochs,
                batch_size: self.prediction_batch_size,
                learning_rate: self.prediction_learning_rate,
            },
            hyper: KDHyper {
                temperature: self.temperature,
                alpha: self.alpha,
            },
            kd_grid: self.kd_grid.clone(),
            weight_decay: self.weight_decay,
            init_from_first_k: self.init_from_first_k,
            seed: self.seed,
            select_best_epoch: self.select_best_epoch,
        }
    }
}

/// Settings from the `--config` file, if any.
fn load_config_file(path: Option<&Path>) -> anyhow::Result<Map<String, Value>> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table = toml::from_str(&text)
        .map_err(|e| anyhow!("config {}: {}", path.display(), e.message()))?;
    match serde_json::to_value(table)? {
        Value::Object(map) => Ok(map),
        _ => unreachable!("a TOML table serializes to an object"),
    }
}

/// Built-in defaults, overridden by the config file, overridden by flags.
/// Keys in the file that the command does not know are errors; global flags
/// a command does not use are ignored.
fn resolve<T: Serialize + DeserializeOwned>(
    defaults: T,
    file: &Map<String, Value>,
    flags: &[Value],
) -> anyhow::Result<T> {
    let Value::Object(mut merged) = serde_json::to_value(defaults)? else {
        unreachable!("configs serialize to objects")
    };
    for (k, v) in file {
        if !merged.contains_key(k) {
            bail!("config file: unknown setting `{k}`");
        }
        merged.insert(k.clone(), v.clone());
    }
    for layer in flags {
        for (k, v) in layer.as_object().into_iter().flatten() {
            if !v.is_null() && merged.contains_key(k) {
                merged.insert(k.clone(), v.clone());
            }
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| anyhow!("invalid settings: {e}"))
}

/// Flags may override the scale, then the file, then desk scale.
fn resolve_scale(global: &GlobalArgs, file: &Map<String, Value>) -> anyhow::Result<Scale> {
    if let Some(s) = global.scale {
        return Ok(s);
    }
    match file.get("scale") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| anyhow!("config file: scale: {e}")),
        None => Ok(Scale::Desk),
    }
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| anyhow!("missing --{flag} (or `{flag}` in the config file)"))
}

fn configure_threads(threads: Option<usize>, deterministic: bool) -> anyhow::Result<()> {
    let n = if deterministic { Some(1) } else { threads };
    if let Some(n) = n {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

/// Files a command writes. Unless committed, everything written so far is
/// deleted on drop, along with the directory if this command created it.
struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    written: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn new(dir: &Path) -> anyhow::Result<Self> {
        let created_dir = !dir.exists();
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created_dir,
            written: Vec::new(),
            committed: false,
        })
    }

    /// Registers `name` before `write` produces it, so a failed write is
    /// cleaned up too.
    fn produce(
        &mut self,
        name: &str,
        write: impl FnOnce(&Path) -> distilrank::Result<()>,
    ) -> anyhow::Result<()> {
        let path = self.dir.join(name);
        self.written.push(path.clone());
        write(&path).with_context(|| format!("writing {}", path.display()))
    }

    fn text(&mut self, name: &str, text: &str) -> anyhow::Result<()> {
        let path = self.dir.join(name);
        self.written.push(path.clone());
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> anyhow::Result<()> {
        self.text(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for p in &self.written {
            let _ = std::fs::remove_file(p);
        }
        if self.created_dir {
            let _ = std::fs::remove_dir(&self.dir);
        }
    }
}

fn model_config(ws: &Workspace, layers: usize, hidden: usize, heads: Option<usize>) -> anyhow::Result<EncoderConfig> {
    let mut cfg = ws.encoder_config(layers, hidden);
    if let Some(h) = heads {
        cfg = cfg.with_heads(h);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn check_model_fits(model: &EncoderConfig, ws: &Workspace, what: &str) -> anyhow::Result<()> {
    if model.vocab_size != ws.vocab.len() {
        bail!(
            "{what} has a {}-entry vocabulary but the corpus vocabulary has {}",
            model.vocab_size,
            ws.vocab.len()
        );
    }
    if model.max_position < ws.split_config.max_input_tokens {
        bail!(
            "{what} accepts {} positions but the passage settings build inputs of up to {} tokens",
            model.max_position,
            ws.split_config.max_input_tokens
        );
    }
    Ok(())
}

fn write_training_outputs(dir: &Path, outcome: &TrainOutcome, config: &impl Serialize) -> anyhow::Result<()> {
    let mut out = Outputs::new(dir)?;
    out.produce(CHECKPOINT_FILE, |p| save_checkpoint(p, &outcome.model))?;
    out.text(LOG_FILE, &format_log(&outcome.log)?)?;
    out.json(CONFIG_FILE, config)?;
    out.commit();
    Ok(())
}

fn gen_synth(global: &GlobalArgs, args: &GenSynthArgs, file: &Map<String, Value>) -> anyhow::Result<()> {
    let defaults = GenSynthConfig {
        out: None,
        seed: 0,
        spec: SyntheticSpec::default(),
    };
    let cfg: GenSynthConfig = resolve(defaults, file, &[serde_json::to_value(global)?, serde_json::to_value(args)?])?;
    let dir = required(&cfg.out, "out")?;
    let ws = Workspace::synthetic(&cfg.spec, cfg.seed, desk_split_config())?;
    let mut out = Outputs::new(dir)?;
    let paths = CollectionPaths::in_dir(dir);
    out.written.extend([
        paths.queries,
        paths.docs,
        paths.qrels,
        paths.candidates,
        dir.join(SPLITS_FILE),
        dir.join(VOCAB_FILE),
    ]);
    ws.save(dir)?;
    out.json(CONFIG_FILE, &cfg)?;
    out.commit();
    println!(
        "{} queries ({} train, {} validation, {} test), {} documents, vocabulary {}",
        ws.collection.queries.len(),
        ws.splits.train.len(),
        ws.splits.validation.len(),
        ws.splits.test.len(),
        ws.collection.docs.len(),
        ws.vocab.len()
    );
    Ok(())
}

fn finetune_cmd(global: &GlobalArgs, args: &FinetuneArgs, file: &Map<String, Value>) -> anyhow::Result<()> {
    let scale = resolve_scale(global, file)?;
    let cfg: FinetuneConfig = resolve(
        FinetuneConfig::defaults(scale),
        file,
        &[serde_json::to_value(global)?, serde_json::to_value(args)?],
    )?;
    configure_threads(cfg.threads, cfg.deterministic)?;
    let data = required(&cfg.data, "data")?;
    let dir = required(&cfg.out, "out")?;

    let ws = Workspace::load(data, cfg.passages)?;
    let model_cfg = model_config(&ws, cfg.layers, cfg.hidden, cfg.heads)?;
    let pairs = ws.training_pairs(
        None,
        &PairOptions {
            negatives_per_positive: cfg.negatives_per_positive,
            passages_per_doc: cfg.passages_per_doc,
            seed: cfg.seed,
        },
    )?;
    if pairs.pairs.is_empty() {
        bail!("the training split yields no training pairs");
    }
    let plan = FinetunePlan {
        settings: StageSettings {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
        },
        weight_decay: cfg.weight_decay,
        seed: cfg.seed,
        select_best_epoch: cfg.select_best_epoch,
    };
    let depth = ws.full_depth();
    let validate = |m: &Encoder| ws.validation_mrr10(m, depth);
    let validator: Option<&Validator<'_>> = (!ws.splits.validation.is_empty()).then_some(&validate);
    let outcome = finetune(Encoder::new(model_cfg, cfg.seed)?, &pairs.pairs, &plan, validator)?;

    write_training_outputs(dir, &outcome, &cfg)?;
    print_outcome(&outcome);
    Ok(())
}

fn print_outcome(outcome: &TrainOutcome) {
    let steps: Vec<String> = outcome.stage_steps.iter().map(|(k, v)| format!("{k} {v}")).collect();
    let mut line = format!("{}: {} steps ({})", outcome.model.config.name(), outcome.total_steps, steps.join(", "));
    if let Some(h) = outcome.selected {
        line.push_str(&format!(", selected T={} alpha={}", h.temperature, h.alpha));
    }
    if let Some(s) = outcome.validation_mrr10 {
        line.push_str(&format!(", validation MRR@10 {s:.4}"));
    }
    println!("{line}");
}

fn distill_cmd(global: &GlobalArgs, args: &DistillArgs, file: &Map<String, Value>) -> anyhow::Result<()> {
    let scale = resolve_scale(global, file)?;
    let cfg: DistillConfig = resolve(
        DistillConfig::defaults(scale),
        file,
        &[serde_json::to_value(global)?, serde_json::to_value(args)?],
    )?;
    configure_threads(cfg.threads, cfg.deterministic)?;
    let data = required(&cfg.data, "data")?;
    let teacher_path = required(&cfg.teacher, "teacher")?;
    let dir = required(&cfg.out, "out")?;
    let plan = cfg.plan();
    plan.validate()?;

    let ws = Workspace::load(data, cfg.passages)?;
    let teacher = load_checkpoint(teacher_path).with_context(|| format!("loading {}", teacher_path.display()))?;
    check_model_fits(&teacher.config, &ws, "teacher checkpoint")?;
    let student_cfg = model_config(&ws, cfg.layers, cfg.hidden, cfg.heads)?;
    let pairs = ws.training_pairs(
        Some(&teacher),
        &PairOptions {
            negatives_per_positive: cfg.negatives_per_positive,
            passages_per_doc: cfg.passages_per_doc,
            seed: cfg.seed,
        },
    )?;
    if pairs.pairs.is_empty() {
        bail!("the training split yields no training pairs");
    }
    let depth = ws.full_depth();
    let validate = |m: &Encoder| ws.validation_mrr10(m, depth);
    let validator: Option<&Validator<'_>> = (!ws.splits.validation.is_empty()).then_some(&validate);
    let outcome = Distiller::new(&teacher, student_cfg, &pairs.pairs)?.run(&plan, validator)?;

    write_training_outputs(dir, &outcome, &cfg)?;
    print_outcome(&outcome);
    Ok(())
}

fn rerank_cmd(global: &GlobalArgs, args: &RerankArgs, file: &Map<String, Value>) -> anyhow::Result<()> {
    let scale = resolve_scale(global, file)?;
    let defaults = RerankConfig {
        data: None,
        model: None,
        out: None,
        scale,
        threads: None,
        deterministic: false,
        split: Split::Test,
        depth: None,
        tag: "distilrank".into(),
        passages: passages_for(scale),
    };
    let cfg: RerankConfig = resolve(defaults, file, &[serde_json::to_value(global)?, serde_json::to_value(args)?])?;
    configure_threads(cfg.threads, cfg.deterministic)?;
    let data = required(&cfg.data, "data")?;
    let model_path = required(&cfg.model, "model")?;
    let dir = required(&cfg.out, "out")?;
    if cfg.tag.is_empty() || cfg.tag.contains(char::is_whitespace) {
        bail!("run tag must be a single non-empty word");
    }

    let ws = Workspace::load(data, cfg.passages)?;
    let model = load_checkpoint(model_path).with_context(|| format!("loading {}", model_path.display()))?;
    check_model_fits(&model.config, &ws, "checkpoint")?;
    let qids = ws.query_ids(cfg.split);
    if qids.is_empty() {
        bail!("the {:?} split has no queries", cfg.split);
    }
    let depth = cfg.depth.unwrap_or_else(|| ws.full_depth());
    let run = ws.rerank(&model, qids, depth)?;
    let text = format_run(&run, &cfg.tag)?;

    let mut out = Outputs::new(dir)?;
    out.text(RUN_FILE, &text)?;
    out.json(CONFIG_FILE, &cfg)?;
    out.commit();
    println!("re-ranked {} queries at depth {depth}", qids.len());
    Ok(())
}

/// `b=runs/bm25.trec` → (`b`, path); a bare path takes the next free letter.
fn parse_baseline(spec: &str, index: usize) -> anyhow::Result<(char, PathBuf)> {
    let mut chars = spec.chars();
    if let (Some(c), Some('=')) = (chars.next(), chars.next()) {
        if !c.is_ascii_alphabetic() {
            bail!("baseline letter must be a-z, got `{c}`");
        }
        return Ok((c.to_ascii_lowercase(), PathBuf::from(chars.as_str())));
    }
    let letter = (b'a' + (index % 26) as u8) as char;
    Ok((letter, PathBuf::from(spec)))
}

fn evaluate_cmd(global: &GlobalArgs, args: &EvaluateArgs, file: &Map<String, Value>) -> anyhow::Result<()> {
    let defaults = EvaluateConfig {
        run: None,
        qrels: None,
        baseline: Vec::new(),
        out: None,
    };
    let cfg: EvaluateConfig = resolve(defaults, file, &[serde_json::to_value(global)?, serde_json::to_value(args)?])?;
    let run_path = required(&cfg.run, "run")?;
    let qrels = parse_qrels(required(&cfg.qrels, "qrels")?)?;
    let rankings = rankings_from_run(&parse_run(run_path)?);
    let mut report = MetricReport::new(&rankings, &qrels)?;
    for (i, spec) in cfg.baseline.iter().enumerate() {
        let (letter, path) = parse_baseline(spec, i)?;
        let mut baseline = rankings_from_run(&parse_run(&path)?);
        let extra = baseline.len();
        baseline.retain(|q, _| rankings.contains_key(q));
        if baseline.len() < extra {
            println!(
                "baseline {}: ignoring {} queries absent from the run",
                path.display(),
                extra - baseline.len()
            );
        }
        report.compare(&path.display().to_string(), letter, &baseline, &qrels)?;
    }
    if let Some(dir) = &cfg.out {
        let mut out = Outputs::new(dir)?;
        out.json(METRICS_FILE, &report)?;
        out.json(CONFIG_FILE, &cfg)?;
        out.commit();
    }
    if report.unjudged_queries > 0 {
        println!("{} of {} queries have no judgments and score 0", report.unjudged_queries, report.num_queries);
    }
    print!("{}", report.summary());
    Ok(())
}

/// Three significant digits: `1.00`, `15.2`, `152`.
fn format_ratio(r: f64) -> String {
    if r >= 99.95 {
        format!("{r:.0}")
    } else if r >= 9.995 {
        format!("{r:.1}")
    } else {
        format!("{r:.2}")
    }
}

fn flops_cmd(global: &GlobalArgs, args: &FlopsArgs, file: &Map<String, Value>) -> anyhow::Result<()> {
    let defaults = FlopsConfig {
        layers: 12,
        hidden: 768,
        intermediate: None,
        seq: 256,
        baseline: None,
    };
    let cfg: FlopsConfig = resolve(defaults, file, &[serde_json::to_value(global)?, serde_json::to_value(args)?])?;
    if cfg.seq == 0 {
        bail!("--seq must be positive");
    }
    let shape = |layers: usize, hidden: usize, intermediate: Option<usize>| -> anyhow::Result<EncoderConfig> {
        let mut c = EncoderConfig::new(layers, hidden, 1, cfg.seq);
        if let Some(i) = intermediate {
            c = c.with_intermediate(i);
        }
        c.validate()?;
        Ok(c)
    };
    let model = shape(cfg.layers, cfg.hidden, cfg.intermediate)?;
    let reference = match &cfg.baseline {
        Some(s) => {
            let (l, h) = s
                .split_once(',')
                .and_then(|(l, h)| Some((l.trim().parse().ok()?, h.trim().parse().ok()?)))
                .ok_or_else(|| anyhow!("--baseline expects LAYERS,HIDDEN, got `{s}`"))?;
            shape(l, h, None)?
        }
        None => model.clone(),
    };
    println!(
        "{} ({}×)",
        format_giga(estimate_macs(&model, cfg.seq)),
        format_ratio(speedup(&model, &reference, cfg.seq))
    );
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = load_config_file(cli.global.config.as_deref())?;
    let g = &cli.global;
    match &cli.command {
        Command::GenSynth(a) => gen_synth(g, a, &file),
        Command::Finetune(a) => finetune_cmd(g, a, &file),
        Command::Distill(a) => distill_cmd(g, a, &file),
        Command::Rerank(a) => rerank_cmd(g, a, &file),
        Command::Evaluate(a) => evaluate_cmd(g, a, &file),
        Command::Flops(a) => flops_cmd(g, a, &file),
    }
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// The error and its causes on one line, skipping causes whose text the
/// message above already includes.
fn diagnostic(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    one_line(&out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", diagnostic(&e));
            ExitCode::FAILURE
        }
    }
}
