//! Training loops: teacher fine-tuning and the distillation pipelines.

use std::sync::OnceLock;
use std::collections::BTreeMap;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layer_map::{uniform_layer_map, LayerMap};
use super::losses::{
    attention_targets, combine_loss, pair_mask, row_mask, soft_targets, Component, KDHyper, LossBreakdown,
    LossInputs, Objective, ProjectionSet,
};
use super::plan::{DistillPlan, FinetunePlan, StagePlan, StageSettings};
use crate::autodiff::{AdamConfig, AdamState, Graph, Tensor, Var};
use crate::encoder::{forward, init_student_from_teacher, Encoder, EncoderConfig, EncoderInput, EncoderParams};
use crate::error::{Error, Result};
use crate::rank::TrainingPair;

/// What the student is matched against for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTargets {
    pub logits: Vec<f64>,
    pub embedding: Tensor,
    /// Teacher hidden state at `g(m)` for each student layer `m`.
    pub hidden: Vec<Tensor>,
    /// Per student layer: one `n×n` score matrix per head, or a single
    /// head-averaged matrix when the head counts differ.
    pub attention: Vec<Vec<Vec<f64>>>,
}

impl TeacherTargets {
    pub fn new(teacher: &Encoder, input: &EncoderInput, map: &LayerMap, student: &EncoderConfig) -> Result<Self> {
        let trace = teacher.encode(input)?;
        Ok(Self::from_trace(&trace, map, student.num_heads != teacher.config.num_heads))
    }

    pub fn from_trace(trace: &crate::encoder::EncoderTrace, map: &LayerMap, average_heads: bool) -> Self {
        let layers = 0..map.student_layers;
        Self {
            logits: trace.logits.data().to_vec(),
            embedding: trace.embedding_output.clone(),
            hidden: layers.clone().map(|m| trace.hidden_states[map.teacher_index(m)].clone()).collect(),
            attention: layers
                .map(|m| attention_targets(&trace.attention_scores[map.teacher_index(m)], average_heads))
                .collect(),
        }
    }
}

/// Loss components as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_attn: Option<Var>,
    pub l_hidn: Option<Var>,
    pub l_emb: Option<Var>,
    pub l_soft: Option<Var>,
    pub l_hard: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossInputs {
        let get = |v: Option<Var>| v.map(|v| g.value(v).item());
        LossInputs {
            l_attn: get(self.l_attn),
            l_hidn: get(self.l_hidn),
            l_emb: get(self.l_emb),
            l_soft: get(self.l_soft),
            l_hard: get(self.l_hard),
        }
    }
}

/// Trainable projection nodes; `None` when the projections are frozen
/// identities and can be skipped.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionVars {
    pub hidden: Var,
    pub embedding: Var,
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let w = 1.0 / terms.len() as f64;
    let weighted: Vec<(Var, f64)> = terms.iter().map(|&v| (v, w)).collect();
    g.weighted_sum(&weighted)
}

fn project(g: &mut Graph, x: Var, p: Option<Var>) -> Result<Var> {
    match p {
        Some(w) => g.matmul(x, w),
        None => Ok(x),
    }
}

/// Records the student forward pass and the objective's losses for one
/// labelled input.
#[allow(clippy::too_many_arguments)]
pub fn pair_loss(
    g: &mut Graph,
    student_cfg: &EncoderConfig,
    student: &EncoderParams<Var>,
    projections: Option<ProjectionVars>,
    input: &EncoderInput,
    label: usize,
    teacher_logits: &[f64],
    teacher: Option<&TeacherTargets>,
    objective: Objective,
    hyper: &KDHyper,
) -> Result<LossVars> {
    let trace = forward(g, student_cfg, student, input)?;
    let mut out = LossVars {
        l_attn: None,
        l_hidn: None,
        l_emb: None,
        l_soft: None,
        l_hard: None,
        total: trace.logits,
    };
    if objective.needs_teacher_internals() {
        let t = teacher.ok_or_else(|| Error::Contract(format!("{objective:?} needs teacher internals")))?;
        if t.hidden.len() != student_cfg.num_layers {
            return Err(Error::Contract("teacher targets were built for another student depth".into()));
        }
        let real = input.real_mask();
        let padded = real.contains(&0.0);
        let amask = padded.then(|| pair_mask(&real));
        let hmask = padded.then(|| row_mask(&real, t.embedding.cols()));
        let n = input.len();

        let mut attn_layers = Vec::with_capacity(student_cfg.num_layers);
        let mut hidn_layers = Vec::with_capacity(student_cfg.num_layers);
        for m in 0..student_cfg.num_layers {
            let heads = &trace.attention_scores[m];
            let student_heads: Vec<Var> = if t.attention[m].len() == heads.len() {
                heads.clone()
            } else {
                vec![mean_of(g, heads)?]
            };
            let mut per_head = Vec::with_capacity(student_heads.len());
            for (s, target) in student_heads.iter().zip(&t.attention[m]) {
                let tv = g.constant(Tensor::new(vec![n, n], target.clone())?);
                per_head.push(g.masked_mse(*s, tv, amask.clone())?);
            }
            attn_layers.push(mean_of(g, &per_head)?);

            let proj = project(g, trace.hidden_states[m], projections.map(|p| p.hidden))?;
            let tv = g.constant(t.hidden[m].clone());
            hidn_layers.push(g.masked_mse(proj, tv, hmask.clone())?);
        }
        out.l_attn = Some(mean_of(g, &attn_layers)?);
        out.l_hidn = Some(mean_of(g, &hidn_layers)?);
        let proj = project(g, trace.embedding_output, projections.map(|p| p.embedding))?;
        let tv = g.constant(t.embedding.clone());
        out.l_emb = Some(g.masked_mse(proj, tv, hmask)?);
    }
    if objective.needs(Component::Soft) {
        let target = soft_targets(teacher_logits, hyper.temperature);
        let t2 = hyper.temperature * hyper.temperature;
        out.l_soft = Some(g.soft_cross_entropy(trace.logits, &target, hyper.temperature, t2)?);
    }
    if objective.needs(Component::Hard) {
        let mut onehot = vec![0.0; student_cfg.num_labels];
        *onehot
            .get_mut(label)
            .ok_or_else(|| Error::Contract(format!("label {label} outside the label set")))? = 1.0;
        out.l_hard = Some(g.soft_cross_entropy(trace.logits, &onehot, 1.0, 1.0)?);
    }
    let terms: Vec<(Var, f64)> = objective
        .weights(hyper)
        .into_iter()
        .map(|(c, w)| {
            let v = match c {
                Component::Attn => out.l_attn,
                Component::Hidn => out.l_hidn,
                Component::Emb => out.l_emb,
                Component::Soft => out.l_soft,
                Component::Hard => out.l_hard,
            };
            (v.expect("component built above"), w)
        })
        .collect();
    out.total = g.weighted_sum(&terms)?;
    Ok(out)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub mode: String,
    pub stage: String,
    pub l_attn: f64,
    pub l_hidn: f64,
    pub l_emb: f64,
    pub l_soft: f64,
    pub l_hard: f64,
    pub total: f64,
    pub lr: f64,
}

pub fn format_log(records: &[LogRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Pair visiting order for one epoch: a function of the seed and the epoch
/// index only, so every pipeline sees the same sequence.
pub fn epoch_order(num_pairs: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..num_pairs).collect();
    order.shuffle(&mut rng);
    order
}

/// Validation MRR@10 of a model.
pub type Validator<'a> = dyn Fn(&Encoder) -> Result<f64> + Sync + 'a;

struct StageContext<'a> {
    mode: &'a str,
    pairs: &'a [TrainingPair],
    teacher_logits: Option<&'a [Vec<f64>]>,
    teacher_targets: Option<&'a [TeacherTargets]>,
    seed: u64,
    weight_decay: f64,
}

#[derive(Clone, Debug, Default)]
pub struct StageOutcome {
    pub steps: u64,
    /// Validation MRR@10 after each epoch, when a validator was given.
    pub epoch_scores: Vec<f64>,
    pub best_epoch: Option<usize>,
}

fn train_stage(
    student: &mut Encoder,
    projections: &mut ProjectionSet,
    stage: &StagePlan,
    ctx: &StageContext<'_>,
    step: &mut u64,
    log: &mut Vec<LogRecord>,
    validate: Option<&Validator<'_>>,
) -> Result<StageOutcome> {
    stage.settings.validate(stage.name)?;
    if ctx.pairs.is_empty() {
        return Err(Error::Contract("no training pairs".into()));
    }
    let cfg = student.config.clone();
    let mut adam = AdamState::new(AdamConfig {
        learning_rate: stage.settings.learning_rate,
        weight_decay: ctx.weight_decay,
        ..AdamConfig::default()
    });
    let use_proj = stage.objective.needs_teacher_internals() && projections.trainable;
    let mut outcome = StageOutcome::default();
    let mut best: Option<(f64, Encoder)> = None;

    for epoch in 0..stage.settings.epochs {
        let order = epoch_order(ctx.pairs.len(), ctx.seed, epoch);
        for batch in order.chunks(stage.settings.batch_size) {
            let mut g = Graph::new();
            let sv = student.params.bind(&mut g, true);
            let pv = use_proj.then(|| ProjectionVars {
                hidden: g.param(&projections.hidden),
                embedding: g.param(&projections.embedding),
            });
            let mut totals = Vec::with_capacity(batch.len());
            let mut sums = [0.0f64; 5];
            let mut seen = [false; 5];
            for &i in batch {
                let pair = &ctx.pairs[i];
                let logits: &[f64] = match (ctx.teacher_logits, &pair.teacher_logits) {
                    (Some(all), _) => &all[i],
                    (None, Some(l)) => l,
                    (None, None) => &[],
                };
                let lv = pair_loss(
                    &mut g,
                    &cfg,
                    &sv,
                    pv,
                    &pair.input,
                    pair.label,
                    logits,
                    ctx.teacher_targets.map(|t| &t[i]),
                    stage.objective,
                    &stage.hyper,
                )?;
                let vals = lv.values(&g);
                for (k, v) in [vals.l_attn, vals.l_hidn, vals.l_emb, vals.l_soft, vals.l_hard]
                    .into_iter()
                    .enumerate()
                {
                    if let Some(v) = v {
                        sums[k] += v;
                        seen[k] = true;
                    }
                }
                totals.push(lv.total);
            }
            let loss = mean_of(&mut g, &totals)?;
            let n = batch.len() as f64;
            let mean = |k: usize| seen[k].then(|| sums[k] / n);
            let inputs = LossInputs {
                l_attn: mean(0),
                l_hidn: mean(1),
                l_emb: mean(2),
                l_soft: mean(3),
                l_hard: mean(4),
            };
            let loss_value = g.value(loss).item();
            let breakdown = match combine_loss(&inputs, stage.objective, &stage.hyper) {
                Ok(b) if loss_value.is_finite() => b,
                Ok(_) | Err(Error::NonFinite(_)) => {
                    return Err(Error::Diverged {
                        step: *step + 1,
                        detail: format!("{} loss is {loss_value}", stage.name),
                    })
                }
                Err(e) => return Err(e),
            };

            let grads = g.backward(loss)?;
            let named = sv.named();
            let mut params = student.params.values_mut();
            for ((_, var), t) in named.iter().zip(params.iter_mut()) {
                t.grad = Some(grads.get_or_zeros(**var, t.numel()));
            }
            if let Some(pv) = pv {
                projections.hidden.grad = Some(grads.get_or_zeros(pv.hidden, projections.hidden.numel()));
                projections.embedding.grad =
                    Some(grads.get_or_zeros(pv.embedding, projections.embedding.numel()));
                let [h, e] = projections.tensors_mut();
                params.push(h);
                params.push(e);
            }
            adam.step(&mut params).map_err(|e| match e {
                Error::PoisonedStep { param } => Error::Diverged {
                    step: *step + 1,
                    detail: format!("non-finite gradient in {param}"),
                },
                other => other,
            })?;
            *step += 1;
            outcome.steps += 1;
            log.push(LogRecord {
                step: *step,
                mode: ctx.mode.to_string(),
                stage: stage.name.to_string(),
                l_attn: breakdown.l_attn,
                l_hidn: breakdown.l_hidn,
                l_emb: breakdown.l_emb,
                l_soft: breakdown.l_soft,
                l_hard: breakdown.l_hard,
                total: breakdown.total,
                lr: stage.settings.learning_rate,
            });
        }
        if let Some(validate) = validate {
            let score = validate(student)?;
            info!("{} {} epoch {}: validation MRR@10 {score:.4}", ctx.mode, stage.name, epoch + 1);
            outcome.epoch_scores.push(score);
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, student.clone()));
                outcome.best_epoch = Some(epoch);
            }
        }
    }
    if let Some((_, model)) = best {
        *student = model;
    }
    Ok(outcome)
}

/// Training summary of one fine-tuning or distillation run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Encoder,
    pub log: Vec<LogRecord>,
    pub total_steps: u64,
    pub stage_steps: BTreeMap<String, u64>,
    /// Validation MRR@10 of the returned model, when validated.
    pub validation_mrr10: Option<f64>,
    /// Standard KD only: the selected (T, α).
    pub selected: Option<KDHyper>,
    /// Standard KD only: validation MRR@10 of every grid candidate.
    pub grid_scores: Vec<(KDHyper, f64)>,
}

/// Fine-tunes `model` on hard labels.
pub fn finetune(
    model: Encoder,
    pairs: &[TrainingPair],
    plan: &FinetunePlan,
    validate: Option<&Validator<'_>>,
) -> Result<TrainOutcome> {
    let stage = StagePlan {
        name: "finetune",
        objective: Objective::Hard,
        settings: plan.settings,
        hyper: KDHyper::default(),
    };
    let ctx = StageContext {
        mode: "finetune",
        pairs,
        teacher_logits: None,
        teacher_targets: None,
        seed: plan.seed,
        weight_decay: plan.weight_decay,
    };
    let mut model = model;
    let mut projections = ProjectionSet::new(1, 1, 0);
    let mut log = Vec::new();
    let mut step = 0;
    let v = if plan.select_best_epoch { validate } else { None };
    let out = train_stage(&mut model, &mut projections, &stage, &ctx, &mut step, &mut log, v)?;
    let validation_mrr10 = match (v, validate) {
        (Some(_), _) => out.best_epoch.map(|e| out.epoch_scores[e]),
        (None, Some(f)) => Some(f(&model)?),
        (None, None) => None,
    };
    Ok(TrainOutcome {
        model,
        log,
        total_steps: step,
        stage_steps: BTreeMap::from([("finetune".to_string(), step)]),
        validation_mrr10,
        selected: None,
        grid_scores: Vec::new(),
    })
}

/// A teacher, a student shape and the training pairs, with teacher outputs
/// computed once and shared by every run.
pub struct Distiller<'a> {
    teacher: &'a Encoder,
    student_config: EncoderConfig,
    pairs: &'a [TrainingPair],
    map: LayerMap,
    logits: OnceLock<Vec<Vec<f64>>>,
    targets: OnceLock<Vec<TeacherTargets>>,
}

impl<'a> Distiller<'a> {
    pub fn new(teacher: &'a Encoder, student_config: EncoderConfig, pairs: &'a [TrainingPair]) -> Result<Self> {
        student_config.validate()?;
        if pairs.is_empty() {
            return Err(Error::Contract("no training pairs".into()));
        }
        if student_config.vocab_size != teacher.config.vocab_size
            || student_config.num_labels != teacher.config.num_labels
        {
            return Err(Error::IncompatibleShapes(format!(
                "student {} and teacher {} disagree on vocabulary or label set",
                student_config.name(),
                teacher.config.name()
            )));
        }
        let map = uniform_layer_map(student_config.num_layers, teacher.config.num_layers)?;
        Ok(Self {
            teacher,
            student_config,
            pairs,
            map,
            logits: OnceLock::new(),
            targets: OnceLock::new(),
        })
    }

    pub fn layer_map(&self) -> &LayerMap {
        &self.map
    }

    fn teacher_logits(&self) -> Result<&[Vec<f64>]> {
        if let Some(l) = self.logits.get() {
            return Ok(l);
        }
        let computed: Vec<Result<Vec<f64>>> = self
            .pairs
            .par_iter()
            .map_init(
                || self.teacher.session(),
                |s, p| match p.teacher_logits {
                    Some(l) => Ok(l.to_vec()),
                    None => s.logits(&p.input),
                },
            )
            .collect();
        let computed = computed.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(self.logits.get_or_init(|| computed))
    }

    fn teacher_targets(&self) -> Result<&[TeacherTargets]> {
        if let Some(t) = self.targets.get() {
            return Ok(t);
        }
        let average = self.student_config.num_heads != self.teacher.config.num_heads;
        let computed: Vec<Result<TeacherTargets>> = self
            .pairs
            .par_iter()
            .map_init(
                || self.teacher.session(),
                |s, p| Ok(TeacherTargets::from_trace(&s.encode(&p.input)?, &self.map, average)),
            )
            .collect();
        let computed = computed.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(self.targets.get_or_init(|| computed))
    }

    fn initial_student(&self, plan: &DistillPlan) -> Result<Encoder> {
        match plan.init_from_first_k {
            Some(k) if k != self.student_config.num_layers => Err(Error::Contract(format!(
                "first-k initialization copies k = {k} layers into a {}-layer student",
                self.student_config.num_layers
            ))),
            Some(_) => init_student_from_teacher(self.teacher, &self.student_config, plan.seed),
            None => Encoder::new(self.student_config.clone(), plan.seed),
        }
    }

    fn projections(&self, seed: u64) -> ProjectionSet {
        ProjectionSet::new(
            self.student_config.hidden_size,
            self.teacher.config.hidden_size,
            seed ^ 0x005e_ed0f_7a0e,
        )
    }

    fn run_schedule(
        &self,
        plan: &DistillPlan,
        stages: &[StagePlan],
        validate: Option<&Validator<'_>>,
    ) -> Result<(Encoder, Vec<LogRecord>, BTreeMap<String, u64>, Option<f64>)> {
        let mut student = self.initial_student(plan)?;
        let mut projections = self.projections(plan.seed);
        let logits = if stages.iter().any(|s| s.objective.needs(Component::Soft)) {
            Some(self.teacher_logits()?)
        } else {
            None
        };
        let targets = if stages.iter().any(|s| s.objective.needs_teacher_internals()) {
            Some(self.teacher_targets()?)
        } else {
            None
        };
        let ctx = StageContext {
            mode: plan.mode.name(),
            pairs: self.pairs,
            teacher_logits: logits,
            teacher_targets: targets,
            seed: plan.seed,
            weight_decay: plan.weight_decay,
        };
        let mut log = Vec::new();
        let mut step = 0;
        let mut stage_steps = BTreeMap::new();
        let mut score = None;
        for (i, stage) in stages.iter().enumerate() {
            let last = i + 1 == stages.len();
            let v = if last && plan.select_best_epoch { validate } else { None };
            let out = train_stage(&mut student, &mut projections, stage, &ctx, &mut step, &mut log, v)?;
            *stage_steps.entry(stage.name.to_string()).or_insert(0) += out.steps;
            if let Some(e) = out.best_epoch {
                score = Some(out.epoch_scores[e]);
            }
        }
        if score.is_none() {
            if let Some(f) = validate {
                score = Some(f(&student)?);
            }
        }
        Ok((student, log, stage_steps, score))
    }

    /// Executes the plan's schedule. Standard KD trains one candidate per
    /// grid point and keeps the best validation MRR@10, ties going to the
    /// earlier (smaller T, then smaller α) candidate.
    pub fn run(&self, plan: &DistillPlan, validate: Option<&Validator<'_>>) -> Result<TrainOutcome> {
        plan.validate()?;
        let schedules = plan.schedule();
        if schedules.len() > 1 && validate.is_none() {
            return Err(Error::Contract("standard_kd grid search needs a validation set".into()));
        }
        let mut best: Option<(f64, TrainOutcome)> = None;
        let mut grid_scores = Vec::new();
        for stages in &schedules {
            let (model, log, stage_steps, score) = self.run_schedule(plan, stages, validate)?;
            let total_steps = stage_steps.values().sum();
            let outcome = TrainOutcome {
                model,
                log,
                total_steps,
                stage_steps,
                validation_mrr10: score,
                selected: (plan.mode == super::DistillMode::StandardKd).then_some(stages[0].hyper),
                grid_scores: Vec::new(),
            };
            if schedules.len() == 1 {
                return Ok(outcome);
            }
            let s = score.expect("validated");
            info!(
                "standard_kd T={} alpha={}: validation MRR@10 {s:.4}",
                stages[0].hyper.temperature, stages[0].hyper.alpha
            );
            grid_scores.push((stages[0].hyper, s));
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, outcome));
            }
        }
        let (_, mut outcome) = best.expect("non-empty grid");
        outcome.grid_scores = grid_scores;
        Ok(outcome)
    }

    /// Intermediate-layer distillation of `student` over the pairs' inputs,
    /// ignoring labels; the general-distillation step when run with a
    /// teacher that has not been fine-tuned.
    pub fn general_distillation(
        &self,
        student: Encoder,
        settings: StageSettings,
        seed: u64,
    ) -> Result<(Encoder, Vec<LogRecord>)> {
        if student.config != self.student_config {
            return Err(Error::Contract("student does not match the distiller's student shape".into()));
        }
        let stage = StagePlan {
            name: "general",
            objective: Objective::Intermediate,
            settings,
            hyper: KDHyper::default(),
        };
        let ctx = StageContext {
            mode: "general",
            pairs: self.pairs,
            teacher_logits: None,
            teacher_targets: Some(self.teacher_targets()?),
            seed,
            weight_decay: 0.01,
        };
        let mut student = student;
        let mut projections = self.projections(seed);
        let mut log = Vec::new();
        let mut step = 0;
        train_stage(&mut student, &mut projections, &stage, &ctx, &mut step, &mut log, None)?;
        Ok((student, log))
    }
}

/// Distills `teacher` into a fresh student of `student_config` following
/// `plan`.
pub fn run_distillation(
    plan: &DistillPlan,
    teacher: &Encoder,
    student_config: &EncoderConfig,
    pairs: &[TrainingPair],
    validate: Option<&Validator<'_>>,
) -> Result<TrainOutcome> {
    Distiller::new(teacher, student_config.clone(), pairs)?.run(plan, validate)
}

/// Mean loss breakdown of an objective over `pairs` at the given weights,
/// without updating anything.
pub fn evaluate_objective(
    student: &Encoder,
    teacher: &Encoder,
    pairs: &[TrainingPair],
    objective: Objective,
    hyper: &KDHyper,
) -> Result<LossBreakdown> {
    let d = Distiller::new(teacher, student.config.clone(), pairs)?;
    let logits = d.teacher_logits()?;
    let targets = if objective.needs_teacher_internals() {
        Some(d.teacher_targets()?)
    } else {
        None
    };
    let projections = d.projections(0);
    let mut g = Graph::new();
    let sv = student.params.bind(&mut g, false);
    let pv = (objective.needs_teacher_internals() && projections.trainable).then(|| ProjectionVars {
        hidden: g.constant(projections.hidden.clone()),
        embedding: g.constant(projections.embedding.clone()),
    });
    let mark = g.len();
    let mut sums = LossInputs::default();
    let add = |acc: &mut Option<f64>, v: Option<f64>| {
        if let Some(v) = v {
            *acc = Some(acc.unwrap_or(0.0) + v / pairs.len() as f64);
        }
    };
    for (i, p) in pairs.iter().enumerate() {
        let lv = pair_loss(
            &mut g,
            &student.config,
            &sv,
            pv,
            &p.input,
            p.label,
            &logits[i],
            targets.map(|t| &t[i]),
            objective,
            hyper,
        )?;
        let v = lv.values(&g);
        add(&mut sums.l_attn, v.l_attn);
        add(&mut sums.l_hidn, v.l_hidn);
        add(&mut sums.l_emb, v.l_emb);
        add(&mut sums.l_soft, v.l_soft);
        add(&mut sums.l_hard, v.l_hard);
        g.truncate(mark);
    }
    combine_loss(&sums, objective, hyper)
}
