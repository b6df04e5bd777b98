//! Glue between data, models and metrics: everything a command or an
//! end-to-end run needs once a corpus is on disk or in memory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    format_run, gen_synthetic_corpus, parse_collection, Collection, CollectionPaths, RunRecord, Splits,
    SyntheticSpec, Vocab,
};
use crate::data::collection::{format_docs, format_qrels, format_queries};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::{mrr, rankings_from_run, MetricReport};
use crate::rank::{
    build_training_pairs, rerank_with_scores, score_candidates, PairOptions, PairSet, PassageSplitConfig,
    ScoreTable, TokenizedCorpus,
};

pub const SPLITS_FILE: &str = "splits.json";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Passage settings for desk-scale corpora: 16-token windows, so inputs
/// never exceed 32 tokens.
pub fn desk_split_config() -> PassageSplitConfig {
    PassageSplitConfig {
        window: 16,
        stride: 8,
        max_query_tokens: 8,
        max_input_tokens: 32,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// A loaded corpus with its vocabulary, token ids and query splits.
pub struct Workspace {
    pub collection: Collection,
    pub splits: Splits,
    pub vocab: Vocab,
    pub corpus: TokenizedCorpus,
    pub split_config: PassageSplitConfig,
}

impl Workspace {
    /// Builds the vocabulary from every query and document so each
    /// pseudo-word is a single token.
    pub fn from_collection(collection: Collection, splits: Splits, split_config: PassageSplitConfig) -> Result<Self> {
        split_config.validate()?;
        let texts = collection
            .queries
            .values()
            .map(String::as_str)
            .chain(collection.docs.values().flat_map(|d| [d.title.as_str(), d.body.as_str()]));
        let vocab = Vocab::build(texts, usize::MAX);
        Self::with_vocab(collection, splits, vocab, split_config)
    }

    pub fn with_vocab(
        collection: Collection,
        splits: Splits,
        vocab: Vocab,
        split_config: PassageSplitConfig,
    ) -> Result<Self> {
        split_config.validate()?;
        let corpus = TokenizedCorpus::new(&collection, &vocab);
        Ok(Self {
            collection,
            splits,
            vocab,
            corpus,
            split_config,
        })
    }

    pub fn synthetic(spec: &SyntheticSpec, seed: u64, split_config: PassageSplitConfig) -> Result<Self> {
        let c = gen_synthetic_corpus(spec, seed)?;
        Self::from_collection(c.collection, c.splits, split_config)
    }

    /// Writes the corpus files, the splits and the vocabulary into `dir`.
    /// Returns the paths written.
    pub fn save(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        let paths = CollectionPaths::in_dir(dir);
        let write = |p: &Path, text: String| std::fs::write(p, text).map_err(|e| Error::io(p, e));
        let candidates: Vec<RunRecord> = self.collection.candidates.values().flatten().cloned().collect();
        write(&paths.queries, format_queries(&self.collection.queries))?;
        write(&paths.docs, format_docs(self.collection.docs.values()))?;
        write(&paths.qrels, format_qrels(&self.collection.qrels))?;
        write(&paths.candidates, format_run(&candidates, "first_stage")?)?;
        let splits = dir.join(SPLITS_FILE);
        write(&splits, serde_json::to_string_pretty(&self.splits)? + "\n")?;
        let vocab = dir.join(VOCAB_FILE);
        self.vocab.save(&vocab)?;
        Ok(vec![paths.queries, paths.docs, paths.qrels, paths.candidates, splits, vocab])
    }

    /// Loads a directory written by [`Workspace::save`]. Without a vocabulary
    /// file one is built from the corpus; without a splits file every query
    /// counts as a test query.
    pub fn load(dir: &Path, split_config: PassageSplitConfig) -> Result<Self> {
        let collection = parse_collection(&CollectionPaths::in_dir(dir))?;
        let splits_path = dir.join(SPLITS_FILE);
        let splits = if splits_path.exists() {
            let text = std::fs::read_to_string(&splits_path).map_err(|e| Error::io(&splits_path, e))?;
            serde_json::from_str(&text)?
        } else {
            Splits {
                test: collection.queries.keys().cloned().collect(),
                ..Splits::default()
            }
        };
        let vocab_path = dir.join(VOCAB_FILE);
        if vocab_path.exists() {
            Self::with_vocab(collection, splits, Vocab::load(&vocab_path)?, split_config)
        } else {
            Self::from_collection(collection, splits, split_config)
        }
    }

    pub fn query_ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.splits.train,
            Split::Validation => &self.splits.validation,
            Split::Test => &self.splits.test,
        }
    }

    /// An encoder shape sized to this corpus's vocabulary and input budget.
    pub fn encoder_config(&self, layers: usize, hidden: usize) -> EncoderConfig {
        EncoderConfig::new(layers, hidden, self.vocab.len(), self.split_config.max_input_tokens)
    }

    pub fn training_pairs(&self, teacher: Option<&Encoder>, opts: &PairOptions) -> Result<PairSet> {
        build_training_pairs(
            teacher,
            &self.vocab,
            &self.corpus,
            &self.collection,
            &self.splits.train,
            opts,
            &self.split_config,
        )
    }

    pub fn score(&self, model: &Encoder, query_ids: &[String], depth: usize) -> Result<ScoreTable> {
        if model.config.vocab_size != self.vocab.len() {
            return Err(Error::IncompatibleShapes(format!(
                "model vocabulary has {} entries, corpus vocabulary {}",
                model.config.vocab_size,
                self.vocab.len()
            )));
        }
        score_candidates(
            model,
            &self.vocab,
            &self.corpus,
            &self.collection.candidates,
            query_ids,
            depth,
            &self.split_config,
        )
    }

    pub fn rerank(&self, model: &Encoder, query_ids: &[String], depth: usize) -> Result<Vec<RunRecord>> {
        let scores = self.score(model, query_ids, depth)?;
        rerank_with_scores(&self.collection.candidates, query_ids, depth, &scores)
    }

    /// Mean MRR@10 of `model` re-ranking the validation queries at `depth`.
    pub fn validation_mrr10(&self, model: &Encoder, depth: usize) -> Result<f64> {
        let run = self.rerank(model, &self.splits.validation, depth)?;
        Ok(mrr(&rankings_from_run(&run), &self.collection.qrels, Some(10))?.mean)
    }

    pub fn report(&self, run: &[RunRecord]) -> Result<MetricReport> {
        MetricReport::new(&rankings_from_run(run), &self.collection.qrels)
    }

    /// Depth that re-ranks every candidate of every query.
    pub fn full_depth(&self) -> usize {
        self.collection.candidates.values().map(Vec::len).max().unwrap_or(1)
    }
}
