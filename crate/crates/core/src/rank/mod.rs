//! Passage splitting, MaxP scoring, training pairs and re-ranking.

mod pairs;
mod passage;
mod score;

pub use pairs::{build_training_pairs, PairOptions, PairSet, TrainingPair};
pub use passage::{document_tokens, pair_input, split_passages, Passage, PassageSplitConfig, SPECIAL_TOKENS};
pub use score::{
    max_p, rerank, rerank_all, rerank_with_scores, score_candidates, score_document, Candidate, DocScore,
    ScoreTable, TokenizedCorpus,
};
