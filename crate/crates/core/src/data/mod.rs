//! Tokenization, collection files and the synthetic corpus.

pub mod collection;
pub mod synthetic;
pub mod vocab;

pub use collection::{
    cmp_ids, format_run, parse_collection, parse_docs, parse_qrels, parse_queries, parse_run, write_run, Collection,
    CollectionPaths, Document, RunRecord,
};
pub use synthetic::{gen_synthetic_corpus, Splits, SyntheticCorpus, SyntheticSpec};
pub use vocab::{basic_split, Vocab};
