use std::cmp::Ordering;

use log::warn;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::passage::{pair_input, split_passages, PassageSplitConfig};
use super::score::TokenizedCorpus;
use crate::data::{cmp_ids, Collection, Vocab};
use crate::encoder::{relevance_score, Encoder, EncoderInput};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub query_id: String,
    pub doc_id: String,
    pub offset: usize,
    /// `[CLS] query [SEP] passage [SEP]`.
    pub input: EncoderInput,
    pub label: usize,
    pub teacher_logits: Option<[f64; 2]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairOptions {
    /// Non-relevant candidates sampled per relevant document.
    pub negatives_per_positive: usize,
    /// Passages kept per selected document.
    pub passages_per_doc: usize,
    pub seed: u64,
}

impl Default for PairOptions {
    fn default() -> Self {
        Self {
            negatives_per_positive: 4,
            passages_per_doc: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PairSet {
    pub pairs: Vec<TrainingPair>,
    /// Queries without a judged relevant document.
    pub skipped_queries: usize,
}

struct Selection<'a> {
    query_id: &'a str,
    docs: Vec<(String, usize)>,
}

/// Training pairs for `query_ids`: the relevant documents plus negatives
/// sampled uniformly from the non-relevant candidates. From each document
/// the `passages_per_doc` passages with the highest teacher score are kept
/// (ties to the earlier offset), in offset order, with the teacher logits
/// cached. Without a teacher the leading passages are kept and no logits are
/// cached.
pub fn build_training_pairs(
    teacher: Option<&Encoder>,
    vocab: &Vocab,
    corpus: &TokenizedCorpus,
    collection: &Collection,
    query_ids: &[String],
    opts: &PairOptions,
    cfg: &PassageSplitConfig,
) -> Result<PairSet> {
    cfg.validate()?;
    if opts.passages_per_doc == 0 {
        return Err(Error::Contract("passages_per_doc must be positive".into()));
    }
    let mut ids: Vec<&String> = query_ids.iter().collect();
    ids.sort_by(|a, b| cmp_ids(a, b));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut selections = Vec::with_capacity(ids.len());
    let mut skipped = 0;
    for qid in ids {
        let mut positives: Vec<&str> = collection
            .qrels
            .relevant(qid)
            .filter(|d| collection.docs.contains_key(*d))
            .collect();
        if positives.is_empty() {
            skipped += 1;
            continue;
        }
        positives.sort_by(|a, b| cmp_ids(a, b));
        let pool: Vec<&str> = collection
            .candidates
            .get(qid.as_str())
            .map(|list| {
                list.iter()
                    .map(|r| r.doc_id.as_str())
                    .filter(|d| collection.qrels.grade(qid, d) == 0 && collection.docs.contains_key(*d))
                    .collect()
            })
            .unwrap_or_default();
        let want = (opts.negatives_per_positive * positives.len()).min(pool.len());
        let mut picked: Vec<usize> = sample(&mut rng, pool.len(), want).into_vec();
        picked.sort_unstable();
        let docs = positives
            .into_iter()
            .map(|d| (d.to_string(), 1))
            .chain(picked.into_iter().map(|i| (pool[i].to_string(), 0)))
            .collect();
        selections.push(Selection { query_id: qid, docs });
    }
    if skipped > 0 {
        warn!("{skipped} queries without a relevant document were skipped");
    }

    let per_query: Vec<Result<Vec<TrainingPair>>> = selections
        .par_iter()
        .map_init(
            || teacher.map(Encoder::session),
            |session, sel| {
                let query = corpus.query(sel.query_id)?;
                let mut out = Vec::new();
                for (doc_id, label) in &sel.docs {
                    let passages = split_passages(corpus.doc(doc_id)?, cfg);
                    let mut scored = Vec::with_capacity(passages.len());
                    for p in passages {
                        let input = pair_input(vocab, query, p.tokens, cfg);
                        let logits = match session {
                            Some(s) => {
                                let l = s.logits(&input)?;
                                Some([l[0], l[1]])
                            }
                            None => None,
                        };
                        scored.push((p.offset, input, logits));
                    }
                    let key = |l: &Option<[f64; 2]>| l.map_or(0.0, |l| relevance_score(&l));
                    scored.sort_by(|a, b| {
                        key(&b.2).partial_cmp(&key(&a.2)).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
                    });
                    scored.truncate(opts.passages_per_doc);
                    scored.sort_by_key(|s| s.0);
                    out.extend(scored.into_iter().map(|(offset, input, teacher_logits)| TrainingPair {
                        query_id: sel.query_id.to_string(),
                        doc_id: doc_id.clone(),
                        offset,
                        input,
                        label: *label,
                        teacher_logits,
                    }));
                }
                Ok(out)
            },
        )
        .collect();
    let mut pairs = Vec::new();
    for p in per_query {
        pairs.extend(p?);
    }
    Ok(PairSet {
        pairs,
        skipped_queries: skipped,
    })
}
