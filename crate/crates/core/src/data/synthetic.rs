//! Planted-signal ranking corpus.
//!
//! Every query gets `docs_per_query` candidates: one relevant document and
//! the rest non-relevant. The vocabulary is split at `min_query_term_rank`:
//! backgrounds are Zipf-distributed over the head, query terms are drawn
//! uniformly from the tail and planted into the relevant document, each with
//! probability `signal_strength`. A fraction of non-relevant documents
//! receive one query term so that the mere presence of a query term does not
//! decide relevance.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use super::collection::{Collection, Document, RunRecord};
use crate::error::{Error, Result};
use crate::eval::Qrels;

/// Validation share of dev queries (727 of 727 + 4,466).
pub const VALIDATION_SHARE: (usize, usize) = (727, 727 + 4466);

const SYLLABLES: [&str; 24] = [
    "ka", "to", "mi", "ra", "ne", "lu", "so", "pe", "di", "ga", "ho", "vi", "ba", "ze", "fu", "ri", "mo", "ta",
    "sha", "qu", "le", "no", "xi", "we",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_queries: usize,
    /// Distinct pseudo-words, background and query terms together.
    pub vocab_size: usize,
    pub docs_per_query: usize,
    /// Inclusive range of document lengths in words.
    pub doc_length: (usize, usize),
    /// Inclusive range of distinct terms per query; the minimum is at least 2.
    pub query_terms: (usize, usize),
    /// Probability that each query term is planted in the relevant document.
    pub signal_strength: f64,
    /// Probability that a non-relevant document receives one query term.
    pub hard_negative_rate: f64,
    /// Ranks below this form the background; the rest are query terms.
    pub min_query_term_rank: usize,
    pub zipf_exponent: f64,
    /// Share of queries used for training; the rest are dev queries.
    pub train_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_queries: 2000,
            vocab_size: 500,
            docs_per_query: 5,
            doc_length: (8, 24),
            query_terms: (2, 4),
            signal_strength: 0.8,
            hard_negative_rate: 0.3,
            min_query_term_rank: 300,
            zipf_exponent: 1.0,
            train_fraction: 0.5,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Contract(format!("synthetic spec: {m}")));
        if self.num_queries == 0 {
            return bad("num_queries must be positive");
        }
        if !(self.signal_strength > 0.0 && self.signal_strength <= 1.0) {
            return bad("signal_strength must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.hard_negative_rate) {
            return bad("hard_negative_rate must lie in [0, 1]");
        }
        if self.docs_per_query < 2 {
            return bad("docs_per_query must be at least 2");
        }
        if self.doc_length.0 == 0 || self.doc_length.0 > self.doc_length.1 {
            return bad("doc_length must be a non-empty range of positive lengths");
        }
        if self.doc_length.0 < self.query_terms.1 {
            return bad("documents must be long enough to hold every query term");
        }
        if self.query_terms.0 < 2 || self.query_terms.0 > self.query_terms.1 {
            return bad("query_terms must be a range starting at 2 or more");
        }
        if self.min_query_term_rank == 0 {
            return bad("min_query_term_rank must leave a background vocabulary");
        }
        if self.min_query_term_rank + self.query_terms.1 > self.vocab_size {
            return bad("vocab_size leaves too few candidate query terms");
        }
        if self.vocab_size > SYLLABLES.len().pow(3) {
            return bad("vocab_size exceeds the pseudo-word space");
        }
        if !(0.0..1.0).contains(&self.train_fraction) {
            return bad("train_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub collection: Collection,
    pub splits: Splits,
}

fn pseudo_words(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = rng.random_range(2..=3);
        let w: String = (0..len).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Validation/test sizes for `dev` queries at the 727:4,466 ratio; both at
/// least one query once there are two or more.
pub fn validation_size(dev: usize) -> usize {
    if dev < 2 {
        return dev;
    }
    let v = (dev * VALIDATION_SHARE.0 + VALIDATION_SHARE.1 / 2) / VALIDATION_SHARE.1;
    v.clamp(1, dev - 1)
}

pub fn gen_synthetic_corpus(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = pseudo_words(spec.vocab_size, &mut rng);
    let zipf = Zipf::new(spec.min_query_term_rank as f64, spec.zipf_exponent)
        .map_err(|e| Error::Contract(format!("zipf: {e}")))?;

    let mut queries = BTreeMap::new();
    let mut docs = BTreeMap::new();
    let mut qrels = Qrels::new();
    let mut candidates = BTreeMap::new();
    let mut next_doc = 0usize;

    for qi in 0..spec.num_queries {
        let qid = (qi + 1).to_string();
        let k = rng.random_range(spec.query_terms.0..=spec.query_terms.1);
        let mut terms: Vec<usize> = Vec::with_capacity(k);
        while terms.len() < k {
            let t = rng.random_range(spec.min_query_term_rank..spec.vocab_size);
            if !terms.contains(&t) {
                terms.push(t);
            }
        }
        let text: Vec<&str> = terms.iter().map(|&t| words[t].as_str()).collect();
        queries.insert(qid.clone(), text.join(" "));

        let relevant_slot = rng.random_range(0..spec.docs_per_query);
        let mut list = Vec::with_capacity(spec.docs_per_query);
        for slot in 0..spec.docs_per_query {
            let len = rng.random_range(spec.doc_length.0..=spec.doc_length.1);
            let mut body: Vec<usize> = Vec::with_capacity(len + k);
            while body.len() < len {
                body.push(zipf.sample(&mut rng) as usize - 1);
            }
            let planted: Vec<usize> = if slot == relevant_slot {
                terms.iter().copied().filter(|_| rng.random_bool(spec.signal_strength)).collect()
            } else if rng.random_bool(spec.hard_negative_rate) {
                vec![terms[rng.random_range(0..k)]]
            } else {
                Vec::new()
            };
            let slots = rand::seq::index::sample(&mut rng, len, planted.len());
            for (t, at) in planted.into_iter().zip(slots) {
                body[at] = t;
            }
            let doc_id = format!("D{next_doc}");
            next_doc += 1;
            let text: Vec<&str> = body.iter().map(|&w| words[w].as_str()).collect();
            docs.insert(
                doc_id.clone(),
                Document {
                    doc_id: doc_id.clone(),
                    url: format!("http://synthetic/{doc_id}"),
                    title: String::new(),
                    body: text.join(" "),
                },
            );
            qrels.insert(&qid, &doc_id, u32::from(slot == relevant_slot));
            list.push(RunRecord {
                query_id: qid.clone(),
                doc_id,
                rank: slot + 1,
                score: (spec.docs_per_query - slot) as f64,
            });
        }
        candidates.insert(qid, list);
    }

    let mut order: Vec<String> = queries.keys().cloned().collect();
    order.sort_by(|a, b| super::collection::cmp_ids(a, b));
    order.shuffle(&mut rng);
    let n_train = ((spec.num_queries as f64) * spec.train_fraction).round() as usize;
    let dev = order.split_off(n_train);
    let n_val = validation_size(dev.len());
    let mut splits = Splits {
        train: order,
        validation: dev[..n_val].to_vec(),
        test: dev[n_val..].to_vec(),
    };
    for s in [&mut splits.train, &mut splits.validation, &mut splits.test] {
        s.sort_by(|a, b| super::collection::cmp_ids(a, b));
    }

    Ok(SyntheticCorpus {
        collection: Collection {
            queries,
            docs,
            qrels,
            candidates,
        },
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::collection::{format_docs, format_queries, format_qrels, format_run};

    fn small(signal: f64) -> SyntheticSpec {
        SyntheticSpec {
            num_queries: 60,
            vocab_size: 300,
            min_query_term_rank: 150,
            signal_strength: signal,
            ..SyntheticSpec::default()
        }
    }

    fn overlap(query: &str, body: &str) -> usize {
        let words: HashSet<&str> = body.split(' ').collect();
        query.split(' ').filter(|t| words.contains(t)).count()
    }

    #[test]
    fn full_signal_is_separable_by_term_overlap() {
        let c = gen_synthetic_corpus(&small(1.0), 5).unwrap().collection;
        for (qid, list) in &c.candidates {
            let q = &c.queries[qid];
            let best = list
                .iter()
                .max_by_key(|r| (overlap(q, &c.docs[&r.doc_id].body), std::cmp::Reverse(r.rank)))
                .unwrap();
            assert_eq!(c.qrels.grade(qid, &best.doc_id), 1, "query {qid}");
            let others = list.iter().filter(|r| r.doc_id != best.doc_id);
            for r in others {
                assert!(overlap(q, &c.docs[&r.doc_id].body) < overlap(q, &c.docs[&best.doc_id].body));
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let render = |c: &SyntheticCorpus| {
            let all: Vec<RunRecord> = c.collection.candidates.values().flatten().cloned().collect();
            format!(
                "{}{}{}{}{:?}",
                format_queries(&c.collection.queries),
                format_docs(c.collection.docs.values()),
                format_qrels(&c.collection.qrels),
                format_run(&all, "first").unwrap(),
                c.splits
            )
        };
        let a = gen_synthetic_corpus(&small(0.8), 9).unwrap();
        let b = gen_synthetic_corpus(&small(0.8), 9).unwrap();
        let c = gen_synthetic_corpus(&small(0.8), 10).unwrap();
        assert_eq!(render(&a), render(&b));
        assert_ne!(render(&a), render(&c));
    }

    #[test]
    fn splits_are_disjoint_and_exhaustive() {
        let c = gen_synthetic_corpus(&small(0.8), 1).unwrap();
        let s = &c.splits;
        assert_eq!(s.train.len(), 30);
        let all: HashSet<&String> = s.train.iter().chain(&s.validation).chain(&s.test).collect();
        assert_eq!(all.len(), 60);
        assert_eq!(s.train.len() + s.validation.len() + s.test.len(), 60);
        assert_eq!(validation_size(5193), 727);
        assert_eq!(validation_size(1000), 140);
    }

    #[test]
    fn one_relevant_per_query() {
        let c = gen_synthetic_corpus(&small(0.5), 2).unwrap().collection;
        for qid in c.queries.keys() {
            assert_eq!(c.qrels.num_relevant(qid), 1);
            assert_eq!(c.candidates[qid].len(), 5);
        }
    }
}
