//! trec_eval-style ranking metrics.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::Qrels;
use crate::data::RunRecord;
use crate::error::{Error, Result};

/// Ranked doc ids per query.
pub type Rankings = BTreeMap<String, Vec<String>>;

pub fn rankings_from_run(records: &[RunRecord]) -> Rankings {
    let mut by_query: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        by_query.entry(r.query_id.clone()).or_default().push(r);
    }
    by_query
        .into_iter()
        .map(|(q, mut list)| {
            list.sort_by_key(|r| r.rank);
            (q, list.into_iter().map(|r| r.doc_id.clone()).collect())
        })
        .collect()
}

/// Per-query values of one metric and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
    /// Evaluated queries without any judgment; each contributes 0.
    pub unjudged_queries: usize,
}

fn evaluate(
    rankings: &Rankings,
    qrels: &Qrels,
    per_query: impl Fn(&[String], &str) -> f64,
) -> Result<MetricValues> {
    let mut out = BTreeMap::new();
    let mut unjudged = 0;
    for (q, docs) in rankings {
        let mut seen = HashSet::with_capacity(docs.len());
        for d in docs {
            if !seen.insert(d.as_str()) {
                return Err(Error::Contract(format!("document `{d}` ranked twice for query `{q}`")));
            }
        }
        if !qrels.contains_query(q) {
            unjudged += 1;
        }
        out.insert(q.clone(), per_query(docs, q));
    }
    let mean = if out.is_empty() {
        0.0
    } else {
        out.values().sum::<f64>() / out.len() as f64
    };
    Ok(MetricValues {
        per_query: out,
        mean,
        unjudged_queries: unjudged,
    })
}

/// Reciprocal rank of the first document with grade > 0, optionally only
/// looking at the top `cutoff`.
pub fn mrr(rankings: &Rankings, qrels: &Qrels, cutoff: Option<usize>) -> Result<MetricValues> {
    evaluate(rankings, qrels, |docs, q| {
        let depth = cutoff.unwrap_or(docs.len()).min(docs.len());
        docs[..depth]
            .iter()
            .position(|d| qrels.grade(q, d) > 0)
            .map_or(0.0, |i| 1.0 / (i + 1) as f64)
    })
}

fn dcg(grades: impl Iterator<Item = u32>) -> f64 {
    grades
        .enumerate()
        .map(|(i, g)| (2f64.powi(g as i32) - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

/// Exponential-gain NDCG; the ideal ordering uses every judged grade.
pub fn ndcg_at_k(rankings: &Rankings, qrels: &Qrels, k: usize) -> Result<MetricValues> {
    evaluate(rankings, qrels, |docs, q| {
        let mut ideal: Vec<u32> = qrels
            .judgments(q)
            .map(|m| m.values().copied().filter(|g| *g > 0).collect())
            .unwrap_or_default();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg = dcg(ideal.into_iter().take(k));
        if idcg == 0.0 {
            return 0.0;
        }
        dcg(docs.iter().take(k).map(|d| qrels.grade(q, d))) / idcg
    })
}

/// Average precision over all relevant documents in the qrels, retrieved or not.
pub fn map_metric(rankings: &Rankings, qrels: &Qrels) -> Result<MetricValues> {
    evaluate(rankings, qrels, |docs, q| {
        let total = qrels.num_relevant(q);
        if total == 0 {
            return 0.0;
        }
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (i, d) in docs.iter().enumerate() {
            if qrels.grade(q, d) > 0 {
                hits += 1;
                sum += hits as f64 / (i + 1) as f64;
            }
        }
        sum / total as f64
    })
}
