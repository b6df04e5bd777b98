use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::{map_metric, mrr, ndcg_at_k, MetricValues, Rankings};
use super::stats::{paired_t_test, TTest};
use super::Qrels;
use crate::error::{Error, Result};

pub const METRIC_NAMES: [&str; 4] = ["mrr", "mrr@10", "ndcg@10", "map"];

/// All four metrics for one run.
pub fn compute_metrics(rankings: &Rankings, qrels: &Qrels) -> Result<BTreeMap<String, MetricValues>> {
    Ok(BTreeMap::from([
        ("mrr".to_string(), mrr(rankings, qrels, None)?),
        ("mrr@10".to_string(), mrr(rankings, qrels, Some(10))?),
        ("ndcg@10".to_string(), ndcg_at_k(rankings, qrels, 10)?),
        ("map".to_string(), map_metric(rankings, qrels)?),
    ]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Comparison {
    Tested {
        #[serde(flatten)]
        test: TTest,
        /// Upper-case letter at p < 0.01, lower-case at p < 0.05, empty otherwise.
        mark: String,
    },
    /// Every per-query difference is zero; no p-value exists.
    Degenerate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineComparison {
    pub name: String,
    pub letter: char,
    pub metrics: BTreeMap<String, Comparison>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub num_queries: usize,
    pub unjudged_queries: usize,
    pub means: BTreeMap<String, f64>,
    pub per_query: BTreeMap<String, BTreeMap<String, f64>>,
    pub baselines: Vec<BaselineComparison>,
}

pub fn significance_mark(p: f64, letter: char) -> String {
    if p < 0.01 {
        letter.to_ascii_uppercase().to_string()
    } else if p < 0.05 {
        letter.to_ascii_lowercase().to_string()
    } else {
        String::new()
    }
}

impl MetricReport {
    pub fn new(rankings: &Rankings, qrels: &Qrels) -> Result<Self> {
        let metrics = compute_metrics(rankings, qrels)?;
        Ok(Self {
            num_queries: rankings.len(),
            unjudged_queries: metrics["mrr"].unjudged_queries,
            means: metrics.iter().map(|(k, v)| (k.clone(), v.mean)).collect(),
            per_query: metrics.into_iter().map(|(k, v)| (k, v.per_query)).collect(),
            baselines: Vec::new(),
        })
    }

    /// Paired t-tests of this run against `baseline` on every metric. Both
    /// runs must cover the same queries.
    pub fn compare(&mut self, name: &str, letter: char, baseline: &Rankings, qrels: &Qrels) -> Result<()> {
        let other = compute_metrics(baseline, qrels)?;
        let mut metrics = BTreeMap::new();
        for m in METRIC_NAMES {
            let mine = &self.per_query[m];
            let theirs = &other[m].per_query;
            if mine.len() != theirs.len() || mine.keys().any(|q| !theirs.contains_key(q)) {
                return Err(Error::Contract(format!(
                    "run and baseline `{name}` cover different query sets"
                )));
            }
            let a: Vec<f64> = mine.values().copied().collect();
            let b: Vec<f64> = mine.keys().map(|q| theirs[q]).collect();
            let cmp = match paired_t_test(&a, &b) {
                Ok(test) => Comparison::Tested {
                    mark: significance_mark(test.p, letter),
                    test,
                },
                Err(Error::DegeneratePairs) => Comparison::Degenerate,
                Err(e) => return Err(e),
            };
            metrics.insert(m.to_string(), cmp);
        }
        self.baselines.push(BaselineComparison {
            name: name.to_string(),
            letter,
            metrics,
        });
        Ok(())
    }

    /// One line per metric: mean followed by any significance marks.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for m in METRIC_NAMES {
            let marks: String = self
                .baselines
                .iter()
                .filter_map(|b| match &b.metrics[m] {
                    Comparison::Tested { mark, .. } => Some(mark.as_str()),
                    Comparison::Degenerate => None,
                })
                .collect();
            out.push_str(&format!("{m:<8} {:.4}{marks}", self.means[m]));
            for b in &self.baselines {
                if b.metrics[m] == Comparison::Degenerate {
                    out.push_str(&format!("  (vs {}: identical per-query scores, no p-value)", b.name));
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marks() {
        assert_eq!(significance_mark(0.001, 't'), "T");
        assert_eq!(significance_mark(0.03, 'B'), "b");
        assert_eq!(significance_mark(0.05, 't'), "");
    }

    #[test]
    fn identical_runs_are_degenerate() {
        let mut qrels = Qrels::new();
        qrels.insert("1", "a", 1);
        qrels.insert("2", "b", 1);
        let r: Rankings = [
            ("1".to_string(), vec!["a".to_string(), "b".to_string()]),
            ("2".to_string(), vec!["a".to_string(), "b".to_string()]),
        ]
        .into();
        let mut rep = MetricReport::new(&r, &qrels).unwrap();
        rep.compare("base", 'b', &r, &qrels).unwrap();
        assert!(rep.baselines[0].metrics.values().all(|c| *c == Comparison::Degenerate));
        assert_eq!(rep.means["mrr"], 0.75);
        assert!(rep.summary().contains("no p-value"));
    }
}
