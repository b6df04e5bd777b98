use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Relevance judgments: `(query, doc) -> grade`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qrels {
    judged: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the previous grade if the pair was already judged.
    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u32) -> Option<u32> {
        self.judged
            .entry(query_id.to_string())
            .or_default()
            .insert(doc_id.to_string(), grade)
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.judged
            .get(query_id)
            .and_then(|m| m.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn judgments(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judged.get(query_id)
    }

    pub fn contains_query(&self, query_id: &str) -> bool {
        self.judged.contains_key(query_id)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judged.keys().map(String::as_str)
    }

    /// Documents with grade > 0 for the query.
    pub fn relevant<'a>(&'a self, query_id: &str) -> impl Iterator<Item = &'a str> + 'a {
        self.judged
            .get(query_id)
            .into_iter()
            .flat_map(|m| m.iter().filter(|(_, g)| **g > 0).map(|(d, _)| d.as_str()))
    }

    pub fn num_relevant(&self, query_id: &str) -> usize {
        self.relevant(query_id).count()
    }

    /// Keeps only the listed queries.
    pub fn restrict<'a>(&self, query_ids: impl IntoIterator<Item = &'a str>) -> Self {
        let mut out = Self::new();
        for q in query_ids {
            if let Some(m) = self.judged.get(q) {
                out.judged.insert(q.to_string(), m.clone());
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.judged.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.judged.is_empty()
    }
}
