use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use super::passage::{document_tokens, pair_input, split_passages, PassageSplitConfig};
use crate::data::{cmp_ids, Collection, RunRecord, Vocab};
use crate::encoder::{Encoder, EncoderInput};
use crate::error::{Error, Result};

/// Token ids of every query and document, computed once.
#[derive(Clone, Debug, Default)]
pub struct TokenizedCorpus {
    pub queries: HashMap<String, Vec<usize>>,
    pub docs: HashMap<String, Vec<usize>>,
}

impl TokenizedCorpus {
    pub fn new(collection: &Collection, vocab: &Vocab) -> Self {
        Self {
            queries: collection
                .queries
                .iter()
                .map(|(q, text)| (q.clone(), vocab.tokenize(text)))
                .collect(),
            docs: collection
                .docs
                .iter()
                .map(|(d, doc)| (d.clone(), document_tokens(vocab, &doc.title, &doc.body)))
                .collect(),
        }
    }

    pub fn query(&self, qid: &str) -> Result<&[usize]> {
        self.queries
            .get(qid)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Contract(format!("unknown query `{qid}`")))
    }

    pub fn doc(&self, doc_id: &str) -> Result<&[usize]> {
        self.docs
            .get(doc_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Contract(format!("unknown document `{doc_id}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DocScore {
    pub score: f64,
    pub passage_scores: Vec<f64>,
}

/// Maximum passage score; an empty document scores 0.
pub fn max_p(passage_scores: &[f64]) -> f64 {
    passage_scores.iter().copied().fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.max(s)))).unwrap_or(0.0)
}

/// Scores each passage of `doc` against `query` and aggregates by maximum.
pub fn score_document(
    score: &mut impl FnMut(&EncoderInput) -> Result<f64>,
    vocab: &Vocab,
    query: &[usize],
    doc: &[usize],
    cfg: &PassageSplitConfig,
) -> Result<DocScore> {
    if query.is_empty() {
        return Err(Error::Contract("cannot score against an empty query".into()));
    }
    let passage_scores = split_passages(doc, cfg)
        .into_iter()
        .map(|p| score(&pair_input(vocab, query, p.tokens, cfg)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(DocScore {
        score: max_p(&passage_scores),
        passage_scores,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub query_id: String,
    pub doc_id: String,
    pub original_rank: usize,
    pub doc_score: Option<f64>,
}

impl From<&RunRecord> for Candidate {
    fn from(r: &RunRecord) -> Self {
        Self {
            query_id: r.query_id.clone(),
            doc_id: r.doc_id.clone(),
            original_rank: r.rank,
            doc_score: None,
        }
    }
}

/// Re-scores the `depth` best-ranked candidates and sorts them by score
/// (ties by original rank, then doc id). The rest keep their original order
/// below them with scores `-original_rank`, so scores never increase down
/// the list.
pub fn rerank(
    candidates: &[Candidate],
    depth: usize,
    mut score: impl FnMut(&Candidate) -> Result<f64>,
) -> Result<Vec<RunRecord>> {
    if depth == 0 || depth > candidates.len() {
        return Err(Error::Contract(format!(
            "depth {depth} outside 1..={} candidates",
            candidates.len()
        )));
    }
    let mut sorted: Vec<&Candidate> = candidates.iter().collect();
    sorted.sort_by_key(|c| c.original_rank);
    if let Some(w) = sorted.windows(2).find(|w| w[0].original_rank == w[1].original_rank) {
        return Err(Error::Contract(format!(
            "original rank {} appears twice for query `{}`",
            w[0].original_rank, w[0].query_id
        )));
    }
    let mut head: Vec<(f64, &Candidate)> = Vec::with_capacity(depth);
    for c in &sorted[..depth] {
        let s = score(c)?;
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("score of `{}` for query `{}`", c.doc_id, c.query_id)));
        }
        head.push((s, c));
    }
    head.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.original_rank.cmp(&b.1.original_rank))
            .then_with(|| a.1.doc_id.cmp(&b.1.doc_id))
    });
    let tail = sorted[depth..].iter().map(|c| (-(c.original_rank as f64), *c));
    Ok(head
        .into_iter()
        .chain(tail)
        .enumerate()
        .map(|(i, (s, c))| RunRecord {
            query_id: c.query_id.clone(),
            doc_id: c.doc_id.clone(),
            rank: i + 1,
            score: s,
        })
        .collect())
}

/// Doc scores per query, covering at least the scored depth.
pub type ScoreTable = BTreeMap<String, HashMap<String, f64>>;

/// MaxP scores of the top `depth` candidates of every listed query. Queries
/// are scored in parallel and merged in query order.
pub fn score_candidates(
    encoder: &Encoder,
    vocab: &Vocab,
    corpus: &TokenizedCorpus,
    candidates: &BTreeMap<String, Vec<RunRecord>>,
    query_ids: &[String],
    depth: usize,
    cfg: &PassageSplitConfig,
) -> Result<ScoreTable> {
    let per_query: Vec<Result<(String, HashMap<String, f64>)>> = query_ids
        .par_iter()
        .map_init(
            || encoder.session(),
            |session, qid| {
                let list = candidates
                    .get(qid)
                    .ok_or_else(|| Error::Contract(format!("no candidates for query `{qid}`")))?;
                let query = corpus.query(qid)?;
                let mut out = HashMap::new();
                let mut scorer = |input: &EncoderInput| session.score(input);
                let mut ordered: Vec<&RunRecord> = list.iter().collect();
                ordered.sort_by_key(|r| r.rank);
                for r in ordered.into_iter().take(depth) {
                    let s = score_document(&mut scorer, vocab, query, corpus.doc(&r.doc_id)?, cfg)?;
                    out.insert(r.doc_id.clone(), s.score);
                }
                Ok((qid.clone(), out))
            },
        )
        .collect();
    per_query.into_iter().collect()
}

/// Reranks every listed query at `depth` (clamped to each list's length)
/// using precomputed scores.
pub fn rerank_with_scores(
    candidates: &BTreeMap<String, Vec<RunRecord>>,
    query_ids: &[String],
    depth: usize,
    scores: &ScoreTable,
) -> Result<Vec<RunRecord>> {
    let mut ids: Vec<&String> = query_ids.iter().collect();
    ids.sort_by(|a, b| cmp_ids(a, b));
    let mut out = Vec::new();
    for qid in ids {
        let list: Vec<Candidate> = candidates
            .get(qid)
            .ok_or_else(|| Error::Contract(format!("no candidates for query `{qid}`")))?
            .iter()
            .map(Candidate::from)
            .collect();
        if list.is_empty() {
            continue;
        }
        let table = scores
            .get(qid)
            .ok_or_else(|| Error::Contract(format!("no scores for query `{qid}`")))?;
        out.extend(rerank(&list, depth.min(list.len()), |c| {
            table
                .get(&c.doc_id)
                .copied()
                .ok_or_else(|| Error::Contract(format!("`{}` was not scored for query `{qid}`", c.doc_id)))
        })?);
    }
    Ok(out)
}

pub fn rerank_all(
    encoder: &Encoder,
    vocab: &Vocab,
    corpus: &TokenizedCorpus,
    candidates: &BTreeMap<String, Vec<RunRecord>>,
    query_ids: &[String],
    depth: usize,
    cfg: &PassageSplitConfig,
) -> Result<Vec<RunRecord>> {
    let scores = score_candidates(encoder, vocab, corpus, candidates, query_ids, depth, cfg)?;
    rerank_with_scores(candidates, query_ids, depth, &scores)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn cands(n: usize) -> Vec<Candidate> {
        (1..=n)
            .map(|r| Candidate {
                query_id: "q".into(),
                doc_id: format!("d{r}"),
                original_rank: r,
                doc_score: None,
            })
            .collect()
    }

    fn order(out: &[RunRecord]) -> Vec<&str> {
        out.iter().map(|r| r.doc_id.as_str()).collect()
    }

    #[test]
    fn max_p_cases() {
        assert_eq!(max_p(&[0.2, 0.9, 0.5]), 0.9);
        assert_eq!(max_p(&[0.4]), 0.4);
        assert_eq!(max_p(&[0.5, 0.9, 0.2]), max_p(&[0.9, 0.2, 0.5]));
    }

    #[test]
    fn depth_two_prefers_second() {
        let out = rerank(&cands(3), 2, |c| Ok(if c.doc_id == "d2" { 0.9 } else { 0.1 })).unwrap();
        assert_eq!(order(&out), ["d2", "d1", "d3"]);
        assert_eq!(out.iter().map(|r| r.rank).collect::<Vec<_>>(), [1, 2, 3]);
    }

    #[test]
    fn constant_scores_keep_order() {
        let out = rerank(&cands(5), 5, |_| Ok(0.5)).unwrap();
        assert_eq!(order(&out), ["d1", "d2", "d3", "d4", "d5"]);
    }

    #[test]
    fn depth_out_of_range() {
        assert!(rerank(&cands(3), 0, |_| Ok(0.0)).is_err());
        assert!(rerank(&cands(3), 4, |_| Ok(0.0)).is_err());
    }

    proptest! {
        #[test]
        fn output_is_a_permutation(scores in proptest::collection::vec(0u8..5, 1..20), d in 1usize..20) {
            let c = cands(scores.len());
            let d = d.min(c.len());
            let out = rerank(&c, d, |x| Ok(f64::from(scores[x.original_rank - 1]))).unwrap();
            let mut ids: Vec<&str> = order(&out);
            ids.sort_unstable();
            let mut want: Vec<String> = c.iter().map(|x| x.doc_id.clone()).collect();
            want.sort_unstable();
            prop_assert_eq!(ids, want.iter().map(String::as_str).collect::<Vec<_>>());
            prop_assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
        }

        #[test]
        fn nested_depths_agree(scores in proptest::collection::vec(0u8..4, 2..25), d in 1usize..25) {
            let c = cands(scores.len());
            let d = d.min(c.len());
            let f = |x: &Candidate| Ok(f64::from(scores[x.original_rank - 1]));
            let full = rerank(&c, c.len(), f).unwrap();
            let part = rerank(&c, d, f).unwrap();
            let head: std::collections::HashSet<&str> = order(&part)[..d].iter().copied().collect();
            let restricted: Vec<&str> = order(&full).into_iter().filter(|x| head.contains(x)).collect();
            prop_assert_eq!(restricted, order(&part)[..d].to_vec());
        }

        #[test]
        fn raising_a_score_never_lowers_rank(
            scores in proptest::collection::vec(0u8..6, 2..15),
            pick in 0usize..15,
            bump in 1u8..4,
        ) {
            let c = cands(scores.len());
            let pick = pick % c.len();
            let mut higher = scores.clone();
            higher[pick] += bump;
            let rank_of = |s: &[u8]| {
                let out = rerank(&c, c.len(), |x| Ok(f64::from(s[x.original_rank - 1]))).unwrap();
                out.iter().position(|r| r.doc_id == c[pick].doc_id).unwrap()
            };
            prop_assert!(rank_of(&higher) <= rank_of(&scores));
        }

        #[test]
        fn max_p_ignores_order_and_duplicates(mut s in proptest::collection::vec(0.0f64..1.0, 1..10), k in 0usize..10) {
            let base = max_p(&s);
            let dup = s[k % s.len()];
            s.push(dup);
            s.reverse();
            prop_assert_eq!(max_p(&s), base);
        }
    }
}
