//! MS MARCO-style plain-text files.
//!
//! * queries: `qid<TAB>text`
//! * documents: `docid<TAB>url<TAB>title<TAB>body`
//! * qrels: `qid 0 docid grade`
//! * runs / top-100 candidates: `qid Q0 docid rank score tag`

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Qrels;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub url: String,
    pub title: String,
    pub body: String,
}

/// One line of a TREC run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub query_id: String,
    pub doc_id: String,
    pub rank: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CollectionPaths {
    pub queries: PathBuf,
    pub docs: PathBuf,
    pub qrels: PathBuf,
    pub candidates: PathBuf,
}

impl CollectionPaths {
    /// The fixed file names `gen-synth` writes into a data directory.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            queries: dir.join("queries.tsv"),
            docs: dir.join("docs.tsv"),
            qrels: dir.join("qrels.txt"),
            candidates: dir.join("candidates.run"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Collection {
    pub queries: BTreeMap<String, String>,
    pub docs: BTreeMap<String, Document>,
    pub qrels: Qrels,
    /// Candidate lists per query, ordered by first-stage rank.
    pub candidates: BTreeMap<String, Vec<RunRecord>>,
}

pub fn parse_collection(paths: &CollectionPaths) -> Result<Collection> {
    let candidates = parse_run(&paths.candidates)?;
    let mut by_query: BTreeMap<String, Vec<RunRecord>> = BTreeMap::new();
    for r in candidates {
        by_query.entry(r.query_id.clone()).or_default().push(r);
    }
    for list in by_query.values_mut() {
        list.sort_by_key(|r| r.rank);
    }
    Ok(Collection {
        queries: parse_queries(&paths.queries)?,
        docs: parse_docs(&paths.docs)?,
        qrels: parse_qrels(&paths.qrels)?,
        candidates: by_query,
    })
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Non-blank lines with 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

pub fn parse_queries(path: &Path) -> Result<BTreeMap<String, String>> {
    parse_queries_str(&read(path)?, path)
}

pub fn parse_queries_str(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, line) in lines(text) {
        let (qid, q) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, no, "expected `qid<TAB>text`"))?;
        if qid.is_empty() {
            return Err(Error::parse(path, no, "empty query id"));
        }
        if out.insert(qid.to_string(), q.to_string()).is_some() {
            return Err(Error::parse(path, no, format!("duplicate query id `{qid}`")));
        }
    }
    Ok(out)
}

pub fn parse_docs(path: &Path) -> Result<BTreeMap<String, Document>> {
    parse_docs_str(&read(path)?, path)
}

pub fn parse_docs_str(text: &str, path: &Path) -> Result<BTreeMap<String, Document>> {
    let mut out = BTreeMap::new();
    for (no, line) in lines(text) {
        let fields: Vec<&str> = line.splitn(4, '\t').collect();
        if fields.len() != 4 {
            return Err(Error::parse(path, no, "expected `docid<TAB>url<TAB>title<TAB>body`"));
        }
        if fields[0].is_empty() {
            return Err(Error::parse(path, no, "empty document id"));
        }
        let doc = Document {
            doc_id: fields[0].to_string(),
            url: fields[1].to_string(),
            title: fields[2].to_string(),
            body: fields[3].to_string(),
        };
        if out.insert(doc.doc_id.clone(), doc).is_some() {
            return Err(Error::parse(path, no, format!("duplicate document id `{}`", fields[0])));
        }
    }
    Ok(out)
}

pub fn parse_qrels(path: &Path) -> Result<Qrels> {
    parse_qrels_str(&read(path)?, path)
}

pub fn parse_qrels_str(text: &str, path: &Path) -> Result<Qrels> {
    let mut out = Qrels::new();
    for (no, line) in lines(text) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(Error::parse(path, no, "expected `qid 0 docid grade`"));
        }
        let grade: u32 = f[3]
            .parse()
            .map_err(|_| Error::parse(path, no, format!("grade `{}` is not a non-negative integer", f[3])))?;
        if out.insert(f[0], f[2], grade).is_some() {
            return Err(Error::parse(path, no, format!("duplicate judgment for ({}, {})", f[0], f[2])));
        }
    }
    Ok(out)
}

/// Parses a run file. Within each query, ranks must appear as 1, 2, 3, …
/// in file order.
pub fn parse_run(path: &Path) -> Result<Vec<RunRecord>> {
    parse_run_str(&read(path)?, path)
}

pub fn parse_run_str(text: &str, path: &Path) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    let mut next_rank: HashMap<String, usize> = HashMap::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for (no, line) in lines(text) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(Error::parse(path, no, "expected `qid Q0 docid rank score tag`"));
        }
        let rank: usize = f[3]
            .parse()
            .map_err(|_| Error::parse(path, no, format!("rank `{}` is not a positive integer", f[3])))?;
        let score: f64 = f[4]
            .parse()
            .map_err(|_| Error::parse(path, no, format!("score `{}` is not a number", f[4])))?;
        let expected = next_rank.entry(f[0].to_string()).or_insert(1);
        if rank != *expected {
            return Err(Error::parse(
                path,
                no,
                format!("rank gap for query `{}`: expected rank {}, found {rank}", f[0], *expected),
            ));
        }
        *expected += 1;
        if !seen.insert((f[0].to_string(), f[2].to_string())) {
            return Err(Error::parse(
                path,
                no,
                format!("document `{}` listed twice for query `{}`", f[2], f[0]),
            ));
        }
        out.push(RunRecord {
            query_id: f[0].to_string(),
            doc_id: f[2].to_string(),
            rank,
            score,
        });
    }
    Ok(out)
}

/// Numeric order when both ids are integers, lexicographic otherwise.
pub fn cmp_ids(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        _ => a.cmp(b),
    }
}

/// Renders records as run lines: queries ascending, ranks ascending, scores
/// with six decimals.
pub fn format_run(records: &[RunRecord], tag: &str) -> Result<String> {
    if tag.is_empty() || tag.contains(char::is_whitespace) {
        return Err(Error::Contract(format!("run tag `{tag}` must be a single non-empty word")));
    }
    let mut by_query: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        by_query.entry(r.query_id.as_str()).or_default().push(r);
    }
    let mut qids: Vec<&str> = by_query.keys().copied().collect();
    qids.sort_by(|a, b| cmp_ids(a, b));

    let mut out = String::new();
    for qid in qids {
        let list = by_query.get_mut(qid).expect("key present");
        list.sort_by_key(|r| r.rank);
        for (i, r) in list.iter().enumerate() {
            if r.rank != i + 1 {
                return Err(Error::Contract(format!(
                    "ranks for query `{qid}` are not dense from 1 (found {} at position {})",
                    r.rank,
                    i + 1
                )));
            }
            if i > 0 && r.score > list[i - 1].score {
                return Err(Error::Contract(format!(
                    "scores for query `{qid}` increase at rank {}",
                    r.rank
                )));
            }
            writeln!(out, "{} Q0 {} {} {:.6} {}", r.query_id, r.doc_id, r.rank, r.score, tag).expect("string write");
        }
    }
    Ok(out)
}

pub fn write_run(records: &[RunRecord], tag: &str, path: &Path) -> Result<()> {
    let text = format_run(records, tag)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn format_queries(queries: &BTreeMap<String, String>) -> String {
    let mut ids: Vec<&String> = queries.keys().collect();
    ids.sort_by(|a, b| cmp_ids(a, b));
    ids.iter().fold(String::new(), |mut s, id| {
        writeln!(s, "{id}\t{}", queries[*id]).expect("string write");
        s
    })
}

pub fn format_docs<'a>(docs: impl IntoIterator<Item = &'a Document>) -> String {
    docs.into_iter().fold(String::new(), |mut s, d| {
        writeln!(s, "{}\t{}\t{}\t{}", d.doc_id, d.url, d.title, d.body).expect("string write");
        s
    })
}

pub fn format_qrels(qrels: &Qrels) -> String {
    let mut qids: Vec<&str> = qrels.query_ids().collect();
    qids.sort_by(|a, b| cmp_ids(a, b));
    let mut s = String::new();
    for q in qids {
        let judged = qrels.judgments(q).expect("listed query");
        let mut docs: Vec<(&String, &u32)> = judged.iter().collect();
        docs.sort_by(|a, b| cmp_ids(a.0, b.0));
        for (d, g) in docs {
            writeln!(s, "{q} 0 {d} {g}").expect("string write");
        }
    }
    s
}
