//! Collections, queries, training triples, qrels and TREC run files.
//!
//! Text formats:
//!
//! * collection / queries: `id<TAB>text`, one record per line
//! * triples: `query<TAB>positive<TAB>negative`
//! * qrels: `qid 0 docid grade`, whitespace separated
//! * runs: `qid Q0 docid rank score tag`, whitespace separated, scores
//!   written with six decimals
//!
//! All loaders are pure functions of the file contents.

mod synthetic;

pub use synthetic::{
    bigram_grade, generate_synthetic, overlap_grade, RelevanceRule, SyntheticCorpus,
    SyntheticSpec,
};

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Passages keyed by document id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Collection {
    entries: BTreeMap<String, String>,
}

impl Collection {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a passage. Ids and texts must be non-empty and ids unique.
    pub fn insert(&mut self, doc_id: impl Into<String>, text: impl Into<String>) -> Result<()> {
        let (doc_id, text) = (doc_id.into(), text.into());
        if doc_id.is_empty() {
            return Err(Error::Invalid("empty document id".into()));
        }
        if text.trim().is_empty() {
            return Err(Error::Invalid(format!("document {doc_id} has empty text")));
        }
        if self.entries.contains_key(&doc_id) {
            return Err(Error::Invalid(format!("duplicate document id {doc_id}")));
        }
        self.entries.insert(doc_id, text);
        Ok(())
    }

    pub fn get(&self, doc_id: &str) -> Option<&str> {
        self.entries.get(doc_id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Iterates in doc-id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Mean whitespace-token count per passage.
    pub fn avg_length(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        let total: usize = self
            .entries
            .values()
            .map(|t| t.split_whitespace().count())
            .sum();
        total as f64 / self.entries.len() as f64
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut out = Collection::new();
        for (i, line) in text.lines().enumerate() {
            let (id, body) = split_tsv2(line, origin, i + 1)?;
            out.insert(id, body)
                .map_err(|e| Error::parse(origin, i + 1, e.to_string()))?;
        }
        Ok(out)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (id, text) in &self.entries {
            let _ = writeln!(s, "{id}\t{text}");
        }
        s
    }
}

fn split_tsv2<'a>(line: &'a str, origin: &str, lineno: usize) -> Result<(&'a str, &'a str)> {
    line.split_once('\t')
        .ok_or_else(|| Error::parse(origin, lineno, "expected `id<TAB>text`"))
}

pub fn load_collection(path: impl AsRef<Path>) -> Result<Collection> {
    let path = path.as_ref();
    Collection::parse(&read_text(path)?, &path.display().to_string())
}

pub fn write_collection(collection: &Collection, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &collection.to_tsv())
}

/// Query texts keyed by query id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QuerySet {
    entries: BTreeMap<String, String>,
}

impl QuerySet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, qid: impl Into<String>, text: impl Into<String>) -> Result<()> {
        let qid = qid.into();
        if qid.is_empty() {
            return Err(Error::Invalid("empty query id".into()));
        }
        if self.entries.contains_key(&qid) {
            return Err(Error::Invalid(format!("duplicate query id {qid}")));
        }
        self.entries.insert(qid, text.into());
        Ok(())
    }

    pub fn get(&self, qid: &str) -> Option<&str> {
        self.entries.get(qid).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Keeps only the listed query ids.
    pub fn subset<'a>(&self, qids: impl IntoIterator<Item = &'a str>) -> QuerySet {
        let entries = qids
            .into_iter()
            .filter_map(|q| self.entries.get_key_value(q))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        QuerySet { entries }
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut out = QuerySet::new();
        for (i, line) in text.lines().enumerate() {
            let (id, body) = split_tsv2(line, origin, i + 1)?;
            out.insert(id, body)
                .map_err(|e| Error::parse(origin, i + 1, e.to_string()))?;
        }
        Ok(out)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (id, text) in &self.entries {
            let _ = writeln!(s, "{id}\t{text}");
        }
        s
    }
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<QuerySet> {
    let path = path.as_ref();
    QuerySet::parse(&read_text(path)?, &path.display().to_string())
}

pub fn write_queries(queries: &QuerySet, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &queries.to_tsv())
}

/// One training triple: a query with a relevant and a non-relevant passage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triple {
    pub query: String,
    pub positive: String,
    pub negative: String,
}

impl Triple {
    pub fn new(
        query: impl Into<String>,
        positive: impl Into<String>,
        negative: impl Into<String>,
    ) -> Result<Self> {
        let t = Triple {
            query: query.into(),
            positive: positive.into(),
            negative: negative.into(),
        };
        if t.query.trim().is_empty() || t.positive.trim().is_empty() || t.negative.trim().is_empty()
        {
            return Err(Error::Invalid("triple with an empty field".into()));
        }
        Ok(t)
    }
}

pub type TripleStream = Vec<Triple>;

pub fn parse_triples(text: &str, origin: &str) -> Result<TripleStream> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let mut parts = line.split('\t');
            match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(q), Some(p), Some(n), None) => {
                    Triple::new(q, p, n).map_err(|e| Error::parse(origin, i + 1, e.to_string()))
                }
                _ => Err(Error::parse(
                    origin,
                    i + 1,
                    "expected `query<TAB>positive<TAB>negative`",
                )),
            }
        })
        .collect()
}

pub fn load_triples(path: impl AsRef<Path>) -> Result<TripleStream> {
    let path = path.as_ref();
    parse_triples(&read_text(path)?, &path.display().to_string())
}

pub fn write_triples(triples: &[Triple], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::new();
    for t in triples {
        let _ = writeln!(s, "{}\t{}\t{}", t.query, t.positive, t.negative);
    }
    write_text(path.as_ref(), &s)
}

/// Graded relevance judgments.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    grades: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, qid: impl Into<String>, doc_id: impl Into<String>, grade: u32) -> Result<()> {
        let (qid, doc_id) = (qid.into(), doc_id.into());
        let docs = self.grades.entry(qid.clone()).or_default();
        if docs.contains_key(&doc_id) {
            return Err(Error::Invalid(format!(
                "duplicate judgment for ({qid}, {doc_id})"
            )));
        }
        docs.insert(doc_id, grade);
        Ok(())
    }

    /// Grade of a pair, `None` when unjudged.
    pub fn grade(&self, qid: &str, doc_id: &str) -> Option<u32> {
        self.grades.get(qid)?.get(doc_id).copied()
    }

    pub fn query(&self, qid: &str) -> Option<&BTreeMap<String, u32>> {
        self.grades.get(qid)
    }

    pub fn queries(&self) -> impl Iterator<Item = (&str, &BTreeMap<String, u32>)> {
        self.grades.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_queries(&self) -> usize {
        self.grades.len()
    }

    /// Judgments of the listed queries only.
    pub fn subset<'a>(&self, qids: impl IntoIterator<Item = &'a str>) -> Qrels {
        let grades = qids
            .into_iter()
            .filter_map(|q| self.grades.get(q).map(|d| (q.to_string(), d.clone())))
            .collect();
        Qrels { grades }
    }

    pub fn len(&self) -> usize {
        self.grades.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut out = Qrels::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(Error::parse(origin, i + 1, "expected `qid 0 docid grade`"));
            }
            let grade: u32 = fields[3].parse().map_err(|_| {
                Error::parse(
                    origin,
                    i + 1,
                    format!("grade `{}` is not a non-negative integer", fields[3]),
                )
            })?;
            out.insert(fields[0], fields[2], grade)
                .map_err(|e| Error::parse(origin, i + 1, e.to_string()))?;
        }
        Ok(out)
    }

    pub fn to_trec(&self) -> String {
        let mut s = String::new();
        for (qid, docs) in &self.grades {
            for (doc, g) in docs {
                let _ = writeln!(s, "{qid} 0 {doc} {g}");
            }
        }
        s
    }
}

pub fn load_qrels(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    Qrels::parse(&read_text(path)?, &path.display().to_string())
}

pub fn write_qrels(qrels: &Qrels, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &qrels.to_trec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub doc_id: String,
    pub score: f64,
    pub rank: u32,
    pub tag: String,
}

/// Ranked results per query. Within a query ranks are `1..=k` with no
/// gaps, scores never increase with rank, and doc ids are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Run {
    queries: BTreeMap<String, Vec<RunEntry>>,
}

impl Run {
    pub fn new() -> Self {
        Self::default()
    }

    /// Ranks scored documents for one query: score descending, ties by doc
    /// id ascending.
    pub fn insert_scored(
        &mut self,
        qid: impl Into<String>,
        mut scored: Vec<(String, f64)>,
        tag: &str,
    ) -> Result<()> {
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let entries = scored
            .into_iter()
            .enumerate()
            .map(|(i, (doc_id, score))| RunEntry {
                doc_id,
                score,
                rank: i as u32 + 1,
                tag: tag.to_string(),
            })
            .collect();
        self.insert_ranked(qid, entries)
    }

    /// Inserts an already-ranked list after validating it.
    pub fn insert_ranked(&mut self, qid: impl Into<String>, mut entries: Vec<RunEntry>) -> Result<()> {
        let qid = qid.into();
        entries.sort_by_key(|e| e.rank);
        validate_ranking(&qid, &entries)?;
        if self.queries.insert(qid.clone(), entries).is_some() {
            return Err(Error::Invalid(format!("query {qid} appears twice in run")));
        }
        Ok(())
    }

    pub fn query(&self, qid: &str) -> Option<&[RunEntry]> {
        self.queries.get(qid).map(Vec::as_slice)
    }

    pub fn queries(&self) -> impl Iterator<Item = (&str, &[RunEntry])> {
        self.queries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut grouped: BTreeMap<String, Vec<RunEntry>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(Error::parse(
                    origin,
                    i + 1,
                    "expected `qid Q0 docid rank score tag`",
                ));
            }
            let rank: u32 = f[3].parse().map_err(|_| {
                Error::parse(origin, i + 1, format!("rank `{}` is not an integer", f[3]))
            })?;
            let score: f64 = f[4]
                .parse()
                .ok()
                .filter(|s: &f64| s.is_finite())
                .ok_or_else(|| {
                    Error::parse(origin, i + 1, format!("score `{}` is not numeric", f[4]))
                })?;
            grouped.entry(f[0].to_string()).or_default().push(RunEntry {
                doc_id: f[2].to_string(),
                score,
                rank,
                tag: f[5].to_string(),
            });
        }
        let mut run = Run::new();
        for (qid, entries) in grouped {
            run.insert_ranked(qid, entries)?;
        }
        Ok(run)
    }

    pub fn to_trec(&self) -> String {
        let mut s = String::new();
        for (qid, entries) in &self.queries {
            for e in entries {
                let _ = writeln!(
                    s,
                    "{qid} Q0 {} {} {:.6} {}",
                    e.doc_id, e.rank, e.score, e.tag
                );
            }
        }
        s
    }
}

fn validate_ranking(qid: &str, entries: &[RunEntry]) -> Result<()> {
    let mut seen = HashSet::new();
    for (i, e) in entries.iter().enumerate() {
        if e.rank as usize != i + 1 {
            return Err(Error::Invalid(format!(
                "query {qid}: ranks are not contiguous from 1 (found rank {} at position {})",
                e.rank,
                i + 1
            )));
        }
        if !seen.insert(e.doc_id.as_str()) {
            return Err(Error::Invalid(format!(
                "query {qid}: document {} ranked twice",
                e.doc_id
            )));
        }
        if e.tag.is_empty() || e.tag.contains(char::is_whitespace) {
            return Err(Error::Invalid(format!("query {qid}: bad run tag `{}`", e.tag)));
        }
        if i > 0 && e.score > entries[i - 1].score {
            return Err(Error::Invalid(format!(
                "query {qid}: score increases at rank {}",
                e.rank
            )));
        }
    }
    Ok(())
}

pub fn load_run(path: impl AsRef<Path>) -> Result<Run> {
    let path = path.as_ref();
    Run::parse(&read_text(path)?, &path.display().to_string())
}

pub fn write_run(run: &Run, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &run.to_trec())
}
