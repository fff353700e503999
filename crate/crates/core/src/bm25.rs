//! BM25 first-stage retrieval over an in-memory inverted index.
//!
//! Analysis is lowercase plus splitting on every non-alphanumeric
//! character; there is no stemming and no stopword list.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Collection, QuerySet, Run};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 >= 0.0 && self.k1.is_finite()) || !(0.0..=1.0).contains(&self.b) {
            return Err(Error::Config(format!(
                "bm25 needs k1 >= 0 and b in [0, 1], got k1 = {}, b = {}",
                self.k1, self.b
            )));
        }
        Ok(())
    }
}

pub fn analyze(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// `(internal doc number, term frequency)`
pub type Posting = (u32, u32);

/// Internal doc numbers follow the lexicographic order of doc ids, so
/// comparing numbers breaks score ties by doc id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    doc_ids: Vec<String>,
    doc_lens: Vec<u32>,
    avg_doc_len: f64,
    postings: BTreeMap<String, Vec<Posting>>,
}

pub fn build_index(collection: &Collection) -> Result<InvertedIndex> {
    if collection.is_empty() {
        return Err(Error::Invalid("cannot index an empty collection".into()));
    }
    let mut doc_ids = Vec::with_capacity(collection.len());
    let mut doc_lens = Vec::with_capacity(collection.len());
    let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
    for (n, (id, text)) in collection.iter().enumerate() {
        let terms = analyze(text);
        doc_ids.push(id.to_string());
        doc_lens.push(terms.len() as u32);
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for t in terms {
            *tf.entry(t).or_default() += 1;
        }
        for (t, f) in tf {
            postings.entry(t).or_default().push((n as u32, f));
        }
    }
    let total: u64 = doc_lens.iter().map(|&l| l as u64).sum();
    Ok(InvertedIndex {
        avg_doc_len: total as f64 / doc_ids.len() as f64,
        doc_ids,
        doc_lens,
        postings,
    })
}

impl InvertedIndex {
    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_doc_len
    }

    pub fn num_terms(&self) -> usize {
        self.postings.len()
    }

    pub fn doc_len(&self, doc_id: &str) -> Option<u32> {
        self.doc_number(doc_id).map(|n| self.doc_lens[n])
    }

    fn doc_number(&self, doc_id: &str) -> Option<usize> {
        self.doc_ids.binary_search_by(|d| d.as_str().cmp(doc_id)).ok()
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn tf(&self, term: &str, doc_id: &str) -> u32 {
        let (Some(list), Some(n)) = (self.postings.get(term), self.doc_number(doc_id)) else {
            return 0;
        };
        list.binary_search_by_key(&(n as u32), |p| p.0)
            .map_or(0, |i| list[i].1)
    }

    /// Postings as `(doc_id, tf)`, ordered by doc id.
    pub fn postings(&self, term: &str) -> Vec<(&str, u32)> {
        self.postings.get(term).map_or_else(Vec::new, |l| {
            l.iter()
                .map(|&(n, f)| (self.doc_ids[n as usize].as_str(), f))
                .collect()
        })
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.num_docs() as f64;
        let df = self.df(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, tf: u32, doc_len: u32, p: &Bm25Params) -> f64 {
        let tf = tf as f64;
        let norm = 1.0 - p.b + p.b * doc_len as f64 / self.avg_doc_len;
        tf * (p.k1 + 1.0) / (tf + p.k1 * norm)
    }

    /// Top `k` documents sharing at least one term with the query, score
    /// descending, ties by doc id ascending. Repeated query terms count
    /// once per occurrence.
    pub fn retrieve(&self, query: &str, k: usize, params: &Bm25Params) -> Vec<(String, f64)> {
        let mut scores = vec![0.0f64; self.num_docs()];
        let mut hit = vec![false; self.num_docs()];
        for term in analyze(query) {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.idf(&term);
            for &(n, tf) in list {
                let n = n as usize;
                scores[n] += idf * self.term_weight(tf, self.doc_lens[n], params);
                hit[n] = true;
            }
        }
        let mut ranked: Vec<usize> = (0..self.num_docs()).filter(|&n| hit[n]).collect();
        ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        ranked.truncate(k);
        ranked
            .into_iter()
            .map(|n| (self.doc_ids[n].clone(), scores[n]))
            .collect()
    }

    /// Retrieves every query into a run tagged `tag`. Queries without any
    /// matching document are absent from the run.
    pub fn retrieve_run(&self, queries: &QuerySet, k: usize, params: &Bm25Params, tag: &str) -> Result<Run> {
        params.validate()?;
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let mut run = Run::new();
        for (qid, text) in queries.iter() {
            let hits = self.retrieve(text, k, params);
            if !hits.is_empty() {
                run.insert_scored(qid, hits, tag)?;
            }
        }
        Ok(run)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("index serializes");
        crate::corpus::write_text(path, &text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::corpus::read_text(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), e.line(), e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coll(docs: &[(&str, &str)]) -> Collection {
        let mut c = Collection::new();
        for (id, text) in docs {
            c.insert(*id, *text).unwrap();
        }
        c
    }

    #[test]
    fn counting_example() {
        let idx = build_index(&coll(&[("d1", "a b a"), ("d2", "b c")])).unwrap();
        assert_eq!(idx.df("a"), 1);
        assert_eq!(idx.df("b"), 2);
        assert_eq!(idx.tf("a", "d1"), 2);
        assert_eq!(idx.avg_doc_len(), 2.5);
        assert_eq!(idx, build_index(&coll(&[("d2", "b c"), ("d1", "a b a")])).unwrap());
    }

    #[test]
    fn analysis() {
        assert_eq!(analyze("Don't STOP-me now!"), ["don", "t", "stop", "me", "now"]);
        assert!(analyze(" ,. ").is_empty());
    }

    #[test]
    fn three_doc_hand_case() {
        let idx = build_index(&coll(&[("d1", "cat sat"), ("d2", "cat cat sat"), ("d3", "dog")])).unwrap();
        // N = 3, df(cat) = 2, avgdl = 2
        let idf = (1.0f64 + 1.5 / 2.5).ln();
        let d1 = idf * 2.2 / (1.0 + 1.2 * (0.25 + 0.75 * 2.0 / 2.0));
        let d2 = idf * 2.0 * 2.2 / (2.0 + 1.2 * (0.25 + 0.75 * 3.0 / 2.0));
        let got = idx.retrieve("cat", 10, &Bm25Params::default());
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].0, "d2");
        assert_eq!(got[1].0, "d1");
        assert!((got[0].1 - d2).abs() < 1e-12);
        assert!((got[1].1 - d1).abs() < 1e-12);
        // the query term counts twice when repeated
        let twice = idx.retrieve("cat CAT", 10, &Bm25Params::default());
        assert!((twice[0].1 - 2.0 * d2).abs() < 1e-12);
        assert!(idx.retrieve("unicorn", 10, &Bm25Params::default()).is_empty());
        assert_eq!(idx.retrieve("cat", 1, &Bm25Params::default()).len(), 1);
    }

    #[test]
    fn ties_break_by_doc_id() {
        let idx = build_index(&coll(&[("b", "x y"), ("a", "x y"), ("c", "x y")])).unwrap();
        let got: Vec<String> = idx
            .retrieve("x", 3, &Bm25Params::default())
            .into_iter()
            .map(|h| h.0)
            .collect();
        assert_eq!(got, ["a", "b", "c"]);
    }

    #[test]
    fn empty_collection_is_an_error() {
        assert!(build_index(&Collection::new()).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let idx = build_index(&coll(&[("d1", "a b a"), ("d2", "b c")])).unwrap();
        let path = dir.path().join("index.json");
        idx.save(&path).unwrap();
        assert_eq!(InvertedIndex::load(&path).unwrap(), idx);
    }

    #[test]
    fn run_for_queries() {
        let idx = build_index(&coll(&[("d1", "cat sat"), ("d2", "cat cat sat"), ("d3", "dog")])).unwrap();
        let mut q = QuerySet::new();
        q.insert("q1", "cat").unwrap();
        q.insert("q2", "bird").unwrap();
        let run = idx.retrieve_run(&q, 100, &Bm25Params::default(), "bm25").unwrap();
        assert_eq!(run.num_queries(), 1);
        let r = run.query("q1").unwrap();
        assert_eq!((r[0].doc_id.as_str(), r[0].rank, r[0].tag.as_str()), ("d2", 1, "bm25"));
        assert!(idx.retrieve_run(&q, 0, &Bm25Params::default(), "bm25").is_err());
    }
}
