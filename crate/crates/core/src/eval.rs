//! Ranking metrics: NDCG@k, MAP, Recall@k and MRR@k.
//!
//! Metrics consume ranks only. Documents missing from the qrels have grade
//! 0. A query is evaluated when the qrels hold at least one document with
//! grade `>= threshold`; a qrels query absent from the run scores 0.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Qrels, Run};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gain {
    /// `grade`
    Linear,
    /// `2^grade - 1`
    Exponential,
}

impl FromStr for Gain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Gain::Linear),
            "exp" | "exponential" => Ok(Gain::Exponential),
            _ => Err(Error::Config(format!("unknown gain `{s}` (linear | exp)"))),
        }
    }
}

impl Gain {
    fn of(self, grade: u32) -> f64 {
        match self {
            Gain::Linear => grade as f64,
            Gain::Exponential => 2f64.powi(grade as i32) - 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub ndcg_k: usize,
    pub recall_k: usize,
    pub mrr_k: usize,
    /// Minimum grade counted as relevant by MAP, recall and MRR.
    pub threshold: u32,
    pub gain: Gain,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ndcg_k: 10,
            recall_k: 100,
            mrr_k: 10,
            threshold: 1,
            gain: Gain::Linear,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if self.threshold == 0 {
            return Err(Error::Config("relevance threshold must be at least 1".into()));
        }
        if self.ndcg_k == 0 || self.recall_k == 0 || self.mrr_k == 0 {
            return Err(Error::Config("metric cutoffs must be at least 1".into()));
        }
        Ok(())
    }
}

fn grade_of(judged: &BTreeMap<String, u32>, doc: &str) -> u32 {
    judged.get(doc).copied().unwrap_or(0)
}

/// NDCG over the first `k` ranks; `None` when no judged document has a
/// positive grade.
pub fn ndcg_at_k(ranking: &[&str], judged: &BTreeMap<String, u32>, k: usize, gain: Gain) -> Option<f64> {
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let mut ideal: Vec<u32> = judged.values().copied().filter(|&g| g > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, &g)| gain.of(g) * discount(i)).sum();
    if idcg == 0.0 {
        return None;
    }
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain.of(grade_of(judged, d)) * discount(i))
        .sum();
    Some(dcg / idcg)
}

fn n_relevant(judged: &BTreeMap<String, u32>, threshold: u32) -> usize {
    judged.values().filter(|&&g| g >= threshold).count()
}

/// Average precision over the full ranking.
pub fn average_precision(ranking: &[&str], judged: &BTreeMap<String, u32>, threshold: u32) -> Option<f64> {
    let total = n_relevant(judged, threshold);
    if total == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, d) in ranking.iter().enumerate() {
        if grade_of(judged, d) >= threshold {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

pub fn recall_at_k(ranking: &[&str], judged: &BTreeMap<String, u32>, k: usize, threshold: u32) -> Option<f64> {
    let total = n_relevant(judged, threshold);
    if total == 0 {
        return None;
    }
    let found = ranking
        .iter()
        .take(k)
        .filter(|d| grade_of(judged, d) >= threshold)
        .count();
    Some(found as f64 / total as f64)
}

pub fn reciprocal_rank_at_k(ranking: &[&str], judged: &BTreeMap<String, u32>, k: usize, threshold: u32) -> Option<f64> {
    if n_relevant(judged, threshold) == 0 {
        return None;
    }
    Some(
        ranking
            .iter()
            .take(k)
            .position(|d| grade_of(judged, d) >= threshold)
            .map_or(0.0, |i| 1.0 / (i + 1) as f64),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct QueryMetrics {
    pub ndcg: f64,
    pub map: f64,
    pub recall: f64,
    pub mrr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub options: EvalOptions,
    pub per_query: BTreeMap<String, QueryMetrics>,
    /// Arithmetic mean over `per_query`.
    pub mean: QueryMetrics,
    /// Qrels queries without any document at or above the threshold.
    pub skipped: usize,
}

/// Scores `run` against `qrels`.
pub fn evaluate(run: &Run, qrels: &Qrels, opts: &EvalOptions) -> Result<MetricsReport> {
    opts.validate()?;
    let mut per_query = BTreeMap::new();
    let mut skipped = 0;
    for (qid, judged) in qrels.queries() {
        let ranking: Vec<&str> = run
            .query(qid)
            .map(|r| r.iter().map(|e| e.doc_id.as_str()).collect())
            .unwrap_or_default();
        let (Some(map), Some(recall), Some(mrr)) = (
            average_precision(&ranking, judged, opts.threshold),
            recall_at_k(&ranking, judged, opts.recall_k, opts.threshold),
            reciprocal_rank_at_k(&ranking, judged, opts.mrr_k, opts.threshold),
        ) else {
            skipped += 1;
            continue;
        };
        // a relevant document exists, so the ideal DCG is positive
        let ndcg = ndcg_at_k(&ranking, judged, opts.ndcg_k, opts.gain).unwrap_or(0.0);
        per_query.insert(qid.to_string(), QueryMetrics { ndcg, map, recall, mrr });
    }
    let n = per_query.len().max(1) as f64;
    let mut mean = QueryMetrics::default();
    for m in per_query.values() {
        mean.ndcg += m.ndcg;
        mean.map += m.map;
        mean.recall += m.recall;
        mean.mrr += m.mrr;
    }
    mean.ndcg /= n;
    mean.map /= n;
    mean.recall /= n;
    mean.mrr /= n;
    Ok(MetricsReport {
        options: *opts,
        per_query,
        mean,
        skipped,
    })
}

impl MetricsReport {
    pub fn names(&self) -> [String; 4] {
        let o = &self.options;
        [
            format!("ndcg@{}", o.ndcg_k),
            "map".to_string(),
            format!("recall@{}", o.recall_k),
            format!("mrr@{}", o.mrr_k),
        ]
    }

    /// `metric<TAB>qid|all<TAB>value`, four decimals; per-query lines
    /// first, then the means.
    pub fn to_tsv(&self) -> String {
        let names = self.names();
        let values = |m: &QueryMetrics| [m.ndcg, m.map, m.recall, m.mrr];
        let mut out = String::new();
        for (qid, m) in &self.per_query {
            for (name, v) in names.iter().zip(values(m)) {
                writeln!(out, "{name}\t{qid}\t{v:.4}").expect("write to string");
            }
        }
        for (name, v) in names.iter().zip(values(&self.mean)) {
            writeln!(out, "{name}\tall\t{v:.4}").expect("write to string");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn judged(pairs: &[(&str, u32)]) -> BTreeMap<String, u32> {
        pairs.iter().map(|(d, g)| (d.to_string(), *g)).collect()
    }

    #[test]
    fn ndcg_examples() {
        let j = judged(&[("a", 1)]);
        let v = ndcg_at_k(&["x", "a"], &j, 10, Gain::Linear).unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-12);
        let j = judged(&[("a", 3), ("b", 1), ("c", 2)]);
        assert_eq!(ndcg_at_k(&["a", "c", "b"], &j, 10, Gain::Linear), Some(1.0));
        assert_eq!(ndcg_at_k(&["a"], &judged(&[("a", 0)]), 10, Gain::Linear), None);
        assert_eq!(ndcg_at_k(&["z"], &j, 10, Gain::Exponential), Some(0.0));
    }

    #[test]
    fn binary_examples() {
        let j = judged(&[("a", 1), ("c", 2), ("n", 0)]);
        let r = ["a", "b", "c"];
        assert!((average_precision(&r, &j, 1).unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(average_precision(&r, &j, 2), Some(1.0 / 3.0));
        assert_eq!(recall_at_k(&["b", "n"], &j, 100, 1), Some(0.0));
        let mut late: Vec<String> = (0..10).map(|i| format!("x{i}")).collect();
        late.push("a".into());
        let late: Vec<&str> = late.iter().map(String::as_str).collect();
        assert_eq!(reciprocal_rank_at_k(&late, &j, 10, 1), Some(0.0));
        assert_eq!(reciprocal_rank_at_k(&late, &j, 11, 1), Some(1.0 / 11.0));
    }

    #[test]
    fn report_and_tsv() {
        let mut qrels = Qrels::new();
        qrels.insert("q1", "a", 1).unwrap();
        qrels.insert("q2", "b", 2).unwrap();
        qrels.insert("q3", "c", 0).unwrap();
        let mut run = Run::new();
        run.insert_scored("q1", vec![("x".into(), 2.0), ("a".into(), 1.0)], "t").unwrap();
        let rep = evaluate(&run, &qrels, &EvalOptions::default()).unwrap();
        assert_eq!(rep.skipped, 1);
        assert_eq!(rep.per_query.len(), 2);
        assert_eq!(rep.per_query["q2"], QueryMetrics::default());
        assert!((rep.mean.mrr - 0.25).abs() < 1e-12);
        let tsv = rep.to_tsv();
        assert!(tsv.contains("ndcg@10\tq1\t0.6309\n"));
        assert!(tsv.ends_with("mrr@10\tall\t0.2500\n"));
        assert_eq!(tsv.lines().count(), 12);
    }

    #[test]
    fn threshold_two_skips_low_grades() {
        let mut qrels = Qrels::new();
        qrels.insert("q1", "a", 1).unwrap();
        let run = Run::new();
        let opts = EvalOptions {
            threshold: 2,
            ..EvalOptions::default()
        };
        let rep = evaluate(&run, &qrels, &opts).unwrap();
        assert_eq!((rep.skipped, rep.per_query.len()), (1, 0));
        assert!(evaluate(&run, &qrels, &EvalOptions { threshold: 0, ..opts }).is_err());
    }
}
