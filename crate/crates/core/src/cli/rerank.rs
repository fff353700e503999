use crate::corpus::{Collection, QuerySet, Run, RunEntry};
use crate::error::{Error, Result};
use crate::model::{AnyModel, Float, Model};
use crate::perturb::{self, PerturbMode};
use crate::tokenizer::{TokenizedPair, Vocab};

/// Anything that can score an encoded pair; higher means more relevant.
pub trait Scorer {
    fn max_len(&self) -> usize;
    fn relevance_margin(&self, pair: &TokenizedPair) -> Result<f64>;
}

impl<T: Float> Scorer for Model<T> {
    fn max_len(&self) -> usize {
        self.config().max_len
    }

    fn relevance_margin(&self, pair: &TokenizedPair) -> Result<f64> {
        Model::relevance_margin(self, pair)
    }
}

impl Scorer for AnyModel {
    fn max_len(&self) -> usize {
        self.config().max_len
    }

    fn relevance_margin(&self, pair: &TokenizedPair) -> Result<f64> {
        AnyModel::relevance_margin(self, pair)
    }
}

#[derive(Debug, Clone)]
pub struct RerankOptions {
    /// Depth of the re-scored block.
    pub k: usize,
    pub perturb: PerturbMode,
    pub tag: String,
}

impl Default for RerankOptions {
    fn default() -> Self {
        RerankOptions {
            k: 100,
            perturb: PerturbMode::Natural,
            tag: "rerank".into(),
        }
    }
}

/// Perturbation key of a (query, passage) pair at evaluation time.
pub fn pair_key(qid: &str, doc_id: &str) -> String {
    format!("{qid}:{doc_id}")
}

/// Re-scores the top `k` entries of every query with the model's relevance
/// margin. Entries below `k` keep their relative order and get scores
/// `min(top-k score) - (rank - k)`, so the run stays consistent.
pub fn rerank<S: Scorer + ?Sized>(
    model: &S,
    vocab: &Vocab,
    queries: &QuerySet,
    collection: &Collection,
    run: &Run,
    opts: &RerankOptions,
) -> Result<Run> {
    if opts.k == 0 {
        return Err(Error::Config("rerank depth must be at least 1".into()));
    }
    let mut out = Run::new();
    for (qid, entries) in run.queries() {
        let query = queries
            .get(qid)
            .ok_or_else(|| Error::Invalid(format!("query {qid} of the run has no text")))?;
        let split = opts.k.min(entries.len());
        let mut scored = Vec::with_capacity(split);
        for e in &entries[..split] {
            let text = collection
                .get(&e.doc_id)
                .ok_or_else(|| Error::Invalid(format!("document {} is not in the collection", e.doc_id)))?;
            let pair = vocab.encode_pair(query, text, model.max_len())?;
            let pair = perturb::apply(&pair, opts.perturb, &pair_key(qid, &e.doc_id));
            let s = model.relevance_margin(&pair)?;
            if !s.is_finite() {
                return Err(Error::Degenerate(format!("non-finite score for {qid}/{}", e.doc_id)));
            }
            scored.push((e.doc_id.clone(), s));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let floor = scored.last().map_or(0.0, |s| s.1);
        let mut ranked: Vec<RunEntry> = scored
            .into_iter()
            .enumerate()
            .map(|(i, (doc_id, score))| RunEntry {
                doc_id,
                score,
                rank: i as u32 + 1,
                tag: opts.tag.clone(),
            })
            .collect();
        for e in &entries[split..] {
            ranked.push(RunEntry {
                doc_id: e.doc_id.clone(),
                score: floor - (e.rank as f64 - split as f64),
                rank: e.rank,
                tag: opts.tag.clone(),
            });
        }
        out.insert_ranked(qid, ranked)?;
    }
    Ok(out)
}
