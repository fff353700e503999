//! Linear centered kernel alignment between hidden representations.
//!
//! [`compare`] runs two models (or one model under two perturbations) over
//! the same inputs, captures the hidden states at every layer and averages
//! batch-wise CKA per layer. Layer 0 is the embedding output.

use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::model::{Float, ForwardOptions, Model};
use crate::perturb::{self, PerturbMode};
use crate::tokenizer::TokenizedPair;

/// `||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F)` after centering the columns
/// of both matrices.
pub fn cka_linear(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::Invalid(format!(
            "CKA needs the same number of rows, got {} and {}",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.nrows() < 2 {
        return Err(Error::Invalid("CKA needs at least two rows".into()));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("CKA input contains non-finite values".into()));
    }
    let xc = center(x);
    let yc = center(y);
    for (raw, c) in [(x, &xc), (y, &yc)] {
        // Centering identical rows can leave round-off residue; treat
        // anything at that scale as constant.
        let spread = frobenius_sq(c).sqrt();
        let scale = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if spread <= CONSTANT_TOL * scale || spread == 0.0 {
            return Err(Error::Degenerate(
                "representation has zero variance in every column".into(),
            ));
        }
    }
    let cross = frobenius_sq(&yc.t().dot(&xc));
    let xx = frobenius_sq(&xc.t().dot(&xc)).sqrt();
    let yy = frobenius_sq(&yc.t().dot(&yc)).sqrt();
    Ok(cross / (xx * yy))
}

const CONSTANT_TOL: f64 = 1e-12;

fn center(m: ArrayView2<f64>) -> Array2<f64> {
    let mean = m.mean_axis(Axis(0)).expect("non-empty");
    &m - &mean
}

fn frobenius_sq(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selector {
    /// One row per example: the `[CLS]` state.
    ClsOnly,
    /// One row per non-padding token, aligned by original token position.
    AllTokens,
}

impl Selector {
    pub fn label(&self) -> &'static str {
        match self {
            Selector::ClsOnly => "cls_only",
            Selector::AllTokens => "all_tokens",
        }
    }
}

impl FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" | "cls_only" => Ok(Selector::ClsOnly),
            "all" | "all_tokens" => Ok(Selector::AllTokens),
            _ => Err(Error::Config(format!("unknown selector `{s}` (cls_only | all_tokens)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCka {
    pub layer: usize,
    /// Mean over the batches that were not degenerate.
    pub mean: Option<f64>,
    pub per_batch: Vec<f64>,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CkaReport {
    pub selector: Selector,
    pub label_a: String,
    pub label_b: String,
    pub layers: Vec<LayerCka>,
}

impl CkaReport {
    /// `layer,cka_mean,n_batches`; layers without a usable batch print `nan`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,cka_mean,n_batches\n");
        for l in &self.layers {
            let mean = l.mean.map_or("nan".to_string(), |m| format!("{m:.6}"));
            writeln!(out, "{},{},{}", l.layer, mean, l.per_batch.len()).expect("write to string");
        }
        out
    }

    /// Value at the last layer.
    pub fn last(&self) -> Option<f64> {
        self.layers.last().and_then(|l| l.mean)
    }
}

/// Rows of the representation matrix for one example at one layer.
fn append_rows<T: Float>(
    rows: &mut Vec<f64>,
    hidden: &Array2<T>,
    source: &[usize],
    n_total: usize,
    selector: Selector,
) {
    match selector {
        Selector::ClsOnly => rows.extend(hidden.row(0).iter().map(|v| v.f64())),
        Selector::AllTokens => {
            // position of each original token in the perturbed input
            let mut at = vec![0; n_total];
            for (i, &s) in source.iter().take(n_total).enumerate() {
                at[s] = i;
            }
            for &i in &at {
                rows.extend(hidden.row(i).iter().map(|v| v.f64()));
            }
        }
    }
}

fn capture<T: Float>(
    model: &Model<T>,
    batch: &[TokenizedPair],
    keys: &[String],
    mode: PerturbMode,
    selector: Selector,
) -> Result<Vec<Array2<f64>>> {
    let mut inputs = Vec::with_capacity(batch.len());
    let mut sources = Vec::with_capacity(batch.len());
    for (pair, key) in batch.iter().zip(keys) {
        let (p, s) = perturb::apply_with_permutation(pair, mode, key);
        inputs.push(p);
        sources.push(s);
    }
    let opts = ForwardOptions {
        capture: true,
        ..ForwardOptions::default()
    };
    let outs = model.forward(&inputs, opts)?;
    let n_points = model.config().n_layers + 1;
    let d = model.config().hidden;
    let mut layers = vec![Vec::new(); n_points];
    for ((out, src), pair) in outs.iter().zip(&sources).zip(batch) {
        let acts = out.activations.as_ref().expect("captured");
        for (l, rows) in layers.iter_mut().enumerate() {
            append_rows(rows, &acts[l], src, pair.n_total, selector);
        }
    }
    Ok(layers
        .into_iter()
        .map(|rows| {
            let n = rows.len() / d;
            Array2::from_shape_vec((n, d), rows).expect("row-major rows")
        })
        .collect())
}

/// Batch-averaged CKA per layer between `model_a` on `perturb_a` inputs and
/// `model_b` on `perturb_b` inputs. `keys[i]` is the perturbation key of
/// `pairs[i]`. Degenerate batches are skipped and counted.
#[allow(clippy::too_many_arguments)]
pub fn compare<T: Float>(
    model_a: &Model<T>,
    perturb_a: PerturbMode,
    model_b: &Model<T>,
    perturb_b: PerturbMode,
    pairs: &[TokenizedPair],
    keys: &[String],
    selector: Selector,
    batch_size: usize,
) -> Result<CkaReport> {
    if pairs.is_empty() {
        return Err(Error::Invalid("CKA comparison needs at least one input".into()));
    }
    if keys.len() != pairs.len() {
        return Err(Error::Invalid("one perturbation key per input required".into()));
    }
    if batch_size < 2 {
        return Err(Error::Config("CKA batch size must be at least 2".into()));
    }
    let (ca, cb) = (model_a.config(), model_b.config());
    if ca.n_layers != cb.n_layers || ca.vocab_size != cb.vocab_size || ca.max_len != cb.max_len {
        return Err(Error::Config(
            "compared models must share depth, vocabulary and max_len".into(),
        ));
    }
    let n_points = ca.n_layers + 1;
    let mut layers: Vec<LayerCka> = (0..n_points)
        .map(|layer| LayerCka {
            layer,
            mean: None,
            per_batch: Vec::new(),
            skipped: 0,
        })
        .collect();
    for (chunk, chunk_keys) in pairs.chunks(batch_size).zip(keys.chunks(batch_size)) {
        if selector == Selector::ClsOnly && chunk.len() < 2 {
            continue;
        }
        let xa = capture(model_a, chunk, chunk_keys, perturb_a, selector)?;
        let xb = capture(model_b, chunk, chunk_keys, perturb_b, selector)?;
        for (l, entry) in layers.iter_mut().enumerate() {
            match cka_linear(xa[l].view(), xb[l].view()) {
                Ok(v) => entry.per_batch.push(v),
                Err(Error::Degenerate(msg)) => {
                    log::debug!("layer {l}: skipping degenerate batch ({msg})");
                    entry.skipped += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
    for l in &mut layers {
        if l.skipped > 0 {
            log::warn!("layer {}: skipped {} degenerate batches", l.layer, l.skipped);
        }
        if !l.per_batch.is_empty() {
            l.mean = Some(l.per_batch.iter().sum::<f64>() / l.per_batch.len() as f64);
        }
    }
    Ok(CkaReport {
        selector,
        label_a: perturb_a.to_string(),
        label_b: perturb_b.to_string(),
        layers,
    })
}
