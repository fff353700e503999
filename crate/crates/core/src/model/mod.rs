//! Miniature BERT-style cross-encoder.
//!
//! Input embedding is `token[id] + segment[seg] (+ position[i])` followed by
//! layer norm; each encoder layer is post-norm multi-head self-attention and
//! a GELU feed-forward block; a linear head maps the final `[CLS]` state to
//! two logits (non-relevant, relevant).
//!
//! With [`PositionMode::None`] the position table does not exist and no
//! computation reads the position index, so the encoder sees each segment
//! as a bag of tokens.
//!
//! All parameters live in one flat buffer described by a [`Layout`], which
//! keeps the optimizer, gradient checks and checkpoints simple.

mod backward;
mod checkpoint;
mod forward;
mod ops;

pub use checkpoint::{load_any, load_model, save_model, AnyModel};
pub use forward::{ForwardOptions, ForwardOutput};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, LinalgScalar, ScalarOperand};
use num_traits::FromPrimitive;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tokenizer::TokenizedPair;

/// Floating-point element type for model parameters and activations.
pub trait Float:
    num_traits::Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    const PRECISION: Precision;
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Float for f32 {
    const PRECISION: Precision = Precision::F32;
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Float for f64 {
    const PRECISION: Precision = Precision::F64;
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    Learned,
    None,
}

impl PositionMode {
    pub fn label(&self) -> &'static str {
        match self {
            PositionMode::Learned => "learned",
            PositionMode::None => "none",
        }
    }
}

impl std::str::FromStr for PositionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(PositionMode::Learned),
            "none" => Ok(PositionMode::None),
            _ => Err(Error::Config(format!(
                "unknown position mode `{s}` (learned | none)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "32")]
    F32,
    #[serde(rename = "64")]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "32" | "f32" => Ok(Precision::F32),
            "64" | "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision `{s}` (32 | 64)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub n_segments: usize,
    pub dropout: f64,
    pub position_mode: PositionMode,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            hidden: 32,
            ff_dim: 64,
            vocab_size: 1000,
            max_len: 64,
            n_segments: 2,
            dropout: 0.1,
            position_mode: PositionMode::Learned,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.n_layers == 0 || self.n_heads == 0 || self.hidden == 0 || self.ff_dim == 0 {
            return bad("layer, head, hidden and ff sizes must be positive".into());
        }
        if self.hidden % self.n_heads != 0 {
            return bad(format!(
                "hidden {} is not divisible by {} heads",
                self.hidden, self.n_heads
            ));
        }
        if self.vocab_size < 5 || self.max_len < 8 {
            return bad("vocab_size >= 5 and max_len >= 8 required".into());
        }
        if self.n_segments != 2 {
            return bad("exactly two segments are supported".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Checkpoint(format!("config block: {e}")))
    }
}

/// Contiguous block of the parameter buffer holding a `rows x cols` matrix
/// (vectors have `rows == 1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn mat<'a, T>(&self, data: &'a [T]) -> ArrayView2<'a, T> {
        ArrayView2::from_shape((self.rows, self.cols), &data[self.range()]).expect("slot shape")
    }

    pub fn mat_mut<'a, T>(&self, data: &'a mut [T]) -> ArrayViewMut2<'a, T> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut data[self.range()])
            .expect("slot shape")
    }

    pub fn vec<'a, T>(&self, data: &'a [T]) -> ArrayView1<'a, T> {
        ArrayView1::from(&data[self.range()])
    }

    pub fn vec_mut<'a, T>(&self, data: &'a mut [T]) -> ArrayViewMut1<'a, T> {
        ArrayViewMut1::from(&mut data[self.range()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Weight,
    Bias,
    Gain,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub(crate) slot: Slot,
}

impl ParamEntry {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.slot.range()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerSlots {
    pub wq: Slot,
    pub bq: Slot,
    pub wk: Slot,
    pub bk: Slot,
    pub wv: Slot,
    pub bv: Slot,
    pub wo: Slot,
    pub bo: Slot,
    pub ln1_g: Slot,
    pub ln1_b: Slot,
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub b2: Slot,
    pub ln2_g: Slot,
    pub ln2_b: Slot,
}

/// Named tensors and their placement in the flat parameter buffer.
#[derive(Debug, Clone)]
pub struct Layout {
    pub(crate) token: Slot,
    pub(crate) segment: Slot,
    pub(crate) position: Option<Slot>,
    pub(crate) emb_ln_g: Slot,
    pub(crate) emb_ln_b: Slot,
    pub(crate) layers: Vec<LayerSlots>,
    pub(crate) cls_w: Slot,
    pub(crate) cls_b: Slot,
    entries: Vec<ParamEntry>,
    total: usize,
}

struct LayoutBuilder {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, kind: ParamKind, rows: usize, cols: usize) -> Slot {
        let slot = Slot {
            offset: self.total,
            rows,
            cols,
        };
        let shape = if matches!(kind, ParamKind::Bias | ParamKind::Gain) {
            vec![cols]
        } else {
            vec![rows, cols]
        };
        self.entries.push(ParamEntry {
            name,
            kind,
            shape,
            slot,
        });
        self.total += rows * cols;
        slot
    }

    fn matrix(&mut self, name: String, rows: usize, cols: usize) -> Slot {
        self.add(name, ParamKind::Weight, rows, cols)
    }

    fn vector(&mut self, name: String, kind: ParamKind, len: usize) -> Slot {
        self.add(name, kind, 1, len)
    }
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let d = c.hidden;
        let mut b = LayoutBuilder {
            entries: Vec::new(),
            total: 0,
        };
        let token = b.add("embeddings.token".into(), ParamKind::Embedding, c.vocab_size, d);
        let segment = b.add("embeddings.segment".into(), ParamKind::Embedding, c.n_segments, d);
        let position = match c.position_mode {
            PositionMode::Learned => {
                Some(b.add("embeddings.position".into(), ParamKind::Embedding, c.max_len, d))
            }
            PositionMode::None => None,
        };
        let emb_ln_g = b.vector("embeddings.norm.gain".into(), ParamKind::Gain, d);
        let emb_ln_b = b.vector("embeddings.norm.bias".into(), ParamKind::Bias, d);
        let layers = (0..c.n_layers)
            .map(|l| {
                let p = |s: &str| format!("layer.{l}.{s}");
                LayerSlots {
                    wq: b.matrix(p("attn.query.weight"), d, d),
                    bq: b.vector(p("attn.query.bias"), ParamKind::Bias, d),
                    wk: b.matrix(p("attn.key.weight"), d, d),
                    bk: b.vector(p("attn.key.bias"), ParamKind::Bias, d),
                    wv: b.matrix(p("attn.value.weight"), d, d),
                    bv: b.vector(p("attn.value.bias"), ParamKind::Bias, d),
                    wo: b.matrix(p("attn.output.weight"), d, d),
                    bo: b.vector(p("attn.output.bias"), ParamKind::Bias, d),
                    ln1_g: b.vector(p("attn.norm.gain"), ParamKind::Gain, d),
                    ln1_b: b.vector(p("attn.norm.bias"), ParamKind::Bias, d),
                    w1: b.matrix(p("ffn.inner.weight"), d, c.ff_dim),
                    b1: b.vector(p("ffn.inner.bias"), ParamKind::Bias, c.ff_dim),
                    w2: b.matrix(p("ffn.outer.weight"), c.ff_dim, d),
                    b2: b.vector(p("ffn.outer.bias"), ParamKind::Bias, d),
                    ln2_g: b.vector(p("ffn.norm.gain"), ParamKind::Gain, d),
                    ln2_b: b.vector(p("ffn.norm.bias"), ParamKind::Bias, d),
                }
            })
            .collect();
        let cls_w = b.matrix("classifier.weight".into(), d, 2);
        let cls_b = b.vector("classifier.bias".into(), ParamKind::Bias, 2);
        Layout {
            token,
            segment,
            position,
            emb_ln_g,
            emb_ln_b,
            layers,
            cls_w,
            cls_b,
            entries: b.entries,
            total: b.total,
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

/// Standard deviation of the normal initialisation for embedding tables and
/// weight matrices.
pub const INIT_STD: f64 = 0.02;

fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(s)
}

/// Cross-encoder with parameters of element type `T`.
#[derive(Debug, Clone)]
pub struct Model<T: Float> {
    config: ModelConfig,
    layout: Layout,
    params: Vec<T>,
}

impl<T: Float> Model<T> {
    /// Seeded initialisation. Each tensor draws from its own generator keyed
    /// by `(seed, tensor name)`, so models that differ only in position mode
    /// start from identical shared tensors.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.precision != T::PRECISION {
            return Err(Error::Config(format!(
                "config precision {:?} does not match element type {:?}",
                config.precision,
                T::PRECISION
            )));
        }
        let layout = Layout::new(&config);
        let mut params = vec![T::zero(); layout.total()];
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        for e in layout.entries() {
            let dst = &mut params[e.range()];
            match e.kind {
                ParamKind::Embedding | ParamKind::Weight => {
                    let mut rng = tensor_rng(seed, &e.name);
                    for v in dst.iter_mut() {
                        *v = T::c(normal.sample(&mut rng));
                    }
                }
                ParamKind::Bias => dst.fill(T::zero()),
                ParamKind::Gain => dst.fill(T::one()),
            }
        }
        Ok(Model {
            config,
            layout,
            params,
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.total(),
                params.len()
            )));
        }
        Ok(Model {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn has_position_table(&self) -> bool {
        self.layout.position.is_some()
    }

    /// Relevance probability in eval mode (no dropout, no capture).
    pub fn score(&self, pair: &TokenizedPair) -> Result<f64> {
        self.check_input(pair)?;
        Ok(self.forward_one(pair, &ForwardOptions::default(), 0).relevance_prob)
    }

    /// `logit[relevant] - logit[non-relevant]`: monotone in [`Model::score`]
    /// but does not saturate, so it ranks confidently scored passages
    /// without ties.
    pub fn relevance_margin(&self, pair: &TokenizedPair) -> Result<f64> {
        self.check_input(pair)?;
        let out = self.forward_one(pair, &ForwardOptions::default(), 0);
        Ok(out.logits[1] - out.logits[0])
    }

    pub(crate) fn check_input(&self, pair: &TokenizedPair) -> Result<()> {
        let c = &self.config;
        if pair.ids.len() > c.max_len {
            return Err(Error::Invalid(format!(
                "input length {} exceeds max_len {}",
                pair.ids.len(),
                c.max_len
            )));
        }
        if pair.n_total == 0 || pair.n_total > pair.ids.len() || pair.segments.len() != pair.ids.len() {
            return Err(Error::Invalid("malformed tokenized pair".into()));
        }
        if let Some(&bad) = pair.ids.iter().find(|&&i| i as usize >= c.vocab_size) {
            return Err(Error::Invalid(format!(
                "token id {bad} out of range for vocabulary of {}",
                c.vocab_size
            )));
        }
        if pair.segments.iter().any(|&s| s as usize >= c.n_segments) {
            return Err(Error::Invalid("segment id out of range".into()));
        }
        Ok(())
    }
}
