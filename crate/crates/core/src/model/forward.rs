use ndarray::{s, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ops::{self, LnTrace};
use super::{Float, Model};
use crate::error::Result;
use crate::tokenizer::TokenizedPair;

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Keep every layer's hidden states.
    pub capture: bool,
    /// Enables dropout.
    pub train_mode: bool,
    /// Dropout randomness; example `i` of a batch uses stream `i`.
    pub dropout_seed: u64,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// Softmax probability of the "relevant" logit.
    pub relevance_prob: f64,
    /// `[non-relevant, relevant]`
    pub logits: [f64; 2],
    /// Hidden states at the embedding output and after each layer
    /// (`n_layers + 1` matrices of `len x hidden`, padding rows included).
    /// Only filled when capture was requested.
    pub activations: Option<Vec<Array2<T>>>,
    /// `[CLS]` state at each capture point.
    pub cls_states: Vec<Array1<T>>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerTrace<T> {
    pub q: Array2<T>,
    pub k: Array2<T>,
    pub v: Array2<T>,
    pub probs: Vec<Array2<T>>,
    pub ctx: Array2<T>,
    pub attn_drop: Option<Array2<T>>,
    pub ln1: LnTrace<T>,
    pub y1: Array2<T>,
    pub u: Array2<T>,
    pub g: Array2<T>,
    pub ff_drop: Option<Array2<T>>,
    pub ln2: LnTrace<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct Trace<T> {
    pub emb_ln: LnTrace<T>,
    pub emb_drop: Option<Array2<T>>,
    /// Input of layer `l` is `hidden[l]`; `hidden[n_layers]` is the output.
    pub hidden: Vec<Array2<T>>,
    pub layers: Vec<LayerTrace<T>>,
    pub logits: [T; 2],
    pub probs: [T; 2],
}

fn apply_drop<T: Float>(x: &mut Array2<T>, mask: &Option<Array2<T>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

impl<T: Float> Model<T> {
    /// Runs the encoder on each pair of a batch.
    pub fn forward(&self, batch: &[TokenizedPair], opts: ForwardOptions) -> Result<Vec<ForwardOutput<T>>> {
        batch
            .iter()
            .enumerate()
            .map(|(i, pair)| {
                self.check_input(pair)?;
                Ok(self.forward_one(pair, &opts, i as u64))
            })
            .collect()
    }

    pub(crate) fn forward_one(&self, pair: &TokenizedPair, opts: &ForwardOptions, stream: u64) -> ForwardOutput<T> {
        let mut rng = self.dropout_rng(opts, stream);
        let trace = self.trace(pair, rng.as_mut());
        let cls_states = trace.hidden.iter().map(|h| h.row(0).to_owned()).collect();
        ForwardOutput {
            relevance_prob: trace.probs[1].f64(),
            logits: [trace.logits[0].f64(), trace.logits[1].f64()],
            activations: opts.capture.then_some(trace.hidden),
            cls_states,
        }
    }

    pub(crate) fn dropout_rng(&self, opts: &ForwardOptions, stream: u64) -> Option<ChaCha8Rng> {
        (opts.train_mode && self.config.dropout > 0.0).then(|| {
            let mut r = ChaCha8Rng::seed_from_u64(opts.dropout_seed);
            r.set_stream(stream);
            r
        })
    }

    /// Full forward pass keeping everything the backward pass needs.
    /// Inputs must already be validated.
    pub(crate) fn trace(&self, pair: &TokenizedPair, mut rng: Option<&mut ChaCha8Rng>) -> Trace<T> {
        let c = &self.config;
        let lay = &self.layout;
        let p = &self.params[..];
        let (n, d) = (pair.ids.len(), c.hidden);
        let valid = pair.n_total;
        let p_drop = c.dropout;
        let mut mask = |rows: usize, cols: usize| -> Option<Array2<T>> {
            rng.as_mut().map(|r| ops::dropout_mask(rows, cols, p_drop, &mut **r))
        };

        let tok = lay.token.mat(p);
        let seg = lay.segment.mat(p);
        let pos = lay.position.map(|s| s.mat(p));
        let mut emb = Array2::<T>::zeros((n, d));
        for (i, mut row) in emb.rows_mut().into_iter().enumerate() {
            row.assign(&tok.row(pair.ids[i] as usize));
            row += &seg.row(pair.segments[i] as usize);
            if let Some(pos) = &pos {
                row += &pos.row(i);
            }
        }
        let (mut x, emb_ln) = ops::layer_norm(&emb, lay.emb_ln_g.vec(p), lay.emb_ln_b.vec(p));
        let emb_drop = mask(n, d);
        apply_drop(&mut x, &emb_drop);

        let heads = c.n_heads;
        let dh = c.head_dim();
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let mut hidden = Vec::with_capacity(c.n_layers + 1);
        let mut layers = Vec::with_capacity(c.n_layers);
        hidden.push(x);
        for ls in &lay.layers {
            let x = hidden.last().expect("input");
            let q = ops::linear(x, ls.wq.mat(p), ls.bq.vec(p));
            let k = ops::linear(x, ls.wk.mat(p), ls.bk.vec(p));
            let v = ops::linear(x, ls.wv.mat(p), ls.bv.vec(p));
            let mut ctx = Array2::<T>::zeros((n, d));
            let mut probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut scores = q.slice(cols).dot(&k.slice(cols).t());
                scores *= scale;
                ops::masked_softmax(&mut scores, valid);
                ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
                probs.push(scores);
            }
            let mut attn = ops::linear(&ctx, ls.wo.mat(p), ls.bo.vec(p));
            let attn_drop = mask(n, d);
            apply_drop(&mut attn, &attn_drop);
            attn += x;
            let (y1, ln1) = ops::layer_norm(&attn, ls.ln1_g.vec(p), ls.ln1_b.vec(p));

            let u = ops::linear(&y1, ls.w1.mat(p), ls.b1.vec(p));
            let g = u.mapv(ops::gelu);
            let mut f = ops::linear(&g, ls.w2.mat(p), ls.b2.vec(p));
            let ff_drop = mask(n, d);
            apply_drop(&mut f, &ff_drop);
            f += &y1;
            let (out, ln2) = ops::layer_norm(&f, ls.ln2_g.vec(p), ls.ln2_b.vec(p));

            layers.push(LayerTrace {
                q,
                k,
                v,
                probs,
                ctx,
                attn_drop,
                ln1,
                y1,
                u,
                g,
                ff_drop,
                ln2,
            });
            hidden.push(out);
        }

        let cls = hidden.last().expect("output").row(0);
        let logits_v = cls.dot(&lay.cls_w.mat(p)) + &lay.cls_b.vec(p);
        let logits = [logits_v[0], logits_v[1]];
        let m = logits[0].max(logits[1]);
        let e0 = (logits[0] - m).exp();
        let e1 = (logits[1] - m).exp();
        let z = e0 + e1;
        Trace {
            emb_ln,
            emb_drop,
            hidden,
            layers,
            logits,
            probs: [e0 / z, e1 / z],
        }
    }
}
