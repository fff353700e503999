use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use super::ops;
use super::{Float, Model, Slot};
use crate::error::{Error, Result};
use crate::tokenizer::TokenizedPair;

/// `grads[slot] += alpha * a^T b`
fn add_atb<T: Float>(grads: &mut [T], slot: Slot, a: ArrayView2<T>, b: ArrayView2<T>) {
    let mut dst = slot.mat_mut(grads);
    general_mat_mul(T::one(), &a.t(), &b, T::one(), &mut dst);
}

fn add_vec<T: Float>(grads: &mut [T], slot: Slot, v: &Array1<T>) {
    let mut dst = slot.vec_mut(grads);
    dst += v;
}

fn add_rowsum<T: Float>(grads: &mut [T], slot: Slot, m: &Array2<T>) {
    add_vec(grads, slot, &m.sum_axis(Axis(0)));
}

impl<T: Float> Model<T> {
    /// Cross-entropy loss of one example in eval mode; the gradient is added
    /// into `grads`, which must have one entry per parameter.
    pub fn loss_and_grad(&self, pair: &TokenizedPair, label: bool, grads: &mut [T]) -> Result<f64> {
        self.check_input(pair)?;
        if grads.len() != self.params.len() {
            return Err(Error::Invalid(format!(
                "gradient buffer has {} entries, model has {}",
                grads.len(),
                self.params.len()
            )));
        }
        Ok(self.accumulate_grad(pair, label, T::one(), None, grads).f64())
    }

    /// Cross-entropy loss without gradient.
    pub fn loss(&self, pair: &TokenizedPair, label: bool) -> Result<f64> {
        self.check_input(pair)?;
        let t = self.trace(pair, None);
        Ok(cross_entropy(&t.logits, label).f64())
    }

    /// Backpropagates `scale * loss` into `grads`; returns the unscaled loss.
    pub(crate) fn accumulate_grad(
        &self,
        pair: &TokenizedPair,
        label: bool,
        scale: T,
        rng: Option<&mut ChaCha8Rng>,
        grads: &mut [T],
    ) -> T {
        let t = self.trace(pair, rng);
        let loss = cross_entropy(&t.logits, label);
        let c = &self.config;
        let lay = &self.layout;
        let p = &self.params[..];
        let n = pair.ids.len();
        let d = c.hidden;
        let y = if label { 1 } else { 0 };

        // classifier head on the final [CLS] state
        let mut dlogits = Array1::from(vec![t.probs[0], t.probs[1]]);
        dlogits[y] -= T::one();
        dlogits *= scale;
        let cls = t.hidden[c.n_layers].slice(s![0..1, ..]);
        let dl2 = dlogits.view().insert_axis(Axis(0));
        add_atb(grads, lay.cls_w, cls, dl2);
        add_vec(grads, lay.cls_b, &dlogits);
        let mut dh = Array2::<T>::zeros((n, d));
        dh.row_mut(0).assign(&lay.cls_w.mat(p).dot(&dlogits));

        let heads = c.n_heads;
        let dh_size = c.head_dim();
        let att_scale = T::c(1.0 / (dh_size as f64).sqrt());
        for (l, ls) in lay.layers.iter().enumerate().rev() {
            let lt = &t.layers[l];
            let x = &t.hidden[l];

            // feed-forward block
            let (df, dg2, db2) = ops::layer_norm_backward(&dh, &lt.ln2, ls.ln2_g.vec(p));
            add_vec(grads, ls.ln2_g, &dg2);
            add_vec(grads, ls.ln2_b, &db2);
            let mut dffo = df.clone();
            if let Some(m) = &lt.ff_drop {
                dffo *= m;
            }
            add_atb(grads, ls.w2, lt.g.view(), dffo.view());
            add_rowsum(grads, ls.b2, &dffo);
            let mut du = dffo.dot(&ls.w2.mat(p).t());
            ndarray::Zip::from(&mut du)
                .and(&lt.u)
                .for_each(|g, &u| *g *= ops::gelu_grad(u));
            add_atb(grads, ls.w1, lt.y1.view(), du.view());
            add_rowsum(grads, ls.b1, &du);
            let mut dy1 = df;
            general_mat_mul(T::one(), &du, &ls.w1.mat(p).t(), T::one(), &mut dy1);

            // attention block
            let (da, dg1, db1) = ops::layer_norm_backward(&dy1, &lt.ln1, ls.ln1_g.vec(p));
            add_vec(grads, ls.ln1_g, &dg1);
            add_vec(grads, ls.ln1_b, &db1);
            let mut dattn = da.clone();
            if let Some(m) = &lt.attn_drop {
                dattn *= m;
            }
            add_atb(grads, ls.wo, lt.ctx.view(), dattn.view());
            add_rowsum(grads, ls.bo, &dattn);
            let dctx = dattn.dot(&ls.wo.mat(p).t());

            let mut dq = Array2::<T>::zeros((n, d));
            let mut dk = Array2::<T>::zeros((n, d));
            let mut dv = Array2::<T>::zeros((n, d));
            for h in 0..heads {
                let cols = s![.., h * dh_size..(h + 1) * dh_size];
                let probs = &lt.probs[h];
                let dctx_h = dctx.slice(cols);
                let dp = dctx_h.dot(&lt.v.slice(cols).t());
                dv.slice_mut(cols).assign(&probs.t().dot(&dctx_h));
                // softmax backward, row by row
                let mut ds = &dp * probs;
                let row_dot = ds.sum_axis(Axis(1));
                for ((mut r, pr), &rd) in ds.rows_mut().into_iter().zip(probs.rows()).zip(row_dot.iter()) {
                    r.zip_mut_with(&pr, |v, &pv| *v -= pv * rd);
                }
                ds *= att_scale;
                dq.slice_mut(cols).assign(&ds.dot(&lt.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&lt.q.slice(cols)));
            }
            let mut dx = da;
            for (w, b, g) in [(ls.wq, ls.bq, &dq), (ls.wk, ls.bk, &dk), (ls.wv, ls.bv, &dv)] {
                add_atb(grads, w, x.view(), g.view());
                add_rowsum(grads, b, g);
                general_mat_mul(T::one(), g, &w.mat(p).t(), T::one(), &mut dx);
            }
            dh = dx;
        }

        // embeddings
        if let Some(m) = &t.emb_drop {
            dh *= m;
        }
        let (demb, dge, dbe) = ops::layer_norm_backward(&dh, &t.emb_ln, lay.emb_ln_g.vec(p));
        add_vec(grads, lay.emb_ln_g, &dge);
        add_vec(grads, lay.emb_ln_b, &dbe);
        for (i, row) in demb.rows().into_iter().enumerate() {
            let mut tok = lay.token.mat_mut(grads);
            let mut r = tok.row_mut(pair.ids[i] as usize);
            r += &row;
            let mut seg = lay.segment.mat_mut(grads);
            let mut r = seg.row_mut(pair.segments[i] as usize);
            r += &row;
            if let Some(pos) = lay.position {
                let mut pm = pos.mat_mut(grads);
                let mut r = pm.row_mut(i);
                r += &row;
            }
        }
        loss
    }
}

/// `-log softmax(logits)[label]`
pub(crate) fn cross_entropy<T: Float>(logits: &[T; 2], label: bool) -> T {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    lse - logits[usize::from(label)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, PositionMode, Precision};

    fn model(mode: PositionMode) -> Model<f64> {
        let cfg = ModelConfig {
            vocab_size: 40,
            max_len: 16,
            hidden: 8,
            ff_dim: 12,
            position_mode: mode,
            precision: Precision::F64,
            ..ModelConfig::default()
        };
        let mut m = Model::init(cfg, 11).unwrap();
        for v in m.params_mut() {
            *v *= 5.0;
        }
        m
    }

    /// Central differences on every parameter of a tiny model.
    #[test]
    fn gradient_matches_finite_differences() {
        for mode in [PositionMode::Learned, PositionMode::None] {
            let mut m = model(mode);
            let pair = TokenizedPair::from_parts(&[5, 6, 7], &[8, 9, 5, 10]).padded(11);
            let mut g = vec![0.0; m.num_params()];
            m.loss_and_grad(&pair, true, &mut g).unwrap();
            let h = 1e-5;
            for i in 0..m.num_params() {
                let orig = m.params()[i];
                m.params_mut()[i] = orig + h;
                let up = m.loss(&pair, true).unwrap();
                m.params_mut()[i] = orig - h;
                let down = m.loss(&pair, true).unwrap();
                m.params_mut()[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let tol = 1e-5 * (fd.abs() + g[i].abs()) + 1e-9;
                assert!((fd - g[i]).abs() <= tol, "{mode:?} param {i}: fd {fd:e}, analytic {:e}", g[i]);
            }
        }
    }

    #[test]
    fn dropout_gradient_uses_the_same_mask() {
        let mut m = model(PositionMode::Learned);
        let pair = TokenizedPair::from_parts(&[5, 6], &[8, 9, 10]);
        let mut g = vec![0.0; m.num_params()];
        let rng = || {
            use rand::SeedableRng;
            ChaCha8Rng::seed_from_u64(3)
        };
        m.accumulate_grad(&pair, false, 1.0, Some(&mut rng()), &mut g);
        let h = 1e-5;
        for i in (0..m.num_params()).step_by(7) {
            let orig = m.params()[i];
            m.params_mut()[i] = orig + h;
            let up = m.accumulate_grad(&pair, false, 0.0, Some(&mut rng()), &mut vec![0.0; g.len()]);
            m.params_mut()[i] = orig - h;
            let down = m.accumulate_grad(&pair, false, 0.0, Some(&mut rng()), &mut vec![0.0; g.len()]);
            m.params_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * (fd.abs() + g[i].abs()).max(1e-3), "param {i}");
        }
    }

    #[test]
    fn cross_entropy_values() {
        assert!((cross_entropy(&[0.0f64, 0.0], true) - 2f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&[-800.0f64, 800.0], true).abs() < 1e-12);
        assert!((cross_entropy(&[-800.0f64, 800.0], false) - 1600.0).abs() < 1e-9);
    }
}
