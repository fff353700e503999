use crate::model::{Float, Layout, ParamKind};

pub(crate) const BETA1: f64 = 0.9;
pub(crate) const BETA2: f64 = 0.999;
pub(crate) const EPS: f64 = 1e-8;

/// Adam with bias correction and decoupled weight decay. Decay applies to
/// weight matrices and embedding tables, not to biases or norm gains.
pub(crate) struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    decay: Vec<bool>,
    t: i32,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(layout: &Layout, weight_decay: f64) -> Self {
        let mut decay = vec![false; layout.total()];
        for e in layout.entries() {
            if matches!(e.kind, ParamKind::Weight | ParamKind::Embedding) {
                decay[e.range()].fill(true);
            }
        }
        AdamW {
            m: vec![0.0; layout.total()],
            v: vec![0.0; layout.total()],
            decay,
            t: 0,
            weight_decay,
        }
    }

    pub fn step<T: Float>(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i].f64();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let mut p = params[i].f64();
            if self.decay[i] {
                p -= lr * self.weight_decay * p;
            }
            p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
            params[i] = T::c(p);
        }
    }
}
