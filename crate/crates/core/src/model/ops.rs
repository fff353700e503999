use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

use super::Float;

pub(crate) const LN_EPS: f64 = 1e-12;

/// Normalised input and inverse standard deviation per row.
#[derive(Debug, Clone)]
pub(crate) struct LnTrace<T> {
    pub xhat: Array2<T>,
    pub rstd: Array1<T>,
}

pub(crate) fn layer_norm<T: Float>(
    x: &Array2<T>,
    gain: ArrayView1<T>,
    bias: ArrayView1<T>,
) -> (Array2<T>, LnTrace<T>) {
    let d = T::c(x.ncols() as f64);
    let eps = T::c(LN_EPS);
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / d;
        *r = T::one() / (var + eps).sqrt();
        let s = *r;
        row.mapv_inplace(|v| v * s);
    }
    let mut y = &xhat * &gain;
    y += &bias;
    (y, LnTrace { xhat, rstd })
}

/// Returns `(dx, dgain, dbias)`.
pub(crate) fn layer_norm_backward<T: Float>(
    dy: &Array2<T>,
    trace: &LnTrace<T>,
    gain: ArrayView1<T>,
) -> (Array2<T>, Array1<T>, Array1<T>) {
    let dgain = (dy * &trace.xhat).sum_axis(Axis(0));
    let dbias = dy.sum_axis(Axis(0));
    let d = T::c(dy.ncols() as f64);
    let mut dx = dy * &gain;
    for ((mut row, xh), &r) in dx
        .rows_mut()
        .into_iter()
        .zip(trace.xhat.rows())
        .zip(trace.rstd.iter())
    {
        let mean_d = row.sum() / d;
        let mean_dx = row.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / d;
        Zip::from(&mut row)
            .and(&xh)
            .for_each(|g, &h| *g = (*g - mean_d - h * mean_dx) * r);
    }
    (dx, dgain, dbias)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub(crate) fn gelu<T: Float>(x: T) -> T {
    let half = T::c(0.5);
    let inner = T::c(GELU_C) * (x + T::c(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub(crate) fn gelu_grad<T: Float>(x: T) -> T {
    let half = T::c(0.5);
    let inner = T::c(GELU_C) * (x + T::c(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::c(GELU_C) * (T::one() + T::c(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// Row-wise softmax over the first `valid` columns; the rest are exactly 0.
pub(crate) fn masked_softmax<T: Float>(scores: &mut Array2<T>, valid: usize) {
    for mut row in scores.rows_mut() {
        let max = row
            .iter()
            .take(valid)
            .copied()
            .fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if j < valid {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = T::zero();
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

/// Inverted-dropout mask: 0 with probability `p`, else `1 / (1 - p)`.
pub(crate) fn dropout_mask<T: Float>(rows: usize, cols: usize, p: f64, rng: &mut impl Rng) -> Array2<T> {
    let keep = T::c(1.0 / (1.0 - p));
    Array2::from_shape_simple_fn((rows, cols), || {
        if rng.random::<f64>() < p {
            T::zero()
        } else {
            keep
        }
    })
}

/// `x W + b`
pub(crate) fn linear<T: Float>(x: &Array2<T>, w: ArrayView2<T>, b: ArrayView1<T>) -> Array2<T> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_derivative_matches_differences() {
        for &x in &[-3.0f64, -1.0, -0.1, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x = {x}");
        }
        assert_eq!(gelu(0.0f64), 0.0);
    }

    #[test]
    fn softmax_mask() {
        let mut s = array![[1.0f64, 2.0, 50.0], [0.0, 0.0, 7.0]];
        masked_softmax(&mut s, 2);
        assert_eq!(s[[0, 2]], 0.0);
        assert!((s.row(1).sum() - 1.0).abs() < 1e-15);
        assert!((s[[1, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let x = array![[1.0f64, 2.0, 3.0, 4.0], [-2.0, 0.0, 0.0, 2.0]];
        let g = Array1::ones(4);
        let b = Array1::zeros(4);
        let (y, _) = layer_norm(&x, g.view(), b.view());
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            assert!((row.mapv(|v| v * v).sum() / 4.0 - 1.0).abs() < 1e-9);
        }
    }
}
