use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tokenizer::TokenizedPair;

/// Lower bound on the relative-error denominator. Central differences of
/// an O(1) loss with `eps = 1e-5` carry about `1e-11` of round-off, so
/// gradients much smaller than this floor cannot be compared in relative
/// terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter index where the maximum occurred.
    pub worst_index: usize,
    pub n_coords: usize,
}

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares backpropagated gradients with central differences of step
/// `eps` on `n_coords` coordinates sampled without replacement. Embedding
/// rows of tokens absent from the input are structurally zero and are not
/// sampled. Dropout is off.
pub fn grad_check(
    model: &Model<f64>,
    pair: &TokenizedPair,
    label: bool,
    eps: f64,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheck> {
    if !(eps > 0.0) {
        return Err(Error::Config("eps must be positive".into()));
    }
    let mut grads = vec![0.0; model.num_params()];
    model.loss_and_grad(pair, label, &mut grads)?;

    let tok = model.layout().token;
    let mut present = vec![false; tok.rows];
    for &id in &pair.ids {
        present[id as usize] = true;
    }
    let candidates: Vec<usize> = (0..model.num_params())
        .filter(|&i| !tok.range().contains(&i) || present[(i - tok.offset) / tok.cols])
        .collect();
    let n = n_coords.min(candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, candidates.len(), n);

    let mut probe = model.clone();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        n_coords: n,
    };
    for k in picks.iter() {
        let i = candidates[k];
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + eps;
        let up = probe.loss(pair, label)?;
        probe.params_mut()[i] = orig - eps;
        let down = probe.loss(pair, label)?;
        probe.params_mut()[i] = orig;
        let err = relative_error(grads[i], (up - down) / (2.0 * eps));
        if err > out.max_rel_error {
            out.max_rel_error = err;
            out.worst_index = i;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, PositionMode, Precision};
    use crate::tokenizer::UNK_ID;

    fn model(mode: PositionMode, seed: u64) -> Model<f64> {
        let cfg = ModelConfig {
            position_mode: mode,
            precision: Precision::F64,
            ..ModelConfig::default()
        };
        Model::init(cfg, seed).unwrap()
    }

    fn pair() -> TokenizedPair {
        TokenizedPair::from_parts(&[17, 400, 23], &[99, 17, 512, 8, 73, 400, 61])
    }

    #[test]
    fn fresh_model_passes() {
        for mode in [PositionMode::Learned, PositionMode::None] {
            let m = model(mode, 21);
            let r = grad_check(&m, &pair(), true, 1e-5, 300, 1).unwrap();
            assert_eq!(r.n_coords, 300);
            assert!(r.max_rel_error < 1e-4, "{mode:?}: {r:?}");
        }
    }

    #[test]
    fn degenerate_input_passes() {
        let m = model(PositionMode::Learned, 22);
        let unk = TokenizedPair::from_parts(&[UNK_ID; 3], &[UNK_ID; 6]);
        let r = grad_check(&m, &unk, false, 1e-5, 250, 2).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn error_shrinks_with_smaller_steps() {
        let m = model(PositionMode::Learned, 23);
        let coarse = grad_check(&m, &pair(), true, 1e-3, 200, 3).unwrap();
        let fine = grad_check(&m, &pair(), true, 1e-5, 200, 3).unwrap();
        assert!(fine.max_rel_error < coarse.max_rel_error);
    }
}
