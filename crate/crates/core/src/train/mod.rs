//! Pointwise fine-tuning of the cross-encoder on `(query, positive,
//! negative)` triples.
//!
//! Each triple yields a relevant and a non-relevant example sharing the
//! query; a batch holds `batch_size / 2` triples. The chosen perturbation
//! is applied to every example right before its forward pass, keyed by
//! `(epoch, example index)` so shuffles are re-drawn each epoch.

mod adamw;
mod gradcheck;

pub use gradcheck::{grad_check, GradCheck};

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Triple;
use crate::error::{Error, Result};
use crate::model::{Float, Model};
use crate::perturb::{self, PerturbMode};
use crate::tokenizer::{TokenizedPair, Vocab};

use adamw::AdamW;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Optimizer steps between held-out evaluations.
    pub epoch_size: usize,
    pub seed: u64,
    pub train_perturb: PerturbMode,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    /// Reuse one perturbation per example instead of redrawing it every
    /// epoch.
    pub shuffle_fixed: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            lr_peak: 3e-4,
            warmup_steps: 100,
            total_steps: 2000,
            epoch_size: 200,
            seed: 13,
            train_perturb: PerturbMode::Natural,
            weight_decay: 0.01,
            grad_clip_norm: 1.0,
            shuffle_fixed: false,
        }
    }
}

impl TrainConfig {
    /// Hyperparameters for fine-tuning a pretrained base-size encoder.
    /// Too small a learning rate for models trained from scratch.
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 64,
            lr_peak: 3e-6,
            warmup_steps: 1000,
            total_steps: 40_000,
            epoch_size: 1000,
            ..TrainConfig::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(TrainConfig::default()),
            "paper" => Ok(TrainConfig::paper()),
            _ => Err(Error::Config(format!("unknown preset `{name}` (desk | paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return bad("batch_size must be even and at least 2");
        }
        if self.warmup_steps > self.total_steps {
            return bad("warmup_steps exceeds total_steps");
        }
        if self.total_steps == 0 || self.epoch_size == 0 {
            return bad("total_steps and epoch_size must be positive");
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return bad("lr_peak must be positive");
        }
        if self.weight_decay < 0.0 || self.grad_clip_norm <= 0.0 {
            return bad("weight_decay >= 0 and grad_clip_norm > 0 required");
        }
        Ok(())
    }

    /// Linear warmup from 0 to `lr_peak`, then linear decay to 0 at
    /// `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            self.lr_peak * step as f64 / self.warmup_steps as f64
        } else if self.total_steps == self.warmup_steps {
            self.lr_peak
        } else {
            self.lr_peak * (self.total_steps - step) as f64 / (self.total_steps - self.warmup_steps) as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub pair: TokenizedPair,
    pub label: bool,
}

/// Relevant and non-relevant example of one triple, in that order.
pub fn make_examples(triple: &Triple, vocab: &Vocab, max_len: usize) -> Result<[Example; 2]> {
    Ok([
        Example {
            pair: vocab.encode_pair(&triple.query, &triple.positive, max_len)?,
            label: true,
        },
        Example {
            pair: vocab.encode_pair(&triple.query, &triple.negative, max_len)?,
            label: false,
        },
    ])
}

pub fn encode_triples(triples: &[Triple], vocab: &Vocab, max_len: usize) -> Result<Vec<[Example; 2]>> {
    triples.iter().map(|t| make_examples(t, vocab, max_len)).collect()
}

/// Perturbation key of an example: `"<epoch>:<example index>"`, where the
/// example index counts both examples of every triple.
pub fn example_key(epoch: usize, example_index: usize) -> String {
    format!("{epoch}:{example_index}")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalLog {
    pub step: usize,
    pub metric: f64,
    /// Best metric so far, this evaluation included.
    pub best: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
    /// Step whose parameters were returned.
    pub selected_step: usize,
}

impl TrainLog {
    /// `step<TAB>loss<TAB>lr`, one line per step.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\tloss\tlr\n");
        for s in &self.steps {
            writeln!(out, "{}\t{:.6}\t{:.6e}", s.step, s.loss, s.lr).expect("write to string");
        }
        out
    }

    /// `step<TAB>metric<TAB>best`, one line per held-out evaluation.
    pub fn evals_tsv(&self) -> String {
        let mut out = String::from("step\tmetric\tbest\n");
        for e in &self.evals {
            writeln!(out, "{}\t{:.4}\t{:.4}", e.step, e.metric, e.best).expect("write to string");
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        crate::corpus::write_text(&dir.join("train_log.tsv"), &self.to_tsv())?;
        crate::corpus::write_text(&dir.join("eval_log.tsv"), &self.evals_tsv())
    }
}

/// Held-out metric used for checkpoint selection (higher is better).
pub type EvalHook<'a, T> = dyn FnMut(&Model<T>) -> Result<f64> + 'a;

fn step_seed(seed: u64, step: usize) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(step as u64 + 1);
    rand::Rng::random(&mut r)
}

/// Trains `model` and returns the parameters with the best held-out
/// metric (or the final ones when no hook is given).
pub fn train<T: Float>(
    mut model: Model<T>,
    data: &[[Example; 2]],
    cfg: &TrainConfig,
    mut eval_hook: Option<&mut EvalHook<'_, T>>,
) -> Result<(Model<T>, TrainLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("no training triples".into()));
    }
    for ex in data.iter().flatten() {
        model.check_input(&ex.pair)?;
    }
    let per_batch = cfg.batch_size / 2;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cursor = order.len();

    let mut opt = AdamW::new(model.layout(), cfg.weight_decay);
    let mut grads = vec![T::zero(); model.num_params()];
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Vec<T>)> = None;
    let scale = T::c(1.0 / cfg.batch_size as f64);

    for step in 1..=cfg.total_steps {
        let epoch = (step - 1) / cfg.epoch_size;
        grads.fill(T::zero());
        let mut loss = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, step));
        for _ in 0..per_batch {
            if cursor == order.len() {
                perturb::fisher_yates(&mut order, &mut order_rng);
                cursor = 0;
            }
            let t = order[cursor];
            cursor += 1;
            for (side, ex) in data[t].iter().enumerate() {
                let key = example_key(if cfg.shuffle_fixed { 0 } else { epoch }, 2 * t + side);
                let pair = perturb::apply(&ex.pair, cfg.train_perturb, &key);
                let drop = (model.config().dropout > 0.0).then_some(&mut rng);
                loss += model.accumulate_grad(&pair, ex.label, scale, drop, &mut grads).f64();
            }
        }
        loss /= cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let norm = grads.iter().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged { step, loss: norm });
        }
        if norm > cfg.grad_clip_norm {
            let s = T::c(cfg.grad_clip_norm / norm);
            grads.iter_mut().for_each(|g| *g *= s);
        }
        let lr = cfg.lr_at(step);
        opt.step(model.params_mut(), &grads, lr);
        log.steps.push(StepLog { step, loss, lr });

        let at_epoch_end = step % cfg.epoch_size == 0 || step == cfg.total_steps;
        if let (true, Some(hook)) = (at_epoch_end, eval_hook.as_mut()) {
            let metric = hook(&model)?;
            let improved = best.as_ref().is_none_or(|(b, _)| metric > *b);
            if improved {
                best = Some((metric, model.params().to_vec()));
                log.selected_step = step;
            }
            let best_metric = best.as_ref().map_or(metric, |b| b.0);
            log::info!("step {step}: loss {loss:.4}, held-out {metric:.4} (best {best_metric:.4})");
            log.evals.push(EvalLog {
                step,
                metric,
                best: best_metric,
            });
        }
    }
    match best {
        Some((_, params)) => model.params_mut().copy_from_slice(&params),
        None => log.selected_step = cfg.total_steps,
    }
    Ok((model, log))
}

/// Fraction of examples whose relevance probability falls on the side of
/// 0.5 given by their label.
pub fn accuracy<T: Float>(model: &Model<T>, examples: &[Example], mode: PerturbMode) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Invalid("no examples".into()));
    }
    let mut correct = 0usize;
    for (i, ex) in examples.iter().enumerate() {
        let pair = perturb::apply(&ex.pair, mode, &example_key(0, i));
        if (model.score(&pair)? > 0.5) == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}
