//! Teacher-forced next-token training on target SIDs.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::decode::{log_softmax, pack_branches};
use super::{Policy, Trainable};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::seed;
use crate::sidcodec::SemanticId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SftExample {
    pub context: Vec<u32>,
    pub target: SemanticId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig { epochs: 2, batch_size: 16, lr: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SftLog {
    /// Mean per-example loss (summed over the SID's tokens) of each step.
    pub step_losses: Vec<f64>,
}

/// Negative log-likelihood of `ex.target` and its gradient.
pub(crate) fn example_grad(policy: &Policy, ex: &SftExample, weight: f64) -> Result<(f64, Policy)> {
    let tokens = policy.vocab.sid_tokens(&ex.target)?;
    let d = policy.vocab.levels;
    let (packed, queries) = pack_branches(&ex.context, &[tokens[..d - 1].to_vec()], true);
    let (logits, tape) = policy.forward_train(&packed, &queries[0])?;
    let mut loss = 0.0;
    let mut dlogits = Vec::with_capacity(d);
    for (lg, &code) in logits.iter().zip(&ex.target.0) {
        let lp = log_softmax(lg);
        loss -= lp[code as usize];
        let mut g: Vec<f64> = lp.iter().map(|l| weight * l.exp()).collect();
        g[code as usize] -= weight;
        dlogits.push(g);
    }
    let mut grads = policy.zeros_like();
    policy.backward(&packed, &tape, &dlogits, &mut grads);
    Ok((loss, grads))
}

/// Mean loss and summed gradient of a batch, computed in parallel and
/// reduced in input order.
pub(crate) fn batch_grad(policy: &Policy, batch: &[&SftExample]) -> Result<(f64, Policy)> {
    let w = 1.0 / batch.len() as f64;
    let parts: Vec<(f64, Policy)> = batch.par_iter().map(|ex| example_grad(policy, ex, w)).collect::<Result<_>>()?;
    let mut total = policy.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l * w;
        total.add_scaled(g, 1.0);
    }
    Ok((loss, total))
}

/// Minibatch Adam on the summed token cross-entropy, updating the
/// parameters selected by `mode`.
pub(crate) fn train_teacher_forced(
    policy: &mut Policy,
    examples: &[SftExample],
    cfg: &SftConfig,
    mode: Trainable,
    seed_value: u64,
) -> Result<SftLog> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidConfig("batch_size and lr must be positive".into()));
    }
    let mut rng = seed::rng(seed_value);
    let mut opt = Adam::new(cfg.lr);
    let mut log = SftLog::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SftExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, grads) = batch_grad(policy, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("non-finite SFT loss at step {}", log.step_losses.len())));
            }
            log.step_losses.push(loss);
            opt.step(policy.slices_mut(mode), grads.slices(mode));
        }
    }
    Ok(log)
}

/// Supervised warm-up: next-token cross-entropy on each example's target
/// SID, all parameters trainable.
pub fn warmup_sft(policy: &mut Policy, examples: &[SftExample], cfg: &SftConfig, seed_value: u64) -> Result<SftLog> {
    train_teacher_forced(policy, examples, cfg, Trainable::All, seed_value)
}
