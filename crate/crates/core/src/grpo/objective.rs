//! Group-relative advantages, the per-token KL estimate and the clipped
//! surrogate loss with its gradient.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::policy::{log_softmax, pack_branches, sample_group, token_logprobs, Policy};
use crate::sidcodec::SemanticId;

/// Groups whose reward spread is below this get zero advantages.
pub const DEGENERATE_STD: f64 = 1e-8;

/// `(r - mean) / std` with the population standard deviation.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument("a group needs at least two rewards".into()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    if std < DEGENERATE_STD {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `rho - ln rho - 1` with `rho = pi_ref / pi_theta`, from log-probabilities.
pub fn kl_estimate(lp_theta: f64, lp_ref: f64) -> f64 {
    let log_rho = lp_ref - lp_theta;
    log_rho.exp() - log_rho - 1.0
}

/// One context with its sampled outputs and everything fixed at sampling
/// time.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch {
    pub context: Vec<u32>,
    pub sids: Vec<SemanticId>,
    /// Per-token log-probabilities under the sampling snapshot.
    pub old_logprobs: Vec<Vec<f64>>,
    /// Per-token log-probabilities under the reference snapshot.
    pub ref_logprobs: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl GroupBatch {
    /// Samples `g` outputs from `old`, scores them with `reward` and records
    /// reference log-probabilities.
    pub fn collect<R, F>(
        old: &Policy,
        reference: &Policy,
        context: Vec<u32>,
        g: usize,
        temperature: f64,
        rng: &mut R,
        reward: F,
    ) -> Result<Self>
    where
        R: Rng,
        F: Fn(&SemanticId) -> Result<f64>,
    {
        let group = sample_group(old, &context, g, temperature, rng)?;
        let rewards = group.sids.iter().map(&reward).collect::<Result<Vec<_>>>()?;
        let advantages = compute_advantages(&rewards)?;
        let ref_logprobs = token_logprobs(reference, &context, &group.sids)?;
        Ok(GroupBatch {
            context,
            sids: group.sids,
            old_logprobs: group.token_logprobs,
            ref_logprobs,
            rewards,
            advantages,
        })
    }

    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    pub clip_eps: f64,
    pub beta: f64,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// Mean per-token KL estimate.
    pub kl: f64,
    /// Share of tokens where the clipped branch was strictly smaller.
    pub clip_fraction: f64,
    /// Gradient with respect to every parameter; `None` unless requested.
    pub grads: Option<Policy>,
}

/// Per-token objective term and its derivative with respect to the token's
/// log-probability under the trained policy.
fn token_term(lp: f64, lp_old: f64, lp_ref: f64, adv: f64, p: LossParams) -> (f64, f64, bool) {
    let ratio = (lp - lp_old).exp();
    let clipped = ratio.clamp(1.0 - p.clip_eps, 1.0 + p.clip_eps);
    let (surrogate, d_surrogate, was_clipped) =
        if ratio * adv <= clipped * adv { (ratio * adv, ratio * adv, false) } else { (clipped * adv, 0.0, true) };
    let rho_ref = (lp_ref - lp).exp();
    let kl = kl_estimate(lp, lp_ref);
    (surrogate - p.beta * kl, d_surrogate - p.beta * (1.0 - rho_ref), was_clipped)
}

struct GroupOut {
    loss: f64,
    kl: f64,
    clipped: usize,
    grads: Option<Policy>,
}

fn group_loss(policy: &Policy, batch: &GroupBatch, weight: f64, p: LossParams, with_grad: bool) -> Result<GroupOut> {
    let d = policy.vocab.levels;
    let g = batch.sids.len();
    if batch.old_logprobs.len() != g || batch.ref_logprobs.len() != g || batch.advantages.len() != g {
        return Err(Error::DimensionMismatch { expected: g, got: batch.advantages.len() });
    }
    let tokens = batch.sids.iter().map(|s| policy.vocab.sid_tokens(s)).collect::<Result<Vec<_>>>()?;
    let heads: Vec<Vec<u32>> = tokens.iter().map(|t| t[..d - 1].to_vec()).collect();
    let (packed, queries) = pack_branches(&batch.context, &heads, true);
    let flat: Vec<_> = queries.into_iter().flatten().collect();
    let (logits, tape) = policy.forward_train(&packed, &flat)?;
    let per_token = weight / (g * d) as f64;
    let mut out = GroupOut { loss: 0.0, kl: 0.0, clipped: 0, grads: None };
    let mut dlogits = Vec::with_capacity(g * d);
    for (b, sid) in batch.sids.iter().enumerate() {
        for (l, &code) in sid.0.iter().enumerate() {
            let lps = log_softmax(&logits[b * d + l]);
            let lp = lps[code as usize];
            let (term, dterm, clipped) =
                token_term(lp, batch.old_logprobs[b][l], batch.ref_logprobs[b][l], batch.advantages[b], p);
            out.loss -= per_token * term;
            out.kl += kl_estimate(lp, batch.ref_logprobs[b][l]);
            out.clipped += clipped as usize;
            let coef = -per_token * dterm;
            let mut row: Vec<f64> = lps.iter().map(|x| -coef * x.exp()).collect();
            row[code as usize] += coef;
            dlogits.push(row);
        }
    }
    if with_grad {
        let mut grads = policy.zeros_like();
        policy.backward(&packed, &tape, &dlogits, &mut grads);
        out.grads = Some(grads);
    }
    Ok(out)
}

/// Negative of the objective averaged per sequence, then per group, then
/// over `batches`. Gradients flow only through `policy`; the sampling and
/// reference log-probabilities are constants stored in each batch.
pub fn grpo_loss(policy: &Policy, batches: &[GroupBatch], p: LossParams, with_grad: bool) -> Result<LossOutput> {
    if batches.is_empty() {
        return Err(Error::InvalidArgument("no groups".into()));
    }
    let w = 1.0 / batches.len() as f64;
    let parts = batches.par_iter().map(|b| group_loss(policy, b, w, p, with_grad)).collect::<Result<Vec<_>>>()?;
    let tokens: usize = batches.iter().map(|b| b.sids.len() * policy.vocab.levels).sum();
    let mut total =
        LossOutput { loss: 0.0, kl: 0.0, clip_fraction: 0.0, grads: with_grad.then(|| policy.zeros_like()) };
    let mut clipped = 0;
    for part in parts {
        total.loss += part.loss;
        total.kl += part.kl;
        clipped += part.clipped;
        if let (Some(acc), Some(g)) = (total.grads.as_mut(), part.grads.as_ref()) {
            acc.add_scaled(g, 1.0);
        }
    }
    total.kl /= tokens as f64;
    total.clip_fraction = clipped as f64 / tokens as f64;
    Ok(total)
}
