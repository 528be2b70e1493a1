//! Stage loop and the three-stage curriculum.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::objective::{grpo_loss, GroupBatch, LossParams};
use super::reward::{RewardModel, RewardSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate_samples, predict_sets, MetricRow, NegativeCounts};
use crate::optim::Adam;
use crate::policy::{serialize_context, Policy, SidTrie, Trainable};
use crate::seed;
use crate::sidcodec::{Codec, SidTable};
use crate::targets::{augment, flag_augmentation_candidates, Sample, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    /// KL weight for stages 1, 2 and 3.
    pub beta: [f64; 3],
    pub lr: f64,
    pub steps_per_stage: usize,
    /// Contexts per optimizer step.
    pub groups_per_step: usize,
    /// Steps between sampling-snapshot refreshes.
    pub refresh_period: usize,
    pub temperature: f64,
    pub reward: RewardSpec,
    /// Cosine above which a prediction near a future positive flags its
    /// sample for duplication in the next stage.
    pub augment_threshold: f64,
    /// Beam width of the predictions used for flagging.
    pub augment_k: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            clip_eps: 0.2,
            beta: [0.02, 0.02, 0.1],
            lr: 1e-3,
            steps_per_stage: 40,
            groups_per_step: 8,
            refresh_period: 1,
            temperature: 1.0,
            reward: RewardSpec::default(),
            augment_threshold: 0.8,
            augment_k: 5,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if self.beta.iter().any(|b| !(*b >= 0.0)) {
            return bad("beta must be >= 0");
        }
        if !(self.lr > 0.0) || self.groups_per_step == 0 || self.refresh_period == 0 || self.augment_k == 0 {
            return bad("lr, groups_per_step, refresh_period and augment_k must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        self.reward.validate()
    }

    pub fn loss_params(&self, stage: Stage) -> LossParams {
        LossParams { clip_eps: self.clip_eps, beta: self.beta[stage as usize] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: Stage,
    pub step: usize,
    pub mean_reward: f64,
    pub loss: f64,
    pub kl: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: Stage,
    /// Fingerprint of the reference snapshot taken at stage entry.
    pub ref_hash: String,
    pub train_samples: usize,
    pub steps: Vec<StepLog>,
}

pub fn policy_hash(policy: &Policy) -> String {
    seed::hash_f64s(policy.flat())
}

/// Shared read-only inputs of a stage run.
pub struct StageEnv<'a> {
    pub sids: &'a SidTable,
    pub rewards: &'a RewardModel<'a>,
}

/// Runs `cfg.steps_per_stage` optimizer steps on `samples` with `stage`'s
/// context. The reference is the policy as passed in.
pub fn run_stage(
    policy: &mut Policy,
    stage: Stage,
    samples: &[Sample],
    env: &StageEnv<'_>,
    cfg: &GrpoConfig,
    seed_value: u64,
) -> Result<StageLog> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument(format!("stage {stage} has no training samples")));
    }
    let contexts = samples
        .iter()
        .map(|s| serialize_context(s.context(stage), env.sids, &policy.vocab, policy.cfg.max_context_events))
        .collect::<Result<Vec<_>>>()?;
    let reference = policy.clone();
    let mut log =
        StageLog { stage, ref_hash: policy_hash(&reference), train_samples: samples.len(), steps: Vec::new() };
    let params = cfg.loss_params(stage);
    let mut rng = seed::rng(seed_value);
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = Vec::new();
    let mut old = policy.clone();
    for step in 0..cfg.steps_per_stage {
        if step % cfg.refresh_period == 0 {
            old = policy.clone();
        }
        let mut picks = Vec::with_capacity(cfg.groups_per_step);
        while picks.len() < cfg.groups_per_step {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
            }
            picks.push((order.pop().expect("refilled"), rng.random::<u64>()));
        }
        let batches = picks
            .par_iter()
            .map(|&(n, group_seed)| {
                GroupBatch::collect(
                    &old,
                    &reference,
                    contexts[n].clone(),
                    cfg.group_size,
                    cfg.temperature,
                    &mut seed::rng(group_seed),
                    |sid| env.rewards.reward(sid, &samples[n].targets, &cfg.reward),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let out = grpo_loss(policy, &batches, params, true)?;
        if !out.loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss at stage {stage} step {step}")));
        }
        let grads = out.grads.expect("requested");
        opt.step(policy.slices_mut(Trainable::All), grads.slices(Trainable::All));
        log.steps.push(StepLog {
            stage,
            step,
            mean_reward: batches.iter().map(|b| b.mean_reward()).sum::<f64>() / batches.len() as f64,
            loss: out.loss,
            kl: out.kl,
            clip_fraction: out.clip_fraction,
        });
    }
    Ok(log)
}

/// Inputs of a curriculum run.
pub struct CurriculumEnv<'a> {
    pub train: &'a [Sample],
    pub heldout: &'a [Sample],
    pub codec: &'a Codec,
    pub sids: &'a SidTable,
    pub rewards: &'a RewardModel<'a>,
    pub counts: &'a NegativeCounts,
    /// Restricts held-out beams to assigned SIDs when present.
    pub trie: Option<&'a SidTrie>,
    /// Beam width and cutoff of the held-out metrics.
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub log: StageLog,
    /// Samples duplicated into this stage's stream by the previous stage.
    pub augmented: usize,
    /// Held-out metrics with this stage's context after training.
    pub heldout: MetricRow,
}

/// Training stream for a curriculum stage: `env.train`, plus one extra copy
/// of each sample whose top predictions under `prev` (the previous stage's
/// policy and context) land near a future positive. Returns the stream and
/// the number of duplicated samples.
pub fn augmented_stream(
    prev: Option<(&Policy, Stage)>,
    env: &CurriculumEnv<'_>,
    cfg: &GrpoConfig,
) -> Result<(Vec<Sample>, usize)> {
    let Some((policy, stage)) = prev else {
        return Ok((env.train.to_vec(), 0));
    };
    let preds = predict_sets(policy, env.train, stage, env.sids, cfg.augment_k, env.trie)?;
    let flagged = flag_augmentation_candidates(env.train, &preds, env.codec, env.sids, cfg.augment_threshold)?;
    Ok((augment(env.train, &flagged), flagged.len()))
}

/// Trains one curriculum stage on `stream` and scores the held-out samples
/// with that stage's context.
pub fn run_curriculum_stage(
    policy: &mut Policy,
    stage: Stage,
    stream: &[Sample],
    augmented: usize,
    env: &CurriculumEnv<'_>,
    cfg: &GrpoConfig,
    seed_value: u64,
) -> Result<StageResult> {
    let stage_env = StageEnv { sids: env.sids, rewards: env.rewards };
    let log = run_stage(policy, stage, stream, &stage_env, cfg, seed::sub_seed(seed_value, &stage.to_string()))?;
    let evals = evaluate_samples(policy, env.heldout, stage, env.sids, env.counts, env.k, env.trie)?;
    Ok(StageResult { log, augmented, heldout: MetricRow::hit_metrics(&evals, env.k) })
}

/// Runs `stages` in order; each one starts from the previous stage's
/// policy, which is also its reference.
pub fn run_curriculum(
    policy: &mut Policy,
    stages: &[Stage],
    env: &CurriculumEnv<'_>,
    cfg: &GrpoConfig,
    seed_value: u64,
) -> Result<Vec<StageResult>> {
    let mut results = Vec::with_capacity(stages.len());
    let mut prev: Option<Stage> = None;
    for &stage in stages {
        let (stream, augmented) = augmented_stream(prev.map(|p| (&*policy, p)), env, cfg)?;
        results.push(run_curriculum_stage(policy, stage, &stream, augmented, env, cfg, seed_value)?);
        prev = Some(stage);
    }
    Ok(results)
}
