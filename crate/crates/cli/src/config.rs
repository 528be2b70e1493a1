//! Run configuration: one TOML file covering every module.

use std::path::{Path, PathBuf};

use negrec_core::corpus::SynthConfig;
use negrec_core::filterpipe::FilterConfig;
use negrec_core::grpo::GrpoConfig;
use negrec_core::policy::{AlignConfig, PolicyConfig, SftConfig};
use negrec_core::sidcodec::CodecTrainConfig;
use negrec_core::swing::SwingParams;
use negrec_core::targets::TargetConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Which days feed which step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Training data (codec aside) uses events before this day.
    pub train_end_day: u32,
    /// First as-of day of a training sample.
    pub first_train_day: u32,
    pub train_day_stride: u32,
    /// Held-out as-of days start at `train_end_day`; this many of them.
    pub heldout_days: u32,
    /// Share of alignment `(user, item)` pairs held out for accuracy.
    pub align_holdout: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train_end_day: 45, first_train_day: 3, train_day_stride: 1, heldout_days: 8, align_holdout: 0.25 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    /// Candidate-accuracy tasks drawn from held-out days.
    pub candidate_tasks: usize,
    /// Restrict beams to assigned SIDs.
    pub constrained: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { k: 20, candidate_tasks: 500, constrained: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; each step derives its own sub-seed from it. The corpus
    /// generator keeps its own `corpus.seed` so the fixture stays fixed.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: SynthConfig,
    pub codec: CodecTrainConfig,
    pub swing: SwingParams,
    pub targets: TargetConfig,
    pub split: SplitConfig,
    pub policy: PolicyConfig,
    pub align: AlignConfig,
    pub warmup: SftConfig,
    pub grpo: GrpoConfig,
    pub eval: EvalConfig,
    pub filter: FilterConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 2024,
            out_dir: PathBuf::from("runs/default"),
            corpus: SynthConfig::default(),
            codec: CodecTrainConfig { codebook_size: 16, ..CodecTrainConfig::default() },
            swing: SwingParams::default(),
            targets: TargetConfig::default(),
            split: SplitConfig::default(),
            policy: PolicyConfig {
                d_model: 32,
                n_layers: 2,
                n_heads: 4,
                d_ff: 64,
                max_positions: 128,
                max_context_events: 16,
            },
            align: AlignConfig::default(),
            warmup: SftConfig { epochs: 3, batch_size: 16, lr: 3e-3 },
            grpo: GrpoConfig { steps_per_stage: 100, lr: 3e-4, ..GrpoConfig::default() },
            eval: EvalConfig::default(),
            filter: FilterConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses `text` as overrides of [`RunConfig::default`]: tables merge
    /// key by key, so a partial `[grpo]` keeps the other run defaults.
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let bad = |e: &dyn std::fmt::Display| CliError::Usage(format!("bad config: {e}"));
        let user: toml::Table = toml::from_str(text).map_err(|e| bad(&e))?;
        let mut merged: toml::Table = toml::from_str(&RunConfig::default().to_toml()).expect("defaults parse");
        merge(&mut merged, user);
        let cfg: RunConfig = toml::Value::Table(merged).try_into().map_err(|e| bad(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        let usage = |e: negrec_core::Error| CliError::Usage(e.to_string());
        self.corpus.validate().map_err(usage)?;
        self.codec.validate().map_err(usage)?;
        self.swing.validate().map_err(usage)?;
        self.policy.validate().map_err(usage)?;
        self.grpo.validate().map_err(usage)?;
        self.filter.validate().map_err(usage)?;
        let s = &self.split;
        if s.train_end_day == 0 || s.train_end_day >= self.corpus.num_days {
            return Err(CliError::Usage("split.train_end_day must lie inside the corpus".into()));
        }
        if s.first_train_day >= s.train_end_day || s.train_day_stride == 0 || s.heldout_days == 0 {
            return Err(CliError::Usage(
                "split needs first_train_day < train_end_day and positive stride/heldout_days".into(),
            ));
        }
        if !(0.0 < s.align_holdout && s.align_holdout < 1.0) {
            return Err(CliError::Usage("split.align_holdout must lie in (0, 1)".into()));
        }
        if self.eval.k == 0 {
            return Err(CliError::Usage("eval.k must be >= 1".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the resolved config with `out_dir` cleared, so a run
    /// directory can move without invalidating its artifacts.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        Sha256::digest(c.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// As-of days of training samples. Their horizons end before the
    /// held-out period starts.
    pub fn train_days(&self) -> Vec<u32> {
        let last = self.split.train_end_day.saturating_sub(self.targets.horizon_days);
        (self.split.first_train_day..=last).step_by(self.split.train_day_stride as usize).collect()
    }

    pub fn heldout_days(&self) -> Vec<u32> {
        let end = (self.split.train_end_day + self.split.heldout_days).min(self.corpus.num_days);
        (self.split.train_end_day..end).collect()
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
