//! Group-relative policy optimization over sampled semantic IDs, with
//! similarity rewards and a widening-context curriculum.

mod curriculum;
mod objective;
mod reward;

pub use curriculum::{
    augmented_stream, policy_hash, run_curriculum, run_curriculum_stage, run_stage, CurriculumEnv, GrpoConfig,
    StageEnv, StageLog, StageResult, StepLog,
};
pub use objective::{compute_advantages, grpo_loss, kl_estimate, GroupBatch, LossOutput, LossParams, DEGENERATE_STD};
pub use reward::{hierarchical_hit, RewardModel, RewardScheme, RewardSpec};

#[cfg(test)]
mod tests;
