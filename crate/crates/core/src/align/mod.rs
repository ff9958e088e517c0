//! Post-training: supervised fine-tuning, the preference reward model,
//! leave-one-out mirror-descent RL, and committee rejection sampling.

mod committee;
mod reward;
mod rl;
mod sft;

pub use committee::{committee_rejection_sample, PairScorer, RsRecord, Sampler, ScriptedSkillModel, TwoSkillTask};
pub use reward::{level_probability, ranking_loss, RewardLoss, RewardModel, GRADE_HEADS, REWARD_LAMBDA};
pub use rl::{
    collect_rollouts, combined_reward, estimator_variance, k3, logprobs, loo_advantages, mdloo_gradient, mdloo_train, mdloo_update,
    policy_gradient, BanditPolicy, BatchScorer, IterStats, MdlooConfig, Policy, Rollout, RolloutBatch, TransformerPolicy, UpdateStats,
};
pub use sft::{sft_eval_loss, sft_sequences, sft_step, Demo, SFT_DROPOUT};
