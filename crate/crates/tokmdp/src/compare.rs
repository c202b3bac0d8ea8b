//! Classical RLHF versus DPO on the same preference data.
//!
//! The classical pipeline fits a tabular bandit reward model, places it on the
//! EOS transitions and solves the KL-regularized objective exactly. Maximizing
//! that objective is the same as maximum-entropy RL on the per-token reward
//! `r_bandit * [terminal] + beta * log pi_ref`, so the exact solve stands in for
//! the policy-gradient step without its optimizer noise.

use serde::{Deserialize, Serialize};
use tokmdp_core::dpo::{dpo_train, DpoConfig, DpoMode, PreferenceData};
use tokmdp_core::policy::{Policy, TabularPolicy};
use tokmdp_core::preference::{
    fit_bandit_reward, fit_bandit_reward_weighted, BanditFitConfig, PreferenceDistribution,
};
use tokmdp_core::soft_rl::{solve_soft, RewardTable};
use tokmdp_core::StateTree;

use crate::error::Result;
use crate::formats::to_json_string;

pub const COMPARE_SCHEMA: &str = "tokmdp.compare.v1";

#[derive(Debug, Clone, PartialEq)]
pub struct CompareConfig {
    pub l2_strength: f64,
    pub bandit: BanditFitConfig,
    pub dpo: DpoConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub schema: String,
    pub mode: String,
    pub pairs: usize,
    pub beta: f64,
    pub l2_strength: f64,
    pub bandit_iterations: usize,
    pub bandit_grad_norm: f64,
    pub dpo_steps: usize,
    pub dpo_final_loss: f64,
    /// Largest pairwise preference-probability gap between the two policies.
    pub tv_classical_vs_dpo: f64,
    pub tv_classical_vs_truth: f64,
    pub tv_dpo_vs_truth: f64,
}

impl CompareReport {
    pub fn to_json(&self) -> String {
        to_json_string(self)
    }
}

/// Runs both pipelines from `reference` and compares their induced
/// preference distributions with each other and with the ground truth.
pub fn compare_classical_rlhf(
    tree: &StateTree,
    truth: &RewardTable,
    reference: &TabularPolicy,
    data: &PreferenceData,
    config: &CompareConfig,
) -> Result<CompareReport> {
    let beta = config.dpo.beta;
    let (model, pairs, mode) = match data {
        PreferenceData::Sampled(p) => (
            fit_bandit_reward(tree, p, config.l2_strength, &config.bandit)?,
            p.len(),
            DpoMode::Sampled,
        ),
        PreferenceData::Exact(p) => (
            fit_bandit_reward_weighted(tree, p, config.l2_strength, &config.bandit)?,
            p.len(),
            DpoMode::ExactExpected,
        ),
    };
    let terminal = model.terminal_reward_table(tree)?;
    let classical = TabularPolicy::from_solution(tree, &solve_soft(tree, &terminal, reference, beta)?);

    let mut dpo_policy = reference.clone();
    let dpo_cfg = DpoConfig { mode, ..config.dpo };
    let diag = dpo_train(&mut dpo_policy, reference, tree.mdp(), Some(tree), data, &dpo_cfg, |_, _| {})?;

    let truth_dist = PreferenceDistribution::from_reward(tree, truth)?;
    let a = PreferenceDistribution::from_policy(tree, &classical, reference, beta)?;
    let b = PreferenceDistribution::from_policy(tree, &dpo_policy, reference, beta)?;
    debug_assert_eq!(dpo_policy.num_params(), classical.num_params());
    Ok(CompareReport {
        schema: COMPARE_SCHEMA.into(),
        mode: match mode {
            DpoMode::Sampled => "sampled".into(),
            DpoMode::ExactExpected => "exact-expected".into(),
        },
        pairs,
        beta,
        l2_strength: config.l2_strength,
        bandit_iterations: model.iterations,
        bandit_grad_norm: model.grad_norm,
        dpo_steps: diag.records.len(),
        dpo_final_loss: diag.records.last().map_or(f64::NAN, |r| r.loss),
        tv_classical_vs_dpo: a.tv_distance(&b)?,
        tv_classical_vs_truth: a.tv_distance(&truth_dist)?,
        tv_dpo_vs_truth: b.tv_distance(&truth_dist)?,
    })
}
