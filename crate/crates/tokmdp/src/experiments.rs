//! Desk-scale experiments: per-token credit assignment on the corruption task
//! and the effect of beam width on ground-truth reward.

use serde::{Deserialize, Serialize};
use tokmdp_core::decode::beam_search;
use tokmdp_core::dpo::{dpo_train, implicit_token_rewards, DpoConfig, DpoMode, PreferenceData};
use tokmdp_core::optim::OptimizerConfig;
use tokmdp_core::policy::{logprob, AnyPolicy, TinySeqConfig, TinySeqPolicy};
use tokmdp_core::preference::traj_return;
use tokmdp_core::soft_rl::solve_soft;
use tokmdp_core::{LabelSource, Trajectory};

use crate::checkpoint::content_hash;
use crate::error::Result;
use crate::formats::{to_json_string, PairRecord};
use crate::gen_task::{gen_task, GenParams, GeneratedTask, TaskKind};
use crate::heatmap::{render_rows, HeatmapFormat, HeatmapRow, Legend};
use crate::instances::{random_instance, InstanceShape};

pub const CORRUPTION_SCHEMA: &str = "tokmdp.corruption.v1";
pub const BEAM_TREND_SCHEMA: &str = "tokmdp.beam-trend.v1";

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionConfig {
    pub task: GenParams,
    pub seed: u64,
    pub model: TinySeqConfig,
    pub init_std: f64,
    pub dpo: DpoConfig,
    /// Localization rate the report compares against.
    pub threshold: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            task: GenParams {
                vocab_size: 6,
                max_response_len: 6,
                num_prompts: 3,
                train: 500,
                heldout: 100,
                min_len: 3,
                ..Default::default()
            },
            seed: 0,
            model: TinySeqConfig::default(),
            init_std: 0.1,
            dpo: DpoConfig {
                beta: 0.5,
                optimizer: OptimizerConfig::adam(1e-2),
                epochs: 30,
                batch_size: Some(50),
                seed: 0,
                mode: DpoMode::Sampled,
                diagnostics_every: 0,
            },
            threshold: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionReport {
    pub schema: String,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    pub beta: f64,
    pub dpo_steps: usize,
    pub final_loss: f64,
    /// Held-out rejected responses whose lowest implicit reward sits on the corrupted token.
    pub localized: usize,
    pub localization_rate: f64,
    pub threshold: f64,
    pub passed: bool,
    pub reference_hash: String,
}

pub struct CorruptionOutcome {
    pub report: CorruptionReport,
    pub task: GeneratedTask,
    pub reference: AnyPolicy,
    pub policy: AnyPolicy,
    /// Implicit rewards of every held-out rejected response.
    pub heldout_rewards: Vec<Vec<f64>>,
}

/// Index of the smallest value; ties go to the earlier position.
pub fn argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.map_or(true, |b| v < values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Generates the corruption task, trains a sequence policy with sampled DPO
/// from a freshly initialized reference, and scores localization on the
/// held-out rejected responses.
pub fn corruption_benchmark(config: &CorruptionConfig) -> Result<CorruptionOutcome> {
    let task = gen_task(TaskKind::Corruption, &config.task, config.seed)?;
    let mdp = task.mdp().clone();
    let reference = TinySeqPolicy::with_init_std(config.model, mdp.vocab_size(), 1.0, config.init_std, config.seed);
    let mut policy = reference.clone();
    let pairs = task.train.iter().map(|r| r.to_pair(LabelSource::Fixed)).collect();
    let diag = dpo_train(
        &mut policy,
        &reference,
        &mdp,
        None,
        &PreferenceData::Sampled(pairs),
        &config.dpo,
        |_, _| {},
    )?;

    let beta = config.dpo.beta;
    let mut localized = 0;
    let mut heldout_rewards = Vec::with_capacity(task.heldout.len());
    for r in &task.heldout {
        let traj = Trajectory::new(r.prompt.clone(), r.rejected.clone());
        let values = implicit_token_rewards(&policy, &reference, &mdp, beta, &traj)?;
        if argmin(&values) == r.corrupted_index {
            localized += 1;
        }
        heldout_rewards.push(values);
    }
    let n = task.heldout.len();
    let rate = if n == 0 { 0.0 } else { localized as f64 / n as f64 };
    let reference = AnyPolicy::TinySeq(reference);
    let report = CorruptionReport {
        schema: CORRUPTION_SCHEMA.into(),
        train_pairs: task.train.len(),
        heldout_pairs: n,
        beta,
        dpo_steps: diag.records.len(),
        final_loss: diag.records.last().map_or(f64::NAN, |r| r.loss),
        localized,
        localization_rate: rate,
        threshold: config.threshold,
        passed: rate >= config.threshold,
        reference_hash: content_hash(&reference),
    };
    Ok(CorruptionOutcome {
        report,
        task,
        reference,
        policy: AnyPolicy::TinySeq(policy),
        heldout_rewards,
    })
}

impl CorruptionOutcome {
    /// Heatmap of the first `count` held-out rejected responses.
    pub fn heatmap(&self, count: usize, format: HeatmapFormat) -> Result<String> {
        let rows: Vec<HeatmapRow> = self
            .task
            .heldout
            .iter()
            .zip(&self.heldout_rewards)
            .take(count)
            .map(|(r, v): (&PairRecord, &Vec<f64>)| HeatmapRow {
                trajectory: Trajectory::new(r.prompt.clone(), r.rejected.clone()),
                values: v.clone(),
                label: r.corrupted_index.map(|i| format!("corrupted at {i}")),
            })
            .collect();
        let legend = Legend {
            beta: self.report.beta,
            reference_hash: self.report.reference_hash.clone(),
        };
        render_rows(&rows, format, &legend, None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamTrendRow {
    pub seed: u64,
    pub beta: f64,
    /// Ground-truth return of the top-1 response for each width, averaged over prompts.
    pub rewards: Vec<f64>,
    /// Same for the KL-regularized objective `sum r + beta * log pi_ref`, which
    /// is what likelihood search over the optimal policy maximizes.
    pub objectives: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamTrendReport {
    pub schema: String,
    pub widths: Vec<usize>,
    pub rows: Vec<BeamTrendRow>,
    pub mean_rewards: Vec<f64>,
    pub mean_objectives: Vec<f64>,
    /// Whether the mean for the second width is at least that of the first.
    pub wider_not_worse: bool,
}

impl BeamTrendReport {
    pub fn to_json(&self) -> String {
        to_json_string(self)
    }
}

/// Decodes the exact optimal policy of `tasks` random instances with each beam
/// width and records the true return of the top-ranked response.
pub fn beam_trend(tasks: u64, widths: &[usize], shape: &InstanceShape) -> Result<BeamTrendReport> {
    let mut rows = Vec::new();
    for seed in 0..tasks {
        let inst = random_instance(seed, shape)?;
        let sol = solve_soft(&inst.tree, &inst.reward, &inst.reference, inst.beta)?;
        let pi = tokmdp_core::policy::TabularPolicy::from_solution(&inst.tree, &sol);
        let n = inst.tree.num_prompts() as f64;
        let (mut rewards, mut objectives) = (Vec::with_capacity(widths.len()), Vec::with_capacity(widths.len()));
        for &w in widths {
            let (mut total, mut objective) = (0.0, 0.0);
            for p in 0..inst.tree.num_prompts() {
                let prompt = inst.tree.prompt_tokens(p);
                let top = beam_search(&pi, inst.mdp(), prompt, w, inst.beta)?[0].trajectory(prompt);
                let r = traj_return(&inst.tree, &inst.reward, &top)?;
                total += r;
                objective += r + inst.beta * logprob(&inst.reference, inst.mdp(), &top)?.0;
            }
            rewards.push(total / n);
            objectives.push(objective / n);
        }
        rows.push(BeamTrendRow {
            seed,
            beta: inst.beta,
            rewards,
            objectives,
        });
    }
    let mean = |f: fn(&BeamTrendRow) -> &Vec<f64>| -> Vec<f64> {
        (0..widths.len())
            .map(|k| rows.iter().map(|r| f(r)[k]).sum::<f64>() / rows.len().max(1) as f64)
            .collect()
    };
    let mean_rewards = mean(|r| &r.rewards);
    let mean_objectives = mean(|r| &r.objectives);
    let wider_not_worse = mean_rewards.len() < 2 || mean_rewards[1] >= mean_rewards[0];
    Ok(BeamTrendReport {
        schema: BEAM_TREND_SCHEMA.into(),
        widths: widths.to_vec(),
        rows,
        mean_rewards,
        mean_objectives,
        wider_not_worse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmin_prefers_first() {
        assert_eq!(argmin(&[1.0, -2.0, -2.0]), Some(1));
        assert_eq!(argmin(&[]), None);
    }

    #[test]
    fn beam_trend_shape() {
        let r = beam_trend(2, &[1, 5], &InstanceShape::default()).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.mean_rewards.len(), 2);
    }
}
