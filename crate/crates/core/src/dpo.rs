//! Token-level DPO.
//!
//! The sequence log-ratio `h(y) = beta * sum_t log(pi(a_t|s_t) / pi_ref(a_t|s_t))`
//! is a sum of per-token implicit rewards, and the loss on a pair is
//! `-log sigma(h(y_w) - h(y_l))`. Training data is either a sampled dataset or,
//! for verification, every pair weighted by its exact ground-truth preference.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::math::{exp, ln, log_sigmoid, sigmoid};
use crate::mdp::{validate_pair, PreferencePair, StateTree, TokenMdp, Trajectory};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::policy::{accumulate_logprob_grad, fingerprint, logprob, ActionDist, Policy};
use crate::preference::WeightedPair;
use crate::soft_rl::{reference_log_table, ActionTable};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DpoMode {
    #[default]
    Sampled,
    /// Full-batch training on every pair weighted by its exact preference probability.
    ExactExpected,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoConfig {
    pub beta: f64,
    pub optimizer: OptimizerConfig,
    /// Passes over the data; in exact mode one epoch is one full-batch step.
    pub epochs: usize,
    /// `None` means full batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub mode: DpoMode,
    /// Compute the expected log-ratio diagnostic every this many steps (needs a tree).
    pub diagnostics_every: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            optimizer: OptimizerConfig::sgd(1e-2),
            epochs: 100,
            batch_size: None,
            seed: 0,
            mode: DpoMode::Sampled,
            diagnostics_every: 1,
        }
    }
}

/// Training data for [`dpo_train`].
#[derive(Debug, Clone, PartialEq)]
pub enum PreferenceData {
    Sampled(Vec<PreferencePair>),
    Exact(Vec<WeightedPair>),
}

impl PreferenceData {
    fn weighted(&self) -> Vec<WeightedPair> {
        match self {
            Self::Sampled(pairs) => pairs
                .iter()
                .map(|p| WeightedPair {
                    pair: p.clone(),
                    weight: 1.0,
                })
                .collect(),
            Self::Exact(pairs) => pairs.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Weighted mean of `h(y_w)` over the step's batch.
    pub chosen_ir: f64,
    pub rejected_ir: f64,
    pub margin: f64,
    /// `E_{pi_ref}[h]` averaged over prompts, when it was computed this step.
    pub expected_logratio: Option<f64>,
    pub running_chosen_ir: f64,
    pub running_rejected_ir: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingDiagnostics {
    pub reference_fingerprint: u64,
    pub records: Vec<StepRecord>,
}

/// Loss, gradient and implicit-reward summaries of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEval {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub chosen_ir: f64,
    pub rejected_ir: f64,
    pub margin: f64,
}

/// Deduplicated trajectories with cached reference log-probabilities.
struct PairIndex {
    trajectories: Vec<Trajectory>,
    ref_logp: Vec<f64>,
    /// `(chosen, rejected, weight)` indices into `trajectories`.
    pairs: Vec<(usize, usize, f64)>,
}

impl PairIndex {
    fn build<R: ActionDist + ?Sized>(reference: &R, mdp: &TokenMdp, data: &[WeightedPair]) -> Result<Self> {
        let mut ids: BTreeMap<Trajectory, usize> = BTreeMap::new();
        let mut trajectories = Vec::new();
        let mut ref_logp = Vec::new();
        let mut pairs = Vec::with_capacity(data.len());
        let mut intern = |t: Trajectory| -> Result<usize> {
            if let Some(&i) = ids.get(&t) {
                return Ok(i);
            }
            let (lr, per) = logprob(reference, mdp, &t)?;
            if let Some(pos) = per.iter().position(|x| !x.is_finite()) {
                return Err(Error::ZeroReferenceProbability { token: t.response[pos] });
            }
            let i = trajectories.len();
            ids.insert(t.clone(), i);
            trajectories.push(t);
            ref_logp.push(lr);
            Ok(i)
        };
        for wp in data {
            validate_pair(mdp, &wp.pair)?;
            if !(wp.weight >= 0.0 && wp.weight.is_finite()) {
                return Err(Error::InvalidConfig("pair weights must be finite and nonnegative".into()));
            }
            let w = intern(wp.pair.chosen_trajectory())?;
            let l = intern(wp.pair.rejected_trajectory())?;
            pairs.push((w, l, wp.weight));
        }
        Ok(Self {
            trajectories,
            ref_logp,
            pairs,
        })
    }

    fn evaluate<P: Policy + ?Sized>(&self, pi: &P, mdp: &TokenMdp, beta: f64, batch: &[usize]) -> Result<BatchEval> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let total_w: f64 = batch.iter().map(|&k| self.pairs[k].2).sum();
        if total_w <= 0.0 {
            return Err(Error::EmptyBatch);
        }
        let mut ratio: BTreeMap<usize, f64> = BTreeMap::new();
        for &k in batch {
            let (w, l, _) = self.pairs[k];
            for i in [w, l] {
                if let alloc::collections::btree_map::Entry::Vacant(e) = ratio.entry(i) {
                    let (lp, _) = logprob(pi, mdp, &self.trajectories[i])?;
                    e.insert(beta * (lp - self.ref_logp[i]));
                }
            }
        }
        let mut coef: BTreeMap<usize, f64> = BTreeMap::new();
        let (mut loss, mut chosen, mut rejected) = (0.0, 0.0, 0.0);
        for &k in batch {
            let (w, l, weight) = self.pairs[k];
            let frac = weight / total_w;
            let (hw, hl) = (ratio[&w], ratio[&l]);
            let m = hw - hl;
            loss -= frac * log_sigmoid(m);
            chosen += frac * hw;
            rejected += frac * hl;
            // d/dm of -log sigma(m) is -sigma(-m); dh/dlogpi = beta
            let g = frac * sigmoid(-m) * beta;
            *coef.entry(w).or_insert(0.0) -= g;
            *coef.entry(l).or_insert(0.0) += g;
        }
        let mut grad = vec![0.0; pi.num_params()];
        for (&i, &c) in &coef {
            if c != 0.0 {
                accumulate_logprob_grad(pi, mdp, &self.trajectories[i], c, &mut grad);
            }
        }
        Ok(BatchEval {
            loss,
            grad,
            chosen_ir: chosen,
            rejected_ir: rejected,
            margin: chosen - rejected,
        })
    }
}

/// Mean token-level DPO loss over a batch and its gradient.
pub fn dpo_loss_and_grad<P, R>(pi: &P, reference: &R, mdp: &TokenMdp, batch: &[PreferencePair], beta: f64) -> Result<BatchEval>
where
    P: Policy + ?Sized,
    R: ActionDist + ?Sized,
{
    let data = PreferenceData::Sampled(batch.to_vec()).weighted();
    weighted_dpo_loss_and_grad(pi, reference, mdp, &data, beta)
}

/// Weighted mean `sum_k w_k * loss_k / sum_k w_k`.
pub fn weighted_dpo_loss_and_grad<P, R>(
    pi: &P,
    reference: &R,
    mdp: &TokenMdp,
    batch: &[WeightedPair],
    beta: f64,
) -> Result<BatchEval>
where
    P: Policy + ?Sized,
    R: ActionDist + ?Sized,
{
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let index = PairIndex::build(reference, mdp, batch)?;
    let all: Vec<usize> = (0..index.pairs.len()).collect();
    index.evaluate(pi, mdp, beta, &all)
}

/// Sequence-level (bandit) DPO loss computed from whole-sequence
/// probabilities `prod_t pi(a_t|s_t)`.
pub fn bandit_dpo_loss<P, R>(pi: &P, reference: &R, mdp: &TokenMdp, batch: &[PreferencePair], beta: f64) -> Result<f64>
where
    P: ActionDist + ?Sized,
    R: ActionDist + ?Sized,
{
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let seq_prob = |d: &dyn Fn(&[u32]) -> Vec<f64>, t: &Trajectory| -> f64 {
        t.steps().map(|(prefix, a)| exp(d(prefix)[a as usize])).product()
    };
    let mut loss = 0.0;
    for pair in batch {
        validate_pair(mdp, pair)?;
        let pol = |prefix: &[u32]| pi.action_log_probs(mdp, &pair.prompt, prefix);
        let rf = |prefix: &[u32]| reference.action_log_probs(mdp, &pair.prompt, prefix);
        let (w, l) = (pair.chosen_trajectory(), pair.rejected_trajectory());
        let ratio_w = ln(seq_prob(&pol, &w)) - ln(seq_prob(&rf, &w));
        let ratio_l = ln(seq_prob(&pol, &l)) - ln(seq_prob(&rf, &l));
        loss -= log_sigmoid(beta * ratio_w - beta * ratio_l);
    }
    Ok(loss / batch.len() as f64)
}

/// Trains `pi` against a frozen reference.
///
/// `tree` enables the exact expected log-ratio diagnostic. `on_step` sees
/// every record together with the post-step policy.
pub fn dpo_train<P, R, F>(
    pi: &mut P,
    reference: &R,
    mdp: &TokenMdp,
    tree: Option<&StateTree>,
    data: &PreferenceData,
    config: &DpoConfig,
    mut on_step: F,
) -> Result<TrainingDiagnostics>
where
    P: Policy + ?Sized,
    R: Policy + ?Sized,
    F: FnMut(&StepRecord, &P),
{
    if !(config.beta > 0.0) {
        return Err(Error::InvalidConfig("beta must be positive".into()));
    }
    match (config.mode, data) {
        (DpoMode::ExactExpected, PreferenceData::Exact(_)) | (DpoMode::Sampled, PreferenceData::Sampled(_)) => {}
        _ => return Err(Error::InvalidConfig("training mode does not match the data kind".into())),
    }
    if config.mode == DpoMode::ExactExpected && tree.is_none() {
        return Err(Error::InvalidConfig("exact mode needs an enumerable tree".into()));
    }
    let reference_fingerprint = fingerprint(reference);
    let index = PairIndex::build(reference, mdp, &data.weighted())?;
    if index.pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let ref_log = tree.map(|t| reference_log_table(t, reference)).transpose()?;

    let mut opt = Optimizer::new(config.optimizer, pi.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..index.pairs.len()).collect();
    let batch_size = match config.mode {
        DpoMode::ExactExpected => order.len(),
        DpoMode::Sampled => config.batch_size.unwrap_or(order.len()).max(1),
    };
    let mut records = Vec::new();
    let mut last_good = pi.params().to_vec();
    let (mut sum_chosen, mut sum_rejected) = (0.0, 0.0);
    let mut step = 0;
    for _ in 0..config.epochs {
        if config.mode == DpoMode::Sampled && batch_size < order.len() {
            order.shuffle(&mut rng);
        }
        for batch in order.chunks(batch_size) {
            let eval = index.evaluate(pi, mdp, config.beta, batch)?;
            if !eval.loss.is_finite() || eval.grad.iter().any(|g| !g.is_finite()) {
                pi.params_mut().copy_from_slice(&last_good);
                return Err(Error::Diverged { step, last_good });
            }
            last_good.copy_from_slice(pi.params());
            let expected = match (tree, &ref_log) {
                (Some(t), Some(rl)) if config.diagnostics_every > 0 && step % config.diagnostics_every == 0 => {
                    Some(mean_expected_logratio(pi, rl, t, config.beta))
                }
                _ => None,
            };
            sum_chosen += eval.chosen_ir;
            sum_rejected += eval.rejected_ir;
            let n = (step + 1) as f64;
            let record = StepRecord {
                step,
                loss: eval.loss,
                chosen_ir: eval.chosen_ir,
                rejected_ir: eval.rejected_ir,
                margin: eval.margin,
                expected_logratio: expected,
                running_chosen_ir: sum_chosen / n,
                running_rejected_ir: sum_rejected / n,
            };
            opt.step(pi.params_mut(), &eval.grad);
            on_step(&record, pi);
            records.push(record);
            step += 1;
        }
    }
    Ok(TrainingDiagnostics {
        reference_fingerprint,
        records,
    })
}

/// `beta * log(pi(a_t|s_t) / pi_ref(a_t|s_t))` for every token.
pub fn implicit_token_rewards<P, R>(pi: &P, reference: &R, mdp: &TokenMdp, beta: f64, traj: &Trajectory) -> Result<Vec<f64>>
where
    P: ActionDist + ?Sized,
    R: ActionDist + ?Sized,
{
    let (_, lp) = logprob(pi, mdp, traj)?;
    let (_, lr) = logprob(reference, mdp, traj)?;
    lp.iter()
        .zip(&lr)
        .zip(&traj.response)
        .map(|((p, r), &a)| {
            if r.is_finite() {
                Ok(beta * (p - r))
            } else {
                Err(Error::ZeroReferenceProbability { token: a })
            }
        })
        .collect()
}

/// `E_{y ~ pi_ref}[beta * log(pi(y|x) / pi_ref(y|x))]` by enumeration.
pub fn expected_logratio<P, R>(pi: &P, reference: &R, tree: &StateTree, beta: f64, prompt: usize) -> Result<f64>
where
    P: ActionDist + ?Sized,
    R: ActionDist + ?Sized,
{
    let mdp = tree.mdp();
    let mut total = 0.0;
    for y in tree.responses(prompt) {
        let (lr, per) = logprob(reference, mdp, &y)?;
        if let Some(t) = per.iter().position(|x| !x.is_finite()) {
            return Err(Error::ZeroReferenceProbability { token: y.response[t] });
        }
        let (lp, _) = logprob(pi, mdp, &y)?;
        total += exp(lr) * beta * (lp - lr);
    }
    Ok(total)
}

fn mean_expected_logratio<P: ActionDist + ?Sized>(pi: &P, ref_log: &ActionTable, tree: &StateTree, beta: f64) -> f64 {
    let mdp = tree.mdp();
    let mut sum = 0.0;
    for p in 0..tree.num_prompts() {
        for y in tree.responses(p) {
            let path = tree.path(p, &y.response).expect("enumerated response is valid");
            let lr: f64 = path.iter().map(|&(id, a)| ref_log.get(id, a)).sum();
            let (lp, _) = logprob(pi, mdp, &y).expect("enumerated response is valid");
            sum += exp(lr) * beta * (lp - lr);
        }
    }
    sum / tree.num_prompts() as f64
}

/// `KL(pi_ref || pi)` over responses of one prompt, accumulated state by state:
/// `sum_s P_ref(reach s) * KL(pi_ref(.|s) || pi(.|s))`.
pub fn reference_kl<P, R>(pi: &P, reference: &R, tree: &StateTree, prompt: usize) -> Result<f64>
where
    P: ActionDist + ?Sized,
    R: ActionDist + ?Sized,
{
    let mdp = tree.mdp();
    let range = tree.prompt_nodes(prompt);
    let mut reach = vec![0.0; range.len()];
    let mut kl = 0.0;
    for id in range.clone() {
        let node = tree.node(id);
        let local = id - range.start;
        let prompt_tokens = tree.prompt_tokens(prompt);
        let lr = reference.action_log_probs(mdp, prompt_tokens, &node.prefix);
        let lp = pi.action_log_probs(mdp, prompt_tokens, &node.prefix);
        reach[local] = match node.parent {
            None => 1.0,
            Some((parent, a)) => {
                let parent_node = tree.node(parent);
                let plr = reference.action_log_probs(mdp, prompt_tokens, &parent_node.prefix);
                reach[parent - range.start] * exp(plr[a as usize])
            }
        };
        for &a in tree.actions(id) {
            let r = lr[a as usize];
            if !r.is_finite() {
                return Err(Error::ZeroReferenceProbability { token: a });
            }
            kl += reach[local] * exp(r) * (r - lp[a as usize]);
        }
    }
    Ok(kl)
}

/// Per-state learned advantages `beta * log(pi / pi_ref)` for every legal pair.
pub fn learned_advantages<P, R>(pi: &P, reference: &R, tree: &StateTree, beta: f64) -> ActionTable
where
    P: ActionDist + ?Sized,
    R: ActionDist + ?Sized,
{
    let mdp = tree.mdp();
    let mut table = ActionTable::zeros(tree);
    for id in 0..tree.len() {
        let node = tree.node(id);
        let prompt = tree.prompt_tokens(node.prompt);
        let lp = pi.action_log_probs(mdp, prompt, &node.prefix);
        let lr = reference.action_log_probs(mdp, prompt, &node.prefix);
        for &a in tree.actions(id) {
            table.set(id, a, beta * (lp[a as usize] - lr[a as usize]));
        }
    }
    table
}

/// Max difference of two advantage tables after subtracting, per state, each
/// table's reference-weighted mean.
pub fn gauge_aligned_residual(tree: &StateTree, learned: &ActionTable, oracle: &ActionTable, ref_log: &ActionTable) -> f64 {
    let mut worst = 0.0f64;
    for id in 0..tree.len() {
        let acts = tree.actions(id);
        let centre = |t: &ActionTable| -> f64 { acts.iter().map(|&a| exp(ref_log.get(id, a)) * t.get(id, a)).sum() };
        let (cl, co) = (centre(learned), centre(oracle));
        for &a in acts {
            worst = worst.max(((learned.get(id, a) - cl) - (oracle.get(id, a) - co)).abs());
        }
    }
    worst
}
