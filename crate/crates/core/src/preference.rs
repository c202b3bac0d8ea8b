//! Bradley-Terry preferences over trajectories.
//!
//! Two routes to the same number: a dense reward summed along each trajectory,
//! or a policy's summed `beta * log(pi / pi_ref)` ratios. At the exact soft
//! optimum the per-prompt partition function cancels and both agree.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decode::sample_response;
use crate::math::{log_sigmoid, sigmoid};
use crate::mdp::{LabelSource, PreferencePair, StateTree, Token, TokenMdp, Trajectory};
use crate::policy::{logprob, ActionDist};
use crate::soft_rl::{ActionTable, RewardTable};
use crate::{Error, Result};

/// Sum of per-token rewards along a trajectory.
pub fn traj_return(tree: &StateTree, reward: &RewardTable, tau: &Trajectory) -> Result<f64> {
    reward.check_shape(tree)?;
    let (_, path) = tree.trajectory_path(tau)?;
    Ok(path.iter().map(|&(id, a)| reward.get(id, a)).sum())
}

/// `sigma(R(tw) - R(tl))`.
pub fn bt_preference(tree: &StateTree, reward: &RewardTable, tw: &Trajectory, tl: &Trajectory) -> Result<f64> {
    if tw.prompt != tl.prompt {
        return Err(Error::PromptMismatch);
    }
    Ok(sigmoid(traj_return(tree, reward, tw)? - traj_return(tree, reward, tl)?))
}

/// `beta * log(pi(y|x) / pi_ref(y|x))` summed over tokens.
pub fn sequence_log_ratio<P, R>(pi: &P, reference: &R, mdp: &TokenMdp, beta: f64, traj: &Trajectory) -> Result<f64>
where
    P: ActionDist + ?Sized,
    R: ActionDist + ?Sized,
{
    let (lp, _) = logprob(pi, mdp, traj)?;
    let (lr, per_ref) = logprob(reference, mdp, traj)?;
    if let Some(t) = per_ref.iter().position(|x| !x.is_finite()) {
        return Err(Error::ZeroReferenceProbability {
            token: traj.response[t],
        });
    }
    Ok(beta * (lp - lr))
}

/// Policy-induced preference `sigma(h(tw) - h(tl))` with `h` the summed
/// `beta`-scaled log-ratio.
pub fn policy_preference<P, R>(
    pi: &P,
    reference: &R,
    mdp: &TokenMdp,
    beta: f64,
    tw: &Trajectory,
    tl: &Trajectory,
) -> Result<f64>
where
    P: ActionDist + ?Sized,
    R: ActionDist + ?Sized,
{
    if tw.prompt != tl.prompt {
        return Err(Error::PromptMismatch);
    }
    let hw = sequence_log_ratio(pi, reference, mdp, beta, tw)?;
    let hl = sequence_log_ratio(pi, reference, mdp, beta, tl)?;
    Ok(sigmoid(hw - hl))
}

/// `P(i beats j)` for every ordered pair of enumerated responses of every prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDistribution {
    prompts: Vec<PromptPreferences>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptPreferences {
    pub responses: Vec<Trajectory>,
    /// Row-major `n x n`; the diagonal is 1/2.
    pub probs: Vec<f64>,
}

impl PromptPreferences {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.probs[i * self.responses.len() + j]
    }
}

impl PreferenceDistribution {
    /// Builds the distribution from a per-response score: `P(i > j) = sigma(s_i - s_j)`.
    fn from_scores(tree: &StateTree, mut score: impl FnMut(&Trajectory) -> Result<f64>) -> Result<Self> {
        let mut prompts = Vec::with_capacity(tree.num_prompts());
        for p in 0..tree.num_prompts() {
            let responses = tree.responses(p);
            let scores = responses.iter().map(&mut score).collect::<Result<Vec<f64>>>()?;
            let n = responses.len();
            let mut probs = vec![0.5; n * n];
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        probs[i * n + j] = sigmoid(scores[i] - scores[j]);
                    }
                }
            }
            prompts.push(PromptPreferences { responses, probs });
        }
        Ok(Self { prompts })
    }

    pub fn from_reward(tree: &StateTree, reward: &RewardTable) -> Result<Self> {
        Self::from_scores(tree, |t| traj_return(tree, reward, t))
    }

    pub fn from_policy<P, R>(tree: &StateTree, pi: &P, reference: &R, beta: f64) -> Result<Self>
    where
        P: ActionDist + ?Sized,
        R: ActionDist + ?Sized,
    {
        Self::from_scores(tree, |t| sequence_log_ratio(pi, reference, tree.mdp(), beta, t))
    }

    pub fn prompts(&self) -> &[PromptPreferences] {
        &self.prompts
    }

    /// Largest total-variation distance between corresponding pairwise
    /// Bernoulli outcomes, i.e. `max |P(i > j) - P'(i > j)|`.
    pub fn tv_distance(&self, other: &Self) -> Result<f64> {
        if self.prompts.len() != other.prompts.len() {
            return Err(Error::ShapeMismatch("preference distributions cover different prompts".into()));
        }
        let mut worst = 0.0f64;
        for (a, b) in self.prompts.iter().zip(&other.prompts) {
            if a.responses != b.responses {
                return Err(Error::ShapeMismatch("preference distributions cover different responses".into()));
            }
            for (x, y) in a.probs.iter().zip(&b.probs) {
                worst = worst.max((x - y).abs());
            }
        }
        Ok(worst)
    }
}

/// A preference pair with a nonnegative weight (a count, or an exact probability).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPair {
    pub pair: PreferencePair,
    pub weight: f64,
}

/// Every ordered pair of distinct responses, weighted by the ground-truth
/// preference probability, so that each unordered pair carries total weight 1.
pub fn exact_preference_data(tree: &StateTree, reward: &RewardTable) -> Result<Vec<WeightedPair>> {
    let dist = PreferenceDistribution::from_reward(tree, reward)?;
    let mut out = Vec::new();
    for pp in dist.prompts() {
        let n = pp.responses.len();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                out.push(WeightedPair {
                    pair: PreferencePair {
                        prompt: pp.responses[i].prompt.clone(),
                        chosen: pp.responses[i].response.clone(),
                        rejected: pp.responses[j].response.clone(),
                        label_source: LabelSource::Fixed,
                    },
                    weight: pp.get(i, j),
                });
            }
        }
    }
    Ok(out)
}

/// How the two responses of a sampled pair are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairSampler {
    /// Ancestral samples from the reference policy.
    #[default]
    Reference,
    /// Uniform over enumerated responses.
    Uniform,
}

/// Draws `n` labelled pairs: uniform prompt, two distinct responses, winner by
/// a Bernoulli draw with the Bradley-Terry probability.
pub fn sample_preferences<R: ActionDist + ?Sized>(
    tree: &StateTree,
    reward: &RewardTable,
    reference: &R,
    n: usize,
    seed: u64,
    sampler: PairSampler,
) -> Result<Vec<PreferencePair>> {
    let mdp = tree.mdp();
    if n > 0 && mdp.responses_per_prompt() < 2 {
        return Err(Error::InvalidConfig("pair sampling needs at least two responses per prompt".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let responses: Vec<Vec<Trajectory>> = match sampler {
        PairSampler::Uniform => (0..tree.num_prompts()).map(|p| tree.responses(p)).collect(),
        PairSampler::Reference => Vec::new(),
    };
    let draw = |p: usize, rng: &mut ChaCha8Rng| -> Trajectory {
        match sampler {
            PairSampler::Reference => sample_response(reference, mdp, &mdp.prompts()[p], rng),
            PairSampler::Uniform => responses[p][rng.gen_range(0..responses[p].len())].clone(),
        }
    };
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let p = rng.gen_range(0..tree.num_prompts());
        let a = draw(p, &mut rng);
        let b = loop {
            let b = draw(p, &mut rng);
            if b != a {
                break b;
            }
        };
        let prob_a = bt_preference(tree, reward, &a, &b)?;
        let (chosen, rejected) = if rng.gen::<f64>() < prob_a { (a, b) } else { (b, a) };
        out.push(PreferencePair {
            prompt: chosen.prompt,
            chosen: chosen.response,
            rejected: rejected.response,
            label_source: LabelSource::Sampled,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BanditFitConfig {
    pub max_iters: usize,
    /// Stop once the Euclidean gradient norm drops below this.
    pub grad_tol: f64,
}

impl Default for BanditFitConfig {
    fn default() -> Self {
        Self {
            max_iters: 200_000,
            grad_tol: 1e-10,
        }
    }
}

/// One scalar reward per enumerated response, mean-centred per prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditRewardModel {
    pub responses: Vec<Vec<Trajectory>>,
    pub values: Vec<Vec<f64>>,
    pub l2_strength: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl BanditRewardModel {
    pub fn reward(&self, prompt: usize, response: &[Token]) -> Option<f64> {
        self.responses[prompt]
            .iter()
            .position(|t| t.response == response)
            .map(|i| self.values[prompt][i])
    }

    /// Places each response's reward on its final EOS transition; every other
    /// transition gets zero.
    pub fn terminal_reward_table(&self, tree: &StateTree) -> Result<RewardTable> {
        let mut table = ActionTable::zeros(tree);
        let eos = tree.mdp().eos();
        for (p, responses) in self.responses.iter().enumerate() {
            for (traj, &value) in responses.iter().zip(&self.values[p]) {
                let prefix = &traj.response[..traj.response.len() - 1];
                let id = tree
                    .lookup_in(p, prefix)
                    .ok_or_else(|| Error::MissingEntry(format!("response {:?}", traj.response)))?;
                table.set(id, eos, value);
            }
        }
        Ok(table)
    }
}

pub fn fit_bandit_reward(
    tree: &StateTree,
    dataset: &[PreferencePair],
    l2_strength: f64,
    config: &BanditFitConfig,
) -> Result<BanditRewardModel> {
    let weighted: Vec<WeightedPair> = dataset
        .iter()
        .map(|p| WeightedPair {
            pair: p.clone(),
            weight: 1.0,
        })
        .collect();
    fit_bandit_reward_weighted(tree, &weighted, l2_strength, config)
}

/// Maximizes the Bradley-Terry log-likelihood with an L2 penalty by gradient
/// descent with step `1 / L`, `L` a Gershgorin bound on the Hessian.
pub fn fit_bandit_reward_weighted(
    tree: &StateTree,
    dataset: &[WeightedPair],
    l2_strength: f64,
    config: &BanditFitConfig,
) -> Result<BanditRewardModel> {
    if !(l2_strength >= 0.0) {
        return Err(Error::InvalidConfig("l2_strength must be nonnegative".into()));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mdp = tree.mdp();
    let responses: Vec<Vec<Trajectory>> = (0..tree.num_prompts()).map(|p| tree.responses(p)).collect();
    let offsets: Vec<usize> = responses
        .iter()
        .scan(0, |acc, r| {
            let o = *acc;
            *acc += r.len();
            Some(o)
        })
        .collect();
    let index: Vec<BTreeMap<&[Token], usize>> = responses
        .iter()
        .map(|rs| rs.iter().enumerate().map(|(i, t)| (t.response.as_slice(), i)).collect())
        .collect();
    let dim: usize = responses.iter().map(Vec::len).sum();

    // aggregated weights per ordered (winner, loser)
    let mut counts: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut total = 0.0;
    for wp in dataset {
        crate::mdp::validate_pair(mdp, &wp.pair)?;
        if !(wp.weight >= 0.0 && wp.weight.is_finite()) {
            return Err(Error::InvalidConfig("pair weights must be finite and nonnegative".into()));
        }
        let p = mdp.prompt_index(&wp.pair.prompt).ok_or(Error::UnknownPrompt)?;
        let w = index[p][wp.pair.chosen.as_slice()] + offsets[p];
        let l = index[p][wp.pair.rejected.as_slice()] + offsets[p];
        *counts.entry((w, l)).or_insert(0.0) += wp.weight;
        total += wp.weight;
    }
    if total <= 0.0 {
        return Err(Error::EmptyBatch);
    }
    let edges: Vec<(usize, usize, f64)> = counts.into_iter().map(|((w, l), c)| (w, l, c / total)).collect();
    let mut degree = vec![0.0; dim];
    for &(w, l, c) in &edges {
        degree[w] += c;
        degree[l] += c;
    }
    let lipschitz = 0.5 * degree.iter().copied().fold(0.0, f64::max) + l2_strength;
    let step = 1.0 / lipschitz.max(1e-12);

    let mut r = vec![0.0; dim];
    let mut grad = vec![0.0; dim];
    let mut iterations = 0;
    let mut grad_norm;
    loop {
        grad.iter_mut().zip(&r).for_each(|(g, ri)| *g = l2_strength * ri);
        for &(w, l, c) in &edges {
            // d/dm of -log sigma(m) = -sigma(-m)
            let s = c * sigmoid(-(r[w] - r[l]));
            grad[w] -= s;
            grad[l] += s;
        }
        grad_norm = libm::sqrt(grad.iter().map(|g| g * g).sum());
        if grad_norm < config.grad_tol {
            break;
        }
        if iterations >= config.max_iters || !grad_norm.is_finite() {
            return Err(Error::NotConverged { iterations, grad_norm });
        }
        for (ri, g) in r.iter_mut().zip(&grad) {
            *ri -= step * g;
        }
        iterations += 1;
    }

    let values = responses
        .iter()
        .zip(&offsets)
        .map(|(rs, &o)| {
            let slice = &r[o..o + rs.len()];
            let mean = slice.iter().sum::<f64>() / rs.len() as f64;
            slice.iter().map(|x| x - mean).collect()
        })
        .collect();
    Ok(BanditRewardModel {
        responses,
        values,
        l2_strength,
        iterations,
        grad_norm,
    })
}

/// Mean Bradley-Terry negative log-likelihood of labelled pairs under per-response rewards.
pub fn bandit_nll(model: &BanditRewardModel, mdp: &TokenMdp, dataset: &[PreferencePair]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for pair in dataset {
        let p = mdp.prompt_index(&pair.prompt).ok_or(Error::UnknownPrompt)?;
        let rw = model.reward(p, &pair.chosen).ok_or_else(|| Error::MissingEntry("chosen".into()))?;
        let rl = model.reward(p, &pair.rejected).ok_or_else(|| Error::MissingEntry("rejected".into()))?;
        total -= log_sigmoid(rw - rl);
    }
    Ok(total / dataset.len() as f64)
}
