//! Decoding: ancestral sampling, likelihood beam search, value-guided search
//! and proxy-tuning composition.
//!
//! Guided search ranks a partial hypothesis `s_0 .. s_{K+1}` by
//! `sum_t [r(s_t, a_t) + beta * log pi_ref(a_t|s_t)] + V*(s_{K+1})`. Substituting
//! `r = beta * log(pi*/pi_ref) - V*(s_{t+1}) + V*(s_t)` telescopes this to
//! `V*(s_0) + sum_t beta * log pi*(a_t|s_t)`, so with the exact value function
//! it ranks every hypothesis exactly as likelihood search over `pi*` does.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math::{exp, ln, logsumexp};
use crate::mdp::{StateTree, Token, TokenMdp, Trajectory};
use crate::policy::{forced_eos, ActionDist, Policy};
use crate::soft_rl::{reference_log_table, RewardTable};
use crate::{Error, Result};

/// Scores closer than this are ranked as ties and ordered by token ids.
pub const SCORE_RESOLUTION: f64 = 1e-9;

/// Ancestral sample with EOS forced at the maximum length.
pub fn sample_response<D, R>(pi: &D, mdp: &TokenMdp, prompt: &[Token], rng: &mut R) -> Trajectory
where
    D: ActionDist + ?Sized,
    R: Rng + ?Sized,
{
    let mut response = Vec::new();
    loop {
        let lp = pi.action_log_probs(mdp, prompt, &response);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = None;
        let mut last_legal = mdp.eos();
        for (a, &l) in lp.iter().enumerate() {
            if l == f64::NEG_INFINITY {
                continue;
            }
            last_legal = a as Token;
            acc += exp(l);
            if u < acc {
                pick = Some(a as Token);
                break;
            }
        }
        // rounding can leave acc slightly below 1
        let a = pick.unwrap_or(last_legal);
        response.push(a);
        if a == mdp.eos() {
            return Trajectory::new(prompt.to_vec(), response);
        }
    }
}

pub fn sample_response_seeded<D: ActionDist + ?Sized>(pi: &D, mdp: &TokenMdp, prompt: &[Token], seed: u64) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_response(pi, mdp, prompt, &mut rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub response: Vec<Token>,
    /// Sum of per-step scores.
    pub cumulative: f64,
    /// Ranking score: `cumulative` plus the heuristic at the current state.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn trajectory(&self, prompt: &[Token]) -> Trajectory {
        Trajectory::new(prompt.to_vec(), self.response.clone())
    }
}

fn snap(x: f64) -> i64 {
    libm::round(x / SCORE_RESOLUTION) as i64
}

/// Score descending, then token sequence ascending.
pub fn rank_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    snap(b.score)
        .cmp(&snap(a.score))
        .then_with(|| a.response.cmp(&b.response))
}

/// Bounded set of hypotheses kept in rank order.
#[derive(Debug, Clone)]
pub struct Beam {
    pub width: usize,
    pub entries: Vec<Hypothesis>,
}

impl Beam {
    fn select(width: usize, mut candidates: Vec<Hypothesis>) -> Self {
        candidates.sort_by(rank_order);
        candidates.truncate(width);
        Self {
            width,
            entries: candidates,
        }
    }
}

/// Completed-pool beam search. `step_scores(prefix)` returns per-action scores
/// (`-inf` marks illegal actions); `heuristic(prefix, finished)` is added to the
/// cumulative score for ranking.
pub fn beam_search_with<S, H>(mdp: &TokenMdp, width: usize, mut step_scores: S, mut heuristic: H) -> Result<Vec<Hypothesis>>
where
    S: FnMut(&[Token]) -> Result<Vec<f64>>,
    H: FnMut(&[Token], bool) -> Result<f64>,
{
    if width == 0 {
        return Err(Error::InvalidConfig("beam width must be at least 1".into()));
    }
    let root = Hypothesis {
        response: Vec::new(),
        cumulative: 0.0,
        score: heuristic(&[], false)?,
        finished: false,
    };
    let mut beam = Beam {
        width,
        entries: vec![root],
    };
    while beam.entries.iter().any(|h| !h.finished) {
        let mut candidates = Vec::new();
        for h in beam.entries {
            if h.finished {
                candidates.push(h);
                continue;
            }
            let scores = step_scores(&h.response)?;
            for (a, &s) in scores.iter().enumerate() {
                if s == f64::NEG_INFINITY {
                    continue;
                }
                let mut response = h.response.clone();
                response.push(a as Token);
                let finished = a as Token == mdp.eos();
                let cumulative = h.cumulative + s;
                let score = cumulative + heuristic(&response, finished)?;
                candidates.push(Hypothesis {
                    response,
                    cumulative,
                    score,
                    finished,
                });
            }
        }
        beam = Beam::select(width, candidates);
    }
    Ok(beam.entries)
}

/// Beam search over cumulative `beta * log pi`, no length normalization.
pub fn beam_search<D: ActionDist + ?Sized>(pi: &D, mdp: &TokenMdp, prompt: &[Token], width: usize, beta: f64) -> Result<Vec<Hypothesis>> {
    beam_search_with(
        mdp,
        width,
        |prefix| Ok(pi.action_log_probs(mdp, prompt, prefix).into_iter().map(|l| beta * l).collect()),
        |_, _| Ok(0.0),
    )
}

/// Greedy decoding with ties going to the smaller token id.
pub fn greedy<D: ActionDist + ?Sized>(pi: &D, mdp: &TokenMdp, prompt: &[Token]) -> Trajectory {
    let mut response = Vec::new();
    loop {
        let lp = pi.action_log_probs(mdp, prompt, &response);
        let mut best = 0;
        for a in 1..lp.len() {
            if snap(lp[a]) > snap(lp[best]) {
                best = a;
            }
        }
        response.push(best as Token);
        if best as Token == mdp.eos() {
            return Trajectory::new(prompt.to_vec(), response);
        }
    }
}

/// Beam search over `sum [r + beta * log pi_ref] + V(s_{K+1})`.
///
/// `values` holds one entry per tree node; terminal states count as 0.
pub fn guided_search<R: ActionDist + ?Sized>(
    tree: &StateTree,
    reward: &RewardTable,
    reference: &R,
    values: &[f64],
    prompt: usize,
    width: usize,
    beta: f64,
) -> Result<Vec<Hypothesis>> {
    if values.len() != tree.len() {
        return Err(Error::MissingEntry(format!(
            "value table has {} entries for {} states",
            values.len(),
            tree.len()
        )));
    }
    reward.check_shape(tree)?;
    let ref_log = reference_log_table(tree, reference)?;
    let lookup = |prefix: &[Token]| {
        tree.lookup_in(prompt, prefix)
            .ok_or_else(|| Error::MissingEntry(format!("state {prefix:?}")))
    };
    beam_search_with(
        tree.mdp(),
        width,
        |prefix| {
            let id = lookup(prefix)?;
            let mut s = vec![f64::NEG_INFINITY; tree.vocab_size()];
            for &a in tree.actions(id) {
                s[a as usize] = reward.get(id, a) + beta * ref_log.get(id, a);
            }
            Ok(s)
        },
        |prefix, finished| if finished { Ok(0.0) } else { Ok(values[lookup(prefix)?]) },
    )
}

/// `pi(a|s) ∝ pi_base(a|s) * (pi_proxy(a|s) / pi_ref(a|s))^beta`.
pub struct ComposedPolicy<'a> {
    pub base: &'a dyn ActionDist,
    pub proxy: &'a dyn Policy,
    pub reference: &'a dyn ActionDist,
    pub beta: f64,
}

/// Builds the composition after checking the reference is positive on every tree state.
pub fn proxy_compose<'a>(
    tree: &StateTree,
    base: &'a dyn ActionDist,
    proxy: &'a dyn Policy,
    reference: &'a dyn ActionDist,
    beta: f64,
) -> Result<ComposedPolicy<'a>> {
    reference_log_table(tree, reference)?;
    Ok(ComposedPolicy {
        base,
        proxy,
        reference,
        beta,
    })
}

impl ComposedPolicy<'_> {
    /// The same distribution evaluated as `pi_base * exp(beta * A / tau)`, with
    /// `A = (l - V) - tau * log pi_ref` the proxy's implicit advantage computed
    /// from its raw logits `l` at temperature `tau`.
    pub fn advantage_form(&self, mdp: &TokenMdp, prompt: &[Token], generated: &[Token]) -> Vec<f64> {
        if mdp.is_forced_depth(generated.len()) {
            return forced_eos(mdp);
        }
        let tau = self.proxy.temperature();
        let logits = self.proxy.logits(prompt, generated);
        let scaled: Vec<f64> = logits.iter().map(|l| l / tau).collect();
        let value = tau * logsumexp(&scaled);
        let lb = self.base.action_log_probs(mdp, prompt, generated);
        let lr = self.reference.action_log_probs(mdp, prompt, generated);
        let unnorm: Vec<f64> = (0..logits.len())
            .map(|a| {
                let advantage = (logits[a] - value) - tau * lr[a];
                lb[a] + self.beta * advantage / tau
            })
            .collect();
        let z = logsumexp(&unnorm);
        unnorm.iter().map(|u| u - z).collect()
    }
}

impl ActionDist for ComposedPolicy<'_> {
    fn action_log_probs(&self, mdp: &TokenMdp, prompt: &[Token], generated: &[Token]) -> Vec<f64> {
        if mdp.is_forced_depth(generated.len()) {
            return forced_eos(mdp);
        }
        let pb = self.base.action_log_probs(mdp, prompt, generated);
        let pp = self.proxy.action_log_probs(mdp, prompt, generated);
        let pr = self.reference.action_log_probs(mdp, prompt, generated);
        let weights: Vec<f64> = (0..pb.len())
            .map(|a| exp(pb[a]) * libm::pow(exp(pp[a]) / exp(pr[a]), self.beta))
            .collect();
        let z: f64 = weights.iter().sum();
        weights.iter().map(|w| ln(w / z)).collect()
    }
}
