//! Exact maximum-entropy RL on the token tree.
//!
//! With a KL penalty towards a reference policy and temperature `beta`, the
//! optimal soft Q-function satisfies
//!
//! ```text
//! Q*(s, a) = r(s, a) + beta * log pi_ref(a|s) + V*(s')     (V*(s') = 0 if s' is terminal)
//! V*(s)    = beta * log sum_a exp(Q*(s, a) / beta)
//! pi*(a|s) = exp((Q*(s, a) - V*(s)) / beta)
//! ```
//!
//! The tree has no cycles, so one backward sweep from the leaves solves it
//! exactly, and the same recursion read in reverse recovers the reward from Q.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::math::{exp, ln, logsumexp};
use crate::mdp::{NodeId, State, StateTree, Token};
use crate::policy::ActionDist;
use crate::{Error, Result};

/// A dense `(node, action)` table aligned with one [`StateTree`].
///
/// Only legal actions carry meaning; entries for non-EOS actions at forced
/// nodes are placeholders.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionTable {
    vocab_size: usize,
    values: Vec<f64>,
}

/// Per-transition rewards `r(s, a)`.
pub type RewardTable = ActionTable;

impl ActionTable {
    pub fn filled(tree: &StateTree, value: f64) -> Self {
        Self {
            vocab_size: tree.vocab_size(),
            values: vec![value; tree.len() * tree.vocab_size()],
        }
    }

    pub fn zeros(tree: &StateTree) -> Self {
        Self::filled(tree, 0.0)
    }

    pub fn from_fn(tree: &StateTree, mut f: impl FnMut(NodeId, Token) -> f64) -> Self {
        let mut t = Self::zeros(tree);
        for id in 0..tree.len() {
            for &a in tree.actions(id) {
                t.set(id, a, f(id, a));
            }
        }
        t
    }

    /// Legal entries drawn uniformly from `[lo, hi)` in node/action order.
    pub fn random_uniform<R: Rng + ?Sized>(tree: &StateTree, rng: &mut R, lo: f64, hi: f64) -> Self {
        Self::from_fn(tree, |_, _| rng.gen_range(lo..hi))
    }

    pub fn num_nodes(&self) -> usize {
        self.values.len() / self.vocab_size
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    #[inline]
    pub fn get(&self, id: NodeId, a: Token) -> f64 {
        self.values[id * self.vocab_size + a as usize]
    }

    #[inline]
    pub fn set(&mut self, id: NodeId, a: Token, value: f64) {
        self.values[id * self.vocab_size + a as usize] = value;
    }

    pub fn row(&self, id: NodeId) -> &[f64] {
        &self.values[id * self.vocab_size..(id + 1) * self.vocab_size]
    }

    pub fn row_mut(&mut self, id: NodeId) -> &mut [f64] {
        &mut self.values[id * self.vocab_size..(id + 1) * self.vocab_size]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn check_shape(&self, tree: &StateTree) -> Result<()> {
        if self.vocab_size != tree.vocab_size() || self.num_nodes() != tree.len() {
            return Err(Error::ShapeMismatch(format!(
                "table has {} nodes x {} actions, tree has {} x {}",
                self.num_nodes(),
                self.vocab_size,
                tree.len(),
                tree.vocab_size()
            )));
        }
        Ok(())
    }

    /// Largest absolute difference over legal entries.
    pub fn max_abs_diff(&self, other: &Self, tree: &StateTree) -> f64 {
        let mut worst = 0.0f64;
        for id in 0..tree.len() {
            for &a in tree.actions(id) {
                worst = worst.max((self.get(id, a) - other.get(id, a)).abs());
            }
        }
        worst
    }

    fn check_finite(&self, tree: &StateTree, what: &str) -> Result<()> {
        for id in 0..tree.len() {
            for &a in tree.actions(id) {
                if !self.get(id, a).is_finite() {
                    return Err(Error::InvalidConfig(format!(
                        "{what} entry at node {id}, action {a} is not finite"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Optimal soft Q, V and policy for one `(reward, reference, beta)` triple.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftSolution {
    pub beta: f64,
    pub q: ActionTable,
    /// Soft value of every nonterminal node; terminal states have value 0.
    pub v: Vec<f64>,
    /// Action probabilities; zero for illegal actions.
    pub pi: ActionTable,
    /// Reference log-probabilities the solution was computed against.
    pub ref_log: ActionTable,
}

impl SoftSolution {
    /// `V*` of the successor reached by `a` from `id`.
    pub fn next_value(&self, tree: &StateTree, id: NodeId, a: Token) -> f64 {
        tree.child(id, a).map_or(0.0, |c| self.v[c])
    }

    /// Log partition function of a prompt: `V*(s_0) / beta`.
    pub fn log_partition(&self, tree: &StateTree, prompt: usize) -> f64 {
        self.v[tree.root(prompt)] / self.beta
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidConfig(format!("beta must be positive, got {beta}")));
    }
    Ok(())
}

/// Reference log-probabilities over the tree, rejecting any zero-probability legal action.
pub fn reference_log_table<R: ActionDist + ?Sized>(tree: &StateTree, reference: &R) -> Result<ActionTable> {
    let mut table = ActionTable::filled(tree, f64::NEG_INFINITY);
    for id in 0..tree.len() {
        let node = tree.node(id);
        let lp = reference.action_log_probs(tree.mdp(), tree.prompt_tokens(node.prompt), &node.prefix);
        table.row_mut(id).copy_from_slice(&lp);
    }
    validate_reference(tree, &table)?;
    Ok(table)
}

pub fn validate_reference(tree: &StateTree, ref_log: &ActionTable) -> Result<()> {
    ref_log.check_shape(tree)?;
    for id in 0..tree.len() {
        for &a in tree.actions(id) {
            let lp = ref_log.get(id, a);
            if !lp.is_finite() {
                return Err(Error::ZeroReferenceProbability { token: a });
            }
        }
    }
    Ok(())
}

/// Solves the KL-regularized soft Bellman equations by backward induction.
pub fn solve_soft(
    tree: &StateTree,
    reward: &RewardTable,
    reference: &dyn ActionDist,
    beta: f64,
) -> Result<SoftSolution> {
    let ref_log = reference_log_table(tree, reference)?;
    solve_soft_with_log_ref(tree, reward, &ref_log, beta)
}

pub fn solve_soft_with_log_ref(
    tree: &StateTree,
    reward: &RewardTable,
    ref_log: &ActionTable,
    beta: f64,
) -> Result<SoftSolution> {
    check_beta(beta)?;
    reward.check_shape(tree)?;
    reward.check_finite(tree, "reward")?;
    validate_reference(tree, ref_log)?;

    let mut q = ActionTable::filled(tree, f64::NEG_INFINITY);
    let mut v = vec![0.0; tree.len()];
    let mut pi = ActionTable::zeros(tree);
    let mut scaled = vec![f64::NEG_INFINITY; tree.vocab_size()];
    for id in (0..tree.len()).rev() {
        scaled.fill(f64::NEG_INFINITY);
        for &a in tree.actions(id) {
            let future = tree.child(id, a).map_or(0.0, |c| v[c]);
            let qa = reward.get(id, a) + beta * ref_log.get(id, a) + future;
            q.set(id, a, qa);
            scaled[a as usize] = qa / beta;
        }
        v[id] = beta * logsumexp(&scaled);
        for &a in tree.actions(id) {
            pi.set(id, a, exp((q.get(id, a) - v[id]) / beta));
        }
    }
    Ok(SoftSolution {
        beta,
        q,
        v,
        pi,
        ref_log: ref_log.clone(),
    })
}

/// Soft value `beta * logsumexp(Q(s, .) / beta)` of every node.
pub fn values_from_q(tree: &StateTree, q: &ActionTable, beta: f64) -> Vec<f64> {
    let mut scaled = vec![f64::NEG_INFINITY; tree.vocab_size()];
    (0..tree.len())
        .map(|id| {
            scaled.fill(f64::NEG_INFINITY);
            for &a in tree.actions(id) {
                scaled[a as usize] = q.get(id, a) / beta;
            }
            beta * logsumexp(&scaled)
        })
        .collect()
}

/// Inverts the Bellman equation: `r = Q - beta * log pi_ref - V(s')`, with
/// `V(s') = 0` for terminal successors and `V` computed from `Q` itself.
pub fn q_to_reward(
    tree: &StateTree,
    q: &ActionTable,
    reference: &dyn ActionDist,
    beta: f64,
) -> Result<RewardTable> {
    let ref_log = reference_log_table(tree, reference)?;
    q_to_reward_with_log_ref(tree, q, &ref_log, beta)
}

pub fn q_to_reward_with_log_ref(
    tree: &StateTree,
    q: &ActionTable,
    ref_log: &ActionTable,
    beta: f64,
) -> Result<RewardTable> {
    check_beta(beta)?;
    q.check_shape(tree)?;
    q.check_finite(tree, "Q")?;
    validate_reference(tree, ref_log)?;
    let v = values_from_q(tree, q, beta);
    Ok(ActionTable::from_fn(tree, |id, a| {
        let future = tree.child(id, a).map_or(0.0, |c| v[c]);
        q.get(id, a) - beta * ref_log.get(id, a) - future
    }))
}

/// A state potential `Phi` that vanishes on terminal states.
#[derive(Debug, Clone, PartialEq)]
pub struct Potential {
    values: Vec<f64>,
}

impl Potential {
    pub fn zeros(tree: &StateTree) -> Self {
        Self {
            values: vec![0.0; tree.len()],
        }
    }

    /// Potential on nonterminal nodes; terminal states are zero by construction.
    pub fn from_values(tree: &StateTree, values: Vec<f64>) -> Result<Self> {
        if values.len() != tree.len() {
            return Err(Error::ShapeMismatch(format!(
                "potential has {} values for {} nodes",
                values.len(),
                tree.len()
            )));
        }
        Ok(Self { values })
    }

    /// Evaluates `f` on every reachable state, terminal ones included.
    pub fn from_fn(tree: &StateTree, mut f: impl FnMut(&State) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(tree.len());
        for id in 0..tree.len() {
            let s = tree.state(id);
            values.push(f(&s));
            let mut terminal = s;
            terminal.generated.push(tree.mdp().eos());
            terminal.terminal = true;
            let value = f(&terminal);
            if value != 0.0 {
                return Err(Error::NonzeroTerminalPotential { value });
            }
        }
        Ok(Self { values })
    }

    pub fn random_uniform<R: Rng + ?Sized>(tree: &StateTree, rng: &mut R, lo: f64, hi: f64) -> Self {
        Self {
            values: (0..tree.len()).map(|_| rng.gen_range(lo..hi)).collect(),
        }
    }

    pub fn value(&self, id: NodeId) -> f64 {
        self.values[id]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// `r'(s, a) = r(s, a) + Phi(s') - Phi(s)`.
pub fn shape_reward(tree: &StateTree, reward: &RewardTable, phi: &Potential) -> Result<RewardTable> {
    reward.check_shape(tree)?;
    if phi.values.len() != tree.len() {
        return Err(Error::ShapeMismatch("potential does not match tree".into()));
    }
    Ok(ActionTable::from_fn(tree, |id, a| {
        let next = tree.child(id, a).map_or(0.0, |c| phi.values[c]);
        reward.get(id, a) + next - phi.values[id]
    }))
}

/// Optimal advantage `A*(s, a) = Q*(s, a) - beta * log pi_ref(a|s) - V*(s)`.
///
/// The stored `Q*` carries the reference log-probability, so `Q* - V*` alone is
/// `beta * log pi*`; removing the reference term gives the advantage of the
/// reward itself, which vanishes when the reward does.
pub fn advantage_of(tree: &StateTree, sol: &SoftSolution) -> ActionTable {
    ActionTable::from_fn(tree, |id, a| {
        sol.q.get(id, a) - sol.beta * sol.ref_log.get(id, a) - sol.v[id]
    })
}

/// `beta * log(pi*(a|s) / pi_ref(a|s))`, the log-ratio form of the advantage.
pub fn advantage_from_log_ratio(tree: &StateTree, sol: &SoftSolution) -> ActionTable {
    ActionTable::from_fn(tree, |id, a| {
        sol.beta * (ln(sol.pi.get(id, a)) - sol.ref_log.get(id, a))
    })
}

/// `r(s, a) + V*(s') - V*(s)`, the shaped-reward form of the advantage.
pub fn advantage_from_reward(tree: &StateTree, sol: &SoftSolution, reward: &RewardTable) -> ActionTable {
    ActionTable::from_fn(tree, |id, a| {
        reward.get(id, a) + sol.next_value(tree, id, a) - sol.v[id]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::sigmoid;
    use crate::mdp::TokenMdp;
    use crate::policy::{Policy, TabularPolicy};
    use alloc::vec;
    use rand::SeedableRng;

    fn bandit() -> StateTree {
        // responses [eos] and [1, eos]: one decision at the root
        let m = TokenMdp::new(2, 0, 2, vec![vec![]]).unwrap();
        StateTree::build(&m).unwrap()
    }

    #[test]
    fn zero_reward_recovers_reference() {
        let m = TokenMdp::new(3, 0, 3, vec![vec![1], vec![2]]).unwrap();
        let tree = StateTree::build(&m).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let reference = TabularPolicy::random(&tree, 1.0, 1.0, &mut rng);
        let ref_log = reference_log_table(&tree, &reference).unwrap();
        for beta in [0.1, 1.0, 3.0] {
            let sol = solve_soft(&tree, &ActionTable::zeros(&tree), &reference, beta).unwrap();
            for id in 0..tree.len() {
                assert!(sol.v[id].abs() < 1e-12);
                for &a in tree.actions(id) {
                    assert!((sol.pi.get(id, a) - exp(ref_log.get(id, a))).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bandit_closed_form() {
        let tree = bandit();
        let uniform = TabularPolicy::zeros(&tree, 1.0);
        let mut r = ActionTable::zeros(&tree);
        // reward 1 on the empty response, 0 on [1, eos]
        r.set(tree.root(0), 0, 1.0);
        for (beta, p) in [(1.0, 0.7310585786300049), (2.0, 0.6224593312018546)] {
            let sol = solve_soft(&tree, &r, &uniform, beta).unwrap();
            assert!((sol.pi.get(0, 0) - p).abs() < 1e-12);
            assert!((sol.pi.get(0, 1) - (1.0 - p)).abs() < 1e-12);
            assert!((p - sigmoid(1.0 / beta)).abs() < 1e-15);
        }
    }

    #[test]
    fn terminal_consistent_zero_q_inverts_to_zero() {
        let m = TokenMdp::new(3, 2, 3, vec![vec![0]]).unwrap();
        let tree = StateTree::build(&m).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let reference = TabularPolicy::random(&tree, 1.0, 0.5, &mut rng);
        let ref_log = reference_log_table(&tree, &reference).unwrap();
        let beta = 0.7;
        let q = ActionTable::from_fn(&tree, |id, a| beta * ref_log.get(id, a));
        let r = q_to_reward(&tree, &q, &reference, beta).unwrap();
        assert!(r.max_abs_diff(&ActionTable::zeros(&tree), &tree) < 1e-12);
    }

    #[test]
    fn zero_reference_probability_is_rejected() {
        let tree = bandit();
        let mut ref_log = ActionTable::zeros(&tree);
        ref_log.set(0, 1, f64::NEG_INFINITY);
        assert_eq!(
            solve_soft_with_log_ref(&tree, &ActionTable::zeros(&tree), &ref_log, 1.0),
            Err(Error::ZeroReferenceProbability { token: 1 })
        );
        assert!(q_to_reward_with_log_ref(&tree, &ActionTable::zeros(&tree), &ref_log, 1.0).is_err());
    }

    #[test]
    fn potential_rejects_nonzero_terminal() {
        let tree = bandit();
        let err = Potential::from_fn(&tree, |s| if s.terminal { 0.5 } else { 1.0 }).unwrap_err();
        assert_eq!(err, Error::NonzeroTerminalPotential { value: 0.5 });
        let ok = Potential::from_fn(&tree, |s| if s.terminal { 0.0 } else { 1.0 }).unwrap();
        assert_eq!(ok.values(), &[1.0, 1.0]);
    }

    #[test]
    fn zero_potential_is_identity() {
        let tree = bandit();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let r = ActionTable::random_uniform(&tree, &mut rng, -2.0, 2.0);
        assert_eq!(shape_reward(&tree, &r, &Potential::zeros(&tree)).unwrap(), r);
    }

    #[test]
    fn gauge_shift_keeps_state_distribution() {
        let m = TokenMdp::new(4, 0, 3, vec![vec![]]).unwrap();
        let tree = StateTree::build(&m).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let r = ActionTable::random_uniform(&tree, &mut rng, -2.0, 2.0);
        let sol = solve_soft(&tree, &r, &TabularPolicy::zeros(&tree, 1.0), 0.5).unwrap();
        let mut shifted = TabularPolicy::from_solution(&tree, &sol);
        for l in shifted.logits_row_mut(0) {
            *l += 123.0;
        }
        let base = TabularPolicy::from_solution(&tree, &sol);
        let a = base.action_log_probs(&m, &[], &[]);
        let b = shifted.action_log_probs(&m, &[], &[]);
        for (x, y) in a.iter().zip(&b) {
            assert!((exp(*x) - exp(*y)).abs() < 1e-12);
        }
        assert_eq!(base.num_params(), shifted.num_params());
    }
}
