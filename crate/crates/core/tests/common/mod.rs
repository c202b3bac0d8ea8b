//! Seeded random instances and brute-force oracles that never touch the
//! backward-induction solver.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokmdp_core::policy::{ActionDist, TabularPolicy};
use tokmdp_core::soft_rl::{ActionTable, RewardTable};
use tokmdp_core::{enumerate_responses, step, StateTree, Token, TokenMdp, Trajectory};

pub type RewardMap = BTreeMap<(usize, Vec<Token>, Token), f64>;

pub struct Instance {
    pub mdp: TokenMdp,
    pub tree: StateTree,
    pub reference: TabularPolicy,
    pub reward_map: RewardMap,
    pub reward: RewardTable,
    pub beta: f64,
}

pub struct Shape {
    pub vocab: (usize, usize),
    pub horizon: (usize, usize),
    pub prompts: (usize, usize),
}

pub const SMALL: Shape = Shape {
    vocab: (2, 5),
    horizon: (1, 4),
    prompts: (1, 2),
};

pub fn random_mdp(rng: &mut ChaCha8Rng, shape: &Shape) -> TokenMdp {
    let vocab = rng.gen_range(shape.vocab.0..=shape.vocab.1);
    let horizon = rng.gen_range(shape.horizon.0..=shape.horizon.1);
    let n_prompts = rng.gen_range(shape.prompts.0..=shape.prompts.1);
    let eos = rng.gen_range(0..vocab) as Token;
    let prompts: Vec<Vec<Token>> = (0..n_prompts).map(|i| vec![i as Token; i + 1]).collect();
    TokenMdp::new(vocab, eos, horizon, prompts).unwrap()
}

/// Reward keyed by every (prompt, prefix, action) along enumerated responses.
pub fn random_reward_map(mdp: &TokenMdp, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> RewardMap {
    let mut map = RewardMap::new();
    for (p, prompt) in mdp.prompts().iter().enumerate() {
        for y in enumerate_responses(mdp, prompt).unwrap() {
            for t in 0..y.response.len() {
                map.entry((p, y.response[..t].to_vec(), y.response[t]))
                    .or_insert_with(|| rng.gen_range(lo..hi));
            }
        }
    }
    map
}

pub fn table_from_map(tree: &StateTree, map: &RewardMap) -> RewardTable {
    ActionTable::from_fn(tree, |id, a| {
        let node = tree.node(id);
        map[&(node.prompt, node.prefix.clone(), a)]
    })
}

pub fn instance(seed: u64, shape: &Shape) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mdp = random_mdp(&mut rng, shape);
    let tree = StateTree::build(&mdp).unwrap();
    let reference = TabularPolicy::random(&tree, 1.0, 1.0, &mut rng);
    let reward_map = random_reward_map(&mdp, &mut rng, -2.0, 2.0);
    let reward = table_from_map(&tree, &reward_map);
    let beta = rng.gen_range(0.5..2.0);
    Instance {
        mdp,
        tree,
        reference,
        reward_map,
        reward,
        beta,
    }
}

/// Return accumulated by stepping the MDP and reading the map.
pub fn oracle_return(mdp: &TokenMdp, map: &RewardMap, traj: &Trajectory) -> f64 {
    let p = mdp.prompt_index(&traj.prompt).unwrap();
    let mut state = mdp.initial_state(p);
    let mut total = 0.0;
    for &a in &traj.response {
        total += map[&(p, state.generated.clone(), a)];
        state = step(mdp, &state, a).unwrap();
    }
    assert!(state.terminal);
    total
}

pub fn oracle_logprob<D: ActionDist + ?Sized>(pi: &D, mdp: &TokenMdp, traj: &Trajectory) -> f64 {
    (0..traj.response.len())
        .map(|t| pi.action_log_probs(mdp, &traj.prompt, &traj.response[..t])[traj.response[t] as usize])
        .sum()
}

/// Sequence-level optimum `pi*(y) ∝ pi_ref(y) exp(R(y) / beta)`, normalized in log space.
pub fn oracle_sequence_optimum(inst: &Instance, prompt: usize) -> (Vec<Trajectory>, Vec<f64>, f64) {
    let ys = enumerate_responses(&inst.mdp, &inst.mdp.prompts()[prompt]).unwrap();
    let scores: Vec<f64> = ys
        .iter()
        .map(|y| oracle_return(&inst.mdp, &inst.reward_map, y) / inst.beta + oracle_logprob(&inst.reference, &inst.mdp, y))
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    let probs = scores.iter().map(|s| (s - log_z).exp()).collect();
    (ys, probs, inst.beta * log_z)
}

/// Token-level optimum by marginalizing the sequence-level one.
pub fn oracle_token_probs(inst: &Instance, prompt: usize, prefix: &[Token]) -> Vec<f64> {
    let (ys, probs, _) = oracle_sequence_optimum(inst, prompt);
    let mut out = vec![0.0; inst.mdp.vocab_size()];
    let mut total = 0.0;
    for (y, p) in ys.iter().zip(&probs) {
        if y.response.len() > prefix.len() && y.response.starts_with(prefix) {
            out[y.response[prefix.len()] as usize] += p;
            total += p;
        }
    }
    out.iter().map(|x| x / total).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
