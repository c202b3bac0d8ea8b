//! Seeded random instances shared by the verification suite and the task generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokmdp_core::policy::TabularPolicy;
use tokmdp_core::soft_rl::RewardTable;
use tokmdp_core::{StateTree, Token, TokenMdp};

use crate::Result;

/// Inclusive ranges for the random dimensions of an instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceShape {
    pub vocab: (usize, usize),
    pub horizon: (usize, usize),
    pub prompts: (usize, usize),
    pub reward: (f64, f64),
    pub beta: (f64, f64),
}

impl Default for InstanceShape {
    fn default() -> Self {
        Self {
            vocab: (2, 5),
            horizon: (1, 4),
            prompts: (1, 2),
            reward: (-2.0, 2.0),
            beta: (0.5, 2.0),
        }
    }
}

pub struct Instance {
    pub tree: StateTree,
    pub reference: TabularPolicy,
    pub reward: RewardTable,
    pub beta: f64,
}

impl Instance {
    pub fn mdp(&self) -> &TokenMdp {
        self.tree.mdp()
    }
}

/// Distinct prompts of length 1..=2 over non-EOS tokens where possible.
pub fn random_prompts(rng: &mut ChaCha8Rng, vocab: usize, count: usize) -> Vec<Vec<Token>> {
    let mut out: Vec<Vec<Token>> = Vec::new();
    while out.len() < count {
        let len = 1 + out.len() / vocab.max(1) + rng.gen_range(0..2);
        let p: Vec<Token> = (0..len).map(|_| rng.gen_range(0..vocab) as Token).collect();
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

pub fn random_instance(seed: u64, shape: &InstanceShape) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = rng.gen_range(shape.vocab.0..=shape.vocab.1);
    let horizon = rng.gen_range(shape.horizon.0..=shape.horizon.1);
    let n_prompts = rng.gen_range(shape.prompts.0..=shape.prompts.1);
    let eos = rng.gen_range(0..vocab) as Token;
    let prompts = random_prompts(&mut rng, vocab, n_prompts);
    let mdp = TokenMdp::new(vocab, eos, horizon, prompts)?;
    let tree = StateTree::build(&mdp)?;
    let reference = TabularPolicy::random(&tree, 1.0, 1.0, &mut rng);
    let reward = RewardTable::random_uniform(&tree, &mut rng, shape.reward.0, shape.reward.1);
    let beta = rng.gen_range(shape.beta.0..=shape.beta.1);
    Ok(Instance {
        tree,
        reference,
        reward,
        beta,
    })
}
