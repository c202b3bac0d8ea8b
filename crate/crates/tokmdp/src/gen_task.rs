//! Synthetic task generation: random dense rewards, contextual bandits, and the
//! corruption benchmark for per-token credit assignment.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokmdp_core::soft_rl::RewardTable;
use tokmdp_core::{StateTree, Token, TokenMdp, DEFAULT_ENUMERATION_CAP};

use crate::error::{Error, Result};
use crate::formats::{dataset_string, reward_table_string, to_json_string, write_text, PairRecord, TaskFile};
use crate::instances::random_prompts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    RandomReward,
    Corruption,
    Bandit,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random-reward" => Ok(Self::RandomReward),
            "corruption" => Ok(Self::Corruption),
            "bandit" => Ok(Self::Bandit),
            other => Err(Error::Config(format!("unknown task kind {other}"))),
        }
    }
}

/// Generator parameters. Fields a kind does not use are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenParams {
    pub vocab_size: usize,
    pub max_response_len: usize,
    pub num_prompts: usize,
    /// Rewards are drawn uniformly from `[-reward_scale, reward_scale]`.
    pub reward_scale: f64,
    /// Number of responses of a bandit task.
    pub responses: usize,
    pub train: usize,
    pub heldout: usize,
    /// Shortest clean response (tokens before EOS) in the corruption task.
    pub min_len: usize,
    /// Reward of emitting the bad token in the corruption task.
    pub bad_penalty: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            vocab_size: 4,
            max_response_len: 3,
            num_prompts: 2,
            reward_scale: 2.0,
            responses: 2,
            train: 500,
            heldout: 100,
            min_len: 3,
            bad_penalty: -3.0,
        }
    }
}

/// Corruption-task token layout: EOS is 0, the bad token is 1, the rest are good.
pub const CORRUPTION_EOS: Token = 0;
pub const CORRUPTION_BAD: Token = 1;

pub struct GeneratedTask {
    pub kind: TaskKind,
    pub tree: StateTree,
    pub reward: RewardTable,
    pub train: Vec<PairRecord>,
    pub heldout: Vec<PairRecord>,
}

pub fn gen_task(kind: TaskKind, params: &GenParams, seed: u64) -> Result<GeneratedTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        TaskKind::RandomReward => random_reward(params, &mut rng),
        TaskKind::Bandit => bandit(params, &mut rng),
        TaskKind::Corruption => corruption(params, &mut rng),
    }
}

fn build_tree(mdp: &TokenMdp) -> Result<StateTree> {
    mdp.check_cap(DEFAULT_ENUMERATION_CAP)?;
    Ok(StateTree::build(mdp)?)
}

fn random_reward(params: &GenParams, rng: &mut ChaCha8Rng) -> Result<GeneratedTask> {
    let prompts = random_prompts(rng, params.vocab_size, params.num_prompts);
    let mdp = TokenMdp::new(params.vocab_size, 0, params.max_response_len, prompts)?;
    let tree = build_tree(&mdp)?;
    let s = params.reward_scale;
    let reward = RewardTable::random_uniform(&tree, rng, -s, s);
    Ok(GeneratedTask {
        kind: TaskKind::RandomReward,
        tree,
        reward,
        train: Vec::new(),
        heldout: Vec::new(),
    })
}

/// `responses` responses `[eos]`, `[1, eos]`, ..., one decision at the root,
/// with the reward placed on the EOS transition.
fn bandit(params: &GenParams, rng: &mut ChaCha8Rng) -> Result<GeneratedTask> {
    if params.responses < 2 {
        return Err(Error::Config("a bandit task needs at least two responses".into()));
    }
    let k = params.responses;
    let prompts = random_prompts(rng, k, params.num_prompts);
    let mdp = TokenMdp::new(k, 0, 2, prompts)?;
    let tree = build_tree(&mdp)?;
    let mut reward = RewardTable::zeros(&tree);
    let s = params.reward_scale;
    for id in 0..tree.len() {
        reward.set(id, 0, rng.gen_range(-s..=s));
    }
    Ok(GeneratedTask {
        kind: TaskKind::Bandit,
        tree,
        reward,
        train: Vec::new(),
        heldout: Vec::new(),
    })
}

fn corruption(params: &GenParams, rng: &mut ChaCha8Rng) -> Result<GeneratedTask> {
    if params.vocab_size < 3 {
        return Err(Error::Config("the corruption task needs EOS, a bad token and at least one good token".into()));
    }
    let max_body = params.max_response_len.saturating_sub(1);
    if params.min_len == 0 || params.min_len > max_body {
        return Err(Error::Config(format!(
            "min_len must lie in 1..={max_body} for max_response_len {}",
            params.max_response_len
        )));
    }
    let good = |rng: &mut ChaCha8Rng| rng.gen_range(2..params.vocab_size) as Token;
    let mut prompts: Vec<Vec<Token>> = Vec::new();
    while prompts.len() < params.num_prompts {
        let p: Vec<Token> = (0..2).map(|_| good(rng)).collect();
        if !prompts.contains(&p) {
            prompts.push(p);
        }
    }
    let mdp = TokenMdp::new(params.vocab_size, CORRUPTION_EOS, params.max_response_len, prompts.clone())?;
    let tree = build_tree(&mdp)?;
    let reward = RewardTable::from_fn(&tree, |_, a| if a == CORRUPTION_BAD { params.bad_penalty } else { 0.0 });

    let draw = |rng: &mut ChaCha8Rng| {
        let prompt = prompts[rng.gen_range(0..prompts.len())].clone();
        let len = rng.gen_range(params.min_len..=max_body);
        let mut chosen: Vec<Token> = (0..len).map(|_| good(rng)).collect();
        let index = rng.gen_range(0..len);
        let mut rejected = chosen.clone();
        rejected[index] = CORRUPTION_BAD;
        chosen.push(CORRUPTION_EOS);
        rejected.push(CORRUPTION_EOS);
        PairRecord {
            prompt,
            chosen,
            rejected,
            corrupted_index: Some(index),
        }
    };
    let train: Vec<PairRecord> = (0..params.train).map(|_| draw(rng)).collect();
    let seen: BTreeSet<(Vec<Token>, Vec<Token>)> = train.iter().map(|r| (r.prompt.clone(), r.rejected.clone())).collect();
    let mut heldout = Vec::with_capacity(params.heldout);
    let mut attempts = 0usize;
    while heldout.len() < params.heldout {
        attempts += 1;
        if attempts > 1000 * (params.heldout + 1) {
            return Err(Error::Config("could not draw enough unseen held-out responses".into()));
        }
        let r = draw(rng);
        if !seen.contains(&(r.prompt.clone(), r.rejected.clone())) {
            heldout.push(r);
        }
    }
    Ok(GeneratedTask {
        kind: TaskKind::Corruption,
        tree,
        reward,
        train,
        heldout,
    })
}

impl GeneratedTask {
    pub fn mdp(&self) -> &TokenMdp {
        self.tree.mdp()
    }

    /// Files keyed by name: `task.json`, `reward.jsonl`, and for the corruption
    /// kind `train.jsonl` and `heldout.jsonl`.
    pub fn files(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![
            ("task.json", to_json_string(&TaskFile::from_mdp(self.mdp()))),
            ("reward.jsonl", reward_table_string(&self.tree, &self.reward, 0.0)),
        ];
        if self.kind == TaskKind::Corruption {
            out.push(("train.jsonl", dataset_string(&self.train)));
            out.push(("heldout.jsonl", dataset_string(&self.heldout)));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, text) in self.files() {
            write_text(&dir.join(name), &text)?;
        }
        Ok(())
    }
}
