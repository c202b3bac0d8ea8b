//! Versioned policy checkpoints with a SHA-256 content hash.
//!
//! Parameters are stored as JSON numbers; the shortest round-trip
//! representation together with exact float parsing makes save/load bitwise.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokmdp_core::policy::{AnyPolicy, Policy, TabularPolicy, TinySeqConfig, TinySeqPolicy};
use tokmdp_core::StateTree;

use crate::error::{Error, Result};
use crate::formats::{read_json, to_json_string, write_text, TaskFile};

pub const CHECKPOINT_SCHEMA: &str = "tokmdp.checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    /// The task is stored so the state tree can be rebuilt on load.
    Tabular { task: TaskFile },
    TinySeq {
        vocab_size: usize,
        embed_dim: usize,
        window: usize,
        hidden: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: String,
    pub version: u32,
    pub model: ModelSpec,
    pub temperature: f64,
    pub params: Vec<f64>,
    pub hash: String,
}

fn model_spec(policy: &AnyPolicy) -> ModelSpec {
    match policy {
        AnyPolicy::Tabular(p) => ModelSpec::Tabular {
            task: TaskFile::from_mdp(p.tree().mdp()),
        },
        AnyPolicy::TinySeq(p) => {
            let c = p.config();
            ModelSpec::TinySeq {
                vocab_size: p.vocab_size(),
                embed_dim: c.embed_dim,
                window: c.window,
                hidden: c.hidden,
            }
        }
    }
}

fn digest(model: &ModelSpec, temperature: f64, params: &[f64]) -> String {
    let mut h = Sha256::new();
    h.update(format!("{CHECKPOINT_SCHEMA}/{CHECKPOINT_VERSION}\n").as_bytes());
    h.update(serde_json::to_string(model).expect("in-memory serialization").as_bytes());
    h.update(temperature.to_bits().to_le_bytes());
    h.update((params.len() as u64).to_le_bytes());
    for p in params {
        h.update(p.to_bits().to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the policy's kind, hyperparameters, temperature and parameter bits.
pub fn content_hash(policy: &AnyPolicy) -> String {
    digest(&model_spec(policy), policy.temperature(), policy.params())
}

impl Checkpoint {
    pub fn from_policy(policy: &AnyPolicy) -> Self {
        let model = model_spec(policy);
        let hash = digest(&model, policy.temperature(), policy.params());
        Self {
            schema: CHECKPOINT_SCHEMA.into(),
            version: CHECKPOINT_VERSION,
            model,
            temperature: policy.temperature(),
            params: policy.params().to_vec(),
            hash,
        }
    }

    /// Checks version and hash, then rebuilds the policy.
    pub fn into_policy(self) -> Result<AnyPolicy> {
        if self.schema != CHECKPOINT_SCHEMA || self.version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                expected: format!("{CHECKPOINT_SCHEMA} v{CHECKPOINT_VERSION}"),
                found: format!("{} v{}", self.schema, self.version),
            });
        }
        let computed = digest(&self.model, self.temperature, &self.params);
        if computed != self.hash {
            return Err(Error::HashMismatch {
                stored: self.hash,
                computed,
            });
        }
        Ok(match self.model {
            ModelSpec::Tabular { task } => {
                let tree = StateTree::build(&task.to_mdp()?)?;
                AnyPolicy::Tabular(TabularPolicy::from_logits(&tree, self.temperature, self.params)?)
            }
            ModelSpec::TinySeq {
                vocab_size,
                embed_dim,
                window,
                hidden,
            } => {
                let config = TinySeqConfig {
                    embed_dim,
                    window,
                    hidden,
                };
                AnyPolicy::TinySeq(TinySeqPolicy::from_params(config, vocab_size, self.temperature, self.params)?)
            }
        })
    }
}

pub fn checkpoint_string(policy: &AnyPolicy) -> String {
    to_json_string(&Checkpoint::from_policy(policy))
}

pub fn save_checkpoint(path: &Path, policy: &AnyPolicy) -> Result<()> {
    write_text(path, &checkpoint_string(policy))
}

pub fn load_checkpoint(path: &Path) -> Result<AnyPolicy> {
    read_json::<Checkpoint>(path)?.into_policy()
}
