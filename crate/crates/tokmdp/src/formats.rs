//! On-disk formats. Every file carries a `schema` tag: JSON documents hold it as
//! a field, JSON Lines files start with a `{"schema": ...}` header line, and CSV
//! files start with a `# schema: ...` comment.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokmdp_core::dpo::StepRecord;
use tokmdp_core::preference::BanditRewardModel;
use tokmdp_core::soft_rl::RewardTable;
use tokmdp_core::{validate_pair, LabelSource, PreferencePair, StateTree, Token, TokenMdp};

use crate::error::{io_err, Error, Result};

pub const TASK_SCHEMA: &str = "tokmdp.task.v1";
pub const DATASET_SCHEMA: &str = "tokmdp.dataset.v1";
pub const REWARD_SCHEMA: &str = "tokmdp.reward.v1";
pub const BANDIT_SCHEMA: &str = "tokmdp.bandit.v1";
pub const DIAGNOSTICS_SCHEMA: &str = "tokmdp.diagnostics.v1";
pub const DECODE_SCHEMA: &str = "tokmdp.decode.v1";
pub const LOSSES_SCHEMA: &str = "tokmdp.sft-losses.v1";
pub const VALUES_SCHEMA: &str = "tokmdp.values.v1";

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })
}

pub fn to_json_string<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("in-memory serialization");
    s.push('\n');
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json_string(value))
}

fn check_schema(found: &str, expected: &str) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(Error::UnsupportedVersion {
            expected: expected.into(),
            found: found.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFile {
    #[serde(default = "task_schema")]
    pub schema: String,
    pub vocab_size: usize,
    pub eos_id: Token,
    pub max_response_len: usize,
    pub prompts: Vec<Vec<Token>>,
}

fn task_schema() -> String {
    TASK_SCHEMA.into()
}

impl TaskFile {
    pub fn from_mdp(mdp: &TokenMdp) -> Self {
        Self {
            schema: TASK_SCHEMA.into(),
            vocab_size: mdp.vocab_size(),
            eos_id: mdp.eos(),
            max_response_len: mdp.max_response_len(),
            prompts: mdp.prompts().to_vec(),
        }
    }

    pub fn to_mdp(&self) -> Result<TokenMdp> {
        check_schema(&self.schema, TASK_SCHEMA)?;
        Ok(TokenMdp::new(
            self.vocab_size,
            self.eos_id,
            self.max_response_len,
            self.prompts.clone(),
        )?)
    }
}

pub fn read_task(path: &Path) -> Result<TokenMdp> {
    read_json::<TaskFile>(path)?.to_mdp()
}

pub fn write_task(path: &Path, mdp: &TokenMdp) -> Result<()> {
    write_json(path, &TaskFile::from_mdp(mdp))
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    default: Option<f64>,
}

/// Reads a JSON Lines file, checking the header and parsing each record.
fn read_jsonl<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<(Header, Vec<T>)> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut header = None;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let context = || format!("{}:{}", path.display(), n + 1);
        if header.is_none() {
            let h: Header = serde_json::from_str(&line).map_err(|source| Error::Json {
                context: context(),
                source,
            })?;
            check_schema(&h.schema, schema)?;
            header = Some(h);
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| Error::Json {
            context: context(),
            source,
        })?);
    }
    let header = header.ok_or_else(|| Error::Format(format!("{}: missing schema header", path.display())))?;
    Ok((header, out))
}

fn jsonl_string<T: Serialize>(header: &Header, records: &[T]) -> String {
    let mut s = serde_json::to_string(header).expect("in-memory serialization");
    s.push('\n');
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("in-memory serialization"));
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub prompt: Vec<Token>,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
    /// Position in `rejected` that was corrupted, for the credit-assignment benchmark.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrupted_index: Option<usize>,
}

impl PairRecord {
    pub fn to_pair(&self, label_source: LabelSource) -> PreferencePair {
        PreferencePair {
            prompt: self.prompt.clone(),
            chosen: self.chosen.clone(),
            rejected: self.rejected.clone(),
            label_source,
        }
    }
}

impl From<&PreferencePair> for PairRecord {
    fn from(p: &PreferencePair) -> Self {
        Self {
            prompt: p.prompt.clone(),
            chosen: p.chosen.clone(),
            rejected: p.rejected.clone(),
            corrupted_index: None,
        }
    }
}

/// Reads a preference dataset; responses that are not EOS-terminated or
/// otherwise invalid for `mdp` are rejected.
pub fn read_dataset(path: &Path, mdp: &TokenMdp) -> Result<Vec<PairRecord>> {
    let (_, records) = read_jsonl::<PairRecord>(path, DATASET_SCHEMA)?;
    for (i, r) in records.iter().enumerate() {
        validate_pair(mdp, &r.to_pair(LabelSource::Fixed))
            .map_err(|e| Error::Format(format!("{} record {}: {e}", path.display(), i + 1)))?;
    }
    Ok(records)
}

pub fn dataset_string(records: &[PairRecord]) -> String {
    jsonl_string(
        &Header {
            schema: DATASET_SCHEMA.into(),
            default: None,
        },
        records,
    )
}

pub fn write_dataset(path: &Path, records: &[PairRecord]) -> Result<()> {
    write_text(path, &dataset_string(records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RewardRecord {
    prompt: usize,
    prefix: Vec<Token>,
    action: Token,
    reward: f64,
}

/// Writes every entry that differs from `default`.
pub fn reward_table_string(tree: &StateTree, table: &RewardTable, default: f64) -> String {
    let mut records = Vec::new();
    for id in 0..tree.len() {
        let node = tree.node(id);
        for &a in tree.actions(id) {
            let r = table.get(id, a);
            if r != default {
                records.push(RewardRecord {
                    prompt: node.prompt,
                    prefix: node.prefix.clone(),
                    action: a,
                    reward: r,
                });
            }
        }
    }
    jsonl_string(
        &Header {
            schema: REWARD_SCHEMA.into(),
            default: Some(default),
        },
        &records,
    )
}

pub fn write_reward_table(path: &Path, tree: &StateTree, table: &RewardTable) -> Result<()> {
    write_text(path, &reward_table_string(tree, table, 0.0))
}

pub fn read_reward_table(path: &Path, tree: &StateTree) -> Result<RewardTable> {
    let (header, records) = read_jsonl::<RewardRecord>(path, REWARD_SCHEMA)?;
    let mut table = RewardTable::filled(tree, f64::NEG_INFINITY);
    let default = header.default.unwrap_or(0.0);
    for id in 0..tree.len() {
        for &a in tree.actions(id) {
            table.set(id, a, default);
        }
    }
    for r in records {
        let id = if r.prompt < tree.num_prompts() {
            tree.lookup_in(r.prompt, &r.prefix)
        } else {
            None
        };
        let id = id
            .filter(|&id| tree.actions(id).contains(&r.action))
            .ok_or_else(|| {
                Error::Format(format!(
                    "{}: no state-action pair for prompt {} prefix {:?} action {}",
                    path.display(),
                    r.prompt,
                    r.prefix,
                    r.action
                ))
            })?;
        table.set(id, r.action, r.reward);
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditFile {
    pub schema: String,
    pub l2_strength: f64,
    /// Rewards are shifted to mean zero within each prompt.
    pub mean_centered: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    pub entries: Vec<BanditEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditEntry {
    pub prompt: usize,
    pub response: Vec<Token>,
    pub reward: f64,
}

impl BanditFile {
    pub fn from_model(model: &BanditRewardModel) -> Self {
        let mut entries = Vec::new();
        for (p, (responses, values)) in model.responses.iter().zip(&model.values).enumerate() {
            for (y, &r) in responses.iter().zip(values) {
                entries.push(BanditEntry {
                    prompt: p,
                    response: y.response.clone(),
                    reward: r,
                });
            }
        }
        Self {
            schema: BANDIT_SCHEMA.into(),
            l2_strength: model.l2_strength,
            mean_centered: true,
            iterations: model.iterations,
            grad_norm: model.grad_norm,
            entries,
        }
    }
}

pub fn diagnostics_string(records: &[StepRecord]) -> Result<String> {
    let mut out = format!("# schema: {DIAGNOSTICS_SCHEMA}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record([
            "step",
            "loss",
            "chosen_ir",
            "rejected_ir",
            "margin",
            "expected_logratio",
            "running_chosen_ir",
            "running_rejected_ir",
        ])?;
        for r in records {
            w.write_record([
                r.step.to_string(),
                r.loss.to_string(),
                r.chosen_ir.to_string(),
                r.rejected_ir.to_string(),
                r.margin.to_string(),
                r.expected_logratio.map(|x| x.to_string()).unwrap_or_default(),
                r.running_chosen_ir.to_string(),
                r.running_rejected_ir.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(String::from_utf8(out).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeLine {
    pub schema: String,
    pub prompt: Vec<Token>,
    pub ranked: Vec<RankedResponse>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResponse {
    pub response: Vec<Token>,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub implicit_rewards: Option<Vec<f64>>,
}

pub fn decode_string(lines: &[DecodeLine]) -> String {
    let mut s = String::new();
    for l in lines {
        s.push_str(&serde_json::to_string(l).expect("in-memory serialization"));
        s.push('\n');
    }
    s
}

/// One row per epoch: the full-corpus loss measured before that epoch's update.
pub fn losses_string(losses: &[f64]) -> Result<String> {
    let mut out = format!("# schema: {LOSSES_SCHEMA}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["epoch", "loss"])?;
        for (i, l) in losses.iter().enumerate() {
            w.write_record([i.to_string(), l.to_string()])?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(String::from_utf8(out).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ValueRecord {
    prompt: usize,
    prefix: Vec<Token>,
    value: f64,
}

/// Soft values of every nonterminal state.
pub fn values_string(tree: &StateTree, values: &[f64]) -> String {
    let records: Vec<ValueRecord> = (0..tree.len())
        .map(|id| ValueRecord {
            prompt: tree.node(id).prompt,
            prefix: tree.node(id).prefix.clone(),
            value: values[id],
        })
        .collect();
    jsonl_string(
        &Header {
            schema: VALUES_SCHEMA.into(),
            default: None,
        },
        &records,
    )
}

/// Schema tag of any file this crate writes: a JSON `schema` field, a JSON
/// Lines header, or a `# schema:` CSV comment.
pub fn detect_schema(text: &str) -> Option<String> {
    if let Some(rest) = text.lines().next().and_then(|l| l.strip_prefix("# schema: ")) {
        return Some(rest.trim().to_string());
    }
    let field = |v: serde_json::Value| v.get("schema").and_then(|s| s.as_str()).map(str::to_string);
    if let Ok(v) = serde_json::from_str::<serde_json::Value>(text) {
        return field(v);
    }
    text.lines()
        .next()
        .and_then(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .and_then(field)
}
