//! Command-line front end.
//!
//! Every subcommand reads its settings from an optional JSON config file
//! (`--config`), whose keys are the snake_case field names below; flags given
//! on the command line override the file. Runs are pure functions of the
//! resolved settings, so a fixed seed and config reproduce outputs byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokmdp_core::decode::{beam_search, greedy, guided_search, sample_response, Hypothesis};
use tokmdp_core::dpo::{dpo_train, implicit_token_rewards, DpoConfig, DpoMode, PreferenceData};
use tokmdp_core::optim::OptimizerConfig;
use tokmdp_core::policy::{logprob, sft_train, AnyPolicy, Policy, PolicyKind, TabularPolicy, TinySeqConfig, TinySeqPolicy, TrainConfig};
use tokmdp_core::preference::{exact_preference_data, sample_preferences, BanditFitConfig, PairSampler};
use tokmdp_core::soft_rl::solve_soft;
use tokmdp_core::{LabelSource, StateTree, TokenMdp, Trajectory, DEFAULT_ENUMERATION_CAP};

use crate::checkpoint::{content_hash, load_checkpoint, save_checkpoint, Checkpoint};
use crate::compare::{compare_classical_rlhf, CompareConfig};
use crate::error::{io_err, Error, Result};
use crate::formats::{
    decode_string, detect_schema, diagnostics_string, losses_string, read_dataset, read_json, read_reward_table,
    read_task, to_json_string, values_string, write_dataset, write_json, write_text, DecodeLine, PairRecord,
    RankedResponse, TaskFile, DECODE_SCHEMA,
};
use crate::gen_task::{gen_task, GenParams, TaskKind};
use crate::heatmap::{render_rows, HeatmapFormat, HeatmapRow, Legend};
use crate::verify::{run_verify_suite, Scope, ToleranceManifest};

#[derive(Debug, Parser)]
#[command(name = "tokmdp", version, about = "Token-level preference optimization on small tree MDPs")]
pub struct Cli {
    /// JSON config file; command-line flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic task with its ground-truth reward.
    GenTask(GenTaskArgs),
    /// Sample Bradley-Terry labelled preference pairs from a reward table.
    SamplePrefs(SamplePrefsArgs),
    /// Supervised fine-tuning on the chosen responses of a dataset.
    Sft(SftArgs),
    /// Token-level DPO against a frozen reference.
    DpoTrain(DpoTrainArgs),
    /// Exact KL-regularized optimum of a reward table.
    Solve(SolveArgs),
    /// Sampling, greedy, beam or value-guided decoding.
    Decode(DecodeArgs),
    /// Summarize and validate any file this tool writes.
    Inspect(InspectArgs),
    /// Run the verification batteries; exits 1 if any check fails.
    Verify(VerifyArgs),
    /// Compare classical RLHF with DPO on the same preference data.
    CompareRlhf(CompareArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenTaskArgs {
    /// random-reward, corruption or bandit
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub max_response_len: Option<usize>,
    #[arg(long)]
    pub num_prompts: Option<usize>,
    #[arg(long)]
    pub reward_scale: Option<f64>,
    #[arg(long)]
    pub responses: Option<usize>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub heldout: Option<usize>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub bad_penalty: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplePrefsArgs {
    #[arg(long)]
    pub task: Option<PathBuf>,
    #[arg(long)]
    pub reward: Option<PathBuf>,
    /// Reference checkpoint; uniform when absent.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// reference or uniform
    #[arg(long)]
    pub sampler: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Optimizer settings shared by the training commands.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimArgs {
    /// sgd or adam
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftArgs {
    #[arg(long)]
    pub task: Option<PathBuf>,
    /// Preference dataset whose chosen responses form the corpus.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to start from; a fresh policy when absent.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// tabular or tiny-seq
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Standard deviation of the fresh tiny-seq weights.
    #[arg(long)]
    pub init_std: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub optim: OptimArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoTrainArgs {
    #[arg(long)]
    pub task: Option<PathBuf>,
    /// Preference dataset for sampled mode.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Train on every pair weighted by its exact preference probability under `reward`.
    #[arg(long, action = clap::ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    pub exact: Option<bool>,
    #[arg(long)]
    pub reward: Option<PathBuf>,
    /// Reference checkpoint; a uniform tabular policy when absent.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Starting checkpoint; a copy of the reference when absent.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub optim: OptimArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Expected log-ratio diagnostic period in steps; 0 disables it.
    #[arg(long)]
    pub diagnostics_every: Option<usize>,
    /// Checkpoint period in steps; 0 disables periodic checkpoints.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveArgs {
    #[arg(long)]
    pub task: Option<PathBuf>,
    #[arg(long)]
    pub reward: Option<PathBuf>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeArgs {
    #[arg(long)]
    pub task: Option<PathBuf>,
    /// Policy checkpoint; not used by guided search.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Reference checkpoint; enables per-token implicit rewards.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Reward table for guided search.
    #[arg(long)]
    pub reward: Option<PathBuf>,
    /// beam, greedy, sample or guided
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also render the ranked responses' implicit rewards here.
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
    /// html or ansi
    #[arg(long)]
    pub heatmap_format: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InspectArgs {
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyArgs {
    /// all, inverse, shaping, bt_policy, guided or kl_identity
    #[arg(long)]
    pub scope: Option<String>,
    /// Number of seeded instances per battery.
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Tolerance manifest; the bundled one when absent.
    #[arg(long)]
    pub tolerances: Option<PathBuf>,
    /// JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareArgs {
    #[arg(long)]
    pub task: Option<PathBuf>,
    #[arg(long)]
    pub reward: Option<PathBuf>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, action = clap::ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    pub exact: Option<bool>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// L2 penalty of the bandit reward fit.
    #[arg(long)]
    pub l2: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub optim: OptimArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON report path; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Lays the flags that were given over the config file's keys.
pub fn overlay<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>) -> Result<T> {
    let Some(path) = config else {
        let v = serde_json::to_value(flags).expect("in-memory serialization");
        return Ok(serde_json::from_value(v).expect("round trip of own type"));
    };
    let mut base: serde_json::Value = read_json(path)?;
    let obj = base
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("{}: config must be a JSON object", path.display())))?;
    if let serde_json::Value::Object(given) = serde_json::to_value(flags).expect("in-memory serialization") {
        for (k, v) in given {
            if !v.is_null() {
                obj.insert(k, v);
            }
        }
    }
    serde_json::from_value(base).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })
}

fn required<T: Clone>(v: &Option<T>, name: &str) -> Result<T> {
    v.clone().ok_or_else(|| Error::Config(format!("missing required setting `{name}`")))
}

/// Runs one command; `Ok(false)` means the run completed but a check failed.
pub fn run(cli: Cli) -> Result<bool> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::GenTask(a) => gen_task_cmd(overlay(&a, config)?),
        Command::SamplePrefs(a) => sample_prefs_cmd(overlay(&a, config)?),
        Command::Sft(a) => sft_cmd(overlay(&a, config)?),
        Command::DpoTrain(a) => dpo_train_cmd(overlay(&a, config)?),
        Command::Solve(a) => solve_cmd(overlay(&a, config)?),
        Command::Decode(a) => decode_cmd(overlay(&a, config)?),
        Command::Inspect(a) => inspect_cmd(overlay(&a, config)?),
        Command::Verify(a) => verify_cmd(overlay(&a, config)?),
        Command::CompareRlhf(a) => compare_cmd(overlay(&a, config)?),
    }
}

fn enumerable_tree(mdp: &TokenMdp) -> Option<StateTree> {
    mdp.check_cap(DEFAULT_ENUMERATION_CAP).ok()?;
    StateTree::build(mdp).ok()
}

fn build_tree(mdp: &TokenMdp) -> Result<StateTree> {
    mdp.check_cap(DEFAULT_ENUMERATION_CAP)?;
    Ok(StateTree::build(mdp)?)
}

/// Loads a checkpoint and checks it was made for `mdp`.
fn load_policy_for(path: &Path, mdp: &TokenMdp) -> Result<AnyPolicy> {
    let policy = load_checkpoint(path)?;
    let ok = match &policy {
        AnyPolicy::Tabular(p) => TaskFile::from_mdp(p.tree().mdp()) == TaskFile::from_mdp(mdp),
        AnyPolicy::TinySeq(p) => p.vocab_size() == mdp.vocab_size(),
    };
    if !ok {
        return Err(Error::Config(format!("{}: checkpoint does not match the task", path.display())));
    }
    Ok(policy)
}

/// The given reference checkpoint, or a uniform tabular policy over the task.
fn reference_or_uniform(path: &Option<PathBuf>, mdp: &TokenMdp) -> Result<AnyPolicy> {
    match path {
        Some(p) => load_policy_for(p, mdp),
        None => Ok(AnyPolicy::Tabular(TabularPolicy::zeros(&build_tree(mdp)?, 1.0))),
    }
}

fn optimizer(o: &OptimArgs, kind: PolicyKind) -> Result<OptimizerConfig> {
    let default = OptimizerConfig::default_for(kind);
    let lr = o.lr.unwrap_or(default.lr());
    match o.optimizer.as_deref().unwrap_or("sgd") {
        "sgd" => Ok(OptimizerConfig::sgd(lr)),
        "adam" => Ok(OptimizerConfig::adam(lr)),
        other => Err(Error::Config(format!("unknown optimizer {other}"))),
    }
}

fn resolve_optim(o: &OptimArgs, kind: PolicyKind, epochs: usize) -> OptimArgs {
    OptimArgs {
        optimizer: Some(o.optimizer.clone().unwrap_or_else(|| "sgd".into())),
        lr: Some(o.lr.unwrap_or(OptimizerConfig::default_for(kind).lr())),
        epochs: Some(o.epochs.unwrap_or(epochs)),
        batch_size: o.batch_size,
    }
}

fn gen_task_cmd(a: GenTaskArgs) -> Result<bool> {
    let d = GenParams::default();
    let params = GenParams {
        vocab_size: a.vocab_size.unwrap_or(d.vocab_size),
        max_response_len: a.max_response_len.unwrap_or(d.max_response_len),
        num_prompts: a.num_prompts.unwrap_or(d.num_prompts),
        reward_scale: a.reward_scale.unwrap_or(d.reward_scale),
        responses: a.responses.unwrap_or(d.responses),
        train: a.train.unwrap_or(d.train),
        heldout: a.heldout.unwrap_or(d.heldout),
        min_len: a.min_len.unwrap_or(d.min_len),
        bad_penalty: a.bad_penalty.unwrap_or(d.bad_penalty),
    };
    let kind = TaskKind::parse(&required(&a.kind, "kind")?)?;
    let task = gen_task(kind, &params, a.seed.unwrap_or(0))?;
    task.write(&required(&a.out, "out")?)?;
    Ok(true)
}

fn sample_prefs_cmd(a: SamplePrefsArgs) -> Result<bool> {
    let mdp = read_task(&required(&a.task, "task")?)?;
    let tree = build_tree(&mdp)?;
    let reward = read_reward_table(&required(&a.reward, "reward")?, &tree)?;
    let reference = reference_or_uniform(&a.reference, &mdp)?;
    let sampler = match a.sampler.as_deref().unwrap_or("reference") {
        "reference" => PairSampler::Reference,
        "uniform" => PairSampler::Uniform,
        other => return Err(Error::Config(format!("unknown sampler {other}"))),
    };
    let pairs = sample_preferences(&tree, &reward, &reference, a.n.unwrap_or(1000), a.seed.unwrap_or(0), sampler)?;
    let records: Vec<PairRecord> = pairs.iter().map(PairRecord::from).collect();
    write_dataset(&required(&a.out, "out")?, &records)?;
    Ok(true)
}

fn fresh_policy(a: &SftArgs, mdp: &TokenMdp, kind: PolicyKind) -> Result<AnyPolicy> {
    let temperature = a.temperature.unwrap_or(1.0);
    Ok(match kind {
        PolicyKind::Tabular => AnyPolicy::Tabular(TabularPolicy::zeros(&build_tree(mdp)?, temperature)),
        PolicyKind::TinySeq => {
            let d = TinySeqConfig::default();
            let config = TinySeqConfig {
                embed_dim: a.embed_dim.unwrap_or(d.embed_dim),
                window: a.window.unwrap_or(d.window),
                hidden: a.hidden.unwrap_or(d.hidden),
            };
            AnyPolicy::TinySeq(TinySeqPolicy::with_init_std(
                config,
                mdp.vocab_size(),
                temperature,
                a.init_std.unwrap_or(0.02),
                a.seed.unwrap_or(0),
            ))
        }
    })
}

fn parse_kind(s: &str) -> Result<PolicyKind> {
    match s {
        "tabular" => Ok(PolicyKind::Tabular),
        "tiny-seq" => Ok(PolicyKind::TinySeq),
        other => Err(Error::Config(format!("unknown policy kind {other}"))),
    }
}

fn sft_cmd(a: SftArgs) -> Result<bool> {
    let mdp = read_task(&required(&a.task, "task")?)?;
    let out = required(&a.out, "out")?;
    let mut policy = match &a.init {
        Some(p) => load_policy_for(p, &mdp)?,
        None => fresh_policy(&a, &mdp, parse_kind(a.policy.as_deref().unwrap_or("tabular"))?)?,
    };
    let kind = policy.kind();
    let corpus: Vec<Trajectory> = match &a.data {
        Some(p) => read_dataset(p, &mdp)?
            .iter()
            .map(|r| Trajectory::new(r.prompt.clone(), r.chosen.clone()))
            .collect(),
        None => Vec::new(),
    };
    let resolved = SftArgs {
        policy: Some(kind.as_str().into()),
        temperature: Some(policy.temperature()),
        seed: Some(a.seed.unwrap_or(0)),
        optim: resolve_optim(&a.optim, kind, 100),
        ..a.clone()
    };
    let epochs = resolved.optim.epochs.unwrap_or(0);
    let losses = if epochs == 0 && corpus.is_empty() {
        Vec::new()
    } else {
        let config = TrainConfig {
            epochs,
            batch_size: a.optim.batch_size,
            optimizer: optimizer(&a.optim, kind)?,
            seed: a.seed.unwrap_or(0),
        };
        sft_train(&mut policy, &mdp, &corpus, &config)?
    };
    save_checkpoint(&out.join("policy.json"), &policy)?;
    write_text(&out.join("losses.csv"), &losses_string(&losses)?)?;
    write_json(&out.join("config.json"), &resolved)?;
    Ok(true)
}

fn dpo_train_cmd(a: DpoTrainArgs) -> Result<bool> {
    let mdp = read_task(&required(&a.task, "task")?)?;
    let out = required(&a.out, "out")?;
    let reference = reference_or_uniform(&a.reference, &mdp)?;
    let mut policy = match &a.init {
        Some(p) => load_policy_for(p, &mdp)?,
        None => reference.clone(),
    };
    if policy.kind() != reference.kind() || policy.num_params() != reference.num_params() {
        return Err(Error::Config("policy and reference must be the same kind of model".into()));
    }
    let kind = policy.kind();
    let exact = a.exact.unwrap_or(false);
    let tree = if exact { Some(build_tree(&mdp)?) } else { enumerable_tree(&mdp) };
    let data = if exact {
        let tree = tree.as_ref().expect("built above");
        let reward = read_reward_table(&required(&a.reward, "reward")?, tree)?;
        PreferenceData::Exact(exact_preference_data(tree, &reward)?)
    } else {
        let records = read_dataset(&required(&a.data, "data")?, &mdp)?;
        PreferenceData::Sampled(records.iter().map(|r| r.to_pair(LabelSource::Fixed)).collect())
    };
    let resolved = DpoTrainArgs {
        exact: Some(exact),
        beta: Some(a.beta.unwrap_or(1.0)),
        seed: Some(a.seed.unwrap_or(0)),
        diagnostics_every: Some(a.diagnostics_every.unwrap_or(1)),
        checkpoint_every: Some(a.checkpoint_every.unwrap_or(0)),
        optim: resolve_optim(&a.optim, kind, 100),
        ..a.clone()
    };
    let config = DpoConfig {
        beta: resolved.beta.unwrap_or(1.0),
        optimizer: optimizer(&a.optim, kind)?,
        epochs: resolved.optim.epochs.unwrap_or(100),
        batch_size: a.optim.batch_size,
        seed: resolved.seed.unwrap_or(0),
        mode: if exact { DpoMode::ExactExpected } else { DpoMode::Sampled },
        diagnostics_every: resolved.diagnostics_every.unwrap_or(1),
    };
    write_json(&out.join("config.json"), &resolved)?;
    let every = resolved.checkpoint_every.unwrap_or(0);
    let mut save_error = None;
    let result = dpo_train(&mut policy, &reference, &mdp, tree.as_ref(), &data, &config, |record, pi| {
        if every > 0 && (record.step + 1) % every == 0 && save_error.is_none() {
            let path = out.join("checkpoints").join(format!("step-{:06}.json", record.step + 1));
            if let Err(e) = save_checkpoint(&path, pi) {
                save_error = Some(e);
            }
        }
    });
    if let Some(e) = save_error {
        return Err(e);
    }
    match result {
        Ok(diag) => {
            write_text(&out.join("diagnostics.csv"), &diagnostics_string(&diag.records)?)?;
            save_checkpoint(&out.join("policy.json"), &policy)?;
            save_checkpoint(&out.join("reference.json"), &reference)?;
            Ok(true)
        }
        Err(e @ tokmdp_core::Error::Diverged { .. }) => {
            // The trainer restored the last finite parameters.
            save_checkpoint(&out.join("last_good.json"), &policy)?;
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn solve_cmd(a: SolveArgs) -> Result<bool> {
    let mdp = read_task(&required(&a.task, "task")?)?;
    let out = required(&a.out, "out")?;
    let tree = build_tree(&mdp)?;
    let reward = read_reward_table(&required(&a.reward, "reward")?, &tree)?;
    let reference = reference_or_uniform(&a.reference, &mdp)?;
    let sol = solve_soft(&tree, &reward, &reference, a.beta.unwrap_or(1.0))?;
    save_checkpoint(&out.join("policy.json"), &AnyPolicy::Tabular(TabularPolicy::from_solution(&tree, &sol)))?;
    write_text(&out.join("values.jsonl"), &values_string(&tree, &sol.v))?;
    Ok(true)
}

fn ranked(prompt: &[tokmdp_core::Token], hyps: &[Hypothesis]) -> Vec<(Trajectory, f64)> {
    hyps.iter().map(|h| (h.trajectory(prompt), h.score)).collect()
}

fn decode_cmd(a: DecodeArgs) -> Result<bool> {
    let mdp = read_task(&required(&a.task, "task")?)?;
    let beta = a.beta.unwrap_or(1.0);
    let width = a.width.unwrap_or(5);
    let method = a.method.clone().unwrap_or_else(|| "beam".into());
    let reference = match &a.reference {
        Some(p) => Some(load_policy_for(p, &mdp)?),
        None => None,
    };
    let policy = match &a.policy {
        Some(p) => Some(load_policy_for(p, &mdp)?),
        None => None,
    };
    let need_policy = || policy.as_ref().ok_or_else(|| Error::Config("missing required setting `policy`".into()));
    let mut per_prompt: Vec<Vec<(Trajectory, f64)>> = Vec::new();
    match method.as_str() {
        "beam" => {
            let pi = need_policy()?;
            for p in mdp.prompts() {
                per_prompt.push(ranked(p, &beam_search(pi, &mdp, p, width, beta)?));
            }
        }
        "greedy" => {
            let pi = need_policy()?;
            for p in mdp.prompts() {
                let t = greedy(pi, &mdp, p);
                let (lp, _) = logprob(pi, &mdp, &t)?;
                per_prompt.push(vec![(t, beta * lp)]);
            }
        }
        "sample" => {
            let pi = need_policy()?;
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(a.seed.unwrap_or(0));
            for p in mdp.prompts() {
                let mut row = Vec::new();
                for _ in 0..a.samples.unwrap_or(1) {
                    let t = sample_response(pi, &mdp, p, &mut rng);
                    let (lp, _) = logprob(pi, &mdp, &t)?;
                    row.push((t, beta * lp));
                }
                per_prompt.push(row);
            }
        }
        "guided" => {
            let tree = build_tree(&mdp)?;
            let reward = read_reward_table(&required(&a.reward, "reward")?, &tree)?;
            let uniform;
            let r: &dyn tokmdp_core::policy::ActionDist = match &reference {
                Some(r) => r,
                None => {
                    uniform = TabularPolicy::zeros(&tree, 1.0);
                    &uniform
                }
            };
            let sol = solve_soft(&tree, &reward, r, beta)?;
            for (i, p) in mdp.prompts().iter().enumerate() {
                per_prompt.push(ranked(p, &guided_search(&tree, &reward, r, &sol.v, i, width, beta)?));
            }
        }
        other => return Err(Error::Config(format!("unknown decode method {other}"))),
    }

    let mut lines = Vec::new();
    let mut rows = Vec::new();
    for (p, row) in mdp.prompts().iter().zip(per_prompt) {
        let mut out = Vec::new();
        for (t, score) in row {
            let irs = match (&policy, &reference) {
                (Some(pi), Some(r)) => Some(implicit_token_rewards(pi, r, &mdp, beta, &t)?),
                _ => None,
            };
            if let Some(v) = &irs {
                rows.push(HeatmapRow {
                    trajectory: t.clone(),
                    values: v.clone(),
                    label: None,
                });
            }
            out.push(RankedResponse {
                response: t.response,
                score,
                implicit_rewards: irs,
            });
        }
        lines.push(DecodeLine {
            schema: DECODE_SCHEMA.into(),
            prompt: p.clone(),
            ranked: out,
        });
    }
    let text = decode_string(&lines);
    match &a.out {
        Some(path) => write_text(path, &text)?,
        None => print!("{text}"),
    }
    if let Some(path) = &a.heatmap {
        let r = reference
            .as_ref()
            .ok_or_else(|| Error::Config("a heatmap needs a reference checkpoint".into()))?;
        need_policy()?;
        let format = HeatmapFormat::parse(a.heatmap_format.as_deref().unwrap_or("html"))?;
        let legend = Legend {
            beta,
            reference_hash: content_hash(r),
        };
        write_text(path, &render_rows(&rows, format, &legend, None)?)?;
    }
    Ok(true)
}

#[derive(Serialize)]
struct Summary {
    path: String,
    schema: Option<String>,
    #[serde(flatten)]
    details: serde_json::Map<String, serde_json::Value>,
}

fn inspect_cmd(a: InspectArgs) -> Result<bool> {
    let path = required(&a.path, "path")?;
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let schema = detect_schema(&text);
    let mut details = serde_json::Map::new();
    let mut ok = true;
    match schema.as_deref() {
        Some(crate::checkpoint::CHECKPOINT_SCHEMA) => {
            let ckpt: Checkpoint = read_json(&path)?;
            details.insert("version".into(), ckpt.version.into());
            details.insert("params".into(), ckpt.params.len().into());
            details.insert("hash".into(), ckpt.hash.clone().into());
            let verdict = match ckpt.into_policy() {
                Ok(p) => {
                    details.insert("kind".into(), p.kind().as_str().into());
                    "ok".to_string()
                }
                Err(e) => {
                    ok = false;
                    e.to_string()
                }
            };
            details.insert("integrity".into(), verdict.into());
        }
        Some(crate::formats::TASK_SCHEMA) => {
            let mdp = read_task(&path)?;
            details.insert("vocab_size".into(), mdp.vocab_size().into());
            details.insert("max_response_len".into(), mdp.max_response_len().into());
            details.insert("prompts".into(), mdp.prompts().len().into());
            details.insert("responses_per_prompt".into(), (mdp.responses_per_prompt() as f64).into());
        }
        Some(_) | None => {
            let records = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')).count();
            details.insert("lines".into(), records.into());
        }
    }
    if schema.is_none() {
        ok = false;
    }
    let summary = Summary {
        path: path.display().to_string(),
        schema,
        details,
    };
    print!("{}", to_json_string(&summary));
    Ok(ok)
}

fn verify_cmd(a: VerifyArgs) -> Result<bool> {
    let scope = Scope::parse(a.scope.as_deref().unwrap_or("all"))?;
    let manifest = match &a.tolerances {
        Some(p) => ToleranceManifest::load(p)?,
        None => ToleranceManifest::builtin(),
    };
    let report = run_verify_suite(scope, a.seeds, &manifest)?;
    if let Some(p) = &a.out {
        write_text(p, &report.to_json())?;
    }
    print!("{}", report.to_text());
    Ok(report.passed())
}

fn compare_cmd(a: CompareArgs) -> Result<bool> {
    let mdp = read_task(&required(&a.task, "task")?)?;
    let tree = build_tree(&mdp)?;
    let truth = read_reward_table(&required(&a.reward, "reward")?, &tree)?;
    let reference = match reference_or_uniform(&a.reference, &mdp)? {
        AnyPolicy::Tabular(p) => p,
        AnyPolicy::TinySeq(_) => return Err(Error::Config("the comparison needs a tabular reference".into())),
    };
    let exact = a.exact.unwrap_or(false);
    let data = if exact {
        PreferenceData::Exact(exact_preference_data(&tree, &truth)?)
    } else {
        let records = read_dataset(&required(&a.data, "data")?, &mdp)?;
        PreferenceData::Sampled(records.iter().map(|r| r.to_pair(LabelSource::Fixed)).collect())
    };
    let config = CompareConfig {
        l2_strength: a.l2.unwrap_or(if exact { 0.0 } else { 1e-2 }),
        bandit: BanditFitConfig::default(),
        dpo: DpoConfig {
            beta: a.beta.unwrap_or(1.0),
            optimizer: match a.optim.optimizer.as_deref() {
                None | Some("adam") => OptimizerConfig::adam(a.optim.lr.unwrap_or(0.05)),
                Some("sgd") => OptimizerConfig::sgd(a.optim.lr.unwrap_or(1e-2)),
                Some(other) => return Err(Error::Config(format!("unknown optimizer {other}"))),
            },
            epochs: a.optim.epochs.unwrap_or(3000),
            batch_size: a.optim.batch_size,
            seed: a.seed.unwrap_or(0),
            mode: DpoMode::Sampled,
            diagnostics_every: 0,
        },
    };
    let report = compare_classical_rlhf(&tree, &truth, &reference, &data, &config)?;
    match &a.out {
        Some(p) => write_text(p, &report.to_json())?,
        None => print!("{}", report.to_json()),
    }
    Ok(true)
}
