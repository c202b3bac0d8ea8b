//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! asserted criterion fails. Runs sequentially so the timing budgets are honest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tokmdp::checkpoint::{checkpoint_string, load_checkpoint};
use tokmdp::experiments::{beam_trend, corruption_benchmark, CorruptionConfig};
use tokmdp::instances::{random_instance, Instance, InstanceShape};
use tokmdp_core::decode::{beam_search, guided_search};
use tokmdp_core::dpo::{
    dpo_loss_and_grad, dpo_train, expected_logratio, gauge_aligned_residual, learned_advantages, DpoConfig, DpoMode,
    PreferenceData,
};
use tokmdp_core::optim::OptimizerConfig;
use tokmdp_core::policy::{
    sample_coordinates, sft_loss_and_grad, sft_train, ActionDist, Policy, PolicyKind, TabularPolicy,
    TinySeqConfig, TinySeqPolicy, TrainConfig,
};
use tokmdp_core::preference::{exact_preference_data, sample_preferences, PairSampler, PreferenceDistribution};
use tokmdp_core::soft_rl::{advantage_of, q_to_reward, shape_reward, solve_soft, Potential, RewardTable};
use tokmdp_core::{StateTree, Trajectory};

// Pinned tolerances and budgets.
const C1_TOL: f64 = 1e-9;
const C1_BUDGET: Duration = Duration::from_secs(10);
const C2_TOL: f64 = 1e-12;
const C3_TOL: f64 = 1e-10;
const C4_TOL: f64 = 1e-10;
const C5_TV: f64 = 1e-3;
const C5_RESIDUAL: f64 = 1e-2;
const C5_BUDGET: Duration = Duration::from_secs(60);
const C5_SCHEDULE: [(f64, usize); 3] = [(0.05, 2000), (0.005, 1000), (0.0005, 1000)];
const C6_TABULAR: f64 = 1e-6;
const C6_TINY: f64 = 1e-5;
const C6_TINY_COORDS: usize = 100;
const C6_EPS: f64 = 1e-5;
/// Below this magnitude a gradient is compared absolutely: central-difference
/// round-off (up to about 1e-10 with this step) swamps any relative measure of a
/// gradient that is zero or nearly so.
const C6_SIGNIFICANT: f64 = 1e-4;
const C6_ABS: f64 = 1e-9;
const C8_TOL: f64 = 1e-10;
const C9_RATE: f64 = 0.9;
const C9_BUDGET: Duration = Duration::from_secs(300);

struct Outcome {
    passed: bool,
    asserted: bool,
    detail: String,
}

fn asserted(passed: bool, detail: String) -> Outcome {
    Outcome {
        passed,
        asserted: true,
        detail,
    }
}

fn shape() -> InstanceShape {
    InstanceShape::default()
}

fn recovery_shape() -> InstanceShape {
    InstanceShape {
        vocab: (2, 4),
        horizon: (2, 3),
        ..InstanceShape::default()
    }
}

fn inst(seed: u64, shape: &InstanceShape) -> Instance {
    random_instance(seed, shape).expect("instance")
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Return of a trajectory by walking its transitions.
fn oracle_return(tree: &StateTree, reward: &RewardTable, y: &Trajectory) -> f64 {
    let mut id = tree.root(tree.mdp().prompt_index(&y.prompt).unwrap());
    let mut total = 0.0;
    for &a in &y.response {
        total += reward.get(id, a);
        if let Some(c) = tree.child(id, a) {
            id = c;
        }
    }
    total
}

/// Log-probability of a trajectory from per-state distributions.
fn oracle_logprob<D: ActionDist + ?Sized>(pi: &D, tree: &StateTree, y: &Trajectory) -> f64 {
    (0..y.response.len())
        .map(|t| pi.action_log_probs(tree.mdp(), &y.prompt, &y.response[..t])[y.response[t] as usize])
        .sum()
}

fn c1_bijection() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let i = inst(seed, &shape());
        let sol = solve_soft(&i.tree, &i.reward, &i.reference, i.beta).unwrap();
        let back = q_to_reward(&i.tree, &sol.q, &i.reference, i.beta).unwrap();
        worst = worst.max(back.max_abs_diff(&i.reward, &i.tree));
    }
    let took = start.elapsed();
    asserted(
        worst < C1_TOL && took < C1_BUDGET,
        format!("100 instances, max round-trip error {worst:.3e} < {C1_TOL:e}, {took:.2?} < {C1_BUDGET:?}"),
    )
}

fn c2_zero_reward() -> Outcome {
    let (mut dp, mut dv) = (0.0f64, 0.0f64);
    for seed in 0..100 {
        let i = inst(seed, &shape());
        let sol = solve_soft(&i.tree, &RewardTable::zeros(&i.tree), &i.reference, i.beta).unwrap();
        for id in 0..i.tree.len() {
            let node = i.tree.node(id);
            let lr = i.reference.action_log_probs(i.mdp(), i.tree.prompt_tokens(node.prompt), &node.prefix);
            for &a in i.tree.actions(id) {
                dp = dp.max((sol.pi.get(id, a) - lr[a as usize].exp()).abs());
            }
            dv = dv.max(sol.v[id].abs());
        }
    }
    asserted(
        dp < C2_TOL && dv < C2_TOL,
        format!("max |pi* - pi_ref| {dp:.3e}, max |V*| {dv:.3e} < {C2_TOL:e}"),
    )
}

fn c3_bt_equals_policy_preference() -> Outcome {
    let mut worst = 0.0f64;
    let mut pairs = 0usize;
    for seed in 0..50 {
        let i = inst(seed, &shape());
        let sol = solve_soft(&i.tree, &i.reward, &i.reference, i.beta).unwrap();
        let star = TabularPolicy::from_solution(&i.tree, &sol);
        for p in 0..i.tree.num_prompts() {
            let ys = i.tree.responses(p);
            for a in &ys {
                for b in &ys {
                    let bt = sigmoid(oracle_return(&i.tree, &i.reward, a) - oracle_return(&i.tree, &i.reward, b));
                    let h = |y: &Trajectory| i.beta * (oracle_logprob(&star, &i.tree, y) - oracle_logprob(&i.reference, &i.tree, y));
                    let pol = tokmdp_core::preference::policy_preference(&star, &i.reference, i.mdp(), i.beta, a, b).unwrap();
                    worst = worst.max((bt - pol).abs()).max((bt - sigmoid(h(a) - h(b))).abs());
                    pairs += 1;
                }
            }
        }
    }
    asserted(worst < C3_TOL, format!("{pairs} ordered pairs over 50 instances, max gap {worst:.3e} < {C3_TOL:e}"))
}

fn c4_shaping() -> Outcome {
    let (mut dpi, mut tv) = (0.0f64, 0.0f64);
    for seed in 0..50 {
        let i = inst(seed, &shape());
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        // potentials live on nonterminal states; terminal states carry 0
        let phi = Potential::random_uniform(&i.tree, &mut rng, -3.0, 3.0);
        let shaped = shape_reward(&i.tree, &i.reward, &phi).unwrap();
        let a = solve_soft(&i.tree, &i.reward, &i.reference, i.beta).unwrap();
        let b = solve_soft(&i.tree, &shaped, &i.reference, i.beta).unwrap();
        dpi = dpi.max(a.pi.max_abs_diff(&b.pi, &i.tree));
        let pa = TabularPolicy::from_solution(&i.tree, &a);
        let pb = TabularPolicy::from_solution(&i.tree, &b);
        let da = PreferenceDistribution::from_policy(&i.tree, &pa, &i.reference, i.beta).unwrap();
        let db = PreferenceDistribution::from_policy(&i.tree, &pb, &i.reference, i.beta).unwrap();
        tv = tv.max(da.tv_distance(&db).unwrap());
        let ra = PreferenceDistribution::from_reward(&i.tree, &i.reward).unwrap();
        let rb = PreferenceDistribution::from_reward(&i.tree, &shaped).unwrap();
        tv = tv.max(ra.tv_distance(&rb).unwrap());
    }
    asserted(
        dpi < C4_TOL && tv < C4_TOL,
        format!("50 potentials, policy change {dpi:.3e}, preference TV {tv:.3e} < {C4_TOL:e}"),
    )
}

fn c5_dpo_recovery() -> Outcome {
    let start = Instant::now();
    let (mut tv, mut res) = (0.0f64, 0.0f64);
    for seed in 0..20 {
        let i = inst(seed, &recovery_shape());
        let data = PreferenceData::Exact(exact_preference_data(&i.tree, &i.reward).unwrap());
        let mut pi = i.reference.clone();
        // constant-step Adam hovers around the optimum, so the step decays in stages
        for (lr, epochs) in C5_SCHEDULE {
            let config = DpoConfig {
                beta: i.beta,
                optimizer: OptimizerConfig::adam(lr),
                epochs,
                batch_size: None,
                seed,
                mode: DpoMode::ExactExpected,
                diagnostics_every: 0,
            };
            dpo_train(&mut pi, &i.reference, i.mdp(), Some(&i.tree), &data, &config, |_, _| {}).unwrap();
        }
        let truth = PreferenceDistribution::from_reward(&i.tree, &i.reward).unwrap();
        let learned = PreferenceDistribution::from_policy(&i.tree, &pi, &i.reference, i.beta).unwrap();
        tv = tv.max(truth.tv_distance(&learned).unwrap());
        let sol = solve_soft(&i.tree, &i.reward, &i.reference, i.beta).unwrap();
        let adv = learned_advantages(&pi, &i.reference, &i.tree, i.beta);
        res = res.max(gauge_aligned_residual(&i.tree, &adv, &advantage_of(&i.tree, &sol), &sol.ref_log));
    }
    let took = start.elapsed();
    asserted(
        tv < C5_TV && res < C5_RESIDUAL && took < C5_BUDGET,
        format!("20 instances, TV {tv:.3e} < {C5_TV:e}, advantage residual {res:.3e} < {C5_RESIDUAL:e}, {took:.2?} < {C5_BUDGET:?}"),
    )
}

#[derive(Default)]
struct GradAudit {
    relative: f64,
    absolute: f64,
    significant: usize,
    checked: usize,
}

impl GradAudit {
    /// Central differences over `coords`, compared with the analytic gradient.
    fn add<P: Policy + Clone>(&mut self, pi: &P, objective: impl Fn(&P) -> (f64, Vec<f64>), coords: &[usize]) {
        let (_, analytic) = objective(pi);
        let mut probe = pi.clone();
        for &c in coords {
            let x = probe.params()[c];
            probe.params_mut()[c] = x + C6_EPS;
            let plus = objective(&probe).0;
            probe.params_mut()[c] = x - C6_EPS;
            let minus = objective(&probe).0;
            probe.params_mut()[c] = x;
            let numeric = (plus - minus) / (2.0 * C6_EPS);
            let (a, n) = (analytic[c], numeric);
            let scale = a.abs().max(n.abs());
            if scale >= C6_SIGNIFICANT {
                self.relative = self.relative.max((a - n).abs() / scale);
                self.significant += 1;
            } else {
                self.absolute = self.absolute.max((a - n).abs());
            }
            self.checked += 1;
        }
    }

    fn passed(&self, tol: f64) -> bool {
        self.relative < tol && self.absolute < C6_ABS
    }
}

fn c6_gradients() -> Outcome {
    let grad_shape = InstanceShape {
        vocab: (3, 4),
        horizon: (3, 4),
        prompts: (2, 2),
        ..InstanceShape::default()
    };
    let (mut tab, mut tiny) = (GradAudit::default(), GradAudit::default());
    let mut tiny_coords = usize::MAX;
    for seed in 0..3 {
        let i = inst(seed, &grad_shape);
        let pairs = sample_preferences(&i.tree, &i.reward, &i.reference, 12, seed, PairSampler::Uniform).unwrap();
        let corpus: Vec<Trajectory> = pairs.iter().map(|p| p.chosen_trajectory()).collect();
        let mdp = i.mdp();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = TabularPolicy::random(&i.tree, 1.0, 0.5, &mut rng);
        let coords: Vec<usize> = (0..pi.num_params()).collect();
        tab.add(&pi, |p| sft_loss_and_grad(p, mdp, &corpus).unwrap(), &coords);
        tab.add(&pi, |p| dpo_loss_and_grad(p, &i.reference, mdp, &pairs, i.beta).map(|e| (e.loss, e.grad)).unwrap(), &coords);

        let cfg = TinySeqConfig::default();
        let tpi = TinySeqPolicy::with_init_std(cfg, mdp.vocab_size(), 1.0, 0.5, 2 * seed);
        let tref = TinySeqPolicy::with_init_std(cfg, mdp.vocab_size(), 1.0, 0.5, 2 * seed + 1);
        let coords = sample_coordinates(tpi.num_params(), 150, seed);
        tiny_coords = tiny_coords.min(coords.len());
        tiny.add(&tpi, |p| sft_loss_and_grad(p, mdp, &corpus).unwrap(), &coords);
        tiny.add(&tpi, |p| dpo_loss_and_grad(p, &tref, mdp, &pairs, i.beta).map(|e| (e.loss, e.grad)).unwrap(), &coords);
    }
    asserted(
        tab.passed(C6_TABULAR) && tiny.passed(C6_TINY) && tiny_coords >= C6_TINY_COORDS,
        format!(
            "SFT+DPO, tabular all {} coords: relative {:.3e} < {C6_TABULAR:e} on {} with |g| >= {C6_SIGNIFICANT:e}, absolute {:.3e} < {C6_ABS:e} on the rest; \
             tiny-seq {tiny_coords} coords per check: relative {:.3e} < {C6_TINY:e} on {}, absolute {:.3e}",
            tab.checked, tab.relative, tab.significant, tab.absolute, tiny.relative, tiny.significant, tiny.absolute
        ),
    )
}

fn c7_search_equivalence() -> Outcome {
    let mut agree = 0;
    for seed in 0..100 {
        let i = inst(seed, &shape());
        let sol = solve_soft(&i.tree, &i.reward, &i.reference, i.beta).unwrap();
        let star = TabularPolicy::from_solution(&i.tree, &sol);
        let mut same = true;
        for p in 0..i.tree.num_prompts() {
            for w in [1, 2, 5] {
                let g = guided_search(&i.tree, &i.reward, &i.reference, &sol.v, p, w, i.beta).unwrap();
                let l = beam_search(&star, i.mdp(), i.tree.prompt_tokens(p), w, i.beta).unwrap();
                let rg: Vec<_> = g.iter().map(|h| &h.response).collect();
                let rl: Vec<_> = l.iter().map(|h| &h.response).collect();
                same &= rg == rl;
            }
        }
        agree += same as usize;
    }
    asserted(agree == 100, format!("identical full rankings at widths 1, 2, 5 on {agree}/100 instances"))
}

fn c8_expected_logratio() -> Outcome {
    let mut kl_err = 0.0f64;
    for seed in 0..30 {
        let i = inst(seed, &shape());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = TabularPolicy::random(&i.tree, 1.0, 1.0, &mut rng);
        for p in 0..i.tree.num_prompts() {
            let e = expected_logratio(&pi, &i.reference, &i.tree, i.beta, p).unwrap();
            let direct: f64 = i
                .tree
                .responses(p)
                .iter()
                .map(|y| {
                    let lr = oracle_logprob(&i.reference, &i.tree, y);
                    let lp = oracle_logprob(&pi, &i.tree, y);
                    lr.exp() * (lr - lp)
                })
                .sum();
            kl_err = kl_err.max((e + i.beta * direct).abs());
        }
    }

    let i = inst(21, &recovery_shape());
    let pairs = sample_preferences(&i.tree, &i.reward, &i.reference, 200, 3, PairSampler::Reference).unwrap();
    let chosen: Vec<Trajectory> = pairs.iter().map(|p| p.chosen_trajectory()).collect();
    let mut sft_ref = TabularPolicy::zeros(&i.tree, 1.0);
    sft_train(&mut sft_ref, i.mdp(), &chosen, &TrainConfig::default_for(PolicyKind::Tabular)).unwrap();
    let mut pi = sft_ref.clone();
    let cfg = DpoConfig {
        beta: i.beta,
        epochs: 300,
        ..Default::default()
    };
    let diag = dpo_train(&mut pi, &sft_ref, i.mdp(), Some(&i.tree), &PreferenceData::Sampled(pairs), &cfg, |_, _| {}).unwrap();
    let first = diag.records[0].expected_logratio.unwrap();
    let last = diag.records.last().unwrap().expected_logratio.unwrap();
    asserted(
        kl_err < C8_TOL && last < 0.0 && first == 0.0,
        format!("|E[h] + beta KL| {kl_err:.3e} < {C8_TOL:e}; SFT reference: step 0 {first:e}, converged {last:.4e} < 0"),
    )
}

fn c9_corruption() -> Outcome {
    let start = Instant::now();
    let out = corruption_benchmark(&CorruptionConfig::default()).unwrap();
    let took = start.elapsed();
    let r = &out.report;
    asserted(
        r.localization_rate >= C9_RATE && r.train_pairs == 500 && r.heldout_pairs == 100 && took < C9_BUDGET,
        format!(
            "{}/{} held-out corruptions at the minimum implicit reward ({:.2} >= {C9_RATE}), {took:.2?} < {C9_BUDGET:?}",
            r.localized, r.heldout_pairs, r.localization_rate
        ),
    )
}

fn c10_beam_trend() -> Outcome {
    let r = beam_trend(10, &[1, 5, 25], &shape()).unwrap();
    Outcome {
        passed: r.wider_not_worse,
        asserted: false,
        detail: format!(
            "10 tasks, mean true reward beam-1 {:.4}, beam-5 {:.4}, beam-25 {:.4}; regularized objective {:.4}, {:.4}, {:.4}",
            r.mean_rewards[0], r.mean_rewards[1], r.mean_rewards[2], r.mean_objectives[0], r.mean_objectives[1], r.mean_objectives[2]
        ),
    }
}

fn run_cli(dir: &Path, args: &[&str]) -> (bool, Vec<u8>) {
    let out = Command::new(env!("CARGO_BIN_EXE_tokmdp"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn CLI");
    (out.status.success(), out.stdout)
}

fn collect(dir: &Path, prefix: &Path, into: &mut BTreeMap<String, Vec<u8>>) {
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect(&p, prefix, into);
        } else {
            into.insert(p.strip_prefix(prefix).unwrap().display().to_string(), fs::read(&p).unwrap());
        }
    }
}

/// Runs every subcommand once in `dir` and returns all outputs keyed by file name.
fn cli_pipeline(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    fs::write(dir.join("dpo.json"), r#"{"optimizer": "adam", "lr": 0.05, "epochs": 30, "beta": 0.5, "checkpoint_every": 10}"#).unwrap();
    let steps: &[&[&str]] = &[
        &["gen-task", "--kind", "random-reward", "--seed", "5", "--out", "task"],
        &["sample-prefs", "--task", "task/task.json", "--reward", "task/reward.jsonl", "--n", "100", "--seed", "2", "--out", "data.jsonl"],
        &["sft", "--task", "task/task.json", "--data", "data.jsonl", "--epochs", "20", "--out", "sft"],
        &["--config", "dpo.json", "dpo-train", "--task", "task/task.json", "--data", "data.jsonl", "--reference", "sft/policy.json", "--out", "dpo"],
        &["solve", "--task", "task/task.json", "--reward", "task/reward.jsonl", "--beta", "0.5", "--out", "sol"],
        &["decode", "--task", "task/task.json", "--policy", "dpo/policy.json", "--reference", "sft/policy.json", "--beta", "0.5", "--width", "3", "--out", "decode.jsonl", "--heatmap", "heatmap.html"],
        &["decode", "--task", "task/task.json", "--method", "sample", "--policy", "dpo/policy.json", "--samples", "5", "--seed", "9", "--out", "samples.jsonl"],
        &["decode", "--task", "task/task.json", "--method", "guided", "--reward", "task/reward.jsonl", "--beta", "0.5", "--out", "guided.jsonl"],
        &["inspect", "dpo/policy.json"],
        &["verify", "--scope", "kl_identity", "--seeds", "5", "--out", "report.json"],
        &["compare-rlhf", "--task", "task/task.json", "--reward", "task/reward.jsonl", "--data", "data.jsonl", "--epochs", "200", "--out", "compare.json"],
        &["gen-task", "--kind", "corruption", "--vocab-size", "5", "--max-response-len", "4", "--train", "40", "--heldout", "5", "--seed", "1", "--out", "corr"],
        &["sft", "--task", "corr/task.json", "--policy", "tiny-seq", "--epochs", "0", "--init-std", "0.1", "--out", "tiny"],
        &["dpo-train", "--task", "corr/task.json", "--data", "corr/train.jsonl", "--reference", "tiny/policy.json", "--optimizer", "adam", "--lr", "0.01", "--epochs", "3", "--out", "tiny-dpo"],
    ];
    let mut stdout = Vec::new();
    for args in steps {
        let (ok, out) = run_cli(dir, args);
        if !ok {
            return Err(format!("`tokmdp {}` failed", args.join(" ")));
        }
        stdout.extend(out);
    }
    let mut files = BTreeMap::new();
    collect(dir, dir, &mut files);
    files.insert("<stdout>".into(), stdout);
    Ok(files)
}

fn c11_reproducibility() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ra, rb) = match (cli_pipeline(a.path()), cli_pipeline(b.path())) {
        (Ok(x), Ok(y)) => (x, y),
        (Err(e), _) | (_, Err(e)) => return asserted(false, e),
    };
    let differing: Vec<&String> = ra.keys().filter(|k| ra.get(*k) != rb.get(*k)).collect();
    let same_names = ra.keys().eq(rb.keys());

    let path = a.path().join("dpo/policy.json");
    let original = fs::read_to_string(&path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let resaved = checkpoint_string(&loaded);
    let tiny = load_checkpoint(&a.path().join("tiny-dpo/policy.json")).unwrap();
    let tiny_text = fs::read_to_string(a.path().join("tiny-dpo/policy.json")).unwrap();
    let bitwise = resaved == original && checkpoint_string(&tiny) == tiny_text && loaded.params().iter().all(|x| x.is_finite());
    asserted(
        differing.is_empty() && same_names && bitwise,
        format!(
            "{} outputs of 14 CLI runs byte-identical across two runs ({} differ); checkpoint re-save bitwise: {bitwise}",
            ra.len(),
            differing.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("C1 reward/Q bijection", c1_bijection),
        ("C2 zero-reward fixed point", c2_zero_reward),
        ("C3 Bradley-Terry equals policy preference", c3_bt_equals_policy_preference),
        ("C4 potential shaping invariance", c4_shaping),
        ("C5 exact DPO recovery", c5_dpo_recovery),
        ("C6 gradient correctness", c6_gradients),
        ("C7 guided and likelihood search rankings", c7_search_equivalence),
        ("C8 expected log-ratio identity and sign", c8_expected_logratio),
        ("C9 corruption credit assignment", c9_corruption),
        ("C10 beam width trend (reported)", c10_beam_trend),
        ("C11 reproducibility", c11_reproducibility),
    ];
    let (mut failed, mut reported) = (0, 0);
    for (name, f) in criteria {
        let o = f();
        let status = match (o.passed, o.asserted) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (reported only)",
        };
        println!("{status} {name}: {}", o.detail);
        if !o.asserted {
            reported += 1;
        } else if !o.passed {
            failed += 1;
        }
    }
    let total = criteria.len() - reported;
    println!("acceptance: {} of {total} asserted criteria passed, {reported} reported only", total - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
