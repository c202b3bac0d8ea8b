//! Brute-force verification batteries over seeded random instances.
//!
//! Failures are report entries, not errors; the overall status passes iff every
//! check does. Tolerances come from a manifest file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokmdp_core::decode::{beam_search, guided_search};
use tokmdp_core::dpo::{expected_logratio, reference_kl};
use tokmdp_core::policy::TabularPolicy;
use tokmdp_core::preference::{bt_preference, policy_preference, PreferenceDistribution};
use tokmdp_core::soft_rl::{q_to_reward, shape_reward, solve_soft, ActionTable, Potential, RewardTable};

use crate::error::{Error, Result};
use crate::formats::{read_json, to_json_string};
use crate::instances::{random_instance, Instance, InstanceShape};

pub const TOLERANCE_SCHEMA: &str = "tokmdp.tolerances.v1";
pub const REPORT_SCHEMA: &str = "tokmdp.report.v1";
const DEFAULT_MANIFEST: &str = include_str!("../tolerances.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToleranceManifest {
    pub schema: String,
    pub tolerances: BTreeMap<String, f64>,
}

impl ToleranceManifest {
    pub fn builtin() -> Self {
        serde_json::from_str(DEFAULT_MANIFEST).expect("bundled manifest parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = read_json(path)?;
        if m.schema != TOLERANCE_SCHEMA {
            return Err(Error::UnsupportedVersion {
                expected: TOLERANCE_SCHEMA.into(),
                found: m.schema,
            });
        }
        Ok(m)
    }

    pub fn get(&self, name: &str) -> Result<f64> {
        self.tolerances
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("tolerance manifest has no entry for {name}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Comparison {
    /// measured < tolerance
    Lt,
    /// measured <= tolerance
    Le,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub status: Status,
    pub measured: f64,
    pub tolerance: f64,
    pub comparison: Comparison,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
}

impl Check {
    pub fn new(name: &str, measured: f64, tolerance: f64, comparison: Comparison) -> Self {
        let ok = match comparison {
            Comparison::Lt => measured < tolerance,
            Comparison::Le => measured <= tolerance,
        };
        Self {
            name: name.into(),
            status: if ok { Status::Pass } else { Status::Fail },
            measured,
            tolerance,
            comparison,
        }
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub schema: String,
    pub scope: String,
    pub seeds: u64,
    pub checks: Vec<Check>,
    pub overall: Status,
}

impl VerificationReport {
    pub fn new(scope: &str, seeds: u64, checks: Vec<Check>) -> Self {
        let overall = if checks.iter().all(Check::passed) {
            Status::Pass
        } else {
            Status::Fail
        };
        Self {
            schema: REPORT_SCHEMA.into(),
            scope: scope.into(),
            seeds,
            checks,
            overall,
        }
    }

    pub fn passed(&self) -> bool {
        self.overall == Status::Pass
    }

    pub fn to_json(&self) -> String {
        to_json_string(self)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let op = match c.comparison {
                Comparison::Lt => "<",
                Comparison::Le => "<=",
            };
            let status = if c.passed() { "PASS" } else { "FAIL" };
            let _ = writeln!(s, "{status} {} measured {:e} {op} {:e}", c.name, c.measured, c.tolerance);
        }
        let overall = if self.passed() { "PASS" } else { "FAIL" };
        let _ = writeln!(s, "overall: {overall} ({} checks, scope {})", self.checks.len(), self.scope);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    All,
    Inverse,
    Shaping,
    BtPolicy,
    Guided,
    KlIdentity,
}

impl Scope {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Self::All,
            "inverse" => Self::Inverse,
            "shaping" => Self::Shaping,
            "bt_policy" => Self::BtPolicy,
            "guided" => Self::Guided,
            "kl_identity" => Self::KlIdentity,
            other => return Err(Error::Config(format!("unknown scope {other}"))),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::All => "all",
            Self::Inverse => "inverse",
            Self::Shaping => "shaping",
            Self::BtPolicy => "bt_policy",
            Self::Guided => "guided",
            Self::KlIdentity => "kl_identity",
        }
    }

    fn default_seeds(self) -> u64 {
        match self {
            Self::Inverse | Self::Guided => 100,
            _ => 50,
        }
    }
}

/// Runs the batteries of `scope` on seeds `0..seeds` (each battery's default
/// count when `seeds` is `None`).
pub fn run_verify_suite(scope: Scope, seeds: Option<u64>, manifest: &ToleranceManifest) -> Result<VerificationReport> {
    let batteries: &[Scope] = match scope {
        Scope::All => &[Scope::Inverse, Scope::Shaping, Scope::BtPolicy, Scope::Guided, Scope::KlIdentity],
        _ => std::slice::from_ref(&scope),
    };
    let mut checks = Vec::new();
    for &b in batteries {
        let n = seeds.unwrap_or(b.default_seeds());
        let found = match b {
            Scope::Inverse => inverse(n)?,
            Scope::Shaping => shaping(n)?,
            Scope::BtPolicy => bt_policy(n)?,
            Scope::Guided => guided(n)?,
            Scope::KlIdentity => kl_identity(n)?,
            Scope::All => unreachable!(),
        };
        for (name, measured, cmp) in found {
            checks.push(Check::new(name, measured, manifest.get(name)?, cmp));
        }
    }
    let seeds_reported = seeds.unwrap_or(scope.default_seeds());
    Ok(VerificationReport::new(scope.as_str(), seeds_reported, checks))
}

type Measurements = Vec<(&'static str, f64, Comparison)>;

fn instances(n: u64) -> impl Iterator<Item = Result<Instance>> {
    let shape = InstanceShape::default();
    (0..n).map(move |seed| random_instance(seed, &shape))
}

fn inverse(n: u64) -> Result<Measurements> {
    let (mut r_err, mut q_err, mut zp, mut zv, mut norm, mut part) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (seed, inst) in instances(n).enumerate() {
        let inst = inst?;
        let t = &inst.tree;
        let sol = solve_soft(t, &inst.reward, &inst.reference, inst.beta)?;
        let back = q_to_reward(t, &sol.q, &inst.reference, inst.beta)?;
        r_err = r_err.max(back.max_abs_diff(&inst.reward, t));

        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64 ^ 0x5eed);
        let q = ActionTable::random_uniform(t, &mut rng, -3.0, 3.0);
        let r = q_to_reward(t, &q, &inst.reference, inst.beta)?;
        q_err = q_err.max(solve_soft(t, &r, &inst.reference, inst.beta)?.q.max_abs_diff(&q, t));

        for id in 0..t.len() {
            let s: f64 = t.actions(id).iter().map(|&a| sol.pi.get(id, a)).sum();
            norm = norm.max((s - 1.0).abs());
        }
        for p in 0..t.num_prompts() {
            let scores: Vec<f64> = t
                .responses(p)
                .iter()
                .map(|y| {
                    let path = t.trajectory_path(y).expect("enumerated response").1;
                    path.iter()
                        .map(|&(id, a)| inst.reward.get(id, a) + inst.beta * sol.ref_log.get(id, a))
                        .sum::<f64>()
                        / inst.beta
                })
                .collect();
            let v0 = inst.beta * tokmdp_core::math::logsumexp(&scores);
            part = part.max((v0 - sol.v[t.root(p)]).abs());
        }

        let zero = solve_soft(t, &RewardTable::zeros(t), &inst.reference, inst.beta)?;
        zv = zv.max(zero.v.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        for id in 0..t.len() {
            for &a in t.actions(id) {
                zp = zp.max((zero.pi.get(id, a) - zero.ref_log.get(id, a).exp()).abs());
            }
        }
    }
    Ok(vec![
        ("inverse.reward_round_trip", r_err, Comparison::Lt),
        ("inverse.q_round_trip", q_err, Comparison::Lt),
        ("inverse.zero_reward_policy", zp, Comparison::Lt),
        ("inverse.zero_reward_value", zv, Comparison::Lt),
        ("inverse.normalization", norm, Comparison::Lt),
        ("inverse.partition_enumeration", part, Comparison::Lt),
    ])
}

fn shaping(n: u64) -> Result<Measurements> {
    let (mut dpi, mut tv) = (0.0f64, 0.0f64);
    for (seed, inst) in instances(n).enumerate() {
        let inst = inst?;
        let t = &inst.tree;
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64 ^ 0x9071);
        let phi = Potential::random_uniform(t, &mut rng, -3.0, 3.0);
        let shaped = shape_reward(t, &inst.reward, &phi)?;
        let a = solve_soft(t, &inst.reward, &inst.reference, inst.beta)?;
        let b = solve_soft(t, &shaped, &inst.reference, inst.beta)?;
        dpi = dpi.max(a.pi.max_abs_diff(&b.pi, t));
        let da = PreferenceDistribution::from_reward(t, &inst.reward)?;
        let db = PreferenceDistribution::from_reward(t, &shaped)?;
        tv = tv.max(da.tv_distance(&db)?);
        let pa = PreferenceDistribution::from_policy(t, &TabularPolicy::from_solution(t, &a), &inst.reference, inst.beta)?;
        let pb = PreferenceDistribution::from_policy(t, &TabularPolicy::from_solution(t, &b), &inst.reference, inst.beta)?;
        tv = tv.max(pa.tv_distance(&pb)?);
    }
    Ok(vec![
        ("shaping.policy_change", dpi, Comparison::Lt),
        ("shaping.preference_tv", tv, Comparison::Lt),
    ])
}

fn bt_policy(n: u64) -> Result<Measurements> {
    let mut worst = 0.0f64;
    for inst in instances(n) {
        let inst = inst?;
        let t = &inst.tree;
        let sol = solve_soft(t, &inst.reward, &inst.reference, inst.beta)?;
        let star = TabularPolicy::from_solution(t, &sol);
        for p in 0..t.num_prompts() {
            let ys = t.responses(p);
            for a in &ys {
                for b in &ys {
                    let x = bt_preference(t, &inst.reward, a, b)?;
                    let y = policy_preference(&star, &inst.reference, t.mdp(), inst.beta, a, b)?;
                    worst = worst.max((x - y).abs());
                }
            }
        }
    }
    Ok(vec![("bt_policy.bt_vs_policy", worst, Comparison::Lt)])
}

fn guided(n: u64) -> Result<Measurements> {
    let (mut mismatches, mut offset) = (0u64, 0.0f64);
    for inst in instances(n) {
        let inst = inst?;
        let t = &inst.tree;
        let sol = solve_soft(t, &inst.reward, &inst.reference, inst.beta)?;
        let star = TabularPolicy::from_solution(t, &sol);
        for p in 0..t.num_prompts() {
            let v0 = sol.v[t.root(p)];
            for width in [1, 2, 5] {
                let g = guided_search(t, &inst.reward, &inst.reference, &sol.v, p, width, inst.beta)?;
                let l = beam_search(&star, t.mdp(), t.prompt_tokens(p), width, inst.beta)?;
                let same = g.len() == l.len() && g.iter().zip(&l).all(|(a, b)| a.response == b.response);
                if !same {
                    mismatches += 1;
                }
                for (a, b) in g.iter().zip(&l) {
                    offset = offset.max((a.score - v0 - b.score).abs());
                }
            }
        }
    }
    Ok(vec![
        ("guided.ranking_mismatches", mismatches as f64, Comparison::Le),
        ("guided.score_offset", offset, Comparison::Lt),
    ])
}

fn kl_identity(n: u64) -> Result<Measurements> {
    let (mut kl_err, mut at_ref, mut max_value) = (0.0f64, 0.0f64, f64::NEG_INFINITY);
    for (seed, inst) in instances(n).enumerate() {
        let inst = inst?;
        let t = &inst.tree;
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64 ^ 0x15);
        let pi = TabularPolicy::random(t, 1.0, 1.0, &mut rng);
        for p in 0..t.num_prompts() {
            let e = expected_logratio(&pi, &inst.reference, t, inst.beta, p)?;
            let kl = reference_kl(&pi, &inst.reference, t, p)?;
            kl_err = kl_err.max((e + inst.beta * kl).abs());
            at_ref = at_ref.max(expected_logratio(&inst.reference, &inst.reference, t, inst.beta, p)?.abs());
            if t.responses(p).len() > 1 {
                max_value = max_value.max(e);
            }
        }
    }
    if max_value == f64::NEG_INFINITY {
        max_value = -1.0;
    }
    // strictly negative for every pi != pi_ref
    Ok(vec![
        ("kl_identity.residual", kl_err, Comparison::Lt),
        ("kl_identity.reference_is_zero", at_ref, Comparison::Lt),
        ("kl_identity.max_value", max_value, Comparison::Lt),
    ])
}
