mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokmdp_core::policy::TabularPolicy;
use tokmdp_core::preference::*;
use tokmdp_core::soft_rl::{solve_soft, RewardTable};
use tokmdp_core::{LabelSource, PreferencePair, StateTree, TokenMdp, Trajectory};

#[test]
fn returns_match_step_and_accumulate() {
    for seed in 0..20 {
        let inst = instance(seed, &SMALL);
        for p in 0..inst.tree.num_prompts() {
            for y in inst.tree.responses(p) {
                let a = traj_return(&inst.tree, &inst.reward, &y).unwrap();
                let b = oracle_return(&inst.mdp, &inst.reward_map, &y);
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn single_step_return_is_root_eos_reward() {
    let inst = instance(2, &SMALL);
    let eos = inst.mdp.eos();
    let y = Trajectory::new(inst.mdp.prompts()[0].clone(), vec![eos]);
    let root = inst.tree.root(0);
    assert_eq!(traj_return(&inst.tree, &inst.reward, &y).unwrap(), inst.reward.get(root, eos));
}

#[test]
fn bradley_terry_values() {
    let mdp = TokenMdp::new(2, 0, 2, vec![vec![1]]).unwrap();
    let tree = StateTree::build(&mdp).unwrap();
    let mut r = RewardTable::zeros(&tree);
    let (a, b) = (Trajectory::new(vec![1], vec![0]), Trajectory::new(vec![1], vec![1, 0]));
    assert_eq!(bt_preference(&tree, &r, &a, &b).unwrap(), 0.5);
    r.set(tree.root(0), 0, 1.0);
    let p = bt_preference(&tree, &r, &a, &b).unwrap();
    assert!((p - 0.7310585786300049).abs() < 1e-15);
    assert!((p + bt_preference(&tree, &r, &b, &a).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn optimal_policy_reproduces_reward_preferences() {
    for seed in 0..50 {
        let inst = instance(seed, &SMALL);
        let sol = solve_soft(&inst.tree, &inst.reward, &inst.reference, inst.beta).unwrap();
        let pi = TabularPolicy::from_solution(&inst.tree, &sol);
        for p in 0..inst.tree.num_prompts() {
            let ys = inst.tree.responses(p);
            for a in &ys {
                for b in &ys {
                    let r = bt_preference(&inst.tree, &inst.reward, a, b).unwrap();
                    let q = policy_preference(&pi, &inst.reference, &inst.mdp, inst.beta, a, b).unwrap();
                    assert!((r - q).abs() < 1e-10, "seed {seed}");
                }
            }
        }
    }
}

#[test]
fn reference_policy_is_indifferent() {
    let inst = instance(5, &SMALL);
    let ys = inst.tree.responses(0);
    for a in &ys {
        for b in &ys {
            let p = policy_preference(&inst.reference, &inst.reference, &inst.mdp, 1.3, a, b).unwrap();
            assert_eq!(p, 0.5);
        }
    }
}

#[test]
fn per_prompt_constant_leaves_preferences() {
    let inst = instance(11, &SMALL);
    let mut shifted = inst.reward.clone();
    // adding c to every EOS transition adds c to every return
    for id in 0..inst.tree.len() {
        let eos = inst.mdp.eos();
        shifted.set(id, eos, shifted.get(id, eos) + 2.5);
    }
    let a = PreferenceDistribution::from_reward(&inst.tree, &inst.reward).unwrap();
    let b = PreferenceDistribution::from_reward(&inst.tree, &shifted).unwrap();
    assert!(a.tv_distance(&b).unwrap() < 1e-12);
}

fn three_response_bandit() -> (StateTree, RewardTable, TabularPolicy) {
    // responses [0], [1, 0], [2, 0]
    let mdp = TokenMdp::new(3, 0, 2, vec![vec![1]]).unwrap();
    let tree = StateTree::build(&mdp).unwrap();
    let mut r = RewardTable::zeros(&tree);
    let leaf = |t: Token| tree.lookup_in(0, &[t]).unwrap();
    r.set(tree.root(0), 0, 0.0);
    r.set(leaf(1), 0, 1.0);
    r.set(leaf(2), 0, -0.5);
    let reference = TabularPolicy::zeros(&tree, 1.0);
    (tree, r, reference)
}

use tokmdp_core::Token;

#[test]
fn sampled_labels_follow_bradley_terry() {
    let (tree, r, reference) = three_response_bandit();
    let pairs = sample_preferences(&tree, &r, &reference, 10_000, 7, PairSampler::Reference).unwrap();
    assert_eq!(pairs.len(), 10_000);
    let (a, b) = (vec![1, 0], vec![2, 0]);
    let mut wins = 0usize;
    let mut total = 0usize;
    for pair in &pairs {
        assert_eq!(pair.label_source, LabelSource::Sampled);
        if pair.chosen == a && pair.rejected == b {
            wins += 1;
            total += 1;
        } else if pair.chosen == b && pair.rejected == a {
            total += 1;
        }
    }
    let p = sigmoid(1.5);
    let freq = wins as f64 / total as f64;
    let se = (p * (1.0 - p) / total as f64).sqrt();
    assert!((freq - p).abs() < 3.0 * se, "{freq} vs {p}");
    assert!(sample_preferences(&tree, &r, &reference, 0, 7, PairSampler::Reference).unwrap().is_empty());
    assert_eq!(pairs, sample_preferences(&tree, &r, &reference, 10_000, 7, PairSampler::Reference).unwrap());
}

/// Closed-form one-dimensional likelihood maximized on a grid.
fn grid_search_difference(wins: usize, losses: usize) -> f64 {
    let nll = |d: f64| -(wins as f64) * sigmoid(d).ln() - (losses as f64) * sigmoid(-d).ln();
    let mut best = (f64::INFINITY, 0.0);
    let mut d = -5.0;
    while d <= 5.0 {
        let v = nll(d);
        if v < best.0 {
            best = (v, d);
        }
        d += 1e-4;
    }
    best.1
}

#[test]
fn bandit_fit_recovers_logistic_difference() {
    let mdp = TokenMdp::new(2, 0, 2, vec![vec![1]]).unwrap();
    let tree = StateTree::build(&mdp).unwrap();
    let (a, b) = (vec![1, 0], vec![0]);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let p = sigmoid(1.0);
    let mut data = Vec::new();
    let mut wins = 0;
    for _ in 0..100_000 {
        let first = rng.gen::<f64>() < p;
        wins += first as usize;
        let (c, r) = if first { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) };
        data.push(PreferencePair {
            prompt: vec![1],
            chosen: c,
            rejected: r,
            label_source: LabelSource::Sampled,
        });
    }
    let model = fit_bandit_reward(&tree, &data, 0.0, &BanditFitConfig::default()).unwrap();
    let diff = model.reward(0, &a).unwrap() - model.reward(0, &b).unwrap();
    assert!((diff - 1.0).abs() < 0.05, "{diff}");
    let grid = grid_search_difference(wins, data.len() - wins);
    assert!((diff - grid).abs() < 2e-4, "{diff} vs grid {grid}");
    // mean-centred per prompt
    assert!((model.reward(0, &a).unwrap() + model.reward(0, &b).unwrap()).abs() < 1e-12);
}

#[test]
fn shaped_rewards_give_identical_exact_data() {
    use tokmdp_core::soft_rl::{shape_reward, Potential};
    let inst = instance(13, &SMALL);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let phi = Potential::random_uniform(&inst.tree, &mut rng, -2.0, 2.0);
    let shaped = shape_reward(&inst.tree, &inst.reward, &phi).unwrap();
    let a = exact_preference_data(&inst.tree, &inst.reward).unwrap();
    let b = exact_preference_data(&inst.tree, &shaped).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.pair, y.pair);
        assert!((x.weight - y.weight).abs() < 1e-10);
    }
}
