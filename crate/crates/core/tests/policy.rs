mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tokmdp_core::dpo::dpo_loss_and_grad;
use tokmdp_core::optim::OptimizerConfig;
use tokmdp_core::policy::*;
use tokmdp_core::preference::{sample_preferences, PairSampler};
use tokmdp_core::soft_rl::solve_soft;
use tokmdp_core::{enumerate_responses, StateTree, TokenMdp, Trajectory};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn enumeration_count_matches_closed_form(vocab in 1usize..=5, horizon in 1usize..=5, eos_pick in 0usize..5) {
        let eos = (eos_pick % vocab) as u32;
        let mdp = TokenMdp::new(vocab, eos, horizon, vec![vec![]]).unwrap();
        let ys = enumerate_responses(&mdp, &[]).unwrap();
        let expected: usize = (0..horizon).map(|n| (vocab - 1).pow(n as u32)).sum();
        prop_assert_eq!(ys.len(), expected);
        prop_assert!(ys.windows(2).all(|w| w[0].response < w[1].response));
        for y in &ys {
            prop_assert!(mdp.validate_trajectory(y).is_ok());
        }
    }

    #[test]
    fn sequence_probabilities_normalize(seed in 0u64..1000, temp in 0.3f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = random_mdp(&mut rng, &SMALL);
        let tree = StateTree::build(&mdp).unwrap();
        let tab = TabularPolicy::random(&tree, temp, 2.0, &mut rng);
        let cfg = TinySeqConfig { embed_dim: 4, window: 3, hidden: 5 };
        let seq = TinySeqPolicy::new(cfg, mdp.vocab_size(), temp, seed);
        for p in 0..tree.num_prompts() {
            for pi in [&tab as &dyn ActionDist, &seq] {
                let z: f64 = tree.responses(p).iter().map(|y| logprob(pi, &mdp, y).unwrap().0.exp()).sum();
                prop_assert!((z - 1.0).abs() < 1e-10);
            }
        }
        for id in 0..tree.len() {
            let node = tree.node(id);
            let row = tab.action_log_probs(&mdp, tree.prompt_tokens(node.prompt), &node.prefix);
            let s: f64 = row.iter().map(|l| l.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            for &a in tree.actions(id) {
                prop_assert!(row[a as usize].exp() > 0.0);
            }
        }
    }

    #[test]
    fn logit_shift_leaves_probabilities(seed in 0u64..1000, shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = random_mdp(&mut rng, &SMALL);
        let tree = StateTree::build(&mdp).unwrap();
        let pi = TabularPolicy::random(&tree, 1.0, 2.0, &mut rng);
        let mut moved = pi.clone();
        let id = (seed as usize) % tree.len();
        for x in moved.logits_row_mut(id) {
            *x += shift;
        }
        let node = tree.node(id);
        let prompt = tree.prompt_tokens(node.prompt);
        let a = pi.action_log_probs(&mdp, prompt, &node.prefix);
        let b = moved.action_log_probs(&mdp, prompt, &node.prefix);
        for k in 0..a.len() {
            prop_assert!((a[k].exp() - b[k].exp()).abs() < 1e-12);
        }
    }
}

#[test]
fn solution_logits_reproduce_optimal_policy() {
    for seed in 0..20 {
        let inst = instance(seed, &SMALL);
        let sol = solve_soft(&inst.tree, &inst.reward, &inst.reference, inst.beta).unwrap();
        let pi = TabularPolicy::from_solution(&inst.tree, &sol);
        for p in 0..inst.tree.num_prompts() {
            for y in inst.tree.responses(p) {
                let (total, per) = logprob(&pi, &inst.mdp, &y).unwrap();
                let path = inst.tree.trajectory_path(&y).unwrap().1;
                for (t, &(id, a)) in path.iter().enumerate() {
                    assert!((per[t] - sol.pi.get(id, a).ln()).abs() < 1e-12);
                }
                // token-by-token and whole-sequence sums agree
                assert!((total - oracle_logprob(&pi, &inst.mdp, &y)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn sft_matches_empirical_next_token_frequencies() {
    let mdp = TokenMdp::new(3, 0, 3, vec![vec![1]]).unwrap();
    let tree = StateTree::build(&mdp).unwrap();
    let ys = tree.responses(0);
    // multiplicities 1..=7 over the seven responses
    let mut corpus = Vec::new();
    for (i, y) in ys.iter().enumerate() {
        for _ in 0..=i {
            corpus.push(y.clone());
        }
    }
    let mut pi = TabularPolicy::zeros(&tree, 1.0);
    let cfg = TrainConfig {
        epochs: 4000,
        batch_size: None,
        optimizer: OptimizerConfig::sgd(0.5),
        seed: 0,
    };
    sft_train(&mut pi, &mdp, &corpus, &cfg).unwrap();
    for id in 0..tree.len() {
        let prefix = &tree.node(id).prefix;
        let mut counts = [0.0; 3];
        for y in &corpus {
            if y.response.len() > prefix.len() && y.response.starts_with(prefix) {
                counts[y.response[prefix.len()] as usize] += 1.0;
            }
        }
        let n: f64 = counts.iter().sum();
        let lp = pi.action_log_probs(&mdp, &[1], prefix);
        for &a in tree.actions(id) {
            assert!((lp[a as usize].exp() - counts[a as usize] / n).abs() < 1e-4, "node {id}");
        }
    }
}

#[test]
fn default_step_sft_loss_is_monotone_and_single_response_rises() {
    let mdp = TokenMdp::new(4, 0, 4, vec![vec![1], vec![2]]).unwrap();
    let tree = StateTree::build(&mdp).unwrap();
    let y = Trajectory::new(vec![2], vec![3, 1, 0]);
    let mut pi = TabularPolicy::zeros(&tree, 1.0);
    let before = logprob(&pi, &mdp, &y).unwrap().0;
    let cfg = TrainConfig::default_for(PolicyKind::Tabular);
    let losses = sft_train(&mut pi, &mdp, &[y.clone()], &cfg).unwrap();
    assert!(losses.windows(2).all(|w| w[1] <= w[0]));
    assert!(logprob(&pi, &mdp, &y).unwrap().0 > before);

    let mut again = TabularPolicy::zeros(&tree, 1.0);
    sft_train(&mut again, &mdp, &[y], &cfg).unwrap();
    let bits = |p: &TabularPolicy| p.params().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&pi), bits(&again));
}

fn gradient_fixture(seed: u64) -> (TokenMdp, StateTree, Vec<Trajectory>, Vec<tokmdp_core::PreferencePair>) {
    let inst = instance(seed, &Shape {
        vocab: (3, 4),
        horizon: (3, 4),
        prompts: (2, 2),
    });
    let pairs = sample_preferences(&inst.tree, &inst.reward, &inst.reference, 12, seed, PairSampler::Uniform).unwrap();
    let corpus = pairs.iter().map(|p| p.chosen_trajectory()).collect();
    (inst.mdp, inst.tree, corpus, pairs)
}

#[test]
fn tabular_gradients_match_finite_differences() {
    for seed in 0..3 {
        let (mdp, tree, corpus, pairs) = gradient_fixture(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = TabularPolicy::random(&tree, 1.0, 0.5, &mut rng);
        let reference = TabularPolicy::random(&tree, 1.0, 0.5, &mut rng);
        let coords: Vec<usize> = (0..pi.num_params()).collect();
        let sft = grad_check(&pi, |p| sft_loss_and_grad(p, &mdp, &corpus), &coords, 1e-5).unwrap();
        let dpo = grad_check(
            &pi,
            |p| dpo_loss_and_grad(p, &reference, &mdp, &pairs, 0.7).map(|e| (e.loss, e.grad)),
            &coords,
            1e-5,
        )
        .unwrap();
        assert!(sft < 1e-6, "sft {sft}");
        assert!(dpo < 1e-6, "dpo {dpo}");
    }
}

#[test]
fn tiny_seq_gradients_match_finite_differences() {
    let (mdp, _, corpus, pairs) = gradient_fixture(4);
    let cfg = TinySeqConfig::default();
    // at the std-0.02 initialization many coordinates have gradients near 1e-8,
    // where finite-difference round-off alone exceeds the tolerance
    let pi = TinySeqPolicy::with_init_std(cfg, mdp.vocab_size(), 1.0, 0.5, 3);
    let reference = TinySeqPolicy::with_init_std(cfg, mdp.vocab_size(), 1.0, 0.5, 4);
    let coords = sample_coordinates(pi.num_params(), 150, 5);
    assert!(coords.len() >= 100);
    let sft = grad_check(&pi, |p| sft_loss_and_grad(p, &mdp, &corpus), &coords, 1e-5).unwrap();
    let dpo = grad_check(
        &pi,
        |p| dpo_loss_and_grad(p, &reference, &mdp, &pairs, 1.0).map(|e| (e.loss, e.grad)),
        &coords,
        1e-5,
    )
    .unwrap();
    assert!(sft < 1e-5, "sft {sft}");
    assert!(dpo < 1e-5, "dpo {dpo}");
}
