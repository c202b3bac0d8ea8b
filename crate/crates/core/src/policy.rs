//! Differentiable token policies.
//!
//! A policy emits per-state logits `l(s, .)` and samples from
//! `softmax(l(s, .) / temperature)`. Reading the logits as a soft Q-function with
//! the temperature as `beta`, a policy built from a [`SoftSolution`] reproduces
//! the optimal policy exactly.
//!
//! At the maximum response length every policy is masked to emit EOS with
//! probability one, so sequence probabilities always sum to one over the
//! enumerated responses.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math::{exp, ln, log_softmax, relative_error};
use crate::mdp::{StateTree, Token, TokenMdp, Trajectory};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::soft_rl::SoftSolution;
use crate::{Error, Result};

/// Anything that yields next-token log-probabilities.
pub trait ActionDist {
    /// Log-probabilities over the whole vocabulary; illegal actions are `-inf`.
    fn action_log_probs(&self, mdp: &TokenMdp, prompt: &[Token], generated: &[Token]) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    Tabular,
    TinySeq,
}

impl PolicyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Tabular => "tabular",
            Self::TinySeq => "tiny-seq",
        }
    }
}

pub trait Policy {
    fn kind(&self) -> PolicyKind;

    fn vocab_size(&self) -> usize;

    fn temperature(&self) -> f64;

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    fn num_params(&self) -> usize {
        self.params().len()
    }

    /// Raw logits at a state.
    fn logits(&self, prompt: &[Token], generated: &[Token]) -> Vec<f64>;

    /// Adds `dlogits^T * d(logits)/d(params)` into `grad`.
    fn accumulate_grad(&self, prompt: &[Token], generated: &[Token], dlogits: &[f64], grad: &mut [f64]);
}

impl<P: Policy + ?Sized> ActionDist for P {
    fn action_log_probs(&self, mdp: &TokenMdp, prompt: &[Token], generated: &[Token]) -> Vec<f64> {
        if mdp.is_forced_depth(generated.len()) {
            return forced_eos(mdp);
        }
        log_softmax(&self.logits(prompt, generated), self.temperature())
    }
}

pub(crate) fn forced_eos(mdp: &TokenMdp) -> Vec<f64> {
    let mut lp = vec![f64::NEG_INFINITY; mdp.vocab_size()];
    lp[mdp.eos() as usize] = 0.0;
    lp
}

/// FNV-1a over the parameter bits and temperature; identifies a frozen reference.
pub fn fingerprint<P: Policy + ?Sized>(pi: &P) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bits: u64| {
        for byte in bits.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(pi.temperature().to_bits());
    for p in pi.params() {
        eat(p.to_bits());
    }
    h
}

/// Per-token log-probabilities of a trajectory and their sum.
pub fn logprob<D: ActionDist + ?Sized>(pi: &D, mdp: &TokenMdp, traj: &Trajectory) -> Result<(f64, Vec<f64>)> {
    mdp.validate_trajectory(traj)?;
    let per_token: Vec<f64> = traj
        .steps()
        .map(|(prefix, a)| pi.action_log_probs(mdp, &traj.prompt, prefix)[a as usize])
        .collect();
    Ok((per_token.iter().sum(), per_token))
}

/// Adds `coef * d log pi(traj) / d params` into `grad`.
pub fn accumulate_logprob_grad<P: Policy + ?Sized>(
    pi: &P,
    mdp: &TokenMdp,
    traj: &Trajectory,
    coef: f64,
    grad: &mut [f64],
) {
    let inv_t = 1.0 / pi.temperature();
    let mut dlogits = vec![0.0; pi.vocab_size()];
    for (prefix, a) in traj.steps() {
        if mdp.is_forced_depth(prefix.len()) {
            continue;
        }
        let lp = log_softmax(&pi.logits(&traj.prompt, prefix), pi.temperature());
        for (j, d) in dlogits.iter_mut().enumerate() {
            let indicator = if j == a as usize { 1.0 } else { 0.0 };
            *d = coef * (indicator - exp(lp[j])) * inv_t;
        }
        pi.accumulate_grad(&traj.prompt, prefix, &dlogits, grad);
    }
}

/// One logit per `(tree node, action)`.
#[derive(Debug, Clone)]
pub struct TabularPolicy {
    tree: Arc<StateTree>,
    logits: Vec<f64>,
    temperature: f64,
}

impl TabularPolicy {
    /// All-zero logits, i.e. the uniform policy.
    pub fn zeros(tree: &StateTree, temperature: f64) -> Self {
        Self::zeros_shared(Arc::new(tree.clone()), temperature)
    }

    pub fn zeros_shared(tree: Arc<StateTree>, temperature: f64) -> Self {
        let n = tree.len() * tree.vocab_size();
        Self {
            tree,
            logits: vec![0.0; n],
            temperature,
        }
    }

    pub fn from_logits(tree: &StateTree, temperature: f64, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != tree.len() * tree.vocab_size() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "expected {} logits, got {}",
                tree.len() * tree.vocab_size(),
                logits.len()
            )));
        }
        Ok(Self {
            tree: Arc::new(tree.clone()),
            logits,
            temperature,
        })
    }

    /// Gaussian logits with standard deviation `std`.
    pub fn random<R: Rng + ?Sized>(tree: &StateTree, temperature: f64, std: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(tree, temperature);
        for l in p.logits.iter_mut() {
            *l = std * gaussian(rng);
        }
        p
    }

    /// Logits set to `Q*` and temperature to `beta`, which realizes `pi*` exactly.
    pub fn from_solution(tree: &StateTree, sol: &SoftSolution) -> Self {
        let mut p = Self::zeros(tree, sol.beta);
        for id in 0..tree.len() {
            for &a in tree.actions(id) {
                p.logits[id * tree.vocab_size() + a as usize] = sol.q.get(id, a);
            }
        }
        p
    }

    pub fn tree(&self) -> &StateTree {
        &self.tree
    }

    pub fn shared_tree(&self) -> Arc<StateTree> {
        self.tree.clone()
    }

    pub fn logits_row(&self, id: usize) -> &[f64] {
        let v = self.tree.vocab_size();
        &self.logits[id * v..(id + 1) * v]
    }

    pub fn logits_row_mut(&mut self, id: usize) -> &mut [f64] {
        let v = self.tree.vocab_size();
        &mut self.logits[id * v..(id + 1) * v]
    }

    /// A copy with new logits sharing this policy's tree.
    pub fn with_params(&self, logits: Vec<f64>) -> Self {
        assert_eq!(logits.len(), self.logits.len());
        Self {
            tree: self.tree.clone(),
            logits,
            temperature: self.temperature,
        }
    }
}

impl Policy for TabularPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Tabular
    }

    fn vocab_size(&self) -> usize {
        self.tree.vocab_size()
    }

    fn temperature(&self) -> f64 {
        self.temperature
    }

    fn params(&self) -> &[f64] {
        &self.logits
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    /// States outside the tree get all-zero (uniform) logits.
    fn logits(&self, prompt: &[Token], generated: &[Token]) -> Vec<f64> {
        match self.tree.lookup(prompt, generated) {
            Some(id) => self.logits_row(id).to_vec(),
            None => vec![0.0; self.tree.vocab_size()],
        }
    }

    fn accumulate_grad(&self, prompt: &[Token], generated: &[Token], dlogits: &[f64], grad: &mut [f64]) {
        if let Some(id) = self.tree.lookup(prompt, generated) {
            let v = self.tree.vocab_size();
            for (g, d) in grad[id * v..(id + 1) * v].iter_mut().zip(dlogits) {
                *g += d;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TinySeqConfig {
    pub embed_dim: usize,
    pub window: usize,
    pub hidden: usize,
}

impl Default for TinySeqConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            window: 8,
            hidden: 32,
        }
    }
}

impl TinySeqConfig {
    pub fn num_params(&self, vocab_size: usize) -> usize {
        let d = self.embed_dim;
        let k = self.window;
        let h = self.hidden;
        (vocab_size + 1) * d + h * k * d + h + vocab_size * h + vocab_size
    }
}

/// Window encoder: embeddings of the last `window` tokens (left-padded with a
/// dedicated pad embedding) are concatenated, passed through one `tanh`
/// hidden layer, and projected to vocabulary logits.
#[derive(Debug, Clone, PartialEq)]
pub struct TinySeqPolicy {
    config: TinySeqConfig,
    vocab_size: usize,
    temperature: f64,
    params: Vec<f64>,
}

struct Layout {
    emb: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

struct Activations {
    window: Vec<usize>,
    input: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl TinySeqPolicy {
    /// Parameters drawn from `N(0, 0.02^2)`.
    pub fn new(config: TinySeqConfig, vocab_size: usize, temperature: f64, seed: u64) -> Self {
        Self::with_init_std(config, vocab_size, temperature, 0.02, seed)
    }

    pub fn with_init_std(config: TinySeqConfig, vocab_size: usize, temperature: f64, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..config.num_params(vocab_size))
            .map(|_| std * gaussian(&mut rng))
            .collect();
        Self {
            config,
            vocab_size,
            temperature,
            params,
        }
    }

    pub fn from_params(config: TinySeqConfig, vocab_size: usize, temperature: f64, params: Vec<f64>) -> Result<Self> {
        if config.embed_dim == 0 || config.window == 0 || config.hidden == 0 {
            return Err(Error::InvalidConfig("tiny-seq dimensions must be positive".into()));
        }
        let expected = config.num_params(vocab_size);
        if params.len() != expected {
            return Err(Error::ShapeMismatch(alloc::format!(
                "expected {expected} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self {
            config,
            vocab_size,
            temperature,
            params,
        })
    }

    pub fn config(&self) -> TinySeqConfig {
        self.config
    }

    fn layout(&self) -> Layout {
        let d = self.config.embed_dim;
        let k = self.config.window;
        let h = self.config.hidden;
        let emb = 0;
        let w1 = emb + (self.vocab_size + 1) * d;
        let b1 = w1 + h * k * d;
        let w2 = b1 + h;
        let b2 = w2 + self.vocab_size * h;
        Layout { emb, w1, b1, w2, b2 }
    }

    fn forward(&self, prompt: &[Token], generated: &[Token]) -> Activations {
        let TinySeqConfig {
            embed_dim: d,
            window: k,
            hidden: h,
        } = self.config;
        let v = self.vocab_size;
        let lay = self.layout();
        let p = &self.params;

        let pad = v;
        let total = prompt.len() + generated.len();
        let window: Vec<usize> = (0..k)
            .map(|i| {
                // slot i holds context position total - k + i
                let pos = (total + i).checked_sub(k);
                match pos {
                    Some(pos) if pos < prompt.len() => prompt[pos] as usize,
                    Some(pos) => generated[pos - prompt.len()] as usize,
                    None => pad,
                }
            })
            .collect();

        let mut input = Vec::with_capacity(k * d);
        for &tok in &window {
            input.extend_from_slice(&p[lay.emb + tok * d..lay.emb + (tok + 1) * d]);
        }
        let hidden: Vec<f64> = (0..h)
            .map(|j| {
                let row = &p[lay.w1 + j * k * d..lay.w1 + (j + 1) * k * d];
                let pre: f64 = row.iter().zip(&input).map(|(w, x)| w * x).sum::<f64>() + p[lay.b1 + j];
                libm::tanh(pre)
            })
            .collect();
        let logits = (0..v)
            .map(|a| {
                let row = &p[lay.w2 + a * h..lay.w2 + (a + 1) * h];
                row.iter().zip(&hidden).map(|(w, x)| w * x).sum::<f64>() + p[lay.b2 + a]
            })
            .collect();
        Activations {
            window,
            input,
            hidden,
            logits,
        }
    }
}

impl Policy for TinySeqPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::TinySeq
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn temperature(&self) -> f64 {
        self.temperature
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn logits(&self, prompt: &[Token], generated: &[Token]) -> Vec<f64> {
        self.forward(prompt, generated).logits
    }

    fn accumulate_grad(&self, prompt: &[Token], generated: &[Token], dlogits: &[f64], grad: &mut [f64]) {
        let TinySeqConfig {
            embed_dim: d,
            window: k,
            hidden: h,
        } = self.config;
        let lay = self.layout();
        let p = &self.params;
        let act = self.forward(prompt, generated);

        let mut dhidden = vec![0.0; h];
        for (a, &g) in dlogits.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[lay.b2 + a] += g;
            let base = lay.w2 + a * h;
            for j in 0..h {
                grad[base + j] += g * act.hidden[j];
                dhidden[j] += g * p[base + j];
            }
        }
        let mut dinput = vec![0.0; k * d];
        for j in 0..h {
            let dpre = dhidden[j] * (1.0 - act.hidden[j] * act.hidden[j]);
            if dpre == 0.0 {
                continue;
            }
            grad[lay.b1 + j] += dpre;
            let base = lay.w1 + j * k * d;
            for i in 0..k * d {
                grad[base + i] += dpre * act.input[i];
                dinput[i] += dpre * p[base + i];
            }
        }
        for (slot, &tok) in act.window.iter().enumerate() {
            let base = lay.emb + tok * d;
            for i in 0..d {
                grad[base + i] += dinput[slot * d + i];
            }
        }
    }
}

/// Either policy kind behind one type, for checkpoints and the CLI.
#[derive(Debug, Clone)]
pub enum AnyPolicy {
    Tabular(TabularPolicy),
    TinySeq(TinySeqPolicy),
}

impl Policy for AnyPolicy {
    fn kind(&self) -> PolicyKind {
        match self {
            Self::Tabular(p) => p.kind(),
            Self::TinySeq(p) => p.kind(),
        }
    }

    fn vocab_size(&self) -> usize {
        match self {
            Self::Tabular(p) => p.vocab_size(),
            Self::TinySeq(p) => p.vocab_size(),
        }
    }

    fn temperature(&self) -> f64 {
        match self {
            Self::Tabular(p) => p.temperature(),
            Self::TinySeq(p) => p.temperature(),
        }
    }

    fn params(&self) -> &[f64] {
        match self {
            Self::Tabular(p) => p.params(),
            Self::TinySeq(p) => p.params(),
        }
    }

    fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Self::Tabular(p) => p.params_mut(),
            Self::TinySeq(p) => p.params_mut(),
        }
    }

    fn logits(&self, prompt: &[Token], generated: &[Token]) -> Vec<f64> {
        match self {
            Self::Tabular(p) => p.logits(prompt, generated),
            Self::TinySeq(p) => p.logits(prompt, generated),
        }
    }

    fn accumulate_grad(&self, prompt: &[Token], generated: &[Token], dlogits: &[f64], grad: &mut [f64]) {
        match self {
            Self::Tabular(p) => p.accumulate_grad(prompt, generated, dlogits, grad),
            Self::TinySeq(p) => p.accumulate_grad(prompt, generated, dlogits, grad),
        }
    }
}

/// Standard normal draw (Box-Muller).
pub fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    libm::sqrt(-2.0 * ln(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn default_for(kind: PolicyKind) -> Self {
        Self {
            epochs: 100,
            batch_size: None,
            optimizer: OptimizerConfig::default_for(kind),
            seed: 0,
        }
    }
}

/// Mean negative log-likelihood of a corpus and its gradient.
pub fn sft_loss_and_grad<P: Policy + ?Sized>(pi: &P, mdp: &TokenMdp, corpus: &[Trajectory]) -> Result<(f64, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = corpus.len() as f64;
    let mut grad = vec![0.0; pi.num_params()];
    let mut loss = 0.0;
    for traj in corpus {
        let (total, _) = logprob(pi, mdp, traj)?;
        loss -= total / n;
        accumulate_logprob_grad(pi, mdp, traj, -1.0 / n, &mut grad);
    }
    Ok((loss, grad))
}

/// Supervised fine-tuning by gradient descent on the mean NLL.
///
/// Returns the full-corpus loss measured at the start of every epoch plus the
/// final loss.
pub fn sft_train<P: Policy + ?Sized>(
    pi: &mut P,
    mdp: &TokenMdp,
    corpus: &[Trajectory],
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for t in corpus {
        mdp.validate_trajectory(t)?;
    }
    let mut opt = Optimizer::new(config.optimizer, pi.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs + 1);
    let mut last_good = pi.params().to_vec();
    for epoch in 0..=config.epochs {
        let (loss, full_grad) = sft_loss_and_grad(pi, mdp, corpus)?;
        if !loss.is_finite() {
            pi.params_mut().copy_from_slice(&last_good);
            return Err(Error::Diverged { step: epoch, last_good });
        }
        losses.push(loss);
        last_good.copy_from_slice(pi.params());
        if epoch == config.epochs {
            break;
        }
        match config.batch_size {
            None => opt.step(pi.params_mut(), &full_grad),
            Some(bs) => {
                order.shuffle(&mut rng);
                for chunk in order.chunks(bs.max(1)) {
                    let batch: Vec<Trajectory> = chunk.iter().map(|&i| corpus[i].clone()).collect();
                    let (_, g) = sft_loss_and_grad(pi, mdp, &batch)?;
                    opt.step(pi.params_mut(), &g);
                }
            }
        }
    }
    Ok(losses)
}

/// `count` distinct coordinates in `[0, n)`, or all of them when `count >= n`.
pub fn sample_coordinates(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    if count >= n {
        return all;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    all.truncate(count);
    all.sort_unstable();
    all
}

/// Max relative error between the analytic gradient and central differences
/// over `coords`, using the `max(|analytic|, |numeric|, 1e-8)` denominator.
pub fn grad_check<P, F>(pi: &P, objective: F, coords: &[usize], eps: f64) -> Result<f64>
where
    P: Policy + Clone,
    F: Fn(&P) -> Result<(f64, Vec<f64>)>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::InvalidConfig(alloc::format!("eps must lie in (0, 1e-3], got {eps}")));
    }
    let (_, analytic) = objective(pi)?;
    let mut probe = pi.clone();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + eps;
        let (plus, _) = objective(&probe)?;
        probe.params_mut()[i] = orig - eps;
        let (minus, _) = objective(&probe)?;
        probe.params_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}
