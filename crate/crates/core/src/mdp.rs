//! The deterministic token MDP.
//!
//! A state is a prompt followed by the tokens generated so far. Taking action `a`
//! appends `a`. Emitting the end-of-sequence token terminates the episode, and a
//! response may hold at most `max_response_len` tokens including that final EOS,
//! so the only legal action at depth `max_response_len - 1` is EOS.
//!
//! Because transitions only ever append, distinct action sequences from one
//! prompt reach distinct states and the reachable state space is a tree.
//! [`StateTree`] materializes that tree for exact dynamic programming.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use crate::{Error, Result};

pub type Token = u32;

pub type NodeId = usize;

/// Default bound on `(|A| - 1)^(T_max - 1)` for exhaustive enumeration.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMdp {
    vocab_size: usize,
    eos: Token,
    max_response_len: usize,
    prompts: Vec<Vec<Token>>,
}

impl TokenMdp {
    pub fn new(
        vocab_size: usize,
        eos: Token,
        max_response_len: usize,
        prompts: Vec<Vec<Token>>,
    ) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::InvalidMdp("vocab_size must be positive".into()));
        }
        if eos as usize >= vocab_size {
            return Err(Error::InvalidMdp(format!(
                "eos_id {eos} not below vocab_size {vocab_size}"
            )));
        }
        if max_response_len == 0 {
            return Err(Error::InvalidMdp("max_response_len must be at least 1".into()));
        }
        if prompts.is_empty() {
            return Err(Error::InvalidMdp("at least one prompt is required".into()));
        }
        for (i, p) in prompts.iter().enumerate() {
            if let Some(&t) = p.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::InvalidMdp(format!(
                    "prompt {i} holds token {t} outside the vocabulary"
                )));
            }
            if prompts[..i].contains(p) {
                return Err(Error::InvalidMdp(format!("prompt {i} is a duplicate")));
            }
        }
        Ok(Self {
            vocab_size,
            eos,
            max_response_len,
            prompts,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn eos(&self) -> Token {
        self.eos
    }

    pub fn max_response_len(&self) -> usize {
        self.max_response_len
    }

    pub fn prompts(&self) -> &[Vec<Token>] {
        &self.prompts
    }

    pub fn prompt_index(&self, prompt: &[Token]) -> Option<usize> {
        self.prompts.iter().position(|p| p.as_slice() == prompt)
    }

    pub fn initial_state(&self, prompt: usize) -> State {
        State {
            prompt: self.prompts[prompt].clone(),
            generated: Vec::new(),
            terminal: false,
        }
    }

    /// True when a nonterminal state with this many generated tokens may only emit EOS.
    pub fn is_forced_depth(&self, generated_len: usize) -> bool {
        generated_len + 1 >= self.max_response_len
    }

    /// `(|A| - 1)^(T_max - 1)`, the number of responses of maximal length.
    pub fn enumeration_size(&self) -> u128 {
        (self.vocab_size as u128 - 1).saturating_pow(self.max_response_len as u32 - 1)
    }

    /// Number of valid responses per prompt: `sum_{n < T_max} (|A| - 1)^n`.
    pub fn responses_per_prompt(&self) -> u128 {
        let base = self.vocab_size as u128 - 1;
        (0..self.max_response_len as u32).fold(0u128, |acc, n| {
            acc.saturating_add(base.saturating_pow(n))
        })
    }

    pub fn check_cap(&self, cap: u64) -> Result<()> {
        let count = self.enumeration_size();
        if count > cap as u128 {
            return Err(Error::CapExceeded { count, cap });
        }
        Ok(())
    }

    pub fn validate_response(&self, response: &[Token]) -> Result<()> {
        let Some((&last, body)) = response.split_last() else {
            return Err(Error::InvalidResponse("empty response".into()));
        };
        if response.len() > self.max_response_len {
            return Err(Error::InvalidResponse(format!(
                "length {} exceeds max_response_len {}",
                response.len(),
                self.max_response_len
            )));
        }
        if let Some(&t) = response.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab_size: self.vocab_size,
            });
        }
        if last != self.eos {
            return Err(Error::InvalidResponse("response does not end with EOS".into()));
        }
        if body.contains(&self.eos) {
            return Err(Error::InvalidResponse("EOS before the final position".into()));
        }
        Ok(())
    }

    /// Checks the prompt belongs to this MDP and the response obeys the EOS rules.
    pub fn validate_trajectory(&self, traj: &Trajectory) -> Result<usize> {
        let idx = self.prompt_index(&traj.prompt).ok_or(Error::UnknownPrompt)?;
        self.validate_response(&traj.response)?;
        Ok(idx)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct State {
    pub prompt: Vec<Token>,
    pub generated: Vec<Token>,
    pub terminal: bool,
}

/// `f(s, a) = s | a`.
pub fn step(mdp: &TokenMdp, s: &State, a: Token) -> Result<State> {
    if s.terminal {
        return Err(Error::TerminalState);
    }
    if a as usize >= mdp.vocab_size {
        return Err(Error::TokenOutOfRange {
            token: a,
            vocab_size: mdp.vocab_size,
        });
    }
    if mdp.is_forced_depth(s.generated.len()) && a != mdp.eos {
        return Err(Error::ForcedEos);
    }
    let mut generated = s.generated.clone();
    generated.push(a);
    let terminal = a == mdp.eos || generated.len() >= mdp.max_response_len;
    Ok(State {
        prompt: s.prompt.clone(),
        generated,
        terminal,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Trajectory {
    pub prompt: Vec<Token>,
    pub response: Vec<Token>,
}

impl Trajectory {
    pub fn new(prompt: Vec<Token>, response: Vec<Token>) -> Self {
        Self { prompt, response }
    }

    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    /// `(generated prefix, action)` for every step of the response.
    pub fn steps(&self) -> impl Iterator<Item = (&[Token], Token)> + '_ {
        self.response
            .iter()
            .enumerate()
            .map(move |(t, &a)| (&self.response[..t], a))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum LabelSource {
    #[default]
    Sampled,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PreferencePair {
    pub prompt: Vec<Token>,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
    pub label_source: LabelSource,
}

impl PreferencePair {
    pub fn chosen_trajectory(&self) -> Trajectory {
        Trajectory::new(self.prompt.clone(), self.chosen.clone())
    }

    pub fn rejected_trajectory(&self) -> Trajectory {
        Trajectory::new(self.prompt.clone(), self.rejected.clone())
    }
}

/// Checks both responses are valid continuations of a known prompt and differ.
pub fn validate_pair(mdp: &TokenMdp, p: &PreferencePair) -> Result<()> {
    mdp.prompt_index(&p.prompt).ok_or(Error::UnknownPrompt)?;
    mdp.validate_response(&p.chosen)?;
    mdp.validate_response(&p.rejected)?;
    if p.chosen == p.rejected {
        return Err(Error::DegeneratePair);
    }
    Ok(())
}

/// Checks a pair built from two trajectories; fails with `PromptMismatch`
/// when they do not start from the same prompt.
pub fn pair_from_trajectories(
    mdp: &TokenMdp,
    chosen: &Trajectory,
    rejected: &Trajectory,
    label_source: LabelSource,
) -> Result<PreferencePair> {
    if chosen.prompt != rejected.prompt {
        return Err(Error::PromptMismatch);
    }
    let pair = PreferencePair {
        prompt: chosen.prompt.clone(),
        chosen: chosen.response.clone(),
        rejected: rejected.response.clone(),
        label_source,
    };
    validate_pair(mdp, &pair)?;
    Ok(pair)
}

/// All valid responses for `prompt` in lexicographic token-id order.
pub fn enumerate_responses(mdp: &TokenMdp, prompt: &[Token]) -> Result<Vec<Trajectory>> {
    enumerate_responses_with_cap(mdp, prompt, DEFAULT_ENUMERATION_CAP)
}

pub fn enumerate_responses_with_cap(
    mdp: &TokenMdp,
    prompt: &[Token],
    cap: u64,
) -> Result<Vec<Trajectory>> {
    mdp.check_cap(cap)?;
    mdp.prompt_index(prompt).ok_or(Error::UnknownPrompt)?;
    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(mdp.max_response_len);
    enumerate_into(mdp, prompt, &mut prefix, &mut out);
    Ok(out)
}

fn enumerate_into(mdp: &TokenMdp, prompt: &[Token], prefix: &mut Vec<Token>, out: &mut Vec<Trajectory>) {
    let forced = mdp.is_forced_depth(prefix.len());
    for a in 0..mdp.vocab_size as Token {
        if a == mdp.eos {
            let mut response = prefix.clone();
            response.push(a);
            out.push(Trajectory::new(prompt.to_vec(), response));
        } else if !forced {
            prefix.push(a);
            enumerate_into(mdp, prompt, prefix, out);
            prefix.pop();
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub prompt: usize,
    pub prefix: Vec<Token>,
    pub parent: Option<(NodeId, Token)>,
    children: Vec<Option<NodeId>>,
}

/// Every reachable nonterminal state, in depth-first lexicographic preorder.
///
/// Nodes of one prompt are contiguous and every parent precedes its children,
/// so reverse iteration is a valid backward-induction order.
#[derive(Debug, Clone)]
pub struct StateTree {
    mdp: TokenMdp,
    nodes: Vec<Node>,
    prompt_ranges: Vec<Range<NodeId>>,
    all_actions: Vec<Token>,
    eos_only: [Token; 1],
}

impl StateTree {
    pub fn build(mdp: &TokenMdp) -> Result<Self> {
        Self::build_with_cap(mdp, DEFAULT_ENUMERATION_CAP)
    }

    pub fn build_with_cap(mdp: &TokenMdp, cap: u64) -> Result<Self> {
        mdp.check_cap(cap)?;
        let mut nodes = Vec::new();
        let mut prompt_ranges = Vec::with_capacity(mdp.prompts.len());
        for p in 0..mdp.prompts.len() {
            let start = nodes.len();
            let mut prefix = Vec::new();
            Self::grow(mdp, p, None, &mut prefix, &mut nodes);
            prompt_ranges.push(start..nodes.len());
        }
        Ok(Self {
            mdp: mdp.clone(),
            nodes,
            prompt_ranges,
            all_actions: (0..mdp.vocab_size as Token).collect(),
            eos_only: [mdp.eos],
        })
    }

    fn grow(
        mdp: &TokenMdp,
        prompt: usize,
        parent: Option<(NodeId, Token)>,
        prefix: &mut Vec<Token>,
        nodes: &mut Vec<Node>,
    ) -> NodeId {
        let id = nodes.len();
        nodes.push(Node {
            prompt,
            prefix: prefix.clone(),
            parent,
            children: alloc::vec![None; mdp.vocab_size],
        });
        if !mdp.is_forced_depth(prefix.len()) {
            for a in 0..mdp.vocab_size as Token {
                if a == mdp.eos {
                    continue;
                }
                prefix.push(a);
                let child = Self::grow(mdp, prompt, Some((id, a)), prefix, nodes);
                prefix.pop();
                nodes[id].children[a as usize] = Some(child);
            }
        }
        id
    }

    pub fn mdp(&self) -> &TokenMdp {
        &self.mdp
    }

    pub fn vocab_size(&self) -> usize {
        self.mdp.vocab_size
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn root(&self, prompt: usize) -> NodeId {
        self.prompt_ranges[prompt].start
    }

    pub fn prompt_nodes(&self, prompt: usize) -> Range<NodeId> {
        self.prompt_ranges[prompt].clone()
    }

    pub fn num_prompts(&self) -> usize {
        self.prompt_ranges.len()
    }

    pub fn prompt_tokens(&self, prompt: usize) -> &[Token] {
        &self.mdp.prompts[prompt]
    }

    pub fn is_forced(&self, id: NodeId) -> bool {
        self.mdp.is_forced_depth(self.nodes[id].prefix.len())
    }

    /// Legal actions at a node in increasing token order.
    pub fn actions(&self, id: NodeId) -> &[Token] {
        if self.is_forced(id) {
            &self.eos_only
        } else {
            &self.all_actions
        }
    }

    /// Successor node, or `None` when `a` leads to a terminal state.
    pub fn child(&self, id: NodeId, a: Token) -> Option<NodeId> {
        self.nodes[id].children[a as usize]
    }

    pub fn state(&self, id: NodeId) -> State {
        let n = &self.nodes[id];
        State {
            prompt: self.mdp.prompts[n.prompt].clone(),
            generated: n.prefix.clone(),
            terminal: false,
        }
    }

    /// Walks the trie from the prompt root; `None` for unknown prompts,
    /// terminal states, or illegal prefixes.
    pub fn lookup(&self, prompt: &[Token], generated: &[Token]) -> Option<NodeId> {
        let p = self.mdp.prompt_index(prompt)?;
        self.lookup_in(p, generated)
    }

    pub fn lookup_in(&self, prompt: usize, generated: &[Token]) -> Option<NodeId> {
        let mut id = self.root(prompt);
        for &a in generated {
            if a as usize >= self.mdp.vocab_size {
                return None;
            }
            id = self.child(id, a)?;
        }
        Some(id)
    }

    /// `(node, action)` pairs visited by a response.
    pub fn path(&self, prompt: usize, response: &[Token]) -> Result<Vec<(NodeId, Token)>> {
        self.mdp.validate_response(response)?;
        let mut out = Vec::with_capacity(response.len());
        let mut id = self.root(prompt);
        for (t, &a) in response.iter().enumerate() {
            out.push((id, a));
            if t + 1 < response.len() {
                id = self.child(id, a).ok_or_else(|| {
                    Error::InvalidResponse(format!("no successor for token {a} at position {t}"))
                })?;
            }
        }
        Ok(out)
    }

    pub fn trajectory_path(&self, traj: &Trajectory) -> Result<(usize, Vec<(NodeId, Token)>)> {
        let p = self.mdp.prompt_index(&traj.prompt).ok_or(Error::UnknownPrompt)?;
        Ok((p, self.path(p, &traj.response)?))
    }

    /// All responses of one prompt in lexicographic order.
    pub fn responses(&self, prompt: usize) -> Vec<Trajectory> {
        let mut out = Vec::new();
        for id in self.prompt_nodes(prompt) {
            let mut response = self.nodes[id].prefix.clone();
            response.push(self.mdp.eos);
            out.push(Trajectory::new(self.mdp.prompts[prompt].clone(), response));
        }
        // Preorder lists a node before its descendants, but a node's own
        // response `prefix|eos` sorts among its children by the EOS token id.
        out.sort();
        out
    }
}

/// Lookup from a response to its position in [`StateTree::responses`].
pub fn response_positions(responses: &[Trajectory]) -> BTreeMap<Vec<Token>, usize> {
    responses
        .iter()
        .enumerate()
        .map(|(i, t)| (t.response.clone(), i))
        .collect()
}
