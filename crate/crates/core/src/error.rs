use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid mdp: {0}")]
    InvalidMdp(String),
    #[error("terminal state")]
    TerminalState,
    #[error("token {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },
    #[error("only the end-of-sequence token may be emitted at the maximum response length")]
    ForcedEos,
    #[error("enumeration cap exceeded: {count} states exceed cap {cap}")]
    CapExceeded { count: u128, cap: u64 },
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("unknown prompt")]
    UnknownPrompt,
    #[error("prompt mismatch")]
    PromptMismatch,
    #[error("degenerate pair: chosen and rejected responses are identical")]
    DegeneratePair,
    #[error("zero reference probability for token {token}")]
    ZeroReferenceProbability { token: u32 },
    #[error("table shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("potential is nonzero ({value}) at a terminal state")]
    NonzeroTerminalPotential { value: f64 },
    #[error("missing table entry: {0}")]
    MissingEntry(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NotConverged { iterations: usize, grad_norm: f64 },
    #[error("non-finite loss at step {step}")]
    Diverged {
        step: usize,
        /// Parameters from the last step with a finite loss.
        last_good: Vec<f64>,
    },
}

pub type Result<T> = core::result::Result<T, Error>;
