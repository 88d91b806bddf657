use thiserror::Error;

/// Errors raised by the simulation and solver stack.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("model domain error: {0}")]
    ModelDomain(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("capacity exceeded: need {required} bytes, budget is {budget} bytes")]
    Capacity { required: usize, budget: usize },

    #[error("bracket bound Q = {bound} exceeded on path {path} at step {step}")]
    BracketBound {
        bound: f64,
        path: usize,
        step: usize,
    },

    #[error("non-finite state on path {path} at step {step}")]
    BlowUp { path: usize, step: usize },

    #[error("inconsistent input: {0}")]
    Inconsistent(String),

    #[error("regression is rank deficient (condition number {condition:.3e})")]
    RankDeficient { condition: f64 },

    #[error("not enough samples for regression: {samples} samples for {basis} basis functions")]
    TooFewSamples { samples: usize, basis: usize },

    #[error("Picard iteration did not converge in {iterations} iterations (last sup difference {last:.3e})")]
    IterationLimit {
        iterations: usize,
        last: f64,
        history: Vec<f64>,
    },

    #[error("truncation bound active at convergence: {0}")]
    TruncationBinding(String),

    #[error("degenerate market: {0}")]
    MarketDegenerate(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("at node (t={t}, x={x:?}, m={m:?}): {source}")]
    AtNode {
        t: f64,
        x: Vec<f64>,
        m: Vec<f64>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for errors that come from resource limits rather than bad input or numerics.
    pub fn is_capacity(&self) -> bool {
        match self {
            Error::Capacity { .. } => true,
            Error::AtNode { source, .. } => source.is_capacity(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
