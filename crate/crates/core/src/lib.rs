//! Monte Carlo solver for forward-backward SDEs driven by a continuous martingale `M`,
//! with quadratic-growth drivers, the Markov representation `Y = u(t, X, M)`, the control
//! representation `Z = ∂ₓu σ + ∂ₘu`, and utility-indifference hedging on top.
//!
//! Everything is generic over the scalar through [`Real`]; the aliases below fix `f64`
//! (and `f32` with a `32` suffix).

pub mod array;
pub mod bsde;
pub mod error;
pub mod forward;
pub mod hedging;
pub mod linalg;
pub mod markov;
pub mod martingale;
pub mod parallel;
pub mod real;
pub mod regression;

pub use error::{Error, Result};
pub use real::Real;

pub type TimeGrid = martingale::TimeGrid<f64>;
pub type MartingaleModel = martingale::MartingaleModel<f64>;
pub type PathBundle = martingale::PathBundle<f64>;
pub type SdeCoefficients = forward::SdeCoefficients<f64>;
pub type ForwardSolution = forward::ForwardSolution<f64>;
pub type Driver = bsde::Driver<f64>;
pub type TerminalCondition = bsde::TerminalCondition<f64>;
pub type BsdeSolution = bsde::BsdeSolution<f64>;
pub type MarkovProblem = markov::MarkovProblem<f64>;
pub type MarkovSurface = markov::MarkovSurface<f64>;
pub type MarketSpec = hedging::MarketSpec<f64>;

pub type TimeGrid32 = martingale::TimeGrid<f32>;
pub type MartingaleModel32 = martingale::MartingaleModel<f32>;
pub type PathBundle32 = martingale::PathBundle<f32>;
pub type SdeCoefficients32 = forward::SdeCoefficients<f32>;
pub type Driver32 = bsde::Driver<f32>;
pub type TerminalCondition32 = bsde::TerminalCondition<f32>;
pub type BsdeSolution32 = bsde::BsdeSolution<f32>;
pub type MarkovProblem32 = markov::MarkovProblem<f32>;
