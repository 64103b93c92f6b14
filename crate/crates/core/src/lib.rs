//! Stochastic optimal control of slow/fast bilinear linear-quadratic systems.
//!
//! The value function is computed from an uncoupled forward-backward SDE by
//! least-squares Monte Carlo ([`fbsde`]), and compared with the value of the
//! homogenized slow problem ([`reduction`]) as the time-scale parameter ε goes
//! to zero. [`oracles`] provides reference values that do not go through the
//! regression, and [`experiment`] drives configured runs.

pub mod config;
pub mod error;
pub mod experiment;
pub mod fbsde;
pub mod model;
pub mod numcore;
pub mod oracles;
pub mod reduction;
pub mod sde;

pub use error::{Error, Result};

// The guide's code blocks run as doctests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/regression.md")]
    mod regression {}
    #[doc = include_str!("../../../book/src/homogenization.md")]
    mod homogenization {}
    #[doc = include_str!("../../../book/src/oracles.md")]
    mod oracles {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
