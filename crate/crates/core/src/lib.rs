//! Portfolio optimization under delayed factor models.
//!
//! The factor `Y` enters the market coefficients directly, through the
//! exponentially weighted average `V` of its past and through the lagged
//! value `Z = Y(t - delta)`. An investor with power utility picks the
//! fraction of wealth held in each stock. The crate provides
//!
//! - simulation of the delayed factor system and of wealth ([`delay_sde`]),
//! - a least-squares Monte Carlo solver for the quadratic adjoint BSDE
//!   whose solution yields the optimal strategy ([`fbsde_solver`]),
//! - closed forms for the linear-quadratic special cases ([`closed_form`]),
//! - the dual martingale method for complete markets ([`martingale_method`]),
//! - Monte Carlo checks of the optimality statements ([`verify`]).

pub mod error;
pub mod market_model;
pub mod delay_sde;
pub mod regression;
pub mod stats;
pub mod fbsde_solver;
pub mod closed_form;
pub mod martingale_method;
pub mod verify;

pub use error::{Error, Result};
