//! Monte Carlo laboratory for insider trading under short-sale prohibition.
//!
//! The crate simulates two enlargement-of-filtration models and measures, on
//! finite ensembles, the objects that decide whether an insider has a free
//! lunch: the minimal martingale density `R = E(-∫α dM)`, the minimal
//! supermartingale density `R⁺ = E(-∫α⁺ dM)`, their martingale defects, the
//! relative-entropy characterisation of the supermartingale measure and the
//! wealth of long-only versus short strategies.
//!
//! Module map:
//!
//! * [`engine`]: time grids, counter-based Brownian ensembles, chunked path-parallel drivers.
//! * [`calculus`]: Itô integrals, quadratic variation, stochastic exponentials, increment tests.
//! * [`measures`]: weighted expectations, martingale defects, relative entropy, supermartingale audits.
//! * [`honest_time`]: `X = E(σW)` enlarged with the last passage time at the overall supremum.
//! * [`density_lab`]: the `Q*`-world with `dP = D*_T dQ*` in absorbing and stopped variants.
//! * [`strategies`]: self-financing wealth, long-only enforcement and arbitrage audits.
//! * [`factorization`]: products of orthogonal strictly positive exponential martingales.

pub mod calculus;
pub mod density_lab;
pub mod engine;
pub mod error;
pub mod factorization;
pub mod honest_time;
pub mod measures;
pub mod stats;
pub mod strategies;

pub use error::{LabError, Result};
