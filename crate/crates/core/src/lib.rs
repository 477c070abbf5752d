//! Mollified-particle solvers for the Vlasov hierarchy: Vlasov-Poisson, the
//! post-Newtonian Darwin triple, Darwin-Vlasov-Maxwell and the full
//! relativistic Vlasov-Maxwell system via retarded-time field sums.
//!
//! Every model shares one Plummer softening length so that differences
//! between models keep the asymptotic order in `1/c` of the continuum theory.

pub mod cli;
pub mod config;
pub mod darwin;
pub mod dvm;
pub mod ensemble;
pub mod harness;
pub mod history;
pub mod kernels;
pub mod output;
pub mod quad;
pub mod rvm;
pub mod sum;
pub mod vp;

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
pub type Vec6 = nalgebra::Vector6<f64>;
pub type Mat6 = nalgebra::Matrix6<f64>;

/// Errors shared by all solvers.
#[derive(Debug, thiserror::Error)]
pub enum SolverError {
    #[error("history read at t = {t} outside recorded range [{lo}, {hi}]")]
    Range { t: f64, lo: f64, hi: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("fixed-point iteration did not converge in {iters} iterations (residual {residual:e})")]
    NoConvergence { iters: usize, residual: f64 },
    #[error("marker speed reached {speed:e} >= 0.999 c")]
    Superluminal { speed: f64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SolverError>;
