//! Exact Gaussian posteriors, dense brute-force validators and ensemble
//! statistics. Everything here is ground truth for the tests and the
//! benchmark harnesses; nothing in the samplers depends on it.

mod dense;
mod identities;
mod posterior;
mod stats;

pub use dense::{
    dense_build, dense_build_cov, dense_conditional_log_density, dense_conditional_score, DenseGaussianProblem, DENSE_BUILD_LIMIT,
    DENSE_SCORE_MAX_DIM,
};
pub use identities::{identity_suite, IdentityCheck, IdentityReport, IdentitySuiteConfig};
pub use posterior::{exact_posterior, exact_posterior_with, GaussianPosterior};
pub use stats::{energy_distance, energy_permutation_test, ensemble_moments, ensemble_stats, EnergyTest, StatsReport};
