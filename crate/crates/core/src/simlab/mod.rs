//! Simulated staggered rollouts with known effects, and Monte Carlo runs of
//! the estimators on them.

mod dgp;
mod mc;

pub use dgp::{
    generate, generate_rep, named_schemes, true_estimand, DgpConfig, EffectProfile, LaunchProcess, Noise, Truth,
    ATTRIBUTE_PREFIX, NAMED_ESTIMANDS,
};
pub use mc::{monte_carlo, EstimatorSpec, McDraw, McOptions, McReport};
