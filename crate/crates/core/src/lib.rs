//! Exact simulation and numerical verification of bifractional Brownian motion.
//!
//! The process `B^{H,K}` is the centered Gaussian process with covariance
//! `R(t, s) = 2^{-K} ((t^{2H} + s^{2H})^K - |t - s|^{2HK})`.

pub mod calculus;
pub mod chaos;
pub mod covariance;
pub mod error;
pub mod experiment;
pub mod kernels;
pub mod params;
pub mod potential;
pub mod quadrature;
pub mod simulator;
pub mod stats;

pub use calculus::{
    ito_deterministic_residual, ito_pathwise_residual, occupation_identity_check, quadratic_variation,
    skorohod_estimate, tanaka_residual, weighted_local_time, EpsSchedule, LocalTimeEstimate,
    TestFunction, TimeTestFunction,
};
pub use chaos::{
    beta_coeff, local_time_chaos_moment, local_time_coeff_1d, multi_local_time_coeff,
    multiple_integral_inner, tail_exponent_estimate, watanabe_partial_norm, ChaosSeries, FitRange,
    TailFit, WatanabeIndex,
};
pub use covariance::{
    abs_h_norm, covariance, h_fn, mixed_partial, quasi_helix_bounds, scaled_h, variogram, HNorm,
    TimeFunction,
};
pub use error::{Error, QuadratureFailure, Result};
pub use experiment::{
    describe, list_experiments, run, validate_report, ExperimentConfig, ExperimentKind, ExperimentReport, Metric,
};
pub use kernels::{
    gauss_kernel, hermite, hermite_orthogonality, mollifier, mollifier_prime, MollifierParam,
};
pub use params::{HurstParams, MultiParams, Regime};
pub use potential::{
    envelope_checks, harmonicity_residual, laplace_identity_residual, mollified_multidim_tanaka,
    multidim_ito_residual, newtonian_u, u_bar, u_bar_derivatives, EnvelopeReport, MollifiedProfile,
    MultiTanakaReport, PotentialSpec, UBarDerivatives,
};
pub use quadrature::{GaussianRule, QuadResult, QuadSpec};
pub use stats::{LinearFit, MeanEstimate};
pub use simulator::{
    covariance_matrix, factorize, sample_paths, self_similarity_check, CholeskyFactor, PathEnsemble,
    PathSampler, PathSource, SelfSimilarityReport, StreamedEnsemble, SymMatrix, TimeGrid,
};
