//! Policy evaluation with infrequently refreshed target parameters on finite
//! MDPs, together with the spectral diagnostics that predict when those runs
//! converge: TD(0), fitted and partially fitted evaluation, Jacobian
//! assembly, the condition function and its derived stability quantities.

// Evaluation entry points take the full (mdp, approximator, d, mu, pi)
// bundle plus their own parameters.
#![allow(clippy::too_many_arguments)]

pub mod approximator;
pub mod engine;
pub mod linalg;
pub mod mdp;
pub mod spectral;

pub use approximator::{
    clip_vector, Approximator, FeatureMap, LinearApproximator, MlpApproximator, MlpSpec,
};
pub use engine::{
    expected_td_vector, fpe_solve_linear, pfpe_inner_step, regularised_td_vector, run_pfpe,
    target_update, td_error_vector, td_fixed_point_linear, EngineError, Regularisation, RunConfig,
    RunMode, RunTrace, StepSizeSchedule, TargetUpdateRule, TraceEntry,
};
pub use mdp::{
    build_baird, cycle2, lookahead_distribution, random_ergodic_mdp, random_policy,
    sample_transition, self_loop, stationary_distribution, BairdSetup, FiniteMdp, MdpError, Policy,
    StateDistribution, Transition,
};
pub use spectral::{
    analyze, condition_function, corollary_bound_curve, fpe_stability_norm, gram_matrices,
    lambda_h_star, loss_hessian_linear, low_distribution_shift_check, min_k_for_contraction,
    nonlinear_jacobian_bound, outer_map_spectral_radius, path_mean_jacobians_numeric,
    pointwise_jacobians, regularised_jacobians, sigma_k, td_jacobian_linear, AnalysisOptions,
    GramMatrices, JacobianKind, JacobianSet, RegionSpec, SpectralError, SpectralReport,
    SpectralVerdicts,
};

/// Parameter vectors are plain dense vectors; finiteness is enforced at
/// configuration boundaries and by the engine's blow-up detector.
pub type ParamVector = nalgebra::DVector<f64>;
