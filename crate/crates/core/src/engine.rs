//! Update rules and experiment runs: sampled and expected TD-error vectors,
//! the regularised variant, inner steps with periodic or momentum target
//! refreshes, exact fitted solves for the linear case, and TD fixed points.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approximator::{clip_vector, Approximator};
use crate::mdp::{sample_transition, FiniteMdp, Policy, StateDistribution, Transition};
use crate::spectral::{gram_matrices, GramMatrices};

pub const DEFAULT_BLOW_UP_THRESHOLD: f64 = 1e8;

/// Conventional TD-vector clipping radius for nonlinear approximators;
/// linear exact-expectation runs leave clipping disabled.
pub const DEFAULT_CLIP_THRESHOLD: f64 = 1e3;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("parameters diverged at inner step {step} (norm exceeded blow-up threshold)")]
    Diverged { step: usize, partial: RunTrace },
    #[error("feature Gram matrix is numerically singular and the ridge fallback is disabled")]
    SingularGramMatrix,
    #[error("TD fixed-point system is singular (smallest singular value {min_singular_value:.3e}) and inconsistent")]
    SingularSystem { min_singular_value: f64 },
    #[error("target update requested at step {step}, which is not a multiple of k = {k}")]
    CalledOffSchedule { step: usize, k: usize },
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
}

/// Step sizes α_l, indexed by the target-update count l.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSizeSchedule {
    Constant {
        alpha: f64,
    },
    /// α_l = α₀ / (1 + l)^p with 0.5 < p ≤ 1, so Σα = ∞ and Σα² < ∞.
    RobbinsMunro {
        alpha0: f64,
        p: f64,
    },
}

impl StepSizeSchedule {
    pub fn alpha(&self, l: usize) -> f64 {
        match self {
            StepSizeSchedule::Constant { alpha } => *alpha,
            StepSizeSchedule::RobbinsMunro { alpha0, p } => alpha0 / (1.0 + l as f64).powf(*p),
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        match self {
            StepSizeSchedule::Constant { alpha } if *alpha > 0.0 => Ok(()),
            StepSizeSchedule::Constant { alpha } => Err(EngineError::InvalidConfig(format!(
                "constant alpha {alpha} must be > 0"
            ))),
            StepSizeSchedule::RobbinsMunro { alpha0, p } => {
                if *alpha0 <= 0.0 {
                    return Err(EngineError::InvalidConfig(format!(
                        "alpha0 {alpha0} must be > 0"
                    )));
                }
                if !(*p > 0.5 && *p <= 1.0) {
                    return Err(EngineError::InvalidConfig(format!(
                        "Robbins-Munro exponent p = {p} must satisfy 0.5 < p <= 1"
                    )));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetUpdateRule {
    PeriodicCopy,
    /// ω̄ ← (1−μ)·ω_i + μ·(ω_{i−k} − ω_{i−2k}) at refresh steps.
    Momentum {
        mu: f64,
    },
}

impl TargetUpdateRule {
    pub fn validate(&self) -> Result<(), EngineError> {
        if let TargetUpdateRule::Momentum { mu } = self {
            if !(0.0..=1.0).contains(mu) {
                return Err(EngineError::InvalidConfig(format!(
                    "momentum coefficient {mu} must lie in [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Mixing/strength coefficients for the regularised TD vector. Disabled
/// regularisation leaves the update exactly equal to the plain TD vector.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Regularisation {
    pub enabled: bool,
    #[serde(default)]
    pub mix: f64,
    #[serde(default)]
    pub eta: f64,
}

impl Default for Regularisation {
    fn default() -> Self {
        Regularisation {
            enabled: false,
            mix: 1.0,
            eta: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunMode {
    Sampled {
        seed: u64,
    },
    /// Replace every sampled TD vector by its exact enumeration under the
    /// MDP, removing all Monte Carlo noise.
    ExactExpectation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub schedule: StepSizeSchedule,
    /// Inner steps per target refresh.
    pub k: usize,
    pub n_target_updates: usize,
    #[serde(default = "default_rule")]
    pub target_rule: TargetUpdateRule,
    #[serde(default)]
    pub regularisation: Regularisation,
    pub mode: RunMode,
    /// TD-vector clipping radius; None disables clipping.
    #[serde(default)]
    pub clip: Option<f64>,
    #[serde(default)]
    pub gamma_override: Option<f64>,
    /// Initial parameters; defaults to zero for linear approximators and to
    /// a seeded uniform [-0.5, 0.5] draw for the MLP.
    #[serde(default)]
    pub omega0: Option<Vec<f64>>,
    #[serde(default = "default_blow_up")]
    pub blow_up_threshold: f64,
}

fn default_rule() -> TargetUpdateRule {
    TargetUpdateRule::PeriodicCopy
}

fn default_blow_up() -> f64 {
    DEFAULT_BLOW_UP_THRESHOLD
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.k < 1 {
            return Err(EngineError::InvalidConfig("k must be >= 1".into()));
        }
        if self.n_target_updates < 1 {
            return Err(EngineError::InvalidConfig(
                "n_target_updates must be >= 1".into(),
            ));
        }
        if let Some(c) = self.clip {
            if c <= 0.0 {
                return Err(EngineError::InvalidConfig(format!("clip {c} must be > 0")));
            }
        }
        if let Some(g) = self.gamma_override {
            if !(0.0..1.0).contains(&g) {
                return Err(EngineError::InvalidConfig(format!(
                    "gamma override {g} not in [0,1)"
                )));
            }
        }
        self.schedule.validate()?;
        self.target_rule.validate()?;
        if self.regularisation.enabled && !(0.0..=1.0).contains(&self.regularisation.mix) {
            return Err(EngineError::InvalidConfig(format!(
                "regularisation mix {} not in [0,1]",
                self.regularisation.mix
            )));
        }
        Ok(())
    }
}

/// State recorded at target-update index l.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub l: usize,
    /// Total inner steps executed when this entry was recorded (k·l).
    pub step: usize,
    pub omega_bar: DVector<f64>,
    /// ‖δ(ω̄_l, ω̄_l)‖ computed by exact expectation — the fitted error.
    pub td_error_norm: f64,
    /// ‖ω̄_l − ω*‖ when a fixed point is supplied.
    pub dist_to_fixed_point: Option<f64>,
    pub param_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunTrace {
    pub entries: Vec<TraceEntry>,
}

impl RunTrace {
    pub fn final_entry(&self) -> &TraceEntry {
        self.entries.last().expect("trace has the l=0 entry")
    }
}

/// Sampled TD-error vector
/// δ(ω, ω', ς) = (r + γ·Q_{ω'}(s',a') − Q_ω(s,a)) · ∇Q_ω(s,a),
/// optionally clipped onto a ball.
pub fn td_error_vector(
    approx: &dyn Approximator,
    omega: &DVector<f64>,
    omega_target: &DVector<f64>,
    transition: &Transition,
    gamma: f64,
    clip: Option<f64>,
) -> DVector<f64> {
    let bootstrap = approx.value(omega_target, transition.s_next, transition.a_next);
    let current = approx.value(omega, transition.s, transition.a);
    let scale = transition.r + gamma * bootstrap - current;
    let delta = approx.grad(omega, transition.s, transition.a) * scale;
    match clip {
        Some(c) => clip_vector(&delta, c),
        None => delta,
    }
}

/// Exact expectation of the TD-error vector over
/// d(s)·μ(a|s)·P(s'|s,a)·π(a'|s'), with rewards replaced by their means.
pub fn expected_td_vector(
    mdp: &FiniteMdp,
    approx: &dyn Approximator,
    omega: &DVector<f64>,
    omega_target: &DVector<f64>,
    d: &StateDistribution,
    mu: &Policy,
    pi: &Policy,
) -> DVector<f64> {
    expected_td_vector_with_gamma(mdp, approx, omega, omega_target, d, mu, pi, mdp.gamma)
}

pub fn expected_td_vector_with_gamma(
    mdp: &FiniteMdp,
    approx: &dyn Approximator,
    omega: &DVector<f64>,
    omega_target: &DVector<f64>,
    d: &StateDistribution,
    mu: &Policy,
    pi: &Policy,
    gamma: f64,
) -> DVector<f64> {
    let mut out = DVector::zeros(approx.param_dim());
    for s in 0..mdp.n_states {
        let ds = d.prob(s);
        if ds == 0.0 {
            continue;
        }
        for a in 0..mdp.n_actions {
            let w = ds * mu.prob(s, a);
            if w == 0.0 {
                continue;
            }
            // E[r + γ Q'(s',a') | s,a] factors out of the gradient term.
            let mut bootstrap = 0.0;
            for (s2, &p) in mdp.transition[s][a].iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for a2 in 0..mdp.n_actions {
                    let pa2 = pi.prob(s2, a2);
                    if pa2 == 0.0 {
                        continue;
                    }
                    bootstrap += p * pa2 * approx.value(omega_target, s2, a2);
                }
            }
            let scale = mdp.reward_mean[s][a] + gamma * bootstrap - approx.value(omega, s, a);
            out += approx.grad(omega, s, a) * (w * scale);
        }
    }
    out
}

/// Expected regularised TD vector
/// δ_Reg(ω, ω') = μ·δ(ω, ω') + (1−μ)·(δ(ω', ω) − η(ω − ω')),
/// where δ(ω', ω) swaps the roles of the value and target parameters.
/// Disabled regularisation returns δ(ω, ω') unchanged.
pub fn regularised_td_vector(
    mdp: &FiniteMdp,
    approx: &dyn Approximator,
    omega: &DVector<f64>,
    omega_target: &DVector<f64>,
    d: &StateDistribution,
    mu: &Policy,
    pi: &Policy,
    reg: &Regularisation,
) -> DVector<f64> {
    let forward = expected_td_vector(mdp, approx, omega, omega_target, d, mu, pi);
    // At equal parameters the mixture is algebraically the identity
    // (μ·δ + (1−μ)(δ − 0) = δ); take that branch exactly.
    if !reg.enabled || omega == omega_target {
        return forward;
    }
    let swapped = expected_td_vector(mdp, approx, omega_target, omega, d, mu, pi);
    forward * reg.mix + (swapped - (omega - omega_target) * reg.eta) * (1.0 - reg.mix)
}

/// Snapshots of the parameter iterate at the two most recent refresh
/// boundaries, seeded with ω₀ until populated.
#[derive(Debug, Clone)]
pub struct SnapshotHistory {
    pub current: DVector<f64>,
    pub k_back: DVector<f64>,
    pub two_k_back: DVector<f64>,
}

/// New target parameters at a refresh boundary. `step` must be a positive
/// multiple of `k`.
pub fn target_update(
    history: &SnapshotHistory,
    rule: &TargetUpdateRule,
    step: usize,
    k: usize,
) -> Result<DVector<f64>, EngineError> {
    if k == 0 || !step.is_multiple_of(k) {
        return Err(EngineError::CalledOffSchedule { step, k });
    }
    Ok(match rule {
        TargetUpdateRule::PeriodicCopy => history.current.clone(),
        TargetUpdateRule::Momentum { mu } => {
            &history.current * (1.0 - mu) + (&history.k_back - &history.two_k_back) * *mu
        }
    })
}

/// Evaluator for expected TD vectors, with a Gram-matrix fast path for
/// linear approximators: δ(ω, ω') = b + γ·Φ'·ω' − Φ·ω.
enum ExpectedEval<'a> {
    Gram {
        gram: GramMatrices,
        gamma: f64,
    },
    Enumerate {
        mdp: &'a FiniteMdp,
        approx: &'a dyn Approximator,
        d: &'a StateDistribution,
        mu: &'a Policy,
        pi: &'a Policy,
        gamma: f64,
    },
}

impl ExpectedEval<'_> {
    fn delta(&self, omega: &DVector<f64>, omega_target: &DVector<f64>) -> DVector<f64> {
        match self {
            ExpectedEval::Gram { gram, gamma } => {
                &gram.b + &gram.phi_prime * omega_target * *gamma - &gram.phi * omega
            }
            ExpectedEval::Enumerate {
                mdp,
                approx,
                d,
                mu,
                pi,
                gamma,
            } => {
                expected_td_vector_with_gamma(mdp, *approx, omega, omega_target, d, mu, pi, *gamma)
            }
        }
    }

    fn delta_regularised(
        &self,
        omega: &DVector<f64>,
        omega_target: &DVector<f64>,
        reg: &Regularisation,
    ) -> DVector<f64> {
        let forward = self.delta(omega, omega_target);
        if !reg.enabled || omega == omega_target {
            return forward;
        }
        let swapped = self.delta(omega_target, omega);
        forward * reg.mix + (swapped - (omega - omega_target) * reg.eta) * (1.0 - reg.mix)
    }
}

/// Run partially fitted policy evaluation: `n_target_updates` outer
/// iterations of `k` inner steps each, with the step size held constant
/// within each block. Records one trace entry per target update, including
/// l = 0. Divergence (‖ω‖ above the blow-up threshold, or non-finite
/// parameters) is reported as an error carrying the partial trace.
pub fn run_pfpe(
    mdp: &FiniteMdp,
    approx: &dyn Approximator,
    d: &StateDistribution,
    mu: &Policy,
    pi: &Policy,
    config: &RunConfig,
    fixed_point: Option<&DVector<f64>>,
) -> Result<RunTrace, EngineError> {
    config.validate()?;
    let gamma = config.gamma_override.unwrap_or(mdp.gamma);
    let n = approx.param_dim();

    let mut rng = match config.mode {
        RunMode::Sampled { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        RunMode::ExactExpectation => None,
    };

    let mut omega: DVector<f64> = match &config.omega0 {
        Some(values) => {
            if values.len() != n {
                return Err(EngineError::InvalidConfig(format!(
                    "omega0 has length {}, approximator has {} parameters",
                    values.len(),
                    n
                )));
            }
            DVector::from_column_slice(values)
        }
        None => match (approx.features(), rng.as_mut()) {
            (Some(_), _) => DVector::zeros(n),
            (None, Some(r)) => DVector::from_fn(n, |_, _| r.random_range(-0.5..0.5)),
            (None, None) => {
                return Err(EngineError::InvalidConfig(
                    "exact-expectation mode with a nonlinear approximator requires omega0".into(),
                ))
            }
        },
    };

    let eval = match approx.features() {
        Some(features) => ExpectedEval::Gram {
            gram: gram_matrices(mdp, features, d, mu, pi),
            gamma,
        },
        None => ExpectedEval::Enumerate {
            mdp,
            approx,
            d,
            mu,
            pi,
            gamma,
        },
    };

    let mut target = omega.clone();
    let mut history = SnapshotHistory {
        current: omega.clone(),
        k_back: omega.clone(),
        two_k_back: omega.clone(),
    };

    let record = |trace: &mut RunTrace, l: usize, step: usize, target: &DVector<f64>| {
        let td_error_norm = eval.delta(target, target).norm();
        trace.entries.push(TraceEntry {
            l,
            step,
            omega_bar: target.clone(),
            td_error_norm,
            dist_to_fixed_point: fixed_point.map(|w| (target - w).norm()),
            param_norm: target.norm(),
        });
    };

    let mut trace = RunTrace::default();
    record(&mut trace, 0, 0, &target);

    let k = config.k;
    for l in 0..config.n_target_updates {
        let alpha = config.schedule.alpha(l);
        for i in 0..k {
            let step = l * k + i;
            let direction = match rng.as_mut() {
                Some(r) => {
                    let transition = sample_transition(mdp, d, mu, pi, r);
                    let raw = if config.regularisation.enabled {
                        sampled_regularised(
                            approx,
                            &omega,
                            &target,
                            &transition,
                            gamma,
                            &config.regularisation,
                        )
                    } else {
                        td_error_vector(approx, &omega, &target, &transition, gamma, None)
                    };
                    match config.clip {
                        Some(c) => clip_vector(&raw, c),
                        None => raw,
                    }
                }
                None => {
                    let raw = eval.delta_regularised(&omega, &target, &config.regularisation);
                    match config.clip {
                        Some(c) => clip_vector(&raw, c),
                        None => raw,
                    }
                }
            };
            omega = match pfpe_inner_step(&omega, &direction, alpha, config.blow_up_threshold) {
                Ok(next) => next,
                Err(_) => {
                    return Err(EngineError::Diverged {
                        step: step + 1,
                        partial: trace,
                    })
                }
            };
        }
        let boundary_step = (l + 1) * k;
        history.current = omega.clone();
        target = target_update(&history, &config.target_rule, boundary_step, k)?;
        history.two_k_back = std::mem::replace(&mut history.k_back, omega.clone());
        record(&mut trace, l + 1, boundary_step, &target);
    }
    Ok(trace)
}

/// One inner update ω_{i+1} = ω_i + α·δ with the blow-up guard applied.
/// The direction comes from [`td_error_vector`] in sampled mode or
/// [`expected_td_vector`] in exact-expectation mode.
pub fn pfpe_inner_step(
    omega: &DVector<f64>,
    delta: &DVector<f64>,
    alpha: f64,
    blow_up_threshold: f64,
) -> Result<DVector<f64>, EngineError> {
    let next = omega + delta * alpha;
    let norm = next.norm();
    if !norm.is_finite() || norm > blow_up_threshold {
        return Err(EngineError::Diverged {
            step: 1,
            partial: RunTrace::default(),
        });
    }
    Ok(next)
}

/// Sampled counterpart of the regularised TD vector.
fn sampled_regularised(
    approx: &dyn Approximator,
    omega: &DVector<f64>,
    omega_target: &DVector<f64>,
    transition: &Transition,
    gamma: f64,
    reg: &Regularisation,
) -> DVector<f64> {
    let forward = td_error_vector(approx, omega, omega_target, transition, gamma, None);
    if omega == omega_target {
        return forward;
    }
    let swapped = td_error_vector(approx, omega_target, omega, transition, gamma, None);
    forward * reg.mix + (swapped - (omega - omega_target) * reg.eta) * (1.0 - reg.mix)
}

const SOLVE_RESIDUAL_TOL: f64 = 1e-8;
const SINGULARITY_CUTOFF: f64 = 1e-12;
pub const RIDGE_EPSILON: f64 = 1e-10;

/// Smallest and largest singular values, for numerical-rank decisions. An LU
/// residual check alone cannot flag consistent singular systems (any null
/// component leaves the residual unchanged).
fn singular_value_range(m: &DMatrix<f64>) -> (f64, f64) {
    let svd = m.clone().svd(false, false);
    let max_sv = svd
        .singular_values
        .iter()
        .fold(0.0f64, |acc, &v| acc.max(v));
    let min_sv = svd
        .singular_values
        .iter()
        .fold(f64::INFINITY, |acc, &v| acc.min(v));
    (min_sv, max_sv)
}

/// Fitted solve for linear features: the unique ω with δ(ω, ω̄) = 0, i.e.
/// Φ·ω = b + γ·Φ'·ω̄. A singular Φ falls back to a ridge solve
/// (Φ + 1e-10·I) when enabled.
pub fn fpe_solve_linear(
    gram: &GramMatrices,
    gamma: f64,
    omega_target: &DVector<f64>,
    ridge_fallback: bool,
) -> Result<DVector<f64>, EngineError> {
    let rhs = &gram.b + &gram.phi_prime * omega_target * gamma;
    let scale = 1.0 + rhs.norm();
    let (min_sv, max_sv) = singular_value_range(&gram.phi);
    if min_sv > SINGULARITY_CUTOFF * max_sv.max(1.0) {
        if let Some(solution) = gram.phi.clone().lu().solve(&rhs) {
            let residual = (&gram.phi * &solution - &rhs).norm();
            if residual <= SOLVE_RESIDUAL_TOL * scale {
                return Ok(solution);
            }
        }
    }
    if !ridge_fallback {
        return Err(EngineError::SingularGramMatrix);
    }
    let n = gram.phi.nrows();
    let ridged = &gram.phi + DMatrix::identity(n, n) * RIDGE_EPSILON;
    ridged
        .lu()
        .solve(&rhs)
        .ok_or(EngineError::SingularGramMatrix)
}

/// The TD fixed point for linear features: solve (Φ − γΦ')·ω = b. Singular
/// but consistent systems return the minimum-norm solution via SVD; singular
/// inconsistent systems report the smallest singular value.
pub fn td_fixed_point_linear(gram: &GramMatrices, gamma: f64) -> Result<DVector<f64>, EngineError> {
    let a = &gram.phi - &gram.phi_prime * gamma;
    let scale = 1.0 + gram.b.norm();
    let (min_sv, max_sv) = singular_value_range(&a);
    if min_sv > SINGULARITY_CUTOFF * max_sv.max(1.0) {
        if let Some(solution) = a.clone().lu().solve(&gram.b) {
            let residual = (&a * &solution - &gram.b).norm();
            if residual <= SOLVE_RESIDUAL_TOL * scale {
                return Ok(solution);
            }
        }
    }
    let cutoff = SINGULARITY_CUTOFF * max_sv.max(1.0);
    let pseudo = a
        .clone()
        .svd(true, true)
        .pseudo_inverse(cutoff)
        .map_err(|_| EngineError::SingularSystem {
            min_singular_value: min_sv,
        })?;
    let solution = &pseudo * &gram.b;
    let residual = (&a * &solution - &gram.b).norm();
    if residual <= SOLVE_RESIDUAL_TOL * scale {
        Ok(solution)
    } else {
        Err(EngineError::SingularSystem {
            min_singular_value: min_sv,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximator::{FeatureMap, LinearApproximator};
    use crate::mdp::{build_baird, cycle2, self_loop};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn linear(map: FeatureMap) -> LinearApproximator {
        LinearApproximator::new(map)
    }

    #[test]
    fn td_error_vector_matches_hand_computation() {
        // Two states, one action: φ(0,0) = (1,0), φ(1,0) = (0,1).
        let map = FeatureMap::new(2, 1, vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let approx = linear(map);
        let omega = DVector::from_vec(vec![1.0, 1.0]);
        let t = Transition {
            s: 0,
            a: 0,
            r: 1.0,
            s_next: 1,
            a_next: 0,
        };
        let delta = td_error_vector(&approx, &omega, &omega, &t, 0.5, None);
        assert_abs_diff_eq!(delta[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(delta[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn td_error_vector_zero_at_zero_parameters_and_rewards() {
        let b = build_baird();
        let approx = linear(b.features.clone());
        let omega = DVector::zeros(8);
        let t = Transition {
            s: 2,
            a: 0,
            r: 0.0,
            s_next: 6,
            a_next: 0,
        };
        let delta = td_error_vector(&approx, &omega, &omega, &t, 0.99, None);
        assert_eq!(delta, DVector::zeros(8));
    }

    #[test]
    fn expected_td_on_self_loop() {
        let (mdp, map, pi, d) = self_loop();
        let approx = linear(map);
        let zero = DVector::zeros(1);
        let delta = expected_td_vector(&mdp, &approx, &zero, &zero, &d, &pi, &pi);
        assert_abs_diff_eq!(delta[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn expected_td_on_baird_vanishes_at_zero_parameters() {
        let b = build_baird();
        let approx = linear(b.features.clone());
        let zero = DVector::zeros(8);
        let delta = expected_td_vector(&b.mdp, &approx, &zero, &zero, &b.d, &b.mu, &b.pi);
        assert_eq!(delta, DVector::zeros(8));
    }

    #[test]
    fn expected_td_matches_monte_carlo_mean() {
        let (mdp, map, pi, d) = cycle2();
        let approx = linear(map);
        let omega = DVector::from_vec(vec![0.3, -0.7]);
        let target = DVector::from_vec(vec![-0.2, 0.5]);
        let expected = expected_td_vector(&mdp, &approx, &omega, &target, &d, &pi, &pi);

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 1_000_000usize;
        let mut mean: DVector<f64> = DVector::zeros(2);
        let mut sq: DVector<f64> = DVector::zeros(2);
        for _ in 0..n {
            let t = sample_transition(&mdp, &d, &pi, &pi, &mut rng);
            let delta = td_error_vector(&approx, &omega, &target, &t, mdp.gamma, None);
            for i in 0..2 {
                mean[i] += delta[i];
                sq[i] += delta[i] * delta[i];
            }
        }
        for i in 0..2 {
            mean[i] /= n as f64;
            let var = (sq[i] / n as f64 - mean[i] * mean[i]).max(0.0);
            let se = (var / n as f64).sqrt();
            assert!(
                (mean[i] - expected[i]).abs() <= 4.0 * se + 1e-12,
                "coordinate {i}: mc {} vs exact {} (4se = {})",
                mean[i],
                expected[i],
                4.0 * se
            );
        }
    }

    #[test]
    fn regularised_vector_degenerate_cases() {
        let (mdp, map, pi, d) = self_loop();
        let approx = linear(map);
        let omega = DVector::from_vec(vec![2.0]);
        let target = DVector::from_vec(vec![1.0]);

        // mix = 1 reduces to the forward vector.
        let reg = Regularisation {
            enabled: true,
            mix: 1.0,
            eta: 5.0,
        };
        let forward = expected_td_vector(&mdp, &approx, &omega, &target, &d, &pi, &pi);
        let got = regularised_td_vector(&mdp, &approx, &omega, &target, &d, &pi, &pi, &reg);
        assert_abs_diff_eq!(got[0], forward[0], epsilon = 1e-15);

        // Equal parameters leave the TD update unchanged, bitwise, for any
        // (mix, eta).
        let reg = Regularisation {
            enabled: true,
            mix: 0.3,
            eta: 9.0,
        };
        let same = regularised_td_vector(&mdp, &approx, &omega, &omega, &d, &pi, &pi, &reg);
        let plain = expected_td_vector(&mdp, &approx, &omega, &omega, &d, &pi, &pi);
        assert_eq!(same, plain);
    }

    #[test]
    fn regularised_scalar_example() {
        // φ = 1, γ = 0, r = 0: δ(1, 2) − η(2 − 1) with μ_mix = 0, η = 1 is −2.
        let mdp = FiniteMdp::new(vec![vec![vec![1.0]]], vec![vec![0.0]], 0.0, 0.0, 1.0).unwrap();
        let map = FeatureMap::new(1, 1, vec![vec![1.0]]).unwrap();
        let approx = linear(map);
        let pi = Policy::deterministic(1, 1, 0);
        let d = StateDistribution::uniform(1);
        let reg = Regularisation {
            enabled: true,
            mix: 0.0,
            eta: 1.0,
        };
        let omega = DVector::from_vec(vec![2.0]);
        let target = DVector::from_vec(vec![1.0]);
        let got = regularised_td_vector(&mdp, &approx, &omega, &target, &d, &pi, &pi, &reg);
        assert_abs_diff_eq!(got[0], -2.0, epsilon = 1e-15);
    }

    #[test]
    fn target_update_rules() {
        let history = SnapshotHistory {
            current: DVector::from_vec(vec![2.0]),
            k_back: DVector::from_vec(vec![1.0]),
            two_k_back: DVector::from_vec(vec![0.0]),
        };
        let copy = target_update(&history, &TargetUpdateRule::PeriodicCopy, 10, 5).unwrap();
        assert_eq!(copy[0], 2.0);
        let m0 = target_update(&history, &TargetUpdateRule::Momentum { mu: 0.0 }, 10, 5).unwrap();
        assert_eq!(m0[0], 2.0);
        let m1 = target_update(&history, &TargetUpdateRule::Momentum { mu: 1.0 }, 10, 5).unwrap();
        assert_eq!(m1[0], 1.0);
        let mh = target_update(&history, &TargetUpdateRule::Momentum { mu: 0.5 }, 10, 5).unwrap();
        assert_abs_diff_eq!(mh[0], 1.5, epsilon = 1e-15);
        let off = target_update(&history, &TargetUpdateRule::PeriodicCopy, 11, 5);
        assert!(matches!(
            off,
            Err(EngineError::CalledOffSchedule { step: 11, k: 5 })
        ));
    }

    #[test]
    fn zero_step_size_leaves_parameters_unchanged() {
        let (mdp, map, pi, d) = self_loop();
        let approx = linear(map);
        let omega = DVector::from_vec(vec![3.0]);
        let delta = expected_td_vector(&mdp, &approx, &omega, &omega, &d, &pi, &pi);
        let next = pfpe_inner_step(&omega, &delta, 0.0, 1e8).unwrap();
        assert_eq!(next, omega);
    }

    #[test]
    fn inner_step_reports_blow_up() {
        let omega = DVector::from_vec(vec![1.0]);
        let delta = DVector::from_vec(vec![1e12]);
        assert!(matches!(
            pfpe_inner_step(&omega, &delta, 1.0, 1e8),
            Err(EngineError::Diverged { .. })
        ));
        assert!(matches!(
            pfpe_inner_step(&omega, &DVector::from_vec(vec![f64::NAN]), 1.0, 1e8),
            Err(EngineError::Diverged { .. })
        ));
    }

    #[test]
    fn fpe_solve_scalar_case() {
        let (mdp, map, pi, d) = self_loop();
        let gram = gram_matrices(&mdp, &map, &d, &pi, &pi);
        let target = DVector::zeros(1);
        let solution = fpe_solve_linear(&gram, 0.9, &target, false).unwrap();
        assert_abs_diff_eq!(solution[0], 1.0, epsilon = 1e-12);
        // Residual of the defining equation.
        let approx = linear(map);
        let resid = expected_td_vector(&mdp, &approx, &solution, &target, &d, &pi, &pi).norm();
        assert!(resid <= 1e-10);
    }

    #[test]
    fn fpe_solve_zero_rewards_zero_target() {
        let b = build_baird();
        let gram = gram_matrices(&b.mdp, &b.features, &b.d, &b.mu, &b.pi);
        // Baird's Gram matrix is singular: ridge fallback required.
        let target = DVector::from_vec(b.omega0.clone());
        assert!(matches!(
            fpe_solve_linear(&gram, 0.99, &target, false),
            Err(EngineError::SingularGramMatrix)
        ));
        let ridged = fpe_solve_linear(&gram, 0.99, &target, true).unwrap();
        // The ridge solution satisfies the defining equation up to the ridge.
        let rhs = &gram.b + &gram.phi_prime * &target * 0.99;
        let residual = (&gram.phi * &ridged - rhs).norm();
        assert!(
            residual <= 1e-8 * (1.0 + ridged.norm()),
            "residual {residual}"
        );

        let zero_target = DVector::zeros(8);
        let solution = fpe_solve_linear(&gram, 0.99, &zero_target, true).unwrap();
        assert!(
            solution.norm() <= 1e-6,
            "zero target with zero rewards solves to ~0"
        );
    }

    #[test]
    fn fpe_solve_matches_long_exact_descent() {
        let (mdp, map, pi, d) = cycle2();
        let gram = gram_matrices(&mdp, &map, &d, &pi, &pi);
        let target = DVector::from_vec(vec![0.4, -0.1]);
        let direct = fpe_solve_linear(&gram, mdp.gamma, &target, false).unwrap();
        // Long-run gradient descent on the target-conditioned objective.
        let approx = linear(map);
        let mut omega = DVector::zeros(2);
        for _ in 0..100_000 {
            let delta = expected_td_vector(&mdp, &approx, &omega, &target, &d, &pi, &pi);
            omega += delta * 0.05;
        }
        assert!((omega - &direct).norm() <= 1e-6);
    }

    #[test]
    fn td_fixed_point_scalar_and_singular_cases() {
        let (mdp, map, pi, d) = self_loop();
        let gram = gram_matrices(&mdp, &map, &d, &pi, &pi);
        let omega_star = td_fixed_point_linear(&gram, 0.9).unwrap();
        assert_abs_diff_eq!(omega_star[0], 10.0, epsilon = 1e-9);

        // Baird: singular system, zero rewards -> minimum-norm zero solution.
        let b = build_baird();
        let gram = gram_matrices(&b.mdp, &b.features, &b.d, &b.mu, &b.pi);
        let omega_star = td_fixed_point_linear(&gram, 0.99).unwrap();
        assert!(omega_star.norm() <= 1e-8);
    }

    #[test]
    fn td_fixed_point_matches_robbins_munro_simulation() {
        let (mdp, map, pi, d) = cycle2();
        let gram = gram_matrices(&mdp, &map, &d, &pi, &pi);
        let omega_star = td_fixed_point_linear(&gram, mdp.gamma).unwrap();
        // q0 = 1 + γ q1, q1 = γ q0 -> q0 = 1/(1-γ²), q1 = γ/(1-γ²).
        assert_abs_diff_eq!(omega_star[0], 1.0 / (1.0 - 0.81), epsilon = 1e-9);
        assert_abs_diff_eq!(omega_star[1], 0.9 / (1.0 - 0.81), epsilon = 1e-9);

        let approx = linear(map);
        let config = RunConfig {
            schedule: StepSizeSchedule::RobbinsMunro {
                alpha0: 0.5,
                p: 0.8,
            },
            k: 25,
            n_target_updates: 8000,
            target_rule: TargetUpdateRule::PeriodicCopy,
            regularisation: Regularisation::default(),
            mode: RunMode::Sampled { seed: 5 },
            clip: None,
            gamma_override: None,
            omega0: None,
            blow_up_threshold: DEFAULT_BLOW_UP_THRESHOLD,
        };
        let trace = run_pfpe(&mdp, &approx, &d, &pi, &pi, &config, Some(&omega_star)).unwrap();
        let final_dist = trace.final_entry().dist_to_fixed_point.unwrap();
        assert!(final_dist <= 1e-2, "final distance {final_dist}");
    }

    #[test]
    fn k1_periodic_copy_is_bitwise_td0() {
        let (mdp, map, pi, d) = cycle2();
        let approx = linear(map);
        let seed = 42;
        let config = RunConfig {
            schedule: StepSizeSchedule::RobbinsMunro {
                alpha0: 0.5,
                p: 0.8,
            },
            k: 1,
            n_target_updates: 500,
            target_rule: TargetUpdateRule::PeriodicCopy,
            regularisation: Regularisation::default(),
            mode: RunMode::Sampled { seed },
            clip: None,
            gamma_override: None,
            omega0: Some(vec![0.0, 0.0]),
            blow_up_threshold: DEFAULT_BLOW_UP_THRESHOLD,
        };
        let trace = run_pfpe(&mdp, &approx, &d, &pi, &pi, &config, None).unwrap();

        // Classic TD(0): ω_{i+1} = ω_i + α_i δ(ω_i, ω_i, ς_i).
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut omega = DVector::zeros(2);
        for i in 0..500 {
            let alpha = 0.5 / (1.0 + i as f64).powf(0.8);
            let t = sample_transition(&mdp, &d, &pi, &pi, &mut rng);
            let delta = td_error_vector(&approx, &omega, &omega, &t, mdp.gamma, None);
            omega += delta * alpha;
        }
        let last = &trace.final_entry().omega_bar;
        assert_eq!(
            last.as_slice(),
            omega.as_slice(),
            "bitwise equality with TD(0)"
        );
    }

    #[test]
    fn regularised_run_preserves_the_fixed_point() {
        // The regulariser vanishes at equal parameters, so the run still
        // settles on the plain TD fixed point.
        let (mdp, map, pi, d) = cycle2();
        let gram = gram_matrices(&mdp, &map, &d, &pi, &pi);
        let omega_star = td_fixed_point_linear(&gram, mdp.gamma).unwrap();
        let approx = linear(map);
        let config = RunConfig {
            schedule: StepSizeSchedule::Constant { alpha: 0.5 },
            k: 5,
            n_target_updates: 400,
            target_rule: TargetUpdateRule::PeriodicCopy,
            regularisation: Regularisation {
                enabled: true,
                mix: 0.4,
                eta: 2.0,
            },
            mode: RunMode::ExactExpectation,
            clip: None,
            gamma_override: None,
            omega0: Some(vec![0.0, 0.0]),
            blow_up_threshold: DEFAULT_BLOW_UP_THRESHOLD,
        };
        let trace = run_pfpe(&mdp, &approx, &d, &pi, &pi, &config, Some(&omega_star)).unwrap();
        let final_dist = trace.final_entry().dist_to_fixed_point.unwrap();
        assert!(
            final_dist <= 1e-6,
            "regularised run ended {final_dist} from the fixed point"
        );
    }

    #[test]
    fn momentum_run_converges_on_zero_reward_counterexample() {
        // The momentum refresh maps a settled state to (1-mu) times itself,
        // so it can only preserve zero fixed points; the counterexample has
        // one, and the expected-mode run reaches it.
        let b = build_baird();
        let approx = linear(b.features.clone());
        let config = RunConfig {
            schedule: StepSizeSchedule::Constant { alpha: 0.01 },
            k: 500,
            n_target_updates: 100,
            target_rule: TargetUpdateRule::Momentum { mu: 0.25 },
            regularisation: Regularisation::default(),
            mode: RunMode::ExactExpectation,
            clip: None,
            gamma_override: Some(0.99),
            omega0: Some(b.omega0.clone()),
            blow_up_threshold: DEFAULT_BLOW_UP_THRESHOLD,
        };
        let trace = run_pfpe(&b.mdp, &approx, &b.d, &b.mu, &b.pi, &config, None).unwrap();
        let final_norm = trace.final_entry().td_error_norm;
        assert!(
            final_norm <= 1e-8,
            "momentum run final TD error {final_norm}"
        );
    }

    #[test]
    fn momentum_snapshots_match_full_history_indexing() {
        // Independent route: keep the whole iterate history and index
        // ω_{i-k}, ω_{i-2k} literally (with ω_0 backfill), instead of the
        // engine's rolling snapshots.
        let (mdp, map, pi, d) = self_loop();
        let approx = linear(map);
        let (k, n_updates, alpha, mu) = (3usize, 5usize, 0.2, 0.5);
        let omega0 = 4.0;
        let config = RunConfig {
            schedule: StepSizeSchedule::Constant { alpha },
            k,
            n_target_updates: n_updates,
            target_rule: TargetUpdateRule::Momentum { mu },
            regularisation: Regularisation::default(),
            mode: RunMode::ExactExpectation,
            clip: None,
            gamma_override: None,
            omega0: Some(vec![omega0]),
            blow_up_threshold: DEFAULT_BLOW_UP_THRESHOLD,
        };
        let trace = run_pfpe(&mdp, &approx, &d, &pi, &pi, &config, None).unwrap();

        // Reference: full history of scalar iterates.
        let mut history = vec![omega0];
        let mut omega = omega0;
        let mut target = omega0;
        let mut targets = vec![omega0];
        for _ in 0..n_updates {
            for _ in 0..k {
                // delta = (1 + 0.9 * target - omega) * 1
                omega += alpha * (1.0 + 0.9 * target - omega);
                history.push(omega);
            }
            let i = history.len() - 1;
            let at = |j: isize| -> f64 {
                if j <= 0 {
                    omega0
                } else {
                    history[j as usize]
                }
            };
            target = (1.0 - mu) * omega
                + mu * (at(i as isize - k as isize) - at(i as isize - 2 * k as isize));
            targets.push(target);
        }
        for (entry, expected) in trace.entries.iter().zip(targets.iter()) {
            assert_abs_diff_eq!(entry.omega_bar[0], *expected, epsilon = 1e-13);
        }
    }

    #[test]
    fn identical_config_and_seed_give_identical_traces() {
        let b = build_baird();
        let approx = linear(b.features.clone());
        let config = RunConfig {
            schedule: StepSizeSchedule::Constant { alpha: 0.01 },
            k: 500,
            n_target_updates: 10,
            target_rule: TargetUpdateRule::PeriodicCopy,
            regularisation: Regularisation::default(),
            mode: RunMode::Sampled { seed: 9 },
            clip: None,
            gamma_override: None,
            omega0: Some(b.omega0.clone()),
            blow_up_threshold: DEFAULT_BLOW_UP_THRESHOLD,
        };
        let t1 = run_pfpe(&b.mdp, &approx, &b.d, &b.mu, &b.pi, &config, None).unwrap();
        let t2 = run_pfpe(&b.mdp, &approx, &b.d, &b.mu, &b.pi, &config, None).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn expected_inner_step_factors_through_identity_minus_alpha_phi() {
        let (mdp, map, pi, d) = cycle2();
        let gram = gram_matrices(&mdp, &map, &d, &pi, &pi);
        let approx = linear(map);
        let target = DVector::from_vec(vec![1.0, -2.0]);
        let fitted = fpe_solve_linear(&gram, mdp.gamma, &target, false).unwrap();
        let alpha = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let omega = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
            let next =
                &omega + expected_td_vector(&mdp, &approx, &omega, &target, &d, &pi, &pi) * alpha;
            let predicted =
                (DMatrix::identity(2, 2) - &gram.phi * alpha) * (&omega - &fitted) + &fitted;
            assert!((next - predicted).norm() <= 1e-10);
        }
    }

    #[test]
    fn diverged_run_reports_partial_trace() {
        let b = build_baird();
        let approx = linear(b.features.clone());
        let config = RunConfig {
            schedule: StepSizeSchedule::Constant { alpha: 0.01 },
            k: 1,
            n_target_updates: 100_000,
            target_rule: TargetUpdateRule::PeriodicCopy,
            regularisation: Regularisation::default(),
            mode: RunMode::ExactExpectation,
            clip: None,
            gamma_override: None,
            omega0: Some(b.omega0.clone()),
            blow_up_threshold: DEFAULT_BLOW_UP_THRESHOLD,
        };
        match run_pfpe(&b.mdp, &approx, &b.d, &b.mu, &b.pi, &config, None) {
            Err(EngineError::Diverged { step, partial }) => {
                assert!(step < 100_000, "diverges well before the cap");
                assert!(!partial.entries.is_empty());
                let grown = partial
                    .entries
                    .iter()
                    .any(|e| e.param_norm > 10.0 * partial.entries[0].param_norm);
                assert!(grown, "norm growth is visible in the partial trace");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(StepSizeSchedule::Constant { alpha: 0.0 }
            .validate()
            .is_err());
        assert!(StepSizeSchedule::RobbinsMunro {
            alpha0: 0.5,
            p: 0.5
        }
        .validate()
        .is_err());
        assert!(StepSizeSchedule::RobbinsMunro {
            alpha0: 0.5,
            p: 1.0
        }
        .validate()
        .is_ok());
        let alpha = StepSizeSchedule::RobbinsMunro {
            alpha0: 0.5,
            p: 0.8,
        }
        .alpha(0);
        assert_abs_diff_eq!(alpha, 0.5, epsilon = 1e-15);
    }
}
