//! Stability calculus for the update rules: feature Gram matrices, loss /
//! TD / cross Jacobians (pointwise and path-mean), the condition function,
//! its derived quantities (σ_k, minimal contraction k, decay-bound curve),
//! the low-distribution-shift test and the nonlinear Jacobian bound, all
//! assembled into a serialisable report.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approximator::{Approximator, FeatureMap};
use crate::engine::td_error_vector;
use crate::linalg;
use crate::mdp::{lookahead_distribution, sample_transition, FiniteMdp, Policy, StateDistribution};

/// Relative eigenvalue cutoff below which a Gram-matrix direction counts as
/// numerically null and is projected out of the starred quantities.
pub const RANGE_CUTOFF: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("path-mean quadrature did not settle: doubling the node count changed an entry by {max_change:.3e} (> {tol:.1e})")]
    QuadratureUnconverged { max_change: f64, tol: f64 },
    #[error("loss Hessian is singular; enable the ridge fallback to proceed")]
    SingularHessian,
    #[error("sigma_k is undefined for a zero Hessian eigenvalue")]
    DegenerateEigenvalue,
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

/// Expected feature outer products and the affine reward term, oriented so
/// that the expected TD vector factors as
/// δ(ω, ω') = b + γ·phi_prime·ω' − phi·ω.
///
/// `phi_prime` is E[φ(s,a) · E'[φ(s',a')]ᵀ] — current-state rows against
/// bootstrap columns. Eigen-spectra are unchanged by this orientation and
/// the factored identity above pins it down.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrices {
    pub phi: DMatrix<f64>,
    pub phi_prime: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Exact enumeration of Φ, Φ' and b under d(s)·μ(a|s)·P(s'|s,a)·π(a'|s').
pub fn gram_matrices(
    mdp: &FiniteMdp,
    features: &FeatureMap,
    d: &StateDistribution,
    mu: &Policy,
    pi: &Policy,
) -> GramMatrices {
    let n = features.dim;
    let mut phi = DMatrix::zeros(n, n);
    let mut phi_prime = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);
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
            let current = features.phi_vector(s, a);
            let mut bootstrap = DVector::zeros(n);
            for (s2, &p) in mdp.transition[s][a].iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for a2 in 0..mdp.n_actions {
                    let pa2 = pi.prob(s2, a2);
                    if pa2 == 0.0 {
                        continue;
                    }
                    bootstrap.axpy(p * pa2, &features.phi_vector(s2, a2), 1.0);
                }
            }
            phi.ger(w, &current, &current, 1.0);
            phi_prime.ger(w, &current, &bootstrap, 1.0);
            b.axpy(w * mdp.reward_mean[s][a], &current, 1.0);
        }
    }
    GramMatrices { phi, phi_prime, b }
}

/// TD Jacobian for linear features: γΦ' − Φ (constant in ω, so the pointwise
/// and path-mean versions coincide).
pub fn td_jacobian_linear(gram: &GramMatrices, gamma: f64) -> DMatrix<f64> {
    &gram.phi_prime * gamma - &gram.phi
}

/// Hessian of the half-squared target-conditioned loss for linear features.
pub fn loss_hessian_linear(gram: &GramMatrices) -> DMatrix<f64> {
    gram.phi.clone()
}

#[derive(Debug, Clone, PartialEq)]
pub enum JacobianKind {
    /// Evaluated at a single (ω, ω̄) pair.
    Pointwise,
    /// Trapezoid average along the line ω → ω*, target anchor fixed.
    PathMean { n_quad: usize },
}

/// The Jacobian triple (H, J_δ, J_TD). All three fields are evaluated at
/// node-consistent (ω, ω̄) pairs, so J_TD = J_δ − H holds for every set this
/// crate produces (and reduces to the TD Jacobian when ω̄ = ω).
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianSet {
    pub h: DMatrix<f64>,
    pub j_delta: DMatrix<f64>,
    pub j_td: DMatrix<f64>,
    pub kind: JacobianKind,
}

struct PointwiseParts {
    h: DMatrix<f64>,
    j_delta: DMatrix<f64>,
    j_td: DMatrix<f64>,
}

/// Exact-expectation pointwise Jacobians at value parameters ω with target
/// anchor ω̄:
///   H(ω; ω̄)   = E[∇Q∇Qᵀ] − E[(r̄ + γE'[Q_ω̄'] − Q_ω)·∇²Q]
///   J_δ(ω, ω̄) = γ·E[∇Q_ω ⊗ E'[∇Q_ω̄']]
///   J_TD       = E[∇Q_ω ⊗ (γE'[∇Q_ω̄'] − ∇Q_ω)] + E[(r̄ + γE'[Q_ω̄'] − Q_ω)·∇²Q]
/// The last line is the direct decomposition; it equals J_δ − H by algebra
/// and is accumulated independently as a cross-check route.
fn pointwise_parts(
    mdp: &FiniteMdp,
    approx: &dyn Approximator,
    d: &StateDistribution,
    mu: &Policy,
    pi: &Policy,
    gamma: f64,
    omega: &DVector<f64>,
    omega_bar: &DVector<f64>,
) -> PointwiseParts {
    let n = approx.param_dim();
    let mut h = DMatrix::zeros(n, n);
    let mut j_delta = DMatrix::zeros(n, n);
    let mut j_td = DMatrix::zeros(n, n);
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
            let grad_q = approx.grad(omega, s, a);
            let q = approx.value(omega, s, a);
            let mut bootstrap_val = 0.0;
            let mut bootstrap_grad = DVector::zeros(n);
            for (s2, &p) in mdp.transition[s][a].iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for a2 in 0..mdp.n_actions {
                    let pa2 = pi.prob(s2, a2);
                    if pa2 == 0.0 {
                        continue;
                    }
                    bootstrap_val += p * pa2 * approx.value(omega_bar, s2, a2);
                    bootstrap_grad.axpy(p * pa2, &approx.grad(omega_bar, s2, a2), 1.0);
                }
            }
            let td_scale = mdp.reward_mean[s][a] + gamma * bootstrap_val - q;
            let hess_q = approx.hess(omega, s, a);
            h.ger(w, &grad_q, &grad_q, 1.0);
            h += &hess_q * (-w * td_scale);
            j_delta.ger(w * gamma, &grad_q, &bootstrap_grad, 1.0);
            let shifted = &bootstrap_grad * gamma - &grad_q;
            j_td.ger(w, &grad_q, &shifted, 1.0);
            j_td += &hess_q * (w * td_scale);
        }
    }
    PointwiseParts { h, j_delta, j_td }
}

/// Pointwise Jacobian set at (ω, ω̄); ω̄ = ω gives the TD Jacobian proper.
pub fn pointwise_jacobians(
    mdp: &FiniteMdp,
    approx: &dyn Approximator,
    d: &StateDistribution,
    mu: &Policy,
    pi: &Policy,
    omega: &DVector<f64>,
    omega_bar: &DVector<f64>,
) -> JacobianSet {
    let parts = pointwise_parts(mdp, approx, d, mu, pi, mdp.gamma, omega, omega_bar);
    JacobianSet {
        h: parts.h,
        j_delta: parts.j_delta,
        j_td: parts.j_td,
        kind: JacobianKind::Pointwise,
    }
}

pub const QUADRATURE_TOL: f64 = 1e-6;

/// Path-mean Jacobians by composite trapezoid quadrature along
/// ℓ(t) = ω − t(ω − ω*), target anchor fixed at ω̄. Evaluates both n_quad and
/// 2·n_quad intervals on shared nodes; errors if any entry moves more than
/// 1e-6 between the two, returning the finer rule otherwise.
pub fn path_mean_jacobians_numeric(
    mdp: &FiniteMdp,
    approx: &dyn Approximator,
    d: &StateDistribution,
    mu: &Policy,
    pi: &Policy,
    omega: &DVector<f64>,
    omega_star: &DVector<f64>,
    omega_bar: &DVector<f64>,
    n_quad: usize,
) -> Result<JacobianSet, SpectralError> {
    assert!(n_quad >= 2, "need at least two quadrature intervals");
    let n = approx.param_dim();
    let nodes = 2 * n_quad + 1;
    let mut evals = Vec::with_capacity(nodes);
    for j in 0..nodes {
        let t = j as f64 / (nodes - 1) as f64;
        let point = omega - (omega - omega_star) * t;
        evals.push(pointwise_parts(
            mdp, approx, d, mu, pi, mdp.gamma, &point, omega_bar,
        ));
    }
    let trapezoid = |stride: usize| -> PointwiseParts {
        let count = (nodes - 1) / stride;
        let h_step = 1.0 / count as f64;
        let mut h = DMatrix::zeros(n, n);
        let mut j_delta = DMatrix::zeros(n, n);
        let mut j_td = DMatrix::zeros(n, n);
        for i in 0..=count {
            let weight = if i == 0 || i == count {
                0.5 * h_step
            } else {
                h_step
            };
            let e = &evals[i * stride];
            h += &e.h * weight;
            j_delta += &e.j_delta * weight;
            j_td += &e.j_td * weight;
        }
        PointwiseParts { h, j_delta, j_td }
    };
    let coarse = trapezoid(2);
    let fine = trapezoid(1);
    let max_change = [
        (&fine.h - &coarse.h).abs().max(),
        (&fine.j_delta - &coarse.j_delta).abs().max(),
        (&fine.j_td - &coarse.j_td).abs().max(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    if max_change > QUADRATURE_TOL {
        return Err(SpectralError::QuadratureUnconverged {
            max_change,
            tol: QUADRATURE_TOL,
        });
    }
    Ok(JacobianSet {
        h: fine.h,
        j_delta: fine.j_delta,
        j_td: fine.j_td,
        kind: JacobianKind::PathMean { n_quad: 2 * n_quad },
    })
}

/// Path-mean of ∇_target δ(q_anchor, ·) with the line in the target slot:
/// ∫ γ·E[∇Q_{q_anchor}(s,a) ⊗ E'[∇Q_{ℓ(t)}(s',a')]] dt. This is the cross
/// Jacobian entering the fitted-iteration norm, where the value parameters
/// stay at the anchor while the target runs from `from` to `to`.
pub fn path_mean_delta_jacobian_target_line(
    mdp: &FiniteMdp,
    approx: &dyn Approximator,
    d: &StateDistribution,
    mu: &Policy,
    pi: &Policy,
    q_anchor: &DVector<f64>,
    from: &DVector<f64>,
    to: &DVector<f64>,
    n_quad: usize,
) -> DMatrix<f64> {
    let n = approx.param_dim();
    let mut acc = DMatrix::zeros(n, n);
    let h_step = 1.0 / n_quad as f64;
    for i in 0..=n_quad {
        let t = i as f64 * h_step;
        let weight = if i == 0 || i == n_quad {
            0.5 * h_step
        } else {
            h_step
        };
        let target = from - (from - to) * t;
        let parts = pointwise_parts(mdp, approx, d, mu, pi, mdp.gamma, q_anchor, &target);
        acc += &parts.j_delta * weight;
    }
    acc
}

/// Regularised path-mean Jacobians:
///   H_Reg   = μ·H̄ − (1−μ)·(J̄_δ − ηI)
///   J_δ,Reg = μ·J̄_δ − (1−μ)·(H̄ − ηI)
/// Their difference is H̄-free: J_δ,Reg − H_Reg = J̄_δ − H̄, so the TD update
/// itself is untouched.
pub fn regularised_jacobians(
    h_bar: &DMatrix<f64>,
    j_delta_bar: &DMatrix<f64>,
    mix: f64,
    eta: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = h_bar.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let h_reg = h_bar * mix - (j_delta_bar - &eye * eta) * (1.0 - mix);
    let j_reg = j_delta_bar * mix - (h_bar - &eye * eta) * (1.0 - mix);
    (h_reg, j_reg)
}

/// The Hessian eigenvalue that maximises |1 − αλ|; ties break toward the
/// smaller (slower) eigenvalue.
pub fn lambda_h_star(eigenvalues: &[f64], alpha: f64) -> f64 {
    assert!(!eigenvalues.is_empty(), "need at least one eigenvalue");
    let mut best = eigenvalues[0];
    let mut best_key = (1.0 - alpha * best).abs();
    for &lambda in &eigenvalues[1..] {
        let key = (1.0 - alpha * lambda).abs();
        if key > best_key || (key == best_key && lambda < best) {
            best = lambda;
            best_key = key;
        }
    }
    best
}

/// C(α, k) = |1−αλ*|^{k−1}·‖J̄_TD*‖ + (1 + |1−αλ*|^{k−1})·‖J̄_FPE*‖.
pub fn condition_function(
    alpha: f64,
    k: u64,
    lambda_h_star: f64,
    j_td_norm_star: f64,
    j_fpe_norm_star: f64,
) -> f64 {
    assert!(k >= 1 && alpha > 0.0);
    let decay = (1.0 - alpha * lambda_h_star).abs().powf((k - 1) as f64);
    decay * j_td_norm_star + (1.0 + decay) * j_fpe_norm_star
}

/// σ_k = (1 − |1−αλ*|^k)·σ_δ / λ*.
pub fn sigma_k(
    alpha: f64,
    k: u64,
    lambda_h_star: f64,
    sigma_delta: f64,
) -> Result<f64, SpectralError> {
    if lambda_h_star == 0.0 {
        return Err(SpectralError::DegenerateEigenvalue);
    }
    let decay = (1.0 - alpha * lambda_h_star).abs().powf(k as f64);
    Ok((1.0 - decay) * sigma_delta / lambda_h_star)
}

/// Smallest k for which C(α, k) < 1, from the threshold
/// k > 1 + [log(1−‖J̄_FPE*‖) − log(‖J̄_TD*‖+‖J̄_FPE*‖)] / log(1−αλ_min),
/// post-verified against the condition function itself. Returns None when
/// ‖J̄_FPE*‖ ≥ 1 (the lower bound makes contraction unprovable) or when the
/// decay factor does not shrink.
pub fn min_k_for_contraction(
    alpha: f64,
    lambda_min: f64,
    j_td_norm_star: f64,
    j_fpe_norm_star: f64,
) -> Option<u64> {
    if j_fpe_norm_star.is_nan() || j_fpe_norm_star >= 1.0 {
        return None;
    }
    let base = 1.0 - alpha * lambda_min;
    if !(base > 0.0 && base < 1.0) {
        return None;
    }
    let threshold =
        1.0 + ((1.0 - j_fpe_norm_star).ln() - (j_td_norm_star + j_fpe_norm_star).ln()) / base.ln();
    let mut k = if threshold < 1.0 {
        1
    } else {
        threshold.floor() as u64 + 1
    };
    // Guard the exact bracket against floating-point boundary cases.
    while condition_function(alpha, k, lambda_min, j_td_norm_star, j_fpe_norm_star) >= 1.0 {
        k += 1;
        if k > (1u64 << 40) {
            return None;
        }
    }
    while k > 1
        && condition_function(alpha, k - 1, lambda_min, j_td_norm_star, j_fpe_norm_star) < 1.0
    {
        k -= 1;
    }
    Some(k)
}

/// Fixed-stepsize decay bound
/// α·σ_k/(1−c) + exp(−l(1−c))·(initial_error − σ_k/(1−c)),
/// exactly as printed, including the asymmetric α factor on the first term.
pub fn corollary_bound_curve(l: u64, c: f64, alpha: f64, sigma_k: f64, initial_error: f64) -> f64 {
    assert!((0.0..1.0).contains(&c));
    alpha * sigma_k / (1.0 - c)
        + (-(l as f64) * (1.0 - c)).exp() * (initial_error - sigma_k / (1.0 - c))
}

/// Spectral norm of H̄⁻¹·J̄_δ. A singular H̄ errors unless a ridge is given.
pub fn fpe_stability_norm(
    h_bar: &DMatrix<f64>,
    j_delta_bar: &DMatrix<f64>,
    ridge: Option<f64>,
) -> Result<f64, SpectralError> {
    let n = h_bar.nrows();
    let solve = |m: &DMatrix<f64>| -> Option<DMatrix<f64>> {
        let lu = m.clone().lu();
        let mut out = DMatrix::zeros(n, n);
        for j in 0..n {
            let col = lu.solve(&j_delta_bar.column(j).clone_owned())?;
            let residual = (m * &col - j_delta_bar.column(j)).norm();
            if residual > 1e-8 * (1.0 + j_delta_bar.column(j).norm()) {
                return None;
            }
            out.set_column(j, &col);
        }
        Some(out)
    };
    let ratio = match solve(h_bar) {
        Some(m) => m,
        None => {
            let eps = ridge.ok_or(SpectralError::SingularHessian)?;
            let ridged = h_bar + DMatrix::identity(n, n) * eps;
            solve(&ridged).ok_or(SpectralError::SingularHessian)?
        }
    };
    Ok(linalg::spectral_norm(&ratio))
}

/// Outcome of the low-distribution-shift test: whether Φ − γ²Φ'' is positive
/// definite, with the smallest eigenvalue as the margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowShiftCheck {
    pub passes: bool,
    pub margin: f64,
}

/// Forms Φ'' = E over the one-step lookahead (s'∼P^μ, a'∼π) of φφᵀ and tests
/// Φ − γ²Φ'' ≻ 0, the matrix form of γ‖Q_ω‖_{P^μ,π} < ‖Q_ω‖_{d,μ} for all ω.
pub fn low_distribution_shift_check(
    mdp: &FiniteMdp,
    features: &FeatureMap,
    d: &StateDistribution,
    mu: &Policy,
    pi: &Policy,
) -> LowShiftCheck {
    let n = features.dim;
    let gram = gram_matrices(mdp, features, d, mu, pi);
    let lookahead = lookahead_distribution(mdp, d, mu);
    let mut phi_next = DMatrix::zeros(n, n);
    for s2 in 0..mdp.n_states {
        let p = lookahead.prob(s2);
        if p == 0.0 {
            continue;
        }
        for a2 in 0..mdp.n_actions {
            let w = p * pi.prob(s2, a2);
            if w == 0.0 {
                continue;
            }
            let f = features.phi_vector(s2, a2);
            phi_next.ger(w, &f, &f, 1.0);
        }
    }
    let tested = &gram.phi - phi_next * (mdp.gamma * mdp.gamma);
    let eigs = linalg::symmetric_eigenvalues(&tested);
    let margin = eigs[0];
    LowShiftCheck {
        passes: margin > 0.0,
        margin,
    }
}

/// Upper bound on sup λ(J̄_TD) over the sampled parameter hull: the largest
/// eigenvalue of the symmetrised direct decomposition
/// E[(T^π Q − Q)·∇²Q] + E[(γ∇Q' − ∇Q) ⊗ ∇Q], maximised over samples.
pub fn nonlinear_jacobian_bound(
    mdp: &FiniteMdp,
    approx: &dyn Approximator,
    d: &StateDistribution,
    mu: &Policy,
    pi: &Policy,
    omega_samples: &[DVector<f64>],
) -> f64 {
    let mut bound = f64::NEG_INFINITY;
    for omega in omega_samples {
        let parts = pointwise_parts(mdp, approx, d, mu, pi, mdp.gamma, omega, omega);
        let sym = (&parts.j_td + parts.j_td.transpose()) * 0.5;
        let eigs = linalg::symmetric_eigenvalues(&sym);
        bound = bound.max(*eigs.last().expect("nonempty spectrum"));
    }
    bound
}

/// Spectral radius of the exact expected outer update map for linear
/// features, restricted to the numerical range of Φ:
/// T = M^k + α·S_k·γΦ' with M = I−αΦ and S_k = Σ_{i<k} M^i. Null feature
/// directions never move and are excluded.
pub fn outer_map_spectral_radius(
    gram: &GramMatrices,
    gamma: f64,
    alpha: f64,
    k: u64,
) -> Result<f64, SpectralError> {
    let (basis, lams) = linalg::range_basis(&gram.phi, RANGE_CUTOFF);
    let r = lams.len();
    if r == 0 {
        return Ok(0.0);
    }
    let j_restricted = basis.transpose() * (&gram.phi_prime * gamma) * &basis;
    let mut t = DMatrix::zeros(r, r);
    for i in 0..r {
        let decay = (1.0 - alpha * lams[i]).powf(k as f64);
        t[(i, i)] = decay;
        // α·S_k on the eigenbasis: (1 − (1−αλ)^k)/λ, with the λ→0 limit αk.
        let s_row = if lams[i].abs() > 1e-14 {
            (1.0 - decay) / lams[i]
        } else {
            alpha * k as f64
        };
        for j in 0..r {
            t[(i, j)] += s_row * j_restricted[(i, j)];
        }
    }
    Ok(linalg::spectral_radius(&t)?)
}

/// Ball around a center point, approximating the contraction region.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionSpec {
    pub center: Vec<f64>,
    pub radius: f64,
    #[serde(default = "default_region_samples")]
    pub samples: usize,
}

fn default_region_samples() -> usize {
    128
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub alpha: f64,
    pub k: u64,
    pub region: RegionSpec,
    /// Overrides the sampled estimate of the TD-vector noise scale.
    #[serde(default)]
    pub sigma_delta: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_quad")]
    pub n_quad: usize,
}

fn default_n_quad() -> usize {
    32
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SpectralVerdicts {
    /// TD Jacobian has strictly negative real eigenvalue parts.
    pub assumption4: Option<bool>,
    /// Fitted iteration norm below one.
    pub assumption5: Option<bool>,
    /// Condition value below one at (α, k).
    pub assumption6: Option<bool>,
    pub low_shift: Option<bool>,
    /// Stable by either the condition value or, for linear features, the
    /// exact outer-map spectral radius.
    pub predicted_stable: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SpectralReport {
    pub lambda_h_star: Option<f64>,
    pub j_td_norm_star: Option<f64>,
    pub j_fpe_norm_star: Option<f64>,
    pub condition_value: Option<f64>,
    pub sigma_k: Option<f64>,
    pub k_min: Option<u64>,
    pub sigma_delta: Option<f64>,
    /// Exact linear-case stability of the expected outer update; None for
    /// nonlinear approximators.
    pub outer_map_spectral_radius: Option<f64>,
    /// The contraction constant c used by the decay bound (the condition
    /// value itself when below one).
    pub contraction_constant: Option<f64>,
    pub verdicts: SpectralVerdicts,
    pub margins: BTreeMap<String, f64>,
    pub conventions: BTreeMap<String, String>,
}

impl SpectralReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Max sampled standard deviation of the TD-error vector over region points:
/// at each point, sqrt(E‖δ − δ̄‖²) over `draws` transitions.
pub fn estimate_sigma_delta(
    mdp: &FiniteMdp,
    approx: &dyn Approximator,
    d: &StateDistribution,
    mu: &Policy,
    pi: &Policy,
    region: &RegionSpec,
    points: usize,
    draws: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = DVector::from_column_slice(&region.center);
    let mut worst: f64 = 0.0;
    for p in 0..points {
        let omega = if p == 0 {
            center.clone()
        } else {
            sample_in_ball(&center, region.radius, &mut rng)
        };
        let mut mean = DVector::zeros(approx.param_dim());
        let mut sq_norm = 0.0;
        let mut samples = Vec::with_capacity(draws);
        for _ in 0..draws {
            let t = sample_transition(mdp, d, mu, pi, &mut rng);
            let delta = td_error_vector(approx, &omega, &omega, &t, mdp.gamma, None);
            mean += &delta;
            samples.push(delta);
        }
        mean /= draws as f64;
        for delta in &samples {
            sq_norm += (delta - &mean).norm_squared();
        }
        worst = worst.max((sq_norm / draws as f64).sqrt());
    }
    worst
}

fn sample_in_ball<R: Rng>(center: &DVector<f64>, radius: f64, rng: &mut R) -> DVector<f64> {
    let n = center.len();
    let mut direction = DVector::from_fn(n, |_, _| {
        rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
    });
    let norm = direction.norm();
    if norm > 0.0 {
        direction /= norm;
    }
    let scale: f64 = rng.random::<f64>().powf(1.0 / n as f64) * radius;
    center + direction * scale
}

/// Assemble the full stability report. Linear approximators use the exact
/// constant Jacobians (with rank-deficient Gram matrices projected onto
/// their numerical range); nonlinear ones estimate the starred suprema by
/// Monte Carlo over the configured ball.
pub fn analyze(
    mdp: &FiniteMdp,
    approx: &dyn Approximator,
    d: &StateDistribution,
    mu: &Policy,
    pi: &Policy,
    opts: &AnalysisOptions,
) -> SpectralReport {
    let mut report = SpectralReport::default();
    let mut conventions = BTreeMap::new();
    conventions.insert(
        "loss_scaling".into(),
        "half-squared loss; H = Phi for linear features".into(),
    );
    conventions.insert(
        "phi_prime_orientation".into(),
        "E[phi(s,a) phi(s',a')^T]; delta(w,w') = b + gamma*PhiPrime*w' - Phi*w".into(),
    );
    conventions.insert(
        "fitted_error".into(),
        "expected TD-error norm at the target parameters".into(),
    );
    conventions.insert(
        "region".into(),
        format!(
            "ball(center dim {}, radius {}, {} samples)",
            opts.region.center.len(),
            opts.region.radius,
            opts.region.samples
        ),
    );

    let sigma_delta = opts.sigma_delta.unwrap_or_else(|| {
        estimate_sigma_delta(mdp, approx, d, mu, pi, &opts.region, 32, 1000, opts.seed)
    });
    report.sigma_delta = Some(sigma_delta);
    conventions.insert(
        "sigma_delta".into(),
        if opts.sigma_delta.is_some() {
            "supplied".into()
        } else {
            "max sampled std over 32 region points x 1000 transitions".into()
        },
    );

    if let Some(features) = approx.features() {
        let gram = gram_matrices(mdp, features, d, mu, pi);
        let gamma = mdp.gamma;
        let j_td = td_jacobian_linear(&gram, gamma);
        let n = features.dim;

        let (basis, lams) = linalg::range_basis(&gram.phi, RANGE_CUTOFF);
        let rank = lams.len();
        conventions.insert(
            "hessian_rank".into(),
            if rank < n {
                format!("rank-deficient: projected onto numerical range ({rank} of {n})")
            } else {
                format!("full rank ({n})")
            },
        );

        match linalg::eigenvalues(&j_td) {
            Ok(eigs) => {
                let max_re = eigs.iter().map(|e| e.re).fold(f64::NEG_INFINITY, f64::max);
                report.verdicts.assumption4 = Some(max_re < 0.0);
                report
                    .margins
                    .insert("assumption4_max_real_part".into(), max_re);
            }
            Err(_) => {
                report.verdicts.assumption4 = None;
            }
        }

        if rank > 0 {
            let lam_star = lambda_h_star(&lams, opts.alpha);
            report.lambda_h_star = Some(lam_star);
            let j_td_r = basis.transpose() * &j_td * &basis;
            let j_td_norm =
                linalg::spectral_norm(&(DMatrix::identity(rank, rank) + &j_td_r * opts.alpha));
            report.j_td_norm_star = Some(j_td_norm);
            let h_r = basis.transpose() * &gram.phi * &basis;
            let j_delta_r = basis.transpose() * (&gram.phi_prime * gamma) * &basis;
            if let Ok(fpe_norm) = fpe_stability_norm(&h_r, &j_delta_r, None) {
                report.j_fpe_norm_star = Some(fpe_norm);
                report.verdicts.assumption5 = Some(fpe_norm < 1.0);
                report
                    .margins
                    .insert("assumption5_one_minus_norm".into(), 1.0 - fpe_norm);
                let c = condition_function(opts.alpha, opts.k, lam_star, j_td_norm, fpe_norm);
                report.condition_value = Some(c);
                report.contraction_constant = Some(c);
                report.verdicts.assumption6 = Some(c < 1.0);
                report
                    .margins
                    .insert("assumption6_one_minus_condition".into(), 1.0 - c);
                let lam_min = lams.iter().copied().fold(f64::INFINITY, f64::min);
                report.k_min = min_k_for_contraction(opts.alpha, lam_min, j_td_norm, fpe_norm);
            }
            if lam_star != 0.0 {
                report.sigma_k = sigma_k(opts.alpha, opts.k, lam_star, sigma_delta).ok();
            }
        }

        if let Ok(rho) = outer_map_spectral_radius(&gram, gamma, opts.alpha, opts.k) {
            report.outer_map_spectral_radius = Some(rho);
            report
                .margins
                .insert("outer_map_one_minus_radius".into(), 1.0 - rho);
        }

        let shift = low_distribution_shift_check(mdp, features, d, mu, pi);
        report.verdicts.low_shift = Some(shift.passes);
        report
            .margins
            .insert("low_shift_min_eigenvalue".into(), shift.margin);
    } else {
        // Monte Carlo estimates over the ball for a nonlinear approximator.
        let center = DVector::from_column_slice(&opts.region.center);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
        let n_points = opts.region.samples.clamp(2, 128);
        let points: Vec<DVector<f64>> = (0..n_points)
            .map(|_| sample_in_ball(&center, opts.region.radius, &mut rng))
            .collect();

        let mut lam_candidates: Vec<f64> = Vec::new();
        let mut j_td_norm: f64 = 0.0;
        let mut fpe_norm: f64 = 0.0;
        let mut max_re = f64::NEG_INFINITY;
        let mut fpe_available = true;
        for (i, point) in points.iter().enumerate() {
            let anchor = &points[(i + 1) % points.len()];
            // Retry once at a finer rule before giving a point up.
            let set = match path_mean_jacobians_numeric(
                mdp,
                approx,
                d,
                mu,
                pi,
                point,
                &center,
                anchor,
                opts.n_quad,
            )
            .or_else(|_| {
                path_mean_jacobians_numeric(
                    mdp,
                    approx,
                    d,
                    mu,
                    pi,
                    point,
                    &center,
                    anchor,
                    4 * opts.n_quad,
                )
            }) {
                Ok(s) => s,
                Err(_) => continue,
            };
            let h_sym = (&set.h + set.h.transpose()) * 0.5;
            lam_candidates.extend(linalg::symmetric_eigenvalues(&h_sym));
            j_td_norm = j_td_norm.max(linalg::spectral_norm(
                &(DMatrix::identity(set.j_td.nrows(), set.j_td.ncols()) + &set.j_td * opts.alpha),
            ));
            if let Ok(eigs) = linalg::eigenvalues(&set.j_td) {
                max_re = max_re.max(eigs.iter().map(|e| e.re).fold(f64::NEG_INFINITY, f64::max));
            }
            let j_delta_paper = path_mean_delta_jacobian_target_line(
                mdp,
                approx,
                d,
                mu,
                pi,
                &center,
                point,
                &center,
                opts.n_quad,
            );
            match fpe_stability_norm(&set.h, &j_delta_paper, Some(crate::engine::RIDGE_EPSILON)) {
                Ok(norm) => fpe_norm = fpe_norm.max(norm),
                Err(_) => fpe_available = false,
            }
        }
        if !lam_candidates.is_empty() {
            let lam_star = lambda_h_star(&lam_candidates, opts.alpha);
            report.lambda_h_star = Some(lam_star);
            report.j_td_norm_star = Some(j_td_norm);
            if fpe_available {
                report.j_fpe_norm_star = Some(fpe_norm);
                report.verdicts.assumption5 = Some(fpe_norm < 1.0);
                let c = condition_function(opts.alpha, opts.k, lam_star, j_td_norm, fpe_norm);
                report.condition_value = Some(c);
                report.contraction_constant = Some(c);
                report.verdicts.assumption6 = Some(c < 1.0);
                report
                    .margins
                    .insert("assumption6_one_minus_condition".into(), 1.0 - c);
            }
            if lam_star != 0.0 {
                report.sigma_k = sigma_k(opts.alpha, opts.k, lam_star, sigma_delta).ok();
            }
            report.verdicts.assumption4 = Some(max_re < 0.0);
            report
                .margins
                .insert("assumption4_max_real_part".into(), max_re);
        }
        conventions.insert(
            "nonlinear_suprema".into(),
            format!(
                "Monte Carlo over {n_points} ball points, trapezoid n_quad {}",
                opts.n_quad
            ),
        );
    }

    let stable_by_condition = report.verdicts.assumption6.unwrap_or(false);
    let stable_by_radius = report
        .outer_map_spectral_radius
        .map(|r| r < 1.0)
        .unwrap_or(false);
    report.verdicts.predicted_stable = Some(stable_by_condition || stable_by_radius);
    report.conventions = conventions;
    report
}
