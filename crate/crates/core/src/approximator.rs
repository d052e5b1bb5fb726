//! Parametric Q-functions with exact first and second derivatives: linear
//! features and a single-hidden-layer tanh perceptron, plus the
//! finite-difference oracles used to verify the analytic derivatives.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApproximatorError {
    #[error("feature table row (s={s}, a={a}) has length {got}, expected {expected}")]
    FeatureDim {
        s: usize,
        a: usize,
        got: usize,
        expected: usize,
    },
    #[error("non-finite feature value at (s={s}, a={a})")]
    NonFiniteFeature { s: usize, a: usize },
    #[error("feature table length {got} is not a multiple of n_actions {n_actions}")]
    TableShape { got: usize, n_actions: usize },
    #[error("parameter vector has length {got}, expected {expected}")]
    ParamDim { got: usize, expected: usize },
}

/// Feature vectors φ(s, a), materialised as a table indexed by
/// `s * n_actions + a`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureMap {
    pub dim: usize,
    pub n_actions: usize,
    /// Array-of-arrays keyed by the flattened (s, a) index.
    pub features: Vec<Vec<f64>>,
}

impl FeatureMap {
    pub fn new(
        dim: usize,
        n_actions: usize,
        features: Vec<Vec<f64>>,
    ) -> Result<Self, ApproximatorError> {
        if n_actions == 0 || !features.len().is_multiple_of(n_actions) {
            return Err(ApproximatorError::TableShape {
                got: features.len(),
                n_actions,
            });
        }
        for (idx, row) in features.iter().enumerate() {
            let (s, a) = (idx / n_actions, idx % n_actions);
            if row.len() != dim {
                return Err(ApproximatorError::FeatureDim {
                    s,
                    a,
                    got: row.len(),
                    expected: dim,
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(ApproximatorError::NonFiniteFeature { s, a });
            }
        }
        Ok(FeatureMap {
            dim,
            n_actions,
            features,
        })
    }

    /// One-hot features over (s, a) pairs; dim = n_states · n_actions.
    pub fn one_hot(n_states: usize, n_actions: usize) -> Self {
        let dim = n_states * n_actions;
        let mut features = vec![vec![0.0; dim]; dim];
        for (i, row) in features.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        FeatureMap {
            dim,
            n_actions,
            features,
        }
    }

    pub fn n_states(&self) -> usize {
        self.features.len() / self.n_actions
    }

    pub fn phi(&self, s: usize, a: usize) -> &[f64] {
        &self.features[s * self.n_actions + a]
    }

    pub fn phi_vector(&self, s: usize, a: usize) -> DVector<f64> {
        DVector::from_column_slice(self.phi(s, a))
    }
}

/// A parametric Q-function exposing value, gradient and Hessian at (ω, s, a).
pub trait Approximator {
    fn param_dim(&self) -> usize;
    fn value(&self, omega: &DVector<f64>, s: usize, a: usize) -> f64;
    fn grad(&self, omega: &DVector<f64>, s: usize, a: usize) -> DVector<f64>;
    fn hess(&self, omega: &DVector<f64>, s: usize, a: usize) -> DMatrix<f64>;
    /// The feature map when the approximator is exactly linear in ω.
    fn features(&self) -> Option<&FeatureMap> {
        None
    }
}

/// Q_ω(s,a) = φ(s,a)ᵀω. Gradient is φ(s,a); the Hessian is zero.
#[derive(Debug, Clone)]
pub struct LinearApproximator {
    pub map: FeatureMap,
}

impl LinearApproximator {
    pub fn new(map: FeatureMap) -> Self {
        LinearApproximator { map }
    }
}

impl Approximator for LinearApproximator {
    fn param_dim(&self) -> usize {
        self.map.dim
    }

    fn value(&self, omega: &DVector<f64>, s: usize, a: usize) -> f64 {
        assert_eq!(omega.len(), self.map.dim, "parameter dimension mismatch");
        self.map
            .phi(s, a)
            .iter()
            .zip(omega.iter())
            .map(|(p, w)| p * w)
            .sum()
    }

    fn grad(&self, _omega: &DVector<f64>, s: usize, a: usize) -> DVector<f64> {
        self.map.phi_vector(s, a)
    }

    fn hess(&self, _omega: &DVector<f64>, _s: usize, _a: usize) -> DMatrix<f64> {
        DMatrix::zeros(self.map.dim, self.map.dim)
    }

    fn features(&self) -> Option<&FeatureMap> {
        Some(&self.map)
    }
}

pub const DEFAULT_MLP_HIDDEN_WIDTH: usize = 8;

/// One-hidden-layer tanh network over a one-hot (s, a) encoding with a
/// scalar linear head. tanh keeps the value twice differentiable everywhere,
/// so exact Hessians exist.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpSpec {
    pub n_states: usize,
    pub n_actions: usize,
    #[serde(default = "default_hidden_width")]
    pub hidden_width: usize,
}

fn default_hidden_width() -> usize {
    DEFAULT_MLP_HIDDEN_WIDTH
}

impl MlpSpec {
    pub fn input_dim(&self) -> usize {
        self.n_states * self.n_actions
    }

    /// Parameters are packed [W1 row-major (h × in), b1 (h), w2 (h), b2 (1)].
    pub fn param_dim(&self) -> usize {
        let (h, input) = (self.hidden_width, self.input_dim());
        h * input + h + h + 1
    }
}

#[derive(Debug, Clone)]
pub struct MlpApproximator {
    pub spec: MlpSpec,
}

impl MlpApproximator {
    pub fn new(spec: MlpSpec) -> Self {
        MlpApproximator { spec }
    }

    /// Initial parameters uniform in [-0.5, 0.5] under the given generator.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(self.spec.param_dim(), |_, _| rng.random_range(-0.5..0.5))
    }

    fn offsets(&self) -> (usize, usize, usize, usize) {
        let (h, input) = (self.spec.hidden_width, self.spec.input_dim());
        let w1 = 0;
        let b1 = h * input;
        let w2 = b1 + h;
        let b2 = w2 + h;
        (w1, b1, w2, b2)
    }

    /// Pre-activations and tanh outputs for the one-hot input of (s, a).
    fn hidden(&self, omega: &DVector<f64>, idx: usize) -> (Vec<f64>, Vec<f64>) {
        let (h, input) = (self.spec.hidden_width, self.spec.input_dim());
        let (_, b1, _, _) = self.offsets();
        let mut z = vec![0.0; h];
        let mut t = vec![0.0; h];
        for j in 0..h {
            let zj = omega[j * input + idx] + omega[b1 + j];
            z[j] = zj;
            t[j] = zj.tanh();
        }
        (z, t)
    }
}

impl Approximator for MlpApproximator {
    fn param_dim(&self) -> usize {
        self.spec.param_dim()
    }

    fn value(&self, omega: &DVector<f64>, s: usize, a: usize) -> f64 {
        assert_eq!(
            omega.len(),
            self.param_dim(),
            "parameter dimension mismatch"
        );
        let idx = s * self.spec.n_actions + a;
        let (h, _) = (self.spec.hidden_width, ());
        let (_, _, w2, b2) = self.offsets();
        let (_, t) = self.hidden(omega, idx);
        let mut y = omega[b2];
        for j in 0..h {
            y += omega[w2 + j] * t[j];
        }
        y
    }

    fn grad(&self, omega: &DVector<f64>, s: usize, a: usize) -> DVector<f64> {
        assert_eq!(
            omega.len(),
            self.param_dim(),
            "parameter dimension mismatch"
        );
        let idx = s * self.spec.n_actions + a;
        let (h, input) = (self.spec.hidden_width, self.spec.input_dim());
        let (_, b1, w2, b2) = self.offsets();
        let (_, t) = self.hidden(omega, idx);
        let mut g = DVector::zeros(self.param_dim());
        for j in 0..h {
            let d = 1.0 - t[j] * t[j];
            let back = omega[w2 + j] * d;
            g[j * input + idx] = back; // only the active input column
            g[b1 + j] = back;
            g[w2 + j] = t[j];
        }
        g[b2] = 1.0;
        g
    }

    fn hess(&self, omega: &DVector<f64>, s: usize, a: usize) -> DMatrix<f64> {
        assert_eq!(
            omega.len(),
            self.param_dim(),
            "parameter dimension mismatch"
        );
        let idx = s * self.spec.n_actions + a;
        let (h, input) = (self.spec.hidden_width, self.spec.input_dim());
        let (_, b1, w2, _) = self.offsets();
        let (_, t) = self.hidden(omega, idx);
        let n = self.param_dim();
        let mut m = DMatrix::zeros(n, n);
        for j in 0..h {
            let d = 1.0 - t[j] * t[j];
            let dd = -2.0 * t[j] * d; // tanh''
            let curv = omega[w2 + j] * dd;
            let iw = j * input + idx;
            let ib = b1 + j;
            let io = w2 + j;
            // Second derivatives w.r.t. the pre-activation parameters.
            m[(iw, iw)] += curv;
            m[(ib, ib)] += curv;
            m[(iw, ib)] += curv;
            m[(ib, iw)] += curv;
            // Mixed output-weight / pre-activation terms.
            m[(io, iw)] += d;
            m[(iw, io)] += d;
            m[(io, ib)] += d;
            m[(ib, io)] += d;
        }
        m
    }
}

/// Scale `v` onto the ball of radius `c_clip` when it lies outside.
pub fn clip_vector(v: &DVector<f64>, c_clip: f64) -> DVector<f64> {
    assert!(c_clip > 0.0, "clip threshold must be positive");
    let norm = v.norm();
    if norm <= c_clip {
        v.clone()
    } else {
        v * (c_clip / norm)
    }
}

/// Finite-difference oracles, kept independent of the analytic paths they
/// verify.
pub mod fd {
    use nalgebra::{DMatrix, DVector};

    /// Central-difference gradient of a scalar function.
    pub fn grad_central<F: Fn(&DVector<f64>) -> f64>(
        f: F,
        x: &DVector<f64>,
        h: f64,
    ) -> DVector<f64> {
        let n = x.len();
        let mut g = DVector::zeros(n);
        let mut xp = x.clone();
        for i in 0..n {
            let orig = x[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    /// Central-difference Jacobian of a vector function (rows = output dims).
    pub fn jacobian_central<F: Fn(&DVector<f64>) -> DVector<f64>>(
        f: F,
        x: &DVector<f64>,
        h: f64,
    ) -> DMatrix<f64> {
        let n = x.len();
        let probe = f(x);
        let m = probe.len();
        let mut jac = DMatrix::zeros(m, n);
        let mut xp = x.clone();
        for j in 0..n {
            let orig = x[j];
            xp[j] = orig + h;
            let fp = f(&xp);
            xp[j] = orig - h;
            let fm = f(&xp);
            xp[j] = orig;
            for i in 0..m {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        jac
    }

    /// Largest |a - b| / max(1, |b|) over all entries.
    pub fn max_relative_error(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs() / f64::max(1.0, y.abs()))
            .fold(0.0, f64::max)
    }

    pub fn max_relative_error_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs() / f64::max(1.0, y.abs()))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_value_basic_cases() {
        let map = FeatureMap::new(2, 1, vec![vec![1.0, 0.0]]).unwrap();
        let lin = LinearApproximator::new(map);
        let omega = DVector::from_vec(vec![3.0, 5.0]);
        assert_abs_diff_eq!(lin.value(&omega, 0, 0), 3.0);
        assert_abs_diff_eq!(lin.value(&DVector::zeros(2), 0, 0), 0.0);
    }

    #[test]
    fn baird_lower_state_solid_value() {
        let baird = crate::mdp::build_baird();
        let lin = LinearApproximator::new(baird.features.clone());
        let mut omega = DVector::zeros(8);
        omega[6] = 1.0;
        omega[7] = 2.0;
        assert_abs_diff_eq!(lin.value(&omega, 6, crate::mdp::BAIRD_SOLID), 5.0);
    }

    #[test]
    fn linear_value_is_linear_and_grad_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let map = FeatureMap::new(
            4,
            2,
            (0..6)
                .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
        )
        .unwrap();
        let lin = LinearApproximator::new(map);
        let w1 = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let w2 = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        for s in 0..3 {
            for a in 0..2 {
                let sum = lin.value(&(&w1 + &w2), s, a);
                assert_abs_diff_eq!(
                    sum,
                    lin.value(&w1, s, a) + lin.value(&w2, s, a),
                    epsilon = 1e-12
                );
                assert_eq!(lin.grad(&w1, s, a), lin.grad(&w2, s, a));
                assert_eq!(lin.hess(&w1, s, a), DMatrix::zeros(4, 4));
            }
        }
    }

    #[test]
    fn mlp_at_zero_parameters() {
        let spec = MlpSpec {
            n_states: 3,
            n_actions: 2,
            hidden_width: 4,
        };
        let mlp = MlpApproximator::new(spec);
        let omega = DVector::zeros(mlp.param_dim());
        assert_abs_diff_eq!(mlp.value(&omega, 1, 0), 0.0);
        let g = mlp.grad(&omega, 1, 0);
        // tanh(0) = 0 kills every path except the output bias.
        for i in 0..mlp.param_dim() - 1 {
            assert_abs_diff_eq!(g[i], 0.0, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(g[mlp.param_dim() - 1], 1.0);
    }

    #[test]
    fn mlp_gradient_matches_central_differences() {
        let spec = MlpSpec {
            n_states: 3,
            n_actions: 2,
            hidden_width: 5,
        };
        let mlp = MlpApproximator::new(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for draw in 0..20 {
            let omega = mlp.init_params(&mut rng);
            let s = draw % 3;
            let a = draw % 2;
            let analytic = mlp.grad(&omega, s, a);
            let numeric = fd::grad_central(|w| mlp.value(w, s, a), &omega, 1e-5);
            let err = fd::max_relative_error(&analytic, &numeric);
            assert!(err <= 1e-5, "draw {draw}: gradient rel err {err}");
        }
    }

    #[test]
    fn mlp_hessian_matches_fd_of_gradient_and_is_symmetric() {
        let spec = MlpSpec {
            n_states: 2,
            n_actions: 2,
            hidden_width: 4,
        };
        let mlp = MlpApproximator::new(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for draw in 0..20 {
            let omega = mlp.init_params(&mut rng);
            let s = draw % 2;
            let a = (draw / 2) % 2;
            let analytic = mlp.hess(&omega, s, a);
            let sym_gap = (&analytic - analytic.transpose()).abs().max();
            assert!(sym_gap <= 1e-10, "symmetry gap {sym_gap}");
            let numeric = fd::jacobian_central(|w| mlp.grad(w, s, a), &omega, 1e-5);
            let err = fd::max_relative_error_mat(&analytic, &numeric);
            assert!(err <= 1e-4, "draw {draw}: hessian rel err {err}");
        }
    }

    #[test]
    fn clip_vector_cases() {
        let inside = DVector::from_vec(vec![3.0, 4.0]);
        assert_eq!(clip_vector(&inside, 10.0), inside);
        assert_eq!(clip_vector(&inside, 5.0), inside); // boundary
        let outside = DVector::from_vec(vec![6.0, 8.0]);
        let clipped = clip_vector(&outside, 5.0);
        assert_abs_diff_eq!(clipped[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(clipped[1], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn feature_map_json_round_trip() {
        let baird = crate::mdp::build_baird();
        let text = serde_json::to_string(&baird.features).unwrap();
        let back: FeatureMap = serde_json::from_str(&text).unwrap();
        assert_eq!(back.dim, 8);
        assert_eq!(back.features, baird.features.features);
    }

    #[test]
    fn invalid_feature_tables_are_rejected() {
        assert!(FeatureMap::new(2, 1, vec![vec![1.0]]).is_err());
        assert!(FeatureMap::new(1, 1, vec![vec![f64::NAN]]).is_err());
        assert!(FeatureMap::new(1, 2, vec![vec![1.0]]).is_err());
    }

    mod clip_props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn clip_norm_never_exceeds_threshold(
                xs in proptest::collection::vec(-100.0f64..100.0, 1..6),
                c in 0.1f64..50.0,
            ) {
                let v = DVector::from_vec(xs);
                let clipped = clip_vector(&v, c);
                prop_assert!(clipped.norm() <= c * (1.0 + 1e-12));
                if v.norm() <= c {
                    prop_assert_eq!(clipped, v);
                }
            }
        }
    }
}
