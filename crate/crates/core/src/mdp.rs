//! Finite MDPs, policies, i.i.d. transition sampling and the canonical
//! environments used throughout the crate.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approximator::FeatureMap;

const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("transition row [{s}][{a}] sums to {sum}, expected 1 within {ROW_SUM_TOL}")]
    TransitionRowNotStochastic { s: usize, a: usize, sum: f64 },
    #[error("negative probability {value} at [{s}][{a}][{s_next}]")]
    NegativeProbability {
        s: usize,
        a: usize,
        s_next: usize,
        value: f64,
    },
    #[error("policy row {s} sums to {sum}, expected 1 within {ROW_SUM_TOL}")]
    PolicyRowNotStochastic { s: usize, sum: f64 },
    #[error("state distribution sums to {sum}, expected 1 within {ROW_SUM_TOL}")]
    DistributionNotNormalized { sum: f64 },
    #[error("|reward_mean[{s}][{a}]| = {value} exceeds r_max = {r_max}")]
    RewardOutOfRange {
        s: usize,
        a: usize,
        value: f64,
        r_max: f64,
    },
    #[error("discount gamma = {0} must lie in [0, 1)")]
    InvalidGamma(f64),
    #[error("reward_noise_std = {0} must be nonnegative and finite")]
    InvalidNoiseStd(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("power iteration did not settle within {iterations} iterations (residual {residual})")]
    NonErgodic { iterations: usize, residual: f64 },
}

/// The environment ⟨S, A, P, P₀, R, γ⟩ with enumerable states and actions.
///
/// Rewards are Gaussian around `reward_mean[s][a]`, truncated to
/// `[-r_max, r_max]` so the bounded-reward invariant holds exactly;
/// `reward_noise_std = 0` makes them deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// Probabilities indexed `[s][a][s_next]`.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// Mean reward table indexed `[s][a]`.
    pub reward_mean: Vec<Vec<f64>>,
    pub reward_noise_std: f64,
    pub gamma: f64,
    pub r_max: f64,
}

impl FiniteMdp {
    pub fn new(
        transition: Vec<Vec<Vec<f64>>>,
        reward_mean: Vec<Vec<f64>>,
        reward_noise_std: f64,
        gamma: f64,
        r_max: f64,
    ) -> Result<Self, MdpError> {
        let n_states = transition.len();
        if n_states == 0 {
            return Err(MdpError::Shape("no states".into()));
        }
        let n_actions = transition[0].len();
        if n_actions == 0 {
            return Err(MdpError::Shape("no actions".into()));
        }
        let mdp = FiniteMdp {
            n_states,
            n_actions,
            transition,
            reward_mean,
            reward_noise_std,
            gamma,
            r_max,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<(), MdpError> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(MdpError::InvalidGamma(self.gamma));
        }
        if !self.reward_noise_std.is_finite() || self.reward_noise_std < 0.0 {
            return Err(MdpError::InvalidNoiseStd(self.reward_noise_std));
        }
        if self.transition.len() != self.n_states || self.reward_mean.len() != self.n_states {
            return Err(MdpError::Shape("state dimension mismatch".into()));
        }
        for (s, per_action) in self.transition.iter().enumerate() {
            if per_action.len() != self.n_actions {
                return Err(MdpError::Shape(format!(
                    "transition[{s}] has wrong action count"
                )));
            }
            for (a, row) in per_action.iter().enumerate() {
                if row.len() != self.n_states {
                    return Err(MdpError::Shape(format!(
                        "transition[{s}][{a}] has wrong length"
                    )));
                }
                let mut sum = 0.0;
                for (s_next, &p) in row.iter().enumerate() {
                    if p < 0.0 {
                        return Err(MdpError::NegativeProbability {
                            s,
                            a,
                            s_next,
                            value: p,
                        });
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(MdpError::TransitionRowNotStochastic { s, a, sum });
                }
            }
        }
        for (s, row) in self.reward_mean.iter().enumerate() {
            if row.len() != self.n_actions {
                return Err(MdpError::Shape(format!(
                    "reward_mean[{s}] has wrong length"
                )));
            }
            for (a, &r) in row.iter().enumerate() {
                if !r.is_finite() || r.abs() > self.r_max {
                    return Err(MdpError::RewardOutOfRange {
                        s,
                        a,
                        value: r,
                        r_max: self.r_max,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("FiniteMdp serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, MdpError> {
        let mdp: FiniteMdp =
            serde_json::from_str(text).map_err(|e| MdpError::Shape(e.to_string()))?;
        mdp.validate()?;
        Ok(mdp)
    }
}

/// Row-stochastic map from states to action distributions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Policy {
    pub probs: Vec<Vec<f64>>,
}

impl Policy {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self, MdpError> {
        for (s, row) in probs.iter().enumerate() {
            let mut sum = 0.0;
            for &p in row {
                if p < 0.0 {
                    return Err(MdpError::PolicyRowNotStochastic { s, sum: p });
                }
                sum += p;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(MdpError::PolicyRowNotStochastic { s, sum });
            }
        }
        Ok(Policy { probs })
    }

    /// Policy that always selects `action`.
    pub fn deterministic(n_states: usize, n_actions: usize, action: usize) -> Self {
        let mut probs = vec![vec![0.0; n_actions]; n_states];
        for row in &mut probs {
            row[action] = 1.0;
        }
        Policy { probs }
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Policy {
            probs: vec![vec![1.0 / n_actions as f64; n_actions]; n_states],
        }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s][a]
    }
}

/// Distribution over states.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateDistribution {
    pub probs: Vec<f64>,
}

impl StateDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, MdpError> {
        let mut sum = 0.0;
        for &p in &probs {
            if p < 0.0 {
                return Err(MdpError::DistributionNotNormalized { sum: p });
            }
            sum += p;
        }
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(MdpError::DistributionNotNormalized { sum });
        }
        Ok(StateDistribution { probs })
    }

    pub fn uniform(n_states: usize) -> Self {
        StateDistribution {
            probs: vec![1.0 / n_states as f64; n_states],
        }
    }

    pub fn prob(&self, s: usize) -> f64 {
        self.probs[s]
    }
}

/// One sampled tuple (s, a, r, s', a').
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    pub a_next: usize,
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Draw one i.i.d. tuple: s ~ d, a ~ μ(s), r ~ R(s,a), s' ~ P(s,a), a' ~ π(s').
pub fn sample_transition<R: Rng>(
    mdp: &FiniteMdp,
    d: &StateDistribution,
    mu: &Policy,
    pi: &Policy,
    rng: &mut R,
) -> Transition {
    let s = sample_index(&d.probs, rng);
    let a = sample_index(&mu.probs[s], rng);
    let mean = mdp.reward_mean[s][a];
    let r = if mdp.reward_noise_std == 0.0 {
        mean
    } else {
        // Truncated Gaussian by rejection, keeping |r| <= r_max exactly.
        let normal = Normal::new(mean, mdp.reward_noise_std).expect("valid normal");
        loop {
            let draw = normal.sample(rng);
            if draw.abs() <= mdp.r_max {
                break draw;
            }
        }
    };
    let s_next = sample_index(&mdp.transition[s][a], rng);
    let a_next = sample_index(&pi.probs[s_next], rng);
    Transition {
        s,
        a,
        r,
        s_next,
        a_next,
    }
}

/// One-step lookahead distribution P^μ(s') = Σ_s Σ_a d(s) μ(a|s) P(s'|s,a),
/// computed by exact enumeration.
pub fn lookahead_distribution(
    mdp: &FiniteMdp,
    d: &StateDistribution,
    mu: &Policy,
) -> StateDistribution {
    let mut out = vec![0.0; mdp.n_states];
    for s in 0..mdp.n_states {
        let ds = d.probs[s];
        if ds == 0.0 {
            continue;
        }
        for a in 0..mdp.n_actions {
            let w = ds * mu.probs[s][a];
            if w == 0.0 {
                continue;
            }
            for (s_next, &p) in mdp.transition[s][a].iter().enumerate() {
                out[s_next] += w * p;
            }
        }
    }
    StateDistribution { probs: out }
}

/// Stationary distribution of the chain induced by π, by power iteration.
/// Settles when ‖dP^π − d‖∞ ≤ 1e-10; errors as NonErgodic past the cap.
pub fn stationary_distribution(
    mdp: &FiniteMdp,
    pi: &Policy,
) -> Result<StateDistribution, MdpError> {
    stationary_distribution_capped(mdp, pi, 200_000)
}

pub fn stationary_distribution_capped(
    mdp: &FiniteMdp,
    pi: &Policy,
    max_iterations: usize,
) -> Result<StateDistribution, MdpError> {
    let n = mdp.n_states;
    // P^π(s'|s) = Σ_a π(a|s) P(s'|s,a)
    let mut kernel = vec![vec![0.0; n]; n];
    for s in 0..n {
        for a in 0..mdp.n_actions {
            let w = pi.probs[s][a];
            if w == 0.0 {
                continue;
            }
            for (s_next, &p) in mdp.transition[s][a].iter().enumerate() {
                kernel[s][s_next] += w * p;
            }
        }
    }
    let mut d = vec![1.0 / n as f64; n];
    let mut residual = f64::INFINITY;
    for _ in 0..max_iterations {
        let mut next = vec![0.0; n];
        for s in 0..n {
            let ds = d[s];
            if ds == 0.0 {
                continue;
            }
            for s2 in 0..n {
                next[s2] += ds * kernel[s][s2];
            }
        }
        let sum: f64 = next.iter().sum();
        for v in &mut next {
            *v /= sum;
        }
        residual = d
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        d = next;
        if residual <= 1e-10 {
            return Ok(StateDistribution { probs: d });
        }
    }
    Err(MdpError::NonErgodic {
        iterations: max_iterations,
        residual,
    })
}

/// The seven-state counterexample environment with its feature scheme,
/// policies, sampling distribution and conventional initial parameters.
#[derive(Debug, Clone)]
pub struct BairdSetup {
    pub mdp: FiniteMdp,
    pub features: FeatureMap,
    pub pi: Policy,
    pub mu: Policy,
    pub d: StateDistribution,
    /// Conventional start: all ones except the seventh weight at 10.
    pub omega0: Vec<f64>,
}

pub const BAIRD_SOLID: usize = 0;
pub const BAIRD_WAVY: usize = 1;

/// Build the counterexample: 7 states (indices 0..=5 upper, 6 lower), two
/// actions. The solid action moves to the lower state deterministically; the
/// wavy action moves to one of the six upper states uniformly. Rewards are
/// zero everywhere. States are sampled i.i.d. uniformly and both the sampling
/// and target policies take the solid action, so every update bootstraps the
/// lower state's solid value while the gradient is taken at a uniformly
/// random state — the state-distribution mismatch that destabilises TD here.
///
/// Features (8 weights, attached to the solid-action values): upper state i
/// carries 2·e_i + e_7, the lower state carries e_6 + 2·e_7 (zero-based).
/// Wavy-action pairs carry zero features; they are never sampled nor
/// bootstrapped under these policies.
pub fn build_baird() -> BairdSetup {
    let n_states = 7;
    let n_actions = 2;
    let mut transition = vec![vec![vec![0.0; n_states]; n_actions]; n_states];
    for s in 0..n_states {
        transition[s][BAIRD_SOLID][6] = 1.0;
        for upper in 0..6 {
            transition[s][BAIRD_WAVY][upper] = 1.0 / 6.0;
        }
    }
    let reward_mean = vec![vec![0.0; n_actions]; n_states];
    let mdp = FiniteMdp::new(transition, reward_mean, 0.0, 0.99, 1.0).expect("valid Baird MDP");

    let dim = 8;
    let mut table = vec![vec![0.0; dim]; n_states * n_actions];
    for upper in 0..6 {
        table[upper * n_actions + BAIRD_SOLID][upper] = 2.0;
        table[upper * n_actions + BAIRD_SOLID][7] = 1.0;
    }
    table[6 * n_actions + BAIRD_SOLID][6] = 1.0;
    table[6 * n_actions + BAIRD_SOLID][7] = 2.0;
    let features = FeatureMap::new(dim, n_actions, table).expect("valid Baird features");

    let pi = Policy::deterministic(n_states, n_actions, BAIRD_SOLID);
    let mu = Policy::deterministic(n_states, n_actions, BAIRD_SOLID);
    let d = StateDistribution::uniform(n_states);
    let omega0 = vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 10.0, 1.0];

    BairdSetup {
        mdp,
        features,
        pi,
        mu,
        d,
        omega0,
    }
}

/// Single state, single action, reward 1, discount 0.9, scalar feature 1.
pub fn self_loop() -> (FiniteMdp, FeatureMap, Policy, StateDistribution) {
    let mdp = FiniteMdp::new(vec![vec![vec![1.0]]], vec![vec![1.0]], 0.0, 0.9, 1.0)
        .expect("valid self-loop MDP");
    let features = FeatureMap::new(1, 1, vec![vec![1.0]]).expect("valid features");
    let pi = Policy::deterministic(1, 1, 0);
    let d = StateDistribution::uniform(1);
    (mdp, features, pi, d)
}

/// Two states, one action, deterministic cycle 0 -> 1 -> 0, reward 1 when
/// leaving state 0, discount 0.9, one-hot state features.
pub fn cycle2() -> (FiniteMdp, FeatureMap, Policy, StateDistribution) {
    let transition = vec![vec![vec![0.0, 1.0]], vec![vec![1.0, 0.0]]];
    let reward_mean = vec![vec![1.0], vec![0.0]];
    let mdp = FiniteMdp::new(transition, reward_mean, 0.0, 0.9, 1.0).expect("valid cycle MDP");
    let features = FeatureMap::one_hot(2, 1);
    let pi = Policy::deterministic(2, 1, 0);
    let d = StateDistribution::uniform(2);
    (mdp, features, pi, d)
}

/// Ergodicity floor applied to every transition probability of random MDPs.
pub const ERGODICITY_FLOOR: f64 = 1e-3;

/// Default discount for generated test-bed MDPs.
pub const RANDOM_MDP_GAMMA: f64 = 0.3;

/// Random MDP with Dirichlet-like transition rows floored at
/// [`ERGODICITY_FLOOR`] (so any full-support policy induces an ergodic chain)
/// and mean rewards uniform in [-r_max, r_max]. Rewards are deterministic;
/// the discount defaults to [`RANDOM_MDP_GAMMA`].
pub fn random_ergodic_mdp<R: Rng>(
    rng: &mut R,
    n_states: usize,
    n_actions: usize,
    r_max: f64,
) -> FiniteMdp {
    assert!(n_states >= 1 && n_actions >= 1);
    let floor = ERGODICITY_FLOOR;
    let mut transition = vec![vec![vec![0.0; n_states]; n_actions]; n_states];
    for s in 0..n_states {
        for a in 0..n_actions {
            // Exponential draws normalised to a Dirichlet(1,..,1) row, then
            // mixed with the floor.
            let mut row: Vec<f64> = (0..n_states)
                .map(|_| -f64::ln(1.0 - rng.random::<f64>()))
                .collect();
            let sum: f64 = row.iter().sum();
            for (s2, v) in row.iter_mut().enumerate() {
                *v = (1.0 - floor * n_states as f64) * (*v / sum) + floor;
                transition[s][a][s2] = *v;
            }
            // Renormalise away accumulated rounding.
            let total: f64 = transition[s][a].iter().sum();
            for v in &mut transition[s][a] {
                *v /= total;
            }
        }
    }
    let reward_mean = (0..n_states)
        .map(|_| {
            (0..n_actions)
                .map(|_| rng.random_range(-r_max..r_max))
                .collect()
        })
        .collect();
    FiniteMdp::new(transition, reward_mean, 0.0, RANDOM_MDP_GAMMA, r_max)
        .expect("generated MDP is valid")
}

/// Random full-support policy with per-entry weight 0.5 + U[0,1).
pub fn random_policy<R: Rng>(rng: &mut R, n_states: usize, n_actions: usize) -> Policy {
    let mut probs = vec![vec![0.0; n_actions]; n_states];
    for row in &mut probs {
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = 0.5 + rng.random::<f64>();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Policy { probs }
}
