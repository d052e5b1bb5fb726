//! Experiment configuration: JSON schema, validation, and expansion into the
//! concrete MDP / approximator / distribution bundle a run needs.

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use pfpe_core::{
    build_baird, cycle2, random_ergodic_mdp, random_policy, self_loop, stationary_distribution,
    td_fixed_point_linear, Approximator, FeatureMap, FiniteMdp, LinearApproximator,
    MlpApproximator, MlpSpec, Policy, Regularisation, RunConfig, RunMode, StateDistribution,
    StepSizeSchedule, TargetUpdateRule,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvironmentSpec {
    /// One of "baird", "cycle2", "selfloop".
    Builtin { name: String },
    RandomErgodic {
        n_states: usize,
        n_actions: usize,
        seed: u64,
        #[serde(default = "default_r_max")]
        r_max: f64,
        #[serde(default)]
        gamma: Option<f64>,
    },
    Inline {
        mdp: FiniteMdp,
        #[serde(default)]
        features: Option<FeatureMap>,
        #[serde(default)]
        d: Option<Vec<f64>>,
        #[serde(default)]
        mu: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        pi: Option<Vec<Vec<f64>>>,
    },
}

fn default_r_max() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ApproximatorSpec {
    /// Linear in the environment's feature map (or an inline override).
    #[default]
    Linear,
    Mlp {
        #[serde(default = "default_hidden")]
        hidden_width: usize,
    },
}

fn default_hidden() -> usize {
    8
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    #[default]
    Sampled,
    ExactExpectation,
}

/// The `run` section: engine settings minus the per-run seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSection {
    pub schedule: StepSizeSchedule,
    pub k: usize,
    pub n_target_updates: usize,
    #[serde(default = "default_rule")]
    pub target_rule: TargetUpdateRule,
    #[serde(default)]
    pub regularisation: Regularisation,
    #[serde(default)]
    pub mode: ModeKind,
    #[serde(default)]
    pub clip: Option<f64>,
    #[serde(default)]
    pub gamma_override: Option<f64>,
    #[serde(default)]
    pub omega0: Option<Vec<f64>>,
    #[serde(default = "default_blow_up")]
    pub blow_up_threshold: f64,
}

fn default_rule() -> TargetUpdateRule {
    TargetUpdateRule::PeriodicCopy
}

fn default_blow_up() -> f64 {
    1e8
}

impl RunSection {
    pub fn to_engine(&self, seed: u64) -> RunConfig {
        self.to_engine_with_clip(seed, self.clip)
    }

    /// Engine config with the clip resolved per approximator: nonlinear runs
    /// default to the conventional radius, linear runs leave it off.
    pub fn to_engine_for(&self, seed: u64, approximator: &ApproximatorSpec) -> RunConfig {
        let clip = self.clip.or(match approximator {
            ApproximatorSpec::Linear => None,
            ApproximatorSpec::Mlp { .. } => Some(pfpe_core::engine::DEFAULT_CLIP_THRESHOLD),
        });
        self.to_engine_with_clip(seed, clip)
    }

    fn to_engine_with_clip(&self, seed: u64, clip: Option<f64>) -> RunConfig {
        RunConfig {
            schedule: self.schedule.clone(),
            k: self.k,
            n_target_updates: self.n_target_updates,
            target_rule: self.target_rule.clone(),
            regularisation: self.regularisation,
            mode: match self.mode {
                ModeKind::Sampled => RunMode::Sampled { seed },
                ModeKind::ExactExpectation => RunMode::ExactExpectation,
            },
            clip,
            gamma_override: self.gamma_override,
            omega0: self.omega0.clone(),
            blow_up_threshold: self.blow_up_threshold,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSpec {
    pub k: Vec<usize>,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionSection {
    #[serde(default)]
    pub center: Option<Vec<f64>>,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_radius() -> f64 {
    1.0
}

fn default_samples() -> usize {
    128
}

impl Default for RegionSection {
    fn default() -> Self {
        RegionSection {
            center: None,
            radius: default_radius(),
            samples: default_samples(),
        }
    }
}

/// Synthetic analysis: condition-function quantities supplied directly, for
/// plotting the curve without an environment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticAnalysis {
    pub j_td_norm: f64,
    pub j_fpe_norm: f64,
    #[serde(default = "default_lambda")]
    pub lambda_h_star: f64,
    #[serde(default = "default_lambda")]
    pub lambda_min: f64,
}

fn default_lambda() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisSection {
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub k: Option<u64>,
    #[serde(default)]
    pub region: RegionSection,
    #[serde(default)]
    pub sigma_delta: Option<f64>,
    #[serde(default = "default_k_max")]
    pub curve_k_max: u64,
    #[serde(default)]
    pub synthetic: Option<SyntheticAnalysis>,
    #[serde(default)]
    pub n_quad: Option<usize>,
}

fn default_k_max() -> u64 {
    100
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub environment: EnvironmentSpec,
    #[serde(default)]
    pub approximator: ApproximatorSpec,
    pub run: RunSection,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub analysis: Option<AnalysisSection>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            serde_json::from_str(text).context("parsing experiment config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds list must be nonempty");
        }
        if let Some(sweep) = &self.sweep {
            if sweep.k.is_empty() || sweep.alpha.is_empty() {
                bail!("sweep lists must be nonempty when present");
            }
        }
        if matches!(self.approximator, ApproximatorSpec::Mlp { .. })
            && self.run.mode == ModeKind::ExactExpectation
            && self.run.omega0.is_none()
        {
            bail!("exact-expectation mode with an mlp approximator requires run.omega0");
        }
        self.run
            .to_engine(0)
            .validate()
            .map_err(|e| anyhow!("invalid run section: {e}"))?;
        Ok(())
    }
}

/// Fully expanded environment: the MDP with its sampling distribution,
/// policies, features and a conventional starting point.
pub struct Workbench {
    pub name: String,
    pub mdp: FiniteMdp,
    pub features: FeatureMap,
    pub d: StateDistribution,
    pub mu: Policy,
    pub pi: Policy,
    /// Environment-conventional initial parameters for linear runs.
    pub omega0_default: Option<Vec<f64>>,
}

impl Workbench {
    pub fn build(spec: &EnvironmentSpec) -> Result<Workbench> {
        match spec {
            EnvironmentSpec::Builtin { name } => match name.as_str() {
                "baird" => {
                    let b = build_baird();
                    Ok(Workbench {
                        name: "baird".into(),
                        mdp: b.mdp,
                        features: b.features,
                        d: b.d,
                        mu: b.mu,
                        pi: b.pi,
                        omega0_default: Some(b.omega0),
                    })
                }
                "cycle2" => {
                    let (mdp, features, pi, d) = cycle2();
                    Ok(Workbench {
                        name: "cycle2".into(),
                        mdp,
                        features,
                        d,
                        mu: pi.clone(),
                        pi,
                        omega0_default: None,
                    })
                }
                "selfloop" => {
                    let (mdp, features, pi, d) = self_loop();
                    Ok(Workbench {
                        name: "selfloop".into(),
                        mdp,
                        features,
                        d,
                        mu: pi.clone(),
                        pi,
                        omega0_default: None,
                    })
                }
                other => bail!("unknown builtin environment '{other}'"),
            },
            EnvironmentSpec::RandomErgodic {
                n_states,
                n_actions,
                seed,
                r_max,
                gamma,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut mdp = random_ergodic_mdp(&mut rng, *n_states, *n_actions, *r_max);
                if let Some(g) = gamma {
                    if !(0.0..1.0).contains(g) {
                        bail!("random_ergodic gamma {g} not in [0, 1)");
                    }
                    mdp.gamma = *g;
                }
                let pi = random_policy(&mut rng, *n_states, *n_actions);
                let d = stationary_distribution(&mdp, &pi)
                    .map_err(|e| anyhow!("stationary distribution: {e}"))?;
                Ok(Workbench {
                    name: format!("random_ergodic_{seed}"),
                    mdp,
                    features: FeatureMap::one_hot(*n_states, *n_actions),
                    d,
                    mu: pi.clone(),
                    pi,
                    omega0_default: None,
                })
            }
            EnvironmentSpec::Inline {
                mdp,
                features,
                d,
                mu,
                pi,
            } => {
                mdp.validate()
                    .map_err(|e| anyhow!("inline MDP invalid: {e}"))?;
                let features = match features {
                    Some(f) => f.clone(),
                    None => FeatureMap::one_hot(mdp.n_states, mdp.n_actions),
                };
                if features.n_states() != mdp.n_states || features.n_actions != mdp.n_actions {
                    bail!("inline feature table does not match the MDP shape");
                }
                let d = match d {
                    Some(probs) => StateDistribution::new(probs.clone())
                        .map_err(|e| anyhow!("inline d invalid: {e}"))?,
                    None => StateDistribution::uniform(mdp.n_states),
                };
                let mu = match mu {
                    Some(rows) => {
                        Policy::new(rows.clone()).map_err(|e| anyhow!("inline mu invalid: {e}"))?
                    }
                    None => Policy::uniform(mdp.n_states, mdp.n_actions),
                };
                let pi = match pi {
                    Some(rows) => {
                        Policy::new(rows.clone()).map_err(|e| anyhow!("inline pi invalid: {e}"))?
                    }
                    None => Policy::uniform(mdp.n_states, mdp.n_actions),
                };
                Ok(Workbench {
                    name: "inline".into(),
                    mdp: mdp.clone(),
                    features,
                    d,
                    mu,
                    pi,
                    omega0_default: None,
                })
            }
        }
    }

    pub fn approximator(&self, spec: &ApproximatorSpec) -> Box<dyn Approximator + Send + Sync> {
        match spec {
            ApproximatorSpec::Linear => Box::new(LinearApproximator::new(self.features.clone())),
            ApproximatorSpec::Mlp { hidden_width } => Box::new(MlpApproximator::new(MlpSpec {
                n_states: self.mdp.n_states,
                n_actions: self.mdp.n_actions,
                hidden_width: *hidden_width,
            })),
        }
    }

    /// TD fixed point for the linear case, when the system is solvable.
    pub fn fixed_point(&self, spec: &ApproximatorSpec, gamma: f64) -> Option<DVector<f64>> {
        if !matches!(spec, ApproximatorSpec::Linear) {
            return None;
        }
        let gram = pfpe_core::gram_matrices(&self.mdp, &self.features, &self.d, &self.mu, &self.pi);
        td_fixed_point_linear(&gram, gamma).ok()
    }
}

/// Deterministic short label for output rows.
pub fn run_id(env: &str, k: usize, alpha: f64, seed: u64) -> String {
    format!("{env}-k{k}-a{alpha}-s{seed}")
}

/// Parse a `--seeds` comma-separated list.
pub fn parse_seed_list(text: &str) -> Result<Vec<u64>> {
    let seeds: Result<Vec<u64>, _> = text.split(',').map(|s| s.trim().parse::<u64>()).collect();
    let seeds = seeds.context("parsing --seeds list")?;
    if seeds.is_empty() {
        bail!("--seeds list is empty");
    }
    Ok(seeds)
}
