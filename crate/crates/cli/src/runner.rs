//! Command execution: single runs, sweeps and analysis reports, with
//! atomic output writing (temp file + rename) and deterministic formatting.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use log::{debug, info};
use rayon::prelude::*;

use pfpe_core::spectral::{self, AnalysisOptions, RegionSpec};
use pfpe_core::{
    condition_function, gram_matrices, lambda_h_star, min_k_for_contraction,
    outer_map_spectral_radius, run_pfpe, td_jacobian_linear, Approximator, EngineError, RunConfig,
    RunTrace, StepSizeSchedule,
};

use crate::config::{
    run_id, ApproximatorSpec, ExperimentConfig, ModeKind, SyntheticAnalysis, Workbench,
};

pub const RUN_CSV_HEADER: &str =
    "run_id,seed,l,step,k,alpha,td_error_norm,dist_to_fixed_point,param_norm,diverged";
pub const SWEEP_CSV_HEADER: &str = "k,alpha,seed,final_td_error_norm,final_dist_to_fixed_point,\
                                    diverged,steps,condition_value,outer_map_spectral_radius,\
                                    predicted_stable";

/// Writes `content` to `path` atomically: temp file in the same directory,
/// then rename. Partial files never appear under the final name.
pub fn write_atomic(path: &Path, content: &str) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    let tmp: PathBuf = {
        let mut name = path
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_default();
        name.push(".tmp");
        dir.join(name)
    };
    fs::write(&tmp, content).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming {} into place", path.display()))?;
    Ok(())
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".meta.json");
    out.with_file_name(name)
}

fn format_opt(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v}"),
        None => String::new(),
    }
}

struct CompletedRun {
    seed: u64,
    trace: RunTrace,
    diverged: bool,
}

fn execute_single(
    bench: &Workbench,
    approx: &(dyn Approximator + Send + Sync),
    config: &RunConfig,
    seed: u64,
    fixed_point: Option<&nalgebra::DVector<f64>>,
) -> Result<CompletedRun> {
    match run_pfpe(
        &bench.mdp,
        approx,
        &bench.d,
        &bench.mu,
        &bench.pi,
        config,
        fixed_point,
    ) {
        Ok(trace) => Ok(CompletedRun {
            seed,
            trace,
            diverged: false,
        }),
        Err(EngineError::Diverged { step, partial }) => {
            debug!("seed {seed} diverged at inner step {step}");
            Ok(CompletedRun {
                seed,
                trace: partial,
                diverged: true,
            })
        }
        Err(other) => Err(anyhow!("engine error on seed {seed}: {other}")),
    }
}

fn trace_rows(
    out: &mut String,
    bench_name: &str,
    k: usize,
    schedule: &StepSizeSchedule,
    run: &CompletedRun,
) {
    for entry in &run.trace.entries {
        let alpha = schedule.alpha(entry.l);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            run_id(bench_name, k, schedule.alpha(0), run.seed),
            run.seed,
            entry.l,
            entry.step,
            k,
            alpha,
            entry.td_error_norm,
            format_opt(entry.dist_to_fixed_point),
            entry.param_norm,
            run.diverged
        );
    }
}

/// `run`: one run per seed, full traces to CSV plus a JSON sidecar echoing
/// the configuration. Returns the process exit code (2 when every seed
/// diverged).
pub fn cli_run(config: &ExperimentConfig, out: &Path) -> Result<i32> {
    let bench = Workbench::build(&config.environment)?;
    let approx = bench.approximator(&config.approximator);
    let mut run_section = config.run.clone();
    if run_section.omega0.is_none() && matches!(config.approximator, ApproximatorSpec::Linear) {
        run_section.omega0 = bench.omega0_default.clone();
    }
    let gamma = run_section.gamma_override.unwrap_or(bench.mdp.gamma);
    let fixed_point = bench.fixed_point(&config.approximator, gamma);

    let mut runs = Vec::new();
    for &seed in &config.seeds {
        let engine_config = run_section.to_engine_for(seed, &config.approximator);
        runs.push(execute_single(
            &bench,
            approx.as_ref(),
            &engine_config,
            seed,
            fixed_point.as_ref(),
        )?);
    }

    let mut csv = String::from(RUN_CSV_HEADER);
    csv.push('\n');
    for run in &runs {
        trace_rows(
            &mut csv,
            &bench.name,
            run_section.k,
            &run_section.schedule,
            run,
        );
    }
    write_atomic(out, &csv)?;

    let sidecar = serde_json::json!({
        "artifact_version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "environment": bench.name,
        "conventions": {
            "fitted_error": "td_error_norm is the exact expected TD-error norm at the target parameters",
            "alpha_column": "step size of the block starting at this target update",
            "dist_to_fixed_point": "minimum-norm TD fixed point for linear features; empty when unavailable",
            "diverged_column": "true on every row of a run that crossed the blow-up threshold",
        },
    });
    write_atomic(&sidecar_path(out), &serde_json::to_string_pretty(&sidecar)?)?;

    let all_diverged = runs.iter().all(|r| r.diverged);
    info!(
        "run: {} seeds, {} diverged, wrote {}",
        runs.len(),
        runs.iter().filter(|r| r.diverged).count(),
        out.display()
    );
    Ok(if all_diverged { 2 } else { 0 })
}

struct SweepCell {
    k: usize,
    alpha: f64,
    seed: u64,
    final_td_error_norm: f64,
    final_dist: Option<f64>,
    diverged: bool,
    steps: usize,
    condition_value: Option<f64>,
    outer_radius: Option<f64>,
    predicted_stable: Option<bool>,
}

/// Stability prediction for one (k, α) cell of a linear sweep.
struct CellPrediction {
    condition_value: Option<f64>,
    outer_radius: Option<f64>,
    predicted_stable: Option<bool>,
}

fn predict_cell(
    bench: &Workbench,
    spec: &ApproximatorSpec,
    gamma: f64,
    k: usize,
    alpha: f64,
) -> CellPrediction {
    if !matches!(spec, ApproximatorSpec::Linear) {
        return CellPrediction {
            condition_value: None,
            outer_radius: None,
            predicted_stable: None,
        };
    }
    let gram = gram_matrices(&bench.mdp, &bench.features, &bench.d, &bench.mu, &bench.pi);
    let (basis, lams) = pfpe_core::linalg::range_basis(&gram.phi, spectral::RANGE_CUTOFF);
    let rank = lams.len();
    let mut condition_value = None;
    if rank > 0 {
        let j_td = td_jacobian_linear(&gram, gamma);
        let lam_star = lambda_h_star(&lams, alpha);
        let j_td_r = basis.transpose() * &j_td * &basis;
        let j_td_norm = pfpe_core::linalg::spectral_norm(
            &(nalgebra::DMatrix::identity(rank, rank) + &j_td_r * alpha),
        );
        let h_r = basis.transpose() * &gram.phi * &basis;
        let j_delta_r = basis.transpose() * (&gram.phi_prime * gamma) * &basis;
        if let Ok(fpe_norm) = pfpe_core::fpe_stability_norm(&h_r, &j_delta_r, None) {
            condition_value = Some(condition_function(
                alpha, k as u64, lam_star, j_td_norm, fpe_norm,
            ));
            // The minimal certified k is cheap to log alongside.
            let lam_min = lams.iter().copied().fold(f64::INFINITY, f64::min);
            if let Some(k_min) = min_k_for_contraction(alpha, lam_min, j_td_norm, fpe_norm) {
                debug!("cell (k={k}, alpha={alpha}): certified contraction from k >= {k_min}");
            }
        }
    }
    let outer_radius = outer_map_spectral_radius(&gram, gamma, alpha, k as u64).ok();
    let predicted_stable = match (condition_value, outer_radius) {
        (Some(c), Some(r)) => Some(c < 1.0 || r < 1.0),
        (Some(c), None) => Some(c < 1.0),
        (None, Some(r)) => Some(r < 1.0),
        (None, None) => None,
    };
    CellPrediction {
        condition_value,
        outer_radius,
        predicted_stable,
    }
}

/// `sweep`: cartesian product over (k, α, seed), cells run in parallel,
/// each annotated with the spectral prediction for its (k, α).
pub fn cli_sweep(config: &ExperimentConfig, out: &Path, jobs: Option<usize>) -> Result<i32> {
    let sweep = config
        .sweep
        .as_ref()
        .ok_or_else(|| anyhow!("sweep section missing from config"))?;
    let bench = Workbench::build(&config.environment)?;
    let approx = bench.approximator(&config.approximator);
    let mut run_section = config.run.clone();
    if run_section.omega0.is_none() && matches!(config.approximator, ApproximatorSpec::Linear) {
        run_section.omega0 = bench.omega0_default.clone();
    }
    let gamma = run_section.gamma_override.unwrap_or(bench.mdp.gamma);
    let fixed_point = bench.fixed_point(&config.approximator, gamma);

    let predictions: Vec<CellPrediction> = sweep
        .k
        .iter()
        .flat_map(|&k| sweep.alpha.iter().map(move |&a| (k, a)))
        .map(|(k, alpha)| predict_cell(&bench, &config.approximator, gamma, k, alpha))
        .collect();

    let mut tasks = Vec::new();
    for (ki, &k) in sweep.k.iter().enumerate() {
        for (ai, &alpha) in sweep.alpha.iter().enumerate() {
            for &seed in &config.seeds {
                tasks.push((ki, ai, k, alpha, seed));
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .context("building sweep thread pool")?;
    let cells: Result<Vec<SweepCell>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(ki, ai, k, alpha, seed)| {
                let mut section = run_section.clone();
                section.k = k;
                section.schedule = StepSizeSchedule::Constant { alpha };
                section.n_target_updates =
                    (run_section.n_target_updates * run_section.k / k).max(1);
                let engine_config = section.to_engine_for(seed, &config.approximator);
                let run = execute_single(
                    &bench,
                    approx.as_ref(),
                    &engine_config,
                    seed,
                    fixed_point.as_ref(),
                )?;
                let last = run.trace.final_entry();
                let prediction = &predictions[ki * sweep.alpha.len() + ai];
                Ok(SweepCell {
                    k,
                    alpha,
                    seed,
                    final_td_error_norm: last.td_error_norm,
                    final_dist: last.dist_to_fixed_point,
                    diverged: run.diverged,
                    steps: last.step,
                    condition_value: prediction.condition_value,
                    outer_radius: prediction.outer_radius,
                    predicted_stable: prediction.predicted_stable,
                })
            })
            .collect()
    });
    let mut cells = cells?;
    cells.sort_by(|a, b| {
        a.k.cmp(&b.k)
            .then(a.alpha.total_cmp(&b.alpha))
            .then(a.seed.cmp(&b.seed))
    });

    let mut csv = String::from(SWEEP_CSV_HEADER);
    csv.push('\n');
    let mut agree = 0usize;
    let mut predicted = 0usize;
    for cell in &cells {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            cell.k,
            cell.alpha,
            cell.seed,
            cell.final_td_error_norm,
            format_opt(cell.final_dist),
            cell.diverged,
            cell.steps,
            format_opt(cell.condition_value),
            format_opt(cell.outer_radius),
            cell.predicted_stable
                .map(|b| b.to_string())
                .unwrap_or_default(),
        );
        if let Some(stable) = cell.predicted_stable {
            predicted += 1;
            if stable == !cell.diverged {
                agree += 1;
            }
        }
    }
    if predicted > 0 {
        let _ = writeln!(
            csv,
            "# prediction_agreement,{agree}/{predicted},{}",
            agree as f64 / predicted as f64
        );
    }
    write_atomic(out, &csv)?;

    let sidecar = serde_json::json!({
        "artifact_version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "environment": bench.name,
        "conventions": {
            "schedule": "sweep cells replace the schedule with the constant alpha of the cell",
            "n_target_updates": "scaled per cell to keep total inner steps comparable",
            "prediction": "stable when the condition value or the exact linear outer-map radius is below one",
            "footer": "# prediction_agreement,<matches>/<predicted>,<rate>",
        },
    });
    write_atomic(&sidecar_path(out), &serde_json::to_string_pretty(&sidecar)?)?;

    let all_diverged = cells.iter().all(|c| c.diverged);
    info!("sweep: {} cells, wrote {}", cells.len(), out.display());
    Ok(if all_diverged { 2 } else { 0 })
}

/// `analyze`: spectral report JSON plus a `k, condition_value` curve CSV.
pub fn cli_analyze(config: &ExperimentConfig, out: &Path) -> Result<i32> {
    let analysis = config
        .analysis
        .as_ref()
        .ok_or_else(|| anyhow!("analysis section missing from config"))?;
    let alpha = analysis
        .alpha
        .unwrap_or_else(|| config.run.schedule.alpha(0));
    let k = analysis.k.unwrap_or(config.run.k as u64);

    let curve_path = {
        let mut name = out
            .file_stem()
            .map(|n| n.to_os_string())
            .unwrap_or_default();
        name.push(".curve.csv");
        out.with_file_name(name)
    };

    if let Some(synth) = &analysis.synthetic {
        let report = synthetic_report(synth, alpha, k);
        write_atomic(out, &report.to_json())?;
        let csv = condition_curve_csv(
            alpha,
            analysis.curve_k_max,
            synth.lambda_h_star,
            synth.j_td_norm,
            synth.j_fpe_norm,
        );
        write_atomic(&curve_path, &csv)?;
        info!(
            "analyze (synthetic): wrote {} and {}",
            out.display(),
            curve_path.display()
        );
        return Ok(0);
    }

    let bench = Workbench::build(&config.environment)?;
    let approx = bench.approximator(&config.approximator);
    // Explicit centers must match; implicit fallbacks are filtered by
    // dimension (the environment default is sized for linear features).
    let center = match analysis.region.center.clone() {
        Some(center) => {
            if center.len() != approx.param_dim() {
                return Err(anyhow!(
                    "analysis region center has dimension {}, approximator has {}",
                    center.len(),
                    approx.param_dim()
                ));
            }
            center
        }
        None => [config.run.omega0.clone(), bench.omega0_default.clone()]
            .into_iter()
            .flatten()
            .find(|c| c.len() == approx.param_dim())
            .unwrap_or_else(|| vec![0.0; approx.param_dim()]),
    };
    let opts = AnalysisOptions {
        alpha,
        k,
        region: RegionSpec {
            center,
            radius: analysis.region.radius,
            samples: analysis.region.samples,
        },
        sigma_delta: analysis.sigma_delta,
        seed: config.seeds[0],
        n_quad: analysis.n_quad.unwrap_or(32),
    };
    let report = spectral::analyze(
        &bench.mdp,
        approx.as_ref(),
        &bench.d,
        &bench.mu,
        &bench.pi,
        &opts,
    );
    write_atomic(out, &report.to_json())?;

    let csv = match (
        report.lambda_h_star,
        report.j_td_norm_star,
        report.j_fpe_norm_star,
    ) {
        (Some(lam), Some(jtd), Some(jfpe)) => {
            condition_curve_csv(alpha, analysis.curve_k_max, lam, jtd, jfpe)
        }
        _ => String::from("k,condition_value\n"),
    };
    write_atomic(&curve_path, &csv)?;
    info!(
        "analyze: wrote {} and {}",
        out.display(),
        curve_path.display()
    );
    Ok(0)
}

fn condition_curve_csv(alpha: f64, k_max: u64, lam: f64, jtd: f64, jfpe: f64) -> String {
    let mut csv = String::from("k,condition_value\n");
    for k in 1..=k_max.max(1) {
        let _ = writeln!(csv, "{k},{}", condition_function(alpha, k, lam, jtd, jfpe));
    }
    csv
}

fn synthetic_report(synth: &SyntheticAnalysis, alpha: f64, k: u64) -> spectral::SpectralReport {
    let mut report = spectral::SpectralReport::default();
    let c = condition_function(
        alpha,
        k,
        synth.lambda_h_star,
        synth.j_td_norm,
        synth.j_fpe_norm,
    );
    report.lambda_h_star = Some(synth.lambda_h_star);
    report.j_td_norm_star = Some(synth.j_td_norm);
    report.j_fpe_norm_star = Some(synth.j_fpe_norm);
    report.condition_value = Some(c);
    report.contraction_constant = Some(c);
    report.k_min =
        min_k_for_contraction(alpha, synth.lambda_min, synth.j_td_norm, synth.j_fpe_norm);
    report.verdicts.assumption5 = Some(synth.j_fpe_norm < 1.0);
    report.verdicts.assumption6 = Some(c < 1.0);
    report.verdicts.predicted_stable = Some(c < 1.0);
    report
        .conventions
        .insert("mode".into(), "synthetic: norms supplied directly".into());
    report
}

/// Preset expanding to the counterexample environment; flags override the
/// run hyperparameters.
pub fn baird_preset(
    k: usize,
    alpha: f64,
    gamma: f64,
    steps: usize,
    seeds: Vec<u64>,
) -> ExperimentConfig {
    ExperimentConfig {
        environment: crate::config::EnvironmentSpec::Builtin {
            name: "baird".into(),
        },
        approximator: ApproximatorSpec::Linear,
        run: crate::config::RunSection {
            schedule: StepSizeSchedule::Constant { alpha },
            k,
            n_target_updates: (steps / k).max(1),
            target_rule: pfpe_core::TargetUpdateRule::PeriodicCopy,
            regularisation: pfpe_core::Regularisation::default(),
            mode: ModeKind::Sampled,
            clip: None,
            gamma_override: Some(gamma),
            omega0: None,
            blow_up_threshold: 1e8,
        },
        sweep: None,
        seeds,
        analysis: None,
    }
}
