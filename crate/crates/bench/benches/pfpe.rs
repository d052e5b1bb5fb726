use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pfpe_core::spectral::{AnalysisOptions, RegionSpec};
use pfpe_core::*;

fn bench_run_pfpe(c: &mut Criterion) {
    let b = build_baird();
    let approx = LinearApproximator::new(b.features.clone());
    let config = RunConfig {
        schedule: StepSizeSchedule::Constant { alpha: 0.01 },
        k: 500,
        n_target_updates: 10,
        target_rule: TargetUpdateRule::PeriodicCopy,
        regularisation: Regularisation::default(),
        mode: RunMode::Sampled { seed: 0 },
        clip: None,
        gamma_override: Some(0.99),
        omega0: Some(b.omega0.clone()),
        blow_up_threshold: 1e8,
    };
    c.bench_function("run_pfpe_baird_k500_5000_steps", |bench| {
        bench.iter(|| {
            run_pfpe(
                &b.mdp,
                &approx,
                &b.d,
                &b.mu,
                &b.pi,
                black_box(&config),
                None,
            )
            .unwrap()
        });
    });
}

fn bench_analyze(c: &mut Criterion) {
    let b = build_baird();
    let approx = LinearApproximator::new(b.features.clone());
    let opts = AnalysisOptions {
        alpha: 0.01,
        k: 500,
        region: RegionSpec {
            center: b.omega0.clone(),
            radius: 1.0,
            samples: 8,
        },
        sigma_delta: Some(1.0),
        seed: 0,
        n_quad: 8,
    };
    c.bench_function("analyze_baird_linear", |bench| {
        bench.iter(|| analyze(&b.mdp, &approx, &b.d, &b.mu, &b.pi, black_box(&opts)));
    });
}

fn bench_eigenvalues(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = DMatrix::from_fn(64, 64, |_, _| rng.random_range(-1.0..1.0));
    c.bench_function("eigenvalues_dense_64x64", |bench| {
        bench.iter(|| linalg::eigenvalues(black_box(&m)).unwrap());
    });
}

fn bench_gram_matrices(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mdp = random_ergodic_mdp(&mut rng, 10, 3, 1.0);
    let pi = random_policy(&mut rng, 10, 3);
    let d = stationary_distribution(&mdp, &pi).unwrap();
    let features = FeatureMap::one_hot(10, 3);
    c.bench_function("gram_matrices_10x3_one_hot", |bench| {
        bench.iter(|| gram_matrices(&mdp, black_box(&features), &d, &pi, &pi));
    });
}

criterion_group!(
    benches,
    bench_run_pfpe,
    bench_analyze,
    bench_eigenvalues,
    bench_gram_matrices
);
criterion_main!(benches);
