//! Hot paths of the simulation pipeline: single scheme steps at two problem
//! sizes, noise lattice construction, a full trajectory, and one
//! error-process reduction. Inputs are prebuilt so each measurement covers
//! only the operation named.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use eki_core::{
    error_process, extend_tikhonov, simulate, step_em, step_tamed, step_teki, Ensemble,
    ForwardModel, InverseProblem, NoiseLattice, SchemeConfig, SchemeVariant,
};

fn linear_problem(p: usize, k: usize, rng: &mut ChaCha8Rng) -> InverseProblem {
    let a = DMatrix::from_fn(k, p, |_, _| rng.gen_range(-1.0..1.0));
    let r = DMatrix::from_fn(k, k, |_, _| rng.gen_range(-0.5..0.5));
    let gamma = &r * r.transpose() + DMatrix::identity(k, k) * 0.5;
    let y = DVector::from_fn(k, |_, _| rng.gen_range(-1.0..1.0));
    InverseProblem::new(ForwardModel::linear(a).unwrap(), gamma, y).unwrap()
}

fn unit_ensemble(p: usize, j: usize, rng: &mut ChaCha8Rng) -> Ensemble {
    Ensemble::gaussian(&DVector::zeros(p), &DMatrix::identity(p, p), j, rng).unwrap()
}

fn increments(k: usize, j: usize, h: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(k, j, |_, _| rng.gen_range(-1.0..1.0) * h.sqrt())
}

fn bench_steps(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1.0 / 256.0;
    let mut group = c.benchmark_group("step");
    for (p, k, j) in [(3usize, 2usize, 5usize), (16, 8, 32)] {
        let prob = linear_problem(p, k, &mut rng);
        let ens = unit_ensemble(p, j, &mut rng);
        let dw = increments(k, j, h, &mut rng);
        group.bench_function(format!("tamed_p{p}_k{k}_j{j}"), |b| {
            b.iter(|| step_tamed(black_box(&ens), &prob, h, &dw).unwrap())
        });
        group.bench_function(format!("euler_maruyama_p{p}_k{k}_j{j}"), |b| {
            b.iter(|| step_em(black_box(&ens), &prob, h, &dw).unwrap())
        });
        let extended = extend_tikhonov(&prob, 1.0, &DMatrix::identity(p, p)).unwrap();
        let dw_ext = increments(k + p, j, h, &mut rng);
        group.bench_function(format!("tikhonov_p{p}_k{k}_j{j}"), |b| {
            b.iter(|| step_teki(black_box(&ens), &extended, h, &dw_ext).unwrap())
        });
    }
    group.finish();
}

fn bench_lattice(c: &mut Criterion) {
    let mut group = c.benchmark_group("noise_lattice");
    for level in [8u32, 12] {
        group.bench_function(format!("build_level_{level}"), |b| {
            b.iter(|| NoiseLattice::build(black_box(9), 1.0, level, 5, 2).unwrap())
        });
    }
    group.finish();
}

fn bench_pipeline(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let prob = linear_problem(3, 2, &mut rng);
    let initial = unit_ensemble(3, 5, &mut rng);
    let lattice = NoiseLattice::build(17, 1.0, 10, 5, 2).unwrap();

    let cfg = SchemeConfig::new(SchemeVariant::Tamed, 8, 1.0);
    c.bench_function("simulate_tamed_level_8", |b| {
        b.iter(|| simulate(black_box(&cfg), &prob, &initial, &lattice).unwrap())
    });

    let ref_cfg = SchemeConfig::new(SchemeVariant::Tamed, 10, 1.0);
    let reference = simulate(&ref_cfg, &prob, &initial, &lattice).unwrap();
    let coarse_cfg = SchemeConfig::new(SchemeVariant::Tamed, 4, 1.0);
    let coarse = simulate(&coarse_cfg, &prob, &initial, &lattice).unwrap();
    c.bench_function("error_process_level_4_vs_10", |b| {
        b.iter(|| error_process(black_box(&reference), &coarse, &prob, &lattice).unwrap())
    });
}

criterion_group!(benches, bench_steps, bench_lattice, bench_pipeline);
criterion_main!(benches);
