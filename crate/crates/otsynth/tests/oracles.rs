//! Cross-checks against independent oracles: a min-cost-flow solver for the
//! 1D transport distance, naive summation for every fast loss path, and
//! central finite differences for every analytic gradient.

mod common;

use common::{
    brute_energy, brute_fgw, brute_graph, brute_mmd, brute_synth, fd_check_parameters,
    fd_check_synth_point, random_affine, random_coupling, random_dataset, result_with,
    w1_min_cost_flow,
};
use otsynth::{
    energy_distance, fgw_loss, graph_loss, mmd2_gaussian, synth_loss, wasserstein_1d,
    AlignmentKernelSpec, KernelMode, LossKind, ModelKind, Role,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[test]
fn wasserstein_matches_min_cost_flow_on_all_small_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for na in 1..=6 {
        for nb in 1..=6 {
            for _ in 0..8 {
                let a: Vec<f64> = (0..na).map(|_| rng.random_range(-5.0..5.0)).collect();
                let b: Vec<f64> = (0..nb).map(|_| rng.random_range(-5.0..5.0)).collect();
                let fast = wasserstein_1d(&a, &b).unwrap();
                let exact = w1_min_cost_flow(&a, &b);
                assert!(
                    (fast - exact).abs() <= 1e-9,
                    "sizes ({na},{nb}): quantile form {fast} vs lp {exact}"
                );
            }
        }
    }
}

#[test]
fn fgw_loss_matches_quadruple_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    for trial in 0..6 {
        let n = rng.random_range(2..=5);
        let m = rng.random_range(2..=5);
        let z0 = random_dataset(&mut rng, n, 2, Role::SourceControl);
        let z0p = random_dataset(&mut rng, m, 2, Role::TargetControl);
        let coupling = random_coupling(&mut rng, n, m);
        let model = random_affine(&mut rng, 2);
        let spec = AlignmentKernelSpec {
            stable_indices: vec![0, 1],
            mode: if trial % 2 == 0 { KernelMode::Rank } else { KernelMode::Raw },
            scale: 1.0,
        };
        let alpha = rng.random_range(0.05..0.95);
        let fast = fgw_loss(&coupling, &model, &z0, &z0p, &spec, alpha).unwrap();
        let oracle = brute_fgw(&coupling, &model, &z0, &z0p, &spec, alpha);
        assert!(
            (fast - oracle).abs() <= 1e-12,
            "trial {trial}: fast {fast} vs quadruple sum {oracle}"
        );
    }
}

#[test]
fn graph_loss_matches_double_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(63);
    for trial in 0..6 {
        let n = rng.random_range(2..=5);
        let m = rng.random_range(2..=5);
        let z0 = random_dataset(&mut rng, n, 2, Role::SourceControl);
        let z0p = random_dataset(&mut rng, m, 2, Role::TargetControl);
        let coupling = random_coupling(&mut rng, n, m);
        let model = random_affine(&mut rng, 2);
        let fast = graph_loss(&coupling, &model, &z0, &z0p).unwrap();
        let oracle = brute_graph(&coupling, &model, &z0, &z0p);
        assert!(
            (fast - oracle).abs() <= 1e-12,
            "trial {trial}: fast {fast} vs double sum {oracle}"
        );
    }
}

#[test]
fn synth_loss_matches_double_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    for trial in 0..6 {
        let n = rng.random_range(2..=5);
        let m = rng.random_range(2..=5);
        let z0 = random_dataset(&mut rng, n, 2, Role::SourceControl);
        let z0p = random_dataset(&mut rng, m, 2, Role::TargetControl);
        let model = random_affine(&mut rng, 2);
        let result = result_with(model, random_coupling(&mut rng, n, m));
        let zprime: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let z1j: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lambda_s = rng.random_range(0.0..2.0);
        let fast = synth_loss(&zprime, &z1j, &result, &z0, &z0p, lambda_s).unwrap();
        let oracle = brute_synth(&zprime, &z1j, &result, &z0, &z0p, lambda_s);
        assert!(
            (fast - oracle).abs() <= 1e-12,
            "trial {trial}: fast {fast} vs double sum {oracle}"
        );
    }
}

#[test]
fn energy_distance_matches_double_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(65);
    for trial in 0..6 {
        let n = rng.random_range(1..=5);
        let m = rng.random_range(1..=5);
        let a = random_dataset(&mut rng, n, 2, Role::Synthetic);
        let b = random_dataset(&mut rng, m, 2, Role::TargetTreatmentOracle);
        let fast = energy_distance(&a, &b).unwrap();
        let oracle = brute_energy(&a, &b);
        assert!(
            (fast - oracle).abs() <= 1e-12,
            "trial {trial}: fast {fast} vs double sums {oracle}"
        );
    }
}

#[test]
fn mmd_matches_double_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    for trial in 0..6 {
        let n = rng.random_range(1..=5);
        let m = rng.random_range(1..=5);
        let a = random_dataset(&mut rng, n, 2, Role::Synthetic);
        let b = random_dataset(&mut rng, m, 2, Role::TargetTreatmentOracle);
        let fast = mmd2_gaussian(&a, &b).unwrap();
        let oracle = brute_mmd(&a, &b);
        assert!(
            (fast - oracle).abs() <= 1e-12,
            "trial {trial}: fast {fast} vs double sums {oracle}"
        );
    }
}

#[test]
fn parameter_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(67);
    for trial in 0..10 {
        for kind in [ModelKind::Affine, ModelKind::ResidualNet] {
            for loss in [LossKind::FgwPartial, LossKind::Graph, LossKind::Synth] {
                fd_check_parameters(kind, loss, &mut rng, trial);
            }
        }
    }
}

#[test]
fn synthesis_point_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(68);
    for trial in 0..10 {
        let kind = if trial % 2 == 0 { ModelKind::Affine } else { ModelKind::ResidualNet };
        fd_check_synth_point(kind, &mut rng, trial);
    }
}
