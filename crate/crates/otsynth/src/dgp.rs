//! Simulation environments: a shared linear outcome model, a lower-triangular
//! mixing matrix, eleven scenario warps, and four-arm environment assembly
//! (source control/treatment observed, target control observed, target
//! treatment held out as the oracle).

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{save_dataset, Dataset, Observation, Role};
use crate::error::{Error, Result};

/// Scenarios that replace randomized assignment with a treated-arm covariate
/// mean shift.
const NON_RCT_SCENARIOS: [u32; 3] = [5, 9, 11];
/// Scenarios pinned to thirty covariates.
const HIGH_DIM_SCENARIOS: [u32; 3] = [6, 10, 11];

/// Full description of one simulation setting. `model_seed` fixes the
/// quantities shared across replicates (outcome coefficients and, for the
/// curvy warp, its random directions); `seed` drives the sample draws, so a
/// harness can hold the former and vary only the latter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario_id: u32,
    pub d: usize,
    pub n0: usize,
    pub n1: usize,
    pub n0prime: usize,
    pub n1prime: usize,
    /// Treated-arm covariate mean shift; applied only by the non-RCT
    /// scenarios (5, 9, 11).
    pub kappa: f64,
    /// Baseline treatment effect.
    pub tau: f64,
    pub model_seed: u64,
    pub seed: u64,
}

impl ScenarioSpec {
    /// Spec with the paper's defaults for the given scenario: d = 30 for the
    /// high-dimensional settings and 2 otherwise, kappa = 3, tau = 10.
    pub fn for_scenario(
        scenario_id: u32,
        n0: usize,
        n1: usize,
        n0prime: usize,
        n1prime: usize,
        model_seed: u64,
        seed: u64,
    ) -> Result<Self> {
        if !(1..=11).contains(&scenario_id) {
            return Err(Error::UnknownScenario(scenario_id));
        }
        let d = if HIGH_DIM_SCENARIOS.contains(&scenario_id) { 30 } else { 2 };
        Ok(Self {
            scenario_id,
            d,
            n0,
            n1,
            n0prime,
            n1prime,
            kappa: 3.0,
            tau: 10.0,
            model_seed,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=11).contains(&self.scenario_id) {
            return Err(Error::UnknownScenario(self.scenario_id));
        }
        if self.d < 1 {
            return Err(Error::Config("covariate dimension must be at least 1".into()));
        }
        for (name, n) in [
            ("n0", self.n0),
            ("n1", self.n1),
            ("n0prime", self.n0prime),
            ("n1prime", self.n1prime),
        ] {
            if n < 1 {
                return Err(Error::Config(format!("sample size {name} must be at least 1")));
            }
        }
        if HIGH_DIM_SCENARIOS.contains(&self.scenario_id) && self.d != 30 {
            return Err(Error::ScenarioDimension {
                scenario: self.scenario_id,
                required: 30,
                found: self.d,
            });
        }
        if !self.kappa.is_finite() || !self.tau.is_finite() {
            return Err(Error::Config("kappa and tau must be finite".into()));
        }
        Ok(())
    }

    /// The covariate shift actually applied to treated draws.
    pub fn effective_kappa(&self) -> f64 {
        if NON_RCT_SCENARIOS.contains(&self.scenario_id) {
            self.kappa
        } else {
            0.0
        }
    }
}

/// Linear outcome model shared by every arm:
/// y = alpha + x~' beta + D (tau + x~' gamma) + eps, with x~ = (1, x).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub alpha: f64,
    pub beta: Array1<f64>,
    pub gamma: Array1<f64>,
    pub tau: f64,
    pub sigma_eps2: f64,
    pub mu_x: f64,
    pub sigma_x2: f64,
}

/// Draws the outcome coefficients: beta and gamma i.i.d. Uniform(-1, 1) of
/// length d+1, rescaled to ||beta||^2 = 2 and ||gamma||^2 = 1.5. The
/// intercept is zero and the remaining fields take the paper's fixed values.
pub fn draw_outcome_model(d: usize, rng: &mut ChaCha8Rng) -> OutcomeModel {
    let draw_scaled = |rng: &mut ChaCha8Rng, sq_norm: f64| loop {
        let v: Vec<f64> = (0..=d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n2: f64 = v.iter().map(|t| t * t).sum();
        if n2 > 1e-24 {
            let scale = (sq_norm / n2).sqrt();
            return Array1::from_vec(v.into_iter().map(|t| t * scale).collect());
        }
    };
    let beta = draw_scaled(rng, 2.0);
    let gamma = draw_scaled(rng, 1.5);
    OutcomeModel {
        alpha: 0.0,
        beta,
        gamma,
        tau: 10.0,
        sigma_eps2: 1.5,
        mu_x: 2.5,
        sigma_x2: 1.5,
    }
}

/// Simulates one arm of n observations. Covariates are N(mu_x + kappa D,
/// sigma_x^2) per coordinate, noise is N(0, sigma_eps^2), and each row
/// consumes d+1 standard normals (covariates then noise) so the stream
/// layout does not depend on the parameters.
pub fn simulate_arm(
    model: &OutcomeModel,
    n: usize,
    treated: bool,
    kappa: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let d = model.beta.len() - 1;
    let sigma_x = model.sigma_x2.sqrt();
    let sigma_eps = model.sigma_eps2.sqrt();
    let mean_x = model.mu_x + if treated { kappa } else { 0.0 };
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let mut z = vec![0.0; d + 1];
        for coord in z.iter_mut().take(d) {
            let g: f64 = StandardNormal.sample(rng);
            *coord = mean_x + sigma_x * g;
        }
        let g: f64 = StandardNormal.sample(rng);
        let eps = sigma_eps * g;
        let mut y = model.alpha + model.beta[0];
        if treated {
            y += model.tau + model.gamma[0];
        }
        for j in 0..d {
            y += z[j] * model.beta[j + 1];
            if treated {
                y += z[j] * model.gamma[j + 1];
            }
        }
        z[d] = y + eps;
        rows.push(Observation::new(z)?);
    }
    let role = if treated { Role::SourceTreatment } else { Role::SourceControl };
    Dataset::new(rows, role)
}

/// Lower-triangular mixing applied after the scenario warp: T(z) = Omega z + b.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingMatrix {
    pub omega: Array2<f64>,
    pub offset: Array1<f64>,
}

impl MixingMatrix {
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let m = self.offset.len();
        let mut out = vec![0.0; m];
        for i in 0..m {
            let mut acc = self.offset[i];
            for (j, &zj) in z.iter().enumerate() {
                acc += self.omega[[i, j]] * zj;
            }
            out[i] = acc;
        }
        out
    }
}

/// Builds the (d+1)x(d+1) mixing matrix whose rows sum to one: row 0 is the
/// identity, row 1 is (-2/3, 5/3), and every later row i has entries
/// -0.5 * 0.6^j for j < i with the diagonal absorbing the remainder. The
/// offset is b = (3, ..., 3).
pub fn build_mixing_matrix(d: usize) -> MixingMatrix {
    let m = d + 1;
    let mut omega = Array2::zeros((m, m));
    omega[[0, 0]] = 1.0;
    if m > 1 {
        omega[[1, 0]] = -2.0 / 3.0;
        omega[[1, 1]] = 1.0 - omega[[1, 0]];
    }
    for i in 2..m {
        let mut row_sum = 0.0;
        for j in 0..i {
            let entry = -0.5 * 0.6f64.powi(j as i32);
            omega[[i, j]] = entry;
            row_sum += entry;
        }
        omega[[i, i]] = 1.0 - row_sum;
    }
    MixingMatrix {
        omega,
        offset: Array1::from_elem(m, 3.0),
    }
}

/// Statistics of the pooled pre-warp target-destined sample, plus the fixed
/// random directions the curvy warp needs. Scenario 3 requires `pooled`;
/// scenario 8 requires `curvy`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub pooled: Option<PooledMoments>,
    pub curvy: Option<CurvyDirections>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledMoments {
    pub mean_y: f64,
    pub sd_y: f64,
    pub q75_xnorm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvyDirections {
    /// Random orthogonal d x d matrix, applied to covariates row-vector
    /// style.
    pub p: Array2<f64>,
    /// Random unit vector in R^d.
    pub u: Array1<f64>,
}

/// Pooled moments of a pre-warp sample: mean and sample standard deviation
/// of y, and the 0.75 quantile of the covariate norm (linear interpolation
/// at h = (n-1)p).
fn pooled_moments(rows: &[&Observation]) -> PooledMoments {
    let n = rows.len();
    let ys: Vec<f64> = rows.iter().map(|o| o.y()).collect();
    let mean_y = ys.iter().sum::<f64>() / n as f64;
    let sd_y = if n > 1 {
        (ys.iter().map(|y| (y - mean_y) * (y - mean_y)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut norms: Vec<f64> = rows
        .iter()
        .map(|o| {
            let z = o.z();
            z[..z.len() - 1].iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .collect();
    norms.sort_unstable_by(f64::total_cmp);
    let h = (n - 1) as f64 * 0.75;
    let lo = h.floor() as usize;
    let hi = lo.min(n - 2) + if n > 1 { 1 } else { 0 };
    let q75_xnorm = if n == 1 {
        norms[0]
    } else {
        norms[lo] + (h - lo as f64) * (norms[hi] - norms[lo])
    };
    PooledMoments { mean_y, sd_y, q75_xnorm }
}

/// Random orthogonal matrix and unit vector for the curvy warp, drawn from
/// the model stream: QR of a standard Gaussian matrix and a normalized
/// Gaussian vector.
fn draw_curvy_directions(d: usize, rng: &mut ChaCha8Rng) -> CurvyDirections {
    let gauss = nalgebra::DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    let qr = gauss.qr();
    let q = qr.q();
    let p = Array2::from_shape_fn((d, d), |(i, j)| q[(i, j)]);
    let u = loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let nrm: f64 = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        if nrm > 1e-12 {
            break Array1::from_vec(v.into_iter().map(|t| t / nrm).collect());
        }
    };
    CurvyDirections { p, u }
}

fn warp_smooth(z: &[f64]) -> Vec<f64> {
    let d = z.len() - 1;
    let (x, y) = (&z[..d], z[d]);
    let mut out = vec![0.0; d + 1];
    for j in 0..d {
        out[j] = x[j] + 0.2 * x[(j + 1) % d].tanh();
    }
    let nx2: f64 = x.iter().map(|v| v * v).sum();
    out[d] = y + 0.15 * (0.3 * nx2).tanh();
    out
}

fn warp_scale_bend(z: &[f64], pooled: &PooledMoments) -> Vec<f64> {
    let d = z.len() - 1;
    let (x, y) = (&z[..d], z[d]);
    let half = (d as f64 - 1.0) / 2.0;
    let denom = half.max(1e-12);
    let mut out = vec![0.0; d + 1];
    for j in 0..d {
        let alpha_j = 0.15 * (j as f64 - half) / denom;
        out[j] = x[j] * (1.0 + alpha_j);
    }
    let theta = std::f64::consts::FRAC_PI_2
        * (1.0 + ((y - pooled.mean_y) / (pooled.sd_y + 1e-12)).tanh());
    let radius = 0.6 * pooled.q75_xnorm + 1e-12;
    out[d] = y + radius * theta.sin();
    out
}

fn warp_indicator_shift(z: &[f64]) -> Vec<f64> {
    let d = z.len() - 1;
    let mut out = z.to_vec();
    if z[0] > 2.5 {
        for coord in out.iter_mut().take(d) {
            *coord += 1.0;
        }
    }
    out
}

fn warp_radial(z: &[f64]) -> Vec<f64> {
    let d = z.len() - 1;
    let (x, y) = (&z[..d], z[d]);
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let s = 1.0 + 0.32 * (0.6 * r).tanh() + 0.05 * (0.12 * r * r).tanh();
    let mut out = vec![0.0; d + 1];
    for j in 0..d {
        out[j] = x[j] * s;
    }
    out[d] = y + 0.24 * r;
    out
}

fn warp_curvy(z: &[f64], dirs: &CurvyDirections) -> Vec<f64> {
    const A1: f64 = 0.35;
    const A2: f64 = 0.25;
    const A3: f64 = 0.20;
    const B1: f64 = 0.9;
    const B2: f64 = 1.4;
    const C: f64 = 0.6;
    const D1: f64 = 0.45;
    const D2: f64 = 0.25;
    const E: f64 = 0.15;
    const F: f64 = 1.1;
    let d = z.len() - 1;
    let (x, y) = (&z[..d], z[d]);
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    // Row-vector convention: (xP)_j = sum_i x_i P_ij.
    let mut xp = vec![0.0; d];
    for (j, v) in xp.iter_mut().enumerate() {
        *v = (0..d).map(|i| x[i] * dirs.p[[i, j]]).sum();
    }
    let radial = A3 * (C * r).tanh() / (r + 1e-8);
    let mut out = vec![0.0; d + 1];
    for j in 0..d {
        out[j] = x[j] + A1 * (B1 * x[j]).sin() + A2 * (B2 * xp[j]).sin() + radial * x[j];
    }
    let xu: f64 = (0..d).map(|i| x[i] * dirs.u[i]).sum();
    out[d] = y + D1 * (E * r * r).tanh() + D2 * (F * xu).sin();
    out
}

/// Applies the scenario's warp to one non-augmented point z = (x, y). The
/// caller composes the mixing map on top.
pub fn scenario_warp(scenario_id: u32, z: &[f64], stats: &SampleStats) -> Result<Vec<f64>> {
    match scenario_id {
        1 | 5 | 6 | 11 => Ok(z.to_vec()),
        2 | 9 | 10 => Ok(warp_smooth(z)),
        3 => {
            let pooled = stats.pooled.as_ref().ok_or_else(|| {
                Error::Config("scenario 3 needs pooled pre-warp statistics".into())
            })?;
            Ok(warp_scale_bend(z, pooled))
        }
        4 => Ok(warp_indicator_shift(z)),
        7 => Ok(warp_radial(z)),
        8 => {
            let dirs = stats.curvy.as_ref().ok_or_else(|| {
                Error::Config("scenario 8 needs its random directions".into())
            })?;
            Ok(warp_curvy(z, dirs))
        }
        other => Err(Error::UnknownScenario(other)),
    }
}

/// Everything that defines the true site map of one environment, kept only
/// for oracle-side checks and the export manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scenario_id: u32,
    pub mixing: MixingMatrix,
    pub stats: SampleStats,
    pub model: OutcomeModel,
}

impl GroundTruth {
    /// The full site map T(z) = Omega psi(z) + b.
    pub fn site_map(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.mixing.apply(&scenario_warp(self.scenario_id, z, &self.stats)?))
    }
}

/// One simulated cross-site experiment: three observed arms, the held-out
/// oracle arm, and the generating truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Environment {
    pub z0: Dataset,
    pub z1: Dataset,
    pub z0prime: Dataset,
    pub z1prime_oracle: Dataset,
    pub truth: GroundTruth,
}

/// Assembles an environment: draws the outcome model from the model seed,
/// simulates n0 + n0' control and n1 + n1' treatment rows from the sample
/// seed (control block first), keeps the leading blocks as the source arms,
/// and pushes the trailing blocks through the site map. Warp statistics come
/// from the pooled pre-warp target-destined rows.
pub fn make_environment(spec: &ScenarioSpec) -> Result<Environment> {
    spec.validate()?;
    let mut model_rng = ChaCha8Rng::seed_from_u64(spec.model_seed);
    let mut model = draw_outcome_model(spec.d, &mut model_rng);
    model.tau = spec.tau;
    let curvy = if spec.scenario_id == 8 {
        Some(draw_curvy_directions(spec.d, &mut model_rng))
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let kappa = spec.effective_kappa();
    let controls = simulate_arm(&model, spec.n0 + spec.n0prime, false, kappa, &mut rng)?;
    let treatments = simulate_arm(&model, spec.n1 + spec.n1prime, true, kappa, &mut rng)?;

    let target_ctrl: Vec<&Observation> = controls.rows()[spec.n0..].iter().collect();
    let target_trt: Vec<&Observation> = treatments.rows()[spec.n1..].iter().collect();
    let pooled: Vec<&Observation> =
        target_ctrl.iter().chain(target_trt.iter()).copied().collect();
    let stats = SampleStats {
        pooled: Some(pooled_moments(&pooled)),
        curvy,
    };
    let truth = GroundTruth {
        scenario_id: spec.scenario_id,
        mixing: build_mixing_matrix(spec.d),
        stats,
        model,
    };

    let z0 = Dataset::new(controls.rows()[..spec.n0].to_vec(), Role::SourceControl)?;
    let z1 = Dataset::new(treatments.rows()[..spec.n1].to_vec(), Role::SourceTreatment)?;
    let map_rows = |rows: &[&Observation], role: Role| -> Result<Dataset> {
        let mapped: Result<Vec<Observation>> = rows
            .iter()
            .map(|o| Observation::new(truth.site_map(o.z())?))
            .collect();
        Dataset::new(mapped?, role)
    };
    let z0prime = map_rows(&target_ctrl, Role::TargetControl)?;
    let z1prime_oracle = map_rows(&target_trt, Role::TargetTreatmentOracle)?;
    Ok(Environment { z0, z1, z0prime, z1prime_oracle, truth })
}

/// Writes the four arms as CSV files plus a JSON manifest holding the spec
/// and the generating truth.
pub fn export_environment(env: &Environment, spec: &ScenarioSpec, dir: &Path) -> Result<()> {
    let io_err = |path: &Path| {
        let path = path.display().to_string();
        move |source| Error::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, data) in [
        ("z0.csv", &env.z0),
        ("z1.csv", &env.z1),
        ("z0prime.csv", &env.z0prime),
        ("z1prime_oracle.csv", &env.z1prime_oracle),
    ] {
        save_dataset(data, &dir.join(name))?;
    }
    let manifest = serde_json::json!({
        "spec": spec,
        "truth": env.truth,
    });
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Serialization(e.to_string()))?;
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(())
}
