//! Phase-2 synthesis: given a fitted alignment, construct a target-site
//! analog for each source treatment point by minimizing the per-point
//! synthesis loss over candidate points in the target ambient space.
//!
//! The minimization runs in two stages. A discrete scan evaluates the exact
//! loss at every target control (plus a forward-image seed when the map is
//! invertible in closed form) and keeps the best few candidates; Adam descent
//! on the smoothed loss then refines each kept candidate. The returned point
//! is whichever visited candidate has the lowest exact loss, so refinement
//! can never lose to the scan.

use crate::align::{AdamState, OttmlResult};
use crate::data::{euclidean, Dataset, Observation, Role};
use crate::error::{Error, Result};
use crate::map::{affine_forward_image, smooth_abs_grad, smooth_norm, InverseMapModel};
use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Knobs for the per-point synthesis optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Weight of the anchoring penalty d_Z(psi(z'), z_1j).
    pub lambda_s: f64,
    /// Adam iterations per refinement seed; 0 disables refinement.
    pub refine_steps: usize,
    /// Adam learning rate for refinement.
    pub refine_learning_rate: f64,
    /// Number of discrete-scan seeds kept for continuous refinement.
    pub multistart: usize,
    /// Retained for interface stability; synthesis is deterministic.
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            lambda_s: 1.0,
            refine_steps: 500,
            refine_learning_rate: 1e-2,
            multistart: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_s.is_finite() && self.lambda_s > 0.0) {
            return Err(Error::Config(format!(
                "lambda_s must be a positive real, got {}",
                self.lambda_s
            )));
        }
        if !(self.refine_learning_rate.is_finite() && self.refine_learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "refine_learning_rate must be a positive real, got {}",
                self.refine_learning_rate
            )));
        }
        if self.multistart < 1 {
            return Err(Error::Config("multistart must be at least 1".into()));
        }
        Ok(())
    }
}

/// Outcome record for one synthesized point, written to the diagnostics
/// sidecar by callers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthPointDiagnostic {
    /// Row index of the treatment point within its dataset.
    pub index: usize,
    /// Best exact loss found by the discrete scan alone.
    pub discrete_loss: f64,
    /// Exact loss of the returned point.
    pub final_loss: f64,
    /// Which seed produced the returned point, e.g. "control:17" or
    /// "forward-image".
    pub seed: String,
    /// Whether the returned point came out of continuous refinement rather
    /// than straight from the scan.
    pub refined: bool,
    /// Set when an affine forward-image seed was skipped because the linear
    /// solve was numerically singular.
    pub forward_image_skipped: bool,
}

fn check_alignment(result: &OttmlResult, z0: &Dataset, z0p: &Dataset) -> Result<usize> {
    let m = result.model.ambient_dim();
    for (name, d) in [("source controls", z0.dim()), ("target controls", z0p.dim())] {
        if d + 1 != m {
            return Err(Error::DimensionMismatch {
                context: format!("{name} vs fitted map"),
                expected: m,
                found: d + 1,
            });
        }
    }
    let (rows, cols) = result.coupling.dim();
    if rows != z0.len() || cols != z0p.len() {
        return Err(Error::DimensionMismatch {
            context: "coupling shape vs control samples".into(),
            expected: z0.len(),
            found: rows,
        });
    }
    Ok(m)
}

fn check_point(name: &str, z: &[f64], m: usize) -> Result<()> {
    if z.len() != m {
        return Err(Error::DimensionMismatch {
            context: format!("{name} vs fitted map"),
            expected: m,
            found: z.len(),
        });
    }
    Ok(())
}

/// Exact per-point synthesis loss at candidate `zprime` for treatment point
/// `z1j`:
///
///   sum_{i,k} |d_Z(z_0i, z_1j) - d_Z(psi(z'_0k), psi(z'))| pi_ik
///     + lambda_s * d_Z(psi(z'), z_1j).
///
/// Both terms evaluate target-side distances through the fitted inverse map,
/// so only psi is ever applied.
pub fn synth_loss(
    zprime: &[f64],
    z1j: &[f64],
    result: &OttmlResult,
    z0: &Dataset,
    z0p: &Dataset,
    lambda_s: f64,
) -> Result<f64> {
    let m = check_alignment(result, z0, z0p)?;
    check_point("candidate point", zprime, m)?;
    check_point("treatment point", z1j, m)?;
    if !lambda_s.is_finite() {
        return Err(Error::Config(format!(
            "lambda_s must be finite, got {lambda_s}"
        )));
    }
    let images: Vec<Vec<f64>> = z0p.rows().iter().map(|o| result.model.apply(o.z())).collect();
    let a: Vec<f64> = z0.rows().iter().map(|o| euclidean(o.z(), z1j)).collect();
    Ok(dense_loss(
        result.coupling.plan(),
        &a,
        &images,
        &result.model.apply(zprime),
        z1j,
        lambda_s,
    ))
}

/// Exact loss given precomputed anchor distances `a`, control images, and the
/// candidate's image `u`.
fn dense_loss(
    pi: &Array2<f64>,
    a: &[f64],
    images: &[Vec<f64>],
    u: &[f64],
    z1j: &[f64],
    lambda_s: f64,
) -> f64 {
    let mut total = 0.0;
    for (k, uk) in images.iter().enumerate() {
        let b_k = euclidean(uk, u);
        for (i, &a_i) in a.iter().enumerate() {
            total += (a_i - b_k).abs() * pi[[i, k]];
        }
    }
    total + lambda_s * euclidean(u, z1j)
}

/// Gradient of the smoothed per-point synthesis loss with respect to the
/// candidate point, obtained by chaining the loss adjoint through the model's
/// forward pass. Matches central finite differences of the smoothed loss.
pub fn synth_point_gradient(
    zprime: &[f64],
    z1j: &[f64],
    result: &OttmlResult,
    z0: &Dataset,
    z0p: &Dataset,
    lambda_s: f64,
) -> Result<Vec<f64>> {
    let m = check_alignment(result, z0, z0p)?;
    check_point("candidate point", zprime, m)?;
    check_point("treatment point", z1j, m)?;
    let images: Vec<Vec<f64>> = z0p.rows().iter().map(|o| result.model.apply(o.z())).collect();
    let a: Vec<f64> = z0.rows().iter().map(|o| euclidean(o.z(), z1j)).collect();
    let mut acc = result.model.zero_grad();
    Ok(smoothed_point_gradient(
        &result.model,
        result.coupling.plan(),
        &a,
        &images,
        zprime,
        z1j,
        lambda_s,
        &mut acc,
    ))
}

/// Candidate-side adjoint of the smoothed loss pushed through the model: the
/// i-sum collapses to a scalar weight per target control before the vector
/// work, so the cost is O(n n' + n' m) per call.
#[allow(clippy::too_many_arguments)]
fn smoothed_point_gradient(
    model: &InverseMapModel,
    pi: &Array2<f64>,
    a: &[f64],
    images: &[Vec<f64>],
    zprime: &[f64],
    z1j: &[f64],
    lambda_s: f64,
    acc: &mut crate::map::ModelGrad,
) -> Vec<f64> {
    let m = zprime.len();
    let pass = model.forward(zprime);
    let u = &pass.out;
    let mut cand_adj = vec![0.0; m];
    let mut diff = vec![0.0; m];
    for (k, uk) in images.iter().enumerate() {
        for t in 0..m {
            diff[t] = uk[t] - u[t];
        }
        let b_k = smooth_norm(&diff);
        let mut w_k = 0.0;
        for (i, &a_i) in a.iter().enumerate() {
            let p = pi[[i, k]];
            if p != 0.0 {
                w_k += p * smooth_abs_grad(a_i - b_k);
            }
        }
        if w_k != 0.0 {
            let coef = w_k / b_k;
            for t in 0..m {
                cand_adj[t] += coef * diff[t];
            }
        }
    }
    for t in 0..m {
        diff[t] = u[t] - z1j[t];
    }
    let nrm = smooth_norm(&diff);
    for t in 0..m {
        cand_adj[t] += lambda_s * diff[t] / nrm;
    }
    model.backprop(zprime, &pass, &cand_adj, acc)
}

/// How a refinement seed was chosen.
#[derive(Debug, Clone)]
enum SeedKind {
    Control(usize),
    ForwardImage,
    AnchorControl(usize),
}

impl SeedKind {
    fn describe(&self) -> String {
        match self {
            SeedKind::Control(k) => format!("control:{k}"),
            SeedKind::ForwardImage => "forward-image".into(),
            SeedKind::AnchorControl(k) => format!("anchor-control:{k}"),
        }
    }
}

/// Inputs shared by every per-point problem of one batch: the fitted map, the
/// coupling, control images under psi, and their pairwise image distances.
struct SharedSynth<'a> {
    model: &'a InverseMapModel,
    pi: &'a Array2<f64>,
    z0: &'a Dataset,
    z0p: &'a Dataset,
    images: Vec<Vec<f64>>,
    dprime: Array2<f64>,
    config: &'a SynthConfig,
}

impl<'a> SharedSynth<'a> {
    fn new(
        result: &'a OttmlResult,
        z0: &'a Dataset,
        z0p: &'a Dataset,
        config: &'a SynthConfig,
    ) -> Self {
        let images: Vec<Vec<f64>> =
            z0p.rows().iter().map(|o| result.model.apply(o.z())).collect();
        let np = images.len();
        let mut dprime = Array2::zeros((np, np));
        for k in 0..np {
            for l in (k + 1)..np {
                let d = euclidean(&images[k], &images[l]);
                dprime[[k, l]] = d;
                dprime[[l, k]] = d;
            }
        }
        Self {
            model: &result.model,
            pi: result.coupling.plan(),
            z0,
            z0p,
            images,
            dprime,
            config,
        }
    }
}

/// Solves one per-point problem. The discrete scan over target controls uses
/// prefix sums of the coupling over anchor-distance order, so each control's
/// loss is assembled from binary searches instead of the full double sum.
fn solve_point(
    shared: &SharedSynth,
    z1j: &[f64],
    index: usize,
) -> Result<(Vec<f64>, SynthPointDiagnostic)> {
    let pi = shared.pi;
    let (n, np) = (pi.nrows(), pi.ncols());
    let m = z1j.len();
    let lambda_s = shared.config.lambda_s;

    let a: Vec<f64> = shared.z0.rows().iter().map(|o| euclidean(o.z(), z1j)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&i, &j| a[i].total_cmp(&a[j]).then(i.cmp(&j)));
    let a_sorted: Vec<f64> = order.iter().map(|&i| a[i]).collect();

    // pref_w[t*np + k] = sum of pi_ik over the t nearest-anchor sources;
    // pref_aw carries the same sums weighted by a_i.
    let mut pref_w = vec![0.0; (n + 1) * np];
    let mut pref_aw = vec![0.0; (n + 1) * np];
    for (t, &i) in order.iter().enumerate() {
        let (prev, cur) = (t * np, (t + 1) * np);
        for k in 0..np {
            let p = pi[[i, k]];
            pref_w[cur + k] = pref_w[prev + k] + p;
            pref_aw[cur + k] = pref_aw[prev + k] + a[i] * p;
        }
    }
    let tot = n * np;

    // Discrete scan over all target controls.
    let mut scan_losses = Vec::with_capacity(np);
    for cand in 0..np {
        let mut first_term = 0.0;
        for k in 0..np {
            let r = shared.dprime[[k, cand]];
            let pos = a_sorted.partition_point(|&v| v <= r);
            let (w_lo, aw_lo) = (pref_w[pos * np + k], pref_aw[pos * np + k]);
            let (w_tot, aw_tot) = (pref_w[tot + k], pref_aw[tot + k]);
            first_term += r * w_lo - aw_lo + (aw_tot - aw_lo) - r * (w_tot - w_lo);
        }
        scan_losses.push(first_term + lambda_s * euclidean(&shared.images[cand], z1j));
    }

    // Anchor seed: the closed-form forward image for affine maps, or the
    // control whose image lands nearest the anchor otherwise.
    let mut forward_image_skipped = false;
    let anchor_seed: Option<(Vec<f64>, SeedKind, f64)> = match shared.model {
        InverseMapModel::Affine { a: mat, b } => match affine_forward_image(mat, b, z1j) {
            Some(p) => {
                let u = shared.model.apply(&p);
                let loss = dense_loss(pi, &a, &shared.images, &u, z1j, lambda_s);
                Some((p, SeedKind::ForwardImage, loss))
            }
            None => {
                forward_image_skipped = true;
                None
            }
        },
        InverseMapModel::ResidualNet { .. } => {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, uk) in shared.images.iter().enumerate() {
                let d = euclidean(uk, z1j);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            Some((
                shared.z0p.row(best).z().to_vec(),
                SeedKind::AnchorControl(best),
                scan_losses[best],
            ))
        }
    };

    // Best purely discrete candidate, over every control and the anchor seed.
    let mut best_k = 0;
    for k in 1..np {
        if scan_losses[k] < scan_losses[best_k] {
            best_k = k;
        }
    }
    let mut best_loss = scan_losses[best_k];
    let mut best_point = shared.z0p.row(best_k).z().to_vec();
    let mut best_seed = SeedKind::Control(best_k);
    if let Some((p, kind, loss)) = &anchor_seed {
        if *loss < best_loss {
            best_loss = *loss;
            best_point = p.clone();
            best_seed = kind.clone();
        }
    }
    let discrete_loss = best_loss;
    let mut refined = false;

    // Refinement seeds: the anchor seed always gets a slot; the rest go to
    // the lowest-loss controls.
    let mut seeds: Vec<(Vec<f64>, SeedKind)> = Vec::new();
    let skip_control = match &anchor_seed {
        Some((p, kind, _)) => {
            seeds.push((p.clone(), kind.clone()));
            match kind {
                SeedKind::AnchorControl(k) => Some(*k),
                _ => None,
            }
        }
        None => None,
    };
    let mut by_loss: Vec<usize> = (0..np).collect();
    by_loss.sort_unstable_by(|&x, &y| scan_losses[x].total_cmp(&scan_losses[y]).then(x.cmp(&y)));
    for &k in &by_loss {
        if seeds.len() >= shared.config.multistart {
            break;
        }
        if Some(k) == skip_control {
            continue;
        }
        seeds.push((shared.z0p.row(k).z().to_vec(), SeedKind::Control(k)));
    }

    if shared.config.refine_steps > 0 {
        let mut acc = shared.model.zero_grad();
        for (start, kind) in seeds {
            let mut z = start;
            let mut adam = AdamState::new(m);
            let mut ok = true;
            for _ in 0..shared.config.refine_steps {
                let g = smoothed_point_gradient(
                    shared.model,
                    pi,
                    &a,
                    &shared.images,
                    &z,
                    z1j,
                    lambda_s,
                    &mut acc,
                );
                let update = adam.step(&Array1::from_vec(g), shared.config.refine_learning_rate);
                for t in 0..m {
                    z[t] -= update[t];
                }
                if z.iter().any(|v| !v.is_finite()) {
                    ok = false;
                    break;
                }
            }
            if !ok {
                continue;
            }
            let u = shared.model.apply(&z);
            let loss = dense_loss(pi, &a, &shared.images, &u, z1j, lambda_s);
            if loss < best_loss {
                best_loss = loss;
                best_point = z;
                best_seed = kind;
                refined = true;
            }
        }
    }

    if !best_loss.is_finite() {
        return Err(Error::SynthesisFailure {
            index,
            reason: format!("non-finite loss {best_loss}"),
        });
    }
    let diag = SynthPointDiagnostic {
        index,
        discrete_loss,
        final_loss: best_loss,
        seed: best_seed.describe(),
        refined,
        forward_image_skipped,
    };
    Ok((best_point, diag))
}

/// Synthesizes the target-site analog of a single treatment point.
pub fn generate_point(
    z1j: &[f64],
    result: &OttmlResult,
    z0: &Dataset,
    z0p: &Dataset,
    config: &SynthConfig,
) -> Result<Vec<f64>> {
    let m = check_alignment(result, z0, z0p)?;
    check_point("treatment point", z1j, m)?;
    config.validate()?;
    let shared = SharedSynth::new(result, z0, z0p, config);
    solve_point(&shared, z1j, 0).map(|(p, _)| p)
}

/// Synthesizes analogs for every row of `z1`, preserving row order, and
/// returns the per-point diagnostics alongside the dataset. Points are
/// independent, so the batch fans out across the rayon pool.
pub fn generate_dataset_with_diagnostics(
    z1: &Dataset,
    result: &OttmlResult,
    z0: &Dataset,
    z0p: &Dataset,
    config: &SynthConfig,
) -> Result<(Dataset, Vec<SynthPointDiagnostic>)> {
    let m = check_alignment(result, z0, z0p)?;
    if z1.dim() + 1 != m {
        return Err(Error::DimensionMismatch {
            context: "treatment sample vs fitted map".into(),
            expected: m,
            found: z1.dim() + 1,
        });
    }
    config.validate()?;
    let shared = SharedSynth::new(result, z0, z0p, config);
    let solved: Vec<(Vec<f64>, SynthPointDiagnostic)> = z1
        .rows()
        .par_iter()
        .enumerate()
        .map(|(j, obs)| solve_point(&shared, obs.z(), j))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(solved.len());
    let mut diags = Vec::with_capacity(solved.len());
    for (j, (point, diag)) in solved.into_iter().enumerate() {
        let obs = Observation::new(point).map_err(|e| Error::SynthesisFailure {
            index: j,
            reason: e.to_string(),
        })?;
        rows.push(obs);
        diags.push(diag);
    }
    let data = Dataset::new(rows, Role::Synthetic)?;
    Ok((data, diags))
}

/// Synthesizes analogs for every row of `z1`; see
/// [`generate_dataset_with_diagnostics`] for the variant that also reports
/// per-point diagnostics.
pub fn generate_dataset(
    z1: &Dataset,
    result: &OttmlResult,
    z0: &Dataset,
    z0p: &Dataset,
    config: &SynthConfig,
) -> Result<Dataset> {
    generate_dataset_with_diagnostics(z1, result, z0, z0p, config).map(|(d, _)| d)
}
