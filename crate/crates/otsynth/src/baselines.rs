//! Reference synthesizers: a pooled two-way fixed-effects regression, nearest
//! neighbor matching with a regression adjustment, and a matched two-site
//! factor model fit by alternating least squares. All three consume the same
//! three observed arms as the transport method and emit a synthetic
//! target-treatment dataset.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{euclidean, Dataset, Observation, Role};
use crate::error::{Error, Result};

/// Factor count used when a caller does not override it.
pub const DEFAULT_FACTORS: usize = 2;
/// Alternating-least-squares sweep cap for the factor model.
pub const ALS_MAX_SWEEPS: usize = 500;
/// Relative objective change below which the factor model stops sweeping.
pub const ALS_REL_TOL: f64 = 1e-8;

const RANK_TOL: f64 = 1e-10;
const RIDGE: f64 = 1e-8;

fn check_arm(name: &str, data: &Dataset, dim: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptySample { context: name.into() });
    }
    if data.dim() != dim {
        return Err(Error::DimensionMismatch {
            context: name.into(),
            expected: dim + 1,
            found: data.dim() + 1,
        });
    }
    Ok(())
}

/// Least squares via SVD, falling back to a ridge-regularized solve when the
/// design is rank deficient. Returns the coefficients and whether the ridge
/// path was taken.
fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, bool) {
    let svd = a.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let deficient = a.nrows() < a.ncols()
        || max_sv <= 0.0
        || svd.singular_values.iter().any(|&s| s <= max_sv * RANK_TOL);
    if !deficient {
        let x = svd.solve(b, max_sv * RANK_TOL).expect("SVD solve on full-rank design");
        return (x, false);
    }
    let ata = a.transpose() * a + DMatrix::identity(a.ncols(), a.ncols()) * RIDGE;
    let atb = a.transpose() * b;
    let x = ata
        .cholesky()
        .map(|c| c.solve(&atb))
        .unwrap_or_else(|| svd.solve(b, max_sv.max(1.0) * RANK_TOL).expect("SVD fallback solve"));
    (x, true)
}

/// Index of the row whose covariates are closest to `x`, ties broken by the
/// lowest index.
fn nearest_in_x(x: &[f64], pool: &Dataset) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (i, row) in pool.rows().iter().enumerate() {
        let d = euclidean(x, row.x());
        if d < best_dist {
            best_dist = d;
            best = i;
        }
    }
    best
}

/// Coefficients of the pooled regression with a treatment dummy, a site
/// dummy, and their covariate interactions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwfeFit {
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub tau: f64,
    pub gamma: Vec<f64>,
    pub nu: f64,
    pub lambda: Vec<f64>,
    /// True when the pooled design was rank deficient and the coefficients
    /// came from the ridge-regularized solve.
    pub ridge_fallback: bool,
}

impl TwfeFit {
    /// Predicted treated outcome at target-site covariates: every block
    /// (baseline, treatment, site) switched on.
    pub fn predict_treated_target(&self, x: &[f64]) -> f64 {
        let dot = |c: &[f64]| c.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        self.alpha + dot(&self.beta) + self.tau + dot(&self.gamma) + self.nu + dot(&self.lambda)
    }
}

/// Fits the pooled regression y ~ 1 + x + D(1 + x) + T(1 + x) over the three
/// observed arms, where D marks source treatments and T marks target
/// controls.
pub fn twfe_fit(z0: &Dataset, z1: &Dataset, z0prime: &Dataset) -> Result<TwfeFit> {
    let d = z0.dim();
    check_arm("TWFE source controls", z0, d)?;
    check_arm("TWFE source treatments", z1, d)?;
    check_arm("TWFE target controls", z0prime, d)?;
    let n = z0.len() + z1.len() + z0prime.len();
    let cols = 3 * (d + 1);
    let mut design = DMatrix::zeros(n, cols);
    let mut target = DVector::zeros(n);
    let arms: [(&Dataset, f64, f64); 3] =
        [(z0, 0.0, 0.0), (z1, 1.0, 0.0), (z0prime, 0.0, 1.0)];
    let mut row = 0;
    for (data, dummy_d, dummy_t) in arms {
        for o in data.rows() {
            design[(row, 0)] = 1.0;
            design[(row, d + 1)] = dummy_d;
            design[(row, 2 * (d + 1))] = dummy_t;
            for (j, &xj) in o.x().iter().enumerate() {
                design[(row, 1 + j)] = xj;
                design[(row, d + 2 + j)] = dummy_d * xj;
                design[(row, 2 * (d + 1) + 1 + j)] = dummy_t * xj;
            }
            target[row] = o.y();
            row += 1;
        }
    }
    let (coef, ridge_fallback) = lstsq(&design, &target);
    Ok(TwfeFit {
        alpha: coef[0],
        beta: coef.as_slice()[1..=d].to_vec(),
        tau: coef[d + 1],
        gamma: coef.as_slice()[d + 2..2 * (d + 1)].to_vec(),
        nu: coef[2 * (d + 1)],
        lambda: coef.as_slice()[2 * (d + 1) + 1..].to_vec(),
        ridge_fallback,
    })
}

/// Two-way fixed-effects baseline: fits the pooled regression and predicts a
/// treated target outcome at each target-control covariate vector.
pub fn twfe_synth(z0: &Dataset, z1: &Dataset, z0prime: &Dataset) -> Result<Dataset> {
    let fit = twfe_fit(z0, z1, z0prime)?;
    let rows = z0prime
        .rows()
        .iter()
        .map(|o| Observation::from_parts(o.x(), fit.predict_treated_target(o.x())))
        .collect::<Result<_>>()?;
    Dataset::new(rows, Role::Synthetic)
}

/// Matching output plus the details tests and diagnostics need.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchSynthOutput {
    pub dataset: Dataset,
    /// For each target control, the index of its matched source treatment.
    pub matched_indices: Vec<usize>,
    /// True when the matched-covariate regression was rank deficient and the
    /// slope adjustment was skipped.
    pub adjustment_skipped: bool,
}

/// Nearest-neighbor matching with a regression adjustment, with diagnostics.
pub fn matchsynth_detailed(z1: &Dataset, z0prime: &Dataset) -> Result<MatchSynthOutput> {
    let d = z1.dim();
    check_arm("MatchSynth source treatments", z1, d)?;
    check_arm("MatchSynth target controls", z0prime, d)?;
    let matched_indices: Vec<usize> =
        z0prime.rows().iter().map(|o| nearest_in_x(o.x(), z1)).collect();
    // Regress matched outcomes on matched covariates with an intercept; a
    // rank-deficient design (constant matches, too few rows) means the slope
    // is not identified and the adjustment is skipped.
    let n = matched_indices.len();
    let mut design = DMatrix::zeros(n, d + 1);
    let mut target = DVector::zeros(n);
    for (row, &mi) in matched_indices.iter().enumerate() {
        design[(row, 0)] = 1.0;
        for (j, &xj) in z1.row(mi).x().iter().enumerate() {
            design[(row, 1 + j)] = xj;
        }
        target[row] = z1.row(mi).y();
    }
    let svd = design.clone().svd(false, false);
    let max_sv = svd.singular_values.max();
    let adjustment_skipped = n < d + 1
        || max_sv <= 0.0
        || svd.singular_values.iter().any(|&s| s <= max_sv * RANK_TOL);
    let slope: Vec<f64> = if adjustment_skipped {
        vec![0.0; d]
    } else {
        let (coef, _) = lstsq(&design, &target);
        coef.as_slice()[1..].to_vec()
    };
    let rows = z0prime
        .rows()
        .iter()
        .zip(&matched_indices)
        .map(|(o, &mi)| {
            let matched = z1.row(mi);
            let gap: f64 = slope
                .iter()
                .zip(o.x().iter().zip(matched.x()))
                .map(|(b, (xq, xm))| b * (xq - xm))
                .sum();
            Observation::from_parts(o.x(), matched.y() + gap)
        })
        .collect::<Result<_>>()?;
    Ok(MatchSynthOutput {
        dataset: Dataset::new(rows, Role::Synthetic)?,
        matched_indices,
        adjustment_skipped,
    })
}

/// Matching baseline: each target control adopts its nearest source
/// treatment's outcome, shifted along the fitted covariate slope. The first
/// argument is unused; it keeps the three-arm calling shape shared by every
/// method.
pub fn matchsynth(_z0: &Dataset, z1: &Dataset, z0prime: &Dataset) -> Result<Dataset> {
    Ok(matchsynth_detailed(z1, z0prime)?.dataset)
}

/// Fitted state of the matched two-site factor model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSynthFit {
    pub alpha: f64,
    pub beta: Vec<f64>,
    /// Per source-control loading vectors, n0 x r.
    pub lambda0: Vec<Vec<f64>>,
    /// Per source-treatment loading vectors, n1 x r.
    pub lambda1: Vec<Vec<f64>>,
    /// Source-site factor.
    pub f: Vec<f64>,
    /// Target-site factor.
    pub f_prime: Vec<f64>,
    pub tau: f64,
    /// Stage-1 objective after initialization and after each sweep.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    /// Per source-control matched target-control index.
    pub matched_control: Vec<usize>,
    /// Per source-treatment matched target-control index.
    pub matched_treatment: Vec<usize>,
}

/// Orthonormalizes the columns of the 2 x r factor matrix [f; f'] by
/// modified Gram-Schmidt and folds the triangular change of basis into the
/// loadings, so predictions are untouched while the rotation is pinned.
fn orthonormalize_factors(f: &mut [f64], fp: &mut [f64], lambda0: &mut [Vec<f64>]) {
    let r = f.len();
    let mut q: Vec<[f64; 2]> = Vec::with_capacity(r);
    let mut rmat = vec![vec![0.0; r]; r];
    for j in 0..r {
        let mut v = [f[j], fp[j]];
        for (i, qi) in q.iter().enumerate() {
            let proj = qi[0] * v[0] + qi[1] * v[1];
            rmat[i][j] = proj;
            v[0] -= proj * qi[0];
            v[1] -= proj * qi[1];
        }
        let nrm = (v[0] * v[0] + v[1] * v[1]).sqrt();
        if nrm > 1e-12 {
            rmat[j][j] = nrm;
            q.push([v[0] / nrm, v[1] / nrm]);
        } else {
            rmat[j][j] = 0.0;
            q.push([0.0, 0.0]);
        }
    }
    for j in 0..r {
        f[j] = q[j][0];
        fp[j] = q[j][1];
    }
    for lam in lambda0.iter_mut() {
        let mut out = vec![0.0; r];
        for (i, row) in rmat.iter().enumerate() {
            out[i] = row.iter().zip(lam.iter()).map(|(a, b)| a * b).sum();
        }
        *lam = out;
    }
}

/// Fits the two-equation factor model on matched source-control pairs by
/// alternating least squares, then the treated-equation loadings and effect.
pub fn gensynth_fit(
    z0: &Dataset,
    z1: &Dataset,
    z0prime: &Dataset,
    r: usize,
) -> Result<GenSynthFit> {
    let d = z0.dim();
    check_arm("GenSynth source controls", z0, d)?;
    check_arm("GenSynth source treatments", z1, d)?;
    check_arm("GenSynth target controls", z0prime, d)?;
    if r == 0 {
        return Err(Error::Config("GenSynth factor count must be at least 1".into()));
    }
    let n0 = z0.len();
    let matched_control: Vec<usize> =
        z0.rows().iter().map(|o| nearest_in_x(o.x(), z0prime)).collect();
    let matched_treatment: Vec<usize> =
        z1.rows().iter().map(|o| nearest_in_x(o.x(), z0prime)).collect();

    // Stage 1: alternate between the regression block, the loadings, and the
    // factors. The regression design never changes, so its SVD is reused.
    let mut design = DMatrix::zeros(2 * n0, d + 1);
    for (i, o) in z0.rows().iter().enumerate() {
        design[(2 * i, 0)] = 1.0;
        design[(2 * i + 1, 0)] = 1.0;
        for (j, &xj) in o.x().iter().enumerate() {
            design[(2 * i, 1 + j)] = xj;
        }
        for (j, &xj) in z0prime.row(matched_control[i]).x().iter().enumerate() {
            design[(2 * i + 1, 1 + j)] = xj;
        }
    }
    let design_svd = design.clone().svd(true, true);
    let design_max_sv = design_svd.singular_values.max();
    let design_eps = if design_max_sv > 0.0 { design_max_sv * 1e-12 } else { 1.0 };

    let y_src: Vec<f64> = z0.rows().iter().map(|o| o.y()).collect();
    let y_tgt: Vec<f64> = matched_control.iter().map(|&mi| z0prime.row(mi).y()).collect();

    // Initialize the regression block by pooled least squares with zero
    // loadings, then seed factors and loadings from the SVD of the 2 x n0
    // residual matrix. A data-driven start avoids the symmetric saddle a
    // fixed initialization sits on when the sites differ anti-symmetrically.
    let mut rhs0 = DVector::zeros(2 * n0);
    for i in 0..n0 {
        rhs0[2 * i] = y_src[i];
        rhs0[2 * i + 1] = y_tgt[i];
    }
    let coef0 = design_svd.solve(&rhs0, design_eps).expect("initial regression solve");
    let mut alpha = coef0[0];
    let mut beta: Vec<f64> = coef0.as_slice()[1..].to_vec();
    let mut f = vec![0.0; r];
    let mut fp = vec![0.0; r];
    let mut lambda0 = vec![vec![0.0; r]; n0];
    {
        let resid = DMatrix::from_fn(2, n0, |s, i| {
            let (x, y) = if s == 0 {
                (z0.row(i).x(), y_src[i])
            } else {
                (z0prime.row(matched_control[i]).x(), y_tgt[i])
            };
            y - alpha - beta.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
        });
        let rsvd = resid.svd(true, true);
        let u = rsvd.u.as_ref().expect("residual SVD basis");
        let vt = rsvd.v_t.as_ref().expect("residual SVD basis");
        let k = r.min(rsvd.singular_values.len());
        for j in 0..k {
            let scale = rsvd.singular_values[j].max(0.0).sqrt();
            f[j] = scale * u[(0, j)];
            fp[j] = scale * u[(1, j)];
            for (i, lam) in lambda0.iter_mut().enumerate() {
                lam[j] = scale * vt[(j, i)];
            }
        }
    }

    let objective = |alpha: f64, beta: &[f64], lambda0: &[Vec<f64>], f: &[f64], fp: &[f64]| {
        let mut total = 0.0;
        for i in 0..n0 {
            let base_src: f64 =
                alpha + beta.iter().zip(z0.row(i).x()).map(|(b, x)| b * x).sum::<f64>();
            let base_tgt: f64 = alpha
                + beta
                    .iter()
                    .zip(z0prime.row(matched_control[i]).x())
                    .map(|(b, x)| b * x)
                    .sum::<f64>();
            let lf: f64 = lambda0[i].iter().zip(f).map(|(l, v)| l * v).sum();
            let lfp: f64 = lambda0[i].iter().zip(fp).map(|(l, v)| l * v).sum();
            let r1 = y_src[i] - base_src - lf;
            let r2 = y_tgt[i] - base_tgt - lfp;
            total += r1 * r1 + r2 * r2;
        }
        total
    };

    let mut trace = vec![objective(alpha, &beta, &lambda0, &f, &fp)];
    let mut converged = false;
    for _ in 0..ALS_MAX_SWEEPS {
        // Regression block given loadings and factors.
        let mut rhs = DVector::zeros(2 * n0);
        for i in 0..n0 {
            let lf: f64 = lambda0[i].iter().zip(&f).map(|(l, v)| l * v).sum();
            let lfp: f64 = lambda0[i].iter().zip(&fp).map(|(l, v)| l * v).sum();
            rhs[2 * i] = y_src[i] - lf;
            rhs[2 * i + 1] = y_tgt[i] - lfp;
        }
        let coef = design_svd.solve(&rhs, design_eps).expect("factor model regression solve");
        alpha = coef[0];
        beta = coef.as_slice()[1..].to_vec();

        // Loadings given the regression block and factors: each unit solves
        // the same 2 x r system, so one pseudo-inverse serves all of them.
        let mut residual_src = vec![0.0; n0];
        let mut residual_tgt = vec![0.0; n0];
        for i in 0..n0 {
            let base_src: f64 =
                alpha + beta.iter().zip(z0.row(i).x()).map(|(b, x)| b * x).sum::<f64>();
            let base_tgt: f64 = alpha
                + beta
                    .iter()
                    .zip(z0prime.row(matched_control[i]).x())
                    .map(|(b, x)| b * x)
                    .sum::<f64>();
            residual_src[i] = y_src[i] - base_src;
            residual_tgt[i] = y_tgt[i] - base_tgt;
        }
        let mut fmat = DMatrix::zeros(2, r);
        for j in 0..r {
            fmat[(0, j)] = f[j];
            fmat[(1, j)] = fp[j];
        }
        let fsvd = fmat.svd(true, true);
        let fmax = fsvd.singular_values.max();
        for i in 0..n0 {
            if fmax > 0.0 {
                let rhs2 = DVector::from_column_slice(&[residual_src[i], residual_tgt[i]]);
                lambda0[i] = fsvd
                    .solve(&rhs2, fmax * 1e-12)
                    .expect("loading solve")
                    .as_slice()
                    .to_vec();
            } else {
                lambda0[i] = vec![0.0; r];
            }
        }

        // Factors given the loadings: two independent least-squares problems
        // sharing the loading matrix.
        let lmat = DMatrix::from_fn(n0, r, |i, j| lambda0[i][j]);
        let lsvd = lmat.clone().svd(true, true);
        let lmax = lsvd.singular_values.max();
        if lmax > 0.0 {
            let eps = lmax * 1e-12;
            f = lsvd
                .solve(&DVector::from_column_slice(&residual_src), eps)
                .expect("factor solve")
                .as_slice()
                .to_vec();
            fp = lsvd
                .solve(&DVector::from_column_slice(&residual_tgt), eps)
                .expect("factor solve")
                .as_slice()
                .to_vec();
        }
        orthonormalize_factors(&mut f, &mut fp, &mut lambda0);

        let value = objective(alpha, &beta, &lambda0, &f, &fp);
        let prev = *trace.last().expect("nonempty trace");
        trace.push(value);
        // An essentially perfect fit counts as converged: the relative
        // change is meaningless in the rounding noise around zero.
        let data_scale = y_src
            .iter()
            .chain(&y_tgt)
            .map(|y| y * y)
            .sum::<f64>()
            .max(f64::MIN_POSITIVE);
        if value <= 1e-14 * data_scale
            || (prev - value).abs() / prev.max(f64::MIN_POSITIVE) < ALS_REL_TOL
        {
            converged = true;
            break;
        }
    }

    // Stage 2: with per-unit loadings free, the treated equation only pins
    // tau up to the factor span; take the mean residual as tau and the
    // minimal-norm loading that explains the rest.
    let fnorm2: f64 = f.iter().map(|v| v * v).sum();
    let e1: Vec<f64> = z1
        .rows()
        .iter()
        .map(|o| {
            o.y() - alpha - beta.iter().zip(o.x()).map(|(b, x)| b * x).sum::<f64>()
        })
        .collect();
    let tau = e1.iter().sum::<f64>() / e1.len() as f64;
    let lambda1: Vec<Vec<f64>> = e1
        .iter()
        .map(|&e| {
            if fnorm2 > 0.0 {
                f.iter().map(|&v| (e - tau) * v / fnorm2).collect()
            } else {
                vec![0.0; r]
            }
        })
        .collect();

    Ok(GenSynthFit {
        alpha,
        beta,
        lambda0,
        lambda1,
        f,
        f_prime: fp,
        tau,
        objective_trace: trace,
        converged,
        matched_control,
        matched_treatment,
    })
}

/// Factor-model baseline: each source treatment moves to its matched
/// target-control covariates, its outcome corrected along the fitted slope
/// and the site-factor gap.
pub fn gensynth(z0: &Dataset, z1: &Dataset, z0prime: &Dataset, r: usize) -> Result<Dataset> {
    let fit = gensynth_fit(z0, z1, z0prime, r)?;
    let fgap: Vec<f64> = fit.f.iter().zip(&fit.f_prime).map(|(a, b)| a - b).collect();
    let rows = z1
        .rows()
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let mx = z0prime.row(fit.matched_treatment[i]).x();
            let shift: f64 = fit
                .beta
                .iter()
                .zip(mx.iter().zip(o.x()))
                .map(|(b, (xm, x))| b * (xm - x))
                .sum();
            let factor: f64 = fit.lambda1[i].iter().zip(&fgap).map(|(l, g)| l * g).sum();
            Observation::from_parts(mx, o.y() + shift + factor)
        })
        .collect::<Result<_>>()?;
    Dataset::new(rows, Role::Synthetic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn ds(rows: Vec<Vec<f64>>) -> Dataset {
        Dataset::new(
            rows.into_iter().map(|r| Observation::new(r).unwrap()).collect(),
            Role::SourceControl,
        )
        .unwrap()
    }

    fn grid(offset: f64) -> Vec<Vec<f64>> {
        let mut rows = Vec::new();
        for i in 0..4 {
            for j in 0..2 {
                rows.push(vec![i as f64 + offset, j as f64 - offset]);
            }
        }
        rows
    }

    fn twfe_surface(x: &[f64], d_on: bool, t_on: bool) -> f64 {
        let (alpha, beta) = (1.5, [0.8, -0.6]);
        let (tau, gamma) = (4.0, [0.5, 0.2]);
        let (nu, lambda) = (-2.0, [0.3, -0.4]);
        let dot = |c: &[f64]| c.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        let mut y = alpha + dot(&beta);
        if d_on {
            y += tau + dot(&gamma);
        }
        if t_on {
            y += nu + dot(&lambda);
        }
        y
    }

    fn with_outcomes(xs: Vec<Vec<f64>>, d_on: bool, t_on: bool) -> Dataset {
        ds(xs
            .into_iter()
            .map(|mut x| {
                let y = twfe_surface(&x, d_on, t_on);
                x.push(y);
                x
            })
            .collect())
    }

    #[test]
    fn twfe_recovers_exact_linear_model() {
        let z0 = with_outcomes(grid(0.0), false, false);
        let z1 = with_outcomes(grid(0.25), true, false);
        let z0p = with_outcomes(grid(0.5), false, true);
        let fit = twfe_fit(&z0, &z1, &z0p).unwrap();
        assert!(!fit.ridge_fallback);
        assert!((fit.alpha - 1.5).abs() < 1e-8);
        assert!((fit.tau - 4.0).abs() < 1e-8);
        assert!((fit.nu + 2.0).abs() < 1e-8);
        let synth = twfe_synth(&z0, &z1, &z0p).unwrap();
        assert_eq!(synth.len(), z0p.len());
        for (s, o) in synth.rows().iter().zip(z0p.rows()) {
            assert_eq!(s.x(), o.x());
            let want = twfe_surface(o.x(), true, true);
            assert!((s.y() - want).abs() < 1e-6, "{} vs {want}", s.y());
        }
    }

    #[test]
    fn twfe_residuals_orthogonal_to_design() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noisy = |n: usize, d_on: bool, t_on: bool, rng: &mut ChaCha8Rng| {
            ds((0..n)
                .map(|_| {
                    let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
                    let y = twfe_surface(&x, d_on, t_on) + rng.random_range(-0.5..0.5);
                    vec![x[0], x[1], y]
                })
                .collect())
        };
        let z0 = noisy(20, false, false, &mut rng);
        let z1 = noisy(15, true, false, &mut rng);
        let z0p = noisy(18, false, true, &mut rng);
        let fit = twfe_fit(&z0, &z1, &z0p).unwrap();
        // Rebuild the design and check the normal equations hold.
        let mut max_dot: f64 = 0.0;
        let mut max_scale: f64 = 1.0;
        let coef = [
            &[fit.alpha][..],
            &fit.beta,
            &[fit.tau],
            &fit.gamma,
            &[fit.nu],
            &fit.lambda,
        ]
        .concat();
        let mut cross = vec![0.0; coef.len()];
        let mut scale = vec![0.0; coef.len()];
        for (data, dd, tt) in [(&z0, 0.0, 0.0), (&z1, 1.0, 0.0), (&z0p, 0.0, 1.0)] {
            for o in data.rows() {
                let x = o.x();
                let row = [
                    &[1.0][..],
                    x,
                    &[dd],
                    &[dd * x[0], dd * x[1]],
                    &[tt],
                    &[tt * x[0], tt * x[1]],
                ]
                .concat();
                let pred: f64 = row.iter().zip(&coef).map(|(a, b)| a * b).sum();
                let resid = o.y() - pred;
                for (k, &rk) in row.iter().enumerate() {
                    cross[k] += rk * resid;
                    scale[k] += rk * o.y();
                }
            }
        }
        for k in 0..coef.len() {
            max_dot = max_dot.max(cross[k].abs());
            max_scale = max_scale.max(scale[k].abs());
        }
        assert!(max_dot <= 1e-8 * max_scale, "{max_dot} vs scale {max_scale}");
    }

    #[test]
    fn twfe_degenerate_design_takes_ridge_path() {
        // Second covariate is exactly twice the first everywhere.
        let collinear = |offsets: &[f64], d_on: bool, t_on: bool| {
            ds(offsets
                .iter()
                .map(|&v| {
                    let x = [v, 2.0 * v];
                    vec![v, 2.0 * v, twfe_surface(&x, d_on, t_on)]
                })
                .collect())
        };
        let z0 = collinear(&[0.0, 1.0, 2.0, 3.0], false, false);
        let z1 = collinear(&[0.5, 1.5, 2.5, 3.5], true, false);
        let z0p = collinear(&[0.2, 1.2, 2.2, 3.2], false, true);
        let fit = twfe_fit(&z0, &z1, &z0p).unwrap();
        assert!(fit.ridge_fallback);
        let synth = twfe_synth(&z0, &z1, &z0p).unwrap();
        assert_eq!(synth.len(), 4);
        for s in synth.rows() {
            assert!(s.y().is_finite());
        }
    }

    #[test]
    fn matchsynth_exact_features_give_zero_correction() {
        let z1 = ds(vec![
            vec![0.0, 1.0, 5.0],
            vec![1.0, 0.0, 7.0],
            vec![2.0, 2.0, 9.0],
        ]);
        // Same covariates, permuted, different outcomes.
        let z0p = ds(vec![
            vec![2.0, 2.0, -1.0],
            vec![0.0, 1.0, -2.0],
            vec![1.0, 0.0, -3.0],
        ]);
        let out = matchsynth_detailed(&z1, &z0p).unwrap();
        assert!(!out.adjustment_skipped);
        assert_eq!(out.matched_indices, vec![2, 0, 1]);
        let ys: Vec<f64> = out.dataset.rows().iter().map(|o| o.y()).collect();
        assert_eq!(ys, vec![9.0, 5.0, 7.0]);
        for (s, o) in out.dataset.rows().iter().zip(z0p.rows()) {
            assert_eq!(s.x(), o.x());
        }
    }

    #[test]
    fn matchsynth_breaks_ties_by_lowest_index() {
        // Both treatment rows sit at distance 1 from the query.
        let z1 = ds(vec![vec![1.0, 0.0, 42.0], vec![-1.0, 0.0, 17.0]]);
        let z0p = ds(vec![vec![0.0, 0.0, 0.0]]);
        let out = matchsynth_detailed(&z1, &z0p).unwrap();
        assert_eq!(out.matched_indices, vec![0]);
        // A single distinct match cannot identify a slope.
        assert!(out.adjustment_skipped);
        assert_eq!(out.dataset.row(0).y(), 42.0);
    }

    #[test]
    fn matchsynth_adjustment_is_exact_on_linear_outcomes() {
        // Treated outcomes exactly linear in x: the slope regression recovers
        // it and the adjusted outcome lands on the line at the query point.
        let line = |x: &[f64]| 3.0 + 2.0 * x[0] - 1.5 * x[1];
        let z1 = ds(vec![
            vec![0.0, 0.0, line(&[0.0, 0.0])],
            vec![1.0, 0.0, line(&[1.0, 0.0])],
            vec![0.0, 1.0, line(&[0.0, 1.0])],
            vec![2.0, 1.0, line(&[2.0, 1.0])],
        ]);
        let z0p = ds(vec![
            vec![0.3, 0.4, 0.0],
            vec![1.6, 0.2, 0.0],
            vec![0.2, 0.8, 0.0],
        ]);
        let out = matchsynth_detailed(&z1, &z0p).unwrap();
        assert!(!out.adjustment_skipped);
        assert_eq!(out.matched_indices, vec![0, 1, 2]);
        for (s, o) in out.dataset.rows().iter().zip(z0p.rows()) {
            assert!((s.y() - line(o.x())).abs() < 1e-8);
        }
    }

    fn random_arm(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> Dataset {
        ds((0..n)
            .map(|_| {
                vec![
                    rng.random_range(-2.0..2.0) + shift,
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-1.0..1.0) + 3.0 * shift,
                ]
            })
            .collect())
    }

    #[test]
    fn gensynth_objective_is_monotone_and_shapes_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let z0 = random_arm(&mut rng, 20, 0.0);
        let z1 = random_arm(&mut rng, 12, 0.5);
        let z0p = random_arm(&mut rng, 15, 0.2);
        let fit = gensynth_fit(&z0, &z1, &z0p, 2).unwrap();
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-10 * w[0].max(1.0), "{} -> {}", w[0], w[1]);
        }
        assert_eq!(fit.lambda0.len(), 20);
        assert_eq!(fit.lambda1.len(), 12);
        assert_eq!(fit.f.len(), 2);
        let synth = gensynth(&z0, &z1, &z0p, 2).unwrap();
        assert_eq!(synth.len(), z1.len());
        for (i, s) in synth.rows().iter().enumerate() {
            assert_eq!(s.x(), z0p.row(fit.matched_treatment[i]).x());
            assert!(s.y().is_finite());
        }
    }

    #[test]
    fn gensynth_identical_sites_collapse_the_factor_gap() {
        // Target controls replicate the source controls exactly, so both
        // factor equations see the same data and the site factors coincide;
        // the synthetic outcome reduces to the slope-adjusted match.
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let z0 = random_arm(&mut rng, 15, 0.0);
        let z0p = z0.with_role(Role::TargetControl);
        let z1 = random_arm(&mut rng, 8, 0.4);
        let fit = gensynth_fit(&z0, &z1, &z0p, 1).unwrap();
        let gap: f64 = fit
            .f
            .iter()
            .zip(&fit.f_prime)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(gap < 1e-9, "factor gap {gap}");
        let synth = gensynth(&z0, &z1, &z0p, 1).unwrap();
        for (i, (s, o)) in synth.rows().iter().zip(z1.rows()).enumerate() {
            let mx = z0p.row(fit.matched_treatment[i]).x();
            let shift: f64 = fit
                .beta
                .iter()
                .zip(mx.iter().zip(o.x()))
                .map(|(b, (xm, x))| b * (xm - x))
                .sum();
            assert!((s.y() - (o.y() + shift)).abs() < 1e-9);
        }
    }

    #[test]
    fn gensynth_fits_exact_factor_data() {
        // Data built from the model itself with r=1: distinct loadings, site
        // factors +1 / -1, matches identity by construction.
        let alpha = 2.0;
        let beta = [1.0, -1.0];
        let xs: Vec<[f64; 2]> = (0..10).map(|i| [i as f64 * 0.7, (i % 3) as f64]).collect();
        let lams: Vec<f64> = (0..10).map(|i| (i as f64 - 4.5) * 0.3).collect();
        let base =
            |x: &[f64]| alpha + beta.iter().zip(x).map(|(b, v)| b * v).sum::<f64>();
        let z0 = ds(xs
            .iter()
            .zip(&lams)
            .map(|(x, l)| vec![x[0], x[1], base(x) + l])
            .collect());
        let z0p = ds(xs
            .iter()
            .zip(&lams)
            .map(|(x, l)| vec![x[0], x[1], base(x) - l])
            .collect());
        let z1 = ds(vec![vec![0.5, 1.0, 30.0], vec![2.4, 0.0, 28.0]]);
        let fit = gensynth_fit(&z0, &z1, &z0p, 1).unwrap();
        let final_obj = *fit.objective_trace.last().unwrap();
        let initial = fit.objective_trace[0];
        assert!(
            final_obj <= (1e-8 * initial).max(1e-9),
            "final {final_obj} initial {initial}"
        );
        assert!(fit.converged);
    }

    #[test]
    fn gensynth_rejects_zero_factors_and_runs_with_extra_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let z0 = random_arm(&mut rng, 10, 0.0);
        let z1 = random_arm(&mut rng, 6, 0.3);
        let z0p = random_arm(&mut rng, 9, 0.1);
        assert!(gensynth_fit(&z0, &z1, &z0p, 0).is_err());
        // More factors than two sites can identify still runs; the extra
        // columns zero out in the orthonormalization.
        let synth = gensynth(&z0, &z1, &z0p, 3).unwrap();
        assert_eq!(synth.len(), 6);
    }
}
