//! Two-sample evaluation: marginal summaries and 1D divergences on the
//! outcome, plus joint distances on full rows. Densities for the divergence
//! family come from Gaussian KDE with Silverman bandwidths on a fixed grid;
//! everything else is computed directly from the samples.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::data::{euclidean, Dataset};
use crate::error::{Error, Result};

/// The ten report metrics, in the order the result tables print them: the
/// main distance block first, then the projected diagnostics.
pub const METRIC_NAMES: [&str; 10] = [
    "W1-Y",
    "Hellinger-Y",
    "KL-Y",
    "Energy-Z",
    "SlicedW1-Z",
    "TV-Y",
    "ProjTV-Z",
    "ProjHellinger-Z",
    "ProjKL-Z",
    "MMD2-Z",
];

/// Five-number-style summary of a scalar sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalSummary {
    pub mean: f64,
    pub std_dev: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
}

/// Which 1D divergence to compute between kernel density estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DivergenceKind {
    Tv,
    Hellinger,
    Kl,
}

/// Quantile of a sorted sample by linear interpolation of order statistics
/// at h = (n-1)p; the convention behind every quantile this crate reports.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = (h.floor() as usize).min(n - 2);
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

/// Mean, sample standard deviation (denominator n-1), and quartiles.
pub fn marginal_summary(values: &[f64]) -> Result<MarginalSummary> {
    if values.is_empty() {
        return Err(Error::EmptySample { context: "marginal summary".into() });
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std_dev = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    Ok(MarginalSummary {
        mean,
        std_dev,
        q1: quantile_sorted(&sorted, 0.25),
        q2: quantile_sorted(&sorted, 0.5),
        q3: quantile_sorted(&sorted, 0.75),
    })
}

/// W1 between the empirical measures of two scalar samples, by integrating
/// |F_a^{-1} - F_b^{-1}| over the merged quantile grid. Segment boundaries
/// are compared in integer arithmetic, so equal sizes reduce exactly to the
/// mean absolute difference of sorted samples.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample { context: "1D Wasserstein".into() });
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_unstable_by(f64::total_cmp);
    sb.sort_unstable_by(f64::total_cmp);
    let (na, nb) = (sa.len(), sb.len());
    // Quantile segments on the common denominator na * nb.
    let scale = (na * nb) as f64;
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = 0usize;
    let mut total = 0.0;
    while i < na && j < nb {
        let ra = (i + 1) * nb;
        let rb = (j + 1) * na;
        let end = ra.min(rb);
        total += (end - prev) as f64 / scale * (sa[i] - sb[j]).abs();
        prev = end;
        if ra == end {
            i += 1;
        }
        if rb == end {
            j += 1;
        }
    }
    Ok(total)
}

/// Silverman's rule: 0.9 min(sd, IQR/1.34) n^{-1/5}, falling back to
/// whichever spread is positive, with a tiny positive floor for constant
/// samples.
fn silverman_bandwidth(values: &[f64]) -> f64 {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = match (sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr / 1.34),
        (true, false) => sd,
        (false, true) => iqr / 1.34,
        (false, false) => 1e-6 * mean.abs().max(1.0),
    };
    0.9 * spread * (n as f64).powf(-0.2)
}

/// Gaussian KDE evaluated on a grid, renormalized to unit trapezoid mass.
fn kde_on_grid(values: &[f64], bandwidth: f64, grid: &[f64]) -> Vec<f64> {
    let norm = 1.0 / (values.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let mut dens: Vec<f64> = grid
        .iter()
        .map(|&g| {
            let s: f64 = values
                .iter()
                .map(|&v| {
                    let t = (g - v) / bandwidth;
                    (-0.5 * t * t).exp()
                })
                .sum();
            norm * s
        })
        .collect();
    let mass = trapezoid(&dens, grid[1] - grid[0]);
    if mass > 0.0 {
        for d in dens.iter_mut() {
            *d /= mass;
        }
    }
    dens
}

fn trapezoid(f: &[f64], step: f64) -> f64 {
    let inner: f64 = f.iter().sum::<f64>() - 0.5 * (f[0] + f[f.len() - 1]);
    inner * step
}

const KDE_GRID_POINTS: usize = 512;
const KL_FLOOR: f64 = 1e-12;

/// Divergence between Gaussian KDEs of two scalar samples on a 512-point
/// grid spanning the pooled range padded by three bandwidths. For KL the
/// first sample is the reference, and both densities are floored at 1e-12.
pub fn kde_divergence_1d(a: &[f64], b: &[f64], kind: DivergenceKind) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample { context: "KDE divergence".into() });
    }
    for (index, &v) in a.iter().chain(b.iter()).enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { index, value: v });
        }
    }
    let ha = silverman_bandwidth(a);
    let hb = silverman_bandwidth(b);
    let pad = 3.0 * ha.max(hb);
    let lo = a.iter().chain(b.iter()).copied().fold(f64::INFINITY, f64::min) - pad;
    let hi = a.iter().chain(b.iter()).copied().fold(f64::NEG_INFINITY, f64::max) + pad;
    let step = (hi - lo) / (KDE_GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..KDE_GRID_POINTS).map(|t| lo + step * t as f64).collect();
    let p = kde_on_grid(a, ha, &grid);
    let q = kde_on_grid(b, hb, &grid);
    let value = match kind {
        DivergenceKind::Tv => {
            let diff: Vec<f64> = p.iter().zip(&q).map(|(x, y)| (x - y).abs()).collect();
            0.5 * trapezoid(&diff, step)
        }
        DivergenceKind::Hellinger => {
            let diff: Vec<f64> = p
                .iter()
                .zip(&q)
                .map(|(x, y)| {
                    let d = x.sqrt() - y.sqrt();
                    d * d
                })
                .collect();
            (0.5 * trapezoid(&diff, step)).sqrt()
        }
        DivergenceKind::Kl => {
            let integrand: Vec<f64> = p
                .iter()
                .zip(&q)
                .map(|(x, y)| {
                    let pf = x.max(KL_FLOOR);
                    let qf = y.max(KL_FLOOR);
                    pf * (pf / qf).ln()
                })
                .collect();
            trapezoid(&integrand, step)
        }
    };
    Ok(value)
}

fn check_same_dim(a: &Dataset, b: &Dataset, context: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            context: context.into(),
            expected: a.dim() + 1,
            found: b.dim() + 1,
        });
    }
    Ok(())
}

/// Energy distance between two samples as the plug-in V-statistic
/// 2 E||a - b|| - E||a - a'|| - E||b - b'||, diagonals included.
pub fn energy_distance(a: &Dataset, b: &Dataset) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample { context: "energy distance".into() });
    }
    check_same_dim(a, b, "energy distance samples")?;
    let mean_cross = {
        let mut s = 0.0;
        for u in a.rows() {
            for v in b.rows() {
                s += euclidean(u.z(), v.z());
            }
        }
        s / (a.len() * b.len()) as f64
    };
    let mean_within = |d: &Dataset| {
        let mut s = 0.0;
        for i in 0..d.len() {
            for j in (i + 1)..d.len() {
                s += euclidean(d.row(i).z(), d.row(j).z());
            }
        }
        2.0 * s / (d.len() * d.len()) as f64
    };
    Ok(2.0 * mean_cross - mean_within(a) - mean_within(b))
}

/// A fixed bundle of random projection directions in R^(d+1), i.i.d.
/// standard Gaussian and deliberately unnormalized; `normalized` rescales
/// each direction to the unit sphere for callers that want that variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionSet {
    pub directions: Vec<Vec<f64>>,
    pub seed: u64,
}

pub const DEFAULT_PROJECTIONS: usize = 128;

impl ProjectionSet {
    pub fn new(dim: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let directions = (0..k)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        Self { directions, seed }
    }

    pub fn normalized(dim: usize, k: usize, seed: u64) -> Self {
        let mut set = Self::new(dim, k, seed);
        for v in set.directions.iter_mut() {
            let nrm = v.iter().map(|t| t * t).sum::<f64>().sqrt();
            if nrm > 0.0 {
                for t in v.iter_mut() {
                    *t /= nrm;
                }
            }
        }
        set
    }
}

fn project(data: &Dataset, v: &[f64]) -> Vec<f64> {
    data.rows()
        .iter()
        .map(|o| o.z().iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn check_projections(a: &Dataset, proj: &ProjectionSet) -> Result<()> {
    if proj.directions.is_empty() {
        return Err(Error::EmptySample { context: "projection set".into() });
    }
    if proj.directions[0].len() != a.dim() + 1 {
        return Err(Error::DimensionMismatch {
            context: "projection directions vs data".into(),
            expected: a.dim() + 1,
            found: proj.directions[0].len(),
        });
    }
    Ok(())
}

/// Sliced W1: the mean over directions of the 1D Wasserstein distance
/// between projected samples. Directions evaluate in parallel and average in
/// fixed order.
pub fn sliced_w1(a: &Dataset, b: &Dataset, proj: &ProjectionSet) -> Result<f64> {
    check_same_dim(a, b, "sliced W1 samples")?;
    check_projections(a, proj)?;
    let per: Vec<f64> = proj
        .directions
        .par_iter()
        .map(|v| wasserstein_1d(&project(a, v), &project(b, v)))
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Mean over directions of a KDE divergence between projected samples.
pub fn projected_divergence(
    a: &Dataset,
    b: &Dataset,
    proj: &ProjectionSet,
    kind: DivergenceKind,
) -> Result<f64> {
    check_same_dim(a, b, "projected divergence samples")?;
    check_projections(a, proj)?;
    let per: Vec<f64> = proj
        .directions
        .par_iter()
        .map(|v| kde_divergence_1d(&project(a, v), &project(b, v), kind))
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// V-statistic MMD^2 with the Gaussian kernel exp(-||z-z'||^2 / (2 sigma^2)),
/// sigma the median pairwise distance of the pooled sample (self-pairs
/// excluded). A zero median falls back to the smallest positive distance;
/// if every pooled pair coincides the samples are identical and the value
/// is 0.
pub fn mmd2_gaussian(a: &Dataset, b: &Dataset) -> Result<f64> {
    check_same_dim(a, b, "MMD samples")?;
    let pooled: Vec<&[f64]> = a.rows().iter().chain(b.rows()).map(|o| o.z()).collect();
    if pooled.len() < 2 {
        return Err(Error::EmptySample { context: "MMD bandwidth (pooled sample of 1)".into() });
    }
    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in (i + 1)..pooled.len() {
            dists.push(euclidean(pooled[i], pooled[j]));
        }
    }
    dists.sort_unstable_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let mut sigma = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    if sigma == 0.0 {
        match dists.iter().find(|&&d| d > 0.0) {
            Some(&d) => sigma = d,
            None => return Ok(0.0),
        }
    }
    let kernel_mean = |x: &Dataset, y: &Dataset| {
        let mut s = 0.0;
        for u in x.rows() {
            for v in y.rows() {
                let d = euclidean(u.z(), v.z());
                s += (-d * d / (2.0 * sigma * sigma)).exp();
            }
        }
        s / (x.len() * y.len()) as f64
    };
    Ok(kernel_mean(a, a) + kernel_mean(b, b) - 2.0 * kernel_mean(a, b))
}

/// Everything the result tables need for one synthetic-vs-oracle comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub marginal_synthetic: MarginalSummary,
    pub marginal_oracle: MarginalSummary,
    pub distances: BTreeMap<String, f64>,
}

/// Assembles the full ten-metric report: Y-metrics on the outcome column
/// (oracle as the KL reference), Z-metrics on full rows, projections drawn
/// from the seed.
pub fn full_report(synthetic: &Dataset, oracle: &Dataset, seed: u64) -> Result<EvalReport> {
    if synthetic.is_empty() || oracle.is_empty() {
        return Err(Error::EmptySample { context: "evaluation report".into() });
    }
    check_same_dim(synthetic, oracle, "report samples")?;
    let y_synth: Vec<f64> = synthetic.rows().iter().map(|o| o.y()).collect();
    let y_oracle: Vec<f64> = oracle.rows().iter().map(|o| o.y()).collect();
    let proj = ProjectionSet::new(synthetic.dim() + 1, DEFAULT_PROJECTIONS, seed);
    let mut distances = BTreeMap::new();
    let entries = [
        ("W1-Y", wasserstein_1d(&y_oracle, &y_synth)?),
        ("TV-Y", kde_divergence_1d(&y_oracle, &y_synth, DivergenceKind::Tv)?),
        ("Hellinger-Y", kde_divergence_1d(&y_oracle, &y_synth, DivergenceKind::Hellinger)?),
        ("KL-Y", kde_divergence_1d(&y_oracle, &y_synth, DivergenceKind::Kl)?),
        ("Energy-Z", energy_distance(oracle, synthetic)?),
        ("SlicedW1-Z", sliced_w1(oracle, synthetic, &proj)?),
        ("ProjTV-Z", projected_divergence(oracle, synthetic, &proj, DivergenceKind::Tv)?),
        (
            "ProjHellinger-Z",
            projected_divergence(oracle, synthetic, &proj, DivergenceKind::Hellinger)?,
        ),
        ("ProjKL-Z", projected_divergence(oracle, synthetic, &proj, DivergenceKind::Kl)?),
        ("MMD2-Z", mmd2_gaussian(oracle, synthetic)?),
    ];
    for (name, value) in entries {
        if !value.is_finite() || value < -1e-9 {
            return Err(Error::Config(format!("metric {name} evaluated to {value}")));
        }
        distances.insert(name.to_string(), value);
    }
    Ok(EvalReport {
        marginal_synthetic: marginal_summary(&y_synth)?,
        marginal_oracle: marginal_summary(&y_oracle)?,
        distances,
    })
}
