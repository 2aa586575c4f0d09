//! Core data types shared by every pipeline stage: observations, role-tagged
//! datasets, empirical measures, couplings, distance matrices, and the CSV
//! interchange format.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which arm of which site a dataset came from. The oracle arm exists only
/// for evaluation; fitting code must never see it, and the harness enforces
/// that through these tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    SourceControl,
    SourceTreatment,
    TargetControl,
    TargetTreatmentOracle,
    Synthetic,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::SourceControl => "source-control",
            Role::SourceTreatment => "source-treatment",
            Role::TargetControl => "target-control",
            Role::TargetTreatmentOracle => "target-treatment-oracle",
            Role::Synthetic => "synthetic",
        };
        f.write_str(s)
    }
}

/// One unit: covariates x in R^d and outcome y, stored and compared as the
/// concatenated vector z = (x, y) in R^{d+1}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    z: Vec<f64>,
}

impl Observation {
    /// Builds an observation from the concatenated vector z = (x, y).
    /// Rejects NaN and infinite coordinates.
    pub fn new(z: Vec<f64>) -> Result<Self> {
        for (i, &v) in z.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { index: i, value: v });
            }
        }
        if z.is_empty() {
            return Err(Error::EmptySample {
                context: "observation with zero coordinates".into(),
            });
        }
        Ok(Self { z })
    }

    pub fn from_parts(x: &[f64], y: f64) -> Result<Self> {
        let mut z = x.to_vec();
        z.push(y);
        Self::new(z)
    }

    /// The full vector z = (x, y).
    pub fn z(&self) -> &[f64] {
        &self.z
    }

    /// Covariate block x (all but the last coordinate).
    pub fn x(&self) -> &[f64] {
        &self.z[..self.z.len() - 1]
    }

    /// Outcome y (last coordinate).
    pub fn y(&self) -> f64 {
        self.z[self.z.len() - 1]
    }

    pub fn dim(&self) -> usize {
        self.z.len() - 1
    }
}

/// A role-tagged sample. Row order is meaningful: synthetic outputs preserve
/// the order of the inputs that produced them, and reruns under a fixed seed
/// reproduce it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    obs: Vec<Observation>,
    role: Role,
}

impl Dataset {
    /// Builds a dataset, checking that every row has the same dimension.
    pub fn new(obs: Vec<Observation>, role: Role) -> Result<Self> {
        if let Some(first) = obs.first() {
            let d = first.dim();
            for (i, o) in obs.iter().enumerate() {
                if o.dim() != d {
                    return Err(Error::DimensionMismatch {
                        context: format!("dataset row {i}"),
                        expected: d + 1,
                        found: o.dim() + 1,
                    });
                }
            }
        }
        Ok(Self { obs, role })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    /// Returns a copy of the dataset re-tagged with a different role.
    pub fn with_role(&self, role: Role) -> Self {
        Self {
            obs: self.obs.clone(),
            role,
        }
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    /// Covariate dimension d. Zero for an empty dataset.
    pub fn dim(&self) -> usize {
        self.obs.first().map_or(0, Observation::dim)
    }

    pub fn rows(&self) -> &[Observation] {
        &self.obs
    }

    pub fn row(&self, i: usize) -> &Observation {
        &self.obs[i]
    }

    /// Dense n x (d+1) matrix view of the sample, rows in dataset order.
    pub fn to_matrix(&self) -> Array2<f64> {
        let n = self.len();
        let m = self.dim() + 1;
        let mut out = Array2::zeros((n, m));
        for (i, o) in self.obs.iter().enumerate() {
            for (j, &v) in o.z().iter().enumerate() {
                out[[i, j]] = v;
            }
        }
        out
    }

    /// Outcome column as a vector.
    pub fn outcomes(&self) -> Vec<f64> {
        self.obs.iter().map(Observation::y).collect()
    }
}

/// Weights on the rows of a dataset, normalized to sum to one.
///
/// Construction normalizes silently, so downstream code may rely on
/// `sum(p) == 1` up to 1e-12 without re-checking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    weights: Array1<f64>,
}

impl EmpiricalMeasure {
    /// Uniform weights 1/n.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptySample {
                context: "empirical measure on zero atoms".into(),
            });
        }
        Ok(Self {
            weights: Array1::from_elem(n, 1.0 / n as f64),
        })
    }

    /// Builds a measure from raw weights, validating and normalizing them.
    pub fn from_weights(weights: Array1<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::EmptySample {
                context: "empirical measure on zero atoms".into(),
            });
        }
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() {
                return Err(Error::NonFinite { index: i, value: w });
            }
            if w < 0.0 {
                return Err(Error::NegativeWeight { index: i, value: w });
            }
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::ZeroMass);
        }
        Ok(Self {
            weights: weights / total,
        })
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Pairs a dataset with (normalized) atom weights.
///
/// Errors: weight vector length must match the dataset, weights must be
/// nonnegative (the offending index is reported), and total mass must be
/// positive. Weights are rescaled to sum to exactly one.
pub fn empirical_measure(data: &Dataset, weights: &[f64]) -> Result<EmpiricalMeasure> {
    if weights.len() != data.len() {
        return Err(Error::DimensionMismatch {
            context: "weight vector vs dataset".into(),
            expected: data.len(),
            found: weights.len(),
        });
    }
    if weights.is_empty() {
        return Err(Error::EmptySample {
            context: "empirical measure on zero atoms".into(),
        });
    }
    for (i, &w) in weights.iter().enumerate() {
        if !w.is_finite() {
            return Err(Error::NonFinite { index: i, value: w });
        }
        if w < 0.0 {
            return Err(Error::NegativeWeight { index: i, value: w });
        }
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroMass);
    }
    let weights = Array1::from_iter(weights.iter().map(|w| w / total));
    Ok(EmpiricalMeasure { weights })
}

/// Tolerance on coupling marginals as produced by the solver.
pub const MARGINAL_TOL_SOLVER: f64 = 1e-6;
/// Tolerance on coupling marginals after the final rescaling.
pub const MARGINAL_TOL_FINAL: f64 = 1e-12;

/// A transport plan between two weighted samples: a nonnegative n x n'
/// matrix whose row sums equal the source weights p and whose column sums
/// equal the target weights p'.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    plan: Array2<f64>,
    p: Array1<f64>,
    q: Array1<f64>,
}

impl Coupling {
    /// Validates nonnegativity and marginals against `tol` (max-norm
    /// residual).
    pub fn new(plan: Array2<f64>, p: Array1<f64>, q: Array1<f64>, tol: f64) -> Result<Self> {
        let (n, m) = plan.dim();
        if p.len() != n {
            return Err(Error::DimensionMismatch {
                context: "coupling row marginal".into(),
                expected: n,
                found: p.len(),
            });
        }
        if q.len() != m {
            return Err(Error::DimensionMismatch {
                context: "coupling column marginal".into(),
                expected: m,
                found: q.len(),
            });
        }
        for ((i, j), &v) in plan.indexed_iter() {
            if v < 0.0 {
                return Err(Error::NegativeCouplingEntry {
                    row: i,
                    col: j,
                    value: v,
                });
            }
        }
        let mut residual = 0.0_f64;
        for i in 0..n {
            let r: f64 = plan.row(i).sum();
            residual = residual.max((r - p[i]).abs());
        }
        for j in 0..m {
            let c: f64 = plan.column(j).sum();
            residual = residual.max((c - q[j]).abs());
        }
        if residual > tol {
            return Err(Error::MarginalViolation {
                residual,
                tolerance: tol,
            });
        }
        Ok(Self { plan, p, q })
    }

    /// The product coupling p (x) q, the maximum-entropy feasible plan.
    pub fn product(p: &EmpiricalMeasure, q: &EmpiricalMeasure) -> Self {
        let n = p.len();
        let m = q.len();
        let mut plan = Array2::zeros((n, m));
        for i in 0..n {
            for j in 0..m {
                plan[[i, j]] = p.weights()[i] * q.weights()[j];
            }
        }
        Self {
            plan,
            p: p.weights().clone(),
            q: q.weights().clone(),
        }
    }

    pub fn plan(&self) -> &Array2<f64> {
        &self.plan
    }

    pub fn row_marginal(&self) -> &Array1<f64> {
        &self.p
    }

    pub fn col_marginal(&self) -> &Array1<f64> {
        &self.q
    }

    pub fn dim(&self) -> (usize, usize) {
        self.plan.dim()
    }

    /// Max-norm marginal residual of the stored plan.
    pub fn marginal_residual(&self) -> f64 {
        let (n, m) = self.plan.dim();
        let mut residual = 0.0_f64;
        for i in 0..n {
            residual = residual.max((self.plan.row(i).sum() - self.p[i]).abs());
        }
        for j in 0..m {
            residual = residual.max((self.plan.column(j).sum() - self.q[j]).abs());
        }
        residual
    }

    /// Total mass on the diagonal; only meaningful for square plans built
    /// over paired samples.
    pub fn diagonal_mass(&self) -> f64 {
        let (n, m) = self.plan.dim();
        (0..n.min(m)).map(|i| self.plan[[i, i]]).sum()
    }
}

/// Symmetric nonnegative distances with a zero diagonal.
///
/// Construction validates symmetry and the diagonal exactly, and spot-checks
/// the triangle inequality on a deterministic subsample of triples (a full
/// check is cubic and the matrices here come from genuine metrics).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    m: Array2<f64>,
}

impl DistanceMatrix {
    pub fn new(m: Array2<f64>) -> Result<Self> {
        let (n, k) = m.dim();
        if n != k {
            return Err(Error::DimensionMismatch {
                context: "distance matrix must be square".into(),
                expected: n,
                found: k,
            });
        }
        for i in 0..n {
            if m[[i, i]] != 0.0 {
                return Err(Error::NonzeroDiagonal {
                    index: i,
                    value: m[[i, i]],
                });
            }
            for j in (i + 1)..n {
                let a = m[[i, j]];
                let b = m[[j, i]];
                if a != b {
                    return Err(Error::AsymmetricDistance { row: i, col: j, a, b });
                }
                if !a.is_finite() || a < 0.0 {
                    return Err(Error::NonFinite {
                        index: i * n + j,
                        value: a,
                    });
                }
            }
        }
        // Triangle inequality on a fixed stride of triples, with a small
        // floating-point allowance.
        if n >= 3 {
            let stride = (n * n * n / 512).max(1);
            let mut t = 0usize;
            while t < n * n * n {
                let i = t / (n * n);
                let j = (t / n) % n;
                let k = t % n;
                let lhs = m[[i, k]];
                let rhs = m[[i, j]] + m[[j, k]];
                if lhs > rhs + 1e-9 * (1.0 + rhs) {
                    return Err(Error::AsymmetricDistance {
                        row: i,
                        col: k,
                        a: lhs,
                        b: rhs,
                    });
                }
                t += stride;
            }
        }
        Ok(Self { m })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.m
    }

    pub fn len(&self) -> usize {
        self.m.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.m.nrows() == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[[i, j]]
    }

    /// Mean of the off-diagonal entries (0 for n < 2); the scale used by
    /// recovery diagnostics.
    pub fn mean_off_diagonal(&self) -> f64 {
        let n = self.len();
        if n < 2 {
            return 0.0;
        }
        let total: f64 = self.m.iter().sum();
        total / (n * n - n) as f64
    }
}

/// Euclidean distance between two points of equal dimension.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// All pairwise distances within a dataset under d_Z(z, z') = ||z - z'||_2,
/// or its bounded variant tanh(||z - z'||_2) when `bounded` is set. The
/// bounded map is concave and subadditive on [0, inf), so it preserves
/// metric axioms.
pub fn pairwise_distances(data: &Dataset, bounded: bool) -> Result<DistanceMatrix> {
    let n = data.len();
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let mut d = euclidean(data.row(i).z(), data.row(j).z());
            if bounded {
                d = d.tanh();
            }
            m[[i, j]] = d;
            m[[j, i]] = d;
        }
    }
    DistanceMatrix::new(m)
}

/// Cross-sample distance matrix (n x m), optionally bounded; used for graph
/// costs and matching.
pub fn cross_distances(a: &Dataset, b: &Dataset, bounded: bool) -> Result<Array2<f64>> {
    if !a.is_empty() && !b.is_empty() && a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            context: "cross distances between datasets".into(),
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let mut m = Array2::zeros((a.len(), b.len()));
    for i in 0..a.len() {
        for j in 0..b.len() {
            let mut d = euclidean(a.row(i).z(), b.row(j).z());
            if bounded {
                d = d.tanh();
            }
            m[[i, j]] = d;
        }
    }
    Ok(m)
}

fn format_float(v: f64) -> String {
    // 17 significant digits round-trips every f64.
    format!("{:.16e}", v)
}

/// Writes `x1,...,xd,y` rows in dataset order at full precision, so that
/// `load_dataset` reproduces the values bit-exactly.
pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    let d = data.dim();
    let mut header = String::new();
    for j in 0..d {
        header.push_str(&format!("x{},", j + 1));
    }
    header.push('y');
    writeln!(f, "{header}").map_err(io_err)?;
    for o in data.rows() {
        let line = o
            .z()
            .iter()
            .map(|&v| format_float(v))
            .collect::<Vec<_>>()
            .join(",");
        writeln!(f, "{line}").map_err(io_err)?;
    }
    f.flush().map_err(io_err)?;
    Ok(())
}

/// Reads a `x1,...,xd,y` CSV written by [`save_dataset`] (or by hand),
/// tagging the rows with `role`. Errors carry 1-based file line numbers and
/// 1-based row/column positions within the data block.
pub fn load_dataset(path: &Path, role: Role) -> Result<Dataset> {
    let path_str = path.display().to_string();
    let io_err = |source| Error::Io {
        path: path_str.clone(),
        source,
    };
    let f = std::fs::File::open(path).map_err(io_err)?;
    let reader = BufReader::new(f);
    let mut lines = reader.lines();
    let header = match lines.next() {
        None => {
            return Err(Error::MissingHeader {
                path: path_str.clone(),
            })
        }
        Some(h) => h.map_err(io_err)?,
    };
    let cols: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    let ncol = cols.len();
    let ok_header = ncol >= 2
        && cols[ncol - 1].trim() == "y"
        && cols[..ncol - 1]
            .iter()
            .enumerate()
            .all(|(i, c)| c.trim() == format!("x{}", i + 1));
    if !ok_header {
        return Err(Error::MalformedHeader {
            path: path_str.clone(),
            found: header,
        });
    }
    let mut obs = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line.map_err(io_err)?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != ncol {
            return Err(Error::RaggedRow {
                path: path_str.clone(),
                line: idx + 2,
                expected: ncol,
                found: fields.len(),
            });
        }
        let mut z = Vec::with_capacity(ncol);
        for (col, field) in fields.iter().enumerate() {
            match field.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => z.push(v),
                _ => {
                    return Err(Error::NonNumeric {
                        path: path_str.clone(),
                        row: idx + 1,
                        col: col + 1,
                        value: field.to_string(),
                    })
                }
            }
        }
        obs.push(Observation::new(z)?);
    }
    if obs.is_empty() {
        return Err(Error::EmptyFile {
            path: path_str.clone(),
        });
    }
    Dataset::new(obs, role)
}
