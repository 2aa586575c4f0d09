//! Learnable inverse site maps and the geometry built on them.
//!
//! The alignment problem learns a map between sites by parameterizing the
//! *inverse* map psi (target space -> source space). Distances on the target
//! site are then pull-backs: d'(z1', z2') = d_Z(psi(z1'), psi(z2')). The
//! forward map is materialized only where a synthesis seed needs it, and only
//! for the affine family where it is a linear solve.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{euclidean, Coupling, Dataset, DistanceMatrix};
use crate::error::{Error, Result};

/// Width of the two hidden layers in the residual-net family.
pub const HIDDEN_WIDTH: usize = 64;

/// Smoothing constant: |t| is replaced by sqrt(t^2 + SMOOTH_EPS2) inside
/// every gradient computation (reported objective values stay exact).
pub const SMOOTH_EPS2: f64 = 1e-12;

/// sqrt(t^2 + eps^2), the smooth surrogate for |t|.
#[inline]
pub fn smooth_abs(t: f64) -> f64 {
    (t * t + SMOOTH_EPS2).sqrt()
}

/// d/dt sqrt(t^2 + eps^2) = t / sqrt(t^2 + eps^2); equals sign(t) away from
/// the kink and 0 at t = 0.
#[inline]
pub fn smooth_abs_grad(t: f64) -> f64 {
    t / smooth_abs(t)
}

/// Smooth Euclidean norm sqrt(||v||^2 + eps^2).
#[inline]
pub fn smooth_norm(v: &[f64]) -> f64 {
    let s: f64 = v.iter().map(|x| x * x).sum();
    (s + SMOOTH_EPS2).sqrt()
}

/// Which map family a fit should use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Affine,
    ResidualNet,
}

/// The inverse site map psi, either affine or a fixed-architecture residual
/// network psi(z') = z' + W3 tanh(W2 tanh(W1 z' + b1) + b2) + b3.
///
/// Serialization (serde) records the variant tag, shapes, and row-major
/// parameter arrays at full precision; a reloaded model reproduces
/// evaluations bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InverseMapModel {
    Affine {
        a: Array2<f64>,
        b: Array1<f64>,
    },
    ResidualNet {
        w1: Array2<f64>,
        b1: Array1<f64>,
        w2: Array2<f64>,
        b2: Array1<f64>,
        w3: Array2<f64>,
        b3: Array1<f64>,
    },
}

impl InverseMapModel {
    /// The identity map of the requested family on R^{d+1}.
    ///
    /// Affine: A = I, b = 0. Residual net: hidden layers drawn from a seeded
    /// uniform Xavier range (they must be nonzero or every parameter gradient
    /// upstream of the final layer vanishes identically), final layer zero so
    /// the overall map starts at the identity.
    pub fn identity(kind: ModelKind, d: usize, seed: u64) -> Self {
        let m = d + 1;
        match kind {
            ModelKind::Affine => InverseMapModel::Affine {
                a: Array2::eye(m),
                b: Array1::zeros(m),
            },
            ModelKind::ResidualNet => {
                let h = HIDDEN_WIDTH;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut xavier = |rows: usize, cols: usize| -> Array2<f64> {
                    let bound = (6.0 / (rows + cols) as f64).sqrt();
                    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
                };
                InverseMapModel::ResidualNet {
                    w1: xavier(h, m),
                    b1: Array1::zeros(h),
                    w2: xavier(h, h),
                    b2: Array1::zeros(h),
                    w3: Array2::zeros((m, h)),
                    b3: Array1::zeros(m),
                }
            }
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            InverseMapModel::Affine { .. } => ModelKind::Affine,
            InverseMapModel::ResidualNet { .. } => ModelKind::ResidualNet,
        }
    }

    /// Ambient dimension d+1 the map acts on.
    pub fn ambient_dim(&self) -> usize {
        match self {
            InverseMapModel::Affine { b, .. } => b.len(),
            InverseMapModel::ResidualNet { b3, .. } => b3.len(),
        }
    }

    /// Number of scalar parameters.
    pub fn param_len(&self) -> usize {
        match self {
            InverseMapModel::Affine { a, b } => a.len() + b.len(),
            InverseMapModel::ResidualNet {
                w1,
                b1,
                w2,
                b2,
                w3,
                b3,
            } => w1.len() + b1.len() + w2.len() + b2.len() + w3.len() + b3.len(),
        }
    }

    /// Flattens all parameters (row-major matrices, then bias, in layer
    /// order) into one vector; inverse of [`InverseMapModel::set_params`].
    pub fn params(&self) -> Array1<f64> {
        let mut v = Vec::with_capacity(self.param_len());
        match self {
            InverseMapModel::Affine { a, b } => {
                v.extend(a.iter());
                v.extend(b.iter());
            }
            InverseMapModel::ResidualNet {
                w1,
                b1,
                w2,
                b2,
                w3,
                b3,
            } => {
                v.extend(w1.iter());
                v.extend(b1.iter());
                v.extend(w2.iter());
                v.extend(b2.iter());
                v.extend(w3.iter());
                v.extend(b3.iter());
            }
        }
        Array1::from_vec(v)
    }

    /// Overwrites all parameters from a flat vector in [`InverseMapModel::params`] order.
    pub fn set_params(&mut self, theta: &Array1<f64>) -> Result<()> {
        if theta.len() != self.param_len() {
            return Err(Error::DimensionMismatch {
                context: "model parameter vector".into(),
                expected: self.param_len(),
                found: theta.len(),
            });
        }
        let mut it = theta.iter().copied();
        let fill2 = |m: &mut Array2<f64>, it: &mut dyn Iterator<Item = f64>| {
            for v in m.iter_mut() {
                *v = it.next().unwrap();
            }
        };
        match self {
            InverseMapModel::Affine { a, b } => {
                fill2(a, &mut it);
                for v in b.iter_mut() {
                    *v = it.next().unwrap();
                }
            }
            InverseMapModel::ResidualNet {
                w1,
                b1,
                w2,
                b2,
                w3,
                b3,
            } => {
                fill2(w1, &mut it);
                for v in b1.iter_mut() {
                    *v = it.next().unwrap();
                }
                fill2(w2, &mut it);
                for v in b2.iter_mut() {
                    *v = it.next().unwrap();
                }
                fill2(w3, &mut it);
                for v in b3.iter_mut() {
                    *v = it.next().unwrap();
                }
            }
        }
        Ok(())
    }

    /// Applies psi to one point.
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        self.forward(z).out
    }

    /// Forward pass retaining hidden activations for backprop.
    pub fn forward(&self, z: &[f64]) -> ForwardPass {
        match self {
            InverseMapModel::Affine { a, b } => {
                let m = b.len();
                let mut out = b.to_vec();
                for i in 0..m {
                    let row = a.row(i);
                    let mut acc = 0.0;
                    for j in 0..m {
                        acc += row[j] * z[j];
                    }
                    out[i] += acc;
                }
                ForwardPass {
                    out,
                    h1: Vec::new(),
                    h2: Vec::new(),
                }
            }
            InverseMapModel::ResidualNet {
                w1,
                b1,
                w2,
                b2,
                w3,
                b3,
            } => {
                let h = b1.len();
                let m = b3.len();
                let mut h1 = vec![0.0; h];
                for i in 0..h {
                    let mut acc = b1[i];
                    let row = w1.row(i);
                    for j in 0..m {
                        acc += row[j] * z[j];
                    }
                    h1[i] = acc.tanh();
                }
                let mut h2 = vec![0.0; h];
                for i in 0..h {
                    let mut acc = b2[i];
                    let row = w2.row(i);
                    for j in 0..h {
                        acc += row[j] * h1[j];
                    }
                    h2[i] = acc.tanh();
                }
                let mut out = vec![0.0; m];
                for i in 0..m {
                    let mut acc = b3[i] + z[i];
                    let row = w3.row(i);
                    for j in 0..h {
                        acc += row[j] * h2[j];
                    }
                    out[i] = acc;
                }
                ForwardPass { out, h1, h2 }
            }
        }
    }

    /// Accumulates d(loss)/d(theta) += J_psi(z)^T gbar contributions into
    /// `acc`, given the forward pass at z and the adjoint gbar = d(loss)/d(psi(z)).
    /// Returns d(loss)/dz (the input adjoint), which synthesis uses as the
    /// candidate-point gradient.
    pub fn backprop(&self, z: &[f64], pass: &ForwardPass, gbar: &[f64], acc: &mut ModelGrad) -> Vec<f64> {
        match (self, acc) {
            (InverseMapModel::Affine { a, .. }, ModelGrad::Affine { a: ga, b: gb }) => {
                let m = gbar.len();
                for i in 0..m {
                    let g = gbar[i];
                    gb[i] += g;
                    for j in 0..m {
                        ga[[i, j]] += g * z[j];
                    }
                }
                // dL/dz = A^T gbar
                let mut dz = vec![0.0; m];
                for j in 0..m {
                    let mut acc = 0.0;
                    for i in 0..m {
                        acc += a[[i, j]] * gbar[i];
                    }
                    dz[j] = acc;
                }
                dz
            }
            (
                InverseMapModel::ResidualNet { w1, w2, w3, .. },
                ModelGrad::ResidualNet {
                    w1: gw1,
                    b1: gb1,
                    w2: gw2,
                    b2: gb2,
                    w3: gw3,
                    b3: gb3,
                },
            ) => {
                let h = pass.h1.len();
                let m = gbar.len();
                // Output layer: out_i = z_i + b3_i + sum_j w3_ij h2_j.
                for i in 0..m {
                    let g = gbar[i];
                    gb3[i] += g;
                    for j in 0..h {
                        gw3[[i, j]] += g * pass.h2[j];
                    }
                }
                // delta2_j = (1 - h2_j^2) * sum_i w3_ij gbar_i
                let mut delta2 = vec![0.0; h];
                for j in 0..h {
                    let mut acc = 0.0;
                    for i in 0..m {
                        acc += w3[[i, j]] * gbar[i];
                    }
                    delta2[j] = acc * (1.0 - pass.h2[j] * pass.h2[j]);
                }
                for i in 0..h {
                    let g = delta2[i];
                    gb2[i] += g;
                    for j in 0..h {
                        gw2[[i, j]] += g * pass.h1[j];
                    }
                }
                let mut delta1 = vec![0.0; h];
                for j in 0..h {
                    let mut acc = 0.0;
                    for i in 0..h {
                        acc += w2[[i, j]] * delta2[i];
                    }
                    delta1[j] = acc * (1.0 - pass.h1[j] * pass.h1[j]);
                }
                for i in 0..h {
                    let g = delta1[i];
                    gb1[i] += g;
                    for j in 0..m {
                        gw1[[i, j]] += g * z[j];
                    }
                }
                // dL/dz = gbar (residual path) + W1^T delta1.
                let mut dz = gbar.to_vec();
                for j in 0..m {
                    let mut acc = 0.0;
                    for i in 0..h {
                        acc += w1[[i, j]] * delta1[i];
                    }
                    dz[j] += acc;
                }
                dz
            }
            _ => unreachable!("gradient accumulator built for a different model family"),
        }
    }

    /// Fresh zero gradient accumulator matching this model's shapes.
    pub fn zero_grad(&self) -> ModelGrad {
        match self {
            InverseMapModel::Affine { a, b } => ModelGrad::Affine {
                a: Array2::zeros(a.dim()),
                b: Array1::zeros(b.len()),
            },
            InverseMapModel::ResidualNet {
                w1,
                b1,
                w2,
                b2,
                w3,
                b3,
            } => ModelGrad::ResidualNet {
                w1: Array2::zeros(w1.dim()),
                b1: Array1::zeros(b1.len()),
                w2: Array2::zeros(w2.dim()),
                b2: Array1::zeros(b2.len()),
                w3: Array2::zeros(w3.dim()),
                b3: Array1::zeros(b3.len()),
            },
        }
    }
}

/// Hidden activations from a forward pass (empty for the affine family).
pub struct ForwardPass {
    pub out: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

/// Parameter-shaped gradient accumulator.
pub enum ModelGrad {
    Affine {
        a: Array2<f64>,
        b: Array1<f64>,
    },
    ResidualNet {
        w1: Array2<f64>,
        b1: Array1<f64>,
        w2: Array2<f64>,
        b2: Array1<f64>,
        w3: Array2<f64>,
        b3: Array1<f64>,
    },
}

impl ModelGrad {
    /// Flattened gradient in [`InverseMapModel::params`] order.
    pub fn to_vec(&self) -> Array1<f64> {
        let mut v = Vec::new();
        match self {
            ModelGrad::Affine { a, b } => {
                v.extend(a.iter());
                v.extend(b.iter());
            }
            ModelGrad::ResidualNet {
                w1,
                b1,
                w2,
                b2,
                w3,
                b3,
            } => {
                v.extend(w1.iter());
                v.extend(b1.iter());
                v.extend(w2.iter());
                v.extend(b2.iter());
                v.extend(w3.iter());
                v.extend(b3.iter());
            }
        }
        Array1::from_vec(v)
    }
}

/// Pull-back distance d'(z1', z2') = ||psi(z1') - psi(z2')||_2.
pub fn pullback_distance(model: &InverseMapModel, z1: &[f64], z2: &[f64]) -> f64 {
    euclidean(&model.apply(z1), &model.apply(z2))
}

/// Pairwise pull-back distances of a dataset under psi.
pub fn pullback_distance_matrix(model: &InverseMapModel, data: &Dataset) -> Result<DistanceMatrix> {
    let n = data.len();
    let images: Vec<Vec<f64>> = data.rows().iter().map(|o| model.apply(o.z())).collect();
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclidean(&images[i], &images[j]);
            m[[i, j]] = d;
            m[[j, i]] = d;
        }
    }
    DistanceMatrix::new(m)
}

/// Graph-consistency cost matrix C_ik = d_Z(z_i, psi(z'_k)) between a source
/// sample and the psi-images of a target sample.
pub fn graph_cost_matrix(
    model: &InverseMapModel,
    source: &Dataset,
    target: &Dataset,
) -> Result<Array2<f64>> {
    if source.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            context: "graph cost between datasets".into(),
            expected: source.dim(),
            found: target.dim(),
        });
    }
    let images: Vec<Vec<f64>> = target.rows().iter().map(|o| model.apply(o.z())).collect();
    let mut c = Array2::zeros((source.len(), target.len()));
    for i in 0..source.len() {
        let zi = source.row(i).z();
        for k in 0..target.len() {
            c[[i, k]] = euclidean(zi, &images[k]);
        }
    }
    Ok(c)
}

/// Empirical CDF of one coordinate: F(x) = #{samples <= x} / n.
#[derive(Debug, Clone)]
pub struct Ecdf {
    sorted: Vec<f64>,
}

impl Ecdf {
    pub fn from_values(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySample {
                context: "ecdf of an empty sample".into(),
            });
        }
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(Self { sorted: values })
    }

    pub fn from_coordinate(data: &Dataset, coord: usize) -> Result<Self> {
        Self::from_values(data.rows().iter().map(|o| o.z()[coord]).collect())
    }

    /// F(x) = (number of sample points <= x) / n.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.sorted.len();
        let count = self.sorted.partition_point(|&v| v <= x);
        count as f64 / n as f64
    }
}

/// How the cross-site alignment kernel compares stable coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelMode {
    /// Mean absolute difference of the raw coordinate values.
    Raw,
    /// Mean absolute difference of arm-specific ECDF ranks, invariant to
    /// monotone per-site transformations of each stable coordinate.
    Rank,
}

/// Specification of the alignment kernel K(z, z'): which covariate
/// coordinates are assumed stable across sites, how they are compared, and a
/// scale multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentKernelSpec {
    pub stable_indices: Vec<usize>,
    pub mode: KernelMode,
    pub scale: f64,
}

impl Default for AlignmentKernelSpec {
    fn default() -> Self {
        Self {
            stable_indices: vec![0],
            mode: KernelMode::Rank,
            scale: 1.0,
        }
    }
}

impl AlignmentKernelSpec {
    pub fn validate(&self, d: usize) -> Result<()> {
        for &h in &self.stable_indices {
            if h >= d {
                return Err(Error::StableIndexOutOfRange { index: h, d });
            }
        }
        if !self.scale.is_finite() || self.scale < 0.0 {
            return Err(Error::Config(format!(
                "kernel scale must be a finite nonnegative number, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

/// Kernel value for one pair of points. `source_ecdfs`/`target_ecdfs` hold
/// one ECDF per stable coordinate (in `stable_indices` order) built from the
/// respective arm; they are ignored in raw mode. An empty stable set gives a
/// zero kernel.
pub fn alignment_kernel(
    spec: &AlignmentKernelSpec,
    z: &[f64],
    z_prime: &[f64],
    source_ecdfs: &[Ecdf],
    target_ecdfs: &[Ecdf],
) -> f64 {
    if spec.stable_indices.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (pos, &h) in spec.stable_indices.iter().enumerate() {
        total += match spec.mode {
            KernelMode::Raw => (z[h] - z_prime[h]).abs(),
            KernelMode::Rank => {
                (source_ecdfs[pos].eval(z[h]) - target_ecdfs[pos].eval(z_prime[h])).abs()
            }
        };
    }
    spec.scale * total / spec.stable_indices.len() as f64
}

/// Full kernel matrix K_ik between a source and a target sample, with
/// arm-specific ECDFs built from the two samples themselves.
pub fn kernel_matrix(
    spec: &AlignmentKernelSpec,
    source: &Dataset,
    target: &Dataset,
) -> Result<Array2<f64>> {
    let d = source.dim();
    if target.dim() != d {
        return Err(Error::DimensionMismatch {
            context: "kernel matrix between datasets".into(),
            expected: d,
            found: target.dim(),
        });
    }
    spec.validate(d)?;
    let mut source_ecdfs = Vec::new();
    let mut target_ecdfs = Vec::new();
    if spec.mode == KernelMode::Rank {
        for &h in &spec.stable_indices {
            source_ecdfs.push(Ecdf::from_coordinate(source, h)?);
            target_ecdfs.push(Ecdf::from_coordinate(target, h)?);
        }
    }
    let mut k = Array2::zeros((source.len(), target.len()));
    for i in 0..source.len() {
        for j in 0..target.len() {
            k[[i, j]] = alignment_kernel(
                spec,
                source.row(i).z(),
                target.row(j).z(),
                &source_ecdfs,
                &target_ecdfs,
            );
        }
    }
    Ok(k)
}

/// Which loss a parameter gradient is taken of. Each is the smoothed form
/// (|t| -> sqrt(t^2 + 1e-12), norms likewise) of the corresponding objective
/// piece at a fixed coupling; weights (alpha, lambda) are applied by callers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Quadratic distance-profile term: sum_{ijkl} |D_ij - D'_kl| pi_ik pi_jl.
    FgwPartial,
    /// Graph-consistency term: sum_{ik} d_Z(z_i, psi(z'_k)) pi_ik.
    Graph,
    /// Per-point synthesis loss at a fixed candidate z' and anchor z_1j.
    Synth,
}

/// Everything a parameter gradient needs besides the model: the two control
/// samples, the fixed coupling, and (for the synthesis loss) the candidate
/// point, the anchor, and the anchoring weight.
pub struct GradientContext<'a> {
    pub source: &'a Dataset,
    pub target: &'a Dataset,
    pub coupling: &'a Coupling,
    pub z_candidate: Option<&'a [f64]>,
    pub z_anchor: Option<&'a [f64]>,
    pub lambda_s: f64,
}

fn check_context(model: &InverseMapModel, ctx: &GradientContext) -> Result<()> {
    let m = model.ambient_dim();
    if ctx.source.dim() + 1 != m || ctx.target.dim() + 1 != m {
        return Err(Error::DimensionMismatch {
            context: "gradient context datasets vs model".into(),
            expected: m,
            found: ctx.source.dim() + 1,
        });
    }
    let (n, k) = ctx.coupling.dim();
    if n != ctx.source.len() || k != ctx.target.len() {
        return Err(Error::DimensionMismatch {
            context: "gradient context coupling shape".into(),
            expected: ctx.source.len(),
            found: n,
        });
    }
    Ok(())
}

/// Smoothed loss value matching [`parameter_gradient`]; the function the
/// finite-difference oracle differentiates.
pub fn smoothed_loss(model: &InverseMapModel, kind: LossKind, ctx: &GradientContext) -> Result<f64> {
    check_context(model, ctx)?;
    let pi = ctx.coupling.plan();
    let images: Vec<Vec<f64>> = ctx
        .target
        .rows()
        .iter()
        .map(|o| model.apply(o.z()))
        .collect();
    match kind {
        LossKind::Graph => {
            let mut total = 0.0;
            for (i, zi) in ctx.source.rows().iter().enumerate() {
                for (k, u) in images.iter().enumerate() {
                    let diff: Vec<f64> = zi.z().iter().zip(u).map(|(a, b)| a - b).collect();
                    total += smooth_norm(&diff) * pi[[i, k]];
                }
            }
            Ok(total)
        }
        LossKind::FgwPartial => {
            let n = ctx.source.len();
            let np = ctx.target.len();
            let d = crate::data::pairwise_distances(ctx.source, false)?;
            let mut dp = Array2::zeros((np, np));
            for k in 0..np {
                for l in 0..np {
                    let diff: Vec<f64> =
                        images[k].iter().zip(&images[l]).map(|(a, b)| a - b).collect();
                    dp[[k, l]] = smooth_norm(&diff);
                }
            }
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..n {
                    for k in 0..np {
                        for l in 0..np {
                            total += smooth_abs(d.get(i, j) - dp[[k, l]]) * pi[[i, k]] * pi[[j, l]];
                        }
                    }
                }
            }
            Ok(total)
        }
        LossKind::Synth => {
            let zc = ctx.z_candidate.ok_or_else(|| Error::Config(
                "synthesis loss needs a candidate point".into(),
            ))?;
            let za = ctx.z_anchor.ok_or_else(|| Error::Config(
                "synthesis loss needs an anchor point".into(),
            ))?;
            let u = model.apply(zc);
            let mut total = 0.0;
            for (i, zi) in ctx.source.rows().iter().enumerate() {
                let a_i = euclidean(zi.z(), za);
                for (k, uk) in images.iter().enumerate() {
                    let diff: Vec<f64> = uk.iter().zip(&u).map(|(a, b)| a - b).collect();
                    let b_k = smooth_norm(&diff);
                    total += smooth_abs(a_i - b_k) * pi[[i, k]];
                }
            }
            let diff: Vec<f64> = u.iter().zip(za).map(|(a, b)| a - b).collect();
            total += ctx.lambda_s * smooth_norm(&diff);
            Ok(total)
        }
    }
}

/// Gradient of [`smoothed_loss`] over the flattened model parameters,
/// computed by reverse-mode accumulation through the fixed architecture.
pub fn parameter_gradient(
    model: &InverseMapModel,
    kind: LossKind,
    ctx: &GradientContext,
) -> Result<Array1<f64>> {
    check_context(model, ctx)?;
    let pi = ctx.coupling.plan();
    let passes: Vec<ForwardPass> = ctx
        .target
        .rows()
        .iter()
        .map(|o| model.forward(o.z()))
        .collect();
    let np = ctx.target.len();
    let m = model.ambient_dim();
    let mut acc = model.zero_grad();
    // Adjoints with respect to each target image u_k.
    let mut adj = vec![vec![0.0; m]; np];
    match kind {
        LossKind::Graph => {
            for (i, zi) in ctx.source.rows().iter().enumerate() {
                for (k, pass) in passes.iter().enumerate() {
                    let w = pi[[i, k]];
                    if w == 0.0 {
                        continue;
                    }
                    let diff: Vec<f64> =
                        pass.out.iter().zip(zi.z()).map(|(u, z)| u - z).collect();
                    let nrm = smooth_norm(&diff);
                    for t in 0..m {
                        adj[k][t] += w * diff[t] / nrm;
                    }
                }
            }
        }
        LossKind::FgwPartial => {
            let n = ctx.source.len();
            let d = crate::data::pairwise_distances(ctx.source, false)?;
            // S_kl = sum_ij smooth_sign(D_ij - D'_kl) pi_ik pi_jl; by symmetry of
            // D the adjoint of u_k is -2 sum_l S_kl (u_k - u_l)/smooth_norm.
            for k in 0..np {
                for l in 0..np {
                    if l == k {
                        continue;
                    }
                    let diff: Vec<f64> = passes[k]
                        .out
                        .iter()
                        .zip(&passes[l].out)
                        .map(|(a, b)| a - b)
                        .collect();
                    let nrm = smooth_norm(&diff);
                    let mut s_kl = 0.0;
                    for i in 0..n {
                        let pik = pi[[i, k]];
                        if pik == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            s_kl += smooth_abs_grad(d.get(i, j) - nrm) * pik * pi[[j, l]];
                        }
                    }
                    let coef = -2.0 * s_kl / nrm;
                    for t in 0..m {
                        adj[k][t] += coef * diff[t];
                    }
                }
            }
        }
        LossKind::Synth => {
            let zc = ctx.z_candidate.ok_or_else(|| Error::Config(
                "synthesis loss needs a candidate point".into(),
            ))?;
            let za = ctx.z_anchor.ok_or_else(|| Error::Config(
                "synthesis loss needs an anchor point".into(),
            ))?;
            let cand = model.forward(zc);
            let mut cand_adj = vec![0.0; m];
            for (i, zi) in ctx.source.rows().iter().enumerate() {
                let a_i = euclidean(zi.z(), za);
                for (k, pass) in passes.iter().enumerate() {
                    let w = pi[[i, k]];
                    if w == 0.0 {
                        continue;
                    }
                    let diff: Vec<f64> =
                        pass.out.iter().zip(&cand.out).map(|(a, b)| a - b).collect();
                    let b_k = smooth_norm(&diff);
                    let g = -smooth_abs_grad(a_i - b_k) * w;
                    for t in 0..m {
                        let dir = diff[t] / b_k;
                        adj[k][t] += g * dir;
                        cand_adj[t] -= g * dir;
                    }
                }
            }
            let diff: Vec<f64> = cand.out.iter().zip(za).map(|(a, b)| a - b).collect();
            let nrm = smooth_norm(&diff);
            for t in 0..m {
                cand_adj[t] += ctx.lambda_s * diff[t] / nrm;
            }
            model.backprop(zc, &cand, &cand_adj, &mut acc);
        }
    }
    for (k, pass) in passes.iter().enumerate() {
        if adj[k].iter().any(|&g| g != 0.0) {
            model.backprop(ctx.target.row(k).z(), pass, &adj[k], &mut acc);
        }
    }
    Ok(acc.to_vec())
}

/// Forward image phi(z) = psi^{-1}(z) for the affine family, obtained by the
/// linear solve A z' = z - b. Returns `None` when A's SVD condition number
/// exceeds 1e12 (the caller skips the seed and records a diagnostic).
pub fn affine_forward_image(a: &Array2<f64>, b: &Array1<f64>, z: &[f64]) -> Option<Vec<f64>> {
    let m = b.len();
    let na = nalgebra::DMatrix::from_fn(m, m, |i, j| a[[i, j]]);
    let svd = na.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 0.0) || smax / smin > 1e12 {
        return None;
    }
    let rhs = nalgebra::DVector::from_fn(m, |i, _| z[i] - b[i]);
    svd.solve(&rhs, 0.0).ok().map(|sol| sol.iter().copied().collect())
}
