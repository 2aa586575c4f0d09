//! Helpers shared by the oracle and acceptance test binaries: random problem
//! builders, an independent min-cost-flow transport solver, brute-force
//! summation oracles for every fast loss path, and central finite-difference
//! gradient checks.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use otsynth::{
    energy_distance, euclidean, fgw_loss, graph_loss, mmd2_gaussian, parameter_gradient,
    smoothed_loss, synth_loss, synth_point_gradient, AlignmentKernelSpec,
    Coupling, Dataset, GradientContext, InverseMapModel, KernelMode, LossKind, ModelKind,
    Observation, OttmlDiagnostics, OttmlResult, Role,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, d: usize, role: Role) -> Dataset {
    let obs = (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            Observation::from_parts(&x, rng.random_range(-2.0..2.0)).unwrap()
        })
        .collect();
    Dataset::new(obs, role).unwrap()
}

/// A random coupling with exact uniform marginals: start from positive noise
/// and alternate row/column scaling until both residuals are tiny.
pub fn random_coupling(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Coupling {
    let mut plan = Array2::from_shape_fn((n, m), |_| rng.random_range(0.1..1.0));
    for _ in 0..500 {
        for i in 0..n {
            let s: f64 = plan.row(i).sum();
            for k in 0..m {
                plan[[i, k]] /= s * n as f64;
            }
        }
        for k in 0..m {
            let s: f64 = plan.column(k).sum();
            for i in 0..n {
                plan[[i, k]] /= s * m as f64;
            }
        }
    }
    let p = Array1::from_elem(n, 1.0 / n as f64);
    let q = Array1::from_elem(m, 1.0 / m as f64);
    Coupling::new(plan, p, q, 1e-9).unwrap()
}

pub fn random_affine(rng: &mut ChaCha8Rng, d: usize) -> InverseMapModel {
    let mut model = InverseMapModel::identity(ModelKind::Affine, d, rng.random());
    let params = model.params().mapv(|p| p + rng.random_range(-0.3..0.3));
    model.set_params(&params).unwrap();
    model
}

pub fn result_with(model: InverseMapModel, coupling: Coupling) -> OttmlResult {
    OttmlResult {
        coupling,
        model,
        objective_trace: vec![],
        converged: true,
        diagnostics: OttmlDiagnostics::default(),
    }
}

/// Exact uniform-weight 1D transport cost by successive-shortest-path
/// min-cost flow on the bipartite transportation graph, with integer
/// supplies nb per source atom and na per sink atom.
pub fn w1_min_cost_flow(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len(), b.len());
    // Node ids: 0 = source, 1..=na lefts, na+1..=na+nb rights, last = sink.
    let n_nodes = na + nb + 2;
    let sink = n_nodes - 1;
    struct Edge {
        to: usize,
        cap: i64,
        cost: f64,
        rev: usize,
    }
    let mut graph: Vec<Vec<Edge>> = (0..n_nodes).map(|_| Vec::new()).collect();
    let add_edge = |graph: &mut Vec<Vec<Edge>>, from: usize, to: usize, cap: i64, cost: f64| {
        let rev_from = graph[to].len();
        let rev_to = graph[from].len();
        graph[from].push(Edge { to, cap, cost, rev: rev_from });
        graph[to].push(Edge { to: from, cap: 0, cost: -cost, rev: rev_to });
    };
    for i in 0..na {
        add_edge(&mut graph, 0, 1 + i, nb as i64, 0.0);
        for j in 0..nb {
            add_edge(&mut graph, 1 + i, 1 + na + j, i64::MAX / 4, (a[i] - b[j]).abs());
        }
    }
    for j in 0..nb {
        add_edge(&mut graph, 1 + na + j, sink, na as i64, 0.0);
    }
    let mut remaining = (na * nb) as i64;
    let mut total_cost = 0.0;
    while remaining > 0 {
        // Bellman-Ford shortest path on the residual graph.
        let mut dist = vec![f64::INFINITY; n_nodes];
        let mut prev: Vec<Option<(usize, usize)>> = vec![None; n_nodes];
        dist[0] = 0.0;
        for _ in 0..n_nodes {
            let mut improved = false;
            for u in 0..n_nodes {
                if !dist[u].is_finite() {
                    continue;
                }
                for (e_idx, e) in graph[u].iter().enumerate() {
                    if e.cap > 0 && dist[u] + e.cost < dist[e.to] - 1e-15 {
                        dist[e.to] = dist[u] + e.cost;
                        prev[e.to] = Some((u, e_idx));
                        improved = true;
                    }
                }
            }
            if !improved {
                break;
            }
        }
        assert!(dist[sink].is_finite(), "flow network must stay connected");
        // Bottleneck along the path.
        let mut bottleneck = remaining;
        let mut node = sink;
        while let Some((u, e_idx)) = prev[node] {
            bottleneck = bottleneck.min(graph[u][e_idx].cap);
            node = u;
        }
        // Push.
        let mut node = sink;
        while let Some((u, e_idx)) = prev[node] {
            total_cost += bottleneck as f64 * graph[u][e_idx].cost;
            graph[u][e_idx].cap -= bottleneck;
            let rev = graph[u][e_idx].rev;
            graph[node][rev].cap += bottleneck;
            node = u;
        }
        remaining -= bottleneck;
    }
    total_cost / (na * nb) as f64
}

/// The alignment kernel recomputed from scratch, including its rank ECDFs.
pub fn naive_kernel(
    spec: &AlignmentKernelSpec,
    z0: &Dataset,
    z0p: &Dataset,
    i: usize,
    k: usize,
) -> f64 {
    if spec.stable_indices.is_empty() {
        return 0.0;
    }
    let ecdf = |data: &Dataset, coord: usize, x: f64| {
        let rows = data.rows();
        rows.iter().filter(|o| o.z()[coord] <= x).count() as f64 / rows.len() as f64
    };
    let zi = z0.rows()[i].z();
    let zk = z0p.rows()[k].z();
    let mut total = 0.0;
    for &h in &spec.stable_indices {
        total += match spec.mode {
            KernelMode::Raw => (zi[h] - zk[h]).abs(),
            KernelMode::Rank => (ecdf(z0, h, zi[h]) - ecdf(z0p, h, zk[h])).abs(),
        };
    }
    spec.scale * total / spec.stable_indices.len() as f64
}

/// Quadruple-summation oracle for the fused loss: kernel term plus the
/// metric-alignment term over all index pairs.
pub fn brute_fgw(
    coupling: &Coupling,
    model: &InverseMapModel,
    z0: &Dataset,
    z0p: &Dataset,
    spec: &AlignmentKernelSpec,
    alpha: f64,
) -> f64 {
    let (n, m) = (z0.len(), z0p.len());
    let pi = coupling.plan();
    let images: Vec<Vec<f64>> = z0p.rows().iter().map(|o| model.apply(o.z())).collect();
    let mut linear = 0.0;
    for i in 0..n {
        for k in 0..m {
            linear += naive_kernel(spec, z0, z0p, i, k) * pi[[i, k]];
        }
    }
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d_ij = euclidean(z0.rows()[i].z(), z0.rows()[j].z());
            for k in 0..m {
                for l in 0..m {
                    let dp_kl = euclidean(&images[k], &images[l]);
                    quad += (d_ij - dp_kl).abs() * pi[[i, k]] * pi[[j, l]];
                }
            }
        }
    }
    (1.0 - alpha) * linear + alpha * quad
}

/// Double-summation oracle for the pull-back graph loss.
pub fn brute_graph(
    coupling: &Coupling,
    model: &InverseMapModel,
    z0: &Dataset,
    z0p: &Dataset,
) -> f64 {
    let pi = coupling.plan();
    let mut oracle = 0.0;
    for i in 0..z0.len() {
        for k in 0..z0p.len() {
            let image = model.apply(z0p.rows()[k].z());
            oracle += euclidean(z0.rows()[i].z(), &image) * pi[[i, k]];
        }
    }
    oracle
}

/// Double-summation oracle for the synthesis loss at one candidate point.
pub fn brute_synth(
    zprime: &[f64],
    z1j: &[f64],
    result: &OttmlResult,
    z0: &Dataset,
    z0p: &Dataset,
    lambda_s: f64,
) -> f64 {
    let pi = result.coupling.plan();
    let u = result.model.apply(zprime);
    let mut oracle = 0.0;
    for i in 0..z0.len() {
        let a_i = euclidean(z0.rows()[i].z(), z1j);
        for k in 0..z0p.len() {
            let b_k = euclidean(&result.model.apply(z0p.rows()[k].z()), &u);
            oracle += (a_i - b_k).abs() * pi[[i, k]];
        }
    }
    oracle + lambda_s * euclidean(&u, z1j)
}

/// Full V-statistic double sums for the energy distance, diagonals included.
pub fn brute_energy(a: &Dataset, b: &Dataset) -> f64 {
    let (n, m) = (a.len(), b.len());
    let cross: f64 = a
        .rows()
        .iter()
        .flat_map(|u| b.rows().iter().map(move |v| euclidean(u.z(), v.z())))
        .sum();
    let within = |d: &Dataset| -> f64 {
        d.rows()
            .iter()
            .flat_map(|u| d.rows().iter().map(move |v| euclidean(u.z(), v.z())))
            .sum()
    };
    2.0 * cross / (n * m) as f64 - within(a) / (n * n) as f64 - within(b) / (m * m) as f64
}

/// Double-summation oracle for the Gaussian-kernel discrepancy, recomputing
/// the median-of-pooled-pairs bandwidth from scratch. Returns 0.0 when every
/// pooled point coincides, matching the fast path's convention.
pub fn brute_mmd(a: &Dataset, b: &Dataset) -> f64 {
    let (n, m) = (a.len(), b.len());
    // Bandwidth: median over distinct pooled pairs, even count averaged.
    let pooled: Vec<&[f64]> = a.rows().iter().chain(b.rows().iter()).map(|o| o.z()).collect();
    let mut dists = Vec::new();
    for i in 0..pooled.len() {
        for j in (i + 1)..pooled.len() {
            dists.push(euclidean(pooled[i], pooled[j]));
        }
    }
    dists.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut sigma = if dists.len() % 2 == 1 {
        dists[dists.len() / 2]
    } else {
        0.5 * (dists[dists.len() / 2 - 1] + dists[dists.len() / 2])
    };
    if sigma <= 0.0 {
        match dists.iter().find(|&&d| d > 0.0) {
            Some(&d) => sigma = d,
            None => return 0.0,
        }
    }
    let kernel_sum = |xs: &[&[f64]], ys: &[&[f64]]| -> f64 {
        let mut s = 0.0;
        for x in xs {
            for y in ys {
                let d = euclidean(x, y);
                s += (-d * d / (2.0 * sigma * sigma)).exp();
            }
        }
        s
    };
    let xs: Vec<&[f64]> = a.rows().iter().map(|o| o.z()).collect();
    let ys: Vec<&[f64]> = b.rows().iter().map(|o| o.z()).collect();
    kernel_sum(&xs, &xs) / (n * n) as f64 + kernel_sum(&ys, &ys) / (m * m) as f64
        - 2.0 * kernel_sum(&xs, &ys) / (n * m) as f64
}

/// One parameter-gradient check: analytic gradient of the chosen loss versus
/// central finite differences on an n=8 random instance, relative error over
/// the whole parameter vector at most 1e-4.
pub fn fd_check_parameters(kind: ModelKind, loss: LossKind, rng: &mut ChaCha8Rng, trial: usize) {
    let n = 8;
    let z0 = random_dataset(rng, n, 2, Role::SourceControl);
    let z0p = random_dataset(rng, n, 2, Role::TargetControl);
    let coupling = random_coupling(rng, n, n);
    let mut model = InverseMapModel::identity(kind, 2, 100 + trial as u64);
    let params = model.params().mapv(|p| p + rng.random_range(-0.1..0.1));
    model.set_params(&params).unwrap();
    let zprime: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let z1j: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ctx = GradientContext {
        source: &z0,
        target: &z0p,
        coupling: &coupling,
        z_candidate: if loss == LossKind::Synth { Some(&zprime) } else { None },
        z_anchor: if loss == LossKind::Synth { Some(&z1j) } else { None },
        lambda_s: 0.7,
    };
    let grad = parameter_gradient(&model, loss, &ctx).unwrap();
    let h = 1e-5;
    let mut fd = Array1::zeros(grad.len());
    for l in 0..grad.len() {
        let mut plus = params.clone();
        let mut minus = params.clone();
        plus[l] += h;
        minus[l] -= h;
        let mut m_plus = model.clone();
        m_plus.set_params(&plus).unwrap();
        let mut m_minus = model.clone();
        m_minus.set_params(&minus).unwrap();
        fd[l] = (smoothed_loss(&m_plus, loss, &ctx).unwrap()
            - smoothed_loss(&m_minus, loss, &ctx).unwrap())
            / (2.0 * h);
    }
    let diff = (&grad - &fd).mapv(f64::abs).sum();
    let scale = fd.mapv(f64::abs).sum().max(1e-8);
    assert!(
        diff / scale <= 1e-4,
        "{kind:?}/{loss:?} trial {trial}: relative gradient error {}",
        diff / scale
    );
}

/// One synthesis-point gradient check against central finite differences on
/// an n=8 random instance, relative error at most 1e-4.
pub fn fd_check_synth_point(kind: ModelKind, rng: &mut ChaCha8Rng, trial: usize) {
    let n = 8;
    let z0 = random_dataset(rng, n, 2, Role::SourceControl);
    let z0p = random_dataset(rng, n, 2, Role::TargetControl);
    let mut model = InverseMapModel::identity(kind, 2, 200 + trial as u64);
    let params = model.params().mapv(|p| p + rng.random_range(-0.1..0.1));
    model.set_params(&params).unwrap();
    let result = result_with(model, random_coupling(rng, n, n));
    let zprime: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let z1j: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let lambda_s = 0.7;
    let grad = synth_point_gradient(&zprime, &z1j, &result, &z0, &z0p, lambda_s).unwrap();
    let h = 1e-5;
    let eval = |z: &[f64]| {
        let ctx = GradientContext {
            source: &z0,
            target: &z0p,
            coupling: &result.coupling,
            z_candidate: Some(z),
            z_anchor: Some(&z1j),
            lambda_s,
        };
        smoothed_loss(&result.model, LossKind::Synth, &ctx).unwrap()
    };
    let mut diff = 0.0;
    let mut scale: f64 = 1e-8;
    for t in 0..3 {
        let mut plus = zprime.clone();
        let mut minus = zprime.clone();
        plus[t] += h;
        minus[t] -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        diff += (grad[t] - fd).abs();
        scale += fd.abs();
    }
    assert!(
        diff / scale <= 1e-4,
        "{kind:?} trial {trial}: relative gradient error {}",
        diff / scale
    );
}

/// Random small instances for the summation-oracle cross-checks: every fast
/// loss path against its brute-force twin, absolute tolerance 1e-12.
pub fn check_loss_oracles_once(rng: &mut ChaCha8Rng, trial: usize) {
    let n = rng.random_range(2..=5);
    let m = rng.random_range(2..=5);
    let z0 = random_dataset(rng, n, 2, Role::SourceControl);
    let z0p = random_dataset(rng, m, 2, Role::TargetControl);
    let coupling = random_coupling(rng, n, m);
    let model = random_affine(rng, 2);
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
        "fused loss trial {trial}: fast {fast} vs quadruple sum {oracle}"
    );

    let fast = graph_loss(&coupling, &model, &z0, &z0p).unwrap();
    let oracle = brute_graph(&coupling, &model, &z0, &z0p);
    assert!(
        (fast - oracle).abs() <= 1e-12,
        "graph loss trial {trial}: fast {fast} vs double sum {oracle}"
    );

    let result = result_with(model, coupling);
    let zprime: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
    let z1j: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
    let lambda_s = rng.random_range(0.0..2.0);
    let fast = synth_loss(&zprime, &z1j, &result, &z0, &z0p, lambda_s).unwrap();
    let oracle = brute_synth(&zprime, &z1j, &result, &z0, &z0p, lambda_s);
    assert!(
        (fast - oracle).abs() <= 1e-12,
        "synthesis loss trial {trial}: fast {fast} vs double sum {oracle}"
    );

    let na = rng.random_range(1..=5);
    let nb = rng.random_range(1..=5);
    let a = random_dataset(rng, na, 2, Role::Synthetic);
    let b = random_dataset(rng, nb, 2, Role::TargetTreatmentOracle);
    let fast = energy_distance(&a, &b).unwrap();
    let oracle = brute_energy(&a, &b);
    assert!(
        (fast - oracle).abs() <= 1e-12,
        "energy trial {trial}: fast {fast} vs double sums {oracle}"
    );

    let fast = mmd2_gaussian(&a, &b).unwrap();
    let oracle = brute_mmd(&a, &b);
    assert!(
        (fast - oracle).abs() <= 1e-12,
        "kernel discrepancy trial {trial}: fast {fast} vs double sums {oracle}"
    );
}
