//! Independent reference implementations used only by tests.
#![allow(dead_code)]

use arfl::aggregate::ClientContribution;
use arfl::dataset::Dataset;
use arfl::model::{empirical_loss, loss_gradient, ModelArch, ParamVector};
use arfl::solver::SolverInput;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Euclidean projection onto the probability simplex (sort-and-threshold).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (j, &x) in u.iter().enumerate() {
        cumulative += x;
        let t = (cumulative - 1.0) / (j + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

pub const QP_MAX_ITERS: usize = 100_000;
pub const QP_GRADIENT_MAPPING_TOL: f64 = 1e-6;

/// Minimizes Σ α_i L_i + (λ/2) Σ α_i² / m_i over the simplex by projected
/// gradient descent from the uniform point with step 1/L, L = λ·max(1/m_i).
/// Stops early only at an exact fixed point.
pub fn qp_oracle(input: &SolverInput) -> Result<Vec<f64>, String> {
    let n = input.losses.len();
    if n == 0 || n > 12 {
        return Err(format!("oracle supports 1..=12 clients, got {n}"));
    }
    let lambda = input.lambda;
    let inv_m: Vec<f64> = input.sample_counts.iter().map(|&m| 1.0 / m as f64).collect();
    let lipschitz = lambda * inv_m.iter().cloned().fold(0.0, f64::max);
    let step = 1.0 / lipschitz;
    let gradient = |a: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(&input.losses)
            .zip(&inv_m)
            .map(|((&ai, &l), &im)| l + lambda * ai * im)
            .collect()
    };
    let mut alpha = vec![1.0 / n as f64; n];
    for _ in 0..QP_MAX_ITERS {
        let g = gradient(&alpha);
        let trial: Vec<f64> = alpha.iter().zip(&g).map(|(a, gi)| a - step * gi).collect();
        let next = project_simplex(&trial);
        if next == alpha {
            break;
        }
        alpha = next;
    }
    let g = gradient(&alpha);
    let trial: Vec<f64> = alpha.iter().zip(&g).map(|(a, gi)| a - step * gi).collect();
    let projected = project_simplex(&trial);
    let mapping = alpha
        .iter()
        .zip(&projected)
        .map(|(a, p)| ((a - p) * lipschitz).powi(2))
        .sum::<f64>()
        .sqrt();
    if mapping > QP_GRADIENT_MAPPING_TOL {
        return Err(format!("oracle did not converge: gradient mapping {mapping:e}"));
    }
    Ok(alpha)
}

/// Instance drawn as N ∈ 2..=10, L ~ U[0, 2], m ~ U{1..50},
/// λ ∈ {0.01, 1, 100}·Σm.
pub fn random_solver_instance<R: Rng>(rng: &mut R) -> SolverInput {
    let n = rng.random_range(2..=10);
    let losses: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
    let counts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=50)).collect();
    let total: usize = counts.iter().sum();
    let multiple = [0.01, 1.0, 100.0][rng.random_range(0..3)];
    SolverInput::new(losses, counts, multiple * total as f64)
}

/// Central finite differences of the mean loss over `batch`.
pub fn fd_gradient(w: &ParamVector, arch: &ModelArch, data: &Dataset, batch: &[usize], h: f64) -> Vec<f64> {
    let sub = data.select(batch);
    let mut probe = w.clone();
    (0..w.len())
        .map(|k| {
            let orig = probe.as_slice()[k];
            probe.as_mut_slice()[k] = orig + h;
            let up = empirical_loss(&probe, arch, &sub).unwrap();
            probe.as_mut_slice()[k] = orig - h;
            let down = empirical_loss(&probe, arch, &sub).unwrap();
            probe.as_mut_slice()[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Σ w_i ‖v − x_i‖ in 2D.
pub fn median_objective(points: &[[f64; 2]], weights: &[f64], v: [f64; 2]) -> f64 {
    points
        .iter()
        .zip(weights)
        .map(|(p, w)| w * ((v[0] - p[0]).powi(2) + (v[1] - p[1]).powi(2)).sqrt())
        .sum()
}

/// Weighted 2D geometric median by coarse-to-fine grid search. Each pass
/// evaluates a 101×101 grid plus the data points (the minimizer often sits
/// on one), then zooms to ±10 cells around the best candidate.
pub fn grid_geometric_median(points: &[[f64; 2]], weights: &[f64]) -> [f64; 2] {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    const CELLS: usize = 100;
    let mut best = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    while (hi[0] - lo[0]).max(hi[1] - lo[1]) > 1e-9 {
        let cell = [(hi[0] - lo[0]) / CELLS as f64, (hi[1] - lo[1]) / CELLS as f64];
        let mut best_value = f64::INFINITY;
        for i in 0..=CELLS {
            for j in 0..=CELLS {
                let v = [lo[0] + i as f64 * cell[0], lo[1] + j as f64 * cell[1]];
                let value = median_objective(points, weights, v);
                if value < best_value {
                    best_value = value;
                    best = v;
                }
            }
        }
        for p in points {
            let value = median_objective(points, weights, *p);
            if value < best_value {
                best_value = value;
                best = *p;
            }
        }
        for d in 0..2 {
            lo[d] = best[d] - 10.0 * cell[d];
            hi[d] = best[d] + 10.0 * cell[d];
        }
    }
    best
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|mask| mask.count_ones() as usize == k)
        .map(|mask| (0..n).filter(|&i| mask & (1 << i) != 0).collect())
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Multi-Krum by exhaustive enumeration: each score is the minimum over all
/// (n − f − 2)-subsets of other updates of the summed squared distances,
/// and the selection is the m-subset with the smallest total score.
pub fn brute_force_mkrum(contribs: &[ClientContribution], f: usize, m: usize) -> Vec<usize> {
    let n = contribs.len();
    let k = n - f - 2;
    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            subsets(others.len(), k)
                .into_iter()
                .map(|s| {
                    s.iter()
                        .map(|&t| sq_dist(contribs[i].params.as_slice(), contribs[others[t]].params.as_slice()))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    subsets(n, m)
        .into_iter()
        .min_by(|a, b| {
            let sa: f64 = a.iter().map(|&i| scores[i]).sum();
            let sb: f64 = b.iter().map(|&i| scores[i]).sum();
            sa.total_cmp(&sb)
        })
        .unwrap()
}

pub fn unweighted_mean(contribs: &[ClientContribution], chosen: &[usize]) -> Vec<f64> {
    let len = contribs[0].params.len();
    let mut out = vec![0.0; len];
    for &i in chosen {
        for (o, v) in out.iter_mut().zip(contribs[i].params.as_slice()) {
            *o += v / chosen.len() as f64;
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Gradient agreement metric: |g − fd| / max(|g|, |fd|, floor).
pub fn relative_error(g: f64, fd: f64, floor: f64) -> f64 {
    (g - fd).abs() / g.abs().max(fd.abs()).max(floor)
}

pub fn contrib(id: usize, params: Vec<f64>, m: usize, weight: f64) -> ClientContribution {
    ClientContribution {
        client_id: id,
        params: ParamVector::new(params),
        sample_count: m,
        weight,
    }
}

/// Parameters ~ U[-5, 5]^dim, m ~ U{1..30}, weight ~ U[0, 1].
pub fn random_contribs<R: Rng>(rng: &mut R, n: usize, dim: usize) -> Vec<ClientContribution> {
    (0..n)
        .map(|i| {
            let params = (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect();
            contrib(i, params, rng.random_range(1..=30), rng.random_range(0.0..1.0))
        })
        .collect()
}

/// Below this magnitude both gradients count as zero and are compared
/// absolutely.
pub const GRADIENT_ERROR_FLOOR: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;

fn random_model_problem(rng: &mut ChaCha8Rng, arch: &ModelArch, rows: usize) -> (ParamVector, Dataset) {
    let d = arch.input_dim();
    let c = arch.num_classes();
    let features = (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = (0..rows).map(|_| rng.random_range(0..c)).collect();
    let w = ParamVector::new((0..arch.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect());
    (w, Dataset::new(d, c, features, labels).unwrap())
}

/// Worst relative error between the analytic and central-difference
/// gradients over `draws` random (weights, data, batch) triples.
pub fn worst_gradient_error(arch: ModelArch, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let (w, data) = random_model_problem(&mut rng, &arch, 6);
        let batch: Vec<usize> = (0..4).map(|_| rng.random_range(0..data.len())).collect();
        let g = loss_gradient(&w, &arch, &data, &batch).unwrap();
        let fd = fd_gradient(&w, &arch, &data, &batch, FD_STEP);
        for (a, b) in g.as_slice().iter().zip(&fd) {
            worst = worst.max(relative_error(*a, *b, GRADIENT_ERROR_FLOOR));
        }
    }
    worst
}
