//! Independent oracles shared by the integration tests. Nothing here calls
//! the routine it is used to check.
#![allow(dead_code)]

use dastack_core::rng::seeded;
use dastack_core::Matrix;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = seeded(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_labels(n: usize, n_classes: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeded(seed);
    (0..n).map(|_| rng.random_range(0..n_classes)).collect()
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest entrywise relative error. Denominators are floored at 1e-5 of
/// the gradient's scale so entries that are zero up to rounding do not
/// dominate.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(1.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-5 * scale;
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Checks `analytic` against central differences of `f` around `x`.
pub fn fd_check(x: &[f64], analytic: &[f64], f: impl FnMut(&[f64]) -> f64) -> f64 {
    max_rel_err(analytic, &numeric_gradient(x, FD_STEP, f))
}

pub fn with_data(shape: (usize, usize), data: &[f64]) -> Matrix {
    Matrix::new(shape.0, shape.1, data.to_vec()).unwrap()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Pairwise loop over every (i, j).
pub fn brute_kernel(x: &Matrix, y: &Matrix, bandwidth: f64) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|i| {
            (0..y.rows())
                .map(|j| (-sq_dist(x.row(i), y.row(j)) / (2.0 * bandwidth)).exp())
                .collect()
        })
        .collect()
}

/// Sorts every nonzero pairwise squared distance of the pooled rows.
pub fn brute_median_sq_dist(x: &Matrix, y: &Matrix) -> f64 {
    let rows: Vec<&[f64]> = (0..x.rows())
        .map(|i| x.row(i))
        .chain((0..y.rows()).map(|i| y.row(i)))
        .collect();
    let mut d = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let v = sq_dist(rows[i], rows[j]);
            if v > 0.0 {
                d.push(v);
            }
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    }
}

fn mean_kernel(x: &Matrix, y: &Matrix, bandwidth: f64) -> f64 {
    let k = brute_kernel(x, y, bandwidth);
    k.iter().flatten().sum::<f64>() / (x.rows() * y.rows()) as f64
}

/// Biased multi-kernel MMD from explicit kernel averages.
pub fn brute_mmd(xs: &Matrix, xt: &Matrix, bandwidths: &[f64]) -> f64 {
    bandwidths
        .iter()
        .map(|&b| mean_kernel(xs, xs, b) + mean_kernel(xt, xt, b) - 2.0 * mean_kernel(xs, xt, b))
        .sum()
}

/// Per-class MMD averaged over classes present on both sides.
pub fn brute_cmmd(
    xs: &Matrix,
    ys: &[usize],
    xt: &Matrix,
    yt: &[usize],
    n_classes: usize,
    bw: &[f64],
) -> f64 {
    let mut total = 0.0;
    let mut present = 0;
    for c in 0..n_classes {
        let si: Vec<usize> = (0..ys.len()).filter(|&i| ys[i] == c).collect();
        let ti: Vec<usize> = (0..yt.len()).filter(|&i| yt[i] == c).collect();
        if si.is_empty() || ti.is_empty() {
            continue;
        }
        total += brute_mmd(&xs.select_rows(&si), &xt.select_rows(&ti), bw);
        present += 1;
    }
    total / present as f64
}

/// Unbiased covariance by explicit double loop.
pub fn brute_covariance(x: &Matrix) -> Vec<Vec<f64>> {
    let (n, m) = x.shape();
    let mean: Vec<f64> = (0..m)
        .map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64)
        .collect();
    (0..m)
        .map(|a| {
            (0..m)
                .map(|b| {
                    (0..n)
                        .map(|i| (x.get(i, a) - mean[a]) * (x.get(i, b) - mean[b]))
                        .sum::<f64>()
                        / (n - 1) as f64
                })
                .collect()
        })
        .collect()
}

/// Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi rotations,
/// sorted descending.
pub fn symmetric_eigenvalues(s: &[Vec<f64>]) -> Vec<f64> {
    let n = s.len();
    let mut a: Vec<Vec<f64>> = s.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for row in a.iter_mut() {
                    let (akp, akq) = (row[p], row[q]);
                    row[p] = c * akp - sn * akq;
                    row[q] = sn * akp + c * akq;
                }
                #[allow(clippy::needless_range_loop)]
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - sn * aqk;
                    a[q][k] = sn * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// `aᵀa` by explicit loops.
pub fn gram(a: &Matrix) -> Vec<Vec<f64>> {
    let (r, c) = a.shape();
    (0..c)
        .map(|i| {
            (0..c)
                .map(|j| (0..r).map(|k| a.get(k, i) * a.get(k, j)).sum())
                .collect()
        })
        .collect()
}

pub fn stable_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// First maximal index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

use dastack_core::adapt::Architecture;
use dastack_core::data::generate_shift_pair;
use dastack_core::rng::derive_seed;
use dastack_core::{LabeledSet, ShiftSpec, StackConfig, StackPlan};

/// Blobs-shift benchmark: 4 classes, 100 per class, target rotated by
/// `rotation_deg`, unit noise. Seeds and splits follow the command-line
/// runner so results match `dastack stack --seed <seed>`.
pub struct Benchmark {
    pub source: LabeledSet,
    pub target: LabeledSet,
    pub plan: StackPlan,
    pub config: StackConfig,
}

pub fn blobs_benchmark(seed: u64, rotation_deg: f64) -> Benchmark {
    let spec = ShiftSpec {
        rotation_deg,
        seed: derive_seed(seed, "data"),
        ..ShiftSpec::default()
    };
    let (source, target) = generate_shift_pair(&spec).unwrap();
    let plan = StackPlan::new(
        &source,
        &target,
        [0.6, 0.2, 0.2],
        true,
        derive_seed(seed, "split"),
    )
    .unwrap();
    let config = StackConfig {
        seed,
        ..StackConfig::default()
    };
    Benchmark {
        source,
        target,
        plan,
        config,
    }
}

/// Shared extractor of width 8 and two width-8 substructures.
pub fn small_architecture(input_dim: usize) -> Architecture {
    Architecture {
        input_dim,
        shared: vec![8],
        branches: vec![vec![8], vec![8, 8]],
        classifier_hidden: vec![],
    }
}
