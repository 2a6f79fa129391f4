//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's numerical code.

#![allow(dead_code, clippy::needless_range_loop)]

use popbias::{Dataset, ImageRecord, Label};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Matrix = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Matrix {
    (0..n)
        .map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn to_dmatrix(x: &Matrix) -> nalgebra::DMatrix<f64> {
    let (n, p) = (x.len(), x[0].len());
    nalgebra::DMatrix::from_fn(n, p, |i, j| x[i][j])
}

pub fn dataset_from_rows(x: &Matrix, h: usize, w: usize) -> Dataset {
    let records = x
        .iter()
        .enumerate()
        .map(|(i, row)| ImageRecord {
            id: format!("img-{i:03}"),
            pixels: row.clone(),
            label: if i % 2 == 0 {
                Label::Awake
            } else {
                Label::Drowsy
            },
            group: None,
        })
        .collect();
    Dataset::new(h, w, records).unwrap()
}

pub fn column_means(x: &Matrix) -> Vec<f64> {
    let n = x.len() as f64;
    let p = x[0].len();
    (0..p)
        .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect()
}

pub fn centered(x: &Matrix) -> Matrix {
    let mu = column_means(x);
    x.iter()
        .map(|r| r.iter().zip(&mu).map(|(a, m)| a - m).collect())
        .collect()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues and eigenvectors (as columns of the second value).
pub fn jacobi_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.len();
    let mut a = a.clone();
    let mut v: Matrix = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
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
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

pub struct OraclePca {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
    pub sigma: [f64; 2],
}

fn flip_to_positive_peak(v: &mut [f64]) {
    let mut peak = 0usize;
    for i in 1..v.len() {
        if v[i].abs() > v[peak].abs() {
            peak = i;
        }
    }
    if v[peak] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// PCA through the eigenvectors of the P×P scatter matrix `XcᵀXc`.
pub fn covariance_pca(x: &Matrix) -> OraclePca {
    let xc = centered(x);
    let p = x[0].len();
    let mut scatter = vec![vec![0.0; p]; p];
    for row in &xc {
        for i in 0..p {
            for j in 0..p {
                scatter[i][j] += row[i] * row[j];
            }
        }
    }
    let (vals, vecs) = jacobi_eigen(&scatter);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let comp = |k: usize| {
        let mut v: Vec<f64> = (0..p).map(|i| vecs[i][order[k]]).collect();
        flip_to_positive_peak(&mut v);
        v
    };
    OraclePca {
        mean: column_means(x),
        components: [comp(0), comp(1)],
        sigma: [
            vals[order[0]].max(0.0).sqrt(),
            vals[order[1]].max(0.0).sqrt(),
        ],
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sum over rows of squared projections of the centred data on `basis`.
pub fn captured_energy(x: &Matrix, basis: &[Vec<f64>]) -> f64 {
    centered(x)
        .iter()
        .map(|r| basis.iter().map(|b| dot(r, b).powi(2)).sum::<f64>())
        .sum()
}

/// Gram-Schmidt on two random vectors.
pub fn random_orthonormal_pair(rng: &mut ChaCha8Rng, p: usize) -> [Vec<f64>; 2] {
    let mut a: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
    let na = dot(&a, &a).sqrt();
    a.iter_mut().for_each(|x| *x /= na);
    let mut b: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
    let proj = dot(&a, &b);
    b.iter_mut().zip(&a).for_each(|(x, y)| *x -= proj * y);
    let nb = dot(&b, &b).sqrt();
    b.iter_mut().for_each(|x| *x /= nb);
    [a, b]
}

/// Plain replay of the greedy grid: lattice over the bounding box, top row
/// first, each point taking the nearest free image (lowest index on ties).
pub fn brute_grid(points: &[[f64; 2]], rows: usize, cols: usize) -> Vec<Option<usize>> {
    let xs: Vec<f64> = points.iter().map(|p| p[0]).collect();
    let ys: Vec<f64> = points.iter().map(|p| p[1]).collect();
    let lo_x = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi_x = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo_y = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi_y = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let at = |lo: f64, hi: f64, k: usize, i: usize| {
        if k == 1 {
            (lo + hi) / 2.0
        } else {
            lo + (hi - lo) * (i as f64) / ((k - 1) as f64)
        }
    };
    let mut free: Vec<usize> = (0..points.len()).collect();
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if free.is_empty() {
                out.push(None);
                continue;
            }
            let g = [at(lo_x, hi_x, cols, c), at(hi_y, lo_y, rows, r)];
            let d = |i: usize| (points[i][0] - g[0]).powi(2) + (points[i][1] - g[1]).powi(2);
            let pos = (0..free.len())
                .min_by(|&a, &b| {
                    d(free[a])
                        .total_cmp(&d(free[b]))
                        .then(free[a].cmp(&free[b]))
                })
                .unwrap();
            out.push(Some(free.remove(pos)));
        }
    }
    out
}

/// Mean binary cross-entropy plus `l2·‖w‖²/2`, computed directly.
pub fn logistic_loss(w: &[f64], b: f64, rows: &[Vec<f64>], labels: &[f64], l2: f64) -> f64 {
    let n = rows.len() as f64;
    let mut total = 0.0;
    for (x, &y) in rows.iter().zip(labels) {
        let z = dot(w, x) + b;
        // log(1 + e^z) - y z, written stably
        let softplus = if z > 0.0 {
            z + (-z).exp().ln_1p()
        } else {
            z.exp().ln_1p()
        };
        total += softplus - y * z;
    }
    total / n + 0.5 * l2 * dot(w, w)
}
