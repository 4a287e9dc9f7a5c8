//! Independent scalar-loop references used across the integration tests.
#![allow(dead_code)]

use exemplar_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.gen_range(lo..hi)).collect(), shape).unwrap()
}

pub fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / norm).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Eigenvalues of a symmetric `n×n` matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Largest singular value of a row-major `rows×cols` matrix.
pub fn top_singular_value(m: &[f64], rows: usize, cols: usize) -> f64 {
    // Gram matrix on the smaller side.
    let (n, gram) = if rows <= cols {
        let g = (0..rows * rows)
            .map(|ij| {
                let (i, j) = (ij / rows, ij % rows);
                (0..cols).map(|k| m[i * cols + k] * m[j * cols + k]).sum()
            })
            .collect();
        (rows, g)
    } else {
        let g = (0..cols * cols)
            .map(|ij| {
                let (i, j) = (ij / cols, ij % cols);
                (0..rows).map(|k| m[k * cols + i] * m[k * cols + j]).sum()
            })
            .collect();
        (cols, g)
    };
    symmetric_eigenvalues(gram, n).into_iter().fold(0.0, f64::max).max(0.0).sqrt()
}

/// Cosine of channel-centred rows; `q` is `n×c`, `k` is `m×c`, result `n×m`.
pub fn cosine_oracle(q: &[f64], k: &[f64], n: usize, m: usize, c: usize) -> Vec<f64> {
    let centre = |row: &[f64]| -> Vec<f64> {
        let mean = row.iter().sum::<f64>() / c as f64;
        let centred: Vec<f64> = row.iter().map(|v| v - mean).collect();
        let norm = centred.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
        centred.iter().map(|v| v / norm).collect()
    };
    let qs: Vec<Vec<f64>> = (0..n).map(|i| centre(&q[i * c..(i + 1) * c])).collect();
    let ks: Vec<Vec<f64>> = (0..m).map(|j| centre(&k[j * c..(j + 1) * c])).collect();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut dot = 0.0;
            for ch in 0..c {
                dot += qs[i][ch] * ks[j][ch];
            }
            out[i * m + j] = dot;
        }
    }
    out
}

/// Row softmax of `alpha · masked` (`n×m`) applied to values `v` (`m×c`).
/// Returns `(weights, warped)`.
pub fn warp_oracle(masked: &[f64], v: &[f64], n: usize, m: usize, c: usize, alpha: f64) -> (Vec<f64>, Vec<f64>) {
    let mut weights = vec![0.0; n * m];
    let mut warped = vec![0.0; n * c];
    for i in 0..n {
        let row = &masked[i * m..(i + 1) * m];
        let peak = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|x| (alpha * (x - peak)).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..m {
            weights[i * m + j] = e[j] / z;
        }
        for ch in 0..c {
            let mut acc = 0.0;
            for j in 0..m {
                acc += weights[i * m + j] * v[j * c + ch];
            }
            warped[i * c + ch] = acc;
        }
    }
    (weights, warped)
}

/// `k×k` block mean of a `[C, S, S]` image.
pub fn pool_oracle(img: &[f64], c: usize, s: usize, k: usize) -> Vec<f64> {
    let g = s / k;
    let mut out = vec![0.0; c * g * g];
    for ch in 0..c {
        for y in 0..g {
            for x in 0..g {
                let mut acc = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        acc += img[(ch * s + y * k + dy) * s + x * k + dx];
                    }
                }
                out[(ch * g + y) * g + x] = acc / (k * k) as f64;
            }
        }
    }
    out
}

/// L1 between `A · pool(y_b)` and `pool(x_b)` over an `h×h` grid; `transpose`
/// uses `Aᵀ`.
pub fn corr_oracle(weights: &[f64], h: usize, y_b: &[f64], x_b: &[f64], c: usize, s: usize, transpose: bool) -> f64 {
    let n = h * h;
    let y = pool_oracle(y_b, c, s, s / h);
    let x = pool_oracle(x_b, c, s, s / h);
    let mut total = 0.0;
    for u in 0..n {
        for ch in 0..c {
            let mut acc = 0.0;
            for v in 0..n {
                let a = if transpose { weights[v * n + u] } else { weights[u * n + v] };
                acc += a * y[ch * n + v];
            }
            total += (acc - x[ch * n + u]).abs();
        }
    }
    total / (n * c) as f64
}

/// `−log(e^{z·z⁺/τ} / (e^{z·z⁺/τ} + Σ e^{z·n/τ}))`.
pub fn info_nce_oracle(z: &[f64], zp: &[f64], negatives: &[Vec<f64>], tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let pos = dot(z, zp) / tau;
    let logits: Vec<f64> = std::iter::once(pos).chain(negatives.iter().map(|n| dot(z, n) / tau)).collect();
    let peak = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = peak + logits.iter().map(|l| (l - peak).exp()).sum::<f64>().ln();
    lse - pos
}
