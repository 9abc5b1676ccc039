//! Deliberately naive reference implementations used as test oracles.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saane::config::RatioDirection;
use saane::eval::{is_true_positive, RetrievalResult};
use saane::{PoolMode, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

pub fn assert_all_close(got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!(rel_close(*g, *w, tol), "entry {i}: {g} vs {w}");
    }
}

/// Zero-padded cross-correlation, one multiply per loop iteration.
pub fn conv2d(x: &Tensor<f64>, k: &Tensor<f64>, bias: Option<&[f64]>, pad: usize) -> Vec<f64> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, ks) = (k.shape()[0], k.shape()[2]);
    let mut out = vec![0.0; cout * h * w];
    for co in 0..cout {
        for oy in 0..h {
            for ox in 0..w {
                let mut acc = bias.map_or(0.0, |b| b[co]);
                for ci in 0..cin {
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let iy = oy as isize + ky as isize - pad as isize;
                            let ix = ox as isize + kx as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xv = x.data()[(ci * h + iy as usize) * w + ix as usize];
                            let kv = k.data()[((co * cin + ci) * ks + ky) * ks + kx];
                            acc += xv * kv;
                        }
                    }
                }
                out[(co * h + oy) * w + ox] = acc;
            }
        }
    }
    out
}

fn reduce(values: &[f64], mode: PoolMode) -> f64 {
    match mode {
        PoolMode::Avg => values.iter().sum::<f64>() / values.len() as f64,
        PoolMode::Max => {
            let mut m = values[0];
            for &v in values {
                if v > m {
                    m = v;
                }
            }
            m
        }
    }
}

pub fn pool_spatial(x: &Tensor<f64>, mode: PoolMode) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    (0..c)
        .map(|ch| {
            let mut vals = Vec::new();
            for y in 0..h {
                for xx in 0..w {
                    vals.push(x.data()[(ch * h + y) * w + xx]);
                }
            }
            reduce(&vals, mode)
        })
        .collect()
}

pub fn pool_channel(x: &Tensor<f64>, mode: PoolMode) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::new();
    for y in 0..h {
        for xx in 0..w {
            let vals: Vec<f64> = (0..c).map(|ch| x.data()[(ch * h + y) * w + xx]).collect();
            out.push(reduce(&vals, mode));
        }
    }
    out
}

pub fn matvec(w: &Tensor<f64>, x: &[f64], b: &[f64]) -> Vec<f64> {
    let (m, n) = (w.shape()[0], w.shape()[1]);
    (0..m)
        .map(|i| {
            let mut acc = b[i];
            for j in 0..n {
                acc += w.data()[i * n + j] * x[j];
            }
            acc
        })
        .collect()
}

pub fn mlp(x: &[f64], w1: &Tensor<f64>, b1: &[f64], w2: &Tensor<f64>, b2: &[f64]) -> Vec<f64> {
    let hidden: Vec<f64> = matvec(w1, x, b1).into_iter().map(|v| if v > 0.0 { v } else { 0.0 }).collect();
    matvec(w2, &hidden, b2)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Rank-3 broadcast multiply, indexing each operand with `min(i, extent - 1)`.
pub fn mul_broadcast3(a: &Tensor<f64>, b: &Tensor<f64>) -> (Vec<usize>, Vec<f64>) {
    let shape: Vec<usize> = (0..3).map(|d| a.shape()[d].max(b.shape()[d])).collect();
    let at = |t: &Tensor<f64>, i: usize, j: usize, k: usize| {
        let s = t.shape();
        t.data()[(i.min(s[0] - 1) * s[1] + j.min(s[1] - 1)) * s[2] + k.min(s[2] - 1)]
    };
    let mut out = Vec::new();
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                out.push(at(a, i, j, k) * at(b, i, j, k));
            }
        }
    }
    (shape, out)
}

/// Index of the bin containing pixel `p` when `n` pixels are split into
/// `bins` floor-partitioned bins.
fn bin_of(p: usize, bins: usize, n: usize) -> usize {
    (0..bins).rev().find(|&i| i * n / bins <= p).unwrap()
}

/// Pyramid pooling by scattering each pixel into its bin.
pub fn spp(x: &Tensor<f64>, levels: &[usize], mode: PoolMode) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::new();
    for &n in levels {
        let mut members: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); c]; n * n];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let bin = bin_of(y, n, h) * n + bin_of(xx, n, w);
                    members[bin][ch].push(x.data()[(ch * h + y) * w + xx]);
                }
            }
        }
        for bin in members {
            for vals in bin {
                out.push(reduce(&vals, mode));
            }
        }
    }
    out
}

/// Nearest neighbour by sorting all distances; the sort is stable so equal
/// distances keep database order.
pub fn retrieve(query: &[f64], db: &[Vec<f64>]) -> (usize, f64, f64) {
    let mut d: Vec<(usize, f64)> = db
        .iter()
        .enumerate()
        .map(|(i, e)| (i, e.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()))
        .collect();
    d.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    (d[0].0, d[0].1, d[1].1)
}

/// Per-threshold (accepted, true positives, precision, recall) by direct count.
pub fn confusion(
    results: &[RetrievalResult],
    tolerance: u32,
    thresholds: &[f64],
    direction: RatioDirection,
) -> Vec<(usize, usize, f64, f64)> {
    thresholds
        .iter()
        .map(|&t| {
            let mut accepted = 0;
            let mut tp = 0;
            for r in results {
                let ratio = if r.d2 == 0.0 { 1.0 } else { r.d1 / r.d2 };
                let ok = match direction {
                    RatioDirection::AtMost => ratio <= t,
                    RatioDirection::AtLeast => ratio >= t,
                };
                if ok {
                    accepted += 1;
                    if is_true_positive(r.query_frame, r.best_frame, tolerance) {
                        tp += 1;
                    }
                }
            }
            let precision = if accepted == 0 { 1.0 } else { tp as f64 / accepted as f64 };
            (accepted, tp, precision, tp as f64 / results.len() as f64)
        })
        .collect()
}

/// Area under (precision, recall) points: selection-sort by recall keeping
/// earlier points first on ties, rectangle from recall 0, then trapezoids.
pub fn auc(points: &[(f64, f64)]) -> f64 {
    let mut left: Vec<(usize, (f64, f64))> = points.iter().copied().enumerate().collect();
    let mut ordered = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            let (bi, (_, br)) = left[best];
            let (ii, (_, ir)) = left[i];
            if ir < br || (ir == br && ii < bi) {
                best = i;
            }
        }
        ordered.push(left.remove(best).1);
    }
    let mut area = ordered[0].0 * ordered[0].1;
    for i in 1..ordered.len() {
        area += (ordered[i].1 - ordered[i - 1].1) * (ordered[i].0 + ordered[i - 1].0) / 2.0;
    }
    area
}

/// Random orthogonal matrix via Gram–Schmidt on a Gaussian-ish matrix.
pub fn random_rotation(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    q
}

pub fn rotate(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// Points drawn uniformly on the sphere of radius `alpha`.
pub fn sphere_points(rng: &mut ChaCha8Rng, count: usize, dim: usize, alpha: f64) -> Vec<Vec<f64>> {
    use rand_distr::StandardNormal;
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.into_iter().map(|a| alpha * a / n).collect()
        })
        .collect()
}
