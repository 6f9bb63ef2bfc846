//! K-means over lab embeddings and automatic elbow selection of `k`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::numeric::Tensor;
use crate::seed::{self, stream};
use crate::{Error, Result};

pub const DEFAULT_MAX_ITERS: usize = 200;
pub const DEFAULT_RESTARTS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub k: usize,
    /// Cluster of every point; every cluster is non-empty.
    pub assignments: Vec<usize>,
    /// `(k, E)`.
    pub centroids: Tensor<f64>,
    pub wcss: f64,
    /// WCSS after each Lloyd iteration; non-increasing.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn validate(points: &Tensor<f64>, k: usize) -> Result<()> {
    if points.shape().len() != 2 || points.rows() == 0 {
        return Err(Error::shape("kmeans", "points must be a non-empty (N, E) matrix"));
    }
    if k == 0 || k > points.rows() {
        return Err(Error::invalid(format!("k = {k} with {} points", points.rows())));
    }
    if !points.all_finite() {
        return Err(Error::NonFinite { op: "kmeans", node: 0 });
    }
    Ok(())
}

/// k-means++ seeding: the first centre is uniform, later ones are drawn with
/// probability proportional to the squared distance to the nearest centre.
/// When every remaining point coincides with a centre, the lowest-index point
/// not yet chosen is taken.
fn plus_plus(points: &Tensor<f64>, k: usize, seed: u64) -> Vec<usize> {
    let n = points.rows();
    let mut rng = seed::rng(seed, &[stream::KMEANS]);
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(next)));
        }
    }
    chosen
}

/// Lowest-index nearest centroid.
fn nearest_centroid(p: &[f64], centroids: &[f64], e: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(e).enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd iterations from the given initial centroids.
fn lloyd(points: &Tensor<f64>, mut centroids: Vec<f64>, k: usize, max_iters: usize) -> ClusterResult {
    let n = points.rows();
    let e = points.cols();
    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut next: Vec<usize> = (0..n).map(|i| nearest_centroid(points.row(i), &centroids, e).0).collect();
        // refill empty clusters with the point farthest from its centroid,
        // taken only from clusters that can spare one
        loop {
            let mut counts = vec![0usize; k];
            next.iter().for_each(|&c| counts[c] += 1);
            let Some(empty) = counts.iter().position(|&c| c == 0) else { break };
            let mut far: Option<(usize, f64)> = None;
            for (i, &c) in next.iter().enumerate() {
                if counts[c] > 1 {
                    let d = sq_dist(points.row(i), &centroids[c * e..(c + 1) * e]);
                    if far.map_or(true, |(_, m)| d > m) {
                        far = Some((i, d));
                    }
                }
            }
            let (i, _) = far.expect("k <= n leaves a cluster with two points");
            next[i] = empty;
            centroids[empty * e..(empty + 1) * e].copy_from_slice(points.row(i));
        }
        centroids = vec![0.0; k * e];
        let mut counts = vec![0usize; k];
        for (i, &c) in next.iter().enumerate() {
            counts[c] += 1;
            for (acc, &x) in centroids[c * e..(c + 1) * e].iter_mut().zip(points.row(i)) {
                *acc += x;
            }
        }
        for (c, &cnt) in counts.iter().enumerate() {
            centroids[c * e..(c + 1) * e].iter_mut().for_each(|x| *x /= cnt as f64);
        }
        let wcss = next.iter().enumerate().map(|(i, &c)| sq_dist(points.row(i), &centroids[c * e..(c + 1) * e])).sum();
        history.push(wcss);
        let stable = next == assignments;
        assignments = next;
        if stable {
            break;
        }
    }
    ClusterResult {
        k,
        assignments,
        centroids: Tensor::matrix(k, e, centroids).expect("k * e centroids"),
        wcss: *history.last().expect("at least one iteration"),
        history,
    }
}

/// k-means++ seeded Lloyd's algorithm, run until assignments stop changing
/// or `max_iters` iterations.
pub fn kmeans(points: &Tensor<f64>, k: usize, seed: u64, max_iters: usize) -> Result<ClusterResult> {
    validate(points, k)?;
    let init: Vec<f64> = plus_plus(points, k, seed).into_iter().flat_map(|i| points.row(i).to_vec()).collect();
    Ok(lloyd(points, init, k, max_iters))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElbowResult {
    pub k: usize,
    /// `(k, best wcss)` for every `k` in the range.
    pub curve: Vec<(usize, f64)>,
    /// Best clustering for every `k` in the range.
    pub runs: Vec<ClusterResult>,
}

/// Index of the point farthest from the chord joining the curve's endpoints
/// after scaling both axes to `[0, 1]`; near-ties go to the lowest `k`.
pub fn elbow_from_curve(curve: &[(usize, f64)]) -> Result<usize> {
    let (&(k0, w0), &(k1, w1)) = match (curve.first(), curve.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::invalid("empty wcss curve")),
    };
    let w_hi = curve.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let w_lo = curve.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    if k1 == k0 || w_hi - w_lo <= 0.0 {
        return Ok(k0);
    }
    let x = |k: usize| (k - k0) as f64 / (k1 - k0) as f64;
    let y = |w: f64| (w - w_lo) / (w_hi - w_lo);
    let (ax, ay, bx, by) = (0.0, y(w0), 1.0, y(w1));
    let len = Float::sqrt((bx - ax) * (bx - ax) + (by - ay) * (by - ay));
    let dist: Vec<f64> = curve
        .iter()
        .map(|&(k, w)| Float::abs((by - ay) * x(k) - (bx - ax) * y(w) + bx * ay - by * ax) / len)
        .collect();
    let best = dist.iter().copied().fold(0.0, f64::max);
    let i = dist.iter().position(|&d| d >= best - 1e-12).expect("non-empty");
    Ok(curve[i].0)
}

/// Sweeps `k_min..=k_max`, keeping the lowest-WCSS run per `k`.
///
/// Each `k` tries `restarts` k-means++ seedings plus one warm start from the
/// previous `k`'s centroids with the point farthest from them added. The warm
/// start can only lower WCSS, so the curve is non-increasing in `k`.
pub fn elbow_k(points: &Tensor<f64>, k_min: usize, k_max: usize, seed: u64, restarts: usize) -> Result<ElbowResult> {
    if k_min == 0 || k_min > k_max {
        return Err(Error::invalid(format!("invalid k range [{k_min}, {k_max}]")));
    }
    validate(points, k_max)?;
    if restarts == 0 {
        return Err(Error::invalid("restarts must be at least 1"));
    }
    let mut runs: Vec<ClusterResult> = Vec::new();
    for k in k_min..=k_max {
        let mut best: Option<ClusterResult> = None;
        let mut consider = |r: ClusterResult| {
            if best.as_ref().map_or(true, |b| r.wcss < b.wcss) {
                best = Some(r);
            }
        };
        for r in 0..restarts {
            consider(kmeans(points, k, seed::derive(seed, &[k as u64, r as u64]), DEFAULT_MAX_ITERS)?);
        }
        if let Some(prev) = runs.last() {
            let e = points.cols();
            let mut init = prev.centroids.data().to_vec();
            let far = (0..points.rows())
                .map(|i| (i, nearest_centroid(points.row(i), &init, e).1))
                .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            init.extend_from_slice(points.row(far.0));
            consider(lloyd(points, init, k, DEFAULT_MAX_ITERS));
        }
        runs.push(best.expect("at least one restart"));
    }
    let curve: Vec<(usize, f64)> = runs.iter().map(|r| (r.k, r.wcss)).collect();
    Ok(ElbowResult {
        k: elbow_from_curve(&curve)?,
        curve,
        runs,
    })
}
