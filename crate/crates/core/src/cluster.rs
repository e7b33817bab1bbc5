//! K-Means topic clustering with inertia and silhouette diagnostics.
//!
//! Fitting runs Lloyd iterations from a k-means++ seeding, then a
//! single-point-move refinement pass that only accepts strict decreases
//! in inertia, and finally re-runs Lloyd assignment so every point sits
//! at its nearest centroid (lowest id on ties).

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::sq_dist;

pub const DEFAULT_CLUSTERS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    /// Independent seeded restarts; the lowest-inertia fit wins.
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_CLUSTERS,
            max_iter: 300,
            tol: 1e-10,
            seed: 0,
            restarts: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each Lloyd update.
    pub history: Vec<f64>,
}

/// Index of the nearest centroid, lowest index on ties.
pub fn assign(point: &[f64], centroids: &[Vec<f64>]) -> Result<usize> {
    let mut best = (usize::MAX, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        if centroid.len() != point.len() {
            return Err(Error::DimensionMismatch {
                expected: centroid.len(),
                got: point.len(),
            });
        }
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    if best.0 == usize::MAX {
        return Err(Error::EmptyInput("no centroids".into()));
    }
    Ok(best.0)
}

pub fn inertia(points: &[Vec<f64>], labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points.iter().zip(labels).map(|(p, &l)| sq_dist(p, &centroids[l])).sum()
}

fn means(points: &[Vec<f64>], labels: &[usize], k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, x) in sums[l].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            for v in s.iter_mut() {
                *v /= n as f64;
            }
        }
    }
    sums
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Gives every empty cluster the point farthest from its own centroid.
fn repair_empty(points: &[Vec<f64>], labels: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let far = (0..points.len()).filter(|&i| counts[labels[i]] > 1).max_by(|&a, &b| {
            let da = sq_dist(&points[a], &centroids[labels[a]]);
            let db = sq_dist(&points[b], &centroids[labels[b]]);
            da.partial_cmp(&db).unwrap().then(b.cmp(&a))
        });
        let Some(i) = far else { return };
        labels[i] = empty;
        centroids[empty] = points[i].clone();
    }
}

fn assign_all(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| assign(p, centroids).expect("dimensions checked at fit"))
        .collect()
}

/// Moves single points between clusters while that strictly lowers inertia.
fn refine(points: &[Vec<f64>], labels: &mut [usize], centroids: &mut Vec<Vec<f64>>) {
    let k = centroids.len();
    let dim = points[0].len();
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    for _pass in 0..100 {
        let mut moved = false;
        for i in 0..points.len() {
            let a = labels[i];
            if counts[a] <= 1 {
                continue;
            }
            let na = counts[a] as f64;
            let cost_out = na / (na - 1.0) * sq_dist(&points[i], &centroids[a]);
            let mut best = (a, 0.0);
            for b in (0..k).filter(|&b| b != a) {
                let nb = counts[b] as f64;
                let delta = nb / (nb + 1.0) * sq_dist(&points[i], &centroids[b]) - cost_out;
                if delta < best.1 - 1e-12 {
                    best = (b, delta);
                }
            }
            let b = best.0;
            if b == a {
                continue;
            }
            labels[i] = b;
            counts[a] -= 1;
            counts[b] += 1;
            for d in 0..dim {
                let x = points[i][d];
                centroids[a][d] = (centroids[a][d] * na - x) / (na - 1.0);
                let nb = counts[b] as f64;
                centroids[b][d] = (centroids[b][d] * (nb - 1.0) + x) / nb;
            }
            moved = true;
        }
        if !moved {
            break;
        }
    }
    *centroids = means(points, labels, k, dim);
}

/// One seeded fit: k-means++ seeding, Lloyd iterations, refinement.
pub fn kmeans_fit(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeansFit> {
    if k == 0 || points.len() < k {
        return Err(Error::Validation(format!(
            "k-means needs at least k={k} points, got {}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: p.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(points, k, &mut rng);
    let mut labels = assign_all(points, &centroids);
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        repair_empty(points, &mut labels, &mut centroids);
        let updated = means(points, &labels, k, dim);
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        history.push(inertia(points, &labels, &centroids));
        let next = assign_all(points, &centroids);
        let stable = next == labels;
        labels = next;
        if stable || shift < tol {
            break;
        }
    }
    refine(points, &mut labels, &mut centroids);
    // settle: nearest-centroid assignment must be a fixpoint
    for _ in 0..max_iter.max(1) {
        let next = assign_all(points, &centroids);
        if next == labels {
            break;
        }
        labels = next;
        repair_empty(points, &mut labels, &mut centroids);
        centroids = means(points, &labels, k, dim);
    }
    let total = inertia(points, &labels, &centroids);
    Ok(KMeansFit {
        centroids,
        labels,
        inertia: total,
        iterations,
        history,
    })
}

/// Best of `restarts` fits seeded `seed, seed+1, …`.
pub fn kmeans_fit_restarts(points: &[Vec<f64>], cfg: &KMeansConfig) -> Result<KMeansFit> {
    let mut best: Option<KMeansFit> = None;
    for r in 0..cfg.restarts.max(1) {
        let fit = kmeans_fit(points, cfg.k, cfg.seed.wrapping_add(r as u64), cfg.max_iter, cfg.tol)?;
        if best.as_ref().map_or(true, |b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Silhouette {
    pub per_point: Vec<f64>,
    /// Mean score of each cluster present in the labels.
    pub per_cluster: BTreeMap<usize, f64>,
    pub mean: f64,
}

/// Standard silhouette with Euclidean distance; singleton clusters score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<Silhouette> {
    if points.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: points.len(),
            got: labels.len(),
        });
    }
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::Validation("silhouette needs at least two clusters".into()));
    }
    let n = points.len();
    let mut per_point = vec![0.0; n];
    let mut sums = vec![0.0; k];
    for i in 0..n {
        let own = labels[i];
        if sizes[own] <= 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if j != i {
                sums[labels[j]] += sq_dist(&points[i], &points[j]).sqrt();
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        per_point[i] = if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    let mut per_cluster = BTreeMap::new();
    for c in (0..k).filter(|&c| sizes[c] > 0) {
        let s: f64 = (0..n).filter(|&i| labels[i] == c).map(|i| per_point[i]).sum();
        per_cluster.insert(c, s / sizes[c] as f64);
    }
    let mean = per_point.iter().sum::<f64>() / n as f64;
    Ok(Silhouette {
        per_point,
        per_cluster,
        mean,
    })
}

/// Fitted topic clusters over named points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: BTreeMap<String, usize>,
    pub sizes: Vec<usize>,
    pub inertia: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReportLine {
    pub cluster: usize,
    pub size: usize,
    pub inertia: f64,
    pub silhouette: Option<f64>,
    /// Ids of the fitted points nearest the centroid.
    pub representatives: Vec<String>,
}

impl ClusterModel {
    pub fn fit(ids: &[String], points: &[Vec<f64>], cfg: &KMeansConfig) -> Result<Self> {
        if ids.len() != points.len() {
            return Err(Error::DimensionMismatch {
                expected: ids.len(),
                got: points.len(),
            });
        }
        let fit = kmeans_fit_restarts(points, cfg)?;
        let mut sizes = vec![0; cfg.k];
        for &l in &fit.labels {
            sizes[l] += 1;
        }
        Ok(Self {
            k: cfg.k,
            centroids: fit.centroids,
            assignments: ids.iter().cloned().zip(fit.labels).collect(),
            sizes,
            inertia: fit.inertia,
        })
    }

    pub fn assign(&self, point: &[f64]) -> Result<usize> {
        assign(point, &self.centroids)
    }

    pub fn cluster_of(&self, id: &str) -> Option<usize> {
        self.assignments.get(id).copied()
    }

    /// Per-cluster report over the fitted points.
    pub fn report(&self, ids: &[String], points: &[Vec<f64>], top: usize) -> Result<Vec<ClusterReportLine>> {
        let labels: Vec<usize> = ids
            .iter()
            .map(|id| {
                self.cluster_of(id)
                    .ok_or_else(|| Error::Validation(format!("point {id} was not part of the fit")))
            })
            .collect::<Result<_>>()?;
        let sil = silhouette(points, &labels).ok();
        let mut lines = Vec::with_capacity(self.k);
        for c in 0..self.k {
            let mut members: Vec<(f64, &String)> = ids
                .iter()
                .zip(points)
                .zip(&labels)
                .filter(|(_, &l)| l == c)
                .map(|((id, p), _)| (sq_dist(p, &self.centroids[c]), id))
                .collect();
            members.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(b.1)));
            lines.push(ClusterReportLine {
                cluster: c,
                size: members.len(),
                inertia: members.iter().map(|m| m.0).sum(),
                silhouette: sil.as_ref().and_then(|s| s.per_cluster.get(&c).copied()),
                representatives: members.iter().take(top).map(|m| m.1.clone()).collect(),
            });
        }
        Ok(lines)
    }
}

/// Inertia of the best fit for each candidate `k` (elbow diagnostic).
pub fn inertia_sweep(points: &[Vec<f64>], ks: &[usize], cfg: &KMeansConfig) -> Result<Vec<(usize, f64)>> {
    ks.iter()
        .map(|&k| Ok((k, kmeans_fit_restarts(points, &KMeansConfig { k, ..*cfg })?.inertia)))
        .collect()
}
