use rand::Rng;

use crate::error::{invalid, Result};

/// Lloyd iteration cap.
pub const MAX_ITERATIONS: usize = 25;

/// Result of one k-means run over row-major `f64` points.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    /// Live centroids, row-major `[k_live, dim]`.
    pub centroids: Vec<f64>,
    pub dim: usize,
    pub assignment: Vec<usize>,
    /// Sum of squared distances after every assignment pass.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

impl KMeans {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim.max(1)
    }

    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.centroids[k * self.dim..(k + 1) * self.dim]
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.chunks(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn assign(points: &[f64], centroids: &[f64], dim: usize) -> (Vec<usize>, f64) {
    let mut total = 0.0;
    let a = points
        .chunks(dim)
        .map(|p| {
            let (k, d) = nearest(p, centroids, dim);
            total += d;
            k
        })
        .collect();
    (a, total)
}

/// k-means++ seeding. Stops early when every point already coincides with
/// a chosen centroid, so fewer than `k` seeds may come back.
fn seed_plus_plus(points: &[f64], dim: usize, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let first = rng.random_range(0..n);
    let mut centroids = points[first * dim..(first + 1) * dim].to_vec();
    let mut d2: Vec<f64> = points.chunks(dim).map(|p| sq_dist(p, &centroids)).collect();
    while centroids.len() / dim < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut r = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            if r < w {
                pick = i;
                break;
            }
            r -= w;
        }
        // guard against landing on a zero-weight point through rounding
        if d2[pick] <= 0.0 {
            pick = d2
                .iter()
                .rposition(|&w| w > 0.0)
                .expect("positive mass exists");
        }
        let c = points[pick * dim..(pick + 1) * dim].to_vec();
        for (w, p) in d2.iter_mut().zip(points.chunks(dim)) {
            *w = w.min(sq_dist(p, &c));
        }
        centroids.extend(c);
    }
    centroids
}

/// Removes centroids without members and renumbers the assignment.
fn drop_empty(centroids: &mut Vec<f64>, assignment: &mut [usize], dim: usize) {
    let k = centroids.len() / dim;
    let mut used = vec![false; k];
    for &a in assignment.iter() {
        used[a] = true;
    }
    if used.iter().all(|&u| u) {
        return;
    }
    let mut remap = vec![usize::MAX; k];
    let mut kept = Vec::with_capacity(centroids.len());
    let mut next = 0;
    for c in 0..k {
        if used[c] {
            remap[c] = next;
            next += 1;
            kept.extend_from_slice(&centroids[c * dim..(c + 1) * dim]);
        }
    }
    for a in assignment.iter_mut() {
        *a = remap[*a];
    }
    *centroids = kept;
}

fn means(points: &[f64], dim: usize, assignment: &[usize], k: usize) -> Vec<f64> {
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.chunks(dim).zip(assignment) {
        counts[a] += 1;
        for (s, x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        for s in &mut sums[c * dim..(c + 1) * dim] {
            *s /= n as f64;
        }
    }
    sums
}

/// Lloyd's algorithm from explicit initial centroids.
pub fn lloyd(points: &[f64], dim: usize, init: Vec<f64>, max_iterations: usize) -> KMeans {
    let mut centroids = init;
    let (mut assignment, obj) = assign(points, &centroids, dim);
    let mut objective = vec![obj];
    let mut iterations = 0;
    for _ in 0..max_iterations {
        iterations += 1;
        drop_empty(&mut centroids, &mut assignment, dim);
        centroids = means(points, dim, &assignment, centroids.len() / dim);
        let (next, obj) = assign(points, &centroids, dim);
        objective.push(obj);
        if next == assignment {
            break;
        }
        assignment = next;
    }
    drop_empty(&mut centroids, &mut assignment, dim);
    KMeans {
        centroids,
        dim,
        assignment,
        objective,
        iterations,
    }
}

/// k-means++ seeded Lloyd iterations over `n x dim` row-major points.
pub fn kmeans(points: &[f64], dim: usize, k: usize, rng: &mut impl Rng) -> Result<KMeans> {
    if dim == 0 || points.is_empty() || !points.len().is_multiple_of(dim) {
        return Err(invalid!("k-means needs a non-empty n x {dim} point set"));
    }
    if k == 0 {
        return Err(invalid!("k-means needs k >= 1"));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(crate::Error::NonFinite {
            op: "kmeans input".into(),
        });
    }
    let init = seed_plus_plus(points, dim, k, rng);
    Ok(lloyd(points, dim, init, MAX_ITERATIONS))
}
