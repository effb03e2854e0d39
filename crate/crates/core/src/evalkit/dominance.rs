use std::cmp::Ordering;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::corpus::EmbeddingMatrix;
use crate::error::{invalid, Result};
use crate::numerics::seeded_rng;
use crate::quantizer::kmeans;

/// Default number of clusters for the dominance histograms.
pub const DEFAULT_CLUSTERS: usize = 10;
/// Anchor items used for the relational view when the catalogue is larger.
pub const MAX_ANCHORS: usize = 512;

/// How much an integrated embedding resembles its semantic and
/// collaborative sources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub similarity_semantic: f64,
    pub similarity_collaborative: f64,
    pub kl_s_e: f64,
    pub kl_c_e: f64,
    pub n_clusters: usize,
    /// Clusters left after k-means drops empty ones.
    pub live_clusters: usize,
    pub n_anchors: usize,
}

impl DominanceReport {
    /// Share of the more similar modality.
    pub fn max_share(&self) -> f64 {
        self.similarity_semantic.max(self.similarity_collaborative)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let rows = [
            (
                "similarity_semantic",
                format!("{:.4}", self.similarity_semantic),
            ),
            (
                "similarity_collaborative",
                format!("{:.4}", self.similarity_collaborative),
            ),
            ("kl_s_e", format!("{:.6}", self.kl_s_e)),
            ("kl_c_e", format!("{:.6}", self.kl_c_e)),
            (
                "clusters",
                format!("{}/{}", self.live_clusters, self.n_clusters),
            ),
            ("anchors", self.n_anchors.to_string()),
        ];
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(a, b)| format!("{a:<w$}  {b:>10}\n"))
            .collect()
    }
}

/// Rows re-expressed as cosine similarity to the anchor items of the same
/// matrix, then z-scored per column. This puts matrices of different widths
/// into one shared space.
fn relational(m: &EmbeddingMatrix, anchors: &[usize], name: &str) -> Result<Vec<f64>> {
    let n = m.n_items();
    let rows: Vec<Vec<f64>> = m
        .rows()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect();
    let dim = m.dim();
    let mean: Vec<f64> = (0..dim)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let var: f64 = rows
        .iter()
        .map(|r| {
            r.iter()
                .zip(&mean)
                .map(|(v, mu)| (v - mu).powi(2))
                .sum::<f64>()
        })
        .sum();
    if var <= 0.0 {
        return Err(invalid!("{name} embeddings have zero variance"));
    }
    let norms: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let a = anchors.len();
    let mut out = vec![0.0; n * a];
    for i in 0..n {
        for (k, &j) in anchors.iter().enumerate() {
            let denom = norms[i] * norms[j];
            if denom > 0.0 {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(x, y)| x * y).sum();
                out[i * a + k] = dot / denom;
            }
        }
    }
    let mut live = false;
    for k in 0..a {
        let mu = (0..n).map(|i| out[i * a + k]).sum::<f64>() / n as f64;
        let sd = ((0..n).map(|i| (out[i * a + k] - mu).powi(2)).sum::<f64>() / n as f64).sqrt();
        for i in 0..n {
            let v = &mut out[i * a + k];
            *v = if sd > 1e-12 { (*v - mu) / sd } else { 0.0 };
        }
        live |= sd > 1e-12;
    }
    if !live {
        return Err(invalid!("{name} embeddings have no directional variance"));
    }
    Ok(out)
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn smoothed_histogram(assignment: &[usize], k: usize) -> Vec<f64> {
    let mut h = vec![1.0; k];
    for &c in assignment {
        h[c] += 1.0;
    }
    let total: f64 = h.iter().sum();
    h.iter().map(|v| v / total).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(a, b)| a * (a / b).ln())
        .sum::<f64>()
        .max(0.0)
}

/// KL-based shares of semantic (`s`) and collaborative (`c`) resemblance
/// in `e`.
///
/// Each matrix is mapped to the relational view, the three are pooled and
/// clustered once, and each becomes a +1 smoothed histogram of cluster
/// assignments. The pool order does not depend on which of `s` and `c` is
/// which, so swapping them swaps the shares exactly.
pub fn dominance_similarity(
    s: &EmbeddingMatrix,
    c: &EmbeddingMatrix,
    e: &EmbeddingMatrix,
    n_clusters: usize,
    seed: u64,
) -> Result<DominanceReport> {
    let n = s.n_items();
    if c.n_items() != n || e.n_items() != n {
        return Err(invalid!(
            "item counts differ: S {n}, C {}, E {}",
            c.n_items(),
            e.n_items()
        ));
    }
    if n < 2 {
        return Err(invalid!("dominance needs at least 2 items"));
    }
    if n_clusters < 2 {
        return Err(invalid!("dominance needs at least 2 clusters"));
    }
    let mut rng = seeded_rng(seed);
    let anchors: Vec<usize> = if n <= MAX_ANCHORS {
        (0..n).collect()
    } else {
        let mut a = sample(&mut rng, n, MAX_ANCHORS).into_vec();
        a.sort_unstable();
        a
    };
    let rs = relational(s, &anchors, "semantic")?;
    let rc = relational(c, &anchors, "collaborative")?;
    let re = relational(e, &anchors, "integrated")?;
    let s_first = lexicographic(&rs, &rc).is_le();
    let (first, second) = if s_first { (&rs, &rc) } else { (&rc, &rs) };
    let mut pool = Vec::with_capacity(3 * rs.len());
    pool.extend_from_slice(first);
    pool.extend_from_slice(second);
    pool.extend_from_slice(&re);
    let fit = kmeans(&pool, anchors.len(), n_clusters, &mut rng)?;
    let k = fit.k();
    let h_first = smoothed_histogram(&fit.assignment[..n], k);
    let h_second = smoothed_histogram(&fit.assignment[n..2 * n], k);
    let h_e = smoothed_histogram(&fit.assignment[2 * n..], k);
    let (h_s, h_c) = if s_first {
        (h_first, h_second)
    } else {
        (h_second, h_first)
    };
    let kl_s_e = kl(&h_s, &h_e);
    let kl_c_e = kl(&h_c, &h_e);
    let total = kl_s_e + kl_c_e;
    let (similarity_semantic, similarity_collaborative) = if total > 0.0 {
        (1.0 - kl_s_e / total, 1.0 - kl_c_e / total)
    } else {
        (0.5, 0.5)
    };
    Ok(DominanceReport {
        similarity_semantic,
        similarity_collaborative,
        kl_s_e,
        kl_c_e,
        n_clusters,
        live_clusters: k,
        n_anchors: anchors.len(),
    })
}
