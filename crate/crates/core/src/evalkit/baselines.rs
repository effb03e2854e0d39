use nalgebra::{DMatrix, SymmetricEigen};

use crate::corpus::EmbeddingMatrix;
use crate::error::{invalid, Result};

/// Principal components of a matrix's rows.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Every eigenvalue of the (1/n) covariance, descending.
    pub eigenvalues: Vec<f64>,
    /// Unit eigenvectors matching `eigenvalues`, one per entry.
    pub components: Vec<Vec<f64>>,
}

impl Pca {
    pub fn fit(x: &EmbeddingMatrix) -> Result<Self> {
        let (n, d) = (x.n_items(), x.dim());
        if n == 0 || d == 0 {
            return Err(invalid!("PCA of an empty matrix"));
        }
        let mut mean = vec![0.0; d];
        for r in x.rows() {
            for (m, &v) in mean.iter_mut().zip(r) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for r in x.rows() {
            let c: Vec<f64> = r.iter().zip(&mean).map(|(&v, m)| v as f64 - m).collect();
            for a in 0..d {
                for b in a..d {
                    cov[(a, b)] += c[a] * c[b];
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = cov[(a, b)] / n as f64;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });
        let eigenvalues = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
        let components = order
            .iter()
            .map(|&k| eig.eigenvectors.column(k).iter().copied().collect())
            .collect();
        Ok(Self {
            mean,
            eigenvalues,
            components,
        })
    }

    /// Number of components carrying variance above a relative tolerance.
    pub fn rank(&self) -> usize {
        let top = self.eigenvalues.first().copied().unwrap_or(0.0);
        self.eigenvalues
            .iter()
            .filter(|&&v| v > top * 1e-10 && v > 0.0)
            .count()
    }

    /// Coordinates of `x` on the first `m` components. Components beyond
    /// the available rank come back as zero columns.
    pub fn project(&self, x: &EmbeddingMatrix, m: usize) -> Vec<Vec<f64>> {
        let live = self.rank().min(m);
        x.rows()
            .map(|r| {
                let c: Vec<f64> = r
                    .iter()
                    .zip(&self.mean)
                    .map(|(&v, mu)| v as f64 - mu)
                    .collect();
                (0..m)
                    .map(|k| {
                        if k < live {
                            self.components[k].iter().zip(&c).map(|(a, b)| a * b).sum()
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Mean squared reconstruction error of `x` from `m` components.
    pub fn reconstruction_error(&self, x: &EmbeddingMatrix, m: usize) -> f64 {
        let coords = self.project(x, m);
        let mut total = 0.0;
        for (r, z) in x.rows().zip(&coords) {
            for (j, &v) in r.iter().enumerate() {
                let rec: f64 =
                    self.mean[j] + (0..m).map(|k| z[k] * self.components[k][j]).sum::<f64>();
                total += (v as f64 - rec).powi(2);
            }
        }
        total / x.n_items() as f64
    }
}

/// Column-wise z-scores; constant columns become zero.
pub fn zscore_columns(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    if n == 0 {
        return Vec::new();
    }
    let d = rows[0].len();
    let mut out = rows.to_vec();
    for j in 0..d {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        for r in out.iter_mut() {
            r[j] = if sd > 0.0 { (r[j] - mean) / sd } else { 0.0 };
        }
    }
    out
}

/// Concatenation baseline: semantic rows reduced by PCA to the width of
/// `collaborative`, both halves z-scored per column, then joined row-wise.
pub fn concat_baseline(
    semantic: &EmbeddingMatrix,
    collaborative: &EmbeddingMatrix,
) -> Result<EmbeddingMatrix> {
    if semantic.n_items() != collaborative.n_items() {
        return Err(invalid!(
            "semantic has {} rows, collaborative {}",
            semantic.n_items(),
            collaborative.n_items()
        ));
    }
    let dc = collaborative.dim();
    let pca = Pca::fit(semantic)?;
    if pca.rank() < dc {
        log::warn!(
            "semantic PCA has rank {} < {dc}; padding the remaining components with zeros",
            pca.rank()
        );
    }
    let s = zscore_columns(&pca.project(semantic, dc));
    let c_rows: Vec<Vec<f64>> = collaborative
        .rows()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect();
    let c = zscore_columns(&c_rows);
    let mut data = Vec::with_capacity(semantic.n_items() * 2 * dc);
    for (a, b) in s.iter().zip(&c) {
        data.extend(a.iter().map(|&v| v as f32));
        data.extend(b.iter().map(|&v| v as f32));
    }
    EmbeddingMatrix::new(semantic.n_items(), 2 * dc, data)
}
