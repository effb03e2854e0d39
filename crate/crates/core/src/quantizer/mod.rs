//! Hierarchical residual k-means turning item embeddings into code
//! sequences, and the code table used for decoding.

mod kmeans;
mod table;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::EmbeddingMatrix;
use crate::error::{invalid, Error, Result};
use crate::numerics::seeded_rng;

pub use kmeans::{kmeans, lloyd, nearest, KMeans, MAX_ITERATIONS};
pub use table::{Trie, TrieNode, UnicodeTable};

/// Per-level centroids. A level may hold fewer than `k` live centroids
/// when clusters emptied out during fitting.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebooks {
    pub k: usize,
    pub dim: usize,
    pub seed: u64,
    levels: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct CodebookManifest {
    k: usize,
    levels: usize,
    dim: usize,
    seed: u64,
    live: Vec<usize>,
    files: Vec<String>,
}

impl Codebooks {
    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn live(&self, level: usize) -> usize {
        self.levels[level].len() / self.dim
    }

    pub fn centroid(&self, level: usize, code: usize) -> &[f64] {
        &self.levels[level][code * self.dim..(code + 1) * self.dim]
    }

    pub fn level(&self, level: usize) -> &[f64] {
        &self.levels[level]
    }

    /// Sum of the centroids selected by the base levels of `code`.
    pub fn reconstruct(&self, code: &[u32]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (l, &c) in code.iter().take(self.n_levels()).enumerate() {
            for (o, x) in out.iter_mut().zip(self.centroid(l, c as usize)) {
                *o += x;
            }
        }
        out
    }

    /// Writes one `UNGE` file per level plus `codebooks.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        for (l, c) in self.levels.iter().enumerate() {
            let file = format!("level{l}.unge");
            let data = c.iter().map(|&v| v as f32).collect();
            EmbeddingMatrix::new(self.live(l), self.dim, data)?.save(&dir.join(&file))?;
            files.push(file);
        }
        let m = CodebookManifest {
            k: self.k,
            levels: self.n_levels(),
            dim: self.dim,
            seed: self.seed,
            live: (0..self.n_levels()).map(|l| self.live(l)).collect(),
            files,
        };
        let path = dir.join("codebooks.json");
        fs::write(&path, serde_json::to_string_pretty(&m)?).map_err(|e| Error::io(&path, e))
    }

    /// Reads codebooks written by [`Codebooks::save`] (values as stored in
    /// `f32`).
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("codebooks.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: CodebookManifest = serde_json::from_str(&text)?;
        if m.files.len() != m.levels {
            return Err(Error::format(&path, "level count does not match file list"));
        }
        let mut levels = Vec::new();
        for f in &m.files {
            let e = EmbeddingMatrix::load(&dir.join(f))?;
            if e.dim() != m.dim {
                return Err(Error::format(&path, format!("{f} has width {}", e.dim())));
            }
            levels.push(e.data().iter().map(|&v| v as f64).collect());
        }
        Ok(Self {
            k: m.k,
            dim: m.dim,
            seed: m.seed,
            levels,
        })
    }
}

/// Diagnostics of a fit.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FitReport {
    pub live_centroids: Vec<usize>,
    pub lloyd_iterations: Vec<usize>,
    /// Objective after every assignment pass, per level.
    pub objective: Vec<Vec<f64>>,
    pub n_disambiguated: usize,
}

/// Fitted quantizer state.
#[derive(Clone, Debug)]
pub struct Quantized {
    pub codebooks: Codebooks,
    pub table: UnicodeTable,
    /// Residuals left after the last level, row-major `[n, dim]`.
    pub residuals: Vec<f64>,
    pub report: FitReport,
}

/// Hierarchical k-means: every level clusters all current residuals with a
/// shared codebook, assigns each item its nearest centroid and subtracts it.
pub fn fit(e: &EmbeddingMatrix, k: usize, levels: usize, seed: u64) -> Result<Quantized> {
    if e.n_items() == 0 || e.dim() == 0 {
        return Err(invalid!("cannot quantise an empty embedding matrix"));
    }
    if k == 0 || levels == 0 {
        return Err(invalid!(
            "need k >= 1 and levels >= 1, got k={k}, levels={levels}"
        ));
    }
    let dim = e.dim();
    let n = e.n_items();
    let mut rng = seeded_rng(seed);
    let mut residuals: Vec<f64> = e.data().iter().map(|&v| v as f64).collect();
    let mut codes = vec![Vec::with_capacity(levels + 1); n];
    let mut books = Vec::with_capacity(levels);
    let mut report = FitReport::default();
    for _ in 0..levels {
        let km = kmeans(&residuals, dim, k, &mut rng)?;
        for (i, &a) in km.assignment.iter().enumerate() {
            codes[i].push(a as u32);
            let c = km.centroid(a);
            for (r, x) in residuals[i * dim..(i + 1) * dim].iter_mut().zip(c) {
                *r -= x;
            }
        }
        report.live_centroids.push(km.k());
        report.lloyd_iterations.push(km.iterations);
        report.objective.push(km.objective.clone());
        books.push(km.centroids);
    }
    let table = UnicodeTable::disambiguate(codes)?;
    report.n_disambiguated = table.n_disambiguated();
    Ok(Quantized {
        codebooks: Codebooks {
            k,
            dim,
            seed,
            levels: books,
        },
        table,
        residuals,
        report,
    })
}

/// Mean squared norm of `v_i - sum_l C^l[c_i^l]` over items.
pub fn quantization_error(
    e: &EmbeddingMatrix,
    books: &Codebooks,
    table: &UnicodeTable,
) -> Result<f64> {
    if e.dim() != books.dim {
        return Err(invalid!(
            "embedding width {} does not match codebook width {}",
            e.dim(),
            books.dim
        ));
    }
    if e.n_items() != table.n_items() {
        return Err(invalid!(
            "{} embeddings for {} codes",
            e.n_items(),
            table.n_items()
        ));
    }
    let mut total = 0.0;
    for i in 0..e.n_items() {
        let rec = books.reconstruct(table.code(i));
        total += e
            .row(i)
            .iter()
            .zip(&rec)
            .map(|(&v, r)| (v as f64 - r).powi(2))
            .sum::<f64>();
    }
    Ok(total / e.n_items() as f64)
}

/// Uniformly random codes in `[0, k)` per level, disambiguated like [`fit`].
///
/// With `exhaustive`, distinct code sequences are drawn without replacement
/// from all `k^levels` combinations, so no disambiguation is ever needed.
pub fn random_assignment(
    n_items: usize,
    k: usize,
    levels: usize,
    seed: u64,
    exhaustive: bool,
) -> Result<UnicodeTable> {
    if n_items == 0 || k == 0 || levels == 0 {
        return Err(invalid!(
            "random assignment needs n_items, k and levels >= 1"
        ));
    }
    let mut rng = seeded_rng(seed);
    let codes = if exhaustive {
        let total = (k as u128)
            .checked_pow(levels as u32)
            .filter(|&t| t <= 1 << 24);
        let total = total
            .ok_or_else(|| invalid!("k^levels is too large for exhaustive assignment"))?
            as usize;
        if n_items > total {
            return Err(invalid!(
                "{n_items} items do not fit into {total} distinct codes"
            ));
        }
        let mut all: Vec<usize> = (0..total).collect();
        all.shuffle(&mut rng);
        all[..n_items]
            .iter()
            .map(|&x| {
                let mut code = vec![0u32; levels];
                let mut rest = x;
                for l in (0..levels).rev() {
                    code[l] = (rest % k) as u32;
                    rest /= k;
                }
                code
            })
            .collect()
    } else {
        (0..n_items)
            .map(|_| (0..levels).map(|_| rng.random_range(0..k) as u32).collect())
            .collect()
    };
    UnicodeTable::disambiguate(codes)
}
