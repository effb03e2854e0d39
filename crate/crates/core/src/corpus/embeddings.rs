use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{invalid, Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"UNGE";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Row-major `n_items x dim` matrix of item vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    n_items: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(n_items: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n_items * dim {
            return Err(invalid!(
                "{n_items}x{dim} matrix needs {} values, got {}",
                n_items * dim,
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("embedding row {}", pos / dim.max(1)),
            });
        }
        Ok(Self { n_items, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let t = Tensor::from_rows(rows)?;
        let dim = t.last_dim();
        Self::new(rows.len(), dim, t.into_data())
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.dim.max(1)).take(self.n_items)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.n_items, self.dim], self.data.clone()).expect("consistent shape")
    }

    /// Rows reordered so that row `k` is the row whose token is `order[k]`.
    pub fn reorder(&self, tokens: &[String], order: &[String]) -> Result<Self> {
        if tokens.len() != self.n_items {
            return Err(invalid!(
                "{} tokens for a matrix with {} rows",
                tokens.len(),
                self.n_items
            ));
        }
        let index: std::collections::HashMap<&str, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();
        let mut data = Vec::with_capacity(order.len() * self.dim);
        for tok in order {
            let &r = index
                .get(tok.as_str())
                .ok_or_else(|| invalid!("no embedding for item {tok}"))?;
            data.extend_from_slice(self.row(r));
        }
        Self::new(order.len(), self.dim, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n_items as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::format(path, "truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format(path, "bad magic (expected UNGE)"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != VERSION {
            return Err(Error::format(
                path,
                format!("unsupported version {version}"),
            ));
        }
        let (n, d) = (word(8) as usize, word(12) as usize);
        let expected = HEADER_LEN + 4 * n * d;
        if bytes.len() < expected {
            return Err(Error::format(
                path,
                format!("truncated payload: {} of {} bytes", bytes.len(), expected),
            ));
        }
        if bytes.len() > expected {
            return Err(Error::format(path, "trailing bytes after payload"));
        }
        let data: Vec<f32> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(
                path,
                format!("non-finite value in row {}", pos / d.max(1)),
            ));
        }
        Self::new(n, d, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Saves the matrix plus its companion token file.
    pub fn save_with_tokens(&self, path: &Path, tokens: &[String]) -> Result<()> {
        if tokens.len() != self.n_items {
            return Err(invalid!(
                "{} tokens for {} rows",
                tokens.len(),
                self.n_items
            ));
        }
        self.save(path)?;
        save_tokens(&tokens_path(path), tokens)
    }
}

/// Companion token file of an embedding file: same stem, `.tokens` extension.
pub fn tokens_path(path: &Path) -> PathBuf {
    path.with_extension("tokens")
}

pub fn save_tokens(path: &Path, tokens: &[String]) -> Result<()> {
    let mut s = tokens.join("\n");
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn load_tokens(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .filter(|l| !l.is_empty())
        .collect())
}
