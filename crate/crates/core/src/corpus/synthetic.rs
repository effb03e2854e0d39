use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EmbeddingMatrix, InteractionCorpus};
use crate::error::{invalid, Result};
use crate::numerics::seeded_rng;

/// Planted-structure corpus: items grouped into categories, users drifting
/// between categories along a Markov chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_categories: usize,
    pub items_per_category: usize,
    pub n_users: usize,
    pub sequence_length: usize,
    /// Probability that the next item stays in the current category.
    pub within_category_transition_prob: f64,
    pub embedding_noise_std: f64,
    /// Width of the generated semantic embeddings.
    pub semantic_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_categories: 8,
            items_per_category: 32,
            n_users: 2000,
            sequence_length: 20,
            within_category_transition_prob: 0.9,
            embedding_noise_std: 0.1,
            semantic_dim: 64,
            seed: 2024,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_categories", self.n_categories),
            ("items_per_category", self.items_per_category),
            ("n_users", self.n_users),
            ("semantic_dim", self.semantic_dim),
        ] {
            if v == 0 {
                return Err(invalid!("synthetic {name} must be >= 1"));
            }
        }
        if self.sequence_length < 3 {
            return Err(invalid!(
                "synthetic sequence_length must be >= 3, got {}",
                self.sequence_length
            ));
        }
        let p = self.within_category_transition_prob;
        if !(0.0..=1.0).contains(&p) {
            return Err(invalid!(
                "within_category_transition_prob {p} outside [0, 1]"
            ));
        }
        if !(self.embedding_noise_std >= 0.0 && self.embedding_noise_std.is_finite()) {
            return Err(invalid!(
                "embedding_noise_std must be finite and >= 0, got {}",
                self.embedding_noise_std
            ));
        }
        Ok(())
    }

    pub fn n_items(&self) -> usize {
        self.n_categories * self.items_per_category
    }
}

/// Output of [`generate_synthetic`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub corpus: InteractionCorpus,
    pub semantic: EmbeddingMatrix,
    /// Category of every item index.
    pub categories: Vec<usize>,
    /// Unit-norm centroid of every category.
    pub centroids: Vec<Vec<f32>>,
}

/// Generates a corpus and its semantic embeddings deterministically from
/// `spec.seed`.
///
/// Item `i` belongs to category `i / items_per_category`. Its embedding is
/// the category centroid plus isotropic Gaussian noise. Centroids are
/// orthonormal when `n_categories <= semantic_dim` and random unit vectors
/// otherwise. A sequence starts in a uniform category; each step stays with
/// the transition probability and otherwise jumps to a uniformly chosen
/// *different* category, so the persistence rate equals that probability.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed);
    let centroids = category_centroids(spec.n_categories, spec.semantic_dim, &mut rng);

    let n_items = spec.n_items();
    let noise = Normal::new(0.0, spec.embedding_noise_std).map_err(|e| invalid!("{e}"))?;
    let mut data = Vec::with_capacity(n_items * spec.semantic_dim);
    let mut categories = Vec::with_capacity(n_items);
    for i in 0..n_items {
        let c = i / spec.items_per_category;
        categories.push(c);
        for &v in &centroids[c] {
            let eps = if spec.embedding_noise_std > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            data.push((v as f64 + eps) as f32);
        }
    }
    let semantic = EmbeddingMatrix::new(n_items, spec.semantic_dim, data)?;

    let mut sequences = Vec::with_capacity(spec.n_users);
    for _ in 0..spec.n_users {
        let mut cat = rng.random_range(0..spec.n_categories);
        let mut seq = Vec::with_capacity(spec.sequence_length);
        for t in 0..spec.sequence_length {
            if t > 0
                && spec.n_categories > 1
                && !rng.random_bool(spec.within_category_transition_prob)
            {
                let jump = rng.random_range(0..spec.n_categories - 1);
                cat = if jump >= cat { jump + 1 } else { jump };
            }
            let item = cat * spec.items_per_category + rng.random_range(0..spec.items_per_category);
            seq.push(item);
        }
        sequences.push(seq);
    }
    let item_tokens = (0..n_items).map(|i| format!("item{i}")).collect();
    let user_tokens = (0..spec.n_users).map(|u| format!("user{u}")).collect();
    let corpus = InteractionCorpus::new(item_tokens, user_tokens, sequences)?;
    Ok(SyntheticCorpus {
        corpus,
        semantic,
        categories,
        centroids,
    })
}

fn category_centroids(n: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f32>> {
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| gauss.sample(rng)).collect();
        if basis.len() < dim {
            // Gram-Schmidt against the directions drawn so far
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    basis
        .into_iter()
        .map(|v| v.into_iter().map(|x| x as f32).collect())
        .collect()
}
