use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::EmbeddingMatrix;
use crate::error::{invalid, Result};
use crate::numerics::{
    attention_mask, seeded_rng, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamId,
    ParamStore, Tape, Tensor, Var,
};

const CHECKPOINT_KIND: &str = "fusion";

/// Which terms sit in the alignment softmax denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignDenominator {
    /// Positive plus in-batch negatives.
    #[default]
    Inclusive,
    /// In-batch negatives only.
    Exclusive,
}

/// Stage I architecture and training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Collaborative (and integrated) embedding width.
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub max_history: usize,
    /// Alignment temperature.
    pub tau: f64,
    /// Weight of the alignment loss.
    pub alpha: f64,
    pub denominator: AlignDenominator,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            dim: 96,
            heads: 6,
            hidden: 256,
            max_history: crate::corpus::DEFAULT_HISTORY,
            tau: 1.0,
            alpha: 1.0,
            denominator: AlignDenominator::Inclusive,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 || self.max_history == 0 {
            return Err(invalid!("fusion dim, hidden and max_history must be >= 1"));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(invalid!(
                "fusion dim {} is not divisible by {} heads",
                self.dim,
                self.heads
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid!("tau must be > 0, got {}", self.tau));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(invalid!("alpha must be >= 0, got {}", self.alpha));
        }
        Ok(())
    }
}

/// Parameters of the adaptation layer mapping semantic rows into the
/// collaborative space.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub linear: Linear,
    /// Produces `[gamma; delta]` from the pre-normalisation activation.
    pub condition: Linear,
    pub semantic_dim: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Architecture {
    config: FusionConfig,
    n_items: usize,
    semantic_dim: Option<usize>,
    seed: u64,
}

/// Item table, attention-pooling history encoder and adaptation layer.
#[derive(Clone, Debug)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub store: ParamStore,
    pub n_items: usize,
    pub seed: u64,
    pub item_table: ParamId,
    positions: ParamId,
    query: ParamId,
    attention: MultiHeadAttention,
    norm: LayerNorm,
    ffn: FeedForward,
    pub adapter: Option<Adapter>,
}

impl FusionModel {
    /// Builds a freshly initialised model. The adaptation layer is drawn
    /// from its own random stream, so models with and without it share
    /// the same collaborative initialisation for a given seed.
    pub fn new(
        config: FusionConfig,
        n_items: usize,
        semantic_dim: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if n_items == 0 {
            return Err(invalid!("fusion model needs at least one item"));
        }
        let d = config.dim;
        let mut rng = seeded_rng(seed);
        let mut store = ParamStore::new();
        let item_table = store.xavier("items", n_items, d, &mut rng)?;
        let positions = store.xavier("positions", config.max_history, d, &mut rng)?;
        let query = store.xavier("query", 1, d, &mut rng)?;
        let attention = MultiHeadAttention::new(&mut store, "pool", d, config.heads, &mut rng)?;
        let norm = LayerNorm::new(&mut store, "pool.norm", d)?;
        let ffn = FeedForward::new(&mut store, "pool.ffn", d, config.hidden, &mut rng)?;
        let adapter = match semantic_dim {
            Some(ds) => {
                if ds == 0 {
                    return Err(invalid!("semantic dimension must be >= 1"));
                }
                let mut arng = seeded_rng(seed ^ 0xada7_0000_0000_0001);
                let linear = Linear::new(&mut store, "adapt", ds, d, true, &mut arng)?;
                let weight = store.zeros("adapt.cond.weight", &[d, 2 * d])?;
                let mut init = vec![1.0f32; d];
                init.extend(std::iter::repeat_n(0.0, d));
                let bias = store.add("adapt.cond.bias", Tensor::vector(&init))?;
                Some(Adapter {
                    linear,
                    condition: Linear {
                        weight,
                        bias: Some(bias),
                        in_dim: d,
                        out_dim: 2 * d,
                    },
                    semantic_dim: ds,
                })
            }
            None => None,
        };
        Ok(Self {
            config,
            store,
            n_items,
            seed,
            item_table,
            positions,
            query,
            attention,
            norm,
            ffn,
            adapter,
        })
    }

    pub fn semantic_dim(&self) -> Option<usize> {
        self.adapter.as_ref().map(|a| a.semantic_dim)
    }

    fn adapter(&self) -> Result<&Adapter> {
        self.adapter
            .as_ref()
            .ok_or_else(|| invalid!("model was built without an adaptation layer"))
    }

    /// Adapts `[B, d_s]` semantic rows: `h = x W + b`, then
    /// `gamma(h) * (h - mean) / std + delta(h)`.
    pub fn adapt(&self, tape: &mut Tape, semantic: Var) -> Result<Var> {
        let a = self.adapter()?;
        let s = tape.shape(semantic).to_vec();
        if s.len() != 2 || s[1] != a.semantic_dim {
            return Err(invalid!(
                "adapt expects [B, {}] semantic rows, got {s:?}",
                a.semantic_dim
            ));
        }
        let d = self.config.dim;
        let h = a.linear.forward(tape, semantic)?;
        let n = tape.normalize(h, LayerNorm::STD_FLOOR)?;
        let gd = a.condition.forward(tape, h)?;
        let gamma = tape.slice_last(gd, 0, d)?;
        let delta = tape.slice_last(gd, d, d)?;
        let y = tape.mul(gamma, n)?;
        tape.add(y, delta)
    }

    /// Adapted embeddings of every row of `semantic`.
    pub fn adapt_all(&self, semantic: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        let mut tape = Tape::new(&self.store);
        let x = tape.constant(semantic.to_tensor())?;
        let y = self.adapt(&mut tape, x)?;
        EmbeddingMatrix::new(
            semantic.n_items(),
            self.config.dim,
            tape.value(y).data().to_vec(),
        )
    }

    /// User vectors `[B, d]` for right-truncated histories.
    pub fn encode(&self, tape: &mut Tape, histories: &[&[usize]]) -> Result<Var> {
        let b = histories.len();
        if b == 0 {
            return Err(invalid!("empty history batch"));
        }
        let t_max = self.config.max_history;
        let mut items = Vec::with_capacity(b * t_max);
        let mut pos = Vec::with_capacity(b * t_max);
        let mut lens = Vec::with_capacity(b);
        for h in histories {
            if h.is_empty() {
                return Err(invalid!("empty history"));
            }
            let h = &h[h.len().saturating_sub(t_max)..];
            if let Some(&bad) = h.iter().find(|&&i| i >= self.n_items) {
                return Err(invalid!("history item {bad} out of range"));
            }
            lens.push(h.len());
            for k in 0..t_max {
                if k < h.len() {
                    items.push(h[k]);
                    // recency: the latest item gets position 0
                    pos.push(h.len() - 1 - k);
                } else {
                    items.push(0);
                    pos.push(0);
                }
            }
        }
        let d = self.config.dim;
        let table = tape.param(self.item_table)?;
        let e = tape.gather_rows(table, &items)?;
        let ptab = tape.param(self.positions)?;
        let p = tape.gather_rows(ptab, &pos)?;
        let x = tape.add(e, p)?;
        let x = tape.reshape(x, &[b, t_max, d])?;
        let q = tape.param(self.query)?;
        let q = tape.reshape(q, &[1, 1, d])?;
        let q = tape.tile0(q, b)?;
        let mask = attention_mask(b, self.config.heads, 1, t_max, |bi, _, j| j < lens[bi]);
        let mask = tape.constant(mask)?;
        let pooled = self.attention.forward(tape, q, x, Some(mask))?;
        let pooled = tape.reshape(pooled, &[b, d])?;
        let h = self.norm.forward(tape, pooled)?;
        let h = self.ffn.forward(tape, h)?;
        tape.add(pooled, h)
    }

    /// Full-corpus next-item logits `[B, n_items]`.
    pub fn logits(&self, tape: &mut Tape, histories: &[&[usize]]) -> Result<Var> {
        let u = self.encode(tape, histories)?;
        let table = tape.param(self.item_table)?;
        tape.matmul_with(u, table, true)
    }

    /// Mean cross-entropy of the next item over the whole item set.
    pub fn next_item_loss(
        &self,
        tape: &mut Tape,
        histories: &[&[usize]],
        targets: &[usize],
    ) -> Result<Var> {
        if histories.len() != targets.len() {
            return Err(invalid!(
                "{} histories for {} targets",
                histories.len(),
                targets.len()
            ));
        }
        let logits = self.logits(tape, histories)?;
        tape.cross_entropy(logits, targets)
    }

    /// Alignment loss between the collaborative rows of `items` and the
    /// adapted semantic rows of the same items.
    pub fn alignment_loss(
        &self,
        tape: &mut Tape,
        items: &[usize],
        semantic: &EmbeddingMatrix,
    ) -> Result<Var> {
        let table = tape.param(self.item_table)?;
        let c = tape.gather_rows(table, items)?;
        let mut rows = Vec::with_capacity(items.len() * semantic.dim());
        for &i in items {
            rows.extend_from_slice(semantic.row(i));
        }
        let s = tape.constant(Tensor::new(&[items.len(), semantic.dim()], rows)?)?;
        let t = self.adapt(tape, s)?;
        align_loss(tape, c, t, self.config.tau, self.config.denominator)
    }

    pub fn item_embeddings(&self) -> EmbeddingMatrix {
        let t = self.store.get(self.item_table);
        EmbeddingMatrix::new(self.n_items, self.config.dim, t.data().to_vec())
            .expect("finite parameters")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let arch = Architecture {
            config: self.config.clone(),
            n_items: self.n_items,
            semantic_dim: self.semantic_dim(),
            seed: self.seed,
        };
        checkpoint::save(dir, CHECKPOINT_KIND, &arch, &self.store)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let arch: Architecture = checkpoint::load_architecture(dir, CHECKPOINT_KIND)?;
        let mut model = Self::new(arch.config, arch.n_items, arch.semantic_dim, arch.seed)?;
        checkpoint::load_into(dir, CHECKPOINT_KIND, &mut model.store)?;
        Ok(model)
    }
}

/// InfoNCE over cosine similarities of two aligned `[B, d]` batches, with
/// the diagonal as positives, averaged over rows.
pub fn align_loss(
    tape: &mut Tape,
    c: Var,
    t: Var,
    tau: f64,
    denominator: AlignDenominator,
) -> Result<Var> {
    let (sc, st) = (tape.shape(c).to_vec(), tape.shape(t).to_vec());
    if sc.len() != 2 || sc != st {
        return Err(crate::Error::Shape {
            op: "align_loss",
            lhs: sc,
            rhs: st,
        });
    }
    let b = sc[0];
    if b < 2 {
        return Err(invalid!(
            "alignment needs a batch of at least 2 rows, got {b}"
        ));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(invalid!("tau must be > 0"));
    }
    let cn = tape.l2_normalize(c)?;
    let tn = tape.l2_normalize(t)?;
    let sims = tape.matmul_with(cn, tn, true)?;
    let sims = tape.scale(sims, (1.0 / tau) as f32)?;
    let diag: Vec<usize> = (0..b).collect();
    match denominator {
        AlignDenominator::Inclusive => tape.cross_entropy(sims, &diag),
        AlignDenominator::Exclusive => {
            let mut m = vec![0.0f32; b * b];
            for i in 0..b {
                m[i * b + i] = crate::numerics::MASKED;
            }
            let m = tape.constant(Tensor::new(&[b, b], m)?)?;
            let off = tape.add(sims, m)?;
            let lse = tape.logsumexp(off)?;
            let pos = tape.pick(sims, &diag)?;
            let per_row = tape.sub(lse, pos)?;
            tape.mean(per_row)
        }
    }
}
