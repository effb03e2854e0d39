//! Parameterised building blocks shared by both training stages.

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Result};

/// Additive mask value for disallowed attention links.
pub const MASKED: f32 = -1e9;

/// Affine map `x W + b` applied to the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.xavier(format!("{name}.weight"), in_dim, out_dim, rng)?;
        let bias = if bias {
            Some(store.zeros(format!("{name}.bias"), &[out_dim])?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight)?;
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b)?;
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalisation with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const STD_FLOOR: f32 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.filled(format!("{name}.gain"), &[dim], 1.0)?,
            bias: store.zeros(format!("{name}.bias"), &[dim])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.normalize(x, Self::STD_FLOOR)?;
        let g = tape.param(self.gain)?;
        let b = tape.param(self.bias)?;
        let y = tape.mul(n, g)?;
        tape.add(y, b)
    }
}

/// Two-layer ReLU MLP.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.relu(h)?;
        self.down.forward(tape, h)
    }
}

/// Keys and values already split into heads: `[B * heads, T, head_dim]`.
#[derive(Clone, Copy, Debug)]
pub struct KeyValue {
    pub keys: Var,
    pub values: Var,
    pub batch: usize,
    pub len: usize,
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(invalid!(
                "model dim {dim} is not divisible by {heads} heads"
            ));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng)?,
            key: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng)?,
            value: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng)?,
            out: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng)?,
            heads,
            dim,
        })
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn split_heads(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (b, t) = (s[0], s[1]);
        let x = tape.reshape(x, &[b, t, self.heads, self.head_dim()])?;
        let x = tape.transpose12(x)?;
        tape.reshape(x, &[b * self.heads, t, self.head_dim()])
    }

    fn merge_heads(&self, tape: &mut Tape, x: Var, b: usize, t: usize) -> Result<Var> {
        let x = tape.reshape(x, &[b, self.heads, t, self.head_dim()])?;
        let x = tape.transpose12(x)?;
        tape.reshape(x, &[b, t, self.dim])
    }

    /// Projects a `[B, T, dim]` memory into per-head keys and values.
    pub fn key_value(&self, tape: &mut Tape, x: Var) -> Result<KeyValue> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return Err(invalid!(
                "attention memory must be [B, T, {}], got {s:?}",
                self.dim
            ));
        }
        let k = self.key.forward(tape, x)?;
        let v = self.value.forward(tape, x)?;
        Ok(KeyValue {
            keys: self.split_heads(tape, k)?,
            values: self.split_heads(tape, v)?,
            batch: s[0],
            len: s[1],
        })
    }

    /// Attends `[B, Tq, dim]` queries over `kv`. `mask` is additive with
    /// shape `[B * heads, Tq, Tk]`.
    pub fn attend(&self, tape: &mut Tape, x: Var, kv: &KeyValue, mask: Option<Var>) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[0] != kv.batch {
            return Err(invalid!(
                "attention queries {s:?} do not match memory batch {}",
                kv.batch
            ));
        }
        let (b, tq) = (s[0], s[1]);
        let q = self.query.forward(tape, x)?;
        let q = self.split_heads(tape, q)?;
        let scores = tape.bmm(q, kv.keys, true)?;
        let scores = tape.scale(scores, 1.0 / (self.head_dim() as f32).sqrt())?;
        let scores = match mask {
            Some(m) => tape.add(scores, m)?,
            None => scores,
        };
        let probs = tape.softmax(scores)?;
        let ctx = tape.bmm(probs, kv.values, false)?;
        let ctx = self.merge_heads(tape, ctx, b, tq)?;
        self.out.forward(tape, ctx)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, memory: Var, mask: Option<Var>) -> Result<Var> {
        let kv = self.key_value(tape, memory)?;
        self.attend(tape, x, &kv, mask)
    }
}

/// Builds an additive `[batch * heads, tq, tk]` mask from a predicate over
/// `(batch, query, key)`.
pub fn attention_mask(
    batch: usize,
    heads: usize,
    tq: usize,
    tk: usize,
    allowed: impl Fn(usize, usize, usize) -> bool,
) -> Tensor {
    let mut data = Vec::with_capacity(batch * heads * tq * tk);
    for b in 0..batch {
        let mut block = Vec::with_capacity(tq * tk);
        for i in 0..tq {
            for j in 0..tk {
                block.push(if allowed(b, i, j) { 0.0 } else { MASKED });
            }
        }
        for _ in 0..heads {
            data.extend_from_slice(&block);
        }
    }
    Tensor::new(&[batch * heads, tq, tk], data).expect("mask shape is consistent")
}
