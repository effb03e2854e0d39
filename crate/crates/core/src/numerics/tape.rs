//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value; [`Tape::backward`] walks the nodes in
//! reverse and returns a [`Gradients`] table that a [`ParamStore`] can absorb.
//!
//! Storage is `f32`. Every reduction (sums, means, softmax normalisers, layer
//! statistics, norms) accumulates in `f64`.

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        tb: bool,
    },
    Bmm {
        a: Var,
        b: Var,
        tb: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        s: f32,
    },
    Relu {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LogSoftmax {
        a: Var,
    },
    LogSumExp {
        a: Var,
    },
    Normalize {
        a: Var,
        inv_scale: Vec<f32>,
        clamped: Vec<bool>,
    },
    L2Normalize {
        a: Var,
        norms: Vec<f32>,
        clamped: Vec<bool>,
    },
    Reshape {
        a: Var,
    },
    Transpose12 {
        a: Var,
    },
    SliceLast {
        a: Var,
        start: usize,
    },
    ConcatLast {
        a: Var,
        b: Var,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    Pick {
        a: Var,
        idx: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    Tile0 {
        a: Var,
        times: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` was reachable and
    /// differentiable.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(parameter, gradient)` pairs for every parameter leaf on the tape.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f32])> {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.grads[node].as_deref().map(|g| (id, g)))
    }
}

/// Recording of one forward computation.
pub struct Tape<'s> {
    nodes: Vec<Node>,
    store: Option<&'s ParamStore>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            store: Some(store),
        }
    }

    /// A tape with no parameter store; only [`Tape::leaf`] inputs are available.
    pub fn detached() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: name.to_string(),
            });
        }
        let needs_grad = inputs.iter().any(|v| self.needs(*v));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input tensor. Gradients are tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: "leaf".to_string(),
            });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Trainable parameter from the attached store.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| invalid!("tape has no parameter store"))?;
        let t = store.get(id);
        let value = Tensor::new(t.shape(), t.data().to_vec())?;
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
            needs_grad: true,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a[..., k] x b[k, n]`, or `a[..., k] x b[n, k]^T` when `transpose_b`.
    pub fn matmul_with(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let k = *sa.last().unwrap();
        let (bk, n) = if transpose_b {
            (sb[1], sb[0])
        } else {
            (sb[0], sb[1])
        };
        if k != bk {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let m = self.data(a).len().checked_div(k).unwrap_or(0);
        let mut out = vec![0.0f32; m * n];
        gemm(
            m,
            k,
            n,
            self.data(a),
            false,
            self.data(b),
            transpose_b,
            &mut out,
            false,
        );
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let value = Tensor::new(&shape, out)?;
        self.push(
            value,
            Op::MatMul {
                a,
                b,
                tb: transpose_b,
            },
            &[a, b],
            "matmul",
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_with(a, b, false)
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]` (or `[B, n, k]` transposed).
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::Shape {
            op: "bmm",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (bk, n) = if transpose_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if k != bk {
            return Err(bad());
        }
        let mut out = vec![0.0f32; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                transpose_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let value = Tensor::new(&[batch, m, n], out)?;
        self.push(
            value,
            Op::Bmm {
                a,
                b,
                tb: transpose_b,
            },
            &[a, b],
            "bmm",
        )
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if suffix_repeats(sa, sb).is_none() {
            return Err(Error::Shape {
                op: name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(da.len());
        if !db.is_empty() {
            for chunk in da.chunks(db.len()) {
                out.extend(chunk.iter().zip(db).map(|(&x, &y)| f(x, y)));
            }
        }
        Tensor::new(sa, out)
    }

    /// Elementwise sum; `b` may be a trailing-suffix shape of `a` and is then
    /// broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add { a, b }, &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub { a, b }, &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul { a, b }, &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::new(t.shape(), t.data().iter().map(|x| x * s).collect())?;
        self.push(v, Op::Scale { a, s }, &[a], "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::new(t.shape(), t.data().iter().map(|x| x.max(0.0)).collect())?;
        self.push(v, Op::Relu { a }, &[a], "relu")
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let w = t.last_dim();
        let mut out = vec![0.0f32; t.numel()];
        for (src, dst) in t.data().chunks(w).zip(out.chunks_mut(w)) {
            softmax_row(src, dst);
        }
        let v = Tensor::new(t.shape(), out)?;
        self.push(v, Op::Softmax { a }, &[a], "softmax")
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let w = t.last_dim();
        let mut out = vec![0.0f32; t.numel()];
        for (src, dst) in t.data().chunks(w).zip(out.chunks_mut(w)) {
            let lse = log_sum_exp(src);
            for (d, &x) in dst.iter_mut().zip(src) {
                *d = (x as f64 - lse) as f32;
            }
        }
        let v = Tensor::new(t.shape(), out)?;
        self.push(v, Op::LogSoftmax { a }, &[a], "log_softmax")
    }

    /// Log-sum-exp over the last axis; drops that axis.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let w = t.last_dim();
        if w == 0 {
            return Err(invalid!("logsumexp over an empty axis"));
        }
        let out: Vec<f32> = t.data().chunks(w).map(|r| log_sum_exp(r) as f32).collect();
        let shape = &t.shape()[..t.shape().len().saturating_sub(1)];
        let v = Tensor::new(shape, out)?;
        self.push(v, Op::LogSumExp { a }, &[a], "logsumexp")
    }

    /// `(x - mean) / max(std, floor)` over the last axis (population std).
    pub fn normalize(&mut self, a: Var, floor: f32) -> Result<Var> {
        let t = self.value(a);
        let w = t.last_dim();
        let rows = t.n_rows();
        let mut out = vec![0.0f32; t.numel()];
        let mut inv_scale = Vec::with_capacity(rows);
        let mut clamped = Vec::with_capacity(rows);
        for (src, dst) in t.data().chunks(w).zip(out.chunks_mut(w)) {
            let (mean, std) = mean_std(src);
            let (s, c) = if std < floor as f64 {
                (floor as f64, true)
            } else {
                (std, false)
            };
            for (d, &x) in dst.iter_mut().zip(src) {
                *d = ((x as f64 - mean) / s) as f32;
            }
            inv_scale.push((1.0 / s) as f32);
            clamped.push(c);
        }
        let v = Tensor::new(t.shape(), out)?;
        self.push(
            v,
            Op::Normalize {
                a,
                inv_scale,
                clamped,
            },
            &[a],
            "normalize",
        )
    }

    /// Scales each row (last axis) to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        const EPS: f64 = 1e-8;
        let t = self.value(a);
        let w = t.last_dim();
        let mut out = vec![0.0f32; t.numel()];
        let mut norms = Vec::new();
        let mut clamped = Vec::new();
        for (src, dst) in t.data().chunks(w).zip(out.chunks_mut(w)) {
            let n = src
                .iter()
                .map(|&x| (x as f64) * (x as f64))
                .sum::<f64>()
                .sqrt();
            let (n, c) = if n < EPS { (EPS, true) } else { (n, false) };
            for (d, &x) in dst.iter_mut().zip(src) {
                *d = (x as f64 / n) as f32;
            }
            norms.push(n as f32);
            clamped.push(c);
        }
        let v = Tensor::new(t.shape(), out)?;
        self.push(
            v,
            Op::L2Normalize { a, norms, clamped },
            &[a],
            "l2_normalize",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::new(t.shape(), t.data().to_vec())?.reshape(shape)?;
        self.push(v, Op::Reshape { a }, &[a], "reshape")
    }

    /// Swaps axes 1 and 2 of a 4-D tensor: `[A, B, C, D] -> [A, C, B, D]`.
    pub fn transpose12(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape {
                op: "transpose12",
                lhs: s,
                rhs: vec![],
            });
        }
        let out = transpose12_data(self.data(a), s[0], s[1], s[2], s[3]);
        let v = Tensor::new(&[s[0], s[2], s[1], s[3]], out)?;
        self.push(v, Op::Transpose12 { a }, &[a], "transpose12")
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let w = t.last_dim();
        if start + len > w || t.shape().is_empty() {
            return Err(Error::Shape {
                op: "slice_last",
                lhs: t.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut out = Vec::with_capacity(t.n_rows() * len);
        for r in t.data().chunks(w) {
            out.extend_from_slice(&r[start..start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let v = Tensor::new(&shape, out)?;
        self.push(v, Op::SliceLast { a, start }, &[a], "slice_last")
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::Shape {
                op: "concat_last",
                lhs: sa,
                rhs: sb,
            });
        }
        let (wa, wb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let (da, db) = (self.data(a), self.data(b));
        let rows = da.len().checked_div(wa).unwrap_or(db.len() / wb.max(1));
        let mut out = Vec::with_capacity(rows * (wa + wb));
        for r in 0..rows {
            out.extend_from_slice(&da[r * wa..(r + 1) * wa]);
            out.extend_from_slice(&db[r * wb..(r + 1) * wb]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = wa + wb;
        let v = Tensor::new(&shape, out)?;
        self.push(v, Op::ConcatLast { a, b }, &[a, b], "concat_last")
    }

    /// Rows of a 2-D table selected by index: `[n, d] -> [idx.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: s,
                rhs: vec![idx.len()],
            });
        }
        let (n, d) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(invalid!(
                "gather_rows index {bad} out of range for {n} rows"
            ));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let v = Tensor::new(&[idx.len(), d], out)?;
        self.push(
            v,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            &[table],
            "gather_rows",
        )
    }

    /// One element per row: `out[i] = a[i, idx[i]]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let w = t.last_dim();
        if t.n_rows() != idx.len() || t.shape().is_empty() {
            return Err(Error::Shape {
                op: "pick",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= w) {
            return Err(invalid!("pick index {bad} out of range for width {w}"));
        }
        let out: Vec<f32> = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| t.data()[r * w + c])
            .collect();
        let v = Tensor::new(&[idx.len()], out)?;
        self.push(
            v,
            Op::Pick {
                a,
                idx: idx.to_vec(),
            },
            &[a],
            "pick",
        )
    }

    /// Mean cross-entropy of row-wise logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let w = t.last_dim();
        if t.shape().is_empty() || t.n_rows() != targets.len() || targets.is_empty() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= w) {
            return Err(invalid!("target class {bad} out of range for {w} classes"));
        }
        let mut probs = vec![0.0f32; t.numel()];
        let mut total = 0.0f64;
        for (r, (src, dst)) in t.data().chunks(w).zip(probs.chunks_mut(w)).enumerate() {
            let lse = log_sum_exp(src);
            total += lse - src[targets[r]] as f64;
            for (d, &x) in dst.iter_mut().zip(src) {
                *d = (x as f64 - lse).exp() as f32;
            }
        }
        let v = Tensor::scalar((total / targets.len() as f64) as f32);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.data(a).iter().map(|&x| x as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum { a }, &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let d = self.data(a);
        if d.is_empty() {
            return Err(invalid!("mean of an empty tensor"));
        }
        let s: f64 = d.iter().map(|&x| x as f64).sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s as f32), Op::Mean { a }, &[a], "mean")
    }

    /// Repeats the whole tensor `times` times along axis 0.
    pub fn tile0(&mut self, a: Var, times: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().is_empty() || times == 0 {
            return Err(invalid!("tile0 needs a non-scalar tensor and times >= 1"));
        }
        let mut shape = t.shape().to_vec();
        shape[0] *= times;
        let data = t.data().repeat(times);
        let v = Tensor::new(&shape, data)?;
        self.push(v, Op::Tile0 { a, times }, &[a], "tile0")
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: lv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, tb } => {
                let k = self.value(*a).last_dim();
                let m = self.data(*a).len().checked_div(k).unwrap_or(0);
                let n = node.value.last_dim();
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    // da = g op(b)^T
                    gemm(m, n, k, g, false, self.data(*b), !*tb, &mut da, false);
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    if *tb {
                        let mut db = vec![0.0; n * k];
                        gemm(n, m, k, g, true, self.data(*a), false, &mut db, false);
                        accumulate(grads, *b, db);
                    } else {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, self.data(*a), true, g, false, &mut db, false);
                        accumulate(grads, *b, db);
                    }
                }
            }
            Op::Bmm { a, b, tb } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.last_dim();
                let (da_src, db_src) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &db_src[i * k * n..(i + 1) * k * n],
                            !*tb,
                            &mut da[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &da_src[i * m * k..(i + 1) * m * k];
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if *tb {
                            gemm(n, m, k, gi, true, ai, false, out, false);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, out, false);
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) {
                    -1.0
                } else {
                    1.0
                };
                if self.needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    let w = self.data(*b).len();
                    let db = if w == g.len() {
                        g.iter().map(|&x| sign as f32 * x).collect()
                    } else {
                        let mut db = vec![0.0f64; w];
                        for chunk in g.chunks(w) {
                            db.iter_mut()
                                .zip(chunk)
                                .for_each(|(d, &gv)| *d += gv as f64);
                        }
                        db.into_iter().map(|x| (sign * x) as f32).collect()
                    };
                    accumulate(grads, *b, db);
                }
            }
            Op::Mul { a, b } => {
                let (da_src, db_src) = (self.data(*a), self.data(*b));
                let w = db_src.len();
                if self.needs(*a) {
                    let mut da = Vec::with_capacity(g.len());
                    for chunk in g.chunks(w) {
                        da.extend(chunk.iter().zip(db_src).map(|(&gv, &y)| gv * y));
                    }
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0f64; w];
                    for (chunk, xs) in g.chunks(w).zip(da_src.chunks(w)) {
                        for ((d, &gv), &x) in db.iter_mut().zip(chunk).zip(xs) {
                            *d += gv as f64 * x as f64;
                        }
                    }
                    accumulate(grads, *b, db.into_iter().map(|x| x as f32).collect());
                }
            }
            Op::Scale { a, s } => {
                accumulate(grads, *a, g.iter().map(|x| x * s).collect());
            }
            Op::Relu { a } => {
                let x = self.data(*a);
                let da = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(grads, *a, da);
            }
            Op::Softmax { a } => {
                let w = node.value.last_dim();
                let mut da = vec![0.0f32; g.len()];
                for ((gr, yr), dr) in g.chunks(w).zip(y.chunks(w)).zip(da.chunks_mut(w)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(&a, &b)| a as f64 * b as f64).sum();
                    for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = (yv as f64 * (gv as f64 - dot)) as f32;
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::LogSoftmax { a } => {
                let w = node.value.last_dim();
                let mut da = vec![0.0f32; g.len()];
                for ((gr, yr), dr) in g.chunks(w).zip(y.chunks(w)).zip(da.chunks_mut(w)) {
                    let total: f64 = gr.iter().map(|&v| v as f64).sum();
                    for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = (gv as f64 - (yv as f64).exp() * total) as f32;
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::LogSumExp { a } => {
                let x = self.value(*a);
                let w = x.last_dim();
                let mut da = vec![0.0f32; x.numel()];
                for (r, (xr, dr)) in x.data().chunks(w).zip(da.chunks_mut(w)).enumerate() {
                    let lse = y[r] as f64;
                    for (d, &xv) in dr.iter_mut().zip(xr) {
                        *d = (g[r] as f64 * (xv as f64 - lse).exp()) as f32;
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::Normalize {
                a,
                inv_scale,
                clamped,
            } => {
                let w = node.value.last_dim();
                let mut da = vec![0.0f32; g.len()];
                for (r, ((gr, yr), dr)) in g
                    .chunks(w)
                    .zip(y.chunks(w))
                    .zip(da.chunks_mut(w))
                    .enumerate()
                {
                    let n = w as f64;
                    let g_mean: f64 = gr.iter().map(|&v| v as f64).sum::<f64>() / n;
                    let gy_mean: f64 = if clamped[r] {
                        0.0
                    } else {
                        gr.iter()
                            .zip(yr)
                            .map(|(&a, &b)| a as f64 * b as f64)
                            .sum::<f64>()
                            / n
                    };
                    let inv = inv_scale[r] as f64;
                    for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = (inv * (gv as f64 - g_mean - yv as f64 * gy_mean)) as f32;
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::L2Normalize { a, norms, clamped } => {
                let w = node.value.last_dim();
                let mut da = vec![0.0f32; g.len()];
                for (r, ((gr, yr), dr)) in g
                    .chunks(w)
                    .zip(y.chunks(w))
                    .zip(da.chunks_mut(w))
                    .enumerate()
                {
                    let n = norms[r] as f64;
                    let proj: f64 = if clamped[r] {
                        0.0
                    } else {
                        gr.iter().zip(yr).map(|(&a, &b)| a as f64 * b as f64).sum()
                    };
                    for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = ((gv as f64 - yv as f64 * proj) / n) as f32;
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::Reshape { a } => accumulate(grads, *a, g.to_vec()),
            Op::Transpose12 { a } => {
                let s = node.value.shape();
                // output is [A, C, B, D]; transposing back restores [A, B, C, D]
                accumulate(grads, *a, transpose12_data(g, s[0], s[1], s[2], s[3]));
            }
            Op::SliceLast { a, start } => {
                let w_in = self.value(*a).last_dim();
                let w = node.value.last_dim();
                let mut da = vec![0.0f32; self.value(*a).numel()];
                for (gr, dr) in g.chunks(w.max(1)).zip(da.chunks_mut(w_in)) {
                    dr[*start..*start + w].copy_from_slice(gr);
                }
                accumulate(grads, *a, da);
            }
            Op::ConcatLast { a, b } => {
                let wa = self.value(*a).last_dim();
                let wb = self.value(*b).last_dim();
                let rows = g.len() / (wa + wb).max(1);
                if self.needs(*a) {
                    let mut da = Vec::with_capacity(rows * wa);
                    for r in 0..rows {
                        da.extend_from_slice(&g[r * (wa + wb)..r * (wa + wb) + wa]);
                    }
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Vec::with_capacity(rows * wb);
                    for r in 0..rows {
                        db.extend_from_slice(&g[r * (wa + wb) + wa..(r + 1) * (wa + wb)]);
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::GatherRows { table, idx } => {
                let t = self.value(*table);
                let d = t.last_dim();
                let mut dt = vec![0.0f32; t.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for (dst, &gv) in dt[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                    {
                        *dst += gv;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::Pick { a, idx } => {
                let t = self.value(*a);
                let w = t.last_dim();
                let mut da = vec![0.0f32; t.numel()];
                for (r, &c) in idx.iter().enumerate() {
                    da[r * w + c] = g[r];
                }
                accumulate(grads, *a, da);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let w = self.value(*logits).last_dim();
                let scale = g[0] as f64 / targets.len() as f64;
                let mut da: Vec<f32> = probs.iter().map(|&p| (p as f64 * scale) as f32).collect();
                for (r, &c) in targets.iter().enumerate() {
                    da[r * w + c] -= scale as f32;
                }
                accumulate(grads, *logits, da);
            }
            Op::Sum { a } => {
                let n = self.value(*a).numel();
                accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean { a } => {
                let n = self.value(*a).numel();
                accumulate(grads, *a, vec![g[0] / n as f32; n]);
            }
            Op::Tile0 { a, times } => {
                let n = self.value(*a).numel();
                let mut da = vec![0.0f64; n];
                for c in 0..*times {
                    for (d, &gv) in da.iter_mut().zip(&g[c * n..(c + 1) * n]) {
                        *d += gv as f64;
                    }
                }
                accumulate(grads, *a, da.into_iter().map(|x| x as f32).collect());
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, contribution: Vec<f32>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contribution),
    }
}

/// Number of times `b` repeats inside `a` when `b` is a trailing suffix of `a`.
fn suffix_repeats(a: &[usize], b: &[usize]) -> Option<usize> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return None;
    }
    Some(a[..a.len() - b.len()].iter().product())
}

fn transpose12_data(src: &[f32], d0: usize, d1: usize, d2: usize, d3: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; src.len()];
    for i in 0..d0 {
        for j in 0..d1 {
            for k in 0..d2 {
                let s = ((i * d1 + j) * d2 + k) * d3;
                let d = ((i * d2 + k) * d1 + j) * d3;
                out[d..d + d3].copy_from_slice(&src[s..s + d3]);
            }
        }
    }
    out
}

pub(crate) fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
    let s: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn softmax_row(src: &[f32], dst: &mut [f32]) {
    let max = src.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x));
    let mut s = 0.0f64;
    for (d, &x) in dst.iter_mut().zip(src) {
        let e = (x - max).exp();
        s += e as f64;
        *d = e;
    }
    let inv = (1.0 / s) as f32;
    dst.iter_mut().for_each(|d| *d *= inv);
}

fn mean_std(row: &[f32]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = row.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `c = op(a) op(b)` with `op(a)` of shape `[m, k]` and `op(b)` of shape `[k, n]`.
///
/// With `ta`, `a` is stored `[k, m]`; with `tb`, `b` is stored `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover m*k, k*n and m*n elements under the strides above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
