use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, AttnDims, Rope};
use crate::tensor::Tensor;
use crate::topk::{self, Nonlinearity};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f32,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f32>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        rope: Arc<Rope>,
        q_rot: Vec<f32>,
        k_rot: Vec<f32>,
        probs: Vec<f32>,
    },
    SwiGlu {
        gate: Var,
        up: Var,
    },
    TopK {
        x: Var,
        f: Nonlinearity,
        alpha: f32,
        kept: Vec<bool>,
    },
    AddColumn {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    Project {
        x: Var,
        weights: Vec<f32>,
    },
    Sum {
        x: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A tape of tensor operations supporting reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the tape is already a
/// topological order and backward is a single reverse sweep. Gradients of
/// leaves accumulate across `backward` calls until [`Graph::zero_grad`];
/// gradients of interior nodes are rebuilt on every call.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    /// Smallest distance from a non-differentiable point observed in any
    /// TopK node (selection gap, or |x| under ReLU).
    topk_margin: f32,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            topk_margin: f32::INFINITY,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on `v` by the latest backward pass (leaves: all passes).
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).unwrap())
    }

    /// Moves the gradient buffer of `v` out of the graph.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads[v.0].take()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn topk_margin(&self) -> f32 {
        self.topk_margin
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(shape_err("matmul", av, bv));
        }
        let out = av.matmul(bv)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * c).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).unwrap();
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, c }, rg)
    }

    /// Gathers rows of a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                lhs: tv.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (vocab, dim) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    what: "token",
                    index: id,
                    bound: vocab,
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), dim], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let (rows, cols) = xv.as_matrix();
        if gv.numel() != cols {
            return Err(shape_err("rms_norm", xv, gv));
        }
        let mut out = vec![0.0; xv.numel()];
        let mut inv_rms = vec![0.0; rows];
        kernels::rms_norm_forward(xv.data(), gv.data(), &mut out, &mut inv_rms);
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain]);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Causal multi-head self-attention with rotary embeddings applied to
    /// `q` and `k`. Inputs are `[batch*seq, heads*head_dim]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        rope: Arc<Rope>,
    ) -> Result<Var> {
        let expect = [dims.batch * dims.seq, dims.model_dim()];
        for var in [q, k, v] {
            let t = self.value(var);
            if t.shape() != expect {
                return Err(Error::Shape {
                    op: "attention",
                    lhs: t.shape().to_vec(),
                    rhs: expect.to_vec(),
                });
            }
        }
        if dims.seq > rope.max_pos() {
            return Err(Error::Length {
                len: dims.seq,
                max: rope.max_pos(),
            });
        }
        let d = dims.model_dim();
        let mut q_rot = self.value(q).data().to_vec();
        let mut k_rot = self.value(k).data().to_vec();
        rope.rotate_rows(&mut q_rot, d, dims.seq, false);
        rope.rotate_rows(&mut k_rot, d, dims.seq, false);
        let mut out = vec![0.0; expect[0] * d];
        let mut probs = vec![0.0; dims.probs_len()];
        kernels::attention_forward(
            &q_rot,
            &k_rot,
            self.value(v).data(),
            dims,
            &mut out,
            &mut probs,
        );
        let out = Tensor::new(expect.to_vec(), out)?;
        let rg = self.rg(&[q, k, v]);
        let op = if rg {
            Op::Attention {
                q,
                k,
                v,
                dims,
                rope,
                q_rot,
                k_rot,
                probs,
            }
        } else {
            Op::Attention {
                q,
                k,
                v,
                dims,
                rope,
                q_rot: Vec::new(),
                k_rot: Vec::new(),
                probs: Vec::new(),
            }
        };
        Ok(self.push(out, op, rg))
    }

    /// `silu(gate) * up`, elementwise.
    pub fn swiglu(&mut self, gate: Var, up: Var) -> Result<Var> {
        let (gv, uv) = (self.value(gate), self.value(up));
        if gv.shape() != uv.shape() {
            return Err(shape_err("swiglu", gv, uv));
        }
        let mut out = vec![0.0; gv.numel()];
        kernels::swiglu_forward(gv.data(), uv.data(), &mut out);
        let out = Tensor::new(gv.shape().to_vec(), out)?;
        let rg = self.rg(&[gate, up]);
        Ok(self.push(out, Op::SwiGlu { gate, up }, rg))
    }

    /// Annealed TopK activation applied independently to every row.
    /// Backward treats the selection mask as a constant.
    pub fn annealed_topk(&mut self, x: Var, k: usize, f: Nonlinearity, alpha: f32) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.as_matrix();
        topk::check_k(k, cols)?;
        topk::check_alpha(alpha)?;
        let shape = xv.shape().to_vec();
        let mut out = xv.data().to_vec();
        let mut kept = vec![false; out.len()];
        let mut order = Vec::with_capacity(cols);
        let mut margin = f32::INFINITY;
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            if f == Nonlinearity::Relu {
                margin = row.iter().fold(margin, |m, v| m.min(v.abs()));
            }
            let gap = topk::annealed_topk_row(
                row,
                k,
                f,
                alpha,
                &mut kept[r * cols..(r + 1) * cols],
                &mut order,
            );
            margin = margin.min(gap);
        }
        self.topk_margin = self.topk_margin.min(margin);
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::TopK { x, f, alpha, kept }, rg))
    }

    /// Adds `delta` to column `col` of every row (activation steering).
    pub fn add_column(&mut self, x: Var, col: usize, delta: f32) -> Result<Var> {
        let xv = self.value(x);
        let (_, cols) = xv.as_matrix();
        if col >= cols {
            return Err(Error::Index {
                what: "neuron",
                index: col,
                bound: cols,
            });
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_exact_mut(cols) {
            row[col] += delta;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::AddColumn { x }, rg))
    }

    /// Mean over rows of `-log softmax(logits)[row, target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, vocab) = lv.as_matrix();
        if rows != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index {
                what: "target",
                index: bad,
                bound: vocab,
            });
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0f64;
        for (row, &t) in probs.chunks_exact_mut(vocab).zip(targets) {
            total -= kernels::log_softmax_at(row, t);
            kernels::softmax_in_place(row);
        }
        let loss = (total / rows.max(1) as f64) as f32;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs: if rg { probs } else { Vec::new() },
            },
            rg,
        ))
    }

    /// Scalar `Σ w_i x_i` against fixed weights (accumulated in `f64`).
    pub fn project(&mut self, x: Var, weights: &[f32]) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() != weights.len() {
            return Err(Error::Shape {
                op: "project",
                lhs: xv.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let s: f64 = xv
            .data()
            .iter()
            .zip(weights)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar(s as f32),
            Op::Project {
                x,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s as f32), Op::Sum { x }, rg)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: rv.shape().to_vec(),
                rhs: vec![1],
            });
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.accumulate(root, |g| g[0] += 1.0);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g);
        }
        Ok(())
    }

    /// Runs `f` on the gradient buffer of `v`, allocating zeros on first use.
    /// Skips nodes that do not require a gradient.
    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f32])) {
        accumulate(&self.nodes, &mut self.grads, v, f);
    }

    fn backward_node(&mut self, i: usize, g: &[f32]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |v: &Var| nodes[v.0].value.data();
        let rg = |v: &Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| accumulate(nodes, grads, v, f);
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, p) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                if rg(a) {
                    acc(*a, &mut |da| kernels::mm_a_bt(m, n, p, g, val(b), da, 1.0));
                }
                if rg(b) {
                    acc(*b, &mut |db| kernels::mm_at_b(p, m, n, val(a), g, db, 1.0));
                }
            }
            Op::Add { a, b } => {
                acc(*a, &mut add_into(g));
                acc(*b, &mut add_into(g));
            }
            Op::Scale { x, c } => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::Embedding { table, ids } => {
                let dim = nodes[table.0].value.shape()[1];
                acc(*table, &mut |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        d[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(&g[r * dim..(r + 1) * dim])
                            .for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (val(x), val(gain));
                if rg(x) {
                    acc(*x, &mut |dx| {
                        kernels::rms_norm_backward(xv, gv, inv_rms, g, Some(dx), None)
                    });
                }
                if rg(gain) {
                    acc(*gain, &mut |dg| {
                        kernels::rms_norm_backward(xv, gv, inv_rms, g, None, Some(dg))
                    });
                }
            }
            Op::Attention {
                q,
                k,
                v,
                dims,
                rope,
                q_rot,
                k_rot,
                probs,
            } => {
                let n = q_rot.len();
                let d = dims.model_dim();
                let (mut dq, mut dk, mut dv) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                kernels::attention_backward(
                    q_rot, k_rot, val(v), probs, g, *dims, &mut dq, &mut dk, &mut dv,
                );
                rope.rotate_rows(&mut dq, d, dims.seq, true);
                rope.rotate_rows(&mut dk, d, dims.seq, true);
                acc(*q, &mut add_into(&dq));
                acc(*k, &mut add_into(&dk));
                acc(*v, &mut add_into(&dv));
            }
            Op::SwiGlu { gate, up } => {
                let (gv, uv) = (val(gate), val(up));
                acc(*gate, &mut |d| kernels::swiglu_backward(gv, uv, g, Some(d), None));
                acc(*up, &mut |d| kernels::swiglu_backward(gv, uv, g, None, Some(d)));
            }
            Op::TopK { x, f, alpha, kept } => {
                let xv = val(x);
                acc(*x, &mut |d| {
                    for (((dx, &gy), &xi), &keep) in d.iter_mut().zip(g).zip(xv).zip(kept) {
                        let scale = if keep { 1.0 } else { *alpha };
                        *dx += gy * f.derivative(xi) * scale;
                    }
                });
            }
            Op::AddColumn { x } => acc(*x, &mut add_into(g)),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vocab = nodes[logits.0].value.as_matrix().1;
                let scale = g[0] / targets.len().max(1) as f32;
                acc(*logits, &mut |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        let pr = &probs[r * vocab..(r + 1) * vocab];
                        let dr = &mut d[r * vocab..(r + 1) * vocab];
                        for (dv, &p) in dr.iter_mut().zip(pr) {
                            *dv += scale * p;
                        }
                        dr[t] -= scale;
                    }
                });
            }
            Op::Project { x, weights } => {
                acc(*x, &mut |d| {
                    d.iter_mut().zip(weights).for_each(|(a, &w)| *a += g[0] * w)
                });
            }
            Op::Sum { x } => acc(*x, &mut |d| d.iter_mut().for_each(|a| *a += g[0])),
        }
    }
}

fn add_into(g: &[f32]) -> impl FnMut(&mut [f32]) + '_ {
    move |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y)
}

fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f32>>],
    v: Var,
    f: impl FnOnce(&mut [f32]),
) {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let n = node.value.numel();
    f(grads[v.0].get_or_insert_with(|| vec![0.0; n]));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_backward_matches_closed_form() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let b = g.param(Tensor::from_rows(&[&[5.0], &[6.0]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        // dA = 1·Bᵀ per row, dB = Aᵀ·1
        assert_eq!(g.grad(a).unwrap().data(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn leaf_grads_accumulate_across_backward_calls() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn self_product_counts_both_operands() {
        // s = sum(x·x) with x = [[2]] -> ds/dx = 2x = 4
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let y = g.matmul(x, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(vec![3, 4]));
        let l = g.cross_entropy(z, &[0, 1, 3]).unwrap();
        assert!((g.value(l).data()[0] - 4f32.ln()).abs() < 1e-6);

        let mut hot = Tensor::zeros(vec![1, 4]);
        hot.data_mut()[2] = 1000.0;
        let z = g.constant(hot);
        let l = g.cross_entropy(z, &[2]).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(vec![1, 4]));
        assert!(matches!(
            g.cross_entropy(z, &[4]),
            Err(Error::Index { what: "target", .. })
        ));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(vec![2]));
        assert!(g.backward(x).is_err());
    }
}
