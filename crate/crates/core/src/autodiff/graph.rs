//! Reverse-mode differentiation over a tape of coarse-grained operations.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order for the backward pass. Operations work on row
//! matrices (`[rows, cols]`) and carry whatever forward intermediates their
//! backward pass needs.

use std::collections::HashMap;

use super::tensor::{gemm, softmax_in_place, Tensor};
use crate::error::{ensure, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
        b_t: bool,
    },
    Add(Var, Var),
    /// `x[r] += p[r % p.rows]`
    AddBroadcast {
        x: Var,
        p: Var,
    },
    Scale(Var, f64),
    Reshape(Var),
    Mul(Var, Var),
    PrependToken {
        x: Var,
        token: Var,
        batch: usize,
    },
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Interleave(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Attention {
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    MeanGroups {
        x: Var,
        group: usize,
    },
    L2NormRows {
        x: Var,
        norms: Vec<f64>,
    },
    LogSumExpRows(Var),
    External {
        inputs: Vec<Var>,
        grads: Vec<Tensor>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single-use tape; build it for one forward pass, then call [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Trainable leaf. Repeated calls with the same id return the same node,
    /// so gradients from every use accumulate in one place.
    pub fn param(&mut self, id: usize, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Leaf that receives gradients but is not a registered parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (r, din) = (xv.rows(), xv.cols());
        ensure!(
            wv.shape().len() == 2 && wv.shape()[0] == din,
            Shape,
            "linear: input width {din} vs weight {:?}",
            wv.shape()
        );
        let dout = wv.shape()[1];
        let mut out = vec![0.0; r * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            ensure!(bv.len() == dout, Shape, "linear bias length {}", bv.len());
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(r, din, dout, 1.0, xv.data(), false, wv.data(), false, 1.0, &mut out);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let t = Tensor::new(vec![r, dout], out)?;
        Ok(self.push(t, Op::Linear { x, w, b }, ng))
    }

    /// `a · b` (or `a · bᵀ` when `b_t`), both 2-D.
    pub fn matmul(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = if b_t {
            (bv.cols(), bv.rows())
        } else {
            (bv.rows(), bv.cols())
        };
        ensure!(k == k2, Shape, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, av.data(), false, bv.data(), b_t, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, b_t }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        ensure!(
            av.len() == bv.len(),
            Shape,
            "add: {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let mut t = av.clone();
        t.add_assign(bv);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    /// Adds the rows of `p` cyclically to the rows of `x`.
    pub fn add_broadcast(&mut self, x: Var, p: Var) -> Result<Var> {
        let (xv, pv) = (self.value(x), self.value(p));
        let (pr, c) = (pv.rows(), pv.cols());
        ensure!(
            xv.cols() == c && pr > 0 && xv.rows() % pr == 0,
            Shape,
            "add_broadcast: {:?} vs {:?}",
            xv.shape(),
            pv.shape()
        );
        let mut t = xv.clone();
        for (i, row) in t.data_mut().chunks_mut(c).enumerate() {
            for (a, b) in row.iter_mut().zip(pv.row(i % pr)) {
                *a += b;
            }
        }
        let ng = self.ng(x) || self.ng(p);
        Ok(self.push(t, Op::AddBroadcast { x, p }, ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, c), ng)
    }

    /// Same data, new row-major shape.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        ensure!(av.len() == bv.len(), Shape, "mul length mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// `x` holds `batch` sequences stacked row-wise; prepends `token` to each.
    pub fn prepend_token(&mut self, x: Var, token: Var, batch: usize) -> Result<Var> {
        let (xv, tv) = (self.value(x), self.value(token));
        let c = xv.cols();
        ensure!(
            tv.len() == c && batch > 0 && xv.rows() % batch == 0,
            Shape,
            "prepend_token: x {:?}, token {:?}, batch {batch}",
            xv.shape(),
            tv.shape()
        );
        let seq = xv.rows() / batch;
        let mut out = Vec::with_capacity((xv.rows() + batch) * c);
        for b in 0..batch {
            out.extend_from_slice(tv.data());
            out.extend_from_slice(&xv.data()[b * seq * c..(b + 1) * seq * c]);
        }
        let t = Tensor::new(vec![batch * (seq + 1), c], out)?;
        let ng = self.ng(x) || self.ng(token);
        Ok(self.push(t, Op::PrependToken { x, token, batch }, ng))
    }

    pub fn select_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        ensure!(
            idx.iter().all(|&i| i < xv.rows()),
            Shape,
            "select_rows index out of range"
        );
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            out.extend_from_slice(xv.row(i));
        }
        let t = Tensor::new(vec![idx.len(), c], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::SelectRows { x, idx }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), Shape, "concat_rows of nothing");
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            ensure!(v.cols() == c, Shape, "concat_rows width mismatch");
            out.extend_from_slice(v.data());
            rows += v.rows();
        }
        let t = Tensor::new(vec![rows, c], out)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// `[a0, b0, a1, b1, ...]` from two equally shaped row matrices.
    pub fn interleave(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        ensure!(av.shape() == bv.shape(), Shape, "interleave shape mismatch");
        let c = av.cols();
        let mut out = Vec::with_capacity(av.len() * 2);
        for r in 0..av.rows() {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let t = Tensor::new(vec![av.rows() * 2, c], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Interleave(a, b), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let (gv, bv) = (self.value(gain), self.value(bias));
        ensure!(gv.len() == c && bv.len() == c, Shape, "layer_norm params");
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        let ng = self.ng(x);
        self.push(t, Op::Gelu(x), ng)
    }

    /// Multi-head self-attention. `qkv` is `[batch*seq, 3*d]` with the query,
    /// key and value projections side by side; output is `[batch*seq, d]`.
    pub fn attention(&mut self, qkv: Var, batch: usize, heads: usize) -> Result<Var> {
        let v = self.value(qkv);
        let d3 = v.cols();
        ensure!(
            d3 % 3 == 0 && (d3 / 3) % heads == 0 && batch > 0 && v.rows() % batch == 0,
            Shape,
            "attention: qkv {:?}, batch {batch}, heads {heads}",
            v.shape()
        );
        let d = d3 / 3;
        let dh = d / heads;
        let seq = v.rows() / batch;
        let scale = 1.0 / (dh as f64).sqrt();
        let data = v.data();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * d];
        let mut o_head = vec![0.0; seq * dh];
        for b in 0..batch {
            let base = b * seq * d3;
            for h in 0..heads {
                let q = &data[base + h * dh..];
                let k = &data[base + d + h * dh..];
                let val = &data[base + 2 * d + h * dh..];
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                gemm_strided(seq, dh, seq, scale, q, d3, 1, k, 1, d3, p, seq);
                for row in p.chunks_mut(seq) {
                    softmax_in_place(row);
                }
                gemm_strided(seq, seq, dh, 1.0, p, seq, 1, val, d3, 1, &mut o_head, dh);
                for s in 0..seq {
                    out[(b * seq + s) * d + h * dh..][..dh]
                        .copy_from_slice(&o_head[s * dh..(s + 1) * dh]);
                }
            }
        }
        let t = Tensor::new(vec![batch * seq, d], out)?;
        let ng = self.ng(qkv);
        Ok(self.push(
            t,
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Means over consecutive groups of `group` rows.
    pub fn mean_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        ensure!(
            group > 0 && xv.rows() % group == 0,
            Shape,
            "mean_groups: {} rows, group {group}",
            xv.rows()
        );
        let c = xv.cols();
        let g = xv.rows() / group;
        let mut out = vec![0.0; g * c];
        for r in 0..xv.rows() {
            let o = &mut out[(r / group) * c..][..c];
            for (a, b) in o.iter_mut().zip(xv.row(r)) {
                *a += b / group as f64;
            }
        }
        let t = Tensor::new(vec![g, c], out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::MeanGroups { x, group }, ng))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::L2NormRows { x, norms }, ng))
    }

    /// `log Σ_j exp x[r, j]` per row, shape `[rows, 1]`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out: Vec<f64> = (0..xv.rows())
            .map(|r| {
                let row = xv.row(r);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let rows = out.len();
        let t = Tensor::new(vec![rows, 1], out).expect("shape");
        let ng = self.ng(x);
        self.push(t, Op::LogSumExpRows(x), ng)
    }

    /// Scalar node whose value and input gradients were computed elsewhere.
    pub fn external(&mut self, inputs: &[Var], value: f64, grads: Vec<Tensor>) -> Result<Var> {
        ensure!(inputs.len() == grads.len(), Shape, "external arity");
        for (&i, g) in inputs.iter().zip(&grads) {
            ensure!(
                self.value(i).len() == g.len(),
                Shape,
                "external gradient shape {:?} vs input {:?}",
                g.shape(),
                self.value(i).shape()
            );
        }
        let ng = inputs.iter().any(|&i| self.ng(i));
        Ok(self.push(
            Tensor::scalar(value),
            Op::External {
                inputs: inputs.to_vec(),
                grads,
            },
            ng,
        ))
    }

    /// `Σ w_i · x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let v = terms
            .iter()
            .map(|&(x, w)| w * self.value(x).data()[0])
            .sum();
        let ng = terms.iter().any(|&(x, _)| self.ng(x));
        self.push(Tensor::scalar(v), Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.backprop(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let mut params = self
            .params
            .iter()
            .map(|(&id, &v)| (id, v))
            .collect::<Vec<_>>();
        params.sort_unstable();
        Gradients { grads, params }
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (r, din, dout) = (xv.rows(), xv.cols(), wv.cols());
                if self.ng(*x) {
                    let gx = slot(grads, *x, xv);
                    gemm(r, dout, din, 1.0, gd, false, wv.data(), true, 1.0, gx);
                }
                if self.ng(*w) {
                    let gw = slot(grads, *w, wv);
                    gemm(din, r, dout, 1.0, xv.data(), true, gd, false, 1.0, gw);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let gb = slot(grads, *b, self.value(*b));
                        for row in gd.chunks(dout) {
                            for (a, v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    }
                }
            }
            Op::MatMul { a, b, b_t } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = node.value.cols();
                if self.ng(*a) {
                    // dA = G · op(B)ᵀ
                    let ga = slot(grads, *a, av);
                    gemm(m, n, k, 1.0, gd, false, bv.data(), !*b_t, 1.0, ga);
                }
                if self.ng(*b) {
                    let gb = slot(grads, *b, bv);
                    if *b_t {
                        // B is [n,k]; dB = Gᵀ · A
                        gemm(n, m, k, 1.0, gd, true, av.data(), false, 1.0, gb);
                    } else {
                        gemm(k, m, n, 1.0, av.data(), true, gd, false, 1.0, gb);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.ng(*v) {
                        add_into(slot(grads, *v, self.value(*v)), gd);
                    }
                }
            }
            Op::AddBroadcast { x, p } => {
                if self.ng(*x) {
                    add_into(slot(grads, *x, self.value(*x)), gd);
                }
                if self.ng(*p) {
                    let pv = self.value(*p);
                    let (pr, c) = (pv.rows(), pv.cols());
                    let gp = slot(grads, *p, pv);
                    for (i, row) in gd.chunks(c).enumerate() {
                        let o = &mut gp[(i % pr) * c..][..c];
                        for (a, v) in o.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.ng(*x) {
                    let gx = slot(grads, *x, self.value(*x));
                    for (a, v) in gx.iter_mut().zip(gd) {
                        *a += c * v;
                    }
                }
            }
            Op::Reshape(x) => {
                if self.ng(*x) {
                    let gx = slot(grads, *x, self.value(*x));
                    for (a, v) in gx.iter_mut().zip(gd) {
                        *a += v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let ga = slot(grads, *a, av);
                    for ((o, v), y) in ga.iter_mut().zip(gd).zip(bv.data()) {
                        *o += v * y;
                    }
                }
                if self.ng(*b) {
                    let gb = slot(grads, *b, bv);
                    for ((o, v), y) in gb.iter_mut().zip(gd).zip(av.data()) {
                        *o += v * y;
                    }
                }
            }
            Op::PrependToken { x, token, batch } => {
                let c = node.value.cols();
                let seq1 = node.value.rows() / batch;
                if self.ng(*x) {
                    let gx = slot(grads, *x, self.value(*x));
                    for b in 0..*batch {
                        let src = &gd[(b * seq1 + 1) * c..(b + 1) * seq1 * c];
                        add_into(&mut gx[b * (seq1 - 1) * c..][..src.len()], src);
                    }
                }
                if self.ng(*token) {
                    let gt = slot(grads, *token, self.value(*token));
                    for b in 0..*batch {
                        add_into(gt, &gd[b * seq1 * c..][..c]);
                    }
                }
            }
            Op::SelectRows { x, idx } => {
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let gx = slot(grads, *x, xv);
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * c..][..c], &gd[k * c..][..c]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    if self.ng(p) {
                        add_into(slot(grads, p, pv), &gd[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Interleave(a, b) => {
                let c = node.value.cols();
                for (which, v) in [(0usize, a), (1, b)] {
                    if self.ng(*v) {
                        let gv = slot(grads, *v, self.value(*v));
                        for r in 0..gv.len() / c {
                            add_into(&mut gv[r * c..][..c], &gd[(2 * r + which) * c..][..c]);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let gv = self.value(*gain).data().to_vec();
                if self.ng(*gain) {
                    let gg = slot(grads, *gain, self.value(*gain));
                    for (row_g, row_h) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                if self.ng(*bias) {
                    let gb = slot(grads, *bias, self.value(*bias));
                    for row in gd.chunks(c) {
                        add_into(gb, row);
                    }
                }
                if self.ng(*x) {
                    let gx = slot(grads, *x, self.value(*x));
                    let mut dh = vec![0.0; c];
                    for (r, is) in inv_std.iter().enumerate() {
                        let row_g = &gd[r * c..][..c];
                        let row_h = &xhat[r * c..][..c];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            dh[j] = row_g[j] * gv[j];
                            s1 += dh[j];
                            s2 += dh[j] * row_h[j];
                        }
                        let o = &mut gx[r * c..][..c];
                        let cf = c as f64;
                        for j in 0..c {
                            o[j] += is / cf * (cf * dh[j] - s1 - row_h[j] * s2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let gx = slot(grads, *x, xv);
                    for ((o, v), &xi) in gx.iter_mut().zip(gd).zip(xv.data()) {
                        *o += v * gelu_grad(xi);
                    }
                }
            }
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            } => {
                if !self.ng(*qkv) {
                    return;
                }
                let qv = self.value(*qkv);
                let d3 = qv.cols();
                let d = d3 / 3;
                let dh = d / heads;
                let (seq, heads) = (*seq, *heads);
                let scale = 1.0 / (dh as f64).sqrt();
                let data = qv.data();
                let gq = slot(grads, *qkv, qv);
                let mut dp = vec![0.0; seq * seq];
                for b in 0..*batch {
                    let base = b * seq * d3;
                    for h in 0..heads {
                        let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                        let go = &gd[b * seq * d + h * dh..];
                        let q = &data[base + h * dh..];
                        let k = &data[base + d + h * dh..];
                        let val = &data[base + 2 * d + h * dh..];
                        // dV += Pᵀ · dO
                        gemm_strided_acc(
                            seq,
                            seq,
                            dh,
                            1.0,
                            p,
                            1,
                            seq,
                            go,
                            d,
                            1,
                            &mut gq[base + 2 * d + h * dh..],
                            d3,
                        );
                        // dP = dO · Vᵀ
                        gemm_strided(seq, dh, seq, 1.0, go, d, 1, val, 1, d3, &mut dp, seq);
                        for (prow, dprow) in p.chunks(seq).zip(dp.chunks_mut(seq)) {
                            let dot: f64 = prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
                            for (x, &pp) in dprow.iter_mut().zip(prow) {
                                *x = pp * (*x - dot);
                            }
                        }
                        // dQ += scale · dS · K ; dK += scale · dSᵀ · Q
                        gemm_strided_acc(
                            seq,
                            seq,
                            dh,
                            scale,
                            &dp,
                            seq,
                            1,
                            k,
                            d3,
                            1,
                            &mut gq[base + h * dh..],
                            d3,
                        );
                        gemm_strided_acc(
                            seq,
                            seq,
                            dh,
                            scale,
                            &dp,
                            1,
                            seq,
                            q,
                            d3,
                            1,
                            &mut gq[base + d + h * dh..],
                            d3,
                        );
                    }
                }
            }
            Op::MeanGroups { x, group } => {
                if self.ng(*x) {
                    let c = node.value.cols();
                    let gx = slot(grads, *x, self.value(*x));
                    let inv = 1.0 / *group as f64;
                    for (r, row) in gx.chunks_mut(c).enumerate() {
                        for (a, v) in row.iter_mut().zip(&gd[(r / group) * c..][..c]) {
                            *a += v * inv;
                        }
                    }
                }
            }
            Op::L2NormRows { x, norms } => {
                if self.ng(*x) {
                    let c = node.value.cols();
                    let y = node.value.data();
                    let gx = slot(grads, *x, self.value(*x));
                    for (r, n) in norms.iter().enumerate() {
                        let yr = &y[r * c..][..c];
                        let gr = &gd[r * c..][..c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                }
            }
            Op::LogSumExpRows(x) => {
                if self.ng(*x) {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let gx = slot(grads, *x, xv);
                    for r in 0..xv.rows() {
                        let mut s = xv.row(r).to_vec();
                        softmax_in_place(&mut s);
                        for j in 0..c {
                            gx[r * c + j] += gd[r] * s[j];
                        }
                    }
                }
            }
            Op::External { inputs, grads: eg } => {
                for (&i, e) in inputs.iter().zip(eg) {
                    if self.ng(i) {
                        let gi = slot(grads, i, self.value(i));
                        for (a, v) in gi.iter_mut().zip(e.data()) {
                            *a += gd[0] * v;
                        }
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(x, w) in terms {
                    if self.ng(x) {
                        slot(grads, x, self.value(x))[0] += w * gd[0];
                    }
                }
            }
        }
    }
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// `(param id, gradient)` for every parameter that received a gradient.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.get(v).map(|g| (id, g)))
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut [f64] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(like.shape()))
        .data_mut()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// `c = alpha·A·B` with explicit strides; `c` is row-major with row stride `rsc`.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
) {
    gemm_raw(m, k, n, alpha, a, rsa, csa, b, rsb, csb, 0.0, c, rsc);
}

#[allow(clippy::too_many_arguments)]
fn gemm_strided_acc(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
) {
    gemm_raw(m, k, n, alpha, a, rsa, csa, b, rsb, csb, 1.0, c, rsc);
}

#[allow(clippy::too_many_arguments)]
fn gemm_raw(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| {
        (rows - 1) * rs + (cols - 1) * cs + 1
    };
    assert!(a.len() >= last(m, k, rsa, csa));
    assert!(b.len() >= last(k, n, rsb, csb));
    assert!(c.len() >= last(m, n, rsc, 1));
    // SAFETY: bounds of every strided access checked by the asserts above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}
