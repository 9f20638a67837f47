//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and whatever the
//! backward rule needs. Nodes are appended in evaluation order, so the tape
//! is topologically sorted by construction and [`Tape::backward`] is a single
//! reverse sweep.
//!
//! A node participates in the backward sweep only if one of its inputs does.
//! Constants never do, and [`Tape::stop_gradient`] produces a node that never
//! does, whatever its input.

use std::collections::BTreeMap;

use super::tensor::{gemm, normalize_row, softmax_rows_in_place, Mask, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow {
        a: Var,
        row: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Gelu(Var),
    Slice {
        a: Var,
        r0: usize,
        c0: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
    Sum(Var),
    #[allow(dead_code)]
    StopGradient(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    per_node: Vec<Option<Tensor>>,
    named: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient reaching `v`, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.per_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a named leaf. Unreachable leaves hold zeros.
    pub fn named(&self, name: &str) -> Option<&Tensor> {
        self.named.get(name)
    }

    pub fn by_name(&self) -> &BTreeMap<String, Tensor> {
        &self.named
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor> {
        self.named
    }
}

impl Tape {
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable input. Its gradient is reported under `name`.
    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].name = Some(name.into());
        v
    }

    /// Input treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `a · b`, or `a · bᵀ` when `trans_b`.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = if trans_b {
            (bv.cols(), bv.rows())
        } else {
            (bv.rows(), bv.cols())
        };
        assert_eq!(
            k,
            k2,
            "matmul inner dimensions differ: {:?} x {:?} (trans_b={trans_b})",
            av.shape(),
            bv.shape()
        );
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), trans_b, &mut out, false);
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, trans_b }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ext(a, b, false)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.any_grad(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        let n = av.cols();
        assert_eq!(rv.len(), n, "add_row length mismatch");
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, b) in chunk.iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.any_grad(&[a, row]);
        self.push(value, Op::AddRow { a, row }, rg)
    }

    /// Layer norm applied independently to each row.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = xv.cols();
        assert!(gv.len() == n && bv.len() == n, "layer_norm parameter length mismatch");
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..xv.rows() {
            let (h, s) = normalize_row(xv.row(r), eps);
            for ((hv, g), b) in h.iter().zip(gv.data()).zip(bv.data()) {
                out.push(g * hv + b);
            }
            xhat.extend(h);
            inv_std.push(s);
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.any_grad(&[x, gain, bias]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Row softmax. Masked entries get the sentinel before normalization and
    /// come out as exact zeros.
    pub fn softmax(&mut self, x: Var, mask: Option<&Mask>) -> Var {
        let xv = self.value(x);
        if let Some(m) = mask {
            assert!(
                m.rows() == xv.rows() && m.cols() == xv.cols(),
                "softmax mask shape mismatch"
            );
        }
        let mut data = xv.data().to_vec();
        softmax_rows_in_place(&mut data, xv.cols(), mask.map(|m| m.flags()));
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Rectangular block `[r0, r0+nr) x [c0, c0+nc)` of a matrix.
    pub fn slice(&mut self, a: Var, r0: usize, nr: usize, c0: usize, nc: usize) -> Var {
        let av = self.value(a);
        assert!(r0 + nr <= av.rows() && c0 + nc <= av.cols(), "slice out of bounds");
        let mut data = Vec::with_capacity(nr * nc);
        for r in r0..r0 + nr {
            data.extend_from_slice(&av.row(r)[c0..c0 + nc]);
        }
        let value = Tensor::from_parts(vec![nr, nc], data);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Slice { a, r0, c0 }, rg)
    }

    pub fn rows(&mut self, a: Var, r0: usize, nr: usize) -> Var {
        let c = self.value(a).cols();
        self.slice(a, r0, nr, 0, c)
    }

    pub fn cols(&mut self, a: Var, c0: usize, nc: usize) -> Var {
        let r = self.value(a).rows();
        self.slice(a, 0, r, c0, nc)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        assert!(
            parts.iter().all(|p| self.value(*p).rows() == m),
            "concat_cols row mismatch"
        );
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Tensor::from_parts(vec![m, n], data);
        let rg = self.any_grad(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let n = self.value(parts[0]).cols();
        assert!(
            parts.iter().all(|p| self.value(*p).cols() == n),
            "concat_rows column mismatch"
        );
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let m = data.len() / n;
        let value = Tensor::from_parts(vec![m, n], data);
        let rg = self.any_grad(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let n = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            assert!(id < tv.rows(), "gather index {id} out of range");
            data.extend_from_slice(tv.row(id));
        }
        let value = Tensor::from_parts(vec![ids.len(), n], data);
        let rg = self.any_grad(&[table]);
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Summed cross-entropy over `(row, target)` pairs of a logits matrix.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Var {
        let lv = self.value(logits);
        let v = lv.cols();
        let mut probs = Vec::with_capacity(targets.len() * v);
        let mut total = 0.0;
        for &(r, t) in targets {
            assert!(r < lv.rows() && t < v, "cross_entropy index out of range");
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            total += max + z.ln() - row[t];
            probs.extend(row.iter().map(|x| (x - max).exp() / z));
        }
        let rg = self.any_grad(&[logits]);
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Sums scalar nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }

    /// Identity in the forward pass; blocks all gradient flow backward.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient(x), false)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut named = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Leaf, Some(name)) = (&node.op, &node.name) {
                let g = grads[i].clone().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                named.insert(name.clone(), g);
            }
        }
        Ok(Gradients { per_node: grads, named })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(slot.data_mut());
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::StopGradient(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = node.value.cols();
                // C = A·B : dA = dC·Bᵀ, dB = Aᵀ·dC
                // C = A·Bᵀ: dA = dC·B,  dB = dCᵀ·A
                self.accumulate(grads, *a, |da| gemm(m, n, k, gd, false, bv.data(), !trans_b, da, true));
                self.accumulate(grads, *b, |db| {
                    if *trans_b {
                        gemm(n, m, k, gd, true, av.data(), false, db, true)
                    } else {
                        gemm(k, m, n, av.data(), true, gd, false, db, true)
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, gd));
                self.accumulate(grads, *b, |d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, gd));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for ((x, gy), w) in d.iter_mut().zip(gd).zip(bv) {
                        *x += gy * w;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((x, gy), w) in d.iter_mut().zip(gd).zip(av) {
                        *x += gy * w;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += c * y));
            }
            Op::AddRow { a, row } => {
                self.accumulate(grads, *a, |d| add_into(d, gd));
                let n = node.value.cols();
                self.accumulate(grads, *row, |d| {
                    for chunk in gd.chunks(n) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = node.value.cols();
                let gain_v = self.value(*gain).data();
                self.accumulate(grads, *x, |dx| {
                    for (r, (dxr, gr)) in dx.chunks_mut(n).zip(gd.chunks(n)).enumerate() {
                        let h = &xhat[r * n..(r + 1) * n];
                        let dh: Vec<f64> = gr.iter().zip(gain_v).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dxr[j] += inv_std[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                });
                self.accumulate(grads, *gain, |dg| {
                    for (gr, h) in gd.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * h[j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |db| {
                    for gr in gd.chunks(n) {
                        add_into(db, gr);
                    }
                });
            }
            Op::Softmax(x) => {
                let n = node.value.cols();
                let p = node.value.data();
                self.accumulate(grads, *x, |dx| {
                    for ((dxr, gr), pr) in dx.chunks_mut(n).zip(gd.chunks(n)).zip(p.chunks(n)) {
                        let dot: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dxr[j] += pr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |d| {
                    for ((dv, gy), xi) in d.iter_mut().zip(gd).zip(xv) {
                        *dv += gy * gelu_grad(*xi);
                    }
                });
            }
            Op::Slice { a, r0, c0 } => {
                let (nr, nc) = (node.value.rows(), node.value.cols());
                let ac = self.value(*a).cols();
                self.accumulate(grads, *a, |d| {
                    for r in 0..nr {
                        let dst = &mut d[(r0 + r) * ac + c0..(r0 + r) * ac + c0 + nc];
                        add_into(dst, &gd[r * nc..(r + 1) * nc]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    self.accumulate(grads, *p, |d| {
                        for (r, dr) in d.chunks_mut(w).enumerate() {
                            add_into(dr, &gd[r * n + offset..r * n + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.accumulate(grads, *p, |d| add_into(d, &gd[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Gather { table, ids } => {
                let n = node.value.cols();
                self.accumulate(grads, *table, |d| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * n..(id + 1) * n], &gd[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.value(*logits).cols();
                let up = gd[0];
                self.accumulate(grads, *logits, |d| {
                    for (k, &(r, t)) in targets.iter().enumerate() {
                        let row = &mut d[r * v..(r + 1) * v];
                        for j in 0..v {
                            row[j] += up * probs[k * v + j];
                        }
                        row[t] -= up;
                    }
                });
            }
            Op::Sum(a) => {
                let up = gd[0];
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|x| *x += up));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
