//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records row-major matrices and the operations that produced
//! them. [`Tape::backward`] walks the record in reverse and returns the
//! gradient of a scalar node with respect to every parameter leaf.

use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape mismatch");
        Tensor { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;

enum Op {
    Input,
    Param(usize),
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        q_group: usize,
        kv_group: usize,
        probs: Vec<f64>,
    },
    RowScale(NodeId, Vec<f64>),
    Mse(NodeId, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// `c = a · b` (`beta = 0`) or `c += a · b` (`beta = 1`), with explicit
/// row/column strides so transposes need no copies.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every index reachable through the given
    // shapes and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
fn gelu(x: f64) -> (f64, f64) {
    let c = (2.0 / PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * c * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input)
    }

    /// Trainable leaf identified by `index` in the caller's parameter list.
    pub fn param(&mut self, index: usize, t: &Tensor) -> NodeId {
        self.push(t.clone(), Op::Param(index))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.rows, "matmul inner dimension");
        let (m, k, n) = (ta.rows, ta.cols, tb.cols);
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, &ta.data, (k, 1), &tb.data, (n, 1), 0.0, &mut out.data);
        self.push(out, Op::MatMul(a, b))
    }

    /// Adds a `1 × cols` row vector to every row.
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (tx, tb) = (self.value(x), self.value(b));
        assert!(tb.rows == 1 && tb.cols == tx.cols, "add_row shape");
        let mut out = tx.clone();
        for row in out.data.chunks_mut(tb.cols) {
            for (o, b) in row.iter_mut().zip(&tb.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(ta.rows == tb.rows && ta.cols == tb.cols, "add shape");
        let mut out = ta.clone();
        out.add_assign(tb);
        self.push(out, Op::Add(a, b))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let data = tx.data.iter().map(|&v| gelu(v).0).collect();
        let out = Tensor::from_vec(tx.rows, tx.cols, data);
        self.push(out, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows, tx.cols);
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        assert!(g.len() == cols && b.len() == cols, "layer_norm shape");
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = s;
            for c in 0..cols {
                let h = (row[c] - mean) * s;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = g[c] * h + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Grouped multi-head scaled dot-product attention. Query row `r`
    /// belongs to group `r / q_group` and attends to key/value rows
    /// `[g·kv_group, (g+1)·kv_group)`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        q_group: usize,
        kv_group: usize,
    ) -> NodeId {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols;
        assert!(tk.cols == d && tv.cols == d && tk.rows == tv.rows, "attention shape");
        assert!(d % heads == 0, "width not divisible by heads");
        assert_eq!(tq.rows / q_group, tk.rows / kv_group, "attention groups");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; tq.rows * heads * kv_group];
        let mut out = Tensor::zeros(tq.rows, d);
        let mut scores = vec![0.0; kv_group];
        for r in 0..tq.rows {
            let base = (r / q_group) * kv_group;
            let qr = tq.row(r);
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let mut max = f64::NEG_INFINITY;
                for j in 0..kv_group {
                    let kr = &tk.row(base + j)[cols.clone()];
                    let s = qr[cols.clone()].iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let mut total = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let p = &mut probs[(r * heads + h) * kv_group..(r * heads + h + 1) * kv_group];
                for j in 0..kv_group {
                    p[j] = scores[j] / total;
                    let vr = &tv.row(base + j)[cols.clone()];
                    let o = &mut out.data[r * d + h * dh..r * d + (h + 1) * dh];
                    for (o, v) in o.iter_mut().zip(vr) {
                        *o += p[j] * v;
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                q_group,
                kv_group,
                probs,
            },
        )
    }

    /// Multiplies row `r` by the constant `scale[r]`.
    pub fn row_scale(&mut self, x: NodeId, scale: Vec<f64>) -> NodeId {
        let tx = self.value(x);
        assert_eq!(tx.rows, scale.len(), "row_scale length");
        let mut out = tx.clone();
        for (row, s) in out.data.chunks_mut(tx.cols).zip(&scale) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        self.push(out, Op::RowScale(x, scale))
    }

    /// Mean squared error against a constant target; a `1 × 1` node.
    pub fn mse(&mut self, x: NodeId, target: Vec<f64>) -> NodeId {
        let tx = self.value(x);
        assert_eq!(tx.data.len(), target.len(), "mse length");
        let loss = tx
            .data
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / target.len() as f64;
        self.push(Tensor::from_vec(1, 1, vec![loss]), Op::Mse(x, target))
    }

    /// Gradients of scalar node `loss` with respect to each parameter leaf,
    /// indexed like the caller's parameter list (`None` when unused).
    pub fn backward(&self, loss: NodeId, n_params: usize) -> Vec<Option<Tensor>> {
        assert_eq!(self.value(loss).data.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::from_vec(1, 1, vec![1.0]));
        let mut out: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();

        fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Input => {}
                Op::Param(p) => match &mut out[*p] {
                    Some(existing) => existing.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows, ta.cols, tb.cols);
                    let mut ga = Tensor::zeros(m, k);
                    // dA = dC · Bᵀ
                    gemm(m, n, k, &g.data, (n, 1), &tb.data, (1, n), 0.0, &mut ga.data);
                    let mut gb = Tensor::zeros(k, n);
                    // dB = Aᵀ · dC
                    gemm(k, m, n, &ta.data, (1, k), &g.data, (n, 1), 0.0, &mut gb.data);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(x, b) => {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for row in g.data.chunks(g.cols) {
                        for (s, v) in gb.data.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Gelu(x) => {
                    let tx = self.value(*x);
                    let mut gx = g;
                    for (d, &v) in gx.data.iter_mut().zip(&tx.data) {
                        *d *= gelu(v).1;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (rows, cols) = (g.rows, g.cols);
                    let gm = &self.value(*gamma).data;
                    let mut gg = Tensor::zeros(1, cols);
                    let mut gbeta = Tensor::zeros(1, cols);
                    let mut gx = Tensor::zeros(rows, cols);
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let gy = g.row(r);
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let (mut sum, mut dot) = (0.0, 0.0);
                        for c in 0..cols {
                            gg.data[c] += gy[c] * xh[c];
                            gbeta.data[c] += gy[c];
                            dxhat[c] = gy[c] * gm[c];
                            sum += dxhat[c];
                            dot += dxhat[c] * xh[c];
                        }
                        let n = cols as f64;
                        for c in 0..cols {
                            gx.data[r * cols + c] =
                                rstd[r] / n * (n * dxhat[c] - sum - xh[c] * dot);
                        }
                    }
                    accumulate(&mut grads, *gamma, gg);
                    accumulate(&mut grads, *beta, gbeta);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    q_group,
                    kv_group,
                    probs,
                } => {
                    let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (heads, q_group, kv_group) = (*heads, *q_group, *kv_group);
                    let d = tq.cols;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Tensor::zeros(tq.rows, d);
                    let mut gk = Tensor::zeros(tk.rows, d);
                    let mut gv = Tensor::zeros(tv.rows, d);
                    let mut dp = vec![0.0; kv_group];
                    for r in 0..tq.rows {
                        let base = (r / q_group) * kv_group;
                        let go = g.row(r);
                        for h in 0..heads {
                            let c0 = h * dh;
                            let p = &probs[(r * heads + h) * kv_group..(r * heads + h + 1) * kv_group];
                            let mut weighted = 0.0;
                            for j in 0..kv_group {
                                let kv = (base + j) * d + c0;
                                let mut acc = 0.0;
                                for c in 0..dh {
                                    acc += go[c0 + c] * tv.data[kv + c];
                                    gv.data[kv + c] += p[j] * go[c0 + c];
                                }
                                dp[j] = acc;
                                weighted += p[j] * acc;
                            }
                            for j in 0..kv_group {
                                let ds = p[j] * (dp[j] - weighted) * scale;
                                let kv = (base + j) * d + c0;
                                for c in 0..dh {
                                    gq.data[r * d + c0 + c] += ds * tk.data[kv + c];
                                    gk.data[kv + c] += ds * tq.data[r * d + c0 + c];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *v, gv);
                }
                Op::RowScale(x, scale) => {
                    let mut gx = g;
                    let cols = gx.cols;
                    for (row, s) in gx.data.chunks_mut(cols).zip(scale) {
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Mse(x, target) => {
                    let tx = self.value(*x);
                    let coeff = 2.0 * g.data[0] / target.len() as f64;
                    let data = tx
                        .data
                        .iter()
                        .zip(target)
                        .map(|(a, b)| coeff * (a - b))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(tx.rows, tx.cols, data));
                }
            }
        }
        out
    }
}
