//! Differentiable ops: forward builders on [`Tape`] and their backward rules.

use super::kernels::{dot, gemm, softmax_row, Mat};
use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Norms at or below this are treated as degenerate by `l2_normalize`.
pub const NORM_EPS: f64 = 1e-12;
pub const LAYER_NORM_EPS: f64 = 1e-6;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Abs(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        inv_t: f64,
        cols: usize,
    },
    L2Normalize {
        x: Var,
        cols: usize,
        norms: Vec<f64>,
    },
    Gelu {
        x: Var,
        th: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cols: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        qkv: Var,
        seqs: usize,
        len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
        cols: usize,
    },
    ConcatRows(Var, Var),
    BatchedGram {
        x: Var,
        groups: usize,
        rows: usize,
        cols: usize,
    },
    ChunkDot {
        x: Var,
        weights: Vec<f64>,
    },
    PairwiseSqDist {
        a: Var,
        b: Var,
        cols: usize,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } | Add(a, b) | Mul(a, b) | AddTiled(a, b) | ConcatRows(a, b) => {
                vec![*a, *b]
            }
            PairwiseSqDist { a, b, .. } => vec![*a, *b],
            Linear { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Scale(x, _) | Sum(x) | Mean(x) | Abs(x) | Reshape(x) => vec![*x],
            Gelu { x, .. } => vec![*x],
            Softmax { x, .. }
            | L2Normalize { x, .. }
            | GatherRows { x, .. }
            | BatchedGram { x, .. }
            | ChunkDot { x, .. } => vec![*x],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Attention { qkv, .. } => vec![*qkv],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    /// Propagates the adjoint `g` of node `id` into its inputs' adjoints.
    pub(crate) fn backward(
        &self,
        id: usize,
        g: &[f64],
        values: &[Tensor],
        adj: &mut [Option<Vec<f64>>],
    ) {
        let val = |v: Var| values[v.0].data.as_slice();
        let wants = |v: Var| values[v.0].requires_grad;
        match self {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if wants(*a) {
                    // dA = G Bᵀ
                    let da = slot(adj, *a, m * k);
                    gemm(m, n, k, 1.0, Mat::rows(g, n), Mat::t(val(*b), n), 1.0, da, k);
                }
                if wants(*b) {
                    // dB = Aᵀ G
                    let db = slot(adj, *b, k * n);
                    gemm(k, m, n, 1.0, Mat::t(val(*a), k), Mat::rows(g, n), 1.0, db, n);
                }
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            } => {
                let (rows, din, dout) = (*rows, *din, *dout);
                if wants(*x) {
                    let dx = slot(adj, *x, rows * din);
                    gemm(rows, dout, din, 1.0, Mat::rows(g, dout), Mat::rows(val(*w), din), 1.0, dx, din);
                }
                if wants(*w) {
                    let dw = slot(adj, *w, dout * din);
                    gemm(dout, rows, din, 1.0, Mat::t(g, dout), Mat::rows(val(*x), din), 1.0, dw, din);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        let db = slot(adj, *b, dout);
                        for row in g.chunks_exact(dout) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        add_into(slot(adj, v, g.len()), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = val(*b);
                    let da = slot(adj, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if wants(*b) {
                    let av = val(*a);
                    let db = slot(adj, *b, g.len());
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddTiled(x, y) => {
                if wants(*x) {
                    add_into(slot(adj, *x, g.len()), g);
                }
                if wants(*y) {
                    let n = values[y.0].data.len();
                    let dy = slot(adj, *y, n);
                    for chunk in g.chunks_exact(n) {
                        add_into(dy, chunk);
                    }
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    let dx = slot(adj, *x, g.len());
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                if wants(*x) {
                    let n = values[x.0].data.len();
                    let scale = if matches!(self, Op::Mean(_)) { 1.0 / n as f64 } else { 1.0 };
                    let gv = g[0] * scale;
                    slot(adj, *x, n).iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::Abs(x) => {
                if wants(*x) {
                    let xv = val(*x);
                    let dx = slot(adj, *x, g.len());
                    for i in 0..g.len() {
                        dx[i] += g[i] * sign(xv[i]);
                    }
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    add_into(slot(adj, *x, g.len()), g);
                }
            }
            Op::Softmax { x, inv_t, cols } => {
                if wants(*x) {
                    let y = values[id].data.as_slice();
                    let dx = slot(adj, *x, g.len());
                    for ((dr, yr), gr) in dx.chunks_exact_mut(*cols).zip(y.chunks_exact(*cols)).zip(g.chunks_exact(*cols)) {
                        let s = dot(yr, gr);
                        for j in 0..*cols {
                            dr[j] += yr[j] * (gr[j] - s) * inv_t;
                        }
                    }
                }
            }
            Op::L2Normalize { x, cols, norms } => {
                if wants(*x) {
                    let y = values[id].data.as_slice();
                    let dx = slot(adj, *x, g.len());
                    for (r, ((dr, yr), gr)) in dx
                        .chunks_exact_mut(*cols)
                        .zip(y.chunks_exact(*cols))
                        .zip(g.chunks_exact(*cols))
                        .enumerate()
                    {
                        let s = dot(yr, gr);
                        let inv = 1.0 / norms[r];
                        for j in 0..*cols {
                            dr[j] += (gr[j] - yr[j] * s) * inv;
                        }
                    }
                }
            }
            Op::Gelu { x, th } => {
                if wants(*x) {
                    let xv = val(*x);
                    let dx = slot(adj, *x, g.len());
                    for i in 0..g.len() {
                        dx[i] += g[i] * gelu_grad(xv[i], th[i]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                xhat,
                rstd,
            } => {
                let cols = *cols;
                let gam = val(*gamma);
                if wants(*x) {
                    let dx = slot(adj, *x, g.len());
                    let mut dxhat = vec![0.0; cols];
                    for (r, ((dr, xr), gr)) in dx
                        .chunks_exact_mut(cols)
                        .zip(xhat.chunks_exact(cols))
                        .zip(g.chunks_exact(cols))
                        .enumerate()
                    {
                        for j in 0..cols {
                            dxhat[j] = gr[j] * gam[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dx = dot(&dxhat, xr) / cols as f64;
                        for j in 0..cols {
                            dr[j] += rstd[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                }
                if wants(*gamma) {
                    let dg = slot(adj, *gamma, cols);
                    for (xr, gr) in xhat.chunks_exact(cols).zip(g.chunks_exact(cols)) {
                        for j in 0..cols {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if wants(*beta) {
                    let db = slot(adj, *beta, cols);
                    for gr in g.chunks_exact(cols) {
                        add_into(db, gr);
                    }
                }
            }
            Op::Attention {
                qkv,
                seqs,
                len,
                heads,
                probs,
            } => {
                if wants(*qkv) {
                    let n = values[qkv.0].data.len();
                    let dqkv = slot(adj, *qkv, n);
                    attention_backward(val(*qkv), probs, g, dqkv, *seqs, *len, *heads);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if wants(*logits) {
                    let rows = targets.len();
                    let cols = probs.len() / rows;
                    let scale = g[0] / rows as f64;
                    let dl = slot(adj, *logits, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..cols {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[r * cols + j] += scale * (probs[r * cols + j] - onehot);
                        }
                    }
                }
            }
            Op::GatherRows { x, idx, cols } => {
                if wants(*x) {
                    let n = values[x.0].data.len();
                    let dx = slot(adj, *x, n);
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut dx[src * cols..(src + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let na = values[a.0].data.len();
                if wants(*a) {
                    add_into(slot(adj, *a, na), &g[..na]);
                }
                if wants(*b) {
                    add_into(slot(adj, *b, g.len() - na), &g[na..]);
                }
            }
            Op::BatchedGram { x, groups, rows, cols } => {
                if wants(*x) {
                    let (rows, cols) = (*rows, *cols);
                    let xv = val(*x);
                    let dx = slot(adj, *x, xv.len());
                    let mut sym = vec![0.0; rows * rows];
                    for s in 0..*groups {
                        let gs = &g[s * rows * rows..(s + 1) * rows * rows];
                        for i in 0..rows {
                            for j in 0..rows {
                                sym[i * rows + j] = gs[i * rows + j] + gs[j * rows + i];
                            }
                        }
                        let xs = &xv[s * rows * cols..(s + 1) * rows * cols];
                        let ds = &mut dx[s * rows * cols..(s + 1) * rows * cols];
                        gemm(rows, rows, cols, 1.0, Mat::rows(&sym, rows), Mat::rows(xs, cols), 1.0, ds, cols);
                    }
                }
            }
            Op::ChunkDot { x, weights } => {
                if wants(*x) {
                    let n = values[x.0].data.len();
                    let dx = slot(adj, *x, n);
                    for (chunk, gc) in dx.chunks_exact_mut(weights.len()).zip(g) {
                        for (d, w) in chunk.iter_mut().zip(weights) {
                            *d += gc * w;
                        }
                    }
                }
            }
            Op::PairwiseSqDist { a, b, cols } => {
                let cols = *cols;
                let (av, bv) = (val(*a), val(*b));
                let (ra, rb) = (av.len() / cols, bv.len() / cols);
                if wants(*a) {
                    let da = slot(adj, *a, av.len());
                    for i in 0..ra {
                        for j in 0..rb {
                            let gij = 2.0 * g[i * rb + j];
                            for c in 0..cols {
                                da[i * cols + c] += gij * (av[i * cols + c] - bv[j * cols + c]);
                            }
                        }
                    }
                }
                if wants(*b) {
                    let db = slot(adj, *b, bv.len());
                    for i in 0..ra {
                        for j in 0..rb {
                            let gij = 2.0 * g[i * rb + j];
                            for c in 0..cols {
                                db[j * cols + c] -= gij * (av[i * cols + c] - bv[j * cols + c]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn gelu_tanh(x: f64) -> f64 {
    (GELU_C * (x + GELU_A * x * x * x)).tanh()
}

// th is the cached inner tanh from the forward pass
fn gelu_grad(x: f64, th: f64) -> f64 {
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn attention_forward(qkv: &[f64], seqs: usize, len: usize, heads: usize, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let rs = 3 * dim;
    let mut out = vec![0.0; seqs * len * dim];
    let mut probs = vec![0.0; seqs * heads * len * len];
    for s in 0..seqs {
        let base = s * len * rs;
        for h in 0..heads {
            let q = &qkv[base + h * dh..];
            let k = &qkv[base + dim + h * dh..];
            let v = &qkv[base + 2 * dim + h * dh..];
            let p = &mut probs[(s * heads + h) * len * len..(s * heads + h + 1) * len * len];
            gemm(len, dh, len, scale, Mat::strided(q, rs, 1), Mat::strided(k, 1, rs), 0.0, p, len);
            for row in p.chunks_exact_mut(len) {
                softmax_row(row, 1.0);
            }
            let o = &mut out[s * len * dim + h * dh..];
            gemm(len, len, dh, 1.0, Mat::rows(p, len), Mat::strided(v, rs, 1), 0.0, o, dim);
        }
    }
    (out, probs)
}

fn attention_backward(
    qkv: &[f64],
    probs: &[f64],
    g: &[f64],
    dqkv: &mut [f64],
    seqs: usize,
    len: usize,
    heads: usize,
) {
    let dim = g.len() / (seqs * len);
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let rs = 3 * dim;
    let mut dp = vec![0.0; len * len];
    for s in 0..seqs {
        let base = s * len * rs;
        let gs = &g[s * len * dim..];
        for h in 0..heads {
            let p = &probs[(s * heads + h) * len * len..(s * heads + h + 1) * len * len];
            let go = &gs[h * dh..];
            // dP = dO Vᵀ
            gemm(len, dh, len, 1.0, Mat::strided(go, dim, 1), Mat::strided(&qkv[base + 2 * dim + h * dh..], 1, rs), 0.0, &mut dp, len);
            // dV += Pᵀ dO
            gemm(len, len, dh, 1.0, Mat::t(p, len), Mat::strided(go, dim, 1), 1.0, &mut dqkv[base + 2 * dim + h * dh..], rs);
            // dS = P ⊙ (dP − rowsum(dP ⊙ P))
            for (dr, pr) in dp.chunks_exact_mut(len).zip(p.chunks_exact(len)) {
                let sdot = dot(dr, pr);
                for j in 0..len {
                    dr[j] = pr[j] * (dr[j] - sdot);
                }
            }
            // dQ += scale · dS K ; dK += scale · dSᵀ Q
            gemm(len, len, dh, scale, Mat::rows(&dp, len), Mat::strided(&qkv[base + dim + h * dh..], rs, 1), 1.0, &mut dqkv[base + h * dh..], rs);
            gemm(len, len, dh, scale, Mat::t(&dp, len), Mat::strided(&qkv[base + h * dh..], rs, 1), 1.0, &mut dqkv[base + dim + h * dh..], rs);
        }
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, s, &[0, 0])),
    }
}

impl Tape {
    /// Matrix product of `a` [m×k] and `b` [k×n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_2d("matmul", self.value(a))?;
        let (k2, n) = require_2d("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, Mat::rows(self.data(a), k), Mat::rows(self.data(b), n), 0.0, &mut out, n);
        Ok(self.push_op(vec![m, n], out, Op::MatMul { a, b, m, k, n }))
    }

    /// `x Wᵀ + b` with `x` [rows×in], `w` [out×in] and optional `b` [out].
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, din) = self.value(x).rows_cols();
        let (dout, din2) = require_2d("linear", self.value(w))?;
        if din != din2 {
            return Err(Error::shape("linear", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.value(b).numel() != dout {
                return Err(Error::shape("linear bias", self.shape(b), &[dout]));
            }
        }
        let mut out = vec![0.0; rows * dout];
        gemm(rows, din, dout, 1.0, Mat::rows(self.data(x), din), Mat::t(self.data(w), din), 0.0, &mut out, dout);
        if let Some(b) = b {
            let bv = self.data(b);
            for row in out.chunks_exact_mut(dout) {
                add_into(row, bv);
            }
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().expect("linear input has a last dim") = dout;
        Ok(self.push_op(shape, out, Op::Linear { x, w, b, rows, din, dout }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        Ok(self.push_op(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        Ok(self.push_op(self.shape(a).to_vec(), out, Op::Mul(a, b)))
    }

    /// Adds `y` repeated over the leading rows of `x` (bias-add, or a
    /// per-position table added to every sequence of a batch).
    pub fn add_tiled(&mut self, x: Var, y: Var) -> Result<Var> {
        let (nx, ny) = (self.value(x).numel(), self.value(y).numel());
        let last_ok = self.shape(x).last() == self.shape(y).last();
        if ny == 0 || nx % ny != 0 || !last_ok {
            return Err(Error::shape("add_tiled", self.shape(x), self.shape(y)));
        }
        let yv = self.data(y);
        let mut out = self.data(x).to_vec();
        for chunk in out.chunks_exact_mut(ny) {
            add_into(chunk, yv);
        }
        Ok(self.push_op(self.shape(x).to_vec(), out, Op::AddTiled(x, y)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.data(x).iter().map(|v| v * c).collect();
        self.push_op(self.shape(x).to_vec(), out, Op::Scale(x, c))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push_op(vec![], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.data(x).iter().sum::<f64>() / n;
        self.push_op(vec![], vec![s], Op::Mean(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|v| v.abs()).collect();
        self.push_op(self.shape(x).to_vec(), out, Op::Abs(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.data(x).to_vec();
        Ok(self.push_op(shape.to_vec(), out, Op::Reshape(x)))
    }

    /// Row-wise `softmax(x / t)` over the last dimension.
    pub fn softmax_temp(&mut self, x: Var, t: f64) -> Result<Var> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::Parameter(format!("softmax temperature must be positive, got {t}")));
        }
        let (rows, cols) = self.value(x).rows_cols();
        if rows == 0 || cols == 0 {
            return Err(Error::Parameter("softmax over an empty tensor".into()));
        }
        let inv_t = 1.0 / t;
        let mut out = self.data(x).to_vec();
        for row in out.chunks_exact_mut(cols) {
            softmax_row(row, inv_t);
        }
        Ok(self.push_op(self.shape(x).to_vec(), out, Op::Softmax { x, inv_t, cols }))
    }

    /// Row-wise L2 normalization over the last dimension.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = self.value(x).rows_cols();
        let mut out = self.data(x).to_vec();
        let mut norms = Vec::with_capacity(out.len() / cols.max(1));
        for (r, row) in out.chunks_exact_mut(cols).enumerate() {
            let n = dot(row, row).sqrt();
            if !(n > NORM_EPS) {
                return Err(Error::Degenerate(format!("row {r} has norm {n:e}, cannot normalize")));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(self.push_op(self.shape(x).to_vec(), out, Op::L2Normalize { x, cols, norms }))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let th: Vec<f64> = self.data(x).iter().map(|&v| gelu_tanh(v)).collect();
        let out = self.data(x).iter().zip(&th).map(|(&v, &t)| 0.5 * v * (1.0 + t)).collect();
        self.push_op(self.shape(x).to_vec(), out, Op::Gelu { x, th })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.data(x);
        let (gv, bv) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..cols {
                let h = (row[j] - mean) * rs;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * gv[j] + bv[j];
            }
        }
        Ok(self.push_op(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm { x, gamma, beta, cols, xhat, rstd },
        ))
    }

    /// Multi-head scaled dot-product self-attention over `seqs` independent
    /// sequences of `len` tokens. `qkv` is `[seqs·len, 3·dim]` laid out as
    /// `[q | k | v]`; the result is `[seqs·len, dim]`.
    pub fn attention(&mut self, qkv: Var, seqs: usize, len: usize, heads: usize) -> Result<Var> {
        let (rows, c3) = self.value(qkv).rows_cols();
        if rows != seqs * len || c3 % 3 != 0 || (c3 / 3) % heads != 0 {
            return Err(Error::shape("attention", self.shape(qkv), &[seqs * len, c3, heads]));
        }
        let dim = c3 / 3;
        let (out, probs) = attention_forward(self.data(qkv), seqs, len, heads, dim);
        Ok(self.push_op(vec![rows, dim], out, Op::Attention { qkv, seqs, len, heads, probs }))
    }

    /// Attention probabilities saved by an `attention` node, laid out as
    /// `[seqs, heads, len, len]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.ops[v.0] {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean softmax cross-entropy of `logits` [rows×classes] against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(logits).rows_cols();
        if rows != targets.len() || rows == 0 {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Contract(format!("target {t} out of range for {cols} classes")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_exact_mut(cols).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let loss = loss / rows as f64;
        Ok(self.push_op(
            vec![],
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
        ))
    }

    /// Rows of `x` [r×c] selected (with repetition allowed) by `idx`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = require_2d("gather_rows", self.value(x))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!("row index {bad} out of range for {rows} rows")));
        }
        let xv = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&xv[i * cols..(i + 1) * cols]);
        }
        Ok(self.push_op(vec![idx.len(), cols], out, Op::GatherRows { x, idx: idx.to_vec(), cols }))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).rows_cols();
        let (rb, cb) = self.value(b).rows_cols();
        if ca != cb {
            return Err(Error::shape("concat_rows", self.shape(a), self.shape(b)));
        }
        let mut out = self.data(a).to_vec();
        out.extend_from_slice(self.data(b));
        Ok(self.push_op(vec![ra + rb, ca], out, Op::ConcatRows(a, b)))
    }

    /// Per-group Gram matrices: `x` holds `groups` stacked [rows×cols] blocks;
    /// the result is `[groups, rows, rows]` with block `s` equal to `X_s X_sᵀ`.
    pub fn batched_gram(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (total, cols) = self.value(x).rows_cols();
        if groups == 0 || total % groups != 0 {
            return Err(Error::shape("batched_gram", self.shape(x), &[groups]));
        }
        let rows = total / groups;
        let xv = self.data(x);
        let mut out = vec![0.0; groups * rows * rows];
        for s in 0..groups {
            let xs = &xv[s * rows * cols..(s + 1) * rows * cols];
            let os = &mut out[s * rows * rows..(s + 1) * rows * rows];
            gemm(rows, cols, rows, 1.0, Mat::rows(xs, cols), Mat::t(xs, cols), 0.0, os, rows);
        }
        Ok(self.push_op(vec![groups, rows, rows], out, Op::BatchedGram { x, groups, rows, cols }))
    }

    /// Dot product of each consecutive `|w|`-sized chunk of `x` with the
    /// constant weights `w`; the result has one entry per chunk.
    pub fn chunk_dot(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let n = self.value(x).numel();
        if weights.is_empty() || n % weights.len() != 0 {
            return Err(Error::shape("chunk_dot", self.shape(x), &[weights.len()]));
        }
        let out: Vec<f64> = self.data(x).chunks_exact(weights.len()).map(|c| dot(c, weights)).collect();
        Ok(self.push_op(vec![out.len()], out, Op::ChunkDot { x, weights: weights.to_vec() }))
    }

    /// `Σ_i x_i · w_{i mod |w|}`, with the constant weights tiled over `x`.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let per_chunk = self.chunk_dot(x, weights)?;
        Ok(self.sum(per_chunk))
    }

    /// Squared Euclidean distances between the rows of `a` [r×c] and `b` [s×c].
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).rows_cols();
        let (rb, cb) = self.value(b).rows_cols();
        if ca != cb {
            return Err(Error::shape("pairwise_sq_dist", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.data(a), self.data(b));
        let mut out = vec![0.0; ra * rb];
        for i in 0..ra {
            for j in 0..rb {
                out[i * rb + j] = av[i * ca..(i + 1) * ca]
                    .iter()
                    .zip(&bv[j * ca..(j + 1) * ca])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
            }
        }
        Ok(self.push_op(vec![ra, rb], out, Op::PairwiseSqDist { a, b, cols: ca }))
    }
}
