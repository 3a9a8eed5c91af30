//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`], so a graph is cheap to build per sample
//! and is dropped after `backward`. With gradients disabled the same code
//! path evaluates the model without recording backward state.

use num_traits::Float;

use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Mat;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'p, S> {
    Owned(Mat<S>),
    Borrowed(&'p Mat<S>),
}

impl<S> Value<'_, S> {
    fn get(&self) -> &Mat<S> {
        match self {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }
}

enum Op<S> {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        inv_std: Vec<S>,
    },
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    MeanRows(Var),
    MeanCols(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Mat<S>>,
    },
    AdditiveScores {
        a: Var,
        b: Var,
        v: Var,
    },
    SampleRows {
        x: Var,
        pos: Var,
        lo: Vec<usize>,
        frac: Vec<S>,
    },
    Clamp {
        x: Var,
        lo: S,
        hi: S,
    },
    Mse(Var, Var),
    Bce {
        p: Var,
        y: S,
    },
    Sum(Var),
}

struct Node<'p, S> {
    value: Value<'p, S>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Graph<'p, S> {
    params: &'p ParamStore<S>,
    nodes: Vec<Node<'p, S>>,
    param_nodes: Vec<Option<Var>>,
    grad_enabled: bool,
}

/// Lower clamp bound applied to probabilities before the log in [`Graph::bce`].
pub const PROB_EPS: f64 = 1e-7;

impl<'p, S: Scalar> Graph<'p, S> {
    /// Graph that records backward state.
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Self::with_grad(params, true)
    }

    /// Graph for inference only.
    pub fn inference(params: &'p ParamStore<S>) -> Self {
        Self::with_grad(params, false)
    }

    fn with_grad(params: &'p ParamStore<S>, grad_enabled: bool) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(1024),
            param_nodes: vec![None; params.len()],
            grad_enabled,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, v: Var) -> &Mat<S> {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input.
    pub fn constant(&mut self, value: Mat<S>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn tracked_input(&mut self, value: Mat<S>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
            needs_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Borrowed(self.params.get(id)),
            op: Op::Param,
            needs_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `x + 1·b` with `b` a `1×cols` row broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows(), 1, "bias must be a row vector");
        assert_eq!(bias.cols(), self.value(x).cols(), "bias width");
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(bias.as_slice()) {
                *o += bv;
            }
        }
        self.push(out, Op::AddBias(x, b), &[x, b])
    }

    /// `x ⊙ (1·r)` with `r` a `1×cols` row broadcast over rows.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Var {
        let row = self.value(r);
        assert_eq!(row.rows(), 1, "scale must be a row vector");
        assert_eq!(row.cols(), self.value(x).cols(), "scale width");
        let mut out = self.value(x).clone();
        for i in 0..out.rows() {
            for (o, &rv) in out.row_mut(i).iter_mut().zip(row.as_slice()) {
                *o *= rv;
            }
        }
        self.push(out, Op::MulRow(x, r), &[x, r])
    }

    /// Row vector `x: 1×C` repeated to `rows×C`.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Var {
        let cols = self.value(x).cols();
        let z = self.constant(Mat::zeros(rows, cols));
        self.add_bias(z, x)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shapes");
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(S::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(Float::tanh);
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, x: Var) -> Var {
        let eps = S::lit(1e-5);
        let input = self.value(x);
        let (rows, cols) = input.shape();
        let n = S::lit(cols as f64);
        let mut out = input.clone();
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = out.row_mut(r);
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let is = S::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(out, Op::LayerNormRows { x, inv_std }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        assert!(
            parts.iter().all(|&p| self.shape(p).0 == rows),
            "concat_cols rows"
        );
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let input = self.value(x);
        assert!(start + len <= input.cols(), "slice_cols range");
        let out = Mat::from_fn(input.rows(), len, |r, c| input.get(r, start + c));
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        assert!(
            parts.iter().all(|&p| self.shape(p).1 == cols),
            "concat_rows cols"
        );
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).as_slice());
        }
        let rows = data.len() / cols.max(1);
        let out = Mat::from_vec(rows, cols, data).expect("concat_rows shape");
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let input = self.value(x);
        assert!(start + len <= input.rows(), "slice_rows range");
        let cols = input.cols();
        let out = Mat::from_vec(
            len,
            cols,
            input.as_slice()[start * cols..(start + len) * cols].to_vec(),
        )
        .expect("slice_rows shape");
        self.push(out, Op::SliceRows { x, start }, &[x])
    }

    /// Average over rows: `R×C → 1×C`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let input = self.value(x);
        let n = S::lit(input.rows() as f64);
        let out = Mat::from_fn(1, input.cols(), |_, c| {
            (0..input.rows()).map(|r| input.get(r, c)).sum::<S>() / n
        });
        self.push(out, Op::MeanRows(x), &[x])
    }

    /// Average over columns: `R×C → R×1`.
    pub fn mean_cols(&mut self, x: Var) -> Var {
        let input = self.value(x);
        let n = S::lit(input.cols() as f64);
        let out = Mat::from_fn(input.rows(), 1, |r, _| {
            input.row(r).iter().copied().sum::<S>() / n
        });
        self.push(out, Op::MeanCols(x), &[x])
    }

    /// Scaled dot-product attention split into `heads` column groups.
    /// `q: Tq×D`, `k, v: Tk×D` → `Tq×D`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (tq, d) = qm.shape();
        let tk = km.rows();
        assert_eq!(km.shape(), (tk, d), "attention key shape");
        assert_eq!(vm.shape(), (tk, d), "attention value shape");
        assert!(heads >= 1 && d % heads == 0, "heads must divide width");
        let dh = d / heads;
        let scale = S::one() / S::lit(dh as f64).sqrt();
        let mut out = Mat::zeros(tq, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut p = Mat::zeros(tq, tk);
            // scores = Q_h K_hᵀ
            S::gemm(
                tq,
                dh,
                tk,
                scale,
                &qm.as_slice()[off..],
                d as isize,
                1,
                &km.as_slice()[off..],
                1,
                d as isize,
                S::zero(),
                p.as_mut_slice(),
                tk as isize,
            );
            for r in 0..tq {
                softmax_in_place(p.row_mut(r));
            }
            // out_h = P V_h
            S::gemm(
                tq,
                tk,
                dh,
                S::one(),
                p.as_slice(),
                tk as isize,
                1,
                &vm.as_slice()[off..],
                d as isize,
                1,
                S::zero(),
                &mut out.as_mut_slice()[off..],
                d as isize,
            );
            probs.push(p);
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Attention probabilities recorded by an [`Graph::attention`] node.
    pub fn attention_probs(&self, node: Var) -> Option<&[Mat<S>]> {
        match &self.nodes[node.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Additive (Bahdanau) scores `s[t][j] = vᵀ tanh(a_t + b_j)` for
    /// `a: T×D`, `b: J×D`, `v: 1×D`.
    pub fn additive_scores(&mut self, a: Var, b: Var, v: Var) -> Var {
        let (am, bm, vm) = (self.value(a), self.value(b), self.value(v));
        let d = am.cols();
        assert_eq!(bm.cols(), d, "additive_scores width");
        assert_eq!(vm.shape(), (1, d), "additive_scores v");
        let out = Mat::from_fn(am.rows(), bm.rows(), |t, j| {
            let (at, bj) = (am.row(t), bm.row(j));
            (0..d)
                .map(|i| vm.as_slice()[i] * (at[i] + bj[i]).tanh())
                .sum()
        });
        self.push(out, Op::AdditiveScores { a, b, v }, &[a, b, v])
    }

    /// Linear interpolation of the rows of `x: L×C` at fractional
    /// positions `pos: 1×P` (already within `[0, L-1]`) → `P×C`.
    pub fn sample_rows(&mut self, x: Var, pos: Var) -> Var {
        let (xm, pm) = (self.value(x), self.value(pos));
        assert_eq!(pm.rows(), 1, "positions must be a row vector");
        let (len, cols) = xm.shape();
        let mut lo = Vec::with_capacity(pm.cols());
        let mut frac = Vec::with_capacity(pm.cols());
        let mut out = Mat::zeros(pm.cols(), cols);
        let last = S::lit(len.saturating_sub(1) as f64);
        for (i, &p) in pm.as_slice().iter().enumerate() {
            let p = p.max(S::zero()).min(last);
            let (l, f) = if len < 2 {
                (0, S::zero())
            } else {
                let l = p.floor().to_usize().unwrap_or(0).min(len - 2);
                (l, p - S::lit(l as f64))
            };
            let row = out.row_mut(i);
            let r0 = xm.row(l);
            if len < 2 {
                row.copy_from_slice(r0);
            } else {
                let r1 = xm.row(l + 1);
                for c in 0..cols {
                    row[c] = (S::one() - f) * r0[c] + f * r1[c];
                }
            }
            lo.push(l);
            frac.push(f);
        }
        self.push(out, Op::SampleRows { x, pos, lo, frac }, &[x, pos])
    }

    pub fn clamp(&mut self, x: Var, lo: S, hi: S) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp { x, lo, hi }, &[x])
    }

    /// Mean squared difference → `1×1`.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mse shapes");
        let (am, bm) = (self.value(a), self.value(b));
        let n = S::lit(am.len() as f64);
        let loss = am
            .as_slice()
            .iter()
            .zip(bm.as_slice())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<S>()
            / n;
        self.push(Mat::scalar(loss), Op::Mse(a, b), &[a, b])
    }

    /// Binary cross-entropy of a `1×1` probability against label `y`, with
    /// the probability clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn bce(&mut self, p: Var, y: S) -> Var {
        let pv = self.value(p).item();
        let loss = bce_value(y, pv);
        self.push(Mat::scalar(loss), Op::Bce { p, y }, &[p])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Mat::scalar(s), Op::Sum(x), &[x])
    }

    /// Reverse sweep from a `1×1` node.
    pub fn backward(&self, loss: Var) -> Gradients<S> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Mat<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(S::one()));
        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &Mat<S>, grads: &mut [Option<Mat<S>>]) {
        let node = &self.nodes[i];
        let out = node.value.get();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let bm = self.value(*b);
                    let mut da = Mat::zeros(g.rows(), bm.rows());
                    crate::tensor::gemm_into(g, false, bm, true, S::zero(), &mut da);
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let am = self.value(*a);
                    let mut db = Mat::zeros(am.cols(), g.cols());
                    crate::tensor::gemm_into(am, true, g, false, S::zero(), &mut db);
                    accumulate(grads, *b, db);
                }
            }
            Op::AddBias(x, b) => {
                if self.needs(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.needs(*b) {
                    let db =
                        Mat::from_fn(1, g.cols(), |_, c| (0..g.rows()).map(|r| g.get(r, c)).sum());
                    accumulate(grads, *b, db);
                }
            }
            Op::MulRow(x, r) => {
                let rm = self.value(*r);
                if self.needs(*x) {
                    let dx = Mat::from_fn(g.rows(), g.cols(), |i, c| g.get(i, c) * rm.get(0, c));
                    accumulate(grads, *x, dx);
                }
                if self.needs(*r) {
                    let xm = self.value(*x);
                    let dr = Mat::from_fn(1, g.cols(), |_, c| {
                        (0..g.rows()).map(|i| g.get(i, c) * xm.get(i, c)).sum()
                    });
                    accumulate(grads, *r, dr);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.zip_map(self.value(*a), |gv, av| gv * av));
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::Relu(x) => {
                accumulate(
                    grads,
                    *x,
                    g.zip_map(out, |gv, y| if y > S::zero() { gv } else { S::zero() }),
                );
            }
            Op::Tanh(x) => {
                accumulate(grads, *x, g.zip_map(out, |gv, y| gv * (S::one() - y * y)));
            }
            Op::Sigmoid(x) => {
                accumulate(grads, *x, g.zip_map(out, |gv, y| gv * y * (S::one() - y)));
            }
            Op::SoftmaxRows(x) => {
                let mut dx = g.clone();
                for r in 0..dx.rows() {
                    softmax_backward_row(out.row(r), g.row(r), dx.row_mut(r));
                }
                accumulate(grads, *x, dx);
            }
            Op::LayerNormRows { x, inv_std } => {
                let cols = out.cols();
                let n = S::lit(cols as f64);
                let mut dx = Mat::zeros(out.rows(), cols);
                for r in 0..out.rows() {
                    let (y, gy) = (out.row(r), g.row(r));
                    let mean_g = gy.iter().copied().sum::<S>() / n;
                    let mean_gy = gy.iter().zip(y).map(|(&a, &b)| a * b).sum::<S>() / n;
                    let row = dx.row_mut(r);
                    for c in 0..cols {
                        row[c] = inv_std[r] * (gy[c] - mean_g - y[c] * mean_gy);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Transpose(x) => accumulate(grads, *x, g.transpose()),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.needs(p) {
                        let part = Mat::from_fn(g.rows(), w, |r, c| g.get(r, offset + c));
                        accumulate(grads, p, part);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.shape(*x);
                let mut dx = Mat::zeros(rows, cols);
                for r in 0..rows {
                    dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (h, w) = self.shape(p);
                    if self.needs(p) {
                        let part = Mat::from_vec(
                            h,
                            w,
                            g.as_slice()[offset * w..(offset + h) * w].to_vec(),
                        )
                        .expect("concat_rows grad");
                        accumulate(grads, p, part);
                    }
                    offset += h;
                }
            }
            Op::SliceRows { x, start } => {
                let (rows, cols) = self.shape(*x);
                let mut dx = Mat::zeros(rows, cols);
                dx.as_mut_slice()[start * cols..(start + g.rows()) * cols]
                    .copy_from_slice(g.as_slice());
                accumulate(grads, *x, dx);
            }
            Op::MeanRows(x) => {
                let (rows, cols) = self.shape(*x);
                let n = S::lit(rows as f64);
                accumulate(grads, *x, Mat::from_fn(rows, cols, |_, c| g.get(0, c) / n));
            }
            Op::MeanCols(x) => {
                let (rows, cols) = self.shape(*x);
                let n = S::lit(cols as f64);
                accumulate(grads, *x, Mat::from_fn(rows, cols, |r, _| g.get(r, 0) / n));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                self.attention_backward(*q, *k, *v, *heads, probs, g, grads);
            }
            Op::AdditiveScores { a, b, v } => {
                let (am, bm, vm) = (self.value(*a), self.value(*b), self.value(*v));
                let d = am.cols();
                let mut da = Mat::zeros(am.rows(), d);
                let mut db = Mat::zeros(bm.rows(), d);
                let mut dv = Mat::zeros(1, d);
                for t in 0..am.rows() {
                    for j in 0..bm.rows() {
                        let gs = g.get(t, j);
                        if gs == S::zero() {
                            continue;
                        }
                        for i in 0..d {
                            let u = (am.get(t, i) + bm.get(j, i)).tanh();
                            dv.as_mut_slice()[i] += gs * u;
                            let du = gs * vm.as_slice()[i] * (S::one() - u * u);
                            da.row_mut(t)[i] += du;
                            db.row_mut(j)[i] += du;
                        }
                    }
                }
                if self.needs(*a) {
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    accumulate(grads, *b, db);
                }
                if self.needs(*v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::SampleRows { x, pos, lo, frac } => {
                let xm = self.value(*x);
                let (len, cols) = xm.shape();
                if self.needs(*x) {
                    let mut dx = Mat::zeros(len, cols);
                    for (i, (&l, &f)) in lo.iter().zip(frac).enumerate() {
                        let gi = g.row(i);
                        if len < 2 {
                            for c in 0..cols {
                                dx.row_mut(0)[c] += gi[c];
                            }
                            continue;
                        }
                        for c in 0..cols {
                            dx.row_mut(l)[c] += (S::one() - f) * gi[c];
                            dx.row_mut(l + 1)[c] += f * gi[c];
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.needs(*pos) && len >= 2 {
                    let pm = self.value(*pos);
                    let last = S::lit((len - 1) as f64);
                    let dp = Mat::from_fn(1, lo.len(), |_, i| {
                        let p = pm.as_slice()[i];
                        if p < S::zero() || p > last {
                            return S::zero();
                        }
                        let l = lo[i];
                        let (r0, r1, gi) = (xm.row(l), xm.row(l + 1), g.row(i));
                        (0..cols).map(|c| gi[c] * (r1[c] - r0[c])).sum()
                    });
                    accumulate(grads, *pos, dp);
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xm = self.value(*x);
                let (lo, hi) = (*lo, *hi);
                accumulate(
                    grads,
                    *x,
                    g.zip_map(
                        xm,
                        |gv, xv| if xv >= lo && xv <= hi { gv } else { S::zero() },
                    ),
                );
            }
            Op::Mse(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                let c = S::lit(2.0) * g.item() / S::lit(am.len() as f64);
                let da = am.zip_map(bm, |x, y| c * (x - y));
                if self.needs(*b) {
                    accumulate(grads, *b, da.map(|v| -v));
                }
                if self.needs(*a) {
                    accumulate(grads, *a, da);
                }
            }
            Op::Bce { p, y } => {
                let pv = self.value(*p).item();
                let eps = S::lit(PROB_EPS);
                let d = if pv < eps || pv > S::one() - eps {
                    S::zero()
                } else {
                    -*y / pv + (S::one() - *y) / (S::one() - pv)
                };
                accumulate(grads, *p, Mat::scalar(g.item() * d));
            }
            Op::Sum(x) => {
                let (rows, cols) = self.shape(*x);
                accumulate(grads, *x, Mat::filled(rows, cols, g.item()));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[Mat<S>],
        g: &Mat<S>,
        grads: &mut [Option<Mat<S>>],
    ) {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (tq, d) = qm.shape();
        let tk = km.rows();
        let dh = d / heads;
        let scale = S::one() / S::lit(dh as f64).sqrt();
        let mut dq = Mat::zeros(tq, d);
        let mut dk = Mat::zeros(tk, d);
        let mut dv = Mat::zeros(tk, d);
        let mut dp = Mat::zeros(tq, tk);
        for (h, p) in probs.iter().enumerate() {
            let off = h * dh;
            // dV_h = Pᵀ dO_h
            S::gemm(
                tk,
                tq,
                dh,
                S::one(),
                p.as_slice(),
                1,
                tk as isize,
                &g.as_slice()[off..],
                d as isize,
                1,
                S::zero(),
                &mut dv.as_mut_slice()[off..],
                d as isize,
            );
            // dP = dO_h V_hᵀ
            S::gemm(
                tq,
                dh,
                tk,
                S::one(),
                &g.as_slice()[off..],
                d as isize,
                1,
                &vm.as_slice()[off..],
                1,
                d as isize,
                S::zero(),
                dp.as_mut_slice(),
                tk as isize,
            );
            let mut ds = Mat::zeros(tq, tk);
            for r in 0..tq {
                softmax_backward_row(p.row(r), dp.row(r), ds.row_mut(r));
            }
            // dQ_h = dS K_h · scale
            S::gemm(
                tq,
                tk,
                dh,
                scale,
                ds.as_slice(),
                tk as isize,
                1,
                &km.as_slice()[off..],
                d as isize,
                1,
                S::zero(),
                &mut dq.as_mut_slice()[off..],
                d as isize,
            );
            // dK_h = dSᵀ Q_h · scale
            S::gemm(
                tk,
                tq,
                dh,
                scale,
                ds.as_slice(),
                1,
                tk as isize,
                &qm.as_slice()[off..],
                d as isize,
                1,
                S::zero(),
                &mut dk.as_mut_slice()[off..],
                d as isize,
            );
        }
        if self.needs(q) {
            accumulate(grads, q, dq);
        }
        if self.needs(k) {
            accumulate(grads, k, dk);
        }
        if self.needs(v) {
            accumulate(grads, v, dv);
        }
    }

    #[inline]
    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Collect parameter gradients from a backward sweep, scaled by `weight`,
    /// into `into`.
    pub fn accumulate_param_grads(
        &self,
        grads: &Gradients<S>,
        weight: S,
        into: &mut ParamGrads<S>,
    ) {
        for (idx, node) in self.param_nodes.iter().enumerate() {
            if let Some(v) = node {
                if let Some(g) = grads.wrt(*v) {
                    into.accumulate(ParamId(idx), g, weight);
                }
            }
        }
    }
}

/// Node gradients produced by [`Graph::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Mat<S>>>,
}

impl<S> Gradients<S> {
    pub fn wrt(&self, v: Var) -> Option<&Mat<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Mat<S>>], v: Var, g: Mat<S>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn softmax_backward_row<S: Scalar>(y: &[S], gy: &[S], out: &mut [S]) {
    let dot = y.iter().zip(gy).map(|(&a, &b)| a * b).sum::<S>();
    for ((o, &yv), &gv) in out.iter_mut().zip(y).zip(gy) {
        *o = yv * (gv - dot);
    }
}

pub(crate) fn bce_value<S: Scalar>(y: S, p: S) -> S {
    let eps = S::lit(PROB_EPS);
    let p = p.max(eps).min(S::one() - eps);
    -(y * p.ln()) - (S::one() - y) * (S::one() - p).ln()
}
