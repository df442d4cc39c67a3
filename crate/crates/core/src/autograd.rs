//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Graph`] records every operation applied to its nodes; calling
//! [`Graph::backward`] on a `1 x 1` node walks the tape in reverse and
//! returns gradients for parameters and for leaves created with
//! [`Graph::leaf_with_grad`]. Parameters are borrowed from a
//! [`ParamStore`], never copied. All reductions run in a fixed sequential
//! order, so results are bit-reproducible.

use std::borrow::Cow;

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{dot, gemm, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Which keys each query row may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    /// Row `i` sees earlier rows of its segment up to itself, optionally
    /// only the last `window` of them. Segments of `segment` rows hold
    /// independent sequences stacked into one matrix.
    Causal {
        window: Option<usize>,
        segment: Option<usize>,
    },
    /// Bidirectional attention inside consecutive blocks of `size` rows.
    Blocks { size: usize },
}

impl AttnMask {
    /// Half-open key range visible from query row `i` (of `n` rows).
    pub fn span(&self, i: usize, n: usize) -> (usize, usize) {
        match *self {
            AttnMask::Causal { window, segment } => {
                let start = segment.map_or(0, |s| i / s * s);
                let lo = window.map_or(0, |w| (i + 1).saturating_sub(w));
                (lo.max(start), i + 1)
            }
            AttnMask::Blocks { size } => {
                let b = i / size;
                (b * size, ((b + 1) * size).min(n))
            }
        }
    }
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ScaleRows(Var, Vec<T>),
    Silu(Var),
    Exp(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Rope {
        x: Var,
        cos: Vec<T>,
        sin: Vec<T>,
        heads: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        spans: Vec<(usize, usize)>,
        offsets: Vec<usize>,
        probs: Vec<T>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Gather {
        srcs: Vec<Var>,
        index: Vec<(u32, u32)>,
    },
    RowSqNorm(Var),
    RowPseudoHuber {
        x: Var,
        nu: T,
    },
    Sum(Var),
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Mat<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    params: Option<&'p ParamStore<T>>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<'p, T>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    node_grads: Vec<Option<Mat<T>>>,
    param_nodes: Vec<Option<Var>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Mat<T>> {
        self.node_grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat<T>> {
        self.param_nodes
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|v| self.node_grads[v.0].as_ref())
    }

    /// One gradient per parameter of `store`; unused parameters get zeros.
    pub fn into_param_grads(mut self, store: &ParamStore<T>) -> Vec<Mat<T>> {
        store
            .iter()
            .map(|(id, _, t)| {
                self.param_nodes
                    .get(id.0)
                    .copied()
                    .flatten()
                    .and_then(|v| self.node_grads[v.0].take())
                    .unwrap_or_else(|| Mat::zeros(t.rows(), t.cols()))
            })
            .collect()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    /// A graph without parameters, for pure-function differentiation.
    pub fn detached() -> Self {
        Self {
            params: None,
            param_vars: Vec::new(),
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> Option<&'p ParamStore<T>> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    #[inline]
    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, m: Mat<T>) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn input_ref(&mut self, m: &'p Mat<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(m),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf_with_grad(&mut self, m: Mat<T>) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.params.expect("param() on a detached graph");
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Mat::zeros(av.rows(), bv.cols());
        gemm(av, false, bv, false, &mut out, T::one(), T::zero());
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// `x + bias` with `bias` a `1 x cols` row broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        assert_eq!(bv.rows(), 1);
        assert_eq!(bv.cols(), xv.cols());
        let mut out = xv.clone();
        let b = bv.as_slice();
        for r in 0..out.rows() {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(b) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(out, Op::AddRow(x, bias), ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v + s);
        let ng = self.ng(x);
        self.push(out, Op::AddScalar(x), ng)
    }

    /// Multiplies row `r` by the constant `factors[r]`.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(factors.len(), xv.rows());
        let mut out = xv.clone();
        for (r, &f) in factors.iter().enumerate() {
            for o in out.row_mut(r) {
                *o *= f;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::ScaleRows(x, factors), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let ng = self.ng(x);
        self.push(out, Op::Silu(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::exp);
        let ng = self.ng(x);
        self.push(out, Op::Exp(x), ng)
    }

    /// Row-wise RMS normalization with a learnable `1 x cols` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Var {
        let xv = self.value(x);
        let g = self.value(gain).as_slice();
        let d = T::of(xv.cols() as f64);
        let mut out = xv.clone();
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let ms = xv.row(r).iter().map(|&v| v * v).sum::<T>() / d;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for (o, &gg) in out.row_mut(r).iter_mut().zip(g) {
                *o = *o * inv * gg;
            }
        }
        let ng = self.ng(x) || self.ng(gain);
        self.push(out, Op::RmsNorm { x, gain, inv_rms }, ng)
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        let d = T::of(xv.cols() as f64);
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for o in out.row_mut(r) {
                *o = (*o - mean) * inv;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::LayerNorm { x, inv_std }, ng)
    }

    /// Rotates adjacent channel pairs of every head. `cos`/`sin` hold
    /// `rows x (head_dim / 2)` angles, shared across heads.
    pub fn rope(&mut self, x: Var, cos: Vec<T>, sin: Vec<T>, heads: usize) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        rotate_pairs(&mut out, &cos, &sin, heads, false);
        let ng = self.ng(x);
        self.push(out, Op::Rope { x, cos, sin, heads }, ng)
    }

    /// Multi-head scaled dot-product attention with a structural mask.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttnMask) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let n = qv.rows();
        assert_eq!(kv.rows(), n);
        assert_eq!(vv.rows(), n);
        let spans: Vec<(usize, usize)> = (0..n).map(|i| mask.span(i, n)).collect();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut acc = 0;
        for &(lo, hi) in &spans {
            offsets.push(acc);
            acc += hi - lo;
        }
        offsets.push(acc);
        let per_head = acc;
        let mut probs = vec![T::zero(); per_head * heads];
        let mut out = Mat::zeros(n, vv.cols());
        let dh = qv.cols() / heads;
        for h in 0..heads {
            for (i, &(lo, hi)) in spans.iter().enumerate() {
                let p = &mut probs[h * per_head + offsets[i]..h * per_head + offsets[i + 1]];
                let o = attend_head(qv.row(i), kv, vv, lo, hi, h, dh, p);
                out.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(&o);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                spans,
                offsets,
                probs,
            },
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Mat::hcat(&mats).expect("concat_cols row counts");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let out = Mat::from_fn(xv.rows(), len, |r, c| xv.get(r, start + c));
        let ng = self.ng(x);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    /// Builds a matrix whose row `r` is row `index[r].1` of `srcs[index[r].0]`.
    pub fn gather_rows(&mut self, srcs: &[Var], index: Vec<(u32, u32)>) -> Var {
        let cols = self.value(srcs[0]).cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &(s, r) in &index {
            let m = self.value(srcs[s as usize]);
            assert_eq!(m.cols(), cols);
            data.extend_from_slice(m.row(r as usize));
        }
        let out = Mat::from_vec(index.len(), cols, data).unwrap();
        let ng = srcs.iter().any(|&s| self.ng(s));
        self.push(
            out,
            Op::Gather {
                srcs: srcs.to_vec(),
                index,
            },
            ng,
        )
    }

    /// `n x 1` column of squared row norms.
    pub fn row_sq_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let vals = (0..xv.rows())
            .map(|r| xv.row(r).iter().map(|&v| v * v).sum())
            .collect();
        let ng = self.ng(x);
        self.push(Mat::from_vec(xv.rows(), 1, vals).unwrap(), Op::RowSqNorm(x), ng)
    }

    /// `n x 1` column of `sqrt(|row|^2 + nu^2) - nu`.
    pub fn row_pseudo_huber(&mut self, x: Var, nu: T) -> Var {
        let xv = self.value(x);
        let vals = (0..xv.rows())
            .map(|r| {
                let s: T = xv.row(r).iter().map(|&v| v * v).sum();
                (s + nu * nu).sqrt() - nu
            })
            .collect();
        let ng = self.ng(x);
        self.push(
            Mat::from_vec(xv.rows(), 1, vals).unwrap(),
            Op::RowPseudoHuber { x, nu },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Mat::filled(1, 1, s), Op::Sum(x), ng)
    }

    /// Reverse pass from a scalar (`1 x 1`) node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Mat::filled(1, 1, T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients {
            node_grads: grads,
            param_nodes: self.param_vars.clone(),
        }
    }

    fn acc(&self, grads: &mut [Option<Mat<T>>], v: Var, delta: Mat<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.axpy(T::one(), &delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, node: &Node<'p, T>, gout: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.ng(a) {
                    let mut da = Mat::zeros(av.rows(), av.cols());
                    gemm(gout, false, bv, true, &mut da, T::one(), T::zero());
                    self.acc(grads, a, da);
                }
                if self.ng(b) {
                    let mut db = Mat::zeros(bv.rows(), bv.cols());
                    gemm(av, true, gout, false, &mut db, T::one(), T::zero());
                    self.acc(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, gout.clone());
                self.acc(grads, b, gout.clone());
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, gout.clone());
                self.acc(grads, b, gout.map(|g| -g));
            }
            &Op::Mul(a, b) => {
                if self.ng(a) {
                    self.acc(grads, a, gout.zip_map(self.value(b), |g, y| g * y));
                }
                if self.ng(b) {
                    self.acc(grads, b, gout.zip_map(self.value(a), |g, x| g * x));
                }
            }
            &Op::AddRow(x, bias) => {
                self.acc(grads, x, gout.clone());
                if self.ng(bias) {
                    let mut db = Mat::zeros(1, gout.cols());
                    for r in 0..gout.rows() {
                        for (d, &g) in db.as_mut_slice().iter_mut().zip(gout.row(r)) {
                            *d += g;
                        }
                    }
                    self.acc(grads, bias, db);
                }
            }
            &Op::Scale(x, s) => self.acc(grads, x, gout.map(|g| g * s)),
            &Op::AddScalar(x) => self.acc(grads, x, gout.clone()),
            Op::ScaleRows(x, factors) => {
                let mut dx = gout.clone();
                for (r, &f) in factors.iter().enumerate() {
                    for d in dx.row_mut(r) {
                        *d *= f;
                    }
                }
                self.acc(grads, *x, dx);
            }
            &Op::Silu(x) => {
                let dx = gout.zip_map(self.value(x), |g, v| {
                    let s = sigmoid(v);
                    g * s * (T::one() + v * (T::one() - s))
                });
                self.acc(grads, x, dx);
            }
            &Op::Exp(x) => {
                let dx = gout.zip_map(&node.value, |g, y| g * y);
                self.acc(grads, x, dx);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x);
                let g = self.value(*gain).as_slice();
                let d = T::of(xv.cols() as f64);
                if self.ng(*x) {
                    let mut dx = Mat::zeros(xv.rows(), xv.cols());
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = xv.row(r);
                        let gr = gout.row(r);
                        let mut s = T::zero();
                        for c in 0..xr.len() {
                            s += xr[c] * g[c] * gr[c];
                        }
                        let k = inv * inv * inv * s / d;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = inv * g[c] * gr[c] - k * xr[c];
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                if self.ng(*gain) {
                    let mut dg = Mat::zeros(1, xv.cols());
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for (c, o) in dg.as_mut_slice().iter_mut().enumerate() {
                            *o += gout.get(r, c) * xv.get(r, c) * inv;
                        }
                    }
                    self.acc(grads, *gain, dg);
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let d = T::of(y.cols() as f64);
                let mut dx = Mat::zeros(y.rows(), y.cols());
                for (r, &inv) in inv_std.iter().enumerate() {
                    let gr = gout.row(r);
                    let yr = y.row(r);
                    let mean_g = gr.iter().copied().sum::<T>() / d;
                    let mean_gy = dot(gr, yr) / d;
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = inv * (gr[c] - mean_g - yr[c] * mean_gy);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Rope { x, cos, sin, heads } => {
                let mut dx = gout.clone();
                rotate_pairs(&mut dx, cos, sin, *heads, true);
                self.acc(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                spans,
                offsets,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let n = qv.rows();
                let dh = qv.cols() / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let per_head = offsets[n];
                let mut dq = Mat::zeros(n, qv.cols());
                let mut dk = Mat::zeros(n, kv.cols());
                let mut dv = Mat::zeros(n, vv.cols());
                let mut dp = Vec::new();
                for h in 0..*heads {
                    let cs = h * dh..(h + 1) * dh;
                    for (i, &(lo, hi)) in spans.iter().enumerate() {
                        let p = &probs[h * per_head + offsets[i]..h * per_head + offsets[i + 1]];
                        let go = &gout.row(i)[cs.clone()];
                        dp.clear();
                        let mut weighted = T::zero();
                        for (jj, j) in (lo..hi).enumerate() {
                            let dpj = dot(go, &vv.row(j)[cs.clone()]);
                            weighted += p[jj] * dpj;
                            dp.push(dpj);
                            for (o, &g) in dv.row_mut(j)[cs.clone()].iter_mut().zip(go) {
                                *o += p[jj] * g;
                            }
                        }
                        for (jj, j) in (lo..hi).enumerate() {
                            let ds = p[jj] * (dp[jj] - weighted) * scale;
                            if ds == T::zero() {
                                continue;
                            }
                            let krow = &kv.row(j)[cs.clone()];
                            for (o, &kk) in dq.row_mut(i)[cs.clone()].iter_mut().zip(krow) {
                                *o += ds * kk;
                            }
                            let qrow = &qv.row(i)[cs.clone()];
                            for (o, &qq) in dk.row_mut(j)[cs.clone()].iter_mut().zip(qrow) {
                                *o += ds * qq;
                            }
                        }
                    }
                }
                self.acc(grads, *q, dq);
                self.acc(grads, *k, dk);
                self.acc(grads, *v, dv);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        let d = Mat::from_fn(gout.rows(), w, |r, c| gout.get(r, start + c));
                        self.acc(grads, p, d);
                    }
                    start += w;
                }
            }
            &Op::SliceCols { x, start } => {
                let xv = self.value(x);
                let mut dx = Mat::zeros(xv.rows(), xv.cols());
                for r in 0..gout.rows() {
                    dx.row_mut(r)[start..start + gout.cols()].copy_from_slice(gout.row(r));
                }
                self.acc(grads, x, dx);
            }
            Op::Gather { srcs, index } => {
                let mut parts: Vec<Option<Mat<T>>> = srcs
                    .iter()
                    .map(|&s| {
                        self.ng(s).then(|| {
                            let v = self.value(s);
                            Mat::zeros(v.rows(), v.cols())
                        })
                    })
                    .collect();
                for (r, &(s, row)) in index.iter().enumerate() {
                    if let Some(m) = &mut parts[s as usize] {
                        for (o, &g) in m.row_mut(row as usize).iter_mut().zip(gout.row(r)) {
                            *o += g;
                        }
                    }
                }
                for (&s, part) in srcs.iter().zip(parts) {
                    if let Some(m) = part {
                        self.acc(grads, s, m);
                    }
                }
            }
            &Op::RowSqNorm(x) => {
                let xv = self.value(x);
                let mut dx = xv.clone();
                for r in 0..xv.rows() {
                    let g = gout.get(r, 0) + gout.get(r, 0);
                    for o in dx.row_mut(r) {
                        *o *= g;
                    }
                }
                self.acc(grads, x, dx);
            }
            &Op::RowPseudoHuber { x, nu } => {
                let xv = self.value(x);
                let mut dx = xv.clone();
                for r in 0..xv.rows() {
                    let root = node.value.get(r, 0) + nu;
                    let g = gout.get(r, 0) / root;
                    for o in dx.row_mut(r) {
                        *o *= g;
                    }
                }
                self.acc(grads, x, dx);
            }
            &Op::Sum(x) => {
                let xv = self.value(x);
                self.acc(grads, x, Mat::filled(xv.rows(), xv.cols(), gout.get(0, 0)));
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Single-head attention of one query row over key rows `lo..hi`, writing
/// the normalized probabilities into `probs`. Shared by the full-sequence
/// graph op and the cached single-step path.
#[allow(clippy::too_many_arguments)]
pub fn attend_head<T: Scalar>(
    q: &[T],
    keys: &Mat<T>,
    values: &Mat<T>,
    lo: usize,
    hi: usize,
    head: usize,
    dh: usize,
    probs: &mut [T],
) -> Vec<T> {
    let cs = head * dh..(head + 1) * dh;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let qh = &q[cs.clone()];
    let mut max = T::neg_infinity();
    for (jj, j) in (lo..hi).enumerate() {
        let s = dot(qh, &keys.row(j)[cs.clone()]) * scale;
        probs[jj] = s;
        if s > max {
            max = s;
        }
    }
    let mut z = T::zero();
    for p in probs.iter_mut() {
        *p = (*p - max).exp();
        z += *p;
    }
    let mut out = vec![T::zero(); dh];
    for (jj, j) in (lo..hi).enumerate() {
        probs[jj] /= z;
        let p = probs[jj];
        for (o, &vv) in out.iter_mut().zip(&values.row(j)[cs.clone()]) {
            *o += p * vv;
        }
    }
    out
}

/// In-place rotation of adjacent pairs per head; `inverse` rotates by the
/// negated angle (the transpose, used for the backward pass).
pub fn rotate_pairs<T: Scalar>(x: &mut Mat<T>, cos: &[T], sin: &[T], heads: usize, inverse: bool) {
    let d = x.cols();
    let dh = d / heads;
    let half = dh / 2;
    assert_eq!(cos.len(), x.rows() * half);
    for r in 0..x.rows() {
        let (c, s) = (&cos[r * half..(r + 1) * half], &sin[r * half..(r + 1) * half]);
        let row = x.row_mut(r);
        for h in 0..heads {
            for l in 0..half {
                let i0 = h * dh + 2 * l;
                let (a, b) = (row[i0], row[i0 + 1]);
                let sn = if inverse { -s[l] } else { s[l] };
                row[i0] = a * c[l] - b * sn;
                row[i0 + 1] = a * sn + b * c[l];
            }
        }
    }
}
