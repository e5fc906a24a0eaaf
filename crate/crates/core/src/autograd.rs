//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! read from a borrowed [`ParamStore`]; [`Graph::backward`] returns the
//! gradient of a scalar node with respect to every parameter reached and
//! every node that was created with gradient tracking.

use std::ops::Range;

use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{gemm, MatMut, MatRef, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of a stride-1, zero-padded ("same") square convolution over
/// NHWC activations stored as `[batch * height * width, channels]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvDims {
    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }
}

enum Op<T> {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddRows { x: Var, p: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    AddConst { x: Var },
    LayerNorm { x: Var, g: Var, b: Var, mean: Vec<T>, rstd: Vec<T> },
    Gelu { x: Var },
    Relu { x: Var },
    Attention { qkv: Var, batch: usize, seq: usize, heads: usize, probs: Vec<T> },
    Place { src: Var, token: Var, slots: Vec<Option<usize>> },
    GatherRows { x: Var, idx: Vec<usize> },
    GroupNormScale { x: Var, groups: Vec<Range<usize>> },
    GroupMul { x: Var, s: Var, groups: Vec<Range<usize>>, invert: bool },
    ComplexGain { x: Var, gains: Vec<(T, T)>, groups: Vec<Range<usize>> },
    Conv2d { x: Var, w: Var, b: Var, dims: ConvDims, cols: Tensor<T> },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var, batch: usize, hw: usize },
    Mse { pred: Var, target: Tensor<T> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor<T> },
    Sum { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: ParamGrads<T>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a tracked node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &ParamGrads<T> {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads<T> {
        self.params
    }
}

pub struct Graph<'p, T: Real> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self { store, nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is retained and queryable via [`Gradients::wrt`].
    pub fn tracked_input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.store.get(id).clone();
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// `x w + b` with `x: [n, in]`, `w: [in, out]`, `b: [1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = Tensor::zeros(xv.rows(), wv.cols());
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.shape(), (1, wv.cols()), "linear bias shape");
            for r in 0..out.rows() {
                out.row_mut(r).copy_from_slice(bv.row(0));
            }
        }
        gemm(T::one(), xv.view(), wv.view(), T::one(), out.view_mut());
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(out, Op::Linear { x, w, b }, &parents)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul { a, b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add { a, b }, &[a, b])
    }

    /// Row `r` of `x` gets row `r % p.rows()` of `p` added (positional
    /// embeddings, biases).
    pub fn add_rows(&mut self, x: Var, p: Var) -> Var {
        let pv = self.value(p);
        let mut out = self.value(x).clone();
        assert_eq!(out.cols(), pv.cols(), "add_rows width mismatch");
        assert_eq!(out.rows() % pv.rows(), 0, "add_rows row count not a multiple");
        let period = pv.rows();
        for r in 0..out.rows() {
            let src = pv.row(r % period);
            for (o, &s) in out.row_mut(r).iter_mut().zip(src) {
                *o += s;
            }
        }
        self.push(out, Op::AddRows { x, p }, &[x, p])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        self.push(out, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale { x, s }, &[x])
    }

    /// `x + c` for a constant `c` (channel noise).
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Var {
        let mut out = self.value(x).clone();
        out.add_assign(c);
        self.push(out, Op::AddConst { x }, &[x])
    }

    /// Per-row layer normalization with gain `g` and bias `b` (`[1, d]`).
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let xv = self.value(x);
        let gv = self.value(g);
        let bv = self.value(b);
        let d = xv.cols();
        let inv_d = T::lit(1.0 / d as f64);
        let mut out = Tensor::zeros(xv.rows(), d);
        let mut mean = Vec::with_capacity(xv.rows());
        let mut rstd = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mu = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let rs = T::one() / (var + T::lit(LN_EPS)).sqrt();
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = (row[j] - mu) * rs * gv.data()[j] + bv.data()[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        self.push(out, Op::LayerNorm { x, g, b, mean, rstd }, &[x, g, b])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::lit(GELU_C);
        let a = T::lit(GELU_A);
        let half = T::lit(0.5);
        let out = self.value(x).map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        self.push(out, Op::Gelu { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu { x }, &[x])
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `[batch * seq, 3 * d]` with query, key and value blocks laid
    /// out side by side; the result is `[batch * seq, d]`.
    pub fn attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Var {
        let qv = self.value(qkv);
        assert_eq!(qv.rows(), batch * seq, "attention row count");
        assert_eq!(qv.cols() % (3 * heads), 0, "attention width not divisible by 3 * heads");
        let d = qv.cols() / 3;
        let dh = d / heads;
        let alpha = T::lit(1.0 / (dh as f64).sqrt());
        let mut out = Tensor::zeros(batch * seq, d);
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let data = qv.data();
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * 3 * d + h * dh;
                let q = MatRef::strided(data, base, seq, dh, 3 * d, 1);
                let k = MatRef::strided(data, base + d, seq, dh, 3 * d, 1);
                let v = MatRef::strided(data, base + 2 * d, seq, dh, 3 * d, 1);
                let p_off = (b * heads + h) * seq * seq;
                let p = &mut probs[p_off..p_off + seq * seq];
                gemm(alpha, q, k.t(), T::zero(), MatMut::dense(p, seq, seq));
                for row in p.chunks_mut(seq) {
                    softmax_in_place(row);
                }
                let p = &probs[p_off..p_off + seq * seq];
                gemm(
                    T::one(),
                    MatRef::dense(p, seq, seq),
                    v,
                    T::zero(),
                    MatMut::strided(out.data_mut(), b * seq * d + h * dh, seq, dh, d, 1),
                );
            }
        }
        self.push(
            out,
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
            &[qkv],
        )
    }

    /// Output row `i` is row `j` of `src` when `slots[i] == Some(j)`, and
    /// the single row of `token` otherwise.
    pub fn place(&mut self, src: Var, token: Var, slots: Vec<Option<usize>>) -> Var {
        let sv = self.value(src);
        let tv = self.value(token);
        assert_eq!(tv.rows(), 1, "place token must be a single row");
        assert_eq!(sv.cols(), tv.cols(), "place width mismatch");
        let mut out = Tensor::zeros(slots.len(), tv.cols());
        for (i, slot) in slots.iter().enumerate() {
            let row = match slot {
                Some(j) => sv.row(*j),
                None => tv.row(0),
            };
            out.row_mut(i).copy_from_slice(row);
        }
        self.push(out, Op::Place { src, token, slots }, &[src, token])
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(idx.len(), xv.cols());
        for (i, &j) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xv.row(j));
        }
        self.push(out, Op::GatherRows { x, idx }, &[x])
    }

    /// Per-group power-normalization factor `sqrt(N_g / 2) / ||x_g||`, where
    /// group `g` is a row range of `x` holding `N_g` reals (`N_g / 2` complex
    /// symbols). Output is `[groups, 1]`.
    pub fn group_norm_scale(&mut self, x: Var, groups: Vec<Range<usize>>) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut out = Tensor::zeros(groups.len(), 1);
        for (gi, range) in groups.iter().enumerate() {
            let slice = &xv.data()[range.start * cols..range.end * cols];
            let norm = slice.iter().map(|&v| v * v).sum::<T>().sqrt();
            let count = T::lit(slice.len() as f64 / 2.0);
            out.data_mut()[gi] = count.sqrt() / norm;
        }
        self.push(out, Op::GroupNormScale { x, groups }, &[x])
    }

    /// Multiply (or divide, when `invert`) every row range of `x` by the
    /// matching entry of `s` (`[groups, 1]`).
    pub fn group_mul(&mut self, x: Var, s: Var, groups: Vec<Range<usize>>, invert: bool) -> Var {
        let sv = self.value(s).clone();
        let mut out = self.value(x).clone();
        let cols = out.cols();
        for (gi, range) in groups.iter().enumerate() {
            let f = if invert { T::one() / sv.data()[gi] } else { sv.data()[gi] };
            for v in &mut out.data_mut()[range.start * cols..range.end * cols] {
                *v *= f;
            }
        }
        self.push(out, Op::GroupMul { x, s, groups, invert }, &[x, s])
    }

    /// Treat consecutive real pairs as complex numbers and multiply every
    /// pair in row range `groups[g]` by the constant `gains[g]`.
    pub fn complex_gain(&mut self, x: Var, gains: Vec<(T, T)>, groups: Vec<Range<usize>>) -> Var {
        assert_eq!(gains.len(), groups.len(), "one gain per group");
        let mut out = self.value(x).clone();
        let cols = out.cols();
        assert_eq!(cols % 2, 0, "complex_gain needs an even width");
        for (&(gr, gi), range) in gains.iter().zip(&groups) {
            for pair in out.data_mut()[range.start * cols..range.end * cols].chunks_exact_mut(2) {
                let (re, im) = (pair[0], pair[1]);
                pair[0] = gr * re - gi * im;
                pair[1] = gr * im + gi * re;
            }
        }
        self.push(out, Op::ComplexGain { x, gains, groups }, &[x])
    }

    /// Same-padded stride-1 convolution; `w` is `[k * k * cin, cout]`,
    /// `b` is `[1, cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, dims: ConvDims) -> Var {
        let xv = self.value(x);
        let rows = dims.batch * dims.height * dims.width;
        assert_eq!(xv.shape(), (rows, dims.in_channels), "conv2d input shape");
        assert_eq!(self.value(w).shape(), (dims.patch_len(), dims.out_channels), "conv2d weight shape");
        let cols = im2col(xv, &dims);
        let bv = self.value(b);
        let mut out = Tensor::zeros(rows, dims.out_channels);
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(bv.row(0));
        }
        gemm(T::one(), cols.view(), self.value(w).view(), T::one(), out.view_mut());
        self.push(out, Op::Conv2d { x, w, b, dims, cols }, &[x, w, b])
    }

    /// 2x2 max pooling, stride 2, over NHWC rows.
    pub fn max_pool2(&mut self, x: Var, batch: usize, height: usize, width: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert_eq!(xv.rows(), batch * height * width, "max_pool2 input rows");
        assert!(height % 2 == 0 && width % 2 == 0, "max_pool2 needs even spatial dims");
        let (ho, wo) = (height / 2, width / 2);
        let mut out = Tensor::zeros(batch * ho * wo, c);
        let mut argmax = vec![0usize; batch * ho * wo * c];
        for b in 0..batch {
            for y in 0..ho {
                for xx in 0..wo {
                    let orow = (b * ho + y) * wo + xx;
                    for ch in 0..c {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let irow = (b * height + 2 * y + dy) * width + 2 * xx + dx;
                                let idx = irow * c + ch;
                                let v = xv.data()[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                        out.data_mut()[orow * c + ch] = best;
                        argmax[orow * c + ch] = best_idx;
                    }
                }
            }
        }
        self.push(out, Op::MaxPool2 { x, argmax }, &[x])
    }

    /// Mean over each block of `hw` consecutive rows; output `[batch, c]`.
    pub fn global_avg_pool(&mut self, x: Var, batch: usize, hw: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), batch * hw, "global_avg_pool rows");
        let c = xv.cols();
        let inv = T::lit(1.0 / hw as f64);
        let mut out = Tensor::zeros(batch, c);
        for b in 0..batch {
            for r in 0..hw {
                for (o, &v) in out.row_mut(b).iter_mut().zip(xv.row(b * hw + r)) {
                    *o += v * inv;
                }
            }
        }
        self.push(out, Op::GlobalAvgPool { x, batch, hw }, &[x])
    }

    /// Mean squared error against a constant target; `[1, 1]`.
    pub fn mse(&mut self, pred: Var, target: Tensor<T>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "mse shape mismatch");
        let n = T::lit(pv.len() as f64);
        let loss = pv.data().iter().zip(target.data()).map(|(&p, &t)| (p - t) * (p - t)).sum::<T>() / n;
        self.push(Tensor::from_vec(1, 1, vec![loss]), Op::Mse { pred, target }, &[pred])
    }

    /// Mean softmax cross-entropy over rows; `[1, 1]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), labels.len(), "cross_entropy label count");
        let mut probs = lv.clone();
        let mut loss = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = probs.row_mut(r);
            softmax_in_place(row);
            loss -= row[label].max(T::lit(1e-30)).ln();
        }
        loss /= T::lit(labels.len() as f64);
        self.push(Tensor::from_vec(1, 1, vec![loss]), Op::CrossEntropy { logits, labels, probs }, &[logits])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::Sum { x }, &[x])
    }

    /// Gradients of the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = ParamGrads::new(self.store.len());
        grads[loss.0] = Some(Tensor::full(1, 1, T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.backprop_node(node, &g, &mut grads, &mut params);
            }
            grads[i] = Some(g);
        }
        Gradients { nodes: grads, params }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>], params: &mut ParamGrads<T>) {
        match &node.op {
            Op::Input => {}
            Op::Param(id) => params.accumulate(*id, g.clone()),
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                if self.needs(*x) {
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    gemm(T::one(), g.view(), wv.view().t(), T::zero(), gx.view_mut());
                    self.acc(grads, *x, gx);
                }
                if self.needs(*w) {
                    let mut gw = Tensor::zeros(wv.rows(), wv.cols());
                    gemm(T::one(), xv.view().t(), g.view(), T::zero(), gw.view_mut());
                    self.acc(grads, *w, gw);
                }
                if let Some(b) = b {
                    self.acc(grads, *b, column_sums(g));
                }
            }
            Op::MatMul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.needs(*a) {
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    gemm(T::one(), g.view(), bv.view().t(), T::zero(), ga.view_mut());
                    self.acc(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    gemm(T::one(), av.view().t(), g.view(), T::zero(), gb.view_mut());
                    self.acc(grads, *b, gb);
                }
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddRows { x, p } => {
                self.acc(grads, *x, g.clone());
                if self.needs(*p) {
                    let pv = self.value(*p);
                    let mut gp = Tensor::zeros(pv.rows(), pv.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in gp.row_mut(r % pv.rows()).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.acc(grads, *p, gp);
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.needs(*a) {
                    let data = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *a, Tensor::from_vec(g.rows(), g.cols(), data));
                }
                if self.needs(*b) {
                    let data = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *b, Tensor::from_vec(g.rows(), g.cols(), data));
                }
            }
            Op::Scale { x, s } => {
                let s = *s;
                self.acc(grads, *x, g.map(|v| v * s));
            }
            Op::AddConst { x } => self.acc(grads, *x, g.clone()),
            Op::LayerNorm { x, g: gain, b, mean, rstd } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let d = xv.cols();
                let inv_d = T::lit(1.0 / d as f64);
                let mut gx = Tensor::zeros(xv.rows(), d);
                let mut gg = Tensor::zeros(1, d);
                let mut gb = Tensor::zeros(1, d);
                let mut dxhat = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                for r in 0..xv.rows() {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let gr = g.row(r);
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..d {
                        xhat[j] = (xv.row(r)[j] - mu) * rs;
                        dxhat[j] = gr[j] * gv.data()[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat[j];
                        gg.data_mut()[j] += gr[j] * xhat[j];
                        gb.data_mut()[j] += gr[j];
                    }
                    let m1 = sum_dxhat * inv_d;
                    let m2 = sum_dxhat_xhat * inv_d;
                    for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = rs * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *gain, gg);
                self.acc(grads, *b, gb);
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                let c = T::lit(GELU_C);
                let a = T::lit(GELU_A);
                let half = T::lit(0.5);
                let three_a = T::lit(3.0 * GELU_A);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gi)| {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three_a * v * v);
                        gi * (half * (T::one() + t) + half * v * dt)
                    })
                    .collect();
                self.acc(grads, *x, Tensor::from_vec(g.rows(), g.cols(), data));
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gi)| if v > T::zero() { gi } else { T::zero() })
                    .collect();
                self.acc(grads, *x, Tensor::from_vec(g.rows(), g.cols(), data));
            }
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let qv = self.value(*qkv);
                let d = qv.cols() / 3;
                let dh = d / heads;
                let alpha = T::lit(1.0 / (dh as f64).sqrt());
                let data = qv.data();
                let mut gq = Tensor::zeros(qv.rows(), qv.cols());
                let mut dp = vec![T::zero(); seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let base = b * seq * 3 * d + h * dh;
                        let q = MatRef::strided(data, base, seq, dh, 3 * d, 1);
                        let k = MatRef::strided(data, base + d, seq, dh, 3 * d, 1);
                        let v = MatRef::strided(data, base + 2 * d, seq, dh, 3 * d, 1);
                        let p_off = (b * heads + h) * seq * seq;
                        let p = &probs[p_off..p_off + seq * seq];
                        let go = MatRef::strided(g.data(), b * seq * d + h * dh, seq, dh, d, 1);
                        // dV = P^T dO
                        gemm(
                            T::one(),
                            MatRef::dense(p, seq, seq).t(),
                            go,
                            T::zero(),
                            MatMut::strided(gq.data_mut(), base + 2 * d, seq, dh, 3 * d, 1),
                        );
                        // dP = dO V^T, then the softmax Jacobian.
                        gemm(T::one(), go, v.t(), T::zero(), MatMut::dense(&mut dp, seq, seq));
                        for (dp_row, p_row) in dp.chunks_mut(seq).zip(p.chunks(seq)) {
                            let dot: T = dp_row.iter().zip(p_row).map(|(&a, &b)| a * b).sum();
                            for (ds, &pi) in dp_row.iter_mut().zip(p_row) {
                                *ds = pi * (*ds - dot) * alpha;
                            }
                        }
                        // dQ = dS K, dK = dS^T Q
                        gemm(
                            T::one(),
                            MatRef::dense(&dp, seq, seq),
                            k,
                            T::zero(),
                            MatMut::strided(gq.data_mut(), base, seq, dh, 3 * d, 1),
                        );
                        gemm(
                            T::one(),
                            MatRef::dense(&dp, seq, seq).t(),
                            q,
                            T::zero(),
                            MatMut::strided(gq.data_mut(), base + d, seq, dh, 3 * d, 1),
                        );
                    }
                }
                self.acc(grads, *qkv, gq);
            }
            Op::Place { src, token, slots } => {
                let sv = self.value(*src);
                let mut gs = Tensor::zeros(sv.rows(), sv.cols());
                let mut gt = Tensor::zeros(1, sv.cols());
                for (i, slot) in slots.iter().enumerate() {
                    let dst = match slot {
                        Some(j) => gs.row_mut(*j),
                        None => gt.row_mut(0),
                    };
                    for (o, &v) in dst.iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                self.acc(grads, *src, gs);
                self.acc(grads, *token, gt);
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for (i, &j) in idx.iter().enumerate() {
                    for (o, &v) in gx.row_mut(j).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::GroupNormScale { x, groups } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut gx = Tensor::zeros(xv.rows(), cols);
                for (gi, range) in groups.iter().enumerate() {
                    let s = node.value.data()[gi];
                    let span = range.start * cols..range.end * cols;
                    let slice = &xv.data()[span.clone()];
                    let norm_sq = slice.iter().map(|&v| v * v).sum::<T>();
                    // d s / d x = -s x / ||x||^2
                    let f = -g.data()[gi] * s / norm_sq;
                    for (o, &v) in gx.data_mut()[span].iter_mut().zip(slice) {
                        *o = f * v;
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::GroupMul { x, s, groups, invert } => {
                let xv = self.value(*x);
                let sv = self.value(*s);
                let cols = xv.cols();
                let mut gx = Tensor::zeros(xv.rows(), cols);
                let mut gs = Tensor::zeros(sv.rows(), 1);
                for (gi, range) in groups.iter().enumerate() {
                    let span = range.start * cols..range.end * cols;
                    let sval = sv.data()[gi];
                    let f = if *invert { T::one() / sval } else { sval };
                    let mut dot = T::zero();
                    for ((o, &gi_), &xi) in gx.data_mut()[span.clone()].iter_mut().zip(&g.data()[span.clone()]).zip(&xv.data()[span]) {
                        *o = gi_ * f;
                        dot += gi_ * xi;
                    }
                    gs.data_mut()[gi] = if *invert { -dot / (sval * sval) } else { dot };
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *s, gs);
            }
            Op::ComplexGain { x, gains, groups } => {
                let cols = g.cols();
                let mut gx = g.clone();
                for (&(gr, gi), range) in gains.iter().zip(groups) {
                    for pair in gx.data_mut()[range.start * cols..range.end * cols].chunks_exact_mut(2) {
                        // Adjoint of multiplication by g is multiplication by conj(g).
                        let (ur, ui) = (pair[0], pair[1]);
                        pair[0] = gr * ur + gi * ui;
                        pair[1] = gr * ui - gi * ur;
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Conv2d { x, w, b, dims, cols } => {
                let wv = self.value(*w);
                if self.needs(*w) {
                    let mut gw = Tensor::zeros(wv.rows(), wv.cols());
                    gemm(T::one(), cols.view().t(), g.view(), T::zero(), gw.view_mut());
                    self.acc(grads, *w, gw);
                }
                self.acc(grads, *b, column_sums(g));
                if self.needs(*x) {
                    let mut gcols = Tensor::zeros(cols.rows(), cols.cols());
                    gemm(T::one(), g.view(), wv.view().t(), T::zero(), gcols.view_mut());
                    self.acc(grads, *x, col2im(&gcols, dims));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for (&src, &gi) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[src] += gi;
                }
                self.acc(grads, *x, gx);
            }
            Op::GlobalAvgPool { x, batch, hw } => {
                let inv = T::lit(1.0 / *hw as f64);
                let mut gx = Tensor::zeros(batch * hw, g.cols());
                for b in 0..*batch {
                    for r in 0..*hw {
                        for (o, &v) in gx.row_mut(b * hw + r).iter_mut().zip(g.row(b)) {
                            *o = v * inv;
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                let f = g.data()[0] * T::lit(2.0 / pv.len() as f64);
                let data = pv.data().iter().zip(target.data()).map(|(&p, &t)| f * (p - t)).collect();
                self.acc(grads, *pred, Tensor::from_vec(pv.rows(), pv.cols(), data));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let f = g.data()[0] / T::lit(labels.len() as f64);
                let mut gl = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    let row = gl.row_mut(r);
                    row[label] -= T::one();
                    for v in row.iter_mut() {
                        *v *= f;
                    }
                }
                self.acc(grads, *logits, gl);
            }
            Op::Sum { x } => {
                let xv = self.value(*x);
                self.acc(grads, *x, Tensor::full(xv.rows(), xv.cols(), g.data()[0]));
            }
        }
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

fn column_sums<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

fn im2col<T: Real>(x: &Tensor<T>, dims: &ConvDims) -> Tensor<T> {
    let (h, w, cin, k) = (dims.height, dims.width, dims.in_channels, dims.kernel);
    let pad = dims.pad();
    let mut cols = Tensor::zeros(dims.batch * h * w, dims.patch_len());
    for b in 0..dims.batch {
        for y in 0..h {
            for xx in 0..w {
                let row = cols.row_mut((b * h + y) * w + xx);
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = x.row((b * h + sy as usize) * w + sx as usize);
                        let dst = (ky * k + kx) * cin;
                        row[dst..dst + cin].copy_from_slice(src);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &Tensor<T>, dims: &ConvDims) -> Tensor<T> {
    let (h, w, cin, k) = (dims.height, dims.width, dims.in_channels, dims.kernel);
    let pad = dims.pad();
    let mut x = Tensor::zeros(dims.batch * h * w, cin);
    for b in 0..dims.batch {
        for y in 0..h {
            for xx in 0..w {
                let row = cols.row((b * h + y) * w + xx);
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = x.row_mut((b * h + sy as usize) * w + sx as usize);
                        let src = (ky * k + kx) * cin;
                        for (o, &v) in dst.iter_mut().zip(&row[src..src + cin]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(sum(w * f(inputs)))/d(inputs) for the
    /// op under test, using a random projection `w` to make the loss scalar.
    fn check_op(shapes: &[(usize, usize)], build: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|&(r, c)| random(r, c, &mut rng)).collect();
        let store = ParamStore::<f64>::new();
        let eval = |inputs: &[Tensor<f64>], proj: Option<&Tensor<f64>>| {
            let mut g = Graph::new(&store);
            let vars: Vec<Var> = inputs.iter().map(|t| g.tracked_input(t.clone())).collect();
            let out = build(&mut g, &vars);
            let shape = g.value(out).shape();
            let proj = proj.cloned().unwrap_or_else(|| {
                let mut r = ChaCha8Rng::seed_from_u64(99);
                random(shape.0, shape.1, &mut r)
            });
            let p = g.input(proj.clone());
            let m = g.mul(out, p);
            let loss = g.sum(m);
            let l = g.value(loss).data()[0];
            let grads = g.backward(loss);
            let gs: Vec<Tensor<f64>> = vars.iter().map(|v| grads.wrt(*v).unwrap().clone()).collect();
            (l, gs, proj)
        };
        let (_, analytic, proj) = eval(&inputs, None);
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            for idx in 0..input.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[idx] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[idx] -= h;
                let numeric = (eval(&plus, Some(&proj)).0 - eval(&minus, Some(&proj)).0) / (2.0 * h);
                let a = analytic[k].data()[idx];
                let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {k} element {idx}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn linear_gradients() {
        check_op(&[(5, 3), (3, 4), (1, 4)], |g, v| g.linear(v[0], v[1], Some(v[2])));
    }

    #[test]
    fn matmul_add_mul_scale_gradients() {
        check_op(&[(3, 4), (4, 2), (3, 2)], |g, v| {
            let m = g.matmul(v[0], v[1]);
            let a = g.add(m, v[2]);
            let p = g.mul(a, v[2]);
            g.scale(p, 0.7)
        });
    }

    #[test]
    fn add_rows_gradients() {
        check_op(&[(6, 3), (2, 3)], |g, v| g.add_rows(v[0], v[1]));
    }

    #[test]
    fn layer_norm_gradients() {
        check_op(&[(4, 6), (1, 6), (1, 6)], |g, v| g.layer_norm(v[0], v[1], v[2]));
    }

    #[test]
    fn gelu_and_relu_gradients() {
        check_op(&[(3, 5)], |g, v| {
            let a = g.gelu(v[0]);
            g.relu(a)
        });
    }

    #[test]
    fn attention_gradients() {
        // batch 2, seq 3, 2 heads of width 2 -> d = 4, qkv width 12
        check_op(&[(6, 12)], |g, v| g.attention(v[0], 2, 3, 2));
    }

    #[test]
    fn attention_rows_are_convex_combinations_of_values() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut qkv = random(4, 6, &mut rng);
        // Constant value vectors -> output equals that constant.
        for r in 0..4 {
            qkv.row_mut(r)[4] = 2.5;
            qkv.row_mut(r)[5] = -1.0;
        }
        let x = g.input(qkv);
        let out = g.attention(x, 1, 4, 1);
        for r in 0..4 {
            assert!((g.value(out).get(r, 0) - 2.5).abs() < 1e-12);
            assert!((g.value(out).get(r, 1) + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn place_and_gather_gradients() {
        check_op(&[(3, 4), (1, 4)], |g, v| {
            let placed = g.place(v[0], v[1], vec![Some(2), None, Some(0), None, Some(1)]);
            g.gather_rows(placed, vec![4, 0, 0, 3])
        });
    }

    #[test]
    fn power_normalization_gradients() {
        check_op(&[(5, 4)], |g, v| {
            let groups = vec![0..2, 2..5];
            let s = g.group_norm_scale(v[0], groups.clone());
            let y = g.group_mul(v[0], s, groups.clone(), false);
            let gains = vec![(0.3, -1.2), (0.8, 0.5)];
            let z = g.complex_gain(y, gains, groups.clone());
            g.group_mul(z, s, groups, true)
        });
    }

    #[test]
    fn conv_pool_gradients() {
        let dims = ConvDims {
            batch: 2,
            height: 4,
            width: 4,
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
        };
        check_op(&[(32, 2), (18, 3), (1, 3)], move |g, v| {
            let c = g.conv2d(v[0], v[1], v[2], dims);
            let p = g.max_pool2(c, 2, 4, 4);
            g.global_avg_pool(p, 2, 4)
        });
    }

    #[test]
    fn conv_matches_direct_sum() {
        let dims = ConvDims {
            batch: 1,
            height: 3,
            width: 3,
            in_channels: 1,
            out_channels: 1,
            kernel: 3,
        };
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::from_fn(9, 1, |r, _| r as f64));
        let w = g.input(Tensor::full(9, 1, 1.0));
        let b = g.input(Tensor::zeros(1, 1));
        let y = g.conv2d(x, w, b, dims);
        // Centre pixel sees the whole image; corner (0,0) sees 0,1,3,4.
        assert_eq!(g.value(y).get(4, 0), 36.0);
        assert_eq!(g.value(y).get(0, 0), 8.0);
    }

    #[test]
    fn loss_gradients() {
        check_op(&[(3, 4)], |g, v| {
            let t = Tensor::from_fn(3, 4, |r, c| (r + c) as f64 * 0.1);
            let a = g.mse(v[0], t);
            let b = g.cross_entropy(v[0], vec![1, 3, 0]);
            let s = g.add(a, b);
            g.scale(s, 1.0)
        });
    }

    #[test]
    fn params_receive_gradients_and_inputs_do_not() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::full(2, 1, 1.0));
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::from_vec(1, 2, vec![3.0, 4.0]));
        let wv = g.param(w);
        let y = g.matmul(x, wv);
        let l = g.sum(y);
        let grads = g.backward(l);
        assert!(grads.wrt(x).is_none());
        assert_eq!(grads.params().get(w).unwrap().data(), &[3.0, 4.0]);
    }
}
