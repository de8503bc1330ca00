//! Minimal tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its variables. Calling
//! [`Graph::backward`] on a scalar output walks the tape in reverse and returns
//! the gradient of that output with respect to every variable that requires one.
//! Constants (images, frozen vectors) never receive gradients.

use crate::geometry::{siou_loss_with_grad, BBox};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    NormRows(Var, Vec<T>),
    NormCols(Var, Vec<T>),
    Gelu(Var),
    Relu(Var),
    Clamp(Var, T, T),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    SumAll(Var),
    MeanAll(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    Im2Col { x: Var, h: usize, w: usize, c: usize, kh: usize, kw: usize },
    Pick(Var, usize, usize),
    Gather(Var, Vec<usize>),
    Siou(Var, [T; 4]),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 variable.
    pub fn scalar(&self, v: Var) -> T {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.data()[0]
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data).expect("shape");
        self.push(out, op, &[a, b])
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).map(f);
        self.push(out, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Broadcast-add a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!((1, va.cols()), vr.shape(), "add_row shape");
        let mut out = va.clone();
        let cols = va.cols();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += vr.data()[i % cols];
        }
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    /// Broadcast-multiply every row of `a` by a `1 x cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!((1, va.cols()), vr.shape(), "mul_row shape");
        let mut out = va.clone();
        let cols = va.cols();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o *= vr.data()[i % cols];
        }
        self.push(out, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    /// Multiply every entry of `a` by the 1x1 variable `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::ScaleBy(a, s), &[a, s])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(out, Op::MatMulT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        let cols = va.cols();
        for row in out.data_mut().chunks_mut(cols) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a), &[a])
    }

    /// Per-row standardisation (layer norm without affine parameters).
    pub fn norm_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let cols = va.cols();
        let n = T::from_usize_lossy(cols);
        let mut out = va.clone();
        let mut inv = Vec::with_capacity(va.rows());
        for row in out.data_mut().chunks_mut(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let is = T::one() / (var + lit(NORM_EPS)).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv.push(is);
        }
        self.push(out, Op::NormRows(a, inv), &[a])
    }

    /// Per-column standardisation over all rows (batch-norm statistics over cells).
    pub fn norm_cols(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (rows, cols) = va.shape();
        let n = T::from_usize_lossy(rows);
        let mut mean = vec![T::zero(); cols];
        let mut var = vec![T::zero(); cols];
        for row in va.data().chunks(cols) {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for row in va.data().chunks(cols) {
            for ((s, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        let inv: Vec<T> = var.iter().map(|&s| T::one() / (s / n + lit(NORM_EPS)).sqrt()).collect();
        let mut out = va.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for ((x, &m), &is) in row.iter_mut().zip(&mean).zip(&inv) {
                *x = (*x - m) * is;
            }
        }
        self.push(out, Op::NormCols(a, inv), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero where clamped.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, T::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, T::ln, Op::Log(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor::scalar(va.sum() / T::from_usize_lossy(va.len()));
        self.push(out, Op::MeanAll(a), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::vstack(&tensors).expect("concat_rows column mismatch");
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                for c in 0..vp.cols() {
                    out.set(r, off + c, vp.get(r, c));
                }
            }
            off += vp.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        self.push(out, Op::SliceRows(a, start), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let mut out = Tensor::zeros(va.rows(), len);
        for r in 0..va.rows() {
            for c in 0..len {
                out.set(r, c, va.get(r, start + c));
            }
        }
        self.push(out, Op::SliceCols(a, start), &[a])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshaped(rows, cols).expect("reshape");
        self.push(out, Op::Reshape(a), &[a])
    }

    /// Unfold a `(h*w) x c` feature map into `(h*w) x (c*kh*kw)` patches with
    /// zero "same" padding. Column index is `ch * kh * kw + ky * kw + kx`.
    pub fn im2col(&mut self, x: Var, h: usize, w: usize, kh: usize, kw: usize) -> Var {
        let vx = self.value(x);
        let c = vx.cols();
        assert_eq!(vx.rows(), h * w, "im2col expects h*w rows");
        let kk = kh * kw;
        let mut out = Tensor::zeros(h * w, c * kk);
        let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
        for y in 0..h {
            for xx in 0..w {
                let row = y * w + xx;
                for ky in 0..kh {
                    let sy = y as isize + ky as isize - ph;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let sx = xx as isize + kx as isize - pw;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = sy as usize * w + sx as usize;
                        for ch in 0..c {
                            out.set(row, ch * kk + ky * kw + kx, vx.get(src, ch));
                        }
                    }
                }
            }
        }
        self.push(out, Op::Im2Col { x, h, w, c, kh, kw }, &[x])
    }

    /// 1x1 variable holding `a[r, c]`.
    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Var {
        let out = Tensor::scalar(self.value(a).get(r, c));
        self.push(out, Op::Pick(a, r, c), &[a])
    }

    /// `rows x cols` tensor whose entry `i` (row-major) is the `index[i]`-th
    /// row-major entry of `a`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length");
        let src = self.value(a).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::from_vec(rows, cols, data).expect("shape");
        self.push(out, Op::Gather(a, index), &[a])
    }

    /// SIoU loss of a `1 x 4` predicted box `(x, y, w, h)` against a fixed target.
    pub fn siou(&mut self, pred: Var, gt: &BBox<T>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), (1, 4), "siou expects a 1x4 box");
        let d = p.data();
        let pb = BBox::new_unchecked(d[0], d[1], d[2], d[3]);
        let (loss, grad) = siou_loss_with_grad(&pb, gt);
        self.push(Tensor::scalar(loss), Op::Siou(pred, grad), &[pred])
    }

    /// Reverse pass from the 1x1 variable `out`.
    pub fn backward(&self, out: Var) -> Grads<T> {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, hadamard(g, vb));
                self.accumulate(grads, *b, hadamard(g, va));
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *row, col_sums(g));
            }
            Op::MulRow(a, row) => {
                let (va, vr) = (self.value(*a), self.value(*row));
                let cols = va.cols();
                let mut ga = g.clone();
                for (i, x) in ga.data_mut().iter_mut().enumerate() {
                    *x *= vr.data()[i % cols];
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *row, col_sums(&hadamard(g, va)));
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::ScaleBy(a, s) => {
                let k = self.scalar(*s);
                self.accumulate(grads, *a, g.map(|x| x * k));
                let dot = hadamard(g, self.value(*a)).sum();
                self.accumulate(grads, *s, Tensor::scalar(dot));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, g.matmul_t(vb));
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, va.t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, g.matmul(vb));
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, g.t_matmul(va));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::SoftmaxRows(a) => {
                let cols = y.cols();
                let mut ga = g.clone();
                for (grow, yrow) in ga.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&d, &p)| d * p).sum();
                    for (d, &p) in grow.iter_mut().zip(yrow) {
                        *d = p * (*d - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let cols = y.cols();
                let mut ga = g.clone();
                for (grow, yrow) in ga.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                    let total: T = grow.iter().copied().sum();
                    for (d, &ly) in grow.iter_mut().zip(yrow) {
                        *d -= ly.exp() * total;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::NormRows(a, inv) => {
                let cols = y.cols();
                let n = T::from_usize_lossy(cols);
                let mut ga = g.clone();
                for ((grow, yrow), &is) in ga.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)).zip(inv) {
                    let sum_g: T = grow.iter().copied().sum();
                    let sum_gy: T = grow.iter().zip(yrow).map(|(&d, &h)| d * h).sum();
                    for (d, &h) in grow.iter_mut().zip(yrow) {
                        *d = is / n * (n * *d - sum_g - h * sum_gy);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::NormCols(a, inv) => {
                let (rows, cols) = y.shape();
                let n = T::from_usize_lossy(rows);
                let sum_g = col_sums(g);
                let sum_gy = col_sums(&hadamard(g, y));
                let mut ga = g.clone();
                for (grow, yrow) in ga.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                    for c in 0..cols {
                        grow[c] = inv[c] / n * (n * grow[c] - sum_g.data()[c] - yrow[c] * sum_gy.data()[c]);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let ga = zip_map(g, va, |d, x| d * gelu_grad(x));
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                let ga = zip_map(g, va, |d, x| if x > T::zero() { d } else { T::zero() });
                self.accumulate(grads, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let va = self.value(*a);
                let ga = zip_map(g, va, |d, x| if x > *lo && x < *hi { d } else { T::zero() });
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = zip_map(g, y, |d, t| d * (T::one() - t * t));
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = zip_map(g, y, |d, s| d * s * (T::one() - s));
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => self.accumulate(grads, *a, hadamard(g, y)),
            Op::Log(a) => {
                let va = self.value(*a);
                self.accumulate(grads, *a, zip_map(g, va, |d, x| d / x));
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Tensor::filled(r, c, g.data()[0]));
            }
            Op::MeanAll(a) => {
                let (r, c) = self.value(*a).shape();
                let k = g.data()[0] / T::from_usize_lossy(r * c);
                self.accumulate(grads, *a, Tensor::filled(r, c, k));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    self.accumulate(grads, p, g.slice_rows(off, rows));
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    let mut gp = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gp.set(r, c, g.get(r, off + c));
                        }
                    }
                    self.accumulate(grads, p, gp);
                    off += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let (rows, cols) = self.value(*a).shape();
                let mut ga = Tensor::zeros(rows, cols);
                let n = g.len();
                ga.data_mut()[start * cols..start * cols + n].copy_from_slice(g.data());
                self.accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.value(*a).shape();
                let mut ga = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    for c in 0..g.cols() {
                        ga.set(r, start + c, g.get(r, c));
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, g.clone().reshaped(r, c).expect("reshape"));
            }
            Op::Im2Col { x, h, w, c, kh, kw } => {
                let (h, w, c, kh, kw) = (*h, *w, *c, *kh, *kw);
                let kk = kh * kw;
                let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
                let mut gx = Tensor::zeros(h * w, c);
                for yy in 0..h {
                    for xx in 0..w {
                        let row = yy * w + xx;
                        for ky in 0..kh {
                            let sy = yy as isize + ky as isize - ph;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let sx = xx as isize + kx as isize - pw;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let src = sy as usize * w + sx as usize;
                                for ch in 0..c {
                                    let v = gx.get(src, ch) + g.get(row, ch * kk + ky * kw + kx);
                                    gx.set(src, ch, v);
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Pick(a, r, c) => {
                let (rows, cols) = self.value(*a).shape();
                let mut ga = Tensor::zeros(rows, cols);
                ga.set(*r, *c, g.data()[0]);
                self.accumulate(grads, *a, ga);
            }
            Op::Gather(a, index) => {
                let (rows, cols) = self.value(*a).shape();
                let mut ga = Tensor::zeros(rows, cols);
                let dst = ga.data_mut();
                for (&i, &d) in index.iter().zip(g.data()) {
                    dst[i] += d;
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Siou(pred, grad) => {
                let k = g.data()[0];
                let gp = Tensor::row_vector(grad.iter().map(|&d| d * k).collect());
                self.accumulate(grads, *pred, gp);
            }
        }
    }
}

fn hadamard<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("shape")
}

fn col_sums<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let cols = a.cols();
    let mut out = vec![T::zero(); cols];
    for row in a.data().chunks(cols) {
        for (o, &x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    Tensor::row_vector(out)
}

pub(crate) fn softmax_rows<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let cols = a.cols();
    let mut out = a.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            z += *x;
        }
        for x in row.iter_mut() {
            *x /= z;
        }
    }
    out
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let inner = lit::<T>(GELU_C) * (x + lit::<T>(GELU_A) * x * x * x);
    lit::<T>(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = lit::<T>(0.5);
    let inner = lit::<T>(GELU_C) * (x + lit::<T>(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = lit::<T>(GELU_C) * (T::one() + lit::<T>(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}
