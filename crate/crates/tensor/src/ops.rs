//! Differentiable operations on [`Var`].
//!
//! Broadcasting is limited to adding a bias along the trailing axis
//! ([`Var::add_bias`]) and per-channel bias inside [`Var::conv2d`].

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tape::{Function, Var};
use crate::tensor::Tensor;

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn shaped<T: Element>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape.to_vec(), data).expect("adjoint shape")
}

// ── element-wise binary ─────────────────────────────────────────────

struct Add;
impl<T: Element> Function<T> for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

struct Sub;
impl<T: Element> Function<T> for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.clone()), needs[1].then(|| g.map(|v| -v))]
    }
}

struct Mul;
impl<T: Element> Function<T> for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![
            needs[0].then(|| g.zip_map(x[1], |g, b| g * b)),
            needs[1].then(|| g.zip_map(x[0], |g, a| g * a)),
        ]
    }
}

// ── element-wise unary ──────────────────────────────────────────────

struct Scale<T>(T);
impl<T: Element> Function<T> for Scale<T> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.map(|v| v * self.0))]
    }
}

struct Identity;
impl<T: Element> Function<T> for Identity {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.clone())]
    }
}

struct Relu;
impl<T: Element> Function<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.zip_map(x[0], |g, x| if x > T::zero() { g } else { T::zero() }))]
    }
}

struct Sigmoid;
impl<T: Element> Function<T> for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, _: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.zip_map(y, |g, y| g * y * (T::one() - y)))]
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Element>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

struct Softplus;
impl<T: Element> Function<T> for Softplus {
    fn name(&self) -> &'static str {
        "softplus"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.zip_map(x[0], |g, x| g * sigmoid(x)))]
    }
}

struct Exp;
impl<T: Element> Function<T> for Exp {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn backward(&self, _: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.zip_map(y, |g, y| g * y))]
    }
}

struct Square;
impl<T: Element> Function<T> for Square {
    fn name(&self) -> &'static str {
        "square"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let two = T::one() + T::one();
        vec![Some(g.zip_map(x[0], |g, x| two * g * x))]
    }
}

// ── reductions and layout ───────────────────────────────────────────

struct SumAll(f64);
impl<T: Element> Function<T> for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let v = g.item() * T::from_f64_lossy(self.0);
        vec![Some(Tensor::full(x[0].shape().to_vec(), v))]
    }
}

struct Reshape;
impl<T: Element> Function<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.clone().reshape(x[0].shape().to_vec()).expect("reshape adjoint"))]
    }
}

struct Transpose;
impl<T: Element> Function<T> for Transpose {
    fn name(&self) -> &'static str {
        "transpose"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.transpose().expect("2-D adjoint"))]
    }
}

struct AddBias;
impl<T: Element> Function<T> for AddBias {
    fn name(&self) -> &'static str {
        "add_bias"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let width = x[1].len();
        let db = needs[1].then(|| {
            let mut acc = vec![T::zero(); width];
            for row in g.data().chunks_exact(width) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a = *a + v;
                }
            }
            shaped(x[1].shape(), acc)
        });
        vec![needs[0].then(|| g.clone()), db]
    }
}

struct Linear {
    relu: bool,
}
impl<T: Element> Function<T> for Linear {
    fn name(&self) -> &'static str {
        if self.relu {
            "linear_relu"
        } else {
            "linear"
        }
    }
    fn backward(&self, x: &[&Tensor<T>], out: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let masked;
        let g = if self.relu {
            masked = g.zip_map(out, |g, o| if o > T::zero() { g } else { T::zero() });
            &masked
        } else {
            g
        };
        let (m, k) = (x[0].shape()[0], x[0].shape()[1]);
        let n = x[1].shape()[1];
        let dx = needs[0].then(|| {
            let mut d = vec![T::zero(); m * k];
            T::gemm(m, n, k, T::one(), g.data(), false, x[1].data(), true, T::zero(), &mut d);
            shaped(x[0].shape(), d)
        });
        let dw = needs[1].then(|| {
            let mut d = vec![T::zero(); k * n];
            T::gemm(k, m, n, T::one(), x[0].data(), true, g.data(), false, T::zero(), &mut d);
            shaped(x[1].shape(), d)
        });
        let db = needs[2].then(|| {
            let mut acc = vec![T::zero(); n];
            for row in g.data().chunks_exact(n.max(1)) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a = *a + v;
                }
            }
            shaped(x[2].shape(), acc)
        });
        vec![dx, dw, db]
    }
}

struct MatMul;
impl<T: Element> Function<T> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (m, k) = (x[0].shape()[0], x[0].shape()[1]);
        let n = x[1].shape()[1];
        let da = needs[0].then(|| {
            let mut out = vec![T::zero(); m * k];
            T::gemm(m, n, k, T::one(), g.data(), false, x[1].data(), true, T::zero(), &mut out);
            shaped(x[0].shape(), out)
        });
        let db = needs[1].then(|| {
            let mut out = vec![T::zero(); k * n];
            T::gemm(k, m, n, T::one(), x[0].data(), true, g.data(), false, T::zero(), &mut out);
            shaped(x[1].shape(), out)
        });
        vec![da, db]
    }
}

struct ConcatCols {
    left: usize,
    right: usize,
}
impl<T: Element> Function<T> for ConcatCols {
    fn name(&self) -> &'static str {
        "concat_cols"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let width = self.left + self.right;
        let rows = g.len() / width.max(1);
        let mut a = Vec::with_capacity(rows * self.left);
        let mut b = Vec::with_capacity(rows * self.right);
        for row in g.data().chunks_exact(width) {
            a.extend_from_slice(&row[..self.left]);
            b.extend_from_slice(&row[self.left..]);
        }
        vec![Some(shaped(x[0].shape(), a)), Some(shaped(x[1].shape(), b))]
    }
}

struct SelectCols {
    index: Vec<usize>,
}
impl<T: Element> Function<T> for SelectCols {
    fn name(&self) -> &'static str {
        "select_cols"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let cols = x[0].shape()[1];
        let picked = self.index.len();
        let mut out = vec![T::zero(); x[0].len()];
        for (r, grow) in g.data().chunks_exact(picked.max(1)).enumerate() {
            for (&c, &v) in self.index.iter().zip(grow) {
                out[r * cols + c] = out[r * cols + c] + v;
            }
        }
        vec![Some(shaped(x[0].shape(), out))]
    }
}

struct ChannelAffine<T> {
    scale: Vec<T>,
}
impl<T: Element> Function<T> for ChannelAffine<T> {
    fn name(&self) -> &'static str {
        "channel_affine"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let plane = x[0].len() / self.scale.len();
        let mut out = g.clone();
        for (chunk, &s) in out.data_mut().chunks_exact_mut(plane).zip(&self.scale) {
            chunk.iter_mut().for_each(|v| *v = *v * s);
        }
        vec![Some(out)]
    }
}

// ── convolution and pooling ─────────────────────────────────────────

#[derive(Clone, Copy)]
struct ConvGeometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source pixel for output (oy, ox) and kernel tap (ky, kx), if inside.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some(y as usize * self.width + x as usize)
        }
    }

    /// Lays out input patches as a `(C*kh*kw) x (out_h*out_w)` matrix.
    fn im2col<T: Element>(&self, input: &[T]) -> Vec<T> {
        let plane = self.height * self.width;
        let mut cols = vec![T::zero(); self.patch_len() * self.out_len()];
        let mut row = 0;
        for c in 0..self.channels {
            let src = &input[c * plane..(c + 1) * plane];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let dst = &mut cols[row * self.out_len()..(row + 1) * self.out_len()];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            if let Some(s) = self.source(oy, ox, ky, kx) {
                                dst[oy * self.out_w + ox] = src[s];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        cols
    }

    fn col2im<T: Element>(&self, cols: &[T]) -> Vec<T> {
        let plane = self.height * self.width;
        let mut out = vec![T::zero(); self.channels * plane];
        let mut row = 0;
        for c in 0..self.channels {
            let dst = &mut out[c * plane..(c + 1) * plane];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let src = &cols[row * self.out_len()..(row + 1) * self.out_len()];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            if let Some(d) = self.source(oy, ox, ky, kx) {
                                dst[d] = dst[d] + src[oy * self.out_w + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        out
    }
}

struct Conv2d {
    geom: ConvGeometry,
    out_channels: usize,
}
impl<T: Element> Function<T> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let geom = self.geom;
        let (o, p, n) = (self.out_channels, geom.patch_len(), geom.out_len());
        let dinput = needs[0].then(|| {
            let mut dcols = vec![T::zero(); p * n];
            T::gemm(p, o, n, T::one(), x[1].data(), true, g.data(), false, T::zero(), &mut dcols);
            shaped(x[0].shape(), geom.col2im(&dcols))
        });
        let dweight = needs[1].then(|| {
            let cols = geom.im2col(x[0].data());
            let mut dw = vec![T::zero(); o * p];
            T::gemm(o, n, p, T::one(), g.data(), false, &cols, true, T::zero(), &mut dw);
            shaped(x[1].shape(), dw)
        });
        let dbias = needs[2].then(|| {
            let sums = g.data().chunks_exact(n.max(1)).map(|r| r.iter().copied().sum()).collect();
            shaped(x[2].shape(), sums)
        });
        vec![dinput, dweight, dbias]
    }
}

struct MaxPool2d {
    argmax: Vec<usize>,
}
impl<T: Element> Function<T> for MaxPool2d {
    fn name(&self) -> &'static str {
        "maxpool2d"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut out = vec![T::zero(); x[0].len()];
        for (&src, &v) in self.argmax.iter().zip(g.data()) {
            out[src] = out[src] + v;
        }
        vec![Some(shaped(x[0].shape(), out))]
    }
}

// ── sorting ─────────────────────────────────────────────────────────

/// Row-wise sort; `perm[r * cols + i]` is the source column of output `i`.
struct SortRows {
    perm: Vec<usize>,
    cols: usize,
}
impl<T: Element> Function<T> for SortRows {
    fn name(&self) -> &'static str {
        "sort"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut out = vec![T::zero(); x[0].len()];
        for (r, (prow, grow)) in self
            .perm
            .chunks_exact(self.cols.max(1))
            .zip(g.data().chunks_exact(self.cols.max(1)))
            .enumerate()
        {
            let base = r * self.cols;
            for (&src, &v) in prow.iter().zip(grow) {
                out[base + src] = out[base + src] + v;
            }
        }
        vec![Some(shaped(x[0].shape(), out))]
    }
}

/// Ascending stable order of `row`; equal values keep their input order so
/// the first occurrence takes the lowest output slot.
pub(crate) fn argsort<T: Element>(row: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| {
        row[a]
            .partial_cmp(&row[b])
            .unwrap_or_else(|| row[a].is_nan().cmp(&row[b].is_nan()))
    });
    idx
}

impl<'t, T: Element> Var<'t, T> {
    fn unary(&self, op: impl Function<T> + 'static, f: impl Fn(T) -> T) -> Var<'t, T> {
        let out = self.value().map(f);
        self.tape.record(op, &[*self], out)
    }

    fn binary(
        &self,
        other: &Var<'t, T>,
        name: &'static str,
        op: impl Function<T> + 'static,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape(name, &a, &b)?;
        let out = a.zip_map(&b, f);
        Ok(self.tape.record(op, &[*self, *other], out))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", Sub, |a, b| a - b)
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", Mul, |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        self.unary(Scale(c), |v| v * c)
    }

    pub fn add_scalar(&self, c: T) -> Var<'t, T> {
        self.unary(Identity, |v| v + c)
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary(Relu, |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.unary(Sigmoid, sigmoid)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Var<'t, T> {
        self.unary(Softplus, softplus)
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary(Exp, |v| v.exp())
    }

    pub fn square(&self) -> Var<'t, T> {
        self.unary(Square, |v| v * v)
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum(&self) -> Var<'t, T> {
        let total = self.value().sum();
        self.tape.record(SumAll(1.0), &[*self], Tensor::scalar(total))
    }

    pub fn mean(&self) -> Var<'t, T> {
        let value = self.value();
        let n = value.len().max(1);
        let mean = value.sum() / T::from_usize(n).expect("length");
        self.tape.record(SumAll(1.0 / n as f64), &[*self], Tensor::scalar(mean))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let out = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.record(Reshape, &[*self], out))
    }

    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let out = self.value().transpose()?;
        Ok(self.tape.record(Transpose, &[*self], out))
    }

    /// Adds `bias` along the trailing axis of `self`.
    pub fn add_bias(&self, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, b) = (self.value(), bias.value());
        if b.ndim() != 1 || x.shape().last() != Some(&b.len()) {
            return Err(TensorError::shape("add_bias", x.shape(), b.shape()));
        }
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_exact_mut(b.len().max(1)) {
            for (v, &c) in row.iter_mut().zip(b.data()) {
                *v = *v + c;
            }
        }
        Ok(self.tape.record(AddBias, &[*self, *bias], out))
    }

    /// Matrix product of `self[m x k]` and `rhs[k x n]`.
    pub fn matmul(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.value().matmul(&rhs.value())?;
        Ok(self.tape.record(MatMul, &[*self, *rhs], out))
    }

    /// Affine map `self[m x k] * weight[k x n] + bias[n]`.
    pub fn linear(&self, weight: &Var<'t, T>, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.affine(weight, bias, false)
    }

    /// `relu(self * weight + bias)` as a single recorded operation.
    pub fn linear_relu(&self, weight: &Var<'t, T>, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.affine(weight, bias, true)
    }

    fn affine(&self, weight: &Var<'t, T>, bias: &Var<'t, T>, relu: bool) -> Result<Var<'t, T>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (m, k) = x.dims2("linear")?;
        let (k2, n) = w.dims2("linear")?;
        if k != k2 {
            return Err(TensorError::shape("linear", x.shape(), w.shape()));
        }
        if b.shape() != [n] {
            return Err(TensorError::shape("linear", w.shape(), b.shape()));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(b.data());
        }
        T::gemm(m, k, n, T::one(), x.data(), false, w.data(), false, T::one(), &mut out);
        if relu {
            for v in &mut out {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
        let op = Linear { relu };
        Ok(self.tape.record(op, &[*self, *weight, *bias], shaped(&[m, n], out)))
    }

    /// Column-wise concatenation of `self[n x p]` and `other[n x q]`.
    pub fn concat_cols(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let (ra, ca) = a.dims2("concat_cols")?;
        let (rb, cb) = b.dims2("concat_cols")?;
        if ra != rb {
            return Err(TensorError::shape("concat_cols", a.shape(), b.shape()));
        }
        let mut out = Vec::with_capacity(a.len() + b.len());
        for r in 0..ra {
            out.extend_from_slice(&a.data()[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&b.data()[r * cb..(r + 1) * cb]);
        }
        let out = Tensor::new(vec![ra, ca + cb], out)?;
        Ok(self
            .tape
            .record(ConcatCols { left: ca, right: cb }, &[*self, *other], out))
    }

    /// Gathers columns of a 2-D tensor; repeated indices are allowed.
    pub fn select_cols(&self, index: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let (rows, cols) = x.dims2("select_cols")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= cols) {
            return Err(TensorError::contract(
                "select_cols",
                format!("column {bad} out of range for {cols} columns"),
            ));
        }
        let mut out = Vec::with_capacity(rows * index.len());
        for r in 0..rows {
            out.extend(index.iter().map(|&c| x.data()[r * cols + c]));
        }
        let out = Tensor::new(vec![rows, index.len()], out)?;
        Ok(self.tape.record(
            SelectCols {
                index: index.to_vec(),
            },
            &[*self],
            out,
        ))
    }

    /// `x[c, ...] * scale[c] + shift[c]` with constant coefficients.
    pub fn channel_affine(&self, scale: &[T], shift: &[T]) -> Result<Var<'t, T>> {
        let x = self.value();
        let channels = x.shape().first().copied().unwrap_or(0);
        if scale.len() != channels || shift.len() != channels {
            return Err(TensorError::shape("channel_affine", x.shape(), &[scale.len()]));
        }
        let mut out = (*x).clone();
        let plane = x.len() / channels.max(1);
        for ((chunk, &s), &b) in out.data_mut().chunks_exact_mut(plane.max(1)).zip(scale).zip(shift) {
            chunk.iter_mut().for_each(|v| *v = *v * s + b);
        }
        Ok(self.tape.record(
            ChannelAffine {
                scale: scale.to_vec(),
            },
            &[*self],
            out,
        ))
    }

    /// 2-D cross-correlation of a `C_in x H x W` input with a
    /// `C_out x C_in x kh x kw` kernel plus per-channel bias.
    pub fn conv2d(
        &self,
        weight: &Var<'t, T>,
        bias: &Var<'t, T>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, T>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (channels, height, width) = x.dims3("conv2d")?;
        let [out_channels, in_channels, kh, kw] = w.shape()[..] else {
            return Err(TensorError::contract(
                "conv2d",
                format!("weight must be 4-D, got {:?}", w.shape()),
            ));
        };
        if in_channels != channels {
            return Err(TensorError::shape("conv2d", x.shape(), w.shape()));
        }
        if b.shape() != [out_channels] {
            return Err(TensorError::shape("conv2d", w.shape(), b.shape()));
        }
        if stride == 0 {
            return Err(TensorError::contract("conv2d", "stride must be at least 1"));
        }
        let (ph, pw) = (height + 2 * padding, width + 2 * padding);
        if kh == 0 || kw == 0 || kh > ph || kw > pw {
            return Err(TensorError::shape("conv2d", x.shape(), w.shape()));
        }
        let geom = ConvGeometry {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            padding,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        };
        let cols = geom.im2col(x.data());
        let n = geom.out_len();
        let mut out = vec![T::zero(); out_channels * n];
        for (row, &bv) in out.chunks_exact_mut(n).zip(b.data()) {
            row.iter_mut().for_each(|v| *v = bv);
        }
        T::gemm(out_channels, geom.patch_len(), n, T::one(), w.data(), false, &cols, false, T::one(), &mut out);
        let out = Tensor::new(vec![out_channels, geom.out_h, geom.out_w], out)?;
        Ok(self
            .tape
            .record(Conv2d { geom, out_channels }, &[*self, *weight, *bias], out))
    }

    /// Max pooling over `k x k` windows with stride `stride` (no padding).
    /// Ties route the gradient to the first maximal element in row-major
    /// window order.
    pub fn maxpool2d(&self, k: usize, stride: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (channels, height, width) = x.dims3("maxpool2d")?;
        if k == 0 || stride == 0 || k > height || k > width {
            return Err(TensorError::contract(
                "maxpool2d",
                format!("window {k} stride {stride} does not fit {:?}", x.shape()),
            ));
        }
        let (oh, ow) = ((height - k) / stride + 1, (width - k) / stride + 1);
        let mut out = Vec::with_capacity(channels * oh * ow);
        let mut argmax = Vec::with_capacity(channels * oh * ow);
        for c in 0..channels {
            let base = c * height * width;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * width + ox * stride;
                    for ky in 0..k {
                        for kx in 0..k {
                            let i = base + (oy * stride + ky) * width + ox * stride + kx;
                            if x.data()[i] > x.data()[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(x.data()[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![channels, oh, ow], out)?;
        Ok(self.tape.record(MaxPool2d { argmax }, &[*self], out))
    }

    /// Ascending sort of a 1-D tensor together with the permutation
    /// (`out[i] = x[perm[i]]`). The adjoint scatters through `perm`.
    pub fn sort(&self) -> Result<(Var<'t, T>, Vec<usize>)> {
        let x = self.value();
        if x.ndim() != 1 {
            return Err(TensorError::contract(
                "sort",
                format!("expected a 1-D tensor, got shape {:?}", x.shape()),
            ));
        }
        let perm = argsort(x.data());
        let out = Tensor::from_vec(perm.iter().map(|&i| x.data()[i]).collect());
        let cols = perm.len();
        let var = self.tape.record(
            SortRows {
                perm: perm.clone(),
                cols,
            },
            &[*self],
            out,
        );
        Ok((var, perm))
    }

    /// Sorts every row of a 2-D tensor independently (see [`Var::sort`]).
    pub fn sort_rows(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (_, cols) = x.dims2("sort_rows")?;
        let mut perm = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks_exact(cols.max(1)) {
            let p = argsort(row);
            out.extend(p.iter().map(|&i| row[i]));
            perm.extend(p);
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.tape.record(SortRows { perm, cols }, &[*self], out))
    }
}
