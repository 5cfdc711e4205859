//! Dense rank-4 (NCHW) tensors.
//!
//! A [`Tensor`] is an immutable value: the buffer sits behind an `Arc`, so
//! clones are cheap and saved activations can be shared with the tape.
//! Matrices are expressed as the trailing `H x W` plane of a tensor; the
//! leading `N x C` axes act as batch dimensions for [`Tensor::matmul`].

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    /// `(1, 1, rows, cols)`.
    pub const fn matrix(rows: usize, cols: usize) -> Self {
        Shape([1, 1, rows, cols])
    }

    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn plane(&self) -> usize {
        self.h() * self.w()
    }

    pub fn with_c(&self, c: usize) -> Self {
        Shape([self.n(), c, self.h(), self.w()])
    }

    /// Row-major strides.
    pub fn strides(&self) -> [usize; 4] {
        let [_, c, h, w] = self.0;
        [c * h * w, h * w, w, 1]
    }

    /// Shape produced by broadcasting `self` against `other` (each axis equal or 1).
    pub fn broadcast(&self, other: &Shape) -> Option<Shape> {
        let mut out = [0; 4];
        for i in 0..4 {
            let (a, b) = (self.0[i], other.0[i]);
            out[i] = if a == b {
                a
            } else if a == 1 {
                b
            } else if b == 1 {
                a
            } else {
                return None;
            };
        }
        Some(Shape(out))
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "({n}, {c}, {h}, {w})")
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Axis selector for softmax over the trailing matrix plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Normalize along `H` (each column of the `H x W` plane sums to one).
    H,
    /// Normalize along `W` (each row sums to one).
    W,
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<T> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor").field("shape", &self.shape).field("data[..8]", &preview).finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape("from_vec", format!("{} values cannot fill shape {shape}", data.len())));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor { shape, data: Arc::new(vec![value; shape.numel()]) }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self::full(Shape::scalar(), v)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [n, c, h, w] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([i, j, y, x]));
                    }
                }
            }
        }
        Tensor { shape, data: Arc::new(data) }
    }

    /// Identity matrix as a `(1, 1, n, n)` tensor.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(Shape::matrix(n, n), |[_, _, i, j]| if i == j { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| a.as_ref().clone())
    }

    pub fn at(&self, idx: [usize; 4]) -> T {
        let s = self.shape.strides();
        self.data[idx[0] * s[0] + idx[1] * s[1] + idx[2] * s[2] + idx[3]]
    }

    /// Returns the single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {}", self.shape);
        self.data[0]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: Arc::new(self.data.iter().map(|v| U::lit(v.as_f64())).collect()) }
    }

    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.numel() {
            return Err(Error::shape("reshape", format!("cannot view {} as {shape}", self.shape)));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Self {
        Tensor { shape: self.shape, data: Arc::new(self.data.iter().map(|&v| f(v)).collect()) }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch { op, lhs: self.shape, rhs: other.shape });
        }
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape, data: Arc::new(data) })
    }

    /// Elementwise binary op where either operand may have size-1 axes.
    pub fn broadcast_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape == other.shape {
            return self.zip_map(other, op, f);
        }
        let out =
            self.shape.broadcast(&other.shape).ok_or(Error::ShapeMismatch { op, lhs: self.shape, rhs: other.shape })?;
        let sa = broadcast_strides(self.shape, out);
        let sb = broadcast_strides(other.shape, out);
        let [n, c, h, w] = out.0;
        let mut data = Vec::with_capacity(out.numel());
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    let ba = i * sa[0] + j * sa[1] + y * sa[2];
                    let bb = i * sb[0] + j * sb[1] + y * sb[2];
                    for x in 0..w {
                        data.push(f(self.data[ba + x * sa[3]], other.data[bb + x * sb[3]]));
                    }
                }
            }
        }
        Ok(Tensor { shape: out, data: Arc::new(data) })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.broadcast_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.broadcast_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.broadcast_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Sums a broadcast result back down to `target` (the inverse of broadcasting).
    pub fn sum_to(&self, target: Shape) -> Result<Self> {
        if self.shape == target {
            return Ok(self.clone());
        }
        if target.broadcast(&self.shape) != Some(self.shape) {
            return Err(Error::shape("sum_to", format!("{} does not broadcast to {}", target, self.shape)));
        }
        let st = broadcast_strides(target, self.shape);
        let mut out = vec![T::zero(); target.numel()];
        let [n, c, h, w] = self.shape.0;
        let mut k = 0;
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    let base = i * st[0] + j * st[1] + y * st[2];
                    for x in 0..w {
                        out[base + x * st[3]] += self.data[k];
                        k += 1;
                    }
                }
            }
        }
        Tensor::from_vec(target, out)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.numel() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors naming `op` if any value is NaN or infinite.
    pub fn validate(&self, op: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op: op.to_string() })
        }
    }

    /// Batched matrix product over the trailing `H x W` planes.
    ///
    /// With `trans_a` the left operand's planes are read transposed, likewise
    /// for `trans_b`. Batch axes `(N, C)` must agree exactly.
    pub fn matmul(&self, other: &Self, trans_a: bool, trans_b: bool) -> Result<Self> {
        let (a, b) = (self.shape, other.shape);
        if a.n() != b.n() || a.c() != b.c() {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: a, rhs: b });
        }
        let (rows, inner_a) = if trans_a { (a.w(), a.h()) } else { (a.h(), a.w()) };
        let (inner_b, cols) = if trans_b { (b.w(), b.h()) } else { (b.h(), b.w()) };
        if inner_a != inner_b {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: a, rhs: b });
        }
        let k = inner_a;
        let out_shape = Shape::new(a.n(), a.c(), rows, cols);
        let mut out = vec![T::zero(); out_shape.numel()];
        let (pa, pb) = (a.plane(), b.plane());
        let (ad, bd) = (self.data(), other.data());
        out.par_chunks_mut(cols.max(1)).enumerate().for_each(|(row_id, row)| {
            if cols == 0 {
                return;
            }
            let batch = row_id / rows;
            let r = row_id % rows;
            let ab = &ad[batch * pa..(batch + 1) * pa];
            let bb = &bd[batch * pb..(batch + 1) * pb];
            for kk in 0..k {
                let av = if trans_a { ab[kk * a.w() + r] } else { ab[r * a.w() + kk] };
                if trans_b {
                    for (m, o) in row.iter_mut().enumerate() {
                        *o += av * bb[m * b.w() + kk];
                    }
                } else {
                    let brow = &bb[kk * b.w()..kk * b.w() + cols];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        });
        Tensor::from_vec(out_shape, out)
    }

    /// Transposes every `H x W` plane.
    pub fn transpose_hw(&self) -> Self {
        let s = self.shape;
        let out = Shape::new(s.n(), s.c(), s.w(), s.h());
        Tensor::from_fn(out, |[n, c, i, j]| self.at([n, c, j, i]))
    }

    /// Splits along the channel axis into consecutive groups of the given sizes.
    pub fn split_channels(&self, parts: &[usize]) -> Result<Vec<Self>> {
        let s = self.shape;
        let total: usize = parts.iter().sum();
        if total != s.c() {
            return Err(Error::shape(
                "split_channels",
                format!("parts {parts:?} sum to {total}, tensor {s} has {} channels", s.c()),
            ));
        }
        let plane = s.plane();
        let mut outs = Vec::with_capacity(parts.len());
        let mut start = 0;
        for &p in parts {
            let mut data = Vec::with_capacity(s.n() * p * plane);
            for n in 0..s.n() {
                let base = (n * s.c() + start) * plane;
                data.extend_from_slice(&self.data[base..base + p * plane]);
            }
            outs.push(Tensor::from_vec(s.with_c(p), data)?);
            start += p;
        }
        Ok(outs)
    }

    pub fn concat_channels(xs: &[Self]) -> Result<Self> {
        let first = xs.first().ok_or_else(|| Error::shape("concat_channels", "no inputs"))?.shape;
        for x in xs {
            let s = x.shape;
            if s.n() != first.n() || s.h() != first.h() || s.w() != first.w() {
                return Err(Error::ShapeMismatch { op: "concat_channels", lhs: first, rhs: s });
            }
        }
        let c: usize = xs.iter().map(|x| x.shape.c()).sum();
        let plane = first.plane();
        let mut data = Vec::with_capacity(first.n() * c * plane);
        for n in 0..first.n() {
            for x in xs {
                let len = x.shape.c() * plane;
                data.extend_from_slice(&x.data[n * len..(n + 1) * len]);
            }
        }
        Tensor::from_vec(first.with_c(c), data)
    }

    /// Stacks single-sample tensors along the batch axis.
    pub fn stack_batch(xs: &[Self]) -> Result<Self> {
        let first = xs.first().ok_or_else(|| Error::shape("stack_batch", "no inputs"))?.shape;
        let mut data = Vec::with_capacity(first.numel() * xs.len());
        let mut n = 0;
        for x in xs {
            let s = x.shape;
            if s.c() != first.c() || s.h() != first.h() || s.w() != first.w() {
                return Err(Error::ShapeMismatch { op: "stack_batch", lhs: first, rhs: s });
            }
            n += s.n();
            data.extend_from_slice(&x.data);
        }
        Tensor::from_vec(Shape::new(n, first.c(), first.h(), first.w()), data)
    }

    /// The `i`-th sample as a batch of one.
    pub fn batch_item(&self, i: usize) -> Self {
        let s = self.shape;
        let len = s.c() * s.plane();
        let data = self.data[i * len..(i + 1) * len].to_vec();
        Tensor { shape: Shape::new(1, s.c(), s.h(), s.w()), data: Arc::new(data) }
    }
}

/// Strides for reading `src` as if broadcast to `out` (zero stride on size-1 axes).
pub(crate) fn broadcast_strides(src: Shape, out: Shape) -> [usize; 4] {
    let s = src.strides();
    let mut r = [0; 4];
    for i in 0..4 {
        r[i] = if src.0[i] == 1 && out.0[i] != 1 { 0 } else { s[i] };
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (r, k, m) = (a.shape().h(), a.shape().w(), b.shape().w());
        let mut out = vec![0.0; r * m];
        for i in 0..r {
            for j in 0..m {
                let mut s = 0.0;
                for t in 0..k {
                    s += a.at([0, 0, i, t]) * b.at([0, 0, t, j]);
                }
                out[i * m + j] = s;
            }
        }
        out
    }

    #[test]
    fn add_zero_is_identity() {
        let mut rng = Rng::new(1);
        let x: Tensor<f64> = rng.uniform_tensor(Shape::new(2, 3, 4, 5), -1.0, 1.0);
        let z = Tensor::zeros(x.shape());
        assert_eq!(x.add(&z).unwrap(), x);
    }

    #[test]
    fn identity_matmul() {
        let mut rng = Rng::new(2);
        let m: Tensor<f64> = rng.uniform_tensor(Shape::matrix(3, 7), -1.0, 1.0);
        assert_eq!(Tensor::eye(3).matmul(&m, false, false).unwrap(), m);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(3);
        let a: Tensor<f64> = rng.uniform_tensor(Shape::matrix(4, 5), -1.0, 1.0);
        let b: Tensor<f64> = rng.uniform_tensor(Shape::matrix(5, 3), -1.0, 1.0);
        let got = a.matmul(&b, false, false).unwrap();
        for (g, e) in got.data().iter().zip(triple_loop(&a, &b)) {
            assert!((g - e).abs() < 1e-12);
        }
        // Transposed reads agree with explicit transposes.
        let at = a.transpose_hw();
        let bt = b.transpose_hw();
        assert_eq!(at.matmul(&b, true, false).unwrap(), got);
        assert_eq!(a.matmul(&bt, false, true).unwrap(), got);
        assert_eq!(at.matmul(&bt, true, true).unwrap(), got);
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let a = Tensor::<f64>::zeros(Shape::matrix(4, 5));
        let b = Tensor::<f64>::zeros(Shape::matrix(4, 3));
        let err = a.matmul(&b, false, false).unwrap_err().to_string();
        assert!(err.contains("(1, 1, 4, 5)") && err.contains("(1, 1, 4, 3)"), "{err}");
    }

    #[test]
    fn split_paper_latent_widths() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 384, 2, 2));
        let parts = x.split_channels(&[192, 192]).unwrap();
        assert_eq!(parts[0].shape(), Shape::new(1, 192, 2, 2));
        assert_eq!(parts[1].shape(), Shape::new(1, 192, 2, 2));
        assert!(x.split_channels(&[192, 191]).is_err());
    }

    #[test]
    fn split_slices_index_channels() {
        let x = Tensor::<f64>::from_fn(Shape::new(2, 3, 2, 2), |[n, c, h, w]| (n * 1000 + c * 100 + h * 10 + w) as f64);
        let parts = x.split_channels(&[1, 1, 1]).unwrap();
        for (c, p) in parts.iter().enumerate() {
            for n in 0..2 {
                for h in 0..2 {
                    for w in 0..2 {
                        assert_eq!(p.at([n, 0, h, w]), x.at([n, c, h, w]));
                    }
                }
            }
        }
    }

    #[test]
    fn broadcast_per_channel_and_spatial() {
        let x = Tensor::<f64>::from_fn(Shape::new(2, 3, 2, 2), |[n, c, h, w]| (n + c + h + w) as f64);
        let g = Tensor::<f64>::from_fn(Shape::new(2, 3, 1, 1), |[n, c, _, _]| (10 * n + c) as f64);
        let y = x.mul(&g).unwrap();
        assert_eq!(y.at([1, 2, 1, 0]), x.at([1, 2, 1, 0]) * 12.0);
        let s = Tensor::<f64>::from_fn(Shape::new(2, 1, 2, 2), |[_, _, h, w]| (h * 2 + w) as f64);
        let z = x.mul(&s).unwrap();
        assert_eq!(z.at([0, 1, 1, 1]), x.at([0, 1, 1, 1]) * 3.0);
        assert_eq!(z.sum_to(s.shape()).unwrap().shape(), s.shape());
        assert!(x.mul(&Tensor::zeros(Shape::new(1, 2, 1, 1))).is_err());
    }

    #[test]
    fn validate_flags_non_finite() {
        let t = Tensor::<f32>::from_vec(Shape::matrix(1, 2), vec![1.0, f32::NAN]).unwrap();
        let err = t.validate("probe").unwrap_err().to_string();
        assert!(err.contains("probe"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn concat_split_round_trip(seed in 0u64..1000, cuts in proptest::collection::vec(1usize..4, 1..5)) {
                let c: usize = cuts.iter().sum();
                let mut rng = crate::rng::Rng::new(seed);
                let x: Tensor<f32> = rng.uniform_tensor(Shape::new(2, c, 3, 2), -1.0, 1.0);
                let parts = x.split_channels(&cuts).unwrap();
                let back = Tensor::concat_channels(&parts).unwrap();
                prop_assert_eq!(back.data(), x.data());
            }
        }
    }
}
