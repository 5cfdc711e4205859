//! Pointwise activations and axis softmax.
//!
//! GELU uses the tanh approximation
//! `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Axis, Tensor};

const GELU_K0: f64 = 0.797_884_560_802_865_4;
const GELU_K1: f64 = 0.044_715;

pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_K0) * (x + T::lit(GELU_K1) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_K0) * (x + T::lit(GELU_K1) * x * x * x);
    let t = u.tanh();
    let du = T::lit(GELU_K0) * (T::one() + T::lit(3.0 * GELU_K1) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Visits every line along `axis` as `(offset of first element, stride, length)`.
fn for_each_line(shape: crate::tensor::Shape, axis: Axis, mut f: impl FnMut(usize, usize, usize)) {
    let (h, w) = (shape.h(), shape.w());
    for nc in 0..shape.n() * shape.c() {
        let base = nc * h * w;
        match axis {
            Axis::W => (0..h).for_each(|r| f(base + r * w, 1, w)),
            Axis::H => (0..w).for_each(|col| f(base + col, w, h)),
        }
    }
}

/// Max-subtracted softmax along `axis`.
pub fn softmax_value<T: Scalar>(x: &Tensor<T>, axis: Axis) -> Tensor<T> {
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for_each_line(x.shape(), axis, |off, stride, len| {
        let mut m = T::neg_infinity();
        for i in 0..len {
            m = m.max(xd[off + i * stride]);
        }
        let mut z = T::zero();
        for i in 0..len {
            let e = (xd[off + i * stride] - m).exp();
            out[off + i * stride] = e;
            z += e;
        }
        let inv = T::one() / z;
        for i in 0..len {
            out[off + i * stride] *= inv;
        }
    });
    Tensor::from_vec(x.shape(), out).expect("softmax shape")
}

impl<T: Scalar> Tape<T> {
    pub fn gelu(&self, x: &Var<T>) -> Result<Var<T>> {
        self.unary("gelu", x, gelu_scalar, gelu_grad_scalar)
    }

    pub fn sigmoid(&self, x: &Var<T>) -> Result<Var<T>> {
        self.unary("sigmoid", x, sigmoid_scalar, |v| {
            let s = sigmoid_scalar(v);
            s * (T::one() - s)
        })
    }

    pub fn softmax(&self, x: &Var<T>, axis: Axis) -> Result<Var<T>> {
        let y = softmax_value(x.value(), axis);
        let yc = y.clone();
        self.record(
            "softmax",
            &[x],
            y,
            Box::new(move |g| {
                let (gd, yd) = (g.data(), yc.data());
                let mut dx = vec![T::zero(); gd.len()];
                for_each_line(yc.shape(), axis, |off, stride, len| {
                    let mut dot = T::zero();
                    for i in 0..len {
                        dot += gd[off + i * stride] * yd[off + i * stride];
                    }
                    for i in 0..len {
                        let k = off + i * stride;
                        dx[k] = yd[k] * (gd[k] - dot);
                    }
                });
                Ok(vec![Some(Tensor::from_vec(yc.shape(), dx)?)])
            }),
        )
    }
}
