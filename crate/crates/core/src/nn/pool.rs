//! Global average pooling and Simple Gate.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub fn global_avg_pool_value<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let p = s.plane();
    let inv = T::one() / T::lit(p as f64);
    let data = x.data().chunks(p).map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) * inv).collect();
    Tensor::from_vec(Shape::new(s.n(), s.c(), 1, 1), data).expect("pool shape")
}

fn gate_halves<T: Scalar>(x: &Tensor<T>) -> Result<usize> {
    let c = x.shape().c();
    if !c.is_multiple_of(2) {
        return Err(Error::shape("simple_gate", format!("needs an even channel count, got {c}")));
    }
    Ok(c / 2)
}

pub fn simple_gate_value<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let half = gate_halves(x)?;
    let halves = x.split_channels(&[half, half])?;
    halves[0].mul(&halves[1])
}

impl<T: Scalar> Tape<T> {
    pub fn global_avg_pool(&self, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        self.record(
            "global_avg_pool",
            &[x],
            global_avg_pool_value(x.value()),
            Box::new(move |g| {
                let inv = T::one() / T::lit(s.plane() as f64);
                Ok(vec![Some(Tensor::from_fn(s, |[n, c, _, _]| g.at([n, c, 0, 0]) * inv))])
            }),
        )
    }

    /// Splits channels into halves `(a, b)` and returns `a * b`.
    pub fn simple_gate(&self, x: &Var<T>) -> Result<Var<T>> {
        let half = gate_halves(x.value())?;
        let parts = self.split_channels(x, &[half, half])?;
        self.mul(&parts[0], &parts[1])
    }
}
