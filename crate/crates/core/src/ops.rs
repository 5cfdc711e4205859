//! Differentiable tensor-core operations recorded on a [`Tape`].

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

impl<T: Scalar> Tape<T> {
    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let value = a.value().add(b.value())?;
        let (sa, sb) = (a.shape(), b.shape());
        self.record("add", &[a, b], value, Box::new(move |g| Ok(vec![Some(g.sum_to(sa)?), Some(g.sum_to(sb)?)])))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let value = a.value().sub(b.value())?;
        let (sa, sb) = (a.shape(), b.shape());
        self.record(
            "sub",
            &[a, b],
            value,
            Box::new(move |g| Ok(vec![Some(g.sum_to(sa)?), Some(g.sum_to(sb)?.scale(-T::one()))])),
        )
    }

    /// Elementwise product; either side may broadcast over size-1 axes.
    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let value = a.value().mul(b.value())?;
        let (av, bv) = (a.value().clone(), b.value().clone());
        let (ta, tb) = (a.is_tracked(), b.is_tracked());
        self.record(
            "mul",
            &[a, b],
            value,
            Box::new(move |g| {
                let ga = if ta { Some(g.mul(&bv)?.sum_to(av.shape())?) } else { None };
                let gb = if tb { Some(g.mul(&av)?.sum_to(bv.shape())?) } else { None };
                Ok(vec![ga, gb])
            }),
        )
    }

    pub fn scale(&self, a: &Var<T>, s: T) -> Result<Var<T>> {
        self.record("scale", &[a], a.value().scale(s), Box::new(move |g| Ok(vec![Some(g.scale(s))])))
    }

    pub fn add_scalar(&self, a: &Var<T>, s: T) -> Result<Var<T>> {
        self.record("add_scalar", &[a], a.value().map(|v| v + s), Box::new(|g| Ok(vec![Some(g.clone())])))
    }

    pub fn square(&self, a: &Var<T>) -> Result<Var<T>> {
        let av = a.value().clone();
        self.record(
            "square",
            &[a],
            av.map(|v| v * v),
            Box::new(move |g| Ok(vec![Some(g.zip_map(&av, "square", |g, x| g * (x + x))?)])),
        )
    }

    /// `|a|`; the subgradient at zero is taken as zero.
    pub fn abs(&self, a: &Var<T>) -> Result<Var<T>> {
        let av = a.value().clone();
        self.record(
            "abs",
            &[a],
            av.map(|v| v.abs()),
            Box::new(move |g| {
                Ok(vec![Some(g.zip_map(&av, "abs", |g, x| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                })?)])
            }),
        )
    }

    /// `ln(max(a, floor))`; the gradient is zero where the floor is active.
    pub fn ln_floored(&self, a: &Var<T>, floor: T) -> Result<Var<T>> {
        let av = a.value().clone();
        self.record(
            "ln",
            &[a],
            av.map(|v| v.max(floor).ln()),
            Box::new(move |g| {
                Ok(vec![Some(g.zip_map(&av, "ln", |g, x| if x > floor { g / x } else { T::zero() })?)])
            }),
        )
    }

    pub fn sum(&self, a: &Var<T>) -> Result<Var<T>> {
        let shape = a.shape();
        self.record(
            "sum",
            &[a],
            Tensor::scalar(a.value().sum()),
            Box::new(move |g| Ok(vec![Some(Tensor::full(shape, g.item()))])),
        )
    }

    pub fn mean(&self, a: &Var<T>) -> Result<Var<T>> {
        let shape = a.shape();
        let inv = T::one() / T::lit(shape.numel() as f64);
        self.record(
            "mean",
            &[a],
            Tensor::scalar(a.value().sum() * inv),
            Box::new(move |g| Ok(vec![Some(Tensor::full(shape, g.item() * inv))])),
        )
    }

    /// Batched matrix product over trailing planes; see [`Tensor::matmul`].
    pub fn matmul(&self, a: &Var<T>, b: &Var<T>, trans_a: bool, trans_b: bool) -> Result<Var<T>> {
        let value = a.value().matmul(b.value(), trans_a, trans_b)?;
        let (av, bv) = (a.value().clone(), b.value().clone());
        let (ta, tb) = (a.is_tracked(), b.is_tracked());
        self.record(
            "matmul",
            &[a, b],
            value,
            Box::new(move |g| {
                // C = op(A) op(B); dop(A) = G op(B)^T, dop(B) = op(A)^T G.
                let ga = if !ta {
                    None
                } else if trans_a {
                    // A^T = op(A)  =>  dA = op(B) G^T
                    Some(bv.matmul(g, trans_b, true)?)
                } else {
                    Some(g.matmul(&bv, false, !trans_b)?)
                };
                let gb = if !tb {
                    None
                } else if trans_b {
                    // dB = G^T op(A)
                    Some(g.matmul(&av, true, trans_a)?)
                } else {
                    Some(av.matmul(g, !trans_a, false)?)
                };
                Ok(vec![ga, gb])
            }),
        )
    }

    pub fn reshape(&self, a: &Var<T>, shape: Shape) -> Result<Var<T>> {
        let from = a.shape();
        self.record("reshape", &[a], a.value().reshape(shape)?, Box::new(move |g| Ok(vec![Some(g.reshape(from)?)])))
    }

    pub fn split_channels(&self, a: &Var<T>, parts: &[usize]) -> Result<Vec<Var<T>>> {
        let pieces = a.value().split_channels(parts)?;
        let full = a.shape();
        let mut offset = 0;
        let mut outs = Vec::with_capacity(parts.len());
        for (piece, &p) in pieces.into_iter().zip(parts) {
            let start = offset;
            offset += p;
            outs.push(self.record(
                "split_channels",
                &[a],
                piece,
                Box::new(move |g| {
                    let before = start;
                    let after = full.c() - start - p;
                    let mut blocks = Vec::with_capacity(3);
                    if before > 0 {
                        blocks.push(Tensor::zeros(full.with_c(before)));
                    }
                    blocks.push(g.clone());
                    if after > 0 {
                        blocks.push(Tensor::zeros(full.with_c(after)));
                    }
                    Ok(vec![Some(Tensor::concat_channels(&blocks)?)])
                }),
            )?);
        }
        Ok(outs)
    }

    pub fn concat_channels(&self, xs: &[&Var<T>]) -> Result<Var<T>> {
        let values: Vec<Tensor<T>> = xs.iter().map(|x| x.value().clone()).collect();
        let value = Tensor::concat_channels(&values)?;
        let parts: Vec<usize> = xs.iter().map(|x| x.shape().c()).collect();
        self.record(
            "concat_channels",
            xs,
            value,
            Box::new(move |g| Ok(g.split_channels(&parts)?.into_iter().map(Some).collect())),
        )
    }

    /// Elementwise op with user-supplied derivative `d/dx f(x)`.
    pub fn unary(
        &self,
        op: &'static str,
        a: &Var<T>,
        f: impl Fn(T) -> T + Sync,
        df: impl Fn(T) -> T + 'static,
    ) -> Result<Var<T>> {
        let av = a.value().clone();
        self.record(op, &[a], av.map(f), Box::new(move |g| Ok(vec![Some(g.zip_map(&av, op, |g, x| g * df(x))?)])))
    }

    /// Sum of channels at one spatial location: `sum_c a[n, c, h, w]` over the batch.
    pub fn pick_location(&self, a: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
        let s = a.shape();
        if h >= s.h() || w >= s.w() {
            return Err(Error::OutOfBounds { what: "location", detail: format!("({h}, {w}) outside feature map {s}") });
        }
        let mut total = T::zero();
        for n in 0..s.n() {
            for c in 0..s.c() {
                total += a.value().at([n, c, h, w]);
            }
        }
        self.record(
            "pick_location",
            &[a],
            Tensor::scalar(total),
            Box::new(move |g| {
                let v = g.item();
                Ok(vec![Some(Tensor::from_fn(s, |[_, _, y, x]| if y == h && x == w { v } else { T::zero() }))])
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use crate::rng::Rng;

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(0);
        let x = tape.leaf(rng.uniform_tensor(Shape::new(2, 3, 2, 2), -1.0, 1.0));
        let y = tape.sum(&x).unwrap();
        let g = tape.backward(&y).unwrap().get(&x).unwrap();
        assert_eq!(g, Tensor::ones(x.shape()));
    }

    #[test]
    fn grad_of_sum_squares_is_twice_x() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(1);
        let x = tape.leaf(rng.uniform_tensor(Shape::new(1, 2, 3, 3), -1.0, 1.0));
        let sq = tape.mul(&x, &x).unwrap();
        let y = tape.sum(&sq).unwrap();
        let g = tape.backward(&y).unwrap().get(&x).unwrap();
        assert_eq!(g, x.value().scale(2.0));
    }

    #[test]
    fn backward_is_linear() {
        // grad(a f + b g) == a grad f + b grad g on a shared leaf.
        let mut rng = Rng::new(5);
        let x0: Tensor<f64> = rng.uniform_tensor(Shape::new(1, 2, 3, 3), -1.0, 1.0);
        let w0: Tensor<f64> = rng.uniform_tensor(Shape::new(1, 2, 3, 3), -1.0, 1.0);
        let f = |tape: &Tape<f64>, x: &Var<f64>| -> Result<Var<f64>> {
            let s = tape.square(x)?;
            tape.sum(&s)
        };
        let g = |tape: &Tape<f64>, x: &Var<f64>| -> Result<Var<f64>> {
            let m = tape.matmul(x, x, false, true)?;
            let w = Var::constant(w0.clone());
            let p = tape.mul(x, &w)?;
            let a = tape.sum(&m)?;
            let b = tape.sum(&p)?;
            tape.add(&a, &b)
        };
        let grad_of = |which: u8| {
            let tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let out = match which {
                0 => f(&tape, &x).unwrap(),
                1 => g(&tape, &x).unwrap(),
                _ => {
                    let a = f(&tape, &x).unwrap();
                    let b = g(&tape, &x).unwrap();
                    let a = tape.scale(&a, 0.7).unwrap();
                    let b = tape.scale(&b, -1.3).unwrap();
                    tape.add(&a, &b).unwrap()
                }
            };
            tape.backward(&out).unwrap().get(&x).unwrap()
        };
        let (gf, gg, gc) = (grad_of(0), grad_of(1), grad_of(2));
        let combo = gf.scale(0.7).add(&gg.scale(-1.3)).unwrap();
        for (a, b) in combo.data().iter().zip(gc.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn matmul_transpose_grads() {
        let cfg = GradCheckConfig::default();
        let mut rng = Rng::new(9);
        let a: Tensor<f64> = rng.uniform_tensor(Shape::new(2, 1, 3, 4), -1.0, 1.0);
        let b: Tensor<f64> = rng.uniform_tensor(Shape::new(2, 1, 4, 3), -1.0, 1.0);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let (a, b) = (if ta { a.transpose_hw() } else { a.clone() }, if tb { b.transpose_hw() } else { b.clone() });
            let report = crate::gradcheck::grad_check_many(
                |t, xs| {
                    let m = t.matmul(&xs[0], &xs[1], ta, tb)?;
                    let s = t.square(&m)?;
                    t.sum(&s)
                },
                &[a, b],
                &cfg,
            )
            .unwrap();
            assert!(report.passed, "ta={ta} tb={tb}: {report:?}");
        }
    }

    #[test]
    fn split_concat_grads() {
        let mut rng = Rng::new(10);
        let x: Tensor<f64> = rng.uniform_tensor(Shape::new(2, 5, 2, 2), -1.0, 1.0);
        let w: Tensor<f64> = rng.uniform_tensor(Shape::new(2, 5, 2, 2), -1.0, 1.0);
        let report = grad_check(
            |t, x| {
                let parts = t.split_channels(x, &[2, 1, 2])?;
                let sq = t.square(&parts[1])?;
                let y = t.concat_channels(&[&parts[2], &sq, &parts[0]])?;
                let p = t.mul(&y, &Var::constant(w.clone()))?;
                t.sum(&p)
            },
            &x,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
