//! Layer normalization across channels at every spatial location.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;

struct Normalized<T: Scalar> {
    y: Tensor<T>,
    xhat: Vec<T>,
    /// `1 / sqrt(var + eps)` per `(n, pixel)`.
    rstd: Vec<T>,
}

fn check<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    let want = Shape::new(1, x.shape().c(), 1, 1);
    for (t, name) in [(gamma, "layer_norm gamma"), (beta, "layer_norm beta")] {
        if t.shape() != want {
            return Err(Error::ShapeMismatch { op: name, lhs: t.shape(), rhs: want });
        }
    }
    Ok(())
}

fn normalize<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Normalized<T> {
    let s = x.shape();
    let (c, p) = (s.c(), s.plane());
    let xd = x.data();
    let inv_c = T::one() / T::lit(c as f64);
    let mut xhat = vec![T::zero(); s.numel()];
    let mut rstd = vec![T::zero(); s.n() * p];
    let mut y = vec![T::zero(); s.numel()];
    for n in 0..s.n() {
        let base = n * c * p;
        let mut mean = vec![T::zero(); p];
        for ch in 0..c {
            for (m, &v) in mean.iter_mut().zip(&xd[base + ch * p..base + (ch + 1) * p]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        let mut var = vec![T::zero(); p];
        for ch in 0..c {
            let row = &xd[base + ch * p..base + (ch + 1) * p];
            for i in 0..p {
                let d = row[i] - mean[i];
                var[i] += d * d;
            }
        }
        let r = &mut rstd[n * p..(n + 1) * p];
        for i in 0..p {
            r[i] = T::one() / (var[i] * inv_c + eps).sqrt();
        }
        for ch in 0..c {
            let (g, b) = (gamma.data()[ch], beta.data()[ch]);
            let off = base + ch * p;
            for i in 0..p {
                let xh = (xd[off + i] - mean[i]) * r[i];
                xhat[off + i] = xh;
                y[off + i] = xh * g + b;
            }
        }
    }
    Normalized { y: Tensor::from_vec(s, y).expect("layer_norm shape"), xhat, rstd }
}

/// Value-level layer norm with per-channel affine `gamma`, `beta` of shape `(1, C, 1, 1)`.
pub fn layer_norm_value<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    check(x, gamma, beta)?;
    Ok(normalize(x, gamma, beta, eps).y)
}

impl<T: Scalar> Tape<T> {
    pub fn layer_norm(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: T) -> Result<Var<T>> {
        check(x.value(), gamma.value(), beta.value())?;
        let Normalized { y, xhat, rstd } = normalize(x.value(), gamma.value(), beta.value(), eps);
        let s = x.shape();
        let gam = gamma.value().clone();
        self.record(
            "layer_norm",
            &[x, gamma, beta],
            y,
            Box::new(move |g| {
                let (c, p) = (s.c(), s.plane());
                let gd = g.data();
                let inv_c = T::one() / T::lit(c as f64);
                let mut dx = vec![T::zero(); s.numel()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for n in 0..s.n() {
                    let base = n * c * p;
                    let mut m1 = vec![T::zero(); p];
                    let mut m2 = vec![T::zero(); p];
                    for ch in 0..c {
                        let gm = gam.data()[ch];
                        let off = base + ch * p;
                        for i in 0..p {
                            let d = gd[off + i] * gm;
                            m1[i] += d;
                            m2[i] += d * xhat[off + i];
                            dgamma[ch] += gd[off + i] * xhat[off + i];
                            dbeta[ch] += gd[off + i];
                        }
                    }
                    let r = &rstd[n * p..(n + 1) * p];
                    for ch in 0..c {
                        let gm = gam.data()[ch];
                        let off = base + ch * p;
                        for i in 0..p {
                            let d = gd[off + i] * gm;
                            dx[off + i] = r[i] * (d - m1[i] * inv_c - xhat[off + i] * m2[i] * inv_c);
                        }
                    }
                }
                let cs = Shape::new(1, c, 1, 1);
                Ok(vec![
                    Some(Tensor::from_vec(s, dx)?),
                    Some(Tensor::from_vec(cs, dgamma)?),
                    Some(Tensor::from_vec(cs, dbeta)?),
                ])
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_many, GradCheckConfig};
    use crate::rng::Rng;

    fn affine(c: usize) -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::ones(Shape::new(1, c, 1, 1)), Tensor::zeros(Shape::new(1, c, 1, 1)))
    }

    #[test]
    fn constant_channels_normalize_to_zero() {
        let x = Tensor::from_fn(Shape::new(1, 4, 2, 2), |[_, _, h, w]| (h * 2 + w) as f64);
        let (g, b) = affine(4);
        let y = layer_norm_value(&x, &g, &b, LAYER_NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_channel_hand_value() {
        let x = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, 3.0]).unwrap();
        let (g, b) = affine(2);
        let y = layer_norm_value(&x, &g, &b, LAYER_NORM_EPS).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn shift_invariant_and_standardized() {
        let mut rng = Rng::new(3);
        let x: Tensor<f64> = rng.uniform_tensor(Shape::new(2, 6, 3, 3), -2.0, 2.0);
        let (g, b) = affine(6);
        let y0 = layer_norm_value(&x, &g, &b, LAYER_NORM_EPS).unwrap();
        let y1 = layer_norm_value(&x.map(|v| v + 7.5), &g, &b, LAYER_NORM_EPS).unwrap();
        for (a, c) in y0.data().iter().zip(y1.data()) {
            assert!((a - c).abs() < 1e-9);
        }
        for n in 0..2 {
            for h in 0..3 {
                for w in 0..3 {
                    let vals: Vec<f64> = (0..6).map(|c| y0.at([n, c, h, w])).collect();
                    let mean = vals.iter().sum::<f64>() / 6.0;
                    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
                    assert!(mean.abs() < 1e-6);
                    assert!((var - 1.0).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn rejects_wrong_affine_width() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 3, 2, 2));
        let (g, b) = affine(2);
        assert!(layer_norm_value(&x, &g, &b, LAYER_NORM_EPS).is_err());
    }

    #[test]
    fn gradient_check() {
        let mut rng = Rng::new(8);
        let x = rng.uniform_tensor(Shape::new(2, 5, 3, 2), -1.0, 1.0);
        let g = rng.uniform_tensor(Shape::new(1, 5, 1, 1), 0.5, 1.5);
        let b = rng.uniform_tensor(Shape::new(1, 5, 1, 1), -0.5, 0.5);
        let probe: Tensor<f64> = rng.uniform_tensor(x.shape(), -1.0, 1.0);
        let report = grad_check_many(
            |t, v| {
                let y = t.layer_norm(&v[0], &v[1], &v[2], LAYER_NORM_EPS)?;
                t.sum(&t.mul(&y, &Var::constant(probe.clone()))?)
            },
            &[x, g, b],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
