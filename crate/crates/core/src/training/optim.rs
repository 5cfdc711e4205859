//! Adam and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub lr0: f64,
    pub lr_min: f64,
    /// Number of cosine cycles over the run.
    pub cycles: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { lr0: 2e-4, lr_min: 1e-6, cycles: 1 }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr0 && self.lr0.is_finite())
            || self.cycles == 0
        {
            return Err(Error::config(format!("invalid learning-rate schedule {self:?}")));
        }
        Ok(())
    }

    /// Cosine decay from `lr0` to `lr_min` within each cycle; the last step of
    /// the run lands exactly on `lr_min`.
    pub fn lr(&self, step: usize, total: usize) -> f64 {
        if total == 0 {
            return self.lr0;
        }
        let step = step.min(total);
        let frac = if step == total {
            1.0
        } else {
            let p = step as f64 * self.cycles as f64 / total as f64;
            p - p.floor()
        };
        self.lr_min + 0.5 * (self.lr0 - self.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    /// One bias-corrected update; any non-finite gradient aborts before
    /// anything is modified.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::config(format!(
                "optimizer has {} slots, {} gradients for {} parameters",
                self.m.len(),
                grads.len(),
                params.len()
            )));
        }
        for (name, (g, p)) in params.names().iter().zip(grads.iter().zip(params.tensors())) {
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch { op: "adam", lhs: p.shape(), rhs: g.shape() });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite { op: format!("gradient of `{name}`") });
            }
        }
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        let one = T::one();
        let slots = self.m.iter_mut().zip(self.v.iter_mut()).zip(params.tensors_mut().iter_mut()).zip(grads);
        for (((m, v), p), g) in slots {
            let mut md = m.to_vec();
            let mut vd = v.to_vec();
            let mut pd = p.to_vec();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + (one - b1) * gi;
                vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
                let mh = md[i] / c1;
                let vh = vd[i] / c2;
                pd[i] -= lr * mh / (vh.sqrt() + eps);
            }
            *m = Tensor::from_vec(m.shape(), md)?;
            *v = Tensor::from_vec(v.shape(), vd)?;
            *p = Tensor::from_vec(p.shape(), pd)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("theta", Tensor::full(Shape::scalar(), v)).unwrap();
        s
    }

    #[test]
    fn one_step_by_hand() {
        let mut p = store(0.0);
        let mut adam = Adam::new(&p);
        adam.update(&mut p, &[Tensor::scalar(1.0)], 0.1).unwrap();
        let want = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.get("theta").unwrap().item() - want).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = store(0.7);
        let mut adam = Adam::new(&p);
        for _ in 0..3 {
            adam.update(&mut p, &[Tensor::scalar(0.0)], 0.1).unwrap();
        }
        assert_eq!(p.get("theta").unwrap().item(), 0.7);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = store(0.0);
        let mut adam = Adam::new(&p);
        let err = adam.update(&mut p, &[Tensor::scalar(f64::NAN)], 0.1).unwrap_err().to_string();
        assert!(err.contains("theta"), "{err}");
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        let s = Schedule::default();
        assert_eq!(s.lr(0, 200), 2e-4);
        assert!((s.lr(200, 200) - 1e-6).abs() < 1e-18);
        let lrs: Vec<f64> = (0..=200).map(|i| s.lr(i, 200)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        let two = Schedule { cycles: 2, ..s };
        assert_eq!(two.lr(100, 200), 2e-4);
        assert!(two.lr(99, 200) < two.lr(100, 200));
        assert!(Schedule { lr0: -1.0, ..s }.validate().is_err());
    }
}
