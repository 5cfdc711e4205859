//! Squeeze-excitation channel attention:
//! `x * sigmoid(W2 gelu(W1 gap(x) + b1) + b2)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::conv::ConvSpec;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SESpec {
    pub channels: usize,
    pub reduction: usize,
}

impl SESpec {
    pub fn new(channels: usize, reduction: usize) -> Self {
        SESpec { channels, reduction }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.reduction == 0 || !self.channels.is_multiple_of(self.reduction) {
            return Err(Error::config(format!(
                "SE reduction {} must divide channel count {}",
                self.reduction, self.channels
            )));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn squeeze(&self) -> ConvSpec {
        ConvSpec::pointwise(self.channels, self.hidden())
    }

    pub fn excite(&self) -> ConvSpec {
        ConvSpec::pointwise(self.hidden(), self.channels)
    }
}

pub struct SeWeights<'a, T: Scalar> {
    pub w1: &'a Var<T>,
    pub b1: &'a Var<T>,
    pub w2: &'a Var<T>,
    pub b2: &'a Var<T>,
}

impl<T: Scalar> Tape<T> {
    /// Per-channel gate of shape `(N, C, 1, 1)`. With `detach_pool` the pooled
    /// statistic is treated as a constant, so no gradient flows through the
    /// global branch.
    pub fn se_gate(&self, x: &Var<T>, spec: &SESpec, w: &SeWeights<T>, detach_pool: bool) -> Result<Var<T>> {
        spec.validate()?;
        if x.shape().c() != spec.channels {
            return Err(Error::shape(
                "channel_attention",
                format!("input {} has {} channels, spec expects {}", x.shape(), x.shape().c(), spec.channels),
            ));
        }
        let mut pooled = self.global_avg_pool(x)?;
        if detach_pool {
            pooled = pooled.detach();
        }
        let h = self.conv2d(&pooled, w.w1, Some(w.b1), &spec.squeeze())?;
        let h = self.gelu(&h)?;
        let h = self.conv2d(&h, w.w2, Some(w.b2), &spec.excite())?;
        self.sigmoid(&h)
    }

    pub fn channel_attention(&self, x: &Var<T>, spec: &SESpec, w: &SeWeights<T>, detach_pool: bool) -> Result<Var<T>> {
        let gate = self.se_gate(x, spec, w, detach_pool)?;
        self.mul(x, &gate)
    }
}
