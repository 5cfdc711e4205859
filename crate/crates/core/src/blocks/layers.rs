//! Named layers that own their parameter names and report their cost.

use crate::analysis::CostRow;
use crate::autodiff::Var;
use crate::error::Result;
use crate::nn::{ConvSpec, SESpec, SeWeights, LAYER_NORM_EPS};
use crate::params::{Ctx, Init, ParamBuilder};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<T>, name: String, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        b.declare(format!("{name}.weight"), spec.weight_shape(), Init::FanIn(spec.fan_in()))?;
        if spec.bias {
            b.declare(format!("{name}.bias"), spec.bias_shape(), Init::Zeros)?;
        }
        Ok(Conv { name, spec })
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = cx.p(&self.weight_name())?;
        let b = if self.spec.bias { Some(cx.p(&format!("{}.bias", self.name))?) } else { None };
        cx.tape.conv2d(x, w, b, &self.spec)
    }

    /// Appends this layer's row for an `h x w` input; returns the output size.
    pub fn cost(&self, h: usize, w: usize, rows: &mut Vec<CostRow>) -> Result<(usize, usize)> {
        rows.push(CostRow::new(&self.name, self.spec.param_count(), self.spec.macs(h, w)?));
        self.spec.output_hw(h, w)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub channels: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<T>, name: String, channels: usize) -> Result<Self> {
        let shape = crate::tensor::Shape::new(1, channels, 1, 1);
        b.declare(format!("{name}.gamma"), shape, Init::Ones)?;
        b.declare(format!("{name}.beta"), shape, Init::Zeros)?;
        Ok(LayerNorm { name, channels })
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let g = cx.p(&format!("{}.gamma", self.name))?;
        let b = cx.p(&format!("{}.beta", self.name))?;
        cx.tape.layer_norm(x, g, b, T::lit(LAYER_NORM_EPS))
    }

    /// Normalization arithmetic is not counted as MACs.
    pub fn cost(&self, rows: &mut Vec<CostRow>) {
        rows.push(CostRow::new(&self.name, 2 * self.channels as u64, 0));
    }
}

/// Squeeze-excitation channel attention with named weights.
#[derive(Clone, Debug)]
pub struct Se {
    pub name: String,
    pub spec: SESpec,
    squeeze: Conv,
    excite: Conv,
}

impl Se {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<T>, name: String, spec: SESpec) -> Result<Self> {
        spec.validate()?;
        let squeeze = Conv::new(b, format!("{name}.squeeze"), spec.squeeze())?;
        let excite = Conv::new(b, format!("{name}.excite"), spec.excite())?;
        Ok(Se { name, spec, squeeze, excite })
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = SeWeights {
            w1: cx.p(&self.squeeze.weight_name())?,
            b1: cx.p(&format!("{}.bias", self.squeeze.name))?,
            w2: cx.p(&self.excite.weight_name())?,
            b2: cx.p(&format!("{}.bias", self.excite.name))?,
        };
        cx.tape.channel_attention(x, &self.spec, &w, cx.detach_global_gates)
    }

    /// The two projections act on a `1 x 1` pooled map: `2 C hidden` MACs.
    pub fn cost(&self, rows: &mut Vec<CostRow>) -> Result<()> {
        self.squeeze.cost(1, 1, rows)?;
        self.excite.cost(1, 1, rows)?;
        Ok(())
    }
}
