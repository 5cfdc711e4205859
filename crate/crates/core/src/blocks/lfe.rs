//! Local feature extraction block:
//! `x + contract(CA(dw3(gelu(LN(dw3(expand(x)))))))`.
//!
//! Channel attention runs at the expanded width, before the 1x1 contraction.

use serde::{Deserialize, Serialize};

use crate::analysis::CostRow;
use crate::autodiff::Var;
use crate::blocks::layers::{Conv, LayerNorm, Se};
use crate::error::{Error, Result};
use crate::nn::{ConvSpec, SESpec};
use crate::params::{Ctx, ParamBuilder};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LfeSpec {
    pub channels: usize,
    pub expand: usize,
    pub se_reduction: usize,
    pub use_ca: bool,
}

impl LfeSpec {
    pub fn width(&self) -> usize {
        self.channels * self.expand
    }
}

#[derive(Clone, Debug)]
pub struct Lfe {
    pub spec: LfeSpec,
    pub name: String,
    expand: Conv,
    dw1: Conv,
    norm: LayerNorm,
    dw2: Conv,
    ca: Option<Se>,
    contract: Conv,
}

impl Lfe {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<T>, name: String, spec: LfeSpec) -> Result<Self> {
        if spec.channels == 0 || spec.expand == 0 {
            return Err(Error::config(format!("LFE {name}: channels and expansion must be positive")));
        }
        let (c, e) = (spec.channels, spec.width());
        Ok(Lfe {
            expand: Conv::new(b, format!("{name}.expand"), ConvSpec::pointwise(c, e))?,
            dw1: Conv::new(b, format!("{name}.dw1"), ConvSpec::depthwise(e, 3))?,
            norm: LayerNorm::new(b, format!("{name}.norm"), e)?,
            dw2: Conv::new(b, format!("{name}.dw2"), ConvSpec::depthwise(e, 3))?,
            ca: if spec.use_ca {
                Some(Se::new(b, format!("{name}.ca"), SESpec::new(e, spec.se_reduction))?)
            } else {
                None
            },
            contract: Conv::new(b, format!("{name}.contract"), ConvSpec::pointwise(e, c))?,
            spec,
            name,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        if x.shape().c() != self.spec.channels {
            return Err(Error::shape(
                "lfe",
                format!("{}: input {} does not have {} channels", self.name, x.shape(), self.spec.channels),
            ));
        }
        let t = cx.tape;
        let mut y = self.expand.forward(cx, x)?;
        y = self.dw1.forward(cx, &y)?;
        y = self.norm.forward(cx, &y)?;
        y = t.gelu(&y)?;
        y = self.dw2.forward(cx, &y)?;
        if let Some(ca) = &self.ca {
            y = ca.forward(cx, &y)?;
        }
        y = self.contract.forward(cx, &y)?;
        t.add(x, &y)
    }

    pub fn cost(&self, h: usize, w: usize, rows: &mut Vec<CostRow>) -> Result<()> {
        self.expand.cost(h, w, rows)?;
        self.dw1.cost(h, w, rows)?;
        self.norm.cost(rows);
        self.dw2.cost(h, w, rows)?;
        if let Some(ca) = &self.ca {
            ca.cost(rows)?;
        }
        self.contract.cost(h, w, rows)?;
        Ok(())
    }
}
