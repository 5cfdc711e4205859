//! Feed-forward variants, each `x + body(x)`.
//!
//! | variant   | body                                                       |
//! |-----------|------------------------------------------------------------|
//! | `mbffn`   | 1x1 to `beta C`, `dw3 + dw5 + id`, simple gate, 1x1 to `C`  |
//! | `mlp`     | 1x1 to `beta C`, GELU, 1x1 to `C`                          |
//! | `convffn` | 1x1 to `beta C`, dw3, GELU, 1x1 to `C`                     |
//! | `leff`    | 1x1 to `beta C`, GELU, dw3, GELU, 1x1 to `C`               |

use serde::{Deserialize, Serialize};

use crate::analysis::CostRow;
use crate::autodiff::Var;
use crate::blocks::layers::Conv;
use crate::error::{Error, Result};
use crate::nn::ConvSpec;
use crate::params::{Ctx, ParamBuilder};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnVariant {
    Mbffn,
    Mlp,
    Convffn,
    Leff,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FfnSpec {
    pub channels: usize,
    pub beta: usize,
    pub variant: FfnVariant,
}

impl FfnSpec {
    pub fn width(&self) -> usize {
        self.channels * self.beta
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.beta == 0 {
            return Err(Error::config("FFN channels and expansion must be positive"));
        }
        if self.variant == FfnVariant::Mbffn && !self.width().is_multiple_of(2) {
            return Err(Error::config(format!(
                "multi-branch FFN needs an even expanded width for the simple gate, got {}",
                self.width()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Ffn {
    pub spec: FfnSpec,
    pub name: String,
    expand: Conv,
    dw3: Option<Conv>,
    dw5: Option<Conv>,
    contract: Conv,
}

impl Ffn {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<T>, name: String, spec: FfnSpec) -> Result<Self> {
        spec.validate()?;
        let (c, e) = (spec.channels, spec.width());
        let expand = Conv::new(b, format!("{name}.expand"), ConvSpec::pointwise(c, e))?;
        let needs_dw3 = spec.variant != FfnVariant::Mlp;
        let dw3 = if needs_dw3 { Some(Conv::new(b, format!("{name}.dw3"), ConvSpec::depthwise(e, 3))?) } else { None };
        let (dw5, contract_in) = if spec.variant == FfnVariant::Mbffn {
            (Some(Conv::new(b, format!("{name}.dw5"), ConvSpec::depthwise(e, 5))?), e / 2)
        } else {
            (None, e)
        };
        let contract = Conv::new(b, format!("{name}.contract"), ConvSpec::pointwise(contract_in, c))?;
        Ok(Ffn { spec, name, expand, dw3, dw5, contract })
    }

    /// The transform without the residual connection.
    pub fn body<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        if x.shape().c() != self.spec.channels {
            return Err(Error::shape(
                "ffn",
                format!("{}: input {} does not have {} channels", self.name, x.shape(), self.spec.channels),
            ));
        }
        let t = cx.tape;
        let e = self.expand.forward(cx, x)?;
        let dw3 = |v: &Var<T>| self.dw3.as_ref().expect("variant has dw3").forward(cx, v);
        let h = match self.spec.variant {
            FfnVariant::Mbffn => {
                let five = self.dw5.as_ref().expect("mbffn has dw5").forward(cx, &e)?;
                let mb = t.add(&t.add(&dw3(&e)?, &five)?, &e)?;
                t.simple_gate(&mb)?
            }
            FfnVariant::Mlp => t.gelu(&e)?,
            FfnVariant::Convffn => t.gelu(&dw3(&e)?)?,
            FfnVariant::Leff => t.gelu(&dw3(&t.gelu(&e)?)?)?,
        };
        self.contract.forward(cx, &h)
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        cx.tape.add(x, &self.body(cx, x)?)
    }

    pub fn cost(&self, h: usize, w: usize, rows: &mut Vec<CostRow>) -> Result<()> {
        self.expand.cost(h, w, rows)?;
        for dw in [&self.dw3, &self.dw5].into_iter().flatten() {
            dw.cost(h, w, rows)?;
        }
        self.contract.cost(h, w, rows)?;
        Ok(())
    }
}
