//! Channel and spatial multi-head self-attention on one branch of width `b`.
//!
//! Features are viewed per head as `(N, heads, b / heads, H*W)`: rows are
//! channels, columns are tokens. Both attention maps are scaled by
//! `1 / sqrt(b)` with `b` the branch width.
//!
//! * Channel: `A = softmax_rows(Q K^T)` of size `d x d`, normalized so every
//!   column sums to one; output channel `j` is `sum_i A[i, j] V[i]`.
//! * Spatial: `A = softmax_cols(Q^T K)` of size `HW x HW`, every row sums to
//!   one; output token `t` is `sum_u A[t, u] V[:, u]`, plus a depthwise 3x3
//!   local term unless disabled.

use serde::{Deserialize, Serialize};

use crate::analysis::CostRow;
use crate::autodiff::Var;
use crate::blocks::layers::Conv;
use crate::error::{Error, Result};
use crate::nn::ConvSpec;
use crate::params::{Ctx, ParamBuilder};
use crate::scalar::Scalar;
use crate::tensor::{Axis, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnVariant {
    /// Channel attention on one branch, spatial attention on the other.
    Cssa,
    /// Spatial attention on both branches.
    SsaOnly,
    /// Spatial attention on both branches, without the depthwise local term.
    SsaNoDwconv,
    /// Channel attention on both branches.
    CsaOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Acm,
    Sk,
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnSpec {
    pub branch_channels: usize,
    pub heads: usize,
    pub variant: AttnVariant,
    pub fusion: Fusion,
}

impl AttnSpec {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.branch_channels == 0 || !self.branch_channels.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "attention branch width {} must be a positive multiple of the head count {}",
                self.branch_channels, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.branch_channels / self.heads
    }
}

fn heads_view<T: Scalar>(cx: &Ctx<T>, x: &Var<T>, heads: usize) -> Result<Var<T>> {
    let s = x.shape();
    cx.tape.reshape(x, Shape::new(s.n(), heads, s.c() / heads, s.plane()))
}

fn check_width<T: Scalar>(op: &'static str, x: &Var<T>, b: usize) -> Result<()> {
    if x.shape().c() != b {
        return Err(Error::shape(op, format!("input {} does not have branch width {b}", x.shape())));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ChannelSelfAttention {
    pub name: String,
    pub width: usize,
    pub heads: usize,
    qkv: Conv,
    qkv_dw: Conv,
}

impl ChannelSelfAttention {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<T>, name: String, width: usize, heads: usize) -> Result<Self> {
        Ok(ChannelSelfAttention {
            qkv: Conv::new(b, format!("{name}.qkv"), ConvSpec::pointwise(width, 3 * width))?,
            qkv_dw: Conv::new(b, format!("{name}.qkv_dw"), ConvSpec::depthwise(3 * width, 3))?,
            name,
            width,
            heads,
        })
    }

    /// Returns the output and the `(N, heads, d, d)` attention map.
    pub fn forward_with_map<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        check_width("channel_self_attention", x, self.width)?;
        let t = cx.tape;
        let qkv = self.qkv_dw.forward(cx, &self.qkv.forward(cx, x)?)?;
        let parts = t.split_channels(&qkv, &[self.width; 3])?;
        let q = heads_view(cx, &parts[0], self.heads)?;
        let k = heads_view(cx, &parts[1], self.heads)?;
        let v = heads_view(cx, &parts[2], self.heads)?;
        let logits = t.scale(&t.matmul(&q, &k, false, true)?, T::lit(1.0 / (self.width as f64).sqrt()))?;
        let attn = t.softmax(&logits, Axis::H)?;
        let out = t.matmul(&attn, &v, true, false)?;
        Ok((t.reshape(&out, x.shape())?, attn))
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(self.forward_with_map(cx, x)?.0)
    }

    pub fn cost(&self, h: usize, w: usize, rows: &mut Vec<CostRow>) -> Result<()> {
        self.qkv.cost(h, w, rows)?;
        self.qkv_dw.cost(h, w, rows)?;
        let (b, n) = (self.width as u64, (h * w) as u64);
        rows.push(CostRow::new(&format!("{}.attn", self.name), 0, 2 * b * b * n / self.heads as u64));
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SpatialSelfAttention {
    pub name: String,
    pub width: usize,
    pub heads: usize,
    qkv: Conv,
    local: Option<Conv>,
}

impl SpatialSelfAttention {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<T>,
        name: String,
        width: usize,
        heads: usize,
        local_dwconv: bool,
    ) -> Result<Self> {
        Ok(SpatialSelfAttention {
            qkv: Conv::new(b, format!("{name}.qkv"), ConvSpec::pointwise(width, 3 * width))?,
            local: if local_dwconv {
                Some(Conv::new(b, format!("{name}.local"), ConvSpec::depthwise(width, 3))?)
            } else {
                None
            },
            name,
            width,
            heads,
        })
    }

    /// Returns the output and the `(N, heads, HW, HW)` attention map.
    pub fn forward_with_map<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        check_width("spatial_self_attention", x, self.width)?;
        let t = cx.tape;
        let qkv = self.qkv.forward(cx, x)?;
        let parts = t.split_channels(&qkv, &[self.width; 3])?;
        let q = heads_view(cx, &parts[0], self.heads)?;
        let k = heads_view(cx, &parts[1], self.heads)?;
        let v = heads_view(cx, &parts[2], self.heads)?;
        let logits = t.scale(&t.matmul(&q, &k, true, false)?, T::lit(1.0 / (self.width as f64).sqrt()))?;
        let attn = t.softmax(&logits, Axis::W)?;
        let out = t.reshape(&t.matmul(&v, &attn, false, true)?, x.shape())?;
        let out = match &self.local {
            Some(local) => t.add(&out, &local.forward(cx, x)?)?,
            None => out,
        };
        Ok((out, attn))
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(self.forward_with_map(cx, x)?.0)
    }

    pub fn cost(&self, h: usize, w: usize, rows: &mut Vec<CostRow>) -> Result<()> {
        self.qkv.cost(h, w, rows)?;
        if let Some(local) = &self.local {
            local.cost(h, w, rows)?;
        }
        let (b, n) = (self.width as u64, (h * w) as u64);
        rows.push(CostRow::new(&format!("{}.attn", self.name), 0, 2 * n * n * b));
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum AttnBranch {
    Channel(ChannelSelfAttention),
    Spatial(SpatialSelfAttention),
}

impl AttnBranch {
    pub fn forward_with_map<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        match self {
            AttnBranch::Channel(a) => a.forward_with_map(cx, x),
            AttnBranch::Spatial(a) => a.forward_with_map(cx, x),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(self.forward_with_map(cx, x)?.0)
    }

    pub fn cost(&self, h: usize, w: usize, rows: &mut Vec<CostRow>) -> Result<()> {
        match self {
            AttnBranch::Channel(a) => a.cost(h, w, rows),
            AttnBranch::Spatial(a) => a.cost(h, w, rows),
        }
    }
}

/// Builds the `(first, second)` branches selected by `spec.variant`.
pub fn build_branches<T: Scalar>(
    b: &mut ParamBuilder<T>,
    name: &str,
    spec: &AttnSpec,
) -> Result<(AttnBranch, AttnBranch)> {
    spec.validate()?;
    let (w, h) = (spec.branch_channels, spec.heads);
    let csa = |b: &mut ParamBuilder<T>, n: &str| -> Result<AttnBranch> {
        Ok(AttnBranch::Channel(ChannelSelfAttention::new(b, format!("{name}.{n}"), w, h)?))
    };
    let ssa = |b: &mut ParamBuilder<T>, n: &str, local: bool| -> Result<AttnBranch> {
        Ok(AttnBranch::Spatial(SpatialSelfAttention::new(b, format!("{name}.{n}"), w, h, local)?))
    };
    Ok(match spec.variant {
        AttnVariant::Cssa => (csa(b, "csa")?, ssa(b, "ssa", true)?),
        AttnVariant::CsaOnly => (csa(b, "csa")?, csa(b, "csa2")?),
        AttnVariant::SsaOnly => (ssa(b, "ssa1", true)?, ssa(b, "ssa", true)?),
        AttnVariant::SsaNoDwconv => (ssa(b, "ssa1", false)?, ssa(b, "ssa", false)?),
    })
}
