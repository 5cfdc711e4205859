//! Hybrid transformer block.
//!
//! The input of width `C` is split into a global half `X^g` and a local half
//! `X^p`. The global half is (optionally) layer-normalized and split again into
//! two attention branches of width `C/4`, whose outputs are fused back to
//! `C/2`, added to `X^g`, and passed through a pre-normalized FFN with its own
//! residual. The local half goes through an LFE block, or passes through
//! unchanged when the parallel LFE is disabled. The halves are concatenated.

use serde::{Deserialize, Serialize};

use crate::analysis::CostRow;
use crate::autodiff::Var;
use crate::blocks::attention::{build_branches, AttnBranch, AttnSpec};
use crate::blocks::ffn::{Ffn, FfnSpec};
use crate::blocks::fusion::FusionLayer;
use crate::blocks::layers::LayerNorm;
use crate::blocks::lfe::{Lfe, LfeSpec};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamBuilder};
use crate::scalar::Scalar;
use crate::tensor::Shape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HtbSpec {
    pub channels: usize,
    pub attn: AttnSpec,
    pub ffn: FfnSpec,
    pub lfe: LfeSpec,
    pub use_parallel_lfe: bool,
    pub pre_norm: bool,
}

impl HtbSpec {
    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if c == 0 || !c.is_multiple_of(4) {
            return Err(Error::config(format!("hybrid block width {c} must be a positive multiple of 4")));
        }
        if self.attn.branch_channels != c / 4 || self.ffn.channels != c / 2 || self.lfe.channels != c / 2 {
            return Err(Error::config(format!("hybrid block sub-widths inconsistent with width {c}")));
        }
        self.attn.validate()?;
        self.ffn.validate()
    }
}

/// Shapes of the intermediate splits, for width bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HtbTrace {
    pub global: Shape,
    pub local: Shape,
    pub channel_branch: Shape,
    pub spatial_branch: Shape,
}

#[derive(Clone, Debug)]
pub struct Htb {
    pub spec: HtbSpec,
    pub name: String,
    norm1: Option<LayerNorm>,
    branch_c: AttnBranch,
    branch_s: AttnBranch,
    fusion: FusionLayer,
    norm2: Option<LayerNorm>,
    ffn: Ffn,
    lfe: Option<Lfe>,
}

impl Htb {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<T>, name: String, spec: HtbSpec) -> Result<Self> {
        spec.validate()?;
        let g = spec.channels / 2;
        let norm1 = if spec.pre_norm { Some(LayerNorm::new(b, format!("{name}.norm1"), g)?) } else { None };
        let (branch_c, branch_s) = build_branches(b, &name, &spec.attn)?;
        let fusion = FusionLayer::new(b, format!("{name}.fuse"), spec.attn.fusion, spec.attn.branch_channels)?;
        let norm2 = if spec.pre_norm { Some(LayerNorm::new(b, format!("{name}.norm2"), g)?) } else { None };
        let ffn = Ffn::new(b, format!("{name}.ffn"), spec.ffn)?;
        let lfe = if spec.use_parallel_lfe { Some(Lfe::new(b, format!("{name}.lfe"), spec.lfe)?) } else { None };
        Ok(Htb { spec, name, norm1, branch_c, branch_s, fusion, norm2, ffn, lfe })
    }

    pub fn forward_traced<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<(Var<T>, HtbTrace)> {
        let c = self.spec.channels;
        if x.shape().c() != c {
            return Err(Error::shape("htb", format!("{}: input {} does not have {c} channels", self.name, x.shape())));
        }
        let t = cx.tape;
        let halves = t.split_channels(x, &[c / 2, c / 2])?;
        let (xg, xp) = (&halves[0], &halves[1]);
        let a = match &self.norm1 {
            Some(n) => n.forward(cx, xg)?,
            None => xg.clone(),
        };
        let branches = t.split_channels(&a, &[c / 4, c / 4])?;
        let oc = self.branch_c.forward(cx, &branches[0])?;
        let os = self.branch_s.forward(cx, &branches[1])?;
        let h = t.add(xg, &self.fusion.forward(cx, &oc, &os)?)?;
        let f = match &self.norm2 {
            Some(n) => n.forward(cx, &h)?,
            None => h.clone(),
        };
        let y = t.add(&h, &self.ffn.body(cx, &f)?)?;
        let p = match &self.lfe {
            Some(l) => l.forward(cx, xp)?,
            None => xp.clone(),
        };
        let trace = HtbTrace {
            global: xg.shape(),
            local: xp.shape(),
            channel_branch: branches[0].shape(),
            spatial_branch: branches[1].shape(),
        };
        Ok((t.concat_channels(&[&y, &p])?, trace))
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        Ok(self.forward_traced(cx, x)?.0)
    }

    pub fn cost(&self, h: usize, w: usize, rows: &mut Vec<CostRow>) -> Result<()> {
        if let Some(n) = &self.norm1 {
            n.cost(rows);
        }
        self.branch_c.cost(h, w, rows)?;
        self.branch_s.cost(h, w, rows)?;
        self.fusion.cost(h, w, rows)?;
        if let Some(n) = &self.norm2 {
            n.cost(rows);
        }
        self.ffn.cost(h, w, rows)?;
        if let Some(l) = &self.lfe {
            l.cost(h, w, rows)?;
        }
        Ok(())
    }
}
