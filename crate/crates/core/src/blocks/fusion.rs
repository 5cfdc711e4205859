//! Fusion of the two attention branches into `2b` channels.
//!
//! ACM with branch width `b`:
//! `X_o = conv3(conv1([xc, xs]))` at width `2b`,
//! spatial gate `sigmoid(conv3(gelu(conv3(X_o))))` with widths `2b -> b/2 -> 1`
//! scales `xc`, channel gate `sigmoid(conv1(gelu(conv1(gap(X_o)))))` with
//! widths `2b -> b/4 -> b` scales `xs`, and the gated branches are concatenated.
//!
//! SK: `s = gap(xc + xs)`, `z = conv1(gelu(conv1(s)))` gives `2b` logits
//! softmaxed across the two branches per channel, then
//! `proj(w1 * xc + w2 * xs)` maps back to `2b` channels.

use crate::analysis::CostRow;
use crate::autodiff::Var;
use crate::blocks::attention::Fusion;
use crate::blocks::layers::Conv;
use crate::error::{Error, Result};
use crate::nn::ConvSpec;
use crate::params::{Ctx, ParamBuilder};
use crate::scalar::Scalar;
use crate::tensor::{Axis, Shape};

fn check_pair<T: Scalar>(op: &'static str, xc: &Var<T>, xs: &Var<T>, b: usize) -> Result<()> {
    if xc.shape() != xs.shape() {
        return Err(Error::ShapeMismatch { op, lhs: xc.shape(), rhs: xs.shape() });
    }
    if xc.shape().c() != b {
        return Err(Error::shape(op, format!("branches {} do not have width {b}", xc.shape())));
    }
    Ok(())
}

fn pooled<T: Scalar>(cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
    let p = cx.tape.global_avg_pool(x)?;
    Ok(if cx.detach_global_gates { p.detach() } else { p })
}

#[derive(Clone, Debug)]
pub struct Acm {
    pub name: String,
    pub width: usize,
    mix1: Conv,
    mix3: Conv,
    spatial1: Conv,
    spatial2: Conv,
    cgc1: Conv,
    cgc2: Conv,
}

impl Acm {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<T>, name: String, width: usize) -> Result<Self> {
        let (w2, sh, ch) = (2 * width, (width / 4).max(1), (width / 8).max(1));
        Ok(Acm {
            mix1: Conv::new(b, format!("{name}.mix1"), ConvSpec::pointwise(w2, w2))?,
            mix3: Conv::new(b, format!("{name}.mix3"), ConvSpec::new(w2, w2, 3))?,
            spatial1: Conv::new(b, format!("{name}.spatial1"), ConvSpec::new(w2, sh, 3))?,
            spatial2: Conv::new(b, format!("{name}.spatial2"), ConvSpec::new(sh, 1, 3))?,
            cgc1: Conv::new(b, format!("{name}.cgc1"), ConvSpec::pointwise(w2, ch))?,
            cgc2: Conv::new(b, format!("{name}.cgc2"), ConvSpec::pointwise(ch, width))?,
            name,
            width,
        })
    }

    /// Spatial gate `(N, 1, H, W)` and channel gate `(N, b, 1, 1)`.
    pub fn gates<T: Scalar>(&self, cx: &Ctx<T>, xc: &Var<T>, xs: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        check_pair("acm", xc, xs, self.width)?;
        let t = cx.tape;
        let xo = self.mix3.forward(cx, &self.mix1.forward(cx, &t.concat_channels(&[xc, xs])?)?)?;
        let gs = self.spatial2.forward(cx, &t.gelu(&self.spatial1.forward(cx, &xo)?)?)?;
        let gc = self.cgc2.forward(cx, &t.gelu(&self.cgc1.forward(cx, &pooled(cx, &xo)?)?)?)?;
        Ok((t.sigmoid(&gs)?, t.sigmoid(&gc)?))
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, xc: &Var<T>, xs: &Var<T>) -> Result<Var<T>> {
        let (gs, gc) = self.gates(cx, xc, xs)?;
        let t = cx.tape;
        t.concat_channels(&[&t.mul(xc, &gs)?, &t.mul(xs, &gc)?])
    }

    pub fn cost(&self, h: usize, w: usize, rows: &mut Vec<CostRow>) -> Result<()> {
        self.mix1.cost(h, w, rows)?;
        self.mix3.cost(h, w, rows)?;
        self.spatial1.cost(h, w, rows)?;
        self.spatial2.cost(h, w, rows)?;
        self.cgc1.cost(1, 1, rows)?;
        self.cgc2.cost(1, 1, rows)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Sk {
    pub name: String,
    pub width: usize,
    fc1: Conv,
    fc2: Conv,
    proj: Conv,
}

impl Sk {
    pub fn hidden(width: usize) -> usize {
        (width / 8).max(4)
    }

    pub fn new<T: Scalar>(b: &mut ParamBuilder<T>, name: String, width: usize) -> Result<Self> {
        let d = Self::hidden(width);
        Ok(Sk {
            fc1: Conv::new(b, format!("{name}.fc1"), ConvSpec::pointwise(width, d))?,
            fc2: Conv::new(b, format!("{name}.fc2"), ConvSpec::pointwise(d, 2 * width))?,
            proj: Conv::new(b, format!("{name}.proj"), ConvSpec::pointwise(width, 2 * width))?,
            name,
            width,
        })
    }

    /// Per-channel branch weights `(w1, w2)`, each `(N, b, 1, 1)`, summing to one.
    pub fn weights<T: Scalar>(&self, cx: &Ctx<T>, xc: &Var<T>, xs: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        check_pair("sk_fuse", xc, xs, self.width)?;
        let t = cx.tape;
        let s = pooled(cx, &t.add(xc, xs)?)?;
        let z = self.fc2.forward(cx, &t.gelu(&self.fc1.forward(cx, &s)?)?)?;
        let n = z.shape().n();
        let z = t.reshape(&z, Shape::new(n, 1, 2, self.width))?;
        let a = t.reshape(&t.softmax(&z, Axis::H)?, Shape::new(n, 2 * self.width, 1, 1))?;
        let mut parts = t.split_channels(&a, &[self.width, self.width])?.into_iter();
        Ok((parts.next().expect("two parts"), parts.next().expect("two parts")))
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, xc: &Var<T>, xs: &Var<T>) -> Result<Var<T>> {
        let (w1, w2) = self.weights(cx, xc, xs)?;
        let t = cx.tape;
        let mixed = t.add(&t.mul(xc, &w1)?, &t.mul(xs, &w2)?)?;
        self.proj.forward(cx, &mixed)
    }

    pub fn cost(&self, h: usize, w: usize, rows: &mut Vec<CostRow>) -> Result<()> {
        self.fc1.cost(1, 1, rows)?;
        self.fc2.cost(1, 1, rows)?;
        self.proj.cost(h, w, rows)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum FusionLayer {
    Acm(Acm),
    Sk(Sk),
    Concat { width: usize },
}

impl FusionLayer {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<T>, name: String, kind: Fusion, width: usize) -> Result<Self> {
        Ok(match kind {
            Fusion::Acm => FusionLayer::Acm(Acm::new(b, name, width)?),
            Fusion::Sk => FusionLayer::Sk(Sk::new(b, name, width)?),
            Fusion::Concat => FusionLayer::Concat { width },
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, xc: &Var<T>, xs: &Var<T>) -> Result<Var<T>> {
        match self {
            FusionLayer::Acm(a) => a.forward(cx, xc, xs),
            FusionLayer::Sk(s) => s.forward(cx, xc, xs),
            FusionLayer::Concat { width } => {
                check_pair("concat_fuse", xc, xs, *width)?;
                cx.tape.concat_channels(&[xc, xs])
            }
        }
    }

    pub fn cost(&self, h: usize, w: usize, rows: &mut Vec<CostRow>) -> Result<()> {
        match self {
            FusionLayer::Acm(a) => a.cost(h, w, rows),
            FusionLayer::Sk(s) => s.cost(h, w, rows),
            FusionLayer::Concat { .. } => Ok(()),
        }
    }
}
