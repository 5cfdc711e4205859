//! Direct 2-D cross-correlation: standard, grouped/depthwise, strided and transposed.
//!
//! Weights use the `(C_out, C_in / groups, k, k)` layout for regular convs and
//! `(C_in, C_out / groups, k, k)` for transposed ones. Bias, when present, is a
//! `(1, C_out, 1, 1)` tensor. A transposed conv is evaluated as the input
//! gradient of the regular conv with swapped channel roles, so both share the
//! same three kernels below.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// `kernel / 2` on every side.
    Same,
    Explicit(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub groups: usize,
    pub transposed: bool,
    pub bias: bool,
}

impl ConvSpec {
    /// Dense `k x k` conv, stride 1, same padding, with bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: Padding::Same,
            groups: 1,
            transposed: false,
            bias: true,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, 1)
    }

    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        ConvSpec { groups: channels, ..Self::new(channels, channels, kernel) }
    }

    /// `3 x 3`, stride 2: halves (ceil) the spatial size.
    pub fn downsample(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec { stride: 2, ..Self::new(in_channels, out_channels, 3) }
    }

    /// Transposed `2 x 2`, stride 2: doubles the spatial size.
    pub fn upsample(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            stride: 2,
            padding: Padding::Explicit(0),
            transposed: true,
            ..Self::new(in_channels, out_channels, 2)
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn pad(&self) -> usize {
        match self.padding {
            Padding::Same => self.kernel / 2,
            Padding::Explicit(p) => p,
        }
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(format!("conv spec {self:?}: {m}")));
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 || self.stride == 0 {
            return bad("channels, kernel and stride must be positive".into());
        }
        if self.groups == 0
            || !self.in_channels.is_multiple_of(self.groups)
            || !self.out_channels.is_multiple_of(self.groups)
        {
            return bad(format!("groups {} must divide both channel counts", self.groups));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> Shape {
        let k = self.kernel;
        if self.transposed {
            Shape::new(self.in_channels, self.out_channels / self.groups, k, k)
        } else {
            Shape::new(self.out_channels, self.in_channels / self.groups, k, k)
        }
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, self.out_channels, 1, 1)
    }

    /// Number of inputs feeding each output value.
    pub fn fan_in(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        if self.transposed {
            // Each output pixel sees k^2 / stride^2 taps per input channel.
            (self.in_channels / self.groups) * (k2 / (self.stride * self.stride)).max(1)
        } else {
            (self.in_channels / self.groups) * k2
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (k, s, p) = (self.kernel, self.stride, self.pad());
        if self.transposed {
            let f = |n: usize| -> Result<usize> {
                ((n - 1) * s + k)
                    .checked_sub(2 * p)
                    .filter(|&v| v > 0)
                    .ok_or_else(|| Error::shape("conv2d", format!("transposed conv of {n} pixels is empty")))
            };
            if h == 0 || w == 0 {
                return Err(Error::shape("conv2d", "empty input"));
            }
            Ok((f(h)?, f(w)?))
        } else {
            if h + 2 * p < k || w + 2 * p < k {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {k} larger than padded input {}x{}", h + 2 * p, w + 2 * p),
                ));
            }
            Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
        }
    }

    pub fn param_count(&self) -> u64 {
        let w = self.weight_shape().numel() as u64;
        w + if self.bias { self.out_channels as u64 } else { 0 }
    }

    /// Multiply-accumulates for an input of `h x w`. Bias adds are not counted.
    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let k2 = (self.kernel * self.kernel) as u64;
        let per_group = (self.in_channels / self.groups) as u64 * self.out_channels as u64;
        if self.transposed {
            Ok(k2 * per_group * (h * w) as u64)
        } else {
            let (ho, wo) = self.output_hw(h, w)?;
            Ok(k2 * per_group * (ho * wo) as u64)
        }
    }
}

/// Geometry of the regular (non-transposed) conv that the kernels evaluate.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    cout: usize,
    k: usize,
    s: usize,
    p: usize,
    groups: usize,
}

impl Geometry {
    fn of(spec: &ConvSpec) -> Self {
        let (cin, cout) =
            if spec.transposed { (spec.out_channels, spec.in_channels) } else { (spec.in_channels, spec.out_channels) };
        Geometry { cin, cout, k: spec.kernel, s: spec.stride, p: spec.pad(), groups: spec.groups }
    }

    /// Output index range `[lo, hi)` whose tap `kk` lands inside `0..len`.
    #[inline]
    fn valid_range(&self, kk: usize, len: usize, out_len: usize) -> (usize, usize) {
        // i = o * s + kk - p in [0, len)
        let lo = if self.p > kk { (self.p - kk).div_ceil(self.s) } else { 0 };
        let hi = if len + self.p > kk { ((len + self.p - kk - 1) / self.s + 1).min(out_len) } else { 0 };
        (lo, hi.max(lo))
    }
}

fn conv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: Geometry, out: Shape) -> Tensor<T> {
    let xs = x.shape();
    let (h, wd) = (xs.h(), xs.w());
    let (ho, wo) = (out.h(), out.w());
    let cig = g.cin / g.groups;
    let cog = g.cout / g.groups;
    let (xd, wdat) = (x.data(), w.data());
    let k = g.k;
    let mut data = vec![T::zero(); out.numel()];
    data.par_chunks_mut(ho * wo).enumerate().for_each(|(plane, dst)| {
        let n = plane / g.cout;
        let co = plane % g.cout;
        let grp = co / cog;
        for cl in 0..cig {
            let ci = grp * cig + cl;
            let src = &xd[(n * g.cin + ci) * h * wd..(n * g.cin + ci + 1) * h * wd];
            for kh in 0..k {
                let (oh0, oh1) = g.valid_range(kh, h, ho);
                for kw in 0..k {
                    let wv = wdat[((co * cig + cl) * k + kh) * k + kw];
                    let (ow0, ow1) = g.valid_range(kw, wd, wo);
                    for oh in oh0..oh1 {
                        let ih = oh * g.s + kh - g.p;
                        let row = &src[ih * wd..(ih + 1) * wd];
                        let drow = &mut dst[oh * wo..(oh + 1) * wo];
                        for ow in ow0..ow1 {
                            drow[ow] += wv * row[ow * g.s + kw - g.p];
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(out, data).expect("conv output shape")
}

fn conv_backward_input<T: Scalar>(gy: &Tensor<T>, w: &Tensor<T>, g: Geometry, input: Shape) -> Tensor<T> {
    let gs = gy.shape();
    let (ho, wo) = (gs.h(), gs.w());
    let (h, wd) = (input.h(), input.w());
    let cig = g.cin / g.groups;
    let cog = g.cout / g.groups;
    let (gd, wdat) = (gy.data(), w.data());
    let k = g.k;
    let mut data = vec![T::zero(); input.numel()];
    data.par_chunks_mut(h * wd).enumerate().for_each(|(plane, dst)| {
        let n = plane / g.cin;
        let ci = plane % g.cin;
        let grp = ci / cig;
        let cl = ci % cig;
        for co in grp * cog..(grp + 1) * cog {
            let src = &gd[(n * g.cout + co) * ho * wo..(n * g.cout + co + 1) * ho * wo];
            for kh in 0..k {
                let (oh0, oh1) = g.valid_range(kh, h, ho);
                for kw in 0..k {
                    let wv = wdat[((co * cig + cl) * k + kh) * k + kw];
                    let (ow0, ow1) = g.valid_range(kw, wd, wo);
                    for oh in oh0..oh1 {
                        let ih = oh * g.s + kh - g.p;
                        let srow = &src[oh * wo..(oh + 1) * wo];
                        let drow = &mut dst[ih * wd..(ih + 1) * wd];
                        for ow in ow0..ow1 {
                            drow[ow * g.s + kw - g.p] += wv * srow[ow];
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(input, data).expect("conv input shape")
}

fn conv_backward_weight<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>, g: Geometry) -> Tensor<T> {
    let xs = x.shape();
    let gs = gy.shape();
    let (h, wd) = (xs.h(), xs.w());
    let (ho, wo) = (gs.h(), gs.w());
    let cig = g.cin / g.groups;
    let cog = g.cout / g.groups;
    let k = g.k;
    let (xd, gd) = (x.data(), gy.data());
    let wshape = Shape::new(g.cout, cig, k, k);
    let mut data = vec![T::zero(); wshape.numel()];
    data.par_chunks_mut(cig * k * k).enumerate().for_each(|(co, dst)| {
        let grp = co / cog;
        for cl in 0..cig {
            let ci = grp * cig + cl;
            for kh in 0..k {
                let (oh0, oh1) = g.valid_range(kh, h, ho);
                for kw in 0..k {
                    let (ow0, ow1) = g.valid_range(kw, wd, wo);
                    let mut acc = T::zero();
                    for n in 0..xs.n() {
                        let src = &xd[(n * g.cin + ci) * h * wd..(n * g.cin + ci + 1) * h * wd];
                        let gp = &gd[(n * g.cout + co) * ho * wo..(n * g.cout + co + 1) * ho * wo];
                        for oh in oh0..oh1 {
                            let ih = oh * g.s + kh - g.p;
                            for ow in ow0..ow1 {
                                acc += gp[oh * wo + ow] * src[ih * wd + ow * g.s + kw - g.p];
                            }
                        }
                    }
                    dst[(cl * k + kh) * k + kw] = acc;
                }
            }
        }
    });
    Tensor::from_vec(wshape, data).expect("weight shape")
}

fn bias_grad<T: Scalar>(gy: &Tensor<T>) -> Tensor<T> {
    let s = gy.shape();
    let plane = s.plane();
    let mut out = vec![T::zero(); s.c()];
    for n in 0..s.n() {
        for (c, o) in out.iter_mut().enumerate() {
            let base = (n * s.c() + c) * plane;
            for &v in &gy.data()[base..base + plane] {
                *o += v;
            }
        }
    }
    Tensor::from_vec(Shape::new(1, s.c(), 1, 1), out).expect("bias shape")
}

fn check_operands<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, spec: &ConvSpec) -> Result<Shape> {
    spec.validate()?;
    let xs = x.shape();
    if xs.c() != spec.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!("input {xs} has {} channels, spec expects {}", xs.c(), spec.in_channels),
        ));
    }
    if w.shape() != spec.weight_shape() {
        return Err(Error::ShapeMismatch { op: "conv2d weight", lhs: w.shape(), rhs: spec.weight_shape() });
    }
    match (b, spec.bias) {
        (Some(b), true) if b.shape() != spec.bias_shape() => {
            return Err(Error::ShapeMismatch { op: "conv2d bias", lhs: b.shape(), rhs: spec.bias_shape() })
        }
        (None, true) => return Err(Error::shape("conv2d", "spec requires a bias tensor")),
        (Some(_), false) => return Err(Error::shape("conv2d", "bias supplied to a bias-free spec")),
        _ => {}
    }
    let (ho, wo) = spec.output_hw(xs.h(), xs.w())?;
    Ok(Shape::new(xs.n(), spec.out_channels, ho, wo))
}

/// Value-level convolution.
pub fn conv2d_value<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let out = check_operands(x, w, b, spec)?;
    let g = Geometry::of(spec);
    let y = if spec.transposed { conv_backward_input(x, w, g, out) } else { conv_forward(x, w, g, out) };
    match b {
        Some(b) => y.add(b),
        None => Ok(y),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn conv2d(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>, spec: &ConvSpec) -> Result<Var<T>> {
        let value = conv2d_value(x.value(), w.value(), b.map(|b| b.value()), spec)?;
        let g = Geometry::of(spec);
        let (xv, wv) = (x.value().clone(), w.value().clone());
        let (tx, tw) = (x.is_tracked(), w.is_tracked());
        let transposed = spec.transposed;
        let has_bias = b.is_some();
        let backward = Box::new(move |gy: &Tensor<T>| {
            let (gx, gw) = if transposed {
                (tx.then(|| conv_forward(gy, &wv, g, xv.shape())), tw.then(|| conv_backward_weight(gy, &xv, g)))
            } else {
                (tx.then(|| conv_backward_input(gy, &wv, g, xv.shape())), tw.then(|| conv_backward_weight(&xv, gy, g)))
            };
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(Some(bias_grad(gy)));
            }
            Ok(grads)
        });
        match b {
            Some(b) => self.record("conv2d", &[x, w, b], value, backward),
            None => self.record("conv2d", &[x, w], value, backward),
        }
    }
}
