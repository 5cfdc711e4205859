//! Reconstruction and perceptual losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::blocks::Conv;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::ConvSpec;
use crate::params::{Ctx, ParamBuilder, ParamStore, ParamVars};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// MSE floor keeping the loss of a perfect reconstruction finite (-120 dB).
pub const MSE_FLOOR: f64 = 1e-12;

/// Which extractor stages enter the perceptual term, and the extractor seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptualSpec {
    pub layers: Vec<usize>,
    pub extractor_seed: u64,
}

impl Default for PerceptualSpec {
    fn default() -> Self {
        PerceptualSpec { layers: vec![0, 2], extractor_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_psnr: f64,
    pub lambda_perceptual: f64,
    pub perceptual: PerceptualSpec,
}

impl LossConfig {
    pub fn new(model: &ModelConfig, perceptual: PerceptualSpec) -> Self {
        LossConfig { lambda_psnr: model.loss_lambda[0], lambda_perceptual: model.loss_lambda[1], perceptual }
    }

    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda_psnr, self.lambda_perceptual];
        if l.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || l.iter().all(|&v| v == 0.0) {
            return Err(Error::config(format!("loss weights must be non-negative with one positive, got {l:?}")));
        }
        Ok(())
    }
}

/// Frozen feature model for the perceptual term.
pub trait FeatureExtractor<T: Scalar>: Send + Sync {
    fn stages(&self) -> usize;
    /// Feature maps of every stage, shallowest first.
    fn features(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Vec<Var<T>>>;
}

/// Four 3x3 conv + GELU stages with fixed random weights; stages after the
/// first halve the resolution.
pub struct RandomPyramid<T: Scalar> {
    convs: Vec<Conv>,
    vars: ParamVars<T>,
}

impl<T: Scalar> RandomPyramid<T> {
    pub const WIDTHS: [usize; 4] = [16, 32, 32, 64];

    pub fn new(seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let rng = Rng::new(seed).split("extractor");
        let mut b = ParamBuilder::new(&mut store, &rng);
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &c) in Self::WIDTHS.iter().enumerate() {
            let spec = if i == 0 { ConvSpec::new(cin, c, 3) } else { ConvSpec::downsample(cin, c) };
            convs.push(Conv::new(&mut b, format!("extractor.{i}"), spec)?);
            cin = c;
        }
        Ok(RandomPyramid { convs, vars: ParamVars::constants(&store) })
    }
}

impl<T: Scalar> FeatureExtractor<T> for RandomPyramid<T> {
    fn stages(&self) -> usize {
        self.convs.len()
    }

    fn features(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Vec<Var<T>>> {
        let cx = Ctx::new(tape, &self.vars);
        let mut h = x.clone();
        let mut out = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            h = tape.gelu(&conv.forward(&cx, &h)?)?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// `10 log10(max(MSE, 1e-12))`, i.e. the negative PSNR at peak 1.
pub fn psnr_loss<T: Scalar>(tape: &Tape<T>, pred: &Var<T>, target: &Tensor<T>) -> Result<Var<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch { op: "psnr_loss", lhs: pred.shape(), rhs: target.shape() });
    }
    let diff = tape.sub(pred, &Var::constant(target.clone()))?;
    let mse = tape.mean(&tape.square(&diff)?)?;
    let ln = tape.ln_floored(&mse, T::lit(MSE_FLOOR))?;
    tape.scale(&ln, T::lit(10.0 / std::f64::consts::LN_10))
}

/// Sum over `layers` of the mean absolute feature difference.
pub fn perceptual_loss<T: Scalar>(
    tape: &Tape<T>,
    extractor: &dyn FeatureExtractor<T>,
    pred: &Var<T>,
    target: &Tensor<T>,
    layers: &[usize],
) -> Result<Var<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch { op: "perceptual_loss", lhs: pred.shape(), rhs: target.shape() });
    }
    if layers.is_empty() {
        return Err(Error::config("perceptual loss needs at least one extractor stage"));
    }
    if let Some(&bad) = layers.iter().find(|&&l| l >= extractor.stages()) {
        return Err(Error::config(format!(
            "perceptual layer {bad} unavailable: extractor has {} stages",
            extractor.stages()
        )));
    }
    let fp = extractor.features(tape, pred)?;
    let ft = extractor.features(tape, &Var::constant(target.clone()))?;
    let mut total: Option<Var<T>> = None;
    for &l in layers {
        let term = tape.mean(&tape.abs(&tape.sub(&fp[l], &ft[l].detach())?)?)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(&t, &term)?,
        });
    }
    Ok(total.expect("at least one layer"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub psnr: f64,
    pub perceptual: f64,
    pub total: f64,
}

/// `lambda_psnr * psnr_loss + lambda_perceptual * perceptual_loss`.
pub struct Loss<T: Scalar> {
    pub config: LossConfig,
    extractor: Box<dyn FeatureExtractor<T>>,
}

impl<T: Scalar> Loss<T> {
    pub fn new(config: LossConfig) -> Result<Self> {
        let extractor = Box::new(RandomPyramid::new(config.perceptual.extractor_seed)?);
        Self::with_extractor(config, extractor)
    }

    pub fn with_extractor(config: LossConfig, extractor: Box<dyn FeatureExtractor<T>>) -> Result<Self> {
        config.validate()?;
        Ok(Loss { config, extractor })
    }

    pub fn compute(&self, tape: &Tape<T>, pred: &Var<T>, target: &Tensor<T>) -> Result<(Var<T>, LossParts)> {
        let c = &self.config;
        let lp = psnr_loss(tape, pred, target)?;
        let mut total = tape.scale(&lp, T::lit(c.lambda_psnr))?;
        let mut perceptual = 0.0;
        if c.lambda_perceptual > 0.0 {
            let lq = perceptual_loss(tape, self.extractor.as_ref(), pred, target, &c.perceptual.layers)?;
            perceptual = lq.value().item().as_f64();
            total = tape.add(&total, &tape.scale(&lq, T::lit(c.lambda_perceptual))?)?;
        }
        let parts = LossParts { psnr: lp.value().item().as_f64(), perceptual, total: total.value().item().as_f64() };
        Ok((total, parts))
    }
}
