//! Full encoder / latent / decoder network.
//!
//! ```text
//! stem 3x3 (3 -> C0)
//! encoder stage i: depth_i x LFE(C_i), then 3x3 stride-2 conv to C_{i+1} (C_4 = latent)
//! latent: depth x HTB(latent)
//! decoder stage i (3..=0): 2x2 transposed conv to C_i, + encoder stage i output, LFEs
//! head 3x3 (C0 -> 3), plus the input image
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::CostRow;
use crate::autodiff::{Tape, Var};
use crate::blocks::{AttnSpec, AttnVariant, Conv, FfnSpec, FfnVariant, Fusion, Htb, HtbSpec, Lfe, LfeSpec};
use crate::error::{Error, Result};
use crate::nn::ConvSpec;
use crate::params::{Ctx, ParamBuilder, ParamStore, ParamVars};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Spatial downsampling factor between the input and the latent stage.
pub const LATENT_STRIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// Element-wise sum of the upsampled map and the encoder output.
    Add,
    /// Channel concatenation followed by a 1x1 reduction.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_dims: [usize; 4],
    pub encoder_depths: [usize; 4],
    pub lfe_expand: [usize; 4],
    /// Deepest stage first.
    pub decoder_depths: [usize; 4],
    /// Deepest stage first.
    pub decoder_expand: [usize; 4],
    pub latent_dim: usize,
    pub latent_depth: usize,
    pub heads: usize,
    pub ffn_beta: usize,
    pub se_reduction: usize,
    pub attn_variant: AttnVariant,
    pub fusion_variant: Fusion,
    pub ffn_variant: FfnVariant,
    pub lfe_use_ca: bool,
    pub htb_use_lfe: bool,
    pub pre_norm: bool,
    pub skip: SkipMode,
    /// Weights of the PSNR and perceptual loss terms.
    pub loss_lambda: [f64; 2],
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig {
            encoder_dims: [28, 32, 64, 128],
            encoder_depths: [4, 5, 7, 8],
            lfe_expand: [1, 2, 2, 2],
            decoder_depths: [8, 7, 5, 4],
            decoder_expand: [2, 3, 3, 3],
            latent_dim: 384,
            latent_depth: 14,
            heads: 8,
            ffn_beta: 2,
            se_reduction: 4,
            attn_variant: AttnVariant::Cssa,
            fusion_variant: Fusion::Acm,
            ffn_variant: FfnVariant::Mbffn,
            lfe_use_ca: true,
            htb_use_lfe: true,
            pre_norm: true,
            skip: SkipMode::Add,
            loss_lambda: [1.0, 0.2],
        }
    }

    pub fn tiny() -> Self {
        ModelConfig {
            encoder_dims: [8, 12, 16, 24],
            encoder_depths: [1, 1, 2, 2],
            decoder_depths: [2, 2, 1, 1],
            latent_dim: 48,
            latent_depth: 2,
            heads: 2,
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::config(format!("unknown preset `{other}` (expected paper or tiny)"))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical serialization: fields in declaration order, no whitespace.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// First 8 bytes of the SHA-256 of the canonical JSON, as 16 hex digits.
    pub fn hash(&self) -> String {
        digest_hex(self.canonical_json().as_bytes())
    }

    pub fn lfe_spec(&self, channels: usize, expand: usize) -> LfeSpec {
        LfeSpec { channels, expand, se_reduction: self.se_reduction, use_ca: self.lfe_use_ca }
    }

    pub fn htb_spec(&self) -> HtbSpec {
        let c = self.latent_dim;
        HtbSpec {
            channels: c,
            attn: AttnSpec {
                branch_channels: c / 4,
                heads: self.heads,
                variant: self.attn_variant,
                fusion: self.fusion_variant,
            },
            ffn: FfnSpec { channels: c / 2, beta: self.ffn_beta, variant: self.ffn_variant },
            lfe: self.lfe_spec(c / 2, 2),
            use_parallel_lfe: self.htb_use_lfe,
            pre_norm: self.pre_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |what: &str, v: &[usize]| -> Result<()> {
            if v.contains(&0) {
                return Err(Error::config(format!("{what} must be positive, got {v:?}")));
            }
            Ok(())
        };
        positive("encoder_dims", &self.encoder_dims)?;
        positive("lfe_expand", &self.lfe_expand)?;
        positive("decoder_expand", &self.decoder_expand)?;
        positive(
            "latent_dim, heads, ffn_beta, se_reduction",
            &[self.latent_dim, self.heads, self.ffn_beta, self.se_reduction],
        )?;
        if !self.latent_dim.is_multiple_of(4 * self.heads) {
            return Err(Error::config(format!(
                "latent_dim {} must be divisible by 4 * heads = {}",
                self.latent_dim,
                4 * self.heads
            )));
        }
        let mut widths: Vec<usize> = (0..4).map(|i| self.encoder_dims[i] * self.lfe_expand[i]).collect();
        widths.extend((0..4).map(|i| self.encoder_dims[i] * self.decoder_expand[3 - i]));
        if self.htb_use_lfe {
            widths.push(self.latent_dim);
        }
        if self.lfe_use_ca {
            if let Some(w) = widths.iter().find(|&&w| w % self.se_reduction != 0) {
                return Err(Error::config(format!("se_reduction {} does not divide LFE width {w}", self.se_reduction)));
            }
        }
        if self.loss_lambda.iter().any(|&l| l < 0.0 || !l.is_finite()) || self.loss_lambda.iter().all(|&l| l == 0.0) {
            return Err(Error::config(format!(
                "loss_lambda must be finite, non-negative and not all zero, got {:?}",
                self.loss_lambda
            )));
        }
        self.htb_spec().validate()
    }

    /// Copy of `self` with the given ablation switches applied.
    pub fn variant(&self, switches: &[Switch]) -> Result<Self> {
        let mut c = self.clone();
        for s in switches {
            match *s {
                Switch::Attn(v) => c.attn_variant = v,
                Switch::Fusion(f) => c.fusion_variant = f,
                Switch::Ffn(f) => c.ffn_variant = f,
                Switch::LfeCa(on) => c.lfe_use_ca = on,
                Switch::HtbLfe(on) => c.htb_use_lfe = on,
                Switch::PreNorm(on) => c.pre_norm = on,
                Switch::Skip(m) => c.skip = m,
            }
        }
        c.validate()?;
        Ok(c)
    }
}

pub(crate) fn digest_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// One ablation switch, written `key=value` on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Switch {
    Attn(AttnVariant),
    Fusion(Fusion),
    Ffn(FfnVariant),
    LfeCa(bool),
    HtbLfe(bool),
    PreNorm(bool),
    Skip(SkipMode),
}

impl FromStr for Switch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (key, value) =
            s.split_once('=').ok_or_else(|| Error::config(format!("switch `{s}` is not of the form key=value")))?;
        let on_off = |v: &str| match v {
            "on" => Ok(true),
            "off" => Ok(false),
            _ => Err(Error::config(format!("switch `{key}` expects on or off, got `{v}`"))),
        };
        let bad = || Error::config(format!("unknown value `{value}` for switch `{key}`"));
        Ok(match key {
            "attn" => Switch::Attn(match value {
                "cssa" => AttnVariant::Cssa,
                "ssa" => AttnVariant::SsaOnly,
                "ssa_no_dwconv" => AttnVariant::SsaNoDwconv,
                "csa" => AttnVariant::CsaOnly,
                _ => return Err(bad()),
            }),
            "fusion" => Switch::Fusion(match value {
                "acm" => Fusion::Acm,
                "sk" => Fusion::Sk,
                "concat" => Fusion::Concat,
                _ => return Err(bad()),
            }),
            "ffn" => Switch::Ffn(match value {
                "mbffn" => FfnVariant::Mbffn,
                "mlp" => FfnVariant::Mlp,
                "convffn" => FfnVariant::Convffn,
                "leff" => FfnVariant::Leff,
                _ => return Err(bad()),
            }),
            "lfe_ca" => Switch::LfeCa(on_off(value)?),
            "htb_lfe" => Switch::HtbLfe(on_off(value)?),
            "pre_norm" => Switch::PreNorm(on_off(value)?),
            "skip" => Switch::Skip(match value {
                "add" => SkipMode::Add,
                "concat" => SkipMode::Concat,
                _ => return Err(bad()),
            }),
            _ => return Err(Error::config(format!("unknown switch `{key}`"))),
        })
    }
}

/// A point in the network whose feature map can be probed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Stem,
    /// Output of encoder stage `i` (before downsampling).
    Encoder(usize),
    /// Input of the latent stack (after the last downsampling).
    LatentIn,
    /// Output of the `k`-th hybrid block, `k >= 1`.
    LatentAfter(usize),
    /// Output of decoder stage `i`.
    Decoder(usize),
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Stem => write!(f, "stem"),
            Stage::Encoder(i) => write!(f, "enc{i}"),
            Stage::LatentIn => write!(f, "latent_in"),
            Stage::LatentAfter(k) => write!(f, "latent_after_htb{k}"),
            Stage::Decoder(i) => write!(f, "dec{i}"),
            Stage::Output => write!(f, "output"),
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("unknown stage tag `{s}`"));
        let index = |rest: &str| rest.parse::<usize>().map_err(|_| bad());
        Ok(match s {
            "stem" => Stage::Stem,
            "latent_in" => Stage::LatentIn,
            "output" => Stage::Output,
            _ if s.starts_with("latent_after_htb") => {
                let k = index(&s["latent_after_htb".len()..])?;
                if k == 0 {
                    return Err(bad());
                }
                Stage::LatentAfter(k)
            }
            _ if s.starts_with("enc") => {
                Stage::Encoder(index(&s[3..]).and_then(|i| if i < 4 { Ok(i) } else { Err(bad()) })?)
            }
            _ if s.starts_with("dec") => {
                Stage::Decoder(index(&s[3..]).and_then(|i| if i < 4 { Ok(i) } else { Err(bad()) })?)
            }
            _ => return Err(bad()),
        })
    }
}

/// Shape and peak magnitude of one stage's output, in execution order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageRecord {
    pub stage: Stage,
    pub shape: Shape,
    pub max_abs: f64,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    stem: Conv,
    encoder: Vec<Vec<Lfe>>,
    downs: Vec<Conv>,
    latent: Vec<Htb>,
    ups: Vec<Conv>,
    skip_fuse: Vec<Option<Conv>>,
    decoder: Vec<Vec<Lfe>>,
    head: Conv,
}

impl Model {
    /// Builds the network and its parameters; values depend only on `rng`'s seed.
    pub fn build<T: Scalar>(config: &ModelConfig, rng: &Rng) -> Result<(Model, ParamStore<T>)> {
        config.validate()?;
        let c = config;
        let mut store = ParamStore::new();
        let init = rng.split("init");
        let b = &mut ParamBuilder::new(&mut store, &init);
        let dims = c.encoder_dims;
        let next_dim = |i: usize| if i < 3 { dims[i + 1] } else { c.latent_dim };

        let stem = Conv::new(b, "stem".into(), ConvSpec::new(3, dims[0], 3))?;
        let mut encoder = Vec::new();
        let mut downs = Vec::new();
        for i in 0..4 {
            let stage = (0..c.encoder_depths[i])
                .map(|j| Lfe::new(b, format!("encoder.{i}.{j}"), c.lfe_spec(dims[i], c.lfe_expand[i])))
                .collect::<Result<Vec<_>>>()?;
            encoder.push(stage);
            downs.push(Conv::new(b, format!("down.{i}"), ConvSpec::downsample(dims[i], next_dim(i)))?);
        }
        let latent = (0..c.latent_depth)
            .map(|k| Htb::new(b, format!("latent.{k}"), c.htb_spec()))
            .collect::<Result<Vec<_>>>()?;
        let mut ups = Vec::new();
        let mut skip_fuse = Vec::new();
        let mut decoder = Vec::new();
        for i in 0..4 {
            ups.push(Conv::new(b, format!("up.{i}"), ConvSpec::upsample(next_dim(i), dims[i]))?);
            skip_fuse.push(match c.skip {
                SkipMode::Add => None,
                SkipMode::Concat => Some(Conv::new(b, format!("skip.{i}"), ConvSpec::pointwise(2 * dims[i], dims[i]))?),
            });
            let depth = c.decoder_depths[3 - i];
            let stage = (0..depth)
                .map(|j| Lfe::new(b, format!("decoder.{i}.{j}"), c.lfe_spec(dims[i], c.decoder_expand[3 - i])))
                .collect::<Result<Vec<_>>>()?;
            decoder.push(stage);
        }
        let head = Conv::new(b, "head".into(), ConvSpec::new(dims[0], 3, 3))?;
        let model = Model { config: c.clone(), stem, encoder, downs, latent, ups, skip_fuse, decoder, head };
        Ok((model, store))
    }

    pub fn check_input(shape: Shape) -> Result<()> {
        if shape.c() != 3 {
            return Err(Error::shape("model", format!("expected a 3-channel image, got {shape}")));
        }
        if !shape.h().is_multiple_of(LATENT_STRIDE)
            || !shape.w().is_multiple_of(LATENT_STRIDE)
            || shape.h() == 0
            || shape.w() == 0
        {
            return Err(Error::shape(
                "model",
                format!(
                    "input {}x{} must have height and width divisible by {LATENT_STRIDE}; pad the image first",
                    shape.h(),
                    shape.w()
                ),
            ));
        }
        Ok(())
    }

    /// All stage tags in execution order.
    pub fn stages(&self) -> Vec<Stage> {
        let mut s = vec![Stage::Stem];
        s.extend((0..4).map(Stage::Encoder));
        s.push(Stage::LatentIn);
        s.extend((1..=self.latent.len()).map(Stage::LatentAfter));
        s.extend((0..4).rev().map(Stage::Decoder));
        s.push(Stage::Output);
        s
    }

    /// Runs until `stop` (inclusive) and returns that stage's feature map.
    pub fn forward_to<T: Scalar>(
        &self,
        cx: &Ctx<T>,
        x: &Var<T>,
        stop: Stage,
        log: &mut Vec<StageRecord>,
    ) -> Result<Var<T>> {
        Self::check_input(x.shape())?;
        if !self.stages().contains(&stop) {
            return Err(Error::config(format!("stage `{stop}` does not exist in this model")));
        }
        let t = cx.tape;
        let mut record = |stage: Stage, v: &Var<T>| -> bool {
            log.push(StageRecord { stage, shape: v.shape(), max_abs: v.value().max_abs().as_f64() });
            stage == stop
        };

        let mut h = self.stem.forward(cx, x)?;
        if record(Stage::Stem, &h) {
            return Ok(h);
        }
        let mut skips = Vec::with_capacity(4);
        for i in 0..4 {
            for lfe in &self.encoder[i] {
                h = lfe.forward(cx, &h)?;
            }
            if record(Stage::Encoder(i), &h) {
                return Ok(h);
            }
            skips.push(h.clone());
            h = self.downs[i].forward(cx, &h)?;
        }
        if record(Stage::LatentIn, &h) {
            return Ok(h);
        }
        for (k, htb) in self.latent.iter().enumerate() {
            h = htb.forward(cx, &h)?;
            if record(Stage::LatentAfter(k + 1), &h) {
                return Ok(h);
            }
        }
        for i in (0..4).rev() {
            let up = self.ups[i].forward(cx, &h)?;
            h = match &self.skip_fuse[i] {
                None => t.add(&up, &skips[i])?,
                Some(fuse) => fuse.forward(cx, &t.concat_channels(&[&up, &skips[i]])?)?,
            };
            for lfe in &self.decoder[i] {
                h = lfe.forward(cx, &h)?;
            }
            if record(Stage::Decoder(i), &h) {
                return Ok(h);
            }
        }
        let out = t.add(&self.head.forward(cx, &h)?, x)?;
        record(Stage::Output, &out);
        Ok(out)
    }

    pub fn forward<T: Scalar>(&self, cx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        self.forward_to(cx, x, Stage::Output, &mut Vec::new())
    }

    /// Gradient-free restoration of a batch.
    pub fn infer<T: Scalar>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let pv = ParamVars::constants(params);
        Ok(self.forward(&Ctx::new(&tape, &pv), &Var::constant(x.clone()))?.value().clone())
    }

    /// Per-layer parameter and MAC rows for an `h x w` input.
    pub fn cost_rows(&self, h: usize, w: usize) -> Result<Vec<CostRow>> {
        Self::check_input(Shape::new(1, 3, h, w))?;
        let mut rows = Vec::new();
        let (mut ch, mut cw) = self.stem.cost(h, w, &mut rows)?;
        let mut sizes = Vec::with_capacity(4);
        for i in 0..4 {
            for lfe in &self.encoder[i] {
                lfe.cost(ch, cw, &mut rows)?;
            }
            sizes.push((ch, cw));
            (ch, cw) = self.downs[i].cost(ch, cw, &mut rows)?;
        }
        for htb in &self.latent {
            htb.cost(ch, cw, &mut rows)?;
        }
        for i in (0..4).rev() {
            (ch, cw) = self.ups[i].cost(ch, cw, &mut rows)?;
            debug_assert_eq!((ch, cw), sizes[i]);
            if let Some(fuse) = &self.skip_fuse[i] {
                fuse.cost(ch, cw, &mut rows)?;
            }
            for lfe in &self.decoder[i] {
                lfe.cost(ch, cw, &mut rows)?;
            }
        }
        self.head.cost(ch, cw, &mut rows)?;
        Ok(rows)
    }

    pub fn latent_blocks(&self) -> &[Htb] {
        &self.latent
    }
}
