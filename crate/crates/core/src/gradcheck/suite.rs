//! Named finite-difference checks over every tape op, every block and the
//! tiny end-to-end model.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_block, grad_check_many, GradCheckConfig, GradCheckReport};
use crate::autodiff::{Tape, Var};
use crate::blocks::attention::{ChannelSelfAttention, Fusion, SpatialSelfAttention};
use crate::blocks::{
    AttnSpec, AttnVariant, Conv, Ffn, FfnSpec, FfnVariant, FusionLayer, Htb, HtbSpec, LayerNorm, Lfe, LfeSpec, Se,
};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{ConvSpec, Padding, SESpec, SeWeights};
use crate::params::{Ctx, ParamBuilder, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Axis, Shape, Tensor};

/// Tolerance for op and block checks.
pub const UNIT_TOL: f64 = 1e-4;
/// Tolerance for the end-to-end model check.
pub const MODEL_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Ops,
    Blocks,
    Model,
    All,
}

impl Scope {
    fn includes(self, kind: Kind) -> bool {
        matches!(
            (self, kind),
            (Scope::All, _) | (Scope::Ops, Kind::Op) | (Scope::Blocks, Kind::Block) | (Scope::Model, Kind::Model)
        )
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" | "ops" => Ok(Scope::Ops),
            "block" | "blocks" => Ok(Scope::Blocks),
            "model" => Ok(Scope::Model),
            "all" => Ok(Scope::All),
            _ => Err(Error::config(format!("unknown scope `{s}` (expected op, block, model or all)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Op,
    Block,
    Model,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Kind::Op => "op",
            Kind::Block => "block",
            Kind::Model => "model",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitReport {
    pub kind: Kind,
    pub name: String,
    pub tol: f64,
    pub max_rel_error: f64,
    pub checked: usize,
    pub passed: bool,
    pub seconds: f64,
    /// Set when the check itself could not run.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub units: Vec<UnitReport>,
    pub passed: bool,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for u in &self.units {
            let status = if u.passed { "ok  " } else { "FAIL" };
            s += &format!(
                "{status} {:<6} {:<28} max rel err {:.3e} (tol {:.0e}, {} entries, {:.2}s)",
                u.kind, u.name, u.max_rel_error, u.tol, u.checked, u.seconds
            );
            if let Some(e) = &u.error {
                s += &format!(" error: {e}");
            }
            s.push('\n');
        }
        let failed = self.units.iter().filter(|u| !u.passed).count();
        s += &format!("{} units, {failed} failed, {:.1}s\n", self.units.len(), self.seconds);
        s
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Corrupts the backward pass of the named unit by a factor of 1.01, to
    /// show that the suite notices.
    pub inject_fault: Option<String>,
    /// Only units whose name contains this string.
    pub filter: Option<String>,
}

type Check = Box<dyn Fn(&GradCheckConfig, bool) -> Result<GradCheckReport> + Send + Sync>;

struct Unit {
    kind: Kind,
    name: &'static str,
    check: Check,
}

/// Identity forward whose backward is off by one percent when `fault` is set.
fn corrupt(tape: &Tape<f64>, y: Var<f64>, fault: bool) -> Result<Var<f64>> {
    if fault {
        tape.unary("injected_fault", &y, |v| v, |_| 1.01)
    } else {
        Ok(y)
    }
}

/// `sum(y * probe)` for a fixed probe of `y`'s shape.
fn project(tape: &Tape<f64>, y: &Var<f64>) -> Result<Var<f64>> {
    let s = y.shape();
    let probe: Tensor<f64> = Rng::new(s.numel() as u64).split("project").uniform_tensor(s, -1.0, 1.0);
    tape.sum(&tape.mul(y, &Var::constant(probe))?)
}

fn rand(seed: u64, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Rng::new(seed).split("suite-input").uniform_tensor(shape, lo, hi)
}

/// Values in `[0.1, 1]` with random sign, away from the kink of `abs`.
fn away_from_zero(seed: u64, shape: Shape) -> Tensor<f64> {
    let mut rng = Rng::new(seed).split("suite-sign");
    let mag = rand(seed, shape, 0.1, 1.0);
    Tensor::from_fn(shape, |i| {
        let v = mag.at(i);
        if rng.bernoulli(0.5) {
            v
        } else {
            -v
        }
    })
}

fn op<F>(name: &'static str, inputs: Vec<Tensor<f64>>, f: F) -> Unit
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>> + Send + Sync + 'static,
{
    Unit {
        kind: Kind::Op,
        name,
        check: Box::new(move |cfg, fault| {
            grad_check_many(
                |t, v| {
                    let y = corrupt(t, f(t, v)?, fault)?;
                    project(t, &y)
                },
                &inputs,
                cfg,
            )
        }),
    }
}

fn block<B, F>(name: &'static str, input: Shape, build: impl FnOnce(&mut ParamBuilder<f64>) -> Result<B>, f: F) -> Unit
where
    B: Send + Sync + 'static,
    F: Fn(&B, &Ctx<f64>, &Var<f64>) -> Result<Var<f64>> + Send + Sync + 'static,
{
    let mut store = ParamStore::new();
    let rng = Rng::new(name.len() as u64).split(name);
    let built = build(&mut ParamBuilder::new(&mut store, &rng));
    let x = rand(7, input, -1.0, 1.0);
    Unit {
        kind: Kind::Block,
        name,
        check: Box::new(move |cfg, fault| {
            let b = built.as_ref().map_err(|e| Error::config(e.to_string()))?;
            check_block(&store, &x, |cx, x| corrupt(cx.tape, f(b, cx, x)?, fault), cfg)
        }),
    }
}

fn op_units() -> Vec<Unit> {
    let s = |n, c, h, w| Shape::new(n, c, h, w);
    let r = |seed, shape| rand(seed, shape, -1.0, 1.0);
    let conv = |name: &'static str, spec: ConvSpec, x: Shape| {
        let w = r(2, spec.weight_shape());
        let mut inputs = vec![r(1, x), w];
        if spec.bias {
            inputs.push(r(3, spec.bias_shape()));
        }
        op(name, inputs, move |t, v| t.conv2d(&v[0], &v[1], v.get(2), &spec))
    };
    let se = SESpec::new(4, 2);
    let se_inputs = vec![
        r(1, s(2, 4, 3, 3)),
        r(2, se.squeeze().weight_shape()),
        r(3, se.squeeze().bias_shape()),
        r(4, se.excite().weight_shape()),
        r(5, se.excite().bias_shape()),
    ];
    vec![
        op("add", vec![r(1, s(2, 3, 2, 2)), r(2, s(2, 3, 2, 2))], |t, v| t.add(&v[0], &v[1])),
        op("add_broadcast", vec![r(1, s(2, 3, 2, 2)), r(2, s(1, 3, 1, 1))], |t, v| t.add(&v[0], &v[1])),
        op("sub", vec![r(1, s(1, 2, 3, 2)), r(2, s(1, 2, 3, 2))], |t, v| t.sub(&v[0], &v[1])),
        op("mul_broadcast", vec![r(1, s(2, 3, 2, 2)), r(2, s(2, 3, 1, 1))], |t, v| t.mul(&v[0], &v[1])),
        op("scale", vec![r(1, s(1, 2, 2, 2))], |t, v| t.scale(&v[0], -1.7)),
        op("add_scalar", vec![r(1, s(1, 2, 2, 2))], |t, v| t.add_scalar(&v[0], 0.3)),
        op("square", vec![r(1, s(1, 2, 2, 2))], |t, v| t.square(&v[0])),
        op("abs", vec![away_from_zero(1, s(1, 2, 2, 3))], |t, v| t.abs(&v[0])),
        op("ln_floored", vec![rand(1, s(1, 2, 2, 2), 0.5, 2.0)], |t, v| t.ln_floored(&v[0], 1e-12)),
        op("sum", vec![r(1, s(2, 2, 2, 2))], |t, v| t.sum(&v[0])),
        op("mean", vec![r(1, s(2, 2, 2, 2))], |t, v| t.mean(&v[0])),
        op("matmul", vec![r(1, s(2, 2, 3, 4)), r(2, s(2, 2, 4, 2))], |t, v| t.matmul(&v[0], &v[1], false, false)),
        op("matmul_ta", vec![r(1, s(1, 2, 4, 3)), r(2, s(1, 2, 4, 2))], |t, v| t.matmul(&v[0], &v[1], true, false)),
        op("matmul_tb", vec![r(1, s(1, 2, 3, 4)), r(2, s(1, 2, 2, 4))], |t, v| t.matmul(&v[0], &v[1], false, true)),
        op("reshape", vec![r(1, s(1, 4, 2, 3))], |t, v| t.reshape(&v[0], Shape::new(1, 2, 4, 3))),
        op("split_channels", vec![r(1, s(2, 5, 2, 2))], |t, v| {
            let parts = t.split_channels(&v[0], &[2, 3])?;
            t.concat_channels(&[&parts[1], &t.scale(&parts[0], 2.0)?])
        }),
        op("concat_channels", vec![r(1, s(2, 1, 2, 2)), r(2, s(2, 3, 2, 2))], |t, v| {
            t.concat_channels(&[&v[0], &v[1]])
        }),
        op("pick_location", vec![r(1, s(2, 3, 3, 4))], |t, v| t.pick_location(&v[0], 1, 2)),
        op("gelu", vec![rand(1, s(1, 2, 3, 3), -3.0, 3.0)], |t, v| t.gelu(&v[0])),
        op("sigmoid", vec![rand(1, s(1, 2, 3, 3), -3.0, 3.0)], |t, v| t.sigmoid(&v[0])),
        op("softmax_w", vec![rand(1, s(1, 2, 3, 4), -2.0, 2.0)], |t, v| t.softmax(&v[0], Axis::W)),
        op("softmax_h", vec![rand(1, s(1, 2, 3, 4), -2.0, 2.0)], |t, v| t.softmax(&v[0], Axis::H)),
        conv("conv2d_3x3", ConvSpec::new(2, 3, 3), s(2, 2, 4, 5)),
        conv("conv2d_pointwise", ConvSpec::pointwise(3, 2), s(1, 3, 3, 3)),
        conv("conv2d_depthwise", ConvSpec::depthwise(3, 3), s(1, 3, 4, 4)),
        conv("conv2d_grouped", ConvSpec { groups: 2, ..ConvSpec::new(4, 2, 3) }, s(1, 4, 3, 3)),
        conv("conv2d_stride2", ConvSpec::downsample(2, 3), s(1, 2, 5, 4)),
        conv("conv2d_transposed", ConvSpec::upsample(3, 2), s(1, 3, 2, 3)),
        conv(
            "conv2d_valid_no_bias",
            ConvSpec { padding: Padding::Explicit(0), ..ConvSpec::new(2, 2, 3).without_bias() },
            s(1, 2, 4, 4),
        ),
        op("layer_norm", vec![r(1, s(2, 4, 2, 3)), rand(2, s(1, 4, 1, 1), 0.5, 1.5), r(3, s(1, 4, 1, 1))], |t, v| {
            t.layer_norm(&v[0], &v[1], &v[2], 1e-5)
        }),
        op("global_avg_pool", vec![r(1, s(2, 3, 3, 2))], |t, v| t.global_avg_pool(&v[0])),
        op("simple_gate", vec![r(1, s(1, 4, 2, 3))], |t, v| t.simple_gate(&v[0])),
        op("se_gate", se_inputs.clone(), move |t, v| {
            t.se_gate(&v[0], &se, &SeWeights { w1: &v[1], b1: &v[2], w2: &v[3], b2: &v[4] }, false)
        }),
        op("channel_attention", se_inputs, move |t, v| {
            t.channel_attention(&v[0], &se, &SeWeights { w1: &v[1], b1: &v[2], w2: &v[3], b2: &v[4] }, false)
        }),
    ]
}

fn htb_spec(c: usize, heads: usize, variant: AttnVariant, fusion: Fusion, ffn: FfnVariant) -> HtbSpec {
    HtbSpec {
        channels: c,
        attn: AttnSpec { branch_channels: c / 4, heads, variant, fusion },
        ffn: FfnSpec { channels: c / 2, beta: 2, variant: ffn },
        lfe: LfeSpec { channels: c / 2, expand: 2, se_reduction: 4, use_ca: true },
        use_parallel_lfe: true,
        pre_norm: true,
    }
}

fn block_units() -> Vec<Unit> {
    let s = |c, h, w| Shape::new(1, c, h, w);
    let lfe = |ca| LfeSpec { channels: 4, expand: 2, se_reduction: 4, use_ca: ca };
    let ffn = |variant| FfnSpec { channels: 4, beta: 2, variant };
    let fusion = |name: &'static str, kind: Fusion| {
        block(
            name,
            s(8, 3, 3),
            move |b| FusionLayer::new(b, "fusion".into(), kind, 4),
            |f: &FusionLayer, cx, x| {
                let parts = cx.tape.split_channels(x, &[4, 4])?;
                f.forward(cx, &parts[0], &parts[1])
            },
        )
    };
    let htb = |name: &'static str, spec: HtbSpec| {
        block(name, s(8, 3, 3), move |b| Htb::new(b, "htb".into(), spec), |h: &Htb, cx, x| h.forward(cx, x))
    };
    vec![
        block(
            "conv",
            s(3, 4, 4),
            |b| Conv::new(b, "conv".into(), ConvSpec::new(3, 4, 3)),
            |c: &Conv, cx, x| c.forward(cx, x),
        ),
        block("norm_layer", s(4, 3, 3), |b| LayerNorm::new(b, "ln".into(), 4), |l: &LayerNorm, cx, x| l.forward(cx, x)),
        block("se", s(8, 3, 3), |b| Se::new(b, "se".into(), SESpec::new(8, 4)), |l: &Se, cx, x| l.forward(cx, x)),
        block("lfe", s(4, 4, 4), move |b| Lfe::new(b, "lfe".into(), lfe(true)), |l: &Lfe, cx, x| l.forward(cx, x)),
        block(
            "lfe_no_ca",
            s(4, 4, 4),
            move |b| Lfe::new(b, "lfe".into(), lfe(false)),
            |l: &Lfe, cx, x| l.forward(cx, x),
        ),
        block(
            "ffn_mbffn",
            s(4, 3, 3),
            move |b| Ffn::new(b, "ffn".into(), ffn(FfnVariant::Mbffn)),
            |l: &Ffn, cx, x| l.forward(cx, x),
        ),
        block(
            "ffn_mlp",
            s(4, 3, 3),
            move |b| Ffn::new(b, "ffn".into(), ffn(FfnVariant::Mlp)),
            |l: &Ffn, cx, x| l.forward(cx, x),
        ),
        block(
            "ffn_convffn",
            s(4, 3, 3),
            move |b| Ffn::new(b, "ffn".into(), ffn(FfnVariant::Convffn)),
            |l: &Ffn, cx, x| l.forward(cx, x),
        ),
        block(
            "ffn_leff",
            s(4, 3, 3),
            move |b| Ffn::new(b, "ffn".into(), ffn(FfnVariant::Leff)),
            |l: &Ffn, cx, x| l.forward(cx, x),
        ),
        block(
            "channel_self_attention",
            s(4, 3, 3),
            |b| ChannelSelfAttention::new(b, "csa".into(), 4, 2),
            |a: &ChannelSelfAttention, cx, x| a.forward(cx, x),
        ),
        block(
            "spatial_self_attention",
            s(4, 3, 3),
            |b| SpatialSelfAttention::new(b, "ssa".into(), 4, 2, true),
            |a: &SpatialSelfAttention, cx, x| a.forward(cx, x),
        ),
        block(
            "spatial_attention_no_dwconv",
            s(4, 2, 3),
            |b| SpatialSelfAttention::new(b, "ssa".into(), 4, 2, false),
            |a: &SpatialSelfAttention, cx, x| a.forward(cx, x),
        ),
        fusion("fusion_acm", Fusion::Acm),
        fusion("fusion_sk", Fusion::Sk),
        fusion("fusion_concat", Fusion::Concat),
        htb("htb", htb_spec(8, 2, AttnVariant::Cssa, Fusion::Acm, FfnVariant::Mbffn)),
        htb("htb_ssa_sk", htb_spec(8, 2, AttnVariant::SsaOnly, Fusion::Sk, FfnVariant::Mlp)),
        htb("htb_csa_concat", htb_spec(8, 1, AttnVariant::CsaOnly, Fusion::Concat, FfnVariant::Leff)),
        htb(
            "htb_no_lfe",
            HtbSpec {
                use_parallel_lfe: false,
                pre_norm: false,
                ..htb_spec(8, 2, AttnVariant::Cssa, Fusion::Acm, FfnVariant::Mbffn)
            },
        ),
    ]
}

fn model_unit() -> Unit {
    let built = Model::build::<f64>(&ModelConfig::tiny(), &Rng::new(11));
    let x = rand(12, Shape::new(1, 3, 16, 16), 0.0, 1.0);
    Unit {
        kind: Kind::Model,
        name: "tiny_model",
        check: Box::new(move |cfg, fault| {
            let (m, p) = built.as_ref().map_err(|e| Error::config(e.to_string()))?;
            let cfg = cfg.clone().with_tol(MODEL_TOL).with_max_entries(2);
            check_block(p, &x, |cx, x| corrupt(cx.tape, m.forward(cx, x)?, fault), &cfg)
        }),
    }
}

/// Names of every unit in `scope`, in run order.
pub fn unit_names(scope: Scope) -> Vec<&'static str> {
    units(scope).iter().map(|u| u.name).collect()
}

fn units(scope: Scope) -> Vec<Unit> {
    let mut all = Vec::new();
    if scope.includes(Kind::Op) {
        all.extend(op_units());
    }
    if scope.includes(Kind::Block) {
        all.extend(block_units());
    }
    if scope.includes(Kind::Model) {
        all.push(model_unit());
    }
    all
}

pub fn run_suite(scope: Scope, opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut selected = units(scope);
    if let Some(f) = &opts.filter {
        selected.retain(|u| u.name.contains(f.as_str()));
    }
    if let Some(name) = &opts.inject_fault {
        if !selected.iter().any(|u| u.name == name) {
            return Err(Error::config(format!("no unit named `{name}` to inject a fault into")));
        }
    }
    if selected.is_empty() {
        return Err(Error::config("no gradient-check units selected"));
    }
    let start = Instant::now();
    let base = GradCheckConfig { seed: opts.seed, tol: UNIT_TOL, ..GradCheckConfig::default() };
    let reports: Vec<UnitReport> = selected
        .par_iter()
        .map(|u| {
            let t = Instant::now();
            let fault = opts.inject_fault.as_deref() == Some(u.name);
            let tol = if u.kind == Kind::Model { MODEL_TOL } else { UNIT_TOL };
            let (max_rel_error, checked, passed, error) = match (u.check)(&base, fault) {
                Ok(r) => (r.max_rel_error, r.checked, r.passed, None),
                Err(e) => (f64::NAN, 0, false, Some(e.to_string())),
            };
            UnitReport {
                kind: u.kind,
                name: u.name.to_string(),
                tol,
                max_rel_error,
                checked,
                passed,
                seconds: t.elapsed().as_secs_f64(),
                error,
            }
        })
        .collect();
    let passed = reports.iter().all(|u| u.passed);
    Ok(SuiteReport { seed: opts.seed, units: reports, passed, seconds: start.elapsed().as_secs_f64() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scopes_partition_the_units() {
        let ops = unit_names(Scope::Ops).len();
        let blocks = unit_names(Scope::Blocks).len();
        assert_eq!(unit_names(Scope::Model), vec!["tiny_model"]);
        assert_eq!(unit_names(Scope::All).len(), ops + blocks + 1);
        let mut names = unit_names(Scope::All);
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), ops + blocks + 1);
        assert!("bogus".parse::<Scope>().is_err());
    }

    #[test]
    fn op_units_pass() {
        let r = run_suite(Scope::Ops, &SuiteOptions::default()).unwrap();
        assert!(r.passed, "{}", r.to_text());
    }

    #[test]
    fn injected_fault_is_caught_only_where_injected() {
        let opts =
            SuiteOptions { inject_fault: Some("gelu".into()), filter: Some("g".into()), ..SuiteOptions::default() };
        let r = run_suite(Scope::Ops, &opts).unwrap();
        assert!(!r.passed);
        for u in &r.units {
            assert_eq!(u.passed, u.name != "gelu", "{}", r.to_text());
        }
        let bad = SuiteOptions { inject_fault: Some("nope".into()), ..SuiteOptions::default() };
        assert!(run_suite(Scope::Ops, &bad).is_err());
    }
}
