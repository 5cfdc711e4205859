//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::io::Write;
use std::process::ExitCode;
use std::time::Instant;

use common::{psnr_oracle, ssim_oracle};
use dualformer::analysis::erf::stage_center;
use dualformer::analysis::{erf, mac_count, param_count, sweep, ErfConfig};
use dualformer::blocks::{ChannelSelfAttention, SpatialSelfAttention};
use dualformer::gradcheck::{run_suite, Kind, Scope, SuiteOptions, MODEL_TOL, UNIT_TOL};
use dualformer::metrics::{psnr, ssim};
use dualformer::model::{StageRecord, LATENT_STRIDE};
use dualformer::params::{Ctx, ParamBuilder, ParamStore, ParamVars};
use dualformer::training::{DegradeSpec, RunConfig, Trainer};
use dualformer::{Model, ModelConfig, Rng, Shape, Stage, Switch, Tape, Tensor, Var};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value / target - 1.0).abs() <= rel
}

fn params_of(cfg: &ModelConfig) -> Result<u64, String> {
    let (m, _) = Model::build::<f32>(cfg, &Rng::new(0)).map_err(err)?;
    Ok(param_count(&m).map_err(err)?.totals.params)
}

fn cost_reproduction() -> Outcome {
    let (m, _) = Model::build::<f32>(&ModelConfig::paper(), &Rng::new(0)).map_err(err)?;
    let params = param_count(&m).map_err(err)?.totals.params as f64;
    let macs = mac_count(&m, 256, 256).map_err(err)?.totals.macs as f64;
    let msg = format!("params {:.3}M (target 14.23M), MACs {:.3}G (target 9.28G)", params / 1e6, macs / 1e9);
    ensure(within(params, 14.23e6, 0.08) && within(macs, 9.28e9, 0.10), msg.clone())?;
    Ok(msg)
}

fn ablation_directions() -> Outcome {
    let base = ModelConfig::paper();
    let variant = |s: &str| -> Result<u64, String> {
        let sw: Switch = s.parse().map_err(err)?;
        params_of(&base.variant(&[sw]).map_err(err)?)
    };
    let acm = params_of(&base)? as f64;
    let concat = variant("fusion=concat")? as f64;
    let no_ca = variant("lfe_ca=off")? as f64;
    let no_lfe = variant("htb_lfe=off")? as f64;
    let mlp = variant("ffn=mlp")? as f64;
    let msg = format!(
        "concat {:.3}M (9.78M), lfe_ca=off {:.3}M (12.52M), htb_lfe=off {:.3}M (11.01M), mlp {:.3}M vs mbffn {:.3}M",
        concat / 1e6,
        no_ca / 1e6,
        no_lfe / 1e6,
        mlp / 1e6,
        acm / 1e6
    );
    ensure(within(concat, 9.78e6, 0.15) && concat < acm, format!("fusion: {msg}"))?;
    ensure(within(no_ca, 12.52e6, 0.15), format!("lfe_ca: {msg}"))?;
    ensure(within(no_lfe, 11.01e6, 0.15), format!("htb_lfe: {msg}"))?;
    ensure(mlp > acm, format!("ffn: {msg}"))?;
    Ok(msg)
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let r = run_suite(Scope::All, &SuiteOptions::default()).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let count = |k: Kind| r.units.iter().filter(|u| u.kind == k).count();
    let worst = |k: Kind| r.units.iter().filter(|u| u.kind == k).map(|u| u.max_rel_error).fold(0.0, f64::max);
    for u in &r.units {
        let want = if u.kind == Kind::Model { MODEL_TOL } else { UNIT_TOL };
        ensure(u.tol == want, format!("{} checked at tol {:e}", u.name, u.tol))?;
        ensure(u.passed, format!("{} {}: max rel err {:.3e}", u.kind, u.name, u.max_rel_error))?;
    }
    ensure(r.passed, "suite reported failure")?;
    ensure(count(Kind::Op) > 0 && count(Kind::Block) > 0 && count(Kind::Model) > 0, "a unit kind is missing")?;
    ensure(secs < 300.0, format!("suite took {secs:.1}s"))?;
    Ok(format!(
        "{} ops (worst {:.1e}), {} blocks (worst {:.1e}), model (worst {:.1e}); {secs:.1}s",
        count(Kind::Op),
        worst(Kind::Op),
        count(Kind::Block),
        worst(Kind::Block),
        worst(Kind::Model)
    ))
}

fn trace(m: &Model, p: &ParamStore<f32>, x: &Tensor<f32>) -> Result<Vec<StageRecord>, String> {
    let tape = Tape::new();
    let pv = ParamVars::constants(p);
    let mut log = Vec::new();
    m.forward_to(&Ctx::new(&tape, &pv), &Var::constant(x.clone()), Stage::Output, &mut log).map_err(err)?;
    Ok(log)
}

fn structural_invariants() -> Outcome {
    let (m, p) = Model::build::<f32>(&ModelConfig::tiny(), &Rng::new(0)).map_err(err)?;
    let mut rng = Rng::new(1);
    let shapes =
        [Shape::new(1, 3, 16, 16), Shape::new(2, 3, 32, 48), Shape::new(1, 3, 80, 16), Shape::new(1, 3, 64, 64)];
    for shape in shapes {
        let x: Tensor<f32> = rng.uniform_tensor(shape, 0.0, 1.0);
        let log = trace(&m, &p, &x)?;
        let out = log.last().ok_or("empty trace")?.shape;
        ensure(out == shape, format!("output {out} for input {shape}"))?;
        let want = Shape::new(shape.n(), m.config.latent_dim, shape.h() / 16, shape.w() / 16);
        for r in log.iter().filter(|r| matches!(r.stage, Stage::LatentIn | Stage::LatentAfter(_))) {
            ensure(r.shape == want, format!("{} at {} for input {shape}", r.stage, r.shape))?;
        }
    }
    ensure(LATENT_STRIDE == 16, "latent stride")?;

    let mut zero = p.clone();
    zero.zero_where(|n| n.ends_with(".weight"));
    let x: Tensor<f32> = rng.uniform_tensor(Shape::new(2, 3, 32, 32), 0.0, 1.0);
    ensure(m.infer(&zero, &x).map_err(err)?.data() == x.data(), "zero-init output differs from input")?;

    let (paper, pp) = Model::build::<f32>(&ModelConfig::paper(), &Rng::new(0)).map_err(err)?;
    let tape = Tape::new();
    let pv = ParamVars::constants(&pp);
    let htb = &paper.latent_blocks()[0];
    let input = Var::constant(Tensor::<f32>::zeros(Shape::new(1, paper.config.latent_dim, 2, 2)));
    let (_, tr) = htb.forward_traced(&Ctx::new(&tape, &pv), &input).map_err(err)?;
    let widths = [tr.global.c(), tr.local.c(), tr.channel_branch.c(), tr.spatial_branch.c()];
    ensure(
        paper.config.latent_dim == 384 && widths == [192, 192, 96, 96],
        format!("latent {} split {widths:?}", paper.config.latent_dim),
    )?;
    Ok(format!(
        "shape preserved on {} inputs, zero-init identity exact, latent at H/16, split {widths:?}",
        shapes.len()
    ))
}

fn with_store<B>(seed: u64, f: impl FnOnce(&mut ParamBuilder<f64>) -> B) -> (B, ParamStore<f64>) {
    let mut s = ParamStore::new();
    let rng = Rng::new(seed);
    let b = f(&mut ParamBuilder::new(&mut s, &rng));
    (b, s)
}

type MapFn<'a> = dyn Fn(&Ctx<f64>, &Var<f64>) -> dualformer::Result<(Var<f64>, Var<f64>)> + 'a;

fn eval_map(store: &ParamStore<f64>, x: &Tensor<f64>, f: &MapFn) -> Result<(Tensor<f64>, Tensor<f64>), String> {
    let tape = Tape::new();
    let pv = ParamVars::constants(store);
    let (y, a) = f(&Ctx::new(&tape, &pv), &Var::constant(x.clone())).map_err(err)?;
    Ok((y.value().clone(), a.value().clone()))
}

fn attention_properties() -> Outcome {
    let mut worst_sum = 0.0f64;
    for (i, (width, heads, h, w)) in [(96, 8, 8, 8), (24, 2, 3, 7), (12, 3, 1, 16)].into_iter().enumerate() {
        let seed = 10 + i as u64;
        let (csa, sc) = with_store(seed, |b| ChannelSelfAttention::new(b, "c".into(), width, heads));
        let (ssa, ss) = with_store(seed, |b| SpatialSelfAttention::new(b, "s".into(), width, heads, true));
        let (csa, ssa) = (csa.map_err(err)?, ssa.map_err(err)?);
        let x: Tensor<f64> = Rng::new(seed).uniform_tensor(Shape::new(2, width, h, w), -4.0, 4.0);
        let (_, ac) = eval_map(&sc, &x, &|cx, x| csa.forward_with_map(cx, x))?;
        let (_, asp) = eval_map(&ss, &x, &|cx, x| ssa.forward_with_map(cx, x))?;
        let (d, n) = (width / heads, h * w);
        ensure(ac.shape() == Shape::new(2, heads, d, d), format!("channel map {}", ac.shape()))?;
        ensure(asp.shape() == Shape::new(2, heads, n, n), format!("spatial map {}", asp.shape()))?;
        for b in 0..2 {
            for hd in 0..heads {
                for j in 0..d {
                    let col: f64 = (0..d).map(|r| ac.at([b, hd, r, j])).sum();
                    worst_sum = worst_sum.max((col - 1.0).abs());
                }
                for t in 0..n {
                    let row: f64 = (0..n).map(|u| asp.at([b, hd, t, u])).sum();
                    worst_sum = worst_sum.max((row - 1.0).abs());
                }
            }
        }
    }
    ensure(worst_sum < 1e-6, format!("stochasticity error {worst_sum:.2e}"))?;

    let mut worst_perm = 0.0f64;
    for seed in 0..5u64 {
        let (ssa, s) = with_store(100 + seed, |b| SpatialSelfAttention::new(b, "s".into(), 12, 3, false));
        let ssa = ssa.map_err(err)?;
        let mut rng = Rng::new(200 + seed);
        let shape = Shape::new(1, 12, 4, 5);
        let x: Tensor<f64> = rng.uniform_tensor(shape, -2.0, 2.0);
        let perm = rng.permutation(shape.plane());
        let permute = |t: &Tensor<f64>| {
            Tensor::from_fn(t.shape(), |[n, c, h, w]| {
                let src = perm[h * shape.w() + w];
                t.at([n, c, src / shape.w(), src % shape.w()])
            })
        };
        let (y, _) = eval_map(&s, &x, &|cx, x| ssa.forward_with_map(cx, x))?;
        let (yp, _) = eval_map(&s, &permute(&x), &|cx, x| ssa.forward_with_map(cx, x))?;
        for (a, b) in permute(&y).data().iter().zip(yp.data()) {
            worst_perm = worst_perm.max((a - b).abs());
        }
    }
    ensure(worst_perm < 1e-6, format!("permutation error {worst_perm:.2e}"))?;
    Ok(format!("max |sum - 1| {worst_sum:.1e}, max permutation error {worst_perm:.1e}"))
}

fn erf_reproduction() -> Outcome {
    let start = Instant::now();
    let (m, p) = Model::build::<f32>(&ModelConfig::tiny(), &Rng::new(1)).map_err(err)?;
    let res = (64, 64);
    let cfg = ErfConfig { probes: 100, seed: 3, detach_global_gates: true };
    let mut sizes = Vec::new();
    for stage in
        [Stage::Stem, Stage::Encoder(0), Stage::Encoder(1), Stage::Encoder(2), Stage::Encoder(3), Stage::LatentIn]
    {
        let map = erf(&m, &p, stage, stage_center(stage, res), res, &cfg).map_err(err)?;
        ensure(map.probes == 100, "probe count")?;
        ensure(map.within_bound() == Some(true), format!("{stage}: support leaves the conv window"))?;
        sizes.push(map.support_pixels());
    }
    // At 96x96 the corner latent token's conv window no longer spans the
    // image, so full support after the hybrid block comes from attention.
    let (res, corner) = ((96, 96), (0, 0));
    let before = erf(&m, &p, Stage::LatentIn, corner, res, &cfg).map_err(err)?;
    ensure(before.within_bound() == Some(true), "latent input leaves its conv window")?;
    let partial = before.support_fraction();
    ensure(partial < 1.0, "latent input window already covers the image")?;
    let after = erf(&m, &p, Stage::LatentAfter(1), corner, res, &cfg).map_err(err)?;
    let full = after.support_fraction();
    ensure(full == 1.0, format!("after one hybrid block support is {full}"))?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, format!("took {secs:.1}s"))?;
    Ok(format!(
        "encoder support {sizes:?} px inside windows; corner token at 96x96 {partial:.3} before and {full} after one hybrid block; {secs:.1}s"
    ))
}

fn resolution_sweep() -> Outcome {
    let (m, _) = Model::build::<f32>(&ModelConfig::paper(), &Rng::new(0)).map_err(err)?;
    let r = sweep(&m, None, &[128, 160, 192, 224, 256]).map_err(err)?;
    let ratio = r.macs_at(256).ok_or("no 256 row")? as f64 / r.macs_at(128).ok_or("no 128 row")? as f64;
    let strictly = r.rows.windows(2).all(|w| w[1].macs > w[0].macs);
    let msg = format!("MACs(256)/MACs(128) = {ratio:.3}, monotone {}", r.monotone && strictly);
    ensure((3.9..=4.3).contains(&ratio) && r.monotone && strictly, msg.clone())?;
    Ok(msg)
}

fn train(config: &RunConfig) -> Result<(Trainer<f32>, dualformer::training::TrainSummary, String), String> {
    let mut t = Trainer::<f32>::new(config.clone()).map_err(err)?;
    let mut log = String::new();
    let records = t
        .run_until(config.train.steps, &mut |r| {
            log += &serde_json::to_string(r)?;
            log.push('\n');
            Ok(())
        })
        .map_err(err)?;
    let summary = t.summary(&records).map_err(err)?;
    Ok((t, summary, log))
}

fn toy_training() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    for kind in ["noise", "rain"] {
        let config = RunConfig { degrade: DegradeSpec::preset(kind).map_err(err)?, ..RunConfig::toy() };
        ensure(config.train.steps == 200, "toy run is not 200 steps")?;
        let (t, s, log) = train(&config)?;
        ensure(s.steps == 200, format!("{kind}: ran {} steps", s.steps))?;
        ensure(s.gain >= 3.0, format!("{kind}: gain {:.2} dB", s.gain))?;
        ensure(s.final_loss < s.initial_loss, format!("{kind}: loss {:.3} -> {:.3}", s.initial_loss, s.final_loss))?;
        lines.push(format!(
            "{kind} {:.2} -> {:.2} dB (+{:.2}), loss {:.2} -> {:.2}",
            s.degraded_psnr, s.restored_psnr, s.gain, s.initial_loss, s.final_loss
        ));
        if kind == "noise" {
            let (t2, s2, log2) = train(&config)?;
            ensure(t.params == t2.params && log == log2 && s == s2, "rerun with the same seed differs")?;
            lines.push("rerun bitwise identical".into());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 600.0, format!("took {secs:.0}s"))?;
    Ok(format!("{}; {secs:.0}s", lines.join(", ")))
}

fn metric_oracles() -> Outcome {
    let root = Rng::new(99);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let mut rng = root.split_index("pair", i);
        let h = 11 + (rng.next_u64() % 10) as usize;
        let w = 11 + (rng.next_u64() % 10) as usize;
        let shape = Shape::new(1 + (i as usize % 2), 1 + (i as usize % 3), h, w);
        let a: Tensor<f64> = rng.uniform_tensor(shape, 0.0, 1.0);
        let noise: Tensor<f64> = rng.uniform_tensor(shape, -0.3, 0.3);
        let b = a.add(&noise).map_err(err)?.map(|v| v.clamp(0.0, 1.0));
        worst = worst.max((psnr(&a, &b, 1.0).map_err(err)? - psnr_oracle(&a, &b)).abs());
        worst = worst.max((ssim(&a, &b).map_err(err)? - ssim_oracle(&a, &b)).abs());
    }
    ensure(worst <= 1e-8, format!("oracle deviation {worst:.2e}"))?;
    let x: Tensor<f64> = Rng::new(5).uniform_tensor(Shape::new(1, 3, 24, 24), 0.0, 1.0);
    let self_ssim = ssim(&x, &x).map_err(err)?;
    ensure(self_ssim == 1.0, format!("ssim(x, x) = {self_ssim}"))?;
    let flat = Tensor::<f64>::full(Shape::new(1, 3, 16, 16), 0.5);
    let db = psnr(&flat, &flat.map(|v| v - 0.1), 1.0).map_err(err)?;
    ensure((db - 20.0).abs() < 1e-9, format!("uniform 0.1 offset gives {db} dB"))?;
    Ok(format!("50 pairs within {worst:.1e}, ssim(x,x) = 1, uniform 0.1 offset {db:.6} dB"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("cost reproduction", cost_reproduction),
        ("ablation cost directions", ablation_directions),
        ("gradient correctness", gradient_correctness),
        ("structural invariants", structural_invariants),
        ("attention properties", attention_properties),
        ("receptive field", erf_reproduction),
        ("resolution sweep", resolution_sweep),
        ("toy training", toy_training),
        ("metric oracles", metric_oracles),
    ];
    // Positional arguments filter by criterion name, as libtest does.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let selected = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let (mut ran, mut failed) = (0, 0);
    let mut out = std::io::stdout().lock();
    for (i, (name, check)) in criteria.iter().enumerate().filter(|(_, (n, _))| selected(n)) {
        let start = Instant::now();
        let (status, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        ran += 1;
        let _ = writeln!(out, "{status} {} {name}: {detail} [{:.1}s]", i + 1, start.elapsed().as_secs_f64());
        let _ = out.flush();
    }
    let _ = writeln!(out, "{} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
