use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use dualformer::analysis::{self, CostReport, CostTotals, ErfConfig, ErfSummary};
use dualformer::gradcheck::{run_suite, unit_names, Scope, SuiteOptions};
use dualformer::io;
use dualformer::metrics::{self, ChannelMode};
use dualformer::params::ParamStore;
use dualformer::training::{StepRecord, Trainer};
use dualformer::{Model, ModelConfig, Rng, Stage, Switch, Tensor};

use crate::args::*;
use crate::config;
use crate::{CmdResult, Failure};

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

/// PSNR as JSON; identical images give the string `"inf"`.
fn db(v: f64) -> Value {
    if v.is_infinite() {
        json!("inf")
    } else {
        json!(v)
    }
}

fn db_text(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

fn model_and_weights(
    model: &ModelArgs,
    weights: Option<&Path>,
    seed: u64,
) -> Result<(Model, ParamStore<f32>), Failure> {
    match weights {
        Some(path) => {
            let (m, p) = io::load_checkpoint::<f32>(path)?;
            if model.config.is_some() || model.preset.is_some() {
                let wanted = config::model_config(model, "tiny")?;
                if wanted != m.config {
                    return Err(Failure::Usage(format!(
                        "checkpoint config {} differs from the requested config {}",
                        m.config.hash(),
                        wanted.hash()
                    )));
                }
            }
            Ok((m, p))
        }
        None => Ok(Model::build::<f32>(&config::model_config(model, "tiny")?, &Rng::new(seed))?),
    }
}

#[derive(Serialize)]
struct VariantRow {
    variant: String,
    config_hash: String,
    params: u64,
    macs: u64,
    params_ratio: f64,
    macs_ratio: f64,
}

#[derive(Serialize)]
struct AnalyzeReport {
    #[serde(flatten)]
    cost: CostReport,
    variants: Vec<VariantRow>,
}

fn totals(cfg: &ModelConfig, h: usize, w: usize) -> Result<CostReport, Failure> {
    let (model, _) = Model::build::<f32>(cfg, &Rng::new(0))?;
    Ok(analysis::mac_count(&model, h, w)?)
}

pub fn analyze(a: AnalyzeArgs) -> CmdResult {
    let cfg = config::model_config(&a.model, "paper")?;
    let (h, w) = config::resolution(&a.resolution)?;
    let cost = totals(&cfg, h, w)?;
    let base: CostTotals = cost.totals;
    let mut variants = Vec::new();
    for v in &a.variants {
        let switch: Switch = v.parse()?;
        let vc = cfg.variant(&[switch])?;
        let t = totals(&vc, h, w)?.totals;
        variants.push(VariantRow {
            variant: v.clone(),
            config_hash: vc.hash(),
            params: t.params,
            macs: t.macs,
            params_ratio: t.params as f64 / base.params as f64,
            macs_ratio: t.macs as f64 / base.macs as f64,
        });
    }
    print!("{}", cost.to_text(a.depth));
    if !variants.is_empty() {
        println!(
            "\n{:<22}  {:>16}  {:>12}  {:>8}  {:>10}  {:>8}",
            "variant", "config", "params", "ratio", "GMACs", "ratio"
        );
        println!(
            "{:<22}  {:>16}  {:>11.3}M  {:>8.3}  {:>10.3}  {:>8.3}",
            "baseline",
            cost.config_hash,
            base.params as f64 / 1e6,
            1.0,
            base.macs as f64 / 1e9,
            1.0
        );
        for r in &variants {
            println!(
                "{:<22}  {:>16}  {:>11.3}M  {:>8.3}  {:>10.3}  {:>8.3}",
                r.variant,
                r.config_hash,
                r.params as f64 / 1e6,
                r.params_ratio,
                r.macs as f64 / 1e9,
                r.macs_ratio
            );
        }
    }
    if let Some(out) = &a.out {
        write_json(out, &AnalyzeReport { cost, variants })?;
    }
    Ok(())
}

pub fn forward(a: ForwardArgs) -> CmdResult {
    let (model, mut params) = model_and_weights(&a.model, a.weights.as_deref(), a.seed)?;
    if a.zero_init {
        params.zero_where(|n| n.ends_with(".weight"));
    }
    let x: Tensor<f32> = io::load_ppm(&a.input)?;
    let (h, w) = (x.shape().h(), x.shape().w());
    let padded = if a.no_pad {
        Model::check_input(x.shape())?;
        x.clone()
    } else {
        io::reflect_pad(&x, dualformer::model::LATENT_STRIDE)
    };
    let y = io::crop(&model.infer(&params, &padded)?, h, w)?;
    io::save_ppm(&a.out, &y)?;
    println!("config {}", model.config.hash());
    println!("restored {}x{} -> {}", w, h, a.out.display());
    if let Some(r) = &a.reference {
        let reference: Tensor<f32> = io::load_ppm(r)?;
        // Score what was written, after 8-bit quantisation.
        let written: Tensor<f32> = io::load_ppm(&a.out)?;
        let before = metrics::evaluate(&x, &reference, ChannelMode::Rgb)?;
        let after = metrics::evaluate(&written, &reference, ChannelMode::Rgb)?;
        println!("input    psnr {} dB  ssim {:.6}", db_text(before.psnr), before.ssim);
        println!("restored psnr {} dB  ssim {:.6}", db_text(after.psnr), after.ssim);
    }
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let scope: Scope = a.scope.parse()?;
    if a.list {
        for name in unit_names(scope) {
            println!("{name}");
        }
        return Ok(());
    }
    let opts = SuiteOptions { seed: a.seed, inject_fault: a.inject_fault.clone(), filter: a.filter.clone() };
    let report = run_suite(scope, &opts)?;
    print!("{}", report.to_text());
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report.units.iter().filter(|u| !u.passed).map(|u| u.name.as_str()).collect();
        Err(Failure::Check(format!("gradient check failed: {}", failed.join(", "))))
    }
}

#[derive(Serialize)]
struct ErfReport {
    config_hash: String,
    #[serde(flatten)]
    summary: ErfSummary,
}

pub fn erf(a: ErfArgs) -> CmdResult {
    let stage: Stage = a.stage.parse().map_err(|e: dualformer::Error| Failure::Usage(e.to_string()))?;
    let (model, params) = model_and_weights(&a.model, a.weights.as_deref(), a.seed)?;
    if !model.stages().contains(&stage) {
        return Err(Failure::Usage(format!("stage `{stage}` does not exist in this model")));
    }
    let res = config::resolution(&a.resolution)?;
    let location = match &a.location {
        Some(s) => match config::usize_list(s, "--location")?[..] {
            [h, w] => (h, w),
            _ => return Err(Failure::Usage("--location takes `h,w`".into())),
        },
        None => analysis::erf::stage_center(stage, res),
    };
    let cfg = ErfConfig { probes: a.probes, seed: a.seed, detach_global_gates: !a.no_detach };
    let map = analysis::erf(&model, &params, stage, location, res, &cfg)?;
    io::save_tensor(&a.out, &map.grad_magnitude)?;
    let report = ErfReport { config_hash: model.config.hash(), summary: map.summary() };
    match &a.summary {
        Some(p) => {
            write_json(p, &report)?;
            println!(
                "stage {} support {:.6} ({} px), within analytic bound: {}",
                stage,
                report.summary.support_fraction,
                report.summary.support_pixels,
                report.summary.within_bound.map_or("n/a".to_string(), |b| b.to_string())
            );
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

pub fn sweep(a: SweepArgs) -> CmdResult {
    let cfg = config::model_config(&a.model, "paper")?;
    let sizes = config::usize_list(&a.resolutions, "--resolutions")?;
    let (model, params) = Model::build::<f32>(&cfg, &Rng::new(0))?;
    let report = analysis::sweep(&model, a.time.then_some(&params), &sizes)?;
    print!("{}", report.to_text());
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(())
}

pub fn train(a: TrainArgs, threads: usize) -> CmdResult {
    let cfg = config::apply_train_flags(config::run_config(&a.model, "tiny")?, &a)?;
    if a.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let mut trainer = match &a.resume {
        Some(ck) => Trainer::<f32>::load(cfg.clone(), ck)?,
        None => Trainer::<f32>::new(cfg.clone())?,
    };
    let mut log: Option<BufWriter<File>> = match &a.log {
        Some(p) => {
            let f = if a.resume.is_some() {
                OpenOptions::new().create(true).append(true).open(p)?
            } else {
                File::create(p)?
            };
            Some(BufWriter::new(f))
        }
        None => None,
    };
    let until = a.stop_after.unwrap_or(cfg.train.steps);
    let result = trainer.run_until(until, &mut |r: &StepRecord| {
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    });
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    let records = result?;
    trainer.save(&a.out)?;
    let summary = trainer.summary(&records)?;
    let report = json!({
        "run_hash": summary.run_hash,
        "model_hash": cfg.model.hash(),
        "threads": threads,
        "steps": summary.steps,
        "total_steps": cfg.train.steps,
        "initial_loss": summary.initial_loss,
        "final_loss": summary.final_loss,
        "degraded_psnr": db(summary.degraded_psnr),
        "restored_psnr": db(summary.restored_psnr),
        "gain": summary.gain,
        "checkpoint": a.out.display().to_string(),
    });
    match &a.summary {
        Some(p) => {
            write_json(p, &report)?;
            println!(
                "run {}: {} steps, held-out PSNR {:.3} -> {:.3} dB ({:+.3} dB)",
                summary.run_hash, summary.steps, summary.degraded_psnr, summary.restored_psnr, summary.gain
            );
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    name: String,
    psnr: Value,
    ssim: f64,
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let mode = if a.y { ChannelMode::Y } else { ChannelMode::Rgb };
    let mut names: Vec<String> = fs::read_dir(&a.pred)
        .map_err(|e| Failure::Usage(format!("{}: {e}", a.pred.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".ppm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Failure::Usage(format!("no .ppm files in {}", a.pred.display())));
    }
    let mut rows = Vec::new();
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for name in &names {
        let r = a.reference.join(name);
        if !r.exists() {
            return Err(Failure::Usage(format!("no reference for {name} in {}", a.reference.display())));
        }
        let pred: Tensor<f64> = io::load_ppm(&a.pred.join(name))?;
        let reference: Tensor<f64> = io::load_ppm(&r)?;
        let m = metrics::evaluate(&pred, &reference, mode)?;
        psnr_sum += m.psnr;
        ssim_sum += m.ssim;
        println!("{name:<32}  psnr {:>10}  ssim {:.6}", db_text(m.psnr), m.ssim);
        rows.push(EvalRow { name: name.clone(), psnr: db(m.psnr), ssim: m.ssim });
    }
    let n = names.len() as f64;
    let (mean_psnr, mean_ssim) = (psnr_sum / n, ssim_sum / n);
    let mode_name = if a.y { "y" } else { "rgb" };
    println!("mean ({} images, {mode_name})  psnr {}  ssim {:.6}", names.len(), db_text(mean_psnr), mean_ssim);
    if let Some(out) = &a.out {
        let report = json!({
            "channel_mode": mode,
            "images": names.len(),
            "mean_psnr": db(mean_psnr),
            "mean_ssim": mean_ssim,
            "rows": rows,
        });
        write_json(out, &report)?;
    }
    Ok(())
}
