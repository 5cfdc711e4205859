use std::fs;

use dualformer::training::{DegradeSpec, RunConfig};
use dualformer::ModelConfig;

use crate::args::{ModelArgs, TrainArgs};
use crate::Failure;

/// Run config from `--config` or `--preset`. A model-only file gets default
/// training settings.
pub fn run_config(args: &ModelArgs, default_preset: &str) -> Result<RunConfig, Failure> {
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        let parsed = if value.get("model").is_some() {
            RunConfig::from_json(&text)
        } else {
            ModelConfig::from_json(&text).map(|model| RunConfig { model, ..RunConfig::toy() })
        };
        return parsed.map_err(|e| Failure::Usage(format!("{}: {e}", path.display())));
    }
    let name = args.preset.as_deref().unwrap_or(default_preset);
    Ok(RunConfig { model: ModelConfig::preset(name)?, ..RunConfig::toy() })
}

pub fn model_config(args: &ModelArgs, default_preset: &str) -> Result<ModelConfig, Failure> {
    Ok(run_config(args, default_preset)?.model)
}

/// `S` or `HxW`.
pub fn resolution(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::Usage(format!("resolution `{s}` is not `S` or `HxW`"));
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let nums: Vec<usize> = parts.iter().map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
    match nums[..] {
        [n] => Ok((n, n)),
        [h, w] => Ok((h, w)),
        _ => Err(bad()),
    }
}

pub fn usize_list(s: &str, what: &str) -> Result<Vec<usize>, Failure> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| Failure::Usage(format!("{what}: `{p}` is not a non-negative integer"))))
        .collect()
}

/// Applies every training flag on top of `c`.
pub fn apply_train_flags(mut c: RunConfig, a: &TrainArgs) -> Result<RunConfig, Failure> {
    let t = &mut c.train;
    macro_rules! set {
        ($($flag:ident => $field:expr),* $(,)?) => {
            $(if let Some(v) = a.$flag { $field = v; })*
        };
    }
    set!(
        steps => t.steps,
        batch => t.batch,
        patch => t.patch,
        lr0 => t.lr0,
        lr_min => t.lr_min,
        cycles => t.cycles,
        eval_every => t.eval_every,
        heldout => t.heldout,
        seed => c.seed,
        lambda_psnr => c.model.loss_lambda[0],
        lambda_perceptual => c.model.loss_lambda[1],
        extractor_seed => c.perceptual.extractor_seed,
    );
    if a.no_augment {
        c.train.augment = false;
    }
    if let Some(l) = &a.perceptual_layers {
        c.perceptual.layers = usize_list(l, "--perceptual-layers")?;
    }
    c.degrade = degrade(c.degrade, a)?;
    c.validate()?;
    Ok(c)
}

fn degrade(current: DegradeSpec, a: &TrainArgs) -> Result<DegradeSpec, Failure> {
    let mut d = match &a.degrade {
        Some(kind) => DegradeSpec::preset(kind)?,
        None => current,
    };
    let kind = d.kind();
    let mismatch = |flag: &str| Failure::Usage(format!("--{flag} does not apply to the `{kind}` degradation"));
    let given = |name: &'static str, set: bool| if set { Some(name) } else { None };
    match &mut d {
        DegradeSpec::Noise { sigma } => {
            if let Some(v) = a.sigma {
                *sigma = v;
            }
        }
        DegradeSpec::Rain { count, length, angle_deg, intensity } => {
            if let Some(v) = a.rain_count {
                *count = v;
            }
            if let Some(v) = a.rain_length {
                *length = v;
            }
            if let Some(v) = a.rain_angle {
                *angle_deg = v;
            }
            if let Some(v) = a.rain_intensity {
                *intensity = v;
            }
        }
        DegradeSpec::Haze { transmission, airlight } => {
            if let Some(v) = a.haze_transmission {
                *transmission = v;
            }
            if let Some(v) = a.haze_airlight {
                *airlight = v;
            }
        }
        DegradeSpec::Snow { density, radius, intensity } => {
            if let Some(v) = a.snow_density {
                *density = v;
            }
            if let Some(v) = a.snow_radius {
                *radius = v;
            }
            if let Some(v) = a.snow_intensity {
                *intensity = v;
            }
        }
    }
    let flags = [
        ("noise", given("sigma", a.sigma.is_some())),
        ("rain", given("rain-count", a.rain_count.is_some())),
        ("rain", given("rain-length", a.rain_length.is_some())),
        ("rain", given("rain-angle", a.rain_angle.is_some())),
        ("rain", given("rain-intensity", a.rain_intensity.is_some())),
        ("haze", given("haze-transmission", a.haze_transmission.is_some())),
        ("haze", given("haze-airlight", a.haze_airlight.is_some())),
        ("snow", given("snow-density", a.snow_density.is_some())),
        ("snow", given("snow-radius", a.snow_radius.is_some())),
        ("snow", given("snow-intensity", a.snow_intensity.is_some())),
    ];
    if let Some((_, Some(flag))) = flags.iter().find(|(k, f)| f.is_some() && *k != kind) {
        return Err(mismatch(flag));
    }
    Ok(d)
}
