//! Run configuration and the training loop.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{make_batch, DegradeSpec};
use super::loss::{Loss, LossConfig, PerceptualSpec, RandomPyramid};
use super::optim::{Adam, Schedule};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::io::{self, OptimizerState};
use crate::metrics;
use crate::model::{Model, ModelConfig};
use crate::params::{Ctx, ParamStore, ParamVars};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch: usize,
    /// Square patch side; a multiple of 16.
    pub patch: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub cycles: usize,
    /// Held-out PSNR is logged every `eval_every` steps; 0 disables it.
    pub eval_every: usize,
    /// Number of held-out pairs.
    pub heldout: usize,
    pub augment: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            steps: 200,
            batch: 8,
            patch: 32,
            lr0: 2e-3,
            lr_min: 1e-6,
            cycles: 1,
            eval_every: 50,
            heldout: 16,
            augment: true,
        }
    }
}

impl TrainSettings {
    pub fn schedule(&self) -> Schedule {
        Schedule { lr0: self.lr0, lr_min: self.lr_min, cycles: self.cycles }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub perceptual: PerceptualSpec,
    #[serde(default)]
    pub degrade: DegradeSpec,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    /// Tiny model on Gaussian noise.
    pub fn toy() -> Self {
        RunConfig {
            model: ModelConfig::tiny(),
            perceptual: PerceptualSpec::default(),
            degrade: DegradeSpec::default(),
            train: TrainSettings::default(),
            seed: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("run config serializes")
    }

    pub fn hash(&self) -> String {
        crate::model::digest_hex(self.canonical_json().as_bytes())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig::new(&self.model, self.perceptual.clone())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.degrade.validate()?;
        self.loss_config().validate()?;
        if self.loss_config().lambda_perceptual > 0.0 {
            let stages = RandomPyramid::<f32>::WIDTHS.len();
            let p = &self.perceptual.layers;
            if p.is_empty() || p.iter().any(|&l| l >= stages) {
                return Err(Error::config(format!(
                    "perceptual layers {p:?} must be a non-empty subset of 0..{stages}"
                )));
            }
        }
        let t = &self.train;
        t.schedule().validate()?;
        if t.batch == 0 || t.heldout == 0 {
            return Err(Error::config("batch and heldout must be positive"));
        }
        if t.patch == 0 || !t.patch.is_multiple_of(crate::model::LATENT_STRIDE) {
            return Err(Error::config(format!("patch {} must be a positive multiple of 16", t.patch)));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Number of completed steps.
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub psnr_loss: f64,
    pub perceptual: f64,
    /// Held-out PSNR of the restored images, on evaluation steps.
    #[serde(rename = "psnr", skip_serializing_if = "Option::is_none", default)]
    pub heldout_psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub run_hash: String,
    pub steps: usize,
    /// Mean training loss over the first logged step.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub degraded_psnr: f64,
    pub restored_psnr: f64,
    pub gain: f64,
}

/// Sidecar file holding the optimizer state for `checkpoint`.
pub fn optimizer_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".adam");
    PathBuf::from(s)
}

pub struct Trainer<T: Scalar> {
    pub config: RunConfig,
    pub model: Model,
    pub params: ParamStore<T>,
    pub adam: Adam<T>,
    loss: Loss<T>,
    root: Rng,
    heldout: (Tensor<T>, Tensor<T>),
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(config.seed);
        let (model, params) = Model::build::<T>(&config.model, &root)?;
        let adam = Adam::new(&params);
        Self::assemble(config, model, params, adam, root)
    }

    /// Continues a run from a checkpoint and its optimizer sidecar.
    pub fn resume(config: RunConfig, params: ParamStore<T>, state: OptimizerState<T>) -> Result<Self> {
        config.validate()?;
        if state.run_hash != config.hash() {
            return Err(Error::config(format!(
                "optimizer state belongs to run {}, not {}",
                state.run_hash,
                config.hash()
            )));
        }
        let root = Rng::new(config.seed);
        let (model, fresh) = Model::build::<T>(&config.model, &root)?;
        if fresh.names() != params.names() || state.m.len() != params.len() || state.v.len() != params.len() {
            return Err(Error::config("checkpoint does not match the run's model"));
        }
        for (a, b) in fresh.tensors().iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::config("checkpoint does not match the run's model"));
            }
        }
        let mut adam = Adam::new(&params);
        adam.step = state.step;
        adam.m = state.m;
        adam.v = state.v;
        Self::assemble(config, model, params, adam, root)
    }

    pub fn load(config: RunConfig, checkpoint: &Path) -> Result<Self> {
        let (_, params) = io::load_checkpoint::<T>(checkpoint)?;
        let state = io::decode_optimizer(&fs::read(optimizer_path(checkpoint))?)?;
        Self::resume(config, params, state)
    }

    fn assemble(config: RunConfig, model: Model, params: ParamStore<T>, adam: Adam<T>, root: Rng) -> Result<Self> {
        let loss = Loss::new(config.loss_config())?;
        let t = &config.train;
        let heldout = make_batch(t.heldout, t.patch, &config.degrade, &root.split("heldout"), false)?;
        Ok(Trainer { config, model, params, adam, loss, root, heldout })
    }

    /// Completed steps.
    pub fn step_index(&self) -> usize {
        self.adam.step as usize
    }

    /// Runs one optimizer step and returns its log record.
    pub fn step(&mut self) -> Result<StepRecord> {
        let s = self.step_index();
        let t = &self.config.train;
        let lr = t.schedule().lr(s, t.steps);
        let (clean, degraded) = make_batch::<T>(
            t.batch,
            t.patch,
            &self.config.degrade,
            &self.root.split_index("batch", s as u64),
            t.augment,
        )?;
        let diverged = |e: Error| match e {
            Error::NonFinite { op } => Error::Diverged { step: s + 1, msg: format!("non-finite {op}") },
            e => e,
        };
        let tape = Tape::new();
        let pv = ParamVars::tracked(&self.params, &tape);
        let (loss, parts) = self
            .model
            .forward(&Ctx::new(&tape, &pv), &Var::constant(degraded))
            .and_then(|pred| self.loss.compute(&tape, &pred, &clean))
            .map_err(diverged)?;
        if !parts.total.is_finite() {
            return Err(Error::Diverged { step: s + 1, msg: format!("loss is {}", parts.total) });
        }
        let grads = tape.backward(&loss).and_then(|g| pv.grads(&g)).map_err(diverged)?;
        self.adam.update(&mut self.params, &grads, lr).map_err(diverged)?;
        if self.params.tensors().iter().any(|p| !p.all_finite()) {
            return Err(Error::Diverged { step: s + 1, msg: "parameters became non-finite".into() });
        }
        let mut rec = StepRecord {
            step: s + 1,
            lr,
            loss: parts.total,
            psnr_loss: parts.psnr,
            perceptual: parts.perceptual,
            heldout_psnr: None,
        };
        if t.eval_every > 0 && (s + 1).is_multiple_of(t.eval_every) {
            rec.heldout_psnr = Some(self.evaluate()?.1);
        }
        Ok(rec)
    }

    /// Mean per-image PSNR of the degraded and restored held-out sets.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        let (clean, degraded) = &self.heldout;
        let restored = self.model.infer(&self.params, degraded)?.map(|v| v.max(T::zero()).min(T::one()));
        let n = clean.shape().n();
        let (mut before, mut after) = (0.0, 0.0);
        for i in 0..n {
            let c = clean.batch_item(i);
            before += metrics::psnr(&degraded.batch_item(i), &c, 1.0)?;
            after += metrics::psnr(&restored.batch_item(i), &c, 1.0)?;
        }
        Ok((before / n as f64, after / n as f64))
    }

    /// Steps until `until` steps are complete (capped at the configured total),
    /// passing each record to `log`.
    pub fn run_until(
        &mut self,
        until: usize,
        log: &mut dyn FnMut(&StepRecord) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        let until = until.min(self.config.train.steps);
        let mut records = Vec::new();
        while self.step_index() < until {
            let rec = self.step()?;
            log(&rec)?;
            records.push(rec);
        }
        Ok(records)
    }

    pub fn save(&self, checkpoint: &Path) -> Result<()> {
        io::save_checkpoint(checkpoint, &self.config.model, &self.params)?;
        let state = OptimizerState {
            run_hash: self.config.hash(),
            step: self.adam.step,
            m: self.adam.m.clone(),
            v: self.adam.v.clone(),
        };
        fs::write(optimizer_path(checkpoint), io::encode_optimizer(&state)?)?;
        Ok(())
    }

    pub fn summary(&self, records: &[StepRecord]) -> Result<TrainSummary> {
        let (degraded_psnr, restored_psnr) = self.evaluate()?;
        let nan = f64::NAN;
        Ok(TrainSummary {
            run_hash: self.config.hash(),
            steps: self.step_index(),
            initial_loss: records.first().map_or(nan, |r| r.loss),
            final_loss: records.last().map_or(nan, |r| r.loss),
            degraded_psnr,
            restored_psnr,
            gain: restored_psnr - degraded_psnr,
        })
    }
}
