//! Synthetic-data training: degradations, losses, Adam and the run loop.

pub mod data;
pub mod loss;
pub mod optim;
pub mod run;

pub use data::{degrade, make_batch, procedural_image, DegradeSpec};
pub use loss::{FeatureExtractor, Loss, LossConfig, LossParts, PerceptualSpec, RandomPyramid};
pub use optim::{Adam, Schedule};
pub use run::{optimizer_path, RunConfig, StepRecord, TrainSettings, TrainSummary, Trainer};
