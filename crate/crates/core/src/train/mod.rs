//! Mini-batch training, evaluation and the baseline/A/B/C/D ablation ladder.

pub mod adam;
pub mod optim;

pub use adam::{adam_step, AdamState};
pub use optim::{BatchStream, LossTerms, Trainer};
pub mod config;
pub mod run;

pub use config::{DataConfig, Mode, Preset, TrainConfig};
pub use run::{evaluate, train, RunReport, TrainOutput};
