//! Clause-level BiLSTM-CRF tagger on top of the attention encoder.

pub mod checkpoint;
mod config;
pub mod crf;
mod model;
mod train;

pub use config::{Dropouts, TaggerConfig};
pub use crf::Transitions;
pub use model::{loss_on_tape, windows, TaggerModel, PARAM_NAMES};
pub use train::{evaluate_loss, fit, train, Adam, EarlyStopping, EpochStats, TrainReport, Verdict};
