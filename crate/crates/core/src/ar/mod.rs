//! Class-conditioned autoregressive generator over image tokens.

mod config;
mod dataset;
mod model;
mod train;

pub use config::ArConfig;
pub use dataset::TokenDataset;
pub use model::{accuracy, argmax, ArModel, TokenSequence};
pub use train::{ar_train_step, drop_classes, evaluate, train_ar, ArStepMetrics, AR_METRICS_HEADER};
