//! Image tokenizer: patch encoder with prefix and latent tokens, vector quantizer,
//! a causal stage-1 decoder and a bidirectional stage-2 decoder.

mod config;
mod features;
mod model;
mod patch;
mod train;

pub use config::TokConfig;
pub use features::{fixed_feature_loss, FeatureNet};
pub use model::{
    DecodeVars, EncodeVars, EncodedSequence, LossParts, ReconstructionOutput, Stage1Vars, Stage2Vars, Tokenizer, STAGE2_PREFIX,
};
pub use patch::{patchify, patchify_var, unpatchify, unpatchify_var};
pub use train::{encode_all, init_codebook_from_data, train_stage1, train_stage2, TokStepMetrics, TrainOptions, TOK_METRICS_HEADER};
