//! Decoder attention statistics, reconstruction metrics and the ablation driver.

mod ablation;
mod asymmetry;
mod recon;

pub use ablation::{ablation_suite, config_diff, row_config, AblationLabel, AblationOutcome, AblationPlan, AblationRow, ABLATION_HEADER};
pub use asymmetry::{attention_asymmetry, causal_share, AsymmetryReport, Grid3, LayerSelect};
pub use recon::{first_row_error, recon_mse};
