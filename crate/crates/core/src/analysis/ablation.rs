use std::fmt;
use std::str::FromStr;

use atok_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use super::asymmetry::{attention_asymmetry, LayerSelect};
use super::recon::{first_row_error, recon_mse};
use crate::ar::{train_ar, ArConfig, ArModel, TokenDataset, TokenSequence};
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::nn::{AttentionMaskKind, BlockConfig};
use crate::optim::AdamConfig;
use crate::tokenizer::{encode_all, train_stage1, train_stage2, TokConfig, Tokenizer, TrainOptions};
use crate::vq::utilization;

/// Tokenizer variants compared by the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AblationLabel {
    /// Bidirectional decoder, no prefix tokens.
    A,
    /// Causal decoder.
    B,
    /// Causal decoder with prefix tokens.
    C,
    /// Causal decoder, prefix tokens and first-row auxiliary loss.
    D,
    /// D followed by a stage-2 bidirectional decoder.
    F,
}

impl AblationLabel {
    pub const ALL: [AblationLabel; 5] = [Self::A, Self::B, Self::C, Self::D, Self::F];

    pub fn description(self) -> &'static str {
        match self {
            Self::A => "bidirectional decoder",
            Self::B => "+ causal decoder",
            Self::C => "+ prefix tokens",
            Self::D => "+ first-row auxiliary loss",
            Self::F => "+ stage-2 decoder",
        }
    }

    /// The label whose stage-1 tokenizer this row uses.
    fn stage1(self) -> Self {
        if self == Self::F {
            Self::D
        } else {
            self
        }
    }
}

impl fmt::Display for AblationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for AblationLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation row {s:?}")))
    }
}

/// Stage-1 tokenizer configuration of an ablation row, derived from `base`.
pub fn row_config(base: &TokConfig, label: AblationLabel) -> TokConfig {
    let (prefix, aux_loss, decoder_mask) = match label.stage1() {
        AblationLabel::A => (false, false, AttentionMaskKind::Bidirectional),
        AblationLabel::B => (false, false, AttentionMaskKind::Causal),
        AblationLabel::C => (true, false, AttentionMaskKind::Causal),
        _ => (true, true, AttentionMaskKind::Causal),
    };
    TokConfig { prefix, aux_loss, decoder_mask, ..base.clone() }
}

/// Names of the top-level fields on which two tokenizer configurations differ.
pub fn config_diff(a: &TokConfig, b: &TokConfig) -> Result<Vec<String>> {
    let to_table = |c: &TokConfig| -> Result<toml::Table> {
        toml::Table::try_from(c).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    };
    let (ta, tb) = (to_table(a)?, to_table(b)?);
    let mut keys: Vec<&String> = ta.keys().chain(tb.keys()).collect();
    keys.sort();
    keys.dedup();
    Ok(keys.into_iter().filter(|k| ta.get(*k) != tb.get(*k)).cloned().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPlan {
    pub labels: Vec<AblationLabel>,
    pub seeds: Vec<u64>,
    pub tokenizer: TrainOptions,
    pub stage2: TrainOptions,
    pub generator: TrainOptions,
    /// Held-out images per class for reconstruction and attention statistics.
    pub eval_per_class: usize,
}

impl AblationPlan {
    /// Matched desk budget: 3k tokenizer steps, 5k generator steps, three seeds.
    pub fn desk() -> Self {
        let tok_opt = AdamConfig { min_lr: 1e-4, grad_clip: Some(1.0), ..AdamConfig::new(1e-3) };
        Self {
            labels: AblationLabel::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            tokenizer: TrainOptions { steps: 3000, batch: 4, optimizer: tok_opt.clone() },
            stage2: TrainOptions { steps: 3000, batch: 4, optimizer: tok_opt.clone() },
            generator: TrainOptions { steps: 5000, batch: 8, optimizer: tok_opt },
            eval_per_class: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() || self.seeds.is_empty() || self.eval_per_class == 0 {
            return Err(Error::Config("ablation needs labels, seeds and eval images".into()));
        }
        let mut l = self.labels.clone();
        l.sort();
        l.dedup();
        if l.len() != self.labels.len() {
            return Err(Error::Config("ablation labels must be unique".into()));
        }
        self.tokenizer.validate()?;
        self.stage2.validate()?;
        self.generator.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationRow {
    pub label: AblationLabel,
    pub seed: u64,
    /// Mean generator training loss and accuracy over the final 10% of steps.
    pub ar_loss: f64,
    pub ar_accuracy: f64,
    pub recon_mse: f64,
    pub first_row_mse: f64,
    pub rest_mse: f64,
    /// Distinct codes used when encoding the training set, over the codebook size.
    pub utilization: f64,
    /// Raster-causal share of the final decoder layer's local attention on the eval images.
    pub causal_share: f64,
}

pub const ABLATION_HEADER: &str = "label,seed,ar_loss,ar_accuracy,recon_mse,first_row_mse,rest_mse,utilization,causal_share";

impl AblationRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.label,
            self.seed,
            self.ar_loss,
            self.ar_accuracy,
            self.recon_mse,
            self.first_row_mse,
            self.rest_mse,
            self.utilization,
            self.causal_share
        )
    }

    fn finite(&self) -> bool {
        [self.ar_loss, self.ar_accuracy, self.recon_mse, self.first_row_mse, self.rest_mse, self.utilization, self.causal_share]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, Default)]
pub struct AblationOutcome {
    /// Ordered by seed, then label.
    pub rows: Vec<AblationRow>,
    /// Per seed: eval-set indices identical before and after stage-2 training.
    pub stage2_indices_unchanged: Vec<(u64, bool)>,
    /// Runs whose budget looked too small to separate the rows.
    pub warnings: Vec<String>,
}

impl AblationOutcome {
    pub fn get(&self, label: AblationLabel, seed: u64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label && r.seed == seed)
    }
}

struct TokRun {
    model: Tokenizer<f32>,
    codes: Vec<Vec<usize>>,
}

fn tail_mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    let skip = n - (n / 10).max(1);
    let tail: Vec<f64> = xs.skip(skip).collect();
    tail.iter().sum::<f64>() / tail.len() as f64
}

fn measure(model: &Tokenizer<f32>, eval: &[Tensor<f32>], codes: &[Vec<usize>]) -> Result<(f64, f64, f64, f64, f64)> {
    let refs: Vec<&Tensor<f32>> = eval.iter().collect();
    let recs = model.reconstruct(&refs)?;
    let mse = recon_mse(&recs, eval)?;
    let (row1, rest) = first_row_error(&recs, eval, model.cfg.patch)?;
    let flat: Vec<usize> = codes.iter().flatten().copied().collect();
    let util = utilization(model.cfg.codebook_size, &flat);
    let (maps, offset) = model.decoder_attention(&refs)?;
    let share = attention_asymmetry(&maps, offset, model.cfg.grid_h(), model.cfg.grid_w(), &LayerSelect::Last)?.causal_share;
    Ok((mse, row1, rest, util, share))
}

/// Train every requested row under one budget per seed and collect its metrics.
pub fn ablation_suite(
    spec: &SyntheticSpec,
    base: &TokConfig,
    ar_blocks: &[BlockConfig],
    plan: &AblationPlan,
    mut progress: impl FnMut(&str),
) -> Result<AblationOutcome> {
    plan.validate()?;
    spec.validate()?;
    let train: Vec<(usize, Tensor<f32>)> = spec.train_set()?;
    let labels: Vec<usize> = train.iter().map(|t| t.0).collect();
    let images: Vec<Tensor<f32>> = train.into_iter().map(|t| t.1).collect();
    let eval: Vec<Tensor<f32>> = spec.eval_set(plan.eval_per_class)?.into_iter().map(|t| t.1).collect();

    let mut wanted = plan.labels.clone();
    wanted.sort();
    let mut out = AblationOutcome::default();
    for &seed in &plan.seeds {
        let mut runs: Vec<(AblationLabel, TokRun)> = Vec::new();
        let mut ar_cache: Vec<(AblationLabel, (f64, f64))> = Vec::new();
        for &label in &wanted {
            let s1 = label.stage1();
            if !runs.iter().any(|(l, _)| *l == s1) {
                progress(&format!("seed {seed}: tokenizer {s1} stage 1"));
                let mut model = Tokenizer::<f32>::new(row_config(base, s1), seed)?;
                train_stage1(&mut model, &images, &plan.tokenizer, seed, |_| {})?;
                let codes = encode_all(&model, &images)?;
                runs.push((s1, TokRun { model, codes }));
            }
            let run = &runs.iter().find(|(l, _)| *l == s1).expect("trained above").1;

            let (ar_loss, ar_accuracy) = match ar_cache.iter().find(|(l, _)| *l == s1) {
                Some((_, v)) => *v,
                None => {
                    progress(&format!("seed {seed}: generator on {s1} tokens"));
                    let records = run.codes.iter().zip(&labels).map(|(t, &c)| TokenSequence { class_id: c, tokens: t.clone() }).collect();
                    let cfg = &run.model.cfg;
                    let data = TokenDataset::new(cfg.seq_len(), cfg.codebook_size, spec.classes, records)?;
                    let mut ar = ArModel::<f32>::new(ArConfig::for_tokenizer(cfg, spec.classes, ar_blocks.to_vec()), seed)?;
                    let log = train_ar(&mut ar, &data, &plan.generator, seed, |_| {})?;
                    let v = (tail_mean(log.iter().map(|m| m.loss)), tail_mean(log.iter().map(|m| m.accuracy)));
                    ar_cache.push((s1, v));
                    v
                }
            };

            let (recon, row1, rest, util, share) = if label == AblationLabel::F {
                progress(&format!("seed {seed}: tokenizer F stage 2"));
                let mut model = run.model.clone();
                let eval_refs: Vec<&Tensor<f32>> = eval.iter().collect();
                let before: Vec<Vec<usize>> = model.encode_batch(&eval_refs)?.into_iter().map(|e| e.indices).collect();
                train_stage2(&mut model, &images, &plan.stage2, seed, |_| {})?;
                let after: Vec<Vec<usize>> = model.encode_batch(&eval_refs)?.into_iter().map(|e| e.indices).collect();
                out.stage2_indices_unchanged.push((seed, before == after));
                measure(&model, &eval, &run.codes)?
            } else {
                measure(&run.model, &eval, &run.codes)?
            };
            let row = AblationRow {
                label,
                seed,
                ar_loss,
                ar_accuracy,
                recon_mse: recon,
                first_row_mse: row1,
                rest_mse: rest,
                utilization: util,
                causal_share: share,
            };
            if !row.finite() {
                return Err(Error::NonFiniteLoss { step: 0, detail: format!("ablation row {label} seed {seed}: {row:?}") });
            }
            let chance = 1.0 / base.codebook_size as f64;
            if row.ar_accuracy < 2.0 * chance || row.utilization < 0.5 {
                out.warnings.push(format!(
                    "row {label} seed {seed}: accuracy {:.4} / utilization {:.3} suggest the budget is too small",
                    row.ar_accuracy, row.utilization
                ));
            }
            out.rows.push(row);
        }
    }
    Ok(out)
}
