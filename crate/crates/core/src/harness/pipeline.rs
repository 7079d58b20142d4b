//! The steps behind each CLI subcommand, reading and writing a run directory.

use std::io::Write;
use std::path::{Path, PathBuf};

use atok_autodiff::Tensor;

use super::checkpoint::{load_generator, load_tokenizer, save_generator, save_tokenizer};
use super::config::RunConfig;
use super::ppm::write_ppm;
use super::atomic_write;
use crate::analysis::{ablation_suite, attention_asymmetry, first_row_error, recon_mse, AblationOutcome, AblationPlan, AsymmetryReport, LayerSelect};
use crate::ar::{evaluate, train_ar, ArModel, TokenDataset, TokenSequence, AR_METRICS_HEADER};
use crate::error::{Error, Result};
use crate::sampler::{bench_cache, generate, BenchResult, SamplingConfig};
use crate::tokenizer::{encode_all, train_stage1, train_stage2, Tokenizer, TOK_METRICS_HEADER};
use crate::vq::utilization;

/// File layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn tokenizer_stage1(&self) -> PathBuf {
        self.0.join("tokenizer_stage1.altk")
    }
    pub fn tokenizer_stage2(&self) -> PathBuf {
        self.0.join("tokenizer_stage2.altk")
    }
    pub fn stage1_metrics(&self) -> PathBuf {
        self.0.join("tok_stage1_metrics.csv")
    }
    pub fn stage2_metrics(&self) -> PathBuf {
        self.0.join("tok_stage2_metrics.csv")
    }
    pub fn tokens(&self) -> PathBuf {
        self.0.join("tokens.bin")
    }
    pub fn generator(&self) -> PathBuf {
        self.0.join("generator.altk")
    }
    pub fn generator_metrics(&self) -> PathBuf {
        self.0.join("ar_metrics.csv")
    }

    /// The most trained tokenizer present.
    pub fn load_latest_tokenizer(&self) -> Result<Tokenizer<f32>> {
        let s2 = self.tokenizer_stage2();
        if s2.exists() {
            load_tokenizer(&s2)
        } else {
            load_tokenizer(&self.tokenizer_stage1())
        }
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Write a CSV file atomically: header then one line per row.
pub fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    atomic_write(path, |w| w.write_all(text.as_bytes()))
}

fn check_matches(cfg: &RunConfig, tok: &Tokenizer<f32>, path: &Path) -> Result<()> {
    if tok.cfg != cfg.tokenizer {
        return Err(Error::Config(format!("{} was trained with a different tokenizer config", path.display())));
    }
    Ok(())
}

/// Write the training and eval images as PPM files; returns how many were written.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<usize> {
    let mut n = 0;
    let sets = [("train", cfg.data.train_set::<f32>()?), ("eval", cfg.data.eval_set::<f32>(cfg.eval.images_per_class)?)];
    for (name, set) in sets {
        let dir = out.join(name);
        ensure_dir(&dir)?;
        let per_class = set.len() / cfg.data.classes;
        for (k, (c, img)) in set.iter().enumerate() {
            write_ppm(img, &dir.join(format!("class{c}_{:04}.ppm", k % per_class)))?;
            n += 1;
        }
    }
    Ok(n)
}

fn train_images(cfg: &RunConfig) -> Result<(Vec<usize>, Vec<Tensor<f32>>)> {
    Ok(cfg.data.train_set::<f32>()?.into_iter().unzip())
}

fn eval_images(cfg: &RunConfig) -> Result<Vec<Tensor<f32>>> {
    Ok(cfg.data.eval_set::<f32>(cfg.eval.images_per_class)?.into_iter().map(|t| t.1).collect())
}

pub fn train_tokenizer_stage1(cfg: &RunConfig, out: &Path) -> Result<Tokenizer<f32>> {
    let run = RunDir(out.into());
    ensure_dir(out)?;
    let (_, images) = train_images(cfg)?;
    let mut model = Tokenizer::new(cfg.tokenizer.clone(), cfg.seed)?;
    let log = train_stage1(&mut model, &images, &cfg.stage1, cfg.seed, |_| {})?;
    write_csv(&run.stage1_metrics(), TOK_METRICS_HEADER, log.iter().map(|m| m.csv_row()))?;
    save_tokenizer(&model, &run.tokenizer_stage1())?;
    Ok(model)
}

/// Stage 2 on top of `<from>/tokenizer_stage1.altk`, written to `out`.
pub fn train_tokenizer_stage2(cfg: &RunConfig, from: &Path, out: &Path) -> Result<Tokenizer<f32>> {
    let src = RunDir(from.into()).tokenizer_stage1();
    if !src.exists() {
        return Err(Error::MissingCheckpoint(format!("stage 2 needs a stage-1 tokenizer at {}; run `train-tok --stage 1` first", src.display())));
    }
    let mut model = load_tokenizer::<f32>(&src)?;
    check_matches(cfg, &model, &src)?;
    let run = RunDir(out.into());
    ensure_dir(out)?;
    let (_, images) = train_images(cfg)?;
    let log = train_stage2(&mut model, &images, &cfg.stage2, cfg.seed, |_| {})?;
    write_csv(&run.stage2_metrics(), TOK_METRICS_HEADER, log.iter().map(|m| m.csv_row()))?;
    save_tokenizer(&model, &run.tokenizer_stage2())?;
    Ok(model)
}

/// Token dataset of the training set, cached at `<dir>/tokens.bin`.
pub fn token_dataset(cfg: &RunConfig, from: &Path, out: &Path) -> Result<TokenDataset> {
    let cached = RunDir(out.into()).tokens();
    if cached.exists() {
        let data = TokenDataset::load(&cached)?;
        let ar = cfg.ar_config();
        if data.seq_len != ar.seq_len() || data.vocab != ar.vocab || data.classes != ar.classes {
            return Err(Error::Config(format!("{} does not match the configured token layout", cached.display())));
        }
        return Ok(data);
    }
    let src = RunDir(from.into()).tokenizer_stage1();
    let tok = load_tokenizer::<f32>(&src)?;
    check_matches(cfg, &tok, &src)?;
    let (labels, images) = train_images(cfg)?;
    let records = encode_all(&tok, &images)?
        .into_iter()
        .zip(labels)
        .map(|(tokens, class_id)| TokenSequence { class_id, tokens })
        .collect();
    let data = TokenDataset::new(tok.cfg.seq_len(), tok.cfg.codebook_size, cfg.data.classes, records)?;
    ensure_dir(out)?;
    data.save(&cached)?;
    Ok(data)
}

pub fn train_generator(cfg: &RunConfig, from: &Path, out: &Path) -> Result<ArModel<f32>> {
    let data = token_dataset(cfg, from, out)?;
    let run = RunDir(out.into());
    let mut model = ArModel::new(cfg.ar_config(), cfg.seed)?;
    let log = train_ar(&mut model, &data, &cfg.generator_train, cfg.seed, |_| {})?;
    write_csv(&run.generator_metrics(), AR_METRICS_HEADER, log.iter().map(|m| m.csv_row()))?;
    save_generator(&model, &run.generator())?;
    Ok(model)
}

/// Sample `n` images of one class and write `class{c}_seed{s}_{i:03}.ppm` into `out`.
pub fn sample_images(from: &Path, class_id: usize, n: usize, sampling: &SamplingConfig, use_cache: bool, out: &Path) -> Result<Vec<PathBuf>> {
    let run = RunDir(from.into());
    let generator = load_generator::<f32>(&run.generator())?;
    let tok = run.load_latest_tokenizer()?;
    if class_id >= generator.cfg.classes {
        return Err(Error::InvalidArgument(format!("class {class_id} out of range for {} classes", generator.cfg.classes)));
    }
    if generator.cfg.vocab != tok.cfg.codebook_size || generator.cfg.seq_len() != tok.cfg.seq_len() {
        return Err(Error::Config("generator and tokenizer token layouts differ".into()));
    }
    let seqs = generate(&generator, &vec![class_id; n], sampling, sampling.seed, use_cache)?;
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.tokens.as_slice()).collect();
    let images = tok.decode_indices(&refs)?;
    ensure_dir(out)?;
    let mut paths = Vec::with_capacity(n);
    for (i, r) in images.iter().enumerate() {
        let p = out.join(format!("class{class_id}_seed{}_{i:03}.ppm", sampling.seed));
        write_ppm(&r.image, &p)?;
        paths.push(p);
    }
    Ok(paths)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconReport {
    pub stage: u32,
    pub recon_mse: f64,
    pub first_row_mse: f64,
    pub rest_mse: f64,
    pub utilization: f64,
}

pub const RECON_HEADER: &str = "stage,recon_mse,first_row_mse,rest_mse,utilization";

impl ReconReport {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.stage, self.recon_mse, self.first_row_mse, self.rest_mse, self.utilization)
    }
}

/// Reconstruction error on the eval split; utilization over the training set.
pub fn eval_recon(cfg: &RunConfig, tok: &Tokenizer<f32>) -> Result<ReconReport> {
    let eval = eval_images(cfg)?;
    let refs: Vec<&Tensor<f32>> = eval.iter().collect();
    let mut recs = Vec::with_capacity(eval.len());
    for chunk in refs.chunks(32) {
        recs.extend(tok.reconstruct(chunk)?);
    }
    let (first_row_mse, rest_mse) = first_row_error(&recs, &eval, tok.cfg.patch)?;
    let (_, train) = train_images(cfg)?;
    let codes: Vec<usize> = encode_all(tok, &train)?.into_iter().flatten().collect();
    Ok(ReconReport {
        stage: tok.stage,
        recon_mse: recon_mse(&recs, &eval)?,
        first_row_mse,
        rest_mse,
        utilization: utilization(tok.cfg.codebook_size, &codes),
    })
}

/// Generator loss and accuracy over the cached token dataset.
pub fn eval_accuracy(cfg: &RunConfig, from: &Path) -> Result<(f64, f64)> {
    let run = RunDir(from.into());
    let model = load_generator::<f32>(&run.generator())?;
    let data = token_dataset(cfg, from, from)?;
    evaluate(&model, &data)
}

pub fn attn_stats(cfg: &RunConfig, tok: &Tokenizer<f32>, select: &LayerSelect) -> Result<AsymmetryReport> {
    let eval = eval_images(cfg)?;
    let refs: Vec<&Tensor<f32>> = eval.iter().collect();
    let (maps, offset) = tok.decoder_attention(&refs)?;
    attention_asymmetry(&maps, offset, tok.cfg.grid_h(), tok.cfg.grid_w(), select)
}

pub const ATTN_HEADER: &str = "kind,dr,dc,value";

pub fn attn_csv_rows(r: &AsymmetryReport) -> Vec<String> {
    let mut rows = Vec::with_capacity(10);
    for (i, row) in r.mean.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            rows.push(format!("mass,{},{},{v}", i as i64 - 1, j as i64 - 1));
        }
    }
    rows.push(format!("causal_share,,,{}", r.causal_share));
    rows
}

pub const CODEBOOK_HEADER_PREFIX: &str = "index,usage";

/// `index,usage,v0,...` for every code.
pub fn codebook_csv(tok: &Tokenizer<f32>) -> (String, Vec<String>) {
    let d = tok.cfg.code_dim;
    let header = std::iter::once(CODEBOOK_HEADER_PREFIX.to_string()).chain((0..d).map(|i| format!("v{i}"))).collect::<Vec<_>>().join(",");
    let vectors = tok.codebook().data();
    let rows = (0..tok.cfg.codebook_size)
        .map(|k| {
            let v: Vec<String> = vectors[k * d..(k + 1) * d].iter().map(|x| x.to_string()).collect();
            format!("{k},{},{}", tok.usage_ema[k], v.join(","))
        })
        .collect();
    (header, rows)
}

pub fn bench(from: &Path, batch: usize, sampling: &SamplingConfig) -> Result<BenchResult> {
    let model = load_generator::<f32>(&RunDir(from.into()).generator())?;
    bench_cache(&model, batch, sampling, sampling.seed)
}

/// Run the ablation with seeds split across up to `threads` workers; rows come back in seed order.
pub fn ablate(cfg: &RunConfig, threads: usize, progress: impl Fn(&str) + Sync) -> Result<AblationOutcome> {
    let plans: Vec<AblationPlan> = cfg.ablation.seeds.iter().map(|&s| AblationPlan { seeds: vec![s], ..cfg.ablation.clone() }).collect();
    let run = |plan: &AblationPlan| ablation_suite(&cfg.data, &cfg.tokenizer, &cfg.generator.blocks, plan, &progress);
    let mut results = Vec::with_capacity(plans.len());
    for group in plans.chunks(threads.max(1)) {
        if group.len() == 1 {
            results.push(run(&group[0]));
            continue;
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = group.iter().map(|p| s.spawn(|| run(p))).collect();
            results.extend(handles.into_iter().map(|h| h.join().expect("ablation worker panicked")));
        });
    }
    let mut out = AblationOutcome::default();
    for r in results {
        let r = r?;
        out.rows.extend(r.rows);
        out.stage2_indices_unchanged.extend(r.stage2_indices_unchanged);
        out.warnings.extend(r.warnings);
    }
    Ok(out)
}
