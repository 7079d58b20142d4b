use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use atok_core::analysis::{LayerSelect, ABLATION_HEADER};
use atok_core::harness::{self, RunConfig, RunDir};
use atok_core::sampler::BENCH_HEADER;
use atok_core::tokenizer::Tokenizer;
use clap::{Args, Parser, Subcommand};

/// Train and evaluate a causally aligned image tokenizer and its autoregressive generator.
///
/// Exit status: 0 on success, 1 on usage errors, 2 when a command fails.
#[derive(Debug, Parser)]
#[command(name = "atok", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run config; the desk preset is used when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Named preset (desk, imagenet-b, imagenet-l, imagenet-xl) used when --config is absent.
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,
    /// Overrides the config seed (the sampling seed for `sample`, the seed list for `ablate`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Defaults to the run directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Directory holding earlier artifacts. Defaults to --out, then to `paths.run_dir` from the config.
    #[arg(long, global = true, value_name = "DIR")]
    run: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic training and eval images as PPM files.
    GenData,
    /// Train the tokenizer: stage 1 (encoder, codebook, causal decoder) or stage 2 (bidirectional decoder).
    TrainTok {
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=2))]
        stage: u32,
    },
    /// Train the generator on the stage-1 token dataset, building `tokens.bin` when absent.
    TrainAr,
    /// Generate images of one class into --out as `class{C}_seed{S}_{i}.ppm`.
    Sample {
        #[arg(long = "class")]
        class_id: usize,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long)]
        temperature: Option<f64>,
        /// Enables classifier-free guidance with this final scale.
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long)]
        scaler_power: Option<f64>,
        /// Recompute the full prefix at every step instead of using the key/value cache.
        #[arg(long)]
        no_kv_cache: bool,
    },
    /// Reconstruction MSE, first-row split and utilization; writes `recon.csv`.
    EvalRecon {
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=2))]
        stage: Option<u32>,
    },
    /// Generator loss and accuracy on the token dataset; writes `eval_acc.csv`.
    EvalAcc,
    /// Local 3x3 decoder attention statistics; writes `attn_stats.csv`.
    AttnStats {
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=2))]
        stage: Option<u32>,
        /// `last`, `all` or comma-separated layer indices.
        #[arg(long, default_value = "last")]
        layer: String,
    },
    /// Train and compare the ablation rows; writes `ablation.csv`.
    Ablate,
    /// Time sampling with and without the cache; writes `bench.csv`.
    BenchCache {
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
    /// Dump codebook vectors and usage; writes `codebook.csv`.
    ExportCodebook {
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=2))]
        stage: Option<u32>,
    },
    /// Print the effective config as TOML.
    ShowConfig,
}

fn parse_layers(s: &str) -> Result<LayerSelect> {
    Ok(match s {
        "last" => LayerSelect::Last,
        "all" => LayerSelect::All,
        _ => LayerSelect::Indices(
            s.split(',')
                .map(|p| p.trim().parse::<usize>().with_context(|| format!("bad layer index {p:?}")))
                .collect::<Result<_>>()?,
        ),
    })
}

fn load_tok(run: &RunDir, stage: Option<u32>) -> Result<Tokenizer<f32>> {
    Ok(match stage {
        None => run.load_latest_tokenizer()?,
        Some(1) => harness::load_tokenizer(&run.tokenizer_stage1())?,
        Some(_) => harness::load_tokenizer(&run.tokenizer_stage2())?,
    })
}

fn write(out: &Path, name: &str, header: &str, rows: Vec<String>) -> Result<()> {
    harness::ensure_dir(out)?;
    let path = out.join(name);
    for r in &rows {
        println!("{r}");
    }
    harness::write_csv(&path, header, rows)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let mut cfg = match (&c.config, &c.preset) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => RunConfig::desk(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
        cfg.sampling.seed = seed;
        cfg.ablation.seeds = vec![seed];
    }
    cfg.validate()?;
    let run_path = c.run.clone().or_else(|| c.out.clone()).unwrap_or_else(|| cfg.paths.run_dir.clone());
    let out = c.out.clone().unwrap_or_else(|| run_path.clone());
    let run = RunDir(run_path.clone());

    match cli.command {
        Command::GenData => {
            let n = harness::gen_data(&cfg, &out)?;
            eprintln!("wrote {n} images to {}", out.display());
        }
        Command::TrainTok { stage: 1 } => {
            let tok = harness::train_tokenizer_stage1(&cfg, &out)?;
            eprintln!("stage-1 tokenizer ({} parameters) saved in {}", tok.params.num_scalars(), out.display());
        }
        Command::TrainTok { .. } => {
            harness::train_tokenizer_stage2(&cfg, &run_path, &out)?;
            eprintln!("stage-2 tokenizer saved in {}", out.display());
        }
        Command::TrainAr => {
            let m = harness::train_generator(&cfg, &run_path, &out)?;
            eprintln!("generator ({} parameters) saved in {}", m.params.num_scalars(), out.display());
        }
        Command::Sample { class_id, n, temperature, cfg_scale, scaler_power, no_kv_cache } => {
            if n == 0 {
                bail!("--n must be positive");
            }
            let mut s = cfg.sampling.clone();
            if let Some(t) = temperature {
                s.temperature = t;
            }
            if let Some(g) = cfg_scale {
                s.use_cfg = true;
                s.guidance_scale = g;
            }
            if let Some(p) = scaler_power {
                s.scaler_power = p;
            }
            s.validate()?;
            let sample_run = c.run.clone().unwrap_or_else(|| cfg.paths.run_dir.clone());
            let dir = c.out.clone().unwrap_or_else(|| sample_run.join("samples"));
            for p in harness::sample_images(&sample_run, class_id, n, &s, !no_kv_cache, &dir)? {
                println!("{}", p.display());
            }
        }
        Command::EvalRecon { stage } => {
            let tok = load_tok(&run, stage)?;
            let r = harness::eval_recon(&cfg, &tok)?;
            write(&out, "recon.csv", harness::RECON_HEADER, vec![r.csv_row()])?;
        }
        Command::EvalAcc => {
            let (loss, acc) = harness::eval_accuracy(&cfg, &run_path)?;
            write(&out, "eval_acc.csv", "loss,accuracy", vec![format!("{loss},{acc}")])?;
        }
        Command::AttnStats { stage, layer } => {
            let select = parse_layers(&layer)?;
            let tok = load_tok(&run, stage)?;
            let r = harness::attn_stats(&cfg, &tok, &select)?;
            write(&out, "attn_stats.csv", harness::ATTN_HEADER, harness::attn_csv_rows(&r))?;
        }
        Command::Ablate => {
            let threads = harness::thread_cap()?;
            let outcome = harness::ablate(&cfg, threads, |msg| eprintln!("{msg}"))?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            for (seed, same) in &outcome.stage2_indices_unchanged {
                if !same {
                    eprintln!("warning: seed {seed}: stage 2 changed encoder indices");
                }
            }
            write(&out, "ablation.csv", ABLATION_HEADER, outcome.rows.iter().map(|r| r.csv_row()).collect())?;
        }
        Command::BenchCache { batch } => {
            if batch == 0 {
                bail!("--batch must be positive");
            }
            let r = harness::bench(&run_path, batch, &cfg.sampling)?;
            if !r.identical {
                bail!("cached and uncached sampling produced different tokens");
            }
            write(&out, "bench.csv", BENCH_HEADER, vec![r.csv_row()])?;
        }
        Command::ExportCodebook { stage } => {
            let tok = load_tok(&run, stage)?;
            let (header, rows) = harness::codebook_csv(&tok);
            harness::ensure_dir(&out)?;
            harness::write_csv(&out.join("codebook.csv"), &header, rows)?;
            eprintln!("wrote {}", out.join("codebook.csv").display());
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
