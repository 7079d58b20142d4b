//! Files, formats and configuration around the models.

mod checkpoint;
mod config;
mod fsutil;
mod pipeline;
mod ppm;

pub use checkpoint::{
    generator_checkpoint, load_generator, load_tokenizer, save_generator, save_tokenizer, tokenizer_checkpoint, Checkpoint, StoredTensor, MAGIC,
    VERSION,
};
pub use config::{thread_cap, EvalSettings, GeneratorSettings, Paths, RunConfig, CONFIG_VERSION, PRESETS};
pub use fsutil::atomic_write;
pub use pipeline::{
    ablate, attn_csv_rows, attn_stats, bench, codebook_csv, ensure_dir, eval_accuracy, eval_recon, gen_data, sample_images, token_dataset,
    train_generator, train_tokenizer_stage1, train_tokenizer_stage2, write_csv, ReconReport, RunDir, ATTN_HEADER, RECON_HEADER,
};
pub use ppm::{decode_ppm, encode_ppm, quantize_pixel, read_ppm, write_ppm};
