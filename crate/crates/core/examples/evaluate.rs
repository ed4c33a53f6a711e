//! Scores a re-aging model on a dataset: TRWC, T-Age, age MAE and identity
//! similarity per clip, plus per-target means.
//!
//! `cargo run --example evaluate -- <dataset> [checkpoint] [out_dir]`
//! Without a checkpoint an untrained desk generator is scored.

use std::path::PathBuf;

use candle_core::DType;
use reage::datamodel::manifest::DatasetManifest;
use reage::generator::{Generator, GeneratorConfig};
use reage::metrics::{evaluate_corpus, EvalBackends, EvalConfig};

fn main() -> reage::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let data = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("data/desk"));
    let out = PathBuf::from(args.get(3).map(String::as_str).unwrap_or("eval_out"));
    let generator = match args.get(2) {
        Some(ckpt) => Generator::load(ckpt.as_ref(), DType::F32)?,
        None => Generator::new(GeneratorConfig::desk(), DType::F32)?,
    };
    let manifest = DatasetManifest::load(&data)?;
    let backends = EvalBackends::procedural(manifest.resolution)?;
    let report = evaluate_corpus(&data, &generator, &EvalConfig::default(), &backends, Some(&out))?;
    for r in &report.rows {
        println!(
            "{} {} -> {}: trwc {:?} t_age {:?} age_mae {:?} identity {:?}",
            r.subject_id, r.input_age, r.target_age, r.trwc, r.t_age, r.age_mae, r.identity
        );
    }
    println!("{}", serde_json::to_string_pretty(&report.summary)?);
    Ok(())
}
