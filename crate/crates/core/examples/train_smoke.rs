//! Short training run on a procedural dataset.
//!
//! `cargo run --example train_smoke -- <dataset> <run_root> [iterations]`
//! Builds the desk dataset first when `<dataset>/manifest.json` is missing.

use std::path::PathBuf;
use std::time::Instant;

use reage::datamodel::io::load_clip;
use reage::datamodel::manifest::DatasetManifest;
use reage::synthpipeline::{build_dataset, Backends, PipelineConfig};
use reage::training::{self_reconstruction_l1, TrainRunConfig, Trainer};

fn main() -> reage::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let data = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("data/desk"));
    let run_root = PathBuf::from(args.get(2).map(String::as_str).unwrap_or("run"));
    let iterations: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(300);

    if !data.join("manifest.json").exists() {
        build_dataset(&PipelineConfig::default(), &Backends::procedural(), &data, 1)?;
    }
    let manifest = DatasetManifest::load(&data)?;
    let clips = manifest
        .subjects
        .iter()
        .flat_map(|s| s.videos.iter())
        .map(|v| load_clip(&data.join(&v.path)))
        .collect::<reage::Result<Vec<_>>>()?;

    let mut cfg = TrainRunConfig::desk(&data);
    cfg.name = "smoke".into();
    cfg.run_root = run_root;
    cfg.train.iterations = iterations;
    let mut trainer = Trainer::new(cfg)?;
    let before = self_reconstruction_l1(trainer.generator(), &clips)?;

    let start = Instant::now();
    let mut probe_early = None;
    while trainer.iteration() < iterations {
        trainer.step()?;
        if trainer.iteration() == 10 {
            probe_early = Some(trainer.probe_l1(8)?);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let probe_late = trainer.probe_l1(8)?;
    let after = self_reconstruction_l1(trainer.generator(), &clips)?;
    let cp = trainer.save_checkpoint()?;

    println!("{iterations} iterations in {secs:.1}s ({:.2}s/step)", secs / iterations as f64);
    if let Some(early) = probe_early {
        println!("probe L1: step 10 {early:.4}, step {iterations} {probe_late:.4}");
    }
    println!("same-age reconstruction L1: untrained {before:.4}, trained {after:.4}");
    println!("checkpoint {}", cp.display());
    Ok(())
}
