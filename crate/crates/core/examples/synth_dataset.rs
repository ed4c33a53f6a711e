//! Renders the 4-subject × 3-age procedural dataset and checks its manifest.
//!
//! `cargo run --example synth_dataset -- [out_dir]`

use std::path::PathBuf;

use reage::synthpipeline::{build_dataset, Backends, PipelineConfig};

fn main() -> reage::Result<()> {
    env_logger::init();
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data/desk".into()));
    let config = PipelineConfig::default();
    let manifest = build_dataset(&config, &Backends::procedural(), &out, 1)?;
    manifest.validate_on_disk(&out)?;
    println!(
        "{} subjects × {} ages, {} frames per clip, {} dropped",
        manifest.subjects.len(),
        manifest.ages.len(),
        manifest.frames_per_video,
        manifest.errata.len()
    );
    for s in &manifest.subjects {
        let scores: Vec<String> = s
            .videos
            .iter()
            .map(|v| format!("{}: {:.3}", v.age, v.sharpness.unwrap_or(f64::NAN)))
            .collect();
        println!("{}  sharpness {}", s.subject_id, scores.join(", "));
    }
    println!("manifest written to {}", out.join("manifest.json").display());
    Ok(())
}
