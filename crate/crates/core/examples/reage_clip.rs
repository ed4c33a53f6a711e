//! Re-ages one clip and writes the output frames plus an input/output grid.
//!
//! `cargo run --example reage_clip -- <checkpoint> <clip_dir> <target_age> [out_dir]`

use std::path::PathBuf;

use reage::cli::{cmd_infer, InferArgs};

fn main() -> reage::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    if args.len() < 4 {
        eprintln!("usage: reage_clip <checkpoint> <clip_dir> <target_age> [out_dir]");
        std::process::exit(2);
    }
    let result = cmd_infer(&InferArgs {
        ckpt: PathBuf::from(&args[1]),
        input: PathBuf::from(&args[2]),
        input_age: None,
        target_age: args[3].parse().map_err(|_| reage::Error::config("target age must be a number"))?,
        interval: 1,
        out: PathBuf::from(args.get(4).map(String::as_str).unwrap_or("reaged")),
    })?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}
