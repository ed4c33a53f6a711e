//! Builds per-target tables and bar charts from evaluation directories.
//!
//! `cargo run --example compare_report -- <out_dir> <label=eval_dir>...`

use std::path::PathBuf;

use reage::report::{write_report, ReportInput};

fn main() -> reage::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some((out, specs)) = args.split_first() else {
        eprintln!("usage: compare_report <out_dir> <label=eval_dir>...");
        std::process::exit(2);
    };
    let inputs = specs.iter().map(|s| ReportInput::parse(s)).collect::<reage::Result<Vec<_>>>()?;
    for path in write_report(&inputs, &PathBuf::from(out))? {
        println!("{}", path.display());
    }
    Ok(())
}
