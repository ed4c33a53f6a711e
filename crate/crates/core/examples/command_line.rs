//! Drives the whole pipeline through the command-line entry point:
//! synth → train → infer → eval → report, in a scratch directory.
//!
//! `cargo run --example command_line -- [work_dir]`

use std::path::PathBuf;

fn step(args: &[&str]) {
    println!("$ reage {}", args.join(" "));
    let code = reage::cli::run(std::iter::once("reage").chain(args.iter().copied()));
    if code != 0 {
        std::process::exit(code);
    }
}

fn main() {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "cli_demo".into()));
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let (data, runs) = (p("data"), p("runs"));
    step(&["synth", "--out", &data, "--subjects", "2", "--resolution", "32"]);
    step(&["train", "--data", &data, "--out", &runs, "--name", "demo", "--preset", "desk", "--iterations", "5"]);
    let ckpt = p("runs/demo/ckpt_000005.safetensors");
    step(&["infer", "--ckpt", &ckpt, "--input", &p("data/subject_0000/age_018.00"), "--target-age", "85", "--out", &p("infer")]);
    step(&["eval", "--ckpt", &ckpt, "--data", &data, "--targets", "50,85", "--out", &p("eval")]);
    step(&["report", "--input", &format!("demo={}", p("eval")), "--out", &p("report")]);
    // a bad flag exits with 2 and a JSON error on stderr
    println!("exit code for a bad flag: {}", reage::cli::run(["reage", "train", "--bogus"]));
}
