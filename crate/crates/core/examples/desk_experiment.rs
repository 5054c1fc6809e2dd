//! Runs the full pipeline on a synthetic cohort and prints the metrics.
//!
//! `cargo run --release -p ehrtext --example desk_experiment -- OUT_DIR [CONFIG_JSON]`

use std::path::PathBuf;
use std::time::Instant;

use ehrtext::pipeline::{run_stage, RunConfig, COMMANDS};

fn main() -> ehrtext::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "desk-run".into()));
    let mut cfg = match args.next() {
        Some(p) => RunConfig::load(p.as_ref())?,
        None => RunConfig::default(),
    };
    cfg.paths.out_dir = Some(out.clone());
    for cmd in COMMANDS {
        let t = Instant::now();
        run_stage(&cfg, cmd)?;
        println!("{cmd}: {:.1}s", t.elapsed().as_secs_f64());
    }
    println!("{}", std::fs::read_to_string(out.join("metrics.json")).expect("metrics written"));
    Ok(())
}
