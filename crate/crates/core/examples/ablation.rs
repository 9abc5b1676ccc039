//! Trains every model variant on the synthetic benchmark over several seeds
//! and prints the retrieval AUCs.
//!
//! cargo run --release -p saane-core --example ablation -- [config.json] [seeds]

use std::time::Instant;

use saane::bench::run_benchmark;
use saane::{RunConfig, Variant};

fn main() -> saane::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let base = match args.get(1) {
        Some(p) => RunConfig::load(p.as_ref())?,
        None => RunConfig::from_json(include_str!("../../../configs/benchmark.json"))?,
    };
    let seeds: u64 = args.get(2).map_or(5, |s| s.parse().expect("seed count"));
    for variant in [Variant::App, Variant::AppSem, Variant::Saane] {
        let mut aucs = Vec::new();
        let start = Instant::now();
        for seed in 0..seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.model.variant = variant;
            let run = run_benchmark(&cfg, 64, 3)?;
            let first = run.epochs.first().map_or(0.0, |e| e.mean_loss);
            let last = run.epochs.last().map_or(0.0, |e| e.mean_loss);
            println!("{variant:?} seed {seed}: auc {:.4} loss {first:.3} -> {last:.3}", run.auc());
            aucs.push(run.auc());
        }
        aucs.sort_by(f64::total_cmp);
        println!("{variant:?} median {:.4} ({:.1}s)", aucs[aucs.len() / 2], start.elapsed().as_secs_f64());
    }
    Ok(())
}
