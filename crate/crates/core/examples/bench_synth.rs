//! Train with and without knowledge on the synthetic world and compare
//! zero-shot accuracy on held-out classes.
//!
//! cargo run --release --example bench_synth -- 5

use klite::synth::{run_bench, SynthConfig};

fn main() -> klite::Result<()> {
    let n: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let seeds: Vec<u64> = (0..n).collect();
    let report = run_bench(&SynthConfig::default(), &seeds)?;
    for r in &report.runs {
        println!(
            "seed {}: held-out {:.3} -> {:.3}  table [{:.3} {:.3} | {:.3} {:.3}] consistent={}",
            r.seed,
            r.heldout_without,
            r.heldout_with,
            r.table.train_without_eval_without,
            r.table.train_without_eval_with,
            r.table.train_with_eval_without,
            r.table.train_with_eval_with,
            r.consistency
        );
    }
    println!("{}", serde_json::to_string(&report.summary)?);
    Ok(())
}
