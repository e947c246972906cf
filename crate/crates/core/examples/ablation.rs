//! Ablation table (full CIB, without MIGDR, without CPVR, no regularizer)
//! over a few seeds of the synthetic benchmark.
//!
//!     cargo run --release --example ablation -- [repeats] [jobs]

use cib::data::{synthesize_benchmark, SyntheticSpec};
use cib::eval::{ablation_run, ExperimentConfig};

fn main() -> cib::error::Result<()> {
    let mut args = std::env::args().skip(1).map(|s| s.parse::<usize>().ok());
    let repeats = args.next().flatten().unwrap_or(3);
    let jobs = args.next().flatten().unwrap_or(1);
    let ds = synthesize_benchmark(&SyntheticSpec {
        n: 1000,
        d_x: 10,
        bias_strength: 2.0,
        noise_sd: 1.0,
        seed: 0,
    })?
    .dataset;
    let mut cfg = ExperimentConfig::default();
    cfg.model.hidden_dims = vec![64];
    cfg.model.d_z = 16;
    cfg.train.learning_rate = 1e-3;
    let runs: Vec<_> = (0..repeats as u64).map(|s| (s, &ds)).collect();
    let report = ablation_run(&runs, &cfg, jobs)?;
    print!("{}", report.table());
    Ok(())
}
