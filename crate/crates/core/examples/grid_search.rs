//! Validation-loss grid search over (beta, lambda_m, lambda_v).
//!
//!     cargo run --release --example grid_search -- [jobs]

use cib::data::{synthesize_benchmark, SyntheticSpec};
use cib::eval::{train_pipeline, ExperimentConfig};
use cib::trainer::{grid_search, hyper_grid};

fn main() -> cib::error::Result<()> {
    let jobs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let ds = synthesize_benchmark(&SyntheticSpec {
        n: 600,
        d_x: 8,
        bias_strength: 2.0,
        noise_sd: 1.0,
        seed: 1,
    })?
    .dataset;
    let mut base = ExperimentConfig::default();
    base.model.hidden_dims = vec![32];
    base.model.d_z = 8;
    base.train.learning_rate = 1e-3;
    base.train.max_iterations = 300;

    // a coarse corner of the full grid keeps the example quick
    let space = hyper_grid(&base.train.hyper, &[0.1, 1.0]);
    let result = grid_search(&space, jobs, |h| {
        let mut cfg = base.clone();
        cfg.train.hyper = h.clone();
        Ok(train_pipeline(&ds, &cfg, 1)?.best_valid_loss)
    })?;
    for e in &result.entries {
        println!(
            "beta {:<4} lambda_m {:<4} lambda_v {:<4} valid {:.4}",
            e.config.beta, e.config.lambda_m, e.config.lambda_v, e.valid_loss
        );
    }
    let b = &result.best;
    println!("best: beta {} lambda_m {} lambda_v {}", b.beta, b.lambda_m, b.lambda_v);
    Ok(())
}
