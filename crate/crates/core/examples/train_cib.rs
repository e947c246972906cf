//! Trains CIB on a generated benchmark and prints the loss trace and metrics.
//!
//!     cargo run --release --example train_cib -- [seed]

use cib::data::{synthesize_benchmark, SyntheticSpec};
use cib::eval::{evaluate_run, train_pipeline, ExperimentConfig};

fn main() -> cib::error::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let ds = synthesize_benchmark(&SyntheticSpec {
        n: 1000,
        d_x: 10,
        bias_strength: 2.0,
        noise_sd: 1.0,
        seed,
    })?
    .dataset;
    let mut cfg = ExperimentConfig::default();
    cfg.model.hidden_dims = vec![64];
    cfg.model.d_z = 16;
    cfg.train.learning_rate = 1e-3;

    let run = train_pipeline(&ds, &cfg, seed)?;
    for rec in run.log.iter().filter(|r| r.valid_loss.is_some()).step_by(5) {
        println!(
            "iter {:>5}  total {:>9.4}  L0 {:>8.4}  L1 {:>8.4}  LC {:>7.4}  valid {:.4}",
            rec.iter,
            rec.losses.total,
            rec.losses.l0,
            rec.losses.l1,
            rec.losses.l_c,
            rec.valid_loss.unwrap()
        );
    }
    let (inside, outside) = evaluate_run(&run, &ds, &cfg.resolved(seed, ds.d_x()).eval)?;
    for (name, r) in [("in-sample", inside), ("out-sample", outside)] {
        println!(
            "{name}: sqrt PEHE {:.4}, ATE error {:.4}",
            r.sqrt_pehe.unwrap_or(f64::NAN),
            r.ate_error.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
