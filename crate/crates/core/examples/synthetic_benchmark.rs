//! Full CIB vs. the no-regularizer variant vs. OLS-2 on the synthetic
//! benchmark, out-of-sample sqrt PEHE per seed and medians.
//!
//!     cargo run --release --example synthetic_benchmark -- [seeds] [experiment.json]

use cib::data::{synthesize_benchmark, SyntheticSpec};
use cib::eval::{ite_prediction, median, ols2_baseline, sqrt_pehe, train_pipeline, ExperimentConfig, TauMode, TrainedRun};
use cib::data::ObservationalDataset;

fn test_pehe(run: &TrainedRun, ds: &ObservationalDataset) -> cib::error::Result<f64> {
    let test = run.prepare(ds, Some(&run.splits.test))?;
    let tau_hat = ite_prediction(&run.model, &test.x, TauMode::Sampled { samples: 100, seed: run.seed })?;
    sqrt_pehe(&test.true_ite().expect("benchmark has potential outcomes"), &tau_hat)
}

fn main() -> cib::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(10);
    let cfg: ExperimentConfig = match args.next() {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(&p).map_err(|e| cib::error::CibError::Data(format!("{p}: {e}")))?)?,
        None => {
            let mut c = ExperimentConfig::default();
            c.model.hidden_dims = vec![128];
            c.model.d_z = 32;
            c.train.learning_rate = 1e-3;
            c
        }
    };
    let mut plain = cfg.clone();
    plain.train.hyper.lambda_m = 0.0;
    plain.train.hyper.lambda_v = 0.0;

    let (mut full, mut bare, mut ols) = (Vec::new(), Vec::new(), Vec::new());
    println!("seed  CIB     no-reg  OLS-2");
    for seed in 0..seeds {
        let ds = synthesize_benchmark(&SyntheticSpec {
            n: 2000,
            d_x: 25,
            bias_strength: 2.0,
            noise_sd: 1.0,
            seed,
        })?
        .dataset;
        let run = train_pipeline(&ds, &cfg, seed)?;
        full.push(test_pehe(&run, &ds)?);
        bare.push(test_pehe(&train_pipeline(&ds, &plain, seed)?, &ds)?);
        let train = run.prepare(&ds, Some(&run.splits.train))?;
        let test = run.prepare(&ds, Some(&run.splits.test))?;
        let fit = ols2_baseline(&train)?;
        ols.push(sqrt_pehe(&test.true_ite().unwrap(), &fit.ite(&test.x))?);
        let i = full.len() - 1;
        println!("{seed:<5} {:.4}  {:.4}  {:.4}", full[i], bare[i], ols[i]);
    }
    println!("median {:.4}  {:.4}  {:.4}", median(&full), median(&bare), median(&ols));
    Ok(())
}
