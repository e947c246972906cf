//! OLS-2 (one linear regression per treatment arm) on the synthetic benchmark.
//!
//!     cargo run --release --example ols2_baseline -- [seed]

use cib::data::{split_indices, standardize, synthesize_benchmark, SplitSpec, SyntheticSpec};
use cib::eval::{ols2_baseline, sqrt_pehe};

fn main() -> cib::error::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let data = synthesize_benchmark(&SyntheticSpec {
        n: 2000,
        d_x: 25,
        bias_strength: 2.0,
        noise_sd: 1.0,
        seed,
    })?
    .dataset;
    let idx = split_indices(&data, &SplitSpec { ratios: [0.63, 0.27, 0.1], seed })?;
    let (train, rest, _) = standardize(&data.subset(&idx.train), &[&data.subset(&idx.test)])?;
    let test = &rest[0];
    let ols = ols2_baseline(&train)?;
    let pehe_in = sqrt_pehe(&train.true_ite().unwrap(), &ols.ite(&train.x))?;
    let pehe_out = sqrt_pehe(&test.true_ite().unwrap(), &ols.ite(&test.x))?;
    println!("OLS-2 sqrt PEHE: train {pehe_in:.4}, test {pehe_out:.4}");
    Ok(())
}
