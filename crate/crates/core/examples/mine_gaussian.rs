//! Donsker-Varadhan (MINE) estimate of the mutual information of two
//! correlated Gaussians, using the statistics network of the model.
//!
//!     cargo run --release --example mine_gaussian -- [rho]

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use cib::diffcore::{Graph, Inputs, ParamId, Tensor};
use cib::nets::{CibModel, ModelConfig};
use cib::objective::dv_bound;
use cib::rng::{stream, Stream};
use cib::trainer::{Adam, AdamConfig};

fn main() -> cib::error::Result<()> {
    let rho: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.8);
    let mut model = CibModel::new(
        ModelConfig {
            d_x: 1,
            d_z: 1,
            hidden_dims: vec![64, 64],
            ..ModelConfig::default()
        },
        0,
    )?;
    let critic = model.critic.clone();
    let g = Graph::new();
    let (a, b, shuffled, t) = (g.input("a"), g.input("b"), g.input("b_perm"), g.input("t"));
    let dv = dv_bound(&critic.value(&g, &a, &b, &t, false), &critic.value(&g, &a, &shuffled, &t, false));
    let ids = model.critic_param_ids();
    let grads = g.param_grads(&-&dv, &ids, &model.params);
    let mut adam = Adam::new(
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
        &model.params,
        &ids,
    );

    let mut rng = stream(0, Stream::Data);
    let mut draw = |n: usize| {
        let av: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let bv: Vec<f64> = av
            .iter()
            .map(|x| rho * x + (1.0 - rho * rho).sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut perm = bv.clone();
        perm.shuffle(&mut rng);
        let mut inputs = Inputs::new();
        inputs.insert("a".into(), Tensor::matrix(n, 1, av));
        inputs.insert("b".into(), Tensor::matrix(n, 1, bv));
        inputs.insert("b_perm".into(), Tensor::matrix(n, 1, perm));
        inputs.insert("t".into(), Tensor::zeros(&[n]));
        inputs
    };
    let truth = -0.5 * (1.0 - rho * rho).ln();
    for step in 1..=3000 {
        g.bind(&model.params, &draw(256))?;
        let refs: Vec<_> = grads.iter().map(|(_, v)| v).collect();
        g.eval(&refs)?;
        let update: Vec<(ParamId, Tensor)> = grads
            .iter()
            .map(|(id, v)| Ok((*id, g.value(v)?)))
            .collect::<cib::error::Result<_>>()?;
        adam.update(&mut model.params, &update)?;
        if step % 500 == 0 {
            g.eval(&[&dv])?;
            println!("step {step:>4}: batch DV {:.4}", g.scalar_value(&dv)?);
        }
    }
    g.bind(&model.params, &draw(50_000))?;
    g.eval(&[&dv])?;
    println!("held-out DV {:.4}, analytic MI {truth:.4}", g.scalar_value(&dv)?);
    Ok(())
}
