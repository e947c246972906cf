//! Checks reverse-mode gradients of a small graph against central differences.
//!
//!     cargo run --example gradcheck

use cib::diffcore::{finite_difference_gradient, relative_error, Graph, Inputs, ParamStore, Tensor};

fn main() -> Result<(), cib::diffcore::GraphError> {
    let mut params = ParamStore::new();
    let w = params.add("w", Tensor::matrix(3, 2, vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.7]));
    let b = params.add("b", Tensor::vector(vec![0.05, -0.1]));

    let g = Graph::new();
    let x = g.input("x");
    let h = (x.matmul(&g.param(w)) + g.param(b)).elu();
    let loss = h.softplus().log_mean_exp() + h.square().mean() * 0.5;

    let mut inputs = Inputs::new();
    inputs.insert("x".into(), Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()));
    g.bind(&params, &inputs)?;
    let grads = g.backward(&loss)?;

    for (id, name) in [(w, "w"), (b, "b")] {
        let numeric = finite_difference_gradient(
            |p| {
                let mut probe = params.clone();
                probe.set(id, p.clone());
                g.bind(&probe, &inputs).unwrap();
                g.eval(&[&loss]).unwrap();
                g.scalar_value(&loss).unwrap()
            },
            params.get(id),
            1e-6,
        );
        let analytic = grads.get(id).expect("parameter is in the graph");
        println!("{name}: relative error {:.2e}", relative_error(analytic.data(), numeric.data()));
    }
    Ok(())
}
