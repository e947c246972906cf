use cib::diffcore::{
    finite_difference_gradient, relative_error, Graph, GraphError, Inputs, ParamId, ParamStore,
    Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn single(value: Tensor) -> (ParamStore, ParamId) {
    let mut ps = ParamStore::new();
    let id = ps.add("w", value);
    (ps, id)
}

#[test]
fn identity_forward() {
    let g = Graph::new();
    let x = g.input("x");
    let mut inputs = Inputs::new();
    inputs.insert("x".into(), Tensor::vector(vec![1.0, 2.0, 3.0]));
    let out = g.forward(&x, &ParamStore::new(), &inputs).unwrap();
    assert_eq!(out.data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn sum_of_squares_forward() {
    let g = Graph::new();
    let x = g.input("x");
    let y = (&x * &x).sum();
    let mut inputs = Inputs::new();
    inputs.insert("x".into(), Tensor::vector(vec![3.0]));
    assert_eq!(g.forward(&y, &ParamStore::new(), &inputs).unwrap().item(), 9.0);
}

#[test]
fn softplus_at_zero_is_ln2() {
    let g = Graph::new();
    let x = g.input("x");
    let y = x.softplus();
    let mut inputs = Inputs::new();
    inputs.insert("x".into(), Tensor::vector(vec![0.0]));
    let v = g.forward(&y, &ParamStore::new(), &inputs).unwrap();
    assert!((v.data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn backward_examples() {
    let (ps, w) = single(Tensor::scalar(3.0));
    let g = Graph::new();
    let y = g.param(w).square();
    g.forward(&y, &ps, &Inputs::new()).unwrap();
    assert_eq!(g.backward(&y).unwrap().get(w).unwrap().item(), 6.0);

    // constant graph: parameter present but unused by the output
    let g = Graph::new();
    let _unused = g.param(w);
    let c = g.scalar(4.0);
    g.forward(&c, &ps, &Inputs::new()).unwrap();
    assert_eq!(g.backward(&c).unwrap().get(w).unwrap().item(), 0.0);

    let (ps0, w0) = single(Tensor::scalar(0.0));
    let g = Graph::new();
    let y = g.param(w0).softplus();
    g.forward(&y, &ps0, &Inputs::new()).unwrap();
    assert_eq!(g.backward(&y).unwrap().get(w0).unwrap().item(), 0.5);
}

#[test]
fn backward_seed_scales() {
    let (ps, w) = single(Tensor::scalar(3.0));
    let g = Graph::new();
    let y = g.param(w).square();
    g.forward(&y, &ps, &Inputs::new()).unwrap();
    assert_eq!(g.backward_with_seed(&y, 2.0).unwrap().get(w).unwrap().item(), 12.0);
}

#[test]
fn non_scalar_backward_is_an_error() {
    let (ps, w) = single(Tensor::vector(vec![1.0, 2.0]));
    let g = Graph::new();
    let y = g.param(w).exp();
    g.forward(&y, &ps, &Inputs::new()).unwrap();
    assert!(matches!(
        g.backward(&y),
        Err(GraphError::NonScalarOutput { .. })
    ));
}

#[test]
fn shape_mismatch_names_the_node() {
    let g = Graph::new();
    let a = g.input("a");
    let b = g.input("b");
    let c = a.matmul(&b);
    let mut inputs = Inputs::new();
    inputs.insert("a".into(), Tensor::zeros(&[2, 3]));
    inputs.insert("b".into(), Tensor::zeros(&[2, 3]));
    match g.forward(&c, &ParamStore::new(), &inputs) {
        Err(GraphError::Shape { node, op, .. }) => {
            assert_eq!(node, c.id());
            assert_eq!(op, "matmul");
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn unbound_input_is_reported() {
    let g = Graph::new();
    let a = g.input("a");
    let err = g.forward(&a.exp(), &ParamStore::new(), &Inputs::new()).unwrap_err();
    assert_eq!(err, GraphError::UnboundInput("a".into()));
}

#[test]
fn finite_difference_examples() {
    let d = finite_difference_gradient(|p| p.item() * p.item(), &Tensor::scalar(3.0), 1e-5);
    assert!((d.item() - 6.0).abs() < 1e-8);
    let d = finite_difference_gradient(|p| p.item().exp(), &Tensor::scalar(0.0), 1e-5);
    assert!((d.item() - 1.0).abs() < 1e-8);
}

#[test]
fn stop_grad_blocks_gradient() {
    let (ps, w) = single(Tensor::scalar(2.0));
    let g = Graph::new();
    let p = g.param(w);
    let y = &p * &p.stop_grad();
    g.forward(&y, &ps, &Inputs::new()).unwrap();
    // d/dw (w * sg(w)) = sg(w) = 2
    assert_eq!(g.backward(&y).unwrap().get(w).unwrap().item(), 2.0);
}

/// Evaluates `build(params)` as a scalar and returns (value, AD grad, FD grad) over one parameter.
fn check_param(
    store: &ParamStore,
    id: ParamId,
    inputs: &Inputs,
    build: &dyn Fn(&Graph) -> Var,
) -> f64 {
    let g = Graph::new();
    let out = build(&g);
    g.forward(&out, store, inputs).unwrap();
    let ad = g.backward(&out).unwrap().get(id).unwrap().clone();
    let fd = finite_difference_gradient(
        |p| {
            let mut s = store.clone();
            s.set(id, p.clone());
            g.forward(&out, &s, inputs).unwrap().item()
        },
        store.get(id),
        1e-5,
    );
    relative_error(ad.data(), fd.data())
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_shape_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

type Builder = Box<dyn Fn(&Var, &Var) -> Var>;

#[test]
fn every_op_matches_finite_differences() {
    // (name, builder(a: [3,4] param, b: [4] input), domain of a)
    let ops: Vec<(&str, Builder, (f64, f64))> = vec![
        ("add", Box::new(|a, b| (a + b).square().sum()), (-2.0, 2.0)),
        ("sub", Box::new(|a, b| (b - a).square().mean()), (-2.0, 2.0)),
        ("mul", Box::new(|a, b| (a * b).sum()), (-2.0, 2.0)),
        ("div", Box::new(|a, b| (b / a).sum()), (0.5, 2.0)),
        ("div_rhs", Box::new(|a, b| (a / b).sum()), (0.5, 2.0)),
        ("exp", Box::new(|a, _| a.exp().mean()), (-2.0, 2.0)),
        ("log", Box::new(|a, _| a.ln().sum()), (0.5, 3.0)),
        ("sqrt", Box::new(|a, _| a.sqrt().sum()), (0.5, 3.0)),
        ("softplus", Box::new(|a, _| a.softplus().sum()), (-3.0, 3.0)),
        ("sigmoid", Box::new(|a, _| a.sigmoid().square().sum()), (-3.0, 3.0)),
        ("elu", Box::new(|a, _| a.elu().square().sum()), (-3.0, 3.0)),
        ("relu", Box::new(|a, _| a.relu().square().sum()), (-3.0, 3.0)),
        ("clamp", Box::new(|a, _| a.clamp(-1.0, 1.0).square().sum()), (-3.0, 3.0)),
        ("scalar", Box::new(|a, _| ((a * 3.0 - 1.0) / 2.0).square().sum()), (-2.0, 2.0)),
        ("neg", Box::new(|a, _| (1.0 - a).exp().sum()), (-1.0, 1.0)),
        ("matmul", Box::new(|a, b| a.matmul(&b.unsqueeze()).square().sum()), (-2.0, 2.0)),
        ("transpose", Box::new(|a, b| b.unsqueeze().t().matmul(&a.t()).square().sum()), (-2.0, 2.0)),
        ("sum_last", Box::new(|a, _| a.sum_last().square().sum()), (-2.0, 2.0)),
        ("squeeze", Box::new(|a, b| a.matmul(&b.unsqueeze()).squeeze_last().exp().sum()), (-1.0, 1.0)),
        ("log_mean_exp", Box::new(|a, _| a.log_mean_exp()), (-3.0, 3.0)),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, build, (lo, hi)) in &ops {
        for _ in 0..100 {
            let mut store = ParamStore::new();
            let id = store.add("a", rand_tensor(&mut rng, &[3, 4], *lo, *hi));
            let mut inputs = Inputs::new();
            inputs.insert("b".into(), rand_tensor(&mut rng, &[4], 0.5, 2.0));
            let err = check_param(&store, id, &inputs, &|g| {
                let a = g.param(id);
                let b = g.input("b");
                build(&a, &b)
            });
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }
}

#[test]
fn second_order_matches_finite_differences() {
    // Penalty on an input gradient, differentiated with respect to weights:
    // L(W) = mean_rows ||d/dx sum(elu(x W) v)||^2
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor(&mut rng, &[3, 5], -1.0, 1.0));
        let v = store.add("v", rand_tensor(&mut rng, &[5, 1], -1.0, 1.0));
        let mut inputs = Inputs::new();
        inputs.insert("x".into(), rand_tensor(&mut rng, &[4, 3], -2.0, 2.0));
        for id in [w, v] {
            let err = check_param(&store, id, &inputs, &|g| {
                let x = g.input("x");
                let f = x.matmul(&g.param(w)).elu().matmul(&g.param(v)).squeeze_last();
                let gx = g.grad(&f, &[&x]).remove(0);
                gx.square().sum_last().mean()
            });
            assert!(err < 1e-4, "second order relative error {err}");
        }
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let w = store.add("w", rand_tensor(&mut rng, &[6, 7], -1.0, 1.0));
    let mut inputs = Inputs::new();
    inputs.insert("x".into(), rand_tensor(&mut rng, &[9, 6], -1.0, 1.0));
    let run = || {
        let g = Graph::new();
        let y = g.input("x").matmul(&g.param(w)).elu().softplus().mean();
        g.forward(&y, &store, &inputs).unwrap().item().to_bits()
    };
    assert_eq!(run(), run());
}

#[test]
fn gradient_is_linear_in_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let w = store.add("w", rand_tensor(&mut rng, &[4, 3], -1.0, 1.0));
    let mut inputs = Inputs::new();
    inputs.insert("x".into(), rand_tensor(&mut rng, &[5, 4], -1.0, 1.0));
    let g = Graph::new();
    let h = g.input("x").matmul(&g.param(w));
    let l1 = h.exp().mean();
    let l2 = h.square().sum();
    let total = &l1 + &l2;
    g.bind(&store, &inputs).unwrap();
    let g1 = g.backward(&l1).unwrap().get(w).unwrap().clone();
    let g2 = g.backward(&l2).unwrap().get(w).unwrap().clone();
    let gt = g.backward(&total).unwrap().get(w).unwrap().clone();
    for ((a, b), t) in g1.data().iter().zip(g2.data()).zip(gt.data()) {
        assert!((a + b - t).abs() <= 1e-12 * (1.0 + t.abs()));
    }
}
