//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records operations symbolically; values are computed after
//! [`Graph::bind`] supplies parameters and named inputs. Gradients are built
//! as further graph nodes by [`Graph::grad`], which makes nested
//! differentiation (a penalty on an input gradient) a matter of calling it
//! twice.
//!
//! ```
//! use cib::diffcore::{Graph, Inputs, ParamStore, Tensor};
//!
//! let mut params = ParamStore::new();
//! let w = params.add("w", Tensor::scalar(3.0));
//! let g = Graph::new();
//! let wv = g.param(w);
//! let y = wv.square();
//! let value = g.forward(&y, &params, &Inputs::new()).unwrap();
//! assert_eq!(value.item(), 9.0);
//! let grads = g.backward(&y).unwrap();
//! assert_eq!(grads.get(w).unwrap().item(), 6.0);
//! ```

mod graph;
mod kernels;
mod tensor;

pub use graph::{Gradients, Graph, Inputs, ParamId, ParamStore, Var};
pub use kernels::{sigmoid, softplus};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("input `{0}` is not bound")]
    UnboundInput(String),
    #[error("parameter {0:?} is missing from the store")]
    MissingParam(ParamId),
    #[error("backward needs a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("tensor shape {shape:?} does not match {len} values")]
    BadTensor { shape: Vec<usize>, len: usize },
    #[error("node {0} has not been evaluated")]
    NotEvaluated(usize),
}

/// Central-difference gradient of `f` at `p`, one coordinate at a time.
pub fn finite_difference_gradient<F>(mut f: F, p: &Tensor, h: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    let mut probe = p.clone();
    let mut out = Tensor::zeros(p.shape());
    for i in 0..p.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
