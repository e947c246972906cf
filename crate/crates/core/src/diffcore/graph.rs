use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::kernels;
use super::{GraphError, Tensor};

/// Named input bindings for a forward pass.
pub type Inputs = HashMap<String, Tensor>;

/// Index of a trainable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Flat, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        self.tensors[id.0] = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn numel(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.tensors[id.0].numel()).sum()
    }
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum MaskKind {
    /// 1 where x > 0.
    Positive,
    /// 1 where x < 0.
    Negative,
    /// 1 where lo < x < hi.
    Inside(f64, f64),
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Target {
    Scalar,
    Like(usize),
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Input(Rc<str>),
    Param(ParamId),
    Const,
    OnesLike(usize),
    ZerosLike(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sqrt(usize),
    Softplus(usize),
    Sigmoid(usize),
    Elu(usize),
    /// exp(min(x, 0)), the derivative of ELU.
    EluDeriv(usize),
    Relu(usize),
    Clamp(usize, f64, f64),
    Mask(usize, MaskKind),
    MaxAll(usize),
    StopGrad(usize),
    /// Sums `src` down to a suffix shape (or a scalar); `mean` rescales by the fold count.
    Reduce {
        src: usize,
        target: Target,
        mean: bool,
    },
    /// Repeats `src` over the leading axes of `like`; adjoint of `Reduce`.
    Expand {
        src: usize,
        like: usize,
        mean: bool,
    },
    SumLast(usize),
    ExpandLast {
        src: usize,
        like: usize,
    },
    Unsqueeze(usize),
    SqueezeLast(usize),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const => "const",
            Op::OnesLike(_) => "ones_like",
            Op::ZerosLike(_) => "zeros_like",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::Elu(_) => "elu",
            Op::EluDeriv(_) => "elu_deriv",
            Op::Relu(_) => "relu",
            Op::Clamp(..) => "clamp",
            Op::Mask(..) => "mask",
            Op::MaxAll(_) => "max_all",
            Op::StopGrad(_) => "stop_grad",
            Op::Reduce { .. } => "reduce",
            Op::Expand { .. } => "expand",
            Op::SumLast(_) => "sum_last",
            Op::ExpandLast { .. } => "expand_last",
            Op::Unsqueeze(_) => "unsqueeze",
            Op::SqueezeLast(_) => "squeeze_last",
        }
    }

    /// Every node whose value is read during evaluation.
    fn deps(&self, out: &mut Vec<usize>) {
        out.clear();
        match *self {
            Op::Input(_) | Op::Param(_) | Op::Const => {}
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                out.push(a);
                out.push(b);
            }
            Op::Reduce { src, target, .. } => {
                out.push(src);
                if let Target::Like(l) = target {
                    out.push(l);
                }
            }
            Op::Expand { src, like, .. } | Op::ExpandLast { src, like } => {
                out.push(src);
                out.push(like);
            }
            Op::OnesLike(a)
            | Op::ZerosLike(a)
            | Op::Transpose(a)
            | Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::Elu(a)
            | Op::EluDeriv(a)
            | Op::Relu(a)
            | Op::Clamp(a, ..)
            | Op::Mask(a, _)
            | Op::MaxAll(a)
            | Op::StopGrad(a)
            | Op::SumLast(a)
            | Op::Unsqueeze(a)
            | Op::SqueezeLast(a) => out.push(a),
        }
    }

    /// Inputs through which gradients flow.
    fn diff_inputs(&self, out: &mut Vec<usize>) {
        out.clear();
        match *self {
            Op::Input(_)
            | Op::Param(_)
            | Op::Const
            | Op::OnesLike(_)
            | Op::ZerosLike(_)
            | Op::Mask(..)
            | Op::MaxAll(_)
            | Op::StopGrad(_) => {}
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                out.push(a);
                out.push(b);
            }
            Op::Reduce { src, .. } | Op::Expand { src, .. } | Op::ExpandLast { src, .. } => {
                out.push(src)
            }
            Op::Transpose(a)
            | Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::Elu(a)
            | Op::EluDeriv(a)
            | Op::Relu(a)
            | Op::Clamp(a, ..)
            | Op::SumLast(a)
            | Op::Unsqueeze(a)
            | Op::SqueezeLast(a) => out.push(a),
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Input(_) | Op::Param(_) | Op::Const)
    }
}

#[derive(Default)]
struct GraphInner {
    ops: Vec<Op>,
    values: Vec<Option<Tensor>>,
    valid: Vec<bool>,
    inputs: BTreeMap<Rc<str>, usize>,
    params: BTreeMap<ParamId, usize>,
    grad_cache: HashMap<usize, Vec<(ParamId, usize)>>,
}

impl GraphInner {
    fn push(&mut self, op: Op) -> usize {
        self.ops.push(op);
        self.values.push(None);
        self.valid.push(false);
        self.ops.len() - 1
    }
}

/// Recorded computation over dense tensors with reverse-mode differentiation.
///
/// Operations are recorded symbolically when built and evaluated on demand
/// after [`Graph::bind`]. Gradients are themselves graph nodes, so a
/// gradient can be differentiated again (used by the critic's gradient
/// penalty). Node inputs always refer to earlier nodes.
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op) -> Var {
        let id = self.inner.borrow_mut().push(op);
        Var {
            graph: self.clone(),
            id,
        }
    }

    fn var(&self, id: usize) -> Var {
        Var {
            graph: self.clone(),
            id,
        }
    }

    /// Placeholder bound by name at [`Graph::bind`]. Repeated names share a node.
    pub fn input(&self, name: &str) -> Var {
        let existing = self.inner.borrow().inputs.get(name).copied();
        if let Some(id) = existing {
            return self.var(id);
        }
        let key: Rc<str> = Rc::from(name);
        let v = self.push(Op::Input(key.clone()));
        self.inner.borrow_mut().inputs.insert(key, v.id);
        v
    }

    /// Trainable parameter node. Repeated ids share a node.
    pub fn param(&self, id: ParamId) -> Var {
        let existing = self.inner.borrow().params.get(&id).copied();
        if let Some(node) = existing {
            return self.var(node);
        }
        let v = self.push(Op::Param(id));
        self.inner.borrow_mut().params.insert(id, v.id);
        v
    }

    pub fn constant(&self, value: Tensor) -> Var {
        let v = self.push(Op::Const);
        let mut inner = self.inner.borrow_mut();
        inner.values[v.id] = Some(value);
        inner.valid[v.id] = true;
        v
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Parameter ids that appear in this graph.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.inner.borrow().params.keys().copied().collect()
    }

    /// Sets parameter and input leaves and invalidates every computed value.
    pub fn bind(&self, params: &ParamStore, inputs: &Inputs) -> Result<(), GraphError> {
        let mut inner = self.inner.borrow_mut();
        let GraphInner {
            ops, values, valid, ..
        } = &mut *inner;
        for (i, op) in ops.iter().enumerate() {
            match op {
                Op::Const => {}
                Op::Param(pid) => {
                    if pid.0 >= params.len() {
                        return Err(GraphError::MissingParam(*pid));
                    }
                    let src = params.get(*pid);
                    copy_into(&mut values[i], src);
                    valid[i] = true;
                }
                Op::Input(name) => match inputs.get(&**name) {
                    Some(t) => {
                        copy_into(&mut values[i], t);
                        valid[i] = true;
                    }
                    None => valid[i] = false,
                },
                _ => valid[i] = false,
            }
        }
        Ok(())
    }

    /// Evaluates every target (and whatever it depends on) that is not already current.
    pub fn eval(&self, targets: &[&Var]) -> Result<(), GraphError> {
        let mut inner = self.inner.borrow_mut();
        let n = inner.ops.len();
        let mut needed = vec![false; n];
        let mut stack: Vec<usize> = targets.iter().map(|v| v.id).collect();
        let mut deps = Vec::new();
        while let Some(i) = stack.pop() {
            if needed[i] || inner.valid[i] {
                continue;
            }
            needed[i] = true;
            inner.ops[i].deps(&mut deps);
            stack.extend(deps.iter().copied().filter(|&j| !needed[j] && !inner.valid[j]));
        }
        let GraphInner {
            ops, values, valid, ..
        } = &mut *inner;
        for i in 0..n {
            if !needed[i] {
                continue;
            }
            let op = &ops[i];
            if op.is_leaf() {
                return Err(match op {
                    Op::Input(name) => GraphError::UnboundInput(name.to_string()),
                    Op::Param(pid) => GraphError::MissingParam(*pid),
                    _ => GraphError::NotEvaluated(i),
                });
            }
            let (before, rest) = values.split_at_mut(i);
            let mut out = rest[0].take().unwrap_or_else(|| Tensor::zeros(&[]));
            kernels::eval_op(op, before, &mut out).map_err(|detail| GraphError::Shape {
                node: i,
                op: op.name(),
                detail,
            })?;
            rest[0] = Some(out);
            valid[i] = true;
        }
        Ok(())
    }

    /// Binds, evaluates `output`, and returns its value.
    pub fn forward(
        &self,
        output: &Var,
        params: &ParamStore,
        inputs: &Inputs,
    ) -> Result<Tensor, GraphError> {
        self.bind(params, inputs)?;
        self.eval(&[output])?;
        self.value(output)
    }

    pub fn value(&self, v: &Var) -> Result<Tensor, GraphError> {
        let inner = self.inner.borrow();
        match (&inner.values[v.id], inner.valid[v.id]) {
            (Some(t), true) => Ok(t.clone()),
            _ => Err(GraphError::NotEvaluated(v.id)),
        }
    }

    /// Scalar value of an evaluated one-element node.
    pub fn scalar_value(&self, v: &Var) -> Result<f64, GraphError> {
        let inner = self.inner.borrow();
        match (&inner.values[v.id], inner.valid[v.id]) {
            (Some(t), true) if t.numel() == 1 => Ok(t.data()[0]),
            (Some(t), true) => Err(GraphError::NonScalarOutput {
                shape: t.shape().to_vec(),
            }),
            _ => Err(GraphError::NotEvaluated(v.id)),
        }
    }

    /// Runs `f` on an evaluated value without cloning it.
    pub fn with_value<R>(&self, v: &Var, f: impl FnOnce(&Tensor) -> R) -> Result<R, GraphError> {
        let inner = self.inner.borrow();
        match (&inner.values[v.id], inner.valid[v.id]) {
            (Some(t), true) => Ok(f(t)),
            _ => Err(GraphError::NotEvaluated(v.id)),
        }
    }

    /// Builds gradient nodes of `sum(y)` with respect to each node in `wrt`.
    ///
    /// The returned nodes are ordinary graph nodes and can be differentiated
    /// again. Nodes behind a stop-gradient never receive a contribution.
    pub fn grad(&self, y: &Var, wrt: &[&Var]) -> Vec<Var> {
        let n = self.len();
        let mut relevant = vec![false; n];
        {
            let inner = self.inner.borrow();
            let mut desc = vec![false; n];
            for w in wrt {
                desc[w.id] = true;
            }
            let mut ins = Vec::new();
            for i in 0..n {
                if desc[i] {
                    continue;
                }
                inner.ops[i].diff_inputs(&mut ins);
                if ins.iter().any(|&j| desc[j]) {
                    desc[i] = true;
                }
            }
            let mut anc = vec![false; n];
            anc[y.id] = true;
            for i in (0..=y.id).rev() {
                if !anc[i] {
                    continue;
                }
                inner.ops[i].diff_inputs(&mut ins);
                for &j in &ins {
                    anc[j] = true;
                }
            }
            for i in 0..n {
                relevant[i] = desc[i] && anc[i];
            }
        }

        let mut adj: Vec<Option<Var>> = vec![None; n];
        if relevant[y.id] {
            adj[y.id] = Some(self.push(Op::OnesLike(y.id)));
        }
        for i in (0..=y.id).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(g) = adj[i].clone() else { continue };
            let op = self.inner.borrow().ops[i].clone();
            for (j, contrib) in self.vjp(&op, i, &g, &relevant) {
                adj[j] = Some(match adj[j].take() {
                    Some(acc) => &acc + &contrib,
                    None => contrib,
                });
            }
        }
        wrt.iter()
            .map(|w| {
                adj[w.id]
                    .clone()
                    .unwrap_or_else(|| self.push(Op::ZerosLike(w.id)))
            })
            .collect()
    }

    fn vjp(&self, op: &Op, out: usize, g: &Var, relevant: &[bool]) -> Vec<(usize, Var)> {
        let v = |id: usize| self.var(id);
        let reduce_to = |g: Var, like: usize| {
            self.push(Op::Reduce {
                src: g.id,
                target: Target::Like(like),
                mean: false,
            })
        };
        let mut res = Vec::with_capacity(2);
        match *op {
            Op::Input(_)
            | Op::Param(_)
            | Op::Const
            | Op::OnesLike(_)
            | Op::ZerosLike(_)
            | Op::Mask(..)
            | Op::MaxAll(_)
            | Op::StopGrad(_) => {}
            Op::MatMul(a, b) => {
                if relevant[a] {
                    res.push((a, g.matmul(&v(b).t())));
                }
                if relevant[b] {
                    res.push((b, v(a).t().matmul(g)));
                }
            }
            Op::Transpose(a) => res.push((a, g.t())),
            Op::Add(a, b) => {
                if relevant[a] {
                    res.push((a, reduce_to(g.clone(), a)));
                }
                if relevant[b] {
                    res.push((b, reduce_to(g.clone(), b)));
                }
            }
            Op::Sub(a, b) => {
                if relevant[a] {
                    res.push((a, reduce_to(g.clone(), a)));
                }
                if relevant[b] {
                    res.push((b, reduce_to(-g, b)));
                }
            }
            Op::Mul(a, b) => {
                if relevant[a] {
                    res.push((a, reduce_to(g * &v(b), a)));
                }
                if relevant[b] {
                    res.push((b, reduce_to(g * &v(a), b)));
                }
            }
            Op::Div(a, b) => {
                if relevant[a] {
                    res.push((a, reduce_to(g / &v(b), a)));
                }
                if relevant[b] {
                    res.push((b, reduce_to(-(g * &v(out) / &v(b)), b)));
                }
            }
            Op::Neg(a) => res.push((a, -g)),
            Op::Scale(a, c) => res.push((a, g * c)),
            Op::AddScalar(a, _) => res.push((a, g.clone())),
            Op::Exp(a) => res.push((a, g * &v(out))),
            Op::Log(a) => res.push((a, g / &v(a))),
            Op::Square(a) => res.push((a, (g * &v(a)) * 2.0)),
            Op::Sqrt(a) => res.push((a, g / &(&v(out) * 2.0))),
            Op::Softplus(a) => res.push((a, g * &v(a).sigmoid())),
            Op::Sigmoid(a) => {
                let s = v(out);
                res.push((a, g * &(&s * &(1.0 - &s))));
            }
            Op::Elu(a) => res.push((a, g * &self.push(Op::EluDeriv(a)))),
            Op::EluDeriv(a) => {
                let mask = self.push(Op::Mask(a, MaskKind::Negative));
                res.push((a, (g * &v(out)) * &mask));
            }
            Op::Relu(a) => res.push((a, g * &self.push(Op::Mask(a, MaskKind::Positive)))),
            Op::Clamp(a, lo, hi) => {
                res.push((a, g * &self.push(Op::Mask(a, MaskKind::Inside(lo, hi)))))
            }
            Op::Reduce { src, mean, .. } => res.push((
                src,
                self.push(Op::Expand {
                    src: g.id,
                    like: src,
                    mean,
                }),
            )),
            Op::Expand { src, mean, .. } => res.push((
                src,
                self.push(Op::Reduce {
                    src: g.id,
                    target: Target::Like(src),
                    mean,
                }),
            )),
            Op::SumLast(a) => res.push((a, self.push(Op::ExpandLast { src: g.id, like: a }))),
            Op::ExpandLast { src, .. } => res.push((src, self.push(Op::SumLast(g.id)))),
            Op::Unsqueeze(a) => res.push((a, self.push(Op::SqueezeLast(g.id)))),
            Op::SqueezeLast(a) => res.push((a, self.push(Op::Unsqueeze(g.id)))),
        }
        res
    }

    /// Gradient nodes of a scalar output with respect to the given parameters.
    /// Parameters absent from the graph get a constant zero of their shape.
    pub fn param_grads(
        &self,
        output: &Var,
        ids: &[ParamId],
        params: &ParamStore,
    ) -> Vec<(ParamId, Var)> {
        let present: Vec<(ParamId, Var)> = ids
            .iter()
            .filter_map(|id| {
                let node = self.inner.borrow().params.get(id).copied();
                node.map(|n| (*id, self.var(n)))
            })
            .collect();
        let wrt: Vec<&Var> = present.iter().map(|(_, v)| v).collect();
        let grads = self.grad(output, &wrt);
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            match present.iter().position(|(p, _)| p == id) {
                Some(k) => out.push((*id, grads[k].clone())),
                None => out.push((*id, self.constant(Tensor::zeros(params.get(*id).shape())))),
            }
        }
        out
    }

    /// Gradient of a scalar output with respect to every parameter in the graph,
    /// using the values from the last [`Graph::bind`].
    pub fn backward(&self, output: &Var) -> Result<Gradients, GraphError> {
        self.backward_with_seed(output, 1.0)
    }

    pub fn backward_with_seed(&self, output: &Var, seed: f64) -> Result<Gradients, GraphError> {
        self.eval(&[output])?;
        let shape = self.with_value(output, |t| t.shape().to_vec())?;
        if shape.iter().product::<usize>() != 1 {
            return Err(GraphError::NonScalarOutput { shape });
        }
        let cached = self.inner.borrow().grad_cache.get(&output.id).cloned();
        let pairs = match cached {
            Some(p) => p,
            None => {
                let params: Vec<(ParamId, usize)> = self
                    .inner
                    .borrow()
                    .params
                    .iter()
                    .map(|(k, v)| (*k, *v))
                    .collect();
                let wrt: Vec<Var> = params.iter().map(|(_, n)| self.var(*n)).collect();
                let wrt_refs: Vec<&Var> = wrt.iter().collect();
                let grads = self.grad(output, &wrt_refs);
                let pairs: Vec<(ParamId, usize)> = params
                    .iter()
                    .zip(grads.iter())
                    .map(|((pid, _), g)| (*pid, g.id))
                    .collect();
                self.inner
                    .borrow_mut()
                    .grad_cache
                    .insert(output.id, pairs.clone());
                pairs
            }
        };
        let vars: Vec<Var> = pairs.iter().map(|(_, n)| self.var(*n)).collect();
        let refs: Vec<&Var> = vars.iter().collect();
        self.eval(&refs)?;
        let mut out = Gradients::default();
        for ((pid, _), v) in pairs.iter().zip(vars.iter()) {
            let mut g = self.value(v)?;
            if seed != 1.0 {
                g.data_mut().iter_mut().for_each(|x| *x *= seed);
            }
            out.insert(*pid, g);
        }
        Ok(out)
    }
}

fn copy_into(slot: &mut Option<Tensor>, src: &Tensor) {
    match slot {
        Some(t) if t.shape() == src.shape() => t.data_mut().copy_from_slice(src.data()),
        _ => *slot = Some(src.clone()),
    }
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    fn unary(&self, op: Op) -> Var {
        self.graph.push(op)
    }

    fn binary(&self, other: &Var, f: impl FnOnce(usize, usize) -> Op) -> Var {
        debug_assert!(
            Rc::ptr_eq(&self.graph.inner, &other.graph.inner),
            "vars belong to different graphs"
        );
        self.graph.push(f(self.id, other.id))
    }

    pub fn matmul(&self, other: &Var) -> Var {
        self.binary(other, Op::MatMul)
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&self) -> Var {
        self.unary(Op::Transpose(self.id))
    }

    pub fn exp(&self) -> Var {
        self.unary(Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var {
        self.unary(Op::Log(self.id))
    }

    pub fn square(&self) -> Var {
        self.unary(Op::Square(self.id))
    }

    pub fn sqrt(&self) -> Var {
        self.unary(Op::Sqrt(self.id))
    }

    pub fn softplus(&self) -> Var {
        self.unary(Op::Softplus(self.id))
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(Op::Sigmoid(self.id))
    }

    pub fn elu(&self) -> Var {
        self.unary(Op::Elu(self.id))
    }

    pub fn relu(&self) -> Var {
        self.unary(Op::Relu(self.id))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        self.unary(Op::Clamp(self.id, lo, hi))
    }

    /// Identity forward, no gradient backward.
    pub fn stop_grad(&self) -> Var {
        self.unary(Op::StopGrad(self.id))
    }

    /// Maximum element as a scalar; treated as a constant by differentiation.
    pub fn max_detached(&self) -> Var {
        self.unary(Op::MaxAll(self.id))
    }

    pub fn sum(&self) -> Var {
        self.unary(Op::Reduce {
            src: self.id,
            target: Target::Scalar,
            mean: false,
        })
    }

    pub fn mean(&self) -> Var {
        self.unary(Op::Reduce {
            src: self.id,
            target: Target::Scalar,
            mean: true,
        })
    }

    /// Sums the last axis away: `[n, m] -> [n]`.
    pub fn sum_last(&self) -> Var {
        self.unary(Op::SumLast(self.id))
    }

    /// Appends a unit axis: `[n] -> [n, 1]`.
    pub fn unsqueeze(&self) -> Var {
        self.unary(Op::Unsqueeze(self.id))
    }

    /// Removes a trailing unit axis: `[n, 1] -> [n]`.
    pub fn squeeze_last(&self) -> Var {
        self.unary(Op::SqueezeLast(self.id))
    }

    /// `log(mean(exp(self)))` over all elements, shifted by the detached maximum.
    pub fn log_mean_exp(&self) -> Var {
        let m = self.max_detached();
        &(self - &m).exp().mean().ln() + &m
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $op:ident) => {
        impl $trait<&Var> for &Var {
            type Output = Var;
            fn $method(self, rhs: &Var) -> Var {
                self.binary(rhs, Op::$op)
            }
        }
        impl $trait<Var> for Var {
            type Output = Var;
            fn $method(self, rhs: Var) -> Var {
                (&self).$method(&rhs)
            }
        }
        impl $trait<&Var> for Var {
            type Output = Var;
            fn $method(self, rhs: &Var) -> Var {
                (&self).$method(rhs)
            }
        }
        impl $trait<Var> for &Var {
            type Output = Var;
            fn $method(self, rhs: Var) -> Var {
                self.$method(&rhs)
            }
        }
    };
}

binop!(Add, add, Add);
binop!(Sub, sub, Sub);
binop!(Mul, mul, Mul);
binop!(Div, div, Div);

macro_rules! scalar_op {
    ($trait:ident, $method:ident, |$v:ident, $c:ident| $body:expr) => {
        impl $trait<f64> for &Var {
            type Output = Var;
            fn $method(self, $c: f64) -> Var {
                let $v = self;
                $body
            }
        }
        impl $trait<f64> for Var {
            type Output = Var;
            fn $method(self, $c: f64) -> Var {
                let $v = &self;
                $body
            }
        }
    };
}

scalar_op!(Add, add, |v, c| v.unary(Op::AddScalar(v.id, c)));
scalar_op!(Sub, sub, |v, c| v.unary(Op::AddScalar(v.id, -c)));
scalar_op!(Mul, mul, |v, c| v.unary(Op::Scale(v.id, c)));
scalar_op!(Div, div, |v, c| v.unary(Op::Scale(v.id, 1.0 / c)));

impl Sub<&Var> for f64 {
    type Output = Var;
    fn sub(self, rhs: &Var) -> Var {
        (-rhs) + self
    }
}

impl Sub<Var> for f64 {
    type Output = Var;
    fn sub(self, rhs: Var) -> Var {
        self - &rhs
    }
}

impl Add<&Var> for f64 {
    type Output = Var;
    fn add(self, rhs: &Var) -> Var {
        rhs + self
    }
}

impl Mul<&Var> for f64 {
    type Output = Var;
    fn mul(self, rhs: &Var) -> Var {
        rhs * self
    }
}

impl Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        self.unary(Op::Neg(self.id))
    }
}

impl Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        -&self
    }
}
