//! Networks of the estimator: a shared Gaussian encoder, two outcome heads,
//! the conditional-MI critic, a learnable diagonal-Gaussian marginal, and an
//! optional propensity classifier. All parameters live in one [`ParamStore`].

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{Graph, Inputs, ParamId, ParamStore, Tensor, Var};
use crate::error::{CibError, Result};
use crate::rng::{stream, Stream};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Elu,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeKind {
    #[default]
    Continuous,
    Binary,
}

impl Activation {
    fn apply(self, v: &Var) -> Var {
        match self {
            Activation::Elu => v.elu(),
            Activation::Relu => v.relu(),
        }
    }
}

/// Shape of a fully connected network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(CibError::Config(format!("all MLP dims must be >= 1: {self:?}")));
        }
        if !(1..=3).contains(&self.hidden_dims.len()) {
            return Err(CibError::Config(format!(
                "hidden layer count must be 1, 2 or 3, got {}",
                self.hidden_dims.len()
            )));
        }
        Ok(())
    }

    /// Weights plus biases of the plain MLP `input -> hidden.. -> output`.
    pub fn param_count(&self) -> usize {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Affine layer `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        let weight = store.add(format!("{name}.weight"), Tensor::matrix(in_dim, out_dim, w));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Dense {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    fn forward(&self, g: &Graph, x: &Var, detach: bool) -> Var {
        let (w, b) = param_pair(g, self.weight, self.bias, detach);
        x.matmul(&w) + b
    }

    fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

fn param_pair(g: &Graph, w: ParamId, b: ParamId, detach: bool) -> (Var, Var) {
    let (w, b) = (g.param(w), g.param(b));
    if detach {
        (w.stop_grad(), b.stop_grad())
    } else {
        (w, b)
    }
}

/// Stochastic encoder `p(z|x) = N(mu(x), diag sigma(x)^2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianEncoder {
    pub trunk: Vec<Dense>,
    pub mu_head: Dense,
    pub sigma_head: Dense,
    pub activation: Activation,
    pub sigma_floor: f64,
}

impl GaussianEncoder {
    pub fn spec(&self) -> MlpSpec {
        MlpSpec {
            input_dim: self.trunk[0].in_dim,
            hidden_dims: self.trunk.iter().map(|d| d.out_dim).collect(),
            output_dim: self.mu_head.out_dim,
            activation: self.activation,
        }
    }

    fn trunk_forward(&self, g: &Graph, x: &Var) -> Var {
        let mut h = x.clone();
        for layer in &self.trunk {
            h = self.activation.apply(&layer.forward(g, &h, false));
        }
        h
    }

    /// Mean and standard deviation, each `[batch, d_z]`; sigma is at least the floor.
    pub fn encode(&self, g: &Graph, x: &Var) -> (Var, Var) {
        let h = self.trunk_forward(g, x);
        let mu = self.mu_head.forward(g, &h, false);
        let sigma = self.sigma_head.forward(g, &h, false).softplus() + self.sigma_floor;
        (mu, sigma)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.trunk
            .iter()
            .chain([&self.mu_head, &self.sigma_head])
            .flat_map(Dense::ids)
            .collect()
    }
}

/// `z = mu + sigma * eps`.
pub fn reparameterize(mu: &Var, sigma: &Var, eps: &Var) -> Var {
    mu + &(sigma * eps)
}

/// Single affine layer from the representation to one outcome parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OutcomeHead {
    pub layer: Dense,
    pub kind: OutcomeKind,
}

impl OutcomeHead {
    /// Mean (continuous) or logit (binary), `[batch]`.
    pub fn raw(&self, g: &Graph, z: &Var, detach: bool) -> Var {
        self.layer.forward(g, z, detach).squeeze_last()
    }

    /// Mean (continuous) or probability (binary), `[batch]`.
    pub fn predict(&self, g: &Graph, z: &Var, detach: bool) -> Var {
        let r = self.raw(g, z, detach);
        match self.kind {
            OutcomeKind::Continuous => r,
            OutcomeKind::Binary => r.sigmoid(),
        }
    }

    /// Per-row `log q(y|z)`.
    pub fn log_likelihood(&self, g: &Graph, z: &Var, y: &Var) -> Var {
        let r = self.raw(g, z, false);
        match self.kind {
            OutcomeKind::Continuous => (y - &r).square() * -0.5 - 0.5 * LN_2PI,
            OutcomeKind::Binary => y * &r - r.softplus(),
        }
    }

    /// Mean (continuous) or logit (binary) for each row of a `[batch, d_z]` matrix.
    pub fn raw_tensor(&self, params: &ParamStore, z: &Tensor) -> Vec<f64> {
        let w = params.get(self.layer.weight).data();
        let b = params.get(self.layer.bias).data()[0];
        (0..z.rows())
            .map(|i| z.row(i).iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b)
            .collect()
    }

    /// Mean (continuous) or probability (binary) for each row.
    pub fn predict_tensor(&self, params: &ParamStore, z: &Tensor) -> Vec<f64> {
        let mut r = self.raw_tensor(params, z);
        if self.kind == OutcomeKind::Binary {
            r.iter_mut().for_each(|v| *v = crate::diffcore::sigmoid(*v));
        }
        r
    }

    /// `log q(y|raw)` for one row.
    pub fn log_likelihood_value(&self, raw: f64, y: f64) -> f64 {
        match self.kind {
            OutcomeKind::Continuous => -0.5 * (y - raw) * (y - raw) - 0.5 * LN_2PI,
            OutcomeKind::Binary => y * raw - crate::diffcore::softplus(raw),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layer.ids().to_vec()
    }
}

/// Statistics network `f(x, z, t) -> R` for the Donsker-Varadhan bound.
///
/// The first layer acts on `concat(x, z, t)`; it is stored as three weight
/// blocks so the blocks can be fed from separate graph nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct StatisticsNetwork {
    pub first_x: ParamId,
    pub first_z: ParamId,
    pub first_t: ParamId,
    pub first_bias: ParamId,
    pub hidden: Vec<Dense>,
    pub output: Dense,
    pub activation: Activation,
    pub spec: MlpSpec,
}

impl StatisticsNetwork {
    /// Per-row critic value `[batch]`; `t` is `[batch]` with entries in {0, 1}.
    pub fn value(&self, g: &Graph, x: &Var, z: &Var, t: &Var, detach: bool) -> Var {
        let p = |id: ParamId| {
            let v = g.param(id);
            if detach {
                v.stop_grad()
            } else {
                v
            }
        };
        let pre = x.matmul(&p(self.first_x)) + z.matmul(&p(self.first_z))
            + t.unsqueeze().matmul(&p(self.first_t))
            + p(self.first_bias);
        let mut h = self.activation.apply(&pre);
        for layer in &self.hidden {
            h = self.activation.apply(&layer.forward(g, &h, detach));
        }
        self.output.forward(g, &h, detach).squeeze_last()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.first_x, self.first_z, self.first_t, self.first_bias];
        ids.extend(self.hidden.iter().flat_map(Dense::ids));
        ids.extend(self.output.ids());
        ids
    }
}

/// Learnable diagonal Gaussian `r(z)`; the scale is `exp(log_scale)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalPrior {
    pub mean: ParamId,
    pub log_scale: ParamId,
}

impl MarginalPrior {
    pub fn mean_scale(&self, g: &Graph) -> (Var, Var) {
        (g.param(self.mean), g.param(self.log_scale).exp())
    }

    /// Per-row `log r(z)`.
    pub fn log_density(&self, g: &Graph, z: &Var) -> Var {
        let (m, log_s) = (g.param(self.mean), g.param(self.log_scale));
        let s = log_s.exp();
        let std = (z - &m) / &s;
        let per = std.square() * -0.5 - log_s - 0.5 * LN_2PI;
        per.sum_last()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.mean, self.log_scale]
    }
}

/// Score classifier `s(t=1|x)`, clipped to `[clip, 1 - clip]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PropensityClassifier {
    pub layers: Vec<Dense>,
    pub activation: Activation,
    pub clip: f64,
}

impl PropensityClassifier {
    pub fn logit(&self, g: &Graph, x: &Var) -> Var {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, &h, false);
            if i < last {
                h = self.activation.apply(&h);
            }
        }
        h.squeeze_last()
    }

    pub fn probability(&self, g: &Graph, x: &Var) -> Var {
        self.logit(g, x).sigmoid().clamp(self.clip, 1.0 - self.clip)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Dense::ids).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ModelConfig {
    pub d_x: usize,
    pub d_z: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub outcome: OutcomeKind,
    /// Use `z = mu` everywhere instead of sampling.
    pub deterministic_encoder: bool,
    pub propensity: bool,
    pub propensity_clip: f64,
    pub sigma_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_x: 1,
            d_z: 64,
            hidden_dims: vec![64, 64],
            activation: Activation::Elu,
            outcome: OutcomeKind::Continuous,
            deterministic_encoder: false,
            propensity: false,
            propensity_clip: 0.05,
            sigma_floor: 1e-3,
        }
    }
}

impl ModelConfig {
    pub fn encoder_spec(&self) -> MlpSpec {
        MlpSpec {
            input_dim: self.d_x,
            hidden_dims: self.hidden_dims.clone(),
            output_dim: self.d_z,
            activation: self.activation,
        }
    }

    pub fn critic_spec(&self) -> MlpSpec {
        MlpSpec {
            input_dim: self.d_x + self.d_z + 1,
            hidden_dims: self.hidden_dims.clone(),
            output_dim: 1,
            activation: self.activation,
        }
    }

    pub fn propensity_spec(&self) -> MlpSpec {
        MlpSpec {
            input_dim: self.d_x,
            hidden_dims: self.hidden_dims.clone(),
            output_dim: 1,
            activation: self.activation,
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        self.encoder_spec().validate()?;
        if !(self.sigma_floor > 0.0) {
            return Err(CibError::Config("sigma floor must be positive".into()));
        }
        if !(self.propensity_clip > 0.0 && self.propensity_clip < 0.5) {
            return Err(CibError::Config("propensity clip must be in (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Full parameter bundle of the estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct CibModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: GaussianEncoder,
    pub head0: OutcomeHead,
    pub head1: OutcomeHead,
    pub critic: StatisticsNetwork,
    pub prior: MarginalPrior,
    pub propensity: Option<PropensityClassifier>,
}

impl CibModel {
    /// Fresh model with Glorot-uniform weights and zero biases drawn from the
    /// seed's init stream. The prior starts as a standard normal.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Stream::Init);
        let mut ps = ParamStore::new();
        let rng = &mut rng;

        let mut trunk = Vec::new();
        let mut prev = config.d_x;
        for (i, &h) in config.hidden_dims.iter().enumerate() {
            trunk.push(Dense::new(&mut ps, &format!("encoder.trunk{i}"), prev, h, rng));
            prev = h;
        }
        let mu_head = Dense::new(&mut ps, "encoder.mu", prev, config.d_z, rng);
        let sigma_head = Dense::new(&mut ps, "encoder.sigma", prev, config.d_z, rng);
        let encoder = GaussianEncoder {
            trunk,
            mu_head,
            sigma_head,
            activation: config.activation,
            sigma_floor: config.sigma_floor,
        };

        let head0 = OutcomeHead {
            layer: Dense::new(&mut ps, "head0", config.d_z, 1, rng),
            kind: config.outcome,
        };
        let head1 = OutcomeHead {
            layer: Dense::new(&mut ps, "head1", config.d_z, 1, rng),
            kind: config.outcome,
        };

        let critic_spec = config.critic_spec();
        let h0 = config.hidden_dims[0];
        let fan_in = critic_spec.input_dim;
        let limit = (6.0 / (fan_in + h0) as f64).sqrt();
        let mut block = |rows: usize| -> Tensor {
            Tensor::matrix(
                rows,
                h0,
                (0..rows * h0).map(|_| rng.gen_range(-limit..limit)).collect(),
            )
        };
        let (bx, bz, bt) = (block(config.d_x), block(config.d_z), block(1));
        let first_x = ps.add("critic.first.weight_x", bx);
        let first_z = ps.add("critic.first.weight_z", bz);
        let first_t = ps.add("critic.first.weight_t", bt);
        let first_bias = ps.add("critic.first.bias", Tensor::zeros(&[h0]));
        let mut hidden = Vec::new();
        let mut prev = h0;
        for (i, &h) in config.hidden_dims.iter().enumerate().skip(1) {
            hidden.push(Dense::new(&mut ps, &format!("critic.hidden{i}"), prev, h, rng));
            prev = h;
        }
        let output = Dense::new(&mut ps, "critic.out", prev, 1, rng);
        let critic = StatisticsNetwork {
            first_x,
            first_z,
            first_t,
            first_bias,
            hidden,
            output,
            activation: config.activation,
            spec: critic_spec,
        };

        let prior = MarginalPrior {
            mean: ps.add("prior.mean", Tensor::zeros(&[config.d_z])),
            log_scale: ps.add("prior.log_scale", Tensor::zeros(&[config.d_z])),
        };

        let propensity = if config.propensity {
            let mut layers = Vec::new();
            let mut prev = config.d_x;
            for (i, &h) in config.hidden_dims.iter().enumerate() {
                layers.push(Dense::new(&mut ps, &format!("propensity.hidden{i}"), prev, h, rng));
                prev = h;
            }
            layers.push(Dense::new(&mut ps, "propensity.out", prev, 1, rng));
            Some(PropensityClassifier {
                layers,
                activation: config.activation,
                clip: config.propensity_clip,
            })
        } else {
            None
        };

        Ok(CibModel {
            config,
            params: ps,
            encoder,
            head0,
            head1,
            critic,
            prior,
            propensity,
        })
    }

    /// Encoder, heads and prior: everything the main objective updates.
    pub fn main_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.param_ids();
        ids.extend(self.head0.param_ids());
        ids.extend(self.head1.param_ids());
        ids.extend(self.prior.param_ids());
        ids
    }

    pub fn critic_param_ids(&self) -> Vec<ParamId> {
        self.critic.param_ids()
    }

    pub fn propensity_param_ids(&self) -> Vec<ParamId> {
        self.propensity
            .as_ref()
            .map(PropensityClassifier::param_ids)
            .unwrap_or_default()
    }

    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.encoder.param_ids()
    }

    pub fn head(&self, treated: bool) -> &OutcomeHead {
        if treated {
            &self.head1
        } else {
            &self.head0
        }
    }

    fn check_x(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.config.d_x {
            return Err(CibError::Dimension(format!(
                "expected covariates [n, {}], got {:?}",
                self.config.d_x,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Encoder mean and standard deviation for a covariate matrix.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_x(x)?;
        let g = Graph::new();
        let xv = g.input("x");
        let (mu, sigma) = self.encoder.encode(&g, &xv);
        let mut inputs = Inputs::new();
        inputs.insert("x".into(), x.clone());
        g.bind(&self.params, &inputs)?;
        g.eval(&[&mu, &sigma])?;
        Ok((g.value(&mu)?, g.value(&sigma)?))
    }

    /// Critic value for each row.
    pub fn critic_value(&self, x: &Tensor, z: &Tensor, t: &Tensor) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let g = Graph::new();
        let f = self
            .critic
            .value(&g, &g.input("x"), &g.input("z"), &g.input("t"), false);
        let mut inputs = Inputs::new();
        inputs.insert("x".into(), x.clone());
        inputs.insert("z".into(), z.clone());
        inputs.insert("t".into(), t.clone());
        Ok(g.forward(&f, &self.params, &inputs)?.into_data())
    }

    /// Per-row `log r(z)` under the marginal prior.
    pub fn prior_log_density(&self, z: &Tensor) -> Result<Vec<f64>> {
        let g = Graph::new();
        let lp = self.prior.log_density(&g, &g.input("z"));
        let mut inputs = Inputs::new();
        inputs.insert("z".into(), z.clone());
        Ok(g.forward(&lp, &self.params, &inputs)?.into_data())
    }

    /// Clipped `s(t=1|x)` for each row.
    pub fn propensity(&self, x: &Tensor) -> Result<Vec<f64>> {
        let clf = self.propensity.as_ref().ok_or(CibError::PropensityDisabled)?;
        self.check_x(x)?;
        let g = Graph::new();
        let p = clf.probability(&g, &g.input("x"));
        let mut inputs = Inputs::new();
        inputs.insert("x".into(), x.clone());
        Ok(g.forward(&p, &self.params, &inputs)?.into_data())
    }

    pub fn prior_mean_scale(&self) -> (Vec<f64>, Vec<f64>) {
        let m = self.params.get(self.prior.mean).data().to_vec();
        let s = self
            .params
            .get(self.prior.log_scale)
            .data()
            .iter()
            .map(|v| v.exp())
            .collect();
        (m, s)
    }

    pub fn param_count(&self, ids: &[ParamId]) -> usize {
        self.params.numel(ids)
    }
}

pub const CHECKPOINT_FORMAT: &str = "cib-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Serialized model: architecture, parameters grouped by network, and
/// whatever run metadata the caller attaches under `extra`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Checkpoint {
    pub format: String,
    pub spec: ModelConfig,
    pub networks: BTreeMap<String, Vec<NamedArray>>,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// Hex SHA-256 of a value's JSON serialization.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl CibModel {
    pub fn to_checkpoint(&self, seed: u64, config_hash: String) -> Checkpoint {
        let mut networks: BTreeMap<String, Vec<NamedArray>> = BTreeMap::new();
        for id in self.params.ids() {
            let name = self.params.name(id);
            let group = name.split('.').next().unwrap_or(name).to_string();
            let t = self.params.get(id);
            networks.entry(group).or_default().push(NamedArray {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            });
        }
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            spec: self.config.clone(),
            networks,
            config_hash,
            seed,
            extra: BTreeMap::new(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<CibModel> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(CibError::Config(format!("unknown checkpoint format `{}`", ck.format)));
        }
        let mut model = CibModel::new(ck.spec.clone(), ck.seed)?;
        let arrays: BTreeMap<&str, &NamedArray> = ck
            .networks
            .values()
            .flatten()
            .map(|a| (a.name.as_str(), a))
            .collect();
        let ids: Vec<ParamId> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let a = arrays
                .get(name.as_str())
                .ok_or_else(|| CibError::Config(format!("checkpoint lacks parameter `{name}`")))?;
            if a.shape != model.params.get(id).shape() {
                return Err(CibError::Dimension(format!(
                    "parameter `{name}` has shape {:?} in the checkpoint, expected {:?}",
                    a.shape,
                    model.params.get(id).shape()
                )));
            }
            model.params.set(id, Tensor::new(a.shape.clone(), a.values.clone())?);
        }
        Ok(model)
    }
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(&path, text).map_err(|e| CibError::io(&path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(&path).map_err(|e| CibError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
