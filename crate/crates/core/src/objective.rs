//! Loss terms of the CIB objective and the critic's Donsker-Varadhan objective.
//!
//! Everything here is expressed on graph nodes so the trainer can build the
//! two training graphs once and rebind them for every minibatch. The
//! objective follows the maximization convention:
//!
//! `total = l0 + l1 - beta * lC + lambda_m * lM + lambda_v * lV`
//!
//! The entropy constants of the outcome variables are not part of `l0`/`l1`;
//! they do not depend on any parameter.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Inputs, ParamId, Tensor, Var};
use crate::error::{CibError, Result};
use crate::nets::{CibModel, MarginalPrior, OutcomeHead, StatisticsNetwork};

/// Weights of the regularizers and settings of the stochastic terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct Hyper {
    pub beta: f64,
    pub lambda_m: f64,
    pub lambda_v: f64,
    /// Gradient-penalty coefficient of the critic.
    pub gamma: f64,
    /// Encoder samples per row for the counterfactual variance.
    pub cpvr_samples: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            beta: 0.1,
            lambda_m: 1.0,
            lambda_v: 1.0,
            gamma: 1.0,
            cpvr_samples: 10,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta", self.beta),
            ("lambdaM", self.lambda_m),
            ("lambdaV", self.lambda_v),
            ("gamma", self.gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CibError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.cpvr_samples < 2 {
            return Err(CibError::Config(format!(
                "counterfactual variance needs at least 2 samples, got {}",
                self.cpvr_samples
            )));
        }
        Ok(())
    }
}

/// Per-term values of one objective evaluation. `l0` and `l1` leave out the
/// outcome-entropy constants, which do not depend on any parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l0: f64,
    pub l1: f64,
    #[serde(rename = "lC")]
    pub l_c: f64,
    #[serde(rename = "lM")]
    pub l_m: f64,
    #[serde(rename = "lV")]
    pub l_v: f64,
    pub total: f64,
    #[serde(rename = "criticObj")]
    pub critic_obj: Option<f64>,
}

impl LossReport {
    /// First non-finite term in reporting order.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("l0", self.l0),
            ("l1", self.l1),
            ("lC", self.l_c),
            ("lM", self.l_m),
            ("lV", self.l_v),
            ("total", self.total),
        ]
        .into_iter()
        .chain(self.critic_obj.map(|c| ("criticObj", c)))
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// `l0 + l1 - beta * lC + lambda_m * lM + lambda_v * lV`.
pub fn combine(l0: f64, l1: f64, l_c: f64, l_m: f64, l_v: f64, hyper: &Hyper) -> f64 {
    l0 + l1 - hyper.beta * l_c + hyper.lambda_m * l_m + hyper.lambda_v * l_v
}

/// Weighted mean log-likelihood `sum(w * log q(y|z)) / sum(w)`.
pub fn expressiveness_loss(head: &OutcomeHead, z: &Var, y: &Var, weights: &Var) -> Var {
    let g = z.graph();
    (weights * &head.log_likelihood(g, z, y)).sum() / weights.sum()
}

/// Per-row `KL(N(mu, sigma^2) || N(m, exp(log_s)^2))`, summed over coordinates.
pub fn kl_rows(mu: &Var, sigma: &Var, mean: &Var, log_scale: &Var) -> Var {
    let var_p = (log_scale * 2.0).exp();
    let quad = (sigma.square() + (mu - mean).square()) / (var_p * 2.0);
    (log_scale - &sigma.ln() + quad - 0.5).sum_last()
}

/// Batch mean of the closed-form KL to the marginal prior.
pub fn compression_loss(mu: &Var, sigma: &Var, prior: &MarginalPrior) -> Var {
    let g = mu.graph();
    kl_rows(mu, sigma, &g.param(prior.mean), &g.param(prior.log_scale)).mean()
}

/// `mean(f_joint) - log mean exp(f_marginal)`.
pub fn dv_bound(f_joint: &Var, f_marginal: &Var) -> Var {
    f_joint.mean() - f_marginal.log_mean_exp()
}

pub struct DvTerms {
    pub dv: Var,
    pub penalty: Var,
    pub objective: Var,
}

/// Critic objective: Donsker-Varadhan bound on joint vs. permuted-treatment
/// samples minus `gamma` times the zero-centered penalty on the critic's
/// gradient with respect to `(z, t)` at the joint samples. `z` is detached.
pub fn dv_critic_objective(
    critic: &StatisticsNetwork,
    x: &Var,
    z: &Var,
    t_joint: &Var,
    t_marginal: &Var,
    gamma: f64,
) -> DvTerms {
    let g = x.graph();
    let z = z.stop_grad();
    let f_joint = critic.value(g, x, &z, t_joint, false);
    let f_marginal = critic.value(g, x, &z, t_marginal, false);
    let dv = dv_bound(&f_joint, &f_marginal);
    if gamma == 0.0 {
        let penalty = g.scalar(0.0);
        return DvTerms {
            objective: dv.clone(),
            dv,
            penalty,
        };
    }
    let grads = g.grad(&f_joint, &[&z, t_joint]);
    let penalty = (grads[0].square().sum_last() + grads[1].square()).mean();
    let objective = &dv - &(&penalty * gamma);
    DvTerms {
        dv,
        penalty,
        objective,
    }
}

/// `-mean f(x, z, t)` with the critic's parameters detached.
pub fn migdr_encoder_loss(critic: &StatisticsNetwork, x: &Var, z: &Var, t: &Var) -> Var {
    -critic.value(x.graph(), x, z, t, true).mean()
}

/// Per-row unbiased variance across a list of `[batch]` predictions.
pub fn unbiased_variance(preds: &[Var]) -> Result<Var> {
    let k = preds.len();
    if k < 2 {
        return Err(CibError::Config(format!("variance needs K >= 2 samples, got {k}")));
    }
    let mut sum = preds[0].clone();
    for p in &preds[1..] {
        sum = sum + p;
    }
    let mean = sum / k as f64;
    let mut ss = (&preds[0] - &mean).square();
    for p in &preds[1..] {
        ss = ss + (p - &mean).square();
    }
    Ok(ss / (k - 1) as f64)
}

/// Negative batch mean of the variance of counterfactual predictions over
/// the encoder samples `mu + sigma * eps_k`. Head parameters are detached.
pub fn cpvr_loss(model: &CibModel, mu: &Var, sigma: &Var, t: &Var, eps: &[Var]) -> Result<Var> {
    let g = mu.graph();
    let preds: Vec<Var> = eps
        .iter()
        .map(|e| {
            let z = crate::nets::reparameterize(mu, sigma, e);
            let p0 = model.head0.predict(g, &z, true);
            let p1 = model.head1.predict(g, &z, true);
            t * &p0 + (1.0 - t) * &p1
        })
        .collect();
    Ok(-unbiased_variance(&preds)?.mean())
}

/// Rows of one minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub t: Vec<f64>,
    pub y: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Fails unless both treatment groups are present.
    pub fn check_groups(&self) -> Result<()> {
        let treated = self.t.iter().filter(|&&t| t == 1.0).count();
        if treated == 0 || treated == self.len() {
            return Err(CibError::Degenerate(format!(
                "batch of {} rows has an empty treatment group",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Standard-normal draws for one main step.
#[derive(Clone, Debug, PartialEq)]
pub struct MainNoise {
    pub eps: Tensor,
    pub eps_v: Vec<Tensor>,
}

pub fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_shape_vec(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect())
}

impl MainNoise {
    /// Zero noise when the encoder is deterministic, so `z = mu`.
    pub fn sample<R: Rng>(rng: &mut R, rows: usize, d_z: usize, k: usize, deterministic: bool) -> Self {
        let draw = |rng: &mut R| {
            if deterministic {
                Tensor::zeros(&[rows, d_z])
            } else {
                normal_tensor(rng, &[rows, d_z])
            }
        };
        let eps = draw(rng);
        let eps_v = (0..k).map(|_| draw(rng)).collect();
        MainNoise { eps, eps_v }
    }
}

fn group_inputs(t: &[f64]) -> (Tensor, Tensor, Tensor, Tensor) {
    let n = t.len() as f64;
    let m1: Vec<f64> = t.to_vec();
    let m0: Vec<f64> = t.iter().map(|v| 1.0 - v).collect();
    let p1 = m1.iter().sum::<f64>() / n;
    (
        Tensor::vector(m0),
        Tensor::vector(m1),
        Tensor::scalar(1.0 - p1),
        Tensor::scalar(p1),
    )
}

/// Graph of the main (encoder, heads, prior, propensity) objective, built once
/// per model and rebound for every batch.
pub struct MainGraph {
    pub graph: Graph,
    pub l0: Var,
    pub l1: Var,
    pub l_c: Var,
    pub l_m: Var,
    pub l_v: Var,
    pub total: Var,
    pub loss: Var,
    pub propensity_loss: Option<Var>,
    pub grads: Vec<(ParamId, Var)>,
    k: usize,
}

impl MainGraph {
    pub fn new(model: &CibModel, hyper: &Hyper) -> Result<Self> {
        hyper.validate()?;
        let g = Graph::new();
        let x = g.input("x");
        let t = g.input("t");
        let y = g.input("y");
        let eps = g.input("eps");
        let (m0, m1) = (g.input("m0"), g.input("m1"));
        let (p0, p1) = (g.input("p0"), g.input("p1"));

        let (mu, sigma) = model.encoder.encode(&g, &x);
        let z = crate::nets::reparameterize(&mu, &sigma, &eps);

        let (w0, w1, propensity_loss) = match &model.propensity {
            Some(clf) => {
                let logit = clf.logit(&g, &x);
                let bce = (logit.softplus() - &t * &logit).mean();
                let s1 = logit
                    .sigmoid()
                    .clamp(clf.clip, 1.0 - clf.clip)
                    .stop_grad();
                let s0 = 1.0 - &s1;
                (&m0 * &(&p0 / &s0), &m1 * &(&p1 / &s1), Some(bce))
            }
            None => (m0, m1, None),
        };

        let l0 = expressiveness_loss(&model.head0, &z, &y, &w0);
        let l1 = expressiveness_loss(&model.head1, &z, &y, &w1);
        let l_c = compression_loss(&mu, &sigma, &model.prior);
        let l_m = if hyper.lambda_m > 0.0 {
            migdr_encoder_loss(&model.critic, &x, &z, &t)
        } else {
            g.scalar(0.0)
        };
        let k = hyper.cpvr_samples;
        let l_v = if hyper.lambda_v > 0.0 {
            let eps_v: Vec<Var> = (0..k).map(|i| g.input(&format!("eps_v{i}"))).collect();
            cpvr_loss(model, &mu, &sigma, &t, &eps_v)?
        } else {
            g.scalar(0.0)
        };
        let total = &l0 + &l1 - &l_c * hyper.beta + &l_m * hyper.lambda_m + &l_v * hyper.lambda_v;
        let mut loss = -&total;
        if let Some(bce) = &propensity_loss {
            loss = loss + bce;
        }
        let mut ids = model.main_param_ids();
        ids.extend(model.propensity_param_ids());
        let grads = g.param_grads(&loss, &ids, &model.params);
        Ok(MainGraph {
            graph: g,
            l0,
            l1,
            l_c,
            l_m,
            l_v,
            total,
            loss,
            propensity_loss,
            grads,
            k: if hyper.lambda_v > 0.0 { k } else { 0 },
        })
    }

    /// Number of variance-noise tensors the graph expects.
    pub fn cpvr_samples(&self) -> usize {
        self.k
    }

    pub fn bind(&self, model: &CibModel, batch: &Batch, noise: &MainNoise) -> Result<()> {
        batch.check_groups()?;
        let mut inputs = Inputs::new();
        let (m0, m1, p0, p1) = group_inputs(&batch.t);
        inputs.insert("x".into(), batch.x.clone());
        inputs.insert("t".into(), Tensor::vector(batch.t.clone()));
        inputs.insert("y".into(), Tensor::vector(batch.y.clone()));
        inputs.insert("eps".into(), noise.eps.clone());
        inputs.insert("m0".into(), m0);
        inputs.insert("m1".into(), m1);
        inputs.insert("p0".into(), p0);
        inputs.insert("p1".into(), p1);
        for (i, e) in noise.eps_v.iter().take(self.k).enumerate() {
            inputs.insert(format!("eps_v{i}"), e.clone());
        }
        self.graph.bind(&model.params, &inputs)?;
        Ok(())
    }

    /// Evaluates every term on the currently bound batch.
    pub fn report(&self) -> Result<LossReport> {
        let g = &self.graph;
        g.eval(&[&self.l0, &self.l1, &self.l_c, &self.l_m, &self.l_v, &self.total])?;
        Ok(LossReport {
            l0: g.scalar_value(&self.l0)?,
            l1: g.scalar_value(&self.l1)?,
            l_c: g.scalar_value(&self.l_c)?,
            l_m: g.scalar_value(&self.l_m)?,
            l_v: g.scalar_value(&self.l_v)?,
            total: g.scalar_value(&self.total)?,
            critic_obj: None,
        })
    }

    /// Gradients of `-total` (plus the propensity loss) on the bound batch.
    pub fn gradients(&self) -> Result<Vec<(ParamId, Tensor)>> {
        let refs: Vec<&Var> = self.grads.iter().map(|(_, v)| v).collect();
        self.graph.eval(&refs)?;
        self.grads
            .iter()
            .map(|(id, v)| Ok((*id, self.graph.value(v)?)))
            .collect()
    }
}

/// Graph of the critic objective.
pub struct CriticGraph {
    pub graph: Graph,
    pub terms: DvTerms,
    pub grads: Vec<(ParamId, Var)>,
}

impl CriticGraph {
    pub fn new(model: &CibModel, gamma: f64) -> Self {
        let g = Graph::new();
        let x = g.input("x");
        let t = g.input("t");
        let t_perm = g.input("t_perm");
        let (mu, sigma) = model.encoder.encode(&g, &x);
        let z = crate::nets::reparameterize(&mu, &sigma, &g.input("eps"));
        let terms = dv_critic_objective(&model.critic, &x, &z, &t, &t_perm, gamma);
        let loss = -&terms.objective;
        let grads = g.param_grads(&loss, &model.critic_param_ids(), &model.params);
        CriticGraph {
            graph: g,
            terms,
            grads,
        }
    }

    pub fn bind(&self, model: &CibModel, batch: &Batch, t_perm: &[f64], eps: &Tensor) -> Result<()> {
        let mut inputs = Inputs::new();
        inputs.insert("x".into(), batch.x.clone());
        inputs.insert("t".into(), Tensor::vector(batch.t.clone()));
        inputs.insert("t_perm".into(), Tensor::vector(t_perm.to_vec()));
        inputs.insert("eps".into(), eps.clone());
        self.graph.bind(&model.params, &inputs)?;
        Ok(())
    }

    pub fn objective(&self) -> Result<f64> {
        self.graph.eval(&[&self.terms.objective])?;
        Ok(self.graph.scalar_value(&self.terms.objective)?)
    }

    /// Gradients of the negated critic objective.
    pub fn gradients(&self) -> Result<Vec<(ParamId, Tensor)>> {
        let refs: Vec<&Var> = self.grads.iter().map(|(_, v)| v).collect();
        self.graph.eval(&refs)?;
        self.grads
            .iter()
            .map(|(id, v)| Ok((*id, self.graph.value(v)?)))
            .collect()
    }
}

/// Within-batch permutation of the treatment vector.
pub fn permute_treatments<R: Rng>(t: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if t.len() < 2 {
        return Err(CibError::Degenerate(format!(
            "cannot permute a batch of {} rows",
            t.len()
        )));
    }
    let mut out = t.to_vec();
    out.shuffle(rng);
    Ok(out)
}

/// One-shot evaluation of all terms (and the critic objective) on a batch.
pub fn total_objective<R: Rng>(
    model: &CibModel,
    batch: &Batch,
    hyper: &Hyper,
    rng: &mut R,
) -> Result<LossReport> {
    let main = MainGraph::new(model, hyper)?;
    let noise = MainNoise::sample(
        rng,
        batch.len(),
        model.config.d_z,
        main.cpvr_samples(),
        model.config.deterministic_encoder,
    );
    main.bind(model, batch, &noise)?;
    let mut report = main.report()?;
    let critic = CriticGraph::new(model, hyper.gamma);
    let t_perm = permute_treatments(&batch.t, rng)?;
    critic.bind(model, batch, &t_perm, &noise.eps)?;
    report.critic_obj = Some(critic.objective()?);
    Ok(report)
}

/// Closed-form diagonal-Gaussian KL for one row.
pub fn kl_diag(mu: &[f64], sigma: &[f64], mean: &[f64], scale: &[f64]) -> f64 {
    mu.iter()
        .zip(sigma)
        .zip(mean.iter().zip(scale))
        .map(|((&m, &s), (&pm, &ps))| {
            (ps / s).ln() + (s * s + (m - pm) * (m - pm)) / (2.0 * ps * ps) - 0.5
        })
        .sum()
}
