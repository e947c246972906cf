//! Adam, the alternating critic/main training loop with early stopping, and
//! the hyperparameter grid.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ObservationalDataset;
use crate::diffcore::{ParamId, ParamStore, Tensor};
use crate::error::{CibError, Result};
use crate::nets::CibModel;
use crate::objective::{normal_tensor, permute_treatments, CriticGraph, Hyper, LossReport, MainGraph, MainNoise};
use crate::rng::{stream, Stream};

/// Values searched for each of beta, lambda_m and lambda_v.
pub const GRID_VALUES: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IterationUnit {
    /// One minibatch step.
    #[default]
    Step,
    /// One pass over the training rows.
    Epoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_iterations: usize,
    pub iteration_unit: IterationUnit,
    /// Validation checks without improvement before stopping.
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub critic_steps_per_main_step: usize,
    pub critic_warmup: usize,
    pub validate_every: usize,
    pub hyper: Hyper,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_iterations: 2000,
            iteration_unit: IterationUnit::Step,
            early_stop_patience: 10,
            batch_size: 128,
            critic_steps_per_main_step: 1,
            critic_warmup: 20,
            validate_every: 20,
            hyper: Hyper::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CibError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("Adam epsilon must be positive".into());
        }
        if self.max_iterations == 0 {
            return bad("maxIterations must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2".into());
        }
        if self.validate_every == 0 || self.early_stop_patience == 0 {
            return bad("validateEvery and earlyStopPatience must be at least 1".into());
        }
        self.hyper.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Bias-corrected Adam over a fixed set of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore, ids: &[ParamId]) -> Self {
        let moments = ids
            .iter()
            .map(|&id| {
                let n = params.get(id).numel();
                (id, (vec![0.0; n], vec![0.0; n]))
            })
            .collect();
        Adam {
            config,
            step: 0,
            moments,
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[f64], &[f64])> {
        self.moments.get(&id).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Applies one update. Gradients for parameters outside the optimizer's
    /// set are an error.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads {
            let (m, v) = self
                .moments
                .get_mut(id)
                .ok_or_else(|| CibError::Config(format!("parameter {id:?} is not managed by this optimizer")))?;
            let p = params.get_mut(*id);
            if p.shape() != g.shape() {
                return Err(CibError::Dimension(format!(
                    "gradient {:?} vs parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Functional form of one Adam update.
pub fn adam_step(state: &mut Adam, params: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
    state.update(params, grads)
}

/// One training-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    #[serde(flatten)]
    pub losses: LossReport,
    #[serde(rename = "validLoss", default, skip_serializing_if = "Option::is_none")]
    pub valid_loss: Option<f64>,
}

pub struct FitResult {
    pub model: CibModel,
    pub log: Vec<LogRecord>,
    pub best_iter: Option<usize>,
    pub best_valid_loss: f64,
    pub stopped_early: bool,
}

/// Shuffled pass over the rows, reshuffled every epoch; incomplete trailing
/// batches and batches missing a treatment group are skipped.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    epochs: usize,
}

impl Batcher {
    fn new(n: usize, size: usize) -> Self {
        Batcher {
            order: (0..n).collect(),
            pos: usize::MAX,
            size: size.min(n),
            epochs: 0,
        }
    }

    fn batches_per_epoch(&self) -> usize {
        self.order.len() / self.size
    }

    fn next(&mut self, t: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        let mut skipped_epochs = 0;
        loop {
            if self.pos == usize::MAX || self.pos + self.size > self.order.len() {
                if self.pos != usize::MAX {
                    skipped_epochs += 1;
                    if skipped_epochs > 2 {
                        return Err(CibError::Degenerate(
                            "no minibatch contains both treatment groups".into(),
                        ));
                    }
                }
                self.order.shuffle(rng);
                self.pos = 0;
                self.epochs += 1;
            }
            let idx = &self.order[self.pos..self.pos + self.size];
            self.pos += self.size;
            let treated = idx.iter().filter(|&&i| t[i] == 1.0).count();
            if treated > 0 && treated < idx.len() {
                return Ok(idx.to_vec());
            }
            log::debug!("skipping a minibatch with a single treatment group");
        }
    }
}

/// Factual negative log-likelihood with `z = mu`.
pub fn factual_nll(model: &CibModel, ds: &ObservationalDataset) -> Result<f64> {
    let (mu, _) = model.encode(&ds.x)?;
    let r0 = model.head0.raw_tensor(&model.params, &mu);
    let r1 = model.head1.raw_tensor(&model.params, &mu);
    let mut acc = 0.0;
    for i in 0..ds.n() {
        let (head, raw) = if ds.t[i] == 1.0 {
            (&model.head1, r1[i])
        } else {
            (&model.head0, r0[i])
        };
        acc -= head.log_likelihood_value(raw, ds.yf[i]);
    }
    Ok(acc / ds.n() as f64)
}

fn check_grads(model: &CibModel, grads: &[(ParamId, Tensor)], iter: usize) -> Result<()> {
    for (id, g) in grads {
        if !g.is_finite() {
            return Err(CibError::NonFinite {
                term: format!("gradient of {}", model.params.name(*id)),
                iter,
            });
        }
    }
    Ok(())
}

struct CriticRunner {
    graph: CriticGraph,
    adam: Adam,
    batcher: Batcher,
    rng: ChaCha8Rng,
}

impl CriticRunner {
    fn step(&mut self, model: &mut CibModel, train: &ObservationalDataset, iter: usize) -> Result<f64> {
        let idx = self.batcher.next(&train.t, &mut self.rng)?;
        let batch = train.batch(&idx);
        let t_perm = permute_treatments(&batch.t, &mut self.rng)?;
        let eps = if model.config.deterministic_encoder {
            Tensor::zeros(&[batch.len(), model.config.d_z])
        } else {
            normal_tensor(&mut self.rng, &[batch.len(), model.config.d_z])
        };
        self.graph.bind(model, &batch, &t_perm, &eps)?;
        let obj = self.graph.objective()?;
        if !obj.is_finite() {
            return Err(CibError::NonFinite {
                term: "criticObj".into(),
                iter,
            });
        }
        let grads = self.graph.gradients()?;
        check_grads(model, &grads, iter)?;
        self.adam.update(&mut model.params, &grads)?;
        Ok(obj)
    }
}

/// Trains `model` on `train`, validating on `valid`, and returns the
/// parameters with the lowest validation loss.
///
/// Each iteration takes `critic_steps_per_main_step` critic updates and one
/// update of the encoder, heads and prior. The critic is skipped entirely
/// when `lambda_m` is zero; its random stream is separate, so the main
/// trajectory does not depend on it.
pub fn fit(
    mut model: CibModel,
    train: &ObservationalDataset,
    valid: &ObservationalDataset,
    cfg: &TrainConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    train.validate()?;
    valid.validate()?;
    for (name, ds) in [("train", train), ("valid", valid)] {
        if ds.d_x() != model.config.d_x {
            return Err(CibError::Dimension(format!(
                "{name} data has d_x = {}, model expects {}",
                ds.d_x(),
                model.config.d_x
            )));
        }
    }
    let hyper = &cfg.hyper;
    let main = MainGraph::new(&model, hyper)?;
    let mut main_ids = model.main_param_ids();
    main_ids.extend(model.propensity_param_ids());
    let mut adam = Adam::new(cfg.adam(), &model.params, &main_ids);
    let mut batch_rng = stream(cfg.seed, Stream::Minibatch);
    let mut noise_rng = stream(cfg.seed, Stream::Noise);
    let mut batcher = Batcher::new(train.n(), cfg.batch_size);
    let mut critic = if hyper.lambda_m > 0.0 {
        Some(CriticRunner {
            graph: CriticGraph::new(&model, hyper.gamma),
            adam: Adam::new(cfg.adam(), &model.params, &model.critic_param_ids()),
            batcher: Batcher::new(train.n(), cfg.batch_size),
            rng: stream(cfg.seed, Stream::Critic),
        })
    } else {
        None
    };
    let total_steps = match cfg.iteration_unit {
        IterationUnit::Step => cfg.max_iterations,
        IterationUnit::Epoch => cfg.max_iterations * batcher.batches_per_epoch().max(1),
    };

    let mut last_critic = None;
    if let Some(c) = critic.as_mut() {
        for _ in 0..cfg.critic_warmup {
            last_critic = Some(c.step(&mut model, train, 0)?);
        }
    }

    let mut log = Vec::with_capacity(total_steps);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    for iter in 1..=total_steps {
        if let Some(c) = critic.as_mut() {
            for _ in 0..cfg.critic_steps_per_main_step {
                last_critic = Some(c.step(&mut model, train, iter)?);
            }
        }
        let idx = batcher.next(&train.t, &mut batch_rng)?;
        let batch = train.batch(&idx);
        let noise = MainNoise::sample(
            &mut noise_rng,
            batch.len(),
            model.config.d_z,
            main.cpvr_samples(),
            model.config.deterministic_encoder,
        );
        main.bind(&model, &batch, &noise)?;
        let mut report = main.report()?;
        report.critic_obj = last_critic;
        if let Some(term) = report.first_non_finite() {
            return Err(CibError::NonFinite {
                term: term.into(),
                iter,
            });
        }
        let grads = main.gradients()?;
        check_grads(&model, &grads, iter)?;
        adam.update(&mut model.params, &grads)?;

        let valid_loss = if iter % cfg.validate_every == 0 || iter == total_steps {
            let v = factual_nll(&model, valid)?;
            if !v.is_finite() {
                return Err(CibError::NonFinite {
                    term: "validLoss".into(),
                    iter,
                });
            }
            Some(v)
        } else {
            None
        };
        log.push(LogRecord {
            iter,
            losses: report,
            valid_loss,
        });
        if let Some(v) = valid_loss {
            if best.as_ref().is_none_or(|(_, b, _)| v < *b) {
                best = Some((iter, v, model.params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.early_stop_patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    let (best_iter, best_valid_loss) = match best {
        Some((it, v, params)) => {
            model.params = params;
            (Some(it), v)
        }
        None => (None, f64::INFINITY),
    };
    Ok(FitResult {
        model,
        log,
        best_iter,
        best_valid_loss,
        stopped_early,
    })
}

pub fn write_log(log: &[LogRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| CibError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for rec in log {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| CibError::io(path, e))?;
    }
    w.flush().map_err(|e| CibError::io(path, e))
}

/// Every `(beta, lambda_m, lambda_v)` combination from `values`, other
/// settings copied from `base`.
pub fn hyper_grid(base: &Hyper, values: &[f64]) -> Vec<Hyper> {
    let mut out = Vec::with_capacity(values.len().pow(3));
    for &beta in values {
        for &lambda_m in values {
            for &lambda_v in values {
                out.push(Hyper {
                    beta,
                    lambda_m,
                    lambda_v,
                    ..base.clone()
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct GridEntry<C> {
    pub config: C,
    pub valid_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct GridResult<C> {
    pub best: C,
    pub best_index: usize,
    pub entries: Vec<GridEntry<C>>,
}

/// Scores every configuration with `evaluate` (lower is better) on up to
/// `jobs` threads and picks the minimum. Equal scores go to the config whose
/// JSON serialization sorts first; non-finite scores never win.
pub fn grid_search<C, F>(space: &[C], jobs: usize, evaluate: F) -> Result<GridResult<C>>
where
    C: Serialize + Clone + Send + Sync,
    F: Fn(&C) -> Result<f64> + Sync,
{
    if space.is_empty() {
        return Err(CibError::Config("grid search over an empty space".into()));
    }
    let scores = parallel_map(space, jobs, &evaluate)?;
    let keys: Vec<String> = space
        .iter()
        .map(|c| serde_json::to_string(c).map_err(CibError::from))
        .collect::<Result<_>>()?;
    let rank = |s: f64| if s.is_finite() { s } else { f64::INFINITY };
    let best_index = (0..space.len())
        .min_by(|&a, &b| rank(scores[a]).total_cmp(&rank(scores[b])).then_with(|| keys[a].cmp(&keys[b])))
        .expect("nonempty space");
    Ok(GridResult {
        best: space[best_index].clone(),
        best_index,
        entries: space
            .iter()
            .zip(scores)
            .map(|(c, s)| GridEntry {
                config: c.clone(),
                valid_loss: s,
            })
            .collect(),
    })
}

/// Applies `f` to every item on up to `jobs` scoped threads, keeping input order.
/// The first error (by item order) is returned.
pub fn parallel_map<T, R, F>(items: &[T], jobs: usize, f: &F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("result slots poisoned")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|r| r.expect("every item evaluated"))
        .collect()
}
