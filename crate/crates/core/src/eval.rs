//! Effect metrics, KL-based uncertainty, rejection curves, the OLS-2
//! baseline, and the train/evaluate pipeline used by ablations.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{split_indices, ObservationalDataset, SplitIndices, SplitSpec, Standardizer};
use crate::diffcore::Tensor;
use crate::error::{CibError, Result};
use crate::nets::{CibModel, ModelConfig, OutcomeKind};
use crate::objective::{kl_diag, Hyper};
use crate::rng::{stream, Stream};
use crate::trainer::{fit, parallel_map, LogRecord, TrainConfig};

/// How representations are drawn when predicting outcomes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "mode")]
pub enum TauMode {
    /// `z = mu`.
    Deterministic,
    /// Average over `samples` encoder draws from the eval stream of `seed`.
    Sampled { samples: usize, seed: u64 },
}

/// Predicted `(y0, y1)` per row, averaged over the representation draws.
pub fn predict_potential_outcomes(model: &CibModel, x: &Tensor, mode: TauMode) -> Result<(Vec<f64>, Vec<f64>)> {
    let (mu, sigma) = model.encode(x)?;
    let p = &model.params;
    match mode {
        TauMode::Deterministic => Ok((
            model.head0.predict_tensor(p, &mu),
            model.head1.predict_tensor(p, &mu),
        )),
        TauMode::Sampled { samples, seed } => {
            if samples == 0 {
                return Err(CibError::Config("ITE prediction needs K >= 1 samples".into()));
            }
            let mut rng = stream(seed, Stream::Eval);
            let n = x.rows();
            let (mut y0, mut y1) = (vec![0.0; n], vec![0.0; n]);
            let mut z = mu.clone();
            for _ in 0..samples {
                for ((zv, m), s) in z.data_mut().iter_mut().zip(mu.data()).zip(sigma.data()) {
                    let e: f64 = rng.sample(StandardNormal);
                    *zv = m + s * e;
                }
                for (acc, v) in y0.iter_mut().zip(model.head0.predict_tensor(p, &z)) {
                    *acc += v;
                }
                for (acc, v) in y1.iter_mut().zip(model.head1.predict_tensor(p, &z)) {
                    *acc += v;
                }
            }
            let k = samples as f64;
            y0.iter_mut().chain(y1.iter_mut()).for_each(|v| *v /= k);
            Ok((y0, y1))
        }
    }
}

/// `tau_hat = mean_k [head1(z_k) - head0(z_k)]`.
pub fn ite_prediction(model: &CibModel, x: &Tensor, mode: TauMode) -> Result<Vec<f64>> {
    let (y0, y1) = predict_potential_outcomes(model, x, mode)?;
    Ok(y1.iter().zip(&y0).map(|(a, b)| a - b).collect())
}

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(CibError::Dimension(format!("{what}: lengths {a} and {b} differ")));
    }
    if a == 0 {
        return Err(CibError::Metric(format!("{what} of zero rows")));
    }
    Ok(())
}

pub fn sqrt_pehe(tau: &[f64], tau_hat: &[f64]) -> Result<f64> {
    same_len(tau.len(), tau_hat.len(), "sqrt PEHE")?;
    let mse = tau.iter().zip(tau_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / tau.len() as f64;
    Ok(mse.sqrt())
}

/// `|mean(tau) - mean(tau_hat)|`.
pub fn ate_error(tau: &[f64], tau_hat: &[f64]) -> Result<f64> {
    same_len(tau.len(), tau_hat.len(), "ATE error")?;
    let n = tau.len() as f64;
    Ok((tau.iter().sum::<f64>() / n - tau_hat.iter().sum::<f64>() / n).abs())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyRisk {
    pub value: f64,
    /// A policy group had no rows with the matching treatment, and the
    /// group's outcome mean was taken over all such-treated randomized rows.
    pub fallback: bool,
}

/// Policy risk on the randomized subset with the policy "treat iff
/// `tau_hat >= 0`":
///
/// `1 - (mean(y | pi=1, t=1, E) * |pi=1, E| / |E| + mean(y | pi=0, t=0, E) * |pi=0, E| / |E|)`
pub fn policy_risk(yf: &[f64], t: &[f64], e: &[bool], tau_hat: &[f64]) -> Result<PolicyRisk> {
    let n = yf.len();
    if t.len() != n || e.len() != n || tau_hat.len() != n {
        return Err(CibError::Dimension("policy risk inputs differ in length".into()));
    }
    let rows_e: Vec<usize> = (0..n).filter(|&i| e[i]).collect();
    if rows_e.is_empty() {
        return Err(CibError::Metric("policy risk needs a nonempty randomized subset".into()));
    }
    let size_e = rows_e.len() as f64;
    let mut fallback = false;
    let mut terms = [0.0; 2];
    for (slot, g) in [1.0, 0.0].into_iter().enumerate() {
        let policy = |i: usize| if tau_hat[i] >= 0.0 { 1.0 } else { 0.0 };
        let in_policy: Vec<usize> = rows_e.iter().copied().filter(|&i| policy(i) == g).collect();
        if in_policy.is_empty() {
            continue;
        }
        let matched: Vec<usize> = in_policy.iter().copied().filter(|&i| t[i] == g).collect();
        let pool = if matched.is_empty() {
            fallback = true;
            let all: Vec<usize> = rows_e.iter().copied().filter(|&i| t[i] == g).collect();
            if all.is_empty() {
                return Err(CibError::Metric(format!(
                    "no randomized rows with t = {g}; policy risk is undefined"
                )));
            }
            all
        } else {
            matched
        };
        let mean = pool.iter().map(|&i| yf[i]).sum::<f64>() / pool.len() as f64;
        terms[slot] = mean * (in_policy.len() as f64 / size_e);
    }
    let value = 1.0 - (terms[0] + terms[1]);
    Ok(PolicyRisk { value, fallback })
}

/// Area under the ROC curve via the Mann-Whitney statistic with average
/// ranks for ties.
pub fn auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(CibError::Dimension("AUC labels and scores differ in length".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(CibError::Metric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Per-row `KL(p(z|x) || r(z))`.
pub fn uncertainty_score(model: &CibModel, x: &Tensor) -> Result<Vec<f64>> {
    let (mu, sigma) = model.encode(x)?;
    let (pm, ps) = model.prior_mean_scale();
    Ok((0..x.rows()).map(|i| kl_diag(mu.row(i), sigma.row(i), &pm, &ps)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CurvePoint {
    pub k: f64,
    pub metric: f64,
    pub control_metric: f64,
}

/// For each fraction `k`, drops the `ceil(k n)` most uncertain rows and
/// evaluates `metric` on the rest, next to a control that drops the same
/// number of uniformly random rows. Uncertainty ties are broken by the same
/// random order the control uses.
pub fn rejection_curve<F>(metric: F, uncertainty: &[f64], ks: &[f64], seed: u64) -> Result<Vec<CurvePoint>>
where
    F: Fn(&[usize]) -> Result<f64>,
{
    let n = uncertainty.len();
    if ks.iter().any(|k| !(0.0..1.0).contains(k)) {
        return Err(CibError::Config(format!("rejection fractions must lie in [0, 1), got {ks:?}")));
    }
    if ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CibError::Config(format!("rejection fractions must increase strictly, got {ks:?}")));
    }
    let mut control: Vec<usize> = (0..n).collect();
    control.shuffle(&mut stream(seed, Stream::Control));
    let mut ranked = control.clone();
    ranked.sort_by(|&a, &b| uncertainty[b].total_cmp(&uncertainty[a]));
    ks.iter()
        .map(|&k| {
            let drop = ((k * n as f64) - 1e-9).ceil().max(0.0) as usize;
            if drop >= n {
                return Err(CibError::Metric(format!("rejecting {k} of {n} rows leaves nothing")));
            }
            Ok(CurvePoint {
                k,
                metric: metric(&ranked[drop..])?,
                control_metric: metric(&control[drop..])?,
            })
        })
        .collect()
}

pub fn write_curve_csv(curve: &[CurvePoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => CibError::io(path, io),
        other => CibError::Data(format!("{}: {other:?}", path.display())),
    })?;
    w.write_record(["k", "metric", "controlMetric"])?;
    for p in curve {
        w.write_record([p.k.to_string(), p.metric.to_string(), p.control_metric.to_string()])?;
    }
    w.flush().map_err(|e| CibError::io(path, e))
}

/// Separate least-squares fits (with intercept) for each treatment group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ols2 {
    /// Intercept first, then one coefficient per covariate.
    pub coef0: Vec<f64>,
    pub coef1: Vec<f64>,
    pub ridge_used: bool,
}

fn least_squares(x: &Tensor, y: &[f64], rows: &[usize]) -> (Vec<f64>, bool) {
    let d = x.cols();
    let a = DMatrix::from_fn(rows.len(), d + 1, |r, c| if c == 0 { 1.0 } else { x.row(rows[r])[c - 1] });
    let b = DVector::from_iterator(rows.len(), rows.iter().map(|&i| y[i]));
    let ata = a.transpose() * &a;
    let atb = a.transpose() * b;
    if rows.len() > d {
        if let Some(ch) = ata.clone().cholesky() {
            let sol = ch.solve(&atb);
            if sol.iter().all(|v| v.is_finite()) {
                return (sol.iter().copied().collect(), false);
            }
        }
    }
    log::warn!("normal equations are singular; using ridge 1e-6");
    let ridge = ata + DMatrix::identity(d + 1, d + 1) * 1e-6;
    let sol = ridge
        .cholesky()
        .map(|c| c.solve(&atb))
        .unwrap_or_else(|| DVector::zeros(d + 1));
    (sol.iter().copied().collect(), true)
}

impl Ols2 {
    pub fn fit(train: &ObservationalDataset) -> Result<Ols2> {
        train.validate()?;
        let rows1: Vec<usize> = (0..train.n()).filter(|&i| train.t[i] == 1.0).collect();
        let rows0: Vec<usize> = (0..train.n()).filter(|&i| train.t[i] == 0.0).collect();
        let (coef0, r0) = least_squares(&train.x, &train.yf, &rows0);
        let (coef1, r1) = least_squares(&train.x, &train.yf, &rows1);
        Ok(Ols2 {
            coef0,
            coef1,
            ridge_used: r0 || r1,
        })
    }

    fn apply(coef: &[f64], row: &[f64]) -> f64 {
        coef[0] + coef[1..].iter().zip(row).map(|(c, v)| c * v).sum::<f64>()
    }

    pub fn predict(&self, x: &Tensor) -> (Vec<f64>, Vec<f64>) {
        (0..x.rows())
            .map(|i| (Self::apply(&self.coef0, x.row(i)), Self::apply(&self.coef1, x.row(i))))
            .unzip()
    }

    pub fn ite(&self, x: &Tensor) -> Vec<f64> {
        let (y0, y1) = self.predict(x);
        y1.iter().zip(&y0).map(|(a, b)| a - b).collect()
    }
}

pub fn ols2_baseline(train: &ObservationalDataset) -> Result<Ols2> {
    Ols2::fit(train)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct EvalOptions {
    /// Encoder draws per row for predictions; 0 means `z = mu`.
    pub tau_samples: usize,
    pub reject_ks: Vec<f64>,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            tau_samples: 100,
            reject_ks: Vec::new(),
            seed: 0,
        }
    }
}

impl EvalOptions {
    pub fn mode(&self) -> TauMode {
        if self.tau_samples == 0 {
            TauMode::Deterministic
        } else {
            TauMode::Sampled {
                samples: self.tau_samples,
                seed: self.seed,
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalReport {
    pub n: usize,
    pub in_sample: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sqrt_pehe: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ate_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_risk: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_fallback: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    /// Metric used for the rejection curve.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curve_metric: Option<String>,
    pub rejection_curve: Vec<CurvePoint>,
    pub per_sample_kl: Vec<f64>,
}

/// Metrics a caller can insist on; each needs particular ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    SqrtPehe,
    AteError,
    PolicyRisk,
    Auc,
}

impl Metric {
    pub fn parse(s: &str) -> Result<Metric> {
        match s.trim() {
            "pehe" | "sqrtPehe" => Ok(Metric::SqrtPehe),
            "ate" | "ateError" => Ok(Metric::AteError),
            "policy" | "policyRisk" => Ok(Metric::PolicyRisk),
            "auc" => Ok(Metric::Auc),
            other => Err(CibError::Config(format!("unknown metric `{other}`"))),
        }
    }

    /// Error naming the missing column when `ds` cannot support the metric.
    pub fn check(self, ds: &ObservationalDataset) -> Result<()> {
        let has_tau = ds.mu0.is_some() || ds.ycf.is_some();
        match self {
            Metric::SqrtPehe | Metric::AteError if !has_tau => Err(CibError::MissingColumn("ycf".into())),
            Metric::PolicyRisk if ds.e.is_none() => Err(CibError::MissingColumn("e".into())),
            Metric::Auc if ds.ycf.is_none() => Err(CibError::MissingColumn("ycf".into())),
            Metric::Auc if ds.outcome != OutcomeKind::Binary => {
                Err(CibError::Metric("AUC needs a binary outcome".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Every metric the dataset's ground truth supports, plus per-row KL and,
/// when fractions are given, the rejection curve (sqrt PEHE when effects
/// are known, factual RMSE otherwise).
pub fn evaluate(model: &CibModel, ds: &ObservationalDataset, opts: &EvalOptions, in_sample: bool) -> Result<EvalReport> {
    let (y0, y1) = predict_potential_outcomes(model, &ds.x, opts.mode())?;
    let tau_hat: Vec<f64> = y1.iter().zip(&y0).map(|(a, b)| a - b).collect();
    let tau = ds.true_ite();
    let kl = uncertainty_score(model, &ds.x)?;
    let mut report = EvalReport {
        n: ds.n(),
        in_sample,
        sqrt_pehe: None,
        ate_error: None,
        policy_risk: None,
        policy_fallback: None,
        auc: None,
        curve_metric: None,
        rejection_curve: Vec::new(),
        per_sample_kl: Vec::new(),
    };
    if let Some(tau) = &tau {
        report.sqrt_pehe = Some(sqrt_pehe(tau, &tau_hat)?);
        report.ate_error = Some(ate_error(tau, &tau_hat)?);
    }
    if let Some(e) = &ds.e {
        if e.iter().any(|&v| v) {
            let r = policy_risk(&ds.yf, &ds.t, e, &tau_hat)?;
            report.policy_risk = Some(r.value);
            report.policy_fallback = Some(r.fallback);
        }
    }
    if ds.outcome == OutcomeKind::Binary {
        if let Some((t0, t1)) = ds.potential_outcomes() {
            let labels: Vec<bool> = t0.iter().chain(&t1).map(|&v| v >= 0.5).collect();
            let scores: Vec<f64> = y0.iter().chain(&y1).copied().collect();
            if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
                report.auc = Some(auc(&labels, &scores)?);
            }
        }
    }
    if !opts.reject_ks.is_empty() {
        let (name, curve) = match &tau {
            Some(tau) => (
                "sqrtPehe",
                rejection_curve(
                    |rows| {
                        let a: Vec<f64> = rows.iter().map(|&i| tau[i]).collect();
                        let b: Vec<f64> = rows.iter().map(|&i| tau_hat[i]).collect();
                        sqrt_pehe(&a, &b)
                    },
                    &kl,
                    &opts.reject_ks,
                    opts.seed,
                )?,
            ),
            None => (
                "factualRmse",
                rejection_curve(
                    |rows| {
                        let se: f64 = rows
                            .iter()
                            .map(|&i| {
                                let p = if ds.t[i] == 1.0 { y1[i] } else { y0[i] };
                                (p - ds.yf[i]).powi(2)
                            })
                            .sum();
                        Ok((se / rows.len() as f64).sqrt())
                    },
                    &kl,
                    &opts.reject_ks,
                    opts.seed,
                )?,
            ),
        };
        report.curve_metric = Some(name.into());
        report.rejection_curve = curve;
    }
    report.per_sample_kl = kl;
    Ok(report)
}

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: [f64; 3],
    pub standardize: bool,
    pub eval: EvalOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: [0.63, 0.27, 0.10],
            standardize: true,
            eval: EvalOptions::default(),
        }
    }
}

impl ExperimentConfig {
    /// Copy with every seed set to `seed` and `d_x` taken from the data.
    pub fn resolved(&self, seed: u64, d_x: usize) -> ExperimentConfig {
        let mut c = self.clone();
        c.model.d_x = d_x;
        c.train.seed = seed;
        c.eval.seed = seed;
        c
    }
}

pub struct TrainedRun {
    pub model: CibModel,
    pub standardizer: Option<Standardizer>,
    pub splits: SplitIndices,
    pub seed: u64,
    pub log: Vec<LogRecord>,
    pub best_valid_loss: f64,
    pub stopped_early: bool,
}

impl TrainedRun {
    /// Standardized rows of `ds` selected by `idx` (all rows when `None`).
    pub fn prepare(&self, ds: &ObservationalDataset, idx: Option<&[usize]>) -> Result<ObservationalDataset> {
        let part = match idx {
            Some(i) => ds.subset(i),
            None => ds.clone(),
        };
        match &self.standardizer {
            Some(s) => s.apply(&part),
            None => Ok(part),
        }
    }

    pub fn in_sample_rows(&self) -> Vec<usize> {
        self.splits.train.iter().chain(&self.splits.valid).copied().collect()
    }
}

/// Splits with `seed`, standardizes on the training rows, initializes the
/// model from `seed` and trains it.
pub fn train_pipeline(ds: &ObservationalDataset, cfg: &ExperimentConfig, seed: u64) -> Result<TrainedRun> {
    let cfg = cfg.resolved(seed, ds.d_x());
    let splits = split_indices(ds, &SplitSpec { ratios: cfg.split, seed })?;
    let (mut train, mut valid) = (ds.subset(&splits.train), ds.subset(&splits.valid));
    let standardizer = if cfg.standardize {
        let s = Standardizer::fit(&train.x);
        train = s.apply(&train)?;
        valid = s.apply(&valid)?;
        Some(s)
    } else {
        None
    };
    let model = CibModel::new(cfg.model.clone(), seed)?;
    let fit = fit(model, &train, &valid, &cfg.train)?;
    Ok(TrainedRun {
        model: fit.model,
        standardizer,
        splits,
        seed,
        log: fit.log,
        best_valid_loss: fit.best_valid_loss,
        stopped_early: fit.stopped_early,
    })
}

/// In-sample (train + valid) and out-of-sample (test) reports.
pub fn evaluate_run(run: &TrainedRun, ds: &ObservationalDataset, opts: &EvalOptions) -> Result<(EvalReport, EvalReport)> {
    let inside = run.prepare(ds, Some(&run.in_sample_rows()))?;
    let outside = run.prepare(ds, Some(&run.splits.test))?;
    Ok((
        evaluate(&run.model, &inside, opts, true)?,
        evaluate(&run.model, &outside, opts, false)?,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    #[serde(rename = "CIB")]
    Full,
    #[serde(rename = "w/o MIGDR")]
    NoMigdr,
    #[serde(rename = "w/o CPVR")]
    NoCpvr,
    #[serde(rename = "No regularizer")]
    NoRegularizer,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Full,
        AblationVariant::NoMigdr,
        AblationVariant::NoCpvr,
        AblationVariant::NoRegularizer,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::Full => "CIB",
            AblationVariant::NoMigdr => "w/o MIGDR",
            AblationVariant::NoCpvr => "w/o CPVR",
            AblationVariant::NoRegularizer => "No regularizer",
        }
    }

    pub fn apply(self, hyper: &Hyper) -> Hyper {
        let mut h = hyper.clone();
        if matches!(self, AblationVariant::NoMigdr | AblationVariant::NoRegularizer) {
            h.lambda_m = 0.0;
        }
        if matches!(self, AblationVariant::NoCpvr | AblationVariant::NoRegularizer) {
            h.lambda_v = 0.0;
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
    pub values: Vec<f64>,
}

impl MeanSe {
    /// Mean and standard error (sample sd over sqrt n; 0 for a single value).
    pub fn from_values(values: Vec<f64>) -> MeanSe {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        MeanSe { mean, se, n, values }
    }

    pub fn display(&self) -> String {
        format!("{:.3} ± {:.3}", self.mean, self.se)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub metrics: BTreeMap<String, MeanSe>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

fn report_metrics(prefix: &str, r: &EvalReport, out: &mut BTreeMap<String, f64>) {
    let mut put = |name: &str, v: Option<f64>| {
        if let Some(v) = v {
            out.insert(format!("{name}.{prefix}"), v);
        }
    };
    put("sqrtPehe", r.sqrt_pehe);
    put("ateError", r.ate_error);
    put("policyRisk", r.policy_risk);
    put("auc", r.auc);
}

/// Trains the four ablation variants on every `(seed, dataset)` pair; the
/// variants of one pair share the split, initialization and minibatch order.
pub fn ablation_run(
    runs: &[(u64, &ObservationalDataset)],
    base: &ExperimentConfig,
    jobs: usize,
) -> Result<AblationReport> {
    let tasks: Vec<(usize, AblationVariant)> = (0..runs.len())
        .flat_map(|r| AblationVariant::ALL.into_iter().map(move |v| (r, v)))
        .collect();
    let results = parallel_map(&tasks, jobs, &|&(r, variant): &(usize, AblationVariant)| {
        let (seed, ds) = runs[r];
        let mut cfg = base.clone();
        cfg.train.hyper = variant.apply(&base.train.hyper);
        let run = train_pipeline(ds, &cfg, seed)?;
        let (inside, outside) = evaluate_run(&run, ds, &cfg.resolved(seed, ds.d_x()).eval)?;
        let mut m = BTreeMap::new();
        report_metrics("in", &inside, &mut m);
        report_metrics("out", &outside, &mut m);
        Ok(m)
    })?;
    let rows = AblationVariant::ALL
        .iter()
        .map(|&variant| {
            let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for ((_, v), m) in tasks.iter().zip(&results) {
                if *v == variant {
                    for (k, val) in m {
                        per_metric.entry(k.clone()).or_default().push(*val);
                    }
                }
            }
            AblationRow {
                name: variant.label().into(),
                metrics: per_metric
                    .into_iter()
                    .map(|(k, v)| (k, MeanSe::from_values(v)))
                    .collect(),
            }
        })
        .collect();
    Ok(AblationReport {
        seeds: runs.iter().map(|(s, _)| *s).collect(),
        rows,
    })
}

impl AblationReport {
    /// Plain-text table with one row per variant and `mean ± se` cells.
    pub fn table(&self) -> String {
        let metrics: Vec<&String> = self.rows.first().map(|r| r.metrics.keys().collect()).unwrap_or_default();
        let mut out = Vec::new();
        let _ = write!(out, "{:<16}", "");
        for m in &metrics {
            let _ = write!(out, "{m:>20}");
        }
        let _ = writeln!(out);
        for row in &self.rows {
            let _ = write!(out, "{:<16}", row.name);
            for m in &metrics {
                let cell = row.metrics.get(*m).map(MeanSe::display).unwrap_or_default();
                let _ = write!(out, "{cell:>20}");
            }
            let _ = writeln!(out);
        }
        String::from_utf8(out).expect("table is UTF-8")
    }
}

/// Median of a nonempty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ParamId;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn pehe_examples() {
        assert_eq!(sqrt_pehe(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(sqrt_pehe(&[2.0], &[1.0]).unwrap(), 1.0);
        assert!((sqrt_pehe(&[1.0, 3.0], &[0.0, 0.0]).unwrap() - 5f64.sqrt()).abs() < 1e-15);
        assert!(sqrt_pehe(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn policy_risk_examples() {
        let r = policy_risk(&[1.0; 3], &[1.0; 3], &[true; 3], &[0.5, 1.0, 2.0]).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(!r.fallback);
        let r = policy_risk(
            &[1.0, 0.3, 0.7, 0.0],
            &[1.0, 0.0, 1.0, 0.0],
            &[true; 4],
            &[1.0, 1.0, -1.0, -1.0],
        )
        .unwrap();
        assert_eq!(r.value, 0.5);
        // a tie is treated
        let r = policy_risk(&[1.0, 0.0], &[1.0, 0.0], &[true, true], &[0.0, 0.0]).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(policy_risk(&[1.0], &[1.0], &[false], &[1.0]).is_err());
    }

    #[test]
    fn policy_risk_fallback_is_flagged() {
        // policy 0 group {1} has no control row, so its mean falls back to all controls in E
        let r = policy_risk(
            &[1.0, 0.0, 0.4],
            &[1.0, 1.0, 0.0],
            &[true, true, true],
            &[1.0, -1.0, 1.0],
        )
        .unwrap();
        assert!(r.fallback);
        // policy 1 rows {0, 2}: treated {0} mean 1, weight 2/3; policy 0 row {1}: fallback mean 0.4, weight 1/3
        assert!((r.value - (1.0 - (2.0 / 3.0 + 0.4 / 3.0))).abs() < 1e-15);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[false, false, true, true], &[0.1, 0.2, 0.8, 0.9]).unwrap(), 1.0);
        assert_eq!(auc(&[false, true, true, false], &[0.3; 4]).unwrap(), 0.5);
        assert_eq!(auc(&[true, false, true], &[0.9, 0.8, 0.1]).unwrap(), 0.5);
        assert!(auc(&[true, true], &[0.1, 0.2]).is_err());
    }

    proptest! {
        #[test]
        fn auc_is_antisymmetric(scores in proptest::collection::vec(-3i32..3, 4..30), seed in 0u64..100) {
            let mut rng = stream(seed, Stream::Eval);
            let labels: Vec<bool> = (0..scores.len()).map(|i| i % 2 == 0 || rng.gen_bool(0.3)).collect();
            prop_assume!(labels.iter().any(|&l| !l));
            let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            let a = auc(&labels, &s).unwrap();
            let b = auc(&labels, &neg).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn pehe_is_permutation_invariant(v in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..40), seed in 0u64..100) {
            let (a, b): (Vec<f64>, Vec<f64>) = v.iter().copied().unzip();
            let mut idx: Vec<usize> = (0..a.len()).collect();
            idx.shuffle(&mut stream(seed, Stream::Eval));
            let pa: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
            let pb: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
            let x = sqrt_pehe(&a, &b).unwrap();
            let y = sqrt_pehe(&pa, &pb).unwrap();
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x));
        }
    }

    #[test]
    fn rejection_curve_examples() {
        // errors grow with uncertainty
        let err: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let unc = err.clone();
        let metric = |rows: &[usize]| Ok(rows.iter().map(|&i| err[i]).sum::<f64>() / rows.len() as f64);
        let ks = [0.0, 0.1, 0.2, 0.5];
        let curve = rejection_curve(metric, &unc, &ks, 3).unwrap();
        assert_eq!(curve[0].metric, metric(&(0..50).collect::<Vec<_>>()).unwrap());
        assert!(curve.windows(2).all(|w| w[1].metric <= w[0].metric));

        let flat = vec![1.0; 50];
        let c = rejection_curve(metric, &flat, &ks, 3).unwrap();
        assert!(c.iter().all(|p| p.metric == p.control_metric));

        assert!(rejection_curve(metric, &unc, &[0.2, 0.1], 0).is_err());
        assert!(rejection_curve(metric, &unc, &[1.0], 0).is_err());
    }

    fn linear_data(noise: bool) -> ObservationalDataset {
        let mut rng = stream(4, Stream::Data);
        let n = 60;
        let x: Vec<f64> = (0..n * 3).map(|_| rng.sample(StandardNormal)).collect();
        let x = Tensor::matrix(n, 3, x);
        let t: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let mu0: Vec<f64> = (0..n).map(|i| 1.0 + 2.0 * x.row(i)[0] - x.row(i)[2]).collect();
        let mu1: Vec<f64> = (0..n).map(|i| -0.5 + x.row(i)[1] + 3.0 * x.row(i)[2]).collect();
        let yf: Vec<f64> = (0..n)
            .map(|i| {
                let m = if t[i] == 1.0 { mu1[i] } else { mu0[i] };
                m + if noise { rng.sample::<f64, _>(StandardNormal) } else { 0.0 }
            })
            .collect();
        ObservationalDataset {
            x,
            t,
            yf,
            ycf: None,
            mu0: Some(mu0),
            mu1: Some(mu1),
            e: None,
            outcome: OutcomeKind::Continuous,
        }
    }

    #[test]
    fn ols2_recovers_linear_effects() {
        let ds = linear_data(false);
        let m = ols2_baseline(&ds).unwrap();
        let pehe = sqrt_pehe(&ds.true_ite().unwrap(), &m.ite(&ds.x)).unwrap();
        assert!(pehe < 1e-8, "{pehe}");
        assert!(!m.ridge_used);
    }

    #[test]
    fn ols2_hand_solved_and_intercept() {
        // one covariate, two points per group: exact lines through them
        let ds = ObservationalDataset {
            x: Tensor::matrix(4, 1, vec![0.0, 1.0, 0.0, 2.0]),
            t: vec![0.0, 0.0, 1.0, 1.0],
            yf: vec![1.0, 3.0, 0.0, 1.0],
            ycf: None,
            mu0: None,
            mu1: None,
            e: None,
            outcome: OutcomeKind::Continuous,
        };
        let m = ols2_baseline(&ds).unwrap();
        assert!((m.coef0[0] - 1.0).abs() < 1e-12 && (m.coef0[1] - 2.0).abs() < 1e-12);
        assert!((m.coef1[0] - 0.0).abs() < 1e-12 && (m.coef1[1] - 0.5).abs() < 1e-12);

        // constant covariate leaves only the intercept identifiable: ridge gives group means
        let flat = ObservationalDataset {
            x: Tensor::matrix(4, 1, vec![0.0; 4]),
            yf: vec![1.0, 3.0, 5.0, 7.0],
            ..ds
        };
        let m = ols2_baseline(&flat).unwrap();
        assert!((m.coef0[0] - 2.0).abs() < 1e-5 && (m.coef1[0] - 6.0).abs() < 1e-5);
        assert!(m.ridge_used);
    }

    fn constant_model(c0: f64, c1: f64) -> CibModel {
        let mut m = CibModel::new(
            ModelConfig {
                d_x: 3,
                d_z: 2,
                hidden_dims: vec![4],
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap();
        for head in [m.head0.clone(), m.head1.clone()] {
            m.params.set(head.layer.weight, Tensor::zeros(&[2, 1]));
        }
        m.params.set(m.head0.layer.bias, Tensor::vector(vec![c0]));
        m.params.set(m.head1.layer.bias, Tensor::vector(vec![c1]));
        m
    }

    #[test]
    fn constant_heads_give_constant_effect() {
        let m = constant_model(0.25, 1.5);
        let x = linear_data(true).x;
        for mode in [TauMode::Deterministic, TauMode::Sampled { samples: 7, seed: 2 }] {
            let tau = ite_prediction(&m, &x, mode).unwrap();
            assert!(tau.iter().all(|&v| (v - 1.25).abs() < 1e-12));
        }
    }

    #[test]
    fn uncertainty_grows_with_distance_from_prior() {
        let mut m = constant_model(0.0, 0.0);
        let ids: Vec<ParamId> = m.encoder.param_ids();
        for id in ids {
            let s = m.params.get(id).shape().to_vec();
            m.params.set(id, Tensor::zeros(&s));
        }
        // mu = bias of the mean head; sigma fixed by the zero sigma head
        let x = Tensor::zeros(&[1, 3]);
        let mut last = -1.0;
        for shift in [0.0, 0.5, 1.0, 2.0] {
            m.params.set(m.encoder.mu_head.bias, Tensor::vector(vec![shift, 0.0]));
            let k = uncertainty_score(&m, &x).unwrap()[0];
            assert!(k > last);
            last = k;
        }
    }

    #[test]
    fn ablation_variants_zero_the_right_weights() {
        let h = Hyper::default();
        let nr = AblationVariant::NoRegularizer.apply(&h);
        assert_eq!((nr.lambda_m, nr.lambda_v, nr.beta), (0.0, 0.0, h.beta));
        assert_eq!(AblationVariant::NoMigdr.apply(&h).lambda_v, h.lambda_v);
        assert_eq!(AblationVariant::NoCpvr.apply(&h).lambda_m, h.lambda_m);
    }

    #[test]
    fn mean_se_and_median() {
        let m = MeanSe::from_values(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.se - (1.666_666_666_666_666_7f64 / 4.0).sqrt()).abs() < 1e-12);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
