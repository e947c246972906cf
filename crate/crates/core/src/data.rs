//! Observational datasets: CSV ingestion with a JSON schema sidecar, splits,
//! covariate standardization and a semi-synthetic benchmark with known
//! potential outcomes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{sigmoid, Tensor};
use crate::error::{CibError, Result};
use crate::nets::OutcomeKind;
use crate::objective::Batch;
use crate::rng::{stream, Stream};

#[derive(Clone, Debug, PartialEq)]
pub struct ObservationalDataset {
    /// Covariates, `[n, d_x]`.
    pub x: Tensor,
    /// Treatment indicators in {0, 1}.
    pub t: Vec<f64>,
    pub yf: Vec<f64>,
    pub ycf: Option<Vec<f64>>,
    pub mu0: Option<Vec<f64>>,
    pub mu1: Option<Vec<f64>>,
    /// Membership in the randomized subset.
    pub e: Option<Vec<bool>>,
    pub outcome: OutcomeKind,
}

impl ObservationalDataset {
    pub fn n(&self) -> usize {
        self.t.len()
    }

    pub fn d_x(&self) -> usize {
        self.x.cols()
    }

    pub fn treated_count(&self) -> usize {
        self.t.iter().filter(|&&v| v == 1.0).count()
    }

    /// Checks column lengths, treatment values and that both groups exist.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.x.shape().len() != 2 || self.x.rows() != n {
            return Err(CibError::Dimension(format!(
                "covariates {:?} do not match {n} treatment entries",
                self.x.shape()
            )));
        }
        let lens = [
            ("yf", Some(self.yf.len())),
            ("ycf", self.ycf.as_ref().map(Vec::len)),
            ("mu0", self.mu0.as_ref().map(Vec::len)),
            ("mu1", self.mu1.as_ref().map(Vec::len)),
            ("e", self.e.as_ref().map(Vec::len)),
        ];
        for (name, len) in lens {
            if let Some(len) = len {
                if len != n {
                    return Err(CibError::Dimension(format!("column {name} has {len} rows, expected {n}")));
                }
            }
        }
        if let Some(i) = self.t.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(CibError::Data(format!("treatment at row {i} is {}, expected 0 or 1", self.t[i])));
        }
        if self.mu0.is_some() != self.mu1.is_some() {
            return Err(CibError::Data("mu0 and mu1 must be given together".into()));
        }
        let treated = self.treated_count();
        if treated == 0 || treated == n {
            return Err(CibError::Degenerate(format!(
                "{treated} of {n} rows are treated; both groups must be nonempty"
            )));
        }
        Ok(())
    }

    /// Potential outcomes `(y0, y1)` from the factual and counterfactual columns.
    pub fn potential_outcomes(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let ycf = self.ycf.as_ref()?;
        let (mut y0, mut y1) = (Vec::with_capacity(self.n()), Vec::with_capacity(self.n()));
        for ((&t, &yf), &ycf) in self.t.iter().zip(&self.yf).zip(ycf) {
            if t == 1.0 {
                y1.push(yf);
                y0.push(ycf);
            } else {
                y0.push(yf);
                y1.push(ycf);
            }
        }
        Some((y0, y1))
    }

    /// Ground-truth effect per row: `mu1 - mu0` when available, else `y1 - y0`.
    pub fn true_ite(&self) -> Option<Vec<f64>> {
        if let (Some(m0), Some(m1)) = (&self.mu0, &self.mu1) {
            return Some(m1.iter().zip(m0).map(|(a, b)| a - b).collect());
        }
        let (y0, y1) = self.potential_outcomes()?;
        Some(y1.iter().zip(&y0).map(|(a, b)| a - b).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> ObservationalDataset {
        let pick = |v: &Vec<f64>| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        ObservationalDataset {
            x: self.x.select_rows(idx),
            t: pick(&self.t),
            yf: pick(&self.yf),
            ycf: self.ycf.as_ref().map(pick),
            mu0: self.mu0.as_ref().map(pick),
            mu1: self.mu1.as_ref().map(pick),
            e: self.e.as_ref().map(|e| idx.iter().map(|&i| e[i]).collect()),
            outcome: self.outcome,
        }
    }

    /// Row-wise concatenation of datasets with the same columns.
    pub fn concat(parts: &[&ObservationalDataset]) -> Result<ObservationalDataset> {
        let first = parts
            .first()
            .ok_or_else(|| CibError::Data("nothing to concatenate".into()))?;
        let d = first.d_x();
        let mut x = Vec::new();
        let mut out = ObservationalDataset {
            x: Tensor::zeros(&[0, d]),
            t: Vec::new(),
            yf: Vec::new(),
            ycf: first.ycf.as_ref().map(|_| Vec::new()),
            mu0: first.mu0.as_ref().map(|_| Vec::new()),
            mu1: first.mu1.as_ref().map(|_| Vec::new()),
            e: first.e.as_ref().map(|_| Vec::new()),
            outcome: first.outcome,
        };
        fn extend<T: Clone>(dst: &mut Option<Vec<T>>, src: &Option<Vec<T>>) -> Result<()> {
            match (dst, src) {
                (Some(d), Some(s)) => d.extend_from_slice(s),
                (None, None) => {}
                _ => return Err(CibError::Data("datasets have different optional columns".into())),
            }
            Ok(())
        }
        for p in parts {
            if p.d_x() != d {
                return Err(CibError::Dimension(format!("d_x {} vs {d}", p.d_x())));
            }
            x.extend_from_slice(p.x.data());
            out.t.extend_from_slice(&p.t);
            out.yf.extend_from_slice(&p.yf);
            extend(&mut out.ycf, &p.ycf)?;
            extend(&mut out.mu0, &p.mu0)?;
            extend(&mut out.mu1, &p.mu1)?;
            extend(&mut out.e, &p.e)?;
        }
        out.x = Tensor::matrix(out.t.len(), d, x);
        Ok(out)
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        Batch {
            x: self.x.select_rows(idx),
            t: idx.iter().map(|&i| self.t[i]).collect(),
            y: idx.iter().map(|&i| self.yf[i]).collect(),
        }
    }

    pub fn full_batch(&self) -> Batch {
        Batch {
            x: self.x.clone(),
            t: self.t.clone(),
            y: self.yf.clone(),
        }
    }
}

/// Column names of the optional and required fields in a CSV file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    /// Covariate columns in order; empty means `x0..x{d_x-1}`.
    pub x: Vec<String>,
    pub t: String,
    pub yf: String,
    pub ycf: Option<String>,
    pub mu0: Option<String>,
    pub mu1: Option<String>,
    pub e: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            x: Vec::new(),
            t: "t".into(),
            yf: "yf".into(),
            ycf: Some("ycf".into()),
            mu0: Some("mu0".into()),
            mu1: Some("mu1".into()),
            e: Some("e".into()),
        }
    }
}

/// JSON sidecar describing a dataset CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Schema {
    #[serde(rename = "d_x")]
    pub d_x: usize,
    #[serde(default)]
    pub outcome_kind: OutcomeKind,
    #[serde(default)]
    pub column_map: ColumnMap,
}

impl Schema {
    pub fn new(d_x: usize, outcome_kind: OutcomeKind) -> Self {
        Schema {
            d_x,
            outcome_kind,
            column_map: ColumnMap::default(),
        }
    }

    fn covariate_names(&self) -> Vec<String> {
        if self.column_map.x.is_empty() {
            (0..self.d_x).map(|i| format!("x{i}")).collect()
        } else {
            self.column_map.x.clone()
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Schema> {
        let text = fs::read_to_string(&path).map_err(|e| CibError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| CibError::io(&path, e))
    }
}

/// Reads a dataset CSV described by `schema`. Optional columns listed in the
/// schema are read when the header contains them; `row` in parse errors is the
/// 1-based data row.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<ObservationalDataset> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => CibError::io(path, io),
            other => CibError::Data(format!("{shown}: {other:?}")),
        })?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let required = |name: &str| {
        find(name).ok_or_else(|| CibError::Parse {
            path: shown.clone(),
            row: 0,
            column: name.to_string(),
            message: "missing column".into(),
        })
    };
    let names = schema.covariate_names();
    if names.len() != schema.d_x {
        return Err(CibError::Config(format!(
            "schema lists {} covariate columns but d_x = {}",
            names.len(),
            schema.d_x
        )));
    }
    let x_cols: Vec<usize> = names.iter().map(|n| required(n)).collect::<Result<_>>()?;
    let map = &schema.column_map;
    let t_col = required(&map.t)?;
    let yf_col = required(&map.yf)?;
    let opt = |name: &Option<String>| name.as_deref().and_then(|n| find(n).map(|c| (n.to_string(), c)));
    let (ycf_col, mu0_col, mu1_col, e_col) = (opt(&map.ycf), opt(&map.mu0), opt(&map.mu1), opt(&map.e));

    let mut x = Vec::new();
    let (mut t, mut yf) = (Vec::new(), Vec::new());
    let mut ycf = ycf_col.as_ref().map(|_| Vec::new());
    let mut mu0 = mu0_col.as_ref().map(|_| Vec::new());
    let mut mu1 = mu1_col.as_ref().map(|_| Vec::new());
    let mut e = e_col.as_ref().map(|_| Vec::new());
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record?;
        let cell = |col: usize, name: &str| -> Result<f64> {
            let raw = record.get(col).unwrap_or("").trim();
            let err = |message: String| CibError::Parse {
                path: shown.clone(),
                row,
                column: name.to_string(),
                message,
            };
            let v: f64 = raw.parse().map_err(|_| err(format!("cannot parse `{raw}` as a number")))?;
            if !v.is_finite() {
                return Err(err(format!("non-finite value `{raw}`")));
            }
            Ok(v)
        };
        let binary = |v: f64, name: &str| -> Result<f64> {
            if v == 0.0 || v == 1.0 {
                Ok(v)
            } else {
                Err(CibError::Parse {
                    path: shown.clone(),
                    row,
                    column: name.to_string(),
                    message: format!("expected 0 or 1, got {v}"),
                })
            }
        };
        for (c, name) in x_cols.iter().zip(&names) {
            x.push(cell(*c, name)?);
        }
        t.push(binary(cell(t_col, &map.t)?, &map.t)?);
        yf.push(cell(yf_col, &map.yf)?);
        for (col, dst) in [(&ycf_col, &mut ycf), (&mu0_col, &mut mu0), (&mu1_col, &mut mu1)] {
            if let (Some((name, c)), Some(dst)) = (col, dst.as_mut()) {
                dst.push(cell(*c, name)?);
            }
        }
        if let (Some((name, c)), Some(dst)) = (&e_col, e.as_mut()) {
            dst.push(binary(cell(*c, name)?, name)? == 1.0);
        }
    }
    if t.is_empty() {
        return Err(CibError::Data(format!("{shown}: no data rows")));
    }
    let n = t.len();
    let ds = ObservationalDataset {
        x: Tensor::matrix(n, schema.d_x, x),
        t,
        yf,
        ycf,
        mu0,
        mu1,
        e,
        outcome: schema.outcome_kind,
    };
    ds.validate()?;
    log::info!("{shown}: {n} rows, d_x = {}", schema.d_x);
    Ok(ds)
}

/// Writes the dataset with the default column names and returns the
/// matching schema. Values use Rust's shortest round-trip formatting.
pub fn write_csv(ds: &ObservationalDataset, path: impl AsRef<Path>) -> Result<Schema> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => CibError::io(path, io),
        other => CibError::Data(format!("{}: {other:?}", path.display())),
    })?;
    let d = ds.d_x();
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    header.extend(["t".into(), "yf".into()]);
    let optional: Vec<(&str, &Option<Vec<f64>>)> =
        vec![("ycf", &ds.ycf), ("mu0", &ds.mu0), ("mu1", &ds.mu1)];
    for (name, col) in &optional {
        if col.is_some() {
            header.push(name.to_string());
        }
    }
    if ds.e.is_some() {
        header.push("e".into());
    }
    w.write_record(&header)?;
    let mut rec: Vec<String> = Vec::with_capacity(header.len());
    for i in 0..ds.n() {
        rec.clear();
        rec.extend(ds.x.row(i).iter().map(f64::to_string));
        rec.push(ds.t[i].to_string());
        rec.push(ds.yf[i].to_string());
        for (_, col) in &optional {
            if let Some(c) = col {
                rec.push(c[i].to_string());
            }
        }
        if let Some(e) = &ds.e {
            rec.push(if e[i] { "1" } else { "0" }.into());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| CibError::io(path, e))?;
    let mut schema = Schema::new(d, ds.outcome);
    let present = |name: &str, have: bool| have.then(|| name.to_string());
    schema.column_map.ycf = present("ycf", ds.ycf.is_some());
    schema.column_map.mu0 = present("mu0", ds.mu0.is_some());
    schema.column_map.mu1 = present("mu1", ds.mu1.is_some());
    schema.column_map.e = present("e", ds.e.is_some());
    Ok(schema)
}

/// Loads `path`, reading the schema from `schema.json` next to it unless one is given.
pub fn load_with_sidecar(path: impl AsRef<Path>, schema: Option<&Path>) -> Result<ObservationalDataset> {
    let path = path.as_ref();
    let sidecar: PathBuf = match schema {
        Some(s) => s.to_path_buf(),
        None => path.with_file_name("schema.json"),
    };
    load_csv(path, &Schema::read(sidecar)?)
}

/// Every `*.csv` in a directory (sorted by name), sharing the directory's `schema.json`.
pub fn load_realizations(dir: impl AsRef<Path>) -> Result<Vec<(String, ObservationalDataset)>> {
    let dir = dir.as_ref();
    let schema = Schema::read(dir.join("schema.json"))?;
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CibError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CibError::Data(format!("{}: no CSV files", dir.display())));
    }
    files
        .into_iter()
        .map(|p| {
            let name = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            Ok((name, load_csv(&p, &schema)?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
}

/// Row indices of the three splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Split sizes: floor of each `ratio * n`, then the leftover rows one at a
/// time to the splits in decreasing ratio order, starting with the largest.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(CibError::Config(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let mut sizes = [0usize; 3];
    for (s, r) in sizes.iter_mut().zip(ratios) {
        *s = (r * n as f64 + 1e-9).floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| ratios[b].total_cmp(&ratios[a]).then(a.cmp(&b)));
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    if sizes.contains(&0) {
        return Err(CibError::Config(format!("split of {n} rows by {ratios:?} leaves an empty split")));
    }
    Ok(sizes)
}

pub fn split_indices(ds: &ObservationalDataset, spec: &SplitSpec) -> Result<SplitIndices> {
    let [a, b, _] = split_sizes(ds.n(), spec.ratios)?;
    let mut idx: Vec<usize> = (0..ds.n()).collect();
    idx.shuffle(&mut stream(spec.seed, Stream::Splits));
    let out = SplitIndices {
        train: idx[..a].to_vec(),
        valid: idx[a..a + b].to_vec(),
        test: idx[a + b..].to_vec(),
    };
    for (name, part) in [("train", &out.train), ("valid", &out.valid), ("test", &out.test)] {
        let treated = part.iter().filter(|&&i| ds.t[i] == 1.0).count();
        if treated == 0 || treated == part.len() {
            return Err(CibError::Degenerate(format!(
                "{name} split ({} rows) lacks a treatment group",
                part.len()
            )));
        }
    }
    Ok(out)
}

pub fn split(
    ds: &ObservationalDataset,
    spec: &SplitSpec,
) -> Result<(ObservationalDataset, ObservationalDataset, ObservationalDataset)> {
    let s = split_indices(ds, spec)?;
    Ok((ds.subset(&s.train), ds.subset(&s.valid), ds.subset(&s.test)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Scaled,
    Binary,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnTransform {
    pub kind: ColumnKind,
    pub mean: f64,
    pub sd: f64,
}

/// Per-column affine map fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub columns: Vec<ColumnTransform>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl Standardizer {
    /// Means and population standard deviations of non-binary columns.
    pub fn fit(x: &Tensor) -> Standardizer {
        let (n, d) = (x.rows(), x.cols());
        let mut columns = Vec::with_capacity(d);
        let mut warnings = Vec::new();
        for j in 0..d {
            let col: Vec<f64> = (0..n).map(|i| x.data()[i * d + j]).collect();
            if col.iter().all(|&v| v == 0.0 || v == 1.0) {
                columns.push(ColumnTransform {
                    kind: ColumnKind::Binary,
                    mean: 0.0,
                    sd: 1.0,
                });
                continue;
            }
            let mean = col.iter().sum::<f64>() / n as f64;
            let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
            if sd == 0.0 || !sd.is_finite() {
                let msg = format!("column {j} has zero variance and is left unscaled");
                log::warn!("{msg}");
                warnings.push(msg);
                columns.push(ColumnTransform {
                    kind: ColumnKind::Constant,
                    mean: 0.0,
                    sd: 1.0,
                });
            } else {
                columns.push(ColumnTransform {
                    kind: ColumnKind::Scaled,
                    mean,
                    sd,
                });
            }
        }
        Standardizer { columns, warnings }
    }

    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.columns.len();
        if x.cols() != d || x.shape().len() != 2 {
            return Err(CibError::Dimension(format!(
                "standardizer fitted on {d} columns, got {:?}",
                x.shape()
            )));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d.max(1)) {
            for (v, c) in row.iter_mut().zip(&self.columns) {
                if c.kind == ColumnKind::Scaled {
                    *v = (*v - c.mean) / c.sd;
                }
            }
        }
        Ok(out)
    }

    pub fn apply(&self, ds: &ObservationalDataset) -> Result<ObservationalDataset> {
        Ok(ObservationalDataset {
            x: self.transform(&ds.x)?,
            ..ds.clone()
        })
    }
}

/// Fits on `train` and applies the same transform to every dataset given.
pub fn standardize(
    train: &ObservationalDataset,
    others: &[&ObservationalDataset],
) -> Result<(ObservationalDataset, Vec<ObservationalDataset>, Standardizer)> {
    let s = Standardizer::fit(&train.x);
    let tr = s.apply(train)?;
    let rest = others.iter().map(|d| s.apply(d)).collect::<Result<_>>()?;
    Ok((tr, rest, s))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SyntheticSpec {
    pub n: usize,
    #[serde(rename = "d_x")]
    pub d_x: usize,
    /// Selection-bias strength.
    pub bias_strength: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub dataset: ObservationalDataset,
    pub propensity: Vec<f64>,
    pub w0: Vec<f64>,
    pub w1: Vec<f64>,
}

fn random_unit<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|a| a / norm).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Benchmark with `x ~ N(0, I)`, `mu0 = sin(w0.x)`, `mu1 = mu0 + 1 + tanh(w1.x)`
/// and treatment probability `clip(sigmoid(bias * w1.x), 0.05, 0.95)`.
pub fn synthesize_benchmark(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.n < 50 {
        return Err(CibError::Config(format!("n must be at least 50, got {}", spec.n)));
    }
    if spec.d_x < 2 {
        return Err(CibError::Config(format!("d_x must be at least 2, got {}", spec.d_x)));
    }
    if !(spec.noise_sd >= 0.0 && spec.noise_sd.is_finite()) || !spec.bias_strength.is_finite() {
        return Err(CibError::Config("noise sd and bias must be finite, noise sd >= 0".into()));
    }
    let (n, d) = (spec.n, spec.d_x);
    let mut rng = stream(spec.seed, Stream::Data);
    let w0 = random_unit(&mut rng, d);
    let w1 = random_unit(&mut rng, d);
    let x: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| CibError::Config(e.to_string()))?;
    let mut out = SyntheticData {
        dataset: ObservationalDataset {
            x: Tensor::matrix(n, d, x.clone()),
            t: Vec::with_capacity(n),
            yf: Vec::with_capacity(n),
            ycf: Some(Vec::with_capacity(n)),
            mu0: Some(Vec::with_capacity(n)),
            mu1: Some(Vec::with_capacity(n)),
            e: None,
            outcome: OutcomeKind::Continuous,
        },
        propensity: Vec::with_capacity(n),
        w0: w0.clone(),
        w1: w1.clone(),
    };
    let ds = &mut out.dataset;
    for row in x.chunks(d) {
        let (a0, a1) = (dot(&w0, row), dot(&w1, row));
        let m0 = a0.sin();
        let m1 = m0 + 1.0 + a1.tanh();
        let p = sigmoid(spec.bias_strength * a1).clamp(0.05, 0.95);
        let t = if rng.gen::<f64>() < p { 1.0 } else { 0.0 };
        let (y0, y1) = (m0 + noise.sample(&mut rng), m1 + noise.sample(&mut rng));
        let (f, cf) = if t == 1.0 { (y1, y0) } else { (y0, y1) };
        ds.t.push(t);
        ds.yf.push(f);
        if let Some(v) = ds.ycf.as_mut() {
            v.push(cf);
        }
        if let Some(v) = ds.mu0.as_mut() {
            v.push(m0);
        }
        if let Some(v) = ds.mu1.as_mut() {
            v.push(m1);
        }
        out.propensity.push(p);
    }
    out.dataset.validate()?;
    Ok(out)
}

/// Moves a random `fraction` of rows by `magnitude` along one random unit
/// direction (in standard-deviation units of `N(0, I)` covariates) and
/// returns the shifted copy with the per-row shift flags. Outcomes are
/// recomputed from the benchmark's response surfaces.
pub fn shift_covariates(
    data: &SyntheticData,
    fraction: f64,
    magnitude: f64,
    seed: u64,
) -> Result<(ObservationalDataset, Vec<bool>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(CibError::Config(format!("shift fraction {fraction} outside [0, 1]")));
    }
    let ds = &data.dataset;
    let (n, d) = (ds.n(), ds.d_x());
    let mut rng = stream(seed, Stream::Control);
    let u = random_unit(&mut rng, d);
    let count = (fraction * n as f64).round() as usize;
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut rng);
    let mut flags = vec![false; n];
    for &i in &rows[..count] {
        flags[i] = true;
    }
    let mut x = ds.x.clone();
    let mut out = ds.clone();
    let mut ycf_new = out.ycf.clone();
    for i in 0..n {
        if !flags[i] {
            continue;
        }
        let row = &mut x.data_mut()[i * d..(i + 1) * d];
        for (v, ui) in row.iter_mut().zip(&u) {
            *v += magnitude * ui;
        }
        let (a0, a1) = (dot(&data.w0, row), dot(&data.w1, row));
        let m0 = a0.sin();
        let m1 = m0 + 1.0 + a1.tanh();
        // keep the original noise draw of each potential outcome
        let (old0, old1) = (ds.mu0.as_ref().unwrap()[i], ds.mu1.as_ref().unwrap()[i]);
        let (n0, n1) = if ds.t[i] == 1.0 {
            (ds.ycf.as_ref().unwrap()[i] - old0, ds.yf[i] - old1)
        } else {
            (ds.yf[i] - old0, ds.ycf.as_ref().unwrap()[i] - old1)
        };
        let (y0, y1) = (m0 + n0, m1 + n1);
        if ds.t[i] == 1.0 {
            out.yf[i] = y1;
            if let Some(v) = ycf_new.as_mut() {
                v[i] = y0;
            }
        } else {
            out.yf[i] = y0;
            if let Some(v) = ycf_new.as_mut() {
                v[i] = y1;
            }
        }
        out.mu0.as_mut().unwrap()[i] = m0;
        out.mu1.as_mut().unwrap()[i] = m1;
    }
    out.x = x;
    out.ycf = ycf_new;
    Ok((out, flags))
}

/// Summary counts written next to generated data.
pub fn describe(ds: &ObservationalDataset) -> BTreeMap<&'static str, f64> {
    let mut m = BTreeMap::new();
    m.insert("n", ds.n() as f64);
    m.insert("d_x", ds.d_x() as f64);
    m.insert("treated", ds.treated_count() as f64);
    if let Some(tau) = ds.true_ite() {
        m.insert("ate", tau.iter().sum::<f64>() / tau.len() as f64);
    }
    m
}
