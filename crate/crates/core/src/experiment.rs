//! Experiment harness: configs, folds, methods, metrics and result tables.
//!
//! A fold re-seeds both data generation and training (`seed + fold`), so a
//! config and its base seed fully determine every emitted number. Wall time
//! is the one non-deterministic quantity and is written as 0 unless
//! `record_wall_time` is set.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha1::{Digest, Sha1};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::baselines::{deep_ite_predict, ScConfig, ScModel};
use crate::cfqp::{fit_from, select_k, train_init, CfqpConfig, CfqpModel};
use crate::datagen::{
    draw_unit, generate, tuple_features, unit_rng, CfTuple, Dataset, GenConfig, GeneratorKind, Split,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::{cf_mse, pehe, ssim_batch};
use crate::oracle::{bound_check, BoundCheckConfig, BoundReport};

pub const SSIM_WINDOW: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cfqp,
    DeepIte,
    Sc,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Cfqp => "cfqp",
            Method::DeepIte => "deep_ite",
            Method::Sc => "sc",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    CfMse,
    Pehe,
    Ssim,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::CfMse => "cf_mse",
            Metric::Pehe => "pehe",
            Metric::Ssim => "ssim",
        }
    }
}

/// Settings for `oracle_check`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub bound: BoundCheckConfig,
    /// Sample sizes to check; empty means `bound.n` only.
    pub n_values: Vec<usize>,
    /// Stream of the unit whose covariates are held fixed.
    pub unit: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            bound: BoundCheckConfig::default(),
            n_values: vec![500, 2000, 5000],
            unit: 0,
        }
    }
}

/// An experiment as read from JSON.
///
/// `data` must name `generator` and `noise_mode`; every other key overrides
/// the generator preset. `cfqp` overrides the trainer defaults for that
/// generator (`k` defaults to the generator's class count). Seeds inside
/// either object are replaced by the per-fold seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: Map<String, Value>,
    #[serde(default)]
    pub cfqp: Map<String, Value>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub sc: ScConfig,
    /// Treatment pair `(t', t'')` for PEHE.
    #[serde(default = "default_pehe")]
    pub pehe: [f64; 2],
    /// Candidate K for `sweep_k`; empty means `1..=k0 + 3`.
    #[serde(default)]
    pub k_range: Vec<usize>,
    #[serde(default = "default_rho")]
    pub rho_values: Vec<f64>,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub record_wall_time: bool,
    /// Write the fitted CFQP model of every fold under `out/fold_<f>/cfqp`.
    #[serde(default)]
    pub save_checkpoints: bool,
}

fn default_seed() -> u64 {
    1
}

fn default_methods() -> Vec<Method> {
    vec![Method::Cfqp, Method::DeepIte, Method::Sc]
}

fn default_metrics() -> Vec<Metric> {
    vec![Metric::CfMse]
}

fn default_out() -> PathBuf {
    PathBuf::from("results")
}

fn default_folds() -> usize {
    5
}

fn default_pehe() -> [f64; 2] {
    [0.5, 0.8]
}

fn default_rho() -> Vec<f64> {
    vec![0.0, 0.5, 1.0]
}

fn merge(base: Value, overrides: &Map<String, Value>) -> Value {
    let mut base = base;
    if let Value::Object(m) = &mut base {
        for (k, v) in overrides {
            m.insert(k.clone(), v.clone());
        }
    }
    base
}

fn field<T: serde::de::DeserializeOwned>(m: &Map<String, Value>, key: &str) -> Result<T> {
    let v = m
        .get(key)
        .ok_or_else(|| Error::Config(format!("data.{key} is required")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("data.{key}: {e}")))
}

impl ExperimentConfig {
    /// Preset config for a generator and noise mode with every default.
    pub fn preset(generator: GeneratorKind, noise: crate::datagen::NoiseMode) -> Self {
        let mut data = Map::new();
        data.insert("generator".into(), serde_json::to_value(generator).unwrap());
        data.insert("noise_mode".into(), serde_json::to_value(noise).unwrap());
        serde_json::from_value(serde_json::json!({ "data": data })).unwrap()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Generation settings for one fold.
    pub fn gen_config(&self, fold: usize) -> Result<GenConfig> {
        let seed = self.fold_seed(fold);
        let preset = match field::<GeneratorKind>(&self.data, "generator")? {
            GeneratorKind::Oscillator => GenConfig::oscillator,
            GeneratorKind::Cardio => GenConfig::cardio,
            GeneratorKind::Images => GenConfig::images,
        };
        let base = preset(field(&self.data, "noise_mode")?, seed);
        let mut merged = merge(serde_json::to_value(base)?, &self.data);
        merged["seed"] = seed.into();
        let g: GenConfig =
            serde_json::from_value(merged).map_err(|e| Error::Config(format!("data: {e}")))?;
        g.validate()?;
        Ok(g)
    }

    /// Trainer settings for one fold.
    pub fn cfqp_config(&self, gen: &GenConfig) -> Result<CfqpConfig> {
        let base = CfqpConfig::for_generator(gen.generator, gen.k0, gen.seed);
        let mut merged = merge(serde_json::to_value(base)?, &self.cfqp);
        merged["seed"] = gen.seed.into();
        let c: CfqpConfig =
            serde_json::from_value(merged).map_err(|e| Error::Config(format!("cfqp: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn fold_seed(&self, fold: usize) -> u64 {
        self.seed.wrapping_add(fold as u64)
    }

    pub fn k_values(&self, k0: usize) -> Vec<usize> {
        if self.k_range.is_empty() {
            (1..=k0 + 3).collect()
        } else {
            self.k_range.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds == 0 {
            return Err(Error::Config("folds must be at least 1".into()));
        }
        if self.methods.is_empty() || self.metrics.is_empty() {
            return Err(Error::Config("method and metric lists must be non-empty".into()));
        }
        let gen = self.gen_config(0)?;
        self.cfqp_config(&gen)?;
        if self.metrics.contains(&Metric::Ssim) && gen.generator != GeneratorKind::Images {
            return Err(Error::Config("ssim is only defined for image outcomes".into()));
        }
        if self.k_range.contains(&0) {
            return Err(Error::Config("k_range entries must be at least 1".into()));
        }
        if let Some(r) = self.rho_values.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Config(format!("rho values must lie in [0, 1], got {r}")));
        }
        Ok(())
    }

    /// Git-style blob hash (`sha1("blob <len>\0" ++ json)`) of the config
    /// with the output directory cleared.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let body = serde_json::to_vec(&c).expect("config serialises");
        let mut h = Sha1::new();
        h.update(format!("blob {}\0", body.len()).as_bytes());
        h.update(&body);
        h.finalize().iter().fold(String::with_capacity(40), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// One aggregated line of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub noise: String,
    pub method: String,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation over `folds`; 0 for a single fold.
    pub std: f64,
    pub folds: Vec<f64>,
    pub seed: u64,
    pub config_hash: String,
    pub wall_s: f64,
}

impl ResultRow {
    /// Two-sided 95% Student-t interval of the fold mean.
    pub fn ci95(&self) -> (f64, f64) {
        let n = self.folds.len();
        if n < 2 {
            return (self.mean, self.mean);
        }
        let q = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .expect("positive degrees of freedom")
            .inverse_cdf(0.975);
        let h = q * self.std / (n as f64).sqrt();
        (self.mean - h, self.mean + h)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn get(&self, method: &str, metric: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.method == method && r.metric == metric)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "dataset",
            "noise",
            "method",
            "metric",
            "mean",
            "std",
            "folds",
            "seed",
            "config_hash",
            "wall_s",
        ])?;
        for r in &self.rows {
            let folds = r.folds.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";");
            w.write_record([
                r.dataset.clone(),
                r.noise.clone(),
                r.method.clone(),
                r.metric.clone(),
                r.mean.to_string(),
                r.std.to_string(),
                folds,
                r.seed.to_string(),
                r.config_hash.clone(),
                r.wall_s.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// One evaluated quantity inside a fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub method: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub seed: u64,
    /// `"ok"` or `"error"`.
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub values: Vec<Measurement>,
    /// Training plus prediction time per method.
    pub wall_s: Vec<(String, f64)>,
}

impl FoldRecord {
    fn failed(fold: usize, seed: u64, e: &Error) -> Self {
        log::error!("fold {fold} (seed {seed}) aborted: {e}");
        Self {
            fold,
            seed,
            status: "error".into(),
            error: Some(e.to_string()),
            values: Vec::new(),
            wall_s: Vec::new(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn value(&self, method: &str, metric: &str) -> Option<f64> {
        self.values
            .iter()
            .find(|m| m.method == method && m.metric == metric)
            .map(|m| m.value)
    }
}

/// Table plus per-fold detail of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub config_hash: String,
    pub table: ResultsTable,
    pub folds: Vec<FoldRecord>,
}

impl RunOutput {
    /// Fold values of one method and metric (NaN where the fold failed).
    pub fn fold_values(&self, method: &str, metric: &str) -> Vec<f64> {
        self.folds
            .iter()
            .map(|f| f.value(method, metric).unwrap_or(f64::NAN))
            .collect()
    }

}

/// Aggregates fold records into rows, one per `(method, metric)` key in
/// first-seen order. Failed folds enter as NaN.
fn aggregate(
    folds: &[FoldRecord],
    keys: &[(String, String)],
    dataset: &str,
    noise: &str,
    cfg: &ExperimentConfig,
    hash: &str,
) -> ResultsTable {
    let rows = keys
        .iter()
        .map(|(method, metric)| {
            let vals: Vec<f64> = folds
                .iter()
                .map(|f| f.value(method, metric).unwrap_or(f64::NAN))
                .collect();
            let (mean, std) = mean_std(&vals);
            let wall = if cfg.record_wall_time {
                let w: Vec<f64> = folds
                    .iter()
                    .filter_map(|f| f.wall_s.iter().find(|(m, _)| m == method).map(|(_, s)| *s))
                    .collect();
                w.iter().sum::<f64>() / w.len().max(1) as f64
            } else {
                0.0
            };
            ResultRow {
                dataset: dataset.into(),
                noise: noise.into(),
                method: method.clone(),
                metric: metric.clone(),
                mean,
                std,
                folds: vals,
                seed: cfg.seed,
                config_hash: hash.into(),
                wall_s: wall,
            }
        })
        .collect();
    ResultsTable { rows }
}

fn outcome_matrix(q: &[CfTuple], prime: bool) -> Matrix {
    let d = q.first().map(|c| c.y.len()).unwrap_or(0);
    let mut m = Matrix::zeros(q.len(), d);
    for (i, c) in q.iter().enumerate() {
        let src = if prime { &c.y_prime } else { &c.y };
        for (o, &v) in m.row_mut(i).iter_mut().zip(src) {
            *o = v as f64;
        }
    }
    m
}

fn raw_covariates(ds: &Dataset, idx: &[usize]) -> Matrix {
    let mut m = Matrix::zeros(idx.len(), ds.x_dim);
    for (r, &i) in idx.iter().enumerate() {
        for (o, &v) in m.row_mut(r).iter_mut().zip(ds.x_row(i)) {
            *o = v as f64;
        }
    }
    m
}

/// Test-set queries and ground truth shared by every method of a fold.
struct TestSet {
    x: Matrix,
    x_raw: Matrix,
    y: Matrix,
    y_prime: Matrix,
    t_prime: Vec<f64>,
    pehe_truth: Option<(Matrix, Matrix)>,
}

impl TestSet {
    fn build(ds: &Dataset, cfg: &ExperimentConfig) -> Result<Self> {
        let q = ds.counterfactual_queries(ds.config.seed)?;
        let idx: Vec<usize> = q.iter().map(|c| c.index).collect();
        let pehe_truth = if cfg.metrics.contains(&Metric::Pehe) {
            let a = ds.counterfactuals_at(cfg.pehe[0])?;
            let b = ds.counterfactuals_at(cfg.pehe[1])?;
            Some((outcome_matrix(&a, true), outcome_matrix(&b, true)))
        } else {
            None
        };
        Ok(Self {
            x: tuple_features(&q, false),
            x_raw: raw_covariates(ds, &idx),
            y: outcome_matrix(&q, false),
            y_prime: outcome_matrix(&q, true),
            t_prime: q.iter().map(|c| c.t_prime).collect(),
            pehe_truth,
        })
    }
}

enum Fitted {
    Cfqp(CfqpModel),
    DeepIte(CfqpModel),
    Sc(ScModel),
}

impl Fitted {
    fn predict(&self, ts: &TestSet, t_prime: &[f64]) -> Result<Matrix> {
        match self {
            Fitted::Cfqp(m) => m.predict_cf(&ts.x, &ts.y, t_prime),
            Fitted::DeepIte(m) => deep_ite_predict(&m.models[0], &ts.x, t_prime),
            Fitted::Sc(m) => m.predict(&ts.x_raw, &ts.y, t_prime),
        }
    }
}

fn evaluate(
    fitted: &Fitted,
    ts: &TestSet,
    ds: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<Vec<(Metric, f64)>> {
    let ch = ds.y_channels;
    let pred = fitted.predict(ts, &ts.t_prime)?;
    cfg.metrics
        .iter()
        .map(|&m| {
            let v = match m {
                Metric::CfMse => cf_mse(&ts.y_prime, &pred, ch)?,
                Metric::Ssim => {
                    let mut p = pred.clone();
                    p.as_mut_slice().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
                    let s = ds.config.image_size;
                    ssim_batch(&ts.y_prime, &p, s, s, ch, SSIM_WINDOW)?
                }
                Metric::Pehe => {
                    let (ya, yb) = ts.pehe_truth.as_ref().expect("built when requested");
                    let n = ts.x.rows();
                    let pa = fitted.predict(ts, &vec![cfg.pehe[0]; n])?;
                    let pb = fitted.predict(ts, &vec![cfg.pehe[1]; n])?;
                    pehe(ya, yb, &pa, &pb, ch)?
                }
            };
            Ok((m, v))
        })
        .collect()
}

fn run_fold(cfg: &ExperimentConfig, gen: &GenConfig, fold: usize) -> Result<FoldRecord> {
    let ds = generate(gen)?;
    let tcfg = cfg.cfqp_config(gen)?;
    let tr = ds.indices(Split::Train);
    let (x, y) = (ds.features(&tr), ds.targets(&tr));
    let ts = TestSet::build(&ds, cfg)?;
    let needs_init = cfg.methods.iter().any(|m| matches!(m, Method::Cfqp | Method::DeepIte));
    let started = Instant::now();
    let init = if needs_init { Some(train_init(&x, &y, &tcfg)?) } else { None };
    let init_s = started.elapsed().as_secs_f64();
    let mut values = Vec::new();
    let mut wall = Vec::new();
    for &method in &cfg.methods {
        let started = Instant::now();
        let fitted = match method {
            Method::Cfqp => Fitted::Cfqp(fit_from(&x, &y, init.as_ref().unwrap(), &tcfg)?),
            Method::DeepIte => {
                let one = CfqpConfig { k: 1, ..tcfg.clone() };
                Fitted::DeepIte(fit_from(&x, &y, init.as_ref().unwrap(), &one)?)
            }
            Method::Sc => {
                let t: Vec<f64> = tr.iter().map(|&i| ds.t[i] as f64).collect();
                Fitted::Sc(ScModel::new(&raw_covariates(&ds, &tr), &y, &t, cfg.sc.clone())?)
            }
        };
        if let (Fitted::Cfqp(m), true) = (&fitted, cfg.save_checkpoints) {
            m.save(&cfg.out.join(format!("fold_{fold}")).join("cfqp"))?;
        }
        for (metric, v) in evaluate(&fitted, &ts, &ds, cfg)? {
            values.push(Measurement {
                method: method.name().into(),
                metric: metric.name().into(),
                value: v,
            });
        }
        let mut secs = started.elapsed().as_secs_f64();
        if !matches!(method, Method::Sc) {
            // m0 is shared by both network methods
            secs += init_s;
        }
        wall.push((method.name().to_string(), secs));
        log::info!("fold {fold}: {} done in {secs:.1}s", method.name());
    }
    Ok(FoldRecord {
        fold,
        seed: gen.seed,
        status: "ok".into(),
        error: None,
        values,
        wall_s: wall,
    })
}

fn write_artifacts<T: Serialize>(
    cfg: &ExperimentConfig,
    stem: &str,
    table: &ResultsTable,
    detail: &T,
) -> Result<()> {
    let dir = &cfg.out;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(format!("{stem}.csv"));
    std::fs::write(&p, table.to_csv()?).map_err(|e| Error::io(&p, e))?;
    let body = serde_json::json!({ "config": cfg, "output": detail });
    let p = dir.join(format!("{stem}.json"));
    std::fs::write(&p, serde_json::to_vec_pretty(&body)?).map_err(|e| Error::io(&p, e))
}

fn noise_name(gen: &GenConfig) -> &'static str {
    gen.noise_mode.name()
}

fn run_folds(
    cfg: &ExperimentConfig,
    gen_for: impl Fn(usize) -> Result<GenConfig> + Sync,
) -> Vec<FoldRecord> {
    (0..cfg.folds)
        .into_par_iter()
        .map(|f| {
            let seed = cfg.fold_seed(f);
            gen_for(f)
                .and_then(|g| run_fold(cfg, &g, f))
                .unwrap_or_else(|e| FoldRecord::failed(f, seed, &e))
        })
        .collect()
}

fn method_metric_keys(cfg: &ExperimentConfig) -> Vec<(String, String)> {
    cfg.metrics
        .iter()
        .flat_map(|m| cfg.methods.iter().map(move |a| (a.name().to_string(), m.name().to_string())))
        .collect()
}

/// Trains and evaluates every method on every fold, then writes
/// `results.csv` and `results.json` under `cfg.out`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let gen = cfg.gen_config(0)?;
    let hash = cfg.hash();
    let folds = run_folds(cfg, |f| cfg.gen_config(f));
    let table = aggregate(
        &folds,
        &method_metric_keys(cfg),
        gen.generator.name(),
        noise_name(&gen),
        cfg,
        &hash,
    );
    let out = RunOutput {
        config_hash: hash,
        table,
        folds,
    };
    write_artifacts(cfg, "results", &out.table, &out)?;
    Ok(out)
}

/// Validation and test error of one K within a fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KPoint {
    pub k: usize,
    pub val_mse: f64,
    pub cf_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepKFold {
    pub fold: usize,
    pub seed: u64,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub best_k: Option<usize>,
    pub points: Vec<KPoint>,
    pub wall_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepKOutput {
    pub config_hash: String,
    pub k_range: Vec<usize>,
    pub table: ResultsTable,
    pub folds: Vec<SweepKFold>,
}

impl SweepKOutput {
    /// K with the lowest fold-averaged validation error (ties to the smaller K).
    pub fn mean_argmin(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for &k in &self.k_range {
            let m = self
                .table
                .get(&format!("cfqp_k{k}"), "val_mse")
                .map(|r| r.mean)
                .unwrap_or(f64::NAN);
            if m.is_finite() && best.map_or(true, |(_, b)| m < b) {
                best = Some((k, m));
            }
        }
        best.map(|(k, _)| k)
    }
}

fn sweep_k_fold(cfg: &ExperimentConfig, ks: &[usize], fold: usize) -> Result<SweepKFold> {
    let started = Instant::now();
    let gen = cfg.gen_config(fold)?;
    let ds = generate(&gen)?;
    let tcfg = cfg.cfqp_config(&gen)?;
    let (tr, va) = (ds.indices(Split::Train), ds.indices(Split::Val));
    let (x, y) = (ds.features(&tr), ds.targets(&tr));
    let (xv, yv) = (ds.features(&va), ds.targets(&va));
    let ts = TestSet::build(&ds, cfg)?;
    let sel = select_k((&x, &y), (&xv, &yv), &tcfg, ks, ds.y_channels)?;
    let points = sel
        .candidates
        .iter()
        .map(|c| {
            let p = c.model.predict_cf(&ts.x, &ts.y, &ts.t_prime)?;
            Ok(KPoint {
                k: c.k,
                val_mse: c.val_mse,
                cf_mse: cf_mse(&ts.y_prime, &p, ds.y_channels)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepKFold {
        fold,
        seed: gen.seed,
        status: "ok".into(),
        error: None,
        best_k: Some(sel.best_k),
        points,
        wall_s: started.elapsed().as_secs_f64(),
    })
}

/// Per-fold K selection over `cfg.k_range`; writes `sweep_k.{csv,json}`.
///
/// Rows: `cfqp_k<K>` with metrics `val_mse` and `cf_mse`, and `cfqp` with
/// metric `best_k`.
pub fn sweep_k(cfg: &ExperimentConfig) -> Result<SweepKOutput> {
    cfg.validate()?;
    let gen = cfg.gen_config(0)?;
    let ks = cfg.k_values(gen.k0);
    let hash = cfg.hash();
    let folds: Vec<SweepKFold> = (0..cfg.folds)
        .into_par_iter()
        .map(|f| {
            sweep_k_fold(cfg, &ks, f).unwrap_or_else(|e| {
                log::error!("fold {f} aborted: {e}");
                SweepKFold {
                    fold: f,
                    seed: cfg.fold_seed(f),
                    status: "error".into(),
                    error: Some(e.to_string()),
                    best_k: None,
                    points: Vec::new(),
                    wall_s: 0.0,
                }
            })
        })
        .collect();
    // reuse the generic aggregation through fold records
    let records: Vec<FoldRecord> = folds
        .iter()
        .map(|f| {
            let mut values = Vec::new();
            for p in &f.points {
                let method = format!("cfqp_k{}", p.k);
                for (metric, v) in [("val_mse", p.val_mse), ("cf_mse", p.cf_mse)] {
                    values.push(Measurement {
                        method: method.clone(),
                        metric: metric.into(),
                        value: v,
                    });
                }
            }
            if let Some(k) = f.best_k {
                values.push(Measurement {
                    method: "cfqp".into(),
                    metric: "best_k".into(),
                    value: k as f64,
                });
            }
            FoldRecord {
                fold: f.fold,
                seed: f.seed,
                status: f.status.clone(),
                error: f.error.clone(),
                values,
                wall_s: vec![("cfqp".into(), f.wall_s)],
            }
        })
        .collect();
    let mut keys: Vec<(String, String)> = Vec::new();
    for k in &ks {
        for metric in ["val_mse", "cf_mse"] {
            keys.push((format!("cfqp_k{k}"), metric.into()));
        }
    }
    keys.push(("cfqp".into(), "best_k".into()));
    let table = aggregate(&records, &keys, gen.generator.name(), noise_name(&gen), cfg, &hash);
    let out = SweepKOutput {
        config_hash: hash,
        k_range: ks,
        table,
        folds,
    };
    write_artifacts(cfg, "sweep_k", &out.table, &out)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhoPoint {
    pub rho: f64,
    pub folds: Vec<FoldRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRhoOutput {
    pub config_hash: String,
    /// Rows carry the dataset label `images_rho<ρ>`.
    pub table: ResultsTable,
    pub points: Vec<RhoPoint>,
}

impl SweepRhoOutput {
    pub fn row(&self, rho: f64, method: &str, metric: &str) -> Option<&ResultRow> {
        let label = rho_label(rho);
        self.table
            .rows
            .iter()
            .find(|r| r.dataset == label && r.method == method && r.metric == metric)
    }
}

fn rho_label(rho: f64) -> String {
    format!("images_rho{rho}")
}

/// Runs every method at each `rho` in `cfg.rho_values` (image generator
/// only); writes `sweep_rho.{csv,json}`.
pub fn sweep_rho(cfg: &ExperimentConfig) -> Result<SweepRhoOutput> {
    cfg.validate()?;
    let gen = cfg.gen_config(0)?;
    if gen.generator != GeneratorKind::Images {
        return Err(Error::Config(format!(
            "sweep_rho needs the image generator, got {}",
            gen.generator.name()
        )));
    }
    if cfg.rho_values.is_empty() {
        return Err(Error::Config("rho_values is empty".into()));
    }
    let hash = cfg.hash();
    let keys = method_metric_keys(cfg);
    let mut table = ResultsTable::default();
    let mut points = Vec::new();
    for &rho in &cfg.rho_values {
        let folds = run_folds(cfg, |f| {
            let g = GenConfig { rho, ..cfg.gen_config(f)? };
            g.validate()?;
            Ok(g)
        });
        let t = aggregate(&folds, &keys, &rho_label(rho), noise_name(&gen), cfg, &hash);
        table.rows.extend(t.rows);
        points.push(RhoPoint { rho, folds });
    }
    let out = SweepRhoOutput {
        config_hash: hash,
        table,
        points,
    };
    write_artifacts(cfg, "sweep_rho", &out.table, &out)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleOutput {
    pub config_hash: String,
    pub reports: Vec<BoundReport>,
    /// `e_w1` non-increasing over `n`, allowing one rise that stays inside
    /// the previous report's bootstrap interval.
    pub trend_ok: bool,
    /// The largest-`n` check passes and the trend holds.
    pub pass: bool,
}

/// Whether `e_w1` is non-increasing along `reports` (sorted by `n`), with at
/// most one inversion and that one inside the preceding bootstrap interval.
pub fn trend_non_increasing(reports: &[BoundReport]) -> bool {
    let mut inversions = 0;
    for w in reports.windows(2) {
        if w[1].e_w1 > w[0].e_w1 {
            if w[1].e_w1 > w[0].ci_high {
                return false;
            }
            inversions += 1;
        }
    }
    inversions <= 1
}

/// Bound check on the first fold's generator at one fixed unit, for every
/// sample size in `cfg.oracle.n_values`; writes `oracle_report.json`.
pub fn oracle_check(cfg: &ExperimentConfig) -> Result<OracleOutput> {
    cfg.validate()?;
    let gen = cfg.gen_config(0)?;
    let sim = gen.simulator()?;
    let unit = draw_unit(sim.as_ref(), &mut unit_rng(gen.seed, cfg.oracle.unit));
    let mut ns = if cfg.oracle.n_values.is_empty() {
        vec![cfg.oracle.bound.n]
    } else {
        cfg.oracle.n_values.clone()
    };
    ns.sort_unstable();
    let reports = ns
        .iter()
        .map(|&n| {
            let b = BoundCheckConfig {
                n,
                ..cfg.oracle.bound.clone()
            };
            let r = bound_check(sim.as_ref(), &unit.latents, &b)?;
            log::info!("n = {n}: E[W1] = {:.5}, delta = {:.5}, pass = {}", r.e_w1, r.delta_hat, r.pass);
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let trend_ok = trend_non_increasing(&reports);
    let out = OracleOutput {
        config_hash: cfg.hash(),
        pass: trend_ok && reports.last().map_or(false, |r| r.pass),
        reports,
        trend_ok,
    };
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let p = cfg.out.join("oracle_report.json");
    std::fs::write(&p, serde_json::to_vec_pretty(&out)?).map_err(|e| Error::io(&p, e))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::NoiseMode;

    fn tiny(out: &Path) -> ExperimentConfig {
        let text = serde_json::json!({
            "data": {
                "generator": "oscillator",
                "noise_mode": "additive",
                "n_train": 32, "n_val": 16, "n_test": 12
            },
            "cfqp": { "epochs0": 4, "epochs1": 4, "delta": 2, "hidden": [8], "batch_size": 16 },
            "folds": 2,
            "metrics": ["cf_mse", "pehe"],
            "out": out,
        });
        ExperimentConfig::from_json(&text.to_string()).unwrap()
    }

    #[test]
    fn csv_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let out = run(&tiny(dir.path())).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "dataset,noise,method,metric,mean,std,folds,seed,config_hash,wall_s"
        );
        // three methods times two metrics
        assert_eq!(lines.count(), 6);
        for r in &out.table.rows {
            assert_eq!(r.folds.len(), 2);
            assert_eq!(r.config_hash.len(), 40);
            assert_eq!(r.wall_s, 0.0);
            assert!(r.mean.is_finite());
        }
        assert!(dir.path().join("results.json").exists());
    }

    #[test]
    fn reruns_are_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run(&tiny(a.path())).unwrap();
        run(&tiny(b.path())).unwrap();
        let read = |d: &Path| std::fs::read(d.join("results.csv")).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
    }

    #[test]
    fn single_fold_has_zero_std() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { folds: 1, ..tiny(dir.path()) };
        let out = run(&cfg).unwrap();
        assert!(out.table.rows.iter().all(|r| r.std == 0.0 && r.folds.len() == 1));
    }

    #[test]
    fn k_range_of_one_matches_deep_ite() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            folds: 1,
            k_range: vec![1],
            methods: vec![Method::DeepIte],
            metrics: vec![Metric::CfMse],
            ..tiny(dir.path())
        };
        let s = sweep_k(&cfg).unwrap();
        let r = run(&cfg).unwrap();
        assert_eq!(s.folds[0].points.len(), 1);
        assert_eq!(s.folds[0].points[0].cf_mse, r.folds[0].value("deep_ite", "cf_mse").unwrap());
        assert_eq!(s.mean_argmin(), Some(1));
    }

    #[test]
    fn failing_fold_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.methods = vec![Method::Sc];
        cfg.sc.window = 0.0;
        let out = run(&cfg).unwrap();
        assert!(out.folds.iter().all(|f| f.status == "error" && f.error.is_some()));
        assert!(out.table.rows[0].mean.is_nan());
    }

    #[test]
    fn hash_tracks_content_not_output_dir() {
        let a = tiny(Path::new("a"));
        let b = tiny(Path::new("b"));
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig { seed: 2, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn blob_hash_of_known_body() {
        // `git hash-object` of an empty blob
        let mut h = Sha1::new();
        h.update(b"blob 0\0");
        let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(hex, "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    }

    #[test]
    fn overrides_reach_generator_and_trainer() {
        let cfg = tiny(Path::new("x"));
        let g = cfg.gen_config(1).unwrap();
        assert_eq!((g.n_train, g.seed), (32, 2));
        let c = cfg.cfqp_config(&g).unwrap();
        assert_eq!((c.k, c.seed, c.hidden.clone()), (3, 2, vec![8]));
        assert_eq!(c.lr, 0.001);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            r#"{"data": {"generator": "oscillator", "noise_mode": "additive"}, "folds": 0}"#,
            r#"{"data": {"generator": "oscillator", "noise_mode": "additive"}, "metrics": ["ssim"]}"#,
            r#"{"data": {"generator": "oscillator"}}"#,
            r#"{"data": {"generator": "oscillator", "noise_mode": "additive"}, "bogus": 1}"#,
            r#"{"data": {"generator": "oscillator", "noise_mode": "additive"}, "cfqp": {"lr": -1}}"#,
        ];
        for b in bad {
            assert!(matches!(ExperimentConfig::from_json(b), Err(Error::Config(_))), "{b}");
        }
    }

    #[test]
    fn sweep_rho_rejects_time_series() {
        let cfg = ExperimentConfig::preset(GeneratorKind::Cardio, NoiseMode::Additive);
        assert!(matches!(sweep_rho(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn sample_std() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn student_interval_for_five_folds() {
        let r = ResultRow {
            dataset: String::new(),
            noise: String::new(),
            method: String::new(),
            metric: String::new(),
            mean: 1.0,
            std: 1.0,
            folds: vec![0.0; 5],
            seed: 1,
            config_hash: String::new(),
            wall_s: 0.0,
        };
        // t quantile 0.975 with 4 degrees of freedom is 2.7764
        let (lo, hi) = r.ci95();
        assert!((hi - 1.0 - 2.7764 / 5f64.sqrt()).abs() < 1e-4);
        assert!((1.0 - lo - (hi - 1.0)).abs() < 1e-12);
    }

    fn report(e: f64, hi: f64) -> BoundReport {
        BoundReport {
            x: vec![],
            t: 0.0,
            t_prime: 0.0,
            n: 0,
            e_w1: e,
            delta_hat: 0.0,
            ci_low: 0.0,
            ci_high: hi,
            margin: 0.0,
            pass: true,
            path_points: 2,
            reference: String::new(),
        }
    }

    #[test]
    fn trend_rule() {
        assert!(trend_non_increasing(&[report(0.3, 0.4), report(0.2, 0.25), report(0.1, 0.12)]));
        // one rise inside the previous interval
        assert!(trend_non_increasing(&[report(0.3, 0.4), report(0.35, 0.45), report(0.1, 0.12)]));
        // rise outside the interval
        assert!(!trend_non_increasing(&[report(0.3, 0.32), report(0.35, 0.4), report(0.1, 0.12)]));
        // two rises
        assert!(!trend_non_increasing(&[report(0.3, 0.4), report(0.31, 0.4), report(0.32, 0.4)]));
    }
}
