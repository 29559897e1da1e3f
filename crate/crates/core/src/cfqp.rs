//! Mixture-of-regressors training for counterfactual query prediction.
//!
//! A shared model `m0` fits `E[Y | X, T]`; residuals `y − m0(x, t)` are
//! clustered; each cluster gets a copy of `m0` that is refined on its members,
//! and membership is re-derived from `argmin_j ‖y − m_j(x, t)‖²` every `delta`
//! epochs. A counterfactual query `(x, t, y, t')` is answered by the model
//! that best explains the factual outcome, evaluated at `t'`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{gmm_fit, kmeans_fit};
use crate::datagen::{unit_rng, GeneratorKind};
use crate::error::{Error, Result};
use crate::matrix::{sq_dist, Matrix};
use crate::nn::{train_subset, AdamState, InputNorm, Mlp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clusterer {
    Kmeans,
    Gmm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfqpConfig {
    pub k: usize,
    pub delta: usize,
    pub epochs0: usize,
    pub epochs1: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub clusterer: Clusterer,
    pub seed: u64,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Adds a linear input-to-output path to every base model.
    #[serde(default)]
    pub shortcut: bool,
    /// Stop as soon as a reassignment pass moves no sample.
    #[serde(default)]
    pub early_stop: bool,
    /// L2 penalty added to the gradient.
    #[serde(default)]
    pub weight_decay: f64,
    /// Weight decay for the per-cluster models; `None` keeps `weight_decay`.
    #[serde(default)]
    pub refine_weight_decay: Option<f64>,
    /// Standardise each input column with training-set statistics.
    #[serde(default)]
    pub standardize: bool,
    /// Start every refinement round from fresh Adam moments.
    #[serde(default)]
    pub reset_adam: bool,
    #[serde(default = "default_restarts")]
    pub kmeans_restarts: usize,
    #[serde(default = "default_iters")]
    pub kmeans_iters: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![128, 128, 128]
}

fn default_restarts() -> usize {
    10
}

fn default_iters() -> usize {
    100
}

impl CfqpConfig {
    /// Defaults for a generator: Δ 20 and 500 + 500 epochs for time series,
    /// Δ 10 and 50 + 50 epochs for images; lr 0.001, batch 128.
    /// Networks carry a linear input-to-output shortcut and L2 decay 3e-3:
    /// with 128 samples a plain MLP memorises the noise and the residuals
    /// stop separating the classes. On cardio and images the per-cluster
    /// models relax the decay to 3e-4; on the oscillator the relaxed models
    /// fit noise and spare clusters start to win validation.
    pub fn for_generator(generator: GeneratorKind, k: usize, seed: u64) -> Self {
        let (delta, epochs) = match generator {
            GeneratorKind::Images => (10, 50),
            _ => (20, 500),
        };
        Self {
            k,
            delta,
            epochs0: epochs,
            epochs1: epochs,
            lr: 0.001,
            batch_size: 128,
            clusterer: Clusterer::Kmeans,
            seed,
            hidden: default_hidden(),
            shortcut: true,
            weight_decay: 3e-3,
            // cardio inputs sit on large offsets with tiny spread
            standardize: generator == GeneratorKind::Cardio,
            refine_weight_decay: match generator {
                GeneratorKind::Oscillator => None,
                _ => Some(3e-4),
            },
            early_stop: false,
            reset_adam: false,
            kmeans_restarts: default_restarts(),
            kmeans_iters: default_iters(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.delta == 0 {
            return Err(Error::Config("delta must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    fn sizes(&self, d_in: usize, d_out: usize) -> Vec<usize> {
        let mut s = vec![d_in];
        s.extend(&self.hidden);
        s.push(d_out);
        s
    }
}

/// The initial model `m0` together with its optimiser state.
#[derive(Clone, Debug)]
pub struct InitModel {
    pub model: Mlp,
    pub adam: AdamState,
    pub loss_trace: Vec<f64>,
}

// stream ids for the training RNGs
const STREAM_INIT: usize = 1 << 40;
const STREAM_CLUSTER: u64 = 0x5eed_c1u64;

fn check_data(x: &Matrix, y: &Matrix) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::Empty("training split".into()));
    }
    if x.rows() != y.rows() {
        return Err(Error::Shape(format!("{} inputs but {} targets", x.rows(), y.rows())));
    }
    Ok(())
}

/// Trains `m0` for `epochs0` epochs on every sample. Inputs are `x ⊕ t`.
pub fn train_init(x: &Matrix, y: &Matrix, cfg: &CfqpConfig) -> Result<InitModel> {
    cfg.validate()?;
    check_data(x, y)?;
    let sizes = cfg.sizes(x.cols(), y.cols());
    let mut model = if cfg.shortcut {
        Mlp::with_shortcut(&sizes, cfg.seed)?
    } else {
        Mlp::new(&sizes, cfg.seed)?
    };
    if cfg.standardize {
        model.set_input_norm(Some(InputNorm::fit(x)?))?;
    }
    let mut adam = AdamState::for_model(&model, cfg.lr);
    adam.weight_decay = cfg.weight_decay;
    let all: Vec<usize> = (0..x.rows()).collect();
    let mut rng = unit_rng(cfg.seed, STREAM_INIT);
    let loss_trace = if cfg.epochs0 > 0 {
        train_subset(&mut model, &mut adam, x, y, &all, cfg.epochs0, cfg.batch_size, &mut rng)?
    } else {
        Vec::new()
    };
    Ok(InitModel {
        model,
        adam,
        loss_trace,
    })
}

/// Residual vectors `y − m0(x, t)`.
pub fn residuals(m0: &Mlp, x: &Matrix, y: &Matrix) -> Result<Matrix> {
    let mut r = m0.forward(x)?;
    for (p, &t) in r.as_mut_slice().iter_mut().zip(y.as_slice()) {
        *p = t - *p;
    }
    Ok(r)
}

/// Initial cluster assignment from clustering the residual vectors.
pub fn initial_cluster(x: &Matrix, y: &Matrix, m0: &Mlp, cfg: &CfqpConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    check_data(x, y)?;
    if cfg.k == 1 {
        return Ok(vec![0; x.rows()]);
    }
    let r = residuals(m0, x, y)?;
    let seed = cfg.seed ^ STREAM_CLUSTER;
    Ok(match cfg.clusterer {
        Clusterer::Kmeans => kmeans_fit(&r, cfg.k, cfg.kmeans_restarts, cfg.kmeans_iters, seed)?.assignment,
        Clusterer::Gmm => gmm_fit(&r, cfg.k, 1000, cfg.kmeans_iters, seed)?.hard_assignment(),
    })
}

/// Statistics of one refinement round and the reassignment that closes it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub epochs: usize,
    /// Sizes of the clusters trained during the round.
    pub cluster_sizes: Vec<usize>,
    /// Per-model epoch losses on its own cluster; empty when frozen.
    pub losses: Vec<Vec<f64>>,
    /// Σ_i ‖y_i − m_{a_i}(x_i)‖² under the assignment before reassignment.
    pub objective_before: f64,
    /// Σ_i min_j ‖y_i − m_j(x_i)‖² after reassignment.
    pub objective_after: f64,
    pub changes: usize,
}

#[derive(Clone, Debug)]
pub struct CfqpModel {
    pub models: Vec<Mlp>,
    pub config: CfqpConfig,
    pub assignment: Vec<usize>,
    pub trace: Vec<RoundStats>,
    /// Index of the round whose reassignment changed nothing, if any.
    pub converged_round: Option<usize>,
}

fn members(assignment: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut m = vec![Vec::new(); k];
    for (i, &a) in assignment.iter().enumerate() {
        m[a].push(i);
    }
    m
}

/// Predictions of every model, one matrix per model.
pub fn predict_all(models: &[Mlp], x: &Matrix) -> Result<Vec<Matrix>> {
    models.par_iter().map(|m| m.forward(x)).collect()
}

/// Argmin over models of the squared factual residual; ties go to the
/// lowest index. Returns the index and its squared residual.
fn argmin_rows(preds: &[Matrix], y: &Matrix) -> Vec<(usize, f64)> {
    (0..y.rows())
        .map(|i| {
            let mut best = (0, f64::INFINITY);
            for (j, p) in preds.iter().enumerate() {
                let d = sq_dist(y.row(i), p.row(i));
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

/// Alternating refinement: `delta` epochs of per-cluster training, then a
/// reassignment of every sample to its best-fitting model, until `epochs1`
/// epochs are spent. An empty cluster leaves its model untouched for the
/// round; it stays a candidate at the next reassignment.
pub fn em_train(
    x: &Matrix,
    y: &Matrix,
    init: &InitModel,
    assignment: Vec<usize>,
    cfg: &CfqpConfig,
) -> Result<CfqpModel> {
    cfg.validate()?;
    check_data(x, y)?;
    if assignment.len() != x.rows() || assignment.iter().any(|&a| a >= cfg.k) {
        return Err(Error::Shape(format!(
            "assignment must have {} entries in [0, {})",
            x.rows(),
            cfg.k
        )));
    }
    let mut models = vec![init.model.clone(); cfg.k];
    let mut adams = vec![init.adam.clone(); cfg.k];
    if let Some(wd) = cfg.refine_weight_decay {
        adams.iter_mut().for_each(|a| a.weight_decay = wd);
    }
    let mut assignment = assignment;
    let mut trace = Vec::new();
    let mut converged_round = None;
    let mut done = 0;
    let mut round = 0;
    while done < cfg.epochs1 {
        let epochs = cfg.delta.min(cfg.epochs1 - done);
        let groups = members(&assignment, cfg.k);
        if cfg.reset_adam {
            adams.iter_mut().for_each(|a| a.reset());
        }
        let losses: Vec<Vec<f64>> = models
            .par_iter_mut()
            .zip(adams.par_iter_mut())
            .zip(groups.par_iter())
            .enumerate()
            .map(|(j, ((m, a), g))| {
                if g.is_empty() {
                    return Ok(Vec::new());
                }
                let mut rng = unit_rng(cfg.seed, round * cfg.k + j);
                train_subset(m, a, x, y, g, epochs, cfg.batch_size, &mut rng)
            })
            .collect::<Result<_>>()?;
        done += epochs;

        let preds = predict_all(&models, x)?;
        let objective_before: f64 = assignment
            .iter()
            .enumerate()
            .map(|(i, &a)| sq_dist(y.row(i), preds[a].row(i)))
            .sum();
        let best = argmin_rows(&preds, y);
        let mut changes = 0;
        let mut objective_after = 0.0;
        for (a, (j, d)) in assignment.iter_mut().zip(best) {
            if *a != j {
                *a = j;
                changes += 1;
            }
            objective_after += d;
        }
        trace.push(RoundStats {
            epochs,
            cluster_sizes: groups.iter().map(Vec::len).collect(),
            losses,
            objective_before,
            objective_after,
            changes,
        });
        log::debug!("round {round}: {changes} reassigned, objective {objective_after:.6}");
        if changes == 0 && converged_round.is_none() {
            converged_round = Some(round);
            if cfg.early_stop {
                break;
            }
        }
        round += 1;
    }
    Ok(CfqpModel {
        models,
        config: cfg.clone(),
        assignment,
        trace,
        converged_round,
    })
}

/// Full pipeline: `m0`, initial clustering and refinement.
pub fn fit(x: &Matrix, y: &Matrix, cfg: &CfqpConfig) -> Result<(InitModel, CfqpModel)> {
    let init = train_init(x, y, cfg)?;
    let model = fit_from(x, y, &init, cfg)?;
    Ok((init, model))
}

/// Clustering and refinement from an already trained `m0`.
pub fn fit_from(x: &Matrix, y: &Matrix, init: &InitModel, cfg: &CfqpConfig) -> Result<CfqpModel> {
    let a = initial_cluster(x, y, &init.model, cfg)?;
    em_train(x, y, init, a, cfg)
}

/// Copy of `x` with its last column (the treatment) set to `t`.
pub fn with_treatment(x: &Matrix, t: &[f64]) -> Result<Matrix> {
    if t.len() != x.rows() || x.cols() == 0 {
        return Err(Error::Shape(format!(
            "{} treatments for {} inputs",
            t.len(),
            x.rows()
        )));
    }
    let mut out = x.clone();
    let c = x.cols() - 1;
    for (i, &v) in t.iter().enumerate() {
        out.set(i, c, v);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelMeta {
    config: CfqpConfig,
    assignment: Vec<usize>,
    trace: Vec<RoundStats>,
    converged_round: Option<usize>,
}

impl CfqpModel {
    pub fn k(&self) -> usize {
        self.models.len()
    }

    /// Cluster of one factual observation.
    pub fn infer_cluster(&self, input: &[f64], y: &[f64]) -> Result<usize> {
        let mut best = (0, f64::INFINITY);
        for (j, m) in self.models.iter().enumerate() {
            let d = sq_dist(y, &m.predict_one(input)?);
            if d < best.1 {
                best = (j, d);
            }
        }
        Ok(best.0)
    }

    /// Clusters of a batch of factual observations (`x` includes `t`).
    pub fn infer_clusters(&self, x: &Matrix, y: &Matrix) -> Result<Vec<usize>> {
        check_data(x, y)?;
        let preds = predict_all(&self.models, x)?;
        Ok(argmin_rows(&preds, y).into_iter().map(|(j, _)| j).collect())
    }

    fn gather(&self, x: &Matrix, clusters: &[usize]) -> Result<Matrix> {
        let preds = predict_all(&self.models, x)?;
        let d = self.models[0].output_dim();
        let mut out = Matrix::zeros(x.rows(), d);
        for (i, &k) in clusters.iter().enumerate() {
            out.row_mut(i).copy_from_slice(preds[k].row(i));
        }
        Ok(out)
    }

    /// Factual reconstruction `m_k(x, t)` with `k` inferred from `y`.
    pub fn reconstruct(&self, x: &Matrix, y: &Matrix) -> Result<Matrix> {
        let k = self.infer_clusters(x, y)?;
        self.gather(x, &k)
    }

    /// Counterfactual predictions `m_k(x, t')`, `k` inferred from `(x, t, y)`.
    pub fn predict_cf(&self, x: &Matrix, y: &Matrix, t_prime: &[f64]) -> Result<Matrix> {
        let k = self.infer_clusters(x, y)?;
        self.gather(&with_treatment(x, t_prime)?, &k)
    }

    /// Reorders the models; `perm[j]` is the old index of the new model `j`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut inv = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        Self {
            models: perm.iter().map(|&o| self.models[o].clone()).collect(),
            config: self.config.clone(),
            assignment: self.assignment.iter().map(|&a| inv[a]).collect(),
            trace: self.trace.clone(),
            converged_round: self.converged_round,
        }
    }

    /// Writes `meta.json` and `model_<j>.{json,bin}` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (j, m) in self.models.iter().enumerate() {
            let steps: usize = self.trace.iter().map(|r| r.epochs).sum();
            m.save(&dir.join(format!("model_{j}")), self.config.seed, steps as u64)?;
        }
        let meta = ModelMeta {
            config: self.config.clone(),
            assignment: self.assignment.clone(),
            trace: self.trace.clone(),
            converged_round: self.converged_round,
        };
        let p = dir.join("meta.json");
        std::fs::write(&p, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("meta.json");
        let meta: ModelMeta =
            serde_json::from_slice(&std::fs::read(&p).map_err(|e| Error::io(&p, e))?)?;
        let models = (0..meta.config.k)
            .map(|j| Mlp::load(&dir.join(format!("model_{j}"))).map(|(m, _)| m))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            models,
            config: meta.config,
            assignment: meta.assignment,
            trace: meta.trace,
            converged_round: meta.converged_round,
        })
    }
}

/// One row of a K sweep.
#[derive(Clone, Debug)]
pub struct KCandidate {
    pub k: usize,
    pub val_mse: f64,
    pub model: CfqpModel,
}

#[derive(Clone, Debug)]
pub struct KSelection {
    pub best_k: usize,
    pub init: InitModel,
    pub candidates: Vec<KCandidate>,
}

impl KSelection {
    pub fn best(&self) -> &KCandidate {
        self.candidates.iter().find(|c| c.k == self.best_k).unwrap()
    }
}

/// Trains one model per `K` from a shared `m0` and picks the `K` with the
/// lowest validation reconstruction error (cluster inferred from the
/// validation factual outcome). Ties go to the smaller `K`.
pub fn select_k(
    train: (&Matrix, &Matrix),
    val: (&Matrix, &Matrix),
    cfg: &CfqpConfig,
    k_range: &[usize],
    channels: usize,
) -> Result<KSelection> {
    if k_range.is_empty() {
        return Err(Error::Empty("K range".into()));
    }
    let init = train_init(train.0, train.1, cfg)?;
    let candidates = k_range
        .iter()
        .map(|&k| {
            let c = CfqpConfig { k, ..cfg.clone() };
            let model = fit_from(train.0, train.1, &init, &c)?;
            let rec = model.reconstruct(val.0, val.1)?;
            let val_mse = crate::metrics::cf_mse(val.1, &rec, channels)?;
            log::info!("K = {k}: validation MSE {val_mse:.6}");
            Ok(KCandidate { k, val_mse, model })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = &candidates[0];
    for c in &candidates[1..] {
        if c.val_mse < best.val_mse {
            best = c;
        }
    }
    Ok(KSelection {
        best_k: best.k,
        init,
        candidates,
    })
}
