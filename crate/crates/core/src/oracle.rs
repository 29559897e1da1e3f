//! Constructive side of the identifiability argument, at desk scale.
//!
//! At a fixed `(x, t)` the outcome is a finite mixture; [`fit_pointwise`]
//! recovers it from samples, [`posterior_weights`] abducts the class of a
//! factual outcome, and the two counterfactual estimators put that class
//! posterior on the component means (or on noise-transported outcomes) at
//! `(x, t')`. Component labels from independent fits are arbitrary, so
//! [`align_components`] chains them along a path. [`bound_check`] measures
//! `E_Y[W1(ν_t', ν̂_t')]` against the clusterability constant `δ`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::clustering::{gmm_fit, log_gauss_diag, logsumexp, VARIANCE_FLOOR};
use crate::datagen::{sample_categorical, unit_rng, Simulator};
use crate::error::{Error, Result};
use crate::matrix::{dist, Matrix};
use crate::metrics::{w1_discrete, w1_exact, DiscreteDistribution};

/// Sample count below which pointwise fits are flagged as coarse.
pub const RECOMMENDED_SAMPLES: usize = 10_000;

/// Smallest per-coordinate variance [`cf_estimator_additive`] will invert.
pub const COVARIANCE_FLOOR: f64 = 1e-12;

/// Largest grid [`align_adaptive`] refines to.
pub const MAX_PATH_POINTS: usize = 1 << 10;

/// Diagonal Gaussian mixture describing `Y | X = x, T = t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointwiseMixture {
    pub weights: Vec<f64>,
    /// `K × d` component means.
    pub means: Matrix,
    /// `K × d` per-coordinate variances.
    pub variances: Matrix,
}

impl PointwiseMixture {
    pub fn new(weights: Vec<f64>, means: Matrix, variances: Matrix) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::Empty("mixture with no components".into()));
        }
        if means.rows() != k || variances.rows() != k || means.cols() != variances.cols() {
            return Err(Error::Shape(format!(
                "{k} weights, {}x{} means, {}x{} variances",
                means.rows(),
                means.cols(),
                variances.rows(),
                variances.cols()
            )));
        }
        let s: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture weights sum to {s}")));
        }
        if variances.as_slice().iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config("variances must be positive and finite".into()));
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    /// Relabels components: component `j` of the result is `perm[j]` here.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.k())?;
        Ok(Self {
            weights: perm.iter().map(|&p| self.weights[p]).collect(),
            means: self.means.select_rows(perm),
            variances: self.variances.select_rows(perm),
        })
    }
}

fn check_permutation(perm: &[usize], k: usize) -> Result<()> {
    let mut seen = vec![false; k];
    for &p in perm {
        if p >= k || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Config(format!("{perm:?} is not a permutation of 0..{k}")));
        }
    }
    if perm.len() != k {
        return Err(Error::Config(format!("{perm:?} is not a permutation of 0..{k}")));
    }
    Ok(())
}

/// Diagonal-covariance mixture fitted to samples of `Y` drawn at one `(x, t)`.
pub fn fit_pointwise(samples: &Matrix, k: usize, seed: u64) -> Result<PointwiseMixture> {
    if samples.rows() < RECOMMENDED_SAMPLES {
        log::debug!(
            "pointwise fit on {} samples (recommended {})",
            samples.rows(),
            RECOMMENDED_SAMPLES
        );
    }
    let g = gmm_fit(samples, k, samples.rows(), 300, seed)?;
    PointwiseMixture::new(g.weights, g.means, g.variances)
}

/// Class posterior `ω̂_k ∝ ω_k N(y; μ_k, Σ_k)`. Falls back to uniform
/// weights, with a warning, when every density underflows.
pub fn posterior_weights(y: &[f64], mix: &PointwiseMixture) -> Result<Vec<f64>> {
    if y.len() != mix.dim() {
        return Err(Error::Shape(format!(
            "outcome of length {} for a {}-dimensional mixture",
            y.len(),
            mix.dim()
        )));
    }
    let lj: Vec<f64> = (0..mix.k())
        .map(|j| mix.weights[j].ln() + log_gauss_diag(y, mix.means.row(j), mix.variances.row(j)))
        .collect();
    let z = logsumexp(&lj);
    if !z.is_finite() {
        log::warn!("all component densities underflow; using uniform class weights");
        return Ok(vec![1.0 / mix.k() as f64; mix.k()]);
    }
    Ok(lj.iter().map(|a| (a - z).exp()).collect())
}

/// `ν̂ = Σ_k ω̂_k δ(μ̂_k(x, t'))`.
pub fn cf_estimator_discrete(posterior: &[f64], means_t_prime: &Matrix) -> Result<DiscreteDistribution> {
    if posterior.len() != means_t_prime.rows() {
        return Err(Error::Shape(format!(
            "{} posterior weights for {} means",
            posterior.len(),
            means_t_prime.rows()
        )));
    }
    DiscreteDistribution::new(means_t_prime.clone(), renormalised(posterior))
}

fn renormalised(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Additive-noise estimator: per class, abduct `u = S_k(x,t)⁻¹ (y − μ_k(x,t))`
/// with `S_k` the per-coordinate standard deviation, and move it to
/// `S_k(x,t') u + μ_k(x,t')`. Atoms carry the posterior at `(x, t)`.
/// Components of the two mixtures must already be aligned.
pub fn cf_estimator_additive(
    y: &[f64],
    at_t: &PointwiseMixture,
    at_t_prime: &PointwiseMixture,
) -> Result<DiscreteDistribution> {
    if at_t.k() != at_t_prime.k() || at_t.dim() != at_t_prime.dim() {
        return Err(Error::Shape("mixtures at t and t' differ in shape".into()));
    }
    for mix in [at_t, at_t_prime] {
        if let Some(&v) = mix.variances.as_slice().iter().find(|&&v| v < COVARIANCE_FLOOR) {
            return Err(Error::SingularCovariance {
                value: v,
                floor: COVARIANCE_FLOOR,
            });
        }
    }
    let w = posterior_weights(y, at_t)?;
    let mut atoms = Matrix::zeros(at_t.k(), at_t.dim());
    for k in 0..at_t.k() {
        let (m, v) = (at_t.means.row(k), at_t.variances.row(k));
        let (m2, v2) = (at_t_prime.means.row(k), at_t_prime.variances.row(k));
        for (i, a) in atoms.row_mut(k).iter_mut().enumerate() {
            let u = (y[i] - m[i]) / v[i].sqrt();
            *a = v2[i].sqrt() * u + m2[i];
        }
    }
    DiscreteDistribution::new(atoms, renormalised(&w))
}

/// A point `(x, t)` on an alignment path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub x: Vec<f64>,
    pub t: f64,
}

impl PathPoint {
    pub fn lerp(&self, other: &PathPoint, s: f64) -> PathPoint {
        PathPoint {
            x: self.x.iter().zip(&other.x).map(|(a, b)| a + s * (b - a)).collect(),
            t: self.t + s * (other.t - self.t),
        }
    }
}

/// Component labels tracked along a path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMap {
    pub points: Vec<PathPoint>,
    /// `permutations[i][j]`: label at point `i` of the component labelled
    /// `j` at the first point.
    pub permutations: Vec<Vec<usize>>,
}

impl AlignmentMap {
    pub fn last(&self) -> &[usize] {
        self.permutations.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Greedy nearest-mean matching `from → to`. Fails when the largest matched
/// drift reaches the smallest separation between components, or when some
/// component has two candidates within that drift.
fn match_step(from: &Matrix, to: &Matrix) -> Option<Vec<usize>> {
    let k = from.rows();
    let mut pairs: Vec<(f64, usize, usize)> = (0..k)
        .flat_map(|a| (0..k).map(move |b| (a, b)))
        .map(|(a, b)| (dist(from.row(a), to.row(b)), a, b))
        .collect();
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut map = vec![usize::MAX; k];
    let mut used = vec![false; k];
    for &(_, a, b) in &pairs {
        if map[a] == usize::MAX && !used[b] {
            map[a] = b;
            used[b] = true;
        }
    }
    let drift = (0..k).map(|a| dist(from.row(a), to.row(map[a]))).fold(0.0, f64::max);
    let separation = [from, to]
        .iter()
        .flat_map(|m| (0..k).flat_map(move |a| (a + 1..k).map(move |b| dist(m.row(a), m.row(b)))))
        .fold(f64::INFINITY, f64::min);
    if k > 1 && drift >= separation {
        return None;
    }
    let ambiguous = (0..k).any(|a| (0..k).filter(|&b| dist(from.row(a), to.row(b)) <= drift * (1.0 + 1e-9)).count() > 1);
    (!ambiguous).then_some(map)
}

/// Chains nearest-mean matchings between consecutive points of a fixed grid.
pub fn align_components(path: &[PathPoint], mixtures: &[PointwiseMixture]) -> Result<AlignmentMap> {
    if path.len() != mixtures.len() {
        return Err(Error::Shape(format!(
            "{} path points but {} mixtures",
            path.len(),
            mixtures.len()
        )));
    }
    let Some(first) = mixtures.first() else {
        return Err(Error::Empty("alignment path has no points".into()));
    };
    let k = first.k();
    if mixtures.iter().any(|m| m.k() != k || m.dim() != first.dim()) {
        return Err(Error::Shape("mixtures along the path differ in shape".into()));
    }
    let mut permutations = vec![(0..k).collect::<Vec<_>>()];
    for i in 1..mixtures.len() {
        let step = match_step(&mixtures[i - 1].means, &mixtures[i].means)
            .ok_or(Error::AmbiguousAlignment { index: i })?;
        let prev = &permutations[i - 1];
        permutations.push(prev.iter().map(|&p| step[p]).collect());
    }
    Ok(AlignmentMap {
        points: path.to_vec(),
        permutations,
    })
}

/// Aligns from `start` to `end` over an initial grid of `initial_points`
/// evenly spaced points, fitting mixtures on demand and halving any step
/// whose matching is ambiguous, up to [`MAX_PATH_POINTS`] points. Label
/// swaps that happen strictly between two unambiguous grid points are not
/// seen, so the initial grid should resolve the path's curvature.
pub fn align_adaptive<F>(
    start: &PathPoint,
    end: &PathPoint,
    initial_points: usize,
    mut mixture_at: F,
) -> Result<(AlignmentMap, Vec<PointwiseMixture>)>
where
    F: FnMut(&PathPoint) -> Result<PointwiseMixture>,
{
    let n0 = initial_points.clamp(2, MAX_PATH_POINTS);
    // (position along the path, point, fitted mixture)
    let mut grid = Vec::with_capacity(n0);
    for i in 0..n0 {
        let s = i as f64 / (n0 - 1) as f64;
        let p = if i == 0 {
            start.clone()
        } else if i == n0 - 1 {
            end.clone()
        } else {
            start.lerp(end, s)
        };
        let m = mixture_at(&p)?;
        grid.push((s, p, m));
    }
    let mut i = 1;
    while i < grid.len() {
        if match_step(&grid[i - 1].2.means, &grid[i].2.means).is_some() {
            i += 1;
            continue;
        }
        if grid.len() >= MAX_PATH_POINTS {
            return Err(Error::AmbiguousAlignment { index: i });
        }
        let s = 0.5 * (grid[i - 1].0 + grid[i].0);
        let p = start.lerp(end, s);
        let m = mixture_at(&p)?;
        grid.insert(i, (s, p, m));
    }
    let (points, mixtures): (Vec<_>, Vec<_>) = grid.into_iter().map(|(_, p, m)| (p, m)).unzip();
    Ok((align_components(&points, &mixtures)?, mixtures))
}

/// Settings for [`bound_check`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundCheckConfig {
    pub t: f64,
    pub t_prime: f64,
    /// Samples per pointwise mixture fit.
    pub n: usize,
    /// Mixture components; `None` uses the generator's class count.
    pub k: Option<usize>,
    /// Factual outcomes averaged over for `E_Y`.
    pub n_eval: usize,
    /// Latent resamplings for the reference counterfactual law.
    pub n_truth: usize,
    pub bootstrap: usize,
    /// Initial alignment grid from `t` to `t'`, endpoints included.
    pub path_points: usize,
    pub seed: u64,
}

impl Default for BoundCheckConfig {
    fn default() -> Self {
        Self {
            t: 0.4,
            t_prime: 0.8,
            n: 5000,
            k: None,
            n_eval: 200,
            n_truth: 10_000,
            bootstrap: 1000,
            path_points: 3,
            seed: 1,
        }
    }
}

/// Outcome of [`bound_check`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub x: Vec<f64>,
    pub t: f64,
    pub t_prime: f64,
    pub n: usize,
    /// Monte-Carlo `E_Y[W1(ν_t', ν̂_t')]`.
    pub e_w1: f64,
    /// `max_k E‖Y − μ̂_k‖` over every fitted treatment level.
    pub delta_hat: f64,
    /// 95% bootstrap interval of `e_w1`.
    pub ci_low: f64,
    pub ci_high: f64,
    /// Allowance added to `delta_hat`: the gap between `e_w1 − delta_hat`
    /// and the lower 2.5% bootstrap quantile of that difference.
    pub margin: f64,
    pub pass: bool,
    /// Points the component alignment from `t` to `t'` needed.
    pub path_points: usize,
    /// How the reference counterfactual law was built.
    pub reference: String,
}

/// Draws `n` outcomes at fixed covariate latents and treatment; returns the
/// outcomes and their classes.
pub fn sample_outcomes(
    sim: &dyn Simulator,
    covariate_latents: &[f32],
    t: f64,
    n: usize,
    class: Option<u8>,
    rng: &mut ChaCha8Rng,
) -> Result<(Matrix, Vec<u8>)> {
    let prior = sim.class_prior(covariate_latents);
    let mut out = Matrix::zeros(n, sim.y_dim());
    let mut classes = Vec::with_capacity(n);
    let mut lat = covariate_latents.to_vec();
    for i in 0..n {
        let u = class.unwrap_or_else(|| sample_categorical(&prior, rng) as u8);
        sim.draw_outcome_latents(&mut lat, rng);
        let y = sim.outcome(&lat, u, t)?;
        for (o, v) in out.row_mut(i).iter_mut().zip(y) {
            *o = v as f64;
        }
        classes.push(u);
    }
    Ok((out, classes))
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Responsibility-weighted `E‖Y − μ̂_k‖` per component, as sums over samples.
struct Deviation {
    /// `[sample][component]` responsibility and distance.
    resp: Vec<Vec<f64>>,
    dist: Vec<Vec<f64>>,
}

impl Deviation {
    fn new(samples: &Matrix, mix: &PointwiseMixture) -> Result<Self> {
        let mut resp = Vec::with_capacity(samples.rows());
        let mut d = Vec::with_capacity(samples.rows());
        for y in samples.iter_rows() {
            resp.push(posterior_weights(y, mix)?);
            d.push((0..mix.k()).map(|k| dist(y, mix.means.row(k))).collect());
        }
        Ok(Self { resp, dist: d })
    }

    fn max_over(&self, idx: impl Iterator<Item = usize> + Clone) -> f64 {
        let k = self.resp.first().map_or(0, Vec::len);
        (0..k)
            .map(|j| {
                let (mut num, mut den) = (0.0, 0.0);
                for i in idx.clone() {
                    num += self.resp[i][j] * self.dist[i][j];
                    den += self.resp[i][j];
                }
                if den > 0.0 {
                    num / den
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Empirical check of `E_Y[W1(ν_t', ν̂_t')] ≤ δ` at the unit whose
/// covariate-side latents are `covariate_latents`.
///
/// ν̂ puts the fitted posterior at `(x, t)` on the fitted means at `(x, t')`,
/// with labels carried across by [`align_adaptive`]. The reference ν mixes
/// `n_truth` class-labelled resamplings at `(x, t')` with the class posterior
/// of diagonal Gaussians moment-matched to labelled resamplings at `(x, t)`.
pub fn bound_check(sim: &dyn Simulator, covariate_latents: &[f32], cfg: &BoundCheckConfig) -> Result<BoundReport> {
    let classes = sim.num_classes();
    let k = cfg.k.unwrap_or(classes);
    if cfg.n < k || cfg.n_eval == 0 || cfg.n_truth < classes || cfg.bootstrap == 0 {
        return Err(Error::Config(
            "bound check needs n ≥ k and positive n_eval, n_truth and bootstrap".into(),
        ));
    }
    let x: Vec<f64> = sim.covariates(covariate_latents)?.into_iter().map(f64::from).collect();
    let start = PathPoint { x: x.clone(), t: cfg.t };
    let end = PathPoint { x: x.clone(), t: cfg.t_prime };

    // fitted side; every path point gets its own stream
    let mut fitted_samples = Vec::new();
    let mut stream = 0usize;
    let (align, mixtures) = align_adaptive(&start, &end, cfg.path_points, |p| {
        stream += 1;
        let mut rng = unit_rng(cfg.seed, stream);
        let (s, _) = sample_outcomes(sim, covariate_latents, p.t, cfg.n, None, &mut rng)?;
        let mix = fit_pointwise(&s, k, cfg.seed.wrapping_add(stream as u64))?;
        fitted_samples.push((p.t, s));
        Ok(mix)
    })?;
    let mix_t = &mixtures[0];
    let mix_tp = mixtures.last().expect("path has two ends").permuted(align.last())?;

    // clusterability constant over every fitted level
    let deviations: Vec<Deviation> = fitted_samples
        .iter()
        .zip(fitted_order(&fitted_samples, &align))
        .map(|((_, s), m)| Deviation::new(s, &mixtures[m]))
        .collect::<Result<_>>()?;
    let delta_hat = deviations
        .iter()
        .map(|d| d.max_over(0..d.resp.len()))
        .fold(0.0, f64::max);

    // reference law: labelled resamplings at t (for class likelihoods) and t'
    let mut rng = unit_rng(cfg.seed, 0);
    let per_class = cfg.n_truth / classes;
    let mut truth_atoms = Vec::with_capacity(classes);
    let mut class_gauss = Vec::with_capacity(classes);
    for c in 0..classes {
        let (at_t, _) = sample_outcomes(sim, covariate_latents, cfg.t, per_class, Some(c as u8), &mut rng)?;
        let mean = at_t.column_means();
        let var: Vec<f64> = (0..at_t.cols())
            .map(|j| {
                let v = at_t.iter_rows().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / per_class as f64;
                v.max(VARIANCE_FLOOR)
            })
            .collect();
        class_gauss.push((mean, var));
        truth_atoms.push(sample_outcomes(sim, covariate_latents, cfg.t_prime, per_class, Some(c as u8), &mut rng)?.0);
    }
    let prior = sim.class_prior(covariate_latents);

    // factual draws for E_Y
    let mut eval_rng = unit_rng(cfg.seed ^ 0x5eed, 0);
    let (ys, _) = sample_outcomes(sim, covariate_latents, cfg.t, cfg.n_eval, None, &mut eval_rng)?;
    let mut w1s = Vec::with_capacity(cfg.n_eval);
    for y in ys.iter_rows() {
        let lj: Vec<f64> = (0..classes)
            .map(|c| prior[c].ln() + log_gauss_diag(y, &class_gauss[c].0, &class_gauss[c].1))
            .collect();
        let z = logsumexp(&lj);
        let post: Vec<f64> = if z.is_finite() {
            lj.iter().map(|a| (a - z).exp()).collect()
        } else {
            prior.clone()
        };
        let truth = mixture_of_samples(&post, &truth_atoms)?;
        let est = cf_estimator_discrete(&posterior_weights(y, mix_t)?, &mix_tp.means)?;
        w1s.push(w1_exact(&truth, &est)?);
    }
    let e_w1 = w1s.iter().sum::<f64>() / w1s.len() as f64;

    // joint bootstrap of e_w1 and delta_hat
    let mut boot_rng = unit_rng(cfg.seed ^ 0xb007, 0);
    let mut e_reps = Vec::with_capacity(cfg.bootstrap);
    let mut diff_reps = Vec::with_capacity(cfg.bootstrap);
    for _ in 0..cfg.bootstrap {
        let e = (0..w1s.len()).map(|_| w1s[boot_rng.gen_range(0..w1s.len())]).sum::<f64>() / w1s.len() as f64;
        let d = deviations
            .iter()
            .map(|dev| {
                let n = dev.resp.len();
                let idx: Vec<usize> = (0..n).map(|_| boot_rng.gen_range(0..n)).collect();
                dev.max_over(idx.into_iter())
            })
            .fold(0.0, f64::max);
        e_reps.push(e);
        diff_reps.push(e - d);
    }
    e_reps.sort_by(f64::total_cmp);
    diff_reps.sort_by(f64::total_cmp);
    let margin = ((e_w1 - delta_hat) - quantile(&diff_reps, 0.025)).max(0.0);
    // round-off allowance for the deterministic limit
    let slack = 1e-9 * (1.0 + delta_hat);
    Ok(BoundReport {
        x,
        t: cfg.t,
        t_prime: cfg.t_prime,
        n: cfg.n,
        e_w1,
        delta_hat,
        ci_low: quantile(&e_reps, 0.025),
        ci_high: quantile(&e_reps, 0.975),
        margin,
        pass: e_w1 <= delta_hat + margin + slack,
        path_points: align.points.len(),
        reference: format!(
            "{per_class} class-labelled latent resamplings per class at t'; class posterior from \
             moment-matched diagonal Gaussians on {per_class} labelled resamplings per class at t"
        ),
    })
}

/// Index into the alignment's mixtures of each fitted sample set, matched by
/// treatment level (fits are recorded in evaluation order, not path order).
fn fitted_order(fitted: &[(f64, Matrix)], align: &AlignmentMap) -> Vec<usize> {
    fitted
        .iter()
        .map(|(t, _)| {
            align
                .points
                .iter()
                .position(|p| p.t == *t)
                .expect("every fitted level lies on the path")
        })
        .collect()
}

/// `Σ_c w_c · Unif(samples_c)`, dropping classes of negligible weight.
fn mixture_of_samples(weights: &[f64], samples: &[Matrix]) -> Result<DiscreteDistribution> {
    let keep: Vec<usize> = (0..weights.len()).filter(|&c| weights[c] > 1e-15).collect();
    let total: f64 = keep.iter().map(|&c| weights[c]).sum();
    let mut rows = Vec::new();
    let mut w = Vec::new();
    for &c in &keep {
        let m = samples[c].rows() as f64;
        for r in samples[c].iter_rows() {
            rows.push(r.to_vec());
            w.push(weights[c] / total / m);
        }
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    DiscreteDistribution::new(Matrix::from_rows(&rows)?, w)
}

/// Closed-form additive Gaussian SCM used to certify the additive estimator:
/// `Y = μ_k(t) + s_k(t) ⊙ U`, `U ~ N(0, I)`, with `μ_k(t) = a_k + b_k t` and
/// `s_k(t) = c_k (1 + t/2)`. The counterfactual given `(y, t)` is known
/// exactly: `Σ_k P(k | y) δ(μ_k(t') + s_k(t')/s_k(t) ⊙ (y − μ_k(t)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdditiveScm {
    pub weights: Vec<f64>,
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
}

impl AdditiveScm {
    /// Two well-separated heteroscedastic classes in two dimensions.
    pub fn standard() -> Self {
        let m = |rows: &[&[f64]]| Matrix::from_rows(rows).unwrap();
        Self {
            weights: vec![0.4, 0.6],
            a: m(&[&[0.0, 0.0], &[3.0, -1.0]]),
            b: m(&[&[1.0, 0.5], &[-0.5, 1.5]]),
            c: m(&[&[0.20, 0.10], &[0.15, 0.25]]),
        }
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn mean(&self, k: usize, t: f64) -> Vec<f64> {
        self.a.row(k).iter().zip(self.b.row(k)).map(|(a, b)| a + b * t).collect()
    }

    pub fn scale(&self, k: usize, t: f64) -> Vec<f64> {
        self.c.row(k).iter().map(|c| c * (1.0 + 0.5 * t)).collect()
    }

    pub fn mixture(&self, t: f64) -> PointwiseMixture {
        let k = self.k();
        let means = Matrix::from_rows(&(0..k).map(|j| self.mean(j, t)).collect::<Vec<_>>()).unwrap();
        let vars = Matrix::from_rows(
            &(0..k)
                .map(|j| self.scale(j, t).iter().map(|s| s * s).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        PointwiseMixture::new(self.weights.clone(), means, vars).unwrap()
    }

    pub fn sample(&self, t: f64, n: usize, rng: &mut impl Rng) -> Matrix {
        let mut out = Matrix::zeros(n, self.a.cols());
        for i in 0..n {
            let k = sample_categorical(&self.weights, rng);
            let (m, s) = (self.mean(k, t), self.scale(k, t));
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                let u: f64 = StandardNormal.sample(rng);
                *o = m[j] + s[j] * u;
            }
        }
        out
    }

    pub fn counterfactual(&self, y: &[f64], t: f64, t_prime: f64) -> Result<DiscreteDistribution> {
        let post = posterior_weights(y, &self.mixture(t))?;
        let rows: Vec<Vec<f64>> = (0..self.k())
            .map(|k| {
                let (m, s) = (self.mean(k, t), self.scale(k, t));
                let (m2, s2) = (self.mean(k, t_prime), self.scale(k, t_prime));
                (0..y.len()).map(|j| m2[j] + s2[j] / s[j] * (y[j] - m[j])).collect()
            })
            .collect();
        DiscreteDistribution::new(Matrix::from_rows(&rows)?, post)
    }
}

/// Mean `W1(ν̂, ν)` of the additive estimator on [`AdditiveScm`] with
/// mixtures fitted from `n` samples at each of `t` and `t'`, over `n_eval`
/// factual draws.
pub fn additive_scm_error(scm: &AdditiveScm, t: f64, t_prime: f64, n: usize, n_eval: usize, seed: u64) -> Result<f64> {
    let mut rng = unit_rng(seed, 1);
    let fit_t = fit_pointwise(&scm.sample(t, n, &mut rng), scm.k(), seed)?;
    let fit_tp = fit_pointwise(&scm.sample(t_prime, n, &mut rng), scm.k(), seed + 1)?;
    let start = PathPoint { x: vec![], t };
    let end = PathPoint { x: vec![], t: t_prime };
    let mut fits = vec![fit_t.clone(), fit_tp.clone()].into_iter();
    let mut stream = 1usize;
    let (align, mixtures) = align_adaptive(&start, &end, 2, |p| {
        if let Some(m) = fits.next() {
            return Ok(m);
        }
        stream += 1;
        let mut r = unit_rng(seed, stream);
        fit_pointwise(&scm.sample(p.t, n, &mut r), scm.k(), seed + stream as u64)
    })?;
    let fit_tp = mixtures.last().expect("two ends").permuted(align.last())?;
    let mut eval_rng = unit_rng(seed, 0);
    let ys = scm.sample(t, n_eval, &mut eval_rng);
    let mut total = 0.0;
    for y in ys.iter_rows() {
        let est = cf_estimator_additive(y, &mixtures[0], &fit_tp)?;
        total += w1_discrete(&est, &scm.counterfactual(y, t, t_prime)?)?;
    }
    Ok(total / n_eval as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    fn random_permutation(k: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut p: Vec<usize> = (0..k).collect();
        p.shuffle(rng);
        p
    }

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn two_comp(sep: f64) -> PointwiseMixture {
        PointwiseMixture::new(vec![0.5, 0.5], m(&[&[0.0, 0.0], &[sep, 0.0]]), m(&[&[1.0, 1.0], &[1.0, 1.0]])).unwrap()
    }

    #[test]
    fn posterior_at_a_mean_and_at_the_midpoint() {
        let mix = two_comp(4.0);
        let p = posterior_weights(&[4.0, 0.0], &mix).unwrap();
        assert!(p[1] > p[0]);
        let mid = posterior_weights(&[2.0, 0.3], &mix).unwrap();
        assert!((mid[0] - 0.5).abs() < 1e-12 && (mid[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn posterior_matches_density_ratio() {
        let mix = PointwiseMixture::new(
            vec![0.2, 0.3, 0.5],
            m(&[&[0.0, 1.0], &[1.0, -1.0], &[0.5, 0.5]]),
            m(&[&[0.5, 2.0], &[1.0, 0.3], &[0.7, 0.7]]),
        )
        .unwrap();
        let y = [0.4, 0.1];
        let dens: Vec<f64> = (0..3)
            .map(|k| {
                let mut p = mix.weights[k];
                for j in 0..2 {
                    let v = mix.variances.get(k, j);
                    let d = y[j] - mix.means.get(k, j);
                    p *= (-d * d / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
                }
                p
            })
            .collect();
        let z: f64 = dens.iter().sum();
        let post = posterior_weights(&y, &mix).unwrap();
        assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for k in 0..3 {
            assert!((post[k] - dens[k] / z).abs() < 1e-12);
        }
    }

    #[test]
    fn underflow_falls_back_to_uniform() {
        let mix = PointwiseMixture::new(vec![0.5, 0.5], m(&[&[0.0], &[1.0]]), m(&[&[1e-300], &[1e-300]])).unwrap();
        let p = posterior_weights(&[1e200], &mix).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn discrete_estimator_point_mass_and_mean() {
        let means = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let d = cf_estimator_discrete(&[0.0, 1.0], &means).unwrap();
        assert_eq!(d.simplified().len(), 1);
        assert_eq!(d.simplified().atoms().row(0), &[3.0, 4.0]);
        let d = cf_estimator_discrete(&[0.25, 0.75], &means).unwrap();
        assert_eq!(d.mean(), vec![0.25 * 1.0 + 0.75 * 3.0, 0.25 * 2.0 + 0.75 * 4.0]);
        let same = cf_estimator_discrete(&[0.5, 0.5], &m(&[&[1.0], &[1.0]])).unwrap();
        assert_eq!(same.simplified().len(), 1);
    }

    #[test]
    fn additive_estimator_cancels_equal_scales() {
        let at_t = two_comp(4.0);
        let mut at_tp = two_comp(4.0);
        at_tp.means = m(&[&[1.0, 1.0], &[6.0, 2.0]]);
        let y = [0.3, -0.2];
        let d = cf_estimator_additive(&y, &at_t, &at_tp).unwrap();
        assert_eq!(d.atoms().row(0), &[1.3, 0.8]);
        assert!((d.atoms().get(1, 0) - (0.3 - 4.0 + 6.0)).abs() < 1e-12);
        // zero abducted noise reproduces the discrete atoms
        let d = cf_estimator_additive(&[4.0, 0.0], &at_t, &at_tp).unwrap();
        assert_eq!(d.atoms().row(1), at_tp.means.row(1));
    }

    #[test]
    fn additive_estimator_rejects_singular_covariance() {
        let at_t = PointwiseMixture::new(vec![1.0], m(&[&[0.0]]), m(&[&[1e-14]])).unwrap();
        assert!(matches!(
            cf_estimator_additive(&[0.0], &at_t, &at_t),
            Err(Error::SingularCovariance { .. })
        ));
    }

    #[test]
    fn fit_recovers_single_gaussian_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 4000;
        let s = Matrix::from_rows(
            &(0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    vec![1.0 + 0.5 * z]
                })
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let f = fit_pointwise(&s, 1, 1).unwrap();
        let se_mean = 0.5 / (n as f64).sqrt();
        let se_var = 0.25 * (2.0 / n as f64).sqrt();
        assert!((f.means.get(0, 0) - 1.0).abs() < 3.0 * se_mean);
        assert!((f.variances.get(0, 0) - 0.25).abs() < 3.0 * se_var);
    }

    #[test]
    fn fit_recovers_mixture_weights() {
        let scm = AdditiveScm {
            weights: vec![0.3, 0.7],
            a: m(&[&[0.0], &[10.0]]),
            b: m(&[&[0.0], &[0.0]]),
            c: m(&[&[1.0], &[1.0]]),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = fit_pointwise(&scm.sample(0.0, 2000, &mut rng), 2, 2).unwrap();
        let low = if f.means.get(0, 0) < f.means.get(1, 0) { 0 } else { 1 };
        assert!((f.weights[low] - 0.3).abs() < 0.05);
    }

    fn mixtures_along(means: impl Fn(f64) -> Vec<Vec<f64>>, ts: &[f64]) -> (Vec<PathPoint>, Vec<PointwiseMixture>) {
        let pts: Vec<PathPoint> = ts.iter().map(|&t| PathPoint { x: vec![], t }).collect();
        let mixes = ts
            .iter()
            .map(|&t| {
                let mu = means(t);
                let k = mu.len();
                PointwiseMixture::new(
                    vec![1.0 / k as f64; k],
                    Matrix::from_rows(&mu).unwrap(),
                    Matrix::from_vec(k, mu[0].len(), vec![0.01; k * mu[0].len()]).unwrap(),
                )
                .unwrap()
            })
            .collect();
        (pts, mixes)
    }

    #[test]
    fn constant_path_and_single_point_align_to_identity() {
        let (p, mx) = mixtures_along(|_| vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]], &[0.0, 0.5, 1.0]);
        let a = align_components(&p, &mx).unwrap();
        assert!(a.permutations.iter().all(|q| q == &[0, 1, 2]));
        let a = align_components(&p[..1], &mx[..1]).unwrap();
        assert_eq!(a.permutations, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn alignment_tracks_rotating_components_through_relabelled_fits() {
        // two components circle each other and finish swapped; every fit
        // carries a random labelling, which the alignment must see through
        let ts: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let truth = |t: f64| {
            let a = std::f64::consts::PI * t;
            vec![vec![a.cos(), a.sin()], vec![-a.cos(), -a.sin()]]
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (pts, clean) = mixtures_along(truth, &ts);
        let mut labels = Vec::new();
        let mixes: Vec<PointwiseMixture> = clean
            .iter()
            .map(|mx| {
                let perm = random_permutation(2, &mut rng);
                labels.push(perm.clone());
                mx.permuted(&perm).unwrap()
            })
            .collect();
        let a = align_components(&pts, &mixes).unwrap();
        // true component j sits at fitted label inverse(labels[i])[j]
        for (i, perm) in a.permutations.iter().enumerate() {
            let true_of = |lbl: usize| labels[i][lbl];
            for j in 0..2 {
                assert_eq!(true_of(perm[j]), labels[0][j]);
            }
        }
        let end = &mixes[20].means;
        let start_comp0 = mixes[0].means.row(0);
        // component 0 ends at the antipode of where it started
        let tracked = end.row(a.last()[0]);
        assert!((tracked[0] + start_comp0[0]).abs() < 1e-9 && (tracked[1] + start_comp0[1]).abs() < 1e-9);
    }

    #[test]
    fn forward_then_backward_composes_to_identity() {
        let ts: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let (pts, mixes) = mixtures_along(|t| vec![vec![t, 0.0], vec![0.0, 2.0 - t], vec![3.0, 3.0 * t]], &ts);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mixes: Vec<_> = mixes.iter().map(|m| m.permuted(&random_permutation(3, &mut rng)).unwrap()).collect();
        let fwd = align_components(&pts, &mixes).unwrap();
        let (rp, rm): (Vec<_>, Vec<_>) = pts.iter().cloned().zip(mixes.iter().cloned()).rev().unzip();
        let bwd = align_components(&rp, &rm).unwrap();
        let composed: Vec<usize> = fwd.last().iter().map(|&p| bwd.last()[p]).collect();
        assert_eq!(composed, vec![0, 1, 2]);
    }

    #[test]
    fn coarse_steps_are_ambiguous_and_refined_adaptively() {
        let truth = |t: f64| {
            let a = std::f64::consts::PI * t;
            vec![vec![a.cos(), a.sin()], vec![-a.cos(), -a.sin()]]
        };
        let (pts, mixes) = mixtures_along(truth, &[0.0, 0.5, 1.0]);
        assert!(matches!(
            align_components(&pts, &mixes),
            Err(Error::AmbiguousAlignment { index: 1 })
        ));
        let start = PathPoint { x: vec![], t: 0.0 };
        let end = PathPoint { x: vec![], t: 1.0 };
        // fits label components by their first coordinate, which swaps
        let ordered = |t: f64| {
            let mut v = truth(t);
            v.sort_by(|p, q| p[0].total_cmp(&q[0]));
            v
        };
        let (a, _) = align_adaptive(&start, &end, 3, |p| Ok(mixtures_along(ordered, &[p.t]).1.remove(0))).unwrap();
        assert!(a.points.len() > 3);
        assert_eq!(a.last(), &[1, 0]);
        // components that coincide at the start can never be told apart
        let never = align_adaptive(&start, &end, 2, |p| {
            Ok(mixtures_along(|t| vec![vec![0.5], vec![0.5 + t]], &[p.t]).1.remove(0))
        });
        assert!(matches!(never, Err(Error::AmbiguousAlignment { .. })));
    }

    #[test]
    fn additive_estimator_on_closed_form_scm() {
        let scm = AdditiveScm::standard();
        let errs: Vec<f64> = [500, 2000, 5000]
            .iter()
            .map(|&n| additive_scm_error(&scm, 0.2, 0.9, n, 300, 11).unwrap())
            .collect();
        assert!(errs[2] < 0.05, "{errs:?}");
        assert!(errs[0] > errs[2], "{errs:?}");
    }
}
