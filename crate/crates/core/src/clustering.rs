//! k-means and diagonal Gaussian mixtures over residual vectors.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datagen::unit_rng;
use crate::error::{Error, Result};
use crate::matrix::{sq_dist, Matrix};

pub const VARIANCE_FLOOR: f64 = 1e-6;
const MIN_WEIGHT: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct KmeansResult {
    pub centroids: Matrix,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration of the winning restart.
    pub trace: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GmmResult {
    pub weights: Vec<f64>,
    pub means: Matrix,
    pub variances: Matrix,
    /// Posterior class probabilities for every input point.
    pub responsibilities: Matrix,
    /// Mean log-likelihood of the fitted subsample after each EM iteration.
    pub log_likelihood: Vec<f64>,
}

/// Index of the nearest row of `centers`; ties go to the lowest index.
pub fn nearest(point: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter_rows().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Cluster of `y` under the per-model predictions `preds` (one row each).
pub fn assign_by_residual(y: &[f64], preds: &Matrix) -> usize {
    nearest(y, preds).0
}

fn check_fit_input(points: &Matrix, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if points.rows() < k {
        return Err(Error::Config(format!(
            "{} points cannot form {} clusters",
            points.rows(),
            k
        )));
    }
    Ok(())
}

fn kmeans_pp(points: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = points.rows();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = points
        .iter_rows()
        .map(|p| sq_dist(p, points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            // all remaining points coincide with a centre
            rng.gen_range(0..n)
        };
        chosen.push(next);
        for (i, p) in points.iter_rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points.row(next)));
        }
    }
    points.select_rows(&chosen)
}

fn lloyd(points: &Matrix, mut centroids: Matrix, iters: usize) -> KmeansResult {
    let (n, d) = (points.rows(), points.cols());
    let k = centroids.rows();
    let mut assignment = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut inertia = 0.0;
    for _ in 0..iters.max(1) {
        let mut changed = false;
        inertia = 0.0;
        for (i, p) in points.iter_rows().enumerate() {
            let (j, dist) = nearest(p, &centroids);
            inertia += dist;
            if assignment[i] != j {
                assignment[i] = j;
                changed = true;
            }
        }
        trace.push(inertia);
        if !changed {
            break;
        }
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter_rows().enumerate() {
            counts[assignment[i]] += 1;
            for (s, &v) in sums.row_mut(assignment[i]).iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            // an empty cluster keeps its previous centroid
            if counts[j] > 0 {
                let c = counts[j] as f64;
                for (dst, &s) in centroids.row_mut(j).iter_mut().zip(sums.row(j)) {
                    *dst = s / c;
                }
            }
        }
    }
    // final inertia against the last centroids
    let mut final_inertia = 0.0;
    for (i, p) in points.iter_rows().enumerate() {
        let (j, dist) = nearest(p, &centroids);
        assignment[i] = j;
        final_inertia += dist;
    }
    if final_inertia != inertia {
        trace.push(final_inertia);
    }
    KmeansResult {
        centroids,
        assignment,
        inertia: final_inertia,
        trace,
    }
}

/// Best of `restarts` k-means++ seeded Lloyd runs.
pub fn kmeans_fit(
    points: &Matrix,
    k: usize,
    restarts: usize,
    iters: usize,
    seed: u64,
) -> Result<KmeansResult> {
    check_fit_input(points, k)?;
    let runs: Vec<KmeansResult> = (0..restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = unit_rng(seed, r);
            let init = kmeans_pp(points, k, &mut rng);
            lloyd(points, init, iters)
        })
        .collect();
    // first strictly better run wins, so the result is independent of scheduling
    let mut best = None::<KmeansResult>;
    for r in runs {
        if best.as_ref().map_or(true, |b| r.inertia < b.inertia) {
            best = Some(r);
        }
    }
    Ok(best.unwrap())
}

pub(crate) fn log_gauss_diag(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((&xi, &m), &v) in x.iter().zip(mean).zip(var) {
        s += (xi - m).powi(2) / v + v.ln();
    }
    -0.5 * (s + x.len() as f64 * (2.0 * std::f64::consts::PI).ln())
}

pub(crate) fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|a| (a - m).exp()).sum::<f64>().ln()
}

impl GmmResult {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    /// Per-component log joint density `ln ω_j + ln N(x; μ_j, Σ_j)`.
    pub fn log_joint(&self, x: &[f64]) -> Vec<f64> {
        (0..self.k())
            .map(|j| self.weights[j].ln() + log_gauss_diag(x, self.means.row(j), self.variances.row(j)))
            .collect()
    }

    pub fn posterior(&self, x: &[f64]) -> Vec<f64> {
        let lj = self.log_joint(x);
        let z = logsumexp(&lj);
        lj.iter().map(|a| (a - z).exp()).collect()
    }

    pub fn predict(&self, points: &Matrix) -> Matrix {
        let mut r = Matrix::zeros(points.rows(), self.k());
        for (i, p) in points.iter_rows().enumerate() {
            r.row_mut(i).copy_from_slice(&self.posterior(p));
        }
        r
    }

    /// Most responsible component per point; ties go to the lowest index.
    pub fn hard_assignment(&self) -> Vec<usize> {
        self.responsibilities
            .iter_rows()
            .map(|r| {
                let mut best = 0;
                for j in 1..r.len() {
                    if r[j] > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// EM for a diagonal-covariance mixture on at most `max_subsample` points,
/// initialised from k-means.
pub fn gmm_fit(
    points: &Matrix,
    k: usize,
    max_subsample: usize,
    iters: usize,
    seed: u64,
) -> Result<GmmResult> {
    check_fit_input(points, k)?;
    let mut rng = unit_rng(seed, usize::MAX >> 1);
    let sub = if points.rows() > max_subsample.max(k) {
        let mut idx = sample(&mut rng, points.rows(), max_subsample.max(k)).into_vec();
        idx.sort_unstable();
        points.select_rows(&idx)
    } else {
        points.clone()
    };
    let (n, d) = (sub.rows(), sub.cols());
    let km = kmeans_fit(&sub, k, 10, 100, seed)?;

    let mut weights = vec![0.0f64; k];
    let mut means = km.centroids.clone();
    let mut variances = Matrix::zeros(k, d);
    for (i, p) in sub.iter_rows().enumerate() {
        let j = km.assignment[i];
        weights[j] += 1.0;
        for ((v, &x), &m) in variances.row_mut(j).iter_mut().zip(p).zip(km.centroids.row(j)) {
            *v += (x - m).powi(2);
        }
    }
    for j in 0..k {
        let c = weights[j].max(1.0);
        variances
            .row_mut(j)
            .iter_mut()
            .for_each(|v| *v = (*v / c).max(VARIANCE_FLOOR));
        weights[j] = (weights[j] / n as f64).max(MIN_WEIGHT);
    }
    let wsum: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= wsum);

    let mut model = GmmResult {
        weights,
        means,
        variances,
        responsibilities: Matrix::zeros(0, k),
        log_likelihood: Vec::new(),
    };
    let mut resp = Matrix::zeros(n, k);
    for _ in 0..iters.max(1) {
        // E step
        let mut ll = 0.0;
        for (i, p) in sub.iter_rows().enumerate() {
            let lj = model.log_joint(p);
            let z = logsumexp(&lj);
            ll += z;
            for (r, a) in resp.row_mut(i).iter_mut().zip(&lj) {
                *r = (a - z).exp();
            }
        }
        let ll = ll / n as f64;
        let converged = model
            .log_likelihood
            .last()
            .is_some_and(|&prev| (ll - prev).abs() <= 1e-10 * prev.abs().max(1.0));
        model.log_likelihood.push(ll);
        if converged {
            break;
        }
        // M step
        let mut nk = vec![0.0; k];
        means = Matrix::zeros(k, d);
        for (i, p) in sub.iter_rows().enumerate() {
            for j in 0..k {
                let r = resp.get(i, j);
                nk[j] += r;
                for (m, &x) in means.row_mut(j).iter_mut().zip(p) {
                    *m += r * x;
                }
            }
        }
        let mut reseed = Vec::new();
        for j in 0..k {
            if nk[j] / (n as f64) < MIN_WEIGHT {
                reseed.push(j);
                continue;
            }
            means.row_mut(j).iter_mut().for_each(|m| *m /= nk[j]);
        }
        let mut vars = Matrix::zeros(k, d);
        for (i, p) in sub.iter_rows().enumerate() {
            for j in 0..k {
                let r = resp.get(i, j);
                for ((v, &x), &m) in vars.row_mut(j).iter_mut().zip(p).zip(means.row(j)) {
                    *v += r * (x - m).powi(2);
                }
            }
        }
        for j in 0..k {
            if !reseed.contains(&j) {
                vars.row_mut(j)
                    .iter_mut()
                    .for_each(|v| *v = (*v / nk[j]).max(VARIANCE_FLOOR));
            }
        }
        let mut w: Vec<f64> = nk.iter().map(|&c| c / n as f64).collect();
        if !reseed.is_empty() {
            // move each collapsed component onto the worst-explained point
            let mut scores: Vec<(usize, f64)> = sub
                .iter_rows()
                .enumerate()
                .map(|(i, p)| (i, logsumexp(&model.log_joint(p))))
                .collect();
            scores.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            let pooled: Vec<f64> = (0..d)
                .map(|c| (0..k).map(|j| model.variances.get(j, c)).sum::<f64>() / k as f64)
                .collect();
            for (slot, &j) in reseed.iter().enumerate() {
                let far = scores[slot.min(n - 1)].0;
                means.row_mut(j).copy_from_slice(sub.row(far));
                vars.row_mut(j).copy_from_slice(&pooled);
                w[j] = 1.0 / n as f64;
            }
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);
        }
        model.weights = w;
        model.means = means.clone();
        model.variances = vars;
    }
    model.responsibilities = model.predict(points);
    Ok(model)
}
