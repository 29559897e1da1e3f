//! Comparison methods: Deep-ITE (a single regressor on `x ⊕ t`) and a
//! synthetic-control estimator over treatment-matched donors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cfqp::{fit, with_treatment, CfqpConfig, CfqpModel};
use crate::error::{Error, Result};
use crate::matrix::{sq_dist, Matrix};
use crate::nn::Mlp;

/// Deep-ITE is the one-cluster case of the CFQP trainer: the same network,
/// optimiser and epoch budget, with the factual outcome never consulted at
/// prediction time.
pub fn deep_ite_fit(x: &Matrix, y: &Matrix, cfg: &CfqpConfig) -> Result<CfqpModel> {
    let cfg = CfqpConfig { k: 1, ..cfg.clone() };
    Ok(fit(x, y, &cfg)?.1)
}

/// `m(x, t')` for inputs `x ⊕ t`.
pub fn deep_ite_predict(model: &Mlp, x: &Matrix, t_prime: &[f64]) -> Result<Matrix> {
    model.forward(&with_treatment(x, t_prime)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScConfig {
    /// Initial half-width of the donor treatment window.
    pub window: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ScConfig {
    fn default() -> Self {
        Self {
            window: 0.1,
            tol: 1e-10,
            max_iter: 5000,
        }
    }
}

/// Donor pool: covariates (without treatment), factual outcomes and
/// treatments of the training units.
#[derive(Clone, Debug)]
pub struct ScModel {
    donors: Matrix,
    x_dim: usize,
    t: Vec<f64>,
    pub config: ScConfig,
}

/// Donor set and simplex weights chosen for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct ScFit {
    pub donors: Vec<usize>,
    pub weights: Vec<f64>,
    /// Window half-width that produced a non-empty pool.
    pub window: f64,
}

impl ScModel {
    pub fn new(x: &Matrix, y: &Matrix, t: &[f64], config: ScConfig) -> Result<Self> {
        if x.rows() != y.rows() || x.rows() != t.len() {
            return Err(Error::Shape(format!(
                "donor pool has {} covariate rows, {} outcome rows, {} treatments",
                x.rows(),
                y.rows(),
                t.len()
            )));
        }
        if !(config.window > 0.0 && config.tol >= 0.0 && config.max_iter > 0) {
            return Err(Error::Config("window and iteration budget must be positive".into()));
        }
        Ok(Self {
            donors: x.hstack(y)?,
            x_dim: x.cols(),
            t: t.to_vec(),
            config,
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Donors with `|t_i − t'| ≤ w`, doubling `w` until the pool is
    /// non-empty or already covers every donor.
    pub fn donors_near(&self, t_prime: f64) -> Result<(Vec<usize>, f64)> {
        let reach = self.t.iter().map(|t| (t - t_prime).abs()).fold(0.0, f64::max);
        let mut w = self.config.window;
        loop {
            let pool: Vec<usize> = (0..self.t.len())
                .filter(|&i| (self.t[i] - t_prime).abs() <= w)
                .collect();
            if !pool.is_empty() {
                return Ok((pool, w));
            }
            if w >= reach || !w.is_finite() {
                return Err(Error::NoDonors { t_prime });
            }
            w *= 2.0;
        }
    }

    /// Simplex weights fitting `[x; y]` from the donors near `t'`.
    pub fn fit_one(&self, x: &[f64], y: &[f64], t_prime: f64) -> Result<ScFit> {
        if x.len() != self.x_dim || x.len() + y.len() != self.donors.cols() {
            return Err(Error::Shape(format!(
                "query has {} + {} entries, donors have {} + {}",
                x.len(),
                y.len(),
                self.x_dim,
                self.donors.cols() - self.x_dim
            )));
        }
        let (pool, window) = self.donors_near(t_prime)?;
        let target: Vec<f64> = x.iter().chain(y).copied().collect();
        // an exact copy of the query wins outright
        if let Some(p) = pool.iter().position(|&i| self.donors.row(i) == target.as_slice()) {
            let mut weights = vec![0.0; pool.len()];
            weights[p] = 1.0;
            return Ok(ScFit { donors: pool, weights, window });
        }
        let rows: Vec<&[f64]> = pool.iter().map(|&i| self.donors.row(i)).collect();
        let weights = simplex_lsq(&rows, &target, self.config.tol, self.config.max_iter)?;
        Ok(ScFit { donors: pool, weights, window })
    }

    /// `Σ w_i y_i` over the chosen donors' factual outcomes.
    pub fn predict_one(&self, x: &[f64], y: &[f64], t_prime: f64) -> Result<Vec<f64>> {
        let f = self.fit_one(x, y, t_prime)?;
        let mut out = vec![0.0; self.donors.cols() - self.x_dim];
        for (&i, &w) in f.donors.iter().zip(&f.weights) {
            for (o, v) in out.iter_mut().zip(&self.donors.row(i)[self.x_dim..]) {
                *o += w * v;
            }
        }
        Ok(out)
    }

    pub fn predict(&self, x: &Matrix, y: &Matrix, t_prime: &[f64]) -> Result<Matrix> {
        if x.rows() != y.rows() || x.rows() != t_prime.len() {
            return Err(Error::Shape(format!(
                "{} queries with {} outcomes and {} treatments",
                x.rows(),
                y.rows(),
                t_prime.len()
            )));
        }
        let rows = (0..x.rows())
            .into_par_iter()
            .map(|i| self.predict_one(x.row(i), y.row(i), t_prime[i]))
            .collect::<Result<Vec<_>>>()?;
        Matrix::from_rows(&rows)
    }
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&a| (a - theta).max(0.0)).collect()
}

/// Minimises `‖Σ w_i a_i − b‖²` over the simplex by accelerated projected
/// gradient on the Gram system.
pub fn simplex_lsq(a: &[&[f64]], b: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = a.len();
    if n == 0 {
        return Err(Error::Empty("simplex least squares with no columns".into()));
    }
    if a.iter().any(|r| r.len() != b.len()) {
        return Err(Error::Shape("columns and target differ in length".into()));
    }
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).sum::<f64>();
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = dot(a[i], a[j]);
            g[i * n + j] = v;
            g[j * n + i] = v;
        }
    }
    let c: Vec<f64> = a.iter().map(|r| dot(r, b)).collect();
    let gram = |w: &[f64]| -> Vec<f64> { (0..n).map(|i| dot(&g[i * n..(i + 1) * n], w)).collect() };
    let lip = lipschitz(&g, n);
    if lip <= 0.0 {
        return Ok(vec![1.0 / n as f64; n]);
    }
    // exact active-set solve from the best single donor; projected gradient
    // only if a support system degenerates
    let vertex = (0..n)
        .min_by(|&i, &j| (0.5 * g[i * n + i] - c[i]).total_cmp(&(0.5 * g[j * n + j] - c[j])))
        .unwrap_or(0);
    let mut start = vec![0.0; n];
    start[vertex] = 1.0;
    if let Some(exact) = polish(&g, &c, &start, lip) {
        return Ok(exact);
    }
    let step = 1.0 / lip;
    let mut w = vec![1.0 / n as f64; n];
    let mut gw = gram(&w);
    let objective = |w: &[f64], gw: &[f64]| 0.5 * dot(w, gw) - dot(&c, w);
    let mut z = w.clone();
    let mut gz = gw.clone();
    let mut momentum = 1.0f64;
    let mut f_prev = objective(&w, &gw);
    for it in 1..=max_iter {
        if it % POLISH_EVERY == 0 {
            if let Some(exact) = polish(&g, &c, &w, lip) {
                return Ok(exact);
            }
        }
        let w_next = project_simplex(
            &(0..n).map(|i| z[i] - step * (gz[i] - c[i])).collect::<Vec<_>>(),
        );
        let gw_next = gram(&w_next);
        let f_next = objective(&w_next, &gw_next);
        // restart the momentum when the objective goes up
        let (m_next, beta) = if f_next > f_prev {
            (1.0, 0.0)
        } else {
            let m = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
            (m, (momentum - 1.0) / m)
        };
        // z and G z are the same affine combination of the last two iterates
        for i in 0..n {
            z[i] = w_next[i] + beta * (w_next[i] - w[i]);
            gz[i] = gw_next[i] + beta * (gw_next[i] - gw[i]);
        }
        let moved = sq_dist(&w_next, &w).sqrt();
        w = w_next;
        gw = gw_next;
        momentum = m_next;
        let done = moved <= tol && (f_prev - f_next).abs() <= tol * (1.0 + f_prev.abs());
        f_prev = f_prev.min(f_next);
        if done {
            break;
        }
    }
    Ok(w)
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration, padded
/// slightly so the gradient step stays stable.
const POLISH_EVERY: usize = 50;

/// Primal active-set finish from the feasible point `w`: solve the
/// equality-constrained problem on the current support, step back to the
/// boundary when that leaves the simplex, add the most violated coordinate
/// when it does not. Returns the weights once the KKT conditions hold, or
/// `None` if a support system turns singular.
fn polish(g: &[f64], c: &[f64], w: &[f64], lip: f64) -> Option<Vec<f64>> {
    let n = c.len();
    let slack = 1e-13 * lip.max(1.0);
    let mut w = w.to_vec();
    let mut support: Vec<usize> = (0..n).filter(|&i| w[i] > 0.0).collect();
    for _ in 0..4 * n {
        let (v, mu) = support_solve(g, c, &support, lip)?;
        if let Some(alpha) = support
            .iter()
            .zip(&v)
            .filter(|(_, &vi)| vi < 0.0)
            .map(|(&i, &vi)| w[i] / (w[i] - vi))
            .min_by(f64::total_cmp)
        {
            for (&i, &vi) in support.iter().zip(&v) {
                w[i] += alpha * (vi - w[i]);
            }
            support.retain(|&i| {
                if w[i] <= 1e-15 {
                    w[i] = 0.0;
                    false
                } else {
                    true
                }
            });
            continue;
        }
        for (&i, &vi) in support.iter().zip(&v) {
            w[i] = vi;
        }
        // stationarity: (G w − c)_i = −μ on the support and ≥ −μ off it
        let worst = (0..n)
            .filter(|i| !support.contains(i))
            .map(|i| {
                let gi: f64 = g[i * n..(i + 1) * n].iter().zip(&w).map(|(p, q)| p * q).sum::<f64>() - c[i];
                (i, gi + mu)
            })
            .min_by(|p, q| p.1.total_cmp(&q.1));
        match worst {
            Some((i, d)) if d < -slack => support.push(i),
            _ => {
                let total: f64 = w.iter().sum();
                return Some(w.into_iter().map(|v| v / total).collect());
            }
        }
    }
    None
}

/// `[G_SS 1; 1ᵀ 0] [v; μ] = [c_S; 1]`.
fn support_solve(g: &[f64], c: &[f64], support: &[usize], lip: f64) -> Option<(Vec<f64>, f64)> {
    let n = c.len();
    let m = support.len();
    let dim = m + 1;
    let mut a = vec![0.0; dim * (dim + 1)];
    let at = |r: usize, col: usize| r * (dim + 1) + col;
    for (r, &i) in support.iter().enumerate() {
        for (q, &j) in support.iter().enumerate() {
            a[at(r, q)] = g[i * n + j];
        }
        a[at(r, m)] = 1.0;
        a[at(m, r)] = 1.0;
        a[at(r, dim)] = c[i];
    }
    a[at(m, dim)] = 1.0;
    let mut sol = gauss_solve(&mut a, dim, 1e-10 * lip)?;
    let mu = sol.pop()?;
    Some((sol, mu))
}

/// Gaussian elimination with partial pivoting on an augmented `dim × (dim+1)`
/// system; `None` when a pivot falls below `floor`.
fn gauss_solve(a: &mut [f64], dim: usize, floor: f64) -> Option<Vec<f64>> {
    let w = dim + 1;
    for col in 0..dim {
        let piv = (col..dim).max_by(|&p, &q| a[p * w + col].abs().total_cmp(&a[q * w + col].abs()))?;
        if a[piv * w + col].abs() <= floor {
            return None;
        }
        if piv != col {
            for k in 0..w {
                a.swap(piv * w + k, col * w + k);
            }
        }
        for r in col + 1..dim {
            let f = a[r * w + col] / a[col * w + col];
            if f != 0.0 {
                for k in col..w {
                    a[r * w + k] -= f * a[col * w + k];
                }
            }
        }
    }
    let mut x = vec![0.0; dim];
    for r in (0..dim).rev() {
        let s: f64 = (r + 1..dim).map(|k| a[r * w + k] * x[k]).sum();
        x[r] = (a[r * w + dim] - s) / a[r * w + r];
    }
    Some(x)
}

fn lipschitz(g: &[f64], n: usize) -> f64 {
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let w: Vec<f64> = (0..n)
            .map(|i| g[i * n..(i + 1) * n].iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm;
        v = w.into_iter().map(|a| a / norm).collect();
        if (next - lambda).abs() <= 1e-9 * next {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda * 1.01
}
