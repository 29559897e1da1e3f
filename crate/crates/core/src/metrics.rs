//! Counterfactual error metrics and exact W1 between small discrete laws.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::matrix::{dist, Matrix};

/// Largest support accepted by [`w1_discrete`].
pub const MAX_ATOMS: usize = 32;

fn same_shape(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    if a.rows() == 0 {
        return Err(Error::Empty("no samples to score".into()));
    }
    Ok(())
}

fn positions(d: usize, channels: usize) -> Result<f64> {
    if channels == 0 || d % channels != 0 {
        return Err(Error::Shape(format!(
            "{d} outputs cannot be split into {channels} channels"
        )));
    }
    Ok((d / channels) as f64)
}

/// Per-sample squared error `‖a − b‖² / (d / channels)`.
pub fn sq_errors(truth: &Matrix, pred: &Matrix, channels: usize) -> Result<Vec<f64>> {
    same_shape(truth, pred)?;
    let p = positions(truth.cols(), channels)?;
    Ok(truth
        .iter_rows()
        .zip(pred.iter_rows())
        .map(|(a, b)| crate::matrix::sq_dist(a, b) / p)
        .collect())
}

/// Counterfactual MSE: squared error norm per sample, averaged over samples
/// and over positions (time steps or pixels). Channels at one position are
/// summed, so `channels = 1` gives the plain per-dimension mean.
pub fn cf_mse(truth: &Matrix, pred: &Matrix, channels: usize) -> Result<f64> {
    let e = sq_errors(truth, pred, channels)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Root mean squared error of the predicted effect of moving from `t1` to `t2`.
pub fn pehe(
    y_t1: &Matrix,
    y_t2: &Matrix,
    yhat_t1: &Matrix,
    yhat_t2: &Matrix,
    channels: usize,
) -> Result<f64> {
    same_shape(y_t1, y_t2)?;
    same_shape(y_t1, yhat_t1)?;
    same_shape(y_t1, yhat_t2)?;
    let p = positions(y_t1.cols(), channels)?;
    let mut total = 0.0;
    for i in 0..y_t1.rows() {
        let mut s = 0.0;
        for j in 0..y_t1.cols() {
            let e = (y_t2.get(i, j) - y_t1.get(i, j)) - (yhat_t2.get(i, j) - yhat_t1.get(i, j));
            s += e * e;
        }
        total += s / p;
    }
    Ok((total / y_t1.rows() as f64).sqrt())
}

fn window_starts(len: usize, window: usize) -> Vec<usize> {
    let mut s: Vec<usize> = (0..=len - window).step_by(window).collect();
    // flush a final window against the edge when the size is not a multiple
    if *s.last().unwrap() + window < len {
        s.push(len - window);
    }
    s
}

/// SSIM between two channel-major images of `channels × h × w` values with
/// dynamic range 1, averaged over non-overlapping `window × window` tiles.
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize, channels: usize, window: usize) -> Result<f64> {
    if a.len() != b.len() || a.len() != h * w * channels {
        return Err(Error::Shape(format!(
            "images of {} and {} values for {channels}x{h}x{w}",
            a.len(),
            b.len()
        )));
    }
    if window == 0 || h < window || w < window {
        return Err(Error::Shape(format!(
            "{h}x{w} image is smaller than the {window}x{window} window"
        )));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let n = (window * window) as f64;
    let (rows, cols) = (window_starts(h, window), window_starts(w, window));
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..channels {
        let off = ch * h * w;
        for &r0 in &rows {
            for &c0 in &cols {
                let (mut sa, mut sb) = (0.0, 0.0);
                for r in r0..r0 + window {
                    for c in c0..c0 + window {
                        sa += a[off + r * w + c];
                        sb += b[off + r * w + c];
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for r in r0..r0 + window {
                    for c in c0..c0 + window {
                        let (da, db) = (a[off + r * w + c] - ma, b[off + r * w + c] - mb);
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                let (va, vb, cov) = (va / n, vb / n, cov / n);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Mean SSIM over the rows of two image batches.
pub fn ssim_batch(
    truth: &Matrix,
    pred: &Matrix,
    h: usize,
    w: usize,
    channels: usize,
    window: usize,
) -> Result<f64> {
    same_shape(truth, pred)?;
    let mut s = 0.0;
    for (a, b) in truth.iter_rows().zip(pred.iter_rows()) {
        s += ssim(a, b, h, w, channels, window)?;
    }
    Ok(s / truth.rows() as f64)
}

/// Weighted atoms in outcome space.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDistribution {
    atoms: Matrix,
    weights: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(atoms: Matrix, weights: Vec<f64>) -> Result<Self> {
        if atoms.rows() == 0 {
            return Err(Error::Empty("distribution needs at least one atom".into()));
        }
        if atoms.rows() != weights.len() {
            return Err(Error::Shape(format!(
                "{} atoms but {} weights",
                atoms.rows(),
                weights.len()
            )));
        }
        let s: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "weights must be nonnegative and sum to 1 (sum = {s})"
            )));
        }
        Ok(Self { atoms, weights })
    }

    /// Equal-weight empirical distribution of the rows of `samples`.
    pub fn empirical(samples: Matrix) -> Result<Self> {
        let n = samples.rows();
        Self::new(samples, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn point_mass(atom: &[f64]) -> Self {
        Self {
            atoms: Matrix::from_vec(1, atom.len(), atom.to_vec()).unwrap(),
            weights: vec![1.0],
        }
    }

    pub fn atoms(&self) -> &Matrix {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.atoms.cols()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (a, &w) in self.atoms.iter_rows().zip(&self.weights) {
            for (mi, &ai) in m.iter_mut().zip(a) {
                *mi += w * ai;
            }
        }
        m
    }

    /// Merges coincident atoms and drops zero-weight ones.
    pub fn simplified(&self) -> Self {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut ws: Vec<f64> = Vec::new();
        for (a, &w) in self.atoms.iter_rows().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            match rows.iter().position(|r| r.as_slice() == a) {
                Some(j) => ws[j] += w,
                None => {
                    rows.push(a.to_vec());
                    ws.push(w);
                }
            }
        }
        Self {
            atoms: Matrix::from_rows(&rows).unwrap(),
            weights: ws,
        }
    }
}

/// Optimal transport plan between supplies `a` and demands `b` (equal totals)
/// for the `a.len() × b.len()` cost matrix `cost`.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    pub cost: f64,
    /// Basic cells `(i, j, flow)` of the optimal vertex.
    pub flows: Vec<(usize, usize, f64)>,
}

/// Exact transportation simplex (MODI / u-v method) started from the
/// least-cost vertex. Degenerate pivots are handled by keeping
/// zero-flow cells in the basis, and Bland's rule after many pivots
/// prevents cycling.
pub fn transport(a: &[f64], b: &[f64], cost: &Matrix) -> Result<TransportPlan> {
    let (m, n) = (a.len(), b.len());
    if m == 0 || n == 0 {
        return Err(Error::Empty("transport with an empty side".into()));
    }
    if cost.rows() != m || cost.cols() != n {
        return Err(Error::Shape(format!(
            "cost is {}x{}, expected {m}x{n}",
            cost.rows(),
            cost.cols()
        )));
    }
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if (sa - sb).abs() > 1e-9 * sa.max(1.0) {
        return Err(Error::Config(format!("supply {sa} and demand {sb} differ")));
    }
    let mut supply = a.to_vec();
    let mut demand: Vec<f64> = b.iter().map(|&v| v * sa / sb).collect();

    let basis = least_cost_basis(&mut supply, &mut demand, cost);
    let mut basis = basis;

    let max_pivots = 50 * (m + n) * (m + n) + 1000;
    let eps = 1e-12 * (1.0 + cost.as_slice().iter().fold(0.0f64, |s, &c| s.max(c.abs())));
    for pivot in 0..max_pivots {
        // potentials u_i + v_j = c_ij on basic cells
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); m + n];
        for (e, &(r, c, _)) in basis.iter().enumerate() {
            adj[r].push((m + c, e));
            adj[m + c].push((r, e));
        }
        let mut pot = vec![f64::NAN; m + n];
        pot[0] = 0.0;
        let mut queue = VecDeque::from([0usize]);
        while let Some(node) = queue.pop_front() {
            for &(next, e) in &adj[node] {
                if pot[next].is_nan() {
                    let (r, c, _) = basis[e];
                    pot[next] = cost.get(r, c) - pot[node];
                    queue.push_back(next);
                }
            }
        }
        let bland = pivot > 10 * (m + n);
        let mut enter = None::<(usize, usize, f64)>;
        for r in 0..m {
            for c in 0..n {
                let red = cost.get(r, c) - pot[r] - pot[m + c];
                if red < -eps && enter.map_or(true, |(_, _, best)| red < best) {
                    enter = Some((r, c, red));
                    if bland {
                        break;
                    }
                }
            }
            if bland && enter.is_some() {
                break;
            }
        }
        let Some((er, ec, _)) = enter else {
            let total = basis.iter().map(|&(r, c, f)| f * cost.get(r, c)).sum();
            return Ok(TransportPlan {
                cost: total,
                flows: basis,
            });
        };
        // tree path from row er to column ec
        let target = m + ec;
        let mut parent = vec![usize::MAX; m + n];
        let mut via = vec![usize::MAX; m + n];
        parent[er] = er;
        let mut queue = VecDeque::from([er]);
        while let Some(node) = queue.pop_front() {
            if node == target {
                break;
            }
            for &(next, e) in &adj[node] {
                if parent[next] == usize::MAX {
                    parent[next] = node;
                    via[next] = e;
                    queue.push_back(next);
                }
            }
        }
        let mut path = Vec::new();
        let mut node = target;
        while node != er {
            path.push(via[node]);
            node = parent[node];
        }
        path.reverse();
        // path edges alternate -, +, -, ... starting next to the entering row
        let mut theta = f64::INFINITY;
        let mut leave = usize::MAX;
        for (k, &e) in path.iter().enumerate() {
            if k % 2 == 0 && basis[e].2 < theta {
                theta = basis[e].2;
                leave = e;
            }
        }
        for (k, &e) in path.iter().enumerate() {
            if k % 2 == 0 {
                basis[e].2 -= theta;
            } else {
                basis[e].2 += theta;
            }
        }
        basis[leave] = (er, ec, theta);
    }
    Err(Error::Config("transportation simplex failed to converge".into()))
}

/// Least-cost rule: fill the cheapest cells first, then join the
/// resulting forest into a spanning tree with zero-flow cells.
fn least_cost_basis(supply: &mut [f64], demand: &mut [f64], cost: &Matrix) -> Vec<(usize, usize, f64)> {
    let (m, n) = (supply.len(), demand.len());
    let mut cells: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    cells.sort_by(|p, q| cost.get(p.0, p.1).total_cmp(&cost.get(q.0, q.1)));
    let mut parent: Vec<usize> = (0..m + n).collect();
    fn root(parent: &mut [usize], mut v: usize) -> usize {
        while parent[v] != v {
            parent[v] = parent[parent[v]];
            v = parent[v];
        }
        v
    }
    let mut basis = Vec::with_capacity(m + n - 1);
    let (mut row_done, mut col_done) = (vec![false; m], vec![false; n]);
    for &(i, j) in &cells {
        if row_done[i] || col_done[j] {
            continue;
        }
        let x = supply[i].min(demand[j]);
        supply[i] -= x;
        demand[j] -= x;
        let (ri, rj) = (root(&mut parent, i), root(&mut parent, m + j));
        if ri != rj {
            parent[ri] = rj;
            basis.push((i, j, x));
        }
        // close exactly one line per cell so the basis stays a forest
        if supply[i] <= demand[j] {
            row_done[i] = true;
        } else {
            col_done[j] = true;
        }
    }
    for &(i, j) in &cells {
        if basis.len() == m + n - 1 {
            break;
        }
        let (ri, rj) = (root(&mut parent, i), root(&mut parent, m + j));
        if ri != rj {
            parent[ri] = rj;
            basis.push((i, j, 0.0));
        }
    }
    basis
}

fn w1_impl(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::Shape(format!(
            "atoms of dimension {} vs {}",
            p.dim(),
            q.dim()
        )));
    }
    let mut cost = Matrix::zeros(p.len(), q.len());
    for (i, a) in p.atoms.iter_rows().enumerate() {
        for (j, b) in q.atoms.iter_rows().enumerate() {
            cost.set(i, j, dist(a, b));
        }
    }
    Ok(transport(&p.weights, &q.weights, &cost)?.cost.max(0.0))
}

/// Exact Wasserstein-1 distance under the Euclidean ground metric between
/// distributions of at most [`MAX_ATOMS`] atoms each.
pub fn w1_discrete(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    for d in [p, q] {
        if d.len() > MAX_ATOMS {
            return Err(Error::SupportTooLarge {
                size: d.len(),
                limit: MAX_ATOMS,
            });
        }
    }
    w1_impl(p, q)
}

/// Exact W1 without the support cap, for comparing a small estimator
/// against a large empirical sample.
pub fn w1_exact(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64> {
    w1_impl(p, q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn cf_mse_basics() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(cf_mse(&a, &a, 1).unwrap(), 0.0);
        let b = m(&[&[1.5, 2.5], &[3.5, 4.5]]);
        assert!((cf_mse(&a, &b, 1).unwrap() - 0.25).abs() < 1e-15);
        // two channels, one position: the squared norm is not divided by 2
        assert!((cf_mse(&a, &b, 2).unwrap() - 0.5).abs() < 1e-15);
        assert!(cf_mse(&a, &m(&[&[1.0, 2.0]]), 1).is_err());
        assert!(cf_mse(&a, &b, 3).is_err());
    }

    #[test]
    fn pehe_hand_case() {
        let z = m(&[&[0.0], &[0.0]]);
        let y2 = m(&[&[1.0], &[3.0]]);
        let yh2 = m(&[&[1.0], &[1.0]]);
        assert!((pehe(&z, &y2, &z, &yh2, 1).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(pehe(&z, &y2, &z, &y2, 1).unwrap(), 0.0);
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let img: Vec<f64> = (0..196).map(|i| ((i * 7919) % 2) as f64).collect();
        assert!((ssim(&img, &img, 14, 14, 1, 8).unwrap() - 1.0).abs() < 1e-12);
        let inv: Vec<f64> = img.iter().map(|v| 1.0 - v).collect();
        assert!(ssim(&img, &inv, 14, 14, 1, 8).unwrap() < 0.0);
        assert!(ssim(&img[..49], &img[..49], 7, 7, 1, 8).is_err());
    }

    #[test]
    fn window_layout() {
        assert_eq!(window_starts(14, 8), vec![0, 6]);
        assert_eq!(window_starts(16, 8), vec![0, 8]);
        assert_eq!(window_starts(8, 8), vec![0]);
    }

    #[test]
    fn w1_point_masses() {
        let p = DiscreteDistribution::point_mass(&[0.0, 0.0]);
        let q = DiscreteDistribution::point_mass(&[3.0, 4.0]);
        assert!((w1_discrete(&p, &q).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(w1_discrete(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn w1_one_dimensional_matches_cdf_formula() {
        // in 1-D, W1 is the integral of |F_p − F_q|
        let p = DiscreteDistribution::new(m(&[&[0.0], &[1.0], &[3.0]]), vec![0.2, 0.5, 0.3]).unwrap();
        let q = DiscreteDistribution::new(m(&[&[0.5], &[2.0]]), vec![0.6, 0.4]).unwrap();
        let pts = [0.0, 0.5, 1.0, 2.0, 3.0];
        let cdf = |d: &DiscreteDistribution, x: f64| -> f64 {
            d.atoms()
                .iter_rows()
                .zip(d.weights())
                .filter(|(a, _)| a[0] <= x)
                .map(|(_, w)| w)
                .sum()
        };
        let expected: f64 = pts
            .windows(2)
            .map(|w| (cdf(&p, w[0]) - cdf(&q, w[0])).abs() * (w[1] - w[0]))
            .sum();
        assert!((w1_discrete(&p, &q).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn w1_support_cap() {
        let big = DiscreteDistribution::empirical(Matrix::zeros(33, 1)).unwrap();
        let small = DiscreteDistribution::point_mass(&[0.0]);
        assert!(matches!(
            w1_discrete(&big, &small),
            Err(Error::SupportTooLarge { size: 33, limit: 32 })
        ));
        assert_eq!(w1_exact(&big, &small).unwrap(), 0.0);
    }

    #[test]
    fn distribution_validation() {
        assert!(DiscreteDistribution::new(m(&[&[0.0]]), vec![0.5]).is_err());
        assert!(DiscreteDistribution::new(m(&[&[0.0], &[1.0]]), vec![1.5, -0.5]).is_err());
        let d = DiscreteDistribution::new(m(&[&[1.0], &[1.0], &[2.0]]), vec![0.25, 0.25, 0.5]).unwrap();
        let s = d.simplified();
        assert_eq!(s.len(), 2);
        assert_eq!(s.weights(), &[0.5, 0.5]);
    }
}
