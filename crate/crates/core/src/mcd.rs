//! Deterministic minimum covariance determinant estimator.
//!
//! Six deterministic initial scatter estimates on the coordinatewise
//! robustly standardized data, each refined by concentration steps; the
//! subset with the smallest covariance determinant wins. The univariate case
//! is solved exactly by scanning contiguous windows of the sorted sample.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{chi2_cdf, chi2_quantile, mad, median, normal_quantile, sym_eigen_sorted, symmetrize};

const MAX_CSTEPS: usize = 200;
/// Small problems also try every elemental (k+1)-subset as a start.
const ELEMENTAL_LIMIT: usize = 5000;

fn binomial(n: usize, r: usize) -> usize {
    let mut acc: usize = 1;
    for i in 0..r {
        acc = acc.saturating_mul(n - i) / (i + 1);
    }
    acc
}

fn for_each_combination(n: usize, r: usize, mut f: impl FnMut(&[usize])) {
    if r > n {
        return;
    }
    let mut comb: Vec<usize> = (0..r).collect();
    loop {
        f(&comb);
        let mut i = r;
        while i > 0 && comb[i - 1] == i - 1 + n - r {
            i -= 1;
        }
        if i == 0 {
            return;
        }
        comb[i - 1] += 1;
        for j in i..r {
            comb[j] = comb[j - 1] + 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McdEstimate {
    pub mu: DVector<f64>,
    /// Consistency-corrected scatter `c_alpha * cov(subset)`.
    pub sigma: DMatrix<f64>,
    /// Sorted row indices of the optimal subset.
    pub subset: Vec<usize>,
    pub alpha: f64,
    pub c_alpha: f64,
    /// Set when the best subset had a singular covariance and a ridge was added.
    pub singular: bool,
}

/// `alpha / F_{chi2_{k+2}}(chi2_{k, alpha})`; equals 1 at `alpha = 1`.
pub fn consistency_factor(k: usize, alpha: f64) -> f64 {
    if alpha >= 1.0 {
        return 1.0;
    }
    let q = chi2_quantile(k, alpha);
    alpha / chi2_cdf(k + 2, q)
}

pub fn subset_size(n: usize, alpha: f64) -> usize {
    ((alpha * n as f64) - 1e-9).ceil().max(1.0) as usize
}

/// Mean and covariance (divisor = subset size) of the selected rows.
pub fn subset_moments(points: &DMatrix<f64>, subset: &[usize]) -> (DVector<f64>, DMatrix<f64>) {
    let k = points.ncols();
    let h = subset.len() as f64;
    let mut mu = DVector::zeros(k);
    for &i in subset {
        for j in 0..k {
            mu[j] += points[(i, j)];
        }
    }
    mu /= h;
    let mut cov = DMatrix::zeros(k, k);
    for &i in subset {
        for a in 0..k {
            let da = points[(i, a)] - mu[a];
            for b in 0..=a {
                cov[(a, b)] += da * (points[(i, b)] - mu[b]);
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            cov[(b, a)] = cov[(a, b)];
        }
    }
    (mu, cov / h)
}

fn log_det(cov: &DMatrix<f64>) -> Option<f64> {
    let ch = cov.clone().cholesky()?;
    let l = ch.l();
    let mut s = 0.0;
    for i in 0..l.nrows() {
        let v = l[(i, i)];
        if !(v > 0.0) {
            return None;
        }
        s += 2.0 * v.ln();
    }
    // relative pivot too small means numerically singular
    let scale = (0..cov.nrows()).map(|i| cov[(i, i)]).fold(0.0_f64, f64::max);
    let min_piv = (0..l.nrows()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if min_piv <= 1e-14 * scale {
        return None;
    }
    Some(s)
}

fn ridge(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let k = cov.nrows();
    let tr = cov.trace() / k as f64;
    let eps = 1e-8 * if tr > 0.0 { tr } else { 1.0 };
    cov + DMatrix::identity(k, k) * eps
}

/// Squared Mahalanobis distances of all rows.
fn distances(points: &DMatrix<f64>, mu: &DVector<f64>, cov: &DMatrix<f64>) -> Vec<f64> {
    let ch = match cov.clone().cholesky() {
        Some(c) => c,
        None => ridge(cov).cholesky().expect("ridge makes the matrix positive definite"),
    };
    let n = points.nrows();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let diff = points.row(i).transpose() - mu;
        let y = ch.l().solve_lower_triangular(&diff).expect("nonsingular factor");
        out.push(y.norm_squared());
    }
    out
}

/// Indices of the `h` smallest values, ties broken by index, returned sorted.
fn smallest(values: &[f64], h: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut out = idx[..h].to_vec();
    out.sort_unstable();
    out
}

/// One concentration step: the `h` rows closest to the subset's own
/// mean/covariance.
pub fn c_step(points: &DMatrix<f64>, subset: &[usize], h: usize) -> Result<Vec<usize>> {
    let (mu, cov) = subset_moments(points, subset);
    if log_det(&cov).is_none() {
        return Err(Error::SingularSubset);
    }
    Ok(smallest(&distances(points, &mu, &cov), h))
}

/// C-steps until the subset stops changing. Returns the subset and its log
/// determinant (`None` if singular).
fn concentrate(points: &DMatrix<f64>, mut subset: Vec<usize>, h: usize) -> (Vec<usize>, Option<f64>) {
    let (_, cov) = subset_moments(points, &subset);
    let mut det = log_det(&cov);
    for _ in 0..MAX_CSTEPS {
        let Some(current) = det else { break };
        let Ok(next) = c_step(points, &subset, h) else { break };
        if next == subset {
            break;
        }
        let (_, ncov) = subset_moments(points, &next);
        let ndet = log_det(&ncov);
        match ndet {
            Some(v) if v >= current => break,
            _ => {
                subset = next;
                det = ndet;
            }
        }
    }
    (subset, det)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for t in i..=j {
            out[idx[t]] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson_cov(x: &DMatrix<f64>) -> DMatrix<f64> {
    let all: Vec<usize> = (0..x.nrows()).collect();
    subset_moments(x, &all).1
}

fn column_map(x: &DMatrix<f64>, f: impl Fn(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for j in 0..x.ncols() {
        let col: Vec<f64> = x.column(j).iter().copied().collect();
        let mapped = f(&col);
        for i in 0..x.nrows() {
            out[(i, j)] = mapped[i];
        }
    }
    out
}

fn robust_scale(v: &[f64]) -> f64 {
    let s = mad(v);
    if s > 0.0 {
        return s;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
    if sd > 0.0 {
        sd
    } else {
        1.0
    }
}

/// The six deterministic starting scatter matrices on standardized data.
fn initial_scatters(y: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    let (n, k) = y.shape();
    let mut out = Vec::with_capacity(6);
    out.push(pearson_cov(&y.map(|v| v.tanh())));
    out.push(pearson_cov(&column_map(y, ranks)));
    out.push(pearson_cov(&column_map(y, |c| {
        ranks(c).iter().map(|r| normal_quantile((r - 1.0 / 3.0) / (n as f64 + 1.0 / 3.0))).collect()
    })));
    let mut ss = DMatrix::zeros(k, k);
    for i in 0..n {
        let row = y.row(i).transpose();
        let nr = row.norm();
        if nr > 0.0 {
            let s = row / nr;
            ss += &s * s.transpose();
        }
    }
    out.push(ss / n as f64);
    let norms: Vec<f64> = (0..n).map(|i| y.row(i).norm()).collect();
    let half = smallest(&norms, n.div_ceil(2));
    out.push(subset_moments(y, &half).1);
    let mut ogk = DMatrix::zeros(k, k);
    for a in 0..k {
        let ca: Vec<f64> = y.column(a).iter().copied().collect();
        let sa = robust_scale(&ca);
        ogk[(a, a)] = sa * sa;
        for b in 0..a {
            let plus: Vec<f64> = (0..n).map(|i| y[(i, a)] + y[(i, b)]).collect();
            let minus: Vec<f64> = (0..n).map(|i| y[(i, a)] - y[(i, b)]).collect();
            let v = (robust_scale(&plus).powi(2) - robust_scale(&minus).powi(2)) / 4.0;
            ogk[(a, b)] = v;
            ogk[(b, a)] = v;
        }
    }
    out.push(ogk);
    out
}

/// Initial h0-subset from a starting scatter: rotate to its eigenvectors,
/// rescale robustly, and keep the points closest to the rotated median.
fn start_subset(y: &DMatrix<f64>, scatter: &DMatrix<f64>) -> Vec<usize> {
    let (n, k) = y.shape();
    let (_, e) = sym_eigen_sorted(&symmetrize(scatter));
    let b = y * &e;
    let mut lambda = DVector::zeros(k);
    let mut center_b = DVector::zeros(k);
    for l in 0..k {
        let col: Vec<f64> = b.column(l).iter().copied().collect();
        lambda[l] = robust_scale(&col).powi(2);
        center_b[l] = median(&col);
    }
    let d: Vec<f64> = (0..n)
        .map(|i| (0..k).map(|l| (b[(i, l)] - center_b[l]).powi(2) / lambda[l]).sum())
        .collect();
    smallest(&d, n.div_ceil(2))
}

fn univariate(points: &DMatrix<f64>, h: usize) -> Vec<usize> {
    let n = points.nrows();
    let vals: Vec<f64> = points.column(0).iter().copied().collect();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let sorted: Vec<f64> = idx.iter().map(|&i| vals[i]).collect();
    let mut best = (f64::INFINITY, 0usize);
    for start in 0..=(n - h) {
        let w = &sorted[start..start + h];
        let m = w.iter().sum::<f64>() / h as f64;
        let v = w.iter().map(|x| (x - m).powi(2)).sum::<f64>();
        if v < best.0 {
            best = (v, start);
        }
    }
    let mut out = idx[best.1..best.1 + h].to_vec();
    out.sort_unstable();
    out
}

/// MCD location and scatter of the rows of `points`.
pub fn mcd_fit(points: &DMatrix<f64>, alpha: f64) -> Result<McdEstimate> {
    let (n, k) = points.shape();
    if n == 0 || k == 0 {
        return Err(Error::EmptyInput);
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    if !(alpha > 0.5 && alpha <= 1.0) {
        return Err(Error::InvalidConfig(format!("MCD coverage must be in (0.5, 1], got {alpha}")));
    }
    if !(n as f64 * alpha > (k + 1) as f64) {
        return Err(Error::TooFewPoints { n, k, alpha });
    }
    let h = subset_size(n, alpha);

    let subset = if h == n {
        (0..n).collect()
    } else if k == 1 {
        univariate(points, h)
    } else {
        let mut y = points.clone();
        for j in 0..k {
            let col: Vec<f64> = points.column(j).iter().copied().collect();
            let (m, s) = (median(&col), robust_scale(&col));
            for i in 0..n {
                y[(i, j)] = (points[(i, j)] - m) / s;
            }
        }
        let mut best: Option<(Vec<usize>, Option<f64>)> = None;
        for scatter in initial_scatters(&y) {
            let h0 = start_subset(&y, &scatter);
            let (mu, cov) = subset_moments(&y, &h0);
            let first = smallest(&distances(&y, &mu, &cov), h);
            let cand = concentrate(&y, first, h);
            let better = match &best {
                None => true,
                Some((_, bd)) => match (cand.1, *bd) {
                    (None, Some(_)) => true,
                    (Some(c), Some(b)) => c < b,
                    _ => false,
                },
            };
            if better {
                best = Some(cand);
            }
        }
        if binomial(n, k + 1) <= ELEMENTAL_LIMIT {
            for_each_combination(n, k + 1, |start| {
                let (mu, cov) = subset_moments(&y, start);
                if log_det(&cov).is_none() {
                    return;
                }
                let first = smallest(&distances(&y, &mu, &cov), h);
                let cand = concentrate(&y, first, h);
                let better = match &best {
                    None => true,
                    Some((_, bd)) => match (cand.1, *bd) {
                        (None, Some(_)) => true,
                        (Some(c), Some(b)) => c < b - 1e-12 * b.abs().max(1.0),
                        _ => false,
                    },
                };
                if better {
                    best = Some(cand);
                }
            });
        }
        best.expect("six starts").0
    };

    let (mu, cov) = subset_moments(points, &subset);
    let singular = log_det(&cov).is_none();
    let cov = if singular { ridge(&cov) } else { cov };
    let c_alpha = consistency_factor(k, alpha);
    Ok(McdEstimate { mu, sigma: symmetrize(&(cov * c_alpha)), subset, alpha, c_alpha, singular })
}

#[cfg(test)]
mod tests_support {
    use super::*;
    use crate::rng::stream;
    use rand_distr::{Distribution, StandardNormal};

    pub fn gaussian(n: usize, k: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = stream(seed, "mcd-test", &[]);
        DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(&mut rng))
    }

    /// Brute-force minimum-determinant h-subset (first in lexicographic order on ties).
    pub fn exhaustive(points: &DMatrix<f64>, h: usize) -> Vec<usize> {
        let n = points.nrows();
        let mut best = (f64::INFINITY, Vec::new());
        let mut comb: Vec<usize> = (0..h).collect();
        loop {
            let (_, cov) = subset_moments(points, &comb);
            let det = cov.determinant();
            if det < best.0 {
                best = (det, comb.clone());
            }
            let mut i = h;
            loop {
                if i == 0 {
                    return best.1;
                }
                i -= 1;
                if comb[i] != i + n - h {
                    break;
                }
                if i == 0 {
                    return best.1;
                }
            }
            comb[i] += 1;
            for j in i + 1..h {
                comb[j] = comb[j - 1] + 1;
            }
        }
    }

}
