//! Cellwise and casewise robust PCA with missing values.
//!
//! The fit minimizes a doubly robustified reconstruction loss by iteratively
//! reweighted alternating least squares: scores row by row, then center and
//! loadings column by column. Weights are refreshed every iteration; the
//! residual scales come from the starting fit and stay fixed unless
//! `refresh_scales` is set.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::DataMatrix;
use crate::error::{Error, Result};
use crate::linalg::{mad, median, normalize_sign, solve_sym, sym_eigen_sorted};
use crate::fastcellcov::NEIGHBOR_CORR;
use crate::mkernel::{mscale, Kernel};

const SCORE_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcaOptions {
    pub rho1: Kernel,
    pub rho2: Kernel,
    pub max_iter: usize,
    pub tol: f64,
    /// Re-estimate the scales from the residuals at every iteration instead
    /// of keeping those of the initial fit.
    pub refresh_scales: bool,
}

impl Default for PcaOptions {
    fn default() -> Self {
        Self { rho1: Kernel::default(), rho2: Kernel::default(), max_iter: 100, tol: 1e-8, refresh_scales: false }
    }
}

impl PcaOptions {
    /// ρ1 = ρ2 = z², for checking the reduction to classical PCA.
    pub fn classical() -> Self {
        Self { rho1: Kernel::Quadratic, rho2: Kernel::Quadratic, ..Self::default() }
    }
}

/// Result of [`fit`]. Residuals and cell weights are 0 at missing cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPcaFit {
    pub mu_z: DVector<f64>,
    pub loadings: DMatrix<f64>,
    pub scores: DMatrix<f64>,
    pub k: usize,
    pub sigma1: Vec<f64>,
    pub sigma2: f64,
    pub residuals: DMatrix<f64>,
    pub total_dev: Vec<f64>,
    pub cell_weights: DMatrix<f64>,
    pub case_weights: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub loss_trace: Vec<f64>,
    pub options: PcaOptions,
}

/// The parts of a fit needed to score new points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mu_z: DVector<f64>,
    pub loadings: DMatrix<f64>,
    pub sigma1: Vec<f64>,
    pub sigma2: f64,
    pub options: PcaOptions,
}

/// Scores, fit and weights of a single (possibly new) point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointScore {
    pub scores: DVector<f64>,
    pub fitted: DVector<f64>,
    /// `z - fitted` on observed cells, 0 elsewhere.
    pub residuals: DVector<f64>,
    /// 0 at missing cells.
    pub cell_weights: DVector<f64>,
    pub total_dev: f64,
    pub case_weight: f64,
}

impl CellPcaFit {
    pub fn model(&self) -> PcaModel {
        PcaModel {
            mu_z: self.mu_z.clone(),
            loadings: self.loadings.clone(),
            sigma1: self.sigma1.clone(),
            sigma2: self.sigma2,
            options: self.options,
        }
    }

    /// Fitted point `mu_z + V u_i`.
    pub fn fitted_row(&self, i: usize) -> DVector<f64> {
        &self.mu_z + &self.loadings * self.scores.row(i).transpose()
    }
}

/// Casewise total deviation of one row.
pub fn total_deviation(residuals: &[f64], mask: &[bool], sigma1: &[f64], rho1: &Kernel) -> f64 {
    let mut s = 0.0;
    let mut m = 0usize;
    for j in 0..residuals.len() {
        if mask[j] {
            s += sigma1[j] * sigma1[j] * rho1.rho(residuals[j] / sigma1[j]);
            m += 1;
        }
    }
    if m == 0 {
        0.0
    } else {
        (s / m as f64).sqrt()
    }
}

/// Value of the robust PCA loss at `(mu, U, V)` for the given scales.
pub fn loss(
    data: &DataMatrix,
    mu: &DVector<f64>,
    scores: &DMatrix<f64>,
    loadings: &DMatrix<f64>,
    sigma1: &[f64],
    sigma2: f64,
    opts: &PcaOptions,
) -> Result<f64> {
    if !(sigma2 > 0.0) || sigma1.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::ScaleZero);
    }
    let r = residual_matrix(data, mu, scores, loadings);
    Ok(loss_from_residuals(data, &r, sigma1, sigma2, opts))
}

fn loss_from_residuals(data: &DataMatrix, r: &DMatrix<f64>, sigma1: &[f64], sigma2: f64, opts: &PcaOptions) -> f64 {
    let (n, d) = r.shape();
    let mut total = 0.0;
    let mut m = 0usize;
    let mut row = vec![0.0; d];
    for i in 0..n {
        let mask = data.row_mask(i);
        let mi = mask.iter().filter(|b| **b).count();
        for j in 0..d {
            row[j] = r[(i, j)];
        }
        let t = total_deviation(&row, &mask, sigma1, &opts.rho1);
        total += mi as f64 * opts.rho2.rho(t / sigma2);
        m += mi;
    }
    sigma2 * sigma2 * total / m as f64
}

/// `z - mu - U V^T` on observed cells, 0 at missing cells.
pub fn residual_matrix(
    data: &DataMatrix,
    mu: &DVector<f64>,
    scores: &DMatrix<f64>,
    loadings: &DMatrix<f64>,
) -> DMatrix<f64> {
    let (n, d) = (data.nrows(), data.ncols());
    let k = loadings.ncols();
    DMatrix::from_fn(n, d, |i, j| match data.get(i, j) {
        Some(z) => {
            let mut f = mu[j];
            for l in 0..k {
                f += scores[(i, l)] * loadings[(j, l)];
            }
            z - f
        }
        None => 0.0,
    })
}

struct Refresh {
    sigma1: Vec<f64>,
    sigma2: f64,
    total_dev: Vec<f64>,
    cell_weights: DMatrix<f64>,
    case_weights: Vec<f64>,
    loss: f64,
}

fn scale_floor(sigma1: &[f64]) -> f64 {
    (1e-3 * median(sigma1)).max(1e-6)
}

/// M-scales of the residual columns and of the resulting total deviations.
fn estimate_scales(data: &DataMatrix, r: &DMatrix<f64>, opts: &PcaOptions) -> Result<(Vec<f64>, f64)> {
    let (n, d) = r.shape();
    let mut sigma1 = Vec::with_capacity(d);
    for j in 0..d {
        let col: Vec<f64> = (0..n).filter(|&i| data.is_observed(i, j)).map(|i| r[(i, j)]).collect();
        let s = mscale(&col)?;
        sigma1.push(if s.degenerate { 0.0 } else { s.scale });
    }
    let floor = scale_floor(&sigma1);
    for s in sigma1.iter_mut() {
        *s = s.max(floor);
    }
    let total_dev: Vec<f64> = (0..n)
        .map(|i| {
            let row: Vec<f64> = (0..d).map(|j| r[(i, j)]).collect();
            total_deviation(&row, &data.row_mask(i), &sigma1, &opts.rho1)
        })
        .collect();
    let s2 = mscale(&total_dev)?;
    let sigma2 = if s2.degenerate { floor } else { s2.scale.max(floor) };
    Ok((sigma1, sigma2))
}

/// Total deviations, weights and loss from the current residuals at fixed scales.
fn refresh(data: &DataMatrix, r: &DMatrix<f64>, sigma1: &[f64], sigma2: f64, opts: &PcaOptions) -> Result<Refresh> {
    let (n, d) = r.shape();
    let sigma1 = sigma1.to_vec();
    let mut total_dev = Vec::with_capacity(n);
    let mut row = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            row[j] = r[(i, j)];
        }
        total_dev.push(total_deviation(&row, &data.row_mask(i), &sigma1, &opts.rho1));
    }
    let cell_weights = DMatrix::from_fn(n, d, |i, j| {
        if data.is_observed(i, j) {
            opts.rho1.weight(r[(i, j)] / sigma1[j])
        } else {
            0.0
        }
    });
    let case_weights: Vec<f64> = total_dev.iter().map(|t| opts.rho2.weight(t / sigma2)).collect();
    let loss = loss_from_residuals(data, r, &sigma1, sigma2, opts);
    Ok(Refresh { sigma1, sigma2, total_dev, cell_weights, case_weights, loss })
}

/// Weighted least-squares scores of one row: minimizes
/// `sum_j w_j (z_j - mu_j - v_j^T u)^2` over the cells with `w_j > 0`.
fn solve_scores(z: &[f64], w: &[f64], mu: &DVector<f64>, loadings: &DMatrix<f64>) -> DVector<f64> {
    let k = loadings.ncols();
    if k == 0 {
        return DVector::zeros(0);
    }
    let mut a = DMatrix::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    let mut active = 0;
    for j in 0..z.len() {
        if w[j] <= 0.0 {
            continue;
        }
        active += 1;
        let c = z[j] - mu[j];
        for l in 0..k {
            let vl = loadings[(j, l)];
            rhs[l] += w[j] * vl * c;
            for m in 0..=l {
                a[(l, m)] += w[j] * vl * loadings[(j, m)];
            }
        }
    }
    for l in 0..k {
        for m in 0..l {
            a[(m, l)] = a[(l, m)];
        }
    }
    let ridge = if active < k { SCORE_RIDGE } else { 0.0 };
    let mut u = solve_sym(&a, &rhs, ridge);
    if u.iter().any(|x| !x.is_finite()) {
        u = solve_sym(&a, &rhs, SCORE_RIDGE);
    }
    u
}

/// Pearson correlations of the ψ-wrapped columns, over rows where both
/// cells are observed. `z` is `NaN` at missing cells.
pub(crate) fn wrapped_correlations(zs: &DMatrix<f64>, kernel: &Kernel) -> DMatrix<f64> {
    let (n, d) = zs.shape();
    let wrapped = zs.map(|v| if v.is_nan() { f64::NAN } else { kernel.psi(v) });
    let mut c = DMatrix::identity(d, d);
    for j in 0..d {
        for h in 0..j {
            let pairs: Vec<(f64, f64)> = (0..n)
                .filter(|&i| !wrapped[(i, j)].is_nan() && !wrapped[(i, h)].is_nan())
                .map(|i| (wrapped[(i, j)], wrapped[(i, h)]))
                .collect();
            let r = if pairs.len() < 3 {
                0.0
            } else {
                let m = pairs.len() as f64;
                let (ma, mb) = pairs.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x / m, b + y / m));
                let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
                for &(x, y) in &pairs {
                    sab += (x - ma) * (y - mb);
                    saa += (x - ma) * (x - ma);
                    sbb += (y - mb) * (y - mb);
                }
                if saa > 0.0 && sbb > 0.0 { (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0) } else { 0.0 }
            };
            c[(j, h)] = r;
            c[(h, j)] = r;
        }
    }
    c
}

/// Deterministic start.
///
/// Classical kernels: rank-k SVD of the median-filled data. Robust kernels:
/// a DDC-style cleaning pass first. Cells are flagged when they are outlying
/// on their own or disagree with the prediction from strongly correlated
/// columns, flagged and missing cells are imputed from that prediction
/// (or the column median), and the SVD is taken of the cleaned matrix.
fn initialize(data: &DataMatrix, k: usize, opts: &PcaOptions) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let mut x = cleaned(data, opts);
    let n = data.nrows();
    let mu = DVector::from_fn(data.ncols(), |j, _| x.column(j).sum() / n as f64);
    for j in 0..data.ncols() {
        for i in 0..n {
            x[(i, j)] -= mu[j];
        }
    }
    let (_, vecs) = sym_eigen_sorted(&(x.transpose() * &x));
    let v = vecs.columns(0, k).into_owned();
    let u = &x * &v;
    (mu, v, u)
}

fn cleaned(data: &DataMatrix, opts: &PcaOptions) -> DMatrix<f64> {
    if opts.rho1.is_robust() {
        return ddc_clean(data, &opts.rho1);
    }
    let mut x = DMatrix::zeros(data.nrows(), data.ncols());
    for j in 0..data.ncols() {
        let med = median(&data.column_observed(j));
        for i in 0..data.nrows() {
            x[(i, j)] = data.get(i, j).unwrap_or(med);
        }
    }
    x
}

/// Center and loadings to start an iteration from.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaStart {
    pub mu: DVector<f64>,
    pub loadings: DMatrix<f64>,
}

/// The start [`fit`] would use on `data`.
pub fn start(data: &DataMatrix, k: usize, opts: &PcaOptions) -> Result<PcaStart> {
    check_rank(data, k)?;
    let (mu, loadings, _) = initialize(data, k, opts);
    Ok(PcaStart { mu, loadings })
}

fn check_rank(data: &DataMatrix, k: usize) -> Result<()> {
    let (n, d) = (data.nrows(), data.ncols());
    if k >= n.min(d) {
        return Err(Error::RankTooLarge { rank: k, n, d });
    }
    Ok(())
}

/// `sqrt(chi2_1(0.99))`
const DDC_CUTOFF: f64 = 2.575_829_303_548_901;

/// Weighted median; ties resolved towards the lower value.
fn weighted_median(pairs: &mut [(f64, f64)]) -> f64 {
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let half = 0.5 * pairs.iter().map(|p| p.1).sum::<f64>();
    let mut acc = 0.0;
    for &(v, w) in pairs.iter() {
        acc += w;
        if acc >= half {
            return v;
        }
    }
    pairs.last().map_or(0.0, |p| p.0)
}

/// Data with suspicious and missing cells replaced by robust predictions,
/// in the original units.
fn ddc_clean(data: &DataMatrix, kernel: &Kernel) -> DMatrix<f64> {
    let (n, d) = (data.nrows(), data.ncols());
    let mut center = vec![0.0; d];
    let mut scale = vec![1.0; d];
    for j in 0..d {
        let col = data.column_observed(j);
        center[j] = median(&col);
        let s = mad(&col);
        scale[j] = if s > 0.0 { s } else { 1.0 };
    }
    // robustly standardized, NaN at missing and at marginally outlying cells
    let z = DMatrix::from_fn(n, d, |i, j| match data.get(i, j) {
        Some(v) => {
            let t = (v - center[j]) / scale[j];
            if t.abs() > DDC_CUTOFF { f64::NAN } else { t }
        }
        None => f64::NAN,
    });
    let corr = wrapped_correlations(&z, kernel);
    let neighbors: Vec<Vec<usize>> =
        (0..d).map(|j| (0..d).filter(|&h| h != j && corr[(j, h)].abs() >= NEIGHBOR_CORR).collect()).collect();

    let mut pred = DMatrix::from_element(n, d, f64::NAN);
    let mut pairs = Vec::with_capacity(d);
    for i in 0..n {
        for j in 0..d {
            pairs.clear();
            pairs.extend(neighbors[j].iter().filter(|&&h| !z[(i, h)].is_nan()).map(|&h| (corr[(j, h)] * z[(i, h)], corr[(j, h)].abs())));
            if !pairs.is_empty() {
                pred[(i, j)] = weighted_median(&mut pairs);
            }
        }
    }
    let mut out = DMatrix::zeros(n, d);
    for j in 0..d {
        let dev: Vec<f64> = (0..n)
            .filter(|&i| !z[(i, j)].is_nan() && !pred[(i, j)].is_nan())
            .map(|i| z[(i, j)] - pred[(i, j)])
            .collect();
        let dev_scale = if dev.len() >= 3 { mad(&dev) } else { 0.0 };
        for i in 0..n {
            let p = pred[(i, j)];
            let keep = match (z[(i, j)], p.is_nan()) {
                (t, _) if t.is_nan() => false,
                (_, true) => true,
                (t, false) => dev_scale <= 0.0 || ((t - p) / dev_scale).abs() <= DDC_CUTOFF,
            };
            let t = if keep {
                z[(i, j)]
            } else if p.is_nan() {
                0.0
            } else {
                p
            };
            out[(i, j)] = center[j] + scale[j] * t;
        }
    }
    out
}

/// Fit cellPCA of rank `k` to (standardized) data.
pub fn fit(data: &DataMatrix, k: usize, opts: &PcaOptions) -> Result<CellPcaFit> {
    check_rank(data, k)?;
    let (mu, v, u) = initialize(data, k, opts);
    iterate(data, k, opts, mu, v, u)
}

/// Like [`fit`], but starting from a given center and loadings, typically
/// those of a reference data set. Scores start at the projections of the
/// cleaned data.
pub fn fit_from(data: &DataMatrix, k: usize, opts: &PcaOptions, start: &PcaStart) -> Result<CellPcaFit> {
    check_rank(data, k)?;
    if start.mu.len() != data.ncols() || start.loadings.shape() != (data.ncols(), k) {
        return Err(Error::DimensionMismatch(format!(
            "start of shape {}x{} for {} columns at rank {k}",
            start.loadings.nrows(),
            start.loadings.ncols(),
            data.ncols()
        )));
    }
    let mut x = cleaned(data, opts);
    for j in 0..data.ncols() {
        for i in 0..data.nrows() {
            x[(i, j)] -= start.mu[j];
        }
    }
    let u = &x * &start.loadings;
    iterate(data, k, opts, start.mu.clone(), start.loadings.clone(), u)
}

fn iterate(
    data: &DataMatrix,
    k: usize,
    opts: &PcaOptions,
    mut mu: DVector<f64>,
    mut v: DMatrix<f64>,
    mut u: DMatrix<f64>,
) -> Result<CellPcaFit> {
    let (n, d) = (data.nrows(), data.ncols());
    let (mut sigma1, mut sigma2) = estimate_scales(data, &residual_matrix(data, &mu, &u, &v), opts)?;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut best: Option<(f64, DVector<f64>, DMatrix<f64>, DMatrix<f64>)> = None;

    for iter in 0..opts.max_iter {
        iterations = iter + 1;
        let r = residual_matrix(data, &mu, &u, &v);
        if opts.refresh_scales && iter > 0 {
            (sigma1, sigma2) = estimate_scales(data, &r, opts)?;
        }
        let st = refresh(data, &r, &sigma1, sigma2, opts)?;
        if !st.loss.is_finite() {
            return Err(Error::NonFiniteIterate);
        }
        if best.as_ref().is_none_or(|b| st.loss <= b.0) {
            best = Some((st.loss, mu.clone(), v.clone(), u.clone()));
        }
        if let Some(&prev) = trace.last() {
            let change: f64 = prev - st.loss;
            if change.abs() <= opts.tol * f64::max(prev, f64::MIN_POSITIVE) {
                trace.push(st.loss);
                converged = true;
                break;
            }
        }
        trace.push(st.loss);

        // scores; the case weight is a common factor per row and drops out
        let mut zrow = vec![0.0; d];
        let mut wrow = vec![0.0; d];
        for i in 0..n {
            let mut any = false;
            for j in 0..d {
                zrow[j] = data.get(i, j).unwrap_or(0.0);
                wrow[j] = st.cell_weights[(i, j)];
                any |= wrow[j] > 0.0;
            }
            if !any {
                // nothing to fit; keep the current score, as in score_point
                continue;
            }
            let ui = solve_scores(&zrow, &wrow, &mu, &v);
            u.set_row(i, &ui.transpose());
        }

        // center and loadings
        for j in 0..d {
            let mut a = DMatrix::zeros(k + 1, k + 1);
            let mut rhs = DVector::zeros(k + 1);
            let mut total = 0.0;
            let mut x = vec![0.0; k + 1];
            for i in 0..n {
                let Some(z) = data.get(i, j) else { continue };
                let w = st.cell_weights[(i, j)] * st.case_weights[i];
                if w <= 0.0 {
                    continue;
                }
                total += w;
                x[0] = 1.0;
                for l in 0..k {
                    x[l + 1] = u[(i, l)];
                }
                for a_idx in 0..=k {
                    rhs[a_idx] += w * x[a_idx] * z;
                    for b_idx in 0..=a_idx {
                        a[(a_idx, b_idx)] += w * x[a_idx] * x[b_idx];
                    }
                }
            }
            if total <= 0.0 {
                continue;
            }
            for a_idx in 0..=k {
                for b_idx in 0..a_idx {
                    a[(b_idx, a_idx)] = a[(a_idx, b_idx)];
                }
            }
            let sol = solve_sym(&a, &rhs, 0.0);
            if sol.iter().all(|s| s.is_finite()) {
                mu[j] = sol[0];
                for l in 0..k {
                    v[(j, l)] = sol[l + 1];
                }
            }
        }
    }

    if !converged {
        if let Some((_, bm, bv, bu)) = best {
            mu = bm;
            v = bv;
            u = bu;
        }
    }
    let (v, u) = canonical_basis(&v, &u);
    let r = residual_matrix(data, &mu, &u, &v);
    if opts.refresh_scales {
        (sigma1, sigma2) = estimate_scales(data, &r, opts)?;
    }
    let st = refresh(data, &r, &sigma1, sigma2, opts)?;
    Ok(CellPcaFit {
        mu_z: mu,
        loadings: v,
        scores: u,
        k,
        sigma1: st.sigma1,
        sigma2: st.sigma2,
        residuals: r,
        total_dev: st.total_dev,
        cell_weights: st.cell_weights,
        case_weights: st.case_weights,
        converged,
        iterations,
        loss_trace: trace,
        options: *opts,
    })
}

/// Rotate `(V, U)` so that `V` is orthonormal, the score columns are
/// uncorrelated with decreasing spread, and each loading column has its
/// largest entry positive. `U V^T` is preserved.
fn canonical_basis(v: &DMatrix<f64>, u: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let k = v.ncols();
    if k == 0 {
        return (v.clone(), u.clone());
    }
    let svd = v.clone().svd(true, true);
    let p = svd.u.expect("requested");
    let qt = svd.v_t.expect("requested");
    let s = DMatrix::from_diagonal(&svd.singular_values);
    let up = u * qt.transpose() * s;
    let (_, rot) = sym_eigen_sorted(&(up.transpose() * &up));
    let mut v_out = &p * &rot;
    let mut u_out = &up * &rot;
    for l in 0..k {
        let orig = v_out.column(l).into_owned();
        let mut col = orig.clone();
        normalize_sign(&mut col);
        if col != orig {
            v_out.set_column(l, &col);
            let neg = -u_out.column(l);
            u_out.set_column(l, &neg);
        }
    }
    (v_out, u_out)
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mu_z.len()
    }

    pub fn rank(&self) -> usize {
        self.loadings.ncols()
    }

    fn objective(&self, z: &[f64], mask: &[bool], u: &DVector<f64>) -> f64 {
        let fitted = &self.mu_z + &self.loadings * u;
        let mut s = 0.0;
        for j in 0..z.len() {
            if mask[j] {
                let sj = self.sigma1[j];
                s += sj * sj * self.options.rho1.rho((z[j] - fitted[j]) / sj);
            }
        }
        s
    }

    fn irls(&self, z: &[f64], mask: &[bool], mut u: DVector<f64>) -> DVector<f64> {
        let d = z.len();
        let mut w = vec![0.0; d];
        for _ in 0..200 {
            let fitted = &self.mu_z + &self.loadings * &u;
            let mut any = false;
            for j in 0..d {
                w[j] = if mask[j] { self.options.rho1.weight((z[j] - fitted[j]) / self.sigma1[j]) } else { 0.0 };
                any |= w[j] > 0.0;
            }
            if !any {
                break;
            }
            let next = solve_scores(z, &w, &self.mu_z, &self.loadings);
            let step = (&next - &u).norm();
            u = next;
            if step <= 1e-13 * (1.0 + u.norm()) {
                break;
            }
        }
        u
    }

    /// Score a standardized point. Missing cells are `false` in `mask` and
    /// their values are ignored.
    pub fn score_point(&self, z: &[f64], mask: &[bool]) -> Result<PointScore> {
        let d = self.dim();
        if z.len() != d || mask.len() != d {
            return Err(Error::DimensionMismatch(format!("point has {} cells, model has {d}", z.len())));
        }
        if !mask.iter().any(|m| *m) {
            return Err(Error::AllMissingPoint);
        }
        if (0..d).any(|j| mask[j] && !z[j].is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        let zc: Vec<f64> = (0..d).map(|j| if mask[j] { z[j] } else { 0.0 }).collect();
        let observed: Vec<f64> = mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect();

        // Two starts: least squares on all observed cells, and weights taken
        // from the deviations to the center. Keep the better fixed point.
        let ls = self.irls(&zc, mask, solve_scores(&zc, &observed, &self.mu_z, &self.loadings));
        let w0: Vec<f64> = (0..d)
            .map(|j| if mask[j] { self.options.rho1.weight((zc[j] - self.mu_z[j]) / self.sigma1[j]) } else { 0.0 })
            .collect();
        let u = if self.rank() > 0 && w0.iter().any(|w| *w > 0.0) {
            let alt = self.irls(&zc, mask, solve_scores(&zc, &w0, &self.mu_z, &self.loadings));
            if self.objective(&zc, mask, &alt) < self.objective(&zc, mask, &ls) {
                alt
            } else {
                ls
            }
        } else {
            ls
        };

        let fitted = &self.mu_z + &self.loadings * &u;
        let residuals = DVector::from_fn(d, |j, _| if mask[j] { zc[j] - fitted[j] } else { 0.0 });
        let cell_weights = DVector::from_fn(d, |j, _| {
            if mask[j] {
                self.options.rho1.weight(residuals[j] / self.sigma1[j])
            } else {
                0.0
            }
        });
        let total_dev = total_deviation(residuals.as_slice(), mask, &self.sigma1, &self.options.rho1);
        let case_weight = self.options.rho2.weight(total_dev / self.sigma2);
        Ok(PointScore { scores: u, fitted, residuals, cell_weights, total_dev, case_weight })
    }

    /// Imputed version of a standardized point: fitted values at missing
    /// cells, observed cells shrunk toward the fit by their cell weight.
    pub fn impute_point(&self, z: &[f64], mask: &[bool]) -> Result<DVector<f64>> {
        let s = self.score_point(z, mask)?;
        Ok(DVector::from_fn(self.dim(), |j, _| {
            if mask[j] {
                s.fitted[j] + s.cell_weights[j] * (z[j] - s.fitted[j])
            } else {
                s.fitted[j]
            }
        }))
    }
}
