//! Indirect-inference bias correction of FastCellCov and the cellBoot
//! percentile bootstrap built on it.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::DataMatrix;
use crate::error::{Error, Result};
use crate::fastcellcov::FastCellCovModel;
use crate::linalg::{sym_eigen_sorted, symmetrize};
use crate::regression::{classical_fit, plugin, Coefficients, RegressionFit};
use crate::rng::{derive_seed, stream};

/// `(mu, vech_s(Sigma))`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThetaVector {
    pub mu: DVector<f64>,
    /// Lower triangle stacked column by column, off-diagonals times `sqrt 2`.
    pub sigma_vechs: DVector<f64>,
}

/// Scaled half-vectorization of a symmetric matrix.
pub fn vech_s(sigma: &DMatrix<f64>) -> DVector<f64> {
    let d = sigma.nrows();
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for j in 0..d {
        out.push(sigma[(j, j)]);
        for i in j + 1..d {
            out.push(std::f64::consts::SQRT_2 * sigma[(i, j)]);
        }
    }
    DVector::from_vec(out)
}

/// Inverse of [`vech_s`].
pub fn unvech_s(v: &DVector<f64>, d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    let mut pos = 0;
    for j in 0..d {
        m[(j, j)] = v[pos];
        pos += 1;
        for i in j + 1..d {
            let x = v[pos] / std::f64::consts::SQRT_2;
            m[(i, j)] = x;
            m[(j, i)] = x;
            pos += 1;
        }
    }
    m
}

impl ThetaVector {
    pub fn new(mu: DVector<f64>, sigma: &DMatrix<f64>) -> Self {
        Self { sigma_vechs: vech_s(sigma), mu }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> DMatrix<f64> {
        unvech_s(&self.sigma_vechs, self.dim())
    }

    pub fn flat(&self) -> DVector<f64> {
        DVector::from_iterator(self.mu.len() + self.sigma_vechs.len(), self.mu.iter().chain(self.sigma_vechs.iter()).copied())
    }

    pub fn from_flat(v: &DVector<f64>, d: usize) -> Self {
        Self { mu: v.rows(0, d).into_owned(), sigma_vechs: v.rows(d, v.len() - d).into_owned() }
    }

    pub fn distance(&self, other: &Self) -> f64 {
        (self.flat() - other.flat()).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().chain(self.sigma_vechs.iter()).all(|v| v.is_finite())
    }
}

/// `{ ||mu|| <= M, c_lo <= eig(Sigma) <= c_hi }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThetaSpace {
    pub m: f64,
    pub c_lo: f64,
    pub c_hi: f64,
}

impl ThetaSpace {
    /// Bounds around an initial estimate: `M = 10(||mu|| + 1)`,
    /// `c = max(lambda_min / 100, 1e-6)`, `C = 100 lambda_max`.
    pub fn around(mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Self {
        let (eig, _) = sym_eigen_sorted(sigma);
        let lmax = eig[0].max(1e-6);
        let lmin = eig[eig.len() - 1];
        let c_lo = (lmin / 100.0).max(1e-6);
        Self { m: 10.0 * (mu.norm() + 1.0), c_lo, c_hi: (100.0 * lmax).max(c_lo) }
    }

    /// Membership up to rounding: eigenvalues may overshoot the bounds by
    /// `1e-12 C` and the mean norm by a relative `1e-12`. Projected points
    /// always pass, which makes [`project`](Self::project) exactly idempotent.
    pub fn contains(&self, theta: &ThetaVector) -> bool {
        self.mean_inside(&theta.mu) && self.eigen_inside(&sym_eigen_sorted(&theta.sigma()).0)
    }

    fn mean_inside(&self, mu: &DVector<f64>) -> bool {
        mu.norm() <= self.m * (1.0 + 1e-12)
    }

    fn eigen_inside(&self, eig: &DVector<f64>) -> bool {
        let slack = 1e-12 * self.c_hi;
        eig.iter().all(|&l| l >= self.c_lo - slack && l <= self.c_hi + slack)
    }

    /// Metric projection: radial clip of the mean, eigenvalue clip of the scatter.
    pub fn project(&self, theta: &ThetaVector) -> ThetaVector {
        let mu = if self.mean_inside(&theta.mu) { theta.mu.clone() } else { &theta.mu * (self.m / theta.mu.norm()) };
        let sigma = theta.sigma();
        let (eig, vecs) = sym_eigen_sorted(&sigma);
        let sigma_vechs = if self.eigen_inside(&eig) {
            theta.sigma_vechs.clone()
        } else {
            let clipped = DVector::from_iterator(eig.len(), eig.iter().map(|l| l.clamp(self.c_lo, self.c_hi)));
            vech_s(&symmetrize(&(&vecs * DMatrix::from_diagonal(&clipped) * vecs.transpose())))
        };
        ThetaVector { mu, sigma_vechs }
    }
}

/// Mean of the auxiliary estimator over data simulated from `theta`.
pub trait Auxiliary: Sync {
    fn mean(&self, theta: &ThetaVector) -> Result<ThetaVector>;
}

/// `pi_bar` for FastCellCov under a Gaussian model, with fixed standard
/// normal draws shared by every `theta`.
pub struct SimulatedAuxiliary<'a> {
    model: &'a FastCellCovModel,
    draws: Vec<DMatrix<f64>>,
    mask: Option<DMatrix<bool>>,
}

impl<'a> SimulatedAuxiliary<'a> {
    /// `h` data sets of `n` rows; draw `i` comes from stream `(seed, i)`.
    /// If `mask` is given, every simulated data set gets that missingness pattern.
    pub fn new(model: &'a FastCellCovModel, n: usize, h: usize, seed: u64, mask: Option<DMatrix<bool>>) -> Result<Self> {
        if h == 0 || n == 0 {
            return Err(Error::InvalidConfig("need at least one simulated data set with one row".into()));
        }
        let d = model.dim();
        if mask.as_ref().is_some_and(|m| m.shape() != (n, d)) {
            return Err(Error::DimensionMismatch("mask shape differs from the simulated data".into()));
        }
        let draws = (0..h)
            .map(|i| {
                let mut rng = stream(seed, "ii-draws", &[i as u64]);
                DMatrix::<f64>::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng))
            })
            .collect();
        Ok(Self { model, draws, mask })
    }

    /// `mu + chol(Sigma) u` for every row `u` of draw `i`.
    pub fn simulate(&self, theta: &ThetaVector, i: usize) -> Result<DataMatrix> {
        let sigma = theta.sigma();
        let l = sigma.cholesky().ok_or(Error::SingularCovariance)?.unpack();
        let u = &self.draws[i];
        let mut x = u * l.transpose();
        for mut row in x.row_iter_mut() {
            row += theta.mu.transpose();
        }
        match &self.mask {
            None => DataMatrix::complete(x),
            Some(m) => DataMatrix::new(x, m.clone(), None),
        }
    }
}

impl Auxiliary for SimulatedAuxiliary<'_> {
    fn mean(&self, theta: &ThetaVector) -> Result<ThetaVector> {
        let d = theta.dim();
        let mut acc = DVector::zeros(d + d * (d + 1) / 2);
        for i in 0..self.draws.len() {
            let est = self.model.evaluate(&self.simulate(theta, i)?)?;
            acc += ThetaVector::new(est.mu_f, &est.sigma_f).flat();
        }
        Ok(ThetaVector::from_flat(&(acc / self.draws.len() as f64), d))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IiResult {
    pub theta: ThetaVector,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IiOptions {
    /// Relative tolerance; the iteration stops when the fixed-point residual
    /// is below `tol (1 + ||pi_hat||)`.
    pub tol: f64,
    pub max_iter: usize,
    /// Anderson mixing memory; 0 gives the plain iteration.
    pub anderson: usize,
}

impl Default for IiOptions {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 50, anderson: 5 }
    }
}

/// Solves `theta = Pi(pi_hat + theta - pi_bar(theta))` started at `Pi(pi_hat)`.
pub fn indirect_estimate<A: Auxiliary + ?Sized>(
    aux: &A,
    pi_hat: &ThetaVector,
    space: &ThetaSpace,
    opts: &IiOptions,
) -> Result<IiResult> {
    indirect_estimate_from(aux, pi_hat, pi_hat, space, opts)
}

/// Same fixed point, started at `Pi(start)`.
///
/// With `anderson > 0` the plain update is mixed with the last few residuals
/// (type-II Anderson acceleration). The history is dropped whenever the
/// residual grows, so the slow plain iteration is the fallback.
pub fn indirect_estimate_from<A: Auxiliary + ?Sized>(
    aux: &A,
    pi_hat: &ThetaVector,
    start: &ThetaVector,
    space: &ThetaSpace,
    opts: &IiOptions,
) -> Result<IiResult> {
    if !pi_hat.is_finite() || !start.is_finite() {
        return Err(Error::NonFiniteIterate);
    }
    let d = pi_hat.dim();
    let tol = opts.tol * (1.0 + pi_hat.flat().norm());
    let target = pi_hat.flat();
    let map = |theta: &ThetaVector| -> Result<ThetaVector> {
        let bar = aux.mean(theta)?;
        if !bar.is_finite() {
            return Err(Error::NonFiniteIterate);
        }
        Ok(space.project(&ThetaVector::from_flat(&(&target + theta.flat() - bar.flat()), d)))
    };

    let mut theta = space.project(start);
    // (G(x_i), G(x_i) - x_i) for recent iterates
    let mut history: Vec<(DVector<f64>, DVector<f64>)> = Vec::new();
    let mut last_norm = f64::INFINITY;
    for iter in 1..=opts.max_iter {
        let g = map(&theta)?;
        let gx = g.flat();
        let f = &gx - theta.flat();
        let norm = f.norm();
        if norm < tol {
            return Ok(IiResult { theta: g, converged: true, iterations: iter });
        }
        if opts.anderson == 0 {
            theta = g;
            continue;
        }
        if norm > last_norm {
            history.clear();
        }
        last_norm = norm;
        let next = match anderson_step(&history, &gx, &f) {
            Some(v) => space.project(&ThetaVector::from_flat(&v, d)),
            None => g,
        };
        history.push((gx, f));
        if history.len() > opts.anderson + 1 {
            history.remove(0);
        }
        theta = next;
    }
    Ok(IiResult { theta, converged: false, iterations: opts.max_iter })
}

/// `G(x_k) - dG gamma` with `gamma` minimizing `||f_k - dF gamma||`.
fn anderson_step(history: &[(DVector<f64>, DVector<f64>)], gx: &DVector<f64>, f: &DVector<f64>) -> Option<DVector<f64>> {
    if history.is_empty() {
        return None;
    }
    let m = history.len();
    let mut df = DMatrix::zeros(f.len(), m);
    let mut dg = DMatrix::zeros(f.len(), m);
    for i in 0..m {
        let (g_prev, f_prev) = &history[i];
        let (g_next, f_next) = if i + 1 < m { (&history[i + 1].0, &history[i + 1].1) } else { (gx, f) };
        df.set_column(i, &(f_next - f_prev));
        dg.set_column(i, &(g_next - g_prev));
    }
    let svd = df.svd(true, true);
    let cut = 1e-10 * svd.singular_values.max();
    let gamma = svd.solve(f, cut).ok()?;
    let out = gx - dg * gamma;
    out.iter().all(|v| v.is_finite()).then_some(out)
}

/// `(b^T, vec(B)^T) a`, with `vec` stacking the columns of `B`.
pub fn contrast(coef: &Coefficients, a: &[f64]) -> Result<f64> {
    let (p, q) = coef.slopes.shape();
    if a.len() != q + p * q {
        return Err(Error::DimensionMismatch(format!("contrast has {} entries, expected {}", a.len(), q + p * q)));
    }
    let mut v = 0.0;
    for j in 0..q {
        v += a[j] * coef.intercept[j];
    }
    for col in 0..q {
        for row in 0..p {
            v += a[q + col * p + row] * coef.slopes[(row, col)];
        }
    }
    Ok(v)
}

/// Contrast picking the slope of predictor `row` for response `col`.
pub fn slope_contrast(p: usize, q: usize, row: usize, col: usize) -> Vec<f64> {
    let mut a = vec![0.0; q + p * q];
    a[q + col * p + row] = 1.0;
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// 1-based order statistic at rank `ceil(gamma B)`, clamped to `[1, B]`.
pub fn order_statistic(sorted: &[f64], gamma: f64) -> f64 {
    sorted[percentile_rank(sorted.len(), gamma) - 1]
}

/// One-based rank `ceil(gamma B)`, kept inside `1..=B`.
pub fn percentile_rank(b: usize, gamma: f64) -> usize {
    ((gamma * b as f64) - 1e-9).ceil().clamp(1.0, b as f64) as usize
}

/// Percentile interval at ranks `ceil(alpha/2 B)` and `ceil((1 - alpha/2) B)`.
pub fn percentile_interval(values: &[f64], level: f64) -> Result<Interval> {
    if values.is_empty() || !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfig("percentile interval needs samples and a level in (0, 1)".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let alpha = 1.0 - level;
    Ok(Interval { lower: order_statistic(&sorted, alpha / 2.0), upper: order_statistic(&sorted, 1.0 - alpha / 2.0), level })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapResult {
    pub theta_samples: Vec<ThetaVector>,
    /// `coef_samples[c][b]`: contrast `c` in replicate `b`.
    pub coef_samples: Vec<Vec<f64>>,
    pub intervals: Vec<Interval>,
    pub b: usize,
    pub h: usize,
    pub seed: u64,
    pub failures: usize,
    /// Replicates whose fixed-point iteration hit the iteration cap.
    pub unconverged: usize,
    /// Total fixed-point iterations over all replicates.
    pub ii_iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootOptions {
    pub b: usize,
    pub h: usize,
    pub level: f64,
    pub seed: u64,
    pub ii: IiOptions,
}

impl Default for BootOptions {
    fn default() -> Self {
        Self { b: 1000, h: 50, level: 0.9, seed: 0, ii: IiOptions::default() }
    }
}

fn resample(data: &DataMatrix, seed: u64, b: usize, attempt: usize) -> DataMatrix {
    let n = data.nrows();
    let mut rng = stream(seed, "cellboot-rows", &[b as u64, attempt as u64]);
    let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    data.select_rows(&rows)
}

/// Run `replicate` for `b = 0..B`, redrawing failed replicates; at most
/// `2B` attempts overall.
fn run_replicates<T: Send>(
    b_total: usize,
    replicate: impl Fn(usize, usize) -> Result<T> + Sync,
) -> Result<(Vec<T>, usize)> {
    let per: Vec<(Option<T>, usize)> = (0..b_total)
        .into_par_iter()
        .map(|b| {
            let mut failures = 0;
            for attempt in 0..=b_total {
                match replicate(b, attempt) {
                    Ok(v) => return (Some(v), failures),
                    Err(e) => {
                        log::debug!("replicate {b} attempt {attempt} failed: {e}");
                        failures += 1;
                    }
                }
            }
            (None, failures)
        })
        .collect();
    let failures: usize = per.iter().map(|p| p.1).sum();
    if failures > b_total || per.iter().any(|p| p.0.is_none()) {
        return Err(Error::InvalidConfig(format!("{failures} of {} bootstrap attempts failed", b_total + failures)));
    }
    Ok((per.into_iter().map(|p| p.0.expect("checked")).collect(), failures))
}

/// cellBoot: row-resample, FastCellCov, indirect inference, plug-in
/// coefficients with the original ridge parameter, percentile intervals.
///
/// Each replicate's fixed-point iteration starts from its own FastCellCov
/// estimate shifted by the correction found on the original sample.
pub fn cellboot(
    data: &DataMatrix,
    fit: &RegressionFit,
    model: &FastCellCovModel,
    contrasts: &[Vec<f64>],
    opts: &BootOptions,
) -> Result<BootstrapResult> {
    if opts.b == 0 || opts.h == 0 {
        return Err(Error::InvalidConfig("B and H must be positive".into()));
    }
    let d = data.ncols();
    if d != fit.p + fit.q || model.dim() != d {
        return Err(Error::DimensionMismatch("data, fit and auxiliary model disagree on dimension".into()));
    }
    for a in contrasts {
        if a.len() != fit.q + fit.p * fit.q {
            return Err(Error::DimensionMismatch(format!("contrast has {} entries", a.len())));
        }
    }
    let space = ThetaSpace::around(&fit.cov.mu, &fit.cov.sigma);
    let n = data.nrows();
    let shift = {
        let est = model.evaluate(data)?;
        let pi_hat = ThetaVector::new(est.mu_f, &est.sigma_f);
        let mask = data.has_missing().then(|| data.mask().clone());
        let aux = SimulatedAuxiliary::new(model, n, opts.h, derive_seed(opts.seed, "cellboot-origin", &[]), mask)?;
        let ii = indirect_estimate(&aux, &pi_hat, &space, &opts.ii)?;
        ii.theta.flat() - pi_hat.flat()
    };
    let (reps, failures) = run_replicates(opts.b, |b, attempt| {
        let sample = resample(data, opts.seed, b, attempt);
        let est = model.evaluate(&sample)?;
        let pi_hat = ThetaVector::new(est.mu_f, &est.sigma_f);
        let mask = sample.has_missing().then(|| sample.mask().clone());
        let sim_seed = derive_seed(opts.seed, "cellboot-sim", &[b as u64, attempt as u64]);
        let aux = SimulatedAuxiliary::new(model, n, opts.h, sim_seed, mask)?;
        let start = ThetaVector::from_flat(&(pi_hat.flat() + &shift), d);
        let ii = indirect_estimate_from(&aux, &pi_hat, &start, &space, &opts.ii)?;
        let coef = plugin(&ii.theta.mu, &ii.theta.sigma(), fit.lambda, fit.p)?;
        let values = contrasts.iter().map(|a| contrast(&coef, a)).collect::<Result<Vec<_>>>()?;
        Ok((ii, values))
    })?;
    let unconverged = reps.iter().filter(|(ii, _)| !ii.converged).count();
    let iterations = reps.iter().map(|(ii, _)| ii.iterations).sum();
    let mut out =
        finish(reps.into_iter().map(|(ii, v)| (Some(ii.theta), v)).collect(), contrasts.len(), failures, unconverged, opts)?;
    out.ii_iterations = iterations;
    Ok(out)
}

fn finish(
    reps: Vec<(Option<ThetaVector>, Vec<f64>)>,
    nc: usize,
    failures: usize,
    unconverged: usize,
    opts: &BootOptions,
) -> Result<BootstrapResult> {
    let coef_samples: Vec<Vec<f64>> = (0..nc).map(|c| reps.iter().map(|r| r.1[c]).collect()).collect();
    let intervals = coef_samples.iter().map(|v| percentile_interval(v, opts.level)).collect::<Result<Vec<_>>>()?;
    Ok(BootstrapResult {
        theta_samples: reps.into_iter().filter_map(|r| r.0).collect(),
        coef_samples,
        intervals,
        b: opts.b,
        h: opts.h,
        seed: opts.seed,
        failures,
        unconverged,
        ii_iterations: 0,
    })
}

/// Percentile bootstrap of classical least squares (complete cases), the
/// non-robust reference.
pub fn ols_percentile(data: &DataMatrix, p: usize, contrasts: &[Vec<f64>], opts: &BootOptions) -> Result<BootstrapResult> {
    let (reps, failures) = run_replicates(opts.b, |b, attempt| {
        let coef = classical_fit(&resample(data, opts.seed, b, attempt), p, 0.0)?;
        contrasts.iter().map(|a| contrast(&coef, a)).collect::<Result<Vec<_>>>()
    })?;
    finish(reps.into_iter().map(|v| (None, v)).collect(), contrasts.len(), failures, 0, &BootOptions { h: 0, ..*opts })
}

impl BootstrapResult {
    /// `replicate,value` for one contrast.
    pub fn write_samples<W: Write>(&self, writer: W, contrast: usize) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["replicate", "value"])?;
        for (b, v) in self.coef_samples[contrast].iter().enumerate() {
            w.write_record([(b + 1).to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Summary with one entry per contrast.
    pub fn summary_json(&self) -> serde_json::Value {
        let contrasts: Vec<_> = self
            .intervals
            .iter()
            .enumerate()
            .map(|(c, iv)| {
                serde_json::json!({
                    "contrast": c,
                    "lower": iv.lower,
                    "upper": iv.upper,
                    "level": iv.level,
                })
            })
            .collect();
        let level = self.intervals.first().map(|iv| iv.level);
        let draws = self.coef_samples.first().map_or(0, |v| v.len());
        let ranks = level.filter(|_| draws > 0).map(|l| {
            let alpha = 1.0 - l;
            [percentile_rank(draws, alpha / 2.0), percentile_rank(draws, 1.0 - alpha / 2.0)]
        });
        serde_json::json!({
            "contrasts": contrasts,
            "level": level,
            "ranks": ranks,
            "B": self.b,
            "H": self.h,
            "seed": self.seed,
            "failures": self.failures,
            "unconverged": self.unconverged,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cellcov::{cellcov, CovOptions};
    use crate::regression;
    use proptest::prelude::*;

    struct Shifted(DVector<f64>);

    impl Auxiliary for Shifted {
        fn mean(&self, theta: &ThetaVector) -> Result<ThetaVector> {
            Ok(ThetaVector::from_flat(&(theta.flat() + &self.0), theta.dim()))
        }
    }

    fn theta(mu: &[f64], sigma: &[f64]) -> ThetaVector {
        let d = mu.len();
        ThetaVector::new(DVector::from_row_slice(mu), &DMatrix::from_row_slice(d, d, sigma))
    }

    fn wide() -> ThetaSpace {
        ThetaSpace { m: 100.0, c_lo: 1e-3, c_hi: 1e3 }
    }

    #[test]
    fn vech_s_preserves_the_frobenius_norm() {
        let s = DMatrix::from_row_slice(3, 3, &[2.0, -0.3, 0.5, -0.3, 1.0, 0.25, 0.5, 0.25, 4.0]);
        let v = vech_s(&s);
        assert!((v.norm() - s.norm()).abs() <= 1e-12);
        assert_eq!(v.len(), 6);
        assert_eq!(v[0], 2.0);
        assert!((v[1] - (-0.3 * 2f64.sqrt())).abs() < 1e-15);
        let back = unvech_s(&v, 3);
        assert!((&back - &s).amax() <= 1e-15);
    }

    #[test]
    fn projection_examples() {
        let space = ThetaSpace { m: 1.0, c_lo: 0.1, c_hi: 1.0 };
        let inside = theta(&[0.3, 0.4], &[0.5, 0.1, 0.1, 0.5]);
        assert_eq!(space.project(&inside), inside);

        let far = theta(&[1.2, 1.6], &[0.5, 0.0, 0.0, 0.5]);
        let p = space.project(&far);
        assert!((p.mu.norm() - 1.0).abs() < 1e-15);
        assert!((p.mu[0] / p.mu[1] - 0.75).abs() < 1e-15);

        let diag = theta(&[0.0, 0.0], &[0.05, 0.0, 0.0, 2.0]);
        let p = space.project(&diag).sigma();
        assert_eq!(p, DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 1.0]));
    }

    fn arb_theta() -> impl Strategy<Value = ThetaVector> {
        (prop::collection::vec(-5.0..5.0f64, 3), prop::collection::vec(-3.0..3.0f64, 6))
            .prop_map(|(mu, s)| ThetaVector { mu: DVector::from_vec(mu), sigma_vechs: DVector::from_vec(s) })
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(t in arb_theta()) {
            let space = ThetaSpace { m: 2.0, c_lo: 0.1, c_hi: 2.0 };
            let once = space.project(&t);
            prop_assert_eq!(space.project(&once), once);
        }

        #[test]
        fn projection_is_nonexpansive(u in arb_theta(), v in arb_theta()) {
            let space = ThetaSpace { m: 2.0, c_lo: 0.1, c_hi: 2.0 };
            prop_assert!(space.project(&u).distance(&space.project(&v)) <= u.distance(&v) + 1e-12);
        }
    }

    #[test]
    fn identity_auxiliary_converges_immediately() {
        let pi = theta(&[1.0, 2.0], &[1.0, 0.3, 0.3, 2.0]);
        let r = indirect_estimate(&Shifted(DVector::zeros(5)), &pi, &wide(), &IiOptions::default()).unwrap();
        assert!(r.converged && r.iterations == 1);
        assert!(r.theta.distance(&wide().project(&pi)) <= 1e-12);
    }

    #[test]
    fn constant_bias_is_removed() {
        let pi = theta(&[1.0, 2.0], &[1.0, 0.3, 0.3, 2.0]);
        let delta = DVector::from_vec(vec![0.5, -0.2, 0.1, 0.05, -0.3]);
        let r = indirect_estimate(&Shifted(delta.clone()), &pi, &wide(), &IiOptions::default()).unwrap();
        let expected = wide().project(&ThetaVector::from_flat(&(pi.flat() - delta), 2));
        assert!(r.theta.distance(&expected) <= 1e-10);
        assert!(r.iterations <= 3);
    }

    #[test]
    fn non_finite_start_is_rejected() {
        let pi = theta(&[f64::NAN, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        let e = indirect_estimate(&Shifted(DVector::zeros(5)), &pi, &wide(), &IiOptions::default()).unwrap_err();
        assert_eq!(e, Error::NonFiniteIterate);
    }

    #[test]
    fn interval_rank_rule() {
        let v: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let iv = percentile_interval(&v, 0.9).unwrap();
        assert_eq!((iv.lower, iv.upper), (5.0, 95.0));
        let iv = percentile_interval(&[3.5; 40], 0.9).unwrap();
        assert_eq!((iv.lower, iv.upper), (3.5, 3.5));
    }

    #[test]
    fn contrast_uses_column_stacking() {
        let coef = Coefficients {
            slopes: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            intercept: DVector::from_vec(vec![10.0, 20.0]),
            sigma_eps: DMatrix::identity(2, 2),
        };
        assert_eq!(contrast(&coef, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap(), 10.0);
        assert_eq!(contrast(&coef, &slope_contrast(2, 2, 1, 0)).unwrap(), 3.0);
        assert_eq!(contrast(&coef, &slope_contrast(2, 2, 0, 1)).unwrap(), 2.0);
        assert!(contrast(&coef, &[1.0]).is_err());
    }

    fn small_problem() -> (DataMatrix, RegressionFit, FastCellCovModel) {
        let mut rng = stream(3, "boot-test", &[]);
        let g = DMatrix::<f64>::from_fn(80, 3, |_, _| StandardNormal.sample(&mut rng));
        let x = DMatrix::from_fn(80, 3, |i, j| match j {
            0 => g[(i, 0)],
            1 => 0.7 * g[(i, 0)] + 0.7 * g[(i, 1)],
            _ => 0.5 * g[(i, 0)] - 0.4 * g[(i, 1)] + 0.5 * g[(i, 2)],
        });
        let data = DataMatrix::complete(x).unwrap();
        let opts = CovOptions::default();
        let fit = regression::fit(&data, 2, 1, 0.0, &opts).unwrap();
        let cc = cellcov(&data, 1, &opts).unwrap();
        let model = FastCellCovModel::train(&data, &cc, &opts).unwrap();
        (data, fit, model)
    }

    #[test]
    fn common_random_numbers_make_pi_bar_deterministic() {
        let (data, fit, model) = small_problem();
        let aux = SimulatedAuxiliary::new(&model, data.nrows(), 3, 9, None).unwrap();
        let t = ThetaVector::new(fit.cov.mu.clone(), &fit.cov.sigma);
        assert_eq!(aux.mean(&t).unwrap(), aux.mean(&t).unwrap());
    }

    #[test]
    fn cellboot_is_reproducible() {
        let (data, fit, model) = small_problem();
        let a = vec![slope_contrast(2, 1, 0, 0), slope_contrast(2, 1, 1, 0)];
        let opts = BootOptions { b: 12, h: 3, level: 0.9, seed: 4, ii: IiOptions::default() };
        let r1 = cellboot(&data, &fit, &model, &a, &opts).unwrap();
        let r2 = cellboot(&data, &fit, &model, &a, &opts).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.coef_samples[0].len(), 12);
        for (c, iv) in r1.intervals.iter().enumerate() {
            assert!(iv.lower <= iv.upper);
            assert_eq!(*iv, percentile_interval(&r1.coef_samples[c], 0.9).unwrap());
        }
        let json = r1.summary_json();
        assert_eq!(json["B"], 12);
        let mut buf = Vec::new();
        r1.write_samples(&mut buf, 0).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 13);
    }
}
