//! Monte Carlo harness: Gaussian regression data with cellwise, casewise or
//! mixed contamination, test-set prediction error and bootstrap coverage.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cellcov::{cellcov, CovOptions};
use crate::data::DataMatrix;
use crate::error::{Error, Result};
use crate::fastcellcov::FastCellCovModel;
use crate::inference::{cellboot, ols_percentile, slope_contrast, BootOptions, IiOptions};
use crate::linalg::sym_eigen_sorted;
use crate::regression::{
    assign_folds, classical_fit, classical_moments, default_lambda_grid, tune, Coefficients, TuneOptions,
};
use crate::rng::{derive_seed, stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Contamination {
    Clean,
    Cellwise,
    Casewise,
    Mixed,
}

impl Contamination {
    pub fn as_str(self) -> &'static str {
        match self {
            Contamination::Clean => "clean",
            Contamination::Cellwise => "cellwise",
            Contamination::Casewise => "casewise",
            Contamination::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub epsilon: f64,
    pub gamma: f64,
    pub kind: Contamination,
    pub na_fraction: f64,
    pub snr: f64,
    pub seed: u64,
    pub reps: usize,
    /// Size of the clean test set.
    pub n_test: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n: 100,
            p: 5,
            q: 5,
            epsilon: 0.2,
            gamma: 0.0,
            kind: Contamination::Clean,
            na_fraction: 0.0,
            snr: 10.0,
            seed: 0,
            reps: 10,
            n_test: 1000,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.n < 2 || self.p == 0 || self.q == 0 || self.n_test == 0 || self.reps == 0 {
            return bad("n must be at least 2 and p, q, n_test, reps positive");
        }
        if !(0.0..0.5).contains(&self.epsilon) {
            return bad("epsilon must lie in [0, 0.5)");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be finite and nonnegative");
        }
        if (self.kind == Contamination::Clean) != (self.gamma == 0.0) {
            return bad("kind = clean exactly when gamma = 0");
        }
        if !(0.0..1.0).contains(&self.na_fraction) {
            return bad("na_fraction must lie in [0, 1)");
        }
        if !(self.snr > 0.0 && self.snr.is_finite()) {
            return bad("snr must be positive");
        }
        Ok(())
    }

    /// Same configuration with another contamination setting.
    pub fn with_contamination(&self, kind: Contamination, gamma: f64) -> Self {
        Self { kind, gamma, ..self.clone() }
    }
}

/// Population quantities of one simulated data set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Truth {
    pub slopes: DMatrix<f64>,
    pub intercept: DVector<f64>,
    pub sigma_eps: DMatrix<f64>,
    /// Joint covariance of `(x, y)`.
    pub sigma: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub train: DataMatrix,
    pub test: DataMatrix,
    pub truth: Truth,
    /// Cells overwritten by cellwise contamination.
    pub replaced: DMatrix<bool>,
    /// Rows drawn from the shifted casewise distribution.
    pub outlying_rows: Vec<usize>,
}

/// `sigma_jl = (-0.4)^|j - l|`.
pub fn toeplitz_sigma_x(p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |j, l| (-0.4f64).powi((j as i32 - l as i32).abs()))
}

/// `[[Sx, Sx B], [B' Sx, B' Sx B + Se]]`.
pub fn joint_covariance(sigma_x: &DMatrix<f64>, b: &DMatrix<f64>, sigma_eps: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, q) = b.shape();
    let sxb = sigma_x * b;
    let syy = b.transpose() * &sxb + sigma_eps;
    let mut s = DMatrix::zeros(p + q, p + q);
    s.view_mut((0, 0), (p, p)).copy_from(sigma_x);
    s.view_mut((0, p), (p, q)).copy_from(&sxb);
    s.view_mut((p, 0), (q, p)).copy_from(&sxb.transpose());
    s.view_mut((p, p), (q, q)).copy_from(&syy);
    s
}

fn normal_matrix(rng: &mut Rng, n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        v
    })
}

fn regression_rows(rng: &mut Rng, n: usize, lx: &DMatrix<f64>, b: &DMatrix<f64>, sd_eps: f64) -> DMatrix<f64> {
    let (p, q) = b.shape();
    let x = normal_matrix(rng, n, p) * lx.transpose();
    let y = &x * b + normal_matrix(rng, n, q) * sd_eps;
    let mut z = DMatrix::zeros(n, p + q);
    z.view_mut((0, 0), (n, p)).copy_from(&x);
    z.view_mut((0, p), (n, q)).copy_from(&y);
    z
}

/// Unit eigenvector of the smallest eigenvalue, sign fixed so that its
/// largest entry in absolute value is positive.
fn smallest_eigenvector(sigma: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let (vals, vecs) = sym_eigen_sorted(sigma);
    let last = vals.len() - 1;
    let mut e = vecs.column(last).into_owned();
    let imax = e.iamax();
    if e[imax] < 0.0 {
        e = -e;
    }
    (vals[last], e)
}

fn contaminate_cells(z: &mut DMatrix<f64>, replaced: &mut DMatrix<bool>, sigma: &DMatrix<f64>, rate: f64, gamma: f64, rng: &mut Rng) {
    let (n, d) = z.shape();
    for i in 0..n {
        for j in 0..d {
            if rng.random::<f64>() < rate {
                z[(i, j)] = gamma * sigma[(j, j)];
                replaced[(i, j)] = true;
            }
        }
    }
}

fn contaminate_rows(z: &mut DMatrix<f64>, sigma: &DMatrix<f64>, count: usize, gamma: f64, rng: &mut Rng) -> Result<Vec<usize>> {
    let (n, d) = z.shape();
    let (lmin, e) = smallest_eigenvector(sigma);
    // e' Sigma^-1 e = 1 / lambda_min
    let shift = e * (0.2 * gamma * d as f64 * (d as f64).sqrt() * lmin.sqrt());
    let l = sigma.clone().cholesky().ok_or(Error::SingularCovariance)?.unpack();
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(rng);
    let mut rows: Vec<usize> = rows.into_iter().take(count).collect();
    rows.sort_unstable();
    for &i in &rows {
        let u = normal_matrix(rng, d, 1);
        let v = &shift + &l * u.column(0);
        z.set_row(i, &v.transpose());
    }
    Ok(rows)
}

/// Masks each cell with probability `rate`; a row that loses every cell gets
/// one random cell back.
fn inject_missing(n: usize, d: usize, rate: f64, rng: &mut Rng) -> DMatrix<bool> {
    let mut mask = DMatrix::from_element(n, d, true);
    if rate == 0.0 {
        return mask;
    }
    for i in 0..n {
        for j in 0..d {
            if rng.random::<f64>() < rate {
                mask[(i, j)] = false;
            }
        }
        if (0..d).all(|j| !mask[(i, j)]) {
            mask[(i, rng.random_range(0..d))] = true;
        }
    }
    mask
}

fn column_names(p: usize, q: usize) -> Vec<String> {
    (1..=p).map(|j| format!("x{j}")).chain((1..=q).map(|j| format!("y{j}"))).collect()
}

/// Data set `rep` of the scenario. The clean part, contamination and
/// missingness use separate streams, so a contaminated data set differs from
/// its clean counterpart only in the replaced cells and rows.
pub fn generate(cfg: &ScenarioConfig, rep: usize) -> Result<Generated> {
    cfg.validate()?;
    let (n, p, q) = (cfg.n, cfg.p, cfg.q);
    let r = rep as u64;
    let sigma_x = toeplitz_sigma_x(p);
    let lx = sigma_x.clone().cholesky().ok_or(Error::SingularCovariance)?.unpack();
    let b = normal_matrix(&mut stream(cfg.seed, "sim-coef", &[r]), p, q) * 0.2;
    let signal = (b.transpose() * &sigma_x * &b).trace() / q as f64;
    let var_eps = signal / cfg.snr;
    let sigma_eps = DMatrix::identity(q, q) * var_eps;
    let sigma = joint_covariance(&sigma_x, &b, &sigma_eps);

    let mut z = regression_rows(&mut stream(cfg.seed, "sim-train", &[r]), n, &lx, &b, var_eps.sqrt());
    let test = regression_rows(&mut stream(cfg.seed, "sim-test", &[r]), cfg.n_test, &lx, &b, var_eps.sqrt());

    let mut replaced = DMatrix::from_element(n, p + q, false);
    let mut outlying_rows = Vec::new();
    let mut rng = stream(cfg.seed, "sim-contam", &[r]);
    match cfg.kind {
        Contamination::Clean => {}
        Contamination::Cellwise => contaminate_cells(&mut z, &mut replaced, &sigma, cfg.epsilon, cfg.gamma, &mut rng),
        Contamination::Casewise => {
            let count = (cfg.epsilon * n as f64).round() as usize;
            outlying_rows = contaminate_rows(&mut z, &sigma, count, cfg.gamma, &mut rng)?;
        }
        Contamination::Mixed => {
            let count = (cfg.epsilon / 2.0 * n as f64).round() as usize;
            outlying_rows = contaminate_rows(&mut z, &sigma, count, cfg.gamma, &mut rng)?;
            contaminate_cells(&mut z, &mut replaced, &sigma, cfg.epsilon / 2.0, cfg.gamma, &mut rng);
        }
    }
    let mask = inject_missing(n, p + q, cfg.na_fraction, &mut stream(cfg.seed, "sim-na", &[r]));
    let names = Some(column_names(p, q));
    Ok(Generated {
        train: DataMatrix::new(z, mask, names.clone())?,
        test: DataMatrix::new(test.clone(), DMatrix::from_element(test.nrows(), p + q, true), names)?,
        truth: Truth { slopes: b, intercept: DVector::zeros(q), sigma_eps, sigma },
        replaced,
        outlying_rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ridge,
    CellMr,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ridge => "ridge",
            Method::CellMr => "cellmr",
        }
    }
}

/// `(1/n) sum_i ||y_i - b - B' x_i||^2` on a complete data set.
pub fn test_mse(coef: &Coefficients, test: &DataMatrix, p: usize) -> f64 {
    let z = test.values();
    let n = z.nrows();
    let x = z.columns(0, p);
    let y = z.columns(p, z.ncols() - p);
    let mut pred = x * &coef.slopes;
    for mut row in pred.row_iter_mut() {
        row += coef.intercept.transpose();
    }
    (y - pred).norm_squared() / n as f64
}

/// Classical ridge with the penalty chosen by K-fold CV of the plain squared
/// prediction error on complete rows.
pub fn ridge_tuned(data: &DataMatrix, p: usize, folds: usize, seed: u64) -> Result<Coefficients> {
    let (_, sigma) = classical_moments(data)?;
    let grid = default_lambda_grid(&sigma.view((0, 0), (p, p)).into_owned());
    let assignment = assign_folds(data.nrows(), folds, seed)?;
    let complete: Vec<bool> = (0..data.nrows()).map(|i| data.row_mask(i).iter().all(|m| *m)).collect();
    let mut best = (f64::INFINITY, grid[0]);
    for &lambda in &grid {
        let mut sse = 0.0;
        let mut count = 0usize;
        let mut failed = false;
        for h in 0..folds {
            let train: Vec<usize> = (0..data.nrows()).filter(|&i| assignment[i] != h).collect();
            let Ok(coef) = classical_fit(&data.select_rows(&train), p, lambda) else {
                failed = true;
                break;
            };
            for i in (0..data.nrows()).filter(|&i| assignment[i] == h && complete[i]) {
                let z = data.row(i);
                let pred = &coef.intercept + coef.slopes.transpose() * z.rows(0, p);
                sse += (z.rows(p, z.len() - p) - pred).norm_squared();
                count += 1;
            }
        }
        if !failed && count > 0 && sse / (count as f64) < best.0 {
            best = (sse / count as f64, lambda);
        }
    }
    if !best.0.is_finite() {
        return Err(Error::InvalidConfig("ridge cross-validation failed for every penalty".into()));
    }
    classical_fit(data, p, best.1)
}

/// Per-method test errors of the successful replications.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodErrors {
    pub method: Method,
    pub values: Vec<f64>,
    pub failures: usize,
}

impl MethodErrors {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn median(&self) -> f64 {
        let mut v = self.values.clone();
        v.sort_by(f64::total_cmp);
        let m = v.len();
        if m == 0 {
            f64::NAN
        } else if m % 2 == 1 {
            v[m / 2]
        } else {
            0.5 * (v[m / 2 - 1] + v[m / 2])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MseTable {
    pub scenario: Contamination,
    pub gamma: f64,
    pub methods: Vec<MethodErrors>,
}

/// Tuning and estimation settings shared by the harness runs.
#[derive(Debug, Clone, PartialEq)]
pub struct HarnessOptions {
    pub folds: usize,
    pub k_grid: Option<Vec<usize>>,
    pub lambda_grid: Option<Vec<f64>>,
    pub cov: CovOptions,
}

impl Default for HarnessOptions {
    fn default() -> Self {
        Self { folds: 10, k_grid: None, lambda_grid: None, cov: CovOptions::default() }
    }
}

fn cellmr_tuned(train: &DataMatrix, p: usize, rep: usize, cfg: &ScenarioConfig, opts: &HarnessOptions) -> Result<crate::regression::RegressionFit> {
    let t = TuneOptions {
        k_grid: opts.k_grid.clone(),
        lambda_grid: opts.lambda_grid.clone(),
        folds: opts.folds,
        seed: derive_seed(cfg.seed, "sim-cv", &[rep as u64]),
    };
    tune(train, p, &t, &opts.cov).map(|(_, fit)| fit)
}

/// Test MSE of each method over the replications; failed replications are
/// dropped and counted.
pub fn run_mse(cfg: &ScenarioConfig, methods: &[Method], opts: &HarnessOptions) -> Result<MseTable> {
    cfg.validate()?;
    let per_rep: Vec<Vec<Option<f64>>> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let Ok(g) = generate(cfg, rep) else { return vec![None; methods.len()] };
            methods
                .iter()
                .map(|m| {
                    let coef = match m {
                        Method::Ridge => {
                            ridge_tuned(&g.train, cfg.p, opts.folds, derive_seed(cfg.seed, "sim-cv", &[rep as u64]))
                        }
                        Method::CellMr => cellmr_tuned(&g.train, cfg.p, rep, cfg, opts).map(|f| f.coefficients),
                    };
                    coef.ok().map(|c| test_mse(&c, &g.test, cfg.p)).filter(|v| v.is_finite())
                })
                .collect()
        })
        .collect();
    let methods = methods
        .iter()
        .enumerate()
        .map(|(mi, &method)| {
            let values: Vec<f64> = per_rep.iter().filter_map(|r| r[mi]).collect();
            MethodErrors { method, failures: cfg.reps - values.len(), values }
        })
        .collect();
    Ok(MseTable { scenario: cfg.kind, gamma: cfg.gamma, methods })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoverageRow {
    pub method: &'static str,
    pub covered: usize,
    pub total: usize,
    pub failures: usize,
}

impl CoverageRow {
    pub fn coverage(&self) -> f64 {
        self.covered as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageTable {
    pub scenario: Contamination,
    pub gamma: f64,
    pub level: f64,
    pub rows: Vec<CoverageRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageOptions {
    pub level: f64,
    pub b: usize,
    pub h: usize,
    pub ii: IiOptions,
}

/// Empirical coverage of cellBoot and OLS-percentile intervals for every
/// entry of the slope matrix.
pub fn run_coverage(cfg: &ScenarioConfig, cov: &CoverageOptions, opts: &HarnessOptions) -> Result<CoverageTable> {
    cfg.validate()?;
    let (p, q) = (cfg.p, cfg.q);
    let contrasts: Vec<Vec<f64>> = (0..p).flat_map(|r| (0..q).map(move |c| slope_contrast(p, q, r, c))).collect();
    let per_rep: Vec<[Option<usize>; 2]> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let Ok(g) = generate(cfg, rep) else { return [None, None] };
            let boot = BootOptions {
                b: cov.b,
                h: cov.h,
                level: cov.level,
                seed: derive_seed(cfg.seed, "sim-boot", &[rep as u64]),
                ii: cov.ii,
            };
            let hits = |intervals: &[crate::inference::Interval]| {
                intervals
                    .iter()
                    .enumerate()
                    .filter(|(c, iv)| iv.contains(g.truth.slopes[(c / q, c % q)]))
                    .count()
            };
            let cell = (|| -> Result<usize> {
                let fit = cellmr_tuned(&g.train, p, rep, cfg, opts)?;
                let joint = cellcov(&g.train, fit.k, &opts.cov)?;
                let model = FastCellCovModel::train(&g.train, &joint, &opts.cov)?;
                Ok(hits(&cellboot(&g.train, &fit, &model, &contrasts, &boot)?.intervals))
            })();
            let ols = ols_percentile(&g.train, p, &contrasts, &boot).map(|r| hits(&r.intervals));
            [cell.ok(), ols.ok()]
        })
        .collect();
    let rows = ["cellboot", "ols"]
        .iter()
        .enumerate()
        .map(|(mi, &method)| {
            let ok: Vec<usize> = per_rep.iter().filter_map(|r| r[mi]).collect();
            CoverageRow { method, covered: ok.iter().sum(), total: ok.len() * p * q, failures: cfg.reps - ok.len() }
        })
        .collect();
    Ok(CoverageTable { scenario: cfg.kind, gamma: cfg.gamma, level: cov.level, rows })
}

/// Trimmed RMSE: per column, keep the `ceil(alpha n)` smallest squared
/// residuals.
pub fn trim_rmse(resid: &DMatrix<f64>, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidConfig(format!("trimming level {alpha} outside (0, 1]")));
    }
    let (n, q) = resid.shape();
    if n == 0 || q == 0 {
        return Err(Error::EmptyInput);
    }
    let h = ((alpha * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut total = 0.0;
    for col in resid.column_iter() {
        let mut sq: Vec<f64> = col.iter().map(|r| r * r).collect();
        sq.sort_by(f64::total_cmp);
        total += sq[..h].iter().sum::<f64>();
    }
    Ok((total / (q * h) as f64).sqrt())
}

/// `scenario,gamma,method,metric,value,reps,failures`.
pub fn write_results<W: Write>(writer: W, mse: &[MseTable], coverage: &[CoverageTable], reps: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["scenario", "gamma", "method", "metric", "value", "reps", "failures"])?;
    for t in mse {
        for m in &t.methods {
            for (metric, value) in [("mean_mse", m.mean()), ("median_mse", m.median())] {
                w.write_record([
                    t.scenario.as_str().to_string(),
                    t.gamma.to_string(),
                    m.method.as_str().to_string(),
                    metric.to_string(),
                    value.to_string(),
                    reps.to_string(),
                    m.failures.to_string(),
                ])?;
            }
        }
    }
    for t in coverage {
        for r in &t.rows {
            w.write_record([
                t.scenario.as_str().to_string(),
                t.gamma.to_string(),
                r.method.to_string(),
                "coverage".to_string(),
                r.coverage().to_string(),
                reps.to_string(),
                r.failures.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: Contamination, gamma: f64) -> ScenarioConfig {
        ScenarioConfig { n: 60, p: 3, q: 2, kind, gamma, seed: 11, reps: 2, n_test: 50, ..Default::default() }
    }

    #[test]
    fn toeplitz_entries() {
        let s = toeplitz_sigma_x(4);
        assert_eq!(s[(0, 1)], -0.4);
        assert!((s[(0, 2)] - 0.16).abs() < 1e-15);
        assert_eq!(s[(3, 3)], 1.0);
        assert_eq!(s[(2, 0)], s[(0, 2)]);
    }

    #[test]
    fn snr_identity() {
        let cfg = ScenarioConfig { snr: 7.5, ..small(Contamination::Clean, 0.0) };
        let t = generate(&cfg, 0).unwrap().truth;
        let sx = toeplitz_sigma_x(cfg.p);
        let ratio = (t.slopes.transpose() * &sx * &t.slopes).trace() / t.sigma_eps.trace();
        assert!((ratio - 7.5).abs() < 1e-10);
    }

    #[test]
    fn clean_part_is_shared() {
        let clean = generate(&small(Contamination::Clean, 0.0), 1).unwrap();
        let cell = generate(&small(Contamination::Cellwise, 6.0), 1).unwrap();
        assert_eq!(clean.test.values(), cell.test.values());
        let (n, d) = clean.train.values().shape();
        for i in 0..n {
            for j in 0..d {
                let (a, b) = (clean.train.values()[(i, j)], cell.train.values()[(i, j)]);
                if cell.replaced[(i, j)] {
                    assert_eq!(b, 6.0 * clean.truth.sigma[(j, j)]);
                } else {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
        assert!(clean.replaced.iter().all(|r| !r));
    }

    #[test]
    fn cellwise_rate_is_plausible() {
        let cfg = ScenarioConfig { n: 400, ..small(Contamination::Cellwise, 3.0) };
        let g = generate(&cfg, 0).unwrap();
        let count = g.replaced.iter().filter(|r| **r).count();
        // Binomial(2000, 0.2): mean 400, sd about 18
        assert!((count as f64 - 400.0).abs() < 90.0, "{count}");
    }

    #[test]
    fn casewise_rows_shift_along_the_weakest_direction() {
        let g = generate(&small(Contamination::Casewise, 5.0), 0).unwrap();
        assert_eq!(g.outlying_rows.len(), 12);
        let (lmin, e) = smallest_eigenvector(&g.truth.sigma);
        let d = 5.0f64;
        let target = 0.2 * 5.0 * d * d.sqrt() * lmin.sqrt();
        let mean_proj: f64 =
            g.outlying_rows.iter().map(|&i| g.train.row(i).dot(&e)).sum::<f64>() / g.outlying_rows.len() as f64;
        // projection noise has sd sqrt(lmin / 12)
        assert!((mean_proj - target).abs() < 5.0 * (lmin / 12.0).sqrt(), "{mean_proj} vs {target}");
    }

    #[test]
    fn missing_cells_never_empty_a_row() {
        let cfg = ScenarioConfig { na_fraction: 0.9, ..small(Contamination::Clean, 0.0) };
        let g = generate(&cfg, 0).unwrap();
        assert!(g.train.row_counts().iter().all(|&c| c >= 1));
        assert!(g.train.has_missing());
    }

    #[test]
    fn config_invariants() {
        assert!(small(Contamination::Cellwise, 0.0).validate().is_err());
        assert!(small(Contamination::Clean, 2.0).validate().is_err());
        assert!(ScenarioConfig { epsilon: 0.5, ..small(Contamination::Cellwise, 1.0) }.validate().is_err());
        assert!(small(Contamination::Mixed, 1.0).validate().is_ok());
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = ScenarioConfig { na_fraction: 0.1, ..small(Contamination::Mixed, 4.0) };
        let a = generate(&cfg, 3).unwrap();
        let b = generate(&cfg, 3).unwrap();
        let bits = |m: &DMatrix<f64>| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.train.values()), bits(b.train.values()));
        assert_eq!(a.train.mask(), b.train.mask());
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn trimmed_rmse_examples() {
        let r = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 100.0]);
        assert!((trim_rmse(&r, 0.75).unwrap() - (14.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let plain = (r.norm_squared() / 4.0).sqrt();
        assert!((trim_rmse(&r, 1.0).unwrap() - plain).abs() < 1e-12);
        let flat = DMatrix::from_element(5, 3, -0.7);
        for a in [0.1, 0.5, 1.0] {
            assert!((trim_rmse(&flat, a).unwrap() - 0.7).abs() < 1e-12);
        }
        assert!(trim_rmse(&r, 0.0).is_err());
    }

    #[test]
    fn mse_table_is_reproducible() {
        let cfg = ScenarioConfig { reps: 1, ..small(Contamination::Cellwise, 6.0) };
        let opts = HarnessOptions { folds: 3, k_grid: Some(vec![1, 2]), ..Default::default() };
        let a = run_mse(&cfg, &[Method::Ridge, Method::CellMr], &opts).unwrap();
        let b = run_mse(&cfg, &[Method::Ridge, Method::CellMr], &opts).unwrap();
        assert_eq!(a, b);
        assert!(a.methods.iter().all(|m| m.failures == 0));
    }
}
