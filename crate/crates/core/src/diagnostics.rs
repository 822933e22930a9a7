//! Outlier map and cellmap quantities for a fitted regression.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::cellpca::{self, PcaOptions};
use crate::data::DataMatrix;
use crate::error::{Error, Result};
use crate::linalg::{chi2_quantile, quantile, symmetrize};
use crate::regression::RegressionFit;
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseClass {
    Regular,
    GoodLeverage,
    VerticalOutlier,
    BadLeverage,
}

impl CaseClass {
    /// Quadrant of the outlier map; both thresholds are inclusive on the
    /// regular side.
    pub fn classify(rd: f64, pd: f64, cutoff_rd: f64, cutoff_pd: f64) -> Self {
        match (rd <= cutoff_rd, pd <= cutoff_pd) {
            (true, true) => CaseClass::Regular,
            (true, false) => CaseClass::GoodLeverage,
            (false, true) => CaseClass::VerticalOutlier,
            (false, false) => CaseClass::BadLeverage,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CaseClass::Regular => "regular",
            CaseClass::GoodLeverage => "good_leverage",
            CaseClass::VerticalOutlier => "vertical_outlier",
            CaseClass::BadLeverage => "bad_leverage",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CellFlag {
    Low,
    Regular,
    High,
    Missing,
}

impl CellFlag {
    pub fn from_residual(r: Option<f64>, cutoff: f64) -> Self {
        match r {
            None => CellFlag::Missing,
            Some(r) if r.abs() <= cutoff => CellFlag::Regular,
            Some(r) if r > 0.0 => CellFlag::High,
            Some(_) => CellFlag::Low,
        }
    }

    /// -1 / 0 / +1, `None` for a missing cell.
    pub fn trit(self) -> Option<i8> {
        match self {
            CellFlag::Low => Some(-1),
            CellFlag::Regular => Some(0),
            CellFlag::High => Some(1),
            CellFlag::Missing => None,
        }
    }
}

/// `sqrt(chi2_{1, 0.99})`.
pub fn cell_cutoff() -> f64 {
    chi2_quantile(1, 0.99).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagOptions {
    /// Number of simulated clean rows for the total-deviation cutoff.
    pub n_sim: usize,
    pub seed: u64,
}

impl Default for DiagOptions {
    fn default() -> Self {
        Self { n_sim: 2000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub rd: Vec<f64>,
    pub pd: Vec<f64>,
    pub cutoff_rd: f64,
    pub cutoff_pd: f64,
    pub cutoff_t: f64,
    pub case_class: Vec<CaseClass>,
    /// Total deviation over `sigma_2`, compared against `cutoff_t`.
    pub total_dev: Vec<f64>,
    /// Standardized predictor residuals, NaN at missing cells.
    pub cell_residuals_x: DMatrix<f64>,
    /// Standardized regression residuals, NaN at missing cells.
    pub cell_residuals_y: DMatrix<f64>,
    pub cell_flags_x: DMatrix<CellFlag>,
    pub cell_flags_y: DMatrix<CellFlag>,
    pub point_size: Vec<f64>,
    pub case_shade: Vec<f64>,
    /// Set when a covariance had to be ridge-damped before inversion.
    pub damped: bool,
}

/// Cholesky factor of `m`, ridge-damped by `1e-8 tr/dim` if needed.
fn robust_cholesky(m: &DMatrix<f64>) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, bool)> {
    let m = symmetrize(m);
    if let Some(c) = m.clone().cholesky() {
        return Ok((c, false));
    }
    let dim = m.nrows();
    let tr = m.trace();
    if !(tr > 0.0) {
        return Err(Error::SingularCovariance);
    }
    let damped = &m + DMatrix::identity(dim, dim) * (1e-8 * tr / dim as f64);
    damped.cholesky().map(|c| (c, true)).ok_or(Error::SingularCovariance)
}

fn mahalanobis(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>, v: &DVector<f64>) -> f64 {
    let w = chol.l().solve_lower_triangular(v).expect("cholesky factor is nonsingular");
    w.norm()
}

/// Monte Carlo 99th percentile of `t_i / sigma_2` for clean Gaussian data
/// with `n` rows, `d` columns and rank `k`. Whole data sets are simulated
/// until at least `n_sim` values have been collected.
pub fn simulate_t_cutoff(n: usize, d: usize, k: usize, n_sim: usize, seed: u64, opts: &PcaOptions) -> Result<f64> {
    if n_sim < 100 {
        return Err(Error::InvalidConfig(format!("n_sim must be at least 100, got {n_sim}")));
    }
    let n = n.max(k + 2).max(d.min(50));
    let mut values = Vec::with_capacity(n_sim + n);
    let mut rep = 0u64;
    while values.len() < n_sim {
        let mut rng = stream(seed, "t-cutoff", &[rep]);
        let z = DMatrix::<f64>::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
        let fit = cellpca::fit(&DataMatrix::complete(z)?, k, opts)?;
        values.extend(fit.total_dev.iter().map(|t| t / fit.sigma2));
        rep += 1;
    }
    Ok(quantile(&values, 0.99))
}

/// Outlier map and cellmaps for `data` (predictors first) under `fit`.
pub fn distances(fit: &RegressionFit, data: &DataMatrix, opts: &DiagOptions) -> Result<DiagnosticsReport> {
    let (p, q) = (fit.p, fit.q);
    let d = p + q;
    if data.ncols() != d {
        return Err(Error::DimensionMismatch(format!("data has {} columns, fit expects {d}", data.ncols())));
    }
    let n = data.nrows();
    let (chol_eps, damped_eps) = robust_cholesky(fit.sigma_eps())?;
    let (mu_x, sigma_x) = (&fit.predictor.cov.mu, &fit.predictor.cov.sigma);
    let cutoff_rd = chi2_quantile(q, 0.99).sqrt();
    let cutoff_pd = chi2_quantile(p, 0.99).sqrt();
    let cutoff_t = simulate_t_cutoff(n, d, fit.k, opts.n_sim, opts.seed, &fit.joint_pca.options)?;
    let c_cell = cell_cutoff();
    let eps_sd: Vec<f64> = (0..q).map(|j| fit.sigma_eps()[(j, j)].max(0.0).sqrt()).collect();
    let joint_scales = &fit.cov.standardizer.scales;

    let mut rd = Vec::with_capacity(n);
    let mut pd = Vec::with_capacity(n);
    let mut total_dev = Vec::with_capacity(n);
    let mut point_size = Vec::with_capacity(n);
    let mut damped = damped_eps;
    let mut res_x = DMatrix::from_element(n, p, f64::NAN);
    let mut res_y = DMatrix::from_element(n, q, f64::NAN);
    for i in 0..n {
        let row = data.row(i);
        let mask = data.row_mask(i);
        let xs: Vec<f64> = (0..p).map(|j| row[j]).collect();
        let (x_imp, x_fit) = fit.predictor.impute(&xs, &mask[..p])?;
        let yhat = fit.predict_imputed(&x_imp);

        let r = DVector::from_fn(q, |j, _| if mask[p + j] { row[p + j] - yhat[j] } else { 0.0 });
        rd.push(mahalanobis(&chol_eps, &r));

        // observed block of the predictor scatter
        let obs: Vec<usize> = (0..p).filter(|&j| mask[j]).collect();
        let dx = DVector::from_fn(obs.len(), |a, _| row[obs[a]] - mu_x[obs[a]]);
        let sx = DMatrix::from_fn(obs.len(), obs.len(), |a, b| sigma_x[(obs[a], obs[b])]);
        let (chol_x, dx_damped) = robust_cholesky(&sx)?;
        damped |= dx_damped;
        pd.push(mahalanobis(&chol_x, &dx));

        for j in 0..p {
            if mask[j] {
                res_x[(i, j)] = (row[j] - x_fit[j]) / fit.predictor.residual_scales[j];
            }
        }
        for j in 0..q {
            if mask[p + j] {
                res_y[(i, j)] = (row[p + j] - yhat[j]) / eps_sd[j];
            }
        }

        let z: Vec<f64> = (0..d).map(|j| if mask[j] { row[j] / joint_scales[j] } else { 0.0 }).collect();
        let s = fit.joint_pca.score_point(&z, &mask)?;
        total_dev.push(s.total_dev / fit.joint_pca.sigma2);
        point_size.push(1.0 - s.cell_weights.sum() / d as f64);
    }
    let flag = |m: &DMatrix<f64>| m.map(|v| CellFlag::from_residual(if v.is_nan() { None } else { Some(v) }, c_cell));
    let case_class = rd.iter().zip(&pd).map(|(&r, &x)| CaseClass::classify(r, x, cutoff_rd, cutoff_pd)).collect();
    let case_shade = total_dev.iter().map(|&t| shade(t, cutoff_t)).collect();
    Ok(DiagnosticsReport {
        cell_flags_x: flag(&res_x),
        cell_flags_y: flag(&res_y),
        rd,
        pd,
        cutoff_rd,
        cutoff_pd,
        cutoff_t,
        case_class,
        total_dev,
        cell_residuals_x: res_x,
        cell_residuals_y: res_y,
        point_size,
        case_shade,
        damped,
    })
}

/// 0 (white) below `c`, 1 (black) above `1.5 c`, linear in between.
pub fn shade(t: f64, c: f64) -> f64 {
    ((t - c) / (0.5 * c)).clamp(0.0, 1.0)
}

impl DiagnosticsReport {
    /// `id,rd,pd,size,shade,class`, one line per case (ids are 1-based).
    pub fn write_outlier_map<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["id", "rd", "pd", "size", "shade", "class"])?;
        for i in 0..self.rd.len() {
            w.write_record([
                (i + 1).to_string(),
                self.rd[i].to_string(),
                self.pd[i].to_string(),
                self.point_size[i].to_string(),
                self.case_shade[i].to_string(),
                self.case_class[i].as_str().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `outlier_map.csv`, `cellmap_X.csv` and `cellmap_Y.csv` into `dir`.
    pub fn write_tables(&self, dir: &Path, names: &[String], p: usize) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_outlier_map(std::fs::File::create(dir.join("outlier_map.csv"))?)?;
        write_cellmap(
            std::fs::File::create(dir.join("cellmap_X.csv"))?,
            &self.cell_residuals_x,
            &self.cell_flags_x,
            &names[..p],
        )?;
        write_cellmap(
            std::fs::File::create(dir.join("cellmap_Y.csv"))?,
            &self.cell_residuals_y,
            &self.cell_flags_y,
            &names[p..],
        )
    }
}

/// Long format `id,variable,stdres,flag`; missing cells get `NA` and flag `missing`.
pub fn write_cellmap<W: Write>(writer: W, res: &DMatrix<f64>, flags: &DMatrix<CellFlag>, names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "variable", "stdres", "flag"])?;
    for i in 0..res.nrows() {
        for j in 0..res.ncols() {
            let (value, flag) = match flags[(i, j)].trit() {
                None => ("NA".to_string(), "missing".to_string()),
                Some(t) => (res[(i, j)].to_string(), t.to_string()),
            };
            w.write_record([(i + 1).to_string(), names[j].clone(), value, flag])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cellcov::CovOptions;
    use crate::regression;
    use crate::rng::stream;

    fn regression_data(n: usize, seed: u64) -> DataMatrix {
        let mut rng = stream(seed, "diag-test", &[]);
        let g = DMatrix::<f64>::from_fn(n, 5, |_, _| StandardNormal.sample(&mut rng));
        let v = DMatrix::from_fn(n, 5, |i, j| match j {
            0 => g[(i, 0)],
            1 => 0.6 * g[(i, 0)] + 0.8 * g[(i, 1)],
            2 => g[(i, 2)],
            3 => g[(i, 0)] - 0.5 * g[(i, 2)] + 0.3 * g[(i, 3)],
            _ => 0.4 * g[(i, 1)] + 0.3 * g[(i, 4)],
        });
        DataMatrix::complete(v).unwrap()
    }

    #[test]
    fn cutoffs_match_chi_square() {
        assert!((chi2_quantile(3, 0.99).sqrt() - 3.3682).abs() < 5e-5);
        assert!((cell_cutoff() - 2.5758).abs() < 5e-5);
    }

    #[test]
    fn quadrant_rule() {
        assert_eq!(CaseClass::classify(1.0, 1.0, 2.0, 2.0), CaseClass::Regular);
        assert_eq!(CaseClass::classify(2.0, 2.0, 2.0, 2.0), CaseClass::Regular);
        assert_eq!(CaseClass::classify(1.0, 3.0, 2.0, 2.0), CaseClass::GoodLeverage);
        assert_eq!(CaseClass::classify(3.0, 1.0, 2.0, 2.0), CaseClass::VerticalOutlier);
        assert_eq!(CaseClass::classify(3.0, 3.0, 2.0, 2.0), CaseClass::BadLeverage);
        assert_eq!(CaseClass::classify(0.0, 3.0, 2.0, 2.0), CaseClass::GoodLeverage);
    }

    #[test]
    fn flags_use_a_closed_threshold() {
        let c = cell_cutoff();
        assert_eq!(CellFlag::from_residual(Some(c), c), CellFlag::Regular);
        assert_eq!(CellFlag::from_residual(Some(-c), c), CellFlag::Regular);
        assert_eq!(CellFlag::from_residual(Some(c + 1e-12), c), CellFlag::High);
        assert_eq!(CellFlag::from_residual(Some(-c - 1e-12), c), CellFlag::Low);
        assert_eq!(CellFlag::from_residual(Some(0.0), c), CellFlag::Regular);
        assert_eq!(CellFlag::from_residual(None, c), CellFlag::Missing);
    }

    #[test]
    fn shading_is_linear_between_cutoffs() {
        assert_eq!(shade(1.0, 2.0), 0.0);
        assert_eq!(shade(2.0, 2.0), 0.0);
        assert_eq!(shade(2.5, 2.0), 0.5);
        assert_eq!(shade(3.0, 2.0), 1.0);
        assert_eq!(shade(9.0, 2.0), 1.0);
    }

    #[test]
    fn t_cutoff_is_stable_and_reproducible() {
        let o = PcaOptions::default();
        let a = simulate_t_cutoff(100, 5, 2, 2000, 3, &o).unwrap();
        assert_eq!(a, simulate_t_cutoff(100, 5, 2, 2000, 3, &o).unwrap());
        assert!(a > 0.0);
        let b = simulate_t_cutoff(100, 5, 2, 4000, 3, &o).unwrap();
        assert!((a - b).abs() / a < 0.05, "{a} {b}");
        assert!(simulate_t_cutoff(100, 5, 2, 50, 3, &o).is_err());
    }

    #[test]
    fn report_flags_planted_outliers() {
        let mut data = regression_data(150, 1);
        let mut v = data.values().clone();
        v[(7, 3)] += 8.0; // response cell
        v[(11, 0)] += 10.0; // predictor cell
        let mut mask = data.mask().clone();
        mask[(20, 1)] = false;
        data = DataMatrix::new(v, mask, None).unwrap();
        let fit = regression::fit(&data, 3, 1, 0.0, &CovOptions::default()).unwrap();
        let rep = distances(&fit, &data, &DiagOptions { n_sim: 500, seed: 1 }).unwrap();

        assert_eq!(rep.cell_flags_y[(7, 0)], CellFlag::High);
        assert_eq!(rep.cell_flags_x[(11, 0)], CellFlag::High);
        assert_eq!(rep.cell_flags_x[(20, 1)], CellFlag::Missing);
        assert!(rep.cell_residuals_x[(20, 1)].is_nan());
        assert!(rep.rd[7] > rep.cutoff_rd);
        assert!(rep.point_size[7] > 0.0 && rep.point_size[7] <= 1.0);
        for i in 0..150 {
            assert_eq!(rep.case_class[i], CaseClass::classify(rep.rd[i], rep.pd[i], rep.cutoff_rd, rep.cutoff_pd));
            assert!((0.0..=1.0).contains(&rep.case_shade[i]));
        }
        // most clean rows should sit in the regular quadrant
        let regular = rep.case_class.iter().filter(|c| **c == CaseClass::Regular).count();
        assert!(regular >= 120, "{regular}");
    }

    #[test]
    fn rd_matches_explicit_inverse() {
        let data = regression_data(80, 2);
        let fit = regression::fit(&data, 3, 1, 0.0, &CovOptions::default()).unwrap();
        let rep = distances(&fit, &data, &DiagOptions { n_sim: 200, seed: 0 }).unwrap();
        let inv = fit.sigma_eps().clone().try_inverse().unwrap();
        for i in 0..80 {
            let r = DVector::from_fn(2, |j, _| rep.cell_residuals_y[(i, j)] * fit.sigma_eps()[(j, j)].sqrt());
            let explicit = (r.transpose() * &inv * &r)[0].sqrt();
            assert!((explicit - rep.rd[i]).abs() <= 1e-10 * (1.0 + explicit));
        }
    }

    #[test]
    fn zero_residual_row_has_zero_rd() {
        let data = regression_data(80, 3);
        let fit = regression::fit(&data, 3, 1, 0.0, &CovOptions::default()).unwrap();
        let x = [0.1, -0.2, 0.3];
        let yhat = fit.predict(&x, &[true; 3]).unwrap();
        let row = DMatrix::from_row_slice(1, 5, &[x[0], x[1], x[2], yhat[0], yhat[1]]);
        let rep = distances(&fit, &DataMatrix::complete(row).unwrap(), &DiagOptions { n_sim: 200, seed: 0 }).unwrap();
        assert!(rep.rd[0] <= 1e-12);
        assert_eq!(
            rep.case_class[0],
            if rep.pd[0] <= rep.cutoff_pd { CaseClass::Regular } else { CaseClass::GoodLeverage }
        );
        assert!(rep.cell_flags_y.iter().all(|f| *f == CellFlag::Regular));
    }

    #[test]
    fn csv_tables_have_documented_columns() {
        let data = regression_data(40, 4);
        let fit = regression::fit(&data, 3, 1, 0.0, &CovOptions::default()).unwrap();
        let rep = distances(&fit, &data, &DiagOptions { n_sim: 200, seed: 0 }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        rep.write_tables(dir.path(), data.names(), 3).unwrap();
        let om = std::fs::read_to_string(dir.path().join("outlier_map.csv")).unwrap();
        assert!(om.starts_with("id,rd,pd,size,shade,class\n"));
        assert_eq!(om.lines().count(), 41);
        let cy = std::fs::read_to_string(dir.path().join("cellmap_Y.csv")).unwrap();
        assert!(cy.starts_with("id,variable,stdres,flag\n"));
        assert_eq!(cy.lines().count(), 1 + 40 * 2);
    }
}
