//! Robust location and scatter built from cellPCA: MCD scatter of the scores
//! inside the principal subspace plus a cell- and case-weighted scatter of
//! the residuals in its orthogonal complement.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cellpca::{self, CellPcaFit, PcaOptions, PcaStart};
use crate::data::{standardize, DataMatrix, Standardizer};
use crate::error::{Error, Result};
use crate::linalg::{clip_psd, symmetrize};
use crate::mcd::{mcd_fit, McdEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovOptions {
    pub pca: PcaOptions,
    /// MCD coverage on the scores.
    pub alpha: f64,
}

impl Default for CovOptions {
    fn default() -> Self {
        Self { pca: PcaOptions::default(), alpha: 0.75 }
    }
}

impl CovOptions {
    /// Quadratic kernels and a full MCD subset: reduces to the sample mean
    /// and the divisor-n sample covariance.
    pub fn classical() -> Self {
        Self { pca: PcaOptions::classical(), alpha: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovEstimate {
    /// Location in original units.
    pub mu: DVector<f64>,
    /// Scatter in original units.
    pub sigma: DMatrix<f64>,
    /// Location in standardized units.
    pub mu_sub: DVector<f64>,
    /// Subspace scatter `V Sigma_MCD V^T` (standardized units).
    pub sigma_sub: DMatrix<f64>,
    /// Orthogonal-complement scatter (standardized units).
    pub sigma_orth: DMatrix<f64>,
    pub normalizer_b: f64,
    pub standardizer: Standardizer,
    /// Magnitude of the most negative eigenvalue removed by the PSD repair.
    pub psd_clip: f64,
}

impl CovEstimate {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `sigma_sub + sigma_orth`, the scatter in standardized units.
    pub fn sigma_standardized(&self) -> DMatrix<f64> {
        &self.sigma_sub + &self.sigma_orth
    }
}

/// Everything produced along the way, for diagnostics and FastCellCov.
#[derive(Debug, Clone, PartialEq)]
pub struct CellCovFit {
    pub estimate: CovEstimate,
    pub pca: CellPcaFit,
    pub mcd: Option<McdEstimate>,
    pub standardized: DataMatrix,
}

/// Weighted scatter of the residuals `z_i - zhat_i` with weights
/// `w_case_i * W_i` on both sides, normalized by
/// `b = sum_i w_case_i (sum_j m_ij w_ij)^2 / d^2`. Returns `(scatter, b)`.
pub fn orth_scatter(fit: &CellPcaFit, data: &DataMatrix) -> Result<(DMatrix<f64>, f64)> {
    let (n, d) = (data.nrows(), data.ncols());
    if fit.residuals.shape() != (n, d) {
        return Err(Error::DimensionMismatch("fit and data differ in shape".into()));
    }
    let mut s = DMatrix::zeros(d, d);
    let mut b = 0.0;
    let mut wr = vec![0.0; d];
    for i in 0..n {
        let wc = fit.case_weights[i];
        let mut wsum = 0.0;
        for j in 0..d {
            let w = if data.is_observed(i, j) { fit.cell_weights[(i, j)] } else { 0.0 };
            wsum += w;
            wr[j] = w * fit.residuals[(i, j)];
        }
        b += wc * wsum * wsum;
        if wc == 0.0 {
            continue;
        }
        for j in 0..d {
            if wr[j] == 0.0 {
                continue;
            }
            for l in 0..=j {
                s[(j, l)] += wc * wr[j] * wr[l];
            }
        }
    }
    b /= (d * d) as f64;
    if b < 1e-12 {
        return Err(Error::NormalizerZero);
    }
    for j in 0..d {
        for l in 0..j {
            s[(l, j)] = s[(j, l)];
        }
    }
    Ok((s / b, b))
}

/// Assemble the estimate from an already standardized data set and its
/// cellPCA fit.
pub fn assemble(
    standardized: &DataMatrix,
    pca: &CellPcaFit,
    standardizer: &Standardizer,
    alpha: f64,
) -> Result<(CovEstimate, Option<McdEstimate>)> {
    let d = standardized.ncols();
    let k = pca.k;
    let (mu_sub, sigma_sub, mcd) = if k == 0 {
        (pca.mu_z.clone(), DMatrix::zeros(d, d), None)
    } else {
        let m = mcd_fit(&pca.scores, alpha)?;
        let mu = &pca.mu_z + &pca.loadings * &m.mu;
        let s = symmetrize(&(&pca.loadings * &m.sigma * pca.loadings.transpose()));
        (mu, s, Some(m))
    };
    let (sigma_orth, b) = orth_scatter(pca, standardized)?;
    let (mu, sigma) = standardizer.destandardize_cov(&mu_sub, &(&sigma_sub + &sigma_orth))?;
    let (sigma, psd_clip) = clip_psd(&sigma);
    if psd_clip > 1e-8 {
        log::warn!("cellcov: clipped a negative eigenvalue of size {psd_clip:e}");
    }
    Ok((
        CovEstimate { mu, sigma, mu_sub, sigma_sub, sigma_orth, normalizer_b: b, standardizer: standardizer.clone(), psd_clip },
        mcd,
    ))
}

/// Full pipeline: standardize, cellPCA of rank `k`, MCD on the scores,
/// orthogonal scatter, destandardize.
pub fn cellcov(data: &DataMatrix, k: usize, opts: &CovOptions) -> Result<CellCovFit> {
    cellcov_from(data, k, opts, None)
}

/// cellPCA start on the standardized scale of `data`, for reuse with
/// [`cellcov_from`] on perturbed versions of the same data.
pub fn pca_start(data: &DataMatrix, k: usize, opts: &CovOptions) -> Result<PcaStart> {
    let (z, _) = standardize(data)?;
    cellpca::start(&z, k, &opts.pca)
}

/// [`cellcov`] with the cellPCA iteration started at `start` when given.
pub fn cellcov_from(data: &DataMatrix, k: usize, opts: &CovOptions, start: Option<&PcaStart>) -> Result<CellCovFit> {
    let (z, standardizer) = standardize(data)?;
    let pca = match start {
        Some(s) => cellpca::fit_from(&z, k, &opts.pca, s)?,
        None => cellpca::fit(&z, k, &opts.pca)?,
    };
    let (estimate, mcd) = assemble(&z, &pca, &standardizer, opts.alpha)?;
    Ok(CellCovFit { estimate, pca, mcd, standardized: z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand_distr::{Distribution, StandardNormal};

    fn correlated(n: usize, rho: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = stream(seed, "cellcov-test", &[]);
        DMatrix::<f64>::from_fn(n, 2, |_, _| StandardNormal.sample(&mut rng))
            * DMatrix::from_row_slice(2, 2, &[1.0, rho, 0.0, (1.0 - rho * rho).sqrt()])
    }

    fn toy_fit(residuals: DMatrix<f64>, cell: DMatrix<f64>, case: Vec<f64>) -> CellPcaFit {
        let (n, d) = residuals.shape();
        CellPcaFit {
            mu_z: DVector::zeros(d),
            loadings: DMatrix::zeros(d, 0),
            scores: DMatrix::zeros(n, 0),
            k: 0,
            sigma1: vec![1.0; d],
            sigma2: 1.0,
            residuals,
            total_dev: vec![0.0; n],
            cell_weights: cell,
            case_weights: case,
            converged: true,
            iterations: 1,
            loss_trace: vec![],
            options: PcaOptions::default(),
        }
    }

    #[test]
    fn orth_scatter_hand_computed() {
        let r = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 3.0, -2.0]);
        let w = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, 1.0, 1.0, 0.0, 1.0]);
        let c = vec![1.0, 0.5, 0.8];
        let data = DataMatrix::complete(DMatrix::zeros(3, 2)).unwrap();
        let (s, b) = orth_scatter(&toy_fit(r, w, c), &data).unwrap();
        // Row by row: weighted residuals (1, 1), (-1, 0.5), (0, -2).
        // b = (1 * 1.5^2 + 0.5 * 2^2 + 0.8 * 1^2) / 4 = 5.05 / 4
        let b_ref = 5.05 / 4.0;
        assert!((b - b_ref).abs() < 1e-15);
        let s11 = (1.0 + 0.5 * 1.0 + 0.0) / b_ref;
        let s12 = (1.0 + 0.5 * -0.5 + 0.0) / b_ref;
        let s22 = (1.0 + 0.5 * 0.25 + 0.8 * 4.0) / b_ref;
        assert!((s[(0, 0)] - s11).abs() < 1e-14);
        assert!((s[(0, 1)] - s12).abs() < 1e-14);
        assert!((s[(1, 0)] - s12).abs() < 1e-14);
        assert!((s[(1, 1)] - s22).abs() < 1e-14);
    }

    #[test]
    fn orth_scatter_zero_and_dropped_rows() {
        let data = DataMatrix::complete(DMatrix::zeros(3, 2)).unwrap();
        let ones = DMatrix::from_element(3, 2, 1.0);
        let (s, _) = orth_scatter(&toy_fit(DMatrix::zeros(3, 2), ones.clone(), vec![1.0; 3]), &data).unwrap();
        assert_eq!(s, DMatrix::zeros(2, 2));

        let r = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 30.0, -40.0, 3.0, -2.0]);
        let (a, ba) = orth_scatter(&toy_fit(r.clone(), ones.clone(), vec![1.0, 0.0, 1.0]), &data).unwrap();
        let mut r2 = r.clone();
        r2[(1, 0)] = 0.0;
        r2[(1, 1)] = 0.0;
        let (b, bb) = orth_scatter(&toy_fit(r2, ones, vec![1.0, 0.0, 1.0]), &data).unwrap();
        assert_eq!(a, b);
        assert_eq!(ba, bb);
        let zero = DMatrix::zeros(3, 2);
        assert_eq!(
            orth_scatter(&toy_fit(r, zero, vec![1.0; 3]), &data).unwrap_err(),
            Error::NormalizerZero
        );
    }

    #[test]
    fn classical_path_is_sample_covariance() {
        let mut rng = stream(3, "cellcov-classical", &[]);
        let x = DMatrix::from_fn(50, 4, |i, j| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v + if j == 1 { 0.1 * i as f64 } else { 0.0 }
        });
        let data = DataMatrix::complete(x.clone()).unwrap();
        let fit = cellcov(&data, 2, &CovOptions::classical()).unwrap();
        let mean = DVector::from_fn(4, |j, _| x.column(j).mean());
        let mut cov = DMatrix::zeros(4, 4);
        for i in 0..50 {
            let c = x.row(i).transpose() - &mean;
            cov += &c * c.transpose();
        }
        cov /= 50.0;
        assert!((&fit.estimate.mu - &mean).amax() <= 1e-6);
        assert!((&fit.estimate.sigma - &cov).amax() <= 1e-6);
    }

    #[test]
    fn decomposition_identity_and_rank() {
        let data = DataMatrix::complete(correlated(120, 0.7, 1)).unwrap();
        let fit = cellcov(&data, 1, &CovOptions::default()).unwrap();
        let e = &fit.estimate;
        let (_, s) = e.standardizer.destandardize_cov(&e.mu_sub, &e.sigma_standardized()).unwrap();
        assert!((&s - &e.sigma).amax() <= 1e-10);
        let sv = e.sigma_sub.clone().svd(false, false).singular_values;
        assert!(sv.iter().filter(|v| **v > 1e-10).count() <= 1);
    }

    #[test]
    fn bivariate_recovery() {
        let data = DataMatrix::complete(correlated(500, 0.9, 7)).unwrap();
        let fit = cellcov(&data, 1, &CovOptions::default()).unwrap();
        let truth = DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0]);
        assert!((&fit.estimate.sigma - truth).amax() <= 0.12, "{}", fit.estimate.sigma);
    }

    #[test]
    fn scale_equivariance_and_row_permutation() {
        let mut rng = stream(5, "cellcov-eq", &[]);
        let x = DMatrix::<f64>::from_fn(80, 3, |_, _| StandardNormal.sample(&mut rng));
        let x = &x * DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.2, 0.0, 1.0, 0.4, 0.0, 0.0, 1.0]);
        let data = DataMatrix::complete(x).unwrap();
        let a = [3.0, 0.01, 250.0];
        let base = cellcov(&data, 1, &CovOptions::default()).unwrap().estimate;
        let scaled = cellcov(&data.scale_columns(&a), 1, &CovOptions::default()).unwrap().estimate;
        let am = DMatrix::from_diagonal(&DVector::from_row_slice(&a));
        let mu_ref = &am * &base.mu;
        let sig_ref = &am * &base.sigma * &am;
        assert!((&scaled.mu - &mu_ref).norm() <= 1e-8 * mu_ref.norm());
        assert!((&scaled.sigma - &sig_ref).norm() <= 1e-8 * sig_ref.norm());

        let perm: Vec<usize> = (0..80).map(|i| (i * 37) % 80).collect();
        let permuted = cellcov(&data.select_rows(&perm), 1, &CovOptions::default()).unwrap().estimate;
        assert!((&permuted.sigma - &base.sigma).amax() <= 1e-8);
    }
}
