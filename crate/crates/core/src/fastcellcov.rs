//! One-step approximation of cellCov for bootstrap and simulated samples.
//!
//! Training runs the full pipeline once and caches the pieces that are
//! expensive or unstable to re-estimate (scales, principal subspace, MCD of
//! the scores, pairwise robust correlations). Evaluating a new sample is then
//! a fixed sequence of weighted averages.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cellcov::{CellCovFit, CovOptions};
use crate::cellpca::wrapped_correlations;
use crate::data::{DataMatrix, Standardizer};
use crate::error::{Error, Result};
use crate::linalg::{chi2_quantile, median, symmetrize};
use crate::mkernel::{mscale, Kernel, TanhRho};

/// Columns with `|corr| >= NEIGHBOR_CORR` predict each other.
pub const NEIGHBOR_CORR: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastCellCovModel {
    pub standardizer: Standardizer,
    /// Center of the principal subspace (standardized units).
    pub mu_z: DVector<f64>,
    /// `V V^T`.
    pub v_proj: DMatrix<f64>,
    pub loadings: DMatrix<f64>,
    /// `sqrt` of the diagonal of the standardized scatter.
    pub s_hat: Vec<f64>,
    pub slopes: DMatrix<f64>,
    pub corrs: DMatrix<f64>,
    pub neighbor_sets: Vec<Vec<usize>>,
    /// Shrink slopes of the training predictions (informational; samples use their own).
    pub shrink: Vec<f64>,
    pub resid_scales: Vec<f64>,
    pub sigma1_star: Vec<f64>,
    pub sigma2_star: f64,
    /// MCD center and precision of the training scores (`k`-dimensional).
    pub mcd_mu: DVector<f64>,
    pub mcd_precision: DMatrix<f64>,
    pub delta_floor: f64,
    pub cell_kernel: Kernel,
    pub case_kernel: Kernel,
    /// ψ applied to squared Mahalanobis distances of the fitted points.
    pub subspace_psi: Option<TanhRho>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleWeights {
    pub filter: DMatrix<f64>,
    pub residual: DMatrix<f64>,
    pub cell: DMatrix<f64>,
    pub case: Vec<f64>,
    pub subspace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FastCovEstimate {
    pub mu_f: DVector<f64>,
    pub sigma_f: DMatrix<f64>,
    pub weights: SampleWeights,
    /// Shrink slopes used for this sample.
    pub shrink: Vec<f64>,
    /// Weighted mean squared residual per row (`r^imp`).
    pub r_imp: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShrinkSlope {
    pub slope: f64,
    /// Fewer than two usable predictions; the slope fell back to 1.
    pub degenerate: bool,
}

/// Robust no-intercept slope of `observed` on `predicted`: least squares,
/// then one pass reweighted by the tanh weights of the residuals over
/// `1.4826 median |residual|`. Pairs with a zero prediction are ignored.
pub fn shrink_slope(observed: &[f64], predicted: &[f64]) -> ShrinkSlope {
    let pairs: Vec<(f64, f64)> =
        observed.iter().zip(predicted).filter(|(_, p)| **p != 0.0).map(|(&o, &p)| (o, p)).collect();
    if pairs.len() < 2 {
        return ShrinkSlope { slope: 1.0, degenerate: true };
    }
    let ls = |w: &dyn Fn(f64, f64) -> f64| {
        let (mut num, mut den) = (0.0, 0.0);
        for &(o, p) in &pairs {
            let wi = w(o, p);
            num += wi * o * p;
            den += wi * p * p;
        }
        if den > 0.0 { Some(num / den) } else { None }
    };
    let a0 = ls(&|_, _| 1.0).expect("nonzero predictions");
    let abs_resid: Vec<f64> = pairs.iter().map(|&(o, p)| (o - a0 * p).abs()).collect();
    let scale = 1.482_602_218_505_602 * median(&abs_resid);
    if !(scale > 0.0) {
        return ShrinkSlope { slope: a0, degenerate: false };
    }
    let kernel = Kernel::default();
    let a1 = ls(&|o, p| kernel.weight((o - a0 * p) / scale)).unwrap_or(a0);
    ShrinkSlope { slope: a1, degenerate: false }
}

/// Intermediate quantities of one pass over a sample.
struct Pass {
    z: DMatrix<f64>,
    zs: DMatrix<f64>,
    filter: DMatrix<f64>,
    pred: DMatrix<f64>,
    shrink: Vec<f64>,
}

impl FastCellCovModel {
    /// Cache the structure of a full cellCov fit of `data`.
    pub fn train(data: &DataMatrix, fit: &CellCovFit, opts: &CovOptions) -> Result<Self> {
        let d = data.ncols();
        if fit.estimate.dim() != d {
            return Err(Error::DimensionMismatch("cellCov fit and data differ in dimension".into()));
        }
        let est = &fit.estimate;
        let sig = est.sigma_standardized();
        let s_hat: Vec<f64> = (0..d).map(|j| sig[(j, j)].max(0.0).sqrt()).collect();
        if s_hat.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::ScaleZero);
        }
        let k = fit.pca.k;
        let (mcd_mu, mcd_precision, subspace_psi) = match &fit.mcd {
            Some(m) if k > 0 => {
                let prec = symmetrize(&m.sigma).try_inverse().ok_or(Error::SingularCovariance)?;
                let psi = TanhRho::new(chi2_quantile(k, 0.99), chi2_quantile(k, 0.999), TanhRho::PUBLISHED_Q2)?;
                (m.mu.clone(), symmetrize(&prec), Some(psi))
            }
            _ => (DVector::zeros(0), DMatrix::zeros(0, 0), None),
        };
        let mut model = FastCellCovModel {
            standardizer: est.standardizer.clone(),
            mu_z: fit.pca.mu_z.clone(),
            v_proj: &fit.pca.loadings * fit.pca.loadings.transpose(),
            loadings: fit.pca.loadings.clone(),
            s_hat,
            slopes: DMatrix::zeros(d, d),
            corrs: DMatrix::identity(d, d),
            neighbor_sets: vec![Vec::new(); d],
            shrink: vec![1.0; d],
            resid_scales: vec![1.0; d],
            sigma1_star: fit.pca.sigma1.clone(),
            sigma2_star: 1.0,
            mcd_mu,
            mcd_precision,
            delta_floor: 0.01,
            cell_kernel: opts.pca.rho1,
            case_kernel: opts.pca.rho2,
            subspace_psi,
        };

        let zs = model.standardize(data)?;
        let corrs = wrapped_correlations(&zs, &model.cell_kernel);
        for j in 0..d {
            model.neighbor_sets[j] = (0..d).filter(|&h| h != j && corrs[(j, h)].abs() >= NEIGHBOR_CORR).collect();
        }
        model.slopes = corrs.clone();
        model.corrs = corrs;

        let pass = model.predict_pass(data)?;
        model.shrink = pass.shrink.clone();
        for j in 0..d {
            let r: Vec<f64> = (0..data.nrows())
                .filter(|&i| data.is_observed(i, j))
                .map(|i| pass.zs[(i, j)] - pass.pred[(i, j)])
                .collect();
            let s = mscale(&r)?;
            model.resid_scales[j] = if s.degenerate { 1.0 } else { s.scale };
        }
        let r_imp = model.evaluate_inner(data, false, Some(pass))?.r_imp;
        let finite: Vec<f64> = r_imp.into_iter().filter(|v| v.is_finite()).collect();
        let s2 = mscale(&finite)?;
        model.sigma2_star = if s2.degenerate { 1.0 } else { s2.scale };
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.s_hat.len()
    }

    /// `S^{-1}(D^{-1} x - mu_z)`, NaN at missing cells.
    fn standardize(&self, data: &DataMatrix) -> Result<DMatrix<f64>> {
        let d = self.dim();
        if data.ncols() != d {
            return Err(Error::DimensionMismatch(format!("sample has {} columns, model has {d}", data.ncols())));
        }
        let sc = &self.standardizer.scales;
        Ok(DMatrix::from_fn(data.nrows(), d, |i, j| match data.get(i, j) {
            Some(x) => (x / sc[j] - self.mu_z[j]) / self.s_hat[j],
            None => f64::NAN,
        }))
    }

    fn predict_pass(&self, data: &DataMatrix) -> Result<Pass> {
        let (n, d) = (data.nrows(), self.dim());
        let zs = self.standardize(data)?;
        let sc = &self.standardizer.scales;
        let z = DMatrix::from_fn(n, d, |i, j| data.get(i, j).map(|x| x / sc[j]).unwrap_or(f64::NAN));
        let filter = zs.map(|v| if v.is_nan() { 0.0 } else { self.cell_kernel.weight(v) });
        let mut pred = DMatrix::zeros(n, d);
        for j in 0..d {
            let hs = &self.neighbor_sets[j];
            for i in 0..n {
                let (mut num, mut den) = (0.0, 0.0);
                for &h in hs {
                    let w = filter[(i, h)];
                    if w > 0.0 {
                        let c = self.corrs[(j, h)].abs() * w;
                        num += c * self.slopes[(j, h)] * zs[(i, h)];
                        den += c;
                    }
                }
                pred[(i, j)] = if den > 0.0 { num / den } else { 0.0 };
            }
        }
        let mut shrink = vec![1.0; d];
        for j in 0..d {
            let (obs, pr): (Vec<f64>, Vec<f64>) =
                (0..n).filter(|&i| !zs[(i, j)].is_nan()).map(|i| (zs[(i, j)], pred[(i, j)])).unzip();
            shrink[j] = shrink_slope(&obs, &pr).slope;
            for i in 0..n {
                pred[(i, j)] *= shrink[j];
            }
        }
        Ok(Pass { z, zs, filter, pred, shrink })
    }

    /// FastCellCov estimate of a sample with the same columns as the training data.
    pub fn evaluate(&self, sample: &DataMatrix) -> Result<FastCovEstimate> {
        self.evaluate_inner(sample, false, None)
    }

    /// Same pipeline with every weight set to 1.
    pub fn evaluate_unit_weights(&self, sample: &DataMatrix) -> Result<FastCovEstimate> {
        self.evaluate_inner(sample, true, None)
    }

    fn evaluate_inner(&self, sample: &DataMatrix, unit: bool, pass: Option<Pass>) -> Result<FastCovEstimate> {
        let (n, d) = (sample.nrows(), self.dim());
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        let Pass { z, zs, filter, pred, shrink } = match pass {
            Some(p) => p,
            None => self.predict_pass(sample)?,
        };
        let k = self.loadings.ncols();
        let mut residual = DMatrix::zeros(n, d);
        let mut cell = DMatrix::zeros(n, d);
        let mut case = vec![1.0; n];
        let mut subspace = vec![1.0; n];
        let mut r_imp = vec![0.0; n];
        let mut imp = vec![0.0; d];
        let mut centered = vec![0.0; d];
        let mut u = DVector::zeros(k);
        for i in 0..n {
            for j in 0..d {
                let observed = !zs[(i, j)].is_nan();
                let wr = if observed { self.cell_kernel.weight((zs[(i, j)] - pred[(i, j)]) / self.resid_scales[j]) } else { 0.0 };
                residual[(i, j)] = wr;
                let keep = filter[(i, j)] * wr;
                let fallback = self.s_hat[j] * pred[(i, j)] + self.mu_z[j];
                imp[j] = if observed { keep * z[(i, j)] + (1.0 - keep) * fallback } else { fallback };
                centered[j] = imp[j] - self.mu_z[j];
            }
            // projection onto the principal subspace
            for l in 0..k {
                u[l] = (0..d).map(|j| self.loadings[(j, l)] * centered[j]).sum();
            }
            let (mut num, mut den) = (0.0, 0.0);
            for j in 0..d {
                if zs[(i, j)].is_nan() {
                    continue;
                }
                let fitted = self.mu_z[j] + (0..k).map(|l| self.loadings[(j, l)] * u[l]).sum::<f64>();
                let r = z[(i, j)] - fitted;
                let w = self.cell_kernel.weight(r / self.sigma1_star[j]);
                cell[(i, j)] = w;
                num += w * r * r;
                den += w;
            }
            r_imp[i] = if den > 0.0 { num / den } else { f64::INFINITY };
            case[i] = if r_imp[i].is_finite() { self.case_kernel.weight(r_imp[i] / self.sigma2_star) } else { 0.0 };
            if let Some(psi) = &self.subspace_psi {
                let du = &u - &self.mcd_mu;
                let d2 = (du.transpose() * &self.mcd_precision * &du)[0];
                subspace[i] = if d2 > 0.0 { psi.psi(d2) / d2 } else { 1.0 };
            }
        }
        let filter_out = filter;
        if unit {
            cell = zs.map(|v| if v.is_nan() { 0.0 } else { 1.0 });
            case.iter_mut().for_each(|w| *w = 1.0);
            subspace.iter_mut().for_each(|w| *w = 1.0);
        }

        let floor = n as f64 * self.delta_floor;
        let mut mu = DVector::zeros(d);
        let mut cmu = vec![0.0; d];
        let mut sig = DMatrix::zeros(d, d);
        let mut csig = DMatrix::<f64>::zeros(d, d);
        let mut wz = vec![0.0; d];
        let mut wm = vec![0.0; d];
        for i in 0..n {
            let a = case[i] * subspace[i];
            if a == 0.0 {
                continue;
            }
            for j in 0..d {
                let w = cell[(i, j)];
                wm[j] = w;
                wz[j] = if w > 0.0 { w * (z[(i, j)] - self.mu_z[j]) } else { 0.0 };
                if w > 0.0 {
                    mu[j] += a * w * z[(i, j)];
                    cmu[j] += a * w;
                }
            }
            for j in 0..d {
                if wm[j] == 0.0 {
                    continue;
                }
                for l in 0..=j {
                    sig[(j, l)] += a * wz[j] * wz[l];
                    csig[(j, l)] += a * wm[j] * wm[l];
                }
            }
        }
        for j in 0..d {
            mu[j] /= cmu[j].max(floor);
            for l in 0..=j {
                let v = sig[(j, l)] / csig[(j, l)].max(floor);
                sig[(j, l)] = v;
                sig[(l, j)] = v;
            }
        }
        let (mu_f, sigma_f) = self.standardizer.destandardize_cov(&mu, &sig)?;
        Ok(FastCovEstimate {
            mu_f,
            sigma_f: symmetrize(&sigma_f),
            weights: SampleWeights { filter: filter_out, residual, cell, case, subspace },
            shrink,
            r_imp,
        })
    }

    /// Smallest `C^mu` / `C^Sigma` divisor, after flooring, for a sample.
    pub fn divisor_floor(&self, n: usize) -> f64 {
        n as f64 * self.delta_floor
    }
}
