//! Finite-sample influence curves: the change of a scalar of the fit when a
//! small fraction of rows (casewise) or cells (cellwise) is moved to a point,
//! divided by that fraction.

use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cellcov::{cellcov_from, pca_start, CovOptions};
use crate::data::DataMatrix;
use crate::error::{Error, Result};
use crate::regression::{classical_fit, plugin};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContaminationKind {
    Casewise,
    Cellwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContaminationSpec {
    pub kind: ContaminationKind,
    pub c_point: Vec<f64>,
    pub epsilon: f64,
    pub seed: u64,
    /// Contamination draws averaged per point.
    pub draws: usize,
}

impl ContaminationSpec {
    pub fn new(kind: ContaminationKind, c_point: Vec<f64>, epsilon: f64, seed: u64) -> Self {
        Self { kind, c_point, epsilon, seed, draws: 5 }
    }

    fn validate(&self, d: usize) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 0.1) {
            return Err(Error::InvalidConfig(format!("epsilon {} outside (0, 0.1]", self.epsilon)));
        }
        if self.draws == 0 {
            return Err(Error::InvalidConfig("need at least one contamination draw".into()));
        }
        if self.c_point.len() != d {
            return Err(Error::DimensionMismatch(format!("contamination point has {} entries, data has {d}", self.c_point.len())));
        }
        if self.c_point.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(())
    }
}

/// Scalar summary of a fit on a data set.
pub type Functional<'a> = dyn Fn(&DataMatrix) -> Result<f64> + Sync + 'a;

/// Data set `t` of the contamination scheme. Which rows or cells are hit
/// depends only on `(seed, t)`, never on the contamination point, so curves
/// over a grid of points share their draws.
pub fn contaminate(base: &DataMatrix, spec: &ContaminationSpec, t: usize) -> Result<DataMatrix> {
    let (n, d) = (base.nrows(), base.ncols());
    spec.validate(d)?;
    let mut values = base.values().clone();
    let mut mask = base.mask().clone();
    let mut rng = stream(spec.seed, "influence-draws", &[t as u64]);
    match spec.kind {
        ContaminationKind::Casewise => {
            let count = ((spec.epsilon * n as f64) - 1e-9).ceil().max(1.0) as usize;
            let mut rows: Vec<usize> = (0..n).collect();
            rows.shuffle(&mut rng);
            for &i in &rows[..count.min(n)] {
                for j in 0..d {
                    values[(i, j)] = spec.c_point[j];
                    mask[(i, j)] = true;
                }
            }
        }
        ContaminationKind::Cellwise => {
            for i in 0..n {
                for j in 0..d {
                    if rng.random::<f64>() < spec.epsilon {
                        values[(i, j)] = spec.c_point[j];
                        mask[(i, j)] = true;
                    }
                }
            }
        }
    }
    DataMatrix::new(values, mask, Some(base.names().to_vec()))
}

/// `(T(contaminated) - T(base)) / epsilon`, averaged over the draws.
pub fn empirical_if(base: &DataMatrix, functional: &Functional<'_>, spec: &ContaminationSpec) -> Result<f64> {
    let t0 = functional(base)?;
    empirical_if_from(base, t0, functional, spec)
}

fn empirical_if_from(base: &DataMatrix, t0: f64, functional: &Functional<'_>, spec: &ContaminationSpec) -> Result<f64> {
    let mut total = 0.0;
    for t in 0..spec.draws {
        total += (functional(&contaminate(base, spec, t)?)? - t0) / spec.epsilon;
    }
    Ok(total / spec.draws as f64)
}

/// One grid point of an influence surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SurfacePoint {
    pub c1: f64,
    pub c2: f64,
    pub value: f64,
}

/// Influence over the product grid `axis x axis` of a bivariate data set.
pub fn if_surface(
    base: &DataMatrix,
    functional: &Functional<'_>,
    kind: ContaminationKind,
    axis: &[f64],
    epsilon: f64,
    draws: usize,
    seed: u64,
) -> Result<Vec<SurfacePoint>> {
    if base.ncols() != 2 {
        return Err(Error::DimensionMismatch("influence surfaces need two columns".into()));
    }
    let t0 = functional(base)?;
    let points: Vec<(f64, f64)> = axis.iter().flat_map(|&a| axis.iter().map(move |&b| (a, b))).collect();
    points
        .par_iter()
        .map(|&(c1, c2)| {
            let spec = ContaminationSpec { kind, c_point: vec![c1, c2], epsilon, seed, draws };
            Ok(SurfacePoint { c1, c2, value: empirical_if_from(base, t0, functional, &spec)? })
        })
        .collect()
}

/// `[-10, 10]` in steps of one.
pub fn default_axis() -> Vec<f64> {
    (-10..=10).map(f64::from).collect()
}

/// Slope `(row, col)` of the cellMR plug-in with `p` predictors. Every
/// evaluation starts cellPCA from the start computed on `base`, so the
/// functional does not jump between starts as the data are perturbed.
pub fn cellmr_slope(
    base: &DataMatrix,
    p: usize,
    k: usize,
    lambda: f64,
    row: usize,
    col: usize,
    opts: CovOptions,
) -> Result<impl Fn(&DataMatrix) -> Result<f64> + Sync> {
    let start = pca_start(base, k, &opts)?;
    Ok(move |data: &DataMatrix| {
        let fit = cellcov_from(data, k, &opts, Some(&start))?;
        Ok(plugin(&fit.estimate.mu, &fit.estimate.sigma, lambda, p)?.slopes[(row, col)])
    })
}

/// Slope `(row, col)` of least squares on the complete rows.
pub fn ols_slope(p: usize, row: usize, col: usize) -> impl Fn(&DataMatrix) -> Result<f64> + Sync {
    move |data: &DataMatrix| Ok(classical_fit(data, p, 0.0)?.slopes[(row, col)])
}

/// `n` draws of `x ~ N(0, 1)`, `y = 0.9 x + e`, `e ~ N(0, 0.19)`.
pub fn bivariate_sample(n: usize, seed: u64) -> Result<DataMatrix> {
    let mut rng = stream(seed, "bivariate", &[]);
    let z = DMatrix::from_fn(n, 2, |_, _| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v
    });
    let mut out = DMatrix::zeros(n, 2);
    for i in 0..n {
        out[(i, 0)] = z[(i, 0)];
        out[(i, 1)] = 0.9 * z[(i, 0)] + 0.19f64.sqrt() * z[(i, 1)];
    }
    DataMatrix::new(out, DMatrix::from_element(n, 2, true), Some(vec!["x".into(), "y".into()]))
}

/// `c1,c2,if_value`.
pub fn write_surface<W: Write>(writer: W, surface: &[SurfacePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["c1", "c2", "if_value"])?;
    for s in surface {
        w.write_record([s.c1.to_string(), s.c2.to_string(), s.value.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
