//! Small dense linear-algebra and order-statistics helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// decreasing order. Eigenvector signs are normalized so that the entry of
/// largest magnitude in each column is positive.
pub fn sym_eigen_sorted(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let sym = symmetrize(m);
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        normalize_sign(&mut col);
        vectors.set_column(dst, &col);
    }
    (values, vectors)
}

pub fn normalize_sign(col: &mut DVector<f64>) {
    let mut best = 0usize;
    for i in 0..col.len() {
        if col[i].abs() > col[best].abs() + 1e-12 {
            best = i;
        }
    }
    if col.len() > 0 && col[best] < 0.0 {
        col.neg_mut();
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Ratio of the largest to the smallest eigenvalue (infinite when the
/// smallest is not positive).
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let (vals, _) = sym_eigen_sorted(m);
    let hi = vals[0];
    let lo = vals[vals.len() - 1];
    if lo <= 0.0 || !lo.is_finite() {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Clip negative eigenvalues of a symmetric matrix to zero. Returns the
/// repaired matrix and the magnitude of the most negative eigenvalue.
pub fn clip_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = symmetrize(m);
    let (vals, vecs) = sym_eigen_sorted(&sym);
    let worst = vals.iter().cloned().fold(0.0_f64, f64::min);
    if worst >= 0.0 {
        return (sym, 0.0);
    }
    let clipped = DVector::from_iterator(vals.len(), vals.iter().map(|v| v.max(0.0)));
    let out = &vecs * DMatrix::from_diagonal(&clipped) * vecs.transpose();
    (symmetrize(&out), -worst)
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = symmetrize(m).cholesky().ok_or(Error::SingularCovariance)?;
    Ok(chol.inverse())
}

/// Solve `a x = b` for a small symmetric system, adding `ridge * I` first.
/// Falls back to an eigen-based pseudo-inverse when Cholesky fails.
pub fn solve_sym(a: &DMatrix<f64>, b: &DVector<f64>, ridge: f64) -> DVector<f64> {
    let mut m = a.clone();
    if ridge > 0.0 {
        for i in 0..m.nrows() {
            m[(i, i)] += ridge;
        }
    }
    if let Some(ch) = m.clone().cholesky() {
        return ch.solve(b);
    }
    let (vals, vecs) = sym_eigen_sorted(&m);
    let tol = vals[0].abs().max(1e-300) * 1e-12;
    let mut out = DVector::zeros(b.len());
    for i in 0..vals.len() {
        if vals[i].abs() > tol {
            let v = vecs.column(i);
            out += v * (v.dot(b) / vals[i]);
        }
    }
    out
}

pub fn log_det_spd(m: &DMatrix<f64>) -> Option<f64> {
    let ch = symmetrize(m).cholesky()?;
    let l = ch.l();
    let mut s = 0.0;
    for i in 0..l.nrows() {
        s += 2.0 * l[(i, i)].ln();
    }
    Some(s)
}

/// Median of a slice (average of the two middle values for even length).
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    let n = v.len();
    let cmp = |a: &f64, b: &f64| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal);
    let (below, &mut upper, _) = v.select_nth_unstable_by(n / 2, cmp);
    if n % 2 == 1 {
        upper
    } else {
        let lower = below.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Normalized median absolute deviation around the median.
pub fn mad(values: &[f64]) -> f64 {
    let m = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    1.482_602_218_505_602 * median(&dev)
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], prob: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = prob.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    v[lo] + frac * (v[hi] - v[lo])
}

pub fn chi2_quantile(df: usize, prob: f64) -> f64 {
    if prob >= 1.0 {
        return f64::INFINITY;
    }
    let dist = ChiSquared::new(df as f64).expect("positive degrees of freedom");
    let mut x = dist.inverse_cdf(prob);
    // polish the library inverse with Newton steps on the CDF
    for _ in 0..3 {
        let f = dist.pdf(x);
        if !(f > 0.0) || !x.is_finite() {
            break;
        }
        let next = x - (dist.cdf(x) - prob) / f;
        if !(next > 0.0) {
            break;
        }
        x = next;
    }
    x
}

pub fn chi2_cdf(df: usize, x: f64) -> f64 {
    if x.is_infinite() {
        return 1.0;
    }
    ChiSquared::new(df as f64)
        .expect("positive degrees of freedom")
        .cdf(x)
}

pub fn normal_quantile(prob: f64) -> f64 {
    Normal::standard().inverse_cdf(prob)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}
