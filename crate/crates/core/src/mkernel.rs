//! Hyperbolic-tangent ρ/ψ/weight functions, the redescending χ function and
//! the univariate M-scale built on it.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hampel's hyperbolic-tangent ρ-function.
///
/// Quadratic on `[-b, b]`, a log-cosh transition on `b <= |z| <= c`, and
/// constant beyond `c`. Its derivative ψ is linear in the center, so inlying
/// values keep weight exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TanhRho {
    pub b: f64,
    pub c: f64,
    pub q1: f64,
    pub q2: f64,
    pub d_const: f64,
}

impl TanhRho {
    /// Published two-decimal value of `q1` for `b = 1.5, c = 4`.
    pub const PUBLISHED_Q1: f64 = 1.54;
    /// Published two-decimal value of `q2` for `b = 1.5, c = 4`.
    pub const PUBLISHED_Q2: f64 = 0.86;

    /// Build the function for edges `b < c` and inner slope `q2`. `q1` is
    /// recomputed from the continuity of ψ at `b`, i.e.
    /// `q1 * tanh(q2 * (c - b)) = b`.
    pub fn new(b: f64, c: f64, q2: f64) -> Result<Self> {
        if !(b > 0.0 && c > b && q2 > 0.0) || !(b.is_finite() && c.is_finite() && q2.is_finite())
        {
            return Err(Error::InvalidConfig(format!(
                "tanh rho needs 0 < b < c and q2 > 0 (got b={b}, c={c}, q2={q2})"
            )));
        }
        let q1 = b / (q2 * (c - b)).tanh();
        let d_const = 0.5 * b * b + (q1 / q2) * (q2 * (c - b)).cosh().ln();
        Ok(Self { b, c, q1, q2, d_const })
    }

    pub fn rho(&self, z: f64) -> f64 {
        let a = z.abs();
        if a <= self.b {
            0.5 * z * z
        } else if a <= self.c {
            self.d_const - (self.q1 / self.q2) * (self.q2 * (self.c - a)).cosh().ln()
        } else {
            self.d_const
        }
    }

    pub fn psi(&self, z: f64) -> f64 {
        let a = z.abs();
        if a <= self.b {
            z
        } else if a <= self.c {
            self.q1 * (self.q2 * (self.c - a)).tanh() * z.signum()
        } else {
            0.0
        }
    }

    /// ψ(z)/z with the convention weight(0) = 1.
    pub fn weight(&self, z: f64) -> f64 {
        let a = z.abs();
        if a <= self.b {
            1.0
        } else if a <= self.c {
            self.q1 * (self.q2 * (self.c - a)).tanh() / a
        } else {
            0.0
        }
    }
}

impl Default for TanhRho {
    fn default() -> Self {
        Self::new(1.5, 4.0, Self::PUBLISHED_Q2).expect("default constants are valid")
    }
}

/// Loss kernel used by the cellwise and casewise parts of the estimators.
///
/// `Quadratic` is ρ(z) = z², which turns the robust PCA loss into the classical
/// one. It is only meant for checking that reduction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Kernel {
    Tanh(TanhRho),
    Quadratic,
}

impl Default for Kernel {
    fn default() -> Self {
        Kernel::Tanh(TanhRho::default())
    }
}

impl Kernel {
    pub fn rho(&self, z: f64) -> f64 {
        match self {
            Kernel::Tanh(t) => t.rho(z),
            Kernel::Quadratic => z * z,
        }
    }

    pub fn psi(&self, z: f64) -> f64 {
        match self {
            Kernel::Tanh(t) => t.psi(z),
            Kernel::Quadratic => 2.0 * z,
        }
    }

    pub fn weight(&self, z: f64) -> f64 {
        match self {
            Kernel::Tanh(t) => t.weight(z),
            Kernel::Quadratic => 2.0,
        }
    }

    pub fn is_robust(&self) -> bool {
        matches!(self, Kernel::Tanh(_))
    }
}

/// Redescending χ-function of the M-scale.
///
/// `x² - 1 + a` on `|x| <= b`, then
/// `sqrt(A(k-1)) tanh(½ sqrt((k-1)B²/A) (log c - log|x|))` up to `c`, and 0
/// beyond. The constant `a` makes χ continuous at `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TanhChi {
    pub b: f64,
    pub c: f64,
    pub a_const: f64,
    pub a_coef: f64,
    pub b_coef: f64,
    pub k: f64,
    amp: f64,
    rate: f64,
}

impl TanhChi {
    /// χ from explicit `(A, B, k)`.
    pub fn with_coefficients(b: f64, c: f64, a_coef: f64, b_coef: f64, k: f64) -> Result<Self> {
        if !(b > 0.0 && c > b && a_coef > 0.0 && b_coef > 0.0 && k > 1.0) {
            return Err(Error::InvalidConfig(format!(
                "invalid chi constants b={b} c={c} A={a_coef} B={b_coef} k={k}"
            )));
        }
        let amp = (a_coef * (k - 1.0)).sqrt();
        let rate = 0.5 * ((k - 1.0) * b_coef * b_coef / a_coef).sqrt();
        let a_const = amp * (rate * (c / b).ln()).tanh() - (b * b - 1.0);
        Ok(Self { b, c, a_const, a_coef, b_coef, k, amp, rate })
    }

    /// Solve the V-robust fixed point for `(A, B, k)` at the standard normal:
    /// `E χ(Z) = 0`, `A = E χ(Z)²` and `B = E[Z χ'(Z)]`, with `a` tied to the
    /// continuity condition at `b`.
    pub fn v_robust(b: f64, c: f64) -> Result<Self> {
        let residual = |v: [f64; 3]| -> Option<[f64; 3]> {
            let (a_coef, b_coef, k) = (v[0].exp(), v[1].exp(), 1.0 + v[2].exp());
            let chi = Self::with_coefficients(b, c, a_coef, b_coef, k).ok()?;
            let m0 = chi.normal_expectation(|x| chi.chi(x));
            let m1 = chi.normal_expectation(|x| chi.chi(x).powi(2));
            let m2 = chi.normal_expectation(|x| x * chi.chi_derivative(x));
            Some([m0, m1 - a_coef, m2 - b_coef])
        };
        let norm = |r: &[f64; 3]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut v = [0.0, 0.0, 1.0];
        let mut r = residual(v).ok_or_else(|| Error::InvalidConfig("chi start".into()))?;
        for _ in 0..100 {
            if norm(&r) < 1e-13 {
                break;
            }
            let h = 1e-7;
            let mut jac = nalgebra::Matrix3::<f64>::zeros();
            for col in 0..3 {
                let mut vp = v;
                vp[col] += h;
                let rp = residual(vp).ok_or_else(|| Error::InvalidConfig("chi jacobian".into()))?;
                for row in 0..3 {
                    jac[(row, col)] = (rp[row] - r[row]) / h;
                }
            }
            let rhs = nalgebra::Vector3::new(-r[0], -r[1], -r[2]);
            let step = jac
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::InvalidConfig("chi constants: singular jacobian".into()))?;
            let mut t = 1.0;
            loop {
                let cand = [v[0] + t * step[0], v[1] + t * step[1], v[2] + t * step[2]];
                if let Some(rc) = residual(cand) {
                    if norm(&rc) < norm(&r) || t < 1e-6 {
                        v = cand;
                        r = rc;
                        break;
                    }
                }
                t *= 0.5;
                if t < 1e-8 {
                    return Err(Error::InvalidConfig("chi constants did not converge".into()));
                }
            }
        }
        if norm(&r) > 1e-9 {
            return Err(Error::InvalidConfig("chi constants did not converge".into()));
        }
        Self::with_coefficients(b, c, v[0].exp(), v[1].exp(), 1.0 + v[2].exp())
    }

    pub fn chi(&self, x: f64) -> f64 {
        let a = x.abs();
        if a <= self.b {
            x * x - 1.0 + self.a_const
        } else if a < self.c {
            self.amp * (self.rate * (self.c.ln() - a.ln())).tanh()
        } else {
            0.0
        }
    }

    fn chi_derivative(&self, x: f64) -> f64 {
        let a = x.abs();
        let s = x.signum();
        if a <= self.b {
            2.0 * x
        } else if a < self.c {
            let u = self.rate * (self.c.ln() - a.ln());
            -s * self.amp * self.rate / (u.cosh().powi(2) * a)
        } else {
            0.0
        }
    }

    /// Positive root of χ inside `(0, b]`.
    pub fn inner_root(&self) -> f64 {
        (1.0 - self.a_const).sqrt()
    }

    /// `E f(Z)` for standard normal `Z` and even `f`, by composite Simpson on
    /// the smooth pieces `[0,b]`, `[b,c]`, `[c,12]`.
    fn normal_expectation<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        let simpson = |lo: f64, hi: f64, n: usize| {
            let h = (hi - lo) / n as f64;
            let g = |x: f64| f(x) * crate::linalg::normal_pdf(x);
            // endpoints nudged inside so one-sided limits are used at the kinks
            let mut s = g(lo + 1e-13 * (hi - lo)) + g(hi - 1e-13 * (hi - lo));
            for i in 1..n {
                let x = lo + i as f64 * h;
                s += if i % 2 == 1 { 4.0 * g(x) } else { 2.0 * g(x) };
            }
            s * h / 3.0
        };
        2.0 * (simpson(0.0, self.b, 2000) + simpson(self.b, self.c, 4000) + simpson(self.c, 12.0, 2000))
    }
}

impl Default for TanhChi {
    fn default() -> Self {
        *default_chi()
    }
}

fn default_chi() -> &'static TanhChi {
    static CHI: OnceLock<TanhChi> = OnceLock::new();
    CHI.get_or_init(|| TanhChi::v_robust(1.5, 4.0).expect("default chi constants solve"))
}

/// Result of an M-scale computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MScale {
    pub scale: f64,
    /// Set when no positive root exists (e.g. more than half of the values are zero).
    pub degenerate: bool,
}

/// M-scale of an (already centered) sample with the default χ.
pub fn mscale(values: &[f64]) -> Result<MScale> {
    mscale_with(default_chi(), values)
}

/// M-scale with an explicit χ. The values are not centered.
pub fn mscale_with(chi: &TanhChi, values: &[f64]) -> Result<MScale> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let degenerate = MScale { scale: 0.0, degenerate: true };
    let n = values.len();
    let zeros = values.iter().filter(|v| **v == 0.0).count();
    if 2 * zeros > n {
        return Ok(degenerate);
    }
    let max_abs = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let objective = |sigma: f64| values.iter().map(|v| chi.chi(v / sigma)).sum::<f64>() / n as f64;

    // Walk down from a scale where every standardized value sits near zero
    // (objective negative) until the objective turns positive: the outermost
    // sign change lies in between.
    let floor = f64::EPSILON * max_abs;
    let mut hi = 10.0 * max_abs;
    let mut f_hi = objective(hi);
    let (mut lo, mut f_lo);
    loop {
        let next = hi / 1.5;
        if next < floor {
            return Ok(degenerate);
        }
        let f_next = objective(next);
        if f_next > 0.0 {
            lo = next;
            f_lo = f_next;
            break;
        }
        if f_next == 0.0 {
            return Ok(MScale { scale: next, degenerate: false });
        }
        hi = next;
        f_hi = f_next;
    }

    // Illinois regula falsi on [lo, hi] with f(lo) > 0 > f(hi).
    let mut side = 0i8;
    for _ in 0..300 {
        if hi - lo <= 1e-15 * hi {
            break;
        }
        let mut x = (lo * f_hi - hi * f_lo) / (f_hi - f_lo);
        if !(x > lo && x < hi) {
            x = 0.5 * (lo + hi);
        }
        let fx = objective(x);
        if fx == 0.0 {
            return Ok(MScale { scale: x, degenerate: false });
        }
        if fx > 0.0 {
            lo = x;
            f_lo = fx;
            if side == 1 {
                f_hi *= 0.5;
            }
            side = 1;
        } else {
            hi = x;
            f_hi = fx;
            if side == -1 {
                f_lo *= 0.5;
            }
            side = -1;
        }
    }
    let (flo, fhi) = (objective(lo), objective(hi));
    let scale = if flo.abs() <= fhi.abs() { lo } else { hi };
    Ok(MScale { scale, degenerate: false })
}
