//! Log-domain arithmetic, angle normalization and factorization helpers
//! shared by the filters and the detection statistics.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// ln(2π).
pub const LN_2PI: f64 = 1.8378770664093453;

/// Additive diagonal jitter ladder tried when a covariance factorization
/// fails; the variational loop can transiently deflate a covariance.
const JITTER_LADDER: [f64; 4] = [0.0, 1e-12, 1e-9, 1e-6];

/// log(exp(a) + exp(b)) without overflow.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// log Σᵢ exp(xᵢ). An empty slice yields −∞.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == f64::NEG_INFINITY || !hi.is_finite() {
        return hi;
    }
    hi + xs.iter().map(|x| (x - hi).exp()).sum::<f64>().ln()
}

/// exp(x) / (1 + exp(x)) evaluated stably on the whole real line
/// (−∞ ↦ 0, +∞ ↦ 1).
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Wrap an angle to (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r - two_pi
    } else {
        r
    }
}

/// Derive an independent per-realization seed from a master seed
/// (splitmix64 finalizer).
pub fn mix_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// P ← (P + Pᵀ)/2 in place.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Cholesky factorization of a nearly-PSD matrix. The input is symmetrized
/// first; on failure the jitter ladder is applied to the diagonal before
/// giving up.
pub fn robust_cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    for &jitter in &JITTER_LADDER {
        let mut attempt = sym.clone();
        if jitter > 0.0 {
            for i in 0..attempt.nrows() {
                attempt[(i, i)] += jitter;
            }
        }
        if let Some(chol) = Cholesky::new(attempt) {
            return Ok(chol);
        }
    }
    Err(Error::CovarianceFactorization)
}

/// log N(x; mean, cov) with a dense covariance.
pub fn gaussian_log_pdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol = robust_cholesky(cov)?;
    let diff = x - mean;
    let maha = diff.dot(&chol.solve(&diff));
    let l = chol.l();
    let log_det: f64 = (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
    Ok(-0.5 * (x.len() as f64 * LN_2PI + log_det + maha))
}

/// log N(x; mean, var) in one dimension.
pub fn gaussian_log_pdf_1d(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}
