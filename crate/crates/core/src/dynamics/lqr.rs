//! Continuous-time LQR synthesis via the algebraic Riccati equation.
//!
//! `solve_care` runs a Newton–Kleinman iteration: from a stabilizing gain
//! K₀ it alternates a Lyapunov solve for the cost-to-go with a gain
//! refresh, converging quadratically to the stabilizing solution of
//! AᵀP + PA − PBR⁻¹BᵀP + Q = 0. When no seed is supplied and A is not
//! already Hurwitz, a coarse forward integration of the Riccati ODE
//! produces one.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::math::symmetrize;

const RICCATI_TOL: f64 = 1e-10;
const RICCATI_MAX_ITERS: usize = 200;

/// Stabilizing Riccati solution and the associated feedback gain K = R⁻¹BᵀP.
#[derive(Debug, Clone)]
pub struct CareSolution {
    pub riccati: DMatrix<f64>,
    pub gain: DMatrix<f64>,
}

/// Largest real part among the eigenvalues of `m`.
pub(crate) fn max_real_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|c| c.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Solve AᵀP + PA + W = 0 by Kronecker vectorization. Intended for the
/// small state dimensions used here (n ≤ 6).
fn solve_lyapunov(a: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    let system = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = DVector::from_column_slice((-w).as_slice());
    let sol = system
        .lu()
        .solve(&rhs)
        .ok_or(Error::UnstabilizableLinearization)?;
    let mut p = DMatrix::from_column_slice(n, n, sol.as_slice());
    symmetrize(&mut p);
    Ok(p)
}

/// Coarse forward integration of Ṗ = AᵀP + PA − PBR⁻¹BᵀP + Q until
/// A − BR⁻¹BᵀP is Hurwitz; used only to seed the Newton iteration.
fn burn_in_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r_inv: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let scale = 1.0 + a.abs().max();
    let dt = 0.02 / scale;
    let mut p = q.clone() + DMatrix::identity(n, n) * 1e-6;
    for step in 0..20_000usize {
        let gain_term = &p * b * r_inv * b.transpose() * &p;
        p += (a.transpose() * &p + &p * a - gain_term + q) * dt;
        symmetrize(&mut p);
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::UnstabilizableLinearization);
        }
        if step % 100 == 99 {
            let k = r_inv * b.transpose() * &p;
            if max_real_eigenvalue(&(a - b * &k)) < 0.0 {
                return Ok(k);
            }
        }
    }
    Err(Error::UnstabilizableLinearization)
}

/// Solve the continuous-time algebraic Riccati equation for (A, B, Q, R)
/// and return the stabilizing gain. `seed_gain`, when given, must already
/// stabilize A − BK.
pub fn solve_care(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    seed_gain: Option<&DMatrix<f64>>,
) -> Result<CareSolution> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.nrows() != n || q.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, got: b.nrows() });
    }
    if r.nrows() != m || r.ncols() != m {
        return Err(Error::DimensionMismatch { expected: m, got: r.nrows() });
    }
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidParameter("control weight R is singular".into()))?;

    let mut k = match seed_gain {
        Some(k0) => {
            if max_real_eigenvalue(&(a - b * k0)) >= 0.0 {
                return Err(Error::UnstabilizableLinearization);
            }
            k0.clone()
        }
        None => {
            if max_real_eigenvalue(a) < 0.0 {
                DMatrix::zeros(m, n)
            } else {
                burn_in_gain(a, b, q, &r_inv)?
            }
        }
    };

    let mut p_prev: Option<DMatrix<f64>> = None;
    for _ in 0..RICCATI_MAX_ITERS {
        let acl = a - b * &k;
        let w = q + k.transpose() * r * &k;
        let p = solve_lyapunov(&acl, &w)?;
        k = &r_inv * b.transpose() * &p;
        if let Some(prev) = &p_prev {
            if (&p - prev).abs().max() < RICCATI_TOL {
                if max_real_eigenvalue(&(a - b * &k)) >= 0.0 {
                    return Err(Error::UnstabilizableLinearization);
                }
                return Ok(CareSolution { riccati: p, gain: k });
            }
        }
        p_prev = Some(p);
    }
    Err(Error::UnstabilizableLinearization)
}
