//! Zero-order-hold discretization of continuous `(A, B)`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::ssm::scan::{step_coeffs, InputDiscretization};

/// Below this Frobenius norm of `ΔA` the input matrix uses the series form.
pub const SERIES_THRESHOLD: f64 = 1e-4;

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Matrix exponential by degree-13 Padé approximation with scaling and squaring.
pub fn expm(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let norm = one_norm(m);
    let squarings = if norm > THETA13 { (norm / THETA13).log2().ceil() as i32 } else { 0 };
    let a = m / 2f64.powi(squarings);
    let id = DMatrix::<f64>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = PADE13;
    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]) + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &id * b[1];
    let u = &a * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]) + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &id * b[0];
    let mut r = (&v - &u)
        .lu()
        .solve(&(&v + &u))
        .ok_or_else(|| Error::numeric("expm", "Padé denominator is singular"))?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    Ok(r)
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `Ā = exp(ΔA)`, `B̄ = (ΔA)⁻¹(exp(ΔA) − I)·ΔB`.
///
/// Falls back to the series `Σ (ΔA)^k / (k+1)! · ΔB` when `‖ΔA‖ < 1e-4`.
pub fn discretize_zoh(a: &DMatrix<f64>, b: &DMatrix<f64>, delta: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::contract(format!("discretize_zoh: delta must be positive, got {delta}")));
    }
    let n = a.nrows();
    if a.ncols() != n || n == 0 {
        return Err(Error::shape("discretize_zoh", format!("A must be square, got {}x{}", a.nrows(), a.ncols())));
    }
    if b.nrows() != n {
        return Err(Error::shape("discretize_zoh", format!("B has {} rows, A is {n}x{n}", b.nrows())));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::numeric("discretize_zoh", "non-finite A or B"));
    }
    let m = a * delta;
    let db = b * delta;
    let id = DMatrix::<f64>::identity(n, n);
    if m.norm() < SERIES_THRESHOLD {
        let m2 = &m * &m;
        let m3 = &m2 * &m;
        let a_bar = &id + &m + &m2 / 2.0 + &m3 / 6.0 + (&m3 * &m) / 24.0;
        let phi = &id + &m / 2.0 + &m2 / 6.0 + &m3 / 24.0;
        return Ok((a_bar, phi * db));
    }
    let a_bar = expm(&m)?;
    let rhs = (&a_bar - &id) * db;
    let b_bar = m.clone().lu().solve(&rhs).ok_or_else(|| {
        Error::numeric(
            "discretize_zoh",
            format!("ΔA is singular (condition number {:.3e}); cannot form (ΔA)⁻¹", condition_number(&m)),
        )
    })?;
    Ok((a_bar, b_bar))
}

/// Scalar closed form for one diagonal entry: `(exp(Δa), (exp(Δa) − 1)/a · b)`.
pub fn discretize_diagonal(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0) {
        return Err(Error::contract(format!("discretize_diagonal: delta must be positive, got {delta}")));
    }
    if a == 0.0 {
        return Ok((1.0, delta * b));
    }
    let (abar, coef) = step_coeffs(delta, a, InputDiscretization::ExactZoh);
    Ok((abar, coef * b))
}
