//! Literal sequential recurrences used as oracles for the fused scan.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::ssm::discretize::discretize_zoh;
use crate::ssm::scan::{InputDiscretization, ScanInputs};
use crate::tensor::Real;

/// Time-invariant single-input single-output system `h' = A h + B x`, `y = C h + D x`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSsm {
    /// `N × N`
    pub a: DMatrix<f64>,
    /// `N × 1`
    pub b: DMatrix<f64>,
    /// `1 × N`
    pub c: DMatrix<f64>,
    pub d: f64,
}

impl DenseSsm {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: f64) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || (b.nrows(), b.ncols()) != (n, 1) || (c.nrows(), c.ncols()) != (1, n) {
            return Err(Error::shape(
                "dense_ssm",
                format!(
                    "expected A {n}x{n}, B {n}x1, C 1x{n}; got A {}x{}, B {}x{}, C {}x{}",
                    a.nrows(),
                    a.ncols(),
                    b.nrows(),
                    b.ncols(),
                    c.nrows(),
                    c.ncols()
                ),
            ));
        }
        Ok(DenseSsm { a, b, c, d })
    }

    pub fn state_size(&self) -> usize {
        self.a.nrows()
    }
}

/// Discretizes with step `delta` and runs `h_t = Ā h_{t−1} + B̄ x_t`, `y_t = C h_t + D x_t` from `h_0 = 0`.
pub fn lti_apply_dense(params: &DenseSsm, x: &[f64], delta: f64) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::contract("lti_apply_dense: input sequence must be non-empty"));
    }
    let (a_bar, b_bar) = discretize_zoh(&params.a, &params.b, delta)?;
    let mut h = DMatrix::<f64>::zeros(params.state_size(), 1);
    let mut y = Vec::with_capacity(x.len());
    for &xt in x {
        h = &a_bar * &h + &b_bar * xt;
        y.push((&params.c * &h)[(0, 0)] + params.d * xt);
    }
    Ok(y)
}

/// Hidden state of a diagonal selective recurrence: `h[channel][state]` after `t` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanState<T> {
    pub h: Vec<Vec<T>>,
    pub t: usize,
}

impl<T: Real> ScanState<T> {
    pub fn zeros(channels: usize, state: usize) -> Self {
        ScanState { h: vec![vec![T::zero(); state]; channels], t: 0 }
    }
}

/// The unoptimized step-by-step selective recurrence, one channel at a time.
///
/// Each step forms the discretized `Ā` and `B̄` explicitly per channel.
pub fn naive_selective_recurrence<T: Real>(inp: &ScanInputs<T>, mode: InputDiscretization) -> Result<Vec<T>> {
    inp.validate()?;
    let (l, dch, n) = (inp.len, inp.channels, inp.state);
    let mut state = ScanState::<T>::zeros(dch, n);
    let mut y = vec![T::zero(); l * dch];
    for t in 0..l {
        for d in 0..dch {
            let dt = inp.delta[t * dch + d];
            let ut = inp.u[t * dch + d];
            let a_bar: Vec<T> = (0..n).map(|k| (dt * inp.a[d * n + k]).exp()).collect();
            let b_bar: Vec<T> = (0..n)
                .map(|k| {
                    let bk = inp.b[t * n + k];
                    match mode {
                        InputDiscretization::ExactZoh => {
                            let da = dt * inp.a[d * n + k];
                            (T::one() / da) * ((da).exp() - T::one()) * dt * bk
                        }
                        InputDiscretization::Simplified => dt * bk,
                    }
                })
                .collect();
            let h = &mut state.h[d];
            for k in 0..n {
                h[k] = a_bar[k] * h[k] + b_bar[k] * ut;
            }
            let mut out = inp.d[d] * ut;
            for k in 0..n {
                out += inp.c[t * n + k] * h[k];
            }
            y[t * dch + d] = out;
        }
        state.t += 1;
    }
    Ok(y)
}
