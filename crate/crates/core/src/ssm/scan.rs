//! Input-dependent (selective) diagonal scan and its reverse-time adjoint.
//!
//! For every channel `d` and state index `n`:
//!
//! ```text
//! h[t] = exp(Δ[t,d]·A[d,n]) · h[t-1] + B̄(Δ[t,d], A[d,n]) · B[t,n] · u[t,d]
//! y[t,d] = Σ_n C[t,n] · h[t] + D[d] · u[t,d]
//! ```
//!
//! The input may be a concatenation of independent sequences ("segments");
//! the state resets to zero at each segment boundary.

use crate::error::{Error, Result};
use crate::tensor::Real;

/// How the input matrix is discretized for each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InputDiscretization {
    /// Exact zero-order hold: `B̄ = (exp(ΔA) − 1) / A · B`.
    #[default]
    ExactZoh,
    /// First-order form used by most selective-scan kernels: `B̄ = Δ · B`.
    Simplified,
}

impl InputDiscretization {
    pub fn name(self) -> &'static str {
        match self {
            InputDiscretization::ExactZoh => "exact",
            InputDiscretization::Simplified => "simplified",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "exact" | "zoh" => Some(InputDiscretization::ExactZoh),
            "simplified" | "euler" => Some(InputDiscretization::Simplified),
            _ => None,
        }
    }
}

/// Borrowed operands of a scan over `len` steps, `channels` inner channels and `state` states.
#[derive(Debug, Clone, Copy)]
pub struct ScanInputs<'a, T: Real> {
    /// `[len, channels]`
    pub u: &'a [T],
    /// `[len, channels]`, strictly positive
    pub delta: &'a [T],
    /// `[channels, state]`, strictly negative
    pub a: &'a [T],
    /// `[len, state]`
    pub b: &'a [T],
    /// `[len, state]`
    pub c: &'a [T],
    /// `[channels]`
    pub d: &'a [T],
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

/// Gradients of a scan with respect to each operand.
#[derive(Debug, Clone)]
pub struct ScanGrads<T> {
    pub u: Vec<T>,
    pub delta: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d: Vec<T>,
}

impl<'a, T: Real> ScanInputs<'a, T> {
    /// Infers `len`, `channels` and `state` from the operand lengths.
    pub fn new(u: &'a [T], delta: &'a [T], a: &'a [T], b: &'a [T], c: &'a [T], d: &'a [T]) -> Result<Self> {
        let channels = d.len();
        if channels == 0 || !u.len().is_multiple_of(channels) {
            return Err(Error::shape("selective_scan", format!("u has {} values for {channels} channels", u.len())));
        }
        let len = u.len() / channels;
        let state = if channels == 0 { 0 } else { a.len() / channels };
        let s = ScanInputs { u, delta, a, b, c, d, len, channels, state };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let (l, dch, n) = (self.len, self.channels, self.state);
        let checks = [
            ("u", self.u.len(), l * dch),
            ("delta", self.delta.len(), l * dch),
            ("A", self.a.len(), dch * n),
            ("B", self.b.len(), l * n),
            ("C", self.c.len(), l * n),
            ("D", self.d.len(), dch),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::shape(
                    "selective_scan",
                    format!("{name} has {got} values, expected {want} for L={l}, D={dch}, N={n}"),
                ));
            }
        }
        if l == 0 || n == 0 {
            return Err(Error::shape("selective_scan", "sequence length and state size must be positive"));
        }
        for slice in [self.u, self.delta, self.a, self.b, self.c, self.d] {
            if slice.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("selective_scan", "non-finite operand"));
            }
        }
        if let Some(i) = self.delta.iter().position(|&v| v <= T::zero()) {
            return Err(Error::contract(format!("selective_scan: delta[{i}] = {} is not positive", self.delta[i])));
        }
        if let Some(i) = self.a.iter().position(|&v| v >= T::zero()) {
            return Err(Error::contract(format!("selective_scan: A[{i}] = {} is not negative", self.a[i])));
        }
        Ok(())
    }
}

/// `(Ā, B̄/B)` for one scalar step.
#[inline]
pub(crate) fn step_coeffs<T: Real>(dt: T, a: T, mode: InputDiscretization) -> (T, T) {
    let x = dt * a;
    let (abar, em1) = x.exp_pair();
    let bcoef = match mode {
        InputDiscretization::Simplified => dt,
        InputDiscretization::ExactZoh => {
            if x.abs() < T::c(1e-4) {
                dt * (T::one() + x * (T::c(0.5) + x / T::c(6.0)))
            } else {
                em1 / a
            }
        }
    };
    (abar, bcoef)
}

/// `(x·eˣ − eˣ + 1) / x²`, the scaled derivative of the exact B̄ with respect to A.
#[cfg(test)]
fn zoh_a_sensitivity<T: Real>(x: T) -> T {
    zoh_a_sensitivity_from(x, x.exp())
}

/// Same as [`zoh_a_sensitivity`] reusing `abar = exp(x)`.
#[inline]
fn zoh_a_sensitivity_from<T: Real>(x: T, abar: T) -> T {
    if x.abs() < T::c(0.1) {
        // (k + 1) / (k + 2)!
        const COEFFS: [f64; 10] = [
            1.0 / 2.0,
            1.0 / 3.0,
            1.0 / 8.0,
            1.0 / 30.0,
            1.0 / 144.0,
            1.0 / 840.0,
            1.0 / 5760.0,
            1.0 / 45360.0,
            1.0 / 403200.0,
            1.0 / 3991680.0,
        ];
        COEFFS.iter().rev().fold(T::zero(), |acc, &k| acc * x + T::c(k))
    } else {
        (x * abar - (abar - T::one())) / (x * x)
    }
}

fn check_segments(segments: &[usize], len: usize) -> Result<()> {
    let total: usize = segments.iter().sum();
    if total != len || segments.contains(&0) {
        return Err(Error::shape(
            "selective_scan",
            format!("segments {segments:?} do not tile a sequence of length {len}"),
        ));
    }
    Ok(())
}

/// Runs the scan over one sequence.
pub fn selective_scan<T: Real>(inp: &ScanInputs<T>, mode: InputDiscretization) -> Result<Vec<T>> {
    inp.validate()?;
    Ok(scan_impl(inp, &[inp.len], mode, false).0)
}

/// Runs the scan over a concatenation of independent sequences.
pub fn selective_scan_segments<T: Real>(
    inp: &ScanInputs<T>,
    segments: &[usize],
    mode: InputDiscretization,
) -> Result<Vec<T>> {
    inp.validate()?;
    check_segments(segments, inp.len)?;
    Ok(scan_impl(inp, segments, mode, false).0)
}

/// Forward quantities kept for the reverse pass, each `[len, channels, state]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScanTape<T> {
    pub states: Vec<T>,
    pub abar: Vec<T>,
    pub bcoef: Vec<T>,
}

/// Like [`selective_scan_segments`] but also records every hidden state and step coefficient.
pub fn selective_scan_with_states<T: Real>(
    inp: &ScanInputs<T>,
    segments: &[usize],
    mode: InputDiscretization,
) -> Result<(Vec<T>, ScanTape<T>)> {
    inp.validate()?;
    check_segments(segments, inp.len)?;
    Ok(scan_impl(inp, segments, mode, true))
}

fn scan_impl<T: Real>(
    inp: &ScanInputs<T>,
    segments: &[usize],
    mode: InputDiscretization,
    keep: bool,
) -> (Vec<T>, ScanTape<T>) {
    let (dch, n) = (inp.channels, inp.state);
    let mut y = vec![T::zero(); inp.len * dch];
    let mut tape = ScanTape::default();
    if keep {
        let full = vec![T::zero(); inp.len * dch * n];
        tape = ScanTape { states: full.clone(), abar: full.clone(), bcoef: full };
    }
    let mut h = vec![T::zero(); dch * n];
    let mut start = 0;
    for &seg in segments {
        h.iter_mut().for_each(|v| *v = T::zero());
        for t in start..start + seg {
            let brow = &inp.b[t * n..(t + 1) * n];
            let crow = &inp.c[t * n..(t + 1) * n];
            for d in 0..dch {
                let dt = inp.delta[t * dch + d];
                let ut = inp.u[t * dch + d];
                let arow = &inp.a[d * n..(d + 1) * n];
                let hrow = &mut h[d * n..(d + 1) * n];
                let base = (t * dch + d) * n;
                let mut acc = T::zero();
                for k in 0..n {
                    let (abar, bcoef) = step_coeffs(dt, arow[k], mode);
                    let hv = abar * hrow[k] + bcoef * brow[k] * ut;
                    hrow[k] = hv;
                    acc += crow[k] * hv;
                    if keep {
                        tape.abar[base + k] = abar;
                        tape.bcoef[base + k] = bcoef;
                    }
                }
                y[t * dch + d] = acc + inp.d[d] * ut;
                if keep {
                    tape.states[base..base + n].copy_from_slice(hrow);
                }
            }
        }
        start += seg;
    }
    (y, tape)
}

/// Reverse-time adjoint of the scan given the forward tape and `∂L/∂y`.
pub fn selective_scan_backward<T: Real>(
    inp: &ScanInputs<T>,
    segments: &[usize],
    mode: InputDiscretization,
    tape: &ScanTape<T>,
    gy: &[T],
) -> ScanGrads<T> {
    let states = &tape.states;
    let (dch, n) = (inp.channels, inp.state);
    let mut g = ScanGrads {
        u: vec![T::zero(); inp.u.len()],
        delta: vec![T::zero(); inp.delta.len()],
        a: vec![T::zero(); inp.a.len()],
        b: vec![T::zero(); inp.b.len()],
        c: vec![T::zero(); inp.c.len()],
        d: vec![T::zero(); inp.d.len()],
    };
    // carry[d, k] = Ā[t+1] · ∂L/∂h[t+1]
    let mut carry = vec![T::zero(); dch * n];
    let mut end = inp.len;
    for &seg in segments.iter().rev() {
        let start = end - seg;
        carry.iter_mut().for_each(|v| *v = T::zero());
        for t in (start..end).rev() {
            let brow = &inp.b[t * n..(t + 1) * n];
            let crow = &inp.c[t * n..(t + 1) * n];
            for d in 0..dch {
                let idx = t * dch + d;
                let (dt, ut, gyv) = (inp.delta[idx], inp.u[idx], gy[idx]);
                g.d[d] += gyv * ut;
                let mut gu = gyv * inp.d[d];
                let mut gdt = T::zero();
                let arow = &inp.a[d * n..(d + 1) * n];
                let h_now = &states[idx * n..(idx + 1) * n];
                let h_prev = (t > start).then(|| &states[(idx - dch) * n..(idx - dch + 1) * n]);
                for k in 0..n {
                    let av = arow[k];
                    let x = dt * av;
                    let (abar, bcoef) = (tape.abar[idx * n + k], tape.bcoef[idx * n + k]);
                    g.c[t * n + k] += gyv * h_now[k];
                    let gh = carry[d * n + k] + crow[k] * gyv;
                    let hp = h_prev.map_or(T::zero(), |hp| hp[k]);
                    let g_abar = gh * hp;
                    let g_bbar = gh * ut;
                    gu += gh * bcoef * brow[k];
                    g.b[t * n + k] += g_bbar * bcoef;
                    let (dcoef_ddt, dcoef_da) = match mode {
                        InputDiscretization::Simplified => (T::one(), T::zero()),
                        InputDiscretization::ExactZoh => (abar, dt * dt * zoh_a_sensitivity_from(x, abar)),
                    };
                    gdt += g_abar * av * abar + g_bbar * brow[k] * dcoef_ddt;
                    g.a[d * n + k] += g_abar * dt * abar + g_bbar * brow[k] * dcoef_da;
                    carry[d * n + k] = gh * abar;
                }
                g.u[idx] += gu;
                g.delta[idx] += gdt;
            }
        }
        end = start;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_matches_closed_form_at_the_switch() {
        for x in [-0.1f64, -0.0999, -0.05, -0.2] {
            let closed = (x * x.exp() - x.exp_m1()) / (x * x);
            assert!((zoh_a_sensitivity(x) - closed).abs() < 1e-12, "x={x}");
        }
        assert!((zoh_a_sensitivity(0.0f64) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_step_from_zero_state() {
        // L=1: y = <C, B̄ u> + D u
        let (u, dt, a, b, c, d) = ([2.0f64], [0.5], [-1.0, -2.0], [1.0, 3.0], [0.5, -1.0], [0.25]);
        let inp = ScanInputs::new(&u, &dt, &a, &b, &c, &d).unwrap();
        let y = selective_scan(&inp, InputDiscretization::ExactZoh).unwrap();
        let bbar = |av: f64, bv: f64| ((dt[0] * av).exp() - 1.0) / av * bv;
        let expected = c[0] * bbar(a[0], b[0]) * u[0] + c[1] * bbar(a[1], b[1]) * u[0] + d[0] * u[0];
        assert!((y[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let u = [0.0f64; 6];
        let dt = [0.1; 6];
        let a = [-1.0; 4];
        let b = [0.3; 6];
        let c = [0.7; 6];
        let d = [0.0; 2];
        let inp = ScanInputs::new(&u, &dt, &a, &b, &c, &d).unwrap();
        let y = selective_scan(&inp, InputDiscretization::ExactZoh).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_nonpositive_delta_and_nonnegative_a() {
        let (u, b, c, d) = ([1.0f64], [1.0], [1.0], [0.0]);
        let bad_dt = [0.0];
        let err = ScanInputs::new(&u, &bad_dt, &[-1.0], &b, &c, &d).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        let err = ScanInputs::new(&u, &[0.1], &[0.5], &b, &c, &d).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        let err = ScanInputs::new(&[f64::NAN], &[0.1], &[-0.5], &b, &c, &d).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }

    #[test]
    fn segments_reset_state() {
        let u = [1.0f64, 1.0, 1.0, 1.0];
        let dt = [0.5; 4];
        let a = [-1.0];
        let b = [1.0; 4];
        let c = [1.0; 4];
        let d = [0.0];
        let inp = ScanInputs::new(&u, &dt, &a, &b, &c, &d).unwrap();
        let y = selective_scan_segments(&inp, &[2, 2], InputDiscretization::ExactZoh).unwrap();
        assert_eq!(y[0], y[2]);
        assert_eq!(y[1], y[3]);
        assert!(selective_scan_segments(&inp, &[3, 2], InputDiscretization::ExactZoh).is_err());
    }
}
