//! State space sequence models: continuous reference systems, ZOH
//! discretization, and the input-dependent (selective) scan.

pub mod discretize;
pub mod reference;
pub mod scan;

use rand::Rng;

pub use discretize::{discretize_diagonal, discretize_zoh, expm};
pub use reference::{lti_apply_dense, naive_selective_recurrence, DenseSsm, ScanState};
pub use scan::{
    selective_scan, selective_scan_backward, selective_scan_segments, selective_scan_with_states, InputDiscretization, ScanTape,
    ScanGrads, ScanInputs,
};

/// `A_log` such that `A[d, n] = −exp(A_log[d, n]) = −(n + 1)`, row-major `[channels, state]`.
pub fn s4d_real_a_log(channels: usize, state: usize) -> Vec<f64> {
    (0..channels).flat_map(|_| (0..state).map(|n| ((n + 1) as f64).ln())).collect()
}

/// Softplus bias for the step projection so initial steps are log-uniform in `[lo, hi]`.
pub fn delta_bias_init(rng: &mut impl Rng, channels: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..channels)
        .map(|_| {
            let u: f64 = rng.random();
            let dt = (lo.ln() + u * (hi.ln() - lo.ln())).exp().max(1e-4);
            // inverse of softplus
            dt + (-(-dt).exp_m1()).ln()
        })
        .collect()
}
