//! Runs the fused selective scan next to the step-by-step recurrence and
//! discretizes a small dense system by zero-order hold.
//!
//! `cargo run --release --example selective_scan`

use loma::ssm::{discretize_diagonal, discretize_zoh, naive_selective_recurrence, selective_scan, InputDiscretization, ScanInputs};
use nalgebra::DMatrix;

fn main() -> loma::Result<()> {
    // one sequence of 6 steps, 2 channels, state size 3
    let (l, d, n) = (6, 2, 3);
    let u: Vec<f64> = (0..l * d).map(|i| ((i * 7 % 5) as f64 - 2.0) / 2.0).collect();
    let delta: Vec<f64> = (0..l * d).map(|i| 0.05 + 0.1 * (i % 3) as f64).collect();
    let a: Vec<f64> = (0..d * n).map(|i| -1.0 - i as f64).collect();
    let b: Vec<f64> = (0..l * n).map(|i| ((i % 4) as f64 - 1.5) / 2.0).collect();
    let c: Vec<f64> = (0..l * n).map(|i| ((i % 3) as f64 - 1.0) / 2.0).collect();
    let skip = vec![1.0, 0.5];
    let inp = ScanInputs::new(&u, &delta, &a, &b, &c, &skip)?;

    for mode in [InputDiscretization::ExactZoh, InputDiscretization::Simplified] {
        let fast = selective_scan(&inp, mode)?;
        let slow = naive_selective_recurrence(&inp, mode)?;
        let gap = fast.iter().zip(&slow).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        println!("{mode:?}: y[0..4] = {:?}, max |fused - naive| = {gap:.1e}", &fast[..4]);
    }

    let (ab, bb) = discretize_diagonal(-1.0, 1.0, 2f64.ln())?;
    println!("scalar A=-1, dt=ln 2: A_bar = {ab}, B_bar = {bb}");

    let am = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, -2.0]);
    let bm = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
    let (ad, bd) = discretize_zoh(&am, &bm, 0.1)?;
    println!("dense 2x2 at dt=0.1:\nA_bar ={ad}B_bar ={bd}");
    Ok(())
}
