#![allow(dead_code)]

use loma::ssm::ScanInputs;
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Owned operands of one random scan instance, laid out as [`ScanInputs`] expects.
#[derive(Debug, Clone)]
pub struct ScanCase {
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

impl ScanCase {
    pub fn random(rng: &mut impl Rng, len: usize, channels: usize, state: usize) -> Self {
        let mut draw = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>();
        ScanCase {
            u: draw(len * channels, -1.0, 1.0),
            // log-uniform over [1e-3, 1] so both the series and closed forms run
            delta: draw(len * channels, -3.0, 0.0).into_iter().map(|e| 10f64.powf(e)).collect(),
            a: draw(channels * state, -4.0, -0.05),
            b: draw(len * state, -1.0, 1.0),
            c: draw(len * state, -1.0, 1.0),
            d: draw(channels, -1.0, 1.0),
        }
    }

    pub fn inputs(&self) -> ScanInputs<'_, f64> {
        ScanInputs::new(&self.u, &self.delta, &self.a, &self.b, &self.c, &self.d).unwrap()
    }

    pub fn cast(&self) -> [Vec<f32>; 6] {
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect();
        [f(&self.u), f(&self.delta), f(&self.a), f(&self.b), f(&self.c), f(&self.d)]
    }
}

/// `max |x − y| / max |y|`, the worst deviation relative to the reference scale.
pub fn rel_err<T: Copy + Into<f64>>(x: &[T], reference: &[f64]) -> f64 {
    assert_eq!(x.len(), reference.len());
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    x.iter().zip(reference).map(|(&a, b)| (a.into() - b).abs()).fold(0.0, f64::max) / scale
}

/// Matrix exponential by Taylor series with scaling and squaring.
pub fn expm_taylor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = m.iter().map(|v| v.abs()).sum::<f64>();
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let x = m / 2f64.powi(s);
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut sum = term.clone();
    for k in 1..=30 {
        term = &term * &x / k as f64;
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

/// ZOH through the augmented matrix `exp([[ΔA, ΔB], [0, 0]]) = [[Ā, B̄], [0, I]]`.
pub fn zoh_oracle(a: &DMatrix<f64>, b: &DMatrix<f64>, delta: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = (a.nrows(), b.ncols());
    let mut aug = DMatrix::<f64>::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * delta));
    aug.view_mut((0, n), (n, m)).copy_from(&(b * delta));
    let e = expm_taylor(&aug);
    (e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, m)).into_owned())
}

/// Relative error of matrices in the max-entry norm.
pub fn mat_rel_err(x: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    rel_err(x.as_slice(), reference.as_slice())
}

/// Random 3×3 system with eigenvalues safely away from zero.
pub fn random_system(rng: &mut impl Rng, n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    loop {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.5..1.5)) - DMatrix::identity(n, n);
        let b = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
        let sv = a.clone().svd(false, false).singular_values;
        if sv.iter().copied().fold(f64::INFINITY, f64::min) > 0.05 {
            return (a, b);
        }
    }
}
