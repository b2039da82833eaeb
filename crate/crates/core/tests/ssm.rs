mod common;

use common::{mat_rel_err, random_system, rel_err, rng, zoh_oracle, ScanCase};
use loma::ssm::{
    discretize_diagonal, discretize_zoh, lti_apply_dense, naive_selective_recurrence, selective_scan,
    selective_scan_segments, DenseSsm, InputDiscretization, ScanInputs,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

const MODES: [InputDiscretization; 2] = [InputDiscretization::ExactZoh, InputDiscretization::Simplified];

#[test]
fn fused_scan_matches_naive_recurrence_in_double() {
    let mut r = rng(11);
    for _ in 0..20 {
        let (l, d, n) = (r.random_range(1..=64), r.random_range(1..=8), r.random_range(1..=8));
        let case = ScanCase::random(&mut r, l, d, n);
        for mode in MODES {
            let fast = selective_scan(&case.inputs(), mode).unwrap();
            let slow = naive_selective_recurrence(&case.inputs(), mode).unwrap();
            assert!(rel_err(&fast, &slow) <= 1e-10, "{l}x{d}x{n} {mode:?}");
        }
    }
}

#[test]
fn single_precision_scan_tracks_double_reference() {
    let mut r = rng(12);
    for _ in 0..20 {
        let (l, d, n) = (r.random_range(1..=64), r.random_range(1..=8), r.random_range(1..=8));
        let case = ScanCase::random(&mut r, l, d, n);
        let [u, dt, a, b, c, skip] = case.cast();
        let inp = ScanInputs::new(&u, &dt, &a, &b, &c, &skip).unwrap();
        // the f64 oracle runs on the same (rounded) operands
        let back = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        let (u6, dt6, a6, b6, c6, d6) = (back(&u), back(&dt), back(&a), back(&b), back(&c), back(&skip));
        let inp6 = ScanInputs::new(&u6, &dt6, &a6, &b6, &c6, &d6).unwrap();
        let want = naive_selective_recurrence(&inp6, InputDiscretization::ExactZoh).unwrap();
        let got = selective_scan(&inp, InputDiscretization::ExactZoh).unwrap();
        assert!(rel_err(&got, &want) <= 1e-5, "{l}x{d}x{n}");
    }
}

#[test]
fn diagonal_scan_equals_dense_lti_system() {
    // constant Δ, B, C and a single channel make the selective scan an LTI filter
    let mut r = rng(13);
    let (l, n, dt) = (40, 5, 0.07);
    let a: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..-0.2)).collect();
    let bv: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let cv: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let u: Vec<f64> = (0..l).map(|_| r.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..l).flat_map(|_| bv.clone()).collect();
    let c: Vec<f64> = (0..l).flat_map(|_| cv.clone()).collect();
    let delta = vec![dt; l];
    let y = selective_scan(&ScanInputs::new(&u, &delta, &a, &b, &c, &[0.3]).unwrap(), InputDiscretization::ExactZoh)
        .unwrap();
    let sys = DenseSsm::new(
        DMatrix::from_diagonal(&nalgebra::DVector::from_vec(a.clone())),
        DMatrix::from_vec(n, 1, bv),
        DMatrix::from_vec(1, n, cv),
        0.3,
    )
    .unwrap();
    let want = lti_apply_dense(&sys, &u, dt).unwrap();
    assert!(rel_err(&y, &want) <= 1e-12);
}

#[test]
fn zoh_matches_augmented_exponential_oracle() {
    let mut r = rng(14);
    for _ in 0..50 {
        let (a, b) = random_system(&mut r, 3);
        let dt = r.random_range(0.01..2.0);
        let (ab, bb) = discretize_zoh(&a, &b, dt).unwrap();
        let (ao, bo) = zoh_oracle(&a, &b, dt);
        assert!(mat_rel_err(&ab, &ao) <= 1e-10 && mat_rel_err(&bb, &bo) <= 1e-10, "dt {dt}");
    }
}

#[test]
fn zoh_scalar_fixtures() {
    let (ab, bb) = discretize_zoh(&DMatrix::zeros(1, 1), &DMatrix::from_element(1, 1, 2.0), 0.25).unwrap();
    assert!((ab[(0, 0)] - 1.0).abs() <= 1e-12 && (bb[(0, 0)] - 0.5).abs() <= 1e-12);
    let (ab, bb) = discretize_zoh(&DMatrix::from_element(1, 1, -1.0), &DMatrix::from_element(1, 1, 1.0), 2f64.ln())
        .unwrap();
    assert!((ab[(0, 0)] - 0.5).abs() <= 1e-12 && (bb[(0, 0)] - 0.5).abs() <= 1e-12);
    let (ab, bb) = discretize_diagonal(-1.0, 1.0, 2f64.ln()).unwrap();
    assert!((ab - 0.5).abs() <= 1e-12 && (bb - 0.5).abs() <= 1e-12);
}

#[test]
fn segments_equal_separate_scans() {
    let mut r = rng(15);
    let (d, n) = (3, 4);
    let lens = [5, 1, 9];
    let cases: Vec<ScanCase> = lens.iter().map(|&l| ScanCase::random(&mut r, l, d, n)).collect();
    let cat = |f: fn(&ScanCase) -> &Vec<f64>| cases.iter().flat_map(|c| f(c).clone()).collect::<Vec<_>>();
    let (u, dt, b, c) = (cat(|c| &c.u), cat(|c| &c.delta), cat(|c| &c.b), cat(|c| &c.c));
    let (a, skip) = (cases[0].a.clone(), cases[0].d.clone());
    let joint = selective_scan_segments(&ScanInputs::new(&u, &dt, &a, &b, &c, &skip).unwrap(), &lens, MODES[0]).unwrap();
    let mut offset = 0;
    for case in &cases {
        let alone = ScanCase { a: a.clone(), d: skip.clone(), ..case.clone() };
        let y = selective_scan(&alone.inputs(), MODES[0]).unwrap();
        assert_eq!(&joint[offset..offset + y.len()], &y[..]);
        offset += y.len();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scan_is_linear_in_u(seed in any::<u64>(), alpha in -2.0f64..2.0, beta in -2.0f64..2.0,
                           l in 1usize..32, d in 1usize..5, n in 1usize..5) {
        let mut r = rng(seed);
        let base = ScanCase { d: vec![0.0; d], ..ScanCase::random(&mut r, l, d, n) };
        let u2: Vec<f64> = (0..l * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let mix: Vec<f64> = base.u.iter().zip(&u2).map(|(x, y)| alpha * x + beta * y).collect();
        for mode in MODES {
            let y1 = selective_scan(&base.inputs(), mode).unwrap();
            let y2 = selective_scan(&ScanCase { u: u2.clone(), ..base.clone() }.inputs(), mode).unwrap();
            let ym = selective_scan(&ScanCase { u: mix.clone(), ..base.clone() }.inputs(), mode).unwrap();
            let want: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| alpha * a + beta * b).collect();
            for (g, w) in ym.iter().zip(&want) {
                prop_assert!((g - w).abs() <= 1e-10 * (1.0 + w.abs()));
            }
        }
    }

    #[test]
    fn states_stay_finite_for_stable_systems(seed in any::<u64>(), l in 1usize..200) {
        let mut r = rng(seed);
        let mut case = ScanCase::random(&mut r, l, 2, 3);
        for v in &mut case.u { *v *= 1e3; }
        let y = selective_scan(&case.inputs(), MODES[0]).unwrap();
        prop_assert!(y.iter().all(|v| v.is_finite()));
    }
}
