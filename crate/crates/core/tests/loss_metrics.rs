mod common;

use std::collections::BTreeSet;

use common::rng;
use loma::autodiff::grad_check;
use loma::loss_metrics::{
    dataset_average, dice_loss, dice_loss_with_eps, focal_loss, hybrid_loss, hybrid_loss_graph, pixel_scores,
    LossConfig, PixelScores, THRESHOLD,
};
use loma::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn mask(n: usize, ones: impl IntoIterator<Item = usize>) -> Vec<f64> {
    let mut m = vec![0.0; n];
    for i in ones {
        m[i] = 1.0;
    }
    m
}

/// Scores from explicit pixel sets.
fn set_oracle(p: &[f64], g: &[f64]) -> (f64, f64) {
    let pred: BTreeSet<usize> = (0..p.len()).filter(|&i| p[i] >= THRESHOLD).collect();
    let truth: BTreeSet<usize> = (0..g.len()).filter(|&i| g[i] > 0.5).collect();
    let inter = pred.intersection(&truth).count();
    let union = pred.union(&truth).count();
    if union == 0 {
        return (1.0, 1.0);
    }
    (2.0 * inter as f64 / (pred.len() + truth.len()) as f64, inter as f64 / union as f64)
}

#[test]
fn pixel_scores_match_set_oracle_on_random_masks() {
    for seed in 0..50 {
        let mut r = rng(seed);
        let density = r.random_range(0.0..0.6);
        let p: Vec<f64> = (0..256).map(|_| if r.random_bool(density) { r.random_range(0.5..1.0) } else { r.random_range(0.0..0.5) }).collect();
        let g: Vec<f64> = (0..256).map(|_| if r.random_bool(density) { 1.0 } else { 0.0 }).collect();
        let s = pixel_scores(&p, &g, THRESHOLD).unwrap();
        assert_eq!((s.f1, s.iou), set_oracle(&p, &g), "seed {seed}");
    }
}

#[test]
fn half_overlap_counts() {
    let p = mask(400, 0..100);
    let g = mask(400, 50..150);
    let s = pixel_scores(&p, &g, THRESHOLD).unwrap();
    assert_eq!((s.tp, s.fp, s.fn_), (50, 50, 50));
    assert_eq!(s.f1, 0.5);
    assert!((s.iou - 1.0 / 3.0).abs() <= 1e-15);
    assert!((dice_loss_with_eps(&p, &g, 0.0).unwrap() - 0.5).abs() <= 1e-12);
}

#[test]
fn score_conventions() {
    let empty = vec![0.0; 16];
    let some = mask(16, [3, 4]);
    assert_eq!(pixel_scores(&empty, &empty, THRESHOLD).unwrap().f1, 1.0);
    assert_eq!(pixel_scores(&some, &empty, THRESHOLD).unwrap().iou, 0.0);
    assert_eq!(pixel_scores(&empty, &some, THRESHOLD).unwrap().f1, 0.0);
    assert_eq!(pixel_scores(&some, &some, THRESHOLD).unwrap().iou, 1.0);
    assert_eq!(pixel_scores(&mask(16, [1]), &mask(16, [2]), THRESHOLD).unwrap().f1, 0.0);
    // threshold is inclusive
    assert_eq!(pixel_scores(&[0.5], &[1.0], THRESHOLD).unwrap().tp, 1);
    assert!(pixel_scores(&[0.5], &[1.0, 0.0], THRESHOLD).is_err());
}

#[test]
fn loss_fixtures() {
    let g = mask(100, 0..40);
    assert!(dice_loss(&g, &g).unwrap() <= 1e-12);
    let disjoint = dice_loss(&mask(2000, 0..1000), &mask(2000, 1000..2000)).unwrap();
    assert!((disjoint - 1.0).abs() <= 1e-3);
    let bce_half = focal_loss(&[0.5], &[1.0], 0.5, 0.0).unwrap();
    assert!((bce_half - 0.5 * 2f64.ln()).abs() <= 1e-6);
    assert!((bce_half - 0.3466).abs() <= 1e-4);
    let near = focal_loss(&vec![1.0 - 1e-7; 64], &vec![1.0; 64], 0.25, 2.0).unwrap();
    assert!(near <= 1e-5);
    let (p, gt) = (vec![0.3, 0.8, 0.6, 0.1], vec![0.0, 1.0, 0.0, 1.0]);
    let both = hybrid_loss(&p, &gt, 1.0, 1.0, 0.25, 2.0).unwrap();
    let sum = dice_loss(&p, &gt).unwrap() + focal_loss(&p, &gt, 0.25, 2.0).unwrap();
    assert!((both - sum).abs() <= 1e-12);
    assert_eq!(hybrid_loss(&p, &gt, 1.0, 0.0, 0.25, 2.0).unwrap(), dice_loss(&p, &gt).unwrap());
    assert_eq!(hybrid_loss(&p, &gt, 0.0, 1.0, 0.25, 2.0).unwrap(), focal_loss(&p, &gt, 0.25, 2.0).unwrap());
    assert!(hybrid_loss(&p, &gt, -1.0, 1.0, 0.25, 2.0).is_err());
}

#[test]
fn dataset_average_is_unweighted_over_datasets() {
    let s = |f1: f64| PixelScores { f1, iou: f1, tp: 0, fp: 0, fn_: 0 };
    let mut images = vec![("a".to_string(), s(0.6))];
    images.extend((0..9).map(|_| ("b".to_string(), s(0.8))));
    let r = dataset_average(images).unwrap();
    assert!((r.f1 - 0.7).abs() <= 1e-12);
    let one = dataset_average(vec![("x".into(), s(1.0)), ("x".into(), s(0.0))]).unwrap();
    assert_eq!(one.datasets[0].f1, 0.5);
    assert!(dataset_average(vec![]).is_err());
    assert!(one.to_csv().starts_with("dataset,count,f1,iou\n"));
}

#[test]
fn hybrid_loss_gradient_check() {
    let mut r = rng(3);
    let shape = [2, 4, 4, 1];
    let p = Tensor::from_fn(shape, |_| r.random_range(0.05..0.95));
    let target = Tensor::from_fn(shape, |_| if r.random_bool(0.4) { 1.0 } else { 0.0 });
    for cfg in [
        LossConfig::default(),
        LossConfig { lambda_dice: 0.0, ..LossConfig::default() },
        LossConfig { lambda_focal: 0.0, ..LossConfig::default() },
        LossConfig { gamma: 1.5, ..LossConfig::default() },
    ] {
        let res = grad_check(|g, v| hybrid_loss_graph(g, v, &target, &cfg), &p, 1e-5).unwrap();
        assert!(res.max_rel_error <= 1e-6, "{cfg:?}: {}", res.max_rel_error);
    }
}

proptest! {
    #[test]
    fn f1_iou_identity(seed in any::<u64>(), n in 1usize..300) {
        let mut r = rng(seed);
        let p: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| if r.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let s = pixel_scores(&p, &g, THRESHOLD).unwrap();
        prop_assert!(s.f1 >= s.iou && (0.0..=1.0).contains(&s.f1) && (0.0..=1.0).contains(&s.iou));
        prop_assert!((s.f1 - 2.0 * s.iou / (1.0 + s.iou)).abs() <= 1e-15);
    }

    #[test]
    fn losses_are_permutation_invariant(seed in any::<u64>(), n in 1usize..200) {
        let mut r = rng(seed);
        let p: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut r);
        let (pp, gp): (Vec<f64>, Vec<f64>) = idx.iter().map(|&i| (p[i], g[i])).unzip();
        prop_assert!((dice_loss(&p, &g).unwrap() - dice_loss(&pp, &gp).unwrap()).abs() <= 1e-12);
        prop_assert!((focal_loss(&p, &g, 0.25, 2.0).unwrap() - focal_loss(&pp, &gp, 0.25, 2.0).unwrap()).abs() <= 1e-12);
    }
}
