use loma::autodiff::checkpoint::Checkpoint;
use loma::cli::GRADCHECK_MODEL_TOL;
use loma::data::{synth_generate_with, SampleRecord, SynthConfig};
use loma::model::{build, LoMaConfig};
use loma::train::{batch_tensors, fit, jitter_params, model_grad_check, AdamW, TrainConfig};

const SIZE: usize = 32;

fn data(seed: u64, first: u64, count: usize) -> Vec<SampleRecord> {
    synth_generate_with(seed, first, count, &SynthConfig { size: SIZE, ..SynthConfig::default() }).unwrap()
}

fn tiny(seed: u64) -> LoMaConfig {
    LoMaConfig { seed, ..LoMaConfig::tiny() }.with_size(SIZE, SIZE)
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig { epochs: 2, seed, ..TrainConfig::desk() }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let model = build::<f32>(&tiny(5)).unwrap();
    let ck = model.store.to_checkpoint(&model.cfg.arch_hash());
    let bytes = ck.to_bytes();
    let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    let mut other = build::<f32>(&tiny(6)).unwrap();
    other.store.load_checkpoint(&back).unwrap();
    assert_eq!(other.store.to_checkpoint(&model.cfg.arch_hash()).to_bytes(), bytes);

    assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err(), "precision mismatch accepted");
    assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err(), "truncation accepted");
    let mut wrong = build::<f32>(&LoMaConfig { use_cab: false, ..tiny(5) }).unwrap();
    assert!(wrong.store.load_checkpoint(&back).is_err(), "architecture mismatch accepted");
}

#[test]
fn equal_seeds_train_identically() {
    let (train, val) = (data(1, 0, 16), data(1, 1000, 4));
    let run = || fit::<f64>(&tiny(1), &quick(1), &train, &val, |_| {}).unwrap();
    let (a, b) = (run(), run());
    let curve = |o: &loma::train::TrainOutcome<f64>| o.history.iter().map(|l| l.train_loss).collect::<Vec<_>>();
    assert_eq!(curve(&a), curve(&b));
    let hash = tiny(1).arch_hash();
    assert_eq!(a.best.store.to_checkpoint(&hash).to_bytes(), b.best.store.to_checkpoint(&hash).to_bytes());
    assert!(a.history.iter().all(|l| l.train_loss.is_finite()));
}

#[test]
fn zero_rate_keeps_the_loss_constant() {
    let (train, val) = (data(2, 0, 8), data(2, 1000, 2));
    let cfg = TrainConfig { epochs: 3, lr: 0.0, shuffle: false, augment: vec![], ..quick(2) };
    let out = fit::<f64>(&tiny(2), &cfg, &train, &val, |_| {}).unwrap();
    let first = out.history[0].train_loss;
    for l in &out.history {
        assert!((l.train_loss - first).abs() <= 1e-12, "{} vs {first}", l.train_loss);
    }
}

#[test]
fn training_lowers_the_loss() {
    let (train, val) = (data(3, 0, 24), data(3, 1000, 4));
    let cfg = TrainConfig { epochs: 4, ..quick(3) };
    let out = fit::<f32>(&tiny(3), &cfg, &train, &val, |_| {}).unwrap();
    let h = &out.history;
    assert!(h.last().unwrap().train_loss < h[0].train_loss, "{h:?}");
    assert!((1..=4).contains(&out.best_epoch));
}

#[test]
fn loss_ablation_arms_run_to_completion() {
    let (train, val) = (data(4, 0, 8), data(4, 1000, 2));
    let mut losses = Vec::new();
    for (ld, lf) in [(1.0, 1.0), (1.0, 0.0), (0.0, 1.0)] {
        let cfg = LoMaConfig { lambda_dice: ld, lambda_focal: lf, ..tiny(4) };
        let out = fit::<f32>(&cfg, &quick(4), &train, &val, |_| {}).unwrap();
        assert_eq!(out.history.len(), 2);
        losses.push(out.history[0].train_loss);
    }
    assert!(losses.iter().all(|l| l.is_finite()));
    assert!(losses[1] != losses[2] && losses[0] > losses[1].max(losses[2]), "{losses:?}");
}

#[test]
fn mismatched_shapes_and_empty_sets_are_rejected() {
    let train = data(0, 0, 2);
    assert!(fit::<f32>(&tiny(0).with_size(64, 64), &quick(0), &train, &train, |_| {}).is_err());
    assert!(fit::<f32>(&tiny(0), &quick(0), &train, &[], |_| {}).is_err());
}

#[test]
fn adamw_first_step_moves_by_the_rate() {
    // after bias correction the first Adam update is lr * sign(g)
    let mut model = build::<f64>(&tiny(0)).unwrap();
    let id = model.store.params().next().unwrap();
    let before = model.store.get(id).data().to_vec();
    let grad: Vec<f64> = (0..before.len()).map(|i| if i % 2 == 0 { 3.0 } else { -0.5 }).collect();
    let mut opt = AdamW::new(1e-2, 0.0);
    opt.step(&mut model.store, &[(id, grad.clone())]);
    for ((b, a), g) in before.iter().zip(model.store.get(id).data()).zip(&grad) {
        assert!((b - a - 1e-2 * g.signum()).abs() <= 1e-8);
    }
}

#[test]
fn end_to_end_gradients_match_central_differences() {
    let mut model = build::<f64>(&tiny(0)).unwrap();
    jitter_params(&mut model.store, 0.05, 0).unwrap();
    let records = data(0, 0, 2);
    let refs: Vec<&SampleRecord> = records.iter().collect();
    let (x, y) = batch_tensors::<f64>(&refs).unwrap();
    let rows = model_grad_check(&model, &x, &y, 1, 3e-5, 0).unwrap();
    assert_eq!(rows.len(), model.store.params().count());
    for r in &rows {
        assert!(r.max_rel_error <= GRADCHECK_MODEL_TOL, "{}: {:.3e}", r.name, r.max_rel_error);
    }
}
