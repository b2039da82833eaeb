//! Optimizer, learning-rate schedule, the training loop, and batched evaluation.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{grad_check_coords, Graph, PrimitiveCheck, Var};
use crate::config::{join, KeyValues};
use crate::cli::{SYNTH_TEST_STREAM, SYNTH_VAL_STREAM};
use crate::data::{synth_generate_with, AugOp, AugmentPolicy, SampleRecord, SynthConfig};
use crate::error::{Error, Result};
use crate::loss_metrics::{dataset_average, hybrid_loss_graph, pixel_scores, EvalResult, LossConfig, PixelScores, THRESHOLD};
use crate::model::{build, LoMaConfig, Model};
use crate::nn::{apply_bn_updates, seeded_rng, Ctx, ParamStore};
use crate::tensor::{Real, Tensor};

/// Adam with decoupled weight decay, applied to weights of rank ≥ 2 only.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &[(crate::nn::ParamId, Vec<T>)]) {
        if self.m.is_empty() {
            self.m = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (id, g) in grads {
            let decay = if store.get(*id).ndim() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (i, p) in store.get_mut(*id).data_mut().iter_mut().enumerate() {
                let gi = g[i].f64();
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mut x = p.f64();
                x -= self.lr * decay * x;
                x -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *p = T::c(x);
            }
        }
    }
}

/// Reduces the rate by `factor` once the monitored score has not improved for `patience` epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl Plateau {
    pub fn new(patience: usize, factor: f64, min_lr: f64) -> Self {
        Plateau { patience, factor, min_lr, best: f64::NEG_INFINITY, bad_epochs: 0 }
    }

    /// Feeds one epoch's score (higher is better) and returns the new rate.
    pub fn observe(&mut self, score: f64, lr: f64) -> f64 {
        if score > self.best + 1e-4 {
            self.best = score;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub lr_factor: f64,
    pub min_lr: f64,
    pub augment: Vec<AugOp>,
    pub aug_prob: f64,
    pub shuffle: bool,
    pub seed: u64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 0.01,
            patience: 3,
            lr_factor: 0.5,
            min_lr: 1e-6,
            augment: AugOp::ALL.to_vec(),
            aug_prob: 0.5,
            shuffle: true,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    /// Schedule that learns the synthetic task within the desk-scale budget:
    /// a tenfold larger starting rate and geometric augmentation only.
    pub fn desk() -> Self {
        TrainConfig { lr: 1e-3, augment: vec![AugOp::HFlip, AugOp::VFlip], ..Self::default() }
    }
}

pub const TRAIN_KEYS: &[&str] =
    &["schedule", "epochs", "batch_size", "lr", "weight_decay", "patience", "lr_factor", "min_lr", "augment", "aug_prob", "shuffle"];

impl TrainConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = match kv.get_str("schedule").unwrap_or("default") {
            "default" => Self::default(),
            "desk" => Self::desk(),
            other => return Err(Error::Config(format!("unknown schedule '{other}' (default | desk)"))),
        };
        let augment = match kv.get_str("augment") {
            Some(s) => AugOp::parse_list(s).map_err(|e| Error::Config(e.to_string()))?,
            None => d.augment,
        };
        let cfg = TrainConfig {
            epochs: kv.get_or("epochs", d.epochs)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            lr: kv.get_or("lr", d.lr)?,
            weight_decay: kv.get_or("weight_decay", d.weight_decay)?,
            patience: kv.get_or("patience", d.patience)?,
            lr_factor: kv.get_or("lr_factor", d.lr_factor)?,
            min_lr: kv.get_or("min_lr", d.min_lr)?,
            augment,
            aug_prob: kv.get_or("aug_prob", d.aug_prob)?,
            shuffle: kv.get_or("shuffle", d.shuffle)?,
            seed: kv.get_or("seed", d.seed)?,
            threads: d.threads,
        };
        if cfg.batch_size == 0 || cfg.epochs == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if cfg.lr < 0.0 || !(0.0..=1.0).contains(&cfg.aug_prob) {
            return Err(Error::Config("lr must be non-negative and aug_prob in [0, 1]".into()));
        }
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KeyValues) {
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.lr);
        kv.set("weight_decay", self.weight_decay);
        kv.set("patience", self.patience);
        kv.set("lr_factor", self.lr_factor);
        kv.set("min_lr", self.min_lr);
        let names: Vec<&str> = self.augment.iter().map(|a| a.name()).collect();
        kv.set("augment", if names.is_empty() { "none".to_string() } else { join(&names) });
        kv.set("aug_prob", self.aug_prob);
        kv.set("shuffle", self.shuffle);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
    pub val_iou: f64,
    pub lr: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_f1,val_iou,lr";

    pub fn csv(&self) -> String {
        format!("{},{:.12e},{:.6},{:.6},{:.3e}", self.epoch, self.train_loss, self.val_f1, self.val_iou, self.lr)
    }
}

pub struct TrainOutcome<T: Real> {
    /// Weights of the epoch with the best validation F1.
    pub best: Model<T>,
    pub last: Model<T>,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Stacks records into `[n, H, W, 3]` images and `[n, H, W, 1]` masks.
pub fn batch_tensors<T: Real>(records: &[&SampleRecord]) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w) = (records[0].height, records[0].width);
    let mut img = Vec::with_capacity(records.len() * h * w * 3);
    let mut mask = Vec::with_capacity(records.len() * h * w);
    for r in records {
        if (r.height, r.width) != (h, w) {
            return Err(Error::contract(format!("mixed sizes in one batch: {h}x{w} and {}x{}", r.height, r.width)));
        }
        img.extend(r.image.iter().map(|&v| T::c(v as f64)));
        mask.extend(r.mask.iter().map(|&v| T::c(v as f64)));
    }
    Ok((Tensor::new([records.len(), h, w, 3], img)?, Tensor::new([records.len(), h, w, 1], mask)?))
}

/// One optimization step; returns the batch loss.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    opt: &mut AdamW,
    images: Tensor<T>,
    masks: &Tensor<T>,
    loss_cfg: &LossConfig,
) -> Result<f64> {
    let (loss, grads, updates) = {
        let mut ctx = Ctx::training(&model.store);
        let x = ctx.g.constant(images);
        let out = model.forward(&mut ctx, x)?;
        let loss = hybrid_loss_graph(&mut ctx.g, out.prob, masks, loss_cfg)?;
        ctx.g.backward(loss)?;
        (ctx.g.value(loss)[0].f64(), ctx.param_grads(), ctx.take_bn_updates())
    };
    opt.step(&mut model.store, &grads);
    apply_bn_updates(&mut model.store, updates);
    Ok(loss)
}

pub fn loss_config(cfg: &LoMaConfig) -> LossConfig {
    LossConfig { lambda_dice: cfg.lambda_dice, lambda_focal: cfg.lambda_focal, alpha: cfg.focal_alpha, gamma: cfg.focal_gamma }
}

/// Probability maps for `records`, predicted in batches of `batch` across `threads` workers.
pub fn predict_records<T: Real>(model: &Model<T>, records: &[SampleRecord], batch: usize, threads: usize) -> Result<Vec<Vec<f64>>> {
    let threads = threads.max(1);
    let chunk = records.len().div_ceil(threads).max(1);
    let run = |part: &[SampleRecord]| -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(part.len());
        for b in part.chunks(batch.max(1)) {
            let refs: Vec<&SampleRecord> = b.iter().collect();
            let (x, _) = batch_tensors::<T>(&refs)?;
            let p = model.predict(&x)?;
            let px = p.numel() / b.len();
            out.extend(p.data().chunks_exact(px).map(|c| c.iter().map(|v| v.f64()).collect()));
        }
        Ok(out)
    };
    if threads == 1 || records.len() <= 1 {
        return run(records);
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = records.chunks(chunk).map(|part| s.spawn(move || run(part))).collect();
        let mut all = Vec::with_capacity(records.len());
        for h in handles {
            all.extend(h.join().map_err(|_| Error::contract("evaluation worker panicked"))??);
        }
        Ok(all)
    })
}

/// Per-image scores at the fixed threshold.
pub fn score_records(probs: &[Vec<f64>], records: &[SampleRecord]) -> Result<Vec<PixelScores>> {
    probs
        .iter()
        .zip(records)
        .map(|(p, r)| {
            let g: Vec<f64> = r.mask.iter().map(|&m| m as f64).collect();
            pixel_scores(p, &g, THRESHOLD)
        })
        .collect()
}

/// Scores `records` as a single dataset named `name`.
pub fn evaluate<T: Real>(model: &Model<T>, records: &[SampleRecord], name: &str, threads: usize) -> Result<EvalResult> {
    let probs = predict_records(model, records, 8, threads)?;
    let scores = score_records(&probs, records)?;
    dataset_average(scores.into_iter().map(|s| (name.to_string(), s)).collect())
}

/// Trains from scratch on `train`, selecting the epoch with the best F1 on `val`.
///
/// `on_epoch` sees each log line as it is produced.
pub fn fit<T: Real>(
    model_cfg: &LoMaConfig,
    cfg: &TrainConfig,
    train: &[SampleRecord],
    val: &[SampleRecord],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::contract("training needs non-empty train and validation sets"));
    }
    if let Some(r) = train.iter().chain(val).find(|r| (r.height, r.width) != (model_cfg.height, model_cfg.width)) {
        return Err(Error::contract(format!(
            "sample is {}x{}, model expects {}x{}",
            r.height, r.width, model_cfg.height, model_cfg.width
        )));
    }
    let mut model = build::<T>(model_cfg)?;
    let loss_cfg = loss_config(model_cfg);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut sched = Plateau::new(cfg.patience, cfg.lr_factor, cfg.min_lr);
    let policy = AugmentPolicy { p: cfg.aug_prob, ..AugmentPolicy::new(cfg.augment.clone()) };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;
    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut seeded_rng(cfg.seed, 1 << 32 | epoch as u64));
        }
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let recs: Vec<SampleRecord> = idx
                .iter()
                .map(|&i| {
                    if policy.ops.is_empty() {
                        train[i].clone()
                    } else {
                        let stream = 2 << 32 | ((epoch as u64) << 20) | i as u64;
                        policy.apply(&train[i], &mut seeded_rng(cfg.seed, stream))
                    }
                })
                .collect();
            let refs: Vec<&SampleRecord> = recs.iter().collect();
            let (x, y) = batch_tensors::<T>(&refs)?;
            let loss = train_step(&mut model, &mut opt, x, &y, &loss_cfg)
                .map_err(|e| Error::contract(format!("epoch {epoch}, batch {bi}: {e}")))?;
            total += loss;
            batches += 1;
        }
        let res = evaluate(&model, val, "val", cfg.threads)?;
        let log = EpochLog { epoch, train_loss: total / batches as f64, val_f1: res.f1, val_iou: res.iou, lr: opt.lr };
        on_epoch(&log);
        history.push(log);
        if best.as_ref().is_none_or(|(f, _, _)| res.f1 > *f) {
            best = Some((res.f1, epoch, model.store.clone()));
        }
        opt.lr = sched.observe(res.f1, opt.lr);
    }
    let (_, best_epoch, store) = best.expect("at least one epoch");
    let best_model = Model { cfg: model.cfg.clone(), net: model.net.clone(), store };
    Ok(TrainOutcome { best: best_model, last: model, history, best_epoch })
}

/// Sizes of the desk-scale learning experiment on synthetic forgeries.
#[derive(Debug, Clone, PartialEq)]
pub struct DeskProtocol {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub synth: SynthConfig,
}

impl Default for DeskProtocol {
    fn default() -> Self {
        DeskProtocol { train: 500, val: 50, test: 100, synth: SynthConfig::default() }
    }
}

#[derive(Debug, Clone)]
pub struct DeskRun {
    pub seed: u64,
    pub use_cab: bool,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
    /// Held-out scores of the best-validation weights.
    pub test: EvalResult,
    pub seconds: f64,
}

/// Trains the tiny configuration with the desk schedule on data drawn from
/// `seed`, then scores the best-validation weights on a disjoint test stream.
pub fn desk_run(p: &DeskProtocol, seed: u64, use_cab: bool, on_epoch: impl FnMut(&EpochLog)) -> Result<DeskRun> {
    let start = std::time::Instant::now();
    let train = synth_generate_with(seed, 0, p.train, &p.synth)?;
    let val = synth_generate_with(seed, SYNTH_VAL_STREAM, p.val, &p.synth)?;
    let test = synth_generate_with(seed, SYNTH_TEST_STREAM, p.test, &p.synth)?;
    let model_cfg = LoMaConfig { seed, use_cab, ..LoMaConfig::tiny() }.with_size(p.synth.size, p.synth.size);
    let cfg = TrainConfig { seed, ..TrainConfig::desk() };
    let out = fit::<f32>(&model_cfg, &cfg, &train, &val, on_epoch)?;
    let test = evaluate(&out.best, &test, "test", 1)?;
    Ok(DeskRun {
        seed,
        use_cab,
        best_epoch: out.best_epoch,
        history: out.history,
        test,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Adds `N(0, scale² / fan_in)` noise to every trainable tensor, `fan_in` being
/// the product of all but the last dimension (1 for vectors).
///
/// At initialization the scan branch of every route is a ~1e-5 correction on
/// the skip term, so its gradients sit below the central-difference noise
/// floor; a jittered point keeps every parameter measurable.
pub fn jitter_params(store: &mut ParamStore<f64>, scale: f64, seed: u64) -> Result<()> {
    let mut rng = seeded_rng(seed, 0x6a_69_74);
    let ids: Vec<_> = store.params().collect();
    for id in ids {
        let t = store.get_mut(id);
        let fan_in = if t.ndim() >= 2 { t.numel() / t.shape()[t.ndim() - 1] } else { 1 };
        let std = scale / (fan_in as f64).sqrt();
        if std == 0.0 {
            continue;
        }
        let normal = Normal::new(0.0, std).map_err(|e| Error::contract(format!("jitter: {e}")))?;
        for v in t.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(())
}

/// Central-difference check of the training loss against the model's own
/// backward pass, on `per_tensor` sampled coordinates of every trainable tensor.
///
/// Normalization runs on running statistics: batch statistics over the few
/// pixels of the deepest stage make the loss needlessly ill-conditioned.
pub fn model_grad_check(
    model: &Model<f64>,
    images: &Tensor<f64>,
    masks: &Tensor<f64>,
    per_tensor: usize,
    epsilon: f64,
    seed: u64,
) -> Result<Vec<PrimitiveCheck>> {
    let loss_cfg = loss_config(&model.cfg);
    let mut rng = seeded_rng(seed, 0x6d_6f64);
    let mut rows = Vec::new();
    for id in model.store.params() {
        let point = model.store.get(id).clone();
        let mut coords: Vec<usize> = (0..point.numel()).collect();
        coords.shuffle(&mut rng);
        coords.truncate(per_tensor.max(1));
        let f = |g: &mut Graph<f64>, v: Var| -> Result<Var> {
            let mut ctx = Ctx::build(&model.store, false, false);
            ctx.g = std::mem::take(g);
            ctx.override_param(id, v);
            let x = ctx.g.constant(images.clone());
            let out = model.forward(&mut ctx, x);
            let loss = out.and_then(|o| hybrid_loss_graph(&mut ctx.g, o.prob, masks, &loss_cfg));
            *g = std::mem::take(&mut ctx.g);
            loss
        };
        let res = grad_check_coords(f, &point, epsilon, &coords)?;
        rows.push(PrimitiveCheck { name: model.store.name(id).to_string(), max_rel_error: res.max_rel_error, checked: res.checked });
    }
    Ok(rows)
}

/// Appends `lines` to `path`, creating parents.
pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for l in lines {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn checkpoint_path(out: &Path) -> PathBuf {
    out.join("checkpoint.bin")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_halves_after_patience() {
        let mut p = Plateau::new(3, 0.5, 1e-6);
        let mut lr = 1e-4;
        lr = p.observe(0.5, lr);
        for _ in 0..2 {
            lr = p.observe(0.4, lr);
            assert_eq!(lr, 1e-4);
        }
        lr = p.observe(0.4, lr);
        assert_eq!(lr, 5e-5);
        let mut q = Plateau::new(1, 0.5, 1e-6);
        let mut lr = 2e-6;
        for _ in 0..4 {
            lr = q.observe(0.0, lr);
        }
        assert_eq!(lr, 1e-6);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", crate::autodiff::checkpoint::EntryKind::Param, &[2], vec![1.0, -1.0]).unwrap();
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut store, &[(id, vec![3.0, -0.5])]);
        let v = store.get(id).data();
        // bias correction makes the first step lr · g / (|g| + eps)
        let eps = opt.eps;
        assert!((v[0] - (1.0 - 0.1 * 3.0 / (3.0 + eps))).abs() < 1e-15);
        assert!((v[1] - (-1.0 + 0.1 * 0.5 / (0.5 + eps))).abs() < 1e-15);
    }
}
