//! Command implementations behind the `loma` binary.
//!
//! Every command reads one `key = value` config file, writes its outputs under
//! `--out`, and records the resolved configuration there as `run_config.txt`
//! so that the run can be repeated exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::autodiff::checkpoint::{Checkpoint, Header};
use crate::autodiff::{primitive_suite, PrimitiveCheck};
use crate::bench::{op_count_csv, op_count_table, timing_csv, timing_table, BenchConfig};
use crate::config::{join, KeyValues};
use crate::data::{
    read_record, synth_generate_with, write_gray, write_mask, write_records, Manifest, ManifestEntry, SampleRecord,
    SynthConfig,
};
use crate::error::{Error, Result};
use crate::loss_metrics::{dataset_average, pixel_scores, EvalResult, THRESHOLD};
use crate::model::{build, LoMaConfig, Model, MODEL_KEYS};
use crate::tensor::{Precision, Real};
use crate::train::{
    batch_tensors, checkpoint_path, fit, jitter_params, model_grad_check, predict_records, write_lines, EpochLog, TrainConfig,
    TRAIN_KEYS,
};

/// Keys read by the commands themselves, on top of the model and training keys.
pub const RUN_KEYS: &[&str] = &[
    "precision",
    "manifest",
    "train_split",
    "val_split",
    "eval_splits",
    "oracle",
    "synth_train",
    "synth_val",
    "synth_test",
    "gradcheck_size",
    "gradcheck_batch",
    "gradcheck_coords",
    "gradcheck_epsilon",
    "gradcheck_jitter",
    "bench_lengths",
    "bench_channels",
    "bench_state",
    "bench_trials",
];

/// Stream offsets of the validation and test splits written by `synth`.
pub const SYNTH_VAL_STREAM: u64 = 100_000;
pub const SYNTH_TEST_STREAM: u64 = 200_000;

pub const GRADCHECK_PRIMITIVE_TOL: f64 = 1e-4;
pub const GRADCHECK_MODEL_TOL: f64 = 1e-3;
/// Central-difference step of the primitive suite.
pub const GRADCHECK_PRIMITIVE_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    Predict,
    Gradcheck,
    Bench,
    Synth,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Predict => "predict",
            Command::Gradcheck => "gradcheck",
            Command::Bench => "bench",
            Command::Synth => "synth",
        }
    }
}

/// Everything a command needs from the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub data_root: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    /// Overrides the `seed` key of the config file.
    pub seed: Option<u64>,
    pub threads: usize,
    /// Forces single-threaded, sequential execution.
    pub deterministic: bool,
}

impl RunConfig {
    pub fn new(command: Command, out: impl Into<PathBuf>) -> Self {
        RunConfig {
            command,
            config: None,
            data_root: None,
            checkpoint: None,
            out: out.into(),
            seed: None,
            threads: 1,
            deterministic: false,
        }
    }

    pub fn threads(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.threads.max(1)
        }
    }

    fn data_root(&self) -> Result<&Path> {
        self.data_root
            .as_deref()
            .ok_or_else(|| Error::Config(format!("{} needs --data-root", self.command.name())))
    }
}

/// Resolved settings shared by all commands.
struct Settings {
    kv: KeyValues,
    model: LoMaConfig,
    train: TrainConfig,
    seed: u64,
}

fn settings(rc: &RunConfig, kv: KeyValues) -> Result<Settings> {
    let known: Vec<&str> = MODEL_KEYS.iter().chain(TRAIN_KEYS).chain(RUN_KEYS).copied().collect();
    kv.check_known(&known)?;
    let seed = match rc.seed {
        Some(s) => s,
        None => kv.get_or("seed", 0u64)?,
    };
    let mut model = LoMaConfig::from_kv(&kv)?;
    model.seed = seed;
    let mut train = TrainConfig::from_kv(&kv)?;
    train.seed = seed;
    train.threads = rc.threads();
    Ok(Settings { kv, model, train, seed })
}

fn load_settings(rc: &RunConfig) -> Result<Settings> {
    let kv = match &rc.config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::default(),
    };
    settings(rc, kv)
}

fn precision(kv: &KeyValues) -> Result<Precision> {
    match kv.get_str("precision").unwrap_or("single") {
        "single" | "f32" => Ok(Precision::Single),
        "double" | "f64" => Ok(Precision::Double),
        other => Err(Error::Config(format!("unknown precision '{other}' (single | double)"))),
    }
}

/// Writes `run_config.txt`: the resolved keys, preceded by the command line as comments.
fn write_run_config(rc: &RunConfig, s: &Settings, extra: &[(&str, String)]) -> Result<PathBuf> {
    let mut kv = s.model.to_kv();
    s.train.write_kv(&mut kv);
    for &key in RUN_KEYS {
        if let Some(v) = s.kv.get_str(key) {
            kv.set(key, v);
        }
    }
    for (k, v) in extra {
        kv.set(k, v);
    }
    kv.set("seed", s.seed);
    let opt = |p: &Option<PathBuf>| p.as_ref().map_or("-".to_string(), |p| p.display().to_string());
    let mut text = String::new();
    let _ = writeln!(text, "# command = {}", rc.command.name());
    let _ = writeln!(text, "# config = {}", opt(&rc.config));
    let _ = writeln!(text, "# data_root = {}", opt(&rc.data_root));
    let _ = writeln!(text, "# checkpoint = {}", opt(&rc.checkpoint));
    let _ = writeln!(text, "# threads = {}", rc.threads());
    let _ = writeln!(text, "# deterministic = {}", rc.deterministic);
    text += &kv.render();
    let path = rc.out.join("run_config.txt");
    write_text(&path, &text)?;
    Ok(path)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_manifest(rc: &RunConfig, kv: &KeyValues) -> Result<(PathBuf, Manifest)> {
    let root = rc.data_root()?.to_path_buf();
    let name: String = kv.get_or("manifest", "manifest.txt".to_string())?;
    let manifest = Manifest::load(&root.join(name), &root)?;
    if manifest.entries.is_empty() {
        return Err(Error::Config(format!("manifest under {} lists no images", root.display())));
    }
    Ok((root, manifest))
}

fn read_split(root: &Path, entries: &[&ManifestEntry]) -> Result<Vec<SampleRecord>> {
    entries.iter().enumerate().map(|(i, e)| read_record(root, e, i as u64)).collect()
}

fn check_sizes(records: &[SampleRecord], cfg: &LoMaConfig, what: &str) -> Result<()> {
    match records.iter().find(|r| (r.height, r.width) != (cfg.height, cfg.width)) {
        Some(r) => Err(Error::Config(format!(
            "{what} image is {}x{}, config expects {}x{}",
            r.height, r.width, cfg.height, cfg.width
        ))),
        None => Ok(()),
    }
}

/// Dispatches on `rc.command`; returns a short human-readable summary.
pub fn run(rc: &RunConfig) -> Result<String> {
    match rc.command {
        Command::Train => run_train(rc),
        Command::Eval => run_eval(rc).map(|r| r.to_csv()),
        Command::Predict => run_predict(rc).map(|n| format!("wrote probability maps and masks for {n} images\n")),
        Command::Gradcheck => run_gradcheck(rc),
        Command::Bench => run_bench(rc),
        Command::Synth => run_synth(rc),
    }
}

/// Trains on the `train_split` entries, selecting the epoch with the best F1 on `val_split`.
///
/// Writes the best checkpoint (`--checkpoint`, else `<out>/checkpoint.bin`) and `train_log.csv`.
pub fn run_train(rc: &RunConfig) -> Result<String> {
    let s = load_settings(rc)?;
    let (root, manifest) = load_manifest(rc, &s.kv)?;
    let train_tag: String = s.kv.get_or("train_split", "train".to_string())?;
    let val_tag: String = s.kv.get_or("val_split", "val".to_string())?;
    let pick = |tag: &str| -> Result<Vec<SampleRecord>> {
        let entries = manifest.split(tag);
        if entries.is_empty() {
            return Err(Error::Config(format!("manifest has no '{tag}' entries")));
        }
        if let Some(e) = entries.iter().find(|e| e.mask.is_none()) {
            return Err(Error::Config(format!("{} in split '{tag}' has no mask", e.image.display())));
        }
        let records = read_split(&root, &entries)?;
        check_sizes(&records, &s.model, tag)?;
        Ok(records)
    };
    let train = pick(&train_tag)?;
    let val = pick(&val_tag)?;
    let ck_path = rc.checkpoint.clone().unwrap_or_else(|| checkpoint_path(&rc.out));
    std::fs::create_dir_all(&rc.out).map_err(|e| Error::io(&rc.out, e))?;
    write_run_config(rc, &s, &[])?;
    let (history, best_epoch) = match precision(&s.kv)? {
        Precision::Single => train_and_save::<f32>(&s, &train, &val, &ck_path)?,
        Precision::Double => train_and_save::<f64>(&s, &train, &val, &ck_path)?,
    };
    let mut lines = vec![EpochLog::CSV_HEADER.to_string()];
    lines.extend(history.iter().map(EpochLog::csv));
    write_lines(&rc.out.join("train_log.csv"), &lines)?;
    let best = &history[best_epoch - 1];
    Ok(format!(
        "trained {} epochs on {} images; best epoch {best_epoch} with val F1 {:.4}, IoU {:.4}; checkpoint {}\n",
        history.len(),
        train.len(),
        best.val_f1,
        best.val_iou,
        ck_path.display()
    ))
}

fn train_and_save<T: Real>(
    s: &Settings,
    train: &[SampleRecord],
    val: &[SampleRecord],
    ck_path: &Path,
) -> Result<(Vec<EpochLog>, usize)> {
    let out = fit::<T>(&s.model, &s.train, train, val, |_| {})?;
    out.best.store.to_checkpoint(&s.model.arch_hash()).save(ck_path)?;
    Ok((out.history, out.best_epoch))
}

/// Config used to read a checkpoint: `--config`, else the `run_config.txt` beside it.
fn checkpoint_settings(rc: &RunConfig) -> Result<(Settings, PathBuf)> {
    let ck = rc.checkpoint.clone().ok_or_else(|| Error::Config(format!("{} needs --checkpoint", rc.command.name())))?;
    let kv = match &rc.config {
        Some(p) => KeyValues::load(p)?,
        None => {
            let beside = ck.parent().unwrap_or(Path::new(".")).join("run_config.txt");
            if !beside.is_file() {
                return Err(Error::Config(format!(
                    "no --config given and no run_config.txt next to {}",
                    ck.display()
                )));
            }
            KeyValues::load(&beside)?
        }
    };
    Ok((settings(rc, kv)?, ck))
}

/// A model of either precision restored from a checkpoint.
enum Loaded {
    Single(Model<f32>),
    Double(Model<f64>),
}

impl Loaded {
    fn predict(&self, records: &[SampleRecord], threads: usize) -> Result<Vec<Vec<f64>>> {
        match self {
            Loaded::Single(m) => predict_records(m, records, 8, threads),
            Loaded::Double(m) => predict_records(m, records, 8, threads),
        }
    }
}

fn restore<T: Real>(cfg: &LoMaConfig, path: &Path) -> Result<Model<T>> {
    let mut model = build::<T>(cfg)?;
    model.store.load_checkpoint(&Checkpoint::<T>::load(path)?)?;
    Ok(model)
}

fn load_model(cfg: &LoMaConfig, path: &Path) -> Result<Loaded> {
    let header = Header::read(path)?;
    if header.config_hash != cfg.arch_hash() {
        return Err(Error::Checkpoint(format!(
            "{} was written for architecture {}, the config describes {}",
            path.display(),
            header.config_hash,
            cfg.arch_hash()
        )));
    }
    Ok(match header.precision {
        Precision::Single => Loaded::Single(restore(cfg, path)?),
        Precision::Double => Loaded::Double(restore(cfg, path)?),
    })
}

fn eval_tags(kv: &KeyValues, manifest: &Manifest) -> Result<Vec<String>> {
    let tags: Vec<String> = match kv.get_str("eval_splits") {
        Some(list) => list.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect(),
        None => manifest.splits(),
    };
    if let Some(t) = tags.iter().find(|t| manifest.split(t).is_empty()) {
        return Err(Error::Config(format!("manifest has no '{t}' entries")));
    }
    Ok(tags)
}

/// Scores every evaluation split as its own dataset and averages across them.
///
/// With `oracle = true` the ground-truth masks stand in for predictions and no
/// checkpoint is read. Writes `<out>/eval.csv`.
pub fn run_eval(rc: &RunConfig) -> Result<EvalResult> {
    let oracle = match &rc.config {
        Some(p) => KeyValues::load(p)?.get_or("oracle", false)?,
        None => false,
    };
    let (s, model) = if oracle {
        (load_settings(rc)?, None)
    } else {
        let (s, ck) = checkpoint_settings(rc)?;
        let m = load_model(&s.model, &ck)?;
        (s, Some(m))
    };
    let (root, manifest) = load_manifest(rc, &s.kv)?;
    let tags = eval_tags(&s.kv, &manifest)?;
    write_run_config(rc, &s, &[])?;
    let mut scored = Vec::new();
    for tag in &tags {
        let entries = manifest.split(tag);
        if let Some(e) = entries.iter().find(|e| e.mask.is_none()) {
            return Err(Error::Config(format!("{} in split '{tag}' has no mask; use predict", e.image.display())));
        }
        let records = read_split(&root, &entries)?;
        let probs = match &model {
            Some(m) => {
                check_sizes(&records, &s.model, tag)?;
                m.predict(&records, rc.threads())?
            }
            None => records.iter().map(|r| r.mask.iter().map(|&v| v as f64).collect()).collect(),
        };
        for (p, r) in probs.iter().zip(&records) {
            let g: Vec<f64> = r.mask.iter().map(|&v| v as f64).collect();
            scored.push((tag.clone(), pixel_scores(p, &g, THRESHOLD)?));
        }
    }
    let result = dataset_average(scored)?;
    write_text(&rc.out.join("eval.csv"), &result.to_csv())?;
    Ok(result)
}

/// Writes `<out>/prob/<image path>` and `<out>/mask/<image path>` for every
/// manifest entry in the evaluation splits; masks in the manifest are ignored.
pub fn run_predict(rc: &RunConfig) -> Result<usize> {
    let (s, ck) = checkpoint_settings(rc)?;
    let model = load_model(&s.model, &ck)?;
    let (root, manifest) = load_manifest(rc, &s.kv)?;
    let tags = eval_tags(&s.kv, &manifest)?;
    write_run_config(rc, &s, &[])?;
    let mut count = 0;
    for tag in &tags {
        let entries: Vec<ManifestEntry> =
            manifest.split(tag).into_iter().map(|e| ManifestEntry { mask: None, ..e.clone() }).collect();
        let refs: Vec<&ManifestEntry> = entries.iter().collect();
        let records = read_split(&root, &refs)?;
        check_sizes(&records, &s.model, tag)?;
        let probs = model.predict(&records, rc.threads())?;
        for ((e, r), p) in entries.iter().zip(&records).zip(&probs) {
            let prob: Vec<f32> = p.iter().map(|&v| v as f32).collect();
            let mask: Vec<u8> = p.iter().map(|&v| u8::from(v >= THRESHOLD)).collect();
            write_gray(&rc.out.join("prob").join(&e.image), r.height, r.width, &prob)?;
            write_mask(&rc.out.join("mask").join(&e.image), r.height, r.width, &mask)?;
            count += 1;
        }
    }
    Ok(count)
}

/// One row of the gradient-check report.
#[derive(Debug, Clone)]
pub struct GradcheckRow {
    pub group: &'static str,
    pub check: PrimitiveCheck,
    pub tolerance: f64,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.check.max_rel_error <= self.tolerance
    }
}

pub fn gradcheck_csv(rows: &[GradcheckRow]) -> String {
    let mut s = String::from("group,check,coords,max_rel_error,tolerance,status\n");
    for r in rows {
        let status = if r.passed() { "pass" } else { "FAIL" };
        let _ = writeln!(
            s,
            "{},{},{},{:.3e},{:.0e},{status}",
            r.group, r.check.name, r.check.checked, r.check.max_rel_error, r.tolerance
        );
    }
    s
}

/// Settings of the end-to-end model check.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckConfig {
    pub size: usize,
    pub batch: usize,
    pub coords_per_tensor: usize,
    /// Step of the model check. Smaller steps drown the scan parameters in
    /// loss roundoff, larger ones start crossing ReLU kinks.
    pub epsilon: f64,
    /// Scale of the parameter noise applied before checking, see [`jitter_params`].
    pub jitter: f64,
}

impl Default for ModelCheckConfig {
    fn default() -> Self {
        ModelCheckConfig { size: 32, batch: 2, coords_per_tensor: 2, epsilon: 3e-5, jitter: 0.05 }
    }
}

/// Primitive suite plus the end-to-end check of `model_cfg` (built in double
/// precision at `mc.size`) on synthetic samples.
pub fn gradcheck_rows(model_cfg: &LoMaConfig, mc: &ModelCheckConfig, seed: u64) -> Result<Vec<GradcheckRow>> {
    let mut rows: Vec<GradcheckRow> = primitive_suite(seed, GRADCHECK_PRIMITIVE_EPSILON)?
        .into_iter()
        .map(|check| GradcheckRow { group: "primitive", check, tolerance: GRADCHECK_PRIMITIVE_TOL })
        .collect();
    let cfg = model_cfg.clone().with_size(mc.size, mc.size);
    let mut model = build::<f64>(&cfg)?;
    jitter_params(&mut model.store, mc.jitter, seed)?;
    let synth = SynthConfig { size: mc.size, ..SynthConfig::default() };
    let records = synth_generate_with(seed, 0, mc.batch.max(1), &synth)?;
    let refs: Vec<&SampleRecord> = records.iter().collect();
    let (images, masks) = batch_tensors::<f64>(&refs)?;
    for check in model_grad_check(&model, &images, &masks, mc.coords_per_tensor, mc.epsilon, seed)? {
        rows.push(GradcheckRow { group: "model", check, tolerance: GRADCHECK_MODEL_TOL });
    }
    Ok(rows)
}

/// Writes `<out>/gradcheck.csv`; fails when any row exceeds its tolerance.
pub fn run_gradcheck(rc: &RunConfig) -> Result<String> {
    let s = load_settings(rc)?;
    let d = ModelCheckConfig::default();
    let mc = ModelCheckConfig {
        size: s.kv.get_or("gradcheck_size", d.size)?,
        batch: s.kv.get_or("gradcheck_batch", d.batch)?,
        coords_per_tensor: s.kv.get_or("gradcheck_coords", d.coords_per_tensor)?,
        epsilon: s.kv.get_or("gradcheck_epsilon", d.epsilon)?,
        jitter: s.kv.get_or("gradcheck_jitter", d.jitter)?,
    };
    write_run_config(rc, &s, &[])?;
    let rows = gradcheck_rows(&s.model, &mc, s.seed)?;
    let table = gradcheck_csv(&rows);
    write_text(&rc.out.join("gradcheck.csv"), &table)?;
    let failed: Vec<&GradcheckRow> = rows.iter().filter(|r| !r.passed()).collect();
    if let Some(worst) = failed.iter().max_by(|a, b| a.check.max_rel_error.total_cmp(&b.check.max_rel_error)) {
        return Err(Error::Numeric {
            op: "gradcheck",
            detail: format!(
                "{} of {} checks above tolerance, worst {} at {:.3e}",
                failed.len(),
                rows.len(),
                worst.check.name,
                worst.check.max_rel_error
            ),
        });
    }
    let worst = |group: &str| rows.iter().filter(|r| r.group == group).map(|r| r.check.max_rel_error).fold(0.0, f64::max);
    Ok(format!(
        "{} checks passed; worst primitive {:.3e}, worst model {:.3e}\n",
        rows.len(),
        worst("primitive"),
        worst("model")
    ))
}

/// Writes `<out>/bench.csv` (scan against attention) and `<out>/op_count.csv`.
pub fn run_bench(rc: &RunConfig) -> Result<String> {
    let s = load_settings(rc)?;
    let d = BenchConfig::default();
    let lengths = match s.kv.get_str("bench_lengths") {
        Some(list) => list
            .split(',')
            .map(|v| v.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Config(format!("bad list '{list}' for 'bench_lengths'")))?,
        None => d.lengths.clone(),
    };
    let cfg = BenchConfig {
        lengths,
        channels: s.kv.get_or("bench_channels", d.channels)?,
        state: s.kv.get_or("bench_state", d.state)?,
        trials: s.kv.get_or("bench_trials", d.trials)?,
        min_trial: Duration::from_millis(40),
        seed: s.seed,
    };
    write_run_config(rc, &s, &[("bench_lengths", join(&cfg.lengths))])?;
    let timing = timing_csv(&timing_table(&cfg)?);
    let (h, w) = (s.model.height, s.model.width);
    let ops = op_count_csv(&op_count_table(&s.model, &[(h, w), (2 * h, 2 * w)])?);
    write_text(&rc.out.join("bench.csv"), &timing)?;
    write_text(&rc.out.join("op_count.csv"), &ops)?;
    Ok(format!("{timing}\n{ops}"))
}

/// Writes a synthetic dataset with `train`, `val` and `test` splits and its
/// `manifest.txt` under `--out`.
pub fn run_synth(rc: &RunConfig) -> Result<String> {
    let s = load_settings(rc)?;
    if s.model.height != s.model.width {
        return Err(Error::Config("synthetic images are square; set height = width".into()));
    }
    let synth = SynthConfig { size: s.model.height, ..SynthConfig::default() };
    let counts = [
        ("train", 0, s.kv.get_or("synth_train", 500usize)?),
        ("val", SYNTH_VAL_STREAM, s.kv.get_or("synth_val", 50usize)?),
        ("test", SYNTH_TEST_STREAM, s.kv.get_or("synth_test", 100usize)?),
    ];
    write_run_config(rc, &s, &[])?;
    let mut manifest = Manifest::default();
    for (tag, first, count) in counts {
        if count == 0 {
            continue;
        }
        let records = synth_generate_with(s.seed, first, count, &synth)?;
        manifest.entries.extend(write_records(&rc.out, tag, &records)?);
    }
    write_text(&rc.out.join("manifest.txt"), &manifest.render())?;
    Ok(format!("wrote {} images to {}\n", manifest.entries.len(), rc.out.display()))
}
