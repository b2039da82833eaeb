//! Wall-clock scaling of the selective scan against dense softmax attention.

use std::time::{Duration, Instant};

use rand::Rng;

use crate::error::Result;
use crate::model::{build, LoMaConfig};
use crate::nn::seeded_rng;
use crate::ssm::{selective_scan, InputDiscretization, ScanInputs};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    /// Inner channels of the scan and head width of the attention reference.
    pub channels: usize,
    pub state: usize,
    /// Independent timing trials; the fastest one is reported.
    pub trials: usize,
    /// Each trial repeats the kernel until at least this much time has passed.
    pub min_trial: Duration,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lengths: vec![1024, 2048, 4096, 8192],
            channels: 16,
            state: 16,
            trials: 5,
            min_trial: Duration::from_millis(40),
            seed: 0,
        }
    }
}

/// Single-head `softmax(q·kᵀ/√d)·v` for `[len, dim]` operands, one query row at a time.
pub fn attention_reference(q: &[f32], k: &[f32], v: &[f32], len: usize, dim: usize) -> Vec<f32> {
    let scale = 1.0 / (dim as f32).sqrt();
    let mut out = vec![0.0; len * dim];
    let mut scores = vec![0.0f32; len];
    for i in 0..len {
        let qi = &q[i * dim..(i + 1) * dim];
        let mut max = f32::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = &k[j * dim..(j + 1) * dim];
            *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
            max = max.max(*s);
        }
        let mut total = 0.0;
        for s in &mut scores {
            *s = (*s - max).exp();
            total += *s;
        }
        let oi = &mut out[i * dim..(i + 1) * dim];
        for (j, &s) in scores.iter().enumerate() {
            let w = s / total;
            for (o, &vv) in oi.iter_mut().zip(&v[j * dim..(j + 1) * dim]) {
                *o += w * vv;
            }
        }
    }
    out
}

/// Fastest per-call time of `f` over `trials` trials.
fn time_min(trials: usize, min_trial: Duration, mut f: impl FnMut()) -> f64 {
    f();
    let mut best = f64::INFINITY;
    for _ in 0..trials.max(1) {
        let start = Instant::now();
        let mut calls = 0u32;
        while calls == 0 || start.elapsed() < min_trial {
            f();
            calls += 1;
        }
        best = best.min(start.elapsed().as_secs_f64() / calls as f64);
    }
    best
}

fn uniform(rng: &mut impl Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Seconds per selective scan over one sequence of `len` steps.
pub fn time_scan(cfg: &BenchConfig, len: usize) -> Result<f64> {
    let (d, n) = (cfg.channels, cfg.state);
    let mut rng = seeded_rng(cfg.seed, len as u64);
    let u = uniform(&mut rng, len * d, -1.0, 1.0);
    let delta = uniform(&mut rng, len * d, 0.01, 0.1);
    let a = uniform(&mut rng, d * n, -4.0, -0.5);
    let b = uniform(&mut rng, len * n, -1.0, 1.0);
    let c = uniform(&mut rng, len * n, -1.0, 1.0);
    let skip = uniform(&mut rng, d, -1.0, 1.0);
    let inp = ScanInputs::new(&u, &delta, &a, &b, &c, &skip)?;
    Ok(time_min(cfg.trials, cfg.min_trial, || {
        std::hint::black_box(selective_scan(&inp, InputDiscretization::ExactZoh).expect("validated inputs"));
    }))
}

/// Seconds per dense attention pass over `len` tokens.
pub fn time_attention(cfg: &BenchConfig, len: usize) -> f64 {
    let dim = cfg.channels;
    let mut rng = seeded_rng(cfg.seed, 1 << 40 | len as u64);
    let q = uniform(&mut rng, len * dim, -1.0, 1.0);
    let k = uniform(&mut rng, len * dim, -1.0, 1.0);
    let v = uniform(&mut rng, len * dim, -1.0, 1.0);
    time_min(cfg.trials, cfg.min_trial, || {
        std::hint::black_box(attention_reference(&q, &k, &v, len, dim));
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub kernel: &'static str,
    pub length: usize,
    pub seconds: f64,
    /// Time relative to the previous (half as long) length.
    pub ratio: Option<f64>,
}

pub fn timing_table(cfg: &BenchConfig) -> Result<Vec<TimingRow>> {
    let mut rows = Vec::new();
    for kernel in ["selective_scan", "attention"] {
        let mut prev: Option<(usize, f64)> = None;
        for &len in &cfg.lengths {
            let seconds = if kernel == "attention" { time_attention(cfg, len) } else { time_scan(cfg, len)? };
            let ratio = prev.filter(|&(l, _)| l * 2 == len).map(|(_, t)| seconds / t);
            rows.push(TimingRow { kernel, length: len, seconds, ratio });
            prev = Some((len, seconds));
        }
    }
    Ok(rows)
}

/// Multiply-accumulate count of `cfg` at `(h, w)` and at twice as many pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCountRow {
    pub height: usize,
    pub width: usize,
    pub macs: u64,
    pub doubled_macs: u64,
    pub ratio: f64,
}

pub fn op_count_table(cfg: &LoMaConfig, sizes: &[(usize, usize)]) -> Result<Vec<OpCountRow>> {
    let model = build::<f32>(cfg)?;
    Ok(sizes
        .iter()
        .map(|&(h, w)| {
            let macs = model.param_and_flop_report(h, w).macs;
            let doubled_macs = model.param_and_flop_report(h, 2 * w).macs;
            OpCountRow { height: h, width: w, macs, doubled_macs, ratio: doubled_macs as f64 / macs as f64 }
        })
        .collect())
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut s = String::from("kernel,length,seconds,ratio\n");
    for r in rows {
        let ratio = r.ratio.map_or(String::new(), |x| format!("{x:.3}"));
        s += &format!("{},{},{:.6e},{ratio}\n", r.kernel, r.length, r.seconds);
    }
    s
}

pub fn op_count_csv(rows: &[OpCountRow]) -> String {
    let mut s = String::from("height,width,macs,doubled_width_macs,ratio\n");
    for r in rows {
        s += &format!("{},{},{},{},{:.4}\n", r.height, r.width, r.macs, r.doubled_macs, r.ratio);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_of_identical_keys_averages_values() {
        let (len, dim) = (3, 2);
        let q = vec![0.3, -0.2, 1.0, 0.5, -0.7, 0.1];
        let k = vec![1.0; len * dim];
        let v = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let out = attention_reference(&q, &k, &v, len, dim);
        for row in out.chunks(dim) {
            assert!((row[0] - 3.0).abs() < 1e-6 && (row[1] - 4.0).abs() < 1e-6);
        }
    }

    #[test]
    fn op_count_doubles_with_pixels() {
        let rows = op_count_table(&LoMaConfig::tiny(), &[(64, 64), (96, 128)]).unwrap();
        for r in rows {
            assert!((1.9..=2.1).contains(&r.ratio), "{r:?}");
        }
    }
}
