//! Trains the tiny configuration on freshly generated synthetic forgeries.
//!
//! `cargo run --release --example train_tiny -- [train_count] [epochs] [seed] [lr] [augment] [cab|mlp]`

use std::time::Instant;

use loma::cli::{SYNTH_TEST_STREAM, SYNTH_VAL_STREAM};
use loma::data::{synth_generate_with, AugOp, SynthConfig};
use loma::model::LoMaConfig;
use loma::train::{evaluate, fit, EpochLog, TrainConfig};

fn main() -> loma::Result<()> {
    let raw: Vec<String> = std::env::args().skip(1).collect();
    let num = |i: usize, d: u64| raw.get(i).map_or(d, |a| a.parse().expect("numeric argument"));
    let n_train = num(0, 200) as usize;
    let epochs = num(1, 5) as usize;
    let seed = num(2, 0);
    let lr: f64 = raw.get(3).map_or(TrainConfig::default().lr, |a| a.parse().expect("numeric lr"));
    let augment = match raw.get(4) {
        Some(list) => AugOp::parse_list(list)?,
        None => TrainConfig::default().augment,
    };

    let synth = SynthConfig::default();
    let train = synth_generate_with(seed, 0, n_train, &synth)?;
    let val = synth_generate_with(seed, SYNTH_VAL_STREAM, 50, &synth)?;
    let test = synth_generate_with(seed, SYNTH_TEST_STREAM, 100, &synth)?;

    let use_cab = raw.get(5).is_none_or(|m| m != "mlp");
    let model_cfg = LoMaConfig { seed, use_cab, ..LoMaConfig::tiny() };
    let cfg = TrainConfig { epochs, seed, lr, augment, ..TrainConfig::default() };
    let start = Instant::now();
    println!("{}", EpochLog::CSV_HEADER);
    let out = fit::<f32>(&model_cfg, &cfg, &train, &val, |log| {
        println!("{}  ({:.1}s)", log.csv(), start.elapsed().as_secs_f64());
    })?;
    let res = evaluate(&out.best, &test, "test", 1)?;
    println!("best epoch {}: held-out F1 {:.4}, IoU {:.4}", out.best_epoch, res.f1, res.iou);
    Ok(())
}
