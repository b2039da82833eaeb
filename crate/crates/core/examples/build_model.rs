//! Builds the tiny localizer, prints its stage shapes, parameter count and
//! multiply-accumulates, and shows one prediction on a synthetic image.
//!
//! `cargo run --release --example build_model -- [height] [width] [cab|mlp]`

use loma::data::{synth_generate_with, SynthConfig};
use loma::model::{build, LoMaConfig};
use loma::nn::Ctx;
use loma::train::batch_tensors;

fn main() -> loma::Result<()> {
    let raw: Vec<String> = std::env::args().skip(1).collect();
    let h: usize = raw.first().map_or(64, |a| a.parse().expect("height"));
    let w: usize = raw.get(1).map_or(h, |a| a.parse().expect("width"));
    let use_cab = raw.get(2).is_none_or(|m| m != "mlp");
    let cfg = LoMaConfig { use_cab, ..LoMaConfig::tiny() }.with_size(h, w);
    let model = build::<f32>(&cfg)?;

    let report = model.param_and_flop_report(h, w);
    println!("architecture {} ({})", cfg.arch_hash(), if use_cab { "channel attention" } else { "MLP mixer" });
    println!("parameters {} (analytic {}), MACs {}", report.params, model.analytic_param_count(), report.macs);

    let synth = SynthConfig { size: h.min(w), ..SynthConfig::default() };
    if h == w {
        let rec = synth_generate_with(0, 0, 1, &synth)?;
        let (x, _) = batch_tensors::<f32>(&rec.iter().collect::<Vec<_>>())?;
        let mut ctx = Ctx::inference(&model.store);
        let xv = ctx.g.constant(x);
        let out = model.forward(&mut ctx, xv)?;
        for (i, s) in out.stages.iter().enumerate() {
            println!("stage {} output {:?}", i + 1, ctx.g.shape(*s));
        }
        let p = ctx.g.value(out.prob);
        let mean = p.iter().map(|&v| v as f64).sum::<f64>() / p.len() as f64;
        println!("probability map {:?}, mean {mean:.4} before training", ctx.g.shape(out.prob));
    }
    Ok(())
}
