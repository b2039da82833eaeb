//! Generates synthetic forgeries and writes them with a manifest, the layout
//! the `train`, `eval` and `predict` commands read.
//!
//! `cargo run --release --example synth_data -- <out_dir> [count] [seed]`

use std::path::PathBuf;

use loma::data::{synth_generate_with, write_records, Manifest, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let raw: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(raw.first().map_or("synth_out", String::as_str));
    let count: usize = raw.get(1).map_or(12, |a| a.parse().expect("count"));
    let seed: u64 = raw.get(2).map_or(0, |a| a.parse().expect("seed"));

    let records = synth_generate_with(seed, 0, count, &SynthConfig::default())?;
    for r in &records {
        println!("sample {:>3} {:<9} foreground {:.3}", r.meta.index, r.meta.kind.name(), r.foreground_fraction());
    }
    let manifest = Manifest { entries: write_records(&out, "train", &records)? };
    std::fs::write(out.join("manifest.txt"), manifest.render())?;
    println!("wrote {count} images and manifest.txt to {}", out.display());
    Ok(())
}
