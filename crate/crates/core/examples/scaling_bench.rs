//! Wall-clock of the selective scan against dense attention as the sequence
//! doubles, and the model's op count as the pixel count doubles.
//!
//! `cargo run --release --example scaling_bench -- [max_length]`

use loma::bench::{op_count_csv, op_count_table, timing_csv, timing_table, BenchConfig};
use loma::model::LoMaConfig;

fn main() -> loma::Result<()> {
    let max: usize = std::env::args().nth(1).map_or(8192, |a| a.parse().expect("length"));
    let lengths: Vec<usize> = (0..).map(|k| 512 << k).take_while(|&l| l <= max).collect();
    let cfg = BenchConfig { lengths, ..BenchConfig::default() };
    print!("{}", timing_csv(&timing_table(&cfg)?));
    println!();
    print!("{}", op_count_csv(&op_count_table(&LoMaConfig::tiny(), &[(64, 64), (128, 128), (256, 256)])?));
    Ok(())
}
