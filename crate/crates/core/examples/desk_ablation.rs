//! Channel attention against the MLP mixer on synthetic forgeries: three
//! seeds per arm with the desk schedule, scored on held-out samples.
//! Takes roughly half an hour on one core.
//!
//! `cargo run --release --example desk_ablation -- [train_count] [seeds]`

use loma::train::{desk_run, DeskProtocol};

fn main() -> loma::Result<()> {
    let raw: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("count")).collect();
    let protocol = DeskProtocol { train: raw.first().copied().unwrap_or(500), ..DeskProtocol::default() };
    let seeds = raw.get(1).copied().unwrap_or(3) as u64;
    println!("arm,seed,best_epoch,test_f1,test_iou,seconds");
    let mut means = Vec::new();
    for use_cab in [true, false] {
        let arm = if use_cab { "cab" } else { "mlp" };
        let mut total = 0.0;
        for seed in 0..seeds {
            let r = desk_run(&protocol, seed, use_cab, |log| eprintln!("{arm} seed {seed}: {}", log.csv()))?;
            println!("{arm},{seed},{},{:.4},{:.4},{:.0}", r.best_epoch, r.test.f1, r.test.iou, r.seconds);
            total += r.test.f1;
        }
        means.push((arm, total / seeds as f64));
    }
    for (arm, m) in means {
        println!("# {arm} mean F1 {m:.4}");
    }
    Ok(())
}
