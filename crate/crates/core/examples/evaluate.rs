//! Pixel F1/IoU and the hybrid loss on hand-made masks, then the
//! per-dataset averaging used by `eval`.

use loma::loss_metrics::{dataset_average, dice_loss, focal_loss, hybrid_loss, pixel_scores, LossConfig, THRESHOLD};

fn square(size: usize, r0: usize, c0: usize, side: usize) -> Vec<f64> {
    (0..size * size)
        .map(|i| {
            let (r, c) = (i / size, i % size);
            f64::from(u8::from((r0..r0 + side).contains(&r) && (c0..c0 + side).contains(&c)))
        })
        .collect()
}

fn main() -> loma::Result<()> {
    let truth = square(32, 8, 8, 12);
    let cfg = LossConfig::default();
    let mut scored = Vec::new();
    for (shift, dataset) in [(0, "exact"), (3, "shifted"), (6, "shifted"), (20, "missed")] {
        let pred = square(32, 8 + shift, 8, 12);
        // soften the prediction so the losses see probabilities
        let soft: Vec<f64> = pred.iter().map(|&p| 0.1 + 0.8 * p).collect();
        let s = pixel_scores(&soft, &truth, THRESHOLD)?;
        println!(
            "shift {shift:>2}: F1 {:.4} IoU {:.4}  dice {:.4} focal {:.4} hybrid {:.4}",
            s.f1,
            s.iou,
            dice_loss(&soft, &truth)?,
            focal_loss(&soft, &truth, cfg.alpha, cfg.gamma)?,
            hybrid_loss(&soft, &truth, cfg.lambda_dice, cfg.lambda_focal, cfg.alpha, cfg.gamma)?
        );
        scored.push((dataset.to_string(), s));
    }
    print!("{}", dataset_average(scored)?.to_csv());
    Ok(())
}
