//! Training losses and pixel-level localization scores.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DICE_EPS: f64 = 1.0;
pub const PROB_CLAMP: f64 = 1e-7;
pub const THRESHOLD: f64 = 0.5;

fn same_len(op: &str, p: usize, g: usize) -> Result<()> {
    if p != g {
        return Err(Error::contract(format!("{op}: prediction has {p} pixels, ground truth {g}")));
    }
    Ok(())
}

/// `1 − (2·Σ P·G + ε) / (Σ P + Σ G + ε)` with `ε = 1`.
pub fn dice_loss(p: &[f64], g: &[f64]) -> Result<f64> {
    dice_loss_with_eps(p, g, DICE_EPS)
}

pub fn dice_loss_with_eps(p: &[f64], g: &[f64], eps: f64) -> Result<f64> {
    same_len("dice_loss", p.len(), g.len())?;
    let inter: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    let (sp, sg): (f64, f64) = (p.iter().sum(), g.iter().sum());
    let den = sp + sg + eps;
    if den == 0.0 {
        return Err(Error::contract("dice_loss: zero denominator"));
    }
    Ok(1.0 - (2.0 * inter + eps) / den)
}

/// Mean of `−α_t (1 − p_t)^γ ln p_t` with probabilities clamped to `[1e-7, 1 − 1e-7]`.
pub fn focal_loss(p: &[f64], g: &[f64], alpha: f64, gamma: f64) -> Result<f64> {
    same_len("focal_loss", p.len(), g.len())?;
    if p.is_empty() {
        return Err(Error::contract("focal_loss: empty input"));
    }
    let total: f64 = p
        .iter()
        .zip(g)
        .map(|(&pv, &gv)| {
            let pv = pv.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let (pt, at) = if gv > 0.5 { (pv, alpha) } else { (1.0 - pv, 1.0 - alpha) };
            -at * (1.0 - pt).powf(gamma) * pt.ln()
        })
        .sum();
    Ok(total / p.len() as f64)
}

pub fn hybrid_loss(p: &[f64], g: &[f64], lambda_dice: f64, lambda_focal: f64, alpha: f64, gamma: f64) -> Result<f64> {
    if lambda_dice < 0.0 || lambda_focal < 0.0 {
        return Err(Error::contract("hybrid_loss: weights must be non-negative"));
    }
    let mut total = 0.0;
    if lambda_dice != 0.0 {
        total += lambda_dice * dice_loss(p, g)?;
    }
    if lambda_focal != 0.0 {
        total += lambda_focal * focal_loss(p, g, alpha, gamma)?;
    }
    Ok(total)
}

/// Loss weights and focal shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_dice: f64,
    pub lambda_focal: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_dice: 1.0, lambda_focal: 1.0, alpha: 0.25, gamma: 2.0 }
    }
}

/// Batch dice on the tape: per-image dice averaged over the leading axis.
pub fn dice_loss_graph<T: Real>(g: &mut Graph<T>, prob: Var, target: &Tensor<T>) -> Result<Var> {
    let batch = g.shape(prob)[0];
    let n = g.value(prob).len();
    same_len("dice_loss", n, target.numel())?;
    let px = n / batch;
    let tgt = g.constant(target.clone().reshaped([batch, px])?);
    let p = g.reshape(prob, &[batch, px])?;
    let inter = g.mul(p, tgt)?;
    let inter = g.sum_last(inter)?;
    let num = g.affine(inter, T::c(2.0), T::c(DICE_EPS))?;
    let sp = g.sum_last(p)?;
    let sg: Vec<T> = target.data().chunks_exact(px).map(|r| r.iter().copied().sum()).collect();
    let sg = g.constant(Tensor::new([batch, 1], sg)?);
    let den = g.add(sp, sg)?;
    let den = g.affine(den, T::one(), T::c(DICE_EPS))?;
    let ratio = g.div(num, den)?;
    let m = g.mean(ratio)?;
    g.affine(m, -T::one(), T::one())
}

/// Focal loss on the tape, averaged over every pixel.
pub fn focal_loss_graph<T: Real>(g: &mut Graph<T>, prob: Var, target: &Tensor<T>, alpha: f64, gamma: f64) -> Result<Var> {
    same_len("focal_loss", g.value(prob).len(), target.numel())?;
    let shape = g.shape(prob).to_vec();
    let tgt = target.clone().reshaped(shape.clone())?;
    let p = g.clamp(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    // p_t = p·(2G − 1) + (1 − G)
    let sign = Tensor::new(shape.clone(), tgt.data().iter().map(|&v| T::c(2.0) * v - T::one()).collect())?;
    let off = Tensor::new(shape.clone(), tgt.data().iter().map(|&v| T::one() - v).collect())?;
    let at = Tensor::new(
        shape,
        tgt.data().iter().map(|&v| if v > T::c(0.5) { T::c(alpha) } else { T::c(1.0 - alpha) }).collect(),
    )?;
    let (sign, off, at) = (g.constant(sign), g.constant(off), g.constant(at));
    let pt = g.mul(p, sign)?;
    let pt = g.add(pt, off)?;
    let logp = g.log(pt)?;
    let weighted = if gamma == 0.0 {
        logp
    } else {
        let q = g.affine(pt, -T::one(), T::one())?;
        let w = if gamma == 2.0 {
            g.mul(q, q)?
        } else {
            let lq = g.log(q)?;
            let lq = g.scale(lq, T::c(gamma))?;
            g.exp(lq)?
        };
        g.mul(w, logp)?
    };
    let terms = g.mul(weighted, at)?;
    let m = g.mean(terms)?;
    g.scale(m, -T::one())
}

pub fn hybrid_loss_graph<T: Real>(g: &mut Graph<T>, prob: Var, target: &Tensor<T>, cfg: &LossConfig) -> Result<Var> {
    if cfg.lambda_dice < 0.0 || cfg.lambda_focal < 0.0 {
        return Err(Error::contract("hybrid_loss: weights must be non-negative"));
    }
    let mut total: Option<Var> = None;
    if cfg.lambda_dice != 0.0 {
        let d = dice_loss_graph(g, prob, target)?;
        total = Some(g.scale(d, T::c(cfg.lambda_dice))?);
    }
    if cfg.lambda_focal != 0.0 {
        let f = focal_loss_graph(g, prob, target, cfg.alpha, cfg.gamma)?;
        let f = g.scale(f, T::c(cfg.lambda_focal))?;
        total = Some(match total {
            Some(d) => g.add(d, f)?,
            None => f,
        });
    }
    total.ok_or_else(|| Error::contract("hybrid_loss: both weights are zero"))
}

/// Scores of one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelScores {
    pub f1: f64,
    pub iou: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Binarizes `p` at `threshold` (inclusive) and scores it against `g`.
pub fn pixel_scores(p: &[f64], g: &[f64], threshold: f64) -> Result<PixelScores> {
    same_len("pixel_scores", p.len(), g.len())?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&pv, &gv) in p.iter().zip(g) {
        match (pv >= threshold, gv > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let (f1, iou) = if tp + fp + fn_ == 0 {
        (1.0, 1.0)
    } else {
        ((2 * tp) as f64 / (2 * tp + fp + fn_) as f64, tp as f64 / (tp + fp + fn_) as f64)
    };
    Ok(PixelScores { f1, iou, tp, fp, fn_ })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetScore {
    pub name: String,
    pub count: usize,
    pub f1: f64,
    pub iou: f64,
}

/// Per-image scores, per-dataset means, and the unweighted mean across datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub images: Vec<(String, PixelScores)>,
    pub datasets: Vec<DatasetScore>,
    pub f1: f64,
    pub iou: f64,
}

impl EvalResult {
    /// `dataset,count,f1,iou` rows followed by an `average` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,count,f1,iou\n");
        for d in &self.datasets {
            out.push_str(&format!("{},{},{:.4},{:.4}\n", d.name, d.count, d.f1, d.iou));
        }
        let total: usize = self.datasets.iter().map(|d| d.count).sum();
        out.push_str(&format!("average,{total},{:.4},{:.4}\n", self.f1, self.iou));
        out
    }
}

/// Averages per-image scores within each dataset, then across datasets without weighting.
pub fn dataset_average(images: Vec<(String, PixelScores)>) -> Result<EvalResult> {
    if images.is_empty() {
        return Err(Error::contract("dataset_average: no images"));
    }
    let mut groups: BTreeMap<&str, (usize, f64, f64)> = BTreeMap::new();
    for (name, s) in &images {
        let e = groups.entry(name.as_str()).or_default();
        e.0 += 1;
        e.1 += s.f1;
        e.2 += s.iou;
    }
    let datasets: Vec<DatasetScore> = groups
        .into_iter()
        .map(|(name, (n, f, i))| DatasetScore { name: name.to_string(), count: n, f1: f / n as f64, iou: i / n as f64 })
        .collect();
    let k = datasets.len() as f64;
    let f1 = datasets.iter().map(|d| d.f1).sum::<f64>() / k;
    let iou = datasets.iter().map(|d| d.iou).sum::<f64>() / k;
    Ok(EvalResult { images, datasets, f1, iou })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sets(n: usize, ones: std::ops::Range<usize>) -> Vec<f64> {
        (0..n).map(|i| if ones.contains(&i) { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn half_overlap_fixture() {
        let p = sets(400, 0..100);
        let g = sets(400, 50..150);
        let s = pixel_scores(&p, &g, THRESHOLD).unwrap();
        assert_eq!(s.f1, 0.5);
        assert!((s.iou - 1.0 / 3.0).abs() < 1e-15);
        // with ε = 1: 1 − 101/201
        assert!((dice_loss(&p, &g).unwrap() - (1.0 - 101.0 / 201.0)).abs() < 1e-12);
    }

    #[test]
    fn empty_conventions() {
        let z = vec![0.0; 16];
        assert_eq!(pixel_scores(&z, &z, 0.5).unwrap().f1, 1.0);
        let one = sets(16, 0..1);
        assert_eq!(pixel_scores(&one, &z, 0.5).unwrap().iou, 0.0);
        assert_eq!(pixel_scores(&z, &one, 0.5).unwrap().f1, 0.0);
        assert!(dataset_average(vec![]).is_err());
    }

    #[test]
    fn focal_half_bce() {
        let f = focal_loss(&[0.5], &[1.0], 0.5, 0.0).unwrap();
        assert!((f - 0.5 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn graph_losses_match_slices() {
        let p = [0.1, 0.7, 0.4, 0.95, 0.2, 0.5];
        let gt = [0.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        let mut g = Graph::<f64>::new();
        let pv = g.constant(Tensor::new([1, 2, 3, 1], p.to_vec()).unwrap());
        let t = Tensor::new([1, 2, 3, 1], gt.to_vec()).unwrap();
        let cfg = LossConfig::default();
        let l = hybrid_loss_graph(&mut g, pv, &t, &cfg).unwrap();
        let want = hybrid_loss(&p, &gt, 1.0, 1.0, 0.25, 2.0).unwrap();
        assert!((g.value(l)[0] - want).abs() < 1e-12);
    }
}
