//! The full localization network: patch embedding, two mixed-SSM stages,
//! two inverted-residual stages, and the multi-scale decoder.

use sha2::{Digest, Sha256};

use crate::autodiff::Var;
use crate::blocks::{
    DecoderOutput, Downsample, InvertedResidual, MixedSsmBlock, MixedSsmBlockConfig, MlpDecoder, PatchEmbed, PATCH,
    PIPELINE_DIVISOR,
};
use crate::config::{join, KeyValues};
use crate::error::{Error, Result};
use crate::nn::{seeded_rng, Builder, Ctx, ParamStore};
use crate::ssm::InputDiscretization;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LoMaConfig {
    pub depths: [usize; 4],
    pub channels: [usize; 4],
    pub state_size: usize,
    pub ssm_expansion: usize,
    pub ir_expansion: usize,
    pub cab_reduction: usize,
    pub decoder_embed: usize,
    pub height: usize,
    pub width: usize,
    pub use_cab: bool,
    pub atrous: bool,
    pub discretization: InputDiscretization,
    pub lambda_dice: f64,
    pub lambda_focal: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub seed: u64,
}

impl Default for LoMaConfig {
    fn default() -> Self {
        LoMaConfig {
            depths: [2, 2, 9, 2],
            channels: [48, 96, 192, 384],
            state_size: 16,
            ssm_expansion: 2,
            ir_expansion: 4,
            cab_reduction: 16,
            decoder_embed: 128,
            height: 512,
            width: 512,
            use_cab: true,
            atrous: true,
            discretization: InputDiscretization::ExactZoh,
            lambda_dice: 1.0,
            lambda_focal: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            seed: 0,
        }
    }
}

/// Keys recognised by [`LoMaConfig::from_kv`].
pub const MODEL_KEYS: &[&str] = &[
    "preset",
    "depths",
    "channels",
    "state_size",
    "ssm_expansion",
    "ir_expansion",
    "cab_reduction",
    "decoder_embed",
    "height",
    "width",
    "use_cab",
    "atrous",
    "discretization",
    "lambda_dice",
    "lambda_focal",
    "focal_alpha",
    "focal_gamma",
    "seed",
];

impl LoMaConfig {
    /// Desk-scale configuration at 64×64.
    pub fn tiny() -> Self {
        LoMaConfig {
            channels: [8, 16, 32, 64],
            state_size: 4,
            cab_reduction: 4,
            decoder_embed: 32,
            height: 64,
            width: 64,
            ..Self::default()
        }
    }

    pub fn with_size(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract(m));
        if self.depths.contains(&0) {
            return bad(format!("depths must be positive, got {:?}", self.depths));
        }
        if self.channels.contains(&0) || self.state_size == 0 || self.ssm_expansion == 0 || self.ir_expansion == 0 {
            return bad("channels, state_size and expansions must be positive".into());
        }
        if self.decoder_embed == 0 {
            return bad("decoder_embed must be positive".into());
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(PIPELINE_DIVISOR) || !self.width.is_multiple_of(PIPELINE_DIVISOR) {
            return bad(format!(
                "input {}x{}: height and width must be positive multiples of {PIPELINE_DIVISOR}",
                self.height, self.width
            ));
        }
        for &c in &self.channels[..2] {
            if self.cab_reduction == 0 || c % self.cab_reduction != 0 {
                return bad(format!("SSM stage width {c} is not divisible by cab_reduction {}", self.cab_reduction));
            }
        }
        if self.lambda_dice < 0.0 || self.lambda_focal < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) || self.focal_gamma < 0.0 {
            return bad("focal alpha must lie in [0, 1] and gamma be non-negative".into());
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let base = match kv.get_str("preset").unwrap_or("tiny") {
            "tiny" => Self::tiny(),
            "default" => Self::default(),
            other => return Err(Error::Config(format!("unknown preset '{other}' (tiny | default)"))),
        };
        let disc = match kv.get_str("discretization") {
            None => base.discretization,
            Some(s) => InputDiscretization::parse(s)
                .ok_or_else(|| Error::Config(format!("unknown discretization '{s}' (exact | simplified)")))?,
        };
        let cfg = LoMaConfig {
            depths: kv.get_array("depths", base.depths)?,
            channels: kv.get_array("channels", base.channels)?,
            state_size: kv.get_or("state_size", base.state_size)?,
            ssm_expansion: kv.get_or("ssm_expansion", base.ssm_expansion)?,
            ir_expansion: kv.get_or("ir_expansion", base.ir_expansion)?,
            cab_reduction: kv.get_or("cab_reduction", base.cab_reduction)?,
            decoder_embed: kv.get_or("decoder_embed", base.decoder_embed)?,
            height: kv.get_or("height", base.height)?,
            width: kv.get_or("width", base.width)?,
            use_cab: kv.get_or("use_cab", base.use_cab)?,
            atrous: kv.get_or("atrous", base.atrous)?,
            discretization: disc,
            lambda_dice: kv.get_or("lambda_dice", base.lambda_dice)?,
            lambda_focal: kv.get_or("lambda_focal", base.lambda_focal)?,
            focal_alpha: kv.get_or("focal_alpha", base.focal_alpha)?,
            focal_gamma: kv.get_or("focal_gamma", base.focal_gamma)?,
            seed: kv.get_or("seed", base.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("depths", join(&self.depths));
        kv.set("channels", join(&self.channels));
        kv.set("state_size", self.state_size);
        kv.set("ssm_expansion", self.ssm_expansion);
        kv.set("ir_expansion", self.ir_expansion);
        kv.set("cab_reduction", self.cab_reduction);
        kv.set("decoder_embed", self.decoder_embed);
        kv.set("height", self.height);
        kv.set("width", self.width);
        kv.set("use_cab", self.use_cab);
        kv.set("atrous", self.atrous);
        kv.set("discretization", self.discretization.name());
        kv.set("lambda_dice", self.lambda_dice);
        kv.set("lambda_focal", self.lambda_focal);
        kv.set("focal_alpha", self.focal_alpha);
        kv.set("focal_gamma", self.focal_gamma);
        kv.set("seed", self.seed);
        kv
    }

    /// Digest of the fields that determine parameter names and shapes.
    pub fn arch_hash(&self) -> String {
        let arch = format!(
            "depths={:?};channels={:?};state={};ssm_exp={};ir_exp={};cab={};use_cab={};embed={}",
            self.depths,
            self.channels,
            self.state_size,
            self.ssm_expansion,
            self.ir_expansion,
            self.cab_reduction,
            self.use_cab,
            self.decoder_embed
        );
        let digest = Sha256::digest(arch.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn block_config(&self, stage: usize) -> MixedSsmBlockConfig {
        MixedSsmBlockConfig {
            channels: self.channels[stage],
            state_size: self.state_size,
            expansion: self.ssm_expansion,
            cab_reduction: self.cab_reduction,
            use_cab: self.use_cab,
            atrous: self.atrous,
            discretization: self.discretization,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Stage {
    Ssm(Vec<MixedSsmBlock>),
    Cnn(Vec<InvertedResidual>),
}

#[derive(Debug, Clone)]
pub struct Network {
    pub embed: PatchEmbed,
    /// Stage transitions 1→2, 2→3 and 3→4.
    pub downs: Vec<Downsample>,
    pub stages: Vec<Stage>,
    pub decoder: MlpDecoder,
}

#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub cfg: LoMaConfig,
    pub net: Network,
    pub store: ParamStore<T>,
}

/// Stage features `X1..X4` and the decoder output.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    pub stages: [Var; 4],
    pub logits: Var,
    pub prob: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopReport {
    pub params: usize,
    pub macs: u64,
}

pub fn build<T: Real>(cfg: &LoMaConfig) -> Result<Model<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(cfg.seed, 0);
    let mut b = Builder::new(&mut store, &mut rng);
    let embed = PatchEmbed::new(&mut b.scope("embed"), cfg.channels[0])?;
    let mut stages = Vec::with_capacity(4);
    let mut downs = Vec::with_capacity(3);
    for s in 0..4 {
        if s > 0 {
            downs.push(Downsample::new(
                &mut b.scope(&format!("down{s}")),
                cfg.channels[s - 1],
                cfg.channels[s],
                s >= 2,
            )?);
        }
        let mut sb = b.scope(&format!("stage{}", s + 1));
        stages.push(if s < 2 {
            Stage::Ssm(
                (0..cfg.depths[s])
                    .map(|i| MixedSsmBlock::new(&mut sb.scope(&format!("block{i}")), cfg.block_config(s)))
                    .collect::<Result<_>>()?,
            )
        } else {
            Stage::Cnn(
                (0..cfg.depths[s])
                    .map(|i| InvertedResidual::new(&mut sb.scope(&format!("block{i}")), cfg.channels[s], cfg.ir_expansion))
                    .collect::<Result<_>>()?,
            )
        });
    }
    let decoder = MlpDecoder::new(&mut b.scope("decoder"), cfg.channels, cfg.decoder_embed)?;
    Ok(Model { cfg: cfg.clone(), net: Network { embed, downs, stages, decoder }, store })
}

impl<T: Real> Model<T> {
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, images: Var) -> Result<ModelOutput> {
        let s = ctx.g.shape(images).to_vec();
        if s.len() != 4 || s[1] != self.cfg.height || s[2] != self.cfg.width || s[3] != 3 {
            return Err(Error::contract(format!(
                "input {s:?} does not match the configured [batch, {}, {}, 3]",
                self.cfg.height, self.cfg.width
            )));
        }
        let mut x = self.net.embed.forward(ctx, images)?;
        let mut feats = Vec::with_capacity(4);
        for (i, stage) in self.net.stages.iter().enumerate() {
            if i > 0 {
                x = self.net.downs[i - 1].forward(ctx, x)?;
            }
            match stage {
                Stage::Ssm(blocks) => {
                    for blk in blocks {
                        x = blk.forward(ctx, x)?;
                    }
                }
                Stage::Cnn(blocks) => {
                    for blk in blocks {
                        x = blk.forward(ctx, x)?;
                    }
                }
            }
            feats.push(x);
        }
        let stages = [feats[0], feats[1], feats[2], feats[3]];
        let DecoderOutput { logits, prob } = self.net.decoder.forward(ctx, stages)?;
        Ok(ModelOutput { stages, logits, prob })
    }

    /// Probability maps `[batch, H, W, 1]` using running normalization statistics.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut ctx = Ctx::inference(&self.store);
        let x = ctx.g.constant(images.clone());
        let out = self.forward(&mut ctx, x)?;
        Ok(ctx.g.tensor(out.prob))
    }

    /// Parameter count summed block by block.
    pub fn analytic_param_count(&self) -> usize {
        let n = &self.net;
        n.embed.param_count()
            + n.downs.iter().map(Downsample::param_count).sum::<usize>()
            + n.stages
                .iter()
                .map(|s| match s {
                    Stage::Ssm(b) => b.iter().map(MixedSsmBlock::param_count).sum::<usize>(),
                    Stage::Cnn(b) => b.iter().map(InvertedResidual::param_count).sum(),
                })
                .sum::<usize>()
            + n.decoder.param_count()
    }

    /// Trainable parameters and multiply-accumulates of one forward at `height × width`.
    pub fn param_and_flop_report(&self, height: usize, width: usize) -> FlopReport {
        let n = &self.net;
        let (mut h, mut w) = (height / PATCH, width / PATCH);
        let mut macs = n.embed.proj.macs(1, height, width);
        for (i, stage) in n.stages.iter().enumerate() {
            if i > 0 {
                macs += n.downs[i - 1].conv.macs(1, h, w);
                h /= 2;
                w /= 2;
            }
            macs += match stage {
                Stage::Ssm(b) => b.iter().map(|blk| blk.macs(1, h, w)).sum::<u64>(),
                Stage::Cnn(b) => b.iter().map(|blk| blk.macs(1, h, w)).sum(),
            };
        }
        macs += n.decoder.macs(1, height / PATCH, width / PATCH);
        FlopReport { params: self.store.param_count(), macs }
    }

    /// Zeroes the prediction layer so every output probability is exactly 0.5.
    pub fn zero_head(&mut self) {
        let pred = &self.net.decoder.pred;
        for id in [Some(pred.weight), pred.bias].into_iter().flatten() {
            self.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { cfg: self.cfg.clone(), net: self.net.clone(), store: self.store.cast() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_count_matches_enumeration() {
        let m = build::<f32>(&LoMaConfig::tiny()).unwrap();
        assert_eq!(m.analytic_param_count(), m.store.param_count());
        let ck = m.store.to_checkpoint(&m.cfg.arch_hash());
        assert_eq!(ck.param_count(), m.store.param_count());
    }

    #[test]
    fn kv_round_trip() {
        let mut cfg = LoMaConfig::tiny();
        cfg.use_cab = false;
        cfg.lambda_focal = 0.0;
        let back = LoMaConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.arch_hash().len(), 16);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(build::<f32>(&LoMaConfig::tiny().with_size(48, 64)).is_err());
        let mut c = LoMaConfig::tiny();
        c.depths[2] = 0;
        assert!(matches!(build::<f32>(&c), Err(Error::Contract(_))));
    }
}
