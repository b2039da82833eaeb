//! Encoder and decoder blocks. All activations are `[batch, h, w, c]`.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Builder, Conv2d, Ctx, DepthwiseConv2d, LayerNorm, Linear, ParamStore};
use crate::scan2d::{Ss2d, Ss2dConfig};
use crate::ssm::InputDiscretization;
use crate::tensor::Real;

/// Spatial divisibility the full pipeline needs.
pub const PIPELINE_DIVISOR: usize = 32;
pub const PATCH: usize = 4;

fn dims<T: Real>(ctx: &Ctx<'_, T>, x: Var, op: &'static str) -> Result<[usize; 4]> {
    let s = ctx.g.shape(x);
    if s.len() != 4 {
        return Err(Error::shape(op, format!("expected [batch, h, w, c], got {s:?}")));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Stride-4 patch projection followed by layer norm.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Conv2d,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, out_c: usize) -> Result<Self> {
        Ok(PatchEmbed {
            proj: Conv2d::new(&mut b.scope("proj"), 3, out_c, PATCH, PATCH, 0, true)?,
            norm: LayerNorm::new(&mut b.scope("norm"), out_c)?,
        })
    }

    /// Takes images in `[0, 1]`; standardizes with mean and std 0.5.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<Var> {
        let [_, h, w, c] = dims(ctx, image, "patch_embed")?;
        if c != 3 {
            return Err(Error::shape("patch_embed", format!("expected 3 channels, got {c}")));
        }
        if h % PIPELINE_DIVISOR != 0 || w % PIPELINE_DIVISOR != 0 {
            return Err(Error::contract(format!(
                "image is {h}x{w}; height and width must both be divisible by {PIPELINE_DIVISOR}"
            )));
        }
        let x = ctx.g.affine(image, T::c(2.0), T::c(-1.0))?;
        let x = self.proj.forward(ctx, x)?;
        self.norm.forward(ctx, x)
    }

    pub fn param_count(&self) -> usize {
        self.proj.param_count() + self.norm.param_count()
    }
}

/// 3×3 convolution front followed by squeeze-excitation channel reweighting.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub conv: Conv2d,
    pub fc1: Linear,
    pub fc2: Linear,
    pub reduction: usize,
}

impl ChannelAttention {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::contract(format!("{channels} channels are not divisible by reduction {reduction}")));
        }
        let hidden = channels / reduction;
        Ok(ChannelAttention {
            conv: Conv2d::new(&mut b.scope("conv"), channels, channels, 3, 1, 1, true)?,
            fc1: Linear::new(&mut b.scope("fc1"), channels, hidden, true, 0.02)?,
            fc2: Linear::new(&mut b.scope("fc2"), hidden, channels, true, 0.02)?,
            reduction,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let s = ctx.g.global_avg_pool(y)?;
        let s = self.fc1.forward(ctx, s)?;
        let s = ctx.g.silu(s)?;
        let s = self.fc2.forward(ctx, s)?;
        let s = ctx.g.sigmoid(s)?;
        ctx.g.mul(y, s)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.fc1.param_count() + self.fc2.param_count()
    }

    pub fn macs(&self, batch: usize, h: usize, w: usize) -> u64 {
        self.conv.macs(batch, h, w) + self.fc1.macs(batch) + self.fc2.macs(batch) + (batch * h * w * self.conv.out_c) as u64
    }
}

/// Two-layer SiLU perceptron used in place of channel attention.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, channels: usize, hidden: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(&mut b.scope("fc1"), channels, hidden, true, 0.02)?,
            fc2: Linear::new(&mut b.scope("fc2"), hidden, channels, true, 0.02)?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.g.silu(h)?;
        self.fc2.forward(ctx, h)
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedSsmBlockConfig {
    pub channels: usize,
    pub state_size: usize,
    pub expansion: usize,
    pub cab_reduction: usize,
    pub use_cab: bool,
    pub atrous: bool,
    pub discretization: InputDiscretization,
}

#[derive(Debug, Clone)]
pub enum ChannelMixer {
    Cab(ChannelAttention),
    Mlp(Mlp),
}

/// `x + SS2D(LN(x))`, then `x + CAB(LN(x))` (or an MLP when `use_cab` is off).
#[derive(Debug, Clone)]
pub struct MixedSsmBlock {
    pub cfg: MixedSsmBlockConfig,
    pub norm1: LayerNorm,
    pub ss2d: Ss2d,
    pub norm2: LayerNorm,
    pub mixer: ChannelMixer,
}

impl MixedSsmBlock {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: MixedSsmBlockConfig) -> Result<Self> {
        let c = cfg.channels;
        let norm1 = LayerNorm::new(&mut b.scope("norm1"), c)?;
        let ss2d = Ss2d::new(
            &mut b.scope("ss2d"),
            Ss2dConfig {
                channels: c,
                state_size: cfg.state_size,
                expansion: cfg.expansion,
                atrous: cfg.atrous,
                discretization: cfg.discretization,
            },
        )?;
        let norm2 = LayerNorm::new(&mut b.scope("norm2"), c)?;
        let mixer = if cfg.use_cab {
            ChannelMixer::Cab(ChannelAttention::new(&mut b.scope("cab"), c, cfg.cab_reduction)?)
        } else {
            ChannelMixer::Mlp(Mlp::new(&mut b.scope("mlp"), c, c)?)
        };
        Ok(MixedSsmBlock { cfg, norm1, ss2d, norm2, mixer })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let [_, _, _, c] = dims(ctx, x, "mixed_ssm_block")?;
        if c != self.cfg.channels {
            return Err(Error::shape("mixed_ssm_block", format!("block has {} channels, input {c}", self.cfg.channels)));
        }
        let h = self.norm1.forward(ctx, x)?;
        let h = self.ss2d.forward(ctx, h)?;
        let x = ctx.g.add(x, h)?;
        let h = self.norm2.forward(ctx, x)?;
        let h = match &self.mixer {
            ChannelMixer::Cab(cab) => cab.forward(ctx, h)?,
            ChannelMixer::Mlp(mlp) => mlp.forward(ctx, h)?,
        };
        ctx.g.add(x, h)
    }

    pub fn param_count(&self) -> usize {
        let mixer = match &self.mixer {
            ChannelMixer::Cab(c) => c.param_count(),
            ChannelMixer::Mlp(m) => m.param_count(),
        };
        self.norm1.param_count() + self.ss2d.param_count() + self.norm2.param_count() + mixer
    }

    pub fn macs(&self, batch: usize, h: usize, w: usize) -> u64 {
        let mixer = match &self.mixer {
            ChannelMixer::Cab(c) => c.macs(batch, h, w),
            ChannelMixer::Mlp(m) => m.fc1.macs(batch * h * w) + m.fc2.macs(batch * h * w),
        };
        self.ss2d.macs(batch, h, w) + mixer
    }

    /// Zeroes both residual branches' output projections.
    pub fn zero_branches<T: Real>(&self, store: &mut ParamStore<T>) {
        zero(store, self.ss2d.out_proj.weight);
        match &self.mixer {
            ChannelMixer::Cab(c) => {
                zero(store, c.conv.weight);
                if let Some(b) = c.conv.bias {
                    zero(store, b);
                }
            }
            ChannelMixer::Mlp(m) => {
                zero(store, m.fc2.weight);
                if let Some(b) = m.fc2.bias {
                    zero(store, b);
                }
            }
        }
    }
}

fn zero<T: Real>(store: &mut ParamStore<T>, id: crate::nn::ParamId) {
    store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = T::zero());
}

#[derive(Debug, Clone)]
pub enum Norm {
    Layer(LayerNorm),
    Batch(BatchNorm),
}

impl Norm {
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match self {
            Norm::Layer(n) => n.forward(ctx, x),
            Norm::Batch(n) => n.forward(ctx, x),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Norm::Layer(n) => n.param_count(),
            Norm::Batch(n) => n.param_count(),
        }
    }
}

/// Stride-2 3×3 convolution plus normalization.
#[derive(Debug, Clone)]
pub struct Downsample {
    pub conv: Conv2d,
    pub norm: Norm,
}

impl Downsample {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, in_c: usize, out_c: usize, batch_norm: bool) -> Result<Self> {
        let conv = Conv2d::new(&mut b.scope("conv"), in_c, out_c, 3, 2, 1, !batch_norm)?;
        let norm = if batch_norm {
            Norm::Batch(BatchNorm::new(&mut b.scope("norm"), out_c)?)
        } else {
            Norm::Layer(LayerNorm::new(&mut b.scope("norm"), out_c)?)
        };
        Ok(Downsample { conv, norm })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let [_, h, w, _] = dims(ctx, x, "downsample")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::contract(format!("downsample needs even spatial dims, got {h}x{w}")));
        }
        let y = self.conv.forward(ctx, x)?;
        self.norm.forward(ctx, y)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.norm.param_count()
    }
}

/// Pointwise expand, depthwise 3×3, pointwise project, each batch-normalized.
#[derive(Debug, Clone)]
pub struct InvertedResidual {
    pub expand: Linear,
    pub bn1: BatchNorm,
    pub dw: DepthwiseConv2d,
    pub bn2: BatchNorm,
    pub project: Linear,
    pub bn3: BatchNorm,
}

impl InvertedResidual {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, channels: usize, expansion: usize) -> Result<Self> {
        let hidden = channels * expansion;
        let std_in = (2.0 / hidden as f64).sqrt();
        let std_out = (2.0 / channels as f64).sqrt();
        Ok(InvertedResidual {
            expand: Linear::new(&mut b.scope("expand"), channels, hidden, false, std_in)?,
            bn1: BatchNorm::new(&mut b.scope("bn1"), hidden)?,
            dw: DepthwiseConv2d::new(&mut b.scope("dw"), hidden, 3, 1, false)?,
            bn2: BatchNorm::new(&mut b.scope("bn2"), hidden)?,
            project: Linear::new(&mut b.scope("project"), hidden, channels, false, std_out)?,
            bn3: BatchNorm::new(&mut b.scope("bn3"), channels)?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.expand.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = ctx.g.relu6(h)?;
        let h = self.dw.forward(ctx, h)?;
        let h = self.bn2.forward(ctx, h)?;
        let h = ctx.g.relu6(h)?;
        let h = self.project.forward(ctx, h)?;
        let h = self.bn3.forward(ctx, h)?;
        ctx.g.add(x, h)
    }

    pub fn param_count(&self) -> usize {
        self.expand.param_count()
            + self.bn1.param_count()
            + self.dw.param_count()
            + self.bn2.param_count()
            + self.project.param_count()
            + self.bn3.param_count()
    }

    pub fn macs(&self, batch: usize, h: usize, w: usize) -> u64 {
        let rows = batch * h * w;
        self.expand.macs(rows) + self.dw.macs(batch, h, w) + self.project.macs(rows)
    }
}

/// Projects every stage to a shared width at quarter resolution, fuses, and predicts one channel.
#[derive(Debug, Clone)]
pub struct MlpDecoder {
    pub proj: Vec<Linear>,
    pub fuse: Linear,
    pub bn: BatchNorm,
    pub pred: Linear,
    pub embed: usize,
}

/// Decoder output: logits and probabilities, both `[batch, H, W, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    pub logits: Var,
    pub prob: Var,
}

impl MlpDecoder {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, channels: [usize; 4], embed: usize) -> Result<Self> {
        let mut proj = Vec::with_capacity(4);
        for (i, &c) in channels.iter().enumerate() {
            proj.push(Linear::new(&mut b.scope(&format!("proj{}", i + 1)), c, embed, true, 0.02)?);
        }
        Ok(MlpDecoder {
            proj,
            fuse: Linear::new(&mut b.scope("fuse"), 4 * embed, embed, false, (2.0 / embed as f64).sqrt())?,
            bn: BatchNorm::new(&mut b.scope("bn"), embed)?,
            pred: Linear::new(&mut b.scope("pred"), embed, 1, true, 0.02)?,
            embed,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, feats: [Var; 4]) -> Result<DecoderOutput> {
        let [bsz, h4, w4, _] = dims(ctx, feats[0], "mlp_decoder")?;
        let mut ups = Vec::with_capacity(4);
        for (i, (&f, proj)) in feats.iter().zip(&self.proj).enumerate() {
            let [b, h, w, c] = dims(ctx, f, "mlp_decoder")?;
            let scale = 1usize << i;
            if b != bsz || h * scale != h4 || w * scale != w4 || c != proj.in_dim {
                return Err(Error::contract(format!(
                    "stage {} feature is {b}x{h}x{w}x{c}; expected {bsz}x{}x{}x{}",
                    i + 1,
                    h4 / scale,
                    w4 / scale,
                    proj.in_dim
                )));
            }
            let y = proj.forward(ctx, f)?;
            ups.push(if i == 0 { y } else { ctx.g.resize_bilinear(y, h4, w4)? });
        }
        let x = ctx.g.concat(&ups)?;
        let x = self.fuse.forward(ctx, x)?;
        let x = self.bn.forward(ctx, x)?;
        let x = ctx.g.relu(x)?;
        let x = self.pred.forward(ctx, x)?;
        let logits = ctx.g.resize_bilinear(x, h4 * PATCH, w4 * PATCH)?;
        let prob = ctx.g.sigmoid(logits)?;
        Ok(DecoderOutput { logits, prob })
    }

    pub fn param_count(&self) -> usize {
        self.proj.iter().map(Linear::param_count).sum::<usize>()
            + self.fuse.param_count()
            + self.bn.param_count()
            + self.pred.param_count()
    }

    pub fn macs(&self, batch: usize, h4: usize, w4: usize) -> u64 {
        let mut m = 0;
        for (i, p) in self.proj.iter().enumerate() {
            m += p.macs(batch * (h4 >> i) * (w4 >> i));
        }
        m + self.fuse.macs(batch * h4 * w4) + self.pred.macs(batch * h4 * w4)
    }
}
