//! Parameterised building blocks. Each layer stores [`ParamId`]s into the
//! network's registry and records its forward pass on a tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Low-rank residual path `scale · up(down(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub down: ParamId,
    pub up: ParamId,
    pub rank: usize,
    pub scale: f64,
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..=bound)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub lora: Option<LoraPair>,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        zero_init: bool,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let bound = if zero_init { 0.0 } else { 1.0 / (fan_in as f64).sqrt() };
        let w = uniform(rng, &[out_channels, in_channels, kernel, kernel], bound);
        let b = uniform(rng, &[out_channels], bound);
        Ok(Self {
            name: name.to_string(),
            weight: store.register(format!("{name}.weight"), w)?,
            bias: Some(store.register(format!("{name}.bias"), b)?),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            lora: None,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(
            x,
            p.var(self.weight),
            self.bias.map(|b| p.var(b)),
            self.stride,
            self.padding,
        )?;
        match &self.lora {
            None => Ok(y),
            Some(l) => {
                let h = tape.conv2d(x, p.var(l.down), None, self.stride, 0)?;
                let u = tape.conv2d(h, p.var(l.up), None, 1, 0)?;
                tape.add(y, tape.scale(u, T::lit(l.scale)))
            }
        }
    }
}

/// Affine map with weight `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
    pub lora: Option<LoraPair>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Result<Self> {
        let bound = 1.0 / (in_features as f64).sqrt();
        Ok(Self {
            name: name.to_string(),
            weight: store.register(format!("{name}.weight"), uniform(rng, &[in_features, out_features], bound))?,
            bias: store.register(format!("{name}.bias"), uniform(rng, &[out_features], bound))?,
            in_features,
            out_features,
            lora: None,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.linear(x, p.var(self.weight), Some(p.var(self.bias)))?;
        match &self.lora {
            None => Ok(y),
            Some(l) => {
                let h = tape.linear(x, p.var(l.down), None)?;
                let u = tape.linear(h, p.var(l.up), None)?;
                tape.add(y, tape.scale(u, T::lit(l.scale)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

/// Largest group count in {8, 4, 2, 1} dividing `channels`.
pub fn group_count(channels: usize) -> usize {
    [8, 4, 2, 1]
        .into_iter()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.register(format!("{name}.gamma"), Tensor::full(&[channels], T::one()))?,
            beta: store.register(format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            groups: group_count(channels),
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.group_norm(x, self.groups, p.var(self.gamma), p.var(self.beta), T::lit(1e-5))
    }
}

/// Two GroupNorm → SiLU → 3×3 conv sub-blocks with a residual connection and
/// an optional mask-ratio injection after the first convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub norm1: Norm,
    pub conv1: Conv,
    pub norm2: Norm,
    pub conv2: Conv,
    pub skip: Option<Conv>,
    pub inject: Option<Linear>,
}

impl ResBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        embed_dim: Option<usize>,
    ) -> Result<Self> {
        Ok(Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), in_channels)?,
            conv1: Conv::new(store, rng, &format!("{name}.conv1"), in_channels, out_channels, 3, 1, false)?,
            norm2: Norm::new(store, &format!("{name}.norm2"), out_channels)?,
            conv2: Conv::new(store, rng, &format!("{name}.conv2"), out_channels, out_channels, 3, 1, false)?,
            skip: if in_channels != out_channels {
                Some(Conv::new(store, rng, &format!("{name}.skip"), in_channels, out_channels, 1, 1, false)?)
            } else {
                None
            },
            inject: match embed_dim {
                Some(e) => Some(Linear::new(store, rng, &format!("{name}.ratio"), e, out_channels)?),
                None => None,
            },
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, x: Var, embedding: Option<Var>) -> Result<Var> {
        let h = self.norm1.forward(tape, p, x)?;
        let mut h = self.conv1.forward(tape, p, tape.silu(h))?;
        if let (Some(inject), Some(e)) = (&self.inject, embedding) {
            let offset = inject.forward(tape, p, e)?;
            h = tape.add_channel(h, offset)?;
        }
        let h = self.norm2.forward(tape, p, h)?;
        let h = self.conv2.forward(tape, p, tape.silu(h))?;
        let skip = match &self.skip {
            Some(s) => s.forward(tape, p, x)?,
            None => x,
        };
        tape.add(h, skip)
    }
}

/// Residual pyramid: stem conv, then one residual block per level with a
/// stride-2 conv between levels.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub stem: Conv,
    pub downs: Vec<Conv>,
    pub blocks: Vec<ResBlock>,
}

impl Encoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        channels: &[usize],
        embed_dim: Option<usize>,
    ) -> Result<Self> {
        let stem = Conv::new(store, rng, &format!("{name}.stem"), in_channels, channels[0], 3, 1, false)?;
        let mut downs = Vec::new();
        let mut blocks = Vec::new();
        for (l, &c) in channels.iter().enumerate() {
            if l > 0 {
                downs.push(Conv::new(store, rng, &format!("{name}.down{l}"), channels[l - 1], c, 3, 2, false)?);
            }
            blocks.push(ResBlock::new(store, rng, &format!("{name}.block{l}"), c, c, embed_dim)?);
        }
        Ok(Self { stem, downs, blocks })
    }

    /// Feature pyramid, finest level first.
    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, x: Var, embedding: Option<Var>) -> Result<Vec<Var>> {
        let mut h = self.stem.forward(tape, p, x)?;
        let mut feats = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            if l > 0 {
                h = self.downs[l - 1].forward(tape, p, h)?;
            }
            h = block.forward(tape, p, h, embedding)?;
            feats.push(h);
        }
        Ok(feats)
    }
}

/// Upsampling path fusing both encoder pyramids by channel concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    /// Indexed by pyramid level, finest first.
    pub blocks: Vec<ResBlock>,
    /// `ups[l]` maps level `l + 1` features to level `l`.
    pub ups: Vec<Conv>,
    pub head_norm: Norm,
    pub head: Conv,
}

impl Decoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: &[usize],
        embed_dim: usize,
        zero_init_head: bool,
    ) -> Result<Self> {
        let levels = channels.len();
        let mut blocks = Vec::with_capacity(levels);
        let mut ups = Vec::with_capacity(levels - 1);
        for (l, &c) in channels.iter().enumerate() {
            let fused = if l == levels - 1 { 2 * c } else { 3 * c };
            blocks.push(ResBlock::new(store, rng, &format!("{name}.block{l}"), fused, c, Some(embed_dim))?);
            if l + 1 < levels {
                ups.push(Conv::new(store, rng, &format!("{name}.up{l}"), channels[l + 1], c, 3, 1, false)?);
            }
        }
        Ok(Self {
            blocks,
            ups,
            head_norm: Norm::new(store, &format!("{name}.head_norm"), channels[0])?,
            head: Conv::new(store, rng, &format!("{name}.head"), channels[0], 1, 3, 1, zero_init_head)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &Tape<T>,
        p: &Bound,
        image_feats: &[Var],
        edge_feats: &[Var],
        embedding: Var,
    ) -> Result<Var> {
        let top = self.blocks.len() - 1;
        let h = tape.concat_channels(&[image_feats[top], edge_feats[top]])?;
        let mut h = self.blocks[top].forward(tape, p, h, Some(embedding))?;
        for l in (0..top).rev() {
            let up = self.ups[l].forward(tape, p, tape.upsample2x(h)?)?;
            let fused = tape.concat_channels(&[up, image_feats[l], edge_feats[l]])?;
            h = self.blocks[l].forward(tape, p, fused, Some(embedding))?;
        }
        let h = self.head_norm.forward(tape, p, h)?;
        self.head.forward(tape, p, tape.silu(h))
    }
}
