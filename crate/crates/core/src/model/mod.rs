//! The edge network: image encoder, masked edge encoder and shared decoder
//! with mask-ratio injection, plus conditioned and guided prediction.

pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::maps::{EdgeState, ProbabilityMap, TriStateEdgeMap};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{kernels::sigmoid, sinusoidal_embed, Tape, Tensor, Var};
use layers::{Conv, Decoder, Encoder, Linear, LoraPair};

/// Channels of the tri-state encoding fed to the edge encoder.
pub const EDGE_CHANNELS: usize = 2;
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of each pyramid level, finest first.
    pub channels: Vec<usize>,
    pub embed_dim: usize,
    pub zero_init_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 128, 192],
            embed_dim: 32,
            zero_init_head: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(invalid_arg!("channel plan must be non-empty and positive: {:?}", self.channels));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return Err(invalid_arg!("embed_dim must be even and positive, got {}", self.embed_dim));
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this.
    pub fn downsampling_factor(&self) -> usize {
        1 << (self.channels.len() - 1)
    }
}

/// Which parts of the network receive low-rank adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraTargets {
    pub edge_encoder: bool,
    pub decoder: bool,
}

impl Default for LoraTargets {
    fn default() -> Self {
        Self {
            edge_encoder: true,
            decoder: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    pub targets: LoraTargets,
}

/// Positive classifier-free-guidance weight.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct GranularityScale(f64);

impl GranularityScale {
    pub const UNIT: GranularityScale = GranularityScale(1.0);

    pub fn new(s: f64) -> Result<Self> {
        if !(s.is_finite() && s > 0.0) {
            return Err(invalid_arg!("granularity scale must be positive and finite, got {s}"));
        }
        Ok(Self(s))
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn is_unit(self) -> bool {
        self.0 == 1.0
    }
}

/// Two-channel numeric encoding of a tri-state map: edge value, mask indicator.
pub fn encode_tristate<T: Scalar>(map: &TriStateEdgeMap) -> Tensor<T> {
    let (h, w) = map.dims();
    let plane = h * w;
    let mut data = vec![T::zero(); EDGE_CHANNELS * plane];
    for (i, &c) in map.cells().iter().enumerate() {
        match c {
            EdgeState::Edge => data[i] = T::one(),
            EdgeState::Masked => data[plane + i] = T::one(),
            EdgeState::Background => {}
        }
    }
    Tensor::new(&[EDGE_CHANNELS, h, w], data).expect("encoding shape")
}

/// Inverse of [`encode_tristate`].
pub fn decode_tristate<T: Scalar>(encoded: &Tensor<T>) -> Result<TriStateEdgeMap> {
    let &[c, h, w] = encoded.shape() else {
        return Err(invalid_arg!("expected [2,H,W], got {:?}", encoded.shape()));
    };
    if c != EDGE_CHANNELS {
        return Err(invalid_arg!("expected {EDGE_CHANNELS} channels, got {c}"));
    }
    let plane = h * w;
    let d = encoded.data();
    let cells = (0..plane)
        .map(|i| {
            if d[plane + i] > T::lit(0.5) {
                EdgeState::Masked
            } else if d[i] > T::lit(0.5) {
                EdgeState::Edge
            } else {
                EdgeState::Background
            }
        })
        .collect();
    TriStateEdgeMap::from_cells(h, w, cells)
}

/// `features + Linear(PE(r))` broadcast over the spatial extent of `[C,h,w]`
/// features. `weight` is `[embed_dim, C]`.
pub fn inject_ratio<T: Scalar>(features: &Tensor<T>, r: T, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let &[c, h, w] = features.shape() else {
        return Err(invalid_arg!("features must be [C,h,w], got {:?}", features.shape()));
    };
    let &[e, out] = weight.shape() else {
        return Err(invalid_arg!("weight must be [E,C], got {:?}", weight.shape()));
    };
    if out != c {
        return Err(invalid_arg!("injection produces {out} channels but features have {c}"));
    }
    let tape = Tape::new();
    let f = tape.constant(features.clone().reshape(&[1, c, h, w])?);
    let pe = tape.constant(sinusoidal_embed(r, e)?.reshape(&[1, e])?);
    let offset = tape.linear(pe, tape.constant(weight.clone()), Some(tape.constant(bias.clone())))?;
    let y = tape.add_channel(f, offset)?;
    let out = (*tape.value(y)).clone();
    out.reshape(&[c, h, w])
}

/// Image-encoder features for one image, reusable across unmasking steps.
#[derive(Debug, Clone)]
pub struct ImageEncoding<T> {
    image: Tensor<T>,
    features: Vec<Tensor<T>>,
}

impl<T: Scalar> ImageEncoding<T> {
    pub fn image(&self) -> &Tensor<T> {
        &self.image
    }
}

/// Conditioned and (optionally) unconditioned encodings of one image.
#[derive(Debug, Clone)]
pub struct GuidedEncoding<T> {
    pub cond: ImageEncoding<T>,
    pub uncond: Option<ImageEncoding<T>>,
    pub scale: GranularityScale,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoNetwork<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    image_encoder: Encoder,
    edge_encoder: Encoder,
    decoder: Decoder,
    lora: Option<LoraSpec>,
}

impl<T: Scalar> MemoNetwork<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let ch = &config.channels;
        let image_encoder = Encoder::new(&mut params, &mut rng, "image_encoder", IMAGE_CHANNELS, ch, None)?;
        let edge_encoder = Encoder::new(
            &mut params,
            &mut rng,
            "edge_encoder",
            IMAGE_CHANNELS + EDGE_CHANNELS,
            ch,
            Some(config.embed_dim),
        )?;
        let decoder = Decoder::new(&mut params, &mut rng, "decoder", ch, config.embed_dim, config.zero_init_head)?;
        Ok(Self {
            config,
            params,
            image_encoder,
            edge_encoder,
            decoder,
            lora: None,
        })
    }

    /// Rebuild a network from its configuration and a full parameter set.
    pub fn from_parts(config: ModelConfig, lora: Option<LoraSpec>, params: &ParamStore<T>) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        if let Some(spec) = lora {
            net.inject_lora(spec)?;
        }
        if net.params.len() != params.len() {
            return Err(invalid_arg!(
                "network has {} parameters but {} were supplied",
                net.params.len(),
                params.len()
            ));
        }
        net.params.load_values(params)?;
        for (_, p) in params.iter() {
            if let Some(own) = net.params.find(&p.name) {
                net.params.get_mut(own).trainable = p.trainable;
            }
        }
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn lora(&self) -> Option<&LoraSpec> {
        self.lora.as_ref()
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn edge_encoder(&self) -> &Encoder {
        &self.edge_encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        let f = self.config.downsampling_factor();
        if height == 0 || width == 0 || !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            return Err(invalid_arg!(
                "image size {height}x{width} must be a positive multiple of {f} for this network"
            ));
        }
        Ok(())
    }

    /// `[N, embed_dim]` ratio embeddings, one row per sample.
    pub fn ratio_embedding(&self, ratios: &[T]) -> Result<Tensor<T>> {
        let e = self.config.embed_dim;
        let mut data = Vec::with_capacity(ratios.len() * e);
        for &r in ratios {
            data.extend_from_slice(sinusoidal_embed(r, e)?.data());
        }
        Tensor::new(&[ratios.len(), e], data)
    }

    /// F_I over a `[N,3,H,W]` batch.
    pub fn image_features(&self, tape: &Tape<T>, p: &Bound, images: Var) -> Result<Vec<Var>> {
        self.image_encoder.forward(tape, p, images, None)
    }

    /// F_E and D: logits `[N,1,H,W]` given image features, images `[N,3,H,W]`,
    /// encoded tri-state maps `[N,2,H,W]` and one mask ratio per sample.
    pub fn decode_logits(
        &self,
        tape: &Tape<T>,
        p: &Bound,
        image_feats: &[Var],
        images: Var,
        edges: Var,
        ratios: &[T],
    ) -> Result<Var> {
        let shape = tape.shape(images);
        if shape.len() != 4 || shape[1] != IMAGE_CHANNELS {
            return Err(invalid_arg!("images must be [N,3,H,W], got {shape:?}"));
        }
        let eshape = tape.shape(edges);
        if eshape != [shape[0], EDGE_CHANNELS, shape[2], shape[3]] {
            return Err(invalid_arg!("edge encoding {eshape:?} does not match images {shape:?}"));
        }
        if ratios.len() != shape[0] {
            return Err(invalid_arg!("{} ratios for a batch of {}", ratios.len(), shape[0]));
        }
        self.check_dims(shape[2], shape[3])?;
        let embedding = tape.constant(self.ratio_embedding(ratios)?);
        let edge_input = tape.concat_channels(&[images, edges])?;
        let edge_feats = self.edge_encoder.forward(tape, p, edge_input, Some(embedding))?;
        self.decoder.forward(tape, p, image_feats, &edge_feats, embedding)
    }

    /// Full forward pass producing logits `[N,1,H,W]`.
    pub fn forward_logits(&self, tape: &Tape<T>, p: &Bound, images: Var, edges: Var, ratios: &[T]) -> Result<Var> {
        let feats = self.image_features(tape, p, images)?;
        self.decode_logits(tape, p, &feats, images, edges, ratios)
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<(usize, usize)> {
        let &[c, h, w] = image.shape() else {
            return Err(invalid_arg!("image must be [3,H,W], got {:?}", image.shape()));
        };
        if c != IMAGE_CHANNELS {
            return Err(invalid_arg!("image must have 3 channels, got {c}"));
        }
        self.check_dims(h, w)?;
        Ok((h, w))
    }

    pub fn encode_image(&self, image: &Tensor<T>) -> Result<ImageEncoding<T>> {
        let (h, w) = self.check_image(image)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let x = tape.constant(image.clone().reshape(&[1, IMAGE_CHANNELS, h, w])?);
        let feats = self.image_features(&tape, &p, x)?;
        Ok(ImageEncoding {
            image: image.clone(),
            features: feats.into_iter().map(|v| (*tape.value(v)).clone()).collect(),
        })
    }

    pub fn encode_guided(&self, image: &Tensor<T>, scale: GranularityScale) -> Result<GuidedEncoding<T>> {
        let cond = self.encode_image(image)?;
        let uncond = if scale.is_unit() {
            None
        } else {
            Some(self.encode_image(&Tensor::zeros(image.shape()))?)
        };
        Ok(GuidedEncoding { cond, uncond, scale })
    }

    /// Logits `[H,W]` (flattened) for a cached image encoding.
    pub fn logits(&self, enc: &ImageEncoding<T>, edges: &TriStateEdgeMap, r: f64) -> Result<Vec<T>> {
        let &[_, h, w] = enc.image.shape() else { unreachable!() };
        if edges.dims() != (h, w) {
            return Err(invalid_arg!(
                "edge map {:?} does not match image {}x{}",
                edges.dims(),
                h,
                w
            ));
        }
        if !(r > 0.0 && r <= 1.0) {
            return Err(invalid_arg!("mask ratio must lie in (0, 1], got {r}"));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let image = tape.constant(enc.image.clone().reshape(&[1, IMAGE_CHANNELS, h, w])?);
        let edges = tape.constant(encode_tristate::<T>(edges).reshape(&[1, EDGE_CHANNELS, h, w])?);
        let feats: Vec<Var> = enc.features.iter().map(|f| tape.constant(f.clone())).collect();
        let logits = self.decode_logits(&tape, &p, &feats, image, edges, &[T::lit(r)])?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// Guided logits `uncond + s·(cond − uncond)`.
    pub fn guided_logits(&self, enc: &GuidedEncoding<T>, edges: &TriStateEdgeMap, r: f64) -> Result<Vec<T>> {
        let cond = self.logits(&enc.cond, edges, r)?;
        match &enc.uncond {
            None => Ok(cond),
            Some(u) => {
                let uncond = self.logits(u, edges, r)?;
                Ok(guide_logits(&cond, &uncond, enc.scale))
            }
        }
    }

    /// `Sigmoid(D(F_I(I), F_E(I, E_r, r), r))`.
    pub fn predict(&self, image: &Tensor<T>, edges: &TriStateEdgeMap, r: f64) -> Result<ProbabilityMap> {
        let (h, w) = self.check_image(image)?;
        let enc = self.encode_image(image)?;
        to_probabilities(h, w, &self.logits(&enc, edges, r)?)
    }

    /// Classifier-free-guided prediction with the zero image as the
    /// unconditioned input.
    pub fn predict_guided(
        &self,
        image: &Tensor<T>,
        edges: &TriStateEdgeMap,
        r: f64,
        scale: GranularityScale,
    ) -> Result<ProbabilityMap> {
        let (h, w) = self.check_image(image)?;
        let enc = self.encode_guided(image, scale)?;
        to_probabilities(h, w, &self.guided_logits(&enc, edges, r)?)
    }

    /// Wrap targeted conv and linear layers with zero-initialised low-rank
    /// adapters and freeze every base parameter.
    pub(crate) fn inject_lora(&mut self, spec: LoraSpec) -> Result<()> {
        if self.lora.is_some() {
            return Err(invalid_arg!("network already carries adapters"));
        }
        if spec.rank == 0 {
            return Err(invalid_arg!("adapter rank must be at least 1"));
        }
        if !(spec.alpha.is_finite() && spec.alpha > 0.0) {
            return Err(invalid_arg!("adapter alpha must be positive, got {}", spec.alpha));
        }
        let mut convs: Vec<&mut Conv> = Vec::new();
        let mut linears: Vec<&mut Linear> = Vec::new();
        if spec.targets.edge_encoder {
            collect_encoder(&mut self.edge_encoder, &mut convs, &mut linears);
        }
        if spec.targets.decoder {
            let d = &mut self.decoder;
            for b in d.blocks.iter_mut() {
                collect_block(b, &mut convs, &mut linears);
            }
            convs.extend(d.ups.iter_mut());
        }
        for c in &convs {
            check_rank(&c.name, spec.rank, c.in_channels, c.out_channels)?;
        }
        for l in &linears {
            check_rank(&l.name, spec.rank, l.in_features, l.out_features)?;
        }
        self.params.set_all_trainable(false);
        let scale = spec.alpha / spec.rank as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(0x10_4a);
        for c in convs {
            let bound = 1.0 / (c.in_channels as f64).sqrt();
            let down = Tensor::from_fn(&[spec.rank, c.in_channels, 1, 1], |_| {
                T::lit(rand::Rng::gen_range(&mut rng, -bound..=bound))
            });
            let up = Tensor::zeros(&[c.out_channels, spec.rank, 1, 1]);
            c.lora = Some(LoraPair {
                down: self.params.register(format!("{}.lora_down", c.name), down)?,
                up: self.params.register(format!("{}.lora_up", c.name), up)?,
                rank: spec.rank,
                scale,
            });
        }
        for l in linears {
            let bound = 1.0 / (l.in_features as f64).sqrt();
            let down = Tensor::from_fn(&[l.in_features, spec.rank], |_| {
                T::lit(rand::Rng::gen_range(&mut rng, -bound..=bound))
            });
            let up = Tensor::zeros(&[spec.rank, l.out_features]);
            l.lora = Some(LoraPair {
                down: self.params.register(format!("{}.lora_down", l.name), down)?,
                up: self.params.register(format!("{}.lora_up", l.name), up)?,
                rank: spec.rank,
                scale,
            });
        }
        self.lora = Some(spec);
        Ok(())
    }

    /// `(in, out)` extents of every adapted projection.
    pub fn adapted_projections(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut visit_conv = |c: &Conv| {
            if c.lora.is_some() {
                out.push((c.name.clone(), c.in_channels, c.out_channels));
            }
        };
        for e in [&self.image_encoder, &self.edge_encoder] {
            visit_conv(&e.stem);
            e.downs.iter().for_each(&mut visit_conv);
            for b in &e.blocks {
                visit_conv(&b.conv1);
                visit_conv(&b.conv2);
                b.skip.iter().for_each(&mut visit_conv);
            }
        }
        for b in &self.decoder.blocks {
            visit_conv(&b.conv1);
            visit_conv(&b.conv2);
            b.skip.iter().for_each(&mut visit_conv);
        }
        self.decoder.ups.iter().for_each(&mut visit_conv);
        visit_conv(&self.decoder.head);
        let blocks = self
            .image_encoder
            .blocks
            .iter()
            .chain(&self.edge_encoder.blocks)
            .chain(&self.decoder.blocks);
        for b in blocks {
            if let Some(l) = b.inject.as_ref().filter(|l| l.lora.is_some()) {
                out.push((l.name.clone(), l.in_features, l.out_features));
            }
        }
        out
    }
}

fn check_rank(name: &str, rank: usize, fan_in: usize, fan_out: usize) -> Result<()> {
    if rank > fan_in.min(fan_out) {
        return Err(invalid_arg!(
            "adapter rank {rank} exceeds min(in, out) = {} of layer {name}",
            fan_in.min(fan_out)
        ));
    }
    Ok(())
}

fn collect_block<'a>(b: &'a mut layers::ResBlock, convs: &mut Vec<&'a mut Conv>, linears: &mut Vec<&'a mut Linear>) {
    convs.push(&mut b.conv1);
    convs.push(&mut b.conv2);
    if let Some(s) = b.skip.as_mut() {
        convs.push(s);
    }
    if let Some(l) = b.inject.as_mut() {
        linears.push(l);
    }
}

fn collect_encoder<'a>(e: &'a mut Encoder, convs: &mut Vec<&'a mut Conv>, linears: &mut Vec<&'a mut Linear>) {
    convs.extend(e.downs.iter_mut());
    for b in e.blocks.iter_mut() {
        collect_block(b, convs, linears);
    }
}

/// `uncond + s·(cond − uncond)`, equal to `s·cond + (1−s)·uncond`.
pub fn guide_logits<T: Scalar>(cond: &[T], uncond: &[T], scale: GranularityScale) -> Vec<T> {
    let s = T::lit(scale.get());
    cond.iter().zip(uncond).map(|(&c, &u)| u + s * (c - u)).collect()
}

pub fn to_probabilities<T: Scalar>(height: usize, width: usize, logits: &[T]) -> Result<ProbabilityMap> {
    ProbabilityMap::new(
        height,
        width,
        logits
            .iter()
            .map(|&l| sigmoid(l).to_f32().unwrap_or(f32::NAN))
            .collect(),
    )
}
