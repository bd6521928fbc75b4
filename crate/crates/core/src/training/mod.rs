//! Masked edge training, condition dropout and adapter fine-tuning.

mod loss;
mod lora;
mod masking;

pub use loss::{masked_bce_loss, masked_bce_with_grad, masked_weights, targets, LossNormalization};
pub use lora::{adapter_param_count, adapter_param_names, lora_inject};
pub use masking::{bernoulli_mask, sample_ratio};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::maps::BinaryMap;
use crate::model::{encode_tristate, MemoNetwork, EDGE_CHANNELS, IMAGE_CHANNELS};
use crate::scalar::Scalar;
use crate::tensor::{AdamW, AdamWConfig, Tape, Tensor};

/// One training pair: `[3,H,W]` image in `[0,1]` and its binary edge map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub edges: BinaryMap,
}

impl<T: Scalar> Sample<T> {
    pub fn new(image: Tensor<T>, edges: BinaryMap) -> Result<Self> {
        match image.shape() {
            &[3, h, w] if (h, w) == edges.dims() => Ok(Self { image, edges }),
            s => Err(invalid_arg!(
                "image {s:?} does not match edge map {:?}",
                edges.dims()
            )),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.edges.dims()
    }

    /// Apply one of the eight flip/rotation symmetries of the square.
    /// Codes with a transpose (4..8) require `H == W`.
    pub fn transformed(&self, code: u8) -> Self {
        let (h, w) = self.dims();
        let transpose = code & 4 != 0;
        let (flip_y, flip_x) = (code & 1 != 0, code & 2 != 0);
        let (oh, ow) = if transpose { (w, h) } else { (h, w) };
        let src = |y: usize, x: usize| {
            let (mut sy, mut sx) = if transpose { (x, y) } else { (y, x) };
            if flip_y {
                sy = h - 1 - sy;
            }
            if flip_x {
                sx = w - 1 - sx;
            }
            (sy, sx)
        };
        let edges = BinaryMap::from_fn(oh, ow, |y, x| {
            let (sy, sx) = src(y, x);
            self.edges.get(sy, sx)
        });
        let d = self.image.data();
        let image = Tensor::from_fn(&[3, oh, ow], |i| {
            let c = i / (oh * ow);
            let (y, x) = ((i / ow) % oh, i % ow);
            let (sy, sx) = src(y, x);
            d[(c * h + sy) * w + sx]
        });
        Self { image, edges }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum MaskRatioDistribution {
    /// Uniform on `(0, 1]`.
    Uniform,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub mask_ratio: MaskRatioDistribution,
    pub condition_drop_prob: f64,
    pub loss_normalization: LossNormalization,
    /// Random flips and 90° rotations.
    pub augment: bool,
    pub seed: u64,
    /// Learning rate used when fine-tuning adapters.
    pub fine_tune_learning_rate: f64,
    /// Adapter scale numerator; `None` uses the rank (scale 1).
    pub lora_alpha: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 5e-5,
            weight_decay: 0.0,
            epochs: 1,
            mask_ratio: MaskRatioDistribution::Uniform,
            condition_drop_prob: 0.10,
            loss_normalization: LossNormalization::PerPixel,
            augment: true,
            seed: 0,
            fine_tune_learning_rate: 2e-5,
            lora_alpha: None,
        }
    }
}

impl TrainingConfig {
    /// Defaults for adapter fine-tuning.
    pub fn fine_tune() -> Self {
        Self::default().for_fine_tuning()
    }

    /// The same settings with the fine-tuning learning rate in force.
    pub fn for_fine_tuning(&self) -> Self {
        Self {
            learning_rate: self.fine_tune_learning_rate,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid_arg!("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.condition_drop_prob) {
            return Err(invalid_arg!(
                "condition_drop_prob must lie in [0, 1), got {}",
                self.condition_drop_prob
            ));
        }
        if let MaskRatioDistribution::Fixed(r) = self.mask_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(invalid_arg!("fixed mask ratio must lie in (0, 1], got {r}"));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(invalid_arg!("learning_rate must be non-negative"));
        }
        if !(self.fine_tune_learning_rate.is_finite() && self.fine_tune_learning_rate >= 0.0) {
            return Err(invalid_arg!("fine_tune_learning_rate must be non-negative"));
        }
        if self.lora_alpha.is_some_and(|a| !(a.is_finite() && a > 0.0)) {
            return Err(invalid_arg!("lora_alpha must be positive"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// What the trainer drew for one sample of a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleDraw {
    pub ratio: f64,
    pub dropped_condition: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub draws: Vec<SampleDraw>,
}

/// Owns the network under training, its optimizer state and the RNG stream.
#[derive(Debug)]
pub struct Trainer<T> {
    pub net: MemoNetwork<T>,
    pub config: TrainingConfig,
    optimizer: AdamW<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(net: MemoNetwork<T>, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optimizer: AdamW::new(config.optimizer()),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            net,
            config,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.optimizer.step_count()
    }

    fn draw(&mut self) -> SampleDraw {
        let ratio = match self.config.mask_ratio {
            MaskRatioDistribution::Uniform => sample_ratio(&mut self.rng),
            MaskRatioDistribution::Fixed(r) => r,
        };
        let dropped_condition =
            self.config.condition_drop_prob > 0.0 && self.rng.gen::<f64>() < self.config.condition_drop_prob;
        SampleDraw {
            ratio,
            dropped_condition,
        }
    }

    /// Masked-loss value of `batch` under explicit draws, without updating.
    pub fn evaluate_loss(&self, batch: &[Sample<T>], draws: &[SampleDraw], masks: &[crate::maps::TriStateEdgeMap]) -> Result<f64> {
        let tape = Tape::new();
        let p = self.net.params().bind(&tape);
        let loss = self.build_loss(&tape, &p, batch, draws, masks)?;
        Ok(tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN))
    }

    fn build_loss(
        &self,
        tape: &Tape<T>,
        p: &crate::params::Bound,
        batch: &[Sample<T>],
        draws: &[SampleDraw],
        masks: &[crate::maps::TriStateEdgeMap],
    ) -> Result<crate::tensor::Var> {
        let (h, w) = batch[0].dims();
        let n = batch.len();
        let plane = h * w;
        let mut images = Vec::with_capacity(n * IMAGE_CHANNELS * plane);
        let mut edges = Vec::with_capacity(n * EDGE_CHANNELS * plane);
        let mut targets_all = Vec::with_capacity(n * plane);
        let mut weights = Vec::with_capacity(n * plane);
        let mut ratios = Vec::with_capacity(n);
        for ((s, d), m) in batch.iter().zip(draws).zip(masks) {
            if s.dims() != (h, w) {
                return Err(invalid_arg!("batch mixes {:?} and {:?} samples", (h, w), s.dims()));
            }
            if d.dropped_condition {
                images.extend(std::iter::repeat_n(T::zero(), IMAGE_CHANNELS * plane));
            } else {
                images.extend_from_slice(s.image.data());
            }
            edges.extend_from_slice(encode_tristate::<T>(m).data());
            targets_all.extend(targets::<T>(&s.edges));
            let factor = self.config.loss_normalization.factor(d.ratio, plane) / n as f64;
            weights.extend(masked_weights::<T>(m, factor));
            ratios.push(T::lit(d.ratio));
        }
        let images = tape.constant(Tensor::new(&[n, IMAGE_CHANNELS, h, w], images)?);
        let edges = tape.constant(Tensor::new(&[n, EDGE_CHANNELS, h, w], edges)?);
        let logits = self.net.forward_logits(tape, p, images, edges, &ratios)?;
        tape.masked_bce(logits, targets_all, weights)
    }

    /// Draw ratios, masks and condition dropout for `batch`, then take one
    /// AdamW step on the batch-mean masked loss.
    pub fn train_step(&mut self, batch: &[Sample<T>]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(invalid_arg!("empty batch"));
        }
        let draws: Vec<SampleDraw> = (0..batch.len()).map(|_| self.draw()).collect();
        let mut masks = Vec::with_capacity(batch.len());
        for (s, d) in batch.iter().zip(&draws) {
            masks.push(bernoulli_mask(&s.edges, d.ratio, &mut self.rng)?);
        }
        self.step_with(batch, draws, &masks)
    }

    /// One optimizer step with caller-supplied draws and masks.
    pub fn step_with(
        &mut self,
        batch: &[Sample<T>],
        draws: Vec<SampleDraw>,
        masks: &[crate::maps::TriStateEdgeMap],
    ) -> Result<StepReport> {
        if batch.is_empty() || draws.len() != batch.len() || masks.len() != batch.len() {
            return Err(invalid_arg!("batch, draws and masks must be non-empty and aligned"));
        }
        let tape = Tape::new();
        let p = self.net.params().bind(&tape);
        let loss_var = self.build_loss(&tape, &p, batch, &draws, masks)?;
        let loss = tape.value(loss_var).data()[0].to_f64().unwrap_or(f64::NAN);
        if !loss.is_finite() {
            let culprit = (0..batch.len())
                .find(|&i| {
                    self.evaluate_loss(&batch[i..=i], &draws[i..=i], &masks[i..=i])
                        .map_or(true, |l| !l.is_finite())
                })
                .unwrap_or(0);
            return Err(Error::NonFiniteLoss {
                sample: culprit,
                ratio: draws[culprit].ratio,
            });
        }
        let grads = tape.backward(loss_var)?;
        let grads = self.net.params().collect_grads(&grads, &p);
        drop(p);
        drop(tape);
        self.optimizer.step(self.net.params_mut(), &grads)?;
        Ok(StepReport { loss, draws })
    }

    /// One pass over `data` in shuffled mini-batches; returns per-step losses.
    pub fn train_epoch(&mut self, data: &[Sample<T>]) -> Result<Vec<f64>> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<Sample<T>> = chunk
                .iter()
                .map(|&i| {
                    let s = &data[i];
                    if self.config.augment {
                        let (h, w) = s.dims();
                        let code = if h == w {
                            self.rng.gen_range(0..8u8)
                        } else {
                            self.rng.gen_range(0..4u8)
                        };
                        s.transformed(code)
                    } else {
                        s.clone()
                    }
                })
                .collect();
            let report = self.train_step(&batch)?;
            losses.push(report.loss);
        }
        Ok(losses)
    }

    /// `config.epochs` passes; `progress` sees (epoch, mean loss).
    pub fn fit(&mut self, data: &[Sample<T>], mut progress: impl FnMut(usize, f64)) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(invalid_arg!("no training data"));
        }
        let mut all = Vec::new();
        for epoch in 0..self.config.epochs {
            let losses = self.train_epoch(data)?;
            let mean = losses.iter().sum::<f64>() / losses.len() as f64;
            log::debug!("epoch {epoch}: {} steps, mean loss {mean:.5}", losses.len());
            progress(epoch, mean);
            all.extend(losses);
        }
        Ok(all)
    }

    pub fn into_network(self) -> MemoNetwork<T> {
        self.net
    }
}
