//! Confidence-ordered iterative unmasking.
//!
//! Inference starts from a fully masked edge map. Each step predicts edge
//! probabilities for every pixel, picks a subset of the still-masked pixels
//! according to the strategy, and finalises them at the threshold. After
//! `steps − 1` such iterations one more prediction finalises everything that
//! is left (the early-stop flush).

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::maps::{BinaryMap, EdgeState, ProbabilityMap, TriStateEdgeMap};
use crate::model::{to_probabilities, GranularityScale, GuidedEncoding, MemoNetwork};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rule choosing which masked pixels are finalised in a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Pixels whose confidence is maximal within their 3×3 neighbourhood.
    #[default]
    LocMax,
    /// A uniformly random subset of fixed size.
    Random,
    /// The globally most confident pixels, fixed count per step.
    TopK,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::LocMax, Strategy::Random, Strategy::TopK];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::LocMax => "locmax",
            Strategy::Random => "random",
            Strategy::TopK => "topk",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "locmax" => Ok(Strategy::LocMax),
            "random" => Ok(Strategy::Random),
            "topk" => Ok(Strategy::TopK),
            _ => Err(invalid_arg!("unknown strategy {s:?} (expected locmax, random or topk)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Early-stop horizon: at most this many forward passes per branch.
    pub steps: usize,
    pub strategy: Strategy,
    /// Classifier-free-guidance granularity scale.
    pub scale: f64,
    /// Fraction of all pixels finalised per step (Random/TopK only);
    /// defaults to `1/steps`.
    pub fraction: Option<f64>,
    pub threshold: f32,
    /// Seed of the Random strategy.
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            strategy: Strategy::LocMax,
            scale: 1.0,
            fraction: None,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl InferenceConfig {
    /// Iterate until every pixel has been finalised, without a flush.
    pub fn full() -> Self {
        Self {
            steps: usize::MAX,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid_arg!("inference needs at least one step"));
        }
        GranularityScale::new(self.scale)?;
        if let Some(f) = self.fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(invalid_arg!("unmask fraction must lie in (0, 1], got {f}"));
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(invalid_arg!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        Ok(())
    }

    pub fn granularity(&self) -> Result<GranularityScale> {
        GranularityScale::new(self.scale)
    }

    /// Pixels finalised per step by Random/TopK on an image of `pixels` pixels.
    pub fn per_step_count(&self, pixels: usize) -> usize {
        let f = self.fraction.unwrap_or(1.0 / self.steps as f64);
        ((f * pixels as f64).ceil() as usize).max(1)
    }
}

/// Record of one inference run.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceTrace {
    /// Masked-pixel count before the first step, then after every step.
    pub masked_counts: Vec<usize>,
    /// Zero-based step at which each pixel (row-major) was finalised.
    pub finalized_at: Vec<usize>,
    /// Edge probability each pixel had in the pass that finalised it.
    pub finalized_probability: Vec<f32>,
    /// Forward passes per guidance branch.
    pub forward_passes: usize,
    /// Whether the last step was an early-stop flush.
    pub flushed: bool,
}

impl InferenceTrace {
    /// Fraction of pixels finalised within the first `steps` steps.
    pub fn finalized_within(&self, steps: usize) -> f64 {
        let n = self.finalized_at.len();
        if n == 0 {
            return 1.0;
        }
        self.finalized_at.iter().filter(|&&s| s < steps).count() as f64 / n as f64
    }

    /// Finalising probabilities as a map: a soft view of the decoded result
    /// whose binarisation at the inference threshold is the output.
    pub fn soft_map(&self, height: usize, width: usize) -> Result<ProbabilityMap> {
        ProbabilityMap::new(height, width, self.finalized_probability.clone())
    }

    /// Tab-separated `step, masked, finalized` lines with a header.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\tmasked\tfinalized\n");
        for (t, pair) in self.masked_counts.windows(2).enumerate() {
            out.push_str(&format!("{}\t{}\t{}\n", t, pair[1], pair[0] - pair[1]));
        }
        out
    }
}

/// `max(p, 1−p)` at masked pixels, zero at finalised ones.
pub fn confidence(p: &ProbabilityMap, edges: &TriStateEdgeMap) -> Result<Vec<f32>> {
    if p.dims() != edges.dims() {
        return Err(invalid_arg!(
            "probability map {:?} and edge map {:?} differ in shape",
            p.dims(),
            edges.dims()
        ));
    }
    Ok(p.data()
        .iter()
        .zip(edges.cells())
        .map(|(&v, &c)| if c == EdgeState::Masked { v.max(1.0 - v) } else { 0.0 })
        .collect())
}

/// Masked pixels whose confidence is ≥ every confidence in their clipped
/// 3×3 neighbourhood; plateaus select every member.
pub fn locmax_select(c: &[f32], edges: &TriStateEdgeMap) -> Vec<usize> {
    let (h, w) = edges.dims();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !edges.is_masked_at(i) {
                continue;
            }
            let ci = c[i];
            let maximal = (y.saturating_sub(1)..(y + 2).min(h))
                .all(|ny| (x.saturating_sub(1)..(x + 2).min(w)).all(|nx| c[ny * w + nx] <= ci));
            if maximal {
                out.push(i);
            }
        }
    }
    out
}

/// The `count` most confident masked pixels; equal confidences resolve in
/// row-major order.
pub fn topk_select(c: &[f32], edges: &TriStateEdgeMap, count: usize) -> Vec<usize> {
    let mut masked: Vec<usize> = (0..c.len()).filter(|&i| edges.is_masked_at(i)).collect();
    masked.sort_by(|&a, &b| c[b].total_cmp(&c[a]).then(a.cmp(&b)));
    masked.truncate(count);
    masked.sort_unstable();
    masked
}

/// A uniformly random subset of `count` masked pixels.
pub fn random_select(edges: &TriStateEdgeMap, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let masked: Vec<usize> = (0..edges.cells().len()).filter(|&i| edges.is_masked_at(i)).collect();
    let k = count.min(masked.len());
    let mut picked: Vec<usize> = sample(rng, masked.len(), k).into_iter().map(|j| masked[j]).collect();
    picked.sort_unstable();
    picked
}

/// Pixels `select` would finalise given the current probabilities.
pub fn select(
    p: &ProbabilityMap,
    edges: &TriStateEdgeMap,
    cfg: &InferenceConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let c = confidence(p, edges)?;
    let count = cfg.per_step_count(c.len());
    Ok(match cfg.strategy {
        Strategy::LocMax => locmax_select(&c, edges),
        Strategy::TopK => topk_select(&c, edges, count),
        Strategy::Random => random_select(edges, count, rng),
    })
}

fn finalize(edges: &mut TriStateEdgeMap, p: &ProbabilityMap, pixels: &[usize], threshold: f32) {
    for &i in pixels {
        let state = if p.data()[i] >= threshold {
            EdgeState::Edge
        } else {
            EdgeState::Background
        };
        edges.set_at(i, state);
    }
}

/// Guided probabilities for the current state at `r = masked_fraction`.
fn step_probabilities<T: Scalar>(
    net: &MemoNetwork<T>,
    enc: &GuidedEncoding<T>,
    edges: &TriStateEdgeMap,
) -> Result<ProbabilityMap> {
    let (h, w) = edges.dims();
    to_probabilities(h, w, &net.guided_logits(enc, edges, edges.masked_fraction())?)
}

/// One unmasking iteration: predict, select, finalise. Returns the
/// probabilities used and the finalised pixels.
pub fn unmask_step<T: Scalar>(
    net: &MemoNetwork<T>,
    enc: &GuidedEncoding<T>,
    edges: &mut TriStateEdgeMap,
    cfg: &InferenceConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ProbabilityMap, Vec<usize>)> {
    if edges.masked_count() == 0 {
        return Err(Error::InvalidState("no masked pixels left to finalise".into()));
    }
    let p = step_probabilities(net, enc, edges)?;
    let chosen = select(&p, edges, cfg, rng)?;
    finalize(edges, &p, &chosen, cfg.threshold);
    Ok((p, chosen))
}

/// Full prediction loop from the all-masked state.
pub fn run_inference<T: Scalar>(
    net: &MemoNetwork<T>,
    image: &Tensor<T>,
    cfg: &InferenceConfig,
) -> Result<(BinaryMap, InferenceTrace)> {
    cfg.validate()?;
    let enc = net.encode_guided(image, cfg.granularity()?)?;
    let &[_, h, w] = image.shape() else {
        return Err(invalid_arg!("image must be [3,H,W], got {:?}", image.shape()));
    };
    let mut edges = TriStateEdgeMap::all_masked(h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = InferenceTrace {
        masked_counts: vec![h * w],
        finalized_at: vec![usize::MAX; h * w],
        finalized_probability: vec![0.0; h * w],
        forward_passes: 0,
        flushed: false,
    };
    let mut step = 0;
    while edges.masked_count() > 0 {
        let (p, chosen) = if step + 1 >= cfg.steps {
            let p = step_probabilities(net, &enc, &edges)?;
            let rest: Vec<usize> = (0..h * w).filter(|&i| edges.is_masked_at(i)).collect();
            finalize(&mut edges, &p, &rest, cfg.threshold);
            trace.flushed = true;
            (p, rest)
        } else {
            unmask_step(net, &enc, &mut edges, cfg, &mut rng)?
        };
        for i in chosen {
            trace.finalized_at[i] = step;
            trace.finalized_probability[i] = p.data()[i];
        }
        trace.forward_passes += 1;
        trace.masked_counts.push(edges.masked_count());
        step += 1;
    }
    Ok((edges.to_binary(), trace))
}

/// Run inference over several images, in parallel across images.
pub fn run_batch<T: Scalar>(
    net: &MemoNetwork<T>,
    images: &[Tensor<T>],
    cfg: &InferenceConfig,
) -> Result<Vec<(BinaryMap, InferenceTrace)>> {
    images.par_iter().map(|im| run_inference(net, im, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn masked_row(n: usize) -> TriStateEdgeMap {
        TriStateEdgeMap::all_masked(1, n)
    }

    #[test]
    fn confidence_examples() {
        let p = ProbabilityMap::new(1, 4, vec![0.5, 0.9, 0.1, 0.99]).unwrap();
        let mut e = masked_row(4);
        e.set_at(3, EdgeState::Edge);
        let c = confidence(&p, &e).unwrap();
        assert_eq!(c[0], 0.5);
        assert_eq!(c[1], c[2]);
        assert!((c[1] - 0.9).abs() < 1e-7);
        assert_eq!(c[3], 0.0);
    }

    #[test]
    fn locmax_examples() {
        assert_eq!(locmax_select(&[0.9, 0.6, 0.8], &masked_row(3)), vec![0, 2]);
        let mut e = TriStateEdgeMap::all_masked(3, 3);
        for i in 0..9 {
            if i != 7 {
                e.set_at(i, EdgeState::Background);
            }
        }
        assert_eq!(locmax_select(&[0.0; 9], &e), vec![7]);
        assert_eq!(locmax_select(&[0.7; 6], &TriStateEdgeMap::all_masked(2, 3)).len(), 6);
    }

    #[test]
    fn locmax_border_neighbourhoods_are_clipped() {
        // Pixel 2 is a corner; its clipped neighbourhood is {1, 2, 4, 5}.
        let c = [0.1, 0.6, 0.7, 0.9, 0.1, 0.6];
        assert_eq!(locmax_select(&c, &TriStateEdgeMap::all_masked(2, 3)), vec![2, 3]);
    }

    #[test]
    fn topk_example_and_ties() {
        assert_eq!(topk_select(&[0.6, 0.9, 0.85], &masked_row(3), 2), vec![1, 2]);
        assert_eq!(topk_select(&[0.7, 0.7, 0.7, 0.9], &masked_row(4), 2), vec![0, 3]);
    }

    #[test]
    fn random_picks_only_masked_pixels() {
        let mut e = masked_row(10);
        for i in 0..5 {
            e.set_at(i, EdgeState::Edge);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pick = random_select(&e, 20, &mut rng);
        assert_eq!(pick, vec![5, 6, 7, 8, 9]);
    }

    #[test]
    fn per_step_count_defaults_to_equal_shares() {
        let cfg = InferenceConfig {
            steps: 4,
            ..Default::default()
        };
        assert_eq!(cfg.per_step_count(10), 3);
        let cfg = InferenceConfig {
            fraction: Some(1.0),
            ..cfg
        };
        assert_eq!(cfg.per_step_count(10), 10);
    }

    #[test]
    fn config_validation() {
        assert!(InferenceConfig::default().validate().is_ok());
        let bad = [
            InferenceConfig { steps: 0, ..Default::default() },
            InferenceConfig { scale: 0.0, ..Default::default() },
            InferenceConfig { fraction: Some(0.0), ..Default::default() },
            InferenceConfig { fraction: Some(1.5), ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        assert_eq!("TopK".parse::<Strategy>().unwrap(), Strategy::TopK);
        assert!("greedy".parse::<Strategy>().is_err());
    }

    fn tiny_net() -> MemoNetwork<f64> {
        MemoNetwork::new(
            ModelConfig {
                channels: vec![4, 8],
                embed_dim: 8,
                zero_init_head: false,
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn single_step_is_one_thresholded_pass() {
        let net = tiny_net();
        let img = Tensor::from_fn(&[3, 4, 4], |i| (i % 5) as f64 / 5.0);
        let cfg = InferenceConfig {
            steps: 1,
            ..Default::default()
        };
        let (out, trace) = run_inference(&net, &img, &cfg).unwrap();
        assert_eq!(trace.forward_passes, 1);
        assert!(trace.flushed);
        let p = net.predict(&img, &TriStateEdgeMap::all_masked(4, 4), 1.0).unwrap();
        assert_eq!(out, p.binarize(0.5));
    }

    #[test]
    fn unmask_step_on_complete_map_is_an_error() {
        let net = tiny_net();
        let img = Tensor::zeros(&[3, 2, 2]);
        let enc = net.encode_guided(&img, GranularityScale::UNIT).unwrap();
        let mut e = TriStateEdgeMap::from_binary(&BinaryMap::new(2, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            unmask_step(&net, &enc, &mut e, &InferenceConfig::default(), &mut rng),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn trace_is_strictly_decreasing_and_complete() {
        let net = tiny_net();
        let img = Tensor::from_fn(&[3, 4, 4], |i| ((i * 7) % 11) as f64 / 11.0);
        for strategy in Strategy::ALL {
            let cfg = InferenceConfig {
                steps: 5,
                strategy,
                ..Default::default()
            };
            let (_, trace) = run_inference(&net, &img, &cfg).unwrap();
            assert!(trace.masked_counts.windows(2).all(|w| w[1] < w[0]));
            assert_eq!(*trace.masked_counts.last().unwrap(), 0);
            assert!(trace.forward_passes <= 5);
            assert!(trace.finalized_at.iter().all(|&s| s < trace.forward_passes));
        }
    }
}
