//! Boundary benchmark: NMS + thinning, tolerance matching, ODS/OIS under the
//! standard (SEval) and crispness-aware (CEval) protocols, Average
//! Crispness, and best-of-M multi-granularity scoring.

mod matching;
mod nms;

pub use matching::{default_tolerance, f1, match_edges, max_bipartite_matching, MatchCounts};
pub use nms::{average_crispness, edge_normals, nms_thin, non_maximum_suppression, thin_once};

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::maps::{BinaryMap, ProbabilityMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// NMS + thinning before binarisation.
    SEval,
    /// Raw predictions, no post-processing.
    #[default]
    CEval,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::SEval => "seval",
            Protocol::CEval => "ceval",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "seval" => Ok(Protocol::SEval),
            "ceval" => Ok(Protocol::CEval),
            _ => Err(invalid_arg!("unknown protocol {s:?} (expected seval or ceval)")),
        }
    }
}

/// `n` thresholds evenly spaced strictly inside `(0, 1)`: `k/(n+1)`.
pub fn thresholds(n: usize) -> Vec<f32> {
    (1..=n).map(|k| k as f32 / (n + 1) as f32).collect()
}

/// The default 33 thresholds.
pub fn default_thresholds() -> Vec<f32> {
    thresholds(33)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub thresholds: usize,
    /// Tolerance as a fraction of the image diagonal.
    pub tolerance: f64,
    /// Threshold at which Average Crispness is measured.
    pub crispness_threshold: f32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::CEval,
            thresholds: 33,
            tolerance: 0.0075,
            crispness_threshold: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds == 0 {
            return Err(invalid_arg!("at least one threshold is required"));
        }
        if !(self.tolerance >= 0.0 && self.tolerance.is_finite()) {
            return Err(invalid_arg!("tolerance must be non-negative, got {}", self.tolerance));
        }
        if !(self.crispness_threshold > 0.0 && self.crispness_threshold <= 1.0) {
            return Err(invalid_arg!("crispness threshold must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn tolerance_px(&self, height: usize, width: usize) -> f64 {
        self.tolerance * ((height * height + width * width) as f64).sqrt()
    }
}

/// Per-threshold match counts of one prediction against its ground truth.
pub fn image_counts(p: &ProbabilityMap, gt: &BinaryMap, thresholds: &[f32], protocol: Protocol, tol_px: f64) -> Result<Vec<MatchCounts>> {
    if p.dims() != gt.dims() {
        return Err(invalid_arg!("prediction {:?} and ground truth {:?} differ in shape", p.dims(), gt.dims()));
    }
    let processed;
    let src = match protocol {
        Protocol::SEval => {
            processed = nms_thin(p);
            &processed
        }
        Protocol::CEval => p,
    };
    Ok(thresholds.iter().map(|&t| match_edges(&src.binarize(t), gt, tol_px)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub threshold: f32,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRow {
    pub index: usize,
    pub best_threshold: f32,
    pub best_f1: f64,
    /// Average Crispness of the raw prediction.
    pub crispness: f64,
    /// Granularity scale chosen for this image (multi-granularity only).
    pub scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub ods: f64,
    pub ods_threshold: f32,
    pub ois: f64,
    /// Mean Average Crispness over images.
    pub crispness: f64,
    pub curve: Vec<CurvePoint>,
    pub images: Vec<ImageRow>,
}

impl EvalReport {
    /// Tab-separated report: summary, precision/recall curve, per-image rows.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# summary\nprotocol\tods\tods_threshold\tois\tac");
        let _ = writeln!(
            s,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.protocol, self.ods, self.ods_threshold, self.ois, self.crispness
        );
        let _ = writeln!(s, "# curve\nthreshold\tprecision\trecall\tf1");
        for c in &self.curve {
            let _ = writeln!(s, "{:.6}\t{:.6}\t{:.6}\t{:.6}", c.threshold, c.precision, c.recall, c.f1);
        }
        let _ = writeln!(s, "# images\nindex\tbest_threshold\tbest_f1\tac\tscale");
        for r in &self.images {
            let scale = r.scale.map_or_else(|| "-".to_string(), |v| format!("{v}"));
            let _ = writeln!(s, "{}\t{:.6}\t{:.6}\t{:.6}\t{}", r.index, r.best_threshold, r.best_f1, r.crispness, scale);
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: ODS {:.4} (t={:.3})  OIS {:.4}  AC {:.4}  over {} images",
            self.protocol.to_string().to_uppercase(),
            self.ods,
            self.ods_threshold,
            self.ois,
            self.crispness,
            self.images.len()
        )
    }
}

fn best_threshold(counts: &[MatchCounts], thresholds: &[f32]) -> (f32, f64) {
    let mut best = (thresholds[0], f64::NEG_INFINITY);
    for (c, &t) in counts.iter().zip(thresholds) {
        let f = c.f1();
        if f > best.1 {
            best = (t, f);
        }
    }
    best
}

fn curve_from(totals: &[MatchCounts], thresholds: &[f32]) -> (Vec<CurvePoint>, f64, f32) {
    let curve: Vec<CurvePoint> = totals
        .iter()
        .zip(thresholds)
        .map(|(c, &t)| CurvePoint {
            threshold: t,
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
        })
        .collect();
    let (t, f) = best_threshold(totals, thresholds);
    (curve, f, t)
}

/// ODS/OIS over a dataset at one granularity.
pub fn ods_ois(
    preds: &[ProbabilityMap],
    gts: &[BinaryMap],
    thresholds: &[f32],
    protocol: Protocol,
) -> Result<EvalReport> {
    multi_granularity_eval(&[(1.0, preds.to_vec())], gts, thresholds, protocol).map(|mut r| {
        for row in &mut r.images {
            row.scale = None;
        }
        r
    })
}

/// Best-of-M scoring: per image and threshold the best-scoring scale is
/// taken before aggregation (ODS); OIS averages each image's best F1 over
/// scales and thresholds.
pub fn multi_granularity_eval(
    per_scale: &[(f64, Vec<ProbabilityMap>)],
    gts: &[BinaryMap],
    thresholds: &[f32],
    protocol: Protocol,
) -> Result<EvalReport> {
    evaluate_with(per_scale, gts, thresholds, protocol, &EvalConfig::default())
}

/// [`multi_granularity_eval`] with explicit tolerance and crispness settings.
pub fn evaluate_with(
    per_scale: &[(f64, Vec<ProbabilityMap>)],
    gts: &[BinaryMap],
    thresholds: &[f32],
    protocol: Protocol,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if per_scale.is_empty() {
        return Err(invalid_arg!("no predictions supplied"));
    }
    if thresholds.is_empty() {
        return Err(invalid_arg!("at least one threshold is required"));
    }
    for (s, preds) in per_scale {
        if preds.len() != gts.len() {
            return Err(invalid_arg!(
                "scale {s} has {} predictions for {} ground-truth maps",
                preds.len(),
                gts.len()
            ));
        }
    }
    if gts.is_empty() {
        return Err(invalid_arg!("empty dataset"));
    }

    // counts[image][scale][threshold]
    let counts: Vec<Vec<Vec<MatchCounts>>> = (0..gts.len())
        .into_par_iter()
        .map(|i| {
            let (h, w) = gts[i].dims();
            let tol = cfg.tolerance_px(h, w);
            per_scale
                .iter()
                .map(|(_, preds)| image_counts(&preds[i], &gts[i], thresholds, protocol, tol))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut totals = vec![MatchCounts::default(); thresholds.len()];
    for per_image in &counts {
        for (k, total) in totals.iter_mut().enumerate() {
            let best = per_image
                .iter()
                .map(|c| c[k])
                .fold(None::<MatchCounts>, |acc, c| match acc {
                    Some(a) if a.f1() >= c.f1() => Some(a),
                    _ => Some(c),
                })
                .expect("at least one scale");
            total.add(best);
        }
    }
    let (curve, ods, ods_threshold) = curve_from(&totals, thresholds);

    let images: Vec<ImageRow> = counts
        .par_iter()
        .enumerate()
        .map(|(i, per_image)| {
            let mut best = (0usize, thresholds[0], f64::NEG_INFINITY);
            for (s, c) in per_image.iter().enumerate() {
                let (t, f) = best_threshold(c, thresholds);
                if f > best.2 {
                    best = (s, t, f);
                }
            }
            let (scale, preds) = &per_scale[best.0];
            ImageRow {
                index: i,
                best_threshold: best.1,
                best_f1: best.2,
                crispness: average_crispness(&preds[i], cfg.crispness_threshold),
                scale: Some(*scale),
            }
        })
        .collect();
    let n = images.len() as f64;
    Ok(EvalReport {
        protocol,
        ods,
        ods_threshold,
        ois: images.iter().map(|r| r.best_f1).sum::<f64>() / n,
        crispness: images.iter().map(|r| r.crispness).sum::<f64>() / n,
        curve,
        images,
    })
}

/// Mean Average Crispness of a set of maps.
pub fn mean_crispness(maps: &[ProbabilityMap], threshold: f32) -> f64 {
    if maps.is_empty() {
        return 1.0;
    }
    maps.par_iter().map(|p| average_crispness(p, threshold)).sum::<f64>() / maps.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(seed: usize) -> BinaryMap {
        BinaryMap::from_fn(16, 16, |y, x| x == 3 + seed % 5 || y == 2 * (seed % 4) + 5)
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gts: Vec<BinaryMap> = (0..4).map(gt).collect();
        let preds: Vec<ProbabilityMap> = gts.iter().map(BinaryMap::to_probability).collect();
        for protocol in [Protocol::SEval, Protocol::CEval] {
            let r = ods_ois(&preds, &gts, &default_thresholds(), protocol).unwrap();
            assert_eq!(r.ods, 1.0);
            assert_eq!(r.ois, 1.0);
        }
    }

    #[test]
    fn single_image_ois_equals_ods() {
        let g = vec![gt(1)];
        let p = vec![ProbabilityMap::from_fn(16, 16, |y, x| ((x * 7 + y * 3) % 10) as f32 / 10.0)];
        let r = ods_ois(&p, &g, &default_thresholds(), Protocol::CEval).unwrap();
        assert!((r.ods - r.ois).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let r = ods_ois(&[ProbabilityMap::zeros(4, 4)], &[], &default_thresholds(), Protocol::CEval);
        assert!(r.is_err());
        let ragged = multi_granularity_eval(
            &[(1.0, vec![ProbabilityMap::zeros(16, 16)]), (1.5, vec![])],
            &[gt(0)],
            &default_thresholds(),
            Protocol::CEval,
        );
        assert!(ragged.is_err());
    }

    #[test]
    fn thresholds_are_interior() {
        let t = default_thresholds();
        assert_eq!(t.len(), 33);
        assert!(t[0] > 0.0 && t[32] < 1.0);
        assert!((t[16] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn one_scale_equals_plain_evaluation() {
        let gts: Vec<BinaryMap> = (0..3).map(gt).collect();
        let preds: Vec<ProbabilityMap> = (0..3)
            .map(|s| ProbabilityMap::from_fn(16, 16, |y, x| if gts[s].get(y, x) { 0.7 } else { ((x + s) % 4) as f32 / 6.0 }))
            .collect();
        let a = ods_ois(&preds, &gts, &default_thresholds(), Protocol::SEval).unwrap();
        let b = multi_granularity_eval(&[(1.3, preds)], &gts, &default_thresholds(), Protocol::SEval).unwrap();
        assert_eq!((a.ods, a.ois), (b.ods, b.ois));
    }

    #[test]
    fn dominated_scale_never_lowers_scores() {
        let gts: Vec<BinaryMap> = (0..3).map(gt).collect();
        let good: Vec<ProbabilityMap> = gts
            .iter()
            .map(|g| ProbabilityMap::from_fn(16, 16, |y, x| if g.get(y, x) { 0.8 } else { 0.3 * ((x + y) % 2) as f32 }))
            .collect();
        let bad: Vec<ProbabilityMap> = (0..3).map(|_| ProbabilityMap::zeros(16, 16)).collect();
        let t = default_thresholds();
        let one = multi_granularity_eval(&[(1.0, good.clone())], &gts, &t, Protocol::CEval).unwrap();
        let two = multi_granularity_eval(&[(1.0, good), (2.0, bad)], &gts, &t, Protocol::CEval).unwrap();
        assert!(two.ods >= one.ods && two.ois >= one.ois);
    }

    #[test]
    fn report_formats() {
        let g = vec![gt(2)];
        let r = ods_ois(&[g[0].to_probability()], &g, &thresholds(3), Protocol::CEval).unwrap();
        let tsv = r.to_tsv();
        assert!(tsv.starts_with("# summary\nprotocol\tods"));
        assert_eq!(tsv.lines().filter(|l| l.starts_with("0.")).count(), 3);
        assert!(r.summary().starts_with("CEVAL: ODS 1.0000"));
        assert_eq!("SEval".parse::<Protocol>().unwrap(), Protocol::SEval);
    }
}
