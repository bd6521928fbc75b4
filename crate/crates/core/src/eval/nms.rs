//! Orientation-based non-maximum suppression followed by one thinning pass.

use crate::imgproc::{bilinear, gaussian_blur, sobel, Border};
use crate::maps::ProbabilityMap;

/// Unit normal `(ny, nx)` of the local edge direction at every pixel, or
/// `None` where the map is locally flat.
///
/// The normal is the dominant eigenvector of the σ=1 structure tensor built
/// from Sobel gradients of the σ=1-smoothed map. Unlike the raw gradient it
/// stays well defined at the crest of a ridge, where the gradient vanishes.
pub fn edge_normals(p: &ProbabilityMap) -> Vec<Option<(f64, f64)>> {
    let (h, w) = p.dims();
    let smooth = gaussian_blur(p.data(), h, w, 1.0, Border::Zero);
    let (gx, gy) = sobel(&smooth, h, w);
    let xx: Vec<f32> = gx.iter().map(|v| v * v).collect();
    let yy: Vec<f32> = gy.iter().map(|v| v * v).collect();
    let xy: Vec<f32> = gx.iter().zip(&gy).map(|(a, b)| a * b).collect();
    let jxx = gaussian_blur(&xx, h, w, 1.0, Border::Zero);
    let jyy = gaussian_blur(&yy, h, w, 1.0, Border::Zero);
    let jxy = gaussian_blur(&xy, h, w, 1.0, Border::Zero);
    (0..h * w)
        .map(|i| {
            let (a, b, c) = (jxx[i] as f64, jyy[i] as f64, jxy[i] as f64);
            if a + b <= 1e-12 {
                return None;
            }
            let theta = 0.5 * (2.0 * c).atan2(a - b);
            Some((theta.sin(), theta.cos()))
        })
        .collect()
}

/// Suppress pixels smaller than either bilinear neighbour one pixel away
/// along the edge normal (out-of-image reads 0). Flat pixels are kept.
pub fn non_maximum_suppression(p: &ProbabilityMap) -> ProbabilityMap {
    let (h, w) = p.dims();
    let normals = edge_normals(p);
    let mut out = p.clone();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let v = p.data()[i] as f64;
            if v <= 0.0 {
                continue;
            }
            let Some((ny, nx)) = normals[i] else { continue };
            let (fy, fx) = (y as f64, x as f64);
            let a = bilinear(p.data(), h, w, fy + ny, fx + nx);
            let b = bilinear(p.data(), h, w, fy - ny, fx - nx);
            if v < a || v < b {
                out.data_mut()[i] = 0.0;
            }
        }
    }
    out
}

/// One Zhang–Suen pass (both sub-iterations) over the non-zero support;
/// removed pixels are set to zero.
pub fn thin_once(p: &ProbabilityMap) -> ProbabilityMap {
    let (h, w) = p.dims();
    let mut on: Vec<bool> = p.data().iter().map(|&v| v > 0.0).collect();
    for first in [true, false] {
        let at = |on: &[bool], y: isize, x: isize| {
            y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && on[y as usize * w + x as usize]
        };
        let mut remove = Vec::new();
        for y in 0..h as isize {
            for x in 0..w as isize {
                if !at(&on, y, x) {
                    continue;
                }
                // P2..P9 clockwise from north.
                let n = [
                    at(&on, y - 1, x),
                    at(&on, y - 1, x + 1),
                    at(&on, y, x + 1),
                    at(&on, y + 1, x + 1),
                    at(&on, y + 1, x),
                    at(&on, y + 1, x - 1),
                    at(&on, y, x - 1),
                    at(&on, y - 1, x - 1),
                ];
                let b = n.iter().filter(|&&v| v).count();
                let a = (0..8).filter(|&k| !n[k] && n[(k + 1) % 8]).count();
                let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
                let side = if first {
                    !(p2 && p4 && p6) && !(p4 && p6 && p8)
                } else {
                    !(p2 && p4 && p8) && !(p2 && p6 && p8)
                };
                if (2..=6).contains(&b) && a == 1 && side {
                    remove.push(y as usize * w + x as usize);
                }
            }
        }
        for i in remove {
            on[i] = false;
        }
    }
    let mut out = p.clone();
    for (v, keep) in out.data_mut().iter_mut().zip(on) {
        if !keep {
            *v = 0.0;
        }
    }
    out
}

/// Non-maximum suppression followed by one thinning pass. Surviving values
/// are unchanged.
pub fn nms_thin(p: &ProbabilityMap) -> ProbabilityMap {
    thin_once(&non_maximum_suppression(p))
}

/// Fraction of pixels at or above `threshold` that survive [`nms_thin`];
/// 1.0 when no pixel reaches the threshold.
pub fn average_crispness(p: &ProbabilityMap, threshold: f32) -> f64 {
    let before = p.data().iter().filter(|&&v| v >= threshold).count();
    if before == 0 {
        return 1.0;
    }
    let after = nms_thin(p).data().iter().filter(|&&v| v >= threshold).count();
    after as f64 / before as f64
}
