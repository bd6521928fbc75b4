//! Small image-processing kernels shared by data generation and evaluation.

use crate::maps::BinaryMap;

/// How samples beyond the image border are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Border {
    /// Out-of-image samples are zero.
    Zero,
    /// Out-of-image samples repeat the nearest edge sample.
    Replicate,
}

/// Normalised 1-D Gaussian taps over `[-⌈3σ⌉, ⌈3σ⌉]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

fn sample(plane: &[f32], h: usize, w: usize, y: isize, x: isize, border: Border) -> f64 {
    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
        return plane[y as usize * w + x as usize] as f64;
    }
    match border {
        Border::Zero => 0.0,
        Border::Replicate => {
            let yy = y.clamp(0, h as isize - 1) as usize;
            let xx = x.clamp(0, w as isize - 1) as usize;
            plane[yy * w + xx] as f64
        }
    }
}

/// Separable Gaussian blur of one `h×w` plane. `sigma ≤ 0` copies the input.
pub fn gaussian_blur(plane: &[f32], h: usize, w: usize, sigma: f64, border: Border) -> Vec<f32> {
    if sigma <= 0.0 || plane.is_empty() {
        return plane.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let acc: f64 = k
                .iter()
                .enumerate()
                .map(|(j, &t)| t * sample(plane, h, w, y as isize, x as isize + j as isize - r, border))
                .sum();
            tmp[y * w + x] = acc as f32;
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let acc: f64 = k
                .iter()
                .enumerate()
                .map(|(j, &t)| t * sample(&tmp, h, w, y as isize + j as isize - r, x as isize, border))
                .sum();
            out[y * w + x] = acc as f32;
        }
    }
    out
}

/// Sobel derivatives `(gx, gy)` of one plane, zero outside the image.
pub fn sobel(plane: &[f32], h: usize, w: usize) -> (Vec<f32>, Vec<f32>) {
    let mut gx = vec![0f32; h * w];
    let mut gy = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let s = |dy: isize, dx: isize| sample(plane, h, w, y as isize + dy, x as isize + dx, Border::Zero);
            let dx = (s(-1, 1) + 2.0 * s(0, 1) + s(1, 1)) - (s(-1, -1) + 2.0 * s(0, -1) + s(1, -1));
            let dy = (s(1, -1) + 2.0 * s(1, 0) + s(1, 1)) - (s(-1, -1) + 2.0 * s(-1, 0) + s(-1, 1));
            gx[y * w + x] = dx as f32;
            gy[y * w + x] = dy as f32;
        }
    }
    (gx, gy)
}

/// Bilinear sample at a fractional position, zero outside the image.
pub fn bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let s = |yy, xx| sample(plane, h, w, yy, xx, Border::Zero);
    (1.0 - fy) * ((1.0 - fx) * s(y0, x0) + fx * s(y0, x0 + 1)) + fy * ((1.0 - fx) * s(y0 + 1, x0) + fx * s(y0 + 1, x0 + 1))
}

/// Erosion by the full 3×3 element; out-of-image pixels count as background.
pub fn erode3(mask: &BinaryMap) -> BinaryMap {
    let (h, w) = mask.dims();
    BinaryMap::from_fn(h, w, |y, x| {
        (-1..=1).all(|dy| (-1..=1).all(|dx| mask.get_signed(y as isize + dy, x as isize + dx)))
    })
}

/// Dilation by the `(2r+1)×(2r+1)` square.
pub fn dilate(mask: &BinaryMap, radius: usize) -> BinaryMap {
    let (h, w) = mask.dims();
    let r = radius as isize;
    BinaryMap::from_fn(h, w, |y, x| {
        (-r..=r).any(|dy| (-r..=r).any(|dx| mask.get_signed(y as isize + dy, x as isize + dx)))
    })
}

/// Morphological opening by the full 3×3 element: keeps exactly the pixels
/// covered by some 3×3 square lying inside the mask.
pub fn open3(mask: &BinaryMap) -> BinaryMap {
    dilate(&erode3(mask), 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_taps_are_normalised_and_symmetric() {
        let k = gaussian_kernel(1.0);
        assert_eq!(k.len(), 7);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(k[0], k[6]);
    }

    #[test]
    fn blur_preserves_constants_with_replicated_border() {
        let plane = vec![0.25f32; 35];
        for v in gaussian_blur(&plane, 5, 7, 1.3, Border::Replicate) {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn sobel_of_a_horizontal_ramp() {
        let plane: Vec<f32> = (0..25).map(|i| (i % 5) as f32).collect();
        let (gx, gy) = sobel(&plane, 5, 5);
        assert_eq!(gx[12], 8.0);
        assert_eq!(gy[12], 0.0);
    }

    #[test]
    fn bilinear_interpolates_between_samples() {
        let plane = [0.0f32, 1.0, 2.0, 3.0];
        assert!((bilinear(&plane, 2, 2, 0.5, 0.5) - 1.5).abs() < 1e-12);
        assert_eq!(bilinear(&plane, 2, 2, -1.0, 0.0), 0.0);
    }

    #[test]
    fn opening_removes_thin_slivers() {
        let m = BinaryMap::from_fn(8, 8, |y, x| (2..6).contains(&y) && (1..7).contains(&x) || (x == 0 && y < 2));
        let o = open3(&m);
        assert_eq!(o.count(), 24);
        assert!(!o.get(0, 0));
    }
}
