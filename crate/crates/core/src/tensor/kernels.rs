//! Forward and backward kernels over raw row-major buffers.
//!
//! Convolutions lower to im2col + GEMM; everything else is a direct loop.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    for c in 0..g.in_channels {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *out = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    for c in 0..g.in_channels {
        let dxc = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dxc[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x` `[N,C,H,W]` with `kernel` `[O,C,kh,kw]`.
pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let in_size = g.in_channels * g.height * g.width;
    let out_size = g.out_channels * plane;
    let mut out = vec![T::zero(); g.batch * out_size];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch_len() * plane]
    };
    for n in 0..g.batch {
        let xn = &x[n * in_size..(n + 1) * in_size];
        let yn = &mut out[n * out_size..(n + 1) * out_size];
        if let Some(b) = bias {
            for (o, chunk) in yn.chunks_mut(plane).enumerate() {
                chunk.fill(b[o]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let rhs: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        T::gemm(g.out_channels, g.patch_len(), plane, kernel, false, rhs, false, beta, yn);
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input, kernel and bias.
///
/// Kernel and bias gradients are accumulated into the given buffers.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    kernel: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dkernel: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let plane = g.out_height() * g.out_width();
    let in_size = g.in_channels * g.height * g.width;
    let out_size = g.out_channels * plane;
    let patch = g.patch_len();

    if let Some(db) = dbias {
        for n in 0..g.batch {
            let dyn_ = &dy[n * out_size..(n + 1) * out_size];
            for (o, chunk) in dyn_.chunks(plane).enumerate() {
                db[o] += chunk.iter().copied().sum::<T>();
            }
        }
    }

    let mut cols = vec![T::zero(); patch * plane];
    if let Some(dk) = dkernel {
        for n in 0..g.batch {
            let xn = &x[n * in_size..(n + 1) * in_size];
            let dyn_ = &dy[n * out_size..(n + 1) * out_size];
            let rhs: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(g, xn, &mut cols);
                &cols
            };
            // dK[O, patch] += dY[O, plane] · cols[patch, plane]^T
            T::gemm(g.out_channels, plane, patch, dyn_, false, rhs, true, T::one(), dk);
        }
    }

    if let Some(dx) = dx {
        for n in 0..g.batch {
            let dyn_ = &dy[n * out_size..(n + 1) * out_size];
            let dxn = &mut dx[n * in_size..(n + 1) * in_size];
            if g.is_pointwise() {
                T::gemm(patch, g.out_channels, plane, kernel, true, dyn_, false, T::one(), dxn);
            } else {
                // dcols[patch, plane] = K[O, patch]^T · dY[O, plane]
                T::gemm(patch, g.out_channels, plane, kernel, true, dyn_, false, T::zero(), &mut cols);
                col2im(g, &cols, dxn);
            }
        }
    }
}

/// Per-(sample, group) statistics saved by [`group_norm_forward`].
#[derive(Debug, Clone)]
pub struct GroupStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn group_norm_forward<T: Scalar>(
    x: &[T],
    shape: [usize; 4],
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, GroupStats<T>) {
    let [n, c, h, w] = shape;
    let plane = h * w;
    let per_group = c / groups;
    let count = T::from_usize(per_group * plane).unwrap();
    let mut out = vec![T::zero(); x.len()];
    let mut mean = Vec::with_capacity(n * groups);
    let mut rstd = Vec::with_capacity(n * groups);
    for s in 0..n {
        for g in 0..groups {
            let start = (s * c + g * per_group) * plane;
            let end = start + per_group * plane;
            let seg = &x[start..end];
            let mu = seg.iter().copied().sum::<T>() / count;
            let var = seg.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / count;
            let r = T::one() / (var + eps).sqrt();
            for (ci, chunk) in out[start..end].chunks_mut(plane).enumerate() {
                let ch = g * per_group + ci;
                let src = &x[start + ci * plane..start + (ci + 1) * plane];
                for (o, &v) in chunk.iter_mut().zip(src) {
                    *o = gamma[ch] * (v - mu) * r + beta[ch];
                }
            }
            mean.push(mu);
            rstd.push(r);
        }
    }
    (out, GroupStats { mean, rstd })
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Scalar>(
    x: &[T],
    shape: [usize; 4],
    groups: usize,
    gamma: &[T],
    stats: &GroupStats<T>,
    dy: &[T],
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let [n, c, h, w] = shape;
    let plane = h * w;
    let per_group = c / groups;
    let count = T::from_usize(per_group * plane).unwrap();

    if let Some(db) = dbeta {
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                db[ch] += dy[off..off + plane].iter().copied().sum::<T>();
            }
        }
    }
    if let Some(dg) = dgamma {
        for s in 0..n {
            for ch in 0..c {
                let g = ch / per_group;
                let (mu, r) = (stats.mean[s * groups + g], stats.rstd[s * groups + g]);
                let off = (s * c + ch) * plane;
                dg[ch] += x[off..off + plane]
                    .iter()
                    .zip(&dy[off..off + plane])
                    .map(|(&v, &d)| d * (v - mu) * r)
                    .sum::<T>();
            }
        }
    }
    if let Some(dx) = dx {
        for s in 0..n {
            for g in 0..groups {
                let (mu, r) = (stats.mean[s * groups + g], stats.rstd[s * groups + g]);
                let start = (s * c + g * per_group) * plane;
                let mut sum_d = T::zero();
                let mut sum_dx = T::zero();
                for ci in 0..per_group {
                    let ch = g * per_group + ci;
                    let off = start + ci * plane;
                    for i in off..off + plane {
                        let d = dy[i] * gamma[ch];
                        sum_d += d;
                        sum_dx += d * (x[i] - mu) * r;
                    }
                }
                for ci in 0..per_group {
                    let ch = g * per_group + ci;
                    let off = start + ci * plane;
                    for i in off..off + plane {
                        let xhat = (x[i] - mu) * r;
                        let d = dy[i] * gamma[ch];
                        dx[i] += r / count * (count * d - sum_d - xhat * sum_dx);
                    }
                }
            }
        }
    }
}

/// Nearest-neighbour ×2 upsampling of `[N,C,H,W]`.
pub fn upsample2x_forward<T: Scalar>(x: &[T], shape: [usize; 4]) -> Vec<T> {
    let [n, c, h, w] = shape;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * h2 * w2];
    for p in 0..n * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Scalar>(dy: &[T], shape: [usize; 4], dx: &mut [T]) {
    let [n, c, h, w] = shape;
    let (h2, w2) = (2 * h, 2 * w);
    for p in 0..n * c {
        let src = &dy[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
