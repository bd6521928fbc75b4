//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its output value and the input handles
//! (plus any saved statistics) its backward rule needs. `backward` walks the
//! tape once in reverse.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, ConvGeometry, GroupStats};
use super::Tensor;
use crate::error::{invalid_arg, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: GroupStats<T>,
    },
    Silu(Var),
    Sigmoid(Var),
    Linear {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Add(Var, Var),
    AddChannel {
        x: Var,
        offset: Var,
        plane: usize,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        batch: usize,
        plane: usize,
    },
    Upsample2x(Var),
    Scale(Var, T),
    Sum(Var),
    MaskedBce {
        logits: Var,
        targets: Vec<T>,
        weights: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed differentiable ops.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`; all zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor<T> {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads[var.0].as_deref()
    }
}

fn shape4(t: &Tensor<impl Scalar>, what: &str) -> Result<[usize; 4]> {
    match t.shape() {
        &[n, c, h, w] => Ok([n, c, h, w]),
        s => Err(invalid_arg!("{what} expects a [N,C,H,W] tensor, got {s:?}")),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by {op:?}");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn conv2d(&self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xv = self.value(x);
        let kv = self.value(kernel);
        let [n, c, h, w] = shape4(&xv, "conv2d input")?;
        let [o, kc, kh, kw] = shape4(&kv, "conv2d kernel")?;
        if kc != c {
            return Err(invalid_arg!(
                "conv2d: input has {c} channels but kernel expects {kc}"
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(invalid_arg!("conv2d: kernel extents must be odd, got {kh}x{kw}"));
        }
        if stride == 0 {
            return Err(invalid_arg!("conv2d: stride must be positive"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(invalid_arg!("conv2d: kernel larger than padded input"));
        }
        let bv = match bias {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [o] {
                    return Err(invalid_arg!(
                        "conv2d: bias shape {:?} does not match {o} output channels",
                        bv.shape()
                    ));
                }
                Some(bv)
            }
            None => None,
        };
        let geom = ConvGeometry {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: o,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
        };
        let out = kernels::conv2d_forward(&geom, xv.data(), kv.data(), bv.as_ref().map(|b| b.data()));
        let value = Tensor::new(&[n, o, geom.out_height(), geom.out_width()], out)?;
        let rg = self.requires_grad(x) || self.requires_grad(kernel) || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(value, Op::Conv2d { x, kernel, bias, geom }, rg))
    }

    pub fn group_norm(&self, x: Var, groups: usize, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let shape = shape4(&xv, "group_norm")?;
        let c = shape[1];
        if groups == 0 || c % groups != 0 {
            return Err(invalid_arg!(
                "group_norm: {c} channels not divisible into {groups} groups"
            ));
        }
        if eps <= T::zero() {
            return Err(invalid_arg!("group_norm: eps must be positive"));
        }
        let gv = self.value(gamma);
        let bv = self.value(beta);
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(invalid_arg!("group_norm: affine parameters must have shape [{c}]"));
        }
        let (out, stats) = kernels::group_norm_forward(xv.data(), shape, groups, gv.data(), bv.data(), eps);
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            rg,
        ))
    }

    pub fn silu(&self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * kernels::sigmoid(v));
        self.push(value, Op::Silu(x), self.requires_grad(x))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let value = self.value(x).map(kernels::sigmoid);
        self.push(value, Op::Sigmoid(x), self.requires_grad(x))
    }

    /// Affine map over the trailing axis: `x · weight + bias` with `weight` `[D,E]`.
    pub fn linear(&self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(weight);
        let (din, dout) = match wv.shape() {
            &[d, e] => (d, e),
            s => return Err(invalid_arg!("linear: weight must be [D,E], got {s:?}")),
        };
        let last = *xv.shape().last().unwrap();
        if last != din {
            return Err(invalid_arg!(
                "linear: input trailing dimension {last} does not match weight input dimension {din}"
            ));
        }
        let rows = xv.len() / din;
        let mut out = vec![T::zero(); rows * dout];
        let mut beta = T::zero();
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [dout] {
                return Err(invalid_arg!("linear: bias must have shape [{dout}]"));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
            beta = T::one();
        }
        T::gemm(rows, din, dout, xv.data(), false, wv.data(), false, beta, &mut out);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::new(&shape, out)?;
        let rg = self.requires_grad(x) || self.requires_grad(weight) || bias.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(
            value,
            Op::Linear {
                x,
                weight,
                bias,
                rows,
                din,
                dout,
            },
            rg,
        ))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(&self.value(b), |x, y| x + y)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Add a per-(sample, channel) offset `[N,C]` at every spatial location of `x` `[N,C,H,W]`.
    pub fn add_channel(&self, x: Var, offset: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = shape4(&xv, "add_channel")?;
        let ov = self.value(offset);
        if ov.shape() != [n, c] {
            return Err(invalid_arg!(
                "add_channel: offset shape {:?} does not match [{n}, {c}]",
                ov.shape()
            ));
        }
        let plane = h * w;
        let mut out = xv.data().to_vec();
        for (chunk, &o) in out.chunks_mut(plane).zip(ov.data()) {
            chunk.iter_mut().for_each(|v| *v += o);
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.requires_grad(x) || self.requires_grad(offset);
        Ok(self.push(value, Op::AddChannel { x, offset, plane }, rg))
    }

    /// Concatenate `[N,C_i,H,W]` tensors along the channel axis.
    pub fn concat_channels(&self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| invalid_arg!("concat of nothing"))?);
        let [n, _, h, w] = shape4(&first, "concat")?;
        let plane = h * w;
        let mut meta = Vec::with_capacity(parts.len());
        let mut total_c = 0;
        for &p in parts {
            let pv = self.value(p);
            let [pn, pc, ph, pw] = shape4(&pv, "concat")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(invalid_arg!("concat: incompatible shapes {:?} and {:?}", first.shape(), pv.shape()));
            }
            meta.push((p, pc));
            total_c += pc;
        }
        let mut out = Vec::with_capacity(n * total_c * plane);
        for s in 0..n {
            for &(p, pc) in &meta {
                let pv = self.value(p);
                out.extend_from_slice(&pv.data()[s * pc * plane..(s + 1) * pc * plane]);
            }
        }
        let value = Tensor::new(&[n, total_c, h, w], out)?;
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: meta,
                batch: n,
                plane,
            },
            rg,
        ))
    }

    pub fn upsample2x(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let shape = shape4(&xv, "upsample2x")?;
        let out = kernels::upsample2x_forward(xv.data(), shape);
        let value = Tensor::new(&[shape[0], shape[1], 2 * shape[2], 2 * shape[3]], out)?;
        Ok(self.push(value, Op::Upsample2x(x), self.requires_grad(x)))
    }

    pub fn scale(&self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), self.requires_grad(x))
    }

    pub fn sum(&self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), self.requires_grad(x))
    }

    /// `Σ_i weight_i · BCE(sigmoid(logit_i), target_i)` in the stable logit form.
    ///
    /// Pixels with zero weight contribute neither value nor gradient.
    pub fn masked_bce(&self, logits: Var, targets: Vec<T>, weights: Vec<T>) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.len() || weights.len() != lv.len() {
            return Err(invalid_arg!(
                "masked_bce: {} logits but {} targets and {} weights",
                lv.len(),
                targets.len(),
                weights.len()
            ));
        }
        let mut total = T::zero();
        for ((&l, &t), &w) in lv.data().iter().zip(&targets).zip(&weights) {
            if w != T::zero() {
                total += w * (kernels::softplus(l) - t * l);
            }
        }
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::MaskedBce {
                logits,
                targets,
                weights,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if !nodes[loss.0].value.is_scalar() {
            return Err(invalid_arg!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            ));
        }
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        fn slot<'g, T: Scalar>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'g mut Vec<T>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]))
        }

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::Conv2d { x, kernel, bias, geom } => {
                    let xv = Rc::clone(&nodes[x.0].value);
                    let kv = Rc::clone(&nodes[kernel.0].value);
                    let mut dx = slot(&mut grads, &nodes, *x).map(std::mem::take);
                    let mut dk = slot(&mut grads, &nodes, *kernel).map(std::mem::take);
                    let mut db = bias.and_then(|b| slot(&mut grads, &nodes, b).map(std::mem::take));
                    kernels::conv2d_backward(
                        geom,
                        xv.data(),
                        kv.data(),
                        &dy,
                        dx.as_deref_mut(),
                        dk.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    if let Some(g) = dx {
                        grads[x.0] = Some(g);
                    }
                    if let Some(g) = dk {
                        grads[kernel.0] = Some(g);
                    }
                    if let (Some(g), Some(b)) = (db, bias) {
                        grads[b.0] = Some(g);
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    stats,
                } => {
                    let xv = Rc::clone(&nodes[x.0].value);
                    let gv = Rc::clone(&nodes[gamma.0].value);
                    let shape = shape4(&xv, "group_norm")?;
                    let mut dx = slot(&mut grads, &nodes, *x).map(std::mem::take);
                    let mut dg = slot(&mut grads, &nodes, *gamma).map(std::mem::take);
                    let mut db = slot(&mut grads, &nodes, *beta).map(std::mem::take);
                    kernels::group_norm_backward(
                        xv.data(),
                        shape,
                        *groups,
                        gv.data(),
                        stats,
                        &dy,
                        dx.as_deref_mut(),
                        dg.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    if let Some(g) = dx {
                        grads[x.0] = Some(g);
                    }
                    if let Some(g) = dg {
                        grads[gamma.0] = Some(g);
                    }
                    if let Some(g) = db {
                        grads[beta.0] = Some(g);
                    }
                }
                Op::Silu(x) => {
                    let xv = Rc::clone(&nodes[x.0].value);
                    if let Some(dx) = slot(&mut grads, &nodes, *x) {
                        for ((d, &v), &g) in dx.iter_mut().zip(xv.data()).zip(&dy) {
                            let s = kernels::sigmoid(v);
                            *d += g * s * (T::one() + v * (T::one() - s));
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let yv = Rc::clone(&node.value);
                    if let Some(dx) = slot(&mut grads, &nodes, *x) {
                        for ((d, &s), &g) in dx.iter_mut().zip(yv.data()).zip(&dy) {
                            *d += g * s * (T::one() - s);
                        }
                    }
                }
                Op::Linear {
                    x,
                    weight,
                    bias,
                    rows,
                    din,
                    dout,
                } => {
                    let xv = Rc::clone(&nodes[x.0].value);
                    let wv = Rc::clone(&nodes[weight.0].value);
                    if let Some(dx) = slot(&mut grads, &nodes, *x) {
                        T::gemm(*rows, *dout, *din, &dy, false, wv.data(), true, T::one(), dx);
                    }
                    if let Some(dw) = slot(&mut grads, &nodes, *weight) {
                        T::gemm(*din, *rows, *dout, xv.data(), true, &dy, false, T::one(), dw);
                    }
                    if let Some(b) = bias {
                        if let Some(db) = slot(&mut grads, &nodes, *b) {
                            for row in dy.chunks(*dout) {
                                db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if let Some(d) = slot(&mut grads, &nodes, v) {
                            d.iter_mut().zip(&dy).for_each(|(d, &g)| *d += g);
                        }
                    }
                }
                Op::AddChannel { x, offset, plane } => {
                    if let Some(dx) = slot(&mut grads, &nodes, *x) {
                        dx.iter_mut().zip(&dy).for_each(|(d, &g)| *d += g);
                    }
                    if let Some(doff) = slot(&mut grads, &nodes, *offset) {
                        for (d, chunk) in doff.iter_mut().zip(dy.chunks(*plane)) {
                            *d += chunk.iter().copied().sum::<T>();
                        }
                    }
                }
                Op::Concat { parts, batch, plane } => {
                    let total: usize = parts.iter().map(|&(_, c)| c).sum();
                    let mut offset = 0;
                    for &(p, pc) in parts {
                        if let Some(dp) = slot(&mut grads, &nodes, p) {
                            for s in 0..*batch {
                                let src = &dy[(s * total + offset) * plane..(s * total + offset + pc) * plane];
                                let dst = &mut dp[s * pc * plane..(s + 1) * pc * plane];
                                dst.iter_mut().zip(src).for_each(|(d, &g)| *d += g);
                            }
                        }
                        offset += pc;
                    }
                }
                Op::Upsample2x(x) => {
                    let shape = shape4(&nodes[x.0].value, "upsample2x")?;
                    if let Some(dx) = slot(&mut grads, &nodes, *x) {
                        kernels::upsample2x_backward(&dy, shape, dx);
                    }
                }
                Op::Scale(x, factor) => {
                    if let Some(dx) = slot(&mut grads, &nodes, *x) {
                        dx.iter_mut().zip(&dy).for_each(|(d, &g)| *d += g * *factor);
                    }
                }
                Op::Sum(x) => {
                    if let Some(dx) = slot(&mut grads, &nodes, *x) {
                        dx.iter_mut().for_each(|d| *d += dy[0]);
                    }
                }
                Op::MaskedBce {
                    logits,
                    targets,
                    weights,
                } => {
                    let lv = Rc::clone(&nodes[logits.0].value);
                    if let Some(dl) = slot(&mut grads, &nodes, *logits) {
                        for (i, d) in dl.iter_mut().enumerate() {
                            let w = weights[i];
                            if w != T::zero() {
                                *d += dy[0] * w * (kernels::sigmoid(lv.data()[i]) - targets[i]);
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0), true);
        let unused = tape.leaf(Tensor::full(&[4], 3.0), true);
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused).data(), &[0.0; 4]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn sigmoid_sum_gradient_closed_form() {
        let tape = Tape::<f64>::new();
        let xs = vec![-1.5, 0.0, 0.3, 2.0];
        let x = tape.leaf(Tensor::new(&[4], xs.clone()).unwrap(), true);
        let loss = tape.sum(tape.sigmoid(x));
        let g = tape.backward(loss).unwrap().wrt(x);
        for (gi, &xi) in g.data().iter().zip(&xs) {
            let s = 1.0 / (1.0 + (-xi).exp());
            assert!((gi - s * (1.0 - s)).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(tape.conv2d(x, k, None, 1, 1).is_err());
    }
}
