//! Binary cross-entropy restricted to masked pixels.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::maps::{BinaryMap, TriStateEdgeMap};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// Normaliser applied to the masked-pixel sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNormalization {
    /// `1 / (r·H·W)`: O(1) at any resolution.
    #[default]
    PerPixel,
    /// `1 / r` on the raw pixel sum.
    RatioOnly,
}

impl LossNormalization {
    pub fn factor(self, r: f64, pixels: usize) -> f64 {
        match self {
            LossNormalization::PerPixel => 1.0 / (r * pixels as f64),
            LossNormalization::RatioOnly => 1.0 / r,
        }
    }
}

/// Per-pixel loss weights: `factor` at masked pixels, zero elsewhere.
pub fn masked_weights<T: Scalar>(masked: &TriStateEdgeMap, factor: f64) -> Vec<T> {
    let w = T::lit(factor);
    masked
        .cells()
        .iter()
        .map(|c| if *c == crate::maps::EdgeState::Masked { w } else { T::zero() })
        .collect()
}

pub fn targets<T: Scalar>(edges: &BinaryMap) -> Vec<T> {
    edges
        .data()
        .iter()
        .map(|&e| if e { T::one() } else { T::zero() })
        .collect()
}

fn check(logits: &Tensor<impl Scalar>, edges: &BinaryMap, masked: &TriStateEdgeMap, r: f64) -> Result<()> {
    let (h, w) = edges.dims();
    if logits.len() != h * w || masked.dims() != (h, w) {
        return Err(invalid_arg!(
            "logits ({:?}), targets ({h}x{w}) and masked map ({:?}) must agree",
            logits.shape(),
            masked.dims()
        ));
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(invalid_arg!("mask ratio must lie in (0, 1], got {r}"));
    }
    Ok(())
}

/// `−1/(r·H·W) · Σ_{masked i} [E_i log p_i + (1−E_i) log(1−p_i)]`, `p = σ(logit)`.
pub fn masked_bce_loss<T: Scalar>(
    logits: &Tensor<T>,
    edges: &BinaryMap,
    masked: &TriStateEdgeMap,
    r: f64,
) -> Result<T> {
    Ok(masked_bce_with_grad(logits, edges, masked, r)?.0)
}

/// Loss value and its gradient with respect to the logits.
pub fn masked_bce_with_grad<T: Scalar>(
    logits: &Tensor<T>,
    edges: &BinaryMap,
    masked: &TriStateEdgeMap,
    r: f64,
) -> Result<(T, Tensor<T>)> {
    check(logits, edges, masked, r)?;
    let factor = LossNormalization::PerPixel.factor(r, edges.data().len());
    let tape = Tape::new();
    let l = tape.leaf(logits.clone(), true);
    let loss = tape.masked_bce(l, targets(edges), masked_weights(masked, factor))?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).data()[0], grads.wrt(l)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::EdgeState;

    #[test]
    fn single_masked_edge_at_one_half() {
        let mut e = BinaryMap::new(2, 2);
        e.set(0, 1, true);
        let mut m = TriStateEdgeMap::from_binary(&e);
        m.set_at(1, EdgeState::Masked);
        let logits = Tensor::<f64>::zeros(&[2, 2]);
        let loss = masked_bce_loss(&logits, &e, &m, 0.25).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_predictions_have_vanishing_loss() {
        let e = BinaryMap::from_fn(4, 4, |y, x| y == x);
        let m = TriStateEdgeMap::all_masked(4, 4);
        let logits = Tensor::<f64>::from_fn(&[4, 4], |i| if i % 5 == 0 { 40.0 } else { -40.0 });
        assert!(masked_bce_loss(&logits, &e, &m, 1.0).unwrap() < 1e-15);
    }

    #[test]
    fn unmasked_pixels_do_not_matter() {
        let e = BinaryMap::from_fn(3, 3, |y, _| y == 1);
        let mut m = TriStateEdgeMap::from_binary(&e);
        for i in [0, 4, 8] {
            m.set_at(i, EdgeState::Masked);
        }
        let a = Tensor::<f64>::from_fn(&[3, 3], |i| i as f64 * 0.3 - 1.0);
        let mut b = a.clone();
        for i in [1, 2, 3, 5, 6, 7] {
            b.data_mut()[i] += 17.0;
        }
        let r = 3.0 / 9.0;
        assert_eq!(
            masked_bce_loss(&a, &e, &m, r).unwrap(),
            masked_bce_loss(&b, &e, &m, r).unwrap()
        );
        let (_, g) = masked_bce_with_grad(&a, &e, &m, r).unwrap();
        for i in [1, 2, 3, 5, 6, 7] {
            assert_eq!(g.data()[i], 0.0);
        }
    }

    #[test]
    fn nothing_masked_means_zero_loss() {
        let e = BinaryMap::from_fn(2, 2, |y, x| y == x);
        let m = TriStateEdgeMap::from_binary(&e);
        assert_eq!(masked_bce_loss(&Tensor::<f32>::full(&[2, 2], 3.0), &e, &m, 0.5).unwrap(), 0.0);
    }
}
