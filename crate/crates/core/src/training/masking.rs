use rand::Rng;

use crate::error::{invalid_arg, Result};
use crate::maps::{BinaryMap, EdgeState, TriStateEdgeMap};

/// Hide each pixel of `edges` independently with probability `r`.
///
/// `r = 1` masks every pixel without drawing, so the fully masked state that
/// starts inference is always in the training distribution.
pub fn bernoulli_mask<R: Rng + ?Sized>(edges: &BinaryMap, r: f64, rng: &mut R) -> Result<TriStateEdgeMap> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(invalid_arg!("mask ratio must lie in (0, 1], got {r}"));
    }
    let (h, w) = edges.dims();
    if r == 1.0 {
        return Ok(TriStateEdgeMap::all_masked(h, w));
    }
    let cells = edges
        .data()
        .iter()
        .map(|&e| {
            if rng.gen::<f64>() < r {
                EdgeState::Masked
            } else if e {
                EdgeState::Edge
            } else {
                EdgeState::Background
            }
        })
        .collect();
    TriStateEdgeMap::from_cells(h, w, cells)
}

/// Draw a mask ratio uniformly from `(0, 1]`.
pub fn sample_ratio<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    1.0 - rng.gen::<f64>()
}
