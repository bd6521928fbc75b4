//! Low-rank adapters for fine-tuning with frozen base weights.

use crate::error::Result;
use crate::model::{LoraSpec, LoraTargets, MemoNetwork};
use crate::scalar::Scalar;

/// Wrap the targeted layers with adapters computing
/// `base(x) + (alpha/rank)·B(A(x))`.
///
/// `B` starts at zero so the adapted network reproduces the base network
/// exactly. Afterwards only adapter parameters are trainable. Stems and the
/// single-channel output head are left unwrapped.
pub fn lora_inject<T: Scalar>(net: &mut MemoNetwork<T>, rank: usize, alpha: f64, targets: LoraTargets) -> Result<()> {
    net.inject_lora(LoraSpec { rank, alpha, targets })
}

/// `Σ rank·(in + out)` over every adapted projection.
pub fn adapter_param_count<T: Scalar>(net: &MemoNetwork<T>) -> usize {
    let rank = net.lora().map_or(0, |l| l.rank);
    net.adapted_projections()
        .iter()
        .map(|(_, i, o)| rank * (i + o))
        .sum()
}

/// Names of adapter parameters in registry order.
pub fn adapter_param_names<T: Scalar>(net: &MemoNetwork<T>) -> Vec<String> {
    net.params()
        .iter()
        .filter(|(_, p)| p.name.ends_with(".lora_down") || p.name.ends_with(".lora_up"))
        .map(|(_, p)| p.name.clone())
        .collect()
}
