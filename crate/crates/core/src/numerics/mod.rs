//! Dense tensors, reverse-mode gradients and the AdamW update.

mod adamw;
mod graph;
mod scalar;
mod tensor;

pub use adamw::{adamw_step, AdamWConfig, OptimState};
pub use graph::{bind, value_and_grad, Bound, Gradients, Graph, Var};
pub use scalar::Scalar;
pub use tensor::{ParamSet, Tensor};

/// Shannon entropy in nats, `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Numerically stable softmax of one row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0
}
