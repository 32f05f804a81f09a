use super::{LossResult, Temperature};
use crate::embedding::EmbeddingBatch;
use crate::error::{Error, Result};

/// One direction of the contrastive cross-entropy: each `src` row must pick
/// out its own `dst` row among all `dst` rows.
///
/// Returns gradients for `[src, dst]` and, for a learnable temperature,
/// `dL/dtau`.
pub fn clip_directional(
    src: &EmbeddingBatch,
    dst: &EmbeddingBatch,
    tau: &Temperature,
) -> Result<LossResult> {
    check_pair(src, dst)?;
    let b = src.len();
    let t = tau.value();
    let logits = src.data().dot(&dst.data().t()) / t;

    // Row-wise softmax with max subtraction.
    let mut probs = logits.clone();
    let mut value = 0.0;
    for (i, mut row) in probs.outer_iter_mut().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        value -= (row[i] / sum).ln();
        row /= sum;
    }
    value /= b as f64;

    // dL/dlogits = (P - I) / B
    let mut g = probs;
    for i in 0..b {
        g[[i, i]] -= 1.0;
    }
    g /= b as f64;

    let grad_src = g.dot(dst.data()) / t;
    let grad_dst = g.t().dot(src.data()) / t;
    let temp_grad = tau.is_learnable().then(|| -(&g * &logits).sum() / t);

    Ok(LossResult {
        value,
        grads: vec![grad_src, grad_dst],
        temp_grad,
    })
}

/// Average of both contrastive directions.
pub fn clip_bidirectional(
    m1: &EmbeddingBatch,
    m2: &EmbeddingBatch,
    tau: &Temperature,
) -> Result<LossResult> {
    let fwd = clip_directional(m1, m2, tau)?;
    let bwd = clip_directional(m2, m1, tau)?;
    let grads = vec![
        (&fwd.grads[0] + &bwd.grads[1]) * 0.5,
        (&fwd.grads[1] + &bwd.grads[0]) * 0.5,
    ];
    let temp_grad = match (fwd.temp_grad, bwd.temp_grad) {
        (Some(a), Some(b)) => Some(0.5 * (a + b)),
        _ => None,
    };
    Ok(LossResult {
        value: 0.5 * (fwd.value + bwd.value),
        grads,
        temp_grad,
    })
}

fn check_pair(src: &EmbeddingBatch, dst: &EmbeddingBatch) -> Result<()> {
    if src.data().dim() != dst.data().dim() {
        return Err(Error::ShapeMismatch(format!(
            "contrastive loss needs equal shapes, got {:?} and {:?}",
            src.data().dim(),
            dst.data().dim()
        )));
    }
    src.require_normalized()?;
    dst.require_normalized()?;
    Ok(())
}
