use ndarray::Array2;

use super::{clip_bidirectional, LossResult, LossWeights, Temperature};
use crate::embedding::{element_centroids, pairwise_sq_dists, MultimodalBatch};
use crate::error::{Error, Result};

/// Align-true-pairs loss: mean squared distance from every non-anchor row to
/// the anchor row of the same tuple, averaged over the `M - 1` non-anchor
/// modalities.
pub fn atp_loss(batch: &MultimodalBatch) -> Result<LossResult> {
    let m = batch.num_modalities();
    if m < 2 {
        return Err(Error::InvalidArgument("ATP needs M >= 2".into()));
    }
    let (b, d) = (batch.batch_size(), batch.dim());
    let anchor_idx = batch.anchor_index();
    let anchor = batch.anchor().data();
    let scale = 1.0 / ((m - 1) as f64 * b as f64);

    let mut out = LossResult::zeros(m, b, d);
    let mut anchor_grad = Array2::<f64>::zeros((b, d));
    for (i, modality) in batch.modalities().iter().enumerate() {
        if i == anchor_idx {
            continue;
        }
        let diff = modality.data() - anchor;
        out.value += diff.iter().map(|v| v * v).sum::<f64>() * scale;
        let g = diff * (2.0 * scale);
        anchor_grad -= &g;
        out.grads[i] = g;
    }
    out.grads[anchor_idx] = anchor_grad;
    Ok(out)
}

/// Centroid-uniformity loss: log of the mean RBF kernel
/// `exp(-2 ||c_i - c_j||^2)` over ordered pairs `i != j` of element
/// centroids, divided by `B`.
///
/// Evaluated as a log-sum-exp over the off-diagonal logits.
pub fn cu_loss(batch: &MultimodalBatch) -> Result<LossResult> {
    let b = batch.batch_size();
    if b < 2 {
        return Err(Error::InvalidArgument(
            "centroid uniformity needs at least two batch elements".into(),
        ));
    }
    let m = batch.num_modalities();
    let centroids = element_centroids(batch).data;
    let dists = pairwise_sq_dists(centroids.view(), centroids.view())?;

    let max_logit = off_diagonal(&dists)
        .map(|(_, _, dij)| -2.0 * dij)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = off_diagonal(&dists)
        .map(|(_, _, dij)| (-2.0 * dij - max_logit).exp())
        .sum();
    let lse = max_logit + sum.ln();
    let value = lse - (b as f64).ln();

    // dL/dc_i = -4 sum_j (w_ij + w_ji)(c_i - c_j), w = softmax of the logits;
    // the kernel is symmetric so w_ij == w_ji.
    let mut grad_c = Array2::<f64>::zeros(centroids.dim());
    for (i, j, dij) in off_diagonal(&dists) {
        let w = (-2.0 * dij - lse).exp();
        let diff = &centroids.row(i) - &centroids.row(j);
        grad_c.row_mut(i).scaled_add(-8.0 * w, &diff);
    }
    grad_c /= m as f64;

    Ok(LossResult {
        value,
        grads: vec![grad_c; m],
        temp_grad: None,
    })
}

fn off_diagonal(d: &Array2<f64>) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
    d.indexed_iter()
        .filter(|((i, j), _)| i != j)
        .map(|((i, j), &v)| (i, j, v))
}

/// Weighted sum of ATP and CU.
///
/// A batch with a single element has no centroid pairs; the CU term then
/// contributes nothing instead of erroring.
pub fn gap_loss(batch: &MultimodalBatch, w: &LossWeights) -> Result<LossResult> {
    Ok(gap_parts(batch, w)?.0)
}

fn gap_parts(batch: &MultimodalBatch, w: &LossWeights) -> Result<(LossResult, LossParts)> {
    w.validate()?;
    let (m, b, d) = (batch.num_modalities(), batch.batch_size(), batch.dim());
    let mut out = LossResult::zeros(m, b, d);
    let mut parts = LossParts::default();
    if w.w_atp > 0.0 {
        let atp = atp_loss(batch)?;
        parts.atp = Some(atp.value);
        out.add_scaled(w.w_atp, &atp);
    }
    if w.w_cu > 0.0 && b >= 2 {
        let cu = cu_loss(batch)?;
        parts.cu = Some(cu.value);
        out.add_scaled(w.w_cu, &cu);
    }
    Ok((out, parts))
}

/// Unweighted component values of a combined objective. Components with a
/// zero weight are not evaluated.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossParts {
    pub contrastive: Option<f64>,
    pub atp: Option<f64>,
    pub cu: Option<f64>,
}

/// Contrastive loss between modalities 0 and 1 plus the gap terms.
pub fn combined_loss(
    batch: &MultimodalBatch,
    tau: &Temperature,
    w: &LossWeights,
) -> Result<LossResult> {
    Ok(combined_loss_with_parts(batch, tau, w)?.0)
}

/// [`combined_loss`] that also reports each component's value.
pub fn combined_loss_with_parts(
    batch: &MultimodalBatch,
    tau: &Temperature,
    w: &LossWeights,
) -> Result<(LossResult, LossParts)> {
    w.validate()?;
    if w.w_contrastive > 0.0 && batch.num_modalities() != 2 {
        return Err(Error::Unsupported(format!(
            "the contrastive term is pairwise; got M = {}",
            batch.num_modalities()
        )));
    }
    let (mut out, mut parts) = gap_parts(batch, w)?;
    if w.w_contrastive > 0.0 {
        let clip = clip_bidirectional(batch.modality(0), batch.modality(1), tau)?;
        parts.contrastive = Some(clip.value);
        let mut padded = LossResult::zeros(2, batch.batch_size(), batch.dim());
        padded.add_scaled(1.0, &clip);
        out.add_scaled(w.w_contrastive, &padded);
    }
    Ok((out, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{normalize_rows, EmbeddingBatch};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn unit(rows: Array2<f64>) -> EmbeddingBatch {
        normalize_rows(&EmbeddingBatch::new(rows).unwrap()).unwrap()
    }

    fn random_batch(m: usize, b: usize, d: usize, seed: u64) -> MultimodalBatch {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mods = (0..m)
            .map(|_| {
                unit(Array2::from_shape_fn((b, d), |_| {
                    rng.random_range(-1.0..1.0)
                }))
            })
            .collect();
        MultimodalBatch::new(mods, 0).unwrap()
    }

    fn orthogonal_swap() -> MultimodalBatch {
        MultimodalBatch::pair(
            unit(array![[1.0, 0.0], [0.0, 1.0]]),
            unit(array![[0.0, 1.0], [1.0, 0.0]]),
        )
        .unwrap()
    }

    fn centroid_pair(c0: [f64; 2], c1: [f64; 2]) -> MultimodalBatch {
        let rows = array![[c0[0], c0[1]], [c1[0], c1[1]]];
        let e = EmbeddingBatch::from_normalized(rows).unwrap();
        MultimodalBatch::pair(e.clone(), e).unwrap()
    }

    #[test]
    fn atp_identical_is_zero() {
        let e = unit(array![[1.0, 2.0], [3.0, -1.0]]);
        let mb = MultimodalBatch::new(vec![e.clone(), e.clone(), e], 1).unwrap();
        let r = atp_loss(&mb).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grads.iter().all(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn atp_orthogonal_swap_is_two() {
        let r = atp_loss(&orthogonal_swap()).unwrap();
        assert!((r.value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn atp_matches_triple_loop() {
        let mb = random_batch(3, 5, 4, 3);
        let anchor = mb.anchor().data();
        let mut expected = 0.0;
        for i in 1..3 {
            let mut inner = 0.0;
            for j in 0..5 {
                for k in 0..4 {
                    let diff = mb.modality(i).data()[[j, k]] - anchor[[j, k]];
                    inner += diff * diff;
                }
            }
            expected += inner / 5.0;
        }
        expected /= 2.0;
        let r = atp_loss(&mb).unwrap();
        assert!((r.value - expected).abs() < 1e-10);
        // anchor gradient is the negated sum of partner gradients
        let partner_sum = &r.grads[1] + &r.grads[2];
        for (a, p) in r.grads[0].iter().zip(partner_sum.iter()) {
            assert!((a + p).abs() < 1e-15);
        }
    }

    #[test]
    fn cu_closed_forms() {
        let same = cu_loss(&centroid_pair([1.0, 0.0], [1.0, 0.0])).unwrap();
        assert!(same.value.abs() < 1e-12);
        let anti = cu_loss(&centroid_pair([1.0, 0.0], [-1.0, 0.0])).unwrap();
        assert!((anti.value + 8.0).abs() < 1e-9);
        let orth = cu_loss(&centroid_pair([1.0, 0.0], [0.0, 1.0])).unwrap();
        assert!((orth.value + 4.0).abs() < 1e-9);
    }

    #[test]
    fn cu_needs_two_elements() {
        let e = unit(array![[1.0, 0.0]]);
        let mb = MultimodalBatch::pair(e.clone(), e).unwrap();
        assert!(cu_loss(&mb).is_err());
    }

    #[test]
    fn gap_examples() {
        let r = gap_loss(
            &orthogonal_swap(),
            &LossWeights::new(1.0, 1.0, 0.0).unwrap(),
        )
        .unwrap();
        let atp = atp_loss(&orthogonal_swap()).unwrap().value;
        let cu = cu_loss(&orthogonal_swap()).unwrap().value;
        assert!((r.value - (atp + cu)).abs() < 1e-12);

        let mb = random_batch(2, 4, 3, 5);
        let cu_only = gap_loss(&mb, &LossWeights::new(0.0, 1.0, 0.0).unwrap()).unwrap();
        assert_eq!(cu_only, cu_loss(&mb).unwrap());

        let e = unit(array![[1.0, 2.0], [0.5, -1.0]]);
        let same = MultimodalBatch::pair(e.clone(), e).unwrap();
        let atp_only = gap_loss(&same, &LossWeights::new(1.0, 0.0, 0.0).unwrap()).unwrap();
        assert_eq!(atp_only.value, 0.0);
    }

    #[test]
    fn gap_sums_orthogonal_pairs_and_antipodal_centroids() {
        // pairs are orthogonal (ATP 2) and the centroids (.5,.5), (-.5,-.5)
        // sit at squared distance 2 (CU -4)
        let mb = MultimodalBatch::pair(
            unit(array![[1.0, 0.0], [-1.0, 0.0]]),
            unit(array![[0.0, 1.0], [0.0, -1.0]]),
        )
        .unwrap();
        assert!((atp_loss(&mb).unwrap().value - 2.0).abs() < 1e-12);
        assert!((cu_loss(&mb).unwrap().value + 4.0).abs() < 1e-12);
        let r = gap_loss(&mb, &LossWeights::new(1.0, 1.0, 0.0).unwrap()).unwrap();
        assert!((r.value + 2.0).abs() < 1e-12);
    }

    #[test]
    fn combined_examples() {
        let mb = random_batch(2, 8, 4, 9);
        let tau = Temperature::fixed(0.07).unwrap();
        let no_clip = LossWeights::new(1.0, 1.0, 0.0).unwrap();
        assert_eq!(
            combined_loss(&mb, &tau, &no_clip).unwrap(),
            gap_loss(&mb, &no_clip).unwrap()
        );

        let e = unit(array![[0.2, 0.9, -0.1]]);
        let single = MultimodalBatch::pair(e.clone(), e).unwrap();
        let r = combined_loss(&single, &tau, &LossWeights::default()).unwrap();
        assert_eq!(r.value, 0.0);

        let full = combined_loss(&mb, &tau, &LossWeights::default()).unwrap();
        let parts = clip_bidirectional(mb.modality(0), mb.modality(1), &tau)
            .unwrap()
            .value
            + atp_loss(&mb).unwrap().value
            + cu_loss(&mb).unwrap().value;
        assert!((full.value - parts).abs() < 1e-10);
    }

    #[test]
    fn combined_rejects_three_modalities_with_contrastive() {
        let mb = random_batch(3, 4, 3, 1);
        let tau = Temperature::fixed(0.07).unwrap();
        assert!(matches!(
            combined_loss(&mb, &tau, &LossWeights::default()),
            Err(Error::Unsupported(_))
        ));
        assert!(combined_loss(&mb, &tau, &LossWeights::new(1.0, 1.0, 0.0).unwrap()).is_ok());
    }

    proptest! {
        #[test]
        fn atp_nonnegative(seed in 0u64..500, m in 2usize..4, b in 1usize..6) {
            let r = atp_loss(&random_batch(m, b, 3, seed)).unwrap();
            prop_assert!(r.value >= 0.0);
        }

        #[test]
        fn cu_bounded_by_log_b_minus_one(seed in 0u64..500, b in 2usize..10) {
            let r = cu_loss(&random_batch(2, b, 4, seed)).unwrap();
            prop_assert!(r.value <= ((b - 1) as f64).ln() + 1e-12);
        }

        #[test]
        fn gap_is_linear_in_weights(seed in 0u64..500, alpha in 0.0f64..3.0, beta in 0.0f64..3.0) {
            let mb = random_batch(3, 5, 4, seed);
            let r = gap_loss(&mb, &LossWeights::new(alpha, beta, 0.0).unwrap()).unwrap();
            let expected = alpha * atp_loss(&mb).unwrap().value + beta * cu_loss(&mb).unwrap().value;
            prop_assert!((r.value - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn cu_equals_log_b_minus_one_when_coincident() {
        let e = EmbeddingBatch::from_normalized(Array2::from_shape_fn((5, 3), |(_, j)| {
            if j == 1 {
                1.0
            } else {
                0.0
            }
        }))
        .unwrap();
        let r = cu_loss(&MultimodalBatch::pair(e.clone(), e).unwrap()).unwrap();
        assert!((r.value - 4f64.ln()).abs() < 1e-12);
    }
}
