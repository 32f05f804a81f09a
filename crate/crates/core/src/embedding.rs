//! Embedding containers and the dense kernels shared by losses and metrics.
//!
//! Matrices are row-major with one sample per row. Everything here is a pure
//! function of its inputs; batches are immutable once built.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Rows with a norm at or below this are rejected by [`normalize_rows`].
pub const ZERO_ROW_EPS: f64 = 1e-12;

/// Allowed deviation from unit norm for a batch flagged as normalized.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// A `B x d` matrix of embeddings for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    data: Array2<f64>,
    normalized: bool,
}

impl EmbeddingBatch {
    /// Wraps raw (not necessarily unit-norm) embeddings.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        check_shape_and_finite(&data)?;
        Ok(Self {
            data,
            normalized: false,
        })
    }

    /// Wraps embeddings that are already unit norm, verifying every row.
    pub fn from_normalized(data: Array2<f64>) -> Result<Self> {
        check_shape_and_finite(&data)?;
        for (row, r) in data.outer_iter().enumerate() {
            let norm = r.dot(&r).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::NotNormalized { row, norm });
            }
        }
        Ok(Self {
            data,
            normalized: true,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows_to_matrix(rows)?)
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Number of rows (the batch size `B`, or `N` for an evaluation set).
    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    /// Errors unless the batch carries the normalized flag.
    pub fn require_normalized(&self) -> Result<()> {
        if self.normalized {
            return Ok(());
        }
        // Report the first offending row for a useful message.
        for (row, r) in self.data.outer_iter().enumerate() {
            let norm = r.dot(&r).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::NotNormalized { row, norm });
            }
        }
        Err(Error::NotNormalized { row: 0, norm: 1.0 })
    }
}

fn check_shape_and_finite(data: &Array2<f64>) -> Result<()> {
    if data.nrows() < 1 {
        return Err(Error::InvalidArgument(
            "embedding batch needs B >= 1".into(),
        ));
    }
    if data.ncols() < 2 {
        return Err(Error::InvalidArgument(format!(
            "embedding dimension must be >= 2, got {}",
            data.ncols()
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding batch".into()));
    }
    Ok(())
}

/// Builds a matrix from equally sized rows.
pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(Error::ShapeMismatch(format!(
            "row {i} has {} columns, expected {ncols}",
            r.len()
        )));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), ncols), flat)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))
}

/// Scales every row to unit Euclidean norm. The input is left untouched.
pub fn normalize_rows(batch: &EmbeddingBatch) -> Result<EmbeddingBatch> {
    let (data, _) = unit_rows(batch.data.view())?;
    Ok(EmbeddingBatch {
        data,
        normalized: true,
    })
}

/// Row-normalizes a raw matrix, returning the unit rows and the original norms.
pub fn unit_rows(raw: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let mut out = raw.to_owned();
    let mut norms = Array1::zeros(raw.nrows());
    for (row, (mut r, n)) in out.outer_iter_mut().zip(norms.iter_mut()).enumerate() {
        let norm = r.dot(&r).sqrt();
        if !(norm > ZERO_ROW_EPS) {
            return Err(Error::ZeroRow { row, norm });
        }
        r /= norm;
        *n = norm;
    }
    Ok((out, norms))
}

/// Pulls a gradient taken with respect to unit rows back to the raw rows.
///
/// For `y = x / |x|`, `dL/dx = (g - y (y . g)) / |x|`.
pub fn normalize_rows_backward(
    unit: ArrayView2<'_, f64>,
    norms: ArrayView1<'_, f64>,
    grad_unit: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let mut out = grad_unit.to_owned();
    for ((mut g, y), &n) in out
        .outer_iter_mut()
        .zip(unit.outer_iter())
        .zip(norms.iter())
    {
        let proj = y.dot(&g);
        g.scaled_add(-proj, &y);
        g /= n;
    }
    out
}

/// `M` aligned embedding batches; row `j` of every modality is one true tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalBatch {
    modalities: Vec<EmbeddingBatch>,
    anchor: usize,
}

impl MultimodalBatch {
    pub fn new(modalities: Vec<EmbeddingBatch>, anchor: usize) -> Result<Self> {
        if modalities.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a multimodal batch needs M >= 2 modalities, got {}",
                modalities.len()
            )));
        }
        if anchor >= modalities.len() {
            return Err(Error::InvalidArgument(format!(
                "anchor index {anchor} out of range for M = {}",
                modalities.len()
            )));
        }
        let (b, d) = modalities[0].data.dim();
        for (i, m) in modalities.iter().enumerate().skip(1) {
            if m.data.dim() != (b, d) {
                return Err(Error::ShapeMismatch(format!(
                    "modality {i} is {:?}, modality 0 is {:?}",
                    m.data.dim(),
                    (b, d)
                )));
            }
        }
        Ok(Self { modalities, anchor })
    }

    /// Builds a batch with modality 0 as the anchor.
    pub fn pair(a: EmbeddingBatch, b: EmbeddingBatch) -> Result<Self> {
        Self::new(vec![a, b], 0)
    }

    pub fn modalities(&self) -> &[EmbeddingBatch] {
        &self.modalities
    }

    pub fn modality(&self, i: usize) -> &EmbeddingBatch {
        &self.modalities[i]
    }

    pub fn anchor_index(&self) -> usize {
        self.anchor
    }

    pub fn anchor(&self) -> &EmbeddingBatch {
        &self.modalities[self.anchor]
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn batch_size(&self) -> usize {
        self.modalities[0].len()
    }

    pub fn dim(&self) -> usize {
        self.modalities[0].dim()
    }

    pub fn is_normalized(&self) -> bool {
        self.modalities.iter().all(EmbeddingBatch::is_normalized)
    }

    /// Returns a copy with every modality row-normalized.
    pub fn normalized(&self) -> Result<Self> {
        let modalities = self
            .modalities
            .iter()
            .map(normalize_rows)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            modalities,
            anchor: self.anchor,
        })
    }

    pub fn into_modalities(self) -> Vec<EmbeddingBatch> {
        self.modalities
    }
}

/// Per-element centroids: row `k` is the mean of row `k` over all modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementCentroid {
    pub data: Array2<f64>,
}

/// Averages the modalities row by row. Centroids are not re-normalized.
pub fn element_centroids(batch: &MultimodalBatch) -> ElementCentroid {
    let m = batch.num_modalities() as f64;
    let mut acc = Array2::<f64>::zeros((batch.batch_size(), batch.dim()));
    for modality in batch.modalities() {
        acc += modality.data();
    }
    acc /= m;
    ElementCentroid { data: acc }
}

/// Matrix of squared Euclidean distances `||a_i - b_j||^2`.
///
/// Computed from explicit differences rather than the `|a|^2 + |b|^2 - 2ab`
/// expansion so the result is exactly symmetric with a zero diagonal when
/// `a == b`.
pub fn pairwise_sq_dists(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "pairwise distances need equal dimension, got {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    for (i, ai) in a.outer_iter().enumerate() {
        for (j, bj) in b.outer_iter().enumerate() {
            out[[i, j]] = ai
                .iter()
                .zip(bj.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
        }
    }
    Ok(out)
}

/// Mean of the rows of a matrix.
pub fn row_mean(m: ArrayView2<'_, f64>) -> Array1<f64> {
    m.mean_axis(Axis(0))
        .unwrap_or_else(|| Array1::zeros(m.ncols()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn batch(rows: Array2<f64>) -> EmbeddingBatch {
        EmbeddingBatch::new(rows).unwrap()
    }

    #[test]
    fn normalize_three_four_five() {
        let out = normalize_rows(&batch(array![[3.0, 4.0]])).unwrap();
        assert!(out.is_normalized());
        assert_abs_diff_eq!(out.data()[[0, 0]], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(out.data()[[0, 1]], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn normalize_unit_vector_is_identity() {
        let out = normalize_rows(&batch(array![[1.0, 0.0, 0.0]])).unwrap();
        assert_eq!(out.data(), &array![[1.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_zero_row_fails() {
        let err = normalize_rows(&batch(array![[1.0, 1.0], [0.0, 0.0]])).unwrap_err();
        assert!(matches!(err, Error::ZeroRow { row: 1, .. }));
    }

    #[test]
    fn normalize_leaves_input_alone() {
        let input = batch(array![[3.0, 4.0]]);
        let _ = normalize_rows(&input).unwrap();
        assert_eq!(input.data(), &array![[3.0, 4.0]]);
        assert!(!input.is_normalized());
    }

    #[test]
    fn batch_rejects_bad_shapes() {
        assert!(EmbeddingBatch::new(Array2::zeros((0, 3))).is_err());
        assert!(EmbeddingBatch::new(Array2::zeros((2, 1))).is_err());
        assert!(matches!(
            EmbeddingBatch::new(array![[f64::NAN, 1.0]]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            EmbeddingBatch::from_normalized(array![[2.0, 0.0]]),
            Err(Error::NotNormalized { row: 0, .. })
        ));
    }

    #[test]
    fn multimodal_validation() {
        let a = batch(array![[1.0, 0.0]]);
        let b = batch(array![[1.0, 0.0], [0.0, 1.0]]);
        assert!(MultimodalBatch::new(vec![a.clone()], 0).is_err());
        assert!(MultimodalBatch::new(vec![a.clone(), a.clone()], 2).is_err());
        assert!(matches!(
            MultimodalBatch::new(vec![a, b], 0),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn centroid_examples() {
        let mb =
            MultimodalBatch::pair(batch(array![[1.0, 0.0]]), batch(array![[0.0, 1.0]])).unwrap();
        assert_eq!(element_centroids(&mb).data, array![[0.5, 0.5]]);

        let v = array![[0.3, -0.7]];
        let mb = MultimodalBatch::pair(batch(v.clone()), batch(v.clone())).unwrap();
        assert_abs_diff_eq!(element_centroids(&mb).data, v, epsilon = 1e-15);

        let mb = MultimodalBatch::new(
            vec![
                batch(array![[1.0, 0.0]]),
                batch(array![[-1.0, 0.0]]),
                batch(array![[0.0, 0.0]]),
            ],
            0,
        )
        .unwrap();
        assert_eq!(element_centroids(&mb).data, array![[0.0, 0.0]]);
    }

    #[test]
    fn pairwise_examples() {
        let a = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(
            pairwise_sq_dists(a.view(), a.view()).unwrap(),
            array![[0.0, 2.0], [2.0, 0.0]]
        );
        let d = pairwise_sq_dists(array![[0.0, 0.0]].view(), array![[3.0, 4.0]].view()).unwrap();
        assert_eq!(d, array![[25.0]]);
        assert!(pairwise_sq_dists(a.view(), array![[1.0, 2.0, 3.0]].view()).is_err());
    }

    #[test]
    fn pairwise_matches_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let b = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let got = pairwise_sq_dists(a.view(), b.view()).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut s = 0.0;
                for k in 0..3 {
                    let diff = a[[i, k]] - b[[j, k]];
                    s += diff * diff;
                }
                assert!((got[[i, j]] - s).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let raw = array![[0.3, -1.2, 0.5], [2.0, 0.1, -0.4]];
        let g = array![[0.7, 0.2, -0.3], [-0.1, 0.9, 0.4]];
        let f = |x: &Array2<f64>| -> f64 {
            let (u, _) = unit_rows(x.view()).unwrap();
            (&u * &g).sum()
        };
        let (u, n) = unit_rows(raw.view()).unwrap();
        let analytic = normalize_rows_backward(u.view(), n.view(), g.view());
        let h = 1e-6;
        for idx in [[0, 0], [0, 2], [1, 1], [1, 2]] {
            let mut xp = raw.clone();
            xp[idx] += h;
            let mut xm = raw.clone();
            xm[idx] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - analytic[idx]).abs() < 1e-8, "{idx:?}");
        }
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(-5.0f64..5.0, rows * cols)
            .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
            .prop_filter("rows must be nonzero", |m| {
                m.outer_iter().all(|r| r.dot(&r).sqrt() > 1e-3)
            })
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(m in matrix(5, 4)) {
            let once = normalize_rows(&batch(m)).unwrap();
            let twice = normalize_rows(&once).unwrap();
            for (x, y) in once.data().iter().zip(twice.data().iter()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn unit_distance_matches_cosine(m in matrix(2, 6)) {
            let u = normalize_rows(&batch(m)).unwrap();
            let (a, b) = (u.row(0), u.row(1));
            let d2 = (&a - &b).mapv(|x| x * x).sum();
            prop_assert!((d2 - (2.0 - 2.0 * a.dot(&b))).abs() < 1e-9);
        }

        #[test]
        fn centroids_commute_with_modality_order(
            a in matrix(3, 4), b in matrix(3, 4), c in matrix(3, 4)
        ) {
            let fwd = MultimodalBatch::new(vec![batch(a.clone()), batch(b.clone()), batch(c.clone())], 0).unwrap();
            let rev = MultimodalBatch::new(vec![batch(c), batch(a), batch(b)], 1).unwrap();
            let x = element_centroids(&fwd).data;
            let y = element_centroids(&rev).data;
            for (p, q) in x.iter().zip(y.iter()) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }

        #[test]
        fn self_distances_symmetric_zero_diagonal(m in matrix(6, 3)) {
            let d = pairwise_sq_dists(m.view(), m.view()).unwrap();
            for i in 0..6 {
                prop_assert!(d[[i, i]].abs() < 1e-9);
                for j in 0..6 {
                    prop_assert!((d[[i, j]] - d[[j, i]]).abs() < 1e-9);
                }
            }
        }
    }
}
