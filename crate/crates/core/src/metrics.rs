//! Latent-space diagnostics and cross-modal retrieval.

use std::collections::BTreeMap;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::embedding::{row_mean, EmbeddingBatch, MultimodalBatch};
use crate::error::{Error, Result};

/// Header of the CSV row emitted by [`csv_row`].
pub const CSV_HEADER: &str = "objective,gap,cos_true_pairs,av_m0,av_m1,r@1,r@5,r@10";

/// Default recall cut-offs.
pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// How a modality centroid is formed for the gap metric.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum GapMode {
    /// Mean of the modality's embeddings; the gap then lies in `[0, 2]`.
    #[default]
    Mean,
    /// Plain sum of the embeddings, which grows with the set size.
    Sum,
}

/// Which modality supplies the retrieval queries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Modality 0 queries modality 1 (image to text).
    #[default]
    I2t,
    /// Modality 1 queries modality 0.
    T2i,
}

/// Mean of a modality's normalized embeddings over an evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityCentroid {
    pub data: Array1<f64>,
}

pub fn modality_centroid(m: &EmbeddingBatch) -> ModalityCentroid {
    ModalityCentroid {
        data: row_mean(m.data().view()),
    }
}

fn check_matching(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<()> {
    if a.data().dim() != b.data().dim() {
        return Err(Error::ShapeMismatch(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            a.data().dim(),
            b.data().dim()
        )));
    }
    a.require_normalized()?;
    b.require_normalized()
}

/// Euclidean distance between the two modality centroids.
pub fn gap_metric(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<f64> {
    gap_metric_with(a, b, GapMode::Mean)
}

pub fn gap_metric_with(a: &EmbeddingBatch, b: &EmbeddingBatch, mode: GapMode) -> Result<f64> {
    check_matching(a, b)?;
    let diff = modality_centroid(a).data - modality_centroid(b).data;
    let dist = diff.dot(&diff).sqrt();
    Ok(match mode {
        GapMode::Mean => dist,
        GapMode::Sum => dist * a.len() as f64,
    })
}

/// Mean cosine similarity of matched rows.
pub fn cos_true_pairs(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<f64> {
    check_matching(a, b)?;
    let total: f64 = a
        .data()
        .outer_iter()
        .zip(b.data().outer_iter())
        .map(|(x, y)| x.dot(&y))
        .sum();
    Ok(total / a.len() as f64)
}

/// Mean cosine similarity over ordered pairs of distinct rows of one modality.
pub fn angular_value(m: &EmbeddingBatch) -> Result<f64> {
    m.require_normalized()?;
    let n = m.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "angular value needs at least two embeddings".into(),
        ));
    }
    let gram = m.data().dot(&m.data().t());
    let off_diag = gram.sum() - gram.diag().sum();
    Ok(off_diag / (n * n - n) as f64)
}

/// Zero-based rank of each query's true match (same row index) in the
/// gallery, ordered by descending cosine similarity with ties going to the
/// lower gallery index.
pub fn true_match_ranks(queries: &EmbeddingBatch, gallery: &EmbeddingBatch) -> Result<Vec<usize>> {
    check_matching(queries, gallery)?;
    let sims = queries.data().dot(&gallery.data().t());
    Ok(sims
        .outer_iter()
        .enumerate()
        .map(|(i, row)| {
            let target = row[i];
            row.iter()
                .enumerate()
                .filter(|&(j, &s)| s > target || (s == target && j < i))
                .count()
        })
        .collect())
}

/// Fraction of queries whose true match ranks within the top `k`, per `k`.
pub fn recall_at_k(
    queries: &EmbeddingBatch,
    gallery: &EmbeddingBatch,
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    let n = queries.len();
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::InvalidArgument(format!(
            "recall cut-off {k} must lie in 1..={n}"
        )));
    }
    let ranks = true_match_ranks(queries, gallery)?;
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|&&r| r < k).count();
            (k, hits as f64 / n as f64)
        })
        .collect())
}

/// Accuracy of labelling every embedding with the modality whose centroid is
/// nearer. Close to 1 when the modalities occupy separate regions.
pub fn centroid_split_accuracy(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(
            "modalities differ in dimension".into(),
        ));
    }
    let ca = modality_centroid(a).data;
    let cb = modality_centroid(b).data;
    let nearer_a = |v: ndarray::ArrayView1<'_, f64>| {
        let da = &v - &ca;
        let db = &v - &cb;
        da.dot(&da) < db.dot(&db)
    };
    let correct = a.data().outer_iter().filter(|r| nearer_a(r.view())).count()
        + b.data()
            .outer_iter()
            .filter(|r| !nearer_a(r.view()))
            .count();
    Ok(correct as f64 / (a.len() + b.len()) as f64)
}

/// Options for [`alignment_report`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub ks: Vec<usize>,
    pub direction: Direction,
    pub gap_mode: GapMode,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            direction: Direction::default(),
            gap_mode: GapMode::default(),
        }
    }
}

/// Alignment and retrieval summary of a paired evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub gap: f64,
    pub cos_true_pairs: f64,
    pub av_per_modality: Vec<f64>,
    pub recall: BTreeMap<usize, f64>,
    pub n: usize,
}

/// Computes every metric for a two-modality evaluation set.
pub fn alignment_report(batch: &MultimodalBatch, opts: &ReportOptions) -> Result<AlignmentReport> {
    if batch.num_modalities() != 2 {
        return Err(Error::Unsupported(format!(
            "alignment report covers two modalities, got {}",
            batch.num_modalities()
        )));
    }
    let (a, b) = (batch.modality(0), batch.modality(1));
    let (queries, gallery) = match opts.direction {
        Direction::I2t => (a, b),
        Direction::T2i => (b, a),
    };
    let n = batch.batch_size();
    let recall = recall_at_k(queries, gallery, &opts.ks)?;
    Ok(AlignmentReport {
        gap: gap_metric_with(a, b, opts.gap_mode)?,
        cos_true_pairs: cos_true_pairs(a, b)?,
        av_per_modality: batch
            .modalities()
            .iter()
            .map(angular_value)
            .collect::<Result<_>>()?,
        recall,
        n,
    })
}

/// One CSV line matching [`CSV_HEADER`]; absent recall columns stay empty.
pub fn csv_row(objective: &str, report: &AlignmentReport) -> String {
    let av = |i: usize| {
        report
            .av_per_modality
            .get(i)
            .map(|v| v.to_string())
            .unwrap_or_default()
    };
    let r = |k: usize| {
        report
            .recall
            .get(&k)
            .map(|v| v.to_string())
            .unwrap_or_default()
    };
    format!(
        "{objective},{},{},{},{},{},{},{}",
        report.gap,
        report.cos_true_pairs,
        av(0),
        av(1),
        r(1),
        r(5),
        r(10)
    )
}
