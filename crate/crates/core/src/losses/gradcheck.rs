//! Central finite-difference verification of the analytic loss gradients.
//!
//! Losses are checked end to end from raw (pre-normalization) inputs, so the
//! normalization backward pass is covered as well.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    atp_loss, clip_bidirectional, combined_loss, cu_loss, gap_loss, LossResult, LossWeights,
    Temperature, FIXED_TAU,
};
use crate::embedding::{normalize_rows_backward, unit_rows, EmbeddingBatch, MultimodalBatch};
use crate::error::{Error, Result};

/// Step used by the gradient suite.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Entries smaller than this are compared in absolute rather than relative
/// terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Loss identifiers accepted by the gradient checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum GradLoss {
    ClipLt,
    ClipFt,
    Atp,
    Cu,
    Gap,
    Combined,
}

impl GradLoss {
    pub const ALL: [GradLoss; 6] = [
        GradLoss::ClipLt,
        GradLoss::ClipFt,
        GradLoss::Atp,
        GradLoss::Cu,
        GradLoss::Gap,
        GradLoss::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradLoss::ClipLt => "clip-lt",
            GradLoss::ClipFt => "clip-ft",
            GradLoss::Atp => "atp",
            GradLoss::Cu => "cu",
            GradLoss::Gap => "gap",
            GradLoss::Combined => "combined",
        }
    }

    fn needs_pair(self) -> bool {
        matches!(self, GradLoss::Combined)
    }
}

/// Evaluates a loss on raw inputs: rows are normalized, the loss is taken on
/// the unit rows and the gradients are pulled back to the raw rows.
pub fn evaluate_raw(
    loss: GradLoss,
    raw: &[Array2<f64>],
    anchor: usize,
    tau: &Temperature,
) -> Result<LossResult> {
    let mut units = Vec::with_capacity(raw.len());
    let mut norms = Vec::with_capacity(raw.len());
    for r in raw {
        let (u, n) = unit_rows(r.view())?;
        units.push(EmbeddingBatch::from_normalized(u)?);
        norms.push(n);
    }
    let batch = MultimodalBatch::new(units, anchor)?;
    let mut result = match loss {
        GradLoss::ClipLt | GradLoss::ClipFt => {
            let r = clip_bidirectional(batch.modality(0), batch.modality(1), tau)?;
            let (b, d) = (batch.batch_size(), batch.dim());
            let mut grads = r.grads;
            grads.resize(batch.num_modalities(), Array2::zeros((b, d)));
            LossResult { grads, ..r }
        }
        GradLoss::Atp => atp_loss(&batch)?,
        GradLoss::Cu => cu_loss(&batch)?,
        GradLoss::Gap => gap_loss(&batch, &LossWeights::default())?,
        GradLoss::Combined => combined_loss(&batch, tau, &LossWeights::default())?,
    };
    for ((g, u), n) in result.grads.iter_mut().zip(batch.modalities()).zip(&norms) {
        *g = normalize_rows_backward(u.data().view(), n.view(), g.view());
    }
    Ok(result)
}

/// Central differences `(f(x + h) - f(x - h)) / 2h` for every coordinate of
/// every input matrix.
///
/// # Panics
/// If `h` is outside `[1e-6, 1e-2]`.
pub fn finite_diff_grad<F>(f: F, inputs: &[Array2<f64>], h: f64) -> Vec<Array2<f64>>
where
    F: Fn(&[Array2<f64>]) -> f64,
{
    assert!(
        (1e-6..=1e-2).contains(&h),
        "finite-difference step {h} outside [1e-6, 1e-2]"
    );
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = Array2::zeros(inputs[t].dim());
        for idx in ndarray::indices(inputs[t].dim()) {
            let orig = work[t][idx];
            work[t][idx] = orig + h;
            let plus = f(&work);
            work[t][idx] = orig - h;
            let minus = f(&work);
            work[t][idx] = orig;
            g[idx] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Central difference of a scalar function.
pub fn finite_diff_scalar<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Per-entry relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Largest [`relative_error`] over matching entries.
pub fn max_relative_error(analytic: &[Array2<f64>], numeric: &[Array2<f64>]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.iter().zip(n.iter()))
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// One random configuration of the gradient suite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckCase {
    pub batch: usize,
    pub dim: usize,
    pub modalities: usize,
    pub seed: u64,
}

/// Cycles through `B in {2,4,8}`, `d in {3,8,16}`, `M in {2,3}`.
pub fn suite_cases(n: usize, seed: u64) -> Vec<GradCheckCase> {
    const BS: [usize; 3] = [2, 4, 8];
    const DS: [usize; 3] = [3, 8, 16];
    (0..n)
        .map(|i| GradCheckCase {
            batch: BS[i % 3],
            dim: DS[(i / 3) % 3],
            modalities: 2 + (i / 9 + i) % 2,
            seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
        })
        .collect()
}

/// Result of checking one loss on one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOutcome {
    pub case: GradCheckCase,
    pub max_rel_err: f64,
}

/// Compares analytic and finite-difference gradients for one case.
///
/// The combined objective only supports two modalities, so its cases are
/// evaluated with `M = 2`.
pub fn check_case(loss: GradLoss, case: GradCheckCase, h: f64) -> Result<GradCheckOutcome> {
    let mut case = case;
    if loss.needs_pair() {
        case.modalities = 2;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
    let raw: Vec<Array2<f64>> = (0..case.modalities)
        .map(|_| Array2::from_shape_fn((case.batch, case.dim), |_| rng.sample(StandardNormal)))
        .collect();
    let anchor = rng.random_range(0..case.modalities);
    let tau = match loss {
        GradLoss::ClipLt => Temperature::learnable(rng.random_range(0.05..0.5))?,
        _ => Temperature::fixed(FIXED_TAU)?,
    };

    let analytic = evaluate_raw(loss, &raw, anchor, &tau)?;
    let eval = |x: &[Array2<f64>]| -> f64 {
        evaluate_raw(loss, x, anchor, &tau)
            .map(|r| r.value)
            .unwrap_or(f64::NAN)
    };
    let numeric = finite_diff_grad(eval, &raw, h);
    let mut err = max_relative_error(&analytic.grads, &numeric);
    if let Some(tg) = analytic.temp_grad {
        let fd = finite_diff_scalar(
            |t| {
                evaluate_raw(loss, &raw, anchor, &tau.with_value(t))
                    .map(|r| r.value)
                    .unwrap_or(f64::NAN)
            },
            tau.value(),
            h,
        );
        err = err.max(relative_error(tg, fd));
    }
    if !err.is_finite() {
        return Err(Error::NonFinite(format!(
            "gradient check of {}",
            loss.name()
        )));
    }
    Ok(GradCheckOutcome {
        case,
        max_rel_err: err,
    })
}

/// Summary row of the gradient suite for one loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub loss: GradLoss,
    pub cases: usize,
    pub max_rel_err: f64,
    pub worst_case: GradCheckCase,
    pub passed: bool,
}

/// Runs every loss in `losses` over `n_cases` seeded configurations.
pub fn run_suite(
    losses: &[GradLoss],
    n_cases: usize,
    seed: u64,
    tol: f64,
    h: f64,
) -> Result<Vec<GradCheckRow>> {
    let cases = suite_cases(n_cases.max(1), seed);
    losses
        .iter()
        .map(|&loss| {
            let mut worst = check_case(loss, cases[0], h)?;
            for &case in &cases[1..] {
                let o = check_case(loss, case, h)?;
                if o.max_rel_err > worst.max_rel_err {
                    worst = o;
                }
            }
            Ok(GradCheckRow {
                loss,
                cases: cases.len(),
                max_rel_err: worst.max_rel_err,
                worst_case: worst.case,
                passed: worst.max_rel_err < tol,
            })
        })
        .collect()
}
