//! Python bindings. Matrices cross the boundary as lists of rows.

use gapforge::embedding::{normalize_rows as normalize, EmbeddingBatch, MultimodalBatch};
use gapforge::error::Error;
use gapforge::losses::{self, LossResult, LossWeights, Objective, Temperature};
use gapforge::metrics::{self, Direction, GapMode, ReportOptions};
use gapforge::train::{self, SyntheticDatasetSpec, TrainConfig};
use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

type Rows = Vec<Vec<f64>>;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

pub fn rows_of(m: &Array2<f64>) -> Rows {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

/// Builds a batch from rows and scales them to unit norm.
fn batch(rows: &Rows) -> PyResult<EmbeddingBatch> {
    let b = EmbeddingBatch::from_rows(rows).map_err(py_err)?;
    normalize(&b).map_err(py_err)
}

fn multimodal(mods: &[Rows], anchor: usize) -> PyResult<MultimodalBatch> {
    let mods = mods.iter().map(batch).collect::<PyResult<Vec<_>>>()?;
    MultimodalBatch::new(mods, anchor).map_err(py_err)
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => u.into_pyobject(py)?.into_any(),
            (None, Some(i)) => i.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

fn loss_dict<'py>(py: Python<'py>, r: &LossResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("value", r.value)?;
    d.set_item("grads", r.grads.iter().map(rows_of).collect::<Vec<_>>())?;
    d.set_item("temp_grad", r.temp_grad)?;
    Ok(d)
}

fn parse_objective(name: &str) -> PyResult<Objective> {
    name.parse().map_err(py_err)
}

/// Scales each row to unit length.
#[pyfunction]
fn normalize_rows(x: Rows) -> PyResult<Rows> {
    Ok(rows_of(batch(&x)?.data()))
}

/// Symmetric contrastive loss; gradients are with respect to the normalized
/// rows.
#[pyfunction]
#[pyo3(signature = (m1, m2, tau = losses::FIXED_TAU, learnable = false))]
fn clip_loss<'py>(
    py: Python<'py>,
    m1: Rows,
    m2: Rows,
    tau: f64,
    learnable: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let t = Temperature::build(tau, learnable, losses::MIN_TAU).map_err(py_err)?;
    let r = losses::clip_bidirectional(&batch(&m1)?, &batch(&m2)?, &t).map_err(py_err)?;
    loss_dict(py, &r)
}

#[pyfunction]
#[pyo3(signature = (modalities, anchor = 0))]
fn atp_loss<'py>(
    py: Python<'py>,
    modalities: Vec<Rows>,
    anchor: usize,
) -> PyResult<Bound<'py, PyDict>> {
    loss_dict(
        py,
        &losses::atp_loss(&multimodal(&modalities, anchor)?).map_err(py_err)?,
    )
}

#[pyfunction]
fn cu_loss<'py>(py: Python<'py>, modalities: Vec<Rows>) -> PyResult<Bound<'py, PyDict>> {
    loss_dict(
        py,
        &losses::cu_loss(&multimodal(&modalities, 0)?).map_err(py_err)?,
    )
}

/// Contrastive term (two modalities only) plus weighted ATP and CU terms.
#[pyfunction]
#[pyo3(signature = (modalities, tau = losses::FIXED_TAU, w_atp = 1.0, w_cu = 1.0, w_contrastive = 1.0, anchor = 0))]
fn combined_loss<'py>(
    py: Python<'py>,
    modalities: Vec<Rows>,
    tau: f64,
    w_atp: f64,
    w_cu: f64,
    w_contrastive: f64,
    anchor: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let w = LossWeights::new(w_atp, w_cu, w_contrastive).map_err(py_err)?;
    let t = Temperature::fixed(tau).map_err(py_err)?;
    let (r, parts) = losses::combined_loss_with_parts(&multimodal(&modalities, anchor)?, &t, &w)
        .map_err(py_err)?;
    let d = loss_dict(py, &r)?;
    d.set_item("parts", to_py(py, &parts)?)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (a, b, sum = false))]
fn gap(a: Rows, b: Rows, sum: bool) -> PyResult<f64> {
    let mode = if sum { GapMode::Sum } else { GapMode::Mean };
    metrics::gap_metric_with(&batch(&a)?, &batch(&b)?, mode).map_err(py_err)
}

#[pyfunction]
fn cos_true_pairs(a: Rows, b: Rows) -> PyResult<f64> {
    metrics::cos_true_pairs(&batch(&a)?, &batch(&b)?).map_err(py_err)
}

#[pyfunction]
fn angular_value(m: Rows) -> PyResult<f64> {
    metrics::angular_value(&batch(&m)?).map_err(py_err)
}

/// Recall of the same-index gallery row for every query, per cut-off.
#[pyfunction]
#[pyo3(signature = (queries, gallery, ks = vec![1, 5, 10]))]
fn recall_at_k(queries: Rows, gallery: Rows, ks: Vec<usize>) -> PyResult<Vec<(usize, f64)>> {
    let r = metrics::recall_at_k(&batch(&queries)?, &batch(&gallery)?, &ks).map_err(py_err)?;
    Ok(r.into_iter().collect())
}

#[pyfunction]
fn centroid_split_accuracy(a: Rows, b: Rows) -> PyResult<f64> {
    metrics::centroid_split_accuracy(&batch(&a)?, &batch(&b)?).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (a, b, ks = vec![1, 5, 10], direction = "i2t", gap_sum = false))]
fn alignment_report<'py>(
    py: Python<'py>,
    a: Rows,
    b: Rows,
    ks: Vec<usize>,
    direction: &str,
    gap_sum: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let direction = match direction {
        "i2t" => Direction::I2t,
        "t2i" => Direction::T2i,
        other => {
            return Err(PyValueError::new_err(format!(
                "direction must be i2t or t2i, got {other}"
            )))
        }
    };
    let opts = ReportOptions {
        ks,
        direction,
        gap_mode: if gap_sum { GapMode::Sum } else { GapMode::Mean },
    };
    let pair = MultimodalBatch::pair(batch(&a)?, batch(&b)?).map_err(py_err)?;
    to_py(
        py,
        &metrics::alignment_report(&pair, &opts).map_err(py_err)?,
    )
}

/// A generated paired dataset.
#[pyclass(module = "gapforge")]
struct SyntheticDataset {
    inner: train::SyntheticDataset,
}

fn split_of<'a>(d: &'a train::SyntheticDataset, name: &str) -> PyResult<&'a train::PairedSplit> {
    match name {
        "train" => Ok(&d.train),
        "test" => Ok(&d.test),
        other => Err(PyValueError::new_err(format!(
            "split must be train or test, got {other}"
        ))),
    }
}

#[pymethods]
impl SyntheticDataset {
    #[new]
    #[pyo3(signature = (n_pairs = 2000, seed = 7, d_semantic = None, d_feat = None, noise_sigma = None, jitter_sigma = None, n_clusters = None))]
    fn new(
        n_pairs: usize,
        seed: u64,
        d_semantic: Option<usize>,
        d_feat: Option<Vec<usize>>,
        noise_sigma: Option<f64>,
        jitter_sigma: Option<f64>,
        n_clusters: Option<usize>,
    ) -> PyResult<Self> {
        let mut spec = SyntheticDatasetSpec {
            n_pairs,
            seed,
            ..SyntheticDatasetSpec::default()
        };
        if let Some(v) = d_semantic {
            spec.d_semantic = v;
        }
        if let Some(v) = d_feat {
            spec.d_feat = v;
        }
        if let Some(v) = noise_sigma {
            spec.noise_sigma = v;
        }
        if let Some(v) = jitter_sigma {
            spec.jitter_sigma = v;
        }
        if let Some(v) = n_clusters {
            spec.n_clusters = v;
        }
        let inner = train::generate_synthetic(&spec).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: train::load_dataset(path.as_ref()).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<Vec<String>> {
        train::save_dataset(path.as_ref(), &self.inner).map_err(py_err)
    }

    #[getter]
    fn spec<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.spec)
    }

    #[pyo3(signature = (modality, split = "train"))]
    fn features(&self, modality: usize, split: &str) -> PyResult<Rows> {
        let s = split_of(&self.inner, split)?;
        s.features
            .get(modality)
            .map(rows_of)
            .ok_or_else(|| PyValueError::new_err(format!("no modality {modality}")))
    }

    #[pyo3(signature = (split = "train"))]
    fn ids(&self, split: &str) -> PyResult<Vec<String>> {
        Ok(split_of(&self.inner, split)?.ids.clone())
    }

    fn __len__(&self) -> usize {
        self.inner.spec.n_pairs
    }
}

/// Trained encoders plus their evaluation history.
#[pyclass(module = "gapforge")]
struct TrainResult {
    output: train::TrainOutput,
}

#[pymethods]
impl TrainResult {
    #[getter]
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.output.history.records)
    }

    #[getter]
    fn epoch_losses<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.output.history.epoch_losses)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.output.state.config)
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.output.state.tau.value()
    }

    /// Unit-norm embeddings of one split, one list of rows per modality.
    #[pyo3(signature = (dataset, split = "test"))]
    fn encode(&self, dataset: &SyntheticDataset, split: &str) -> PyResult<Vec<Rows>> {
        let b = self
            .output
            .state
            .encode(split_of(&dataset.inner, split)?)
            .map_err(py_err)?;
        Ok(b.modalities().iter().map(|m| rows_of(m.data())).collect())
    }

    fn save_checkpoint(&self, path: &str) -> PyResult<()> {
        train::Checkpoint::from_state(&self.output.state, None)
            .save(path.as_ref())
            .map_err(py_err)
    }
}

/// Trains from scratch with the desk defaults, overridden by keyword
/// arguments that name `TrainConfig` fields.
#[pyfunction]
#[pyo3(signature = (dataset, objective = "gap", seed = 0, epochs = None, batch_size = None, lr = None, embed_dim = None, hidden = None, eval_every = None))]
#[allow(clippy::too_many_arguments)]
fn train_run(
    py: Python<'_>,
    dataset: &SyntheticDataset,
    objective: &str,
    seed: u64,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    embed_dim: Option<usize>,
    hidden: Option<usize>,
    eval_every: Option<usize>,
) -> PyResult<TrainResult> {
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::desk(parse_objective(objective)?)
    };
    cfg.epochs = epochs.unwrap_or(cfg.epochs);
    cfg.batch_size = batch_size.unwrap_or(cfg.batch_size);
    cfg.lr = lr.unwrap_or(cfg.lr);
    cfg.embed_dim = embed_dim.unwrap_or(cfg.embed_dim);
    cfg.hidden = hidden.unwrap_or(cfg.hidden);
    cfg.eval_every = eval_every.unwrap_or(cfg.eval_every);
    let data = &dataset.inner;
    let output = py.detach(|| train::train_run(&cfg, data)).map_err(py_err)?;
    Ok(TrainResult { output })
}

#[pymodule]
#[pyo3(name = "gapforge")]
fn gapforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FIXED_TAU", losses::FIXED_TAU)?;
    m.add("CSV_HEADER", metrics::CSV_HEADER)?;
    m.add(
        "OBJECTIVES",
        Objective::ALL.iter().map(|o| o.name()).collect::<Vec<_>>(),
    )?;
    m.add_function(wrap_pyfunction!(normalize_rows, m)?)?;
    m.add_function(wrap_pyfunction!(clip_loss, m)?)?;
    m.add_function(wrap_pyfunction!(atp_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cu_loss, m)?)?;
    m.add_function(wrap_pyfunction!(combined_loss, m)?)?;
    m.add_function(wrap_pyfunction!(gap, m)?)?;
    m.add_function(wrap_pyfunction!(cos_true_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(angular_value, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(centroid_split_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(alignment_report, m)?)?;
    m.add_function(wrap_pyfunction!(train_run, m)?)?;
    m.add_class::<SyntheticDataset>()?;
    m.add_class::<TrainResult>()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let m = ndarray::array![[1.0, 2.0], [3.0, 4.0]];
        let rows = rows_of(&m);
        assert_eq!(rows, vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(gapforge::embedding::rows_to_matrix(&rows).unwrap(), m);
    }

    #[test]
    fn objective_names_parse() {
        assert!(parse_objective("atp-only").is_ok());
        assert!(parse_objective("nope").is_err());
    }
}
