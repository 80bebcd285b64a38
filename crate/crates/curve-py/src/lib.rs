//! Python bindings for the curve pipeline: dataset generation, training,
//! evaluation, robustness sweeps, and checkpoint round-trips. Configs come
//! in as JSON strings so the Rust structs stay the single source of truth.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use curve::checkpoint::Checkpoint;
use curve::harness::{
    evaluate_metrics, finetune_partial, robustness_sweep, ROBUSTNESS_GRID,
};
use curve::model::AblationMode;
use curve::scene::{
    generate_synthetic_dataset, read_dataset, write_dataset, SynthConfig,
};
use curve::train::{split_dataset, train_model, SplitIndices, TrainConfig};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn parse_json<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        Some(s) => serde_json::from_str(s).map_err(err),
        None => Ok(T::default()),
    }
}

/// Convert any serializable value into native Python objects.
fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    json_value_to_py(py, &serde_json::to_value(value).map_err(err)?)
}

fn json_value_to_py<'py>(
    py: Python<'py>,
    v: &serde_json::Value,
) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_py(py).into_bound(py),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_py(py).into_bound(py)
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_py(py).into_bound(py)
            }
        }
        Value::String(s) => s.into_py(py).into_bound(py),
        Value::Array(items) => {
            let list = PyList::empty_bound(py);
            for item in items {
                list.append(json_value_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new_bound(py);
            for (k, item) in map {
                dict.set_item(k, json_value_to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

/// A labeled sequence dataset, either synthetic or loaded from JSONL.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: curve::scene::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Generate a synthetic confounded dataset; `config_json` overrides the
    /// default generator configuration.
    #[staticmethod]
    #[pyo3(signature = (config_json=None))]
    fn generate(config_json: Option<&str>) -> PyResult<Self> {
        let cfg: SynthConfig = parse_json(config_json)?;
        Ok(PyDataset {
            inner: generate_synthetic_dataset(&cfg).map_err(err)?,
        })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: read_dataset(&path).map_err(io_err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        write_dataset(&path, &self.inner).map_err(io_err)
    }

    #[getter]
    fn num_samples(&self) -> usize {
        self.inner.samples.len()
    }

    #[getter]
    fn frames_per_sequence(&self) -> usize {
        self.inner.t
    }

    fn labels(&self) -> Vec<u8> {
        self.inner.samples.iter().map(|s| s.label).collect()
    }

    fn splits(&self) -> Vec<String> {
        self.inner
            .samples
            .iter()
            .map(|s| format!("{:?}", s.split).to_lowercase())
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(num_samples={}, frames_per_sequence={})",
            self.inner.samples.len(),
            self.inner.t
        )
    }
}

/// A trained pipeline plus the configuration it was trained with.
#[pyclass(name = "Model")]
struct PyModel {
    model: curve::model::CurveModel,
    cfg: TrainConfig,
    epochs_done: usize,
    adam: curve::checkpoint::AdamState,
    loss_curve: Vec<f64>,
}

impl PyModel {
    fn splits(&self, ds: &PyDataset) -> PyResult<SplitIndices> {
        split_dataset(&ds.inner, &self.cfg).map_err(err)
    }

    fn pool<'a>(&self, splits: &'a SplitIndices, name: &str) -> PyResult<&'a [usize]> {
        Ok(match name {
            "train" => &splits.train,
            "test" => &splits.test,
            "validate" => &splits.validate,
            "ood" => &splits.ood,
            other => return Err(err(format!("unknown split {other:?}"))),
        })
    }
}

#[pymethods]
impl PyModel {
    /// Train on the dataset's train split; `config_json` overrides the
    /// default training configuration, `mode` picks the ablation variant.
    #[staticmethod]
    #[pyo3(signature = (dataset, config_json=None, mode=None))]
    fn train(dataset: &PyDataset, config_json: Option<&str>, mode: Option<&str>) -> PyResult<Self> {
        let mut cfg: TrainConfig = parse_json(config_json)?;
        if let Some(m) = mode {
            cfg = cfg.for_mode(AblationMode::parse(m).map_err(err)?);
        }
        let out = train_model(&dataset.inner, &cfg).map_err(err)?;
        Ok(PyModel {
            model: out.model,
            cfg,
            epochs_done: out.epochs_done,
            adam: out.adam_state,
            loss_curve: out.curve.epochs.iter().map(|l| l.total).collect(),
        })
    }

    /// Metrics dict (accuracy, AUC, MCC, topology, uncertainty means) on one
    /// of the splits: "train", "test", "validate", or "ood".
    #[pyo3(signature = (dataset, split="test"))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        split: &str,
    ) -> PyResult<Bound<'py, PyAny>> {
        let splits = self.splits(dataset)?;
        let indices = self.pool(&splits, split)?;
        let report = evaluate_metrics(&self.model, &dataset.inner, indices, &self.cfg, None)
            .map_err(err)?;
        to_py(py, &report)
    }

    /// Accuracy under geometric noise: a list of (sigma, metrics) pairs over
    /// the standard sweep grid.
    #[pyo3(signature = (dataset, split="test", eval_seed=0))]
    fn robustness<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        split: &str,
        eval_seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let splits = self.splits(dataset)?;
        let indices = self.pool(&splits, split)?;
        let rows = robustness_sweep(
            &self.model,
            &dataset.inner,
            indices,
            &self.cfg,
            &ROBUSTNESS_GRID,
            eval_seed,
        )
        .map_err(err)?;
        to_py(py, &rows)
    }

    /// Fine-tune the frozen-backbone heads on a label fraction of the OOD
    /// domain and return the adapted metrics dict.
    #[pyo3(signature = (dataset, fraction, epochs=None))]
    fn finetune<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        fraction: f64,
        epochs: Option<usize>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let ckpt = Checkpoint::from_model(&self.model, &self.cfg, self.epochs_done, self.adam.clone());
        let (result, _) = finetune_partial(&ckpt, &dataset.inner, fraction, epochs).map_err(err)?;
        to_py(py, &result)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_model(&self.model, &self.cfg, self.epochs_done, self.adam.clone())
            .save(&path)
            .map_err(io_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(io_err)?;
        let model = ckpt.to_model().map_err(err)?;
        Ok(PyModel {
            model,
            cfg: ckpt.config,
            epochs_done: ckpt.epoch,
            adam: ckpt.adam,
            loss_curve: Vec::new(),
        })
    }

    /// Per-epoch total loss from training; empty for loaded checkpoints.
    #[getter]
    fn loss_curve(&self) -> Vec<f64> {
        self.loss_curve.clone()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.model.num_params()
    }

    #[getter]
    fn mode(&self) -> String {
        self.cfg.mode.name().to_string()
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(mode={}, num_params={}, epochs_done={})",
            self.cfg.mode.name(),
            self.model.num_params(),
            self.epochs_done
        )
    }
}

#[pymodule]
fn curve_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add("ROBUSTNESS_GRID", ROBUSTNESS_GRID.to_vec())?;
    m.add(
        "ABLATION_MODES",
        AblationMode::ALL.map(|m| m.name()).to_vec(),
    )?;
    Ok(())
}
