//! Python bindings for the poisoning-detection pipeline: corpus generation
//! and ingest, attacks, retrieval, the toy LM, the triplet-embedding
//! detector, and the end-to-end runner.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use revprag::attack::{generate_all, inject, AttackSpec};
use revprag::corpus;
use revprag::detector;
use revprag::embed::EmbedConfig;
use revprag::error::Error;
use revprag::langmodel;
use revprag::pipeline;
use revprag::probedata::ActivationDataset;
use revprag::retrieve;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// QA corpus plus its knowledge-database documents.
#[pyclass(name = "Corpus")]
#[derive(Clone)]
struct PyCorpus {
    inner: corpus::Corpus,
}

#[pymethods]
impl PyCorpus {
    /// Deterministically generate a synthetic corpus.
    #[staticmethod]
    fn generate(n_facts: usize, poisoned_fraction: f64, seed: u64) -> PyResult<PyCorpus> {
        Ok(PyCorpus {
            inner: corpus::gen_synthetic(n_facts, poisoned_fraction, seed).map_err(to_py)?,
        })
    }

    /// Read a corpus from a JSONL file.
    #[staticmethod]
    fn ingest(path: PathBuf) -> PyResult<PyCorpus> {
        Ok(PyCorpus {
            inner: corpus::ingest_jsonl(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        corpus::save_jsonl(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn n_instances(&self) -> usize {
        self.inner.triples.len()
    }

    #[getter]
    fn n_documents(&self) -> usize {
        self.inner.documents.len()
    }

    #[getter]
    fn n_poisoned_documents(&self) -> usize {
        self.inner.poisoned_documents().count()
    }

    fn question(&self, instance_id: usize) -> PyResult<String> {
        self.inner
            .triple(instance_id)
            .map(|t| t.question.clone())
            .ok_or_else(|| PyValueError::new_err(format!("no instance {instance_id}")))
    }

    /// Craft and inject poisoned documents for every designated instance.
    #[pyo3(signature = (kind="poisonedrag", m=5, seed=42))]
    fn poison(&self, kind: &str, m: usize, seed: u64) -> PyResult<PyCorpus> {
        let spec = AttackSpec {
            kind: kind.parse().map_err(to_py)?,
            m,
            ..AttackSpec::default()
        };
        let cfg = EmbedConfig::default();
        let batches = generate_all(&self.inner, &spec, &cfg, seed).map_err(to_py)?;
        let (poisoned, _records) = inject(&self.inner, &batches, &cfg).map_err(to_py)?;
        Ok(PyCorpus { inner: poisoned })
    }

    /// Top-k retrieval over this corpus's documents.
    #[pyo3(signature = (query, k=5))]
    fn top_k(&self, query: &str, k: usize) -> Vec<(usize, f64)> {
        let index = retrieve::build_index(&self.inner.documents, &EmbedConfig::default());
        retrieve::top_k(&index, query, k).entries
    }
}

/// Trained toy language model.
#[pyclass(name = "LanguageModel")]
struct PyLanguageModel {
    inner: langmodel::LanguageModel,
}

#[pymethods]
impl PyLanguageModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<PyLanguageModel> {
        Ok(PyLanguageModel {
            inner: langmodel::LanguageModel::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    /// Greedy generation; returns the answer string.
    fn generate(&self, prompt: &str) -> PyResult<String> {
        Ok(self.inner.generate(prompt, false).map_err(to_py)?.0)
    }

    /// Greedy generation with per-layer last-token activation capture;
    /// returns (answer, activation matrix as nested lists).
    fn generate_with_activations(&self, prompt: &str) -> PyResult<(String, Vec<Vec<f64>>)> {
        let (answer, act) = self.inner.generate(prompt, true).map_err(to_py)?;
        let act = act.ok_or_else(|| PyRuntimeError::new_err("activation capture failed"))?;
        let rows = act
            .matrix
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect();
        Ok((answer, rows))
    }
}

/// Trained detector checkpoint.
#[pyclass(name = "Detector")]
struct PyDetector {
    inner: detector::DetectorParams,
}

#[pymethods]
impl PyDetector {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<PyDetector> {
        Ok(PyDetector {
            inner: detector::DetectorParams::load(path).map_err(to_py)?,
        })
    }

    /// Embed an activation map (nested lists) into the metric space.
    fn embed(&self, map: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let arr = to_array(&map)?;
        self.inner.embed_map(&arr).map_err(to_py)
    }

    /// 1-NN verdict against a support set; returns
    /// (label, nearest_support_id, distance) with label "correct"/"poisoned".
    fn classify(
        &self,
        support_path: PathBuf,
        map: Vec<Vec<f64>>,
    ) -> PyResult<(String, usize, f64)> {
        let support = detector::SupportSet::load(support_path).map_err(to_py)?;
        let arr = to_array(&map)?;
        let v = detector::classify(&self.inner, &support, &arr).map_err(to_py)?;
        let label = match v.label {
            detector::VerdictLabel::Correct => "correct",
            detector::VerdictLabel::Poisoned => "poisoned",
        };
        Ok((label.to_string(), v.nearest_support_id, v.distance))
    }
}

fn to_array(map: &[Vec<f64>]) -> PyResult<ndarray::Array2<f64>> {
    let rows = map.len();
    let cols = map.first().map(|r| r.len()).unwrap_or(0);
    if rows == 0 || cols == 0 || map.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err(
            "activation map must be a non-empty rectangular nested list",
        ));
    }
    let flat: Vec<f64> = map.iter().flatten().copied().collect();
    ndarray::Array2::from_shape_vec((rows, cols), flat)
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Triplet margin loss of Euclidean embeddings.
#[pyfunction]
#[pyo3(signature = (anchor, positive, negative, margin=1.0))]
fn triplet_loss(anchor: Vec<f64>, positive: Vec<f64>, negative: Vec<f64>, margin: f64) -> f64 {
    detector::triplet_loss(&anchor, &positive, &negative, margin)
}

/// Execute every pipeline stage and return the manifest as a dict.
#[pyfunction]
#[pyo3(signature = (out_dir, config_json=None, seed=None))]
fn full_run(
    py: Python<'_>,
    out_dir: PathBuf,
    config_json: Option<&str>,
    seed: Option<u64>,
) -> PyResult<Py<PyAny>> {
    let mut config: pipeline::RunConfig = match config_json {
        Some(text) => serde_json::from_str(text)
            .map_err(|e| PyValueError::new_err(format!("invalid config: {e}")))?,
        None => pipeline::RunConfig::default(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.validate().map_err(to_py)?;
    let (manifest, _state) = pipeline::full_run(&config, out_dir).map_err(to_py)?;
    let json = serde_json::to_string(&manifest)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_to_py(py, &json)
}

/// Load an activation dataset and return basic shape/label information.
#[pyfunction]
fn dataset_info(path: PathBuf) -> PyResult<HashMap<String, usize>> {
    let ds = ActivationDataset::load(path).map_err(to_py)?;
    let mut info = HashMap::new();
    info.insert("n_samples".to_string(), ds.samples.len());
    info.insert("rows".to_string(), ds.rows);
    info.insert("cols".to_string(), ds.cols);
    info.insert(
        "n_poisoned".to_string(),
        ds.samples.iter().filter(|s| s.label == 0).count(),
    );
    Ok(info)
}

fn json_to_py(py: Python<'_>, json: &str) -> PyResult<Py<PyAny>> {
    let loads = py.import("json")?.getattr("loads")?;
    Ok(loads.call1((json,))?.unbind())
}

#[pymodule]
fn revprag_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyLanguageModel>()?;
    m.add_class::<PyDetector>()?;
    m.add_function(wrap_pyfunction!(triplet_loss, m)?)?;
    m.add_function(wrap_pyfunction!(full_run, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_info, m)?)?;
    Ok(())
}
