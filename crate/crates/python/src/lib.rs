//! Python bindings: datasets, resampling, embeddings, saved models,
//! metrics and whole experiment stages.

use std::path::PathBuf;

use hatexfer::bootstrap;
use hatexfer::corpus::{self, Label};
use hatexfer::embeddings;
use hatexfer::evaluation::{evaluate_labels, ClassScores, EvalReport, ReportMeta};
use hatexfer::experiments::{self, ExperimentConfig, ExperimentError, Run, Stage};
use hatexfer::models::TrainedModel;
use hatexfer::sampling::{self, SamplingSpec};
use hatexfer::synthetic::{write_world, World, WorldConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn experiment_err(e: ExperimentError) -> PyErr {
    if e.exit_code() == 2 {
        value_err(e)
    } else {
        runtime_err(e)
    }
}

fn label(s: &str) -> PyResult<Label> {
    s.parse::<Label>().map_err(|_| value_err(format!("unknown label {s:?}")))
}

/// A named list of examples.
#[pyclass(name = "Dataset", module = "hatexfer_py")]
struct PyDataset {
    inner: corpus::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Build from parallel lists; `labels` entries may be None.
    #[new]
    #[pyo3(signature = (name, texts, labels=None))]
    fn new(name: String, texts: Vec<String>, labels: Option<Vec<Option<String>>>) -> PyResult<Self> {
        let labels = labels.unwrap_or_else(|| vec![None; texts.len()]);
        if labels.len() != texts.len() {
            return Err(value_err("texts and labels differ in length"));
        }
        let mut examples = Vec::with_capacity(texts.len());
        for (i, (t, l)) in texts.into_iter().zip(labels).enumerate() {
            let l = l.as_deref().map(label).transpose()?;
            examples.push(corpus::Example::new(format!("{name}-{i}"), t, l, "python"));
        }
        Ok(PyDataset {
            inner: corpus::Dataset::new(name, examples),
        })
    }

    #[staticmethod]
    fn read_tsv(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: corpus::read_tsv(&path).map_err(runtime_err)?,
        })
    }

    fn write_tsv(&self, path: PathBuf) -> PyResult<()> {
        corpus::write_tsv(&self.inner, &path).map_err(runtime_err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(noHate, Hate)`.
    fn class_counts(&self) -> (usize, usize) {
        let c = self.inner.class_counts();
        (c.no_hate, c.hate)
    }

    fn ids(&self) -> Vec<String> {
        self.inner.iter().map(|e| e.id.clone()).collect()
    }

    fn texts(&self) -> Vec<String> {
        self.inner.iter().map(|e| e.text.clone()).collect()
    }

    fn labels(&self) -> Vec<Option<&'static str>> {
        self.inner.iter().map(|e| e.label.map(Label::as_str)).collect()
    }

    fn __repr__(&self) -> String {
        format!("Dataset({:?}, {} examples, {})", self.inner.name, self.inner.len(), self.inner.class_counts())
    }
}

/// Resample by a spec such as `"ratio=7:1 mode=oversample seed=3"`.
#[pyfunction]
fn resample(dataset: &PyDataset, spec: &str) -> PyResult<PyDataset> {
    let spec: SamplingSpec = spec.parse().map_err(value_err)?;
    Ok(PyDataset {
        inner: sampling::resample(&dataset.inner, &spec).map_err(value_err)?,
    })
}

/// Class counts `resample` would produce from `(no_hate, hate)`.
#[pyfunction]
fn target_counts(no_hate: usize, hate: usize, spec: &str) -> PyResult<(usize, usize)> {
    let spec: SamplingSpec = spec.parse().map_err(value_err)?;
    let c = sampling::target_counts(corpus::ClassCounts::new(no_hate, hate), &spec, "input").map_err(value_err)?;
    Ok((c.no_hate, c.hate))
}

#[pyfunction]
fn majority(votes: [String; 3]) -> PyResult<&'static str> {
    let v = [label(&votes[0])?, label(&votes[1])?, label(&votes[2])?];
    Ok(bootstrap::majority(v).as_str())
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    embeddings::tokenize(text)
}

fn scores<'py>(py: Python<'py>, s: &ClassScores) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("precision", s.precision)?;
    d.set_item("recall", s.recall)?;
    d.set_item("f1", s.f1)?;
    Ok(d)
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("model", &r.meta.model)?;
    d.set_item("dataset", &r.meta.dataset)?;
    d.set_item("stage", &r.meta.stage)?;
    d.set_item("accuracy", r.accuracy)?;
    d.set_item("noHate", scores(py, &r.no_hate)?)?;
    d.set_item("Hate", scores(py, &r.hate)?)?;
    let m = PyDict::new(py);
    m.set_item("precision", r.macro_avg.precision)?;
    m.set_item("recall", r.macro_avg.recall)?;
    m.set_item("f1", r.macro_avg.f1)?;
    d.set_item("macro", m)?;
    d.set_item("confusion", r.matrix.counts.to_vec())?;
    Ok(d)
}

/// Classwise and macro scores, in percent, for gold and predicted labels.
#[pyfunction]
fn metrics<'py>(py: Python<'py>, gold: Vec<String>, pred: Vec<String>) -> PyResult<Bound<'py, PyDict>> {
    let g = gold.iter().map(|s| label(s)).collect::<PyResult<Vec<_>>>()?;
    let p = pred.iter().map(|s| label(s)).collect::<PyResult<Vec<_>>>()?;
    let r = evaluate_labels(&g, &p, ReportMeta::new("python", "labels", "metrics")).map_err(value_err)?;
    report_dict(py, &r)
}

/// Aligned word vectors with PAD and UNK rows.
#[pyclass(name = "EmbeddingTable", module = "hatexfer_py")]
struct PyEmbeddingTable {
    inner: embeddings::EmbeddingTable,
}

#[pymethods]
impl PyEmbeddingTable {
    #[staticmethod]
    #[pyo3(signature = (path, max_vocab=None))]
    fn load(path: PathBuf, max_vocab: Option<usize>) -> PyResult<Self> {
        Ok(PyEmbeddingTable {
            inner: embeddings::load_embeddings(&path, max_vocab).map_err(runtime_err)?,
        })
    }

    #[getter]
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn __len__(&self) -> usize {
        self.inner.rows()
    }

    fn lookup(&self, token: &str) -> usize {
        self.inner.lookup(token)
    }

    /// Tokenize, index and pad to `max_len`: `(indices, true_length)`.
    fn encode(&self, text: &str, max_len: usize) -> PyResult<(Vec<usize>, usize)> {
        if max_len == 0 {
            return Err(value_err("max_len must be at least 1"));
        }
        let e = embeddings::encode(&embeddings::tokenize(text), &self.inner, max_len);
        Ok((e.indices, e.true_length))
    }
}

/// A saved checkpoint of any architecture.
#[pyclass(name = "Model", module = "hatexfer_py", unsendable)]
struct PyModel {
    inner: TrainedModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: TrainedModel::load(&dir).map_err(runtime_err)?,
        })
    }

    #[getter]
    fn architecture(&self) -> &'static str {
        self.inner.architecture().as_str()
    }

    /// `(p_noHate, p_Hate)`.
    fn probabilities(&self, text: &str) -> PyResult<(f64, f64)> {
        let p = self.inner.probabilities(text).map_err(runtime_err)?;
        Ok((p[0], p[1]))
    }

    fn predict(&self, dataset: &PyDataset) -> PyResult<Vec<&'static str>> {
        let labels = self.inner.predict_labels(&dataset.inner).map_err(runtime_err)?;
        Ok(labels.into_iter().map(Label::as_str).collect())
    }

    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset) -> PyResult<Bound<'py, PyDict>> {
        let pred = self.inner.predict_labels(&dataset.inner).map_err(runtime_err)?;
        let gold = dataset
            .inner
            .iter()
            .map(|e| e.label.ok_or_else(|| value_err(format!("{} has no gold label", e.id))))
            .collect::<PyResult<Vec<_>>>()?;
        let meta = ReportMeta::new(self.inner.architecture().as_str(), &dataset.inner.name, "python");
        let r = evaluate_labels(&gold, &pred, meta).map_err(value_err)?;
        report_dict(py, &r)
    }
}

fn stage(name: &str) -> PyResult<Stage> {
    match name {
        "crosslingual" => Ok(Stage::Crosslingual),
        "bootstrap" => Ok(Stage::Bootstrap),
        "imbalance_sweep" => Ok(Stage::ImbalanceSweep),
        other => Err(value_err(format!("unknown stage {other:?}"))),
    }
}

/// Desk-scale config text for a stage, with paths relative to a synthetic world.
#[pyfunction]
fn desk_config(stage_name: &str, seed: u64) -> PyResult<String> {
    Ok(experiments::desk_config(stage(stage_name)?, seed))
}

/// Write the synthetic fixture tree to `root/world`.
#[pyfunction]
#[pyo3(signature = (root, forum_posts=300, seed=None))]
fn write_synthetic_world(root: PathBuf, forum_posts: usize, seed: Option<u64>) -> PyResult<()> {
    let mut cfg = WorldConfig::default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    write_world(&World::new(&cfg), &root.join("world"), forum_posts).map_err(runtime_err)?;
    Ok(())
}

/// Run the stage a config names and return its reports.
#[pyfunction]
#[pyo3(signature = (config, seed=None, out=None))]
fn run<'py>(
    py: Python<'py>,
    config: PathBuf,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut cfg = ExperimentConfig::load(&config).map_err(experiment_err)?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    let s = seed.unwrap_or(cfg.seed);
    cfg.apply_seed(s);
    let run = Run::new(cfg).map_err(experiment_err)?;
    let reports = match run.cfg.stage {
        Stage::Crosslingual => experiments::run_crosslingual(&run).map(|r| r.reports),
        Stage::Bootstrap => experiments::run_bootstrap(&run).map(|r| r.before.into_iter().chain(r.after).collect()),
        Stage::ImbalanceSweep => experiments::run_imbalance_sweep(&run),
    }
    .map_err(experiment_err)?;
    reports.iter().map(|r| report_dict(py, r)).collect()
}

#[pymodule]
fn hatexfer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyEmbeddingTable>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(resample, m)?)?;
    m.add_function(wrap_pyfunction!(target_counts, m)?)?;
    m.add_function(wrap_pyfunction!(majority, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(desk_config, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic_world, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_match_the_config_spelling() {
        for (name, want) in [
            ("crosslingual", Stage::Crosslingual),
            ("bootstrap", Stage::Bootstrap),
            ("imbalance_sweep", Stage::ImbalanceSweep),
        ] {
            assert_eq!(stage(name).unwrap(), want);
            let cfg: ExperimentConfig = ExperimentConfig::from_toml(&desk_config(name, 1).unwrap()).unwrap();
            assert_eq!(cfg.stage, want);
        }
    }

    #[test]
    fn target_counts_follow_the_rounding_rule() {
        assert_eq!(target_counts(3345, 855, "ratio=7:1 mode=oversample").unwrap(), (5985, 855));
        assert_eq!(target_counts(9018, 1281, "ratio=2:1 mode=undersample").unwrap(), (2562, 1281));
    }
}
