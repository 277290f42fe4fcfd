//! Python bindings: corpus generation, model build/train/evaluate,
//! captioning, checkpoints, grid search and metrics.

use std::fmt::Display;
use std::path::PathBuf;

use jewelcap::augment::Image;
use jewelcap::captioner::{CaptionerModel, ModelConfig, Task};
use jewelcap::grid::{grid_search as run_grid, GridPoint};
use jewelcap::layers::CellKind;
use jewelcap::metrics::classification_report as report_of;
use jewelcap::optim::OptimizerKind;
use jewelcap::synth::{
    catalog_specs, generate_corpus, render_jewel, AccessoryType, CaptionLevel, Corpus, CorpusConfig, Material,
    RenderParams, Split, Stone,
};
use jewelcap::train::{evaluate_samples, train, HyperConfig};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde::Serialize;

create_exception!(jewelcap_py, JewelcapError, PyException);

fn py_err(e: impl Display) -> PyErr {
    JewelcapError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: Display,
{
    s.parse::<T>().map_err(py_err)
}

/// Serializes through JSON into plain Python dicts and lists.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(py_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_split(s: &str) -> PyResult<Split> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| py_err(format!("unknown split `{s}`")))
}

fn from_words<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| py_err(format!("unknown {what} `{s}`")))
}

#[pyclass(name = "Corpus", module = "jewelcap_py", frozen)]
pub struct PyCorpus {
    inner: Corpus,
}

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    #[pyo3(signature = (n_base = 100, seed = 0, multiplier = 4, image_size = 64))]
    fn generate(py: Python<'_>, n_base: usize, seed: u64, multiplier: usize, image_size: usize) -> PyResult<Self> {
        let config = CorpusConfig {
            n_base,
            seed,
            multiplier,
            image_size,
        };
        let inner = py.detach(|| generate_corpus(config)).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Corpus::load(&path).map_err(py_err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }

    fn manifest<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.manifest)
    }

    /// Sample ids, optionally restricted to `train`, `val` or `test`.
    #[pyo3(signature = (split = None))]
    fn ids(&self, split: Option<&str>) -> PyResult<Vec<String>> {
        let split = split.map(parse_split).transpose()?;
        Ok(self
            .inner
            .samples
            .iter()
            .filter(|s| split.is_none_or(|p| s.split == p))
            .map(|s| s.id.clone())
            .collect())
    }

    fn caption(&self, id: &str, level: &str) -> PyResult<String> {
        let level: CaptionLevel = parse(level)?;
        Ok(self.sample(id)?.captions.get(level).to_string())
    }

    fn image_png<'py>(&self, py: Python<'py>, id: &str) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = self.sample(id)?.image.encode_png().map_err(py_err)?;
        Ok(PyBytes::new(py, &bytes))
    }
}

impl PyCorpus {
    fn sample(&self, id: &str) -> PyResult<&jewelcap::synth::Sample> {
        self.inner
            .samples
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| py_err(format!("no sample `{id}`")))
    }
}

#[pyclass(name = "Model", module = "jewelcap_py")]
pub struct PyModel {
    inner: CaptionerModel,
}

#[allow(clippy::too_many_arguments)]
fn hyper(
    neurons: usize,
    batch_size: usize,
    optimizer: &str,
    learning_rate: f64,
    max_epochs: usize,
    patience: usize,
    early_stopping: bool,
    seed: u64,
) -> PyResult<HyperConfig> {
    let h = HyperConfig {
        neurons,
        batch_size,
        optimizer: parse::<OptimizerKind>(optimizer)?,
        learning_rate,
        max_epochs,
        patience,
        early_stopping,
        seed,
    };
    h.validate().map_err(py_err)?;
    Ok(h)
}

#[pymethods]
impl PyModel {
    /// New model sized for `corpus` (its vocabulary and image size).
    #[new]
    #[pyo3(signature = (corpus, task = "captioning", decoder = "gru", neurons = 256, level = "complete", embed_dim = 64, seed = 0))]
    fn new(
        corpus: &PyCorpus,
        task: &str,
        decoder: &str,
        neurons: usize,
        level: &str,
        embed_dim: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let mut config = ModelConfig::new(
            parse::<Task>(task)?,
            parse::<CellKind>(decoder)?,
            neurons,
            corpus.inner.vocab().map_err(py_err)?,
        );
        config.level = parse(level)?;
        config.embed_dim = embed_dim;
        config.image_size = corpus.inner.manifest.config.image_size;
        config.seed = seed;
        Ok(Self {
            inner: CaptionerModel::build(config).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CaptionerModel::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn checksum(&self) -> String {
        self.inner.checksum()
    }

    #[getter]
    fn level(&self) -> String {
        self.inner.answers_level().to_string()
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.config())
    }

    /// Trains in place on the corpus splits; returns the report as a dict.
    #[pyo3(signature = (corpus, batch_size = 16, optimizer = "adam", learning_rate = 0.001, max_epochs = 200, patience = 10, early_stopping = true, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        corpus: &PyCorpus,
        batch_size: usize,
        optimizer: &str,
        learning_rate: f64,
        max_epochs: usize,
        patience: usize,
        early_stopping: bool,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let h = hyper(
            self.inner.config().neurons,
            batch_size,
            optimizer,
            learning_rate,
            max_epochs,
            patience,
            early_stopping,
            seed,
        )?;
        let model = &mut self.inner;
        let samples = &corpus.inner.samples;
        let report = py.detach(|| train(model, samples, &h)).map_err(py_err)?;
        to_py(py, &report)
    }

    #[pyo3(signature = (corpus, split = "test"))]
    fn evaluate<'py>(&self, py: Python<'py>, corpus: &PyCorpus, split: &str) -> PyResult<Bound<'py, PyAny>> {
        let split = parse_split(split)?;
        let report = evaluate_samples(&self.inner, &corpus.inner.split(split)).map_err(py_err)?;
        to_py(py, &report)
    }

    /// Caption for PNG bytes: decoded caption, or the class word for a
    /// classification model.
    fn caption_png(&self, png: &[u8]) -> PyResult<String> {
        let image = Image::decode(png).map_err(py_err)?;
        self.inner.describe(&image).map_err(py_err)
    }

    fn caption_file(&self, path: PathBuf) -> PyResult<String> {
        let image = Image::load_png(&path).map_err(py_err)?;
        self.inner.describe(&image).map_err(py_err)
    }
}

/// Renders a catalog variant as PNG bytes. Material and stone pick among
/// the variants the model is sold in; the first one is the default.
#[pyfunction]
#[pyo3(signature = (model_name, material = None, stone = None, size = 64, jitter_seed = 0))]
fn render<'py>(
    py: Python<'py>,
    model_name: &str,
    material: Option<&str>,
    stone: Option<&str>,
    size: usize,
    jitter_seed: u64,
) -> PyResult<Bound<'py, PyBytes>> {
    let material = material.map(|m| from_words::<Material>("material", m)).transpose()?;
    let stone = stone.map(|s| from_words::<Stone>("stone", s)).transpose()?;
    let mut spec = catalog_specs()
        .into_iter()
        .filter(|s| s.model_name == model_name)
        .find(|s| material.is_none_or(|m| s.material == Some(m)) && stone.is_none_or(|t| s.stone == Some(t)))
        .ok_or_else(|| py_err(format!("no catalog variant for `{model_name}` with that material and stone")))?;
    spec.render = RenderParams { jitter_seed };
    let png = render_jewel(&spec, size).and_then(|img| img.encode_png()).map_err(py_err)?;
    Ok(PyBytes::new(py, &png))
}

/// Trains every `(decoder, neurons)` pair and returns `(table, rows)`.
#[pyfunction]
#[pyo3(signature = (corpus, decoders = vec!["gru".to_string(), "lstm".to_string()], neurons = vec![64, 256], task = "captioning", level = "complete", batch_size = 16, learning_rate = 0.001, max_epochs = 200, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn grid_search<'py>(
    py: Python<'py>,
    corpus: &PyCorpus,
    decoders: Vec<String>,
    neurons: Vec<usize>,
    task: &str,
    level: &str,
    batch_size: usize,
    learning_rate: f64,
    max_epochs: usize,
    seed: u64,
) -> PyResult<(String, Bound<'py, PyAny>)> {
    let vocab = corpus.inner.vocab().map_err(py_err)?;
    let mut space = Vec::new();
    for d in &decoders {
        for &n in &neurons {
            let mut model = ModelConfig::new(parse(task)?, parse(d)?, n, vocab.clone());
            model.level = parse(level)?;
            model.image_size = corpus.inner.manifest.config.image_size;
            let h = hyper(n, batch_size, "adam", learning_rate, max_epochs, 10, true, seed)?;
            space.push(GridPoint::new(model, h));
        }
    }
    let samples = &corpus.inner.samples;
    let result = py.detach(|| run_grid(&space, samples)).map_err(py_err)?;
    Ok((result.to_table(), to_py(py, &result.rows)?))
}

/// Precision/recall/F1 report over accessory type words.
#[pyfunction]
fn classification_report<'py>(py: Python<'py>, truth: Vec<String>, predicted: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
    let types = |words: &[String]| -> PyResult<Vec<AccessoryType>> {
        words
            .iter()
            .map(|w| AccessoryType::from_word(w).ok_or_else(|| py_err(format!("unknown accessory type `{w}`"))))
            .collect()
    };
    let report = report_of(&types(&truth)?, &types(&predicted)?).map_err(py_err)?;
    to_py(py, &report)
}

#[pyfunction]
fn tokenize(caption: &str) -> Vec<String> {
    jewelcap::vocab::tokenize(caption)
}

/// Adds the module contents to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("JewelcapError", m.py().get_type::<JewelcapError>())?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(grid_search, m)?)?;
    m.add_function(wrap_pyfunction!(classification_report, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    Ok(())
}

#[pymodule]
fn jewelcap_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
