//! Python bindings: products, taxonomies, trained models and the
//! generate / train / evaluate workflow.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use prodcat::catalog::{ingest, LabeledExample};
use prodcat::config::RunConfig;
use prodcat::models::{Classifier, LoadedModel, Manifest};
use prodcat::pipeline::{run_training, TAXONOMY_FILE, TEST_FILE};
use prodcat::synthetic::{generate, SyntheticSpec};
use prodcat::train::evaluate as evaluate_examples;

fn to_py(e: prodcat::Error) -> PyErr {
    match e {
        prodcat::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// A catalog item: free-text attributes plus ordered `(name, value)` pairs.
#[pyclass(name = "Product", skip_from_py_object)]
#[derive(Clone)]
struct PyProduct {
    inner: prodcat::catalog::Product,
}

#[pymethods]
impl PyProduct {
    #[new]
    #[pyo3(signature = (id, title=None, description=None, attributes=None))]
    fn new(
        id: String,
        title: Option<String>,
        description: Option<String>,
        attributes: Option<Vec<(String, String)>>,
    ) -> Self {
        let mut p = prodcat::catalog::Product::new(id);
        if let Some(t) = title {
            p = p.with_text("product_name", t);
        }
        if let Some(d) = description {
            p = p.with_text("product_short_description", d);
        }
        for (n, v) in attributes.unwrap_or_default() {
            p = p.with_attr(n, v);
        }
        PyProduct { inner: p }
    }

    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }

    #[getter]
    fn title(&self) -> &str {
        self.inner.text("product_name")
    }

    #[getter]
    fn attributes(&self) -> Vec<(String, String)> {
        self.inner.structured.clone()
    }

    fn set_text(&mut self, name: String, text: String) {
        self.inner.unstructured.insert(name, text);
    }

    fn __repr__(&self) -> String {
        format!("Product(id={:?}, title={:?})", self.inner.id, self.title())
    }
}

#[pyclass(name = "Taxonomy", skip_from_py_object)]
struct PyTaxonomy {
    inner: prodcat::catalog::Taxonomy,
}

#[pymethods]
impl PyTaxonomy {
    /// One `A > B > Leaf` path per line.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        prodcat::catalog::Taxonomy::parse(text)
            .map(|inner| PyTaxonomy { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        prodcat::catalog::Taxonomy::load(path)
            .map(|inner| PyTaxonomy { inner })
            .map_err(to_py)
    }

    fn leaves(&self) -> Vec<String> {
        self.inner.leaf_labels()
    }

    /// Node names from the root down to `leaf`.
    fn path(&self, leaf: &str) -> PyResult<Vec<String>> {
        let id = self
            .inner
            .leaf(leaf)
            .ok_or_else(|| PyValueError::new_err(format!("no leaf named {leaf:?}")))?;
        Ok(self.inner.path(id).into_iter().map(|n| self.inner.node(n).name.clone()).collect())
    }

    fn __len__(&self) -> usize {
        self.inner.leaves().len()
    }
}

/// A saved model directory, flat or hierarchical.
#[pyclass(name = "Model", skip_from_py_object)]
struct PyModel {
    inner: LoadedModel,
    dir: PathBuf,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let inner = LoadedModel::load(&dir).map_err(to_py)?;
        Ok(PyModel { inner, dir })
    }

    #[getter]
    fn kind(&self) -> String {
        format!("{:?}", self.inner.kind()).to_lowercase()
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.config_hash()
    }

    /// Top-`k` `(label, probability)` pairs.
    #[pyo3(signature = (product, k=3))]
    fn predict(&self, product: &PyProduct, k: usize) -> PyResult<Vec<(String, f64)>> {
        let preds = self.inner.predict_topk(&product.inner, k).map_err(to_py)?;
        Ok(preds.into_iter().map(|p| (p.label, p.probability)).collect())
    }

    #[pyo3(signature = (products, k=3))]
    fn predict_batch(
        &self,
        py: Python<'_>,
        products: Vec<PyRef<'_, PyProduct>>,
        k: usize,
    ) -> PyResult<Vec<Vec<(String, f64)>>> {
        let items: Vec<prodcat::catalog::Product> = products.iter().map(|p| p.inner.clone()).collect();
        let out = py
            .detach(|| {
                let refs: Vec<_> = items.iter().collect();
                self.inner.predict_topk_batch(&refs, k)
            })
            .map_err(to_py)?;
        Ok(out
            .into_iter()
            .map(|ps| ps.into_iter().map(|p| (p.label, p.probability)).collect())
            .collect())
    }

    /// Metrics on a labeled corpus, by default the run's own test split.
    #[pyo3(signature = (data=None))]
    fn evaluate<'py>(&self, py: Python<'py>, data: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
        let taxonomy = prodcat::catalog::Taxonomy::load(self.dir.join(TAXONOMY_FILE)).map_err(to_py)?;
        let data = data.unwrap_or_else(|| self.dir.join(TEST_FILE));
        let examples: Vec<LabeledExample> = ingest(&data, &taxonomy).map_err(to_py)?.examples;
        let report = py.detach(|| evaluate_examples(&self.inner, &examples)).map_err(to_py)?;
        json_to_py(py, &report)
    }

    fn manifest<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &Manifest::load(&self.dir).map_err(to_py)?)
    }
}

/// Writes a synthetic corpus (taxonomy, corpus and ground truth) to `out`.
#[pyfunction]
#[pyo3(signature = (out, scenario="standard", classes=50, per_class=200, title_overlap=0.3, attr_signal="strong", seed=0))]
fn generate_synthetic(
    out: PathBuf,
    scenario: &str,
    classes: usize,
    per_class: usize,
    title_overlap: f64,
    attr_signal: &str,
    seed: u64,
) -> PyResult<usize> {
    let spec = SyntheticSpec {
        scenario: scenario.parse().map_err(to_py)?,
        classes,
        per_class,
        title_overlap,
        attr_signal: attr_signal.parse().map_err(to_py)?,
        seed,
    };
    let corpus = generate(&spec).map_err(to_py)?;
    corpus.write(&out).map_err(to_py)?;
    Ok(corpus.examples.len())
}

/// Trains from a corpus file and writes the run directory. `config` is
/// `key = value` text; returns the test metrics.
#[pyfunction]
#[pyo3(signature = (data, taxonomy, out, config="", seed=None))]
fn train<'py>(
    py: Python<'py>,
    data: PathBuf,
    taxonomy: PathBuf,
    out: PathBuf,
    config: &str,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = RunConfig::parse(config).map_err(to_py)?;
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    let report = py
        .detach(|| {
            let taxonomy = prodcat::catalog::Taxonomy::load(&taxonomy)?;
            let examples = ingest(&data, &taxonomy)?.examples;
            run_training(&cfg, &taxonomy, &examples, Some(&out)).map(|r| r.test)
        })
        .map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("test", json_to_py(py, &report)?)?;
    out.set_item("top1", report.top1())?;
    Ok(out.into_any())
}

/// Adds every class and function to `m`; also used to embed the module.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProduct>()?;
    m.add_class::<PyTaxonomy>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}

#[pymodule]
fn prodcat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
