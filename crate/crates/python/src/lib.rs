use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ::latentscope as core;
use core::analyze::{norms_by_capture, norms_by_position};
use core::linalg::Matrix;
use core::model::{CaptureSpec, CaptureTag, Model as CoreModel, ModelConfig};
use core::pipeline::{run_capture, Mode, RunConfig};
use core::plot::{render_pair_grid, render_scatter, PlotSpec, PointTag};
use core::reduce::{
    pca_fit as core_pca_fit, reducer_load, reducer_save, umap_fit as core_umap_fit, Metric, Reducer as CoreReducer,
    UmapParams,
};
use core::store::{LatentDataset, Selection};
use core::tokenizer::{BpeVocab, Tokenizer as CoreTokenizer};

create_exception!(latentscope, LatentscopeError, PyException);

fn err(e: core::Error) -> PyErr {
    LatentscopeError::new_err(e.to_string())
}

fn to_json<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| LatentscopeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(err)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

/// A decoder-only transformer bound from a checkpoint.
#[pyclass(module = "latentscope", frozen)]
struct Model {
    inner: CoreModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: core::checkpoint::load_model(path).map_err(err)?,
        })
    }

    /// Random-weight model from a config dict.
    #[staticmethod]
    #[pyo3(signature = (config, seed=0))]
    fn synthetic(py: Python<'_>, config: &Bound<'_, PyDict>, seed: u64) -> PyResult<Self> {
        let text: String = py.import("json")?.call_method1("dumps", (config,))?.extract()?;
        let cfg: ModelConfig =
            serde_json::from_str(&text).map_err(|e| LatentscopeError::new_err(e.to_string()))?;
        Ok(Self {
            inner: core::checkpoint::synthetic_model(&cfg, seed).map_err(err)?,
        })
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_json(py, &self.inner.config)
    }

    /// Capture names in enumeration order.
    fn capture_names(&self) -> Vec<String> {
        CaptureTag::enumerate(self.inner.config.n_blocks)
            .iter()
            .map(ToString::to_string)
            .collect()
    }

    /// Runs the model; returns `{capture name: [seq][d_model]}`.
    #[pyo3(signature = (tokens, captures=None))]
    fn forward(&self, tokens: Vec<u32>, captures: Option<Vec<String>>) -> PyResult<Vec<(String, Vec<Vec<f64>>)>> {
        let cfg = &self.inner.config;
        let spec = match captures {
            None => CaptureSpec::all(cfg),
            Some(names) => {
                let tags = names
                    .iter()
                    .map(|n| n.parse::<CaptureTag>())
                    .collect::<core::Result<Vec<_>>>()
                    .map_err(err)?;
                CaptureSpec::filtered(cfg, |t| tags.contains(t)).map_err(err)?
            }
        };
        let out = self.inner.forward(&tokens, &spec).map_err(err)?;
        Ok(out
            .captures
            .iter()
            .map(|(t, m)| (t.to_string(), rows(m)))
            .collect())
    }
}

#[pyclass(module = "latentscope", frozen)]
struct Tokenizer {
    inner: CoreTokenizer,
}

#[pymethods]
impl Tokenizer {
    /// GPT-2 style byte-level BPE from vocab.json and merges.txt.
    #[staticmethod]
    fn from_files(vocab: &str, merges: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CoreTokenizer::Bpe(Box::new(BpeVocab::load(vocab, merges).map_err(err)?)),
        })
    }

    /// One token per UTF-8 byte.
    #[staticmethod]
    fn bytes() -> Self {
        Self {
            inner: CoreTokenizer::Bytes,
        }
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        self.inner.encode(text)
    }

    fn decode(&self, ids: Vec<u32>) -> PyResult<String> {
        self.inner.decode(&ids).map_err(err)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }
}

/// A latent dataset file, memory-mapped.
#[pyclass(module = "latentscope", frozen)]
struct Dataset {
    inner: LatentDataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: LatentDataset::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    /// `(samples, positions, captures, dim)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let [n, s, c, d] = self.inner.shape();
        (n, s, c, d)
    }

    #[getter]
    fn header<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_json(py, self.inner.header())
    }

    fn checksum(&self) -> u64 {
        self.inner.checksum()
    }

    fn vector(&self, sample: usize, position: usize, capture: usize) -> PyResult<Vec<f64>> {
        let [n, s, c, _] = self.inner.shape();
        if sample >= n || position >= s || capture >= c {
            return Err(LatentscopeError::new_err(format!(
                "index ({sample}, {position}, {capture}) outside ({n}, {s}, {c})"
            )));
        }
        Ok(self.inner.vector(sample, position, capture))
    }

    /// Mean L2 norm per `"position"` or `"capture"`, as `(indices, means)`.
    #[pyo3(signature = (by="position"))]
    fn norms(&self, by: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let sel = Selection::default();
        let r = match by {
            "position" => norms_by_position(&self.inner, &sel),
            "capture" => norms_by_capture(&self.inner, &sel),
            other => return Err(LatentscopeError::new_err(format!("unknown axis {other:?}"))),
        }
        .map_err(err)?;
        Ok((r.indices, r.values))
    }
}

/// Runs a capture and writes a dataset; returns the summary dict.
#[pyfunction]
#[pyo3(signature = (model, out, mode="text", n_samples=8, seq_len=64, seed=0, corpus=None, compress_to=None, tokenizer=None, bos=false))]
#[allow(clippy::too_many_arguments)]
fn capture<'py>(
    py: Python<'py>,
    model: &Model,
    out: &str,
    mode: &str,
    n_samples: usize,
    seq_len: usize,
    seed: u64,
    corpus: Option<String>,
    compress_to: Option<usize>,
    tokenizer: Option<&Tokenizer>,
    bos: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let mode = match mode {
        "text" => Mode::Text,
        "singular" => Mode::Singular,
        other => return Err(LatentscopeError::new_err(format!("unknown mode {other:?}"))),
    };
    let cfg = RunConfig {
        mode,
        corpus_path: corpus.map(Into::into),
        n_samples,
        seq_len: if mode == Mode::Singular { 1 } else { seq_len },
        prepend_bos: bos,
        capture: CaptureSpec::all(&model.inner.config),
        compress_to,
        seed,
        singular_subsample: false,
    };
    let tok = tokenizer.map_or(CoreTokenizer::Bytes, |t| t.inner.clone());
    let summary = py
        .detach(|| run_capture(&cfg, &model.inner, &tok, out))
        .map_err(err)?;
    to_json(py, &summary)
}

/// A fitted PCA or UMAP reducer.
#[pyclass(module = "latentscope", frozen)]
struct Reducer {
    inner: CoreReducer,
}

#[pymethods]
impl Reducer {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: reducer_load(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        reducer_save(path, &self.inner).map_err(err)
    }

    fn transform(&self, py: Python<'_>, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let m = matrix(x)?;
        let out = py.detach(|| self.inner.transform(&m)).map_err(err)?;
        Ok(rows(&out))
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    /// PCA basis rows, or `None` for UMAP.
    #[getter]
    fn basis(&self) -> Option<Vec<Vec<f64>>> {
        match &self.inner {
            CoreReducer::Pca(m) => Some(rows(&m.basis)),
            CoreReducer::Umap(_) => None,
        }
    }

    /// UMAP fit embedding, or `None` for PCA.
    #[getter]
    fn embedding(&self) -> Option<Vec<Vec<f64>>> {
        match &self.inner {
            CoreReducer::Umap(m) => Some(rows(&m.embedding)),
            CoreReducer::Pca(_) => None,
        }
    }
}

/// Uncentered PCA to `k` dimensions.
#[pyfunction]
fn pca_fit(x: Vec<Vec<f64>>, k: usize) -> PyResult<Reducer> {
    let m = matrix(x)?;
    Ok(Reducer {
        inner: CoreReducer::Pca(core_pca_fit(&m, k, "python").map_err(err)?),
    })
}

#[pyfunction]
#[pyo3(signature = (x, dims=2, n_neighbors=15, min_dist=0.1, metric="euclidean", n_epochs=200, seed=0))]
#[allow(clippy::too_many_arguments)]
fn umap_fit(
    py: Python<'_>,
    x: Vec<Vec<f64>>,
    dims: usize,
    n_neighbors: usize,
    min_dist: f64,
    metric: &str,
    n_epochs: usize,
    seed: u64,
) -> PyResult<Reducer> {
    let m = matrix(x)?;
    let params = UmapParams {
        n_neighbors,
        min_dist,
        metric: metric.parse::<Metric>().map_err(err)?,
        n_epochs,
        seed,
        ..UmapParams::default()
    };
    let (model, _) = py.detach(|| core_umap_fit(&m, dims, &params)).map_err(err)?;
    Ok(Reducer {
        inner: CoreReducer::Umap(model),
    })
}

/// SVG scatter (2 columns) or pair grid (more columns) of points, optionally
/// labelled by capture name for colouring.
#[pyfunction]
#[pyo3(signature = (points, captures=None, title=""))]
fn render_points(points: Vec<Vec<f64>>, captures: Option<Vec<String>>, title: &str) -> PyResult<String> {
    let m = matrix(points)?;
    let tags: Vec<PointTag> = match captures {
        Some(names) => names
            .iter()
            .map(|n| {
                n.parse::<CaptureTag>().map(|t| PointTag {
                    capture: Some(t),
                    position: None,
                })
            })
            .collect::<core::Result<_>>()
            .map_err(err)?,
        None => vec![PointTag::default(); m.rows()],
    };
    let spec = PlotSpec {
        title: title.to_string(),
        ..PlotSpec::default()
    };
    if m.cols() == 2 {
        render_scatter(&m, &tags, &spec)
    } else {
        render_pair_grid(&m, &tags, &spec)
    }
    .map_err(err)
}

#[pymodule]
#[pyo3(name = "latentscope")]
fn py_latentscope(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("LatentscopeError", m.py().get_type::<LatentscopeError>())?;
    m.add_class::<Model>()?;
    m.add_class::<Tokenizer>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Reducer>()?;
    m.add_function(wrap_pyfunction!(capture, m)?)?;
    m.add_function(wrap_pyfunction!(pca_fit, m)?)?;
    m.add_function(wrap_pyfunction!(umap_fit, m)?)?;
    m.add_function(wrap_pyfunction!(render_points, m)?)?;
    Ok(())
}
