//! Python bindings: corpus ingestion and retrieval, scripted generation,
//! one-call question answering, and the answer metrics.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ragtree::engine::Engine;
use ragtree::eval;
use ragtree::llm::{self, MockLlm};
use ragtree::retrieval::{Corpus, Retriever};
use ragtree::EngineConfig;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Engine knobs, validated on construction. Omitted keywords keep their
/// defaults.
#[pyclass(name = "EngineConfig")]
struct PyEngineConfig {
    inner: EngineConfig,
}

#[pymethods]
impl PyEngineConfig {
    #[new]
    #[pyo3(signature = (*, max_branching=None, max_depth=None, tau_a=None, top_k=None, retrieval_cap=None, max_tokens=None, prompt_set=None, parallelism=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        max_branching: Option<usize>,
        max_depth: Option<usize>,
        tau_a: Option<f64>,
        top_k: Option<usize>,
        retrieval_cap: Option<u32>,
        max_tokens: Option<u32>,
        prompt_set: Option<String>,
        parallelism: Option<usize>,
    ) -> PyResult<Self> {
        let mut inner = EngineConfig::default();
        if let Some(v) = max_branching {
            inner.max_branching = v;
        }
        if let Some(v) = max_depth {
            inner.max_depth = v;
        }
        if let Some(v) = tau_a {
            inner.tau_a = v;
        }
        if let Some(v) = top_k {
            inner.top_k = v;
        }
        if let Some(v) = retrieval_cap {
            inner.retrieval_cap = v;
        }
        if let Some(v) = max_tokens {
            inner.max_tokens = v;
        }
        if let Some(v) = prompt_set {
            inner.prompt_set = v;
        }
        if let Some(v) = parallelism {
            inner.parallelism = v;
        }
        inner.validate().map_err(value_err)?;
        Ok(PyEngineConfig { inner })
    }

    #[getter]
    fn max_branching(&self) -> usize {
        self.inner.max_branching
    }

    #[getter]
    fn max_depth(&self) -> usize {
        self.inner.max_depth
    }

    #[getter]
    fn tau_a(&self) -> f64 {
        self.inner.tau_a
    }

    #[getter]
    fn top_k(&self) -> usize {
        self.inner.top_k
    }

    #[getter]
    fn retrieval_cap(&self) -> u32 {
        self.inner.retrieval_cap
    }

    #[getter]
    fn max_tokens(&self) -> u32 {
        self.inner.max_tokens
    }

    #[getter]
    fn prompt_set(&self) -> String {
        self.inner.prompt_set.clone()
    }

    #[getter]
    fn parallelism(&self) -> usize {
        self.inner.parallelism
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "EngineConfig(max_branching={}, max_depth={}, tau_a={}, top_k={}, retrieval_cap={}, max_tokens={}, prompt_set={:?}, parallelism={})",
            c.max_branching,
            c.max_depth,
            c.tau_a,
            c.top_k,
            c.retrieval_cap,
            c.max_tokens,
            c.prompt_set,
            c.parallelism,
        )
    }
}

/// In-memory BM25 index over a JSONL corpus.
#[pyclass(name = "Corpus")]
struct PyCorpus {
    inner: Corpus,
}

#[pymethods]
impl PyCorpus {
    /// Loads one document object per line; blank lines are skipped.
    #[staticmethod]
    fn ingest(path: &str) -> PyResult<Self> {
        Ok(PyCorpus {
            inner: Corpus::ingest(path).map_err(runtime_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Number of distinct index terms.
    fn term_count(&self) -> usize {
        self.inner.term_count()
    }

    /// Top `k` hits as `(id, score)` pairs, best first.
    fn retrieve(&self, query: &str, k: usize) -> PyResult<Vec<(String, f64)>> {
        let hits = self.inner.retrieve(query, k).map_err(value_err)?;
        Ok(hits.into_iter().map(|h| (h.id, h.score)).collect())
    }

    /// Entity-anchored retrieval: per-document maximum over one query per
    /// entity, still `(id, score)` pairs.
    fn retrieve_entities(&self, entities: Vec<String>, k: usize) -> PyResult<Vec<(String, f64)>> {
        let hits = self
            .inner
            .retrieve_entities(&entities, k)
            .map_err(value_err)?;
        Ok(hits.into_iter().map(|h| (h.id, h.score)).collect())
    }

    /// Looks up one passage as `(id, title, text)`, or `None`.
    fn doc(&self, id: &str) -> Option<(String, String, String)> {
        self.inner.document(id).map(|d| (d.id, d.title, d.text))
    }
}

/// Scripted generation backend for reproducible runs.
#[pyclass(name = "MockLlm")]
struct PyMockLlm {
    inner: MockLlm,
}

#[pymethods]
impl PyMockLlm {
    /// Loads a JSON rule script from a file.
    #[staticmethod]
    fn from_script(path: &str) -> PyResult<Self> {
        Ok(PyMockLlm {
            inner: MockLlm::from_script_file(path).map_err(value_err)?,
        })
    }

    /// Parses a JSON rule script from a string.
    #[staticmethod]
    fn from_script_str(text: &str) -> PyResult<Self> {
        Ok(PyMockLlm {
            inner: MockLlm::from_script_str(text).map_err(value_err)?,
        })
    }

    /// Appends a substring-match rule; earlier rules win.
    fn add_rule(&mut self, contains: Vec<String>, text: &str, logprobs: Vec<f64>) -> PyResult<()> {
        let needles: Vec<&str> = contains.iter().map(String::as_str).collect();
        self.inner
            .add_rule(&needles, text, &logprobs)
            .map_err(value_err)
    }

    fn call_count(&self) -> usize {
        self.inner.call_count()
    }

    /// Whitespace-normalized prompts in call order.
    fn calls(&self) -> Vec<String> {
        self.inner.calls()
    }
}

/// Answers one question and returns `(final_answer, tree_json)`.
#[pyfunction]
fn run(
    py: Python<'_>,
    question: &str,
    config: PyRef<'_, PyEngineConfig>,
    llm: PyRef<'_, PyMockLlm>,
    corpus: PyRef<'_, PyCorpus>,
) -> PyResult<(String, String)> {
    let cfg = config.inner.clone();
    let model: &MockLlm = &llm.inner;
    let store: &Corpus = &corpus.inner;
    let tree = py
        .detach(|| Engine::new(cfg, model, store)?.run(question))
        .map_err(runtime_err)?;
    Ok((tree.final_answer.clone(), tree.to_json()))
}

/// exp(mean token logprob); raises ValueError on an empty vector.
#[pyfunction]
fn confidence(logprobs: Vec<f64>) -> PyResult<f64> {
    llm::confidence_from_logprobs(&logprobs).map_err(value_err)
}

/// Normalized equality against any gold answer.
#[pyfunction]
fn exact_match(predicted: &str, golds: Vec<String>) -> bool {
    eval::exact_match(predicted, &golds)
}

/// Bag-of-tokens F1 against the best gold answer.
#[pyfunction]
fn f1(predicted: &str, golds: Vec<String>) -> f64 {
    eval::f1(predicted, &golds)
}

/// Lowercases, strips punctuation and articles, collapses whitespace.
#[pyfunction]
fn normalize_answer(answer: &str) -> String {
    eval::normalize_answer(answer)
}

/// Mean recall-percent per retrieval call over `(recall, calls)` pairs.
#[pyfunction]
fn retrieval_efficiency(pairs: Vec<(f64, f64)>) -> Option<f64> {
    eval::retrieval_efficiency(&pairs)
}

#[pymodule]
fn ragtree_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEngineConfig>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyMockLlm>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(confidence, m)?)?;
    m.add_function(wrap_pyfunction!(exact_match, m)?)?;
    m.add_function(wrap_pyfunction!(f1, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_answer, m)?)?;
    m.add_function(wrap_pyfunction!(retrieval_efficiency, m)?)?;
    Ok(())
}
