//! Python bindings for the `fdvae` crate.
//!
//! Built with maturin, the extension is importable as `fdvae`. Structured
//! results (reports, logs, corpora) are returned as plain Python objects.

use std::path::PathBuf;

use fdvae::cli::{load_data, train_run, RunConfig};
use fdvae::corpus::{generate_synthetic, SyntheticSpec, Vocabulary};
use fdvae::metrics::{self, EvalConfig};
use fdvae::model::{GaussianPosterior, ModelConfig, VaeModel};
use fdvae::nn::sample_mask_pair;
use fdvae::objectives::kl_diag_gaussian;
use fdvae::{checkpoint, selfcheck, Error};
use pyo3::exceptions::{PyIndexError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

fn err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Io { .. } => PyOSError::new_err(msg),
        Error::Index { .. } => PyIndexError::new_err(msg),
        Error::Config { .. }
        | Error::Input(_)
        | Error::Dimension { .. }
        | Error::Format { .. }
        | Error::VocabMismatch { .. } => PyValueError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_json<T: serde::de::DeserializeOwned>(text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyclass(name = "Vocabulary", module = "fdvae")]
pub struct PyVocabulary {
    inner: Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyVocabulary {
            inner: Vocabulary::load(&path).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn encode(&self, words: Vec<String>) -> Vec<usize> {
        self.inner.encode(&words)
    }

    fn decode(&self, ids: Vec<usize>) -> Vec<String> {
        self.inner.decode(&ids)
    }

    fn tokens(&self) -> Vec<String> {
        self.inner.tokens().to_vec()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }
}

#[pyclass(name = "Model", module = "fdvae")]
pub struct PyModel {
    inner: VaeModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (vocab_size, embed_dim=64, hidden_dim=128, latent_dim=32, init_scale=0.1, seed=0))]
    fn new(
        vocab_size: usize,
        embed_dim: usize,
        hidden_dim: usize,
        latent_dim: usize,
        init_scale: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            vocab_size,
            embed_dim,
            hidden_dim,
            latent_dim,
            init_scale,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(PyModel {
            inner: VaeModel::new(config, &mut rng).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = checkpoint::load(&path).map_err(err)?;
        Ok(PyModel { inner })
    }

    #[pyo3(signature = (path, vocab_hash=String::new()))]
    fn save(&self, path: PathBuf, vocab_hash: String) -> PyResult<()> {
        checkpoint::save(&path, &self.inner, &vocab_hash, serde_json::Value::Null).map_err(err)
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn num_parameters(&self) -> usize {
        self.inner.params.num_scalars()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params.iter().map(|p| p.name.clone()).collect()
    }

    /// `(shape, flat row-major values)` of one parameter.
    fn parameter(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let id = self
            .inner
            .params
            .find(name)
            .ok_or_else(|| PyValueError::new_err(format!("no parameter named {name}")))?;
        let t = self.inner.params.value(id);
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }

    /// Posterior `(mu, logvar)` of a sentence of token ids.
    fn encode(&self, tokens: Vec<usize>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let post = self.inner.encode(&tokens).map_err(err)?;
        Ok((post.mu, post.logvar))
    }

    fn log_likelihood(&self, z: Vec<f64>, tokens: Vec<usize>) -> PyResult<f64> {
        Ok(self
            .inner
            .decode_teacher_forced(&z, &tokens, None)
            .map_err(err)?
            .log_lik)
    }

    #[pyo3(signature = (z, max_len=30))]
    fn decode_greedy(&self, z: Vec<f64>, max_len: usize) -> PyResult<Vec<usize>> {
        self.inner.decode_greedy(&z, max_len).map_err(err)
    }

    fn reset_decoder(&mut self, seed: u64) -> PyResult<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.inner.reset_decoder(&mut rng).map_err(err)
    }

    /// Metric report on a list of token-id sentences.
    #[pyo3(signature = (sentences, seed=0, eval_config=None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        sentences: Vec<Vec<usize>>,
        seed: u64,
        eval_config: Option<&str>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let cfg: EvalConfig = match eval_config {
            Some(text) => from_json(text)?,
            None => EvalConfig::default(),
        };
        let report = py
            .detach(|| metrics::evaluate(&self.inner, &sentences, &cfg, seed))
            .map_err(err)?;
        to_py(py, &report)
    }
}

/// Closed-form KL to the standard normal: `(total, per_dim)`.
#[pyfunction]
fn kl_divergence(mu: Vec<f64>, logvar: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
    if mu.len() != logvar.len() {
        return Err(PyValueError::new_err("mu and logvar lengths differ"));
    }
    let kl = kl_diag_gaussian(&GaussianPosterior { mu, logvar });
    Ok((kl.total, kl.per_dim))
}

#[pyfunction]
fn bleu(reference: Vec<String>, hypothesis: Vec<String>) -> PyResult<f64> {
    metrics::bleu(&reference, &hypothesis).map_err(err)
}

#[pyfunction]
fn corpus_bleu<'py>(
    py: Python<'py>,
    references: Vec<Vec<String>>,
    hypotheses: Vec<Vec<String>>,
) -> PyResult<Bound<'py, PyAny>> {
    if references.len() != hypotheses.len() {
        return Err(PyValueError::new_err("references and hypotheses lengths differ"));
    }
    let pairs: Vec<(Vec<String>, Vec<String>)> = references.into_iter().zip(hypotheses).collect();
    to_py(py, &metrics::corpus_bleu(&pairs).map_err(err)?)
}

fn posteriors(mus: Vec<Vec<f64>>, logvars: Option<Vec<Vec<f64>>>) -> PyResult<Vec<GaussianPosterior>> {
    let logvars = logvars.unwrap_or_else(|| mus.iter().map(|m| vec![0.0; m.len()]).collect());
    if logvars.len() != mus.len() {
        return Err(PyValueError::new_err("mus and logvars lengths differ"));
    }
    Ok(mus
        .into_iter()
        .zip(logvars)
        .map(|(mu, logvar)| GaussianPosterior { mu, logvar })
        .collect())
}

/// `(count, per-dimension variances)` of posterior means.
#[pyfunction]
#[pyo3(signature = (mus, threshold=0.01))]
fn active_units(mus: Vec<Vec<f64>>, threshold: f64) -> PyResult<(usize, Vec<f64>)> {
    let au = metrics::active_units(&posteriors(mus, None)?, threshold).map_err(err)?;
    Ok((au.count, au.variances))
}

#[pyfunction]
#[pyo3(signature = (mus, logvars, n_samples=10, seed=0))]
fn mutual_information(mus: Vec<Vec<f64>>, logvars: Vec<Vec<f64>>, n_samples: usize, seed: u64) -> PyResult<f64> {
    let posts = posteriors(mus, Some(logvars))?;
    Ok(metrics::mutual_information(&posts, n_samples, None, seed)
        .map_err(err)?
        .value)
}

/// Complementary keep masks `(d, 1 - d)` for a sentence of `n` words.
#[pyfunction]
fn sample_masks(n: usize, keep_prob: f64, seed: u64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pair = sample_mask_pair(n, keep_prob, &mut rng).map_err(err)?;
    Ok((pair.mask(), pair.complement()))
}

/// Generates the template-grammar corpus. `spec` is a JSON object with any
/// of the generator's fields; returns `(vocabulary, {"train", "dev", "test"})`.
#[pyfunction]
#[pyo3(signature = (spec=None))]
fn synthetic_corpus<'py>(py: Python<'py>, spec: Option<&str>) -> PyResult<(PyVocabulary, Bound<'py, PyAny>)> {
    let spec: SyntheticSpec = match spec {
        Some(text) => from_json(text)?,
        None => SyntheticSpec::default(),
    };
    let c = generate_synthetic(&spec).map_err(err)?;
    let splits = serde_json::json!({
        "train": c.split.train,
        "dev": c.split.dev,
        "test": c.split.test,
    });
    Ok((PyVocabulary { inner: c.vocab }, to_py(py, &splits)?))
}

/// Trains from a TOML configuration and writes the run's artifacts to
/// `out_dir`; returns the per-epoch log.
#[pyfunction]
#[pyo3(signature = (out_dir, config_toml=""))]
fn train<'py>(py: Python<'py>, out_dir: PathBuf, config_toml: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg = RunConfig::from_toml(config_toml).map_err(err)?;
    cfg.validate().map_err(err)?;
    let outcome = py
        .detach(|| {
            let data = load_data(&cfg.corpus)?;
            train_run(&cfg, &data, &out_dir, "train")
        })
        .map_err(err)?;
    to_py(py, &outcome.log)
}

/// Runs the built-in self-checks; returns `(passed, checks)`.
#[pyfunction]
fn self_check<'py>(py: Python<'py>) -> PyResult<(bool, Bound<'py, PyAny>)> {
    let report = py.detach(|| selfcheck::run(None)).map_err(err)?;
    Ok((report.passed(), to_py(py, &report.checks)?))
}

#[pymodule]
#[pyo3(name = "fdvae")]
pub fn fdvae_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(active_units, m)?)?;
    m.add_function(wrap_pyfunction!(mutual_information, m)?)?;
    m.add_function(wrap_pyfunction!(sample_masks, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(self_check, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
