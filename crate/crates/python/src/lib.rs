use std::path::PathBuf;

use prosody_mdn::checkpoint::Checkpoint;
use prosody_mdn::cloning::{self, ComponentIndexSeq};
use prosody_mdn::gmm::{self, DiagGmm, RawGmmParams};
use prosody_mdn::model::PredictorParams;
use prosody_mdn::predictor::{self, PhoneSeq};
use prosody_mdn::synthdata::{self, OracleSpec, Utterance};
use prosody_mdn::training::{self, GradCheckConfig, TrainConfig, TrainState};
use prosody_mdn::Error;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Numerical { .. } | Error::Diverged { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn flatten(rows: &[Vec<f64>]) -> PyResult<(Vec<f64>, usize)> {
    let dim = rows.first().map(Vec::len).unwrap_or(0);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(PyValueError::new_err("ragged component rows"));
    }
    Ok((rows.concat(), dim))
}

fn rows(flat: &[f64], dim: usize) -> Vec<Vec<f64>> {
    flat.chunks(dim).map(<[f64]>::to_vec).collect()
}

/// Diagonal Gaussian mixture.
#[pyclass(name = "Gmm", module = "prosody_mdn_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyGmm {
    inner: DiagGmm,
}

#[pymethods]
impl PyGmm {
    #[new]
    fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> PyResult<Self> {
        let (m, _) = flatten(&means)?;
        let (v, _) = flatten(&variances)?;
        Ok(Self {
            inner: DiagGmm::new(weights, m, v).map_err(to_py)?,
        })
    }

    /// Activates raw logits, means and log-variances.
    #[staticmethod]
    fn from_raw(alpha: Vec<f64>, means: Vec<Vec<f64>>, log_vars: Vec<Vec<f64>>) -> PyResult<Self> {
        let (m, _) = flatten(&means)?;
        let (v, _) = flatten(&log_vars)?;
        let raw = RawGmmParams::new(alpha, m, v).map_err(to_py)?;
        Ok(Self {
            inner: gmm::activate(&raw).map_err(to_py)?,
        })
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }

    #[getter]
    fn means(&self) -> Vec<Vec<f64>> {
        rows(self.inner.means(), self.inner.dim())
    }

    #[getter]
    fn variances(&self) -> Vec<Vec<f64>> {
        rows(self.inner.variances(), self.inner.dim())
    }

    fn log_density(&self, e: Vec<f64>) -> PyResult<f64> {
        gmm::log_density(&self.inner, &e).map_err(to_py)
    }

    fn posterior(&self, e: Vec<f64>) -> PyResult<Vec<f64>> {
        gmm::posterior(&self.inner, &e).map_err(to_py)
    }

    fn map_component(&self, e: Vec<f64>) -> PyResult<usize> {
        gmm::map_component(&self.inner, &e).map_err(to_py)
    }

    /// Returns `(embedding, component)`.
    fn sample(&self, seed: u64) -> (Vec<f64>, usize) {
        gmm::sample(&self.inner, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn __repr__(&self) -> String {
        format!("Gmm(components={}, dim={})", self.inner.components(), self.inner.dim())
    }
}

/// Negative log-likelihood of `e` and its gradient with respect to the raw
/// parameters, as `(loss, d_alpha, d_means, d_log_vars)`.
#[pyfunction]
fn nll_and_grad(
    alpha: Vec<f64>,
    means: Vec<Vec<f64>>,
    log_vars: Vec<Vec<f64>>,
    e: Vec<f64>,
) -> PyResult<(f64, Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let (m, dim) = flatten(&means)?;
    let (v, _) = flatten(&log_vars)?;
    let raw = RawGmmParams::new(alpha, m, v).map_err(to_py)?;
    let (loss, g) = gmm::nll_and_grad(&raw, &e).map_err(to_py)?;
    Ok((loss, g.alpha.clone(), rows(&g.means, dim), rows(&g.log_vars, dim)))
}

/// Oracle corpus.
#[pyclass(name = "Corpus", module = "prosody_mdn_py", frozen)]
struct PyCorpus {
    inner: synthdata::Corpus,
}

fn utterance_dict<'py>(py: Python<'py>, u: &Utterance) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let d = pyo3::types::PyDict::new(py);
    d.set_item("phones", u.phones.clone())?;
    d.set_item("speaker", u.speaker)?;
    d.set_item("embeddings", u.embeddings.clone())?;
    d.set_item("latent_components", u.latent_components.clone())?;
    Ok(d)
}

#[pymethods]
impl PyCorpus {
    /// Generates a corpus from a JSON oracle specification.
    #[staticmethod]
    fn generate(spec_json: &str) -> PyResult<Self> {
        let spec: OracleSpec = serde_json::from_str(spec_json).map_err(json_err)?;
        Ok(Self {
            inner: synthdata::gen_corpus(&spec).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: synthdata::Corpus::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        prosody_mdn::fsutil::write_atomic(&path, &self.inner.to_jsonl_bytes()).map_err(to_py)
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    #[getter]
    fn spec_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.spec).map_err(json_err)
    }

    fn __len__(&self) -> usize {
        self.inner.train.len() + self.inner.test.len()
    }

    fn split_len(&self, split: &str) -> PyResult<usize> {
        Ok(self.split(split)?.len())
    }

    fn utterance<'py>(
        &self,
        py: Python<'py>,
        split: &str,
        index: usize,
    ) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        let set = self.split(split)?;
        let u = set
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("no utterance {index} in {split}")))?;
        utterance_dict(py, u)
    }

    /// Mean oracle log-likelihood per phone of a split.
    fn oracle_loglik(&self, split: &str) -> PyResult<f64> {
        let oracle = self.inner.oracle().map_err(to_py)?;
        synthdata::oracle_mean_loglik(&oracle, self.split(split)?).map_err(to_py)
    }
}

impl PyCorpus {
    fn split(&self, split: &str) -> PyResult<&[Utterance]> {
        match split {
            "train" => Ok(&self.inner.train),
            "test" => Ok(&self.inner.test),
            other => Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        }
    }
}

/// JSON for the desk oracle specification.
#[pyfunction]
#[pyo3(signature = (seed, two_speaker = false))]
fn desk_spec(seed: u64, two_speaker: bool) -> PyResult<String> {
    let spec = if two_speaker {
        OracleSpec::desk_two_speaker(seed)
    } else {
        OracleSpec::desk_single_speaker(seed)
    };
    serde_json::to_string(&spec).map_err(json_err)
}

/// JSON for the desk training configuration.
#[pyfunction]
#[pyo3(signature = (components, seed, multi_speaker = false))]
fn desk_train_config(components: usize, seed: u64, multi_speaker: bool) -> PyResult<String> {
    serde_json::to_string(&TrainConfig::desk(components, multi_speaker, seed)).map_err(json_err)
}

/// Trained or freshly initialised predictor.
#[pyclass(name = "Model", module = "prosody_mdn_py")]
struct PyModel {
    params: PredictorParams,
    state: Option<TrainState>,
}

fn speaker_opt(model: &PyModel, speaker: Option<usize>) -> Option<usize> {
    match &model.state {
        Some(s) if !s.config.multi_speaker => None,
        _ => speaker,
    }
}

#[pymethods]
impl PyModel {
    /// Trains on `corpus` with a JSON training configuration.
    #[staticmethod]
    fn train(py: Python<'_>, corpus: &PyCorpus, config_json: &str) -> PyResult<Self> {
        let cfg: TrainConfig = serde_json::from_str(config_json).map_err(json_err)?;
        let state = py
            .detach(|| training::train(&corpus.inner, &cfg))
            .map_err(to_py)?;
        Ok(Self {
            params: state.params.clone(),
            state: Some(state),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(match Checkpoint::load(&path).map_err(to_py)? {
            Checkpoint::Model(params) => Self { params, state: None },
            Checkpoint::Training(s) => Self {
                params: s.params.clone(),
                state: Some(*s),
            },
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ck = match &self.state {
            Some(s) => Checkpoint::Training(Box::new(s.clone())),
            None => Checkpoint::Model(self.params.clone()),
        };
        ck.save(&path).map_err(to_py)
    }

    #[getter]
    fn components(&self) -> usize {
        self.params.config.components
    }

    #[getter]
    fn dim(&self) -> usize {
        self.params.config.dim
    }

    /// `(epoch, train_nll, test_nll, lr)` rows of the training run.
    #[getter]
    fn history(&self) -> Vec<(usize, f64, f64, f64)> {
        self.state
            .iter()
            .flat_map(|s| s.history.rows.iter())
            .map(|r| (r.epoch, r.train_nll, r.test_nll, r.lr))
            .collect()
    }

    /// Teacher-forced mixtures for a phone sequence.
    #[pyo3(signature = (phones, embeddings, speaker = None))]
    fn predict(&self, phones: Vec<usize>, embeddings: Vec<Vec<f64>>, speaker: Option<usize>) -> PyResult<Vec<PyGmm>> {
        let gmms = predictor::predict_gmm_sequence(
            &PhoneSeq(phones),
            speaker_opt(self, speaker),
            &embeddings,
            &self.params,
        )
        .map_err(to_py)?;
        Ok(gmms.into_iter().map(|inner| PyGmm { inner }).collect())
    }

    /// Sequence NLL summed over phones.
    #[pyo3(signature = (phones, embeddings, speaker = None))]
    fn nll(&self, phones: Vec<usize>, embeddings: Vec<Vec<f64>>, speaker: Option<usize>) -> PyResult<f64> {
        predictor::sequence_nll(
            &PhoneSeq(phones),
            speaker_opt(self, speaker),
            &embeddings,
            &self.params,
        )
        .map(|(l, _)| l)
        .map_err(to_py)
    }

    /// Returns `(embeddings, components)`.
    #[pyo3(signature = (phones, seed, speaker = None))]
    fn sample(&self, phones: Vec<usize>, seed: u64, speaker: Option<usize>) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        predictor::sample_sequence(&PhoneSeq(phones), speaker_opt(self, speaker), &self.params, &mut rng)
            .map_err(to_py)
    }

    fn identify(&self, phones: Vec<usize>, speaker: usize, embeddings: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        cloning::identify(&PhoneSeq(phones), speaker, &embeddings, &self.params)
            .map(|i| i.0)
            .map_err(to_py)
    }

    fn clone_prosody(&self, phones: Vec<usize>, target: usize, indices: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        cloning::clone_prosody(&PhoneSeq(phones), target, &ComponentIndexSeq(indices), &self.params)
            .map_err(to_py)
    }

    /// Identify then clone; returns `(indices, embeddings)`.
    fn clone(
        &self,
        phones: Vec<usize>,
        source: usize,
        embeddings: Vec<Vec<f64>>,
        target: usize,
    ) -> PyResult<(Vec<usize>, Vec<Vec<f64>>)> {
        cloning::clone_pipeline(&PhoneSeq(phones), source, &embeddings, target, &self.params)
            .map(|(i, e)| (i.0, e))
            .map_err(to_py)
    }
}

/// Gradient check on random data; returns `(passed, max_rel_error)`.
#[pyfunction]
#[pyo3(signature = (seed, config_json = None))]
fn grad_check(seed: u64, config_json: Option<&str>) -> PyResult<(bool, f64)> {
    let cfg: GradCheckConfig = match config_json {
        Some(s) => serde_json::from_str(s).map_err(json_err)?,
        None => GradCheckConfig::default(),
    };
    let report = cfg.run(seed).map_err(to_py)?;
    Ok((report.passed, report.max_rel_error()))
}

#[pymodule]
fn prosody_mdn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGmm>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(nll_and_grad, m)?)?;
    m.add_function(wrap_pyfunction!(desk_spec, m)?)?;
    m.add_function(wrap_pyfunction!(desk_train_config, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}
