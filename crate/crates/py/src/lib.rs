use augsearch::augment::{apply_op, op_by_name, Image, DEFAULT_OPS};
use augsearch::bilevel::{accuracy, run_search, train_classifier, SearchConfig, TrainConfig, TOY_OPS};
use augsearch::data::{load_dataset, reduce_and_split, synth_rotor, Dataset};
use augsearch::distributions::{sample_relaxed_bernoulli, sample_relaxed_categorical, BernoulliParams, CategoricalParams};
use augsearch::estimators::{bias_table as core_bias_table, EstimatorKind, ToyProblem};
use augsearch::policy::{FixedPolicy, PairingMode, PolicyFile, Relaxation};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type SubPolicyRow = (usize, f64, Vec<(String, f64, f64)>);
type BiasRowTuple = (String, String, f64, f64, f64, f64);

fn err(e: augsearch::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Labelled images with pixels in [0, 1].
#[pyclass(name = "Dataset", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Synthetic two-class grating images.
    #[staticmethod]
    #[pyo3(signature = (n, size = 16, seed = 0))]
    fn synth_rotor(n: usize, size: usize, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: synth_rotor(n, size, seed).map_err(err)? })
    }

    /// Loads an IDX directory or CSV file; returns `(train, test or None)`.
    #[staticmethod]
    fn load(path: &str) -> PyResult<(Self, Option<Self>)> {
        let b = load_dataset(std::path::Path::new(path)).map_err(err)?;
        Ok((Self { inner: b.train }, b.test.map(|t| Self { inner: t })))
    }

    /// Stratified subsample of `n_reduced` images split into two halves.
    fn split(&self, n_reduced: usize, seed: u64) -> PyResult<(Self, Self)> {
        let (a, b) = reduce_and_split(&self.inner, n_reduced, seed).map_err(err)?;
        Ok((Self { inner: a }, Self { inner: b }))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.inner.class_count
    }

    /// `(height, width, channels)` of the first image.
    #[getter]
    fn shape(&self) -> Option<(usize, usize, usize)> {
        self.inner.images.first().map(|i| (i.height, i.width, i.channels))
    }

    /// Pixels of image `i`, channel-last and row-major.
    fn image(&self, i: usize) -> PyResult<Vec<f64>> {
        self.inner
            .images
            .get(i)
            .map(|im| im.pixels.clone())
            .ok_or_else(|| PyValueError::new_err(format!("index {i} out of range")))
    }

    fn __repr__(&self) -> String {
        format!("Dataset(name={:?}, len={}, classes={})", self.inner.name, self.inner.len(), self.inner.class_count)
    }
}

/// Ranked sub-policies with per-op apply probability and magnitude.
#[pyclass(name = "Policy", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPolicy {
    inner: PolicyFile,
}

#[pymethods]
impl PyPolicy {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: PolicyFile::from_json(text).map_err(err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    /// `[(rank, pi, [(op, prob, magnitude), ...]), ...]`
    #[getter]
    fn subpolicies(&self) -> Vec<SubPolicyRow> {
        self.inner
            .subpolicies
            .iter()
            .map(|s| (s.rank, s.pi, s.ops.iter().map(|o| (o.name.clone(), o.prob, o.magnitude)).collect()))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.subpolicies.len()
    }
}

#[pyfunction]
fn op_names() -> Vec<&'static str> {
    DEFAULT_OPS.iter().map(|o| o.name()).collect()
}

#[pyfunction]
fn toy_ops() -> Vec<&'static str> {
    TOY_OPS.iter().map(|o| o.name()).collect()
}

/// Applies one op at magnitude `m` in [0, 1] to a channel-last image.
#[pyfunction]
#[pyo3(signature = (name, pixels, height, width, channels = 1, magnitude = 0.5, seed = 0))]
fn augment(
    name: &str,
    pixels: Vec<f64>,
    height: usize,
    width: usize,
    channels: usize,
    magnitude: f64,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let op = op_by_name(name).map_err(err)?;
    let img = Image::new(height, width, channels, pixels).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(apply_op(&op, &img, magnitude, &mut rng).map_err(err)?.pixels)
}

/// One relaxed categorical draw: `(z, hard, z_tilde)`.
#[pyfunction]
#[pyo3(signature = (alpha, tau = 0.5, seed = 0))]
fn relaxed_categorical(alpha: Vec<f64>, tau: f64, seed: u64) -> PyResult<(Vec<f64>, usize, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = sample_relaxed_categorical(&CategoricalParams::new(alpha), tau, &mut rng).map_err(err)?;
    Ok((s.z, s.hard, s.z_tilde))
}

/// One relaxed Bernoulli draw: `(z, bit, z_tilde)`.
#[pyfunction]
#[pyo3(signature = (beta, lam = 0.5, seed = 0))]
fn relaxed_bernoulli(beta: f64, lam: f64, seed: u64) -> PyResult<(f64, usize, f64)> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(PyValueError::new_err("beta must lie in (0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = sample_relaxed_bernoulli(BernoulliParams::from_prob(beta), lam, &mut rng);
    Ok((s.z[0], s.hard, s.z_tilde[0]))
}

/// Searches a policy; returns `(policy, skipped_steps)`.
#[pyfunction]
#[pyo3(signature = (train, val, estimator = "relax", epochs = 20, batch_size = 128, seed = 0, ops = None, k = 2, top_n = 5))]
#[allow(clippy::too_many_arguments)]
fn search(
    py: Python<'_>,
    train: &PyDataset,
    val: &PyDataset,
    estimator: &str,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    ops: Option<Vec<String>>,
    k: usize,
    top_n: usize,
) -> PyResult<(PyPolicy, usize)> {
    let estimator: EstimatorKind = estimator.parse().map_err(err)?;
    let defaults = SearchConfig::default();
    let cfg = SearchConfig {
        estimator,
        epochs,
        batch_size,
        seed,
        ops: ops.unwrap_or(defaults.ops),
        k,
        top_n,
        ..SearchConfig::default()
    };
    let (tr, va) = (&train.inner, &val.inner);
    let res = py.detach(|| run_search(&cfg, tr, va)).map_err(err)?;
    Ok((PyPolicy { inner: res.policy }, res.skipped_steps))
}

/// Trains a fresh classifier under `policy` (or none) and returns test accuracy.
#[pyfunction]
#[pyo3(signature = (train, test, policy = None, epochs = 60, seed = 0))]
fn evaluate(py: Python<'_>, train: &PyDataset, test: &PyDataset, policy: Option<&PyPolicy>, epochs: usize, seed: u64) -> PyResult<f64> {
    let fixed = match policy {
        Some(p) => FixedPolicy::from_file(&p.inner).map_err(err)?,
        None => FixedPolicy::identity(),
    };
    let cfg = TrainConfig { epochs, seed, ..TrainConfig::default() };
    let (tr, te) = (&train.inner, &test.inner);
    py.detach(|| {
        let (model, _) = train_classifier(tr, &fixed, &cfg)?;
        accuracy(&model, te)
    })
    .map_err(err)
}

/// Monte Carlo bias of each estimator against the exact gradient:
/// `[(estimator, parameter, mc_mean, exact, std_err, bias_sigma), ...]`.
#[pyfunction]
#[pyo3(signature = (toy = "bernoulli", samples = 100_000, seed = 0, tau = 0.5, beta = 0.5))]
fn bias_table(toy: &str, samples: usize, seed: u64, tau: f64, beta: f64) -> PyResult<Vec<BiasRowTuple>> {
    let problem = match toy {
        "bernoulli" => ToyProblem::bernoulli(beta),
        "table" => ToyProblem::random_table(&DEFAULT_OPS[..3], 2, PairingMode::Unordered, seed),
        other => return Err(PyValueError::new_err(format!("unknown toy `{other}`"))),
    }
    .map_err(err)?;
    let kinds = [EstimatorKind::Score, EstimatorKind::Relax, EstimatorKind::GumbelSt];
    let rows = core_bias_table(&problem, &kinds, Relaxation::uniform(tau), samples, seed).map_err(err)?;
    Ok(rows
        .into_iter()
        .map(|r| (r.estimator, r.parameter, r.mc_mean, r.exact, r.std_err, r.bias_sigma))
        .collect())
}

#[pymodule]
fn augsearch_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(op_names, m)?)?;
    m.add_function(wrap_pyfunction!(toy_ops, m)?)?;
    m.add_function(wrap_pyfunction!(augment, m)?)?;
    m.add_function(wrap_pyfunction!(relaxed_categorical, m)?)?;
    m.add_function(wrap_pyfunction!(relaxed_bernoulli, m)?)?;
    m.add_function(wrap_pyfunction!(search, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(bias_table, m)?)?;
    Ok(())
}
