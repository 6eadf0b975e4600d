//! Python bindings for `lowfreq`.
//!
//! Images cross the boundary as flat `list[float]` in channel-major order
//! plus `(channels, side)`. Configs are plain dicts with the same keys as the
//! TOML sections; results come back as dicts.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use lowfreq::boundary::{run_boundary, BoundaryConfig};
use lowfreq::frequency::{self, NoiseDist};
use lowfreq::harness::batch::pick_target;
use lowfreq::harness::config::{parse_config, ModelSpec};
use lowfreq::harness::{self, synthetic_images, Experiment};
use lowfreq::hyperband::{run_hyperband, HyperbandConfig};
use lowfreq::nes::{run_nes, NesConfig};
use lowfreq::oracle::{AttackGoal, Classifier, DefenseTransform, Oracle, QueryBudget};
use lowfreq::trace::AttackTrace;
use lowfreq::whitebox::{lf_gradient_descent, CwConfig};
use lowfreq::{Error, FreqCoeffs, FreqRatio, ImageTensor, Shape};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Shape(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn image(data: Vec<f64>, channels: usize, side: usize) -> PyResult<ImageTensor> {
    ImageTensor::new(channels, side, data).map_err(py_err)
}

fn ratio(r: f64) -> PyResult<FreqRatio> {
    FreqRatio::new(r).map_err(py_err)
}

/// Deserializes an optional dict through JSON; `None` gives the default.
fn from_py<T: DeserializeOwned + Default>(py: Python<'_>, obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    let Some(obj) = obj else { return Ok(T::default()) };
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn trace_dict(trace: &AttackTrace) -> serde_json::Value {
    json!({
        "summary": trace.summary(),
        "mse": trace.rows.iter().map(|r| (r.cumulative_queries, r.mse)).collect::<Vec<_>>(),
        "adversarial": trace.final_image.as_slice(),
    })
}

/// Orthonormal 2-D DCT of every channel.
#[pyfunction]
fn dct2(data: Vec<f64>, channels: usize, side: usize) -> PyResult<Vec<f64>> {
    Ok(frequency::dct2(&image(data, channels, side)?).as_slice().to_vec())
}

/// Inverse of `dct2`.
#[pyfunction]
fn idct2(coeffs: Vec<f64>, channels: usize, side: usize) -> PyResult<Vec<f64>> {
    let shape = Shape::new(channels, side).map_err(py_err)?;
    let v = FreqCoeffs::new(shape, coeffs).map_err(py_err)?;
    Ok(frequency::idct2(&v).into_vec())
}

/// Side of the retained coefficient block for ratio `r`.
#[pyfunction]
fn cutoff(r: f64, side: usize) -> PyResult<usize> {
    Ok(ratio(r)?.cutoff(side))
}

/// Gaussian noise confined to the low-frequency block.
#[pyfunction]
#[pyo3(signature = (channels, side, r, seed, sigma = 1.0))]
fn sample_low_freq(channels: usize, side: usize, r: f64, seed: u64, sigma: f64) -> PyResult<Vec<f64>> {
    let shape = Shape::new(channels, side).map_err(py_err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(frequency::sample_low_freq(&mut rng, shape, ratio(r)?, NoiseDist::Gaussian { sigma }).into_vec())
}

/// Applies a defense such as `{"kind": "bit_depth", "bits": 3}`.
#[pyfunction]
fn apply_defense(
    py: Python<'_>,
    data: Vec<f64>,
    channels: usize,
    side: usize,
    defense: &Bound<'_, PyAny>,
) -> PyResult<Vec<f64>> {
    let d: DefenseTransform = from_py(py, Some(defense))?;
    Ok(d.apply(&image(data, channels, side)?).map_err(py_err)?.into_vec())
}

/// Runs a full experiment from TOML text and returns the report. Result
/// files are written under the config's `output_dir`.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, kind: &str, config_toml: &str) -> PyResult<Bound<'py, PyAny>> {
    let kind = match kind {
        "sphere-sweep" => Experiment::SphereSweep,
        "boundary" => Experiment::Boundary,
        "nes" => Experiment::Nes,
        "hyperband" => Experiment::Hyperband,
        "whitebox" => Experiment::Whitebox,
        "bench" => Experiment::Bench,
        other => return Err(PyValueError::new_err(format!("unknown experiment {other:?}"))),
    };
    let config = parse_config(config_toml).map_err(py_err)?;
    let report = py.detach(|| harness::run_experiment(kind, &config)).map_err(py_err)?;
    to_py(py, &report)
}

/// A trained toy model behind an optional defense.
#[pyclass(frozen)]
struct Target {
    inner: harness::Target,
}

#[pymethods]
impl Target {
    /// `model` takes the keys of the `[model]` section, e.g.
    /// `{"kind": "mlp2", "dataset": "gray28"}`.
    #[new]
    #[pyo3(signature = (model, defense = None))]
    fn new(py: Python<'_>, model: &Bound<'_, PyAny>, defense: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let text: String = py.import("json")?.call_method1("dumps", (model,))?.extract()?;
        let spec: ModelSpec = serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let defense: DefenseTransform = from_py(py, defense)?;
        let inner = py.detach(|| harness::Target::build(&spec, defense)).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.shape().channels
    }

    #[getter]
    fn side(&self) -> usize {
        self.inner.shape().side
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    /// Label after the defense.
    fn predict(&self, data: Vec<f64>) -> PyResult<usize> {
        self.inner.predict(&self.image(data)?).map_err(py_err)
    }

    /// Raw model logits, ignoring the defense.
    fn logits(&self, data: Vec<f64>) -> PyResult<Vec<f64>> {
        let model = self.inner.classifier().ok_or_else(|| PyValueError::new_err("remote model has no logits"))?;
        model.logits(&self.image(data)?).map_err(py_err)
    }

    /// Correctly classified synthetic images as `(pixels, label)` pairs.
    #[pyo3(signature = (count, seed = 1000))]
    fn images(&self, count: usize, seed: u64) -> PyResult<Vec<(Vec<f64>, usize)>> {
        let imgs = synthetic_images(&self.inner, count, seed).map_err(py_err)?;
        Ok(imgs.into_iter().map(|a| (a.image.into_vec(), a.label)).collect())
    }

    /// Untargeted boundary attack; `config` uses the `[boundary]` keys.
    #[pyo3(signature = (data, label, config = None, seed = 0))]
    fn boundary<'py>(
        &self,
        py: Python<'py>,
        data: Vec<f64>,
        label: usize,
        config: Option<&Bound<'_, PyAny>>,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let config: BoundaryConfig = from_py(py, config)?;
        let x = self.image(data)?;
        let trace = py
            .detach(|| {
                let mut oracle = self.inner.oracle(AttackGoal::Untargeted { label }, QueryBudget::new(config.max_queries))?;
                run_boundary(&config, oracle.as_mut(), &x, &mut ChaCha8Rng::seed_from_u64(seed))
            })
            .map_err(py_err)?;
        to_py(py, &trace_dict(&trace))
    }

    /// NES attack; `config` uses the `[nes]` keys. Targeted runs aim at
    /// `target`, or at a seed-derived class other than `label`.
    #[pyo3(signature = (data, label, config = None, target = None, seed = 0))]
    fn nes<'py>(
        &self,
        py: Python<'py>,
        data: Vec<f64>,
        label: usize,
        config: Option<&Bound<'_, PyAny>>,
        target: Option<usize>,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let config: NesConfig = from_py(py, config)?;
        let x = self.image(data)?;
        let goal = if config.targeted {
            AttackGoal::Targeted { target: target.unwrap_or_else(|| pick_target(label, self.inner.classes(), seed)) }
        } else {
            AttackGoal::Untargeted { label }
        };
        let trace = py
            .detach(|| {
                let mut oracle = self.inner.oracle(goal, QueryBudget::new(config.max_queries))?;
                run_nes(&config, oracle.as_mut(), &x, label, &mut ChaCha8Rng::seed_from_u64(seed))
            })
            .map_err(py_err)?;
        let mut out = trace_dict(&trace);
        out["target"] = json!(goal.is_targeted().then(|| goal.label()));
        to_py(py, &out)
    }

    /// Successive halving over low-frequency boundary attacks.
    #[pyo3(signature = (data, label, config = None, seed = 0))]
    fn hyperband<'py>(
        &self,
        py: Python<'py>,
        data: Vec<f64>,
        label: usize,
        config: Option<&Bound<'_, PyAny>>,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let config: HyperbandConfig = from_py(py, config)?;
        let x = self.image(data)?;
        let goal = AttackGoal::Untargeted { label };
        let result = py
            .detach(|| {
                run_hyperband(
                    &config,
                    |_, budget: &QueryBudget| Ok(self.inner.oracle(goal, budget.clone())? as Box<dyn Oracle>),
                    &x,
                    seed,
                )
            })
            .map_err(py_err)?;
        let mut out = trace_dict(result.winning_trace());
        out["winner_ratio"] = json!(result.arms[result.winner].ratio.value());
        out["schedule"] = json!(result.schedule);
        out["total_queries"] = json!(result.total_queries);
        to_py(py, &out)
    }

    /// White-box margin-loss attack; `config` uses the `[whitebox.attack]` keys.
    #[pyo3(signature = (data, label, config = None))]
    fn whitebox<'py>(
        &self,
        py: Python<'py>,
        data: Vec<f64>,
        label: usize,
        config: Option<&Bound<'_, PyAny>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let config: CwConfig = from_py(py, config)?;
        let model = self.inner.classifier().ok_or_else(|| PyValueError::new_err("white-box attack needs a local model"))?;
        let x = self.image(data)?;
        let res = py.detach(|| lf_gradient_descent(model.as_ref(), &x, label, &config)).map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("success", res.success)?;
        out.set_item("steps", res.steps)?;
        out.set_item("mse", res.mse)?;
        out.set_item("adversarial", res.adversarial.into_vec())?;
        Ok(out.into_any())
    }
}

impl Target {
    fn image(&self, data: Vec<f64>) -> PyResult<ImageTensor> {
        let s = self.inner.shape();
        image(data, s.channels, s.side)
    }
}

#[pymodule]
fn lowfreq_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(dct2, m)?)?;
    m.add_function(wrap_pyfunction!(idct2, m)?)?;
    m.add_function(wrap_pyfunction!(cutoff, m)?)?;
    m.add_function(wrap_pyfunction!(sample_low_freq, m)?)?;
    m.add_function(wrap_pyfunction!(apply_defense, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_class::<Target>()?;
    Ok(())
}
