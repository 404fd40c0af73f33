//! Python module `jlw`: instances, exact decomposition, simulation and
//! verification. Rationals cross the boundary as fraction strings and
//! stations are numbered from 1.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyList;

use jlw_core::model::RawInstance;
use jlw_core::rational::{format_rational, parse_rational};
use jlw_core::verify::{run_experiment, Experiment, VerifyOptions};
use jlw_core::{
    bonded_components, brute_force_decompose, decompose, run, validate, ProcessKind, Rational,
    Routing, SimConfig,
};

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rational(obj: &Bound<'_, PyAny>) -> PyResult<Rational> {
    let text = obj.str()?.to_string();
    parse_rational(&text).map_err(value_error)
}

fn rationals(obj: &Bound<'_, PyAny>) -> PyResult<Vec<Rational>> {
    obj.try_iter()?.map(|x| rational(&x?)).collect()
}

fn from_json<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn raw_instance(
    stations: usize,
    neighbourhoods: &Bound<'_, PyAny>,
    service_rates: &Bound<'_, PyAny>,
    weights: Option<&Bound<'_, PyAny>>,
) -> PyResult<RawInstance> {
    let mut nbs = Vec::new();
    for item in neighbourhoods.try_iter()? {
        let item = item?;
        let members: Vec<usize> = item.get_item(0)?.extract()?;
        if members.contains(&0) {
            return Err(value_error("stations are numbered from 1"));
        }
        nbs.push((members.into_iter().map(|j| j - 1).collect(), rational(&item.get_item(1)?)?));
    }
    let service_rates = rationals(service_rates)?;
    let weights = match weights {
        Some(w) => rationals(w)?,
        None => vec![Rational::from_integer(1.into()); stations],
    };
    Ok(RawInstance {
        n_stations: stations,
        neighbourhoods: nbs,
        service_rates,
        weights,
    })
}

/// Validated supermarket model.
#[pyclass(module = "jlw", frozen)]
struct Instance {
    inner: jlw_core::Instance,
}

#[pymethods]
impl Instance {
    /// `neighbourhoods` is a list of `(members, rate)` pairs; rates may be
    /// ints, floats or strings such as `"3/10"`.
    #[new]
    #[pyo3(signature = (stations, neighbourhoods, service_rates, weights=None, allow_disconnected=false))]
    fn new(
        stations: usize,
        neighbourhoods: &Bound<'_, PyAny>,
        service_rates: &Bound<'_, PyAny>,
        weights: Option<&Bound<'_, PyAny>>,
        allow_disconnected: bool,
    ) -> PyResult<Self> {
        let raw = raw_instance(stations, neighbourhoods, service_rates, weights)?;
        let inner = if allow_disconnected {
            jlw_core::Instance::new_relaxed(raw)
        } else {
            jlw_core::Instance::new(raw)
        }
        .map_err(value_error)?;
        Ok(Instance { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Instance {
            inner: jlw_core::Instance::from_json(text).map_err(value_error)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn n_stations(&self) -> usize {
        self.inner.n_stations()
    }

    fn with_weights(&self, weights: &Bound<'_, PyAny>) -> PyResult<Self> {
        Ok(Instance {
            inner: self.inner.with_weights(rationals(weights)?).map_err(value_error)?,
        })
    }

    /// Clusters, exact values and a witness policy.
    #[pyo3(signature = (brute_force=false))]
    fn decompose(&self, brute_force: bool) -> PyResult<Decomposition> {
        let d = if brute_force {
            brute_force_decompose(&self.inner)
        } else {
            decompose(&self.inner)
        }
        .map_err(value_error)?;
        Ok(Decomposition {
            inner: d,
            instance: self.inner.clone(),
        })
    }

    fn __repr__(&self) -> String {
        format!("Instance(stations={}, neighbourhoods={})", self.inner.n_stations(), self.inner.neighbourhoods().len())
    }
}

#[pyclass(module = "jlw", frozen)]
struct Decomposition {
    inner: jlw_core::Decomposition,
    instance: jlw_core::Instance,
}

#[pymethods]
impl Decomposition {
    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn clusters(&self) -> Vec<Vec<usize>> {
        self.inner.clusters.iter().map(|c| c.one_based()).collect()
    }

    #[getter]
    fn values(&self) -> Vec<String> {
        self.inner.values.iter().map(format_rational).collect()
    }

    /// Routing probabilities, one row per neighbourhood.
    #[getter]
    fn witness(&self) -> Vec<Vec<String>> {
        self.inner
            .witness
            .rows()
            .iter()
            .map(|r| r.iter().map(format_rational).collect())
            .collect()
    }

    fn bonded_components(&self) -> PyResult<Vec<Vec<Vec<usize>>>> {
        let b = bonded_components(&self.instance, &self.inner).map_err(value_error)?;
        Ok(b.iter().map(|comps| comps.iter().map(|c| c.one_based()).collect()).collect())
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner.to_report(&self.instance)).expect("serializable")
    }

    fn __repr__(&self) -> String {
        let parts: Vec<String> = self
            .inner
            .clusters
            .iter()
            .zip(&self.inner.values)
            .map(|(c, v)| format!("{c}: {}", format_rational(v)))
            .collect();
        format!("Decomposition({})", parts.join(", "))
    }
}

/// Violations of a raw instance, as messages; empty when valid.
#[pyfunction]
#[pyo3(signature = (stations, neighbourhoods, service_rates, weights=None))]
fn check(
    stations: usize,
    neighbourhoods: &Bound<'_, PyAny>,
    service_rates: &Bound<'_, PyAny>,
    weights: Option<&Bound<'_, PyAny>>,
) -> PyResult<Vec<String>> {
    let raw = raw_instance(stations, neighbourhoods, service_rates, weights)?;
    Ok(validate(&raw).iter().map(|v| v.to_string()).collect())
}

/// Simulates the queue (`kind="queue"`) or walk (`kind="walk"`) under JLW
/// (`policy="jlw"`) or the witness policy (`policy="witness"`). Returns a
/// dict with `steps`, `times`, `states` and `counters`.
#[pyfunction]
#[pyo3(signature = (instance, horizon, seed=0, kind="queue", policy="jlw", cadence=None, initial_state=None))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    instance: &Instance,
    horizon: u64,
    seed: u64,
    kind: &str,
    policy: &str,
    cadence: Option<u64>,
    initial_state: Option<Vec<i64>>,
) -> PyResult<Bound<'py, PyAny>> {
    let kind = match kind {
        "queue" => ProcessKind::Queue,
        "walk" => ProcessKind::Walk,
        other => return Err(value_error(format!("unknown kind {other:?}"))),
    };
    let routing = match policy {
        "jlw" => Routing::Jlw,
        "witness" => Routing::Static(decompose(&instance.inner).map_err(value_error)?.witness),
        other => return Err(value_error(format!("unknown policy {other:?}"))),
    };
    let mut cfg = SimConfig::new(instance.inner.clone(), kind, routing, horizon, seed);
    cfg.cadence = cadence;
    if let Some(x) = initial_state {
        cfg.initial_state = x;
    }
    let t = run(&cfg).map_err(value_error)?;
    let out = pyo3::types::PyDict::new(py);
    out.set_item("steps", PyList::new(py, &t.steps)?)?;
    out.set_item("times", PyList::new(py, &t.times)?)?;
    out.set_item("states", t.states.clone())?;
    out.set_item("counters", from_json(py, &t.counters_json().to_string())?)?;
    Ok(out.into_any())
}

/// Runs one named experiment and returns its verdict as a dict.
#[pyfunction]
#[pyo3(signature = (instance, experiment, seed=0, horizon=None, replicas=None, epsilon=0.2, radius=5.0))]
#[allow(clippy::too_many_arguments)]
fn verify<'py>(
    py: Python<'py>,
    instance: &Instance,
    experiment: &str,
    seed: u64,
    horizon: Option<u64>,
    replicas: Option<usize>,
    epsilon: f64,
    radius: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let e: Experiment = experiment.parse().map_err(value_error)?;
    let options = VerifyOptions {
        seed,
        horizon,
        replicas,
        epsilon,
        radius,
        ..VerifyOptions::default()
    };
    let v = run_experiment(e, &instance.inner, &options).map_err(value_error)?;
    from_json(py, &serde_json::to_string(&v).expect("serializable"))
}

#[pymodule]
fn jlw(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Instance>()?;
    m.add_class::<Decomposition>()?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
