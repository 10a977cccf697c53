//! Python bindings. Structured results come back as plain dicts and lists.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use busguard_core::alarmdesk::AlarmState;
use busguard_core::bench::{monitor_config, run_suite, scenarios, SCENARIO_FILES};
use busguard_core::capture::{load_trace, MemorySink};
use busguard_core::detectors::{score_isolated, IsolatedVerdict};
use busguard_core::eval::{evaluate, evaluate_files};
use busguard_core::simbot::{parse_kinds, Scenario};
use busguard_core::system::{MonitorConfig, System};

fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn monitor(yaml: Option<&str>) -> PyResult<MonitorConfig> {
    match yaml {
        None => Ok(monitor_config()),
        Some(y) => MonitorConfig::from_yaml(y).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

/// A scenario from YAML text or the name of a shipped benchmark path.
fn scenario(spec: &str, inject: Option<&str>, seed: Option<u64>) -> PyResult<Scenario> {
    let mut sc = match SCENARIO_FILES.iter().find(|(n, _)| *n == spec) {
        Some((_, text)) => Scenario::from_yaml(text),
        None => Scenario::from_yaml(spec),
    }
    .map_err(|e| PyValueError::new_err(e.to_string()))?;
    if let Some(s) = seed {
        sc.seed = s;
    }
    if let Some(list) = inject {
        let kinds = parse_kinds(list).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let s = sc.seed;
        sc = sc.with_planned_injections(&kinds, s);
    }
    Ok(sc)
}

/// Names of the shipped benchmark scenarios.
#[pyfunction]
fn scenario_names() -> Vec<&'static str> {
    SCENARIO_FILES.iter().map(|(n, _)| *n).collect()
}

/// Run a scenario headless and return `{"report", "labels", "alarms", "messages"}`.
#[pyfunction]
#[pyo3(signature = (scenario_spec, inject=None, seed=None, monitor_yaml=None, validity_filter=true))]
fn run(
    py: Python<'_>,
    scenario_spec: &str,
    inject: Option<&str>,
    seed: Option<u64>,
    monitor_yaml: Option<&str>,
    validity_filter: bool,
) -> PyResult<Py<PyAny>> {
    let sc = scenario(scenario_spec, inject, seed)?;
    let mut cfg = monitor(monitor_yaml)?;
    cfg.validity_filter = validity_filter;
    let mut sys = System::with_scenario(cfg.clone(), sc.clone(), None::<MemorySink>).map_err(err)?;
    sys.run_to_end().map_err(err)?;
    let labels = sys.labels();
    let report = evaluate(&labels, sys.desk().alarms(), sc.duration_ms, cfg.features.window_ms);
    to_py(
        py,
        &serde_json::json!({
            "report": report,
            "labels": labels,
            "alarms": sys.desk().alarms(),
            "messages": sys.counters().messages,
        }),
    )
}

/// Score a run directory's files.
#[pyfunction]
#[pyo3(signature = (trace, labels, alarms, window_ms=1000))]
fn evaluate_run(py: Python<'_>, trace: &str, labels: &str, alarms: &str, window_ms: i64) -> PyResult<Py<PyAny>> {
    let r = evaluate_files(trace.as_ref(), labels.as_ref(), alarms.as_ref(), window_ms).map_err(err)?;
    to_py(py, &r)
}

/// The shipped benchmark suite with the default monitor.
#[pyfunction]
#[pyo3(name = "bench")]
fn run_bench(py: Python<'_>) -> PyResult<Py<PyAny>> {
    let s = run_suite(&scenarios(), &monitor_config()).map_err(err)?;
    to_py(py, &serde_json::json!({"overall": s.overall, "wall_s": s.wall_s}))
}

/// Load a trace in any supported format as a list of records.
#[pyfunction]
fn read_trace(py: Python<'_>, path: &str) -> PyResult<Py<PyAny>> {
    to_py(py, &load_trace(path.as_ref()).map_err(err)?)
}

/// `(isolated, score)`; `None` while the history is shorter than n + 1.
#[pyfunction]
fn isolated(point: Vec<f64>, history: Vec<Vec<f64>>, t: f64, n: usize) -> Option<(bool, f64)> {
    match score_isolated(&point, &history, t, n) {
        IsolatedVerdict::InsufficientHistory => None,
        IsolatedVerdict::Normal { score, .. } => Some((false, score)),
        IsolatedVerdict::Isolated { score, .. } => Some((true, score)),
    }
}

/// A live system stepped from Python.
#[pyclass(unsendable)]
struct Monitor {
    sys: System,
}

#[pymethods]
impl Monitor {
    #[new]
    #[pyo3(signature = (scenario_spec="square", inject=None, seed=None, monitor_yaml=None))]
    fn new(scenario_spec: &str, inject: Option<&str>, seed: Option<u64>, monitor_yaml: Option<&str>) -> PyResult<Self> {
        let sc = scenario(scenario_spec, inject, seed)?;
        let sys = System::with_scenario(monitor(monitor_yaml)?, sc, None::<MemorySink>).map_err(err)?;
        Ok(Self { sys })
    }

    /// Advance up to `ticks` ticks; returns whether the scenario still runs.
    #[pyo3(signature = (ticks=1))]
    fn step(&mut self, ticks: usize) -> PyResult<bool> {
        let mut running = self.sys.is_running();
        for _ in 0..ticks {
            running = self.sys.step().map_err(err)?;
            if !running {
                break;
            }
        }
        Ok(running)
    }

    fn run_to_end(&mut self) -> PyResult<()> {
        self.sys.run_to_end().map_err(err)
    }

    #[getter]
    fn now_ms(&self) -> i64 {
        self.sys.now_ms()
    }

    fn health(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.sys.health())
    }

    fn metrics(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.sys.metrics())
    }

    fn risk(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.sys.risk())
    }

    #[pyo3(signature = (state=None))]
    fn alarms(&self, py: Python<'_>, state: Option<&str>) -> PyResult<Py<PyAny>> {
        let state = state
            .map(|s| serde_json::from_value::<AlarmState>(serde_json::json!(s)))
            .transpose()
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        to_py(py, &self.sys.alarms(state))
    }

    fn estop(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let r = self.sys.estop().map_err(err)?;
        to_py(py, &r)
    }

    #[pyo3(signature = (kind, magnitude=None, duration_ms=None))]
    fn inject(&mut self, kind: &str, magnitude: Option<f64>, duration_ms: Option<i64>) -> PyResult<usize> {
        let k = busguard_core::simbot::InjectionKind::parse(kind).ok_or_else(|| PyValueError::new_err(format!("unknown kind {kind}")))?;
        self.sys.inject(k, magnitude, duration_ms).map_err(err)
    }

    fn labels(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.sys.labels())
    }
}

#[pymodule]
fn busguard(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(scenario_names, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_run, m)?)?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    m.add_function(wrap_pyfunction!(read_trace, m)?)?;
    m.add_function(wrap_pyfunction!(isolated, m)?)?;
    m.add_class::<Monitor>()?;
    Ok(())
}
