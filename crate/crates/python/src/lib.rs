//! Python bindings: instances, the scheduling environment, solvers and the
//! policy network.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use fjsp_rl::baselines::{dispatch_solve_seeded, exact_solve, DispatchRule};
use fjsp_rl::env::{CandidatePair, EnvState};
use fjsp_rl::fjsp::{self, Assignment, Time};
use fjsp_rl::io::{self as fio, GenConfig, RngStream, Scheme};
use fjsp_rl::policy::{Mode, PolicyNet};
use fjsp_rl::ppo::{load_checkpoint, rollout, save_checkpoint};
use fjsp_rl::repr::NetConfig;
use fjsp_rl::report::emit_gantt;

type Action = (usize, usize, usize);

fn err(e: fjsp_rl::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Instance", frozen, from_py_object)]
#[derive(Clone)]
struct PyInstance {
    inner: Arc<fjsp::Instance>,
}

#[pymethods]
impl PyInstance {
    /// `jobs[j][k]` is a list of `(machine, duration)` pairs.
    #[new]
    fn new(n_machines: usize, jobs: Vec<Vec<Vec<(usize, Time)>>>) -> PyResult<Self> {
        Ok(PyInstance { inner: Arc::new(fjsp::Instance::new(n_machines, jobs).map_err(err)?) })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyInstance { inner: Arc::new(fio::parse_instance(text.as_bytes()).map_err(err)?) })
    }

    #[staticmethod]
    fn from_fjs(text: &str) -> PyResult<Self> {
        Ok(PyInstance { inner: Arc::new(fio::parse_fjs_text(text.as_bytes()).map_err(err)?) })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyInstance { inner: Arc::new(fio::load_instance(&path).map_err(err)?) })
    }

    fn to_json(&self) -> String {
        fio::serialize_instance(&self.inner)
    }

    fn to_fjs(&self) -> String {
        fio::emit_fjs_text(&self.inner)
    }

    #[getter]
    fn n_jobs(&self) -> usize {
        self.inner.n_jobs()
    }

    #[getter]
    fn n_machines(&self) -> usize {
        self.inner.n_machines()
    }

    #[getter]
    fn n_ops(&self) -> usize {
        self.inner.n_ops()
    }

    fn durations(&self, job: usize, op_index: usize) -> PyResult<Vec<(usize, Time)>> {
        if job >= self.inner.n_jobs() || op_index >= self.inner.job(job).len() {
            return Err(PyValueError::new_err("no such operation"));
        }
        Ok(self.inner.op(job, op_index).durations().to_vec())
    }

    fn __eq__(&self, other: &PyInstance) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Instance(jobs={}, machines={}, ops={})", self.inner.n_jobs(), self.inner.n_machines(), self.inner.n_ops())
    }
}

#[pyclass(name = "Schedule", frozen, from_py_object)]
#[derive(Clone)]
struct PySchedule {
    inner: fjsp::Schedule,
}

#[pymethods]
impl PySchedule {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PySchedule { inner: fio::parse_schedule(text.as_bytes()).map_err(err)? })
    }

    fn to_json(&self) -> String {
        fio::serialize_schedule(&self.inner)
    }

    /// `(job, op_index, machine, start, end)` tuples.
    #[getter]
    fn assignments(&self) -> Vec<(usize, usize, usize, Time, Time)> {
        self.inner.assignments.iter().map(|a| (a.job_id, a.op_index, a.machine_id, a.start, a.end)).collect()
    }

    #[getter]
    fn makespan(&self) -> PyResult<Time> {
        fjsp::makespan(&self.inner).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Env")]
struct PyEnv {
    inner: EnvState,
}

#[pymethods]
impl PyEnv {
    #[new]
    fn new(instance: &PyInstance) -> Self {
        PyEnv { inner: EnvState::reset(Arc::clone(&instance.inner)) }
    }

    fn reset(&mut self) {
        self.inner = EnvState::reset(Arc::clone(self.inner.instance()));
    }

    /// Feasible `(job, op_index, machine)` actions.
    fn candidates(&self) -> Vec<Action> {
        self.inner.candidates().iter().map(|c| (c.job_id, c.op_index, c.machine_id)).collect()
    }

    /// Returns `(reward, done)`.
    fn step(&mut self, job: usize, op_index: usize, machine: usize) -> PyResult<(f64, bool)> {
        let out = self.inner.step(CandidatePair { job_id: job, op_index, machine_id: machine }).map_err(err)?;
        Ok((out.reward, out.done))
    }

    #[getter]
    fn done(&self) -> bool {
        self.inner.is_done()
    }

    #[getter]
    fn est_cmax(&self) -> f64 {
        self.inner.est_cmax()
    }

    fn schedule(&self) -> PySchedule {
        PySchedule { inner: self.inner.schedule() }
    }

    /// `(op_features, machine_features)` as nested lists.
    fn features(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let b = self.inner.extract_features();
        let rows = |t: &fjsp_rl::tensor::Tensor| (0..t.rows()).map(|r| t.row(r).to_vec()).collect();
        (rows(&b.x_op), rows(&b.x_ma))
    }
}

#[pyclass(name = "Policy")]
struct PyPolicy {
    inner: PolicyNet,
}

#[pymethods]
impl PyPolicy {
    #[new]
    #[pyo3(signature = (seed=0, scale_dims=None))]
    fn new(seed: u64, scale_dims: Option<Vec<usize>>) -> PyResult<Self> {
        let mut config = NetConfig::default();
        if let Some(d) = scale_dims {
            config.scale_dims = d;
        }
        Ok(PyPolicy { inner: PolicyNet::new(config, seed).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyPolicy { inner: load_checkpoint(&path, None, false).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn n_parameters(&self) -> usize {
        self.inner.n_parameters()
    }

    /// Returns `(candidates, probabilities, value)` for the env's state.
    fn evaluate(&self, env: &PyEnv) -> PyResult<(Vec<Action>, Vec<f64>, f64)> {
        let out = self.inner.evaluate(&env.inner).map_err(err)?;
        let cands = out.candidates.iter().map(|c| (c.job_id, c.op_index, c.machine_id)).collect();
        Ok((cands, out.probs, out.value))
    }

    /// Full episode in `greedy` or `sampling` mode.
    #[pyo3(signature = (instance, mode="greedy", seed=0))]
    fn solve(&self, instance: &PyInstance, mode: &str, seed: u64) -> PyResult<PySchedule> {
        let mode: Mode = mode.parse().map_err(err)?;
        let t = rollout(&self.inner, &instance.inner, mode, &mut RngStream::new(seed, 0)).map_err(err)?;
        Ok(PySchedule { inner: t.schedule })
    }
}

/// Instance `index` of a synthetic dataset.
#[pyfunction]
#[pyo3(signature = (scheme, n_jobs, n_machines, seed=0, index=0))]
fn generate(scheme: &str, n_jobs: usize, n_machines: usize, seed: u64, index: u64) -> PyResult<PyInstance> {
    let scheme: Scheme = scheme.parse().map_err(err)?;
    let cfg = GenConfig::new(scheme, n_jobs, n_machines, seed).map_err(err)?;
    Ok(PyInstance { inner: Arc::new(fio::generate_sd(&cfg, index)) })
}

/// `algo` is `rule:<name>` or `exact`.
#[pyfunction]
#[pyo3(signature = (instance, algo="rule:spt", seed=0, node_limit=10_000_000))]
fn solve(instance: &PyInstance, algo: &str, seed: u64, node_limit: u64) -> PyResult<(PySchedule, bool)> {
    if algo == "exact" {
        let r = exact_solve(&instance.inner, node_limit);
        return Ok((PySchedule { inner: r.schedule }, r.optimal));
    }
    let rule: DispatchRule = algo
        .strip_prefix("rule:")
        .ok_or_else(|| PyValueError::new_err("algo must be rule:<name> or exact"))?
        .parse()
        .map_err(err)?;
    Ok((PySchedule { inner: dispatch_solve_seeded(&instance.inner, rule, seed) }, false))
}

/// Violations as strings; empty when feasible.
#[pyfunction]
fn validate(instance: &PyInstance, schedule: &PySchedule) -> Vec<String> {
    fjsp::validate_schedule(&instance.inner, &schedule.inner).iter().map(|v| format!("{v:?}")).collect()
}

#[pyfunction]
fn gap(value: f64, reference: f64) -> PyResult<f64> {
    fjsp::gap(value, reference).map_err(err)
}

#[pyfunction]
fn gantt(instance: &PyInstance, schedule: &PySchedule) -> PyResult<String> {
    emit_gantt(&instance.inner, &schedule.inner).map_err(err)
}

/// Builds a schedule from `(job, op_index, machine, start, end)` tuples.
#[pyfunction]
fn schedule_from(assignments: Vec<(usize, usize, usize, Time, Time)>) -> PySchedule {
    let a = assignments
        .into_iter()
        .map(|(job_id, op_index, machine_id, start, end)| Assignment { job_id, op_index, machine_id, start, end })
        .collect();
    PySchedule { inner: fjsp::Schedule::new(a) }
}

#[pymodule]
fn fjsp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyInstance>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyEnv>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(gap, m)?)?;
    m.add_function(wrap_pyfunction!(gantt, m)?)?;
    m.add_function(wrap_pyfunction!(schedule_from, m)?)?;
    Ok(())
}
