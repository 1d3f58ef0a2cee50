//! Flexible job-shop domain model: instances, schedules, feasibility checks
//! and makespan / gap accounting.
//!
//! Indices are 0-based everywhere in this module. Time is measured in integer
//! units.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

pub type Time = u64;

/// One operation of a job together with its compatible machines.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OperationSpec {
    pub job_id: usize,
    pub op_index: usize,
    /// `(machine, processing time)` pairs sorted by machine index.
    durations: Vec<(usize, Time)>,
}

impl OperationSpec {
    pub fn durations(&self) -> &[(usize, Time)] {
        &self.durations
    }

    pub fn duration_on(&self, machine: usize) -> Option<Time> {
        self.durations
            .binary_search_by_key(&machine, |&(m, _)| m)
            .ok()
            .map(|i| self.durations[i].1)
    }

    pub fn machines(&self) -> impl Iterator<Item = usize> + '_ {
        self.durations.iter().map(|&(m, _)| m)
    }

    pub fn n_compatible(&self) -> usize {
        self.durations.len()
    }

    pub fn min_duration(&self) -> Time {
        self.durations.iter().map(|&(_, p)| p).min().unwrap_or(0)
    }

    pub fn max_duration(&self) -> Time {
        self.durations.iter().map(|&(_, p)| p).max().unwrap_or(0)
    }

    pub fn mean_duration(&self) -> f64 {
        let total: Time = self.durations.iter().map(|&(_, p)| p).sum();
        total as f64 / self.durations.len() as f64
    }
}

/// An immutable FJSP problem.
///
/// Operations are also addressable by a flat id: job-major, then op index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    n_machines: usize,
    jobs: Vec<Vec<OperationSpec>>,
    offsets: Vec<usize>,
}

impl Instance {
    /// Builds an instance from per-job lists of per-operation
    /// `(machine, duration)` lists, checking every structural invariant.
    pub fn new(n_machines: usize, jobs: Vec<Vec<Vec<(usize, Time)>>>) -> Result<Self> {
        if n_machines == 0 {
            return Err(Error::InvalidInstance("instance needs at least one machine".into()));
        }
        if jobs.is_empty() {
            return Err(Error::InvalidInstance("instance needs at least one job".into()));
        }
        let mut built = Vec::with_capacity(jobs.len());
        let mut offsets = Vec::with_capacity(jobs.len() + 1);
        let mut total = 0;
        for (job_id, ops) in jobs.into_iter().enumerate() {
            if ops.is_empty() {
                return Err(Error::InvalidInstance(format!("job {job_id} has no operations")));
            }
            offsets.push(total);
            total += ops.len();
            let mut job = Vec::with_capacity(ops.len());
            for (op_index, mut durations) in ops.into_iter().enumerate() {
                if durations.is_empty() {
                    return Err(Error::InvalidInstance(format!(
                        "operation ({job_id}, {op_index}) has no compatible machine"
                    )));
                }
                durations.sort_unstable_by_key(|&(m, _)| m);
                for w in durations.windows(2) {
                    if w[0].0 == w[1].0 {
                        return Err(Error::InvalidInstance(format!(
                            "operation ({job_id}, {op_index}) lists machine {} twice",
                            w[0].0
                        )));
                    }
                }
                for &(m, p) in &durations {
                    if m >= n_machines {
                        return Err(Error::InvalidInstance(format!(
                            "operation ({job_id}, {op_index}) uses machine {m} but there are {n_machines}"
                        )));
                    }
                    if p == 0 {
                        return Err(Error::InvalidInstance(format!(
                            "operation ({job_id}, {op_index}) has zero duration on machine {m}"
                        )));
                    }
                }
                job.push(OperationSpec { job_id, op_index, durations });
            }
            built.push(job);
        }
        offsets.push(total);
        Ok(Instance { n_machines, jobs: built, offsets })
    }

    pub fn n_jobs(&self) -> usize {
        self.jobs.len()
    }

    pub fn n_machines(&self) -> usize {
        self.n_machines
    }

    pub fn n_ops(&self) -> usize {
        self.offsets[self.jobs.len()]
    }

    pub fn jobs(&self) -> &[Vec<OperationSpec>] {
        &self.jobs
    }

    pub fn job(&self, job: usize) -> &[OperationSpec] {
        &self.jobs[job]
    }

    pub fn op(&self, job: usize, op_index: usize) -> &OperationSpec {
        &self.jobs[job][op_index]
    }

    /// Flat id of `(job, op_index)`.
    pub fn op_id(&self, job: usize, op_index: usize) -> usize {
        self.offsets[job] + op_index
    }

    /// Inverse of [`Instance::op_id`].
    pub fn op_at(&self, id: usize) -> &OperationSpec {
        let job = self.offsets.partition_point(|&o| o <= id) - 1;
        &self.jobs[job][id - self.offsets[job]]
    }

    pub fn ops(&self) -> impl Iterator<Item = &OperationSpec> {
        self.jobs.iter().flatten()
    }

    pub fn max_duration(&self) -> Time {
        self.ops().map(OperationSpec::max_duration).max().unwrap_or(1)
    }

    /// Largest per-job sum of minimum processing times; no feasible schedule
    /// can finish earlier.
    pub fn job_lower_bound(&self) -> Time {
        self.jobs
            .iter()
            .map(|ops| ops.iter().map(OperationSpec::min_duration).sum())
            .max()
            .unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Assignment {
    pub job_id: usize,
    pub op_index: usize,
    pub machine_id: usize,
    pub start: Time,
    pub end: Time,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub assignments: Vec<Assignment>,
}

impl Schedule {
    pub fn new(assignments: Vec<Assignment>) -> Self {
        Schedule { assignments }
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }
}

/// Completion time of the last operation.
pub fn makespan(schedule: &Schedule) -> Result<Time> {
    match schedule.assignments.iter().map(|a| a.end).max() {
        Some(t) => Ok(t),
        None => domain("makespan of an empty schedule"),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    MissingOperation { job_id: usize, op_index: usize },
    DuplicateOperation { job_id: usize, op_index: usize },
    UnknownOperation { job_id: usize, op_index: usize },
    IncompatibleMachine { job_id: usize, op_index: usize, machine_id: usize },
    DurationMismatch { job_id: usize, op_index: usize, expected: Time, actual: Time },
    MachineOverlap { machine_id: usize, first: (usize, usize), second: (usize, usize) },
    Precedence { job_id: usize, op_index: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingOperation { job_id, op_index } => {
                write!(f, "missing operation ({job_id}, {op_index})")
            }
            Violation::DuplicateOperation { job_id, op_index } => {
                write!(f, "operation ({job_id}, {op_index}) assigned more than once")
            }
            Violation::UnknownOperation { job_id, op_index } => {
                write!(f, "operation ({job_id}, {op_index}) does not exist")
            }
            Violation::IncompatibleMachine { job_id, op_index, machine_id } => write!(
                f,
                "operation ({job_id}, {op_index}) cannot run on machine {machine_id}"
            ),
            Violation::DurationMismatch { job_id, op_index, expected, actual } => write!(
                f,
                "operation ({job_id}, {op_index}) lasts {actual}, expected {expected}"
            ),
            Violation::MachineOverlap { machine_id, first, second } => write!(
                f,
                "machine overlap on {machine_id}: ({}, {}) and ({}, {})",
                first.0, first.1, second.0, second.1
            ),
            Violation::Precedence { job_id, op_index } => write!(
                f,
                "precedence: operation ({job_id}, {op_index}) starts before its predecessor ends"
            ),
        }
    }
}

/// Lists every feasibility violation of `schedule` against `instance`.
/// An empty result means the schedule is feasible and complete.
pub fn validate_schedule(instance: &Instance, schedule: &Schedule) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen: HashMap<(usize, usize), Assignment> = HashMap::new();
    let mut per_machine: Vec<Vec<Assignment>> = vec![Vec::new(); instance.n_machines()];

    for a in &schedule.assignments {
        let key = (a.job_id, a.op_index);
        if a.job_id >= instance.n_jobs() || a.op_index >= instance.job(a.job_id).len() {
            out.push(Violation::UnknownOperation { job_id: a.job_id, op_index: a.op_index });
            continue;
        }
        if seen.contains_key(&key) {
            out.push(Violation::DuplicateOperation { job_id: a.job_id, op_index: a.op_index });
            continue;
        }
        seen.insert(key, *a);
        match instance.op(a.job_id, a.op_index).duration_on(a.machine_id) {
            None => out.push(Violation::IncompatibleMachine {
                job_id: a.job_id,
                op_index: a.op_index,
                machine_id: a.machine_id,
            }),
            Some(p) => {
                if a.end < a.start || a.end - a.start != p {
                    out.push(Violation::DurationMismatch {
                        job_id: a.job_id,
                        op_index: a.op_index,
                        expected: p,
                        actual: a.end.saturating_sub(a.start),
                    });
                }
                per_machine[a.machine_id].push(*a);
            }
        }
    }

    for (job_id, ops) in instance.jobs().iter().enumerate() {
        for op_index in 0..ops.len() {
            if !seen.contains_key(&(job_id, op_index)) {
                out.push(Violation::MissingOperation { job_id, op_index });
            }
        }
        for op_index in 1..ops.len() {
            if let (Some(prev), Some(cur)) =
                (seen.get(&(job_id, op_index - 1)), seen.get(&(job_id, op_index)))
            {
                if cur.start < prev.end {
                    out.push(Violation::Precedence { job_id, op_index });
                }
            }
        }
    }

    for (machine_id, mut slots) in per_machine.into_iter().enumerate() {
        slots.sort_by_key(|a| (a.start, a.end));
        for w in slots.windows(2) {
            if w[1].start < w[0].end {
                out.push(Violation::MachineOverlap {
                    machine_id,
                    first: (w[0].job_id, w[0].op_index),
                    second: (w[1].job_id, w[1].op_index),
                });
            }
        }
    }
    out
}

/// Relative gap in percent: `100 * (value - reference) / reference`.
pub fn gap(value: f64, reference: f64) -> Result<f64> {
    if reference.is_nan() || reference <= 0.0 {
        return domain(format!("gap reference must be positive, got {reference}"));
    }
    Ok(100.0 * (value - reference) / reference)
}

/// Percent rendered to two decimals, the way reports print it.
pub fn format_percent(p: f64) -> String {
    format!("{p:.2}%")
}
