//! The scheduling MDP.
//!
//! An action assigns the front (earliest unscheduled) operation of some job to
//! one of its compatible machines. Operations are appended at
//! `max(machine free time, job ready time)`; idle gaps are never back-filled.
//! The reward is the drop in estimated makespan caused by the action, so the
//! undiscounted return of an episode equals `EstCmax(s0) - makespan`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::fjsp::{Assignment, Instance, Schedule, Time};
use crate::tensor::Tensor;

pub const OP_FEATURES: usize = 10;
pub const MACHINE_FEATURES: usize = 8;

/// Duration statistic used for unscheduled operations in completion estimates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimateMode {
    #[default]
    Mean,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CandidatePair {
    pub job_id: usize,
    pub op_index: usize,
    pub machine_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug)]
pub struct EnvState {
    instance: Arc<Instance>,
    mode: EstimateMode,
    /// `(machine, start, end)` per flat op id once scheduled.
    placed: Vec<Option<(usize, Time, Time)>>,
    next_op: Vec<usize>,
    machine_free: Vec<Time>,
    machine_busy: Vec<Time>,
    job_ready: Vec<Time>,
    history: Vec<Assignment>,
    estimates: Vec<f64>,
    est_cmax: f64,
}

impl EnvState {
    pub fn reset(instance: Arc<Instance>) -> Self {
        Self::reset_with(instance, EstimateMode::Mean)
    }

    pub fn reset_with(instance: Arc<Instance>, mode: EstimateMode) -> Self {
        let (n, m) = (instance.n_jobs(), instance.n_machines());
        let mut state = EnvState {
            placed: vec![None; instance.n_ops()],
            next_op: vec![0; n],
            machine_free: vec![0; m],
            machine_busy: vec![0; m],
            job_ready: vec![0; n],
            history: Vec::with_capacity(instance.n_ops()),
            estimates: Vec::new(),
            est_cmax: 0.0,
            instance,
            mode,
        };
        state.refresh_estimates();
        state
    }

    pub fn instance(&self) -> &Arc<Instance> {
        &self.instance
    }

    pub fn step_count(&self) -> usize {
        self.history.len()
    }

    pub fn is_done(&self) -> bool {
        self.history.len() == self.instance.n_ops()
    }

    pub fn machine_free(&self) -> &[Time] {
        &self.machine_free
    }

    pub fn job_ready(&self) -> &[Time] {
        &self.job_ready
    }

    /// Index of the front operation of `job`, or `None` once it is finished.
    pub fn front_op(&self, job: usize) -> Option<usize> {
        let k = self.next_op[job];
        (k < self.instance.job(job).len()).then_some(k)
    }

    /// Jobs that still have an operation to schedule, in job order.
    pub fn open_jobs(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.instance.n_jobs()).filter(|&j| self.front_op(j).is_some())
    }

    /// Feasible `(front op, machine)` pairs, job-major then machine-minor.
    pub fn candidates(&self) -> Vec<CandidatePair> {
        let mut out = Vec::new();
        for job_id in self.open_jobs() {
            let op_index = self.next_op[job_id];
            for machine_id in self.instance.op(job_id, op_index).machines() {
                out.push(CandidatePair { job_id, op_index, machine_id });
            }
        }
        out
    }

    pub fn is_feasible(&self, pair: &CandidatePair) -> bool {
        pair.job_id < self.instance.n_jobs()
            && self.front_op(pair.job_id) == Some(pair.op_index)
            && self.instance.op(pair.job_id, pair.op_index).duration_on(pair.machine_id).is_some()
    }

    pub fn step(&mut self, pair: CandidatePair) -> Result<StepOutcome> {
        if !self.is_feasible(&pair) {
            return domain(format!(
                "infeasible action: operation ({}, {}) on machine {}",
                pair.job_id, pair.op_index, pair.machine_id
            ));
        }
        let CandidatePair { job_id, op_index, machine_id } = pair;
        let p = self.instance.op(job_id, op_index).duration_on(machine_id).expect("checked feasible");
        let start = self.machine_free[machine_id].max(self.job_ready[job_id]);
        let end = start + p;
        self.machine_free[machine_id] = end;
        self.machine_busy[machine_id] += p;
        self.job_ready[job_id] = end;
        self.next_op[job_id] += 1;
        let id = self.instance.op_id(job_id, op_index);
        self.placed[id] = Some((machine_id, start, end));
        self.history.push(Assignment { job_id, op_index, machine_id, start, end });

        let before = self.est_cmax;
        self.refresh_estimates();
        Ok(StepOutcome { reward: before - self.est_cmax, done: self.is_done() })
    }

    fn unscheduled_duration(&self, job: usize, k: usize) -> f64 {
        let op = self.instance.op(job, k);
        match self.mode {
            EstimateMode::Mean => op.mean_duration(),
            EstimateMode::Min => op.min_duration() as f64,
        }
    }

    fn refresh_estimates(&mut self) {
        let inst = Arc::clone(&self.instance);
        let mut est = vec![0.0; inst.n_ops()];
        for (job, ops) in inst.jobs().iter().enumerate() {
            let mut prev = 0.0;
            for (k, op) in ops.iter().enumerate() {
                let id = inst.op_id(job, k);
                let value = match self.placed[id] {
                    Some((_, _, end)) => end as f64,
                    None if k == self.next_op[job] => {
                        let earliest_machine = op.machines().map(|m| self.machine_free[m]).min().unwrap_or(0);
                        self.job_ready[job].max(earliest_machine) as f64 + self.unscheduled_duration(job, k)
                    }
                    None => prev + self.unscheduled_duration(job, k),
                };
                est[id] = value;
                prev = value;
            }
        }
        self.est_cmax = est.iter().copied().fold(0.0, f64::max);
        self.estimates = est;
    }

    /// Per-operation completion-time estimates, indexed by flat op id.
    pub fn estimate_completion_times(&self) -> &[f64] {
        &self.estimates
    }

    /// Maximum estimated completion time over all operations.
    pub fn est_cmax(&self) -> f64 {
        self.est_cmax
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::new(self.history.clone())
    }

    /// Raw operation and machine features plus the feasibility mask.
    pub fn extract_features(&self) -> FeatureBundle {
        let inst = &*self.instance;
        let (n_ops, m) = (inst.n_ops(), inst.n_machines());
        let cmax = self.est_cmax.max(1.0);
        let max_p = inst.max_duration() as f64;
        let eligible: Vec<usize> = self.open_jobs().map(|j| inst.op_id(j, self.next_op[j])).collect();
        let clock = self.machine_free.iter().copied().max().unwrap_or(0);

        let mut x_op = Vec::with_capacity(n_ops * OP_FEATURES);
        for (job, ops) in inst.jobs().iter().enumerate() {
            let n_i = ops.len() as f64;
            let remaining = ops.len() - self.next_op[job];
            let remaining_work: f64 = (self.next_op[job]..ops.len()).map(|k| ops[k].mean_duration()).sum();
            for (k, op) in ops.iter().enumerate() {
                let id = inst.op_id(job, k);
                let completion = self.estimates[id];
                let duration = match self.placed[id] {
                    Some((_, s, e)) => (e - s) as f64,
                    None => self.unscheduled_duration(job, k),
                };
                x_op.extend_from_slice(&[
                    self.placed[id].is_some() as u8 as f64,
                    (k == self.next_op[job]) as u8 as f64,
                    op.n_compatible() as f64 / m as f64,
                    op.mean_duration() / max_p,
                    op.min_duration() as f64 / max_p,
                    k as f64 / n_i,
                    remaining as f64 / n_i,
                    completion / cmax,
                    (completion - duration).max(0.0) / cmax,
                    remaining_work / cmax,
                ]);
            }
        }

        let mut x_ma = Vec::with_capacity(m * MACHINE_FEATURES);
        let mut pair_mask = vec![false; eligible.len() * m];
        for (row, &id) in eligible.iter().enumerate() {
            for mach in inst.op_at(id).machines() {
                pair_mask[row * m + mach] = true;
            }
        }
        for mach in 0..m {
            let durations: Vec<Time> =
                eligible.iter().filter_map(|&id| inst.op_at(id).duration_on(mach)).collect();
            let count = durations.len();
            let (min_d, mean_d) = if count == 0 {
                (1.0, 0.0)
            } else {
                let min = *durations.iter().min().expect("non-empty") as f64 / max_p;
                let mean = durations.iter().sum::<Time>() as f64 / count as f64 / max_p;
                (min, mean)
            };
            let free = self.machine_free[mach] as f64;
            let busy = self.machine_busy[mach] as f64;
            x_ma.extend_from_slice(&[
                free / cmax,
                busy / clock.max(1) as f64,
                count as f64 / eligible.len().max(1) as f64,
                min_d,
                mean_d,
                busy / cmax,
                (free - busy) / cmax,
                (count > 0) as u8 as f64,
            ]);
        }

        FeatureBundle {
            x_op: Tensor::matrix(n_ops, OP_FEATURES, x_op).expect("feature shape"),
            x_ma: Tensor::matrix(m, MACHINE_FEATURES, x_ma).expect("feature shape"),
            pair_mask,
            eligible_ops: eligible,
            job_sizes: inst.jobs().iter().map(Vec::len).collect(),
        }
    }
}

/// Network input for one decision step.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    /// `n_ops x OP_FEATURES`, rows in flat op order.
    pub x_op: Tensor,
    /// `n_machines x MACHINE_FEATURES`.
    pub x_ma: Tensor,
    /// Row-major `eligible_ops.len() x n_machines` feasibility mask.
    pub pair_mask: Vec<bool>,
    /// Flat ids of the front operations, in job order.
    pub eligible_ops: Vec<usize>,
    /// Operation count of every job (defines the precedence chains).
    pub job_sizes: Vec<usize>,
}

impl FeatureBundle {
    pub fn n_ops(&self) -> usize {
        self.x_op.rows()
    }

    pub fn n_machines(&self) -> usize {
        self.x_ma.rows()
    }

    /// `(eligible row, machine)` of every feasible pair, in candidate order.
    pub fn feasible_cells(&self) -> Vec<(usize, usize)> {
        let m = self.n_machines();
        self.pair_mask.iter().enumerate().filter(|(_, &ok)| ok).map(|(i, _)| (i / m, i % m)).collect()
    }
}
