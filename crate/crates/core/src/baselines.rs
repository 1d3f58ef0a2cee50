//! Reference solvers: priority dispatch rules, a uniform random policy and a
//! depth-first branch-and-bound for tiny instances.

use std::str::FromStr;
use std::sync::Arc;

use crate::env::{CandidatePair, EnvState};
use crate::error::{Error, Result};
use crate::fjsp::{makespan, Instance, Schedule, Time};
use crate::io::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DispatchRule {
    /// Shortest processing time over all candidate pairs.
    Spt,
    /// Earliest-ready front operation, then its fastest machine.
    FifoSpt,
    /// Job with most remaining work, then its fastest machine.
    MwkrSpt,
    Random,
}

impl DispatchRule {
    pub const ALL: [DispatchRule; 4] = [DispatchRule::Spt, DispatchRule::FifoSpt, DispatchRule::MwkrSpt, DispatchRule::Random];

    pub fn name(self) -> &'static str {
        match self {
            DispatchRule::Spt => "spt",
            DispatchRule::FifoSpt => "fifo-spt",
            DispatchRule::MwkrSpt => "mwkr-spt",
            DispatchRule::Random => "random",
        }
    }

    /// Index into `state.candidates()` chosen by this rule.
    pub fn choose(self, state: &EnvState, candidates: &[CandidatePair], rng: &mut RngStream) -> usize {
        let inst = state.instance();
        let duration = |c: &CandidatePair| inst.op(c.job_id, c.op_index).duration_on(c.machine_id).expect("feasible");
        match self {
            DispatchRule::Spt => argmin_by_key(candidates, |c| duration(c)),
            DispatchRule::FifoSpt => {
                argmin_by_key(candidates, |c| (state.job_ready()[c.job_id], c.job_id, duration(c)))
            }
            DispatchRule::MwkrSpt => {
                let remaining = |job: usize| -> f64 {
                    inst.job(job)[state.front_op(job).unwrap_or(inst.job(job).len())..]
                        .iter()
                        .map(|op| op.mean_duration())
                        .sum()
                };
                let mut best = 0;
                let mut best_key = (f64::NEG_INFINITY, Time::MAX);
                for (i, c) in candidates.iter().enumerate() {
                    let work = remaining(c.job_id);
                    let d = duration(c);
                    if work > best_key.0 || (work == best_key.0 && d < best_key.1) {
                        best = i;
                        best_key = (work, d);
                    }
                }
                best
            }
            DispatchRule::Random => rng.uniform(0, candidates.len() as u64 - 1) as usize,
        }
    }
}

/// First index attaining the minimum key.
fn argmin_by_key<K: Ord>(items: &[CandidatePair], key: impl Fn(&CandidatePair) -> K) -> usize {
    let mut best = 0;
    let mut best_key = key(&items[0]);
    for (i, item) in items.iter().enumerate().skip(1) {
        let k = key(item);
        if k < best_key {
            best = i;
            best_key = k;
        }
    }
    best
}

impl FromStr for DispatchRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DispatchRule::ALL
            .into_iter()
            .find(|r| r.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Domain(format!("unknown dispatch rule '{s}' (spt, fifo-spt, mwkr-spt, random)")))
    }
}

/// Rolls the environment out with `rule`; `seed` only matters for `Random`.
pub fn dispatch_solve_seeded(instance: &Arc<Instance>, rule: DispatchRule, seed: u64) -> Schedule {
    let mut state = EnvState::reset(Arc::clone(instance));
    let mut rng = RngStream::new(seed, 0);
    while !state.is_done() {
        let candidates = state.candidates();
        let pick = rule.choose(&state, &candidates, &mut rng);
        state.step(candidates[pick]).expect("rules only pick candidates");
    }
    state.schedule()
}

pub fn dispatch_solve(instance: &Arc<Instance>, rule: DispatchRule) -> Schedule {
    dispatch_solve_seeded(instance, rule, 0)
}

/// Uniform choice among candidate pairs at every step.
pub fn random_solve(instance: &Arc<Instance>, seed: u64) -> Schedule {
    dispatch_solve_seeded(instance, DispatchRule::Random, seed)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExactResult {
    pub schedule: Schedule,
    pub makespan: Time,
    /// True when the search finished, so `makespan` is the optimum.
    pub optimal: bool,
    pub nodes: u64,
}

/// Recommended ceiling on total operations for [`exact_solve`].
pub const EXACT_MAX_OPS: usize = 10;

struct Search {
    best: Time,
    best_schedule: Schedule,
    nodes: u64,
    limit: u64,
    aborted: bool,
}

fn lower_bound(state: &EnvState) -> Time {
    let inst = state.instance();
    let placed = state.machine_free().iter().copied().max().unwrap_or(0);
    let jobs = (0..inst.n_jobs())
        .map(|j| {
            let rest: Time = match state.front_op(j) {
                Some(k) => inst.job(j)[k..].iter().map(|op| op.min_duration()).sum(),
                None => 0,
            };
            state.job_ready()[j] + rest
        })
        .max()
        .unwrap_or(0);
    placed.max(jobs)
}

fn dfs(state: &EnvState, search: &mut Search) {
    if search.aborted {
        return;
    }
    search.nodes += 1;
    if search.nodes > search.limit {
        search.aborted = true;
        return;
    }
    if state.is_done() {
        let schedule = state.schedule();
        let mk = makespan(&schedule).expect("complete schedule");
        if mk < search.best {
            search.best = mk;
            search.best_schedule = schedule;
        }
        return;
    }
    if lower_bound(state) >= search.best {
        return;
    }
    let inst = state.instance();
    let mut children: Vec<(Time, CandidatePair)> = state
        .candidates()
        .into_iter()
        .map(|c| {
            let p = inst.op(c.job_id, c.op_index).duration_on(c.machine_id).expect("feasible");
            let end = state.machine_free()[c.machine_id].max(state.job_ready()[c.job_id]) + p;
            (end, c)
        })
        .collect();
    // earliest-finishing children first
    children.sort_by_key(|&(end, _)| end);
    for (_, c) in children {
        let mut next = state.clone();
        next.step(c).expect("candidate is feasible");
        dfs(&next, search);
        if search.aborted {
            return;
        }
    }
}

/// Depth-first branch-and-bound over `(front op, machine)` decisions, seeded
/// with the best dispatch-rule schedule as incumbent.
pub fn exact_solve(instance: &Arc<Instance>, node_limit: u64) -> ExactResult {
    let (mut best_schedule, mut best) = (Schedule::default(), Time::MAX);
    for rule in [DispatchRule::Spt, DispatchRule::FifoSpt, DispatchRule::MwkrSpt] {
        let s = dispatch_solve(instance, rule);
        let mk = makespan(&s).expect("complete schedule");
        if mk < best {
            best = mk;
            best_schedule = s;
        }
    }
    let mut search = Search { best, best_schedule, nodes: 0, limit: node_limit, aborted: false };
    if best > instance.job_lower_bound() {
        dfs(&EnvState::reset(Arc::clone(instance)), &mut search);
    }
    ExactResult {
        makespan: search.best,
        schedule: search.best_schedule,
        optimal: !search.aborted,
        nodes: search.nodes,
    }
}
