//! Dataset evaluation, makespan/gap tables and Gantt rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fjsp::{format_percent, gap, makespan, validate_schedule, Instance, Schedule, Time};
use crate::io::RngStream;
use crate::policy::{Mode, PolicyNet};
use crate::ppo::rollout;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub name: String,
    pub makespan: Time,
    pub schedule: Schedule,
    pub wall_time_s: f64,
}

/// Per-instance seed for sampling evaluation; sample `k` uses stream `k`, so
/// the first `n` samples are the same whatever `n_samples` is.
fn instance_seed(seed: u64, index: usize) -> u64 {
    RngStream::new(seed, index as u64).next_u64()
}

/// Greedy: one rollout per instance. Sampling: best of `n_samples` rollouts.
pub fn evaluate_dataset(
    net: &PolicyNet,
    dataset: &[(String, Arc<Instance>)],
    mode: Mode,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<EvalRecord>> {
    if dataset.is_empty() {
        return Err(Error::Domain("empty dataset".into()));
    }
    if mode == Mode::Sampling && n_samples == 0 {
        return Err(Error::Domain("n_samples must be positive".into()));
    }
    dataset
        .par_iter()
        .enumerate()
        .map(|(idx, (name, inst))| {
            let runs = if mode == Mode::Greedy { 1 } else { n_samples };
            let iseed = instance_seed(seed, idx);
            let clock = Instant::now();
            let mut best: Option<EvalRecord> = None;
            for k in 0..runs {
                let traj = rollout(net, inst, mode, &mut RngStream::new(iseed, k as u64))?;
                let ms = traj.makespan();
                if best.as_ref().is_none_or(|b| ms < b.makespan) {
                    best = Some(EvalRecord { name: name.clone(), makespan: ms, schedule: traj.schedule, wall_time_s: 0.0 });
                }
            }
            let mut best = best.expect("at least one run");
            best.wall_time_s = clock.elapsed().as_secs_f64();
            Ok(best)
        })
        .collect()
}

/// Reference makespans keyed by instance name (a JSON object).
pub fn load_reference(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = std::fs::read(path)?;
    let map: BTreeMap<String, f64> = serde_json::from_slice(&text).map_err(|e| Error::Schema(e.to_string()))?;
    Ok(map)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub makespan: f64,
    pub wall_time_s: f64,
    pub reference: Option<f64>,
    pub gap_percent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    /// Free-form settings echoed in the header, e.g. `sampling n_samples=100 seed=0`.
    pub settings: String,
    pub rows: Vec<ReportRow>,
    pub mean_makespan: f64,
    pub std_makespan: f64,
    pub mean_gap_percent: Option<f64>,
}

impl RunReport {
    /// `results` holds `(name, makespan, wall seconds)` per instance.
    pub fn new(
        method: &str,
        settings: &str,
        results: &[(String, f64, f64)],
        reference: Option<&BTreeMap<String, f64>>,
    ) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::Domain("no results to report".into()));
        }
        let mut rows = Vec::with_capacity(results.len());
        for (name, ms, secs) in results {
            let reference = reference.and_then(|r| r.get(name).copied());
            let gap_percent = reference.map(|r| gap(*ms, r)).transpose()?;
            rows.push(ReportRow { name: name.clone(), makespan: *ms, wall_time_s: *secs, reference, gap_percent });
        }
        let n = rows.len() as f64;
        let mean = rows.iter().map(|r| r.makespan).sum::<f64>() / n;
        let std = (rows.iter().map(|r| (r.makespan - mean).powi(2)).sum::<f64>() / n).sqrt();
        let gaps: Vec<f64> = rows.iter().filter_map(|r| r.gap_percent).collect();
        let mean_gap = (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64);
        Ok(RunReport {
            method: method.to_string(),
            settings: settings.to_string(),
            rows, mean_makespan: mean, std_makespan: std, mean_gap_percent: mean_gap })
    }

    pub fn from_records(
        method: &str,
        settings: &str,
        records: &[EvalRecord],
        reference: Option<&BTreeMap<String, f64>>,
    ) -> Result<Self> {
        let results: Vec<(String, f64, f64)> =
            records.iter().map(|r| (r.name.clone(), r.makespan as f64, r.wall_time_s)).collect();
        RunReport::new(method, settings, &results, reference)
    }

    /// Rows and aggregates without timing, for reproducibility comparisons.
    pub fn outcome_eq(&self, other: &RunReport) -> bool {
        let key = |r: &RunReport| {
            let rows: Vec<_> = r.rows.iter().map(|x| (x.name.clone(), x.makespan.to_bits(), x.gap_percent.map(f64::to_bits))).collect();
            (rows, r.mean_makespan.to_bits(), r.std_makespan.to_bits())
        };
        key(self) == key(other)
    }

    /// One JSON record per row, then a summary record.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(&serde_json::json!({"record": "row", "method": self.method, "row": row}))?);
            out.push('\n');
        }
        let summary = serde_json::json!({
            "record": "summary",
            "method": self.method,
            "settings": self.settings,
            "n_instances": self.rows.len(),
            "mean_makespan": self.mean_makespan,
            "std_makespan": self.std_makespan,
            "mean_gap_percent": self.mean_gap_percent,
        });
        out.push_str(&serde_json::to_string(&summary)?);
        out.push('\n');
        Ok(out)
    }

    /// Plain-text table.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(8);
        let mut out = String::new();
        let _ = writeln!(out, "method: {} [{}]", self.method, self.settings);
        let _ = writeln!(out, "{:<width$}  {:>10}  {:>10}  {:>9}  {:>9}", "instance", "makespan", "reference", "gap", "time(s)");
        for r in &self.rows {
            let reference = r.reference.map(|x| format!("{x}")).unwrap_or_else(|| "-".into());
            let g = r.gap_percent.map(format_percent).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:<width$}  {:>10}  {:>10}  {:>9}  {:>9.3}",
                r.name, r.makespan, reference, g, r.wall_time_s
            );
        }
        let _ = write!(out, "mean makespan {:.2} (std {:.2})", self.mean_makespan, self.std_makespan);
        if let Some(g) = self.mean_gap_percent {
            let _ = write!(out, ", mean gap {}", format_percent(g));
        }
        out.push('\n');
        out
    }
}

/// Mean and std of per-run mean makespans (one run per seed).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub n_runs: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn aggregate_seeds(reports: &[RunReport]) -> Result<SeedAggregate> {
    if reports.is_empty() {
        return Err(Error::Domain("no runs to aggregate".into()));
    }
    let n = reports.len() as f64;
    let mean = reports.iter().map(|r| r.mean_makespan).sum::<f64>() / n;
    let std = (reports.iter().map(|r| (r.mean_makespan - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(SeedAggregate { n_runs: reports.len(), mean, std })
}

const ROW_HEIGHT: f64 = 24.0;
const LEFT: f64 = 48.0;
const PLOT_WIDTH: f64 = 800.0;
const AXIS: f64 = 28.0;

/// SVG Gantt chart: one row per machine, one rectangle per assignment, time
/// axis spanning `[0, makespan]`. Infeasible schedules are refused.
pub fn emit_gantt(instance: &Instance, schedule: &Schedule) -> Result<String> {
    let violations = validate_schedule(instance, schedule);
    if !violations.is_empty() {
        return Err(Error::Domain(format!("cannot draw infeasible schedule: {:?}", violations[0])));
    }
    let cmax = makespan(schedule)?;
    let scale = PLOT_WIDTH / cmax as f64;
    let m = instance.n_machines();
    let height = m as f64 * ROW_HEIGHT + AXIS;
    let width = LEFT + PLOT_WIDTH + 16.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" data-makespan="{cmax}">"#
    );
    for machine in 0..m {
        let y = machine as f64 * ROW_HEIGHT;
        let _ = writeln!(
            svg,
            r#"<text class="machine" x="4" y="{}" font-size="12">M{machine}</text>"#,
            y + ROW_HEIGHT * 0.65
        );
    }
    for a in &schedule.assignments {
        let x = LEFT + a.start as f64 * scale;
        let w = (a.end - a.start) as f64 * scale;
        let y = a.machine_id as f64 * ROW_HEIGHT + 2.0;
        let hue = (a.job_id * 137) % 360;
        let _ = writeln!(
            svg,
            r#"<rect class="op" x="{x:.3}" y="{y}" width="{w:.3}" height="{}" fill="hsl({hue},60%,65%)" stroke="black" stroke-width="0.5" data-job="{}" data-op="{}" data-machine="{}" data-start="{}" data-end="{}"><title>O{},{} [{}, {})</title></rect>"#,
            ROW_HEIGHT - 4.0,
            a.job_id,
            a.op_index,
            a.machine_id,
            a.start,
            a.end,
            a.job_id,
            a.op_index,
            a.start,
            a.end
        );
    }
    let axis_y = m as f64 * ROW_HEIGHT + 4.0;
    let _ = writeln!(
        svg,
        r#"<line class="axis" x1="{LEFT}" y1="{axis_y}" x2="{}" y2="{axis_y}" stroke="black" data-min="0" data-max="{cmax}"/>"#,
        LEFT + PLOT_WIDTH
    );
    let _ = writeln!(svg, r#"<text x="{LEFT}" y="{}" font-size="11">0</text>"#, axis_y + 16.0);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{cmax}</text>"#,
        LEFT + PLOT_WIDTH,
        axis_y + 16.0
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}
