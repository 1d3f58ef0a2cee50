//! Instance generation, benchmark-format parsing and JSON documents.
//!
//! Generated instances are a pure function of `(GenConfig, index)`. The random
//! source is ChaCha8 (`rand_chacha`) seeded through `seed_from_u64(seed)` with
//! the ChaCha stream id set to the instance index. Bounded integers are drawn
//! by [`RngStream::uniform`], a rejection sampler over raw 64-bit outputs, so
//! the byte stream does not depend on `rand`'s distribution code. Changing any
//! of this requires bumping [`GENERATOR_VERSION`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fjsp::{Instance, Schedule, Time};

pub const GENERATOR_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Sd1,
    Sd2,
}

impl Scheme {
    pub fn max_duration(self) -> Time {
        match self {
            Scheme::Sd1 => 20,
            Scheme::Sd2 => 99,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Sd1 => "sd1",
            Scheme::Sd2 => "sd2",
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sd1" => Ok(Scheme::Sd1),
            "sd2" => Ok(Scheme::Sd2),
            other => Err(Error::Domain(format!("unknown scheme '{other}' (expected sd1 or sd2)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenConfig {
    pub scheme: Scheme,
    pub n_jobs: usize,
    pub n_machines: usize,
    pub seed: u64,
}

impl GenConfig {
    pub fn new(scheme: Scheme, n_jobs: usize, n_machines: usize, seed: u64) -> Result<Self> {
        if n_jobs == 0 || n_machines == 0 {
            return Err(Error::Domain("generator needs at least one job and one machine".into()));
        }
        Ok(GenConfig { scheme, n_jobs, n_machines, seed })
    }

    /// Inclusive bounds of the per-job operation count: `ceil(0.8 m)..=ceil(1.2 m)`.
    pub fn op_count_range(&self) -> (usize, usize) {
        let m = self.n_machines;
        ((4 * m).div_ceil(5), (6 * m).div_ceil(5))
    }
}

/// Deterministic random stream keyed by `(seed, stream)`.
#[derive(Clone, Debug)]
pub struct RngStream(ChaCha8Rng);

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream(rng)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn uniform(&mut self, lo: u64, hi: u64) -> u64 {
        assert!(lo <= hi, "empty range {lo}..={hi}");
        let span = hi - lo + 1;
        if span == 0 {
            return self.next_u64();
        }
        let zone = u64::MAX - (u64::MAX - span + 1) % span;
        loop {
            let x = self.next_u64();
            if x <= zone {
                return lo + x % span;
            }
        }
    }

    /// Uniform real in `[0, 1)` with 53 bits of precision.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.0.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.0.try_fill_bytes(dest)
    }
}

/// Generates instance number `index` of the SD1/SD2 family described by `config`.
pub fn generate_sd(config: &GenConfig, index: u64) -> Instance {
    let mut rng = RngStream::new(config.seed, index);
    let m = config.n_machines;
    let (lo, hi) = config.op_count_range();
    let max_p = config.scheme.max_duration();
    let mut machines: Vec<usize> = (0..m).collect();
    let jobs = (0..config.n_jobs)
        .map(|_| {
            let n_ops = rng.uniform(lo as u64, hi as u64) as usize;
            (0..n_ops)
                .map(|_| {
                    let k = rng.uniform(1, m as u64) as usize;
                    // partial Fisher-Yates: the first k slots become the chosen set
                    for i in 0..k {
                        let j = rng.uniform(i as u64, (m - 1) as u64) as usize;
                        machines.swap(i, j);
                    }
                    machines[..k].iter().map(|&mach| (mach, rng.uniform(1, max_p))).collect()
                })
                .collect()
        })
        .collect();
    Instance::new(m, jobs).expect("generator respects instance invariants")
}

fn parse_err<T>(line: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse { line, msg: msg.into() })
}

fn parse_int(tok: &str, line: usize, what: &str) -> Result<u64> {
    tok.parse::<u64>().or_else(|_| parse_err(line, format!("expected integer {what}, found '{tok}'")))
}

/// Reads `n m` from the header line of a `.fjs` document.
pub fn parse_fjs_header(header: &str) -> Result<(usize, usize)> {
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() < 2 || toks.len() > 3 {
        return parse_err(1, "header must be 'n_jobs n_machines [avg]'");
    }
    let n = parse_int(toks[0], 1, "job count")? as usize;
    let m = parse_int(toks[1], 1, "machine count")? as usize;
    if let Some(avg) = toks.get(2) {
        if avg.parse::<f64>().is_err() {
            return parse_err(1, format!("malformed average field '{avg}'"));
        }
    }
    if n == 0 || m == 0 {
        return parse_err(1, "job and machine counts must be positive");
    }
    Ok((n, m))
}

/// Parses the standard FJSP text format (Brandimarte / Hurink layout).
pub fn parse_fjs_text(bytes: &[u8]) -> Result<Instance> {
    let text = std::str::from_utf8(bytes).or_else(|_| parse_err(1, "input is not UTF-8"))?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines.next().map_or_else(|| parse_err(1, "empty input"), Ok)?;
    let (n, m) = parse_fjs_header(header).map_err(|e| match e {
        Error::Parse { msg, .. } => Error::Parse { line: hline, msg },
        other => other,
    })?;

    let mut jobs = Vec::with_capacity(n);
    for job in 0..n {
        let (ln, body) = lines
            .next()
            .map_or_else(|| parse_err(hline + job + 1, format!("missing line for job {}", job + 1)), Ok)?;
        let mut toks = body.split_whitespace();
        let mut next = |what: &str| -> Result<u64> {
            match toks.next() {
                Some(t) => parse_int(t, ln, what),
                None => parse_err(ln, format!("line ends early, expected {what}")),
            }
        };
        let n_ops = next("operation count")? as usize;
        if n_ops == 0 {
            return parse_err(ln, "job has no operations");
        }
        let mut ops = Vec::with_capacity(n_ops);
        for _ in 0..n_ops {
            let k = next("compatible-machine count")? as usize;
            if k == 0 || k > m {
                return parse_err(ln, format!("compatible-machine count {k} outside 1..={m}"));
            }
            let mut durations = Vec::with_capacity(k);
            for _ in 0..k {
                let mach = next("machine index")? as usize;
                if mach == 0 || mach > m {
                    return parse_err(ln, format!("machine index {mach} outside 1..={m}"));
                }
                let p = next("processing time")?;
                if p == 0 {
                    return parse_err(ln, "processing time must be positive");
                }
                if durations.iter().any(|&(d, _)| d == mach - 1) {
                    return parse_err(ln, format!("machine {mach} listed twice for one operation"));
                }
                durations.push((mach - 1, p));
            }
            ops.push(durations);
        }
        if let Some(extra) = toks.next() {
            return parse_err(ln, format!("unexpected trailing token '{extra}'"));
        }
        jobs.push(ops);
    }
    if let Some((ln, _)) = lines.next() {
        return parse_err(ln, format!("more job lines than the {n} declared in the header"));
    }
    Instance::new(m, jobs).map_err(|e| Error::Parse { line: hline, msg: e.to_string() })
}

/// Writes an instance in the standard FJSP text format (1-based machines).
pub fn emit_fjs_text(instance: &Instance) -> String {
    let total: usize = instance.ops().map(|o| o.n_compatible()).sum();
    let avg = total as f64 / instance.n_ops() as f64;
    let mut out = format!("{} {} {}\n", instance.n_jobs(), instance.n_machines(), trim_float(avg));
    for job in instance.jobs() {
        let _ = write!(out, "{}", job.len());
        for op in job {
            let _ = write!(out, " {}", op.n_compatible());
            for &(mach, p) in op.durations() {
                let _ = write!(out, " {} {}", mach + 1, p);
            }
        }
        out.push('\n');
    }
    out
}

fn trim_float(x: f64) -> String {
    let s = format!("{x:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceDoc {
    n_jobs: usize,
    n_machines: usize,
    jobs: Vec<Vec<BTreeMap<usize, Time>>>,
}

/// Canonical JSON document for an instance.
pub fn serialize_instance(instance: &Instance) -> String {
    let doc = InstanceDoc {
        n_jobs: instance.n_jobs(),
        n_machines: instance.n_machines(),
        jobs: instance
            .jobs()
            .iter()
            .map(|ops| ops.iter().map(|op| op.durations().iter().copied().collect()).collect())
            .collect(),
    };
    let mut s = serde_json::to_string(&doc).expect("instance document serializes");
    s.push('\n');
    s
}

pub fn parse_instance(bytes: &[u8]) -> Result<Instance> {
    let doc: InstanceDoc = serde_json::from_slice(bytes)?;
    if doc.n_jobs != doc.jobs.len() {
        return Err(Error::Schema(format!(
            "n_jobs is {} but {} jobs are listed",
            doc.n_jobs,
            doc.jobs.len()
        )));
    }
    let jobs = doc.jobs.into_iter().map(|ops| ops.into_iter().map(|d| d.into_iter().collect()).collect()).collect();
    Instance::new(doc.n_machines, jobs).map_err(|e| Error::Schema(e.to_string()))
}

pub fn serialize_schedule(schedule: &Schedule) -> String {
    let mut s = serde_json::to_string_pretty(schedule).expect("schedule document serializes");
    s.push('\n');
    s
}

pub fn parse_schedule(bytes: &[u8]) -> Result<Schedule> {
    Ok(serde_json::from_slice(bytes)?)
}

/// Loads an instance, choosing the format from the file extension
/// (`.json` canonical document, anything else the `.fjs` text format).
pub fn load_instance(path: &Path) -> Result<Instance> {
    let bytes = std::fs::read(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => parse_instance(&bytes),
        _ => parse_fjs_text(&bytes),
    }
}

/// File name used for generated dataset members.
pub fn dataset_file_name(config: &GenConfig, index: u64) -> String {
    format!("{}_{}x{}_{:04}.json", config.scheme.name(), config.n_jobs, config.n_machines, index)
}

/// All instance files of a dataset directory, sorted by file name.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, Instance)>> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("json" | "fjs")))
        .collect();
    entries.sort();
    entries
        .into_iter()
        .map(|p| {
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            load_instance(&p).map(|inst| (name, inst))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(scheme: Scheme, n: usize, m: usize, seed: u64) -> GenConfig {
        GenConfig::new(scheme, n, m, seed).unwrap()
    }

    #[test]
    fn sd1_bounds() {
        let c = cfg(Scheme::Sd1, 10, 5, 7);
        for idx in 0..50 {
            let inst = generate_sd(&c, idx);
            assert_eq!(inst.n_jobs(), 10);
            for job in inst.jobs() {
                assert!((4..=6).contains(&job.len()));
            }
            for op in inst.ops() {
                assert!((1..=5).contains(&op.n_compatible()));
                assert!(op.durations().iter().all(|&(m, p)| m < 5 && (1..=20).contains(&p)));
            }
        }
    }

    #[test]
    fn sd2_bounds() {
        let c = cfg(Scheme::Sd2, 10, 5, 3);
        for idx in 0..50 {
            assert!(generate_sd(&c, idx).ops().all(|op| op.durations().iter().all(|&(_, p)| (1..=99).contains(&p))));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let c = cfg(Scheme::Sd1, 10, 5, 42);
        assert_eq!(serialize_instance(&generate_sd(&c, 3)), serialize_instance(&generate_sd(&c, 3)));
        assert_ne!(generate_sd(&c, 3), generate_sd(&c, 4));
    }

    #[test]
    fn op_count_range() {
        assert_eq!(cfg(Scheme::Sd1, 1, 5, 0).op_count_range(), (4, 6));
        assert_eq!(cfg(Scheme::Sd1, 1, 3, 0).op_count_range(), (3, 4));
        assert_eq!(cfg(Scheme::Sd1, 1, 10, 0).op_count_range(), (8, 12));
        assert_eq!(cfg(Scheme::Sd1, 1, 1, 0).op_count_range(), (1, 2));
    }

    #[test]
    fn uniform_covers_range() {
        let mut rng = RngStream::new(1, 0);
        let mut hits = [0usize; 6];
        for _ in 0..6000 {
            hits[rng.uniform(1, 6) as usize - 1] += 1;
        }
        assert!(hits.iter().all(|&h| h > 800 && h < 1200), "{hits:?}");
        assert_eq!(rng.uniform(5, 5), 5);
        let x = rng.unit();
        assert!((0.0..1.0).contains(&x));
    }

    #[test]
    fn mk01_header() {
        assert_eq!(parse_fjs_header("10\t6\t2").unwrap(), (10, 6));
        assert_eq!(parse_fjs_header("10 6").unwrap(), (10, 6));
        assert!(parse_fjs_header("10").is_err());
    }

    #[test]
    fn tiny_fjs_text() {
        let inst = parse_fjs_text(b"1 1 1\n1 1 1 7\n").unwrap();
        assert_eq!(inst.n_jobs(), 1);
        assert_eq!(inst.n_machines(), 1);
        assert_eq!(inst.op(0, 0).durations(), &[(0, 7)]);
    }

    #[test]
    fn fjs_with_tabs_and_blank_lines() {
        let text = "2\t3\t1.5\n\n2\t1\t1\t4\t2\t2\t3\t3\t5\n1  1  3 9\n";
        let inst = parse_fjs_text(text.as_bytes()).unwrap();
        assert_eq!(inst.n_ops(), 3);
        assert_eq!(inst.op(0, 1).durations(), &[(1, 3), (2, 5)]);
        assert_eq!(inst.op(1, 0).durations(), &[(2, 9)]);
    }

    #[test]
    fn fjs_errors_carry_line_numbers() {
        let cases: [(&[u8], usize); 7] = [
            (b"1 2\n1 1 3 4\n", 2),
            (b"1 2\n1 1 1 0\n", 2),
            (b"1 2\n1 2 1 4\n", 2),
            (b"2 2\n1 1 1 4\n", 3),
            (b"1 2\n1 1 1 4 9\n", 2),
            (b"1 2\n1 1 1 4\n1 1 1 1\n", 3),
            (b"x 2\n", 1),
        ];
        for (text, line) in cases {
            match parse_fjs_text(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{}", String::from_utf8_lossy(text)),
                other => panic!("expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn json_round_trip_and_rejection() {
        let inst = Instance::new(1, vec![vec![vec![(0, 5)]]]).unwrap();
        let doc = serialize_instance(&inst);
        assert_eq!(doc, "{\"n_jobs\":1,\"n_machines\":1,\"jobs\":[[{\"0\":5}]]}\n");
        assert_eq!(parse_instance(doc.as_bytes()).unwrap(), inst);

        let g = generate_sd(&cfg(Scheme::Sd1, 10, 5, 0), 0);
        assert_eq!(parse_instance(serialize_instance(&g).as_bytes()).unwrap(), g);

        assert!(matches!(
            parse_instance(b"{\"n_jobs\":1,\"n_machines\":1,\"jobs\":[[{\"0\":0}]]}"),
            Err(Error::Schema(_))
        ));
        assert!(parse_instance(b"{\"n_jobs\":2,\"n_machines\":1,\"jobs\":[[{\"0\":1}]]}").is_err());
        assert!(parse_instance(b"{\"n_jobs\":1,\"n_machines\":1,\"jobs\":[[{\"0\":1}]],\"x\":1}").is_err());
    }

    #[test]
    fn schedule_document_round_trip() {
        let s = Schedule::new(vec![crate::fjsp::Assignment { job_id: 0, op_index: 0, machine_id: 1, start: 2, end: 9 }]);
        assert_eq!(parse_schedule(serialize_schedule(&s).as_bytes()).unwrap(), s);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn fjs_round_trip(seed in any::<u64>(), idx in 0u64..1000, n in 1usize..8, m in 1usize..8, sd2 in any::<bool>()) {
                let scheme = if sd2 { Scheme::Sd2 } else { Scheme::Sd1 };
                let inst = generate_sd(&GenConfig::new(scheme, n, m, seed).unwrap(), idx);
                prop_assert_eq!(parse_fjs_text(emit_fjs_text(&inst).as_bytes()).unwrap(), inst.clone());
                prop_assert_eq!(parse_instance(serialize_instance(&inst).as_bytes()).unwrap(), inst);
            }
        }
    }
}
