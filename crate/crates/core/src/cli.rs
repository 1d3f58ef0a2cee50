//! The `fjsp` command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::baselines::{dispatch_solve_seeded, exact_solve, DispatchRule, EXACT_MAX_OPS};
use crate::error::{Error, Result};
use crate::fjsp::{makespan, validate_schedule, Instance, Schedule};
use crate::io::{
    dataset_file_name, emit_fjs_text, generate_sd, load_dataset, load_instance, parse_schedule, serialize_instance,
    serialize_schedule, GenConfig, Scheme,
};
use crate::policy::Mode;
use crate::ppo::{load_checkpoint, train, write_training_outputs, PpoConfig, TrainSpec};
use crate::repr::NetConfig;
use crate::report::{aggregate_seeds, emit_gantt, evaluate_dataset, load_reference, RunReport};

/// Environment variable holding the worker-thread count.
pub const THREADS_ENV: &str = "FJSP_THREADS";

#[derive(Parser, Debug)]
#[command(name = "fjsp", version, about = "Flexible job-shop scheduling with a learned dispatcher")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a policy with PPO.
    Train(TrainArgs),
    /// Evaluate checkpoints or a dispatch rule on a dataset.
    Eval(EvalArgs),
    /// Solve one instance with a rule or the exact search.
    Solve(SolveArgs),
    /// Check a schedule against an instance.
    Validate(ValidateArgs),
    /// Draw a schedule as an SVG Gantt chart.
    Gantt(GanttArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    scheme: Scheme,
    #[arg(long)]
    jobs: usize,
    #[arg(long)]
    machines: usize,
    #[arg(long, default_value_t = 100)]
    count: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// `json` or `fjs`.
    #[arg(long, default_value = "json")]
    format: String,
}

#[derive(Args, Debug, Default)]
struct NetArgs {
    /// JSON network config; individual flags below override it.
    #[arg(long)]
    net_config: Option<PathBuf>,
    /// Comma-separated embedding widths, one per scale.
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<usize>>,
    #[arg(long)]
    no_attn: bool,
    #[arg(long)]
    no_conv: bool,
    #[arg(long)]
    no_cross_attn: bool,
    #[arg(long)]
    no_deep_supervision: bool,
}

impl NetArgs {
    fn given(&self) -> bool {
        self.net_config.is_some()
            || self.scales.is_some()
            || self.no_attn
            || self.no_conv
            || self.no_cross_attn
            || self.no_deep_supervision
    }

    fn resolve(&self) -> Result<NetConfig> {
        let mut c = match &self.net_config {
            Some(p) => serde_json::from_slice(&fs::read(p)?).map_err(|e| Error::Schema(format!("{}: {e}", p.display())))?,
            None => NetConfig::default(),
        };
        if let Some(s) = &self.scales {
            c.scale_dims = s.clone();
        }
        c.attn &= !self.no_attn;
        c.conv &= !self.no_conv;
        c.cross_attn &= !self.no_cross_attn;
        c.deep_supervision &= !self.no_deep_supervision;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    scheme: Scheme,
    #[arg(long)]
    jobs: usize,
    #[arg(long)]
    machines: usize,
    /// JSON file with PPO settings; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    envs_per_batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    net: NetArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Dataset directory of `.json` / `.fjs` instances.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file; repeat for one run per seed.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    /// Evaluate `rule:<name>` or `exact` instead of a checkpoint.
    #[arg(long)]
    algo: Option<String>,
    #[arg(long, default_value = "greedy")]
    mode: Mode,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON object mapping instance name to reference makespan.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Write line-delimited JSON records here.
    #[arg(long)]
    jsonl: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    net: NetArgs,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[arg(long)]
    instance: PathBuf,
    /// `rule:<spt|fifo-spt|mwkr-spt|random>` or `exact`.
    #[arg(long)]
    algo: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10_000_000)]
    node_limit: u64,
    /// Allow the exact search on instances above the size guard.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    schedule: PathBuf,
}

#[derive(Args, Debug)]
struct GanttArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    schedule: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

enum Algo {
    Rule(DispatchRule),
    Exact,
}

impl Algo {
    fn parse(s: &str) -> Result<Algo> {
        if s == "exact" {
            return Ok(Algo::Exact);
        }
        match s.strip_prefix("rule:") {
            Some(rule) => Ok(Algo::Rule(rule.parse()?)),
            None => Err(Error::Domain(format!("unknown algorithm '{s}': use rule:<name> or exact"))),
        }
    }

    fn solve(&self, instance: &Arc<Instance>, seed: u64, node_limit: u64, force: bool) -> Result<Schedule> {
        match self {
            Algo::Rule(rule) => Ok(dispatch_solve_seeded(instance, *rule, seed)),
            Algo::Exact => {
                if instance.n_ops() > EXACT_MAX_OPS && !force {
                    return Err(Error::Domain(format!(
                        "instance has {} operations; the exact search is meant for at most {EXACT_MAX_OPS}. \
                         Use --algo rule:<name>, or pass --force to search anyway",
                        instance.n_ops()
                    )));
                }
                let r = exact_solve(instance, node_limit);
                if !r.optimal {
                    eprintln!("node limit reached; schedule is the best found, not proven optimal");
                }
                Ok(r.schedule)
            }
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns 0 on success, 1 on a domain error and 2 on a usage error.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    configure_threads();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Solve(a) => solve(a),
        Command::Validate(a) => validate(a),
        Command::Gantt(a) => gantt(a),
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let cfg = GenConfig::new(a.scheme, a.jobs, a.machines, a.seed)?;
    let fjs = match a.format.as_str() {
        "json" => false,
        "fjs" => true,
        other => return Err(Error::Domain(format!("unknown format '{other}' (json, fjs)"))),
    };
    fs::create_dir_all(&a.out)?;
    for i in 0..a.count {
        let inst = generate_sd(&cfg, i);
        let name = dataset_file_name(&cfg, i);
        if fjs {
            fs::write(a.out.join(Path::new(&name).with_extension("fjs")), emit_fjs_text(&inst))?;
        } else {
            fs::write(a.out.join(name), serialize_instance(&inst))?;
        }
    }
    println!("wrote {} instances to {}", a.count, a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => serde_json::from_slice(&fs::read(p)?).map_err(|e| Error::Schema(format!("{}: {e}", p.display())))?,
        None => PpoConfig::for_scheme(a.scheme),
    };
    if let Some(e) = a.episodes {
        config.episodes = e;
    }
    if let Some(e) = a.envs_per_batch {
        config.envs_per_batch = e;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let net = a.net.resolve()?;
    let task = TrainSpec { scheme: a.scheme, n_jobs: a.jobs, n_machines: a.machines };
    let clock = Instant::now();
    let result = train(&task, &config, &net, |p| {
        eprintln!("episode {:>5}  validation makespan {:.3}", p.episode, p.mean_validation_makespan)
    })?;
    write_training_outputs(&result, &a.out)?;
    fs::write(a.out.join("ppo_config.json"), serde_json::to_string_pretty(&config)?)?;
    println!(
        "trained {} episodes in {:.1}s; best validation makespan {:.3}; outputs in {}",
        config.episodes,
        clock.elapsed().as_secs_f64(),
        result.best_validation,
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let dataset: Vec<(String, Arc<Instance>)> =
        load_dataset(&a.data)?.into_iter().map(|(n, i)| (n, Arc::new(i))).collect();
    if dataset.is_empty() {
        return Err(Error::Domain(format!("no instances in {}", a.data.display())));
    }
    let reference = a.reference.as_deref().map(load_reference).transpose()?;
    let mut reports = Vec::new();
    match (&a.algo, a.checkpoint.is_empty()) {
        (Some(_), false) => return Err(Error::Domain("give either --checkpoint or --algo, not both".into())),
        (None, true) => return Err(Error::Domain("give --checkpoint or --algo".into())),
        (Some(algo), true) => {
            let solver = Algo::parse(algo)?;
            let mut rows = Vec::with_capacity(dataset.len());
            for (name, inst) in &dataset {
                let clock = Instant::now();
                let s = solver.solve(inst, a.seed, 10_000_000, a.force)?;
                rows.push((name.clone(), makespan(&s)? as f64, clock.elapsed().as_secs_f64()));
            }
            reports.push(RunReport::new(algo, &format!("seed={}", a.seed), &rows, reference.as_ref())?);
        }
        (None, false) => {
            let expected = a.net.given().then(|| a.net.resolve()).transpose()?;
            for path in &a.checkpoint {
                let net = load_checkpoint(path, expected.as_ref(), a.force)?;
                let records = evaluate_dataset(&net, &dataset, a.mode, a.samples, a.seed)?;
                let settings = match a.mode {
                    Mode::Greedy => format!("greedy seed={}", a.seed),
                    Mode::Sampling => format!("sampling n_samples={} seed={}", a.samples, a.seed),
                };
                reports.push(RunReport::from_records(&path.display().to_string(), &settings, &records, reference.as_ref())?);
            }
        }
    }
    let mut jsonl = String::new();
    for r in &reports {
        print!("{}", r.render());
        jsonl.push_str(&r.to_jsonl()?);
    }
    if reports.len() > 1 {
        let agg = aggregate_seeds(&reports)?;
        println!("across {} runs: mean {:.3}, std {:.3}", agg.n_runs, agg.mean, agg.std);
        jsonl.push_str(&serde_json::to_string(&serde_json::json!({"record": "seeds", "aggregate": agg}))?);
        jsonl.push('\n');
    }
    if let Some(p) = &a.jsonl {
        fs::write(p, jsonl)?;
    }
    Ok(())
}

fn solve(a: SolveArgs) -> Result<()> {
    let inst = Arc::new(load_instance(&a.instance)?);
    let schedule = Algo::parse(&a.algo)?.solve(&inst, a.seed, a.node_limit, a.force)?;
    let text = serialize_schedule(&schedule);
    match &a.out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    eprintln!("makespan {}", makespan(&schedule)?);
    Ok(())
}

fn validate(a: ValidateArgs) -> Result<()> {
    let inst = load_instance(&a.instance)?;
    let schedule = parse_schedule(&fs::read(&a.schedule)?)?;
    let violations = validate_schedule(&inst, &schedule);
    if violations.is_empty() {
        println!("feasible; makespan {}", makespan(&schedule)?);
        return Ok(());
    }
    for v in &violations {
        println!("{v:?}");
    }
    Err(Error::Domain(format!("{} violation(s)", violations.len())))
}

fn gantt(a: GanttArgs) -> Result<()> {
    let inst = load_instance(&a.instance)?;
    let schedule = parse_schedule(&fs::read(&a.schedule)?)?;
    fs::write(&a.out, emit_gantt(&inst, &schedule)?)?;
    Ok(())
}
