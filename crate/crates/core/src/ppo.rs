//! PPO-Clip training: rollouts, GAE, clipped updates, checkpoints and the
//! episode schedule (periodic instance resampling and greedy validation).
//!
//! One *episode* is one rollout-and-update step over a batch of
//! `envs_per_batch` instances.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{EnvState, FeatureBundle};
use crate::error::{Error, Result};
use crate::fjsp::{makespan, Instance, Schedule};
use crate::io::{generate_sd, GenConfig, RngStream, Scheme};
use crate::policy::{select_action, Mode, PolicyNet};
use crate::repr::NetConfig;
use crate::tensor::{AdamConfig, Graph, Grads, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub epochs_per_update: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub grad_clip_norm: f64,
    pub lr: f64,
    pub episodes: usize,
    pub envs_per_batch: usize,
    pub resample_every: usize,
    pub validate_every: usize,
    pub validation_size: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 1.0,
            gae_lambda: 0.05,
            clip_eps: 0.2,
            epochs_per_update: 4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            grad_clip_norm: 1.0,
            lr: 3e-4,
            episodes: 1000,
            envs_per_batch: 20,
            resample_every: 20,
            validate_every: 10,
            validation_size: 100,
            seed: 0,
        }
    }
}

impl PpoConfig {
    /// Defaults with the scheme's GAE lambda (0.05 for SD1, 0.2 for SD2).
    pub fn for_scheme(scheme: Scheme) -> Self {
        let gae_lambda = match scheme {
            Scheme::Sd1 => 0.05,
            Scheme::Sd2 => 0.2,
        };
        PpoConfig { gae_lambda, ..PpoConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Domain(m.to_string()));
        if !(self.gae_lambda > 0.0 && self.gae_lambda <= 1.0) {
            return bad("gae_lambda must be in (0, 1]");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must be in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must be in [0, 1]");
        }
        if self.epochs_per_update == 0 || self.envs_per_batch == 0 || self.resample_every == 0 || self.validate_every == 0 {
            return bad("epochs_per_update, envs_per_batch, resample_every and validate_every must be positive");
        }
        if self.validation_size == 0 {
            return bad("validation_size must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub bundle: FeatureBundle,
    pub cells: Vec<(usize, usize)>,
    /// Index into `cells`.
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    pub initial_estimate: f64,
    pub schedule: Schedule,
}

impl Trajectory {
    pub fn makespan(&self) -> u64 {
        makespan(&self.schedule).expect("complete episode")
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Plays one full episode with `net`.
pub fn rollout(net: &PolicyNet, instance: &Arc<Instance>, mode: Mode, rng: &mut RngStream) -> Result<Trajectory> {
    let mut state = EnvState::reset(Arc::clone(instance));
    let initial_estimate = state.est_cmax();
    let mut steps = Vec::with_capacity(instance.n_ops());
    while !state.is_done() {
        let bundle = state.extract_features();
        let candidates = state.candidates();
        let out = net.evaluate_bundle(&bundle, candidates)?;
        let (action, log_prob) = select_action(&out.probs, mode, rng);
        let outcome = state.step(out.candidates[action])?;
        steps.push(StepRecord {
            cells: bundle.feasible_cells(),
            bundle,
            action,
            log_prob,
            value: out.value,
            reward: outcome.reward,
            done: outcome.done,
        });
    }
    Ok(Trajectory { steps, initial_estimate, schedule: state.schedule() })
}

/// One episode per instance; instance `i` draws from stream `stream_base + i`.
pub fn collect_rollouts(
    net: &PolicyNet,
    instances: &[Arc<Instance>],
    mode: Mode,
    seed: u64,
    stream_base: u64,
) -> Result<Vec<Trajectory>> {
    instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| rollout(net, inst, mode, &mut RngStream::new(seed, stream_base + i as u64)))
        .collect()
}

/// Generalised advantage estimation with a zero bootstrap after `done`.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        adv[t] = delta + gamma * lambda * live * next_adv;
        next_adv = adv[t];
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

pub fn gae_advantages(traj: &Trajectory, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let rewards: Vec<f64> = traj.steps.iter().map(|s| s.reward).collect();
    let values: Vec<f64> = traj.steps.iter().map(|s| s.value).collect();
    let dones: Vec<bool> = traj.steps.iter().map(|s| s.done).collect();
    gae(&rewards, &values, &dones, gamma, lambda)
}

/// Loss terms averaged over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub actor: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Loss terms measured before each epoch's optimizer step.
    pub epochs: Vec<LossTerms>,
    pub grad_norms: Vec<f64>,
}

/// Flattened training sample.
#[derive(Clone, Debug)]
pub struct Sample<'a> {
    pub step: &'a StepRecord,
    pub advantage: f64,
    pub ret: f64,
}

/// Flattens trajectories, computing GAE per trajectory and normalising
/// advantages over the whole batch.
pub fn build_batch<'a>(trajectories: &'a [Trajectory], config: &PpoConfig) -> Vec<Sample<'a>> {
    let mut samples = Vec::new();
    for traj in trajectories {
        let (adv, ret) = gae_advantages(traj, config.gamma, config.gae_lambda);
        for ((step, a), r) in traj.steps.iter().zip(adv).zip(ret) {
            samples.push(Sample { step, advantage: a, ret: r });
        }
    }
    let n = samples.len().max(1) as f64;
    let mean = samples.iter().map(|s| s.advantage).sum::<f64>() / n;
    let var = samples.iter().map(|s| (s.advantage - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for s in &mut samples {
        s.advantage = (s.advantage - mean) / (std + 1e-8);
    }
    samples
}

const CHUNK: usize = 8;

/// Objective used by [`ppo_update`]: which actor surrogate to differentiate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Surrogate {
    Clipped(f64),
    /// `-A log pi`, the plain policy-gradient objective.
    Vanilla,
}

/// Per-sample loss scaled by `1 / n`; returns gradients and loss terms.
fn sample_loss(
    net: &PolicyNet,
    store: &ParamStore,
    sample: &Sample,
    surrogate: Surrogate,
    config: &PpoConfig,
    n: f64,
    grads: &mut Grads,
) -> Result<LossTerms> {
    let mut g = Graph::new(store);
    let fwd = net.forward(&mut g, &sample.step.bundle, &sample.step.cells)?;
    let logp = g.slice(fwd.log_probs, 0, sample.step.action, 1)?;
    let adv = g.constant(Tensor::scalar(sample.advantage));
    let (actor, ratio_value, clipped) = match surrogate {
        Surrogate::Clipped(eps) => {
            let shifted = g.add_scalar(logp, -sample.step.log_prob);
            let ratio = g.exp(shifted);
            let surr1 = g.mul(ratio, adv)?;
            let clipped_ratio = g.clamp(ratio, 1.0 - eps, 1.0 + eps);
            let surr2 = g.mul(clipped_ratio, adv)?;
            let m = g.minimum(surr1, surr2)?;
            let r = g.value(ratio).item();
            (g.scale(m, -1.0), r, (r - 1.0).abs() > eps)
        }
        Surrogate::Vanilla => {
            let prod = g.mul(logp, adv)?;
            (g.scale(prod, -1.0), 1.0, false)
        }
    };
    let target = g.constant(Tensor::scalar(sample.ret));
    let err = g.sub(fwd.value, target)?;
    let value_loss = g.square(err);
    let probs = g.exp(fwd.log_probs);
    let plogp = g.mul(probs, fwd.log_probs)?;
    let neg_entropy = g.sum(plogp);
    let v = g.scale(value_loss, config.value_coef);
    let e = g.scale(neg_entropy, config.entropy_coef);
    let av = g.add(actor, v)?;
    let total = g.add(av, e)?;
    let scaled = g.scale(total, 1.0 / n);
    g.backward_into(scaled, grads)?;
    Ok(LossTerms {
        actor: g.value(actor).item(),
        value: g.value(value_loss).item(),
        entropy: -g.value(neg_entropy).item(),
        total: g.value(total).item(),
        mean_ratio: ratio_value,
        clip_fraction: clipped as u8 as f64,
    })
}

/// Mean loss terms and summed gradients over a batch, without updating.
///
/// Samples are processed in fixed-size chunks whose partial sums are added in
/// order, so the result does not depend on the thread count.
pub fn batch_gradients(
    net: &PolicyNet,
    samples: &[Sample],
    surrogate: Surrogate,
    config: &PpoConfig,
) -> Result<(LossTerms, Grads)> {
    let n = samples.len() as f64;
    let partials: Vec<(LossTerms, Grads)> = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = Grads::zeros_like(&net.store);
            let mut acc = LossTerms::default();
            for s in chunk {
                let t = sample_loss(net, &net.store, s, surrogate, config, n, &mut grads)?;
                acc.actor += t.actor;
                acc.value += t.value;
                acc.entropy += t.entropy;
                acc.total += t.total;
                acc.mean_ratio += t.mean_ratio;
                acc.clip_fraction += t.clip_fraction;
            }
            Ok((acc, grads))
        })
        .collect::<Result<_>>()?;
    let mut grads = Grads::zeros_like(&net.store);
    let mut terms = LossTerms::default();
    for (t, g) in &partials {
        grads.add_assign(g);
        terms.actor += t.actor;
        terms.value += t.value;
        terms.entropy += t.entropy;
        terms.total += t.total;
        terms.mean_ratio += t.mean_ratio;
        terms.clip_fraction += t.clip_fraction;
    }
    for x in [
        &mut terms.actor,
        &mut terms.value,
        &mut terms.entropy,
        &mut terms.total,
        &mut terms.mean_ratio,
        &mut terms.clip_fraction,
    ] {
        *x /= n;
    }
    Ok((terms, grads))
}

/// `epochs_per_update` clipped-surrogate passes over the batch, each followed
/// by gradient-norm clipping and one Adam step.
pub fn ppo_update(net: &mut PolicyNet, trajectories: &[Trajectory], config: &PpoConfig) -> Result<LossReport> {
    let samples = build_batch(trajectories, config);
    if samples.is_empty() {
        return Err(Error::Domain("empty rollout batch".into()));
    }
    let mut report = LossReport::default();
    let adam = config.adam();
    for epoch in 0..config.epochs_per_update {
        let (terms, mut grads) = batch_gradients(net, &samples, Surrogate::Clipped(config.clip_eps), config)?;
        if !terms.total.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch}: loss terms {terms:?}")));
        }
        let norm = grads.clip_norm(config.grad_clip_norm);
        net.store.adam_step(&grads, &adam);
        report.epochs.push(terms);
        report.grad_norms.push(norm);
    }
    Ok(report)
}

pub const CHECKPOINT_FORMAT: &str = "fjsp-rl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub fingerprint: String,
    pub net_config: NetConfig,
    pub store: crate::tensor::StoreDoc,
}

pub fn save_checkpoint(net: &PolicyNet, path: &Path) -> Result<()> {
    let doc = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        fingerprint: net.config.fingerprint(),
        net_config: net.config.clone(),
        store: net.store.to_doc(),
    };
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        serde_json::to_writer(&mut f, &doc)?;
        f.write_all(b"\n")?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

/// Reads a checkpoint and rebuilds the network it describes.
///
/// With `expected` set, the stored fingerprint must match unless `force`.
pub fn load_checkpoint(path: &Path, expected: Option<&NetConfig>, force: bool) -> Result<PolicyNet> {
    let bytes = fs::read(path)?;
    let doc: Checkpoint =
        serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if doc.format != CHECKPOINT_FORMAT || doc.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint {} v{}", doc.format, doc.version)));
    }
    if doc.fingerprint != doc.net_config.fingerprint() {
        return Err(Error::Checkpoint("stored fingerprint does not match stored config".into()));
    }
    if let Some(exp) = expected {
        if exp.fingerprint() != doc.fingerprint && !force {
            return Err(Error::Checkpoint(format!(
                "network config mismatch: checkpoint has '{}', expected '{}'",
                doc.fingerprint,
                exp.fingerprint()
            )));
        }
    }
    let store = ParamStore::from_doc(doc.store)?;
    PolicyNet::new(doc.net_config, 0)?.with_store(store)
}

/// Which episodes resample the training batch and which run validation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodePlan {
    pub resample_at: Vec<usize>,
    pub validate_at: Vec<usize>,
}

impl EpisodePlan {
    /// Episodes are numbered from 1. A batch is drawn before episodes
    /// `1, 1 + r, 1 + 2r, ...`; validation runs after episodes `v, 2v, ...`.
    pub fn new(config: &PpoConfig) -> Self {
        EpisodePlan {
            resample_at: (1..=config.episodes).step_by(config.resample_every).collect(),
            validate_at: (config.validate_every..=config.episodes).step_by(config.validate_every).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: usize,
    pub mean_validation_makespan: f64,
}

#[derive(Clone, Debug)]
pub struct TrainSpec {
    pub scheme: Scheme,
    pub n_jobs: usize,
    pub n_machines: usize,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub final_net: PolicyNet,
    pub best_net: PolicyNet,
    pub best_validation: f64,
    pub final_validation: Option<f64>,
    pub curve: Vec<CurvePoint>,
    pub batches_drawn: usize,
}

const TRAIN_STREAM: u64 = 1;
const VALIDATION_STREAM: u64 = 2;
const ROLLOUT_SEED_STREAM: u64 = 3;

/// Seed-derived validation instances, frozen for a run.
pub fn validation_set(task: &TrainSpec, config: &PpoConfig) -> Result<Vec<Arc<Instance>>> {
    let gen_seed = RngStream::new(config.seed, VALIDATION_STREAM).next_u64();
    let gen = GenConfig::new(task.scheme, task.n_jobs, task.n_machines, gen_seed)?;
    Ok((0..config.validation_size as u64).map(|i| Arc::new(generate_sd(&gen, i))).collect())
}

/// Mean greedy makespan of `net` over `instances`.
pub fn greedy_mean_makespan(net: &PolicyNet, instances: &[Arc<Instance>]) -> Result<f64> {
    let trajs = collect_rollouts(net, instances, Mode::Greedy, 0, 0)?;
    Ok(trajs.iter().map(|t| t.makespan() as f64).sum::<f64>() / trajs.len() as f64)
}

/// Full training run. `on_validation` observes every curve point as it is
/// produced.
pub fn train(
    task: &TrainSpec,
    config: &PpoConfig,
    net_config: &NetConfig,
    mut on_validation: impl FnMut(&CurvePoint),
) -> Result<TrainResult> {
    config.validate()?;
    let mut net = PolicyNet::new(net_config.clone(), config.seed)?;
    let plan = EpisodePlan::new(config);
    let train_seed = RngStream::new(config.seed, TRAIN_STREAM).next_u64();
    let gen = GenConfig::new(task.scheme, task.n_jobs, task.n_machines, train_seed)?;
    let rollout_seed = RngStream::new(config.seed, ROLLOUT_SEED_STREAM).next_u64();
    let validation = validation_set(task, config)?;

    let mut batch: Vec<Arc<Instance>> = Vec::new();
    let mut batches_drawn = 0;
    let mut curve = Vec::new();
    let mut best: Option<(f64, PolicyNet)> = None;
    let mut final_validation = None;
    let (mut next_resample, mut next_validate) = (plan.resample_at.iter().peekable(), plan.validate_at.iter().peekable());

    for episode in 1..=config.episodes {
        if next_resample.next_if(|&&e| e == episode).is_some() {
            let base = (batches_drawn * config.envs_per_batch) as u64;
            batch = (0..config.envs_per_batch as u64).map(|i| Arc::new(generate_sd(&gen, base + i))).collect();
            batches_drawn += 1;
        }
        let stream = (episode * config.envs_per_batch) as u64;
        let trajectories = collect_rollouts(&net, &batch, Mode::Sampling, rollout_seed, stream)?;
        ppo_update(&mut net, &trajectories, config)?;

        if next_validate.next_if(|&&e| e == episode).is_some() {
            let score = greedy_mean_makespan(&net, &validation)?;
            let point = CurvePoint { episode, mean_validation_makespan: score };
            on_validation(&point);
            curve.push(point);
            final_validation = Some(score);
            if best.as_ref().is_none_or(|(b, _)| score < *b) {
                best = Some((score, net.clone()));
            }
        }
    }
    let (best_validation, best_net) = match best {
        Some(b) => b,
        None => (greedy_mean_makespan(&net, &validation)?, net.clone()),
    };
    Ok(TrainResult { final_net: net, best_net, best_validation, final_validation, curve, batches_drawn })
}

/// Writes `final.json`, `best.json` and `curve.jsonl` into `dir`.
pub fn write_training_outputs(result: &TrainResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_checkpoint(&result.final_net, &dir.join("final.json"))?;
    save_checkpoint(&result.best_net, &dir.join("best.json"))?;
    let mut log = String::new();
    for p in &result.curve {
        log.push_str(&serde_json::to_string(p)?);
        log.push('\n');
    }
    fs::write(dir.join("curve.jsonl"), log)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fjsp::validate_schedule;

    fn small_instances(n: usize, seed: u64) -> Vec<Arc<Instance>> {
        let gen = GenConfig::new(Scheme::Sd1, 3, 3, seed).unwrap();
        (0..n as u64).map(|i| Arc::new(generate_sd(&gen, i))).collect()
    }

    fn small_net() -> NetConfig {
        NetConfig { scale_dims: vec![8, 4], actor_hidden: vec![16, 8], critic_hidden: vec![16, 8], ..NetConfig::default() }
    }

    #[test]
    fn default_config_values() {
        let c = PpoConfig::default();
        assert_eq!((c.gamma, c.clip_eps, c.epochs_per_update, c.lr), (1.0, 0.2, 4, 3e-4));
        assert_eq!((c.episodes, c.envs_per_batch, c.resample_every, c.validate_every), (1000, 20, 20, 10));
        assert_eq!(PpoConfig::for_scheme(Scheme::Sd1).gae_lambda, 0.05);
        assert_eq!(PpoConfig::for_scheme(Scheme::Sd2).gae_lambda, 0.2);
        assert!(c.validate().is_ok());
        assert!(PpoConfig { gae_lambda: 0.0, ..c.clone() }.validate().is_err());
        assert!(PpoConfig { clip_eps: 1.0, ..c }.validate().is_err());
    }

    #[test]
    fn episode_plan_arithmetic() {
        let plan = EpisodePlan::new(&PpoConfig::default());
        assert_eq!(plan.resample_at.len(), 50);
        assert_eq!(plan.validate_at.len(), 100);
        assert_eq!(plan.resample_at[..3], [1, 21, 41]);
        assert_eq!(*plan.validate_at.last().unwrap(), 1000);
    }

    #[test]
    fn gae_closed_forms() {
        let (a, r) = gae(&[2.5], &[1.0], &[true], 1.0, 0.05);
        assert_eq!((a[0], r[0]), (1.5, 2.5));

        let rewards = [1.0, -2.0, 0.5, 3.0];
        let values = [0.3, 0.1, -0.7, 2.0];
        let dones = [false, false, false, true];
        let (a, r) = gae(&rewards, &values, &dones, 1.0, 1.0);
        for t in 0..4 {
            let mc: f64 = rewards[t..].iter().sum();
            assert!((a[t] - (mc - values[t])).abs() < 1e-12);
            assert!((r[t] - mc).abs() < 1e-12);
        }
        let (a, _) = gae(&rewards, &values, &dones, 0.9, 0.0);
        for t in 0..4 {
            let next = if t == 3 { 0.0 } else { values[t + 1] };
            assert!((a[t] - (rewards[t] + 0.9 * next - values[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn rollouts_are_complete_feasible_and_deterministic() {
        let net = PolicyNet::new(small_net(), 0).unwrap();
        let inst = small_instances(4, 1);
        let a = collect_rollouts(&net, &inst, Mode::Sampling, 7, 0).unwrap();
        let b = collect_rollouts(&net, &inst, Mode::Sampling, 7, 0).unwrap();
        for ((t, u), i) in a.iter().zip(&b).zip(&inst) {
            assert_eq!(t.steps.len(), i.n_ops());
            assert!(t.steps.last().unwrap().done);
            assert!(validate_schedule(i, &t.schedule).is_empty());
            assert!((t.total_reward() - (t.initial_estimate - t.makespan() as f64)).abs() <= 1e-9);
            assert_eq!(t.schedule, u.schedule);
        }
    }

    fn trained_once(config: &PpoConfig) -> (PolicyNet, Vec<Trajectory>) {
        let mut net = PolicyNet::new(small_net(), 3).unwrap();
        // one warm-up update so output layers are non-zero
        let inst = small_instances(4, 2);
        let t = collect_rollouts(&net, &inst, Mode::Sampling, 1, 0).unwrap();
        ppo_update(&mut net, &t, &PpoConfig { epochs_per_update: 2, lr: 1e-2, ..config.clone() }).unwrap();
        let t = collect_rollouts(&net, &inst, Mode::Sampling, 2, 0).unwrap();
        (net, t)
    }

    #[test]
    fn first_epoch_has_unit_ratio() {
        let config = PpoConfig::default();
        let (mut net, trajs) = trained_once(&config);
        let report = ppo_update(&mut net, &trajs, &config).unwrap();
        assert!((report.epochs[0].mean_ratio - 1.0).abs() < 1e-12);
        assert_eq!(report.epochs[0].clip_fraction, 0.0);
        assert_eq!(report.epochs.len(), 4);
    }

    #[test]
    fn zero_advantages_give_zero_actor_loss() {
        let config = PpoConfig::default();
        let (net, trajs) = trained_once(&config);
        let mut samples = build_batch(&trajs, &config);
        samples.iter_mut().for_each(|s| s.advantage = 0.0);
        let (terms, _) = batch_gradients(&net, &samples, Surrogate::Clipped(0.2), &config).unwrap();
        assert_eq!(terms.actor, 0.0);
    }

    #[test]
    fn advantages_are_normalised() {
        let config = PpoConfig::default();
        let (_, trajs) = trained_once(&config);
        let samples = build_batch(&trajs, &config);
        let n = samples.len() as f64;
        let mean = samples.iter().map(|s| s.advantage).sum::<f64>() / n;
        let var = samples.iter().map(|s| (s.advantage - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn unclipped_single_epoch_matches_vanilla_gradient() {
        let config = PpoConfig::default();
        let (net, trajs) = trained_once(&config);
        let samples = build_batch(&trajs, &config);
        let (_, a) = batch_gradients(&net, &samples, Surrogate::Clipped(1e12), &config).unwrap();
        let (_, b) = batch_gradients(&net, &samples, Surrogate::Vanilla, &config).unwrap();
        for id in net.store.ids() {
            for (x, y) in a.get(id).data().iter().zip(b.get(id).data()) {
                assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn small_step_decreases_batch_loss() {
        let config = PpoConfig { lr: 1e-4, epochs_per_update: 1, ..PpoConfig::default() };
        let (mut net, trajs) = trained_once(&config);
        let samples = build_batch(&trajs, &config);
        let (before, _) = batch_gradients(&net, &samples, Surrogate::Clipped(config.clip_eps), &config).unwrap();
        ppo_update(&mut net, &trajs, &config).unwrap();
        let samples = build_batch(&trajs, &config);
        let (after, _) = batch_gradients(&net, &samples, Surrogate::Clipped(config.clip_eps), &config).unwrap();
        assert!(after.total < before.total, "{} -> {}", before.total, after.total);
    }

    #[test]
    fn checkpoint_round_trip_and_guards() {
        let dir = tempfile::tempdir().unwrap();
        let config = PpoConfig::default();
        let (net, _) = trained_once(&config);
        let path = dir.path().join("ck.json");
        save_checkpoint(&net, &path).unwrap();
        let back = load_checkpoint(&path, Some(&net.config), false).unwrap();
        assert!(back.store.bit_eq(&net.store));
        let s = EnvState::reset(small_instances(1, 9)[0].clone());
        let (a, b) = (net.evaluate(&s).unwrap(), back.evaluate(&s).unwrap());
        assert!(a.logits.iter().zip(&b.logits).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.value.to_bits(), b.value.to_bits());

        let other = NetConfig { scale_dims: vec![8, 8], ..net.config.clone() };
        assert!(matches!(load_checkpoint(&path, Some(&other), false), Err(Error::Checkpoint(_))));
        assert!(load_checkpoint(&path, Some(&other), true).is_ok());

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path, None, false), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn training_is_reproducible_and_best_not_worse() {
        let task = TrainSpec { scheme: Scheme::Sd1, n_jobs: 3, n_machines: 3 };
        let config = PpoConfig {
            episodes: 6,
            envs_per_batch: 3,
            resample_every: 4,
            validate_every: 2,
            validation_size: 5,
            ..PpoConfig::default()
        };
        let a = train(&task, &config, &small_net(), |_| {}).unwrap();
        let b = train(&task, &config, &small_net(), |_| {}).unwrap();
        assert_eq!(a.curve.len(), 3);
        assert_eq!(a.batches_drawn, 2);
        assert!(a.curve.iter().zip(&b.curve).all(|(p, q)| p.mean_validation_makespan.to_bits()
            == q.mean_validation_makespan.to_bits()));
        assert!(a.final_net.store.bit_eq(&b.final_net.store));
        assert!(a.best_validation <= a.final_validation.unwrap());
        assert_eq!(greedy_mean_makespan(&a.best_net, &validation_set(&task, &config).unwrap()).unwrap(), a.best_validation);
    }

    #[test]
    fn seeds_give_independent_checkpoints() {
        let task = TrainSpec { scheme: Scheme::Sd1, n_jobs: 3, n_machines: 3 };
        let nets: Vec<PolicyNet> = (0..5)
            .map(|seed| {
                let config = PpoConfig { episodes: 1, envs_per_batch: 2, validation_size: 2, seed, ..PpoConfig::default() };
                train(&task, &config, &small_net(), |_| {}).unwrap().final_net
            })
            .collect();
        for i in 0..5 {
            for j in i + 1..5 {
                assert!(!nets[i].store.bit_eq(&nets[j].store));
            }
        }
    }
}
