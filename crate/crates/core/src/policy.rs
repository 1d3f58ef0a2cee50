//! Pair-wise aggregation of learned representations, actor/critic heads and
//! the masked stochastic policy over candidate `(operation, machine)` pairs.

use serde::{Deserialize, Serialize};

use crate::env::{CandidatePair, EnvState, FeatureBundle};
use crate::error::{Error, Result};
use crate::io::RngStream;
use crate::repr::{add_linear, forward_scales, Linear, Module, NetConfig, RepSet, ScaleParams};
use crate::tensor::{masked_softmax, Graph, ParamStore, Var};

/// Feed-forward head with tanh hidden layers and a scalar output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    fn build(
        store: &mut ParamStore,
        rng: &mut RngStream,
        name: &str,
        input: usize,
        hidden: &[usize],
    ) -> Result<Self> {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let last = widths.len() - 2;
        let layers = (0..widths.len() - 1)
            .map(|i| add_linear(store, rng, &format!("{name}.l{i}"), widths[i], widths[i + 1], i == last))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }
}

/// Actor and critic for one `(module, scale)` combination.
#[derive(Clone, Debug)]
pub struct Head {
    pub module: Module,
    pub scale: usize,
    pub actor: Mlp,
    pub critic: Mlp,
}

/// Aggregated pair representation for one `(module, scale)`: a `P x 6d`
/// matrix with blocks `[h_op, h_ma, m_op, m_ma, pooled m_op, pooled m_ma]`.
#[derive(Clone, Copy, Debug)]
pub struct AggregatedPairReps {
    pub module: Module,
    pub scale: usize,
    pub pairs: Var,
    /// `1 x 2d`: pooled operation block then pooled machine block.
    pub pooled: Var,
}

/// Builds the per-pair decision vectors for every `(module, scale)`.
///
/// `cells` lists `(eligible row, machine)` for each candidate. Operation
/// pooling runs over the eligible (front) operations only; machine pooling
/// over all machines.
pub fn aggregate_pairs(
    g: &mut Graph,
    reps: &[RepSet],
    bundle: &FeatureBundle,
    cells: &[(usize, usize)],
    modules: &[Module],
) -> Result<Vec<AggregatedPairReps>> {
    if cells.is_empty() {
        return Err(Error::Domain("no candidate pairs to aggregate".into()));
    }
    if bundle.eligible_ops.is_empty() {
        return Err(Error::Domain("no eligible operations".into()));
    }
    let op_rows: Vec<usize> = cells.iter().map(|&(r, _)| bundle.eligible_ops[r]).collect();
    let ma_rows: Vec<usize> = cells.iter().map(|&(_, m)| m).collect();
    let zeros = vec![0usize; cells.len()];
    let mut out = Vec::new();
    for (scale, rep) in reps.iter().enumerate() {
        let h_op = g.gather_rows(rep.h.op, &op_rows)?;
        let h_ma = g.gather_rows(rep.h.ma, &ma_rows)?;
        for &module in modules {
            let m = rep.module(module);
            let eligible = g.gather_rows(m.op, &bundle.eligible_ops)?;
            let pool_op = g.mean_rows(eligible)?;
            let pool_ma = g.mean_rows(m.ma)?;
            let pooled = g.concat(&[pool_op, pool_ma], 1)?;
            let blocks = [
                h_op,
                h_ma,
                g.gather_rows(m.op, &op_rows)?,
                g.gather_rows(m.ma, &ma_rows)?,
                g.gather_rows(pool_op, &zeros)?,
                g.gather_rows(pool_ma, &zeros)?,
            ];
            let pairs = g.concat(&blocks, 1)?;
            out.push(AggregatedPairReps { module, scale, pairs, pooled });
        }
    }
    Ok(out)
}

/// Evaluation mode for action selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Greedy,
    Sampling,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Mode::Greedy),
            "sampling" => Ok(Mode::Sampling),
            other => Err(Error::Domain(format!("unknown mode '{other}' (expected greedy or sampling)"))),
        }
    }
}

/// Masked softmax over the full `eligible x machines` grid.
pub fn policy_distribution(logits: &[f64], pair_mask: &[bool]) -> Result<Vec<f64>> {
    masked_softmax(logits, pair_mask)
}

/// Picks an index from `probs`; greedy ties go to the lowest index.
/// Returns the index and `ln probs[index]`.
pub fn select_action(probs: &[f64], mode: Mode, rng: &mut RngStream) -> (usize, f64) {
    let idx = match mode {
        Mode::Greedy => {
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            best
        }
        Mode::Sampling => {
            let u = rng.unit();
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &p) in probs.iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                acc += p;
                pick = Some(i);
                if u < acc {
                    break;
                }
            }
            pick.expect("distribution has positive mass")
        }
    };
    (idx, probs[idx].ln())
}

/// Graph handles from one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `P x 1` logits, one per candidate.
    pub logits: Var,
    /// `P x 1` log-probabilities.
    pub log_probs: Var,
    /// `1 x 1` state value.
    pub value: Var,
    pub n_actors: usize,
}

/// Values of one policy evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub candidates: Vec<CandidatePair>,
    pub logits: Vec<f64>,
    /// Probabilities per candidate.
    pub probs: Vec<f64>,
    /// Probabilities over the `eligible x machines` grid; infeasible cells are 0.
    pub grid_probs: Vec<f64>,
    pub value: f64,
}

/// All network parameters and their layout.
#[derive(Clone, Debug)]
pub struct PolicyNet {
    pub config: NetConfig,
    pub scales: Vec<ScaleParams>,
    pub heads: Vec<Head>,
    pub store: ParamStore,
}

impl PolicyNet {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(seed, 0x5eed);
        let n_scales = config.active_dims().len();
        let scales =
            (0..n_scales).map(|s| ScaleParams::build(&config, s, &mut store, &mut rng)).collect::<Result<Vec<_>>>()?;
        let mut heads = Vec::new();
        for (scale, sp) in scales.iter().enumerate() {
            for module in config.enabled_modules() {
                let name = format!("scale{scale}.{}", module.name());
                heads.push(Head {
                    module,
                    scale,
                    actor: Mlp::build(&mut store, &mut rng, &format!("{name}.actor"), 6 * sp.dim, &config.actor_hidden)?,
                    critic: Mlp::build(&mut store, &mut rng, &format!("{name}.critic"), 2 * sp.dim, &config.critic_hidden)?,
                });
            }
        }
        Ok(PolicyNet { config, scales, heads, store })
    }

    /// Re-binds a parameter store (e.g. a loaded checkpoint) after checking
    /// that names and shapes match this layout.
    pub fn with_store(mut self, store: ParamStore) -> Result<Self> {
        if store.len() != self.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, network expects {}",
                store.len(),
                self.store.len()
            )));
        }
        for id in self.store.ids() {
            let other = store.id(self.store.name(id));
            if other != Some(id) || store.get(id).shape() != self.store.get(id).shape() {
                return Err(Error::Checkpoint(format!("parameter '{}' missing or misshaped", self.store.name(id))));
            }
        }
        self.store = store;
        Ok(self)
    }

    pub fn n_parameters(&self) -> usize {
        self.store.n_scalars()
    }

    /// Records the full forward pass on `g` for the given candidate cells.
    pub fn forward(&self, g: &mut Graph, bundle: &FeatureBundle, cells: &[(usize, usize)]) -> Result<Forward> {
        let reps = forward_scales(g, bundle, &self.scales, &self.config)?;
        let modules = self.config.enabled_modules();
        let agg = aggregate_pairs(g, &reps, bundle, cells, &modules)?;
        self.score(g, &agg, cells.len())
    }

    /// Sums actor scores into logits and critic outputs into the state value.
    pub fn score(&self, g: &mut Graph, agg: &[AggregatedPairReps], n_pairs: usize) -> Result<Forward> {
        let mut actor_terms = Vec::with_capacity(self.heads.len());
        let mut critic_terms = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let a = agg
                .iter()
                .find(|a| a.module == head.module && a.scale == head.scale)
                .ok_or_else(|| Error::Domain("missing aggregated representation for a head".into()))?;
            actor_terms.push(head.actor.forward(g, a.pairs)?);
            critic_terms.push(head.critic.forward(g, a.pooled)?);
        }
        let (logits, value) = if actor_terms.is_empty() {
            let zero_logits = g.constant(crate::tensor::Tensor::zeros(&[n_pairs, 1]));
            (zero_logits, g.constant(crate::tensor::Tensor::scalar(0.0)))
        } else {
            let mut logits = actor_terms[0];
            for &t in &actor_terms[1..] {
                logits = g.add(logits, t)?;
            }
            let mut value = critic_terms[0];
            for &t in &critic_terms[1..] {
                value = g.add(value, t)?;
            }
            (logits, value)
        };
        let log_probs = g.log_softmax(logits)?;
        Ok(Forward { logits, log_probs, value, n_actors: actor_terms.len() })
    }

    /// Inference-mode evaluation of a state.
    pub fn evaluate(&self, state: &EnvState) -> Result<PolicyOutput> {
        let bundle = state.extract_features();
        self.evaluate_bundle(&bundle, state.candidates())
    }

    pub fn evaluate_bundle(&self, bundle: &FeatureBundle, candidates: Vec<CandidatePair>) -> Result<PolicyOutput> {
        let cells = bundle.feasible_cells();
        if cells.is_empty() {
            return Err(Error::Domain("no feasible action in a terminal state".into()));
        }
        let mut g = Graph::new(&self.store);
        let fwd = self.forward(&mut g, bundle, &cells)?;
        let logits = g.value(fwd.logits).data().to_vec();
        let m = bundle.n_machines();
        let mut grid_logits = vec![0.0; bundle.pair_mask.len()];
        for (&(r, mach), &l) in cells.iter().zip(&logits) {
            grid_logits[r * m + mach] = l;
        }
        let grid_probs = policy_distribution(&grid_logits, &bundle.pair_mask)?;
        let probs = cells.iter().map(|&(r, mach)| grid_probs[r * m + mach]).collect();
        Ok(PolicyOutput { candidates, logits, probs, grid_probs, value: g.value(fwd.value).item() })
    }
}
