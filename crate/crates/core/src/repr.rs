//! Representation learning: entity embeddings, intra-entity self-attention and
//! convolution, and inter-entity cross-attention, replicated per scale.
//!
//! Scales run in parallel on the same raw features and share no parameters.
//! A disabled module passes its input through unchanged.

use serde::{Deserialize, Serialize};

use crate::env::{FeatureBundle, MACHINE_FEATURES, OP_FEATURES};
use crate::error::{Error, Result};
use crate::io::RngStream;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Neighbourhood used by operation self-attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpGraph {
    /// Self-loop plus predecessor and successor within the same job.
    #[default]
    Precedence,
    /// Every operation attends to every operation.
    Complete,
}

/// Learning modules; the order here is the order of actor/critic heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Module {
    Attn,
    Conv,
    CrossAttn,
}

impl Module {
    pub const ALL: [Module; 3] = [Module::Attn, Module::Conv, Module::CrossAttn];

    pub fn name(self) -> &'static str {
        match self {
            Module::Attn => "attn",
            Module::Conv => "conv",
            Module::CrossAttn => "c-attn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub scale_dims: Vec<usize>,
    pub n_heads: usize,
    /// Ablation axis `a`.
    pub attn: bool,
    /// Ablation axis `c`.
    pub conv: bool,
    /// Ablation axis `x`.
    pub cross_attn: bool,
    /// Ablation axis `s`: when off only the first scale is built and scored.
    pub deep_supervision: bool,
    pub op_graph: OpGraph,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            scale_dims: vec![32, 8],
            n_heads: 4,
            attn: true,
            conv: true,
            cross_attn: true,
            deep_supervision: true,
            op_graph: OpGraph::Precedence,
            actor_hidden: vec![64, 32],
            critic_hidden: vec![64, 32],
            leaky_slope: 0.2,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Domain(msg));
        if self.scale_dims.is_empty() || self.scale_dims.len() > 8 {
            return bad(format!("between 1 and 8 scales required, got {}", self.scale_dims.len()));
        }
        if self.n_heads == 0 {
            return bad("at least one attention head required".into());
        }
        if let Some(d) = self.scale_dims.iter().find(|&&d| d == 0 || d % self.n_heads != 0) {
            return bad(format!("scale width {d} is not a positive multiple of {} heads", self.n_heads));
        }
        if self.actor_hidden.contains(&0) || self.critic_hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        Ok(())
    }

    pub fn enabled(&self, module: Module) -> bool {
        match module {
            Module::Attn => self.attn,
            Module::Conv => self.conv,
            Module::CrossAttn => self.cross_attn,
        }
    }

    pub fn enabled_modules(&self) -> Vec<Module> {
        Module::ALL.into_iter().filter(|&m| self.enabled(m)).collect()
    }

    /// Widths of the scales that are actually built.
    pub fn active_dims(&self) -> &[usize] {
        if self.deep_supervision {
            &self.scale_dims
        } else {
            &self.scale_dims[..1]
        }
    }

    /// Number of actor (equivalently critic) networks.
    pub fn n_heads_total(&self) -> usize {
        self.enabled_modules().len() * self.active_dims().len()
    }

    /// Stable string identifying every shape-affecting setting.
    pub fn fingerprint(&self) -> String {
        format!(
            "dims={:?};heads={};a={};c={};x={};s={};graph={:?};actor={:?};critic={:?};slope={}",
            self.scale_dims,
            self.n_heads,
            self.attn,
            self.conv,
            self.cross_attn,
            self.deep_supervision,
            self.op_graph,
            self.actor_hidden,
            self.critic_hidden,
            self.leaky_slope
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EmbedParams {
    pub op: Linear,
    pub ma: Linear,
}

/// Projection shared by all heads plus per-head scoring vectors
/// (stacked, `d x 1`).
#[derive(Clone, Copy, Debug)]
pub struct AttnParams {
    pub proj: ParamId,
    pub score_src: ParamId,
    pub score_dst: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub kernel1: ParamId,
    pub bias1: ParamId,
    pub kernel2: ParamId,
    pub bias2: ParamId,
}

/// One cross-attention direction: queries from one entity type,
/// keys/values from the other.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttnParams {
    pub query_proj: ParamId,
    pub key_proj: ParamId,
    pub score_query: ParamId,
    pub score_key: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Pair<T> {
    pub op: T,
    pub ma: T,
}

#[derive(Clone, Debug)]
pub struct ScaleParams {
    pub dim: usize,
    pub embed: EmbedParams,
    pub attn: Option<Pair<AttnParams>>,
    pub conv: Option<Pair<ConvParams>>,
    pub cross: Option<Pair<CrossAttnParams>>,
}

pub(crate) fn uniform_tensor(rng: &mut RngStream, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| bound * (2.0 * rng.unit() - 1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

pub(crate) fn add_linear(
    store: &mut ParamStore,
    rng: &mut RngStream,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    zero: bool,
) -> Result<Linear> {
    let bound = if zero { 0.0 } else { 1.0 / (fan_in as f64).sqrt() };
    Ok(Linear {
        weight: store.add(format!("{name}.weight"), uniform_tensor(rng, &[fan_in, fan_out], bound))?,
        bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, fan_out]))?,
    })
}

impl ScaleParams {
    pub fn build(config: &NetConfig, scale: usize, store: &mut ParamStore, rng: &mut RngStream) -> Result<Self> {
        let d = config.scale_dims[scale];
        let dh = d / config.n_heads;
        let p = format!("scale{scale}");
        let embed = EmbedParams {
            op: add_linear(store, rng, &format!("{p}.embed.op"), OP_FEATURES, d, false)?,
            ma: add_linear(store, rng, &format!("{p}.embed.ma"), MACHINE_FEATURES, d, false)?,
        };
        let proj_bound = 1.0 / (d as f64).sqrt();
        let score_bound = 1.0 / (dh as f64).sqrt();

        let mut attn_for = |ent: &str, store: &mut ParamStore| -> Result<AttnParams> {
            Ok(AttnParams {
                proj: store.add(format!("{p}.attn.{ent}.proj"), uniform_tensor(rng, &[d, d], proj_bound))?,
                score_src: store.add(format!("{p}.attn.{ent}.score_src"), uniform_tensor(rng, &[d, 1], score_bound))?,
                score_dst: store.add(format!("{p}.attn.{ent}.score_dst"), uniform_tensor(rng, &[d, 1], score_bound))?,
            })
        };
        let attn = if config.attn {
            Some(Pair { op: attn_for("op", store)?, ma: attn_for("ma", store)? })
        } else {
            None
        };

        let conv_bound = 1.0 / ((3 * d) as f64).sqrt();
        let mut conv_for = |ent: &str, store: &mut ParamStore| -> Result<ConvParams> {
            Ok(ConvParams {
                kernel1: store.add(format!("{p}.conv.{ent}.kernel1"), uniform_tensor(rng, &[d, d, 3], conv_bound))?,
                bias1: store.add(format!("{p}.conv.{ent}.bias1"), Tensor::zeros(&[1, d]))?,
                kernel2: store.add(format!("{p}.conv.{ent}.kernel2"), uniform_tensor(rng, &[d, d, 3], conv_bound))?,
                bias2: store.add(format!("{p}.conv.{ent}.bias2"), Tensor::zeros(&[1, d]))?,
            })
        };
        let conv = if config.conv {
            Some(Pair { op: conv_for("op", store)?, ma: conv_for("ma", store)? })
        } else {
            None
        };

        let mut cross_for = |ent: &str, store: &mut ParamStore| -> Result<CrossAttnParams> {
            Ok(CrossAttnParams {
                query_proj: store.add(format!("{p}.cross.{ent}.query_proj"), uniform_tensor(rng, &[d, d], proj_bound))?,
                key_proj: store.add(format!("{p}.cross.{ent}.key_proj"), uniform_tensor(rng, &[d, d], proj_bound))?,
                score_query: store
                    .add(format!("{p}.cross.{ent}.score_query"), uniform_tensor(rng, &[d, 1], score_bound))?,
                score_key: store.add(format!("{p}.cross.{ent}.score_key"), uniform_tensor(rng, &[d, 1], score_bound))?,
            })
        };
        let cross = if config.cross_attn {
            Some(Pair { op: cross_for("op", store)?, ma: cross_for("ma", store)? })
        } else {
            None
        };
        Ok(ScaleParams { dim: d, embed, attn, conv, cross })
    }
}

/// Per-scale representations of operations and machines.
#[derive(Clone, Copy, Debug)]
pub struct RepSet {
    pub dim: usize,
    /// Embeddings.
    pub h: Pair<Var>,
    /// Self-attention output.
    pub attn: Pair<Var>,
    /// Convolution output.
    pub conv: Pair<Var>,
    /// Cross-attention output.
    pub cross: Pair<Var>,
}

impl RepSet {
    pub fn module(&self, module: Module) -> Pair<Var> {
        match module {
            Module::Attn => self.attn,
            Module::Conv => self.conv,
            Module::CrossAttn => self.cross,
        }
    }
}

/// `phi(x) = elu(x W + b)` for both entity types.
pub fn embed_entities(g: &mut Graph, x_op: Var, x_ma: Var, params: &EmbedParams) -> Result<Pair<Var>> {
    let op = params.op.forward(g, x_op)?;
    let ma = params.ma.forward(g, x_ma)?;
    Ok(Pair { op: g.elu(op), ma: g.elu(ma) })
}

/// Multi-head additive attention. Each head scores `leaky(q_i . a_q + k_j . a_k)`,
/// normalises over the allowed keys of row `i`, and returns the weighted sum of
/// projected keys; heads are concatenated and passed through elu.
#[allow(clippy::too_many_arguments)]
fn multi_head(
    g: &mut Graph,
    queries: Var,
    keys: Var,
    score_q: Var,
    score_k: Var,
    mask: &[bool],
    heads: usize,
    slope: f64,
) -> Result<Var> {
    let d = g.value(queries).cols();
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = g.slice(queries, 1, h * dh, dh)?;
        let k = g.slice(keys, 1, h * dh, dh)?;
        let aq = g.slice(score_q, 0, h * dh, dh)?;
        let ak = g.slice(score_k, 0, h * dh, dh)?;
        let sq = g.matmul(q, aq)?;
        let sk = g.matmul(k, ak)?;
        let sk = g.transpose(sk)?;
        let e = g.outer_add(sq, sk)?;
        let e = g.leaky_relu(e, slope);
        let alpha = g.masked_softmax_rows(e, mask)?;
        outs.push(g.matmul(alpha, k)?);
    }
    let cat = g.concat(&outs, 1)?;
    Ok(g.elu(cat))
}

/// Row-major adjacency (with self-loops) for the operation graph.
pub fn op_adjacency(job_sizes: &[usize], graph: OpGraph) -> Vec<bool> {
    let n: usize = job_sizes.iter().sum();
    match graph {
        OpGraph::Complete => vec![true; n * n],
        OpGraph::Precedence => {
            let mut adj = vec![false; n * n];
            let mut base = 0;
            for &len in job_sizes {
                for k in 0..len {
                    let i = base + k;
                    adj[i * n + i] = true;
                    if k > 0 {
                        adj[i * n + i - 1] = true;
                    }
                    if k + 1 < len {
                        adj[i * n + i + 1] = true;
                    }
                }
                base += len;
            }
            adj
        }
    }
}

/// Graph self-attention over one entity type.
pub fn self_attend(
    g: &mut Graph,
    h: Var,
    adjacency: &[bool],
    params: &AttnParams,
    heads: usize,
    slope: f64,
) -> Result<Var> {
    let w = g.param(params.proj);
    let wh = g.matmul(h, w)?;
    let src = g.param(params.score_src);
    let dst = g.param(params.score_dst);
    multi_head(g, wh, wh, src, dst, adjacency, heads, slope)
}

/// `conv -> tanh -> conv` along the entity axis (kernel 3, stride 1, padding 1).
pub fn local_conv(g: &mut Graph, h: Var, params: &ConvParams) -> Result<Var> {
    let (k1, b1, k2, b2) =
        (g.param(params.kernel1), g.param(params.bias1), g.param(params.kernel2), g.param(params.bias2));
    let y = g.conv1d(h, k1, b1)?;
    let y = g.tanh(y);
    g.conv1d(y, k2, b2)
}

fn cross_one(
    g: &mut Graph,
    queries: Var,
    keys: Var,
    params: &CrossAttnParams,
    heads: usize,
    slope: f64,
) -> Result<Var> {
    let (wq, wk) = (g.param(params.query_proj), g.param(params.key_proj));
    let q = g.matmul(queries, wq)?;
    let k = g.matmul(keys, wk)?;
    let (aq, ak) = (g.param(params.score_query), g.param(params.score_key));
    let mask = vec![true; g.value(q).rows() * g.value(k).rows()];
    multi_head(g, q, k, aq, ak, &mask, heads, slope)
}

/// Operations attend over all machines and machines over all operations.
pub fn cross_attend(
    g: &mut Graph,
    ops: Var,
    machines: Var,
    params: &Pair<CrossAttnParams>,
    heads: usize,
    slope: f64,
) -> Result<Pair<Var>> {
    Ok(Pair {
        op: cross_one(g, ops, machines, &params.op, heads, slope)?,
        ma: cross_one(g, machines, ops, &params.ma, heads, slope)?,
    })
}

/// Runs embed, self-attention, convolution and cross-attention independently
/// at every built scale.
pub fn forward_scales(
    g: &mut Graph,
    bundle: &FeatureBundle,
    scales: &[ScaleParams],
    config: &NetConfig,
) -> Result<Vec<RepSet>> {
    let x_op = g.constant(bundle.x_op.clone());
    let x_ma = g.constant(bundle.x_ma.clone());
    let op_adj = op_adjacency(&bundle.job_sizes, config.op_graph);
    let n_ma = bundle.n_machines();
    let ma_adj = vec![true; n_ma * n_ma];
    let (heads, slope) = (config.n_heads, config.leaky_slope);

    scales
        .iter()
        .map(|sp| {
            let h = embed_entities(g, x_op, x_ma, &sp.embed)?;
            let attn = match &sp.attn {
                Some(p) => Pair {
                    op: self_attend(g, h.op, &op_adj, &p.op, heads, slope)?,
                    ma: self_attend(g, h.ma, &ma_adj, &p.ma, heads, slope)?,
                },
                None => h,
            };
            let conv = match &sp.conv {
                Some(p) => Pair { op: local_conv(g, attn.op, &p.op)?, ma: local_conv(g, attn.ma, &p.ma)? },
                None => attn,
            };
            let cross = match &sp.cross {
                Some(p) => cross_attend(g, conv.op, conv.ma, p, heads, slope)?,
                None => conv,
            };
            Ok(RepSet { dim: sp.dim, h, attn, conv, cross })
        })
        .collect()
}
