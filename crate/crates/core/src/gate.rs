//! The bridging gate: cross-attention fusion of depth and semantic token
//! grids followed by self-attention refinement, each capped by an MLP.
//!
//! With `tau = 1` the blocks compute plain scaled-dot attention
//! `softmax(QKᵀ/√d)·V`. At inference the same logits are divided by
//! `tau·√d` instead, which spreads each row's attention mass without moving
//! its argmax. No residual connections or layer normalization are applied
//! unless the residual flag is set; the default path is the bare
//! attention→MLP composition.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::Prng;
use crate::tensor::Tensor;

/// Width and variant switches for one gate.
#[derive(Clone, Debug)]
pub struct GateConfig {
    /// Channel width C of both input feature maps and of the output.
    pub channels: usize,
    /// Projected query/key/value width d.
    pub proj_dim: usize,
    /// Hidden width of both MLPs (4·C unless overridden).
    pub hidden: usize,
    /// Attention head count; must divide `proj_dim`.
    pub heads: usize,
    /// Adds the block input to the block output when set.
    pub residual: bool,
}

impl GateConfig {
    pub fn new(channels: usize, proj_dim: usize) -> Self {
        GateConfig {
            channels,
            proj_dim,
            hidden: 4 * channels,
            heads: 1,
            residual: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.proj_dim == 0 || self.hidden == 0 || self.heads == 0 {
            return Err(Error::Parameter(format!(
                "gate widths must be positive: C={}, d={}, hidden={}, heads={}",
                self.channels, self.proj_dim, self.hidden, self.heads
            )));
        }
        if !self.proj_dim.is_multiple_of(self.heads) {
            return Err(Error::Parameter(format!(
                "head count {} must divide projection width {}",
                self.heads, self.proj_dim
            )));
        }
        Ok(())
    }
}

/// Two affine layers around a GELU.
#[derive(Clone, Debug)]
pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MlpParams {
    /// Uniform weights with per-layer gain ≈ 2 (`±2√3/√fan_in`), zero
    /// biases. The gain compensates the GELU's contraction so the MLP
    /// roughly preserves feature scale; a shrinking MLP starves the
    /// downstream self-attention block of logit spread.
    pub fn init(rng: &mut Prng, input: usize, hidden: usize, output: usize) -> Self {
        let s1 = 2.0 * 3.0_f64.sqrt() / (input as f64).sqrt();
        let s2 = 2.0 * 3.0_f64.sqrt() / (hidden as f64).sqrt();
        MlpParams {
            w1: Tensor::uniform(rng, vec![input, hidden], -s1, s1).with_grad(),
            b1: Tensor::zeros(vec![hidden]).with_grad(),
            w2: Tensor::uniform(rng, vec![hidden, output], -s2, s2).with_grad(),
            b2: Tensor::zeros(vec![output]).with_grad(),
        }
    }
}

/// All trainable weights of one bridging gate: six C×d projections and the
/// two MLPs mapping d → C.
#[derive(Clone, Debug)]
pub struct GateParams {
    pub wq_c: Tensor,
    pub wk_c: Tensor,
    pub wv_c: Tensor,
    pub mlp_c: MlpParams,
    pub wq_s: Tensor,
    pub wk_s: Tensor,
    pub wv_s: Tensor,
    pub mlp_s: MlpParams,
}

impl GateParams {
    /// Projections uniform ±1/√C; MLP weights uniform ±1/√fan_in with zero
    /// biases. Everything starts trainable.
    pub fn init(cfg: &GateConfig, rng: &mut Prng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let d = cfg.proj_dim;
        let s = 1.0 / (c as f64).sqrt();
        let proj = |rng: &mut Prng| Tensor::uniform(rng, vec![c, d], -s, s).with_grad();
        Ok(GateParams {
            wq_c: proj(rng),
            wk_c: proj(rng),
            wv_c: proj(rng),
            mlp_c: MlpParams::init(rng, d, cfg.hidden, c),
            wq_s: proj(rng),
            wk_s: proj(rng),
            wv_s: proj(rng),
            mlp_s: MlpParams::init(rng, d, cfg.hidden, c),
        })
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        for (_, t) in self.named_tensors_mut() {
            t.set_requires_grad(on);
        }
    }

    /// Parameter slots in a fixed order; the names are used for gradcheck
    /// reports and checkpoint records.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("cross.wq", &self.wq_c),
            ("cross.wk", &self.wk_c),
            ("cross.wv", &self.wv_c),
            ("cross.mlp.w1", &self.mlp_c.w1),
            ("cross.mlp.b1", &self.mlp_c.b1),
            ("cross.mlp.w2", &self.mlp_c.w2),
            ("cross.mlp.b2", &self.mlp_c.b2),
            ("self.wq", &self.wq_s),
            ("self.wk", &self.wk_s),
            ("self.wv", &self.wv_s),
            ("self.mlp.w1", &self.mlp_s.w1),
            ("self.mlp.b1", &self.mlp_s.b1),
            ("self.mlp.w2", &self.mlp_s.w2),
            ("self.mlp.b2", &self.mlp_s.b2),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("cross.wq", &mut self.wq_c),
            ("cross.wk", &mut self.wk_c),
            ("cross.wv", &mut self.wv_c),
            ("cross.mlp.w1", &mut self.mlp_c.w1),
            ("cross.mlp.b1", &mut self.mlp_c.b1),
            ("cross.mlp.w2", &mut self.mlp_c.w2),
            ("cross.mlp.b2", &mut self.mlp_c.b2),
            ("self.wq", &mut self.wq_s),
            ("self.wk", &mut self.wk_s),
            ("self.wv", &mut self.wv_s),
            ("self.mlp.w1", &mut self.mlp_s.w1),
            ("self.mlp.b1", &mut self.mlp_s.b1),
            ("self.mlp.w2", &mut self.mlp_s.w2),
            ("self.mlp.b2", &mut self.mlp_s.b2),
        ]
    }

    /// Insert every parameter as a graph leaf, in `named_tensors` order.
    pub fn register(&self, g: &mut Graph) -> GateNodes {
        GateNodes {
            wq_c: g.leaf(self.wq_c.clone()),
            wk_c: g.leaf(self.wk_c.clone()),
            wv_c: g.leaf(self.wv_c.clone()),
            mlp_c: MlpNodes {
                w1: g.leaf(self.mlp_c.w1.clone()),
                b1: g.leaf(self.mlp_c.b1.clone()),
                w2: g.leaf(self.mlp_c.w2.clone()),
                b2: g.leaf(self.mlp_c.b2.clone()),
            },
            wq_s: g.leaf(self.wq_s.clone()),
            wk_s: g.leaf(self.wk_s.clone()),
            wv_s: g.leaf(self.wv_s.clone()),
            mlp_s: MlpNodes {
                w1: g.leaf(self.mlp_s.w1.clone()),
                b1: g.leaf(self.mlp_s.b1.clone()),
                w2: g.leaf(self.mlp_s.w2.clone()),
                b2: g.leaf(self.mlp_s.b2.clone()),
            },
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MlpNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Graph leaves of one registered gate, in `named_tensors` order.
#[derive(Clone, Copy, Debug)]
pub struct GateNodes {
    pub wq_c: NodeId,
    pub wk_c: NodeId,
    pub wv_c: NodeId,
    pub mlp_c: MlpNodes,
    pub wq_s: NodeId,
    pub wk_s: NodeId,
    pub wv_s: NodeId,
    pub mlp_s: MlpNodes,
}

impl GateNodes {
    pub fn named(&self) -> Vec<(&'static str, NodeId)> {
        vec![
            ("cross.wq", self.wq_c),
            ("cross.wk", self.wk_c),
            ("cross.wv", self.wv_c),
            ("cross.mlp.w1", self.mlp_c.w1),
            ("cross.mlp.b1", self.mlp_c.b1),
            ("cross.mlp.w2", self.mlp_c.w2),
            ("cross.mlp.b2", self.mlp_c.b2),
            ("self.wq", self.wq_s),
            ("self.wk", self.wk_s),
            ("self.wv", self.wv_s),
            ("self.mlp.w1", self.mlp_s.w1),
            ("self.mlp.b1", self.mlp_s.b1),
            ("self.mlp.w2", self.mlp_s.w2),
            ("self.mlp.b2", self.mlp_s.b2),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Cross,
    SelfAttn,
}

impl BlockKind {
    pub fn label(&self) -> &'static str {
        match self {
            BlockKind::Cross => "cross",
            BlockKind::SelfAttn => "self",
        }
    }
}

/// Post-softmax attention weights of one block. For `heads > 1` the per-head
/// matrices are stacked along the row axis, head-major; every row still sums
/// to 1.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub weights: Tensor,
    pub block: BlockKind,
    pub gate_index: usize,
}

impl AttentionRecord {
    pub fn rows(&self) -> usize {
        self.weights.rows()
    }

    pub fn keys(&self) -> usize {
        self.weights.cols()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let k = self.keys();
        &self.weights.data()[r * k..(r + 1) * k]
    }
}

/// Shannon entropy, in nats, of each attention row.
pub fn attention_entropy(rec: &AttentionRecord) -> Vec<f64> {
    (0..rec.rows())
        .map(|r| {
            rec.row(r)
                .iter()
                .map(|&w| if w > 0.0 { -w * w.ln() } else { 0.0 })
                .sum()
        })
        .collect()
}

/// x·W1 + b1, GELU, ·W2 + b2.
pub fn mlp_forward(g: &mut Graph, x: NodeId, mlp: &MlpNodes) -> Result<NodeId> {
    let h = g.matmul(x, mlp.w1)?;
    let h = g.add_row_bias(h, mlp.b1)?;
    let h = g.gelu(h);
    let out = g.matmul(h, mlp.w2)?;
    g.add_row_bias(out, mlp.b2)
}

/// Multi-head scaled-dot attention. Queries come from `query_src`, keys and
/// values from `kv_src`. Logits are divided by `tau·√d_head`. Returns the
/// context rows and the stacked post-softmax weights.
#[allow(clippy::too_many_arguments)]
fn attention(
    g: &mut Graph,
    query_src: NodeId,
    kv_src: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    heads: usize,
    tau: f64,
) -> Result<(NodeId, Tensor)> {
    let q = g.matmul(query_src, wq)?;
    let k = g.matmul(kv_src, wk)?;
    let v = g.matmul(kv_src, wv)?;
    let d = g.value(q).cols();
    let d_head = d / heads;
    let divisor = tau * (d_head as f64).sqrt();

    let mut contexts = Vec::with_capacity(heads);
    let mut stacked = Vec::new();
    let mut key_count = 0;
    for head in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, head * d_head, d_head)?,
                g.slice_cols(k, head * d_head, d_head)?,
                g.slice_cols(v, head * d_head, d_head)?,
            )
        };
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let weights = g.softmax_rows(logits, divisor)?;
        let wt = g.value(weights);
        key_count = wt.cols();
        stacked.extend_from_slice(wt.data());
        contexts.push(g.matmul(weights, vh)?);
    }
    let ctx = if heads == 1 {
        contexts[0]
    } else {
        g.concat_cols(&contexts)?
    };
    let rows = stacked.len() / key_count;
    Ok((ctx, Tensor::new(vec![rows, key_count], stacked)?))
}

fn check_channels(what: &str, got: &[usize], channels: usize) -> Result<()> {
    if got.len() != 2 || got[1] != channels {
        return Err(Error::Dimension(format!(
            "{what} expects tokens×{channels}, got {got:?}"
        )));
    }
    Ok(())
}

/// Cross-attention block: depth tokens query the aligned semantic tokens,
/// which serve as both key and value; the fused rows pass through an MLP.
pub fn cross_attention_block(
    g: &mut Graph,
    f_d: NodeId,
    f_s: NodeId,
    nodes: &GateNodes,
    cfg: &GateConfig,
    tau: f64,
    gate_index: usize,
) -> Result<(NodeId, AttentionRecord)> {
    cfg.validate()?;
    check_channels(
        "cross-attention depth feature",
        g.value(f_d).shape(),
        cfg.channels,
    )?;
    check_channels(
        "cross-attention semantic feature",
        g.value(f_s).shape(),
        cfg.channels,
    )?;
    let (ctx, weights) = attention(
        g, f_d, f_s, nodes.wq_c, nodes.wk_c, nodes.wv_c, cfg.heads, tau,
    )?;
    let mut out = mlp_forward(g, ctx, &nodes.mlp_c)?;
    if cfg.residual {
        out = g.add(out, f_d)?;
    }
    Ok((
        out,
        AttentionRecord {
            weights,
            block: BlockKind::Cross,
            gate_index,
        },
    ))
}

/// Self-attention block: the fused feature serves as query, key, and value;
/// the refined rows pass through an MLP.
pub fn self_attention_block(
    g: &mut Graph,
    f_c: NodeId,
    nodes: &GateNodes,
    cfg: &GateConfig,
    tau: f64,
    gate_index: usize,
) -> Result<(NodeId, AttentionRecord)> {
    cfg.validate()?;
    check_channels("self-attention input", g.value(f_c).shape(), cfg.channels)?;
    let (ctx, weights) = attention(
        g, f_c, f_c, nodes.wq_s, nodes.wk_s, nodes.wv_s, cfg.heads, tau,
    )?;
    let mut out = mlp_forward(g, ctx, &nodes.mlp_s)?;
    if cfg.residual {
        out = g.add(out, f_c)?;
    }
    Ok((
        out,
        AttentionRecord {
            weights,
            block: BlockKind::SelfAttn,
            gate_index,
        },
    ))
}

/// Full gate: self-attention refinement of the cross-attention fusion.
/// `tau` is 1 during training; values above 1 are the inference-time
/// temperature scaling applied in both blocks.
pub fn gate_forward(
    g: &mut Graph,
    f_d: NodeId,
    f_s: NodeId,
    nodes: &GateNodes,
    cfg: &GateConfig,
    tau: f64,
    gate_index: usize,
) -> Result<(NodeId, [AttentionRecord; 2])> {
    if tau.is_nan() || tau < 1.0 {
        return Err(Error::Parameter(format!(
            "gate temperature must be at least 1, got {tau}"
        )));
    }
    let (f_c, rec_cross) = cross_attention_block(g, f_d, f_s, nodes, cfg, tau, gate_index)?;
    let (f_sg, rec_self) = self_attention_block(g, f_c, nodes, cfg, tau, gate_index)?;
    Ok((f_sg, [rec_cross, rec_self]))
}
