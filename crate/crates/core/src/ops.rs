//! Candidate operators of the temporal and spatial search spaces.
//!
//! Temporal operators act on series layout `[S, P, D]` (one row per sample·node);
//! spatial operators act on graph layout `[R, N, D]` (one row per sample, or per
//! sample·step in mixed mode).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use stnas_autodiff::{Result as AdResult, Tape, Tensor, Var};

use crate::error::{Result, StnasError};
use crate::params::{Group, Init, ParamId, ParamStore, Session};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    Gdcc,
    Informer,
    GnnFixed,
    GnnAdap,
    GnnAtt,
    Zero,
    Identity,
}

impl Operator {
    pub const ALL: [Operator; 7] = [
        Operator::Gdcc,
        Operator::Informer,
        Operator::GnnFixed,
        Operator::GnnAdap,
        Operator::GnnAtt,
        Operator::Zero,
        Operator::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Operator::Gdcc => "gdcc",
            Operator::Informer => "informer",
            Operator::GnnFixed => "gnn_fixed",
            Operator::GnnAdap => "gnn_adap",
            Operator::GnnAtt => "gnn_att",
            Operator::Zero => "zero",
            Operator::Identity => "identity",
        }
    }

    pub fn is_temporal(self) -> bool {
        matches!(self, Operator::Gdcc | Operator::Informer)
    }

    pub fn is_spatial(self) -> bool {
        matches!(self, Operator::GnnFixed | Operator::GnnAdap | Operator::GnnAtt)
    }

    /// Zero and identity fit any layout.
    pub fn is_parameter_free(self) -> bool {
        matches!(self, Operator::Zero | Operator::Identity)
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Operator {
    type Err = StnasError;

    fn from_str(s: &str) -> Result<Self> {
        Operator::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| StnasError::Architecture(format!("unknown operator `{s}`")))
    }
}

/// Ordered operator list of one search space. The order fixes logit positions and tie-breaks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpSpace {
    ops: Vec<Operator>,
}

impl OpSpace {
    pub fn new(ops: Vec<Operator>) -> Result<Self> {
        if ops.is_empty() {
            return Err(StnasError::Model("operator space is empty".into()));
        }
        for (i, o) in ops.iter().enumerate() {
            if ops[..i].contains(o) {
                return Err(StnasError::Model(format!("operator `{o}` listed twice")));
            }
        }
        Ok(Self { ops })
    }

    pub fn temporal() -> Self {
        Self {
            ops: vec![Operator::Gdcc, Operator::Informer, Operator::Zero, Operator::Identity],
        }
    }

    pub fn spatial() -> Self {
        Self {
            ops: vec![
                Operator::GnnFixed,
                Operator::GnnAdap,
                Operator::GnnAtt,
                Operator::Zero,
                Operator::Identity,
            ],
        }
    }

    /// Union of the temporal and spatial spaces.
    pub fn mixed() -> Self {
        Self {
            ops: Operator::ALL.to_vec(),
        }
    }

    /// Keeps only `keep`, preserving declared order.
    pub fn restricted(&self, keep: &[Operator]) -> Result<Self> {
        Self::new(self.ops.iter().copied().filter(|o| keep.contains(o)).collect())
    }

    pub fn without(&self, drop: Operator) -> Result<Self> {
        Self::new(self.ops.iter().copied().filter(|&o| o != drop).collect())
    }

    pub fn ops(&self) -> &[Operator] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn contains(&self, op: Operator) -> bool {
        self.ops.contains(&op)
    }

    pub fn index_of(&self, op: Operator) -> Option<usize> {
        self.ops.iter().position(|&o| o == op)
    }

    /// Operator with the largest logit; ties go to the earliest in declared order.
    pub fn argmax(&self, logits: &[f64]) -> Operator {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        self.ops[best]
    }
}

/// Softmax of one edge's logits.
pub fn mix_weights(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(StnasError::Model(format!(
            "mixing logits must be finite and non-empty: {logits:?}"
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// Shape settings shared by every operator instance of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct OpHyper {
    pub hidden: usize,
    pub nodes: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub diffusion_steps: usize,
    pub heads: usize,
    pub groups: usize,
    pub node_emb_dim: usize,
}

impl OpHyper {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.nodes == 0 || self.kernel == 0 || self.dilation == 0 {
            return Err(StnasError::Model(
                "hidden, nodes, kernel and dilation must be positive".into(),
            ));
        }
        if self.node_emb_dim == 0 {
            return Err(StnasError::Model("node embedding size must be positive".into()));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(StnasError::Model(format!(
                "heads ({}) must divide hidden ({})",
                self.heads, self.hidden
            )));
        }
        if self.groups == 0 || !self.hidden.is_multiple_of(self.groups) {
            return Err(StnasError::Model(format!(
                "groups ({}) must divide hidden ({})",
                self.groups, self.hidden
            )));
        }
        let (hpg, head_dim) = self.att_layout();
        if hpg * head_dim * self.groups != self.hidden {
            return Err(StnasError::Model(format!(
                "{} heads over {} groups do not tile hidden size {}",
                self.heads, self.groups, self.hidden
            )));
        }
        Ok(())
    }

    /// (heads per group, head width) for the attention GNN.
    pub fn att_layout(&self) -> (usize, usize) {
        let hpg = (self.heads / self.groups).max(1);
        (hpg, self.hidden / self.groups / hpg)
    }
}

/// Parameters of one group of the attention GNN.
#[derive(Clone, Debug, PartialEq)]
pub struct AttGroup {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

/// Weight handles of one operator instance.
#[derive(Clone, Debug, PartialEq)]
pub enum OpParams {
    None,
    Gdcc {
        w1: ParamId,
        w2: ParamId,
    },
    Informer {
        wq: ParamId,
        wk: ParamId,
        wv: ParamId,
        wo: ParamId,
    },
    GnnFixed {
        w: ParamId,
    },
    GnnAdap {
        e1: ParamId,
        e2: ParamId,
        w: ParamId,
    },
    GnnAtt {
        groups: Vec<AttGroup>,
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
}

impl OpParams {
    /// Registers freshly initialized weights for `op` under `prefix`.
    pub fn register(op: Operator, prefix: &str, h: &OpHyper, store: &mut ParamStore, init: &mut Init) -> Self {
        let d = h.hidden;
        let mut add = |name: &str, shape: &[usize], fan_in: usize| {
            store.add(format!("{prefix}.{name}"), Group::Weights, init.fan_in(shape, fan_in))
        };
        match op {
            Operator::Zero | Operator::Identity => OpParams::None,
            Operator::Gdcc => OpParams::Gdcc {
                w1: add("w1", &[h.kernel, d, d], h.kernel * d),
                w2: add("w2", &[h.kernel, d, d], h.kernel * d),
            },
            Operator::Informer => OpParams::Informer {
                wq: add("wq", &[d, d], d),
                wk: add("wk", &[d, d], d),
                wv: add("wv", &[d, d], d),
                wo: add("wo", &[d, d], d),
            },
            Operator::GnnFixed => OpParams::GnnFixed {
                w: add("w", &[d, d], d),
            },
            Operator::GnnAdap => OpParams::GnnAdap {
                e1: add("e1", &[h.nodes, h.node_emb_dim], h.node_emb_dim),
                e2: add("e2", &[h.nodes, h.node_emb_dim], h.node_emb_dim),
                w: add("w", &[d, d], d),
            },
            Operator::GnnAtt => {
                let width = d / h.groups;
                let (hpg, hd) = h.att_layout();
                let groups = (0..h.groups)
                    .map(|g| AttGroup {
                        wq: add(&format!("g{g}.wq"), &[width, hpg * hd], width),
                        wk: add(&format!("g{g}.wk"), &[width, hpg * hd], width),
                        wv: add(&format!("g{g}.wv"), &[width, hpg * hd], width),
                    })
                    .collect();
                OpParams::GnnAtt {
                    groups,
                    w1: add("w1", &[d, d], d),
                    b1: add("b1", &[d], d),
                    w2: add("w2", &[d, d], d),
                    b2: add("b2", &[d], d),
                }
            }
        }
    }
}

/// Everything an operator may need beyond its own weights.
pub struct OpContext<'a> {
    pub hyper: &'a OpHyper,
    /// Predefined adjacency on the tape, `[N, N]`.
    pub adjacency: Option<Var>,
}

/// Applies `op` to `x`, which must already be in the layout the operator expects.
pub fn apply_op(sess: &mut Session<'_>, op: Operator, params: &OpParams, x: Var, ctx: &OpContext<'_>) -> Result<Var> {
    let h = ctx.hyper;
    match (op, params) {
        (Operator::Identity, _) => Ok(x),
        (Operator::Zero, _) => {
            let shape = sess.tape.shape(x).to_vec();
            Ok(sess.tape.constant(Tensor::zeros(&shape)))
        }
        (Operator::Gdcc, OpParams::Gdcc { w1, w2 }) => {
            let (w1, w2) = (sess.param(*w1), sess.param(*w2));
            Ok(gdcc(&mut sess.tape, x, w1, w2, h.dilation)?)
        }
        (Operator::Informer, OpParams::Informer { wq, wk, wv, wo }) => {
            let w = [sess.param(*wq), sess.param(*wk), sess.param(*wv), sess.param(*wo)];
            Ok(informer(&mut sess.tape, x, w[0], w[1], w[2], w[3])?)
        }
        (Operator::GnnFixed, OpParams::GnnFixed { w }) => {
            let adj = ctx
                .adjacency
                .ok_or_else(|| StnasError::Model("gnn_fixed needs a predefined adjacency".into()))?;
            let w = sess.param(*w);
            Ok(gnn_fixed(&mut sess.tape, x, adj, w, h.diffusion_steps)?)
        }
        (Operator::GnnAdap, OpParams::GnnAdap { e1, e2, w }) => {
            let (e1, e2, w) = (sess.param(*e1), sess.param(*e2), sess.param(*w));
            Ok(gnn_adap(&mut sess.tape, x, e1, e2, w, h.diffusion_steps)?)
        }
        (Operator::GnnAtt, OpParams::GnnAtt { groups, w1, b1, w2, b2 }) => {
            let weights = AttWeights {
                groups: groups
                    .iter()
                    .map(|g| [sess.param(g.wq), sess.param(g.wk), sess.param(g.wv)])
                    .collect(),
                w1: sess.param(*w1),
                b1: sess.param(*b1),
                w2: sess.param(*w2),
                b2: sess.param(*b2),
            };
            let (hpg, _) = h.att_layout();
            Ok(gnn_att(&mut sess.tape, x, &weights, hpg)?)
        }
        (op, p) => Err(StnasError::Model(format!(
            "operator `{op}` got mismatched weights {p:?}"
        ))),
    }
}

/// `conv(x, w1) ⊙ σ(conv(x, w2))` over series layout `[S, P, D]`.
pub fn gdcc(tape: &mut Tape, x: Var, w1: Var, w2: Var, dilation: usize) -> AdResult<Var> {
    let filter = tape.causal_conv(x, w1, dilation)?;
    let gate_in = tape.causal_conv(x, w2, dilation)?;
    let gate = tape.sigmoid(gate_in)?;
    tape.mul(filter, gate)
}

/// Scaled dot-product attention over the middle axis of `[batch, len, width]` inputs.
/// Returns the attended values and the probability matrix `[batch, len, len]`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> AdResult<(Var, Var)> {
    let width = *tape.shape(q).last().expect("rank 3");
    let kt = tape.transpose(k, &[0, 2, 1])?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (width as f64).sqrt())?;
    let probs = tape.softmax(scaled, 2)?;
    let out = tape.matmul(probs, v)?;
    Ok((out, probs))
}

/// Full self-attention along time for each series row, then an output projection.
pub fn informer(tape: &mut Tape, x: Var, wq: Var, wk: Var, wv: Var, wo: Var) -> AdResult<Var> {
    let q = tape.affine(x, wq, None)?;
    let k = tape.affine(x, wk, None)?;
    let v = tape.affine(x, wv, None)?;
    let (att, _) = attention(tape, q, k, v)?;
    tape.affine(att, wo, None)
}

/// `Σ_{k=0}^{K} A^k x`, evaluated in node-major layout to avoid repeated transposes.
pub fn diffuse(tape: &mut Tape, a: Var, x: Var, steps: usize) -> AdResult<Var> {
    if steps == 0 {
        return Ok(x);
    }
    let s = tape.shape(x).to_vec();
    let (r, n, d) = (s[0], s[1], s[2]);
    let xt = tape.transpose(x, &[1, 0, 2])?;
    let flat = tape.reshape(xt, &[n, r * d])?;
    let mut term = flat;
    let mut acc = flat;
    for _ in 0..steps {
        term = tape.matmul(a, term)?;
        acc = tape.add(acc, term)?;
    }
    let y3 = tape.reshape(acc, &[n, r, d])?;
    tape.transpose(y3, &[1, 0, 2])
}

pub fn gnn_fixed(tape: &mut Tape, x: Var, adj: Var, w: Var, steps: usize) -> AdResult<Var> {
    let mixed = diffuse(tape, adj, x, steps)?;
    tape.affine(mixed, w, None)
}

/// Row-softmax of `relu(E₁E₂ᵀ)`.
pub fn adaptive_adjacency(tape: &mut Tape, e1: Var, e2: Var) -> AdResult<Var> {
    let e2t = tape.transpose(e2, &[1, 0])?;
    let logits = tape.matmul(e1, e2t)?;
    let r = tape.relu(logits)?;
    tape.softmax(r, 1)
}

pub fn gnn_adap(tape: &mut Tape, x: Var, e1: Var, e2: Var, w: Var, steps: usize) -> AdResult<Var> {
    if steps == 0 {
        return tape.affine(x, w, None);
    }
    let a = adaptive_adjacency(tape, e1, e2)?;
    gnn_fixed(tape, x, a, w, steps)
}

/// Tape handles for [`gnn_att`]; `groups[g] = [W_Q, W_K, W_V]`.
pub struct AttWeights {
    pub groups: Vec<[Var; 3]>,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Splits `[R, N, H·w]` into `[R·H, N, w]` head rows.
fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> AdResult<Var> {
    let s = tape.shape(x).to_vec();
    let (r, n, width) = (s[0], s[1], s[2] / heads);
    let x4 = tape.reshape(x, &[r, n, heads, width])?;
    let t = tape.transpose(x4, &[0, 2, 1, 3])?;
    tape.reshape(t, &[r * heads, n, width])
}

fn merge_heads(tape: &mut Tape, x: Var, heads: usize) -> AdResult<Var> {
    let s = tape.shape(x).to_vec();
    let (r, n, width) = (s[0] / heads, s[1], s[2]);
    let x4 = tape.reshape(x, &[r, heads, n, width])?;
    let t = tape.transpose(x4, &[0, 2, 1, 3])?;
    tape.reshape(t, &[r, n, heads * width])
}

/// Pre-projection attention output of one feature group, plus per-head probabilities.
pub fn group_attention(tape: &mut Tape, xg: Var, w: &[Var; 3], heads: usize) -> AdResult<(Var, Var)> {
    let q = tape.affine(xg, w[0], None)?;
    let k = tape.affine(xg, w[1], None)?;
    let v = tape.affine(xg, w[2], None)?;
    let (q, k, v) = (
        split_heads(tape, q, heads)?,
        split_heads(tape, k, heads)?,
        split_heads(tape, v, heads)?,
    );
    let (out, probs) = attention(tape, q, k, v)?;
    Ok((merge_heads(tape, out, heads)?, probs))
}

/// Node-axis multi-head attention with feature grouping, then a two-layer map.
pub fn gnn_att(tape: &mut Tape, x: Var, w: &AttWeights, heads_per_group: usize) -> AdResult<Var> {
    let d = tape.shape(x)[2];
    let g = w.groups.len();
    let width = d / g;
    let mut parts = Vec::with_capacity(g);
    for (i, gw) in w.groups.iter().enumerate() {
        let xg = if g == 1 { x } else { tape.slice(x, 2, i * width, width)? };
        parts.push(group_attention(tape, xg, gw, heads_per_group)?.0);
    }
    let h = tape.concat(&parts, 2)?;
    let hidden = tape.affine(h, w.w1, Some(w.b1))?;
    let act = tape.relu(hidden)?;
    tape.affine(act, w.w2, Some(w.b2))
}
