//! Searchable DAG cells: node `j` sums one mixed edge from every earlier node.
//!
//! A cell may carry several replicas that share operator weights per edge but own
//! separate logits; the replicas are stacked along the leading axis of the input.

use std::collections::BTreeMap;

use stnas_autodiff::{Tensor, Var};

use crate::error::{Result, StnasError};
use crate::ops::{apply_op, OpContext, OpHyper, OpParams, OpSpace, Operator};
use crate::params::{Group, Init, ParamId, ParamStore, Session};

/// Per-replica operator choice for every edge, keyed `"i->j"`.
pub type EdgeChoices = BTreeMap<String, Operator>;

/// How node values are laid out, which decides the operators a cell accepts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// `[S, P, D]`, temporal operators only.
    Series,
    /// `[R, N, D]`, spatial operators only.
    Graph,
    /// `[B, P, N, D]`; every operator, with per-operator reshaping.
    Grid,
}

impl Layout {
    fn accepts(self, op: Operator) -> bool {
        match self {
            Layout::Series => !op.is_spatial(),
            Layout::Graph => !op.is_temporal(),
            Layout::Grid => true,
        }
    }
}

/// Edges `(i, j)`, `i < j ≤ nodes`, ordered by target then source.
pub fn edge_list(nodes: usize) -> Vec<(usize, usize)> {
    (1..=nodes).flat_map(|j| (0..j).map(move |i| (i, j))).collect()
}

pub fn edge_key(i: usize, j: usize) -> String {
    format!("{i}->{j}")
}

#[derive(Clone, Debug)]
pub enum Choice {
    /// One logits vector per replica, each over the cell's space.
    Soft(Vec<ParamId>),
    /// One operator per replica.
    Hard(Vec<Operator>),
}

#[derive(Clone, Debug)]
pub struct CellEdge {
    pub from: usize,
    pub to: usize,
    /// Weights shared by all replicas at this edge position.
    pub bank: Vec<(Operator, OpParams)>,
    pub choice: Choice,
}

impl CellEdge {
    pub fn key(&self) -> String {
        edge_key(self.from, self.to)
    }

    pub fn params(&self, op: Operator) -> Option<&OpParams> {
        self.bank.iter().find(|(o, _)| *o == op).map(|(_, p)| p)
    }
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub name: String,
    pub space: OpSpace,
    pub nodes: usize,
    pub replicas: usize,
    pub layout: Layout,
    /// Weight node `j` by its predecessor count `j` in the output sum.
    pub multiplicity: bool,
    pub edges: Vec<CellEdge>,
}

fn check_shape(nodes: usize, replicas: usize) -> Result<()> {
    if nodes == 0 || replicas == 0 {
        return Err(StnasError::Model(format!(
            "cell needs at least one node and one replica, got {nodes} and {replicas}"
        )));
    }
    Ok(())
}

impl Cell {
    /// Continuous relaxation over `space` with zero-initialized logits.
    #[allow(clippy::too_many_arguments)]
    pub fn soft(
        name: &str,
        space: OpSpace,
        nodes: usize,
        replicas: usize,
        layout: Layout,
        multiplicity: bool,
        hyper: &OpHyper,
        store: &mut ParamStore,
        init: &mut Init,
    ) -> Result<Self> {
        check_shape(nodes, replicas)?;
        if let Some(op) = space.ops().iter().find(|o| !layout.accepts(**o)) {
            return Err(StnasError::Model(format!(
                "operator `{op}` cannot run in cell `{name}`"
            )));
        }
        let mut edges = Vec::new();
        for (i, j) in edge_list(nodes) {
            let key = edge_key(i, j);
            let bank = space
                .ops()
                .iter()
                .map(|&op| {
                    (
                        op,
                        OpParams::register(op, &format!("{name}.{key}.{op}"), hyper, store, init),
                    )
                })
                .collect();
            let logits = (0..replicas)
                .map(|m| {
                    let pname = if replicas == 1 {
                        format!("{name}.logits.{key}")
                    } else {
                        format!("{name}.logits.m{m}.{key}")
                    };
                    store.add(pname, Group::Arch, Tensor::zeros(&[space.len()]))
                })
                .collect();
            edges.push(CellEdge {
                from: i,
                to: j,
                bank,
                choice: Choice::Soft(logits),
            });
        }
        Ok(Self {
            name: name.to_string(),
            space,
            nodes,
            replicas,
            layout,
            multiplicity,
            edges,
        })
    }

    /// Fixed operator per edge and replica; `choices[m]` must cover every edge.
    #[allow(clippy::too_many_arguments)]
    pub fn hard(
        name: &str,
        choices: &[EdgeChoices],
        nodes: usize,
        layout: Layout,
        multiplicity: bool,
        hyper: &OpHyper,
        store: &mut ParamStore,
        init: &mut Init,
    ) -> Result<Self> {
        check_shape(nodes, choices.len())?;
        let mut used = Vec::new();
        let mut edges = Vec::new();
        for (i, j) in edge_list(nodes) {
            let key = edge_key(i, j);
            let mut ops = Vec::with_capacity(choices.len());
            for (m, c) in choices.iter().enumerate() {
                let op = *c.get(&key).ok_or_else(|| {
                    StnasError::Architecture(format!("cell `{name}` replica {m} has no operator for edge {key}"))
                })?;
                if !layout.accepts(op) {
                    return Err(StnasError::Architecture(format!(
                        "operator `{op}` cannot run in cell `{name}` (edge {key})"
                    )));
                }
                ops.push(op);
            }
            let mut bank: Vec<(Operator, OpParams)> = Vec::new();
            for op in Operator::ALL.into_iter().filter(|o| ops.contains(o)) {
                bank.push((
                    op,
                    OpParams::register(op, &format!("{name}.{key}.{op}"), hyper, store, init),
                ));
                if !used.contains(&op) {
                    used.push(op);
                }
            }
            edges.push(CellEdge {
                from: i,
                to: j,
                bank,
                choice: Choice::Hard(ops),
            });
        }
        for (m, c) in choices.iter().enumerate() {
            if c.len() != edges.len() {
                return Err(StnasError::Architecture(format!(
                    "cell `{name}` replica {m} lists {} edges, expected {}",
                    c.len(),
                    edges.len()
                )));
            }
        }
        used.sort();
        Ok(Self {
            name: name.to_string(),
            space: OpSpace::new(used)?,
            nodes,
            replicas: choices.len(),
            layout,
            multiplicity,
            edges,
        })
    }

    pub fn is_soft(&self) -> bool {
        self.edges.iter().all(|e| matches!(e.choice, Choice::Soft(_)))
    }

    /// Logit values per edge and replica (soft cells only).
    pub fn logits(&self, store: &ParamStore) -> Vec<Vec<Vec<f64>>> {
        self.edges
            .iter()
            .map(|e| match &e.choice {
                Choice::Soft(ids) => ids.iter().map(|&id| store.value(id).data().to_vec()).collect(),
                Choice::Hard(_) => Vec::new(),
            })
            .collect()
    }

    /// Argmax operator per edge, one map per replica.
    pub fn derive(&self, store: &ParamStore) -> Vec<EdgeChoices> {
        let mut out = vec![EdgeChoices::new(); self.replicas];
        for e in &self.edges {
            for (m, slot) in out.iter_mut().enumerate() {
                let op = match &e.choice {
                    Choice::Soft(ids) => self.space.argmax(store.value(ids[m]).data()),
                    Choice::Hard(ops) => ops[m],
                };
                slot.insert(e.key(), op);
            }
        }
        out
    }

    /// Sets every soft logit to `+high` at the operator chosen in `choices` and `−high` elsewhere.
    pub fn pin_logits(&self, store: &mut ParamStore, choices: &[EdgeChoices], high: f64) -> Result<()> {
        for e in &self.edges {
            let Choice::Soft(ids) = &e.choice else {
                return Err(StnasError::Model(format!("cell `{}` is not soft", self.name)));
            };
            for (m, &id) in ids.iter().enumerate() {
                let op = choices[m][&e.key()];
                let idx = self.space.index_of(op).ok_or_else(|| {
                    StnasError::Architecture(format!("operator `{op}` not in the space of `{}`", self.name))
                })?;
                for (k, v) in store.value_mut(id).data_mut().iter_mut().enumerate() {
                    *v = if k == idx { high } else { -high };
                }
            }
        }
        Ok(())
    }

    /// Evaluates all replicas on their stacked inputs.
    pub fn forward(&self, sess: &mut Session<'_>, x0: Var, ctx: &OpContext<'_>) -> Result<Var> {
        self.forward_impl(sess, x0, ctx, None)
    }

    /// Evaluates replica `m` alone on an unstacked input.
    pub fn forward_replica(&self, sess: &mut Session<'_>, x0: Var, m: usize, ctx: &OpContext<'_>) -> Result<Var> {
        if m >= self.replicas {
            return Err(StnasError::Model(format!(
                "cell `{}` has {} replicas, asked for {m}",
                self.name, self.replicas
            )));
        }
        self.forward_impl(sess, x0, ctx, Some(m))
    }

    fn forward_impl(&self, sess: &mut Session<'_>, x0: Var, ctx: &OpContext<'_>, only: Option<usize>) -> Result<Var> {
        let mut views = Views::new(self.nodes + 1);
        let mut nodes: Vec<Option<Var>> = vec![None; self.nodes + 1];
        nodes[0] = Some(x0);
        let shape = sess.tape.shape(x0).to_vec();
        for j in 1..=self.nodes {
            let mut acc: Option<Var> = None;
            for e in self.edges.iter().filter(|e| e.to == j) {
                let x = nodes[e.from].expect("earlier node computed");
                if let Some(term) = self.edge_forward(sess, e, x, &mut views, ctx, only)? {
                    acc = Some(match acc {
                        Some(a) => sess.tape.add(a, term)?,
                        None => term,
                    });
                }
            }
            nodes[j] = Some(match acc {
                Some(a) => a,
                None => sess.tape.constant(Tensor::zeros(&shape)),
            });
        }
        let mut out: Option<Var> = None;
        for (j, v) in nodes.iter().enumerate().skip(1) {
            let mut v = v.expect("node computed");
            if self.multiplicity && j > 1 {
                v = sess.tape.scale(v, j as f64)?;
            }
            out = Some(match out {
                Some(o) => sess.tape.add(o, v)?,
                None => v,
            });
        }
        Ok(out.expect("at least one node"))
    }

    /// Weighted operator outputs of one edge; `None` when every term is exactly zero.
    fn edge_forward(
        &self,
        sess: &mut Session<'_>,
        e: &CellEdge,
        x: Var,
        views: &mut Views,
        ctx: &OpContext<'_>,
        only: Option<usize>,
    ) -> Result<Option<Var>> {
        let shape = sess.tape.shape(x).to_vec();
        let replicas = if only.is_some() { 1 } else { self.replicas };
        let mut terms = Vec::new();
        match &e.choice {
            Choice::Soft(all) => {
                let ids = match only {
                    Some(m) => &all[m..=m],
                    None => &all[..],
                };
                let weights = if replicas == 1 {
                    let l = sess.param(ids[0]);
                    sess.tape.softmax(l, 0)?
                } else {
                    let rows = ids
                        .iter()
                        .map(|&id| {
                            let l = sess.param(id);
                            sess.tape.reshape(l, &[1, self.space.len()])
                        })
                        .collect::<stnas_autodiff::Result<Vec<_>>>()?;
                    let stacked = sess.tape.concat(&rows, 0)?;
                    sess.tape.softmax(stacked, 1)?
                };
                for (k, &op) in self.space.ops().iter().enumerate() {
                    if op == Operator::Zero {
                        continue;
                    }
                    let y = self.run(sess, e, op, x, e.from, views, ctx)?;
                    terms.push(weigh(sess, replicas, weights, k, y, &shape)?);
                }
            }
            Choice::Hard(all) => {
                let ops = match only {
                    Some(m) => &all[m..=m],
                    None => &all[..],
                };
                let first = ops[0];
                if ops.iter().all(|&o| o == first) {
                    if first != Operator::Zero {
                        terms.push(self.run(sess, e, first, x, e.from, views, ctx)?);
                    }
                } else {
                    let rows = shape[0] / replicas;
                    let mut outs: Vec<(Operator, Var)> = Vec::new();
                    let mut parts = Vec::with_capacity(ops.len());
                    for (m, &op) in ops.iter().enumerate() {
                        let part = if op == Operator::Zero {
                            let mut s = shape.clone();
                            s[0] = rows;
                            sess.tape.constant(Tensor::zeros(&s))
                        } else {
                            let y = match outs.iter().find(|(o, _)| *o == op) {
                                Some((_, y)) => *y,
                                None => {
                                    let y = self.run(sess, e, op, x, e.from, views, ctx)?;
                                    outs.push((op, y));
                                    y
                                }
                            };
                            sess.tape.slice(y, 0, m * rows, rows)?
                        };
                        parts.push(part);
                    }
                    terms.push(sess.tape.concat(&parts, 0)?);
                }
            }
        }
        let mut acc: Option<Var> = None;
        for t in terms {
            acc = Some(match acc {
                Some(a) => sess.tape.add(a, t)?,
                None => t,
            });
        }
        Ok(acc)
    }

    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        sess: &mut Session<'_>,
        e: &CellEdge,
        op: Operator,
        x: Var,
        node: usize,
        views: &mut Views,
        ctx: &OpContext<'_>,
    ) -> Result<Var> {
        let params = e
            .params(op)
            .ok_or_else(|| StnasError::Model(format!("edge {} has no weights for `{op}`", e.key())))?;
        if self.layout != Layout::Grid || op.is_parameter_free() {
            return apply_op(sess, op, params, x, ctx);
        }
        let s = sess.tape.shape(x).to_vec();
        let (b, p, n, d) = (s[0], s[1], s[2], s[3]);
        if op.is_temporal() {
            let v = match views.series[node] {
                Some(v) => v,
                None => {
                    let t = sess.tape.transpose(x, &[0, 2, 1, 3])?;
                    let v = sess.tape.reshape(t, &[b * n, p, d])?;
                    views.series[node] = Some(v);
                    v
                }
            };
            let y = apply_op(sess, op, params, v, ctx)?;
            let y4 = sess.tape.reshape(y, &[b, n, p, d])?;
            Ok(sess.tape.transpose(y4, &[0, 2, 1, 3])?)
        } else {
            let v = match views.graph[node] {
                Some(v) => v,
                None => {
                    let v = sess.tape.reshape(x, &[b * p, n, d])?;
                    views.graph[node] = Some(v);
                    v
                }
            };
            let y = apply_op(sess, op, params, v, ctx)?;
            Ok(sess.tape.reshape(y, &[b, p, n, d])?)
        }
    }
}

/// Scales `y` by mixing weight `k` of each replica.
fn weigh(sess: &mut Session<'_>, replicas: usize, weights: Var, k: usize, y: Var, shape: &[usize]) -> Result<Var> {
    let t = &mut sess.tape;
    if replicas == 1 {
        let w = t.slice(weights, 0, k, 1)?;
        return Ok(t.scale_by(w, y)?);
    }
    let m = replicas;
    let rest = shape.iter().product::<usize>() / m;
    let col = t.slice(weights, 1, k, 1)?;
    let w3 = t.reshape(col, &[m, 1, 1])?;
    let y3 = t.reshape(y, &[m, 1, rest])?;
    let scaled = t.matmul(w3, y3)?;
    Ok(t.reshape(scaled, shape)?)
}

/// Reshaped copies of node values, computed once per node.
struct Views {
    series: Vec<Option<Var>>,
    graph: Vec<Option<Var>>,
}

impl Views {
    fn new(n: usize) -> Self {
        Self {
            series: vec![None; n],
            graph: vec![None; n],
        }
    }
}
