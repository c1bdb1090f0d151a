//! The full forecasting network: supernet for search, hard network for retraining.

use stnas_autodiff::{Tensor, Var};

use crate::arch::{ArchHyper, DiscreteArchitecture, SearchMode, ARCH_VERSION};
use crate::cell::{Cell, EdgeChoices, Layout};
use crate::data::{Batch, NormStats};
use crate::embedding::{embed_series, fuse_context, ContextTables, EmbeddingParams};
use crate::error::{Result, StnasError};
use crate::ops::{OpContext, OpHyper, OpSpace, Operator};
use crate::params::{Group, Init, ParamId, ParamStore, Session};
use crate::patch::{aggregate_patches, bind_context, compress_time, patch_len, PatchParams};

/// Shapes and search-space settings of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub nodes: usize,
    pub channels: usize,
    pub history: usize,
    pub horizon: usize,
    pub hidden: usize,
    pub patches: usize,
    pub temporal_nodes: usize,
    pub spatial_nodes: usize,
    pub diffusion_steps: usize,
    pub heads: usize,
    pub groups: usize,
    pub node_emb_dim: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    pub steps_per_day: usize,
    pub mode: SearchMode,
    pub eq5_multiplicity: bool,
    pub temporal_space: OpSpace,
    pub spatial_space: OpSpace,
}

impl ModelConfig {
    /// Defaults for everything but the data-dependent shapes.
    pub fn new(nodes: usize, channels: usize, steps_per_day: usize) -> Self {
        Self {
            nodes,
            channels,
            history: 12,
            horizon: 12,
            hidden: 32,
            patches: 3,
            temporal_nodes: 4,
            spatial_nodes: 4,
            diffusion_steps: 2,
            heads: 4,
            groups: 1,
            node_emb_dim: 8,
            kernel_size: 2,
            dilation: 1,
            steps_per_day,
            mode: SearchMode::Decoupled,
            eq5_multiplicity: false,
            temporal_space: OpSpace::temporal(),
            spatial_space: OpSpace::spatial(),
        }
    }

    /// Rebuilds the shape settings recorded in an architecture file.
    pub fn from_arch(arch: &DiscreteArchitecture, nodes: usize, channels: usize, steps_per_day: usize) -> Self {
        let h = &arch.hyperparameters;
        let mut c = Self::new(nodes, channels, steps_per_day);
        c.history = h.history;
        c.horizon = h.horizon;
        c.hidden = h.hidden;
        c.patches = h.patches;
        c.temporal_nodes = h.temporal_nodes;
        c.spatial_nodes = h.spatial_nodes;
        c.diffusion_steps = h.diffusion_steps;
        c.heads = h.heads;
        c.groups = h.groups;
        c.node_emb_dim = h.node_emb_dim;
        c.kernel_size = h.kernel_size;
        c.dilation = h.dilation;
        c.mode = h.mode;
        c.eq5_multiplicity = h.eq5_multiplicity;
        if h.mode == SearchMode::Mixed {
            c.temporal_space = OpSpace::mixed();
            c.spatial_space = OpSpace::mixed();
        }
        c
    }

    pub fn arch_hyper(&self) -> ArchHyper {
        ArchHyper {
            hidden: self.hidden,
            patches: self.patches,
            temporal_nodes: self.temporal_nodes,
            spatial_nodes: self.spatial_nodes,
            diffusion_steps: self.diffusion_steps,
            heads: self.heads,
            groups: self.groups,
            node_emb_dim: self.node_emb_dim,
            kernel_size: self.kernel_size,
            dilation: self.dilation,
            history: self.history,
            horizon: self.horizon,
            mode: self.mode,
            eq5_multiplicity: self.eq5_multiplicity,
        }
    }

    pub fn op_hyper(&self) -> OpHyper {
        OpHyper {
            hidden: self.hidden,
            nodes: self.nodes,
            kernel: self.kernel_size,
            dilation: self.dilation,
            diffusion_steps: self.diffusion_steps,
            heads: self.heads,
            groups: self.groups,
            node_emb_dim: self.node_emb_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("nodes", self.nodes),
            ("channels", self.channels),
            ("history", self.history),
            ("horizon", self.horizon),
            ("temporal_nodes", self.temporal_nodes),
            ("spatial_nodes", self.spatial_nodes),
            ("steps_per_day", self.steps_per_day),
        ] {
            if v == 0 {
                return Err(StnasError::Model(format!("`{name}` must be positive")));
            }
        }
        if self.mode == SearchMode::Decoupled {
            patch_len(self.history, self.patches)?;
        }
        self.op_hyper().validate()
    }

    /// The spaces actually searched: gnn_fixed is dropped without a predefined graph.
    fn effective_spaces(&self, has_graph: bool) -> Result<(OpSpace, OpSpace)> {
        let (t, s) = match self.mode {
            SearchMode::Decoupled => (self.temporal_space.clone(), self.spatial_space.clone()),
            SearchMode::Mixed => (OpSpace::mixed(), OpSpace::mixed()),
        };
        if has_graph {
            return Ok((t, s));
        }
        let strip = |sp: OpSpace| {
            if sp.contains(Operator::GnnFixed) {
                sp.without(Operator::GnnFixed)
            } else {
                Ok(sp)
            }
        };
        Ok((strip(t)?, strip(s)?))
    }
}

#[derive(Clone, Debug)]
struct OutputParams {
    /// `[P, 1]` time compressions: one for H_T, or one per DAG in mixed mode.
    compress: Vec<ParamId>,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// A network instance together with its parameters.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub store: ParamStore,
    /// Temporal DAG, or the first DAG in mixed mode.
    pub temporal: Cell,
    /// Spatial DAG set (one replica per patch), or the second DAG in mixed mode.
    pub spatial: Cell,
    embed: EmbeddingParams,
    patches: Vec<PatchParams>,
    out: OutputParams,
    adjacency: Option<Tensor>,
    pub stats: NormStats,
}

impl Network {
    /// Supernet over the configured spaces, logits at zero.
    pub fn supernet(config: ModelConfig, adjacency: Option<Tensor>, stats: NormStats, seed: u64) -> Result<Self> {
        Self::build(config, adjacency, stats, seed, None)
    }

    /// Hard network realizing `arch`, freshly initialized from `seed`.
    pub fn derived(
        arch: &DiscreteArchitecture,
        nodes: usize,
        channels: usize,
        steps_per_day: usize,
        adjacency: Option<Tensor>,
        stats: NormStats,
        seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        if arch.uses(Operator::GnnFixed) && adjacency.is_none() {
            return Err(StnasError::Architecture(
                "architecture uses gnn_fixed but no adjacency was supplied".into(),
            ));
        }
        let config = ModelConfig::from_arch(arch, nodes, channels, steps_per_day);
        Self::build(config, adjacency, stats, seed, Some(arch))
    }

    fn build(
        config: ModelConfig,
        adjacency: Option<Tensor>,
        stats: NormStats,
        seed: u64,
        arch: Option<&DiscreteArchitecture>,
    ) -> Result<Self> {
        config.validate()?;
        if stats.channels() != config.channels {
            return Err(StnasError::Model(format!(
                "normalization covers {} channels, model has {}",
                stats.channels(),
                config.channels
            )));
        }
        if let Some(a) = &adjacency {
            if a.shape() != [config.nodes, config.nodes] {
                return Err(StnasError::Model(format!(
                    "adjacency {:?} does not match {} nodes",
                    a.shape(),
                    config.nodes
                )));
            }
        }
        let d = config.hidden;
        let hyper = config.op_hyper();
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let embed = EmbeddingParams::register(
            config.channels,
            d,
            config.nodes,
            config.steps_per_day,
            &mut store,
            &mut init,
        );
        let mixed = config.mode == SearchMode::Mixed;
        let (t_layout, s_layout) = if mixed {
            (Layout::Grid, Layout::Grid)
        } else {
            (Layout::Series, Layout::Graph)
        };
        let (t_name, s_name) = if mixed {
            ("dag1", "dag2")
        } else {
            ("temporal", "spatial")
        };
        let replicas = if mixed { 1 } else { config.patches };
        let mult = config.eq5_multiplicity;

        let temporal = match arch {
            None => {
                let (t_space, _) = config.effective_spaces(adjacency.is_some())?;
                Cell::soft(
                    t_name,
                    t_space,
                    config.temporal_nodes,
                    1,
                    t_layout,
                    mult,
                    &hyper,
                    &mut store,
                    &mut init,
                )?
            }
            Some(a) => Cell::hard(
                t_name,
                std::slice::from_ref(&a.temporal_edges),
                config.temporal_nodes,
                t_layout,
                mult,
                &hyper,
                &mut store,
                &mut init,
            )?,
        };
        let patches = if mixed {
            Vec::new()
        } else {
            let len = patch_len(config.history, config.patches)?;
            (0..config.patches)
                .map(|m| PatchParams::register(m, len, d, &mut store, &mut init))
                .collect()
        };
        let spatial = match arch {
            None => {
                let (_, s_space) = config.effective_spaces(adjacency.is_some())?;
                Cell::soft(
                    s_name,
                    s_space,
                    config.spatial_nodes,
                    replicas,
                    s_layout,
                    mult,
                    &hyper,
                    &mut store,
                    &mut init,
                )?
            }
            Some(a) => Cell::hard(
                s_name,
                &a.spatial_dags,
                config.spatial_nodes,
                s_layout,
                mult,
                &hyper,
                &mut store,
                &mut init,
            )?,
        };
        let p = config.history;
        let n_compress = if mixed { 2 } else { 1 };
        let compress = (0..n_compress)
            .map(|i| store.add(format!("output.compress{i}"), Group::Weights, init.fan_in(&[p, 1], p)))
            .collect();
        let qc = config.horizon * config.channels;
        let out = OutputParams {
            compress,
            w1: store.add("output.w1", Group::Weights, init.fan_in(&[3 * d, 4 * d], 3 * d)),
            b1: store.add("output.b1", Group::Weights, init.fan_in(&[4 * d], 3 * d)),
            w2: store.add("output.w2", Group::Weights, init.fan_in(&[4 * d, qc], 4 * d)),
            b2: store.add("output.b2", Group::Weights, init.fan_in(&[qc], 4 * d)),
        };
        Ok(Self {
            config,
            store,
            temporal,
            spatial,
            embed,
            patches,
            out,
            adjacency,
            stats,
        })
    }

    pub fn is_supernet(&self) -> bool {
        self.temporal.is_soft() && self.spatial.is_soft()
    }

    /// Argmax architecture of a supernet (or the fixed choices of a hard network).
    pub fn derive(&self) -> DiscreteArchitecture {
        DiscreteArchitecture {
            version: ARCH_VERSION,
            hyperparameters: self.config.arch_hyper(),
            temporal_edges: self.temporal.derive(&self.store).remove(0),
            spatial_dags: self.spatial.derive(&self.store),
        }
    }

    /// Pins supernet logits to ±`high` at the operators chosen by `arch`.
    pub fn pin_logits(&mut self, arch: &DiscreteArchitecture, high: f64) -> Result<()> {
        let t = self.temporal.clone();
        let s = self.spatial.clone();
        t.pin_logits(&mut self.store, std::slice::from_ref(&arch.temporal_edges), high)?;
        s.pin_logits(&mut self.store, &arch.spatial_dags, high)
    }

    /// Copies every parameter of `other` whose name and shape match one here.
    pub fn inherit(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for id in self.store.ids().collect::<Vec<_>>() {
            let name = self.store.param(id).name.clone();
            if let Some(src) = other.find(&name) {
                if other.value(src).shape() == self.store.value(id).shape() {
                    *self.store.value_mut(id) = other.value(src).clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Denormalized predictions `[B, Q, N, C]` for normalized inputs `[B, P, N, C]`.
    pub fn forward(&self, sess: &mut Session<'_>, inputs: &Tensor, tod: &[usize], dow: &[usize]) -> Result<Var> {
        let c = &self.config;
        let s = inputs.shape();
        if s.len() != 4 || s[1] != c.history || s[2] != c.nodes || s[3] != c.channels {
            return Err(StnasError::Model(format!(
                "input: expected [B, {}, {}, {}], got {s:?}",
                c.history, c.nodes, c.channels
            )));
        }
        if tod.len() != s[0] {
            return Err(StnasError::Model(format!(
                "input: {} samples but {} time indices",
                s[0],
                tod.len()
            )));
        }
        let (b, p, n, d) = (s[0], c.history, c.nodes, c.hidden);
        let hyper = c.op_hyper();
        let adjacency = self.adjacency.as_ref().map(|a| sess.tape.constant(a.clone()));
        let ctx = OpContext {
            hyper: &hyper,
            adjacency,
        };

        let x = sess.tape.constant(inputs.clone());
        let (w_t, b_t) = (sess.param(self.embed.w_t), sess.param(self.embed.b_t));
        let z0 = embed_series(&mut sess.tape, x, w_t, b_t).map_err(stage("embedding"))?;
        let tables = ContextTables {
            e_node: sess.param(self.embed.e_node),
            e_tod: sess.param(self.embed.e_tod),
            e_dow: sess.param(self.embed.e_dow),
            w_fuse: sess.param(self.embed.w_fuse),
            b_fuse: sess.param(self.embed.b_fuse),
        };
        let e_emb = fuse_context(&mut sess.tape, tod, dow, &tables).map_err(stage("context"))?;

        let summary = match c.mode {
            SearchMode::Decoupled => {
                let t = &mut sess.tape;
                let perm = t.transpose(z0, &[0, 2, 1, 3]).map_err(ad_stage("embedding"))?;
                let series = t.reshape(perm, &[b * n, p, d]).map_err(ad_stage("embedding"))?;
                let h_t = self
                    .temporal
                    .forward(sess, series, &ctx)
                    .map_err(stage("temporal DAG"))?;
                let h_s = self
                    .spatial_branch(sess, h_t, e_emb, b, &ctx)
                    .map_err(stage("spatial DAG"))?;
                let w = sess.param(self.out.compress[0]);
                let ht = compress_time(&mut sess.tape, h_t, w, None).map_err(stage("output"))?;
                let ht = sess.tape.reshape(ht, &[b, n, d]).map_err(ad_stage("output"))?;
                vec![e_emb, ht, h_s]
            }
            SearchMode::Mixed => {
                let h1 = self
                    .temporal
                    .forward(sess, z0, &ctx)
                    .map_err(stage("first mixed DAG"))?;
                let h2 = self
                    .spatial
                    .forward(sess, h1, &ctx)
                    .map_err(stage("second mixed DAG"))?;
                let mut parts = vec![e_emb];
                for (h, &wid) in [h1, h2].iter().zip(&self.out.compress) {
                    let w = sess.param(wid);
                    let t = &mut sess.tape;
                    let perm = t.transpose(*h, &[0, 2, 3, 1]).map_err(ad_stage("output"))?;
                    let rows = t.reshape(perm, &[b * n, d, p]).map_err(ad_stage("output"))?;
                    let rows = t.transpose(rows, &[0, 2, 1]).map_err(ad_stage("output"))?;
                    let cmp = compress_time(t, rows, w, None).map_err(stage("output"))?;
                    parts.push(t.reshape(cmp, &[b, n, d]).map_err(ad_stage("output"))?);
                }
                parts
            }
        };
        self.head(sess, &summary, b).map_err(stage("output"))
    }

    /// Patch transfer, stacked spatial DAGs, and aggregation: `[B, N, D]`.
    fn spatial_branch(
        &self,
        sess: &mut Session<'_>,
        h_t: Var,
        e_emb: Var,
        b: usize,
        ctx: &OpContext<'_>,
    ) -> Result<Var> {
        let (n, d, m) = (self.config.nodes, self.config.hidden, self.config.patches);
        let parts = crate::patch::split_patches(&mut sess.tape, h_t, m)?;
        let mut bound = Vec::with_capacity(m);
        for (part, pp) in parts.into_iter().zip(&self.patches) {
            let (w_l, b_l) = (sess.param(pp.w_l), sess.param(pp.b_l));
            let (w_b, b_b) = (sess.param(pp.w_bind), sess.param(pp.b_bind));
            let c = compress_time(&mut sess.tape, part, w_l, Some(b_l))?;
            let c = sess.tape.reshape(c, &[b, n, d])?;
            bound.push(bind_context(&mut sess.tape, c, e_emb, w_b, b_b)?);
        }
        let stacked = sess.tape.concat(&bound, 0)?;
        let out = self.spatial.forward(sess, stacked, ctx)?;
        let per_patch = (0..m)
            .map(|i| sess.tape.slice(out, 0, i * b, b))
            .collect::<stnas_autodiff::Result<Vec<_>>>()?;
        aggregate_patches(&mut sess.tape, &per_patch)
    }

    fn head(&self, sess: &mut Session<'_>, parts: &[Var], b: usize) -> Result<Var> {
        let c = &self.config;
        let (w1, b1, w2, b2) = (
            sess.param(self.out.w1),
            sess.param(self.out.b1),
            sess.param(self.out.w2),
            sess.param(self.out.b2),
        );
        let t = &mut sess.tape;
        let h = t.concat(parts, 2)?;
        let z = t.affine(h, w1, Some(b1))?;
        let z = t.relu(z)?;
        let y = t.affine(z, w2, Some(b2))?;
        let y = t.reshape(y, &[b, c.nodes, c.horizon, c.channels])?;
        let y = t.transpose(y, &[0, 2, 1, 3])?;
        // per-channel x·σ + μ through a diagonal matmul
        let ch = c.channels;
        let mut diag = Tensor::zeros(&[ch, ch]);
        for i in 0..ch {
            diag.data_mut()[i * ch + i] = self.stats.std[i];
        }
        let scale = t.constant(diag);
        let shift = t.constant(Tensor::from_vec(self.stats.mean.clone()));
        Ok(t.affine(y, scale, Some(shift))?)
    }

    /// Inference-only predictions for a batch.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        let mut sess = Session::new(&self.store, None);
        let y = self.forward(&mut sess, &batch.inputs, &batch.tod, &batch.dow)?;
        Ok(sess.tape.value(y).clone())
    }

    /// Evaluates spatial DAG `m` alone on `h[B, N, D]`.
    pub fn spatial_dag_forward(&self, sess: &mut Session<'_>, h: Var, m: usize) -> Result<Var> {
        let hyper = self.config.op_hyper();
        let adjacency = self.adjacency.as_ref().map(|a| sess.tape.constant(a.clone()));
        let ctx = OpContext {
            hyper: &hyper,
            adjacency,
        };
        self.spatial.forward_replica(sess, h, m, &ctx)
    }

    /// Evaluates the temporal DAG alone on series `z0[S, P, D]`.
    pub fn temporal_dag_forward(&self, sess: &mut Session<'_>, z0: Var) -> Result<Var> {
        let hyper = self.config.op_hyper();
        let adjacency = self.adjacency.as_ref().map(|a| sess.tape.constant(a.clone()));
        let ctx = OpContext {
            hyper: &hyper,
            adjacency,
        };
        self.temporal.forward(sess, z0, &ctx)
    }

    pub fn spatial_choices(&self) -> Vec<EdgeChoices> {
        self.spatial.derive(&self.store)
    }

    pub fn adjacency(&self) -> Option<&Tensor> {
        self.adjacency.as_ref()
    }
}

fn stage(name: &'static str) -> impl Fn(StnasError) -> StnasError {
    move |e| match e {
        StnasError::Autodiff(source) => StnasError::Stage { stage: name, source },
        other => other,
    }
}

fn ad_stage(name: &'static str) -> impl Fn(stnas_autodiff::AutodiffError) -> StnasError {
    crate::error::at_stage(name)
}

/// Mean `|pred − target|` over positions whose target is not the sentinel.
pub fn loss_masked_mae(sess: &mut Session<'_>, pred: Var, target: &Tensor, null_value: Option<f64>) -> Result<Var> {
    let t = &mut sess.tape;
    if t.shape(pred) != target.shape() {
        return Err(StnasError::Model(format!(
            "loss: prediction {:?} vs target {:?}",
            t.shape(pred),
            target.shape()
        )));
    }
    let mask: Vec<f64> = target
        .data()
        .iter()
        .map(|&v| if Some(v) == null_value { 0.0 } else { 1.0 })
        .collect();
    let count: f64 = mask.iter().sum();
    if count == 0.0 {
        return Err(StnasError::Model("loss: every target position is masked".into()));
    }
    let tv = t.constant(target.clone());
    let diff = t.sub(pred, tv)?;
    let neg = t.scale(diff, -1.0)?;
    let pos = t.relu(diff)?;
    let negr = t.relu(neg)?;
    let mut abs = t.add(pos, negr)?;
    if count < mask.len() as f64 {
        let m = t.constant(Tensor::new(target.shape().to_vec(), mask)?);
        abs = t.mul(abs, m)?;
    }
    let total = t.sum_all(abs)?;
    Ok(t.scale(total, 1.0 / count)?)
}
