//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use stnas_autodiff::Tensor;

use crate::arch::SearchMode;
use crate::data::{load_graph, load_signals, split_and_window, DatasetSplits, GraphSignalMatrix};
use crate::error::{Result, StnasError};
use crate::model::ModelConfig;
use crate::ops::{OpSpace, Operator};
use crate::optim::AdamConfig;
use crate::search::SearchConfig;
use crate::train::TrainConfig;

/// Which spatial operators the search may pick from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpatialSpace {
    Full,
    /// Only zero and identity: no message passing at all.
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
    /// One file per channel.
    pub signals: Vec<PathBuf>,
    pub adjacency: Option<PathBuf>,
    pub null_value: Option<f64>,
    pub interval_minutes: Option<u32>,
    pub history: usize,
    pub horizon: usize,
    pub split: [f64; 3],
    pub patches: usize,
    pub hidden: usize,
    pub temporal_nodes: usize,
    pub spatial_nodes: usize,
    pub diffusion_steps: usize,
    pub heads: usize,
    pub groups: usize,
    pub node_emb_dim: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub search_epochs: usize,
    pub train_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub eq5_multiplicity: bool,
    pub mode: SearchMode,
    pub spatial_space: SpatialSpace,
    pub batches_per_epoch: Option<usize>,
}

const KEYS: &[&str] = &[
    "signals",
    "adjacency",
    "null_value",
    "interval_minutes",
    "history",
    "horizon",
    "split",
    "patches",
    "hidden",
    "temporal_nodes",
    "spatial_nodes",
    "diffusion_steps",
    "heads",
    "groups",
    "node_emb_dim",
    "kernel_size",
    "dilation",
    "lr",
    "weight_decay",
    "batch_size",
    "search_epochs",
    "train_epochs",
    "patience",
    "seed",
    "eq5_multiplicity",
    "mode",
    "spatial_space",
    "batches_per_epoch",
];

impl RunConfig {
    /// Defaults for everything except the data paths.
    pub fn new(signals: Vec<PathBuf>) -> Self {
        Self {
            base_dir: PathBuf::from("."),
            signals,
            adjacency: None,
            null_value: None,
            interval_minutes: None,
            history: 12,
            horizon: 12,
            split: [0.7, 0.1, 0.2],
            patches: 3,
            hidden: 32,
            temporal_nodes: 4,
            spatial_nodes: 4,
            diffusion_steps: 2,
            heads: 4,
            groups: 1,
            node_emb_dim: 8,
            kernel_size: 2,
            dilation: 1,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 64,
            search_epochs: 10,
            train_epochs: 30,
            patience: 5,
            seed: 0,
            eq5_multiplicity: false,
            mode: SearchMode::Decoupled,
            spatial_space: SpatialSpace::Full,
            batches_per_epoch: None,
        }
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut entries: BTreeMap<&str, &str> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| StnasError::Parse(format!("config line {}: expected key = value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(StnasError::config(k, "unknown key"));
            }
            if entries.insert(k, v).is_some() {
                return Err(StnasError::config(k, "given more than once"));
            }
        }
        let signals = entries
            .get("signals")
            .ok_or_else(|| StnasError::config("signals", "required"))?
            .split(',')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(PathBuf::from)
            .collect::<Vec<_>>();
        if signals.is_empty() {
            return Err(StnasError::config("signals", "no paths given"));
        }
        let mut c = Self::new(signals);
        c.base_dir = base_dir.to_path_buf();
        for (&k, &v) in &entries {
            match k {
                "signals" => {}
                "adjacency" => c.adjacency = (!v.is_empty()).then(|| PathBuf::from(v)),
                "null_value" => {
                    c.null_value = if v.is_empty() || v == "none" {
                        None
                    } else {
                        Some(num(k, v)?)
                    }
                }
                "interval_minutes" => c.interval_minutes = Some(num(k, v)?),
                "history" => c.history = num(k, v)?,
                "horizon" => c.horizon = num(k, v)?,
                "split" => c.split = ratios(v)?,
                "patches" => c.patches = num(k, v)?,
                "hidden" => c.hidden = num(k, v)?,
                "temporal_nodes" => c.temporal_nodes = num(k, v)?,
                "spatial_nodes" => c.spatial_nodes = num(k, v)?,
                "diffusion_steps" => c.diffusion_steps = num(k, v)?,
                "heads" => c.heads = num(k, v)?,
                "groups" => c.groups = num(k, v)?,
                "node_emb_dim" => c.node_emb_dim = num(k, v)?,
                "kernel_size" => c.kernel_size = num(k, v)?,
                "dilation" => c.dilation = num(k, v)?,
                "lr" => c.lr = num(k, v)?,
                "weight_decay" => c.weight_decay = num(k, v)?,
                "batch_size" => c.batch_size = num(k, v)?,
                "search_epochs" => c.search_epochs = num(k, v)?,
                "train_epochs" => c.train_epochs = num(k, v)?,
                "patience" => c.patience = num(k, v)?,
                "seed" => c.seed = num(k, v)?,
                "eq5_multiplicity" => c.eq5_multiplicity = num(k, v)?,
                "mode" => {
                    c.mode = v
                        .parse()
                        .map_err(|_| StnasError::config(k, format!("`{v}` is not decoupled or mixed")))?
                }
                "spatial_space" => {
                    c.spatial_space = match v {
                        "full" => SpatialSpace::Full,
                        "none" => SpatialSpace::None,
                        _ => return Err(StnasError::config(k, format!("`{v}` is not full or none"))),
                    }
                }
                "batches_per_epoch" => c.batches_per_epoch = Some(num(k, v)?),
                _ => unreachable!("key list checked above"),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| StnasError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("history", self.history),
            ("horizon", self.horizon),
            ("patches", self.patches),
            ("hidden", self.hidden),
            ("temporal_nodes", self.temporal_nodes),
            ("spatial_nodes", self.spatial_nodes),
            ("heads", self.heads),
            ("groups", self.groups),
            ("node_emb_dim", self.node_emb_dim),
            ("kernel_size", self.kernel_size),
            ("dilation", self.dilation),
            ("batch_size", self.batch_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(StnasError::config(k, "must be at least 1"));
            }
        }
        if self.batches_per_epoch == Some(0) {
            return Err(StnasError::config("batches_per_epoch", "must be at least 1"));
        }
        if self.interval_minutes.is_some_and(|m| m == 0 || 1440 % m != 0) {
            return Err(StnasError::config("interval_minutes", "must divide 1440"));
        }
        if self.mode == SearchMode::Decoupled && !self.history.is_multiple_of(self.patches) {
            return Err(StnasError::config(
                "patches",
                format!("{} does not divide history {}", self.patches, self.history),
            ));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(StnasError::config(
                "heads",
                format!("must divide hidden {}", self.hidden),
            ));
        }
        if !self.hidden.is_multiple_of(self.groups) {
            return Err(StnasError::config(
                "groups",
                format!("must divide hidden {}", self.hidden),
            ));
        }
        let (hpg, width) = (
            (self.heads / self.groups).max(1),
            self.hidden / self.groups / (self.heads / self.groups).max(1),
        );
        if hpg * width * self.groups != self.hidden {
            return Err(StnasError::config("heads", "heads and groups do not tile hidden"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(StnasError::config("lr", "must be a finite non-negative number"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(StnasError::config(
                "weight_decay",
                "must be a finite non-negative number",
            ));
        }
        if self.null_value.is_some_and(|v| !v.is_finite()) {
            return Err(StnasError::config("null_value", "must be finite"));
        }
        Ok(())
    }

    /// Resolves `p` against the config directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Loads every channel file and the optional graph.
    pub fn load_signals(&self) -> Result<(GraphSignalMatrix, Option<Tensor>)> {
        let parts = self
            .signals
            .iter()
            .map(|p| load_signals(&self.resolve(p), self.null_value))
            .collect::<Result<Vec<_>>>()?;
        let mut signals = GraphSignalMatrix::stack_channels(parts)?;
        if self.interval_minutes.is_some() {
            signals.interval_minutes = self.interval_minutes;
        }
        let adjacency = match &self.adjacency {
            Some(p) => Some(load_graph(&self.resolve(p), signals.nodes)?.adjacency),
            None => None,
        };
        Ok((signals, adjacency))
    }

    /// Loads, splits and windows the data.
    pub fn load_data(&self) -> Result<(DatasetSplits, Option<Tensor>)> {
        let (signals, adjacency) = self.load_signals()?;
        let splits = split_and_window(&signals, self.split, self.history, self.horizon)?;
        Ok((splits, adjacency))
    }

    pub fn model_config(&self, splits: &DatasetSplits) -> Result<ModelConfig> {
        let ds = &splits.train;
        let mut m = ModelConfig::new(ds.nodes, ds.channels, ds.time.steps_per_day());
        m.history = self.history;
        m.horizon = self.horizon;
        m.hidden = self.hidden;
        m.patches = self.patches;
        m.temporal_nodes = self.temporal_nodes;
        m.spatial_nodes = self.spatial_nodes;
        m.diffusion_steps = self.diffusion_steps;
        m.heads = self.heads;
        m.groups = self.groups;
        m.node_emb_dim = self.node_emb_dim;
        m.kernel_size = self.kernel_size;
        m.dilation = self.dilation;
        m.mode = self.mode;
        m.eq5_multiplicity = self.eq5_multiplicity;
        if self.spatial_space == SpatialSpace::None {
            m.spatial_space = OpSpace::spatial().restricted(&[Operator::Zero, Operator::Identity])?;
        }
        m.validate()?;
        Ok(m)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            epochs: self.search_epochs,
            batch_size: self.batch_size,
            weights_opt: self.adam(),
            arch_opt: self.adam(),
            seed: self.seed,
            max_train_batches: self.batches_per_epoch,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train_epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            adam: self.adam(),
            seed: self.seed,
            max_batches: self.batches_per_epoch,
        }
    }

    /// Text that [`RunConfig::parse`] reads back to an equal config (paths as written).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let paths: Vec<String> = self.signals.iter().map(|p| p.display().to_string()).collect();
        kv("signals", paths.join(","));
        if let Some(a) = &self.adjacency {
            kv("adjacency", a.display().to_string());
        }
        if let Some(v) = self.null_value {
            kv("null_value", v.to_string());
        }
        if let Some(v) = self.interval_minutes {
            kv("interval_minutes", v.to_string());
        }
        kv("history", self.history.to_string());
        kv("horizon", self.horizon.to_string());
        kv(
            "split",
            format!("{},{},{}", self.split[0], self.split[1], self.split[2]),
        );
        kv("patches", self.patches.to_string());
        kv("hidden", self.hidden.to_string());
        kv("temporal_nodes", self.temporal_nodes.to_string());
        kv("spatial_nodes", self.spatial_nodes.to_string());
        kv("diffusion_steps", self.diffusion_steps.to_string());
        kv("heads", self.heads.to_string());
        kv("groups", self.groups.to_string());
        kv("node_emb_dim", self.node_emb_dim.to_string());
        kv("kernel_size", self.kernel_size.to_string());
        kv("dilation", self.dilation.to_string());
        kv("lr", self.lr.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("search_epochs", self.search_epochs.to_string());
        kv("train_epochs", self.train_epochs.to_string());
        kv("patience", self.patience.to_string());
        kv("seed", self.seed.to_string());
        kv("eq5_multiplicity", self.eq5_multiplicity.to_string());
        kv("mode", self.mode.to_string());
        kv(
            "spatial_space",
            match self.spatial_space {
                SpatialSpace::Full => "full",
                SpatialSpace::None => "none",
            }
            .into(),
        );
        if let Some(b) = self.batches_per_epoch {
            kv("batches_per_epoch", b.to_string());
        }
        s
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| StnasError::config(key, format!("cannot parse `{v}`")))
}

fn ratios(v: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = v.split(',').map(|p| num("split", p.trim())).collect::<Result<_>>()?;
    let r: [f64; 3] = parts
        .try_into()
        .map_err(|_| StnasError::config("split", "expected three ratios"))?;
    if r.iter().any(|&x| !(x > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(StnasError::config("split", "ratios must be positive and sum to 1"));
    }
    Ok(r)
}
