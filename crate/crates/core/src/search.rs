//! Bi-level architecture search over the supernet.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stnas_autodiff::Tensor;

use crate::arch::{DiscreteArchitecture, SearchMode};
use crate::data::{Batch, DatasetSplits, ForecastDataset, Split};
use crate::error::{Result, StnasError};
use crate::model::{loss_masked_mae, ModelConfig, Network};
use crate::optim::{Adam, AdamConfig};
use crate::params::{sub_seed, Group, Session};
use crate::train::evaluate;

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub weights_opt: AdamConfig,
    pub arch_opt: AdamConfig,
    pub seed: u64,
    /// Caps the train batches visited per epoch.
    pub max_train_batches: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            weights_opt: AdamConfig::default(),
            arch_opt: AdamConfig::default(),
            seed: 0,
            max_train_batches: None,
        }
    }
}

/// Supernet parameters plus one optimizer per parameter group.
#[derive(Clone, Debug)]
pub struct SupernetState {
    pub net: Network,
    pub weights_opt: Adam,
    pub arch_opt: Adam,
    pub step: u64,
    pub seed: u64,
    pub null_value: Option<f64>,
    /// Largest tape seen by any step, in bytes.
    pub peak_tape_bytes: usize,
    consumed: BTreeMap<(Group, Split), u64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub train: f64,
    pub val: f64,
}

impl SupernetState {
    pub fn new(
        config: ModelConfig,
        splits: &DatasetSplits,
        adjacency: Option<Tensor>,
        search: &SearchConfig,
    ) -> Result<Self> {
        let net = Network::supernet(
            config,
            adjacency,
            splits.stats().clone(),
            sub_seed(search.seed, "search.init"),
        )?;
        Ok(Self {
            net,
            weights_opt: Adam::new(Group::Weights, search.weights_opt.clone()),
            arch_opt: Adam::new(Group::Arch, search.arch_opt.clone()),
            step: 0,
            seed: search.seed,
            null_value: splits.train.null_value,
            peak_tape_bytes: 0,
            consumed: BTreeMap::new(),
        })
    }

    /// Batches of `split` consumed by updates of `group` so far.
    pub fn consumed(&self, group: Group, split: Split) -> u64 {
        self.consumed.get(&(group, split)).copied().unwrap_or(0)
    }

    /// ω update from a training batch with Θ frozen.
    pub fn weight_step(&mut self, batch: &Batch) -> Result<f64> {
        expect_split(batch, Split::Train, "weight")?;
        let (loss, bytes) = group_step(
            &mut self.net,
            &mut self.weights_opt,
            batch,
            self.null_value,
            "train",
            self.step,
        )?;
        self.peak_tape_bytes = self.peak_tape_bytes.max(bytes);
        *self.consumed.entry((Group::Weights, batch.split)).or_default() += 1;
        Ok(loss)
    }

    /// Θ update from a validation batch with ω frozen.
    pub fn arch_step(&mut self, batch: &Batch) -> Result<f64> {
        expect_split(batch, Split::Val, "architecture")?;
        let (loss, bytes) = group_step(
            &mut self.net,
            &mut self.arch_opt,
            batch,
            self.null_value,
            "val",
            self.step,
        )?;
        self.peak_tape_bytes = self.peak_tape_bytes.max(bytes);
        *self.consumed.entry((Group::Arch, batch.split)).or_default() += 1;
        Ok(loss)
    }

    /// One first-order alternation: ω on `train`, then Θ on `val`.
    pub fn bilevel_step(&mut self, train: &Batch, val: &Batch) -> Result<StepLosses> {
        expect_split(train, Split::Train, "weight")?;
        expect_split(val, Split::Val, "architecture")?;
        let train_loss = self.weight_step(train)?;
        let val_loss = self.arch_step(val)?;
        self.step += 1;
        Ok(StepLosses {
            train: train_loss,
            val: val_loss,
        })
    }

    pub fn derive(&self) -> DiscreteArchitecture {
        self.net.derive()
    }

    /// Parameter values and counters as JSON.
    pub fn to_json(&self) -> Result<String> {
        let params: serde_json::Value =
            serde_json::from_str(&self.net.store.to_json()?).map_err(|e| StnasError::Parse(e.to_string()))?;
        let doc = SavedState {
            mode: self.net.config.mode,
            step: self.step,
            seed: self.seed,
            params,
        };
        serde_json::to_string(&doc).map_err(|e| StnasError::Parse(e.to_string()))
    }

    /// Restores parameters saved by [`SupernetState::to_json`] into a state built from the same config.
    pub fn load_json(&mut self, text: &str) -> Result<()> {
        let doc: SavedState =
            serde_json::from_str(text).map_err(|e| StnasError::Parse(format!("search state: {e}")))?;
        if doc.mode != self.net.config.mode {
            return Err(StnasError::Model(format!(
                "saved state is from a {} search, config says {}",
                doc.mode, self.net.config.mode
            )));
        }
        self.net.store.load_json(&doc.params.to_string())?;
        self.step = doc.step;
        self.seed = doc.seed;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct SavedState {
    mode: SearchMode,
    step: u64,
    seed: u64,
    params: serde_json::Value,
}

fn expect_split(batch: &Batch, want: Split, update: &str) -> Result<()> {
    if batch.split != want {
        return Err(StnasError::Model(format!(
            "{update} updates take {want} batches, got a {} batch",
            batch.split
        )));
    }
    Ok(())
}

/// Forward, masked-MAE loss and one optimizer step on the optimizer's group.
///
/// Returns the loss and the tape size in bytes.
pub(crate) fn group_step(
    net: &mut Network,
    opt: &mut Adam,
    batch: &Batch,
    null_value: Option<f64>,
    phase: &'static str,
    step: u64,
) -> Result<(f64, usize)> {
    let (loss, bytes, grads) = {
        let mut sess = Session::new(&net.store, Some(opt.group()));
        let pred = net.forward(&mut sess, &batch.inputs, &batch.tod, &batch.dow)?;
        let loss = loss_masked_mae(&mut sess, pred, &batch.targets, null_value)?;
        let value = sess.tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(StnasError::NonFiniteLoss { phase, step, value });
        }
        let g = sess.tape.backward(loss)?;
        (value, sess.tape.memory_bytes(), sess.param_grads(&g))
    };
    if let Some((id, _)) = grads.iter().find(|(_, g)| g.data().iter().any(|v| !v.is_finite())) {
        return Err(StnasError::Model(format!(
            "non-finite gradient for `{}` in {phase} step {step}",
            net.store.param(*id).name
        )));
    }
    opt.step(&mut net.store, &grads);
    Ok((loss, bytes))
}

/// Window indices of `ds` in a seeded random order, cut into batches.
pub(crate) fn shuffled_batches(ds: &ForecastDataset, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
    pub peak_tape_bytes: usize,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub state: SupernetState,
    pub log: Vec<EpochLog>,
    pub arch: DiscreteArchitecture,
}

impl SearchOutcome {
    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.log.is_empty() {
            return 0.0;
        }
        self.log.iter().map(|e| e.seconds).sum::<f64>() / self.log.len() as f64
    }

    /// Masked MAE of the final supernet over the validation split.
    pub fn val_mae(&self, splits: &DatasetSplits, batch_size: usize) -> Result<f64> {
        Ok(evaluate(&self.state.net, &splits.val, batch_size)?.overall.mae)
    }
}

/// `epoch,train_loss,val_loss,seconds,peak_tape_bytes` rows.
pub fn search_log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,seconds,peak_tape_bytes\n");
    for e in log {
        let _ = writeln!(
            s,
            "{},{},{},{:.3},{}",
            e.epoch, e.train_loss, e.val_loss, e.seconds, e.peak_tape_bytes
        );
    }
    s
}

/// Alternates ω and Θ updates over shuffled batches, then derives the argmax architecture.
pub fn run_search(
    config: ModelConfig,
    splits: &DatasetSplits,
    adjacency: Option<Tensor>,
    search: &SearchConfig,
) -> Result<SearchOutcome> {
    let mut state = SupernetState::new(config, splits, adjacency, search)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(search.seed, "search.shuffle"));
    let mut log = Vec::with_capacity(search.epochs);
    for epoch in 1..=search.epochs {
        let start = Instant::now();
        let mut train_batches = shuffled_batches(&splits.train, search.batch_size, &mut rng);
        if let Some(cap) = search.max_train_batches {
            train_batches.truncate(cap.max(1));
        }
        let val_batches = shuffled_batches(&splits.val, search.batch_size, &mut rng);
        let (mut train_sum, mut val_sum) = (0.0, 0.0);
        for (k, idx) in train_batches.iter().enumerate() {
            let tb = splits.train.batch(idx)?;
            let vb = splits.val.batch(&val_batches[k % val_batches.len()])?;
            let l = state.bilevel_step(&tb, &vb)?;
            train_sum += l.train;
            val_sum += l.val;
        }
        let n = train_batches.len().max(1) as f64;
        log.push(EpochLog {
            epoch,
            train_loss: train_sum / n,
            val_loss: val_sum / n,
            seconds: start.elapsed().as_secs_f64(),
            peak_tape_bytes: state.peak_tape_bytes,
        });
    }
    let arch = state.derive();
    Ok(SearchOutcome { state, log, arch })
}

/// [`run_search`] over the single mixed space, without patch transfer.
pub fn run_search_mixed(
    mut config: ModelConfig,
    splits: &DatasetSplits,
    adjacency: Option<Tensor>,
    search: &SearchConfig,
) -> Result<SearchOutcome> {
    config.mode = SearchMode::Mixed;
    run_search(config, splits, adjacency, search)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, split_and_window};

    fn toy() -> (ModelConfig, DatasetSplits, Tensor) {
        let (graph, signals) = gen_synthetic(4, 200, 3).unwrap();
        let splits = split_and_window(&signals, [0.6, 0.2, 0.2], 4, 2).unwrap();
        let mut cfg = ModelConfig::new(4, 1, splits.train.time.steps_per_day());
        cfg.history = 4;
        cfg.horizon = 2;
        cfg.hidden = 4;
        cfg.patches = 2;
        cfg.temporal_nodes = 2;
        cfg.spatial_nodes = 2;
        cfg.heads = 2;
        cfg.node_emb_dim = 3;
        (cfg, splits, graph.adjacency)
    }

    fn group_values(state: &SupernetState, group: Group) -> Vec<Tensor> {
        let s = &state.net.store;
        s.ids_in(group).map(|id| s.value(id).clone()).collect()
    }

    #[test]
    fn steps_touch_only_their_group() {
        let (cfg, splits, adj) = toy();
        let mut state = SupernetState::new(cfg, &splits, Some(adj), &SearchConfig::default()).unwrap();
        let tb = splits.train.batch(&[0, 1, 2]).unwrap();
        let vb = splits.val.batch(&[0, 1]).unwrap();
        let (w0, a0) = (group_values(&state, Group::Weights), group_values(&state, Group::Arch));
        state.weight_step(&tb).unwrap();
        assert_eq!(group_values(&state, Group::Arch), a0);
        assert_ne!(group_values(&state, Group::Weights), w0);
        let w1 = group_values(&state, Group::Weights);
        state.arch_step(&vb).unwrap();
        assert_eq!(group_values(&state, Group::Weights), w1);
        assert_ne!(group_values(&state, Group::Arch), a0);
    }

    #[test]
    fn split_tags_are_enforced() {
        let (cfg, splits, adj) = toy();
        let mut state = SupernetState::new(cfg, &splits, Some(adj), &SearchConfig::default()).unwrap();
        let tb = splits.train.batch(&[0]).unwrap();
        let vb = splits.val.batch(&[0]).unwrap();
        assert!(state.bilevel_step(&vb, &tb).is_err());
        assert!(state.arch_step(&tb).is_err());
        assert!(state.weight_step(&vb).is_err());
        state.bilevel_step(&tb, &vb).unwrap();
        assert_eq!(state.consumed(Group::Arch, Split::Val), 1);
        assert_eq!(state.consumed(Group::Arch, Split::Train), 0);
        assert_eq!(state.consumed(Group::Weights, Split::Train), 1);
    }

    #[test]
    fn zero_learning_rate_freezes_everything() {
        let (cfg, splits, adj) = toy();
        let zero = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        let sc = SearchConfig {
            weights_opt: zero.clone(),
            arch_opt: zero,
            ..SearchConfig::default()
        };
        let mut state = SupernetState::new(cfg, &splits, Some(adj), &sc).unwrap();
        let before = state.net.store.clone();
        let tb = splits.train.batch(&[0, 1]).unwrap();
        let vb = splits.val.batch(&[0, 1]).unwrap();
        state.bilevel_step(&tb, &vb).unwrap();
        assert_eq!(state.net.store, before);
    }

    #[test]
    fn search_completes_and_repeats() {
        let (cfg, splits, adj) = toy();
        let sc = SearchConfig {
            epochs: 1,
            batch_size: 16,
            seed: 5,
            ..SearchConfig::default()
        };
        let a = run_search(cfg.clone(), &splits, Some(adj.clone()), &sc).unwrap();
        a.arch.validate().unwrap();
        assert_eq!(a.log.len(), 1);
        assert!(a.log[0].seconds > 0.0);
        let b = run_search(cfg.clone(), &splits, Some(adj.clone()), &sc).unwrap();
        assert_eq!(a.arch.to_text(), b.arch.to_text());
        assert_eq!(a.state.net.store, b.state.net.store);
        let m = run_search_mixed(cfg, &splits, Some(adj), &sc).unwrap();
        assert_eq!(m.arch.hyperparameters.mode, SearchMode::Mixed);
        m.arch.validate().unwrap();
    }

    #[test]
    fn state_json_round_trip() {
        let (cfg, splits, adj) = toy();
        let sc = SearchConfig {
            epochs: 1,
            batch_size: 16,
            ..SearchConfig::default()
        };
        let out = run_search(cfg.clone(), &splits, Some(adj.clone()), &sc).unwrap();
        let text = out.state.to_json().unwrap();
        let mut fresh = SupernetState::new(cfg, &splits, Some(adj), &sc).unwrap();
        fresh.load_json(&text).unwrap();
        assert_eq!(fresh.derive(), out.arch);
        assert_eq!(fresh.step, out.state.step);
    }
}
