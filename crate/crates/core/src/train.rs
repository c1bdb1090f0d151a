//! Retraining a derived architecture and evaluating forecasts.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use stnas_autodiff::Tensor;

use crate::arch::DiscreteArchitecture;
use crate::data::{DatasetSplits, ForecastDataset};
use crate::error::Result;
use crate::metrics::{metrics_multistep, metrics_singlestep, MetricReport};
use crate::model::Network;
use crate::optim::{Adam, AdamConfig};
use crate::params::{sub_seed, Group};
use crate::search::{group_step, shuffled_batches};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs without a val improvement before stopping; 0 disables early stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub max_batches: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            patience: 5,
            batch_size: 64,
            adam: AdamConfig::default(),
            seed: 0,
            max_batches: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Network restored to its best-validation checkpoint.
    pub net: Network,
    /// 0 when the initial weights were never beaten.
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub history: Vec<TrainEpoch>,
    pub test: MetricReport,
}

/// Predictions and raw targets for every window of `ds`, stacked along the batch axis.
pub fn predict_split(net: &Network, ds: &ForecastDataset, batch_size: usize) -> Result<(Tensor, Tensor)> {
    let mut pred = Vec::new();
    let mut target = Vec::new();
    for batch in ds.batches(batch_size) {
        let batch = batch?;
        pred.extend_from_slice(net.predict(&batch)?.data());
        target.extend_from_slice(batch.targets.data());
    }
    let shape = vec![ds.len(), ds.horizon, ds.nodes, ds.channels];
    Ok((Tensor::new(shape.clone(), pred)?, Tensor::new(shape, target)?))
}

fn report(pred: &Tensor, target: &Tensor, null_value: Option<f64>) -> Result<MetricReport> {
    let mut r = metrics_multistep(pred, target, null_value)?;
    if let Ok((rrse, corr)) = metrics_singlestep(pred, target) {
        r.rrse = Some(rrse);
        r.corr = Some(corr);
    }
    Ok(r)
}

/// Masked metrics of `net` over every window of `ds`.
pub fn evaluate(net: &Network, ds: &ForecastDataset, batch_size: usize) -> Result<MetricReport> {
    let (pred, target) = predict_split(net, ds, batch_size)?;
    report(&pred, &target, ds.null_value)
}

/// Metrics of repeating each window's last observed value over the horizon.
pub fn persistence_baseline(ds: &ForecastDataset) -> Result<MetricReport> {
    let w = ds.nodes * ds.channels;
    let mut pred = Vec::with_capacity(ds.len() * ds.horizon * w);
    let mut target = Vec::with_capacity(pred.capacity());
    for i in 0..ds.len() {
        let (x, y) = ds.window(i);
        let last = &x[(ds.history - 1) * w..];
        for _ in 0..ds.horizon {
            pred.extend_from_slice(last);
        }
        target.extend_from_slice(y);
    }
    let shape = vec![ds.len(), ds.horizon, ds.nodes, ds.channels];
    report(
        &Tensor::new(shape.clone(), pred)?,
        &Tensor::new(shape, target)?,
        ds.null_value,
    )
}

/// Trains a fresh hard network for `arch` on the train split, keeping the best-val checkpoint.
pub fn train_derived(
    arch: &DiscreteArchitecture,
    splits: &DatasetSplits,
    adjacency: Option<Tensor>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let ds = &splits.train;
    let mut net = Network::derived(
        arch,
        ds.nodes,
        ds.channels,
        ds.time.steps_per_day(),
        adjacency,
        splits.stats().clone(),
        sub_seed(cfg.seed, "train.init"),
    )?;
    let mut opt = Adam::new(Group::Weights, cfg.adam.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "train.shuffle"));
    let mut best_store = net.store.clone();
    let mut best_epoch = 0;
    let mut best_val_mae = evaluate(&net, &splits.val, cfg.batch_size)?.overall.mae;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut stale = 0;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut batches = shuffled_batches(ds, cfg.batch_size, &mut rng);
        if let Some(cap) = cfg.max_batches {
            batches.truncate(cap.max(1));
        }
        let mut loss_sum = 0.0;
        for idx in &batches {
            let batch = ds.batch(idx)?;
            loss_sum += group_step(&mut net, &mut opt, &batch, ds.null_value, "train", step)?.0;
            step += 1;
        }
        let val_mae = evaluate(&net, &splits.val, cfg.batch_size)?.overall.mae;
        history.push(TrainEpoch {
            epoch,
            train_loss: loss_sum / batches.len().max(1) as f64,
            val_mae,
            seconds: start.elapsed().as_secs_f64(),
        });
        if val_mae < best_val_mae {
            best_val_mae = val_mae;
            best_epoch = epoch;
            best_store = net.store.clone();
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                break;
            }
        }
    }
    net.store = best_store;
    let test = evaluate(&net, &splits.test, cfg.batch_size)?;
    Ok(TrainOutcome {
        net,
        best_epoch,
        best_val_mae,
        history,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ArchHyper, SearchMode, ARCH_VERSION};
    use crate::cell::{edge_key, edge_list, EdgeChoices};
    use crate::data::{gen_synthetic, split_and_window};
    use crate::ops::Operator;

    fn uniform(nodes: usize, op: Operator) -> EdgeChoices {
        edge_list(nodes)
            .into_iter()
            .map(|(i, j)| (edge_key(i, j), op))
            .collect()
    }

    fn toy() -> (DiscreteArchitecture, DatasetSplits, Tensor) {
        let (graph, signals) = gen_synthetic(4, 200, 2).unwrap();
        let splits = split_and_window(&signals, [0.6, 0.2, 0.2], 4, 2).unwrap();
        let arch = DiscreteArchitecture {
            version: ARCH_VERSION,
            hyperparameters: ArchHyper {
                hidden: 8,
                patches: 2,
                temporal_nodes: 2,
                spatial_nodes: 2,
                diffusion_steps: 2,
                heads: 2,
                groups: 1,
                node_emb_dim: 4,
                kernel_size: 2,
                dilation: 1,
                history: 4,
                horizon: 2,
                mode: SearchMode::Decoupled,
                eq5_multiplicity: false,
            },
            temporal_edges: uniform(2, Operator::Gdcc),
            spatial_dags: vec![uniform(2, Operator::GnnFixed), uniform(2, Operator::GnnAdap)],
        };
        (arch, splits, graph.adjacency)
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (arch, splits, adj) = toy();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train_derived(&arch, &splits, Some(adj.clone()), &cfg).unwrap();
        assert_eq!(out.best_epoch, 0);
        assert!(out.history.is_empty());
        let fresh = Network::derived(
            &arch,
            4,
            1,
            splits.train.time.steps_per_day(),
            Some(adj),
            splits.stats().clone(),
            sub_seed(0, "train.init"),
        )
        .unwrap();
        assert_eq!(out.net.store, fresh.store);
        assert!(out.test.overall.mae > 0.0);
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let (arch, splits, adj) = toy();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 16,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            seed: 3,
            ..TrainConfig::default()
        };
        let a = train_derived(&arch, &splits, Some(adj.clone()), &cfg).unwrap();
        let b = train_derived(&arch, &splits, Some(adj), &cfg).unwrap();
        assert_eq!(a.test.to_csv(), b.test.to_csv());
        assert!(a.best_epoch > 0);
        assert!(a.history.iter().all(|e| e.val_mae.is_finite()));
    }

    #[test]
    fn persistence_repeats_last_value() {
        let (_, splits, _) = toy();
        let ds = &splits.test;
        let w = ds.nodes;
        let mut total = 0.0;
        for i in 0..ds.len() {
            let (x, y) = ds.window(i);
            for h in 0..ds.horizon {
                for n in 0..w {
                    total += (x[(ds.history - 1) * w + n] - y[h * w + n]).abs();
                }
            }
        }
        let count = ds.len() * ds.horizon * w;
        let r = persistence_baseline(ds).unwrap();
        assert_eq!(r.overall.count, count);
        assert!((r.overall.mae - total / count as f64).abs() < 1e-12);
    }
}
