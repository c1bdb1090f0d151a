use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use stnas_autodiff::Tensor;
use stnas_core::data::{denormalize, gen_synthetic, normalize, split_and_window, GraphSignalMatrix, NormStats, Split};

/// Held-out one-step MSE of a per-node least-squares AR model with `lags` lags,
/// optionally adding the adjacency-weighted neighbour mean as extra lags.
fn ar_error(x: &[f64], a: &Tensor, nodes: usize, lags: usize, neighbours: bool) -> f64 {
    let steps = x.len() / nodes;
    let at = |t: usize, n: usize| x[t * nodes + n];
    let mix = |t: usize, n: usize| (0..nodes).map(|m| a.at(&[n, m]) * at(t, m)).sum::<f64>();
    let cut = steps * 7 / 10;
    let mut total = 0.0;
    let mut count = 0usize;
    for n in 0..nodes {
        let row = |t: usize| {
            let mut r = vec![1.0];
            for k in 0..lags {
                r.push(at(t - k, n));
                if neighbours {
                    r.push(mix(t - k, n));
                }
            }
            r
        };
        let width = row(lags).len();
        let fit: Vec<usize> = (lags..cut - 1).collect();
        let feats = DMatrix::from_fn(fit.len(), width, |i, j| row(fit[i])[j]);
        let target = DVector::from_iterator(fit.len(), fit.iter().map(|&t| at(t + 1, n)));
        let beta = feats.svd(true, true).solve(&target, 1e-12).unwrap();
        for t in cut..steps - 1 {
            let pred: f64 = row(t).iter().zip(beta.iter()).map(|(f, b)| f * b).sum();
            total += (pred - at(t + 1, n)).powi(2);
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn neighbours_carry_predictive_signal() {
    let (graph, signals) = gen_synthetic(12, 2000, 7).unwrap();
    let own = ar_error(&signals.values, &graph.adjacency, 12, 2, false);
    let with = ar_error(&signals.values, &graph.adjacency, 12, 2, true);
    assert!(own > with, "own-history MSE {own} vs with neighbours {with}");
}

#[test]
fn synthetic_graph_is_row_stochastic() {
    let (graph, _) = gen_synthetic(9, 300, 3).unwrap();
    for i in 0..9 {
        let s: f64 = (0..9).map(|j| graph.adjacency.at(&[i, j])).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

fn series(steps: usize, nodes: usize, seed: u64) -> GraphSignalMatrix {
    let values = (0..steps * nodes)
        .map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 10.0)
        .collect();
    let mut m = GraphSignalMatrix::new(steps, nodes, 1, values).unwrap();
    m.interval_minutes = Some(5);
    m
}

#[test]
fn splits_are_ordered_disjoint_and_windows_contiguous() {
    let m = series(300, 3, 1);
    let s = split_and_window(&m, [0.6, 0.2, 0.2], 6, 4).unwrap();
    assert_eq!(s.train.offset, 0);
    assert_eq!(s.val.offset, s.train.steps());
    assert_eq!(s.test.offset, s.val.offset + s.val.steps());
    assert_eq!(s.test.offset + s.test.steps(), 300);
    assert_eq!(
        (s.train.split, s.val.split, s.test.split),
        (Split::Train, Split::Val, Split::Test)
    );
    for ds in [&s.train, &s.val, &s.test] {
        let (x, y) = ds.window(0);
        let raw = ds.raw_values();
        assert_eq!(x, &raw[..6 * 3]);
        // the target starts on the row right after the input ends
        assert_eq!(y, &raw[6 * 3..10 * 3]);
        let last = ds.len() - 1;
        assert_eq!(ds.window(last).1.as_ptr_range().end, raw.as_ptr_range().end);
    }
}

#[test]
fn stats_ignore_everything_past_train() {
    let m = series(200, 2, 4);
    let a = split_and_window(&m, [0.7, 0.1, 0.2], 4, 4).unwrap();
    let mut perturbed = m.clone();
    let start = a.val.offset * 2;
    for v in &mut perturbed.values[start..] {
        *v = *v * 3.0 + 100.0;
    }
    let b = split_and_window(&perturbed, [0.7, 0.1, 0.2], 4, 4).unwrap();
    assert_eq!(a.stats(), b.stats());
}

#[test]
fn short_splits_are_named() {
    let err = split_and_window(&series(100, 2, 0), [0.7, 0.1, 0.2], 12, 12)
        .unwrap_err()
        .to_string();
    assert!(err.contains("val split"), "{err}");
    assert!(split_and_window(&series(20, 2, 0), [0.7, 0.1, 0.2], 12, 12).is_err());
}

proptest! {
    #[test]
    fn normalize_round_trips(vals in prop::collection::vec(-1e3f64..1e3, 12), mean in -50.0f64..50.0, std in 0.1f64..20.0) {
        let stats = NormStats { mean: vec![mean, -mean], std: vec![std, std * 2.0] };
        let x = Tensor::new(vec![6, 2], vals).unwrap();
        let z = normalize(&x, &stats, None).unwrap();
        let back = denormalize(&z.values, &stats, None).unwrap();
        prop_assert!(back.max_abs_diff(&x) <= 1e-9);
    }
}
