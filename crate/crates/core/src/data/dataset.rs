//! Chronological splits, sliding windows and z-score normalization.

use std::fmt;

use serde::{Deserialize, Serialize};
use stnas_autodiff::Tensor;

use super::signals::GraphSignalMatrix;
use super::time::TimeAxis;
use crate::error::{Result, StnasError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population statistics over `values` laid out with `channels` as the fastest axis,
    /// skipping entries equal to `null_value`.
    pub fn from_values(values: &[f64], channels: usize, null_value: Option<f64>) -> Result<Self> {
        let mut sum = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        let mut count = vec![0usize; channels];
        for (i, &v) in values.iter().enumerate() {
            if Some(v) == null_value {
                continue;
            }
            let c = i % channels;
            sum[c] += v;
            count[c] += 1;
        }
        let mean: Vec<f64> = (0..channels)
            .map(|c| {
                if count[c] == 0 {
                    Err(StnasError::Data(format!("channel {c} has no observed values")))
                } else {
                    Ok(sum[c] / count[c] as f64)
                }
            })
            .collect::<Result<_>>()?;
        for (i, &v) in values.iter().enumerate() {
            if Some(v) == null_value {
                continue;
            }
            let c = i % channels;
            sq[c] += (v - mean[c]).powi(2);
        }
        let std: Vec<f64> = (0..channels).map(|c| (sq[c] / count[c] as f64).sqrt()).collect();
        let stats = Self { mean, std };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        for (c, &s) in self.std.iter().enumerate() {
            if !(s > 0.0) || !s.is_finite() {
                return Err(StnasError::Data(format!(
                    "channel {c} has zero or invalid standard deviation ({s}); constant channels cannot be normalized"
                )));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Normalized values with the positions that held the null sentinel.
#[derive(Clone, Debug, PartialEq)]
pub struct Masked {
    pub values: Tensor,
    pub missing: Vec<bool>,
}

/// Z-scores the last axis (channels); sentinel entries are kept as-is and flagged.
pub fn normalize(x: &Tensor, stats: &NormStats, null_value: Option<f64>) -> Result<Masked> {
    stats.validate()?;
    let c = check_channels(x, stats)?;
    let mut values = x.clone();
    let mut missing = vec![false; x.numel()];
    for (i, v) in values.data_mut().iter_mut().enumerate() {
        if Some(*v) == null_value {
            missing[i] = true;
            continue;
        }
        let ch = i % c;
        *v = (*v - stats.mean[ch]) / stats.std[ch];
    }
    Ok(Masked { values, missing })
}

/// Inverse of [`normalize`]; entries flagged in `missing` pass through unchanged.
pub fn denormalize(x: &Tensor, stats: &NormStats, missing: Option<&[bool]>) -> Result<Tensor> {
    stats.validate()?;
    let c = check_channels(x, stats)?;
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if missing.is_some_and(|m| m[i]) {
            continue;
        }
        let ch = i % c;
        *v = *v * stats.std[ch] + stats.mean[ch];
    }
    Ok(out)
}

fn check_channels(x: &Tensor, stats: &NormStats) -> Result<usize> {
    let c = *x.shape().last().unwrap_or(&0);
    if c != stats.channels() {
        return Err(StnasError::Data(format!(
            "tensor has {c} channels, statistics cover {}",
            stats.channels()
        )));
    }
    Ok(c)
}

/// Number of complete (history, horizon) windows in a split of `len` steps.
pub fn window_count(len: usize, history: usize, horizon: usize) -> usize {
    (len + 1).saturating_sub(history + horizon)
}

/// Split lengths for `steps` under `ratios`; the test split absorbs rounding.
pub fn split_lengths(steps: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|&r| !(r > 0.0)) {
        return Err(StnasError::Data(format!(
            "split ratios must be positive, got {ratios:?}"
        )));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(StnasError::Data(format!("split ratios sum to {total}, expected 1")));
    }
    let train = (steps as f64 * ratios[0]).round() as usize;
    let val = (steps as f64 * ratios[1]).round() as usize;
    let test = steps
        .checked_sub(train + val)
        .ok_or_else(|| StnasError::Data(format!("split ratios {ratios:?} overflow {steps} steps")))?;
    Ok([train, val, test])
}

/// One chronological split of a series, windowed on demand.
#[derive(Clone, Debug)]
pub struct ForecastDataset {
    pub split: Split,
    pub history: usize,
    pub horizon: usize,
    pub nodes: usize,
    pub channels: usize,
    /// Absolute index of this split's first step in the full series.
    pub offset: usize,
    pub stats: NormStats,
    pub null_value: Option<f64>,
    pub time: TimeAxis,
    values: Vec<f64>,
}

/// A batch of windows: normalized inputs `[B, P, N, C]`, raw targets `[B, Q, N, C]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub split: Split,
    pub inputs: Tensor,
    pub targets: Tensor,
    /// Raw value at each window's last input step, `[B, N, C]`.
    pub last_observed: Tensor,
    pub tod: Vec<usize>,
    pub dow: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.tod.len()
    }
}

impl ForecastDataset {
    pub fn len(&self) -> usize {
        window_count(self.steps(), self.history, self.horizon)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn steps(&self) -> usize {
        self.values.len() / (self.nodes * self.channels)
    }

    pub fn raw_values(&self) -> &[f64] {
        &self.values
    }

    fn rows(&self, start: usize, len: usize) -> &[f64] {
        let w = self.nodes * self.channels;
        &self.values[start * w..(start + len) * w]
    }

    /// Window `i`: input rows `i..i+P`, target rows `i+P..i+P+Q` (split-relative).
    pub fn window(&self, i: usize) -> (&[f64], &[f64]) {
        (self.rows(i, self.history), self.rows(i + self.history, self.horizon))
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(StnasError::Data("empty batch".into()));
        }
        let w = self.nodes * self.channels;
        let b = indices.len();
        let mut inputs = Vec::with_capacity(b * self.history * w);
        let mut targets = Vec::with_capacity(b * self.horizon * w);
        let mut last = Vec::with_capacity(b * w);
        let mut tod = Vec::with_capacity(b);
        let mut dow = Vec::with_capacity(b);
        for &i in indices {
            if i >= self.len() {
                return Err(StnasError::Data(format!(
                    "window {i} out of range for {} split with {} windows",
                    self.split,
                    self.len()
                )));
            }
            let (x, y) = self.window(i);
            inputs.extend_from_slice(x);
            targets.extend_from_slice(y);
            last.extend_from_slice(&x[(self.history - 1) * w..]);
            let (t, d) = self.time.features(self.offset + i + self.history - 1);
            tod.push(t);
            dow.push(d);
        }
        let shape_in = vec![b, self.history, self.nodes, self.channels];
        let raw = Tensor::new(shape_in, inputs)?;
        let inputs = normalize(&raw, &self.stats, self.null_value)?.values;
        Ok(Batch {
            split: self.split,
            inputs,
            targets: Tensor::new(vec![b, self.horizon, self.nodes, self.channels], targets)?,
            last_observed: Tensor::new(vec![b, self.nodes, self.channels], last)?,
            tod,
            dow,
        })
    }

    /// Consecutive batches covering every window in order.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
        let n = self.len();
        let bs = batch_size.max(1);
        (0..n.div_ceil(bs)).map(move |k| {
            let idx: Vec<usize> = (k * bs..((k + 1) * bs).min(n)).collect();
            self.batch(&idx)
        })
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSplits {
    pub train: ForecastDataset,
    pub val: ForecastDataset,
    pub test: ForecastDataset,
}

impl DatasetSplits {
    pub fn stats(&self) -> &NormStats {
        &self.train.stats
    }
}

/// Splits `signals` chronologically, then windows each split independently.
///
/// Normalization statistics come from the train split alone.
pub fn split_and_window(
    signals: &GraphSignalMatrix,
    ratios: [f64; 3],
    history: usize,
    horizon: usize,
) -> Result<DatasetSplits> {
    if history == 0 || horizon == 0 {
        return Err(StnasError::Data("history and horizon must be at least 1".into()));
    }
    let interval = signals.interval_minutes.ok_or_else(|| {
        StnasError::Data("sampling interval unknown: add `# interval_minutes=` metadata or set interval_minutes".into())
    })?;
    let time = TimeAxis::new(interval, signals.start)?;
    let lengths = split_lengths(signals.steps, ratios)?;
    let names = [Split::Train, Split::Val, Split::Test];
    for (len, name) in lengths.iter().zip(names) {
        if window_count(*len, history, horizon) == 0 {
            return Err(StnasError::Data(format!(
                "{name} split has {len} steps, fewer than history + horizon = {}",
                history + horizon
            )));
        }
    }
    let w = signals.nodes * signals.channels;
    let train_vals = &signals.values[..lengths[0] * w];
    let stats = NormStats::from_values(train_vals, signals.channels, signals.null_value)?;
    let mut offset = 0;
    let mut parts = Vec::with_capacity(3);
    for (len, split) in lengths.iter().zip(names) {
        parts.push(ForecastDataset {
            split,
            history,
            horizon,
            nodes: signals.nodes,
            channels: signals.channels,
            offset,
            stats: stats.clone(),
            null_value: signals.null_value,
            time,
            values: signals.values[offset * w..(offset + len) * w].to_vec(),
        });
        offset += len;
    }
    let test = parts.pop().expect("three splits");
    let val = parts.pop().expect("three splits");
    let train = parts.pop().expect("three splits");
    Ok(DatasetSplits { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(steps: usize) -> GraphSignalMatrix {
        let mut m = GraphSignalMatrix::new(
            steps,
            2,
            1,
            (0..steps * 2).map(|i| (i as f64 * 0.37).sin() + 2.0).collect(),
        )
        .unwrap();
        m.interval_minutes = Some(5);
        m
    }

    #[test]
    fn split_lengths_and_window_formula() {
        assert_eq!(split_lengths(100, [0.7, 0.1, 0.2]).unwrap(), [70, 10, 20]);
        assert_eq!(window_count(70, 12, 12), 47);
        assert_eq!(split_lengths(34_272, [0.7, 0.1, 0.2]).unwrap(), [23_990, 3_427, 6_855]);
    }

    #[test]
    fn short_split_is_named() {
        let err = split_and_window(&series(100), [0.7, 0.1, 0.2], 12, 12).unwrap_err();
        assert!(err.to_string().contains("val split"), "{err}");
        let err = split_and_window(&series(20), [0.6, 0.2, 0.2], 12, 12).unwrap_err();
        assert!(err.to_string().contains("train split"), "{err}");
    }

    #[test]
    fn windows_are_contiguous() {
        let s = split_and_window(&series(200), [0.6, 0.2, 0.2], 4, 3).unwrap();
        assert_eq!(s.train.len(), 120 - 6);
        assert_eq!(s.val.offset, 120);
        assert_eq!(s.test.offset, 160);
        let (x, y) = s.val.window(5);
        // target starts right after the input window ends
        assert_eq!(x[x.len() - 2..], s.val.raw_values()[(5 + 3) * 2..(5 + 4) * 2]);
        assert_eq!(y[..2], s.val.raw_values()[(5 + 4) * 2..(5 + 5) * 2]);
    }

    #[test]
    fn normalize_examples() {
        let stats = NormStats {
            mean: vec![1.0],
            std: vec![1.0],
        };
        let x = Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap();
        assert_eq!(normalize(&x, &stats, None).unwrap().values.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn sentinel_passes_through() {
        let stats = NormStats {
            mean: vec![10.0],
            std: vec![2.0],
        };
        let x = Tensor::new(vec![3, 1], vec![0.0, 12.0, 8.0]).unwrap();
        let m = normalize(&x, &stats, Some(0.0)).unwrap();
        assert_eq!(m.values.data(), &[0.0, 1.0, -1.0]);
        assert_eq!(m.missing, vec![true, false, false]);
        let back = denormalize(&m.values, &stats, Some(&m.missing)).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn constant_channel_rejected() {
        assert!(NormStats::from_values(&[3.0, 3.0, 3.0], 1, None).is_err());
        assert!(NormStats::from_values(&[1.0, 5.0, 3.0, 5.0], 2, None).is_err());
        let s = NormStats::from_values(&[1.0, 5.0, 3.0, 7.0], 2, None).unwrap();
        assert_eq!(s.mean, vec![2.0, 6.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
    }
}
