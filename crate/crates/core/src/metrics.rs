//! Forecast error metrics.

use std::fmt::Write as _;

use serde::Serialize;
use stnas_autodiff::Tensor;

use crate::error::{Result, StnasError};

/// Targets at or below this magnitude are left out of MAPE.
pub const MAPE_FLOOR: f64 = 1e-6;

/// MAE, RMSE and MAPE (percent) over one slice of positions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorSummary {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when no unmasked target clears [`MAPE_FLOOR`].
    pub mape: Option<f64>,
    pub count: usize,
}

#[derive(Default)]
struct Acc {
    abs: f64,
    sq: f64,
    pct: f64,
    n: usize,
    n_pct: usize,
}

impl Acc {
    fn push(&mut self, p: f64, t: f64) {
        let e = p - t;
        self.abs += e.abs();
        self.sq += e * e;
        self.n += 1;
        if t.abs() > MAPE_FLOOR {
            self.pct += e.abs() / t.abs();
            self.n_pct += 1;
        }
    }

    fn summary(&self) -> Option<ErrorSummary> {
        if self.n == 0 {
            return None;
        }
        let n = self.n as f64;
        Some(ErrorSummary {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: (self.n_pct > 0).then(|| 100.0 * self.pct / self.n_pct as f64),
            count: self.n,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    /// One entry per horizon step; `None` when that step is fully masked.
    pub horizons: Vec<Option<ErrorSummary>>,
    pub overall: ErrorSummary,
    pub rrse: Option<f64>,
    pub corr: Option<f64>,
    pub samples: usize,
    /// Positions dropped because the target equals the sentinel.
    pub masked: usize,
}

fn check_pair(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(StnasError::Metrics(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Masked MAE / RMSE / MAPE per horizon and overall for `[B, Q, N, C]` tensors.
pub fn metrics_multistep(pred: &Tensor, target: &Tensor, null_value: Option<f64>) -> Result<MetricReport> {
    check_pair(pred, target)?;
    let s = target.shape();
    if s.len() != 4 {
        return Err(StnasError::Metrics(format!("expected [B, Q, N, C] tensors, got {s:?}")));
    }
    let (b, q, inner) = (s[0], s[1], s[2] * s[3]);
    let mut per_h: Vec<Acc> = (0..q).map(|_| Acc::default()).collect();
    let mut all = Acc::default();
    let mut masked = 0;
    for bi in 0..b {
        for (h, acc) in per_h.iter_mut().enumerate() {
            let base = (bi * q + h) * inner;
            for k in base..base + inner {
                let (p, t) = (pred.data()[k], target.data()[k]);
                if Some(t) == null_value {
                    masked += 1;
                    continue;
                }
                acc.push(p, t);
                all.push(p, t);
            }
        }
    }
    let overall = all
        .summary()
        .ok_or_else(|| StnasError::Metrics("every position is masked".into()))?;
    Ok(MetricReport {
        horizons: per_h.iter().map(Acc::summary).collect(),
        overall,
        rrse: None,
        corr: None,
        samples: b,
        masked,
    })
}

/// Root relative squared error and mean per-node Pearson correlation.
///
/// Tensors are `[B, Q, N, C]` (node axis 2) or `[T, N]` (node axis 1). Nodes whose
/// true series is constant are left out of CORR; a constant prediction scores 0.
pub fn metrics_singlestep(pred: &Tensor, target: &Tensor) -> Result<(f64, f64)> {
    check_pair(pred, target)?;
    let s = target.shape();
    let (outer, nodes, inner) = match s.len() {
        4 => (s[0] * s[1], s[2], s[3]),
        2 => (s[0], s[1], 1),
        _ => {
            return Err(StnasError::Metrics(format!(
                "expected [B, Q, N, C] or [T, N] tensors, got {s:?}"
            )))
        }
    };
    let (p, t) = (pred.data(), target.data());
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    let den: f64 = t.iter().map(|v| (v - mean).powi(2)).sum();
    if den <= 0.0 {
        return Err(StnasError::Metrics("RRSE undefined: target has zero variance".into()));
    }
    let num: f64 = p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum();
    let rrse = (num / den).sqrt();

    let mut corr_sum = 0.0;
    let mut used = 0;
    for n in 0..nodes {
        let idx = |o: usize, c: usize| (o * nodes + n) * inner + c;
        let positions: Vec<usize> = (0..outer).flat_map(|o| (0..inner).map(move |c| idx(o, c))).collect();
        let len = positions.len() as f64;
        let mp = positions.iter().map(|&i| p[i]).sum::<f64>() / len;
        let mt = positions.iter().map(|&i| t[i]).sum::<f64>() / len;
        let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
        for &i in &positions {
            let (dp, dt) = (p[i] - mp, t[i] - mt);
            cov += dp * dt;
            vp += dp * dp;
            vt += dt * dt;
        }
        if vt > 0.0 {
            if vp > 0.0 {
                corr_sum += (cov / (vp.sqrt() * vt.sqrt())).clamp(-1.0, 1.0);
            }
            used += 1;
        }
    }
    if used == 0 {
        return Err(StnasError::Metrics(
            "CORR undefined: every node series is constant".into(),
        ));
    }
    Ok((rrse, corr_sum / used as f64))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

impl MetricReport {
    /// `metric,horizon,value` rows; horizons are 1-based, `all` for the aggregate.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,horizon,value\n");
        let mut row = |m: &str, h: &str, v: String| {
            let _ = writeln!(s, "{m},{h},{v}");
        };
        for (i, h) in self.horizons.iter().enumerate() {
            let k = (i + 1).to_string();
            row("mae", &k, fmt_opt(h.as_ref().map(|e| e.mae)));
            row("rmse", &k, fmt_opt(h.as_ref().map(|e| e.rmse)));
            row("mape", &k, fmt_opt(h.as_ref().and_then(|e| e.mape)));
        }
        row("mae", "all", self.overall.mae.to_string());
        row("rmse", "all", self.overall.rmse.to_string());
        row("mape", "all", fmt_opt(self.overall.mape));
        if let Some(v) = self.rrse {
            row("rrse", "all", v.to_string());
        }
        if let Some(v) = self.corr {
            row("corr", "all", v.to_string());
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:>8} {:>12} {:>12} {:>10}\n", "horizon", "MAE", "RMSE", "MAPE(%)");
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        for (i, h) in self.horizons.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:>8} {:>12} {:>12} {:>10}",
                i + 1,
                cell(h.as_ref().map(|e| e.mae)),
                cell(h.as_ref().map(|e| e.rmse)),
                cell(h.as_ref().and_then(|e| e.mape)),
            );
        }
        let o = &self.overall;
        let _ = writeln!(s, "{:>8} {:>12.4} {:>12.4} {:>10}", "all", o.mae, o.rmse, cell(o.mape));
        if let (Some(r), Some(c)) = (self.rrse, self.corr) {
            let _ = writeln!(s, "RRSE {r:.4}  CORR {c:.4}");
        }
        s
    }
}
