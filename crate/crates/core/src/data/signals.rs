//! Graph signal matrices and their CSV / binary encodings.
//!
//! CSV layout: optional leading `# key=value` metadata lines (`interval_minutes`,
//! `start`), a header row naming the node columns (optionally preceded by a
//! `timestamp` column), then one row per step.
//!
//! Binary layout: the ASCII magic `STNAS1`, then T, N, C as little-endian
//! `u64`, then T·N·C little-endian `f64` values in row-major order.

use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};

use crate::error::{Result, StnasError};

pub const BINARY_MAGIC: &[u8; 6] = b"STNAS1";

/// Values of shape T×N×C, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSignalMatrix {
    pub steps: usize,
    pub nodes: usize,
    pub channels: usize,
    pub values: Vec<f64>,
    pub node_ids: Vec<String>,
    pub interval_minutes: Option<u32>,
    pub start: Option<NaiveDateTime>,
    pub null_value: Option<f64>,
}

impl GraphSignalMatrix {
    pub fn new(steps: usize, nodes: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if steps == 0 || nodes == 0 || channels == 0 {
            return Err(StnasError::Data(format!(
                "signal extents must be positive, got T={steps} N={nodes} C={channels}"
            )));
        }
        if values.len() != steps * nodes * channels {
            return Err(StnasError::Data(format!(
                "T={steps} N={nodes} C={channels} needs {} values, got {}",
                steps * nodes * channels,
                values.len()
            )));
        }
        Ok(Self {
            steps,
            nodes,
            channels,
            values,
            node_ids: (0..nodes).map(|i| i.to_string()).collect(),
            interval_minutes: None,
            start: None,
            null_value: None,
        })
    }

    pub fn at(&self, t: usize, n: usize, c: usize) -> f64 {
        self.values[(t * self.nodes + n) * self.channels + c]
    }

    /// Joins single-channel matrices (one per file) into one multi-channel matrix.
    pub fn stack_channels(parts: Vec<GraphSignalMatrix>) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(StnasError::Data("no signal channels given".into()));
        };
        let (steps, nodes) = (first.steps, first.nodes);
        let channels: usize = parts.iter().map(|p| p.channels).sum();
        for p in &parts {
            if p.steps != steps || p.nodes != nodes {
                return Err(StnasError::Data(format!(
                    "channel files disagree on shape: {}×{} vs {}×{}",
                    p.steps, p.nodes, steps, nodes
                )));
            }
        }
        let mut values = Vec::with_capacity(steps * nodes * channels);
        for t in 0..steps {
            for n in 0..nodes {
                for p in &parts {
                    for c in 0..p.channels {
                        values.push(p.at(t, n, c));
                    }
                }
            }
        }
        let mut out = Self::new(steps, nodes, channels, values)?;
        out.node_ids = first.node_ids.clone();
        out.interval_minutes = first.interval_minutes;
        out.start = first.start;
        out.null_value = first.null_value;
        Ok(out)
    }
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    for fmt in [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
}

/// Parses the signals CSV text. Rows and columns in error messages are 1-based
/// data rows (after the header) and 1-based node columns.
pub fn parse_signals_csv(text: &str, null_value: Option<f64>) -> Result<GraphSignalMatrix> {
    let mut interval = None;
    let mut start = None;
    let mut body_start = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if let Some(meta) = trimmed.strip_prefix('#') {
            if let Some((k, v)) = meta.split_once('=') {
                let (k, v) = (k.trim(), v.trim());
                match k {
                    "interval_minutes" => {
                        interval = Some(v.parse::<u32>().map_err(|_| {
                            StnasError::Parse(format!("metadata interval_minutes `{v}` is not an integer"))
                        })?)
                    }
                    "start" => {
                        start = Some(
                            parse_timestamp(v)
                                .ok_or_else(|| StnasError::Parse(format!("metadata start `{v}` is not a timestamp")))?,
                        )
                    }
                    _ => {}
                }
            }
            body_start += line.len();
        } else if trimmed.is_empty() {
            body_start += line.len();
        } else {
            break;
        }
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(&text.as_bytes()[body_start..]);
    let mut records = reader.records();
    let header = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(StnasError::Parse(format!("header: {e}"))),
        None => return Err(StnasError::Parse("empty signals file".into())),
    };
    let has_ts = header.get(0).map(|h| h.eq_ignore_ascii_case("timestamp")) == Some(true);
    let node_ids: Vec<String> = header.iter().skip(usize::from(has_ts)).map(str::to_string).collect();
    if node_ids.is_empty() {
        return Err(StnasError::Parse("header names no node columns".into()));
    }
    let width = node_ids.len() + usize::from(has_ts);
    let mut values = Vec::new();
    let mut steps = 0;
    for (i, rec) in records.enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| StnasError::Parse(format!("row {row}: {e}")))?;
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        if rec.len() != width {
            return Err(StnasError::Parse(format!(
                "row {row}: expected {width} columns, found {}",
                rec.len()
            )));
        }
        if has_ts && row == 1 && start.is_none() {
            start = parse_timestamp(&rec[0]);
        }
        for (col, cell) in rec.iter().skip(usize::from(has_ts)).enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| StnasError::Parse(format!("row {row}, column {}: `{cell}` is not a number", col + 1)))?;
            values.push(v);
        }
        steps += 1;
    }
    if steps == 0 {
        return Err(StnasError::Parse("signals file has no data rows".into()));
    }
    let mut m = GraphSignalMatrix::new(steps, node_ids.len(), 1, values)?;
    m.node_ids = node_ids;
    m.interval_minutes = interval;
    m.start = start;
    m.null_value = null_value;
    Ok(m)
}

pub fn write_signals_csv(m: &GraphSignalMatrix, channel: usize) -> String {
    let mut out = String::new();
    if let Some(i) = m.interval_minutes {
        out.push_str(&format!("# interval_minutes={i}\n"));
    }
    if let Some(s) = m.start {
        out.push_str(&format!("# start={}\n", s.format("%Y-%m-%dT%H:%M:%S")));
    }
    out.push_str("timestamp");
    for id in &m.node_ids {
        out.push(',');
        out.push_str(id);
    }
    out.push('\n');
    for t in 0..m.steps {
        out.push_str(&t.to_string());
        for n in 0..m.nodes {
            out.push(',');
            out.push_str(&format!("{:?}", m.at(t, n, channel)));
        }
        out.push('\n');
    }
    out
}

pub fn encode_binary(m: &GraphSignalMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(30 + 8 * m.values.len());
    out.extend_from_slice(BINARY_MAGIC);
    for d in [m.steps, m.nodes, m.channels] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in &m.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_binary(bytes: &[u8], null_value: Option<f64>) -> Result<GraphSignalMatrix> {
    let body = bytes
        .strip_prefix(BINARY_MAGIC.as_slice())
        .ok_or_else(|| StnasError::Parse("missing STNAS1 magic".into()))?;
    if body.len() < 24 {
        return Err(StnasError::Parse("truncated binary header".into()));
    }
    let dim = |i: usize| -> Result<usize> {
        let raw = u64::from_le_bytes(body[i * 8..i * 8 + 8].try_into().expect("8 bytes"));
        usize::try_from(raw).map_err(|_| StnasError::Parse(format!("extent {raw} too large")))
    };
    let (t, n, c) = (dim(0)?, dim(1)?, dim(2)?);
    let count = t
        .checked_mul(n)
        .and_then(|x| x.checked_mul(c))
        .ok_or_else(|| StnasError::Parse("binary extents overflow".into()))?;
    let payload = &body[24..];
    if count.checked_mul(8) != Some(payload.len()) {
        return Err(StnasError::Parse(format!(
            "binary header declares {t}×{n}×{c} values but payload holds {} bytes",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let mut m = GraphSignalMatrix::new(t, n, c, values)?;
    m.null_value = null_value;
    Ok(m)
}

/// Loads a signals file, choosing the binary decoder when the magic is present.
pub fn load_signals(path: &Path, null_value: Option<f64>) -> Result<GraphSignalMatrix> {
    let bytes = std::fs::read(path).map_err(|e| StnasError::io(path, e))?;
    if bytes.starts_with(BINARY_MAGIC) {
        return decode_binary(&bytes, null_value);
    }
    let text = String::from_utf8(bytes)
        .map_err(|_| StnasError::Parse(format!("{} is neither UTF-8 CSV nor STNAS1", path.display())))?;
    parse_signals_csv(&text, null_value).map_err(|e| StnasError::Parse(format!("{}: {e}", path.display())))
}
