//! Sensor graph with a dense predefined adjacency.

use std::path::Path;

use stnas_autodiff::Tensor;

use crate::error::{Result, StnasError};

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialGraph {
    pub node_ids: Vec<String>,
    /// N×N, non-negative.
    pub adjacency: Tensor,
}

impl SpatialGraph {
    pub fn from_dense(adjacency: Tensor) -> Result<Self> {
        let shape = adjacency.shape();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(StnasError::Data(format!("adjacency must be square, got {shape:?}")));
        }
        if adjacency.data().iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(StnasError::Data(
                "adjacency weights must be finite and non-negative".into(),
            ));
        }
        let n = shape[0];
        Ok(Self {
            node_ids: (0..n).map(|i| i.to_string()).collect(),
            adjacency,
        })
    }

    pub fn nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn weight(&self, src: usize, dst: usize) -> f64 {
        self.adjacency.data()[src * self.nodes() + dst]
    }

    pub fn to_edge_csv(&self) -> String {
        let n = self.nodes();
        let mut out = String::from("src,dst,weight\n");
        for i in 0..n {
            for j in 0..n {
                let w = self.weight(i, j);
                if w != 0.0 {
                    out.push_str(&format!("{i},{j},{w:?}\n"));
                }
            }
        }
        out
    }
}

/// Parses a `src,dst,weight` edge list into a dense `n×n` matrix; duplicate edges sum.
pub fn parse_graph_csv(text: &str, n: usize) -> Result<SpatialGraph> {
    if n == 0 {
        return Err(StnasError::Data("graph needs at least one node".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| StnasError::Parse(format!("adjacency header: {e}")))?;
    if header.iter().collect::<Vec<_>>() != ["src", "dst", "weight"] {
        return Err(StnasError::Parse(format!(
            "adjacency header must be `src,dst,weight`, found `{}`",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut dense = vec![0.0; n * n];
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| StnasError::Parse(format!("adjacency row {row}: {e}")))?;
        let id = |col: usize| -> Result<usize> {
            let cell = &rec[col];
            let v: usize = cell
                .parse()
                .map_err(|_| StnasError::Parse(format!("adjacency row {row}: `{cell}` is not a node id")))?;
            if v >= n {
                return Err(StnasError::Data(format!(
                    "adjacency row {row}: node id {v} out of range for {n} nodes"
                )));
            }
            Ok(v)
        };
        let (src, dst) = (id(0)?, id(1)?);
        let w: f64 = rec[2]
            .parse()
            .map_err(|_| StnasError::Parse(format!("adjacency row {row}: `{}` is not a weight", &rec[2])))?;
        if !(w >= 0.0) || !w.is_finite() {
            return Err(StnasError::Data(format!(
                "adjacency row {row}: weight {w} must be finite and non-negative"
            )));
        }
        dense[src * n + dst] += w;
    }
    SpatialGraph::from_dense(Tensor::new(vec![n, n], dense)?)
}

pub fn load_graph(path: &Path, n: usize) -> Result<SpatialGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| StnasError::io(path, e))?;
    parse_graph_csv(&text, n)
}
