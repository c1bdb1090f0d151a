//! Discrete architectures and their text file format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cell::{edge_key, edge_list, EdgeChoices};
use crate::error::{Result, StnasError};
use crate::ops::Operator;

pub const ARCH_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    Decoupled,
    Mixed,
}

impl fmt::Display for SearchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SearchMode::Decoupled => "decoupled",
            SearchMode::Mixed => "mixed",
        })
    }
}

impl FromStr for SearchMode {
    type Err = StnasError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decoupled" => Ok(SearchMode::Decoupled),
            "mixed" => Ok(SearchMode::Mixed),
            other => Err(StnasError::Parse(format!(
                "unknown mode `{other}` (expected decoupled or mixed)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchHyper {
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
    pub history: usize,
    pub horizon: usize,
    pub mode: SearchMode,
    pub eq5_multiplicity: bool,
}

/// One operator per edge for the temporal DAG and for each spatial DAG.
///
/// In mixed mode `temporal_edges` holds the first DAG and `spatial_dags` the single second one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteArchitecture {
    pub version: u32,
    pub hyperparameters: ArchHyper,
    pub temporal_edges: EdgeChoices,
    pub spatial_dags: Vec<EdgeChoices>,
}

fn check_edges(map: &EdgeChoices, nodes: usize, what: &str, allowed: impl Fn(Operator) -> bool) -> Result<()> {
    let expected: Vec<String> = edge_list(nodes).into_iter().map(|(i, j)| edge_key(i, j)).collect();
    for key in &expected {
        let op = map
            .get(key)
            .ok_or_else(|| StnasError::Architecture(format!("{what} is missing edge {key}")))?;
        if !allowed(*op) {
            return Err(StnasError::Architecture(format!(
                "{what} edge {key} uses `{op}`, which does not belong there"
            )));
        }
    }
    if let Some(extra) = map.keys().find(|k| !expected.contains(k)) {
        return Err(StnasError::Architecture(format!("{what} has unexpected edge {extra}")));
    }
    Ok(())
}

impl DiscreteArchitecture {
    pub fn validate(&self) -> Result<()> {
        let h = &self.hyperparameters;
        if self.version != ARCH_VERSION {
            return Err(StnasError::Architecture(format!(
                "unsupported version {} (expected {ARCH_VERSION})",
                self.version
            )));
        }
        for (name, v) in [
            ("hidden", h.hidden),
            ("patches", h.patches),
            ("temporal_nodes", h.temporal_nodes),
            ("spatial_nodes", h.spatial_nodes),
            ("heads", h.heads),
            ("groups", h.groups),
            ("node_emb_dim", h.node_emb_dim),
            ("kernel_size", h.kernel_size),
            ("dilation", h.dilation),
            ("history", h.history),
            ("horizon", h.horizon),
        ] {
            if v == 0 {
                return Err(StnasError::Architecture(format!(
                    "hyperparameter `{name}` must be positive"
                )));
            }
        }
        match h.mode {
            SearchMode::Decoupled => {
                check_edges(&self.temporal_edges, h.temporal_nodes, "temporal DAG", |o| {
                    !o.is_spatial()
                })?;
                if self.spatial_dags.len() != h.patches {
                    return Err(StnasError::Architecture(format!(
                        "{} spatial DAGs listed for {} patches",
                        self.spatial_dags.len(),
                        h.patches
                    )));
                }
                for (m, dag) in self.spatial_dags.iter().enumerate() {
                    check_edges(dag, h.spatial_nodes, &format!("spatial DAG {m}"), |o| !o.is_temporal())?;
                }
            }
            SearchMode::Mixed => {
                check_edges(&self.temporal_edges, h.temporal_nodes, "first mixed DAG", |_| true)?;
                if self.spatial_dags.len() != 1 {
                    return Err(StnasError::Architecture(format!(
                        "mixed mode expects one second DAG, found {}",
                        self.spatial_dags.len()
                    )));
                }
                check_edges(&self.spatial_dags[0], h.spatial_nodes, "second mixed DAG", |_| true)?;
            }
        }
        Ok(())
    }

    pub fn uses(&self, op: Operator) -> bool {
        self.temporal_edges
            .values()
            .chain(self.spatial_dags.iter().flat_map(|d| d.values()))
            .any(|&o| o == op)
    }

    /// Pretty JSON with sorted keys and a trailing newline; identical inputs give identical bytes.
    pub fn to_text(&self) -> String {
        let value = serde_json::to_value(self).expect("architecture serializes");
        let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let arch: Self =
            serde_json::from_str(text).map_err(|e| StnasError::Parse(format!("architecture file: {e}")))?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| StnasError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| StnasError::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(nodes: usize, op: Operator) -> EdgeChoices {
        edge_list(nodes)
            .into_iter()
            .map(|(i, j)| (edge_key(i, j), op))
            .collect()
    }

    fn sample() -> DiscreteArchitecture {
        DiscreteArchitecture {
            version: ARCH_VERSION,
            hyperparameters: ArchHyper {
                hidden: 8,
                patches: 2,
                temporal_nodes: 2,
                spatial_nodes: 2,
                diffusion_steps: 2,
                heads: 4,
                groups: 1,
                node_emb_dim: 8,
                kernel_size: 2,
                dilation: 1,
                history: 12,
                horizon: 12,
                mode: SearchMode::Decoupled,
                eq5_multiplicity: false,
            },
            temporal_edges: uniform(2, Operator::Gdcc),
            spatial_dags: vec![uniform(2, Operator::GnnAdap), uniform(2, Operator::Identity)],
        }
    }

    #[test]
    fn text_round_trip_is_stable() {
        let a = sample();
        let text = a.to_text();
        let b = DiscreteArchitecture::from_text(&text).unwrap();
        assert_eq!(a, b);
        assert_eq!(text, b.to_text());
        assert!(text.contains("\"0->1\": \"gdcc\""));
        // keys sorted at every level
        let h = text.find("\"hyperparameters\"").unwrap();
        let s = text.find("\"spatial_dags\"").unwrap();
        let t = text.find("\"temporal_edges\"").unwrap();
        let v = text.find("\"version\"").unwrap();
        assert!(h < s && s < t && t < v);
    }

    #[test]
    fn validation_catches_bad_files() {
        let mut a = sample();
        a.temporal_edges.insert("0->1".into(), Operator::GnnAtt);
        assert!(a.validate().is_err());
        let mut a = sample();
        a.spatial_dags.pop();
        assert!(a.validate().is_err());
        let mut a = sample();
        a.spatial_dags[0].remove("1->2");
        assert!(a.validate().unwrap_err().to_string().contains("1->2"));
        let text = sample().to_text().replace("\"gdcc\"", "\"lstm\"");
        assert!(DiscreteArchitecture::from_text(&text).is_err());
        assert!(DiscreteArchitecture::from_text("{").is_err());
    }
}
