//! Declarative search-space files (TOML).
//!
//! ```toml
//! width = 16
//!
//! [operators]                 # optional: extra ids beyond the built-ins
//! cheap_skip = { kind = "skip-connect" }
//!
//! [[fusion.cells]]
//! kind = "MS"
//! edges = [["3-RB", "3-DC"], ["3-DB", "SA"]]
//!
//! [[task.target]]
//! kind = "SC"
//! edges = [["SA", "3-DC"]]
//!
//! [latency]
//! "3-RB" = 1.4
//! ```
//!
//! Built-in operator ids are `CA`, `SA`, `skip`, `zero` and `<k>-<FAMILY>`
//! with `k` in {3, 5} and `FAMILY` in {DC, RB, DB, SC}.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::cell::{CellKind, CellSpec};
use super::operator::{OperatorKind, OperatorSpec};

pub const DEFAULT_WIDTH: usize = 16;

/// Candidate set of the default fusion search space.
pub const DEFAULT_FUSION_CANDIDATES: [&str; 6] = ["3-RB", "3-DC", "3-DB", "3-SC", "CA", "SA"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpaceConfig {
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default)]
    pub operators: BTreeMap<String, CustomOperator>,
    #[serde(default)]
    pub fusion: NetworkLayout,
    #[serde(default)]
    pub task: TaskLayout,
    #[serde(default)]
    pub latency: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomOperator {
    pub kind: String,
    #[serde(default)]
    pub kernel: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkLayout {
    pub cells: Vec<CellConfig>,
}

impl Default for NetworkLayout {
    /// Two fusion cells (MS, SC) with two edges over six candidates each.
    fn default() -> Self {
        let edge: Vec<&str> = DEFAULT_FUSION_CANDIDATES.to_vec();
        Self {
            cells: vec![
                CellConfig::new("MS", &[&edge, &edge]),
                CellConfig::new("SC", &[&edge, &edge]),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    pub kind: String,
    pub edges: Vec<Vec<String>>,
}

impl CellConfig {
    pub fn new(kind: &str, edges: &[&[&str]]) -> Self {
        Self {
            kind: kind.to_string(),
            edges: edges
                .iter()
                .map(|e| e.iter().map(|s| s.to_string()).collect())
                .collect(),
        }
    }
}

/// Layout of the enhancement / task head: two parallel branches of cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskLayout {
    #[serde(default = "default_task_kind")]
    pub kind: String,
    pub target: Vec<CellConfig>,
    pub detail: Vec<CellConfig>,
}

impl Default for TaskLayout {
    /// Two successive cells per branch, two candidates per edge.
    fn default() -> Self {
        Self {
            kind: default_task_kind(),
            target: vec![
                CellConfig::new("SC", &[&["SA", "3-DC"]]),
                CellConfig::new("SC", &[&["SA", "3-DC"]]),
            ],
            detail: vec![
                CellConfig::new("SC", &[&["CA", "3-RB"]]),
                CellConfig::new("SC", &[&["CA", "3-RB"]]),
            ],
        }
    }
}

fn default_width() -> usize {
    DEFAULT_WIDTH
}

fn default_task_kind() -> String {
    "enhancement".to_string()
}

impl Default for SearchSpaceConfig {
    fn default() -> Self {
        Self {
            width: DEFAULT_WIDTH,
            operators: BTreeMap::new(),
            fusion: NetworkLayout::default(),
            task: TaskLayout::default(),
            latency: BTreeMap::new(),
        }
    }
}

impl SearchSpaceConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("search space config serializes")
    }

    /// The discrete architecture reported for infrared-visible fusion:
    /// fusion cells (MS, SC) with 3-RB, 3-DC, 3-DB, 3-DC and enhancement
    /// branches (SC, SC) with SA, 3-DC, CA, SA.
    pub fn ivif_searched() -> Self {
        Self {
            width: DEFAULT_WIDTH,
            operators: BTreeMap::new(),
            fusion: NetworkLayout {
                cells: vec![
                    CellConfig::new("MS", &[&["3-RB"], &["3-DC"]]),
                    CellConfig::new("SC", &[&["3-DB"], &["3-DC"]]),
                ],
            },
            task: TaskLayout {
                kind: default_task_kind(),
                target: vec![
                    CellConfig::new("SC", &[&["SA"]]),
                    CellConfig::new("SC", &[&["3-DC"]]),
                ],
                detail: vec![
                    CellConfig::new("SC", &[&["CA"]]),
                    CellConfig::new("SC", &[&["SA"]]),
                ],
            },
            latency: BTreeMap::new(),
        }
    }

    pub fn resolve_operator(&self, id: &str) -> Result<OperatorSpec> {
        match self.operators.get(id) {
            Some(custom) => OperatorSpec::new(
                id,
                OperatorKind::parse(&custom.kind)?,
                custom.kernel,
                self.width,
            ),
            None => OperatorSpec::builtin(id, self.width),
        }
    }

    pub fn resolve_cells(&self, cells: &[CellConfig]) -> Result<Vec<CellSpec>> {
        cells
            .iter()
            .map(|c| {
                let kind = CellKind::parse(&c.kind)?;
                let edges = c
                    .edges
                    .iter()
                    .map(|e| {
                        e.iter()
                            .map(|id| self.resolve_operator(id))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                CellSpec::new(kind, edges)
            })
            .collect()
    }

    /// Every operator id mentioned anywhere in the layout.
    pub fn operator_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .fusion
            .cells
            .iter()
            .chain(&self.task.target)
            .chain(&self.task.detail)
            .flat_map(|c| c.edges.iter().flatten().cloned())
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_declarative_file() {
        let text = r#"
            width = 8
            [operators]
            fast = { kind = "skip-connect" }
            big = { kind = "dilated-conv", kernel = 5 }
            [[fusion.cells]]
            kind = "DC"
            edges = [["fast", "big"], ["3-RB"]]
            [latency]
            fast = 0.5
            big = 3.0
            "3-RB" = 2.0
        "#;
        let cfg = SearchSpaceConfig::from_toml(text).unwrap();
        assert_eq!(cfg.width, 8);
        let cells = cfg.resolve_cells(&cfg.fusion.cells).unwrap();
        assert_eq!(cells[0].kind, CellKind::Decomposition);
        assert_eq!(cells[0].edges[0][1].kind, OperatorKind::DilatedConv);
        assert_eq!(cells[0].edges[0][1].kernel, Some(5));
        assert_eq!(cfg.task, TaskLayout::default());
        assert_eq!(SearchSpaceConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_ids_are_named() {
        let mut cfg = SearchSpaceConfig::default();
        cfg.fusion.cells[0].edges[0].push("9-ZZ".into());
        let err = cfg
            .resolve_cells(&cfg.fusion.cells)
            .unwrap_err()
            .to_string();
        assert!(err.contains("9-ZZ"), "{err}");
        cfg.fusion.cells[0].kind = "QQ".into();
        let err = cfg
            .resolve_cells(&cfg.fusion.cells)
            .unwrap_err()
            .to_string();
        assert!(err.contains("QQ"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(SearchSpaceConfig::from_toml("widht = 3\n[fusion]\ncells = []").is_err());
    }
}
