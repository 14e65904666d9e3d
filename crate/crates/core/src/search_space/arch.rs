use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{softmax, Gradients, Graph, Var};
use crate::tensor::Tensor;

use super::cell::{CellKind, Mixing};
use super::network::{ArchRef, Supernet};

/// Relaxation logits of one edge, tagged with the candidate ids they weigh.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeLogits {
    pub candidates: Vec<String>,
    pub logits: Vec<f64>,
}

/// Architecture weights: one logit vector per searchable edge.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureWeights {
    edges: Vec<EdgeLogits>,
}

impl ArchitectureWeights {
    /// All logits zero, i.e. the uniform relaxation.
    pub fn uniform(candidates: Vec<Vec<String>>) -> Self {
        Self {
            edges: candidates
                .into_iter()
                .map(|c| EdgeLogits {
                    logits: vec![0.0; c.len()],
                    candidates: c,
                })
                .collect(),
        }
    }

    pub fn from_edges(edges: Vec<EdgeLogits>) -> Result<Self> {
        for (i, e) in edges.iter().enumerate() {
            if e.candidates.is_empty() || e.candidates.len() != e.logits.len() {
                return Err(Error::EdgeDimension {
                    edge: i,
                    detail: format!(
                        "{} logits for {} candidates",
                        e.logits.len(),
                        e.candidates.len()
                    ),
                });
            }
        }
        Ok(Self { edges })
    }

    pub fn edges(&self) -> &[EdgeLogits] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn num_logits(&self) -> usize {
        self.edges.iter().map(|e| e.logits.len()).sum()
    }

    pub fn logits_mut(&mut self, edge: usize) -> &mut [f64] {
        &mut self.edges[edge].logits
    }

    /// Per-edge exponential normalization.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.edges.iter().map(|e| softmax(&e.logits)).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.edges
            .iter()
            .flat_map(|e| e.logits.iter().copied())
            .collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_logits() {
            return Err(Error::Shape(format!(
                "{} logits given, architecture has {}",
                flat.len(),
                self.num_logits()
            )));
        }
        let mut offset = 0;
        for e in &mut self.edges {
            let n = e.logits.len();
            e.logits.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.edges
            .iter()
            .all(|e| e.logits.iter().all(|v| v.is_finite()))
    }

    /// Checks that this architecture matches a network's edges and candidates.
    pub fn check_against(&self, net: &dyn Supernet) -> Result<()> {
        let expected = net.edge_candidates();
        if expected.len() != self.edges.len() {
            return Err(Error::Shape(format!(
                "architecture has {} edges, network has {}",
                self.edges.len(),
                expected.len()
            )));
        }
        for (i, (e, c)) in self.edges.iter().zip(&expected).enumerate() {
            if &e.candidates != c {
                return Err(Error::EdgeDimension {
                    edge: i,
                    detail: format!("candidates {:?} do not match network {:?}", e.candidates, c),
                });
            }
        }
        Ok(())
    }
}

/// Per-edge selected candidate after discretization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscreteArchitecture {
    choices: Vec<usize>,
    ids: Vec<String>,
}

impl DiscreteArchitecture {
    pub fn from_choices(choices: Vec<usize>) -> Self {
        let ids = choices.iter().map(|c| format!("#{c}")).collect();
        Self { choices, ids }
    }

    pub fn choices(&self) -> &[usize] {
        &self.choices
    }

    /// Chosen operator id per edge.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Text manifest: one line per cell, `<section> <kind> <op id>...`.
    pub fn manifest(&self, net: &dyn Supernet) -> Result<String> {
        let layout = net.cell_layout();
        let total: usize = layout.iter().map(|(_, _, n)| n).sum();
        if total != self.ids.len() {
            return Err(Error::Shape(format!(
                "{} choices for {} edges",
                self.ids.len(),
                total
            )));
        }
        let mut out = String::new();
        let mut edge = 0;
        for (section, kind, n) in layout {
            out.push_str(&format!("{section} {kind}"));
            for id in &self.ids[edge..edge + n] {
                out.push(' ');
                out.push_str(id);
            }
            out.push('\n');
            edge += n;
        }
        Ok(out)
    }
}

/// One parsed manifest line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestCell {
    pub section: String,
    pub kind: CellKind,
    pub operators: Vec<String>,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestCell>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|line| {
            let mut parts = line.split_whitespace();
            let section = parts.next().expect("non-empty line").to_string();
            let kind = CellKind::parse(parts.next().ok_or_else(|| {
                Error::Config(format!("manifest line `{line}` has no cell kind"))
            })?)?;
            let operators: Vec<String> = parts.map(str::to_string).collect();
            if operators.is_empty() {
                return Err(Error::Config(format!(
                    "manifest line `{line}` lists no operators"
                )));
            }
            Ok(ManifestCell {
                section,
                kind,
                operators,
            })
        })
        .collect()
}

/// Per edge, the candidate with the largest logit; ties go to the lowest index.
pub fn derive_architecture(alpha: &ArchitectureWeights) -> DiscreteArchitecture {
    let mut choices = Vec::with_capacity(alpha.edges.len());
    let mut ids = Vec::with_capacity(alpha.edges.len());
    for e in &alpha.edges {
        let mut best = 0;
        for (i, &v) in e.logits.iter().enumerate() {
            if v > e.logits[best] {
                best = i;
            }
        }
        choices.push(best);
        ids.push(e.candidates[best].clone());
    }
    DiscreteArchitecture { choices, ids }
}

/// Architecture bound into a graph, ready to drive a forward pass.
pub struct BoundArch {
    logits: Vec<Var>,
    weights: Vec<Var>,
    choices: Option<Vec<usize>>,
}

impl BoundArch {
    pub fn bind(g: &mut Graph, arch: ArchRef<'_>) -> Self {
        match arch {
            ArchRef::Logits(alpha) => {
                let logits: Vec<Var> = alpha
                    .edges
                    .iter()
                    .map(|e| g.leaf(Tensor::from_vec(e.logits.clone())))
                    .collect();
                let weights = logits.iter().map(|&l| g.softmax(l)).collect();
                Self {
                    logits,
                    weights,
                    choices: None,
                }
            }
            ArchRef::Weights(w) => Self {
                logits: vec![],
                weights: w
                    .iter()
                    .map(|e| g.leaf(Tensor::from_vec(e.clone())))
                    .collect(),
                choices: None,
            },
            ArchRef::Discrete(d) => Self {
                logits: vec![],
                weights: vec![],
                choices: Some(d.choices.clone()),
            },
        }
    }

    pub fn mixing(&self) -> Mixing<'_> {
        match &self.choices {
            Some(c) => Mixing::Discrete(c),
            None => Mixing::Relaxed(&self.weights),
        }
    }

    /// Normalized weight nodes (empty for discrete architectures).
    pub fn weights(&self) -> &[Var] {
        &self.weights
    }

    /// Flattened gradient with respect to the logits (zeros where absent).
    pub fn logit_gradient(&self, grads: &Gradients, alpha: &ArchitectureWeights) -> Vec<f64> {
        let mut out = Vec::with_capacity(alpha.num_logits());
        for (e, &v) in alpha.edges.iter().zip(&self.logits) {
            match grads.get(v) {
                Some(t) => out.extend_from_slice(t.data()),
                None => out.extend(std::iter::repeat_n(0.0, e.logits.len())),
            }
        }
        out
    }
}

/// Cost `LAT(o)` per operator id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatencyTable {
    entries: BTreeMap<String, f64>,
}

impl LatencyTable {
    pub fn new(entries: BTreeMap<String, f64>) -> Result<Self> {
        for (id, &v) in &entries {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "latency of `{id}` must be a finite non-negative number, got {v}"
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, f64)>) -> Result<Self> {
        Self::new(pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
    }

    /// Synthetic table: parameter count in thousands plus a small per-call
    /// overhead for any operator that touches its input.
    pub fn synthetic(config: &super::config::SearchSpaceConfig) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for id in config.operator_ids() {
            let op = config.resolve_operator(&id)?;
            let cost = match op.kind {
                super::operator::OperatorKind::Zero => 0.0,
                _ => 0.01 + op.param_count() as f64 / 1000.0,
            };
            entries.insert(id, cost);
        }
        Self::new(entries)
    }

    pub fn get(&self, id: &str) -> Result<f64> {
        self.entries
            .get(id)
            .copied()
            .ok_or_else(|| Error::Config(format!("latency table has no entry for operator `{id}`")))
    }

    pub fn entries(&self) -> &BTreeMap<String, f64> {
        &self.entries
    }

    /// Fails on the first candidate without an entry.
    pub fn check_covers(&self, alpha: &ArchitectureWeights) -> Result<()> {
        for e in &alpha.edges {
            for id in &e.candidates {
                self.get(id)?;
            }
        }
        Ok(())
    }

    fn edge_costs(&self, e: &EdgeLogits) -> Result<Vec<f64>> {
        e.candidates.iter().map(|id| self.get(id)).collect()
    }

    /// Latency of a discrete architecture: the sum of its chosen operators.
    pub fn discrete_cost(&self, arch: &DiscreteArchitecture) -> Result<f64> {
        arch.ids.iter().map(|id| self.get(id)).sum()
    }
}

/// `Reg(alpha) = sum over edges and candidates of softmax(alpha_e)_o * LAT(o)`.
pub fn latency_regularizer(alpha: &ArchitectureWeights, table: &LatencyTable) -> Result<f64> {
    let mut total = 0.0;
    for (e, w) in alpha.edges.iter().zip(alpha.normalized()) {
        let costs = table.edge_costs(e)?;
        total += w.iter().zip(&costs).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(total)
}

/// Graph form of [`latency_regularizer`] over already-normalized edge weights.
pub fn latency_term(
    g: &mut Graph,
    weights: &[Var],
    alpha: &ArchitectureWeights,
    table: &LatencyTable,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (e, &w) in alpha.edges.iter().zip(weights) {
        let costs = g.leaf(Tensor::from_vec(table.edge_costs(e)?));
        let weighted = g.mul(w, costs)?;
        let s = g.sum(weighted);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    Ok(total.unwrap_or_else(|| g.leaf(Tensor::scalar(0.0))))
}
