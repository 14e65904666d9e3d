use std::fmt;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{ConvOpts, Graph, Var};
use crate::tensor::Tensor;

use super::operator::{init_tensor, BoundOperator, OperatorSpec};
use super::params::{NetworkParams, ParamVars};

/// Cell templates.
///
/// * `Successive`: edges applied one after another.
/// * `Decomposition`: a 3x3 box-filtered (low-frequency) path and the residual
///   detail path, each through its own half of the edges, summed.
/// * `MultiScale`: the edge chain runs at full, 1/2 and 1/4 resolution with
///   shared parameters; the three results are upsampled, concatenated and
///   fused by a 1x1 convolution. Needs height and width divisible by 4.
/// * `FeatureDistillation`: node `i` is edge `i` applied to node `i - 1`;
///   the final node concatenates every interior node and fuses by 1x1 conv.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellKind {
    Successive,
    Decomposition,
    MultiScale,
    FeatureDistillation,
}

impl CellKind {
    pub fn code(self) -> &'static str {
        match self {
            CellKind::Successive => "SC",
            CellKind::Decomposition => "DC",
            CellKind::MultiScale => "MS",
            CellKind::FeatureDistillation => "FD",
        }
    }

    pub fn parse(code: &str) -> Result<Self> {
        match code {
            "SC" => Ok(CellKind::Successive),
            "DC" => Ok(CellKind::Decomposition),
            "MS" => Ok(CellKind::MultiScale),
            "FD" => Ok(CellKind::FeatureDistillation),
            _ => Err(Error::Config(format!("unknown cell kind `{code}`"))),
        }
    }

    /// Spatial divisibility the cell needs from its input.
    pub fn size_multiple(self) -> usize {
        match self {
            CellKind::MultiScale => 4,
            _ => 1,
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// A cell: its kind and the candidate operators of each edge, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellSpec {
    pub kind: CellKind,
    pub edges: Vec<Vec<OperatorSpec>>,
}

impl CellSpec {
    pub fn new(kind: CellKind, edges: Vec<Vec<OperatorSpec>>) -> Result<Self> {
        if edges.is_empty() {
            return Err(Error::Config(format!("{kind} cell has no edges")));
        }
        if let Some(i) = edges.iter().position(Vec::is_empty) {
            return Err(Error::Config(format!(
                "{kind} cell: edge {i} has no candidate operators"
            )));
        }
        for (i, edge) in edges.iter().enumerate() {
            for (j, op) in edge.iter().enumerate() {
                if edge[..j].iter().any(|o| o.id == op.id) {
                    return Err(Error::Config(format!(
                        "{kind} cell: edge {i} lists `{}` twice",
                        op.id
                    )));
                }
            }
        }
        Ok(Self { kind, edges })
    }

    fn fuse_inputs(&self) -> Option<usize> {
        match self.kind {
            CellKind::MultiScale => Some(3),
            CellKind::FeatureDistillation => Some(self.edges.len()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BoundCell {
    pub spec: CellSpec,
    edges: Vec<Vec<BoundOperator>>,
    first_edge: usize,
    fuse: Option<(usize, usize)>,
}

/// How edges combine their candidates during a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Mixing<'a> {
    /// Per-edge normalized weight vectors (graph nodes, so they can carry gradients).
    Relaxed(&'a [Var]),
    /// Per-edge chosen candidate index.
    Discrete(&'a [usize]),
}

impl Mixing<'_> {
    pub(crate) fn edge_count(&self) -> usize {
        match self {
            Mixing::Relaxed(w) => w.len(),
            Mixing::Discrete(c) => c.len(),
        }
    }
}

fn box_kernel() -> Rc<Tensor> {
    Rc::new(Tensor::full(vec![3, 3], 1.0 / 9.0))
}

impl BoundCell {
    pub(crate) fn allocate<R: Rng + ?Sized>(
        spec: CellSpec,
        prefix: &str,
        width: usize,
        first_edge: usize,
        params: &mut NetworkParams,
        rng: &mut R,
    ) -> Result<Self> {
        let mut edges = Vec::with_capacity(spec.edges.len());
        for (e, candidates) in spec.edges.iter().enumerate() {
            let ops = candidates
                .iter()
                .map(|op| {
                    BoundOperator::allocate(op.clone(), &format!("{prefix}.edge{e}"), params, rng)
                })
                .collect::<Result<Vec<_>>>()?;
            edges.push(ops);
        }
        let fuse = match spec.fuse_inputs() {
            Some(k) => {
                let w = params.insert(
                    format!("{prefix}.fuse.w"),
                    init_tensor(&[width, k * width, 1, 1], rng),
                )?;
                let b = params.insert(format!("{prefix}.fuse.b"), Tensor::zeros(vec![width]))?;
                Some((w, b))
            }
            None => None,
        };
        Ok(Self {
            spec,
            edges,
            first_edge,
            fuse,
        })
    }

    pub(crate) fn edge_count(&self) -> usize {
        self.edges.len()
    }

    fn edge(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        mixing: Mixing<'_>,
        local: usize,
        x: Var,
    ) -> Result<Var> {
        let global = self.first_edge + local;
        let candidates = &self.edges[local];
        let expected = candidates[0].spec.channels_in;
        let channels = g.shape(x).get(1).copied().unwrap_or(0);
        if g.shape(x).len() != 4 || channels != expected {
            return Err(Error::EdgeDimension {
                edge: global,
                detail: format!(
                    "input {:?}, operators expect {expected} channels",
                    g.shape(x)
                ),
            });
        }
        match mixing {
            Mixing::Relaxed(weights) => {
                let outputs = candidates
                    .iter()
                    .map(|op| op.forward(g, pv, x))
                    .collect::<Result<Vec<_>>>()?;
                g.weighted_sum(weights[global], &outputs)
                    .map_err(|e| Error::EdgeDimension {
                        edge: global,
                        detail: e.to_string(),
                    })
            }
            Mixing::Discrete(choices) => {
                let op = candidates
                    .get(choices[global])
                    .ok_or_else(|| Error::EdgeDimension {
                        edge: global,
                        detail: format!(
                            "choice {} out of {} candidates",
                            choices[global],
                            candidates.len()
                        ),
                    })?;
                op.forward(g, pv, x)
            }
        }
    }

    fn chain(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        mixing: Mixing<'_>,
        edges: std::ops::Range<usize>,
        mut x: Var,
    ) -> Result<Var> {
        for e in edges {
            x = self.edge(g, pv, mixing, e, x)?;
        }
        Ok(x)
    }

    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        mixing: Mixing<'_>,
        x: Var,
    ) -> Result<Var> {
        let n = self.edge_count();
        match self.spec.kind {
            CellKind::Successive => self.chain(g, pv, mixing, 0..n, x),
            CellKind::Decomposition => {
                let low = g.filter(x, box_kernel(), 1)?;
                let detail = g.sub(x, low)?;
                let split = n.div_ceil(2);
                let low = self.chain(g, pv, mixing, 0..split, low)?;
                let detail = self.chain(g, pv, mixing, split..n, detail)?;
                g.add(low, detail)
            }
            CellKind::MultiScale => {
                let (h, w) = (g.shape(x)[2], g.shape(x)[3]);
                if h % 4 != 0 || w % 4 != 0 {
                    return Err(Error::ImageSize {
                        height: h,
                        width: w,
                        reason: "multi-scale cell needs height and width divisible by 4".into(),
                    });
                }
                let half = g.avg_pool2(x)?;
                let quarter = g.avg_pool2(half)?;
                let full = self.chain(g, pv, mixing, 0..n, x)?;
                let half = self.chain(g, pv, mixing, 0..n, half)?;
                let quarter = self.chain(g, pv, mixing, 0..n, quarter)?;
                let half = g.upsample2(half)?;
                let quarter = g.upsample2(quarter)?;
                let quarter = g.upsample2(quarter)?;
                let cat = g.concat(&[full, half, quarter])?;
                self.fuse(g, pv, cat)
            }
            CellKind::FeatureDistillation => {
                let mut nodes = Vec::with_capacity(n);
                let mut cur = x;
                for e in 0..n {
                    cur = self.edge(g, pv, mixing, e, cur)?;
                    nodes.push(cur);
                }
                let cat = g.concat(&nodes)?;
                self.fuse(g, pv, cat)
            }
        }
    }

    fn fuse(&self, g: &mut Graph, pv: &ParamVars, cat: Var) -> Result<Var> {
        let (w, b) = self.fuse.expect("fusing cells allocate a 1x1 fuse conv");
        g.conv2d(cat, pv.get(w), Some(pv.get(b)), ConvOpts::same(1, 1))
    }
}
