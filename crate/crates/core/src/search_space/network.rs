use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{ConvOpts, Graph, Var};
use crate::tensor::Tensor;

use super::arch::{ArchitectureWeights, BoundArch, DiscreteArchitecture};
use super::cell::{BoundCell, CellKind, CellSpec, Mixing};
use super::config::{CellConfig, SearchSpaceConfig};
use super::operator::init_tensor;
use super::params::{NetworkParams, ParamVars};

/// Downstream head trained on top of the fused image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Visual enhancement: regresses an enhanced luminance image.
    Enhancement,
    /// Two-class saliency-mask prediction: outputs per-pixel logits.
    Segmentation,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "enhancement" => Ok(TaskKind::Enhancement),
            "segmentation" => Ok(TaskKind::Segmentation),
            _ => Err(Error::Config(format!("unknown task kind `{s}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Enhancement => "enhancement",
            TaskKind::Segmentation => "segmentation",
        }
    }
}

/// One named, ordered group of cells (`fusion`, `task.target`, ...).
#[derive(Debug, Clone)]
struct CellStack {
    pub section: String,
    pub cells: Vec<BoundCell>,
}

impl CellStack {
    fn allocate<R: Rng + ?Sized>(
        section: &str,
        specs: Vec<CellSpec>,
        width: usize,
        first_edge: &mut usize,
        params: &mut NetworkParams,
        rng: &mut R,
    ) -> Result<Self> {
        let mut cells = Vec::with_capacity(specs.len());
        for (i, spec) in specs.into_iter().enumerate() {
            let cell = BoundCell::allocate(
                spec,
                &format!("{section}.cell{i}"),
                width,
                *first_edge,
                params,
                rng,
            )?;
            *first_edge += cell.edge_count();
            cells.push(cell);
        }
        Ok(Self {
            section: section.to_string(),
            cells,
        })
    }

    fn section(&self) -> (&str, Vec<&CellSpec>) {
        (&self.section, self.cells.iter().map(|c| &c.spec).collect())
    }

    fn forward(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        mixing: Mixing<'_>,
        mut x: Var,
    ) -> Result<Var> {
        for cell in &self.cells {
            x = cell.forward(g, pv, mixing, x)?;
        }
        Ok(x)
    }
}

/// Layout queries shared by the fusion network and the task head.
pub trait Supernet {
    /// Named cell groups in edge order.
    fn sections(&self) -> Vec<(&str, Vec<&CellSpec>)>;

    /// Cell specs in edge order.
    fn cells(&self) -> Vec<&CellSpec> {
        self.sections()
            .into_iter()
            .flat_map(|(_, cells)| cells)
            .collect()
    }

    fn edge_count(&self) -> usize {
        self.cells().iter().map(|c| c.edges.len()).sum()
    }

    /// Candidate operator ids of every edge, in edge order.
    fn edge_candidates(&self) -> Vec<Vec<String>> {
        self.cells()
            .iter()
            .flat_map(|c| {
                c.edges
                    .iter()
                    .map(|e| e.iter().map(|o| o.id.clone()).collect())
            })
            .collect()
    }

    /// `(section, kind, edge count)` per cell.
    fn cell_layout(&self) -> Vec<(String, CellKind, usize)> {
        self.sections()
            .into_iter()
            .flat_map(|(name, cells)| {
                cells
                    .into_iter()
                    .map(move |c| (name.to_string(), c.kind, c.edges.len()))
            })
            .collect()
    }

    /// Height and width must be multiples of this.
    fn size_multiple(&self) -> usize {
        self.cells()
            .iter()
            .map(|c| c.kind.size_multiple())
            .max()
            .unwrap_or(1)
    }

    fn uniform_architecture(&self) -> ArchitectureWeights {
        ArchitectureWeights::uniform(self.edge_candidates())
    }

    fn check_size(&self, height: usize, width: usize) -> Result<()> {
        let m = self.size_multiple();
        if height == 0 || width == 0 || height % m != 0 || width % m != 0 {
            return Err(Error::ImageSize {
                height,
                width,
                reason: format!("network needs height and width divisible by {m}"),
            });
        }
        Ok(())
    }

    fn check_mixing(&self, mixing: Mixing<'_>) -> Result<()> {
        if mixing.edge_count() != self.edge_count() {
            return Err(Error::Shape(format!(
                "architecture covers {} edges, network has {}",
                mixing.edge_count(),
                self.edge_count()
            )));
        }
        Ok(())
    }
}

fn alloc_conv<R: Rng + ?Sized>(
    params: &mut NetworkParams,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut R,
) -> Result<(usize, usize)> {
    let w = params.insert(format!("{name}.w"), init_tensor(&[cout, cin, k, k], rng))?;
    let b = params.insert(format!("{name}.b"), Tensor::zeros(vec![cout]))?;
    Ok((w, b))
}

fn conv(g: &mut Graph, pv: &ParamVars, wb: (usize, usize), x: Var, k: usize) -> Result<Var> {
    g.conv2d(x, pv.get(wb.0), Some(pv.get(wb.1)), ConvOpts::same(k, 1))
}

/// The fusion network: `concat(I_A, I_B) -> 3x3 stem -> cells -> 3x3 head`.
#[derive(Debug, Clone)]
pub struct FusionNetwork {
    width: usize,
    stem: (usize, usize),
    body: CellStack,
    head: (usize, usize),
}

impl Supernet for FusionNetwork {
    fn sections(&self) -> Vec<(&str, Vec<&CellSpec>)> {
        vec![self.body.section()]
    }
}

pub fn build_fusion_network<R: Rng + ?Sized>(
    config: &SearchSpaceConfig,
    rng: &mut R,
) -> Result<(FusionNetwork, NetworkParams)> {
    FusionNetwork::build(config, &config.fusion.cells, rng)
}

impl FusionNetwork {
    pub fn build<R: Rng + ?Sized>(
        config: &SearchSpaceConfig,
        cells: &[CellConfig],
        rng: &mut R,
    ) -> Result<(Self, NetworkParams)> {
        if config.width == 0 {
            return Err(Error::Config("width must be positive".into()));
        }
        let specs = config.resolve_cells(cells)?;
        let w = config.width;
        let mut params = NetworkParams::new();
        let stem = alloc_conv(&mut params, "fusion.stem", w, 2, 3, rng)?;
        let mut edge = 0;
        let body = CellStack::allocate("fusion", specs, w, &mut edge, &mut params, rng)?;
        let head = alloc_conv(&mut params, "fusion.head", 1, w, 3, rng)?;
        Ok((
            Self {
                width: w,
                stem,
                body,
                head,
            },
            params,
        ))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Fused image `[n, 1, h, w]` from two `[n, 1, h, w]` sources.
    pub fn forward(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        mixing: Mixing<'_>,
        a: Var,
        b: Var,
    ) -> Result<Var> {
        self.check_mixing(mixing)?;
        let (h, w) = (g.shape(a)[2], g.shape(a)[3]);
        self.check_size(h, w)?;
        let x = g.concat(&[a, b])?;
        let x = conv(g, pv, self.stem, x, 3)?;
        let x = g.relu(x);
        let x = self.body.forward(g, pv, mixing, x)?;
        conv(g, pv, self.head, x, 3)
    }

    /// Convenience forward without gradient tracking.
    pub fn fuse(
        &self,
        params: &NetworkParams,
        arch: ArchRef<'_>,
        a: &Tensor,
        b: &Tensor,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let pv = params.register(&mut g);
        let bound = BoundArch::bind(&mut g, arch);
        let (va, vb) = (g.leaf(a.clone()), g.leaf(b.clone()));
        let out = self.forward(&mut g, &pv, bound.mixing(), va, vb)?;
        Ok(g.value(out).clone())
    }
}

/// A borrowed architecture in any of its three forms.
#[derive(Debug, Clone, Copy)]
pub enum ArchRef<'a> {
    /// Logits, normalized per edge inside the graph (differentiable in alpha).
    Logits(&'a ArchitectureWeights),
    /// Explicit per-edge mixing weights (e.g. one-hot).
    Weights(&'a [Vec<f64>]),
    Discrete(&'a DiscreteArchitecture),
}

/// The parallel enhancement head: a stem, a target-extraction branch and a
/// detail-enhancement branch, merged by a spatial-attention map
/// (`merged = detail + gate * (target - detail)`) and finished by three
/// 3x3 convolutions (`w -> w -> w -> 1`).
#[derive(Debug, Clone)]
pub struct TaskHead {
    kind: TaskKind,
    width: usize,
    stem: (usize, usize),
    target: CellStack,
    detail: CellStack,
    merge: (usize, usize),
    tail: [(usize, usize); 3],
}

impl Supernet for TaskHead {
    fn sections(&self) -> Vec<(&str, Vec<&CellSpec>)> {
        vec![self.target.section(), self.detail.section()]
    }
}

pub fn build_task_head<R: Rng + ?Sized>(
    config: &SearchSpaceConfig,
    rng: &mut R,
) -> Result<(TaskHead, NetworkParams)> {
    let kind = TaskKind::parse(&config.task.kind)?;
    let w = config.width;
    if w == 0 {
        return Err(Error::Config("width must be positive".into()));
    }
    let mut params = NetworkParams::new();
    let stem = alloc_conv(&mut params, "task.stem", w, 1, 3, rng)?;
    let mut edge = 0;
    let target = CellStack::allocate(
        "task.target",
        config.resolve_cells(&config.task.target)?,
        w,
        &mut edge,
        &mut params,
        rng,
    )?;
    let detail = CellStack::allocate(
        "task.detail",
        config.resolve_cells(&config.task.detail)?,
        w,
        &mut edge,
        &mut params,
        rng,
    )?;
    let merge = alloc_conv(&mut params, "task.merge", 1, 2, 3, rng)?;
    let tail = [
        alloc_conv(&mut params, "task.tail0", w, w, 3, rng)?,
        alloc_conv(&mut params, "task.tail1", w, w, 3, rng)?,
        alloc_conv(&mut params, "task.tail2", 1, w, 3, rng)?,
    ];
    Ok((
        TaskHead {
            kind,
            width: w,
            stem,
            target,
            detail,
            merge,
            tail,
        },
        params,
    ))
}

impl TaskHead {
    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Parameter names of the three-convolution tail.
    pub fn tail_param_names() -> Vec<String> {
        (0..3)
            .flat_map(|i| [format!("task.tail{i}.w"), format!("task.tail{i}.b")])
            .collect()
    }

    /// Head output `[n, 1, h, w]` for a fused image `[n, 1, h, w]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        mixing: Mixing<'_>,
        fused: Var,
    ) -> Result<Var> {
        self.check_mixing(mixing)?;
        let (h, w) = (g.shape(fused)[2], g.shape(fused)[3]);
        self.check_size(h, w)?;
        let x = conv(g, pv, self.stem, fused, 3)?;
        let x = g.relu(x);
        let target = self.target.forward(g, pv, mixing, x)?;
        let detail = self.detail.forward(g, pv, mixing, x)?;
        let both = g.concat(&[target, detail])?;
        let mean = g.channel_mean(both)?;
        let max = g.channel_max(both)?;
        let stats = g.concat(&[mean, max])?;
        let gate = conv(g, pv, self.merge, stats, 3)?;
        let gate = g.sigmoid(gate);
        let diff = g.sub(target, detail)?;
        let gated = g.mul_broadcast(diff, gate)?;
        let merged = g.add(detail, gated)?;
        let y = conv(g, pv, self.tail[0], merged, 3)?;
        let y = g.relu(y);
        let y = conv(g, pv, self.tail[1], y, 3)?;
        let y = g.relu(y);
        conv(g, pv, self.tail[2], y, 3)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::config::CellConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn default_space_has_24_logits() {
        let (net, _) = build_fusion_network(&SearchSpaceConfig::default(), &mut rng()).unwrap();
        let alpha = net.uniform_architecture();
        assert_eq!(alpha.num_logits(), 24);
        assert_eq!(alpha.edge_count(), 4);
    }

    #[test]
    fn skip_only_edges_have_no_parameters() {
        let mut cfg = SearchSpaceConfig::default();
        cfg.width = 4;
        cfg.fusion.cells = vec![CellConfig::new("SC", &[&["skip"], &["skip"]])];
        let (_, params) = build_fusion_network(&cfg, &mut rng()).unwrap();
        let cell_params: usize = params
            .iter()
            .filter(|(n, _)| n.contains(".cell"))
            .map(|(_, t)| t.numel())
            .sum();
        assert_eq!(cell_params, 0);
        // stem (2->4, 3x3) + head (4->1, 3x3), biases included.
        assert_eq!(params.numel(), (4 * 2 * 9 + 4) + (4 * 9 + 1));
    }

    #[test]
    fn parameter_count_is_sum_of_declared_counts() {
        let cfg = SearchSpaceConfig::default();
        let (net, params) = build_fusion_network(&cfg, &mut rng()).unwrap();
        let w = cfg.width;
        let ops: usize = net
            .cells()
            .iter()
            .flat_map(|c| c.edges.iter().flatten())
            .map(|o| o.param_count())
            .sum();
        let fuse = w * 3 * w + w; // MS cell 1x1 fuse
        let stem_head = (w * 2 * 9 + w) + (w * 9 + 1);
        assert_eq!(params.numel(), ops + fuse + stem_head);
    }

    #[test]
    fn searched_ivif_structure_is_a_discrete_config() {
        let cfg = SearchSpaceConfig::ivif_searched();
        let (net, _) = build_fusion_network(&cfg, &mut rng()).unwrap();
        let (head, _) = build_task_head(&cfg, &mut rng()).unwrap();
        let kinds: Vec<_> = net
            .cell_layout()
            .iter()
            .chain(head.cell_layout().iter())
            .map(|(_, k, _)| k.code())
            .collect();
        assert_eq!(kinds, ["MS", "SC", "SC", "SC", "SC", "SC"]);
        let ops: Vec<String> = net
            .edge_candidates()
            .into_iter()
            .chain(head.edge_candidates())
            .flatten()
            .collect();
        assert_eq!(
            ops,
            ["3-RB", "3-DC", "3-DB", "3-DC", "SA", "3-DC", "CA", "SA"]
        );
        assert!(net
            .edge_candidates()
            .iter()
            .chain(&head.edge_candidates())
            .all(|c| c.len() == 1));
    }

    #[test]
    fn default_task_head_has_two_branches_of_two_cells() {
        let (head, _) = build_task_head(&SearchSpaceConfig::default(), &mut rng()).unwrap();
        let layout = head.cell_layout();
        let target = layout
            .iter()
            .filter(|(s, k, _)| s == "task.target" && *k == CellKind::Successive)
            .count();
        let detail = layout
            .iter()
            .filter(|(s, k, _)| s == "task.detail" && *k == CellKind::Successive)
            .count();
        assert_eq!((target, detail), (2, 2));
        assert!(head.edge_candidates().iter().all(|c| c.len() == 2));
    }

    #[test]
    fn tail_parameter_count_closed_form() {
        for w in [1usize, 3, 8, 16] {
            let cfg = SearchSpaceConfig {
                width: w,
                ..SearchSpaceConfig::default()
            };
            let (_, params) = build_task_head(&cfg, &mut rng()).unwrap();
            let counted: usize = TaskHead::tail_param_names()
                .iter()
                .map(|n| params.get(n).unwrap().numel())
                .sum();
            let closed_form = 9 * w * w + 9 * w * w + 9 * w;
            let biases = w + w + 1;
            assert_eq!(counted, closed_form + biases, "width {w}");
        }
    }

    #[test]
    fn identity_branches_reduce_head_to_attention_and_tail() {
        let mut cfg = SearchSpaceConfig {
            width: 4,
            ..SearchSpaceConfig::default()
        };
        cfg.task.target = vec![CellConfig::new("SC", &[&["skip"]])];
        cfg.task.detail = vec![CellConfig::new("SC", &[&["skip"]])];
        let mut r = rng();
        let (head, params) = build_task_head(&cfg, &mut r).unwrap();
        let x = Tensor::uniform(vec![2, 1, 8, 8], 1.0, &mut r);

        let mut g = Graph::new();
        let pv = params.register(&mut g);
        let xv = g.leaf(x.clone());
        let y = head
            .forward(&mut g, &pv, Mixing::Discrete(&[0, 0]), xv)
            .unwrap();

        // Both branches equal the stem features s, so the merge
        // s + gate * (s - s) is s and the head is tail(stem(x)).
        let mut h = Graph::new();
        let pv2 = params.register(&mut h);
        let xv = h.leaf(x);
        let s = conv(&mut h, &pv2, head.stem, xv, 3).unwrap();
        let s = h.relu(s);
        let t = conv(&mut h, &pv2, head.tail[0], s, 3).unwrap();
        let t = h.relu(t);
        let t = conv(&mut h, &pv2, head.tail[1], t, 3).unwrap();
        let t = h.relu(t);
        let t = conv(&mut h, &pv2, head.tail[2], t, 3).unwrap();
        assert_eq!(g.value(y), h.value(t));
    }

    #[test]
    fn architecture_must_cover_every_edge() {
        let cfg = SearchSpaceConfig {
            width: 4,
            ..SearchSpaceConfig::default()
        };
        let (net, params) = build_fusion_network(&cfg, &mut rng()).unwrap();
        let a = Tensor::zeros(vec![1, 1, 8, 8]);
        let short = DiscreteArchitecture::from_choices(vec![0; 3]);
        assert!(net
            .fuse(&params, ArchRef::Discrete(&short), &a, &a)
            .is_err());
        let odd = Tensor::zeros(vec![1, 1, 6, 8]);
        let full = DiscreteArchitecture::from_choices(vec![0; 4]);
        assert!(matches!(
            net.fuse(&params, ArchRef::Discrete(&full), &odd, &odd),
            Err(Error::ImageSize { .. })
        ));
    }
}
