//! The three training phases and the end-to-end run.
//!
//! Every source of randomness is a ChaCha stream keyed by the experiment
//! seed and a fixed stream id, so phases can be run separately (resuming
//! from checkpoints) or together and give identical bytes.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::PairBatch;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::ias::{search, FusionSearch, TaskSplit};
use crate::imageops::Plane;
use crate::losses::{
    fusion_loss_term, joint_objective_term, mask_loss_term, saliency_weights,
    weighted_task_loss_term, FeatureWeighting, GradientEnergy,
};
use crate::pmi::{meta_objective, pretrain, FusionTask, MetaHistory, MetaTask, TaskObjective};
use crate::search_space::{
    build_fusion_network, build_task_head, derive_architecture, ArchRef, ArchitectureWeights,
    BoundArch, DiscreteArchitecture, EdgeLogits, FusionNetwork, LatencyTable, NetworkParams,
    Supernet, TaskHead, TaskKind,
};

use super::checkpoint::Checkpoint;
use super::config::{ExperimentConfig, JointConfig};
use super::ingest::ImagePair;
use super::optim::OptimizerState;
use super::patch::{batches, patchify, Augment};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stream {
    FusionInit = 1,
    HeadInit = 2,
    Patches = 3,
    FallbackArch = 4,
    Joint = 5,
}

fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Networks and their seeded initial parameters.
pub struct Model {
    pub net: FusionNetwork,
    pub fusion_init: NetworkParams,
    pub head: TaskHead,
    pub head_init: NetworkParams,
    pub latency: LatencyTable,
}

impl Model {
    pub fn build(config: &ExperimentConfig, base: &Path) -> Result<Self> {
        let (net, fusion_init) = build_fusion_network(
            &config.space,
            &mut stream_rng(config.seed, Stream::FusionInit),
        )?;
        let (head, head_init) = build_task_head(
            &config.space,
            &mut stream_rng(config.seed, Stream::HeadInit),
        )?;
        let latency = config.latency(base)?;
        latency.check_covers(&net.uniform_architecture())?;
        Ok(Self {
            net,
            fusion_init,
            head,
            head_init,
            latency,
        })
    }

    /// The head is not searched: ties in its uniform logits resolve to the
    /// first candidate of every edge.
    pub fn head_architecture(&self) -> DiscreteArchitecture {
        derive_architecture(&self.head.uniform_architecture())
    }

    /// Fused luminance of one pair, clamped to `[0, 1]`.
    pub fn fuse(
        &self,
        params: &NetworkParams,
        arch: &DiscreteArchitecture,
        pair: &ImagePair,
    ) -> Result<Plane> {
        let (h, w) = pair.size();
        self.net.check_size(h, w)?;
        let out = self.net.fuse(
            params,
            ArchRef::Discrete(arch),
            &pair.a.to_tensor(),
            &pair.b.to_tensor(),
        )?;
        let mut plane = Plane::from_tensor(&out, 0)?;
        plane
            .data
            .iter_mut()
            .for_each(|v| *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Ok(plane)
    }

    /// Architecture and fusion parameters stored in a checkpoint.
    pub fn fusion_from_checkpoint(
        &self,
        ckpt: &Checkpoint,
    ) -> Result<(DiscreteArchitecture, NetworkParams)> {
        let arch = self
            .architecture_from(ckpt)?
            .ok_or_else(|| Error::MissingPrerequisite {
                phase: "fuse".into(),
                missing: format!("an architecture in the {} checkpoint", ckpt.phase),
            })?;
        let params = ckpt.params("fusion", &self.fusion_init)?.ok_or_else(|| {
            Error::MissingPrerequisite {
                phase: "fuse".into(),
                missing: format!("fusion parameters in the {} checkpoint", ckpt.phase),
            }
        })?;
        Ok((arch, params))
    }

    fn architecture_from(&self, ckpt: &Checkpoint) -> Result<Option<DiscreteArchitecture>> {
        let template = self.net.uniform_architecture();
        if let Some(d) = ckpt.derived(&template)? {
            return Ok(Some(d));
        }
        Ok(ckpt.alpha(&template)?.map(|a| derive_architecture(&a)))
    }
}

/// One task's pairs and its train / validation batches.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub id: String,
    pub kind: String,
    pub pairs: Vec<ImagePair>,
    pub train: Vec<PairBatch>,
    pub val: Vec<PairBatch>,
}

/// A configured experiment with its data loaded.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub hash: [u8; 32],
    pub model: Model,
    pub tasks: Vec<TaskData>,
}

impl Experiment {
    /// Relative data and latency paths resolve against `base`.
    pub fn new(config: ExperimentConfig, base: &Path) -> Result<Self> {
        config.validate()?;
        let model = Model::build(&config, base)?;
        let mut patch_rng = stream_rng(config.seed, Stream::Patches);
        let mut tasks = Vec::with_capacity(config.data.tasks.len());
        for (index, source) in config.data.tasks.iter().enumerate() {
            let pairs = source.load(config.seed, index, base)?;
            let mut patches = patchify(&pairs, config.patch_size, config.augment, patch_rng.gen())?;
            patches.shuffle(&mut patch_rng);
            let (train, val) = match source.load_val(base)? {
                Some(val_pairs) => {
                    let val_patches =
                        patchify(&val_pairs, config.patch_size, Augment::default(), 0)?;
                    (
                        batches(&patches, config.batch_size, None)?,
                        batches(&val_patches, config.batch_size, None)?,
                    )
                }
                None => {
                    let n_val =
                        ((patches.len() as f64) * config.data.val_fraction).round() as usize;
                    let n_val = n_val.clamp(1, patches.len().saturating_sub(1));
                    let n_train = patches.len() - n_val;
                    (
                        batches(&patches[..n_train], config.batch_size, None)?,
                        batches(&patches[n_train..], config.batch_size, None)?,
                    )
                }
            };
            if train.len() < 2 {
                return Err(Error::Dataset(format!(
                    "task `{}` yields {} training batches from {} patches; at least 2 are needed",
                    source.id,
                    train.len(),
                    patches.len()
                )));
            }
            log::info!(
                "task {}: {} pairs, {} train / {} val batches",
                source.id,
                pairs.len(),
                train.len(),
                val.len()
            );
            tasks.push(TaskData {
                id: source.id.clone(),
                kind: source.kind(),
                pairs,
                train,
                val,
            });
        }
        let hash = config.hash();
        Ok(Self {
            config,
            hash,
            model,
            tasks,
        })
    }

    pub fn joint_task(&self) -> &TaskData {
        let id = &self.config.joint_task().id;
        self.tasks.iter().find(|t| &t.id == id).expect("validated")
    }

    fn meta_tasks(&self) -> Result<Vec<MetaTask>> {
        self.tasks
            .iter()
            .map(|t| MetaTask::new(t.id.clone(), t.kind.clone(), t.train.clone(), t.val.clone()))
            .collect()
    }

    /// Mean validation fusion loss after `meta.inner_steps` adaptation
    /// steps on every task, starting from `omega`.
    pub fn adapted_val_loss(
        &self,
        arch: &DiscreteArchitecture,
        omega: &NetworkParams,
    ) -> Result<f64> {
        let meta = self.meta_tasks()?;
        let objs = self.fusion_tasks(&meta, arch);
        let refs: Vec<&dyn TaskObjective> = objs.iter().map(|t| t as &dyn TaskObjective).collect();
        let total = meta_objective(
            &omega.flatten(),
            &refs,
            self.config.meta.inner_steps,
            self.config.meta.inner_lr,
        )?;
        Ok(total / meta.len() as f64)
    }

    fn fusion_tasks<'a>(
        &'a self,
        meta: &'a [MetaTask],
        arch: &'a DiscreteArchitecture,
    ) -> Vec<FusionTask<'a>> {
        meta.iter()
            .map(|task| FusionTask {
                task,
                net: &self.model.net,
                arch: ArchRef::Discrete(arch),
                layout: &self.model.fusion_init,
                weights: &self.config.losses,
            })
            .collect()
    }

    fn checkpoint(&self, phase: &str) -> Checkpoint {
        Checkpoint::new(phase, self.config.seed, self.hash)
    }

    /// Random logits in `[-1, 1)`, used when no searched architecture exists.
    pub fn fallback_alpha(&self) -> Result<ArchitectureWeights> {
        let mut rng = stream_rng(self.config.seed, Stream::FallbackArch);
        let edges = self
            .model
            .net
            .edge_candidates()
            .into_iter()
            .map(|candidates| {
                let logits = candidates
                    .iter()
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect();
                EdgeLogits { candidates, logits }
            })
            .collect();
        ArchitectureWeights::from_edges(edges)
    }

    fn architecture_or_fallback(
        &self,
        phase: &str,
        prior: Option<&Checkpoint>,
    ) -> Result<(ArchitectureWeights, DiscreteArchitecture)> {
        let template = self.model.net.uniform_architecture();
        if let Some(ckpt) = prior {
            ckpt.check_config(&self.hash, true)?;
            if let Some(d) = self.model.architecture_from(ckpt)? {
                let alpha = ckpt.alpha(&template)?.unwrap_or(template);
                return Ok((alpha, d));
            }
        }
        if !self.config.fallbacks {
            return Err(Error::MissingPrerequisite {
                phase: phase.into(),
                missing: "an architecture from a search checkpoint".into(),
            });
        }
        log::warn!("{phase}: no searched architecture available; deriving one from random logits");
        let alpha = self.fallback_alpha()?;
        let d = derive_architecture(&alpha);
        Ok((alpha, d))
    }
}

/// What a phase produced: its checkpoint, history CSV and extra text files.
#[derive(Debug, Clone)]
pub struct PhaseResult {
    pub checkpoint: Checkpoint,
    pub history_csv: Vec<u8>,
    pub files: Vec<(String, String)>,
}

impl PhaseResult {
    /// Writes `<phase>.ckpt`, `<phase>_history.csv` and the extra files into
    /// `dir`; returns the checkpoint's SHA-256.
    pub fn persist(&self, dir: &Path) -> Result<String> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let phase = &self.checkpoint.phase;
        let hist = dir.join(format!("{phase}_history.csv"));
        std::fs::write(&hist, &self.history_csv).map_err(|e| Error::io(&hist, e))?;
        for (name, text) in &self.files {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        self.checkpoint.save(&checkpoint_path(dir, phase))
    }
}

pub fn checkpoint_path(dir: &Path, phase: &str) -> PathBuf {
    dir.join(format!("{phase}.ckpt"))
}

/// Implicit architecture search over all tasks, from the seeded initial
/// fusion parameters and uniform logits.
pub fn run_phase_search(exp: &Experiment) -> Result<PhaseResult> {
    let m = &exp.model;
    let objective = FusionSearch {
        net: &m.net,
        weights: &exp.config.losses,
        latency: &m.latency,
        layout: &m.fusion_init,
    };
    let splits = exp
        .tasks
        .iter()
        .map(|t| TaskSplit::halve(t.id.clone(), t.train.clone()))
        .collect::<Result<Vec<_>>>()?;
    let outcome = search(
        &objective,
        m.fusion_init.flatten(),
        m.net.uniform_architecture(),
        &splits,
        &exp.config.search,
    )?;
    log::info!("search derived {:?}", outcome.derived.ids());

    let mut ckpt = exp.checkpoint("search");
    ckpt.set_alpha(&outcome.alpha);
    ckpt.set_derived(&outcome.derived);
    ckpt.set_params("fusion", &m.fusion_init.with_flat(&outcome.theta)?);
    Ok(PhaseResult {
        checkpoint: ckpt,
        history_csv: csv_bytes(|w| outcome.history.write_csv(w))?,
        files: vec![("architecture.txt".into(), outcome.derived.manifest(&m.net)?)],
    })
}

/// Pretext meta-initialization of the fusion parameters under the searched
/// (or fallback) architecture.
pub fn run_phase_meta(exp: &Experiment, prior: Option<&Checkpoint>) -> Result<PhaseResult> {
    let (alpha, arch) = exp.architecture_or_fallback("meta", prior)?;
    let meta = exp.meta_tasks()?;
    let objs = exp.fusion_tasks(&meta, &arch);
    let refs: Vec<&dyn TaskObjective> = objs.iter().map(|t| t as &dyn TaskObjective).collect();
    let (omega, history) = pretrain(exp.model.fusion_init.flatten(), &refs, &exp.config.meta)?;

    let mut ckpt = exp.checkpoint("meta");
    ckpt.set_alpha(&alpha);
    ckpt.set_derived(&arch);
    ckpt.set_params("fusion", &exp.model.fusion_init.with_flat(&omega)?);
    Ok(PhaseResult {
        checkpoint: ckpt,
        history_csv: meta_csv(&history)?,
        files: vec![],
    })
}

fn meta_csv(history: &MetaHistory) -> Result<Vec<u8>> {
    csv_bytes(|w| history.write_csv(w))
}

fn csv_bytes(write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

/// Task-guided joint training of the fusion network and the task head.
pub fn run_phase_joint(exp: &Experiment, prior: Option<&Checkpoint>) -> Result<PhaseResult> {
    if prior.is_none() && !exp.config.fallbacks {
        return Err(Error::MissingPrerequisite {
            phase: "joint".into(),
            missing: "fusion initialization and architecture (a meta-init or search checkpoint)"
                .into(),
        });
    }
    let (alpha, arch) = exp.architecture_or_fallback("joint", prior)?;
    let fusion = match prior
        .map(|c| c.params("fusion", &exp.model.fusion_init))
        .transpose()?
        .flatten()
    {
        Some(p) => p,
        None => {
            log::warn!("joint: no pretrained fusion parameters available; starting from the random initialization");
            exp.model.fusion_init.clone()
        }
    };
    let outcome = joint_train(
        exp,
        &arch,
        fusion,
        exp.model.head_init.clone(),
        exp.joint_task(),
        &exp.config.joint,
    )?;

    let mut ckpt = exp.checkpoint("joint");
    ckpt.set_alpha(&alpha);
    ckpt.set_derived(&arch);
    ckpt.set_params("fusion", &outcome.fusion);
    ckpt.set_params("task", &outcome.head);
    Ok(PhaseResult {
        checkpoint: ckpt,
        history_csv: outcome.history.to_csv()?,
        files: vec![],
    })
}

/// Per-epoch means of the joint-phase losses.
#[derive(Debug, Clone, PartialEq)]
pub struct JointRecord {
    pub epoch: usize,
    pub task_loss: f64,
    pub fusion_loss: f64,
    pub joint_objective: f64,
    pub val_task_loss: f64,
    pub val_fusion_loss: f64,
    pub val_joint_objective: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct JointHistory {
    pub records: Vec<JointRecord>,
}

impl JointHistory {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "epoch",
            "task_loss",
            "fusion_loss",
            "joint_objective",
            "val_task_loss",
            "val_fusion_loss",
            "val_joint_objective",
        ])?;
        for r in &self.records {
            let vals = [
                r.task_loss,
                r.fusion_loss,
                r.joint_objective,
                r.val_task_loss,
                r.val_fusion_loss,
                r.val_joint_objective,
            ];
            let mut row = vec![r.epoch.to_string()];
            row.extend(vals.iter().map(|v| format!("{v:e}")));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        csv_bytes(|w| self.write_csv(w))
    }

    /// Fraction of epochs (after the first) whose training objective is
    /// below the previous epoch's.
    pub fn decreasing_fraction(&self) -> f64 {
        let steps = self.records.len().saturating_sub(1);
        if steps == 0 {
            return 1.0;
        }
        let down = self
            .records
            .windows(2)
            .filter(|w| w[1].joint_objective < w[0].joint_objective)
            .count();
        down as f64 / steps as f64
    }
}

#[derive(Debug, Clone)]
pub struct JointOutcome {
    pub fusion: NetworkParams,
    pub head: NetworkParams,
    pub history: JointHistory,
}

struct JointLosses {
    task: f64,
    fusion: f64,
    joint: f64,
    grad_fusion: Vec<f64>,
    grad_head: Vec<f64>,
}

fn joint_losses(
    exp: &Experiment,
    arch: &DiscreteArchitecture,
    head_arch: &DiscreteArchitecture,
    fusion: &NetworkParams,
    head: &NetworkParams,
    batch: &PairBatch,
    with_grad: bool,
) -> Result<JointLosses> {
    let m = &exp.model;
    let weights = &exp.config.losses;
    let mut g = Graph::new();
    let fv = fusion.register(&mut g);
    let hv = head.register(&mut g);
    let fb = BoundArch::bind(&mut g, ArchRef::Discrete(arch));
    let hb = BoundArch::bind(&mut g, ArchRef::Discrete(head_arch));
    let (a, b) = (g.leaf(batch.a.clone()), g.leaf(batch.b.clone()));
    let fused = m.net.forward(&mut g, &fv, fb.mixing(), a, b)?;
    let out = m.head.forward(&mut g, &hv, hb.mixing(), fused)?;
    let task = match m.head.kind() {
        TaskKind::Enhancement => {
            let (sa, sb) = saliency_weights(&batch.a, &batch.b)?;
            weighted_task_loss_term(&mut g, out, a, b, (&sa, &sb), weights)?
        }
        TaskKind::Segmentation => {
            let mask = batch.mask.as_ref().ok_or_else(|| {
                Error::Dataset(
                    "the segmentation task needs masks (`<id>_mask.*` files or synthetic data)"
                        .into(),
                )
            })?;
            let mv = g.leaf(mask.clone());
            mask_loss_term(&mut g, out, mv)?
        }
    };
    let (wa, wb) = GradientEnergy.weights(&batch.a, &batch.b)?;
    let lf = fusion_loss_term(&mut g, fused, a, b, (&wa, &wb), weights)?;
    let joint = joint_objective_term(&mut g, task, lf, weights.eta)?;
    let (grad_fusion, grad_head) = if with_grad {
        let grads = g.backward(joint);
        (
            fusion.flat_gradient(&grads, &fv),
            head.flat_gradient(&grads, &hv),
        )
    } else {
        (vec![], vec![])
    };
    Ok(JointLosses {
        task: g.value(task).item(),
        fusion: g.value(lf).item(),
        joint: g.value(joint).item(),
        grad_fusion,
        grad_head,
    })
}

/// Trains the head (and, unless frozen, the fusion network) on
/// `l_T + eta * l_F` over `task`'s training batches in a seeded shuffled
/// order; validation losses are measured after every epoch.
pub fn joint_train(
    exp: &Experiment,
    arch: &DiscreteArchitecture,
    fusion: NetworkParams,
    head: NetworkParams,
    task: &TaskData,
    config: &JointConfig,
) -> Result<JointOutcome> {
    let head_arch = exp.model.head_architecture();
    let (mut theta_f, mut theta_t) = (fusion.flatten(), head.flatten());
    let mut opt_f = OptimizerState::new(config.optimizer, config.lr, theta_f.len());
    let mut opt_t = OptimizerState::new(config.optimizer, config.lr, theta_t.len());
    let mut rng = stream_rng(exp.config.seed, Stream::Joint);
    let mut history = JointHistory::default();
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut lt, mut lf, mut lj) = (0.0, 0.0, 0.0);
        for &i in &order {
            let (pf, pt) = (fusion.with_flat(&theta_f)?, head.with_flat(&theta_t)?);
            let l = joint_losses(exp, arch, &head_arch, &pf, &pt, &task.train[i], true)?;
            if !l.joint.is_finite() {
                return Err(Error::NonFiniteLoss {
                    context: "joint training".into(),
                    step,
                    value: l.joint,
                });
            }
            if !config.freeze_fusion {
                opt_f.step(&mut theta_f, &l.grad_fusion);
            }
            opt_t.step(&mut theta_t, &l.grad_head);
            lt += l.task;
            lf += l.fusion;
            lj += l.joint;
            step += 1;
        }
        let n = order.len() as f64;
        let (pf, pt) = (fusion.with_flat(&theta_f)?, head.with_flat(&theta_t)?);
        let (mut vt, mut vf, mut vj) = (0.0, 0.0, 0.0);
        for batch in &task.val {
            let l = joint_losses(exp, arch, &head_arch, &pf, &pt, batch, false)?;
            vt += l.task;
            vf += l.fusion;
            vj += l.joint;
        }
        let nv = task.val.len() as f64;
        log::info!(
            "joint epoch {epoch}: objective {:.5}, val task {:.5}",
            lj / n,
            vt / nv
        );
        history.records.push(JointRecord {
            epoch,
            task_loss: lt / n,
            fusion_loss: lf / n,
            joint_objective: lj / n,
            val_task_loss: vt / nv,
            val_fusion_loss: vf / nv,
            val_joint_objective: vj / nv,
        });
    }
    Ok(JointOutcome {
        fusion: fusion.with_flat(&theta_f)?,
        head: head.with_flat(&theta_t)?,
        history,
    })
}

/// Checkpoint SHA-256 per executed phase, in order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub phases: Vec<(String, String)>,
}

/// Runs the enabled phases in order, feeding each the previous phase's
/// checkpoint, and persists everything under `out`.
pub fn run_all(exp: &Experiment, out: &Path) -> Result<RunSummary> {
    let mut summary = RunSummary::default();
    let mut last: Option<Checkpoint> = None;
    let phases = exp.config.phases;
    if phases.search {
        let r = run_phase_search(exp)?;
        summary.phases.push(("search".into(), r.persist(out)?));
        last = Some(r.checkpoint);
    }
    if phases.meta {
        let r = run_phase_meta(exp, last.as_ref())?;
        summary.phases.push(("meta".into(), r.persist(out)?));
        last = Some(r.checkpoint);
    }
    if phases.joint {
        let r = run_phase_joint(exp, last.as_ref())?;
        summary.phases.push(("joint".into(), r.persist(out)?));
    }
    Ok(summary)
}
