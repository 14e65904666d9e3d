//! Implicit architecture search.
//!
//! The architecture logits are trained by alternating `T` plain gradient
//! steps on the network parameters with one step on the logits along the
//! Gauss-Newton hypergradient
//!
//! ```text
//! G = g_alpha(l_alpha) - <g_theta(l), g_theta(l_alpha)> / (<g_theta(l), g_theta(l)> + eps) * g_alpha(l)
//! ```
//!
//! where `l` is the fusion loss on the parameter half of the data and
//! `l_alpha = l_F + lambda * Reg(alpha)` the search loss on the other half.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::PairBatch;
use crate::error::{Error, Result};
use crate::gradcheck::{dot, norm};
use crate::graph::{Gradients, Graph, Var};
use crate::losses::{fusion_loss_term, FeatureWeighting, GradientEnergy, LossWeights};
use crate::search_space::{
    derive_architecture, latency_regularizer, latency_term, ArchRef, ArchitectureWeights,
    BoundArch, DiscreteArchitecture, FusionNetwork, LatencyTable, NetworkParams,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Parameter steps per architecture step (`T`).
    pub inner_steps: usize,
    pub lambda: f64,
    pub epochs: usize,
    pub inner_lr: f64,
    pub alpha_lr: f64,
    /// Ridge term in the hypergradient denominator.
    pub epsilon: f64,
    /// Fill the `wall_time` history column (zeros otherwise, which keeps the
    /// history byte-reproducible).
    pub record_wall_time: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            inner_steps: 20,
            lambda: 0.0,
            epochs: 10,
            inner_lr: 1e-2,
            alpha_lr: 3e-4,
            epsilon: 1e-24,
            record_wall_time: true,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps (T) must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if !(self.lambda >= 0.0) || !(self.inner_lr >= 0.0) || !(self.alpha_lr >= 0.0) {
            return Err(Error::Config(
                "lambda and learning rates must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// The four gradients the hypergradient is assembled from.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    /// `g_theta(l)`, inner loss.
    pub theta_inner: Vec<f64>,
    /// `g_theta(l_alpha)`, search loss.
    pub theta_search: Vec<f64>,
    /// `g_alpha(l)`.
    pub alpha_inner: Vec<f64>,
    /// `g_alpha(l_alpha)`.
    pub alpha_search: Vec<f64>,
}

impl GradientBundle {
    pub fn new(
        theta_inner: Vec<f64>,
        theta_search: Vec<f64>,
        alpha_inner: Vec<f64>,
        alpha_search: Vec<f64>,
    ) -> Result<Self> {
        if theta_inner.len() != theta_search.len() || alpha_inner.len() != alpha_search.len() {
            return Err(Error::Shape(format!(
                "gradient bundle: theta {} vs {}, alpha {} vs {}",
                theta_inner.len(),
                theta_search.len(),
                alpha_inner.len(),
                alpha_search.len()
            )));
        }
        Ok(Self {
            theta_inner,
            theta_search,
            alpha_inner,
            alpha_search,
        })
    }

    /// `<g_theta(l), g_theta(l_alpha)> / (<g_theta(l), g_theta(l)> + eps)`.
    pub fn coefficient(&self, epsilon: f64) -> f64 {
        let gg = dot(&self.theta_inner, &self.theta_inner);
        dot(&self.theta_inner, &self.theta_search) / (gg + epsilon)
    }

    fn norms(&self) -> [f64; 4] {
        [
            norm(&self.theta_inner),
            norm(&self.theta_search),
            norm(&self.alpha_inner),
            norm(&self.alpha_search),
        ]
    }
}

/// Gauss-Newton approximation of the architecture hypergradient.
pub fn implicit_alpha_gradient(bundle: &GradientBundle, epsilon: f64) -> Vec<f64> {
    let gg = dot(&bundle.theta_inner, &bundle.theta_inner);
    if gg < epsilon {
        log::warn!(
            "|g_theta l|^2 = {gg:e} below epsilon = {epsilon:e}: correction is ill-conditioned"
        );
    }
    let c = bundle.coefficient(epsilon);
    bundle
        .alpha_search
        .iter()
        .zip(&bundle.alpha_inner)
        .map(|(s, i)| s - c * i)
        .collect()
}

/// Runs `steps` plain gradient-descent steps `theta <- theta - lr * grad`.
///
/// `loss_grad(step, theta)` returns the loss and its gradient at `theta`;
/// a non-finite loss aborts with the step index.
pub fn inner_train<F>(theta: &[f64], steps: usize, lr: f64, mut loss_grad: F) -> Result<Vec<f64>>
where
    F: FnMut(usize, &[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut theta = theta.to_vec();
    for step in 0..steps {
        let (loss, grad) = loss_grad(step, &theta)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                context: "inner training".into(),
                step,
                value: loss,
            });
        }
        if grad.len() != theta.len() {
            return Err(Error::Shape(format!(
                "gradient length {} vs parameters {}",
                grad.len(),
                theta.len()
            )));
        }
        theta.iter_mut().zip(&grad).for_each(|(t, g)| *t -= lr * g);
    }
    Ok(theta)
}

/// One evaluation of the (search) objective with gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub fusion_loss: f64,
    pub reg: f64,
    /// `fusion_loss + lambda * reg`.
    pub total: f64,
    pub grad_theta: Vec<f64>,
    pub grad_alpha: Vec<f64>,
}

/// A relaxed supernet with flat parameters `theta` and architecture logits.
pub trait BilevelObjective {
    /// `l_F + lambda * Reg(alpha)` on one batch, with gradients in theta and
    /// in the logits.
    fn evaluate(
        &self,
        theta: &[f64],
        alpha: &ArchitectureWeights,
        batch: &PairBatch,
        lambda: f64,
    ) -> Result<Evaluation>;

    fn latency(&self) -> &LatencyTable;

    /// Rejects logits that do not fit the supernet.
    fn check_architecture(&self, alpha: &ArchitectureWeights) -> Result<()>;
}

/// The fusion network paired with its loss and latency accounting.
pub struct FusionSearch<'a> {
    pub net: &'a FusionNetwork,
    pub weights: &'a LossWeights,
    pub latency: &'a LatencyTable,
    /// Parameter layout; values are replaced by `theta` on every call.
    pub layout: &'a NetworkParams,
}

impl FusionSearch<'_> {
    /// Fusion loss `l_F` of a batch under any architecture form.
    pub fn fusion_loss(
        &self,
        params: &NetworkParams,
        arch: ArchRef<'_>,
        batch: &PairBatch,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let pv = params.register(&mut g);
        let bound = BoundArch::bind(&mut g, arch);
        let (a, b) = (g.leaf(batch.a.clone()), g.leaf(batch.b.clone()));
        let fused = self.net.forward(&mut g, &pv, bound.mixing(), a, b)?;
        let (wa, wb) = GradientEnergy.weights(&batch.a, &batch.b)?;
        let l = fusion_loss_term(&mut g, fused, a, b, (&wa, &wb), self.weights)?;
        Ok(g.value(l).item())
    }
}

impl BilevelObjective for FusionSearch<'_> {
    fn evaluate(
        &self,
        theta: &[f64],
        alpha: &ArchitectureWeights,
        batch: &PairBatch,
        lambda: f64,
    ) -> Result<Evaluation> {
        let params = self.layout.with_flat(theta)?;
        let mut g = Graph::new();
        let pv = params.register(&mut g);
        let bound = BoundArch::bind(&mut g, ArchRef::Logits(alpha));
        let (a, b) = (g.leaf(batch.a.clone()), g.leaf(batch.b.clone()));
        let fused = self.net.forward(&mut g, &pv, bound.mixing(), a, b)?;
        let (wa, wb) = GradientEnergy.weights(&batch.a, &batch.b)?;
        let lf = fusion_loss_term(&mut g, fused, a, b, (&wa, &wb), self.weights)?;
        evaluation(&mut g, lf, &bound, alpha, self.latency, lambda, |grads| {
            params.flat_gradient(grads, &pv)
        })
    }

    fn latency(&self) -> &LatencyTable {
        self.latency
    }

    fn check_architecture(&self, alpha: &ArchitectureWeights) -> Result<()> {
        alpha.check_against(self.net)
    }
}

fn evaluation(
    g: &mut Graph,
    lf: Var,
    bound: &BoundArch,
    alpha: &ArchitectureWeights,
    latency: &LatencyTable,
    lambda: f64,
    theta_grad: impl FnOnce(&Gradients) -> Vec<f64>,
) -> Result<Evaluation> {
    let reg = latency_term(g, bound.weights(), alpha, latency)?;
    let scaled = g.scale(reg, lambda);
    let total = g.add(lf, scaled)?;
    let grads = g.backward(total);
    Ok(Evaluation {
        fusion_loss: g.value(lf).item(),
        reg: g.value(reg).item(),
        total: g.value(total).item(),
        grad_theta: theta_grad(&grads),
        grad_alpha: bound.logit_gradient(&grads, alpha),
    })
}

/// Fusion loss `l_F` of one batch and its gradient in the flat parameters,
/// with the architecture held fixed.
pub fn fusion_loss_grad(
    net: &FusionNetwork,
    layout: &NetworkParams,
    theta: &[f64],
    arch: ArchRef<'_>,
    batch: &PairBatch,
    weights: &LossWeights,
) -> Result<(f64, Vec<f64>)> {
    let params = layout.with_flat(theta)?;
    let mut g = Graph::new();
    let pv = params.register(&mut g);
    let bound = BoundArch::bind(&mut g, arch);
    let (a, b) = (g.leaf(batch.a.clone()), g.leaf(batch.b.clone()));
    let fused = net.forward(&mut g, &pv, bound.mixing(), a, b)?;
    let (wa, wb) = GradientEnergy.weights(&batch.a, &batch.b)?;
    let l = fusion_loss_term(&mut g, fused, a, b, (&wa, &wb), weights)?;
    let grads = g.backward(l);
    Ok((g.value(l).item(), params.flat_gradient(&grads, &pv)))
}

/// The smallest identity-vs-zero search space: `F = e_k(...e_1(X)) + B`
/// with `X = (I_A + I_B) / 2`, every edge mixing identity and zero
/// candidates, and a learnable per-pixel offset image `B` as the only
/// parameters. `l_F` is the reconstruction error
/// `(mse(F, I_A) + mse(F, I_B)) / 2`.
///
/// The offset cannot absorb a rescaled or removed signal path, so the relaxed
/// objective strictly prefers identity candidates.
#[derive(Debug, Clone)]
pub struct GatedReconstruction {
    pub height: usize,
    pub width: usize,
    pub edges: usize,
    /// `(operator id, passes its input)` per candidate, shared by all edges.
    pub candidates: Vec<(String, bool)>,
    pub latency: LatencyTable,
}

impl GatedReconstruction {
    /// Candidates `zero` and `skip` on every edge.
    pub fn identity_vs_zero(
        height: usize,
        width: usize,
        edges: usize,
        latency: LatencyTable,
    ) -> Self {
        let candidates = vec![("zero".to_string(), false), ("skip".to_string(), true)];
        Self {
            height,
            width,
            edges,
            candidates,
            latency,
        }
    }

    pub fn uniform_architecture(&self) -> ArchitectureWeights {
        ArchitectureWeights::uniform(vec![
            self.candidates.iter().map(|c| c.0.clone()).collect();
            self.edges
        ])
    }

    pub fn num_params(&self) -> usize {
        self.height * self.width
    }
}

impl BilevelObjective for GatedReconstruction {
    fn evaluate(
        &self,
        theta: &[f64],
        alpha: &ArchitectureWeights,
        batch: &PairBatch,
        lambda: f64,
    ) -> Result<Evaluation> {
        self.check_architecture(alpha)?;
        if batch.size() != (self.height, self.width) {
            return Err(Error::ImageSize {
                height: batch.size().0,
                width: batch.size().1,
                reason: format!("toy supernet is {}x{}", self.height, self.width),
            });
        }
        let mut g = Graph::new();
        let offset_leaf = g.leaf(Tensor::new(
            vec![1, 1, self.height, self.width],
            theta.to_vec(),
        )?);
        let bound = BoundArch::bind(&mut g, ArchRef::Logits(alpha));
        let (a, b) = (g.leaf(batch.a.clone()), g.leaf(batch.b.clone()));
        let sum = g.add(a, b)?;
        let mut x = g.scale(sum, 0.5);
        for &w in bound.weights() {
            let zero = g.scale(x, 0.0);
            let parts: Vec<Var> = self
                .candidates
                .iter()
                .map(|c| if c.1 { x } else { zero })
                .collect();
            x = g.weighted_sum(w, &parts)?;
        }
        let ones = g.leaf(Tensor::full(batch.a.shape().to_vec(), 1.0));
        let offset = g.mul_broadcast(ones, offset_leaf)?;
        let fused = g.add(x, offset)?;
        let la = g.mse(fused, a)?;
        let lb = g.mse(fused, b)?;
        let both = g.add(la, lb)?;
        let lf = g.scale(both, 0.5);
        evaluation(&mut g, lf, &bound, alpha, &self.latency, lambda, |grads| {
            grads
                .get(offset_leaf)
                .map_or_else(|| vec![0.0; theta.len()], |t| t.data().to_vec())
        })
    }

    fn latency(&self) -> &LatencyTable {
        &self.latency
    }

    fn check_architecture(&self, alpha: &ArchitectureWeights) -> Result<()> {
        let ids: Vec<&str> = self.candidates.iter().map(|c| c.0.as_str()).collect();
        if alpha.edge_count() != self.edges || alpha.edges().iter().any(|e| e.candidates != ids) {
            return Err(Error::Config(format!(
                "toy supernet expects {} edges over {ids:?}",
                self.edges
            )));
        }
        Ok(())
    }
}

/// `l_F(batch; alpha, theta) + lambda * Reg(alpha)`.
pub fn search_objective<O: BilevelObjective + ?Sized>(
    objective: &O,
    theta: &[f64],
    alpha: &ArchitectureWeights,
    batch: &PairBatch,
    lambda: f64,
) -> Result<f64> {
    Ok(objective.evaluate(theta, alpha, batch, lambda)?.total)
}

/// One task's data, divided into a parameter-update half and an
/// architecture-update half.
#[derive(Debug, Clone)]
pub struct TaskSplit {
    pub name: String,
    pub params: Vec<PairBatch>,
    pub arch: Vec<PairBatch>,
}

impl TaskSplit {
    /// Even-indexed batches update parameters, odd-indexed ones the
    /// architecture.
    pub fn halve(name: impl Into<String>, batches: Vec<PairBatch>) -> Result<Self> {
        let name = name.into();
        if batches.len() < 2 {
            return Err(Error::Dataset(format!(
                "task `{name}` needs at least two batches to split, got {}",
                batches.len()
            )));
        }
        let (mut params, mut arch) = (Vec::new(), Vec::new());
        for (i, b) in batches.into_iter().enumerate() {
            if i % 2 == 0 {
                params.push(b)
            } else {
                arch.push(b)
            }
        }
        Ok(Self { name, params, arch })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchRecord {
    pub epoch: usize,
    pub loss_f: f64,
    pub loss_alpha: f64,
    pub reg: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchHistory {
    pub records: Vec<SearchRecord>,
}

impl SearchHistory {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "loss_F", "loss_alpha", "reg", "wall_time"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                format!("{:e}", r.loss_f),
                format!("{:e}", r.loss_alpha),
                format!("{:e}", r.reg),
                format!("{:.6}", r.wall_time),
            ])?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub alpha: ArchitectureWeights,
    pub theta: Vec<f64>,
    pub derived: DiscreteArchitecture,
    pub history: SearchHistory,
}

/// Alternating implicit architecture search. Epoch `e` draws its data from
/// task `e mod tasks.len()`; within an epoch every architecture batch gets
/// one logit update preceded by `T` parameter steps on the parameter half.
pub fn search<O: BilevelObjective + ?Sized>(
    objective: &O,
    theta: Vec<f64>,
    alpha: ArchitectureWeights,
    tasks: &[TaskSplit],
    config: &SearchConfig,
) -> Result<SearchOutcome> {
    config.validate()?;
    objective.check_architecture(&alpha)?;
    objective.latency().check_covers(&alpha)?;
    if tasks.is_empty()
        || tasks
            .iter()
            .any(|t| t.params.is_empty() || t.arch.is_empty())
    {
        return Err(Error::Dataset(
            "search needs at least one task with both data halves".into(),
        ));
    }
    let start = Instant::now();
    let (mut theta, mut alpha) = (theta, alpha);
    let mut history = SearchHistory::default();
    let mut cursor = 0usize;
    for epoch in 0..config.epochs {
        let task = &tasks[epoch % tasks.len()];
        let n = task.params.len();
        for arch_batch in &task.arch {
            theta = inner_train(&theta, config.inner_steps, config.inner_lr, |_, theta| {
                let e = objective.evaluate(theta, &alpha, &task.params[cursor % n], 0.0)?;
                cursor += 1;
                Ok((e.fusion_loss, e.grad_theta))
            })?;

            let inner = objective.evaluate(&theta, &alpha, &task.params[cursor % n], 0.0)?;
            let outer = objective.evaluate(&theta, &alpha, arch_batch, config.lambda)?;
            let bundle = GradientBundle::new(
                inner.grad_theta,
                outer.grad_theta,
                inner.grad_alpha,
                outer.grad_alpha,
            )?;
            let grad = implicit_alpha_gradient(&bundle, config.epsilon);
            if grad.iter().any(|v| !v.is_finite()) {
                let [grad_inner, grad_outer, grad_alpha_inner, grad_alpha_outer] = bundle.norms();
                log::error!("hypergradient non-finite at epoch {epoch}");
                return Err(Error::NonFiniteHypergradient {
                    grad_inner,
                    grad_outer,
                    grad_alpha_inner,
                    grad_alpha_outer,
                });
            }
            let mut flat = alpha.flatten();
            flat.iter_mut()
                .zip(&grad)
                .for_each(|(a, g)| *a -= config.alpha_lr * g);
            alpha.unflatten(&flat)?;
        }

        let mut loss_f = 0.0;
        for batch in &task.arch {
            loss_f += objective.evaluate(&theta, &alpha, batch, 0.0)?.fusion_loss;
        }
        loss_f /= task.arch.len() as f64;
        let reg = latency_regularizer(&alpha, objective.latency())?;
        let record = SearchRecord {
            epoch,
            loss_f,
            loss_alpha: loss_f + config.lambda * reg,
            reg,
            wall_time: if config.record_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        log::info!(
            "search epoch {epoch} ({}): l_F {:.5} l_alpha {:.5} reg {:.4}",
            task.name,
            record.loss_f,
            record.loss_alpha,
            reg
        );
        history.records.push(record);
    }
    let derived = derive_architecture(&alpha);
    Ok(SearchOutcome {
        alpha,
        theta,
        derived,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(ti: &[f64], ts: &[f64], ai: &[f64], as_: &[f64]) -> GradientBundle {
        GradientBundle::new(ti.to_vec(), ts.to_vec(), ai.to_vec(), as_.to_vec()).unwrap()
    }

    #[test]
    fn scalar_oracle() {
        let (alpha, delta) = (0.7, 1e-6);
        let theta = alpha + delta;
        let g = implicit_alpha_gradient(&bundle(&[delta], &[theta], &[-delta], &[0.0]), 1e-24);
        assert!((g[0] - alpha).abs() < 1e-4);
    }

    #[test]
    fn vanishing_search_gradient_leaves_direct_term() {
        let g = implicit_alpha_gradient(&bundle(&[1.0, 2.0], &[0.0, 0.0], &[3.0], &[0.25]), 1e-12);
        assert_eq!(g, vec![0.25]);
        let g = implicit_alpha_gradient(&bundle(&[1.0, 0.0], &[0.0, 5.0], &[3.0], &[0.25]), 1e-12);
        assert_eq!(g, vec![0.25]);
    }

    #[test]
    fn correction_only_when_direct_term_vanishes() {
        let g = implicit_alpha_gradient(&bundle(&[2.0], &[1.0], &[4.0, -2.0], &[0.0, 0.0]), 1e-12);
        let c = 2.0 / (4.0 + 1e-12);
        assert_eq!(g, vec![-c * 4.0, c * 2.0]);
    }

    #[test]
    fn degenerate_inner_gradient_stays_finite() {
        let g = implicit_alpha_gradient(&bundle(&[0.0; 3], &[1e300; 3], &[1.0], &[2.0]), 1e-12);
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn inner_train_quadratic() {
        let a = [0.5, -1.25];
        let quad = |_: usize, t: &[f64]| -> Result<(f64, Vec<f64>)> {
            let d: Vec<f64> = t.iter().zip(&a).map(|(t, a)| t - a).collect();
            Ok((0.5 * dot(&d, &d), d))
        };
        assert_eq!(inner_train(&[4.0, 5.0], 1, 1.0, quad).unwrap(), a.to_vec());
        assert_eq!(
            inner_train(&[4.0, 5.0], 7, 0.0, quad).unwrap(),
            vec![4.0, 5.0]
        );
    }

    #[test]
    fn inner_train_reports_step() {
        let err = inner_train(&[0.0], 5, 0.1, |s, _| {
            Ok((if s == 3 { f64::NAN } else { 1.0 }, vec![0.0]))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { step: 3, .. }));
    }

    #[test]
    fn config_invariants() {
        assert!(SearchConfig {
            inner_steps: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SearchConfig {
            epsilon: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SearchConfig::default().validate().is_ok());
    }
}
