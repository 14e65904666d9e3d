//! Pretext meta initialization.
//!
//! An initialization `omega` is learned across several fusion tasks: each
//! task adapts `omega` with `K` gradient steps on its training split, the
//! adapted parameters are scored on its validation split, and `omega` moves
//! against the sum of those scores' gradients.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::PairBatch;
use crate::error::{Error, Result};
use crate::gradcheck::norm;
use crate::ias::fusion_loss_grad;
use crate::losses::LossWeights;
use crate::search_space::{ArchRef, FusionNetwork, NetworkParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Adaptation steps per task (`K`).
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub outer_iters: usize,
    /// Treat the adapted parameters' gradient as the gradient in `omega`.
    pub first_order: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_steps: 4,
            inner_lr: 1e-3,
            outer_lr: 1e-4,
            outer_iters: 100,
            first_order: true,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0 && self.outer_lr > 0.0) {
            return Err(Error::Config("meta learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// One fusion task with disjoint training and validation splits.
#[derive(Debug, Clone)]
pub struct MetaTask {
    pub id: String,
    pub kind: String,
    pub train: Vec<PairBatch>,
    pub val: Vec<PairBatch>,
}

impl MetaTask {
    pub fn new(
        id: impl Into<String>,
        kind: impl Into<String>,
        train: Vec<PairBatch>,
        val: Vec<PairBatch>,
    ) -> Result<Self> {
        let id = id.into();
        if train.is_empty() || val.is_empty() {
            return Err(Error::Dataset(format!(
                "task `{id}` needs non-empty train and validation splits"
            )));
        }
        if train.iter().any(|t| val.contains(t)) {
            return Err(Error::Dataset(format!(
                "task `{id}`: train and validation splits overlap"
            )));
        }
        Ok(Self {
            id,
            kind: kind.into(),
            train,
            val,
        })
    }
}

/// A task as seen by the meta-learner: a training loss indexed by step and a
/// validation loss `f`, both over a flat parameter vector.
pub trait TaskObjective {
    fn id(&self) -> &str;

    /// Training loss and gradient used by adaptation step `step`.
    fn train_loss_grad(&self, theta: &[f64], step: usize) -> Result<(f64, Vec<f64>)>;

    /// Validation loss `f` and its gradient.
    fn val_loss_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Hessian-vector product of the step-`step` training loss. The default
    /// is a central difference of gradients.
    fn train_hvp(&self, theta: &[f64], v: &[f64], step: usize) -> Result<Vec<f64>> {
        let scale = norm(v);
        if scale == 0.0 {
            return Ok(vec![0.0; v.len()]);
        }
        let h = 1e-5 / scale;
        let shifted = |sign: f64| -> Vec<f64> {
            theta.iter().zip(v).map(|(t, d)| t + sign * h * d).collect()
        };
        let (_, gp) = self.train_loss_grad(&shifted(1.0), step)?;
        let (_, gm) = self.train_loss_grad(&shifted(-1.0), step)?;
        Ok(gp
            .iter()
            .zip(&gm)
            .map(|(p, m)| (p - m) / (2.0 * h))
            .collect())
    }
}

/// Parameters after every adaptation step: `trajectory[k]` is `theta_k`,
/// `trajectory[0] = omega`.
pub fn adapt_trajectory<T: TaskObjective + ?Sized>(
    omega: &[f64],
    task: &T,
    steps: usize,
    lr: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut path = Vec::with_capacity(steps + 1);
    path.push(omega.to_vec());
    for step in 0..steps {
        let theta = &path[step];
        let (loss, grad) = task.train_loss_grad(theta, step)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                context: format!("adaptation of task `{}`", task.id()),
                step,
                value: loss,
            });
        }
        let next = theta.iter().zip(&grad).map(|(t, g)| t - lr * g).collect();
        path.push(next);
    }
    Ok(path)
}

/// `theta_i = omega` after `steps` gradient steps on the task's training loss.
pub fn inner_adapt<T: TaskObjective + ?Sized>(
    omega: &[f64],
    task: &T,
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    Ok(adapt_trajectory(omega, task, steps, lr)?
        .pop()
        .expect("trajectory holds omega"))
}

/// Meta objective, its gradient in `omega`, and the per-task adapted
/// validation losses (in task-id order).
#[derive(Debug, Clone, PartialEq)]
pub struct MetaGradient {
    pub objective: f64,
    pub gradient: Vec<f64>,
    pub task_losses: Vec<(String, f64)>,
}

fn sorted<'a>(tasks: &[&'a dyn TaskObjective]) -> Result<Vec<&'a dyn TaskObjective>> {
    if tasks.is_empty() {
        return Err(Error::Config(
            "meta objective needs at least one task".into(),
        ));
    }
    let mut ordered = tasks.to_vec();
    ordered.sort_by(|a, b| a.id().cmp(b.id()));
    if let Some(w) = ordered.windows(2).find(|w| w[0].id() == w[1].id()) {
        return Err(Error::Config(format!("duplicate task id `{}`", w[0].id())));
    }
    Ok(ordered)
}

/// `sum_i f_i(theta_i(omega))` with gradient, reduced in task-id order.
pub fn meta_gradient(
    omega: &[f64],
    tasks: &[&dyn TaskObjective],
    config: &MetaConfig,
) -> Result<MetaGradient> {
    config.validate()?;
    let mut objective = 0.0;
    let mut gradient = vec![0.0; omega.len()];
    let mut task_losses = Vec::with_capacity(tasks.len());
    for task in sorted(tasks)? {
        let path = adapt_trajectory(omega, task, config.inner_steps, config.inner_lr)?;
        let (loss, mut v) = task.val_loss_grad(&path[config.inner_steps])?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                context: format!("validation of task `{}`", task.id()),
                step: config.inner_steps,
                value: loss,
            });
        }
        if !config.first_order {
            // d theta_{k+1} / d theta_k = I - lr * H(theta_k), applied in reverse.
            for k in (0..config.inner_steps).rev() {
                let hv = task.train_hvp(&path[k], &v, k)?;
                v.iter_mut()
                    .zip(&hv)
                    .for_each(|(a, h)| *a -= config.inner_lr * h);
            }
        }
        objective += loss;
        gradient.iter_mut().zip(&v).for_each(|(g, d)| *g += d);
        task_losses.push((task.id().to_string(), loss));
    }
    Ok(MetaGradient {
        objective,
        gradient,
        task_losses,
    })
}

pub fn meta_objective(
    omega: &[f64],
    tasks: &[&dyn TaskObjective],
    steps: usize,
    lr: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for task in sorted(tasks)? {
        total += task.val_loss_grad(&inner_adapt(omega, task, steps, lr)?)?.0;
    }
    Ok(total)
}

/// One outer step `omega <- omega - outer_lr * grad`.
pub fn meta_update(
    omega: &[f64],
    tasks: &[&dyn TaskObjective],
    config: &MetaConfig,
) -> Result<Vec<f64>> {
    let mg = meta_gradient(omega, tasks, config)?;
    Ok(omega
        .iter()
        .zip(&mg.gradient)
        .map(|(w, g)| w - config.outer_lr * g)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaRecord {
    pub iter: usize,
    pub meta_objective: f64,
    pub task_losses: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetaHistory {
    pub records: Vec<MetaRecord>,
}

impl MetaHistory {
    /// Columns `iter, meta_objective` and one `loss_<task id>` per task.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let ids: Vec<String> = self
            .records
            .first()
            .map(|r| {
                r.task_losses
                    .iter()
                    .map(|t| format!("loss_{}", t.0))
                    .collect()
            })
            .unwrap_or_default();
        let mut header = vec!["iter".to_string(), "meta_objective".to_string()];
        header.extend(ids);
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.iter.to_string(), format!("{:e}", r.meta_objective)];
            row.extend(r.task_losses.iter().map(|t| format!("{:e}", t.1)));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))
    }
}

/// Runs `outer_iters` meta updates from `omega` and returns the learned
/// initialization. Each record holds the objective before its update.
pub fn pretrain(
    omega: Vec<f64>,
    tasks: &[&dyn TaskObjective],
    config: &MetaConfig,
) -> Result<(Vec<f64>, MetaHistory)> {
    sorted(tasks)?;
    let mut omega = omega;
    let mut history = MetaHistory::default();
    for iter in 0..config.outer_iters {
        let mg = meta_gradient(&omega, tasks, config)?;
        omega
            .iter_mut()
            .zip(&mg.gradient)
            .for_each(|(w, g)| *w -= config.outer_lr * g);
        log::info!("meta iter {iter}: objective {:.5}", mg.objective);
        history.records.push(MetaRecord {
            iter,
            meta_objective: mg.objective,
            task_losses: mg.task_losses,
        });
    }
    Ok((omega, history))
}

/// A [`MetaTask`] trained through a fusion network with a frozen
/// architecture; `f` is the mean fusion loss over the validation split.
pub struct FusionTask<'a> {
    pub task: &'a MetaTask,
    pub net: &'a FusionNetwork,
    pub arch: ArchRef<'a>,
    pub layout: &'a NetworkParams,
    pub weights: &'a LossWeights,
}

impl TaskObjective for FusionTask<'_> {
    fn id(&self) -> &str {
        &self.task.id
    }

    fn train_loss_grad(&self, theta: &[f64], step: usize) -> Result<(f64, Vec<f64>)> {
        let batch = &self.task.train[step % self.task.train.len()];
        fusion_loss_grad(self.net, self.layout, theta, self.arch, batch, self.weights)
    }

    fn val_loss_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let n = self.task.val.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; theta.len()];
        for batch in &self.task.val {
            let (l, g) =
                fusion_loss_grad(self.net, self.layout, theta, self.arch, batch, self.weights)?;
            loss += l / n;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b / n);
        }
        Ok((loss, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Train `1/2 (theta - a)^2`, validate `1/2 (theta - b)^2`, elementwise.
    struct Quadratic {
        id: String,
        a: Vec<f64>,
        b: Vec<f64>,
    }

    impl TaskObjective for Quadratic {
        fn id(&self) -> &str {
            &self.id
        }
        fn train_loss_grad(&self, t: &[f64], _: usize) -> Result<(f64, Vec<f64>)> {
            let d: Vec<f64> = t.iter().zip(&self.a).map(|(t, a)| t - a).collect();
            Ok((0.5 * d.iter().map(|x| x * x).sum::<f64>(), d))
        }
        fn val_loss_grad(&self, t: &[f64]) -> Result<(f64, Vec<f64>)> {
            let d: Vec<f64> = t.iter().zip(&self.b).map(|(t, b)| t - b).collect();
            Ok((0.5 * d.iter().map(|x| x * x).sum::<f64>(), d))
        }
    }

    fn quad(id: &str, a: f64, b: f64) -> Quadratic {
        Quadratic {
            id: id.into(),
            a: vec![a],
            b: vec![b],
        }
    }

    #[test]
    fn zero_steps_return_omega() {
        let t = quad("t", 1.0, 2.0);
        assert_eq!(inner_adapt(&[0.25], &t, 0, 0.1).unwrap(), vec![0.25]);
    }

    #[test]
    fn one_unit_step_reaches_train_target() {
        let t = quad("t", 1.5, 2.0);
        assert_eq!(inner_adapt(&[-3.0], &t, 1, 1.0).unwrap(), vec![1.5]);
    }

    #[test]
    fn empty_task_list_is_rejected() {
        assert!(matches!(
            meta_objective(&[0.0], &[], 1, 0.1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn identical_tasks_scale_objective_and_step() {
        let (t, twin) = (quad("t", 0.5, 1.25), quad("u", 0.5, 1.25));
        let single = meta_gradient(&[0.0], &[&t], &MetaConfig::default()).unwrap();
        let double = meta_gradient(&[0.0], &[&t, &twin], &MetaConfig::default()).unwrap();
        assert_eq!(double.objective, 2.0 * single.objective);
        assert_eq!(double.gradient[0], 2.0 * single.gradient[0]);
    }

    #[test]
    fn k_zero_update_is_plain_gradient_step() {
        let t = quad("t", 0.5, 1.25);
        let cfg = MetaConfig {
            inner_steps: 0,
            outer_lr: 0.1,
            ..Default::default()
        };
        let next = meta_update(&[2.0], &[&t], &cfg).unwrap();
        assert_eq!(next, vec![2.0 - 0.1 * (2.0 - 1.25)]);
    }

    #[test]
    fn default_hvp_of_quadratic_is_identity() {
        let t = Quadratic {
            id: "t".into(),
            a: vec![1.0, -2.0],
            b: vec![0.0, 0.0],
        };
        let hv = t.train_hvp(&[0.3, 0.7], &[2.0, -1.0], 0).unwrap();
        assert!((hv[0] - 2.0).abs() < 1e-8 && (hv[1] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let b = PairBatch::new(
            crate::Tensor::zeros(vec![1, 1, 4, 4]),
            crate::Tensor::zeros(vec![1, 1, 4, 4]),
        )
        .unwrap();
        assert!(MetaTask::new("x", "synthetic", vec![b.clone()], vec![b]).is_err());
    }
}
