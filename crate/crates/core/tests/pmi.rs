//! Meta-initialization on quadratic tasks with closed-form adaptation:
//! train loss `1/2 (theta - a_i)^2`, validation loss `1/2 (theta - b_i)^2`.
//! With plain gradient steps of size `beta`, `theta_K = r omega + (1 - r) a_i`
//! with `r = (1 - beta)^K`.

use taskfuse::pmi::*;
use taskfuse::Result;

struct Quadratic {
    id: String,
    a: f64,
    b: f64,
}

impl TaskObjective for Quadratic {
    fn id(&self) -> &str {
        &self.id
    }
    fn train_loss_grad(&self, t: &[f64], _: usize) -> Result<(f64, Vec<f64>)> {
        Ok((0.5 * (t[0] - self.a).powi(2), vec![t[0] - self.a]))
    }
    fn val_loss_grad(&self, t: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((0.5 * (t[0] - self.b).powi(2), vec![t[0] - self.b]))
    }
}

fn tasks() -> Vec<Quadratic> {
    [("t2", 1.0, 2.0), ("t0", -0.5, 0.25), ("t1", 3.0, 1.5)]
        .into_iter()
        .map(|(id, a, b)| Quadratic {
            id: id.into(),
            a,
            b,
        })
        .collect()
}

fn refs(t: &[Quadratic]) -> Vec<&dyn TaskObjective> {
    t.iter().map(|q| q as &dyn TaskObjective).collect()
}

#[test]
fn adapted_parameters_closed_form() {
    let beta = 0.3;
    for k in 0..4 {
        let r = (1.0f64 - beta).powi(k as i32);
        for t in tasks() {
            let got = inner_adapt(&[0.8], &t, k, beta).unwrap()[0];
            assert!((got - (r * 0.8 + (1.0 - r) * t.a)).abs() < 1e-12);
        }
    }
}

#[test]
fn full_order_gradient_closed_form() {
    let (beta, omega) = (0.25, 0.6);
    let t = tasks();
    for k in 1..=3 {
        let r = (1.0f64 - beta).powi(k);
        let cfg = MetaConfig {
            inner_steps: k as usize,
            inner_lr: beta,
            first_order: false,
            ..Default::default()
        };
        let mg = meta_gradient(&[omega], &refs(&t), &cfg).unwrap();
        let want: f64 = t
            .iter()
            .map(|q| r * (r * omega + (1.0 - r) * q.a - q.b))
            .sum();
        assert!(
            (mg.gradient[0] - want).abs() < 1e-8,
            "K={k}: {} vs {want}",
            mg.gradient[0]
        );
        let fo = meta_gradient(
            &[omega],
            &refs(&t),
            &MetaConfig {
                first_order: true,
                ..cfg
            },
        )
        .unwrap();
        assert!((fo.gradient[0] * r - want).abs() < 1e-12);
    }
}

#[test]
fn task_losses_are_reported_in_id_order() {
    let t = tasks();
    let mg = meta_gradient(&[0.0], &refs(&t), &MetaConfig::default()).unwrap();
    let ids: Vec<&str> = mg.task_losses.iter().map(|(id, _)| id.as_str()).collect();
    assert_eq!(ids, ["t0", "t1", "t2"]);
    let sum: f64 = mg.task_losses.iter().map(|(_, l)| l).sum();
    assert!((sum - mg.objective).abs() < 1e-15);
}

#[test]
fn pretraining_converges_to_optimal_initialization() {
    let (beta, k) = (0.2, 2);
    let t = tasks();
    let r = (1.0f64 - beta).powi(k);
    let m = t.len() as f64;
    let (sa, sb): (f64, f64) = (t.iter().map(|q| q.a).sum(), t.iter().map(|q| q.b).sum());
    let optimum = (sb - (1.0 - r) * sa) / (m * r);
    let cfg = MetaConfig {
        inner_steps: k as usize,
        inner_lr: beta,
        outer_lr: 0.2,
        outer_iters: 200,
        first_order: false,
    };
    let (omega, history) = pretrain(vec![5.0], &refs(&t), &cfg).unwrap();
    assert!(
        (omega[0] - optimum).abs() < 1e-8,
        "{} vs {optimum}",
        omega[0]
    );
    let objs: Vec<f64> = history.records.iter().map(|r| r.meta_objective).collect();
    assert!(objs.windows(2).all(|w| w[1] <= w[0] + 1e-15));
}

#[test]
fn history_csv_has_one_column_per_task() {
    let t = tasks();
    let (_, history) = pretrain(
        vec![0.0],
        &refs(&t),
        &MetaConfig {
            outer_iters: 2,
            ..Default::default()
        },
    )
    .unwrap();
    let mut buf = Vec::new();
    history.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "iter,meta_objective,loss_t0,loss_t1,loss_t2"
    );
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn duplicate_task_ids_are_rejected() {
    let t = vec![
        Quadratic {
            id: "x".into(),
            a: 0.0,
            b: 1.0,
        },
        Quadratic {
            id: "x".into(),
            a: 1.0,
            b: 0.0,
        },
    ];
    assert!(meta_gradient(&[0.0], &refs(&t), &MetaConfig::default()).is_err());
}
