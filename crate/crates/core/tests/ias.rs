//! The Gauss-Newton hypergradient estimator against closed-form bilevel
//! problems, and the search loop on the identity-vs-zero toy space.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskfuse::data::PairBatch;
use taskfuse::gradcheck::cosine_similarity;
use taskfuse::ias::*;
use taskfuse::search_space::{latency_regularizer, ArchitectureWeights, LatencyTable};
use taskfuse::Tensor;

/// `l = 1/2 (theta - alpha)^2`, `l_alpha = 1/2 theta^2`: the best response is
/// `theta* = alpha` and the hypergradient of `l_alpha(theta*(alpha))` is `alpha`.
fn scalar_bundle(alpha: f64, theta: f64) -> GradientBundle {
    GradientBundle::new(
        vec![theta - alpha],
        vec![theta],
        vec![alpha - theta],
        vec![0.0],
    )
    .unwrap()
}

#[test]
fn scalar_problem_near_optimum() {
    for alpha in [-2.0, -0.3, 0.7, 1.0, 5.0] {
        let g = implicit_alpha_gradient(
            &scalar_bundle(alpha, alpha + 1e-6),
            SearchConfig::default().epsilon,
        );
        assert!((g[0] - alpha).abs() < 1e-4, "alpha {alpha}: {}", g[0]);
    }
}

/// Random orthonormal basis by Gram-Schmidt.
fn orthonormal(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// `l = 1/2 (theta - A^-1 alpha)^T A (theta - A^-1 alpha)`, `l_alpha = 1/2 |theta|^2`
/// with `alpha` along an eigenvector `u` of `A` (eigenvalue `lam`). The exact
/// hypergradient is `A^-2 alpha`; evaluating at `theta* + s u` makes the
/// Gauss-Newton estimate exact.
fn spd_instance(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=5);
    let q = orthonormal(n, &mut rng);
    let eig: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..4.0)).collect();
    let a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (0..n).map(|k| q[k][i] * eig[k] * q[k][j]).sum())
                .collect()
        })
        .collect();
    let k = rng.gen_range(0..n);
    let (u, lam) = (&q[k], eig[k]);
    let scale = rng.gen_range(0.5..3.0);
    let alpha: Vec<f64> = u.iter().map(|x| x * scale).collect();
    let theta_star: Vec<f64> = alpha.iter().map(|x| x / lam).collect();
    let exact: Vec<f64> = alpha.iter().map(|x| x / (lam * lam)).collect();

    let s = 1e-6;
    let theta: Vec<f64> = theta_star.iter().zip(u).map(|(t, x)| t + s * x).collect();
    let d: Vec<f64> = theta
        .iter()
        .zip(&theta_star)
        .map(|(t, ts)| t - ts)
        .collect();
    let grad_theta = mat_vec(&a, &d);
    let grad_alpha: Vec<f64> = d.iter().map(|x| -x).collect();
    let bundle = GradientBundle::new(grad_theta, theta.clone(), grad_alpha, vec![0.0; n]).unwrap();
    (
        implicit_alpha_gradient(&bundle, SearchConfig::default().epsilon),
        exact,
    )
}

#[test]
fn spd_quadratics_align_with_exact_hypergradient() {
    for seed in 0..20 {
        let (g, exact) = spd_instance(seed);
        let cos = cosine_similarity(&g, &exact);
        assert!(cos >= 0.99, "instance {seed}: cosine {cos}");
    }
}

proptest! {
    #[test]
    fn estimator_is_linear_in_direct_term(
        gi in proptest::collection::vec(-3.0f64..3.0, 4),
        gs in proptest::collection::vec(-3.0f64..3.0, 4),
        ai in proptest::collection::vec(-3.0f64..3.0, 3),
        as_ in proptest::collection::vec(-3.0f64..3.0, 3),
        shift in -2.0f64..2.0,
    ) {
        let b = GradientBundle::new(gi.clone(), gs.clone(), ai.clone(), as_.clone()).unwrap();
        let shifted: Vec<f64> = as_.iter().map(|v| v + shift).collect();
        let b2 = GradientBundle::new(gi, gs, ai, shifted).unwrap();
        let (g1, g2) = (implicit_alpha_gradient(&b, 1e-12), implicit_alpha_gradient(&b2, 1e-12));
        for (x, y) in g1.iter().zip(&g2) {
            prop_assert!((y - x - shift).abs() < 1e-9);
        }
    }

    #[test]
    fn estimator_never_produces_nan(scale in -30i32..30) {
        let s = 10f64.powi(scale);
        let b = GradientBundle::new(vec![s, 0.0], vec![1.0, s], vec![s], vec![1.0]).unwrap();
        prop_assert!(implicit_alpha_gradient(&b, 1e-24).iter().all(|v| v.is_finite()));
    }
}

fn toy_batches(seed: u64) -> Vec<PairBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..16)
        .map(|_| {
            let a = Tensor::uniform(vec![2, 1, 8, 8], 0.5, &mut rng).map(|v| v + 0.5);
            let noise = Tensor::uniform(vec![2, 1, 8, 8], 0.1, &mut rng);
            let b = a.map(|v| 0.6 * v + 0.2).zip_map(&noise, |x, y| x + y);
            PairBatch::new(a, b).unwrap()
        })
        .collect()
}

fn toy_config(lambda: f64) -> SearchConfig {
    SearchConfig {
        inner_steps: 20,
        lambda,
        epochs: 10,
        inner_lr: 20.0,
        alpha_lr: 0.1,
        record_wall_time: false,
        ..Default::default()
    }
}

#[test]
fn search_history_is_reproducible_and_well_formed() {
    let latency = LatencyTable::from_pairs([("skip", 1.0), ("zero", 0.0)]).unwrap();
    let toy = GatedReconstruction::identity_vs_zero(8, 8, 2, latency);
    let run = || {
        let tasks = vec![TaskSplit::halve("toy", toy_batches(3)).unwrap()];
        let cfg = SearchConfig {
            epochs: 3,
            ..toy_config(0.0)
        };
        search(
            &toy,
            vec![0.0; toy.num_params()],
            toy.uniform_architecture(),
            &tasks,
            &cfg,
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.alpha, b.alpha);
    let mut csv_a = Vec::new();
    a.history.write_csv(&mut csv_a).unwrap();
    let mut csv_b = Vec::new();
    b.history.write_csv(&mut csv_b).unwrap();
    assert_eq!(csv_a, csv_b);
    let text = String::from_utf8(csv_a).unwrap();
    assert!(text.starts_with("epoch,loss_F,loss_alpha,reg,wall_time\n"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn unpaired_task_split_is_rejected() {
    assert!(TaskSplit::halve("one", toy_batches(0)[..1].to_vec()).is_err());
}

#[test]
fn latency_regularizer_of_one_hot_is_discrete_cost() {
    let latency = LatencyTable::from_pairs([("skip", 5.0), ("zero", 0.0)]).unwrap();
    let toy = GatedReconstruction::identity_vs_zero(8, 8, 2, latency.clone());
    let mut alpha: ArchitectureWeights = toy.uniform_architecture();
    for e in 0..2 {
        alpha.logits_mut(e).copy_from_slice(&[-60.0, 60.0]);
    }
    let reg = latency_regularizer(&alpha, &latency).unwrap();
    assert!((reg - 10.0).abs() < 1e-12);
}
