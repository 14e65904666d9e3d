//! Relaxed-network consistency, parameter gradients through the fusion
//! network and architecture manifests.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taskfuse::data::PairBatch;
use taskfuse::gradcheck::{central_difference, relative_error};
use taskfuse::ias::fusion_loss_grad;
use taskfuse::losses::LossWeights;
use taskfuse::search_space::*;
use taskfuse::Tensor;

fn small_space() -> SearchSpaceConfig {
    SearchSpaceConfig {
        width: 3,
        ..SearchSpaceConfig::default()
    }
}

fn inputs(seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::uniform(vec![1, 1, 8, 8], 0.5, &mut rng).map(|v| v + 0.5);
    let b = Tensor::uniform(vec![1, 1, 8, 8], 0.5, &mut rng).map(|v| v + 0.5);
    (a, b)
}

fn max_abs_diff(x: &Tensor, y: &Tensor) -> f64 {
    x.data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

#[test]
fn one_hot_relaxation_equals_discrete_network() {
    let (net, params) =
        build_fusion_network(&small_space(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let (a, b) = inputs(2);
    let candidates = net.edge_candidates();
    for pick in 0..candidates[0].len() {
        let choices: Vec<usize> = candidates.iter().map(|c| (pick + 1) % c.len()).collect();
        let one_hot: Vec<Vec<f64>> = candidates
            .iter()
            .zip(&choices)
            .map(|(c, &k)| {
                (0..c.len())
                    .map(|i| if i == k { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let relaxed = net
            .fuse(&params, ArchRef::Weights(&one_hot), &a, &b)
            .unwrap();
        let discrete = net
            .fuse(
                &params,
                ArchRef::Discrete(&DiscreteArchitecture::from_choices(choices)),
                &a,
                &b,
            )
            .unwrap();
        assert!(max_abs_diff(&relaxed, &discrete) < 1e-12);
    }
}

#[test]
fn saturated_logits_approach_discrete_network() {
    let (net, params) =
        build_fusion_network(&small_space(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let (a, b) = inputs(4);
    let mut alpha = net.uniform_architecture();
    for e in 0..alpha.edge_count() {
        alpha.logits_mut(e)[2] = 40.0;
    }
    let derived = derive_architecture(&alpha);
    assert!(derived.choices().iter().all(|&c| c == 2));
    let relaxed = mixed_forward(&net, &alpha, &params, &a, &b).unwrap();
    let discrete = net
        .fuse(&params, ArchRef::Discrete(&derived), &a, &b)
        .unwrap();
    assert!(max_abs_diff(&relaxed, &discrete) < 1e-9);
}

#[test]
fn fusion_loss_parameter_gradient_matches_finite_differences() {
    let cfg = SearchSpaceConfig {
        width: 2,
        fusion: NetworkLayout {
            cells: vec![CellConfig::new("SC", &[&["3-RB", "SA"]])],
        },
        ..SearchSpaceConfig::default()
    };
    let (net, params) = build_fusion_network(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let (a, b) = inputs(6);
    let batch = PairBatch::new(a, b).unwrap();
    let weights = LossWeights {
        window: 5,
        sigma: 1.0,
        ..LossWeights::default()
    };
    let alpha = net.uniform_architecture();
    let theta = params.flatten();
    let (_, analytic) = fusion_loss_grad(
        &net,
        &params,
        &theta,
        ArchRef::Logits(&alpha),
        &batch,
        &weights,
    )
    .unwrap();
    let numeric = central_difference(&theta, 1e-6, |t| {
        fusion_loss_grad(&net, &params, t, ArchRef::Logits(&alpha), &batch, &weights)
            .unwrap()
            .0
    });
    let err = relative_error(&analytic, &numeric);
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn derived_manifest_parses_back() {
    let (net, _) = build_fusion_network(
        &SearchSpaceConfig::default(),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let mut alpha = net.uniform_architecture();
    alpha.logits_mut(1)[4] = 1.0;
    let derived = derive_architecture(&alpha);
    let cells = parse_manifest(&derived.manifest(&net).unwrap()).unwrap();
    let ops: Vec<String> = cells.iter().flat_map(|c| c.operators.clone()).collect();
    assert_eq!(ops, derived.ids());
    assert_eq!(ops[1], "CA");
    assert_eq!(cells[0].kind, CellKind::MultiScale);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn argmax_ties_go_to_lowest_index(logits in proptest::collection::vec(-2i32..2, 1..7)) {
        let candidates: Vec<String> = (0..logits.len()).map(|i| format!("op{i}")).collect();
        let edge = EdgeLogits { candidates, logits: logits.iter().map(|&v| v as f64).collect() };
        let alpha = ArchitectureWeights::from_edges(vec![edge]).unwrap();
        let d = derive_architecture(&alpha);
        let max = *logits.iter().max().unwrap();
        prop_assert_eq!(d.choices()[0], logits.iter().position(|&v| v == max).unwrap());
    }

    #[test]
    fn regularizer_is_bounded_by_extreme_costs(l0 in -5.0f64..5.0, l1 in -5.0f64..5.0, c0 in 0.0f64..10.0, c1 in 0.0f64..10.0) {
        let table = LatencyTable::from_pairs([("x", c0), ("y", c1)]).unwrap();
        let edge = EdgeLogits { candidates: vec!["x".into(), "y".into()], logits: vec![l0, l1] };
        let reg = latency_regularizer(&ArchitectureWeights::from_edges(vec![edge]).unwrap(), &table).unwrap();
        prop_assert!(reg >= c0.min(c1) - 1e-12 && reg <= c0.max(c1) + 1e-12);
    }
}
