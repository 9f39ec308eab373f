use dfl::data::{generate_federation_data, SyntheticTaskSpec};
use dfl::diagnostics::convex::{ConvexHarness, ConvexSpec};
use dfl::diagnostics::{
    b_dissimilarity, expected_decrease_check, gamma_inexactness, mi_grad_moments, Dissimilarity, MomentAccumulator,
};
use dfl::federation::{local_stage1_specific, local_stage2_invariant, FederationConfig, RoundInputs};
use dfl::models::{ModelSpec, Segment, TwoBranchArch, TwoBranchModel};
use dfl::rng;
use proptest::prelude::*;

fn grads_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..6, 1usize..8).prop_flat_map(|(k, d)| {
        (
            prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), k),
            prop::collection::vec(1.0f64..100.0, k),
        )
    })
}

proptest! {
    #[test]
    fn b_is_scale_invariant((grads, w) in grads_strategy(), c in 1e-3f64..1e3) {
        let scaled: Vec<Vec<f64>> = grads.iter().map(|g| g.iter().map(|v| c * v).collect()).collect();
        match (b_dissimilarity(&grads, &w).unwrap(), b_dissimilarity(&scaled, &w).unwrap()) {
            (Dissimilarity::Value(a), Dissimilarity::Value(b)) => prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0)),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn b_is_at_least_one((grads, w) in grads_strategy()) {
        if let Dissimilarity::Value(b) = b_dissimilarity(&grads, &w).unwrap() {
            prop_assert!(b >= 1.0 - 1e-12);
        }
    }

    #[test]
    fn gamma_is_scale_invariant(
        star in prop::collection::vec(-3.0f64..3.0, 4),
        w0 in prop::collection::vec(-3.0f64..3.0, 4),
        w1 in prop::collection::vec(-3.0f64..3.0, 4),
        c in 1e-3f64..1e3,
    ) {
        let star = &star;
        let grad = |scale: f64| move |w: &[f64]| -> dfl::Result<Vec<f64>> {
            Ok(w.iter().zip(star).map(|(a, b)| scale * (a - b) * (1.0 + a * a)).collect())
        };
        let a = gamma_inexactness(grad(1.0), &w1, &w0).unwrap();
        let b = gamma_inexactness(grad(c), &w1, &w0).unwrap();
        prop_assert_eq!(a.stationary, b.stationary);
        prop_assert!((a.gamma - b.gamma).abs() <= 1e-12 * a.gamma.max(1.0));
    }

    #[test]
    fn accumulator_replays_logged_norms(
        s in prop::collection::vec(0.0f64..10.0, 0..20),
        c in prop::collection::vec(0.0f64..10.0, 0..20),
        split in 0usize..20,
    ) {
        let cut = split.min(s.len());
        let mut a = MomentAccumulator::default();
        let mut b = MomentAccumulator::default();
        for &v in &s[..cut] { a.push_s(v); }
        for &v in &s[cut..] { b.push_s(v); }
        for &v in &c { b.push_c(v); }
        a.merge(&b);
        let (es, ec) = a.moments();
        let (rs, rc) = mi_grad_moments(&s, &c);
        prop_assert_eq!(es.is_some(), rs.is_some());
        prop_assert_eq!(ec.is_some(), rc.is_some());
        if let (Some(x), Some(y)) = (es, rs) { prop_assert!((x - y).abs() <= 1e-12 * y.max(1.0)); }
        if let (Some(x), Some(y)) = (ec, rc) { prop_assert!((x - y).abs() <= 1e-12 * y.max(1.0)); }
        prop_assert!(es.unwrap_or(0.0) >= 0.0 && ec.unwrap_or(0.0) >= 0.0);
    }
}

#[test]
fn zero_statistics_nets_give_zero_moments() {
    let task = SyntheticTaskSpec {
        n_clients: 2,
        samples_per_client: 64,
        ..SyntheticTaskSpec::default()
    };
    let data = generate_federation_data(&task).unwrap();
    let arch = TwoBranchArch::new(ModelSpec {
        input_dim: task.input_dim(),
        ..ModelSpec::default()
    })
    .unwrap();
    let mut model = TwoBranchModel::<f64>::init(arch, 3);
    model.segment_mut(Segment::StatsS).fill(0.0);
    model.segment_mut(Segment::StatsC).fill(0.0);
    let global = TwoBranchModel::<f64>::init(model.arch().clone(), 4).invariant().into_vec();
    let cfg = FederationConfig {
        stats_lr: 0.0,
        local_epochs: 1,
        ..FederationConfig::default()
    };
    let inputs = RoundInputs {
        cfg: &cfg,
        peers: &[],
        global_c: Some(&global),
    };
    let mut acc = MomentAccumulator::default();
    let mut b = rng::stream(0, &[1]);
    let mut m = rng::stream(0, &[2]);
    let s1 = local_stage1_specific(&mut model, &data[0].train, inputs, 0, 0, &mut b, &mut m, Some(&mut acc)).unwrap();
    let s2 = local_stage2_invariant(&mut model, &data[0].train, inputs, 0, 0, &mut b, &mut m, Some(&mut acc)).unwrap();
    assert_eq!(acc.moments(), (Some(0.0), Some(0.0)));
    let floor = -2.0 * 2f64.ln();
    assert!((s1.mi_mean.unwrap() - floor).abs() < 1e-12);
    assert!((s2.mi_mean.unwrap() - floor).abs() < 1e-12);
}

#[test]
fn convex_run_decreases_after_burn_in() {
    let run = ConvexHarness::new(ConvexSpec::default()).unwrap().run().unwrap();
    let report = expected_decrease_check(&run.series, 5).unwrap();
    assert!(report.non_increasing_from(5), "{:?}", report.windowed_means);
    assert!(report.cesaro_slope < 0.0);
    assert!(run.final_grad_norm() < 1e-3);
}
