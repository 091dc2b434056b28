use fjlab_core::domain::BeliefSnapshot;
use fjlab_core::metrics::{diversity, diversity_pairwise};
use fjlab_core::random::{random_simplex, random_snapshot};
use fjlab_core::routing::{
    ambiguity_check, confidence_router, ensemble_comparison, routing_regret, single_agent_comparison, LabeledItem,
    LabeledSnapshotSet, Router,
};
use fjlab_core::scenarios::{
    exclusive_losses, gen_exclusive, gen_imperfect, imperfect_gap, mc_exclusive_losses, ExclusiveScenario,
    ImperfectScenario,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn draw(seed: u64) -> (BeliefSnapshot, Vec<f64>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..7);
    let d = rng.random_range(2..9);
    let s = random_snapshot(&mut rng, n, d).unwrap();
    let a = random_simplex(&mut rng, n);
    let y = rng.random_range(0..d);
    (s, a, y)
}

proptest! {
    #[test]
    fn ambiguity_identity(seed in any::<u64>()) {
        let (s, a, y) = draw(seed);
        let c = ambiguity_check(&s, &a, y).unwrap();
        prop_assert!(c.gap.abs() < 1e-10);
        prop_assert!((diversity(&s, &a).unwrap() - diversity_pairwise(&s, &a).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn regret_nonnegative(seed in any::<u64>()) {
        let (s, a, y) = draw(seed);
        prop_assert!(routing_regret(&s, &a, y).unwrap() >= 0.0);
    }

    #[test]
    fn confidence_router_permutation_equivariant(seed in any::<u64>(), beta in 0.0f64..20.0) {
        let (s, _, _) = draw(seed);
        let pi = confidence_router(&s, beta).unwrap();
        let mut rows: Vec<Vec<f64>> = s.rows().iter().map(|r| r.to_vec()).collect();
        rows.reverse();
        let rev = confidence_router(&BeliefSnapshot::from_rows(rows).unwrap(), beta).unwrap();
        for (x, y) in pi.iter().zip(rev.iter().rev()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn ensemble_gap_matches_realized_losses_with_label_law() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let items = (0..200)
        .map(|_| {
            let s = random_snapshot(&mut rng, 4, 3).unwrap();
            let law = random_simplex(&mut rng, 3);
            LabeledItem::new(s, 0).unwrap().with_label_law(law).unwrap()
        })
        .collect();
    let data = LabeledSnapshotSet::new(items).unwrap();
    let router = Router::ConfidenceSoftmax { beta: 5.0 };
    let r = ensemble_comparison(&data, &[0.25; 4], &router).unwrap();
    assert!(((r.lhs - r.rhs) - r.realized_gap).abs() < 1e-10);
    let rep = single_agent_comparison(&data, &router).unwrap();
    assert_eq!(rep.confusion[0][1] + rep.confusion[1][0], 0);
}

#[test]
fn exclusive_monte_carlo_matches_closed_form() {
    let sc = ExclusiveScenario::balanced(5, 10, 0.1).unwrap();
    let data = gen_exclusive(&sc, 20_000, 7).unwrap();
    let a = vec![0.2; 5];
    let mc = mc_exclusive_losses(&data, &a).unwrap();
    let exact = exclusive_losses(&sc, &a).unwrap();
    assert!(((mc.l_ens - mc.l_moe) - exact.gap_balanced.unwrap()).abs() < 0.02);
    assert!((mc.l_moe - exact.l_moe).abs() < 1e-12);
}

#[test]
fn imperfect_monte_carlo_matches_closed_form() {
    let sc = ImperfectScenario::new(5, 4, 0.9, 0.05, 0.7).unwrap();
    let data = gen_imperfect(&sc, 2_000, 3).unwrap();
    let mc = mc_exclusive_losses(&data, &[0.2; 5]).unwrap();
    assert!(((mc.l_ens - mc.l_moe) - imperfect_gap(&sc).unwrap()).abs() < 1e-9);
}
