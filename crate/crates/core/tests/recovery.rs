use fjlab_core::dynamics::simulate;
use fjlab_core::estimation::{fit_global, fit_sample, FitConfig, Objective};
use fjlab_core::random::{random_params, random_snapshot, ParamRanges};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn synthetic(seed: u64, n: usize, d: usize, rounds: usize) -> fjlab_core::domain::DeliberationTrajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = random_params(&mut rng, n, ParamRanges::default()).unwrap();
    let innate = random_snapshot(&mut rng, n, d).unwrap();
    let mut traj = simulate(&params, &innate, rounds).unwrap();
    traj.sample_id = format!("gen-{seed}");
    traj
}

#[test]
fn kl_fit_recovers_generator_dynamics() {
    let cfg = FitConfig {
        reg_lambda: 0.0,
        ..FitConfig::default()
    };
    for seed in 0..4 {
        let traj = synthetic(seed, 5, 4, 8);
        let rep = fit_sample(&traj, &cfg).unwrap();
        assert!(rep.mse < 1e-6, "seed {seed}: mse {}", rep.mse);
    }
}

#[test]
fn mse_fit_is_deterministic() {
    let cfg = FitConfig {
        objective: Objective::Mse,
        reg_lambda: 0.0,
        seed: 11,
        ..FitConfig::default()
    };
    let traj = synthetic(99, 4, 3, 6);
    let a = fit_sample(&traj, &cfg).unwrap();
    let b = fit_sample(&traj, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn global_fit_never_beats_per_sample_fits() {
    let cfg = FitConfig {
        objective: Objective::Mse,
        reg_lambda: 0.0,
        restarts: 2,
        ..FitConfig::default()
    };
    let pool: Vec<_> = (20..23).map(|s| synthetic(s, 3, 3, 5)).collect();
    let global = fit_global(&pool, &cfg).unwrap();
    let per_sample: f64 = pool.iter().map(|t| fit_sample(t, &cfg).unwrap().mse).sum::<f64>() / pool.len() as f64;
    assert!(per_sample <= global.mse + 1e-9);
}

#[test]
fn global_fit_recovers_shared_generator() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let params = random_params(&mut rng, 3, ParamRanges::default()).unwrap();
    let pool: Vec<_> = (0..4)
        .map(|k| {
            let innate = random_snapshot(&mut rng, 3, 3).unwrap();
            let mut traj = simulate(&params, &innate, 6).unwrap();
            traj.sample_id = format!("shared-{k}");
            traj
        })
        .collect();
    let cfg = FitConfig {
        reg_lambda: 0.0,
        restarts: 2,
        ..FitConfig::default()
    };
    let global = fit_global(&pool, &cfg).unwrap();
    assert!(global.mse < 1e-8, "mse {}", global.mse);
}
