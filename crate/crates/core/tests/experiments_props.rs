use isac_core::config::ExperimentConfig;
use isac_core::experiments::*;

fn small() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.sweep.trials = 2;
    c.sweep.snr_db = vec![10.0];
    c.trajectory.aperture = 0.03;
    c
}

#[test]
fn sweep_is_a_pure_function_of_config_and_seed() {
    let c = small();
    let a = run_rmse_vs_snr(&c).unwrap();
    let b = run_rmse_vs_snr(&c).unwrap();
    assert_eq!(a, b);
    let mut other = c.clone();
    other.seed += 1;
    assert_ne!(
        run_rmse_vs_snr(&other).unwrap()[0].rmse_oracle_af,
        a[0].rmse_oracle_af
    );
}

#[test]
fn trials_reuse_imu_and_noise_across_snr() {
    let c = small();
    let setup = Setup::new(&c).unwrap();
    let lo = draw_trial(&c, &setup, 0.0, 7).unwrap();
    let hi = draw_trial(&c, &setup, 20.0, 7).unwrap();
    let clean = draw_trial(&c, &setup, 400.0, 7).unwrap();
    assert_eq!(lo.imu, hi.imu);
    // same noise draw, scaled by the amplitude ratio 10^(20/20)
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for ((a, b), z) in lo
        .cube
        .values()
        .iter()
        .zip(hi.cube.values())
        .zip(clean.cube.values())
    {
        let na = a - z;
        let nb = b - z;
        worst = worst.max((na - nb * 10.0).norm());
        scale = scale.max(na.norm());
    }
    assert!(worst <= 1e-9 * scale, "{worst} vs {scale}");
}

#[test]
fn different_streams_are_independent_draws() {
    let c = small();
    let setup = Setup::new(&c).unwrap();
    let a = draw_trial(&c, &setup, 10.0, 0).unwrap();
    let b = draw_trial(&c, &setup, 10.0, 1).unwrap();
    assert_ne!(a.imu.bias, b.imu.bias);
}

#[test]
fn bounds_and_eirp_outputs_are_deterministic() {
    let c = ExperimentConfig::default();
    assert_eq!(bounds_table(&c).unwrap(), bounds_table(&c).unwrap());
    let mut e = c.clone();
    e.eirp.r_step = 0.05;
    assert_eq!(
        run_eirp_vs_distance(&e).unwrap(),
        run_eirp_vs_distance(&e).unwrap()
    );
}
