//! Seeded Monte Carlo drivers: RMSE versus SNR, EIRP curves, imaging demo
//! and bound tables. Every output is a pure function of the configuration
//! (which includes the seed).

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autofocus::{run_autofocus, AutofocusResult};
use crate::bounds::{bound_at_snr, write_bound_csv, BoundRow, MeanModel};
use crate::config::ExperimentConfig;
use crate::exposure::{
    eirp_baseline, eirp_mpe_limit, eirp_proposed, range_variance, write_eirp_csv, EirpPoint,
};
use crate::imaging::{
    backproject, detect_points, ImageGrid, JointSettings, Localization, RefineSettings,
};
use crate::output::{write_csv_file, write_file, Metadata};
use crate::trajectory::{error_covariance, generate_trajectory, simulate_imu, ImuRun, Trajectory};
use crate::waveform::{synthesize_cube, ArrayGeometry, RangeCube};
use crate::{Complex64, Error, Result, Vec3};

/// Independent RNG stream for one trial.
pub fn trial_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Quantities shared by every trial of a configuration.
#[derive(Debug, Clone)]
pub struct Setup {
    pub trajectory: Trajectory,
    pub array: ArrayGeometry,
    pub target: Vec3,
    pub target_alpha: Complex64,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let trajectory = generate_trajectory(
            cfg.trajectory.kind,
            cfg.trajectory.aperture,
            &cfg.radio,
            cfg.trajectory.interval,
        )?;
        let scene = cfg.scene.build(0.0);
        let target_alpha = scene.amplitudes(&cfg.radio)[0];
        Ok(Self {
            trajectory,
            array: cfg.array_geometry(),
            target: cfg.scene.target()?,
            target_alpha,
        })
    }

    /// Per-subcarrier noise power for the requested SNR at the target.
    pub fn noise_power(&self, snr_db: f64) -> f64 {
        let r0 = (self.target - self.trajectory.centroid()).norm();
        (self.target_alpha.norm() / (r0 * r0)).powi(2) / 10f64.powf(snr_db / 10.0)
    }
}

/// Everything drawn in one trial: IMU run and range cube.
#[derive(Debug, Clone)]
pub struct TrialData {
    pub imu: ImuRun,
    pub cube: RangeCube,
}

pub fn draw_trial(
    cfg: &ExperimentConfig,
    setup: &Setup,
    snr_db: f64,
    stream: u64,
) -> Result<TrialData> {
    let mut rng = trial_rng(cfg.seed, stream);
    let imu = simulate_imu(&setup.trajectory, &cfg.imu_spec(), cfg.imu.scheme, &mut rng)?;
    let scene = cfg.scene.build(setup.noise_power(snr_db));
    let cube = synthesize_cube(
        &scene,
        &setup.array,
        &setup.trajectory.positions,
        &cfg.radio,
        cfg.scene.self_interference_mode,
        &mut rng,
    )?;
    Ok(TrialData { imu, cube })
}

/// Scene-wide image plane used for provisional images and the demo.
pub fn scene_grid(cfg: &ExperimentConfig) -> Result<ImageGrid> {
    let spacing = cfg.imaging.spacing_wavelengths * cfg.radio.wavelength();
    ImageGrid::plane_xy(
        Vec3::from(cfg.imaging.centre),
        cfg.imaging.half_extent[0],
        cfg.imaging.half_extent[1],
        spacing,
    )
}

/// Coarser plane over the same scene used to seed joint detection.
pub fn detection_grid(cfg: &ExperimentConfig) -> Result<ImageGrid> {
    let spacing = cfg.imaging.detection_spacing_wavelengths * cfg.radio.wavelength();
    ImageGrid::plane_xy(
        Vec3::from(cfg.imaging.centre),
        cfg.imaging.half_extent[0],
        cfg.imaging.half_extent[1],
        spacing,
    )
}

/// Joint detection and refinement of the scene scatterers, then the estimate
/// nearest the expected target position. Estimates farther away than the
/// search half-width count as a miss.
pub fn localize_target(
    cfg: &ExperimentConfig,
    cube: &RangeCube,
    trajectory: &[Vec3],
    array: &ArrayGeometry,
    expected: &Vec3,
) -> Result<Localization> {
    let grid = detection_grid(cfg)?;
    let joint = JointSettings {
        count: cfg.imaging.scatterers,
        sweeps: cfg.imaging.sweeps,
        window: cfg.imaging.window,
        refine: RefineSettings {
            initial_step: 0.25 * grid.spacing.min(),
            ..RefineSettings::default()
        },
    };
    let points = detect_points(cube, trajectory, array, &grid, &joint)?;
    let best = points
        .iter()
        .min_by(|a, b| {
            (a.position - expected)
                .norm()
                .total_cmp(&(b.position - expected).norm())
        })
        .ok_or(Error::EmptyImage)?;
    let distance = (best.position - expected).norm();
    if distance > cfg.imaging.search_half_width {
        return Err(Error::TargetNotFound { distance });
    }
    Ok(Localization {
        position: best.position,
        peak: best.amplitude.norm(),
    })
}

/// Localization errors of the three trajectory hypotheses on one trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialOutcome {
    pub oracle: f64,
    pub imu: f64,
    pub ekf: f64,
}

pub fn run_trial(
    cfg: &ExperimentConfig,
    setup: &Setup,
    grid: &ImageGrid,
    snr_db: f64,
    stream: u64,
) -> Result<TrialOutcome> {
    let data = draw_trial(cfg, setup, snr_db, stream)?;
    let truth = &setup.trajectory.positions;
    let af = run_autofocus(
        &data.cube,
        &data.imu.estimate,
        &setup.array,
        grid,
        &cfg.imu_spec(),
        &cfg.autofocus,
    )?;
    let err = |traj: &[Vec3]| -> Result<f64> {
        let loc = localize_target(cfg, &data.cube, traj, &setup.array, &setup.target)?;
        Ok((loc.position - setup.target).norm())
    };
    Ok(TrialOutcome {
        oracle: err(truth)?,
        imu: err(&data.imu.estimate)?,
        ekf: err(&af.corrected)?,
    })
}

/// Aggregated Monte Carlo result at one SNR.
#[derive(Debug, Clone, PartialEq)]
pub struct RmseRecord {
    pub snr_db: f64,
    pub rmse_oracle_af: f64,
    pub rmse_imu_af: f64,
    pub rmse_ekf_af: f64,
    /// Known-aperture bound for the estimator's array.
    pub sqrt_crb: f64,
    /// Bayesian bound for the estimator's array.
    pub sqrt_bcrb: f64,
    /// Single-antenna bounds.
    pub sqrt_crb_single: f64,
    pub sqrt_bcrb_single: f64,
    pub trials: usize,
    pub failures: usize,
    /// 95% confidence half-widths (delta method on the mean squared error).
    pub ci_oracle: f64,
    pub ci_imu: f64,
    pub ci_ekf: f64,
}

/// RMSE and its 95% half-width.
pub fn rmse_with_ci(errors: &[f64]) -> (f64, f64) {
    let n = errors.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let sq: Vec<f64> = errors.iter().map(|e| e * e).collect();
    let mse = sq.iter().sum::<f64>() / n as f64;
    let rmse = mse.sqrt();
    if n < 2 || rmse == 0.0 {
        return (rmse, 0.0);
    }
    let var = sq.iter().map(|s| (s - mse).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se_mse = (var / n as f64).sqrt();
    (rmse, 1.96 * se_mse / (2.0 * rmse))
}

fn sweep_bound(
    cfg: &ExperimentConfig,
    setup: &Setup,
    array: ArrayGeometry,
    snr_db: f64,
) -> Result<(f64, f64)> {
    let model = MeanModel::with_array(
        setup.target_alpha,
        setup.target,
        setup.trajectory.positions.clone(),
        array,
        cfg.radio,
    )?;
    let prior = error_covariance(&cfg.imu_spec(), setup.trajectory.len())?;
    let report = bound_at_snr(&model, &prior, snr_db)?;
    Ok((report.sqrt_trace_crb(), report.sqrt_trace_bcrb()))
}

fn map_trials<T: Send, F>(jobs: &[(usize, usize)], f: F) -> Vec<T>
where
    F: Fn(usize, usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        jobs.par_iter().map(|&(i, t)| f(i, t)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        jobs.iter().map(|&(i, t)| f(i, t)).collect()
    }
}

/// Localization RMSE of Oracle-, IMU- and EKF-autofocus versus SNR.
///
/// Trial `t` uses RNG stream `t` at every SNR, so the three estimators share
/// noise and IMU draws within a trial and curves are paired across SNR.
pub fn run_rmse_vs_snr(cfg: &ExperimentConfig) -> Result<Vec<RmseRecord>> {
    let setup = Setup::new(cfg)?;
    let grid = detection_grid(cfg)?;
    let trials = cfg.sweep.trials;
    let jobs: Vec<(usize, usize)> = (0..cfg.sweep.snr_db.len())
        .flat_map(|i| (0..trials).map(move |t| (i, t)))
        .collect();
    let results = map_trials(&jobs, |i, t| {
        run_trial(cfg, &setup, &grid, cfg.sweep.snr_db[i], t as u64)
    });

    let mut out = Vec::with_capacity(cfg.sweep.snr_db.len());
    for (i, &snr) in cfg.sweep.snr_db.iter().enumerate() {
        let slice = &results[i * trials..(i + 1) * trials];
        let ok: Vec<TrialOutcome> = slice
            .iter()
            .filter_map(|r| r.as_ref().ok().copied())
            .collect();
        let failures = trials - ok.len();
        if failures as f64 > cfg.sweep.max_failure_fraction * trials as f64 {
            return Err(Error::TooManyFailures {
                failed: failures,
                total: trials,
            });
        }
        let (ro, co) = rmse_with_ci(&ok.iter().map(|o| o.oracle).collect::<Vec<_>>());
        let (ri, ci) = rmse_with_ci(&ok.iter().map(|o| o.imu).collect::<Vec<_>>());
        let (re, ce) = rmse_with_ci(&ok.iter().map(|o| o.ekf).collect::<Vec<_>>());
        let (crb, bcrb) = sweep_bound(cfg, &setup, setup.array.clone(), snr)?;
        let (crb1, bcrb1) = sweep_bound(cfg, &setup, ArrayGeometry::single(), snr)?;
        out.push(RmseRecord {
            snr_db: snr,
            rmse_oracle_af: ro,
            rmse_imu_af: ri,
            rmse_ekf_af: re,
            sqrt_crb: crb,
            sqrt_bcrb: bcrb,
            sqrt_crb_single: crb1,
            sqrt_bcrb_single: bcrb1,
            trials: ok.len(),
            failures,
            ci_oracle: co,
            ci_imu: ci,
            ci_ekf: ce,
        });
    }
    Ok(out)
}

pub fn write_rmse_csv<W: Write + ?Sized>(records: &[RmseRecord], w: &mut W) -> Result<()> {
    writeln!(
        w,
        "snr_db,rmse_oracle_af,rmse_imu_af,rmse_ekf_af,sqrt_crb,sqrt_bcrb,sqrt_crb_single,sqrt_bcrb_single,trials,failures,ci_oracle_af,ci_imu_af,ci_ekf_af"
    )?;
    for r in records {
        writeln!(
            w,
            "{:.3},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{},{},{:.3e},{:.3e},{:.3e}",
            r.snr_db,
            r.rmse_oracle_af,
            r.rmse_imu_af,
            r.rmse_ekf_af,
            r.sqrt_crb,
            r.sqrt_bcrb,
            r.sqrt_crb_single,
            r.sqrt_bcrb_single,
            r.trials,
            r.failures,
            r.ci_oracle,
            r.ci_imu,
            r.ci_ekf
        )?;
    }
    Ok(())
}

/// sqrt-trace CRB and BCRB of the configured bound model over `bounds.snr_db`.
pub fn bounds_table(cfg: &ExperimentConfig) -> Result<Vec<BoundRow>> {
    let setup = Setup::new(cfg)?;
    let array = if cfg.bounds.elements == 1 {
        ArrayGeometry::single()
    } else {
        setup.array.clone()
    };
    let model = MeanModel::with_array(
        setup.target_alpha,
        setup.target,
        setup.trajectory.positions.clone(),
        array,
        cfg.radio,
    )?;
    let prior = error_covariance(&cfg.imu_spec(), setup.trajectory.len())?;
    cfg.bounds
        .snr_db
        .iter()
        .map(|&snr| {
            Ok(BoundRow::from_report(
                snr,
                &bound_at_snr(&model, &prior, snr)?,
            ))
        })
        .collect()
}

/// Baseline, MPE-limit and proposed EIRP versus distance, one proposed curve
/// per aperture, with the range std taken from the Bayesian bound at
/// `eirp.snr_db` for a target straight ahead of the aperture centre.
pub fn run_eirp_vs_distance(cfg: &ExperimentConfig) -> Result<Vec<EirpPoint>> {
    cfg.validate()?;
    let e = &cfg.eirp;
    let steps = ((e.r_max - e.r_min) / e.r_step + 1e-9).floor() as usize + 1;
    let distances: Vec<f64> = (0..steps).map(|i| e.r_min + i as f64 * e.r_step).collect();
    let array = cfg.array_geometry();
    let alpha = cfg.scene.build(0.0).amplitudes(&cfg.radio)[0];
    let mut variances = vec![vec![0.0; distances.len()]; cfg.trajectory.apertures.len()];
    for (a, &aperture) in cfg.trajectory.apertures.iter().enumerate() {
        let traj = generate_trajectory(
            cfg.trajectory.kind,
            aperture,
            &cfg.radio,
            cfg.trajectory.interval,
        )?;
        let prior = error_covariance(&cfg.imu_spec(), traj.len())?;
        let centre = traj.centroid();
        let rows: Vec<Result<f64>> = map_trials(
            &distances
                .iter()
                .enumerate()
                .map(|(i, _)| (i, 0))
                .collect::<Vec<_>>(),
            |i, _| {
                let target = centre + Vec3::new(0.0, distances[i], 0.0);
                let model = MeanModel::with_array(
                    alpha,
                    target,
                    traj.positions.clone(),
                    array.clone(),
                    cfg.radio,
                )?;
                let report = bound_at_snr(&model, &prior, e.snr_db)?;
                Ok(range_variance(&report.bcrb, &centre, &target))
            },
        );
        for (i, v) in rows.into_iter().enumerate() {
            variances[a][i] = v?;
        }
    }
    distances
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            Ok(EirpPoint {
                r,
                baseline: eirp_baseline(r, &cfg.policy),
                mpe: eirp_mpe_limit(r, cfg.policy.s_lim)?,
                proposed: variances
                    .iter()
                    .map(|v| eirp_proposed(r, v[i], &cfg.policy))
                    .collect(),
            })
        })
        .collect()
}

/// Paired trajectory/image comparison on one seeded draw.
#[derive(Debug, Clone)]
pub struct ImagingDemo {
    pub truth: Vec<Vec3>,
    pub imu: Vec<Vec3>,
    pub autofocus: AutofocusResult,
    pub oracle_image: ImageGrid,
    pub imu_image: ImageGrid,
    pub ekf_image: ImageGrid,
    pub oracle_error: f64,
    pub imu_error: f64,
    pub ekf_error: f64,
    pub targets: Vec<Vec3>,
}

impl ImagingDemo {
    pub fn max_deviation(path: &[Vec3], truth: &[Vec3]) -> f64 {
        path.iter()
            .zip(truth)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

pub fn run_imaging_demo(cfg: &ExperimentConfig) -> Result<ImagingDemo> {
    let setup = Setup::new(cfg)?;
    let grid = scene_grid(cfg)?;
    let data = draw_trial(cfg, &setup, cfg.sweep.imaging_snr_db, 0)?;
    let af = run_autofocus(
        &data.cube,
        &data.imu.estimate,
        &setup.array,
        &detection_grid(cfg)?,
        &cfg.imu_spec(),
        &cfg.autofocus,
    )?;
    let truth = setup.trajectory.positions.clone();
    let w = cfg.imaging.window;
    let image = |traj: &[Vec3]| backproject(&data.cube, traj, &setup.array, &grid, w);
    let err = |traj: &[Vec3]| -> Result<f64> {
        Ok(
            (localize_target(cfg, &data.cube, traj, &setup.array, &setup.target)?.position
                - setup.target)
                .norm(),
        )
    };
    Ok(ImagingDemo {
        oracle_image: image(&truth)?,
        imu_image: image(&data.imu.estimate)?,
        ekf_image: image(&af.corrected)?,
        oracle_error: err(&truth)?,
        imu_error: err(&data.imu.estimate)?,
        ekf_error: err(&af.corrected)?,
        truth,
        imu: data.imu.estimate,
        autofocus: af,
        targets: cfg
            .scene
            .scatterers
            .iter()
            .map(|s| Vec3::from(s.position))
            .collect(),
    })
}

fn metadata(cfg: &ExperimentConfig) -> Metadata {
    let mut m = Metadata::new(&cfg.hash(), cfg.seed);
    m.push("aperture_m", cfg.trajectory.aperture)
        .push("interval_s", cfg.trajectory.interval)
        .push("imu", format!("{:?}", cfg.imu.preset).to_lowercase());
    m
}

pub fn write_rmse_sweep(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let records = run_rmse_vs_snr(cfg)?;
    let mut meta = metadata(cfg);
    meta.push("trials_per_point", cfg.sweep.trials).push(
        "estimator",
        "backprojection coarse search + continuous peak refinement",
    );
    Ok(vec![write_csv_file(dir, "rmse_vs_snr.csv", &meta, |w| {
        write_rmse_csv(&records, w)
    })?])
}

pub fn write_eirp_curves(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let points = run_eirp_vs_distance(cfg)?;
    let mut meta = metadata(cfg);
    meta.push("eirp_snr_db", cfg.eirp.snr_db)
        .push(
            "eirp_max_dbm",
            crate::exposure::watts_to_dbm(cfg.policy.eirp_max),
        )
        .push(
            "eirp_base_dbm",
            crate::exposure::watts_to_dbm(cfg.policy.eirp_base()),
        )
        .push("k", cfg.policy.k);
    Ok(vec![write_csv_file(
        dir,
        "eirp_vs_distance.csv",
        &meta,
        |w| write_eirp_csv(&cfg.trajectory.apertures, &points, w),
    )?])
}

pub fn write_bounds_table(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = bounds_table(cfg)?;
    let mut meta = metadata(cfg);
    meta.push("bound_elements", cfg.bounds.elements);
    Ok(vec![write_csv_file(dir, "bounds.csv", &meta, |w| {
        write_bound_csv(&rows, w)
    })?])
}

pub fn write_imaging_demo(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let demo = run_imaging_demo(cfg)?;
    let mut meta = metadata(cfg);
    meta.push("imaging_snr_db", cfg.sweep.imaging_snr_db);
    let mut files = Vec::new();
    files.push(write_csv_file(dir, "trajectories.csv", &meta, |w| {
        writeln!(
            w,
            "m,true_x,true_y,true_z,imu_x,imu_y,imu_z,ekf_x,ekf_y,ekf_z"
        )?;
        for (m, ((t, i), e)) in demo
            .truth
            .iter()
            .zip(&demo.imu)
            .zip(&demo.autofocus.corrected)
            .enumerate()
        {
            writeln!(
                w,
                "{m},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
                t.x, t.y, t.z, i.x, i.y, i.z, e.x, e.y, e.z
            )?;
        }
        Ok(())
    })?);
    files.push(write_csv_file(dir, "targets.csv", &meta, |w| {
        writeln!(w, "x,y,z,calibration")?;
        for t in &demo.targets {
            writeln!(w, "{:.6},{:.6},{:.6},0", t.x, t.y, t.z)?;
        }
        for c in demo.autofocus.calib.iter().map(|c| c.position) {
            writeln!(w, "{:.6},{:.6},{:.6},1", c.x, c.y, c.z)?;
        }
        Ok(())
    })?);
    let truth_errors: Vec<Vec3> = demo
        .imu
        .iter()
        .zip(&demo.truth)
        .map(|(a, b)| a - b)
        .collect();
    files.push(write_csv_file(dir, "ekf_diagnostics.csv", &meta, |w| {
        demo.autofocus.write_diagnostics(Some(&truth_errors), w)
    })?);
    for (name, image) in [
        ("oracle", &demo.oracle_image),
        ("imu", &demo.imu_image),
        ("ekf", &demo.ekf_image),
    ] {
        files.push(write_csv_file(
            dir,
            &format!("image_{name}.csv"),
            &meta,
            |w| image.write_csv(w),
        )?);
        files.push(write_file(dir, &format!("image_{name}.pgm"), |w| {
            image.write_pgm(cfg.imaging.dynamic_range_db, w)
        })?);
    }
    files.push(write_csv_file(dir, "imaging_summary.csv", &meta, |w| {
        writeln!(
            w,
            "variant,peak_magnitude,localization_error_m,max_path_deviation_m"
        )?;
        let rows = [
            ("oracle", &demo.oracle_image, demo.oracle_error, 0.0),
            (
                "imu",
                &demo.imu_image,
                demo.imu_error,
                ImagingDemo::max_deviation(&demo.imu, &demo.truth),
            ),
            (
                "ekf",
                &demo.ekf_image,
                demo.ekf_error,
                ImagingDemo::max_deviation(&demo.autofocus.corrected, &demo.truth),
            ),
        ];
        for (name, image, err, dev) in rows {
            writeln!(
                w,
                "{name},{:.9e},{:.9e},{:.9e}",
                image.peak_magnitude(),
                err,
                dev
            )?;
        }
        Ok(())
    })?);
    Ok(files)
}

/// Fast internal consistency checks; each entry is (name, passed, detail).
pub fn selftest() -> Vec<(String, bool, String)> {
    let mut out = Vec::new();
    let cfg = crate::waveform::RadioConfig::default();
    let mut check = |name: &str, ok: bool, detail: String| out.push((name.to_string(), ok, detail));

    let k = cfg.subcarriers;
    let s0 = crate::waveform::dirichlet_kernel(0.0, k);
    check(
        "dirichlet_peak",
        (s0 - 1.0).abs() < 1e-12,
        format!("S(0)={s0}"),
    );

    let alpha = Complex64::new(1.0, 0.0);
    let r = 0.2777;
    let z = crate::waveform::point_profile(alpha, r, &cfg);
    let v = crate::imaging::interpolate_profile(&z, cfg.delay_bin(r), k).unwrap_or_default();
    let expect = alpha / (r * r) * Complex64::from_polar(1.0, -cfg.wavenumber() * r);
    let rel = (v - expect).norm() / expect.norm();
    check(
        "profile_interpolation",
        rel < 1e-9,
        format!("relative error {rel:.2e}"),
    );

    let spec = crate::trajectory::ImuSpec::consumer(0.02);
    let detail = match error_covariance(&spec, 20)
        .and_then(|p| Ok((p.temporal().clone(), p.temporal_precision()?)))
    {
        Ok((c, p)) => {
            let e = (c * p - nalgebra::DMatrix::<f64>::identity(19, 19))
                .abs()
                .max();
            (e < 1e-6, format!("max |C P - I| = {e:.2e}"))
        }
        Err(e) => (false, e.to_string()),
    };
    check("prior_precision", detail.0, detail.1);

    let mut state = crate::autofocus::EkfState::initial(&spec);
    for _ in 0..200 {
        state = crate::autofocus::predict(
            &state,
            &spec,
            crate::trajectory::IntegrationScheme::Rectangle,
        );
    }
    let min = state.min_eigenvalue();
    check(
        "ekf_covariance_psd",
        min >= -1e-10 * state.cov.trace(),
        format!("min eigenvalue {min:.2e}"),
    );

    let policy = crate::exposure::MpePolicy::default();
    let a = eirp_proposed(0.10, 1e-4, &policy);
    let b = eirp_proposed(0.12, 1e-4, &policy);
    check(
        "policy_monotone",
        b >= a && b <= policy.eirp_max,
        format!("{a:.4} W -> {b:.4} W"),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.sweep.trials = 2;
        c.sweep.snr_db = vec![20.0];
        c.trajectory.aperture = 0.03;
        c
    }

    #[test]
    fn rmse_ci_basic() {
        let (r, ci) = rmse_with_ci(&[3.0, 4.0]);
        assert!((r - 12.5f64.sqrt()).abs() < 1e-12);
        assert!(ci > 0.0);
        assert_eq!(rmse_with_ci(&[0.0, 0.0]), (0.0, 0.0));
    }

    #[test]
    fn perfect_imu_estimators_coincide() {
        let mut c = quick();
        c.imu.preset = crate::config::ImuPreset::Perfect;
        let rec = run_rmse_vs_snr(&c).unwrap();
        assert_eq!(rec.len(), 1);
        let r = &rec[0];
        // the integrated IMU path equals the truth up to rounding
        assert!(
            (r.rmse_imu_af - r.rmse_oracle_af).abs() <= 1e-3 * r.rmse_oracle_af,
            "{r:?}"
        );
        assert!(
            (r.rmse_ekf_af - r.rmse_oracle_af).abs() < 1e-4 + 0.1 * r.rmse_oracle_af,
            "{r:?}"
        );
    }

    #[test]
    fn selftest_passes() {
        for (name, ok, detail) in selftest() {
            assert!(ok, "{name}: {detail}");
        }
    }
}
