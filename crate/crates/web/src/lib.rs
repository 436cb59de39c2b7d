//! WebAssembly bindings for the browser demo.
//!
//! Every export returns a flat `Float64Array`; the layouts are documented on
//! the plain-Rust functions, which the native tests call directly.

use isac_core::bounds::{bound_at_snr, MeanModel};
use isac_core::config::{ExperimentConfig, ImuPreset};
use isac_core::experiments::{run_eirp_vs_distance, run_imaging_demo, Setup};
use isac_core::exposure::watts_to_dbm;
use isac_core::imaging::ImageGrid;
use isac_core::trajectory::error_covariance;
use isac_core::waveform::ArrayGeometry;
use wasm_bindgen::prelude::*;

fn preset(grade: &str) -> Result<ImuPreset, String> {
    match grade {
        "consumer" => Ok(ImuPreset::Consumer),
        "high-grade" => Ok(ImuPreset::HighGrade),
        other => Err(format!("unknown IMU grade {other:?}")),
    }
}

/// EIRP curves for one aperture. Layout: rows of
/// `[r_m, baseline_dbm, mpe_dbm, proposed_dbm]`; `-inf` is sent as `NaN`.
pub fn eirp_rows(aperture_m: f64, snr_db: f64, k: f64, grade: &str) -> Result<Vec<f64>, String> {
    let mut cfg = ExperimentConfig::default();
    cfg.trajectory.apertures = vec![aperture_m];
    cfg.eirp.snr_db = snr_db;
    cfg.policy.k = k;
    cfg.imu.preset = preset(grade)?;
    let points = run_eirp_vs_distance(&cfg).map_err(|e| e.to_string())?;
    let dbm = |w: f64| if w > 0.0 { watts_to_dbm(w) } else { f64::NAN };
    Ok(points
        .iter()
        .flat_map(|p| [p.r, dbm(p.baseline), dbm(p.mpe), dbm(p.proposed[0])])
        .collect())
}

/// Position bounds versus SNR. Layout: rows of
/// `[snr_db, sqrt_trace_crb, sqrt_trace_bcrb]` for `snr_db` in `lo..=hi` at 1 dB.
pub fn bound_rows(
    aperture_m: f64,
    elements: usize,
    grade: &str,
    lo: f64,
    hi: f64,
) -> Result<Vec<f64>, String> {
    let mut cfg = ExperimentConfig::default();
    cfg.trajectory.aperture = aperture_m;
    cfg.imu.preset = preset(grade)?;
    let setup = Setup::new(&cfg).map_err(|e| e.to_string())?;
    let array = if elements <= 1 {
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
    )
    .map_err(|e| e.to_string())?;
    let prior =
        error_covariance(&cfg.imu_spec(), setup.trajectory.len()).map_err(|e| e.to_string())?;
    let steps = (hi - lo).max(0.0).round() as usize;
    let mut out = Vec::with_capacity(3 * (steps + 1));
    for i in 0..=steps {
        let snr = lo + i as f64;
        let rep = bound_at_snr(&model, &prior, snr).map_err(|e| e.to_string())?;
        out.extend([snr, rep.sqrt_trace_crb(), rep.sqrt_trace_bcrb()]);
    }
    Ok(out)
}

fn magnitude_db(image: &ImageGrid, reference: f64) -> impl Iterator<Item = f64> + '_ {
    image
        .values
        .iter()
        .map(move |v| 20.0 * (v.norm() / reference).max(1e-12).log10())
}

/// Oracle, raw-IMU and autofocused images of one seeded draw. Layout:
/// `[nx, ny, x0, y0, spacing, peak_oracle, peak_imu, peak_ekf, err_oracle,
/// err_imu, err_ekf, …oracle dB, …imu dB, …ekf dB]`, each image `nx·ny` values
/// row-major in y, normalized to the oracle peak.
pub fn imaging_values(seed: u64, snr_db: f64, grade: &str) -> Result<Vec<f64>, String> {
    let mut cfg = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    cfg.sweep.imaging_snr_db = snr_db;
    cfg.imu.preset = preset(grade)?;
    let demo = run_imaging_demo(&cfg).map_err(|e| e.to_string())?;
    let g = &demo.oracle_image;
    let reference = g.peak_magnitude();
    let mut out = vec![
        g.dims[0] as f64,
        g.dims[1] as f64,
        g.origin.x,
        g.origin.y,
        g.spacing.x,
        reference,
        demo.imu_image.peak_magnitude(),
        demo.ekf_image.peak_magnitude(),
        demo.oracle_error,
        demo.imu_error,
        demo.ekf_error,
    ];
    for image in [&demo.oracle_image, &demo.imu_image, &demo.ekf_image] {
        out.extend(magnitude_db(image, reference));
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn eirp_curve(aperture_m: f64, snr_db: f64, k: f64, grade: &str) -> Result<Vec<f64>, JsError> {
    eirp_rows(aperture_m, snr_db, k, grade).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn bounds_vs_snr(
    aperture_m: f64,
    elements: usize,
    grade: &str,
    lo: f64,
    hi: f64,
) -> Result<Vec<f64>, JsError> {
    bound_rows(aperture_m, elements, grade, lo, hi).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn imaging_demo(seed: u32, snr_db: f64, grade: &str) -> Result<Vec<f64>, JsError> {
    imaging_values(seed as u64, snr_db, grade).map_err(|e| JsError::new(&e))
}
