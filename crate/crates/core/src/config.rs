//! TOML experiment configuration. Every field has a default, so an empty
//! file is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autofocus::AutofocusOptions;
use crate::exposure::MpePolicy;
use crate::trajectory::{ImuSpec, IntegrationScheme, TrajectoryKind};
use crate::waveform::{
    ArrayGeometry, LinkBudget, RadioConfig, Scatterer, Scene, SelfInterferenceMode,
};
use crate::{Complex64, Error, Result, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScattererConfig {
    pub position: [f64; 3],
    /// Radar cross-section (m²).
    pub rcs: f64,
    pub cross_pol: f64,
    /// Reflection phase (rad).
    pub phase: f64,
}

impl Default for ScattererConfig {
    fn default() -> Self {
        Self {
            position: [0.0, 0.25, 0.0],
            rcs: 0.01,
            cross_pol: 1.0,
            phase: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// The first scatterer is the localization target.
    pub scatterers: Vec<ScattererConfig>,
    /// Residual self-interference γ as `[re, im]`.
    pub self_interference: [f64; 2],
    pub self_interference_mode: SelfInterferenceMode,
    pub link: LinkBudget,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let at = |range: f64, bearing_deg: f64, phase: f64| {
            let b = bearing_deg.to_radians();
            ScattererConfig {
                position: [range * b.sin(), range * b.cos(), 0.0],
                phase,
                ..ScattererConfig::default()
            }
        };
        Self {
            scatterers: vec![
                at(0.25, 0.0, 0.0),
                at(0.18, -35.0, 1.1),
                at(0.32, 35.0, -2.0),
            ],
            self_interference: [0.0, 0.0],
            self_interference_mode: SelfInterferenceMode::Oracle,
            link: LinkBudget::default(),
        }
    }
}

impl SceneConfig {
    pub fn scatterers(&self) -> Vec<Scatterer> {
        self.scatterers
            .iter()
            .map(|s| {
                Scatterer::new(Vec3::from(s.position), s.rcs)
                    .with_cross_pol(s.cross_pol)
                    .with_phase(s.phase)
            })
            .collect()
    }

    pub fn target(&self) -> Result<Vec3> {
        self.scatterers
            .first()
            .map(|s| Vec3::from(s.position))
            .ok_or_else(|| Error::Config("scene needs at least one scatterer".into()))
    }

    pub fn build(&self, noise_power: f64) -> Scene {
        Scene {
            scatterers: self.scatterers(),
            link: self.link,
            self_interference: Complex64::new(self.self_interference[0], self.self_interference[1]),
            noise_power,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImuPreset {
    Consumer,
    HighGrade,
    Perfect,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImuConfig {
    pub preset: ImuPreset,
    /// Used with the `custom` preset (m/s²).
    pub accel_noise: f64,
    pub bias_std: f64,
    pub scheme: IntegrationScheme,
}

impl Default for ImuConfig {
    fn default() -> Self {
        Self {
            preset: ImuPreset::Consumer,
            accel_noise: 5e-2,
            bias_std: 2e-2,
            scheme: IntegrationScheme::Rectangle,
        }
    }
}

impl ImuConfig {
    pub fn spec(&self, interval: f64) -> ImuSpec {
        match self.preset {
            ImuPreset::Consumer => ImuSpec::consumer(interval),
            ImuPreset::HighGrade => ImuSpec::high_grade(interval),
            ImuPreset::Perfect => ImuSpec::perfect(interval),
            ImuPreset::Custom => ImuSpec {
                accel_noise: self.accel_noise,
                bias_std: self.bias_std,
                interval,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub kind: TrajectoryKind,
    /// Aperture length for the RMSE sweep and imaging demo (m).
    pub aperture: f64,
    /// Apertures compared in the EIRP curves (m).
    pub apertures: Vec<f64>,
    /// Slow-time interval T (s).
    pub interval: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            kind: TrajectoryKind::default(),
            aperture: 0.05,
            apertures: vec![0.005, 0.05, 0.5],
            interval: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArrayLayout {
    Single,
    /// 2×2 in the x–z plane.
    Planar2x2,
    LinearX,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArrayConfig {
    pub layout: ArrayLayout,
    /// Element count for `linear-x`.
    pub elements: usize,
    /// Element spacing as a fraction of the wavelength.
    pub spacing_wavelengths: f64,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        Self {
            layout: ArrayLayout::Planar2x2,
            elements: 4,
            spacing_wavelengths: 0.5,
        }
    }
}

impl ArrayConfig {
    pub fn build(&self, cfg: &RadioConfig) -> ArrayGeometry {
        let d = self.spacing_wavelengths * cfg.wavelength();
        match self.layout {
            ArrayLayout::Single => ArrayGeometry::single(),
            ArrayLayout::Planar2x2 => ArrayGeometry::planar_2x2(d),
            ArrayLayout::LinearX => ArrayGeometry::linear_x(self.elements, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImagingConfig {
    /// Grid spacing as a fraction of the wavelength.
    pub spacing_wavelengths: f64,
    /// Half-widths of the scene image in x and y (m).
    pub half_extent: [f64; 2],
    /// Centre of the scene image (m).
    pub centre: [f64; 3],
    /// Spacing of the detection images that seed joint refinement, in wavelengths.
    pub detection_spacing_wavelengths: f64,
    /// Point scatterers fitted jointly when localizing the target.
    pub scatterers: usize,
    /// Alternating refinement passes of the joint fit.
    pub sweeps: usize,
    /// Largest accepted distance between the expected target and its estimate (m).
    pub search_half_width: f64,
    /// Interpolation taps for images.
    pub window: usize,
    /// PGM dynamic range (dB).
    pub dynamic_range_db: f64,
}

impl Default for ImagingConfig {
    fn default() -> Self {
        Self {
            spacing_wavelengths: 0.25,
            half_extent: [0.25, 0.12],
            centre: [0.0, 0.25, 0.0],
            detection_spacing_wavelengths: 1.0,
            scatterers: 3,
            sweeps: 2,
            search_half_width: 0.04,
            window: crate::imaging::DEFAULT_WINDOW,
            dynamic_range_db: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub snr_db: Vec<f64>,
    pub trials: usize,
    /// Per-subcarrier SNR for the imaging demo (dB).
    pub imaging_snr_db: f64,
    /// Abort when more than this fraction of trials fail.
    pub max_failure_fraction: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            snr_db: vec![-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            trials: 100,
            imaging_snr_db: 10.0,
            max_failure_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsConfig {
    /// SNR grid of the bound table (dB).
    pub snr_db: Vec<f64>,
    /// Elements in the bound model (1 = single antenna).
    pub elements: usize,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            snr_db: (0..=10).map(|i| i as f64 * 5.0).collect(),
            elements: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EirpConfig {
    pub snr_db: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub r_step: f64,
}

impl Default for EirpConfig {
    fn default() -> Self {
        Self {
            snr_db: 5.0,
            r_min: 0.025,
            r_max: 0.60,
            r_step: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub radio: RadioConfig,
    pub policy: MpePolicy,
    pub scene: SceneConfig,
    pub trajectory: TrajectoryConfig,
    pub imu: ImuConfig,
    pub array: ArrayConfig,
    pub imaging: ImagingConfig,
    pub autofocus: AutofocusOptions,
    pub sweep: SweepConfig,
    pub bounds: BoundsConfig,
    pub eirp: EirpConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            radio: RadioConfig::default(),
            policy: MpePolicy::default(),
            scene: SceneConfig::default(),
            trajectory: TrajectoryConfig::default(),
            imu: ImuConfig::default(),
            array: ArrayConfig::default(),
            imaging: ImagingConfig::default(),
            autofocus: AutofocusOptions::default(),
            sweep: SweepConfig::default(),
            bounds: BoundsConfig::default(),
            eirp: EirpConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.radio.validate()?;
        self.policy.validate()?;
        if self.scene.scatterers.is_empty() {
            return Err(Error::Config("scene needs at least one scatterer".into()));
        }
        if self.sweep.trials == 0 {
            return Err(Error::Config("trial count must be >= 1".into()));
        }
        if self.sweep.snr_db.is_empty() || self.bounds.snr_db.is_empty() {
            return Err(Error::Config("SNR grid must be nonempty".into()));
        }
        if !(self.trajectory.aperture > 0.0 && self.trajectory.interval > 0.0) {
            return Err(Error::Config(
                "aperture and interval must be positive".into(),
            ));
        }
        if self.trajectory.apertures.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::Config("apertures must be positive".into()));
        }
        if self.bounds.elements == 0 || self.array.elements == 0 {
            return Err(Error::Config("element counts must be >= 1".into()));
        }
        if !(self.imaging.spacing_wavelengths > 0.0
            && self.imaging.detection_spacing_wavelengths > 0.0)
        {
            return Err(Error::Config("imaging spacing must be positive".into()));
        }
        if self.imaging.scatterers == 0 || self.autofocus.calibration_points == 0 {
            return Err(Error::Config(
                "scatterer and calibration counts must be >= 1".into(),
            ));
        }
        if !(self.eirp.r_min > 0.0 && self.eirp.r_max >= self.eirp.r_min && self.eirp.r_step > 0.0)
        {
            return Err(Error::Config("EIRP distance grid is invalid".into()));
        }
        self.imu.spec(self.trajectory.interval).validate()
    }

    /// Hex SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> String {
        let text = self.to_toml_string().unwrap_or_default();
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn imu_spec(&self) -> ImuSpec {
        self.imu.spec(self.trajectory.interval)
    }

    pub fn array_geometry(&self) -> ArrayGeometry {
        self.array.build(&self.radio)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.radio.carrier_hz, 28e9);
        assert_eq!(c.radio.bandwidth_hz, 200e6);
        assert_eq!(c.policy.s_lim, 10.0);
        assert_eq!(c.policy.r_s, 0.025);
    }

    #[test]
    fn round_trip_and_hash() {
        let c = ExperimentConfig::default();
        let text = c.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut d = c.clone();
        d.seed += 1;
        assert_ne!(d.hash(), c.hash());
    }

    #[test]
    fn nested_overrides() {
        let c = ExperimentConfig::from_toml_str(
            r#"
            seed = 7
            [imu]
            preset = "high-grade"
            [trajectory]
            aperture = 0.1
            kind = { kind = "arc", radius = 0.4 }
            [sweep]
            snr_db = [0.0]
            trials = 2
            "#,
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.imu_spec().accel_noise, 5e-3);
        assert_eq!(c.trajectory.kind, TrajectoryKind::Arc { radius: 0.4 });
        assert_eq!(c.sweep.trials, 2);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ExperimentConfig::from_toml_str("[sweep]\ntrials = 0").is_err());
        assert!(ExperimentConfig::from_toml_str("[sweep]\nsnr_db = []").is_err());
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml_str("[policy]\nr_s = 0.7").is_err());
    }
}
