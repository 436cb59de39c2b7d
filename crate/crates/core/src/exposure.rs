//! Distance-aware EIRP control under a power-density exposure limit.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Vec3};

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * (w * 1e3).log10()
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0) * 1e-3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpePolicy {
    /// Power-density limit S_lim (W/m²).
    pub s_lim: f64,
    /// Certification distance r_s (m).
    pub r_s: f64,
    /// Off-body threshold r_off (m).
    pub r_off: f64,
    /// EIRP ceiling (W).
    pub eirp_max: f64,
    /// Guard multiplier on the range std.
    pub k: f64,
    /// Fixed handheld baseline EIRP (W); `None` uses `4π S_lim r_s²`.
    pub eirp_base_override: Option<f64>,
}

impl Default for MpePolicy {
    fn default() -> Self {
        Self {
            s_lim: 10.0,
            r_s: 0.025,
            r_off: 0.5,
            eirp_max: dbm_to_watts(34.0),
            k: 2.58,
            eirp_base_override: Some(dbm_to_watts(25.0)),
        }
    }
}

impl MpePolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_lim > 0.0) {
            return Err(Error::InvalidParameter("S_lim must be positive".into()));
        }
        if !(self.r_s > 0.0 && self.r_s < self.r_off) {
            return Err(Error::InvalidParameter("need 0 < r_s < r_off".into()));
        }
        if !(self.k >= 0.0) {
            return Err(Error::InvalidParameter("k must be >= 0".into()));
        }
        if !(self.eirp_max > 4.0 * PI * self.s_lim * self.r_s * self.r_s) {
            return Err(Error::InvalidParameter(
                "EIRP_max must exceed the MPE limit at r_s".into(),
            ));
        }
        if let Some(b) = self.eirp_base_override {
            if !(b > 0.0) {
                return Err(Error::InvalidParameter(
                    "baseline override must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    /// Handheld baseline EIRP.
    pub fn eirp_base(&self) -> f64 {
        self.eirp_base_override
            .unwrap_or(4.0 * PI * self.s_lim * self.r_s * self.r_s)
    }
}

/// Inverse-square compliant EIRP `4π S_lim r²`.
pub fn eirp_mpe_limit(r: f64, s_lim: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "distance must be positive, got {r}"
        )));
    }
    Ok(4.0 * PI * s_lim * r * r)
}

/// Baseline policy: constant handheld EIRP up to `r_off`, `EIRP_max` beyond.
pub fn eirp_baseline(r: f64, policy: &MpePolicy) -> f64 {
    if r <= policy.r_off {
        policy.eirp_base()
    } else {
        policy.eirp_max
    }
}

/// `r_eff = max(r̂ − k·√crb_r, 0)`.
pub fn effective_distance(r_hat: f64, crb_r: f64, k: f64) -> f64 {
    (r_hat - k * crb_r.max(0.0).sqrt()).max(0.0)
}

/// `min(4π S_lim r_eff², EIRP_max)`.
pub fn eirp_proposed(r_hat: f64, crb_r: f64, policy: &MpePolicy) -> f64 {
    let r_eff = effective_distance(r_hat, crb_r, policy.k);
    (4.0 * PI * policy.s_lim * r_eff * r_eff).min(policy.eirp_max)
}

/// Range-direction variance `uᵀ B u` along the device-to-target direction.
pub fn range_variance(bound: &Matrix3<f64>, device: &Vec3, target: &Vec3) -> f64 {
    let u = (target - device).normalize();
    (u.transpose() * bound * u)[(0, 0)]
}

/// One distance sample of the EIRP-versus-distance curves.
#[derive(Debug, Clone, PartialEq)]
pub struct EirpPoint {
    pub r: f64,
    pub baseline: f64,
    pub mpe: f64,
    /// Proposed EIRP (W), one entry per aperture.
    pub proposed: Vec<f64>,
}

fn dbm_field(w: f64) -> String {
    if w > 0.0 {
        format!("{:.4}", watts_to_dbm(w))
    } else {
        "-inf".to_string()
    }
}

/// CSV `r_m,eirp_baseline_dbm,eirp_mpe_dbm,eirp_proposed_dbm_a<A>…`.
pub fn write_eirp_csv<W: Write>(apertures: &[f64], points: &[EirpPoint], mut w: W) -> Result<()> {
    write!(w, "r_m,eirp_baseline_dbm,eirp_mpe_dbm")?;
    for a in apertures {
        write!(w, ",eirp_proposed_dbm_a{a}")?;
    }
    writeln!(w)?;
    for p in points {
        write!(
            w,
            "{:.4},{},{}",
            p.r,
            dbm_field(p.baseline),
            dbm_field(p.mpe)
        )?;
        for v in &p.proposed {
            write!(w, ",{}", dbm_field(*v))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mpe_limit_values() {
        let a = eirp_mpe_limit(0.025, 10.0).unwrap();
        assert!((a - 7.854e-2).abs() < 1e-5);
        assert!((watts_to_dbm(a) - 18.95).abs() < 0.01);
        let b = eirp_mpe_limit(0.05, 10.0).unwrap();
        assert!((b / a - 4.0).abs() < 1e-12);
        let c = eirp_mpe_limit(0.5, 10.0).unwrap();
        assert!((c - 31.42).abs() < 0.01);
        assert!((watts_to_dbm(c) - 44.97).abs() < 0.01);
        assert!(eirp_mpe_limit(0.0, 10.0).is_err());
    }

    #[test]
    fn baseline_branches() {
        let p = MpePolicy::default();
        assert_eq!(eirp_baseline(0.10, &p), p.eirp_base());
        assert_eq!(eirp_baseline(0.5, &p), p.eirp_base());
        assert_eq!(eirp_baseline(0.51, &p), p.eirp_max);
        let formula = MpePolicy {
            eirp_base_override: None,
            ..p
        };
        assert!((watts_to_dbm(formula.eirp_base()) - 18.95).abs() < 0.01);
    }

    #[test]
    fn effective_distance_cases() {
        assert_eq!(effective_distance(0.1, 0.0, 2.58), 0.1);
        assert!((effective_distance(0.10, 1e-4, 2.58) - 0.0742).abs() < 1e-12);
        assert_eq!(effective_distance(0.01, 1e-4, 2.58), 0.0);
        assert_eq!(eirp_proposed(0.01, 1e-4, &MpePolicy::default()), 0.0);
    }

    #[test]
    fn proposed_saturates_and_matches_formula_baseline() {
        let p = MpePolicy::default();
        assert_eq!(eirp_proposed(1.0, 1e-6, &p), p.eirp_max);
        let at_rs = eirp_proposed(p.r_s, 0.0, &p);
        assert!((at_rs - 4.0 * PI * p.s_lim * p.r_s * p.r_s).abs() < 1e-15);
    }

    #[test]
    fn policy_validation() {
        assert!(MpePolicy::default().validate().is_ok());
        let bad = MpePolicy {
            r_s: 0.6,
            ..MpePolicy::default()
        };
        assert!(bad.validate().is_err());
        let low = MpePolicy {
            eirp_max: 0.05,
            ..MpePolicy::default()
        };
        assert!(low.validate().is_err());
    }

    #[test]
    fn range_variance_projection() {
        let b = Matrix3::from_diagonal(&Vec3::new(1.0, 4.0, 9.0));
        let v = range_variance(&b, &Vec3::zeros(), &Vec3::new(0.0, 2.0, 0.0));
        assert!((v - 4.0).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let pts = [EirpPoint {
            r: 0.1,
            baseline: 0.316,
            mpe: 1.2566,
            proposed: vec![0.0, 1.0],
        }];
        let mut buf = Vec::new();
        write_eirp_csv(&[0.005, 0.5], &pts, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let mut lines = s.lines();
        assert_eq!(
            lines.next().unwrap(),
            "r_m,eirp_baseline_dbm,eirp_mpe_dbm,eirp_proposed_dbm_a0.005,eirp_proposed_dbm_a0.5"
        );
        assert!(lines.next().unwrap().ends_with(",-inf,30.0000"));
    }
}
