//! Tabulated model curves: sky polarization degree over the dome, and
//! exit radiance versus reflection angle for three sky polarization states.
//!
//! `sky_polarization.csv` columns:
//! `theta_sun_deg,theta_view_deg,psi_deg,gamma_rad,eta`
//!
//! `water_reflection.csv` columns:
//! `config,theta_deg,e_perp,e_par,difference`, where `config` is one of
//! `unpolarized`, `perpendicular_80`, `parallel_80`, and `difference` is
//! `e_perp - e_par`. Sky intensity is 1 and only the first channel is reported.

use std::f64::consts::FRAC_PI_2;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    exit_radiance, polarization_degree, scattering_angle, split_polarized, FresnelMedia,
    SkyGeometry, WaterColumn, DEFAULT_ETA_MAX,
};
use crate::error::{Error, Result};

pub const SKY_CSV: &str = "sky_polarization.csv";
pub const REFLECTION_CSV: &str = "water_reflection.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurveConfig {
    pub eta_max: f64,
    pub media: FresnelMedia,
    pub column: WaterColumn,
    pub sun_angles_deg: Vec<f64>,
    pub view_step_deg: f64,
    pub psi_step_deg: f64,
    pub theta_step_deg: f64,
    /// Degree of polarization of the polarized reflection configurations.
    pub polarized_degree: f64,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            eta_max: DEFAULT_ETA_MAX,
            media: FresnelMedia::air_to_water(),
            column: WaterColumn::default(),
            sun_angles_deg: vec![0.0, 30.0, 60.0, 90.0],
            view_step_deg: 1.0,
            psi_step_deg: 5.0,
            theta_step_deg: 1.0,
            polarized_degree: 0.8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkyRow {
    pub theta_sun_deg: f64,
    pub theta_view_deg: f64,
    pub psi_deg: f64,
    pub gamma: f64,
    pub eta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SkyPolarization {
    Unpolarized,
    Perpendicular,
    Parallel,
}

impl SkyPolarization {
    pub const ALL: [SkyPolarization; 3] = [
        SkyPolarization::Unpolarized,
        SkyPolarization::Perpendicular,
        SkyPolarization::Parallel,
    ];

    pub fn label(self) -> &'static str {
        match self {
            SkyPolarization::Unpolarized => "unpolarized",
            SkyPolarization::Perpendicular => "perpendicular_80",
            SkyPolarization::Parallel => "parallel_80",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReflectionRow {
    pub config: SkyPolarization,
    pub theta_deg: f64,
    pub e_perp: f64,
    pub e_par: f64,
}

impl ReflectionRow {
    pub fn difference(&self) -> f64 {
        self.e_perp - self.e_par
    }
}

fn steps(end: f64, step: f64) -> impl Iterator<Item = f64> {
    let n = (end / step).round() as usize;
    (0..=n).map(move |i| (i as f64 * step).min(end))
}

pub fn sky_rows(cfg: &CurveConfig) -> Vec<SkyRow> {
    let mut rows = Vec::new();
    for &sun in &cfg.sun_angles_deg {
        for view in steps(90.0, cfg.view_step_deg) {
            for psi in steps(360.0, cfg.psi_step_deg).filter(|&p| p < 360.0) {
                let geom = SkyGeometry {
                    theta_sun: sun.to_radians(),
                    theta_view: view.to_radians(),
                    psi: psi.to_radians(),
                };
                let gamma = scattering_angle(&geom);
                rows.push(SkyRow {
                    theta_sun_deg: sun,
                    theta_view_deg: view,
                    psi_deg: psi,
                    gamma,
                    eta: polarization_degree(gamma, cfg.eta_max),
                });
            }
        }
    }
    rows
}

pub fn reflection_rows(cfg: &CurveConfig) -> Vec<ReflectionRow> {
    let mut rows = Vec::new();
    for config in SkyPolarization::ALL {
        let sky = match config {
            SkyPolarization::Unpolarized => split_polarized([1.0; 3], 0.0, 0.0),
            SkyPolarization::Perpendicular => split_polarized([1.0; 3], cfg.polarized_degree, 0.0),
            SkyPolarization::Parallel => {
                split_polarized([1.0; 3], cfg.polarized_degree, FRAC_PI_2)
            }
        };
        for theta_deg in steps(90.0, cfg.theta_step_deg) {
            let out = exit_radiance(&sky, cfg.media, &cfg.column, theta_deg.to_radians());
            rows.push(ReflectionRow {
                config,
                theta_deg,
                e_perp: out.e_perp[0],
                e_par: out.e_par[0],
            });
        }
    }
    rows
}

/// Writes both curve files into `dir`, returning their paths.
pub fn emit_model_curves(cfg: &CurveConfig, dir: &Path) -> Result<[std::path::PathBuf; 2]> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let sky_path = dir.join(SKY_CSV);
    let mut buf = String::from("theta_sun_deg,theta_view_deg,psi_deg,gamma_rad,eta\n");
    for r in sky_rows(cfg) {
        buf.push_str(&format!(
            "{},{},{},{},{}\n",
            r.theta_sun_deg, r.theta_view_deg, r.psi_deg, r.gamma, r.eta
        ));
    }
    write_file(&sky_path, buf.as_bytes())?;

    let refl_path = dir.join(REFLECTION_CSV);
    let mut buf = String::from("config,theta_deg,e_perp,e_par,difference\n");
    for r in reflection_rows(cfg) {
        buf.push_str(&format!(
            "{},{},{},{},{}\n",
            r.config.label(),
            r.theta_deg,
            r.e_perp,
            r.e_par,
            r.difference()
        ));
    }
    write_file(&refl_path, buf.as_bytes())?;
    Ok([sky_path, refl_path])
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zenith_sun_peaks_at_horizon() {
        let cfg = CurveConfig::default();
        let rows: Vec<_> = sky_rows(&cfg)
            .into_iter()
            .filter(|r| r.theta_sun_deg == 0.0 && r.psi_deg == 0.0)
            .collect();
        let best = rows
            .iter()
            .max_by(|a, b| a.eta.total_cmp(&b.eta))
            .unwrap();
        assert_eq!(best.theta_view_deg, 90.0);
        assert_eq!(best.eta, cfg.eta_max);
    }

    #[test]
    fn normal_incidence_is_symmetric() {
        let rows = reflection_rows(&CurveConfig::default());
        let at_zero = rows
            .iter()
            .find(|r| r.config == SkyPolarization::Unpolarized && r.theta_deg == 0.0)
            .unwrap();
        assert!(at_zero.difference().abs() < 1e-15);
    }

    #[test]
    fn grazing_difference_is_large() {
        let rows = reflection_rows(&CurveConfig::default());
        for config in SkyPolarization::ALL {
            let at = |deg: f64| {
                rows.iter()
                    .find(|r| r.config == config && r.theta_deg == deg)
                    .unwrap()
                    .difference()
                    .abs()
            };
            assert!(at(80.0) > at(30.0), "{config:?}");
        }
    }

    #[test]
    fn writes_headers() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CurveConfig {
            psi_step_deg: 90.0,
            view_step_deg: 45.0,
            ..CurveConfig::default()
        };
        let [sky, refl] = emit_model_curves(&cfg, dir.path()).unwrap();
        let sky = std::fs::read_to_string(sky).unwrap();
        assert!(sky.starts_with("theta_sun_deg,theta_view_deg,psi_deg,gamma_rad,eta\n"));
        assert_eq!(sky.lines().count(), 1 + 4 * 3 * 4);
        let refl = std::fs::read_to_string(refl).unwrap();
        assert_eq!(refl.lines().count(), 1 + 3 * 91);
    }
}
