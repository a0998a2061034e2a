//! Ray-traced synthetic polarized stereo frames with exact ground truth.
//!
//! World axes: X right, Y up, Z forward; the ground is `Y = 0`. The left
//! camera sits at `(x, height, z)`, the right one `baseline` meters along the
//! camera's own x axis. Dry ground is a diffuse value-noise albedo; puddles
//! are flat ellipses that reflect and transmit the Rayleigh sky through the
//! water-column model. The left view looks through a horizontal polarizer,
//! the right through a vertical one.

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::{
    exit_radiance, polarization_degree, split_polarized, ExitRadiance, FresnelMedia, SkyRadiance, WaterColumn,
    DEFAULT_ETA_MAX,
};
use crate::raster::{Grid, Mask};
use crate::stereo::{horizon_line, CameraMeta, GroundPlane, HorizonLine, PolarizedStereoFrame};

/// Peak transmittance of the linear polarizers.
pub const POLARIZER_TRANSMITTANCE: f64 = 0.42;

type V3 = [f64; 3];

#[inline]
fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
fn normalize(a: V3) -> Option<V3> {
    let n = dot(a, a).sqrt();
    (n > 1e-12).then(|| [a[0] / n, a[1] / n, a[2] / n])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSpec {
    pub focal_length: f64,
    /// Defaults to the image center.
    pub principal_point: Option<(f64, f64)>,
    pub baseline: f64,
    pub height: f64,
    /// Downward tilt of the optical axis, degrees.
    pub pitch_deg: f64,
    /// Clockwise roll about the optical axis, degrees.
    pub roll_deg: f64,
    /// Left camera ground position `(x, z)` in meters.
    pub position: (f64, f64),
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            focal_length: CameraMeta::DEFAULT_FOCAL_LENGTH,
            principal_point: None,
            baseline: CameraMeta::DEFAULT_BASELINE,
            height: CameraMeta::DEFAULT_HEIGHT,
            pitch_deg: 0.0,
            roll_deg: 0.0,
            position: (0.0, 0.0),
        }
    }
}

/// How the sky's polarization is set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SkyPolarizationSpec {
    /// Rayleigh degree from the scattering angle, E-vector normal to the
    /// scattering plane.
    Rayleigh,
    /// Fixed degree and E-vector angle measured from the perpendicular to
    /// the plane of incidence at the water (90 = parallel).
    Fixed { degree: f64, direction_deg: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkySpec {
    /// Sun angle from zenith, degrees.
    pub sun_zenith_deg: f64,
    /// Sun azimuth from the world +Z axis toward +X, degrees.
    pub sun_azimuth_deg: f64,
    pub eta_max: f64,
    /// Sky radiance per channel.
    pub radiance: [f64; 3],
    pub polarization: SkyPolarizationSpec,
    /// Modulates the radiance by the Rayleigh phase function
    /// `3/4 (1 + cos^2 gamma)`, brightest toward and away from the sun.
    pub phase: bool,
}

impl Default for SkySpec {
    fn default() -> Self {
        Self {
            sun_zenith_deg: 30.0,
            sun_azimuth_deg: 0.0,
            eta_max: DEFAULT_ETA_MAX,
            radiance: [0.75, 0.9, 1.2],
            polarization: SkyPolarizationSpec::Rayleigh,
            phase: false,
        }
    }
}

/// Value-noise albedo on the ground plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundSpec {
    pub albedo: [f64; 3],
    /// Relative luminance modulation amplitude.
    pub contrast: f64,
    /// Relative per-channel modulation amplitude.
    pub chroma: f64,
    /// Finest lattice cell, meters; each octave doubles it.
    pub cell_m: f64,
    pub octaves: u32,
    /// Diffuse illumination per channel.
    pub irradiance: [f64; 3],
    pub texture_seed: u64,
}

impl Default for GroundSpec {
    fn default() -> Self {
        Self {
            albedo: [0.42, 0.38, 0.33],
            contrast: 0.6,
            chroma: 0.08,
            cell_m: 0.02,
            octaves: 8,
            irradiance: [2.4, 2.35, 2.2],
            texture_seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Puddle {
    /// Ground position `(x, z)` in meters.
    pub center: (f64, f64),
    /// Semi-axes `(along x, along z)` before rotation, meters.
    pub axes: (f64, f64),
    #[serde(default)]
    pub rotation_deg: f64,
    #[serde(default)]
    pub column: WaterColumn,
}

impl Puddle {
    pub fn contains(&self, x: f64, z: f64) -> bool {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (dx, dz) = (x - self.center.0, z - self.center.1);
        let (p, q) = (c * dx + s * dz, -s * dx + c * dz);
        (p / self.axes.0).powi(2) + (q / self.axes.1).powi(2) <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub camera: CameraSpec,
    pub sky: SkySpec,
    pub ground: GroundSpec,
    pub puddles: Vec<Puddle>,
    /// Radiance to 8-bit scale factor.
    pub exposure: f64,
    /// Gaussian pixel noise, 8-bit units.
    pub noise_sigma: f64,
    pub noise_seed: u64,
    /// Samples per pixel side; radiance is box-averaged over the pixel.
    pub supersample: u32,
    /// Atmospheric extinction per meter; ground radiance fades toward an
    /// unpolarized airlight of the mean sky radiance.
    pub haze: f64,
    /// Gaussian lens blur applied to radiance, pixels.
    pub blur_sigma: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 640,
            height: 360,
            camera: CameraSpec {
                focal_length: 360.0,
                ..Default::default()
            },
            sky: SkySpec::default(),
            ground: GroundSpec::default(),
            puddles: Vec::new(),
            exposure: 2.0,
            noise_sigma: 1.0,
            noise_seed: 0,
            supersample: 1,
            haze: 0.0,
            blur_sigma: 0.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::invalid("width/height", "image must be at least 2x2"));
        }
        let cam = &self.camera;
        for (name, v) in [
            ("camera.focal_length", cam.focal_length),
            ("camera.baseline", cam.baseline),
            ("camera.height", cam.height),
            ("exposure", self.exposure),
            ("ground.cell_m", self.ground.cell_m),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if !(-60.0..=60.0).contains(&cam.pitch_deg) {
            return Err(Error::invalid("camera.pitch_deg", "must lie in [-60, 60]"));
        }
        if !(-45.0..=45.0).contains(&cam.roll_deg) {
            return Err(Error::invalid("camera.roll_deg", "must lie in [-45, 45]"));
        }
        if !(0.0..=90.0).contains(&self.sky.sun_zenith_deg) {
            return Err(Error::invalid("sky.sun_zenith_deg", "must lie in [0, 90]"));
        }
        if !(0.0..=1.0).contains(&self.sky.eta_max) {
            return Err(Error::invalid("sky.eta_max", "must lie in [0, 1]"));
        }
        if let SkyPolarizationSpec::Fixed { degree, .. } = self.sky.polarization {
            if !(0.0..=1.0).contains(&degree) {
                return Err(Error::invalid("sky.polarization.degree", "must lie in [0, 1]"));
            }
        }
        if self.sky.radiance.iter().chain(&self.ground.irradiance).any(|&x| !(x >= 0.0)) {
            return Err(Error::invalid("sky.radiance/ground.irradiance", "must be non-negative"));
        }
        if self.ground.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid("ground.albedo", "must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma", "must be non-negative"));
        }
        if !(1..=8).contains(&self.supersample) {
            return Err(Error::invalid("supersample", "must lie in 1..=8"));
        }
        if !(self.haze >= 0.0 && self.haze.is_finite()) {
            return Err(Error::invalid("haze", "must be finite and non-negative"));
        }
        if !(0.0..=10.0).contains(&self.blur_sigma) {
            return Err(Error::invalid("blur_sigma", "must lie in [0, 10]"));
        }
        for (i, p) in self.puddles.iter().enumerate() {
            if !(p.axes.0 > 0.0 && p.axes.1 > 0.0) {
                return Err(Error::invalid(format!("puddles[{i}].axes"), "must be positive"));
            }
            p.column
                .validate()
                .map_err(|e| Error::invalid(format!("puddles[{i}].column"), e.to_string()))?;
        }
        Ok(())
    }

    pub fn principal_point(&self) -> (f64, f64) {
        self.camera
            .principal_point
            .unwrap_or((self.width as f64 / 2.0, self.height as f64 / 2.0))
    }

    pub fn meta(&self) -> CameraMeta {
        CameraMeta {
            focal_length: self.camera.focal_length,
            baseline: self.camera.baseline,
            camera_height: self.camera.height,
            principal_point: self.principal_point(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    Left,
    Right,
}

/// What a camera ray hit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Surface {
    Sky,
    Dry { albedo: [f64; 3] },
    /// `exit` is the light leaving the water before the polarizer.
    Water { exit: ExitRadiance, theta: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub surface: Surface,
    /// Radiance after the view's polarizer.
    pub radiance: [f64; 3],
    /// Depth along the optical axis of the ground hit.
    pub depth: Option<f64>,
    /// Ground hit `(x, z)`.
    pub ground: Option<(f64, f64)>,
}

/// Ray tracer for one scene.
#[derive(Clone, Debug)]
pub struct Renderer {
    spec: SceneSpec,
    /// Camera x, y (up), z axes in world coordinates.
    axes: [V3; 3],
    centers: [V3; 2],
    sun: V3,
    uc: f64,
    vc: f64,
}

impl Renderer {
    pub fn new(spec: &SceneSpec) -> Result<Self> {
        spec.validate()?;
        let (sp, cp) = spec.camera.pitch_deg.to_radians().sin_cos();
        let (sr, cr) = spec.camera.roll_deg.to_radians().sin_cos();
        // camera-to-world rotation: pitch about X (down positive) after roll about Z
        let rot = |v: V3| -> V3 {
            let r = [v[0] * cr + v[1] * sr, -v[0] * sr + v[1] * cr, v[2]];
            [r[0], r[1] * cp - r[2] * sp, r[1] * sp + r[2] * cp]
        };
        let axes = [rot([1.0, 0.0, 0.0]), rot([0.0, 1.0, 0.0]), rot([0.0, 0.0, 1.0])];
        let (x0, z0) = spec.camera.position;
        let left = [x0, spec.camera.height, z0];
        let b = spec.camera.baseline;
        let right = [left[0] + b * axes[0][0], left[1] + b * axes[0][1], left[2] + b * axes[0][2]];
        let (st, ct) = spec.sky.sun_zenith_deg.to_radians().sin_cos();
        let (sa, ca) = spec.sky.sun_azimuth_deg.to_radians().sin_cos();
        let (uc, vc) = spec.principal_point();
        Ok(Self {
            spec: spec.clone(),
            axes,
            centers: [left, right],
            sun: [st * sa, ct, st * ca],
            uc,
            vc,
        })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    /// Unnormalized world ray with unit depth along the optical axis.
    fn ray(&self, u: f64, v: f64) -> V3 {
        let f = self.spec.camera.focal_length;
        let (x, y) = ((u - self.uc) / f, -(v - self.vc) / f);
        let [ax, ay, az] = self.axes;
        std::array::from_fn(|i| x * ax[i] + y * ay[i] + az[i])
    }

    /// Camera-frame upward ground normal; its image-plane components fix the
    /// true disparity plane.
    fn up_in_camera(&self) -> V3 {
        let up = [0.0, 1.0, 0.0];
        [dot(self.axes[0], up), dot(self.axes[1], up), dot(self.axes[2], up)]
    }

    /// Analytic disparity plane `a*u + b*v + c` of the ground.
    pub fn true_plane(&self) -> GroundPlane {
        let n = self.up_in_camera();
        let cam = &self.spec.camera;
        let k = cam.baseline / cam.height;
        // inverse depth: 1/Z = -(n_x x - n_y y + n_z) / h with x = (u-uc)/f, y = (v-vc)/f
        let f = cam.focal_length;
        let a = -k * n[0];
        let b = k * n[1];
        let c = -k * (f * n[2] - n[0] * self.uc + n[1] * self.vc);
        GroundPlane::from_coefficients(a, b, c)
    }

    /// Image area in pixels covered by a puddle, integrating the ground to
    /// image Jacobian `f^2 h / Z^3` over the ellipse (no clipping).
    pub fn projected_area(&self, p: &Puddle) -> f64 {
        let f = self.spec.camera.focal_length;
        let h = self.spec.camera.height;
        let (s, c) = p.rotation_deg.to_radians().sin_cos();
        let steps = 200;
        let cell = 4.0 * p.axes.0 * p.axes.1 / (steps * steps) as f64;
        let mut area = 0.0;
        for i in 0..steps {
            for j in 0..steps {
                let a = (2.0 * (i as f64 + 0.5) / steps as f64 - 1.0) * p.axes.0;
                let b = (2.0 * (j as f64 + 0.5) / steps as f64 - 1.0) * p.axes.1;
                if (a / p.axes.0).powi(2) + (b / p.axes.1).powi(2) > 1.0 {
                    continue;
                }
                let x = p.center.0 + c * a - s * b;
                let z = p.center.1 + s * a + c * b;
                let rel = [x - self.centers[0][0], -self.centers[0][1], z - self.centers[0][2]];
                let depth = dot(rel, self.axes[2]);
                if depth > 0.0 {
                    area += f * f * h / depth.powi(3) * cell;
                }
            }
        }
        area
    }

    /// Fraction of light polarized along `e` that passes the view's filter.
    fn pass_fraction(&self, view: View, d: V3, e: V3) -> f64 {
        let axis = match view {
            View::Left => self.axes[0],
            View::Right => self.axes[1],
        };
        let along = dot(axis, d);
        match normalize(std::array::from_fn(|i| axis[i] - along * d[i])) {
            Some(p) => dot(p, e).powi(2),
            None => 0.5,
        }
    }

    fn albedo(&self, x: f64, z: f64, footprint: f64) -> [f64; 3] {
        let g = &self.spec.ground;
        let mut lum = 0.0;
        let mut chroma = [0.0; 3];
        let mut cell = g.cell_m;
        // equal-weight octaves keep pixel-scale texture at every range
        for o in 0..g.octaves {
            // fade octaves finer than ~2 pixels
            let w = ((cell / footprint - 1.0) / 2.0).clamp(0.0, 1.0);
            if w > 0.0 {
                lum += w * (value_noise(x / cell, z / cell, g.texture_seed, o) - 0.5);
                for (ch, c) in chroma.iter_mut().enumerate() {
                    let salt = 1 + ch as u32;
                    *c += w * (value_noise(x / cell, z / cell, g.texture_seed ^ 0x9e37, o * 7 + salt) - 0.5);
                }
            }
            cell *= 2.0;
        }
        let norm = 2.0 / g.octaves.max(1) as f64;
        std::array::from_fn(|c| {
            (g.albedo[c] * (1.0 + g.contrast * lum * norm + g.chroma * chroma[c] * norm)).clamp(0.0, 1.0)
        })
    }

    /// Koschmieder attenuation over `range` meters, after the polarizer.
    fn attenuate(&self, radiance: [f64; 3], range: f64) -> [f64; 3] {
        if self.spec.haze == 0.0 {
            return radiance;
        }
        let tau = (-self.spec.haze * range).exp();
        let air = self.spec.sky.radiance;
        std::array::from_fn(|c| tau * radiance[c] + (1.0 - tau) * POLARIZER_TRANSMITTANCE * 0.5 * air[c])
    }

    /// Total sky radiance arriving along `-dir_to_sky`.
    fn sky_total(&self, dir_to_sky: V3) -> [f64; 3] {
        let sky = &self.spec.sky;
        if !sky.phase {
            return sky.radiance;
        }
        let cos_gamma = dot(dir_to_sky, self.sun).clamp(-1.0, 1.0);
        let k = 0.75 * (1.0 + cos_gamma * cos_gamma);
        sky.radiance.map(|r| k * r)
    }

    fn sky_light(&self, dir_to_sky: V3, s_axis: Option<V3>) -> SkyRadiance {
        let sky = &self.spec.sky;
        let total = self.sky_total(dir_to_sky);
        match sky.polarization {
            SkyPolarizationSpec::Fixed { degree, direction_deg } => {
                split_polarized(total, degree, direction_deg.to_radians())
            }
            SkyPolarizationSpec::Rayleigh => {
                let gamma = dot(dir_to_sky, self.sun).clamp(-1.0, 1.0).acos();
                let eta = polarization_degree(gamma, sky.eta_max);
                let angle = match (normalize(cross(dir_to_sky, self.sun)), s_axis) {
                    (Some(e), Some(s)) => dot(e, s).abs().min(1.0).acos(),
                    _ => 0.0,
                };
                split_polarized(total, eta, angle)
            }
        }
    }

    /// Traces the ray through pixel `(u, v)` of one view.
    pub fn trace(&self, view: View, u: f64, v: f64) -> Sample {
        let center = self.centers[view as usize];
        let ray = self.ray(u, v);
        let d = normalize(ray).expect("nonzero ray");
        let t_pol = POLARIZER_TRANSMITTANCE;
        if ray[1] >= -1e-12 {
            // sky: scattered light arriving along -d
            let total = self.sky_total(d);
            let (eta, e) = match self.spec.sky.polarization {
                SkyPolarizationSpec::Rayleigh => {
                    let gamma = dot(d, self.sun).clamp(-1.0, 1.0).acos();
                    (polarization_degree(gamma, self.spec.sky.eta_max), normalize(cross(d, self.sun)))
                }
                SkyPolarizationSpec::Fixed { degree, .. } => (degree, Some(self.axes[0])),
            };
            let pass = e.map_or(0.5, |e| self.pass_fraction(view, d, e));
            let radiance = std::array::from_fn(|c| t_pol * total[c] * (0.5 * (1.0 - eta) + eta * pass));
            return Sample { surface: Surface::Sky, radiance, depth: None, ground: None };
        }
        let depth = -center[1] / ray[1];
        let (x, z) = (center[0] + depth * ray[0], center[2] + depth * ray[2]);
        let ground = Some((x, z));
        let cos_theta = -d[1];
        let theta = cos_theta.clamp(-1.0, 1.0).acos();
        if let Some(p) = self.spec.puddles.iter().find(|p| p.contains(x, z)) {
            let up = [0.0, 1.0, 0.0];
            let s_axis = normalize(cross(up, d));
            let reflected = [d[0], -d[1], d[2]];
            let sky = self.sky_light(reflected, s_axis);
            let exit = exit_radiance(&sky, FresnelMedia::air_to_water(), &p.column, theta);
            let c = s_axis.map_or(0.5, |s| self.pass_fraction(view, d, s));
            let radiance = self.attenuate(
                std::array::from_fn(|ch| t_pol * (c * exit.e_perp[ch] + (1.0 - c) * exit.e_par[ch])),
                depth * dot(ray, ray).sqrt(),
            );
            return Sample {
                surface: Surface::Water { exit, theta },
                radiance,
                depth: Some(depth),
                ground,
            };
        }
        let f = self.spec.camera.focal_length;
        // Both views sample a ground row at the same depth, so only the
        // lateral footprint needs band-limiting.
        let lateral = depth * dot(ray, ray).sqrt() / f;
        let albedo = self.albedo(x, z, lateral);
        let irr = self.spec.ground.irradiance;
        let radiance = self.attenuate(
            std::array::from_fn(|c| t_pol * 0.5 * albedo[c] * irr[c]),
            depth * dot(ray, ray).sqrt(),
        );
        Sample { surface: Surface::Dry { albedo }, radiance, depth: Some(depth), ground }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn lattice(ix: i64, iz: i64, seed: u64, octave: u32) -> f64 {
    let h = splitmix(splitmix(splitmix(seed ^ ((octave as u64) << 48)) ^ ix as u64) ^ iz as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smoothly interpolated lattice noise in `[0, 1)`.
fn value_noise(x: f64, z: f64, seed: u64, octave: u32) -> f64 {
    let (fx, fz) = (x.floor(), z.floor());
    let (ix, iz) = (fx as i64, fz as i64);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, tz) = (smooth(x - fx), smooth(z - fz));
    let a = lattice(ix, iz, seed, octave);
    let b = lattice(ix + 1, iz, seed, octave);
    let c = lattice(ix, iz + 1, seed, octave);
    let d = lattice(ix + 1, iz + 1, seed, octave);
    let top = a + (b - a) * tx;
    let bottom = c + (d - c) * tx;
    top + (bottom - top) * tz
}

/// One rendered frame with its ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticFrame {
    pub frame: PolarizedStereoFrame,
    /// Left-view pixels whose ground point lies inside a puddle.
    pub truth: Mask,
    /// `f * B / Z` per left pixel; `None` above the horizon.
    pub disparity: Grid<Option<f64>>,
    pub plane: GroundPlane,
    pub horizon: HorizonLine,
}

fn to_pixels(radiance: &[[f64; 3]], exposure: f64, noise: &mut impl FnMut() -> f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(radiance.len() * 3);
    for r in radiance {
        for &c in r {
            out.push((255.0 * exposure * c + noise()).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// Separable Gaussian with clamped borders.
fn gaussian_blur(img: &[[f64; 3]], w: usize, h: usize, sigma: f64) -> Vec<[f64; 3]> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|x| *x /= sum);
    let pass = |src: &[[f64; 3]], horizontal: bool| -> Vec<[f64; 3]> {
        (0..w * h)
            .into_par_iter()
            .map(|i| {
                let (u, v) = ((i % w) as isize, (i / w) as isize);
                let mut acc = [0.0; 3];
                for (j, &kw) in k.iter().enumerate() {
                    let o = j as isize - r;
                    let (su, sv) = if horizontal {
                        ((u + o).clamp(0, w as isize - 1), v)
                    } else {
                        (u, (v + o).clamp(0, h as isize - 1))
                    };
                    let p = src[sv as usize * w + su as usize];
                    (0..3).for_each(|c| acc[c] += kw * p[c]);
                }
                acc
            })
            .collect()
    };
    pass(&pass(img, true), false)
}

/// Renders both views, the truth mask and the analytic disparity.
pub fn render(spec: &SceneSpec, frame_id: u64) -> Result<SyntheticFrame> {
    let renderer = Renderer::new(spec)?;
    let (w, h) = (spec.width, spec.height);
    let n = spec.supersample.max(1) as usize;
    let offsets: Vec<f64> = (0..n).map(|k| (k as f64 + 0.5) / n as f64 - 0.5).collect();
    let inv = 1.0 / (n * n) as f64;
    let rows: Vec<(Vec<[f64; 3]>, Vec<[f64; 3]>, Vec<bool>, Vec<Option<f64>>)> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut l = Vec::with_capacity(w);
            let mut r = Vec::with_capacity(w);
            let mut truth = Vec::with_capacity(w);
            let mut disp = Vec::with_capacity(w);
            for u in 0..w {
                let (uf, vf) = (u as f64, v as f64);
                // truth and disparity belong to the pixel center
                let s = renderer.trace(View::Left, uf, vf);
                truth.push(matches!(s.surface, Surface::Water { .. }));
                disp.push(s.depth.map(|z| spec.camera.focal_length * spec.camera.baseline / z));
                if n == 1 {
                    l.push(s.radiance);
                    r.push(renderer.trace(View::Right, uf, vf).radiance);
                    continue;
                }
                let (mut sl, mut sr) = ([0.0; 3], [0.0; 3]);
                for &dv in &offsets {
                    for &du in &offsets {
                        let a = renderer.trace(View::Left, uf + du, vf + dv).radiance;
                        let b = renderer.trace(View::Right, uf + du, vf + dv).radiance;
                        (0..3).for_each(|c| {
                            sl[c] += a[c] * inv;
                            sr[c] += b[c] * inv;
                        });
                    }
                }
                l.push(sl);
                r.push(sr);
            }
            (l, r, truth, disp)
        })
        .collect();
    let mut left = Vec::with_capacity(w * h);
    let mut right = Vec::with_capacity(w * h);
    let mut truth = Vec::with_capacity(w * h);
    let mut disparity = Vec::with_capacity(w * h);
    for (l, r, t, d) in rows {
        left.extend(l);
        right.extend(r);
        truth.extend(t);
        disparity.extend(d);
    }
    if spec.blur_sigma > 0.0 {
        left = gaussian_blur(&left, w, h, spec.blur_sigma);
        right = gaussian_blur(&right, w, h, spec.blur_sigma);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
    let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid("noise_sigma", e.to_string()))?;
    let mut noise = || if spec.noise_sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
    let lp = to_pixels(&left, spec.exposure, &mut noise);
    let rp = to_pixels(&right, spec.exposure, &mut noise);
    let left = RgbImage::from_raw(w as u32, h as u32, lp).expect("buffer size");
    let right = RgbImage::from_raw(w as u32, h as u32, rp).expect("buffer size");
    let plane = renderer.true_plane();
    let horizon = horizon_line(&plane, w)?;
    Ok(SyntheticFrame {
        frame: PolarizedStereoFrame::new(left, right, spec.meta(), frame_id)?,
        truth: Grid::from_vec(w, h, truth)?,
        disparity: Grid::from_vec(w, h, disparity)?,
        plane,
        horizon,
    })
}

/// Drives the camera forward `advance` meters per frame; puddles stay put.
/// Frame `i` uses noise seed `noise_seed + i`.
pub fn render_sequence(template: &SceneSpec, n: usize, advance: f64) -> Result<Vec<SyntheticFrame>> {
    if n == 0 {
        return Err(Error::invalid("frames", "must be at least 1"));
    }
    (0..n)
        .map(|i| render(&sequence_spec(template, i, advance), i as u64))
        .collect()
}

/// Spec of frame `i` of a [`render_sequence`] run.
pub fn sequence_spec(template: &SceneSpec, i: usize, advance: f64) -> SceneSpec {
    let mut spec = template.clone();
    spec.camera.position.1 += advance * i as f64;
    spec.noise_seed = template.noise_seed.wrapping_add(i as u64);
    spec
}

#[cfg(test)]
fn mean_abs_diff(a: &RgbImage, b: &image::Rgb32FImage, mask: &Mask) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (u, v, p) in a.enumerate_pixels() {
        if *mask.get(u as usize, v as usize) {
            let q = b.get_pixel(u, v);
            for c in 0..3 {
                sum += (p[c] as f64 / 255.0 - q[c] as f64).abs();
            }
            n += 3;
        }
    }
    sum / n.max(1) as f64
}
