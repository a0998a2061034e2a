//! Shared helpers for the integration tests.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use polarwater::stereo::HorizonLine;
use rand::Rng;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Independent ground-view geometry by explicit ray casting in world space.
///
/// World: X right, Y up, Z forward, ground at Y = 0, camera at height `h`.
/// The camera is rolled about its optical axis, pitched (positive = nose
/// down) and yawed. Camera coordinates follow the image: x right, y down.
#[derive(Clone, Copy, Debug)]
pub struct RayCastCamera {
    pub f: f64,
    pub u_c: f64,
    pub v_c: f64,
    pub height: f64,
    pub width: usize,
    pub rows: usize,
    /// Camera-to-world rotation acting on (x right, y up, z forward).
    rot: [[f64; 3]; 3],
    pub roll: f64,
}

fn matmul(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

impl RayCastCamera {
    pub fn random(rng: &mut impl Rng) -> Self {
        let width = rng.random_range(160..=1920);
        let rows = rng.random_range(120..=1080);
        let roll = rng.random_range(-15f64..=15.0).to_radians();
        let pitch = rng.random_range(2f64..30.0).to_radians();
        let yaw = rng.random_range(-180f64..180.0).to_radians();
        let (sr, cr) = roll.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let (sy, cy) = yaw.sin_cos();
        let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
        let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        Self {
            f: rng.random_range(200.0..2000.0),
            u_c: width as f64 * rng.random_range(0.4..0.6),
            v_c: rows as f64 * rng.random_range(0.4..0.6),
            height: rng.random_range(0.5..3.0),
            width,
            rows,
            rot: matmul(ry, matmul(rx, rz)),
            roll,
        }
    }

    fn to_world(&self, c: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| (0..3).map(|k| self.rot[i][k] * c[k]).sum())
    }

    /// World direction of the ray through pixel `(u, v)`.
    pub fn world_ray(&self, u: f64, v: f64) -> [f64; 3] {
        self.to_world([(u - self.u_c) / self.f, -(v - self.v_c) / self.f, 1.0])
    }

    /// Horizon line with positive values on the ground side: the image of
    /// all rays perpendicular to world up.
    pub fn horizon(&self) -> HorizonLine {
        // world down expressed in image-oriented camera coordinates
        let m = self.rot;
        let up_cam = [m[1][0], m[1][1], m[1][2]];
        let (dx, dy, dz) = (-up_cam[0], up_cam[1], -up_cam[2]);
        HorizonLine {
            a: dx,
            b: dy,
            c: dz * self.f - dx * self.u_c - dy * self.v_c,
            tilt: (-dx / dy).atan(),
        }
    }

    /// Ground hit of the pixel ray, or `None` when it does not descend.
    pub fn ground_hit(&self, u: f64, v: f64) -> Option<[f64; 3]> {
        let d = self.world_ray(u, v);
        if d[1] >= 0.0 {
            return None;
        }
        let t = self.height / -d[1];
        Some([t * d[0], self.height + t * d[1], t * d[2]])
    }

    /// Angle between the vertical at the hit point and the line back to the
    /// camera.
    pub fn theta(&self, u: f64, v: f64) -> Option<f64> {
        let p = self.ground_hit(u, v)?;
        let back = [-p[0], self.height - p[1], -p[2]];
        let horiz = back[0].hypot(back[2]);
        Some(horiz.atan2(back[1]))
    }

    /// Signed ground-plane angle from the projected optical axis to the
    /// projected ray, positive to the right.
    pub fn psi(&self, u: f64, v: f64) -> Option<f64> {
        let p = self.ground_hit(u, v)?;
        let axis = self.to_world([0.0, 0.0, 1.0]);
        let (fx, fz) = (axis[0], axis[2]);
        let (rx, rz) = (fz, -fx);
        let along = p[0] * fx + p[2] * fz;
        let across = p[0] * rx + p[2] * rz;
        Some(across.atan2(along))
    }
}
