//! On-disk dataset layout: a TOML manifest next to side-by-side frames and
//! 8-bit truth masks, plus the synthetic dataset description consumed by
//! `synth`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::TruthMask;
use crate::optics::WaterColumn;
use crate::raster::read_gray_png;
use crate::stereo::{CameraMeta, PolarizedStereoFrame};
use crate::synth::{Puddle, SceneSpec};

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolarizerAxis {
    Horizontal,
    Vertical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Polarizers {
    pub left: PolarizerAxis,
    pub right: PolarizerAxis,
}

impl Default for Polarizers {
    fn default() -> Self {
        Self {
            left: PolarizerAxis::Horizontal,
            right: PolarizerAxis::Vertical,
        }
    }
}

/// One stereo pair. Either `image` (side by side, split at `width / 2`) or
/// both `left` and `right` are set. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub left: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub right: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub camera: CameraMeta,
    #[serde(default)]
    pub polarizers: Polarizers,
    #[serde(default)]
    pub frames: Vec<FrameEntry>,
}

fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8())
}

fn image_dims(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: PathBuf::from(MANIFEST_FILE),
            message: e.to_string(),
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        self.camera
            .validate()
            .map_err(|e| Error::Dataset(format!("camera: {e}")))?;
        if self.polarizers.left == self.polarizers.right {
            return Err(Error::Dataset("polarizers: left and right must differ".into()));
        }
        let mut ids = HashSet::new();
        let mut paths = HashSet::new();
        for f in &self.frames {
            if f.id.is_empty() || f.id.contains(['/', '\\']) {
                return Err(Error::Dataset(format!("frame {:?}: id must be a plain name", f.id)));
            }
            if !ids.insert(f.id.as_str()) {
                return Err(Error::Dataset(format!("frame {}: duplicate id", f.id)));
            }
            let images: Vec<&PathBuf> = match (&f.image, &f.left, &f.right) {
                (Some(i), None, None) => vec![i],
                (None, Some(l), Some(r)) => vec![l, r],
                _ => {
                    return Err(Error::Dataset(format!(
                        "frame {}: set either `image` or both `left` and `right`",
                        f.id
                    )))
                }
            };
            // a file used twice would put one pair in both splits
            for p in images.into_iter().chain(&f.mask) {
                if !paths.insert(p.as_path()) {
                    return Err(Error::Dataset(format!(
                        "frame {}: path {} is used by another frame",
                        f.id,
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Checks that every referenced file exists and that masks match their
    /// image dimensions.
    pub fn check_files(&self, root: &Path) -> Result<()> {
        for f in &self.frames {
            let dims = self.frame_dims(f, root)?;
            if let Some(mask) = &f.mask {
                let (mw, mh) = image_dims(&root.join(mask))?;
                if (mw as usize, mh as usize) != dims {
                    return Err(Error::Dataset(format!(
                        "frame {}: mask is {mw}x{mh} but the views are {}x{}",
                        f.id, dims.0, dims.1
                    )));
                }
            }
        }
        Ok(())
    }

    fn frame_dims(&self, f: &FrameEntry, root: &Path) -> Result<(usize, usize)> {
        if let Some(img) = &f.image {
            let (w, h) = image_dims(&root.join(img))?;
            if w % 2 != 0 {
                return Err(Error::Dataset(format!("frame {}: side-by-side width {w} is odd", f.id)));
            }
            return Ok((w as usize / 2, h as usize));
        }
        let l = image_dims(&root.join(f.left.as_ref().expect("validated")))?;
        let r = image_dims(&root.join(f.right.as_ref().expect("validated")))?;
        if l != r {
            return Err(Error::Dataset(format!("frame {}: left and right sizes differ", f.id)));
        }
        Ok((l.0 as usize, l.1 as usize))
    }

    pub fn frames_in(&self, split: Split) -> impl Iterator<Item = (usize, &FrameEntry)> {
        self.frames.iter().enumerate().filter(move |(_, f)| f.split == split)
    }

    pub fn load_frame(&self, index: usize, root: &Path) -> Result<PolarizedStereoFrame> {
        let f = &self.frames[index];
        let id = index as u64;
        let frame = match &f.image {
            Some(img) => PolarizedStereoFrame::from_side_by_side(&load_rgb(&root.join(img))?, self.camera, id),
            None => PolarizedStereoFrame::new(
                load_rgb(&root.join(f.left.as_ref().expect("validated")))?,
                load_rgb(&root.join(f.right.as_ref().expect("validated")))?,
                self.camera,
                id,
            ),
        };
        frame.map_err(|e| Error::Dataset(format!("frame {}: {e}", f.id)))
    }

    pub fn load_truth(&self, index: usize, root: &Path) -> Result<Option<TruthMask>> {
        match &self.frames[index].mask {
            Some(p) => Ok(Some(TruthMask::from_gray(&read_gray_png(&root.join(p))?))),
            None => Ok(None),
        }
    }
}

/// Builds a manifest for a directory of existing side-by-side frames.
///
/// Frames are the `.png` / `.jpg` files in `root/images`, sorted by name;
/// a mask is picked up from `root/masks/<stem>.png` when present. Every
/// `test_every`-th frame goes to the test split, the rest to train. Without
/// `camera`, the reference rig scaled to the first frame is assumed.
pub fn import_directory(root: &Path, camera: Option<CameraMeta>, test_every: usize) -> Result<DatasetManifest> {
    if test_every == 0 {
        return Err(Error::invalid("test_every", "must be at least 1"));
    }
    let images = root.join("images");
    let mut names: Vec<String> = std::fs::read_dir(&images)
        .map_err(|e| Error::io(&images, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| {
            let l = n.to_ascii_lowercase();
            l.ends_with(".png") || l.ends_with(".jpg") || l.ends_with(".jpeg")
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Dataset(format!("no images in {}", images.display())));
    }
    let frames = names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let stem = Path::new(name).file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let mask = PathBuf::from("masks").join(format!("{stem}.png"));
            FrameEntry {
                id: stem,
                image: Some(PathBuf::from("images").join(name)),
                left: None,
                right: None,
                mask: root.join(&mask).exists().then_some(mask),
                split: if (i + 1) % test_every == 0 { Split::Test } else { Split::Train },
            }
        })
        .collect();
    let mut manifest = DatasetManifest {
        camera: camera.unwrap_or(CameraMeta::for_image(2, 2)),
        polarizers: Polarizers::default(),
        frames,
    };
    if camera.is_none() {
        let (w, h) = manifest.frame_dims(&manifest.frames[0], root)?;
        manifest.camera = CameraMeta::for_image(w, h);
    }
    manifest.validate()?;
    manifest.check_files(root)?;
    Ok(manifest)
}

/// Ranges for randomly placed puddles, in meters relative to the camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomPuddles {
    /// Inclusive puddle-count range per frame.
    pub count: (usize, usize),
    /// Forward distance of the puddle center.
    pub distance: (f64, f64),
    /// Lateral offset as a fraction of the half field of view at that
    /// distance.
    pub lateral: f64,
    /// Semi-axis range.
    pub axes: (f64, f64),
    /// Absorption fractions are drawn per puddle between these per-channel
    /// bounds; the rest splits evenly between particles and bottom.
    pub absorption: ([f64; 3], [f64; 3]),
}

impl Default for RandomPuddles {
    fn default() -> Self {
        Self {
            count: (1, 3),
            distance: (4.0, 25.0),
            lateral: 0.7,
            axes: (0.4, 1.8),
            absorption: ([0.4, 0.5, 0.6], [0.6, 0.7, 0.8]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BatchLayout {
    /// The template scene, re-noised per frame.
    Fixed,
    /// Fresh puddle layout per frame.
    Random(RandomPuddles),
    /// Template puddles, camera moving forward `advance` meters per frame.
    Approach { advance: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSpec {
    pub name: String,
    pub split: Split,
    pub frames: usize,
    #[serde(default = "default_with_masks")]
    pub masks: bool,
    pub layout: BatchLayout,
}

fn default_with_masks() -> bool {
    true
}

/// Input of `synth`: a scene template and batches derived from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scene: SceneSpec,
    pub batches: Vec<BatchSpec>,
}

impl DatasetSpec {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene
            .validate()
            .map_err(|e| prefix_field(e, "scene"))?;
        if self.batches.is_empty() {
            return Err(Error::invalid("batches", "need at least one batch"));
        }
        let mut names = HashSet::new();
        for (i, b) in self.batches.iter().enumerate() {
            let at = |field: &str| format!("batches[{i}].{field}");
            if b.name.is_empty() || b.name.contains(['/', '\\']) || !names.insert(b.name.as_str()) {
                return Err(Error::invalid(at("name"), "must be a unique plain name"));
            }
            if b.frames == 0 {
                return Err(Error::invalid(at("frames"), "must be at least 1"));
            }
            match &b.layout {
                BatchLayout::Fixed => {}
                BatchLayout::Approach { advance } => {
                    if !advance.is_finite() {
                        return Err(Error::invalid(at("layout.advance"), "must be finite"));
                    }
                }
                BatchLayout::Random(r) => {
                    if r.count.0 > r.count.1 {
                        return Err(Error::invalid(at("layout.count"), "min exceeds max"));
                    }
                    if !(r.distance.0 > 0.0 && r.distance.0 <= r.distance.1) {
                        return Err(Error::invalid(at("layout.distance"), "need 0 < min <= max"));
                    }
                    if !(r.axes.0 > 0.0 && r.axes.0 <= r.axes.1) {
                        return Err(Error::invalid(at("layout.axes"), "need 0 < min <= max"));
                    }
                    if !(0.0..=1.0).contains(&r.lateral) {
                        return Err(Error::invalid(at("layout.lateral"), "must lie in [0, 1]"));
                    }
                    let (lo, hi) = r.absorption;
                    if (0..3).any(|c| !(0.0 <= lo[c] && lo[c] <= hi[c] && hi[c] <= 1.0)) {
                        return Err(Error::invalid(at("layout.absorption"), "need 0 <= min <= max <= 1"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Frame ids and scene specs, in dataset order.
    pub fn frames(&self) -> Vec<(String, &BatchSpec, SceneSpec)> {
        let mut out = Vec::new();
        let mut k = 0u64;
        for (bi, b) in self.batches.iter().enumerate() {
            for i in 0..b.frames {
                let mut scene = self.scene.clone();
                scene.noise_seed = self.seed.wrapping_mul(1_000_003).wrapping_add(k);
                match &b.layout {
                    BatchLayout::Fixed => {}
                    BatchLayout::Approach { advance } => scene.camera.position.1 += advance * i as f64,
                    BatchLayout::Random(r) => {
                        let mut rng = ChaCha8Rng::seed_from_u64(
                            self.seed ^ ((bi as u64) << 32) ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                        );
                        scene.puddles = random_puddles(&scene, r, &mut rng);
                    }
                }
                out.push((format!("{}_{i:03}", b.name), b, scene));
                k += 1;
            }
        }
        out
    }
}

fn prefix_field(e: Error, prefix: &str) -> Error {
    match e {
        Error::InvalidParameter { field, reason } => Error::InvalidParameter {
            field: format!("{prefix}.{field}"),
            reason,
        },
        other => other,
    }
}

fn random_puddles(scene: &SceneSpec, r: &RandomPuddles, rng: &mut ChaCha8Rng) -> Vec<Puddle> {
    let n = rng.random_range(r.count.0..=r.count.1);
    let half_fov = (0.5 * scene.width as f64 / scene.camera.focal_length).atan();
    let (x0, z0) = scene.camera.position;
    (0..n)
        .map(|_| {
            let z = rng.random_range(r.distance.0..=r.distance.1);
            let reach = r.lateral * z * half_fov.tan();
            let x = rng.random_range(-reach..=reach);
            let axes = (
                rng.random_range(r.axes.0..=r.axes.1),
                rng.random_range(r.axes.0..=r.axes.1),
            );
            let absorption: [f64; 3] =
                std::array::from_fn(|c| r.absorption.0[c] + rng.random::<f64>() * (r.absorption.1[c] - r.absorption.0[c]));
            Puddle {
                center: (x0 + x, z0 + z),
                axes,
                rotation_deg: rng.random_range(0.0..180.0),
                column: WaterColumn::from_absorption(absorption).expect("absorption validated"),
            }
        })
        .collect()
}
