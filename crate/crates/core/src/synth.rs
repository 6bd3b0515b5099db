//! Synthetic local-Manhattan scenes: a camera, boxes resting on the floor,
//! their RoIs and (optionally noisy) perspective-point observations.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::box3d::{corners, Box3D};
use crate::camera::{Camera, CameraExtrinsics, CameraIntrinsics, EPS_DEPTH};
use crate::error::{Error, Result};
use crate::eval::intersection_volume;
use crate::perspective::{gt_perspective_points, project_box_pixels, PerspectivePoints, RoI};

pub const SCHEMA_VERSION: u32 = 1;
pub const MAX_ATTEMPTS: usize = 1000;
/// RoIs are the projected corner rectangle inflated by this factor.
pub const ROI_INFLATION: f64 = 1.1;
pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub size_min: [f64; 3],
    pub size_max: [f64; 3],
}

fn class(name: &str, size_min: [f64; 3], size_max: [f64; 3]) -> ClassSpec {
    ClassSpec {
        name: name.into(),
        size_min,
        size_max,
    }
}

/// Ten indoor categories with loosely plausible `(w, l, h)` ranges in meters.
pub fn default_classes() -> Vec<ClassSpec> {
    vec![
        class("bed", [1.4, 1.9, 0.4], [2.0, 2.3, 1.1]),
        class("chair", [0.4, 0.4, 0.7], [0.6, 0.6, 1.1]),
        class("sofa", [0.8, 1.5, 0.7], [1.0, 2.4, 1.0]),
        class("table", [0.6, 0.8, 0.6], [1.0, 1.8, 0.8]),
        class("desk", [0.5, 1.0, 0.7], [0.8, 1.6, 0.8]),
        class("dresser", [0.4, 0.8, 0.8], [0.6, 1.4, 1.3]),
        class("night_stand", [0.35, 0.35, 0.45], [0.55, 0.55, 0.7]),
        class("sink", [0.4, 0.4, 0.8], [0.6, 0.8, 0.95]),
        class("cabinet", [0.4, 0.5, 0.7], [0.6, 1.2, 2.0]),
        class("lamp", [0.25, 0.25, 0.4], [0.4, 0.4, 1.6]),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_scenes: usize,
    /// Inclusive object count range per scene.
    pub objects: [usize; 2],
    pub classes: Vec<ClassSpec>,
    /// Ray distance from the camera center to each box center (m).
    pub distance: [f64; 2],
    pub tilt: [f64; 2],
    pub roll: [f64; 2],
    pub cam_height: [f64; 2],
    pub intrinsics: CameraIntrinsics,
    /// Gaussian noise on the stored observations, normalised units.
    pub noise_sigma: f64,
    /// Every projected point must sit this many pixels inside the image.
    pub margin_px: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_scenes: 10,
            objects: [1, 4],
            classes: default_classes(),
            distance: [3.0, 8.0],
            tilt: [0.0, 0.3],
            roll: [-0.05, 0.05],
            cam_height: [1.2, 1.8],
            intrinsics: CameraIntrinsics {
                fx: 520.0,
                fy: 520.0,
                cx: 320.0,
                cy: 240.0,
                width: 640.0,
                height: 480.0,
            },
            noise_sigma: 0.0,
            margin_px: 2.0,
        }
    }
}

fn check_range(field: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite()) || r[0] > r[1] {
        return Err(Error::invalid(field, format!("need finite min <= max, got {r:?}")));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.objects[0] > self.objects[1] {
            return Err(Error::invalid("objects", "min exceeds max"));
        }
        if self.objects[1] > 0 && self.classes.is_empty() {
            return Err(Error::invalid("classes", "at least one class is required"));
        }
        for (i, c) in self.classes.iter().enumerate() {
            for k in 0..3 {
                check_range(&format!("classes[{i}].size"), [c.size_min[k], c.size_max[k]])?;
                if c.size_min[k] <= 0.0 {
                    return Err(Error::invalid(
                        format!("classes[{i}].size_min"),
                        "sizes must be positive",
                    ));
                }
            }
        }
        check_range("distance", self.distance)?;
        if self.distance[0] <= 0.0 {
            return Err(Error::invalid("distance", "must be positive"));
        }
        for (name, r) in [("tilt", self.tilt), ("roll", self.roll)] {
            check_range(name, r)?;
            if r[0] <= -PI / 2.0 || r[1] >= PI / 2.0 {
                return Err(Error::invalid(name, "must lie inside (-pi/2, pi/2)"));
            }
        }
        check_range("cam_height", self.cam_height)?;
        if self.cam_height[0] <= 0.0 {
            return Err(Error::invalid("cam_height", "must be positive"));
        }
        self.intrinsics.validate()?;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma", "must be finite and >= 0"));
        }
        if !(self.margin_px >= 0.0) {
            return Err(Error::invalid("margin_px", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub roi: RoI,
    /// Exact perspective points.
    pub gt: PerspectivePoints,
    /// `gt` plus the configured observation noise.
    pub observed: PerspectivePoints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub schema: u32,
    pub id: String,
    pub camera: Camera,
    pub objects: Vec<SceneObject>,
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Deterministic generator for scene `index` of the dataset seeded by
/// `cfg.seed`; scene content and observation noise use separate streams.
fn scene_rng(seed: u64, index: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * index + stream);
    rng
}

/// Projected-corner rectangle inflated by [`ROI_INFLATION`].
pub fn roi_for_box(b: &Box3D, cam: &Camera) -> Result<RoI> {
    let px = project_box_pixels(b, cam)?;
    Ok(RoI::bounding(px[1..].iter())?.scaled(ROI_INFLATION))
}

fn fits_in_image(b: &Box3D, cam: &Camera, margin: f64) -> bool {
    let k = &cam.intrinsics;
    let in_front = corners(b).iter().all(|c| cam.world_to_camera(c).z > EPS_DEPTH);
    if !in_front {
        return false;
    }
    match project_box_pixels(b, cam) {
        Ok(px) => px
            .iter()
            .all(|p| p.x >= margin && p.y >= margin && p.x <= k.width - margin && p.y <= k.height - margin),
        Err(_) => false,
    }
}

fn sample_box(cfg: &SynthConfig, class: usize, cam: &Camera, rng: &mut impl Rng) -> Option<Box3D> {
    let spec = &cfg.classes[class];
    let size = Vector3::from_fn(|i, _| uniform(rng, [spec.size_min[i], spec.size_max[i]]));
    let yaw = rng.random_range(-PI..PI);
    let distance = uniform(rng, cfg.distance);
    // box rests on the floor; place its center on the sphere of radius
    // `distance` around the camera, within the horizontal field of view
    let dz = cam.extrinsics.cam_height - 0.5 * size.z;
    let r2 = distance * distance - dz * dz;
    if r2 <= 0.0 {
        return None;
    }
    let k = &cam.intrinsics;
    let half_fov = (k.cx / k.fx).atan().min(((k.width - k.cx) / k.fx).atan());
    let azimuth = rng.random_range(-half_fov..=half_fov);
    let r = r2.sqrt();
    let center = Vector3::new(r * azimuth.sin(), r * azimuth.cos(), 0.5 * size.z);
    Box3D::new(center, size, yaw).ok()
}

pub fn generate_scene(cfg: &SynthConfig, index: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = scene_rng(cfg.seed, index, 0);
    let camera = Camera::new(
        cfg.intrinsics,
        CameraExtrinsics {
            tilt: uniform(&mut rng, cfg.tilt),
            roll: uniform(&mut rng, cfg.roll),
            cam_height: uniform(&mut rng, cfg.cam_height),
        },
    )?;
    let count = rng.random_range(cfg.objects[0]..=cfg.objects[1]);
    let mut placed: Vec<(usize, Box3D)> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(0..cfg.classes.len());
        let mut attempts = 0;
        let b = loop {
            if attempts == MAX_ATTEMPTS {
                return Err(Error::RejectionOverflow { attempts });
            }
            attempts += 1;
            let Some(b) = sample_box(cfg, class, &camera, &mut rng) else {
                continue;
            };
            let clear = placed.iter().all(|(_, o)| intersection_volume(o, &b) == 0.0);
            if clear && fits_in_image(&b, &camera, cfg.margin_px) {
                break b;
            }
        };
        placed.push((class, b));
    }

    let mut objects = Vec::with_capacity(placed.len());
    for (class, bbox) in placed {
        let roi = roi_for_box(&bbox, &camera)?;
        let gt = gt_perspective_points(&bbox, &camera, &roi)?;
        objects.push(SceneObject {
            class,
            bbox,
            roi,
            gt,
            observed: gt,
        });
    }
    let mut scene = Scene {
        schema: SCHEMA_VERSION,
        id: format!("scene_{index:05}"),
        camera,
        objects,
    };
    let noisy = observe(&scene, cfg.noise_sigma, &mut scene_rng(cfg.seed, index, 1))?;
    for (o, p) in scene.objects.iter_mut().zip(noisy) {
        o.observed = p;
    }
    Ok(scene)
}

/// Exact perspective points of every object plus i.i.d. `N(0, sigma^2)`
/// noise on each normalised coordinate.
pub fn observe(scene: &Scene, sigma: f64, rng: &mut impl Rng) -> Result<Vec<PerspectivePoints>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("sigma", "must be finite and >= 0"));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid("sigma", e.to_string()))?;
    let mut out = Vec::with_capacity(scene.objects.len());
    for o in &scene.objects {
        let mut p = gt_perspective_points(&o.bbox, &scene.camera, &o.roi)?;
        if sigma > 0.0 {
            for pt in p.points.iter_mut() {
                pt[0] += normal.sample(rng);
                pt[1] += normal.sample(rng);
            }
        }
        out.push(p);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub schema: u32,
    pub scenes: Vec<String>,
}

pub fn scene_file_name(scene: &Scene) -> String {
    format!("{}.json", scene.id)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::invalid(path.display().to_string(), e.to_string())
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serialises");
    s.push('\n');
    s
}

pub fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    fs::write(path, to_json(scene)).map_err(|e| io_err(path, e))
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let scene: Scene = serde_json::from_str(&text).map_err(|e| io_err(path, e))?;
    if scene.schema != SCHEMA_VERSION {
        return Err(io_err(path, format!("unsupported schema {}", scene.schema)));
    }
    Ok(scene)
}

/// Writes one file per scene plus the index; returns the written file names.
pub fn write_dataset(dir: &Path, scenes: &[Scene]) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut names = Vec::with_capacity(scenes.len() + 1);
    for s in scenes {
        let name = scene_file_name(s);
        write_scene(&dir.join(&name), s)?;
        names.push(name);
    }
    let index = DatasetIndex {
        schema: SCHEMA_VERSION,
        scenes: names.clone(),
    };
    let path = dir.join(INDEX_FILE);
    fs::write(&path, to_json(&index)).map_err(|e| io_err(&path, e))?;
    names.push(INDEX_FILE.to_string());
    Ok(names)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let index: DatasetIndex = serde_json::from_str(&text).map_err(|e| io_err(&path, e))?;
    index.scenes.iter().map(|n| read_scene(&dir.join(n))).collect()
}
