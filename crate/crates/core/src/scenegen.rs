//! Procedural Lambertian scenes with an analytic ray tracer, used to bake
//! grayscale datasets with exact color and depth.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color::{encode_srgb_ext, image_to_gray, srgb_to_linear};
use crate::dataset::{generate_rays, write_depth, CameraIntrinsics, FrameEntry, Manifest, Modality, Pose, Ray, MANIFEST_NAME};
use crate::error::{Error, Result};
use crate::image::{write_png16, ColorSpace, ImageBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Primitive {
    Sphere {
        name: String,
        center: [f64; 3],
        radius: f64,
        albedo: [f64; 3],
    },
    Box {
        name: String,
        min: [f64; 3],
        max: [f64; 3],
        albedo: [f64; 3],
    },
}

impl Primitive {
    pub fn name(&self) -> &str {
        match self {
            Primitive::Sphere { name, .. } | Primitive::Box { name, .. } => name,
        }
    }

    pub fn albedo(&self) -> [f64; 3] {
        match self {
            Primitive::Sphere { albedo, .. } | Primitive::Box { albedo, .. } => *albedo,
        }
    }

    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        match self {
            Primitive::Sphere { center, radius, .. } => (center.map(|c| c - radius), center.map(|c| c + radius)),
            Primitive::Box { min, max, .. } => (*min, *max),
        }
    }

    fn contains(&self, p: &Vector3<f64>) -> bool {
        match self {
            Primitive::Sphere { center, radius, .. } => (p - Vector3::from(*center)).norm() <= *radius,
            Primitive::Box { min, max, .. } => (0..3).all(|k| p[k] >= min[k] && p[k] <= max[k]),
        }
    }

    /// Nearest entry hit `(t, outward normal)` with `t > 0`.
    fn intersect(&self, ray: &Ray) -> Option<(f64, Vector3<f64>)> {
        match self {
            Primitive::Sphere { center, radius, .. } => {
                let oc = ray.origin - Vector3::from(*center);
                let b = oc.dot(&ray.direction);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = if -b - sq > 1e-9 { -b - sq } else { -b + sq };
                if t <= 1e-9 {
                    return None;
                }
                let n = (ray.at(t) - Vector3::from(*center)) / *radius;
                Some((t, n))
            }
            Primitive::Box { min, max, .. } => {
                let (t0, t1, axis0, _) = slabs(ray, min, max)?;
                if t0 <= 1e-9 || t0 > t1 {
                    return None;
                }
                let mut n = Vector3::zeros();
                n[axis0] = -ray.direction[axis0].signum();
                Some((t0, n))
            }
        }
    }
}

/// Slab test returning `(t_enter, t_exit, entry axis, exit axis)`.
fn slabs(ray: &Ray, min: &[f64; 3], max: &[f64; 3]) -> Option<(f64, f64, usize, usize)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    let (mut a0, mut a1) = (0, 0);
    for k in 0..3 {
        let d = ray.direction[k];
        if d.abs() < 1e-15 {
            if ray.origin[k] < min[k] || ray.origin[k] > max[k] {
                return None;
            }
            continue;
        }
        let (mut lo, mut hi) = ((min[k] - ray.origin[k]) / d, (max[k] - ray.origin[k]) / d);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        if lo > t0 {
            t0 = lo;
            a0 = k;
        }
        if hi < t1 {
            t1 = hi;
            a1 = k;
        }
    }
    (t0 <= t1).then_some((t0, t1, a0, a1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Room {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Light {
    pub ambient: f64,
    pub directional: f64,
    /// Direction pointing towards the light.
    pub direction: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RigKind {
    /// Full circle around the target.
    Orbit,
    /// Forward-facing arc spanning `arc_degrees`.
    Arc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rig {
    pub kind: RigKind,
    pub views: usize,
    pub radius: f64,
    pub target: [f64; 3],
    pub elevation_degrees: f64,
    #[serde(default)]
    pub arc_degrees: f64,
    pub fov_degrees: f64,
    pub width: usize,
    pub height: usize,
}

impl Rig {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::from_fov(self.width, self.height, self.fov_degrees)
    }

    /// Pose at continuous rig parameter `t`; integers are the training views.
    pub fn pose_at(&self, t: f64) -> Pose {
        let theta = match self.kind {
            RigKind::Orbit => 2.0 * std::f64::consts::PI * t / self.views as f64,
            RigKind::Arc => {
                let span = self.arc_degrees.to_radians();
                let u = if self.views > 1 { t / (self.views - 1) as f64 } else { 0.5 };
                -0.5 * span + span * u
            }
        };
        let phi = self.elevation_degrees.to_radians();
        let target = Vector3::from(self.target);
        let eye = target + self.radius * Vector3::new(phi.cos() * theta.sin(), phi.sin(), phi.cos() * theta.cos());
        Pose::look_at(eye, target, Vector3::y())
    }

    pub fn poses(&self) -> Vec<Pose> {
        (0..self.views).map(|i| self.pose_at(i as f64)).collect()
    }

    /// `frames` poses evenly spaced over the rig's parameter range.
    pub fn trajectory(&self, frames: usize) -> Vec<Pose> {
        let end = match self.kind {
            RigKind::Orbit => self.views as f64,
            RigKind::Arc => (self.views - 1) as f64,
        };
        let denom = match self.kind {
            RigKind::Orbit => frames as f64,
            RigKind::Arc => frames.saturating_sub(1).max(1) as f64,
        };
        (0..frames).map(|i| self.pose_at(end * i as f64 / denom)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default)]
    pub primitives: Vec<Primitive>,
    pub room: Option<Room>,
    pub light: Light,
    pub rig: Rig,
    #[serde(default)]
    pub seed: u64,
}

fn check_albedo(name: &str, a: &[f64; 3]) -> Result<()> {
    if a.iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::InvalidScene(format!("albedo of '{name}' is outside [0,1]: {a:?}")))
    }
}

impl SceneSpec {
    /// A small room with a table and a few colored objects, seen from a
    /// forward-facing arc of 20 cameras at 128×128.
    pub fn desk() -> Self {
        let sphere = |name: &str, center: [f64; 3], radius: f64, albedo: [f64; 3]| Primitive::Sphere {
            name: name.into(),
            center,
            radius,
            albedo,
        };
        let cuboid = |name: &str, min: [f64; 3], max: [f64; 3], albedo: [f64; 3]| Primitive::Box {
            name: name.into(),
            min,
            max,
            albedo,
        };
        Self {
            primitives: vec![
                cuboid("table", [-1.6, -2.0, -1.6], [1.6, -1.2, 0.4], [0.55, 0.36, 0.2]),
                sphere("red_ball", [-0.8, -0.75, -0.6], 0.45, [0.85, 0.15, 0.12]),
                sphere("blue_ball", [1.0, -0.8, -0.9], 0.4, [0.15, 0.3, 0.85]),
                cuboid("green_block", [-0.2, -1.2, -1.4], [0.4, -0.3, -0.8], [0.2, 0.7, 0.25]),
                sphere("yellow_ball", [0.15, -0.95, 0.0], 0.25, [0.9, 0.8, 0.15]),
                cuboid("shelf", [-1.2, 0.2, -2.0], [1.2, 0.35, -1.6], [0.6, 0.3, 0.65]),
            ],
            room: Some(Room {
                min: [-2.0; 3],
                max: [2.0; 3],
                albedo: [0.78, 0.74, 0.68],
            }),
            light: Light {
                ambient: 0.35,
                directional: 0.65,
                direction: [0.4, 1.0, 0.6],
            },
            rig: Rig {
                kind: RigKind::Arc,
                views: 20,
                radius: 2.5,
                target: [0.0, -0.8, -0.8],
                elevation_degrees: 20.0,
                arc_degrees: 80.0,
                fov_degrees: 60.0,
                width: 128,
                height: 128,
            },
            seed: 0,
        }
    }

    /// Random spheres and boxes on the floor of a unit-scale room.
    pub fn random(seed: u64, count: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spec = Self::desk();
        spec.seed = seed;
        spec.primitives.clear();
        for i in 0..count {
            let albedo = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
            let x = rng.gen_range(-1.2..1.2);
            let z = rng.gen_range(-1.6..0.0);
            if rng.gen_bool(0.5) {
                let r = rng.gen_range(0.15..0.4);
                spec.primitives.push(Primitive::Sphere {
                    name: format!("sphere_{i}"),
                    center: [x, -2.0 + r, z],
                    radius: r,
                    albedo,
                });
            } else {
                let s = rng.gen_range(0.15..0.4);
                let top = rng.gen_range(-1.8..-1.0);
                spec.primitives.push(Primitive::Box {
                    name: format!("box_{i}"),
                    min: [x - s, -2.0, z - s],
                    max: [x + s, top, z + s],
                    albedo,
                });
            }
        }
        spec
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidScene(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidScene(e.to_string()))
    }

    /// Reads a scene from `.json` or `.toml` and validates it.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)?
        } else {
            Self::from_toml(&text)?
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.primitives {
            check_albedo(p.name(), &p.albedo())?;
            match p {
                Primitive::Sphere { radius, name, .. } if !(*radius > 0.0) => {
                    return Err(Error::InvalidScene(format!("sphere '{name}' needs a positive radius")));
                }
                Primitive::Box { min, max, name, .. } if (0..3).any(|k| min[k] >= max[k]) => {
                    return Err(Error::InvalidScene(format!("box '{name}' has min >= max")));
                }
                _ => {}
            }
            if let Some(room) = &self.room {
                let (lo, hi) = p.bounds();
                if (0..3).any(|k| lo[k] < room.min[k] - 1e-9 || hi[k] > room.max[k] + 1e-9) {
                    return Err(Error::InvalidScene(format!("primitive '{}' lies outside the room", p.name())));
                }
            }
        }
        if let Some(room) = &self.room {
            check_albedo("room", &room.albedo)?;
            if (0..3).any(|k| room.min[k] >= room.max[k]) {
                return Err(Error::InvalidScene("room has min >= max".into()));
            }
        }
        let l = &self.light;
        if !(l.ambient >= 0.0 && l.directional >= 0.0) || Vector3::from(l.direction).norm() == 0.0 {
            return Err(Error::InvalidScene("light needs non-negative weights and a direction".into()));
        }
        let rig = &self.rig;
        if rig.views < 2 {
            return Err(Error::InvalidScene(format!("rig needs at least 2 views, got {}", rig.views)));
        }
        if !(rig.radius > 0.0) || !(rig.fov_degrees > 0.0 && rig.fov_degrees < 180.0) || rig.width == 0 || rig.height == 0 {
            return Err(Error::InvalidScene("rig needs a positive radius, a fov in (0,180) and nonzero size".into()));
        }
        for (i, pose) in rig.poses().iter().enumerate() {
            let eye = pose.translation;
            if let Some(room) = &self.room {
                if (0..3).any(|k| eye[k] <= room.min[k] || eye[k] >= room.max[k]) {
                    return Err(Error::InvalidScene(format!("camera {i} is outside the room")));
                }
            }
            if let Some(p) = self.primitives.iter().find(|p| p.contains(&eye)) {
                return Err(Error::InvalidScene(format!("camera {i} is inside primitive '{}'", p.name())));
            }
        }
        Ok(())
    }

    /// Nearest hit along `ray`: `(t, normal, albedo)`.
    pub fn trace(&self, ray: &Ray) -> Option<(f64, Vector3<f64>, [f64; 3])> {
        let mut best: Option<(f64, Vector3<f64>, [f64; 3])> = None;
        for p in &self.primitives {
            if let Some((t, n)) = p.intersect(ray) {
                if best.as_ref().is_none_or(|b| t < b.0) {
                    best = Some((t, n, p.albedo()));
                }
            }
        }
        if let Some(room) = &self.room {
            if let Some((_, t1, _, axis)) = slabs(ray, &room.min, &room.max) {
                if t1 > 1e-9 && best.as_ref().is_none_or(|b| t1 < b.0) {
                    let mut n = Vector3::zeros();
                    n[axis] = -ray.direction[axis].signum();
                    best = Some((t1, n, room.albedo));
                }
            }
        }
        best
    }

    /// Display sRGB for a surface point. Shading happens in linear light.
    pub fn shade(&self, normal: &Vector3<f64>, albedo: [f64; 3]) -> [f64; 3] {
        let l = Vector3::from(self.light.direction).normalize();
        let k = self.light.ambient + self.light.directional * normal.dot(&l).max(0.0);
        albedo.map(|a| encode_srgb_ext((srgb_to_linear(a) * k).clamp(0.0, 1.0)))
    }
}

/// Ground-truth sRGB color and ray-distance depth (`+∞` for background).
pub fn render_gt(scene: &SceneSpec, cam: &CameraIntrinsics, pose: &Pose) -> (ImageBuf, ImageBuf) {
    let rays = generate_rays(cam, pose, 0).expect("scale 0 always divides");
    let hits: Vec<([f32; 3], f32)> = rays
        .par_iter()
        .map(|ray| match scene.trace(ray) {
            Some((t, n, albedo)) => (scene.shade(&n, albedo).map(|v| v as f32), t as f32),
            None => ([0.0; 3], f32::INFINITY),
        })
        .collect();
    let (w, h) = (cam.width, cam.height);
    let color = ImageBuf::from_vec(w, h, ColorSpace::Srgb, hits.iter().flat_map(|(c, _)| *c).collect())
        .expect("3 channels");
    let depth = ImageBuf::from_vec(w, h, ColorSpace::Scalar, hits.iter().map(|(_, d)| *d).collect())
        .expect("1 channel");
    (color, depth)
}

pub fn view_id(i: usize) -> String {
    format!("view_{i:03}")
}

/// Writes grayscale inputs, ground-truth color and depth, the scene itself and
/// a manifest into `dir`.
pub fn bake_dataset(scene: &SceneSpec, dir: &Path) -> Result<Manifest> {
    scene.validate()?;
    for sub in ["images", "color", "depth"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let cam = scene.rig.intrinsics();
    let mut frames = Vec::with_capacity(scene.rig.views);
    for (i, pose) in scene.rig.poses().iter().enumerate() {
        let id = view_id(i);
        let (color, depth) = render_gt(scene, &cam, pose);
        let gray = image_to_gray(&color);
        let (file, color_file, depth_file) = (
            format!("images/{id}.png"),
            format!("color/{id}.png"),
            format!("depth/{id}.depth"),
        );
        write_png16(&gray, &dir.join(&file))?;
        write_png16(&color, &dir.join(&color_file))?;
        write_depth(&depth, &dir.join(&depth_file))?;
        let mut frame = FrameEntry {
            id,
            file,
            transform_matrix: [[0.0; 4]; 4],
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            depth_file: Some(depth_file),
            color_file: Some(color_file),
        };
        frame.set_pose(pose);
        frames.push(frame);
    }
    let manifest = Manifest {
        modality: Modality::Gray,
        frames,
    };
    manifest.write(&dir.join(MANIFEST_NAME))?;
    let scene_path = dir.join("scene.json");
    let text = serde_json::to_string_pretty(scene).expect("scene serializes");
    fs::write(&scene_path, text).map_err(|e| Error::io(&scene_path, e))?;
    Ok(manifest)
}
