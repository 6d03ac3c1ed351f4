//! Multi-view grayscale datasets: camera model, `transforms.json` manifests,
//! image/depth ingestion and ray generation.

mod camera;

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

pub use camera::{generate_rays, interpolate_path, CameraIntrinsics, Pose, Ray};

use crate::color::image_to_gray;
use crate::error::{Error, Result};
use crate::image::{read_png, ColorSpace, ImageBuf};

pub const MANIFEST_NAME: &str = "transforms.json";

/// Sensor modality of a dataset. IR frames are min-max normalized per image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    #[default]
    Gray,
    Ir,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub id: String,
    pub file: String,
    /// Row-major 4×4 camera-to-world matrix.
    pub transform_matrix: [[f64; 4]; 4],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color_file: Option<String>,
}

impl FrameEntry {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        }
    }

    pub fn pose(&self) -> Pose {
        let m = &self.transform_matrix;
        Pose::from_matrix(&Matrix4::from_fn(|r, c| m[r][c]))
    }

    pub fn set_pose(&mut self, pose: &Pose) {
        let m = pose.to_matrix();
        self.transform_matrix = std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub modality: Modality,
    pub frames: Vec<FrameEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                message: "manifest not found".into(),
            });
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// One training view.
#[derive(Debug, Clone)]
pub struct View {
    pub id: String,
    /// Gray image in [0, 1].
    pub image: ImageBuf,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    /// Ground-truth ray-distance depth, `+∞` for background.
    pub depth: Option<ImageBuf>,
    /// Ground-truth color image path, when the dataset provides one.
    pub color_path: Option<PathBuf>,
}

/// An immutable set of views sharing one base resolution.
#[derive(Debug, Clone)]
pub struct ViewSet {
    views: Vec<View>,
}

impl ViewSet {
    pub fn new(views: Vec<View>) -> Result<Self> {
        let mut seen = HashSet::new();
        for v in &views {
            if !seen.insert(v.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate view id {}", v.id)));
            }
            if v.image.space() != ColorSpace::Gray {
                return Err(Error::InvalidArgument(format!("view {} is not a gray image", v.id)));
            }
            if v.image.dims() != (v.intrinsics.width, v.intrinsics.height) {
                return Err(Error::dims(
                    format!("{}x{}", v.intrinsics.width, v.intrinsics.height),
                    format!("{}x{} (view {})", v.image.width(), v.image.height(), v.id),
                ));
            }
        }
        if let Some(first) = views.first() {
            for v in &views[1..] {
                if v.image.dims() != first.image.dims() {
                    return Err(Error::dims(
                        format!("{}x{}", first.image.width(), first.image.height()),
                        format!("{}x{} (view {})", v.image.width(), v.image.height(), v.id),
                    ));
                }
            }
        }
        Ok(Self { views })
    }

    pub fn views(&self) -> &[View] {
        &self.views
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&View> {
        self.views.iter().find(|v| v.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.views.iter().map(|v| v.id.as_str())
    }

    /// `(width, height)` shared by all views; `(0, 0)` for an empty set.
    pub fn base_resolution(&self) -> (usize, usize) {
        self.views.first().map(|v| v.image.dims()).unwrap_or((0, 0))
    }

    /// Restricts to the views whose ids satisfy `keep`, preserving order.
    pub fn filter(&self, mut keep: impl FnMut(&View) -> bool) -> ViewSet {
        ViewSet {
            views: self.views.iter().filter(|v| keep(v)).cloned().collect(),
        }
    }
}

fn normalize_min_max(img: &mut ImageBuf) {
    let (lo, hi) = img
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    for v in img.data_mut() {
        *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
    }
}

/// Loads a dataset directory containing `transforms.json`.
pub fn load_viewset(dir: &Path) -> Result<ViewSet> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let manifest = Manifest::read(&manifest_path)?;
    let mut views = Vec::with_capacity(manifest.frames.len());
    for frame in &manifest.frames {
        let pose = frame.pose();
        pose.check().map_err(|message| Error::InvalidPose {
            frame: frame.id.clone(),
            message,
        })?;
        let intrinsics = frame.intrinsics();
        intrinsics.validate().map_err(|e| Error::Manifest {
            path: manifest_path.clone(),
            message: format!("frame {}: {e}", frame.id),
        })?;
        let decoded = read_png(&dir.join(&frame.file))?;
        let mut image = match decoded.image.space() {
            ColorSpace::Gray => decoded.image,
            _ => image_to_gray(&decoded.image),
        };
        if manifest.modality == Modality::Ir {
            normalize_min_max(&mut image);
        }
        let depth = frame
            .depth_file
            .as_ref()
            .map(|f| read_depth(&dir.join(f)))
            .transpose()?;
        views.push(View {
            id: frame.id.clone(),
            image,
            pose,
            intrinsics,
            depth,
            color_path: frame.color_file.as_ref().map(|f| dir.join(f)),
        });
    }
    ViewSet::new(views)
}

const DEPTH_HEADER: u64 = 8;

/// Writes a depth plane: `u32 width, u32 height`, then `f32` samples, all
/// little-endian. `+∞` is stored as `f32::MAX`.
pub fn write_depth(depth: &ImageBuf, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(DEPTH_HEADER as usize + depth.data().len() * 4);
    bytes.extend_from_slice(&(depth.width() as u32).to_le_bytes());
    bytes.extend_from_slice(&(depth.height() as u32).to_le_bytes());
    for &d in depth.data() {
        let stored = if d.is_finite() { d } else { f32::MAX };
        bytes.extend_from_slice(&stored.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads a depth plane written by [`write_depth`]; `f32::MAX` decodes to `+∞`.
pub fn read_depth(path: &Path) -> Result<ImageBuf> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, samples) = read_plane_header("depth", &bytes, 1)?;
    let data = samples
        .map(|v| if v == f32::MAX { f32::INFINITY } else { v })
        .collect();
    ImageBuf::from_vec(w, h, ColorSpace::Scalar, data)
}

/// Parses `u32 width, u32 height` followed by `width·height·per_pixel` `f32`s.
pub fn read_plane_header<'a>(
    kind: &'static str,
    bytes: &'a [u8],
    per_pixel: usize,
) -> Result<(usize, usize, impl Iterator<Item = f32> + 'a)> {
    if bytes.len() < DEPTH_HEADER as usize {
        return Err(Error::Malformed {
            kind,
            offset: bytes.len() as u64,
            message: "truncated header".into(),
        });
    }
    let w = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if w == 0 || h == 0 {
        return Err(Error::Malformed {
            kind,
            offset: 0,
            message: format!("empty dimensions {w}x{h}"),
        });
    }
    let expected = DEPTH_HEADER as usize + w * h * per_pixel * 4;
    if bytes.len() != expected {
        let offset = bytes.len().min(expected) as u64;
        return Err(Error::Malformed {
            kind,
            offset,
            message: format!("expected {expected} bytes for {w}x{h}, found {}", bytes.len()),
        });
    }
    let samples = bytes[DEPTH_HEADER as usize..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    Ok((w, h, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{write_png16, write_png8};
    use nalgebra::Vector3;

    fn entry(id: &str, file: &str) -> FrameEntry {
        let mut e = FrameEntry {
            id: id.into(),
            file: file.into(),
            transform_matrix: [[0.0; 4]; 4],
            fx: 10.0,
            fy: 10.0,
            cx: 2.0,
            cy: 2.0,
            width: 4,
            height: 4,
            depth_file: None,
            color_file: None,
        };
        e.set_pose(&Pose::look_at(Vector3::new(0.0, 0.0, 3.0), Vector3::zeros(), Vector3::y()));
        e
    }

    #[test]
    fn missing_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_viewset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("transforms.json"));
    }

    #[test]
    fn missing_image_names_file() {
        let dir = tempfile::tempdir().unwrap();
        Manifest {
            modality: Modality::Gray,
            frames: vec![entry("a", "nope.png")],
        }
        .write(&dir.path().join(MANIFEST_NAME))
        .unwrap();
        let err = load_viewset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("nope.png"), "{err}");
    }

    #[test]
    fn bad_pose_names_frame() {
        let dir = tempfile::tempdir().unwrap();
        write_png8(&ImageBuf::new(4, 4, ColorSpace::Gray), &dir.path().join("a.png")).unwrap();
        let mut e = entry("frame-7", "a.png");
        e.transform_matrix[0][0] = 2.0;
        Manifest {
            modality: Modality::Gray,
            frames: vec![e],
        }
        .write(&dir.path().join(MANIFEST_NAME))
        .unwrap();
        let err = load_viewset(dir.path()).unwrap_err();
        assert!(matches!(&err, Error::InvalidPose { frame, .. } if frame == "frame-7"), "{err}");
    }

    #[test]
    fn gray8_white_is_one_and_color_is_converted() {
        let dir = tempfile::tempdir().unwrap();
        write_png8(&ImageBuf::filled(4, 4, ColorSpace::Gray, 1.0), &dir.path().join("w.png")).unwrap();
        let red = ImageBuf::from_fn(4, 4, ColorSpace::Srgb, |_, _| [1.0, 0.0, 0.0]);
        write_png8(&red, &dir.path().join("r.png")).unwrap();
        Manifest {
            modality: Modality::Gray,
            frames: vec![entry("w", "w.png"), entry("r", "r.png")],
        }
        .write(&dir.path().join(MANIFEST_NAME))
        .unwrap();
        let vs = load_viewset(dir.path()).unwrap();
        assert!(vs.get("w").unwrap().image.data().iter().all(|&v| v == 1.0));
        assert!(vs
            .get("r")
            .unwrap()
            .image
            .data()
            .iter()
            .all(|&v| (v - 0.299).abs() < 1e-6));
    }

    #[test]
    fn ir_frames_are_min_max_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let raw = ImageBuf::from_fn(4, 4, ColorSpace::Gray, |x, _| [0.2 + 0.1 * x as f32, 0.0, 0.0]);
        write_png16(&raw, &dir.path().join("ir.png")).unwrap();
        Manifest {
            modality: Modality::Ir,
            frames: vec![entry("ir", "ir.png")],
        }
        .write(&dir.path().join(MANIFEST_NAME))
        .unwrap();
        let vs = load_viewset(dir.path()).unwrap();
        let img = &vs.views()[0].image;
        let lo = img.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = img.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn depth_round_trip_with_sentinel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.depth");
        let depth = ImageBuf::from_vec(2, 1, ColorSpace::Scalar, vec![1.5, f32::INFINITY]).unwrap();
        write_depth(&depth, &path).unwrap();
        let raw = fs::read(&path).unwrap();
        assert_eq!(&raw[12..16], &f32::MAX.to_le_bytes());
        assert_eq!(read_depth(&path).unwrap(), depth);

        fs::write(&path, &raw[..14]).unwrap();
        assert!(matches!(read_depth(&path), Err(Error::Malformed { offset: 14, .. })));
    }

    #[test]
    fn viewset_rejects_duplicates_and_mixed_sizes() {
        let view = |id: &str, w: usize| View {
            id: id.into(),
            image: ImageBuf::new(w, 4, ColorSpace::Gray),
            pose: Pose::identity(),
            intrinsics: CameraIntrinsics::from_fov(w, 4, 60.0),
            depth: None,
            color_path: None,
        };
        assert!(ViewSet::new(vec![view("a", 4), view("a", 4)]).is_err());
        assert!(ViewSet::new(vec![view("a", 4), view("b", 8)]).is_err());
        assert_eq!(ViewSet::new(vec![view("a", 4), view("b", 4)]).unwrap().len(), 2);
    }
}
