//! Per-view colorized teacher images, read from disk or synthesized from
//! ground truth with controlled per-view chroma jitter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::{image_to_gray, lab_to_rgb, rgb_to_lab};
use crate::dataset::ViewSet;
use crate::error::{Error, Result};
use crate::image::{read_png, write_png16, ColorSpace, ImageBuf};

/// Sidecar describing where a teacher directory came from.
pub const TEACHER_SIDECAR: &str = "teacher.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Jitter {
    /// Hue rotations are drawn from `U(−sigma_h, sigma_h)` degrees.
    pub sigma_h: f64,
    /// Chroma gains are drawn from `U(1 − sigma_c, 1 + sigma_c)`.
    pub sigma_c: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            sigma_h: 15.0,
            sigma_c: 0.1,
        }
    }
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        sigma_h: 0.0,
        sigma_c: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewJitter {
    pub id: String,
    pub hue_degrees: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    /// Read from disk; `sidecar` holds whatever JSON came with the images.
    File {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sidecar: Option<serde_json::Value>,
    },
    Oracle {
        sigma_h: f64,
        sigma_c: f64,
        seed: u64,
        views: Vec<ViewJitter>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSet {
    entries: BTreeMap<String, ImageBuf>,
    provenance: Provenance,
    /// Mean |gray(teacher) − input| per view.
    luma_diagnostics: BTreeMap<String, f64>,
}

fn luma_gap(teacher: &ImageBuf, gray: &ImageBuf) -> f64 {
    let t = image_to_gray(teacher);
    t.data()
        .iter()
        .zip(gray.data())
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .sum::<f64>()
        / t.len_pixels().max(1) as f64
}

impl TeacherSet {
    /// Builds a set from sRGB images, checking it against `views`.
    pub fn new(entries: BTreeMap<String, ImageBuf>, provenance: Provenance, views: &ViewSet) -> Result<Self> {
        let mut set = Self {
            entries,
            provenance,
            luma_diagnostics: BTreeMap::new(),
        };
        set.check(views)?;
        for v in views.views() {
            let gap = luma_gap(&set.entries[&v.id], &v.image);
            set.luma_diagnostics.insert(v.id.clone(), gap);
        }
        Ok(set)
    }

    /// Every view has exactly one sRGB entry of the views' resolution.
    pub fn check(&self, views: &ViewSet) -> Result<()> {
        let (w, h) = views.base_resolution();
        for id in views.ids() {
            let img = self
                .entries
                .get(id)
                .ok_or_else(|| Error::MissingView(id.to_string()))?;
            if img.dims() != (w, h) {
                return Err(Error::DimensionMismatch {
                    expected: format!("{w}x{h}"),
                    actual: format!("{}x{} (teacher for view '{id}')", img.width(), img.height()),
                });
            }
            if img.space() != ColorSpace::Srgb {
                return Err(Error::InvalidArgument(format!("teacher image for '{id}' is not sRGB")));
            }
        }
        if let Some(extra) = self.entries.keys().find(|k| views.get(k).is_none()) {
            return Err(Error::ViewMismatch(format!("teacher image '{extra}' has no matching view")));
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&ImageBuf> {
        self.entries.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn luma_diagnostics(&self) -> &BTreeMap<String, f64> {
        &self.luma_diagnostics
    }

    pub fn mean_luma_gap(&self) -> f64 {
        self.luma_diagnostics.values().sum::<f64>() / self.luma_diagnostics.len().max(1) as f64
    }

    /// Writes `<id>.png` (16-bit) per view and the provenance sidecar.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (id, img) in &self.entries {
            write_png16(img, &dir.join(format!("{id}.png")))?;
        }
        let sidecar = dir.join(TEACHER_SIDECAR);
        let text = serde_json::to_string_pretty(&self.provenance).expect("provenance serializes");
        fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))
    }
}

/// Reads `<view id>.png` for every view. Grayscale files are taken as neutral
/// color. The luma gap to the inputs is logged but not enforced.
pub fn load_teacher_dir(dir: &Path, views: &ViewSet) -> Result<TeacherSet> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut entries = BTreeMap::new();
    for id in views.ids() {
        let path = dir.join(format!("{id}.png"));
        if !path.exists() {
            return Err(Error::MissingView(format!("{id} (expected {})", path.display())));
        }
        let img = read_png(&path)?.image;
        let img = match img.space() {
            ColorSpace::Gray => crate::color::image_to_srgb(&img),
            _ => img,
        };
        entries.insert(id.to_string(), img);
    }
    let sidecar = dir.join(TEACHER_SIDECAR);
    let provenance = if sidecar.exists() {
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: sidecar.clone(),
            message: e.to_string(),
        })?;
        serde_json::from_value(value.clone()).unwrap_or(Provenance::File { sidecar: Some(value) })
    } else {
        Provenance::File { sidecar: None }
    };
    let set = TeacherSet::new(entries, provenance, views)?;
    let gap = set.mean_luma_gap();
    info!("teacher {}: mean luma gap {gap:.4}", dir.display());
    if gap > 0.05 {
        warn!("teacher luma differs noticeably from the inputs (mean {gap:.3})");
    }
    Ok(set)
}

/// Rotates `(a, b)` by `hue_degrees` and scales it by `gain`; `L` is returned
/// untouched.
pub fn jitter_lab(lab: [f64; 3], hue_degrees: f64, gain: f64) -> [f64; 3] {
    let (s, c) = hue_degrees.to_radians().sin_cos();
    [lab[0], gain * (c * lab[1] - s * lab[2]), gain * (s * lab[1] + c * lab[2])]
}

/// Applies [`jitter_lab`] to every pixel of an sRGB image (clipping back into
/// the sRGB gamut).
pub fn jitter_image(img: &ImageBuf, hue_degrees: f64, gain: f64) -> ImageBuf {
    let data = img
        .pixels()
        .flat_map(|p| {
            let lab = rgb_to_lab([p[0] as f64, p[1] as f64, p[2] as f64]);
            lab_to_rgb(jitter_lab(lab, hue_degrees, gain)).0.map(|v| v as f32)
        })
        .collect();
    ImageBuf::from_vec(img.width(), img.height(), ColorSpace::Srgb, data).expect("3 channels")
}

fn symmetric(rng: &mut ChaCha8Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.gen_range(-half..=half)
    } else {
        0.0
    }
}

/// Synthesizes a teacher from ground-truth sRGB colors: one hue rotation and
/// one chroma gain per view, drawn in view order from a seeded generator.
pub fn oracle_teacher(
    views: &ViewSet,
    gt: &BTreeMap<String, ImageBuf>,
    jitter: Jitter,
    seed: u64,
) -> Result<TeacherSet> {
    if !(jitter.sigma_h >= 0.0 && jitter.sigma_c >= 0.0) {
        return Err(Error::InvalidArgument("jitter widths must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = BTreeMap::new();
    let mut params = Vec::with_capacity(views.len());
    for id in views.ids() {
        let color = gt
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("no ground-truth color for view '{id}'")))?;
        let hue = symmetric(&mut rng, jitter.sigma_h);
        let gain = 1.0 + symmetric(&mut rng, jitter.sigma_c);
        entries.insert(id.to_string(), jitter_image(color, hue, gain));
        params.push(ViewJitter {
            id: id.to_string(),
            hue_degrees: hue,
            gain,
        });
    }
    TeacherSet::new(
        entries,
        Provenance::Oracle {
            sigma_h: jitter.sigma_h,
            sigma_c: jitter.sigma_c,
            seed,
            views: params,
        },
        views,
    )
}

/// Ground-truth color images referenced by the views (baked datasets).
pub fn load_gt_colors(views: &ViewSet) -> Result<BTreeMap<String, ImageBuf>> {
    let mut out = BTreeMap::new();
    for v in views.views() {
        let path = v
            .color_path
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("view '{}' has no ground-truth color", v.id)))?;
        let img = read_png(path)?.image;
        if img.space() != ColorSpace::Srgb {
            return Err(Error::InvalidArgument(format!("{} is not a color image", path.display())));
        }
        out.insert(v.id.clone(), img);
    }
    Ok(out)
}
