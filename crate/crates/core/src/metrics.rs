//! Cross-view color consistency: warp one frame into another's viewpoint,
//! mask what cannot be matched, and average the squared residual.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color::image_to_lab;
use crate::dataset::{read_plane_header, CameraIntrinsics, Pose};
use crate::error::{Error, Result};
use crate::image::{ColorSpace, ImageBuf};

/// Relative depth disagreement above which a reprojected pixel counts as
/// occluded.
pub const OCCLUSION_TOLERANCE: f64 = 0.01;

/// Relative depth range across the contributing source taps above which the
/// sample straddles a depth edge and is masked.
pub const DEPTH_SPREAD: f64 = 0.05;

/// Per pixel of a destination frame, the sub-pixel location in the source
/// frame it corresponds to, plus whether that correspondence is trusted.
/// Coordinates are in pixel-index units (pixel `(x, y)` has its center at
/// `(x, y)`).
#[derive(Debug, Clone, PartialEq)]
pub struct WarpField {
    width: usize,
    height: usize,
    src_width: usize,
    src_height: usize,
    coords: Vec<[f64; 2]>,
    mask: Vec<bool>,
}

/// Slack for coordinates that land on the border up to rounding.
const BORDER_SLACK: f64 = 1e-9;

fn in_bounds(c: [f64; 2], w: usize, h: usize) -> bool {
    let (lo, hx, hy) = (-BORDER_SLACK, (w - 1) as f64 + BORDER_SLACK, (h - 1) as f64 + BORDER_SLACK);
    c[0] >= lo && c[1] >= lo && c[0] <= hx && c[1] <= hy
}

impl WarpField {
    /// Maps every pixel to itself with a full mask.
    pub fn identity(width: usize, height: usize) -> Self {
        let coords = (0..height)
            .flat_map(|y| (0..width).map(move |x| [x as f64, y as f64]))
            .collect();
        Self {
            width,
            height,
            src_width: width,
            src_height: height,
            coords,
            mask: vec![true; width * height],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn coord(&self, x: usize, y: usize) -> [f64; 2] {
        self.coords[y * self.width + x]
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Bilinear taps at a continuous pixel-index location, which must lie inside
/// the image: corner indices `[x0y0, x1y0, x0y1, x1y1]` and fractions `(fx, fy)`.
fn taps(c: [f64; 2], w: usize, h: usize) -> ([usize; 4], [f64; 2]) {
    let x0 = (c[0].floor() as usize).min(w.saturating_sub(2));
    let y0 = (c[1].floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    (
        [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        [c[0] - x0 as f64, c[1] - y0 as f64],
    )
}

/// Bilinear interpolation by nested lerps, so equal taps reproduce their
/// value exactly.
fn bilinear(c: [f64; 2], w: usize, h: usize, value: impl Fn(usize) -> f64) -> f64 {
    let ([i00, i10, i01, i11], [fx, fy]) = taps(c, w, h);
    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
    lerp(lerp(value(i00), value(i10), fx), lerp(value(i01), value(i11), fx), fy)
}

fn check_depth(cam: &CameraIntrinsics, depth: &ImageBuf, which: &str) -> Result<()> {
    if depth.dims() != (cam.width, cam.height) || depth.channels() != 1 {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{} single-channel {which} depth", cam.width, cam.height),
            actual: format!("{}x{}x{}", depth.width(), depth.height(), depth.channels()),
        });
    }
    Ok(())
}

/// Builds the warp that reads `src` at the location each `dst` pixel sees.
/// Depths are distances along the pixel rays, `+∞` for background.
///
/// A pixel is masked when its own depth is background, when it projects
/// outside the source image or behind the source camera, when the source taps
/// with nonzero weight include background or span more than [`DEPTH_SPREAD`]
/// of the reprojected distance, or when the bilinearly sampled source
/// depth disagrees with the reprojected distance by more than
/// [`OCCLUSION_TOLERANCE`] (relative).
pub fn warp_by_depth(
    src_cam: &CameraIntrinsics,
    src_pose: &Pose,
    src_depth: &ImageBuf,
    dst_cam: &CameraIntrinsics,
    dst_pose: &Pose,
    dst_depth: &ImageBuf,
) -> Result<WarpField> {
    check_depth(src_cam, src_depth, "source")?;
    check_depth(dst_cam, dst_depth, "destination")?;
    let (w, h) = (dst_cam.width, dst_cam.height);
    let (sw, sh) = (src_cam.width, src_cam.height);
    let sdepth = src_depth.data();
    let per_pixel: Vec<([f64; 2], bool)> = (0..w * h)
        .into_par_iter()
        .with_min_len(1024)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let d = dst_depth.data()[i] as f64;
            if !d.is_finite() || d <= 0.0 {
                return ([f64::NAN; 2], false);
            }
            let dir = dst_pose.rotation * dst_cam.unproject(x as f64 + 0.5, y as f64 + 0.5);
            let world: Vector3<f64> = dst_pose.translation + dir.normalize() * d;
            let local = src_pose.world_to_camera(&world);
            let Some((u, v)) = src_cam.project(&local) else {
                return ([f64::NAN; 2], false);
            };
            let c = [u - 0.5, v - 0.5];
            if !in_bounds(c, sw, sh) {
                return (c, false);
            }
            let expected = local.norm();
            let (idx, [fx, fy]) = taps(c, sw, sh);
            let weights = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
            let used = idx.iter().zip(weights).filter(|(_, wt)| *wt > 0.0).map(|(&j, _)| sdepth[j] as f64);
            let (near, far) = used.fold((f64::INFINITY, 0.0f64), |(n, f), s| (n.min(s), f.max(s)));
            let agree = far.is_finite() && far - near <= DEPTH_SPREAD * expected && {
                let seen = bilinear(c, sw, sh, |j| if sdepth[j].is_finite() { sdepth[j] as f64 } else { 0.0 });
                (seen - expected).abs() <= OCCLUSION_TOLERANCE * expected
            };
            (c, agree)
        })
        .collect();
    let (coords, mask) = per_pixel.into_iter().unzip();
    Ok(WarpField {
        width: w,
        height: h,
        src_width: sw,
        src_height: sh,
        coords,
        mask,
    })
}

/// Samples `src` through `warp`. Masked pixels are zero.
pub fn warp_image(src: &ImageBuf, warp: &WarpField) -> Result<ImageBuf> {
    if src.dims() != (warp.src_width, warp.src_height) {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", warp.src_width, warp.src_height),
            actual: format!("{}x{}", src.width(), src.height()),
        });
    }
    let c = src.channels();
    let (sw, sh) = src.dims();
    let mut out = ImageBuf::new(warp.width, warp.height, src.space());
    for (i, px) in out.data_mut().chunks_exact_mut(c).enumerate() {
        if !warp.mask[i] {
            continue;
        }
        for (k, o) in px.iter_mut().enumerate() {
            *o = bilinear(warp.coords[i], sw, sh, |j| src.at(j)[k] as f64) as f32;
        }
    }
    Ok(out)
}

/// Fractional tolerances for the forward-backward flow check: a pixel is kept
/// when `|f + b|² ≤ alpha·(|f|² + |b|²) + beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowCheck {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for FlowCheck {
    fn default() -> Self {
        Self { alpha: 0.01, beta: 0.5 }
    }
}

/// Dense optical flow: destination pixel `p` corresponds to source `p + f(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub width: usize,
    pub height: usize,
    pub uv: Vec<[f32; 2]>,
}

impl Flow {
    pub fn constant(width: usize, height: usize, uv: [f32; 2]) -> Self {
        Self {
            width,
            height,
            uv: vec![uv; width * height],
        }
    }

    fn sample(&self, c: [f64; 2]) -> [f64; 2] {
        [0, 1].map(|k| bilinear(c, self.width, self.height, |j| self.uv[j][k] as f64))
    }
}

/// Writes `u32 width, u32 height`, then `(u, v)` `f32` pairs, little-endian.
pub fn write_flow(flow: &Flow, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + flow.uv.len() * 8);
    bytes.extend_from_slice(&(flow.width as u32).to_le_bytes());
    bytes.extend_from_slice(&(flow.height as u32).to_le_bytes());
    for [u, v] in &flow.uv {
        bytes.extend_from_slice(&u.to_le_bytes());
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_flow(path: &Path) -> Result<Flow> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_flow(&bytes)
}

pub fn parse_flow(bytes: &[u8]) -> Result<Flow> {
    let (width, height, samples) = read_plane_header("flow", bytes, 2)?;
    let flat: Vec<f32> = samples.collect();
    if let Some(k) = flat.iter().position(|v| !v.is_finite()) {
        return Err(Error::Malformed {
            kind: "flow",
            offset: 8 + 4 * k as u64,
            message: "non-finite flow value".into(),
        });
    }
    let uv = flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    Ok(Flow { width, height, uv })
}

/// Builds a warp from a forward flow, masked by bounds and, when `backward`
/// (source to destination) is given, by the forward-backward check.
pub fn flow_warp(forward: &Flow, backward: Option<&Flow>, check: FlowCheck) -> Result<WarpField> {
    let (w, h) = (forward.width, forward.height);
    if let Some(b) = backward {
        if (b.width, b.height) != (w, h) {
            return Err(Error::DimensionMismatch {
                expected: format!("{w}x{h} backward flow"),
                actual: format!("{}x{}", b.width, b.height),
            });
        }
    }
    let mut coords = Vec::with_capacity(w * h);
    let mut mask = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let f = forward.uv[y * w + x];
            let f = [f[0] as f64, f[1] as f64];
            let c = [x as f64 + f[0], y as f64 + f[1]];
            let mut ok = in_bounds(c, w, h);
            if ok {
                if let Some(back) = backward {
                    let b = back.sample(c);
                    let resid = (f[0] + b[0]).powi(2) + (f[1] + b[1]).powi(2);
                    let mag = f[0] * f[0] + f[1] * f[1] + b[0] * b[0] + b[1] * b[1];
                    ok = resid <= check.alpha * mag + check.beta;
                }
            }
            coords.push(c);
            mask.push(ok);
        }
    }
    Ok(WarpField {
        width: w,
        height: h,
        src_width: w,
        src_height: h,
        coords,
        mask,
    })
}

/// Reads flow files and builds the warp. `expected` is the frame resolution.
pub fn load_flow_warp(
    forward: &Path,
    backward: Option<&Path>,
    check: FlowCheck,
    expected: (usize, usize),
) -> Result<WarpField> {
    let f = read_flow(forward)?;
    if (f.width, f.height) != expected {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", expected.0, expected.1),
            actual: format!("{}x{} flow in {}", f.width, f.height, forward.display()),
        });
    }
    let b = backward.map(read_flow).transpose()?;
    flow_warp(&f, b.as_ref(), check)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsistencyMode {
    /// Squared differences summed over all stored channels.
    Full,
    /// Lab `(a, b)` only, scaled by 1/100.
    Chroma,
}

impl std::str::FromStr for ConsistencyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "chroma" => Ok(Self::Chroma),
            _ => Err(Error::InvalidArgument(format!("unknown consistency mode '{s}'"))),
        }
    }
}

fn chroma_plane(img: &ImageBuf) -> Vec<[f64; 2]> {
    image_to_lab(img)
        .pixels()
        .map(|p| [p[1] as f64 / 100.0, p[2] as f64 / 100.0])
        .collect()
}

/// Masked mean of the squared residual between a frame and the other frame
/// warped into it.
pub fn consistency_error(frame: &ImageBuf, warped: &ImageBuf, mask: &[bool], mode: ConsistencyMode) -> Result<f64> {
    frame.ensure_same_shape(warped)?;
    if mask.len() != frame.len_pixels() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} mask entries", frame.len_pixels()),
            actual: mask.len().to_string(),
        });
    }
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let sum: f64 = match mode {
        ConsistencyMode::Full => frame
            .pixels()
            .zip(warped.pixels())
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|((a, b), _)| a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>())
            .sum(),
        ConsistencyMode::Chroma => chroma_plane(frame)
            .iter()
            .zip(chroma_plane(warped))
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|((a, b), _)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
            .sum(),
    };
    Ok(sum / count as f64)
}

/// Frame offsets for the short- and long-range protocols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Offsets {
    pub short: usize,
    pub long: usize,
}

impl Default for Offsets {
    fn default() -> Self {
        Self { short: 1, long: 7 }
    }
}

/// Camera and depth of one frame in a sequence.
#[derive(Debug, Clone)]
pub struct FrameGeometry {
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
    pub depth: ImageBuf,
}

/// Warp reading frame `i` into frame `i + delta`.
#[derive(Debug, Clone)]
pub struct PairWarp {
    pub i: usize,
    pub delta: usize,
    pub warp: WarpField,
}

/// All `(i, i + Δ)` warps for both offsets, short pairs first.
pub fn sequence_warps(frames: &[FrameGeometry], offsets: Offsets) -> Result<Vec<PairWarp>> {
    let longest = offsets.short.max(offsets.long);
    if offsets.short == 0 || offsets.long == 0 {
        return Err(Error::InvalidArgument("frame offsets must be >= 1".into()));
    }
    if frames.len() <= longest {
        return Err(Error::SequenceTooShort {
            len: frames.len(),
            delta: longest,
        });
    }
    let pairs: Vec<(usize, usize)> = [offsets.short, offsets.long]
        .into_iter()
        .flat_map(|d| (0..frames.len() - d).map(move |i| (i, d)))
        .collect();
    pairs
        .into_par_iter()
        .map(|(i, delta)| {
            let (s, d) = (&frames[i], &frames[i + delta]);
            let warp = warp_by_depth(&s.intrinsics, &s.pose, &s.depth, &d.intrinsics, &d.pose, &d.depth)?;
            Ok(PairWarp { i, delta, warp })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub i: usize,
    pub delta: usize,
    pub error: Option<f64>,
    pub valid_pixels: usize,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub mode: ConsistencyMode,
    pub offsets: Offsets,
    pub pairs: Vec<PairRecord>,
    pub mean_short: Option<f64>,
    pub mean_long: Option<f64>,
    /// What the mask excludes.
    pub mask_rule: String,
}

impl ConsistencyReport {
    fn mean_for(pairs: &[PairRecord], delta: usize) -> Option<f64> {
        let errs: Vec<f64> = pairs.iter().filter(|p| p.delta == delta).filter_map(|p| p.error).collect();
        (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,delta,error,valid_pixels,skipped\n");
        for p in &self.pairs {
            let err = p.error.map(|e| e.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                p.i,
                p.delta,
                err,
                p.valid_pixels,
                p.skipped.as_deref().unwrap_or("")
            );
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }
}

/// Evaluates `frames` over precomputed warps. A pair with an empty mask is
/// recorded as skipped rather than failing the report.
pub fn evaluate_pairs(
    frames: &[ImageBuf],
    warps: &[PairWarp],
    offsets: Offsets,
    mode: ConsistencyMode,
) -> Result<ConsistencyReport> {
    let pairs = warps
        .par_iter()
        .map(|pw| {
            let (src, dst) = frames
                .get(pw.i)
                .zip(frames.get(pw.i + pw.delta))
                .ok_or(Error::SequenceTooShort {
                    len: frames.len(),
                    delta: pw.delta,
                })?;
            let warped = warp_image(src, &pw.warp)?;
            let valid = pw.warp.valid_count();
            let (error, skipped) = match consistency_error(dst, &warped, pw.warp.mask(), mode) {
                Ok(e) => (Some(e), None),
                Err(Error::EmptyMask) => (None, Some("no valid pixels".to_string())),
                Err(e) => return Err(e),
            };
            Ok(PairRecord {
                i: pw.i,
                delta: pw.delta,
                error,
                valid_pixels: valid,
                skipped,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConsistencyReport {
        mode,
        offsets,
        mean_short: ConsistencyReport::mean_for(&pairs, offsets.short),
        mean_long: ConsistencyReport::mean_for(&pairs, offsets.long),
        pairs,
        mask_rule: "occlusion (1% relative depth) and bounds".into(),
    })
}

/// Warps and evaluates a sequence in one go.
pub fn sequence_consistency(
    frames: &[ImageBuf],
    geometry: &[FrameGeometry],
    offsets: Offsets,
    mode: ConsistencyMode,
) -> Result<ConsistencyReport> {
    if frames.len() != geometry.len() {
        return Err(Error::InvalidArgument(format!(
            "{} frames but {} geometries",
            frames.len(),
            geometry.len()
        )));
    }
    let warps = sequence_warps(geometry, offsets)?;
    evaluate_pairs(frames, &warps, offsets, mode)
}

/// Mean Lab chroma `√(a² + b²)` over all pixels.
pub fn mean_chroma_magnitude(img: &ImageBuf) -> f64 {
    if matches!(img.space(), ColorSpace::Gray | ColorSpace::Scalar) {
        return 0.0;
    }
    let lab = image_to_lab(img);
    lab.pixels().map(|p| (p[1] as f64).hypot(p[2] as f64)).sum::<f64>() / lab.len_pixels().max(1) as f64
}
