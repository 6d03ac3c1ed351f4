//! Fixed-stride volume rendering and its adjoint.
//!
//! A ray is cut into segments of length `step` starting at its box entry
//! (the last segment is truncated at the exit). Each segment is shaded at its
//! midpoint with `α = 1 − exp(−σ·len)`; transmittance telescopes so that
//! `Σ Tᵢαᵢ + T_final = 1`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sh::sh_basis;
use super::{sigmoid, softplus, Corners, GridGrad, SparseVoxelGrid};
use crate::dataset::{generate_rays, CameraIntrinsics, Pose, Ray};
use crate::error::Result;
use crate::image::{ColorSpace, ImageBuf};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    /// Segment length in scene units.
    pub step: f64,
    /// Color returned for transmitted light (first `channels` entries are used).
    pub background: [f64; 3],
    /// March stops once transmittance falls below this; 0 disables.
    pub min_transmittance: f64,
    /// Segments in cells whose eight corner densities are all below this
    /// are treated as empty; 0 disables.
    #[serde(default)]
    pub sigma_skip: f64,
}

impl RenderOptions {
    /// Half the smallest voxel edge, black background, stop at `T < 1e-4`.
    pub fn for_grid(grid: &SparseVoxelGrid) -> Self {
        let s = grid.voxel_size();
        Self {
            step: 0.5 * s[0].min(s[1]).min(s[2]),
            background: [0.0; 3],
            min_transmittance: 1e-4,
            sigma_skip: 0.0,
        }
    }
}

/// Per-cell flag, indexed by the cell's lowest corner voxel: can any point of
/// the cell reach `sigma_skip`?
pub(crate) struct SkipMap(Vec<bool>);

impl SkipMap {
    pub(crate) fn build(grid: &SparseVoxelGrid, sigma_skip: f64) -> Option<SkipMap> {
        if !(sigma_skip > 0.0) {
            return None;
        }
        // softplus⁻¹(σ) = ln(e^σ − 1)
        let raw_min = sigma_skip.exp_m1().ln() as f32;
        let [nx, ny, nz] = grid.resolution();
        let (density, occ) = (grid.density(), grid.occupancy());
        let live: Vec<bool> = density
            .iter()
            .zip(occ)
            .map(|(&d, &o)| o && d >= raw_min)
            .collect();
        let nxy = nx * ny;
        let mut map = vec![false; live.len()];
        map.par_chunks_mut(nxy).enumerate().for_each(|(z, plane)| {
            let z1 = (z + 1).min(nz - 1);
            for y in 0..ny {
                let y1 = (y + 1).min(ny - 1);
                for x in 0..nx {
                    let x1 = (x + 1).min(nx - 1);
                    plane[x + nx * y] = [z, z1].iter().any(|&zz| {
                        [y, y1].iter().any(|&yy| live[x + nx * yy + nxy * zz] || live[x1 + nx * yy + nxy * zz])
                    });
                }
            }
        });
        Some(SkipMap(map))
    }
}


/// Per-ray render result. `color` holds `channels` meaningful entries
/// (the rest are zero); values are linear and unclamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSample {
    pub color: [f64; 3],
    /// Expected termination distance; `+∞` when the ray misses the grid.
    pub depth: f64,
    /// Accumulated alpha `Σ Tᵢαᵢ`.
    pub opacity: f64,
    /// Transmittance left at the end of the march.
    pub transmittance: f64,
}

/// Output of [`render_image`].
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    /// `Gray` for 1-channel grids, `LinearRgb` otherwise. Unclamped.
    pub color: ImageBuf,
    pub depth: ImageBuf,
    pub opacity: ImageBuf,
}

#[derive(Debug, Clone, Copy)]
struct MarchPoint {
    corners: Corners,
    len: f64,
    alpha: f64,
    /// Transmittance before this segment.
    trans: f64,
    /// d softplus / d raw at the interpolated raw density.
    dsoftplus: f64,
    color: [f64; 3],
}

#[inline(always)]
fn shade<const CH: usize, const B: usize>(grid: &SparseVoxelGrid, corners: &Corners, basis: &[f64; 9]) -> [f64; 3] {
    let stride = CH * B;
    let b = B;
    let sh = grid.sh();
    let occ = grid.occupancy();
    let mut color = [0.0; 3];
    for c in 0..8 {
        let i = corners.idx[c];
        if !occ[i] {
            continue;
        }
        let w = corners.w[c];
        if w == 0.0 {
            continue;
        }
        let coeffs = &sh[i * stride..(i + 1) * stride];
        for (ch, out) in color.iter_mut().enumerate().take(CH) {
            let mut v = 0.0;
            for k in 0..b {
                v += basis[k] * coeffs[ch * b + k] as f64;
            }
            *out += w * v;
        }
    }
    color
}

/// Marches one ray. When `record` is given, per-segment state is stored for
/// the backward pass.
fn march<const CH: usize, const B: usize>(
    grid: &SparseVoxelGrid,
    ray: &Ray,
    opts: &RenderOptions,
    basis: &[f64; 9],
    skip: Option<&SkipMap>,
    mut record: Option<&mut Vec<MarchPoint>>,
) -> RenderSample {
    let channels = CH;
    let mut bg = [0.0; 3];
    bg[..channels].copy_from_slice(&opts.background[..channels]);
    if let Some(r) = record.as_deref_mut() {
        r.clear();
    }
    let Some((t0, t1)) = grid.bbox().intersect(&ray.origin, &ray.direction) else {
        return RenderSample {
            color: bg,
            depth: f64::INFINITY,
            opacity: 0.0,
            transmittance: 1.0,
        };
    };
    let (t0, t1) = (t0.max(ray.t_near), t1.min(ray.t_far));
    let mut trans = 1.0f64;
    let mut color = [0.0f64; 3];
    let mut weight_sum = 0.0f64;
    let mut depth_acc = 0.0f64;
    let mut k = 0usize;
    loop {
        let start = t0 + k as f64 * opts.step;
        if start >= t1 {
            break;
        }
        k += 1;
        let len = opts.step.min(t1 - start);
        let t_mid = start + 0.5 * len;
        let Some(corners) = grid.corners(&ray.at(t_mid)) else {
            continue;
        };
        if skip.is_some_and(|m| !m.0[corners.idx[0]]) {
            continue;
        }
        let raw = grid.raw_density_at(&corners);
        let sigma = softplus(raw);
        let decay = (-sigma * len).exp();
        let alpha = 1.0 - decay;
        let w = trans * alpha;
        let c = shade::<CH, B>(grid, &corners, basis);
        for ch in 0..channels {
            color[ch] += w * c[ch];
        }
        weight_sum += w;
        depth_acc += w * t_mid;
        if let Some(r) = record.as_deref_mut() {
            r.push(MarchPoint {
                corners,
                len,
                alpha,
                trans,
                dsoftplus: sigmoid(raw),
                color: c,
            });
        }
        trans *= decay;
        if trans < opts.min_transmittance {
            break;
        }
    }
    for ch in 0..channels {
        color[ch] += trans * bg[ch];
    }
    RenderSample {
        color,
        depth: depth_acc / weight_sum.max(1e-8),
        opacity: weight_sum,
        transmittance: trans,
    }
}

/// Adjoint of [`march`] for a linear functional `dcolor · color`.
fn backprop<const CH: usize, const B: usize>(
    grid: &SparseVoxelGrid,
    points: &[MarchPoint],
    final_trans: f64,
    opts: &RenderOptions,
    basis: &[f64; 9],
    dcolor: &[f64; 3],
    grads: &mut GridGrad,
) {
    let channels = CH;
    let b = B;
    let stride = CH * B;
    let occ = grid.occupancy();
    let want_density = !grid.is_density_frozen();
    if dcolor[..channels].iter().all(|&g| g == 0.0) {
        return;
    }
    // suffix[ch] = Σ_{j>i} w_j c_j + T_final · bg
    let mut suffix = [0.0f64; 3];
    for ch in 0..channels {
        suffix[ch] = final_trans * opts.background[ch];
    }
    for p in points.iter().rev() {
        let w = p.trans * p.alpha;
        if want_density {
            let trans_after = p.trans * (1.0 - p.alpha);
            let mut dsigma = 0.0;
            for ch in 0..channels {
                dsigma += dcolor[ch] * (trans_after * p.color[ch] - suffix[ch]);
            }
            let draw = dsigma * p.len * p.dsoftplus;
            for c in 0..8 {
                let i = p.corners.idx[c];
                if occ[i] {
                    grads.density[i] += p.corners.w[c] * draw;
                }
            }
        }
        for c in 0..8 {
            let i = p.corners.idx[c];
            let cw = p.corners.w[c] * w;
            if !occ[i] || cw == 0.0 {
                continue;
            }
            let dst = &mut grads.sh[i * stride..(i + 1) * stride];
            for ch in 0..channels {
                let g = cw * dcolor[ch];
                for k in 0..b {
                    dst[ch * b + k] += g * basis[k];
                }
            }
        }
        for ch in 0..channels {
            suffix[ch] += w * p.color[ch];
        }
    }
}

/// Calls `$f::<CH, B>(args)` for the grid's channel and basis counts.
macro_rules! specialize {
    ($grid:expr, $f:ident($($arg:expr),* $(,)?)) => {
        match ($grid.channels(), $grid.basis()) {
            (1, 1) => $f::<1, 1>($($arg),*),
            (1, 4) => $f::<1, 4>($($arg),*),
            (1, 9) => $f::<1, 9>($($arg),*),
            (3, 1) => $f::<3, 1>($($arg),*),
            (3, 4) => $f::<3, 4>($($arg),*),
            (3, 9) => $f::<3, 9>($($arg),*),
            (c, b) => unreachable!("grid invariant violated: {c} channels, basis {b}"),
        }
    };
}

fn march_any(
    grid: &SparseVoxelGrid,
    ray: &Ray,
    opts: &RenderOptions,
    basis: &[f64; 9],
    skip: Option<&SkipMap>,
    record: Option<&mut Vec<MarchPoint>>,
) -> RenderSample {
    specialize!(grid, march(grid, ray, opts, basis, skip, record))
}

fn backprop_any(
    grid: &SparseVoxelGrid,
    points: &[MarchPoint],
    final_trans: f64,
    opts: &RenderOptions,
    basis: &[f64; 9],
    dcolor: &[f64; 3],
    grads: &mut GridGrad,
) {
    specialize!(grid, backprop(grid, points, final_trans, opts, basis, dcolor, grads))
}

/// Renders a single ray.
pub fn render_ray(grid: &SparseVoxelGrid, ray: &Ray, opts: &RenderOptions) -> RenderSample {
    let skip = SkipMap::build(grid, opts.sigma_skip);
    let basis = sh_basis(&ray.direction, grid.basis());
    march_any(grid, ray, opts, &basis, skip.as_ref(), None)
}

/// Renders a batch of rays in parallel; output order matches input.
pub fn render_rays(grid: &SparseVoxelGrid, rays: &[Ray], opts: &RenderOptions) -> Vec<RenderSample> {
    let skip = SkipMap::build(grid, opts.sigma_skip);
    rays.par_iter()
        .with_min_len(64)
        .map(|r| march_any(grid, r, opts, &sh_basis(&r.direction, grid.basis()), skip.as_ref(), None))
        .collect()
}

/// Renders the level-`scale` image for a camera.
pub fn render_image(
    grid: &SparseVoxelGrid,
    cam: &CameraIntrinsics,
    pose: &Pose,
    scale: u32,
    opts: &RenderOptions,
) -> Result<RenderedImage> {
    let scaled = cam.scaled(scale)?;
    let rays = generate_rays(cam, pose, scale)?;
    let samples = render_rays(grid, &rays, opts);
    Ok(assemble(grid.channels(), scaled.width, scaled.height, &samples))
}

pub(crate) fn assemble(channels: usize, width: usize, height: usize, samples: &[RenderSample]) -> RenderedImage {
    let space = if channels == 1 {
        ColorSpace::Gray
    } else {
        ColorSpace::LinearRgb
    };
    let color = samples
        .iter()
        .flat_map(|s| s.color[..channels].iter().map(|&v| v as f32).collect::<Vec<_>>())
        .collect();
    let depth = samples.iter().map(|s| s.depth as f32).collect();
    let opacity = samples.iter().map(|s| s.opacity as f32).collect();
    RenderedImage {
        color: ImageBuf::from_vec(width, height, space, color).expect("sized by ray count"),
        depth: ImageBuf::from_vec(width, height, ColorSpace::Scalar, depth).expect("sized by ray count"),
        opacity: ImageBuf::from_vec(width, height, ColorSpace::Scalar, opacity).expect("sized by ray count"),
    }
}

/// Runs `per_ray` over contiguous ray chunks, one gradient buffer per chunk,
/// and merges the buffers into `grads` in chunk order. The chunk count only
/// depends on the rayon pool size, so results are reproducible per thread count.
fn accumulate<F>(grid: &SparseVoxelGrid, n: usize, grads: &mut GridGrad, per_ray: F) -> Vec<RenderSample>
where
    F: Fn(usize, &mut Vec<MarchPoint>, &mut GridGrad) -> RenderSample + Sync,
{
    let workers = rayon::current_num_threads().min(n.div_ceil(512)).max(1);
    if workers == 1 {
        let mut scratch = Vec::new();
        return (0..n).map(|i| per_ray(i, &mut scratch, grads)).collect();
    }
    let chunk = n.div_ceil(workers);
    let parts: Vec<(Vec<RenderSample>, GridGrad)> = (0..workers)
        .into_par_iter()
        .map(|w| {
            let mut local = GridGrad::zeros_like(grid);
            let mut scratch = Vec::new();
            let samples = (w * chunk..((w + 1) * chunk).min(n))
                .map(|i| per_ray(i, &mut scratch, &mut local))
                .collect();
            (samples, local)
        })
        .collect();
    const MERGE_CHUNK: usize = 1 << 14;
    grads
        .density
        .par_chunks_mut(MERGE_CHUNK)
        .enumerate()
        .for_each(|(ci, dst)| {
            for (_, part) in &parts {
                let src = &part.density[ci * MERGE_CHUNK..ci * MERGE_CHUNK + dst.len()];
                dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
        });
    grads.sh.par_chunks_mut(MERGE_CHUNK).enumerate().for_each(|(ci, dst)| {
        for (_, part) in &parts {
            let src = &part.sh[ci * MERGE_CHUNK..ci * MERGE_CHUNK + dst.len()];
            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
        }
    });
    parts.into_iter().flat_map(|(s, _)| s).collect()
}

/// Gradients of `Σ_r dcolor_r · color_r` with respect to density and SH.
/// The forward pass is recomputed deterministically from the inputs.
pub fn render_backward(
    grid: &SparseVoxelGrid,
    rays: &[Ray],
    dcolor: &[[f64; 3]],
    opts: &RenderOptions,
) -> GridGrad {
    assert_eq!(rays.len(), dcolor.len(), "one cotangent per ray");
    let mut grads = GridGrad::zeros_like(grid);
    let skip = SkipMap::build(grid, opts.sigma_skip);
    accumulate(grid, rays.len(), &mut grads, |i, scratch, g| {
        let basis = sh_basis(&rays[i].direction, grid.basis());
        let s = march_any(grid, &rays[i], opts, &basis, skip.as_ref(), Some(scratch));
        backprop_any(grid, scratch, s.transmittance, opts, &basis, &dcolor[i], g);
        s
    });
    grads
}

/// Forward and backward in one pass: `grad_fn(i, sample)` returns `dL/dcolor`
/// for ray `i` given its forward result. Gradients are added into `grads`.
pub fn render_forward_backward<F>(
    grid: &SparseVoxelGrid,
    rays: &[Ray],
    opts: &RenderOptions,
    grad_fn: F,
    grads: &mut GridGrad,
) -> Vec<RenderSample>
where
    F: Fn(usize, &RenderSample) -> [f64; 3] + Sync,
{
    let skip = SkipMap::build(grid, opts.sigma_skip);
    accumulate(grid, rays.len(), grads, |i, scratch, g| {
        let basis = sh_basis(&rays[i].direction, grid.basis());
        let s = march_any(grid, &rays[i], opts, &basis, skip.as_ref(), Some(scratch));
        let dcolor = grad_fn(i, &s);
        backprop_any(grid, scratch, s.transmittance, opts, &basis, &dcolor, g);
        s
    })
}
