//! Sparse voxel radiance field: per-voxel density and spherical-harmonic
//! appearance, trilinear sampling, volume rendering with analytic gradients,
//! and total-variation regularization.
//!
//! Storage is dense with an occupancy mask. Density is stored as a
//! pre-activation value, trilinearly interpolated, then passed through
//! softplus. Unoccupied voxels read as [`EMPTY_DENSITY`] with zero SH and
//! never receive gradients.

mod checkpoint;
mod render;
pub mod sh;
mod tv;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use render::{
    render_backward, render_forward_backward, render_image, render_ray, render_rays, RenderOptions,
    RenderSample, RenderedImage,
};
pub use sh::eval_sh;
pub use tv::{tv_loss, tv_loss_into};

use crate::error::{Error, Result};

/// Pre-activation density read from unoccupied voxels (softplus ≈ 4.5e-5).
pub const EMPTY_DENSITY: f32 = -10.0;

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// World-space axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).any(|k| !(max[k] > min[k])) {
            return Err(Error::InvalidArgument(format!("degenerate box {min:?}..{max:?}")));
        }
        Ok(Self { min, max })
    }

    pub fn cube(half: f64) -> Self {
        Self {
            min: [-half; 3],
            max: [half; 3],
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    /// Slab intersection; returns `(t_near, t_far)` clipped to `t ≥ 0`.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            if dir[k].abs() < 1e-15 {
                if origin[k] < self.min[k] || origin[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[k];
            let (mut a, mut b) = ((self.min[k] - origin[k]) * inv, (self.max[k] - origin[k]) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t0 < t1).then_some((t0, t1))
    }
}

/// Result of a trilinear lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    /// Interpolated pre-activation density.
    pub raw_density: f64,
    /// `softplus(raw_density)`.
    pub density: f64,
    /// Interpolated SH coefficients, `channels × basis`, channel-major.
    pub sh: Vec<f64>,
}

/// Eight interpolation corners: flat voxel indices and weights.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Corners {
    pub idx: [usize; 8],
    pub w: [f64; 8],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelGrid {
    resolution: [usize; 3],
    bbox: Aabb,
    channels: usize,
    basis: usize,
    density: Vec<f32>,
    sh: Vec<f32>,
    occupancy: Vec<bool>,
    density_frozen: bool,
}

impl SparseVoxelGrid {
    /// New grid with every voxel occupied, uniform `init_density` and zero SH.
    pub fn new(
        resolution: [usize; 3],
        bbox: Aabb,
        channels: usize,
        sh_degree: usize,
        init_density: f32,
    ) -> Result<Self> {
        if resolution.iter().any(|&n| n == 0) {
            return Err(Error::InvalidArgument(format!("empty resolution {resolution:?}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!("channels must be 1 or 3, got {channels}")));
        }
        let basis = sh::basis_size(sh_degree)?;
        let n = resolution.iter().product();
        Ok(Self {
            resolution,
            bbox,
            channels,
            basis,
            density: vec![init_density; n],
            sh: vec![0.0; n * channels * basis],
            occupancy: vec![true; n],
            density_frozen: false,
        })
    }

    /// Assembles a grid from raw arrays, validating every length.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        resolution: [usize; 3],
        bbox: Aabb,
        channels: usize,
        basis: usize,
        density: Vec<f32>,
        sh: Vec<f32>,
        occupancy: Vec<bool>,
        density_frozen: bool,
    ) -> Result<Self> {
        sh::check_basis(basis)?;
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!("channels must be 1 or 3, got {channels}")));
        }
        let n: usize = resolution.iter().product();
        if density.len() != n || occupancy.len() != n || sh.len() != n * channels * basis {
            return Err(Error::dims(
                format!("{n} voxels"),
                format!(
                    "density {}, sh {}, occupancy {}",
                    density.len(),
                    sh.len(),
                    occupancy.len()
                ),
            ));
        }
        Ok(Self {
            resolution,
            bbox,
            channels,
            basis,
            density,
            sh,
            occupancy,
            density_frozen,
        })
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn bbox(&self) -> &Aabb {
        &self.bbox
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn basis(&self) -> usize {
        self.basis
    }

    pub fn sh_stride(&self) -> usize {
        self.channels * self.basis
    }

    pub fn voxel_count(&self) -> usize {
        self.density.len()
    }

    pub fn density(&self) -> &[f32] {
        &self.density
    }

    pub fn sh(&self) -> &[f32] {
        &self.sh
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }

    pub fn is_density_frozen(&self) -> bool {
        self.density_frozen
    }

    /// Mutable density. Panics when the density is frozen.
    pub fn density_mut(&mut self) -> &mut [f32] {
        assert!(!self.density_frozen, "density is frozen");
        &mut self.density
    }

    pub fn sh_mut(&mut self) -> &mut [f32] {
        &mut self.sh
    }

    pub fn occupancy_mut(&mut self) -> &mut [bool] {
        &mut self.occupancy
    }

    /// Simultaneous mutable access for optimizers. Density is `None` when frozen.
    pub fn params_mut(&mut self) -> (Option<&mut [f32]>, &mut [f32]) {
        let density = (!self.density_frozen).then_some(self.density.as_mut_slice());
        (density, &mut self.sh)
    }

    /// Edge lengths of one voxel.
    pub fn voxel_size(&self) -> [f64; 3] {
        std::array::from_fn(|k| (self.bbox.max[k] - self.bbox.min[k]) / self.resolution[k] as f64)
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.resolution[0] * (y + self.resolution[1] * z)
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vector3<f64> {
        let s = self.voxel_size();
        Vector3::new(
            self.bbox.min[0] + (x as f64 + 0.5) * s[0],
            self.bbox.min[1] + (y as f64 + 0.5) * s[1],
            self.bbox.min[2] + (z as f64 + 0.5) * s[2],
        )
    }

    /// Trilinear corners for a point, or `None` outside the box. Coordinates
    /// closer to a face than half a voxel clamp to the boundary voxels.
    #[inline]
    pub(crate) fn corners(&self, p: &Vector3<f64>) -> Option<Corners> {
        if !self.bbox.contains(p) {
            return None;
        }
        let mut base = [0usize; 3];
        let mut next = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for k in 0..3 {
            let n = self.resolution[k];
            let extent = self.bbox.max[k] - self.bbox.min[k];
            let mut g = ((p[k] - self.bbox.min[k]) / extent * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            // Rounding in the world-to-grid map would otherwise leak a 1e-15
            // weight onto the neighbor of an exact voxel center.
            let r = g.round();
            if (g - r).abs() < 1e-9 {
                g = r;
            }
            let i0 = (g.floor() as usize).min(n.saturating_sub(2));
            base[k] = i0;
            next[k] = (i0 + 1).min(n - 1);
            frac[k] = if next[k] == i0 { 0.0 } else { g - i0 as f64 };
        }
        let (nx, nxy) = (self.resolution[0], self.resolution[0] * self.resolution[1]);
        let mut idx = [0usize; 8];
        let mut w = [0.0f64; 8];
        for c in 0..8 {
            let (bx, by, bz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            let x = if bx == 1 { next[0] } else { base[0] };
            let y = if by == 1 { next[1] } else { base[1] };
            let z = if bz == 1 { next[2] } else { base[2] };
            idx[c] = x + nx * y + nxy * z;
            let wx = if bx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if by == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if bz == 1 { frac[2] } else { 1.0 - frac[2] };
            w[c] = wx * wy * wz;
        }
        Some(Corners { idx, w })
    }

    #[inline]
    pub(crate) fn raw_density_at(&self, corners: &Corners) -> f64 {
        let mut raw = 0.0;
        for c in 0..8 {
            let i = corners.idx[c];
            let v = if self.occupancy[i] { self.density[i] } else { EMPTY_DENSITY };
            raw += corners.w[c] * v as f64;
        }
        raw
    }

    /// Interpolated SH coefficients into `out` (length `sh_stride`).
    #[inline]
    pub(crate) fn sh_at(&self, corners: &Corners, out: &mut [f64]) {
        let stride = self.sh_stride();
        out.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..8 {
            let i = corners.idx[c];
            if !self.occupancy[i] {
                continue;
            }
            let w = corners.w[c];
            let src = &self.sh[i * stride..(i + 1) * stride];
            for (o, &s) in out.iter_mut().zip(src) {
                *o += w * s as f64;
            }
        }
    }

    /// Trilinear lookup. Outside the box density and SH are zero.
    pub fn sample_trilinear(&self, p: &Vector3<f64>) -> FieldSample {
        match self.corners(p) {
            None => FieldSample {
                raw_density: f64::NEG_INFINITY,
                density: 0.0,
                sh: vec![0.0; self.sh_stride()],
            },
            Some(corners) => {
                let raw = self.raw_density_at(&corners);
                let mut sh = vec![0.0; self.sh_stride()];
                self.sh_at(&corners, &mut sh);
                FieldSample {
                    raw_density: raw,
                    density: softplus(raw),
                    sh,
                }
            }
        }
    }

    /// Converts a 1-channel grid to 3 channels by copying the luma SH into
    /// R, G and B. Density is untouched.
    pub fn expand_luma_to_rgb(&self) -> Result<SparseVoxelGrid> {
        if self.channels != 1 {
            return Err(Error::ChannelMismatch {
                expected: 1,
                actual: self.channels,
            });
        }
        let b = self.basis;
        let mut sh = Vec::with_capacity(self.sh.len() * 3);
        for luma in self.sh.chunks_exact(b) {
            for _ in 0..3 {
                sh.extend_from_slice(luma);
            }
        }
        Ok(SparseVoxelGrid {
            channels: 3,
            sh,
            ..self.clone()
        })
    }

    /// Marks the geometry as fixed; optimizers stop touching density.
    pub fn freeze_density(&mut self) {
        self.density_frozen = true;
    }
}

/// Dense gradient accumulators aligned with a grid's arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGrad {
    pub density: Vec<f64>,
    pub sh: Vec<f64>,
}

impl GridGrad {
    pub fn zeros_like(grid: &SparseVoxelGrid) -> Self {
        Self {
            density: vec![0.0; grid.voxel_count()],
            sh: vec![0.0; grid.sh.len()],
        }
    }

    pub fn clear(&mut self) {
        self.density.iter_mut().for_each(|v| *v = 0.0);
        self.sh.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn add_assign(&mut self, other: &GridGrad) {
        for (a, b) in self.density.iter_mut().zip(&other.density) {
            *a += b;
        }
        for (a, b) in self.sh.iter_mut().zip(&other.sh) {
            *a += b;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.density.iter().chain(&self.sh).all(|&v| v == 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_grid(res: usize, channels: usize, degree: usize, seed: u64) -> SparseVoxelGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = SparseVoxelGrid::new([res; 3], Aabb::cube(1.0), channels, degree, 0.0).unwrap();
        g.density_mut().iter_mut().for_each(|v| *v = rng.gen_range(-2.0..3.0));
        g.sh_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        g
    }

    /// Independent corner expansion: find the 8 voxel centers around `p` by
    /// brute-force search and weight each by the product of (1 - |Δ|/size).
    fn brute_force_raw(g: &SparseVoxelGrid, p: &Vector3<f64>) -> f64 {
        let s = g.voxel_size();
        let [nx, ny, nz] = g.resolution();
        let mut acc = 0.0;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let c = g.voxel_center(x, y, z);
                    let w: f64 = (0..3)
                        .map(|k| (1.0 - (p[k] - c[k]).abs() / s[k]).max(0.0))
                        .product();
                    acc += w * g.density()[g.index(x, y, z)] as f64;
                }
            }
        }
        acc
    }

    #[test]
    fn voxel_centers_are_exact() {
        let g = random_grid(5, 3, 1, 1);
        for (x, y, z) in [(0, 0, 0), (2, 3, 1), (4, 4, 4)] {
            let s = g.sample_trilinear(&g.voxel_center(x, y, z));
            let i = g.index(x, y, z);
            assert_eq!(s.raw_density, g.density()[i] as f64);
            let stored: Vec<f64> = g.sh()[i * 12..(i + 1) * 12].iter().map(|&v| v as f64).collect();
            assert_eq!(s.sh, stored);
        }
    }

    #[test]
    fn midpoint_is_mean() {
        let g = random_grid(4, 1, 0, 2);
        let (a, b) = (g.voxel_center(1, 2, 2), g.voxel_center(2, 2, 2));
        let s = g.sample_trilinear(&((a + b) * 0.5));
        let expected = 0.5 * (g.density()[g.index(1, 2, 2)] as f64 + g.density()[g.index(2, 2, 2)] as f64);
        assert!((s.raw_density - expected).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_corner_expansion() {
        let g = random_grid(6, 1, 0, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Stay at least half a voxel inside so no clamping applies.
        let lim = 1.0 - 1.0 / 6.0;
        for _ in 0..200 {
            let p = Vector3::new(rng.gen_range(-lim..lim), rng.gen_range(-lim..lim), rng.gen_range(-lim..lim));
            let ours = g.sample_trilinear(&p).raw_density;
            assert!((ours - brute_force_raw(&g, &p)).abs() < 1e-9);
        }
    }

    #[test]
    fn weights_sum_to_one_and_outside_is_zero() {
        let g = random_grid(7, 1, 1, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..500 {
            let p = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let c = g.corners(&p).unwrap();
            assert!((c.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(c.w.iter().all(|&w| w >= 0.0));
        }
        let out = g.sample_trilinear(&Vector3::new(1.5, 0.0, 0.0));
        assert_eq!(out.density, 0.0);
        assert!(out.sh.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn continuous_across_cell_boundaries() {
        let g = random_grid(5, 1, 1, 7);
        let boundary_x = g.voxel_center(2, 0, 0).x;
        let (y, z) = (0.13, -0.21);
        let left = g.sample_trilinear(&Vector3::new(boundary_x - 1e-9, y, z)).raw_density;
        let right = g.sample_trilinear(&Vector3::new(boundary_x + 1e-9, y, z)).raw_density;
        assert!((left - right).abs() < 1e-6);
    }

    #[test]
    fn expand_copies_luma_and_keeps_density() {
        let g = random_grid(3, 1, 1, 8);
        let rgb = g.expand_luma_to_rgb().unwrap();
        assert_eq!(rgb.channels(), 3);
        assert_eq!(rgb.density(), g.density());
        for v in 0..g.voxel_count() {
            let luma = &g.sh()[v * 4..v * 4 + 4];
            for c in 0..3 {
                assert_eq!(&rgb.sh()[v * 12 + c * 4..v * 12 + c * 4 + 4], luma);
            }
        }
        assert!(matches!(rgb.expand_luma_to_rgb(), Err(Error::ChannelMismatch { .. })));
    }

    #[test]
    fn freeze_is_idempotent_and_hides_density() {
        let mut g = random_grid(3, 1, 0, 9);
        g.freeze_density();
        g.freeze_density();
        assert!(g.is_density_frozen());
        assert!(g.params_mut().0.is_none());
    }

    #[test]
    fn unoccupied_voxels_read_empty() {
        let mut g = random_grid(3, 1, 0, 10);
        g.occupancy_mut().iter_mut().for_each(|o| *o = false);
        let s = g.sample_trilinear(&Vector3::new(0.1, 0.2, -0.3));
        assert!((s.raw_density - EMPTY_DENSITY as f64).abs() < 1e-9);
        assert!(s.sh.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn box_intersection() {
        let b = Aabb::cube(1.0);
        let (t0, t1) = b.intersect(&Vector3::new(-3.0, 0.0, 0.0), &Vector3::x()).unwrap();
        assert!((t0 - 2.0).abs() < 1e-12 && (t1 - 4.0).abs() < 1e-12);
        let (t0, t1) = b.intersect(&Vector3::zeros(), &Vector3::z()).unwrap();
        assert!(t0 == 0.0 && (t1 - 1.0).abs() < 1e-12);
        assert!(b.intersect(&Vector3::new(-3.0, 2.0, 0.0), &Vector3::x()).is_none());
    }
}
