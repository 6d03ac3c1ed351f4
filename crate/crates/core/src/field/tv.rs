//! Squared-difference total variation over axis-neighbor voxel pairs.

use rayon::prelude::*;

use super::{GridGrad, SparseVoxelGrid};

/// TV loss and its gradient. Each unordered neighbor pair with both voxels
/// occupied contributes `Σ (vᵢ − vⱼ)²` over density and every SH coefficient.
pub fn tv_loss(grid: &SparseVoxelGrid) -> (f64, GridGrad) {
    let mut grads = GridGrad::zeros_like(grid);
    let loss = tv_loss_into(grid, 1.0, &mut grads);
    (loss, grads)
}

/// Adds `weight · ∇TV` into `grads` and returns the unweighted loss. Density
/// gradients are skipped for frozen grids.
pub fn tv_loss_into(grid: &SparseVoxelGrid, weight: f64, grads: &mut GridGrad) -> f64 {
    let [nx, ny, nz] = grid.resolution();
    let nxy = nx * ny;
    let stride = grid.sh_stride();
    let density = grid.density();
    let sh = grid.sh();
    let occ = grid.occupancy();
    let want_density = !grid.is_density_frozen();
    let offsets = [1usize, nx, nxy];
    let dims = [nx, ny, nz];

    let partials: Vec<f64> = grads
        .density
        .par_chunks_mut(nxy)
        .zip(grads.sh.par_chunks_mut(nxy * stride))
        .enumerate()
        .map(|(z, (gd, gs))| {
            let mut loss = 0.0;
            for y in 0..ny {
                for x in 0..nx {
                    let i = x + nx * y + nxy * z;
                    if !occ[i] {
                        continue;
                    }
                    let coord = [x, y, z];
                    let local = x + nx * y;
                    for axis in 0..3 {
                        let off = offsets[axis];
                        // Forward neighbor: counts the pair's loss once.
                        if coord[axis] + 1 < dims[axis] && occ[i + off] {
                            let j = i + off;
                            let d = density[i] as f64 - density[j] as f64;
                            loss += d * d;
                            if want_density {
                                gd[local] += weight * 2.0 * d;
                            }
                            for k in 0..stride {
                                let s = sh[i * stride + k] as f64 - sh[j * stride + k] as f64;
                                loss += s * s;
                                gs[local * stride + k] += weight * 2.0 * s;
                            }
                        }
                        // Backward neighbor: gradient only.
                        if coord[axis] > 0 && occ[i - off] {
                            let j = i - off;
                            if want_density {
                                gd[local] += weight * 2.0 * (density[i] as f64 - density[j] as f64);
                            }
                            for k in 0..stride {
                                gs[local * stride + k] +=
                                    weight * 2.0 * (sh[i * stride + k] as f64 - sh[j * stride + k] as f64);
                            }
                        }
                    }
                }
            }
            loss
        })
        .collect();
    partials.iter().sum()
}
