//! RMSProp over grid parameters.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::field::{GridGrad, SparseVoxelGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmsPropConfig {
    pub rho: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self { rho: 0.95, eps: 1e-8 }
    }
}

/// `v ← ρv + (1−ρ)g²`, `θ ← θ − lr·g/(√v + ε)`, elementwise.
#[derive(Debug, Clone)]
pub struct RmsProp {
    cfg: RmsPropConfig,
    lr_density: f64,
    lr_sh: f64,
    v_density: Vec<f64>,
    v_sh: Vec<f64>,
}

fn update(params: &mut [f32], grads: &[f64], acc: &mut [f64], lr: f64, cfg: RmsPropConfig) {
    params
        .par_iter_mut()
        .zip(grads.par_iter())
        .zip(acc.par_iter_mut())
        .with_min_len(4096)
        .for_each(|((p, &g), v)| {
            *v = cfg.rho * *v + (1.0 - cfg.rho) * g * g;
            if g != 0.0 {
                *p = (*p as f64 - lr * g / (v.sqrt() + cfg.eps)) as f32;
            }
        });
}

impl RmsProp {
    pub fn new(grid: &SparseVoxelGrid, lr_density: f64, lr_sh: f64, cfg: RmsPropConfig) -> Self {
        Self {
            cfg,
            lr_density,
            lr_sh,
            v_density: vec![0.0; grid.voxel_count()],
            v_sh: vec![0.0; grid.sh().len()],
        }
    }

    /// Applies one update. Density is left alone when the grid is frozen.
    pub fn step(&mut self, grid: &mut SparseVoxelGrid, grads: &GridGrad) {
        let cfg = self.cfg;
        let (density, sh) = grid.params_mut();
        if let Some(density) = density {
            update(density, &grads.density, &mut self.v_density, self.lr_density, cfg);
        }
        update(sh, &grads.sh, &mut self.v_sh, self.lr_sh, cfg);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Aabb;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut g = SparseVoxelGrid::new([3; 3], Aabb::cube(1.0), 3, 1, 0.4).unwrap();
        let before = g.clone();
        let mut opt = RmsProp::new(&g, 0.1, 0.1, RmsPropConfig::default());
        let zero = GridGrad::zeros_like(&g);
        for _ in 0..5 {
            opt.step(&mut g, &zero);
        }
        assert_eq!(g, before);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut g = SparseVoxelGrid::new([2; 3], Aabb::cube(1.0), 1, 0, 0.0).unwrap();
        let mut grads = GridGrad::zeros_like(&g);
        grads.density[3] = 2.0;
        grads.sh[5] = -0.5;
        let cfg = RmsPropConfig { rho: 0.9, eps: 1e-8 };
        let mut opt = RmsProp::new(&g, 0.1, 0.01, cfg);
        opt.step(&mut g, &grads);
        // v = 0.1·g², so the step is lr·g/(√0.1·|g|) = lr·sign(g)/√0.1.
        let expected_density = -0.1 * 2.0 / ((0.1f64 * 4.0).sqrt() + 1e-8);
        let expected_sh = 0.01 * 0.5 / ((0.1f64 * 0.25).sqrt() + 1e-8);
        assert!((g.density()[3] as f64 - expected_density).abs() < 1e-6);
        assert!((g.sh()[5] as f64 - expected_sh).abs() < 1e-6);
        assert_eq!(g.density()[0], 0.0);
    }

    #[test]
    fn frozen_density_is_untouched_but_sh_moves() {
        let mut g = SparseVoxelGrid::new([2; 3], Aabb::cube(1.0), 3, 1, 0.3).unwrap();
        g.freeze_density();
        let before = g.density().to_vec();
        let mut grads = GridGrad::zeros_like(&g);
        grads.density.iter_mut().for_each(|v| *v = 1.0);
        grads.sh[0] = 1.0;
        let mut opt = RmsProp::new(&g, 0.1, 0.1, RmsPropConfig::default());
        for _ in 0..100 {
            opt.step(&mut g, &grads);
        }
        assert_eq!(g.density(), &before[..]);
        assert!(g.sh()[0] != 0.0);
    }
}
