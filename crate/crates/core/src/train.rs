//! Stage 1: fit a one-channel grid to the grayscale views.
//!
//! The field emits linear luminance; the photometric loss compares its sRGB
//! encoding with the (display-referred) input pixels.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color::{encode_srgb_deriv, encode_srgb_ext};
use crate::dataset::{generate_rays, Ray, ViewSet};
use crate::error::{Error, Result};
use crate::field::{render_forward_backward, render_image, tv_loss_into, GridGrad, RenderOptions, SparseVoxelGrid};
use crate::image::{ColorSpace, ImageBuf};
use crate::optim::{RmsProp, RmsPropConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Rays per step, drawn with replacement from every pixel of every view.
    pub batch_size: usize,
    pub lr_density: f64,
    pub lr_sh: f64,
    pub lambda_tv: f64,
    pub rho: f64,
    pub eps: f64,
    /// March step; `None` uses one voxel edge.
    pub step: Option<f64>,
    pub min_transmittance: f64,
    /// Empty-space threshold on σ, see [`RenderOptions::sigma_skip`].
    pub sigma_skip: f64,
    /// Train-view PSNR is measured every this many steps (0 disables).
    pub eval_every: usize,
    /// Stop once the measured train-view PSNR reaches this value.
    pub target_psnr: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_size: 5000,
            lr_density: 0.1,
            lr_sh: 0.01,
            lambda_tv: 1e-8,
            rho: 0.95,
            eps: 1e-8,
            step: None,
            min_transmittance: 1e-4,
            sigma_skip: 1e-3,
            eval_every: 1000,
            target_psnr: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr_density > 0.0 && self.lr_sh > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.lambda_tv >= 0.0) {
            return bad("lambda_tv must be non-negative");
        }
        if !(0.0..1.0).contains(&self.rho) || !(self.eps > 0.0) {
            return bad("rmsprop needs 0 <= rho < 1 and eps > 0");
        }
        if matches!(self.step, Some(s) if !(s > 0.0)) {
            return bad("step must be positive");
        }
        Ok(())
    }

    pub fn render_options(&self, grid: &SparseVoxelGrid) -> RenderOptions {
        let base = RenderOptions::for_grid(grid);
        RenderOptions {
            step: self.step.unwrap_or(2.0 * base.step),
            min_transmittance: self.min_transmittance,
            sigma_skip: self.sigma_skip,
            ..base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub loss_photo: f64,
    pub loss_tv: f64,
    pub psnr: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
    /// Mean train-view PSNR after the last step (absent for 0 iterations).
    pub final_psnr: Option<f64>,
    pub steps_run: usize,
    pub seconds: f64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss_photo,loss_tv,psnr\n");
        for e in &self.entries {
            let psnr = e.psnr.map(|p| p.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", e.step, e.loss_photo, e.loss_tv, psnr);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// sRGB-encodes a rendered luma image and clamps it for display.
pub fn luma_to_display(rendered: &ImageBuf) -> ImageBuf {
    let data = rendered
        .data()
        .iter()
        .map(|&v| encode_srgb_ext(v as f64).clamp(0.0, 1.0) as f32)
        .collect();
    ImageBuf::from_vec(rendered.width(), rendered.height(), ColorSpace::Gray, data).expect("same length")
}

/// Mean over views of the PSNR between displayed renders and the inputs.
pub fn train_view_psnr(grid: &SparseVoxelGrid, views: &ViewSet, opts: &RenderOptions) -> Result<f64> {
    let mut total = 0.0;
    for view in views.views() {
        let rendered = render_image(grid, &view.intrinsics, &view.pose, 0, opts)?;
        total += psnr(&luma_to_display(&rendered.color), &view.image)?;
    }
    Ok(total / views.len() as f64)
}

/// Optimizes `grid` in place against the views' grayscale images.
pub fn train_luma(grid: &mut SparseVoxelGrid, views: &ViewSet, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if grid.channels() != 1 {
        return Err(Error::ChannelMismatch {
            expected: 1,
            actual: grid.channels(),
        });
    }
    if views.is_empty() {
        return Err(Error::InvalidArgument("no training views".into()));
    }
    let mut log = TrainLog::default();
    if cfg.iterations == 0 {
        return Ok(log);
    }
    let started = Instant::now();
    let opts = cfg.render_options(grid);

    let mut rays: Vec<Ray> = Vec::new();
    let mut targets: Vec<f32> = Vec::new();
    for view in views.views() {
        rays.extend(generate_rays(&view.intrinsics, &view.pose, 0)?);
        targets.extend_from_slice(view.image.data());
    }
    debug!("stage 1: {} rays in the pool", rays.len());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = RmsProp::new(
        grid,
        cfg.lr_density,
        cfg.lr_sh,
        RmsPropConfig {
            rho: cfg.rho,
            eps: cfg.eps,
        },
    );
    let mut grads = GridGrad::zeros_like(grid);
    let mut batch_rays = Vec::with_capacity(cfg.batch_size);
    let mut batch_targets = Vec::with_capacity(cfg.batch_size);
    let mut picks = Vec::with_capacity(cfg.batch_size);
    let inv_batch = 1.0 / cfg.batch_size as f64;

    for step in 1..=cfg.iterations {
        batch_rays.clear();
        batch_targets.clear();
        picks.clear();
        picks.extend((0..cfg.batch_size).map(|_| rng.gen_range(0..rays.len())));
        // Neighboring rays traverse the same voxels; sorting keeps them
        // together in cache. The loss is a mean, so order is immaterial.
        picks.sort_unstable();
        for &k in &picks {
            batch_rays.push(rays[k]);
            batch_targets.push(targets[k] as f64);
        }

        let t_render = Instant::now();
        grads.clear();
        let samples = render_forward_backward(
            grid,
            &batch_rays,
            &opts,
            |i, s| {
                let c = s.color[0];
                let residual = encode_srgb_ext(c) - batch_targets[i];
                [2.0 * residual * encode_srgb_deriv(c) * inv_batch, 0.0, 0.0]
            },
            &mut grads,
        );
        let loss_photo = samples
            .par_iter()
            .zip(batch_targets.par_iter())
            .map(|(s, t)| (encode_srgb_ext(s.color[0]) - t).powi(2))
            .sum::<f64>()
            * inv_batch;
        let render_ms = t_render.elapsed().as_secs_f64() * 1e3;
        let t_update = Instant::now();
        let loss_tv = if cfg.lambda_tv > 0.0 {
            tv_loss_into(grid, cfg.lambda_tv, &mut grads)
        } else {
            0.0
        };
        optimizer.step(grid, &grads);
        if step % 50 == 0 {
            debug!(
                "stage 1 step {step}: render {render_ms:.1} ms, update {:.1} ms",
                t_update.elapsed().as_secs_f64() * 1e3
            );
        }

        let mut entry = TrainLogEntry {
            step,
            loss_photo,
            loss_tv,
            psnr: None,
        };
        let last = step == cfg.iterations;
        if (cfg.eval_every > 0 && step % cfg.eval_every == 0) || last {
            let p = train_view_psnr(grid, views, &opts)?;
            info!(
                "stage 1 step {step}: photo {loss_photo:.3e} tv {loss_tv:.3e} psnr {p:.2} dB ({:.0}s)",
                started.elapsed().as_secs_f64()
            );
            entry.psnr = Some(p);
            log.final_psnr = Some(p);
        }
        let reached = matches!((entry.psnr, cfg.target_psnr), (Some(p), Some(t)) if p >= t);
        log.entries.push(entry);
        log.steps_run = step;
        if reached {
            info!("stage 1: target PSNR reached at step {step}");
            break;
        }
    }
    log.seconds = started.elapsed().as_secs_f64();
    Ok(log)
}

/// `10·log10(1/MSE)`; `+∞` for identical images.
pub fn psnr(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    if a.dims() != b.dims() || a.channels() != b.channels() {
        return Err(Error::dims(
            format!("{}x{}x{}", a.width(), a.height(), a.channels()),
            format!("{}x{}x{}", b.width(), b.height(), b.channels()),
        ));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.data().len().max(1) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut w = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = w.iter().sum();
    w.map(|v| v / sum)
}

/// Separable filtering keeping only fully covered positions.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM of two grayscale images (11×11 Gaussian window, σ = 1.5,
/// dynamic range 1), averaged over all fully covered window positions.
pub fn ssim(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::dims(
            format!("{}x{}", a.width(), a.height()),
            format!("{}x{}", b.width(), b.height()),
        ));
    }
    if a.channels() != 1 || b.channels() != 1 {
        return Err(Error::ChannelMismatch {
            expected: 1,
            actual: a.channels().max(b.channels()),
        });
    }
    let (w, h) = a.dims();
    let n = 2 * SSIM_RADIUS + 1;
    if w < n || h < n {
        return Err(Error::InvalidArgument(format!("ssim needs at least {n}x{n} pixels, got {w}x{h}")));
    }
    let k = gaussian_window();
    let x: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let mx = filter_valid(&x, w, h, &k);
    let my = filter_valid(&y, w, h, &k);
    let sxx = filter_valid(&xx, w, h, &k);
    let syy = filter_valid(&yy, w, h, &k);
    let sxy = filter_valid(&xy, w, h, &k);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (m1, m2) = (mx[i], my[i]);
            let v1 = sxx[i] - m1 * m1;
            let v2 = syy[i] - m2 * m2;
            let cov = sxy[i] - m1 * m2;
            ((2.0 * m1 * m2 + c1) * (2.0 * cov + c2)) / ((m1 * m1 + m2 * m2 + c1) * (v1 + v2 + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(w: usize, h: usize, f: impl Fn(usize, usize) -> f32) -> ImageBuf {
        ImageBuf::from_fn(w, h, ColorSpace::Gray, |x, y| [f(x, y), 0.0, 0.0])
    }

    #[test]
    fn psnr_examples() {
        let a = gray(8, 8, |x, y| ((x + y) % 5) as f32 / 5.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = gray(8, 8, |x, y| ((x + y) % 5) as f32 / 5.0 + 0.1);
        // f32 storage perturbs the 0.1 offset in the eighth digit.
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &gray(4, 8, |_, _| 0.0)).is_err());
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = gray(16, 16, |x, y| ((x * 7 + y * 3) % 11) as f32 / 11.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_negative_pattern_is_negative() {
        let a = gray(16, 16, |x, y| ((x + y) % 2) as f32);
        let b = gray(16, 16, |x, y| 1.0 - ((x + y) % 2) as f32);
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn ssim_constant_images_reduce_to_luminance_term() {
        let (m1, m2) = (0.3f64, 0.7f64);
        let a = gray(12, 12, |_, _| m1 as f32);
        let b = gray(12, 12, |_, _| m2 as f32);
        let c1 = 1e-4;
        let m1 = m1 as f32 as f64;
        let m2 = m2 as f32 as f64;
        let closed = (2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
        assert!((ssim(&a, &b).unwrap() - closed).abs() < 1e-6);
        assert!(ssim(&a, &gray(10, 12, |_, _| 0.0)).is_err());
    }

    #[test]
    fn window_is_normalized() {
        let w = gaussian_window();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(w[0], w[10]);
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.batch_size = 1;
        cfg.lr_sh = 0.0;
        assert!(cfg.validate().is_err());
        cfg.lr_sh = 0.1;
        cfg.lambda_tv = -1.0;
        assert!(cfg.validate().is_err());
    }
}
