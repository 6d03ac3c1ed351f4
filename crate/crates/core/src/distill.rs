//! Stage 2: freeze geometry and fit per-channel appearance to teacher colors in
//! Lab, coarse to fine, with each finer scale tied to the upsampled chroma of
//! the previous one.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::{downsample, image_to_lab, linear_to_lab, linear_to_lab_vjp, upsample2};
use crate::dataset::{generate_rays, Ray, ViewSet};
use crate::error::{Error, Result};
use crate::field::{render_forward_backward, GridGrad, RenderOptions, SparseVoxelGrid};
use crate::image::{ColorSpace, ImageBuf};
use crate::optim::{RmsProp, RmsPropConfig};
use crate::teacher::TeacherSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub epochs: usize,
    /// Coarsest pyramid level `K`; scales run `K, K−1, …, 0`.
    pub levels: u32,
    pub lambda_l: f64,
    pub lambda_a: f64,
    pub lambda_b: f64,
    /// Weight of the tie to the previous scale's upsampled chroma.
    pub lambda_ms: f64,
    pub lr_sh: f64,
    pub rho: f64,
    pub eps: f64,
    /// With `false` only scale 0 is used.
    pub multiscale: bool,
    /// March step; `None` uses one voxel edge.
    pub step: Option<f64>,
    pub min_transmittance: f64,
    pub sigma_skip: f64,
    /// Also fit the view-dependent SH terms. With `false` only each channel's
    /// constant term moves and the view dependence learned in stage 1 is kept.
    pub view_dependent: bool,
    /// Visit views in a seeded random order each epoch instead of in order.
    pub shuffle_views: bool,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            levels: 3,
            lambda_l: 1.0,
            lambda_a: 1.0,
            lambda_b: 1.0,
            lambda_ms: 1.0,
            lr_sh: 0.005,
            rho: 0.95,
            eps: 1e-8,
            multiscale: true,
            step: None,
            min_transmittance: 1e-4,
            sigma_skip: 1e-3,
            view_dependent: false,
            shuffle_views: false,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if [self.lambda_l, self.lambda_a, self.lambda_b, self.lambda_ms]
            .iter()
            .any(|w| !(*w >= 0.0))
        {
            return bad("loss weights must be non-negative");
        }
        if !(self.lr_sh > 0.0) {
            return bad("lr_sh must be positive");
        }
        if !(0.0..1.0).contains(&self.rho) || !(self.eps > 0.0) {
            return bad("rmsprop needs 0 <= rho < 1 and eps > 0");
        }
        if matches!(self.step, Some(s) if !(s > 0.0)) {
            return bad("step must be positive");
        }
        if self.levels > 16 {
            return bad("levels must be at most 16");
        }
        Ok(())
    }

    /// Scales visited per view, coarse to fine.
    pub fn scales(&self) -> Vec<u32> {
        if self.multiscale {
            (0..=self.levels).rev().collect()
        } else {
            vec![0]
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            l: self.lambda_l,
            a: self.lambda_a,
            b: self.lambda_b,
        }
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

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l: 1.0, a: 1.0, b: 1.0 }
    }
}

/// Unweighted per-channel means plus the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// mean (L^C − L^R)²
    pub l: f64,
    /// mean |a^C − a^R|
    pub a: f64,
    /// mean |b^C − b^R|
    pub b: f64,
    /// mean |P_a − a^R| + mean |P_b − b^R| (0 without a prior)
    pub ms: f64,
    pub total: f64,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss contribution of one pixel and `d/d(linear rgb)`, already divided by
/// the pixel count.
#[inline]
fn pixel_terms(
    lin: [f64; 3],
    target: [f64; 3],
    prior: Option<[f64; 2]>,
    w: &LossWeights,
    lambda_ms: f64,
    inv_n: f64,
) -> ([f64; 4], [f64; 3]) {
    let lab = linear_to_lab(lin);
    let dl = lab[0] - target[0];
    let da = lab[1] - target[1];
    let db = lab[2] - target[2];
    let mut parts = [dl * dl, da.abs(), db.abs(), 0.0];
    let mut cot = [2.0 * w.l * dl, w.a * sign(da), w.b * sign(db)];
    if let Some([pa, pb]) = prior {
        let (ea, eb) = (lab[1] - pa, lab[2] - pb);
        parts[3] = ea.abs() + eb.abs();
        cot[1] += lambda_ms * sign(ea);
        cot[2] += lambda_ms * sign(eb);
    }
    let grad = linear_to_lab_vjp(lin, cot.map(|c| c * inv_n));
    (parts, grad)
}

/// Lab loss between a linear-RGB render and an sRGB teacher, with the
/// gradient with respect to each rendered pixel.
pub fn distill_loss(rendered: &ImageBuf, teacher: &ImageBuf, weights: &LossWeights) -> Result<(LossParts, Vec<[f64; 3]>)> {
    if rendered.dims() != teacher.dims() {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", teacher.width(), teacher.height()),
            actual: format!("{}x{}", rendered.width(), rendered.height()),
        });
    }
    if rendered.space() != ColorSpace::LinearRgb {
        return Err(Error::InvalidArgument("rendered image must be linear RGB".into()));
    }
    let target = image_to_lab(teacher);
    let inv_n = 1.0 / rendered.len_pixels().max(1) as f64;
    let mut sums = [0.0f64; 4];
    let grads = rendered
        .pixels()
        .zip(target.pixels())
        .map(|(p, t)| {
            let lin = [p[0] as f64, p[1] as f64, p[2] as f64];
            let (parts, g) = pixel_terms(lin, [t[0] as f64, t[1] as f64, t[2] as f64], None, weights, 0.0, inv_n);
            sums.iter_mut().zip(parts).for_each(|(s, v)| *s += v);
            g
        })
        .collect();
    Ok((finish_parts(sums, inv_n, weights, 0.0), grads))
}

fn finish_parts(sums: [f64; 4], inv_n: f64, w: &LossWeights, lambda_ms: f64) -> LossParts {
    let [l, a, b, ms] = sums.map(|s| s * inv_n);
    LossParts {
        l,
        a,
        b,
        ms,
        total: w.l * l + w.a * a + w.b * b + lambda_ms * ms,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillLogEntry {
    pub epoch: usize,
    pub view: String,
    pub scale: u32,
    pub loss: LossParts,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillLog {
    pub entries: Vec<DistillLogEntry>,
    /// Per epoch, mean |L^R − L^C| over the views at scale 0, measured on
    /// the renders that drove that epoch's updates.
    pub epoch_luma_error: Vec<f64>,
    pub seconds: f64,
}

impl DistillLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,view,scale,loss_l,loss_a,loss_b,loss_ms,total\n");
        for e in &self.entries {
            let l = &e.loss;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                e.epoch, e.view, e.scale, l.l, l.a, l.b, l.ms, l.total
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

struct ScaleTarget {
    scale: u32,
    width: usize,
    height: usize,
    rays: Vec<Ray>,
    /// Teacher in Lab at this scale.
    lab: Vec<[f64; 3]>,
}

fn prepare_targets(views: &ViewSet, teacher: &TeacherSet, scales: &[u32]) -> Result<Vec<Vec<ScaleTarget>>> {
    views
        .views()
        .iter()
        .map(|view| {
            let img = teacher.get(&view.id).expect("checked");
            scales
                .iter()
                .map(|&s| {
                    let small = downsample(img, 1 << s)?;
                    let lab = image_to_lab(&small)
                        .pixels()
                        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
                        .collect();
                    let cam = view.intrinsics.scaled(s)?;
                    Ok(ScaleTarget {
                        scale: s,
                        width: cam.width,
                        height: cam.height,
                        rays: generate_rays(&view.intrinsics, &view.pose, s)?,
                        lab,
                    })
                })
                .collect()
        })
        .collect()
}

/// Colorizes `grid` in place. A one-channel grid is first expanded to RGB; the
/// density is frozen before any update.
pub fn distill_color(
    grid: &mut SparseVoxelGrid,
    teacher: &TeacherSet,
    views: &ViewSet,
    cfg: &DistillConfig,
) -> Result<DistillLog> {
    cfg.validate()?;
    teacher.check(views)?;
    let (w, h) = views.base_resolution();
    let factor = 1usize << cfg.levels;
    if cfg.multiscale && (w % factor != 0 || h % factor != 0) {
        return Err(Error::NotDivisible {
            what: if w % factor != 0 { "width" } else { "height" },
            value: if w % factor != 0 { w } else { h },
            factor,
        });
    }
    let scales = cfg.scales();
    let targets = prepare_targets(views, teacher, &scales)?;

    if grid.channels() == 1 {
        *grid = grid.expand_luma_to_rgb()?;
    }
    grid.freeze_density();

    let started = Instant::now();
    let opts = cfg.render_options(grid);
    let weights = cfg.weights();
    let mut optimizer = RmsProp::new(
        grid,
        cfg.lr_sh,
        cfg.lr_sh,
        RmsPropConfig {
            rho: cfg.rho,
            eps: cfg.eps,
        },
    );
    let mut grads = GridGrad::zeros_like(grid);
    let mut log = DistillLog::default();
    let mut order: Vec<usize> = (0..views.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    for epoch in 1..=cfg.epochs {
        if cfg.shuffle_views {
            order.shuffle(&mut rng);
        }
        let mut luma_error = 0.0;
        for &vi in &order {
            let view = &views.views()[vi];
            grads.clear();
            let mut prior: Option<(ImageBuf, ImageBuf)> = None;
            for target in &targets[vi] {
                let n = target.rays.len();
                let inv_n = 1.0 / n as f64;
                let prior_at = |i: usize| {
                    prior.as_ref().map(|(pa, pb)| [pa.data()[i] as f64, pb.data()[i] as f64])
                };
                let samples = render_forward_backward(
                    grid,
                    &target.rays,
                    &opts,
                    |i, s| pixel_terms(s.color, target.lab[i], prior_at(i), &weights, cfg.lambda_ms, inv_n).1,
                    &mut grads,
                );
                let mut sums = [0.0f64; 4];
                let mut chroma_a = Vec::with_capacity(n);
                let mut chroma_b = Vec::with_capacity(n);
                let mut l_abs = 0.0;
                for (i, s) in samples.iter().enumerate() {
                    let (parts, _) = pixel_terms(s.color, target.lab[i], prior_at(i), &weights, cfg.lambda_ms, inv_n);
                    sums.iter_mut().zip(parts).for_each(|(acc, v)| *acc += v);
                    let lab = linear_to_lab(s.color);
                    chroma_a.push(lab[1] as f32);
                    chroma_b.push(lab[2] as f32);
                    l_abs += (lab[0] - target.lab[i][0]).abs();
                }
                let lambda_ms = if prior.is_some() { cfg.lambda_ms } else { 0.0 };
                let loss = finish_parts(sums, inv_n, &weights, lambda_ms);
                if target.scale == 0 {
                    luma_error += l_abs * inv_n;
                }
                log.entries.push(DistillLogEntry {
                    epoch,
                    view: view.id.clone(),
                    scale: target.scale,
                    loss,
                });
                if target.scale > 0 {
                    let plane = |data: Vec<f32>| {
                        ImageBuf::from_vec(target.width, target.height, ColorSpace::Scalar, data).expect("sized by rays")
                    };
                    prior = Some((upsample2(&plane(chroma_a)), upsample2(&plane(chroma_b))));
                }
            }
            if !cfg.view_dependent {
                let basis = grid.basis();
                grads.sh.chunks_exact_mut(basis).for_each(|c| c[1..].iter_mut().for_each(|g| *g = 0.0));
            }
            optimizer.step(grid, &grads);
        }
        let mean_luma = luma_error / views.len() as f64;
        log.epoch_luma_error.push(mean_luma);
        let last = log.entries.iter().rev().take(scales.len() * views.len());
        let mean_total = last.map(|e| e.loss.total).sum::<f64>() / views.len() as f64;
        info!(
            "distill epoch {epoch}: mean loss {mean_total:.3}, mean |ΔL| {mean_luma:.3} ({:.0}s)",
            started.elapsed().as_secs_f64()
        );
    }
    debug!("distill: {} view updates", cfg.epochs * views.len());
    log.seconds = started.elapsed().as_secs_f64();
    Ok(log)
}
