use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chroma::color::image_to_srgb;
use chroma::dataset::{interpolate_path, load_viewset, read_depth, write_depth, Pose, ViewSet};
use chroma::distill::distill_color;
use chroma::field::{load_checkpoint, render_image, save_checkpoint, RenderOptions, SparseVoxelGrid};
use chroma::image::{read_png, write_png8, ImageBuf};
use chroma::metrics::{
    evaluate_pairs, mean_chroma_magnitude, sequence_warps, ConsistencyMode, ConsistencyReport, FrameGeometry, Offsets,
};
use chroma::scenegen::{bake_dataset, SceneSpec};
use chroma::teacher::{load_gt_colors, load_teacher_dir, oracle_teacher, Jitter, TeacherSet};
use chroma::train::{train_luma, train_view_psnr};
use log::info;
use serde::Serialize;

use crate::config::{PipelineConfig, TeacherSource};

pub const STAGE1_CHECKPOINT: &str = "stage1.grid";
pub const STAGE2_CHECKPOINT: &str = "stage2.grid";

pub fn load_scene(spec: &str) -> Result<SceneSpec> {
    if spec == "desk" {
        return Ok(SceneSpec::desk());
    }
    Ok(SceneSpec::read(Path::new(spec))?)
}

pub fn gen_scene(scene: &SceneSpec, out: &Path) -> Result<()> {
    let manifest = bake_dataset(scene, out)?;
    info!("baked {} frames into {}", manifest.frames.len(), out.display());
    Ok(())
}

/// Loads the dataset, baking the configured scene first if there is none.
pub fn dataset(cfg: &PipelineConfig) -> Result<ViewSet> {
    let dir = &cfg.paths.dataset;
    if !dir.join(chroma::dataset::MANIFEST_NAME).exists() {
        match &cfg.paths.scene {
            Some(spec) => gen_scene(&load_scene(spec)?, dir)?,
            None => bail!("no dataset manifest in {}", dir.display()),
        }
    }
    Ok(load_viewset(dir)?)
}

pub fn train_stage(cfg: &PipelineConfig, views: &ViewSet, resume: bool) -> Result<SparseVoxelGrid> {
    let out = &cfg.paths.output;
    let ck = out.join(STAGE1_CHECKPOINT);
    if resume && ck.exists() {
        info!("stage 1: resuming from {}", ck.display());
        return Ok(load_checkpoint(&ck)?);
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut grid = cfg.grid.build()?;
    let log = train_luma(&mut grid, views, &cfg.train)?;
    log.write_csv(&out.join("train_log.csv"))?;
    save_checkpoint(&grid, &ck)?;
    info!(
        "stage 1: {} steps in {:.0}s, train-view PSNR {:.2} dB",
        log.steps_run,
        log.seconds,
        log.final_psnr.unwrap_or(f64::NAN)
    );
    Ok(grid)
}

pub fn teacher(cfg: &PipelineConfig, views: &ViewSet) -> Result<TeacherSet> {
    Ok(match &cfg.teacher {
        TeacherSource::Dir { path } => load_teacher_dir(path, views)?,
        TeacherSource::Oracle { sigma_h, sigma_c, seed } => {
            let gt = load_gt_colors(views)?;
            let jitter = Jitter {
                sigma_h: *sigma_h,
                sigma_c: *sigma_c,
            };
            oracle_teacher(views, &gt, jitter, *seed)?
        }
    })
}

pub fn distill_stage(
    cfg: &PipelineConfig,
    views: &ViewSet,
    teacher: &TeacherSet,
    stage1: SparseVoxelGrid,
    resume: bool,
) -> Result<SparseVoxelGrid> {
    let out = &cfg.paths.output;
    let ck = out.join(STAGE2_CHECKPOINT);
    if resume && ck.exists() {
        info!("stage 2: resuming from {}", ck.display());
        return Ok(load_checkpoint(&ck)?);
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut grid = stage1;
    let log = distill_color(&mut grid, teacher, views, &cfg.distill)?;
    log.write_csv(&out.join("distill_log.csv"))?;
    save_checkpoint(&grid, &ck)?;
    info!("stage 2: {} epochs in {:.0}s", cfg.distill.epochs, log.seconds);
    Ok(grid)
}

fn render_opts(cfg: &PipelineConfig, grid: &SparseVoxelGrid) -> RenderOptions {
    cfg.distill.render_options(grid)
}

fn save_frame(grid: &SparseVoxelGrid, view: (&chroma::dataset::CameraIntrinsics, &Pose), opts: &RenderOptions, stem: &Path) -> Result<ImageBuf> {
    let r = render_image(grid, view.0, view.1, 0, opts)?;
    let srgb = image_to_srgb(&r.color);
    write_png8(&srgb, &stem.with_extension("png"))?;
    write_depth(&r.depth, &stem.with_extension("depth"))?;
    Ok(srgb)
}

/// Renders every dataset view into `dir/<id>.png` (+ `.depth`).
pub fn render_views(grid: &SparseVoxelGrid, views: &ViewSet, opts: &RenderOptions, dir: &Path) -> Result<Vec<ImageBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    views
        .views()
        .iter()
        .map(|v| save_frame(grid, (&v.intrinsics, &v.pose), opts, &dir.join(&v.id)))
        .collect()
}

/// Renders `frames` poses along the path through the dataset cameras.
pub fn render_trajectory(grid: &SparseVoxelGrid, views: &ViewSet, opts: &RenderOptions, frames: usize, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let keys: Vec<Pose> = views.views().iter().map(|v| v.pose).collect();
    let cam = views.views()[0].intrinsics;
    for (i, pose) in interpolate_path(&keys, frames).iter().enumerate() {
        save_frame(grid, (&cam, pose), opts, &dir.join(format!("frame_{i:04}")))?;
    }
    info!("rendered {frames} trajectory frames into {}", dir.display());
    Ok(())
}

/// Per-view geometry, preferring dataset depth and falling back to
/// `<fallback>/<id>.depth`.
pub fn geometry(views: &ViewSet, fallback: Option<&Path>) -> Result<Vec<FrameGeometry>> {
    views
        .views()
        .iter()
        .map(|v| {
            let depth = match (&v.depth, fallback) {
                (Some(d), _) => d.clone(),
                (None, Some(dir)) => read_depth(&dir.join(format!("{}.depth", v.id)))?,
                (None, None) => bail!("view '{}' has no depth", v.id),
            };
            Ok(FrameGeometry {
                intrinsics: v.intrinsics,
                pose: v.pose,
                depth,
            })
        })
        .collect()
}

/// Mean error of the pairs ending at each frame.
pub fn per_frame_csv(report: &ConsistencyReport, frames: usize) -> String {
    let mut sums = vec![(0.0, 0usize); frames];
    for p in &report.pairs {
        if let Some(e) = p.error {
            let slot = &mut sums[p.i + p.delta];
            slot.0 += e;
            slot.1 += 1;
        }
    }
    let mut out = String::from("frame,mean_error,pairs\n");
    for (i, (s, n)) in sums.iter().enumerate() {
        let mean = if *n > 0 { (s / *n as f64).to_string() } else { String::new() };
        out.push_str(&format!("{i},{mean},{n}\n"));
    }
    out
}

pub fn write_report(report: &ConsistencyReport, frames: usize, dir: &Path, stem: &str) -> Result<()> {
    report.write(dir, stem)?;
    let path = dir.join(format!("{stem}_frames.csv"));
    fs::write(&path, per_frame_csv(report, frames)).with_context(|| format!("writing {}", path.display()))
}

/// Reads `<id>.png` for every view from `dir`, in view order.
pub fn read_frames(dir: &Path, views: &ViewSet) -> Result<Vec<ImageBuf>> {
    let mut found: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem() {
                found.insert(stem.to_string_lossy().into_owned(), path);
            }
        }
    }
    if found.len() != views.len() {
        bail!("{} holds {} frames but the dataset has {} views", dir.display(), found.len(), views.len());
    }
    views
        .ids()
        .map(|id| {
            let path = found.get(id).with_context(|| format!("no frame for view '{id}' in {}", dir.display()))?;
            Ok(read_png(path)?.image)
        })
        .collect()
}

pub fn evaluate(frames: &[ImageBuf], geometry: &[FrameGeometry], offsets: Offsets, mode: ConsistencyMode) -> Result<ConsistencyReport> {
    if frames.len() != geometry.len() {
        bail!("{} frames but {} poses", frames.len(), geometry.len());
    }
    let warps = sequence_warps(geometry, offsets)?;
    Ok(evaluate_pairs(frames, &warps, offsets, mode)?)
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub stage1_psnr: f64,
    pub renders_short: Option<f64>,
    pub renders_long: Option<f64>,
    pub teacher_short: Option<f64>,
    pub teacher_long: Option<f64>,
    pub renders_chroma: f64,
    pub teacher_chroma: f64,
}

pub fn pipeline(cfg: &PipelineConfig, resume: bool) -> Result<Summary> {
    cfg.validate()?;
    let out = &cfg.paths.output;
    cfg.write_effective(out)?;
    let views = dataset(cfg).context("dataset")?;
    let teacher = teacher(cfg, &views).context("loading teacher")?;
    let stage1 = train_stage(cfg, &views, resume).context("stage 1 (train-luma)")?;
    let stage1_psnr = train_view_psnr(&stage1, &views, &cfg.train.render_options(&stage1))?;
    let grid = distill_stage(cfg, &views, &teacher, stage1, resume).context("stage 2 (distill)")?;

    let opts = render_opts(cfg, &grid);
    let renders = render_views(&grid, &views, &opts, &out.join("views")).context("rendering views")?;
    render_trajectory(&grid, &views, &opts, cfg.render.frames, &out.join("trajectory")).context("rendering trajectory")?;

    let geom = geometry(&views, Some(&out.join("views")))?;
    let warps = sequence_warps(&geom, cfg.metrics.offsets).context("evaluate")?;
    let teach: Vec<ImageBuf> = views.ids().map(|id| teacher.get(id).expect("checked").clone()).collect();
    let report_r = evaluate_pairs(&renders, &warps, cfg.metrics.offsets, cfg.metrics.mode)?;
    let report_t = evaluate_pairs(&teach, &warps, cfg.metrics.offsets, cfg.metrics.mode)?;
    write_report(&report_r, views.len(), out, "consistency_renders")?;
    write_report(&report_t, views.len(), out, "consistency_teacher")?;

    let mean_chroma = |fs: &[ImageBuf]| fs.iter().map(mean_chroma_magnitude).sum::<f64>() / fs.len() as f64;
    let summary = Summary {
        stage1_psnr,
        renders_short: report_r.mean_short,
        renders_long: report_r.mean_long,
        teacher_short: report_t.mean_short,
        teacher_long: report_t.mean_long,
        renders_chroma: mean_chroma(&renders),
        teacher_chroma: mean_chroma(&teach),
    };
    let path = out.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(summary)
}
