use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chroma::distill::DistillConfig;
use chroma::field::{Aabb, SparseVoxelGrid};
use chroma::metrics::{ConsistencyMode, Offsets};
use chroma::teacher::Jitter;
use chroma::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub teacher: TeacherSource,
    pub grid: GridSpec,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub metrics: MetricsSpec,
    pub render: RenderSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub output: PathBuf,
    /// Scene to bake into `dataset` when it holds no manifest yet: `"desk"` or
    /// a scene file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("dataset"),
            output: PathBuf::from("out"),
            scene: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TeacherSource {
    /// A directory of `<view id>.png` images.
    Dir { path: PathBuf },
    /// Jittered ground truth from a baked dataset.
    Oracle {
        #[serde(default = "default_sigma_h")]
        sigma_h: f64,
        #[serde(default = "default_sigma_c")]
        sigma_c: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_sigma_h() -> f64 {
    Jitter::default().sigma_h
}

fn default_sigma_c() -> f64 {
    Jitter::default().sigma_c
}

impl Default for TeacherSource {
    fn default() -> Self {
        TeacherSource::Oracle {
            sigma_h: default_sigma_h(),
            sigma_c: default_sigma_c(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub resolution: [usize; 3],
    pub sh_degree: usize,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    pub init_density: f32,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            resolution: [64; 3],
            sh_degree: 1,
            bbox_min: [-2.1; 3],
            bbox_max: [2.1; 3],
            init_density: -3.0,
        }
    }
}

impl GridSpec {
    pub fn build(&self) -> Result<SparseVoxelGrid> {
        let bbox = Aabb::new(self.bbox_min, self.bbox_max)?;
        Ok(SparseVoxelGrid::new(self.resolution, bbox, 1, self.sh_degree, self.init_density)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSpec {
    pub offsets: Offsets,
    pub mode: ConsistencyMode,
}

impl Default for MetricsSpec {
    fn default() -> Self {
        Self {
            offsets: Offsets::default(),
            mode: ConsistencyMode::Chroma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSpec {
    /// Frames along the path through the dataset poses.
    pub frames: usize,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self { frames: 40 }
    }
}

impl PipelineConfig {
    /// Parses TOML, or JSON when the file ends in `.json`. Relative paths are
    /// taken against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: PipelineConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        } else {
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.dataset);
        fix(&mut self.paths.output);
        if let TeacherSource::Dir { path } = &mut self.teacher {
            fix(path);
        }
        if let Some(scene) = &mut self.paths.scene {
            if scene != "desk" && Path::new(scene).is_relative() {
                *scene = base.join(&*scene).to_string_lossy().into_owned();
            }
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.distill.seed = seed;
        if let TeacherSource::Oracle { seed: s, .. } = &mut self.teacher {
            *s = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.distill.validate()?;
        if self.render.frames == 0 {
            bail!("render.frames must be at least 1");
        }
        Aabb::new(self.grid.bbox_min, self.grid.bbox_max)?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Writes the resolved config next to the outputs.
    pub fn write_effective(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("config.toml");
        fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }
}
