//! The run configuration: one TOML document describing the scene, the model
//! and every stage's budget.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tokensds::geometry::{OrbitSpec, ViewSchedule};
use tokensds::pipeline::{background_color, OneStepMode, StageConfig};
use tokensds::pointcloud::SceneKind;

pub const CONFIG_VERSION: u32 = 1;
pub const RESOLUTIONS: [usize; 3] = [32, 64, 128];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub scene: SceneSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub stage1: Stage1Section,
    #[serde(default)]
    pub stage2: Stage2Section,
    #[serde(default)]
    pub stage3: Stage3Section,
}

/// Either a synthetic scene (`synth`) or a point cloud plus reference image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSection {
    /// Synthetic scene kind: `sphere`, `two_spheres` or `box_plus_sphere`.
    #[serde(default)]
    pub synth: Option<String>,
    #[serde(default = "default_points_per_unit")]
    pub points_per_unit: f64,
    /// PLY point cloud (used instead of `synth`).
    #[serde(default)]
    pub point_cloud: Option<PathBuf>,
    /// Reference image; required with `point_cloud`, optional for synthetic
    /// scenes (rendered from the scene when absent).
    #[serde(default)]
    pub image: Option<PathBuf>,
    /// Background of the reference view, one of the named palette colors.
    #[serde(default = "default_background")]
    pub background: String,
    pub prompt: String,
    #[serde(default)]
    pub reference: ReferenceSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceSection {
    pub radius: f64,
    pub elevation: f64,
    pub azimuth: f64,
}

impl Default for ReferenceSection {
    fn default() -> Self {
        let o = OrbitSpec::default();
        Self {
            radius: o.radius,
            elevation: o.elevation,
            azimuth: o.azimuth,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub resolution: usize,
    pub channels: usize,
    pub embed_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            resolution: 64,
            channels: 32,
            embed_dim: tokensds::tokens::DEFAULT_EMBED_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    /// Synthetic scene the denoiser learns from; defaults to the scene's
    /// own kind, or `two_spheres` for point-cloud scenes.
    pub scene: Option<String>,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub views: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let c = StageConfig::pretrain(0);
        Self {
            scene: None,
            steps: c.steps,
            lr: c.lr,
            batch: c.batch,
            views: tokensds::pipeline::PretrainOptions::default().views,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Section {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Rank of the low-rank adapter; 0 trains the token alone.
    pub adapter_rank: usize,
    pub adapter_lr: f64,
}

impl Default for Stage1Section {
    fn default() -> Self {
        let c = StageConfig::stage1(0);
        let o = tokensds::pipeline::Stage1Options::default();
        Self {
            steps: c.steps,
            lr: c.lr,
            batch: c.batch,
            adapter_rank: o.adapter_rank.unwrap_or(0),
            adapter_lr: o.adapter_lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Section {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub azimuth_step: f64,
    pub one_step_mode: OneStepMode,
}

impl Default for Stage2Section {
    fn default() -> Self {
        let c = StageConfig::stage2(0);
        Self {
            steps: c.steps,
            lr: c.lr,
            batch: c.batch,
            azimuth_step: c.schedule.azimuth_step,
            one_step_mode: OneStepMode::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage3Section {
    pub steps: usize,
    pub lr: f64,
    pub lr_density: f64,
    pub cfg_scale: f64,
    pub elevation_jitter: f64,
    pub grid_resolution: usize,
    /// Half extent of the cubic grid volume.
    pub grid_extent: f64,
}

impl Default for Stage3Section {
    fn default() -> Self {
        let c = StageConfig::stage3(0);
        Self {
            steps: c.steps,
            lr: c.lr,
            lr_density: c.lr_density,
            cfg_scale: c.cfg_scale,
            elevation_jitter: c.schedule.elevation_jitter,
            grid_resolution: 48,
            grid_extent: 1.2,
        }
    }
}

fn default_points_per_unit() -> f64 {
    2000.0
}

fn default_background() -> String {
    "white".into()
}

impl RunConfig {
    /// Reads and validates a config; relative paths are resolved against
    /// the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()
            .with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(p) = self.scene.point_cloud.as_mut() {
            fix(p);
        }
        if let Some(p) = self.scene.image.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            bail!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            );
        }
        if !RESOLUTIONS.contains(&self.model.resolution) {
            bail!("resolution {} must be one of {RESOLUTIONS:?}", self.model.resolution);
        }
        if self.model.channels == 0 || self.model.embed_dim == 0 {
            bail!("model channels and embedding size must be positive");
        }
        match (&self.scene.synth, &self.scene.point_cloud) {
            (Some(_), Some(_)) => bail!("scene sets both `synth` and `point_cloud`"),
            (None, None) => bail!("scene needs either `synth` or `point_cloud`"),
            (Some(kind), None) => {
                kind.parse::<SceneKind>()?;
                if !(self.scene.points_per_unit > 0.0) {
                    bail!("points_per_unit must be positive");
                }
            }
            (None, Some(cloud)) => {
                if !cloud.exists() {
                    bail!("point cloud {} does not exist", cloud.display());
                }
                if self.scene.image.is_none() {
                    bail!("a point-cloud scene needs a reference `image`");
                }
            }
        }
        if let Some(image) = &self.scene.image {
            if !image.exists() {
                bail!("reference image {} does not exist", image.display());
            }
        }
        if background_color(&self.scene.background).is_none() {
            bail!("unknown background color `{}`", self.scene.background);
        }
        if self.scene.prompt.trim().is_empty() {
            bail!("the prompt must not be empty");
        }
        self.reference()?;
        if let Some(kind) = &self.pretrain.scene {
            kind.parse::<SceneKind>()?;
        }
        if self.pretrain.views == 0 {
            bail!("pretraining needs at least one view");
        }
        if self.stage3.grid_resolution < 2 || !(self.stage3.grid_extent > 0.0) {
            bail!("stage3 grid needs resolution >= 2 and a positive extent");
        }
        for (name, c) in [
            ("pretrain", self.pretrain_config(false)),
            ("stage1", self.stage1_config(false)),
            ("stage2", self.stage2_config(false)),
            ("stage3", self.stage3_config(false)),
        ] {
            c.validate().with_context(|| format!("section [{name}]"))?;
        }
        Ok(())
    }

    pub fn reference(&self) -> Result<OrbitSpec> {
        let r = self.scene.reference;
        Ok(OrbitSpec::new(r.radius, r.elevation, r.azimuth)?)
    }

    pub fn scene_kind(&self) -> Option<SceneKind> {
        self.scene.synth.as_deref().and_then(|s| s.parse().ok())
    }

    /// Scene the denoiser is pretrained on.
    pub fn pretrain_kind(&self) -> SceneKind {
        self.pretrain
            .scene
            .as_deref()
            .and_then(|s| s.parse().ok())
            .or_else(|| self.scene_kind())
            .unwrap_or(SceneKind::TwoSpheres)
    }

    fn scaled(c: StageConfig, fast: bool) -> StageConfig {
        if fast {
            c.scaled_down(10)
        } else {
            c
        }
    }

    pub fn pretrain_config(&self, fast: bool) -> StageConfig {
        let p = &self.pretrain;
        Self::scaled(
            StageConfig {
                steps: p.steps,
                lr: p.lr,
                batch: p.batch,
                ..StageConfig::pretrain(self.seed)
            },
            fast,
        )
    }

    pub fn stage1_config(&self, fast: bool) -> StageConfig {
        let s = self.stage1;
        Self::scaled(
            StageConfig {
                steps: s.steps,
                lr: s.lr,
                batch: s.batch,
                ..StageConfig::stage1(self.seed)
            },
            fast,
        )
    }

    pub fn stage2_config(&self, fast: bool) -> StageConfig {
        let s = self.stage2;
        Self::scaled(
            StageConfig {
                steps: s.steps,
                lr: s.lr,
                batch: s.batch,
                schedule: ViewSchedule {
                    azimuth_step: s.azimuth_step,
                    reference_elevation: self.scene.reference.elevation,
                    ..ViewSchedule::default()
                },
                ..StageConfig::stage2(self.seed)
            },
            fast,
        )
    }

    pub fn stage3_config(&self, fast: bool) -> StageConfig {
        let s = self.stage3;
        Self::scaled(
            StageConfig {
                steps: s.steps,
                lr: s.lr,
                lr_density: s.lr_density,
                cfg_scale: s.cfg_scale,
                schedule: ViewSchedule {
                    elevation_jitter: s.elevation_jitter,
                    reference_elevation: self.scene.reference.elevation,
                    ..ViewSchedule::default()
                },
                ..StageConfig::stage3(self.seed)
            },
            fast,
        )
    }

    /// The default toy setup: the two-spheres scene on a white background.
    pub fn default_toy(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            output_dir: output_dir.into(),
            scene: SceneSection {
                synth: Some("two_spheres".into()),
                points_per_unit: default_points_per_unit(),
                point_cloud: None,
                image: None,
                background: default_background(),
                prompt: "a photo of two spheres".into(),
                reference: ReferenceSection::default(),
            },
            model: ModelSection::default(),
            pretrain: PretrainSection::default(),
            stage1: Stage1Section::default(),
            stage2: Stage2Section::default(),
            stage3: Stage3Section::default(),
        }
    }
}
