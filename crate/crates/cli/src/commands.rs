//! The subcommands. Each reads its prerequisites from the output
//! directory, runs one step of the workflow and writes its artifacts there.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use tokensds::checkpoint::Checkpoint;
use tokensds::diffusion::{DenoiserArch, ToyDenoiser};
use tokensds::geometry::{Intrinsics, OrbitSpec};
use tokensds::pipeline::{
    background_color, caption_corpus, eval_consistency, heldout_psnr, heldout_views, pretrain_toy, stage1_semantic,
    stage2_geometric, stage3_sds, substream, PretrainOptions, SceneContext, Stage1Options, Stage2Options,
    Stage3Options, TrainReport,
};
use tokensds::pointcloud::{normalize_unit_sphere, synth_scene, PointCloud, SynthScene};
use tokensds::raster::Image;
use tokensds::tokens::{swap_prompt_subject, PromptSpec, TokenSet, Vocabulary};
use tokensds::volume::{init_grid, render, Bounds, GridInit, RenderConfig, VoxelGrid};

use crate::config::RunConfig;

/// Artifact file names inside the output directory.
pub mod artifacts {
    pub const DENOISER: &str = "denoiser.ckpt";
    pub const TOKENS: &str = "tokens.ckpt";
    pub const DENOISER_SEM: &str = "denoiser_sem.ckpt";
    pub const TOKENS_SEM: &str = "tokens_sem.ckpt";
    pub const TOKENS_GEO: &str = "tokens_geo.ckpt";
    pub const GRID: &str = "grid.ckpt";
    pub const GRID_EDIT: &str = "grid_edit.ckpt";
    pub const FRAMES: &str = "frames";
}

/// Options shared by every command.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub fast: bool,
    pub force: bool,
    pub cfg_scale: Option<f64>,
}

/// A loaded config with command-line overrides applied.
pub struct Run {
    pub cfg: RunConfig,
    pub fast: bool,
    pub force: bool,
}

impl Run {
    pub fn load(path: &Path, o: &Overrides) -> Result<Self> {
        let mut cfg = RunConfig::load(path)?;
        if let Some(seed) = o.seed {
            cfg.seed = seed;
        }
        if let Some(s) = o.cfg_scale {
            cfg.stage3.cfg_scale = s;
            cfg.validate()?;
        }
        std::fs::create_dir_all(&cfg.output_dir)
            .with_context(|| format!("cannot create output directory {}", cfg.output_dir.display()))?;
        Ok(Self {
            cfg,
            fast: o.fast,
            force: o.force,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    /// Path of a prerequisite, or an error naming it and the command that
    /// produces it.
    fn require(&self, name: &str, what: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.exists() {
            bail!("missing {what} checkpoint {} (run `{producer}` first)", p.display());
        }
        Ok(p)
    }

    /// Path of an output, refusing to replace an existing file without
    /// `--force`.
    fn output(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() && !self.force {
            bail!("{} already exists; pass --force to overwrite", p.display());
        }
        Ok(p)
    }

    fn arch(&self) -> DenoiserArch {
        let m = self.cfg.model;
        DenoiserArch::new(m.resolution, m.resolution, m.channels, m.embed_dim)
    }

    fn initial_tokens(&self) -> TokenSet {
        let corpus = caption_corpus();
        let vocab = Vocabulary::from_corpus(corpus.iter().map(String::as_str));
        TokenSet::new(vocab, self.cfg.model.embed_dim, &mut substream(self.cfg.seed, "tokens"))
    }

    fn synth(&self, kind: tokensds::pointcloud::SceneKind) -> Result<SynthScene> {
        Ok(synth_scene(
            kind,
            self.cfg.scene.points_per_unit,
            &mut substream(self.cfg.seed, "scene"),
        )?)
    }

    /// The synthetic scene, if the config describes one.
    pub fn synth_scene(&self) -> Result<Option<SynthScene>> {
        self.cfg.scene_kind().map(|k| self.synth(k)).transpose()
    }

    pub fn scene_context(&self) -> Result<SceneContext> {
        let res = self.cfg.model.resolution;
        let reference = self.cfg.reference()?;
        let load_image = |p: &Path| -> Result<Image> {
            let img = Image::load_png(p).with_context(|| format!("cannot read reference image {}", p.display()))?;
            if img.dims() != (res, res) {
                bail!(
                    "reference image {} is {}x{}, expected {res}x{res}",
                    p.display(),
                    img.width(),
                    img.height()
                );
            }
            Ok(img)
        };
        if let Some(scene) = self.synth_scene()? {
            return match &self.cfg.scene.image {
                Some(p) => Ok(SceneContext::new(scene.cloud, reference, load_image(p)?)?),
                None => {
                    let bg = background_color(&self.cfg.scene.background).expect("validated");
                    Ok(SceneContext::from_synth(&scene, res, reference, bg)?)
                }
            };
        }
        let cloud_path = self.cfg.scene.point_cloud.as_ref().expect("validated");
        let cloud = PointCloud::load_ply(cloud_path)
            .with_context(|| format!("cannot read point cloud {}", cloud_path.display()))?;
        let (cloud, _, _) = normalize_unit_sphere(&cloud)?;
        let image = load_image(self.cfg.scene.image.as_ref().expect("validated"))?;
        Ok(SceneContext::new(cloud, reference, image)?)
    }

    fn load_model(&self, name: &str, what: &str, producer: &str) -> Result<ToyDenoiser> {
        let p = self.require(name, what, producer)?;
        let model =
            ToyDenoiser::from_checkpoint(&load(&p)?).with_context(|| format!("corrupt checkpoint {}", p.display()))?;
        let (a, b) = (model.arch(), self.arch());
        if (a.width, a.height, a.embed_dim) != (b.width, b.height, b.embed_dim) {
            bail!("{} was trained for a different model configuration", p.display());
        }
        Ok(model)
    }

    fn load_tokens(&self, name: &str, what: &str, producer: &str) -> Result<TokenSet> {
        let p = self.require(name, what, producer)?;
        TokenSet::from_checkpoint(&load(&p)?).with_context(|| format!("corrupt checkpoint {}", p.display()))
    }

    fn save(&self, path: &Path, ck: &Checkpoint) -> Result<()> {
        ck.save(path)
            .with_context(|| format!("cannot write {}", path.display()))?;
        log::info!("wrote {}", path.display());
        Ok(())
    }

    fn save_report(&self, report: &TrainReport) -> Result<PathBuf> {
        let p = self.path(&format!("{}_report.txt", report.stage));
        report.save(&p)?;
        log::info!(
            "{}: probe loss {:.5} -> {:.5} in {:.1?}",
            report.stage,
            report.probe_initial,
            report.probe_final,
            report.wall_time
        );
        Ok(p)
    }

    fn stage3_prompt(&self, text: &str) -> PromptSpec {
        PromptSpec::new(text, true, true)
    }

    fn run_sds(&self, prompt: &PromptSpec, out: &Path) -> Result<TrainReport> {
        let model = self.load_model(artifacts::DENOISER_SEM, "semantic-stage denoiser", "stage1")?;
        let tokens = self.load_tokens(artifacts::TOKENS_GEO, "geometric-token", "stage2")?;
        let ctx = self.scene_context()?;
        let s3 = self.cfg.stage3;
        let grid = init_grid(
            s3.grid_resolution,
            Bounds::cube(s3.grid_extent),
            GridInit::GaussianBlob,
            &mut substream(self.cfg.seed, "grid"),
        )?;
        let cfg = self.cfg.stage3_config(self.fast);
        let (grid, report) = stage3_sds(&model, &tokens, prompt, &ctx, grid, &cfg, &Stage3Options::default())?;
        self.save(out, &grid.to_checkpoint())?;
        Ok(report)
    }
}

fn load(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("cannot read checkpoint {}", path.display()))
}

pub fn load_grid(path: &Path) -> Result<VoxelGrid> {
    VoxelGrid::from_checkpoint(&load(path)?).with_context(|| format!("corrupt grid checkpoint {}", path.display()))
}

pub fn cmd_pretrain(run: &Run) -> Result<()> {
    let model_out = run.output(artifacts::DENOISER)?;
    let tokens_out = run.output(artifacts::TOKENS)?;
    let scene = run.synth(run.cfg.pretrain_kind())?;
    let tokens = run.initial_tokens();
    let model = ToyDenoiser::new(run.arch(), &mut substream(run.cfg.seed, "denoiser/init"));
    let opts = PretrainOptions {
        views: run.cfg.pretrain.views,
        ..PretrainOptions::default()
    };
    let (model, report) = pretrain_toy(model, &scene, &tokens, &run.cfg.pretrain_config(run.fast), &opts)?;
    run.save(&model_out, &model.to_checkpoint())?;
    run.save(&tokens_out, &tokens.to_checkpoint())?;
    run.save_report(&report)?;
    Ok(())
}

pub fn cmd_stage1(run: &Run) -> Result<()> {
    let model_out = run.output(artifacts::DENOISER_SEM)?;
    let tokens_out = run.output(artifacts::TOKENS_SEM)?;
    let mut model = run.load_model(artifacts::DENOISER, "pretrained denoiser", "pretrain")?;
    let mut tokens = run.load_tokens(artifacts::TOKENS, "pretrained token", "pretrain")?;
    let ctx = run.scene_context()?;
    let s1 = run.cfg.stage1;
    let opts = Stage1Options {
        adapter_rank: (s1.adapter_rank > 0).then_some(s1.adapter_rank),
        adapter_lr: s1.adapter_lr,
        ..Stage1Options::default()
    };
    let report = stage1_semantic(
        &mut model,
        &ctx.reference_image,
        &run.cfg.scene.prompt,
        &mut tokens,
        &run.cfg.stage1_config(run.fast),
        &opts,
    )?;
    run.save(&model_out, &model.to_checkpoint())?;
    run.save(&tokens_out, &tokens.to_checkpoint())?;
    run.save_report(&report)?;
    Ok(())
}

pub fn cmd_stage2(run: &Run) -> Result<()> {
    let tokens_out = run.output(artifacts::TOKENS_GEO)?;
    let model = run.load_model(artifacts::DENOISER_SEM, "semantic-stage denoiser", "stage1")?;
    let mut tokens = run.load_tokens(artifacts::TOKENS_SEM, "semantic-token", "stage1")?;
    let ctx = run.scene_context()?;
    let opts = Stage2Options {
        mode: run.cfg.stage2.one_step_mode,
        ..Stage2Options::default()
    };
    let report = stage2_geometric(
        &model,
        &ctx,
        &run.cfg.scene.prompt,
        &mut tokens,
        &run.cfg.stage2_config(run.fast),
        &opts,
    )?;
    run.save(&tokens_out, &tokens.to_checkpoint())?;
    run.save_report(&report)?;
    Ok(())
}

pub fn cmd_stage3(run: &Run) -> Result<()> {
    let out = run.output(artifacts::GRID)?;
    let report = run.run_sds(&run.stage3_prompt(&run.cfg.scene.prompt), &out)?;
    run.save_report(&report)?;
    Ok(())
}

/// Reruns Stage III with the prompt text replaced; the learned tokens are
/// reused untouched.
pub fn cmd_edit(run: &Run, new_prompt: &str, output: &str) -> Result<()> {
    if new_prompt.trim().is_empty() {
        bail!("the edit prompt must not be empty");
    }
    let out = run.output(output)?;
    let spec = swap_prompt_subject(&run.stage3_prompt(&run.cfg.scene.prompt), new_prompt);
    let mut report = run.run_sds(&spec, &out)?;
    report.stage = "edit".into();
    report.note("prompt", new_prompt);
    run.save_report(&report)?;
    Ok(())
}

/// Orbit views evenly spaced in azimuth starting at the reference azimuth.
pub fn render_orbits(reference: &OrbitSpec, frames: usize) -> Vec<OrbitSpec> {
    (0..frames)
        .map(|k| reference.with_azimuth(reference.azimuth + 360.0 * k as f64 / frames as f64))
        .collect()
}

pub fn cmd_render(run: &Run, grid: &Path, frames: usize, out_dir: &Path) -> Result<()> {
    if frames == 0 {
        bail!("--frames must be at least 1");
    }
    let grid = load_grid(grid)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    let res = run.cfg.model.resolution;
    let intrinsics = Intrinsics::default_for(res, res);
    let cfg = RenderConfig::default();
    for (k, orbit) in render_orbits(&run.cfg.reference()?, frames).iter().enumerate() {
        let png = out_dir.join(format!("frame_{k:03}.png"));
        let pfm = out_dir.join(format!("frame_{k:03}.pfm"));
        for p in [&png, &pfm] {
            if p.exists() && !run.force {
                bail!("{} already exists; pass --force to overwrite", p.display());
            }
        }
        let out = render(&grid, &orbit.view(intrinsics)?, &cfg);
        out.image.clamped().save_png(&png)?;
        out.expected_depth.save_pfm(&pfm)?;
    }
    log::info!("rendered {frames} frames into {}", out_dir.display());
    Ok(())
}

/// Consistency in dB and, for synthetic scenes, held-out PSNR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub consistency_db: f64,
    pub heldout_psnr: Option<f64>,
}

impl std::fmt::Display for EvalSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "consistency_db={:.4} heldout_psnr=", self.consistency_db)?;
        match self.heldout_psnr {
            Some(p) => write!(f, "{p:.4}"),
            None => write!(f, "na"),
        }
    }
}

pub const HELDOUT_VIEWS: usize = 8;

pub fn cmd_eval(run: &Run, grid: &Path) -> Result<EvalSummary> {
    let grid = load_grid(grid)?;
    let ctx = run.scene_context()?;
    let views = heldout_views(&ctx.reference, HELDOUT_VIEWS)
        .iter()
        .map(|o| ctx.view(o))
        .collect::<tokensds::Result<Vec<_>>>()?;
    let cfg = RenderConfig::default();
    let consistency_db = eval_consistency(&grid, &views, &cfg)?;
    let heldout_psnr = match run.synth_scene()? {
        Some(scene) => Some(heldout_psnr(&grid, &scene, &views, ctx.splat_radius, &cfg)?),
        None => None,
    };
    Ok(EvalSummary {
        consistency_db,
        heldout_psnr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_orbits_are_evenly_spaced_from_the_reference() {
        let r = OrbitSpec::default();
        let az: Vec<f64> = render_orbits(&r, 4).iter().map(|o| o.azimuth).collect();
        assert_eq!(az, vec![0.0, 90.0, 180.0, 270.0]);
        let one = render_orbits(&r.with_azimuth(30.0), 1);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].azimuth, 30.0);
    }

    #[test]
    fn eval_summary_format() {
        let s = EvalSummary {
            consistency_db: 31.5,
            heldout_psnr: None,
        };
        assert_eq!(s.to_string(), "consistency_db=31.5000 heldout_psnr=na");
        let s = EvalSummary {
            heldout_psnr: Some(20.25),
            ..s
        };
        assert_eq!(s.to_string(), "consistency_db=31.5000 heldout_psnr=20.2500");
    }
}
