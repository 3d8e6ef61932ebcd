//! Toy-model pretraining, the three optimization stages and evaluation.
//!
//! Stage I learns the `<sem>` row (plus a low-rank adapter) from the
//! reference image alone, Stage II learns the `<geo>` row from warp and
//! reconstruction losses along an orbit sweep, and Stage III distills the
//! token-conditioned denoiser into a voxel grid with score distillation.

mod encode;
mod eval;
mod pretrain;
mod sds;

use std::path::Path;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use encode::{
    rec_loss_step, stage1_semantic, stage2_geometric, warp_loss_step, OneStepMode, Stage1Options, Stage2Options,
    StepLoss,
};
pub use eval::{eval_consistency, ground_truth_grid, heldout_psnr, heldout_views, saturation_stats, SaturationStats};
pub use pretrain::{pretrain_toy, PretrainOptions};
pub use sds::{sds_image, sds_pixel_gradient, stage3_sds, Stage3Options};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, OrbitSpec, View, ViewSchedule};
use crate::pointcloud::{default_splat_radius, render_depth, PointCloud, SceneKind, SynthScene};
use crate::raster::{DepthMap, Image};

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for the named part of a run, so that each stage
/// can be rerun on its own with the same randomness.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(h)))
}

/// Adam with `β₁ = 0.9`, `β₂ = 0.99`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step_scaled(params, grad, 1.0);
    }

    /// One update with the learning rate multiplied by `lr_scale`.
    pub fn step_scaled(&mut self, params: &mut [f64], grad: &[f64], lr_scale: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr = self.lr * lr_scale;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
    }
}

/// Cosine decay from 1 to `floor` over `total` steps.
pub fn cosine_lr_scale(step: usize, total: usize, floor: f64) -> f64 {
    if total <= 1 {
        return 1.0;
    }
    let p = step as f64 / (total - 1) as f64;
    floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    pub steps: usize,
    /// Learning rate for tokens (stages I/II), weights (pretraining) or
    /// grid colors (stage III).
    pub lr: f64,
    /// Grid density learning rate (stage III only).
    pub lr_density: f64,
    /// Final learning-rate fraction of the cosine decay (1 = constant).
    pub lr_floor: f64,
    pub batch: usize,
    pub cfg_scale: f64,
    pub seed: u64,
    pub schedule: ViewSchedule,
}

impl StageConfig {
    fn base(steps: usize, lr: f64, seed: u64) -> Self {
        Self {
            steps,
            lr,
            lr_density: 5e-2,
            lr_floor: 0.1,
            batch: 1,
            cfg_scale: 10.0,
            seed,
            schedule: ViewSchedule::default(),
        }
    }

    pub fn pretrain(seed: u64) -> Self {
        Self {
            batch: 4,
            ..Self::base(2000, 2e-3, seed)
        }
    }

    pub fn stage1(seed: u64) -> Self {
        Self {
            batch: 2,
            ..Self::base(1000, 1e-2, seed)
        }
    }

    pub fn stage2(seed: u64) -> Self {
        Self::base(2000, 1e-2, seed)
    }

    pub fn stage3(seed: u64) -> Self {
        Self::base(10_000, 1e-2, seed)
    }

    /// Divides the step budget by `factor` (at least one step remains).
    pub fn scaled_down(mut self, factor: usize) -> Self {
        if factor > 1 {
            self.steps = (self.steps / factor).max(1);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.lr_density > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::Config(format!("lr floor {} must lie in [0, 1]", self.lr_floor)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.cfg_scale >= 0.0) {
            return Err(Error::Config(format!("cfg scale {} must be >= 0", self.cfg_scale)));
        }
        Ok(())
    }
}

/// Loss history of one training run. `probe_*` are losses on a fixed
/// evaluation set before and after training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub stage: String,
    pub losses: Vec<f64>,
    pub probe_initial: f64,
    pub probe_final: f64,
    pub wall_time: Duration,
    /// Extra `key value` lines (statistics, artifact names).
    pub notes: Vec<(String, String)>,
}

impl TrainReport {
    pub(crate) fn new(stage: &str) -> Self {
        Self {
            stage: stage.to_string(),
            losses: Vec::new(),
            probe_initial: f64::NAN,
            probe_final: f64::NAN,
            wall_time: Duration::ZERO,
            notes: Vec::new(),
        }
    }

    pub fn probe_ratio(&self) -> f64 {
        self.probe_final / self.probe_initial
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.notes.push((key.to_string(), value.to_string()));
    }

    /// Line-oriented `step loss` text; wall time is left out so that
    /// reports of identical runs are byte-identical.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# stage {}\n# probe_initial {:e}\n# probe_final {:e}\n",
            self.stage, self.probe_initial, self.probe_final
        );
        for (k, v) in &self.notes {
            out.push_str(&format!("# {k} {v}\n"));
        }
        out.push_str("step loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{i} {l:e}\n"));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn check_finite(value: f64, step: usize, what: &str) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Diverged {
            step,
            what: what.to_string(),
        });
    }
    Ok(())
}

/// Background colors the toy model learns to name.
pub const BACKGROUNDS: [(&str, [f64; 3]); 6] = [
    ("white", [1.0, 1.0, 1.0]),
    ("black", [0.0, 0.0, 0.0]),
    ("gray", [0.5, 0.5, 0.5]),
    ("green", [0.25, 0.7, 0.3]),
    ("blue", [0.2, 0.3, 0.85]),
    ("yellow", [0.95, 0.85, 0.3]),
];

pub fn background_color(word: &str) -> Option<[f64; 3]> {
    BACKGROUNDS.iter().find(|(w, _)| *w == word).map(|(_, c)| *c)
}

/// `"a photo of <subject>"`, optionally `" on a <bg> background"`.
pub fn caption(subject: &str, background: Option<&str>) -> String {
    match background {
        Some(bg) => format!("a photo of {subject} on a {bg} background"),
        None => format!("a photo of {subject}"),
    }
}

/// Every caption the toy model may see, used to build the vocabulary.
pub fn caption_corpus() -> Vec<String> {
    let mut out = Vec::new();
    for kind in [SceneKind::Sphere, SceneKind::TwoSpheres, SceneKind::BoxPlusSphere] {
        out.push(caption(kind.subject(), None));
        for (bg, _) in BACKGROUNDS {
            out.push(caption(kind.subject(), Some(bg)));
        }
    }
    out.push("a cat a rabbit".to_string());
    out
}

/// Geometry shared by the stages: the (normalized) point cloud, camera
/// intrinsics and the reference view with its image.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneContext {
    pub cloud: PointCloud,
    pub intrinsics: Intrinsics,
    pub reference: OrbitSpec,
    pub splat_radius: f64,
    pub reference_image: Image,
    pub reference_depth: DepthMap,
}

impl SceneContext {
    pub fn new(cloud: PointCloud, reference: OrbitSpec, reference_image: Image) -> Result<Self> {
        cloud.validate()?;
        reference.validate()?;
        let (w, h) = reference_image.dims();
        let intrinsics = Intrinsics::default_for(w, h);
        let splat_radius = default_splat_radius(w);
        let reference_depth = render_depth(&cloud, &reference.view(intrinsics)?, splat_radius);
        if reference_depth.valid_count() == 0 {
            return Err(Error::Config(
                "the point cloud is not visible from the reference view".into(),
            ));
        }
        Ok(Self {
            cloud,
            intrinsics,
            reference,
            splat_radius,
            reference_image,
            reference_depth,
        })
    }

    /// Context whose reference image is the scene's own rendering.
    pub fn from_synth(
        scene: &SynthScene,
        resolution: usize,
        reference: OrbitSpec,
        background: [f64; 3],
    ) -> Result<Self> {
        let intrinsics = Intrinsics::default_for(resolution, resolution);
        let view = reference.view(intrinsics)?;
        let (image, _) = scene.render_view(&view, default_splat_radius(resolution), background);
        Self::new(scene.cloud.clone(), reference, image)
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn view(&self, orbit: &OrbitSpec) -> Result<View> {
        orbit.view(self.intrinsics)
    }

    pub fn depth(&self, view: &View) -> DepthMap {
        render_depth(&self.cloud, view, self.splat_radius)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn substreams_are_distinct_and_reproducible() {
        let a: u64 = substream(1, "stage1").gen();
        let b: u64 = substream(1, "stage2").gen();
        let c: u64 = substream(2, "stage1").gen();
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, substream(1, "stage1").gen::<u64>());
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for s in 0..500 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step_scaled(&mut x, &g, cosine_lr_scale(s, 500, 0.0));
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3), "{x:?}");
    }

    #[test]
    fn report_text_is_line_oriented() {
        let mut r = TrainReport::new("demo");
        r.losses = vec![1.0, 0.5];
        r.probe_initial = 1.0;
        r.probe_final = 0.5;
        let text = r.to_text();
        assert!(text.ends_with("step loss\n0 1e0\n1 5e-1\n"));
        assert_eq!(r.probe_ratio(), 0.5);
    }

    #[test]
    fn fast_scaling_keeps_one_step() {
        assert_eq!(StageConfig::stage1(0).scaled_down(10).steps, 100);
        assert_eq!(StageConfig::stage2(0).scaled_down(10).steps, 200);
        assert_eq!(StageConfig::stage3(0).scaled_down(10).steps, 1000);
        let mut c = StageConfig::stage1(0);
        c.steps = 3;
        assert_eq!(c.scaled_down(10).steps, 1);
    }
}
