//! Pretraining of the toy denoiser on rendered views of a synthetic scene.

use std::time::Instant;

use rand::Rng;

use super::{caption, check_finite, cosine_lr_scale, substream, Adam, StageConfig, TrainReport, BACKGROUNDS};
use crate::diffusion::{denoising_loss_at, Condition, GradRequest, NoiseSample, NoiseSchedule, ToyDenoiser};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, OrbitSpec};
use crate::pointcloud::{default_splat_radius, SynthScene};
use crate::raster::{DepthMap, Image};
use crate::tokens::{PromptSpec, TokenSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainOptions {
    pub views: usize,
    /// Probability that a caption names its background color.
    pub background_word_prob: f64,
    /// Probability of the fully unconditional branch.
    pub cond_dropout: f64,
    /// Probability of keeping the prompt but zeroing the depth channel.
    pub depth_dropout: f64,
    pub elevation_range: (f64, f64),
    pub radius: f64,
    pub probe_size: usize,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            views: 120,
            background_word_prob: 0.5,
            cond_dropout: 0.1,
            depth_dropout: 0.1,
            elevation_range: (5.0, 25.0),
            radius: OrbitSpec::default().radius,
            probe_size: 16,
        }
    }
}

struct TrainingView {
    image: Image,
    depth: DepthMap,
}

impl TrainingView {
    fn composite(&self, background: [f64; 3]) -> Image {
        let mut img = self.image.clone();
        for (px, &d) in img.data_mut().chunks_exact_mut(3).zip(self.depth.data()) {
            if d <= 0.0 {
                px.copy_from_slice(&background);
            }
        }
        img
    }
}

struct Sample {
    x0: Image,
    cond: Condition,
    noise: NoiseSample,
}

fn draw_sample<R: Rng + ?Sized>(
    views: &[TrainingView],
    subject: &str,
    tokens: &TokenSet,
    opts: &PretrainOptions,
    dropout: bool,
    rng: &mut R,
) -> Sample {
    let view = &views[rng.gen_range(0..views.len())];
    let (bg_word, bg) = BACKGROUNDS[rng.gen_range(0..BACKGROUNDS.len())];
    let named = rng.gen_bool(opts.background_word_prob);
    let text = caption(subject, named.then_some(bg_word));
    let embedding = tokens.embed_prompt(&PromptSpec::new(text, false, false));
    let u: f64 = rng.gen();
    let mut cond = Condition::new(embedding, &view.depth);
    if dropout && u < opts.cond_dropout {
        cond = cond.to_null();
    } else if dropout && u < opts.cond_dropout + opts.depth_dropout {
        cond.depth.fill(0.0);
    }
    let (w, h) = view.image.dims();
    Sample {
        x0: view.composite(bg),
        cond,
        noise: NoiseSample::draw(&NoiseSchedule::default(), w, h, rng),
    }
}

fn probe_loss(model: &ToyDenoiser, probe: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in probe {
        total += denoising_loss_at(model, &s.x0, &s.cond, None, &s.noise, GradRequest::default())?.loss;
    }
    Ok(total / probe.len() as f64)
}

/// Trains `model` on `(view, depth, caption)` triples of `scene` rendered over
/// random backgrounds, with condition dropout so guidance has an
/// unconditional branch. Word embeddings in `tokens` stay frozen.
pub fn pretrain_toy(
    mut model: ToyDenoiser,
    scene: &SynthScene,
    tokens: &TokenSet,
    cfg: &StageConfig,
    opts: &PretrainOptions,
) -> Result<(ToyDenoiser, TrainReport)> {
    cfg.validate()?;
    if opts.views == 0 || opts.probe_size == 0 {
        return Err(Error::Config(
            "pretraining needs at least one view and one probe sample".into(),
        ));
    }
    if tokens.dim() != model.arch().embed_dim {
        return Err(Error::shape(model.arch().embed_dim, tokens.dim()));
    }
    let started = Instant::now();
    let (w, h) = (model.arch().width, model.arch().height);
    let intrinsics = Intrinsics::default_for(w, h);
    let splat = default_splat_radius(w);
    let mut view_rng = substream(cfg.seed, "pretrain/views");
    let mut views = Vec::with_capacity(opts.views);
    for _ in 0..opts.views {
        let orbit = OrbitSpec::new(
            opts.radius,
            view_rng.gen_range(opts.elevation_range.0..=opts.elevation_range.1),
            view_rng.gen_range(0.0..360.0),
        )?;
        let (image, depth) = scene.render_view(&orbit.view(intrinsics)?, splat, [1.0; 3]);
        views.push(TrainingView { image, depth });
    }
    let subject = scene.kind.subject();
    let mut probe_rng = substream(cfg.seed, "pretrain/probe");
    let probe: Vec<Sample> = (0..opts.probe_size)
        .map(|_| draw_sample(&views, subject, tokens, opts, false, &mut probe_rng))
        .collect();

    let mut report = TrainReport::new("pretrain");
    report.probe_initial = probe_loss(&model, &probe)?;
    report.note("views", opts.views);
    let mut rng = substream(cfg.seed, "pretrain/samples");
    let mut adam = Adam::new(model.params.len(), cfg.lr);
    let mut grad = vec![0.0; model.params.len()];
    for step in 0..cfg.steps {
        grad.fill(0.0);
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let s = draw_sample(&views, subject, tokens, opts, true, &mut rng);
            let out = denoising_loss_at(&model, &s.x0, &s.cond, None, &s.noise, GradRequest::params_only())?;
            loss += out.loss;
            let g = out.grads.params.expect("requested");
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let scale = 1.0 / cfg.batch as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        loss *= scale;
        check_finite(loss, step, "pretraining loss")?;
        report.losses.push(loss);
        adam.step_scaled(&mut model.params, &grad, cosine_lr_scale(step, cfg.steps, cfg.lr_floor));
        if step % 100 == 0 {
            log::debug!("pretrain step {step}: loss {loss:.5}");
        }
    }
    if !model.params.iter().all(|v| v.is_finite()) {
        return Err(Error::Diverged {
            step: cfg.steps,
            what: "denoiser weights".into(),
        });
    }
    report.probe_final = probe_loss(&model, &probe)?;
    report.wall_time = started.elapsed();
    Ok((model, report))
}
