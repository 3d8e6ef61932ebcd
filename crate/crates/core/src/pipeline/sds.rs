//! Stage III: score distillation into a voxel grid.

use std::time::Instant;

use rand::Rng;

use super::{check_finite, cosine_lr_scale, substream, Adam, SceneContext, StageConfig, TrainReport};
use crate::diffusion::{add_noise, cfg_predict, sds_weight, Condition, NoisePredictor, NoiseSample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::geometry::OrbitSpec;
use crate::raster::Image;
use crate::tokens::{PromptSpec, TokenSet};
use crate::volume::{render, render_vjp, RenderConfig, VoxelGrid};

/// SDS pixel gradient `w(t)·(ε̂_cfg(x_t) − ε)` for a rendered image, and the
/// loss proxy `w(t)·mean((ε̂ − ε)²)`.
pub fn sds_pixel_gradient<M: NoisePredictor + ?Sized>(
    model: &M,
    rendered: &Image,
    cond: &Condition,
    scale: f64,
    sample: &NoiseSample,
) -> Result<(Vec<f64>, f64)> {
    let x_t = add_noise(rendered, sample.t, &sample.eps)?;
    let eps_hat = cfg_predict(model, &x_t, sample.t, cond, scale)?;
    let w = sds_weight(sample.t);
    let mut proxy = 0.0;
    let grad: Vec<f64> = eps_hat
        .data()
        .iter()
        .zip(sample.eps.data())
        .map(|(p, e)| {
            let d = p - e;
            proxy += d * d;
            w * d
        })
        .collect();
    let n = grad.len().max(1) as f64;
    Ok((grad, w * proxy / n))
}

/// Score distillation with the identity renderer: the optimized parameter
/// is the image itself.
pub fn sds_image<M: NoisePredictor + ?Sized>(
    model: &M,
    init: Image,
    cond: &Condition,
    cfg: &StageConfig,
) -> Result<(Image, TrainReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let mut theta = init;
    let mut rng = substream(cfg.seed, "sds_image");
    let mut adam = Adam::new(theta.data().len(), cfg.lr);
    let mut report = TrainReport::new("sds_image");
    for step in 0..cfg.steps {
        let sample = NoiseSample::draw(&NoiseSchedule::default(), theta.width(), theta.height(), &mut rng);
        let (grad, proxy) = sds_pixel_gradient(model, &theta, cond, cfg.cfg_scale, &sample)?;
        check_finite(proxy, step, "SDS loss proxy")?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                step,
                what: "SDS pixel gradient".into(),
            });
        }
        report.losses.push(proxy);
        adam.step_scaled(theta.data_mut(), &grad, cosine_lr_scale(step, cfg.steps, cfg.lr_floor));
    }
    report.wall_time = started.elapsed();
    Ok((theta, report))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Stage3Options {
    pub render: RenderConfig,
}

/// Optimizes `grid` so that its renderings from random orbit views score
/// well under the denoiser conditioned on the full prompt and the point
/// cloud's depth in that view.
pub fn stage3_sds<M: NoisePredictor + ?Sized>(
    model: &M,
    tokens: &TokenSet,
    prompt: &PromptSpec,
    ctx: &SceneContext,
    mut grid: VoxelGrid,
    cfg: &StageConfig,
    opts: &Stage3Options,
) -> Result<(VoxelGrid, TrainReport)> {
    cfg.validate()?;
    opts.render.validate()?;
    grid.validate()?;
    let started = Instant::now();
    let embedding = tokens.embed_prompt(prompt);
    let mut rng = substream(cfg.seed, "stage3");
    let mut density_adam = Adam::new(grid.density_raw.len(), cfg.lr_density);
    let mut color_adam = Adam::new(grid.color_raw.len(), cfg.lr);
    let mut report = TrainReport::new("stage3");
    report.note("cfg_scale", cfg.cfg_scale);
    let jitter = cfg.schedule.elevation_jitter.abs();
    let mut running = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let elevation = ctx.reference.elevation
            + if jitter > 0.0 {
                rng.gen_range(-jitter..=jitter)
            } else {
                0.0
            };
        let orbit = OrbitSpec {
            elevation,
            ..ctx.reference.with_azimuth(rng.gen_range(0.0..360.0))
        };
        let view = ctx.view(&orbit)?;
        let depth = ctx.depth(&view);
        let cond = Condition::new(embedding.clone(), &depth);
        let render_cfg = RenderConfig {
            jitter: Some(rng.gen()),
            ..opts.render
        };
        let rendered = render(&grid, &view, &render_cfg).image;
        let sample = NoiseSample::draw(&NoiseSchedule::default(), ctx.width(), ctx.height(), &mut rng);
        let (pixel_grad, proxy) = sds_pixel_gradient(model, &rendered, &cond, cfg.cfg_scale, &sample)?;
        check_finite(proxy, step, "SDS loss proxy")?;
        let grads = render_vjp(&grid, &view, &render_cfg, &pixel_grad)?;
        if grads.density_raw.iter().chain(&grads.color_raw).any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                step,
                what: "grid gradient".into(),
            });
        }
        let lr_scale = cosine_lr_scale(step, cfg.steps, cfg.lr_floor);
        density_adam.step_scaled(&mut grid.density_raw, &grads.density_raw, lr_scale);
        color_adam.step_scaled(&mut grid.color_raw, &grads.color_raw, lr_scale);
        running.push(proxy);
        report.losses.push(proxy);
        if step % 100 == 0 {
            log::debug!("stage3 step {step}: proxy {proxy:.5}");
        }
    }
    let head = running.len().min(50);
    if head > 0 {
        report.probe_initial = running[..head].iter().sum::<f64>() / head as f64;
        report.probe_final = running[running.len() - head..].iter().sum::<f64>() / head as f64;
    }
    report.wall_time = started.elapsed();
    Ok((grid, report))
}
