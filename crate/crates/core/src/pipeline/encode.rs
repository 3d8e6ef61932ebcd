//! Stage I (semantic token) and Stage II (geometric token).

use std::time::Instant;

use super::{check_finite, cosine_lr_scale, substream, Adam, SceneContext, StageConfig, TrainReport};
use crate::diffusion::{
    add_noise, denoising_loss_at, sds_weight, Condition, GradRequest, LoraAdapter, NoisePredictor, NoiseSample,
    NoiseSchedule, ToyDenoiser,
};
use crate::error::{Error, Result};
use crate::geometry::{sweep_sequence, View};
use crate::raster::{DepthMap, Image, WarpMask};
use crate::tokens::{PromptSpec, TokenId, TokenSet};
use crate::warp::{masked_mse_grad, masked_mse_slices, reference_mask, warp_backward, DEFAULT_OCCLUSION_TOL};

/// How the warp loss forms its image estimate `Ĵ` for the target view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OneStepMode {
    /// `Ĵ = α·I + σ·ε̂(I, t)`, the input image fed to the model as is.
    #[default]
    #[serde(alias = "paper")]
    CleanInput,
    /// `Ĵ = (x_t − σ·ε̂(x_t, t)) / α` with `x_t = α·I + σ·ε`.
    Conventional,
}

/// A loss value and its gradient with respect to one token row.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Warp-loss result together with the images it compared.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpStep {
    pub loss: StepLoss,
    pub estimate: Image,
    pub warped: Image,
    pub mask: WarpMask,
}

/// `w(t)·‖(Ĵ − W_{I→J}(I))·M‖²` (mean over masked values) and its gradient
/// with respect to the `<geo>` row.
#[allow(clippy::too_many_arguments)]
pub fn warp_loss_step<M: NoisePredictor + ?Sized>(
    model: &M,
    image_i: &Image,
    view_i: &View,
    view_j: &View,
    depth_i: &DepthMap,
    depth_j: &DepthMap,
    tokens: &TokenSet,
    prompt: &PromptSpec,
    sample: &NoiseSample,
    mode: OneStepMode,
) -> Result<WarpStep> {
    let (warped, mask) = warp_backward(image_i, depth_i, depth_j, view_i, view_j, DEFAULT_OCCLUSION_TOL)?;
    let cond = Condition::new(tokens.embed_prompt(prompt), depth_j);
    let sched = NoiseSchedule::default();
    let (t, a, s) = (sample.t, sched.alpha(sample.t), sched.sigma(sample.t));
    let w = sds_weight(t);
    let (input, base, coeff) = match mode {
        OneStepMode::CleanInput => (
            image_i.clone(),
            image_i.data().iter().map(|v| a * v).collect::<Vec<_>>(),
            s,
        ),
        OneStepMode::Conventional => {
            if a <= 0.0 {
                return Err(Error::InvalidArgument(
                    "conventional one-step estimate needs t < 1".into(),
                ));
            }
            let x_t = add_noise(image_i, t, &sample.eps)?;
            let base = x_t.data().iter().map(|v| v / a).collect();
            (x_t, base, -s / a)
        }
    };
    let mut loss = 0.0;
    let mut estimate = Vec::new();
    let (_, grads) = model.predict_with_grads(&input, t, &cond, GradRequest::embedding_only(), &mut |eps_hat| {
        estimate = base.iter().zip(eps_hat.data()).map(|(b, e)| b + coeff * e).collect();
        loss = w * masked_mse_slices(&estimate, warped.data(), &mask).value;
        masked_mse_grad(&estimate, warped.data(), &mask)
            .into_iter()
            .map(|g| g * w * coeff)
            .collect()
    })?;
    let pooled = grads.embedding.unwrap_or_else(|| vec![0.0; tokens.dim()]);
    let grad = tokens.row_gradient(prompt, tokens.vocab().geo(), &pooled);
    Ok(WarpStep {
        loss: StepLoss { loss, grad },
        estimate: Image::from_vec(image_i.width(), image_i.height(), estimate)?,
        warped,
        mask,
    })
}

/// `w(t)·‖(ε̂(I_ref·M, t, y, D_ref) − ε)·M‖²` on the reference object mask,
/// with the gradient with respect to the `<geo>` row.
pub fn rec_loss_step<M: NoisePredictor + ?Sized>(
    model: &M,
    image_ref: &Image,
    depth_ref: &DepthMap,
    tokens: &TokenSet,
    prompt: &PromptSpec,
    sample: &NoiseSample,
) -> Result<StepLoss> {
    let mask = reference_mask(depth_ref);
    let x0 = image_ref.masked(&mask);
    let cond = Condition::new(tokens.embed_prompt(prompt), depth_ref);
    let out = denoising_loss_at(model, &x0, &cond, Some(&mask), sample, GradRequest::embedding_only())?;
    let pooled = out.grads.embedding.unwrap_or_else(|| vec![0.0; tokens.dim()]);
    Ok(StepLoss {
        loss: out.loss,
        grad: tokens.row_gradient(prompt, tokens.vocab().geo(), &pooled),
    })
}

fn curriculum(seed: u64, name: &str, len: usize, width: usize, height: usize) -> Vec<NoiseSample> {
    let mut rng = substream(seed, name);
    (0..len)
        .map(|_| NoiseSample::draw(&NoiseSchedule::default(), width, height, &mut rng))
        .collect()
}

fn adam_row_step(tokens: &mut TokenSet, id: TokenId, adam: &mut Adam, grad: &[f64], lr_scale: f64) -> Result<()> {
    tokens.update_row(id, |row| adam.step_scaled(row, grad, lr_scale))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1Options {
    /// Rank of the adapter trained alongside `<sem>`; `None` trains the token only.
    pub adapter_rank: Option<usize>,
    pub adapter_lr: f64,
    /// Number of fixed `(t, ε)` pairs cycled through during training.
    pub curriculum: usize,
}

impl Default for Stage1Options {
    fn default() -> Self {
        Self {
            adapter_rank: Some(4),
            adapter_lr: 1e-2,
            curriculum: 8,
        }
    }
}

/// Learns the `<sem>` row (and an adapter merged into `model` afterwards)
/// by denoising the reference image under `prompt + <sem>` with the depth
/// channel zeroed.
pub fn stage1_semantic(
    model: &mut ToyDenoiser,
    image_ref: &Image,
    prompt: &str,
    tokens: &mut TokenSet,
    cfg: &StageConfig,
    opts: &Stage1Options,
) -> Result<TrainReport> {
    cfg.validate()?;
    let (w, h) = (model.arch().width, model.arch().height);
    image_ref.check_shape(w, h)?;
    if opts.curriculum == 0 {
        return Err(Error::Config("stage I curriculum must not be empty".into()));
    }
    let started = Instant::now();
    let sem = tokens.vocab().sem();
    tokens.set_trainable_only(&[sem]);
    let spec = PromptSpec::new(prompt, true, false);
    let samples = curriculum(cfg.seed, "stage1/curriculum", opts.curriculum, w, h);
    let evaluate = |model: &ToyDenoiser, tokens: &TokenSet| -> Result<f64> {
        let cond = Condition::without_depth(tokens.embed_prompt(&spec), w, h);
        let mut total = 0.0;
        for s in &samples {
            total += denoising_loss_at(model, image_ref, &cond, None, s, GradRequest::default())?.loss;
        }
        Ok(total / samples.len() as f64)
    };
    let mut report = TrainReport::new("stage1");
    report.probe_initial = evaluate(model, tokens)?;
    if cfg.steps == 0 {
        report.probe_final = report.probe_initial;
        report.wall_time = started.elapsed();
        return Ok(report);
    }

    if let Some(rank) = opts.adapter_rank {
        let mut rng = substream(cfg.seed, "stage1/adapter");
        model.adapter = Some(LoraAdapter::new(model.arch(), rank, &mut rng));
    }
    let adapter_len = model.adapter.as_ref().map_or(0, LoraAdapter::param_count);
    let mut token_adam = Adam::new(tokens.dim(), cfg.lr);
    let mut adapter_adam = Adam::new(adapter_len, opts.adapter_lr);
    let request = GradRequest {
        params: false,
        adapter: true,
        embedding: true,
    };
    for step in 0..cfg.steps {
        let cond = Condition::without_depth(tokens.embed_prompt(&spec), w, h);
        let mut loss = 0.0;
        let mut g_row = vec![0.0; tokens.dim()];
        let mut g_adapter = vec![0.0; adapter_len];
        for b in 0..cfg.batch {
            let sample = &samples[(step * cfg.batch + b) % samples.len()];
            let out = denoising_loss_at(&*model, image_ref, &cond, None, sample, request)?;
            loss += out.loss;
            let pooled = out.grads.embedding.expect("requested");
            for (a, g) in g_row.iter_mut().zip(tokens.row_gradient(&spec, sem, &pooled)) {
                *a += g;
            }
            if let Some((ga, gb)) = out.grads.adapter {
                for (a, g) in g_adapter.iter_mut().zip(ga.iter().chain(&gb)) {
                    *a += g;
                }
            }
        }
        let inv = 1.0 / cfg.batch as f64;
        loss *= inv;
        check_finite(loss, step, "stage I loss")?;
        report.losses.push(loss);
        g_row.iter_mut().for_each(|g| *g *= inv);
        g_adapter.iter_mut().for_each(|g| *g *= inv);
        let lr_scale = cosine_lr_scale(step, cfg.steps, cfg.lr_floor);
        adam_row_step(tokens, sem, &mut token_adam, &g_row, lr_scale)?;
        if let Some(ad) = model.adapter.as_mut() {
            let mut flat: Vec<f64> = ad.a.iter().chain(&ad.b).copied().collect();
            adapter_adam.step_scaled(&mut flat, &g_adapter, lr_scale);
            let (a, b) = flat.split_at(ad.a.len());
            ad.a.copy_from_slice(a);
            ad.b.copy_from_slice(b);
        }
    }
    model.merge_adapter();
    report.probe_final = evaluate(model, tokens)?;
    report.wall_time = started.elapsed();
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Options {
    pub mode: OneStepMode,
    /// Number of fixed `(t, ε)` pairs per loss term.
    pub curriculum: usize,
}

impl Default for Stage2Options {
    fn default() -> Self {
        Self {
            mode: OneStepMode::CleanInput,
            curriculum: 8,
        }
    }
}

/// Next sweep source: the warped image inside the mask, the model's
/// estimate `Ĵ` outside it.
fn chain_source(ws: &WarpStep) -> Image {
    let mut next = ws.estimate.clamped();
    for ((dst, src), &keep) in next
        .data_mut()
        .chunks_exact_mut(3)
        .zip(ws.warped.data().chunks_exact(3))
        .zip(ws.mask.bits())
    {
        if keep {
            dst.copy_from_slice(src);
        }
    }
    next
}

/// Learns the `<geo>` row by alternating warp and reconstruction steps.
///
/// The warp source starts as the reference image; after each warp step the
/// next source is the warped image inside the mask and the model's estimate
/// `Ĵ` outside it, and the sweep restarts from the reference after a full
/// circle.
pub fn stage2_geometric<M: NoisePredictor + ?Sized>(
    model: &M,
    ctx: &SceneContext,
    prompt: &str,
    tokens: &mut TokenSet,
    cfg: &StageConfig,
    opts: &Stage2Options,
) -> Result<TrainReport> {
    cfg.validate()?;
    if opts.curriculum == 0 {
        return Err(Error::Config("stage II curriculum must not be empty".into()));
    }
    let started = Instant::now();
    let (w, h) = (ctx.width(), ctx.height());
    let geo = tokens.vocab().geo();
    tokens.set_trainable_only(&[geo]);
    let spec = PromptSpec::new(prompt, false, true);

    let pairs = sweep_sequence(&ctx.reference, cfg.schedule.azimuth_step)?;
    let mut views = Vec::with_capacity(pairs.len());
    for (a, _) in &pairs {
        let v = ctx.view(a)?;
        let d = ctx.depth(&v);
        views.push((v, d));
    }
    let n = views.len();
    let mut any_overlap = false;
    for k in 0..n {
        let (vi, di) = &views[k];
        let (vj, dj) = &views[(k + 1) % n];
        let (_, m) = warp_backward(&ctx.reference_image, di, dj, vi, vj, DEFAULT_OCCLUSION_TOL)?;
        any_overlap |= !m.is_empty();
    }
    if !any_overlap {
        return Err(Error::EmptyMasks(format!(
            "no adjacent view pair overlaps at an azimuth step of {} degrees",
            cfg.schedule.azimuth_step
        )));
    }

    let warp_samples = curriculum(cfg.seed, "stage2/warp", opts.curriculum, w, h);
    let rec_samples = curriculum(cfg.seed, "stage2/rec", opts.curriculum, w, h);
    // Both loss terms over the fixed curriculum; the warp term follows the
    // same chained sweep as training, starting from the reference.
    let evaluate = |tokens: &TokenSet| -> Result<(f64, f64)> {
        let mut warp = 0.0;
        let mut source = ctx.reference_image.clone();
        for k in 0..n {
            let (vi, di) = &views[k];
            let (vj, dj) = &views[(k + 1) % n];
            let ws = warp_loss_step(
                model,
                &source,
                vi,
                vj,
                di,
                dj,
                tokens,
                &spec,
                &warp_samples[k % opts.curriculum],
                opts.mode,
            )?;
            warp += ws.loss.loss;
            source = chain_source(&ws);
        }
        let mut rec = 0.0;
        for s in &rec_samples {
            rec += rec_loss_step(model, &ctx.reference_image, &ctx.reference_depth, tokens, &spec, s)?.loss;
        }
        Ok((warp / n as f64, rec / opts.curriculum as f64))
    };
    let mut report = TrainReport::new("stage2");
    let (warp0, rec0) = evaluate(tokens)?;
    report.probe_initial = warp0 + rec0;
    report.note("warp_initial", format!("{warp0:e}"));
    report.note("rec_initial", format!("{rec0:e}"));
    if cfg.steps == 0 {
        report.probe_final = report.probe_initial;
        report.wall_time = started.elapsed();
        return Ok(report);
    }

    let mut adam = Adam::new(tokens.dim(), cfg.lr);
    let mut source = ctx.reference_image.clone();
    let mut pos = 0;
    for step in 0..cfg.steps {
        let round = step / 2;
        let mut loss = 0.0;
        let mut grad = vec![0.0; tokens.dim()];
        for b in 0..cfg.batch {
            let idx = (round * cfg.batch + b) % opts.curriculum;
            let term = if step % 2 == 0 {
                let (vi, di) = &views[pos];
                let (vj, dj) = &views[(pos + 1) % n];
                let ws = warp_loss_step(
                    model,
                    &source,
                    vi,
                    vj,
                    di,
                    dj,
                    tokens,
                    &spec,
                    &warp_samples[idx],
                    opts.mode,
                )?;
                pos += 1;
                source = if pos == n {
                    pos = 0;
                    ctx.reference_image.clone()
                } else {
                    chain_source(&ws)
                };
                ws.loss
            } else {
                rec_loss_step(
                    model,
                    &ctx.reference_image,
                    &ctx.reference_depth,
                    tokens,
                    &spec,
                    &rec_samples[idx],
                )?
            };
            loss += term.loss;
            for (a, g) in grad.iter_mut().zip(&term.grad) {
                *a += g;
            }
        }
        let inv = 1.0 / cfg.batch as f64;
        loss *= inv;
        grad.iter_mut().for_each(|g| *g *= inv);
        check_finite(loss, step, "stage II loss")?;
        report.losses.push(loss);
        adam_row_step(
            tokens,
            geo,
            &mut adam,
            &grad,
            cosine_lr_scale(step, cfg.steps, cfg.lr_floor),
        )?;
    }
    let (warp1, rec1) = evaluate(tokens)?;
    report.probe_final = warp1 + rec1;
    report.note("warp_final", format!("{warp1:e}"));
    report.note("rec_final", format!("{rec1:e}"));
    report.wall_time = started.elapsed();
    Ok(report)
}
