//! Noise schedule, noise predictors and classifier-free guidance.
//!
//! Everything operates in pixel space on [`Image`]s with values nominally in
//! `[0, 1]`. Time `t ∈ [0, 1]` runs from data (`t = 0`) to noise (`t = 1`).

mod conv;
mod denoiser;

use rand::Rng;
use rand_distr::StandardNormal;

pub use denoiser::{time_embedding, DenoiserArch, LoraAdapter, ParamLayout, Tape, ToyDenoiser};

use crate::error::{Error, Result};
use crate::raster::{DepthMap, Image, WarpMask};
use crate::warp::{masked_mse_grad, masked_mse_slices};

/// Depth range mapped onto the `[0, 1]` conditioning channel.
pub const DEPTH_NEAR: f64 = 1.0;
pub const DEPTH_FAR: f64 = 4.0;

/// Variance-preserving cosine schedule: `α = cos(πt/2)`, `σ = sin(πt/2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            t_min: 0.02,
            t_max: 0.98,
        }
    }
}

impl NoiseSchedule {
    pub fn alpha(&self, t: f64) -> f64 {
        (std::f64::consts::FRAC_PI_2 * t).cos()
    }

    pub fn sigma(&self, t: f64) -> f64 {
        (std::f64::consts::FRAC_PI_2 * t).sin()
    }

    /// `t ~ U(t_min, t_max)`.
    pub fn sample_t<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        rng.gen_range(self.t_min..self.t_max)
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// `α(t)·x0 + σ(t)·eps`.
pub fn add_noise(x0: &Image, t: f64, eps: &Image) -> Result<Image> {
    check_time(t)?;
    if !x0.same_shape(eps) {
        return Err(Error::shape(
            format!("{}x{}", x0.width(), x0.height()),
            format!("{}x{}", eps.width(), eps.height()),
        ));
    }
    let s = NoiseSchedule::default();
    let (a, sg) = (s.alpha(t), s.sigma(t));
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + sg * e).collect();
    Image::from_vec(x0.width(), x0.height(), data)
}

/// Per-timestep loss weight `w(t) = σ(t)²`. Distinct from the guidance scale.
pub fn sds_weight(t: f64) -> f64 {
    let s = NoiseSchedule::default().sigma(t);
    s * s
}

/// Standard-normal noise image.
pub fn sample_noise<R: Rng + ?Sized>(width: usize, height: usize, rng: &mut R) -> Image {
    let data = (0..width * height * 3).map(|_| rng.sample(StandardNormal)).collect();
    Image::from_vec(width, height, data).expect("sized by construction")
}

/// Conditioning for one denoiser evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub embedding: Vec<f64>,
    /// Normalized depth, row-major `H × W`, invalid pixels 0.
    pub depth: Vec<f64>,
    /// Unconditional branch: embedding and depth are ignored.
    pub null: bool,
}

impl Condition {
    pub fn new(embedding: Vec<f64>, depth: &DepthMap) -> Self {
        Self {
            embedding,
            depth: depth.normalized(DEPTH_NEAR, DEPTH_FAR),
            null: false,
        }
    }

    /// Prompt-only condition with the depth channel zeroed.
    pub fn without_depth(embedding: Vec<f64>, width: usize, height: usize) -> Self {
        Self {
            embedding,
            depth: vec![0.0; width * height],
            null: false,
        }
    }

    /// The unconditional counterpart of `self`.
    pub fn to_null(&self) -> Self {
        Self {
            embedding: self.embedding.clone(),
            depth: vec![0.0; self.depth.len()],
            null: true,
        }
    }
}

/// Which gradients a backward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GradRequest {
    pub params: bool,
    pub adapter: bool,
    pub embedding: bool,
}

impl GradRequest {
    pub fn all() -> Self {
        Self {
            params: true,
            adapter: true,
            embedding: true,
        }
    }

    pub fn params_only() -> Self {
        Self {
            params: true,
            ..Self::default()
        }
    }

    pub fn adapter_only() -> Self {
        Self {
            adapter: true,
            ..Self::default()
        }
    }

    pub fn embedding_only() -> Self {
        Self {
            embedding: true,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictorGrads {
    pub params: Option<Vec<f64>>,
    /// `(dA, dB)` for the low-rank adapter.
    pub adapter: Option<(Vec<f64>, Vec<f64>)>,
    pub embedding: Option<Vec<f64>>,
}

/// An ε-prediction model.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Image, t: f64, cond: &Condition) -> Result<Image>;

    /// Predicts, asks `loss_grad` for `dL/dε̂`, and backpropagates it.
    /// Models without trainable state return empty gradients.
    fn predict_with_grads(
        &self,
        x_t: &Image,
        t: f64,
        cond: &Condition,
        _request: GradRequest,
        loss_grad: &mut dyn FnMut(&Image) -> Vec<f64>,
    ) -> Result<(Image, PredictorGrads)> {
        let out = self.predict(x_t, t, cond)?;
        loss_grad(&out);
        Ok((out, PredictorGrads::default()))
    }
}

/// `(1 − s)·ε_u + s·ε_c`, i.e. `ε_u + s·(ε_c − ε_u)`, written so that
/// `s = 0` and `s = 1` return the branch predictions exactly.
pub fn cfg_combine(eps_c: &Image, eps_u: &Image, s: f64) -> Result<Image> {
    if !(s >= 0.0) {
        return Err(Error::InvalidArgument(format!("guidance scale {s} must be >= 0")));
    }
    let data = eps_c
        .data()
        .iter()
        .zip(eps_u.data())
        .map(|(c, u)| (1.0 - s) * u + s * c)
        .collect();
    Image::from_vec(eps_c.width(), eps_c.height(), data)
}

pub fn cfg_predict<M: NoisePredictor + ?Sized>(
    model: &M,
    x_t: &Image,
    t: f64,
    cond: &Condition,
    s: f64,
) -> Result<Image> {
    if !(s >= 0.0) {
        return Err(Error::InvalidArgument(format!("guidance scale {s} must be >= 0")));
    }
    if s == 1.0 {
        return model.predict(x_t, t, cond);
    }
    let eps_u = model.predict(x_t, t, &cond.to_null())?;
    if s == 0.0 {
        return Ok(eps_u);
    }
    let eps_c = model.predict(x_t, t, cond)?;
    cfg_combine(&eps_c, &eps_u, s)
}

/// Closed-form optimal denoiser for `x0 ~ N(μ, s0²·I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticGaussianDenoiser {
    pub mean: Image,
    pub s0: f64,
}

impl AnalyticGaussianDenoiser {
    pub fn new(mean: Image, s0: f64) -> Result<Self> {
        if !(s0 > 0.0) {
            return Err(Error::InvalidArgument(format!("data stddev {s0} must be > 0")));
        }
        if mean.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("mean image must lie in [0, 1]".into()));
        }
        Ok(Self { mean, s0 })
    }

    /// Posterior-mean noise `E[ε | x_t]`.
    pub fn analytic_noise(&self, x_t: &Image, t: f64) -> Result<Image> {
        check_time(t)?;
        if t == 0.0 {
            return Err(Error::InvalidArgument("analytic noise is undefined at t = 0".into()));
        }
        x_t.check_shape(self.mean.width(), self.mean.height())?;
        let sched = NoiseSchedule::default();
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        let v0 = self.s0 * self.s0;
        let denom = a * a * v0 + s * s;
        let data = x_t
            .data()
            .iter()
            .zip(self.mean.data())
            .map(|(&x, &mu)| {
                let x0 = (a * v0 * x + s * s * mu) / denom;
                (x - a * x0) / s
            })
            .collect();
        Image::from_vec(x_t.width(), x_t.height(), data)
    }
}

impl NoisePredictor for AnalyticGaussianDenoiser {
    fn predict(&self, x_t: &Image, t: f64, _cond: &Condition) -> Result<Image> {
        self.analytic_noise(x_t, t)
    }
}

/// A fixed `(t, ε)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSample {
    pub t: f64,
    pub eps: Image,
}

impl NoiseSample {
    pub fn draw<R: Rng + ?Sized>(schedule: &NoiseSchedule, width: usize, height: usize, rng: &mut R) -> Self {
        let t = schedule.sample_t(rng);
        Self {
            t,
            eps: sample_noise(width, height, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: PredictorGrads,
}

/// `w(t)·MSE(ε̂(α x0 + σ ε), ε)` over `mask` (all pixels when `None`) for a
/// given noise sample, with the requested gradients.
pub fn denoising_loss_at<M: NoisePredictor + ?Sized>(
    model: &M,
    x0: &Image,
    cond: &Condition,
    mask: Option<&WarpMask>,
    sample: &NoiseSample,
    request: GradRequest,
) -> Result<LossOutput> {
    let x_t = add_noise(x0, sample.t, &sample.eps)?;
    let full;
    let mask = match mask {
        Some(m) => m,
        None => {
            full = WarpMask::new(x0.width(), x0.height(), true);
            &full
        }
    };
    let w = sds_weight(sample.t);
    let mut loss = 0.0;
    let eps = sample.eps.data();
    let (_, grads) = model.predict_with_grads(&x_t, sample.t, cond, request, &mut |pred| {
        loss = w * masked_mse_slices(pred.data(), eps, mask).value;
        let mut g = masked_mse_grad(pred.data(), eps, mask);
        for v in &mut g {
            *v *= w;
        }
        g
    })?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("denoising loss".into()));
    }
    Ok(LossOutput { loss, grads })
}

/// [`denoising_loss_at`] with `t ~ U(t_min, t_max)` and `ε ~ N(0, I)` drawn from `rng`.
pub fn denoising_loss<M: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x0: &Image,
    cond: &Condition,
    mask: Option<&WarpMask>,
    request: GradRequest,
    rng: &mut R,
) -> Result<LossOutput> {
    let sample = NoiseSample::draw(&NoiseSchedule::default(), x0.width(), x0.height(), rng);
    denoising_loss_at(model, x0, cond, mask, &sample, request)
}
