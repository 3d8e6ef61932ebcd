//! A small depth-conditioned convolutional noise predictor with FiLM
//! conditioning and a hand-written backward pass.
//!
//! Input is the noisy RGB image stacked with a normalized depth channel.
//! Three hidden 3×3 conv layers apply `silu(conv(h) · (1 + scale) + shift)`,
//! where every layer's per-channel scale and shift come from one affine map
//! of `[prompt embedding ; sinusoidal time embedding]`. A final 3×3 conv,
//! zero-initialized, predicts the noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::conv::{conv3x3, conv3x3_input_grad, conv3x3_param_grad};
use super::{Condition, GradRequest, NoisePredictor, PredictorGrads};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::raster::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserArch {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub hidden_layers: usize,
    pub embed_dim: usize,
    pub time_dim: usize,
}

impl DenoiserArch {
    pub fn new(width: usize, height: usize, channels: usize, embed_dim: usize) -> Self {
        Self {
            width,
            height,
            channels,
            hidden_layers: 3,
            embed_dim,
            time_dim: 16,
        }
    }

    pub fn cond_dim(&self) -> usize {
        self.embed_dim + self.time_dim
    }

    pub fn film_dim(&self) -> usize {
        self.hidden_layers * 2 * self.channels
    }

    fn layer_io(&self, l: usize) -> (usize, usize) {
        let cin = if l == 0 { 4 } else { self.channels };
        let cout = if l == self.hidden_layers { 3 } else { self.channels };
        (cin, cout)
    }
}

/// Named slices of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    segments: Vec<(String, Vec<usize>, usize)>,
    len: usize,
}

impl ParamLayout {
    fn new(arch: &DenoiserArch) -> Self {
        let mut segments = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            segments.push((name, shape, offset));
            offset += n;
        };
        for l in 0..=arch.hidden_layers {
            let (cin, cout) = arch.layer_io(l);
            push(format!("conv{l}.weight"), vec![cout, cin, 3, 3]);
            push(format!("conv{l}.bias"), vec![cout]);
        }
        push("film.weight".into(), vec![arch.film_dim(), arch.cond_dim()]);
        push("film.bias".into(), vec![arch.film_dim()]);
        push("null_embedding".into(), vec![arch.embed_dim]);
        Self { segments, len: offset }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn range(&self, name: &str) -> std::ops::Range<usize> {
        let (_, shape, off) = self
            .segments
            .iter()
            .find(|(n, _, _)| n == name)
            .unwrap_or_else(|| panic!("no parameter segment `{name}`"));
        *off..*off + shape.iter().product::<usize>()
    }

    pub fn segments(&self) -> impl Iterator<Item = (&str, &[usize], std::ops::Range<usize>)> {
        self.segments
            .iter()
            .map(|(n, s, o)| (n.as_str(), s.as_slice(), *o..*o + s.iter().product::<usize>()))
    }
}

/// Rank-`r` additive update `B·A` of the FiLM weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    /// `rank × cond_dim`
    pub a: Vec<f64>,
    /// `film_dim × rank`, zero at initialization.
    pub b: Vec<f64>,
}

impl LoraAdapter {
    pub fn new<R: Rng + ?Sized>(arch: &DenoiserArch, rank: usize, rng: &mut R) -> Self {
        let std = 1.0 / (arch.cond_dim() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid normal");
        Self {
            rank,
            a: (0..rank * arch.cond_dim()).map(|_| normal.sample(rng)).collect(),
            b: vec![0.0; arch.film_dim() * rank],
        }
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    arch: DenoiserArch,
    layout: ParamLayout,
    pub params: Vec<f64>,
    pub adapter: Option<LoraAdapter>,
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Sinusoidal embedding of `t ∈ [0, 1]` (scaled to a 0..1000 step index).
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let a = 1000.0 * t * freq;
        out.push(a.sin());
        out.push(a.cos());
    }
    out.resize(dim, 0.0);
    out
}

/// Activations kept for the backward pass.
pub struct Tape {
    input: Vec<f64>,
    cond_vec: Vec<f64>,
    film: Vec<f64>,
    /// Pre-FiLM conv outputs per hidden layer.
    pre: Vec<Vec<f64>>,
    /// Post-FiLM pre-activation values per hidden layer.
    modulated: Vec<Vec<f64>>,
    /// Hidden activations per layer.
    hidden: Vec<Vec<f64>>,
    null: bool,
}

impl ToyDenoiser {
    /// Fresh model: He-style conv init, near-identity FiLM, zero output layer.
    pub fn new<R: Rng + ?Sized>(arch: DenoiserArch, rng: &mut R) -> Self {
        let layout = ParamLayout::new(&arch);
        let mut params = vec![0.0; layout.len()];
        for l in 0..arch.hidden_layers {
            let (cin, _) = arch.layer_io(l);
            let normal = Normal::new(0.0, (2.0 / (9 * cin) as f64).sqrt()).expect("valid normal");
            for v in &mut params[layout.range(&format!("conv{l}.weight"))] {
                *v = normal.sample(rng);
            }
        }
        let film = Normal::new(0.0, 0.02).expect("valid normal");
        for v in &mut params[layout.range("film.weight")] {
            *v = film.sample(rng);
        }
        let null = Normal::new(0.0, 0.1).expect("valid normal");
        for v in &mut params[layout.range("null_embedding")] {
            *v = null.sample(rng);
        }
        Self {
            arch,
            layout,
            params,
            adapter: None,
        }
    }

    pub fn arch(&self) -> &DenoiserArch {
        &self.arch
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param(&self, name: &str) -> &[f64] {
        &self.params[self.layout.range(name)]
    }

    pub fn null_embedding(&self) -> &[f64] {
        self.param("null_embedding")
    }

    /// Folds the adapter into the FiLM weight and drops it.
    pub fn merge_adapter(&mut self) {
        let Some(ad) = self.adapter.take() else {
            return;
        };
        let (rows, cols) = (self.arch.film_dim(), self.arch.cond_dim());
        let range = self.layout.range("film.weight");
        let w = &mut self.params[range];
        for i in 0..rows {
            for j in 0..cols {
                let mut acc = 0.0;
                for r in 0..ad.rank {
                    acc += ad.b[i * ad.rank + r] * ad.a[r * cols + j];
                }
                w[i * cols + j] += acc;
            }
        }
    }

    fn film_weight_effective(&self) -> std::borrow::Cow<'_, [f64]> {
        let base = self.param("film.weight");
        match &self.adapter {
            None => std::borrow::Cow::Borrowed(base),
            Some(ad) => {
                let cols = self.arch.cond_dim();
                let mut w = base.to_vec();
                for (i, row) in w.chunks_exact_mut(cols).enumerate() {
                    for r in 0..ad.rank {
                        let b = ad.b[i * ad.rank + r];
                        if b == 0.0 {
                            continue;
                        }
                        for (v, a) in row.iter_mut().zip(&ad.a[r * cols..(r + 1) * cols]) {
                            *v += b * a;
                        }
                    }
                }
                std::borrow::Cow::Owned(w)
            }
        }
    }

    fn check_inputs(&self, x_t: &Image, cond: &Condition) -> Result<()> {
        let a = &self.arch;
        x_t.check_shape(a.width, a.height)?;
        if cond.depth.len() != a.width * a.height {
            return Err(Error::shape(a.width * a.height, cond.depth.len()));
        }
        if !cond.null && cond.embedding.len() != a.embed_dim {
            return Err(Error::shape(a.embed_dim, cond.embedding.len()));
        }
        if !x_t.is_finite() {
            return Err(Error::NonFinite("denoiser input image".into()));
        }
        if !cond.depth.iter().all(|v| v.is_finite()) || !cond.embedding.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("denoiser condition".into()));
        }
        Ok(())
    }

    pub fn forward_tape(&self, x_t: &Image, t: f64, cond: &Condition) -> Result<(Image, Tape)> {
        self.check_inputs(x_t, cond)?;
        let a = self.arch;
        let (h, w) = (a.height, a.width);
        let plane = h * w;

        let mut input = vec![0.0; 4 * plane];
        for (i, px) in x_t.data().chunks_exact(3).enumerate() {
            for c in 0..3 {
                input[c * plane + i] = px[c];
            }
            if !cond.null {
                input[3 * plane + i] = cond.depth[i];
            }
        }

        let mut cond_vec = if cond.null {
            self.null_embedding().to_vec()
        } else {
            cond.embedding.clone()
        };
        cond_vec.extend(time_embedding(t, a.time_dim));
        let film_w = self.film_weight_effective();
        let film_b = self.param("film.bias");
        let cd = a.cond_dim();
        let film: Vec<f64> = (0..a.film_dim())
            .map(|i| {
                film_b[i]
                    + film_w[i * cd..(i + 1) * cd]
                        .iter()
                        .zip(&cond_vec)
                        .map(|(p, q)| p * q)
                        .sum::<f64>()
            })
            .collect();

        let mut pre = Vec::with_capacity(a.hidden_layers);
        let mut modulated = Vec::with_capacity(a.hidden_layers);
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(a.hidden_layers);
        for l in 0..a.hidden_layers {
            let (cin, cout) = a.layer_io(l);
            let src = if l == 0 { &input } else { &hidden[l - 1] };
            let z = conv3x3(
                src,
                self.param(&format!("conv{l}.weight")),
                self.param(&format!("conv{l}.bias")),
                cin,
                cout,
                h,
                w,
            );
            let mut u = z.clone();
            for c in 0..cout {
                let scale = 1.0 + film[l * 2 * cout + c];
                let shift = film[l * 2 * cout + cout + c];
                for v in &mut u[c * plane..(c + 1) * plane] {
                    *v = *v * scale + shift;
                }
            }
            let act: Vec<f64> = u.iter().map(|&v| silu(v)).collect();
            pre.push(z);
            modulated.push(u);
            hidden.push(act);
        }
        let l = a.hidden_layers;
        let (cin, cout) = a.layer_io(l);
        let out = conv3x3(
            &hidden[l - 1],
            self.param(&format!("conv{l}.weight")),
            self.param(&format!("conv{l}.bias")),
            cin,
            cout,
            h,
            w,
        );
        let mut data = vec![0.0; plane * 3];
        for i in 0..plane {
            for c in 0..3 {
                data[i * 3 + c] = out[c * plane + i];
            }
        }
        let tape = Tape {
            input,
            cond_vec,
            film,
            pre,
            modulated,
            hidden,
            null: cond.null,
        };
        Ok((Image::from_vec(w, h, data)?, tape))
    }

    /// Backpropagates `grad_out` (pixel-interleaved, same shape as the
    /// prediction) through a recorded forward pass.
    pub fn backward(&self, tape: &Tape, grad_out: &[f64], request: GradRequest) -> PredictorGrads {
        let a = self.arch;
        let (h, w) = (a.height, a.width);
        let plane = h * w;
        let mut gparams = request.params.then(|| vec![0.0; self.layout.len()]);

        let mut g = vec![0.0; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                g[c * plane + i] = grad_out[i * 3 + c];
            }
        }
        let mut dfilm = vec![0.0; a.film_dim()];
        for l in (0..=a.hidden_layers).rev() {
            let (cin, cout) = a.layer_io(l);
            // g holds d/d(conv output) of layer l
            let src = if l == 0 { &tape.input } else { &tape.hidden[l - 1] };
            if let Some(gp) = gparams.as_mut() {
                let wr = self.layout.range(&format!("conv{l}.weight"));
                let br = self.layout.range(&format!("conv{l}.bias"));
                let (lo, hi) = gp.split_at_mut(br.start);
                conv3x3_param_grad(src, &g, cin, cout, h, w, &mut lo[wr], &mut hi[..br.len()]);
            }
            if l == 0 {
                break;
            }
            let mut gh = conv3x3_input_grad(&g, self.param(&format!("conv{l}.weight")), cin, cout, h, w);
            // through silu and FiLM of hidden layer l-1
            let hl = l - 1;
            let c_hidden = a.channels;
            for c in 0..c_hidden {
                let scale_idx = hl * 2 * c_hidden + c;
                let shift_idx = scale_idx + c_hidden;
                let scale = 1.0 + tape.film[scale_idx];
                let (mut ds, mut db) = (0.0, 0.0);
                let range = c * plane..(c + 1) * plane;
                for ((gv, u), z) in gh[range.clone()]
                    .iter_mut()
                    .zip(&tape.modulated[hl][range.clone()])
                    .zip(&tape.pre[hl][range])
                {
                    let du = *gv * silu_grad(*u);
                    ds += du * z;
                    db += du;
                    *gv = du * scale;
                }
                dfilm[scale_idx] = ds;
                dfilm[shift_idx] = db;
            }
            g = gh;
        }

        let cd = a.cond_dim();
        let film_w = self.film_weight_effective();
        let mut dcond = vec![0.0; cd];
        for (i, df) in dfilm.iter().enumerate() {
            if *df == 0.0 {
                continue;
            }
            for (d, wv) in dcond.iter_mut().zip(&film_w[i * cd..(i + 1) * cd]) {
                *d += df * wv;
            }
        }
        if let Some(gp) = gparams.as_mut() {
            let wr = self.layout.range("film.weight");
            for (i, df) in dfilm.iter().enumerate() {
                for (j, cv) in tape.cond_vec.iter().enumerate() {
                    gp[wr.start + i * cd + j] += df * cv;
                }
            }
            let br = self.layout.range("film.bias");
            for (slot, df) in gp[br].iter_mut().zip(&dfilm) {
                *slot += df;
            }
            if tape.null {
                let nr = self.layout.range("null_embedding");
                for (slot, d) in gp[nr].iter_mut().zip(&dcond[..a.embed_dim]) {
                    *slot += d;
                }
            }
        }
        let adapter = match (&self.adapter, request.adapter) {
            (Some(ad), true) => {
                // dW = dfilm ⊗ cond_vec; dB = dW·Aᵀ, dA = Bᵀ·dW
                let mut ga = vec![0.0; ad.a.len()];
                let mut gb = vec![0.0; ad.b.len()];
                let mut a_dot_c = vec![0.0; ad.rank];
                for (r, slot) in a_dot_c.iter_mut().enumerate() {
                    *slot = ad.a[r * cd..(r + 1) * cd]
                        .iter()
                        .zip(&tape.cond_vec)
                        .map(|(p, q)| p * q)
                        .sum();
                }
                for (i, df) in dfilm.iter().enumerate() {
                    for r in 0..ad.rank {
                        gb[i * ad.rank + r] += df * a_dot_c[r];
                    }
                }
                for r in 0..ad.rank {
                    let bt_df: f64 = (0..a.film_dim()).map(|i| ad.b[i * ad.rank + r] * dfilm[i]).sum();
                    for (j, cv) in tape.cond_vec.iter().enumerate() {
                        ga[r * cd + j] += bt_df * cv;
                    }
                }
                Some((ga, gb))
            }
            _ => None,
        };
        let embedding = (request.embedding && !tape.null).then(|| dcond[..a.embed_dim].to_vec());
        PredictorGrads {
            params: gparams,
            adapter,
            embedding,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let a = self.arch;
        let mut ck = Checkpoint::new("denoiser");
        ck.set_meta("width", a.width.to_string());
        ck.set_meta("height", a.height.to_string());
        ck.set_meta("channels", a.channels.to_string());
        ck.set_meta("hidden_layers", a.hidden_layers.to_string());
        ck.set_meta("embed_dim", a.embed_dim.to_string());
        ck.set_meta("time_dim", a.time_dim.to_string());
        let names: Vec<&str> = self.layout.segments().map(|(n, _, _)| n).collect();
        ck.set_meta("layers", names.join(" "));
        for (name, shape, range) in self.layout.segments() {
            ck.push_tensor(name, shape.to_vec(), self.params[range].to_vec());
        }
        if let Some(ad) = &self.adapter {
            ck.set_meta("lora_rank", ad.rank.to_string());
            ck.push_tensor("lora.a", vec![ad.rank, a.cond_dim()], ad.a.clone());
            ck.push_tensor("lora.b", vec![a.film_dim(), ad.rank], ad.b.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("denoiser")?;
        let arch = DenoiserArch {
            width: ck.meta_parse("width")?,
            height: ck.meta_parse("height")?,
            channels: ck.meta_parse("channels")?,
            hidden_layers: ck.meta_parse("hidden_layers")?,
            embed_dim: ck.meta_parse("embed_dim")?,
            time_dim: ck.meta_parse("time_dim")?,
        };
        if arch.hidden_layers == 0 {
            return Err(Error::Checkpoint("denoiser needs at least one hidden layer".into()));
        }
        let layout = ParamLayout::new(&arch);
        let mut params = vec![0.0; layout.len()];
        for (name, _, range) in layout.segments() {
            let values = ck.tensor(name)?;
            if values.len() != range.len() {
                return Err(Error::Checkpoint(format!("tensor `{name}` has the wrong size")));
            }
            params[range].copy_from_slice(values);
        }
        let adapter = match ck.meta("lora_rank") {
            Ok(rank) => {
                let rank: usize = rank.parse().map_err(|_| Error::Checkpoint("bad lora_rank".into()))?;
                Some(LoraAdapter {
                    rank,
                    a: ck.tensor("lora.a")?.to_vec(),
                    b: ck.tensor("lora.b")?.to_vec(),
                })
            }
            Err(_) => None,
        };
        Ok(Self {
            arch,
            layout,
            params,
            adapter,
        })
    }
}

impl NoisePredictor for ToyDenoiser {
    fn predict(&self, x_t: &Image, t: f64, cond: &Condition) -> Result<Image> {
        self.forward_tape(x_t, t, cond).map(|(img, _)| img)
    }

    fn predict_with_grads(
        &self,
        x_t: &Image,
        t: f64,
        cond: &Condition,
        request: GradRequest,
        loss_grad: &mut dyn FnMut(&Image) -> Vec<f64>,
    ) -> Result<(Image, PredictorGrads)> {
        let (out, tape) = self.forward_tape(x_t, t, cond)?;
        let g = loss_grad(&out);
        if g.len() != out.data().len() {
            return Err(Error::shape(out.data().len(), g.len()));
        }
        let grads = self.backward(&tape, &g, request);
        Ok((out, grads))
    }
}
