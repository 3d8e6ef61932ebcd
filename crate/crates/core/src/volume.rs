//! Voxel volume and its emission-absorption renderer with an exact
//! vector-Jacobian product.
//!
//! Density and color live on the grid nodes as unconstrained raw values;
//! `softplus` maps density to `σ ≥ 0` and a sigmoid maps color to `[0, 1]`.
//! Activated node values are trilinearly interpolated along each ray.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::geometry::{Vec3, View};
use crate::raster::{DepthMap, Image};

/// Divisor floor for expected-depth normalization.
pub const EPS_DIV: f64 = 1e-8;

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl Bounds {
    pub fn cube(half: f64) -> Self {
        Self {
            min: Vec3::repeat(-half),
            max: Vec3::repeat(half),
        }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        if (0..3).all(|i| self.max[i] > self.min[i] && self.min[i].is_finite() && self.max[i].is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("degenerate bounds {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    resolution: usize,
    bounds: Bounds,
    /// `R³` raw densities, x fastest.
    pub density_raw: Vec<f64>,
    /// `R³ × 3` raw colors.
    pub color_raw: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridInit {
    UniformFog,
    GaussianBlob,
}

impl VoxelGrid {
    pub fn new(resolution: usize, bounds: Bounds, density_raw: Vec<f64>, color_raw: Vec<f64>) -> Result<Self> {
        let grid = Self {
            resolution,
            bounds,
            density_raw,
            color_raw,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(Error::InvalidArgument(format!(
                "grid resolution must be at least 2, got {}",
                self.resolution
            )));
        }
        self.bounds.validate()?;
        let n = self.voxel_count();
        if self.density_raw.len() != n || self.color_raw.len() != 3 * n {
            return Err(Error::shape(
                format!("{n} densities and {} colors", 3 * n),
                format!("{} and {}", self.density_raw.len(), self.color_raw.len()),
            ));
        }
        if !self.density_raw.iter().chain(&self.color_raw).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("voxel grid".into()));
        }
        Ok(())
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn bounds(&self) -> Bounds {
        self.bounds
    }

    pub fn voxel_count(&self) -> usize {
        self.resolution.pow(3)
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.resolution + y) * self.resolution + x
    }

    /// World position of grid node `(x, y, z)`.
    pub fn node_position(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let step = (self.bounds.max - self.bounds.min) / (self.resolution - 1) as f64;
        self.bounds.min + Vec3::new(x as f64 * step.x, y as f64 * step.y, z as f64 * step.z)
    }

    pub fn density(&self, i: usize) -> f64 {
        softplus(self.density_raw[i])
    }

    pub fn color(&self, i: usize) -> [f64; 3] {
        let c = &self.color_raw[3 * i..3 * i + 3];
        [sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])]
    }

    /// Sets a node from activated values (density ≥ 0, color in (0, 1)).
    pub fn set_node(&mut self, i: usize, density: f64, color: [f64; 3]) {
        self.density_raw[i] = softplus_inv(density.max(1e-12));
        for k in 0..3 {
            let c = color[k].clamp(1e-6, 1.0 - 1e-6);
            self.color_raw[3 * i + k] = (c / (1.0 - c)).ln();
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let r = self.resolution;
        let b = self.bounds;
        let mut ck = Checkpoint::new("voxel_grid");
        ck.set_meta("resolution", r.to_string());
        ck.set_meta(
            "bounds",
            format!(
                "{:?} {:?} {:?} {:?} {:?} {:?}",
                b.min.x, b.min.y, b.min.z, b.max.x, b.max.y, b.max.z
            ),
        );
        ck.set_meta("activations", "softplus sigmoid");
        ck.push_tensor("density_raw", vec![r, r, r], self.density_raw.clone());
        ck.push_tensor("color_raw", vec![r, r, r, 3], self.color_raw.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("voxel_grid")?;
        let resolution: usize = ck.meta_parse("resolution")?;
        let bounds: Vec<f64> = ck.meta_floats("bounds")?;
        if bounds.len() != 6 {
            return Err(Error::Checkpoint("bounds needs 6 numbers".into()));
        }
        if ck.meta("activations")? != "softplus sigmoid" {
            return Err(Error::Checkpoint("unsupported activations".into()));
        }
        let bounds = Bounds {
            min: Vec3::new(bounds[0], bounds[1], bounds[2]),
            max: Vec3::new(bounds[3], bounds[4], bounds[5]),
        };
        VoxelGrid::new(
            resolution,
            bounds,
            ck.tensor("density_raw")?.to_vec(),
            ck.tensor("color_raw")?.to_vec(),
        )
        .map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// Creates a grid. `UniformFog` gives `σ = 0.1` everywhere; `GaussianBlob`
/// concentrates density around the bounds center. Colors start near 0.5
/// with small seeded noise.
pub fn init_grid<R: Rng + ?Sized>(resolution: usize, bounds: Bounds, init: GridInit, rng: &mut R) -> Result<VoxelGrid> {
    bounds.validate()?;
    if resolution < 2 {
        return Err(Error::InvalidArgument("grid resolution must be at least 2".into()));
    }
    let n = resolution.pow(3);
    let noise = Normal::new(0.0, 0.1).expect("valid normal");
    let color_raw: Vec<f64> = (0..3 * n).map(|_| noise.sample(rng)).collect();
    let mut grid = VoxelGrid {
        resolution,
        bounds,
        density_raw: vec![0.0; n],
        color_raw,
    };
    let center = bounds.center();
    let extent = (bounds.max - bounds.min).min();
    for z in 0..resolution {
        for y in 0..resolution {
            for x in 0..resolution {
                let i = grid.index(x, y, z);
                let sigma = match init {
                    GridInit::UniformFog => 0.1,
                    GridInit::GaussianBlob => {
                        let s = 0.2 * extent;
                        let r2 = (grid.node_position(x, y, z) - center).norm_squared();
                        0.01 + 5.0 * (-r2 / (2.0 * s * s)).exp()
                    }
                };
                grid.density_raw[i] = softplus_inv(sigma);
            }
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub samples_per_ray: usize,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
    /// Seed for per-ray stratified offsets; `None` samples bin centers.
    pub jitter: Option<u64>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            samples_per_ray: 64,
            near: 1.0,
            far: 4.0,
            background: [1.0, 1.0, 1.0],
            jitter: None,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray < 2 || !(self.near < self.far) || self.near < 0.0 {
            return Err(Error::InvalidArgument(format!("invalid render config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub image: Image,
    pub opacity: Vec<f64>,
    pub expected_depth: DepthMap,
}

/// Trilinear footprint of one sample: 8 node indices and weights.
#[derive(Debug, Clone, Copy)]
struct Footprint {
    nodes: [usize; 8],
    weights: [f64; 8],
}

fn footprint(grid: &VoxelGrid, p: &Vec3) -> Option<Footprint> {
    let r = grid.resolution;
    let b = grid.bounds;
    let mut cell = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let g = (p[a] - b.min[a]) / (b.max[a] - b.min[a]) * (r - 1) as f64;
        if !(0.0..=(r - 1) as f64).contains(&g) {
            return None;
        }
        let i = (g.floor() as usize).min(r - 2);
        cell[a] = i;
        frac[a] = g - i as f64;
    }
    let mut nodes = [0; 8];
    let mut weights = [0.0; 8];
    for k in 0..8 {
        let (dx, dy, dz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
        nodes[k] = grid.index(cell[0] + dx, cell[1] + dy, cell[2] + dz);
        let w = |d: usize, f: f64| if d == 1 { f } else { 1.0 - f };
        weights[k] = w(dx, frac[0]) * w(dy, frac[1]) * w(dz, frac[2]);
    }
    Some(Footprint { nodes, weights })
}

/// Activated node values, computed once per render.
struct Activated {
    sigma: Vec<f64>,
    color: Vec<f64>,
}

impl Activated {
    fn new(grid: &VoxelGrid) -> Self {
        Self {
            sigma: grid.density_raw.iter().map(|&v| softplus(v)).collect(),
            color: grid.color_raw.iter().map(|&v| sigmoid(v)).collect(),
        }
    }
}

/// Per-sample quantities along one ray.
#[derive(Debug, Clone, Default)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub alpha: Vec<f64>,
    /// Transmittance before each sample.
    pub transmittance: Vec<f64>,
    pub t_final: f64,
    /// Physical segment length of each sample.
    pub delta: f64,
    footprints: Vec<Option<Footprint>>,
}

impl RaySamples {
    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.transmittance.iter().zip(&self.alpha).map(|(t, a)| t * a)
    }
}

fn jitter_offset(seed: u64, pixel: usize) -> f64 {
    // splitmix64 over (seed, pixel)
    let mut z = seed ^ (pixel as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn march(grid: &VoxelGrid, act: &Activated, view: &View, cfg: &RenderConfig, x: usize, y: usize) -> RaySamples {
    let (origin, dir) = view.ray(x as f64, y as f64);
    let n = cfg.samples_per_ray;
    let dt = (cfg.far - cfg.near) / n as f64;
    let offset = cfg.jitter.map_or(0.5, |seed| jitter_offset(seed, y * view.width() + x));
    let delta = dt * dir.norm();
    let mut s = RaySamples {
        delta,
        ..Default::default()
    };
    let mut trans = 1.0;
    for k in 0..n {
        let t = cfg.near + (k as f64 + offset) * dt;
        let fp = footprint(grid, &(origin + dir * t));
        let (mut sigma, mut color) = (0.0, [0.0; 3]);
        if let Some(fp) = &fp {
            for (node, w) in fp.nodes.iter().zip(fp.weights) {
                sigma += w * act.sigma[*node];
                for c in 0..3 {
                    color[c] += w * act.color[3 * node + c];
                }
            }
        }
        let alpha = 1.0 - (-sigma * delta).exp();
        s.t.push(t);
        s.sigma.push(sigma);
        s.color.push(color);
        s.alpha.push(alpha);
        s.transmittance.push(trans);
        s.footprints.push(fp);
        trans *= 1.0 - alpha;
    }
    s.t_final = trans;
    s
}

/// Samples along the ray through pixel `(x, y)`, exposed for inspection.
pub fn ray_samples(grid: &VoxelGrid, view: &View, cfg: &RenderConfig, x: usize, y: usize) -> RaySamples {
    march(grid, &Activated::new(grid), view, cfg, x, y)
}

/// Emission-absorption rendering of `grid` from `view`.
pub fn render(grid: &VoxelGrid, view: &View, cfg: &RenderConfig) -> RenderOutput {
    let (w, h) = (view.width(), view.height());
    let act = Activated::new(grid);
    let mut image = Image::zeros(w, h);
    let mut opacity = vec![0.0; w * h];
    let mut depth = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let s = march(grid, &act, view, cfg, x, y);
            let mut rgb = [0.0; 3];
            let mut td = 0.0;
            for (k, wk) in s.weights().enumerate() {
                for c in 0..3 {
                    rgb[c] += wk * s.color[k][c];
                }
                td += wk * s.t[k];
            }
            for c in 0..3 {
                rgb[c] += s.t_final * cfg.background[c];
            }
            let op = 1.0 - s.t_final;
            image.set_pixel(x, y, rgb);
            opacity[y * w + x] = op;
            depth[y * w + x] = td / op.max(EPS_DIV);
        }
    }
    RenderOutput {
        image,
        opacity,
        expected_depth: DepthMap::from_vec(w, h, depth).expect("dims match by construction"),
    }
}

/// Gradients with respect to the raw grid parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGradients {
    pub density_raw: Vec<f64>,
    pub color_raw: Vec<f64>,
}

/// Vector-Jacobian product of [`render`]'s image with `pixel_grad`
/// (pixel-interleaved `H × W × 3`).
pub fn render_vjp(grid: &VoxelGrid, view: &View, cfg: &RenderConfig, pixel_grad: &[f64]) -> Result<GridGradients> {
    let (w, h) = (view.width(), view.height());
    if pixel_grad.len() != w * h * 3 {
        return Err(Error::shape(w * h * 3, pixel_grad.len()));
    }
    if !pixel_grad.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("pixel gradient".into()));
    }
    let act = Activated::new(grid);
    let n = grid.voxel_count();
    let mut d_sigma = vec![0.0; n];
    let mut d_color = vec![0.0; 3 * n];
    for y in 0..h {
        for x in 0..w {
            let g = &pixel_grad[(y * w + x) * 3..(y * w + x) * 3 + 3];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let s = march(grid, &act, view, cfg, x, y);
            // suffix = g · (Σ_{j>k} w_j c_j + T_final · background)
            let mut suffix: f64 = (0..3).map(|c| g[c] * cfg.background[c]).sum::<f64>() * s.t_final;
            for k in (0..s.t.len()).rev() {
                let wk = s.transmittance[k] * s.alpha[k];
                let gc: f64 = (0..3).map(|c| g[c] * s.color[k][c]).sum();
                let t_next = s.transmittance[k] * (1.0 - s.alpha[k]);
                let dsig = s.delta * (t_next * gc - suffix);
                suffix += wk * gc;
                let Some(fp) = &s.footprints[k] else {
                    continue;
                };
                for (node, fw) in fp.nodes.iter().zip(fp.weights) {
                    d_sigma[*node] += fw * dsig;
                    for c in 0..3 {
                        d_color[3 * node + c] += fw * wk * g[c];
                    }
                }
            }
        }
    }
    // chain through the activations
    let density_raw = d_sigma
        .iter()
        .zip(&grid.density_raw)
        .map(|(d, raw)| d * sigmoid(*raw))
        .collect();
    let color_raw = d_color.iter().zip(&act.color).map(|(d, s)| d * s * (1.0 - s)).collect();
    Ok(GridGradients { density_raw, color_raw })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, OrbitSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_grid(r: usize, seed: u64) -> VoxelGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = r.pow(3);
        VoxelGrid::new(
            r,
            Bounds::cube(1.0),
            (0..n).map(|_| rng.gen_range(-1.0..2.0)).collect(),
            (0..3 * n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    fn view(px: usize, az: f64) -> View {
        OrbitSpec::new(2.5, 20.0, az)
            .unwrap()
            .view(Intrinsics::default_for(px, px))
            .unwrap()
    }

    fn small_cfg() -> RenderConfig {
        RenderConfig {
            samples_per_ray: 24,
            near: 1.2,
            far: 3.8,
            background: [0.2, 0.5, 0.9],
            jitter: None,
        }
    }

    #[test]
    fn empty_volume_shows_background() {
        let mut grid = random_grid(4, 0);
        grid.density_raw.fill(-200.0);
        let out = render(&grid, &view(8, 30.0), &small_cfg());
        for y in 0..8 {
            for x in 0..8 {
                let p = out.image.pixel(x, y);
                for c in 0..3 {
                    assert!((p[c] - small_cfg().background[c]).abs() < 1e-12);
                }
                assert!(out.opacity[y * 8 + x] < 1e-12);
            }
        }
    }

    fn slab_grid() -> VoxelGrid {
        // Dense slab in z ∈ [0.0, 0.5] (nodes 4..=5 of 9); empty elsewhere.
        let r = 9;
        let mut grid = VoxelGrid::new(r, Bounds::cube(1.0), vec![0.0; r * r * r], vec![0.0; 3 * r * r * r]).unwrap();
        for z in 0..r {
            for y in 0..r {
                for x in 0..r {
                    let i = grid.index(x, y, z);
                    let dense = (4..=6).contains(&z);
                    grid.set_node(i, if dense { 400.0 } else { 0.0 }, [0.8, 0.3, 0.1]);
                }
            }
        }
        grid
    }

    #[test]
    fn saturated_slab_shows_its_color() {
        let grid = slab_grid();
        let v = OrbitSpec::new(2.5, 0.0, 0.0)
            .unwrap()
            .view(Intrinsics::default_for(8, 8))
            .unwrap();
        let cfg = RenderConfig {
            samples_per_ray: 64,
            ..small_cfg()
        };
        let out = render(&grid, &v, &cfg);
        for y in 2..6 {
            for x in 2..6 {
                let p = out.image.pixel(x, y);
                for (c, want) in [0.8, 0.3, 0.1].iter().enumerate() {
                    assert!((p[c] - want).abs() < 1e-6, "{p:?}");
                }
                assert!(out.opacity[y * 8 + x] >= 1.0 - 1e-8);
            }
        }
    }

    #[test]
    fn occluded_voxels_get_no_gradient() {
        let grid = slab_grid();
        let v = OrbitSpec::new(2.5, 0.0, 0.0)
            .unwrap()
            .view(Intrinsics::default_for(8, 8))
            .unwrap();
        let cfg = RenderConfig {
            samples_per_ray: 64,
            ..small_cfg()
        };
        let pixel_grad: Vec<f64> = (0..8 * 8 * 3).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let g = render_vjp(&grid, &v, &cfg, &pixel_grad).unwrap();
        // the camera sits on +z, so nodes with z < 0 are behind the slab
        for z in 0..3 {
            for y in 0..9 {
                for x in 0..9 {
                    let i = grid.index(x, y, z);
                    assert!(g.density_raw[i].abs() < 1e-6);
                    for c in 0..3 {
                        assert!(g.color_raw[3 * i + c].abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn weights_partition_unity() {
        let cfg = RenderConfig {
            jitter: Some(4),
            ..small_cfg()
        };
        for seed in 0..4 {
            let grid = random_grid(5, seed);
            let v = view(5, 70.0 * seed as f64);
            for y in 0..5 {
                for x in 0..5 {
                    let s = ray_samples(&grid, &v, &cfg, x, y);
                    let total: f64 = s.weights().sum::<f64>() + s.t_final;
                    assert!((total - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_pixel_gradient_gives_zero() {
        let grid = random_grid(4, 1);
        let g = render_vjp(&grid, &view(8, 10.0), &small_cfg(), &vec![0.0; 192]).unwrap();
        assert!(g.density_raw.iter().chain(&g.color_raw).all(|&v| v == 0.0));
        assert!(render_vjp(&grid, &view(8, 10.0), &small_cfg(), &[0.0; 5]).is_err());
    }

    /// Central-difference check of the VJP on a small grid.
    pub(crate) fn check_vjp_against_finite_differences(seed: u64) -> f64 {
        let grid = random_grid(4, seed);
        let v = view(8, 25.0);
        let cfg = RenderConfig {
            jitter: Some(seed),
            ..small_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let pg: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = render_vjp(&grid, &v, &cfg, &pg).unwrap();
        let objective = |grid: &VoxelGrid| -> f64 {
            render(grid, &v, &cfg)
                .image
                .data()
                .iter()
                .zip(&pg)
                .map(|(a, b)| a * b)
                .sum()
        };
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        let mut check = |analytic: f64, fd: f64| {
            let err = (analytic - fd).abs();
            if err > 1e-8 {
                worst = worst.max(err / analytic.abs().max(fd.abs()));
            }
        };
        for i in 0..grid.density_raw.len() {
            let mut p = grid.clone();
            p.density_raw[i] += h;
            let up = objective(&p);
            p.density_raw[i] -= 2.0 * h;
            let dn = objective(&p);
            check(g.density_raw[i], (up - dn) / (2.0 * h));
        }
        for i in 0..grid.color_raw.len() {
            let mut p = grid.clone();
            p.color_raw[i] += h;
            let up = objective(&p);
            p.color_raw[i] -= 2.0 * h;
            let dn = objective(&p);
            check(g.color_raw[i], (up - dn) / (2.0 * h));
        }
        worst
    }

    #[test]
    fn vjp_matches_finite_differences() {
        for seed in 0..2 {
            let worst = check_vjp_against_finite_differences(seed);
            assert!(worst < 1e-3, "relative error {worst}");
        }
    }

    #[test]
    fn raising_density_never_lowers_opacity() {
        let cfg = small_cfg();
        let v = view(6, 50.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..10 {
            let grid = random_grid(4, trial);
            let base = render(&grid, &v, &cfg);
            let mut bumped = grid.clone();
            let i = rng.gen_range(0..grid.voxel_count());
            bumped.density_raw[i] += rng.gen_range(0.1..3.0);
            let after = render(&bumped, &v, &cfg);
            for (a, b) in after.opacity.iter().zip(&base.opacity) {
                assert!(a >= b);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let grid = random_grid(5, 2);
        let cfg = RenderConfig {
            jitter: Some(77),
            ..small_cfg()
        };
        let a = render(&grid, &view(8, 5.0), &cfg);
        let b = render(&grid, &view(8, 5.0), &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn initializers() {
        let b = Bounds::cube(1.2);
        let a = init_grid(6, b, GridInit::UniformFog, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let a2 = init_grid(6, b, GridInit::UniformFog, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, a2);
        assert!((0..a.voxel_count()).all(|i| (0.09..=0.11).contains(&a.density(i))));

        let blob = init_grid(7, b, GridInit::GaussianBlob, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(blob.density(blob.index(3, 3, 3)) > blob.density(blob.index(0, 0, 0)));
        assert!(init_grid(1, b, GridInit::UniformFog, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_f32_exact() {
        let mut grid = random_grid(3, 9);
        for v in grid.density_raw.iter_mut().chain(grid.color_raw.iter_mut()) {
            *v = f64::from(*v as f32);
        }
        let bytes = grid.to_checkpoint().to_bytes();
        let back = VoxelGrid::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, grid);
    }
}
