//! Multi-view consistency, held-out accuracy and saturation statistics of
//! an optimized grid.

use crate::error::{Error, Result};
use crate::geometry::{OrbitSpec, View};
use crate::pointcloud::SynthScene;
use crate::raster::DepthMap;
use crate::volume::{render, Bounds, RenderConfig, RenderOutput, VoxelGrid};
use crate::warp::{masked_psnr, reference_mask, warp_backward, DEFAULT_OCCLUSION_TOL};

/// Pixels whose accumulated opacity is below this are treated as empty
/// when building depth maps from renderings.
pub const OPACITY_THRESHOLD: f64 = 0.5;

fn opaque_depth(out: &RenderOutput) -> DepthMap {
    let (w, h) = out.expected_depth.dims();
    let data = out
        .expected_depth
        .data()
        .iter()
        .zip(&out.opacity)
        .map(|(&d, &o)| if o >= OPACITY_THRESHOLD { d } else { DepthMap::INVALID })
        .collect();
    DepthMap::from_vec(w, h, data).expect("dims match by construction")
}

/// Mean masked PSNR (dB) between each rendered view and its predecessor
/// warped into it with the rendered expected depth. Pairs without overlap
/// are skipped.
pub fn eval_consistency(grid: &VoxelGrid, views: &[View], cfg: &RenderConfig) -> Result<f64> {
    if views.len() < 2 {
        return Err(Error::InvalidArgument("consistency needs at least two views".into()));
    }
    let outs: Vec<(RenderOutput, DepthMap)> = views
        .iter()
        .map(|v| {
            let out = render(grid, v, cfg);
            let d = opaque_depth(&out);
            (out, d)
        })
        .collect();
    let mut scores = Vec::new();
    for k in 0..views.len() - 1 {
        let (src, d_src) = &outs[k];
        let (dst, d_dst) = &outs[k + 1];
        let (warped, mask) = warp_backward(
            &src.image,
            d_src,
            d_dst,
            &views[k],
            &views[k + 1],
            DEFAULT_OCCLUSION_TOL,
        )?;
        if let Some(p) = masked_psnr(&warped, &dst.image, &mask) {
            scores.push(p);
        }
    }
    if scores.is_empty() {
        return Err(Error::EmptyMasks("no rendered view pair overlaps".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// `n` views offset by half a spacing from the reference azimuth, so none
/// coincides with the reference.
pub fn heldout_views(reference: &OrbitSpec, n: usize) -> Vec<OrbitSpec> {
    (0..n)
        .map(|i| reference.with_azimuth(reference.azimuth + 360.0 * (i as f64 + 0.5) / n as f64))
        .collect()
}

/// Mean PSNR (dB) of the grid's renderings against the scene's ground truth
/// on the ground-truth object pixels.
pub fn heldout_psnr(
    grid: &VoxelGrid,
    scene: &SynthScene,
    views: &[View],
    splat_radius: f64,
    cfg: &RenderConfig,
) -> Result<f64> {
    let mut scores = Vec::new();
    for v in views {
        let (truth, depth) = scene.render_view(v, splat_radius, cfg.background);
        let rendered = render(grid, v, cfg).image;
        if let Some(p) = masked_psnr(&rendered, &truth, &reference_mask(&depth)) {
            scores.push(p);
        }
    }
    if scores.is_empty() {
        return Err(Error::EmptyMasks(
            "the scene is not visible from any held-out view".into(),
        ));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaturationStats {
    /// Mean HSV saturation over opaque pixels.
    pub mean_saturation: f64,
    /// Fraction of opaque-pixel channel values within 0.02 of 0 or 1.
    pub clipped_fraction: f64,
    pub opaque_pixels: usize,
}

pub fn saturation_stats(grid: &VoxelGrid, views: &[View], cfg: &RenderConfig) -> SaturationStats {
    let (mut sat, mut clipped, mut count) = (0.0, 0usize, 0usize);
    for v in views {
        let out = render(grid, v, cfg);
        for (px, &o) in out.image.data().chunks_exact(3).zip(&out.opacity) {
            if o < OPACITY_THRESHOLD {
                continue;
            }
            count += 1;
            let max = px.iter().cloned().fold(f64::MIN, f64::max);
            let min = px.iter().cloned().fold(f64::MAX, f64::min);
            sat += if max > 0.0 { (max - min) / max } else { 0.0 };
            clipped += px.iter().filter(|&&c| !(0.02..=0.98).contains(&c)).count();
        }
    }
    SaturationStats {
        mean_saturation: if count > 0 { sat / count as f64 } else { 0.0 },
        clipped_fraction: if count > 0 {
            clipped as f64 / (3 * count) as f64
        } else {
            0.0
        },
        opaque_pixels: count,
    }
}

/// A grid that reproduces `scene`: nodes within `shell` voxel spacings of a
/// cloud point get density `density`, every other node is empty, and all
/// nodes take the scene's colorizer value. The shell is thick enough to stop rays, so the
/// renderings cover the point splats.
pub fn ground_truth_grid(
    scene: &SynthScene,
    resolution: usize,
    bounds: Bounds,
    density: f64,
    shell: f64,
) -> Result<VoxelGrid> {
    bounds.validate()?;
    if resolution < 2 || !(density > 0.0) || !(shell > 0.0) {
        return Err(Error::InvalidArgument(
            "ground-truth grid needs resolution >= 2 and positive density and shell".into(),
        ));
    }
    let n = resolution.pow(3);
    let mut grid = VoxelGrid::new(resolution, bounds, vec![0.0; n], vec![0.0; 3 * n])?;
    // Empty nodes carry the surface color too, so interpolating across the
    // shell boundary does not blend in a foreign color.
    for z in 0..resolution {
        for y in 0..resolution {
            for x in 0..resolution {
                let i = grid.index(x, y, z);
                grid.set_node(i, 0.0, scene.colorizer.color(&grid.node_position(x, y, z)));
            }
        }
    }
    let step = (bounds.max - bounds.min) / (resolution - 1) as f64;
    let reach = step * shell;
    let mut filled = vec![false; n];
    for p in &scene.cloud.positions {
        let lo = (p - reach - bounds.min).component_div(&step);
        let hi = (p + reach - bounds.min).component_div(&step);
        let range = |a: f64, b: f64| {
            let a = a.ceil().max(0.0) as usize;
            let b = b.floor().min((resolution - 1) as f64);
            if b < 0.0 {
                0..0
            } else {
                a..b as usize + 1
            }
        };
        for z in range(lo.z, hi.z) {
            for y in range(lo.y, hi.y) {
                for x in range(lo.x, hi.x) {
                    let i = grid.index(x, y, z);
                    if filled[i] {
                        continue;
                    }
                    let q = grid.node_position(x, y, z);
                    if (q - p).norm() <= reach.max() {
                        filled[i] = true;
                        let c = grid.color(i);
                        grid.set_node(i, density, c);
                    }
                }
            }
        }
    }
    Ok(grid)
}
