//! Cross-view backward warping with occlusion masks, plus the masked
//! squared-error reduction shared by the warp and reconstruction losses.

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::geometry::{project, unproject, View};
use crate::raster::{DepthMap, Image, WarpMask};

pub const DEFAULT_OCCLUSION_TOL: f64 = 0.01;

/// Gathers `src` (seen from `view_src`) into `view_dst`.
///
/// Each destination pixel with a valid `depth_dst` is lifted to 3D, projected
/// into the source view and accepted when it lands inside the image and
/// agrees with the bilinear source depth to within `occlusion_tol` relative
/// error. Rejected pixels are zero and masked out.
pub fn warp_backward(
    src: &Image,
    depth_src: &DepthMap,
    depth_dst: &DepthMap,
    view_src: &View,
    view_dst: &View,
    occlusion_tol: f64,
) -> Result<(Image, WarpMask)> {
    let (w, h) = src.dims();
    if depth_src.dims() != (w, h) || depth_dst.dims() != (w, h) {
        return Err(Error::shape(
            format!("{w}x{h} for image and both depth maps"),
            format!("src depth {:?}, dst depth {:?}", depth_src.dims(), depth_dst.dims()),
        ));
    }
    for v in [view_src, view_dst] {
        if (v.width(), v.height()) != (w, h) {
            return Err(Error::shape(
                format!("{w}x{h} view"),
                format!("{}x{}", v.width(), v.height()),
            ));
        }
    }

    let mut out = Image::zeros(w, h);
    let mut mask = WarpMask::new(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let d = depth_dst.get(x, y);
            if d <= 0.0 {
                continue;
            }
            let world = unproject(&Vector2::new(x as f64, y as f64), d, view_dst)?;
            let Ok((q, z)) = project(&world, view_src) else {
                continue;
            };
            let q = q.map(snap_to_pixel);
            if !view_src.intrinsics.in_bounds(&q) {
                continue;
            }
            let Some(z_src) = depth_src.bilinear(q.x, q.y) else {
                continue;
            };
            if (z - z_src).abs() <= occlusion_tol * z {
                mask.set(x, y, true);
                out.set_pixel(x, y, src.bilinear(q.x, q.y));
            }
        }
    }
    Ok((out, mask))
}

/// Rounds coordinates lying within 1e-9 of a pixel center onto it, so
/// exact correspondences are not lost to round-off at the image border.
fn snap_to_pixel(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Object mask of a reference view: true wherever the depth has a surface.
pub fn reference_mask(depth_ref: &DepthMap) -> WarpMask {
    let bits = depth_ref.data().iter().map(|&d| d > 0.0).collect();
    WarpMask::from_vec(depth_ref.width(), depth_ref.height(), bits).expect("dims match by construction")
}

/// Result of a masked squared-error reduction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedMse {
    pub value: f64,
    /// Set when no pixel was selected; `value` is then 0.
    pub empty_mask: bool,
    pub count: usize,
}

/// Mean over selected pixels and channels of `(a − b)²`; 0 for an empty mask.
pub fn masked_mse(a: &Image, b: &Image, m: &WarpMask) -> MaskedMse {
    masked_mse_slices(a.data(), b.data(), m)
}

pub(crate) fn masked_mse_slices(a: &[f64], b: &[f64], m: &WarpMask) -> MaskedMse {
    let count = m.count();
    if count == 0 {
        return MaskedMse {
            value: 0.0,
            empty_mask: true,
            count,
        };
    }
    let mut sum = 0.0;
    for ((pa, pb), &keep) in a.chunks_exact(3).zip(b.chunks_exact(3)).zip(m.bits()) {
        if keep {
            for c in 0..3 {
                let d = pa[c] - pb[c];
                sum += d * d;
            }
        }
    }
    MaskedMse {
        value: sum / (3 * count) as f64,
        empty_mask: false,
        count,
    }
}

/// Gradient of [`masked_mse`] with respect to `a`.
pub(crate) fn masked_mse_grad(a: &[f64], b: &[f64], m: &WarpMask) -> Vec<f64> {
    let count = m.count();
    let mut g = vec![0.0; a.len()];
    if count == 0 {
        return g;
    }
    let scale = 2.0 / (3 * count) as f64;
    for (i, &keep) in m.bits().iter().enumerate() {
        if keep {
            for c in 0..3 {
                let k = i * 3 + c;
                g[k] = scale * (a[k] - b[k]);
            }
        }
    }
    g
}

/// PSNR in dB over the masked pixels for images in `[0, 1]`, capped at 99.
pub fn masked_psnr(a: &Image, b: &Image, m: &WarpMask) -> Option<f64> {
    let mse = masked_mse(a, b, m);
    if mse.empty_mask {
        return None;
    }
    Some(psnr_from_mse(mse.value))
}

pub const PSNR_CAP_DB: f64 = 99.0;

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP_DB)
}
