//! Geometry pseudo labels: forward depth warping with painter's-algorithm
//! z-buffering, inverse depth smoothness, and the combined geometry loss.

use ndarray::{Array2, Array3};

use crate::autodiff::{Tape, Var};
use crate::geometry::{CameraIntrinsics, PixelPatch, RigidTransform};
use crate::{Error, Result};

/// Collisions closer than this are ties, resolved by source scan order.
pub const WARP_TIE_EPS: f64 = 1e-6;

/// Per-pixel axial depth with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    values: Array2<f64>,
    mask: Array2<bool>,
}

impl DepthMap {
    pub fn new(values: Array2<f64>, mask: Array2<bool>) -> Result<Self> {
        if values.dim() != mask.dim() {
            return Err(Error::Validation(format!(
                "depth {:?} and mask {:?} shapes differ",
                values.dim(),
                mask.dim()
            )));
        }
        for ((r, c), &m) in mask.indexed_iter() {
            if m {
                let v = values[[r, c]];
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::Validation(format!(
                        "masked depth at ({r}, {c}) must be finite and positive, got {v}"
                    )));
                }
            }
        }
        Ok(DepthMap { values, mask })
    }

    pub fn dense(values: Array2<f64>) -> Result<Self> {
        let mask = Array2::from_elem(values.dim(), true);
        DepthMap::new(values, mask)
    }

    /// Sparse map holding a rendered patch's depths at its pixel coordinates.
    /// Non-positive or non-finite entries are masked out rather than rejected
    /// (empty space renders a zero expected depth).
    pub fn from_patch(
        patch: &PixelPatch,
        depths: &Array2<f64>,
        image_size: (u32, u32),
    ) -> Result<Self> {
        if depths.dim() != (patch.rows as usize, patch.cols as usize) {
            return Err(Error::Validation(format!(
                "patch depth shape {:?} does not match {}x{} patch",
                depths.dim(),
                patch.rows,
                patch.cols
            )));
        }
        let (width, height) = image_size;
        let mut values = Array2::zeros((height as usize, width as usize));
        let mut mask = Array2::from_elem((height as usize, width as usize), false);
        for (k, (u, v)) in patch.coords().enumerate() {
            let d = depths[[k / patch.cols as usize, k % patch.cols as usize]];
            if d.is_finite() && d > 0.0 {
                values[[v as usize, u as usize]] = d;
                mask[[v as usize, u as usize]] = true;
            }
        }
        DepthMap::new(values, mask)
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        if self.mask[[v, u]] {
            Some(self.values[[v, u]])
        } else {
            None
        }
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Warped depth in the target view; the mask marks covered, unoccluded,
/// in-bounds pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    pub depth: DepthMap,
}

/// Forward-warp `src_depth` into the camera described by `k_dst`.
///
/// Every valid source pixel is unprojected through `k_src`, moved by
/// `transform` (source camera frame to target camera frame), reprojected, and
/// scattered to the nearest integer pixel carrying its target-frame axial
/// depth. Collisions keep the smallest depth; ties within [`WARP_TIE_EPS`]
/// keep the first source in row-major scan order. Points behind the camera or
/// out of bounds are dropped from the mask.
pub fn warp_depth(
    src_depth: &DepthMap,
    k_src: &CameraIntrinsics,
    k_dst: &CameraIntrinsics,
    transform: &RigidTransform,
) -> Result<WarpResult> {
    if src_depth.width() != k_src.width as usize || src_depth.height() != k_src.height as usize {
        return Err(Error::Validation(format!(
            "source depth {}x{} does not match intrinsics {}x{}",
            src_depth.width(),
            src_depth.height(),
            k_src.width,
            k_src.height
        )));
    }
    let (out_h, out_w) = (k_dst.height as usize, k_dst.width as usize);
    let mut values = Array2::zeros((out_h, out_w));
    let mut mask = Array2::from_elem((out_h, out_w), false);

    for v in 0..src_depth.height() {
        for u in 0..src_depth.width() {
            let Some(z) = src_depth.get(u, v) else {
                continue;
            };
            let p_src = k_src.unproject(u as f64, v as f64, z);
            let p_dst = transform.apply(&p_src);
            let Some((uf, vf, depth)) = k_dst.project(&p_dst) else {
                continue;
            };
            let ui = uf.round();
            let vi = vf.round();
            if ui < 0.0 || vi < 0.0 || ui >= out_w as f64 || vi >= out_h as f64 {
                continue;
            }
            let (ui, vi) = (ui as usize, vi as usize);
            if !mask[[vi, ui]] || depth < values[[vi, ui]] - WARP_TIE_EPS {
                values[[vi, ui]] = depth;
                mask[[vi, ui]] = true;
            }
        }
    }
    Ok(WarpResult {
        depth: DepthMap::new(values, mask)?,
    })
}

/// Inverse depth smoothness: both inputs are average-pooled by `factor`, then
/// every interior pixel contributes `exp(-|lap(I)|) * (|dxx d| + |dxy d| +
/// |dyy d|)` with central second differences; the loss is the interior mean.
///
/// The image weighting is a fixed constant per step (no gradient flows into
/// the rendered colors through it).
pub fn smoothness_loss(
    tape: &Tape,
    depth: Var,
    image: &Array3<f64>,
    factor: usize,
) -> Result<Var> {
    if factor < 1 {
        return Err(Error::Domain(format!("downscale factor must be >= 1, got {factor}")));
    }
    let shape = tape.shape(depth);
    assert_eq!(shape.len(), 2, "smoothness_loss expects a (H, W) depth patch");
    let (h, w) = (shape[0], shape[1]);
    if image.shape()[1] != h || image.shape()[2] != w {
        return Err(Error::Validation(format!(
            "image {:?} does not align with depth {h}x{w}",
            image.shape()
        )));
    }
    let (ph, pw) = (h / factor, w / factor);
    if ph < 3 || pw < 3 {
        return Err(Error::Domain(format!(
            "patch is {ph}x{pw} after downscaling; need at least 3x3"
        )));
    }

    let d = if factor > 1 {
        tape.avg_pool2d(depth, factor)
    } else {
        depth
    };

    // Edge-aware weight from the pooled image Laplacian, channel-averaged.
    let pooled = pool_image(image, factor);
    let mut weight = Array2::zeros((ph - 2, pw - 2));
    for i in 1..ph - 1 {
        for j in 1..pw - 1 {
            let mut lap = 0.0;
            for c in 0..pooled.shape()[0] {
                lap += (pooled[[c, i, j + 1]]
                    + pooled[[c, i, j - 1]]
                    + pooled[[c, i + 1, j]]
                    + pooled[[c, i - 1, j]]
                    - 4.0 * pooled[[c, i, j]])
                .abs();
            }
            weight[[i - 1, j - 1]] = (-(lap / pooled.shape()[0] as f64)).exp();
        }
    }

    let interior = |dr: isize, dc: isize| -> Var {
        let row = tape.narrow(d, 0, (1 + dr) as usize, ph - 2);
        tape.narrow(row, 1, (1 + dc) as usize, pw - 2)
    };
    let center = interior(0, 0);
    let dxx = {
        let a = tape.add(interior(0, -1), interior(0, 1));
        tape.sub(a, tape.mul_scalar(center, 2.0))
    };
    let dyy = {
        let a = tape.add(interior(-1, 0), interior(1, 0));
        tape.sub(a, tape.mul_scalar(center, 2.0))
    };
    let dxy = {
        let a = tape.sub(interior(1, 1), interior(1, -1));
        let b = tape.sub(interior(-1, 1), interior(-1, -1));
        tape.mul_scalar(tape.sub(a, b), 0.25)
    };
    let curvature = tape.add(tape.abs(dxx), tape.add(tape.abs(dxy), tape.abs(dyy)));
    let weighted = tape.mul(tape.constant(weight.into_dyn()), curvature);
    Ok(tape.mean_all(weighted))
}

fn pool_image(image: &Array3<f64>, factor: usize) -> Array3<f64> {
    if factor == 1 {
        return image.clone();
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (ph, pw) = (h / factor, w / factor);
    let norm = (factor * factor) as f64;
    let mut out = Array3::zeros((c, ph, pw));
    for ci in 0..c {
        for i in 0..ph {
            for j in 0..pw {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += image[[ci, i * factor + dy, j * factor + dx]];
                    }
                }
                out[[ci, i, j]] = acc / norm;
            }
        }
    }
    out
}

/// A warped counterpart restricted to a patch's footprint: per-patch-pixel
/// pseudo-label depths plus the warp coverage mask.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedLabel {
    pub values: Array2<f64>,
    pub mask: Array2<bool>,
}

impl WarpedLabel {
    /// Gather a full-image warp result at the patch coordinates.
    pub fn gather(warp: &WarpResult, patch: &PixelPatch) -> Self {
        let (rows, cols) = (patch.rows as usize, patch.cols as usize);
        let mut values = Array2::zeros((rows, cols));
        let mut mask = Array2::from_elem((rows, cols), false);
        for (k, (u, v)) in patch.coords().enumerate() {
            if let Some(d) = warp.depth.get(u as usize, v as usize) {
                values[[k / cols, k % cols]] = d;
                mask[[k / cols, k % cols]] = true;
            }
        }
        WarpedLabel { values, mask }
    }

    pub fn covered(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Itemized geometry loss. `total` is the tape node to optimize; the numeric
/// fields mirror its composition for logging and tests.
pub struct GeometryLoss {
    pub total: Var,
    pub l1_ref: f64,
    pub l1_uns: f64,
    pub smooth: f64,
    /// Pixels contributing to each L1 term; zero means the warp intersection
    /// was empty and the term contributed nothing.
    pub ref_pixels: usize,
    pub uns_pixels: usize,
}

/// Masked mean absolute error against a fixed pseudo label.
fn masked_l1(tape: &Tape, rendered: Var, label: &WarpedLabel) -> (Var, usize) {
    let count = label.covered();
    if count == 0 {
        return (tape.scalar(0.0), 0);
    }
    let maskf = label.mask.mapv(|m| if m { 1.0 } else { 0.0 });
    let diff = tape.sub(rendered, tape.constant(label.values.clone().into_dyn()));
    let masked = tape.mul(tape.abs(diff), tape.constant(maskf.into_dyn()));
    (
        tape.mul_scalar(tape.sum_all(masked), 1.0 / count as f64),
        count,
    )
}

/// Combined geometry pseudo-label loss:
/// `L1(d_ref, warp(other)) + L1(warp(other), d_uns) + lambda_smooth * L_smooth`,
/// with each L1 a masked mean over the warp/patch intersection and the
/// smoothness term attached to the unseen-view depth patch.
#[allow(clippy::too_many_arguments)]
pub fn geometry_loss(
    tape: &Tape,
    d_ref: Var,
    d_uns: Var,
    label_ref: &WarpedLabel,
    label_uns: &WarpedLabel,
    unseen_image: &Array3<f64>,
    lambda_smooth: f64,
    smooth_factor: usize,
) -> Result<GeometryLoss> {
    let (ref_term, ref_pixels) = masked_l1(tape, d_ref, label_ref);
    let (uns_term, uns_pixels) = masked_l1(tape, d_uns, label_uns);
    let smooth = smoothness_loss(tape, d_uns, unseen_image, smooth_factor)?;
    let total = tape.add(
        tape.add(ref_term, uns_term),
        tape.mul_scalar(smooth, lambda_smooth),
    );
    Ok(GeometryLoss {
        total,
        l1_ref: tape.scalar_value(ref_term),
        l1_uns: tape.scalar_value(uns_term),
        smooth: tape.scalar_value(smooth),
        ref_pixels,
        uns_pixels,
    })
}
