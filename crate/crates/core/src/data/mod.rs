//! Dataset ingestion for the supported scene conventions, reference depth
//! loading, and scene bundling.

pub mod blender;
pub mod dtu;
pub mod llff;
pub mod mesh;
pub mod npy;
pub mod pfm;
pub mod toy;

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::geometry::{CameraIntrinsics, CameraPose, PoseStrategy};
use crate::warp::DepthMap;
use crate::{Error, Result};

/// Intrinsics plus pose for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

/// A held-out view; the image is present when ground truth exists on disk.
#[derive(Debug, Clone)]
pub struct TestView {
    pub camera: CameraModel,
    pub image: Option<Array3<f64>>,
}

/// Everything the trainer needs for one scene.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub name: String,
    /// `(H, W, 3)` in `[0, 1]`.
    pub reference_image: Array3<f64>,
    pub reference_depth: DepthMap,
    pub reference_camera: CameraModel,
    pub test_views: Vec<TestView>,
    pub pose_strategy: PoseStrategy,
    /// Ray bounds `(t_near, t_far)`.
    pub bounds: (f64, f64),
    /// Compositing background; `Some` only for white-background renders.
    pub background: Option<[f64; 3]>,
}

impl SceneBundle {
    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.reference_image.dim();
        if c != 3 {
            return Err(Error::Validation(format!("reference image has {c} channels")));
        }
        let intr = &self.reference_camera.intrinsics;
        if (intr.width as usize, intr.height as usize) != (w, h) {
            return Err(Error::Validation(format!(
                "intrinsics {}x{} do not match the {w}x{h} reference image",
                intr.width, intr.height
            )));
        }
        if self.reference_depth.width() != w || self.reference_depth.height() != h {
            return Err(Error::Validation(format!(
                "reference depth {}x{} is not pixel-aligned with the {w}x{h} image",
                self.reference_depth.width(),
                self.reference_depth.height()
            )));
        }
        if !(self.bounds.0 > 0.0 && self.bounds.0 < self.bounds.1) {
            return Err(Error::Validation(format!(
                "bad scene bounds {:?}",
                self.bounds
            )));
        }
        if self.reference_image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("reference image outside [0, 1]".into()));
        }
        Ok(())
    }

    /// `(P, 3)` ground-truth colors at a patch's pixel coordinates.
    pub fn reference_patch_colors(&self, patch: &crate::geometry::PixelPatch) -> Array2<f64> {
        let mut out = Array2::zeros((patch.len(), 3));
        for (k, (u, v)) in patch.coords().enumerate() {
            for c in 0..3 {
                out[[k, c]] = self.reference_image[[v as usize, u as usize, c]];
            }
        }
        out
    }
}

/// Decode an 8-bit image into `(H, W, 3)` floats in `[0, 1]`. RGBA inputs are
/// composited onto the given background (white-background datasets ship
/// straight-alpha renders).
pub fn load_image(path: &Path, background: Option<[f64; 3]>) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::ingestion(path, format!("cannot decode image: {e}")))?;
    let rgba = img.to_rgba8();
    let (w, h) = rgba.dimensions();
    let mut out = Array3::zeros((h as usize, w as usize, 3));
    let bg = background.unwrap_or([0.0, 0.0, 0.0]);
    for (x, y, pixel) in rgba.enumerate_pixels() {
        let a = pixel[3] as f64 / 255.0;
        for c in 0..3 {
            let v = pixel[c] as f64 / 255.0;
            out[[y as usize, x as usize, c]] = if a < 1.0 { v * a + bg[c] * (1.0 - a) } else { v };
        }
    }
    Ok(out)
}

pub fn save_image(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (h, w, _) = image.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, pixel) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            pixel[c] = (image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0 + 0.5) as u8;
        }
    }
    buf.save(path)
        .map_err(|e| Error::ingestion(path, format!("cannot write image: {e}")))
}

/// Load a reference depth map: 32-bit PFM plus an optional 8-bit mask PNG
/// (non-zero = valid). Without a mask, validity is derived from finiteness
/// and positivity; with one, masked-in pixels must be positive.
pub fn load_depth_map(
    path: &Path,
    expected: (u32, u32),
    mask_path: Option<&Path>,
) -> Result<DepthMap> {
    let values = pfm::read_pfm(path)?;
    let (h, w) = values.dim();
    if (w as u32, h as u32) != expected {
        return Err(Error::ingestion(
            path,
            format!(
                "depth map is {w}x{h}, expected {}x{}",
                expected.0, expected.1
            ),
        ));
    }
    let mask = match mask_path {
        Some(mp) => {
            let img = image::open(mp)
                .map_err(|e| Error::ingestion(mp, format!("cannot decode mask: {e}")))?
                .to_luma8();
            if img.dimensions() != expected {
                return Err(Error::ingestion(mp, "mask size mismatch"));
            }
            let mask =
                Array2::from_shape_fn((h, w), |(y, x)| img.get_pixel(x as u32, y as u32)[0] != 0);
            for ((y, x), &m) in mask.indexed_iter() {
                if m && !(values[[y, x]].is_finite() && values[[y, x]] > 0.0) {
                    return Err(Error::ingestion(
                        path,
                        format!("non-positive depth {} under mask at ({x}, {y})", values[[y, x]]),
                    ));
                }
            }
            mask
        }
        None => Array2::from_shape_fn((h, w), |(y, x)| {
            values[[y, x]].is_finite() && values[[y, x]] > 0.0
        }),
    };
    DepthMap::new(values, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_map_loading_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        let values = Array2::from_elem((6, 4), 2.0);
        pfm::write_pfm(&path, &values).unwrap();

        let depth = load_depth_map(&path, (4, 6), None).unwrap();
        assert_eq!(depth.valid_count(), 24);
        assert_eq!(depth.get(0, 0), Some(2.0));

        assert!(load_depth_map(&path, (6, 4), None).is_err());

        // Zeros are masked out without a mask file.
        let mut with_hole = values.clone();
        with_hole[[1, 2]] = 0.0;
        pfm::write_pfm(&path, &with_hole).unwrap();
        let depth = load_depth_map(&path, (4, 6), None).unwrap();
        assert_eq!(depth.valid_count(), 23);
        assert_eq!(depth.get(2, 1), None);

        // An explicit mask claiming the hole is valid is an error.
        let mask_path = dir.path().join("m.png");
        let mask = image::GrayImage::from_pixel(4, 6, image::Luma([255u8]));
        mask.save(&mask_path).unwrap();
        assert!(load_depth_map(&path, (4, 6), Some(&mask_path)).is_err());
    }

    #[test]
    fn image_round_trip_and_alpha_compositing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut rgba = image::RgbaImage::new(3, 2);
        rgba.put_pixel(0, 0, image::Rgba([255, 0, 0, 255]));
        rgba.put_pixel(1, 0, image::Rgba([0, 255, 0, 0])); // fully transparent
        rgba.put_pixel(2, 0, image::Rgba([0, 0, 255, 128]));
        rgba.save(&path).unwrap();

        let img = load_image(&path, Some([1.0, 1.0, 1.0])).unwrap();
        assert_eq!(img[[0, 0, 0]], 1.0);
        // Transparent pixel becomes pure background.
        assert_eq!(img[[0, 1, 0]], 1.0);
        assert_eq!(img[[0, 1, 1]], 1.0);
        // Half-transparent blue mixes toward white.
        assert!(img[[0, 2, 2]] > 0.5 && img[[0, 2, 0]] > 0.4);
    }
}
