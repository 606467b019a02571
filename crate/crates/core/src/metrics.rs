//! Image quality metrics: PSNR, SSIM, and a pluggable perceptual distance.

use ndarray::{Array2, Array3};

use crate::{Error, Result};

/// PSNR is capped here when the MSE falls below `1e-10`.
pub const PSNR_CAP: f64 = 99.0;

fn check_shapes(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Validation(format!(
            "image shapes {:?} vs {:?} differ",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for `(H, W, 3)` images in `[0, 1]`.
pub fn psnr(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    check_shapes(a, b)?;
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok(-10.0 * mse.log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable valid-mode Gaussian filter.
fn gauss_filter(img: &Array2<f64>) -> Array2<f64> {
    let k = gaussian_kernel();
    let (h, w) = img.dim();
    let wo = w - SSIM_WINDOW + 1;
    let ho = h - SSIM_WINDOW + 1;
    let mut rows = Array2::zeros((h, wo));
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * img[[y, x + i]];
            }
            rows[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((ho, wo));
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * rows[[y + i, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Structural similarity with the standard 11x11 sigma-1.5 Gaussian window
/// and stabilizers for a [0, 1] dynamic range, averaged over channels.
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    check_shapes(a, b)?;
    let (h, w, channels) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Domain(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let mut total = 0.0;
    for c in 0..channels {
        let xc = a.index_axis(ndarray::Axis(2), c).to_owned();
        let yc = b.index_axis(ndarray::Axis(2), c).to_owned();
        let mu_x = gauss_filter(&xc);
        let mu_y = gauss_filter(&yc);
        let xx = gauss_filter(&(&xc * &xc));
        let yy = gauss_filter(&(&yc * &yc));
        let xy = gauss_filter(&(&xc * &yc));

        let mut acc = 0.0;
        for ((i, j), &mx) in mu_x.indexed_iter() {
            let my = mu_y[[i, j]];
            let var_x = xx[[i, j]] - mx * mx;
            let var_y = yy[[i, j]] - my * my;
            let cov = xy[[i, j]] - mx * my;
            let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mx * mx + my * my + SSIM_C1) * (var_x + var_y + SSIM_C2);
            acc += num / den;
        }
        total += acc / mu_x.len() as f64;
    }
    Ok(total / channels as f64)
}

/// Pluggable perceptual distance backend.
pub trait PerceptualMetric {
    fn name(&self) -> &str;
    /// Non-negative, zero for identical inputs.
    fn distance(&self, a: &Array3<f64>, b: &Array3<f64>) -> Result<f64>;
}

/// Mean absolute difference; the deterministic test backend.
pub struct MadPerceptual;

impl PerceptualMetric for MadPerceptual {
    fn name(&self) -> &str {
        "stub-mad"
    }

    fn distance(&self, a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
        check_shapes(a, b)?;
        Ok(a.iter()
            .zip(b.iter())
            .map(|(&x, &y)| (x - y).abs())
            .sum::<f64>()
            / a.len() as f64)
    }
}

/// Perceptual distance from a frozen feature extractor: squared L2 between
/// the global features of the two images.
pub struct FeaturePerceptual<E> {
    pub extractor: E,
}

impl<E: crate::semantic::FeatureExtractor> PerceptualMetric for FeaturePerceptual<E> {
    fn name(&self) -> &str {
        "feature-distance"
    }

    fn distance(&self, a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
        check_shapes(a, b)?;
        let tape = crate::autodiff::Tape::new();
        let to_var = |img: &Array3<f64>| {
            let (h, w, _) = img.dim();
            let chw = ndarray::Array3::from_shape_fn((3, h, w), |(c, y, x)| img[[y, x, c]]);
            tape.constant(chw.into_dyn())
        };
        let fa = crate::semantic::global_feature(&tape, &self.extractor, to_var(a))?;
        let fb = crate::semantic::global_feature(&tape, &self.extractor, to_var(b))?;
        let d = crate::semantic::cls_loss(&tape, fa, fb)?;
        Ok(tape.scalar_value(d))
    }
}
