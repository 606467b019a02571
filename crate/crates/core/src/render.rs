//! Quadrature rendering of color, expected depth, and opacity along rays.

use ndarray::{Array2, Array3, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{Tape, Var};
use crate::field::FieldVars;
use crate::geometry::{generate_ray, CameraIntrinsics, CameraPose, PixelPatch, Ray};
use crate::{Error, Result};

/// Clamp on the accumulated weight when normalizing expected depth.
pub const DEPTH_EPS: f64 = 1e-10;

/// Floor on segment lengths after sample merging.
const MIN_DELTA: f64 = 1e-12;

/// Ascending quadrature nodes along a ray, with per-segment lengths.
/// The last segment runs to the far bound.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl RaySamples {
    pub fn from_sorted(t: Vec<f64>, ray: &Ray) -> Result<Self> {
        if t.is_empty() {
            return Err(Error::Domain("need at least one sample".into()));
        }
        for pair in t.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::Validation(format!(
                    "t-values must be strictly ascending, got {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        let mut deltas: Vec<f64> = t.windows(2).map(|p| p[1] - p[0]).collect();
        deltas.push((ray.t_far - t[t.len() - 1]).max(MIN_DELTA));
        Ok(RaySamples { t, deltas })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// World-space sample positions.
    pub fn positions(&self, ray: &Ray) -> Array2<f64> {
        let mut out = Array2::zeros((self.t.len(), 3));
        for (i, &t) in self.t.iter().enumerate() {
            let p = ray.point_at(t);
            out[[i, 0]] = p.x;
            out[[i, 1]] = p.y;
            out[[i, 2]] = p.z;
        }
        out
    }
}

/// One uniform draw per equal-width bin of `[t_near, t_far]`.
pub fn stratified_sample<R: Rng + ?Sized>(ray: &Ray, n: usize, rng: &mut R) -> Result<RaySamples> {
    if n < 1 {
        return Err(Error::Domain(format!("sample count must be >= 1, got {n}")));
    }
    let width = (ray.t_far - ray.t_near) / n as f64;
    let t = (0..n)
        .map(|i| ray.t_near + (i as f64 + rng.gen_range(0.0..1.0)) * width)
        .collect();
    RaySamples::from_sorted(t, ray)
}

/// Deterministic bin centers; used for evaluation renders.
pub fn midpoint_sample(ray: &Ray, n: usize) -> Result<RaySamples> {
    if n < 1 {
        return Err(Error::Domain(format!("sample count must be >= 1, got {n}")));
    }
    let width = (ray.t_far - ray.t_near) / n as f64;
    let t = (0..n).map(|i| ray.t_near + (i as f64 + 0.5) * width).collect();
    RaySamples::from_sorted(t, ray)
}

/// Draw `m` extra t-values from the piecewise-constant density proportional
/// to `weights` over the coarse bins, merged ascending with the coarse nodes.
/// All-zero weights fall back to a uniform density. In deterministic mode the
/// inverse-CDF uses stratified midpoints instead of random draws.
pub fn importance_resample(
    weights: &[f64],
    coarse: &RaySamples,
    ray: &Ray,
    m: usize,
    mut rng: Option<&mut ChaCha20Rng>,
) -> Result<RaySamples> {
    if weights.len() != coarse.len() {
        return Err(Error::Validation(format!(
            "{} weights for {} samples",
            weights.len(),
            coarse.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::Validation("weights must be >= 0".into()));
    }

    // Bin edges: near bound, midpoints between consecutive nodes, far bound.
    let n = coarse.len();
    let mut edges = Vec::with_capacity(n + 1);
    edges.push(ray.t_near);
    for i in 0..n.saturating_sub(1) {
        edges.push(0.5 * (coarse.t[i] + coarse.t[i + 1]));
    }
    edges.push(ray.t_far);

    let total: f64 = weights.iter().sum();
    let uniform = 1.0 / n as f64;
    let probs: Vec<f64> = if total > 0.0 {
        weights.iter().map(|&w| w / total).collect()
    } else {
        vec![uniform; n]
    };
    let mut cdf = Vec::with_capacity(n + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for &p in &probs {
        acc += p;
        cdf.push(acc);
    }
    *cdf.last_mut().unwrap() = 1.0;

    let mut t = coarse.t.clone();
    for j in 0..m {
        let u = match rng.as_deref_mut() {
            Some(r) => r.gen_range(0.0..1.0),
            None => (j as f64 + 0.5) / m as f64,
        };
        let mut bin = n - 1;
        for b in 0..n {
            if u >= cdf[b] && u < cdf[b + 1] {
                bin = b;
                break;
            }
        }
        let span = (cdf[bin + 1] - cdf[bin]).max(1e-12);
        let frac = (u - cdf[bin]) / span;
        t.push(edges[bin] + frac * (edges[bin + 1] - edges[bin]));
    }
    t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Duplicate draws are measure-zero; nudge them so segments stay positive.
    for i in 1..t.len() {
        if t[i] <= t[i - 1] {
            t[i] = t[i - 1] + MIN_DELTA;
        }
    }
    RaySamples::from_sorted(t, ray)
}

/// Plain (non-tape) alpha compositing for a batch of rays.
///
/// `sigma`: `(R, S)` densities, `rgb`: `(R, S, 3)`, `t`/`delta`: `(R, S)`.
/// Returns the `(R, 5)` array `[r, g, b, depth, opacity]` plus per-sample
/// weights `w_i = T_i * alpha_i`.
pub fn composite_forward(
    sigma: &Array2<f64>,
    rgb: &Array3<f64>,
    t: &Array2<f64>,
    delta: &Array2<f64>,
    background: Option<[f64; 3]>,
) -> (Array2<f64>, Array2<f64>) {
    let (rays, samples) = sigma.dim();
    let mut out = Array2::zeros((rays, 5));
    let mut weights = Array2::zeros((rays, samples));
    for r in 0..rays {
        let mut transmittance = 1.0f64;
        let mut color = [0.0f64; 3];
        let mut depth_acc = 0.0;
        let mut opacity = 0.0;
        for s in 0..samples {
            let alpha = 1.0 - (-sigma[[r, s]] * delta[[r, s]]).exp();
            let w = transmittance * alpha;
            weights[[r, s]] = w;
            for c in 0..3 {
                color[c] += w * rgb[[r, s, c]];
            }
            depth_acc += w * t[[r, s]];
            opacity += w;
            transmittance *= 1.0 - alpha;
        }
        if let Some(bg) = background {
            for c in 0..3 {
                color[c] += transmittance * bg[c];
            }
        }
        out[[r, 0]] = color[0];
        out[[r, 1]] = color[1];
        out[[r, 2]] = color[2];
        out[[r, 3]] = depth_acc / opacity.max(DEPTH_EPS);
        out[[r, 4]] = opacity;
    }
    (out, weights)
}

/// Single-ray convenience over [`composite_forward`].
pub fn composite(
    samples: &RaySamples,
    sigma: &[f64],
    rgb: &[[f64; 3]],
    background: Option<[f64; 3]>,
) -> ([f64; 3], f64, f64, Vec<f64>) {
    let s = samples.len();
    let sigma_m = Array2::from_shape_vec((1, s), sigma.to_vec()).unwrap();
    let rgb_m = Array3::from_shape_fn((1, s, 3), |(_, i, c)| rgb[i][c]);
    let t_m = Array2::from_shape_vec((1, s), samples.t.clone()).unwrap();
    let d_m = Array2::from_shape_vec((1, s), samples.deltas.clone()).unwrap();
    let (out, w) = composite_forward(&sigma_m, &rgb_m, &t_m, &d_m, background);
    (
        [out[[0, 0]], out[[0, 1]], out[[0, 2]]],
        out[[0, 3]],
        out[[0, 4]],
        w.row(0).to_vec(),
    )
}

/// Differentiable render of one patch: color, expected depth, opacity.
pub struct RenderedPatch {
    /// `(P, 3)` colors in `[0, 1]` (pixels in patch row-major order).
    pub color: Var,
    /// `(P,)` opacity-normalized expected termination depth.
    pub depth: Var,
    /// `(P,)` accumulated alpha.
    pub opacity: Var,
}

/// Batched differentiable compositing on a tape.
///
/// `sigma` is `(R, S)` and `rgb` is `(R, S, 3)`; `t` and `delta` are constants.
/// Returns the rendered patch plus detached per-sample weights for
/// hierarchical resampling.
pub fn composite_batch(
    tape: &Tape,
    sigma: Var,
    rgb: Var,
    t: Array2<f64>,
    delta: Array2<f64>,
    background: Option<[f64; 3]>,
) -> (RenderedPatch, Array2<f64>) {
    let sigma_v = tape
        .value(sigma)
        .into_dimensionality::<ndarray::Ix2>()
        .expect("sigma must be (R, S)");
    let rgb_v = tape
        .value(rgb)
        .into_dimensionality::<ndarray::Ix3>()
        .expect("rgb must be (R, S, 3)");
    let (out, weights) = composite_forward(&sigma_v, &rgb_v, &t, &delta, background);

    let t_b = t.clone();
    let delta_b = delta.clone();
    let fused = tape.custom_op(
        &[sigma, rgb],
        out.into_dyn(),
        Box::new(move |grad, parents, value| {
            composite_backward(grad, parents[0], parents[1], value, &t_b, &delta_b, background)
        }),
    );
    let rays = t.nrows();
    let color = tape.narrow(fused, 1, 0, 3);
    let depth = tape.reshape(tape.narrow(fused, 1, 3, 1), &[rays]);
    let opacity = tape.reshape(tape.narrow(fused, 1, 4, 1), &[rays]);
    (
        RenderedPatch {
            color,
            depth,
            opacity,
        },
        weights,
    )
}

fn composite_backward(
    grad: &ArrayD<f64>,
    sigma: &ArrayD<f64>,
    rgb: &ArrayD<f64>,
    value: &ArrayD<f64>,
    t: &Array2<f64>,
    delta: &Array2<f64>,
    background: Option<[f64; 3]>,
) -> Vec<ArrayD<f64>> {
    let sigma = sigma.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let rgb = rgb.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    let grad = grad.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let (rays, samples) = sigma.dim();

    let mut grad_sigma = Array2::<f64>::zeros((rays, samples));
    let mut grad_rgb = Array3::<f64>::zeros((rays, samples, 3));

    for r in 0..rays {
        // Recompute transmittances and weights for this ray.
        let mut trans = vec![0.0f64; samples + 1];
        trans[0] = 1.0;
        let mut w = vec![0.0f64; samples];
        let mut opacity = 0.0;
        for s in 0..samples {
            let alpha = 1.0 - (-sigma[[r, s]] * delta[[r, s]]).exp();
            w[s] = trans[s] * alpha;
            opacity += w[s];
            trans[s + 1] = trans[s] * (1.0 - alpha);
        }
        let depth = value[[r, 3]];
        let g_color = [grad[[r, 0]], grad[[r, 1]], grad[[r, 2]]];
        let g_depth = grad[[r, 3]];
        let g_opacity = grad[[r, 4]];
        let denom = opacity.max(DEPTH_EPS);
        let depth_live = opacity > DEPTH_EPS;

        // dL/dw_i, including depth normalization.
        let mut g_w = vec![0.0f64; samples];
        for s in 0..samples {
            let mut g = g_opacity;
            for c in 0..3 {
                g += g_color[c] * rgb[[r, s, c]];
                grad_rgb[[r, s, c]] = g_color[c] * w[s];
            }
            let depth_term = if depth_live {
                (t[[r, s]] - depth) / denom
            } else {
                t[[r, s]] / denom
            };
            g += g_depth * depth_term;
            g_w[s] = g;
        }

        // dL/dq_k for q_k = sigma_k * delta_k:
        //   dw_i/dq_k = -w_i (k < i), T_{k+1} (k = i), 0 (k > i)
        //   dT_end/dq_k = -T_end.
        let g_bg: f64 = match background {
            Some(bg) => (0..3).map(|c| g_color[c] * bg[c]).sum(),
            None => 0.0,
        };
        let mut suffix = 0.0f64; // sum_{i > k} g_w[i] * w[i]
        for k in (0..samples).rev() {
            let g_q = g_w[k] * trans[k + 1] - suffix - g_bg * trans[samples];
            grad_sigma[[r, k]] = g_q * delta[[r, k]];
            suffix += g_w[k] * w[k];
        }
    }
    vec![grad_sigma.into_dyn(), grad_rgb.into_dyn()]
}

/// Sampling configuration for patch and image renders.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            n_coarse: 64,
            n_fine: 128,
        }
    }
}

/// Coarse and fine renders of the same patch; both participate in every loss.
pub struct RenderedPair {
    pub coarse: RenderedPatch,
    pub fine: RenderedPatch,
}

/// Render a strided patch through the coarse/fine field pair.
///
/// `rng = None` selects deterministic quadrature (midpoint bins and stratified
/// inverse-CDF nodes); pass an rng for training renders.
#[allow(clippy::too_many_arguments)]
pub fn render_patch(
    tape: &Tape,
    coarse_field: &FieldVars,
    fine_field: &FieldVars,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    patch: &PixelPatch,
    bounds: (f64, f64),
    config: &RenderConfig,
    background: Option<[f64; 3]>,
    mut rng: Option<&mut ChaCha20Rng>,
) -> Result<RenderedPair> {
    let rays: Vec<Ray> = patch
        .coords()
        .map(|(u, v)| generate_ray(intr, pose, (u as f64, v as f64), bounds))
        .collect::<Result<_>>()?;

    let mut coarse_samples: Vec<RaySamples> = Vec::with_capacity(rays.len());
    for ray in &rays {
        coarse_samples.push(match rng.as_deref_mut() {
            Some(r) => stratified_sample(ray, config.n_coarse, r)?,
            None => midpoint_sample(ray, config.n_coarse)?,
        });
    }

    let (coarse_patch, coarse_weights) = render_level(
        tape,
        coarse_field,
        &rays,
        &coarse_samples,
        background,
    )?;

    let mut fine_samples: Vec<RaySamples> = Vec::with_capacity(rays.len());
    for (i, ray) in rays.iter().enumerate() {
        fine_samples.push(importance_resample(
            coarse_weights.row(i).as_slice().unwrap(),
            &coarse_samples[i],
            ray,
            config.n_fine,
            rng.as_deref_mut(),
        )?);
    }

    let (fine_patch, _) = render_level(tape, fine_field, &rays, &fine_samples, background)?;

    Ok(RenderedPair {
        coarse: coarse_patch,
        fine: fine_patch,
    })
}

fn render_level(
    tape: &Tape,
    field: &FieldVars,
    rays: &[Ray],
    samples: &[RaySamples],
    background: Option<[f64; 3]>,
) -> Result<(RenderedPatch, Array2<f64>)> {
    let n_rays = rays.len();
    let per_ray = samples[0].len();
    debug_assert!(samples.iter().all(|s| s.len() == per_ray));
    let total = n_rays * per_ray;

    let mut positions = Array2::zeros((total, 3));
    let mut directions = Array2::zeros((total, 3));
    let mut t = Array2::zeros((n_rays, per_ray));
    let mut delta = Array2::zeros((n_rays, per_ray));
    for (i, (ray, s)) in rays.iter().zip(samples).enumerate() {
        for (j, (&tj, &dj)) in s.t.iter().zip(&s.deltas).enumerate() {
            let row = i * per_ray + j;
            let p = ray.point_at(tj);
            positions[[row, 0]] = p.x;
            positions[[row, 1]] = p.y;
            positions[[row, 2]] = p.z;
            directions[[row, 0]] = ray.direction.x;
            directions[[row, 1]] = ray.direction.y;
            directions[[row, 2]] = ray.direction.z;
            t[[i, j]] = tj;
            delta[[i, j]] = dj;
        }
    }

    let outputs = field.query(tape, &positions, &directions)?;
    let sigma = tape.reshape(outputs.sigma, &[n_rays, per_ray]);
    let rgb = tape.reshape(outputs.rgb, &[n_rays, per_ray, 3]);
    let (patch, weights) = composite_batch(tape, sigma, rgb, t, delta, background);
    Ok((patch, weights))
}

/// Mean over rays of the squared L2 color error.
pub fn pixel_loss(tape: &Tape, rendered: Var, target: &Array2<f64>) -> Result<Var> {
    let shape = tape.shape(rendered);
    if shape != [target.nrows(), target.ncols()] {
        return Err(Error::Validation(format!(
            "rendered shape {shape:?} vs target {:?}",
            (target.nrows(), target.ncols())
        )));
    }
    let rays = target.nrows() as f64;
    let target = tape.constant(target.clone().into_dyn());
    let diff = tape.sub(rendered, target);
    let sq = tape.mul(diff, diff);
    Ok(tape.mul_scalar(tape.sum_all(sq), 1.0 / rays))
}
