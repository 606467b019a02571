//! Semantic pseudo labels: a convolutional patch critic trained with hinge
//! losses under differentiable augmentation, and a frozen global feature
//! extractor for structure consistency between views.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::{Error, Result};

const IN_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.2;

/// Side length expected by the global feature extractors.
pub const EXTRACTOR_INPUT: usize = 224;

// ---------------------------------------------------------------------------
// Patch critic

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: ArrayD<f64>,
    pub bias: ArrayD<f64>,
}

impl ConvParams {
    fn init(c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha20Rng) -> Self {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        ConvParams {
            weight: ArrayD::from_shape_fn(IxDyn(&[c_out, c_in, k, k]), |_| {
                rng.gen_range(-bound..bound)
            }),
            bias: ArrayD::from_shape_fn(IxDyn(&[1, c_out, 1, 1]), |_| rng.gen_range(-bound..bound)),
        }
    }
}

/// Convolutional patch critic: kernel-4 stride-2 convolutions with instance
/// normalization on the middle layers and leaky activations, reduced to one
/// scalar per patch by a spatial mean over the final 1-channel map.
///
/// The cascade depth adapts to the patch size (each convolution halves the
/// spatial extent; layers stop before the map collapses, capped at five), so
/// re-initialization at a stride boundary rebuilds the critic for the current
/// patch resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub rows: usize,
    pub cols: usize,
    layers: Vec<ConvParams>,
    /// Instance norm applies to all but the first and last layer.
    normalized: Vec<bool>,
}

fn critic_depth(rows: usize, cols: usize) -> usize {
    let mut dim = rows.min(cols);
    let mut layers = 0;
    while dim >= 2 && layers < 5 {
        dim = (dim + 2 - 4) / 2 + 1;
        layers += 1;
    }
    layers.max(1)
}

impl Discriminator {
    pub fn init(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Result<Self> {
        if rows < 2 || cols < 2 {
            return Err(Error::Domain(format!(
                "critic input {rows}x{cols} is too small"
            )));
        }
        let depth = critic_depth(rows, cols);
        let widths = [64usize, 128, 256, 512];
        let mut channels = vec![3usize];
        channels.extend(widths.iter().take(depth - 1));
        channels.push(1);

        let mut layers = Vec::with_capacity(depth);
        let mut normalized = Vec::with_capacity(depth);
        for i in 0..depth {
            layers.push(ConvParams::init(channels[i], channels[i + 1], 4, rng));
            normalized.push(i != 0 && i != depth - 1);
        }
        Ok(Discriminator {
            rows,
            cols,
            layers,
            normalized,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn named_params(&self) -> Vec<(String, &ArrayD<f64>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("conv.{i}.weight"), &l.weight));
            out.push((format!("conv.{i}.bias"), &l.bias));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut ArrayD<f64>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("conv.{i}.weight"), &mut l.weight));
            out.push((format!("conv.{i}.bias"), &mut l.bias));
        }
        out
    }

    pub fn insert(&self, tape: &Tape, trainable: bool) -> DiscriminatorVars {
        DiscriminatorVars {
            rows: self.rows,
            cols: self.cols,
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        tape.leaf(l.weight.clone(), trainable),
                        tape.leaf(l.bias.clone(), trainable),
                    )
                })
                .collect(),
            normalized: self.normalized.clone(),
        }
    }
}

/// Fresh critic parameters for the given patch size, deterministic per seed.
/// The caller resets the critic optimizer state alongside.
pub fn reinit_discriminator(rows: usize, cols: usize, seed: u64) -> Result<Discriminator> {
    use rand::SeedableRng;
    Discriminator::init(rows, cols, &mut ChaCha20Rng::seed_from_u64(seed))
}

pub struct DiscriminatorVars {
    rows: usize,
    cols: usize,
    layers: Vec<(Var, Var)>,
    normalized: Vec<bool>,
}

impl DiscriminatorVars {
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Critic scores for a `(N, 3, H, W)` batch of patches; returns `(N,)`.
    pub fn forward(&self, tape: &Tape, patches: Var) -> Result<Var> {
        let shape = tape.shape(patches);
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.rows || shape[3] != self.cols {
            return Err(Error::Validation(format!(
                "critic expects (N, 3, {}, {}), got {shape:?}",
                self.rows, self.cols
            )));
        }
        let n = shape[0];
        let mut h = patches;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.add(tape.conv2d(h, w, 2, 1), b);
            if self.normalized[i] {
                h = instance_norm(tape, h);
            }
            if i != last {
                h = tape.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        // (N, 1, h', w') -> spatial mean -> (N,)
        let pooled = tape.mean_axis_keep(tape.mean_axis_keep(h, 3), 2);
        Ok(tape.reshape(pooled, &[n]))
    }
}

/// Per-channel, per-instance normalization over the spatial extent.
fn instance_norm(tape: &Tape, x: Var) -> Var {
    let mean = tape.mean_axis_keep(tape.mean_axis_keep(x, 3), 2);
    let centered = tape.sub(x, mean);
    let var = tape.mean_axis_keep(tape.mean_axis_keep(tape.mul(centered, centered), 3), 2);
    tape.div(centered, tape.sqrt(tape.add_scalar(var, IN_EPS)))
}

// ---------------------------------------------------------------------------
// Differentiable augmentation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentKind {
    Color,
    Translation,
    Cutout,
}

impl AugmentKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "color" => Ok(AugmentKind::Color),
            "translation" => Ok(AugmentKind::Translation),
            "cutout" => Ok(AugmentKind::Cutout),
            other => Err(Error::Config(format!("unknown augmentation kind `{other}`"))),
        }
    }
}

/// Ordered augmentation pipeline with draw magnitudes. Draws are independent
/// per sample; the same policy is applied to real and fake critic inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPolicy {
    pub kinds: Vec<AugmentKind>,
    pub brightness: f64,
    pub saturation_max: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    /// Translation limit as a fraction of the patch extent.
    pub translation_frac: f64,
    /// Cutout extent as a fraction of the patch extent.
    pub cutout_frac: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            kinds: vec![AugmentKind::Color, AugmentKind::Translation, AugmentKind::Cutout],
            brightness: 0.25,
            saturation_max: 2.0,
            contrast_min: 0.5,
            contrast_max: 1.5,
            translation_frac: 0.125,
            cutout_frac: 0.5,
        }
    }
}

impl AugmentationPolicy {
    pub fn none() -> Self {
        AugmentationPolicy {
            kinds: vec![],
            ..AugmentationPolicy::default()
        }
    }

    pub fn from_names(names: &[String]) -> Result<Self> {
        let kinds = names
            .iter()
            .map(|n| AugmentKind::parse(n))
            .collect::<Result<Vec<_>>>()?;
        Ok(AugmentationPolicy {
            kinds,
            ..AugmentationPolicy::default()
        })
    }
}

/// Brightness shift, saturation and contrast scaling, clamped back to [0, 1].
pub fn color_augment(tape: &Tape, patch: Var, delta: f64, saturation: f64, contrast: f64) -> Var {
    let mut x = tape.add_scalar(patch, delta);
    // Saturation: per-pixel channel mean.
    let channel_mean = tape.mean_axis_keep(x, 0);
    x = tape.add(channel_mean, tape.mul_scalar(tape.sub(x, channel_mean), saturation));
    // Contrast: global mean.
    let global_mean = tape.mean_all(x);
    x = tape.add(global_mean, tape.mul_scalar(tape.sub(x, global_mean), contrast));
    tape.clamp(x, 0.0, 1.0)
}

/// Integer translation with zero fill.
pub fn translate_augment(tape: &Tape, patch: Var, dx: isize, dy: isize) -> Var {
    tape.shift2d(patch, dy, dx)
}

/// Zero out a `size_h x size_w` window whose top-left corner is `(ox, oy)`
/// (may extend past the borders).
pub fn cutout_augment(
    tape: &Tape,
    patch: Var,
    ox: isize,
    oy: isize,
    size_h: usize,
    size_w: usize,
) -> Var {
    let shape = tape.shape(patch);
    let (h, w) = (shape[1], shape[2]);
    let mut mask = ArrayD::from_elem(IxDyn(&[1, h, w]), 1.0);
    for y in oy.max(0)..(oy + size_h as isize).min(h as isize) {
        for x in ox.max(0)..(ox + size_w as isize).min(w as isize) {
            mask[[0, y as usize, x as usize]] = 0.0;
        }
    }
    tape.mul(patch, tape.constant(mask))
}

/// Apply each policy element with fresh draws from `rng`. The input is a
/// `(3, H, W)` patch in `[0, 1]`; the output stays differentiable w.r.t. the
/// input pixels.
pub fn diff_augment(
    tape: &Tape,
    patch: Var,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha20Rng,
) -> Var {
    let shape = tape.shape(patch);
    assert_eq!(shape.len(), 3, "diff_augment expects (3, H, W)");
    let (h, w) = (shape[1], shape[2]);
    let mut x = patch;
    for kind in &policy.kinds {
        x = match kind {
            AugmentKind::Color => {
                let delta = rng.gen_range(-policy.brightness..=policy.brightness);
                let saturation = rng.gen_range(0.0..=policy.saturation_max);
                let contrast = rng.gen_range(policy.contrast_min..=policy.contrast_max);
                color_augment(tape, x, delta, saturation, contrast)
            }
            AugmentKind::Translation => {
                let mx = (w as f64 * policy.translation_frac).floor() as isize;
                let my = (h as f64 * policy.translation_frac).floor() as isize;
                let dx = rng.gen_range(-mx..=mx);
                let dy = rng.gen_range(-my..=my);
                translate_augment(tape, x, dx, dy)
            }
            AugmentKind::Cutout => {
                let size_h = (h as f64 * policy.cutout_frac).floor() as usize;
                let size_w = (w as f64 * policy.cutout_frac).floor() as usize;
                let oy = rng.gen_range(-(size_h as isize) / 2..=(h as isize - size_h as isize / 2));
                let ox = rng.gen_range(-(size_w as isize) / 2..=(w as isize - size_w as isize / 2));
                cutout_augment(tape, x, ox, oy, size_h, size_w)
            }
        };
    }
    x
}

// ---------------------------------------------------------------------------
// Hinge objectives

/// Critic objective: `E[max(0, 1 - D(real))] + E[max(0, 1 + D(fake))]`.
/// Inputs are `(N,)` critic scores; the caller detaches fake scores from the
/// generator branch.
pub fn hinge_d_loss(tape: &Tape, d_real: Var, d_fake: Var) -> Var {
    let real_term = tape.mean_all(tape.relu(tape.add_scalar(tape.neg(d_real), 1.0)));
    let fake_term = tape.mean_all(tape.relu(tape.add_scalar(d_fake, 1.0)));
    tape.add(real_term, fake_term)
}

/// Generator objective: `E[-D(fake)]`.
pub fn hinge_g_loss(tape: &Tape, d_fake: Var) -> Var {
    tape.neg(tape.mean_all(d_fake))
}

/// Spec-shaped adversarial pair: augments both patches (independent draws),
/// scores them, and returns `(L_D, L_G)` with the critic loss seeing the fake
/// patch detached.
pub fn adversarial_losses(
    tape: &Tape,
    critic: &DiscriminatorVars,
    real: Var,
    fake: Var,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha20Rng,
) -> Result<(Var, Var)> {
    if tape.shape(real) != tape.shape(fake) {
        return Err(Error::Validation(format!(
            "real {:?} and fake {:?} patch shapes differ",
            tape.shape(real),
            tape.shape(fake)
        )));
    }
    let batch = |tape: &Tape, patch: Var| {
        let shape = tape.shape(patch);
        tape.reshape(patch, &[1, shape[0], shape[1], shape[2]])
    };
    let real_aug = batch(tape, diff_augment(tape, real, policy, rng));
    let fake_detached = batch(tape, diff_augment(tape, tape.detach(fake), policy, rng));
    let fake_live = batch(tape, diff_augment(tape, fake, policy, rng));

    let d_real = critic.forward(tape, real_aug)?;
    let d_fake_det = critic.forward(tape, fake_detached)?;
    let d_fake = critic.forward(tape, fake_live)?;
    Ok((
        hinge_d_loss(tape, d_real, d_fake_det),
        hinge_g_loss(tape, d_fake),
    ))
}

// ---------------------------------------------------------------------------
// Global feature distance

/// Frozen global feature extractor. Implementations insert their parameters
/// as tape constants so no gradient ever reaches them; gradients flow only
/// into the input patch.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn feature_dim(&self) -> usize;
    /// Per-channel normalization `(mean, std)` applied after resizing.
    fn normalization(&self) -> Option<([f64; 3], [f64; 3])> {
        None
    }
    /// `input` is `(3, 224, 224)`; returns the `(D,)` global feature.
    fn extract(&self, tape: &Tape, input: Var) -> Result<Var>;
}

/// Deterministic test extractor: the channel-wise mean of its input.
pub struct MeanExtractor;

impl FeatureExtractor for MeanExtractor {
    fn name(&self) -> &str {
        "stub-mean"
    }

    fn feature_dim(&self) -> usize {
        3
    }

    fn extract(&self, tape: &Tape, input: Var) -> Result<Var> {
        let pooled = tape.mean_axis_keep(tape.mean_axis_keep(input, 2), 1);
        Ok(tape.reshape(pooled, &[3]))
    }
}

/// Resize a `(3, H, W)` patch to the extractor input size, normalize, and run
/// the frozen extractor.
pub fn global_feature(
    tape: &Tape,
    extractor: &dyn FeatureExtractor,
    patch: Var,
) -> Result<Var> {
    let shape = tape.shape(patch);
    if shape.len() != 3 || shape[0] != 3 || shape[1] < 2 || shape[2] < 2 {
        return Err(Error::Validation(format!(
            "global_feature expects a (3, >=2, >=2) patch, got {shape:?}"
        )));
    }
    let mut x = tape.resize_bilinear(patch, EXTRACTOR_INPUT, EXTRACTOR_INPUT);
    if let Some((mean, std)) = extractor.normalization() {
        let m = ArrayD::from_shape_fn(IxDyn(&[3, 1, 1]), |ix| mean[ix[0]]);
        let s = ArrayD::from_shape_fn(IxDyn(&[3, 1, 1]), |ix| std[ix[0]]);
        x = tape.div(tape.sub(x, tape.constant(m)), tape.constant(s));
    }
    extractor.extract(tape, x)
}

/// Squared L2 distance between two feature vectors.
pub fn cls_loss(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Validation(format!(
            "feature dims {:?} vs {:?} differ",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    let diff = tape.sub(a, b);
    Ok(tape.sum_all(tape.mul(diff, diff)))
}
