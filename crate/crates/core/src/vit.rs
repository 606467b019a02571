//! Frozen vision-transformer feature extractor (ViT-S/16 layout). The global
//! token of the final layer is the structure descriptor compared across
//! views. Weights are consumed from a safetensors file; nothing here is ever
//! trained.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::semantic::{FeatureExtractor, EXTRACTOR_INPUT};
use crate::tensorfile::{read_tensors, write_tensors, TensorFile};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-6;
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitConfig {
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl VitConfig {
    /// ViT-S/16: 384-dim, 12 blocks, 6 heads.
    pub fn small_16() -> Self {
        VitConfig {
            patch: 16,
            dim: 384,
            depth: 12,
            heads: 6,
            mlp_hidden: 1536,
        }
    }

    /// Down-scaled layout for tests.
    pub fn tiny() -> Self {
        VitConfig {
            patch: 112,
            dim: 16,
            depth: 2,
            heads: 2,
            mlp_hidden: 32,
        }
    }

    pub fn tokens(&self) -> usize {
        let side = EXTRACTOR_INPUT / self.patch;
        side * side
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1_w: ArrayD<f64>,
    norm1_b: ArrayD<f64>,
    qkv_w: ArrayD<f64>,
    qkv_b: ArrayD<f64>,
    proj_w: ArrayD<f64>,
    proj_b: ArrayD<f64>,
    norm2_w: ArrayD<f64>,
    norm2_b: ArrayD<f64>,
    fc1_w: ArrayD<f64>,
    fc1_b: ArrayD<f64>,
    fc2_w: ArrayD<f64>,
    fc2_b: ArrayD<f64>,
}

/// Frozen transformer weights. Linear weights use `(fan_in, fan_out)` layout.
#[derive(Debug, Clone)]
pub struct VitExtractor {
    config: VitConfig,
    cls_token: ArrayD<f64>,
    pos_embed: ArrayD<f64>,
    patch_w: ArrayD<f64>,
    patch_b: ArrayD<f64>,
    blocks: Vec<Block>,
    norm_w: ArrayD<f64>,
    norm_b: ArrayD<f64>,
}

impl VitExtractor {
    /// Randomly initialized extractor (deterministic per seed). Frozen random
    /// features are a usable stand-in when pretrained weights are absent.
    pub fn random(config: VitConfig, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut t = |shape: &[usize]| {
            let fan_in = shape[0].max(1) as f64;
            let bound = 1.0 / fan_in.sqrt();
            ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound))
        };
        let d = config.dim;
        let blocks = (0..config.depth)
            .map(|_| Block {
                norm1_w: ArrayD::from_elem(IxDyn(&[d]), 1.0),
                norm1_b: ArrayD::zeros(IxDyn(&[d])),
                qkv_w: t(&[d, 3 * d]),
                qkv_b: ArrayD::zeros(IxDyn(&[3 * d])),
                proj_w: t(&[d, d]),
                proj_b: ArrayD::zeros(IxDyn(&[d])),
                norm2_w: ArrayD::from_elem(IxDyn(&[d]), 1.0),
                norm2_b: ArrayD::zeros(IxDyn(&[d])),
                fc1_w: t(&[d, config.mlp_hidden]),
                fc1_b: ArrayD::zeros(IxDyn(&[config.mlp_hidden])),
                fc2_w: t(&[config.mlp_hidden, d]),
                fc2_b: ArrayD::zeros(IxDyn(&[d])),
            })
            .collect();
        VitExtractor {
            cls_token: t(&[1, d]),
            pos_embed: t(&[config.tokens() + 1, d]),
            patch_w: t(&[d, 3, config.patch, config.patch]),
            patch_b: ArrayD::zeros(IxDyn(&[1, d, 1, 1])),
            blocks,
            norm_w: ArrayD::from_elem(IxDyn(&[d]), 1.0),
            norm_b: ArrayD::zeros(IxDyn(&[d])),
            config,
        }
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    pub fn named_params(&self) -> Vec<(String, &ArrayD<f64>)> {
        let mut out = vec![
            ("cls_token".to_string(), &self.cls_token),
            ("pos_embed".to_string(), &self.pos_embed),
            ("patch_embed.weight".to_string(), &self.patch_w),
            ("patch_embed.bias".to_string(), &self.patch_b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, tensor) in [
                ("norm1.weight", &b.norm1_w),
                ("norm1.bias", &b.norm1_b),
                ("attn.qkv.weight", &b.qkv_w),
                ("attn.qkv.bias", &b.qkv_b),
                ("attn.proj.weight", &b.proj_w),
                ("attn.proj.bias", &b.proj_b),
                ("norm2.weight", &b.norm2_w),
                ("norm2.bias", &b.norm2_b),
                ("mlp.fc1.weight", &b.fc1_w),
                ("mlp.fc1.bias", &b.fc1_b),
                ("mlp.fc2.weight", &b.fc2_w),
                ("mlp.fc2.bias", &b.fc2_b),
            ] {
                out.push((format!("blocks.{i}.{suffix}"), tensor));
            }
        }
        out.push(("norm.weight".to_string(), &self.norm_w));
        out.push(("norm.bias".to_string(), &self.norm_b));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named = self.named_params();
        let refs: Vec<(String, &ArrayD<f64>)> = named.into_iter().collect();
        let mut metadata = std::collections::BTreeMap::new();
        metadata.insert(
            "config".to_string(),
            serde_json::to_string(&self.config).unwrap(),
        );
        metadata.insert("format".to_string(), "vit-extractor".to_string());
        write_tensors(path, &refs, &metadata)
    }

    /// Load extractor weights from a safetensors file. Canonical names are
    /// tried first, then the common per-projection transformer layout (fused
    /// from separate query/key/value matrices, transposed from `(out, in)`).
    pub fn load(path: &Path, config: VitConfig) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Init(format!(
                "extractor weights not found at {}; download them with `monoray fetch-weights` \
                 or point `extractor_weights` at an existing file",
                path.display()
            )));
        }
        let file = read_tensors(path)?;
        if file.tensors.contains_key("cls_token") {
            Self::from_canonical(&file, config)
        } else {
            Self::from_split_qkv(&file, config, path)
        }
    }

    fn from_canonical(file: &TensorFile, config: VitConfig) -> Result<Self> {
        let mut proto = VitExtractor::random(config, 0);
        let take = |name: &str| file.require(name).cloned();
        proto.cls_token = take("cls_token")?;
        proto.pos_embed = take("pos_embed")?;
        proto.patch_w = take("patch_embed.weight")?;
        proto.patch_b = take("patch_embed.bias")?;
        for (i, b) in proto.blocks.iter_mut().enumerate() {
            b.norm1_w = take(&format!("blocks.{i}.norm1.weight"))?;
            b.norm1_b = take(&format!("blocks.{i}.norm1.bias"))?;
            b.qkv_w = take(&format!("blocks.{i}.attn.qkv.weight"))?;
            b.qkv_b = take(&format!("blocks.{i}.attn.qkv.bias"))?;
            b.proj_w = take(&format!("blocks.{i}.attn.proj.weight"))?;
            b.proj_b = take(&format!("blocks.{i}.attn.proj.bias"))?;
            b.norm2_w = take(&format!("blocks.{i}.norm2.weight"))?;
            b.norm2_b = take(&format!("blocks.{i}.norm2.bias"))?;
            b.fc1_w = take(&format!("blocks.{i}.mlp.fc1.weight"))?;
            b.fc1_b = take(&format!("blocks.{i}.mlp.fc1.bias"))?;
            b.fc2_w = take(&format!("blocks.{i}.mlp.fc2.weight"))?;
            b.fc2_b = take(&format!("blocks.{i}.mlp.fc2.bias"))?;
        }
        proto.norm_w = take("norm.weight")?;
        proto.norm_b = take("norm.bias")?;
        proto.validate()?;
        Ok(proto)
    }

    fn from_split_qkv(file: &TensorFile, config: VitConfig, path: &Path) -> Result<Self> {
        // Accept hub-style exports, with or without a leading model prefix.
        let pick = |suffixes: &[String]| -> Result<ArrayD<f64>> {
            for (name, tensor) in &file.tensors {
                if suffixes.iter().any(|s| name == s || name.ends_with(&format!(".{s}"))) {
                    return Ok(tensor.clone());
                }
            }
            Err(Error::ingestion(
                path,
                format!("no tensor matching any of {suffixes:?}"),
            ))
        };
        let d = config.dim;
        let transpose = |w: ArrayD<f64>| -> ArrayD<f64> {
            w.view()
                .permuted_axes(IxDyn(&[1, 0]))
                .as_standard_layout()
                .to_owned()
        };

        let mut proto = VitExtractor::random(config, 0);
        proto.cls_token = pick(&["embeddings.cls_token".into()])?
            .to_shape(IxDyn(&[1, d]))
            .map_err(|e| Error::ingestion(path, format!("cls_token: {e}")))?
            .to_owned();
        proto.pos_embed = pick(&["embeddings.position_embeddings".into()])?
            .to_shape(IxDyn(&[config.tokens() + 1, d]))
            .map_err(|e| Error::ingestion(path, format!("pos_embed: {e}")))?
            .to_owned();
        proto.patch_w = pick(&["embeddings.patch_embeddings.projection.weight".into()])?;
        proto.patch_b = pick(&["embeddings.patch_embeddings.projection.bias".into()])?
            .to_shape(IxDyn(&[1, d, 1, 1]))
            .map_err(|e| Error::ingestion(path, format!("patch bias: {e}")))?
            .to_owned();
        for (i, b) in proto.blocks.iter_mut().enumerate() {
            let layer = format!("encoder.layer.{i}");
            b.norm1_w = pick(&[format!("{layer}.layernorm_before.weight")])?;
            b.norm1_b = pick(&[format!("{layer}.layernorm_before.bias")])?;
            let q = transpose(pick(&[format!("{layer}.attention.attention.query.weight")])?);
            let k = transpose(pick(&[format!("{layer}.attention.attention.key.weight")])?);
            let v = transpose(pick(&[format!("{layer}.attention.attention.value.weight")])?);
            let mut qkv = ArrayD::zeros(IxDyn(&[d, 3 * d]));
            for (j, part) in [q, k, v].iter().enumerate() {
                qkv.slice_mut(ndarray::s![.., j * d..(j + 1) * d])
                    .assign(&part.view().into_dimensionality::<ndarray::Ix2>().unwrap());
            }
            b.qkv_w = qkv;
            let qb = pick(&[format!("{layer}.attention.attention.query.bias")])?;
            let kb = pick(&[format!("{layer}.attention.attention.key.bias")])?;
            let vb = pick(&[format!("{layer}.attention.attention.value.bias")])?;
            let mut qkv_b = ArrayD::zeros(IxDyn(&[3 * d]));
            for (j, part) in [qb, kb, vb].iter().enumerate() {
                qkv_b.slice_mut(ndarray::s![j * d..(j + 1) * d]).assign(part);
            }
            b.qkv_b = qkv_b;
            b.proj_w = transpose(pick(&[format!("{layer}.attention.output.dense.weight")])?);
            b.proj_b = pick(&[format!("{layer}.attention.output.dense.bias")])?;
            b.norm2_w = pick(&[format!("{layer}.layernorm_after.weight")])?;
            b.norm2_b = pick(&[format!("{layer}.layernorm_after.bias")])?;
            b.fc1_w = transpose(pick(&[format!("{layer}.intermediate.dense.weight")])?);
            b.fc1_b = pick(&[format!("{layer}.intermediate.dense.bias")])?;
            b.fc2_w = transpose(pick(&[format!("{layer}.output.dense.weight")])?);
            b.fc2_b = pick(&[format!("{layer}.output.dense.bias")])?;
        }
        proto.norm_w = pick(&["layernorm.weight".into()])?;
        proto.norm_b = pick(&["layernorm.bias".into()])?;
        proto.validate()?;
        Ok(proto)
    }

    fn validate(&self) -> Result<()> {
        let d = self.config.dim;
        let checks = [
            (self.cls_token.shape() == [1, d], "cls_token"),
            (
                self.pos_embed.shape() == [self.config.tokens() + 1, d],
                "pos_embed",
            ),
            (
                self.patch_w.shape() == [d, 3, self.config.patch, self.config.patch],
                "patch_embed.weight",
            ),
        ];
        for (ok, name) in checks {
            if !ok {
                return Err(Error::Validation(format!(
                    "extractor tensor `{name}` has the wrong shape for {:?}",
                    self.config
                )));
            }
        }
        Ok(())
    }

    fn layer_norm(tape: &Tape, x: Var, w: &ArrayD<f64>, b: &ArrayD<f64>) -> Var {
        let mean = tape.mean_axis_keep(x, 1);
        let centered = tape.sub(x, mean);
        let var = tape.mean_axis_keep(tape.mul(centered, centered), 1);
        let normed = tape.div(centered, tape.sqrt(tape.add_scalar(var, LN_EPS)));
        let w = tape.constant(w.to_shape(IxDyn(&[1, w.len()])).unwrap().to_owned());
        let b = tape.constant(b.to_shape(IxDyn(&[1, b.len()])).unwrap().to_owned());
        tape.add(tape.mul(normed, w), b)
    }

    fn forward_cls(&self, tape: &Tape, input: Var) -> Result<Var> {
        let cfg = &self.config;
        let d = cfg.dim;
        let tokens = cfg.tokens();
        let heads = cfg.heads;
        let head_dim = d / heads;

        // Patch embedding as a strided convolution.
        let shape = tape.shape(input);
        let batched = tape.reshape(input, &[1, shape[0], shape[1], shape[2]]);
        let patch_w = tape.constant(self.patch_w.clone());
        let patch_b = tape.constant(self.patch_b.clone());
        let embedded = tape.add(tape.conv2d(batched, patch_w, cfg.patch, 0), patch_b);
        // (1, d, s, s) -> (d, tokens) -> (tokens, d)
        let flat = tape.reshape(embedded, &[d, tokens]);
        let mut x = tape.permute(flat, &[1, 0]);

        let cls = tape.constant(self.cls_token.clone());
        x = tape.concat(0, &[cls, x]);
        x = tape.add(x, tape.constant(self.pos_embed.clone()));

        let n = tokens + 1;
        for block in &self.blocks {
            let normed = Self::layer_norm(tape, x, &block.norm1_w, &block.norm1_b);
            let qkv = tape.add(
                tape.matmul(normed, tape.constant(block.qkv_w.clone())),
                tape.constant(block.qkv_b.to_shape(IxDyn(&[1, 3 * d])).unwrap().to_owned()),
            );
            // (n, 3d) -> three (heads, n, head_dim) tensors.
            let split = |tape: &Tape, offset: usize| {
                let part = tape.narrow(qkv, 1, offset * d, d);
                let shaped = tape.reshape(part, &[n, heads, head_dim]);
                tape.permute(shaped, &[1, 0, 2])
            };
            let q = split(tape, 0);
            let k = split(tape, 1);
            let v = split(tape, 2);
            let kt = tape.permute(k, &[0, 2, 1]);
            let scores = tape.mul_scalar(tape.bmm(q, kt), 1.0 / (head_dim as f64).sqrt());
            let attn = tape.softmax(scores, 2);
            let ctx = tape.bmm(attn, v); // (heads, n, head_dim)
            let merged = tape.reshape(tape.permute(ctx, &[1, 0, 2]), &[n, d]);
            let projected = tape.add(
                tape.matmul(merged, tape.constant(block.proj_w.clone())),
                tape.constant(block.proj_b.to_shape(IxDyn(&[1, d])).unwrap().to_owned()),
            );
            x = tape.add(x, projected);

            let normed = Self::layer_norm(tape, x, &block.norm2_w, &block.norm2_b);
            let h = tape.gelu(tape.add(
                tape.matmul(normed, tape.constant(block.fc1_w.clone())),
                tape.constant(
                    block
                        .fc1_b
                        .to_shape(IxDyn(&[1, cfg.mlp_hidden]))
                        .unwrap()
                        .to_owned(),
                ),
            ));
            let out = tape.add(
                tape.matmul(h, tape.constant(block.fc2_w.clone())),
                tape.constant(block.fc2_b.to_shape(IxDyn(&[1, d])).unwrap().to_owned()),
            );
            x = tape.add(x, out);
        }
        let x = Self::layer_norm(tape, x, &self.norm_w, &self.norm_b);
        let cls_row = tape.narrow(x, 0, 0, 1);
        Ok(tape.reshape(cls_row, &[d]))
    }
}

impl FeatureExtractor for VitExtractor {
    fn name(&self) -> &str {
        "vit-cls"
    }

    fn feature_dim(&self) -> usize {
        self.config.dim
    }

    fn normalization(&self) -> Option<([f64; 3], [f64; 3])> {
        Some((IMAGENET_MEAN, IMAGENET_STD))
    }

    fn extract(&self, tape: &Tape, input: Var) -> Result<Var> {
        let shape = tape.shape(input);
        if shape != [3, EXTRACTOR_INPUT, EXTRACTOR_INPUT] {
            return Err(Error::Validation(format!(
                "extractor expects (3, {EXTRACTOR_INPUT}, {EXTRACTOR_INPUT}), got {shape:?}"
            )));
        }
        self.forward_cls(tape, input)
    }
}
