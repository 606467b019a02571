//! Coordinate network mapping position + view direction to density and color.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::{Error, Result};

/// Frequency encoding `(sin(2^k pi v), cos(2^k pi v))` for `k = 0..l`,
/// emitted per input component (component-major). With `include_input` the
/// raw components are prepended.
pub fn positional_encode(values: &[f64], l: usize, include_input: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len() * (2 * l + usize::from(include_input)));
    if include_input {
        out.extend_from_slice(values);
    }
    for &v in values {
        for k in 0..l {
            let arg = (1u64 << k) as f64 * std::f64::consts::PI * v;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    out
}

pub fn encoded_len(dim: usize, l: usize, include_input: bool) -> usize {
    dim * (2 * l + usize::from(include_input))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityActivation {
    /// Smooth positive map; the default for stable density gradients.
    Softplus,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub layers: usize,
    pub hidden: usize,
    /// Trunk layers whose input is concatenated with the position encoding.
    pub skip_layers: Vec<usize>,
    pub dir_hidden: usize,
    pub l_pos: usize,
    pub l_dir: usize,
    pub include_input: bool,
    pub density: DensityActivation,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            layers: 8,
            hidden: 256,
            skip_layers: vec![4],
            dir_hidden: 128,
            l_pos: 10,
            l_dir: 4,
            include_input: true,
            density: DensityActivation::Softplus,
        }
    }
}

impl FieldConfig {
    /// Downsized field for desk-scale experiments.
    pub fn reduced() -> Self {
        FieldConfig {
            layers: 4,
            hidden: 128,
            skip_layers: vec![2],
            dir_hidden: 64,
            ..FieldConfig::default()
        }
    }

    pub fn pos_dim(&self) -> usize {
        encoded_len(3, self.l_pos, self.include_input)
    }

    pub fn dir_dim(&self) -> usize {
        encoded_len(3, self.l_dir, self.include_input)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    /// `(fan_in, fan_out)` layout; inputs are row vectors.
    pub weight: ArrayD<f64>,
    pub bias: ArrayD<f64>,
}

impl LinearParams {
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha20Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = ArrayD::from_shape_fn(IxDyn(&[fan_in, fan_out]), |_| {
            rng.gen_range(-bound..bound)
        });
        let bias = ArrayD::from_shape_fn(IxDyn(&[1, fan_out]), |_| rng.gen_range(-bound..bound));
        LinearParams { weight, bias }
    }
}

/// A linear layer inserted on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn insert(tape: &Tape, params: &LinearParams, trainable: bool) -> Self {
        LinearVars {
            weight: tape.leaf(params.weight.clone(), trainable),
            bias: tape.leaf(params.bias.clone(), trainable),
        }
    }

    pub fn forward(&self, tape: &Tape, x: Var) -> Var {
        tape.add(tape.matmul(x, self.weight), self.bias)
    }
}

/// Learnable radiance field parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceField {
    pub config: FieldConfig,
    trunk: Vec<LinearParams>,
    sigma_head: LinearParams,
    feature: LinearParams,
    dir_branch: LinearParams,
    rgb_head: LinearParams,
}

impl RadianceField {
    pub fn init(config: FieldConfig, rng: &mut ChaCha20Rng) -> Self {
        let pos_dim = config.pos_dim();
        let dir_dim = config.dir_dim();
        let mut trunk = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let fan_in = if i == 0 {
                pos_dim
            } else if config.skip_layers.contains(&i) {
                config.hidden + pos_dim
            } else {
                config.hidden
            };
            trunk.push(LinearParams::init(fan_in, config.hidden, rng));
        }
        let sigma_head = LinearParams::init(config.hidden, 1, rng);
        let feature = LinearParams::init(config.hidden, config.hidden, rng);
        let dir_branch = LinearParams::init(config.hidden + dir_dim, config.dir_hidden, rng);
        let rgb_head = LinearParams::init(config.dir_hidden, 3, rng);
        RadianceField {
            config,
            trunk,
            sigma_head,
            feature,
            dir_branch,
            rgb_head,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &ArrayD<f64>)> {
        let mut out = Vec::new();
        for (i, layer) in self.trunk.iter().enumerate() {
            out.push((format!("trunk.{i}.weight"), &layer.weight));
            out.push((format!("trunk.{i}.bias"), &layer.bias));
        }
        for (name, layer) in [
            ("sigma_head", &self.sigma_head),
            ("feature", &self.feature),
            ("dir_branch", &self.dir_branch),
            ("rgb_head", &self.rgb_head),
        ] {
            out.push((format!("{name}.weight"), &layer.weight));
            out.push((format!("{name}.bias"), &layer.bias));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut ArrayD<f64>)> {
        let mut out = Vec::new();
        for (i, layer) in self.trunk.iter_mut().enumerate() {
            out.push((format!("trunk.{i}.weight"), &mut layer.weight));
            out.push((format!("trunk.{i}.bias"), &mut layer.bias));
        }
        for (name, layer) in [
            ("sigma_head", &mut self.sigma_head),
            ("feature", &mut self.feature),
            ("dir_branch", &mut self.dir_branch),
            ("rgb_head", &mut self.rgb_head),
        ] {
            out.push((format!("{name}.weight"), &mut layer.weight));
            out.push((format!("{name}.bias"), &mut layer.bias));
        }
        out
    }

    /// Insert all parameters on a tape. The returned handle queries the field;
    /// its `vars()` order matches `named_params()`.
    pub fn insert(&self, tape: &Tape, trainable: bool) -> FieldVars {
        FieldVars {
            config: self.config.clone(),
            trunk: self
                .trunk
                .iter()
                .map(|l| LinearVars::insert(tape, l, trainable))
                .collect(),
            sigma_head: LinearVars::insert(tape, &self.sigma_head, trainable),
            feature: LinearVars::insert(tape, &self.feature, trainable),
            dir_branch: LinearVars::insert(tape, &self.dir_branch, trainable),
            rgb_head: LinearVars::insert(tape, &self.rgb_head, trainable),
        }
    }
}

/// Tape-resident field; produced by [`RadianceField::insert`].
pub struct FieldVars {
    config: FieldConfig,
    trunk: Vec<LinearVars>,
    sigma_head: LinearVars,
    feature: LinearVars,
    dir_branch: LinearVars,
    rgb_head: LinearVars,
}

/// Field outputs for a batch of samples.
#[derive(Debug, Clone, Copy)]
pub struct FieldOutputs {
    /// `(N, 1)` non-negative densities.
    pub sigma: Var,
    /// `(N, 3)` colors in `[0, 1]`.
    pub rgb: Var,
}

impl FieldVars {
    /// Parameter vars in `named_params()` order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.trunk {
            out.push(l.weight);
            out.push(l.bias);
        }
        for l in [&self.sigma_head, &self.feature, &self.dir_branch, &self.rgb_head] {
            out.push(l.weight);
            out.push(l.bias);
        }
        out
    }

    /// Evaluate the field at `positions` with unit `directions` (both `(N, 3)`).
    /// Density depends only on position; color on position and direction.
    pub fn query(
        &self,
        tape: &Tape,
        positions: &Array2<f64>,
        directions: &Array2<f64>,
    ) -> Result<FieldOutputs> {
        let n = positions.nrows();
        if directions.nrows() != n {
            return Err(Error::Validation(format!(
                "positions ({n}) and directions ({}) disagree",
                directions.nrows()
            )));
        }
        if positions.iter().any(|v| !v.is_finite())
            || directions.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Validation("non-finite field inputs".into()));
        }
        for row in directions.rows() {
            let norm = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!(
                    "direction norm {norm} is not unit"
                )));
            }
        }

        let cfg = &self.config;
        let pos_enc = encode_batch(positions, cfg.l_pos, cfg.include_input);
        let dir_enc = encode_batch(directions, cfg.l_dir, cfg.include_input);
        let pos_enc = tape.constant(pos_enc.into_dyn());
        let dir_enc = tape.constant(dir_enc.into_dyn());

        let mut h = pos_enc;
        for (i, layer) in self.trunk.iter().enumerate() {
            if i > 0 && cfg.skip_layers.contains(&i) {
                h = tape.concat(1, &[h, pos_enc]);
            }
            h = tape.relu(layer.forward(tape, h));
        }
        let sigma_raw = self.sigma_head.forward(tape, h);
        let sigma = match cfg.density {
            DensityActivation::Softplus => tape.softplus(sigma_raw),
            DensityActivation::Relu => tape.relu(sigma_raw),
        };
        let feat = self.feature.forward(tape, h);
        let dir_in = tape.concat(1, &[feat, dir_enc]);
        let dir_h = tape.relu(self.dir_branch.forward(tape, dir_in));
        let rgb = tape.sigmoid(self.rgb_head.forward(tape, dir_h));
        Ok(FieldOutputs { sigma, rgb })
    }
}

fn encode_batch(values: &Array2<f64>, l: usize, include_input: bool) -> Array2<f64> {
    let n = values.nrows();
    let dim = encoded_len(values.ncols(), l, include_input);
    let mut out = Array2::zeros((n, dim));
    for (i, row) in values.rows().into_iter().enumerate() {
        let enc = positional_encode(row.as_slice().unwrap(), l, include_input);
        out.row_mut(i)
            .assign(&ndarray::ArrayView1::from(enc.as_slice()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd::max_relative_error;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};

    fn unit_rows(raw: Array2<f64>) -> Array2<f64> {
        let mut out = raw;
        for mut row in out.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.mapv_inplace(|v| v / norm);
        }
        out
    }

    #[test]
    fn encoding_closed_forms() {
        assert_eq!(positional_encode(&[0.0], 2, false), vec![0.0, 1.0, 0.0, 1.0]);
        let enc = positional_encode(&[0.5], 1, false);
        assert!((enc[0] - 1.0).abs() < 1e-12); // sin(pi/2)
        assert!(enc[1].abs() < 1e-12); // cos(pi/2)
        assert_eq!(positional_encode(&[0.3, -0.7], 0, false), Vec::<f64>::new());
        assert_eq!(positional_encode(&[0.3, -0.7], 0, true), vec![0.3, -0.7]);
        assert_eq!(positional_encode(&[1.0, 2.0, 3.0], 4, true).len(), encoded_len(3, 4, true));
    }

    #[test]
    fn fresh_field_outputs_are_in_range() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let field = RadianceField::init(FieldConfig::reduced(), &mut rng);
        let tape = Tape::new();
        let vars = field.insert(&tape, false);

        let n = 10_000;
        let mut gen = ChaCha20Rng::seed_from_u64(1);
        let positions = Array2::from_shape_fn((n, 3), |_| gen.gen_range(-3.0..3.0));
        let directions = unit_rows(Array2::from_shape_fn((n, 3), |_| gen.gen_range(-1.0..1.0)));
        let out = vars.query(&tape, &positions, &directions).unwrap();
        let sigma = tape.value(out.sigma);
        let rgb = tape.value(out.rgb);
        assert!(sigma.iter().all(|&s| s.is_finite() && s >= 0.0));
        assert!(rgb.iter().all(|&c| c.is_finite() && (0.0..=1.0).contains(&c)));
    }

    #[test]
    fn density_ignores_view_direction() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let field = RadianceField::init(FieldConfig::reduced(), &mut rng);
        let tape = Tape::new();
        let vars = field.insert(&tape, false);

        let positions = arr2(&[[0.1, -0.4, 1.2], [2.0, 0.0, -0.5]]);
        let d1 = unit_rows(arr2(&[[1.0, 0.2, -0.3], [0.0, 1.0, 0.0]]));
        let d2 = unit_rows(arr2(&[[-0.5, 0.1, 0.9], [1.0, -1.0, 0.4]]));
        let a = vars.query(&tape, &positions, &d1).unwrap();
        let b = vars.query(&tape, &positions, &d2).unwrap();
        assert_eq!(tape.value(a.sigma), tape.value(b.sigma));
        assert_ne!(tape.value(a.rgb), tape.value(b.rgb));
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let field = RadianceField::init(FieldConfig::reduced(), &mut rng);
        let tape = Tape::new();
        let vars = field.insert(&tape, false);
        let positions = arr2(&[[f64::NAN, 0.0, 0.0]]);
        let directions = arr2(&[[1.0, 0.0, 0.0]]);
        assert!(vars.query(&tape, &positions, &directions).is_err());
        let positions = arr2(&[[0.0, 0.0, 0.0]]);
        let not_unit = arr2(&[[2.0, 0.0, 0.0]]);
        assert!(vars.query(&tape, &positions, &not_unit).is_err());
    }

    #[test]
    fn parameter_gradients_match_finite_differences_on_toy_field() {
        let config = FieldConfig {
            layers: 2,
            hidden: 8,
            skip_layers: vec![1],
            dir_hidden: 4,
            l_pos: 2,
            l_dir: 1,
            include_input: true,
            density: DensityActivation::Softplus,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let field = RadianceField::init(config, &mut rng);

        let positions = arr2(&[
            [0.2, -0.3, 0.5],
            [1.0, 0.4, -0.2],
            [-0.6, 0.1, 0.9],
            [0.0, 0.0, 1.5],
        ]);
        let directions = unit_rows(arr2(&[
            [1.0, 0.1, 0.0],
            [0.0, 1.0, 0.2],
            [-0.4, 0.2, 1.0],
            [0.3, -0.3, 0.9],
        ]));
        let mut wrng = ChaCha20Rng::seed_from_u64(6);
        let w_sigma = ArrayD::from_shape_fn(IxDyn(&[4, 1]), |_| wrng.gen_range(-1.0..1.0));
        let w_rgb = ArrayD::from_shape_fn(IxDyn(&[4, 3]), |_| wrng.gen_range(-1.0..1.0));

        let inputs: Vec<ArrayD<f64>> = field
            .named_params()
            .into_iter()
            .map(|(_, p)| p.clone())
            .collect();
        let config = field.config.clone();

        let worst = max_relative_error(
            &inputs,
            |tape, vars| {
                // Wire the supplied leaves (base or perturbed) straight into a
                // field graph; named_params order matches the var order.
                let field_vars = FieldVars {
                    config: config.clone(),
                    trunk: vec![
                        LinearVars { weight: vars[0], bias: vars[1] },
                        LinearVars { weight: vars[2], bias: vars[3] },
                    ],
                    sigma_head: LinearVars { weight: vars[4], bias: vars[5] },
                    feature: LinearVars { weight: vars[6], bias: vars[7] },
                    dir_branch: LinearVars { weight: vars[8], bias: vars[9] },
                    rgb_head: LinearVars { weight: vars[10], bias: vars[11] },
                };
                let out = field_vars.query(tape, &positions, &directions).unwrap();
                let ws = tape.constant(w_sigma.clone());
                let wr = tape.constant(w_rgb.clone());
                tape.add(
                    tape.sum_all(tape.mul(out.sigma, ws)),
                    tape.sum_all(tape.mul(out.rgb, wr)),
                )
            },
            1e-5,
        );
        assert!(worst < 1e-4, "max rel err {worst:.3e}");
    }
}
