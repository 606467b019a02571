//! Image-shaped tape operations: strided convolution, pooling, resampling.

use ndarray::{ArrayD, IxDyn};

use super::{Tape, Var};

fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold `(C, H, W)` into `(C*kh*kw, H_out*W_out)` with zero padding.
fn im2col(
    input: &ArrayD<f64>,
    sample: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array2<f64> {
    let (c, h, w) = (input.shape()[1], input.shape()[2], input.shape()[3]);
    let (ho, wo) = (
        conv_out_len(h, kh, stride, pad),
        conv_out_len(w, kw, stride, pad),
    );
    let mut col = ndarray::Array2::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * wo + ox]] =
                            input[[sample, ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

fn col2im(
    col: &ndarray::Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array3<f64> {
    let (ho, wo) = (
        conv_out_len(h, kh, stride, pad),
        conv_out_len(w, kw, stride, pad),
    );
    let mut out = ndarray::Array3::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[[ci, iy as usize, ix as usize]] += col[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
    out
}

impl Tape {
    /// 2-D convolution: input `(N, C, H, W)`, weight `(F, C, kh, kw)`.
    /// Bias is added separately by the caller.
    pub fn conv2d(&self, input: Var, weight: Var, stride: usize, pad: usize) -> Var {
        let value = {
            let input_v = self.value(input);
            let weight_v = self.value(weight);
            conv2d_forward(&input_v, &weight_v, stride, pad)
        };
        self.custom_op(
            &[input, weight],
            value,
            Box::new(move |grad, parents, _| {
                conv2d_backward(grad, parents[0], parents[1], stride, pad)
            }),
        )
    }

    /// Average pooling with square window `factor` on a rank-2 `(H, W)` tensor.
    /// Trailing rows/columns that do not fill a window are dropped.
    pub fn avg_pool2d(&self, input: Var, factor: usize) -> Var {
        assert!(factor >= 1);
        self.unary(
            input,
            move |x| {
                let (h, w) = (x.shape()[0], x.shape()[1]);
                let (ho, wo) = (h / factor, w / factor);
                let mut out = ArrayD::zeros(IxDyn(&[ho, wo]));
                let norm = (factor * factor) as f64;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for dy in 0..factor {
                            for dx in 0..factor {
                                acc += x[[oy * factor + dy, ox * factor + dx]];
                            }
                        }
                        out[[oy, ox]] = acc / norm;
                    }
                }
                out
            },
            move |g, x, _| {
                let (h, w) = (x.shape()[0], x.shape()[1]);
                let (ho, wo) = (h / factor, w / factor);
                let norm = (factor * factor) as f64;
                let mut out = ArrayD::zeros(x.raw_dim());
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gv = g[[oy, ox]] / norm;
                        for dy in 0..factor {
                            for dx in 0..factor {
                                out[[oy * factor + dy, ox * factor + dx]] = gv;
                            }
                        }
                    }
                }
                out
            },
        )
    }

    /// Bilinear resize of a `(C, H, W)` tensor (half-pixel centers).
    pub fn resize_bilinear(&self, input: Var, out_h: usize, out_w: usize) -> Var {
        self.unary(
            input,
            move |x| {
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut out = ArrayD::zeros(IxDyn(&[c, out_h, out_w]));
                for oy in 0..out_h {
                    let (y0, y1, wy) = resample_coords(oy, out_h, h);
                    for ox in 0..out_w {
                        let (x0, x1, wx) = resample_coords(ox, out_w, w);
                        for ci in 0..c {
                            let v = (1.0 - wy) * (1.0 - wx) * x[[ci, y0, x0]]
                                + (1.0 - wy) * wx * x[[ci, y0, x1]]
                                + wy * (1.0 - wx) * x[[ci, y1, x0]]
                                + wy * wx * x[[ci, y1, x1]];
                            out[[ci, oy, ox]] = v;
                        }
                    }
                }
                out
            },
            move |g, x, _| {
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut out = ArrayD::zeros(x.raw_dim());
                for oy in 0..out_h {
                    let (y0, y1, wy) = resample_coords(oy, out_h, h);
                    for ox in 0..out_w {
                        let (x0, x1, wx) = resample_coords(ox, out_w, w);
                        for ci in 0..c {
                            let gv = g[[ci, oy, ox]];
                            out[[ci, y0, x0]] += (1.0 - wy) * (1.0 - wx) * gv;
                            out[[ci, y0, x1]] += (1.0 - wy) * wx * gv;
                            out[[ci, y1, x0]] += wy * (1.0 - wx) * gv;
                            out[[ci, y1, x1]] += wy * wx * gv;
                        }
                    }
                }
                out
            },
        )
    }

    /// Integer translation of a `(C, H, W)` tensor with zero fill.
    pub fn shift2d(&self, input: Var, dy: isize, dx: isize) -> Var {
        self.unary(
            input,
            move |x| shift_chw(x, dy, dx),
            move |g, _, _| shift_chw(g, -dy, -dx),
        )
    }
}

fn shift_chw(x: &ArrayD<f64>, dy: isize, dx: isize) -> ArrayD<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = ArrayD::zeros(x.raw_dim());
    for ci in 0..c {
        for y in 0..h {
            let sy = y as isize - dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for xx in 0..w {
                let sx = xx as isize - dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[[ci, y, xx]] = x[[ci, sy as usize, sx as usize]];
            }
        }
    }
    out
}

/// Source interpolation pair for half-pixel-center resampling.
fn resample_coords(out_idx: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((out_idx as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

fn conv2d_forward(
    input: &ArrayD<f64>,
    weight: &ArrayD<f64>,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let (n, _c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (f, cw, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    assert_eq!(input.shape()[1], cw, "conv2d channel mismatch");
    let (ho, wo) = (
        conv_out_len(h, kh, stride, pad),
        conv_out_len(w, kw, stride, pad),
    );
    assert!(ho > 0 && wo > 0, "conv2d output collapsed to zero size");
    let w_mat = weight
        .view()
        .into_shape_with_order((f, cw * kh * kw))
        .unwrap()
        .to_owned();
    let mut out = ArrayD::zeros(IxDyn(&[n, f, ho, wo]));
    for s in 0..n {
        let col = im2col(input, s, kh, kw, stride, pad);
        let res = super::par_matmul(&w_mat, &col);
        let res = res.into_shape_with_order((f, ho, wo)).unwrap();
        out.index_axis_mut(ndarray::Axis(0), s).assign(&res);
    }
    out
}

fn conv2d_backward(
    grad: &ArrayD<f64>,
    input: &ArrayD<f64>,
    weight: &ArrayD<f64>,
    stride: usize,
    pad: usize,
) -> Vec<ArrayD<f64>> {
    let (n, c, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (f, _, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    let (ho, wo) = (
        conv_out_len(h, kh, stride, pad),
        conv_out_len(w, kw, stride, pad),
    );
    let w_mat = weight
        .view()
        .into_shape_with_order((f, c * kh * kw))
        .unwrap()
        .to_owned();
    let mut grad_w = ndarray::Array2::<f64>::zeros((f, c * kh * kw));
    let mut grad_in = ArrayD::zeros(input.raw_dim());
    for s in 0..n {
        let g_mat = grad
            .index_axis(ndarray::Axis(0), s)
            .into_shape_with_order((f, ho * wo))
            .unwrap()
            .to_owned();
        let col = im2col(input, s, kh, kw, stride, pad);
        grad_w += &super::par_matmul(&g_mat, &col.t().to_owned());
        let g_col = super::par_matmul(&w_mat.t().to_owned(), &g_mat);
        let g_im = col2im(&g_col, c, h, w, kh, kw, stride, pad);
        grad_in.index_axis_mut(ndarray::Axis(0), s).assign(&g_im);
    }
    vec![
        grad_in,
        grad_w
            .into_shape_with_order((f, c, kh, kw))
            .unwrap()
            .into_dyn(),
    ]
}

#[cfg(test)]
mod tests {
    use super::super::fd::check_gradients;
    use super::super::Tape;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rand_array(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv2d_known_kernel() {
        let tape = Tape::new();
        // 1x1x3x3 input, single 2x2 sum kernel, stride 1, no padding.
        let input = tape.constant(
            ArrayD::from_shape_vec(
                IxDyn(&[1, 1, 3, 3]),
                vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
            )
            .unwrap(),
        );
        let weight = tape.constant(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 1.0));
        let out = tape.conv2d(input, weight, 1, 0);
        let v = tape.value(out);
        assert_eq!(v.shape(), &[1, 1, 2, 2]);
        assert_eq!(v[[0, 0, 0, 0]], 12.0); // 1+2+4+5
        assert_eq!(v[[0, 0, 1, 1]], 28.0); // 5+6+8+9
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let inputs = vec![rand_array(&[2, 2, 6, 5], 1), rand_array(&[3, 2, 4, 4], 2)];
        check_gradients(
            &inputs,
            |tape, vars| {
                let y = tape.conv2d(vars[0], vars[1], 2, 1);
                tape.sum_all(tape.mul(y, y))
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn avg_pool_halves_and_back() {
        let tape = Tape::new();
        let x = tape.leaf(
            ArrayD::from_shape_vec(IxDyn(&[2, 4]), vec![1.0, 3.0, 5.0, 7.0, 2.0, 4.0, 6.0, 8.0])
                .unwrap(),
            true,
        );
        let pooled = tape.avg_pool2d(x, 2);
        assert_eq!(tape.value(pooled).as_slice().unwrap(), &[2.5, 6.5]);
        let loss = tape.sum_all(pooled);
        let grads = tape.backward(loss);
        assert!(grads.get(x).unwrap().iter().all(|&g| (g - 0.25).abs() < 1e-12));
    }

    #[test]
    fn pool_resize_shift_gradients_match_finite_differences() {
        let inputs = vec![rand_array(&[6, 6], 3), rand_array(&[2, 5, 4], 4)];
        check_gradients(
            &inputs,
            |tape, vars| {
                let pooled = tape.avg_pool2d(vars[0], 2);
                let a = tape.sum_all(tape.mul(pooled, pooled));
                let resized = tape.resize_bilinear(vars[1], 7, 9);
                let shifted = tape.shift2d(vars[1], 1, -2);
                let b = tape.sum_all(tape.mul(resized, resized));
                let c = tape.sum_all(shifted);
                tape.add(a, tape.add(b, c))
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn resize_identity_when_sizes_match() {
        let tape = Tape::new();
        let x = tape.constant(rand_array(&[3, 8, 8], 5));
        let y = tape.resize_bilinear(x, 8, 8);
        assert_eq!(tape.value(x), tape.value(y));
    }

    #[test]
    fn shift_moves_pixels_with_zero_fill() {
        let tape = Tape::new();
        let x = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 2, 3]), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        );
        let y = tape.shift2d(x, 1, 2);
        let v = tape.value(y);
        // Row 0 vacated, row 1 = old row 0 shifted right by 2.
        assert_eq!(v[[0, 0, 0]], 0.0);
        assert_eq!(v[[0, 1, 0]], 0.0);
        assert_eq!(v[[0, 1, 1]], 0.0);
        assert_eq!(v[[0, 1, 2]], 1.0);
    }
}
