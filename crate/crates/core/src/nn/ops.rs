//! Forward and backward kernels.
//!
//! Every output element is accumulated in one fixed order: bias first, then
//! input channel, kernel row, kernel column (or input feature for dense
//! layers). Output channels never share partial sums, so computing only the
//! first `p` filters of a layer yields exactly the same bits as the first `p`
//! channels of the full layer.

use crate::error::{Error, Result};
use crate::nn::gemm::{gemm_acc, Mat};
use crate::nn::layer::{Activation, Conv2d, Dense, MaxPool2d};
use crate::tensor::Tensor;

/// Fused multiply-add dot product over 32 independent lanes, combined
/// pairwise.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let split = n - n % LANES;
    let mut acc = [0.0f64; LANES];
    for (ca, cb) in a[..split].chunks_exact(LANES).zip(b[..split].chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] = ca[l].mul_add(cb[l], acc[l]);
        }
    }
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            acc[l] += acc[l + width];
        }
    }
    let mut s = acc[0];
    for i in split..n {
        s = a[i].mul_add(b[i], s);
    }
    s
}

const LANES: usize = 32;

/// Range of output positions `o` whose input position `o*stride + k - pad`
/// falls inside `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o*stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // o*stride + k - pad <= len - 1
    let hi = if len + pad < k + 1 { 0 } else { ((len + pad - k - 1) / stride + 1).min(out_len) };
    (lo.min(hi), hi)
}

pub(crate) fn apply_activation(act: Activation, data: &mut [f64]) {
    match act {
        Activation::None => {}
        Activation::Relu => {
            for v in data.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        Activation::Softmax => softmax_in_place(data),
    }
}

pub(crate) fn softmax_in_place(data: &mut [f64]) {
    let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in data.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in data.iter_mut() {
        *v /= sum;
    }
}

/// Unrolls `input` into a `[C_in*kh*kw, H'*W']` matrix; row `(c*kh + ky)*kw + kx`
/// holds the input value under that kernel tap for every output position,
/// zero where the tap falls in the padding.
fn im2col(input: &Tensor, conv: &Conv2d, ho: usize, wo: usize) -> Vec<f64> {
    let (c_in, h, w) = (input.dims()[0], input.dims()[1], input.dims()[2]);
    let (kh, kw, s, pad) = (conv.kernel_h, conv.kernel_w, conv.stride, conv.padding);
    let x = input.data();
    let positions = ho * wo;
    let mut col = vec![0.0; c_in * kh * kw * positions];
    for c in 0..c_in {
        let xin = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            let (y_lo, y_hi) = valid_range(ho, h, ky, s, pad);
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut col[row * positions..(row + 1) * positions];
                let (x_lo, x_hi) = valid_range(wo, w, kx, s, pad);
                if x_lo >= x_hi {
                    continue;
                }
                for oy in y_lo..y_hi {
                    let iy = oy * s + ky - pad;
                    let ix0 = x_lo * s + kx - pad;
                    let out_row = &mut dst[oy * wo + x_lo..oy * wo + x_hi];
                    if s == 1 {
                        out_row.copy_from_slice(&xin[iy * w + ix0..iy * w + ix0 + (x_hi - x_lo)]);
                    } else {
                        for (j, v) in out_row.iter_mut().enumerate() {
                            *v = xin[iy * w + ix0 + j * s];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a `[C_in*kh*kw, H'*W']` column gradient back onto the input.
fn col2im(col: &[f64], conv: &Conv2d, input_dims: &[usize], ho: usize, wo: usize) -> Vec<f64> {
    let (c_in, h, w) = (input_dims[0], input_dims[1], input_dims[2]);
    let (kh, kw, s, pad) = (conv.kernel_h, conv.kernel_w, conv.stride, conv.padding);
    let positions = ho * wo;
    let mut grad = vec![0.0; c_in * h * w];
    for c in 0..c_in {
        let gin = &mut grad[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            let (y_lo, y_hi) = valid_range(ho, h, ky, s, pad);
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &col[row * positions..(row + 1) * positions];
                let (x_lo, x_hi) = valid_range(wo, w, kx, s, pad);
                if x_lo >= x_hi {
                    continue;
                }
                for oy in y_lo..y_hi {
                    let iy = oy * s + ky - pad;
                    let ix0 = x_lo * s + kx - pad;
                    let g_row = &src[oy * wo + x_lo..oy * wo + x_hi];
                    for (j, &g) in g_row.iter().enumerate() {
                        gin[iy * w + ix0 + j * s] += g;
                    }
                }
            }
        }
    }
    grad
}

fn conv_accumulate(input: &Tensor, conv: &Conv2d, out_dims: &[usize]) -> Vec<f64> {
    let (ho, wo) = (out_dims[1], out_dims[2]);
    let positions = ho * wo;
    let taps = conv.in_channels * conv.kernel_h * conv.kernel_w;
    let col = im2col(input, conv, ho, wo);
    let mut out = vec![0.0; conv.out_channels * positions];
    for (plane, &b) in out.chunks_exact_mut(positions).zip(conv.biases.data()) {
        plane.fill(b);
    }
    gemm_acc(
        conv.out_channels,
        positions,
        taps,
        Mat::row_major(conv.weights.data(), taps),
        &col,
        positions,
        &mut out,
        positions,
    );
    out
}

pub fn conv2d_forward(input: &Tensor, conv: &Conv2d) -> Result<Tensor> {
    let out_dims = conv.output_dims(input.dims())?;
    let mut out = conv_accumulate(input, conv, &out_dims);
    apply_activation(conv.activation, &mut out);
    Ok(Tensor::from_parts(out_dims, out))
}

/// Returns the pooled map and, per output element, the flat input index that
/// held the maximum (first in scan order on ties).
pub fn maxpool_forward(input: &Tensor, pool: &MaxPool2d) -> Result<(Tensor, Vec<usize>)> {
    let out_dims = pool.output_dims(input.dims())?;
    let (c, h, w) = (input.dims()[0], input.dims()[1], input.dims()[2]);
    let (ho, wo) = (out_dims[1], out_dims[2]);
    let x = input.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut argmax = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + (oy * pool.stride) * w + ox * pool.stride;
                for dy in 0..pool.size {
                    for dx in 0..pool.size {
                        let idx = base + (oy * pool.stride + dy) * w + ox * pool.stride + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(out_dims, out), argmax))
}

fn dense_accumulate(input: &Tensor, dense: &Dense) -> Result<Vec<f64>> {
    if input.len() != dense.in_features {
        return Err(Error::shape(format!("dense expects {} features, got {:?}", dense.in_features, input.dims())));
    }
    let x = input.data();
    let b = dense.biases.data();
    Ok(dense.weights.data().chunks_exact(dense.in_features).zip(b).map(|(row, &bias)| bias + dot(row, x)).collect())
}

pub fn dense_forward(input: &Tensor, dense: &Dense) -> Result<Tensor> {
    let mut out = dense_accumulate(input, dense)?;
    apply_activation(dense.activation, &mut out);
    Ok(Tensor::from_parts(vec![dense.units], out))
}

/// Gradient of a conv layer with respect to its parameters (accumulated into
/// `grad_w`/`grad_b`) and, if requested, its input.
///
/// `grad_out` is the gradient with respect to the pre-activation output.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    conv: &Conv2d,
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    let out_dims = conv.output_dims(input.dims()).expect("backward called with a shape that passed forward");
    let (ho, wo) = (out_dims[1], out_dims[2]);
    let positions = ho * wo;
    let taps = conv.in_channels * conv.kernel_h * conv.kernel_w;
    let col = im2col(input, conv, ho, wo);

    for (gb, g_plane) in grad_b.iter_mut().zip(grad_out.chunks_exact(positions)) {
        *gb += g_plane.iter().sum::<f64>();
    }

    // dW^T[t, o] = sum_p col[t, p] * dOut^T[p, o]
    let mut g_t = vec![0.0; positions * conv.out_channels];
    for (o, g_plane) in grad_out.chunks_exact(positions).enumerate() {
        for (p, &g) in g_plane.iter().enumerate() {
            g_t[p * conv.out_channels + o] = g;
        }
    }
    let mut dw_t = vec![0.0; taps * conv.out_channels];
    gemm_acc(
        taps,
        conv.out_channels,
        positions,
        Mat::row_major(&col, positions),
        &g_t,
        conv.out_channels,
        &mut dw_t,
        conv.out_channels,
    );
    for (t, row) in dw_t.chunks_exact(conv.out_channels).enumerate() {
        for (o, &v) in row.iter().enumerate() {
            grad_w[o * taps + t] += v;
        }
    }

    if !want_input_grad {
        return None;
    }
    // dCol[t, p] = sum_o W[o, t] * dOut[o, p]
    let mut grad_col = vec![0.0; taps * positions];
    gemm_acc(
        taps,
        positions,
        conv.out_channels,
        Mat::transposed(conv.weights.data(), taps),
        grad_out,
        positions,
        &mut grad_col,
        positions,
    );
    Some(col2im(&grad_col, conv, input.dims(), ho, wo))
}

pub(crate) fn maxpool_backward(input_len: usize, argmax: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let mut grad_in = vec![0.0; input_len];
    for (&idx, &g) in argmax.iter().zip(grad_out) {
        grad_in[idx] += g;
    }
    grad_in
}

/// Pre-activation dense outputs for a batch, one GEMM over all samples.
/// Sums run in a different order than [`dense_forward`], so results can
/// differ from it in the last bits.
pub(crate) fn dense_logits_batch(inputs: &[&Tensor], dense: &Dense) -> Result<Vec<Vec<f64>>> {
    let n = inputs.len();
    let fan_in = dense.in_features;
    // X^T[j, s]
    let mut x_t = vec![0.0; fan_in * n];
    for (s, x) in inputs.iter().enumerate() {
        if x.len() != fan_in {
            return Err(Error::shape(format!("dense expects {fan_in} features, got {:?}", x.dims())));
        }
        for (j, &v) in x.data().iter().enumerate() {
            x_t[j * n + s] = v;
        }
    }
    let mut y_t = Vec::with_capacity(dense.units * n);
    for &b in dense.biases.data() {
        y_t.extend(std::iter::repeat(b).take(n));
    }
    gemm_acc(dense.units, n, fan_in, Mat::row_major(dense.weights.data(), fan_in), &x_t, n, &mut y_t, n);
    Ok((0..n).map(|s| (0..dense.units).map(|u| y_t[u * n + s]).collect()).collect())
}

/// Batched dense gradient. `grad_out[s]` is sample `s`'s gradient with
/// respect to the pre-activation output; parameter gradients are summed over
/// samples in order.
pub(crate) fn dense_backward_batch(
    inputs: &[&Tensor],
    dense: &Dense,
    grad_out: &[Vec<f64>],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    want_input_grad: bool,
) -> Vec<Vec<f64>> {
    let n = inputs.len();
    let (units, fan_in) = (dense.units, dense.in_features);
    let g: Vec<f64> = grad_out.iter().flatten().copied().collect();
    let x: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    for gs in grad_out {
        for (b, v) in grad_b.iter_mut().zip(gs) {
            *b += v;
        }
    }
    // dW[u, j] += sum_s G[s, u] * X[s, j]
    gemm_acc(units, fan_in, n, Mat::transposed(&g, units), &x, fan_in, grad_w, fan_in);
    if !want_input_grad {
        return Vec::new();
    }
    // dX[s, j] = sum_u G[s, u] * W[u, j]
    let mut gx = vec![0.0; n * fan_in];
    gemm_acc(n, fan_in, units, Mat::row_major(&g, units), dense.weights.data(), fan_in, &mut gx, fan_in);
    gx.chunks_exact(fan_in).map(<[f64]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn conv_with(weights: Vec<f64>, dims: [usize; 4], bias: Vec<f64>, stride: usize, padding: usize) -> Conv2d {
        let mut c = Conv2d::new(dims[1], dims[0], (dims[2], dims[3]), stride, padding, Activation::None).unwrap();
        c.weights = Tensor::new(dims.to_vec(), weights).unwrap();
        c.biases = Tensor::new(vec![dims[0]], bias).unwrap();
        c
    }

    /// Six nested loops, one output element at a time.
    fn naive_conv(input: &Tensor, conv: &Conv2d) -> Tensor {
        let (c_in, h, w) = (input.dims()[0], input.dims()[1], input.dims()[2]);
        let ho = (h + 2 * conv.padding - conv.kernel_h) / conv.stride + 1;
        let wo = (w + 2 * conv.padding - conv.kernel_w) / conv.stride + 1;
        let mut out = Vec::new();
        for o in 0..conv.out_channels {
            for y in 0..ho {
                for x in 0..wo {
                    let mut acc = conv.biases.data()[o];
                    for c in 0..c_in {
                        for ky in 0..conv.kernel_h {
                            for kx in 0..conv.kernel_w {
                                let iy = (y * conv.stride + ky) as isize - conv.padding as isize;
                                let ix = (x * conv.stride + kx) as isize - conv.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let wv =
                                    conv.weights.data()[((o * c_in + c) * conv.kernel_h + ky) * conv.kernel_w + kx];
                                acc = wv.mul_add(input.data()[(c * h + iy as usize) * w + ix as usize], acc);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        Tensor::new(vec![conv.out_channels, ho, wo], out).unwrap()
    }

    fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let conv = conv_with(vec![1.0], [1, 1, 1, 1], vec![0.0], 1, 0);
        let input = Tensor::new(vec![1, 1, 1], vec![5.0]).unwrap();
        assert_eq!(conv2d_forward(&input, &conv).unwrap().data(), &[5.0]);
    }

    #[test]
    fn conv_zero_weights_give_bias() {
        let conv = conv_with(vec![0.0; 2 * 3 * 9], [2, 3, 3, 3], vec![0.25, -1.5], 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_tensor(&mut rng, &[3, 7, 6]);
        let out = conv2d_forward(&input, &conv).unwrap();
        assert_eq!(out.dims(), &[2, 4, 3]);
        let plane = 12;
        assert!(out.data()[..plane].iter().all(|&v| v == 0.25));
        assert!(out.data()[plane..].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn conv_hand_summed_windows() {
        let conv = conv_with(vec![1.0; 4], [1, 1, 2, 2], vec![0.0], 1, 0);
        let input = Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let out = conv2d_forward(&input, &conv).unwrap();
        assert_eq!(out.dims(), &[1, 2, 2]);
        assert_eq!(out.data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv_shape_mismatch_names_both_shapes() {
        let conv = conv_with(vec![0.0; 8], [1, 2, 2, 2], vec![0.0], 1, 0);
        let err = conv2d_forward(&Tensor::zeros(&[3, 4, 4]), &conv).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3, 4, 4]") && msg.contains('2'), "{msg}");
    }

    #[test]
    fn conv_matches_naive_reference_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for case in 0..60 {
            let c_in = rng.random_range(1..4);
            let c_out = rng.random_range(1..5);
            let kh = rng.random_range(1..4);
            let kw = rng.random_range(1..4);
            let stride = rng.random_range(1..4);
            let padding = rng.random_range(0..3);
            let h = rng.random_range(kh.max(1)..9);
            let w = rng.random_range(kw.max(1)..9);
            let mut conv = Conv2d::new(c_in, c_out, (kh, kw), stride, padding, Activation::None).unwrap();
            conv.weights = random_tensor(&mut rng, &[c_out, c_in, kh, kw]);
            conv.biases = random_tensor(&mut rng, &[c_out]);
            let input = random_tensor(&mut rng, &[c_in, h, w]);
            let got = conv2d_forward(&input, &conv).unwrap();
            let want = naive_conv(&input, &conv);
            assert_eq!(got.dims(), want.dims(), "case {case}");
            assert_eq!(got.data(), want.data(), "case {case}");
        }
    }

    #[test]
    fn conv_output_dims_closed_form() {
        for h in 1..10 {
            for k in 1..=h + 2 {
                for stride in 1..4 {
                    for padding in 0..3 {
                        let conv = Conv2d::new(1, 1, (k, k), stride, padding, Activation::None).unwrap();
                        let res = conv.output_dims(&[1, h, h]);
                        if h + 2 * padding < k {
                            assert!(res.is_err());
                        } else {
                            let side = (h + 2 * padding - k) / stride + 1;
                            let input = Tensor::zeros(&[1, h, h]);
                            assert_eq!(res.unwrap(), vec![1, side, side]);
                            assert_eq!(conv2d_forward(&input, &conv).unwrap().dims(), &[1, side, side]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pool_single_window() {
        let pool = MaxPool2d::new(2, 2).unwrap();
        let input = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, arg) = maxpool_forward(&input, &pool).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn pool_constant_field() {
        let pool = MaxPool2d::new(2, 2).unwrap();
        let (out, _) = maxpool_forward(&Tensor::filled(&[2, 6, 6], 0.5), &pool).unwrap();
        assert_eq!(out.dims(), &[2, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn pool_matches_window_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let input = random_tensor(&mut rng, &[1, 4, 4]);
        let (out, _) = maxpool_forward(&input, &MaxPool2d::new(2, 2).unwrap()).unwrap();
        let d = input.data();
        let mut want = Vec::new();
        for (y0, x0) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            let window = [d[y0 * 4 + x0], d[y0 * 4 + x0 + 1], d[(y0 + 1) * 4 + x0], d[(y0 + 1) * 4 + x0 + 1]];
            want.push(window.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
        assert_eq!(out.data(), want.as_slice());
    }

    #[test]
    fn pool_too_small() {
        let pool = MaxPool2d::new(3, 1).unwrap();
        assert!(matches!(maxpool_forward(&Tensor::zeros(&[1, 2, 5]), &pool), Err(Error::Shape(_))));
    }

    fn dense_with(w: Vec<f64>, units: usize, inputs: usize, b: Vec<f64>, act: Activation) -> Dense {
        let mut d = Dense::new(inputs, units, act).unwrap();
        d.weights = Tensor::new(vec![units, inputs], w).unwrap();
        d.biases = Tensor::new(vec![units], b).unwrap();
        d
    }

    #[test]
    fn dense_identity_and_bias() {
        let id = dense_with(vec![1.0, 0.0, 0.0, 1.0], 2, 2, vec![0.0, 0.0], Activation::None);
        let x = Tensor::new(vec![2], vec![0.3, -7.0]).unwrap();
        assert_eq!(dense_forward(&x, &id).unwrap().data(), x.data());
        let zero = dense_with(vec![0.0; 4], 2, 2, vec![1.0, 2.0], Activation::None);
        assert_eq!(dense_forward(&x, &zero).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn dense_hand_dot_product() {
        let d = dense_with(vec![1.0, 1.0, 1.0, -1.0], 2, 2, vec![0.0, 0.0], Activation::None);
        let x = Tensor::new(vec![2], vec![3.0, 2.0]).unwrap();
        assert_eq!(dense_forward(&x, &d).unwrap().data(), &[5.0, 1.0]);
    }

    #[test]
    fn dense_dimension_mismatch() {
        let d = dense_with(vec![0.0; 6], 2, 3, vec![0.0; 2], Activation::None);
        assert!(matches!(dense_forward(&Tensor::zeros(&[2]), &d), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let mut v: Vec<f64> = (0..10).map(|_| rng.random_range(-50.0..50.0)).collect();
            softmax_in_place(&mut v);
            assert!(v.iter().all(|&p| p >= 0.0));
            assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn filter_prefix_is_bit_exact_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut conv = Conv2d::new(3, 6, (3, 3), 1, 1, Activation::Relu).unwrap();
        conv.weights = random_tensor(&mut rng, &[6, 3, 3, 3]);
        conv.biases = random_tensor(&mut rng, &[6]);
        let input = random_tensor(&mut rng, &[3, 9, 9]);
        let full = conv2d_forward(&input, &conv).unwrap();
        for p in 1..=6 {
            let sub = conv2d_forward(&input, &conv.filter_prefix(p).unwrap()).unwrap();
            assert!(sub.bit_eq(&full.channel_slice(0, p).unwrap()));
        }
    }

    #[test]
    fn dot_handles_tails() {
        for n in 0..80 {
            let a: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let b = vec![1.0; n];
            assert_eq!(dot(&a, &b), (n * n.saturating_sub(1) / 2) as f64);
        }
    }
}
