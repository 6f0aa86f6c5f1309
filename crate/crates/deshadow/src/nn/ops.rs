//! Forward/backward kernels: 3x3 same-padding convolution, SiLU, 2x average
//! pooling, 2x nearest upsampling, channel concat, dense layers, and
//! per-channel bias injection.

use super::{Scalar, Tensor3};

/// 3x3 convolution with zero padding 1 and stride 1.
/// Weights are `[co][ci][ky][kx]` flattened; bias is `[co]`.
pub fn conv3x3<T: Scalar>(input: &Tensor3<T>, weight: &[T], bias: &[T], co_n: usize) -> Tensor3<T> {
    let (ci_n, h, w) = (input.ch, input.h, input.w);
    debug_assert_eq!(weight.len(), co_n * ci_n * 9);
    debug_assert_eq!(bias.len(), co_n);
    let hw = h * w;
    let mut out = vec![T::zero(); co_n * hw];
    for co in 0..co_n {
        let out_ch = &mut out[co * hw..(co + 1) * hw];
        out_ch.fill(bias[co]);
        for ci in 0..ci_n {
            let in_ch = input.plane(ci);
            let wbase = (co * ci_n + ci) * 9;
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                for kx in 0..3usize {
                    let dx = kx as isize - 1;
                    let wv = weight[wbase + ky * 3 + kx];
                    let y0 = (-dy).max(0) as usize;
                    let y1 = ((h as isize - dy).min(h as isize)) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((w as isize - dx).min(w as isize)) as usize;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let src = &in_ch[sy * w..sy * w + w];
                        let dst = &mut out_ch[y * w..y * w + w];
                        for x in x0..x1 {
                            let sx = (x as isize + dx) as usize;
                            dst[x] = dst[x] + wv * src[sx];
                        }
                    }
                }
            }
        }
    }
    Tensor3::from_data(co_n, h, w, out)
}

/// Backward pass of [`conv3x3`]. Accumulates weight/bias grads into the given
/// slices and returns the input gradient.
pub fn conv3x3_backward<T: Scalar>(
    input: &Tensor3<T>,
    weight: &[T],
    d_out: &Tensor3<T>,
    d_weight: &mut [T],
    d_bias: &mut [T],
) -> Tensor3<T> {
    let (ci_n, h, w) = (input.ch, input.h, input.w);
    let co_n = d_out.ch;
    let hw = h * w;
    let mut d_in = vec![T::zero(); ci_n * hw];

    for co in 0..co_n {
        let dout_ch = d_out.plane(co);
        d_bias[co] = d_bias[co] + dout_ch.iter().copied().sum::<T>();
        for ci in 0..ci_n {
            let in_ch = input.plane(ci);
            let din_ch = &mut d_in[ci * hw..(ci + 1) * hw];
            let wbase = (co * ci_n + ci) * 9;
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                for kx in 0..3usize {
                    let dx = kx as isize - 1;
                    let wv = weight[wbase + ky * 3 + kx];
                    let y0 = (-dy).max(0) as usize;
                    let y1 = ((h as isize - dy).min(h as isize)) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((w as isize - dx).min(w as isize)) as usize;
                    let mut wgrad = T::zero();
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let src = &in_ch[sy * w..sy * w + w];
                        let din = &mut din_ch[sy * w..sy * w + w];
                        let dout = &dout_ch[y * w..y * w + w];
                        for x in x0..x1 {
                            let sx = (x as isize + dx) as usize;
                            wgrad = wgrad + dout[x] * src[sx];
                            din[sx] = din[sx] + wv * dout[x];
                        }
                    }
                    d_weight[wbase + ky * 3 + kx] = d_weight[wbase + ky * 3 + kx] + wgrad;
                }
            }
        }
    }
    Tensor3::from_data(ci_n, h, w, d_in)
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// SiLU activation `x * sigmoid(x)`.
pub fn silu<T: Scalar>(x: &Tensor3<T>) -> Tensor3<T> {
    Tensor3 {
        ch: x.ch,
        h: x.h,
        w: x.w,
        data: x.data.iter().map(|&v| v * sigmoid(v)).collect(),
    }
}

/// SiLU backward given the pre-activation input.
pub fn silu_backward<T: Scalar>(pre: &Tensor3<T>, d_out: &Tensor3<T>) -> Tensor3<T> {
    Tensor3 {
        ch: pre.ch,
        h: pre.h,
        w: pre.w,
        data: pre
            .data
            .iter()
            .zip(&d_out.data)
            .map(|(&x, &g)| {
                let s = sigmoid(x);
                g * s * (T::one() + x * (T::one() - s))
            })
            .collect(),
    }
}

/// 2x2 average pooling; spatial dimensions must be even.
pub fn avg_pool2<T: Scalar>(x: &Tensor3<T>) -> Tensor3<T> {
    assert!(x.h % 2 == 0 && x.w % 2 == 0, "pooling needs even dims");
    let (oh, ow) = (x.h / 2, x.w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = Tensor3::zeros(x.ch, oh, ow);
    for c in 0..x.ch {
        let src = x.plane(c);
        let dst = &mut out.data[c * oh * ow..(c + 1) * oh * ow];
        for y in 0..oh {
            for xo in 0..ow {
                let i = 2 * y * x.w + 2 * xo;
                dst[y * ow + xo] =
                    (src[i] + src[i + 1] + src[i + x.w] + src[i + x.w + 1]) * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Scalar>(d_out: &Tensor3<T>, in_h: usize, in_w: usize) -> Tensor3<T> {
    let quarter = T::from_f64(0.25);
    let mut d_in = Tensor3::zeros(d_out.ch, in_h, in_w);
    for c in 0..d_out.ch {
        let src = d_out.plane(c);
        let dst = &mut d_in.data[c * in_h * in_w..(c + 1) * in_h * in_w];
        for y in 0..d_out.h {
            for x in 0..d_out.w {
                let g = src[y * d_out.w + x] * quarter;
                let i = 2 * y * in_w + 2 * x;
                dst[i] = dst[i] + g;
                dst[i + 1] = dst[i + 1] + g;
                dst[i + in_w] = dst[i + in_w] + g;
                dst[i + in_w + 1] = dst[i + in_w + 1] + g;
            }
        }
    }
    d_in
}

/// 2x nearest-neighbor upsampling.
pub fn upsample_nearest2<T: Scalar>(x: &Tensor3<T>) -> Tensor3<T> {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut out = Tensor3::zeros(x.ch, oh, ow);
    for c in 0..x.ch {
        let src = x.plane(c);
        let dst = &mut out.data[c * oh * ow..(c + 1) * oh * ow];
        for y in 0..oh {
            let sy = y / 2;
            for xo in 0..ow {
                dst[y * ow + xo] = src[sy * x.w + xo / 2];
            }
        }
    }
    out
}

pub fn upsample_nearest2_backward<T: Scalar>(d_out: &Tensor3<T>) -> Tensor3<T> {
    let (ih, iw) = (d_out.h / 2, d_out.w / 2);
    let mut d_in = Tensor3::zeros(d_out.ch, ih, iw);
    for c in 0..d_out.ch {
        let src = d_out.plane(c);
        let dst = &mut d_in.data[c * ih * iw..(c + 1) * ih * iw];
        for y in 0..d_out.h {
            for x in 0..d_out.w {
                let i = (y / 2) * iw + x / 2;
                dst[i] = dst[i] + src[y * d_out.w + x];
            }
        }
    }
    d_in
}

/// Channel concatenation `[a; b]`.
pub fn concat_channels<T: Scalar>(a: &Tensor3<T>, b: &Tensor3<T>) -> Tensor3<T> {
    assert!(a.h == b.h && a.w == b.w);
    let mut data = Vec::with_capacity((a.ch + b.ch) * a.h * a.w);
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor3::from_data(a.ch + b.ch, a.h, a.w, data)
}

/// Splits a concat gradient back into the two operands' gradients.
pub fn split_channels<T: Scalar>(d: &Tensor3<T>, a_ch: usize) -> (Tensor3<T>, Tensor3<T>) {
    let hw = d.h * d.w;
    let a = Tensor3::from_data(a_ch, d.h, d.w, d.data[..a_ch * hw].to_vec());
    let b = Tensor3::from_data(d.ch - a_ch, d.h, d.w, d.data[a_ch * hw..].to_vec());
    (a, b)
}

/// Dense layer `y = W x + b` with `W` stored row-major `[out][in]`.
pub fn linear<T: Scalar>(x: &[T], weight: &[T], bias: &[T], out_n: usize) -> Vec<T> {
    let in_n = x.len();
    debug_assert_eq!(weight.len(), out_n * in_n);
    (0..out_n)
        .map(|o| {
            let row = &weight[o * in_n..(o + 1) * in_n];
            let mut acc = bias[o];
            for (w, v) in row.iter().zip(x) {
                acc = acc + *w * *v;
            }
            acc
        })
        .collect()
}

/// Backward pass of [`linear`]; accumulates into `d_weight`/`d_bias`, returns
/// the input gradient.
pub fn linear_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    d_out: &[T],
    d_weight: &mut [T],
    d_bias: &mut [T],
) -> Vec<T> {
    let in_n = x.len();
    let out_n = d_out.len();
    let mut d_in = vec![T::zero(); in_n];
    for o in 0..out_n {
        let g = d_out[o];
        d_bias[o] = d_bias[o] + g;
        let row = &weight[o * in_n..(o + 1) * in_n];
        let drow = &mut d_weight[o * in_n..(o + 1) * in_n];
        for i in 0..in_n {
            drow[i] = drow[i] + g * x[i];
            d_in[i] = d_in[i] + row[i] * g;
        }
    }
    d_in
}

/// Adds a per-channel bias (FiLM-style shift) in place.
pub fn add_channel_bias<T: Scalar>(x: &mut Tensor3<T>, bias: &[T]) {
    debug_assert_eq!(bias.len(), x.ch);
    let hw = x.h * x.w;
    for c in 0..x.ch {
        let b = bias[c];
        for v in &mut x.data[c * hw..(c + 1) * hw] {
            *v = *v + b;
        }
    }
}

/// Gradient of [`add_channel_bias`] with respect to the bias vector.
pub fn channel_bias_grad<T: Scalar>(d_out: &Tensor3<T>) -> Vec<T> {
    (0..d_out.ch)
        .map(|c| d_out.plane(c).iter().copied().sum())
        .collect()
}

/// SiLU over a flat vector (for MLP hidden layers).
pub fn silu_vec<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_vec_backward<T: Scalar>(pre: &[T], d_out: &[T]) -> Vec<T> {
    pre.iter()
        .zip(d_out)
        .map(|(&x, &g)| {
            let s = sigmoid(x);
            g * s * (T::one() + x * (T::one() - s))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(ch: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor3<f64> {
        let data = (0..ch * h * w).map(|_| randn(rng)).collect();
        Tensor3::from_data(ch, h, w, data)
    }

    /// Central finite difference of `f` with respect to `x[i]`.
    fn fd(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
        let mut xp = x.to_vec();
        xp[i] += h;
        let fp = f(&xp);
        xp[i] -= 2.0 * h;
        let fm = f(&xp);
        (fp - fm) / (2.0 * h)
    }

    fn assert_close(analytic: f64, numeric: f64, what: &str) {
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        assert!(
            (analytic - numeric).abs() / denom <= 1e-5,
            "{what}: analytic {analytic} vs numeric {numeric}"
        );
    }

    #[test]
    fn conv3x3_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = rand_tensor(2, 5, 4, &mut rng);
        let weight: Vec<f64> = (0..3 * 2 * 9).map(|_| randn(&mut rng) * 0.3).collect();
        let bias: Vec<f64> = (0..3).map(|_| randn(&mut rng) * 0.1).collect();
        // Scalar objective: weighted sum of outputs with fixed coefficients.
        let coeffs: Vec<f64> = (0..3 * 5 * 4).map(|_| randn(&mut rng)).collect();

        let out = conv3x3(&input, &weight, &bias, 3);
        let loss_grad = Tensor3::from_data(3, 5, 4, coeffs.clone());
        let mut dw = vec![0.0; weight.len()];
        let mut db = vec![0.0; bias.len()];
        let din = conv3x3_backward(&input, &weight, &loss_grad, &mut dw, &mut db);
        let _ = out;

        let mut loss_for_weights = |w: &[f64]| -> f64 {
            conv3x3(&input, w, &bias, 3)
                .data
                .iter()
                .zip(&coeffs)
                .map(|(o, c)| o * c)
                .sum()
        };
        for i in [0usize, 7, 23, 53] {
            let n = fd(&mut loss_for_weights, &weight, i, 1e-6);
            assert_close(dw[i], n, "conv weight grad");
        }
        let mut loss_for_input = |x: &[f64]| -> f64 {
            let t = Tensor3::from_data(2, 5, 4, x.to_vec());
            conv3x3(&t, &weight, &bias, 3)
                .data
                .iter()
                .zip(&coeffs)
                .map(|(o, c)| o * c)
                .sum()
        };
        for i in [0usize, 9, 19, 39] {
            let n = fd(&mut loss_for_input, &input.data, i, 1e-6);
            assert_close(din.data[i], n, "conv input grad");
        }
        let mut loss_for_bias = |b: &[f64]| -> f64 {
            conv3x3(&input, &weight, b, 3)
                .data
                .iter()
                .zip(&coeffs)
                .map(|(o, c)| o * c)
                .sum()
        };
        for i in 0..3 {
            let n = fd(&mut loss_for_bias, &bias, i, 1e-6);
            assert_close(db[i], n, "conv bias grad");
        }
    }

    #[test]
    fn silu_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(1, 3, 3, &mut rng);
        let coeffs: Vec<f64> = (0..9).map(|_| randn(&mut rng)).collect();
        let dout = Tensor3::from_data(1, 3, 3, coeffs.clone());
        let din = silu_backward(&x, &dout);
        let mut loss = |v: &[f64]| -> f64 {
            let t = Tensor3::from_data(1, 3, 3, v.to_vec());
            silu(&t).data.iter().zip(&coeffs).map(|(o, c)| o * c).sum()
        };
        for i in 0..9 {
            assert_close(din.data[i], fd(&mut loss, &x.data, i, 1e-6), "silu grad");
        }
    }

    #[test]
    fn pool_and_upsample_are_adjoint_shaped() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(2, 4, 6, &mut rng);
        let pooled = avg_pool2(&x);
        assert_eq!((pooled.ch, pooled.h, pooled.w), (2, 2, 3));
        let back = avg_pool2_backward(&pooled, 4, 6);
        assert_eq!((back.ch, back.h, back.w), (2, 4, 6));

        let up = upsample_nearest2(&pooled);
        assert_eq!((up.ch, up.h, up.w), (2, 4, 6));
        let down = upsample_nearest2_backward(&up);
        // Each coarse cell's gradient is the sum of its 4 copies.
        for i in 0..pooled.data.len() {
            assert!((down.data[i] - 4.0 * pooled.data[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..5).map(|_| randn(&mut rng)).collect();
        let w: Vec<f64> = (0..3 * 5).map(|_| randn(&mut rng) * 0.4).collect();
        let b: Vec<f64> = (0..3).map(|_| randn(&mut rng) * 0.1).collect();
        let coeffs: Vec<f64> = (0..3).map(|_| randn(&mut rng)).collect();

        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; b.len()];
        let din = linear_backward(&x, &w, &coeffs, &mut dw, &mut db);

        let mut loss_w = |wv: &[f64]| -> f64 {
            linear(&x, wv, &b, 3)
                .iter()
                .zip(&coeffs)
                .map(|(o, c)| o * c)
                .sum()
        };
        for i in 0..w.len() {
            assert_close(dw[i], fd(&mut loss_w, &w, i, 1e-6), "linear weight grad");
        }
        let mut loss_x = |xv: &[f64]| -> f64 {
            linear(xv, &w, &b, 3)
                .iter()
                .zip(&coeffs)
                .map(|(o, c)| o * c)
                .sum()
        };
        for i in 0..x.len() {
            assert_close(din[i], fd(&mut loss_x, &x, i, 1e-6), "linear input grad");
        }
    }

    #[test]
    fn concat_split_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tensor(2, 3, 3, &mut rng);
        let b = rand_tensor(1, 3, 3, &mut rng);
        let cat = concat_channels(&a, &b);
        let (ga, gb) = split_channels(&cat, 2);
        assert_eq!(ga.data, a.data);
        assert_eq!(gb.data, b.data);
    }
}
