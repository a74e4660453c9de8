//! Differentiable operations recorded on a [`Graph`].
//!
//! Image tensors are `(batch, channels, height, width)`.

use crate::{Graph, NnError, Result, Tensor, Var};

/// Output extent of a convolution along one axis, if at least one.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds one sample into a `(cin*k*k, oh*ow)` matrix.
    fn im2col(&self, input: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for ci in 0..self.cin {
            let plane = &input[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let out = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut out[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: folds column gradients back onto the input.
    fn col2im(&self, cols: &[f64], grad: &mut [f64]) {
        let p = self.positions();
        for ci in 0..self.cin {
            let plane = &mut grad[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c (m x n) = a (m x k) * b (k x n) + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!(m * n <= c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 2-d cross-correlation with a per-output-channel bias.
///
/// `weights` is `(cout, cin, k, k)`, `bias` is `(cout)`.
pub fn conv2d(g: &mut Graph, input: Var, weights: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
    let x = g.value(input);
    let wt = g.value(weights);
    let [n, cin, h, w] = x.expect4("conv2d")?;
    let [cout, wcin, kh, kw] = wt.expect4("conv2d")?;
    if wcin != cin || kh != kw {
        return Err(NnError::mismatch("conv2d", x.shape(), wt.shape()));
    }
    if g.value(bias).shape() != [cout] {
        return Err(NnError::mismatch("conv2d", wt.shape(), g.value(bias).shape()));
    }
    let (Some(oh), Some(ow)) = (
        conv_output_extent(h, kh, stride, pad),
        conv_output_extent(w, kw, stride, pad),
    ) else {
        return Err(NnError::invalid(
            "conv2d",
            format!(
                "input {:?} too small for kernel {kh}, stride {stride}, pad {pad}",
                x.shape()
            ),
        ));
    };
    let geom = ConvGeom {
        cin,
        h,
        w,
        k: kh,
        stride,
        pad,
        oh,
        ow,
    };
    let rows = geom.rows();
    let p = geom.positions();
    let keep = g.requires_grad(input) || g.requires_grad(weights) || g.requires_grad(bias);

    let mut out = vec![0.0; n * cout * p];
    let mut cols_all = if keep { vec![0.0; n * rows * p] } else { Vec::new() };
    let mut cols_one = if keep { Vec::new() } else { vec![0.0; rows * p] };
    let bias_v = g.value(bias).data();
    for s in 0..n {
        let cols = if keep {
            &mut cols_all[s * rows * p..(s + 1) * rows * p]
        } else {
            &mut cols_one[..]
        };
        geom.im2col(&x.data()[s * cin * h * w..(s + 1) * cin * h * w], cols);
        let o = &mut out[s * cout * p..(s + 1) * cout * p];
        for (c, chunk) in o.chunks_mut(p).enumerate() {
            chunk.fill(bias_v[c]);
        }
        gemm(cout, rows, p, wt.data(), (rows, 1), cols, (p, 1), 1.0, o);
    }
    let value = Tensor::from_vec(&[n, cout, oh, ow], out)?;
    Ok(g.op(
        value,
        &[input, weights, bias],
        Box::new(move |up, parents, want| {
            let wt = parents[1];
            let upd = up.data();
            let mut gx = want[0].then(|| Tensor::zeros(parents[0].shape()));
            let mut gw = want[1].then(|| Tensor::zeros(wt.shape()));
            let mut gb = want[2].then(|| Tensor::zeros(&[cout]));
            let mut dcols = vec![0.0; rows * p];
            for s in 0..n {
                let dout = &upd[s * cout * p..(s + 1) * cout * p];
                let cols = &cols_all[s * rows * p..(s + 1) * rows * p];
                if let Some(gw) = gw.as_mut() {
                    // dW += dOut * cols^T
                    gemm(cout, p, rows, dout, (p, 1), cols, (1, p), 1.0, gw.data_mut());
                }
                if let Some(gb) = gb.as_mut() {
                    for (c, chunk) in dout.chunks(p).enumerate() {
                        gb.data_mut()[c] += chunk.iter().sum::<f64>();
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    // dCols = W^T * dOut
                    gemm(rows, cout, p, wt.data(), (1, rows), dout, (p, 1), 0.0, &mut dcols);
                    geom.col2im(&dcols, &mut gx.data_mut()[s * cin * h * w..(s + 1) * cin * h * w]);
                }
            }
            vec![gx, gw, gb]
        }),
    ))
}

/// Elementwise `max(x, slope * x)`; the derivative at exactly zero is `slope`.
pub fn leaky_relu(g: &mut Graph, input: Var, slope: f64) -> Var {
    let x = g.value(input);
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
    let value = Tensor::from_vec(x.shape(), data).expect("same shape");
    g.op(
        value,
        &[input],
        Box::new(move |up, parents, _| {
            let data = parents[0]
                .data()
                .iter()
                .zip(up.data())
                .map(|(&x, &u)| if x > 0.0 { u } else { slope * u })
                .collect();
            vec![Some(Tensor::from_vec(up.shape(), data).expect("same shape"))]
        }),
    )
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Per-(sample, channel) standardisation followed by a per-channel affine.
pub fn instance_norm(g: &mut Graph, input: Var, gain: Var, offset: Var) -> Result<Var> {
    let x = g.value(input);
    let [n, c, h, w] = x.expect4("instance_norm")?;
    if h * w == 0 {
        return Err(NnError::invalid("instance_norm", "empty spatial plane"));
    }
    if g.value(gain).shape() != [c] || g.value(offset).shape() != [c] {
        return Err(NnError::mismatch("instance_norm", x.shape(), g.value(gain).shape()));
    }
    let m = h * w;
    let gain_v = g.value(gain).data();
    let offset_v = g.value(offset).data();
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; n * c];
    let mut out = vec![0.0; x.len()];
    for plane in 0..n * c {
        let ch = plane % c;
        let src = &x.data()[plane * m..(plane + 1) * m];
        let mean = src.iter().sum::<f64>() / m as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let inv = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
        inv_std[plane] = inv;
        for i in 0..m {
            let xh = (src[i] - mean) * inv;
            xhat[plane * m + i] = xh;
            out[plane * m + i] = gain_v[ch] * xh + offset_v[ch];
        }
    }
    let value = Tensor::from_vec(x.shape(), out)?;
    Ok(g.op(
        value,
        &[input, gain, offset],
        Box::new(move |up, parents, want| {
            let gain_v = parents[1].data();
            let upd = up.data();
            let mut gx = want[0].then(|| Tensor::zeros(up.shape()));
            let mut gg = vec![0.0; c];
            let mut go = vec![0.0; c];
            for plane in 0..n * c {
                let ch = plane % c;
                let dy = &upd[plane * m..(plane + 1) * m];
                let xh = &xhat[plane * m..(plane + 1) * m];
                let sum_dy: f64 = dy.iter().sum();
                let sum_dy_xh: f64 = dy.iter().zip(xh).map(|(a, b)| a * b).sum();
                gg[ch] += sum_dy_xh;
                go[ch] += sum_dy;
                if let Some(gx) = gx.as_mut() {
                    let scale = gain_v[ch] * inv_std[plane] / m as f64;
                    let dst = &mut gx.data_mut()[plane * m..(plane + 1) * m];
                    for i in 0..m {
                        dst[i] = scale * (m as f64 * dy[i] - sum_dy - xh[i] * sum_dy_xh);
                    }
                }
            }
            vec![
                gx,
                want[1].then(|| Tensor::from_vec(&[c], gg).expect("channel vector")),
                want[2].then(|| Tensor::from_vec(&[c], go).expect("channel vector")),
            ]
        }),
    ))
}

/// 2x2 average pooling with stride 2; extents must be even.
pub fn avg_pool2(g: &mut Graph, input: Var) -> Result<Var> {
    let x = g.value(input);
    let [n, c, h, w] = x.expect4("avg_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NnError::invalid("avg_pool2", format!("odd extent {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                out[(plane * oh + y) * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
    Ok(g.op(
        value,
        &[input],
        Box::new(move |up, _, _| {
            let mut gx = vec![0.0; n * c * h * w];
            for plane in 0..n * c {
                for y in 0..h {
                    for xx in 0..w {
                        gx[(plane * h + y) * w + xx] = 0.25 * up.data()[(plane * oh + y / 2) * ow + xx / 2];
                    }
                }
            }
            vec![Some(Tensor::from_vec(&[n, c, h, w], gx).expect("input shape"))]
        }),
    ))
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(g: &mut Graph, input: Var) -> Result<Var> {
    let x = g.value(input);
    let [n, c, h, w] = x.expect4("upsample2")?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                out[(plane * oh + y) * ow + xx] = x.data()[(plane * h + y / 2) * w + xx / 2];
            }
        }
    }
    let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
    Ok(g.op(
        value,
        &[input],
        Box::new(move |up, _, _| {
            let mut gx = vec![0.0; n * c * h * w];
            for plane in 0..n * c {
                for y in 0..oh {
                    for xx in 0..ow {
                        gx[(plane * h + y / 2) * w + xx / 2] += up.data()[(plane * oh + y) * ow + xx];
                    }
                }
            }
            vec![Some(Tensor::from_vec(&[n, c, h, w], gx).expect("input shape"))]
        }),
    ))
}

/// Stacks two tensors along the channel axis.
pub fn concat_channels(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (ta, tb) = (g.value(a), g.value(b));
    let [n, ca, h, w] = ta.expect4("concat_channels")?;
    let [nb, cb, hb, wb] = tb.expect4("concat_channels")?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(NnError::mismatch("concat_channels", ta.shape(), tb.shape()));
    }
    let m = h * w;
    let mut out = Vec::with_capacity(n * (ca + cb) * m);
    for s in 0..n {
        out.extend_from_slice(&ta.data()[s * ca * m..(s + 1) * ca * m]);
        out.extend_from_slice(&tb.data()[s * cb * m..(s + 1) * cb * m]);
    }
    let value = Tensor::from_vec(&[n, ca + cb, h, w], out)?;
    Ok(g.op(
        value,
        &[a, b],
        Box::new(move |up, _, want| {
            let mut ga = Vec::with_capacity(n * ca * m);
            let mut gb = Vec::with_capacity(n * cb * m);
            for s in 0..n {
                let base = s * (ca + cb) * m;
                ga.extend_from_slice(&up.data()[base..base + ca * m]);
                gb.extend_from_slice(&up.data()[base + ca * m..base + (ca + cb) * m]);
            }
            vec![
                want[0].then(|| Tensor::from_vec(&[n, ca, h, w], ga).expect("shape")),
                want[1].then(|| Tensor::from_vec(&[n, cb, h, w], gb).expect("shape")),
            ]
        }),
    ))
}

/// Mean over everything but the leading axis; result has shape `(batch)`.
pub fn mean_per_sample(g: &mut Graph, input: Var) -> Var {
    let x = g.value(input);
    let n = x.shape()[0];
    let m = x.len() / n.max(1);
    let data = x
        .data()
        .chunks(m.max(1))
        .map(|c| c.iter().sum::<f64>() / m as f64)
        .collect();
    let shape = x.shape().to_vec();
    let value = Tensor::from_vec(&[n], data).expect("batch vector");
    g.op(
        value,
        &[input],
        Box::new(move |up, _, _| {
            let mut gx = Vec::with_capacity(n * m);
            for s in 0..n {
                gx.extend(std::iter::repeat_n(up.data()[s] / m as f64, m));
            }
            vec![Some(Tensor::from_vec(&shape, gx).expect("input shape"))]
        }),
    )
}

/// Mean of `(x - target)^2` over all elements, as a one-element tensor.
pub fn square_error(g: &mut Graph, input: Var, target: f64) -> Var {
    let x = g.value(input);
    let n = x.len() as f64;
    let loss = x.data().iter().map(|v| (v - target) * (v - target)).sum::<f64>() / n;
    g.op(
        Tensor::scalar(loss),
        &[input],
        Box::new(move |up, parents, _| {
            let u = up.data()[0];
            let data = parents[0].data().iter().map(|v| 2.0 * (v - target) / n * u).collect();
            vec![Some(Tensor::from_vec(parents[0].shape(), data).expect("shape"))]
        }),
    )
}

/// `sum(weights * (x - targets)^2)` as a one-element tensor.
pub fn weighted_square_error(g: &mut Graph, input: Var, targets: &Tensor, weights: &Tensor) -> Result<Var> {
    let x = g.value(input);
    if x.shape() != targets.shape() || x.shape() != weights.shape() {
        return Err(NnError::mismatch("weighted_square_error", x.shape(), targets.shape()));
    }
    let loss = x
        .data()
        .iter()
        .zip(targets.data())
        .zip(weights.data())
        .map(|((v, t), w)| w * (v - t) * (v - t))
        .sum();
    let targets = targets.clone();
    let weights = weights.clone();
    Ok(g.op(
        Tensor::scalar(loss),
        &[input],
        Box::new(move |up, parents, _| {
            let u = up.data()[0];
            let data = parents[0]
                .data()
                .iter()
                .zip(targets.data())
                .zip(weights.data())
                .map(|((v, t), w)| 2.0 * w * (v - t) * u)
                .collect();
            vec![Some(Tensor::from_vec(parents[0].shape(), data).expect("shape"))]
        }),
    ))
}

pub fn add(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (ta, tb) = (g.value(a), g.value(b));
    if ta.shape() != tb.shape() {
        return Err(NnError::mismatch("add", ta.shape(), tb.shape()));
    }
    let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
    let value = Tensor::from_vec(ta.shape(), data)?;
    Ok(g.op(
        value,
        &[a, b],
        Box::new(|up, _, want| vec![want[0].then(|| up.clone()), want[1].then(|| up.clone())]),
    ))
}

/// Numerically stable sigmoid cross entropy against `targets`, each element
/// weighted by `weights`, summed and divided by `normalizer`.
pub fn sigmoid_bce(g: &mut Graph, logits: Var, targets: &Tensor, weights: &Tensor, normalizer: f64) -> Result<Var> {
    let x = g.value(logits);
    if x.shape() != targets.shape() || x.shape() != weights.shape() {
        return Err(NnError::mismatch("sigmoid_bce", x.shape(), targets.shape()));
    }
    if normalizer.is_nan() || normalizer <= 0.0 {
        return Err(NnError::invalid("sigmoid_bce", "normalizer must be positive"));
    }
    let loss = x
        .data()
        .iter()
        .zip(targets.data())
        .zip(weights.data())
        .filter(|(_, &w)| w != 0.0)
        .map(|((&z, &t), &w)| w * bce_with_logit(z, t))
        .sum::<f64>()
        / normalizer;
    let targets = targets.clone();
    let weights = weights.clone();
    Ok(g.op(
        Tensor::scalar(loss),
        &[logits],
        Box::new(move |up, parents, _| {
            let u = up.data()[0] / normalizer;
            let data = parents[0]
                .data()
                .iter()
                .zip(targets.data())
                .zip(weights.data())
                .map(|((&z, &t), &w)| if w == 0.0 { 0.0 } else { u * w * (sigmoid(z) - t) })
                .collect();
            vec![Some(Tensor::from_vec(parents[0].shape(), data).expect("shape"))]
        }),
    ))
}

/// `-(t ln s(z) + (1 - t) ln(1 - s(z)))` without overflow.
pub fn bce_with_logit(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
