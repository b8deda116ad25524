//! Layer primitives with hand-written backward passes.
//!
//! Parallel loops split work by output plane only, and every reduction runs
//! in a fixed order, so results do not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Zero-pads every plane by `p` on each side.
fn pad_planes(x: &Tensor4, p: usize) -> Vec<f64> {
    let (pw, ph) = (x.w + 2 * p, x.h + 2 * p);
    let mut out = vec![0.0; x.n * x.c * pw * ph];
    for (plane, dst) in x.data.chunks(x.h * x.w).zip(out.chunks_mut(pw * ph)) {
        for y in 0..x.h {
            dst[(y + p) * pw + p..(y + p) * pw + p + x.w].copy_from_slice(&plane[y * x.w..(y + 1) * x.w]);
        }
    }
    out
}

/// Same-size cross-correlation over pre-padded planes; `weight` is `(cout, cin, k, k)`.
#[allow(clippy::too_many_arguments)]
fn correlate_padded(
    padded: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: Option<&[f64]>,
    cout: usize,
    k: usize,
) -> Tensor4 {
    let pw = w + k - 1;
    let pplane = (h + k - 1) * pw;
    let mut out = Tensor4::zeros(n, cout, h, w);
    out.data.par_chunks_mut(h * w).enumerate().for_each(|(idx, dst)| {
        let (s, co) = (idx / cout, idx % cout);
        if let Some(b) = bias {
            dst.fill(b[co]);
        }
        for ci in 0..cin {
            let src = &padded[(s * cin + ci) * pplane..(s * cin + ci + 1) * pplane];
            let wk = &weight[(co * cin + ci) * k * k..(co * cin + ci + 1) * k * k];
            for ky in 0..k {
                let taps = &wk[ky * k..(ky + 1) * k];
                for y in 0..h {
                    let row = &src[(y + ky) * pw..(y + ky) * pw + pw];
                    let o = &mut dst[y * w..(y + 1) * w];
                    if k == 3 {
                        let (t0, t1, t2) = (taps[0], taps[1], taps[2]);
                        let (r0, r1, r2) = (&row[..w], &row[1..w + 1], &row[2..w + 2]);
                        for x in 0..w {
                            o[x] += t0 * r0[x] + t1 * r1[x] + t2 * r2[x];
                        }
                    } else {
                        for (kx, &t) in taps.iter().enumerate() {
                            for (ov, rv) in o.iter_mut().zip(&row[kx..kx + w]) {
                                *ov += t * rv;
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv_kernel_side(x: &Tensor4, weight: &[f64], bias: &[f64]) -> Result<(usize, usize)> {
    let cout = bias.len();
    if cout == 0 || x.c == 0 || weight.len() % (cout * x.c) != 0 {
        return Err(Error::Shape(format!(
            "{} kernel values do not fit {} output and {} input channels",
            weight.len(),
            cout,
            x.c
        )));
    }
    let kk = weight.len() / (cout * x.c);
    let k = (kk as f64).sqrt().round() as usize;
    if k * k != kk || k % 2 == 0 {
        return Err(Error::Shape(format!("kernel of {kk} taps is not an odd square")));
    }
    Ok((cout, k))
}

/// Same-padding cross-correlation. `weight` is `(cout, cin, k, k)` with odd `k`,
/// `bias` has `cout` entries; borders are zero-padded.
pub fn conv2d_same(x: &Tensor4, weight: &[f64], bias: &[f64]) -> Result<Tensor4> {
    let (cout, k) = conv_kernel_side(x, weight, bias)?;
    let padded = pad_planes(x, k / 2);
    Ok(correlate_padded(&padded, x.n, x.c, x.h, x.w, weight, Some(bias), cout, k))
}

pub struct ConvGrads {
    pub dx: Tensor4,
    pub dweight: Vec<f64>,
    pub dbias: Vec<f64>,
}

pub fn conv2d_same_backward(x: &Tensor4, weight: &[f64], dy: &Tensor4) -> Result<ConvGrads> {
    let cout = dy.c;
    let cin = x.c;
    if dy.n != x.n || dy.h != x.h || dy.w != x.w || cout == 0 || weight.len() % (cout * cin) != 0 {
        return Err(Error::Shape("convolution gradient does not match its input".into()));
    }
    let kk = weight.len() / (cout * cin);
    let k = (kk as f64).sqrt().round() as usize;
    let p = k / 2;
    let (h, w) = (x.h, x.w);
    let pw = w + 2 * p;
    let pplane = (h + 2 * p) * pw;
    let padded_x = pad_planes(x, p);

    let dbias: Vec<f64> = (0..cout)
        .map(|co| (0..x.n).map(|s| dy.plane(s, co).iter().sum::<f64>()).sum())
        .collect();

    let mut dweight = vec![0.0; weight.len()];
    dweight.par_chunks_mut(cin * kk).enumerate().for_each(|(co, dw)| {
        // Column-wise partial sums keep the inner loop free of a serial reduction.
        let mut lanes = vec![0.0; w];
        for s in 0..x.n {
            let g = dy.plane(s, co);
            for ci in 0..cin {
                let src = &padded_x[(s * cin + ci) * pplane..(s * cin + ci + 1) * pplane];
                for ky in 0..k {
                    for kx in 0..k {
                        lanes.fill(0.0);
                        for y in 0..h {
                            let row = &src[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                            for ((l, a), b) in lanes.iter_mut().zip(&g[y * w..(y + 1) * w]).zip(row) {
                                *l += a * b;
                            }
                        }
                        dw[(ci * k + ky) * k + kx] += lanes.iter().sum::<f64>();
                    }
                }
            }
        }
    });

    // dx is a same-size correlation of dy with the flipped, channel-transposed kernel.
    let mut flipped = vec![0.0; weight.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    flipped[((ci * cout + co) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                        weight[((co * cin + ci) * k + ky) * k + kx];
                }
            }
        }
    }
    let padded_dy = pad_planes(dy, p);
    let dx = correlate_padded(&padded_dy, x.n, cout, h, w, &flipped, None, cin, k);
    Ok(ConvGrads { dx, dweight, dbias })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// What the backward pass of a training-mode batch norm needs.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Tensor4,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<f64>,
}

fn check_channels(x: &Tensor4, scale: &[f64], shift: &[f64]) -> Result<()> {
    if scale.len() != x.c || shift.len() != x.c {
        return Err(Error::Shape(format!(
            "batch norm has {}/{} parameters for {} channels",
            scale.len(),
            shift.len(),
            x.c
        )));
    }
    Ok(())
}

/// Normalizes each channel over `(N, H, W)` with the batch's own statistics.
pub fn batchnorm_train(x: &Tensor4, scale: &[f64], shift: &[f64], eps: f64) -> Result<(Tensor4, BnCache)> {
    check_channels(x, scale, shift)?;
    let m = (x.n * x.h * x.w) as f64;
    let mut mean = vec![0.0; x.c];
    let mut var = vec![0.0; x.c];
    for c in 0..x.c {
        let mu = (0..x.n).map(|s| x.plane(s, c).iter().sum::<f64>()).sum::<f64>() / m;
        let v = (0..x.n)
            .map(|s| x.plane(s, c).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>())
            .sum::<f64>()
            / m;
        mean[c] = mu;
        var[c] = v;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = x.clone();
    let mut y = x.clone();
    for s in 0..x.n {
        for c in 0..x.c {
            let (mu, is, g, b) = (mean[c], inv_std[c], scale[c], shift[c]);
            for v in xhat.plane_mut(s, c) {
                *v = (*v - mu) * is;
            }
            for (o, xh) in y.plane_mut(s, c).iter_mut().zip(xhat.plane(s, c)) {
                *o = g * xh + b;
            }
        }
    }
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Affine map with frozen running statistics.
pub fn batchnorm_eval(
    x: &Tensor4,
    scale: &[f64],
    shift: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Tensor4> {
    check_channels(x, scale, shift)?;
    check_channels(x, running_mean, running_var)?;
    let mut y = x.clone();
    for s in 0..x.n {
        for c in 0..x.c {
            let a = scale[c] / (running_var[c] + eps).sqrt();
            let b = shift[c] - a * running_mean[c];
            for v in y.plane_mut(s, c) {
                *v = a * *v + b;
            }
        }
    }
    Ok(y)
}

/// Running statistics after one training batch: `(1 - m) r + m s`, with the
/// unbiased batch variance.
pub fn update_running_stats(
    running_mean: &mut [f64],
    running_var: &mut [f64],
    batch_mean: &[f64],
    batch_var: &[f64],
    count: usize,
    momentum: f64,
) {
    let unbias = if count > 1 {
        count as f64 / (count - 1) as f64
    } else {
        1.0
    };
    for c in 0..running_mean.len() {
        running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * batch_mean[c];
        running_var[c] = (1.0 - momentum) * running_var[c] + momentum * batch_var[c] * unbias;
    }
}

pub struct BnGrads {
    pub dx: Tensor4,
    pub dscale: Vec<f64>,
    pub dshift: Vec<f64>,
}

pub fn batchnorm_backward(dy: &Tensor4, cache: &BnCache, scale: &[f64]) -> BnGrads {
    let m = (dy.n * dy.h * dy.w) as f64;
    let c_count = dy.c;
    let mut dscale = vec![0.0; c_count];
    let mut dshift = vec![0.0; c_count];
    for c in 0..c_count {
        for s in 0..dy.n {
            for (g, xh) in dy.plane(s, c).iter().zip(cache.xhat.plane(s, c)) {
                dscale[c] += g * xh;
                dshift[c] += g;
            }
        }
    }
    let mut dx = dy.clone();
    for s in 0..dy.n {
        for c in 0..c_count {
            // dxhat = g * dy; dx = inv_std / m * (m dxhat - sum dxhat - xhat sum(dxhat xhat))
            let k = scale[c] * cache.inv_std[c] / m;
            let (sum_g, sum_gx) = (dshift[c], dscale[c]);
            for (o, xh) in dx.plane_mut(s, c).iter_mut().zip(cache.xhat.plane(s, c)) {
                *o = k * (m * *o - sum_g - xh * sum_gx);
            }
        }
    }
    BnGrads { dx, dscale, dshift }
}

pub fn relu(x: &Tensor4) -> Tensor4 {
    let mut y = x.clone();
    for v in &mut y.data {
        *v = v.max(0.0);
    }
    y
}

/// Passes `dy` where the forward input was positive.
pub fn relu_backward(dy: &Tensor4, x: &Tensor4) -> Tensor4 {
    let mut dx = dy.clone();
    for (d, v) in dx.data.iter_mut().zip(&x.data) {
        if *v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// 2x2 max pooling; also returns, per output entry, the flat input index of the winner.
pub fn maxpool2(x: &Tensor4) -> Result<(Tensor4, Vec<usize>)> {
    if x.h % 2 != 0 || x.w % 2 != 0 {
        return Err(Error::Shape(format!("max pooling needs even sides, got {}x{}", x.w, x.h)));
    }
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Tensor4::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0usize; y.data.len()];
    for p in 0..x.n * x.c {
        let base = p * x.h * x.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * x.w + 2 * ox;
                for i in [best + 1, best + x.w, best + x.w + 1] {
                    if x.data[i] > x.data[best] {
                        best = i;
                    }
                }
                let o = (p * oh + oy) * ow + ox;
                y.data[o] = x.data[best];
                arg[o] = best;
            }
        }
    }
    Ok((y, arg))
}

pub fn maxpool2_backward(dy: &Tensor4, argmax: &[usize], input_dims: (usize, usize, usize, usize)) -> Tensor4 {
    let (n, c, h, w) = input_dims;
    let mut dx = Tensor4::zeros(n, c, h, w);
    for (g, &i) in dy.data.iter().zip(argmax) {
        dx.data[i] += g;
    }
    dx
}

/// Stride-2 transposed convolution with 2x2 kernels halving the channel count.
/// `weight` is `(cin, cout, 2, 2)` with `cout = cin / 2`.
pub fn tconv2(x: &Tensor4, weight: &[f64], bias: &[f64]) -> Result<Tensor4> {
    if x.c % 2 != 0 {
        return Err(Error::Shape(format!("transposed convolution needs an even channel count, got {}", x.c)));
    }
    let cout = x.c / 2;
    if bias.len() != cout || weight.len() != x.c * cout * 4 {
        return Err(Error::Shape(format!(
            "transposed convolution from {} channels needs {} weights and {} biases",
            x.c,
            x.c * cout * 4,
            cout
        )));
    }
    let (oh, ow) = (2 * x.h, 2 * x.w);
    let cin = x.c;
    let mut y = Tensor4::zeros(x.n, cout, oh, ow);
    y.data.par_chunks_mut(oh * ow).enumerate().for_each(|(idx, dst)| {
        let (s, co) = (idx / cout, idx % cout);
        dst.fill(bias[co]);
        for ci in 0..cin {
            let src = x.plane(s, ci);
            let wk = &weight[(ci * cout + co) * 4..(ci * cout + co + 1) * 4];
            for iy in 0..x.h {
                for a in 0..2 {
                    let row = &mut dst[(2 * iy + a) * ow..(2 * iy + a + 1) * ow];
                    let (w0, w1) = (wk[2 * a], wk[2 * a + 1]);
                    for (ix, &v) in src[iy * x.w..(iy + 1) * x.w].iter().enumerate() {
                        row[2 * ix] += w0 * v;
                        row[2 * ix + 1] += w1 * v;
                    }
                }
            }
        }
    });
    Ok(y)
}

/// Adjoint of [`tconv2`] without bias: a stride-2 2x2 correlation from `cin / 2`
/// channels back to `cin`.
pub fn conv2_stride2(y: &Tensor4, weight: &[f64], cin: usize) -> Result<Tensor4> {
    let cout = y.c;
    if weight.len() != cin * cout * 4 || y.h % 2 != 0 || y.w % 2 != 0 {
        return Err(Error::Shape("stride-2 correlation does not match its kernel".into()));
    }
    let (h, w) = (y.h / 2, y.w / 2);
    let mut x = Tensor4::zeros(y.n, cin, h, w);
    x.data.par_chunks_mut(h * w).enumerate().for_each(|(idx, dst)| {
        let (s, ci) = (idx / cin, idx % cin);
        for co in 0..cout {
            let src = y.plane(s, co);
            let wk = &weight[(ci * cout + co) * 4..(ci * cout + co + 1) * 4];
            for iy in 0..h {
                for a in 0..2 {
                    let row = &src[(2 * iy + a) * y.w..(2 * iy + a + 1) * y.w];
                    let (w0, w1) = (wk[2 * a], wk[2 * a + 1]);
                    for (ix, o) in dst[iy * w..(iy + 1) * w].iter_mut().enumerate() {
                        *o += w0 * row[2 * ix] + w1 * row[2 * ix + 1];
                    }
                }
            }
        }
    });
    Ok(x)
}

pub fn tconv2_backward(x: &Tensor4, weight: &[f64], dy: &Tensor4) -> Result<ConvGrads> {
    let cin = x.c;
    let cout = dy.c;
    let dx = conv2_stride2(dy, weight, cin)?;
    let dbias = (0..cout)
        .map(|co| (0..dy.n).map(|s| dy.plane(s, co).iter().sum::<f64>()).sum())
        .collect();
    let mut dweight = vec![0.0; weight.len()];
    dweight.par_chunks_mut(cout * 4).enumerate().for_each(|(ci, dw)| {
        for s in 0..x.n {
            let src = x.plane(s, ci);
            for co in 0..cout {
                let g = dy.plane(s, co);
                for a in 0..2 {
                    for b in 0..2 {
                        let mut acc = 0.0;
                        for iy in 0..x.h {
                            let grow = &g[(2 * iy + a) * dy.w..(2 * iy + a + 1) * dy.w];
                            for (ix, &v) in src[iy * x.w..(iy + 1) * x.w].iter().enumerate() {
                                acc += v * grow[2 * ix + b];
                            }
                        }
                        dw[co * 4 + 2 * a + b] += acc;
                    }
                }
            }
        }
    });
    Ok(ConvGrads { dx, dweight, dbias })
}

/// Channel concatenation, encoder channels first.
pub fn concat_skip(encoder: &Tensor4, decoder: &Tensor4) -> Result<Tensor4> {
    if encoder.n != decoder.n || encoder.h != decoder.h || encoder.w != decoder.w {
        return Err(Error::Shape(format!(
            "skip connection {:?} does not match decoder {:?}",
            encoder.dims(),
            decoder.dims()
        )));
    }
    let c = encoder.c + decoder.c;
    let mut out = Tensor4::zeros(encoder.n, c, encoder.h, encoder.w);
    for s in 0..encoder.n {
        for ch in 0..encoder.c {
            out.plane_mut(s, ch).copy_from_slice(encoder.plane(s, ch));
        }
        for ch in 0..decoder.c {
            out.plane_mut(s, encoder.c + ch).copy_from_slice(decoder.plane(s, ch));
        }
    }
    Ok(out)
}

/// Inverse of [`concat_skip`]: the first `first` channels and the rest.
pub fn split_channels(x: &Tensor4, first: usize) -> (Tensor4, Tensor4) {
    let mut a = Tensor4::zeros(x.n, first, x.h, x.w);
    let mut b = Tensor4::zeros(x.n, x.c - first, x.h, x.w);
    for s in 0..x.n {
        for ch in 0..x.c {
            if ch < first {
                a.plane_mut(s, ch).copy_from_slice(x.plane(s, ch));
            } else {
                b.plane_mut(s, ch - first).copy_from_slice(x.plane(s, ch));
            }
        }
    }
    (a, b)
}

/// Per-pixel soft-max over channels, with the channel maximum subtracted first.
pub fn softmax_pixelwise(scores: &Tensor4) -> Tensor4 {
    let mut p = scores.clone();
    let plane = scores.plane_len();
    let mut buf = vec![0.0; scores.c];
    for s in 0..scores.n {
        let base = s * scores.c * plane;
        for i in 0..plane {
            let mut top = f64::NEG_INFINITY;
            for (ch, b) in buf.iter_mut().enumerate() {
                *b = scores.data[base + ch * plane + i];
                top = top.max(*b);
            }
            let mut total = 0.0;
            for b in buf.iter_mut() {
                *b = (*b - top).exp();
                total += *b;
            }
            for (ch, b) in buf.iter().enumerate() {
                p.data[base + ch * plane + i] = b / total;
            }
        }
    }
    p
}

/// Lower bound applied to the true-class probability before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// `-sum(w ln P_g) / sum(w)`.
    #[default]
    WeightNormalized,
    /// `-sum(w ln P_g)`.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Pixels whose true-class probability was raised to [`PROB_FLOOR`].
    pub clamped: usize,
}

fn loss_inputs(probs: &Tensor4, truth: &Tensor4, weight: &Tensor4) -> Result<()> {
    let want = (probs.n, 1, probs.h, probs.w);
    if truth.dims() != want || weight.dims() != want {
        return Err(Error::Shape(format!(
            "probabilities {:?} vs truth {:?} and weight {:?}",
            probs.dims(),
            truth.dims(),
            weight.dims()
        )));
    }
    if let Some(g) = truth.data.iter().find(|g| g.fract() != 0.0 || **g < 0.0 || **g >= probs.c as f64) {
        return Err(Error::Shape(format!("class index {g} outside 0..{}", probs.c)));
    }
    Ok(())
}

fn normalizer(weight: &Tensor4, reduction: LossReduction) -> f64 {
    match reduction {
        LossReduction::Sum => 1.0,
        LossReduction::WeightNormalized => {
            let s: f64 = weight.data.iter().sum();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        }
    }
}

/// Weighted cross-entropy `E = -sum_x w(x) ln P_{g(x)}(x)`, optionally divided by `sum w`.
///
/// `truth` and `weight` are `(N, 1, H, W)`; `truth` holds class indices.
pub fn weighted_ce_loss(
    probs: &Tensor4,
    truth: &Tensor4,
    weight: &Tensor4,
    reduction: LossReduction,
) -> Result<LossValue> {
    loss_inputs(probs, truth, weight)?;
    let plane = probs.plane_len();
    let mut total = 0.0;
    let mut clamped = 0;
    for s in 0..probs.n {
        for i in 0..plane {
            let g = truth.data[s * plane + i] as usize;
            let p = probs.data[(s * probs.c + g) * plane + i];
            if p < PROB_FLOOR {
                clamped += 1;
            }
            total -= weight.data[s * plane + i] * p.max(PROB_FLOOR).ln();
        }
    }
    Ok(LossValue {
        value: total / normalizer(weight, reduction),
        clamped,
    })
}

/// Gradient of [`weighted_ce_loss`] with respect to the soft-max inputs:
/// `w (P_i - [i = g]) / Z`, zero where the floor was active.
pub fn weighted_ce_grad(probs: &Tensor4, truth: &Tensor4, weight: &Tensor4, reduction: LossReduction) -> Result<Tensor4> {
    loss_inputs(probs, truth, weight)?;
    let z = normalizer(weight, reduction);
    let plane = probs.plane_len();
    let mut d = Tensor4::zeros(probs.n, probs.c, probs.h, probs.w);
    for s in 0..probs.n {
        for i in 0..plane {
            let g = truth.data[s * plane + i] as usize;
            let wz = weight.data[s * plane + i] / z;
            if probs.data[(s * probs.c + g) * plane + i] < PROB_FLOOR || wz == 0.0 {
                continue;
            }
            for ch in 0..probs.c {
                let idx = (s * probs.c + ch) * plane + i;
                let target = if ch == g { 1.0 } else { 0.0 };
                d.data[idx] = wz * (probs.data[idx] - target);
            }
        }
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor4::from_vec(n, c, h, w, data).unwrap()
    }

    fn random_vec(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = random(1, 1, 5, 7, 1);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        assert_eq!(conv2d_same(&x, &k, &[0.0]).unwrap(), x);
    }

    #[test]
    fn conv_matches_quadruple_loop() {
        let x = random(1, 1, 4, 4, 2);
        let k = random_vec(9, 3);
        let y = conv2d_same(&x, &k, &[0.25]).unwrap();
        assert_eq!((y.h, y.w), (4, 4));
        for oy in 0..4 {
            for ox in 0..4 {
                let mut want = 0.25;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                        if (0..4).contains(&iy) && (0..4).contains(&ix) {
                            want += k[ky * 3 + kx] * x.get(0, 0, iy as usize, ix as usize);
                        }
                    }
                }
                assert!((y.get(0, 0, oy, ox) - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = random(1, 2, 4, 4, 4);
        assert!(matches!(conv2d_same(&x, &[0.0; 9], &[0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn batchnorm_train_standardizes() {
        let mut x = random(2, 3, 6, 5, 5);
        for v in &mut x.data {
            *v = 3.0 * *v + 7.0;
        }
        let (y, cache) = batchnorm_train(&x, &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        let m = 60.0;
        for c in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|s| y.plane(s, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / m;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            assert!(mean.abs() < 1e-10);
            assert!((var * (cache.var[c] + 1e-5) / cache.var[c] - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn batchnorm_keeps_standardized_input() {
        let x = random(1, 1, 16, 16, 6);
        let (mu, sd) = {
            let m = x.data.iter().sum::<f64>() / 256.0;
            (m, (x.data.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 256.0).sqrt())
        };
        let z = Tensor4::from_vec(1, 1, 16, 16, x.data.iter().map(|v| (v - mu) / sd).collect()).unwrap();
        let (y, _) = batchnorm_train(&z, &[1.0], &[0.0], 1e-5).unwrap();
        // Only the epsilon in the denominator moves the values: y = z / sqrt(1 + eps).
        for (a, b) in y.data.iter().zip(&z.data) {
            assert!((a - b / (1.0 + 1e-5f64).sqrt()).abs() < 1e-12);
            assert!((a - b).abs() <= 0.5e-5 * b.abs() + 1e-12);
        }
        let (y0, _) = batchnorm_train(&z, &[1.0], &[0.0], 1e-12).unwrap();
        for (a, b) in y0.data.iter().zip(&z.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn batchnorm_eval_is_affine() {
        let x = random(1, 2, 3, 3, 7);
        let (scale, shift, rm, rv) = ([1.5, -0.5], [0.2, 0.1], [0.3, -1.0], [2.0, 0.5]);
        let y = batchnorm_eval(&x, &scale, &shift, &rm, &rv, 1e-5).unwrap();
        for c in 0..2 {
            let a = scale[c] / (rv[c] + 1e-5f64).sqrt();
            for (yo, xi) in y.plane(0, c).iter().zip(x.plane(0, c)) {
                assert!((yo - (a * (xi - rm[c]) + shift[c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn running_stats_use_unbiased_variance() {
        let x = Tensor4::from_vec(1, 1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (_, cache) = batchnorm_train(&x, &[1.0], &[0.0], 1e-5).unwrap();
        let (mut rm, mut rv) = ([0.0], [1.0]);
        update_running_stats(&mut rm, &mut rv, &cache.mean, &cache.var, 4, 0.1);
        assert!((rm[0] - 0.25).abs() < 1e-15);
        assert!((rv[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn relu_contract() {
        let neg = Tensor4::from_vec(1, 1, 1, 3, vec![-1.0, -0.5, -3.0]).unwrap();
        assert!(relu(&neg).data.iter().all(|v| *v == 0.0));
        let pos = Tensor4::from_vec(1, 1, 1, 3, vec![0.0, 0.5, 3.0]).unwrap();
        assert_eq!(relu(&pos), pos);
        let x = random(1, 2, 4, 4, 8);
        assert_eq!(relu(&relu(&x)), relu(&x));
    }

    #[test]
    fn maxpool_cases() {
        let x = Tensor4::from_vec(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2(&x).unwrap();
        assert_eq!(y.data, vec![4.0]);
        assert_eq!(arg, vec![3]);
        let c = Tensor4::from_vec(1, 1, 4, 4, vec![2.5; 16]).unwrap();
        assert!(maxpool2(&c).unwrap().0.data.iter().all(|v| *v == 2.5));
        let x = random(1, 1, 8, 8, 9);
        let (y, _) = maxpool2(&x).unwrap();
        for oy in 0..4 {
            for ox in 0..4 {
                let want = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(a, b)| x.get(0, 0, 2 * oy + a, 2 * ox + b))
                    .fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(y.get(0, 0, oy, ox), want);
            }
        }
        assert!(maxpool2(&random(1, 1, 3, 4, 1)).is_err());
    }

    #[test]
    fn tconv_shapes_bias_and_adjoint() {
        let x = random(1, 8, 16, 16, 10);
        let w = random_vec(8 * 4 * 4, 11);
        let y = tconv2(&x, &w, &[0.0; 4]).unwrap();
        assert_eq!(y.dims(), (1, 4, 32, 32));

        let z = tconv2(&x, &vec![0.0; 128], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        for c in 0..4 {
            assert!(z.plane(0, c).iter().all(|v| *v == (c + 1) as f64));
        }

        let yr = random(1, 4, 32, 32, 12);
        let lhs = conv2_stride2(&yr, &w, 8).unwrap().dot(&x);
        let rhs = yr.dot(&y);
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
        assert!(tconv2(&random(1, 3, 4, 4, 1), &[0.0; 12], &[0.0]).is_err());
    }

    #[test]
    fn concat_and_split_roundtrip() {
        let (a, b) = (random(1, 4, 32, 32, 13), random(1, 4, 32, 32, 14));
        let c = concat_skip(&a, &b).unwrap();
        assert_eq!(c.dims(), (1, 8, 32, 32));
        let (a2, b2) = split_channels(&c, 4);
        assert_eq!((a2, b2), (a, b.clone()));
        assert!(concat_skip(&random(1, 4, 16, 16, 1), &b).is_err());
    }

    #[test]
    fn softmax_closed_forms() {
        let s = Tensor4::from_vec(1, 2, 1, 2, vec![0.0, 10.0, 0.0, 0.0]).unwrap();
        let p = softmax_pixelwise(&s);
        assert_eq!((p.data[0], p.data[2]), (0.5, 0.5));
        assert!((p.data[1] - 1.0 / (1.0 + (-10f64).exp())).abs() < 1e-15);
        assert!((p.data[1] - 0.9999546).abs() < 1e-7);
    }

    #[test]
    fn loss_closed_forms() {
        let one = |v: f64| Tensor4::from_vec(1, 1, 1, 1, vec![v]).unwrap();
        let p = Tensor4::from_vec(1, 2, 1, 1, vec![0.5, 0.5]).unwrap();
        let e = weighted_ce_loss(&p, &one(1.0), &one(1.0), LossReduction::WeightNormalized).unwrap();
        assert!((e.value - 2f64.ln()).abs() < 1e-15);

        let perfect = Tensor4::from_vec(1, 2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = Tensor4::from_vec(1, 1, 1, 2, vec![0.0, 1.0]).unwrap();
        let w = Tensor4::from_vec(1, 1, 1, 2, vec![3.0, 0.5]).unwrap();
        assert_eq!(weighted_ce_loss(&perfect, &g, &w, LossReduction::WeightNormalized).unwrap().value, 0.0);

        let probs = softmax_pixelwise(&random(1, 2, 4, 4, 15));
        let truth = Tensor4::from_vec(1, 1, 4, 4, (0..16).map(|i| (i % 2) as f64).collect()).unwrap();
        let w1 = Tensor4::from_vec(1, 1, 4, 4, (0..16).map(|i| 1.0 + i as f64 / 8.0).collect()).unwrap();
        let mut w2 = w1.clone();
        w2.data.iter_mut().for_each(|v| *v *= 2.0);
        let e1 = weighted_ce_loss(&probs, &truth, &w1, LossReduction::WeightNormalized).unwrap().value;
        let e2 = weighted_ce_loss(&probs, &truth, &w2, LossReduction::WeightNormalized).unwrap().value;
        assert!((e1 - e2).abs() < 1e-14 && e1 > 0.0);
    }

    #[test]
    fn clamped_pixels_are_counted() {
        let s = Tensor4::from_vec(1, 2, 1, 2, vec![0.0, -40.0, 0.0, 40.0]).unwrap();
        let p = softmax_pixelwise(&s);
        let g = Tensor4::from_vec(1, 1, 1, 2, vec![1.0, 0.0]).unwrap();
        let w = Tensor4::from_vec(1, 1, 1, 2, vec![1.0, 1.0]).unwrap();
        let e = weighted_ce_loss(&p, &g, &w, LossReduction::Sum).unwrap();
        assert_eq!(e.clamped, 1);
        assert!(e.value.is_finite());
    }

    proptest! {
        #[test]
        fn softmax_sums_and_shift_invariance(
            scores in prop::collection::vec(-50.0f64..50.0, 6), shift in -100.0f64..100.0,
        ) {
            let s = Tensor4::from_vec(1, 3, 1, 2, scores.clone()).unwrap();
            let p = softmax_pixelwise(&s);
            for i in 0..2 {
                let total: f64 = (0..3).map(|c| p.data[c * 2 + i]).sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
            }
            let shifted = Tensor4::from_vec(1, 3, 1, 2, scores.iter().map(|v| v + shift).collect()).unwrap();
            let q = softmax_pixelwise(&shifted);
            for (a, b) in p.data.iter().zip(&q.data) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
