//! Central finite-difference checks of the analytic gradients.
//!
//! Relative error is `|a - n| / max(|a|, |n|, floor)`. The floor keeps
//! gradients that are zero in exact arithmetic (for example a convolution bias
//! feeding a training-mode batch norm) from turning round-off into huge ratios.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::{
    batchnorm_backward, batchnorm_train, concat_skip, conv2d_same, conv2d_same_backward, maxpool2,
    maxpool2_backward, relu, relu_backward, softmax_pixelwise, split_channels, tconv2, tconv2_backward,
    weighted_ce_grad, weighted_ce_loss, LossReduction,
};
use crate::model::{AnetConfig, AnetModel, SlotKind};
use crate::tensor::Tensor4;

pub const FD_STEP: f64 = 1e-5;
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    /// Relative error per checked scalar.
    pub errors: Vec<f64>,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn fraction_within(&self, tol: f64) -> f64 {
        if self.errors.is_empty() {
            return 1.0;
        }
        self.errors.iter().filter(|e| **e <= tol).count() as f64 / self.errors.len() as f64
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn central(values: &mut [f64], i: usize, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let keep = values[i];
    values[i] = keep + FD_STEP;
    let up = f(values);
    values[i] = keep - FD_STEP;
    let down = f(values);
    values[i] = keep;
    (up - down) / (2.0 * FD_STEP)
}

fn compare(name: &str, analytic: &[f64], values: &mut [f64], mut f: impl FnMut(&[f64]) -> f64) -> GradCheck {
    let errors = (0..values.len())
        .map(|i| relative_error(analytic[i], central(values, i, &mut f)))
        .collect();
    GradCheck {
        name: name.into(),
        errors,
    }
}

fn random_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
    Tensor4::from_vec(n, c, h, w, random_vec(rng, n * c * h * w)).expect("finite")
}

/// Entries bounded away from zero so ReLU kinks sit outside the stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
    let data = (0..n * c * h * w)
        .map(|_| {
            let m: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor4::from_vec(n, c, h, w, data).expect("finite")
}

fn with_data(t: &Tensor4, data: &[f64]) -> Tensor4 {
    Tensor4 {
        data: data.to_vec(),
        ..t.clone()
    }
}

/// Checks every layer type in isolation against `L = <r, layer(x)>` for a random `r`.
pub fn layer_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    for (k, label) in [(3usize, "conv3x3"), (1, "conv1x1")] {
        let x = random_tensor(&mut rng, 2, 2, 5, 4);
        let mut w = random_vec(&mut rng, 3 * 2 * k * k);
        let mut b = random_vec(&mut rng, 3);
        let r = random_tensor(&mut rng, 2, 3, 5, 4);
        let g = conv2d_same_backward(&x, &w, &r)?;
        let (w0, b0) = (w.clone(), b.clone());
        let mut xd = x.data.clone();
        out.push(compare(&format!("{label}.input"), &g.dx.data, &mut xd, |v| {
            conv2d_same(&with_data(&x, v), &w0, &b0).unwrap().dot(&r)
        }));
        out.push(compare(&format!("{label}.weight"), &g.dweight, &mut w, |v| {
            conv2d_same(&x, v, &b0).unwrap().dot(&r)
        }));
        out.push(compare(&format!("{label}.bias"), &g.dbias, &mut b, |v| {
            conv2d_same(&x, &w0, v).unwrap().dot(&r)
        }));
    }

    {
        let x = random_tensor(&mut rng, 2, 3, 4, 4);
        let mut scale = random_vec(&mut rng, 3);
        let mut shift = random_vec(&mut rng, 3);
        let r = random_tensor(&mut rng, 2, 3, 4, 4);
        let (_, cache) = batchnorm_train(&x, &scale, &shift, 1e-5)?;
        let g = batchnorm_backward(&r, &cache, &scale);
        let (s0, t0) = (scale.clone(), shift.clone());
        let mut xd = x.data.clone();
        out.push(compare("batchnorm.input", &g.dx.data, &mut xd, |v| {
            batchnorm_train(&with_data(&x, v), &s0, &t0, 1e-5).unwrap().0.dot(&r)
        }));
        out.push(compare("batchnorm.scale", &g.dscale, &mut scale, |v| {
            batchnorm_train(&x, v, &t0, 1e-5).unwrap().0.dot(&r)
        }));
        out.push(compare("batchnorm.shift", &g.dshift, &mut shift, |v| {
            batchnorm_train(&x, &s0, v, 1e-5).unwrap().0.dot(&r)
        }));
    }

    {
        let x = away_from_zero(&mut rng, 1, 2, 4, 4);
        let r = random_tensor(&mut rng, 1, 2, 4, 4);
        let g = relu_backward(&r, &x);
        let mut xd = x.data.clone();
        out.push(compare("relu.input", &g.data, &mut xd, |v| relu(&with_data(&x, v)).dot(&r)));
    }

    {
        // Distinct values spaced far beyond the stencil keep every argmax fixed.
        let mut x = Tensor4::zeros(1, 2, 4, 4);
        let mut perm: Vec<usize> = (0..32).collect();
        for i in (1..32).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        for (v, p) in x.data.iter_mut().zip(perm) {
            *v = p as f64 * 0.1;
        }
        let r = random_tensor(&mut rng, 1, 2, 2, 2);
        let (_, arg) = maxpool2(&x)?;
        let g = maxpool2_backward(&r, &arg, x.dims());
        let mut xd = x.data.clone();
        out.push(compare("maxpool.input", &g.data, &mut xd, |v| {
            maxpool2(&with_data(&x, v)).unwrap().0.dot(&r)
        }));
    }

    {
        let x = random_tensor(&mut rng, 2, 4, 3, 3);
        let mut w = random_vec(&mut rng, 4 * 2 * 4);
        let mut b = random_vec(&mut rng, 2);
        let r = random_tensor(&mut rng, 2, 2, 6, 6);
        let g = tconv2_backward(&x, &w, &r)?;
        let (w0, b0) = (w.clone(), b.clone());
        let mut xd = x.data.clone();
        out.push(compare("tconv.input", &g.dx.data, &mut xd, |v| {
            tconv2(&with_data(&x, v), &w0, &b0).unwrap().dot(&r)
        }));
        out.push(compare("tconv.weight", &g.dweight, &mut w, |v| tconv2(&x, v, &b0).unwrap().dot(&r)));
        out.push(compare("tconv.bias", &g.dbias, &mut b, |v| tconv2(&x, &w0, v).unwrap().dot(&r)));
    }

    {
        let a = random_tensor(&mut rng, 1, 2, 3, 3);
        let b = random_tensor(&mut rng, 1, 3, 3, 3);
        let r = random_tensor(&mut rng, 1, 5, 3, 3);
        let (ra, rb) = split_channels(&r, 2);
        let mut ad = a.data.clone();
        out.push(compare("concat.encoder", &ra.data, &mut ad, |v| {
            concat_skip(&with_data(&a, v), &b).unwrap().dot(&r)
        }));
        let mut bd = b.data.clone();
        out.push(compare("concat.decoder", &rb.data, &mut bd, |v| {
            concat_skip(&a, &with_data(&b, v)).unwrap().dot(&r)
        }));
    }

    for reduction in [LossReduction::WeightNormalized, LossReduction::Sum] {
        let scores = random_tensor(&mut rng, 1, 2, 4, 4);
        let truth = Tensor4::from_vec(1, 1, 4, 4, (0..16).map(|_| rng.random_range(0..2) as f64).collect())?;
        let weight = Tensor4::from_vec(1, 1, 4, 4, (0..16).map(|_| rng.random_range(0.5..3.0)).collect())?;
        let g = weighted_ce_grad(&softmax_pixelwise(&scores), &truth, &weight, reduction)?;
        let mut sd = scores.data.clone();
        let name = match reduction {
            LossReduction::WeightNormalized => "softmax_loss.normalized",
            LossReduction::Sum => "softmax_loss.sum",
        };
        out.push(compare(name, &g.data, &mut sd, |v| {
            weighted_ce_loss(&softmax_pixelwise(&with_data(&scores, v)), &truth, &weight, reduction)
                .unwrap()
                .value
        }));
    }
    Ok(out)
}

/// Random binary truth and positive weights for an `h x w` sample.
pub fn random_targets(seed: u64, h: usize, w: usize) -> (Tensor4, Tensor4, Tensor4) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&mut rng, 1, 1, h, w);
    let truth = Tensor4::from_vec(1, 1, h, w, (0..h * w).map(|_| rng.random_range(0..2) as f64).collect())
        .expect("finite");
    let weight = Tensor4::from_vec(1, 1, h, w, (0..h * w).map(|_| rng.random_range(0.5..3.0)).collect())
        .expect("finite");
    (x, truth, weight)
}

/// Checks every trainable parameter of a freshly initialized model on one random sample.
pub fn model_check(config: AnetConfig, side: usize, seed: u64) -> Result<GradCheck> {
    let model = AnetModel::init(config, seed)?;
    let (x, truth, weight) = random_targets(seed + 1, side, side);
    let reduction = LossReduction::WeightNormalized;
    let bundle = model.loss_and_gradients(&x, &truth, &weight, reduction)?;
    let mut probe = model.clone();
    let mut errors = Vec::new();
    for slot in model.slots().iter().filter(|s| s.kind == SlotKind::Param) {
        for i in slot.range() {
            let keep = probe.params[i];
            probe.params[i] = keep + FD_STEP;
            let up = probe.loss(&x, &truth, &weight, reduction)?;
            probe.params[i] = keep - FD_STEP;
            let down = probe.loss(&x, &truth, &weight, reduction)?;
            probe.params[i] = keep;
            errors.push(relative_error(bundle.grads[i], (up - down) / (2.0 * FD_STEP)));
        }
    }
    Ok(GradCheck {
        name: format!("model.depth{}_base{}", config.depth, config.base_channels),
        errors,
    })
}
