//! The encoder-decoder network: parameter layout, forward pass and backpropagation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    batchnorm_backward, batchnorm_eval, batchnorm_train, concat_skip, conv2d_same, conv2d_same_backward, maxpool2,
    maxpool2_backward, relu, relu_backward, softmax_pixelwise, split_channels, tconv2, tconv2_backward,
    update_running_stats, weighted_ce_grad, weighted_ce_loss, BnCache, LossReduction, Mode,
};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnetConfig {
    /// Number of encoder blocks.
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub classes: usize,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl Default for AnetConfig {
    fn default() -> Self {
        AnetConfig {
            depth: 3,
            base_channels: 8,
            in_channels: 1,
            classes: 2,
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl AnetConfig {
    pub fn new(depth: usize, base_channels: usize) -> Self {
        AnetConfig {
            depth,
            base_channels,
            ..AnetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be at least 1".into()));
        }
        if self.in_channels != 1 || self.classes != 2 {
            return Err(Error::Config("the network maps one input channel to two classes".into()));
        }
        if !(self.bn_epsilon > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config("batch-norm epsilon and momentum must be positive".into()));
        }
        Ok(())
    }

    /// Channels at encoder levels `0..depth` followed by the bottleneck.
    pub fn channel_schedule(&self) -> Vec<usize> {
        (0..=self.depth).map(|l| self.base_channels << l).collect()
    }

    /// Input sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    /// Trained by the optimizer.
    Param,
    /// Running statistics; updated by training-mode forward passes only.
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: SlotKind,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Slot indices of one conv, batch-norm, ReLU unit.
#[derive(Debug, Clone, Copy)]
struct UnitSlots {
    weight: usize,
    bias: usize,
    scale: usize,
    shift: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, Copy)]
struct DecoderSlots {
    up_weight: usize,
    up_bias: usize,
    units: [UnitSlots; 2],
}

#[derive(Debug, Clone)]
struct Architecture {
    encoder: Vec<[UnitSlots; 2]>,
    bottleneck: [UnitSlots; 2],
    /// Index `l` merges with encoder level `l`.
    decoder: Vec<DecoderSlots>,
    head_weight: usize,
    head_bias: usize,
}

struct LayoutBuilder {
    slots: Vec<ParamSlot>,
    total: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, kind: SlotKind) -> usize {
        let len: usize = shape.iter().product();
        self.slots.push(ParamSlot {
            name,
            shape,
            offset: self.total,
            kind,
        });
        self.total += len;
        self.slots.len() - 1
    }

    fn unit(&mut self, prefix: &str, i: usize, cin: usize, cout: usize) -> UnitSlots {
        UnitSlots {
            weight: self.push(format!("{prefix}.conv{i}.weight"), vec![cout, cin, 3, 3], SlotKind::Param),
            bias: self.push(format!("{prefix}.conv{i}.bias"), vec![cout], SlotKind::Param),
            scale: self.push(format!("{prefix}.bn{i}.scale"), vec![cout], SlotKind::Param),
            shift: self.push(format!("{prefix}.bn{i}.shift"), vec![cout], SlotKind::Param),
            mean: self.push(format!("{prefix}.bn{i}.running_mean"), vec![cout], SlotKind::Buffer),
            var: self.push(format!("{prefix}.bn{i}.running_var"), vec![cout], SlotKind::Buffer),
        }
    }
}

fn build_layout(cfg: &AnetConfig) -> (Vec<ParamSlot>, Architecture) {
    let ch = cfg.channel_schedule();
    let mut b = LayoutBuilder {
        slots: Vec::new(),
        total: 0,
    };
    let mut encoder = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let cin = if l == 0 { cfg.in_channels } else { ch[l - 1] };
        let prefix = format!("enc{l}");
        encoder.push([b.unit(&prefix, 1, cin, ch[l]), b.unit(&prefix, 2, ch[l], ch[l])]);
    }
    let top = cfg.depth;
    let bottleneck = [
        b.unit("bottleneck", 1, ch[top - 1], ch[top]),
        b.unit("bottleneck", 2, ch[top], ch[top]),
    ];
    let mut decoder = Vec::with_capacity(cfg.depth);
    for l in (0..cfg.depth).rev() {
        let prefix = format!("dec{l}");
        let up_weight = b.push(format!("{prefix}.up.weight"), vec![ch[l + 1], ch[l], 2, 2], SlotKind::Param);
        let up_bias = b.push(format!("{prefix}.up.bias"), vec![ch[l]], SlotKind::Param);
        let units = [b.unit(&prefix, 1, 2 * ch[l], ch[l]), b.unit(&prefix, 2, ch[l], ch[l])];
        decoder.push(DecoderSlots {
            up_weight,
            up_bias,
            units,
        });
    }
    decoder.reverse();
    let head_weight = b.push("head.weight".into(), vec![cfg.classes, ch[0], 1, 1], SlotKind::Param);
    let head_bias = b.push("head.bias".into(), vec![cfg.classes], SlotKind::Param);
    (
        b.slots,
        Architecture {
            encoder,
            bottleneck,
            decoder,
            head_weight,
            head_bias,
        },
    )
}

#[derive(Debug, Clone)]
pub struct AnetModel {
    pub config: AnetConfig,
    slots: Vec<ParamSlot>,
    arch: Architecture,
    /// Every slot's values, concatenated in slot order.
    pub params: Vec<f64>,
}

impl PartialEq for AnetModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// Statistics of one training-mode batch-norm call, for the running averages.
#[derive(Debug, Clone)]
pub struct BatchStats {
    mean_slot: usize,
    var_slot: usize,
    count: usize,
    mean: Vec<f64>,
    var: Vec<f64>,
}

struct UnitCache {
    input: Tensor4,
    bn: Option<BnCache>,
    /// Batch-norm output, before the ReLU.
    pre_relu: Tensor4,
}

struct DecoderCache {
    up_input: Tensor4,
    units: [UnitCache; 2],
}

/// Intermediates of a training-mode forward pass.
pub struct ForwardCache {
    encoder: Vec<[UnitCache; 2]>,
    skip_dims: Vec<(usize, usize, usize, usize)>,
    pool_args: Vec<Vec<usize>>,
    bottleneck: [UnitCache; 2],
    decoder: Vec<DecoderCache>,
    head_input: Tensor4,
    stats: Vec<BatchStats>,
}

impl ForwardCache {
    pub fn batch_stats(&self) -> &[BatchStats] {
        &self.stats
    }
}

/// Loss value, gradients in parameter layout (zero on buffers) and batch statistics.
#[derive(Debug, Clone)]
pub struct LossBundle {
    pub value: f64,
    pub clamped: usize,
    pub grads: Vec<f64>,
    pub stats: Vec<BatchStats>,
}

impl AnetModel {
    /// He-normal kernels, zero biases, unit scale and zero shift, running variance 1.
    pub fn init(config: AnetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (slots, arch) = build_layout(&config);
        let total = slots.last().map(|s| s.offset + s.len()).unwrap_or(0);
        let mut params = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for slot in &slots {
            let range = slot.range();
            if slot.name.ends_with(".weight") {
                let fan_in = if slot.name.contains(".up.") {
                    // Each output pixel of the 2x2 stride-2 transposed conv sees one tap per input channel.
                    slot.shape[0]
                } else {
                    slot.shape[1..].iter().product()
                };
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                for v in &mut params[range] {
                    *v = normal.sample(&mut rng);
                }
            } else if slot.name.ends_with(".scale") || slot.name.ends_with(".running_var") {
                params[range].fill(1.0);
            }
        }
        Ok(AnetModel {
            config,
            slots,
            arch,
            params,
        })
    }

    /// Rebuilds a model from stored parameter values; the layout must match `config`.
    pub fn from_params(config: AnetConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let (slots, arch) = build_layout(&config);
        let total = slots.last().map(|s| s.offset + s.len()).unwrap_or(0);
        if params.len() != total {
            return Err(Error::Shape(format!(
                "{} parameter values for a layout of {}",
                params.len(),
                total
            )));
        }
        let model = AnetModel {
            config,
            slots,
            arch,
            params,
        };
        model.check_invariants()?;
        Ok(model)
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn slot(&self, name: &str) -> Option<&ParamSlot> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn values(&self, slot: usize) -> &[f64] {
        &self.params[self.slots[slot].range()]
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.slots.iter().filter(|s| s.kind == SlotKind::Param).map(|s| s.len()).sum()
    }

    pub fn check_invariants(&self) -> Result<()> {
        if let Some(i) = self.params.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("parameter {i} is not finite")));
        }
        for s in self.slots.iter().filter(|s| s.name.ends_with(".running_var")) {
            if self.params[s.range()].iter().any(|v| *v <= 0.0) {
                return Err(Error::Shape(format!("{} has a non-positive entry", s.name)));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let m = self.config.size_multiple();
        if x.c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "input has {} channels, expected {}",
                x.c, self.config.in_channels
            )));
        }
        if x.n == 0 || x.h == 0 || x.w == 0 || x.h % m != 0 || x.w % m != 0 {
            return Err(Error::Shape(format!(
                "input {}x{} is not a nonzero multiple of {m} (depth {})",
                x.w, x.h, self.config.depth
            )));
        }
        Ok(())
    }

    fn unit_forward(&self, u: &UnitSlots, x: Tensor4, mode: Mode, stats: &mut Vec<BatchStats>) -> Result<(Tensor4, UnitCache)> {
        let z = conv2d_same(&x, self.values(u.weight), self.values(u.bias))?;
        let (y, bn) = match mode {
            Mode::Train => {
                let (y, cache) =
                    batchnorm_train(&z, self.values(u.scale), self.values(u.shift), self.config.bn_epsilon)?;
                stats.push(BatchStats {
                    mean_slot: u.mean,
                    var_slot: u.var,
                    count: z.n * z.h * z.w,
                    mean: cache.mean.clone(),
                    var: cache.var.clone(),
                });
                (y, Some(cache))
            }
            Mode::Eval => (
                batchnorm_eval(
                    &z,
                    self.values(u.scale),
                    self.values(u.shift),
                    self.values(u.mean),
                    self.values(u.var),
                    self.config.bn_epsilon,
                )?,
                None,
            ),
        };
        let out = relu(&y);
        Ok((
            out,
            UnitCache {
                input: x,
                bn,
                pre_relu: y,
            },
        ))
    }

    /// Class scores `(N, classes, H, W)`; the cache is returned in training mode.
    pub fn forward(&self, x: &Tensor4, mode: Mode) -> Result<(Tensor4, Option<ForwardCache>)> {
        self.check_input(x)?;
        let mut stats = Vec::new();
        let mut enc_caches = Vec::with_capacity(self.config.depth);
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut pool_args = Vec::with_capacity(self.config.depth);
        let mut cur = x.clone();
        for units in &self.arch.encoder {
            let (a, c1) = self.unit_forward(&units[0], cur, mode, &mut stats)?;
            let (b, c2) = self.unit_forward(&units[1], a, mode, &mut stats)?;
            let (pooled, arg) = maxpool2(&b)?;
            enc_caches.push([c1, c2]);
            skips.push(b);
            pool_args.push(arg);
            cur = pooled;
        }
        let (a, b1) = self.unit_forward(&self.arch.bottleneck[0], cur, mode, &mut stats)?;
        let (mut cur, b2) = self.unit_forward(&self.arch.bottleneck[1], a, mode, &mut stats)?;
        let mut dec_caches: Vec<Option<DecoderCache>> = (0..self.config.depth).map(|_| None).collect();
        for l in (0..self.config.depth).rev() {
            let d = &self.arch.decoder[l];
            let up = tconv2(&cur, self.values(d.up_weight), self.values(d.up_bias))?;
            let merged = concat_skip(&skips[l], &up)?;
            let (a, c1) = self.unit_forward(&d.units[0], merged, mode, &mut stats)?;
            let (b, c2) = self.unit_forward(&d.units[1], a, mode, &mut stats)?;
            dec_caches[l] = Some(DecoderCache {
                up_input: cur,
                units: [c1, c2],
            });
            cur = b;
        }
        let scores = conv2d_same(&cur, self.values(self.arch.head_weight), self.values(self.arch.head_bias))?;
        let cache = (mode == Mode::Train).then(|| ForwardCache {
            encoder: enc_caches,
            skip_dims: skips.iter().map(|s| s.dims()).collect(),
            pool_args,
            bottleneck: [b1, b2],
            decoder: dec_caches.into_iter().map(|c| c.expect("every level visited")).collect(),
            head_input: cur,
            stats,
        });
        Ok((scores, cache))
    }

    /// Applies the running-average update from a training-mode pass.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats]) {
        let momentum = self.config.bn_momentum;
        for s in stats {
            let mean_range = self.slots[s.mean_slot].range();
            let var_range = self.slots[s.var_slot].range();
            let mut mean = self.params[mean_range.clone()].to_vec();
            let mut var = self.params[var_range.clone()].to_vec();
            update_running_stats(&mut mean, &mut var, &s.mean, &s.var, s.count, momentum);
            self.params[mean_range].copy_from_slice(&mean);
            self.params[var_range].copy_from_slice(&var);
        }
    }

    fn add_grad(&self, grads: &mut [f64], slot: usize, g: &[f64]) {
        for (d, v) in grads[self.slots[slot].range()].iter_mut().zip(g) {
            *d += v;
        }
    }

    fn unit_backward(&self, u: &UnitSlots, cache: &UnitCache, dout: &Tensor4, grads: &mut [f64]) -> Result<Tensor4> {
        let dy = relu_backward(dout, &cache.pre_relu);
        let bn = cache.bn.as_ref().expect("training-mode cache");
        let b = batchnorm_backward(&dy, bn, self.values(u.scale));
        self.add_grad(grads, u.scale, &b.dscale);
        self.add_grad(grads, u.shift, &b.dshift);
        let c = conv2d_same_backward(&cache.input, self.values(u.weight), &b.dx)?;
        self.add_grad(grads, u.weight, &c.dweight);
        self.add_grad(grads, u.bias, &c.dbias);
        Ok(c.dx)
    }

    /// Backpropagates `dscores` through a training-mode pass.
    pub fn backward(&self, cache: &ForwardCache, dscores: &Tensor4) -> Result<Vec<f64>> {
        let mut grads = vec![0.0; self.params.len()];
        let head = conv2d_same_backward(&cache.head_input, self.values(self.arch.head_weight), dscores)?;
        self.add_grad(&mut grads, self.arch.head_weight, &head.dweight);
        self.add_grad(&mut grads, self.arch.head_bias, &head.dbias);
        let mut d = head.dx;
        let mut dskips: Vec<Option<Tensor4>> = (0..self.config.depth).map(|_| None).collect();
        for l in 0..self.config.depth {
            let slots = &self.arch.decoder[l];
            let dc = &cache.decoder[l];
            d = self.unit_backward(&slots.units[1], &dc.units[1], &d, &mut grads)?;
            d = self.unit_backward(&slots.units[0], &dc.units[0], &d, &mut grads)?;
            let (dskip, dup) = split_channels(&d, cache.skip_dims[l].1);
            dskips[l] = Some(dskip);
            let t = tconv2_backward(&dc.up_input, self.values(slots.up_weight), &dup)?;
            self.add_grad(&mut grads, slots.up_weight, &t.dweight);
            self.add_grad(&mut grads, slots.up_bias, &t.dbias);
            d = t.dx;
        }
        d = self.unit_backward(&self.arch.bottleneck[1], &cache.bottleneck[1], &d, &mut grads)?;
        d = self.unit_backward(&self.arch.bottleneck[0], &cache.bottleneck[0], &d, &mut grads)?;
        for l in (0..self.config.depth).rev() {
            let mut dblock = maxpool2_backward(&d, &cache.pool_args[l], cache.skip_dims[l]);
            for (a, b) in dblock.data.iter_mut().zip(&dskips[l].take().expect("set above").data) {
                *a += b;
            }
            let units = &self.arch.encoder[l];
            let ec = &cache.encoder[l];
            d = self.unit_backward(&units[1], &ec[1], &dblock, &mut grads)?;
            d = self.unit_backward(&units[0], &ec[0], &d, &mut grads)?;
        }
        Ok(grads)
    }

    /// Training-mode loss and its gradient for every parameter.
    pub fn loss_and_gradients(
        &self,
        x: &Tensor4,
        truth: &Tensor4,
        weight: &Tensor4,
        reduction: LossReduction,
    ) -> Result<LossBundle> {
        let (scores, cache) = self.forward(x, Mode::Train)?;
        let cache = cache.expect("training mode returns a cache");
        let probs = softmax_pixelwise(&scores);
        let loss = weighted_ce_loss(&probs, truth, weight, reduction)?;
        let dscores = weighted_ce_grad(&probs, truth, weight, reduction)?;
        let grads = self.backward(&cache, &dscores)?;
        Ok(LossBundle {
            value: loss.value,
            clamped: loss.clamped,
            grads,
            stats: cache.stats,
        })
    }

    /// Training-mode loss only (no gradients, model untouched).
    pub fn loss(&self, x: &Tensor4, truth: &Tensor4, weight: &Tensor4, reduction: LossReduction) -> Result<f64> {
        let (scores, _) = self.forward(x, Mode::Train)?;
        Ok(weighted_ce_loss(&softmax_pixelwise(&scores), truth, weight, reduction)?.value)
    }
}

/// Free-function form of [`AnetModel::loss_and_gradients`].
pub fn model_gradients(
    model: &AnetModel,
    x: &Tensor4,
    truth: &Tensor4,
    weight: &Tensor4,
    reduction: LossReduction,
) -> Result<LossBundle> {
    model.loss_and_gradients(x, truth, weight, reduction)
}
