//! Small residual units spliced into a frozen network at the channels
//! selected by a significance mask, and their training.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::debug;

use crate::baseline::{decode_checkpoint_prefix, encode_checkpoint, put_u16, put_u32, Checkpoint, Reader, TrainHyper};
use crate::degrade::{apply_chain, DegradationSpec};
use crate::error::{Error, Result};
use crate::nn::ops::{self, ConvGeom};
use crate::nn::{cross_entropy, cross_entropy_grad, LabeledBatch, LayerParams, Parameters, Sgd};
use crate::prng::SplitMix64;
use crate::susceptibility::SignificanceMask;
use crate::tensor::Tensor;

const UNITS_MAGIC: &[u8; 4] = b"GSGU";
const KERNEL: usize = 3;

/// Units together may use at most this fraction of the baseline's parameters.
pub const PARAM_BUDGET: f64 = 0.25;

/// Residual block on selected channels:
/// `x_S ← x_S + conv2(relu(conv1(x_S)))`, both convs 3×3 with same padding.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeUnit {
    pub layer_index: usize,
    /// Ascending channel indices at `layer_index`.
    pub channels: Vec<usize>,
    pub width: usize,
    /// `(width, n, 3, 3)`
    pub conv1: LayerParams,
    /// `(n, width, 3, 3)`
    pub conv2: LayerParams,
}

impl Parameters for GenerativeUnit {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.conv1.weight, &self.conv1.bias, &self.conv2.weight, &self.conv2.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
        ]
    }
}

impl Parameters for Vec<GenerativeUnit> {
    fn tensors(&self) -> Vec<&Tensor> {
        self.iter().flat_map(|u| u.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.iter_mut().flat_map(|u| u.tensors_mut()).collect()
    }
}

/// Intermediate values kept for the backward pass.
struct UnitCache {
    gathered: Tensor,
    hidden: Tensor,
    activated: Tensor,
}

/// Hidden width used when none is configured.
pub fn default_width(n: usize) -> usize {
    8.max(n / 2)
}

/// Parameter count of a unit on `n` channels with hidden width `width`.
pub fn unit_param_count(n: usize, width: usize) -> usize {
    n * width * KERNEL * KERNEL + width + width * n * KERNEL * KERNEL + n
}

impl GenerativeUnit {
    fn n(&self) -> usize {
        self.channels.len()
    }

    fn geoms(&self, height: usize, width: usize) -> (ConvGeom, ConvGeom) {
        let g = |i, o| ConvGeom {
            in_channels: i,
            out_channels: o,
            height,
            width,
            kernel: KERNEL,
            stride: 1,
            pad: KERNEL / 2,
        };
        (g(self.n(), self.width), g(self.width, self.n()))
    }

    fn check_input(&self, act: &Tensor) -> Result<()> {
        let name = || format!("unit at layer {}", self.layer_index);
        if act.shape().len() != 4 {
            return Err(Error::shape(name(), format!("expected 4-D activation, got {:?}", act.shape())));
        }
        if let Some(&c) = self.channels.last() {
            if c >= act.shape()[1] {
                return Err(Error::shape(
                    name(),
                    format!("channel {c} selected but activation has {} channels", act.shape()[1]),
                ));
            }
        }
        Ok(())
    }

    fn gather(&self, act: &Tensor) -> Tensor {
        let [b, _, h, w] = [act.shape()[0], act.shape()[1], act.shape()[2], act.shape()[3]];
        let plane = h * w;
        let mut out = Tensor::zeros(&[b, self.n(), h, w]);
        for s in 0..b {
            let src = act.sample(s);
            let dst = out.sample_mut(s);
            for (k, &c) in self.channels.iter().enumerate() {
                dst[k * plane..(k + 1) * plane].copy_from_slice(&src[c * plane..(c + 1) * plane]);
            }
        }
        out
    }

    fn forward_cached(&self, act: &Tensor) -> Result<(Tensor, UnitCache)> {
        self.check_input(act)?;
        let (h, w) = (act.shape()[2], act.shape()[3]);
        let plane = h * w;
        let (g1, g2) = self.geoms(h, w);
        let gathered = self.gather(act);
        let batch = act.batch();
        let mut hidden = Tensor::zeros(&[batch, self.width, h, w]);
        let mut activated = Tensor::zeros(&[batch, self.width, h, w]);
        let mut residual = vec![0.0; self.n() * plane];
        let mut out = act.clone();
        for s in 0..batch {
            ops::conv2d_forward(
                &g1,
                gathered.sample(s),
                self.conv1.weight.data(),
                self.conv1.bias.data(),
                hidden.sample_mut(s),
            );
            ops::relu_forward(hidden.sample(s), activated.sample_mut(s));
            ops::conv2d_forward(
                &g2,
                activated.sample(s),
                self.conv2.weight.data(),
                self.conv2.bias.data(),
                &mut residual,
            );
            let dst = out.sample_mut(s);
            for (k, &c) in self.channels.iter().enumerate() {
                for (d, &r) in dst[c * plane..(c + 1) * plane].iter_mut().zip(&residual[k * plane..(k + 1) * plane]) {
                    *d += r;
                }
            }
        }
        Ok((
            out,
            UnitCache {
                gathered,
                hidden,
                activated,
            },
        ))
    }

    /// Applies the unit to a `(batch, channels, h, w)` activation. Channels
    /// outside the selection are copied unchanged.
    pub fn forward(&self, act: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(act)?.0)
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// w.r.t. the unit input when `need_input_grad` is set.
    fn backward(
        &self,
        cache: &UnitCache,
        grad_out: &Tensor,
        grads: &mut GenerativeUnit,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let (h, w) = (grad_out.shape()[2], grad_out.shape()[3]);
        let plane = h * w;
        let (g1, g2) = self.geoms(h, w);
        let grad_sel = self.gather(grad_out);
        let mut grad_act = vec![0.0; self.width * plane];
        let mut grad_hidden = vec![0.0; self.width * plane];
        let mut grad_in_sel = vec![0.0; self.n() * plane];
        let mut grad_input = need_input_grad.then(|| grad_out.clone());
        for s in 0..grad_out.batch() {
            grad_act.fill(0.0);
            ops::conv2d_backward(
                &g2,
                cache.activated.sample(s),
                self.conv2.weight.data(),
                grad_sel.sample(s),
                Some((grads.conv2.weight.data_mut(), grads.conv2.bias.data_mut())),
                Some(&mut grad_act),
            );
            grad_hidden.fill(0.0);
            ops::relu_backward(cache.hidden.sample(s), &grad_act, &mut grad_hidden);
            grad_in_sel.fill(0.0);
            ops::conv2d_backward(
                &g1,
                cache.gathered.sample(s),
                self.conv1.weight.data(),
                &grad_hidden,
                Some((grads.conv1.weight.data_mut(), grads.conv1.bias.data_mut())),
                grad_input.is_some().then_some(&mut grad_in_sel[..]),
            );
            if let Some(gi) = grad_input.as_mut() {
                let dst = gi.sample_mut(s);
                for (k, &c) in self.channels.iter().enumerate() {
                    for (d, &v) in dst[c * plane..(c + 1) * plane].iter_mut().zip(&grad_in_sel[k * plane..(k + 1) * plane]) {
                        *d += v;
                    }
                }
            }
        }
        grad_input
    }

    fn zeros_like(&self) -> Self {
        Self {
            layer_index: self.layer_index,
            channels: self.channels.clone(),
            width: self.width,
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
        }
    }
}

/// Builds a unit on the channels of `mask` with a Glorot-initialized first
/// conv and an all-zero second conv, so the unit starts as the identity.
pub fn build_generative_unit(
    baseline: &Checkpoint,
    mask: &SignificanceMask,
    width: usize,
    rng: &mut SplitMix64,
) -> Result<GenerativeUnit> {
    let shape = baseline.spec.output_shape(mask.layer_index)?;
    if shape.len() != 3 || shape[0] != mask.selected.len() {
        return Err(Error::shape(
            format!("mask for layer {}", mask.layer_index),
            format!("{} mask entries for layer output {shape:?}", mask.selected.len()),
        ));
    }
    let channels = mask.channels();
    let n = channels.len();
    if n == 0 {
        return Err(Error::invalid(format!(
            "mask at layer {} selects no channels",
            mask.layer_index
        )));
    }
    if width == 0 {
        return Err(Error::invalid("unit width must be at least 1"));
    }
    check_budget(unit_param_count(n, width), baseline)?;
    let area = KERNEL * KERNEL;
    let conv1 = LayerParams::glorot(&[width, n, KERNEL, KERNEL], n * area, width * area, rng);
    let conv2 = LayerParams {
        weight: Tensor::zeros(&[n, width, KERNEL, KERNEL]),
        bias: Tensor::zeros(&[n]),
    };
    Ok(GenerativeUnit {
        layer_index: mask.layer_index,
        channels,
        width,
        conv1,
        conv2,
    })
}

fn check_budget(unit_params: usize, baseline: &Checkpoint) -> Result<()> {
    let base = baseline.params.param_count();
    if unit_params as f64 >= PARAM_BUDGET * base as f64 {
        return Err(Error::invalid(format!(
            "generative units need {unit_params} parameters, budget is under {} ({}% of {base})",
            (PARAM_BUDGET * base as f64).ceil(),
            PARAM_BUDGET * 100.0
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegKind {
    L1,
    L2,
}

impl fmt::Display for RegKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegKind::L1 => "l1",
            RegKind::L2 => "l2",
        })
    }
}

impl FromStr for RegKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(RegKind::L1),
            "l2" => Ok(RegKind::L2),
            _ => Err(Error::invalid(format!("unknown regularizer `{s}` (expected l1 or l2)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizationSpec {
    pub kind: RegKind,
    pub lambda: f64,
}

impl RegularizationSpec {
    pub fn new(kind: RegKind, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be finite and non-negative, got {lambda}")));
        }
        Ok(Self { kind, lambda })
    }
}

/// ρ over every unit parameter (weights and biases).
pub fn regularizer<P: Parameters>(units: &P, kind: RegKind) -> f64 {
    let values = units.tensors().into_iter().flat_map(|t| t.data().iter());
    match kind {
        RegKind::L1 => values.map(|v| v.abs()).sum(),
        RegKind::L2 => values.map(|v| v * v).sum(),
    }
}

/// Adds `λ·∂ρ/∂w` to `grads`. The ℓ1 subgradient at zero is taken as zero.
fn add_regularizer_grad(units: &[GenerativeUnit], grads: &mut [GenerativeUnit], reg: RegularizationSpec) {
    for (u, g) in units.iter().zip(grads.iter_mut()) {
        for (p, gp) in u.tensors().into_iter().zip(g.tensors_mut()) {
            for (&w, d) in p.data().iter().zip(gp.data_mut()) {
                *d += match reg.kind {
                    RegKind::L2 => 2.0 * reg.lambda * w,
                    RegKind::L1 => reg.lambda * if w == 0.0 { 0.0 } else { w.signum() },
                };
            }
        }
    }
}

/// A frozen baseline with generative units at some of its layers.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeNetwork {
    pub baseline: Checkpoint,
    /// Sorted by layer, at most one unit per layer.
    pub units: Vec<GenerativeUnit>,
}

/// Pairs each unit with its mask and checks both against the baseline.
pub fn assemble_gen_net(
    baseline: Checkpoint,
    masks: &[SignificanceMask],
    units: Vec<GenerativeUnit>,
) -> Result<GenerativeNetwork> {
    if masks.len() != units.len() {
        return Err(Error::invalid(format!(
            "{} masks for {} units",
            masks.len(),
            units.len()
        )));
    }
    for (m, u) in masks.iter().zip(&units) {
        if m.layer_index != u.layer_index || m.channels() != u.channels {
            return Err(Error::invalid(format!(
                "unit at layer {} does not match mask at layer {}",
                u.layer_index, m.layer_index
            )));
        }
    }
    GenerativeNetwork::new(baseline, units)
}

impl GenerativeNetwork {
    pub fn new(baseline: Checkpoint, mut units: Vec<GenerativeUnit>) -> Result<Self> {
        baseline.net()?;
        units.sort_by_key(|u| u.layer_index);
        for pair in units.windows(2) {
            if pair[0].layer_index == pair[1].layer_index {
                return Err(Error::invalid(format!(
                    "two units at layer {}",
                    pair[0].layer_index
                )));
            }
        }
        for u in &units {
            let shape = baseline.spec.output_shape(u.layer_index)?;
            let n = u.channels.len();
            let ok_channels = n > 0
                && shape.len() == 3
                && u.channels.windows(2).all(|p| p[0] < p[1])
                && u.channels[n - 1] < shape[0];
            let ok_params = u.conv1.weight.shape() == [u.width, n, KERNEL, KERNEL]
                && u.conv1.bias.shape() == [u.width]
                && u.conv2.weight.shape() == [n, u.width, KERNEL, KERNEL]
                && u.conv2.bias.shape() == [n];
            if !ok_channels || !ok_params {
                return Err(Error::shape(
                    format!("unit at layer {}", u.layer_index),
                    format!("{n} channels of width {} do not fit layer output {shape:?}", u.width),
                ));
            }
        }
        check_budget(units.param_count(), &baseline)?;
        Ok(Self { baseline, units })
    }

    /// Selection masks implied by the units.
    pub fn masks(&self) -> Result<Vec<SignificanceMask>> {
        self.units
            .iter()
            .map(|u| {
                let channels = self.baseline.spec.output_shape(u.layer_index)?[0];
                let mut selected = vec![false; channels];
                for &c in &u.channels {
                    selected[c] = true;
                }
                Ok(SignificanceMask {
                    layer_index: u.layer_index,
                    selected,
                    rule: crate::susceptibility::MaskRule::TopK(u.channels.len()),
                })
            })
            .collect()
    }

    fn unit_at(&self, layer: usize) -> Option<&GenerativeUnit> {
        self.units.iter().find(|u| u.layer_index == layer)
    }

    /// Logits and the (post-unit) outputs of the tapped layers, in tap order.
    pub fn eval(&self, inputs: &Tensor, taps: &[usize]) -> Result<(Tensor, Vec<Tensor>)> {
        let net = self.baseline.net()?;
        for &t in taps {
            self.baseline.spec.check_layer_index(t)?;
        }
        let mut tapped: Vec<Option<Tensor>> = vec![None; taps.len()];
        let mut act = inputs.clone();
        for i in 0..self.baseline.spec.layers.len() {
            act = net.forward_range(&act, i, i + 1)?;
            if let Some(u) = self.unit_at(i) {
                act = u.forward(&act)?;
            }
            for (slot, _) in tapped.iter_mut().zip(taps).filter(|(_, &t)| t == i) {
                *slot = Some(act.clone());
            }
        }
        Ok((act, tapped.into_iter().map(|t| t.expect("tap filled")).collect()))
    }

    pub fn logits(&self, inputs: &Tensor) -> Result<Tensor> {
        Ok(self.eval(inputs, &[])?.0)
    }

    /// Baseline activation entering the first unit (output of its layer).
    fn first_unit_input(&self, inputs: &Tensor) -> Result<Tensor> {
        let first = self.units.first().ok_or_else(|| Error::invalid("network has no generative units"))?;
        self.baseline.net()?.forward_range(inputs, 0, first.layer_index + 1)
    }

    /// Mean cross-entropy and unit gradients, starting from the baseline
    /// activation at the first unit's layer.
    fn loss_and_grads_from(&self, act: &Tensor, labels: &[usize]) -> Result<(f64, Vec<GenerativeUnit>)> {
        let net = self.baseline.net()?;
        let n_layers = self.baseline.spec.layers.len();
        let mut caches = Vec::with_capacity(self.units.len());
        let mut traces = Vec::with_capacity(self.units.len());
        let mut act = act.clone();
        for (j, u) in self.units.iter().enumerate() {
            let (out, cache) = u.forward_cached(&act)?;
            let end = self.units.get(j + 1).map_or(n_layers, |next| next.layer_index + 1);
            let trace = net.trace_range(&out, u.layer_index + 1, end)?;
            act = trace.last().expect("trace has input").clone();
            caches.push(cache);
            traces.push(trace);
        }
        let (loss, mut grad) = cross_entropy_grad(&act, labels)?;
        let mut grads: Vec<GenerativeUnit> = self.units.iter().map(GenerativeUnit::zeros_like).collect();
        for j in (0..self.units.len()).rev() {
            let u = &self.units[j];
            grad = net
                .backward_trace(&traces[j], u.layer_index + 1, grad, None, true)?
                .expect("input gradient requested");
            match u.backward(&caches[j], &grad, &mut grads[j], j > 0) {
                Some(g) => grad = g,
                None => break,
            }
        }
        Ok((loss, grads))
    }
}

/// `E = λρ(W_gen) + mean cross-entropy` on `batch`.
pub fn objective(gen_net: &GenerativeNetwork, batch: &LabeledBatch, reg: RegularizationSpec) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("objective needs a non-empty batch"));
    }
    let ce = cross_entropy(&gen_net.logits(&batch.inputs)?, &batch.labels)?;
    Ok(reg.lambda * regularizer(&gen_net.units, reg.kind) + ce)
}

/// `E` and `∂E/∂W_gen` for every unit, in unit order.
pub fn objective_and_grads(
    gen_net: &GenerativeNetwork,
    batch: &LabeledBatch,
    reg: RegularizationSpec,
) -> Result<(f64, Vec<GenerativeUnit>)> {
    let act = gen_net.first_unit_input(&batch.inputs)?;
    let (ce, mut grads) = gen_net.loss_and_grads_from(&act, &batch.labels)?;
    add_regularizer_grad(&gen_net.units, &mut grads, reg);
    Ok((reg.lambda * regularizer(&gen_net.units, reg.kind) + ce, grads))
}

/// Trains the units on every training image at every degradation level
/// (equal shares), leaving the baseline untouched. Returns the trained
/// network and the mean objective of the final epoch.
pub fn train_units(
    gen_net: GenerativeNetwork,
    train: &LabeledBatch,
    levels: &[Vec<DegradationSpec>],
    reg: RegularizationSpec,
    hyper: &TrainHyper,
) -> Result<(GenerativeNetwork, f64)> {
    hyper.validate()?;
    if gen_net.units.is_empty() {
        return Err(Error::invalid("train_units needs at least one generative unit"));
    }
    if train.is_empty() || levels.is_empty() {
        return Err(Error::invalid("unit training needs images and at least one degradation level"));
    }
    // the baseline is frozen, so the prefix up to the first unit is computed once
    let cached = levels
        .iter()
        .map(|chain| gen_net.first_unit_input(&apply_chain(chain, &train.inputs)?))
        .collect::<Result<Vec<_>>>()?;
    let n = train.len();
    let mut order: Vec<usize> = (0..n * levels.len()).collect();
    let mut rng = SplitMix64::new(hyper.seed);
    let mut opt = Sgd::new(hyper.lr, hyper.momentum);
    let mut gen_net = gen_net;
    let mut final_objective = f64::NAN;
    for epoch in 0..hyper.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let parts: Vec<Tensor> = chunk
                .iter()
                .map(|&e| cached[e / n].select(&[e % n]))
                .collect();
            let act = Tensor::concat(&parts)?;
            let labels: Vec<usize> = chunk.iter().map(|&e| train.labels[e % n]).collect();
            let (ce, mut grads) = gen_net.loss_and_grads_from(&act, &labels)?;
            let e = reg.lambda * regularizer(&gen_net.units, reg.kind) + ce;
            if !e.is_finite() {
                return Err(Error::Divergence { epoch, loss: e });
            }
            total += e * chunk.len() as f64;
            add_regularizer_grad(&gen_net.units, &mut grads, reg);
            opt.step(&mut gen_net.units, &grads)?;
            if !gen_net.units.tensors().iter().all(|t| t.is_finite()) {
                return Err(Error::Divergence { epoch, loss: f64::NAN });
            }
        }
        final_objective = total / order.len() as f64;
        debug!("unit epoch {epoch}: objective {final_objective:.5}");
    }
    Ok((gen_net, final_objective))
}

pub fn encode_units(units: &[GenerativeUnit]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(UNITS_MAGIC);
    put_u16(&mut out, units.len() as u16);
    for u in units {
        put_u32(&mut out, u.layer_index);
        put_u32(&mut out, u.channels.len());
        for &c in &u.channels {
            put_u32(&mut out, c);
        }
        put_u32(&mut out, u.width);
        for t in u.tensors() {
            t.write_le_bytes(&mut out);
        }
    }
    out
}

pub fn decode_units(bytes: &[u8]) -> Result<Vec<GenerativeUnit>> {
    let mut r = Reader::new(bytes, "generative unit section");
    r.magic(UNITS_MAGIC)?;
    let count = r.u16()? as usize;
    let mut units = Vec::with_capacity(count);
    for _ in 0..count {
        let layer_index = r.u32()?;
        let n = r.u32()?;
        if n > r.remaining() / 4 {
            return Err(Error::format("generative unit section", format!("{n} channel indices"), "truncated file"));
        }
        let channels = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let width = r.u32()?;
        let mut tensor = |shape: Vec<usize>| -> Result<Tensor> {
            let len = shape.iter().product();
            Tensor::new(shape, r.f64s(len)?)
        };
        let conv1 = LayerParams {
            weight: tensor(vec![width, n, KERNEL, KERNEL])?,
            bias: tensor(vec![width])?,
        };
        let conv2 = LayerParams {
            weight: tensor(vec![n, width, KERNEL, KERNEL])?,
            bias: tensor(vec![n])?,
        };
        units.push(GenerativeUnit {
            layer_index,
            channels,
            width,
            conv1,
            conv2,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::format(
            "generative unit section",
            format!("{} bytes", r.position()),
            format!("{} bytes (trailing data)", bytes.len()),
        ));
    }
    Ok(units)
}

/// Baseline checkpoint followed by the unit section.
pub fn encode_gen_net(gen_net: &GenerativeNetwork) -> Vec<u8> {
    let mut out = encode_checkpoint(&gen_net.baseline);
    out.extend(encode_units(&gen_net.units));
    out
}

pub fn decode_gen_net(bytes: &[u8]) -> Result<GenerativeNetwork> {
    let (baseline, used) = decode_checkpoint_prefix(bytes)?;
    GenerativeNetwork::new(baseline, decode_units(&bytes[used..])?)
}

pub fn save_gen_net(gen_net: &GenerativeNetwork, path: &Path) -> Result<()> {
    fs::write(path, encode_gen_net(gen_net))?;
    Ok(())
}

pub fn load_gen_net(path: &Path) -> Result<GenerativeNetwork> {
    decode_gen_net(&fs::read(path)?)
}
