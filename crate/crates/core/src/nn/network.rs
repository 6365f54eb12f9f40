use crate::error::{Error, Result};
use crate::nn::loss::cross_entropy_grad;
use crate::nn::ops::{self, ConvGeom, PoolGeom};
use crate::nn::params::{LayerParams, Params};
use crate::nn::spec::{Layer, NetworkSpec};
use crate::tensor::Tensor;

/// Images plus integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape().len() != 4 {
            return Err(Error::shape(
                "batch",
                format!("inputs must be (batch, c, h, w), got {:?}", inputs.shape()),
            ));
        }
        if inputs.batch() != labels.len() {
            return Err(Error::shape(
                "batch",
                format!("{} inputs but {} labels", inputs.batch(), labels.len()),
            ));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> LabeledBatch {
        LabeledBatch {
            inputs: self.inputs.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn with_inputs(&self, inputs: Tensor) -> Result<LabeledBatch> {
        LabeledBatch::new(inputs, self.labels.clone())
    }
}

/// A spec bound to matching parameters, with per-layer shapes precomputed.
#[derive(Debug, Clone, Copy)]
pub struct Net<'a> {
    pub spec: &'a NetworkSpec,
    pub params: &'a Params,
}

impl<'a> Net<'a> {
    pub fn new(spec: &'a NetworkSpec, params: &'a Params) -> Result<Self> {
        spec.validate()?;
        params.check(spec)?;
        Ok(Self { spec, params })
    }

    fn layer_name(&self, index: usize) -> String {
        format!("{index} ({})", self.spec.layers[index].kind())
    }

    fn check_input(&self, index: usize, input: &Tensor, shapes: &[Vec<usize>]) -> Result<()> {
        if input.shape().len() < 2 || input.shape()[1..] != shapes[index][..] {
            return Err(Error::shape(
                self.layer_name(index),
                format!(
                    "input {:?} does not match expected per-sample shape {:?}",
                    input.shape(),
                    shapes[index]
                ),
            ));
        }
        Ok(())
    }

    fn conv_geom(&self, index: usize, in_shape: &[usize]) -> ConvGeom {
        match self.spec.layers[index] {
            Layer::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => ConvGeom {
                in_channels: in_shape[0],
                out_channels,
                height: in_shape[1],
                width: in_shape[2],
                kernel,
                stride,
                pad,
            },
            _ => unreachable!("conv_geom on non-conv layer"),
        }
    }

    fn pool_geom(&self, index: usize, in_shape: &[usize]) -> PoolGeom {
        match self.spec.layers[index] {
            Layer::MaxPool { kernel, stride } => PoolGeom {
                channels: in_shape[0],
                height: in_shape[1],
                width: in_shape[2],
                kernel,
                stride,
            },
            _ => unreachable!("pool_geom on non-pool layer"),
        }
    }

    fn layer_params(&self, index: usize) -> &LayerParams {
        self.params.layers[index]
            .as_ref()
            .expect("checked by Params::check")
    }

    fn apply(&self, index: usize, input: &Tensor, shapes: &[Vec<usize>]) -> Tensor {
        let in_shape = &shapes[index];
        let out_shape = &shapes[index + 1];
        let batch = input.batch();
        let mut full = vec![batch];
        full.extend_from_slice(out_shape);
        let mut out = Tensor::zeros(&full);
        match self.spec.layers[index] {
            Layer::Conv { .. } => {
                let g = self.conv_geom(index, in_shape);
                let p = self.layer_params(index);
                for b in 0..batch {
                    ops::conv2d_forward(&g, input.sample(b), p.weight.data(), p.bias.data(), out.sample_mut(b));
                }
            }
            Layer::Relu => ops::relu_forward(input.data(), out.data_mut()),
            Layer::MaxPool { .. } => {
                let g = self.pool_geom(index, in_shape);
                for b in 0..batch {
                    ops::maxpool_forward(&g, input.sample(b), out.sample_mut(b));
                }
            }
            Layer::Flatten => out.data_mut().copy_from_slice(input.data()),
            Layer::Dense { .. } => {
                let p = self.layer_params(index);
                for b in 0..batch {
                    ops::dense_forward(input.sample(b), p.weight.data(), p.bias.data(), out.sample_mut(b));
                }
            }
        }
        out
    }

    /// Runs layers `start..end` on an activation produced by layer `start - 1`
    /// (or on network input when `start == 0`).
    pub fn forward_range(&self, input: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        if start > end || end > self.spec.layers.len() {
            return Err(Error::invalid(format!(
                "layer range {start}..{end} invalid for {} layers",
                self.spec.layers.len()
            )));
        }
        let shapes = self.spec.layer_shapes()?;
        if start == end {
            return Ok(input.clone());
        }
        self.check_input(start, input, &shapes)?;
        let mut act = self.apply(start, input, &shapes);
        for i in start + 1..end {
            act = self.apply(i, &act, &shapes);
        }
        Ok(act)
    }

    /// Forward pass returning logits and the outputs of the tapped layers, in tap order.
    pub fn eval(&self, inputs: &Tensor, taps: &[usize]) -> Result<(Tensor, Vec<Tensor>)> {
        for &t in taps {
            self.spec.check_layer_index(t)?;
        }
        let shapes = self.spec.layer_shapes()?;
        self.check_input(0, inputs, &shapes)?;
        let mut tapped: Vec<Option<Tensor>> = vec![None; taps.len()];
        let mut act = inputs.clone();
        for i in 0..self.spec.layers.len() {
            act = self.apply(i, &act, &shapes);
            for (slot, _) in tapped.iter_mut().zip(taps).filter(|(_, &t)| t == i) {
                *slot = Some(act.clone());
            }
        }
        Ok((act, tapped.into_iter().map(|t| t.expect("tap filled")).collect()))
    }

    /// Activations from layer `start` onwards: entry 0 is `input`, entry `k`
    /// the output of layer `start + k - 1`. The last entry holds the logits.
    pub fn trace(&self, input: &Tensor, start: usize) -> Result<Vec<Tensor>> {
        self.trace_range(input, start, self.spec.layers.len())
    }

    /// Like [`Net::trace`] but stops after layer `end - 1`.
    pub fn trace_range(&self, input: &Tensor, start: usize, end: usize) -> Result<Vec<Tensor>> {
        if start > end || end > self.spec.layers.len() {
            return Err(Error::invalid(format!(
                "layer range {start}..{end} invalid for {} layers",
                self.spec.layers.len()
            )));
        }
        let shapes = self.spec.layer_shapes()?;
        if start < end {
            self.check_input(start, input, &shapes)?;
        }
        let mut acts = Vec::with_capacity(end - start + 1);
        acts.push(input.clone());
        for i in start..end {
            let next = self.apply(i, acts.last().unwrap(), &shapes);
            acts.push(next);
        }
        Ok(acts)
    }

    /// Back-propagates `grad_out` (gradient w.r.t. the last traced activation)
    /// through the layers covered by a trace from [`Net::trace_range`].
    ///
    /// Parameter gradients are accumulated into `grads` when given. Returns the
    /// gradient w.r.t. the trace input when `need_input_grad` is set.
    pub fn backward_trace(
        &self,
        acts: &[Tensor],
        start: usize,
        grad_out: Tensor,
        mut grads: Option<&mut Params>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        let shapes = self.spec.layer_shapes()?;
        if acts.is_empty() || start + acts.len() - 1 > self.spec.layers.len() {
            return Err(Error::invalid("trace length does not match layer range"));
        }
        let n_layers = start + acts.len() - 1;
        if grad_out.shape() != acts.last().unwrap().shape() {
            return Err(Error::shape(
                self.layer_name(n_layers - 1),
                format!(
                    "output gradient {:?} vs output {:?}",
                    grad_out.shape(),
                    acts.last().unwrap().shape()
                ),
            ));
        }
        let mut grad = grad_out;
        for i in (start..n_layers).rev() {
            let input = &acts[i - start];
            let batch = input.batch();
            let want_input = i > start || need_input_grad;
            let mut grad_in = if want_input {
                Some(Tensor::zeros(input.shape()))
            } else {
                None
            };
            match self.spec.layers[i] {
                Layer::Conv { .. } => {
                    let g = self.conv_geom(i, &shapes[i]);
                    let p = self.layer_params(i);
                    let mut slot = grads.as_deref_mut().map(|gs| {
                        gs.layers[i].as_mut().expect("grad slots mirror params")
                    });
                    for b in 0..batch {
                        let gw = slot
                            .as_deref_mut()
                            .map(|s| (s.weight.data_mut(), s.bias.data_mut()));
                        ops::conv2d_backward(
                            &g,
                            input.sample(b),
                            p.weight.data(),
                            grad.sample(b),
                            gw,
                            grad_in.as_mut().map(|t| t.sample_mut(b)),
                        );
                    }
                }
                Layer::Relu => {
                    if let Some(gi) = grad_in.as_mut() {
                        ops::relu_backward(input.data(), grad.data(), gi.data_mut());
                    }
                }
                Layer::MaxPool { .. } => {
                    if let Some(gi) = grad_in.as_mut() {
                        let g = self.pool_geom(i, &shapes[i]);
                        for b in 0..batch {
                            ops::maxpool_backward(&g, input.sample(b), grad.sample(b), gi.sample_mut(b));
                        }
                    }
                }
                Layer::Flatten => {
                    if let Some(gi) = grad_in.as_mut() {
                        gi.data_mut().copy_from_slice(grad.data());
                    }
                }
                Layer::Dense { .. } => {
                    let p = self.layer_params(i);
                    let mut slot = grads.as_deref_mut().map(|gs| {
                        gs.layers[i].as_mut().expect("grad slots mirror params")
                    });
                    for b in 0..batch {
                        let gw = slot
                            .as_deref_mut()
                            .map(|s| (s.weight.data_mut(), s.bias.data_mut()));
                        ops::dense_backward(
                            input.sample(b),
                            p.weight.data(),
                            grad.sample(b),
                            gw,
                            grad_in.as_mut().map(|t| t.sample_mut(b)),
                        );
                    }
                }
            }
            match grad_in {
                Some(gi) => grad = gi,
                None => return Ok(None),
            }
        }
        Ok(Some(grad))
    }

    /// Mean cross-entropy loss and its gradient w.r.t. every parameter.
    pub fn loss_and_grads(&self, batch: &LabeledBatch) -> Result<(f64, Params)> {
        let acts = self.trace(&batch.inputs, 0)?;
        let (loss, grad_logits) = cross_entropy_grad(acts.last().unwrap(), &batch.labels)?;
        let mut grads = self.params.zeros_like();
        self.backward_trace(&acts, 0, grad_logits, Some(&mut grads), false)?;
        Ok((loss, grads))
    }
}

/// Forward pass of `spec` with `params`, returning logits and tapped activations.
pub fn eval_network(
    spec: &NetworkSpec,
    params: &Params,
    inputs: &Tensor,
    taps: &[usize],
) -> Result<(Tensor, Vec<Tensor>)> {
    Net::new(spec, params)?.eval(inputs, taps)
}

/// Gradients of the mean cross-entropy w.r.t. every parameter.
pub fn backward(spec: &NetworkSpec, params: &Params, batch: &LabeledBatch) -> Result<Params> {
    Ok(Net::new(spec, params)?.loss_and_grads(batch)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Parameters;
    use crate::prng::SplitMix64;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec::new(
            vec![
                Layer::conv_same(2, 3),
                Layer::Relu,
                Layer::MaxPool { kernel: 2, stride: 2 },
                Layer::Flatten,
                Layer::Dense { out_dim: 3 },
            ],
            [1, 4, 4],
            3,
        )
        .unwrap()
    }

    #[test]
    fn one_pixel_conv_network() {
        let spec = NetworkSpec::new(
            vec![Layer::conv_same(1, 1), Layer::Flatten],
            [1, 1, 1],
            1,
        )
        .unwrap();
        let params = Params {
            layers: vec![
                Some(LayerParams {
                    weight: Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap(),
                    bias: Tensor::scalar(1.0),
                }),
                None,
            ],
        };
        let x = Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        let (logits, _) = eval_network(&spec, &params, &x, &[]).unwrap();
        assert_eq!(logits.data(), &[7.0]);
    }

    #[test]
    fn taps_compose_bit_exactly() {
        let spec = tiny_spec();
        let params = Params::init(&spec, &mut SplitMix64::new(1)).unwrap();
        let mut rng = SplitMix64::new(2);
        let x = Tensor::new(vec![3, 1, 4, 4], (0..48).map(|_| rng.next_gaussian()).collect()).unwrap();
        let net = Net::new(&spec, &params).unwrap();
        for k in 0..spec.layers.len() {
            let (logits, taps) = net.eval(&x, &[k]).unwrap();
            let resumed = net.forward_range(&taps[0], k + 1, spec.layers.len()).unwrap();
            assert!(resumed.bit_eq(&logits), "tap {k}");
        }
    }

    #[test]
    fn taps_returned_in_request_order() {
        let spec = tiny_spec();
        let params = Params::init(&spec, &mut SplitMix64::new(1)).unwrap();
        let x = Tensor::filled(&[1, 1, 4, 4], 0.5);
        let (_, taps) = eval_network(&spec, &params, &x, &[3, 0, 3]).unwrap();
        assert_eq!(taps[0].shape(), &[1, 8]);
        assert_eq!(taps[1].shape(), &[1, 2, 4, 4]);
        assert!(taps[0].bit_eq(&taps[2]));
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let spec = tiny_spec();
        let mut params = Params::init(&spec, &mut SplitMix64::new(1)).unwrap();
        params.layers[4].as_mut().unwrap().bias = Tensor::zeros(&[4]);
        let err = Net::new(&spec, &params).unwrap_err().to_string();
        assert!(err.contains("4 (dense)"), "{err}");

        let params = Params::init(&spec, &mut SplitMix64::new(1)).unwrap();
        let bad = Tensor::zeros(&[1, 1, 5, 5]);
        let err = eval_network(&spec, &params, &bad, &[]).unwrap_err().to_string();
        assert!(err.contains("0 (conv)"), "{err}");
    }

    #[test]
    fn bad_tap_rejected() {
        let spec = tiny_spec();
        let params = Params::init(&spec, &mut SplitMix64::new(1)).unwrap();
        assert!(eval_network(&spec, &params, &Tensor::zeros(&[1, 1, 4, 4]), &[5]).is_err());
    }

    #[test]
    fn backward_is_deterministic() {
        let spec = tiny_spec();
        let params = Params::init(&spec, &mut SplitMix64::new(4)).unwrap();
        let mut rng = SplitMix64::new(5);
        let x = Tensor::new(vec![2, 1, 4, 4], (0..32).map(|_| rng.next_gaussian()).collect()).unwrap();
        let batch = LabeledBatch::new(x, vec![0, 2]).unwrap();
        let a = backward(&spec, &params, &batch).unwrap();
        let b = backward(&spec, &params, &batch).unwrap();
        assert_eq!(a.digest(), b.digest());
    }
}
