use crate::error::{Error, Result};
use crate::nn::spec::{Layer, NetworkSpec};
use crate::prng::SplitMix64;
use crate::tensor::{digest_tensors, Tensor};

/// Anything the optimizer can update: an ordered list of tensors.
pub trait Parameters {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// SHA-256 of the parameter bit patterns.
    fn digest(&self) -> String {
        digest_tensors(self.tensors())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot(weight_shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut SplitMix64) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = weight_shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(-limit, limit)).collect();
        Self {
            weight: Tensor::new(weight_shape.to_vec(), data).expect("shape from spec"),
            bias: Tensor::zeros(&[weight_shape[0]]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }
}

/// Parameters of a [`NetworkSpec`], one optional slot per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub layers: Vec<Option<LayerParams>>,
}

/// `(weight shape, bias shape)` expected for each layer.
pub fn expected_shapes(spec: &NetworkSpec) -> Result<Vec<Option<(Vec<usize>, Vec<usize>)>>> {
    let shapes = spec.layer_shapes()?;
    Ok(spec
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| match *layer {
            Layer::Conv {
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, shapes[i][0], kernel, kernel],
                vec![out_channels],
            )),
            Layer::Dense { out_dim } => Some((vec![out_dim, shapes[i][0]], vec![out_dim])),
            _ => None,
        })
        .collect())
}

impl Params {
    pub fn init(spec: &NetworkSpec, rng: &mut SplitMix64) -> Result<Self> {
        let layers = expected_shapes(spec)?
            .into_iter()
            .map(|slot| {
                slot.map(|(w, _)| {
                    let (fan_in, fan_out) = if w.len() == 4 {
                        let area = w[2] * w[3];
                        (w[1] * area, w[0] * area)
                    } else {
                        (w[1], w[0])
                    };
                    LayerParams::glorot(&w, fan_in, fan_out, rng)
                })
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| l.as_ref().map(LayerParams::zeros_like))
                .collect(),
        }
    }

    pub fn layer(&self, index: usize) -> Option<&LayerParams> {
        self.layers.get(index).and_then(Option::as_ref)
    }

    /// Checks every slot against the shapes implied by `spec`.
    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let expected = expected_shapes(spec)?;
        if expected.len() != self.layers.len() {
            return Err(Error::shape(
                "params",
                format!("{} parameter slots for {} layers", self.layers.len(), expected.len()),
            ));
        }
        for (i, (want, have)) in expected.iter().zip(&self.layers).enumerate() {
            let name = format!("{i} ({})", spec.layers[i].kind());
            match (want, have) {
                (None, None) => {}
                (Some((w, b)), Some(p)) => {
                    if p.weight.shape() != w.as_slice() || p.bias.shape() != b.as_slice() {
                        return Err(Error::shape(
                            name,
                            format!(
                                "parameters {:?}/{:?}, expected {w:?}/{b:?}",
                                p.weight.shape(),
                                p.bias.shape()
                            ),
                        ));
                    }
                }
                (Some(_), None) => return Err(Error::shape(name, "missing parameters")),
                (None, Some(_)) => return Err(Error::shape(name, "layer takes no parameters")),
            }
        }
        Ok(())
    }
}

impl Parameters for Params {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|p| [&p.weight, &p.bias])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flatten()
            .flat_map(|p| [&mut p.weight, &mut p.bias])
            .collect()
    }
}
