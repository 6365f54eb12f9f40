use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        out_dim: usize,
    },
}

impl Layer {
    /// Stride-1 convolution with "same" zero padding (odd kernels).
    pub fn conv_same(out_channels: usize, kernel: usize) -> Self {
        Layer::Conv {
            out_channels,
            kernel,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Conv { .. } | Layer::Dense { .. })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Flatten => "flatten",
            Layer::Dense { .. } => "dense",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let name = || format!("{index} ({})", self.kind());
        match *self {
            Layer::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                let [_, h, w] = spatial(input).ok_or_else(|| {
                    Error::shape(name(), format!("expects (c, h, w) input, got {input:?}"))
                })?;
                if kernel == 0 || stride == 0 || out_channels == 0 {
                    return Err(Error::shape(name(), "kernel, stride and channels must be positive"));
                }
                if h + 2 * pad < kernel || w + 2 * pad < kernel {
                    return Err(Error::shape(
                        name(),
                        format!("kernel {kernel} larger than padded input {h}x{w} (pad {pad})"),
                    ));
                }
                Ok(vec![
                    out_channels,
                    (h + 2 * pad - kernel) / stride + 1,
                    (w + 2 * pad - kernel) / stride + 1,
                ])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool { kernel, stride } => {
                let [c, h, w] = spatial(input).ok_or_else(|| {
                    Error::shape(name(), format!("expects (c, h, w) input, got {input:?}"))
                })?;
                if kernel == 0 || stride == 0 || h < kernel || w < kernel {
                    return Err(Error::shape(
                        name(),
                        format!("pool window {kernel} does not fit {h}x{w}"),
                    ));
                }
                Ok(vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Dense { out_dim } => {
                if input.len() != 1 {
                    return Err(Error::shape(
                        name(),
                        format!("expects a flat vector input, got {input:?}"),
                    ));
                }
                if out_dim == 0 {
                    return Err(Error::shape(name(), "out_dim must be positive"));
                }
                Ok(vec![out_dim])
            }
        }
    }
}

fn spatial(shape: &[usize]) -> Option<[usize; 3]> {
    match *shape {
        [c, h, w] => Some([c, h, w]),
        _ => None,
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Layer::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => write!(f, "conv {out_channels} {kernel} {stride} {pad}"),
            Layer::Relu => write!(f, "relu"),
            Layer::MaxPool { kernel, stride } => write!(f, "maxpool {kernel} {stride}"),
            Layer::Flatten => write!(f, "flatten"),
            Layer::Dense { out_dim } => write!(f, "dense {out_dim}"),
        }
    }
}

impl FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let num = |i: usize| -> Result<usize> {
            parts
                .get(i)
                .ok_or_else(|| Error::invalid(format!("layer `{s}`: missing field {i}")))?
                .parse()
                .map_err(|_| Error::invalid(format!("layer `{s}`: bad integer")))
        };
        let layer = match parts.first().copied() {
            Some("conv") if parts.len() == 5 => Layer::Conv {
                out_channels: num(1)?,
                kernel: num(2)?,
                stride: num(3)?,
                pad: num(4)?,
            },
            Some("relu") if parts.len() == 1 => Layer::Relu,
            Some("maxpool") if parts.len() == 3 => Layer::MaxPool {
                kernel: num(1)?,
                stride: num(2)?,
            },
            Some("flatten") if parts.len() == 1 => Layer::Flatten,
            Some("dense") if parts.len() == 2 => Layer::Dense { out_dim: num(1)? },
            _ => return Err(Error::invalid(format!("unrecognized layer descriptor `{s}`"))),
        };
        Ok(layer)
    }
}

/// Ordered layer list of a sequential classifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub layers: Vec<Layer>,
    /// Per-sample input shape `(channels, height, width)`.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
}

impl NetworkSpec {
    pub fn new(layers: Vec<Layer>, input_shape: [usize; 3], num_classes: usize) -> Result<Self> {
        let spec = Self {
            layers,
            input_shape,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// conv(8,3×3) → relu → maxpool(2) → conv(16,3×3) → relu → maxpool(2)
    /// → flatten → dense(64) → relu → dense(num_classes)
    pub fn reference(input_shape: [usize; 3], num_classes: usize) -> Result<Self> {
        Self::new(
            vec![
                Layer::conv_same(8, 3),
                Layer::Relu,
                Layer::MaxPool { kernel: 2, stride: 2 },
                Layer::conv_same(16, 3),
                Layer::Relu,
                Layer::MaxPool { kernel: 2, stride: 2 },
                Layer::Flatten,
                Layer::Dense { out_dim: 64 },
                Layer::Relu,
                Layer::Dense { out_dim: num_classes },
            ],
            input_shape,
            num_classes,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        if self.layers.is_empty() {
            return Err(Error::invalid("network has no layers"));
        }
        let shapes = self.layer_shapes()?;
        let last = shapes.last().expect("non-empty");
        if last.as_slice() != [self.num_classes] {
            return Err(Error::shape(
                format!("{} ({})", self.layers.len() - 1, self.layers.last().unwrap().kind()),
                format!(
                    "final layer produces {last:?}, expected a logit vector of length {}",
                    self.num_classes
                ),
            ));
        }
        Ok(())
    }

    /// Per-sample activation shapes: entry 0 is the input, entry `i + 1` the
    /// output of layer `i`.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        shapes.push(self.input_shape.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.output_shape(i, shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    /// Per-sample output shape of layer `index`.
    pub fn output_shape(&self, index: usize) -> Result<Vec<usize>> {
        self.check_layer_index(index)?;
        Ok(self.layer_shapes()?.swap_remove(index + 1))
    }

    pub fn check_layer_index(&self, index: usize) -> Result<()> {
        if index >= self.layers.len() {
            return Err(Error::invalid(format!(
                "layer index {index} out of range (network has {} layers)",
                self.layers.len()
            )));
        }
        Ok(())
    }

    /// Text descriptor used by the checkpoint format.
    pub fn descriptor(&self) -> String {
        let [c, h, w] = self.input_shape;
        let mut s = format!("input {c} {h} {w}\nclasses {}\n", self.num_classes);
        for layer in &self.layers {
            s.push_str(&layer.to_string());
            s.push('\n');
        }
        s
    }

    pub fn from_descriptor(text: &str) -> Result<Self> {
        let mut input_shape = None;
        let mut num_classes = None;
        let mut layers = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(rest) = line.strip_prefix("input ") {
                let dims: Vec<usize> = rest
                    .split_whitespace()
                    .map(|d| d.parse().map_err(|_| Error::invalid(format!("bad input line `{line}`"))))
                    .collect::<Result<_>>()?;
                match dims[..] {
                    [c, h, w] => input_shape = Some([c, h, w]),
                    _ => return Err(Error::invalid(format!("bad input line `{line}`"))),
                }
            } else if let Some(rest) = line.strip_prefix("classes ") {
                num_classes = Some(
                    rest.trim()
                        .parse()
                        .map_err(|_| Error::invalid(format!("bad classes line `{line}`")))?,
                );
            } else {
                layers.push(line.parse()?);
            }
        }
        Self::new(
            layers,
            input_shape.ok_or_else(|| Error::invalid("descriptor lacks `input` line"))?,
            num_classes.ok_or_else(|| Error::invalid("descriptor lacks `classes` line"))?,
        )
    }
}
