//! Low-end sensor simulators: Gaussian blur (resolution loss), additive
//! white Gaussian noise, and analytic modality-shift transforms.
//!
//! Single-image functions take `(channels, height, width)` tensors; the
//! `DegradationSpec::apply_batch` entry point maps them over a
//! `(batch, channels, height, width)` tensor.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::prng::SplitMix64;
use crate::tensor::Tensor;

/// Side length of the blur kernel for `sigma`: `2·ceil(2σ) + 1`.
///
/// Roughly four standard deviations wide, forced odd so the kernel has a center tap.
pub fn kernel_size(sigma: f64) -> usize {
    2 * (2.0 * sigma).ceil() as usize + 1
}

/// Normalized 2-D Gaussian sampled on the integer grid, shape `(k, k)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!(
            "blur sigma must be positive and finite, got {sigma}"
        )));
    }
    let k = kernel_size(sigma);
    let half = (k / 2) as f64;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut data = Vec::with_capacity(k * k);
    for y in 0..k {
        for x in 0..k {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            data.push((-(dx * dx + dy * dy) * inv).exp());
        }
    }
    let total: f64 = data.iter().sum();
    for v in &mut data {
        *v /= total;
    }
    Tensor::new(vec![k, k], data)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::invalid(format!(
            "expected an image of shape (channels, h, w), got {s:?}"
        ))),
    }
}

/// Per-channel convolution with [`gaussian_kernel`] using reflect padding.
/// `sigma == 0` returns the image unchanged.
pub fn apply_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    let (c, h, w) = image_dims(image)?;
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let kernel = gaussian_kernel(sigma)?;
    let k = kernel.shape()[0];
    let half = k / 2;
    if half + 1 > h.min(w) {
        return Err(Error::invalid(format!(
            "blur sigma {sigma} needs a {k}x{k} kernel, which reflect padding cannot \
             support on a {h}x{w} image; use sigma <= {:.2}",
            (h.min(w) - 1) as f64 / 2.0
        )));
    }
    let kd = kernel.data();
    let mut out = Tensor::zeros(image.shape());
    let src = image.data();
    let dst = out.data_mut();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ky in 0..k {
                    let iy = reflect(y as isize + ky as isize - half as isize, h);
                    let row = &plane[iy * w..(iy + 1) * w];
                    let krow = &kd[ky * k..(ky + 1) * k];
                    for (kx, &kv) in krow.iter().enumerate() {
                        let ix = reflect(x as isize + kx as isize - half as isize, w);
                        acc += kv * row[ix];
                    }
                }
                dst[(ch * h + y) * w + x] = acc;
            }
        }
    }
    Ok(out)
}

/// Adds i.i.d. `N(0, sigma²)` noise and clamps to `[0, 1]`.
/// `sigma == 0` returns the image unchanged.
pub fn apply_awgn(image: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = SplitMix64::new(seed);
    Ok(image.map(|p| (p + sigma * rng.next_gaussian()).clamp(0.0, 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModalityTransform {
    /// `p ↦ 1 − p`
    Invert,
    /// `p ↦ (1 − p)^γ`
    InvertGamma(f64),
}

impl fmt::Display for ModalityTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModalityTransform::Invert => write!(f, "invert"),
            ModalityTransform::InvertGamma(g) => write!(f, "invert_gamma:{g}"),
        }
    }
}

impl FromStr for ModalityTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "invert" {
            return Ok(ModalityTransform::Invert);
        }
        if let Some(g) = s.strip_prefix("invert_gamma:") {
            let gamma: f64 = g
                .parse()
                .map_err(|_| Error::invalid(format!("bad gamma in `{s}`")))?;
            if !(gamma > 0.0) || !gamma.is_finite() {
                return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
            }
            return Ok(ModalityTransform::InvertGamma(gamma));
        }
        Err(Error::invalid(format!("unknown modality transform `{s}`")))
    }
}

pub fn apply_modality(image: &Tensor, transform: ModalityTransform) -> Tensor {
    match transform {
        ModalityTransform::Invert => image.map(|p| 1.0 - p),
        ModalityTransform::InvertGamma(g) => image.map(|p| (1.0 - p).powf(g)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DegradationKind {
    Identity,
    Blur { sigma: f64 },
    Awgn { sigma: f64, seed: u64 },
    Modality(ModalityTransform),
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DegradationKind::Identity => write!(f, "identity"),
            DegradationKind::Blur { sigma } => write!(f, "blur:{sigma}"),
            DegradationKind::Awgn { sigma, seed } => write!(f, "awgn:{sigma}:{seed}"),
            DegradationKind::Modality(t) => write!(f, "modality:{t}"),
        }
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::invalid(format!("bad degradation `{s}`"));
        if s == "identity" {
            Ok(DegradationKind::Identity)
        } else if let Some(rest) = s.strip_prefix("blur:") {
            Ok(DegradationKind::Blur {
                sigma: rest.parse().map_err(|_| bad())?,
            })
        } else if let Some(rest) = s.strip_prefix("awgn:") {
            let (sigma, seed) = rest.split_once(':').ok_or_else(bad)?;
            Ok(DegradationKind::Awgn {
                sigma: sigma.parse().map_err(|_| bad())?,
                seed: seed.parse().map_err(|_| bad())?,
            })
        } else if let Some(rest) = s.strip_prefix("modality:") {
            Ok(DegradationKind::Modality(rest.parse()?))
        } else {
            Err(bad())
        }
    }
}

/// A parameterized input transform standing in for a low-end sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    /// Label of the simulated sensor type.
    pub modality_tag: String,
}

impl DegradationSpec {
    pub fn new(kind: DegradationKind, modality_tag: impl Into<String>) -> Self {
        Self {
            kind,
            modality_tag: modality_tag.into(),
        }
    }

    pub fn identity(modality_tag: impl Into<String>) -> Self {
        Self::new(DegradationKind::Identity, modality_tag)
    }

    pub fn blur(sigma: f64, modality_tag: impl Into<String>) -> Self {
        Self::new(DegradationKind::Blur { sigma }, modality_tag)
    }

    /// Whether the transform is the exact no-op.
    pub fn is_identity(&self) -> bool {
        match self.kind {
            DegradationKind::Identity => true,
            DegradationKind::Blur { sigma } | DegradationKind::Awgn { sigma, .. } => sigma == 0.0,
            DegradationKind::Modality(_) => false,
        }
    }

    pub fn apply_image(&self, image: &Tensor, index: u64) -> Result<Tensor> {
        match self.kind {
            DegradationKind::Identity => Ok(image.clone()),
            DegradationKind::Blur { sigma } => apply_blur(image, sigma),
            DegradationKind::Awgn { sigma, seed } => {
                let stream = SplitMix64::for_stream(seed, index).next_u64();
                apply_awgn(image, sigma, stream)
            }
            DegradationKind::Modality(t) => {
                image_dims(image)?;
                Ok(apply_modality(image, t))
            }
        }
    }

    /// Applies the transform to every image of a `(batch, c, h, w)` tensor.
    /// Image `i` only ever sees its own noise stream.
    pub fn apply_batch(&self, images: &Tensor) -> Result<Tensor> {
        if images.shape().len() != 4 {
            return Err(Error::invalid(format!(
                "expected (batch, c, h, w) images, got {:?}",
                images.shape()
            )));
        }
        if self.is_identity() {
            return Ok(images.clone());
        }
        let image_shape = images.shape()[1..].to_vec();
        let mut out = images.clone();
        for i in 0..images.batch() {
            let img = Tensor::new(image_shape.clone(), images.sample(i).to_vec())?;
            let d = self.apply_image(&img, i as u64)?;
            out.sample_mut(i).copy_from_slice(d.data());
        }
        Ok(out)
    }
}

impl fmt::Display for DegradationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.kind, self.modality_tag)
    }
}

impl FromStr for DegradationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, tag) = s
            .rsplit_once('@')
            .ok_or_else(|| Error::invalid(format!("degradation `{s}` lacks `@modality`")))?;
        Ok(Self::new(kind.parse()?, tag))
    }
}

/// Applies a chain of degradations in order.
pub fn apply_chain(chain: &[DegradationSpec], images: &Tensor) -> Result<Tensor> {
    let mut out = images.clone();
    for d in chain {
        out = d.apply_batch(&out)?;
    }
    Ok(out)
}
