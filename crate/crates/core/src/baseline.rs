//! The baseline classifier: training on clean data, feature taps, and the
//! `GSCK` checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "GSCK" | u16 version | u32 descriptor length | descriptor (UTF-8)
//! u32 parameterized layer count
//! per layer: u32 layer index
//!            weight: u32 ndim, u32 dims…, f64 values
//!            bias:   u32 ndim, u32 dims…, f64 values
//! ```
//!
//! The descriptor is the network descriptor followed by `meta.*` lines.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use log::debug;

use crate::error::{Error, Result};
use crate::nn::params::expected_shapes;
use crate::nn::{Layer, LabeledBatch, LayerParams, Net, NetworkSpec, Parameters, Params, Sgd};
use crate::prng::SplitMix64;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GSCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Minibatch SGD hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainHyper {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epochs: usize,
    pub final_train_loss: f64,
    pub dataset_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: Params,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn net(&self) -> Result<Net<'_>> {
        Net::new(&self.spec, &self.params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapRole {
    /// Channel-indexed activation used for susceptibility ranking.
    Ranking,
    /// Flat deep-feature vector fed to a linear head.
    Extractor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureTap {
    pub layer_index: usize,
    pub role: TapRole,
}

impl FeatureTap {
    /// Output of the second convolution.
    pub fn default_ranking(spec: &NetworkSpec) -> Result<Self> {
        let index = spec
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Conv { .. }))
            .map(|(i, _)| i)
            .nth(1)
            .ok_or_else(|| Error::invalid("network has fewer than two conv layers"))?;
        Ok(Self {
            layer_index: index,
            role: TapRole::Ranking,
        })
    }

    /// Output of the penultimate dense layer.
    pub fn default_extractor(spec: &NetworkSpec) -> Result<Self> {
        let dense: Vec<usize> = spec
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Dense { .. }))
            .map(|(i, _)| i)
            .collect();
        if dense.len() < 2 {
            return Err(Error::invalid("network has fewer than two dense layers"));
        }
        Ok(Self {
            layer_index: dense[dense.len() - 2],
            role: TapRole::Extractor,
        })
    }

    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        let shape = spec.output_shape(self.layer_index)?;
        let ok = match self.role {
            TapRole::Ranking => shape.len() == 3,
            TapRole::Extractor => shape.len() == 1,
        };
        if !ok {
            return Err(Error::invalid(format!(
                "{:?} tap at layer {} produces {shape:?}",
                self.role, self.layer_index
            )));
        }
        Ok(())
    }
}

/// Trains `spec` from a Glorot initialization on clean data with momentum SGD.
pub fn train_baseline(
    spec: &NetworkSpec,
    train: &LabeledBatch,
    hyper: &TrainHyper,
    dataset_id: &str,
) -> Result<Checkpoint> {
    hyper.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if let Some(&bad) = train.labels.iter().find(|&&l| l >= spec.num_classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {} classes",
            spec.num_classes
        )));
    }
    let mut rng = SplitMix64::new(hyper.seed);
    let mut params = Params::init(spec, &mut rng)?;
    let mut opt = Sgd::new(hyper.lr, hyper.momentum);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut final_loss = f64::NAN;
    for epoch in 0..hyper.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let batch = train.select(chunk);
            let (loss, grads) = Net::new(spec, &params)?.loss_and_grads(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            total += loss * chunk.len() as f64;
            opt.step(&mut params, &grads)?;
            if !params.tensors().iter().all(|t| t.is_finite()) {
                return Err(Error::Divergence { epoch, loss: f64::NAN });
            }
        }
        final_loss = total / train.len() as f64;
        debug!("baseline epoch {epoch}: loss {final_loss:.5}");
    }
    Ok(Checkpoint {
        spec: spec.clone(),
        params,
        meta: CheckpointMeta {
            seed: hyper.seed,
            epochs: hyper.epochs,
            final_train_loss: final_loss,
            dataset_id: dataset_id.to_string(),
        },
    })
}

/// Activations at `tap` for a batch of inputs.
pub fn extract_features(ckpt: &Checkpoint, tap: &FeatureTap, inputs: &Tensor) -> Result<Tensor> {
    tap.validate(&ckpt.spec)?;
    ckpt.net()?.forward_range(inputs, 0, tap.layer_index + 1)
}

fn descriptor(ckpt: &Checkpoint) -> String {
    let mut s = ckpt.spec.descriptor();
    let m = &ckpt.meta;
    s.push_str(&format!("meta.seed {}\n", m.seed));
    s.push_str(&format!("meta.epochs {}\n", m.epochs));
    s.push_str(&format!("meta.final_train_loss {:016x}\n", m.final_train_loss.to_bits()));
    s.push_str(&format!("meta.dataset {}\n", m.dataset_id));
    s
}

fn parse_descriptor(text: &str) -> Result<(NetworkSpec, CheckpointMeta)> {
    let mut spec_text = String::new();
    let mut seed = None;
    let mut epochs = None;
    let mut loss = None;
    let mut dataset = None;
    let bad = |line: &str| Error::format("checkpoint descriptor", "meta value", line.to_string());
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("meta.") {
            let (key, value) = rest.split_once(' ').ok_or_else(|| bad(line))?;
            match key {
                "seed" => seed = Some(value.parse().map_err(|_| bad(line))?),
                "epochs" => epochs = Some(value.parse().map_err(|_| bad(line))?),
                "final_train_loss" => {
                    loss = Some(f64::from_bits(u64::from_str_radix(value, 16).map_err(|_| bad(line))?))
                }
                "dataset" => dataset = Some(value.to_string()),
                _ => return Err(bad(line)),
            }
        } else {
            spec_text.push_str(line);
            spec_text.push('\n');
        }
    }
    let missing = |k: &str| Error::format("checkpoint descriptor", format!("meta.{k}"), "nothing");
    Ok((
        NetworkSpec::from_descriptor(&spec_text)?,
        CheckpointMeta {
            seed: seed.ok_or_else(|| missing("seed"))?,
            epochs: epochs.ok_or_else(|| missing("epochs"))?,
            final_train_loss: loss.ok_or_else(|| missing("final_train_loss"))?,
            dataset_id: dataset.ok_or_else(|| missing("dataset"))?,
        },
    ))
}

pub(crate) fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub(crate) struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self {
            cur: Cursor::new(bytes),
            what,
        }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let remaining = self.remaining();
        if n > remaining {
            return Err(Error::format(self.what, format!("{n} more bytes"), "truncated file"));
        }
        let mut buf = vec![0u8; n];
        self.cur
            .read_exact(&mut buf)
            .map_err(|e| Error::from_read(self.what, e))?;
        Ok(buf)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        let b = self.bytes(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Result<usize> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.bytes(n.checked_mul(8).ok_or_else(|| Error::format(self.what, "sane length", "overflow"))?)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.bytes(4)?;
        if found != expected {
            return Err(Error::format(
                self.what,
                format!("magic {:?}", String::from_utf8_lossy(expected)),
                format!("{:?}", String::from_utf8_lossy(&found)),
            ));
        }
        Ok(())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.cur.get_ref().len() - self.cur.position() as usize
    }

    pub(crate) fn position(&self) -> usize {
        self.cur.position() as usize
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u16(&mut out, CHECKPOINT_VERSION);
    let desc = descriptor(ckpt);
    put_u32(&mut out, desc.len());
    out.extend_from_slice(desc.as_bytes());
    let slots: Vec<(usize, &LayerParams)> = ckpt
        .params
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.as_ref().map(|p| (i, p)))
        .collect();
    put_u32(&mut out, slots.len());
    for (i, p) in slots {
        put_u32(&mut out, i);
        for t in [&p.weight, &p.bias] {
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            t.write_le_bytes(&mut out);
        }
    }
    out
}

/// Decodes a checkpoint from the front of `bytes`, returning it and the
/// number of bytes consumed.
pub fn decode_checkpoint_prefix(bytes: &[u8]) -> Result<(Checkpoint, usize)> {
    let mut r = Reader::new(bytes, "checkpoint");
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("version {CHECKPOINT_VERSION}"),
            format!("version {version}"),
        ));
    }
    let len = r.u32()?;
    let desc = String::from_utf8(r.bytes(len)?)
        .map_err(|_| Error::format("checkpoint descriptor", "UTF-8", "invalid bytes"))?;
    let (spec, meta) = parse_descriptor(&desc)?;
    let expected = expected_shapes(&spec)?;
    let mut layers: Vec<Option<LayerParams>> = vec![None; spec.layers.len()];
    let count = r.u32()?;
    for _ in 0..count {
        let index = r.u32()?;
        let Some(Some((want_w, want_b))) = expected.get(index) else {
            return Err(Error::shape(
                format!("{index}"),
                "checkpoint stores parameters for a layer that takes none",
            ));
        };
        let name = format!("{index} ({})", spec.layers[index].kind());
        let mut read_tensor = |want: &[usize]| -> Result<Tensor> {
            let ndim = r.u32()?;
            let dims = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            if dims != want {
                return Err(Error::shape(
                    name.clone(),
                    format!("checkpoint declares {dims:?}, network expects {want:?}"),
                ));
            }
            Tensor::new(dims.clone(), r.f64s(dims.iter().product())?)
        };
        let weight = read_tensor(want_w)?;
        let bias = read_tensor(want_b)?;
        layers[index] = Some(LayerParams { weight, bias });
    }
    let params = Params { layers };
    params.check(&spec)?;
    Ok((Checkpoint { spec, params, meta }, r.position()))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (ckpt, used) = decode_checkpoint_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::format(
            "checkpoint",
            format!("{used} bytes"),
            format!("{} bytes (trailing data)", bytes.len()),
        ));
    }
    Ok(ckpt)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::eval_network;

    fn tiny() -> (NetworkSpec, LabeledBatch) {
        let spec = NetworkSpec::new(
            vec![
                Layer::conv_same(2, 3),
                Layer::Relu,
                Layer::MaxPool { kernel: 2, stride: 2 },
                Layer::conv_same(3, 3),
                Layer::Flatten,
                Layer::Dense { out_dim: 5 },
                Layer::Relu,
                Layer::Dense { out_dim: 2 },
            ],
            [1, 6, 6],
            2,
        )
        .unwrap();
        let mut rng = SplitMix64::new(1);
        let x = Tensor::new(vec![4, 1, 6, 6], (0..144).map(|_| rng.next_f64()).collect()).unwrap();
        (spec, LabeledBatch::new(x, vec![0, 1, 0, 1]).unwrap())
    }

    fn hyper(lr: f64, epochs: usize) -> TrainHyper {
        TrainHyper {
            lr,
            momentum: 0.9,
            epochs,
            batch_size: 2,
            seed: 5,
        }
    }

    #[test]
    fn zero_lr_keeps_initialization() {
        let (spec, data) = tiny();
        let ckpt = train_baseline(&spec, &data, &hyper(0.0, 3), "t").unwrap();
        let init = Params::init(&spec, &mut SplitMix64::new(5)).unwrap();
        assert_eq!(ckpt.params.digest(), init.digest());
    }

    #[test]
    fn overfits_single_sample() {
        let (spec, data) = tiny();
        let one = data.select(&[0]);
        let ckpt = train_baseline(
            &spec,
            &one,
            &TrainHyper {
                lr: 0.05,
                momentum: 0.9,
                epochs: 200,
                batch_size: 1,
                seed: 2,
            },
            "t",
        )
        .unwrap();
        assert!(ckpt.meta.final_train_loss < 0.01, "{}", ckpt.meta.final_train_loss);
    }

    #[test]
    fn training_is_deterministic_and_leaves_data_alone() {
        let (spec, data) = tiny();
        let before = data.clone();
        let a = train_baseline(&spec, &data, &hyper(0.05, 4), "t").unwrap();
        let b = train_baseline(&spec, &data, &hyper(0.05, 4), "t").unwrap();
        assert_eq!(encode_checkpoint(&a), encode_checkpoint(&b));
        assert_eq!(data, before);
    }

    #[test]
    fn divergence_reports_epoch() {
        let (spec, data) = tiny();
        let err = train_baseline(&spec, &data, &hyper(1e300, 50), "t").unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }

    #[test]
    fn default_taps() {
        let spec = NetworkSpec::reference([1, 32, 32], 4).unwrap();
        assert_eq!(FeatureTap::default_ranking(&spec).unwrap().layer_index, 3);
        assert_eq!(FeatureTap::default_extractor(&spec).unwrap().layer_index, 7);
        let bad = FeatureTap {
            layer_index: 7,
            role: TapRole::Ranking,
        };
        assert!(bad.validate(&spec).is_err());
    }

    #[test]
    fn features_match_eval_taps() {
        let (spec, data) = tiny();
        let ckpt = train_baseline(&spec, &data, &hyper(0.05, 2), "t").unwrap();
        let tap = FeatureTap::default_extractor(&spec).unwrap();
        let f = extract_features(&ckpt, &tap, &data.inputs).unwrap();
        assert_eq!(f.shape(), &[4, 5]);
        let last = FeatureTap {
            layer_index: spec.layers.len() - 1,
            role: TapRole::Extractor,
        };
        let logits = extract_features(&ckpt, &last, &data.inputs).unwrap();
        let (expect, _) = eval_network(&spec, &ckpt.params, &data.inputs, &[]).unwrap();
        assert!(logits.bit_eq(&expect));
        assert!(f.bit_eq(&extract_features(&ckpt, &tap, &data.inputs).unwrap()));
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let (spec, data) = tiny();
        let ckpt = train_baseline(&spec, &data, &hyper(0.05, 2), "tiny-1").unwrap();
        let bytes = encode_checkpoint(&ckpt);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.params.digest(), ckpt.params.digest());
        assert_eq!(back.meta.final_train_loss.to_bits(), ckpt.meta.final_train_loss.to_bits());
        assert_eq!(encode_checkpoint(&back), bytes);

        let err = decode_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        let err = decode_checkpoint(&wrong).unwrap_err().to_string();
        assert!(err.contains("GSCK") && err.contains("XSCK"), "{err}");

        let mut v2 = bytes.clone();
        v2[4] = 2;
        let err = decode_checkpoint(&v2).unwrap_err().to_string();
        assert!(err.contains("version 1") && err.contains("version 2"), "{err}");
    }

    #[test]
    fn mismatched_declared_shape_names_layer() {
        let (spec, data) = tiny();
        let mut ckpt = train_baseline(&spec, &data, &hyper(0.05, 1), "t").unwrap();
        // store dense(5) weights as if the layer were 5x13
        let p = ckpt.params.layers[5].as_mut().unwrap();
        p.weight = Tensor::zeros(&[5, 13]);
        let bytes = encode_checkpoint(&ckpt);
        let err = decode_checkpoint(&bytes).unwrap_err().to_string();
        assert!(err.contains("5 (dense)"), "{err}");
    }
}
