//! Linear-probe evaluation: a softmax head fitted on clean deep features,
//! reused unchanged on features from degraded inputs, plus the table
//! statistics built from the resulting accuracies.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::debug;

use crate::baseline::{put_u32, Checkpoint, FeatureTap, Reader};
use crate::degrade::{apply_chain, DegradationSpec};
use crate::error::{Error, Result};
use crate::genunits::GenerativeNetwork;
use crate::nn::{accuracy, cross_entropy_grad, LabeledBatch, Layer, LayerParams, NetworkSpec, Params};
use crate::tensor::{digest_tensors, Tensor};

/// Standardized softmax regression: `logits = W·((x − mean)·scale) + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `(classes, feature_dim)`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadHyper {
    pub lr: f64,
    pub epochs: usize,
}

impl Default for HeadHyper {
    fn default() -> Self {
        Self { lr: 0.1, epochs: 500 }
    }
}

fn flatten(features: &Tensor) -> Result<Tensor> {
    if features.shape().is_empty() || features.batch() == 0 {
        return Err(Error::shape("features", "need a non-empty batch"));
    }
    let n = features.batch();
    features.clone().reshape(vec![n, features.sample_len()])
}

impl LinearHead {
    pub fn feature_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    fn standardize(&self, features: &Tensor) -> Result<Tensor> {
        let x = flatten(features)?;
        let d = self.feature_dim();
        if x.shape()[1] != d {
            return Err(Error::shape(
                "linear head",
                format!("features of width {} for a head on {d} features", x.shape()[1]),
            ));
        }
        let mut z = x;
        for row in z.data_mut().chunks_exact_mut(d) {
            for ((v, &m), &s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) * s;
            }
        }
        Ok(z)
    }

    fn logits_standardized(&self, z: &Tensor) -> Tensor {
        let (n, d, c) = (z.batch(), self.feature_dim(), self.classes());
        let mut out = vec![0.0; n * c];
        for (row, o) in z.data().chunks_exact(d).zip(out.chunks_exact_mut(c)) {
            for k in 0..c {
                let w = &self.weight.data()[k * d..(k + 1) * d];
                o[k] = self.bias.data()[k] + w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Tensor::new(vec![n, c], out).expect("logit shape")
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.logits_standardized(&self.standardize(features)?))
    }

    pub fn accuracy(&self, features: &Tensor, labels: &[usize]) -> Result<f64> {
        let logits = self.logits(features)?;
        if labels.len() != logits.batch() {
            return Err(Error::shape(
                "linear head",
                format!("{} labels for {} feature rows", labels.len(), logits.batch()),
            ));
        }
        Ok(accuracy(&logits, labels))
    }

    /// SHA-256 over every head parameter, standardization included.
    pub fn digest(&self) -> String {
        let d = self.feature_dim();
        let mean = Tensor::new(vec![d], self.mean.clone()).expect("mean shape");
        let scale = Tensor::new(vec![d], self.scale.clone()).expect("scale shape");
        digest_tensors([&mean, &scale, &self.weight, &self.bias])
    }
}

/// Full-batch gradient descent on softmax regression from a zero start.
/// Features are standardized with their own per-dimension mean and
/// standard deviation; constant dimensions are left unscaled.
pub fn fit_linear_head(
    features: &Tensor,
    labels: &[usize],
    num_classes: usize,
    hyper: HeadHyper,
) -> Result<LinearHead> {
    let x = flatten(features)?;
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if labels.len() != n {
        return Err(Error::shape(
            "linear head",
            format!("{} labels for {n} feature rows", labels.len()),
        ));
    }
    if num_classes == 0 {
        return Err(Error::invalid("linear head needs at least one class"));
    }
    if !(hyper.lr > 0.0 && hyper.lr.is_finite()) {
        return Err(Error::invalid(format!("head learning rate must be positive, got {}", hyper.lr)));
    }
    let mut mean = vec![0.0; d];
    for row in x.data().chunks_exact(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in x.data().chunks_exact(d) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale = var
        .iter()
        .map(|&s| {
            let sd = (s / n as f64).sqrt();
            if sd > 1e-12 { 1.0 / sd } else { 1.0 }
        })
        .collect();
    let mut head = LinearHead {
        mean,
        scale,
        weight: Tensor::zeros(&[num_classes, d]),
        bias: Tensor::zeros(&[num_classes]),
    };
    let z = head.standardize(&x)?;
    for epoch in 0..hyper.epochs {
        let (loss, grad) = cross_entropy_grad(&head.logits_standardized(&z), labels)?;
        if epoch == 0 || epoch + 1 == hyper.epochs {
            debug!("head epoch {epoch}: loss {loss:.5}");
        }
        let g = grad.data();
        let w = head.weight.data_mut();
        for (row, gr) in z.data().chunks_exact(d).zip(g.chunks_exact(num_classes)) {
            for (k, &gk) in gr.iter().enumerate() {
                if gk != 0.0 {
                    for (wv, &zv) in w[k * d..(k + 1) * d].iter_mut().zip(row) {
                        *wv -= hyper.lr * gk * zv;
                    }
                }
            }
        }
        let b = head.bias.data_mut();
        for gr in g.chunks_exact(num_classes) {
            for (bv, &gk) in b.iter_mut().zip(gr) {
                *bv -= hyper.lr * gk;
            }
        }
    }
    Ok(head)
}

const HEAD_MAGIC: &[u8; 4] = b"GSLH";

/// `GSLH`, u32 classes, u32 feature dim, then mean, scale, weight and bias
/// as little-endian f64.
pub fn encode_head(head: &LinearHead) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(HEAD_MAGIC);
    put_u32(&mut out, head.classes());
    put_u32(&mut out, head.feature_dim());
    for v in head.mean.iter().chain(&head.scale) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    head.weight.write_le_bytes(&mut out);
    head.bias.write_le_bytes(&mut out);
    out
}

pub fn decode_head(bytes: &[u8]) -> Result<LinearHead> {
    let mut r = Reader::new(bytes, "linear head");
    r.magic(HEAD_MAGIC)?;
    let c = r.u32()?;
    let d = r.u32()?;
    if c == 0 || d == 0 {
        return Err(Error::format("linear head", "positive dimensions", format!("{c}x{d}")));
    }
    let mean = r.f64s(d)?;
    let scale = r.f64s(d)?;
    let weight = Tensor::new(vec![c, d], r.f64s(c * d)?)?;
    let bias = Tensor::new(vec![c], r.f64s(c)?)?;
    if r.remaining() != 0 {
        return Err(Error::format(
            "linear head",
            format!("{} bytes", r.position()),
            format!("{} bytes (trailing data)", bytes.len()),
        ));
    }
    Ok(LinearHead { mean, scale, weight, bias })
}

pub fn save_head(head: &LinearHead, path: &Path) -> Result<()> {
    fs::write(path, encode_head(head))?;
    Ok(())
}

pub fn load_head(path: &Path) -> Result<LinearHead> {
    decode_head(&fs::read(path)?)
}

/// The baseline truncated after `tap` with `head` appended as a dense layer
/// (standardization folded into its weights), so the extractor and head can
/// be treated as one frozen classifier.
pub fn task_network(ckpt: &Checkpoint, tap: &FeatureTap, head: &LinearHead) -> Result<Checkpoint> {
    tap.validate(&ckpt.spec)?;
    let shape = ckpt.spec.output_shape(tap.layer_index)?;
    let d = head.feature_dim();
    if shape != [d] {
        return Err(Error::shape(
            format!("tap {}", tap.layer_index),
            format!("output {shape:?} does not match a head on {d} features"),
        ));
    }
    let c = head.classes();
    let mut layers = ckpt.spec.layers[..=tap.layer_index].to_vec();
    layers.push(Layer::Dense { out_dim: c });
    let spec = NetworkSpec::new(layers, ckpt.spec.input_shape, c)?;
    let mut weight = head.weight.clone();
    let mut bias = head.bias.clone();
    for k in 0..c {
        let row = &mut weight.data_mut()[k * d..(k + 1) * d];
        let mut shift = 0.0;
        for ((w, &s), &m) in row.iter_mut().zip(&head.scale).zip(&head.mean) {
            *w *= s;
            shift += *w * m;
        }
        bias.data_mut()[k] -= shift;
    }
    let mut slots = ckpt.params.layers[..=tap.layer_index].to_vec();
    slots.push(Some(LayerParams { weight, bias }));
    let params = Params { layers: slots };
    params.check(&spec)?;
    Ok(Checkpoint {
        spec,
        params,
        meta: ckpt.meta.clone(),
    })
}

/// Maps input images to deep features.
pub trait FeatureExtractor {
    fn features(&self, inputs: &Tensor) -> Result<Tensor>;
}

/// The baseline network read out at a fixed layer.
pub struct BaselineExtractor<'a> {
    pub ckpt: &'a Checkpoint,
    pub tap: FeatureTap,
}

impl FeatureExtractor for BaselineExtractor<'_> {
    fn features(&self, inputs: &Tensor) -> Result<Tensor> {
        crate::baseline::extract_features(self.ckpt, &self.tap, inputs)
    }
}

/// The generative network read out at a fixed layer.
pub struct GenExtractor<'a> {
    pub net: &'a GenerativeNetwork,
    pub tap: FeatureTap,
}

impl FeatureExtractor for GenExtractor<'_> {
    fn features(&self, inputs: &Tensor) -> Result<Tensor> {
        self.tap.validate(&self.net.baseline.spec)?;
        let (_, mut taps) = self.net.eval(inputs, &[self.tap.layer_index])?;
        Ok(taps.pop().expect("one tap"))
    }
}

/// Method, modality and one accuracy per degradation level.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub method: String,
    pub modality: String,
    pub accuracies: Vec<f64>,
}

impl EvalRow {
    pub fn average(&self) -> Result<f64> {
        row_average(&self.accuracies)
    }
}

/// Accuracy of `head` on features of the test set under each degradation
/// chain in `levels`.
pub fn eval_pipeline(
    extractor: &dyn FeatureExtractor,
    head: &LinearHead,
    test: &LabeledBatch,
    levels: &[Vec<DegradationSpec>],
    method: &str,
    modality: &str,
) -> Result<EvalRow> {
    let accuracies = levels
        .iter()
        .map(|chain| {
            let features = extractor.features(&apply_chain(chain, &test.inputs)?)?;
            head.accuracy(&features, &test.labels)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalRow {
        method: method.to_string(),
        modality: modality.to_string(),
        accuracies,
    })
}

pub fn row_average(accuracies: &[f64]) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(Error::invalid("cannot average an empty row"));
    }
    Ok(accuracies.iter().sum::<f64>() / accuracies.len() as f64)
}

/// Percent lost relative to the clean accuracy: `100·(1 − avg/clean)`.
pub fn relative_drop(avg: f64, clean_acc: f64) -> Result<f64> {
    if !(clean_acc > 0.0) {
        return Err(Error::invalid(format!("clean accuracy must be positive, got {clean_acc}")));
    }
    Ok(100.0 * (1.0 - avg / clean_acc))
}

/// Percent gained over the baseline: `100·(gen − base)/base`.
pub fn relative_improvement(gen_avg: f64, base_avg: f64) -> Result<f64> {
    if !(base_avg > 0.0) {
        return Err(Error::invalid(format!("baseline average must be positive, got {base_avg}")));
    }
    Ok(100.0 * (gen_avg - base_avg) / base_avg)
}

/// Rows sharing one list of blur levels.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTable {
    pub sigma_levels: Vec<f64>,
    pub rows: Vec<EvalRow>,
}

fn level_label(sigma: f64) -> String {
    format!("sigma_{sigma}")
}

impl EvalTable {
    pub fn new(sigma_levels: Vec<f64>, rows: Vec<EvalRow>) -> Result<Self> {
        for r in &rows {
            if r.accuracies.len() != sigma_levels.len() {
                return Err(Error::shape(
                    format!("row {}/{}", r.method, r.modality),
                    format!("{} accuracies for {} levels", r.accuracies.len(), sigma_levels.len()),
                ));
            }
            if let Some(a) = r.accuracies.iter().find(|a| !(0.0..=1.0).contains(*a)) {
                return Err(Error::invalid(format!("accuracy {a} outside [0, 1]")));
            }
        }
        Ok(Self { sigma_levels, rows })
    }

    pub fn row(&self, method: &str, modality: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.method == method && r.modality == modality)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,modality");
        for &sigma in &self.sigma_levels {
            s.push(',');
            s.push_str(&level_label(sigma));
        }
        s.push_str(",avg\n");
        for r in &self.rows {
            s.push_str(&r.method);
            s.push(',');
            s.push_str(&r.modality);
            for a in &r.accuracies {
                let _ = write!(s, ",{a:.4}");
            }
            let _ = writeln!(s, ",{:.4}", r.average().expect("rows are non-empty"));
        }
        s
    }

    /// Parses a table written by [`EvalTable::to_csv`]. Accuracies come back
    /// rounded to four decimals.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format("eval table", "header", "empty file"))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 4 || cols[0] != "method" || cols[1] != "modality" || cols[cols.len() - 1] != "avg" {
            return Err(Error::format("eval table", "method,modality,sigma_...,avg", header.to_string()));
        }
        let sigma_levels = cols[2..cols.len() - 1]
            .iter()
            .map(|c| {
                c.strip_prefix("sigma_")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::format("eval table", "sigma_<level> column", c.to_string()))
            })
            .collect::<Result<Vec<f64>>>()?;
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != cols.len() {
                return Err(Error::format("eval table", format!("{} fields", cols.len()), line.to_string()));
            }
            let accuracies = f[2..f.len() - 1]
                .iter()
                .map(|v| v.parse().map_err(|_| Error::format("eval table", "accuracy", v.to_string())))
                .collect::<Result<Vec<f64>>>()?;
            rows.push(EvalRow {
                method: f[0].to_string(),
                modality: f[1].to_string(),
                accuracies,
            });
        }
        Self::new(sigma_levels, rows)
    }

    /// Drop and improvement percentages per modality, one `key = value` per line.
    pub fn stats_text(&self, baseline: &str, generative: &str) -> Result<String> {
        let mut modalities: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !modalities.contains(&r.modality.as_str()) {
                modalities.push(&r.modality);
            }
        }
        let mut s = String::new();
        for m in modalities {
            let (Some(b), Some(g)) = (self.row(baseline, m), self.row(generative, m)) else {
                continue;
            };
            let (b_avg, g_avg) = (b.average()?, g.average()?);
            let pct = |r: Result<f64>| r.map_or_else(|_| "n/a".to_string(), |v| format!("{v:.1}"));
            let _ = writeln!(s, "{m}.baseline_drop_pct = {}", pct(relative_drop(b_avg, b.accuracies[0])));
            let _ = writeln!(s, "{m}.generative_drop_pct = {}", pct(relative_drop(g_avg, g.accuracies[0])));
            let _ = writeln!(s, "{m}.improvement_pct = {}", pct(relative_improvement(g_avg, b_avg)));
            let recovered = gap_recovered(b, g).map_or_else(|_| "n/a".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(s, "{m}.gap_recovered = {recovered}");
        }
        Ok(s)
    }
}

/// Fraction of the baseline's lost average accuracy that the generative row
/// wins back: `(avg_gen − avg_base) / (clean_base − avg_base)`.
pub fn gap_recovered(baseline: &EvalRow, generative: &EvalRow) -> Result<f64> {
    let b_avg = baseline.average()?;
    let gap = baseline.accuracies[0] - b_avg;
    if !(gap > 0.0) {
        return Err(Error::invalid("baseline row shows no accuracy gap"));
    }
    Ok((generative.average()? - b_avg) / gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::cross_entropy;

    fn row(accs: &[f64]) -> EvalRow {
        EvalRow {
            method: "baseline".into(),
            modality: "visible".into(),
            accuracies: accs.to_vec(),
        }
    }

    #[test]
    fn zero_head_loss_is_ln_classes() {
        let features = Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.5, 0.2]).unwrap();
        let head = fit_linear_head(&features, &[0, 1, 2, 2], 3, HeadHyper { lr: 0.1, epochs: 0 }).unwrap();
        let loss = cross_entropy(&head.logits(&features).unwrap(), &[0, 1, 2, 2]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn separable_pair_is_learned() {
        let features = Tensor::new(vec![2, 3], vec![0.2, 1.0, -3.0, 0.7, 1.0, 2.0]).unwrap();
        let head = fit_linear_head(&features, &[1, 0], 2, HeadHyper::default()).unwrap();
        assert_eq!(head.accuracy(&features, &[1, 0]).unwrap(), 1.0);
        let again = fit_linear_head(&features, &[1, 0], 2, HeadHyper::default()).unwrap();
        assert_eq!(head.digest(), again.digest());
    }

    #[test]
    fn head_codec_round_trip() {
        let features = Tensor::new(vec![3, 2], vec![0.2, 1.0, -3.0, 0.7, 1.0, 2.0]).unwrap();
        let head = fit_linear_head(&features, &[1, 0, 2], 3, HeadHyper { lr: 0.1, epochs: 20 }).unwrap();
        let bytes = encode_head(&head);
        let back = decode_head(&bytes).unwrap();
        assert_eq!(back.digest(), head.digest());
        assert_eq!(encode_head(&back), bytes);
        assert!(decode_head(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn task_network_matches_head() {
        use crate::baseline::{CheckpointMeta, TapRole};
        use crate::prng::SplitMix64;
        let spec = NetworkSpec::new(
            vec![Layer::conv_same(2, 3), Layer::Flatten, Layer::Dense { out_dim: 5 }, Layer::Relu, Layer::Dense { out_dim: 3 }],
            [1, 4, 4],
            3,
        )
        .unwrap();
        let mut rng = SplitMix64::new(4);
        let ckpt = Checkpoint {
            params: Params::init(&spec, &mut rng).unwrap(),
            spec,
            meta: CheckpointMeta { seed: 4, epochs: 0, final_train_loss: 0.0, dataset_id: "t".into() },
        };
        let tap = FeatureTap { layer_index: 2, role: TapRole::Extractor };
        let x = Tensor::new(vec![6, 1, 4, 4], (0..96).map(|_| rng.next_f64()).collect()).unwrap();
        let ex = BaselineExtractor { ckpt: &ckpt, tap };
        let f = ex.features(&x).unwrap();
        let head = fit_linear_head(&f, &[0, 1, 2, 0, 1, 2], 3, HeadHyper { lr: 0.1, epochs: 50 }).unwrap();
        let task = task_network(&ckpt, &tap, &head).unwrap();
        let (direct, _) = crate::nn::eval_network(&task.spec, &task.params, &x, &[]).unwrap();
        assert!(direct.max_abs_diff(&head.logits(&f).unwrap()) < 1e-12);
        let wrong = FeatureTap { layer_index: 0, role: TapRole::Extractor };
        assert!(task_network(&ckpt, &wrong, &head).is_err());
    }

    #[test]
    fn head_errors() {
        let f = Tensor::zeros(&[3, 2]);
        assert!(fit_linear_head(&f, &[0, 1], 2, HeadHyper::default()).is_err());
        let head = fit_linear_head(&f, &[0, 1, 1], 2, HeadHyper::default()).unwrap();
        assert!(head.logits(&Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn statistics() {
        assert_eq!(row_average(&[0.5, 0.5, 0.5]).unwrap(), 0.5);
        assert!(row_average(&[]).is_err());
        assert_eq!(relative_drop(0.9, 0.9).unwrap(), 0.0);
        assert!(relative_drop(0.1, 0.0).is_err());
        assert_eq!(relative_improvement(0.4, 0.4).unwrap(), 0.0);
        assert!(relative_improvement(0.4, -1.0).is_err());
        let base = row(&[1.0, 0.5, 0.25, 0.25]);
        let gen = row(&[1.0, 0.75, 0.5, 0.5]);
        // gap 0.5, win 0.1875
        assert_eq!(gap_recovered(&base, &gen).unwrap(), 0.375);
    }

    #[test]
    fn csv_round_trip() {
        let mut g = row(&[0.95, 0.9, 0.8125, 0.5]);
        g.method = "generative_sensing".into();
        let t = EvalTable::new(vec![0.0, 1.0, 2.5, 3.0], vec![row(&[0.99, 0.5, 0.25, 0.25]), g]).unwrap();
        let csv = t.to_csv();
        assert!(csv.starts_with("method,modality,sigma_0,sigma_1,sigma_2.5,sigma_3,avg\n"));
        assert!(csv.contains("baseline,visible,0.9900,0.5000,0.2500,0.2500,0.4975\n"), "{csv}");
        let back = EvalTable::from_csv(&csv).unwrap();
        assert_eq!(back.to_csv(), csv);
        assert!(EvalTable::new(vec![0.0], vec![row(&[1.5])]).is_err());
        let stats = t.stats_text("baseline", "generative_sensing").unwrap();
        assert!(stats.contains("visible.improvement_pct = "), "{stats}");
        let flat = EvalTable::new(vec![0.0, 1.0], vec![row(&[0.5, 0.5]), { let mut r = row(&[0.5, 0.5]); r.method = "g".into(); r }]).unwrap();
        assert!(flat.stats_text("baseline", "g").unwrap().contains("gap_recovered = n/a"));
    }
}
