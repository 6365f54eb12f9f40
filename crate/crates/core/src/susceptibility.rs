//! Channel susceptibility: how much top-1 accuracy drops when the clean
//! activation of a channel is replaced by its activation under a degraded
//! input, and the significance masks derived from those drops.

use std::fmt;
use std::str::FromStr;
use std::thread;

use crate::baseline::Checkpoint;
use crate::degrade::{apply_chain, DegradationSpec};
use crate::error::{Error, Result};
use crate::nn::{accuracy, LabeledBatch, Net};
use crate::tensor::Tensor;

/// Clean and degraded activations at one layer, ready for swap evaluation.
pub struct SwapContext<'a> {
    net: Net<'a>,
    layer_index: usize,
    clean: Tensor,
    degraded: Tensor,
    labels: &'a [usize],
}

impl<'a> SwapContext<'a> {
    /// `degraded_inputs` are the eval images as seen by the low-end sensor,
    /// in the same order as `eval_set`.
    pub fn new(
        ckpt: &'a Checkpoint,
        layer_index: usize,
        eval_set: &'a LabeledBatch,
        degraded_inputs: &Tensor,
    ) -> Result<Self> {
        let net = ckpt.net()?;
        let shape = ckpt.spec.output_shape(layer_index)?;
        if shape.len() != 3 {
            return Err(Error::invalid(format!(
                "layer {layer_index} output {shape:?} is not channel-indexed"
            )));
        }
        if degraded_inputs.shape() != eval_set.inputs.shape() {
            return Err(Error::shape(
                "swap",
                format!(
                    "degraded inputs {:?} vs clean inputs {:?}",
                    degraded_inputs.shape(),
                    eval_set.inputs.shape()
                ),
            ));
        }
        let clean = net.forward_range(&eval_set.inputs, 0, layer_index + 1)?;
        let degraded = net.forward_range(degraded_inputs, 0, layer_index + 1)?;
        Ok(Self {
            net,
            layer_index,
            clean,
            degraded,
            labels: &eval_set.labels,
        })
    }

    pub fn channels(&self) -> usize {
        self.clean.shape()[1]
    }

    /// Top-1 accuracy with the channels in `set` taken from the degraded activation.
    pub fn accuracy(&self, set: &[usize]) -> Result<f64> {
        let channels = self.channels();
        if let Some(&bad) = set.iter().find(|&&c| c >= channels) {
            return Err(Error::invalid(format!(
                "channel {bad} out of range for {channels} channels at layer {}",
                self.layer_index
            )));
        }
        let plane = self.clean.shape()[2] * self.clean.shape()[3];
        let mut act = self.clean.clone();
        for b in 0..act.batch() {
            let src = self.degraded.sample(b);
            let dst = act.sample_mut(b);
            for &c in set {
                dst[c * plane..(c + 1) * plane].copy_from_slice(&src[c * plane..(c + 1) * plane]);
            }
        }
        let logits = self
            .net
            .forward_range(&act, self.layer_index + 1, self.net.spec.layers.len())?;
        Ok(accuracy(&logits, self.labels))
    }

    /// Accuracy for each channel set, spread over up to `threads` workers.
    /// Results are in input order regardless of scheduling.
    pub fn accuracies(&self, sets: &[Vec<usize>], threads: usize) -> Result<Vec<f64>> {
        let threads = threads.clamp(1, sets.len().max(1));
        if threads == 1 {
            return sets.iter().map(|s| self.accuracy(s)).collect();
        }
        let mut slots: Vec<Option<Result<f64>>> = (0..sets.len()).map(|_| None).collect();
        thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    scope.spawn(move || {
                        (t..sets.len())
                            .step_by(threads)
                            .map(|i| (i, self.accuracy(&sets[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("swap worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every set evaluated")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitOfAnalysis {
    SingleChannel,
    /// Contiguous channel blocks of this size (the last may be smaller).
    Cluster(usize),
}

impl fmt::Display for UnitOfAnalysis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnitOfAnalysis::SingleChannel => write!(f, "single_channel"),
            UnitOfAnalysis::Cluster(g) => write!(f, "cluster:{g}"),
        }
    }
}

impl FromStr for UnitOfAnalysis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "single_channel" {
            return Ok(UnitOfAnalysis::SingleChannel);
        }
        s.strip_prefix("cluster:")
            .and_then(|g| g.parse().ok())
            .filter(|&g| g >= 1)
            .map(UnitOfAnalysis::Cluster)
            .ok_or_else(|| Error::invalid(format!("bad unit of analysis `{s}`")))
    }
}

/// Per-channel (or per-group) accuracy drops at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SusceptibilityReport {
    pub layer_index: usize,
    pub channels: usize,
    pub baseline_accuracy: f64,
    pub delta_phi: Vec<f64>,
    /// Low-end sensor model, applied in order.
    pub degradation: Vec<DegradationSpec>,
    pub eval_set_id: String,
    pub unit_of_analysis: UnitOfAnalysis,
}

impl SusceptibilityReport {
    /// Member channels of entry `i` of `delta_phi`.
    pub fn members(&self, i: usize) -> Vec<usize> {
        match self.unit_of_analysis {
            UnitOfAnalysis::SingleChannel => vec![i],
            UnitOfAnalysis::Cluster(g) => (i * g..((i + 1) * g).min(self.channels)).collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let degradation = self
            .degradation
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(" + ");
        let mut s = String::from("# susceptibility report\n");
        s.push_str(&format!("layer_index = {}\n", self.layer_index));
        s.push_str(&format!("channels = {}\n", self.channels));
        s.push_str(&format!("baseline_accuracy = {}\n", self.baseline_accuracy));
        s.push_str(&format!("degradation = {degradation}\n"));
        s.push_str(&format!("eval_set_id = {}\n", self.eval_set_id));
        s.push_str(&format!("unit_of_analysis = {}\n", self.unit_of_analysis));
        s.push_str("index,delta_phi\n");
        for (i, d) in self.delta_phi.iter().enumerate() {
            s.push_str(&format!("{i},{d}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (header, body) = text
            .split_once("index,delta_phi\n")
            .ok_or_else(|| Error::format("susceptibility report", "`index,delta_phi` header", "none"))?;
        let kv = crate::config::parse_key_values(header)?;
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| Error::format("susceptibility report", format!("key `{k}`"), "nothing"))
        };
        let bad = |k: &str| Error::format("susceptibility report", format!("valid `{k}`"), "unparsable value");
        let degradation = get("degradation")?
            .split(" + ")
            .map(str::parse)
            .collect::<Result<Vec<DegradationSpec>>>()?;
        let mut delta_phi = Vec::new();
        for (n, line) in body.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let (i, v) = line.split_once(',').ok_or_else(|| bad("record"))?;
            if i.trim().parse::<usize>().ok() != Some(n) {
                return Err(Error::format("susceptibility report", format!("record {n}"), line.to_string()));
            }
            delta_phi.push(v.trim().parse().map_err(|_| bad("delta_phi"))?);
        }
        let report = Self {
            layer_index: get("layer_index")?.parse().map_err(|_| bad("layer_index"))?,
            channels: get("channels")?.parse().map_err(|_| bad("channels"))?,
            baseline_accuracy: get("baseline_accuracy")?.parse().map_err(|_| bad("baseline_accuracy"))?,
            delta_phi,
            degradation,
            eval_set_id: get("eval_set_id")?.clone(),
            unit_of_analysis: get("unit_of_analysis")?.parse()?,
        };
        let expected = match report.unit_of_analysis {
            UnitOfAnalysis::SingleChannel => report.channels,
            UnitOfAnalysis::Cluster(g) => report.channels.div_ceil(g),
        };
        if report.delta_phi.len() != expected {
            return Err(Error::format(
                "susceptibility report",
                format!("{expected} records"),
                format!("{}", report.delta_phi.len()),
            ));
        }
        Ok(report)
    }
}

/// Accuracy when channels `set` at `layer_index` come from the degraded input.
pub fn swap_accuracy(
    ckpt: &Checkpoint,
    layer_index: usize,
    set: &[usize],
    eval_set: &LabeledBatch,
    degradation: &[DegradationSpec],
) -> Result<f64> {
    let degraded = apply_chain(degradation, &eval_set.inputs)?;
    SwapContext::new(ckpt, layer_index, eval_set, &degraded)?.accuracy(set)
}

fn report_from_sets(
    ctx: &SwapContext<'_>,
    sets: &[Vec<usize>],
    unit: UnitOfAnalysis,
    degradation: &[DegradationSpec],
    eval_set_id: &str,
    threads: usize,
) -> Result<SusceptibilityReport> {
    let a_high = ctx.accuracy(&[])?;
    let delta_phi = ctx
        .accuracies(sets, threads)?
        .into_iter()
        .map(|a| a_high - a)
        .collect();
    Ok(SusceptibilityReport {
        layer_index: ctx.layer_index,
        channels: ctx.channels(),
        baseline_accuracy: a_high,
        delta_phi,
        degradation: degradation.to_vec(),
        eval_set_id: eval_set_id.to_string(),
        unit_of_analysis: unit,
    })
}

/// ΔΦ(c) = A_high − A_swap({c}) for every channel at `layer_index`.
pub fn compute_delta_phi(
    ckpt: &Checkpoint,
    layer_index: usize,
    eval_set: &LabeledBatch,
    eval_set_id: &str,
    degradation: &[DegradationSpec],
    threads: usize,
) -> Result<SusceptibilityReport> {
    let degraded = apply_chain(degradation, &eval_set.inputs)?;
    let ctx = SwapContext::new(ckpt, layer_index, eval_set, &degraded)?;
    let sets: Vec<Vec<usize>> = (0..ctx.channels()).map(|c| vec![c]).collect();
    report_from_sets(&ctx, &sets, UnitOfAnalysis::SingleChannel, degradation, eval_set_id, threads)
}

/// ΔΦ over contiguous channel groups of size `group_size`.
pub fn rank_clusters(
    ckpt: &Checkpoint,
    layer_index: usize,
    eval_set: &LabeledBatch,
    eval_set_id: &str,
    degradation: &[DegradationSpec],
    group_size: usize,
    threads: usize,
) -> Result<SusceptibilityReport> {
    if group_size < 1 {
        return Err(Error::invalid("cluster group size must be at least 1"));
    }
    let degraded = apply_chain(degradation, &eval_set.inputs)?;
    let ctx = SwapContext::new(ckpt, layer_index, eval_set, &degraded)?;
    let channels = ctx.channels();
    if group_size > channels {
        return Err(Error::invalid(format!(
            "group size {group_size} exceeds {channels} channels"
        )));
    }
    let sets: Vec<Vec<usize>> = (0..channels)
        .step_by(group_size)
        .map(|s| (s..(s + group_size).min(channels)).collect())
        .collect();
    let unit = if group_size == 1 {
        UnitOfAnalysis::SingleChannel
    } else {
        UnitOfAnalysis::Cluster(group_size)
    };
    report_from_sets(&ctx, &sets, unit, degradation, eval_set_id, threads)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskRule {
    /// Select entries with ΔΦ strictly greater than τ.
    Threshold(f64),
    /// Select the k largest ΔΦ; ties go to the lower index.
    TopK(usize),
}

impl fmt::Display for MaskRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskRule::Threshold(t) => write!(f, "threshold:{t}"),
            MaskRule::TopK(k) => write!(f, "top_k:{k}"),
        }
    }
}

impl FromStr for MaskRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("bad mask rule `{s}` (expected threshold:τ or top_k:k)"));
        if let Some(t) = s.strip_prefix("threshold:") {
            let tau: f64 = t.parse().map_err(|_| bad())?;
            if !tau.is_finite() {
                return Err(Error::invalid("threshold must be finite"));
            }
            Ok(MaskRule::Threshold(tau))
        } else if let Some(k) = s.strip_prefix("top_k:") {
            Ok(MaskRule::TopK(k.parse().map_err(|_| bad())?))
        } else {
            Err(bad())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignificanceMask {
    pub layer_index: usize,
    pub selected: Vec<bool>,
    pub rule: MaskRule,
}

impl SignificanceMask {
    pub fn channels(&self) -> Vec<usize> {
        self.selected
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }
}

/// Binarizes a report. Cluster entries expand to all their member channels.
pub fn threshold_mask(report: &SusceptibilityReport, rule: MaskRule) -> Result<SignificanceMask> {
    if report.delta_phi.is_empty() {
        return Err(Error::invalid("empty susceptibility report"));
    }
    let dp = &report.delta_phi;
    let picked: Vec<bool> = match rule {
        MaskRule::Threshold(tau) => {
            if !tau.is_finite() {
                return Err(Error::invalid(format!("threshold must be finite, got {tau}")));
            }
            dp.iter().map(|&d| d > tau).collect()
        }
        MaskRule::TopK(k) => {
            let mut order: Vec<usize> = (0..dp.len()).collect();
            // stable sort keeps lower indices first among equal drops
            order.sort_by(|&a, &b| dp[b].total_cmp(&dp[a]));
            let mut picked = vec![false; dp.len()];
            for &i in order.iter().take(k.min(dp.len())) {
                picked[i] = true;
            }
            picked
        }
    };
    let mut selected = vec![false; report.channels];
    for (i, _) in picked.iter().enumerate().filter(|(_, &p)| p) {
        for c in report.members(i) {
            selected[c] = true;
        }
    }
    Ok(SignificanceMask {
        layer_index: report.layer_index,
        selected,
        rule,
    })
}
