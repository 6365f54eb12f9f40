//! Flat `key = value` configuration for a full experiment.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::baseline::TrainHyper;
use crate::data::DatasetManifest;
use crate::degrade::{kernel_size, DegradationKind, DegradationSpec, ModalityTransform};
use crate::error::{Error, Result};
use crate::genunits::{RegKind, RegularizationSpec};
use crate::prng::SplitMix64;
use crate::susceptibility::MaskRule;
use crate::transfer::HeadHyper;

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
        let key = k.trim().to_string();
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::invalid(format!("line {}: duplicate key `{key}`", n + 1)));
        }
    }
    Ok(out)
}

/// A sensor modality: a tag and the input transform that simulates it
/// (none for the sensor the baseline was trained on).
#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySpec {
    pub tag: String,
    pub transform: Option<ModalityTransform>,
}

impl ModalitySpec {
    /// Degradation chain for this modality at blur level `sigma`.
    pub fn chain(&self, sigma: f64) -> Vec<DegradationSpec> {
        let mut chain = self.prefix();
        chain.push(DegradationSpec::blur(sigma, self.tag.clone()));
        chain
    }

    /// The modality transform alone, as a (possibly empty) chain.
    pub fn prefix(&self) -> Vec<DegradationSpec> {
        self.transform
            .map(|t| DegradationSpec::new(DegradationKind::Modality(t), self.tag.clone()))
            .into_iter()
            .collect()
    }
}

impl fmt::Display for ModalitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.transform {
            None => f.write_str(&self.tag),
            Some(t) => write!(f, "{}:{t}", self.tag),
        }
    }
}

impl FromStr for ModalitySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (tag, transform) = match s.split_once(':') {
            Some((tag, t)) => (tag, Some(t.parse()?)),
            None => (s, None),
        };
        let valid = !tag.is_empty()
            && tag.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        if !valid {
            return Err(Error::invalid(format!(
                "modality tag `{tag}` must be non-empty ASCII letters, digits, `_` or `-`"
            )));
        }
        Ok(Self {
            tag: tag.to_string(),
            transform,
        })
    }
}

/// Every knob of a full experiment. Missing keys take the reference values.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub classes: usize,
    /// train / rank / head / test
    pub splits: [usize; 4],
    pub seed: u64,
    pub sigma_levels: Vec<f64>,
    /// Blur level used for ranking; defaults to the largest level.
    pub rank_sigma: Option<f64>,
    pub modalities: Vec<ModalitySpec>,
    pub mask: MaskRule,
    /// Contiguous channel groups for ranking; 1 ranks single channels.
    pub cluster_size: usize,
    /// Defaults to `max(8, n/2)` for `n` selected channels.
    pub unit_width: Option<usize>,
    pub reg: RegularizationSpec,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub baseline_epochs: usize,
    pub unit_epochs: usize,
    pub head: HeadHyper,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            splits: [2000, 400, 400, 400],
            seed: 1,
            sigma_levels: vec![0.0, 1.0, 2.0, 3.0],
            rank_sigma: None,
            modalities: vec![
                ModalitySpec {
                    tag: "visible".into(),
                    transform: None,
                },
                ModalitySpec {
                    tag: "ir".into(),
                    transform: Some(ModalityTransform::Invert),
                },
            ],
            mask: MaskRule::TopK(8),
            cluster_size: 1,
            unit_width: Some(8),
            reg: RegularizationSpec {
                kind: RegKind::L2,
                lambda: 5e-4,
            },
            lr: 0.01,
            momentum: 0.9,
            batch_size: 32,
            baseline_epochs: 30,
            unit_epochs: 20,
            head: HeadHyper::default(),
        }
    }
}

fn list<T: FromStr>(value: &str, key: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse().map_err(|_| Error::invalid(format!("bad `{key}` entry `{v}`"))))
        .collect()
}

fn num<T: FromStr>(value: &str, key: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("bad value `{value}` for `{key}`")))
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Seeds derived from the master seed, by purpose.
    pub fn data_seed(&self) -> u64 {
        self.seed
    }

    pub fn baseline_seed(&self) -> u64 {
        SplitMix64::for_stream(self.seed, 1).next_u64()
    }

    /// Seeds for unit initialization and for unit-training shuffles of the
    /// `index`-th modality.
    pub fn unit_seeds(&self, index: usize) -> (u64, u64) {
        let base = 2 + 2 * index as u64;
        (
            SplitMix64::for_stream(self.seed, base).next_u64(),
            SplitMix64::for_stream(self.seed, base + 1).next_u64(),
        )
    }

    pub fn rank_sigma(&self) -> f64 {
        self.rank_sigma
            .unwrap_or_else(|| self.sigma_levels.iter().copied().fold(0.0, f64::max))
    }

    /// Applies `key = value` text on top of `self`. Unknown keys are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (key, value) in parse_key_values(text)? {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "classes" => self.classes = num(v, key)?,
            "train_size" => self.splits[0] = num(v, key)?,
            "rank_size" => self.splits[1] = num(v, key)?,
            "head_size" => self.splits[2] = num(v, key)?,
            "test_size" => self.splits[3] = num(v, key)?,
            "seed" => self.seed = num(v, key)?,
            "sigma_levels" => self.sigma_levels = list(v, key)?,
            "rank_sigma" => self.rank_sigma = if v == "auto" { None } else { Some(num(v, key)?) },
            "modalities" => self.modalities = list(v, key)?,
            "mask" => self.mask = v.parse()?,
            "top_k" => self.mask = MaskRule::TopK(num(v, key)?),
            "threshold" => self.mask = format!("threshold:{v}").parse()?,
            "cluster_size" => self.cluster_size = num(v, key)?,
            "unit_width" => self.unit_width = if v == "auto" { None } else { Some(num(v, key)?) },
            "reg" => self.reg.kind = v.parse()?,
            "lambda" => self.reg.lambda = num(v, key)?,
            "lr" => self.lr = num(v, key)?,
            "momentum" => self.momentum = num(v, key)?,
            "batch_size" => self.batch_size = num(v, key)?,
            "baseline_epochs" => self.baseline_epochs = num(v, key)?,
            "unit_epochs" => self.unit_epochs = num(v, key)?,
            "head_lr" => self.head.lr = num(v, key)?,
            "head_epochs" => self.head.epochs = num(v, key)?,
            _ => return Err(Error::invalid(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_levels.is_empty() {
            return Err(Error::invalid("sigma_levels is empty"));
        }
        if let Some(s) = self.sigma_levels.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::invalid(format!("blur level {s} is not a finite non-negative number")));
        }
        if !self.sigma_levels.contains(&0.0) {
            return Err(Error::invalid("sigma_levels must include the clean level 0"));
        }
        if self.sigma_levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("sigma_levels must be strictly increasing"));
        }
        let rank = self.rank_sigma();
        if !(rank > 0.0 && rank.is_finite()) {
            return Err(Error::invalid(format!(
                "ranking needs a positive blur level, got {rank}"
            )));
        }
        let side = self.manifest().image_shape[1];
        for &s in self.sigma_levels.iter().chain([&rank]) {
            if s > 0.0 && kernel_size(s) / 2 + 1 > side {
                return Err(Error::invalid(format!("blur level {s} is too wide for {side}-pixel images")));
            }
        }
        if self.modalities.is_empty() {
            return Err(Error::invalid("no modalities configured"));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if self.modalities[..i].iter().any(|o| o.tag == m.tag) {
                return Err(Error::invalid(format!("modality `{}` listed twice", m.tag)));
            }
        }
        if self.classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        self.manifest().validate()?;
        if self.cluster_size == 0 {
            return Err(Error::invalid("cluster_size must be at least 1"));
        }
        if self.unit_width == Some(0) {
            return Err(Error::invalid("unit_width must be at least 1"));
        }
        RegularizationSpec::new(self.reg.kind, self.reg.lambda)?;
        self.baseline_hyper().validate()?;
        self.unit_hyper(0).validate()?;
        if self.lr <= 0.0 {
            return Err(Error::invalid("lr must be positive"));
        }
        if self.baseline_epochs == 0 {
            return Err(Error::invalid("baseline_epochs must be at least 1"));
        }
        if !(self.head.lr > 0.0 && self.head.lr.is_finite()) {
            return Err(Error::invalid("head_lr must be positive"));
        }
        Ok(())
    }

    pub fn manifest(&self) -> DatasetManifest {
        let mut m = DatasetManifest::shapes(self.splits, self.data_seed());
        m.num_classes = self.classes;
        m
    }

    pub fn baseline_hyper(&self) -> TrainHyper {
        TrainHyper {
            lr: self.lr,
            momentum: self.momentum,
            epochs: self.baseline_epochs,
            batch_size: self.batch_size,
            seed: self.baseline_seed(),
        }
    }

    pub fn unit_hyper(&self, modality_index: usize) -> TrainHyper {
        TrainHyper {
            lr: self.lr,
            momentum: self.momentum,
            epochs: self.unit_epochs,
            batch_size: self.batch_size,
            seed: self.unit_seeds(modality_index).1,
        }
    }

    /// One `key = value` line per knob, in a fixed order.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "auto".into());
        let [train, rank, head, test] = self.splits;
        let mut lines = vec![
            format!("classes = {}", self.classes),
            format!("train_size = {train}"),
            format!("rank_size = {rank}"),
            format!("head_size = {head}"),
            format!("test_size = {test}"),
            format!("seed = {}", self.seed),
            format!("sigma_levels = {}", join(&self.sigma_levels)),
            format!("rank_sigma = {}", opt(self.rank_sigma.map(|s| s.to_string()))),
            format!("modalities = {}", join(&self.modalities)),
            format!("mask = {}", self.mask),
            format!("cluster_size = {}", self.cluster_size),
            format!("unit_width = {}", opt(self.unit_width.map(|w| w.to_string()))),
            format!("reg = {}", self.reg.kind),
            format!("lambda = {}", self.reg.lambda),
            format!("lr = {}", self.lr),
            format!("momentum = {}", self.momentum),
            format!("batch_size = {}", self.batch_size),
            format!("baseline_epochs = {}", self.baseline_epochs),
            format!("unit_epochs = {}", self.unit_epochs),
            format!("head_lr = {}", self.head.lr),
            format!("head_epochs = {}", self.head.epochs),
        ];
        lines.push(String::new());
        lines.join("\n")
    }

    /// SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_values() {
        let kv = parse_key_values("a = 1 # one\n\n# skip\nb=two words\n").unwrap();
        assert_eq!(kv["a"], "1");
        assert_eq!(kv["b"], "two words");
        assert!(parse_key_values("a = 1\na = 2\n").is_err());
        assert!(parse_key_values("no equals\n").is_err());
    }

    #[test]
    fn canonical_text_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.set("lambda", "1e-3").unwrap();
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn overrides_and_errors() {
        let cfg = RunConfig::from_text("top_k = 4\nsigma_levels = 0, 0.5, 2\nmodalities = visible, nir:invert_gamma:2\n").unwrap();
        assert_eq!(cfg.mask, MaskRule::TopK(4));
        assert_eq!(cfg.rank_sigma(), 2.0);
        assert_eq!(cfg.modalities[1].transform, Some(ModalityTransform::InvertGamma(2.0)));
        assert_eq!(cfg.modalities[1].chain(0.5).len(), 2);

        for bad in [
            "sigma_levels = \n",
            "sigma_levels = 1,2\n",
            "sigma_levels = 0,2,1\n",
            "sigma_levels = 0,40\n",
            "train_size = 2001\n",
            "lambda = -1\n",
            "threshold = inf\n",
            "colour = red\n",
            "modalities = visible,visible\n",
            "modalities = ir:sepia\n",
            "lr = 0\n",
        ] {
            assert!(RunConfig::from_text(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn derived_seeds_differ() {
        let cfg = RunConfig::default();
        let (a, b) = cfg.unit_seeds(0);
        let (c, _) = cfg.unit_seeds(1);
        assert!(a != b && a != c && cfg.baseline_seed() != a);
    }
}
