//! Synthetic shape datasets, their manifests, and IDX persistence.

pub mod idx;
pub mod shapes;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::LabeledBatch;
use crate::prng::SplitMix64;
use crate::tensor::Tensor;

use idx::IdxImages;

/// Role a split plays in the pipeline. Ordering is the on-disk sample order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SplitRole {
    /// Baseline and generative-unit training.
    Train,
    /// Held out for susceptibility ranking only.
    RankEval,
    /// Linear-head training.
    HeadTrain,
    Test,
}

impl SplitRole {
    pub const ALL: [SplitRole; 4] = [
        SplitRole::Train,
        SplitRole::RankEval,
        SplitRole::HeadTrain,
        SplitRole::Test,
    ];

    pub fn stem(self) -> &'static str {
        match self {
            SplitRole::Train => "train",
            SplitRole::RankEval => "rank",
            SplitRole::HeadTrain => "head",
            SplitRole::Test => "test",
        }
    }

    pub fn images_file(self) -> String {
        format!("{}-images-idx3-ubyte", self.stem())
    }

    pub fn labels_file(self) -> String {
        format!("{}-labels-idx1-ubyte", self.stem())
    }
}

impl fmt::Display for SplitRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.stem())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub num_classes: usize,
    /// `(channels, height, width)`
    pub image_shape: [usize; 3],
    pub splits: BTreeMap<SplitRole, usize>,
    pub seed: u64,
    pub modality_tag: String,
}

impl DatasetManifest {
    pub fn shapes(splits: [usize; 4], seed: u64) -> Self {
        Self {
            name: "shapes4".into(),
            num_classes: shapes::CLASS_NAMES.len(),
            image_shape: [1, 32, 32],
            splits: SplitRole::ALL.into_iter().zip(splits).collect(),
            seed,
            modality_tag: "visible".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > shapes::CLASS_NAMES.len() {
            return Err(Error::invalid(format!(
                "num_classes must be in 1..={}, got {}",
                shapes::CLASS_NAMES.len(),
                self.num_classes
            )));
        }
        if self.image_shape[0] != 1 || self.image_shape[1] != self.image_shape[2] || self.image_shape[1] < 16 {
            return Err(Error::invalid(format!(
                "shape images are single-channel squares of side >= 16, got {:?}",
                self.image_shape
            )));
        }
        for role in SplitRole::ALL {
            let n = self.split_len(role);
            if n == 0 || !n.is_multiple_of(self.num_classes) {
                return Err(Error::invalid(format!(
                    "split `{role}` has {n} samples, which is not a positive multiple of {} classes",
                    self.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn split_len(&self, role: SplitRole) -> usize {
        self.splits.get(&role).copied().unwrap_or(0)
    }

    /// Global sample index range `[start, end)` of a split.
    pub fn split_range(&self, role: SplitRole) -> (usize, usize) {
        let start: usize = SplitRole::ALL
            .iter()
            .take_while(|&&r| r != role)
            .map(|&r| self.split_len(r))
            .sum();
        (start, start + self.split_len(role))
    }

    pub fn total(&self) -> usize {
        self.splits.values().sum()
    }

    /// Every sample index belongs to exactly one split role.
    pub fn check_split_hygiene(&self) -> Result<()> {
        let mut owner = vec![None; self.total()];
        for role in SplitRole::ALL {
            let (a, b) = self.split_range(role);
            for slot in &mut owner[a..b] {
                if let Some(prev) = slot.replace(role) {
                    return Err(Error::invalid(format!(
                        "sample shared by splits `{prev}` and `{role}`"
                    )));
                }
            }
        }
        if owner.iter().any(Option::is_none) {
            return Err(Error::invalid("splits do not cover the dataset"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let [c, h, w] = self.image_shape;
        let mut s = format!(
            "name = {}\nnum_classes = {}\nimage_shape = {c},{h},{w}\n",
            self.name, self.num_classes
        );
        for role in SplitRole::ALL {
            s.push_str(&format!("split_{} = {}\n", role.stem(), self.split_len(role)));
        }
        s.push_str(&format!("seed = {}\nmodality_tag = {}\n", self.seed, self.modality_tag));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = crate::config::parse_key_values(text)?;
        let get = |k: &str| {
            kv.get(k)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("manifest lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::invalid(format!("manifest `{k}` is not an integer")))
        };
        let dims: Vec<usize> = get("image_shape")?
            .split(',')
            .map(|d| d.trim().parse().map_err(|_| Error::invalid("bad image_shape")))
            .collect::<Result<_>>()?;
        let image_shape: [usize; 3] = dims
            .try_into()
            .map_err(|_| Error::invalid("image_shape needs three extents"))?;
        let mut splits = BTreeMap::new();
        for role in SplitRole::ALL {
            splits.insert(role, num(&format!("split_{}", role.stem()))?);
        }
        let manifest = Self {
            name: get("name")?,
            num_classes: num("num_classes")?,
            image_shape,
            splits,
            seed: get("seed")?
                .parse()
                .map_err(|_| Error::invalid("manifest `seed` is not an integer"))?,
            modality_tag: get("modality_tag")?,
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

/// One split as stored: `u8` pixels and labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawSplit {
    pub images: IdxImages,
    pub labels: Vec<u8>,
}

impl RawSplit {
    /// Promotes pixels to `f64` in `[0, 1]` as a `(n, 1, h, w)` batch.
    pub fn to_batch(&self) -> Result<LabeledBatch> {
        let data = self.images.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        let inputs = Tensor::new(vec![self.images.count, 1, self.images.rows, self.images.cols], data)?;
        LabeledBatch::new(inputs, self.labels.iter().map(|&l| l as usize).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub splits: BTreeMap<SplitRole, LabeledBatch>,
}

impl Dataset {
    pub fn split(&self, role: SplitRole) -> &LabeledBatch {
        &self.splits[&role]
    }
}

fn quantize(p: f64) -> u8 {
    (255.0 * p).round().clamp(0.0, 255.0) as u8
}

/// Renders every split. Labels cycle through the classes, so each split is
/// exactly balanced; sample `g` draws its jitter from stream `(seed, g)`.
pub fn generate(manifest: &DatasetManifest) -> Result<BTreeMap<SplitRole, RawSplit>> {
    manifest.validate()?;
    manifest.check_split_hygiene()?;
    let side = manifest.image_shape[1];
    let mut out = BTreeMap::new();
    for role in SplitRole::ALL {
        let (start, end) = manifest.split_range(role);
        let mut pixels = Vec::with_capacity((end - start) * side * side);
        let mut labels = Vec::with_capacity(end - start);
        for g in start..end {
            let label = (g - start) % manifest.num_classes;
            let mut rng = SplitMix64::for_stream(manifest.seed, g as u64);
            pixels.extend(shapes::render(label, side, &mut rng).into_iter().map(quantize));
            labels.push(label as u8);
        }
        out.insert(
            role,
            RawSplit {
                images: IdxImages {
                    count: end - start,
                    rows: side,
                    cols: side,
                    pixels,
                },
                labels,
            },
        );
    }
    Ok(out)
}

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Writes the manifest and one IDX image/label pair per split into `dir`.
pub fn gen_data(manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    let splits = generate(manifest)?;
    fs::create_dir_all(dir)?;
    for (role, split) in &splits {
        idx::write_images(&dir.join(role.images_file()), &split.images)?;
        idx::write_labels(&dir.join(role.labels_file()), &split.labels)?;
    }
    fs::write(dir.join(MANIFEST_FILE), manifest.to_text())?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::from_text(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    manifest.check_split_hygiene()?;
    let mut splits = BTreeMap::new();
    for role in SplitRole::ALL {
        let raw = RawSplit {
            images: idx::read_images(&dir.join(role.images_file()))?,
            labels: idx::read_labels(&dir.join(role.labels_file()))?,
        };
        let expected = manifest.split_len(role);
        if raw.images.count != expected || raw.labels.len() != expected {
            return Err(Error::format(
                format!("split `{role}`"),
                format!("{expected} samples"),
                format!("{} images / {} labels", raw.images.count, raw.labels.len()),
            ));
        }
        if let Some(&bad) = raw.labels.iter().find(|&&l| l as usize >= manifest.num_classes) {
            return Err(Error::invalid(format!("split `{role}` has label {bad} out of range")));
        }
        splits.insert(role, raw.to_batch()?);
    }
    Ok(Dataset { manifest, splits })
}

/// In-memory equivalent of `gen_data` followed by `load_dataset`.
pub fn generate_dataset(manifest: &DatasetManifest) -> Result<Dataset> {
    let splits = generate(manifest)?
        .into_iter()
        .map(|(role, raw)| Ok((role, raw.to_batch()?)))
        .collect::<Result<_>>()?;
    Ok(Dataset {
        manifest: manifest.clone(),
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetManifest {
        DatasetManifest::shapes([16, 8, 8, 8], 3)
    }

    #[test]
    fn balanced_splits() {
        let splits = generate(&small()).unwrap();
        for (role, split) in &splits {
            let mut hist = [0usize; 4];
            for &l in &split.labels {
                hist[l as usize] += 1;
            }
            let n = small().split_len(*role) / 4;
            assert_eq!(hist, [n; 4], "{role}");
        }
    }

    #[test]
    fn unbalanced_split_rejected() {
        let m = DatasetManifest::shapes([10, 8, 8, 8], 3);
        assert!(generate(&m).is_err());
    }

    #[test]
    fn split_ranges_partition() {
        let m = small();
        m.check_split_hygiene().unwrap();
        assert_eq!(m.split_range(SplitRole::Train), (0, 16));
        assert_eq!(m.split_range(SplitRole::Test), (32, 40));
    }

    #[test]
    fn files_are_deterministic_and_load_back() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        gen_data(&small(), a.path()).unwrap();
        gen_data(&small(), b.path()).unwrap();
        for role in SplitRole::ALL {
            for f in [role.images_file(), role.labels_file()] {
                assert_eq!(fs::read(a.path().join(&f)).unwrap(), fs::read(b.path().join(&f)).unwrap());
            }
        }
        let loaded = load_dataset(a.path()).unwrap();
        assert_eq!(loaded, generate_dataset(&small()).unwrap());
        let test = loaded.split(SplitRole::Test);
        assert!(test.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = small();
        assert_eq!(DatasetManifest::from_text(&m.to_text()).unwrap(), m);
    }
}
