//! End-to-end experiment: data, baseline, per-modality head, ranking, unit
//! training and evaluation, with every output written under one directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{encode_checkpoint, train_baseline, Checkpoint, FeatureTap};
use crate::config::{ModalitySpec, RunConfig};
use crate::data::{generate, idx, Dataset, SplitRole, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::genunits::{
    assemble_gen_net, build_generative_unit, default_width, encode_gen_net, train_units, GenerativeNetwork,
};
use crate::nn::{NetworkSpec, Parameters};
use crate::prng::SplitMix64;
use crate::susceptibility::{rank_clusters, threshold_mask, SusceptibilityReport};
use crate::transfer::{
    encode_head, eval_pipeline, fit_linear_head, task_network, BaselineExtractor, EvalRow, EvalTable,
    FeatureExtractor, GenExtractor, LinearHead,
};

pub const BASELINE_METHOD: &str = "baseline";
pub const GENERATIVE_METHOD: &str = "generative_sensing";

pub const DATA_DIR: &str = "data";
pub const BASELINE_FILE: &str = "baseline.gsck";
pub const HEAD_FILE: &str = "head.gslh";
pub const REPORT_FILE: &str = "susceptibility.txt";
pub const GEN_FILE: &str = "generative.gsck";
pub const ROWS_FILE: &str = "rows.csv";
pub const TABLE_FILE: &str = "table.csv";
pub const STATS_FILE: &str = "stats.txt";
pub const RECORD_FILE: &str = "run.json";
pub const FAILURE_MARKER: &str = "run.partial";

/// Worker count for ranking: `GENSENSE_THREADS` if set, else the number of cores.
pub fn ranking_threads() -> usize {
    std::env::var("GENSENSE_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f`, tagging any error with the stage name.
pub fn stage<T>(name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    info!("stage {name}");
    f().map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: name,
            source: Box::new(e),
        },
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes files under a root directory, each first as `<name>.partial` and
/// renamed once complete, and remembers their digests.
pub struct ArtifactWriter {
    root: PathBuf,
    digests: BTreeMap<String, String>,
}

impl ArtifactWriter {
    pub fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            digests: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let partial = self.root.join(format!("{rel}.partial"));
        fs::write(&partial, bytes)?;
        fs::rename(&partial, &path)?;
        self.digests.insert(rel.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    pub fn digests(&self) -> &BTreeMap<String, String> {
        &self.digests
    }
}

pub fn dataset_id(dataset: &Dataset) -> String {
    format!("{}:seed{}", dataset.manifest.name, dataset.manifest.seed)
}

/// Renders the configured dataset and writes it as IDX files plus manifest.
pub fn gen_data_stage(cfg: &RunConfig, out: &mut ArtifactWriter, dir: &str) -> Result<Dataset> {
    let manifest = cfg.manifest();
    let raw = generate(&manifest)?;
    let mut splits = BTreeMap::new();
    for (role, split) in raw {
        out.write(&format!("{dir}/{}", role.images_file()), &idx::encode_images(&split.images))?;
        out.write(&format!("{dir}/{}", role.labels_file()), &idx::encode_labels(&split.labels))?;
        splits.insert(role, split.to_batch()?);
    }
    out.write(&format!("{dir}/{MANIFEST_FILE}"), manifest.to_text().as_bytes())?;
    Ok(Dataset { manifest, splits })
}

pub fn baseline_stage(cfg: &RunConfig, dataset: &Dataset) -> Result<Checkpoint> {
    let spec = NetworkSpec::reference(dataset.manifest.image_shape, dataset.manifest.num_classes)?;
    train_baseline(
        &spec,
        dataset.split(SplitRole::Train),
        &cfg.baseline_hyper(),
        &dataset_id(dataset),
    )
}

/// Linear head on baseline features of clean head-train images in `modality`.
pub fn head_stage(cfg: &RunConfig, ckpt: &Checkpoint, dataset: &Dataset, modality: &ModalitySpec) -> Result<LinearHead> {
    let tap = FeatureTap::default_extractor(&ckpt.spec)?;
    let split = dataset.split(SplitRole::HeadTrain);
    let inputs = crate::degrade::apply_chain(&modality.prefix(), &split.inputs)?;
    let features = BaselineExtractor { ckpt, tap }.features(&inputs)?;
    fit_linear_head(&features, &split.labels, dataset.manifest.num_classes, cfg.head)
}

/// The frozen classifier for `modality`: baseline extractor plus its head.
pub fn task_stage(ckpt: &Checkpoint, head: &LinearHead) -> Result<Checkpoint> {
    task_network(ckpt, &FeatureTap::default_extractor(&ckpt.spec)?, head)
}

/// Susceptibility of the ranking layer on the rank-eval split.
pub fn rank_stage(
    cfg: &RunConfig,
    task: &Checkpoint,
    dataset: &Dataset,
    modality: &ModalitySpec,
) -> Result<SusceptibilityReport> {
    let tap = FeatureTap::default_ranking(&task.spec)?;
    rank_clusters(
        task,
        tap.layer_index,
        dataset.split(SplitRole::RankEval),
        SplitRole::RankEval.stem(),
        &modality.chain(cfg.rank_sigma()),
        cfg.cluster_size,
        ranking_threads(),
    )
}

/// Builds a unit on the masked channels and trains it on every blur level of
/// `modality`. An empty mask yields a network without units.
pub fn units_stage(
    cfg: &RunConfig,
    modality_index: usize,
    task: Checkpoint,
    report: &SusceptibilityReport,
    dataset: &Dataset,
    modality: &ModalitySpec,
) -> Result<(GenerativeNetwork, Option<f64>)> {
    let mask = threshold_mask(report, cfg.mask)?;
    if mask.count() == 0 {
        warn!("mask {} selects no channels for `{}`; no units built", cfg.mask, modality.tag);
        return Ok((GenerativeNetwork::new(task, vec![])?, None));
    }
    let width = cfg.unit_width.unwrap_or_else(|| default_width(mask.count()));
    let mut rng = SplitMix64::new(cfg.unit_seeds(modality_index).0);
    let unit = build_generative_unit(&task, &mask, width, &mut rng)?;
    let gen_net = assemble_gen_net(task, &[mask], vec![unit])?;
    let levels: Vec<_> = cfg.sigma_levels.iter().map(|&s| modality.chain(s)).collect();
    let (trained, objective) = train_units(
        gen_net,
        dataset.split(SplitRole::Train),
        &levels,
        cfg.reg,
        &cfg.unit_hyper(modality_index),
    )?;
    Ok((trained, Some(objective)))
}

/// Baseline and generative rows for `modality`, both read out by the same head.
pub fn eval_stage(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    head: &LinearHead,
    gen_net: &GenerativeNetwork,
    dataset: &Dataset,
    modality: &ModalitySpec,
) -> Result<[EvalRow; 2]> {
    let levels: Vec<_> = cfg.sigma_levels.iter().map(|&s| modality.chain(s)).collect();
    let test = dataset.split(SplitRole::Test);
    let base = BaselineExtractor {
        ckpt,
        tap: FeatureTap::default_extractor(&ckpt.spec)?,
    };
    let gen = GenExtractor {
        net: gen_net,
        tap: FeatureTap::default_extractor(&ckpt.spec)?,
    };
    Ok([
        eval_pipeline(&base, head, test, &levels, BASELINE_METHOD, &modality.tag)?,
        eval_pipeline(&gen, head, test, &levels, GENERATIVE_METHOD, &modality.tag)?,
    ])
}

/// Machine-readable summary of a run. Contains nothing time-dependent, so
/// identical configs give identical records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub config: String,
    pub seeds: BTreeMap<String, u64>,
    pub baseline_params: usize,
    pub baseline_params_sha256: String,
    pub baseline_final_loss: f64,
    pub unit_params: BTreeMap<String, usize>,
    pub unit_final_objective: BTreeMap<String, Option<f64>>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub table: EvalTable,
    pub record: RunRecord,
}

/// Runs every stage into `out`. On failure a `run.partial` marker names the
/// failing stage.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    let marker = out.join(FAILURE_MARKER);
    let result = run_stages(cfg, out);
    match &result {
        Ok(_) => {
            if marker.exists() {
                fs::remove_file(&marker)?;
            }
        }
        Err(e) => {
            let stage = match e {
                Error::Stage { stage, .. } => stage,
                _ => "setup",
            };
            let _ = fs::create_dir_all(out);
            let _ = fs::write(&marker, format!("stage = {stage}\nerror = {e}\n"));
        }
    }
    result
}

fn run_stages(cfg: &RunConfig, out: &Path) -> Result<RunOutput> {
    let mut w = ArtifactWriter::new(out)?;
    let dataset = stage("gen-data", || gen_data_stage(cfg, &mut w, DATA_DIR))?;
    let ckpt = stage("train-baseline", || {
        let ckpt = baseline_stage(cfg, &dataset)?;
        w.write(BASELINE_FILE, &encode_checkpoint(&ckpt))?;
        Ok(ckpt)
    })?;
    let baseline_digest = ckpt.params.digest();
    let mut seeds = BTreeMap::from([
        ("data".to_string(), cfg.data_seed()),
        ("baseline".to_string(), cfg.baseline_seed()),
    ]);
    let mut unit_params = BTreeMap::new();
    let mut unit_objective = BTreeMap::new();
    let mut rows = Vec::new();
    for (i, modality) in cfg.modalities.iter().enumerate() {
        let tag = &modality.tag;
        let (init_seed, shuffle_seed) = cfg.unit_seeds(i);
        seeds.insert(format!("units.{tag}.init"), init_seed);
        seeds.insert(format!("units.{tag}.shuffle"), shuffle_seed);
        let head = stage("fit-head", || {
            let head = head_stage(cfg, &ckpt, &dataset, modality)?;
            w.write(&format!("{tag}/{HEAD_FILE}"), &encode_head(&head))?;
            Ok(head)
        })?;
        let task = stage("fit-head", || task_stage(&ckpt, &head))?;
        let report = stage("rank", || {
            let report = rank_stage(cfg, &task, &dataset, modality)?;
            w.write(&format!("{tag}/{REPORT_FILE}"), report.to_text().as_bytes())?;
            Ok(report)
        })?;
        let gen_net = stage("train-units", || {
            let (gen_net, objective) = units_stage(cfg, i, task, &report, &dataset, modality)?;
            w.write(&format!("{tag}/{GEN_FILE}"), &encode_gen_net(&gen_net))?;
            unit_params.insert(tag.clone(), gen_net.units.param_count());
            unit_objective.insert(tag.clone(), objective);
            Ok(gen_net)
        })?;
        if ckpt.params.digest() != baseline_digest {
            return Err(Error::invalid("baseline parameters changed during unit training"));
        }
        let pair = stage("eval", || {
            let pair = eval_stage(cfg, &ckpt, &head, &gen_net, &dataset, modality)?;
            let table = EvalTable::new(cfg.sigma_levels.clone(), pair.to_vec())?;
            w.write(&format!("{tag}/{ROWS_FILE}"), table.to_csv().as_bytes())?;
            Ok(pair)
        })?;
        info!(
            "{tag}: baseline {:?}, generative {:?}",
            pair[0].accuracies, pair[1].accuracies
        );
        rows.extend(pair);
    }
    let table = stage("report", || {
        let table = EvalTable::new(cfg.sigma_levels.clone(), rows)?;
        let csv = table.to_csv();
        w.write(TABLE_FILE, csv.as_bytes())?;
        // statistics from the table as written, so `report` reproduces them
        let written = EvalTable::from_csv(&csv)?;
        w.write(STATS_FILE, written.stats_text(BASELINE_METHOD, GENERATIVE_METHOD)?.as_bytes())?;
        Ok(table)
    })?;
    let record = RunRecord {
        config_hash: cfg.hash(),
        config: cfg.to_text(),
        seeds,
        baseline_params: ckpt.params.param_count(),
        baseline_params_sha256: baseline_digest,
        baseline_final_loss: ckpt.meta.final_train_loss,
        unit_params,
        unit_final_objective: unit_objective,
        outputs: w.digests().clone(),
    };
    stage("report", || {
        let json = serde_json::to_string_pretty(&record).map_err(|e| Error::invalid(e.to_string()))?;
        w.write(RECORD_FILE, format!("{json}\n").as_bytes())?;
        Ok(())
    })?;
    Ok(RunOutput { table, record })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig::from_text(
            "train_size = 16\nrank_size = 8\nhead_size = 8\ntest_size = 8\n\
             sigma_levels = 0,2\ntop_k = 2\nunit_width = 2\nbaseline_epochs = 1\n\
             unit_epochs = 1\nhead_epochs = 5\nbatch_size = 8\n",
        )
        .unwrap()
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let err = stage("rank", || -> Result<()> { Err(Error::invalid("boom")) }).unwrap_err();
        assert!(err.to_string().contains("rank"), "{err}");
        let nested = stage("eval", || -> Result<()> { Err(err) }).unwrap_err();
        assert!(matches!(nested, Error::Stage { stage: "rank", .. }));
    }

    #[test]
    fn tiny_run_writes_everything() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_pipeline(&tiny(), dir.path()).unwrap();
        assert_eq!(out.table.rows.len(), 4);
        for rel in [TABLE_FILE, STATS_FILE, RECORD_FILE, BASELINE_FILE, "ir/generative.gsck", "visible/rows.csv"] {
            assert!(dir.path().join(rel).exists(), "{rel}");
        }
        assert!(!dir.path().join(FAILURE_MARKER).exists());
        let record: RunRecord =
            serde_json::from_str(&fs::read_to_string(dir.path().join(RECORD_FILE)).unwrap()).unwrap();
        assert_eq!(record, out.record);
        let table = fs::read(dir.path().join(TABLE_FILE)).unwrap();
        assert_eq!(record.outputs[TABLE_FILE], sha256_hex(&table));
    }

    #[test]
    fn invalid_config_fails_before_compute() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.sigma_levels.clear();
        assert!(run_pipeline(&cfg, dir.path()).is_err());
        assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
    }
}
