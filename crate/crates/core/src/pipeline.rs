//! Declarative experiment pipeline: dataset, train, capture, attack and
//! evaluate stages over one output directory, plus grid sweeps.
//!
//! Layout under the output directory:
//!
//! ```text
//! config.json                      resolved config; its sha256 is the config hash
//! dataset/{train,test}.glds
//! train/model.glck, history.csv
//! capture/anchors.json, packets/*.glgp, groundtruth/*.groundtruth
//! attack/results.json, reconstructions.glrc, traces.csv, images/*.ppm, timings.json
//! report/summary.json, metrics.json, curves.csv, curves.svg, anchors/*.ppm
//! ```
//!
//! Every stage directory also holds a `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::attack::{
    baseline_gradient_matching, restoration_cosine, run_attack, AnchorCase, AttackOptions, Init,
    InversionSettings, InvertScope,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::container::{sha256_file, sha256_hex, write_atomic, Container};
use crate::data::{
    generate_synthetic, load_cifar_binary, load_idx, sample_batch, BatchSpec, Dataset,
};
use crate::fl::{
    client_local_step, deserialize_packet, open_with_model, serialize_packet, CheckpointRef,
    ClientRoundRecord, GradientPacket, StepMeta,
};
use crate::model::{Architecture, Model, ModelSpec};
use crate::optim::OptimizerConfig;
use crate::report::{
    anchor_metrics, emit_report, to_fixed_json, AnchorEvidence, ConfigReport, ReportError,
};
use crate::seed::derive_seed;
use crate::training::{train, write_history_csv, ATConfig, Norm, TrainConfig};

pub const RECONSTRUCTION_MAGIC: [u8; 4] = *b"GLRC";

pub const CONFIG_FILE: &str = "config.json";
pub const TRAIN_SET: &str = "dataset/train.glds";
pub const TEST_SET: &str = "dataset/test.glds";
pub const CHECKPOINT: &str = "train/model.glck";
pub const HISTORY: &str = "train/history.csv";
pub const ANCHORS: &str = "capture/anchors.json";
pub const RESULTS: &str = "attack/results.json";
pub const RECONSTRUCTIONS: &str = "attack/reconstructions.glrc";
pub const TRACES: &str = "attack/traces.csv";
pub const TIMINGS: &str = "attack/timings.json";
pub const REPORT_DIR: &str = "report";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("missing upstream artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("{0}")]
    Runtime(String),
}

impl PipelineError {
    /// Process exit code: 1 for validation errors and missing inputs, 2 for
    /// runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) | PipelineError::MissingArtifact(_) => 1,
            PipelineError::Runtime(_) => 2,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for PipelineError {
            fn from(e: $t) -> Self {
                PipelineError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(
    crate::data::DataError,
    crate::training::TrainError,
    crate::fl::FlError,
    crate::attack::AttackError,
    crate::checkpoint::CheckpointError,
    crate::container::ContainerError,
    crate::model::ModelError,
    ReportError,
    serde_json::Error,
    std::io::Error
);

pub type Result<T> = std::result::Result<T, PipelineError>;

fn invalid(msg: impl Into<String>) -> PipelineError {
    PipelineError::Validation(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Class-conditional oriented gratings with uniform noise.
    Synthetic {
        classes: usize,
        train_per_class: usize,
        #[serde(default)]
        test_per_class: usize,
        size: usize,
    },
    /// IDX image/label files, optionally truncated to the first `limit`.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_labels: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<usize>,
    },
    /// CIFAR-10 binary batches.
    Cifar {
        train: Vec<PathBuf>,
        #[serde(default)]
        test: Vec<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Architecture,
    #[serde(default)]
    pub head_bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub at: Option<ATConfig>,
    /// Per-epoch test (and robust) accuracy when a test split exists.
    pub evaluate: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            optimizer: t.optimizer,
            at: None,
            evaluate: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureConfig {
    pub batch_size: usize,
    pub anchors: usize,
    pub batches_per_anchor: usize,
    #[serde(default)]
    pub split: Split,
    #[serde(default = "yes")]
    pub disclose_batch_size: bool,
    #[serde(default = "yes")]
    pub distinct_labels: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub settings: InversionSettings,
    pub scope: InvertScope,
    /// Also run whole-batch gradient matching on every packet.
    pub baseline: bool,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            settings: InversionSettings::default(),
            scope: InvertScope::Anchor,
            baseline: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Perturbation radii; 0 trains without adversarial examples.
    pub epsilons: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    #[serde(default = "default_norm")]
    pub norm: Norm,
}

fn default_norm() -> Norm {
    Norm::L2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    pub capture: CaptureConfig,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            PipelineError::Validation(m) => invalid(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Bytes the config hash is taken over: the config without its output
    /// directory.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut c = self.clone();
        c.out = None;
        c.to_json().into_bytes()
    }

    pub fn hash(&self) -> String {
        sha256_hex(&self.canonical_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            return Err(invalid(format!(
                "name {:?} must be non-empty [A-Za-z0-9._-]",
                self.name
            )));
        }
        match &self.dataset {
            DatasetConfig::Synthetic {
                classes,
                train_per_class,
                size,
                ..
            } => {
                if *classes < 2 || *train_per_class == 0 || *size < 4 {
                    return Err(invalid(
                        "synthetic dataset needs classes >= 2, train_per_class >= 1, size >= 4",
                    ));
                }
                if self.capture.distinct_labels && self.capture.batch_size > *classes {
                    return Err(invalid(format!(
                        "batch size {} exceeds {} classes with distinct labels",
                        self.capture.batch_size, classes
                    )));
                }
            }
            DatasetConfig::Idx {
                test_images,
                test_labels,
                ..
            } if test_images.is_some() != test_labels.is_some() => {
                return Err(invalid("idx test images and labels must be given together"));
            }
            DatasetConfig::Cifar { train, .. } if train.is_empty() => {
                return Err(invalid("cifar dataset needs at least one training batch"));
            }
            _ => {}
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(invalid("train epochs and batch_size must be >= 1"));
        }
        if let Some(at) = &self.train.at {
            at.validate().map_err(|e| invalid(e.to_string()))?;
        }
        let c = &self.capture;
        if c.batch_size == 0 || c.anchors == 0 || c.batches_per_anchor == 0 {
            return Err(invalid(
                "capture batch_size, anchors and batches_per_anchor must be >= 1",
            ));
        }
        self.attack
            .settings
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        if let Some(s) = &self.sweep {
            if s.epsilons.is_empty() || s.batch_sizes.is_empty() {
                return Err(invalid(
                    "sweep needs at least one epsilon and one batch size",
                ));
            }
            if s.epsilons.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
                return Err(invalid("sweep epsilons must be finite and >= 0"));
            }
            for &n in &s.batch_sizes {
                let mut cell = self.clone();
                cell.sweep = None;
                cell.capture.batch_size = n;
                cell.validate()?;
            }
        }
        Ok(())
    }

    /// Grid cells of the sweep, or the config itself when there is none.
    pub fn cells(&self) -> Vec<(String, ExperimentConfig)> {
        let Some(s) = &self.sweep else {
            return vec![(self.name.clone(), self.clone())];
        };
        let mut out = Vec::new();
        for &eps in &s.epsilons {
            for &n in &s.batch_sizes {
                let name = format!("eps{eps}_n{n}");
                let mut c = self.clone();
                c.sweep = None;
                c.out = None;
                c.name = name.clone();
                c.capture.batch_size = n;
                c.train.at = (eps > 0.0).then(|| match &self.train.at {
                    Some(base) if base.norm == s.norm && base.epsilon > 0.0 => ATConfig {
                        epsilon: eps,
                        step_size: base.step_size * eps / base.epsilon,
                        ..*base
                    },
                    _ => ATConfig::new(s.norm, eps),
                });
                out.push((name, c));
            }
        }
        out
    }
}

/// Per-stage provenance written to `<stage>/manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_sha256: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    fn new(stage: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            stage: stage.into(),
            config_sha256: cfg.hash(),
            seed: derive_seed(cfg.seed, stage, 0),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    fn input(&mut self, out: &Path, rel: &str) -> Result<()> {
        self.inputs.insert(rel.into(), sha256_file(&out.join(rel))?);
        Ok(())
    }

    fn output(&mut self, out: &Path, rel: &str) -> Result<()> {
        self.outputs
            .insert(rel.into(), sha256_file(&out.join(rel))?);
        Ok(())
    }

    fn write(&self, out: &Path) -> Result<PathBuf> {
        let path = out.join(&self.stage).join("manifest.json");
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

fn require(out: &Path, rel: &str) -> Result<PathBuf> {
    let p = out.join(rel);
    if p.is_file() {
        Ok(p)
    } else {
        Err(PipelineError::MissingArtifact(p))
    }
}

/// Records the resolved config at the root of `out`.
pub fn write_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    write_atomic(&out.join(CONFIG_FILE), &cfg.canonical_bytes())?;
    Ok(())
}

/// Maps `f` over `items` on up to `jobs` threads, preserving order.
pub fn par_map<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(usize, &T) -> R + Sync,
) -> Vec<R> {
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(item) = items.get(i) else { break };
        let r = f(i, item);
        *slots[i].lock().expect("slot lock") = Some(r);
    };
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("slot lock")
                .expect("every slot is filled")
        })
        .collect()
}

fn load_sources(cfg: &ExperimentConfig) -> Result<(Dataset, Option<Dataset>)> {
    let missing = |p: &Path| -> Result<()> {
        if p.is_file() {
            Ok(())
        } else {
            Err(PipelineError::MissingArtifact(p.to_path_buf()))
        }
    };
    Ok(match &cfg.dataset {
        DatasetConfig::Synthetic {
            classes,
            train_per_class,
            test_per_class,
            size,
        } => {
            let train = generate_synthetic(
                *classes,
                *train_per_class,
                *size,
                derive_seed(cfg.seed, "dataset", 0),
            )?;
            let test = (*test_per_class > 0)
                .then(|| {
                    generate_synthetic(
                        *classes,
                        *test_per_class,
                        *size,
                        derive_seed(cfg.seed, "dataset", 1),
                    )
                })
                .transpose()?;
            (train, test)
        }
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            limit,
        } => {
            missing(train_images)?;
            missing(train_labels)?;
            let truncate = |mut d: Dataset| {
                if let Some(n) = *limit {
                    let n = n.min(d.len());
                    d.images.truncate(n * d.pixels_per_image());
                    d.labels.truncate(n);
                }
                d
            };
            let train = truncate(load_idx(train_images, train_labels)?);
            let test = match (test_images, test_labels) {
                (Some(i), Some(l)) => {
                    missing(i)?;
                    missing(l)?;
                    Some(truncate(load_idx(i, l)?))
                }
                _ => None,
            };
            (train, test)
        }
        DatasetConfig::Cifar { train, test } => {
            for p in train.iter().chain(test) {
                missing(p)?;
            }
            let tr = load_cifar_binary(train)?;
            let te = (!test.is_empty())
                .then(|| load_cifar_binary(test))
                .transpose()?;
            (tr, te)
        }
    })
}

pub fn stage_dataset(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    let (train, test) = load_sources(cfg)?;
    if cfg.capture.distinct_labels && cfg.capture.batch_size > train.num_classes {
        return Err(invalid(format!(
            "batch size {} exceeds {} classes with distinct labels",
            cfg.capture.batch_size, train.num_classes
        )));
    }
    write_config(cfg, out)?;
    let mut m = Manifest::new("dataset", cfg);
    train.save(&out.join(TRAIN_SET))?;
    m.output(out, TRAIN_SET)?;
    let test_path = out.join(TEST_SET);
    match test {
        Some(t) => {
            t.save(&test_path)?;
            m.output(out, TEST_SET)?;
        }
        None if test_path.exists() => fs::remove_file(&test_path)?,
        None => {}
    }
    m.write(out)?;
    log::info!(
        "dataset: {} train images, {} classes",
        train.len(),
        train.num_classes
    );
    Ok(m)
}

pub fn stage_train(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    let train_path = require(out, TRAIN_SET)?;
    let train_ds = Dataset::load(&train_path)?;
    let test_ds = if cfg.train.evaluate && out.join(TEST_SET).is_file() {
        Some(Dataset::load(&out.join(TEST_SET))?)
    } else {
        None
    };
    write_config(cfg, out)?;
    let mut m = Manifest::new("train", cfg);
    m.input(out, TRAIN_SET)?;
    if test_ds.is_some() {
        m.input(out, TEST_SET)?;
    }
    let spec = ModelSpec::new(cfg.model.arch, train_ds.shape, train_ds.num_classes)
        .map_err(|e| invalid(e.to_string()))?
        .with_head_bias(cfg.model.head_bias);
    let mut model = Model::<f32>::build(spec, derive_seed(cfg.seed, "init", 0))?;
    let tc = TrainConfig {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        optimizer: cfg.train.optimizer,
        at: cfg.train.at,
        seed: m.seed,
    };
    let history = train(&mut model, &train_ds, test_ds.as_ref(), &tc)?;
    log::info!("train: {} epochs", history.len());
    save_checkpoint(&model, &out.join(CHECKPOINT))?;
    write_history_csv(&history, &out.join(HISTORY))?;
    m.output(out, CHECKPOINT)?;
    m.output(out, HISTORY)?;
    m.write(out)?;
    Ok(m)
}

/// Attacker-visible index of the captured packets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureIndex {
    pub split: Split,
    pub batch_size: usize,
    pub anchors: Vec<CapturedAnchor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapturedAnchor {
    /// Index into the captured split.
    pub anchor: usize,
    pub label: usize,
    pub packets: Vec<String>,
}

pub fn packet_path(slot: usize, batch: usize) -> String {
    format!("capture/packets/a{slot:03}_b{batch}.glgp")
}

pub fn groundtruth_path(slot: usize, batch: usize) -> String {
    format!("capture/groundtruth/a{slot:03}_b{batch}.groundtruth")
}

fn split_path(split: Split) -> &'static str {
    match split {
        Split::Train => TRAIN_SET,
        Split::Test => TEST_SET,
    }
}

fn batch_key(slot: usize, batch: usize) -> u64 {
    ((slot as u64) << 20) | batch as u64
}

pub fn stage_capture(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<Manifest> {
    let split_rel = split_path(cfg.capture.split);
    let ds_path = require(out, split_rel)?;
    let ck_path = require(out, CHECKPOINT)?;
    let ds = Dataset::load(&ds_path)?;
    let model = load_checkpoint(&ck_path)?;
    write_config(cfg, out)?;
    let mut m = Manifest::new("capture", cfg);
    m.input(out, split_rel)?;
    m.input(out, CHECKPOINT)?;
    let cap = &cfg.capture;
    if cap.anchors > ds.len() {
        return Err(invalid(format!(
            "{} anchors requested from {} images",
            cap.anchors,
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "anchors", 0));
    let mut anchors = rand::seq::index::sample(&mut rng, ds.len(), cap.anchors).into_vec();
    anchors.sort_unstable();
    let ckref = CheckpointRef::from_model(&model, CHECKPOINT);
    let work: Vec<(usize, usize)> = (0..anchors.len())
        .flat_map(|a| (0..cap.batches_per_anchor).map(move |b| (a, b)))
        .collect();
    let done = par_map(&work, jobs, |_, &(slot, b)| -> Result<()> {
        let key = batch_key(slot, b);
        let spec = BatchSpec {
            size: cap.batch_size,
            anchor: Some(anchors[slot]),
            distinct_labels: cap.distinct_labels,
            seed: derive_seed(m.seed, "batch", key),
        };
        let batch = sample_batch(&ds, &spec).map_err(|e| match e {
            crate::data::DataError::BatchTooLarge { .. }
            | crate::data::DataError::InvalidParameter(_) => invalid(e.to_string()),
            other => other.into(),
        })?;
        let mut pgd_rng = ChaCha8Rng::seed_from_u64(derive_seed(m.seed, "pgd", key));
        let meta = StepMeta {
            round: b as u64,
            client: slot as u64,
            disclose_batch_size: cap.disclose_batch_size,
        };
        let (packet, record) = client_local_step(
            &model,
            &ckref,
            &batch.images,
            &batch.labels,
            &batch.indices,
            cfg.train.at.as_ref(),
            meta,
            &mut pgd_rng,
        )?;
        serialize_packet(&packet, &out.join(packet_path(slot, b)))?;
        record.save(&out.join(groundtruth_path(slot, b)))?;
        Ok(())
    });
    done.into_iter().collect::<Result<Vec<()>>>()?;
    let index = CaptureIndex {
        split: cap.split,
        batch_size: cap.batch_size,
        anchors: anchors
            .iter()
            .enumerate()
            .map(|(slot, &a)| CapturedAnchor {
                anchor: a,
                label: ds.labels[a],
                packets: (0..cap.batches_per_anchor)
                    .map(|b| packet_path(slot, b))
                    .collect(),
            })
            .collect(),
    };
    let mut bytes = serde_json::to_vec_pretty(&index)?;
    bytes.push(b'\n');
    write_atomic(&out.join(ANCHORS), &bytes)?;
    m.output(out, ANCHORS)?;
    for &(slot, b) in &work {
        m.output(out, &packet_path(slot, b))?;
        m.output(out, &groundtruth_path(slot, b))?;
    }
    m.write(out)?;
    log::info!("capture: {} packets", work.len());
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionRecord {
    pub label: usize,
    pub objective: f64,
    pub best_restart: usize,
    pub restart_objectives: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub labels: Vec<usize>,
    pub objective: f64,
    pub best_restart: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketAttackRecord {
    pub packet: String,
    pub batch_size: usize,
    pub recovered_labels: Vec<usize>,
    pub negative_columns: usize,
    pub warnings: Vec<String>,
    pub inversions: Vec<InversionRecord>,
    pub baseline: Option<BaselineRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorAttackRecord {
    pub anchor: usize,
    pub label: usize,
    /// Batch with the lowest inversion objective for the anchor's label.
    pub best_batch: Option<usize>,
    pub batches: Vec<PacketAttackRecord>,
}

fn inversion_key(slot: usize, b: usize, label: usize) -> String {
    format!("a{slot:03}_b{b}_y{label}")
}

fn baseline_key(slot: usize, b: usize) -> String {
    format!("a{slot:03}_b{b}_baseline")
}

fn load_index(out: &Path) -> Result<CaptureIndex> {
    let p = require(out, ANCHORS)?;
    Ok(serde_json::from_slice(&fs::read(p)?)?)
}

pub fn stage_attack(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<Manifest> {
    let index = load_index(out)?;
    let mut packets: Vec<Vec<GradientPacket>> = Vec::new();
    for a in &index.anchors {
        let mut v = Vec::new();
        for rel in &a.packets {
            v.push(deserialize_packet(&require(out, rel)?)?);
        }
        packets.push(v);
    }
    let first = packets
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| invalid("capture index lists no packets"))?;
    require(out, &first.checkpoint.path)?;
    let model = open_with_model(first, Some(out))?;
    write_config(cfg, out)?;
    let mut m = Manifest::new("attack", cfg);
    m.input(out, ANCHORS)?;
    m.input(out, CHECKPOINT)?;
    for a in &index.anchors {
        for rel in &a.packets {
            m.input(out, rel)?;
        }
    }
    let cases: Vec<AnchorCase<'_>> = index
        .anchors
        .iter()
        .zip(&packets)
        .map(|(a, p)| AnchorCase {
            anchor: a.anchor,
            label: a.label,
            packets: p,
            records: None,
        })
        .collect();
    let opts = AttackOptions {
        batch_size: None,
        scope: cfg.attack.scope.clone(),
        settings: cfg.attack.settings,
        seed: m.seed,
    };
    let outcomes = run_attack(&model, &cases, &opts, jobs)?;
    let baseline_work: Vec<(usize, usize)> = if cfg.attack.baseline {
        outcomes
            .iter()
            .enumerate()
            .flat_map(|(slot, o)| (0..o.results.len()).map(move |b| (slot, b)))
            .collect()
    } else {
        Vec::new()
    };
    let baselines = par_map(&baseline_work, jobs, |_, &(slot, b)| {
        let labels = &outcomes[slot].results[b].recovery.labels;
        let seed = derive_seed(m.seed, "baseline", batch_key(slot, b));
        baseline_gradient_matching(
            &model,
            &packets[slot][b],
            labels,
            &cfg.attack.settings,
            seed,
            &Init::Uniform,
        )
    });
    let mut baselines: BTreeMap<(usize, usize), _> =
        baseline_work.into_iter().zip(baselines).collect();

    let [c, h, w] = model.spec().input_shape;
    let mut container = Container::new(RECONSTRUCTION_MAGIC, Vec::new());
    let mut traces = String::from("anchor,batch,method,label,restart,step,objective\n");
    let mut timings = BTreeMap::new();
    let mut records = Vec::new();
    let images_dir = out.join("attack/images");
    if images_dir.exists() {
        fs::remove_dir_all(&images_dir)?;
    }
    let mut image_files = Vec::new();
    for (slot, (o, a)) in outcomes.iter().zip(&index.anchors).enumerate() {
        let mut batches = Vec::new();
        for (b, r) in o.results.iter().enumerate() {
            timings.insert(format!("a{slot:03}_b{b}"), r.wall_clock.as_secs_f64());
            let mut inversions = Vec::new();
            for rec in &r.reconstructions {
                let inv = &rec.inversion;
                let key = inversion_key(slot, b, rec.label);
                container.push(
                    key.clone(),
                    inv.image.shape().to_vec(),
                    inv.image.data().to_vec(),
                );
                let rel = format!("attack/images/{key}.ppm");
                crate::report::write_ppm(&out.join(&rel), inv.image.data(), [c, h, w])?;
                image_files.push(rel);
                for ro in &inv.restarts {
                    for (step, v) in &ro.trace {
                        traces.push_str(&format!(
                            "{},{b},two-step,{},{},{step},{v:e}\n",
                            o.anchor, rec.label, ro.restart
                        ));
                    }
                }
                inversions.push(InversionRecord {
                    label: rec.label,
                    objective: inv.objective,
                    best_restart: inv.best_restart,
                    restart_objectives: inv.restarts.iter().map(|x| x.final_objective).collect(),
                });
            }
            let baseline = match baselines.remove(&(slot, b)) {
                Some(res) => {
                    let res = res?;
                    container.push(
                        baseline_key(slot, b),
                        res.images.shape().to_vec(),
                        res.images.data().to_vec(),
                    );
                    for ro in &res.restarts {
                        for (step, v) in &ro.trace {
                            traces.push_str(&format!(
                                "{},{b},baseline,,{},{step},{v:e}\n",
                                o.anchor, ro.restart
                            ));
                        }
                    }
                    Some(BaselineRecord {
                        labels: res.labels.clone(),
                        objective: res.objective,
                        best_restart: res.best_restart,
                    })
                }
                None => None,
            };
            batches.push(PacketAttackRecord {
                packet: a.packets[b].clone(),
                batch_size: r.batch_size,
                recovered_labels: r.recovery.labels.clone(),
                negative_columns: r.recovery.negative_columns,
                warnings: r.warnings.clone(),
                inversions,
                baseline,
            });
        }
        records.push(AnchorAttackRecord {
            anchor: o.anchor,
            label: o.label,
            best_batch: o.best_attacker,
            batches,
        });
    }
    container.header = serde_json::to_vec(&records)?;
    container.write(&out.join(RECONSTRUCTIONS))?;
    let results = to_fixed_json(&serde_json::to_value(&records)?);
    write_atomic(&out.join(RESULTS), results.as_bytes())?;
    write_atomic(&out.join(TRACES), traces.as_bytes())?;
    let mut tbytes = serde_json::to_vec_pretty(&json!({ "seconds_per_packet": timings }))?;
    tbytes.push(b'\n');
    write_atomic(&out.join(TIMINGS), &tbytes)?;
    for rel in [RESULTS, RECONSTRUCTIONS, TRACES] {
        m.output(out, rel)?;
    }
    for rel in &image_files {
        m.output(out, rel)?;
    }
    m.write(out)?;
    log::info!("attack: {} anchors", records.len());
    Ok(m)
}

/// Reads the attack records with full-precision objectives.
pub fn load_attack_records(out: &Path) -> Result<(Vec<AnchorAttackRecord>, Container)> {
    let c = Container::read(&require(out, RECONSTRUCTIONS)?, RECONSTRUCTION_MAGIC)?;
    let records = serde_json::from_slice(&c.header)?;
    Ok((records, c))
}

/// Joins attack outputs with ground truth into a per-anchor report.
pub fn collect_report(cfg: &ExperimentConfig, out: &Path) -> Result<ConfigReport> {
    let index = load_index(out)?;
    let ds = Dataset::load(&require(out, split_path(index.split))?)?;
    let (records, container) = load_attack_records(out)?;
    let shape = ds.shape;
    let per = ds.pixels_per_image();
    let mut anchors = Vec::new();
    let mut images = Vec::new();
    let mut warnings = 0;
    for (slot, rec) in records.iter().enumerate() {
        let mut ev = AnchorEvidence {
            anchor: rec.anchor,
            label: rec.label,
            batch_cosines: Vec::new(),
            labels_exact: Vec::new(),
            inversions: Vec::new(),
            baseline: Vec::new(),
            targets: Vec::new(),
            clean: ds.image(rec.anchor).to_vec(),
            shape,
        };
        for (b, pr) in rec.batches.iter().enumerate() {
            warnings += pr.warnings.len();
            let packet = deserialize_packet(&require(out, &pr.packet)?)?;
            let truth = ClientRoundRecord::load(&require(out, &groundtruth_path(slot, b))?)?;
            let pos = truth
                .indices
                .iter()
                .position(|&i| i == rec.anchor)
                .ok_or_else(|| {
                    PipelineError::Runtime(format!("anchor {} missing from its batch", rec.anchor))
                })?;
            let row = |t: &crate::tensor::Tensor<f32>, i: usize| {
                t.data()[i * per..(i + 1) * per].to_vec()
            };
            ev.targets.push(row(truth.used_images(), pos));
            ev.batch_cosines
                .push(restoration_cosine(&packet, &truth, rec.label).unwrap_or(0.0));
            let mut want = truth.labels.clone();
            want.sort_unstable();
            let mut got = pr.recovered_labels.clone();
            got.sort_unstable();
            ev.labels_exact.push(want == got);
            ev.inversions.push(
                pr.inversions
                    .iter()
                    .find(|i| i.label == rec.label)
                    .and_then(|i| {
                        Some((
                            i.objective,
                            container
                                .array(&inversion_key(slot, b, rec.label))?
                                .data
                                .clone(),
                        ))
                    }),
            );
            ev.baseline.push(pr.baseline.as_ref().and_then(|bl| {
                let p = bl.labels.iter().position(|&y| y == rec.label)?;
                let arr = container.array(&baseline_key(slot, b))?;
                Some(arr.data[p * per..(p + 1) * per].to_vec())
            }));
        }
        let (metrics, imgs) = anchor_metrics(&ev)?;
        anchors.push(metrics);
        images.push(imgs);
    }
    Ok(ConfigReport {
        name: cfg.name.clone(),
        anchors,
        images,
        warnings,
    })
}

fn report_manifest(
    cfg: &ExperimentConfig,
    out: &Path,
    files: &crate::report::ReportFiles,
) -> Result<Manifest> {
    let mut m = Manifest::new(REPORT_DIR, cfg);
    let rel = |p: &Path| {
        p.strip_prefix(out)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    };
    for p in [
        &files.summary,
        &files.metrics,
        &files.curves_csv,
        &files.curves_svg,
    ]
    .into_iter()
    .chain(&files.images)
    {
        m.output(out, &rel(p))?;
    }
    Ok(m)
}

pub fn stage_evaluate(cfg: &ExperimentConfig, out: &Path) -> Result<(Manifest, ConfigReport)> {
    let report = collect_report(cfg, out)?;
    write_config(cfg, out)?;
    let files = emit_report(std::slice::from_ref(&report), &out.join(REPORT_DIR))?;
    let mut m = report_manifest(cfg, out, &files)?;
    m.stage = "report".into();
    m.input(out, ANCHORS)?;
    m.input(out, RESULTS)?;
    m.input(out, RECONSTRUCTIONS)?;
    m.write(out)?;
    Ok((m, report))
}

/// All five stages in order.
pub fn run_all(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<ConfigReport> {
    stage_dataset(cfg, out)?;
    stage_train(cfg, out)?;
    stage_capture(cfg, out, jobs)?;
    stage_attack(cfg, out, jobs)?;
    Ok(stage_evaluate(cfg, out)?.1)
}

/// Runs every grid cell under `out/cells/<name>` and a combined report
/// under `out/report`. Cells run in parallel, each single-threaded.
pub fn run_sweep(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let cells = cfg.cells();
    let inner = if cells.len() >= jobs {
        1
    } else {
        jobs / cells.len()
    };
    let results = par_map(&cells, jobs.min(cells.len()), |_, (name, c)| {
        let dir = out.join("cells").join(name);
        run_all(c, &dir, inner).map(|r| (dir, r))
    });
    let mut dirs = Vec::new();
    let mut reports = Vec::new();
    for r in results {
        let (d, rep) = r?;
        dirs.push(d);
        reports.push(rep);
    }
    write_config(cfg, out)?;
    let files = emit_report(&reports, &out.join(REPORT_DIR))?;
    let mut m = report_manifest(cfg, out, &files)?;
    for d in &dirs {
        let rel = d.strip_prefix(out).unwrap_or(d).join("report/summary.json");
        m.input(out, &rel.to_string_lossy())?;
    }
    m.write(out)?;
    Ok(dirs)
}
