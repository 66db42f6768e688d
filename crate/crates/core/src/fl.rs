//! Single-round federated exchange: a client computes the batch-averaged
//! gradient on its private batch and ships it; the server (or attacker) sees
//! only the model and that packet.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{load_checkpoint, CheckpointError};
use crate::container::{sha256_file, sha256_hex, Container, ContainerError, NamedArray};
use crate::model::{Model, ModelError};
use crate::tensor::{Graph, Tensor, TensorError};
use crate::training::{pgd_attack, ATConfig, TrainError};

pub const PACKET_MAGIC: [u8; 4] = *b"GLGP";
pub const GROUNDTRUTH_MAGIC: [u8; 4] = *b"GLGT";
pub const GROUNDTRUTH_SUFFIX: &str = "groundtruth";

#[derive(Debug, Error)]
pub enum FlError {
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("checkpoint {path} has sha256 {found}, packet references {expected}")]
    HashMismatch {
        path: String,
        expected: String,
        found: String,
    },
    #[error("packets reference different checkpoints ({0} and {1})")]
    MixedCheckpoints(String, String),
    #[error("packet gradients do not mirror the model parameters: {0}")]
    Layout(String),
    #[error("ground-truth archives must use the .{GROUNDTRUTH_SUFFIX} extension: {0}")]
    GroundTruthPath(String),
    #[error("nothing to aggregate")]
    Empty,
}

/// Identifies the model snapshot a packet was computed against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub sha256: String,
    pub path: String,
}

impl CheckpointRef {
    pub fn from_file(path: &Path) -> Result<Self, FlError> {
        Ok(Self {
            sha256: sha256_file(path)?,
            path: path.display().to_string(),
        })
    }

    pub fn from_model(model: &Model<f32>, path: &str) -> Self {
        Self {
            sha256: sha256_hex(&crate::checkpoint::encode_checkpoint(model)),
            path: path.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PacketHeader {
    checkpoint: CheckpointRef,
    batch_size: usize,
    batch_size_disclosed: bool,
    round: u64,
    client: u64,
    at: Option<ATConfig>,
}

/// The attacker-visible artifact: one batch-averaged gradient per model
/// parameter, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPacket {
    pub checkpoint: CheckpointRef,
    pub batch_size: usize,
    /// Whether `batch_size` is handed to the attacker.
    pub batch_size_disclosed: bool,
    pub round: u64,
    pub client: u64,
    /// Training mode of the step; `Some` for adversarial training.
    pub at: Option<ATConfig>,
    pub grads: Vec<NamedArray>,
}

impl GradientPacket {
    pub fn grad(&self, name: &str) -> Option<&NamedArray> {
        self.grads.iter().find(|a| a.name == name)
    }

    /// The `[D, K]` head weight gradient.
    pub fn head_gradient(&self) -> Option<Tensor<f32>> {
        let a = self.grad(crate::model::HEAD_WEIGHT)?;
        Tensor::new(a.shape.clone(), a.data.clone()).ok()
    }

    /// Batch size as the attacker sees it.
    pub fn disclosed_batch_size(&self) -> Option<usize> {
        self.batch_size_disclosed.then_some(self.batch_size)
    }

    /// Checks names and shapes against the model's parameters.
    pub fn check_layout(&self, model: &Model<f32>) -> Result<(), FlError> {
        if self.grads.len() != model.params().len() {
            return Err(FlError::Layout(format!(
                "{} gradients for {} parameters",
                self.grads.len(),
                model.params().len()
            )));
        }
        for (g, (name, p)) in self.grads.iter().zip(model.named_params()) {
            if g.name != name || g.shape != p.shape() {
                return Err(FlError::Layout(format!(
                    "`{}` {:?} where `{name}` {:?} was expected",
                    g.name,
                    g.shape,
                    p.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = PacketHeader {
            checkpoint: self.checkpoint.clone(),
            batch_size: self.batch_size,
            batch_size_disclosed: self.batch_size_disclosed,
            round: self.round,
            client: self.client,
            at: self.at,
        };
        let mut c = Container::new(
            PACKET_MAGIC,
            serde_json::to_vec(&header).expect("header serializes"),
        );
        c.arrays = self.grads.clone();
        c.encode()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FlError> {
        let c = Container::decode(bytes, PACKET_MAGIC)?;
        let h: PacketHeader = serde_json::from_slice(&c.header).map_err(ContainerError::from)?;
        Ok(Self {
            checkpoint: h.checkpoint,
            batch_size: h.batch_size,
            batch_size_disclosed: h.batch_size_disclosed,
            round: h.round,
            client: h.client,
            at: h.at,
            grads: c.arrays,
        })
    }
}

/// Writes the packet; returns the SHA-256 of the bytes written.
pub fn serialize_packet(packet: &GradientPacket, path: &Path) -> Result<String, FlError> {
    let bytes = packet.encode();
    crate::container::write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn deserialize_packet(path: &Path) -> Result<GradientPacket, FlError> {
    let bytes = std::fs::read(path).map_err(|e| crate::container::io_err(path, e))?;
    GradientPacket::decode(&bytes)
}

/// Loads the checkpoint a packet references and verifies its hash and the
/// packet layout. A relative checkpoint path resolves against `base`.
pub fn open_with_model(
    packet: &GradientPacket,
    base: Option<&Path>,
) -> Result<Model<f32>, FlError> {
    let mut path = PathBuf::from(&packet.checkpoint.path);
    if path.is_relative() {
        if let Some(b) = base {
            path = b.join(path);
        }
    }
    let found = sha256_file(&path)?;
    if found != packet.checkpoint.sha256 {
        return Err(FlError::HashMismatch {
            path: path.display().to_string(),
            expected: packet.checkpoint.sha256.clone(),
            found,
        });
    }
    let model = load_checkpoint(&path)?;
    packet.check_layout(&model)?;
    Ok(model)
}

/// Evaluation-only ground truth of one client step. Never part of a packet.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRoundRecord {
    pub round: u64,
    pub client: u64,
    /// Dataset indices of the batch, when known.
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    /// `[N, C, H, W]`
    pub clean_images: Tensor<f32>,
    /// Inputs actually used for the step under adversarial training.
    pub adv_images: Option<Tensor<f32>>,
    /// `[N, D]` features of the inputs used.
    pub features: Tensor<f32>,
    /// `[N, K]` probabilities of the inputs used.
    pub probs: Tensor<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordHeader {
    round: u64,
    client: u64,
    indices: Vec<usize>,
    labels: Vec<usize>,
}

impl ClientRoundRecord {
    /// The inputs the gradient was computed on.
    pub fn used_images(&self) -> &Tensor<f32> {
        self.adv_images.as_ref().unwrap_or(&self.clean_images)
    }

    pub fn save(&self, path: &Path) -> Result<(), FlError> {
        if path.extension().and_then(|e| e.to_str()) != Some(GROUNDTRUTH_SUFFIX) {
            return Err(FlError::GroundTruthPath(path.display().to_string()));
        }
        let header = RecordHeader {
            round: self.round,
            client: self.client,
            indices: self.indices.clone(),
            labels: self.labels.clone(),
        };
        let mut c = Container::new(
            GROUNDTRUTH_MAGIC,
            serde_json::to_vec(&header).expect("header serializes"),
        );
        let mut push =
            |name: &str, t: &Tensor<f32>| c.push(name, t.shape().to_vec(), t.data().to_vec());
        push("clean_images", &self.clean_images);
        if let Some(a) = &self.adv_images {
            push("adv_images", a);
        }
        push("features", &self.features);
        push("probs", &self.probs);
        c.write(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FlError> {
        let c = Container::read(path, GROUNDTRUTH_MAGIC)?;
        let h: RecordHeader = serde_json::from_slice(&c.header).map_err(ContainerError::from)?;
        let get = |name: &str| -> Result<Tensor<f32>, FlError> {
            let a = c
                .array(name)
                .ok_or_else(|| FlError::Layout(format!("{}: missing `{name}`", path.display())))?;
            Ok(Tensor::new(a.shape.clone(), a.data.clone())?)
        };
        Ok(Self {
            round: h.round,
            client: h.client,
            indices: h.indices,
            labels: h.labels,
            clean_images: get("clean_images")?,
            adv_images: c
                .array("adv_images")
                .map(|_| get("adv_images"))
                .transpose()?,
            features: get("features")?,
            probs: get("probs")?,
        })
    }
}

/// Batch-averaged parameter gradients of the mean cross-entropy, in
/// parameter order.
pub fn batch_gradients(
    model: &Model<f32>,
    x: &Tensor<f32>,
    labels: &[usize],
) -> Result<Vec<Vec<f32>>, FlError> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let xi = g.leaf(x.clone());
    let a = model.logits(&mut g, &p, xi)?;
    let loss = g.softmax_cross_entropy(a, labels)?;
    let ids = p.ids().to_vec();
    let grads = g.gradients(loss, &ids, false)?;
    Ok(grads.into_iter().map(|id| g.data(id).to_vec()).collect())
}

/// Identity of a client step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepMeta {
    pub round: u64,
    pub client: u64,
    pub disclose_batch_size: bool,
}

/// One local step on `(images, labels)`: PGD first when `at` is set, then
/// the batch-averaged gradient of every parameter.
pub fn client_local_step<R: Rng>(
    model: &Model<f32>,
    checkpoint: &CheckpointRef,
    images: &Tensor<f32>,
    labels: &[usize],
    indices: &[usize],
    at: Option<&ATConfig>,
    meta: StepMeta,
    rng: &mut R,
) -> Result<(GradientPacket, ClientRoundRecord), FlError> {
    let adv = at
        .map(|cfg| pgd_attack(model, images, labels, cfg, rng))
        .transpose()?;
    let used = adv.as_ref().unwrap_or(images);
    let grads = batch_gradients(model, used, labels)?;
    let trace = model.forward_trace(used, labels)?;
    let packet = GradientPacket {
        checkpoint: checkpoint.clone(),
        batch_size: labels.len(),
        batch_size_disclosed: meta.disclose_batch_size,
        round: meta.round,
        client: meta.client,
        at: at.copied(),
        grads: model
            .named_params()
            .zip(grads)
            .map(|((name, p), data)| NamedArray {
                name: name.to_string(),
                shape: p.shape().to_vec(),
                data,
            })
            .collect(),
    };
    let record = ClientRoundRecord {
        round: meta.round,
        client: meta.client,
        indices: indices.to_vec(),
        labels: labels.to_vec(),
        clean_images: images.clone(),
        adv_images: adv,
        features: trace.features,
        probs: trace.probs,
    };
    Ok((packet, record))
}

/// Elementwise mean of the packets' gradients.
pub fn server_aggregate(packets: &[GradientPacket]) -> Result<Vec<NamedArray>, FlError> {
    let first = packets.first().ok_or(FlError::Empty)?;
    let mut out = first.grads.clone();
    for p in &packets[1..] {
        if p.checkpoint.sha256 != first.checkpoint.sha256 {
            return Err(FlError::MixedCheckpoints(
                first.checkpoint.sha256.clone(),
                p.checkpoint.sha256.clone(),
            ));
        }
        if p.grads.len() != out.len() {
            return Err(FlError::Layout(
                "packets carry different parameter sets".into(),
            ));
        }
        for (acc, g) in out.iter_mut().zip(&p.grads) {
            if acc.name != g.name || acc.shape != g.shape {
                return Err(FlError::Layout(format!("`{}` vs `{}`", acc.name, g.name)));
            }
            for (a, &v) in acc.data.iter_mut().zip(&g.data) {
                *a += v;
            }
        }
    }
    let n = packets.len() as f32;
    for acc in &mut out {
        acc.data.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, sample_batch, BatchSpec};
    use crate::model::{Architecture, ModelSpec, HEAD_WEIGHT};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Model<f32>, crate::data::Dataset) {
        let spec = ModelSpec::new(Architecture::ConvSmall, [1, 28, 28], 10).unwrap();
        (
            Model::build(spec, 4).unwrap(),
            generate_synthetic(10, 3, 28, 0).unwrap(),
        )
    }

    fn step(m: &Model<f32>, x: &Tensor<f32>, y: &[usize]) -> GradientPacket {
        let r = CheckpointRef::from_model(m, "m.glck");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        client_local_step(m, &r, x, y, &[], None, StepMeta::default(), &mut rng)
            .unwrap()
            .0
    }

    #[test]
    fn packet_is_mean_of_per_sample_gradients() {
        let (m, ds) = setup();
        let b = sample_batch(&ds, &BatchSpec::new(4, 1)).unwrap();
        let packet = step(&m, &b.images, &b.labels);
        let mut acc: Vec<Vec<f32>> = m.params().iter().map(|p| vec![0.0; p.len()]).collect();
        for &i in &b.indices {
            let (x, y) = ds.gather(&[i]);
            for (a, g) in acc.iter_mut().zip(batch_gradients(&m, &x, &y).unwrap()) {
                a.iter_mut().zip(g).for_each(|(a, g)| *a += g / 4.0);
            }
        }
        for (p, a) in packet.grads.iter().zip(&acc) {
            for (&u, &v) in p.data.iter().zip(a) {
                assert!((u - v).abs() <= 1e-5, "{} {u} {v}", p.name);
            }
        }
        assert_eq!(packet.head_gradient().unwrap().shape(), &[256, 10]);
        packet.check_layout(&m).unwrap();
    }

    #[test]
    fn duplicated_sample_equals_single_packet() {
        let (m, ds) = setup();
        let (x1, y1) = ds.gather(&[5]);
        let (x2, y2) = ds.gather(&[5, 5]);
        let (a, b) = (step(&m, &x1, &y1), step(&m, &x2, &y2));
        for (p, q) in a.grads.iter().zip(&b.grads) {
            for (&u, &v) in p.data.iter().zip(&q.data) {
                assert!((u - v).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn roundtrip_and_hash_checks() {
        let dir = tempfile::tempdir().unwrap();
        let (m, ds) = setup();
        let ck = dir.path().join("m.glck");
        crate::checkpoint::save_checkpoint(&m, &ck).unwrap();
        let (x, y) = ds.gather(&[0, 4]);
        let mut packet = step(&m, &x, &y);
        packet.checkpoint = CheckpointRef::from_file(&ck).unwrap();
        let pp = dir.path().join("p.glgp");
        serialize_packet(&packet, &pp).unwrap();
        let back = deserialize_packet(&pp).unwrap();
        assert_eq!(back.encode(), packet.encode());
        open_with_model(&back, None).unwrap();

        let mut tampered = back.clone();
        tampered.checkpoint.sha256 = "00".repeat(32);
        assert!(matches!(
            open_with_model(&tampered, None),
            Err(FlError::HashMismatch { .. })
        ));
    }

    #[test]
    fn packet_bytes_contain_no_image_rows() {
        let (m, ds) = setup();
        let b = sample_batch(&ds, &BatchSpec::new(4, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = CheckpointRef::from_model(&m, "m.glck");
        let at = ATConfig::l2(0.5);
        let (packet, record) = client_local_step(
            &m,
            &r,
            &b.images,
            &b.labels,
            &b.indices,
            Some(&at),
            StepMeta::default(),
            &mut rng,
        )
        .unwrap();
        let bytes = packet.encode();
        for img in [&record.clean_images, record.adv_images.as_ref().unwrap()] {
            for row in img.data().chunks(28) {
                let needle: Vec<u8> = row.iter().flat_map(|v| v.to_le_bytes()).collect();
                assert!(!bytes.windows(needle.len()).any(|w| w == needle.as_slice()));
            }
        }
    }

    #[test]
    fn groundtruth_roundtrip_requires_suffix() {
        let dir = tempfile::tempdir().unwrap();
        let (m, ds) = setup();
        let (x, y) = ds.gather(&[1, 2]);
        let r = CheckpointRef::from_model(&m, "m.glck");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, rec) =
            client_local_step(&m, &r, &x, &y, &[1, 2], None, StepMeta::default(), &mut rng)
                .unwrap();
        assert!(matches!(
            rec.save(&dir.path().join("r.bin")),
            Err(FlError::GroundTruthPath(_))
        ));
        let p = dir.path().join("r.groundtruth");
        rec.save(&p).unwrap();
        assert_eq!(ClientRoundRecord::load(&p).unwrap(), rec);
    }

    #[test]
    fn aggregation() {
        let (m, ds) = setup();
        let packets: Vec<_> = (0..3)
            .map(|i| {
                let (x, y) = ds.gather(&[i, i + 3]);
                step(&m, &x, &y)
            })
            .collect();
        assert_eq!(server_aggregate(&packets[..1]).unwrap(), packets[0].grads);
        let twice = server_aggregate(&[packets[0].clone(), packets[0].clone()]).unwrap();
        assert_eq!(twice, packets[0].grads);
        let mean = server_aggregate(&packets).unwrap();
        let w = packets
            .iter()
            .map(|p| p.grad(HEAD_WEIGHT).unwrap())
            .collect::<Vec<_>>();
        let got = &mean.iter().find(|a| a.name == HEAD_WEIGHT).unwrap().data;
        for (j, &v) in got.iter().enumerate() {
            let want = (w[0].data[j] + w[1].data[j] + w[2].data[j]) / 3.0;
            assert!((v - want).abs() <= 1e-7);
        }
        let mut other = packets[1].clone();
        other.checkpoint.sha256 = "ff".into();
        assert!(matches!(
            server_aggregate(&[packets[0].clone(), other]),
            Err(FlError::MixedCheckpoints(..))
        ));
        assert!(matches!(server_aggregate(&[]), Err(FlError::Empty)));
    }
}
