//! Label recovery, feature restoration and feature inversion against a
//! captured gradient packet, plus the full-gradient matching baseline.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fl::{ClientRoundRecord, GradientPacket};
use crate::metrics::cosine_similarity;
use crate::model::{FeatureExtractor, Model, ModelError};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::seed::derive_seed;
use crate::tensor::{Graph, Real, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("batch size {n} exceeds the {k} classes of the head")]
    BatchTooLarge { n: usize, k: usize },
    #[error("feature extractor output was zero for every one of {0} restarts")]
    AllRestartsFailed(usize),
    #[error("packet is missing the head weight gradient")]
    MissingHeadGradient,
}

type Result<T, E = AttackError> = std::result::Result<T, E>;

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AttackError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
    .into()
}

/// Closed-form head weight gradient of the mean cross-entropy: column `k`
/// is `mean_i (p[i,k] - [k == y_i]) r_i`. `p: [N, K]`, `r: [N, D]`,
/// result `[D, K]`.
pub fn analytic_head_gradient<T: Real>(
    p: &Tensor<T>,
    r: &Tensor<T>,
    labels: &[usize],
) -> Result<Tensor<T>> {
    if p.shape().len() != 2
        || r.shape().len() != 2
        || p.shape()[0] != r.shape()[0]
        || labels.len() != p.shape()[0]
    {
        return Err(shape_err("analytic_head_gradient", p.shape(), r.shape()));
    }
    let (n, k, d) = (p.shape()[0], p.shape()[1], r.shape()[1]);
    let mut out = vec![T::zero(); d * k];
    let inv_n = T::one() / T::from_f64(n as f64);
    for i in 0..n {
        let y = labels[i];
        if y >= k {
            return Err(TensorError::LabelOutOfRange {
                label: y,
                classes: k,
            }
            .into());
        }
        let ri = &r.data()[i * d..(i + 1) * d];
        for c in 0..k {
            let mut coef = p.data()[i * k + c];
            if c == y {
                coef -= T::one();
            }
            let coef = coef * inv_n;
            for (j, &rv) in ri.iter().enumerate() {
                out[j * k + c] += coef * rv;
            }
        }
    }
    Ok(Tensor::new(vec![d, k], out)?)
}

/// Column `c` of a `[D, K]` matrix.
pub fn column<T: Real>(m: &Tensor<T>, c: usize) -> Vec<T> {
    let k = m.shape()[1];
    m.data().iter().skip(c).step_by(k).copied().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecovery {
    /// Ascending by column minimum, ties by class index.
    pub labels: Vec<usize>,
    pub column_minima: Vec<f32>,
    /// Columns with a negative minimum; an estimate of the batch size.
    pub negative_columns: usize,
    pub warnings: Vec<String>,
}

/// The `n` columns of the `[D, K]` head gradient with the smallest minimum
/// element.
pub fn recover_labels(head_grad: &Tensor<f32>, n: usize) -> Result<LabelRecovery> {
    if head_grad.shape().len() != 2 {
        return Err(AttackError::InvalidArgument(format!(
            "head gradient must be [D, K], got {:?}",
            head_grad.shape()
        )));
    }
    let (d, k) = (head_grad.shape()[0], head_grad.shape()[1]);
    if n > k {
        return Err(AttackError::BatchTooLarge { n, k });
    }
    if n == 0 || d == 0 {
        return Err(AttackError::InvalidArgument(
            "need n >= 1 and D >= 1".into(),
        ));
    }
    let minima: Vec<f32> = (0..k)
        .map(|c| {
            column(head_grad, c)
                .into_iter()
                .fold(f32::INFINITY, f32::min)
        })
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| minima[a].total_cmp(&minima[b]).then(a.cmp(&b)));
    let negative_columns = minima.iter().filter(|&&m| m < 0.0).count();
    let mut warnings = Vec::new();
    if negative_columns < n {
        warnings.push(format!(
            "only {negative_columns} of {n} columns have a negative minimum; the batch may contain duplicate labels"
        ));
    }
    order.truncate(n);
    Ok(LabelRecovery {
        labels: order,
        column_minima: minima,
        negative_columns,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestoredFeature {
    pub label: usize,
    /// Negated gradient column, so that it points along the true feature.
    pub feature: Vec<f32>,
    pub raw_column: Vec<f32>,
    /// The positive scale `(1 - p)` is not observable; features are
    /// recovered up to scale only.
    pub scale_known: bool,
    pub negated: bool,
}

pub fn restore_features(head_grad: &Tensor<f32>, labels: &[usize]) -> Result<Vec<RestoredFeature>> {
    let k = head_grad.shape().get(1).copied().unwrap_or(0);
    labels
        .iter()
        .map(|&label| {
            if label >= k {
                return Err(TensorError::LabelOutOfRange { label, classes: k }.into());
            }
            let raw = column(head_grad, label);
            Ok(RestoredFeature {
                label,
                feature: raw.iter().map(|v| -v).collect(),
                raw_column: raw,
                scale_known: false,
                negated: true,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionSettings {
    pub steps: usize,
    pub lr: f64,
    pub tv_weight: f64,
    pub restarts: usize,
    pub trace_every: usize,
}

impl Default for InversionSettings {
    fn default() -> Self {
        Self {
            steps: 5000,
            lr: 0.1,
            tv_weight: 1e-6,
            restarts: 5,
            trace_every: 100,
        }
    }
}

impl InversionSettings {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.restarts == 0 || self.trace_every == 0 {
            return Err(AttackError::InvalidArgument(
                "steps, restarts and trace_every must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.tv_weight >= 0.0) {
            return Err(AttackError::InvalidArgument(
                "lr must be > 0 and tv_weight >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Starting point of an optimization.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Init {
    /// Uniform noise in `[0, 1]`, seeded per restart.
    #[default]
    Uniform,
    /// The same image(s) for every restart.
    Fixed(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionTask {
    pub target: Vec<f32>,
    pub settings: InversionSettings,
    pub seed: u64,
    pub init: Init,
}

impl ReconstructionTask {
    pub fn new(target: Vec<f32>, settings: InversionSettings, seed: u64) -> Self {
        Self {
            target,
            settings,
            seed,
            init: Init::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartOutcome {
    pub restart: usize,
    pub seed: u64,
    pub final_objective: f64,
    /// `(step, objective)` every `trace_every` steps and at the end.
    pub trace: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    /// `[B, C, H, W]`, one image for feature inversion.
    pub image: Tensor<f32>,
    pub objective: f64,
    pub best_restart: usize,
    pub restarts: Vec<RestartOutcome>,
}

const MAX_INIT_ATTEMPTS: u64 = 16;

fn restart_seed(seed: u64, restart: usize, attempt: u64) -> u64 {
    derive_seed(seed, "restart", ((restart as u64) << 16) | attempt)
}

fn uniform_image(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen::<f32>()).collect()
}

fn features_of<T: Real>(ext: &dyn FeatureExtractor<T>, x: &Tensor<T>) -> Result<Vec<T>> {
    let mut g = Graph::new();
    let xi = g.leaf(x.clone());
    let r = ext.extract(&mut g, xi)?;
    Ok(g.data(r).to_vec())
}

/// Per-row `1 - cos(r(z_b), target) + tv_weight * TV(z_b)` for a batch of
/// candidates `z: [B, C, H, W]`, and the gradient of their sum.
pub fn inversion_objective<T: Real>(
    ext: &dyn FeatureExtractor<T>,
    z: &Tensor<T>,
    target: &[T],
    tv_weight: T,
) -> Result<(Vec<T>, Vec<T>)> {
    let rows = z.shape()[0];
    let mut g = Graph::new();
    let x = g.leaf(z.clone().with_grad());
    let r = ext.extract(&mut g, x)?;
    let targets: Vec<T> = (0..rows).flat_map(|_| target.iter().copied()).collect();
    let cos = g.row_cosine_distance(r, &targets)?;
    let tv = g.total_variation(x)?;
    let tv = g.scale(tv, tv_weight)?;
    let per_row = g.add(cos, tv)?;
    let total = g.sum(per_row)?;
    let grad = g.gradients(total, &[x], false)?;
    Ok((g.data(per_row).to_vec(), g.data(grad[0]).to_vec()))
}

/// Per-row `(step, objective)` traces and final per-row objectives.
type Optimized = (Vec<Vec<(usize, f64)>>, Vec<f64>);

/// Runs Adam on `z` (with pixels clipped to `[0, 1]` after every step) and
/// returns the per-row objective trace and the final per-row objective.
fn optimize<F>(
    z: &mut Tensor<f32>,
    settings: &InversionSettings,
    mut objective: F,
) -> Result<Optimized>
where
    F: FnMut(&Tensor<f32>) -> Result<(Vec<f32>, Vec<f32>)>,
{
    let rows_of = |v: &[f32]| v.iter().map(|&o| o as f64).collect::<Vec<_>>();
    let mut opt = OptimizerState::new(OptimizerConfig::adam(settings.lr));
    let mut traces: Vec<Vec<(usize, f64)>> = Vec::new();
    for step in 0..settings.steps {
        let (obj, grad) = objective(z)?;
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("inversion gradient").into());
        }
        if traces.is_empty() {
            traces = vec![Vec::new(); obj.len()];
        }
        if step % settings.trace_every == 0 {
            for (t, o) in traces.iter_mut().zip(rows_of(&obj)) {
                t.push((step, o));
            }
        }
        z.grad = Some(grad);
        opt.step(&mut [&mut *z])?;
        z.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    let (obj, _) = objective(z)?;
    let fin = rows_of(&obj);
    if traces.is_empty() {
        traces = vec![Vec::new(); fin.len()];
    }
    for (t, &o) in traces.iter_mut().zip(&fin) {
        t.push((settings.steps, o));
    }
    Ok((traces, fin))
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if v.total_cmp(&values[best]).is_lt() {
            best = i;
        }
    }
    best
}

/// Minimizes cosine distance to the target feature plus total variation
/// over the input, from `restarts` starting points optimized jointly, and
/// keeps the restart with the lowest final objective.
pub fn invert_feature(
    ext: &dyn FeatureExtractor<f32>,
    task: &ReconstructionTask,
) -> Result<Inversion> {
    let s = &task.settings;
    s.validate()?;
    if task.target.len() != ext.feature_dim() {
        return Err(shape_err(
            "invert_feature",
            &[task.target.len()],
            &[ext.feature_dim()],
        ));
    }
    if task.target.iter().all(|&v| v == 0.0) {
        return Err(AttackError::InvalidArgument(
            "target feature is zero".into(),
        ));
    }
    let [c, h, w] = ext.input_shape();
    let per = c * h * w;
    if let Init::Fixed(v) = &task.init {
        if v.len() != per {
            return Err(shape_err("invert_feature", &[v.len()], &[per]));
        }
    }
    let mut starts: Vec<(usize, u64)> = Vec::new();
    let mut data = Vec::with_capacity(s.restarts * per);
    for restart in 0..s.restarts {
        for attempt in 0..MAX_INIT_ATTEMPTS {
            let seed = restart_seed(task.seed, restart, attempt);
            let img = match &task.init {
                Init::Uniform => uniform_image(per, seed),
                Init::Fixed(v) => v.clone(),
            };
            let feat = features_of(ext, &Tensor::new(vec![1, c, h, w], img.clone())?)?;
            if feat.iter().any(|&v| v != 0.0) {
                starts.push((restart, seed));
                data.extend(img);
                break;
            }
            log::debug!("restart {restart}: zero features at attempt {attempt}");
            if matches!(task.init, Init::Fixed(_)) {
                break;
            }
        }
    }
    if starts.is_empty() {
        return Err(AttackError::AllRestartsFailed(s.restarts));
    }
    let mut z = Tensor::new(vec![starts.len(), c, h, w], data)?;
    let tv = s.tv_weight as f32;
    let (traces, fin) = optimize(&mut z, s, |z| inversion_objective(ext, z, &task.target, tv))?;
    let best = argmin(&fin);
    let image = Tensor::new(
        vec![1, c, h, w],
        z.data()[best * per..(best + 1) * per].to_vec(),
    )?;
    Ok(Inversion {
        image,
        objective: fin[best],
        best_restart: starts[best].0,
        restarts: starts
            .iter()
            .zip(traces)
            .zip(&fin)
            .map(|((&(restart, seed), trace), &f)| RestartOutcome {
                restart,
                seed,
                final_objective: f,
                trace,
            })
            .collect(),
    })
}

/// `1 - cos(grad_theta L(f(z), labels), targets) + tv_weight * sum_b TV(z_b)`
/// over all parameters, and its gradient with respect to `z`.
pub fn gradient_matching_objective<T: Real>(
    model: &Model<T>,
    targets: &[Vec<T>],
    labels: &[usize],
    z: &Tensor<T>,
    tv_weight: T,
) -> Result<(T, Vec<T>)> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let x = g.leaf(z.clone().with_grad());
    let a = model.logits(&mut g, &p, x)?;
    let loss = g.softmax_cross_entropy(a, labels)?;
    let ids = p.ids().to_vec();
    let grads = g.gradients(loss, &ids, true)?;
    let cos = g.cosine_distance(&grads, targets.to_vec())?;
    let tv = g.total_variation(x)?;
    let tv = g.sum(tv)?;
    let tv = g.scale(tv, tv_weight)?;
    let obj = g.add(cos, tv)?;
    let dz = g.gradients(obj, &[x], false)?;
    Ok((g.item(obj), g.data(dz[0]).to_vec()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineResult {
    /// `[N, C, H, W]`, row `i` carries `labels[i]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub objective: f64,
    pub best_restart: usize,
    pub restarts: Vec<RestartOutcome>,
}

/// Optimizes a whole batch so that its parameter gradients match the
/// packet's in cosine distance, with total variation.
pub fn baseline_gradient_matching(
    model: &Model<f32>,
    packet: &GradientPacket,
    labels: &[usize],
    settings: &InversionSettings,
    seed: u64,
    init: &Init,
) -> Result<BaselineResult> {
    settings.validate()?;
    packet
        .check_layout(model)
        .map_err(|e| AttackError::InvalidArgument(e.to_string()))?;
    let [c, h, w] = model.spec().input_shape;
    let n = labels.len();
    let per = n * c * h * w;
    if let Init::Fixed(v) = init {
        if v.len() != per {
            return Err(shape_err("baseline_gradient_matching", &[v.len()], &[per]));
        }
    }
    let targets: Vec<Vec<f32>> = packet.grads.iter().map(|a| a.data.clone()).collect();
    let tv = settings.tv_weight as f32;
    let mut best: Option<(f64, usize, Tensor<f32>)> = None;
    let mut outcomes = Vec::new();
    for restart in 0..settings.restarts {
        let mut start = None;
        for attempt in 0..MAX_INIT_ATTEMPTS {
            let s = restart_seed(seed, restart, attempt);
            let data = match init {
                Init::Uniform => uniform_image(per, s),
                Init::Fixed(v) => v.clone(),
            };
            let z = Tensor::new(vec![n, c, h, w], data)?;
            let feats = features_of(model, &z)?;
            if feats
                .chunks(model.feature_dim())
                .all(|r| r.iter().any(|&v| v != 0.0))
            {
                start = Some((s, z));
                break;
            }
            if matches!(init, Init::Fixed(_)) {
                break;
            }
        }
        let Some((s, mut z)) = start else {
            log::debug!("baseline restart {restart}: zero features");
            continue;
        };
        let (mut traces, fin) = optimize(&mut z, settings, |z| {
            gradient_matching_objective(model, &targets, labels, z, tv).map(|(o, g)| (vec![o], g))
        })?;
        outcomes.push(RestartOutcome {
            restart,
            seed: s,
            final_objective: fin[0],
            trace: traces.remove(0),
        });
        if best.as_ref().is_none_or(|b| fin[0] < b.0) {
            best = Some((fin[0], restart, z));
        }
    }
    let (objective, best_restart, images) =
        best.ok_or(AttackError::AllRestartsFailed(settings.restarts))?;
    Ok(BaselineResult {
        images,
        labels: labels.to_vec(),
        objective,
        best_restart,
        restarts: outcomes,
    })
}

/// Which restored features get inverted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InvertScope {
    All,
    /// Only these labels, when recovered. Used by evaluation to skip
    /// non-anchor samples.
    Labels(Vec<usize>),
    /// The anchor label of each case in [`run_attack`]; nothing elsewhere.
    Anchor,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOptions {
    /// Overrides the batch size the packet discloses.
    pub batch_size: Option<usize>,
    pub scope: InvertScope,
    pub settings: InversionSettings,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub label: usize,
    pub inversion: Inversion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub batch_size: usize,
    pub recovery: LabelRecovery,
    pub restored: Vec<RestoredFeature>,
    pub reconstructions: Vec<Reconstruction>,
    pub warnings: Vec<String>,
    pub wall_clock: Duration,
}

impl AttackResult {
    pub fn restored_for(&self, label: usize) -> Option<&RestoredFeature> {
        self.restored.iter().find(|r| r.label == label)
    }

    pub fn reconstruction_for(&self, label: usize) -> Option<&Reconstruction> {
        self.reconstructions.iter().find(|r| r.label == label)
    }
}

/// Label recovery, feature restoration and inversion on one packet.
pub fn attack_packet(
    model: &Model<f32>,
    packet: &GradientPacket,
    opts: &AttackOptions,
) -> Result<AttackResult> {
    let start = Instant::now();
    let head = packet
        .head_gradient()
        .ok_or(AttackError::MissingHeadGradient)?;
    let mut warnings = Vec::new();
    let n = match opts.batch_size.or(packet.disclosed_batch_size()) {
        Some(n) => n,
        None => {
            let probe = recover_labels(&head, 1)?;
            let est = probe.negative_columns.clamp(1, head.shape()[1]);
            warnings.push(format!(
                "batch size not disclosed; estimated {est} from negative column minima"
            ));
            est
        }
    };
    let recovery = recover_labels(&head, n)?;
    warnings.extend(recovery.warnings.iter().cloned());
    let restored = restore_features(&head, &recovery.labels)?;
    let mut reconstructions = Vec::new();
    for rf in &restored {
        let wanted = match &opts.scope {
            InvertScope::All => true,
            InvertScope::Labels(ls) => ls.contains(&rf.label),
            InvertScope::Anchor | InvertScope::None => false,
        };
        if !wanted {
            continue;
        }
        let task = ReconstructionTask::new(
            rf.feature.clone(),
            opts.settings,
            derive_seed(opts.seed, "invert", rf.label as u64),
        );
        match invert_feature(model, &task) {
            Ok(inversion) => reconstructions.push(Reconstruction {
                label: rf.label,
                inversion,
            }),
            Err(e @ (AttackError::AllRestartsFailed(_) | AttackError::InvalidArgument(_))) => {
                warnings.push(format!("label {}: {e}", rf.label));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(AttackResult {
        batch_size: n,
        recovery,
        restored,
        reconstructions,
        warnings,
        wall_clock: start.elapsed(),
    })
}

/// One anchor and the `B` captured batches that contain it. Ground-truth
/// records enable oracle-side selection.
#[derive(Debug, Clone, Copy)]
pub struct AnchorCase<'a> {
    pub anchor: usize,
    pub label: usize,
    pub packets: &'a [GradientPacket],
    pub records: Option<&'a [ClientRoundRecord]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorOutcome {
    pub anchor: usize,
    pub label: usize,
    pub results: Vec<AttackResult>,
    /// Batch with the lowest final inversion objective for the anchor's
    /// label. Attacker-observable.
    pub best_attacker: Option<usize>,
    /// Batch with the highest restoration cosine against the true feature.
    /// Evaluation only.
    pub best_oracle: Option<usize>,
    /// Per-batch restoration cosine against the true feature, when records
    /// are available and the anchor's label was recovered.
    pub oracle_cosines: Vec<Option<f64>>,
}

/// True feature of the sample labelled `label` in a record.
pub fn true_feature(record: &ClientRoundRecord, label: usize) -> Option<&[f32]> {
    let d = record.features.shape()[1];
    let i = record.labels.iter().position(|&y| y == label)?;
    Some(&record.features.data()[i * d..(i + 1) * d])
}

/// Cosine between the negated head-gradient column of `label` and the true
/// feature of the sample carrying it, regardless of label recovery.
/// Evaluation only.
pub fn restoration_cosine(
    packet: &GradientPacket,
    record: &ClientRoundRecord,
    label: usize,
) -> Option<f64> {
    let head = packet.head_gradient()?;
    let restored = restore_features(&head, &[label]).ok()?;
    cosine_similarity(&restored[0].feature, true_feature(record, label)?).ok()
}

fn outcome_for(case: &AnchorCase<'_>, results: Vec<AttackResult>) -> AnchorOutcome {
    let objectives: Vec<Option<f64>> = results
        .iter()
        .map(|r| {
            r.reconstruction_for(case.label)
                .map(|x| x.inversion.objective)
        })
        .collect();
    let best_attacker = objectives
        .iter()
        .enumerate()
        .filter_map(|(i, o)| o.map(|o| (i, o)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i);
    let oracle_cosines: Vec<Option<f64>> = (0..results.len())
        .map(|b| restoration_cosine(&case.packets[b], case.records?.get(b)?, case.label))
        .collect();
    let best_oracle = oracle_cosines
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|c| (i, c)))
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i);
    AnchorOutcome {
        anchor: case.anchor,
        label: case.label,
        results,
        best_attacker,
        best_oracle,
        oracle_cosines,
    }
}

/// Attacks every packet of every anchor on up to `jobs` threads. Results are
/// ordered by (anchor, batch) regardless of scheduling; the seed of each
/// packet's attack derives from `opts.seed`, the anchor and the batch.
pub fn run_attack(
    model: &Model<f32>,
    cases: &[AnchorCase<'_>],
    opts: &AttackOptions,
    jobs: usize,
) -> Result<Vec<AnchorOutcome>> {
    let work: Vec<(usize, usize)> = cases
        .iter()
        .enumerate()
        .flat_map(|(a, c)| (0..c.packets.len()).map(move |b| (a, b)))
        .collect();
    let slots: Vec<Mutex<Option<Result<AttackResult>>>> =
        work.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(a, b)) = work.get(i) else { break };
        let case = &cases[a];
        let mut o = opts.clone();
        if o.scope == InvertScope::Anchor {
            o.scope = InvertScope::Labels(vec![case.label]);
        }
        o.seed = derive_seed(opts.seed, "attack", ((case.anchor as u64) << 20) | b as u64);
        let r = attack_packet(model, &case.packets[b], &o);
        *slots[i].lock().expect("slot lock") = Some(r);
    };
    let jobs = jobs.clamp(1, work.len().max(1));
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }
    let mut results = slots.into_iter().map(|m| {
        m.into_inner()
            .expect("slot lock")
            .expect("every slot is filled")
    });
    let mut out = Vec::with_capacity(cases.len());
    for case in cases {
        let per: Vec<AttackResult> = results
            .by_ref()
            .take(case.packets.len())
            .collect::<Result<_>>()?;
        out.push(outcome_for(case, per));
    }
    Ok(out)
}
