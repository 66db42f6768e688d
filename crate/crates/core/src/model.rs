//! Classifiers decomposed as a feature extractor followed by a single
//! linear head: `logits = features(x) · W (+ b)`, with `W` stored `[D, K]`
//! so that column `k` is the weight vector of class `k`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{kernels, Graph, Real, Tensor, TensorError, TensorId};

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown architecture `{0}` (expected mlp-small, conv-small or conv-med)")]
    UnknownArchitecture(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("input batch shape {got:?} does not match model input [N, {want:?}]")]
    InputShape { got: Vec<usize>, want: [usize; 3] },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    MlpSmall,
    ConvSmall,
    ConvMed,
}

impl Architecture {
    pub fn id(self) -> &'static str {
        match self {
            Architecture::MlpSmall => "mlp-small",
            Architecture::ConvSmall => "conv-small",
            Architecture::ConvMed => "conv-med",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Architecture {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mlp-small" => Ok(Architecture::MlpSmall),
            "conv-small" => Ok(Architecture::ConvSmall),
            "conv-med" => Ok(Architecture::ConvMed),
            other => Err(ModelError::UnknownArchitecture(other.to_string())),
        }
    }
}

/// Static description of a classifier. `feature_dim` is derived from the
/// architecture and input shape by [`ModelSpec::new`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    /// `(C, H, W)`
    pub input_shape: [usize; 3],
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Hidden widths (MLP) or channel counts per conv block.
    pub widths: Vec<usize>,
    /// Square kernel size per conv block; empty for the MLP.
    pub kernels: Vec<usize>,
    #[serde(default)]
    pub head_bias: bool,
}

impl ModelSpec {
    pub fn new(
        arch: Architecture,
        input_shape: [usize; 3],
        num_classes: usize,
    ) -> Result<Self, ModelError> {
        let (widths, kernels) = match arch {
            Architecture::MlpSmall => (vec![256, 128], vec![]),
            Architecture::ConvSmall => (vec![8, 16], vec![5, 5]),
            Architecture::ConvMed => (vec![16, 32, 64, 128], vec![3, 3, 3, 3]),
        };
        let mut spec = ModelSpec {
            arch,
            input_shape,
            feature_dim: 0,
            num_classes,
            widths,
            kernels,
            head_bias: false,
        };
        spec.feature_dim = spec.derive_feature_dim()?;
        Ok(spec)
    }

    pub fn with_head_bias(mut self, on: bool) -> Self {
        self.head_bias = on;
        self
    }

    fn derive_feature_dim(&self) -> Result<usize, ModelError> {
        let plan = plan_layers(self)?;
        Ok(plan.feature_dim)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_classes == 0 {
            return Err(ModelError::InvalidSpec(
                "class count must be positive".into(),
            ));
        }
        if self.input_shape.contains(&0) {
            return Err(ModelError::InvalidSpec(format!(
                "degenerate input shape {:?}",
                self.input_shape
            )));
        }
        let d = self.derive_feature_dim()?;
        if d != self.feature_dim {
            return Err(ModelError::InvalidSpec(format!(
                "feature_dim {} does not match the architecture's {}",
                self.feature_dim, d
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Conv {
        weight: usize,
        bias: usize,
        pad: usize,
    },
    Linear {
        weight: usize,
        bias: usize,
    },
    Relu,
    AvgPool(usize),
    Flatten,
}

struct ParamDef {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
    gain: f64,
    is_bias: bool,
}

struct Plan {
    layers: Vec<Layer>,
    params: Vec<ParamDef>,
    feature_dim: usize,
    head_weight: usize,
    head_bias: Option<usize>,
}

fn plan_layers(spec: &ModelSpec) -> Result<Plan, ModelError> {
    let [c, h, w] = spec.input_shape;
    if c == 0 || h == 0 || w == 0 {
        return Err(ModelError::InvalidSpec(format!(
            "degenerate input shape {:?}",
            spec.input_shape
        )));
    }
    if spec.num_classes == 0 {
        return Err(ModelError::InvalidSpec(
            "class count must be positive".into(),
        ));
    }
    let relu_gain = 2f64.sqrt();
    let mut layers = Vec::new();
    let mut params: Vec<ParamDef> = Vec::new();
    let add_param =
        |params: &mut Vec<ParamDef>, name: String, shape: Vec<usize>, fan_in, gain, is_bias| {
            params.push(ParamDef {
                name,
                shape,
                fan_in,
                gain,
                is_bias,
            });
            params.len() - 1
        };

    let feature_dim = match spec.arch {
        Architecture::MlpSmall => {
            if spec.widths.is_empty() || !spec.kernels.is_empty() {
                return Err(ModelError::InvalidSpec(
                    "mlp-small takes widths and no kernels".into(),
                ));
            }
            layers.push(Layer::Flatten);
            let mut fan = c * h * w;
            for &width in &spec.widths {
                let idx = layers.len();
                let weight = add_param(
                    &mut params,
                    format!("features.{idx}.weight"),
                    vec![fan, width],
                    fan,
                    relu_gain,
                    false,
                );
                let bias = add_param(
                    &mut params,
                    format!("features.{idx}.bias"),
                    vec![width],
                    fan,
                    0.0,
                    true,
                );
                layers.push(Layer::Linear { weight, bias });
                layers.push(Layer::Relu);
                fan = width;
            }
            fan
        }
        Architecture::ConvSmall | Architecture::ConvMed => {
            let blocks: &[(usize, bool)] = match spec.arch {
                // (padding, pool after block)
                Architecture::ConvSmall => &[(0, true), (0, true)],
                _ => &[(1, false), (1, true), (0, true), (0, true)],
            };
            if spec.widths.len() != blocks.len() || spec.kernels.len() != blocks.len() {
                return Err(ModelError::InvalidSpec(format!(
                    "{} needs {} widths and kernels",
                    spec.arch,
                    blocks.len()
                )));
            }
            let (mut ch, mut hh, mut ww) = (c, h, w);
            for (b, &(pad, pool)) in blocks.iter().enumerate() {
                let (out, k) = (spec.widths[b], spec.kernels[b]);
                if out == 0 || k == 0 || hh + 2 * pad < k || ww + 2 * pad < k {
                    return Err(ModelError::InvalidSpec(format!(
                        "block {b}: kernel {k} does not fit a {hh}x{ww} map"
                    )));
                }
                let idx = layers.len();
                let fan = ch * k * k;
                let weight = add_param(
                    &mut params,
                    format!("features.{idx}.weight"),
                    vec![out, ch, k, k],
                    fan,
                    relu_gain,
                    false,
                );
                let bias = add_param(
                    &mut params,
                    format!("features.{idx}.bias"),
                    vec![out],
                    fan,
                    0.0,
                    true,
                );
                layers.push(Layer::Conv { weight, bias, pad });
                layers.push(Layer::Relu);
                hh = hh + 2 * pad - k + 1;
                ww = ww + 2 * pad - k + 1;
                ch = out;
                if pool {
                    if hh < 2 || ww < 2 {
                        return Err(ModelError::InvalidSpec(format!(
                            "block {b}: map {hh}x{ww} too small to pool"
                        )));
                    }
                    layers.push(Layer::AvgPool(2));
                    hh /= 2;
                    ww /= 2;
                }
            }
            layers.push(Layer::Flatten);
            ch * hh * ww
        }
    };
    let head_weight = add_param(
        &mut params,
        HEAD_WEIGHT.into(),
        vec![feature_dim, spec.num_classes],
        feature_dim,
        1.0,
        false,
    );
    let head_bias = spec.head_bias.then(|| {
        add_param(
            &mut params,
            HEAD_BIAS.into(),
            vec![spec.num_classes],
            feature_dim,
            0.0,
            true,
        )
    });
    Ok(Plan {
        layers,
        params,
        feature_dim,
        head_weight,
        head_bias,
    })
}

/// A classifier with named parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    spec: ModelSpec,
    layers: Vec<Layer>,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    head_weight: usize,
    head_bias: Option<usize>,
}

/// Parameter tensors inserted into a particular graph.
#[derive(Debug, Clone)]
pub struct BoundParams {
    ids: Vec<TensorId>,
}

impl BoundParams {
    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }
}

/// Everything a forward pass over a labelled batch exposes.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    /// `[N, D]`
    pub features: Tensor<T>,
    /// `[N, K]`
    pub logits: Tensor<T>,
    /// `[N, K]`
    pub probs: Tensor<T>,
    /// Mean cross-entropy over the batch.
    pub loss: T,
}

impl<T: Real> Model<T> {
    /// Kaiming-uniform (fan-in) initialisation, deterministic in `seed`.
    /// Biases start at zero.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let plan = plan_layers(&spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(plan.params.len());
        let mut params = Vec::with_capacity(plan.params.len());
        for def in &plan.params {
            let n: usize = def.shape.iter().product();
            let data: Vec<T> = if def.is_bias {
                vec![T::zero(); n]
            } else {
                let bound = def.gain * (3.0 / def.fan_in as f64).sqrt();
                (0..n)
                    .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                    .collect()
            };
            names.push(def.name.clone());
            params.push(Tensor::new(def.shape.clone(), data)?.with_grad());
        }
        Ok(Self {
            spec,
            layers: plan.layers,
            names,
            params,
            head_weight: plan.head_weight,
            head_bias: plan.head_bias,
        })
    }

    /// Builds a model from the spec and the given named tensors; every
    /// parameter must be present with its exact shape.
    pub fn from_parts(
        spec: ModelSpec,
        mut tensors: Vec<(String, Tensor<T>)>,
    ) -> Result<Self, ModelError> {
        spec.validate()?;
        let plan = plan_layers(&spec)?;
        let mut names = Vec::new();
        let mut params = Vec::new();
        for def in &plan.params {
            let pos = tensors
                .iter()
                .position(|(n, _)| n == &def.name)
                .ok_or_else(|| {
                    ModelError::InvalidSpec(format!("missing parameter `{}`", def.name))
                })?;
            let (name, t) = tensors.swap_remove(pos);
            if t.shape() != def.shape.as_slice() {
                return Err(ModelError::InvalidSpec(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    def.shape
                )));
            }
            names.push(name);
            params.push(t.with_grad());
        }
        if let Some((extra, _)) = tensors.first() {
            return Err(ModelError::InvalidSpec(format!(
                "unexpected parameter `{extra}`"
            )));
        }
        Ok(Self {
            spec,
            layers: plan.layers,
            names,
            params,
            head_weight: plan.head_weight,
            head_bias: plan.head_bias,
        })
    }

    /// Names and shapes the spec requires, in storage order.
    pub fn expected_params(spec: &ModelSpec) -> Result<Vec<(String, Vec<usize>)>, ModelError> {
        Ok(plan_layers(spec)?
            .params
            .into_iter()
            .map(|d| (d.name, d.shape))
            .collect())
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.params.iter_mut().collect()
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.params[i])
    }

    /// The head's `[D, K]` weight matrix.
    pub fn head_weight(&self) -> &Tensor<T> {
        &self.params[self.head_weight]
    }

    /// Index of the head weight within [`Model::params`].
    pub fn head_weight_index(&self) -> usize {
        self.head_weight
    }

    /// Number of parameter tensors after the feature extractor. Always the
    /// head weight, plus the bias when enabled.
    pub fn head_param_count(&self) -> usize {
        1 + usize::from(self.head_bias.is_some())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            layers: self.layers.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            head_weight: self.head_weight,
            head_bias: self.head_bias,
        }
    }

    /// Inserts the parameters into `g`. Frozen parameters are constants,
    /// which skips weight gradients when only input gradients are needed.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        let ids = self
            .params
            .iter()
            .map(|p| {
                let mut t = p.clone();
                t.requires_grad = trainable;
                g.leaf(t)
            })
            .collect();
        BoundParams { ids }
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        if shape.len() != 4 || shape[1..] != self.spec.input_shape {
            return Err(ModelError::InputShape {
                got: shape.to_vec(),
                want: self.spec.input_shape,
            });
        }
        Ok(())
    }

    /// Penultimate features `r(x)`, shape `[N, D]`.
    pub fn features(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        x: TensorId,
    ) -> Result<TensorId, ModelError> {
        self.check_input(g.shape(x))?;
        let mut h = x;
        for layer in &self.layers {
            h = match *layer {
                Layer::Conv { weight, bias, pad } => {
                    let y = g.conv2d(h, p.ids[weight], 1, pad)?;
                    g.bias_add(y, p.ids[bias])?
                }
                Layer::Linear { weight, bias } => {
                    let y = g.matmul(h, p.ids[weight])?;
                    g.bias_add(y, p.ids[bias])?
                }
                Layer::Relu => g.relu(h)?,
                Layer::AvgPool(k) => g.avgpool2d(h, k)?,
                Layer::Flatten => g.flatten(h)?,
            };
        }
        Ok(h)
    }

    /// Head logits `r · W (+ b)`, shape `[N, K]`.
    pub fn head(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        r: TensorId,
    ) -> Result<TensorId, ModelError> {
        let a = g.matmul(r, p.ids[self.head_weight])?;
        Ok(match self.head_bias {
            Some(b) => g.bias_add(a, p.ids[b])?,
            None => a,
        })
    }

    pub fn logits(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        x: TensorId,
    ) -> Result<TensorId, ModelError> {
        let r = self.features(g, p, x)?;
        self.head(g, p, r)
    }

    /// Logits for a batch without tracking gradients.
    pub fn predict_logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.leaf(batch.clone());
        let a = self.logits(&mut g, &p, x)?;
        Ok(g.value(a).clone())
    }

    pub fn predict(&self, batch: &Tensor<T>) -> Result<Vec<usize>, ModelError> {
        let a = self.predict_logits(batch)?;
        let k = self.spec.num_classes;
        Ok(a.data().chunks(k).map(argmax).collect())
    }

    pub fn forward_trace(
        &self,
        batch: &Tensor<T>,
        labels: &[usize],
    ) -> Result<ForwardTrace<T>, ModelError> {
        self.check_input(batch.shape())?;
        if labels.len() != batch.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "forward_trace",
                lhs: batch.shape().to_vec(),
                rhs: vec![labels.len()],
            }
            .into());
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.leaf(batch.clone());
        let r = self.features(&mut g, &p, x)?;
        let a = self.head(&mut g, &p, r)?;
        let loss = g.softmax_cross_entropy(a, labels)?;
        let (n, k) = (labels.len(), self.spec.num_classes);
        let probs = Tensor::new(vec![n, k], kernels::softmax_rows(g.data(a), n, k))?;
        Ok(ForwardTrace {
            features: g.value(r).clone(),
            logits: g.value(a).clone(),
            probs,
            loss: g.item(loss),
        })
    }
}

pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Anything that maps an image batch to penultimate features. Feature
/// inversion is written against this trait.
pub trait FeatureExtractor<T: Real>: Sync {
    fn input_shape(&self) -> [usize; 3];
    fn feature_dim(&self) -> usize;
    fn extract(&self, g: &mut Graph<T>, x: TensorId) -> Result<TensorId, TensorError>;
}

impl<T: Real> FeatureExtractor<T> for Model<T> {
    fn input_shape(&self) -> [usize; 3] {
        self.spec.input_shape
    }

    fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    fn extract(&self, g: &mut Graph<T>, x: TensorId) -> Result<TensorId, TensorError> {
        let p = self.bind(g, false);
        self.features(g, &p, x).map_err(|e| match e {
            ModelError::Tensor(t) => t,
            other => TensorError::InvalidArgument {
                op: "features",
                msg: other.to_string(),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(n: usize, shape: [usize; 3], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * shape.iter().product::<usize>();
        Tensor::new(
            vec![n, shape[0], shape[1], shape[2]],
            (0..len).map(|_| rng.gen::<f32>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let spec = ModelSpec::new(Architecture::MlpSmall, [1, 28, 28], 10).unwrap();
        let a = Model::<f32>::build(spec.clone(), 0).unwrap();
        let b = Model::<f32>::build(spec, 0).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn conv_small_head_matches_flattened_width() {
        let spec = ModelSpec::new(Architecture::ConvSmall, [1, 28, 28], 10).unwrap();
        assert_eq!(spec.feature_dim, 256);
        let m = Model::<f32>::build(spec, 1).unwrap();
        assert_eq!(m.head_weight().shape(), &[256, 10]);
        let x = random_batch(2, [1, 28, 28], 3);
        let t = m.forward_trace(&x, &[0, 1]).unwrap();
        assert_eq!(t.features.shape(), &[2, 256]);
    }

    #[test]
    fn default_feature_dims() {
        let d = |a| ModelSpec::new(a, [1, 28, 28], 10).unwrap().feature_dim;
        assert_eq!(d(Architecture::MlpSmall), 128);
        assert_eq!(d(Architecture::ConvSmall), 256);
        assert_eq!(d(Architecture::ConvMed), 512);
    }

    #[test]
    fn zero_classes_rejected() {
        assert!(matches!(
            ModelSpec::new(Architecture::MlpSmall, [1, 28, 28], 0),
            Err(ModelError::InvalidSpec(_))
        ));
    }

    #[test]
    fn unknown_architecture_rejected() {
        assert!(matches!(
            "resnet-50".parse::<Architecture>(),
            Err(ModelError::UnknownArchitecture(_))
        ));
        assert!(serde_json::from_str::<Architecture>("\"vgg\"").is_err());
        assert_eq!(
            "conv-med".parse::<Architecture>().unwrap(),
            Architecture::ConvMed
        );
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let spec = ModelSpec::new(Architecture::ConvSmall, [1, 28, 28], 7).unwrap();
        let mut m = Model::<f32>::build(spec, 2).unwrap();
        m.param_mut(HEAD_WEIGHT).unwrap().data_mut().fill(0.0);
        let t = m
            .forward_trace(&random_batch(3, [1, 28, 28], 4), &[0, 3, 6])
            .unwrap();
        for &p in t.probs.data() {
            assert!((p - 1.0 / 7.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_sample_loss_is_its_cross_entropy() {
        let spec = ModelSpec::new(Architecture::MlpSmall, [1, 8, 8], 5).unwrap();
        let m = Model::<f32>::build(spec, 5).unwrap();
        let x = random_batch(1, [1, 8, 8], 6);
        let t = m.forward_trace(&x, &[2]).unwrap();
        let mut g = Graph::new();
        let a = g.leaf(t.logits.clone().reshape(&[5]).unwrap());
        let l = g.softmax_cross_entropy(a, &[2]).unwrap();
        assert_eq!(t.loss, g.item(l));
    }

    #[test]
    fn forward_is_head_of_features() {
        for arch in [
            Architecture::MlpSmall,
            Architecture::ConvSmall,
            Architecture::ConvMed,
        ] {
            let spec = ModelSpec::new(arch, [1, 28, 28], 6)
                .unwrap()
                .with_head_bias(true);
            let mut m = Model::<f32>::build(spec, 9).unwrap();
            m.param_mut(HEAD_BIAS)
                .unwrap()
                .data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, b)| *b = i as f32 * 0.1);
            let x = random_batch(2, [1, 28, 28], 10);
            let full = m.predict_logits(&x).unwrap();

            let mut g = Graph::new();
            let p = m.bind(&mut g, false);
            let xi = g.leaf(x.clone());
            let r = m.features(&mut g, &p, xi).unwrap();
            let r_val = g.value(r).clone();
            let mut h = Graph::new();
            let p2 = m.bind(&mut h, false);
            let ri = h.leaf(r_val);
            let a = m.head(&mut h, &p2, ri).unwrap();
            assert_eq!(h.data(a), full.data(), "{arch}");
        }
    }

    #[test]
    fn head_is_the_only_parameterised_layer_after_features() {
        for arch in [
            Architecture::MlpSmall,
            Architecture::ConvSmall,
            Architecture::ConvMed,
        ] {
            for bias in [false, true] {
                let spec = ModelSpec::new(arch, [1, 28, 28], 4)
                    .unwrap()
                    .with_head_bias(bias);
                let m = Model::<f32>::build(spec, 0).unwrap();
                let tail: Vec<&String> = m
                    .param_names()
                    .iter()
                    .filter(|n| n.starts_with("head."))
                    .collect();
                assert_eq!(tail.len(), m.head_param_count());
                assert!(m
                    .param_names()
                    .iter()
                    .rev()
                    .take(m.head_param_count())
                    .all(|n| n.starts_with("head.")));
                let relu_pos = m.layers.iter().rposition(|l| *l == Layer::Relu).unwrap();
                assert!(m.layers[relu_pos + 1..]
                    .iter()
                    .all(|l| matches!(l, Layer::AvgPool(_) | Layer::Flatten)));
            }
        }
    }

    #[test]
    fn input_shape_mismatch() {
        let spec = ModelSpec::new(Architecture::ConvSmall, [1, 28, 28], 4).unwrap();
        let m = Model::<f32>::build(spec, 0).unwrap();
        let x = random_batch(1, [3, 28, 28], 0);
        assert!(matches!(
            m.forward_trace(&x, &[0]),
            Err(ModelError::InputShape { .. })
        ));
        let x = random_batch(1, [1, 28, 28], 0);
        assert!(m.forward_trace(&x, &[4]).is_err());
    }
}
