use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::registry::ClassRegistry;
use crate::error::{Error, Result};
use crate::features::N_MELS;
use crate::task::TaskSpec;
use crate::tensor::{BatchNormMode, BatchStats, Mode, Real, RunningStats, Tape, Tensor, Var};

/// Smallest value the cosine scale may take after an optimizer update.
pub const MIN_SCALE: f64 = 1e-3;

/// Fixed input geometry: `[B, 1, n_mels, n_frames]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    #[serde(default = "default_mels")]
    pub n_mels: usize,
    pub n_frames: usize,
}

fn default_mels() -> usize {
    N_MELS
}

impl InputSpec {
    pub fn new(n_frames: usize) -> Self {
        InputSpec {
            n_mels: N_MELS,
            n_frames,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: [usize; 3],
    pub dropout: f64,
    /// Initial value of the learnable cosine scale `eta`.
    pub eta_init: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: [16, 32, 64],
            dropout: 0.2,
            eta_init: 10.0,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::Configuration("channel widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Configuration(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.eta_init > 0.0) {
            return Err(Error::Configuration("eta_init must be positive".into()));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Configuration("invalid batch-norm settings".into()));
        }
        Ok(())
    }

    /// Flattened width of the last block for a given input.
    pub fn flatten_dim(&self, input: &InputSpec) -> Result<usize> {
        let (mut h, mut w) = (input.n_mels, input.n_frames);
        for _ in 0..3 {
            if h < 2 || w < 2 {
                return Err(Error::Configuration(format!(
                    "input {}x{} is too small for three 2x2 poolings",
                    input.n_mels, input.n_frames
                )));
            }
            h /= 2;
            w /= 2;
        }
        Ok(self.channels[2] * h * w)
    }
}

/// 3×3 convolution followed by batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: RunningStats<T>,
}

impl<T: Real> ConvLayer<T> {
    fn init(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (cin * 9) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = (0..cout * cin * 9)
            .map(|_| T::of(rng.gen_range(-bound..bound)))
            .collect();
        ConvLayer {
            weight: Tensor::new(vec![cout, cin, 3, 3], weight).expect("sized"),
            bias: Tensor::zeros(vec![cout]),
            gamma: Tensor::full(vec![cout], T::one()),
            beta: Tensor::zeros(vec![cout]),
            stats: RunningStats::new(cout),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Bias-free classifier producing `eta · cos(w_k, f)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineClassifier<T> {
    /// `[K, D]` class weight vectors.
    pub weights: Tensor<T>,
    /// One-element learnable scale `eta`.
    pub scale: Tensor<T>,
}

impl<T: Real> CosineClassifier<T> {
    pub fn units(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn eta(&self) -> T {
        self.scale.data()[0]
    }

    fn grow(&mut self, extra: usize, rng: &mut ChaCha8Rng) {
        let d = self.dim();
        let bound = 1.0 / (d as f64).sqrt();
        let mut data = std::mem::replace(&mut self.weights, Tensor::zeros(vec![0])).into_data();
        data.extend((0..extra * d).map(|_| T::of(rng.gen_range(-bound..bound))));
        let k = data.len() / d;
        self.weights = Tensor::new(vec![k, d], data).expect("sized");
    }

    /// Records the cosine head on `tape` and returns `(logits, weights, scale)`.
    pub fn forward(&self, tape: &mut Tape<T>, features: Var) -> Result<(Var, Var, Var)> {
        let [_, d] = tape.value(features).dims2("cosine classifier features")?;
        if d != self.dim() {
            return Err(Error::Dimension(format!(
                "features have width {d}, classifier expects {}",
                self.dim()
            )));
        }
        let w = tape.param(self.weights.clone());
        let eta = tape.param(self.scale.clone());
        let f_hat = tape.l2_normalize_rows(features)?;
        let w_hat = tape.l2_normalize_rows(w)?;
        let cos = tape.dense(f_hat, w_hat, None)?;
        let logits = tape.scale_by(cos, eta)?;
        Ok((logits, w, eta))
    }
}

/// Result of a recorded forward pass.
pub struct ForwardPass<T> {
    pub logits: Var,
    /// Parameter handles in [`Learner::parameters`] order.
    pub params: Vec<Var>,
    /// Per-layer batch statistics (train mode only).
    pub batch_stats: Vec<BatchStats<T>>,
}

/// The network of one time step together with its class registry.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner<T> {
    pub(crate) config: ModelConfig,
    pub(crate) input: InputSpec,
    pub(crate) layers: Vec<ConvLayer<T>>,
    pub(crate) classifier: CosineClassifier<T>,
    pub(crate) registry: ClassRegistry,
    /// Seeds used to build and expand this learner, in order.
    pub(crate) seeds: Vec<u64>,
}

impl<T: Real> Learner<T> {
    /// Builds a fresh learner whose classifier holds the classes of `tasks`.
    pub fn build(input: InputSpec, config: ModelConfig, tasks: &[TaskSpec], seed: u64) -> Result<Self> {
        config.validate()?;
        if tasks.is_empty() || tasks.iter().all(|t| t.classes.is_empty()) {
            return Err(Error::Configuration("a learner needs at least one class".into()));
        }
        let dim = config.flatten_dim(&input)?;
        let mut registry = ClassRegistry::new();
        for t in tasks {
            registry.register(t)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(6);
        let mut cin = 1;
        for &c in &config.channels {
            layers.push(ConvLayer::init(cin, c, &mut rng));
            layers.push(ConvLayer::init(c, c, &mut rng));
            cin = c;
        }
        let mut classifier = CosineClassifier {
            weights: Tensor::zeros(vec![0, dim]),
            scale: Tensor::scalar(T::of(config.eta_init)),
        };
        classifier.grow(registry.len(), &mut rng);
        Ok(Learner {
            config,
            input,
            layers,
            classifier,
            registry,
            seeds: vec![seed],
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_spec(&self) -> InputSpec {
        self.input
    }

    pub fn registry(&self) -> &ClassRegistry {
        &self.registry
    }

    pub fn classifier(&self) -> &CosineClassifier<T> {
        &self.classifier
    }

    pub fn layers(&self) -> &[ConvLayer<T>] {
        &self.layers
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn num_classes(&self) -> usize {
        self.registry.len()
    }

    pub fn flatten_dim(&self) -> usize {
        self.classifier.dim()
    }

    /// Adds output units for `task`. The extractor and existing class
    /// vectors are copied unchanged; new vectors are drawn from
    /// `U(−1/√D, 1/√D)`.
    pub fn expand_classifier(&self, task: &TaskSpec, seed: u64) -> Result<Self> {
        let mut next = self.clone();
        next.registry.register(task)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        next.classifier.grow(task.classes.len(), &mut rng);
        next.seeds.push(seed);
        Ok(next)
    }

    /// Trainable parameters: per conv layer `weight, bias, gamma, beta`,
    /// then the class vectors and the scale.
    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::with_capacity(self.layers.len() * 4 + 2);
        for l in &self.layers {
            out.extend([&l.weight, &l.bias, &l.gamma, &l.beta]);
        }
        out.push(&self.classifier.weights);
        out.push(&self.classifier.scale);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::with_capacity(self.layers.len() * 4 + 2);
        for l in &mut self.layers {
            out.extend([&mut l.weight, &mut l.bias, &mut l.gamma, &mut l.beta]);
        }
        out.push(&mut self.classifier.weights);
        out.push(&mut self.classifier.scale);
        out
    }

    /// Index of the classifier weight matrix within [`Self::parameters`].
    pub fn classifier_weight_index(&self) -> usize {
        self.layers.len() * 4
    }

    /// Records the full network on `tape`. In train mode batch norm uses
    /// batch statistics (returned, not applied) and dropout draws from `rng`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        features: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardPass<T>> {
        let [_, c, h, w] = features.dims4("learner input")?;
        if (c, h, w) != (1, self.input.n_mels, self.input.n_frames) {
            return Err(Error::Dimension(format!(
                "learner expects [B, 1, {}, {}], got {:?}",
                self.input.n_mels,
                self.input.n_frames,
                features.shape()
            )));
        }
        let mut x = tape.constant(features.clone());
        let mut params = Vec::with_capacity(self.layers.len() * 4 + 2);
        let mut batch_stats = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let wv = tape.param(layer.weight.clone());
            let bv = tape.param(layer.bias.clone());
            let gv = tape.param(layer.gamma.clone());
            let be = tape.param(layer.beta.clone());
            params.extend([wv, bv, gv, be]);
            x = tape.conv2d(x, wv, bv)?;
            let bn_mode = match mode {
                Mode::Train => BatchNormMode::Train,
                Mode::Eval => BatchNormMode::Eval(&layer.stats),
            };
            let (y, stats) = tape.batchnorm2d(x, gv, be, bn_mode, self.config.bn_eps)?;
            batch_stats.extend(stats);
            x = tape.relu(y);
            if i % 2 == 1 {
                x = tape.avgpool2x2(x)?;
                x = tape.dropout(x, self.config.dropout, mode, rng)?;
            }
        }
        let flat = tape.flatten(x)?;
        let (logits, wv, eta) = self.classifier.forward(tape, flat)?;
        params.push(wv);
        params.push(eta);
        Ok(ForwardPass {
            logits,
            params,
            batch_stats,
        })
    }

    /// Eval-mode logits `[B, C_t]`.
    pub fn infer(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        // Eval mode never draws from the generator.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = self.forward(&mut tape, features, Mode::Eval, &mut rng)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Folds train-mode batch statistics into the running stats.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats<T>]) -> Result<()> {
        if stats.len() != self.layers.len() {
            return Err(Error::Contract(format!(
                "{} batch statistics for {} layers",
                stats.len(),
                self.layers.len()
            )));
        }
        let momentum = self.config.bn_momentum;
        for (layer, s) in self.layers.iter_mut().zip(stats) {
            layer.stats.update(s, momentum);
        }
        Ok(())
    }

    /// Keeps `eta` strictly positive after an optimizer update.
    pub fn clamp_scale(&mut self) {
        let floor = T::of(MIN_SCALE);
        let eta = &mut self.classifier.scale.data_mut()[0];
        if !(*eta >= floor) {
            *eta = floor;
        }
    }

    /// Lifts the whole state to another precision.
    pub fn cast<U: Real>(&self) -> Learner<U> {
        Learner {
            config: self.config.clone(),
            input: self.input,
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                    gamma: l.gamma.cast(),
                    beta: l.beta.cast(),
                    stats: l.stats.cast(),
                })
                .collect(),
            classifier: CosineClassifier {
                weights: self.classifier.weights.cast(),
                scale: self.classifier.scale.cast(),
            },
            registry: self.registry.clone(),
            seeds: self.seeds.clone(),
        }
    }

    pub fn snapshot_teacher(&self) -> TeacherSnapshot<T> {
        TeacherSnapshot {
            inner: Arc::new(self.clone()),
        }
    }
}

/// Frozen copy of a learner that only runs in eval mode.
#[derive(Debug, Clone)]
pub struct TeacherSnapshot<T> {
    inner: Arc<Learner<T>>,
}

impl<T: Real> TeacherSnapshot<T> {
    pub fn logits(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        self.inner.infer(features)
    }

    pub fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    pub fn learner(&self) -> &Learner<T> {
        &self.inner
    }
}
