//! Plain VGG-style CNNs whose stages ("modules") expose tapped activations.
//!
//! A stage is a run of 3x3 conv + ReLU layers sharing one channel count.
//! Stages flagged `downsample` start with a stride-2 conv. After the last
//! stage a global average pool yields the penultimate vector, which feeds a
//! single affine classifier.

mod checkpoint;
mod spec;

pub use checkpoint::{ArrayKind, Checkpoint, NamedArray, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use spec::{ModelSpec, StageSpec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{self, Tensor};

pub const KERNEL: usize = 3;
pub const PADDING: usize = 1;
/// Subtracted from every input pixel before the first convolution, so
/// `[0, 1]` images enter the network centred on zero.
pub const INPUT_CENTRE: f64 = 0.5;

/// A trainable tensor with a unique hierarchical name.
///
/// Cloning copies the value into a fresh leaf, so toggling gradients on a
/// clone never affects the original.
#[derive(Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Clone for Parameter {
    fn clone(&self) -> Self {
        let tensor = self.tensor.detach();
        tensor.set_requires_grad(self.tensor.requires_grad());
        Self {
            name: self.name.clone(),
            tensor,
        }
    }
}

impl Parameter {
    pub fn new(name: String, data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Ok(Self {
            name,
            tensor: Tensor::param(data, shape)?,
        })
    }

    /// Replaces the value with a fresh leaf, keeping the gradient flag.
    pub fn assign(&mut self, data: Vec<f64>) -> Result<()> {
        let t = Tensor::new(data, self.tensor.shape())?;
        t.set_requires_grad(self.tensor.requires_grad());
        self.tensor = t;
        Ok(())
    }

    pub fn is_trainable(&self) -> bool {
        self.tensor.requires_grad()
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    stride: usize,
    weight: Parameter,
    bias: Parameter,
}

/// Activations of one forward pass, tapped at one conv layer per module.
#[derive(Debug, Clone)]
pub struct ModuleOutputs {
    /// `[B, o_m, k_m, k_m]` per module.
    pub module_reps: Vec<Tensor>,
    /// `[B, p]` pooled features feeding the classifier.
    pub penultimate: Tensor,
    /// `[B, c]`.
    pub logits: Tensor,
}

/// Every conv layer's post-ReLU output, in global layer order.
#[derive(Debug, Clone)]
pub struct LayerOutputs {
    pub layers: Vec<Tensor>,
    pub penultimate: Tensor,
    pub logits: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    seed: u64,
    convs: Vec<ConvLayer>,
    classifier_weight: Parameter,
    classifier_bias: Parameter,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

fn classifier_params(
    rng: &mut ChaCha8Rng,
    features: usize,
    classes: usize,
) -> Result<(Parameter, Parameter)> {
    let bound = 1.0 / (features as f64).sqrt();
    Ok((
        Parameter::new("classifier.weight".into(), uniform(rng, features * classes, bound), &[features, classes])?,
        Parameter::new("classifier.bias".into(), vec![0.0; classes], &[classes])?,
    ))
}

impl Model {
    /// Builds a network with seeded fan-in uniform initialization: conv
    /// weights in `±sqrt(6 / fan_in)`, classifier weights in
    /// `±1 / sqrt(fan_in)`, zero biases.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut c_in = spec.input_shape[0];
        for (m, stage) in spec.stages.iter().enumerate() {
            for l in 0..stage.convs {
                let stride = if l == 0 && stage.downsample { 2 } else { 1 };
                let fan_in = c_in * KERNEL * KERNEL;
                let bound = (6.0 / fan_in as f64).sqrt();
                let wshape = [stage.channels, c_in, KERNEL, KERNEL];
                convs.push(ConvLayer {
                    stride,
                    weight: Parameter::new(
                        format!("stage{m}.conv{l}.weight"),
                        uniform(&mut rng, wshape.iter().product(), bound),
                        &wshape,
                    )?,
                    bias: Parameter::new(format!("stage{m}.conv{l}.bias"), vec![0.0; stage.channels], &[stage.channels])?,
                });
                c_in = stage.channels;
            }
        }
        let (classifier_weight, classifier_bias) = classifier_params(&mut rng, c_in, spec.num_classes)?;
        Ok(Self {
            spec: spec.clone(),
            seed,
            convs,
            classifier_weight,
            classifier_bias,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of modules M.
    pub fn num_modules(&self) -> usize {
        self.spec.stages.len()
    }

    pub fn num_layers(&self) -> usize {
        self.convs.len()
    }

    /// Global conv-layer indices belonging to module `m`.
    pub fn module_layers(&self, m: usize) -> std::ops::Range<usize> {
        let start: usize = self.spec.stages[..m].iter().map(|s| s.convs).sum();
        start..start + self.spec.stages[m].convs
    }

    /// Global index of module `m`'s last conv layer.
    pub fn last_layer(&self, m: usize) -> usize {
        self.module_layers(m).end - 1
    }

    /// Default taps: the last conv layer of every module.
    pub fn default_taps(&self) -> Vec<usize> {
        (0..self.num_modules()).map(|m| self.last_layer(m)).collect()
    }

    /// Channel count of module `m` (o_m).
    pub fn module_channels(&self, m: usize) -> usize {
        self.spec.stages[m].channels
    }

    /// Width of the penultimate vector (p).
    pub fn penultimate_dim(&self) -> usize {
        self.spec.stages.last().map_or(0, |s| s.channels)
    }

    /// All parameters in construction order: conv weights and biases, then
    /// the classifier.
    pub fn parameters(&self) -> Vec<&Parameter> {
        self.convs
            .iter()
            .flat_map(|c| [&c.weight, &c.bias])
            .chain([&self.classifier_weight, &self.classifier_bias])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.convs
            .iter_mut()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .chain([&mut self.classifier_weight, &mut self.classifier_bias])
            .collect()
    }

    pub fn trainable_parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.parameters_mut().into_iter().filter(|p| p.is_trainable()).collect()
    }

    pub fn classifier_parameters_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.classifier_weight, &mut self.classifier_bias]
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.tensor.numel()).sum()
    }

    /// Stops gradient tracking on every parameter. Values are untouched.
    pub fn freeze(mut self) -> Self {
        self.set_trainable(false);
        self
    }

    pub fn set_trainable(&mut self, on: bool) {
        for p in self.parameters_mut() {
            p.tensor.set_requires_grad(on);
        }
    }

    /// Freezes the conv backbone and leaves only the classifier trainable.
    pub fn freeze_backbone(&mut self) {
        self.set_trainable(false);
        for p in self.classifier_parameters_mut() {
            p.tensor.set_requires_grad(true);
        }
    }

    /// Draws a fresh classifier from `seed`, preserving its trainable flag.
    pub fn reset_classifier(&mut self, seed: u64) -> Result<()> {
        let trainable = self.classifier_weight.is_trainable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, b) = classifier_params(&mut rng, self.penultimate_dim(), self.spec.num_classes)?;
        self.classifier_weight = w;
        self.classifier_bias = b;
        for p in self.classifier_parameters_mut() {
            p.tensor.set_requires_grad(trainable);
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for p in self.parameters() {
            p.tensor.zero_grad();
        }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let [c, h, w] = self.spec.input_shape;
        match batch.shape() {
            [_, bc, bh, bw] if [*bc, *bh, *bw] == [c, h, w] => Ok(()),
            other => Err(shape_err!("batch shape {other:?} does not match model input [B, {c}, {h}, {w}]")),
        }
    }

    /// Runs the network, keeping every conv layer's output.
    pub fn forward_all(&self, batch: &Tensor) -> Result<LayerOutputs> {
        self.check_batch(batch)?;
        let mut layers = Vec::with_capacity(self.convs.len());
        let mut x = tensor::add_scalar(batch, -INPUT_CENTRE);
        for conv in &self.convs {
            x = tensor::relu(&tensor::conv2d(&x, &conv.weight.tensor, Some(&conv.bias.tensor), conv.stride, PADDING)?);
            layers.push(x.clone());
        }
        let b = batch.shape()[0];
        let penultimate = tensor::reshape(&tensor::global_avg_pool(&x)?, &[b, self.penultimate_dim()])?;
        let logits = tensor::affine(&penultimate, &self.classifier_weight.tensor, Some(&self.classifier_bias.tensor))?;
        Ok(LayerOutputs {
            layers,
            penultimate,
            logits,
        })
    }

    /// Runs the network and taps the given global layer per module.
    pub fn forward_with_taps(&self, batch: &Tensor, taps: &[usize]) -> Result<ModuleOutputs> {
        if taps.len() != self.num_modules() {
            return Err(Error::Usage(format!(
                "{} taps given for a model with {} modules",
                taps.len(),
                self.num_modules()
            )));
        }
        for (m, &t) in taps.iter().enumerate() {
            if !self.module_layers(m).contains(&t) {
                return Err(Error::Usage(format!("tap layer {t} is not inside module {m}")));
            }
        }
        let all = self.forward_all(batch)?;
        Ok(ModuleOutputs {
            module_reps: taps.iter().map(|&t| all.layers[t].clone()).collect(),
            penultimate: all.penultimate,
            logits: all.logits,
        })
    }

    /// Forward pass tapped at the last layer of every module.
    pub fn forward(&self, batch: &Tensor) -> Result<ModuleOutputs> {
        self.forward_with_taps(batch, &self.default_taps())
    }

    /// Logits only.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward_all(batch)?.logits)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            spec: self.spec.to_string(),
            seed: self.seed,
            arrays: self
                .parameters()
                .into_iter()
                .map(|p| NamedArray {
                    name: p.name.clone(),
                    kind: ArrayKind::Model,
                    shape: p.tensor.shape().to_vec(),
                    data: p.tensor.to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds a model from the spec and model arrays of a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let spec: ModelSpec = ckpt.spec.parse()?;
        let mut model = Self::build(&spec, ckpt.seed)?;
        for p in model.parameters_mut() {
            let arr = ckpt
                .arrays
                .iter()
                .find(|a| a.kind == ArrayKind::Model && a.name == p.name)
                .ok_or_else(|| Error::Spec(format!("checkpoint lacks parameter {}", p.name)))?;
            if arr.shape != p.tensor.shape() {
                return Err(shape_err!(
                    "checkpoint parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    arr.shape,
                    p.tensor.shape()
                ));
            }
            p.assign(arr.data.clone())?;
        }
        Ok(model)
    }
}
