//! The four networks: feature extractor, linear classifier head, pairwise
//! gradient-similarity policy, and latent-code discriminator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{self, flatten_params, unflatten, Tensor};

pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, t: Tensor) -> Tensor {
        match self {
            Activation::Tanh => t.map(f64::tanh),
            Activation::Identity => t,
        }
    }

    fn record(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(v),
            Activation::Identity => v,
        }
    }
}

/// Affine layer with `weight: [out × in]` and `bias: [out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform in `±1/√fan_in` for both weight and bias.
    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let w = (0..input * output).map(|_| rng.gen_range(-bound..bound)).collect();
        let b = (0..output).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            weight: Tensor::matrix(output, input, w),
            bias: Tensor::vector(b),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        tensor::linear(x, &self.weight, &self.bias)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        vec![self.weight.clone(), self.bias.clone()]
    }

    pub fn num_params(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn flat(&self) -> Vec<f64> {
        flatten_params(&[self.weight.clone(), self.bias.clone()])
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let mut parts = unflatten(flat, &self.shapes())?.into_iter();
        self.weight = parts.next().expect("two parts");
        self.bias = parts.next().expect("two parts");
        Ok(())
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        vec![self.weight.shape().to_vec(), self.bias.shape().to_vec()]
    }

    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> LinearVars {
        let (w, b) = if trainable {
            (tape.param(self.weight.clone()), tape.param(self.bias.clone()))
        } else {
            (tape.constant(self.weight.clone()), tape.constant(self.bias.clone()))
        };
        LinearVars { weight: w, bias: b }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.linear(x, self.weight, self.bias)
    }
}

/// Feed-forward stack; tanh between layers, configurable on the output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub output: Activation,
}

impl Mlp {
    pub fn init(sizes: &[usize], output: Activation, rng: &mut impl Rng) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        Self { layers, output }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    fn activation(&self, i: usize) -> Activation {
        if i + 1 == self.layers.len() {
            self.output
        } else {
            Activation::Tanh
        }
    }

    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        if x.dims2().1 != self.in_dim() {
            return Err(dim_err(format!(
                "input width {} for a network expecting {}",
                x.dims2().1,
                self.in_dim()
            )));
        }
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = self.activation(i).apply(layer.eval(&h)?);
        }
        Ok(h)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(Linear::tensors).collect()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().flat_map(Linear::shapes).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Linear::num_params).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        flatten_params(&self.tensors())
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(dim_err(format!(
                "flat vector of {} for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let n = layer.num_params();
            layer.set_flat(&flat[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }

    pub fn set_tensors(&mut self, tensors: &[Tensor]) -> Result<()> {
        if tensors.len() != 2 * self.layers.len() {
            return Err(dim_err(format!(
                "{} tensors for {} layers",
                tensors.len(),
                self.layers.len()
            )));
        }
        for (layer, pair) in self.layers.iter_mut().zip(tensors.chunks(2)) {
            if pair[0].shape() != layer.weight.shape() || pair[1].numel() != layer.bias.numel() {
                return Err(dim_err("tensor shapes do not match the network".to_string()));
            }
            layer.weight = pair[0].clone();
            layer.bias = pair[1].clone();
        }
        Ok(())
    }

    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        MlpVars {
            layers: self.layers.iter().map(|l| l.on_tape(tape, trainable)).collect(),
            output: self.output,
        }
    }

    /// Plain SGD over every layer, in the order the tape registered them.
    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64) -> Result<()> {
        for (layer, g) in self.layers.iter_mut().zip(grads.chunks(2)) {
            layer.weight.sgd_step(&g[0], lr)?;
            layer.bias.sgd_step(&g[1], lr)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<LinearVars>,
    output: Activation,
}

impl MlpVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            let act = if i == last { self.output } else { Activation::Tanh };
            h = act.record(tape, h);
        }
        Ok(h)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub num_classes: usize,
    pub hidden: usize,
}

impl ModelDims {
    /// Flat parameter count of the classifier head, `|φ|`.
    pub fn classifier_params(&self) -> usize {
        self.latent_dim * self.num_classes + self.num_classes
    }

    pub fn policy_input(&self) -> usize {
        2 * self.classifier_params()
    }
}

/// Extractor `θ`, classifier `φ`, similarity policy `ω`, discriminator `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub dims: ModelDims,
    pub extractor: Mlp,
    pub classifier: Linear,
    pub policy: Mlp,
    pub discriminator: Mlp,
}

pub const NETWORK_NAMES: [&str; 4] = ["extractor", "classifier", "policy", "discriminator"];

impl ModelBundle {
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        let ModelDims {
            input_dim,
            latent_dim,
            num_classes,
            hidden,
        } = dims;
        if input_dim == 0 || latent_dim == 0 || num_classes == 0 || hidden == 0 {
            return Err(Error::Config(format!("all model dims must be ≥ 1, got {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extractor = Mlp::init(&[input_dim, hidden, latent_dim], Activation::Tanh, &mut rng);
        let classifier = Linear::init(latent_dim, num_classes, &mut rng);
        let policy = Mlp::init(&[dims.policy_input(), hidden, 1], Activation::Identity, &mut rng);
        let discriminator = Mlp::init(&[latent_dim, hidden, 1], Activation::Identity, &mut rng);
        Ok(Self {
            dims,
            extractor,
            classifier,
            policy,
            discriminator,
        })
    }

    /// `z = g_θ(x)` for every row of `x`.
    pub fn extract(&self, x: &Tensor) -> Result<Tensor> {
        self.extractor.eval(x)
    }

    /// Logits `h_φ(z)` for every row of `z`.
    pub fn classify(&self, z: &Tensor) -> Result<Tensor> {
        if z.dims2().1 != self.dims.latent_dim {
            return Err(dim_err(format!(
                "latent width {} but classifier expects {}",
                z.dims2().1,
                self.dims.latent_dim
            )));
        }
        self.classifier.eval(z)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.classify(&self.extract(x)?)
    }

    /// `A_ω(g_i, g_j)` on the ordered concatenation `[g_i, g_j]`.
    pub fn similarity(&self, gi: &[f64], gj: &[f64]) -> Result<f64> {
        let p = self.dims.classifier_params();
        if gi.len() != p || gj.len() != p {
            return Err(dim_err(format!(
                "gradient lengths {} and {} but |φ| = {p}",
                gi.len(),
                gj.len()
            )));
        }
        let mut input = gi.to_vec();
        input.extend_from_slice(gj);
        Ok(self.policy.eval(&Tensor::matrix(1, 2 * p, input))?.item())
    }

    /// `d(z)` as a probability.
    pub fn discriminate(&self, z: &[f64]) -> Result<f64> {
        let logit = self
            .discriminator
            .eval(&Tensor::matrix(1, z.len(), z.to_vec()))?
            .item();
        Ok(tensor::sigmoid(logit))
    }

    /// Flat `θ ⊕ φ`.
    pub fn base_flat(&self) -> Vec<f64> {
        let mut v = self.extractor.flat();
        v.extend(self.classifier.flat());
        v
    }

    pub fn set_base_flat(&mut self, flat: &[f64]) -> Result<()> {
        let t = self.extractor.num_params();
        if flat.len() != t + self.classifier.num_params() {
            return Err(dim_err(format!(
                "base vector of {} for {} parameters",
                flat.len(),
                t + self.classifier.num_params()
            )));
        }
        self.extractor.set_flat(&flat[..t])?;
        self.classifier.set_flat(&flat[t..])
    }

    pub fn network_tensors(&self) -> Vec<(&'static str, Vec<Tensor>)> {
        vec![
            (NETWORK_NAMES[0], self.extractor.tensors()),
            (NETWORK_NAMES[1], self.classifier.tensors()),
            (NETWORK_NAMES[2], self.policy.tensors()),
            (NETWORK_NAMES[3], self.discriminator.tensors()),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.network_tensors()
            .iter()
            .all(|(_, ts)| ts.iter().all(Tensor::is_finite))
    }
}

/// Classifier head with explicit flat parameters, used for neighbour
/// evaluations where `φ'` is a perturbed copy.
pub fn classifier_from_flat(latent_dim: usize, num_classes: usize, flat: &[f64]) -> Result<Linear> {
    let mut l = Linear::zeros(latent_dim, num_classes);
    l.set_flat(flat)?;
    Ok(l)
}
