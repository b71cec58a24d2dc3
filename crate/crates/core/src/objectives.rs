//! Training objectives: the base loss over original and mixed codes, the
//! flatness loss that trains the policy, the adversarial prior-matching
//! terms, and the running Gaussian prior.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::datasets::Batch;
use crate::error::{Error, Result};
use crate::mixup::{self, MixupPlan, MixupSample, MixupWeights};
use crate::models::{classifier_from_flat, Linear, LinearVars, Mlp, MlpVars, ModelBundle};
use crate::tensor::{self, norm, Tensor};

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;
pub const VARIANCE_FLOOR: f64 = 1e-8;
pub const DEFAULT_PRIOR_MOMENTUM: f64 = 0.9;

/// Mixup inputs to the base loss. Weights enter as data.
#[derive(Clone, Copy, Debug)]
pub struct MixupTerms<'a> {
    pub plan: &'a MixupPlan,
    pub a: &'a Tensor,
    pub a_tilde: &'a Tensor,
}

/// Variables of one base-loss recording.
#[derive(Clone, Debug)]
pub struct BaseLoss {
    pub loss: Var,
    pub extractor: MlpVars,
    pub classifier: LinearVars,
}

/// `(Σ CE over the batch + Σ l_new) / (|B| + n)`, recorded with `θ` and `φ`
/// as trainable leaves.
pub fn base_loss_on_tape(
    tape: &mut Tape,
    bundle: &ModelBundle,
    batch: &Batch,
    mixup: Option<MixupTerms<'_>>,
) -> Result<BaseLoss> {
    if batch.is_empty() {
        return Err(Error::Contract("base loss needs at least one instance".into()));
    }
    let ext = bundle.extractor.on_tape(tape, true);
    let cls = bundle.classifier.on_tape(tape, true);
    let x = tape.constant(batch.x.clone());
    let z = ext.forward(tape, x)?;
    let logits = cls.forward(tape, z)?;
    let ce = tape.softmax_cross_entropy(logits, &batch.labels)?;
    let mut total = tape.sum(ce);
    let mut count = batch.len();
    if let Some(m) = mixup {
        let mixing = tape.constant(mixup::mixing_matrix(m.plan, m.a_tilde, batch.len()));
        let z_new = tape.matmul(mixing, z)?;
        let logits_new = cls.forward(tape, z_new)?;
        let a = tape.constant(m.a.clone());
        let l_new = mixup::mix_losses_on_tape(tape, logits_new, &m.plan.labels, a)?;
        let s = tape.sum(l_new);
        total = tape.add(total, s)?;
        count += m.plan.len();
    }
    let loss = tape.scale(total, 1.0 / count as f64);
    Ok(BaseLoss {
        loss,
        extractor: ext,
        classifier: cls,
    })
}

/// Plain value of the base loss.
pub fn base_loss(bundle: &ModelBundle, batch: &Batch, mixup: Option<MixupTerms<'_>>) -> Result<f64> {
    let mut tape = Tape::new();
    let b = base_loss_on_tape(&mut tape, bundle, batch, mixup)?;
    Ok(tape.value(b.loss).item())
}

/// A point at fixed distance from the classifier parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighbourSample {
    pub direction: Vec<f64>,
    pub radius: f64,
    pub phi_prime: Vec<f64>,
}

/// Uniform direction on the unit sphere: a normalized standard normal.
pub fn sample_direction(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn neighbour_at(phi: &[f64], direction: Vec<f64>, radius: f64) -> NeighbourSample {
    let phi_prime = phi
        .iter()
        .zip(&direction)
        .map(|(p, d)| p + radius * d)
        .collect();
    NeighbourSample {
        direction,
        radius,
        phi_prime,
    }
}

/// `φ' = φ + γ u` with `u` uniform on the unit sphere.
pub fn sample_neighbour(phi: &[f64], gamma: f64, rng: &mut impl Rng) -> Result<NeighbourSample> {
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(Error::Config(format!("neighbourhood radius must be > 0, got {gamma}")));
    }
    Ok(neighbour_at(phi, sample_direction(phi.len(), rng), gamma))
}

/// Mean of `l_new` over a block of mixed codes under a fixed classifier.
fn mean_mix_loss(
    tape: &mut Tape,
    z_new: Var,
    labels: &[Vec<usize>],
    a: Var,
    classifier: &Linear,
) -> Result<Var> {
    let cls = classifier.on_tape(tape, false);
    let logits = cls.forward(tape, z_new)?;
    let l = mixup::mix_losses_on_tape(tape, logits, labels, a)?;
    Ok(tape.mean(l))
}

/// `(1/m) Σ_φ' [L(φ) − L(φ')]²` over the given neighbours, where `L` is the
/// mean mixup loss of `z_new`. Only `z_new` carries gradient; the label
/// weights `a` and both classifiers are constants.
pub fn flatness_loss_on_tape(
    tape: &mut Tape,
    z_new: Var,
    labels: &[Vec<usize>],
    a: &Tensor,
    classifier: &Linear,
    neighbours: &[NeighbourSample],
) -> Result<Var> {
    if neighbours.is_empty() {
        return Err(Error::Contract("flatness loss needs at least one neighbour".into()));
    }
    let a = tape.constant(a.clone());
    let center = mean_mix_loss(tape, z_new, labels, a, classifier)?;
    let (latent, classes) = (classifier.in_dim(), classifier.out_dim());
    let mut squares = Vec::with_capacity(neighbours.len());
    for nb in neighbours {
        let shifted = classifier_from_flat(latent, classes, &nb.phi_prime)?;
        let other = mean_mix_loss(tape, z_new, labels, a, &shifted)?;
        let diff = tape.sub(center, other)?;
        squares.push(tape.square(diff));
    }
    let stacked = tape.concat_rows(&squares)?;
    Ok(tape.mean(stacked))
}

/// Plain value of the flatness loss with `m` freshly drawn neighbours.
pub fn flatness_loss(
    classifier: &Linear,
    samples: &[MixupSample],
    gamma: f64,
    m: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if samples.is_empty() || m == 0 {
        return Err(Error::Contract("flatness loss needs samples and m ≥ 1".into()));
    }
    let phi = classifier.flat();
    let neighbours = (0..m)
        .map(|_| sample_neighbour(&phi, gamma, rng))
        .collect::<Result<Vec<_>>>()?;
    let d = samples[0].z_new.len();
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::matrix(
        samples.len(),
        d,
        samples.iter().flat_map(|s| s.z_new.iter().copied()).collect(),
    ));
    let labels: Vec<Vec<usize>> = samples.iter().map(|s| s.labels.clone()).collect();
    let k = labels[0].len();
    let a = Tensor::matrix(
        samples.len(),
        k,
        samples.iter().flat_map(|s| s.a.iter().copied()).collect(),
    );
    let v = flatness_loss_on_tape(&mut tape, z, &labels, &a, classifier, &neighbours)?;
    Ok(tape.value(v).item())
}

/// Squared loss differences `[L(c) − L(c + γu)]²` for `m` random unit
/// directions `u`, for an arbitrary loss over a flat parameter vector.
pub fn sphere_flatness<F>(
    center: &[f64],
    radius: f64,
    m: usize,
    rng: &mut impl Rng,
    mut loss: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let base = loss(center)?;
    (0..m)
        .map(|_| {
            let nb = sample_neighbour(center, radius, rng)?;
            let d = base - loss(&nb.phi_prime)?;
            Ok(d * d)
        })
        .collect()
}

/// Running diagonal Gaussian over latent codes.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub initialized: bool,
}

impl PriorStats {
    pub fn new(latent_dim: usize, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Config(format!("prior momentum {momentum} not in (0, 1)")));
        }
        Ok(Self {
            mean: vec![0.0; latent_dim],
            var: vec![1.0; latent_dim],
            momentum,
            initialized: false,
        })
    }

    /// First call copies the batch statistics; later calls blend them in.
    pub fn update(&mut self, codes: &Tensor) -> Result<()> {
        let (n, d) = codes.dims2();
        if n == 0 || codes.numel() == 0 {
            return Err(Error::Contract("prior update needs a non-empty batch".into()));
        }
        if d != self.mean.len() {
            return Err(Error::Dimension(format!(
                "codes of width {d} for a prior of width {}",
                self.mean.len()
            )));
        }
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(codes.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((acc, v), m) in var.iter_mut().zip(codes.row(r)).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);

        if self.initialized {
            let m = self.momentum;
            for (cur, b) in self.mean.iter_mut().zip(&mean) {
                *cur = m * *cur + (1.0 - m) * b;
            }
            for (cur, b) in self.var.iter_mut().zip(&var) {
                *cur = m * *cur + (1.0 - m) * b;
            }
        } else {
            self.mean = mean;
            self.var = var;
            self.initialized = true;
        }
        for v in &mut self.var {
            *v = v.max(VARIANCE_FLOOR);
        }
        Ok(())
    }

    /// `n` draws from `N(μ, diag σ²)` as `[n × latent]`.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Tensor> {
        if !self.initialized {
            return Err(Error::State("prior sampled before its first update".into()));
        }
        let d = self.mean.len();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            for (m, v) in self.mean.iter().zip(&self.var) {
                let e: f64 = rng.sample(StandardNormal);
                data.push(m + v.sqrt() * e);
            }
        }
        Ok(Tensor::matrix(n, d, data))
    }
}

fn clamped_prob(tape: &mut Tape, disc: &MlpVars, z: Var) -> Result<Var> {
    let logit = disc.forward(tape, z)?;
    let p = tape.sigmoid(logit);
    Ok(tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP))
}

/// `(1/n) Σ log(1 − d(z_new))`; pass `disc` registered as constants so only
/// the codes receive gradient.
pub fn adversarial_policy_term_on_tape(tape: &mut Tape, disc: &MlpVars, z_new: Var) -> Result<Var> {
    let p = clamped_prob(tape, disc, z_new)?;
    let q = tape.affine(p, -1.0, 1.0);
    let lq = tape.log(q);
    Ok(tape.mean(lq))
}

/// `−(1/n) Σ [log d(ẑ) + log(1 − d(z_new))]` with both code sets as data.
pub fn discriminator_loss_on_tape(
    tape: &mut Tape,
    disc: &MlpVars,
    prior_codes: &Tensor,
    z_new: &Tensor,
) -> Result<Var> {
    let n = z_new.dims2().0;
    if prior_codes.dims2().0 != n {
        return Err(Error::Dimension(format!(
            "{} prior codes for {n} generated codes",
            prior_codes.dims2().0
        )));
    }
    let real = tape.constant(prior_codes.clone());
    let fake = tape.constant(z_new.clone());
    let pr = clamped_prob(tape, disc, real)?;
    let log_real = tape.log(pr);
    let pf = clamped_prob(tape, disc, fake)?;
    let qf = tape.affine(pf, -1.0, 1.0);
    let log_fake = tape.log(qf);
    let both = tape.add(log_real, log_fake)?;
    let total = tape.sum(both);
    Ok(tape.scale(total, -1.0 / n as f64))
}

/// Values of `(policy_term, discriminator_term)` with `n` fresh prior draws.
pub fn adversarial_losses(
    bundle: &ModelBundle,
    stats: &PriorStats,
    z_new: &Tensor,
    rng: &mut impl Rng,
) -> Result<(f64, f64)> {
    let n = z_new.dims2().0;
    if n == 0 {
        return Err(Error::Contract("adversarial losses need generated codes".into()));
    }
    let prior = stats.sample(n, rng)?;
    let mut tape = Tape::new();
    let disc = bundle.discriminator.on_tape(&mut tape, false);
    let z = tape.constant(z_new.clone());
    let policy = adversarial_policy_term_on_tape(&mut tape, &disc, z)?;
    let d_loss = discriminator_loss_on_tape(&mut tape, &disc, &prior, z_new)?;
    Ok((tape.value(policy).item(), tape.value(d_loss).item()))
}

/// Frozen inputs to the policy objective of one iteration.
#[derive(Clone, Copy, Debug)]
pub struct PolicyInputs<'a> {
    /// Latent codes of the whole batch, `[|B| × latent]`.
    pub codes: &'a Tensor,
    /// Instance gradients of the batch, `[|B| × |φ|]`.
    pub grads: &'a Tensor,
    pub plan: &'a MixupPlan,
    pub classifier: &'a Linear,
    pub neighbours: &'a [NeighbourSample],
    /// Present for the adversarial variant.
    pub discriminator: Option<&'a Mlp>,
    pub lambda: f64,
}

/// Value and `ω`-gradient of `L_flat (+ adversarial policy term)`.
#[derive(Clone, Debug)]
pub struct PolicyObjective {
    pub loss: f64,
    pub flat: f64,
    pub adv: Option<f64>,
    /// Weights produced by the policy before any update.
    pub weights: MixupWeights,
    pub z_new: Tensor,
    /// One tensor per policy parameter, in [`Mlp::tensors`] order.
    pub grads: Vec<Tensor>,
}

/// Runs the policy, mixes the codes and evaluates its objective. The label
/// weights `a` inside the flatness loss are data: they default to the
/// policy's own output, or `fixed_a` when given (finite-difference checks
/// hold them fixed while perturbing `ω`).
pub fn policy_objective(
    policy: &Mlp,
    inputs: &PolicyInputs<'_>,
    fixed_a: Option<&Tensor>,
) -> Result<PolicyObjective> {
    let mut tape = Tape::new();
    let vars = policy.on_tape(&mut tape, true);
    let lw = mixup::learned_weights_on_tape(&mut tape, &vars, inputs.grads, inputs.plan, inputs.lambda)?;
    let weights = MixupWeights {
        scores: tape.value(lw.scores).clone(),
        a: tape.value(lw.a).clone(),
        a_tilde: tape.value(lw.a_tilde).clone(),
    };
    let mixing = tape.scatter(lw.a_tilde, inputs.plan.rows.clone(), inputs.codes.dims2().0)?;
    let z = tape.constant(inputs.codes.clone());
    let z_new = tape.matmul(mixing, z)?;
    let a = fixed_a.unwrap_or(&weights.a);
    let flat = flatness_loss_on_tape(
        &mut tape,
        z_new,
        &inputs.plan.labels,
        a,
        inputs.classifier,
        inputs.neighbours,
    )?;
    let flat_value = tape.value(flat).item();
    let (loss, adv) = match inputs.discriminator {
        Some(d) => {
            let dv = d.on_tape(&mut tape, false);
            let adv = adversarial_policy_term_on_tape(&mut tape, &dv, z_new)?;
            let adv_value = tape.value(adv).item();
            (tape.add(flat, adv)?, Some(adv_value))
        }
        None => (flat, None),
    };
    let g = tape.backward(loss)?;
    let grads = vars
        .vars()
        .into_iter()
        .zip(policy.tensors())
        .map(|(v, p)| g.get_or_zeros(v, &p))
        .collect();
    Ok(PolicyObjective {
        loss: tape.value(loss).item(),
        flat: flat_value,
        adv,
        weights,
        z_new: tape.value(z_new).clone(),
        grads,
    })
}

/// Value and gradient of the discriminator loss.
pub fn discriminator_objective(
    disc: &Mlp,
    prior_codes: &Tensor,
    z_new: &Tensor,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = disc.on_tape(&mut tape, true);
    let l = discriminator_loss_on_tape(&mut tape, &vars, prior_codes, z_new)?;
    let g = tape.backward(l)?;
    let grads = vars
        .vars()
        .into_iter()
        .zip(disc.tensors())
        .map(|(v, p)| g.get_or_zeros(v, &p))
        .collect();
    Ok((tape.value(l).item(), grads))
}

/// Mean cross-entropy and argmax accuracy of `classifier` on codes.
pub fn loss_and_accuracy(classifier: &Linear, codes: &Tensor, labels: &[usize]) -> Result<(f64, f64)> {
    let logits = classifier.eval(codes)?;
    let logp = tensor::log_softmax_rows(&logits);
    let (n, c) = logits.dims2();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (r, &y) in labels.iter().enumerate() {
        loss -= logp.data()[r * c + y];
        let row = logits.row(r);
        let mut best = 0;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    Ok((loss / n as f64, correct as f64 / n as f64))
}
