//! Gradient-guided mixup weights.
//!
//! For each mixup sample one instance is drawn from every source domain.
//! Each instance's classifier gradient is scored against the others, the
//! scores go through a softmax, and the softmax weights are scaled and
//! shifted so the mixed latent code can leave the convex hull of its
//! sources. The loss of a mixed code always uses the unshifted weights.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Exp1;

use crate::autodiff::{Tape, Var};
use crate::datasets::Batch;
use crate::error::{dim_err, Error, Result};
use crate::models::{Linear, MlpVars, ModelBundle};
use crate::tensor::{self, dot, norm, Tensor};
use crate::trainer::Variant;

/// `∂ CE(y, h_φ(z)) / ∂φ` in flat layout: weight rows (one per class) then bias.
pub fn instance_gradient(classifier: &Linear, z: &[f64], y: usize) -> Result<Vec<f64>> {
    let c = classifier.out_dim();
    if y >= c {
        return Err(Error::Index(format!("label {y} with {c} classes")));
    }
    if z.len() != classifier.in_dim() {
        return Err(dim_err(format!(
            "latent width {} for classifier input {}",
            z.len(),
            classifier.in_dim()
        )));
    }
    let logits = classifier.eval(&Tensor::matrix(1, z.len(), z.to_vec()))?;
    let mut delta = logits.into_data();
    tensor::softmax_in_place(&mut delta);
    delta[y] -= 1.0;
    let mut g = Vec::with_capacity(c * z.len() + c);
    for d in &delta {
        g.extend(z.iter().map(|zi| d * zi));
    }
    g.extend_from_slice(&delta);
    Ok(g)
}

/// Instance gradients for every row of `codes`: `[B × |φ|]`.
pub fn instance_gradients(classifier: &Linear, codes: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, _) = codes.dims2();
    let p = classifier.num_params();
    let mut data = Vec::with_capacity(b * p);
    for (r, &y) in labels.iter().enumerate() {
        data.extend(instance_gradient(classifier, codes.row(r), y)?);
    }
    Ok(Tensor::matrix(b, p, data))
}

/// Cosine similarity; zero when either vector vanishes.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = norm(a) * norm(b);
    if denom == 0.0 {
        0.0
    } else {
        dot(a, b) / denom
    }
}

/// `s_i = Σ_{j≠i} sim(g_i, g_j)`.
pub fn scores<F>(mut sim: F, gradients: &[Vec<f64>]) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &[f64]) -> Result<f64>,
{
    let k = gradients.len();
    if k < 2 {
        return Err(Error::Contract(format!("scores need k ≥ 2, got {k}")));
    }
    let mut s = vec![0.0; k];
    for i in 0..k {
        for j in 0..k {
            if i != j {
                s[i] += sim(&gradients[i], &gradients[j])?;
            }
        }
    }
    Ok(s)
}

pub fn softmax_weights(scores: &[f64]) -> Vec<f64> {
    let mut a = scores.to_vec();
    tensor::softmax_in_place(&mut a);
    a
}

/// `ã_i = λ a_i − (λ − 1)/k`.
pub fn scale_shift(a: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    let shift = (lambda - 1.0) / a.len() as f64;
    Ok(a.iter().map(|&ai| lambda * ai - shift).collect())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_nan() || lambda < 1.0 {
        return Err(Error::Config(format!("scaling factor must be ≥ 1, got {lambda}")));
    }
    Ok(())
}

/// `z_new = Σ ã_i z_i`.
pub fn mix(codes: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if codes.len() != weights.len() || codes.is_empty() {
        return Err(Error::Contract(format!(
            "{} codes but {} weights",
            codes.len(),
            weights.len()
        )));
    }
    let d = codes[0].len();
    let mut z = vec![0.0; d];
    for (code, &w) in codes.iter().zip(weights) {
        if code.len() != d {
            return Err(dim_err("codes differ in width".to_string()));
        }
        for (acc, v) in z.iter_mut().zip(code) {
            *acc += w * v;
        }
    }
    Ok(z)
}

/// `l_new = Σ a_i CE(y_i, h_φ(z_new))`.
pub fn mix_loss(classifier: &Linear, z_new: &[f64], labels: &[usize], a: &[f64]) -> Result<f64> {
    if labels.len() != a.len() {
        return Err(Error::Contract(format!(
            "{} labels but {} weights",
            labels.len(),
            a.len()
        )));
    }
    let logits = classifier.eval(&Tensor::matrix(1, z_new.len(), z_new.to_vec()))?;
    let logp = tensor::log_softmax_rows(&logits);
    let c = classifier.out_dim();
    let mut l = 0.0;
    for (&y, &w) in labels.iter().zip(a) {
        if y >= c {
            return Err(Error::Index(format!("label {y} with {c} classes")));
        }
        l -= w * logp.data()[y];
    }
    Ok(l)
}

/// Tape version of [`mix_loss`] for a block of mixed codes: returns `[n]`.
pub fn mix_losses_on_tape(
    tape: &mut Tape,
    logits: Var,
    labels: &[Vec<usize>],
    a: Var,
) -> Result<Var> {
    let logp = tape.log_softmax_rows(logits);
    let picked = tape.gather(logp, labels.to_vec())?;
    let neg = tape.scale(picked, -1.0);
    let weighted = tape.mul(neg, a)?;
    Ok(tape.sum_rows(weighted))
}

/// Which batch rows feed each mixup sample: `rows[j][i]` is the row taken
/// from source domain `i` for sample `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupPlan {
    pub rows: Vec<Vec<usize>>,
    pub labels: Vec<Vec<usize>>,
}

impl MixupPlan {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn k(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

/// One instance per domain per sample, without replacement within each
/// sub-batch; a fresh shuffle starts whenever a sub-batch is used up.
pub fn plan_mixup(batch: &Batch, n: usize, rng: &mut impl Rng) -> Result<MixupPlan> {
    if n == 0 {
        return Err(Error::Contract("need at least one mixup sample".into()));
    }
    if batch.ranges.iter().any(|r| r.is_empty()) {
        return Err(Error::Contract("empty domain sub-batch".into()));
    }
    let k = batch.num_domains();
    let mut rows = vec![Vec::with_capacity(k); n];
    for range in &batch.ranges {
        let mut order: Vec<usize> = range.clone().collect();
        order.shuffle(rng);
        let mut cursor = 0;
        for sample in rows.iter_mut() {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            sample.push(order[cursor]);
            cursor += 1;
        }
    }
    let labels = rows
        .iter()
        .map(|r| r.iter().map(|&i| batch.labels[i]).collect())
        .collect();
    Ok(MixupPlan { rows, labels })
}

/// Like [`plan_mixup`] but every sample draws all sources from one class.
/// Only classes present in every sub-batch are eligible.
pub fn plan_same_class(batch: &Batch, n: usize, rng: &mut impl Rng) -> Result<MixupPlan> {
    if n == 0 {
        return Err(Error::Contract("need at least one mixup sample".into()));
    }
    let classes: Vec<usize> = {
        let mut c: Vec<usize> = batch.labels.clone();
        c.sort_unstable();
        c.dedup();
        c.into_iter()
            .filter(|&y| {
                batch
                    .ranges
                    .iter()
                    .all(|r| r.clone().any(|i| batch.labels[i] == y))
            })
            .collect()
    };
    if classes.is_empty() {
        return Err(Error::Contract("no class is present in every domain".into()));
    }
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let y = classes[rng.gen_range(0..classes.len())];
        let pick = batch
            .ranges
            .iter()
            .map(|r| {
                let members: Vec<usize> = r.clone().filter(|&i| batch.labels[i] == y).collect();
                members[rng.gen_range(0..members.len())]
            })
            .collect();
        rows.push(pick);
    }
    let labels = rows
        .iter()
        .map(|r: &Vec<usize>| r.iter().map(|&i| batch.labels[i]).collect())
        .collect();
    Ok(MixupPlan { rows, labels })
}

/// Mixup weights for a whole plan, `[n × k]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupWeights {
    pub scores: Tensor,
    pub a: Tensor,
    pub a_tilde: Tensor,
}

/// Uniform-over-simplex weights: normalized unit exponentials.
pub fn dirichlet_uniform(k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Weights for the non-learned variants (and plain evaluation of the
/// learned one). `codes` and `grads` are indexed by batch row.
pub fn compute_weights(
    bundle: &ModelBundle,
    variant: Variant,
    codes: &Tensor,
    grads: &Tensor,
    plan: &MixupPlan,
    lambda: f64,
    rng: &mut impl Rng,
) -> Result<MixupWeights> {
    check_lambda(lambda)?;
    let spec = variant.spec();
    let n = plan.len();
    let k = plan.k();
    let mut s_all = Vec::with_capacity(n * k);
    let mut a_all = Vec::with_capacity(n * k);
    let mut at_all = Vec::with_capacity(n * k);
    for rows in &plan.rows {
        let (s, a) = if !spec.similarity_based_weights {
            (vec![0.0; k], dirichlet_uniform(k, rng))
        } else {
            let source = if spec.gradient_based_similarity { grads } else { codes };
            let vecs: Vec<Vec<f64>> = rows.iter().map(|&r| source.row(r).to_vec()).collect();
            let s = if spec.flat_loss {
                scores(|x, y| bundle.similarity(x, y), &vecs)?
            } else {
                scores(|x, y| Ok(cosine(x, y)), &vecs)?
            };
            let a = softmax_weights(&s);
            (s, a)
        };
        let at = if spec.scale_shift {
            scale_shift(&a, lambda)?
        } else {
            a.clone()
        };
        s_all.extend(s);
        a_all.extend(a);
        at_all.extend(at);
    }
    Ok(MixupWeights {
        scores: Tensor::matrix(n, k, s_all),
        a: Tensor::matrix(n, k, a_all),
        a_tilde: Tensor::matrix(n, k, at_all),
    })
}

/// Variables produced when the learned policy runs on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LearnedWeights {
    pub scores: Var,
    pub a: Var,
    pub a_tilde: Var,
}

/// Records scores → softmax → scale/shift for every sample of `plan`,
/// with the gradients entering as constants.
pub fn learned_weights_on_tape(
    tape: &mut Tape,
    policy: &MlpVars,
    grads: &Tensor,
    plan: &MixupPlan,
    lambda: f64,
) -> Result<LearnedWeights> {
    check_lambda(lambda)?;
    let n = plan.len();
    let k = plan.k();
    if k < 2 {
        return Err(Error::Contract(format!("scores need k ≥ 2, got {k}")));
    }
    let p = grads.dims2().1;
    let pairs = n * k * (k - 1);
    let mut input = Vec::with_capacity(pairs * 2 * p);
    let mut seg = Vec::with_capacity(pairs);
    for (j, rows) in plan.rows.iter().enumerate() {
        for (i, &ri) in rows.iter().enumerate() {
            for (jj, &rj) in rows.iter().enumerate() {
                if i == jj {
                    continue;
                }
                input.extend_from_slice(grads.row(ri));
                input.extend_from_slice(grads.row(rj));
                seg.push(j * k + i);
            }
        }
    }
    let x = tape.constant(Tensor::matrix(pairs, 2 * p, input));
    let sim = policy.forward(tape, x)?;
    let summed = tape.segment_sum(sim, seg, n * k)?;
    let scores = tape.reshape(summed, vec![n, k])?;
    let a = tape.softmax_rows(scores);
    let a_tilde = tape.affine(a, lambda, -(lambda - 1.0) / k as f64);
    Ok(LearnedWeights { scores, a, a_tilde })
}

/// `[n × |B|]` matrix placing each sample's weights on its source rows, so
/// that `M · Z` yields all mixed codes.
pub fn mixing_matrix(plan: &MixupPlan, weights: &Tensor, batch_len: usize) -> Tensor {
    let k = plan.k();
    let mut m = vec![0.0; plan.len() * batch_len];
    for (j, rows) in plan.rows.iter().enumerate() {
        for (i, &r) in rows.iter().enumerate() {
            m[j * batch_len + r] += weights.data()[j * k + i];
        }
    }
    Tensor::matrix(plan.len(), batch_len, m)
}

/// Mixed codes `[n × latent]` from batch codes and shifted weights.
pub fn mixed_codes(plan: &MixupPlan, a_tilde: &Tensor, codes: &Tensor) -> Result<Tensor> {
    tensor::matmul(&mixing_matrix(plan, a_tilde, codes.dims2().0), codes)
}

/// A fully materialized mixup sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupSample {
    pub sources: Vec<usize>,
    pub codes: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub scores: Vec<f64>,
    pub a: Vec<f64>,
    pub a_tilde: Vec<f64>,
    pub z_new: Vec<f64>,
}

pub fn materialize(plan: &MixupPlan, w: &MixupWeights, codes: &Tensor) -> Result<Vec<MixupSample>> {
    plan.rows
        .iter()
        .enumerate()
        .map(|(j, rows)| {
            let zs: Vec<Vec<f64>> = rows.iter().map(|&r| codes.row(r).to_vec()).collect();
            let a_tilde = w.a_tilde.row(j).to_vec();
            let z_new = mix(&zs, &a_tilde)?;
            Ok(MixupSample {
                sources: rows.clone(),
                codes: zs,
                labels: plan.labels[j].clone(),
                scores: w.scores.row(j).to_vec(),
                a: w.a.row(j).to_vec(),
                a_tilde,
                z_new,
            })
        })
        .collect()
}

/// Draws `n` mixup samples from `batch` using `variant`'s weighting.
pub fn generate_batch(
    bundle: &ModelBundle,
    batch: &Batch,
    variant: Variant,
    lambda: f64,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<MixupSample>> {
    if variant == Variant::Erm {
        return Err(Error::Contract("ERM generates no mixup samples".into()));
    }
    let codes = bundle.extract(&batch.x)?;
    let grads = instance_gradients(&bundle.classifier, &codes, &batch.labels)?;
    let plan = plan_mixup(batch, n, rng)?;
    let w = compute_weights(bundle, variant, &codes, &grads, &plan, lambda, rng)?;
    materialize(&plan, &w, &codes)
}

pub const DEBUG_HEADER: &str = "iter,sample,i,s_i,a_i,ã_i";

/// Rows of the weight audit dump for one iteration.
pub fn debug_rows(iter: usize, w: &MixupWeights) -> String {
    let (n, k) = w.a.dims2();
    let mut out = String::new();
    for j in 0..n {
        for i in 0..k {
            let idx = j * k + i;
            let _ = writeln!(
                out,
                "{iter},{j},{i},{:?},{:?},{:?}",
                w.scores.data()[idx],
                w.a.data()[idx],
                w.a_tilde.data()[idx]
            );
        }
    }
    out
}
