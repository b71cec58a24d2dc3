#![allow(dead_code)]

use fgmix::autodiff::{Tape, Var};
use fgmix::datasets::{make_rotated_domains, BatchSampler, RotatedDomains};
use fgmix::mixup::{self, plan_mixup};
use fgmix::models::{ModelBundle, ModelDims};
use fgmix::objectives::{self, sample_neighbour};
use fgmix::tensor::Tensor;
use fgmix::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Finite-difference step.
pub const H: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central finite differences of `f` at `x`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
pub fn std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Relative error of `∂ Σ(R ∘ f(x)) / ∂x` against central differences, with
/// a fixed random `R`.
pub fn unary_grad_error(x: Tensor, seed: u64, f: impl Fn(&mut Tape, Var) -> Result<Var>) -> f64 {
    let shape = x.shape().to_vec();
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv).unwrap();
    let out_shape = tape.value(y).shape().to_vec();
    let r = uniform(&mut rng(seed ^ 0xabc), &out_shape, -1.0, 1.0);
    let rv = tape.constant(r.clone());
    let prod = tape.mul(y, rv).unwrap();
    let loss = tape.sum(prod);
    let g = tape.backward(loss).unwrap();
    let analytic = g.get_or_zeros(xv, &x).into_data();
    let numeric = central_diff(x.data(), H, |p| {
        let mut t = Tape::new();
        let xv = t.constant(Tensor::new(shape.clone(), p.to_vec()).unwrap());
        let y = f(&mut t, xv).unwrap();
        t.value(y).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    });
    rel_err(&analytic, &numeric)
}

/// A realistic policy problem: a batch from the rotated benchmark, a
/// partially trained-looking random bundle, a plan and neighbours.
pub struct PolicyFixture {
    pub bundle: ModelBundle,
    pub codes: Tensor,
    pub grads: Tensor,
    pub plan: mixup::MixupPlan,
    pub neighbours: Vec<objectives::NeighbourSample>,
}

pub fn policy_fixture(seed: u64) -> PolicyFixture {
    let p = RotatedDomains {
        samples_per_domain: 40,
        seed,
        ..Default::default()
    };
    let data = make_rotated_domains(3, &p).unwrap();
    let dims = ModelDims {
        input_dim: 2,
        latent_dim: 4,
        num_classes: 2,
        hidden: 8,
    };
    let bundle = ModelBundle::init(dims, seed).unwrap();
    let mut sampler = BatchSampler::new(&data.train, seed);
    let batch = sampler.next_batch(&data.train, 4);
    let codes = bundle.extract(&batch.x).unwrap();
    let grads = mixup::instance_gradients(&bundle.classifier, &codes, &batch.labels).unwrap();
    let mut g = rng(seed);
    let plan = plan_mixup(&batch, 5, &mut g).unwrap();
    let phi = bundle.classifier.flat();
    let neighbours = (0..10).map(|_| sample_neighbour(&phi, 1.0, &mut g).unwrap()).collect();
    PolicyFixture {
        bundle,
        codes,
        grads,
        plan,
        neighbours,
    }
}

