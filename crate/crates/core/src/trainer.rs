//! The training loop: plain ERM until the policy start iteration, then
//! mixup with per-variant weighting, policy and discriminator updates, and
//! optional weight averaging.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::datasets::{BatchSampler, DomainDataset, MultiDomainSplit};
use crate::error::{Error, Result};
use crate::mixup::{self, MixupWeights};
use crate::models::{ModelBundle, ModelDims, DEFAULT_HIDDEN};
use crate::objectives::{self, MixupTerms, PolicyInputs, PriorStats, DEFAULT_PRIOR_MOMENTUM};
use crate::tensor::Tensor;

/// Ablation ladder plus plain ERM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Erm,
    /// Dirichlet weights.
    A,
    /// Cosine similarity of latent codes.
    B,
    /// Cosine similarity of classifier gradients.
    C,
    /// `C` with scale-and-shift.
    D,
    /// Learned similarity trained on the flatness loss.
    E,
    /// `E` plus adversarial prior matching.
    FgMix,
}

impl Variant {
    pub const LADDER: [Variant; 6] = [
        Variant::A,
        Variant::B,
        Variant::C,
        Variant::D,
        Variant::E,
        Variant::FgMix,
    ];

    pub fn spec(self) -> VariantSpec {
        let rung = match self {
            Variant::Erm | Variant::A => 0,
            Variant::B => 1,
            Variant::C => 2,
            Variant::D => 3,
            Variant::E => 4,
            Variant::FgMix => 5,
        };
        VariantSpec {
            similarity_based_weights: rung >= 1,
            gradient_based_similarity: rung >= 2,
            scale_shift: rung >= 3,
            flat_loss: rung >= 4,
            adv_loss: rung >= 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Erm => "ERM",
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
            Variant::D => "D",
            Variant::E => "E",
            Variant::FgMix => "FGMIX",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ERM" => Ok(Variant::Erm),
            "A" => Ok(Variant::A),
            "B" => Ok(Variant::B),
            "C" => Ok(Variant::C),
            "D" => Ok(Variant::D),
            "E" => Ok(Variant::E),
            "FGMIX" => Ok(Variant::FgMix),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// Components switched on by a variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VariantSpec {
    pub similarity_based_weights: bool,
    pub gradient_based_similarity: bool,
    pub scale_shift: bool,
    pub flat_loss: bool,
    pub adv_loss: bool,
}

impl VariantSpec {
    pub fn flags(&self) -> [bool; 5] {
        [
            self.similarity_based_weights,
            self.gradient_based_similarity,
            self.scale_shift,
            self.flat_loss,
            self.adv_loss,
        ]
    }

    /// Every component of `self` is also on in `other`.
    pub fn is_subset_of(&self, other: &VariantSpec) -> bool {
        self.flags().iter().zip(other.flags()).all(|(a, b)| !a || b)
    }
}

/// Hyper-parameters of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Total iterations `T`.
    pub total_iters: usize,
    /// First iteration (1-based) that uses mixup, `τ`.
    pub policy_start: usize,
    /// Mixup samples per iteration, `n`.
    pub mixup_per_iter: usize,
    /// Base learning rate `α`.
    pub lr: f64,
    /// Policy and discriminator learning rate `β`.
    pub policy_lr: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub mc_samples: usize,
    pub variant: Variant,
    pub swa_enabled: bool,
    pub swa_start: usize,
    pub seed: u64,
    /// Per-domain sub-batch size.
    pub batch_size: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub prior_momentum: f64,
    /// Validation/target evaluation period; rows in between repeat the
    /// last evaluation.
    pub eval_every: usize,
    /// Trajectory snapshot period for path projection; 0 disables.
    pub path_every: usize,
    /// Keep the per-iteration weight audit rows.
    pub debug_weights: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            total_iters: 2000,
            policy_start: 1200,
            mixup_per_iter: 32,
            lr: 0.1,
            policy_lr: 1e-3,
            lambda: 5.0,
            gamma: 1.0,
            mc_samples: 100,
            variant: Variant::FgMix,
            swa_enabled: true,
            swa_start: 100,
            seed: 0,
            batch_size: 32,
            latent_dim: 8,
            hidden: DEFAULT_HIDDEN,
            prior_momentum: DEFAULT_PRIOR_MOMENTUM,
            eval_every: 1,
            path_every: 20,
            debug_weights: false,
        }
    }
}

impl RunConfig {
    /// Checks invariants. `policy_start > total_iters` is allowed and means
    /// the run never leaves the ERM phase.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.total_iters == 0 {
            return fail("total_iters must be ≥ 1".into());
        }
        if self.policy_start == 0 {
            return fail("policy_start must be ≥ 1".into());
        }
        if self.mixup_per_iter == 0 {
            return fail("mixup_per_iter must be ≥ 1".into());
        }
        if self.lambda.is_nan() || self.lambda < 1.0 {
            return fail(format!("lambda must be ≥ 1, got {}", self.lambda));
        }
        if self.gamma.is_nan() || self.gamma <= 0.0 {
            return fail(format!("gamma must be > 0, got {}", self.gamma));
        }
        if self.mc_samples == 0 {
            return fail("mc_samples must be ≥ 1".into());
        }
        if self.batch_size == 0 || self.latent_dim == 0 || self.hidden == 0 {
            return fail("batch_size, latent_dim and hidden must be ≥ 1".into());
        }
        if !(self.lr > 0.0) || !(self.policy_lr > 0.0) {
            return fail("learning rates must be > 0".into());
        }
        if !(self.prior_momentum > 0.0 && self.prior_momentum < 1.0) {
            return fail(format!("prior_momentum {} not in (0, 1)", self.prior_momentum));
        }
        if self.eval_every == 0 {
            return fail("eval_every must be ≥ 1".into());
        }
        Ok(())
    }

    pub fn dims(&self, data: &MultiDomainSplit) -> ModelDims {
        ModelDims {
            input_dim: data.input_dim(),
            latent_dim: self.latent_dim,
            num_classes: data.num_classes,
            hidden: self.hidden,
        }
    }
}

/// Running arithmetic mean of flat parameter snapshots.
#[derive(Clone, Debug, PartialEq)]
pub struct SwaState {
    pub avg: Vec<f64>,
    pub count: usize,
    pub start: usize,
}

impl SwaState {
    pub fn new(start: usize) -> Self {
        Self {
            avg: Vec::new(),
            count: 0,
            start,
        }
    }

    /// `avg ← avg + (snapshot − avg)/(count + 1)`.
    pub fn absorb(&mut self, snapshot: &[f64]) -> Result<()> {
        if self.count == 0 {
            self.avg = snapshot.to_vec();
            self.count = 1;
            return Ok(());
        }
        if snapshot.len() != self.avg.len() {
            return Err(Error::Dimension(format!(
                "snapshot of {} for an average of {}",
                snapshot.len(),
                self.avg.len()
            )));
        }
        let c = (self.count + 1) as f64;
        for (a, s) in self.avg.iter_mut().zip(snapshot) {
            *a += (s - *a) / c;
        }
        self.count += 1;
        Ok(())
    }
}

/// Accuracy (argmax, ties to the lowest class) and mean cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

pub fn evaluate(bundle: &ModelBundle, set: &DomainDataset) -> Result<Evaluation> {
    if set.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty split".into()));
    }
    let codes = bundle.extract(&set.features)?;
    let (loss, accuracy) = objectives::loss_and_accuracy(&bundle.classifier, &codes, &set.labels)?;
    Ok(Evaluation { accuracy, loss })
}

/// Losses recorded by one step; absent terms are `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepMetrics {
    pub loss_base: f64,
    pub loss_flat: Option<f64>,
    pub loss_adv: Option<f64>,
    pub loss_disc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub iter: usize,
    pub variant: Variant,
    pub step: StepMetrics,
    pub val_acc: Vec<f64>,
    pub target_acc: f64,
}

/// Counters proving which machinery ran.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Instrumentation {
    pub mixup_generations: usize,
    pub policy_updates: usize,
    pub discriminator_updates: usize,
    pub target_rows_consumed: usize,
    pub source_rows_consumed: usize,
}

/// Mutable state of a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub bundle: ModelBundle,
    pub prior: PriorStats,
    pub swa: Option<SwaState>,
    pub sampler: BatchSampler,
    pub instrumentation: Instrumentation,
    pub debug_rows: String,
}

const MIX_STREAM: u64 = 0x6d69_7875_7000_0003;

/// Independent generator for iteration `t`'s mixup randomness.
pub fn iteration_rng(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ MIX_STREAM);
    rng.set_stream(t as u64);
    rng
}

impl TrainState {
    pub fn new(cfg: &RunConfig, data: &MultiDomainSplit) -> Result<Self> {
        cfg.validate()?;
        let bundle = ModelBundle::init(cfg.dims(data), cfg.seed)?;
        Ok(Self {
            bundle,
            prior: PriorStats::new(cfg.latent_dim, cfg.prior_momentum)?,
            swa: cfg.swa_enabled.then(|| SwaState::new(cfg.swa_start)),
            sampler: BatchSampler::new(&data.train, cfg.seed),
            instrumentation: Instrumentation::default(),
            debug_rows: String::new(),
        })
    }

    /// Bundle whose extractor and classifier hold the SWA average.
    pub fn swa_bundle(&self) -> Result<Option<ModelBundle>> {
        match &self.swa {
            Some(s) if s.count > 0 => {
                let mut b = self.bundle.clone();
                b.set_base_flat(&s.avg)?;
                Ok(Some(b))
            }
            _ => Ok(None),
        }
    }
}

fn numerical(network: &str, term: &str, iteration: usize) -> impl Fn(Error) -> Error {
    let (network, term) = (network.to_string(), term.to_string());
    move |_| Error::Numerical {
        network: network.clone(),
        term: term.clone(),
        iteration,
    }
}

/// One iteration `t` (1-based).
pub fn train_step(
    state: &mut TrainState,
    cfg: &RunConfig,
    data: &MultiDomainSplit,
    t: usize,
) -> Result<StepMetrics> {
    let batch = state.sampler.next_batch(&data.train, cfg.batch_size);
    let target = data.target_id();
    let leaked = batch.domains.iter().filter(|&&d| d == target).count();
    state.instrumentation.target_rows_consumed += leaked;
    state.instrumentation.source_rows_consumed += batch.len() - leaked;

    let mut metrics = StepMetrics::default();
    let use_mixup = cfg.variant != Variant::Erm && t >= cfg.policy_start;

    let weights: Option<(mixup::MixupPlan, MixupWeights)> = if use_mixup {
        state.instrumentation.mixup_generations += 1;
        let spec = cfg.variant.spec();
        let mut rng = iteration_rng(cfg.seed, t);
        let bundle = &state.bundle;
        let codes = bundle.extract(&batch.x)?;
        let grads = mixup::instance_gradients(&bundle.classifier, &codes, &batch.labels)?;
        let plan = mixup::plan_mixup(&batch, cfg.mixup_per_iter, &mut rng)?;

        let w = if spec.flat_loss {
            if spec.adv_loss {
                state.prior.update(&codes)?;
            }
            let phi = bundle.classifier.flat();
            let neighbours = (0..cfg.mc_samples)
                .map(|_| objectives::sample_neighbour(&phi, cfg.gamma, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let inputs = PolicyInputs {
                codes: &codes,
                grads: &grads,
                plan: &plan,
                classifier: &bundle.classifier,
                neighbours: &neighbours,
                discriminator: spec.adv_loss.then_some(&bundle.discriminator),
                lambda: cfg.lambda,
            };
            let obj = objectives::policy_objective(&bundle.policy, &inputs, None)?;
            metrics.loss_flat = Some(obj.flat);
            metrics.loss_adv = obj.adv;
            let policy_grads = obj.grads;
            let w = obj.weights;

            let disc_grads = if spec.adv_loss {
                let prior = state.prior.sample(plan.len(), &mut rng)?;
                let (l_d, g) = objectives::discriminator_objective(&bundle.discriminator, &prior, &obj.z_new)?;
                metrics.loss_disc = Some(l_d);
                Some(g)
            } else {
                None
            };

            let term = if spec.adv_loss { "policy loss (flat + adv)" } else { "flatness loss" };
            state
                .bundle
                .policy
                .sgd_step(&policy_grads, cfg.policy_lr)
                .map_err(numerical("policy", term, t))?;
            state.instrumentation.policy_updates += 1;
            if let Some(g) = disc_grads {
                state
                    .bundle
                    .discriminator
                    .sgd_step(&g, cfg.policy_lr)
                    .map_err(numerical("discriminator", "discriminator loss", t))?;
                state.instrumentation.discriminator_updates += 1;
            }
            w
        } else {
            mixup::compute_weights(bundle, cfg.variant, &codes, &grads, &plan, cfg.lambda, &mut rng)?
        };
        if cfg.debug_weights {
            state.debug_rows.push_str(&mixup::debug_rows(t, &w));
        }
        Some((plan, w))
    } else {
        None
    };

    let terms = weights.as_ref().map(|(plan, w)| MixupTerms {
        plan,
        a: &w.a,
        a_tilde: &w.a_tilde,
    });
    let mut tape = Tape::new();
    let base = objectives::base_loss_on_tape(&mut tape, &state.bundle, &batch, terms)?;
    metrics.loss_base = tape.value(base.loss).item();
    let g = tape.backward(base.loss)?;
    let ext_grads: Vec<Tensor> = base
        .extractor
        .vars()
        .into_iter()
        .zip(state.bundle.extractor.tensors())
        .map(|(v, p)| g.get_or_zeros(v, &p))
        .collect();
    let cw = g.get_or_zeros(base.classifier.weight, &state.bundle.classifier.weight);
    let cb = g.get_or_zeros(base.classifier.bias, &state.bundle.classifier.bias);
    let on_err = numerical("extractor/classifier", "base loss", t);
    state.bundle.extractor.sgd_step(&ext_grads, cfg.lr).map_err(&on_err)?;
    state.bundle.classifier.weight.sgd_step(&cw, cfg.lr).map_err(&on_err)?;
    state.bundle.classifier.bias.sgd_step(&cb, cfg.lr).map_err(&on_err)?;

    if let Some(swa) = state.swa.as_mut() {
        if t >= swa.start {
            swa.absorb(&state.bundle.base_flat())?;
        }
    }
    Ok(metrics)
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct TrainedResult {
    pub config: RunConfig,
    pub init_bundle: ModelBundle,
    pub final_bundle: ModelBundle,
    pub swa_bundle: Option<ModelBundle>,
    pub metrics: Vec<MetricRow>,
    /// `(iteration, θ ⊕ φ)` snapshots, starting at iteration 0.
    pub trajectory: Vec<(usize, Vec<f64>)>,
    /// Snapshots of the running SWA average at the same cadence.
    pub swa_trajectory: Vec<(usize, Vec<f64>)>,
    pub instrumentation: Instrumentation,
    pub debug_rows: String,
}

impl TrainedResult {
    pub fn final_target(&self, data: &MultiDomainSplit) -> Result<Evaluation> {
        evaluate(&self.final_bundle, &data.target)
    }

    pub fn swa_target(&self, data: &MultiDomainSplit) -> Result<Option<Evaluation>> {
        self.swa_bundle
            .as_ref()
            .map(|b| evaluate(b, &data.target))
            .transpose()
    }
}

/// Runs `T` iterations of [`train_step`].
pub fn run(cfg: &RunConfig, data: &MultiDomainSplit) -> Result<TrainedResult> {
    let mut state = TrainState::new(cfg, data)?;
    let init_bundle = state.bundle.clone();
    let mut metrics = Vec::with_capacity(cfg.total_iters);
    let mut trajectory = Vec::new();
    let mut swa_trajectory = Vec::new();
    if cfg.path_every > 0 {
        trajectory.push((0, init_bundle.base_flat()));
    }
    let mut last_eval: Option<(Vec<f64>, f64)> = None;
    for t in 1..=cfg.total_iters {
        let step = train_step(&mut state, cfg, data, t)?;
        if last_eval.is_none() || t % cfg.eval_every == 0 || t == cfg.total_iters {
            let val = data
                .val
                .iter()
                .map(|v| evaluate(&state.bundle, v).map(|e| e.accuracy))
                .collect::<Result<Vec<_>>>()?;
            let target = evaluate(&state.bundle, &data.target)?.accuracy;
            last_eval = Some((val, target));
        }
        let (val_acc, target_acc) = last_eval.clone().expect("evaluated above");
        metrics.push(MetricRow {
            iter: t,
            variant: cfg.variant,
            step,
            val_acc,
            target_acc,
        });
        if cfg.path_every > 0 && (t % cfg.path_every == 0 || t == cfg.total_iters) {
            trajectory.push((t, state.bundle.base_flat()));
            if let Some(s) = state.swa.as_ref().filter(|s| s.count > 0) {
                swa_trajectory.push((t, s.avg.clone()));
            }
        }
    }
    let swa_bundle = state.swa_bundle()?;
    Ok(TrainedResult {
        config: cfg.clone(),
        init_bundle,
        final_bundle: state.bundle,
        swa_bundle,
        metrics,
        trajectory,
        swa_trajectory,
        instrumentation: state.instrumentation,
        debug_rows: state.debug_rows,
    })
}

/// Renders the metric log.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    use std::fmt::Write as _;
    let domains = rows.first().map_or(0, |r| r.val_acc.len());
    let mut out = String::from("iter,variant,loss_base,loss_flat,loss_adv,loss_disc");
    for d in 0..domains {
        let _ = write!(out, ",val_acc_d{d}");
    }
    out.push_str(",target_acc\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for r in rows {
        let _ = write!(
            out,
            "{},{},{:?},{},{},{}",
            r.iter,
            r.variant,
            r.step.loss_base,
            opt(r.step.loss_flat),
            opt(r.step.loss_adv),
            opt(r.step.loss_disc)
        );
        for v in &r.val_acc {
            let _ = write!(out, ",{v:?}");
        }
        let _ = writeln!(out, ",{:?}", r.target_acc);
    }
    out
}
