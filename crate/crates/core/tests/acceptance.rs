//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line to stderr
//! (uncaptured) and then asserts, so a red line is also a red test.
//!
//! Behavioral criteria share one set of benchmark runs: the default
//! configuration (sources at 0°/30°/60°, target at 120°, T = 2000) for
//! seeds 0..5.

mod common;

use std::io::Write as _;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::{central_diff, mean, policy_fixture, rel_err, rng, std, uniform, unary_grad_error, H};
use fgmix::analysis::{self, FrozenMixup};
use fgmix::autodiff::Tape;
use fgmix::config::Config;
use fgmix::datasets::{BatchSampler, MultiDomainSplit};
use fgmix::mixup::{self, scale_shift, softmax_weights};
use fgmix::models::{ModelBundle, ModelDims};
use fgmix::objectives::{self, sample_neighbour, sphere_flatness, PolicyInputs};
use fgmix::tensor::{dot, norm, Tensor};
use fgmix::trainer::{self, train_step, RunConfig, SwaState, TrainState, Variant};
use rand::Rng;

fn report(id: u32, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {id:>2}: {verdict}  {detail}");
    assert!(pass, "criterion {id} failed: {detail}");
}

const SEEDS: u64 = 5;
const LAMBDAS: [f64; 5] = [1.0, 3.0, 5.0, 10.0, 20.0];

// ---------------------------------------------------------------- invariants

#[test]
fn c01_weight_conservation() {
    let start = Instant::now();
    let mut g = rng(1);
    let mut worst_a = 0.0f64;
    let mut worst_at = 0.0f64;
    let mut evals = 0;
    for k in [2usize, 3, 4] {
        for (li, &lambda) in LAMBDAS.iter().enumerate() {
            let dims = ModelDims {
                input_dim: 2,
                latent_dim: 8,
                num_classes: 2,
                hidden: 64,
            };
            let bundle = ModelBundle::init(dims, (k * 10 + li) as u64).unwrap();
            let p = dims.classifier_params();
            let per_cell = 10_000 / 15 + 1;
            for _ in 0..per_cell {
                let scale = 10f64.powf(g.gen_range(-4.0..1.0));
                let grads: Vec<Vec<f64>> = (0..k)
                    .map(|_| (0..p).map(|_| scale * g.gen_range(-1.0..1.0)).collect())
                    .collect();
                let s = mixup::scores(|x, y| bundle.similarity(x, y), &grads).unwrap();
                let a = softmax_weights(&s);
                let at = scale_shift(&a, lambda).unwrap();
                worst_a = worst_a.max((a.iter().sum::<f64>() - 1.0).abs());
                worst_at = worst_at.max((at.iter().sum::<f64>() - 1.0).abs());
                evals += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        evals >= 10_000 && worst_a <= 1e-9 && worst_at <= 1e-9 && secs < 60.0,
        format!("{evals} evaluations, max |Σa−1| = {worst_a:.1e}, max |Σã−1| = {worst_at:.1e}, {secs:.1}s"),
    );
}

#[test]
fn c02_lambda_one_identity() {
    let mut g = rng(2);
    let mut mismatches = 0;
    let mut cases = 0;
    for _ in 0..1000 {
        let k = g.gen_range(2..5);
        let s: Vec<f64> = (0..k).map(|_| g.gen_range(-10.0..10.0)).collect();
        let a = softmax_weights(&s);
        let at = scale_shift(&a, 1.0).unwrap();
        if at.iter().zip(&a).any(|(x, y)| x.to_bits() != y.to_bits()) {
            mismatches += 1;
        }
        cases += 1;
    }
    // The learned path on the tape as well.
    for seed in 0..20 {
        let f = policy_fixture(seed);
        let mut tape = Tape::new();
        let pv = f.bundle.policy.on_tape(&mut tape, false);
        let lw = mixup::learned_weights_on_tape(&mut tape, &pv, &f.grads, &f.plan, 1.0).unwrap();
        let a = tape.value(lw.a).data().to_vec();
        let at = tape.value(lw.a_tilde).data().to_vec();
        if at.iter().zip(&a).any(|(x, y)| x.to_bits() != y.to_bits()) {
            mismatches += 1;
        }
        cases += 1;
    }
    report(2, mismatches == 0, format!("{cases} cases, {mismatches} not bitwise equal"));
}

fn in_hull_2d(p: &[f64], v: &[Vec<f64>]) -> bool {
    let (a, b, c) = (&v[0], &v[1], &v[2]);
    let det = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1]);
    let l1 = ((b[1] - c[1]) * (p[0] - c[0]) + (c[0] - b[0]) * (p[1] - c[1])) / det;
    let l2 = ((c[1] - a[1]) * (p[0] - c[0]) + (a[0] - c[0]) * (p[1] - c[1])) / det;
    let l3 = 1.0 - l1 - l2;
    [l1, l2, l3].iter().all(|&l| l >= -1e-9)
}

#[test]
fn c03_extrapolation_witness_and_convex_hull() {
    let mut g = rng(3);
    let mut witness_fail = 0;
    for _ in 0..1000 {
        let k = g.gen_range(2..5);
        let lambda = [3.0, 5.0, 10.0, 20.0][g.gen_range(0..4)];
        let kf = k as f64;
        let threshold = (lambda - 1.0) / (lambda * kf);
        // Target weights with a_0 strictly below the threshold.
        let a0 = threshold * g.gen_range(0.01..0.99);
        let rest: Vec<f64> = (1..k).map(|_| g.gen_range(0.1..1.0)).collect();
        let total: f64 = rest.iter().sum();
        let mut target = vec![a0];
        target.extend(rest.iter().map(|r| r / total * (1.0 - a0)));
        let scores: Vec<f64> = target.iter().map(|w| w.ln()).collect();
        let a = softmax_weights(&scores);
        let amin = a.iter().cloned().fold(f64::INFINITY, f64::min);
        let at = scale_shift(&a, lambda).unwrap();
        let min_at = at.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(amin < threshold && min_at < 0.0) {
            witness_fail += 1;
        }
    }
    let mut hull_fail = 0;
    for _ in 0..1000 {
        let verts: Vec<Vec<f64>> = (0..3).map(|_| vec![g.gen_range(-3.0..3.0), g.gen_range(-3.0..3.0)]).collect();
        let s: Vec<f64> = (0..3).map(|_| g.gen_range(-5.0..5.0)).collect();
        let at = scale_shift(&softmax_weights(&s), 1.0).unwrap();
        let z = mixup::mix(&verts, &at).unwrap();
        let det = (verts[1][1] - verts[2][1]) * (verts[0][0] - verts[2][0])
            + (verts[2][0] - verts[1][0]) * (verts[0][1] - verts[2][1]);
        if det.abs() > 1e-9 && !in_hull_2d(&z, &verts) {
            hull_fail += 1;
        }
    }
    report(
        3,
        witness_fail == 0 && hull_fail == 0,
        format!("witness failures {witness_fail}/1000, hull failures {hull_fail}/1000"),
    );
}

type UnaryCase = (&'static str, Box<dyn Fn(u64) -> f64>);

fn op_cases() -> Vec<UnaryCase> {
    fn m(seed: u64, r: usize, c: usize) -> Tensor {
        uniform(&mut rng(seed), &[r, c], -2.0, 2.0)
    }
    fn other(seed: u64, r: usize, c: usize) -> Tensor {
        uniform(&mut rng(seed ^ 0x55), &[r, c], -2.0, 2.0)
    }
    vec![
        ("tanh", Box::new(|s| unary_grad_error(m(s, 3, 4), s, |t, v| Ok(t.tanh(v))))),
        ("sigmoid", Box::new(|s| unary_grad_error(m(s, 3, 4), s, |t, v| Ok(t.sigmoid(v))))),
        ("square", Box::new(|s| unary_grad_error(m(s, 3, 4), s, |t, v| Ok(t.square(v))))),
        ("affine", Box::new(|s| unary_grad_error(m(s, 3, 4), s, |t, v| Ok(t.affine(v, -1.3, 0.7))))),
        ("scale", Box::new(|s| unary_grad_error(m(s, 3, 4), s, |t, v| Ok(t.scale(v, 2.5))))),
        ("log", Box::new(|s| unary_grad_error(m(s, 3, 4).map(|v| v.abs() + 0.5), s, |t, v| Ok(t.log(v))))),
        (
            "clamp",
            Box::new(|s| {
                let x = m(s, 3, 4).map(|v| if v.abs() < 1.1 && v.abs() > 0.9 { v * 2.0 } else { v });
                unary_grad_error(x, s, |t, v| Ok(t.clamp(v, -1.0, 1.0)))
            }),
        ),
        ("add", Box::new(|s| unary_grad_error(m(s, 3, 4), s, move |t, v| { let c = t.constant(other(s, 3, 4)); t.add(v, c) }))),
        ("sub", Box::new(|s| unary_grad_error(m(s, 3, 4), s, move |t, v| { let c = t.constant(other(s, 3, 4)); t.sub(c, v) }))),
        ("mul", Box::new(|s| unary_grad_error(m(s, 3, 4), s, move |t, v| { let c = t.constant(other(s, 3, 4)); t.mul(v, c) }))),
        ("sum", Box::new(|s| unary_grad_error(m(s, 3, 4), s, |t, v| Ok(t.sum(v))))),
        ("mean", Box::new(|s| unary_grad_error(m(s, 3, 4), s, |t, v| Ok(t.mean(v))))),
        ("sum_rows", Box::new(|s| unary_grad_error(m(s, 3, 4), s, |t, v| Ok(t.sum_rows(v))))),
        ("softmax_rows", Box::new(|s| unary_grad_error(m(s, 3, 4), s, |t, v| Ok(t.softmax_rows(v))))),
        ("log_softmax_rows", Box::new(|s| unary_grad_error(m(s, 3, 4), s, |t, v| Ok(t.log_softmax_rows(v))))),
        (
            "softmax_cross_entropy",
            Box::new(|s| unary_grad_error(m(s, 3, 4), s, move |t, v| t.softmax_cross_entropy(v, &[(s % 4) as usize, 1, 3]))),
        ),
        ("transpose", Box::new(|s| unary_grad_error(m(s, 3, 4), s, |t, v| t.transpose(v)))),
        ("reshape", Box::new(|s| unary_grad_error(m(s, 3, 4), s, |t, v| t.reshape(v, vec![2, 6])))),
        ("gather", Box::new(|s| unary_grad_error(m(s, 3, 4), s, |t, v| t.gather(v, vec![vec![0, 3], vec![1, 1], vec![2, 0]])))),
        ("scatter", Box::new(|s| unary_grad_error(m(s, 3, 2), s, |t, v| t.scatter(v, vec![vec![0, 4], vec![2, 1], vec![3, 3]], 5)))),
        ("concat_rows", Box::new(|s| unary_grad_error(m(s, 3, 4), s, |t, v| { let q = t.square(v); t.concat_rows(&[v, q]) }))),
        ("segment_sum", Box::new(|s| unary_grad_error(m(s, 6, 1), s, |t, v| t.segment_sum(v, vec![0, 2, 1, 0, 2, 2], 3)))),
        ("matmul", Box::new(|s| unary_grad_error(m(s, 3, 4), s, move |t, v| { let c = t.constant(other(s, 4, 2)); t.matmul(v, c) }))),
        ("matmul_rhs", Box::new(|s| unary_grad_error(m(s, 4, 2), s, move |t, v| { let c = t.constant(other(s, 3, 4)); t.matmul(c, v) }))),
        (
            "add_row",
            Box::new(|s| unary_grad_error(uniform(&mut rng(s), &[4], -1.0, 1.0), s, move |t, v| { let c = t.constant(other(s, 3, 4)); t.add_row(c, v) })),
        ),
        (
            "linear",
            Box::new(|s| {
                unary_grad_error(m(s, 2, 4), s, move |t, w| {
                    let x = t.constant(other(s, 3, 4));
                    let b = t.constant(Tensor::vector(vec![0.1, -0.2]));
                    t.linear(x, w, b)
                })
            }),
        ),
    ]
}

#[test]
fn c04_gradient_fidelity() {
    let start = Instant::now();
    let mut worst_op = ("", 0.0f64);
    for (name, case) in op_cases() {
        for seed in 0..20 {
            let e = case(seed);
            if e > worst_op.1 {
                worst_op = (name, e);
            }
        }
    }
    let mut worst_policy = 0.0f64;
    for seed in 0..20 {
        let f = policy_fixture(seed);
        let inputs = PolicyInputs {
            codes: &f.codes,
            grads: &f.grads,
            plan: &f.plan,
            classifier: &f.bundle.classifier,
            neighbours: &f.neighbours,
            discriminator: Some(&f.bundle.discriminator),
            lambda: 5.0,
        };
        let base = objectives::policy_objective(&f.bundle.policy, &inputs, None).unwrap();
        let analytic: Vec<f64> = base.grads.iter().flat_map(|t| t.data().to_vec()).collect();
        let a = base.weights.a.clone();
        let numeric = central_diff(&f.bundle.policy.flat(), H, |p| {
            let mut pol = f.bundle.policy.clone();
            pol.set_flat(p).unwrap();
            objectives::policy_objective(&pol, &inputs, Some(&a)).unwrap().loss
        });
        worst_policy = worst_policy.max(rel_err(&analytic, &numeric));
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        4,
        worst_op.1 < 1e-3 && worst_policy < 1e-3 && secs < 300.0,
        format!(
            "worst op {} at {:.1e}, composed policy gradient {:.1e} over 20 seeds, {secs:.1}s",
            worst_op.0, worst_op.1, worst_policy
        ),
    );
}

#[test]
fn c05_instance_gradient() {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let classes = 2 + (seed % 3) as usize;
        let dims = ModelDims {
            input_dim: 2,
            latent_dim: 8,
            num_classes: classes,
            hidden: 16,
        };
        let b = ModelBundle::init(dims, seed).unwrap();
        let z = uniform(&mut rng(seed), &[1, 8], -3.0, 3.0);
        let y = seed as usize % classes;
        let closed = mixup::instance_gradient(&b.classifier, z.data(), y).unwrap();
        let mut tape = Tape::new();
        let cls = b.classifier.on_tape(&mut tape, true);
        let zv = tape.constant(z.clone());
        let logits = cls.forward(&mut tape, zv).unwrap();
        let ce = tape.softmax_cross_entropy(logits, &[y]).unwrap();
        let l = tape.sum(ce);
        let g = tape.backward(l).unwrap();
        let mut auto = g.get_or_zeros(cls.weight, &b.classifier.weight).into_data();
        auto.extend(g.get_or_zeros(cls.bias, &b.classifier.bias).into_data());
        for (x, y) in closed.iter().zip(&auto) {
            worst = worst.max((x - y).abs());
        }
    }
    report(5, worst <= 1e-10, format!("max abs difference {worst:.1e} over 20 seeds"));
}

fn default_config(seed: u64) -> Config {
    let mut c = Config::default();
    c.set("run.seed", &seed.to_string()).unwrap();
    c
}

#[test]
fn c06_prefix_equivalence() {
    let cfg = default_config(0);
    let data = cfg.dataset().unwrap();
    let fg: RunConfig = cfg.run_config().unwrap();
    assert_eq!(fg.variant, Variant::FgMix);
    let erm = RunConfig {
        variant: Variant::Erm,
        ..fg.clone()
    };
    let mut a = TrainState::new(&erm, &data).unwrap();
    let mut b = TrainState::new(&fg, &data).unwrap();
    let mut first_diff = None;
    for t in 1..fg.policy_start {
        train_step(&mut a, &erm, &data, t).unwrap();
        train_step(&mut b, &fg, &data, t).unwrap();
        let same = a
            .bundle
            .base_flat()
            .iter()
            .zip(b.bundle.base_flat())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            first_diff = Some(t);
            break;
        }
    }
    report(
        6,
        first_diff.is_none(),
        match first_diff {
            None => format!("bitwise identical for t = 1..{}", fg.policy_start - 1),
            Some(t) => format!("trajectories differ at t = {t}"),
        },
    );
}

#[test]
fn c07_flatness_estimator_on_quadratic() {
    let d = 18;
    let mut ok = true;
    let mut worst = 0.0f64;
    let center: Vec<f64> = uniform(&mut rng(7), &[d], -1.0, 1.0).into_data();
    for gamma in (1..=10).map(f64::from) {
        // Minimizer at the center: L(φ) = ‖φ − c‖².
        let vals = sphere_flatness(&center, gamma, 100, &mut rng(gamma as u64), |p| {
            Ok(p.iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum())
        })
        .unwrap();
        let m = mean(&vals);
        let se = std(&vals) / (vals.len() as f64).sqrt();
        let target = gamma.powi(4);
        let dev = (m - target).abs();
        ok &= dev <= 3.0 * se + 1e-9 * target;
        worst = worst.max(dev / target);
    }
    // Anisotropic curvature: E[(γ²uᵀHu)²] = γ⁴(tr(H)² + 2tr(H²)) / (d(d+2)).
    let h: Vec<f64> = (0..d).map(|i| 0.5 + i as f64 / d as f64).collect();
    let tr: f64 = h.iter().sum();
    let tr2: f64 = h.iter().map(|v| v * v).sum();
    let mut z_worst = 0.0f64;
    for gamma in [1.0, 3.0, 10.0] {
        let vals = sphere_flatness(&center, gamma, 100, &mut rng(70 + gamma as u64), |p| {
            Ok(p.iter().zip(&center).zip(&h).map(|((a, b), w)| w * (a - b) * (a - b)).sum())
        })
        .unwrap();
        let expected = gamma.powi(4) * (tr * tr + 2.0 * tr2) / (d as f64 * (d as f64 + 2.0));
        let se = std(&vals) / 10.0;
        let z = (mean(&vals) - expected).abs() / se;
        ok &= z <= 3.0;
        z_worst = z_worst.max(z);
    }
    report(
        7,
        ok,
        format!("isotropic max relative deviation {worst:.1e}; anisotropic worst |z| = {z_worst:.2} (≤ 3)"),
    );
}

#[test]
fn c08_surface_geometry() {
    let cfg = default_config(0);
    let data = cfg.dataset().unwrap();
    let base: RunConfig = cfg.run_config().unwrap();
    let short = |variant| RunConfig {
        variant,
        total_iters: 150,
        policy_start: 50,
        swa_start: 50,
        ..base.clone()
    };
    let erm = trainer::run(&short(Variant::Erm), &data).unwrap();
    let fg = trainer::run(&short(Variant::FgMix), &data).unwrap();
    let w1 = erm.init_bundle.base_flat();
    let w2 = erm.swa_bundle.as_ref().unwrap().base_flat();
    let w3 = fg.swa_bundle.as_ref().unwrap().base_flat();
    let basis = analysis::surface_basis(&w1, &w2, &w3).unwrap();
    let ortho = (norm(&basis.u) - 1.0).abs().max((norm(&basis.v) - 1.0).abs()).max(dot(&basis.u, &basis.v).abs());

    let mut recon = 0.0f64;
    for w in [&w1, &w2, &w3] {
        let (a, b) = basis.project(w).unwrap();
        for (x, y) in basis.point(a, b).iter().zip(w.iter()) {
            recon = recon.max((x - y).abs());
        }
    }
    let b2 = basis.project(&w2).unwrap().1.abs();

    let frozen = FrozenMixup::generate(&fg.final_bundle, &data, Variant::FgMix, base.lambda, base.batch_size, base.mixup_per_iter, 0)
        .unwrap()
        .unwrap();
    let direct = |w: &[f64]| {
        let mut b = erm.init_bundle.clone();
        b.set_base_flat(w).unwrap();
        analysis::loss_data(&b, &data.train, Some(&frozen)).unwrap().loss(&b.classifier).unwrap()
    };
    let mut grid_err = 0.0f64;
    for w in [&w1, &w2, &w3] {
        let (a, b) = basis.project(w).unwrap();
        let grid = analysis::surface_grid(
            &basis,
            (a, a + 1.0),
            (b, b + 1.0),
            (2, 2),
            analysis::train_loss_evaluator(&erm.init_bundle, &data.train, Some(&frozen)),
        )
        .unwrap();
        grid_err = grid_err.max((grid.values[0][0] - direct(w)).abs());
    }
    report(
        8,
        ortho <= 1e-9 && recon <= 1e-9 && b2 <= 1e-9 && grid_err <= 1e-9,
        format!(
            "orthonormality {ortho:.1e}, anchor reconstruction {recon:.1e}, b(w2) {b2:.1e}, grid vs direct loss {grid_err:.1e}"
        ),
    );
}

#[test]
fn c09_swa_mean() {
    let mut g = rng(9);
    let mut swa = SwaState::new(1);
    let snaps: Vec<Vec<f64>> = (0..100)
        .map(|_| {
            let s = 10f64.powf(g.gen_range(-2.0..2.0));
            uniform(&mut g, &[64], -s, s).into_data()
        })
        .collect();
    for s in &snaps {
        swa.absorb(s).unwrap();
    }
    let mut worst = 0.0f64;
    for (j, v) in swa.avg.iter().enumerate() {
        let direct = snaps.iter().map(|s| s[j]).sum::<f64>() / snaps.len() as f64;
        worst = worst.max((v - direct).abs());
    }
    // And on a real trajectory.
    let cfg = default_config(0);
    let data = cfg.dataset().unwrap();
    let rc = RunConfig {
        variant: Variant::D,
        total_iters: 140,
        policy_start: 20,
        swa_start: 41,
        ..cfg.run_config().unwrap()
    };
    let mut state = TrainState::new(&rc, &data).unwrap();
    let mut traj = Vec::new();
    for t in 1..=rc.total_iters {
        train_step(&mut state, &rc, &data, t).unwrap();
        if t >= rc.swa_start {
            traj.push(state.bundle.base_flat());
        }
    }
    let avg = state.swa_bundle().unwrap().unwrap().base_flat();
    for (j, v) in avg.iter().enumerate() {
        let direct = traj.iter().map(|s| s[j]).sum::<f64>() / traj.len() as f64;
        worst = worst.max((v - direct).abs());
    }
    report(
        9,
        worst <= 1e-10 && traj.len() == 100,
        format!("max deviation {worst:.1e} over 100 random and {} trained snapshots", traj.len()),
    );
}

// ---------------------------------------------------------------- benchmark

const LADDER: [Variant; 6] = [Variant::Erm, Variant::A, Variant::C, Variant::D, Variant::E, Variant::FgMix];
const RADII: [f64; 10] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
const DIRECTIONS: usize = 50;

struct SeedRun {
    variant: Variant,
    target: f64,
    swa_target: f64,
    /// Mean flatness curve over `RADII`, without and with SWA.
    curve: Vec<f64>,
    swa_curve: Vec<f64>,
}

struct Bench {
    runs: Vec<Vec<SeedRun>>,
    mc50: Vec<f64>,
    seconds_per_seed: Vec<f64>,
}

impl Bench {
    fn of(&self, v: Variant) -> impl Iterator<Item = &SeedRun> {
        self.runs.iter().flatten().filter(move |r| r.variant == v)
    }

    fn target(&self, v: Variant) -> Vec<f64> {
        self.of(v).map(|r| r.target).collect()
    }

    fn swa_target(&self, v: Variant) -> Vec<f64> {
        self.of(v).map(|r| r.swa_target).collect()
    }

    /// Seed-averaged curve, per radius.
    fn curve(&self, v: Variant, swa: bool) -> Vec<f64> {
        let curves: Vec<&Vec<f64>> = self.of(v).map(|r| if swa { &r.swa_curve } else { &r.curve }).collect();
        (0..RADII.len())
            .map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64)
            .collect()
    }
}

fn curve_for(bundle: &ModelBundle, data: &MultiDomainSplit, frozen: Option<&FrozenMixup>, seed: u64) -> Vec<f64> {
    let ld = analysis::loss_data(bundle, &data.train, frozen).unwrap();
    analysis::flatness_curve(bundle, &ld, &RADII, DIRECTIONS, seed)
        .unwrap()
        .entries
        .iter()
        .map(|e| e.mean)
        .collect()
}

fn bench() -> &'static Bench {
    static BENCH: OnceLock<Bench> = OnceLock::new();
    BENCH.get_or_init(|| {
        let mut runs = Vec::new();
        let mut mc50 = Vec::new();
        let mut seconds_per_seed = Vec::new();
        for seed in 0..SEEDS {
            let cfg = default_config(seed);
            let data = cfg.dataset().unwrap();
            let base: RunConfig = cfg.run_config().unwrap();
            let mut per_seed = Vec::new();
            let mut elapsed = Duration::ZERO;
            for v in LADDER {
                let rc = RunConfig { variant: v, ..base.clone() };
                let start = Instant::now();
                let r = trainer::run(&rc, &data).unwrap();
                elapsed += start.elapsed();
                let swa = r.swa_bundle.as_ref().expect("SWA enabled by default");
                let frozen =
                    FrozenMixup::generate(&r.final_bundle, &data, v, rc.lambda, rc.batch_size, rc.mixup_per_iter, seed).unwrap();
                per_seed.push(SeedRun {
                    variant: v,
                    target: r.final_target(&data).unwrap().accuracy,
                    swa_target: r.swa_target(&data).unwrap().unwrap().accuracy,
                    curve: curve_for(&r.final_bundle, &data, frozen.as_ref(), seed),
                    swa_curve: curve_for(swa, &data, frozen.as_ref(), seed),
                });
            }
            let rc = RunConfig {
                mc_samples: 50,
                ..base.clone()
            };
            mc50.push(trainer::run(&rc, &data).unwrap().final_target(&data).unwrap().accuracy);
            runs.push(per_seed);
            seconds_per_seed.push(elapsed.as_secs_f64());
        }
        let b = Bench {
            runs,
            mc50,
            seconds_per_seed,
        };
        let mut err = std::io::stderr();
        for v in LADDER {
            let t = b.target(v);
            let s = b.swa_target(v);
            let _ = writeln!(
                err,
                "  {:<5} target {:.2} ± {:.2}   with SWA {:.2} ± {:.2}",
                v.name(),
                100.0 * mean(&t),
                100.0 * std(&t),
                100.0 * mean(&s),
                100.0 * std(&s)
            );
        }
        b
    })
}

#[test]
fn c10_ablation_ordering() {
    let b = bench();
    let means: Vec<f64> = LADDER.iter().map(|&v| 100.0 * mean(&b.target(v))).collect();
    // ERM → A → C → D → {E, FGMix}
    let chain = means[0] <= means[1] && means[1] <= means[2] && means[2] <= means[3];
    let tail = means[3] <= means[4] && means[3] <= means[5];
    let gain = means[5] - means[0];
    let std_fg = 100.0 * std(&b.target(Variant::FgMix));
    let std_e = 100.0 * std(&b.target(Variant::E));
    let slowest = b.seconds_per_seed.iter().cloned().fold(0.0, f64::max);
    let names: Vec<String> = LADDER
        .iter()
        .zip(&means)
        .map(|(v, m)| format!("{} {m:.2}", v.name()))
        .collect();
    report(
        10,
        chain && tail && gain >= 2.0 && std_fg <= std_e && slowest <= 1800.0,
        format!(
            "means [{}], ERM→FGMix gain {gain:.2} (≥ 2), std FGMix {std_fg:.2} vs E {std_e:.2}, slowest seed {slowest:.0}s",
            names.join(", ")
        ),
    );
}

#[test]
fn c11_flatness_curves() {
    let b = bench();
    let erm = b.curve(Variant::Erm, false);
    let fg = b.curve(Variant::FgMix, false);
    let fg_flatter = erm.iter().zip(&fg).all(|(e, f)| f <= e);
    let mut swa_fail = Vec::new();
    for v in LADDER {
        let raw = b.curve(v, false);
        let swa = b.curve(v, true);
        for (i, &g) in RADII.iter().enumerate() {
            if g >= 5.0 && swa[i] > raw[i] {
                swa_fail.push(format!("{}@γ={g}", v.name()));
            }
        }
    }
    let fmt = |c: &[f64]| c.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>().join(" ");
    report(
        11,
        fg_flatter && swa_fail.is_empty(),
        format!(
            "FGMix ≤ ERM at every γ: {fg_flatter} (ERM [{}] FGMix [{}]); SWA not flatter at: [{}]",
            fmt(&erm),
            fmt(&fg),
            swa_fail.join(", ")
        ),
    );
}

#[test]
fn c12_swa_combination() {
    let b = bench();
    let fg = 100.0 * mean(&b.swa_target(Variant::FgMix));
    let erm = 100.0 * mean(&b.swa_target(Variant::Erm));
    report(12, fg >= erm, format!("FGMix+SWA {fg:.2} vs ERM+SWA {erm:.2}"));
}

/// Best-of-`reps` wall time of the flatness term (forward and backward to
/// the mixed codes) for each neighbour count, interleaved across counts.
fn flatness_term_times(counts: &[usize], reps: usize) -> Vec<f64> {
    let cfg = default_config(0);
    let data = cfg.dataset().unwrap();
    let rc: RunConfig = cfg.run_config().unwrap();
    let bundle = ModelBundle::init(rc.dims(&data), 0).unwrap();
    let batch = BatchSampler::new(&data.train, 0).next_batch(&data.train, rc.batch_size);
    let codes = bundle.extract(&batch.x).unwrap();
    let grads = mixup::instance_gradients(&bundle.classifier, &codes, &batch.labels).unwrap();
    let mut g = rng(13);
    let plan = mixup::plan_mixup(&batch, rc.mixup_per_iter, &mut g).unwrap();
    let w = mixup::compute_weights(&bundle, Variant::D, &codes, &grads, &plan, rc.lambda, &mut g).unwrap();
    let z_new = mixup::mixed_codes(&plan, &w.a_tilde, &codes).unwrap();
    let phi = bundle.classifier.flat();
    let max = counts.iter().copied().max().unwrap_or(0);
    let neighbours: Vec<_> = (0..max).map(|_| sample_neighbour(&phi, rc.gamma, &mut g).unwrap()).collect();
    let mut best = vec![f64::INFINITY; counts.len()];
    for _ in 0..reps {
        for (i, &m) in counts.iter().enumerate() {
            let start = Instant::now();
            let mut tape = Tape::new();
            let z = tape.param(z_new.clone());
            let l = objectives::flatness_loss_on_tape(&mut tape, z, &plan.labels, &w.a, &bundle.classifier, &neighbours[..m]).unwrap();
            let grads = tape.backward(l).unwrap();
            std::hint::black_box(grads.get_or_zeros(z, &z_new));
            best[i] = best[i].min(start.elapsed().as_secs_f64());
        }
    }
    best
}

#[test]
fn c13_monte_carlo_sweep() {
    let b = bench();
    let at100 = 100.0 * mean(&b.target(Variant::FgMix));
    let at50 = 100.0 * mean(&b.mc50);
    let acc_ok = (at100 - at50).abs() <= 1.0;

    let counts = [25usize, 50, 100, 200];
    let times = flatness_term_times(&counts, 15);
    let per_sample: Vec<f64> = times.iter().zip(&counts).map(|(t, &m)| t / m as f64).collect();
    let reference = per_sample[2];
    let worst = per_sample.iter().map(|p| (p / reference - 1.0).abs()).fold(0.0, f64::max);
    let time_ok = worst <= 0.2;
    let ms: Vec<String> = counts
        .iter()
        .zip(&times)
        .map(|(m, t)| format!("m={m}: {:.2}ms", 1e3 * t))
        .collect();
    report(
        13,
        acc_ok && time_ok,
        format!(
            "target accuracy mc=50 {at50:.2} vs mc=100 {at100:.2}; flatness term {} (max per-sample deviation {:.0}%)",
            ms.join(", "),
            100.0 * worst
        ),
    );
}
