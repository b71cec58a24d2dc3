//! Measurement instruments: flatness curves, 2D parameter-plane surfaces with
//! projected optimization paths, and latent-code export.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::datasets::{Batch, BatchSampler, DomainDataset, MultiDomainSplit};
use crate::error::{Error, Result};
use crate::mixup::{self, MixupPlan, MixupSample, MixupWeights};
use crate::models::{classifier_from_flat, Linear, ModelBundle};
use crate::objectives::sample_direction;
use crate::tensor::{dot, norm, Tensor};
use crate::trainer::{evaluate, Variant};

/// Collinearity threshold for surface anchors.
pub const DEGENERATE_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct FlatnessEntry {
    pub gamma: f64,
    pub mean: f64,
    /// Population standard deviation of `values`.
    pub std: f64,
    /// One squared loss difference per direction.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlatnessCurve {
    pub entries: Vec<FlatnessEntry>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(L(c) − L(c + γu))²` for each radius and each of `m` unit directions `u`.
/// The directions are drawn once from `seed` and shared by every radius.
pub fn flatness_curve_with<F>(
    center: &[f64],
    radii: &[f64],
    m: usize,
    seed: u64,
    mut loss: F,
) -> Result<FlatnessCurve>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if m == 0 || radii.is_empty() {
        return Err(Error::Config("flatness curve needs radii and at least one direction".into()));
    }
    if let Some(r) = radii.iter().find(|r| !(**r >= 0.0) || !r.is_finite()) {
        return Err(Error::Config(format!("radius {r} must be finite and ≥ 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let directions: Vec<Vec<f64>> = (0..m).map(|_| sample_direction(center.len(), &mut rng)).collect();
    let base = loss(center)?;
    let mut entries = Vec::with_capacity(radii.len());
    for &gamma in radii {
        let values = directions
            .iter()
            .map(|u| {
                if gamma == 0.0 {
                    return Ok(0.0);
                }
                let p: Vec<f64> = center.iter().zip(u).map(|(c, d)| c + gamma * d).collect();
                let diff = base - loss(&p)?;
                Ok(diff * diff)
            })
            .collect::<Result<Vec<_>>>()?;
        let (mean, std) = mean_std(&values);
        entries.push(FlatnessEntry {
            gamma,
            mean,
            std,
            values,
        });
    }
    Ok(FlatnessCurve { entries })
}

/// Frozen latent codes plus optional frozen mixup samples on which the
/// classifier loss is measured.
#[derive(Clone, Debug)]
pub struct LossData {
    pub codes: Tensor,
    pub labels: Vec<usize>,
    pub mixup: Vec<MixupSample>,
}

impl LossData {
    pub fn len(&self) -> usize {
        self.labels.len() + self.mixup.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(Σ CE over originals + Σ l_new over mixup) / (N + n)` under
    /// `classifier`.
    pub fn loss(&self, classifier: &Linear) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::Contract("loss over an empty dataset".into()));
        }
        let mut total = 0.0;
        if !self.labels.is_empty() {
            let mut tape = Tape::new();
            let z = tape.constant(self.codes.clone());
            let cls = classifier.on_tape(&mut tape, false);
            let logits = cls.forward(&mut tape, z)?;
            let ce = tape.softmax_cross_entropy(logits, &self.labels)?;
            let s = tape.sum(ce);
            total += tape.value(s).item();
        }
        for s in &self.mixup {
            total += mixup::mix_loss(classifier, &s.z_new, &s.labels, &s.a)?;
        }
        Ok(total / self.len() as f64)
    }
}

/// One minibatch with mixup plan and weights fixed by a trained policy.
/// Codes are recomputed under whichever parameters are being measured.
#[derive(Clone, Debug)]
pub struct FrozenMixup {
    pub batch: Batch,
    pub plan: MixupPlan,
    pub weights: MixupWeights,
}

impl FrozenMixup {
    /// Draws a batch and `n` weighted combinations with `bundle`'s policy.
    /// ERM has no mixup and yields `None`.
    pub fn generate(
        bundle: &ModelBundle,
        data: &MultiDomainSplit,
        variant: Variant,
        lambda: f64,
        batch_size: usize,
        n: usize,
        seed: u64,
    ) -> Result<Option<Self>> {
        if variant == Variant::Erm {
            return Ok(None);
        }
        let mut sampler = BatchSampler::new(&data.train, seed);
        let batch = sampler.next_batch(&data.train, batch_size);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes = bundle.extract(&batch.x)?;
        let grads = mixup::instance_gradients(&bundle.classifier, &codes, &batch.labels)?;
        let plan = mixup::plan_mixup(&batch, n, &mut rng)?;
        let weights = mixup::compute_weights(bundle, variant, &codes, &grads, &plan, lambda, &mut rng)?;
        Ok(Some(Self { batch, plan, weights }))
    }

    pub fn samples(&self, bundle: &ModelBundle) -> Result<Vec<MixupSample>> {
        let codes = bundle.extract(&self.batch.x)?;
        mixup::materialize(&self.plan, &self.weights, &codes)
    }
}

/// Source-training codes under `bundle`, plus the frozen mixup samples
/// re-materialized with `bundle`'s extractor.
pub fn loss_data(
    bundle: &ModelBundle,
    sets: &[DomainDataset],
    frozen: Option<&FrozenMixup>,
) -> Result<LossData> {
    let x = stack_features(sets)?;
    let codes = bundle.extract(&x)?;
    let labels: Vec<usize> = sets.iter().flat_map(|d| d.labels.iter().copied()).collect();
    let mixup = match frozen {
        Some(f) => f.samples(bundle)?,
        None => Vec::new(),
    };
    Ok(LossData { codes, labels, mixup })
}

fn stack_features(sets: &[DomainDataset]) -> Result<Tensor> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Contract("no datasets to stack".into()))?;
    let d = first.input_dim();
    let rows: usize = sets.iter().map(DomainDataset::len).sum();
    let data: Vec<f64> = sets.iter().flat_map(|s| s.features.data().iter().copied()).collect();
    Tensor::new(vec![rows, d], data)
}

/// Flatness of `bundle`'s classifier around its current parameters.
pub fn flatness_curve(
    bundle: &ModelBundle,
    data: &LossData,
    radii: &[f64],
    m: usize,
    seed: u64,
) -> Result<FlatnessCurve> {
    if data.is_empty() {
        return Err(Error::Contract("flatness curve over an empty dataset".into()));
    }
    let (latent, classes) = (bundle.classifier.in_dim(), bundle.classifier.out_dim());
    flatness_curve_with(&bundle.classifier.flat(), radii, m, seed, |phi| {
        data.loss(&classifier_from_flat(latent, classes, phi)?)
    })
}

/// Orthonormal plane through three anchors.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceBasis {
    pub origin: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// `û = (w₂−w₁)/‖w₂−w₁‖`, `v̂` the Gram–Schmidt residual of `w₃−w₁`.
pub fn surface_basis(w1: &[f64], w2: &[f64], w3: &[f64]) -> Result<SurfaceBasis> {
    if w2.len() != w1.len() || w3.len() != w1.len() {
        return Err(Error::Dimension(format!(
            "anchor lengths {}, {}, {} differ",
            w1.len(),
            w2.len(),
            w3.len()
        )));
    }
    let u: Vec<f64> = w2.iter().zip(w1).map(|(a, b)| a - b).collect();
    let nu = norm(&u);
    if nu <= DEGENERATE_TOL {
        return Err(Error::Geometry("first two anchors coincide".into()));
    }
    let u: Vec<f64> = u.into_iter().map(|x| x / nu).collect();
    let w: Vec<f64> = w3.iter().zip(w1).map(|(a, b)| a - b).collect();
    let proj = dot(&w, &u);
    let v: Vec<f64> = w.iter().zip(&u).map(|(a, b)| a - proj * b).collect();
    let nv = norm(&v);
    if nv <= DEGENERATE_TOL * norm(&w).max(1.0) {
        return Err(Error::Geometry("the three anchors are collinear".into()));
    }
    Ok(SurfaceBasis {
        origin: w1.to_vec(),
        u,
        v: v.into_iter().map(|x| x / nv).collect(),
    })
}

impl SurfaceBasis {
    pub fn dim(&self) -> usize {
        self.origin.len()
    }

    /// `w₁ + a·û + b·v̂`.
    pub fn point(&self, a: f64, b: f64) -> Vec<f64> {
        self.origin
            .iter()
            .zip(self.u.iter().zip(&self.v))
            .map(|(o, (u, v))| o + a * u + b * v)
            .collect()
    }

    pub fn project(&self, w: &[f64]) -> Result<(f64, f64)> {
        if w.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "vector of length {} projected onto a basis of length {}",
                w.len(),
                self.dim()
            )));
        }
        let d: Vec<f64> = w.iter().zip(&self.origin).map(|(a, b)| a - b).collect();
        Ok((dot(&d, &self.u), dot(&d, &self.v)))
    }
}

pub fn project_path(basis: &SurfaceBasis, path: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    path.iter().map(|w| basis.project(w)).collect()
}

/// Smallest ranges containing every point, widened by `margin` of the span
/// on each side.
pub fn covering_ranges(points: &[(f64, f64)], margin: f64) -> Option<((f64, f64), (f64, f64))> {
    let first = points.first()?;
    let mut a = (first.0, first.0);
    let mut b = (first.1, first.1);
    for &(x, y) in points {
        a = (a.0.min(x), a.1.max(x));
        b = (b.0.min(y), b.1.max(y));
    }
    let widen = |(lo, hi): (f64, f64)| {
        let pad = ((hi - lo) * margin).max(1e-6);
        (lo - pad, hi + pad)
    };
    Some((widen(a), widen(b)))
}

/// Values on a regular `(a, b)` grid; `values[j][i]` is at `(a[i], b[j])`.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceGrid {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

fn linspace((lo, hi): (f64, f64), n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
        .collect()
}

pub fn surface_grid<F>(
    basis: &SurfaceBasis,
    a_range: (f64, f64),
    b_range: (f64, f64),
    resolution: (usize, usize),
    mut evaluator: F,
) -> Result<SurfaceGrid>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if resolution.0 < 2 || resolution.1 < 2 {
        return Err(Error::Config(format!(
            "surface resolution must be ≥ 2 per axis, got {}×{}",
            resolution.0, resolution.1
        )));
    }
    let a = linspace(a_range, resolution.0);
    let b = linspace(b_range, resolution.1);
    let mut values = Vec::with_capacity(b.len());
    for &bj in &b {
        let mut row = Vec::with_capacity(a.len());
        for &ai in &a {
            let v = evaluator(&basis.point(ai, bj))
                .map_err(|e| Error::State(format!("surface evaluation failed at (a={ai}, b={bj}): {e}")))?;
            row.push(v);
        }
        values.push(row);
    }
    Ok(SurfaceGrid { a, b, values })
}

/// Training loss (originals plus optional frozen mixup) over the flat
/// `θ ⊕ φ` vector.
pub fn train_loss_evaluator<'a>(
    template: &'a ModelBundle,
    sets: &'a [DomainDataset],
    frozen: Option<&'a FrozenMixup>,
) -> impl FnMut(&[f64]) -> Result<f64> + 'a {
    move |w| {
        let mut b = template.clone();
        b.set_base_flat(w)?;
        loss_data(&b, sets, frozen)?.loss(&b.classifier)
    }
}

/// Row-weighted accuracy over the flat `θ ⊕ φ` vector.
pub fn accuracy_evaluator<'a>(
    template: &'a ModelBundle,
    sets: &'a [DomainDataset],
) -> impl FnMut(&[f64]) -> Result<f64> + 'a {
    move |w| {
        let mut b = template.clone();
        b.set_base_flat(w)?;
        mean_accuracy(&b, sets)
    }
}

fn mean_accuracy(bundle: &ModelBundle, sets: &[DomainDataset]) -> Result<f64> {
    let mut total = 0.0;
    let mut rows = 0usize;
    for s in sets {
        total += evaluate(bundle, s)?.accuracy * s.len() as f64;
        rows += s.len();
    }
    if rows == 0 {
        return Err(Error::Contract("no rows to evaluate".into()));
    }
    Ok(total / rows as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentRow {
    pub tag: String,
    pub label: usize,
    pub z: Vec<f64>,
}

/// One row per dataset instance and per mixup sample. A mixup row's label is
/// the source label with the largest mixing weight `a` (ties to the first).
pub fn export_latents(
    bundle: &ModelBundle,
    datasets: &[(String, &DomainDataset)],
    mixup: &[(String, Vec<MixupSample>)],
) -> Result<Vec<LatentRow>> {
    let mut rows = Vec::new();
    for (tag, set) in datasets {
        let z = bundle.extract(&set.features)?;
        for (i, &label) in set.labels.iter().enumerate() {
            rows.push(LatentRow {
                tag: tag.clone(),
                label,
                z: z.row(i).to_vec(),
            });
        }
    }
    for (tag, samples) in mixup {
        for s in samples {
            let best = s
                .a
                .iter()
                .enumerate()
                .fold(0, |best, (i, &w)| if w > s.a[best] { i } else { best });
            rows.push(LatentRow {
                tag: tag.clone(),
                label: s.labels[best],
                z: s.z_new.clone(),
            });
        }
    }
    Ok(rows)
}

/// Mixup samples whose sources all share one class.
pub fn same_class_mixup(
    bundle: &ModelBundle,
    batch: &Batch,
    variant: Variant,
    lambda: f64,
    n: usize,
    rng: &mut impl rand::Rng,
) -> Result<Vec<MixupSample>> {
    if variant == Variant::Erm {
        return Err(Error::Contract("ERM generates no mixup samples".into()));
    }
    let codes = bundle.extract(&batch.x)?;
    let grads = mixup::instance_gradients(&bundle.classifier, &codes, &batch.labels)?;
    let plan = mixup::plan_same_class(batch, n, rng)?;
    let w = mixup::compute_weights(bundle, variant, &codes, &grads, &plan, lambda, rng)?;
    mixup::materialize(&plan, &w, &codes)
}

pub const FLATNESS_HEADER: &str = "method,gamma,direction_id,sq_diff";

/// Per-direction rows followed by one `mean` aggregate row per radius.
pub fn flatness_csv_rows(method: &str, curve: &FlatnessCurve) -> String {
    let mut out = String::new();
    for e in &curve.entries {
        for (i, v) in e.values.iter().enumerate() {
            let _ = writeln!(out, "{method},{:?},{i},{v:?}", e.gamma);
        }
    }
    for e in &curve.entries {
        let _ = writeln!(out, "{method},{:?},mean,{:?}", e.gamma, e.mean);
    }
    out
}

pub const SURFACE_HEADER: &str = "surface_name,a,b,value";

pub fn surface_csv_rows(name: &str, grid: &SurfaceGrid) -> String {
    let mut out = String::new();
    for (j, b) in grid.b.iter().enumerate() {
        for (i, a) in grid.a.iter().enumerate() {
            let _ = writeln!(out, "{name},{a:?},{b:?},{:?}", grid.values[j][i]);
        }
    }
    out
}

/// Shared colour scale for several surfaces: `shared_min` and `shared_max`
/// rows with empty coordinates.
pub fn surface_scale_rows(grids: &[&SurfaceGrid]) -> String {
    let all = grids.iter().flat_map(|g| g.values.iter().flatten().copied());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    format!("shared_min,,,{lo:?}\nshared_max,,,{hi:?}\n")
}

pub const PATH_HEADER: &str = "run,iter,a,b";

pub fn path_csv_rows(run: &str, iters: &[usize], coords: &[(f64, f64)]) -> String {
    let mut out = String::new();
    for (t, (a, b)) in iters.iter().zip(coords) {
        let _ = writeln!(out, "{run},{t},{a:?},{b:?}");
    }
    out
}

pub fn latents_csv(rows: &[LatentRow]) -> String {
    let d = rows.first().map_or(0, |r| r.z.len());
    let mut out = String::from("tag,label");
    for i in 0..d {
        let _ = write!(out, ",z{i}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{}", r.tag, r.label);
        for v in &r.z {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}
