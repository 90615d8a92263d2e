//! Statistics that compare embeddings and densities before and after the
//! transform.

use ndarray::{Array2, Array3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cartogram::{cell_density_after, floored_density, TransformField};
use crate::error::{Error, Result};
use crate::field::{EmbeddingSet, MeaningField, MeasureField};
use crate::grid::GridSpec;
use crate::scalar::Scalar;

/// Shannon entropy (nats) of a `bins x bins` histogram over the bounding box
/// of the points.
pub fn histogram_entropy<S: Scalar>(e: &EmbeddingSet<S>, bins: usize) -> Result<f64> {
    if e.is_empty() {
        return Err(Error::input("entropy of an empty embedding set"));
    }
    if bins == 0 {
        return Err(Error::input("bins must be at least 1"));
    }
    let pts: Vec<[f64; 2]> = e.points().iter().map(|p| [p[0].to_f64_lossy(), p[1].to_f64_lossy()]).collect();
    let mut lo = pts[0];
    let mut hi = pts[0];
    for p in &pts {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let mut width = [0.0; 2];
    for a in 0..2 {
        let side = hi[a] - lo[a];
        width[a] = side + 1e-9 * side.max(1.0);
    }
    let mut counts = vec![0usize; bins * bins];
    for p in &pts {
        let b = |a: usize| (((p[a] - lo[a]) / width[a] * bins as f64).floor() as usize).min(bins - 1);
        counts[b(0) * bins + b(1)] += 1;
    }
    let n = pts.len() as f64;
    Ok(counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum())
}

/// Result of [`kmeans_f1`].
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansOutcome {
    /// Macro-averaged F1 of the majority-label classification.
    pub f1: f64,
    /// Cluster index per point.
    pub assignments: Vec<usize>,
    /// Majority label of each cluster (`None` for an empty cluster).
    pub cluster_labels: Vec<Option<String>>,
    pub inertia: f64,
}

/// Options for [`kmeans_f1`]; `k = None` uses the number of distinct labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KMeansOptions {
    pub k: Option<usize>,
    pub seed: u64,
    pub restarts: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            k: None,
            seed: 0,
            restarts: 10,
        }
    }
}

const LLOYD_MAX_ITERS: usize = 300;

fn sq(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1])
}

fn nearest(c: &[[f64; 2]], p: [f64; 2]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, &ck) in c.iter().enumerate() {
        let d = sq(ck, p);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn kmeans_once(pts: &[[f64; 2]], k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
    let n = pts.len();
    let pick = |rng: &mut ChaCha8Rng, n: usize| ((rng.random::<f64>() * n as f64) as usize).min(n - 1);
    let mut centers = vec![pts[pick(rng, n)]];
    let mut d2: Vec<f64> = pts.iter().map(|&p| sq(p, centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            pick(rng, n)
        };
        centers.push(pts[next]);
        for (d, &p) in d2.iter_mut().zip(pts) {
            *d = d.min(sq(p, pts[next]));
        }
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..LLOYD_MAX_ITERS {
        let mut changed = false;
        for (a, &p) in assign.iter_mut().zip(pts) {
            let c = nearest(&centers, p).0;
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![[0.0; 2]; k];
        let mut counts = vec![0usize; k];
        for (&a, &p) in assign.iter().zip(pts) {
            sums[a][0] += p[0];
            sums[a][1] += p[1];
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
            }
        }
    }
    let inertia = assign.iter().zip(pts).map(|(&a, &p)| sq(centers[a], p)).sum();
    (assign, inertia)
}

/// k-means with k-means++ seeding, scored by the macro-F1 of assigning each
/// cluster its majority label.
pub fn kmeans_f1<S: Scalar>(e: &EmbeddingSet<S>, opts: KMeansOptions) -> Result<KMeansOutcome> {
    let labels = e.labels().ok_or_else(|| Error::input("k-means F1 needs labelled embeddings"))?;
    let classes = e.classes().expect("labels present");
    let k = opts.k.unwrap_or(classes.len());
    if k == 0 {
        return Err(Error::input("k must be at least 1"));
    }
    if k > e.len() {
        return Err(Error::input(format!("k = {k} exceeds the number of points ({})", e.len())));
    }
    if opts.restarts == 0 {
        return Err(Error::input("restarts must be at least 1"));
    }
    let pts: Vec<[f64; 2]> = e.points().iter().map(|p| [p[0].to_f64_lossy(), p[1].to_f64_lossy()]).collect();
    let runs: Vec<(Vec<usize>, f64)> = (0..opts.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(r as u64);
            kmeans_once(&pts, k, &mut rng)
        })
        .collect();
    let mut best = 0;
    for (r, run) in runs.iter().enumerate() {
        if run.1 < runs[best].1 {
            best = r;
        }
    }
    let (assignments, inertia) = runs.into_iter().nth(best).expect("at least one restart");

    let class_of = |l: &String| classes.binary_search(l).expect("label is a class");
    let truth: Vec<usize> = labels.iter().map(class_of).collect();
    let mut votes = vec![vec![0usize; classes.len()]; k];
    for (&a, &c) in assignments.iter().zip(&truth) {
        votes[a][c] += 1;
    }
    // classes are sorted, so the first maximum is the smallest label
    let majority: Vec<Option<usize>> = votes
        .iter()
        .map(|v| {
            let top = *v.iter().max().expect("k >= 1");
            (top > 0).then(|| v.iter().position(|&c| c == top).expect("max exists"))
        })
        .collect();
    let mut tp = vec![0usize; classes.len()];
    let mut fp = vec![0usize; classes.len()];
    let mut fn_ = vec![0usize; classes.len()];
    for (&a, &c) in assignments.iter().zip(&truth) {
        let pred = majority[a].expect("non-empty cluster");
        if pred == c {
            tp[c] += 1;
        } else {
            fp[pred] += 1;
            fn_[c] += 1;
        }
    }
    let f1 = (0..classes.len())
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum::<f64>()
        / classes.len() as f64;
    Ok(KMeansOutcome {
        f1,
        assignments,
        cluster_labels: majority.iter().map(|m| m.map(|c| classes[c].clone())).collect(),
        inertia,
    })
}

/// Settings for [`fit_classifier_field`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierOptions {
    pub l2_penalty: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for ClassifierOptions {
    fn default() -> Self {
        Self {
            l2_penalty: 1.0,
            max_iters: 5000,
            grad_tol: 1e-6,
        }
    }
}

/// Fitted class-probability field and how the optimizer ended.
#[derive(Clone, Debug)]
pub struct ClassifierFit<S> {
    /// `p(c | z)` at every cell center, classes in sorted label order.
    pub field: MeaningField<S>,
    pub classes: Vec<String>,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    /// Loss after each accepted step, starting with the initial loss.
    pub loss_history: Vec<f64>,
}

const FEATURES: usize = 6;

struct Standardizer {
    mean: [f64; 2],
    scale: [f64; 2],
}

impl Standardizer {
    fn features(&self, z: [f64; 2]) -> [f64; FEATURES] {
        let u = [(z[0] - self.mean[0]) / self.scale[0], (z[1] - self.mean[1]) / self.scale[1]];
        [1.0, u[0], u[1], u[0] * u[0], u[0] * u[1], u[1] * u[1]]
    }
}

fn softmax_into(logits: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - m).exp();
        s += *l;
    }
    for l in logits.iter_mut() {
        *l /= s;
    }
}

struct Problem {
    x: Vec<[f64; FEATURES]>,
    y: Vec<usize>,
    classes: usize,
    l2: f64,
}

impl Problem {
    /// Summed cross-entropy plus `l2/2 |W|^2` over the non-bias weights.
    fn loss(&self, w: &[f64]) -> f64 {
        let c = self.classes;
        let data: f64 = self
            .x
            .iter()
            .zip(&self.y)
            .map(|(x, &y)| {
                let logits: Vec<f64> = (0..c).map(|k| dot(&w[k * FEATURES..(k + 1) * FEATURES], x)).collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
                lse - logits[y]
            })
            .sum();
        data + 0.5 * self.l2 * penalized_sq(w)
    }

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let c = self.classes;
        let mut g = vec![0.0; w.len()];
        let mut p = vec![0.0; c];
        for (x, &y) in self.x.iter().zip(&self.y) {
            for k in 0..c {
                p[k] = dot(&w[k * FEATURES..(k + 1) * FEATURES], x);
            }
            softmax_into(&mut p);
            p[y] -= 1.0;
            for k in 0..c {
                for f in 0..FEATURES {
                    g[k * FEATURES + f] += p[k] * x[f];
                }
            }
        }
        for k in 0..c {
            for f in 1..FEATURES {
                g[k * FEATURES + f] += self.l2 * w[k * FEATURES + f];
            }
        }
        g
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn penalized_sq(w: &[f64]) -> f64 {
    w.chunks(FEATURES).map(|r| r[1..].iter().map(|v| v * v).sum::<f64>()).sum()
}

/// Multinomial logistic regression on quadratic features of the
/// standardized latent coordinates, evaluated at every cell center.
pub fn fit_classifier_field<S: Scalar>(
    e: &EmbeddingSet<S>,
    spec: &GridSpec<S>,
    opts: ClassifierOptions,
) -> Result<ClassifierFit<S>> {
    let labels = e.labels().ok_or_else(|| Error::input("classifier needs labelled embeddings"))?;
    let classes = e.classes().expect("labels present");
    if classes.len() < 2 {
        return Err(Error::input("classifier needs at least two classes"));
    }
    if !(opts.l2_penalty.is_finite() && opts.l2_penalty >= 0.0) {
        return Err(Error::input(format!("l2 penalty must be >= 0, got {}", opts.l2_penalty)));
    }
    let pts: Vec<[f64; 2]> = e.points().iter().map(|p| [p[0].to_f64_lossy(), p[1].to_f64_lossy()]).collect();
    let n = pts.len() as f64;
    let mut mean = [0.0; 2];
    for p in &pts {
        mean[0] += p[0] / n;
        mean[1] += p[1] / n;
    }
    let mut scale = [0.0; 2];
    for p in &pts {
        scale[0] += (p[0] - mean[0]).powi(2) / n;
        scale[1] += (p[1] - mean[1]).powi(2) / n;
    }
    let scale = scale.map(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
    let std = Standardizer { mean, scale };
    let problem = Problem {
        x: pts.iter().map(|&p| std.features(p)).collect(),
        y: labels.iter().map(|l| classes.binary_search(l).expect("label is a class")).collect(),
        classes: classes.len(),
        l2: opts.l2_penalty,
    };

    let mut w = vec![0.0; classes.len() * FEATURES];
    let mut loss = problem.loss(&w);
    let mut history = vec![loss];
    let mut step = 1.0;
    let mut iterations = 0;
    let mut g = problem.gradient(&w);
    let mut gnorm = dot(&g, &g).sqrt();
    while gnorm > opts.grad_tol && iterations < opts.max_iters {
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = w.iter().zip(&g).map(|(wi, gi)| wi - step * gi).collect();
            let l = problem.loss(&trial);
            if l <= loss - 1e-4 * step * gnorm * gnorm {
                accepted = Some((trial, l));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, l)) = accepted else { break };
        w = trial;
        loss = l;
        history.push(loss);
        iterations += 1;
        step *= 2.0;
        g = problem.gradient(&w);
        gnorm = dot(&g, &g).sqrt();
    }

    let c = classes.len();
    let mut values = Array3::zeros((spec.n1(), spec.n2(), c));
    for i in 0..spec.n1() {
        for j in 0..spec.n2() {
            let z = spec.center(i, j);
            let x = std.features([z[0].to_f64_lossy(), z[1].to_f64_lossy()]);
            let mut p: Vec<f64> = (0..c).map(|k| dot(&w[k * FEATURES..(k + 1) * FEATURES], &x)).collect();
            softmax_into(&mut p);
            for k in 0..c {
                values[[i, j, k]] = S::lit(p[k]);
            }
        }
    }
    Ok(ClassifierFit {
        field: MeaningField::new(*spec, values, true)?,
        classes,
        iterations,
        converged: gnorm <= opts.grad_tol,
        grad_norm: gnorm,
        loss_history: history,
    })
}

/// Weighted coefficient of variation, `std / mean` with weights `w`.
pub fn weighted_cv<S: Scalar>(values: &Array2<S>, weights: &Array2<S>) -> Result<f64> {
    if values.dim() != weights.dim() {
        return Err(Error::input("values and weights differ in shape"));
    }
    let mut sw = 0.0;
    let mut swv = 0.0;
    for (v, w) in values.iter().zip(weights) {
        sw += w.to_f64_lossy();
        swv += w.to_f64_lossy() * v.to_f64_lossy();
    }
    if !(sw > 0.0) {
        return Err(Error::input("weights sum to zero"));
    }
    let mean = swv / sw;
    if mean == 0.0 {
        return Err(Error::input("coefficient of variation of a zero-mean field"));
    }
    let var: f64 = values
        .iter()
        .zip(weights)
        .map(|(v, w)| w.to_f64_lossy() * (v.to_f64_lossy() - mean).powi(2))
        .sum::<f64>()
        / sw;
    Ok(var.sqrt() / mean.abs())
}

/// Before/after comparison of an equalizing transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub entropy_before: f64,
    pub entropy_after: f64,
    /// `None` when the embeddings carry no labels.
    pub f1_before: Option<f64>,
    pub f1_after: Option<f64>,
    pub cv_before: f64,
    pub cv_after: f64,
    /// Total transformed cell area over total original cell area.
    pub area_ratio: f64,
}

/// Settings for [`equalization_report`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReportOptions {
    pub bins: usize,
    pub kmeans: KMeansOptions,
    pub density_floor_rel: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            bins: 64,
            kmeans: KMeansOptions::default(),
            density_floor_rel: 1e-8,
        }
    }
}

/// Area-weighted spread of density before and after a transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Equalization {
    pub cv_before: f64,
    pub cv_after: f64,
    /// Total transformed area over total grid area.
    pub area_ratio: f64,
}

pub fn density_equalization<S: Scalar>(m: &MeasureField<S>, t: &TransformField<S>, floor_rel: f64) -> Result<Equalization> {
    if !m.spec().same_as(t.spec()) {
        return Err(Error::input("measure and transform live on different grids"));
    }
    let original = Array2::from_elem(m.values().dim(), m.spec().cell_area());
    let cv_before = weighted_cv(&floored_density(m, floor_rel), &original)?;
    let after_density = cell_density_after(m, t, floor_rel)?;
    let areas = t.transformed_cell_areas();
    let cv_after = weighted_cv(after_density.values(), &areas)?;
    let area_ratio = areas.iter().map(|a| a.to_f64_lossy()).sum::<f64>()
        / original.iter().map(|a| a.to_f64_lossy()).sum::<f64>();
    Ok(Equalization {
        cv_before,
        cv_after,
        area_ratio,
    })
}

pub fn equalization_report<S: Scalar>(
    m: &MeasureField<S>,
    t: &TransformField<S>,
    before: &EmbeddingSet<S>,
    after: &EmbeddingSet<S>,
    opts: ReportOptions,
) -> Result<EvalReport> {
    let eq = density_equalization(m, t, opts.density_floor_rel)?;
    let f1 = |e: &EmbeddingSet<S>| -> Result<Option<f64>> {
        match e.labels() {
            Some(_) => Ok(Some(kmeans_f1(e, opts.kmeans)?.f1)),
            None => Ok(None),
        }
    };
    Ok(EvalReport {
        entropy_before: histogram_entropy(before, opts.bins)?,
        entropy_after: histogram_entropy(after, opts.bins)?,
        f1_before: f1(before)?,
        f1_after: f1(after)?,
        cv_before: eq.cv_before,
        cv_after: eq.cv_after,
        area_ratio: eq.area_ratio,
    })
}
