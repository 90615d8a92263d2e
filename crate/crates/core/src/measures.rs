//! Distortion measures computed from a meaning field.
//!
//! Two families are provided. The Riemannian measure `sqrt(det(J^T J))` uses
//! a finite-difference Jacobian of the meaning map. Heuristic measures take
//! the mean dissimilarity between a cell's meaning vector and those of its
//! 4-connected neighbours, with the Jensen-Shannon distance (natural log,
//! bounded by `sqrt(ln 2)`) as the standard choice for distribution-valued
//! fields. Blur and relaxation post-process any measure.

use std::str::FromStr;

use ndarray::{Array2, ArrayView1, Zip};

use crate::error::{Error, Result};
use crate::field::{check_distribution, distribution_tol, EmbeddingSet, MeaningField, MeasureField};
use crate::scalar::Scalar;
use crate::spatial::BucketIndex;

/// Finite-difference Jacobian of the meaning map at one cell and the induced
/// metric tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianAtCell<S> {
    pub cell: (usize, usize),
    /// `dh x 2`; column `a` holds the partial derivatives along axis `a + 1`.
    pub jacobian: Array2<S>,
    /// `M = J^T J`.
    pub metric: [[S; 2]; 2],
}

/// Derivative along one axis: central in the interior, one-sided first
/// order at the boundary.
#[inline]
fn axis_diff<S: Scalar>(h: &MeaningField<S>, i: usize, j: usize, axis: usize, c: usize) -> S {
    let (n, idx) = if axis == 0 { (h.spec().n1(), i) } else { (h.spec().n2(), j) };
    let w = h.spec().cell_width()[axis];
    let at = |k: usize| if axis == 0 { h.values()[[k, j, c]] } else { h.values()[[i, k, c]] };
    if idx == 0 {
        (at(1) - at(0)) / w
    } else if idx == n - 1 {
        (at(n - 1) - at(n - 2)) / w
    } else {
        (at(idx + 1) - at(idx - 1)) / (S::lit(2.0) * w)
    }
}

pub fn finite_diff_jacobian<S: Scalar>(h: &MeaningField<S>, i: usize, j: usize) -> Result<JacobianAtCell<S>> {
    h.spec().cell_center(i, j)?;
    let dh = h.dh();
    let jac = Array2::from_shape_fn((dh, 2), |(c, a)| axis_diff(h, i, j, a, c));
    let col = |a: usize| jac.column(a);
    let dot = |a: ArrayView1<S>, b: ArrayView1<S>| a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum::<S>();
    let m01 = dot(col(0), col(1));
    let metric = [[dot(col(0), col(0)), m01], [m01, dot(col(1), col(1))]];
    Ok(JacobianAtCell {
        cell: (i, j),
        jacobian: jac,
        metric,
    })
}

/// Approximate Riemannian measure `sqrt(det(J^T J))` per cell.
///
/// Round-off negative determinants are clamped to zero, so rank-deficient
/// Jacobians (including every `dh = 1` field) give 0.
pub fn riemannian_measure<S: Scalar>(h: &MeaningField<S>) -> MeasureField<S> {
    let spec = *h.spec();
    let dh = h.dh();
    let mut out = Array2::<S>::zeros((spec.n1(), spec.n2()));
    Zip::indexed(&mut out).par_for_each(|(i, j), m| {
        let (mut g11, mut g12, mut g22) = (S::zero(), S::zero(), S::zero());
        for c in 0..dh {
            let d1 = axis_diff(h, i, j, 0, c);
            let d2 = axis_diff(h, i, j, 1, c);
            g11 = g11 + d1 * d1;
            g12 = g12 + d1 * d2;
            g22 = g22 + d2 * d2;
        }
        *m = (g11 * g22 - g12 * g12).max(S::zero()).sqrt();
    });
    MeasureField::from_parts(spec, out)
}

/// Dissimilarity between meaning vectors used by [`heuristic_measure`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DissimilarityKind {
    /// Jensen-Shannon distance; requires a distribution field.
    Jsd,
    Euclidean,
    /// `1 - cos(angle)`; zero vectors are at distance 0 from each other and
    /// 1 from anything else.
    Cosine,
}

impl FromStr for DissimilarityKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsd" => Ok(Self::Jsd),
            "euclidean" => Ok(Self::Euclidean),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::input(format!("unknown dissimilarity '{other}'"))),
        }
    }
}

/// `sum p ln(p / m)` over `p > 0`.
fn kl_to_mixture<S: Scalar>(p: &[S], m: &[S]) -> S {
    p.iter()
        .zip(m)
        .filter(|(&pi, _)| pi > S::zero())
        .map(|(&pi, &mi)| pi * (pi / mi).ln())
        .sum()
}

fn normalized<S: Scalar>(v: ArrayView1<'_, S>) -> Vec<S> {
    let clipped: Vec<S> = v.iter().map(|&x| x.max(S::zero())).collect();
    let sum: S = clipped.iter().copied().sum();
    clipped.into_iter().map(|x| x / sum).collect()
}

/// JSD on already-validated vectors.
fn jsd_unchecked<S: Scalar>(p: ArrayView1<'_, S>, q: ArrayView1<'_, S>) -> S {
    let p = normalized(p);
    let q = normalized(q);
    let half = S::lit(0.5);
    let m: Vec<S> = p.iter().zip(&q).map(|(&a, &b)| half * (a + b)).collect();
    let d = half * kl_to_mixture(&p, &m) + half * kl_to_mixture(&q, &m);
    d.max(S::zero()).sqrt()
}

/// Jensen-Shannon distance with natural logarithms.
///
/// Inputs are renormalized after clipping entries within tolerance of zero.
pub fn jsd_distance<S: Scalar>(p: &[S], q: &[S]) -> Result<S> {
    if p.len() != q.len() {
        return Err(Error::input(format!("length mismatch: {} vs {}", p.len(), q.len())));
    }
    if p.is_empty() {
        return Err(Error::input("empty probability vectors"));
    }
    let (pv, qv) = (ArrayView1::from(p), ArrayView1::from(q));
    check_distribution(pv).map_err(|e| Error::input(format!("p: {e}")))?;
    check_distribution(qv).map_err(|e| Error::input(format!("q: {e}")))?;
    Ok(jsd_unchecked(pv, qv))
}

fn dissimilarity<S: Scalar>(kind: DissimilarityKind, a: ArrayView1<'_, S>, b: ArrayView1<'_, S>) -> S {
    match kind {
        DissimilarityKind::Jsd => jsd_unchecked(a, b),
        DissimilarityKind::Euclidean => a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum::<S>().sqrt(),
        DissimilarityKind::Cosine => {
            let dot: S = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum();
            let na = a.iter().map(|&x| x * x).sum::<S>().sqrt();
            let nb = b.iter().map(|&x| x * x).sum::<S>().sqrt();
            match (na > S::zero(), nb > S::zero()) {
                (false, false) => S::zero(),
                (true, true) => (S::one() - dot / (na * nb)).max(S::zero()),
                _ => S::one(),
            }
        }
    }
}

/// Mean dissimilarity between each cell and its 4-connected neighbours.
pub fn heuristic_measure<S: Scalar>(h: &MeaningField<S>, kind: DissimilarityKind) -> Result<MeasureField<S>> {
    if kind == DissimilarityKind::Jsd && !h.is_distribution() {
        return Err(Error::input(
            "the Jensen-Shannon measure requires a distribution-valued meaning field",
        ));
    }
    let spec = *h.spec();
    let (n1, n2) = (spec.n1(), spec.n2());
    // Each edge is evaluated once; the distances are symmetric bit-for-bit.
    let mut along1 = Array2::<S>::zeros((n1 - 1, n2));
    Zip::indexed(&mut along1).par_for_each(|(i, j), d| *d = dissimilarity(kind, h.cell(i, j), h.cell(i + 1, j)));
    let mut along2 = Array2::<S>::zeros((n1, n2 - 1));
    Zip::indexed(&mut along2).par_for_each(|(i, j), d| *d = dissimilarity(kind, h.cell(i, j), h.cell(i, j + 1)));

    let mut out = Array2::<S>::zeros((n1, n2));
    Zip::indexed(&mut out).par_for_each(|(i, j), m| {
        let mut sum = S::zero();
        let mut count = 0usize;
        if i > 0 {
            sum = sum + along1[[i - 1, j]];
            count += 1;
        }
        if i + 1 < n1 {
            sum = sum + along1[[i, j]];
            count += 1;
        }
        if j > 0 {
            sum = sum + along2[[i, j - 1]];
            count += 1;
        }
        if j + 1 < n2 {
            sum = sum + along2[[i, j]];
            count += 1;
        }
        *m = sum / S::from_usize_lossy(count);
    });
    Ok(MeasureField::from_parts(spec, out))
}

/// Jensen-Shannon measure over a field of class probabilities `p(c | z)`.
pub fn classifier_measure<S: Scalar>(probabilities: &MeaningField<S>) -> Result<MeasureField<S>> {
    heuristic_measure(probabilities, DissimilarityKind::Jsd)
}

fn gaussian_taps<S: Scalar>(sigma: S) -> Vec<S> {
    let radius = (S::lit(4.0) * sigma).floor().to_usize().unwrap_or(0);
    let two_s2 = S::lit(2.0) * sigma * sigma;
    (0..=radius)
        .map(|k| {
            let k = S::from_usize_lossy(k);
            (-(k * k) / two_s2).exp()
        })
        .collect()
}

/// 1-D pass along `axis` with taps renormalized over in-bounds neighbours.
fn blur_axis<S: Scalar>(src: &Array2<S>, taps: &[S], axis: usize) -> Array2<S> {
    let (n1, n2) = src.dim();
    let n = if axis == 0 { n1 } else { n2 };
    let r = taps.len() as isize - 1;
    let mut out = Array2::<S>::zeros((n1, n2));
    Zip::indexed(&mut out).par_for_each(|(i, j), o| {
        let idx = if axis == 0 { i } else { j } as isize;
        let mut acc = S::zero();
        let mut norm = S::zero();
        for k in -r..=r {
            let p = idx + k;
            if p < 0 || p >= n as isize {
                continue;
            }
            let w = taps[k.unsigned_abs()];
            let v = if axis == 0 { src[[p as usize, j]] } else { src[[i, p as usize]] };
            acc = acc + w * v;
            norm = norm + w;
        }
        *o = acc / norm;
    });
    out
}

/// Separable Gaussian blur with `sigma` in cells, truncated at `4 sigma`.
/// Near the boundary the kernel is renormalized over the taps that fall
/// inside the grid, so constants are preserved.
pub fn gaussian_blur<S: Scalar>(m: &MeasureField<S>, sigma_cells: S) -> Result<MeasureField<S>> {
    if !(sigma_cells >= S::zero()) || !sigma_cells.is_finite() {
        return Err(Error::input("blur sigma must be finite and non-negative"));
    }
    if sigma_cells == S::zero() {
        return Ok(m.clone());
    }
    let taps = gaussian_taps(sigma_cells);
    let pass1 = blur_axis(m.values(), &taps, 0);
    let pass2 = blur_axis(&pass1, &taps, 1);
    Ok(MeasureField::from_parts(*m.spec(), pass2))
}

/// Blends the measure towards its grid mean away from the data:
/// `m' = w m + (1 - w) mean(m)` with `w = exp(-d^2 / (2 sigma^2))` and `d`
/// the distance from the cell center to the nearest embedding.
pub fn relax_to_mean<S: Scalar>(m: &MeasureField<S>, embeddings: &EmbeddingSet<S>, sigma_relax: S) -> Result<MeasureField<S>> {
    if !(sigma_relax > S::zero()) || !sigma_relax.is_finite() {
        return Err(Error::input("relaxation sigma must be positive"));
    }
    if embeddings.is_empty() {
        return Err(Error::input("relaxation needs at least one embedding"));
    }
    let spec = *m.spec();
    let mean = m.mean();
    let index = BucketIndex::new(embeddings.points().to_vec());
    let two_s2 = S::lit(2.0) * sigma_relax * sigma_relax;
    let mut out = m.values().clone();
    Zip::indexed(&mut out).par_for_each(|(i, j), v| {
        let (_, d2) = index.nearest(spec.center(i, j));
        let w = (-d2 / two_s2).exp();
        *v = w * *v + (S::one() - w) * mean;
    });
    Ok(MeasureField::from_parts(spec, out))
}

/// Tolerance callers can use when comparing distribution sums.
pub fn probability_tolerance<S: Scalar>(len: usize) -> S {
    distribution_tol(len)
}
