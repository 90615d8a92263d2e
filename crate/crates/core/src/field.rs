//! Field containers living on a [`GridSpec`] and the embedding set type.

use ndarray::{Array2, Array3, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::grid::{GridField, GridSpec};
use crate::scalar::{Point, Scalar};
use crate::spatial::BucketIndex;

/// Entrywise and sum tolerance for probability vectors.
pub(crate) fn distribution_tol<S: Scalar>(len: usize) -> S {
    S::tol(1e-9) * S::from_usize_lossy(len.max(1)).sqrt()
}

/// Checks that `v` is a probability vector: entries >= -tol, sum within tol
/// of 1.
pub(crate) fn check_distribution<S: Scalar>(v: ArrayView1<'_, S>) -> std::result::Result<(), String> {
    let tol = distribution_tol::<S>(v.len());
    let mut sum = S::zero();
    for (k, &x) in v.iter().enumerate() {
        if x < -tol {
            return Err(format!("entry {k} is negative ({x})"));
        }
        sum = sum + x;
    }
    if (sum - S::one()).abs() > tol {
        return Err(format!("entries sum to {sum}, not 1"));
    }
    Ok(())
}

/// Per-cell meaning vectors `h`, shape `n1 x n2 x dh`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeaningField<S> {
    spec: GridSpec<S>,
    values: Array3<S>,
    distribution: bool,
}

impl<S: Scalar> MeaningField<S> {
    /// When `distribution` is set every cell vector must be a probability
    /// vector.
    pub fn new(spec: GridSpec<S>, values: Array3<S>, distribution: bool) -> Result<Self> {
        let (n1, n2, dh) = values.dim();
        if [n1, n2] != spec.shape() {
            return Err(Error::input(format!(
                "meaning values are {n1}x{n2}, grid is {}x{}",
                spec.n1(),
                spec.n2()
            )));
        }
        if dh == 0 {
            return Err(Error::input("meaning vectors must have at least one component"));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!("non-finite meaning value at flat index {bad}")));
        }
        if distribution {
            for ((i, j), _) in values.index_axis(Axis(2), 0).indexed_iter() {
                check_distribution(values.slice(ndarray::s![i, j, ..]))
                    .map_err(|e| Error::input(format!("cell ({i}, {j}) is not a distribution: {e}")))?;
            }
        }
        Ok(Self {
            spec,
            values,
            distribution,
        })
    }

    #[inline]
    pub fn spec(&self) -> &GridSpec<S> {
        &self.spec
    }

    #[inline]
    pub fn values(&self) -> &Array3<S> {
        &self.values
    }

    #[inline]
    pub fn dh(&self) -> usize {
        self.values.dim().2
    }

    #[inline]
    pub fn is_distribution(&self) -> bool {
        self.distribution
    }

    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> ArrayView1<'_, S> {
        self.values.slice(ndarray::s![i, j, ..])
    }

    pub fn into_values(self) -> Array3<S> {
        self.values
    }
}

impl<S: Scalar> GridField<S> for MeaningField<S> {
    fn spec(&self) -> &GridSpec<S> {
        &self.spec
    }
    fn components(&self) -> usize {
        self.dh()
    }
    fn value(&self, i: usize, j: usize, c: usize) -> S {
        self.values[[i, j, c]]
    }
}

/// Scalar non-negative field over the grid: a measure, a density, or a
/// distance field.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasureField<S> {
    spec: GridSpec<S>,
    values: Array2<S>,
}

impl<S: Scalar> MeasureField<S> {
    pub fn new(spec: GridSpec<S>, values: Array2<S>) -> Result<Self> {
        if values.dim() != (spec.n1(), spec.n2()) {
            return Err(Error::input(format!(
                "measure values are {:?}, grid is {}x{}",
                values.dim(),
                spec.n1(),
                spec.n2()
            )));
        }
        if let Some(((i, j), v)) = values.indexed_iter().find(|(_, v)| !(v.is_finite() && **v >= S::zero())) {
            return Err(Error::input(format!(
                "measure value at ({i}, {j}) must be finite and non-negative, got {v}"
            )));
        }
        Ok(Self { spec, values })
    }

    /// Constructs without validation; callers guarantee the invariants.
    pub(crate) fn from_parts(spec: GridSpec<S>, values: Array2<S>) -> Self {
        debug_assert_eq!(values.dim(), (spec.n1(), spec.n2()));
        Self { spec, values }
    }

    pub fn constant(spec: GridSpec<S>, value: S) -> Result<Self> {
        Self::new(spec, Array2::from_elem((spec.n1(), spec.n2()), value))
    }

    #[inline]
    pub fn spec(&self) -> &GridSpec<S> {
        &self.spec
    }

    #[inline]
    pub fn values(&self) -> &Array2<S> {
        &self.values
    }

    pub fn into_values(self) -> Array2<S> {
        self.values
    }

    pub fn mean(&self) -> S {
        self.values.iter().copied().sum::<S>() / S::from_usize_lossy(self.values.len())
    }

    pub fn max_value(&self) -> S {
        self.values.iter().copied().fold(S::zero(), S::max)
    }

    /// Applies `f` cellwise; the result is validated again.
    pub fn map(&self, f: impl Fn(S) -> S) -> Result<Self> {
        Self::new(self.spec, self.values.mapv(f))
    }
}

impl<S: Scalar> GridField<S> for MeasureField<S> {
    fn spec(&self) -> &GridSpec<S> {
        &self.spec
    }
    fn components(&self) -> usize {
        1
    }
    fn value(&self, i: usize, j: usize, _c: usize) -> S {
        self.values[[i, j]]
    }
}

/// Latent points with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet<S> {
    points: Vec<Point<S>>,
    labels: Option<Vec<String>>,
}

impl<S: Scalar> EmbeddingSet<S> {
    pub fn new(points: Vec<Point<S>>, labels: Option<Vec<String>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::input("embedding set is empty"));
        }
        if let Some(l) = &labels {
            if l.len() != points.len() {
                return Err(Error::input(format!(
                    "{} labels for {} points",
                    l.len(),
                    points.len()
                )));
            }
        }
        if let Some(k) = points.iter().position(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return Err(Error::input(format!("point {k} has non-finite coordinates")));
        }
        Ok(Self { points, labels })
    }

    #[inline]
    pub fn points(&self) -> &[Point<S>] {
        &self.points
    }

    #[inline]
    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Distinct labels in sorted order.
    pub fn classes(&self) -> Option<Vec<String>> {
        let mut c: Vec<String> = self.labels.as_ref()?.clone();
        c.sort();
        c.dedup();
        Some(c)
    }

    /// Same labels, new coordinates.
    pub fn with_points(&self, points: Vec<Point<S>>) -> Result<Self> {
        Self::new(points, self.labels.clone())
    }
}

/// A meaning field built from scattered samples, with a mask of the cells
/// that received no sample and were imputed.
#[derive(Clone, Debug)]
pub struct AggregatedField<S> {
    pub field: MeaningField<S>,
    /// `true` where the cell value was copied from the nearest sampled cell.
    pub imputed: Array2<bool>,
}

/// Averages sample meaning vectors per grid cell.
///
/// Cells without samples copy the value of the nearest sampled cell
/// (Euclidean distance between cell centers, ties to the lexicographically
/// smallest `(i, j)`).
pub fn aggregate_samples_to_grid<S: Scalar>(
    samples: &[(Point<S>, Vec<S>)],
    spec: &GridSpec<S>,
    distribution: bool,
) -> Result<AggregatedField<S>> {
    let Some(first) = samples.first() else {
        return Err(Error::input("no samples to aggregate"));
    };
    let dh = first.1.len();
    let (n1, n2) = (spec.n1(), spec.n2());
    let mut sums = Array3::<S>::zeros((n1, n2, dh));
    let mut counts = Array2::<usize>::zeros((n1, n2));
    for (k, (z, h)) in samples.iter().enumerate() {
        if h.len() != dh {
            return Err(Error::input(format!(
                "sample {k} has {} components, expected {dh}",
                h.len()
            )));
        }
        let (i, j) = spec
            .cell_of(*z)
            .ok_or_else(|| Error::at(k, Error::domain(format!("sample at ({}, {}) outside grid", z[0], z[1]))))?;
        counts[[i, j]] += 1;
        for (c, &v) in h.iter().enumerate() {
            sums[[i, j, c]] = sums[[i, j, c]] + v;
        }
    }

    // Filled cells in lexicographic order so the index tie-break matches.
    let w = spec.cell_width();
    let aspect = w[1] / w[0];
    let mut filled = Vec::new();
    let mut filled_pts = Vec::new();
    for i in 0..n1 {
        for j in 0..n2 {
            if counts[[i, j]] > 0 {
                filled.push((i, j));
                filled_pts.push([S::from_usize_lossy(i), S::from_usize_lossy(j) * aspect]);
            }
        }
    }
    for &(i, j) in &filled {
        let n = S::from_usize_lossy(counts[[i, j]]);
        for c in 0..dh {
            sums[[i, j, c]] = sums[[i, j, c]] / n;
        }
    }
    let index = BucketIndex::new(filled_pts);
    let mut imputed = Array2::from_elem((n1, n2), false);
    for i in 0..n1 {
        for j in 0..n2 {
            if counts[[i, j]] == 0 {
                let (src, _) = index.nearest([S::from_usize_lossy(i), S::from_usize_lossy(j) * aspect]);
                let (si, sj) = filled[src];
                for c in 0..dh {
                    sums[[i, j, c]] = sums[[si, sj, c]];
                }
                imputed[[i, j]] = true;
            }
        }
    }
    Ok(AggregatedField {
        field: MeaningField::new(*spec, sums, distribution)?,
        imputed,
    })
}
