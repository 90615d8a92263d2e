//! Grid geometry over the 2-D latent space and bilinear interpolation between
//! cell centers.
//!
//! Cells are indexed `(i, j)` with `i` along axis 1 and `j` along axis 2,
//! both 0-based; storage is row-major with axis 1 outermost. Cell `(i, j)`
//! has its center at `(min_1 + (i + 0.5) dz_1, min_2 + (j + 0.5) dz_2)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::EmbeddingSet;
use crate::scalar::{Point, Scalar};

/// Axis-aligned, uniform rectangular grid over the latent space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec<S> {
    min: Point<S>,
    max: Point<S>,
    n: [usize; 2],
}

impl<S: Scalar> GridSpec<S> {
    /// Validates bounds and resolution. Each axis needs `max > min` and at
    /// least two cells so that bilinear interpolation has a stencil.
    pub fn new(min: Point<S>, max: Point<S>, n: [usize; 2]) -> Result<Self> {
        for a in 0..2 {
            if !(min[a].is_finite() && max[a].is_finite()) {
                return Err(Error::input(format!("non-finite bounds on axis {}", a + 1)));
            }
            if max[a] <= min[a] {
                return Err(Error::input(format!(
                    "axis {}: max {} must exceed min {}",
                    a + 1,
                    max[a],
                    min[a]
                )));
            }
            if n[a] < 2 {
                return Err(Error::input(format!(
                    "axis {}: need at least 2 cells, got {}",
                    a + 1,
                    n[a]
                )));
            }
        }
        Ok(Self { min, max, n })
    }

    /// Grid covering the bounding box of `embeddings`, grown by
    /// `pad_fraction` times the box side on every side. A zero-width axis is
    /// first widened to 1 around the data.
    pub fn covering(embeddings: &EmbeddingSet<S>, n1: usize, n2: usize, pad_fraction: S) -> Result<Self> {
        let pts = embeddings.points();
        if pts.is_empty() {
            return Err(Error::input("cannot build a grid over an empty embedding set"));
        }
        if !(pad_fraction >= S::zero()) {
            return Err(Error::input("pad fraction must be non-negative"));
        }
        let mut lo = pts[0];
        let mut hi = pts[0];
        for p in pts {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let half = S::lit(0.5);
        for a in 0..2 {
            if hi[a] <= lo[a] {
                let c = lo[a];
                lo[a] = c - half;
                hi[a] = c + half;
            }
            let pad = pad_fraction * (hi[a] - lo[a]);
            lo[a] = lo[a] - pad;
            hi[a] = hi[a] + pad;
        }
        Self::new(lo, hi, [n1, n2])
    }

    #[inline]
    pub fn min(&self) -> Point<S> {
        self.min
    }

    #[inline]
    pub fn max(&self) -> Point<S> {
        self.max
    }

    #[inline]
    pub fn shape(&self) -> [usize; 2] {
        self.n
    }

    #[inline]
    pub fn n1(&self) -> usize {
        self.n[0]
    }

    #[inline]
    pub fn n2(&self) -> usize {
        self.n[1]
    }

    #[inline]
    pub fn num_cells(&self) -> usize {
        self.n[0] * self.n[1]
    }

    /// Cell widths `(dz_1, dz_2)`.
    #[inline]
    pub fn cell_width(&self) -> [S; 2] {
        [
            (self.max[0] - self.min[0]) / S::from_usize_lossy(self.n[0]),
            (self.max[1] - self.min[1]) / S::from_usize_lossy(self.n[1]),
        ]
    }

    #[inline]
    pub fn cell_area(&self) -> S {
        let w = self.cell_width();
        w[0] * w[1]
    }

    /// Smaller of the two cell widths; the unit for "cell width" tolerances.
    #[inline]
    pub fn min_cell_width(&self) -> S {
        let w = self.cell_width();
        w[0].min(w[1])
    }

    pub fn cell_center(&self, i: usize, j: usize) -> Result<Point<S>> {
        if i >= self.n[0] || j >= self.n[1] {
            return Err(Error::input(format!(
                "cell ({i}, {j}) outside {}x{} grid",
                self.n[0], self.n[1]
            )));
        }
        Ok(self.center(i, j))
    }

    #[inline]
    pub(crate) fn center(&self, i: usize, j: usize) -> Point<S> {
        let w = self.cell_width();
        let half = S::lit(0.5);
        [
            self.min[0] + (S::from_usize_lossy(i) + half) * w[0],
            self.min[1] + (S::from_usize_lossy(j) + half) * w[1],
        ]
    }

    #[inline]
    pub fn contains(&self, z: Point<S>) -> bool {
        z[0] >= self.min[0] && z[0] <= self.max[0] && z[1] >= self.min[1] && z[1] <= self.max[1]
    }

    /// Index of the cell containing `z`; points on the upper edge belong to
    /// the last cell.
    pub fn cell_of(&self, z: Point<S>) -> Option<(usize, usize)> {
        if !self.contains(z) {
            return None;
        }
        let w = self.cell_width();
        let idx = |a: usize| -> usize {
            let u = ((z[a] - self.min[a]) / w[a]).floor();
            u.to_usize().unwrap_or(0).min(self.n[a] - 1)
        };
        Some((idx(0), idx(1)))
    }

    /// Bilinear stencil for `z`: the lower-left cell-center lattice node and
    /// the fractional offsets towards the next node on each axis. Within the
    /// half-cell margin the offsets are clamped, giving constant
    /// extrapolation from the boundary centers.
    pub(crate) fn stencil(&self, z: Point<S>) -> Result<Stencil<S>> {
        if !self.contains(z) {
            return Err(Error::domain(format!(
                "({}, {}) outside grid [{}, {}] x [{}, {}]",
                z[0], z[1], self.min[0], self.max[0], self.min[1], self.max[1]
            )));
        }
        let w = self.cell_width();
        let half = S::lit(0.5);
        let axis = |a: usize| -> (usize, S) {
            let last = S::from_usize_lossy(self.n[a] - 1);
            let u = ((z[a] - self.min[a]) / w[a] - half).max(S::zero()).min(last);
            let base = u.floor().to_usize().unwrap_or(0).min(self.n[a] - 2);
            (base, u - S::from_usize_lossy(base))
        };
        let (i, s) = axis(0);
        let (j, t) = axis(1);
        Ok(Stencil { i, j, s, t })
    }

    /// True when both grids describe the same cells.
    pub fn same_as(&self, other: &GridSpec<S>) -> bool {
        self.n == other.n && self.min == other.min && self.max == other.max
    }
}

/// Bilinear interpolation weights between centers `(i, j)` and `(i+1, j+1)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil<S> {
    pub i: usize,
    pub j: usize,
    pub s: S,
    pub t: S,
}

impl<S: Scalar> Stencil<S> {
    #[inline]
    pub fn blend(&self, v00: S, v10: S, v01: S, v11: S) -> S {
        let one = S::one();
        (one - self.s) * ((one - self.t) * v00 + self.t * v01) + self.s * ((one - self.t) * v10 + self.t * v11)
    }
}

/// A field stored at cell centers that can be interpolated.
pub trait GridField<S: Scalar> {
    fn spec(&self) -> &GridSpec<S>;
    /// Number of values stored per cell.
    fn components(&self) -> usize;
    fn value(&self, i: usize, j: usize, c: usize) -> S;
}

/// Bilinear interpolation of `field` at `z`, one entry per component.
pub fn bilinear_sample<S: Scalar, F: GridField<S> + ?Sized>(field: &F, z: Point<S>) -> Result<Vec<S>> {
    let st = field.spec().stencil(z)?;
    let (i, j) = (st.i, st.j);
    Ok((0..field.components())
        .map(|c| {
            st.blend(
                field.value(i, j, c),
                field.value(i + 1, j, c),
                field.value(i, j + 1, c),
                field.value(i + 1, j + 1, c),
            )
        })
        .collect())
}
