//! Density-equalizing transform by linear diffusion.
//!
//! The measure is treated as a density `rho_0`, embedded in a larger
//! power-of-two square filled with its mean (the "sea"), and evolved under
//! the heat equation with zero-flux walls. In the even-reflection cosine
//! basis the solution is closed form,
//!
//! ```text
//! rho(x, y, t) = sum_{p,q} c_pq exp(-pi^2 (p^2 + q^2) t / L^2) cos(pi p x / L) cos(pi q y / L)
//! ```
//!
//! so density and gradient can be synthesized on the padded grid at any time
//! with inverse DCT/DST passes. Every original cell center is advected
//! through `v = -grad(rho) / rho` with an adaptive RK4 integrator until the
//! remaining displacement is negligible. All solver arithmetic uses padded
//! grid units, where one unit is one cell width along each axis.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use rustdct::{Dct2, Dct3, DctPlanner, Dst3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::MeasureField;
use crate::grid::{GridField, GridSpec};
use crate::scalar::{Point, Scalar};

/// Solver settings. All tolerances are in cell widths.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionParams {
    /// Padded side relative to `max(n1, n2)`, rounded up to a power of two.
    pub pad_factor: f64,
    /// Density floor as a fraction of the mean measure.
    pub density_floor_rel: f64,
    /// Bound on the remaining displacement at stop, and on the per-step
    /// error estimate of the integrator.
    pub convergence_tol: f64,
    /// Stop once `exp(-lambda_min t) < 10^-max_time_factor`.
    pub max_time_factor: f64,
    /// Step-size safety factor.
    pub rk_safety: f64,
    /// Largest displacement of any point in one accepted step.
    pub max_step_displacement: f64,
}

impl Default for DiffusionParams {
    fn default() -> Self {
        Self {
            pad_factor: 2.0,
            density_floor_rel: 1e-8,
            convergence_tol: 1e-9,
            max_time_factor: 12.0,
            rk_safety: 0.8,
            max_step_displacement: 0.2,
        }
    }
}

impl DiffusionParams {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("pad_factor", self.pad_factor),
            ("density_floor_rel", self.density_floor_rel),
            ("convergence_tol", self.convergence_tol),
            ("max_time_factor", self.max_time_factor),
            ("rk_safety", self.rk_safety),
            ("max_step_displacement", self.max_step_displacement),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::input(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.pad_factor < 1.5 {
            return Err(Error::input(format!("pad_factor must be at least 1.5, got {}", self.pad_factor)));
        }
        if self.rk_safety >= 1.0 {
            return Err(Error::input("rk_safety must be below 1"));
        }
        Ok(())
    }
}

/// What the solver did. Times are in padded-grid units.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    /// Accepted integrator steps.
    pub iterations: usize,
    pub rejected_steps: usize,
    /// Density/gradient syntheses on the padded grid.
    pub snapshots: usize,
    pub padded_size: usize,
    pub final_time: f64,
    pub time_horizon: f64,
    /// Largest single-point displacement in the last accepted step, in cells.
    pub final_max_increment: f64,
    /// `max |v| * remaining-time budget` at stop, in cells.
    pub remaining_displacement_bound: f64,
    /// Largest displacement of any cell center from its start, in cells.
    pub max_displacement: f64,
    /// Stopped because the remaining-displacement bound fell below the
    /// tolerance before the time horizon.
    pub converged: bool,
    /// Stopped at the time horizon.
    pub reached_horizon: bool,
}

/// Transformed positions `T(z_c)` of every cell center.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformField<S> {
    spec: GridSpec<S>,
    positions: Array3<S>,
    diagnostics: SolverDiagnostics,
}

impl<S: Scalar> TransformField<S> {
    /// Wraps externally computed positions (shape `n1 x n2 x 2`).
    pub fn new(spec: GridSpec<S>, positions: Array3<S>) -> Result<Self> {
        if positions.dim() != (spec.n1(), spec.n2(), 2) {
            return Err(Error::input(format!(
                "positions have shape {:?}, expected ({}, {}, 2)",
                positions.dim(),
                spec.n1(),
                spec.n2()
            )));
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("non-finite transformed position"));
        }
        Ok(Self {
            spec,
            positions,
            diagnostics: SolverDiagnostics::default(),
        })
    }

    pub fn identity(spec: GridSpec<S>) -> Self {
        Self::from_map(spec, |z| z)
    }

    /// Positions given by evaluating `f` at every cell center.
    pub fn from_map(spec: GridSpec<S>, f: impl Fn(Point<S>) -> Point<S>) -> Self {
        let mut positions = Array3::zeros((spec.n1(), spec.n2(), 2));
        for i in 0..spec.n1() {
            for j in 0..spec.n2() {
                let p = f(spec.center(i, j));
                positions[[i, j, 0]] = p[0];
                positions[[i, j, 1]] = p[1];
            }
        }
        Self {
            spec,
            positions,
            diagnostics: SolverDiagnostics::default(),
        }
    }

    #[inline]
    pub fn spec(&self) -> &GridSpec<S> {
        &self.spec
    }

    #[inline]
    pub fn positions(&self) -> &Array3<S> {
        &self.positions
    }

    #[inline]
    pub fn diagnostics(&self) -> &SolverDiagnostics {
        &self.diagnostics
    }

    #[inline]
    pub fn position(&self, i: usize, j: usize) -> Point<S> {
        [self.positions[[i, j, 0]], self.positions[[i, j, 1]]]
    }

    /// `T(z)` by bilinear interpolation of the transformed cell centers.
    pub fn forward_map(&self, z: Point<S>) -> Result<Point<S>> {
        let st = self.spec.stencil(z)?;
        let (i, j) = (st.i, st.j);
        let comp = |c: usize| {
            st.blend(
                self.positions[[i, j, c]],
                self.positions[[i + 1, j, c]],
                self.positions[[i, j + 1, c]],
                self.positions[[i + 1, j + 1, c]],
            )
        };
        Ok([comp(0), comp(1)])
    }

    fn quad(&self, i: usize, j: usize) -> [Point<S>; 4] {
        [
            self.position(i, j),
            self.position(i + 1, j),
            self.position(i + 1, j + 1),
            self.position(i, j + 1),
        ]
    }

    /// Signed area of the quad spanned by centers `(i, j)..(i+1, j+1)`.
    pub fn quad_signed_area(&self, i: usize, j: usize) -> S {
        shoelace(&self.quad(i, j))
    }

    /// Number of center quads with non-positive signed area.
    pub fn inverted_quads(&self) -> usize {
        let (n1, n2) = (self.spec.n1(), self.spec.n2());
        (0..n1 - 1)
            .into_par_iter()
            .map(|i| (0..n2 - 1).filter(|&j| !(self.quad_signed_area(i, j) > S::zero())).count())
            .sum()
    }

    /// `T^-1(zt)`: locate the transformed quad containing `zt` (walk from the
    /// quad under `zt` read as an untransformed point, exhaustive scan as a
    /// fallback) and invert its bilinear map by Newton iteration.
    pub fn inverse_map(&self, zt: Point<S>) -> Result<Point<S>> {
        let w = self.spec.min_cell_width();
        let scale = zt[0].abs().max(zt[1].abs()).max(w);
        let tol = (S::lit(1e-12) * w).max(S::lit(16.0) * S::epsilon() * scale);
        let seed = {
            let mut z = zt;
            for a in 0..2 {
                z[a] = z[a].max(self.spec.min()[a]).min(self.spec.max()[a]);
            }
            let st = self.spec.stencil(z)?;
            (st.i, st.j)
        };
        let mut newton_failed = false;
        if let Some(q) = self.walk(seed, zt, tol) {
            match self.solve_in_quad(q, zt, tol) {
                Some(z) => return Ok(z),
                None => newton_failed = true,
            }
        }
        let (n1, n2) = (self.spec.n1(), self.spec.n2());
        let mut any_hit = false;
        for i in 0..n1 - 1 {
            for j in 0..n2 - 1 {
                if self.containment(i, j, zt, tol).1 {
                    any_hit = true;
                    if let Some(z) = self.solve_in_quad((i, j), zt, tol) {
                        return Ok(z);
                    }
                }
            }
        }
        if any_hit || newton_failed {
            Err(Error::solver(format!(
                "inverse bilinear solve did not converge for ({}, {})",
                zt[0], zt[1]
            )))
        } else {
            Err(Error::domain(format!(
                "({}, {}) is outside the transformed mesh",
                zt[0], zt[1]
            )))
        }
    }

    /// Index of the most violated edge (0: low j, 1: high i, 2: high j,
    /// 3: low i) and whether the point is inside.
    fn containment(&self, i: usize, j: usize, p: Point<S>, tol: S) -> (usize, bool) {
        let q = self.quad(i, j);
        let mut worst = (0, S::infinity());
        for e in 0..4 {
            let a = q[e];
            let b = q[(e + 1) % 4];
            let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
            let len = ex.hypot(ey);
            let side = if len > S::zero() {
                (ex * (p[1] - a[1]) - ey * (p[0] - a[0])) / len
            } else {
                S::zero()
            };
            if side < worst.1 {
                worst = (e, side);
            }
        }
        (worst.0, worst.1 >= -tol)
    }

    fn walk(&self, start: (usize, usize), p: Point<S>, tol: S) -> Option<(usize, usize)> {
        let (n1, n2) = (self.spec.n1(), self.spec.n2());
        let (mut i, mut j) = start;
        for _ in 0..4 * (n1 + n2) {
            let (edge, inside) = self.containment(i, j, p, tol);
            if inside {
                return Some((i, j));
            }
            match edge {
                0 if j > 0 => j -= 1,
                1 if i + 2 < n1 => i += 1,
                2 if j + 2 < n2 => j += 1,
                3 if i > 0 => i -= 1,
                _ => return None,
            }
        }
        None
    }

    fn solve_in_quad(&self, (i, j): (usize, usize), p: Point<S>, tol: S) -> Option<Point<S>> {
        let [p00, p10, p11, p01] = self.quad(i, j);
        let one = S::one();
        let half = S::lit(0.5);
        let (mut s, mut t) = (half, half);
        for _ in 0..25 {
            let f = [
                p00[0] * (one - s) * (one - t) + p10[0] * s * (one - t) + p11[0] * s * t + p01[0] * (one - s) * t - p[0],
                p00[1] * (one - s) * (one - t) + p10[1] * s * (one - t) + p11[1] * s * t + p01[1] * (one - s) * t - p[1],
            ];
            if f[0].hypot(f[1]) <= tol {
                let slack = S::lit(1e-6);
                if s < -slack || t < -slack || s > one + slack || t > one + slack {
                    return None;
                }
                let c = self.spec.center(i, j);
                let w = self.spec.cell_width();
                return Some([c[0] + s * w[0], c[1] + t * w[1]]);
            }
            let ds = [
                (one - t) * (p10[0] - p00[0]) + t * (p11[0] - p01[0]),
                (one - t) * (p10[1] - p00[1]) + t * (p11[1] - p01[1]),
            ];
            let dt = [
                (one - s) * (p01[0] - p00[0]) + s * (p11[0] - p10[0]),
                (one - s) * (p01[1] - p00[1]) + s * (p11[1] - p10[1]),
            ];
            let det = ds[0] * dt[1] - ds[1] * dt[0];
            if det == S::zero() || !det.is_finite() {
                return None;
            }
            s = s - (f[0] * dt[1] - f[1] * dt[0]) / det;
            t = t - (ds[0] * f[1] - ds[1] * f[0]) / det;
        }
        None
    }

    /// Polygon of each transformed cell: corners are the means of the four
    /// surrounding transformed centers, with the lattice extended linearly
    /// by one ghost layer at the boundary.
    pub fn transformed_cell_areas(&self) -> Array2<S> {
        let (n1, n2) = (self.spec.n1() as isize, self.spec.n2() as isize);
        let two = S::lit(2.0);
        let ext = |i: isize, j: isize| -> Point<S> {
            let along_j = |i: usize| -> Point<S> {
                let at = |j: usize| self.position(i, j);
                if j < 0 {
                    let (a, b) = (at(0), at(1));
                    [two * a[0] - b[0], two * a[1] - b[1]]
                } else if j >= n2 {
                    let (a, b) = (at((n2 - 1) as usize), at((n2 - 2) as usize));
                    [two * a[0] - b[0], two * a[1] - b[1]]
                } else {
                    at(j as usize)
                }
            };
            if i < 0 {
                let (a, b) = (along_j(0), along_j(1));
                [two * a[0] - b[0], two * a[1] - b[1]]
            } else if i >= n1 {
                let (a, b) = (along_j((n1 - 1) as usize), along_j((n1 - 2) as usize));
                [two * a[0] - b[0], two * a[1] - b[1]]
            } else {
                along_j(i as usize)
            }
        };
        let quarter = S::lit(0.25);
        let corners = Array2::from_shape_fn(((n1 + 1) as usize, (n2 + 1) as usize), |(a, b)| {
            let (a, b) = (a as isize, b as isize);
            let ps = [ext(a - 1, b - 1), ext(a, b - 1), ext(a - 1, b), ext(a, b)];
            [
                quarter * (ps[0][0] + ps[1][0] + ps[2][0] + ps[3][0]),
                quarter * (ps[0][1] + ps[1][1] + ps[2][1] + ps[3][1]),
            ]
        });
        Array2::from_shape_fn((n1 as usize, n2 as usize), |(i, j)| {
            shoelace(&[corners[[i, j]], corners[[i + 1, j]], corners[[i + 1, j + 1]], corners[[i, j + 1]]])
        })
    }

    /// Largest displacement `|T(z_c) - z_c|` in cell widths.
    pub fn max_displacement_cells(&self) -> S {
        let w = self.spec.cell_width();
        let mut m = S::zero();
        for i in 0..self.spec.n1() {
            for j in 0..self.spec.n2() {
                let c = self.spec.center(i, j);
                let p = self.position(i, j);
                m = m.max(((p[0] - c[0]) / w[0]).hypot((p[1] - c[1]) / w[1]));
            }
        }
        m
    }
}

impl<S: Scalar> GridField<S> for TransformField<S> {
    fn spec(&self) -> &GridSpec<S> {
        &self.spec
    }
    fn components(&self) -> usize {
        2
    }
    fn value(&self, i: usize, j: usize, c: usize) -> S {
        self.positions[[i, j, c]]
    }
}

pub(crate) fn shoelace<S: Scalar>(poly: &[Point<S>]) -> S {
    let n = poly.len();
    let mut acc = S::zero();
    for k in 0..n {
        let a = poly[k];
        let b = poly[(k + 1) % n];
        acc = acc + (a[0] * b[1] - b[0] * a[1]);
    }
    acc * S::lit(0.5)
}

/// Measure after flooring at `floor_rel * mean`.
pub fn floored_density<S: Scalar>(m: &MeasureField<S>, floor_rel: f64) -> Array2<S> {
    let floor = S::lit(floor_rel) * m.mean();
    m.values().mapv(|v| v.max(floor))
}

/// Post-transform density per cell: floored density times original cell
/// area over transformed cell area.
pub fn cell_density_after<S: Scalar>(m: &MeasureField<S>, t: &TransformField<S>, floor_rel: f64) -> Result<MeasureField<S>> {
    if !m.spec().same_as(t.spec()) {
        return Err(Error::input("measure and transform live on different grids"));
    }
    let rho = floored_density(m, floor_rel);
    let areas = t.transformed_cell_areas();
    let a0 = m.spec().cell_area();
    if let Some(((i, j), a)) = areas.indexed_iter().find(|(_, a)| !(**a > S::zero())) {
        return Err(Error::solver(format!("transformed cell ({i}, {j}) is degenerate (area {a})")));
    }
    let out = Array2::from_shape_fn(rho.dim(), |(i, j)| rho[[i, j]] * a0 / areas[[i, j]]);
    MeasureField::new(*m.spec(), out)
}

/// Density and gradient on a band of rows of the padded grid at one time,
/// interleaved as `(rho, d/dx rho, d/dy rho)` and indexed `[y - y0][x]`.
struct Snapshot<S> {
    l: usize,
    y0: usize,
    rows: usize,
    data: Vec<[S; 3]>,
}

/// Spectral state of the padded density plus reusable work buffers.
struct Diffusion<S: Scalar> {
    l: usize,
    /// Cosine coefficients `c_pq`, row-major with `p` (axis 1) outermost.
    coeffs: Vec<S>,
    dct3: Arc<dyn Dct3<S>>,
    dst3: Arc<dyn Dst3<S>>,
    cache: HashMap<u64, Arc<Snapshot<S>>>,
    synthesized: usize,
    work: [Vec<S>; 5],
    pool: Vec<Vec<[S; 3]>>,
}

fn transpose<S: Scalar>(src: &[S], l: usize) -> Vec<S> {
    let mut dst = vec![S::zero(); l * l];
    transpose_band(src, l, l, 0, l, &mut dst);
    dst
}

/// `dst[r][p] = src[p][y0 + r]` for `p < kmax`, zero for the other `p`.
fn transpose_band<S: Scalar>(src: &[S], l: usize, kmax: usize, y0: usize, rows: usize, dst: &mut [S]) {
    const B: usize = 16;
    dst[..rows * l].par_chunks_mut(B * l).enumerate().for_each(|(blk, out)| {
        let r0 = y0 + blk * B;
        let n = out.len() / l;
        for p in 0..kmax {
            let col = &src[p * l + r0..p * l + r0 + n];
            for (r, &v) in col.iter().enumerate() {
                out[r * l + p] = v;
            }
        }
        for r in 0..n {
            out[r * l + kmax..(r + 1) * l].fill(S::zero());
        }
    });
}

impl<S: Scalar> Diffusion<S> {
    fn new(rho0: &[S], l: usize) -> Self {
        let mut planner = DctPlanner::<S>::new();
        let dct2: Arc<dyn Dct2<S>> = planner.plan_dct2(l);
        let dct3 = planner.plan_dct3(l);
        let dst3 = planner.plan_dst3(l);
        let mut data = rho0.to_vec();
        let scratch_len = dct2.get_scratch_len();
        let forward = |data: &mut [S]| {
            data.par_chunks_mut(l)
                .for_each_init(|| vec![S::zero(); scratch_len], |scr, row| dct2.process_dct2_with_scratch(row, scr));
        };
        forward(&mut data);
        let mut data = transpose(&data, l);
        forward(&mut data);
        // data is now [q][p]; normalize and store as [p][q]
        let mut coeffs = transpose(&data, l);
        let lf = S::from_usize_lossy(l);
        let two = S::lit(2.0);
        coeffs.par_chunks_mut(l).enumerate().for_each(|(p, row)| {
            let wp = if p == 0 { S::one() } else { two };
            for (q, c) in row.iter_mut().enumerate() {
                let wq = if q == 0 { S::one() } else { two };
                *c = *c * wp * wq / (lf * lf);
            }
        });
        Self {
            l,
            coeffs,
            dct3,
            dst3,
            cache: HashMap::new(),
            synthesized: 0,
            work: std::array::from_fn(|_| data.clone()),
            pool: Vec::new(),
        }
    }

    /// Smallest non-zero decay rate, `pi^2 / L^2`.
    fn lambda_min(&self) -> S {
        let k = S::PI() / S::from_usize_lossy(self.l);
        k * k
    }

    /// Cosine sum along rows: `out[m] = sum_k in[k] cos(pi k (m + 1/2) / L)`.
    fn cos_rows(plan: &Arc<dyn Dct3<S>>, l: usize, data: &mut [S]) {
        let two = S::lit(2.0);
        data.par_chunks_mut(l).for_each_init(
            || vec![S::zero(); plan.get_scratch_len()],
            |scr, row| {
                row[0] = row[0] * two;
                plan.process_dct3_with_scratch(row, scr);
            },
        );
    }

    /// Derivative of the cosine sum along rows:
    /// `out[m] = sum_k in[k] (-pi k / L) sin(pi k (m + 1/2) / L)`.
    fn dsin_rows(plan: &Arc<dyn Dst3<S>>, l: usize, data: &mut [S]) {
        let step = S::PI() / S::from_usize_lossy(l);
        data.par_chunks_mut(l).for_each_init(
            || vec![S::zero(); plan.get_scratch_len()],
            |scr, row| {
                for k in 1..l {
                    row[k - 1] = -step * S::from_usize_lossy(k) * row[k];
                }
                row[l - 1] = S::zero();
                plan.process_dst3_with_scratch(row, scr);
            },
        );
    }

    /// Synthesizes rows `y0..y0 + rows` of the density and its gradient.
    fn synthesize(&mut self, t: S, y0: usize, rows: usize) -> Snapshot<S> {
        let l = self.l;
        let step = S::PI() / S::from_usize_lossy(l);
        let cutoff = S::epsilon() * S::epsilon();
        let decay: Vec<S> = (0..l)
            .map(|k| {
                let kk = step * S::from_usize_lossy(k);
                (-kk * kk * t).exp()
            })
            .collect();
        // modes past kmax are below eps^2 of their initial size
        let kmax = decay.iter().take_while(|&&d| d >= cutoff).count().max(1);
        let [a, b, rho, gx, gy] = &mut self.work;
        let coeffs = &self.coeffs;
        a[..kmax * l]
            .par_chunks_mut(l)
            .zip(b[..kmax * l].par_chunks_mut(l))
            .enumerate()
            .for_each(|(p, (ra, rb))| {
                let src = &coeffs[p * l..(p + 1) * l];
                for q in 0..l {
                    let v = if q < kmax { src[q] * decay[p] * decay[q] } else { S::zero() };
                    ra[q] = v;
                    rb[q] = v;
                }
            });
        // rows are p; transform along q (axis 2)
        Self::cos_rows(&self.dct3, l, &mut a[..kmax * l]);
        Self::dsin_rows(&self.dst3, l, &mut b[..kmax * l]);
        // then along p (axis 1), only for the rows the caller needs
        transpose_band(a, l, kmax, y0, rows, rho);
        transpose_band(a, l, kmax, y0, rows, gx);
        transpose_band(b, l, kmax, y0, rows, gy);
        Self::cos_rows(&self.dct3, l, &mut rho[..rows * l]);
        Self::dsin_rows(&self.dst3, l, &mut gx[..rows * l]);
        Self::cos_rows(&self.dct3, l, &mut gy[..rows * l]);
        let mut data = self.pool.pop().unwrap_or_default();
        data.resize(rows * l, [S::zero(); 3]);
        let (rho, gx, gy) = (&rho[..rows * l], &gx[..rows * l], &gy[..rows * l]);
        data.par_chunks_mut(l).enumerate().for_each(|(r, out)| {
            let o = r * l;
            for (x, v) in out.iter_mut().enumerate() {
                *v = [rho[o + x], gx[o + x], gy[o + x]];
            }
        });
        Snapshot { l, y0, rows, data }
    }

    fn snapshot(&mut self, t: S, band: (usize, usize)) -> Arc<Snapshot<S>> {
        let key = t.to_f64_lossy().to_bits();
        if let Some(s) = self.cache.get(&key) {
            if (s.y0, s.rows) == band {
                return Arc::clone(s);
            }
        }
        let s = Arc::new(self.synthesize(t, band.0, band.1));
        self.synthesized += 1;
        if let Some(old) = self.cache.insert(key, Arc::clone(&s)) {
            self.recycle(old);
        }
        s
    }

    fn recycle(&mut self, s: Arc<Snapshot<S>>) {
        if let Ok(s) = Arc::try_unwrap(s) {
            self.pool.push(s.data);
        }
    }

    fn clear(&mut self) {
        let old: Vec<_> = self.cache.drain().map(|(_, s)| s).collect();
        for s in old {
            self.recycle(s);
        }
    }
}

impl<S: Scalar> Snapshot<S> {
    /// `-grad(rho) / rho` at padded coordinates `x`, with each quantity
    /// interpolated bilinearly between nodes at `m + 1/2`. `None` when the
    /// stencil leaves the synthesized band.
    #[inline]
    fn velocity(&self, x: Point<S>) -> Option<Point<S>> {
        let l = self.l;
        let half = S::lit(0.5);
        let last = S::from_usize_lossy(l - 1);
        let axis = |v: S| {
            let u = (v - half).max(S::zero()).min(last);
            let base = u.floor().to_usize().unwrap_or(0).min(l - 2);
            (base, u - S::from_usize_lossy(base))
        };
        let (ix, fx) = axis(x[0]);
        let (iy, fy) = axis(x[1]);
        if iy < self.y0 || iy + 1 >= self.y0 + self.rows {
            return None;
        }
        let k00 = (iy - self.y0) * l + ix;
        let k01 = k00 + l;
        let d = &self.data;
        let one = S::one();
        let (w00, w10, w01, w11) = ((one - fx) * (one - fy), fx * (one - fy), (one - fx) * fy, fx * fy);
        let c = |n: usize| w00 * d[k00][n] + w10 * d[k00 + 1][n] + w01 * d[k01][n] + w11 * d[k01 + 1][n];
        let rho = c(0);
        Some([-c(1) / rho, -c(2) / rho])
    }
}

fn velocities<S: Scalar>(snap: &Snapshot<S>, pts: &[Point<S>]) -> Option<Vec<Point<S>>> {
    pts.par_iter().map(|&p| snap.velocity(p)).collect()
}

fn axpy<S: Scalar>(base: &[Point<S>], h: S, k: &[Point<S>]) -> Vec<Point<S>> {
    base.par_iter()
        .zip(k.par_iter())
        .map(|(b, v)| [b[0] + h * v[0], b[1] + h * v[1]])
        .collect()
}

fn max_norm<S: Scalar>(vs: &[Point<S>]) -> S {
    vs.par_iter().map(|v| v[0].hypot(v[1])).reduce(S::zero, S::max)
}

/// Rows of the padded grid within `margin` cells of any point.
fn band_of<S: Scalar>(pts: &[Point<S>], l: usize, margin: usize) -> (usize, usize) {
    let (lo, hi) = pts
        .par_iter()
        .map(|p| (p[1], p[1]))
        .reduce(|| (S::infinity(), S::neg_infinity()), |a, b| (a.0.min(b.0), a.1.max(b.1)));
    let half = S::lit(0.5);
    let row = |v: S| (v - half).max(S::zero()).floor().to_usize().unwrap_or(0);
    let y0 = row(lo).saturating_sub(margin);
    let y1 = (row(hi) + 1 + margin).min(l - 1);
    (y0, y1 - y0 + 1)
}

/// Hard cap on integrator attempts; the step controller needs far fewer.
const MAX_ATTEMPTS: usize = 200_000;

/// Computes the density-equalizing transform of `m`.
pub fn solve_transform<S: Scalar>(m: &MeasureField<S>, params: &DiffusionParams) -> Result<TransformField<S>> {
    params.validate()?;
    let spec = *m.spec();
    if !m.values().iter().any(|&v| v > S::zero()) {
        return Err(Error::input("measure is zero everywhere"));
    }
    let (n1, n2) = (spec.n1(), spec.n2());
    let rho0 = floored_density(m, params.density_floor_rel);
    let sea = rho0.iter().copied().sum::<S>() / S::from_usize_lossy(rho0.len());

    let want = (params.pad_factor * n1.max(n2) as f64).ceil() as usize;
    let l = want.next_power_of_two().max(4);
    let off = [(l - n1) / 2, (l - n2) / 2];
    let mut padded = vec![sea; l * l];
    for i in 0..n1 {
        for j in 0..n2 {
            padded[(off[0] + i) * l + off[1] + j] = rho0[[i, j]];
        }
    }
    let mut diff = Diffusion::new(&padded, l);
    drop(padded);

    let half = S::lit(0.5);
    let mut pts: Vec<Point<S>> = (0..n1 * n2)
        .map(|k| {
            let (i, j) = (k / n2, k % n2);
            [
                S::from_usize_lossy(off[0] + i) + half,
                S::from_usize_lossy(off[1] + j) + half,
            ]
        })
        .collect();

    let lambda = diff.lambda_min();
    let horizon = S::lit(params.max_time_factor * std::f64::consts::LN_10) / lambda;
    let tol = S::lit(params.convergence_tol);
    let max_step = S::lit(params.max_step_displacement);
    let safety = S::lit(params.rk_safety);
    let sixth = S::one() / S::lit(6.0);
    let third = S::one() / S::lit(3.0);

    let mut diag = SolverDiagnostics {
        padded_size: l,
        time_horizon: horizon.to_f64_lossy(),
        ..Default::default()
    };
    let margin = 2 + (4.0 * params.max_step_displacement).ceil() as usize;
    let mut t = S::zero();
    let start = diff.snapshot(t, band_of(&pts, l, margin));
    let mut k1 = velocities(&start, &pts).expect("band covers its own points");
    drop(start);
    diff.clear();
    let remaining = |t: S, vmax: S| vmax * (S::one() / lambda).min(horizon - t);
    let mut vmax = max_norm(&k1);
    let mut h = if vmax > S::zero() {
        (safety * max_step / vmax).min(horizon)
    } else {
        horizon
    };
    let mut attempts = 0usize;
    diag.converged = remaining(t, vmax) < tol;

    while !diag.converged && !diag.reached_horizon {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            diag.final_time = t.to_f64_lossy();
            diag.snapshots = diff.synthesized;
            return Err(Error::SolverFailure {
                message: "integrator exceeded its step budget".into(),
                diagnostics: Some(Box::new(diag)),
            });
        }
        h = h.min(horizon - t);
        let band = band_of(&pts, l, margin);
        let (t_mid, t_end) = (t + half * h, t + h);
        let mid = diff.snapshot(t_mid, band);
        let end = diff.snapshot(t_end, band);
        let attempt = (|| {
            let k2 = velocities(&mid, &axpy(&pts, half * h, &k1))?;
            let k3 = velocities(&mid, &axpy(&pts, half * h, &k2))?;
            let k4 = velocities(&end, &axpy(&pts, h, &k3))?;
            let next: Vec<Point<S>> = (0..pts.len())
                .into_par_iter()
                .map(|n| {
                    let mut p = pts[n];
                    for a in 0..2 {
                        p[a] = p[a] + h * (sixth * (k1[n][a] + k4[n][a]) + third * (k2[n][a] + k3[n][a]));
                    }
                    p
                })
                .collect();
            let k5 = velocities(&end, &next)?;
            // third-order companion weights (1/6, 1/3, 1/3, 0, 1/6)
            let (err, disp) = (0..pts.len())
                .into_par_iter()
                .map(|n| {
                    let e = sixth * h * (k4[n][0] - k5[n][0]).hypot(k4[n][1] - k5[n][1]);
                    let d = (next[n][0] - pts[n][0]).hypot(next[n][1] - pts[n][1]);
                    (e, d)
                })
                .reduce(|| (S::zero(), S::zero()), |a, b| (a.0.max(b.0), a.1.max(b.1)));
            Some((next, k5, err, disp))
        })();
        drop((mid, end));
        diff.clear();

        let Some((next, k5, err, disp)) = attempt else {
            // a stage point left the synthesized band: the step was far too long
            diag.rejected_steps += 1;
            h = h * S::lit(0.25);
            continue;
        };
        let err_ratio = if err > S::zero() {
            safety * (tol / err).powf(S::lit(0.25))
        } else {
            S::lit(2.0)
        };
        let disp_ratio = if disp > S::zero() {
            safety * max_step / disp
        } else {
            S::lit(2.0)
        };
        let factor = err_ratio.min(disp_ratio);
        if err <= tol && disp <= max_step {
            pts = next;
            k1 = k5;
            t = t_end;
            diag.iterations += 1;
            diag.final_max_increment = disp.to_f64_lossy();
            vmax = max_norm(&k1);
            diag.remaining_displacement_bound = remaining(t, vmax).to_f64_lossy();
            diag.reached_horizon = t >= horizon;
            diag.converged = !diag.reached_horizon && remaining(t, vmax) < tol;
            h = h * factor.min(S::lit(2.0)).max(S::lit(0.2));
        } else {
            diag.rejected_steps += 1;
            h = h * factor.min(S::lit(0.5)).max(S::lit(0.1));
        }
    }
    diag.final_time = t.to_f64_lossy();
    diag.snapshots = diff.synthesized;
    drop(diff);

    let w = spec.cell_width();
    let mut positions = Array3::zeros((n1, n2, 2));
    for (k, p) in pts.iter().enumerate() {
        let (i, j) = (k / n2, k % n2);
        for a in 0..2 {
            positions[[i, j, a]] = spec.min()[a] + (p[a] - S::from_usize_lossy(off[a])) * w[a];
        }
    }
    let mut field = TransformField {
        spec,
        positions,
        diagnostics: SolverDiagnostics::default(),
    };
    diag.max_displacement = field.max_displacement_cells().to_f64_lossy();
    let inverted = field.inverted_quads();
    if inverted > 0 {
        return Err(Error::SolverFailure {
            message: format!("{inverted} transformed quads are inverted"),
            diagnostics: Some(Box::new(diag)),
        });
    }
    field.diagnostics = diag;
    Ok(field)
}
