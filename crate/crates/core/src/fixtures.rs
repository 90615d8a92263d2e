//! Deterministic synthetic data: closed-form meaning maps, squashed Gaussian
//! mixtures with their exact un-squashing measure, and bump densities.

use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::field::{EmbeddingSet, MeaningField, MeasureField};
use crate::grid::GridSpec;
use crate::scalar::{Point, Scalar};

/// Closed-form meaning maps used as oracles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnalyticMap {
    /// `h = z`
    Identity,
    /// `h = A z` with `A = [[3, 0], [0, 2]]`
    Affine,
    /// `h = (z1, z2, z1^2)`
    Parabola,
    /// `h = (sin z1, cos z2)`
    Sine,
}

impl AnalyticMap {
    pub fn eval<S: Scalar>(self, z: Point<S>) -> Vec<S> {
        match self {
            Self::Identity => vec![z[0], z[1]],
            Self::Affine => vec![S::lit(3.0) * z[0], S::lit(2.0) * z[1]],
            Self::Parabola => vec![z[0], z[1], z[0] * z[0]],
            Self::Sine => vec![z[0].sin(), z[1].cos()],
        }
    }

    pub fn dh(self) -> usize {
        match self {
            Self::Parabola => 3,
            _ => 2,
        }
    }

    /// Exact Jacobian at `z` as rows of `dh x 2`.
    pub fn jacobian<S: Scalar>(self, z: Point<S>) -> Vec<[S; 2]> {
        let (o, l) = (S::zero(), S::one());
        match self {
            Self::Identity => vec![[l, o], [o, l]],
            Self::Affine => vec![[S::lit(3.0), o], [o, S::lit(2.0)]],
            Self::Parabola => vec![[l, o], [o, l], [S::lit(2.0) * z[0], o]],
            Self::Sine => vec![[z[0].cos(), o], [o, -z[1].sin()]],
        }
    }
}

impl FromStr for AnalyticMap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "affine" => Ok(Self::Affine),
            "parabola" => Ok(Self::Parabola),
            "sine" => Ok(Self::Sine),
            other => Err(Error::input(format!("unknown analytic map '{other}'"))),
        }
    }
}

/// Samples `map` at every cell center.
pub fn make_analytic_meaning<S: Scalar>(map: AnalyticMap, spec: &GridSpec<S>) -> MeaningField<S> {
    let dh = map.dh();
    let mut v = Array3::zeros((spec.n1(), spec.n2(), dh));
    for i in 0..spec.n1() {
        for j in 0..spec.n2() {
            for (c, x) in map.eval(spec.center(i, j)).into_iter().enumerate() {
                v[[i, j, c]] = x;
            }
        }
    }
    MeaningField::new(*spec, v, false).expect("analytic maps are finite")
}

/// Radial squashing map `s(z) = z / (1 + a |z|)`.
pub fn squash<S: Scalar>(z: Point<S>, a: S) -> Point<S> {
    let f = S::one() + a * z[0].hypot(z[1]);
    [z[0] / f, z[1] / f]
}

/// Inverse of [`squash`], defined for `|y| < 1 / a`.
pub fn unsquash<S: Scalar>(y: Point<S>, a: S) -> Point<S> {
    let f = S::one() - a * y[0].hypot(y[1]);
    [y[0] / f, y[1] / f]
}

/// Magnification factor of [`unsquash`] at squashed radius `rho`:
/// `(r / rho) * dr/drho = (1 - a rho)^-3`.
pub fn unsquash_magnification<S: Scalar>(rho: S, a: S) -> S {
    (S::one() - a * rho).powi(-3)
}

/// Options for [`make_distorted_mixture_with`].
#[derive(Clone, Copy, Debug)]
pub struct MixtureOptions {
    pub n_per_class: usize,
    pub classes: usize,
    pub squash: f64,
    pub seed: u64,
    /// Cells per axis of the measure grid.
    pub grid_cells: usize,
    /// Grid padding as a fraction of the data box side.
    pub pad_fraction: f64,
}

impl Default for MixtureOptions {
    fn default() -> Self {
        Self {
            n_per_class: 500,
            classes: 4,
            squash: 2.0,
            seed: 7,
            grid_cells: 128,
            pad_fraction: 0.05,
        }
    }
}

/// Output of [`make_distorted_mixture`].
#[derive(Clone, Debug)]
pub struct DistortedMixture<S> {
    /// Squashed points; labels are the class indices as decimal strings.
    pub embeddings: EmbeddingSet<S>,
    /// The same points before squashing.
    pub original: EmbeddingSet<S>,
    /// Magnification of the inverse squash on `spec`.
    pub measure: MeasureField<S>,
    pub spec: GridSpec<S>,
}

/// Class centers: class 0 at the origin, the rest on a ring.
const RING_RADIUS: f64 = 4.5;
const CORE_STD: f64 = 1.2;
const RING_STD: f64 = 0.6;

/// Gaussian blobs pushed through [`squash`], plus the measure that undoes
/// the squash when fed to the cartogram.
///
/// Beyond the outermost squashed data radius the measure is held at its
/// value on that radius, which keeps it finite on the grid corners.
pub fn make_distorted_mixture<S: Scalar>(
    n_per_class: usize,
    classes: usize,
    squash_strength: f64,
    seed: u64,
) -> Result<DistortedMixture<S>> {
    make_distorted_mixture_with(&MixtureOptions {
        n_per_class,
        classes,
        squash: squash_strength,
        seed,
        ..MixtureOptions::default()
    })
}

pub fn make_distorted_mixture_with<S: Scalar>(opts: &MixtureOptions) -> Result<DistortedMixture<S>> {
    if !(2..=8).contains(&opts.classes) {
        return Err(Error::input(format!("classes must be in [2, 8], got {}", opts.classes)));
    }
    if opts.n_per_class == 0 {
        return Err(Error::input("need at least one point per class"));
    }
    if !(opts.squash >= 0.0) || !opts.squash.is_finite() {
        return Err(Error::input("squash strength must be finite and non-negative"));
    }
    let a = S::lit(opts.squash);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ring = opts.classes - 1;
    let mut original = Vec::with_capacity(opts.n_per_class * opts.classes);
    let mut labels = Vec::with_capacity(original.capacity());
    for c in 0..opts.classes {
        let (center, std) = if c == 0 {
            ([0.0, 0.0], CORE_STD)
        } else {
            let ang = std::f64::consts::TAU * (c - 1) as f64 / ring as f64 + 0.25;
            ([RING_RADIUS * ang.cos(), RING_RADIUS * ang.sin()], RING_STD)
        };
        for _ in 0..opts.n_per_class {
            let gx: f64 = StandardNormal.sample(&mut rng);
            let gy: f64 = StandardNormal.sample(&mut rng);
            original.push([S::lit(center[0] + std * gx), S::lit(center[1] + std * gy)]);
            labels.push(c.to_string());
        }
    }
    let squashed: Vec<Point<S>> = original.iter().map(|&z| squash(z, a)).collect();
    let embeddings = EmbeddingSet::new(squashed, Some(labels.clone()))?;
    let original = EmbeddingSet::new(original, Some(labels))?;
    let spec = GridSpec::covering(&embeddings, opts.grid_cells, opts.grid_cells, S::lit(opts.pad_fraction))?;
    let rho_cap = embeddings
        .points()
        .iter()
        .map(|p| p[0].hypot(p[1]))
        .fold(S::zero(), S::max);
    let values = Array2::from_shape_fn((spec.n1(), spec.n2()), |(i, j)| {
        let z = spec.center(i, j);
        unsquash_magnification(z[0].hypot(z[1]).min(rho_cap), a)
    });
    let measure = MeasureField::new(spec, values)?;
    Ok(DistortedMixture {
        embeddings,
        original,
        measure,
        spec,
    })
}

/// A single Gaussian bump `amplitude * exp(-|z - center|^2 / (2 sigma^2))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bump<S> {
    pub center: Point<S>,
    pub sigma: S,
    pub amplitude: S,
}

/// Sum of Gaussian bumps sampled at cell centers. Zero amplitudes give the
/// zero field; add a baseline with [`MeasureField::map`].
pub fn make_bump_density<S: Scalar>(spec: &GridSpec<S>, bumps: &[Bump<S>]) -> Result<MeasureField<S>> {
    for (k, b) in bumps.iter().enumerate() {
        if !(b.sigma > S::zero()) {
            return Err(Error::input(format!("bump {k}: sigma must be positive")));
        }
    }
    let two = S::lit(2.0);
    let values = Array2::from_shape_fn((spec.n1(), spec.n2()), |(i, j)| {
        let z = spec.center(i, j);
        bumps
            .iter()
            .map(|b| {
                let d2 = (z[0] - b.center[0]).powi(2) + (z[1] - b.center[1]).powi(2);
                b.amplitude * (-d2 / (two * b.sigma * b.sigma)).exp()
            })
            .fold(S::zero(), |acc, v| acc + v)
    });
    MeasureField::new(*spec, values)
}

/// Unit baseline plus one bump at the grid center, with the amplitude
/// solved so that the peak cell is `peak_over_mean` times the grid mean.
/// `sigma_fraction` is the bump width relative to the smaller box side.
pub fn make_centered_bump<S: Scalar>(spec: &GridSpec<S>, sigma_fraction: S, peak_over_mean: S) -> Result<MeasureField<S>> {
    let half = S::lit(0.5);
    let center = [half * (spec.min()[0] + spec.max()[0]), half * (spec.min()[1] + spec.max()[1])];
    let side = (spec.max()[0] - spec.min()[0]).min(spec.max()[1] - spec.min()[1]);
    let unit = make_bump_density(
        spec,
        &[Bump {
            center,
            sigma: sigma_fraction * side,
            amplitude: S::one(),
        }],
    )?;
    let g_mean = unit.mean();
    let g_peak = unit.max_value();
    // (1 + A g_peak) = r (1 + A g_mean)
    let denom = g_peak - peak_over_mean * g_mean;
    if !(denom > S::zero()) {
        return Err(Error::input("requested peak ratio is not reachable with this bump width"));
    }
    let amp = (peak_over_mean - S::one()) / denom;
    unit.map(|v| S::one() + amp * v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::riemannian_measure;

    #[test]
    fn unknown_map_name() {
        assert!("sine".parse::<AnalyticMap>().is_ok());
        assert!(matches!("cubic".parse::<AnalyticMap>(), Err(Error::Input(_))));
    }

    #[test]
    fn analytic_measures() {
        let g = GridSpec::<f64>::new([0.0, 0.0], [1.0, 1.0], [5, 5]).unwrap();
        let id = riemannian_measure(&make_analytic_meaning(AnalyticMap::Identity, &g));
        assert!(id.values().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let af = riemannian_measure(&make_analytic_meaning(AnalyticMap::Affine, &g));
        assert!(af.values().iter().all(|&v| (v - 6.0).abs() < 1e-12));
        let pb = riemannian_measure(&make_analytic_meaning(AnalyticMap::Parabola, &g));
        assert!((pb.values()[[2, 1]] - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn squash_roundtrip_and_magnification() {
        let a = 2.0f64;
        let z = [1.3f64, -0.4];
        let y = squash(z, a);
        let back = unsquash(y, a);
        assert!((back[0] - z[0]).abs() < 1e-12 && (back[1] - z[1]).abs() < 1e-12);
        // finite-difference determinant of the inverse map
        let h = 1e-6;
        let dx = [
            (unsquash([y[0] + h, y[1]], a)[0] - unsquash([y[0] - h, y[1]], a)[0]) / (2.0 * h),
            (unsquash([y[0] + h, y[1]], a)[1] - unsquash([y[0] - h, y[1]], a)[1]) / (2.0 * h),
        ];
        let dy = [
            (unsquash([y[0], y[1] + h], a)[0] - unsquash([y[0], y[1] - h], a)[0]) / (2.0 * h),
            (unsquash([y[0], y[1] + h], a)[1] - unsquash([y[0], y[1] - h], a)[1]) / (2.0 * h),
        ];
        let det = dx[0] * dy[1] - dx[1] * dy[0];
        let rho = y[0].hypot(y[1]);
        assert!((det - unsquash_magnification(rho, a)).abs() < 1e-6 * det);
    }

    #[test]
    fn mixture_without_squash_has_unit_measure() {
        let m = make_distorted_mixture::<f64>(50, 3, 0.0, 1).unwrap();
        assert!(m.measure.values().iter().all(|&v| (v - 1.0).abs() <= 1e-6));
        let m = make_distorted_mixture::<f64>(50, 3, 1e-9, 1).unwrap();
        assert!(m.measure.values().iter().all(|&v| (v - 1.0).abs() <= 1e-6));
    }

    #[test]
    fn mixture_is_deterministic() {
        let a = make_distorted_mixture::<f64>(40, 4, 2.0, 11).unwrap();
        let b = make_distorted_mixture::<f64>(40, 4, 2.0, 11).unwrap();
        assert_eq!(a.embeddings, b.embeddings);
        assert_eq!(a.measure, b.measure);
        let c = make_distorted_mixture::<f64>(40, 4, 2.0, 12).unwrap();
        assert_ne!(a.embeddings, c.embeddings);
    }

    #[test]
    fn mixture_measure_is_radial() {
        let m = make_distorted_mixture::<f64>(200, 4, 2.0, 3).unwrap();
        let rho_cap = m.embeddings.points().iter().map(|p| p[0].hypot(p[1])).fold(0.0, f64::max);
        for ((i, j), &v) in m.measure.values().indexed_iter() {
            let z = m.spec.center(i, j);
            let want = unsquash_magnification(z[0].hypot(z[1]).min(rho_cap), 2.0);
            assert!((v - want).abs() <= 1e-12 * want);
        }
    }

    #[test]
    fn mixture_parameter_checks() {
        assert!(make_distorted_mixture::<f64>(10, 1, 2.0, 0).is_err());
        assert!(make_distorted_mixture::<f64>(10, 9, 2.0, 0).is_err());
        assert!(make_distorted_mixture::<f64>(10, 3, -1.0, 0).is_err());
    }

    #[test]
    fn bump_fields() {
        let g = GridSpec::<f64>::new([-1.0, -1.0], [1.0, 1.0], [20, 20]).unwrap();
        let zero = make_bump_density(&g, &[Bump { center: [0.3, 0.1], sigma: 0.2, amplitude: 0.0 }]).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));
        let b1 = Bump { center: [0.0, 0.0], sigma: 0.3, amplitude: 2.0 };
        let b2 = Bump { center: [0.4, -0.2], sigma: 0.1, amplitude: 1.5 };
        let one = make_bump_density(&g, &[b1]).unwrap();
        let n = 20;
        for i in 0..n {
            for j in 0..n {
                let v = one.values()[[i, j]];
                assert!((v - one.values()[[n - 1 - i, j]]).abs() <= 1e-14 * v);
                assert!((v - one.values()[[i, n - 1 - j]]).abs() <= 1e-14 * v);
            }
        }
        let both = make_bump_density(&g, &[b1, b2]).unwrap();
        let sum = one.values() + make_bump_density(&g, &[b2]).unwrap().values();
        for (x, y) in both.values().iter().zip(sum.iter()) {
            assert!((x - y).abs() <= 1e-15);
        }
    }

    #[test]
    fn centered_bump_peak_ratio() {
        let g = GridSpec::<f64>::new([0.0, 0.0], [1.0, 1.0], [64, 64]).unwrap();
        let m = make_centered_bump(&g, 0.1, 5.0).unwrap();
        assert!((m.max_value() / m.mean() - 5.0).abs() < 1e-12);
    }
}
