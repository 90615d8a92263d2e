//! Paths and distances measured in the transformed space.

use ndarray::Array2;
use rayon::prelude::*;

use crate::cartogram::TransformField;
use crate::error::{Error, Result};
use crate::field::{EmbeddingSet, MeasureField};
use crate::scalar::{dist, lerp, Point, Scalar};

/// A path in latent space together with its transformed image.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPath<S> {
    points: Vec<Point<S>>,
    images: Vec<Point<S>>,
    cumulative: Vec<S>,
}

impl<S: Scalar> LatentPath<S> {
    /// Builds a path from latent points and their images; the cumulative
    /// length is measured along the images.
    pub fn new(points: Vec<Point<S>>, images: Vec<Point<S>>) -> Result<Self> {
        if points.len() < 2 || points.len() != images.len() {
            return Err(Error::input(format!(
                "path needs at least 2 points with one image each, got {} points and {} images",
                points.len(),
                images.len()
            )));
        }
        let mut cumulative = Vec::with_capacity(images.len());
        let mut acc = S::zero();
        cumulative.push(acc);
        for w in images.windows(2) {
            acc = acc + dist(w[0], w[1]);
            cumulative.push(acc);
        }
        Ok(Self {
            points,
            images,
            cumulative,
        })
    }

    pub fn points(&self) -> &[Point<S>] {
        &self.points
    }

    pub fn images(&self) -> &[Point<S>] {
        &self.images
    }

    /// Running length in the transformed space, starting at 0.
    pub fn cumulative_length(&self) -> &[S] {
        &self.cumulative
    }

    pub fn length(&self) -> S {
        *self.cumulative.last().expect("path has at least two points")
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Straight segment between `T(z_a)` and `T(z_b)`, sampled uniformly in the
/// transformed space and pulled back through the inverse map. The first and
/// last latent points are the inputs themselves.
pub fn pseudo_geodesic<S: Scalar>(
    t: &TransformField<S>,
    z_a: Point<S>,
    z_b: Point<S>,
    n_points: usize,
) -> Result<LatentPath<S>> {
    if n_points < 2 {
        return Err(Error::input(format!("n_points must be at least 2, got {n_points}")));
    }
    let last = n_points - 1;
    let ta = t.forward_map(z_a).map_err(|e| Error::at(0, e))?;
    let tb = t.forward_map(z_b).map_err(|e| Error::at(last, e))?;
    let denom = S::from_usize_lossy(last);
    let images: Vec<Point<S>> = (0..n_points)
        .map(|k| match k {
            0 => ta,
            k if k == last => tb,
            k => lerp(ta, tb, S::from_usize_lossy(k) / denom),
        })
        .collect();
    let points = (0..n_points)
        .into_par_iter()
        .map(|k| match k {
            0 => Ok(z_a),
            k if k == last => Ok(z_b),
            k => t.inverse_map(images[k]).map_err(|e| Error::at(k, e)),
        })
        .collect::<Result<Vec<_>>>()?;
    let total = dist(ta, tb);
    let cumulative = (0..n_points).map(|k| total * S::from_usize_lossy(k) / denom).collect();
    Ok(LatentPath {
        points,
        images,
        cumulative,
    })
}

/// Length of the polyline through `T(p_k)`.
pub fn transformed_path_length<S: Scalar>(t: &TransformField<S>, pts: &[Point<S>]) -> Result<S> {
    let images = pts
        .par_iter()
        .enumerate()
        .map(|(k, &p)| t.forward_map(p).map_err(|e| Error::at(k, e)))
        .collect::<Result<Vec<_>>>()?;
    Ok(images.windows(2).map(|w| dist(w[0], w[1])).sum())
}

/// Per cell, the transformed-space distance `|T(z_c) - T(z_0)|`.
pub fn distance_field<S: Scalar>(t: &TransformField<S>, z0: Point<S>) -> Result<MeasureField<S>> {
    let origin = t.forward_map(z0)?;
    let spec = *t.spec();
    let values = Array2::from_shape_fn((spec.n1(), spec.n2()), |(i, j)| dist(t.position(i, j), origin));
    MeasureField::new(spec, values)
}

fn map_points<S: Scalar>(
    e: &EmbeddingSet<S>,
    f: impl Fn(Point<S>) -> Result<Point<S>> + Sync,
) -> Result<EmbeddingSet<S>> {
    let mapped: Vec<Result<Point<S>>> = e.points().par_iter().map(|&p| f(p)).collect();
    let failed: Vec<usize> = mapped.iter().enumerate().filter(|(_, r)| r.is_err()).map(|(k, _)| k).collect();
    if let Some(&first) = failed.first() {
        let shown: Vec<String> = failed.iter().take(20).map(|k| k.to_string()).collect();
        let more = if failed.len() > 20 { ", ..." } else { "" };
        let solver = mapped[first].as_ref().err().map(Error::is_solver_failure).unwrap_or(false);
        let msg = format!("{} points could not be mapped: [{}{}]", failed.len(), shown.join(", "), more);
        let source = if solver { Error::solver(msg) } else { Error::domain(msg) };
        return Err(Error::at(first, source));
    }
    e.with_points(mapped.into_iter().map(|r| r.expect("checked above")).collect())
}

/// Applies `T` to every point; labels are carried through.
pub fn transform_embeddings<S: Scalar>(t: &TransformField<S>, e: &EmbeddingSet<S>) -> Result<EmbeddingSet<S>> {
    map_points(e, |p| t.forward_map(p))
}

/// Applies the inverse transform to every point; labels are carried through.
pub fn inverse_transform_embeddings<S: Scalar>(t: &TransformField<S>, e: &EmbeddingSet<S>) -> Result<EmbeddingSet<S>> {
    map_points(e, |p| t.inverse_map(p))
}
