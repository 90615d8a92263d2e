//! Exact nearest-neighbour queries over a static 2-D point set using a
//! uniform bucket grid and ring search.

use crate::scalar::{Point, Scalar};

pub(crate) struct BucketIndex<S> {
    origin: Point<S>,
    width: [S; 2],
    nb: [usize; 2],
    // CSR layout: bucket b holds ids[start[b]..start[b + 1]]
    start: Vec<usize>,
    ids: Vec<usize>,
    points: Vec<Point<S>>,
}

impl<S: Scalar> BucketIndex<S> {
    /// `points` must be non-empty. Ties in `nearest` go to the smaller
    /// position in `points`.
    pub fn new(points: Vec<Point<S>>) -> Self {
        assert!(!points.is_empty());
        let mut lo = points[0];
        let mut hi = points[0];
        for p in &points {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let per_axis = ((points.len() as f64 / 2.0).sqrt().ceil() as usize).clamp(1, 4096);
        let mut nb = [per_axis; 2];
        let mut width = [S::one(); 2];
        for a in 0..2 {
            let span = hi[a] - lo[a];
            if span > S::zero() {
                width[a] = span / S::from_usize_lossy(nb[a]);
            } else {
                nb[a] = 1;
            }
        }
        let mut index = Self {
            origin: lo,
            width,
            nb,
            start: vec![0; nb[0] * nb[1] + 1],
            ids: vec![0; points.len()],
            points,
        };
        let mut counts = vec![0usize; nb[0] * nb[1]];
        let buckets: Vec<usize> = index.points.iter().map(|p| index.bucket_of(*p)).collect();
        for &b in &buckets {
            counts[b] += 1;
        }
        for b in 0..counts.len() {
            index.start[b + 1] = index.start[b] + counts[b];
        }
        let mut fill = index.start.clone();
        for (id, &b) in buckets.iter().enumerate() {
            index.ids[fill[b]] = id;
            fill[b] += 1;
        }
        index
    }

    fn coord(&self, p: Point<S>, a: usize) -> usize {
        let u = ((p[a] - self.origin[a]) / self.width[a]).floor();
        if u < S::zero() {
            0
        } else {
            u.to_usize().unwrap_or(usize::MAX).min(self.nb[a] - 1)
        }
    }

    fn bucket_of(&self, p: Point<S>) -> usize {
        self.coord(p, 0) * self.nb[1] + self.coord(p, 1)
    }

    /// Nearest indexed point to `q` as `(position, squared distance)`.
    pub fn nearest(&self, q: Point<S>) -> (usize, S) {
        let (bx, by) = (self.coord(q, 0) as isize, self.coord(q, 1) as isize);
        let mut best: Option<(usize, S)> = None;
        let mut r: isize = 0;
        loop {
            for x in (bx - r)..=(bx + r) {
                if x < 0 || x >= self.nb[0] as isize {
                    continue;
                }
                let on_x_edge = x == bx - r || x == bx + r;
                let mut y = by - r;
                while y <= by + r {
                    if y >= 0 && y < self.nb[1] as isize {
                        let b = x as usize * self.nb[1] + y as usize;
                        for &id in &self.ids[self.start[b]..self.start[b + 1]] {
                            let p = self.points[id];
                            let d2 = (p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]);
                            let better = match best {
                                None => true,
                                Some((bid, bd)) => d2 < bd || (d2 == bd && id < bid),
                            };
                            if better {
                                best = Some((id, d2));
                            }
                        }
                    }
                    // interior columns of the ring only need their two end rows
                    y += if on_x_edge || y == by + r { 1 } else { 2 * r };
                }
            }
            let covers_all = bx - r <= 0
                && by - r <= 0
                && bx + r >= self.nb[0] as isize - 1
                && by + r >= self.nb[1] as isize - 1;
            if covers_all {
                break;
            }
            if let Some((_, bd)) = best {
                if bd < self.unexplored_bound(q, bx, by, r) {
                    break;
                }
            }
            r += 1;
        }
        best.expect("index is non-empty")
    }

    /// Lower bound on the squared distance from `q` to any point outside the
    /// block of rings `0..=r`.
    fn unexplored_bound(&self, q: Point<S>, bx: isize, by: isize, r: isize) -> S {
        let mut lb = S::infinity();
        let centers = [bx, by];
        for a in 0..2 {
            let c = centers[a];
            if c - r > 0 {
                let edge = self.origin[a] + S::from_usize_lossy((c - r) as usize) * self.width[a];
                lb = lb.min((q[a] - edge).max(S::zero()));
            }
            if c + r < self.nb[a] as isize - 1 {
                let edge = self.origin[a] + S::from_usize_lossy((c + r + 1) as usize) * self.width[a];
                lb = lb.min((edge - q[a]).max(S::zero()));
            }
        }
        lb * lb
    }
}
