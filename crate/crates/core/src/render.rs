//! SVG figures: measure heatmaps, labelled scatters, paths and iso-distance
//! contours.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::field::{EmbeddingSet, MeasureField};
use crate::geometry::LatentPath;
use crate::grid::GridSpec;
use crate::scalar::{Point, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Contrast {
    Linear,
    /// `sqrt(v / max)`: lifts small values so faint structure shows.
    Sqrt,
}

impl FromStr for Contrast {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Contrast::Linear),
            "sqrt" => Ok(Contrast::Sqrt),
            _ => Err(Error::input(format!("unknown contrast {s:?} (linear, sqrt)"))),
        }
    }
}

/// Single-hue ramps from white to a dark tone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Colormap {
    Reds,
    Greys,
    Blues,
}

impl Colormap {
    fn dark(self) -> [f64; 3] {
        match self {
            Colormap::Reds => [165.0, 15.0, 21.0],
            Colormap::Greys => [0.0, 0.0, 0.0],
            Colormap::Blues => [8.0, 48.0, 107.0],
        }
    }

    /// Color at `t` in `[0, 1]`.
    pub fn color(self, t: f64) -> String {
        let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
        let d = self.dark();
        let c = |k: usize| (255.0 + (d[k] - 255.0) * t).round() as u8;
        format!("#{:02x}{:02x}{:02x}", c(0), c(1), c(2))
    }
}

impl FromStr for Colormap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reds" => Ok(Colormap::Reds),
            "greys" | "grays" => Ok(Colormap::Greys),
            "blues" => Ok(Colormap::Blues),
            _ => Err(Error::input(format!("unknown colormap {s:?} (reds, greys, blues)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Layer {
    Heatmap,
    Scatter,
    Paths,
    Contours,
}

impl FromStr for Layer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heatmap" => Ok(Layer::Heatmap),
            "scatter" => Ok(Layer::Scatter),
            "paths" => Ok(Layer::Paths),
            "contours" => Ok(Layer::Contours),
            _ => Err(Error::input(format!("unknown layer {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderSpec {
    pub width: u32,
    pub height: u32,
    pub contrast: Contrast,
    pub colormap: Colormap,
    /// Drawn in this order; layers without data are skipped.
    pub layers: Vec<Layer>,
    pub contour_levels: Vec<f64>,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            width: 800,
            height: 800,
            contrast: Contrast::Sqrt,
            colormap: Colormap::Reds,
            layers: vec![Layer::Heatmap, Layer::Contours, Layer::Scatter, Layer::Paths],
            contour_levels: Vec::new(),
        }
    }
}

impl RenderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 64 || self.height < 64 {
            return Err(Error::input(format!("canvas must be at least 64x64, got {}x{}", self.width, self.height)));
        }
        if self.contour_levels.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::input("contour levels must be positive"));
        }
        if self.contour_levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::input("contour levels must be strictly increasing"));
        }
        Ok(())
    }
}

/// Data to draw; any part may be absent.
#[derive(Clone, Copy, Debug)]
pub struct Scene<'a, S> {
    pub measure: Option<&'a MeasureField<S>>,
    pub embeddings: Option<&'a EmbeddingSet<S>>,
    pub paths: &'a [LatentPath<S>],
    pub distance: Option<&'a MeasureField<S>>,
}

impl<S> Default for Scene<'_, S> {
    fn default() -> Self {
        Self {
            measure: None,
            embeddings: None,
            paths: &[],
            distance: None,
        }
    }
}

/// Fixed categorical palette, cycled over the sorted labels.
pub const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Iso-lines of `values` (sampled on the integer lattice) at `level`, in
/// lattice coordinates: `[i, j]` is the sample `values[[i, j]]`.
///
/// Corners at or above the level count as inside. Edge crossings are placed
/// by linear interpolation; in saddle squares the mean of the four corners
/// decides which pairs of crossings connect. Segments are chained through
/// shared edges into polylines; closed loops repeat their first vertex.
pub fn marching_squares(values: &Array2<f64>, level: f64) -> Vec<Vec<[f64; 2]>> {
    let (n1, n2) = values.dim();
    if n1 < 2 || n2 < 2 {
        return Vec::new();
    }
    // edge ids: (i, j)-(i+1, j) is i * n2 + j; (i, j)-(i, j+1) comes after
    let vertical_base = (n1 - 1) * n2;
    let e_along1 = |i: usize, j: usize| i * n2 + j;
    let e_along2 = |i: usize, j: usize| vertical_base + i * (n2 - 1) + j;
    let above = |i: usize, j: usize| values[[i, j]] >= level;
    let crossing = |a: (usize, usize), b: (usize, usize)| -> [f64; 2] {
        let (fa, fb) = (values[[a.0, a.1]], values[[b.0, b.1]]);
        let t = if fb != fa { ((level - fa) / (fb - fa)).clamp(0.0, 1.0) } else { 0.5 };
        [a.0 as f64 + t * (b.0 as f64 - a.0 as f64), a.1 as f64 + t * (b.1 as f64 - a.1 as f64)]
    };

    let mut point_of: BTreeMap<usize, [f64; 2]> = BTreeMap::new();
    let mut links: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut link = |a: usize, b: usize| {
        links.entry(a).or_default().push(b);
        links.entry(b).or_default().push(a);
    };
    for i in 0..n1 - 1 {
        for j in 0..n2 - 1 {
            let corners = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
            let inside = corners.map(|(a, b)| above(a, b));
            // edge k joins corner k and corner k + 1
            let edges = [e_along1(i, j), e_along2(i + 1, j), e_along1(i, j + 1), e_along2(i, j)];
            let mut crossed = Vec::with_capacity(4);
            for k in 0..4 {
                if inside[k] != inside[(k + 1) % 4] {
                    point_of.entry(edges[k]).or_insert_with(|| crossing(corners[k], corners[(k + 1) % 4]));
                    crossed.push(k);
                }
            }
            match crossed.len() {
                2 => link(edges[crossed[0]], edges[crossed[1]]),
                4 => {
                    let mean = corners.iter().map(|&(a, b)| values[[a, b]]).sum::<f64>() / 4.0;
                    // corners 0 and 2 share a state; cut off the two corners
                    // whose state differs from the center's
                    let center_inside = mean >= level;
                    if inside[0] == center_inside {
                        link(edges[0], edges[1]);
                        link(edges[2], edges[3]);
                    } else {
                        link(edges[3], edges[0]);
                        link(edges[1], edges[2]);
                    }
                }
                _ => {}
            }
        }
    }

    // every edge node has at most two links, so the graph is paths and cycles
    let mut visited = std::collections::BTreeSet::new();
    let walk = |start: usize, visited: &mut std::collections::BTreeSet<usize>| -> Vec<[f64; 2]> {
        let mut line = vec![point_of[&start]];
        visited.insert(start);
        let mut cur = start;
        loop {
            let nbrs = &links[&cur];
            if let Some(&next) = nbrs.iter().find(|n| !visited.contains(*n)) {
                visited.insert(next);
                line.push(point_of[&next]);
                cur = next;
            } else {
                if line.len() > 2 && nbrs.contains(&start) {
                    line.push(point_of[&start]);
                }
                break;
            }
        }
        line
    };
    let mut lines = Vec::new();
    // open lines start at boundary crossings (one link), then closed loops
    let ends: Vec<usize> = links.iter().filter(|(_, l)| l.len() == 1).map(|(&e, _)| e).collect();
    for e in ends.into_iter().chain(links.keys().copied().collect::<Vec<_>>()) {
        if !visited.contains(&e) {
            lines.push(walk(e, &mut visited));
        }
    }
    lines
}

struct View {
    min: [f64; 2],
    max: [f64; 2],
    w: f64,
    h: f64,
}

impl View {
    fn px(&self, z: [f64; 2]) -> (f64, f64) {
        (
            (z[0] - self.min[0]) / (self.max[0] - self.min[0]) * self.w,
            self.h - (z[1] - self.min[1]) / (self.max[1] - self.min[1]) * self.h,
        )
    }
}

fn f64pt<S: Scalar>(p: Point<S>) -> [f64; 2] {
    [p[0].to_f64_lossy(), p[1].to_f64_lossy()]
}

fn polyline(out: &mut String, pts: impl Iterator<Item = (f64, f64)>, style: &str) {
    let coords: Vec<String> = pts.map(|(x, y)| format!("{x:.3},{y:.3}")).collect();
    let _ = writeln!(out, r#"<polyline points="{}" {style}/>"#, coords.join(" "));
}

/// Renders the scene as an SVG 1.1 document. Output depends only on the
/// inputs.
pub fn render_scene<S: Scalar>(scene: &Scene<'_, S>, spec: &RenderSpec) -> Result<String> {
    spec.validate()?;
    if let (Some(m), Some(d)) = (scene.measure, scene.distance) {
        if !m.spec().same_as(d.spec()) {
            return Err(Error::input("measure and distance fields live on different grids"));
        }
    }
    let has = |l: Layer| match l {
        Layer::Heatmap => scene.measure.is_some(),
        Layer::Scatter => scene.embeddings.is_some(),
        Layer::Paths => !scene.paths.is_empty(),
        Layer::Contours => scene.distance.is_some() && !spec.contour_levels.is_empty(),
    };
    let layers: Vec<Layer> = spec.layers.iter().copied().filter(|&l| has(l)).collect();
    if layers.is_empty() {
        return Err(Error::input("nothing to draw: no requested layer has data"));
    }

    let grid: Option<&GridSpec<S>> = scene.measure.or(scene.distance).map(|f| f.spec());
    let view = match grid {
        Some(g) => View {
            min: f64pt(g.min()),
            max: f64pt(g.max()),
            w: spec.width as f64,
            h: spec.height as f64,
        },
        None => {
            let mut pts: Vec<[f64; 2]> = Vec::new();
            if let Some(e) = scene.embeddings {
                pts.extend(e.points().iter().map(|&p| f64pt(p)));
            }
            for p in scene.paths {
                pts.extend(p.points().iter().map(|&p| f64pt(p)));
            }
            let mut min = pts[0];
            let mut max = pts[0];
            for p in &pts {
                for a in 0..2 {
                    min[a] = min[a].min(p[a]);
                    max[a] = max[a].max(p[a]);
                }
            }
            for a in 0..2 {
                let pad = 0.05 * (max[a] - min[a]).max(1e-9);
                min[a] -= pad;
                max[a] += pad;
            }
            View {
                min,
                max,
                w: spec.width as f64,
                h: spec.height as f64,
            }
        }
    };

    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = spec.width,
        h = spec.height
    );
    let _ = writeln!(out, r##"<rect x="0" y="0" width="{}" height="{}" fill="#ffffff"/>"##, spec.width, spec.height);
    for layer in layers {
        match layer {
            Layer::Heatmap => heatmap(&mut out, scene.measure.expect("checked"), spec, &view),
            Layer::Contours => contours(&mut out, scene.distance.expect("checked"), spec, &view),
            Layer::Scatter => scatter(&mut out, scene.embeddings.expect("checked"), &view),
            Layer::Paths => {
                let _ = writeln!(out, r#"<g id="paths">"#);
                for p in scene.paths {
                    polyline(
                        &mut out,
                        p.points().iter().map(|&z| view.px(f64pt(z))),
                        r##"fill="none" stroke="#000000" stroke-width="1.5""##,
                    );
                }
                let _ = writeln!(out, "</g>");
            }
        }
    }
    let _ = writeln!(out, "</svg>");
    Ok(out)
}

fn heatmap<S: Scalar>(out: &mut String, m: &MeasureField<S>, spec: &RenderSpec, view: &View) {
    let (n1, n2) = (m.spec().n1(), m.spec().n2());
    let b1 = n1.div_ceil(spec.width as usize).max(1);
    let b2 = n2.div_ceil(spec.height as usize).max(1);
    let (c1, c2) = (n1.div_ceil(b1), n2.div_ceil(b2));
    let mut blocks = Array2::<f64>::zeros((c1, c2));
    for bi in 0..c1 {
        for bj in 0..c2 {
            let (mut s, mut n) = (0.0, 0usize);
            for i in bi * b1..((bi + 1) * b1).min(n1) {
                for j in bj * b2..((bj + 1) * b2).min(n2) {
                    s += m.values()[[i, j]].to_f64_lossy();
                    n += 1;
                }
            }
            blocks[[bi, bj]] = s / n as f64;
        }
    }
    let max = blocks.iter().copied().fold(0.0, f64::max);
    let w = m.spec().cell_width();
    let (w1, w2) = (w[0].to_f64_lossy(), w[1].to_f64_lossy());
    let lo = f64pt(m.spec().min());
    let _ = writeln!(out, r#"<g id="heatmap" shape-rendering="crispEdges">"#);
    for bi in 0..c1 {
        for bj in 0..c2 {
            let z0 = [lo[0] + (bi * b1) as f64 * w1, lo[1] + (bj * b2) as f64 * w2];
            let z1 = [
                lo[0] + ((bi + 1) * b1).min(n1) as f64 * w1,
                lo[1] + ((bj + 1) * b2).min(n2) as f64 * w2,
            ];
            let (x0, y1) = view.px(z0);
            let (x1, y0) = view.px(z1);
            let t = if max > 0.0 { blocks[[bi, bj]] / max } else { 0.0 };
            let t = match spec.contrast {
                Contrast::Linear => t,
                Contrast::Sqrt => t.sqrt(),
            };
            let _ = writeln!(
                out,
                r#"<rect x="{x0:.3}" y="{y0:.3}" width="{:.3}" height="{:.3}" fill="{}"/>"#,
                x1 - x0,
                y1 - y0,
                spec.colormap.color(t)
            );
        }
    }
    let _ = writeln!(out, "</g>");
}

fn contours<S: Scalar>(out: &mut String, d: &MeasureField<S>, spec: &RenderSpec, view: &View) {
    let values = d.values().mapv(|v| v.to_f64_lossy());
    let g = d.spec();
    let lo = f64pt(g.min());
    let w = g.cell_width();
    let (w1, w2) = (w[0].to_f64_lossy(), w[1].to_f64_lossy());
    let _ = writeln!(out, r#"<g id="contours">"#);
    for &level in &spec.contour_levels {
        for line in marching_squares(&values, level) {
            polyline(
                out,
                line.iter().map(|p| view.px([lo[0] + (p[0] + 0.5) * w1, lo[1] + (p[1] + 0.5) * w2])),
                r##"fill="none" stroke="#000000" stroke-width="1" stroke-dasharray="4 3""##,
            );
        }
    }
    let _ = writeln!(out, "</g>");
}

fn scatter<S: Scalar>(out: &mut String, e: &EmbeddingSet<S>, view: &View) {
    let colors: BTreeMap<String, &str> = e
        .classes()
        .unwrap_or_default()
        .into_iter()
        .enumerate()
        .map(|(k, c)| (c, PALETTE[k % PALETTE.len()]))
        .collect();
    let _ = writeln!(out, r#"<g id="scatter">"#);
    for (k, &p) in e.points().iter().enumerate() {
        let (x, y) = view.px(f64pt(p));
        let fill = e.labels().map(|l| colors[&l[k]]).unwrap_or("#000000");
        let _ = writeln!(out, r#"<circle cx="{x:.3}" cy="{y:.3}" r="2" fill="{fill}"/>"#);
    }
    let _ = writeln!(out, "</g>");
}
