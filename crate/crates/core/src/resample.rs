//! Scattered-sample to uniform-grid interpolation.
//!
//! Barycentric linear interpolation over a Delaunay triangulation, so linear
//! fields are reproduced exactly and the output never overshoots the samples.

use delaunator::{triangulate, Point};

use crate::error::{invalid, LfsError, Result};
use crate::field::GridFrame;
use crate::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct ScatteredSample {
    points: Vec<(f64, f64)>,
    values: Vec<f64>,
}

impl ScatteredSample {
    pub fn new(points: Vec<(f64, f64)>, values: Vec<f64>) -> Result<Self> {
        if points.len() != values.len() {
            return Err(LfsError::Shape(format!(
                "{} points but {} values",
                points.len(),
                values.len()
            )));
        }
        if points.len() < 3 {
            return Err(invalid("a scattered sample needs at least 3 points"));
        }
        if points.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) || values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("scattered sample contains non-finite entries"));
        }
        let mut sorted: Vec<(f64, f64)> = points.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("scattered sample contains duplicate points"));
        }
        Ok(Self { points, values })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Axis-aligned domain rectangle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_max > x_min && y_max > y_min) {
            return Err(invalid("bounding box must have positive extent"));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn unit() -> Self {
        Self {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 1.0,
            y_max: 1.0,
        }
    }

    /// Smallest box containing every sample point.
    pub fn enclosing(sample: &ScatteredSample) -> Result<Self> {
        let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(x, y) in sample.points() {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        Self::new(x0, y0, x1, y1)
    }
}

/// Side information from [`resample_to_grid`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ResampleReport {
    /// Grid nodes outside the convex hull that took the nearest sample value.
    pub hull_fallbacks: usize,
    pub triangles: usize,
}

struct Locator {
    x0: f64,
    y0: f64,
    bw: f64,
    bh: f64,
    n: usize,
    buckets: Vec<Vec<usize>>,
}

impl Locator {
    fn new(pts: &[(f64, f64)], tris: &[usize], domain: &BoundingBox) -> Self {
        let n_tri = tris.len() / 3;
        let n = ((n_tri as f64).sqrt().ceil() as usize).clamp(1, 256);
        let (mut x0, mut y0, mut x1, mut y1) = (domain.x_min, domain.y_min, domain.x_max, domain.y_max);
        for &(x, y) in pts {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        let bw = (x1 - x0) / n as f64;
        let bh = (y1 - y0) / n as f64;
        let mut loc = Self {
            x0,
            y0,
            bw,
            bh,
            n,
            buckets: vec![Vec::new(); n * n],
        };
        for t in 0..n_tri {
            let v = [pts[tris[3 * t]], pts[tris[3 * t + 1]], pts[tris[3 * t + 2]]];
            let (lx, hx) = (
                v.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
                v.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
            );
            let (ly, hy) = (
                v.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
                v.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
            );
            let (c0, c1) = (loc.col(lx), loc.col(hx));
            let (r0, r1) = (loc.row(ly), loc.row(hy));
            for r in r0..=r1 {
                for c in c0..=c1 {
                    loc.buckets[r * n + c].push(t);
                }
            }
        }
        loc
    }

    fn col(&self, x: f64) -> usize {
        (((x - self.x0) / self.bw).floor().max(0.0) as usize).min(self.n - 1)
    }

    fn row(&self, y: f64) -> usize {
        (((y - self.y0) / self.bh).floor().max(0.0) as usize).min(self.n - 1)
    }

    fn candidates(&self, x: f64, y: f64) -> &[usize] {
        &self.buckets[self.row(y) * self.n + self.col(x)]
    }
}

const INSIDE_TOL: f64 = 1e-12;

fn barycentric(p: (f64, f64), a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> [f64; 3] {
    let det = (b.1 - c.1) * (a.0 - c.0) + (c.0 - b.0) * (a.1 - c.1);
    let l0 = ((b.1 - c.1) * (p.0 - c.0) + (c.0 - b.0) * (p.1 - c.1)) / det;
    let l1 = ((c.1 - a.1) * (p.0 - c.0) + (a.0 - c.0) * (p.1 - c.1)) / det;
    [l0, l1, 1.0 - l0 - l1]
}

/// Interpolates `sample` onto the `k×k` nodes spanning `domain` (corners
/// included). Row 0 is the top edge (`y = y_max`).
pub fn resample_to_grid<S: Scalar>(
    sample: &ScatteredSample,
    k: usize,
    domain: &BoundingBox,
) -> Result<(GridFrame<S>, ResampleReport)> {
    if k < 2 {
        return Err(invalid("resampling needs k >= 2"));
    }
    let pts = sample.points();
    let vals = sample.values();
    let dpts: Vec<Point> = pts.iter().map(|&(x, y)| Point { x, y }).collect();
    let tri = triangulate(&dpts);
    if tri.triangles.is_empty() {
        return Err(LfsError::Degenerate("sample points are collinear".into()));
    }
    let tris = &tri.triangles;
    let loc = Locator::new(pts, tris, domain);
    let mut report = ResampleReport {
        hull_fallbacks: 0,
        triangles: tris.len() / 3,
    };

    let dx = (domain.x_max - domain.x_min) / (k - 1) as f64;
    let dy = (domain.y_max - domain.y_min) / (k - 1) as f64;
    let mut out = Vec::with_capacity(k * k);
    for r in 0..k {
        let y = if r == k - 1 {
            domain.y_min
        } else {
            domain.y_max - r as f64 * dy
        };
        for c in 0..k {
            let x = if c == k - 1 {
                domain.x_max
            } else {
                domain.x_min + c as f64 * dx
            };
            let value = interpolate((x, y), pts, vals, tris, &loc).unwrap_or_else(|| {
                report.hull_fallbacks += 1;
                nearest(pts, vals, (x, y))
            });
            out.push(S::lit(value));
        }
    }
    let frame = GridFrame::new(k, out)?.with_cell_size(dx);
    Ok((frame, report))
}

fn interpolate(p: (f64, f64), pts: &[(f64, f64)], vals: &[f64], tris: &[usize], loc: &Locator) -> Option<f64> {
    for &t in loc.candidates(p.0, p.1) {
        let idx = [tris[3 * t], tris[3 * t + 1], tris[3 * t + 2]];
        // exact coincidence returns the sample value untouched
        if let Some(&i) = idx.iter().find(|&&i| pts[i] == p) {
            return Some(vals[i]);
        }
        let l = barycentric(p, pts[idx[0]], pts[idx[1]], pts[idx[2]]);
        if l.iter().all(|&w| w >= -INSIDE_TOL) {
            let w: [f64; 3] = l.map(|w| w.max(0.0));
            let total: f64 = w.iter().sum();
            let v = (w[0] * vals[idx[0]] + w[1] * vals[idx[1]] + w[2] * vals[idx[2]]) / total;
            // guard against rounding outside the vertex range
            let lo = idx.iter().map(|&i| vals[i]).fold(f64::INFINITY, f64::min);
            let hi = idx.iter().map(|&i| vals[i]).fold(f64::NEG_INFINITY, f64::max);
            return Some(v.clamp(lo, hi));
        }
    }
    None
}

fn nearest(pts: &[(f64, f64)], vals: &[f64], p: (f64, f64)) -> f64 {
    let mut best = (f64::INFINITY, 0);
    for (i, q) in pts.iter().enumerate() {
        let d = (q.0 - p.0).powi(2) + (q.1 - p.1).powi(2);
        if d < best.0 {
            best = (d, i);
        }
    }
    vals[best.1]
}
