//! Geometric kernels over small point sets.
//!
//! Everything here is brute force and deterministic. Distance sorts break
//! ties by ascending point index, with the anchor point itself always first
//! in its own row, so row-parallel callers get identical answers.

use std::cmp::Ordering;
use std::f64::consts::{PI, TAU};

use crate::diffcore::Matrix;
use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

#[inline]
pub fn sub3(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add3(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn norm3(a: Point3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

#[inline]
pub fn dist3(a: Point3, b: Point3) -> f64 {
    norm3(sub3(a, b))
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = (a + PI).rem_euclid(TAU) - PI;
    if r <= -PI {
        r + TAU
    } else {
        r
    }
}

/// Rotates `p` about the up (z) axis by `yaw` radians.
#[inline]
pub fn rotate_z(p: Point3, yaw: f64) -> Point3 {
    let (s, c) = yaw.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
}

/// A point set with optional per-point features.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub coords: Vec<Point3>,
    pub features: Option<Matrix>,
}

impl PointCloud {
    pub fn new(coords: Vec<Point3>) -> Result<Self> {
        check_finite(&coords)?;
        Ok(Self {
            coords,
            features: None,
        })
    }

    pub fn with_features(coords: Vec<Point3>, features: Matrix) -> Result<Self> {
        check_finite(&coords)?;
        if features.rows() != coords.len() {
            return Err(Error::Input(format!(
                "feature rows {} != point count {}",
                features.rows(),
                coords.len()
            )));
        }
        Ok(Self {
            coords,
            features: Some(features),
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

pub(crate) fn check_finite(coords: &[Point3]) -> Result<()> {
    match coords.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
        Some(i) => Err(Error::Input(format!("non-finite coordinate at point {i}"))),
        None => Ok(()),
    }
}

/// An oriented box that rotates only about the up axis.
///
/// `size` is stored as `[w, h, l]`. In the box frame, `l` spans the local x
/// (heading) axis, `w` the local y axis and `h` the up axis.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Box3D {
    pub center: Point3,
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: Point3, size: [f64; 3], yaw: f64) -> Result<Self> {
        let b = Self {
            center,
            size,
            yaw: wrap_angle(yaw),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.center.iter().any(|v| !v.is_finite()) || !self.yaw.is_finite() {
            return Err(Error::Input("non-finite box center or yaw".into()));
        }
        if self.size.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Parameter(format!(
                "box size must be strictly positive, got {:?}",
                self.size
            )));
        }
        Ok(())
    }

    /// Half extents along the local (x, y, z) axes.
    pub fn half_extents(&self) -> Point3 {
        let [w, h, l] = self.size;
        [l / 2.0, w / 2.0, h / 2.0]
    }

    pub fn to_local(&self, p: Point3) -> Point3 {
        rotate_z(sub3(p, self.center), -self.yaw)
    }

    pub fn to_world(&self, p: Point3) -> Point3 {
        add3(rotate_z(p, self.yaw), self.center)
    }

    /// Expresses this box in the frame of `reference`.
    pub fn relative_to(&self, reference: &Box3D) -> Box3D {
        Box3D {
            center: reference.to_local(self.center),
            size: self.size,
            yaw: wrap_angle(self.yaw - reference.yaw),
        }
    }

    /// Inverse of [`Box3D::relative_to`].
    pub fn from_relative(&self, reference: &Box3D) -> Box3D {
        Box3D {
            center: reference.to_world(self.center),
            size: self.size,
            yaw: wrap_angle(self.yaw + reference.yaw),
        }
    }

    pub fn contains(&self, p: Point3) -> bool {
        let q = self.to_local(p);
        let h = self.half_extents();
        q[0].abs() <= h[0] && q[1].abs() <= h[1] && q[2].abs() <= h[2]
    }

    /// Ground-plane footprint corners, counter-clockwise.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let h = self.half_extents();
        let local = [[h[0], h[1]], [-h[0], h[1]], [-h[0], -h[1]], [h[0], -h[1]]];
        local.map(|[x, y]| {
            let w = self.to_world([x, y, 0.0]);
            [w[0], w[1]]
        })
    }

    /// The eight box corners in world coordinates.
    pub fn corners(&self) -> [Point3; 8] {
        let h = self.half_extents();
        let mut out = [[0.0; 3]; 8];
        for (i, c) in out.iter_mut().enumerate() {
            let sx = if i & 1 == 0 { 1.0 } else { -1.0 };
            let sy = if i & 2 == 0 { 1.0 } else { -1.0 };
            let sz = if i & 4 == 0 { 1.0 } else { -1.0 };
            *c = self.to_world([sx * h[0], sy * h[1], sz * h[2]]);
        }
        out
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }
}

/// Pairwise Euclidean distances of a point set.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.d[i * self.n..(i + 1) * self.n]
    }

    /// Indices of row `i` in ascending distance, anchor first, ties by index.
    pub fn sorted_row(&self, i: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n).collect();
        let row = self.row(i);
        idx.sort_by(|&a, &b| neighbor_order(row, i, a, b));
        idx
    }
}

#[inline]
fn neighbor_order(row: &[f64], anchor: usize, a: usize, b: usize) -> Ordering {
    row[a]
        .total_cmp(&row[b])
        .then_with(|| (a != anchor).cmp(&(b != anchor)))
        .then_with(|| a.cmp(&b))
}

/// Per-anchor neighbor lists, `rows × k` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborIndex {
    pub indices: Vec<usize>,
    pub k: usize,
}

impl NeighborIndex {
    pub fn rows(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }
}

pub fn distance_matrix(coords: &[Point3]) -> Result<DistanceMatrix> {
    if coords.is_empty() {
        return Err(Error::Input("distance matrix of an empty point set".into()));
    }
    check_finite(coords)?;
    let n = coords.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = dist3(coords[i], coords[j]);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    Ok(DistanceMatrix { n, d })
}

/// Stride-samples each distance-sorted row: positions `0, s, 2s, …` with
/// `s = floor(M / m)`, giving exactly `m` indices per anchor.
pub fn sparse_sample(dist: &DistanceMatrix, m: usize) -> Result<NeighborIndex> {
    let n = dist.len();
    if m == 0 || m > n {
        return Err(Error::Parameter(format!(
            "sparse sample count {m} must lie in [1, {n}]"
        )));
    }
    let stride = n / m;
    let mut indices = Vec::with_capacity(n * m);
    for i in 0..n {
        let sorted = dist.sorted_row(i);
        indices.extend((0..m).map(|p| sorted[p * stride]));
    }
    Ok(NeighborIndex { indices, k: m })
}

/// The `n` nearest indices of each anchor (itself included), ascending.
pub fn knn_sample(dist: &DistanceMatrix, n: usize) -> Result<NeighborIndex> {
    let total = dist.len();
    if n == 0 || n > total {
        return Err(Error::Parameter(format!(
            "knn count {n} must lie in [1, {total}]"
        )));
    }
    let mut indices = Vec::with_capacity(total * n);
    let mut idx: Vec<usize> = Vec::with_capacity(total);
    for i in 0..total {
        let row = dist.row(i);
        idx.clear();
        idx.extend(0..total);
        let cmp = |a: &usize, b: &usize| neighbor_order(row, i, *a, *b);
        if n < total {
            idx.select_nth_unstable_by(n - 1, cmp);
        }
        idx[..n].sort_by(cmp);
        indices.extend_from_slice(&idx[..n]);
    }
    Ok(NeighborIndex { indices, k: n })
}

/// `k` nearest points of `cloud` for each query point, ascending by
/// distance, ties by index.
pub fn knn_query(cloud: &[Point3], queries: &[Point3], k: usize) -> Result<NeighborIndex> {
    if k == 0 || k > cloud.len() {
        return Err(Error::Parameter(format!(
            "knn count {k} must lie in [1, {}]",
            cloud.len()
        )));
    }
    let mut indices = Vec::with_capacity(queries.len() * k);
    let mut d = vec![0.0; cloud.len()];
    let mut idx: Vec<usize> = Vec::with_capacity(cloud.len());
    for q in queries {
        for (dj, p) in d.iter_mut().zip(cloud) {
            *dj = dist3(*q, *p);
        }
        idx.clear();
        idx.extend(0..cloud.len());
        let cmp = |a: &usize, b: &usize| d[*a].total_cmp(&d[*b]).then_with(|| a.cmp(b));
        if k < cloud.len() {
            idx.select_nth_unstable_by(k - 1, cmp);
        }
        idx[..k].sort_by(cmp);
        indices.extend_from_slice(&idx[..k]);
    }
    Ok(NeighborIndex { indices, k })
}

/// Greedy farthest-point sampling starting from `start`.
pub fn farthest_point_sample(coords: &[Point3], k: usize, start: usize) -> Result<Vec<usize>> {
    let n = coords.len();
    if k == 0 || k > n {
        return Err(Error::Parameter(format!(
            "fps count {k} must lie in [1, {n}]"
        )));
    }
    if start >= n {
        return Err(Error::Parameter(format!("fps start {start} out of range {n}")));
    }
    let mut picked = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut cur = start;
    for _ in 0..k {
        picked.push(cur);
        taken[cur] = true;
        let c = coords[cur];
        let mut best: Option<usize> = None;
        for j in 0..n {
            if taken[j] {
                continue;
            }
            let d = dist3(c, coords[j]);
            if d < min_d[j] {
                min_d[j] = d;
            }
            match best {
                Some(b) if min_d[j] <= min_d[b] => {}
                _ => best = Some(j),
            }
        }
        match best {
            Some(b) => cur = b,
            None => break,
        }
    }
    Ok(picked)
}

pub fn points_in_box(coords: &[Point3], bbox: &Box3D) -> Result<Vec<bool>> {
    bbox.validate()?;
    Ok(coords.iter().map(|&p| bbox.contains(p)).collect())
}

/// Volume intersection-over-union of two up-axis-rotated boxes.
pub fn box_iou_3d(a: &Box3D, b: &Box3D) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let za = (a.center[2] - a.size[1] / 2.0, a.center[2] + a.size[1] / 2.0);
    let zb = (b.center[2] - b.size[1] / 2.0, b.center[2] + b.size[1] / 2.0);
    let dz = (za.1.min(zb.1) - za.0.max(zb.0)).max(0.0);
    if dz == 0.0 {
        return Ok(0.0);
    }
    let area = convex_intersection_area(&a.footprint(), &b.footprint());
    let inter = area * dz;
    let union = a.volume() + b.volume() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let mut s = 0.0;
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        s += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * s.abs()
}

/// Sutherland–Hodgman clipping of `subject` by the counter-clockwise
/// convex polygon `clip`.
fn convex_intersection_area(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> f64 {
    let mut out: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            return 0.0;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let sp = side(p);
            let sq = side(q);
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    if out.len() < 3 {
        0.0
    } else {
        polygon_area(&out)
    }
}
