//! Polytopes, axis-aligned grid partitions of the state space, point location
//! and simplicial decomposition of box cells.
//!
//! Every cell of a [`GridPartition`] is an axis-aligned box stored as a general
//! [`Polytope`] (H- and V-representation plus facet/vertex incidence). The
//! reachability conditions only consume that incidence data, so the partition
//! shape could be generalised later without touching the `reach` module.
//!
//! Box conventions used throughout the crate:
//! * facet `2d` is the low face of dimension `d` (normal `-e_d`), facet `2d + 1`
//!   the high face (normal `+e_d`);
//! * vertex `k` takes the high coordinate in dimension `d` iff bit `d` of `k` is
//!   set, so vertex `0` is the lexicographically smallest corner;
//! * cell ids are linear indices with dimension `0` varying fastest.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance for facet membership and containment tests.
pub const FACET_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("point {point:?} lies outside the state domain")]
    OutOfDomain { point: Vec<f64> },
    #[error("unsupported geometry: {0}")]
    UnsupportedGeometry(String),
    #[error("cell id {0} out of range")]
    InvalidCell(usize),
    #[error("degenerate polytope: {0}")]
    Degenerate(String),
}

/// Axis-aligned box `lo <= x <= hi`, used both for the state domain and for
/// the control polytope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl AxisBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, GeometryError> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(GeometryError::InvalidDomain(format!(
                "bound lengths {} and {} must match and be nonzero",
                lo.len(),
                hi.len()
            )));
        }
        for (d, (l, h)) in lo.iter().zip(&hi).enumerate() {
            if !l.is_finite() || !h.is_finite() {
                return Err(GeometryError::InvalidDomain(format!(
                    "non-finite bound in dimension {d}"
                )));
            }
            if l > h {
                return Err(GeometryError::InvalidDomain(format!(
                    "low {l} exceeds high {h} in dimension {d}"
                )));
            }
        }
        Ok(Self { lo, hi })
    }

    /// Symmetric box `[-r, r]^dim`.
    pub fn symmetric(dim: usize, r: f64) -> Self {
        Self {
            lo: vec![-r; dim],
            hi: vec![r; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| *v >= l - tol && *v <= h + tol)
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (v, (l, h)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(*l, *h);
        }
    }

    pub fn center(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)),
        )
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).collect()
    }

    pub fn measure(&self) -> f64 {
        self.widths().iter().product()
    }

    /// Smallest half-width over all dimensions.
    pub fn min_half_width(&self) -> f64 {
        self.widths()
            .iter()
            .fold(f64::INFINITY, |acc, w| acc.min(0.5 * w))
    }
}

/// Halfspace `normal · x <= offset` with a unit-length normal.
#[derive(Debug, Clone, PartialEq)]
pub struct Halfspace {
    pub normal: DVector<f64>,
    pub offset: f64,
}

impl Halfspace {
    /// Builds a halfspace, rescaling `normal` and `offset` to a unit normal.
    pub fn new(normal: DVector<f64>, offset: f64) -> Result<Self, GeometryError> {
        let norm = normal.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(GeometryError::Degenerate("zero halfspace normal".into()));
        }
        Ok(Self {
            normal: normal / norm,
            offset: offset / norm,
        })
    }

    /// Signed violation `n · x - offset`; positive outside.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        self.normal.dot(x) - self.offset
    }
}

/// Bounded, full-dimensional convex polytope with both representations and
/// the facet/vertex incidence sets used by the reach-control conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    halfspaces: Vec<Halfspace>,
    vertices: Vec<DVector<f64>>,
    facet_vertices: Vec<Vec<usize>>,
    vertex_facets: Vec<Vec<usize>>,
    aabb: Option<AxisBox>,
}

impl Polytope {
    /// Builds a polytope from matching H- and V-representations and derives
    /// the incidence sets. Normals are normalised here.
    pub fn new(
        halfspaces: Vec<Halfspace>,
        vertices: Vec<DVector<f64>>,
    ) -> Result<Self, GeometryError> {
        let n = vertices
            .first()
            .map(|v| v.len())
            .ok_or_else(|| GeometryError::Degenerate("no vertices".into()))?;
        if vertices.iter().any(|v| v.len() != n) || halfspaces.iter().any(|h| h.normal.len() != n) {
            return Err(GeometryError::Degenerate("inconsistent dimensions".into()));
        }
        let halfspaces = halfspaces
            .into_iter()
            .map(|h| Halfspace::new(h.normal, h.offset))
            .collect::<Result<Vec<_>, _>>()?;
        for (j, v) in vertices.iter().enumerate() {
            if let Some(i) = halfspaces.iter().position(|h| h.violation(v) > FACET_TOL) {
                return Err(GeometryError::Degenerate(format!(
                    "vertex {j} violates halfspace {i}"
                )));
            }
        }
        if vertices.len() < n + 1 || affine_rank(&vertices) < n {
            return Err(GeometryError::Degenerate(
                "polytope is not full-dimensional".into(),
            ));
        }

        let facet_vertices: Vec<Vec<usize>> = halfspaces
            .iter()
            .map(|h| {
                (0..vertices.len())
                    .filter(|&j| h.violation(&vertices[j]).abs() <= FACET_TOL)
                    .collect()
            })
            .collect();
        let mut vertex_facets = vec![Vec::new(); vertices.len()];
        for (i, vs) in facet_vertices.iter().enumerate() {
            for &j in vs {
                vertex_facets[j].push(i);
            }
        }
        let aabb = detect_box(&halfspaces, &vertices);
        Ok(Self {
            halfspaces,
            vertices,
            facet_vertices,
            vertex_facets,
            aabb,
        })
    }

    /// Axis-aligned box with the facet and vertex ordering described in the
    /// module docs.
    pub fn from_box(bounds: &AxisBox) -> Result<Self, GeometryError> {
        let n = bounds.dim();
        if bounds.lo.iter().zip(&bounds.hi).any(|(l, h)| l >= h) {
            return Err(GeometryError::InvalidDomain("box has zero width".into()));
        }
        let mut halfspaces = Vec::with_capacity(2 * n);
        for d in 0..n {
            let mut lo_n = DVector::zeros(n);
            lo_n[d] = -1.0;
            halfspaces.push(Halfspace {
                normal: lo_n,
                offset: -bounds.lo[d],
            });
            let mut hi_n = DVector::zeros(n);
            hi_n[d] = 1.0;
            halfspaces.push(Halfspace {
                normal: hi_n,
                offset: bounds.hi[d],
            });
        }
        let vertices: Vec<DVector<f64>> = (0..1usize << n)
            .map(|k| {
                DVector::from_iterator(
                    n,
                    (0..n).map(|d| {
                        if k >> d & 1 == 1 {
                            bounds.hi[d]
                        } else {
                            bounds.lo[d]
                        }
                    }),
                )
            })
            .collect();
        // Closed form incidence: vertex k lies on facet 2d + bit_d(k).
        let facet_vertices = (0..2 * n)
            .map(|i| {
                let (d, high) = (i / 2, i % 2 == 1);
                (0..vertices.len())
                    .filter(|k| (k >> d & 1 == 1) == high)
                    .collect()
            })
            .collect();
        let vertex_facets = (0..vertices.len())
            .map(|k| (0..n).map(|d| 2 * d + (k >> d & 1)).collect())
            .collect();
        Ok(Self {
            halfspaces,
            vertices,
            facet_vertices,
            vertex_facets,
            aabb: Some(bounds.clone()),
        })
    }

    pub fn dim(&self) -> usize {
        self.vertices[0].len()
    }

    pub fn halfspaces(&self) -> &[Halfspace] {
        &self.halfspaces
    }

    pub fn halfspace(&self, facet: usize) -> &Halfspace {
        &self.halfspaces[facet]
    }

    pub fn vertices(&self) -> &[DVector<f64>] {
        &self.vertices
    }

    pub fn num_facets(&self) -> usize {
        self.halfspaces.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// Sorted vertex indices lying on `facet`.
    pub fn facet_vertices(&self, facet: usize) -> &[usize] {
        &self.facet_vertices[facet]
    }

    /// Sorted facet indices containing `vertex`.
    pub fn vertex_facets(&self, vertex: usize) -> &[usize] {
        &self.vertex_facets[vertex]
    }

    /// The box description when the polytope is an axis-aligned box.
    pub fn as_box(&self) -> Option<&AxisBox> {
        self.aabb.as_ref()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.halfspaces.iter().all(|h| h.violation(x) <= tol)
    }

    /// Largest signed halfspace violation and the facet attaining it (lowest
    /// index on ties).
    pub fn max_violation(&self, x: &DVector<f64>) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, h) in self.halfspaces.iter().enumerate() {
            let v = h.violation(x);
            if v > best.1 {
                best = (i, v);
            }
        }
        best
    }

    /// Vertex centroid; the geometric center for boxes.
    pub fn center(&self) -> DVector<f64> {
        let n = self.dim();
        let sum = self
            .vertices
            .iter()
            .fold(DVector::zeros(n), |acc: DVector<f64>, v| acc + v);
        sum / self.vertices.len() as f64
    }

    /// Volume, computed from a triangulation.
    pub fn measure(&self) -> Result<f64, GeometryError> {
        if let Some(b) = &self.aabb {
            return Ok(b.measure());
        }
        Ok(triangulate(self)?.iter().map(|s| s.measure(self)).sum())
    }

    /// (n-1)-dimensional measure of a box facet.
    pub fn facet_measure(&self, facet: usize) -> Result<f64, GeometryError> {
        let b = self
            .aabb
            .as_ref()
            .ok_or_else(|| GeometryError::UnsupportedGeometry("facet measure of non-box".into()))?;
        let d = facet / 2;
        Ok(b.widths()
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != d)
            .map(|(_, w)| *w)
            .product())
    }

    /// Length of the longest vertex-to-vertex segment.
    pub fn diameter(&self) -> f64 {
        let mut best: f64 = 0.0;
        for (a, va) in self.vertices.iter().enumerate() {
            for vb in &self.vertices[a + 1..] {
                best = best.max((va - vb).norm());
            }
        }
        best
    }
}

fn affine_rank(points: &[DVector<f64>]) -> usize {
    let n = points[0].len();
    let m = DMatrix::from_fn(n, points.len() - 1, |r, c| points[c + 1][r] - points[0][r]);
    m.rank(1e-12)
}

fn detect_box(halfspaces: &[Halfspace], vertices: &[DVector<f64>]) -> Option<AxisBox> {
    let n = vertices[0].len();
    if halfspaces.len() != 2 * n || vertices.len() != 1 << n {
        return None;
    }
    let mut lo = vec![f64::NAN; n];
    let mut hi = vec![f64::NAN; n];
    for h in halfspaces {
        let axis = (0..n).find(|&d| (h.normal[d].abs() - 1.0).abs() <= 1e-12)?;
        if h.normal[axis] > 0.0 {
            hi[axis] = h.offset;
        } else {
            lo[axis] = -h.offset;
        }
    }
    if lo.iter().chain(&hi).any(|v| v.is_nan()) {
        return None;
    }
    Some(AxisBox { lo, hi })
}

/// Simplex given by `n + 1` indices into its parent polytope's vertex list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Simplex {
    pub vertex_indices: Vec<usize>,
}

impl Simplex {
    pub fn points<'a>(&'a self, parent: &'a Polytope) -> impl Iterator<Item = &'a DVector<f64>> {
        self.vertex_indices
            .iter()
            .map(move |&j| &parent.vertices[j])
    }

    /// Unsigned volume `|det[v_1 - v_0, ..., v_n - v_0]| / n!`.
    pub fn measure(&self, parent: &Polytope) -> f64 {
        let n = parent.dim();
        let v0 = &parent.vertices[self.vertex_indices[0]];
        let m = DMatrix::from_fn(n, n, |r, c| {
            parent.vertices[self.vertex_indices[c + 1]][r] - v0[r]
        });
        let fact: f64 = (1..=n).map(|k| k as f64).product();
        m.determinant().abs() / fact
    }

    /// Barycentric coordinates of `x`, or `None` for a degenerate simplex.
    pub fn barycentric(&self, parent: &Polytope, x: &DVector<f64>) -> Option<DVector<f64>> {
        let n = parent.dim();
        let m = DMatrix::from_fn(n + 1, n + 1, |r, c| {
            if r < n {
                parent.vertices[self.vertex_indices[c]][r]
            } else {
                1.0
            }
        });
        let mut rhs = DVector::from_element(n + 1, 1.0);
        rhs.rows_mut(0, n).copy_from(x);
        m.lu().solve(&rhs)
    }

    pub fn contains(&self, parent: &Polytope, x: &DVector<f64>, tol: f64) -> bool {
        self.barycentric(parent, x)
            .map(|l| l.iter().all(|&w| w >= -tol))
            .unwrap_or(false)
    }
}

/// Kuhn (Freudenthal) triangulation of a box cell: one simplex per
/// permutation of the axes, all sharing the diagonal from vertex 0 to the
/// opposite corner. Permutations are visited in lexicographic order.
pub fn triangulate(cell: &Polytope) -> Result<Vec<Simplex>, GeometryError> {
    if cell.as_box().is_none() {
        return Err(GeometryError::UnsupportedGeometry(
            "triangulation is implemented for axis-aligned boxes only".into(),
        ));
    }
    let n = cell.dim();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    loop {
        let mut k = 0usize;
        let mut idx = Vec::with_capacity(n + 1);
        idx.push(k);
        for &d in &perm {
            k |= 1 << d;
            idx.push(k);
        }
        out.push(Simplex {
            vertex_indices: idx,
        });
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(out)
}

fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let Some(i) = (0..p.len() - 1).rev().find(|&i| p[i] < p[i + 1]) else {
        return false;
    };
    let j = (i + 1..p.len()).rev().find(|&j| p[j] > p[i]).unwrap();
    p.swap(i, j);
    p[i + 1..].reverse();
    true
}

/// Uniform grid of congruent box cells covering a box domain.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPartition {
    bounds: AxisBox,
    resolution: Vec<usize>,
    widths: Vec<f64>,
    cells: Vec<Polytope>,
    neighbors: Vec<Vec<(usize, usize)>>,
}

impl GridPartition {
    pub fn bounds(&self) -> &AxisBox {
        &self.bounds
    }

    pub fn resolution(&self) -> &[usize] {
        &self.resolution
    }

    pub fn cell_widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[Polytope] {
        &self.cells
    }

    pub fn cell(&self, id: usize) -> Result<&Polytope, GeometryError> {
        self.cells.get(id).ok_or(GeometryError::InvalidCell(id))
    }

    pub fn center(&self, id: usize) -> Result<DVector<f64>, GeometryError> {
        Ok(self
            .cell(id)?
            .as_box()
            .expect("grid cells are boxes")
            .center())
    }

    pub fn cell_id(&self, multi: &[usize]) -> Result<usize, GeometryError> {
        if multi.len() != self.dim() || multi.iter().zip(&self.resolution).any(|(i, r)| i >= r) {
            return Err(GeometryError::InvalidCell(usize::MAX));
        }
        let mut id = 0;
        let mut stride = 1;
        for (i, r) in multi.iter().zip(&self.resolution) {
            id += i * stride;
            stride *= r;
        }
        Ok(id)
    }

    pub fn multi_index(&self, id: usize) -> Result<Vec<usize>, GeometryError> {
        if id >= self.num_cells() {
            return Err(GeometryError::InvalidCell(id));
        }
        let mut rest = id;
        Ok(self
            .resolution
            .iter()
            .map(|r| {
                let i = rest % r;
                rest /= r;
                i
            })
            .collect())
    }

    /// Adjacent cells as `(facet of id, neighbor id)`, ordered by facet.
    pub fn neighbors(&self, id: usize) -> Result<&[(usize, usize)], GeometryError> {
        self.neighbors
            .get(id)
            .map(|v| v.as_slice())
            .ok_or(GeometryError::InvalidCell(id))
    }

    /// Facet of `cell_a` that coincides with a facet of `cell_b`, if any.
    pub fn common_facet(
        &self,
        cell_a: usize,
        cell_b: usize,
    ) -> Result<Option<usize>, GeometryError> {
        let a = self.cell(cell_a)?;
        let b = self.cell(cell_b)?;
        if cell_a == cell_b {
            return Ok(None);
        }
        Ok(shared_facet(a, b))
    }

    /// Cell containing `x`. Points on shared facets go to the cell with the
    /// larger index along each axis.
    pub fn locate(&self, x: &[f64]) -> Result<usize, GeometryError> {
        if !self.bounds.contains(x, FACET_TOL) {
            return Err(GeometryError::OutOfDomain { point: x.to_vec() });
        }
        let multi: Vec<usize> = (0..self.dim())
            .map(|d| {
                let t = (x[d] - self.bounds.lo[d]) / self.widths[d];
                let k = t.round();
                let on_grid_line =
                    (x[d] - (self.bounds.lo[d] + k * self.widths[d])).abs() <= FACET_TOL;
                let idx = if on_grid_line { k } else { t.floor() };
                (idx.max(0.0) as usize).min(self.resolution[d] - 1)
            })
            .collect();
        self.cell_id(&multi)
    }
}

fn shared_facet(a: &Polytope, b: &Polytope) -> Option<usize> {
    for (i, ha) in a.halfspaces.iter().enumerate() {
        for (k, hb) in b.halfspaces.iter().enumerate() {
            let antiparallel = (&ha.normal + &hb.normal).norm() <= FACET_TOL;
            if !antiparallel || (ha.offset + hb.offset).abs() > FACET_TOL {
                continue;
            }
            let pa = a.facet_vertices(i);
            let pb = b.facet_vertices(k);
            let same = pa.len() == pb.len()
                && pa.iter().all(|&j| {
                    pb.iter()
                        .any(|&q| (&a.vertices[j] - &b.vertices[q]).amax() <= FACET_TOL)
                });
            if same {
                return Some(i);
            }
        }
    }
    None
}

/// Partitions `bounds` into `resolution[d]` equal slabs per dimension.
pub fn build_grid_partition(
    bounds: &AxisBox,
    resolution: &[usize],
) -> Result<GridPartition, GeometryError> {
    if resolution.len() != bounds.dim() {
        return Err(GeometryError::InvalidDomain(format!(
            "resolution has {} entries for a {}-dimensional domain",
            resolution.len(),
            bounds.dim()
        )));
    }
    if let Some(d) = (0..bounds.dim()).find(|&d| bounds.lo[d] >= bounds.hi[d]) {
        return Err(GeometryError::InvalidDomain(format!(
            "low {} is not below high {} in dimension {d}",
            bounds.lo[d], bounds.hi[d]
        )));
    }
    if resolution.contains(&0) {
        return Err(GeometryError::InvalidDomain(
            "resolution must be positive".into(),
        ));
    }
    let widths: Vec<f64> = (0..bounds.dim())
        .map(|d| (bounds.hi[d] - bounds.lo[d]) / resolution[d] as f64)
        .collect();
    let total: usize = resolution.iter().product();
    let mut grid = GridPartition {
        bounds: bounds.clone(),
        resolution: resolution.to_vec(),
        widths,
        cells: Vec::with_capacity(total),
        neighbors: Vec::with_capacity(total),
    };
    for id in 0..total {
        let multi = grid.multi_index_unchecked(id);
        let lo: Vec<f64> = (0..grid.dim())
            .map(|d| bounds.lo[d] + multi[d] as f64 * grid.widths[d])
            .collect();
        // The last slab ends exactly on the domain bound.
        let hi: Vec<f64> = (0..grid.dim())
            .map(|d| {
                if multi[d] + 1 == resolution[d] {
                    bounds.hi[d]
                } else {
                    bounds.lo[d] + (multi[d] + 1) as f64 * grid.widths[d]
                }
            })
            .collect();
        grid.cells.push(Polytope::from_box(&AxisBox { lo, hi })?);
    }
    for id in 0..total {
        let multi = grid.multi_index_unchecked(id);
        let mut adj = Vec::new();
        for d in 0..grid.dim() {
            for (facet, step) in [(2 * d, -1i64), (2 * d + 1, 1)] {
                let k = multi[d] as i64 + step;
                if k < 0 || k >= resolution[d] as i64 {
                    continue;
                }
                let mut other = multi.clone();
                other[d] = k as usize;
                let nb = grid.cell_id(&other)?;
                debug_assert_eq!(shared_facet(&grid.cells[id], &grid.cells[nb]), Some(facet));
                adj.push((facet, nb));
            }
        }
        grid.neighbors.push(adj);
    }
    Ok(grid)
}

impl GridPartition {
    fn multi_index_unchecked(&self, id: usize) -> Vec<usize> {
        let mut rest = id;
        self.resolution
            .iter()
            .map(|r| {
                let i = rest % r;
                rest /= r;
                i
            })
            .collect()
    }
}
