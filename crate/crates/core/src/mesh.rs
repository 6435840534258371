//! Structured triangulations of axis-aligned rectangles.
//!
//! Every cell of an `nx × ny` grid is split along its lower-left to
//! upper-right diagonal. Vertices are numbered row-major, triangles cell by
//! cell (lower triangle first), and edges in first-seen order while walking
//! the triangles. Both the fine computational mesh and the coarse observation
//! mesh are instances of [`StructuredTriMesh`].

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type Point = [f64; 2];

/// Tolerance used for boundary detection and point location.
pub const GEOM_TOL: f64 = 1e-12;

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub const UNIT: Rect = Rect { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 };

    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Rect { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, p: Point, tol: f64) -> bool {
        p[0] >= self.x0 - tol && p[0] <= self.x1 + tol && p[1] >= self.y0 - tol && p[1] <= self.y1 + tol
    }

    pub fn on_boundary(&self, p: Point, tol: f64) -> bool {
        (p[0] - self.x0).abs() <= tol
            || (p[0] - self.x1).abs() <= tol
            || (p[1] - self.y0).abs() <= tol
            || (p[1] - self.y1).abs() <= tol
    }

    /// Same rectangle up to an absolute tolerance on every bound.
    pub fn approx_eq(&self, other: &Rect, tol: f64) -> bool {
        (self.x0 - other.x0).abs() <= tol
            && (self.y0 - other.y0).abs() <= tol
            && (self.x1 - other.x1).abs() <= tol
            && (self.y1 - other.y1).abs() <= tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuredTriMesh {
    pub nx: usize,
    pub ny: usize,
    pub domain: Rect,
    pub vertices: Vec<Point>,
    /// Counterclockwise vertex triples.
    pub triangles: Vec<[usize; 3]>,
    /// Unique edges with sorted endpoints.
    pub edges: Vec<[usize; 2]>,
    /// For each triangle, the edge opposite local vertex `k`.
    pub triangle_edges: Vec<[usize; 3]>,
    pub boundary_vertex_flags: Vec<bool>,
    pub boundary_edge_flags: Vec<bool>,
}

/// Triangle index plus barycentric coordinates of a located point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Location {
    pub triangle: usize,
    pub bary: [f64; 3],
}

impl StructuredTriMesh {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn dx(&self) -> f64 {
        self.domain.width() / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        self.domain.height() / self.ny as f64
    }

    /// Mesh size used for the observation resolution: the largest cell
    /// side, `max(Δx, Δy)`.
    pub fn spacing(&self) -> f64 {
        self.dx().max(self.dy())
    }

    /// Largest triangle diameter (the cell diagonal).
    pub fn max_diameter(&self) -> f64 {
        self.dx().hypot(self.dy())
    }

    pub fn triangle_points(&self, t: usize) -> [Point; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_points(t);
        0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
    }

    pub fn edge_midpoint(&self, e: usize) -> Point {
        let [a, b] = self.edges[e];
        let (pa, pb) = (self.vertices[a], self.vertices[b]);
        [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]
    }

    /// Finds a triangle containing `p` and the barycentric coordinates of
    /// `p` in it. Cell lookup is O(1) thanks to the structured layout.
    pub fn locate_point(&self, p: Point) -> Result<Location> {
        if !p[0].is_finite() || !p[1].is_finite() || !self.domain.contains(p, GEOM_TOL) {
            return Err(Error::OutOfDomain { x: p[0], y: p[1] });
        }
        let (dx, dy) = (self.dx(), self.dy());
        let fx = (p[0] - self.domain.x0) / dx;
        let fy = (p[1] - self.domain.y0) / dy;
        let i = (fx.floor().max(0.0) as usize).min(self.nx - 1);
        let j = (fy.floor().max(0.0) as usize).min(self.ny - 1);
        let s = (fx - i as f64).clamp(0.0, 1.0);
        let t = (fy - j as f64).clamp(0.0, 1.0);
        let cell = j * self.nx + i;
        // lower triangle (v00, v10, v11) holds t <= s
        if t <= s {
            Ok(Location { triangle: 2 * cell, bary: [1.0 - s, s - t, t] })
        } else {
            Ok(Location { triangle: 2 * cell + 1, bary: [1.0 - t, s, t - s] })
        }
    }

    /// Cartesian point from barycentric coordinates on triangle `t`.
    pub fn reconstruct(&self, t: usize, bary: [f64; 3]) -> Point {
        let pts = self.triangle_points(t);
        let mut out = [0.0; 2];
        for k in 0..3 {
            out[0] += bary[k] * pts[k][0];
            out[1] += bary[k] * pts[k][1];
        }
        out
    }

    /// Writes the mesh as a legacy ASCII VTK unstructured grid.
    pub fn write_vtk<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "# vtk DataFile Version 3.0")?;
        writeln!(out, "structured triangle mesh {}x{}", self.nx, self.ny)?;
        writeln!(out, "ASCII")?;
        writeln!(out, "DATASET UNSTRUCTURED_GRID")?;
        writeln!(out, "POINTS {} double", self.vertex_count())?;
        for v in &self.vertices {
            writeln!(out, "{:e} {:e} 0", v[0], v[1])?;
        }
        let nt = self.triangle_count();
        writeln!(out, "CELLS {} {}", nt, 4 * nt)?;
        for t in &self.triangles {
            writeln!(out, "3 {} {} {}", t[0], t[1], t[2])?;
        }
        writeln!(out, "CELL_TYPES {nt}")?;
        for _ in 0..nt {
            writeln!(out, "5")?;
        }
        Ok(())
    }
}

/// Builds the structured triangulation of `domain` with `nx × ny` cells.
pub fn build_rect_mesh(nx: usize, ny: usize, domain: Rect) -> Result<StructuredTriMesh> {
    if nx == 0 || ny == 0 {
        return Err(invalid(format!("cell counts must be positive, got {nx}x{ny}")));
    }
    if !(domain.x1 > domain.x0 && domain.y1 > domain.y0) || !domain.area().is_finite() {
        return Err(invalid(format!("degenerate rectangle {domain:?}")));
    }

    let dx = domain.width() / nx as f64;
    let dy = domain.height() / ny as f64;
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        // snap the last row/column onto the exact bounds
        let y = if j == ny { domain.y1 } else { domain.y0 + j as f64 * dy };
        for i in 0..=nx {
            let x = if i == nx { domain.x1 } else { domain.x0 + i as f64 * dx };
            vertices.push([x, y]);
        }
    }

    let vid = |i: usize, j: usize| j * (nx + 1) + i;
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (v00, v10, v11, v01) = (vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1));
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }

    let mut edge_index: HashMap<[usize; 2], usize> = HashMap::with_capacity(3 * nx * ny + nx + ny);
    let mut edges = Vec::with_capacity(3 * nx * ny + nx + ny);
    let mut triangle_edges = Vec::with_capacity(triangles.len());
    for tri in &triangles {
        let mut te = [0usize; 3];
        for (k, slot) in te.iter_mut().enumerate() {
            let a = tri[(k + 1) % 3];
            let b = tri[(k + 2) % 3];
            let key = if a < b { [a, b] } else { [b, a] };
            *slot = *edge_index.entry(key).or_insert_with(|| {
                edges.push(key);
                edges.len() - 1
            });
        }
        triangle_edges.push(te);
    }

    let boundary_vertex_flags: Vec<bool> =
        vertices.iter().map(|&p| domain.on_boundary(p, GEOM_TOL)).collect();
    let boundary_edge_flags = edges
        .iter()
        .map(|&[a, b]| {
            let (pa, pb) = (vertices[a], vertices[b]);
            let mid = [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])];
            domain.on_boundary(mid, GEOM_TOL)
        })
        .collect();

    Ok(StructuredTriMesh {
        nx,
        ny,
        domain,
        vertices,
        triangles,
        edges,
        triangle_edges,
        boundary_vertex_flags,
        boundary_edge_flags,
    })
}

/// Convenience constructor for the unit square with `n × n` cells.
pub fn unit_square(n: usize) -> Result<StructuredTriMesh> {
    build_rect_mesh(n, n, Rect::UNIT)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_mesh_counts() {
        let m = unit_square(1).unwrap();
        assert_eq!(m.vertex_count(), 4);
        assert_eq!(m.triangle_count(), 2);
        assert_eq!(m.edge_count(), 5);
    }

    #[test]
    fn two_by_two_counts_and_boundary() {
        let m = unit_square(2).unwrap();
        assert_eq!(m.vertex_count(), 9);
        assert_eq!(m.triangle_count(), 8);
        assert_eq!(m.edge_count(), 16);
        let nb = m.boundary_vertex_flags.iter().filter(|&&b| b).count();
        assert_eq!(nb, 8);
        assert!(!m.boundary_vertex_flags[4]);
    }

    #[test]
    fn diagonal_of_single_cell_is_interior() {
        let m = unit_square(1).unwrap();
        let interior: Vec<_> = (0..m.edge_count()).filter(|&e| !m.boundary_edge_flags[e]).collect();
        assert_eq!(interior.len(), 1);
        assert_eq!(m.edges[interior[0]], [0, 3]);
    }

    #[test]
    fn euler_and_areas() {
        for &(nx, ny) in &[(1, 1), (3, 2), (7, 5), (16, 16)] {
            let dom = Rect::new(-1.0, 0.5, 2.0, 1.75);
            let m = build_rect_mesh(nx, ny, dom).unwrap();
            let (v, e, f) = (m.vertex_count() as i64, m.edge_count() as i64, m.triangle_count() as i64);
            assert_eq!(v - e + f, 1);
            assert_eq!(v as usize, (nx + 1) * (ny + 1));
            assert_eq!(f as usize, 2 * nx * ny);
            let mut total = 0.0;
            for t in 0..m.triangle_count() {
                let a = m.signed_area(t);
                assert!(a > 0.0);
                total += a;
            }
            assert!((total - dom.area()).abs() <= 1e-12 * dom.area());
        }
    }

    #[test]
    fn centroid_of_first_triangle() {
        let m = unit_square(4).unwrap();
        let pts = m.triangle_points(0);
        let c = [(pts[0][0] + pts[1][0] + pts[2][0]) / 3.0, (pts[0][1] + pts[1][1] + pts[2][1]) / 3.0];
        let loc = m.locate_point(c).unwrap();
        assert_eq!(loc.triangle, 0);
        for b in loc.bary {
            assert!((b - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vertex_location_has_unit_coordinate() {
        let m = unit_square(3).unwrap();
        for (vi, &p) in m.vertices.iter().enumerate() {
            let loc = m.locate_point(p).unwrap();
            let k = m.triangles[loc.triangle].iter().position(|&v| v == vi).expect("vertex in triangle");
            assert!((loc.bary[k] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn outside_point_is_rejected() {
        let m = unit_square(2).unwrap();
        assert!(matches!(m.locate_point([2.0, 2.0]), Err(Error::OutOfDomain { .. })));
        assert!(m.locate_point([1.0 + 1e-13, 0.5]).is_ok());
    }

    #[test]
    fn invalid_arguments() {
        assert!(build_rect_mesh(0, 2, Rect::UNIT).is_err());
        assert!(build_rect_mesh(2, 2, Rect::new(0.0, 0.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn spacing_and_diameter() {
        let m = build_rect_mesh(4, 2, Rect::UNIT).unwrap();
        assert_eq!(m.spacing(), 0.5);
        assert!((m.max_diameter() - (0.25f64.hypot(0.5))).abs() < 1e-15);
    }

    #[test]
    fn vtk_dump_has_sections() {
        let m = unit_square(1).unwrap();
        let mut buf = Vec::new();
        m.write_vtk(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.contains("POINTS 4 double"));
        assert!(s.contains("CELLS 2 8"));
        assert!(s.contains("CELL_TYPES 2"));
    }
}
