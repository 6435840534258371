//! Taylor-Hood (P2 velocity / P1 pressure) spaces over a structured mesh.
//!
//! Scalar P2 nodes are numbered vertices first, then edge midpoints in the
//! mesh edge order. Velocity coefficients are blocked by component: all
//! x-components, then all y-components. Pressure coefficients are the P1
//! vertex values.

use std::io::Write;
use std::sync::Arc;

use crate::error::{invalid, Result};
use crate::mesh::{Point, StructuredTriMesh};

/// Per-triangle affine data: area and the constant barycentric gradients.
#[derive(Debug, Clone, Copy)]
pub struct ElementGeometry {
    pub area: f64,
    pub grad_lambda: [[f64; 2]; 3],
    pub vertices: [Point; 3],
}

impl ElementGeometry {
    pub fn new(vertices: [Point; 3]) -> Self {
        let [a, b, c] = vertices;
        let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
        let mut grad_lambda = [[0.0; 2]; 3];
        for i in 0..3 {
            let p1 = vertices[(i + 1) % 3];
            let p2 = vertices[(i + 2) % 3];
            grad_lambda[i] = [(p1[1] - p2[1]) / det, (p2[0] - p1[0]) / det];
        }
        ElementGeometry { area: 0.5 * det, grad_lambda, vertices }
    }

    pub fn point(&self, bary: &[f64; 3]) -> Point {
        let mut p = [0.0; 2];
        for k in 0..3 {
            p[0] += bary[k] * self.vertices[k][0];
            p[1] += bary[k] * self.vertices[k][1];
        }
        p
    }

    /// P2 gradients at a barycentric point.
    pub fn p2_gradients(&self, l: &[f64; 3]) -> [[f64; 2]; 6] {
        let g = &self.grad_lambda;
        let mut out = [[0.0; 2]; 6];
        for i in 0..3 {
            let s = 4.0 * l[i] - 1.0;
            out[i] = [s * g[i][0], s * g[i][1]];
        }
        for k in 0..3 {
            let (a, b) = ((k + 1) % 3, (k + 2) % 3);
            out[3 + k] = [
                4.0 * (l[a] * g[b][0] + l[b] * g[a][0]),
                4.0 * (l[a] * g[b][1] + l[b] * g[a][1]),
            ];
        }
        out
    }
}

/// P2 basis values at barycentric `l`; local nodes are the three vertices
/// followed by the midpoints of the edges opposite vertex 0, 1, 2.
pub fn p2_values(l: &[f64; 3]) -> [f64; 6] {
    [
        l[0] * (2.0 * l[0] - 1.0),
        l[1] * (2.0 * l[1] - 1.0),
        l[2] * (2.0 * l[2] - 1.0),
        4.0 * l[1] * l[2],
        4.0 * l[2] * l[0],
        4.0 * l[0] * l[1],
    ]
}

#[derive(Debug, Clone)]
pub struct TaylorHoodSpace {
    pub mesh: Arc<StructuredTriMesh>,
    /// Scalar P2 node indices per triangle.
    pub element_nodes: Vec<[usize; 6]>,
    /// Global velocity DOFs (both components) lying on the boundary, sorted.
    pub boundary_velocity_dofs: Vec<usize>,
    boundary_node_flags: Vec<bool>,
}

impl TaylorHoodSpace {
    /// Number of scalar P2 nodes, `V + E`.
    pub fn p2_node_count(&self) -> usize {
        self.mesh.vertex_count() + self.mesh.edge_count()
    }

    pub fn velocity_dof_count(&self) -> usize {
        2 * self.p2_node_count()
    }

    pub fn pressure_dof_count(&self) -> usize {
        self.mesh.vertex_count()
    }

    pub fn velocity_dof(&self, node: usize, component: usize) -> usize {
        component * self.p2_node_count() + node
    }

    /// Global velocity DOF for `(triangle, local node, component)`.
    pub fn element_velocity_dof(&self, t: usize, local: usize, component: usize) -> usize {
        self.velocity_dof(self.element_nodes[t][local], component)
    }

    pub fn node_point(&self, node: usize) -> Point {
        let nv = self.mesh.vertex_count();
        if node < nv {
            self.mesh.vertices[node]
        } else {
            self.mesh.edge_midpoint(node - nv)
        }
    }

    pub fn is_boundary_node(&self, node: usize) -> bool {
        self.boundary_node_flags[node]
    }

    /// Boolean mask over velocity DOFs.
    pub fn boundary_velocity_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.velocity_dof_count()];
        for &d in &self.boundary_velocity_dofs {
            mask[d] = true;
        }
        mask
    }

    pub fn geometry(&self, t: usize) -> ElementGeometry {
        ElementGeometry::new(self.mesh.triangle_points(t))
    }

    /// Velocity coefficient vector holding the nodal values of `f`.
    pub fn interpolate_velocity<F: Fn(Point) -> [f64; 2]>(&self, f: F) -> Vec<f64> {
        let n = self.p2_node_count();
        let mut out = vec![0.0; 2 * n];
        for node in 0..n {
            let v = f(self.node_point(node));
            out[node] = v[0];
            out[n + node] = v[1];
        }
        out
    }

    pub fn interpolate_pressure<F: Fn(Point) -> f64>(&self, f: F) -> Vec<f64> {
        self.mesh.vertices.iter().map(|&p| f(p)).collect()
    }
}

/// Builds the Taylor-Hood space on `mesh`.
pub fn build_taylor_hood(mesh: Arc<StructuredTriMesh>) -> Arc<TaylorHoodSpace> {
    let nv = mesh.vertex_count();
    let element_nodes = mesh
        .triangles
        .iter()
        .zip(&mesh.triangle_edges)
        .map(|(t, e)| [t[0], t[1], t[2], nv + e[0], nv + e[1], nv + e[2]])
        .collect();
    let boundary_node_flags: Vec<bool> = mesh
        .boundary_vertex_flags
        .iter()
        .chain(mesh.boundary_edge_flags.iter())
        .copied()
        .collect();
    let n2 = boundary_node_flags.len();
    let mut boundary_velocity_dofs = Vec::new();
    for c in 0..2 {
        for (node, &b) in boundary_node_flags.iter().enumerate() {
            if b {
                boundary_velocity_dofs.push(c * n2 + node);
            }
        }
    }
    Arc::new(TaylorHoodSpace { mesh, element_nodes, boundary_velocity_dofs, boundary_node_flags })
}

/// Velocity/pressure coefficient pair on a [`TaylorHoodSpace`].
#[derive(Debug, Clone)]
pub struct VelocityPressureField {
    pub space: Arc<TaylorHoodSpace>,
    pub velocity: Vec<f64>,
    pub pressure: Vec<f64>,
}

impl VelocityPressureField {
    pub fn zeros(space: &Arc<TaylorHoodSpace>) -> Self {
        VelocityPressureField {
            velocity: vec![0.0; space.velocity_dof_count()],
            pressure: vec![0.0; space.pressure_dof_count()],
            space: Arc::clone(space),
        }
    }

    pub fn from_parts(space: &Arc<TaylorHoodSpace>, velocity: Vec<f64>, pressure: Vec<f64>) -> Result<Self> {
        if velocity.len() != space.velocity_dof_count() || pressure.len() != space.pressure_dof_count() {
            return Err(invalid(format!(
                "coefficient lengths ({}, {}) do not match space ({}, {})",
                velocity.len(),
                pressure.len(),
                space.velocity_dof_count(),
                space.pressure_dof_count()
            )));
        }
        Ok(VelocityPressureField { space: Arc::clone(space), velocity, pressure })
    }

    /// True when both fields live on the same space instance or on spaces
    /// with identical layout.
    pub fn same_space(&self, other: &Arc<TaylorHoodSpace>) -> bool {
        Arc::ptr_eq(&self.space, other)
            || (self.space.mesh.nx == other.mesh.nx
                && self.space.mesh.ny == other.mesh.ny
                && self.space.mesh.domain == other.mesh.domain)
    }

    pub fn ensure_space(&self, other: &Arc<TaylorHoodSpace>) -> Result<()> {
        if self.same_space(other) {
            Ok(())
        } else {
            Err(invalid("field lives on a different space"))
        }
    }

    /// Velocity and pressure at `p`.
    pub fn evaluate(&self, p: Point) -> Result<([f64; 2], f64)> {
        let loc = self.space.mesh.locate_point(p)?;
        Ok(self.evaluate_in(loc.triangle, &loc.bary))
    }

    /// Evaluation on a known triangle at barycentric coordinates.
    pub fn evaluate_in(&self, t: usize, bary: &[f64; 3]) -> ([f64; 2], f64) {
        let phi = p2_values(bary);
        let nodes = &self.space.element_nodes[t];
        let n2 = self.space.p2_node_count();
        let mut u = [0.0; 2];
        for k in 0..6 {
            u[0] += phi[k] * self.velocity[nodes[k]];
            u[1] += phi[k] * self.velocity[n2 + nodes[k]];
        }
        let tri = &self.space.mesh.triangles[t];
        let p = (0..3).map(|k| bary[k] * self.pressure[tri[k]]).sum();
        (u, p)
    }

    /// Velocity gradient `[[∂x u1, ∂y u1], [∂x u2, ∂y u2]]` on triangle `t`.
    pub fn velocity_gradient_in(&self, t: usize, geom: &ElementGeometry, bary: &[f64; 3]) -> [[f64; 2]; 2] {
        let grads = geom.p2_gradients(bary);
        velocity_gradient(&self.velocity, &self.space, t, &grads)
    }

    /// Writes vertex values of velocity and pressure as legacy ASCII VTK.
    pub fn write_vtk<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let mesh = &self.space.mesh;
        mesh.write_vtk(out)?;
        let nv = mesh.vertex_count();
        let n2 = self.space.p2_node_count();
        writeln!(out, "POINT_DATA {nv}")?;
        writeln!(out, "VECTORS velocity double")?;
        for v in 0..nv {
            writeln!(out, "{:e} {:e} 0", self.velocity[v], self.velocity[n2 + v])?;
        }
        writeln!(out, "SCALARS pressure double 1")?;
        writeln!(out, "LOOKUP_TABLE default")?;
        for v in 0..nv {
            writeln!(out, "{:e}", self.pressure[v])?;
        }
        Ok(())
    }
}

/// Nodal interpolation of analytic velocity and pressure functions.
pub fn interpolate_function<U, P>(space: &Arc<TaylorHoodSpace>, velocity: U, pressure: P) -> VelocityPressureField
where
    U: Fn(Point) -> [f64; 2],
    P: Fn(Point) -> f64,
{
    VelocityPressureField {
        velocity: space.interpolate_velocity(velocity),
        pressure: space.interpolate_pressure(pressure),
        space: Arc::clone(space),
    }
}

/// Gradient of a velocity coefficient vector on triangle `t` given the
/// local P2 gradients.
pub(crate) fn velocity_gradient(
    coeffs: &[f64],
    space: &TaylorHoodSpace,
    t: usize,
    grads: &[[f64; 2]; 6],
) -> [[f64; 2]; 2] {
    let nodes = &space.element_nodes[t];
    let n2 = space.p2_node_count();
    let mut g = [[0.0; 2]; 2];
    for k in 0..6 {
        let (ux, uy) = (coeffs[nodes[k]], coeffs[n2 + nodes[k]]);
        g[0][0] += ux * grads[k][0];
        g[0][1] += ux * grads[k][1];
        g[1][0] += uy * grads[k][0];
        g[1][1] += uy * grads[k][1];
    }
    g
}

/// Velocity value of a coefficient vector on triangle `t` given local P2
/// basis values.
pub(crate) fn velocity_value(coeffs: &[f64], space: &TaylorHoodSpace, t: usize, phi: &[f64; 6]) -> [f64; 2] {
    let nodes = &space.element_nodes[t];
    let n2 = space.p2_node_count();
    let mut u = [0.0; 2];
    for k in 0..6 {
        u[0] += phi[k] * coeffs[nodes[k]];
        u[1] += phi[k] * coeffs[n2 + nodes[k]];
    }
    u
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_rect_mesh, unit_square, Rect};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn space(n: usize) -> Arc<TaylorHoodSpace> {
        build_taylor_hood(Arc::new(unit_square(n).unwrap()))
    }

    #[test]
    fn dof_counts() {
        let s = space(1);
        assert_eq!(s.velocity_dof_count(), 18);
        assert_eq!(s.pressure_dof_count(), 4);
        assert_eq!(s.boundary_velocity_dofs.len(), 16);
        let s = space(2);
        assert_eq!(s.velocity_dof_count(), 50);
        assert_eq!(s.pressure_dof_count(), 9);
    }

    #[test]
    fn boundary_dofs_lie_on_boundary() {
        let s = space(5);
        let n2 = s.p2_node_count();
        for &d in &s.boundary_velocity_dofs {
            let p = s.node_point(d % n2);
            assert!(s.mesh.domain.on_boundary(p, 1e-12));
        }
        // 5x5 mesh: 4*5 boundary cells, each side contributes vertices and midpoints
        assert_eq!(s.boundary_velocity_dofs.len(), 2 * (4 * 5 * 2));
    }

    #[test]
    fn element_maps_are_injective_and_cover() {
        let s = space(4);
        let mut seen = vec![false; s.p2_node_count()];
        for nodes in &s.element_nodes {
            let mut sorted = nodes.to_vec();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 6);
            for &n in nodes {
                seen[n] = true;
            }
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn basis_partition_of_unity_and_nodality() {
        let g = ElementGeometry::new([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let node_bary = [
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.5, 0.5],
            [0.5, 0.0, 0.5],
            [0.5, 0.5, 0.0],
        ];
        for (i, b) in node_bary.iter().enumerate() {
            let v = p2_values(b);
            for (j, &vj) in v.iter().enumerate() {
                assert!((vj - if i == j { 1.0 } else { 0.0 }).abs() < 1e-15);
            }
        }
        let l = [0.2, 0.3, 0.5];
        assert!((p2_values(&l).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let gs = g.p2_gradients(&l);
        let sx: f64 = gs.iter().map(|v| v[0]).sum();
        let sy: f64 = gs.iter().map(|v| v[1]).sum();
        assert!(sx.abs() < 1e-14 && sy.abs() < 1e-14);
    }

    #[test]
    fn constant_and_linear_interpolation() {
        let s = space(3);
        let n2 = s.p2_node_count();
        let f = interpolate_function(&s, |_| [1.0, 0.0], |_| 0.0);
        assert!(f.velocity[..n2].iter().all(|&v| v == 1.0));
        assert!(f.velocity[n2..].iter().all(|&v| v == 0.0));
        let f = interpolate_function(&s, |p| [p[0], p[1]], |_| 0.0);
        for node in 0..n2 {
            let p = s.node_point(node);
            assert_eq!(f.velocity[node], p[0]);
            assert_eq!(f.velocity[n2 + node], p[1]);
        }
    }

    #[test]
    fn quadratics_reproduced_exactly() {
        let mesh = Arc::new(build_rect_mesh(5, 3, Rect::new(-0.5, 0.0, 1.5, 1.0)).unwrap());
        let s = build_taylor_hood(mesh);
        let u = |p: Point| [p[0] * p[0] - 2.0 * p[0] * p[1] + 3.0, 0.5 * p[1] * p[1] + p[0]];
        let pr = |p: Point| 2.0 * p[0] - p[1] + 0.25;
        let f = interpolate_function(&s, u, pr);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let p = [rng.random_range(-0.5..1.5), rng.random_range(0.0..1.0)];
            let (v, q) = f.evaluate(p).unwrap();
            let e = u(p);
            assert!((v[0] - e[0]).abs() < 1e-11 && (v[1] - e[1]).abs() < 1e-11);
            assert!((q - pr(p)).abs() < 1e-11);
        }
    }

    #[test]
    fn evaluation_at_nodes_is_identity() {
        let s = space(3);
        let f = interpolate_function(&s, |p| [p[0].sin(), (p[0] * p[1]).exp()], |p| p[1].cos());
        for node in 0..s.p2_node_count() {
            let p = s.node_point(node);
            let (v, _) = f.evaluate(p).unwrap();
            assert!((v[0] - p[0].sin()).abs() < 1e-14);
            assert!((v[1] - (p[0] * p[1]).exp()).abs() < 1e-14);
        }
        for (vi, &p) in s.mesh.vertices.iter().enumerate() {
            let (_, q) = f.evaluate(p).unwrap();
            assert!((q - f.pressure[vi]).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_field_evaluates_to_zero() {
        let s = space(2);
        let f = VelocityPressureField::zeros(&s);
        assert_eq!(f.evaluate([0.3, 0.9]).unwrap(), ([0.0, 0.0], 0.0));
        assert!(f.evaluate([1.5, 0.0]).is_err());
    }

    #[test]
    fn from_parts_checks_lengths() {
        let s = space(1);
        assert!(VelocityPressureField::from_parts(&s, vec![0.0; 17], vec![0.0; 4]).is_err());
        assert!(VelocityPressureField::from_parts(&s, vec![0.0; 18], vec![0.0; 4]).is_ok());
    }
}
