//! Element integrals and global assembly of the bilinear and trilinear
//! forms of the mixed velocity-pressure formulation.
//!
//! Velocity matrices act on the blocked velocity layout of
//! [`TaylorHoodSpace`]; the viscous, mass and convection operators are
//! block diagonal over the two components.

use crate::error::{invalid, Result};
use crate::mesh::{Point, StructuredTriMesh};
use crate::quadrature::QuadratureRule;
use crate::sparse::{SparseMatrix, TripletBuilder};
use crate::spaces::{p2_values, velocity_value, ElementGeometry, TaylorHoodSpace, VelocityPressureField};

pub type Local6 = [[f64; 6]; 6];

/// Scalar P2 stiffness `∫ ∇φj·∇φi` on one triangle.
pub fn local_p2_stiffness(geom: &ElementGeometry, rule: &QuadratureRule) -> Local6 {
    let mut k = [[0.0; 6]; 6];
    for (l, w) in rule.iter() {
        let g = geom.p2_gradients(l);
        let s = 2.0 * geom.area * w;
        for i in 0..6 {
            for j in 0..6 {
                k[i][j] += s * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
            }
        }
    }
    k
}

/// Scalar P2 mass `∫ φj φi` on one triangle.
pub fn local_p2_mass(geom: &ElementGeometry, rule: &QuadratureRule) -> Local6 {
    let mut m = [[0.0; 6]; 6];
    for (l, w) in rule.iter() {
        let phi = p2_values(l);
        let s = 2.0 * geom.area * w;
        for i in 0..6 {
            for j in 0..6 {
                m[i][j] += s * phi[i] * phi[j];
            }
        }
    }
    m
}

/// P1 mass `∫ λj λi` on one triangle.
pub fn local_p1_mass(geom: &ElementGeometry, rule: &QuadratureRule) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for (l, w) in rule.iter() {
        let s = 2.0 * geom.area * w;
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += s * l[i] * l[j];
            }
        }
    }
    m
}

/// Convection `∫ (w·∇φj) φi` with the advecting velocity given at the
/// quadrature points. With `skew` set, returns `½(c_ij − c_ji)`.
pub fn local_p2_convection(
    geom: &ElementGeometry,
    rule: &QuadratureRule,
    wind: impl Fn(usize) -> [f64; 2],
    skew: bool,
) -> Local6 {
    let mut c = [[0.0; 6]; 6];
    for (q, (l, w)) in rule.iter().enumerate() {
        let phi = p2_values(l);
        let g = geom.p2_gradients(l);
        let a = wind(q);
        let s = 2.0 * geom.area * w;
        let adv: [f64; 6] = std::array::from_fn(|j| a[0] * g[j][0] + a[1] * g[j][1]);
        for i in 0..6 {
            for j in 0..6 {
                c[i][j] += s * phi[i] * adv[j];
            }
        }
    }
    if skew {
        let mut out = [[0.0; 6]; 6];
        for i in 0..6 {
            for j in 0..6 {
                out[i][j] = 0.5 * (c[i][j] - c[j][i]);
            }
        }
        out
    } else {
        c
    }
}

/// Divergence pairing `∫ λq ∂_c φi`, indexed `[q][c][i]`.
pub fn local_divergence(geom: &ElementGeometry, rule: &QuadratureRule) -> [[[f64; 6]; 2]; 3] {
    let mut b = [[[0.0; 6]; 2]; 3];
    for (l, w) in rule.iter() {
        let g = geom.p2_gradients(l);
        let s = 2.0 * geom.area * w;
        for q in 0..3 {
            for c in 0..2 {
                for i in 0..6 {
                    b[q][c][i] += s * l[q] * g[i][c];
                }
            }
        }
    }
    b
}

fn scatter_velocity_block(b: &mut TripletBuilder, space: &TaylorHoodSpace, t: usize, local: &Local6, scale: f64) {
    let nodes = &space.element_nodes[t];
    let n2 = space.p2_node_count();
    for c in 0..2 {
        let off = c * n2;
        for i in 0..6 {
            for j in 0..6 {
                b.push(off + nodes[i], off + nodes[j], scale * local[i][j]);
            }
        }
    }
}

/// Vector viscous matrix `ν(∇u, ∇v)`.
pub fn assemble_stiffness(space: &TaylorHoodSpace, nu: f64, rule: &QuadratureRule) -> SparseMatrix {
    let n = space.velocity_dof_count();
    let mut b = TripletBuilder::with_capacity(n, n, 72 * space.mesh.triangle_count());
    for t in 0..space.mesh.triangle_count() {
        let k = local_p2_stiffness(&space.geometry(t), rule);
        scatter_velocity_block(&mut b, space, t, &k, nu);
    }
    b.finalize()
}

/// Vector velocity mass matrix `(u, v)`.
pub fn assemble_velocity_mass(space: &TaylorHoodSpace, rule: &QuadratureRule) -> SparseMatrix {
    let n = space.velocity_dof_count();
    let mut b = TripletBuilder::with_capacity(n, n, 72 * space.mesh.triangle_count());
    for t in 0..space.mesh.triangle_count() {
        let m = local_p2_mass(&space.geometry(t), rule);
        scatter_velocity_block(&mut b, space, t, &m, 1.0);
    }
    b.finalize()
}

/// Scalar P1 mass matrix on the vertices of `mesh`.
pub fn assemble_p1_mass(mesh: &StructuredTriMesh, rule: &QuadratureRule) -> SparseMatrix {
    let nv = mesh.vertex_count();
    let mut b = TripletBuilder::with_capacity(nv, nv, 9 * mesh.triangle_count());
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let m = local_p1_mass(&ElementGeometry::new(mesh.triangle_points(t)), rule);
        for i in 0..3 {
            for j in 0..3 {
                b.push(tri[i], tri[j], m[i][j]);
            }
        }
    }
    b.finalize()
}

/// Two-component P1 mass matrix (x block then y block).
pub fn assemble_p1_vector_mass(mesh: &StructuredTriMesh, rule: &QuadratureRule) -> SparseMatrix {
    let scalar = assemble_p1_mass(mesh, rule);
    block_diagonal2(&scalar)
}

/// `diag(A, A)`.
pub fn block_diagonal2(a: &SparseMatrix) -> SparseMatrix {
    let mut b = TripletBuilder::with_capacity(2 * a.nrows, 2 * a.ncols, 2 * a.nnz());
    for c in 0..2 {
        for (r, col, v) in a.triplets() {
            b.push(c * a.nrows + r, c * a.ncols + col, v);
        }
    }
    b.finalize()
}

/// Divergence matrix `B[q, v] = ∫ q ∇·v`, one row per pressure DOF.
pub fn assemble_divergence(space: &TaylorHoodSpace, rule: &QuadratureRule) -> SparseMatrix {
    let (np, nu) = (space.pressure_dof_count(), space.velocity_dof_count());
    let mut b = TripletBuilder::with_capacity(np, nu, 36 * space.mesh.triangle_count());
    for t in 0..space.mesh.triangle_count() {
        let loc = local_divergence(&space.geometry(t), rule);
        let tri = space.mesh.triangles[t];
        for q in 0..3 {
            for c in 0..2 {
                for i in 0..6 {
                    b.push(tri[q], space.element_velocity_dof(t, i, c), loc[q][c][i]);
                }
            }
        }
    }
    b.finalize()
}

/// Integrals of the pressure basis functions, `∫ ψq`.
pub fn pressure_mean_weights(space: &TaylorHoodSpace) -> Vec<f64> {
    let mut m = vec![0.0; space.pressure_dof_count()];
    for (t, tri) in space.mesh.triangles.iter().enumerate() {
        let a = space.mesh.signed_area(t);
        for &v in tri {
            m[v] += a / 3.0;
        }
    }
    m
}

/// Advecting velocity of `w` at every quadrature point of triangle `t`.
pub(crate) fn wind_at_points(
    coeffs: &[f64],
    space: &TaylorHoodSpace,
    t: usize,
    rule: &QuadratureRule,
) -> Vec<[f64; 2]> {
    rule.points.iter().map(|l| velocity_value(coeffs, space, t, &p2_values(l))).collect()
}

/// Linearized convection `C(w)` with `(C(w) u)·v = b(w, u, v)`, or its
/// skew-symmetrized form `½[b(w,u,v) − b(w,v,u)]` when `skew` is set.
pub fn assemble_convection(
    space: &std::sync::Arc<TaylorHoodSpace>,
    w: &VelocityPressureField,
    skew: bool,
    rule: &QuadratureRule,
) -> Result<SparseMatrix> {
    if !w.same_space(space) {
        return Err(invalid("convecting field lives on a different space"));
    }
    Ok(assemble_convection_coeffs(space, &w.velocity, skew, rule))
}

pub(crate) fn assemble_convection_coeffs(
    space: &TaylorHoodSpace,
    w: &[f64],
    skew: bool,
    rule: &QuadratureRule,
) -> SparseMatrix {
    let n = space.velocity_dof_count();
    let mut b = TripletBuilder::with_capacity(n, n, 72 * space.mesh.triangle_count());
    for t in 0..space.mesh.triangle_count() {
        let wind = wind_at_points(w, space, t, rule);
        let c = local_p2_convection(&space.geometry(t), rule, |q| wind[q], skew);
        scatter_velocity_block(&mut b, space, t, &c, 1.0);
    }
    b.finalize()
}

/// Load vector `L_i = ∫ f·φ_i`.
pub fn assemble_rhs<F: Fn(Point) -> [f64; 2]>(space: &TaylorHoodSpace, f: F, rule: &QuadratureRule) -> Vec<f64> {
    let n2 = space.p2_node_count();
    let mut out = vec![0.0; 2 * n2];
    for t in 0..space.mesh.triangle_count() {
        let geom = space.geometry(t);
        let nodes = &space.element_nodes[t];
        for (l, w) in rule.iter() {
            let phi = p2_values(l);
            let fv = f(geom.point(l));
            let s = 2.0 * geom.area * w;
            for i in 0..6 {
                out[nodes[i]] += s * fv[0] * phi[i];
                out[n2 + nodes[i]] += s * fv[1] * phi[i];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::unit_square;
    use crate::spaces::{build_taylor_hood, interpolate_function};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn space(n: usize) -> Arc<TaylorHoodSpace> {
        build_taylor_hood(Arc::new(unit_square(n).unwrap()))
    }

    fn rule() -> QuadratureRule {
        QuadratureRule::degree4()
    }

    #[test]
    fn stiffness_kernel_and_energy() {
        let s = space(3);
        let a = assemble_stiffness(&s, 1.0, &rule());
        let c = interpolate_function(&s, |_| [1.0, -2.0], |_| 0.0);
        assert!(a.matvec(&c.velocity).iter().all(|v| v.abs() < 1e-12));
        let x = interpolate_function(&s, |p| [p[0], 0.0], |_| 0.0);
        assert!((a.quadratic(&x.velocity) - 1.0).abs() < 1e-12);
        assert!(a.symmetry_defect() < 1e-12);
        let a2 = assemble_stiffness(&s, 0.25, &rule());
        assert!((a2.quadratic(&x.velocity) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn divergence_examples() {
        let s = space(4);
        let b = assemble_divergence(&s, &rule());
        let rot = interpolate_function(&s, |p| [p[1], -p[0]], |_| 0.0);
        assert!(b.matvec(&rot.velocity).iter().all(|v| v.abs() < 1e-13));
        let x = interpolate_function(&s, |p| [p[0], 0.0], |_| 0.0);
        let total: f64 = b.matvec(&x.velocity).iter().sum();
        assert!((total - 1.0).abs() < 1e-13);
        let x2 = interpolate_function(&s, |p| [p[0] * p[0], 0.0], |_| 0.0);
        let px = s.interpolate_pressure(|p| p[0]);
        assert!((b.bilinear(&px, &x2.velocity) - 2.0 / 3.0).abs() < 1e-13);
    }

    #[test]
    fn mass_examples() {
        let s = space(3);
        let m = assemble_velocity_mass(&s, &rule());
        let c = interpolate_function(&s, |_| [1.0, 0.0], |_| 0.0);
        assert!((m.quadratic(&c.velocity) - 1.0).abs() < 1e-13);
        assert!((m.values.iter().sum::<f64>() - 2.0).abs() < 1e-13);
        assert!(m.symmetry_defect() < 1e-12);
        let m1 = assemble_p1_mass(&s.mesh, &rule());
        assert!((m1.values.iter().sum::<f64>() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn single_triangle_p1_mass() {
        let g = ElementGeometry::new([[0.0, 0.0], [2.0, 0.0], [0.5, 1.5]]);
        let m = local_p1_mass(&g, &rule());
        let a = g.area;
        for i in 0..3 {
            for j in 0..3 {
                let e = a / 12.0 * if i == j { 2.0 } else { 1.0 };
                assert!((m[i][j] - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn convection_examples() {
        let s = space(3);
        let zero = VelocityPressureField::zeros(&s);
        let c0 = assemble_convection(&s, &zero, false, &rule()).unwrap();
        assert!(c0.values.iter().all(|&v| v == 0.0));
        let w = interpolate_function(&s, |_| [1.0, 0.0], |_| 0.0);
        let c = assemble_convection(&s, &w, false, &rule()).unwrap();
        let x = interpolate_function(&s, |p| [p[0], 0.0], |_| 0.0);
        assert!((c.bilinear(&x.velocity, &x.velocity) - 0.5).abs() < 1e-13);
    }

    #[test]
    fn skew_convection_vanishes_on_diagonal() {
        let s = space(4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = s.velocity_dof_count();
        let a = assemble_stiffness(&s, 1.0, &rule());
        for _ in 0..20 {
            let wv: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w = VelocityPressureField::from_parts(&s, wv, vec![0.0; s.pressure_dof_count()]).unwrap();
            let c = assemble_convection(&s, &w, true, &rule()).unwrap();
            let vv: f64 = v.iter().map(|x| x * x).sum();
            let scale = vv * a.quadratic(&w.velocity).sqrt();
            assert!(c.quadratic(&v).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn convection_rejects_foreign_field() {
        let s = space(2);
        let other = space(3);
        let w = VelocityPressureField::zeros(&other);
        assert!(assemble_convection(&s, &w, true, &rule()).is_err());
    }

    #[test]
    fn rhs_examples() {
        let s = space(4);
        let z = assemble_rhs(&s, |_| [0.0, 0.0], &rule());
        assert!(z.iter().all(|&v| v == 0.0));
        let one = interpolate_function(&s, |_| [1.0, 0.0], |_| 0.0);
        let l = assemble_rhs(&s, |_| [1.0, 0.0], &rule());
        let pair: f64 = l.iter().zip(&one.velocity).map(|(a, b)| a * b).sum();
        assert!((pair - 1.0).abs() < 1e-13);
        let l = assemble_rhs(&s, |p| [p[0] * p[1], 0.0], &rule());
        let x = interpolate_function(&s, |p| [p[0], 0.0], |_| 0.0);
        let pair: f64 = l.iter().zip(&x.velocity).map(|(a, b)| a * b).sum();
        assert!((pair - 1.0 / 6.0).abs() < 1e-13);
    }

    #[test]
    fn pressure_weights_sum_to_area() {
        let s = space(5);
        assert!((pressure_mean_weights(&s).iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn assemblers_are_linear() {
        let s = space(3);
        let r = rule();
        let w1 = interpolate_function(&s, |p| [p[0] * p[1], p[1].sin()], |_| 0.0);
        let w2 = interpolate_function(&s, |p| [1.0 - p[0], p[0] * p[0]], |_| 0.0);
        let mut sum = w1.clone();
        for (a, b) in sum.velocity.iter_mut().zip(&w2.velocity) {
            *a = 2.0 * *a - 3.0 * b;
        }
        let c1 = assemble_convection(&s, &w1, true, &r).unwrap();
        let c2 = assemble_convection(&s, &w2, true, &r).unwrap();
        let cs = assemble_convection(&s, &sum, true, &r).unwrap();
        let combo = c1.scaled(2.0).add_scaled(&c2, -3.0);
        let diff = cs.add_scaled(&combo, -1.0);
        assert!(diff.values.iter().all(|v| v.abs() < 1e-13));

        let f1 = assemble_rhs(&s, |p| [p[0], 1.0], &r);
        let f2 = assemble_rhs(&s, |p| [p[1] * p[1], -p[0]], &r);
        let fs = assemble_rhs(&s, |p| [2.0 * p[0] - 3.0 * p[1] * p[1], 2.0 + 3.0 * p[0]], &r);
        for i in 0..fs.len() {
            assert!((fs[i] - (2.0 * f1[i] - 3.0 * f2[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn mass_is_positive_definite_on_single_cell() {
        // Gershgorin-free check: Cholesky of the dense 18x18 matrix succeeds
        let s = space(1);
        let m = assemble_velocity_mass(&s, &rule()).to_dense();
        let n = m.len();
        let mut l = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let mut sum = m[i][j];
                for k in 0..j {
                    sum -= l[i][k] * l[j][k];
                }
                if i == j {
                    assert!(sum > 0.0, "non-positive pivot {sum} at {i}");
                    l[i][i] = sum.sqrt();
                } else {
                    l[i][j] = sum / l[j][j];
                }
            }
        }
    }
}
