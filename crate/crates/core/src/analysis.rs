//! Norms, errors against manufactured solutions, convergence rates and
//! discrete dual norms of a forcing.

use std::sync::Arc;

use serde::Serialize;

use crate::assembly::{assemble_rhs, assemble_stiffness};
use crate::error::Result;
use crate::linsolve::solve_linear;
use crate::mesh::Point;
use crate::mms::ManufacturedSolution;
use crate::quadrature::{QuadratureDegree, QuadratureRule};
use crate::solver::{solve_stokes, NsProblem, SolveConfig};
use crate::sparse::TripletBuilder;
use crate::spaces::{TaylorHoodSpace, VelocityPressureField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldNorms {
    pub l2: f64,
    pub h1_seminorm: f64,
    pub div_l2: f64,
}

/// `‖u‖`, `‖∇u‖` and `‖∇·u‖` of the velocity by quadrature.
pub fn norms(field: &VelocityPressureField, rule: &QuadratureRule) -> FieldNorms {
    let (mut l2, mut h1, mut div) = (0.0, 0.0, 0.0);
    for_each_point(&field.space, rule, |t, geom, l, s| {
        let (u, _) = field.evaluate_in(t, l);
        let g = field.velocity_gradient_in(t, geom, l);
        l2 += s * (u[0] * u[0] + u[1] * u[1]);
        h1 += s * (g[0][0] * g[0][0] + g[0][1] * g[0][1] + g[1][0] * g[1][0] + g[1][1] * g[1][1]);
        let d = g[0][0] + g[1][1];
        div += s * d * d;
    });
    FieldNorms { l2: l2.sqrt(), h1_seminorm: h1.sqrt(), div_l2: div.sqrt() }
}

/// `‖∇·u‖` of the velocity.
pub fn divergence_l2(field: &VelocityPressureField, rule: &QuadratureRule) -> f64 {
    norms(field, rule).div_l2
}

fn for_each_point<F>(space: &TaylorHoodSpace, rule: &QuadratureRule, mut f: F)
where
    F: FnMut(usize, &crate::spaces::ElementGeometry, &[f64; 3], f64),
{
    for t in 0..space.mesh.triangle_count() {
        let geom = space.geometry(t);
        for (l, w) in rule.iter() {
            f(t, &geom, l, 2.0 * geom.area * w);
        }
    }
}

/// Errors of a discrete field against a manufactured solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldErrors {
    pub e_l2_u: f64,
    pub e_h1_u: f64,
    /// Both pressures shifted to zero mean first.
    pub e_l2_p: f64,
    pub div_l2: f64,
}

/// Velocity, gradient and mean-free pressure errors with the degree-6 rule.
pub fn error_vs_exact(field: &VelocityPressureField, sol: &ManufacturedSolution) -> FieldErrors {
    let rule = QuadratureRule::new(QuadratureDegree::Six);
    let space = &field.space;
    let (mut area, mut mean_h, mut mean_x) = (0.0, 0.0, 0.0);
    for_each_point(space, &rule, |t, geom, l, s| {
        let (_, p) = field.evaluate_in(t, l);
        area += s;
        mean_h += s * p;
        mean_x += s * sol.pressure(geom.point(l));
    });
    let (mean_h, mean_x) = (mean_h / area, mean_x / area);
    let (mut eu, mut eg, mut ep, mut div) = (0.0, 0.0, 0.0, 0.0);
    for_each_point(space, &rule, |t, geom, l, s| {
        let x = geom.point(l);
        let (u, p) = field.evaluate_in(t, l);
        let g = field.velocity_gradient_in(t, geom, l);
        let ue = sol.velocity(x);
        let ge = sol.velocity_gradient(x);
        eu += s * ((u[0] - ue[0]).powi(2) + (u[1] - ue[1]).powi(2));
        for a in 0..2 {
            for b in 0..2 {
                eg += s * (g[a][b] - ge[a][b]).powi(2);
            }
        }
        ep += s * ((p - mean_h) - (sol.pressure(x) - mean_x)).powi(2);
        div += s * (g[0][0] + g[1][1]).powi(2);
    });
    FieldErrors { e_l2_u: eu.sqrt(), e_h1_u: eg.sqrt(), e_l2_p: ep.sqrt(), div_l2: div.sqrt() }
}

/// `log2(e_{2h} / e_h)` for consecutive halvings; `values` ordered coarse
/// to fine.
pub fn convergence_rates(values: &[f64]) -> Vec<f64> {
    values.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

/// Observed rate between two meshes of arbitrary ratio.
pub fn observed_rate(e_coarse: f64, e_fine: f64, h_coarse: f64, h_fine: f64) -> f64 {
    (e_coarse / e_fine).ln() / (h_coarse / h_fine).ln()
}

/// One row of a convergence or sweep table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorRow {
    pub h: f64,
    #[serde(rename = "H")]
    pub coarse_h: Option<f64>,
    #[serde(rename = "Re")]
    pub re: f64,
    pub mu: f64,
    #[serde(rename = "e_L2_u")]
    pub e_l2_u: f64,
    #[serde(rename = "e_H1_u")]
    pub e_h1_u: f64,
    #[serde(rename = "e_L2_p")]
    pub e_l2_p: f64,
    #[serde(rename = "div_L2")]
    pub div_l2: f64,
    #[serde(rename = "rate_L2_u")]
    pub rate_l2_u: Option<f64>,
    #[serde(rename = "rate_H1_u")]
    pub rate_h1_u: Option<f64>,
    #[serde(rename = "rate_L2_p")]
    pub rate_l2_p: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Errors over a mesh sequence with observed rates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub h: Vec<f64>,
    pub errors: Vec<FieldErrors>,
    pub rate_l2_u: Vec<f64>,
    pub rate_h1_u: Vec<f64>,
    pub rate_l2_p: Vec<f64>,
}

impl ErrorReport {
    /// Rates use the actual mesh-size ratio, so sequences need not halve.
    pub fn new(h: Vec<f64>, errors: Vec<FieldErrors>) -> Self {
        let rate = |f: fn(&FieldErrors) -> f64| -> Vec<f64> {
            (1..h.len()).map(|k| observed_rate(f(&errors[k - 1]), f(&errors[k]), h[k - 1], h[k])).collect()
        };
        let rate_l2_u = rate(|e| e.e_l2_u);
        let rate_h1_u = rate(|e| e.e_h1_u);
        let rate_l2_p = rate(|e| e.e_l2_p);
        ErrorReport { h, errors, rate_l2_u, rate_h1_u, rate_l2_p }
    }
}

/// Discrete dual norms of a forcing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DualNorms {
    /// Sup over the whole discrete velocity space with zero trace.
    pub minus_one: f64,
    /// Sup over its discretely divergence-free subspace.
    pub star: f64,
    /// Mesh size of the space used.
    pub h: f64,
}

/// `‖f‖_{-1,h}` by a vector Laplace Riesz solve and `‖f‖_{*,h}` by a Stokes
/// solve, both with zero boundary data and unit viscosity.
pub fn dual_norm_estimate<F>(f: F, space: &Arc<TaylorHoodSpace>, degree: QuadratureDegree) -> Result<DualNorms>
where
    F: Fn(Point) -> [f64; 2],
{
    let rule = QuadratureRule::new(degree);
    let load = assemble_rhs(space, &f, &rule);
    let a = assemble_stiffness(space, 1.0, &rule);
    let boundary = space.boundary_velocity_mask();
    let n = space.velocity_dof_count();
    let mut b = TripletBuilder::with_capacity(n, n, a.nnz());
    for (r, c, v) in a.triplets() {
        if !boundary[r] && !boundary[c] {
            b.push(r, c, v);
        }
    }
    for (d, &on) in boundary.iter().enumerate() {
        if on {
            b.push(d, d, 1.0);
        }
    }
    let rhs: Vec<f64> = load.iter().zip(&boundary).map(|(&l, &on)| if on { 0.0 } else { l }).collect();
    let riesz = solve_linear(&b.finalize(), &rhs)?;
    let minus_one = a.quadratic(&riesz).max(0.0).sqrt();

    let problem = NsProblem { space: Arc::clone(space), rule: rule.clone(), load, boundary_values: vec![0.0; n] };
    let (stokes, _) = solve_stokes(&problem, &SolveConfig::default())?;
    let star = a.quadratic(&stokes.velocity).max(0.0).sqrt();
    Ok(DualNorms { minus_one, star, h: space.mesh.spacing() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::unit_square;
    use crate::mms::paper_solution;
    use crate::spaces::{build_taylor_hood, interpolate_function};

    fn space(n: usize) -> Arc<TaylorHoodSpace> {
        build_taylor_hood(Arc::new(unit_square(n).unwrap()))
    }

    #[test]
    fn norm_examples() {
        let s = space(4);
        let rule = QuadratureRule::degree4();
        let n = norms(&interpolate_function(&s, |_| [1.0, 0.0], |_| 0.0), &rule);
        assert!((n.l2 - 1.0).abs() < 1e-12 && n.h1_seminorm.abs() < 1e-12 && n.div_l2.abs() < 1e-12);
        let n = norms(&interpolate_function(&s, |p| [p[0], 0.0], |_| 0.0), &rule);
        assert!((n.l2 - 1.0 / 3f64.sqrt()).abs() < 1e-12);
        assert!((n.h1_seminorm - 1.0).abs() < 1e-12 && (n.div_l2 - 1.0).abs() < 1e-12);
        let n = norms(&interpolate_function(&s, |p| [p[0], -p[1]], |_| 0.0), &rule);
        assert!(n.div_l2.abs() < 1e-12 && (n.h1_seminorm - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn norm_homogeneity() {
        let s = space(4);
        let rule = QuadratureRule::degree4();
        let f = interpolate_function(&s, |p| [p[0].sin() * p[1], p[0] * p[0]], |_| 0.0);
        let base = norms(&f, &rule);
        for c in [-3.0, 0.5, 7.0] {
            let mut g = f.clone();
            g.velocity.iter_mut().for_each(|v| *v *= c);
            let n = norms(&g, &rule);
            assert!((n.l2 - c.abs() * base.l2).abs() < 1e-12 * base.l2 * c.abs());
            assert!((n.h1_seminorm - c.abs() * base.h1_seminorm).abs() < 1e-12 * base.h1_seminorm * c.abs());
        }
    }

    #[test]
    fn error_examples() {
        let s = space(32);
        let sol = paper_solution();
        let e = error_vs_exact(&interpolate_function(&s, |p| sol.velocity(p), |p| sol.pressure(p)), &sol);
        assert!(e.e_l2_u < 1e-3 && e.e_l2_p < 1e-3, "{e:?}");
        // the gradient error of the interpolant is about 2.5e-3 here; check
        // its second-order decay instead of an absolute level
        let coarse = error_vs_exact(&interpolate_function(&space(16), |p| sol.velocity(p), |p| sol.pressure(p)), &sol);
        assert!(observed_rate(coarse.e_h1_u, e.e_h1_u, 1.0 / 16.0, 1.0 / 32.0) > 1.9);

        let s = space(4);
        let eps = 0.25;
        let f = interpolate_function(&s, |p| [p[0] * p[1] + eps, p[1]], |_| 0.0);
        let exact = ManufacturedSolution::new(
            "xy",
            crate::mesh::Rect::UNIT,
            false,
            false,
            |p| [p[0] * p[1], p[1]],
            |p| [[p[1], p[0]], [0.0, 1.0]],
            |_| [0.0, 0.0],
            |_| 0.0,
            |_| [0.0, 0.0],
        );
        let e = error_vs_exact(&f, &exact);
        assert!((e.e_l2_u - eps).abs() < 1e-12 && e.e_h1_u < 1e-12);

        let zero = VelocityPressureField::zeros(&s);
        let e = error_vs_exact(&zero, &crate::mms::hydrostatic_solution());
        assert_eq!((e.e_l2_u, e.e_h1_u, e.div_l2), (0.0, 0.0, 0.0));
        let zero_sol = ManufacturedSolution::new(
            "zero",
            crate::mesh::Rect::UNIT,
            true,
            true,
            |_| [0.0; 2],
            |_| [[0.0; 2]; 2],
            |_| [0.0; 2],
            |_| 0.0,
            |_| [0.0; 2],
        );
        let e = error_vs_exact(&zero, &zero_sol);
        assert_eq!((e.e_l2_u, e.e_h1_u, e.e_l2_p, e.div_l2), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn rates() {
        assert_eq!(convergence_rates(&[4.0, 1.0, 0.25]), vec![2.0, 2.0]);
        assert!((observed_rate(8.0, 1.0, 0.5, 0.25) - 3.0).abs() < 1e-14);
    }

    #[test]
    fn zero_forcing_has_zero_dual_norm() {
        let d = dual_norm_estimate(|_| [0.0, 0.0], &space(4), QuadratureDegree::Four).unwrap();
        assert_eq!((d.minus_one, d.star), (0.0, 0.0));
    }
}
