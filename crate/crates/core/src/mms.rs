//! Manufactured solutions with closed-form derivatives.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{invalid, Result};
use crate::mesh::{Point, Rect};

type VecFn = Arc<dyn Fn(Point) -> [f64; 2] + Send + Sync>;
type MatFn = Arc<dyn Fn(Point) -> [[f64; 2]; 2] + Send + Sync>;
type ScalarFn = Arc<dyn Fn(Point) -> f64 + Send + Sync>;

/// Exact velocity/pressure pair together with the derivatives needed to
/// manufacture the forcing.
#[derive(Clone)]
pub struct ManufacturedSolution {
    pub name: String,
    pub domain: Rect,
    pub divergence_free: bool,
    /// Velocity has zero trace on the domain boundary.
    pub homogeneous_boundary: bool,
    velocity: VecFn,
    /// `[[∂x u1, ∂y u1], [∂x u2, ∂y u2]]`
    gradient: MatFn,
    laplacian: VecFn,
    pressure: ScalarFn,
    pressure_gradient: VecFn,
}

impl std::fmt::Debug for ManufacturedSolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ManufacturedSolution")
            .field("name", &self.name)
            .field("domain", &self.domain)
            .field("divergence_free", &self.divergence_free)
            .finish()
    }
}

impl ManufacturedSolution {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        domain: Rect,
        divergence_free: bool,
        homogeneous_boundary: bool,
        velocity: impl Fn(Point) -> [f64; 2] + Send + Sync + 'static,
        gradient: impl Fn(Point) -> [[f64; 2]; 2] + Send + Sync + 'static,
        laplacian: impl Fn(Point) -> [f64; 2] + Send + Sync + 'static,
        pressure: impl Fn(Point) -> f64 + Send + Sync + 'static,
        pressure_gradient: impl Fn(Point) -> [f64; 2] + Send + Sync + 'static,
    ) -> Self {
        ManufacturedSolution {
            name: name.into(),
            domain,
            divergence_free,
            homogeneous_boundary,
            velocity: Arc::new(velocity),
            gradient: Arc::new(gradient),
            laplacian: Arc::new(laplacian),
            pressure: Arc::new(pressure),
            pressure_gradient: Arc::new(pressure_gradient),
        }
    }

    pub fn velocity(&self, p: Point) -> [f64; 2] {
        (self.velocity)(p)
    }

    pub fn velocity_gradient(&self, p: Point) -> [[f64; 2]; 2] {
        (self.gradient)(p)
    }

    pub fn velocity_laplacian(&self, p: Point) -> [f64; 2] {
        (self.laplacian)(p)
    }

    pub fn pressure(&self, p: Point) -> f64 {
        (self.pressure)(p)
    }

    pub fn pressure_gradient(&self, p: Point) -> [f64; 2] {
        (self.pressure_gradient)(p)
    }

    pub fn divergence(&self, p: Point) -> f64 {
        let g = self.velocity_gradient(p);
        g[0][0] + g[1][1]
    }

    /// `f = −νΔu + (u·∇)u + ∇p` evaluated pointwise.
    pub fn forcing_at(&self, nu: f64, p: Point) -> [f64; 2] {
        let u = self.velocity(p);
        let g = self.velocity_gradient(p);
        let lap = self.velocity_laplacian(p);
        let gp = self.pressure_gradient(p);
        [
            -nu * lap[0] + u[0] * g[0][0] + u[1] * g[0][1] + gp[0],
            -nu * lap[1] + u[0] * g[1][0] + u[1] * g[1][1] + gp[1],
        ]
    }

    /// Same without the convective term, for Stokes problems.
    pub fn stokes_forcing_at(&self, nu: f64, p: Point) -> [f64; 2] {
        let lap = self.velocity_laplacian(p);
        let gp = self.pressure_gradient(p);
        [-nu * lap[0] + gp[0], -nu * lap[1] + gp[1]]
    }
}

/// Forcing function of `sol` at viscosity `nu`.
pub fn forcing_from_solution(
    sol: &ManufacturedSolution,
    nu: f64,
) -> Result<impl Fn(Point) -> [f64; 2] + Send + Sync + Clone> {
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(invalid(format!("viscosity must be positive, got {nu}")));
    }
    let sol = sol.clone();
    Ok(move |p: Point| sol.forcing_at(nu, p))
}

/// `u = (x²y² + e^{−y}, −2xy³/3 + 2 − π sin(πx))`, `p = 0` on the unit
/// square. Nonzero on the boundary.
pub fn paper_solution() -> ManufacturedSolution {
    ManufacturedSolution::new(
        "paper",
        Rect::UNIT,
        true,
        false,
        |[x, y]| [x * x * y * y + (-y).exp(), -2.0 * x * y.powi(3) / 3.0 + 2.0 - PI * (PI * x).sin()],
        |[x, y]| {
            [
                [2.0 * x * y * y, 2.0 * x * x * y - (-y).exp()],
                [-2.0 * y.powi(3) / 3.0 - PI * PI * (PI * x).cos(), -2.0 * x * y * y],
            ]
        },
        |[x, y]| [2.0 * y * y + 2.0 * x * x + (-y).exp(), PI.powi(3) * (PI * x).sin() - 4.0 * x * y],
        |_| 0.0,
        |_| [0.0, 0.0],
    )
}

/// `u = curl ψ` with `ψ = x²(1−x)²y²(1−y)²`, `p = cos(πx) cos(πy)`.
/// Vanishes on the boundary of the unit square.
pub fn homogeneous_solution() -> ManufacturedSolution {
    // g(s) = s²(1−s)² and its derivatives
    fn g(s: f64) -> [f64; 4] {
        [
            s * s * (1.0 - s) * (1.0 - s),
            2.0 * s * (1.0 - s) * (1.0 - 2.0 * s),
            2.0 - 12.0 * s + 12.0 * s * s,
            -12.0 + 24.0 * s,
        ]
    }
    ManufacturedSolution::new(
        "homogeneous",
        Rect::UNIT,
        true,
        true,
        |[x, y]| {
            let (gx, gy) = (g(x), g(y));
            [gx[0] * gy[1], -gx[1] * gy[0]]
        },
        |[x, y]| {
            let (gx, gy) = (g(x), g(y));
            [[gx[1] * gy[1], gx[0] * gy[2]], [-gx[2] * gy[0], -gx[1] * gy[1]]]
        },
        |[x, y]| {
            let (gx, gy) = (g(x), g(y));
            [gx[2] * gy[1] + gx[0] * gy[3], -(gx[3] * gy[0] + gx[1] * gy[2])]
        },
        |[x, y]| (PI * x).cos() * (PI * y).cos(),
        |[x, y]| [-PI * (PI * x).sin() * (PI * y).cos(), -PI * (PI * x).cos() * (PI * y).sin()],
    )
}

/// Zero velocity with pressure `p = x − 1/2`; forcing is the constant `(1, 0)`.
pub fn hydrostatic_solution() -> ManufacturedSolution {
    ManufacturedSolution::new(
        "hydrostatic",
        Rect::UNIT,
        true,
        true,
        |_| [0.0, 0.0],
        |_| [[0.0; 2]; 2],
        |_| [0.0, 0.0],
        |[x, _]| x - 0.5,
        |_| [1.0, 0.0],
    )
}

pub const BUILTIN_NAMES: [&str; 3] = ["paper", "homogeneous", "hydrostatic"];

pub fn builtin_paper_solution() -> ManufacturedSolution {
    paper_solution()
}

pub fn builtin(name: &str) -> Result<ManufacturedSolution> {
    match name {
        "paper" => Ok(paper_solution()),
        "homogeneous" => Ok(homogeneous_solution()),
        "hydrostatic" => Ok(hydrostatic_solution()),
        other => Err(invalid(format!("unknown solution '{other}', expected one of {BUILTIN_NAMES:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Finite-difference oracle for −νΔu + (u·∇)u + ∇p built only from
    // velocity and pressure values: central first differences with step
    // 1e-5, fourth-order central second differences with step 1e-3 (a
    // 1e-5 second difference is dominated by round-off).
    fn fd_forcing(sol: &ManufacturedSolution, nu: f64, p: Point) -> [f64; 2] {
        let [x, y] = p;
        let h1 = 1e-5;
        let h2 = 1e-3;
        let u = sol.velocity(p);
        let d1 = |c: usize, ex: f64, ey: f64| {
            (sol.velocity([x + ex * h1, y + ey * h1])[c] - sol.velocity([x - ex * h1, y - ey * h1])[c]) / (2.0 * h1)
        };
        let d2 = |c: usize, ex: f64, ey: f64| {
            let at = |k: f64| sol.velocity([x + k * ex * h2, y + k * ey * h2])[c];
            (-at(2.0) + 16.0 * at(1.0) - 30.0 * at(0.0) + 16.0 * at(-1.0) - at(-2.0)) / (12.0 * h2 * h2)
        };
        let mut f = [0.0; 2];
        for c in 0..2 {
            let lap = d2(c, 1.0, 0.0) + d2(c, 0.0, 1.0);
            f[c] = -nu * lap + u[0] * d1(c, 1.0, 0.0) + u[1] * d1(c, 0.0, 1.0);
        }
        f[0] += (sol.pressure([x + h1, y]) - sol.pressure([x - h1, y])) / (2.0 * h1);
        f[1] += (sol.pressure([x, y + h1]) - sol.pressure([x, y - h1])) / (2.0 * h1);
        f
    }

    #[test]
    fn forcing_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for sol in [paper_solution(), homogeneous_solution(), hydrostatic_solution()] {
            for &nu in &[1.0, 0.01] {
                for _ in 0..100 {
                    let p = [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)];
                    let exact = sol.forcing_at(nu, p);
                    let fd = fd_forcing(&sol, nu, p);
                    for c in 0..2 {
                        assert!(
                            (exact[c] - fd[c]).abs() <= 1e-6,
                            "{} nu={nu} at {p:?}: {} vs {}",
                            sol.name,
                            exact[c],
                            fd[c]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn divergence_free_at_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for sol in [paper_solution(), homogeneous_solution()] {
            for _ in 0..1000 {
                let p = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
                assert!(sol.divergence(p).abs() <= 1e-10);
            }
        }
        assert_eq!(paper_solution().divergence([0.3, 0.7]), 0.0);
    }

    #[test]
    fn paper_solution_values() {
        let s = paper_solution();
        assert_eq!(s.velocity([0.0, 0.0]), [1.0, 2.0]);
        let u = s.velocity([1.0, 1.0]);
        assert!((u[0] - (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!((u[1] - 4.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn homogeneous_solution_vanishes_on_boundary() {
        let s = homogeneous_solution();
        for k in 0..=20 {
            let t = k as f64 / 20.0;
            for p in [[t, 0.0], [t, 1.0], [0.0, t], [1.0, t]] {
                let u = s.velocity(p);
                assert!(u[0].abs() < 1e-15 && u[1].abs() < 1e-15);
            }
        }
    }

    #[test]
    fn trivial_forcings() {
        let zero = ManufacturedSolution::new(
            "zero",
            Rect::UNIT,
            true,
            true,
            |_| [0.0; 2],
            |_| [[0.0; 2]; 2],
            |_| [0.0; 2],
            |_| 0.0,
            |_| [0.0; 2],
        );
        let f = forcing_from_solution(&zero, 1.0).unwrap();
        assert_eq!(f([0.2, 0.4]), [0.0, 0.0]);
        let f = forcing_from_solution(&hydrostatic_solution(), 2.0).unwrap();
        assert_eq!(f([0.7, 0.1]), [1.0, 0.0]);
        assert!(forcing_from_solution(&zero, 0.0).is_err());
    }

    #[test]
    fn builtin_forcing_at_center() {
        let s = paper_solution();
        let f = s.forcing_at(1.0, [0.5, 0.5]);
        let fd = fd_forcing(&s, 1.0, [0.5, 0.5]);
        assert!((f[0] - fd[0]).abs() < 1e-6 && (f[1] - fd[1]).abs() < 1e-6);
    }

    #[test]
    fn lookup_by_name() {
        assert_eq!(builtin("paper").unwrap().name, "paper");
        assert!(builtin("nope").is_err());
    }
}
