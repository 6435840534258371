//! Picard iteration for the steady Navier-Stokes equations with an optional
//! nudging term, on Taylor-Hood elements.
//!
//! Each step solves the saddle-point system
//!
//! ```text
//! [ νA + C(w_k) + N   −Bᵀ   0 ] [u]   [F + G]
//! [ −B                 0    m ] [p] = [  0  ]
//! [ 0                  mᵀ   0 ] [λ]   [  0  ]
//! ```
//!
//! with `m` the pressure mean weights. For the L2-projection observation the
//! dense `N = μ Xᵀ M_H⁻¹ X` is replaced by an auxiliary coarse unknown
//! `y = M_H⁻¹ X u`, appended as extra rows `X u − M_H y = 0` and the coupling
//! `μ Xᵀ y` in the momentum rows.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::divergence_l2;
use crate::assembly::{
    assemble_convection_coeffs, assemble_divergence, assemble_rhs, assemble_stiffness, local_p2_convection,
    pressure_mean_weights, wind_at_points,
};
use crate::error::{invalid, Error, Result};
use crate::linsolve::{norm, LinearSolver};
use crate::mesh::Point;
use crate::mms::{forcing_from_solution, ManufacturedSolution};
use crate::observation::{assemble_nudging, NudgingVariant, ObservationOperator};
use crate::quadrature::{QuadratureDegree, QuadratureRule};
use crate::sparse::{SparseMatrix, TripletBuilder};
use crate::spaces::{TaylorHoodSpace, VelocityPressureField};
use crate::theory::ConditionReport;

pub use crate::linsolve::solve_linear;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialGuess {
    /// Zero in the interior, boundary data on `∂Ω`.
    #[default]
    Zero,
    /// Solution of the Stokes problem with the same data.
    Stokes,
    /// Velocity coefficients supplied by the caller.
    Given(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvectionForm {
    #[default]
    Skew,
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PressureConstraint {
    #[default]
    MeanZeroLagrange,
    /// Fix the first pressure DOF, then shift to zero mean.
    PinDof,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub nu: f64,
    pub mu: f64,
    pub tol_rel: f64,
    pub tol_abs: f64,
    pub max_iter: usize,
    pub initial_guess: InitialGuess,
    pub convection: ConvectionForm,
    pub variant: NudgingVariant,
    pub pressure_constraint: PressureConstraint,
    /// Picard relaxation `w ← θ ŵ + (1 − θ) w`, `θ ∈ (0, 1]`.
    pub damping: f64,
    pub quadrature: QuadratureDegree,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            nu: 1.0,
            mu: 0.0,
            tol_rel: 1e-9,
            tol_abs: 1e-12,
            max_iter: 200,
            initial_guess: InitialGuess::Zero,
            convection: ConvectionForm::Skew,
            variant: NudgingVariant::IhIh,
            pressure_constraint: PressureConstraint::MeanZeroLagrange,
            damping: 1.0,
            quadrature: QuadratureDegree::Four,
        }
    }
}

impl SolveConfig {
    pub fn with_nu(nu: f64) -> Self {
        SolveConfig { nu, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(invalid(format!("nu must be positive, got {}", self.nu)));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(invalid(format!("mu must be non-negative, got {}", self.mu)));
        }
        if !(self.tol_rel > 0.0 && self.tol_abs > 0.0) {
            return Err(invalid("tolerances must be positive"));
        }
        if self.max_iter == 0 {
            return Err(invalid("max_iter must be at least 1"));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(invalid(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        Ok(())
    }

    fn skew(&self) -> bool {
        self.convection == ConvectionForm::Skew
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub converged: bool,
    pub iterations: usize,
    /// Relative H1-seminorm increment of each step.
    pub increment_history: Vec<f64>,
    /// Euclidean norm of the momentum residual on the free velocity DOFs.
    pub nonlinear_residual: f64,
    pub divergence_l2: f64,
    pub pressure_mean: f64,
    pub wall_time_s: f64,
    pub condition: Option<ConditionReport>,
}

/// Data of one boundary value problem on a fixed space.
#[derive(Debug, Clone)]
pub struct NsProblem {
    pub space: Arc<TaylorHoodSpace>,
    pub rule: QuadratureRule,
    /// `⟨f, φ_i⟩` for every velocity basis function.
    pub load: Vec<f64>,
    /// Velocity coefficients whose boundary entries are the Dirichlet data.
    pub boundary_values: Vec<f64>,
}

impl NsProblem {
    pub fn new<F, G>(space: &Arc<TaylorHoodSpace>, f: F, boundary: G, degree: QuadratureDegree) -> Self
    where
        F: Fn(Point) -> [f64; 2],
        G: Fn(Point) -> [f64; 2],
    {
        let rule = QuadratureRule::new(degree);
        let load = assemble_rhs(space, f, &rule);
        let mut boundary_values = vec![0.0; space.velocity_dof_count()];
        let nodal = space.interpolate_velocity(boundary);
        for &d in &space.boundary_velocity_dofs {
            boundary_values[d] = nodal[d];
        }
        NsProblem { space: Arc::clone(space), rule, load, boundary_values }
    }

    /// Zero boundary data.
    pub fn homogeneous<F: Fn(Point) -> [f64; 2]>(space: &Arc<TaylorHoodSpace>, f: F, degree: QuadratureDegree) -> Self {
        Self::new(space, f, |_| [0.0, 0.0], degree)
    }

    /// Forcing and boundary trace of a manufactured solution at viscosity `nu`.
    pub fn manufactured(
        space: &Arc<TaylorHoodSpace>,
        sol: &ManufacturedSolution,
        nu: f64,
        degree: QuadratureDegree,
    ) -> Result<Self> {
        let f = forcing_from_solution(sol, nu)?;
        Ok(Self::new(space, f, |p| sol.velocity(p), degree))
    }

    /// Same boundary data and forcing with the Navier-Stokes convection
    /// dropped from a manufactured forcing.
    pub fn manufactured_stokes(
        space: &Arc<TaylorHoodSpace>,
        sol: &ManufacturedSolution,
        nu: f64,
        degree: QuadratureDegree,
    ) -> Result<Self> {
        if !(nu > 0.0) {
            return Err(invalid(format!("viscosity must be positive, got {nu}")));
        }
        Ok(Self::new(space, |p| sol.stokes_forcing_at(nu, p), |p| sol.velocity(p), degree))
    }
}

/// Observation data entering the nudging term.
#[derive(Debug, Clone, Copy)]
pub struct Observations<'a> {
    pub op: &'a ObservationOperator,
    /// Coarse coefficients of `I_H u`.
    pub coarse: &'a [f64],
}

impl<'a> Observations<'a> {
    pub fn new(op: &'a ObservationOperator, coarse: &'a [f64]) -> Result<Self> {
        if coarse.len() != op.coarse_dof_count() {
            return Err(invalid(format!(
                "observations have {} values, coarse space has {}",
                coarse.len(),
                op.coarse_dof_count()
            )));
        }
        Ok(Observations { op, coarse })
    }
}

/// Unknown numbering of the assembled system.
#[derive(Debug, Clone, Copy)]
struct Layout {
    nv: usize,
    np: usize,
    total: usize,
}

/// Assembled saddle-point system with a fixed sparsity pattern, refreshed
/// in place for each Picard step.
struct SaddleSystem<'a> {
    problem: &'a NsProblem,
    layout: Layout,
    base: SparseMatrix,
    /// Per `(triangle, component)`, positions of the 36 local velocity
    /// couplings in `base.values`.
    element_positions: Vec<[usize; 36]>,
    /// Rhs independent of the convecting field, before lifting.
    base_rhs: Vec<f64>,
    fixed: Vec<bool>,
    fixed_values: Vec<f64>,
    /// `(position, row, col)` of entries in fixed columns of free rows.
    fixed_col_entries: Vec<(usize, usize, usize)>,
    pin_dof: Option<usize>,
    solver: LinearSolver,
    with_convection: bool,
    skew: bool,
}

impl<'a> SaddleSystem<'a> {
    fn new(
        problem: &'a NsProblem,
        config: &SolveConfig,
        obs: Option<Observations<'_>>,
        with_convection: bool,
    ) -> Result<Self> {
        let space = &problem.space;
        let rule = &problem.rule;
        let nv = space.velocity_dof_count();
        let np = space.pressure_dof_count();
        let obs = obs.filter(|_| config.mu > 0.0);
        if let Some(o) = &obs {
            if !Arc::ptr_eq(&o.op.fine_space, space) {
                return Err(invalid("observation operator was built on a different space"));
            }
        }
        let nudging = obs.as_ref().map(|o| assemble_nudging(o.op, config.mu, config.variant)).transpose()?;
        let augmented = nudging.as_ref().is_some_and(|n| n.matrix.is_none());
        let n_aux = if augmented { obs.as_ref().map_or(0, |o| o.op.coarse_dof_count()) } else { 0 };

        let lagrange_mode = config.pressure_constraint == PressureConstraint::MeanZeroLagrange;
        let mut total = nv + np;
        let lagrange = lagrange_mode.then(|| {
            total += 1;
            total - 1
        });
        let aux = (n_aux > 0).then(|| {
            total += n_aux;
            total - n_aux
        });
        let layout = Layout { nv, np, total };

        let stiffness = assemble_stiffness(space, config.nu, rule);
        let div = assemble_divergence(space, rule);
        let mut b = TripletBuilder::with_capacity(total, total, stiffness.nnz() + 4 * div.nnz());
        for (r, c, v) in stiffness.triplets() {
            b.push(r, c, v);
        }
        for (q, c, v) in div.triplets() {
            b.push(c, nv + q, -v);
            b.push(nv + q, c, -v);
        }
        if let Some(l) = lagrange {
            for (q, w) in pressure_mean_weights(space).into_iter().enumerate() {
                b.push(nv + q, l, w);
                b.push(l, nv + q, w);
            }
        }
        let pin_dof = (!lagrange_mode).then_some(nv);
        if let Some(p) = pin_dof {
            b.push(p, p, 0.0);
        }
        if let Some(n) = &nudging {
            match (&n.matrix, aux) {
                (Some(m), _) => {
                    for (r, c, v) in m.triplets() {
                        b.push(r, c, v);
                    }
                }
                (None, Some(a)) => {
                    for (r, c, v) in n.op.cross_mass.triplets() {
                        b.push(c, a + r, config.mu * v);
                        b.push(a + r, c, v);
                    }
                    for (r, c, v) in n.op.coarse_mass.triplets() {
                        b.push(a + r, a + c, -v);
                    }
                }
                (None, None) => unreachable!("projection nudging always has auxiliary unknowns"),
            }
        }
        // reserve the convection pattern; it coincides with the viscous one
        // but is pushed explicitly so the position lookup cannot fail
        for t in 0..space.mesh.triangle_count() {
            for c in 0..2 {
                for i in 0..6 {
                    for j in 0..6 {
                        b.push(space.element_velocity_dof(t, i, c), space.element_velocity_dof(t, j, c), 0.0);
                    }
                }
            }
        }
        let base = b.finalize();

        let mut element_positions = Vec::with_capacity(2 * space.mesh.triangle_count());
        for t in 0..space.mesh.triangle_count() {
            for c in 0..2 {
                let mut pos = [0usize; 36];
                for i in 0..6 {
                    let r = space.element_velocity_dof(t, i, c);
                    for j in 0..6 {
                        pos[6 * i + j] = position(&base, r, space.element_velocity_dof(t, j, c));
                    }
                }
                element_positions.push(pos);
            }
        }

        let mut base_rhs = vec![0.0; total];
        base_rhs[..nv].copy_from_slice(&problem.load);
        if let (Some(n), Some(o)) = (&nudging, &obs) {
            for (r, g) in base_rhs.iter_mut().zip(n.rhs(o.coarse)) {
                *r += g;
            }
        }

        let mut fixed = vec![false; total];
        let mut fixed_values = vec![0.0; total];
        for &d in &space.boundary_velocity_dofs {
            fixed[d] = true;
            fixed_values[d] = problem.boundary_values[d];
        }
        if let Some(p) = pin_dof {
            fixed[p] = true;
        }
        let mut fixed_col_entries = Vec::new();
        for r in 0..total {
            if fixed[r] {
                continue;
            }
            for k in base.indptr[r]..base.indptr[r + 1] {
                let c = base.indices[k];
                if fixed[c] {
                    fixed_col_entries.push((k, r, c));
                }
            }
        }

        Ok(SaddleSystem {
            problem,
            layout,
            base,
            element_positions,
            base_rhs,
            fixed,
            fixed_values,
            fixed_col_entries,
            pin_dof,
            solver: LinearSolver::new(),
            with_convection,
            skew: config.skew(),
        })
    }

    /// Solves the linear system with convection lagged at `wind`.
    fn solve(&mut self, wind: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let space = &self.problem.space;
        let rule = &self.problem.rule;
        let mut values = self.base.values.clone();
        if self.with_convection {
            for t in 0..space.mesh.triangle_count() {
                let w = wind_at_points(wind, space, t, rule);
                let local = local_p2_convection(&space.geometry(t), rule, |q| w[q], self.skew);
                for c in 0..2 {
                    let pos = &self.element_positions[2 * t + c];
                    for i in 0..6 {
                        for j in 0..6 {
                            values[pos[6 * i + j]] += local[i][j];
                        }
                    }
                }
            }
        }
        let mut rhs = self.base_rhs.clone();
        for &(k, r, c) in &self.fixed_col_entries {
            rhs[r] -= values[k] * self.fixed_values[c];
            values[k] = 0.0;
        }
        for r in 0..self.layout.total {
            if !self.fixed[r] {
                continue;
            }
            for k in self.base.indptr[r]..self.base.indptr[r + 1] {
                values[k] = if self.base.indices[k] == r { 1.0 } else { 0.0 };
            }
            rhs[r] = self.fixed_values[r];
        }
        let a = SparseMatrix { values, ..self.base.clone() };
        let x = self.solver.solve(&a, &rhs)?;
        let Layout { nv, np, .. } = self.layout;
        let velocity = x[..nv].to_vec();
        let mut pressure = x[nv..nv + np].to_vec();
        if self.pin_dof.is_some() {
            shift_to_zero_mean(space, &mut pressure);
        }
        Ok((velocity, pressure))
    }
}

fn position(m: &SparseMatrix, r: usize, c: usize) -> usize {
    let span = m.indptr[r]..m.indptr[r + 1];
    span.start + m.indices[span].binary_search(&c).expect("entry reserved in the pattern")
}

fn shift_to_zero_mean(space: &TaylorHoodSpace, pressure: &mut [f64]) {
    let w = pressure_mean_weights(space);
    let area: f64 = w.iter().sum();
    let mean = w.iter().zip(pressure.iter()).map(|(a, b)| a * b).sum::<f64>() / area;
    pressure.iter_mut().for_each(|p| *p -= mean);
}

fn pressure_mean(space: &TaylorHoodSpace, pressure: &[f64]) -> f64 {
    let w = pressure_mean_weights(space);
    w.iter().zip(pressure).map(|(a, b)| a * b).sum::<f64>() / w.iter().sum::<f64>()
}

/// Stokes problem `[νA, −Bᵀ; −B, 0]` with the configured pressure constraint.
pub fn solve_stokes(problem: &NsProblem, config: &SolveConfig) -> Result<(VelocityPressureField, SolveReport)> {
    config.validate()?;
    let start = Instant::now();
    let mut sys = SaddleSystem::new(problem, config, None, false)?;
    let (velocity, pressure) = sys.solve(&problem.boundary_values)?;
    let field = VelocityPressureField::from_parts(&problem.space, velocity, pressure)?;
    let stokes_cfg = SolveConfig { mu: 0.0, ..config.clone() };
    let report = finish_report(problem, &stokes_cfg, None, &field, true, 1, vec![0.0], start, false);
    Ok((field, report))
}

/// One Picard step from `w_k`: convection lagged at `w_k`, nudging toward
/// `obs` when `μ > 0`.
pub fn picard_step(
    problem: &NsProblem,
    config: &SolveConfig,
    w_k: &VelocityPressureField,
    obs: Option<Observations<'_>>,
) -> Result<VelocityPressureField> {
    config.validate()?;
    w_k.ensure_space(&problem.space)?;
    let mut sys = SaddleSystem::new(problem, config, obs, true)?;
    let (velocity, pressure) = sys.solve(&w_k.velocity)?;
    VelocityPressureField::from_parts(&problem.space, velocity, pressure)
}

/// Plain Navier-Stokes solve (no nudging).
pub fn solve_nse(problem: &NsProblem, config: &SolveConfig) -> Result<(VelocityPressureField, SolveReport)> {
    solve_cda_nse(problem, config, None)
}

/// Picard iteration for the nudged problem. Without observations, or with
/// `μ = 0`, this is the plain Navier-Stokes iteration.
///
/// Running out of iterations, or an iterate blowing up, is reported through
/// `converged = false`; only linear-solve failures are errors.
pub fn solve_cda_nse(
    problem: &NsProblem,
    config: &SolveConfig,
    obs: Option<Observations<'_>>,
) -> Result<(VelocityPressureField, SolveReport)> {
    config.validate()?;
    let start = Instant::now();
    let space = &problem.space;
    let h1 = assemble_stiffness(space, 1.0, &problem.rule);
    let h1_norm = |v: &[f64]| h1.quadratic(v).max(0.0).sqrt();

    let mut w = match &config.initial_guess {
        InitialGuess::Zero => problem.boundary_values.clone(),
        InitialGuess::Stokes => solve_stokes(problem, config)?.0.velocity,
        InitialGuess::Given(v) => {
            if v.len() != space.velocity_dof_count() {
                return Err(invalid(format!(
                    "initial guess has {} coefficients, space has {}",
                    v.len(),
                    space.velocity_dof_count()
                )));
            }
            v.clone()
        }
    };
    let mut p = vec![0.0; space.pressure_dof_count()];
    let mut sys = SaddleSystem::new(problem, config, obs, true)?;
    let mut history = Vec::new();
    let mut converged = false;
    let theta = config.damping;
    for k in 1..=config.max_iter {
        let (u_new, p_new) =
            sys.solve(&w).map_err(|e| Error::PicardStep { iteration: k, source: Box::new(e) })?;
        let mut next = u_new;
        if theta < 1.0 {
            for (n, o) in next.iter_mut().zip(&w) {
                *n = theta * *n + (1.0 - theta) * o;
            }
        }
        let diff: Vec<f64> = next.iter().zip(&w).map(|(a, b)| a - b).collect();
        let inc_abs = h1_norm(&diff);
        let size = h1_norm(&next);
        let inc = if size > 0.0 { inc_abs / size } else { inc_abs };
        history.push(inc);
        w = next;
        p = p_new;
        if !inc.is_finite() || !size.is_finite() {
            break;
        }
        if inc <= config.tol_rel || inc_abs <= config.tol_abs {
            converged = true;
            break;
        }
    }
    let field = VelocityPressureField::from_parts(space, w, p)?;
    let iterations = history.len();
    let report = finish_report(problem, config, obs, &field, converged, iterations, history, start, true);
    Ok((field, report))
}

#[allow(clippy::too_many_arguments)]
fn finish_report(
    problem: &NsProblem,
    config: &SolveConfig,
    obs: Option<Observations<'_>>,
    field: &VelocityPressureField,
    converged: bool,
    iterations: usize,
    increment_history: Vec<f64>,
    start: Instant,
    with_convection: bool,
) -> SolveReport {
    let finite = field.velocity.iter().chain(&field.pressure).all(|v| v.is_finite());
    let (nonlinear_residual, divergence_l2, pressure_mean) = if finite {
        (
            momentum_residual(problem, config, field, obs, with_convection).unwrap_or(f64::NAN),
            divergence_l2(field, &problem.rule),
            pressure_mean(&problem.space, &field.pressure),
        )
    } else {
        (f64::NAN, f64::NAN, f64::NAN)
    };
    SolveReport {
        converged,
        iterations,
        increment_history,
        nonlinear_residual,
        divergence_l2,
        pressure_mean,
        wall_time_s: start.elapsed().as_secs_f64(),
        condition: None,
    }
}

fn momentum_residual(
    problem: &NsProblem,
    config: &SolveConfig,
    field: &VelocityPressureField,
    obs: Option<Observations<'_>>,
    with_convection: bool,
) -> Result<f64> {
    let space = &problem.space;
    let w = &field.velocity;
    let mut r = assemble_stiffness(space, config.nu, &problem.rule).matvec(w);
    if with_convection {
        let c = assemble_convection_coeffs(space, w, config.skew(), &problem.rule);
        for (a, b) in r.iter_mut().zip(c.matvec(w)) {
            *a += b;
        }
    }
    let bt_p = assemble_divergence(space, &problem.rule).matvec_transpose(&field.pressure);
    for ((a, b), f) in r.iter_mut().zip(bt_p).zip(&problem.load) {
        *a -= b + f;
    }
    if let Some(o) = obs.filter(|_| config.mu > 0.0) {
        let n = assemble_nudging(o.op, config.mu, config.variant)?;
        for ((a, nw), g) in r.iter_mut().zip(n.apply(w)).zip(n.rhs(o.coarse)) {
            *a += nw - g;
        }
    }
    for &d in &space.boundary_velocity_dofs {
        r[d] = 0.0;
    }
    Ok(norm(&r))
}

/// Nonlinear momentum residual of `field` for the nudged problem.
pub fn nonlinear_residual(
    problem: &NsProblem,
    config: &SolveConfig,
    field: &VelocityPressureField,
    obs: Option<Observations<'_>>,
) -> Result<f64> {
    field.ensure_space(&problem.space)?;
    momentum_residual(problem, config, field, obs, true)
}

/// Continuation in viscosity: solves at each `nu` in `path` with the
/// previous solution as initial guess, keeping the load fixed. Returns the
/// final solution and every report.
pub fn viscosity_ramp(
    problem: &NsProblem,
    config: &SolveConfig,
    path: &[f64],
    obs: Option<Observations<'_>>,
) -> Result<(VelocityPressureField, Vec<SolveReport>)> {
    if path.is_empty() {
        return Err(invalid("continuation path is empty"));
    }
    let mut cfg = config.clone();
    let mut reports = Vec::with_capacity(path.len());
    let mut last = None;
    for &nu in path {
        cfg.nu = nu;
        let (field, report) = solve_cda_nse(problem, &cfg, obs)?;
        cfg.initial_guess = InitialGuess::Given(field.velocity.clone());
        reports.push(report);
        last = Some(field);
    }
    Ok((last.expect("non-empty path"), reports))
}

/// H1 seminorm `‖∇v‖` of a velocity coefficient vector.
pub fn h1_seminorm(space: &TaylorHoodSpace, v: &[f64], rule: &QuadratureRule) -> f64 {
    assemble_stiffness(space, 1.0, rule).quadratic(v).max(0.0).sqrt()
}
