//! Closed-form quantities of the a priori bound and the uniqueness
//! conditions for the nudged problem, and a numerical check of the energy
//! argument behind them.

use std::sync::Arc;

use serde::{Deserialize, Serialize, Serializer};

use crate::assembly::{assemble_convection_coeffs, assemble_stiffness, assemble_velocity_mass};
use crate::error::{invalid, Result};
use crate::observation::ObservationOperator;
use crate::quadrature::QuadratureRule;
use crate::spaces::{TaylorHoodSpace, VelocityPressureField};

/// Where a set of constants came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Placeholder value 1.0; not derived from the domain.
    #[default]
    Nominal,
    User,
    /// Measured by [`crate::observation::estimate_ci`].
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    /// Trilinear-form bound constants.
    pub m: f64,
    pub m1: f64,
    pub m2: f64,
    pub c_i: f64,
    pub constants: Provenance,
    pub c_i_source: Provenance,
}

impl TheoryConstants {
    /// `M = M1 = M2 = 1` (nominal) with a measured `C_I`.
    pub fn nominal(c_i: f64) -> Self {
        TheoryConstants { m: 1.0, m1: 1.0, m2: 1.0, c_i, constants: Provenance::Nominal, c_i_source: Provenance::Estimated }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("M", self.m), ("M1", self.m1), ("M2", self.m2), ("C_I", self.c_i)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }
}

fn ser_extended<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub alpha: f64,
    /// The dual norm of the forcing, when the report was built from one.
    pub f_dual_norm: Option<f64>,
    /// Set when `f_dual_norm` is a discrete estimate.
    pub f_dual_norm_is_estimate: bool,
    /// Fine mesh size the estimate was computed on.
    pub f_dual_norm_mesh_h: Option<f64>,
    pub nu: f64,
    #[serde(rename = "H")]
    pub h: f64,
    pub mu: f64,
    pub lambda: f64,
    #[serde(serialize_with = "ser_extended")]
    pub h_max_general: f64,
    #[serde(serialize_with = "ser_extended")]
    pub h_max_2d: f64,
    pub mu_min: f64,
    pub small_data: bool,
    pub condition_satisfied_general: bool,
    pub condition_satisfied_2d: bool,
    pub constants: TheoryConstants,
}

/// `α = M ν⁻² ‖f‖`.
pub fn compute_alpha(nu: f64, f_dual_norm: f64, m: f64) -> Result<f64> {
    if !(nu > 0.0) {
        return Err(invalid(format!("viscosity must be positive, got {nu}")));
    }
    if !(m > 0.0) {
        return Err(invalid(format!("M must be positive, got {m}")));
    }
    if !(f_dual_norm >= 0.0) {
        return Err(invalid(format!("dual norm must be non-negative, got {f_dual_norm}")));
    }
    Ok(m * f_dual_norm / (nu * nu))
}

/// `ν / (4 C_I² H²)`.
pub fn mu_min(nu: f64, c_i: f64, h: f64) -> f64 {
    nu / (4.0 * c_i * c_i * h * h)
}

/// `min(ν / (4 C_I² H²), μ)`.
pub fn lambda(nu: f64, c_i: f64, h: f64, mu: f64) -> f64 {
    mu_min(nu, c_i, h).min(mu)
}

/// Evaluates the resolution and nudging conditions for given `(H, μ)`.
pub fn theorem_bounds(constants: &TheoryConstants, alpha: f64, nu: f64, h: f64, mu: f64) -> Result<ConditionReport> {
    constants.validate()?;
    if !(alpha >= 0.0) {
        return Err(invalid(format!("alpha must be non-negative, got {alpha}")));
    }
    if !(nu > 0.0 && h > 0.0 && mu >= 0.0) {
        return Err(invalid(format!("need nu > 0, H > 0, mu >= 0 (got {nu}, {h}, {mu})")));
    }
    let TheoryConstants { m, m1, m2, c_i, .. } = *constants;
    let small_data = alpha < 1.0;
    let mu_min = mu_min(nu, c_i, h);
    let (h_max_general, h_max_2d) = if small_data {
        (f64::INFINITY, f64::INFINITY)
    } else {
        (
            2.0 * m * m / (3.0 * 3f64.sqrt() * c_i * m1 * m1 * alpha * alpha),
            m / (2.0 * c_i * m2 * alpha),
        )
    };
    let nudged_enough = mu >= mu_min;
    Ok(ConditionReport {
        alpha,
        f_dual_norm: None,
        f_dual_norm_is_estimate: false,
        f_dual_norm_mesh_h: None,
        nu,
        h,
        mu,
        lambda: mu_min.min(mu),
        h_max_general,
        h_max_2d,
        mu_min,
        small_data,
        condition_satisfied_general: small_data || (h <= h_max_general && nudged_enough),
        condition_satisfied_2d: small_data || (h <= h_max_2d && nudged_enough),
        constants: *constants,
    })
}

/// [`compute_alpha`] followed by [`theorem_bounds`], recording the dual norm.
pub fn condition_report(
    constants: &TheoryConstants,
    nu: f64,
    f_dual_norm: f64,
    estimate_mesh_h: Option<f64>,
    h: f64,
    mu: f64,
) -> Result<ConditionReport> {
    let alpha = compute_alpha(nu, f_dual_norm, constants.m)?;
    let mut report = theorem_bounds(constants, alpha, nu, h, mu)?;
    report.f_dual_norm = Some(f_dual_norm);
    report.f_dual_norm_is_estimate = estimate_mesh_h.is_some();
    report.f_dual_norm_mesh_h = estimate_mesh_h;
    Ok(report)
}

/// Terms of the energy identity for `e = w − u` and its lower bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProofChainRecord {
    pub grad_e_sq: f64,
    pub obs_e_sq: f64,
    pub e_sq: f64,
    /// `ν‖∇e‖² + μ‖I_H e‖²`
    pub energy: f64,
    /// `−b̃(e, u, e)`
    pub convective_transfer: f64,
    /// `(3ν/4)‖∇e‖² + (λ/2)‖e‖²`
    pub lower_bound: f64,
    /// `energy − convective_transfer`; zero for exact solution pairs.
    pub identity_slack: f64,
    /// `energy − lower_bound`; non-negative whenever `C_I` bounds `e`.
    pub lower_bound_slack: f64,
    /// `ν‖∇e‖² + μ‖I_H e‖² + |b̃(e, u, e)|`, a natural size for the slacks.
    pub scale: f64,
}

/// Evaluates both sides of the energy identity for the nudged error
/// `e = w − u` and the coercivity lower bound that follows from the
/// interpolation inequality.
pub fn proof_chain_check(
    w: &VelocityPressureField,
    u: &VelocityPressureField,
    constants: &TheoryConstants,
    nu: f64,
    mu: f64,
    op: &ObservationOperator,
    rule: &QuadratureRule,
) -> Result<ProofChainRecord> {
    let space: &Arc<TaylorHoodSpace> = &op.fine_space;
    w.ensure_space(space)?;
    u.ensure_space(space)?;
    constants.validate()?;
    let e: Vec<f64> = w.velocity.iter().zip(&u.velocity).map(|(a, b)| a - b).collect();
    let grad_e_sq = assemble_stiffness(space, 1.0, rule).quadratic(&e);
    let e_sq = assemble_velocity_mass(space, rule).quadratic(&e);
    let obs_e_sq = op.coarse_norm_sq(&op.apply(&e));
    let c = assemble_convection_coeffs(space, &e, true, rule);
    let b = c.bilinear(&e, &u.velocity);
    let energy = nu * grad_e_sq + mu * obs_e_sq;
    let lam = lambda(nu, constants.c_i, op.h_coarse, mu);
    let lower_bound = 0.75 * nu * grad_e_sq + 0.5 * lam * e_sq;
    Ok(ProofChainRecord {
        grad_e_sq,
        obs_e_sq,
        e_sq,
        energy,
        convective_transfer: -b,
        lower_bound,
        identity_slack: energy + b,
        lower_bound_slack: energy - lower_bound,
        scale: energy + b.abs(),
    })
}
