//! Observation operator `I_H` from the fine P2 velocity space onto a coarse
//! two-component P1 space, and the nudging term built from it.
//!
//! Coarse coefficients follow the same blocked layout as the fine velocity:
//! all x-values at the coarse vertices, then all y-values.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Lu;
use faer::sparse::{SparseColMat, SymbolicSparseColMat};
use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::assembly::{assemble_p1_mass, assemble_stiffness, block_diagonal2};
use crate::error::{invalid, Error, Result};
use crate::mesh::{Point, Rect, StructuredTriMesh};
use crate::quadrature::QuadratureRule;
use crate::sparse::{SparseMatrix, TripletBuilder};
use crate::spaces::{p2_values, velocity_value, TaylorHoodSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationMode {
    /// `I_H v = Σ v(x_H^j) φ_j`
    #[default]
    NodalInterp,
    /// L2 projection onto the coarse P1 space.
    L2Projection,
}

/// Which inner product the nudging term uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NudgingVariant {
    /// `μ (I_H w − I_H u, I_H v)`
    #[default]
    IhIh,
    /// `μ (I_H w − I_H u, v)`
    IhV,
}

enum Realization {
    Nodal { restriction: SparseMatrix },
    Projection { coarse_mass_lu: Lu<usize, f64> },
}

pub struct ObservationOperator {
    pub mode: ObservationMode,
    pub coarse_mesh: Arc<StructuredTriMesh>,
    pub fine_space: Arc<TaylorHoodSpace>,
    /// Observation resolution `H` (largest coarse cell side).
    pub h_coarse: f64,
    /// Two-component coarse P1 mass matrix `M_H`.
    pub coarse_mass: SparseMatrix,
    /// `X[j, i] = ∫ φ_j^H ψ_i^h`, coarse rows by fine velocity columns.
    pub cross_mass: SparseMatrix,
    realization: Realization,
}

impl std::fmt::Debug for ObservationOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ObservationOperator")
            .field("mode", &self.mode)
            .field("coarse", &(self.coarse_mesh.nx, self.coarse_mesh.ny))
            .field("h_coarse", &self.h_coarse)
            .finish()
    }
}

impl ObservationOperator {
    pub fn coarse_dof_count(&self) -> usize {
        2 * self.coarse_mesh.vertex_count()
    }

    /// Coarse coefficients of `I_H v` for fine velocity coefficients `v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.fine_space.velocity_dof_count());
        match &self.realization {
            Realization::Nodal { restriction } => restriction.matvec(v),
            Realization::Projection { coarse_mass_lu } => {
                let rhs = self.cross_mass.matvec(v);
                self.solve_coarse_mass(coarse_mass_lu, &rhs)
            }
        }
    }

    /// Explicit restriction matrix, available in nodal mode.
    pub fn restriction(&self) -> Option<&SparseMatrix> {
        match &self.realization {
            Realization::Nodal { restriction } => Some(restriction),
            Realization::Projection { .. } => None,
        }
    }

    /// Fine load vector `g` with `g·v = (c_H, I_H v)` for a coarse field `c`.
    pub fn pair_with_observed(&self, coarse: &[f64]) -> Vec<f64> {
        assert_eq!(coarse.len(), self.coarse_dof_count());
        match &self.realization {
            Realization::Nodal { restriction } => restriction.matvec_transpose(&self.coarse_mass.matvec(coarse)),
            // (c, M⁻¹X v)_M = cᵀ X v
            Realization::Projection { .. } => self.cross_mass.matvec_transpose(coarse),
        }
    }

    /// Fine load vector `g` with `g·v = (c_H, v)`.
    pub fn pair_with_fine(&self, coarse: &[f64]) -> Vec<f64> {
        self.cross_mass.matvec_transpose(coarse)
    }

    /// `‖c_H‖²` in L2 for coarse coefficients.
    pub fn coarse_norm_sq(&self, coarse: &[f64]) -> f64 {
        self.coarse_mass.quadratic(coarse)
    }

    /// Value of a coarse P1 field at `p`.
    pub fn evaluate_coarse(&self, coarse: &[f64], p: Point) -> Result<[f64; 2]> {
        let loc = self.coarse_mesh.locate_point(p)?;
        let tri = self.coarse_mesh.triangles[loc.triangle];
        let nv = self.coarse_mesh.vertex_count();
        let mut out = [0.0; 2];
        for k in 0..3 {
            out[0] += loc.bary[k] * coarse[tri[k]];
            out[1] += loc.bary[k] * coarse[nv + tri[k]];
        }
        Ok(out)
    }

    /// Coarse nodal coefficients of an analytic field.
    pub fn coarse_interpolant<F: Fn(Point) -> [f64; 2]>(&self, f: F) -> Vec<f64> {
        let nv = self.coarse_mesh.vertex_count();
        let mut out = vec![0.0; 2 * nv];
        for (j, &p) in self.coarse_mesh.vertices.iter().enumerate() {
            let v = f(p);
            out[j] = v[0];
            out[nv + j] = v[1];
        }
        out
    }

    /// `‖I_H v − v‖` evaluated by quadrature on the fine mesh.
    pub fn interpolation_error(&self, v: &[f64], rule: &QuadratureRule) -> f64 {
        let coarse = self.apply(v);
        let space = &self.fine_space;
        let mut acc = 0.0;
        for t in 0..space.mesh.triangle_count() {
            let geom = space.geometry(t);
            for (l, w) in rule.iter() {
                let fine = velocity_value(v, space, t, &p2_values(l));
                let obs = self.evaluate_coarse(&coarse, geom.point(l)).expect("fine point inside coarse mesh");
                let (dx, dy) = (obs[0] - fine[0], obs[1] - fine[1]);
                acc += 2.0 * geom.area * w * (dx * dx + dy * dy);
            }
        }
        acc.sqrt()
    }

    fn solve_coarse_mass(&self, lu: &Lu<usize, f64>, rhs: &[f64]) -> Vec<f64> {
        let nv = self.coarse_mesh.vertex_count();
        let mut b = Mat::from_fn(nv, 2, |i, c| rhs[c * nv + i]);
        lu.solve_in_place(b.as_mut());
        let mut out = vec![0.0; 2 * nv];
        for c in 0..2 {
            for i in 0..nv {
                out[c * nv + i] = b[(i, c)];
            }
        }
        out
    }
}

/// Builds `I_H` from `coarse_mesh` onto `fine_space`.
pub fn build_observation(
    coarse_mesh: Arc<StructuredTriMesh>,
    fine_space: Arc<TaylorHoodSpace>,
    mode: ObservationMode,
    rule: &QuadratureRule,
) -> Result<ObservationOperator> {
    if !coarse_mesh.domain.approx_eq(&fine_space.mesh.domain, 1e-12) {
        return Err(invalid(format!(
            "coarse domain {:?} differs from fine domain {:?}",
            coarse_mesh.domain, fine_space.mesh.domain
        )));
    }
    let scalar_mass = assemble_p1_mass(&coarse_mesh, rule);
    let coarse_mass = block_diagonal2(&scalar_mass);
    let cross_mass = assemble_cross_mass(&coarse_mesh, &fine_space, rule)?;
    let realization = match mode {
        ObservationMode::NodalInterp => Realization::Nodal { restriction: nodal_restriction(&coarse_mesh, &fine_space)? },
        ObservationMode::L2Projection => Realization::Projection { coarse_mass_lu: factor_spd(&scalar_mass)? },
    };
    Ok(ObservationOperator {
        mode,
        h_coarse: coarse_mesh.spacing(),
        coarse_mesh,
        fine_space,
        coarse_mass,
        cross_mass,
        realization,
    })
}

fn nodal_restriction(coarse: &StructuredTriMesh, fine: &TaylorHoodSpace) -> Result<SparseMatrix> {
    let nv = coarse.vertex_count();
    let n2 = fine.p2_node_count();
    let mut b = TripletBuilder::with_capacity(2 * nv, 2 * n2, 12 * nv);
    for c in 0..2 {
        for (j, &p) in coarse.vertices.iter().enumerate() {
            let loc = fine.mesh.locate_point(p)?;
            let phi = p2_values(&loc.bary);
            for (k, &node) in fine.element_nodes[loc.triangle].iter().enumerate() {
                if phi[k] != 0.0 {
                    b.push(c * nv + j, c * n2 + node, phi[k]);
                }
            }
        }
    }
    Ok(b.finalize())
}

fn assemble_cross_mass(coarse: &StructuredTriMesh, fine: &TaylorHoodSpace, rule: &QuadratureRule) -> Result<SparseMatrix> {
    let nv = coarse.vertex_count();
    let n2 = fine.p2_node_count();
    let mut scalar = TripletBuilder::with_capacity(nv, n2, 18 * rule.len() * fine.mesh.triangle_count());
    for t in 0..fine.mesh.triangle_count() {
        let geom = fine.geometry(t);
        let nodes = &fine.element_nodes[t];
        for (l, w) in rule.iter() {
            let phi = p2_values(l);
            let loc = coarse.locate_point(geom.point(l))?;
            let tri = coarse.triangles[loc.triangle];
            let s = 2.0 * geom.area * w;
            for a in 0..3 {
                for i in 0..6 {
                    scalar.push(tri[a], nodes[i], s * loc.bary[a] * phi[i]);
                }
            }
        }
    }
    Ok(block_diagonal2(&scalar.finalize()))
}

fn factor_spd(m: &SparseMatrix) -> Result<Lu<usize, f64>> {
    let t = m.transpose();
    let sym = SymbolicSparseColMat::new_checked(m.nrows, m.ncols, t.indptr, None, t.indices);
    let csc = SparseColMat::new(sym, t.values);
    csc.sp_lu().map_err(|e| Error::LinearSolve(format!("coarse mass factorization failed: {e:?}")))
}

/// The nudging term `μ (I_H w − I_H u, ·)` assembled for one operator.
pub struct Nudging<'a> {
    pub op: &'a ObservationOperator,
    pub mu: f64,
    pub variant: NudgingVariant,
    /// `N` when it is sparse; `None` for the L2-projection operator, whose
    /// `N = μ Xᵀ M_H⁻¹ X` is dense and is applied through an auxiliary
    /// coarse unknown instead.
    pub matrix: Option<SparseMatrix>,
}

impl Nudging<'_> {
    /// `N w`.
    pub fn apply(&self, w: &[f64]) -> Vec<f64> {
        if let Some(m) = &self.matrix {
            return m.matvec(w);
        }
        let coarse = self.op.apply(w);
        let mut out = match self.variant {
            NudgingVariant::IhIh => self.op.pair_with_observed(&coarse),
            NudgingVariant::IhV => self.op.pair_with_fine(&coarse),
        };
        out.iter_mut().for_each(|v| *v *= self.mu);
        out
    }

    /// `vᵀ N v`.
    pub fn quadratic(&self, v: &[f64]) -> f64 {
        self.apply(v).iter().zip(v).map(|(a, b)| a * b).sum()
    }

    /// Right-hand side contributed by observed coarse coefficients.
    pub fn rhs(&self, observed_coarse: &[f64]) -> Vec<f64> {
        let mut out = match self.variant {
            NudgingVariant::IhIh => self.op.pair_with_observed(observed_coarse),
            NudgingVariant::IhV => self.op.pair_with_fine(observed_coarse),
        };
        out.iter_mut().for_each(|v| *v *= self.mu);
        out
    }

    /// Right-hand side for observations given as a fine velocity field.
    pub fn rhs_from_fine(&self, u_obs: &[f64]) -> Vec<f64> {
        self.rhs(&self.op.apply(u_obs))
    }
}

/// Assembles `N = μ Rᵀ M_H R` (or `μ Xᵀ R` for the [`NudgingVariant::IhV`]
/// form).
pub fn assemble_nudging(op: &ObservationOperator, mu: f64, variant: NudgingVariant) -> Result<Nudging<'_>> {
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(invalid(format!("nudging parameter must be non-negative, got {mu}")));
    }
    let matrix = match op.restriction() {
        Some(r) => {
            let left = match variant {
                NudgingVariant::IhIh => op.coarse_mass.matmul(r),
                NudgingVariant::IhV => op.cross_mass.clone(),
            };
            let rt = match variant {
                NudgingVariant::IhIh => r.transpose(),
                NudgingVariant::IhV => left.transpose(),
            };
            let right = match variant {
                NudgingVariant::IhIh => left,
                NudgingVariant::IhV => r.clone(),
            };
            Some(rt.matmul(&right).scaled(mu))
        }
        None => None,
    };
    Ok(Nudging { op, mu, variant, matrix })
}

/// Analytic probe used to estimate the interpolation constant.
#[derive(Clone)]
pub struct Probe {
    pub name: String,
    pub field: Arc<dyn Fn(Point) -> [f64; 2] + Send + Sync>,
}

impl std::fmt::Debug for Probe {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Probe").field("name", &self.name).finish()
    }
}

impl Probe {
    pub fn new(name: impl Into<String>, f: impl Fn(Point) -> [f64; 2] + Send + Sync + 'static) -> Self {
        Probe { name: name.into(), field: Arc::new(f) }
    }
}

/// Sine modes per axis used by [`default_probes`].
pub const PROBE_MODES: [u32; 10] = [1, 2, 3, 4, 6, 8, 12, 16, 24, 32];

/// Documented probe set: the zero-trace trigonometric fields
/// `(sin kπξ sin kπη, 0)` and `(0, sin kπξ sin 2kπη)` for every `k` in
/// [`PROBE_MODES`] that the fine mesh resolves with at least two cells per
/// half-period, plus two zero-trace polynomial bubbles. `ξ, η ∈ [0, 1]` are
/// the normalized domain coordinates.
pub fn default_probes(domain: Rect, fine_spacing: f64) -> Vec<Probe> {
    let norm = move |p: Point| ((p[0] - domain.x0) / domain.width(), (p[1] - domain.y0) / domain.height());
    let scale = domain.width().max(domain.height());
    let mut probes = Vec::new();
    for &k in &PROBE_MODES {
        let kf = f64::from(k);
        if 2.0 * kf * fine_spacing / scale <= 1.0 + 1e-12 {
            probes.push(Probe::new(format!("sin{k}x_sin{k}y"), move |p| {
                let (s, t) = norm(p);
                [(kf * PI * s).sin() * (kf * PI * t).sin(), 0.0]
            }));
        }
        if 4.0 * kf * fine_spacing / scale <= 1.0 + 1e-12 {
            probes.push(Probe::new(format!("sin{k}x_sin{}y", 2 * k), move |p| {
                let (s, t) = norm(p);
                [0.0, (kf * PI * s).sin() * (2.0 * kf * PI * t).sin()]
            }));
        }
    }
    probes.push(Probe::new("bubble", move |p| {
        let (s, t) = norm(p);
        let b = s * (1.0 - s) * t * (1.0 - t);
        [b, s * b]
    }));
    probes.push(Probe::new("bubble_sq", move |p| {
        let (s, t) = norm(p);
        [s * s * (1.0 - s) * (1.0 - s) * t * (1.0 - t), 0.0]
    }));
    probes
}

/// Result of [`estimate_ci`].
#[derive(Debug, Clone, Serialize)]
pub struct InterpolationEstimate {
    pub c_i: f64,
    pub h_coarse: f64,
    /// `(probe name, ratio)` for every probe that was not skipped.
    pub ratios: Vec<(String, f64)>,
}

/// Max over probes of `‖I_H v − v‖ / (H ‖∇v‖)` with every norm taken on the
/// fine space interpolant `v` of the probe.
pub fn estimate_ci(op: &ObservationOperator, probes: &[Probe], rule: &QuadratureRule) -> Result<InterpolationEstimate> {
    let space = &op.fine_space;
    let stiffness = assemble_stiffness(space, 1.0, rule);
    let mut ratios = Vec::new();
    for probe in probes {
        let v = space.interpolate_velocity(|p| (probe.field)(p));
        let grad = stiffness.quadratic(&v).max(0.0).sqrt();
        if grad <= 1e-14 {
            continue;
        }
        let err = op.interpolation_error(&v, rule);
        ratios.push((probe.name.clone(), err / (op.h_coarse * grad)));
    }
    if ratios.is_empty() {
        return Err(invalid("every probe has zero gradient"));
    }
    let c_i = ratios.iter().fold(0.0f64, |m, (_, r)| m.max(*r));
    Ok(InterpolationEstimate { c_i, h_coarse: op.h_coarse, ratios })
}

/// Reads observed coarse nodal values from a CSV file with columns
/// `x, y, u1, u2`. Every coarse vertex must appear exactly once, matched
/// within `1e-10`.
pub fn load_observation_csv(path: &Path, coarse: &StructuredTriMesh) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_path(path).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| invalid(format!("{}: missing column '{name}'", path.display())))
    };
    let (cx, cy, cu1, cu2) = (col("x")?, col("y")?, col("u1")?, col("u2")?);
    let nv = coarse.vertex_count();
    let mut out = vec![0.0; 2 * nv];
    let mut seen = vec![false; nv];
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let num = |c: usize| -> Result<f64> {
            record
                .get(c)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| invalid(format!("{}: record {}: bad number in column {c}", path.display(), line + 1)))
        };
        let p = [num(cx)?, num(cy)?];
        let loc = coarse.locate_point(p)?;
        let tri = coarse.triangles[loc.triangle];
        let j = tri
            .iter()
            .copied()
            .find(|&v| {
                let q = coarse.vertices[v];
                (q[0] - p[0]).abs() <= 1e-10 && (q[1] - p[1]).abs() <= 1e-10
            })
            .ok_or_else(|| invalid(format!("{}: record {}: ({}, {}) is not a coarse node", path.display(), line + 1, p[0], p[1])))?;
        if seen[j] {
            return Err(invalid(format!("{}: duplicate coarse node ({}, {})", path.display(), p[0], p[1])));
        }
        seen[j] = true;
        out[j] = num(cu1)?;
        out[nv + j] = num(cu2)?;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        let p = coarse.vertices[missing];
        return Err(invalid(format!("{}: no value for coarse node ({}, {})", path.display(), p[0], p[1])));
    }
    Ok(out)
}

/// Writes coarse nodal values in the format read by [`load_observation_csv`].
pub fn write_observation_csv(path: &Path, coarse: &StructuredTriMesh, values: &[f64]) -> Result<()> {
    let nv = coarse.vertex_count();
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["x", "y", "u1", "u2"]).map_err(csv_err)?;
    for (j, p) in coarse.vertices.iter().enumerate() {
        w.write_record([p[0], p[1], values[j], values[nv + j]].map(|v| format!("{v:.17e}"))).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => invalid(format!("csv: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::unit_square;
    use crate::spaces::build_taylor_hood;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(nf: usize, nc: usize, mode: ObservationMode) -> ObservationOperator {
        let fine = build_taylor_hood(Arc::new(unit_square(nf).unwrap()));
        build_observation(Arc::new(unit_square(nc).unwrap()), fine, mode, &QuadratureRule::degree4()).unwrap()
    }

    const MODES: [ObservationMode; 2] = [ObservationMode::NodalInterp, ObservationMode::L2Projection];

    #[test]
    fn nodal_on_own_vertices_is_identity() {
        let op = setup(4, 4, ObservationMode::NodalInterp);
        let s = &op.fine_space;
        let v = s.interpolate_velocity(|p| [p[0] + 2.0 * p[1], p[0] * p[1]]);
        let c = op.apply(&v);
        let nv = s.mesh.vertex_count();
        let n2 = s.p2_node_count();
        for j in 0..nv {
            assert!((c[j] - v[j]).abs() < 1e-15);
            assert!((c[nv + j] - v[n2 + j]).abs() < 1e-15);
        }
    }

    #[test]
    fn constants_and_linears_reproduced() {
        for mode in MODES {
            let op = setup(8, 2, mode);
            let s = &op.fine_space;
            for f in [|_p: Point| [1.0, 0.0], |p: Point| [2.0 * p[0] - p[1], 0.5 + p[1]]] {
                let c = op.apply(&s.interpolate_velocity(f));
                let expect = op.coarse_interpolant(f);
                for (a, b) in c.iter().zip(&expect) {
                    assert!((a - b).abs() < 1e-12, "{mode:?}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn nodal_mode_samples_fine_field() {
        let op = setup(8, 2, ObservationMode::NodalInterp);
        let s = &op.fine_space;
        let v = s.interpolate_velocity(|p| [p[0] * p[0], 0.0]);
        let c = op.apply(&v);
        for (j, p) in op.coarse_mesh.vertices.iter().enumerate() {
            assert!((c[j] - p[0] * p[0]).abs() < 1e-15);
        }
        // non-nested coarse nodes are fine-field samples too
        let op = setup(7, 3, ObservationMode::NodalInterp);
        let f = crate::spaces::interpolate_function(&op.fine_space, |p| [p[0].sin() * p[1], p[1].exp()], |_| 0.0);
        let c = op.apply(&f.velocity);
        let nv = op.coarse_mesh.vertex_count();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let j = rng.random_range(0..nv);
            let (u, _) = f.evaluate(op.coarse_mesh.vertices[j]).unwrap();
            assert!((c[j] - u[0]).abs() < 1e-12 && (c[nv + j] - u[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn domain_mismatch_rejected() {
        let fine = build_taylor_hood(Arc::new(unit_square(4).unwrap()));
        let coarse = Arc::new(crate::mesh::build_rect_mesh(2, 2, Rect::new(0.0, 0.0, 2.0, 1.0)).unwrap());
        assert!(build_observation(coarse, fine, ObservationMode::NodalInterp, &QuadratureRule::degree4()).is_err());
    }

    #[test]
    fn nudging_examples() {
        for mode in MODES {
            let op = setup(6, 3, mode);
            let n0 = assemble_nudging(&op, 0.0, NudgingVariant::IhIh).unwrap();
            let v = op.fine_space.interpolate_velocity(|p| [p[0].cos(), p[1]]);
            assert!(n0.apply(&v).iter().all(|&x| x == 0.0));
            let n1 = assemble_nudging(&op, 1.0, NudgingVariant::IhIh).unwrap();
            let one = op.fine_space.interpolate_velocity(|_| [1.0, 0.0]);
            assert!((n1.quadratic(&one) - 1.0).abs() < 1e-12);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            for _ in 0..20 {
                let r: Vec<f64> = (0..v.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                assert!(n1.quadratic(&r) >= -1e-13);
            }
            assert!(assemble_nudging(&op, -1.0, NudgingVariant::IhIh).is_err());
        }
    }

    #[test]
    fn nudging_matrix_symmetric_and_consistent() {
        let op = setup(6, 3, ObservationMode::NodalInterp);
        let n = assemble_nudging(&op, 2.5, NudgingVariant::IhIh).unwrap();
        let m = n.matrix.as_ref().unwrap();
        assert!(m.symmetry_defect() < 1e-12);
        let w = op.fine_space.interpolate_velocity(|p| [p[0] * p[1], p[1].sin()]);
        let nw = n.apply(&w);
        let rhs = n.rhs_from_fine(&w);
        for (a, b) in nw.iter().zip(&rhs) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn variants_agree_for_projection() {
        let op = setup(6, 2, ObservationMode::L2Projection);
        let a = assemble_nudging(&op, 3.0, NudgingVariant::IhIh).unwrap();
        let b = assemble_nudging(&op, 3.0, NudgingVariant::IhV).unwrap();
        let w = op.fine_space.interpolate_velocity(|p| [p[0].exp(), p[0] * p[1] * p[1]]);
        for (x, y) in a.apply(&w).iter().zip(&b.apply(&w)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ih_v_variant_matrix_matches_apply() {
        let op = setup(6, 3, ObservationMode::NodalInterp);
        let n = assemble_nudging(&op, 1.5, NudgingVariant::IhV).unwrap();
        let w = op.fine_space.interpolate_velocity(|p| [p[1].cos(), p[0]]);
        let by_matrix = n.apply(&w);
        let coarse = op.apply(&w);
        let by_parts: Vec<f64> = op.pair_with_fine(&coarse).iter().map(|v| 1.5 * v).collect();
        for (a, b) in by_matrix.iter().zip(&by_parts) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn projection_is_idempotent_on_coarse_fields() {
        let op = setup(8, 4, ObservationMode::L2Projection);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let nv = op.coarse_mesh.vertex_count();
        let coarse: Vec<f64> = (0..2 * nv).map(|_| rng.random_range(-1.0..1.0)).collect();
        // inject the coarse P1 field into the fine space: nested meshes make
        // this exact
        let fine = op.fine_space.interpolate_velocity(|p| op.evaluate_coarse(&coarse, p).unwrap());
        let back = op.apply(&fine);
        for (a, b) in back.iter().zip(&coarse) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ci_zero_for_linears_and_coarse_fields() {
        for mode in MODES {
            let op = setup(8, 4, mode);
            let rule = QuadratureRule::degree4();
            let probes = vec![Probe::new("lin", |p| [p[0] - p[1], 2.0 * p[1]])];
            let est = estimate_ci(&op, &probes, &rule).unwrap();
            assert!(est.c_i < 1e-12, "{mode:?}: {}", est.c_i);
        }
        let op = setup(8, 2, ObservationMode::NodalInterp);
        let rule = QuadratureRule::degree4();
        let mut c = vec![0.0; op.coarse_dof_count()];
        c[4] = 1.0;
        let probe = {
            let cc = c.clone();
            let mesh = Arc::clone(&op.coarse_mesh);
            Probe::new("coarse_basis", move |p| {
                let loc = mesh.locate_point(p).unwrap();
                let tri = mesh.triangles[loc.triangle];
                let mut v = 0.0;
                for k in 0..3 {
                    v += loc.bary[k] * cc[tri[k]];
                }
                [v, 0.0]
            })
        };
        let est = estimate_ci(&op, &[probe], &rule).unwrap();
        assert!(est.c_i < 1e-12);
    }

    #[test]
    fn ci_rejects_all_constant_probes() {
        let op = setup(4, 2, ObservationMode::NodalInterp);
        let probes = vec![Probe::new("c", |_| [1.0, 2.0])];
        assert!(estimate_ci(&op, &probes, &QuadratureRule::degree4()).is_err());
    }

    #[test]
    fn observation_csv_roundtrip_and_validation() {
        let op = setup(4, 2, ObservationMode::NodalInterp);
        let dir = std::env::temp_dir().join(format!("cda-obs-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("obs.csv");
        let vals = op.coarse_interpolant(|p| [p[0] + 0.1, -p[1]]);
        write_observation_csv(&path, &op.coarse_mesh, &vals).unwrap();
        let back = load_observation_csv(&path, &op.coarse_mesh).unwrap();
        assert_eq!(back, vals);
        std::fs::write(&path, "x,y,u1,u2\n0.25,0.0,1,2\n").unwrap();
        assert!(load_observation_csv(&path, &op.coarse_mesh).is_err());
        std::fs::write(&path, "x,y,u1\n0,0,1\n").unwrap();
        assert!(load_observation_csv(&path, &op.coarse_mesh).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
