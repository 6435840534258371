//! Execution of a validated experiment: shared setup, the per-cell work
//! (run concurrently), and the artifacts written to the output directory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use cda_nse::analysis::{dual_norm_estimate, error_vs_exact, ErrorReport, ErrorRow, FieldErrors};
use cda_nse::mesh::{build_rect_mesh, StructuredTriMesh};
use cda_nse::mms::{builtin, ManufacturedSolution};
use cda_nse::observation::{build_observation, default_probes, estimate_ci, load_observation_csv, ObservationOperator};
use cda_nse::quadrature::QuadratureRule;
use cda_nse::solver::{
    h1_seminorm, solve_cda_nse, solve_nse, solve_stokes, InitialGuess, NsProblem, Observations, SolveConfig,
    SolveReport,
};
use cda_nse::spaces::{TaylorHoodSpace, VelocityPressureField};
use cda_nse::theory::{condition_report, ConditionReport, Provenance, TheoryConstants};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{cells_per_side, Equations, Experiment, ExperimentConfig, GuessKind};
use crate::CliError;

/// What a run left on disk.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub cells: usize,
    pub failed_cells: usize,
    pub non_converged_cells: usize,
    pub results_csv: Option<PathBuf>,
    pub report_json: PathBuf,
}

/// One cell of a nudged sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub cell: usize,
    pub solution: String,
    pub mode: String,
    pub h: f64,
    #[serde(rename = "H")]
    pub coarse_h: f64,
    #[serde(rename = "Re")]
    pub re: f64,
    pub nu: f64,
    pub mu_spec: String,
    pub mu: f64,
    pub mu_min: f64,
    pub c_i: f64,
    pub f_dual_norm: f64,
    pub alpha: f64,
    pub small_data: bool,
    pub lambda: f64,
    pub h_max_2d: f64,
    pub condition_satisfied_2d: bool,
    pub condition_satisfied_general: bool,
    pub converged: bool,
    pub iterations: usize,
    pub final_increment: Option<f64>,
    #[serde(rename = "e_L2_u")]
    pub e_l2_u: Option<f64>,
    #[serde(rename = "e_H1_u")]
    pub e_h1_u: Option<f64>,
    #[serde(rename = "e_L2_p")]
    pub e_l2_p: Option<f64>,
    #[serde(rename = "div_L2")]
    pub div_l2: Option<f64>,
    pub status: String,
    pub message: String,
}

/// One pair of initial guesses within a uniqueness cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairRow {
    pub cell: usize,
    pub solution: String,
    pub mode: String,
    pub h: f64,
    #[serde(rename = "H")]
    pub coarse_h: f64,
    #[serde(rename = "Re")]
    pub re: f64,
    pub mu_spec: String,
    pub mu: f64,
    pub seed: u64,
    pub guess_a: String,
    pub guess_b: String,
    pub converged_a: bool,
    pub converged_b: bool,
    pub iterations_a: usize,
    pub iterations_b: usize,
    pub h1_distance: Option<f64>,
    pub status: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
struct CellRecord {
    cell: usize,
    h: f64,
    #[serde(rename = "H", skip_serializing_if = "Option::is_none")]
    coarse_h: Option<f64>,
    #[serde(rename = "Re")]
    re: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mu_spec: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    condition: Option<ConditionReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    solves: Vec<SolveRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
struct SolveRecord {
    guess: String,
    report: SolveReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    errors: Option<FieldErrors>,
}

#[derive(Serialize)]
struct Report<'a> {
    generated_unix_s: u64,
    config: &'a ExperimentConfig,
    summary: &'a RunSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    convergence: Option<Vec<ErrorReportRecord>>,
    cells: Vec<CellRecord>,
}

#[derive(Serialize)]
struct ErrorReportRecord {
    #[serde(rename = "Re")]
    re: f64,
    report: Option<ErrorReport>,
    error: Option<String>,
}

/// Objects shared by all cells, built once.
struct Setup {
    sol: ManufacturedSolution,
    rule: QuadratureRule,
    spaces: Vec<Arc<TaylorHoodSpace>>,
    /// `[h][H]`
    operators: Vec<Vec<Result<ObservationOperator, String>>>,
    /// `[h][H]`
    c_i: Vec<Vec<Result<f64, String>>>,
    /// `[h][Re]`
    problems: Vec<Vec<Result<NsProblem, String>>>,
    /// `[h][Re]`, with the mesh size of the estimate when estimated
    dual_norms: Vec<Vec<Result<(f64, Option<f64>), String>>>,
    /// `[H]`
    observed: Vec<Option<Result<Vec<f64>, String>>>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn mesh_for(sol: &ManufacturedSolution, h: f64) -> Result<StructuredTriMesh, String> {
    let (nx, ny) = cells_per_side(sol.domain, h)?;
    build_rect_mesh(nx, ny, sol.domain).map_err(|e| e.to_string())
}

impl Setup {
    fn build(config: &ExperimentConfig) -> Result<Setup, CliError> {
        let sol = builtin(&config.solution).map_err(|e| CliError::Config(e.to_string()))?;
        let rule = QuadratureRule::new(config.solver.quadrature);
        let mut spaces = Vec::new();
        for &h in &config.h {
            let mesh = mesh_for(&sol, h).map_err(CliError::Config)?;
            spaces.push(cda_nse::spaces::build_taylor_hood(Arc::new(mesh)));
        }
        let mut coarse = Vec::new();
        for &hc in &config.coarse_h {
            coarse.push(Arc::new(mesh_for(&sol, hc).map_err(CliError::Config)?));
        }
        let res = config.reynolds_numbers();
        let needs_solve_setup = config.experiment != Experiment::ConditionReport;
        let user_ci = config.constants.and_then(|c| c.c_i);

        let operators: Vec<Vec<_>> = spaces
            .par_iter()
            .map(|space| {
                coarse
                    .par_iter()
                    .map(|cm| {
                        build_observation(Arc::clone(cm), Arc::clone(space), config.observation_mode, &rule)
                            .map_err(|e| e.to_string())
                    })
                    .collect()
            })
            .collect();
        let c_i: Vec<Vec<_>> = spaces
            .par_iter()
            .zip(&operators)
            .map(|(space, ops)| {
                ops.par_iter()
                    .map(|op| match (op, user_ci) {
                        (_, Some(c)) => Ok(c),
                        (Ok(op), None) => estimate_ci(op, &default_probes(sol.domain, space.mesh.spacing()), &rule)
                            .map(|e| e.c_i)
                            .map_err(|e| e.to_string()),
                        (Err(e), None) => Err(e.clone()),
                    })
                    .collect()
            })
            .collect();
        let problems: Vec<Vec<_>> = spaces
            .par_iter()
            .map(|space| {
                res.par_iter()
                    .map(|&re| {
                        if !needs_solve_setup {
                            return Err("not built".to_string());
                        }
                        let nu = 1.0 / re;
                        let built = match config.equations {
                            Equations::Stokes if config.experiment == Experiment::MmsConvergence => {
                                NsProblem::manufactured_stokes(space, &sol, nu, config.solver.quadrature)
                            }
                            _ => NsProblem::manufactured(space, &sol, nu, config.solver.quadrature),
                        };
                        built.map_err(|e| e.to_string())
                    })
                    .collect()
            })
            .collect();
        let needs_dual = config.experiment != Experiment::MmsConvergence;
        let dual_norms: Vec<Vec<_>> = spaces
            .par_iter()
            .map(|space| {
                res.par_iter()
                    .map(|&re| {
                        if let Some(f) = config.f_dual_norm {
                            return Ok((f, None));
                        }
                        if !needs_dual {
                            return Err("not needed".to_string());
                        }
                        let f = cda_nse::mms::forcing_from_solution(&sol, 1.0 / re).map_err(|e| e.to_string())?;
                        dual_norm_estimate(f, space, config.solver.quadrature)
                            .map(|d| (d.star, Some(d.h)))
                            .map_err(|e| e.to_string())
                    })
                    .collect()
            })
            .collect();
        let observed = coarse
            .iter()
            .map(|cm| {
                config
                    .observations
                    .as_ref()
                    .map(|p| load_observation_csv(p, cm).map_err(|e| format!("{}: {e}", p.display())))
            })
            .collect();
        Ok(Setup { sol, rule, spaces, operators, c_i, problems, dual_norms, observed })
    }

    fn constants(&self, config: &ExperimentConfig, c_i: f64) -> TheoryConstants {
        match config.constants {
            Some(c) => TheoryConstants {
                m: c.m,
                m1: c.m1,
                m2: c.m2,
                c_i,
                constants: Provenance::User,
                c_i_source: if c.c_i.is_some() { Provenance::User } else { Provenance::Estimated },
            },
            None => TheoryConstants::nominal(c_i),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    index: usize,
    ih: usize,
    ire: usize,
    ic: usize,
    imu: usize,
}

fn nudged_cells(config: &ExperimentConfig) -> Vec<Cell> {
    let (nre, nc, nmu) = (config.reynolds_numbers().len(), config.coarse_h.len(), config.mu_values().len());
    let mut cells = Vec::new();
    for ih in 0..config.h.len() {
        for ire in 0..nre {
            for ic in 0..nc {
                for imu in 0..nmu {
                    cells.push(Cell { index: cells.len(), ih, ire, ic, imu });
                }
            }
        }
    }
    cells
}

/// Resolved parameters of a nudged cell.
struct CellParams<'a> {
    re: f64,
    mu: f64,
    c_i: f64,
    condition: ConditionReport,
    op: &'a ObservationOperator,
    problem: Option<&'a NsProblem>,
}

fn resolve<'a>(setup: &'a Setup, config: &ExperimentConfig, cell: Cell) -> Result<CellParams<'a>, String> {
    let re = config.reynolds_numbers()[cell.ire];
    let nu = 1.0 / re;
    let mu_spec = config.mu_values()[cell.imu];
    let op = setup.operators[cell.ih][cell.ic].as_ref().map_err(Clone::clone)?;
    let c_i = setup.c_i[cell.ih][cell.ic].clone()?;
    let hc = op.h_coarse;
    let mu = mu_spec.resolve(cda_nse::theory::mu_min(nu, c_i, hc));
    let (f_dual, est_h) = setup.dual_norms[cell.ih][cell.ire].clone()?;
    let constants = setup.constants(config, c_i);
    let condition = condition_report(&constants, nu, f_dual, est_h, hc, mu).map_err(|e| e.to_string())?;
    let problem = setup.problems[cell.ih][cell.ire].as_ref().ok();
    Ok(CellParams { re, mu, c_i, condition, op, problem })
}

fn observed_coarse(setup: &Setup, cell: Cell, op: &ObservationOperator) -> Result<Vec<f64>, String> {
    match &setup.observed[cell.ic] {
        Some(loaded) => loaded.clone(),
        None => {
            let exact = setup.spaces[cell.ih].interpolate_velocity(|p| setup.sol.velocity(p));
            Ok(op.apply(&exact))
        }
    }
}

fn solve_nudged(
    problem: &NsProblem,
    config: &ExperimentConfig,
    params: &CellParams<'_>,
    coarse: &[f64],
    guess: InitialGuess,
) -> Result<(VelocityPressureField, SolveReport), String> {
    let cfg = SolveConfig { nu: 1.0 / params.re, mu: params.mu, initial_guess: guess, ..config.solver.clone() };
    let obs = Observations::new(params.op, coarse).map_err(|e| e.to_string())?;
    let (field, mut report) = solve_cda_nse(problem, &cfg, Some(obs)).map_err(|e| e.to_string())?;
    report.condition = Some(params.condition.clone());
    Ok((field, report))
}

/// Exact velocity interpolant plus a random interior perturbation whose
/// H1 seminorm equals `amplitude`. Deterministic in `seed`.
pub fn perturbed_guess(
    space: &Arc<TaylorHoodSpace>,
    sol: &ManufacturedSolution,
    amplitude: f64,
    seed: u64,
    rule: &QuadratureRule,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boundary = space.boundary_velocity_mask();
    let noise: Vec<f64> =
        boundary.iter().map(|&on| if on { 0.0 } else { rng.random_range(-1.0..1.0) }).collect();
    let norm = h1_seminorm(space, &noise, rule);
    let scale = if norm > 0.0 { amplitude / norm } else { 0.0 };
    let mut v = space.interpolate_velocity(|p| sol.velocity(p));
    for (vi, n) in v.iter_mut().zip(&noise) {
        *vi += scale * n;
    }
    v
}

fn write_vtk(dir: &Path, name: &str, field: &VelocityPressureField) -> Result<(), CliError> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| io_err(&path, e))?;
    let mut out = BufWriter::new(file);
    field.write_vtk(&mut out).map_err(|e| io_err(&path, e))?;
    out.flush().map_err(|e| io_err(&path, e))
}

fn sweep_cell(setup: &Setup, config: &ExperimentConfig, cell: Cell, out: &Path) -> (SweepRow, CellRecord) {
    let h = config.h[cell.ih];
    let hc = config.coarse_h[cell.ic];
    let re = config.reynolds_numbers()[cell.ire];
    let mu_spec = config.mu_values()[cell.imu];
    let mut row = SweepRow {
        cell: cell.index,
        solution: config.solution.clone(),
        mode: mode_name(config),
        h,
        coarse_h: hc,
        re,
        nu: 1.0 / re,
        mu_spec: mu_spec.label(),
        mu: f64::NAN,
        mu_min: f64::NAN,
        c_i: f64::NAN,
        f_dual_norm: f64::NAN,
        alpha: f64::NAN,
        small_data: false,
        lambda: f64::NAN,
        h_max_2d: f64::NAN,
        condition_satisfied_2d: false,
        condition_satisfied_general: false,
        converged: false,
        iterations: 0,
        final_increment: None,
        e_l2_u: None,
        e_h1_u: None,
        e_l2_p: None,
        div_l2: None,
        status: "ok".into(),
        message: String::new(),
    };
    let mut record = CellRecord {
        cell: cell.index,
        h,
        coarse_h: Some(hc),
        re,
        mu_spec: Some(mu_spec.label()),
        condition: None,
        solves: Vec::new(),
        error: None,
    };
    let outcome = (|| -> Result<(), String> {
        let params = resolve(setup, config, cell)?;
        fill_condition(&mut row, &params);
        record.condition = Some(params.condition.clone());
        let problem = params.problem.ok_or("problem setup failed")?;
        let coarse = observed_coarse(setup, cell, params.op)?;
        let (field, report) = solve_nudged(problem, config, &params, &coarse, config.solver.initial_guess.clone())?;
        let errors = error_vs_exact(&field, &setup.sol);
        row.converged = report.converged;
        row.iterations = report.iterations;
        row.final_increment = report.increment_history.last().copied();
        row.e_l2_u = Some(errors.e_l2_u);
        row.e_h1_u = Some(errors.e_h1_u);
        row.e_l2_p = Some(errors.e_l2_p);
        row.div_l2 = Some(errors.div_l2);
        if config.vtk {
            write_vtk(out, &format!("cell_{:04}.vtk", cell.index), &field).map_err(|e| e.to_string())?;
        }
        record.solves.push(SolveRecord { guess: guess_label(&config.solver.initial_guess), report, errors: Some(errors) });
        Ok(())
    })();
    if let Err(msg) = outcome {
        row.status = "error".into();
        row.message = msg.clone();
        record.error = Some(msg);
    }
    (row, record)
}

fn fill_condition(row: &mut SweepRow, params: &CellParams<'_>) {
    let c = &params.condition;
    row.mu = params.mu;
    row.mu_min = c.mu_min;
    row.c_i = params.c_i;
    row.f_dual_norm = c.f_dual_norm.unwrap_or(f64::NAN);
    row.alpha = c.alpha;
    row.small_data = c.small_data;
    row.lambda = c.lambda;
    row.h_max_2d = c.h_max_2d;
    row.condition_satisfied_2d = c.condition_satisfied_2d;
    row.condition_satisfied_general = c.condition_satisfied_general;
}

fn mode_name(config: &ExperimentConfig) -> String {
    serde_json::to_value(config.observation_mode)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn guess_label(g: &InitialGuess) -> String {
    match g {
        InitialGuess::Zero => "zero".into(),
        InitialGuess::Stokes => "stokes".into(),
        InitialGuess::Given(_) => "given".into(),
    }
}

fn guess_kind_label(g: GuessKind) -> &'static str {
    match g {
        GuessKind::Zero => "zero",
        GuessKind::Stokes => "stokes",
        GuessKind::Perturbed => "perturbed",
    }
}

fn uniqueness_cell(setup: &Setup, config: &ExperimentConfig, cell: Cell, out: &Path) -> (Vec<PairRow>, CellRecord) {
    let h = config.h[cell.ih];
    let hc = config.coarse_h[cell.ic];
    let re = config.reynolds_numbers()[cell.ire];
    let mu_spec = config.mu_values()[cell.imu];
    let seed = config.seed.wrapping_add(cell.index as u64);
    let mut record = CellRecord {
        cell: cell.index,
        h,
        coarse_h: Some(hc),
        re,
        mu_spec: Some(mu_spec.label()),
        condition: None,
        solves: Vec::new(),
        error: None,
    };
    let base = |a: GuessKind, b: GuessKind, mu: f64| PairRow {
        cell: cell.index,
        solution: config.solution.clone(),
        mode: mode_name(config),
        h,
        coarse_h: hc,
        re,
        mu_spec: mu_spec.label(),
        mu,
        seed,
        guess_a: guess_kind_label(a).into(),
        guess_b: guess_kind_label(b).into(),
        converged_a: false,
        converged_b: false,
        iterations_a: 0,
        iterations_b: 0,
        h1_distance: None,
        status: "ok".into(),
        message: String::new(),
    };
    let params = match resolve(setup, config, cell) {
        Ok(p) => p,
        Err(msg) => {
            record.error = Some(msg.clone());
            let rows = pairs(&config.guesses)
                .map(|(a, b)| PairRow { status: "error".into(), message: msg.clone(), ..base(config.guesses[a], config.guesses[b], f64::NAN) })
                .collect();
            return (rows, record);
        }
    };
    record.condition = Some(params.condition.clone());
    let space = &setup.spaces[cell.ih];
    let solved: Vec<Result<(VelocityPressureField, SolveReport), String>> = config
        .guesses
        .iter()
        .map(|&kind| {
            let problem = params.problem.ok_or("problem setup failed")?;
            let coarse = observed_coarse(setup, cell, params.op)?;
            let guess = match kind {
                GuessKind::Zero => InitialGuess::Zero,
                GuessKind::Stokes => InitialGuess::Stokes,
                GuessKind::Perturbed => {
                    InitialGuess::Given(perturbed_guess(space, &setup.sol, config.perturbation, seed, &setup.rule))
                }
            };
            solve_nudged(problem, config, &params, &coarse, guess)
        })
        .collect();
    for (&kind, result) in config.guesses.iter().zip(&solved) {
        match result {
            Ok((field, report)) => {
                if config.vtk {
                    let name = format!("cell_{:04}_{}.vtk", cell.index, guess_kind_label(kind));
                    if let Err(e) = write_vtk(out, &name, field) {
                        record.error = Some(e.to_string());
                    }
                }
                record.solves.push(SolveRecord {
                    guess: guess_kind_label(kind).into(),
                    report: report.clone(),
                    errors: Some(error_vs_exact(field, &setup.sol)),
                });
            }
            Err(msg) => record.error = Some(format!("{}: {msg}", guess_kind_label(kind))),
        }
    }
    let rows = pairs(&config.guesses)
        .map(|(a, b)| {
            let mut row = base(config.guesses[a], config.guesses[b], params.mu);
            match (&solved[a], &solved[b]) {
                (Ok((fa, ra)), Ok((fb, rb))) => {
                    row.converged_a = ra.converged;
                    row.converged_b = rb.converged;
                    row.iterations_a = ra.iterations;
                    row.iterations_b = rb.iterations;
                    let diff: Vec<f64> = fa.velocity.iter().zip(&fb.velocity).map(|(x, y)| x - y).collect();
                    row.h1_distance = Some(h1_seminorm(space, &diff, &setup.rule));
                }
                (Err(m), _) | (_, Err(m)) => {
                    row.status = "error".into();
                    row.message = m.clone();
                }
            }
            row
        })
        .collect();
    (rows, record)
}

fn pairs(guesses: &[GuessKind]) -> impl Iterator<Item = (usize, usize)> {
    let n = guesses.len();
    (0..n).flat_map(move |a| (a + 1..n).map(move |b| (a, b)))
}

fn condition_cell(setup: &Setup, config: &ExperimentConfig, cell: Cell) -> CellRecord {
    let mut record = CellRecord {
        cell: cell.index,
        h: config.h[cell.ih],
        coarse_h: Some(config.coarse_h[cell.ic]),
        re: config.reynolds_numbers()[cell.ire],
        mu_spec: Some(config.mu_values()[cell.imu].label()),
        condition: None,
        solves: Vec::new(),
        error: None,
    };
    match resolve(setup, config, cell) {
        Ok(p) => record.condition = Some(p.condition),
        Err(e) => record.error = Some(e),
    }
    record
}

struct MmsOutcome {
    rows: Vec<ErrorRow>,
    records: Vec<CellRecord>,
    reports: Vec<ErrorReportRecord>,
}

fn mms(setup: &Setup, config: &ExperimentConfig, out: &Path) -> MmsOutcome {
    let res = config.reynolds_numbers();
    let cells: Vec<(usize, usize)> = (0..res.len()).flat_map(|ire| (0..config.h.len()).map(move |ih| (ire, ih))).collect();
    let solved: Vec<(Result<(VelocityPressureField, SolveReport), String>, usize)> = cells
        .par_iter()
        .enumerate()
        .map(|(index, &(ire, ih))| {
            let nu = 1.0 / res[ire];
            let cfg = SolveConfig { nu, ..config.solver.clone() };
            let result = setup.problems[ih][ire].as_ref().map_err(Clone::clone).and_then(|problem| {
                match config.equations {
                    Equations::Stokes => solve_stokes(problem, &cfg),
                    Equations::NavierStokes => solve_nse(problem, &cfg),
                }
                .map_err(|e| e.to_string())
            });
            (result, index)
        })
        .collect();

    let mut rows = Vec::new();
    let mut records = Vec::new();
    let mut reports = Vec::new();
    for (ire, &re) in res.iter().enumerate() {
        let start = ire * config.h.len();
        let group = &solved[start..start + config.h.len()];
        let mut errors = Vec::new();
        let mut failure = None;
        for (ih, (result, index)) in group.iter().enumerate() {
            let h = config.h[ih];
            let mut record =
                CellRecord { cell: *index, h, coarse_h: None, re, mu_spec: None, condition: None, solves: Vec::new(), error: None };
            match result {
                Ok((field, report)) => {
                    let e = error_vs_exact(field, &setup.sol);
                    errors.push(Some((e, report.iterations, report.converged)));
                    if config.vtk {
                        if let Err(err) = write_vtk(out, &format!("cell_{index:04}.vtk"), field) {
                            record.error = Some(err.to_string());
                        }
                    }
                    record.solves.push(SolveRecord { guess: guess_label(&config.solver.initial_guess), report: report.clone(), errors: Some(e) });
                }
                Err(msg) => {
                    errors.push(None);
                    failure.get_or_insert_with(|| msg.clone());
                    record.error = Some(msg.clone());
                }
            }
            records.push(record);
        }
        let full: Option<Vec<FieldErrors>> = errors.iter().map(|e| e.map(|(fe, _, _)| fe)).collect();
        let report = full.map(|fe| ErrorReport::new(config.h.clone(), fe));
        for (ih, e) in errors.iter().enumerate() {
            let rate = |v: Option<&Vec<f64>>| -> Option<f64> {
                if ih == 0 {
                    None
                } else {
                    v.and_then(|r| r.get(ih - 1).copied())
                }
            };
            let (fe, iterations, converged) = match e {
                Some((fe, it, c)) => (Some(*fe), *it, *c),
                None => (None, 0, false),
            };
            let nan = f64::NAN;
            rows.push(ErrorRow {
                h: config.h[ih],
                coarse_h: None,
                re,
                mu: config.solver.mu,
                e_l2_u: fe.map_or(nan, |f| f.e_l2_u),
                e_h1_u: fe.map_or(nan, |f| f.e_h1_u),
                e_l2_p: fe.map_or(nan, |f| f.e_l2_p),
                div_l2: fe.map_or(nan, |f| f.div_l2),
                rate_l2_u: rate(report.as_ref().map(|r| &r.rate_l2_u)),
                rate_h1_u: rate(report.as_ref().map(|r| &r.rate_h1_u)),
                rate_l2_p: rate(report.as_ref().map(|r| &r.rate_l2_p)),
                iterations,
                converged,
            });
        }
        reports.push(ErrorReportRecord { re, report, error: failure });
    }
    MmsOutcome { rows, records, reports }
}

fn write_csv<T: Serialize>(path: &Path, experiment: Experiment, rows: &[T]) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    let name = serde_json::to_value(experiment).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
    writeln!(out, "# cda-nse {name} results, generated at unix time {}", unix_now()).map_err(|e| io_err(path, e))?;
    {
        let mut writer = csv::Writer::from_writer(&mut out);
        for row in rows {
            writer.serialize(row).map_err(|e| io_err(path, e))?;
        }
        writer.flush().map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// Runs `config` on up to `workers` threads and writes `results.csv`
/// (except for `condition_report`) and `report.json` into `out`.
pub fn run_experiment(config: &ExperimentConfig, workers: usize, out: &Path) -> Result<RunSummary, CliError> {
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| run_in_pool(config, out))
}

fn run_in_pool(config: &ExperimentConfig, out: &Path) -> Result<RunSummary, CliError> {
    let setup = Setup::build(config)?;
    let csv_path = out.join("results.csv");
    let report_path = out.join("report.json");
    let (records, csv_written, convergence, non_converged) = match config.experiment {
        Experiment::MmsConvergence => {
            let outcome = mms(&setup, config, out);
            write_csv(&csv_path, config.experiment, &outcome.rows)?;
            let nc = outcome.rows.iter().filter(|r| !r.converged).count();
            (outcome.records, true, Some(outcome.reports), nc)
        }
        Experiment::CdaSweep => {
            let results: Vec<(SweepRow, CellRecord)> =
                nudged_cells(config).into_par_iter().map(|c| sweep_cell(&setup, config, c, out)).collect();
            let (rows, records): (Vec<_>, Vec<_>) = results.into_iter().unzip();
            write_csv(&csv_path, config.experiment, &rows)?;
            let nc = rows.iter().filter(|r| !r.converged).count();
            (records, true, None, nc)
        }
        Experiment::UniquenessTest => {
            let results: Vec<(Vec<PairRow>, CellRecord)> =
                nudged_cells(config).into_par_iter().map(|c| uniqueness_cell(&setup, config, c, out)).collect();
            let nc = results.iter().filter(|(_, r)| r.solves.iter().any(|s| !s.report.converged)).count();
            let (rows, records): (Vec<Vec<PairRow>>, Vec<_>) = results.into_iter().unzip();
            let rows: Vec<PairRow> = rows.into_iter().flatten().collect();
            write_csv(&csv_path, config.experiment, &rows)?;
            (records, true, None, nc)
        }
        Experiment::ConditionReport => {
            let records: Vec<CellRecord> =
                nudged_cells(config).into_par_iter().map(|c| condition_cell(&setup, config, c)).collect();
            (records, false, None, 0)
        }
    };
    let summary = RunSummary {
        cells: records.len(),
        failed_cells: records.iter().filter(|r| r.error.is_some()).count(),
        non_converged_cells: non_converged,
        results_csv: csv_written.then(|| csv_path.clone()),
        report_json: report_path.clone(),
    };
    let report = Report { generated_unix_s: unix_now(), config, summary: &summary, convergence, cells: records };
    let file = File::create(&report_path).map_err(|e| io_err(&report_path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &report).map_err(|e| io_err(&report_path, e))?;
    w.flush().map_err(|e| io_err(&report_path, e))?;
    Ok(summary)
}
