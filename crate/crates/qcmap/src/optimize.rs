//! Gradient-based optimization of maps over coefficient space.
//!
//! The decision variables are unconstrained: a raw complex value per
//! vertex, squashed through the saturating activation into an admissible
//! coefficient field; the activation temperature (kept positive through
//! its logarithm); and a global similarity (rotation angle, log-scale,
//! translation) applied to the solved map. Every iteration runs the full
//! forward pipeline — activation, vertex-to-face averaging, linear solve,
//! similarity, interpolation, objective terms — and pulls the objective
//! gradient back through each stage with the adjoints from
//! [`crate::adjoint`]. Steps are taken with Adam; the best iterate seen is
//! returned, not the last, since the assignment-dependent terms make the
//! landscape only piecewise smooth.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::Deserialize;
use thiserror::Error;

use crate::adjoint;
use crate::beltrami;
use crate::energies::{self, DensityProblem, EnergiesError, EnergyReport, RegistrationProblem};
use crate::lsqc::{self, LsqcError, LsqcSystem, MapResult, Pin};
use crate::mesh::{InterpMatrix, TriMesh};
use crate::{Kahan, C64};

/// Errors of an optimization run.
#[derive(Debug, Error)]
pub enum OptimError {
    /// Assembly or solve failure.
    #[error(transparent)]
    Solve(#[from] LsqcError),
    /// Energy evaluation failure.
    #[error(transparent)]
    Energy(#[from] EnergiesError),
    /// A non-finite parameter gradient; the iterate cannot be trusted.
    #[error("non-finite gradient at iteration {iteration}")]
    NonFiniteGradient {
        /// Iteration at which the gradient degenerated.
        iteration: usize,
    },
}

// ---------------------------------------------------------------------------
// Parameters and gradients
// ---------------------------------------------------------------------------

/// Unconstrained decision variables of a run, plus the fixed pin choice.
#[derive(Debug, Clone)]
pub struct OptimParams {
    /// Raw per-vertex coefficient values, squashed by the activation.
    pub mu_tilde: Vec<C64>,
    /// Logarithm of the activation temperature (keeps it positive).
    pub log_temp: f64,
    /// Similarity rotation angle (radians).
    pub phi: f64,
    /// Similarity log-scale.
    pub s_tilde: f64,
    /// Similarity translation.
    pub r: C64,
    /// The two pinned vertices; fixed to their own positions and not
    /// optimized.
    pub pin_vertices: (usize, usize),
}

impl OptimParams {
    /// Identity start: zero coefficients, unit temperature, identity
    /// similarity, pins chosen by [`lsqc::pick_pins`].
    pub fn init(mesh: &TriMesh) -> Self {
        OptimParams {
            mu_tilde: vec![C64::new(0.0, 0.0); mesh.n_vertices()],
            log_temp: 0.0,
            phi: 0.0,
            s_tilde: 0.0,
            r: C64::new(0.0, 0.0),
            pin_vertices: lsqc::pick_pins(mesh),
        }
    }

    /// The pins implied by the parameter block: each pinned vertex is held
    /// at its own position.
    pub fn pins(&self, mesh: &TriMesh) -> [Pin; 2] {
        [
            Pin::new(self.pin_vertices.0, mesh.vertex_c(self.pin_vertices.0)),
            Pin::new(self.pin_vertices.1, mesh.vertex_c(self.pin_vertices.1)),
        ]
    }

    pub(crate) fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(2 * self.mu_tilde.len() + 5);
        for m in &self.mu_tilde {
            flat.push(m.re);
            flat.push(m.im);
        }
        flat.extend([self.log_temp, self.phi, self.s_tilde, self.r.re, self.r.im]);
        flat
    }

    pub(crate) fn set_from_flat(&mut self, flat: &[f64]) {
        let n = self.mu_tilde.len();
        for (i, m) in self.mu_tilde.iter_mut().enumerate() {
            *m = C64::new(flat[2 * i], flat[2 * i + 1]);
        }
        let tail = &flat[2 * n..];
        self.log_temp = tail[0];
        self.phi = tail[1];
        self.s_tilde = tail[2];
        self.r = C64::new(tail[3], tail[4]);
    }
}

/// Objective gradient with respect to [`OptimParams`] — the parameter-space
/// counterpart of the stagewise [`adjoint::GradBundle`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    /// Gradient with respect to the raw per-vertex coefficients.
    pub mu_tilde: Vec<C64>,
    /// Gradient with respect to the log-temperature.
    pub log_temp: f64,
    /// Gradient with respect to the rotation angle.
    pub phi: f64,
    /// Gradient with respect to the log-scale.
    pub s_tilde: f64,
    /// Gradient with respect to the translation.
    pub r: C64,
}

impl ParamGrads {
    pub(crate) fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(2 * self.mu_tilde.len() + 5);
        for m in &self.mu_tilde {
            flat.push(m.re);
            flat.push(m.im);
        }
        flat.extend([self.log_temp, self.phi, self.s_tilde, self.r.re, self.r.im]);
        flat
    }

    /// Euclidean norm over all components.
    pub fn norm(&self) -> f64 {
        Kahan::sum_iter(self.to_flat().iter().map(|g| g * g)).sqrt()
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Run configuration; every field has a default, so `{}` is a valid
/// config file.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    /// Objective weights by component name; components not named keep
    /// their objective's built-in default.
    pub weights: BTreeMap<String, f64>,
    /// Iteration cap.
    pub max_iters: usize,
    /// Adam step size.
    pub step: f64,
    /// Adam moment decays `[beta1, beta2]`.
    pub decays: [f64; 2],
    /// Relative gradient-norm tolerance: stop once the gradient norm drops
    /// below `tol` times its initial value.
    pub tol: f64,
    /// Stop after this many iterations without improving the best total.
    pub patience: usize,
    /// Log an iteration summary every this many iterations (0 disables).
    pub log_every: usize,
    /// Seed for any randomized setup done by the caller (the optimizer
    /// itself is deterministic).
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            weights: BTreeMap::new(),
            max_iters: 5000,
            step: 0.05,
            decays: [0.9, 0.999],
            tol: 1e-6,
            patience: 200,
            log_every: 50,
            seed: 0,
        }
    }
}

/// Parse a configuration from JSON text.
pub fn config_from_json(text: &str) -> Result<OptimConfig, String> {
    let config: OptimConfig = serde_json::from_str(text).map_err(|e| format!("bad config: {e}"))?;
    if !(config.step > 0.0) {
        return Err("bad config: step must be positive".into());
    }
    if config.max_iters == 0 {
        return Err("bad config: max_iters must be at least 1".into());
    }
    if config.decays.iter().any(|&b| !(0.0..1.0).contains(&b)) {
        return Err("bad config: decays must lie in (0, 1)".into());
    }
    Ok(config)
}

/// Load a configuration file (JSON).
pub fn load_config(path: &Path) -> Result<OptimConfig, String> {
    let text =
        std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    config_from_json(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn weight(config: &OptimConfig, name: &str, default: f64) -> f64 {
    config.weights.get(name).copied().unwrap_or(default)
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Componentwise Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    step: f64,
    beta1: f64,
    beta2: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    const EPS: f64 = 1e-8;

    /// State for `dim` parameters.
    pub fn new(dim: usize, step: f64, decays: [f64; 2]) -> Self {
        Adam {
            step,
            beta1: decays[0],
            beta2: decays[1],
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    /// Take one descent step in place.
    pub fn update(&mut self, theta: &mut [f64], grad: &[f64]) {
        assert_eq!(theta.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            theta[i] -= self.step * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

// ---------------------------------------------------------------------------
// Trace
// ---------------------------------------------------------------------------

/// One iteration record.
#[derive(Debug, Clone)]
pub struct TraceRow {
    /// Iteration index (0-based).
    pub iteration: usize,
    /// Weighted objective total.
    pub total: f64,
    /// Unweighted component values, keyed as in [`EnergyReport`].
    pub components: BTreeMap<String, f64>,
    /// Parameter-space gradient norm.
    pub grad_norm: f64,
    /// Number of faces with nonpositive image area.
    pub flips: usize,
    /// Wall-clock milliseconds since the run started.
    pub millis: u64,
}

/// Per-iteration history of a run.
#[derive(Debug, Clone, Default)]
pub struct OptimTrace {
    /// Rows in iteration order.
    pub rows: Vec<TraceRow>,
}

/// Write the trace as CSV with columns `iteration, total, <components in
/// key order>, grad_norm, flips, millis`. Floats use the shortest
/// round-trip decimal form.
pub fn write_trace_csv(path: &Path, trace: &OptimTrace) -> Result<(), String> {
    let mut out = String::new();
    let keys: Vec<&String> = trace
        .rows
        .first()
        .map(|r| r.components.keys().collect())
        .unwrap_or_default();
    out.push_str("iteration,total");
    for k in &keys {
        out.push(',');
        out.push_str(k);
    }
    out.push_str(",grad_norm,flips,millis\n");
    for row in &trace.rows {
        out.push_str(&format!("{},{}", row.iteration, row.total));
        for k in &keys {
            out.push_str(&format!(",{}", row.components[k.as_str()]));
        }
        out.push_str(&format!(",{},{},{}\n", row.grad_norm, row.flips, row.millis));
    }
    let mut f = std::fs::File::create(path)
        .map_err(|e| format!("cannot create {}: {e}", path.display()))?;
    f.write_all(out.as_bytes())
        .map_err(|e| format!("cannot write {}: {e}", path.display()))
}

// ---------------------------------------------------------------------------
// Forward pipeline
// ---------------------------------------------------------------------------

struct SolveStage {
    map: MapResult,
    mu_vertex: Vec<C64>,
    temp: f64,
    /// Final image positions: interpolation of the similarity-transformed
    /// solve.
    fine: Vec<C64>,
}

/// Activation, averaging, assembly, solve. The system slot is reused
/// across iterations: the sparsity pattern and column permutation depend
/// only on the mesh and pins, so later iterations update values in place.
fn forward_stage(
    mesh: &TriMesh,
    params: &OptimParams,
    pins: &[Pin; 2],
    system: &mut Option<LsqcSystem>,
    r_interp: &InterpMatrix,
) -> Result<SolveStage, LsqcError> {
    let temp = params.log_temp.exp();
    let mu_vertex = beltrami::activation_field(&params.mu_tilde, temp);
    let mu_faces = beltrami::vertex_to_face(mesh, &mu_vertex);
    let sup = mu_faces.iter().map(|m| m.norm()).fold(0.0, f64::max);
    assert!(sup < 1.0, "activated coefficients must stay admissible");
    match system {
        Some(sys) => sys.update_mu(mesh, &mu_faces)?,
        None => *system = Some(LsqcSystem::assemble(mesh, &mu_faces, pins)?),
    }
    let map = system.as_ref().unwrap().solve()?;
    let transformed =
        lsqc::apply_similarity(map.positions(), params.phi, params.s_tilde, params.r);
    let fine = r_interp.apply(&transformed);
    Ok(SolveStage {
        map,
        mu_vertex,
        temp,
        fine,
    })
}

/// One full forward pass at the given parameters: coefficient activation,
/// solve with the pins held at their own positions, similarity, and
/// interpolation through `r_interp` to the target points. Returns the raw
/// solve result and the final positions.
pub fn forward(
    params: &OptimParams,
    mesh: &TriMesh,
    r_interp: &InterpMatrix,
) -> Result<(MapResult, Vec<C64>), LsqcError> {
    let pins = params.pins(mesh);
    let mut slot = None;
    let stage = forward_stage(mesh, params, &pins, &mut slot, r_interp)?;
    Ok((stage.map, stage.fine))
}

/// Pull a final-position gradient and direct coefficient-space terms back
/// to parameter space: interpolation transpose, similarity adjoint, solve
/// adjoint, face-to-vertex transpose, activation adjoint.
fn backward_to_params(
    mesh: &TriMesh,
    params: &OptimParams,
    system: &LsqcSystem,
    stage: &SolveStage,
    r_interp: &InterpMatrix,
    dl_dfine: &[C64],
    mut dl_dmu_vertex: Vec<C64>,
    extra_d_s_tilde: f64,
) -> Result<ParamGrads, LsqcError> {
    let dl_dtransformed = adjoint::backprop_interp(r_interp, dl_dfine);
    let (dl_dsolved, sim_grad) = adjoint::backprop_similarity(
        stage.map.positions(),
        params.phi,
        params.s_tilde,
        params.r,
        &dl_dtransformed,
    );
    let bundle = adjoint::backprop_solve(system, &stage.map, &dl_dsolved)?;
    // Pins are fixed to their own positions, not decision variables; their
    // target gradients are intentionally dropped.
    for (fi, f) in mesh.faces().iter().enumerate() {
        let share = bundle.d_mu_faces[fi] / 3.0;
        for &v in f {
            dl_dmu_vertex[v] += share;
        }
    }
    let (d_mu_tilde, d_temp) =
        adjoint::backprop_activation(&params.mu_tilde, stage.temp, &dl_dmu_vertex);
    Ok(ParamGrads {
        mu_tilde: d_mu_tilde,
        log_temp: d_temp * stage.temp,
        phi: sim_grad.d_phi,
        s_tilde: sim_grad.d_s_tilde + extra_d_s_tilde,
        r: sim_grad.d_r,
    })
}

// ---------------------------------------------------------------------------
// Shared driver
// ---------------------------------------------------------------------------

/// Outcome of a run: the best iterate seen, with its full evaluation and
/// the per-iteration trace.
#[derive(Debug, Clone)]
pub struct RunResult {
    /// Parameters at the best iterate.
    pub params: OptimParams,
    /// Final image positions at the best iterate.
    pub positions: Vec<C64>,
    /// Activated per-vertex coefficients at the best iterate.
    pub mu_vertex: Vec<C64>,
    /// Parameter-space objective gradient at the best iterate.
    pub grads: ParamGrads,
    /// Objective evaluation at the best iterate.
    pub report: EnergyReport,
    /// Full iteration history.
    pub trace: OptimTrace,
    /// Number of iterations actually run.
    pub iterations: usize,
    /// Index of the best iterate.
    pub best_iteration: usize,
}

pub(crate) struct Evaluation {
    pub(crate) report: EnergyReport,
    pub(crate) grads: ParamGrads,
    pub(crate) positions: Vec<C64>,
    pub(crate) mu_vertex: Vec<C64>,
}

fn run_loop(
    mesh: &TriMesh,
    config: &OptimConfig,
    mut eval: impl FnMut(&OptimParams) -> Result<Evaluation, OptimError>,
) -> Result<RunResult, OptimError> {
    let start = Instant::now();
    let mut params = OptimParams::init(mesh);
    let mut flat = params.to_flat();
    let mut adam = Adam::new(flat.len(), config.step, config.decays);
    let mut trace = OptimTrace::default();
    let mut best: Option<(f64, usize, Evaluation, OptimParams)> = None;
    let mut initial_norm = None;
    let mut iterations = 0;
    for iter in 0..config.max_iters {
        iterations = iter + 1;
        let evaluation = eval(&params)?;
        let grad_norm = evaluation.grads.norm();
        let grad_flat = evaluation.grads.to_flat();
        if grad_flat.iter().any(|g| !g.is_finite()) {
            let bad = grad_flat.iter().position(|g| !g.is_finite()).unwrap();
            log::error!(
                "iteration {iter}: non-finite gradient at flat index {bad}; total {}",
                evaluation.report.total
            );
            return Err(OptimError::NonFiniteGradient { iteration: iter });
        }
        let initial = *initial_norm.get_or_insert(grad_norm);
        if config.log_every > 0 && iter % config.log_every == 0 {
            log::info!(
                "iteration {iter}: total {:.6e}, gradient norm {grad_norm:.3e}, {} flipped",
                evaluation.report.total,
                evaluation.report.degenerate_faces.len()
            );
        }
        trace.rows.push(TraceRow {
            iteration: iter,
            total: evaluation.report.total,
            components: evaluation.report.components.clone(),
            grad_norm,
            flips: evaluation.report.degenerate_faces.len(),
            millis: start.elapsed().as_millis() as u64,
        });
        let improved = best
            .as_ref()
            .map_or(true, |(t, _, _, _)| evaluation.report.total < *t);
        if improved {
            best = Some((evaluation.report.total, iter, evaluation, params.clone()));
        }
        let best_iter = best.as_ref().unwrap().1;
        if grad_norm <= config.tol * initial {
            log::info!("converged at iteration {iter}: gradient norm {grad_norm:.3e}");
            break;
        }
        if iter - best_iter >= config.patience {
            log::info!(
                "stopping at iteration {iter}: no improvement for {} iterations",
                config.patience
            );
            break;
        }
        adam.update(&mut flat, &grad_flat);
        params.set_from_flat(&flat);
    }
    let (_, best_iteration, evaluation, best_params) = best.expect("at least one iteration runs");
    Ok(RunResult {
        params: best_params,
        positions: evaluation.positions,
        mu_vertex: evaluation.mu_vertex,
        grads: evaluation.grads,
        report: evaluation.report,
        trace,
        iterations,
        best_iteration,
    })
}

// ---------------------------------------------------------------------------
// Objectives
// ---------------------------------------------------------------------------

/// One density-objective evaluation with gradients: forward pipeline, the
/// density energy (variance plus scale barrier) weighted by
/// `weights = [density, bc, smooth]`, and the full backward chain.
pub(crate) fn density_eval(
    problem: &DensityProblem,
    params: &OptimParams,
    weights: [f64; 3],
    pins: &[Pin; 2],
    system: &mut Option<LsqcSystem>,
    r_interp: &InterpMatrix,
) -> Result<Evaluation, OptimError> {
    let [w_density, w_bc, w_smooth] = weights;
    let mesh = &problem.mesh;
    let stage = forward_stage(mesh, params, pins, system, r_interp)?;
    let density = energies::density_energy(problem, &stage.fine, params.s_tilde);
    let (e_bc, g_bc) = energies::bc_energy(&stage.mu_vertex);
    let (e_smooth, g_smooth) = energies::smoothness_energy(mesh, &stage.mu_vertex);
    let total = w_density * density.total + w_bc * e_bc + w_smooth * e_smooth;

    let dl_dfine: Vec<C64> = density
        .grad_positions
        .iter()
        .map(|&g| g * w_density)
        .collect();
    let dl_dmu_vertex: Vec<C64> = g_bc
        .iter()
        .zip(&g_smooth)
        .map(|(&b, &s)| b * w_bc + s * w_smooth)
        .collect();
    let grads = backward_to_params(
        mesh,
        params,
        system.as_ref().unwrap(),
        &stage,
        r_interp,
        &dl_dfine,
        dl_dmu_vertex,
        w_density * density.grad_s_tilde,
    )?;

    let mut components = density.components.clone();
    components.insert("bc".to_string(), e_bc);
    components.insert("smooth".to_string(), e_smooth);
    let report = EnergyReport {
        total,
        components,
        grad_positions: dl_dfine,
        grad_s_tilde: w_density * density.grad_s_tilde,
        degenerate_faces: density.degenerate_faces,
    };
    Ok(Evaluation {
        report,
        grads,
        positions: stage.fine,
        mu_vertex: stage.mu_vertex,
    })
}

/// Optimize a density-equalizing map: the density objective (variance plus
/// scale barrier) weighted by `density`, plus coefficient-norm (`bc`,
/// default 0.05) and smoothness (`smooth`, default 0.001) penalties.
pub fn run_density(problem: &DensityProblem, config: &OptimConfig) -> Result<RunResult, OptimError> {
    let mesh = &problem.mesh;
    let r_interp = mesh.build_interp(mesh.vertices());
    let weights = [
        weight(config, "density", 1.0),
        weight(config, "bc", 5e-2),
        weight(config, "smooth", 1e-3),
    ];
    let mut system = None;
    let pins = OptimParams::init(mesh).pins(mesh);
    run_loop(mesh, config, |params| {
        density_eval(problem, params, weights, &pins, &mut system, &r_interp)
    })
}

/// One registration-objective evaluation with gradients:
/// `weights = [intensity, chamfer, bc, smooth]`.
pub(crate) fn register_eval(
    problem: &RegistrationProblem,
    params: &OptimParams,
    weights: [f64; 4],
    pins: &[Pin; 2],
    system: &mut Option<LsqcSystem>,
    r_interp: &InterpMatrix,
) -> Result<Evaluation, OptimError> {
    let [w_intensity, w_chamfer, w_bc, w_smooth] = weights;
    let moving = &problem.moving;
    let static_mesh = &problem.static_mesh;
    let stage = forward_stage(moving, params, pins, system, r_interp)?;
    let positions = &stage.fine;

    let (e_chamfer, g_chamfer) = energies::chamfer_pairs(positions, &problem.region_pairs)?;
    let overlap = energies::overlap_region(moving, positions, static_mesh);
    let (e_intensity, g_intensity) = energies::intensity_mismatch(
        moving,
        positions,
        &problem.moving_intensity,
        static_mesh,
        &problem.static_intensity,
        &overlap,
    );
    let (e_bc, g_bc) = energies::bc_energy(&stage.mu_vertex);
    let (e_smooth, g_smooth) = energies::smoothness_energy(moving, &stage.mu_vertex);
    let total =
        w_chamfer * e_chamfer + w_intensity * e_intensity + w_bc * e_bc + w_smooth * e_smooth;

    let dl_dfine: Vec<C64> = g_chamfer
        .iter()
        .zip(&g_intensity)
        .map(|(&c, &i)| c * w_chamfer + i * w_intensity)
        .collect();
    let dl_dmu_vertex: Vec<C64> = g_bc
        .iter()
        .zip(&g_smooth)
        .map(|(&b, &s)| b * w_bc + s * w_smooth)
        .collect();
    let grads = backward_to_params(
        moving,
        params,
        system.as_ref().unwrap(),
        &stage,
        r_interp,
        &dl_dfine,
        dl_dmu_vertex,
        0.0,
    )?;

    let mut components = BTreeMap::new();
    components.insert("chamfer".to_string(), e_chamfer);
    components.insert("intensity".to_string(), e_intensity);
    components.insert("bc".to_string(), e_bc);
    components.insert("smooth".to_string(), e_smooth);
    let report = EnergyReport {
        total,
        components,
        grad_positions: dl_dfine,
        grad_s_tilde: 0.0,
        degenerate_faces: lsqc::flipped_faces(moving.faces(), positions),
    };
    Ok(Evaluation {
        report,
        grads,
        positions: positions.clone(),
        mu_vertex: stage.mu_vertex,
    })
}

/// Optimize an inconsistent registration: chamfer distance over the region
/// pairs, intensity mismatch over the overlap, and coefficient penalties.
/// Weights come from the problem (`weights` in the job file); config
/// weights with the same names override them.
pub fn run_register(
    problem: &RegistrationProblem,
    config: &OptimConfig,
) -> Result<RunResult, OptimError> {
    let moving = &problem.moving;
    let r_interp = moving.build_interp(moving.vertices());
    let weights = [
        weight(config, "intensity", problem.weights.intensity),
        weight(config, "chamfer", problem.weights.chamfer),
        weight(config, "bc", problem.weights.bc),
        weight(config, "smooth", problem.weights.smooth),
    ];
    let mut system = None;
    let pins = OptimParams::init(moving).pins(moving);
    run_loop(moving, config, |params| {
        register_eval(problem, params, weights, &pins, &mut system, &r_interp)
    })
}
