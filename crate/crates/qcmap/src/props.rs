//! Randomized property suites over the solver and its gradients.
//!
//! Each suite re-checks a mathematical guarantee of the pipeline on freshly
//! generated random instances: solution uniqueness and definiteness of the
//! normal operator, exact coefficient reproduction on exactly-determined
//! meshes, homeomorphism reconstruction, similarity equivariance of the
//! pinned solve, barycentric consistency under face splits, and
//! finite-difference agreement of the end-to-end gradients. Every trial
//! draws its inputs from [`synth::trial_rng`], so a failure reproduces from
//! the reported seed and trial index alone; trials run in parallel and are
//! collected in index order, keeping reports deterministic.
//!
//! The deliberately-broken row scaling switch ([`SuiteOptions::break_scaling`])
//! is honored wherever systems are assembled, but only the face-split
//! consistency suite can catch it: on exactly-determined meshes the pinned
//! system is square, and rescaling the rows of a square nonsingular system
//! provably cannot move its solution, so the exact-reproduction suite stays
//! green even with the broken weighting.

use rayon::prelude::*;
use serde::Serialize;

use rand::Rng;

use crate::beltrami;
use crate::energies::{self, DensityProblem, RegWeights, RegionPair, RegistrationProblem};
use crate::lsqc::{self, AssembleOptions, LsqcSystem, Pin};
use crate::mesh::TriMesh;
use crate::optimize::{self, OptimParams};
use crate::synth::{self, SeededRng};
use crate::C64;

/// Agreement tolerance between independent solve routes (direct Cholesky,
/// Jacobi-preconditioned CG, warm-started CG) for the same system.
pub const TOL_SOLUTION_AGREEMENT: f64 = 1e-8;
/// The smallest normal-operator eigenvalue must exceed this fraction of the
/// largest for the operator to count as positive definite.
pub const TOL_EIG_RELATIVE: f64 = 1e-10;
/// Per-entry tolerance for the exact properties (coefficient reproduction,
/// homeomorphism reconstruction, similarity equivariance, split
/// consistency).
pub const TOL_EXACT: f64 = 1e-9;
/// Residual-energy ceiling in the exactly-determined case.
pub const TOL_EXACT_ENERGY: f64 = 1e-18;
/// Central finite-difference step for the gradient suite.
pub const FD_STEP: f64 = 1e-6;
/// Relative mismatch allowed between adjoint and finite-difference
/// gradients.
pub const TOL_FD_REL: f64 = 1e-4;
/// Gradient components below this magnitude (on both routes) are not
/// compared — they are dominated by finite-difference cancellation noise.
pub const FD_FLOOR: f64 = 1e-7;
/// Absolute agreement that counts as a pass regardless of relative error.
/// A centered difference of an exactly invariant direction (the density
/// objective does not change under rotation, so its angle derivative is a
/// true zero) measures pure evaluation rounding, roughly
/// `|E| * 1e-12 / FD_STEP` — above [`FD_FLOOR`] yet orders of magnitude
/// below any genuine gradient defect.
pub const FD_ABS_NOISE: f64 = 1e-6;

/// The available property suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// Solution uniqueness across solver routes; positive-definite normal
    /// operator by dense eigensolve.
    Rank,
    /// Exact coefficient reproduction on fan-triangulated polygons.
    ExactBc,
    /// Reconstruction of random piecewise-linear homeomorphisms.
    Reconstruct,
    /// Equivariance of the solution under similarity transforms of the pin
    /// targets.
    Similarity,
    /// Barycentric consistency of the solution under face splits.
    Resolution,
    /// Finite-difference verification of the end-to-end objective
    /// gradients.
    Adjoint,
}

impl Suite {
    /// Every suite, in canonical order.
    pub const ALL: [Suite; 6] = [
        Suite::Rank,
        Suite::ExactBc,
        Suite::Reconstruct,
        Suite::Similarity,
        Suite::Resolution,
        Suite::Adjoint,
    ];

    /// The suite's command-line name.
    pub fn name(self) -> &'static str {
        match self {
            Suite::Rank => "rank",
            Suite::ExactBc => "exact_bc",
            Suite::Reconstruct => "reconstruct",
            Suite::Similarity => "similarity",
            Suite::Resolution => "resolution",
            Suite::Adjoint => "adjoint",
        }
    }

    /// Parse a command-line name.
    pub fn from_name(name: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// How a suite run is parameterized.
#[derive(Debug, Clone)]
pub struct SuiteOptions {
    /// Base seed; trial `t` uses `trial_rng(seed, t)`.
    pub seed: u64,
    /// Number of random instances.
    pub trials: usize,
    /// Assemble with the broken row scaling (negative control).
    pub break_scaling: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 0,
            trials: 100,
            break_scaling: false,
        }
    }
}

/// One failed trial of one property.
#[derive(Debug, Clone, Serialize)]
pub struct TrialFailure {
    /// Trial index within the suite run.
    pub trial: u64,
    /// Base seed of the run; `trial_rng(seed, trial)` reproduces the
    /// instance.
    pub seed: u64,
    /// What went wrong.
    pub detail: String,
}

/// Aggregate verdict for one property of a suite.
#[derive(Debug, Clone, Serialize)]
pub struct PropertyVerdict {
    /// Property name.
    pub property: String,
    /// How many trials exercised this property.
    pub trials: usize,
    /// Whether every exercised trial passed.
    pub passed: bool,
    /// The failures, if any.
    pub failures: Vec<TrialFailure>,
}

/// Machine-readable result of one suite run.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    /// Which suite ran.
    pub suite: Suite,
    /// Base seed of the run.
    pub seed: u64,
    /// Requested trial count.
    pub trials: usize,
    /// Per-property verdicts.
    pub properties: Vec<PropertyVerdict>,
    /// Whether every property passed.
    pub passed: bool,
}

impl SuiteReport {
    /// The first failure across all properties, if any.
    pub fn first_failure(&self) -> Option<&TrialFailure> {
        self.properties.iter().flat_map(|p| p.failures.first()).next()
    }
}

/// Outcomes of one trial: `(property index, result)` for each property the
/// trial exercised.
type TrialOutcomes = Vec<(usize, Result<(), String>)>;

fn aggregate(
    suite: Suite,
    options: &SuiteOptions,
    property_names: &[&'static str],
    trial: impl Fn(u64, &mut SeededRng) -> TrialOutcomes + Sync,
) -> SuiteReport {
    let all: Vec<TrialOutcomes> = (0..options.trials as u64)
        .into_par_iter()
        .map(|t| trial(t, &mut synth::trial_rng(options.seed, t)))
        .collect();
    let mut properties: Vec<PropertyVerdict> = property_names
        .iter()
        .map(|&name| PropertyVerdict {
            property: name.to_string(),
            trials: 0,
            passed: true,
            failures: Vec::new(),
        })
        .collect();
    for (t, outcomes) in all.into_iter().enumerate() {
        for (idx, result) in outcomes {
            let p = &mut properties[idx];
            p.trials += 1;
            if let Err(detail) = result {
                p.passed = false;
                p.failures.push(TrialFailure {
                    trial: t as u64,
                    seed: options.seed,
                    detail,
                });
            }
        }
    }
    let passed = properties.iter().all(|p| p.passed);
    SuiteReport {
        suite,
        seed: options.seed,
        trials: options.trials,
        properties,
        passed,
    }
}

/// Run one suite.
pub fn run_suite(suite: Suite, options: &SuiteOptions) -> SuiteReport {
    match suite {
        Suite::Rank => run_rank(options),
        Suite::ExactBc => run_exact_bc(options),
        Suite::Reconstruct => run_reconstruct(options),
        Suite::Similarity => run_similarity(options),
        Suite::Resolution => run_resolution(options),
        Suite::Adjoint => run_adjoint(options),
    }
}

/// Run several suites in order.
pub fn run_suites(suites: &[Suite], options: &SuiteOptions) -> Vec<SuiteReport> {
    suites.iter().map(|&s| run_suite(s, options)).collect()
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn random_box(rng: &mut SeededRng, half: f64) -> C64 {
    C64::new(rng.gen_range(-half..half), rng.gen_range(-half..half))
}

fn random_distinct_pins(rng: &mut SeededRng, mesh: &TriMesh) -> [Pin; 2] {
    let n = mesh.n_vertices();
    let i = rng.gen_range(0..n);
    let j = loop {
        let j = rng.gen_range(0..n);
        if j != i {
            break j;
        }
    };
    let mut a = random_box(rng, 1.0);
    let b = loop {
        let b = random_box(rng, 1.0);
        if (b - a).norm() > 0.2 {
            break b;
        }
        a = random_box(rng, 1.0);
    };
    [Pin::new(i, a), Pin::new(j, b)]
}

fn max_abs_diff(a: &[C64], b: &[C64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).norm())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Rank: uniqueness and positive definiteness
// ---------------------------------------------------------------------------

fn run_rank(options: &SuiteOptions) -> SuiteReport {
    aggregate(
        Suite::Rank,
        options,
        &["solution_unique_across_solver_routes", "normal_operator_positive_definite"],
        |t, rng| {
            let mesh = if t % 2 == 0 {
                let n = rng.gen_range(10..=60);
                synth::fan_polygon(rng, n)
            } else {
                synth::disk_mesh(1 + (t as usize / 2) % 4)
            };
            let mu = synth::random_mu_faces(rng, mesh.n_faces(), 0.9);
            let pins = random_distinct_pins(rng, &mesh);
            let system = match LsqcSystem::assemble(&mesh, &mu, &pins) {
                Ok(s) => s,
                Err(e) => {
                    return vec![
                        (0, Err(format!("assembly failed: {e}"))),
                        (1, Err(format!("assembly failed: {e}"))),
                    ]
                }
            };
            let mut outcomes = Vec::new();

            let unique = (|| -> Result<(), String> {
                let direct = system.solve().map_err(|e| format!("direct solve: {e}"))?;
                let jacobi = system
                    .solve_iterative(None)
                    .map_err(|e| format!("iterative solve: {e}"))?;
                let warm = system
                    .solve_iterative(Some(&direct))
                    .map_err(|e| format!("warm-started solve: {e}"))?;
                let scale = direct
                    .positions()
                    .iter()
                    .map(|z| z.norm())
                    .fold(1.0, f64::max);
                let d_jacobi = max_abs_diff(direct.positions(), jacobi.positions());
                let d_warm = max_abs_diff(direct.positions(), warm.positions());
                if d_jacobi > TOL_SOLUTION_AGREEMENT * scale {
                    return Err(format!(
                        "cold-start iterative solution deviates by {d_jacobi:.3e}"
                    ));
                }
                if d_warm > TOL_SOLUTION_AGREEMENT * scale {
                    return Err(format!(
                        "warm-start iterative solution deviates by {d_warm:.3e}"
                    ));
                }
                Ok(())
            })();
            outcomes.push((0, unique));

            outcomes.push((1, normal_operator_spd(&system, mesh.n_faces())));
            outcomes
        },
    )
}

/// Build the realified rectangular system matrix densely and check that the
/// normal operator's smallest eigenvalue is strictly positive — an
/// independent route from the sparse profile factorization.
fn normal_operator_spd(system: &LsqcSystem, n_faces: usize) -> Result<(), String> {
    let nf = system.n_free();
    let m = {
        let mut m = nalgebra::DMatrix::<f64>::zeros(2 * n_faces, 2 * nf);
        for (fi, (w, c)) in system.rows.iter().zip(&system.cols).enumerate() {
            for j in 0..3 {
                if let Some(cj) = c[j] {
                    // Row product sum w * (x + iy): real part contributes
                    // Re(w) x - Im(w) y, imaginary part Im(w) x + Re(w) y.
                    m[(2 * fi, cj)] += w[j].re;
                    m[(2 * fi, nf + cj)] -= w[j].im;
                    m[(2 * fi + 1, cj)] += w[j].im;
                    m[(2 * fi + 1, nf + cj)] += w[j].re;
                }
            }
        }
        m
    };
    let h = m.transpose() * &m;
    let eigs = nalgebra::SymmetricEigen::new(h).eigenvalues;
    let max = eigs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) {
        return Err(format!("normal operator has no positive eigenvalue: max {max:.3e}"));
    }
    if min <= TOL_EIG_RELATIVE * max {
        return Err(format!(
            "normal operator nearly singular: min {min:.3e} vs max {max:.3e}"
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Exact reproduction on fan polygons
// ---------------------------------------------------------------------------

fn run_exact_bc(options: &SuiteOptions) -> SuiteReport {
    let assemble_options = AssembleOptions {
        skip_row_scaling: options.break_scaling,
    };
    aggregate(
        Suite::ExactBc,
        options,
        &["recovered_mu_matches_input", "residual_energy_vanishes"],
        move |_t, rng| {
            let n = rng.gen_range(10..=60);
            let mesh = synth::fan_polygon(rng, n);
            let mu = synth::random_mu_faces(rng, mesh.n_faces(), 0.8);
            let (pi, pj) = lsqc::pick_pins(&mesh);
            let pins = [
                Pin::new(pi, mesh.vertex_c(pi)),
                Pin::new(pj, mesh.vertex_c(pj)),
            ];
            let solved = LsqcSystem::assemble_with_options(&mesh, &mu, &pins, assemble_options)
                .and_then(|s| s.solve());
            let map = match solved {
                Ok(m) => m,
                Err(e) => {
                    return vec![
                        (0, Err(format!("solve failed: {e}"))),
                        (1, Err(format!("solve failed: {e}"))),
                    ]
                }
            };
            let recovery = (|| -> Result<(), String> {
                let (recovered, degenerate) = beltrami::bc_from_map(&mesh, map.positions());
                if !degenerate.is_empty() {
                    return Err(format!("degenerate image faces: {degenerate:?}"));
                }
                let err = max_abs_diff(&recovered, &mu);
                if err > TOL_EXACT {
                    return Err(format!("max coefficient error {err:.3e}"));
                }
                Ok(())
            })();
            let energy = if map.energy() <= TOL_EXACT_ENERGY {
                Ok(())
            } else {
                Err(format!("residual energy {:.3e}", map.energy()))
            };
            vec![(0, recovery), (1, energy)]
        },
    )
}

// ---------------------------------------------------------------------------
// Homeomorphism reconstruction
// ---------------------------------------------------------------------------

fn run_reconstruct(options: &SuiteOptions) -> SuiteReport {
    aggregate(
        Suite::Reconstruct,
        options,
        &["homeomorphism_reproduced"],
        |t, rng| {
            // Mostly small disks with an occasional near-2k-vertex one.
            let m = if t % 25 == 24 { 25 } else { 2 + (t as usize % 9) };
            let mesh = synth::disk_mesh(m);
            let outcome = (|| -> Result<(), String> {
                let target = synth::random_homeomorphism(rng, &mesh);
                let (mu, degenerate) = beltrami::bc_from_map(&mesh, &target);
                if !degenerate.is_empty() {
                    return Err(format!("deformation degenerates faces {degenerate:?}"));
                }
                let sup = mu.iter().map(|z| z.norm()).fold(0.0, f64::max);
                if sup >= 1.0 {
                    return Err(format!("deformation not quasiconformal: sup |mu| = {sup}"));
                }
                let (pi, pj) = lsqc::pick_pins(&mesh);
                let pins = [Pin::new(pi, target[pi]), Pin::new(pj, target[pj])];
                let map = LsqcSystem::assemble(&mesh, &mu, &pins)
                    .and_then(|s| s.solve())
                    .map_err(|e| format!("solve failed: {e}"))?;
                let err = max_abs_diff(map.positions(), &target);
                if err > TOL_EXACT {
                    return Err(format!(
                        "reconstruction error {err:.3e} on {} vertices",
                        mesh.n_vertices()
                    ));
                }
                Ok(())
            })();
            vec![(0, outcome)]
        },
    )
}

// ---------------------------------------------------------------------------
// Similarity equivariance
// ---------------------------------------------------------------------------

fn run_similarity(options: &SuiteOptions) -> SuiteReport {
    aggregate(
        Suite::Similarity,
        options,
        &["solution_transforms_with_pin_targets"],
        |t, rng| {
            let mesh = if t % 2 == 0 {
                let n = rng.gen_range(10..=40);
                synth::fan_polygon(rng, n)
            } else {
                synth::disk_mesh(1 + (t as usize / 2) % 4)
            };
            let mu = synth::random_mu_faces(rng, mesh.n_faces(), 0.8);
            let pins = random_distinct_pins(rng, &mesh);
            let z = C64::from_polar(rng.gen_range(0.5..2.0), rng.gen_range(0.0..std::f64::consts::TAU));
            let shift = random_box(rng, 1.0);
            let outcome = (|| -> Result<(), String> {
                let base = LsqcSystem::assemble(&mesh, &mu, &pins)
                    .and_then(|s| s.solve())
                    .map_err(|e| format!("base solve failed: {e}"))?;
                let moved_pins = [
                    Pin::new(pins[0].vertex, z * pins[0].target + shift),
                    Pin::new(pins[1].vertex, z * pins[1].target + shift),
                ];
                let moved = LsqcSystem::assemble(&mesh, &mu, &moved_pins)
                    .and_then(|s| s.solve())
                    .map_err(|e| format!("transformed solve failed: {e}"))?;
                let predicted: Vec<C64> =
                    base.positions().iter().map(|&u| z * u + shift).collect();
                let err = max_abs_diff(moved.positions(), &predicted);
                if err > TOL_EXACT {
                    return Err(format!("equivariance error {err:.3e} for z = {z}"));
                }
                Ok(())
            })();
            vec![(0, outcome)]
        },
    )
}

// ---------------------------------------------------------------------------
// Face-split (resolution) consistency
// ---------------------------------------------------------------------------

fn run_resolution(options: &SuiteOptions) -> SuiteReport {
    let assemble_options = AssembleOptions {
        skip_row_scaling: options.break_scaling,
    };
    aggregate(
        Suite::Resolution,
        options,
        &["split_solution_is_barycentric_interpolation"],
        move |t, rng| {
            let mesh = synth::disk_mesh(1 + (t as usize % 4));
            let mu = synth::random_mu_faces(rng, mesh.n_faces(), 0.8);
            let (pi, pj) = lsqc::pick_pins(&mesh);
            let pins = [
                Pin::new(pi, mesh.vertex_c(pi)),
                Pin::new(pj, mesh.vertex_c(pj)),
            ];
            let face = rng.gen_range(0..mesh.n_faces());
            let raw = [
                rng.gen_range(0.15..1.0),
                rng.gen_range(0.15..1.0),
                rng.gen_range(0.15..1.0),
            ];
            let sum: f64 = raw.iter().sum();
            let alpha = [raw[0] / sum, raw[1] / sum, raw[2] / sum];
            let outcome = (|| -> Result<(), String> {
                let coarse = LsqcSystem::assemble_with_options(&mesh, &mu, &pins, assemble_options)
                    .and_then(|s| s.solve())
                    .map_err(|e| format!("coarse solve failed: {e}"))?;
                let (fine_mesh, new_vertex) = mesh
                    .split_face(face, alpha)
                    .map_err(|e| format!("split failed: {e}"))?;
                // The child reusing the parent's slot and the two appended
                // children all inherit the parent's coefficient.
                let mut fine_mu = mu.clone();
                fine_mu.push(mu[face]);
                fine_mu.push(mu[face]);
                let fine =
                    LsqcSystem::assemble_with_options(&fine_mesh, &fine_mu, &pins, assemble_options)
                        .and_then(|s| s.solve())
                        .map_err(|e| format!("fine solve failed: {e}"))?;
                let err_old = max_abs_diff(
                    &fine.positions()[..mesh.n_vertices()],
                    coarse.positions(),
                );
                let [v1, v2, v3] = mesh.faces()[face];
                let u = coarse.positions();
                let predicted = u[v1] * alpha[0] + u[v2] * alpha[1] + u[v3] * alpha[2];
                let err_new = (fine.positions()[new_vertex] - predicted).norm();
                if err_old > TOL_EXACT {
                    return Err(format!("pre-existing vertices moved by {err_old:.3e}"));
                }
                if err_new > TOL_EXACT {
                    return Err(format!(
                        "split vertex off its barycentric prediction by {err_new:.3e}"
                    ));
                }
                Ok(())
            })();
            vec![(0, outcome)]
        },
    )
}

// ---------------------------------------------------------------------------
// End-to-end gradient verification
// ---------------------------------------------------------------------------

fn random_params(rng: &mut SeededRng, mesh: &TriMesh) -> OptimParams {
    let mut p = OptimParams::init(mesh);
    for m in &mut p.mu_tilde {
        *m = random_box(rng, 0.15);
    }
    p.log_temp = rng.gen_range(-0.3..0.3);
    p.phi = rng.gen_range(-0.5..0.5);
    p.s_tilde = rng.gen_range(-0.2..0.2);
    p.r = random_box(rng, 0.3);
    p
}

/// Pick the flat components to difference: the five scalar tail slots plus
/// a handful of coefficient slots.
fn fd_components(rng: &mut SeededRng, dim: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (dim - 5..dim).collect();
    for _ in 0..6 {
        idx.push(rng.gen_range(0..dim - 5));
    }
    idx.sort_unstable();
    idx.dedup();
    idx
}

fn compare_gradients(
    analytic: &[f64],
    components: &[usize],
    mut value_at: impl FnMut(&[f64]) -> Result<f64, String>,
    base_flat: &[f64],
) -> Result<(), String> {
    for &k in components {
        let mut plus = base_flat.to_vec();
        plus[k] += FD_STEP;
        let mut minus = base_flat.to_vec();
        minus[k] -= FD_STEP;
        let fd = (value_at(&plus)? - value_at(&minus)?) / (2.0 * FD_STEP);
        let a = analytic[k];
        let scale = a.abs().max(fd.abs());
        if scale < FD_FLOOR || (a - fd).abs() <= FD_ABS_NOISE {
            continue;
        }
        let rel = (a - fd).abs() / scale;
        if rel > TOL_FD_REL {
            return Err(format!(
                "component {k}: adjoint {a:.9e} vs finite difference {fd:.9e} (rel {rel:.3e})"
            ));
        }
    }
    Ok(())
}

fn adjoint_density_trial(t: u64, rng: &mut SeededRng) -> Result<(), String> {
    let mesh = synth::disk_mesh(8 + (t as usize / 2) % 5);
    let mut params = random_params(rng, &mesh);
    let barrier_active = t % 8 == 0;
    let barrier_omega = if barrier_active {
        // Keep a comfortable margin from the hinge kink so the centered
        // difference never straddles it.
        params.s_tilde = rng.gen_range(0.05..0.2);
        rng.gen_range(0.5..0.7)
    } else {
        1.5
    };
    let center = [rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)];
    let populations = synth::gaussian_peak_population(
        &mesh,
        center,
        rng.gen_range(0.3..0.6),
        rng.gen_range(1.0..3.0),
    );
    let problem = DensityProblem {
        mesh: mesh.clone(),
        populations,
        barrier_omega,
        barrier_weight: 10.0,
    };
    let weights = [1.0, 5e-2, 1e-3];
    let pins = params.pins(&mesh);
    let r_interp = mesh.build_interp(mesh.vertices());
    let mut system = None;
    let evaluation =
        optimize::density_eval(&problem, &params, weights, &pins, &mut system, &r_interp)
            .map_err(|e| format!("evaluation failed: {e}"))?;
    let analytic = evaluation.grads.to_flat();
    let base_flat = params.to_flat();
    let components = fd_components(rng, base_flat.len());
    let mut probe = params.clone();
    compare_gradients(
        &analytic,
        &components,
        |flat| {
            probe.set_from_flat(flat);
            optimize::density_eval(&problem, &probe, weights, &pins, &mut system, &r_interp)
                .map(|e| e.report.total)
                .map_err(|e| format!("finite-difference evaluation failed: {e}"))
        },
        &base_flat,
    )
}

fn adjoint_register_trial(t: u64, rng: &mut SeededRng) -> Result<(), String> {
    let moving = synth::disk_mesh(8 + (t as usize / 2) % 5);
    // A larger static domain so most (not necessarily all) image faces stay
    // inside it.
    let static_mesh = {
        let scaled: Vec<[f64; 2]> = moving
            .vertices()
            .iter()
            .map(|&[x, y]| [1.7 * x, 1.7 * y])
            .collect();
        TriMesh::new(scaled, moving.faces().to_vec()).expect("scaled disk must validate")
    };
    let params = random_params(rng, &moving);
    let moving_intensity: Vec<f64> = moving
        .vertices()
        .iter()
        .map(|&p| synth::smooth_intensity(p))
        .collect();
    let static_intensity: Vec<f64> = static_mesh
        .vertices()
        .iter()
        .map(|&p| synth::smooth_intensity(p))
        .collect();
    let boundary: Vec<usize> = moving
        .boundary_loops()
        .iter()
        .flat_map(|l| l.iter().copied())
        .collect();
    let chunk = (boundary.len() / 3).max(1);
    let region_pairs: Vec<RegionPair> = boundary
        .chunks(chunk)
        .take(3)
        .map(|vs| RegionPair {
            moving_vertices: vs.to_vec(),
            static_points: vs
                .iter()
                .map(|&v| moving.vertex_c(v) + random_box(rng, 0.15))
                .collect(),
        })
        .collect();
    let problem = RegistrationProblem {
        moving: moving.clone(),
        static_mesh: static_mesh.clone(),
        moving_intensity: moving_intensity.clone(),
        static_intensity: static_intensity.clone(),
        region_pairs,
        weights: RegWeights::default(),
    };
    let w = RegWeights::default();
    let weights = [w.intensity, w.chamfer, w.bc, w.smooth];
    let pins = params.pins(&moving);
    let r_interp = moving.build_interp(moving.vertices());
    let mut system = None;
    let evaluation =
        optimize::register_eval(&problem, &params, weights, &pins, &mut system, &r_interp)
            .map_err(|e| format!("evaluation failed: {e}"))?;
    let analytic = evaluation.grads.to_flat();

    // Freeze every assignment-valued branch at the base point so the
    // centered differences probe the same smooth piece the adjoint
    // differentiates.
    let base_positions = &evaluation.positions;
    let overlap = energies::overlap_region(&moving, base_positions, &static_mesh);
    let intensity_asg =
        energies::intensity_assignments(&moving, base_positions, &static_mesh, &overlap);
    let chamfer_asg: Vec<energies::ChamferAssignments> = problem
        .region_pairs
        .iter()
        .map(|pair| {
            let a: Vec<C64> = pair
                .moving_vertices
                .iter()
                .map(|&v| base_positions[v])
                .collect();
            energies::chamfer_assignments(&a, &pair.static_points)
        })
        .collect();

    let base_flat = params.to_flat();
    let components = fd_components(rng, base_flat.len());
    let mut probe = params.clone();
    compare_gradients(
        &analytic,
        &components,
        |flat| {
            probe.set_from_flat(flat);
            let (_, positions) = optimize::forward(&probe, &moving, &r_interp)
                .map_err(|e| format!("finite-difference forward failed: {e}"))?;
            let temp = probe.log_temp.exp();
            let mu_vertex = beltrami::activation_field(&probe.mu_tilde, temp);
            let mut chamfer = 0.0;
            for (pair, asg) in problem.region_pairs.iter().zip(&chamfer_asg) {
                let a: Vec<C64> = pair
                    .moving_vertices
                    .iter()
                    .map(|&v| positions[v])
                    .collect();
                chamfer += energies::chamfer_with_assignments(&a, &pair.static_points, asg).0;
            }
            let intensity = energies::intensity_mismatch_with_assignments(
                &moving,
                &positions,
                &moving_intensity,
                &static_mesh,
                &static_intensity,
                &intensity_asg,
            )
            .0;
            let bc = energies::bc_energy(&mu_vertex).0;
            let smooth = energies::smoothness_energy(&moving, &mu_vertex).0;
            Ok(weights[0] * intensity + weights[1] * chamfer + weights[2] * bc
                + weights[3] * smooth)
        },
        &base_flat,
    )
}

fn run_adjoint(options: &SuiteOptions) -> SuiteReport {
    aggregate(
        Suite::Adjoint,
        options,
        &["density_gradients_match_finite_differences", "registration_gradients_match_finite_differences"],
        |t, rng| {
            if t % 2 == 0 {
                vec![(0, adjoint_density_trial(t, rng))]
            } else {
                vec![(1, adjoint_register_trial(t, rng))]
            }
        },
    )
}
