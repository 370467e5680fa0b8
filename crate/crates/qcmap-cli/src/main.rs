//! Command-line surface over the mapping toolkit: mesh validation, one-shot
//! solves, coefficient recovery, density-equalization and registration jobs,
//! and the randomized property suites.
//!
//! Exit codes are fixed for scripting: 0 success, 1 property or numeric
//! failure, 2 input error, 3 mesh validation failure, 4 coefficient out of
//! range, 5 connectivity mismatch. Verbosity is controlled by the
//! `QCMAP_LOG` environment variable (`error`..`trace`); warnings print by
//! default. All outputs are plain text (OFF/OBJ/CSV/JSON) and, except for
//! the wall-clock column of optimization traces, byte-identical across
//! reruns with the same inputs and seed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use qcmap::beltrami;
use qcmap::energies::{self, RegistrationProblem};
use qcmap::lsqc::{self, LsqcError, LsqcSystem, Pin};
use qcmap::mesh::{self, MeshError, MeshFormat, TriMesh};
use qcmap::optimize::{self, OptimConfig, OptimError, RunResult};
use qcmap::props::{self, Suite, SuiteOptions};
use qcmap::C64;

const EXIT_PROPERTY: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_VALIDATION: u8 = 3;
const EXIT_MU_RANGE: u8 = 4;
const EXIT_MISMATCH: u8 = 5;

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    fn input(message: impl Into<String>) -> Self {
        Self::new(EXIT_INPUT, message)
    }
}

type CliResult<T> = Result<T, CliError>;

fn mesh_error(e: MeshError) -> CliError {
    let code = match &e {
        MeshError::Validation { .. } => EXIT_VALIDATION,
        _ => EXIT_INPUT,
    };
    CliError::new(code, e.to_string())
}

fn lsqc_error(e: LsqcError) -> CliError {
    let code = match &e {
        LsqcError::MuOutOfRange { .. } => EXIT_MU_RANGE,
        LsqcError::Solver(_) | LsqcError::MismatchedSystem => EXIT_PROPERTY,
        _ => EXIT_INPUT,
    };
    CliError::new(code, e.to_string())
}

fn optim_error(e: OptimError) -> CliError {
    match e {
        OptimError::Solve(inner) => lsqc_error(inner),
        OptimError::Energy(inner) => CliError::input(inner.to_string()),
        OptimError::NonFiniteGradient { .. } => CliError::new(EXIT_PROPERTY, e.to_string()),
    }
}

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

/// Free-boundary quasiconformal mapping toolkit.
#[derive(Parser)]
#[command(name = "qcmap", version, about)]
struct Cli {
    /// Worker threads for the parallel sections (property suites); 1 keeps
    /// everything on a single thread.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a mesh, printing summary counts.
    Validate(ValidateArgs),
    /// Solve the pinned least-squares map for a prescribed coefficient field.
    Solve(SolveArgs),
    /// Recover per-face Beltrami coefficients from a domain/image mesh pair.
    RecoverBc(RecoverBcArgs),
    /// Optimize a density-equalizing map described by a job file.
    Densmap(OptimArgs),
    /// Optimize a partial-overlap registration described by a job file.
    Register(OptimArgs),
    /// Run randomized property suites and report JSON verdicts.
    Proptest(ProptestArgs),
}

#[derive(Args)]
struct ValidateArgs {
    /// Mesh file (OFF or OBJ).
    #[arg(long)]
    mesh: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    /// Domain mesh file (OFF or OBJ).
    #[arg(long)]
    mesh: PathBuf,
    /// Coefficient file: JSON field (per-face and/or per-vertex) or CSV
    /// (one `re,im` per face).
    #[arg(long)]
    mu: PathBuf,
    /// Pinned vertices: `i,j`, or `auto` to pick a well-separated boundary
    /// pair. Pins are held at their domain positions.
    #[arg(long, default_value = "auto")]
    pins: String,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RecoverBcArgs {
    /// Domain mesh file.
    #[arg(long)]
    mesh: PathBuf,
    /// Image mesh file; must share the domain's connectivity.
    #[arg(long)]
    mapped: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OptimArgs {
    /// Mesh being deformed (the domain mesh for density jobs, the moving
    /// mesh for registration jobs).
    #[arg(long)]
    mesh: PathBuf,
    /// Job description (JSON).
    #[arg(long)]
    job: PathBuf,
    /// Optimizer configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Seed recorded in the run configuration (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Cap on optimizer iterations (overrides the config file).
    #[arg(long)]
    max_iters: Option<usize>,
    /// Override an objective weight, e.g. `--weight bc=1.0`; repeatable.
    #[arg(long = "weight", value_name = "NAME=VALUE")]
    weights: Vec<String>,
    /// Normalize input coordinates by `r0 = max ||v||` before optimizing,
    /// so free-boundary parameterizations of arbitrary scale work
    /// unchanged. Outputs are in the normalized coordinates; the summary
    /// records `r0`.
    #[arg(long = "scale-r0")]
    scale_r0: bool,
    /// Dump the best iterate's gradient vectors as JSON (debug aid for
    /// gradient harnesses).
    #[arg(long = "dump-grads", hide = true)]
    dump_grads: bool,
}

#[derive(Args)]
struct ProptestArgs {
    /// Suite to run: all, rank, exact_bc, reconstruct, similarity,
    /// resolution, or adjoint.
    #[arg(long, default_value = "all")]
    suite: String,
    /// Base seed; trial `t` derives its generator from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trials per suite.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Also write the JSON verdicts to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Assemble with the deliberately broken row scaling (negative
    /// control; makes the face-split consistency suite fail).
    #[arg(long = "debug-break-scaling", hide = true)]
    debug_break_scaling: bool,
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn load_mesh_file(path: &Path) -> CliResult<TriMesh> {
    let format = MeshFormat::from_path(path).ok_or_else(|| {
        CliError::input(format!(
            "cannot infer mesh format of {} (expected .off or .obj)",
            path.display()
        ))
    })?;
    mesh::load_mesh(path, format).map_err(mesh_error)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text)
        .map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

fn ensure_out_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::input(format!("cannot create {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::input(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

/// Write the image mesh in the same format as the input mesh.
fn write_image_mesh(
    out_dir: &Path,
    input: &Path,
    positions: &[C64],
    faces: &[[usize; 3]],
) -> CliResult<PathBuf> {
    let vertices: Vec<[f64; 2]> = positions.iter().map(|z| [z.re, z.im]).collect();
    let (name, writer): (&str, fn(&Path, &[[f64; 2]], &[[usize; 3]]) -> Result<(), MeshError>) =
        match MeshFormat::from_path(input) {
            Some(MeshFormat::Obj) => ("map.obj", mesh::write_obj),
            _ => ("map.off", mesh::write_off),
        };
    let path = out_dir.join(name);
    writer(&path, &vertices, faces).map_err(mesh_error)?;
    Ok(path)
}

fn parse_pins(spec: &str, mesh: &TriMesh) -> CliResult<[Pin; 2]> {
    let (i, j) = if spec == "auto" {
        lsqc::pick_pins(mesh)
    } else {
        let parts: Vec<&str> = spec.split(',').collect();
        if parts.len() != 2 {
            return Err(CliError::input(format!(
                "--pins expects `i,j` or `auto`, got `{spec}`"
            )));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CliError::input(format!("bad pin index `{s}`")))
        };
        (parse(parts[0])?, parse(parts[1])?)
    };
    let n = mesh.n_vertices();
    for v in [i, j] {
        if v >= n {
            return Err(CliError::input(format!(
                "pin vertex {v} out of range (mesh has {n} vertices)"
            )));
        }
    }
    if i == j {
        return Err(CliError::input(format!("pins must be distinct, got {i},{j}")));
    }
    Ok([
        Pin::new(i, mesh.vertex_c(i)),
        Pin::new(j, mesh.vertex_c(j)),
    ])
}

fn load_mu(path: &Path, mesh: &TriMesh) -> CliResult<Vec<C64>> {
    let is_json = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.eq_ignore_ascii_case("json"))
        .unwrap_or(false);
    let mu = if is_json {
        let field = beltrami::read_field_json(path).map_err(CliError::input)?;
        if let Some(per_face) = field.per_face {
            per_face
        } else if let Some(per_vertex) = &field.per_vertex {
            if per_vertex.len() != mesh.n_vertices() {
                return Err(CliError::input(format!(
                    "per-vertex coefficient count {} does not match vertex count {}",
                    per_vertex.len(),
                    mesh.n_vertices()
                )));
            }
            beltrami::vertex_to_face(mesh, per_vertex)
        } else {
            return Err(CliError::input(format!(
                "{} holds neither per-face nor per-vertex coefficients",
                path.display()
            )));
        }
    } else {
        beltrami::read_mu_csv(path).map_err(CliError::input)?
    };
    if mu.len() != mesh.n_faces() {
        return Err(CliError::input(format!(
            "coefficient count {} does not match face count {}",
            mu.len(),
            mesh.n_faces()
        )));
    }
    Ok(mu)
}

fn load_config(args: &OptimArgs) -> CliResult<OptimConfig> {
    let mut config = match &args.config {
        Some(path) => optimize::load_config(path).map_err(CliError::input)?,
        None => OptimConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(max_iters) = args.max_iters {
        if max_iters == 0 {
            return Err(CliError::input("--max-iters must be at least 1"));
        }
        config.max_iters = max_iters;
    }
    for spec in &args.weights {
        let (name, value) = spec.split_once('=').ok_or_else(|| {
            CliError::input(format!("--weight expects NAME=VALUE, got `{spec}`"))
        })?;
        let value: f64 = value
            .parse()
            .map_err(|_| CliError::input(format!("bad weight value in `{spec}`")))?;
        config.weights.insert(name.to_string(), value);
    }
    Ok(config)
}

fn r0_of(mesh: &TriMesh) -> f64 {
    mesh.vertices()
        .iter()
        .map(|v| v[0].hypot(v[1]))
        .fold(0.0, f64::max)
}

fn scale_mesh(mesh: &TriMesh, factor: f64) -> CliResult<TriMesh> {
    let vertices: Vec<[f64; 2]> = mesh
        .vertices()
        .iter()
        .map(|&[x, y]| [factor * x, factor * y])
        .collect();
    TriMesh::new(vertices, mesh.faces().to_vec()).map_err(mesh_error)
}

/// Fixed-width histogram of `values` (non-finite entries skipped): rows of
/// `bin_start,bin_end,count` covering `[0, max]`.
fn histogram_csv(values: impl Iterator<Item = f64>, width: f64) -> String {
    let finite: Vec<f64> = values.filter(|v| v.is_finite()).collect();
    let max = finite.iter().cloned().fold(0.0, f64::max);
    let bins = ((max / width).floor() as usize + 1).max(1);
    let mut counts = vec![0usize; bins];
    for v in &finite {
        let k = ((v / width).floor() as usize).min(bins - 1);
        counts[k] += 1;
    }
    let mut out = String::from("bin_start,bin_end,count\n");
    for (k, c) in counts.iter().enumerate() {
        let _ = writeln!(out, "{},{},{c}", width * k as f64, width * (k + 1) as f64);
    }
    out
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_validate(args: &ValidateArgs) -> CliResult<()> {
    let mesh = load_mesh_file(&args.mesh)?;
    let area = 0.5 * qcmap::Kahan::sum_iter(mesh.face_areas().iter().copied());
    println!(
        "mesh ok: {} vertices, {} faces, {} boundary loops, total area {area}",
        mesh.n_vertices(),
        mesh.n_faces(),
        mesh.boundary_loops().len()
    );
    Ok(())
}

#[derive(Serialize)]
struct SolveReport {
    energy: f64,
    flipped_count: usize,
    pins: [usize; 2],
    residual: f64,
}

fn cmd_solve(args: &SolveArgs) -> CliResult<()> {
    let mesh = load_mesh_file(&args.mesh)?;
    let mu = load_mu(&args.mu, &mesh)?;
    let pins = parse_pins(&args.pins, &mesh)?;
    let system = LsqcSystem::assemble(&mesh, &mu, &pins).map_err(lsqc_error)?;
    let map = system.solve().map_err(lsqc_error)?;
    ensure_out_dir(&args.out)?;
    let mesh_path = write_image_mesh(&args.out, &args.mesh, map.positions(), mesh.faces())?;
    let flipped = lsqc::flipped_faces(mesh.faces(), map.positions());
    let report = SolveReport {
        energy: map.energy(),
        flipped_count: flipped.len(),
        pins: [pins[0].vertex, pins[1].vertex],
        residual: map.energy().sqrt(),
    };
    write_json(&args.out.join("report.json"), &report)?;
    println!(
        "solved: energy {}, {} flipped faces, image mesh {}",
        report.energy,
        report.flipped_count,
        mesh_path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct RecoverSummary {
    mean_abs_mu: f64,
    max_abs_mu: f64,
    degenerate_faces: usize,
}

fn cmd_recover_bc(args: &RecoverBcArgs) -> CliResult<()> {
    let mesh = load_mesh_file(&args.mesh)?;
    let mapped = load_mesh_file(&args.mapped)?;
    if mesh.n_vertices() != mapped.n_vertices() || mesh.faces() != mapped.faces() {
        return Err(CliError::new(
            EXIT_MISMATCH,
            format!(
                "connectivity mismatch: {} has {} vertices / {} faces, {} has {} / {}",
                args.mesh.display(),
                mesh.n_vertices(),
                mesh.n_faces(),
                args.mapped.display(),
                mapped.n_vertices(),
                mapped.n_faces()
            ),
        ));
    }
    let (mu, degenerate) = beltrami::bc_from_map(&mesh, &mapped.positions_c());
    if !degenerate.is_empty() {
        log::warn!(
            "{} faces have a degenerate image; their coefficients are NaN",
            degenerate.len()
        );
    }
    ensure_out_dir(&args.out)?;
    beltrami::write_mu_csv(&args.out.join("mu.csv"), &mu).map_err(CliError::input)?;
    let abs: Vec<f64> = mu.iter().map(|z| z.norm()).filter(|v| v.is_finite()).collect();
    let summary = RecoverSummary {
        mean_abs_mu: if abs.is_empty() {
            0.0
        } else {
            qcmap::Kahan::sum_iter(abs.iter().copied()) / abs.len() as f64
        },
        max_abs_mu: abs.iter().cloned().fold(0.0, f64::max),
        degenerate_faces: degenerate.len(),
    };
    write_text(
        &args.out.join("bc_hist.csv"),
        &histogram_csv(mu.iter().map(|z| z.norm()), 0.05),
    )?;
    write_json(&args.out.join("summary.json"), &summary)?;
    println!(
        "recovered {} coefficients: mean |mu| {}, max |mu| {}",
        mu.len(),
        summary.mean_abs_mu,
        summary.max_abs_mu
    );
    Ok(())
}

#[derive(Serialize)]
struct ParamDump {
    phi: f64,
    s_tilde: f64,
    r: [f64; 2],
    log_temp: f64,
}

#[derive(Serialize)]
struct GradDump {
    mu_tilde: Vec<[f64; 2]>,
    log_temp: f64,
    phi: f64,
    s_tilde: f64,
    r: [f64; 2],
    positions: Vec<[f64; 2]>,
}

fn dump_grads(out: &Path, result: &RunResult) -> CliResult<()> {
    let dump = GradDump {
        mu_tilde: result.grads.mu_tilde.iter().map(|g| [g.re, g.im]).collect(),
        log_temp: result.grads.log_temp,
        phi: result.grads.phi,
        s_tilde: result.grads.s_tilde,
        r: [result.grads.r.re, result.grads.r.im],
        positions: result
            .report
            .grad_positions
            .iter()
            .map(|g| [g.re, g.im])
            .collect(),
    };
    write_json(&out.join("grads.json"), &dump)
}

#[derive(Serialize)]
struct DensmapSummary {
    initial_variance: f64,
    final_variance: f64,
    reduction_percent: f64,
    iterations: usize,
    best_iteration: usize,
    flipped_count: usize,
    max_abs_mu: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    r0: Option<f64>,
}

fn cmd_densmap(args: &OptimArgs) -> CliResult<()> {
    let mut mesh = load_mesh_file(&args.mesh)?;
    let r0 = if args.scale_r0 {
        let r0 = r0_of(&mesh);
        if !(r0 > 0.0) {
            return Err(CliError::input("cannot normalize: mesh has zero extent"));
        }
        mesh = scale_mesh(&mesh, 1.0 / r0)?;
        Some(r0)
    } else {
        None
    };
    let problem = energies::load_density_job(&args.job, mesh).map_err(CliError::input)?;
    let config = load_config(args)?;
    let result = optimize::run_density(&problem, &config).map_err(optim_error)?;

    ensure_out_dir(&args.out)?;
    write_image_mesh(&args.out, &args.mesh, &result.positions, problem.mesh.faces())?;
    let densities = energies::face_densities(&problem.mesh, &problem.populations, &result.positions);
    let mut density_csv = String::from("face,density\n");
    for (f, d) in densities.iter().enumerate() {
        let _ = writeln!(density_csv, "{f},{d}");
    }
    write_text(&args.out.join("density.csv"), &density_csv)?;
    let width = {
        let max = densities.iter().cloned().filter(|d| d.is_finite()).fold(0.0, f64::max);
        if max > 0.0 { max / 20.0 } else { 1.0 }
    };
    write_text(
        &args.out.join("density_hist.csv"),
        &histogram_csv(densities.iter().copied(), width),
    )?;
    optimize::write_trace_csv(&args.out.join("trace.csv"), &result.trace)
        .map_err(CliError::input)?;
    let initial = result.trace.rows.first().map(|r| r.components["variance"]).unwrap_or(0.0);
    let fin = result.report.components["variance"];
    let summary = DensmapSummary {
        initial_variance: initial,
        final_variance: fin,
        reduction_percent: if initial > 0.0 { 100.0 * (1.0 - fin / initial) } else { 0.0 },
        iterations: result.iterations,
        best_iteration: result.best_iteration,
        flipped_count: result.report.degenerate_faces.len(),
        max_abs_mu: result.mu_vertex.iter().map(|z| z.norm()).fold(0.0, f64::max),
        r0,
    };
    write_json(&args.out.join("summary.json"), &summary)?;
    if args.dump_grads {
        dump_grads(&args.out, &result)?;
    }
    println!(
        "density variance {} -> {} ({}% reduction) in {} iterations",
        summary.initial_variance,
        summary.final_variance,
        summary.reduction_percent,
        summary.iterations
    );
    Ok(())
}

#[derive(Serialize)]
struct RegisterSummary {
    initial_mismatch: f64,
    final_mismatch: f64,
    mismatch_reduction_percent: f64,
    params: ParamDump,
    overlap_faces: usize,
    iterations: usize,
    best_iteration: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    r0: Option<f64>,
}

fn cmd_register(args: &OptimArgs) -> CliResult<()> {
    let moving = load_mesh_file(&args.mesh)?;
    let mut problem =
        energies::load_registration_job(&args.job, moving).map_err(CliError::input)?;
    // Both meshes live in one plane, so normalization must use one shared
    // factor or their relative geometry (and the overlap) would change.
    let r0 = if args.scale_r0 {
        let r0 = r0_of(&problem.moving).max(r0_of(&problem.static_mesh));
        if !(r0 > 0.0) {
            return Err(CliError::input("cannot normalize: meshes have zero extent"));
        }
        let inv = 1.0 / r0;
        problem = RegistrationProblem {
            moving: scale_mesh(&problem.moving, inv)?,
            static_mesh: scale_mesh(&problem.static_mesh, inv)?,
            region_pairs: problem
                .region_pairs
                .into_iter()
                .map(|mut pair| {
                    for p in &mut pair.static_points {
                        *p *= inv;
                    }
                    pair
                })
                .collect(),
            ..problem
        };
        Some(r0)
    } else {
        None
    };
    let config = load_config(args)?;
    let result = optimize::run_register(&problem, &config).map_err(optim_error)?;

    ensure_out_dir(&args.out)?;
    write_image_mesh(&args.out, &args.mesh, &result.positions, problem.moving.faces())?;
    let overlap =
        energies::overlap_region(&problem.moving, &result.positions, &problem.static_mesh);
    let mut overlap_csv = String::from("face\n");
    for f in &overlap {
        let _ = writeln!(overlap_csv, "{f}");
    }
    write_text(&args.out.join("overlap.csv"), &overlap_csv)?;

    // Per-face mismatch over the final overlap: |image area| and the
    // absolute intensity gap between the moving face mean and the static
    // sample at its image centroid.
    let assignments = energies::intensity_assignments(
        &problem.moving,
        &result.positions,
        &problem.static_mesh,
        &overlap,
    );
    let mut mismatch_csv = String::from("face,abs_area,abs_intensity_gap\n");
    let mut gaps = Vec::with_capacity(assignments.len());
    for (fi, loc) in &assignments {
        let f = &problem.moving.faces()[*fi];
        let area = 0.5
            * ((result.positions[f[1]] - result.positions[f[0]])
                .re
                .mul_add(
                    (result.positions[f[2]] - result.positions[f[0]]).im,
                    -((result.positions[f[1]] - result.positions[f[0]]).im
                        * (result.positions[f[2]] - result.positions[f[0]]).re),
                ))
            .abs();
        let i1 = (problem.moving_intensity[f[0]]
            + problem.moving_intensity[f[1]]
            + problem.moving_intensity[f[2]])
            / 3.0;
        let sf = &problem.static_mesh.faces()[loc.face];
        let i2 = loc.lambda[0] * problem.static_intensity[sf[0]]
            + loc.lambda[1] * problem.static_intensity[sf[1]]
            + loc.lambda[2] * problem.static_intensity[sf[2]];
        let gap = (i1 - i2).abs();
        gaps.push(gap);
        let _ = writeln!(mismatch_csv, "{fi},{area},{gap}");
    }
    write_text(&args.out.join("mismatch.csv"), &mismatch_csv)?;
    write_text(
        &args.out.join("mismatch_hist.csv"),
        &histogram_csv(gaps.into_iter(), 0.05),
    )?;
    optimize::write_trace_csv(&args.out.join("trace.csv"), &result.trace)
        .map_err(CliError::input)?;

    let initial = result.trace.rows.first().map(|r| r.components["intensity"]).unwrap_or(0.0);
    let fin = result.report.components["intensity"];
    let summary = RegisterSummary {
        initial_mismatch: initial,
        final_mismatch: fin,
        mismatch_reduction_percent: if initial > 0.0 {
            100.0 * (1.0 - fin / initial)
        } else {
            0.0
        },
        params: ParamDump {
            phi: result.params.phi,
            s_tilde: result.params.s_tilde,
            r: [result.params.r.re, result.params.r.im],
            log_temp: result.params.log_temp,
        },
        overlap_faces: overlap.len(),
        iterations: result.iterations,
        best_iteration: result.best_iteration,
        r0,
    };
    write_json(&args.out.join("summary.json"), &summary)?;
    if args.dump_grads {
        dump_grads(&args.out, &result)?;
    }
    println!(
        "intensity mismatch {} -> {} ({}% reduction), overlap {} faces",
        summary.initial_mismatch,
        summary.final_mismatch,
        summary.mismatch_reduction_percent,
        summary.overlap_faces
    );
    Ok(())
}

fn cmd_proptest(args: &ProptestArgs) -> CliResult<()> {
    let suites: Vec<Suite> = if args.suite == "all" {
        Suite::ALL.to_vec()
    } else {
        let suite = Suite::from_name(&args.suite).ok_or_else(|| {
            CliError::input(format!(
                "unknown suite `{}`; expected all, rank, exact_bc, reconstruct, similarity, resolution, or adjoint",
                args.suite
            ))
        })?;
        vec![suite]
    };
    let options = SuiteOptions {
        seed: args.seed,
        trials: args.trials,
        break_scaling: args.debug_break_scaling,
    };
    let reports = props::run_suites(&suites, &options);
    let json = serde_json::to_string_pretty(&reports)
        .map_err(|e| CliError::input(format!("cannot serialize verdicts: {e}")))?;
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            ensure_out_dir(parent)?;
        }
        write_text(out, &format!("{json}\n"))?;
    }
    println!("{json}");
    let failed: Vec<&props::SuiteReport> = reports.iter().filter(|r| !r.passed).collect();
    if let Some(first) = failed.first() {
        let detail = first
            .first_failure()
            .map(|f| format!("trial {} of suite {}: {}", f.trial, first.suite.name(), f.detail))
            .unwrap_or_default();
        return Err(CliError::new(
            EXIT_PROPERTY,
            format!(
                "{} of {} suites failed; failing seed {} ({detail})",
                failed.len(),
                reports.len(),
                args.seed
            ),
        ));
    }
    Ok(())
}

fn run(command: &Command) -> CliResult<()> {
    match command {
        Command::Validate(args) => cmd_validate(args),
        Command::Solve(args) => cmd_solve(args),
        Command::RecoverBc(args) => cmd_recover_bc(args),
        Command::Densmap(args) => cmd_densmap(args),
        Command::Register(args) => cmd_register(args),
        Command::Proptest(args) => cmd_proptest(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("QCMAP_LOG", "warn")).init();
    let cli = Cli::parse();
    if cli.jobs > 0 {
        // Ignore the error if a pool already exists (e.g. repeated init in
        // tests); the default pool is then used.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global();
    }
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
