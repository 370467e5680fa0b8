//! Objective terms for map optimization, each returning its value together
//! with hand-derived gradients.
//!
//! Gradients with respect to complex positions follow the convention of
//! [`crate::adjoint`]: `g = dL/dRe + i dL/dIm`. All the terms here are
//! piecewise smooth; the pieces are selected by discrete assignments
//! (nearest neighbors, overlap membership, the static face hit by a sample
//! point). Each assignment-dependent term therefore comes in two forms: a
//! plain one that derives the assignments from the current state, and a
//! `*_with_assignments` form that evaluates the smooth branch selected by
//! frozen assignments — the branch the reported gradients differentiate.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::beltrami;
use crate::mesh::{BaryLocation, MeshFormat, TriMesh};
use crate::synth;
use crate::{Kahan, C64};

/// Errors raised by energy evaluation.
#[derive(Debug, Error)]
pub enum EnergiesError {
    /// A chamfer region pair has an empty side.
    #[error("region pair {pair} has an empty point set")]
    EmptyRegion {
        /// Index of the offending pair.
        pair: usize,
    },
}

// ---------------------------------------------------------------------------
// Area helpers
// ---------------------------------------------------------------------------

/// Signed area enclosed by the image of the given vertex loops under
/// `positions` (shoelace formula, compensated summation). For the boundary
/// loops of a mesh this equals the sum of signed image face areas, interior
/// edges cancelling in pairs.
pub fn green_area(positions: &[C64], loops: &[Vec<usize>]) -> f64 {
    let mut acc = Kahan::new();
    for l in loops {
        for (i, &v) in l.iter().enumerate() {
            let a = positions[v];
            let b = positions[l[(i + 1) % l.len()]];
            acc.add(0.5 * (a.re * b.im - a.im * b.re));
        }
    }
    acc.value()
}

/// Signed area of the image of face `f`.
fn image_face_area(f: &[usize; 3], positions: &[C64]) -> f64 {
    let a = positions[f[0]];
    let b = positions[f[1]];
    let c = positions[f[2]];
    0.5 * ((b.re - a.re) * (c.im - a.im) - (b.im - a.im) * (c.re - a.re))
}

/// Gradient of the signed image area of face `f` with respect to each of
/// its corner positions: `dA/du_1 = (v_2 - v_3)/2`, `dA/dv_1 = (u_3 -
/// u_2)/2`, cyclic.
fn image_face_area_grad(f: &[usize; 3], positions: &[C64]) -> [C64; 3] {
    let mut g = [C64::new(0.0, 0.0); 3];
    for j in 0..3 {
        let b = positions[f[(j + 1) % 3]];
        let c = positions[f[(j + 2) % 3]];
        g[j] = C64::new(0.5 * (b.im - c.im), 0.5 * (c.re - b.re));
    }
    g
}

// ---------------------------------------------------------------------------
// Density equalization
// ---------------------------------------------------------------------------

/// Per-face image densities `rho_T = p_T / A_T` with signed image areas.
pub fn face_densities(mesh: &TriMesh, populations: &[f64], positions: &[C64]) -> Vec<f64> {
    mesh.faces()
        .iter()
        .zip(populations)
        .map(|(f, &p)| p / image_face_area(f, positions))
        .collect()
}

/// Variance of the per-face density `rho_T = p_T / A_T` around the global
/// density `P / A_total`, where `A_T` is the signed image area of face `T`
/// and the total area is taken from the image of the mesh boundary (which
/// equals the sum of face areas identically). Returns the energy and its
/// gradient with respect to the image positions.
///
/// At the minimum every face carries population proportionally to its
/// area. Signed areas keep the energy smooth; flipped faces are reported
/// separately by [`density_energy`].
pub fn density_variance(mesh: &TriMesh, populations: &[f64], positions: &[C64]) -> (f64, Vec<C64>) {
    let faces = mesh.faces();
    assert_eq!(populations.len(), faces.len(), "population per face required");
    assert_eq!(positions.len(), mesh.n_vertices());
    let total_pop: f64 = Kahan::sum_iter(populations.iter().copied());
    let total_area = green_area(positions, mesh.boundary_loops());
    let mean_rho = total_pop / total_area;

    let mut energy = Kahan::new();
    let mut sum_dev = Kahan::new();
    let mut grad = vec![C64::new(0.0, 0.0); positions.len()];
    for (f, &p) in faces.iter().zip(populations) {
        let area = image_face_area(f, positions);
        let dev = p / area - mean_rho;
        energy.add(dev * dev);
        sum_dev.add(dev);
        // dE/dA_T = -2 dev p / A^2, applied through the corner stencil.
        let da = image_face_area_grad(f, positions);
        let coeff = -2.0 * dev * p / (area * area);
        for j in 0..3 {
            grad[f[j]] += da[j] * coeff;
        }
    }
    // The mean density couples every face through the total area:
    // dE/dA_total = (sum_T 2 dev_T) P / A_total^2, applied through the
    // boundary shoelace stencil.
    let coeff = 2.0 * sum_dev.value() * total_pop / (total_area * total_area);
    for l in mesh.boundary_loops() {
        let k = l.len();
        for (i, &v) in l.iter().enumerate() {
            let prev = positions[l[(i + k - 1) % k]];
            let next = positions[l[(i + 1) % k]];
            grad[v] += C64::new(0.5 * (next.im - prev.im), 0.5 * (prev.re - next.re)) * coeff;
        }
    }
    (energy.value(), grad)
}

/// The full density objective `E_1`: density variance plus the one-sided
/// scale barrier `barrier_weight * max(0, exp(s_tilde) - barrier_omega)`
/// that discourages inflating the image to deflate the variance. Faces
/// with nonpositive image area are reported in the result; the variance is
/// still evaluated with signed areas.
pub fn density_energy(problem: &DensityProblem, positions: &[C64], s_tilde: f64) -> EnergyReport {
    let (variance, grad_positions) =
        density_variance(&problem.mesh, &problem.populations, positions);
    let (hinge, d_hinge) = scale_barrier(s_tilde, 1.0, problem.barrier_omega);
    let degenerate_faces: Vec<usize> = problem
        .mesh
        .faces()
        .iter()
        .enumerate()
        .filter(|(_, f)| image_face_area(f, positions) <= 0.0)
        .map(|(fi, _)| fi)
        .collect();
    let mut components = BTreeMap::new();
    components.insert("variance".to_string(), variance);
    components.insert("barrier".to_string(), hinge);
    EnergyReport {
        total: variance + problem.barrier_weight * hinge,
        components,
        grad_positions,
        grad_s_tilde: problem.barrier_weight * d_hinge,
        degenerate_faces,
    }
}

// ---------------------------------------------------------------------------
// Coefficient penalties
// ---------------------------------------------------------------------------

/// Mean squared modulus of the per-vertex coefficients,
/// `(1/|V|) sum |mu_v|^2`, with gradient `2 mu_v / |V|`.
pub fn bc_energy(mu_vertex: &[C64]) -> (f64, Vec<C64>) {
    let n = mu_vertex.len().max(1) as f64;
    let e = Kahan::sum_iter(mu_vertex.iter().map(|m| m.norm_sqr())) / n;
    let grad = mu_vertex.iter().map(|&m| m * (2.0 / n)).collect();
    (e, grad)
}

/// Mean squared gradient magnitude of the piecewise-linear interpolant of
/// the per-vertex coefficients, `(1/|F|) sum_T (|mu_x|^2 + |mu_y|^2)`, with
/// its gradient with respect to each vertex coefficient (the transpose of
/// the per-face gradient stencil).
pub fn smoothness_energy(mesh: &TriMesh, mu_vertex: &[C64]) -> (f64, Vec<C64>) {
    assert_eq!(mu_vertex.len(), mesh.n_vertices());
    let nf = mesh.n_faces().max(1) as f64;
    let grads = beltrami::face_gradient(mesh, mu_vertex);
    let e = Kahan::sum_iter(grads.iter().map(|[gx, gy]| gx.norm_sqr() + gy.norm_sqr())) / nf;
    let mut grad = vec![C64::new(0.0, 0.0); mu_vertex.len()];
    for (fi, f) in mesh.faces().iter().enumerate() {
        let d = mesh.face_areas()[fi];
        let p = |j: usize| mesh.vertices()[f[j]];
        let [gx, gy] = grads[fi];
        for j in 0..3 {
            // Stencil coefficients of corner j in the face gradient.
            let a = (p((j + 1) % 3)[1] - p((j + 2) % 3)[1]) / d;
            let b = (p((j + 2) % 3)[0] - p((j + 1) % 3)[0]) / d;
            grad[f[j]] += (gx * a + gy * b) * (2.0 / nf);
        }
    }
    (e, grad)
}

/// One-sided barrier on the similarity scale: `lambda * max(0, exp(s) -
/// omega)`, with derivative `lambda * exp(s)` once the scale exceeds
/// `omega` (zero at and below the threshold).
pub fn scale_barrier(s_tilde: f64, lambda: f64, omega: f64) -> (f64, f64) {
    let excess = s_tilde.exp() - omega;
    if excess > 0.0 {
        (lambda * excess, lambda * s_tilde.exp())
    } else {
        (0.0, 0.0)
    }
}

// ---------------------------------------------------------------------------
// Chamfer distance
// ---------------------------------------------------------------------------

/// Frozen nearest-neighbor assignments of a Chamfer evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChamferAssignments {
    /// For each point of the first set, the index of its nearest neighbor
    /// in the second.
    pub a_to_b: Vec<usize>,
    /// For each point of the second set, the index of its nearest neighbor
    /// in the first.
    pub b_to_a: Vec<usize>,
}

/// Nearest-neighbor assignments between two point sets (brute force,
/// distance ties resolved toward the smallest index).
pub fn chamfer_assignments(a: &[C64], b: &[C64]) -> ChamferAssignments {
    let nearest = |from: &[C64], to: &[C64]| -> Vec<usize> {
        from.iter()
            .map(|&p| {
                let mut best = (f64::INFINITY, 0usize);
                for (i, &q) in to.iter().enumerate() {
                    let d = (p - q).norm_sqr();
                    if d < best.0 {
                        best = (d, i);
                    }
                }
                best.1
            })
            .collect()
    };
    ChamferAssignments {
        a_to_b: nearest(a, b),
        b_to_a: nearest(b, a),
    }
}

/// Symmetric Chamfer distance: the mean squared nearest-neighbor distance
/// in both directions. Returns the value and its gradient with respect to
/// the first set (the second is treated as data). Assignments are derived
/// at the given configuration and frozen for the gradient.
pub fn chamfer(a: &[C64], b: &[C64]) -> (f64, Vec<C64>) {
    let assignments = chamfer_assignments(a, b);
    chamfer_with_assignments(a, b, &assignments)
}

/// [`chamfer`] evaluated on the smooth branch selected by frozen
/// `assignments`.
pub fn chamfer_with_assignments(
    a: &[C64],
    b: &[C64],
    assignments: &ChamferAssignments,
) -> (f64, Vec<C64>) {
    assert!(!a.is_empty() && !b.is_empty(), "chamfer needs nonempty sets");
    assert_eq!(assignments.a_to_b.len(), a.len());
    assert_eq!(assignments.b_to_a.len(), b.len());
    let na = a.len() as f64;
    let nb = b.len() as f64;
    let mut value = Kahan::new();
    let mut grad = vec![C64::new(0.0, 0.0); a.len()];
    for (i, (&p, &j)) in a.iter().zip(&assignments.a_to_b).enumerate() {
        let d = p - b[j];
        value.add(d.norm_sqr() / na);
        grad[i] += d * (2.0 / na);
    }
    for (&q, &i) in b.iter().zip(&assignments.b_to_a) {
        let d = a[i] - q;
        value.add(d.norm_sqr() / nb);
        grad[i] += d * (2.0 / nb);
    }
    (value.value(), grad)
}

/// A correspondence between a vertex subset of the moving mesh and a point
/// set on the static side, matched by chamfer distance.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionPair {
    /// Vertex indices on the moving mesh whose images form the first set.
    pub moving_vertices: Vec<usize>,
    /// Fixed points forming the second set, as `[re, im]` pairs in JSON.
    #[serde(deserialize_with = "deserialize_points")]
    pub static_points: Vec<C64>,
}

fn deserialize_points<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<C64>, D::Error> {
    let pairs: Vec<[f64; 2]> = Vec::deserialize(d)?;
    Ok(pairs.iter().map(|&[re, im]| C64::new(re, im)).collect())
}

/// Sum of [`chamfer`] over region pairs, with the gradient scattered onto
/// the full position vector. Assignments are derived at the given
/// configuration; pairs with an empty side are an error.
pub fn chamfer_pairs(
    positions: &[C64],
    pairs: &[RegionPair],
) -> Result<(f64, Vec<C64>), EnergiesError> {
    let mut value = Kahan::new();
    let mut grad = vec![C64::new(0.0, 0.0); positions.len()];
    for (pi, pair) in pairs.iter().enumerate() {
        if pair.moving_vertices.is_empty() || pair.static_points.is_empty() {
            return Err(EnergiesError::EmptyRegion { pair: pi });
        }
        let moved: Vec<C64> = pair.moving_vertices.iter().map(|&v| positions[v]).collect();
        let (e, g) = chamfer(&moved, &pair.static_points);
        value.add(e);
        for (&v, &gv) in pair.moving_vertices.iter().zip(&g) {
            grad[v] += gv;
        }
    }
    Ok((value.value(), grad))
}

// ---------------------------------------------------------------------------
// Overlap and intensity mismatch
// ---------------------------------------------------------------------------

/// Faces of the moving mesh whose image centroid lies inside the static
/// mesh, restricted to the largest connected component under face
/// adjacency (island fragments are dropped; ties go to the component with
/// the smallest face index).
pub fn overlap_region(
    moving: &TriMesh,
    positions: &[C64],
    static_mesh: &TriMesh,
) -> Vec<usize> {
    assert_eq!(positions.len(), moving.n_vertices());
    let inside: Vec<bool> = moving
        .faces()
        .iter()
        .map(|f| {
            let c = (positions[f[0]] + positions[f[1]] + positions[f[2]]) / 3.0;
            let loc = static_mesh.locate([c.re, c.im]);
            loc.lambda.iter().all(|&l| l >= -1e-12)
        })
        .collect();
    if !inside.iter().any(|&b| b) {
        return Vec::new();
    }
    let neighbors = moving.face_neighbors();
    let mut component = vec![usize::MAX; moving.n_faces()];
    let mut best: Option<(usize, usize)> = None; // (count, representative)
    let mut n_components = 0;
    for start in 0..moving.n_faces() {
        if !inside[start] || component[start] != usize::MAX {
            continue;
        }
        let id = n_components;
        n_components += 1;
        let mut count = 0;
        let mut stack = vec![start];
        component[start] = id;
        while let Some(f) = stack.pop() {
            count += 1;
            for &nb in &neighbors[f] {
                if inside[nb] && component[nb] == usize::MAX {
                    component[nb] = id;
                    stack.push(nb);
                }
            }
        }
        if best.map_or(true, |(c, _)| count > c) {
            best = Some((count, id));
        }
    }
    let keep = best.unwrap().1;
    (0..moving.n_faces())
        .filter(|&f| inside[f] && component[f] == keep)
        .collect()
}

/// Frozen sampling assignments for the intensity term: for each overlap
/// face of the moving mesh, the static-mesh location its image centroid
/// hit when the assignment was derived.
pub type IntensityAssignments = Vec<(usize, BaryLocation)>;

/// Derive the intensity-term assignments at the current positions. Faces
/// whose centroid no longer locates inside the static mesh are skipped.
pub fn intensity_assignments(
    moving: &TriMesh,
    positions: &[C64],
    static_mesh: &TriMesh,
    overlap: &[usize],
) -> IntensityAssignments {
    overlap
        .iter()
        .filter_map(|&fi| {
            let f = &moving.faces()[fi];
            let c = (positions[f[0]] + positions[f[1]] + positions[f[2]]) / 3.0;
            let loc = static_mesh.locate([c.re, c.im]);
            loc.lambda
                .iter()
                .all(|&l| l >= -1e-12)
                .then_some((fi, loc))
        })
        .collect()
}

/// Area-weighted mean absolute intensity mismatch over the overlap:
///
/// ```text
/// E = sum_T |A_T| |dI_T|  /  sum_T |A_T|
/// ```
///
/// where `A_T` is the signed image area of overlap face `T` and `dI_T` is
/// the mean of the moving intensity at the face corners minus the static
/// intensity interpolated at the image centroid. Returns the energy and
/// its gradient with respect to the moving image positions. Empty overlap
/// gives zero energy and zero gradient.
pub fn intensity_mismatch(
    moving: &TriMesh,
    positions: &[C64],
    moving_intensity: &[f64],
    static_mesh: &TriMesh,
    static_intensity: &[f64],
    overlap: &[usize],
) -> (f64, Vec<C64>) {
    let assignments = intensity_assignments(moving, positions, static_mesh, overlap);
    intensity_mismatch_with_assignments(
        moving,
        positions,
        moving_intensity,
        static_mesh,
        static_intensity,
        &assignments,
    )
}

/// [`intensity_mismatch`] evaluated on the smooth branch selected by frozen
/// `assignments`: each face keeps sampling the linear interpolant of the
/// static face recorded for it (extended linearly if the centroid drifts
/// off that face).
pub fn intensity_mismatch_with_assignments(
    moving: &TriMesh,
    positions: &[C64],
    moving_intensity: &[f64],
    static_mesh: &TriMesh,
    static_intensity: &[f64],
    assignments: &IntensityAssignments,
) -> (f64, Vec<C64>) {
    assert_eq!(moving_intensity.len(), moving.n_vertices());
    assert_eq!(static_intensity.len(), static_mesh.n_vertices());
    assert_eq!(positions.len(), moving.n_vertices());
    let mut grad = vec![C64::new(0.0, 0.0); positions.len()];
    if assignments.is_empty() {
        return (0.0, grad);
    }
    // Per-static-face interpolant gradients (constant on each face).
    let static_grads = beltrami::face_gradient(static_mesh, static_intensity);

    let sgn = |x: f64| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let mut numer = Kahan::new();
    let mut denom = Kahan::new();
    struct FaceTerm {
        fi: usize,
        abs_area: f64,
        abs_di: f64,
        s_area: f64,
        s_di: f64,
        grad_i2: C64,
        da: [C64; 3],
    }
    let mut terms = Vec::with_capacity(assignments.len());
    for &(fi, ref loc) in assignments {
        let f = &moving.faces()[fi];
        let area = image_face_area(f, positions);
        let centroid = (positions[f[0]] + positions[f[1]] + positions[f[2]]) / 3.0;
        // Static intensity at the centroid via the recorded face's linear
        // interpolant, extended off the face if needed.
        let lam = static_mesh.barycentric(loc.face, [centroid.re, centroid.im]);
        let sf = &static_mesh.faces()[loc.face];
        let i2 = lam[0] * static_intensity[sf[0]]
            + lam[1] * static_intensity[sf[1]]
            + lam[2] * static_intensity[sf[2]];
        let i1 = (moving_intensity[f[0]] + moving_intensity[f[1]] + moving_intensity[f[2]]) / 3.0;
        let di = i1 - i2;
        numer.add(area.abs() * di.abs());
        denom.add(area.abs());
        let [gx, gy] = static_grads[loc.face];
        terms.push(FaceTerm {
            fi,
            abs_area: area.abs(),
            abs_di: di.abs(),
            s_area: sgn(area),
            s_di: sgn(di),
            grad_i2: C64::new(gx, gy),
            da: image_face_area_grad(f, positions),
        });
    }
    let d = denom.value();
    let e = numer.value() / d;
    // dE = (dN - E dD) / D with
    //   dN_T = d|A| |dI| + |A| sgn(dI) d(dI),  dD_T = d|A|,
    //   d(dI)/d(corner) = -(1/3) grad(I2)  (the moving mean is data).
    for t in &terms {
        let f = &moving.faces()[t.fi];
        for j in 0..3 {
            let d_abs_area = t.da[j] * t.s_area;
            let d_di = t.grad_i2 * (-1.0 / 3.0);
            let dn = d_abs_area * t.abs_di + d_di * (t.abs_area * t.s_di);
            grad[f[j]] += (dn - d_abs_area * e) / d;
        }
    }
    (e, grad)
}

// ---------------------------------------------------------------------------
// Problems and job files
// ---------------------------------------------------------------------------

/// Evaluation record of a composite objective: the total, its named
/// components, gradients with respect to image positions and (where
/// applicable) the similarity log-scale, and the faces whose image is
/// currently flipped or collapsed.
#[derive(Debug, Clone, Default)]
pub struct EnergyReport {
    /// Weighted total.
    pub total: f64,
    /// Unweighted component values by name.
    pub components: BTreeMap<String, f64>,
    /// Gradient of the weighted total with respect to image positions.
    pub grad_positions: Vec<C64>,
    /// Gradient of the weighted total with respect to the similarity
    /// log-scale (barrier term), zero for objectives without one.
    pub grad_s_tilde: f64,
    /// Faces whose image currently has nonpositive signed area.
    pub degenerate_faces: Vec<usize>,
}

/// A density-equalization problem: one mesh, a target population per face,
/// and the scale-barrier parameters of `E_1`.
#[derive(Debug, Clone)]
pub struct DensityProblem {
    /// Domain mesh.
    pub mesh: TriMesh,
    /// Population carried by each face (positive).
    pub populations: Vec<f64>,
    /// Scale cap `omega` of the barrier term.
    pub barrier_omega: f64,
    /// Barrier weight `lambda_reg`.
    pub barrier_weight: f64,
}

/// Objective weights of a registration problem.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegWeights {
    /// Weight of the intensity-mismatch term.
    pub intensity: f64,
    /// Weight of the chamfer term.
    pub chamfer: f64,
    /// Weight of the coefficient-norm penalty.
    pub bc: f64,
    /// Weight of the coefficient-smoothness penalty.
    pub smooth: f64,
}

impl Default for RegWeights {
    fn default() -> Self {
        RegWeights {
            intensity: 1.0,
            chamfer: 1.0,
            bc: 5e-2,
            smooth: 1e-3,
        }
    }
}

/// An inconsistent-registration problem: a moving mesh carried toward a
/// static mesh, each with a scalar intensity per vertex, plus region-pair
/// correspondences and term weights.
#[derive(Debug, Clone)]
pub struct RegistrationProblem {
    /// The mesh being deformed.
    pub moving: TriMesh,
    /// The fixed target mesh.
    pub static_mesh: TriMesh,
    /// Intensity at each moving vertex.
    pub moving_intensity: Vec<f64>,
    /// Intensity at each static vertex.
    pub static_intensity: Vec<f64>,
    /// Corresponding region pairs matched by the chamfer term.
    pub region_pairs: Vec<RegionPair>,
    /// Objective weights.
    pub weights: RegWeights,
}

/// One real per line; blank lines ignored.
fn read_reals_csv(path: &Path) -> Result<Vec<f64>, String> {
    let text =
        std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<f64>()
                .map_err(|e| format!("{} line {}: {e}", path.display(), i + 1))
        })
        .collect()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DensityJobFile {
    population_csv: Option<String>,
    gaussian_peak: Option<GaussianPeakSpec>,
    #[serde(default = "default_barrier_omega")]
    barrier_omega: f64,
    #[serde(default = "default_barrier_weight")]
    barrier_weight: f64,
}

fn default_barrier_omega() -> f64 {
    1.5
}

fn default_barrier_weight() -> f64 {
    10.0
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianPeakSpec {
    center: [f64; 2],
    sigma: f64,
    amplitude: f64,
}

/// Load a density job. The population comes either from `population_csv`
/// (one positive real per face, path relative to the job file) or from a
/// synthetic `gaussian_peak` specification (`center`, `sigma`,
/// `amplitude`) evaluated on the mesh; `barrier_omega` (default 1.5) and
/// `barrier_weight` (default 10) parameterize the scale barrier.
pub fn load_density_job(path: &Path, mesh: TriMesh) -> Result<DensityProblem, String> {
    let text =
        std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let job: DensityJobFile =
        serde_json::from_str(&text).map_err(|e| format!("bad density job {}: {e}", path.display()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let populations = match (job.population_csv, job.gaussian_peak) {
        (Some(csv), None) => read_reals_csv(&base.join(csv))?,
        (None, Some(spec)) => {
            synth::gaussian_peak_population(&mesh, spec.center, spec.sigma, spec.amplitude)
        }
        _ => {
            return Err(format!(
                "density job {}: exactly one of `population_csv` or `gaussian_peak` is required",
                path.display()
            ))
        }
    };
    if populations.len() != mesh.n_faces() {
        return Err(format!(
            "density job {}: {} populations for {} faces",
            path.display(),
            populations.len(),
            mesh.n_faces()
        ));
    }
    if let Some(bad) = populations.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
        return Err(format!(
            "density job {}: populations must be positive and finite, found {bad}",
            path.display()
        ));
    }
    if !(job.barrier_omega > 0.0) || job.barrier_weight < 0.0 {
        return Err(format!(
            "density job {}: barrier_omega must be positive and barrier_weight non-negative",
            path.display()
        ));
    }
    Ok(DensityProblem {
        mesh,
        populations,
        barrier_omega: job.barrier_omega,
        barrier_weight: job.barrier_weight,
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistrationJobFile {
    static_mesh: String,
    static_intensity_csv: Option<String>,
    moving_intensity_csv: Option<String>,
    region_pairs: Option<Vec<RegionPair>>,
    #[serde(default)]
    weights: RegWeights,
}

/// Load a registration job. The moving mesh comes from the caller; the job
/// file names the static mesh and optional per-vertex intensity CSVs (one
/// real per line, paths relative to the job file). Omitted intensities
/// default to a fixed smooth synthetic field at the vertices; omitted
/// region pairs default to a single pair matching the moving boundary
/// vertices against the static boundary positions.
pub fn load_registration_job(path: &Path, moving: TriMesh) -> Result<RegistrationProblem, String> {
    let text =
        std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let job: RegistrationJobFile = serde_json::from_str(&text)
        .map_err(|e| format!("bad registration job {}: {e}", path.display()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let static_path = base.join(&job.static_mesh);
    let format = MeshFormat::from_path(&static_path)
        .ok_or_else(|| format!("cannot infer mesh format of {}", static_path.display()))?;
    let static_mesh = crate::mesh::load_mesh(&static_path, format)
        .map_err(|e| format!("loading static mesh: {e}"))?;
    let default_field = |mesh: &TriMesh| -> Vec<f64> {
        mesh.vertices()
            .iter()
            .map(|&[x, y]| synth::smooth_intensity([x, y]))
            .collect()
    };
    let load_field =
        |csv: &Option<String>, mesh: &TriMesh, name: &str| -> Result<Vec<f64>, String> {
            let field = match csv {
                Some(rel) => read_reals_csv(&base.join(rel))?,
                None => default_field(mesh),
            };
            if field.len() != mesh.n_vertices() {
                return Err(format!(
                    "registration job {}: {name} has {} entries for {} vertices",
                    path.display(),
                    field.len(),
                    mesh.n_vertices()
                ));
            }
            if field.iter().any(|v| !v.is_finite()) {
                return Err(format!(
                    "registration job {}: {name} contains non-finite values",
                    path.display()
                ));
            }
            Ok(field)
        };
    let static_intensity = load_field(&job.static_intensity_csv, &static_mesh, "static intensity")?;
    let moving_intensity = load_field(&job.moving_intensity_csv, &moving, "moving intensity")?;
    let region_pairs = match job.region_pairs {
        Some(pairs) => {
            for (pi, pair) in pairs.iter().enumerate() {
                if pair.moving_vertices.is_empty() || pair.static_points.is_empty() {
                    return Err(format!(
                        "registration job {}: region pair {pi} has an empty point set",
                        path.display()
                    ));
                }
                if let Some(&bad) = pair
                    .moving_vertices
                    .iter()
                    .find(|&&v| v >= moving.n_vertices())
                {
                    return Err(format!(
                        "registration job {}: region pair {pi} references vertex {bad} of {}",
                        path.display(),
                        moving.n_vertices()
                    ));
                }
            }
            pairs
        }
        None => vec![RegionPair {
            moving_vertices: moving
                .boundary_loops()
                .iter()
                .flat_map(|l| l.iter().copied())
                .collect(),
            static_points: static_mesh
                .boundary_loops()
                .iter()
                .flat_map(|l| l.iter().map(|&v| static_mesh.vertex_c(v)))
                .collect(),
        }],
    };
    Ok(RegistrationProblem {
        moving,
        static_mesh,
        moving_intensity,
        static_intensity,
        region_pairs,
        weights: job.weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-9)
    }

    fn random_positions(mesh: &TriMesh, rng: &mut synth::SeededRng, amp: f64) -> Vec<C64> {
        mesh.positions_c()
            .iter()
            .map(|&z| z + C64::new(rng.gen_range(-amp..amp), rng.gen_range(-amp..amp)))
            .collect()
    }

    #[test]
    fn green_area_equals_summed_face_areas() {
        let mesh = synth::disk_mesh(3);
        let mut rng = synth::rng(61);
        for _ in 0..5 {
            let pos = random_positions(&mesh, &mut rng, 0.05);
            let by_faces: f64 = mesh
                .faces()
                .iter()
                .map(|f| image_face_area(f, &pos))
                .sum();
            let by_boundary = green_area(&pos, mesh.boundary_loops());
            assert_abs_diff_eq!(by_faces, by_boundary, epsilon = 1e-12);
        }
    }

    #[test]
    fn green_area_hand_polygons() {
        let square = [
            C64::new(0.0, 0.0),
            C64::new(1.0, 0.0),
            C64::new(1.0, 1.0),
            C64::new(0.0, 1.0),
        ];
        assert_abs_diff_eq!(green_area(&square, &[vec![0, 1, 2, 3]]), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(green_area(&square, &[vec![3, 2, 1, 0]]), -1.0, epsilon = 1e-15);
        let n = 256;
        let circle: Vec<C64> = (0..n)
            .map(|i| C64::from_polar(1.0, 2.0 * std::f64::consts::PI * i as f64 / n as f64))
            .collect();
        let loop_ids: Vec<usize> = (0..n).collect();
        assert!((green_area(&circle, &[loop_ids]) - std::f64::consts::PI).abs() < 1e-3);
    }

    #[test]
    fn proportional_population_has_zero_density_variance() {
        let mesh = synth::fan_polygon_seeded(3, 20);
        let populations: Vec<f64> = mesh.face_areas().iter().map(|&d| 0.7 * d).collect();
        let (e, grad) = density_variance(&mesh, &populations, &mesh.positions_c());
        assert!(e < 1e-24);
        for g in grad {
            assert!(g.norm() < 1e-11, "gradient should vanish, got {g}");
        }
    }

    #[test]
    fn density_gradient_matches_finite_differences() {
        let mesh = synth::disk_mesh(2);
        let mut rng = synth::rng(62);
        let populations: Vec<f64> = mesh
            .face_areas()
            .iter()
            .map(|&d| d * rng.gen_range(0.5..2.0))
            .collect();
        let pos = random_positions(&mesh, &mut rng, 0.03);
        let (_, grad) = density_variance(&mesh, &populations, &pos);
        let h = 1e-6;
        for v in (0..mesh.n_vertices()).step_by(3) {
            for comp in 0..2 {
                let delta = if comp == 0 { C64::new(h, 0.0) } else { C64::new(0.0, h) };
                let mut pp = pos.clone();
                pp[v] += delta;
                let mut pm = pos.clone();
                pm[v] -= delta;
                let fd = (density_variance(&mesh, &populations, &pp).0
                    - density_variance(&mesh, &populations, &pm).0)
                    / (2.0 * h);
                let an = if comp == 0 { grad[v].re } else { grad[v].im };
                assert!(
                    rel_err(an, fd) < 1e-5,
                    "vertex {v} comp {comp}: {an} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn density_variance_is_similarity_blind_except_scale() {
        let mesh = synth::disk_mesh(2);
        let mut rng = synth::rng(66);
        let populations: Vec<f64> = mesh
            .face_areas()
            .iter()
            .map(|&d| d * rng.gen_range(0.5..2.0))
            .collect();
        let pos = random_positions(&mesh, &mut rng, 0.02);
        let (e0, _) = density_variance(&mesh, &populations, &pos);
        // Rotation + translation: unchanged.
        let rot = C64::from_polar(1.0, 0.7);
        let shift = C64::new(0.3, -1.1);
        let moved: Vec<C64> = pos.iter().map(|&z| z * rot + shift).collect();
        let (e1, _) = density_variance(&mesh, &populations, &moved);
        assert!(rel_err(e0, e1) < 1e-12, "{e0} vs {e1}");
        // Uniform scale c: densities scale by c^-2, variance by c^-4.
        let c = 1.7;
        let scaled: Vec<C64> = pos.iter().map(|&z| z * c).collect();
        let (e2, _) = density_variance(&mesh, &populations, &scaled);
        assert!(rel_err(e2, e0 / c.powi(4)) < 1e-10, "{e2} vs {}", e0 / c.powi(4));
        let rho = face_densities(&mesh, &populations, &scaled);
        let rho0 = face_densities(&mesh, &populations, &pos);
        for (a, b) in rho.iter().zip(&rho0) {
            assert!(rel_err(*a, b / (c * c)) < 1e-10);
        }
    }

    #[test]
    fn density_energy_report_includes_barrier_and_degenerates() {
        let mesh = synth::disk_mesh(1);
        let populations: Vec<f64> = mesh.face_areas().iter().map(|&d| d).collect();
        let problem = DensityProblem {
            mesh: mesh.clone(),
            populations,
            barrier_omega: 1.5,
            barrier_weight: 10.0,
        };
        let report = density_energy(&problem, &mesh.positions_c(), 0.0);
        assert_eq!(report.components["barrier"], 0.0);
        assert_eq!(report.grad_s_tilde, 0.0);
        assert!(report.degenerate_faces.is_empty());
        // Above the cap the barrier charges and pushes back on s_tilde.
        let s = 1.5f64.ln() + 0.3;
        let report = density_energy(&problem, &mesh.positions_c(), s);
        assert!(report.components["barrier"] > 0.0);
        assert!(report.grad_s_tilde > 0.0);
        let expect = report.components["variance"] + 10.0 * report.components["barrier"];
        assert!(rel_err(report.total, expect) < 1e-12);
        // Mirroring the image flips every face and is reported.
        let mirrored: Vec<C64> = mesh.positions_c().iter().map(|z| z.conj()).collect();
        let report = density_energy(&problem, &mirrored, 0.0);
        assert_eq!(report.degenerate_faces.len(), mesh.n_faces());
    }

    #[test]
    fn bc_energy_matches_hand_values_and_fd() {
        let mu = vec![C64::new(0.3, 0.4), C64::new(0.0, 0.0)];
        let (e, grad) = bc_energy(&mu);
        assert_abs_diff_eq!(e, 0.125, epsilon = 1e-15); // (0.25 + 0) / 2
        assert!((grad[0] - C64::new(0.3, 0.4)).norm() < 1e-15);
        let h = 1e-7;
        let ep = bc_energy(&[C64::new(0.3 + h, 0.4), C64::new(0.0, 0.0)]).0;
        let em = bc_energy(&[C64::new(0.3 - h, 0.4), C64::new(0.0, 0.0)]).0;
        assert!(rel_err(grad[0].re, (ep - em) / (2.0 * h)) < 1e-8);
    }

    #[test]
    fn smoothness_energy_is_zero_for_constant_fields_and_matches_fd() {
        let mesh = synth::disk_mesh(2);
        let constant = vec![C64::new(0.2, -0.1); mesh.n_vertices()];
        let (e, grad) = smoothness_energy(&mesh, &constant);
        assert!(e < 1e-28);
        assert!(grad.iter().all(|g| g.norm() < 1e-13));

        // The linear field mu = x has unit gradient on every face.
        let linear: Vec<C64> = mesh.vertices().iter().map(|&[x, _]| C64::new(x, 0.0)).collect();
        let (e, _) = smoothness_energy(&mesh, &linear);
        assert_abs_diff_eq!(e, 1.0, epsilon = 1e-12);

        let mut rng = synth::rng(63);
        let mu: Vec<C64> = (0..mesh.n_vertices())
            .map(|_| C64::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)))
            .collect();
        let (_, grad) = smoothness_energy(&mesh, &mu);
        let h = 1e-6;
        for v in (0..mesh.n_vertices()).step_by(4) {
            for comp in 0..2 {
                let delta = if comp == 0 { C64::new(h, 0.0) } else { C64::new(0.0, h) };
                let mut mp = mu.clone();
                mp[v] += delta;
                let mut mm = mu.clone();
                mm[v] -= delta;
                let fd =
                    (smoothness_energy(&mesh, &mp).0 - smoothness_energy(&mesh, &mm).0) / (2.0 * h);
                let an = if comp == 0 { grad[v].re } else { grad[v].im };
                assert!(rel_err(an, fd) < 1e-5, "vertex {v} comp {comp}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn scale_barrier_is_one_sided() {
        assert_eq!(scale_barrier(0.0, 2.0, 4.0), (0.0, 0.0));
        assert_eq!(scale_barrier(4.0f64.ln(), 2.0, 4.0), (0.0, 0.0));
        let s = 2.0f64;
        let (e, de) = scale_barrier(s, 2.0, 4.0);
        assert_abs_diff_eq!(e, 2.0 * (s.exp() - 4.0), epsilon = 1e-12);
        assert_abs_diff_eq!(de, 2.0 * s.exp(), epsilon = 1e-12);
    }

    #[test]
    fn chamfer_matches_hand_computation() {
        // A = {0, 1}, B = {0.1}: forward means ((0.1)^2 + (0.9)^2)/2 = 0.41,
        // backward nearest of 0.1 in A is 0 at distance 0.01.
        let a = [C64::new(0.0, 0.0), C64::new(1.0, 0.0)];
        let b = [C64::new(0.1, 0.0)];
        let (e, grad) = chamfer(&a, &b);
        assert_abs_diff_eq!(e, 0.41 + 0.01, epsilon = 1e-15);
        // grad a0: own term 2/2 (0 - 0.1) = -0.1; target term 2/1 (0 - 0.1)
        // = -0.2; total -0.3.
        assert!((grad[0] - C64::new(-0.3, 0.0)).norm() < 1e-14);
        assert!((grad[1] - C64::new(0.9, 0.0)).norm() < 1e-14);
        // Singletons {0} and {1}: both directional means are 1.
        let (e, _) = chamfer(&[C64::new(0.0, 0.0)], &[C64::new(1.0, 0.0)]);
        assert_abs_diff_eq!(e, 2.0, epsilon = 1e-15);
        // Identical sets: zero.
        let (e, _) = chamfer(&a, &a);
        assert_eq!(e, 0.0);
    }

    #[test]
    fn chamfer_is_symmetric_in_its_sets() {
        let mut rng = synth::rng(67);
        let a: Vec<C64> = (0..7)
            .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let b: Vec<C64> = (0..11)
            .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        assert_abs_diff_eq!(chamfer(&a, &b).0, chamfer(&b, &a).0, epsilon = 1e-14);
    }

    #[test]
    fn chamfer_pairs_sums_regions_and_rejects_empty_ones() {
        let positions = [
            C64::new(0.0, 0.0),
            C64::new(1.0, 0.0),
            C64::new(0.0, 1.0),
            C64::new(2.0, 2.0),
        ];
        let pairs = vec![
            RegionPair {
                moving_vertices: vec![0, 1],
                static_points: vec![C64::new(0.1, 0.0)],
            },
            RegionPair {
                moving_vertices: vec![3],
                static_points: vec![C64::new(2.0, 2.0)],
            },
        ];
        let (e, grad) = chamfer_pairs(&positions, &pairs).unwrap();
        assert_abs_diff_eq!(e, 0.42, epsilon = 1e-14); // first pair only
        assert!(grad[2].norm() == 0.0, "unreferenced vertex untouched");
        assert!(grad[3].norm() == 0.0, "exact match contributes nothing");

        let bad = vec![RegionPair {
            moving_vertices: vec![],
            static_points: vec![C64::new(0.0, 0.0)],
        }];
        assert!(matches!(
            chamfer_pairs(&positions, &bad),
            Err(EnergiesError::EmptyRegion { pair: 0 })
        ));
    }

    #[test]
    fn chamfer_ties_resolve_to_the_smallest_index() {
        let a = [C64::new(0.0, 0.0)];
        let b = [C64::new(1.0, 0.0), C64::new(-1.0, 0.0)];
        let assignments = chamfer_assignments(&a, &b);
        assert_eq!(assignments.a_to_b, vec![0]);
    }

    #[test]
    fn chamfer_gradient_matches_finite_differences() {
        let mut rng = synth::rng(64);
        let a: Vec<C64> = (0..12)
            .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let b: Vec<C64> = (0..9)
            .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let assignments = chamfer_assignments(&a, &b);
        let (_, grad) = chamfer_with_assignments(&a, &b, &assignments);
        let h = 1e-6;
        for i in 0..a.len() {
            for comp in 0..2 {
                let delta = if comp == 0 { C64::new(h, 0.0) } else { C64::new(0.0, h) };
                let mut ap = a.clone();
                ap[i] += delta;
                let mut am = a.clone();
                am[i] -= delta;
                // Frozen branch for the FD as well.
                let fp = chamfer_with_assignments(&ap, &b, &assignments).0;
                let fm = chamfer_with_assignments(&am, &b, &assignments).0;
                let fd = (fp - fm) / (2.0 * h);
                let an = if comp == 0 { grad[i].re } else { grad[i].im };
                assert!(rel_err(an, fd) < 1e-6, "point {i} comp {comp}: {an} vs {fd}");
            }
        }
        // Away from assignment boundaries the unfrozen energy agrees too.
        let i = 3;
        let mut ap = a.clone();
        ap[i] += C64::new(h, 0.0);
        let mut am = a.clone();
        am[i] -= C64::new(h, 0.0);
        let fd = (chamfer(&ap, &b).0 - chamfer(&am, &b).0) / (2.0 * h);
        assert!(rel_err(grad[i].re, fd) < 1e-4);
    }

    #[test]
    fn overlap_region_is_all_faces_when_fully_inside() {
        let static_mesh = synth::disk_mesh(4);
        let moving = synth::disk_mesh(2);
        let positions: Vec<C64> = moving.positions_c().iter().map(|&z| z * 0.5).collect();
        let overlap = overlap_region(&moving, &positions, &static_mesh);
        assert_eq!(overlap.len(), moving.n_faces());
    }

    #[test]
    fn overlap_region_is_monotone_in_the_static_domain() {
        let moving = synth::disk_mesh(2);
        let positions: Vec<C64> = moving
            .positions_c()
            .iter()
            .map(|&z| z + C64::new(0.45, 0.0))
            .collect();
        let big = synth::disk_mesh(4);
        let small_vertices: Vec<[f64; 2]> = big
            .vertices()
            .iter()
            .map(|&[x, y]| [0.75 * x, 0.75 * y])
            .collect();
        let small = TriMesh::new(small_vertices, big.faces().to_vec()).unwrap();
        let in_big = overlap_region(&moving, &positions, &big);
        let in_small = overlap_region(&moving, &positions, &small);
        assert!(!in_small.is_empty() && in_small.len() < in_big.len());
        for f in &in_small {
            assert!(in_big.contains(f), "shrinking the domain added face {f}");
        }
    }

    #[test]
    fn overlap_region_shrinks_when_shifted_out() {
        let static_mesh = synth::disk_mesh(4);
        let moving = synth::disk_mesh(2);
        let positions: Vec<C64> = moving
            .positions_c()
            .iter()
            .map(|&z| z + C64::new(0.8, 0.0))
            .collect();
        let overlap = overlap_region(&moving, &positions, &static_mesh);
        assert!(!overlap.is_empty());
        assert!(overlap.len() < moving.n_faces());
        // Entirely outside: empty.
        let positions: Vec<C64> = moving
            .positions_c()
            .iter()
            .map(|&z| z + C64::new(5.0, 0.0))
            .collect();
        assert!(overlap_region(&moving, &positions, &static_mesh).is_empty());
    }

    #[test]
    fn intensity_mismatch_vanishes_for_matching_linear_fields() {
        // For a linear intensity the corner mean equals the centroid value
        // exactly, so sampling a shared linear field gives zero mismatch.
        let static_mesh = synth::disk_mesh(3);
        let moving = synth::disk_mesh(2);
        let positions: Vec<C64> = moving.positions_c().iter().map(|&z| z * 0.6).collect();
        let field = |p: [f64; 2]| 0.3 * p[0] - 0.8 * p[1] + 0.5;
        let i2: Vec<f64> = static_mesh.vertices().iter().map(|&p| field(p)).collect();
        let i1: Vec<f64> = positions.iter().map(|z| field([z.re, z.im])).collect();
        let overlap = overlap_region(&moving, &positions, &static_mesh);
        let (e, _) =
            intensity_mismatch(&moving, &positions, &i1, &static_mesh, &i2, &overlap);
        assert!(e < 1e-12, "mismatch {e}");
    }

    #[test]
    fn intensity_mismatch_of_unit_contrast_is_one() {
        // I1 = 1, I2 = 0 with full overlap: mean mismatch exactly 1
        // regardless of face areas.
        let static_mesh = synth::disk_mesh(3);
        let moving = synth::disk_mesh(2);
        let positions: Vec<C64> = moving.positions_c().iter().map(|&z| z * 0.5).collect();
        let i1 = vec![1.0; moving.n_vertices()];
        let i2 = vec![0.0; static_mesh.n_vertices()];
        let overlap = overlap_region(&moving, &positions, &static_mesh);
        assert_eq!(overlap.len(), moving.n_faces());
        let (e, _) = intensity_mismatch(&moving, &positions, &i1, &static_mesh, &i2, &overlap);
        assert_abs_diff_eq!(e, 1.0, epsilon = 1e-13);
    }

    #[test]
    fn intensity_mismatch_empty_overlap_is_zero() {
        let static_mesh = synth::disk_mesh(2);
        let moving = synth::disk_mesh(1);
        let positions = moving.positions_c();
        let i1 = vec![0.5; moving.n_vertices()];
        let i2 = vec![0.25; static_mesh.n_vertices()];
        let (e, grad) = intensity_mismatch(&moving, &positions, &i1, &static_mesh, &i2, &[]);
        assert_eq!(e, 0.0);
        assert!(grad.iter().all(|g| g.norm() == 0.0));
    }

    #[test]
    fn intensity_gradient_matches_finite_differences_on_frozen_branch() {
        let static_mesh = synth::disk_mesh(3);
        let moving = synth::disk_mesh(2);
        let mut rng = synth::rng(65);
        // Keep the moving image strictly inside the static mesh.
        let positions: Vec<C64> = moving
            .positions_c()
            .iter()
            .map(|&z| z * 0.55 + C64::new(rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02)))
            .collect();
        let i1: Vec<f64> = (0..moving.n_vertices())
            .map(|_| rng.gen_range(0.0..1.0))
            .collect();
        let i2: Vec<f64> = static_mesh
            .vertices()
            .iter()
            .map(|&p| synth::smooth_intensity(p))
            .collect();
        let overlap = overlap_region(&moving, &positions, &static_mesh);
        assert_eq!(overlap.len(), moving.n_faces());
        let assignments = intensity_assignments(&moving, &positions, &static_mesh, &overlap);
        let (_, grad) = intensity_mismatch_with_assignments(
            &moving,
            &positions,
            &i1,
            &static_mesh,
            &i2,
            &assignments,
        );
        let h = 1e-6;
        for v in (0..moving.n_vertices()).step_by(2) {
            for comp in 0..2 {
                let delta = if comp == 0 { C64::new(h, 0.0) } else { C64::new(0.0, h) };
                let mut pp = positions.clone();
                pp[v] += delta;
                let mut pm = positions.clone();
                pm[v] -= delta;
                let fp = intensity_mismatch_with_assignments(
                    &moving, &pp, &i1, &static_mesh, &i2, &assignments,
                )
                .0;
                let fm = intensity_mismatch_with_assignments(
                    &moving, &pm, &i1, &static_mesh, &i2, &assignments,
                )
                .0;
                let fd = (fp - fm) / (2.0 * h);
                let an = if comp == 0 { grad[v].re } else { grad[v].im };
                assert!(
                    rel_err(an, fd) < 1e-5,
                    "vertex {v} comp {comp}: {an} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn density_job_loader_validates_and_synthesizes() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = synth::disk_mesh(2);

        let csv = dir.path().join("pop.csv");
        let lines: Vec<String> = (0..mesh.n_faces()).map(|i| format!("{}", 1.0 + i as f64)).collect();
        std::fs::write(&csv, lines.join("\n")).unwrap();
        let explicit = dir.path().join("explicit.json");
        std::fs::write(&explicit, r#"{"population_csv": "pop.csv"}"#).unwrap();
        let job = load_density_job(&explicit, mesh.clone()).unwrap();
        assert_eq!(job.populations.len(), mesh.n_faces());
        assert_eq!(job.barrier_omega, 1.5);
        assert_eq!(job.barrier_weight, 10.0);

        let synth_path = dir.path().join("peak.json");
        std::fs::write(
            &synth_path,
            r#"{"gaussian_peak": {"center": [0.2, 0.0], "sigma": 0.3, "amplitude": 4.0},
                "barrier_omega": 2.0, "barrier_weight": 3.0}"#,
        )
        .unwrap();
        let job = load_density_job(&synth_path, mesh.clone()).unwrap();
        assert_eq!(job.populations.len(), mesh.n_faces());
        assert!(job.populations.iter().all(|&p| p > 0.0));
        assert_eq!(job.barrier_omega, 2.0);

        let short_csv = dir.path().join("short.csv");
        std::fs::write(&short_csv, "1.0\n").unwrap();
        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, r#"{"population_csv": "short.csv"}"#).unwrap();
        assert!(load_density_job(&bad, mesh.clone()).is_err());
        let neither = dir.path().join("neither.json");
        std::fs::write(&neither, "{}").unwrap();
        assert!(load_density_job(&neither, mesh.clone()).is_err());
        let missing = dir.path().join("missing.json");
        std::fs::write(&missing, r#"{"population_csv": "nope.csv"}"#).unwrap();
        assert!(load_density_job(&missing, mesh).is_err());
    }

    #[test]
    fn registration_job_loader_resolves_paths_and_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let static_mesh = synth::disk_mesh(2);
        crate::mesh::write_off(
            &dir.path().join("static.off"),
            static_mesh.vertices(),
            static_mesh.faces(),
        )
        .unwrap();
        let job_path = dir.path().join("job.json");
        std::fs::write(&job_path, r#"{"static_mesh": "static.off"}"#).unwrap();
        let moving = synth::disk_mesh(1);
        let problem = load_registration_job(&job_path, moving.clone()).unwrap();
        assert_eq!(problem.static_mesh.n_vertices(), static_mesh.n_vertices());
        assert_eq!(problem.moving_intensity.len(), moving.n_vertices());
        assert_eq!(problem.static_intensity.len(), static_mesh.n_vertices());
        // Default region pair: moving boundary against static boundary.
        assert_eq!(problem.region_pairs.len(), 1);
        assert_eq!(problem.region_pairs[0].moving_vertices.len(), 6);
        assert_eq!(problem.region_pairs[0].static_points.len(), 12);
        assert_eq!(problem.weights.bc, 5e-2);

        let explicit = dir.path().join("explicit.json");
        std::fs::write(
            &explicit,
            r#"{"static_mesh": "static.off",
                "region_pairs": [{"moving_vertices": [0, 1], "static_points": [[0.5, 0.5]]}],
                "weights": {"chamfer": 2.5}}"#,
        )
        .unwrap();
        let problem = load_registration_job(&explicit, moving.clone()).unwrap();
        assert_eq!(problem.region_pairs.len(), 1);
        assert_eq!(problem.weights.chamfer, 2.5);
        assert_eq!(problem.weights.intensity, 1.0);

        let bad_intensity = dir.path().join("bad_intensity.json");
        std::fs::write(&bad_intensity, r#"{"static_mesh": "static.off", "moving_intensity_csv": "short.csv"}"#).unwrap();
        std::fs::write(dir.path().join("short.csv"), "1.0\n").unwrap();
        assert!(load_registration_job(&bad_intensity, moving.clone()).is_err());

        let bad_region = dir.path().join("bad_region.json");
        std::fs::write(
            &bad_region,
            r#"{"static_mesh": "static.off",
                "region_pairs": [{"moving_vertices": [], "static_points": [[0.0, 0.0]]}]}"#,
        )
        .unwrap();
        let err = load_registration_job(&bad_region, moving.clone()).unwrap_err();
        assert!(err.contains("empty point set"), "{err}");

        let out_of_range = dir.path().join("range.json");
        std::fs::write(
            &out_of_range,
            r#"{"static_mesh": "static.off",
                "region_pairs": [{"moving_vertices": [999], "static_points": [[0.0, 0.0]]}]}"#,
        )
        .unwrap();
        assert!(load_registration_job(&out_of_range, moving).is_err());
    }
}
