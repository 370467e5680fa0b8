//! Synthetic meshes, coefficient fields, and deformations.
//!
//! The randomized property suites ([`crate::props`]) and the test harnesses
//! need reproducible families of inputs: structured disk and annulus meshes,
//! fan-triangulated convex polygons (which have no interior vertices, the
//! exactly-determined case), smooth random Beltrami coefficient fields,
//! orientation-preserving piecewise-linear deformations, and peaked
//! population/intensity models. Everything is driven by an explicit
//! deterministic RNG so any failure reproduces from its seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::beltrami;
use crate::mesh::TriMesh;
use crate::C64;

/// The deterministic RNG used across suites and harnesses.
pub type SeededRng = ChaCha8Rng;

/// Construct the suite RNG for a seed.
pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent per-trial RNG from a base seed and trial index, so
/// trials can run in any order (or in parallel) without affecting each other.
pub fn trial_rng(seed: u64, trial: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed ^ trial.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

// ---------------------------------------------------------------------------
// Structured meshes
// ---------------------------------------------------------------------------

/// Vertices of ring `j` out of `m` on the unit disk: `6j` points at radius
/// `j/m`.
fn ring_points(j: usize, m: usize) -> Vec<[f64; 2]> {
    let r = j as f64 / m as f64;
    let n = 6 * j;
    (0..n)
        .map(|k| {
            let t = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            [r * t.cos(), r * t.sin()]
        })
        .collect()
}

/// Triangulate the annulus between two concentric vertex rings by merging
/// their angular orders. `inner`/`outer` are the vertex indices of the rings
/// in counter-clockwise order; produces `inner.len() + outer.len()`
/// counter-clockwise triangles.
fn stitch_rings(faces: &mut Vec<[usize; 3]>, inner: &[usize], outer: &[usize]) {
    let a = inner.len();
    let b = outer.len();
    let mut i = 0usize;
    let mut k = 0usize;
    while i < a || k < b {
        let inner_next = (i + 1) as f64 / a as f64;
        let outer_next = (k + 1) as f64 / b as f64;
        if k == b || (i < a && inner_next <= outer_next) {
            faces.push([inner[i % a], outer[k % b], inner[(i + 1) % a]]);
            i += 1;
        } else {
            faces.push([inner[i % a], outer[k % b], outer[(k + 1) % b]]);
            k += 1;
        }
    }
}

/// Structured unit-disk mesh with `m` concentric rings: `1 + 3m(m+1)`
/// vertices and `6m^2` faces. `m = 18` gives 1027 vertices / 1944 faces.
pub fn disk_mesh(m: usize) -> TriMesh {
    assert!(m >= 1, "disk mesh needs at least one ring");
    let mut vertices = vec![[0.0, 0.0]];
    let mut ring_start = vec![0usize; m + 1];
    for j in 1..=m {
        ring_start[j] = vertices.len();
        vertices.extend(ring_points(j, m));
    }
    let mut faces = Vec::with_capacity(6 * m * m);
    let ring_indices =
        |j: usize| -> Vec<usize> { (0..6 * j).map(|k| ring_start[j] + k).collect() };
    // Innermost ring: a fan around the center.
    let r1 = ring_indices(1);
    for k in 0..6 {
        faces.push([0, r1[k], r1[(k + 1) % 6]]);
    }
    for j in 2..=m {
        let inner = ring_indices(j - 1);
        let outer = ring_indices(j);
        stitch_rings(&mut faces, &inner, &outer);
    }
    TriMesh::new(vertices, faces).expect("structured disk mesh must validate")
}

/// Structured annulus: rings `j0..=m` of the `m`-ring disk, leaving a hole
/// of radius `j0/m`. Requires `1 <= j0 < m`.
pub fn annulus_mesh(j0: usize, m: usize) -> TriMesh {
    assert!(j0 >= 1 && j0 < m, "annulus needs 1 <= j0 < m");
    let mut vertices = Vec::new();
    let mut ring_start = vec![0usize; m + 1];
    for j in j0..=m {
        ring_start[j] = vertices.len();
        vertices.extend(ring_points(j, m));
    }
    let ring_indices =
        |j: usize| -> Vec<usize> { (0..6 * j).map(|k| ring_start[j] + k).collect() };
    let mut faces = Vec::new();
    for j in (j0 + 1)..=m {
        let inner = ring_indices(j - 1);
        let outer = ring_indices(j);
        stitch_rings(&mut faces, &inner, &outer);
    }
    TriMesh::new(vertices, faces).expect("structured annulus mesh must validate")
}

/// Structured unit-square grid mesh with `(n+1)^2` vertices and `2n^2`
/// faces; interior vertices are flat and symmetric, which makes linear
/// fields discretely harmonic there.
pub fn grid_mesh(n: usize) -> TriMesh {
    assert!(n >= 1);
    let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            vertices.push([i as f64 / n as f64, j as f64 / n as f64]);
        }
    }
    let at = |i: usize, j: usize| j * (n + 1) + i;
    let mut faces = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            faces.push([at(i, j), at(i + 1, j), at(i + 1, j + 1)]);
            faces.push([at(i, j), at(i + 1, j + 1), at(i, j + 1)]);
        }
    }
    TriMesh::new(vertices, faces).expect("grid mesh must validate")
}

/// Random convex polygon with `n` boundary vertices inscribed in a random
/// ellipse (semi-axes in `[0.7, 1.3]`), fan-triangulated from vertex 0.
/// Having no interior vertices, the mesh satisfies `|F| = |V| - 2`, the
/// exactly-determined case of the pinned least-squares system. Angular
/// jitter keeps adjacent gaps at no less than 0.3 of the uniform spacing so
/// no face degenerates.
pub fn fan_polygon(rng: &mut SeededRng, n: usize) -> TriMesh {
    assert!(n >= 3);
    let a = rng.gen_range(0.7..1.3);
    let b = rng.gen_range(0.7..1.3);
    let spacing = 2.0 * std::f64::consts::PI / n as f64;
    let angles: Vec<f64> = (0..n)
        .map(|k| (k as f64 + rng.gen_range(-0.35..0.35)) * spacing)
        .collect();
    let vertices: Vec<[f64; 2]> = angles
        .iter()
        .map(|&t| [a * t.cos(), b * t.sin()])
        .collect();
    let faces: Vec<[usize; 3]> = (1..n - 1).map(|k| [0, k, k + 1]).collect();
    TriMesh::new(vertices, faces).expect("fan polygon must validate")
}

/// [`fan_polygon`] from a bare seed.
pub fn fan_polygon_seeded(seed: u64, n: usize) -> TriMesh {
    fan_polygon(&mut rng(seed), n)
}

// ---------------------------------------------------------------------------
// Random fields and deformations
// ---------------------------------------------------------------------------

fn random_unit_complex(rng: &mut SeededRng) -> C64 {
    C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
}

/// Smooth random per-vertex Beltrami coefficient field: a random complex
/// polynomial of total degree two in `(x, y)`, rescaled so the maximum
/// modulus over the vertices is exactly `target_max`.
pub fn random_mu_vertex(rng: &mut SeededRng, mesh: &TriMesh, target_max: f64) -> Vec<C64> {
    assert!((0.0..1.0).contains(&target_max));
    let coeffs: Vec<C64> = (0..6).map(|_| random_unit_complex(rng)).collect();
    let mut mu: Vec<C64> = mesh
        .vertices()
        .iter()
        .map(|&[x, y]| {
            coeffs[0]
                + coeffs[1] * x
                + coeffs[2] * y
                + coeffs[3] * (x * x)
                + coeffs[4] * (x * y)
                + coeffs[5] * (y * y)
        })
        .collect();
    let max = mu.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if max > 0.0 {
        let s = target_max / max;
        for z in mu.iter_mut() {
            *z *= s;
        }
    }
    mu
}

/// Random per-face Beltrami coefficients, independent per face, rescaled so
/// the maximum modulus equals `target_max`.
pub fn random_mu_faces(rng: &mut SeededRng, n_faces: usize, target_max: f64) -> Vec<C64> {
    assert!((0.0..1.0).contains(&target_max));
    let mut mu: Vec<C64> = (0..n_faces).map(|_| random_unit_complex(rng)).collect();
    let max = mu.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if max > 0.0 {
        let s = target_max / max;
        for z in mu.iter_mut() {
            *z *= s;
        }
    }
    mu
}

/// Random orientation-preserving piecewise-linear deformation of the mesh:
/// an affine map with comfortably positive determinant plus a few Gaussian
/// bumps whose amplitudes are halved until every image face keeps positive
/// orientation and the per-face Beltrami coefficient stays at modulus at
/// most 0.9. Returns the image position of every vertex.
pub fn random_homeomorphism(rng: &mut SeededRng, mesh: &TriMesh) -> Vec<C64> {
    // Affine part: redraw until both the determinant and the Beltrami
    // modulus are comfortable.
    let (a11, a12, a21, a22) = loop {
        let a11 = 1.0 + rng.gen_range(-0.4..0.4);
        let a12 = rng.gen_range(-0.4..0.4);
        let a21 = rng.gen_range(-0.4..0.4);
        let a22 = 1.0 + rng.gen_range(-0.4..0.4);
        let det = a11 * a22 - a12 * a21;
        if det < 0.3 {
            continue;
        }
        let fz = C64::new(a11 + a22, a21 - a12) * 0.5;
        let fzb = C64::new(a11 - a22, a21 + a12) * 0.5;
        if fzb.norm() <= 0.6 * fz.norm() {
            break (a11, a12, a21, a22);
        }
    };
    let t = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
    let scale = mesh.scale();
    let n_bumps = rng.gen_range(1..=3);
    let bbox = mesh.bbox();
    let bumps: Vec<([f64; 2], f64, C64)> = (0..n_bumps)
        .map(|_| {
            let c = [
                rng.gen_range(bbox[0]..bbox[2]),
                rng.gen_range(bbox[1]..bbox[3]),
            ];
            let sigma = rng.gen_range(0.15..0.4) * scale;
            let w = random_unit_complex(rng) * (0.25 * scale);
            (c, sigma, w)
        })
        .collect();

    let eval = |amp: f64| -> Vec<C64> {
        mesh.vertices()
            .iter()
            .map(|&[x, y]| {
                let mut p = C64::new(a11 * x + a12 * y + t[0], a21 * x + a22 * y + t[1]);
                for &(c, sigma, w) in &bumps {
                    let d2 = (x - c[0]).powi(2) + (y - c[1]).powi(2);
                    p += w * amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
                p
            })
            .collect()
    };

    let mut amp = 1.0;
    for _ in 0..60 {
        let image = eval(amp);
        if deformation_is_tame(mesh, &image) {
            return image;
        }
        amp *= 0.5;
    }
    // Pure affine always qualifies by construction.
    eval(0.0)
}

/// A deformation qualifies when every image face keeps positive orientation
/// with margin and its Beltrami coefficient stays well inside the unit disk.
fn deformation_is_tame(mesh: &TriMesh, image: &[C64]) -> bool {
    for (f, &d0) in mesh.faces().iter().zip(mesh.face_areas()) {
        let a = image[f[0]];
        let b = image[f[1]];
        let c = image[f[2]];
        let d = (a.re * b.im - a.im * b.re) + (b.re * c.im - b.im * c.re)
            + (c.re * a.im - c.im * a.re);
        if d <= 0.05 * d0 {
            return false;
        }
    }
    let (mu, degenerate) = beltrami::bc_from_map(mesh, image);
    degenerate.is_empty() && mu.iter().all(|z| z.norm() <= 0.9)
}

// ---------------------------------------------------------------------------
// Application models
// ---------------------------------------------------------------------------

/// Per-face population carrying a Gaussian density peak: face `T` receives
/// `(1 + amplitude * exp(-|c_T - center|^2 / (2 sigma^2))) * Area(T)`, so
/// the initial face density is `1` plus the peak profile.
pub fn gaussian_peak_population(
    mesh: &TriMesh,
    center: [f64; 2],
    sigma: f64,
    amplitude: f64,
) -> Vec<f64> {
    mesh.face_areas()
        .iter()
        .enumerate()
        .map(|(fi, &d)| {
            let c = mesh.face_centroid(fi);
            let d2 = (c[0] - center[0]).powi(2) + (c[1] - center[1]).powi(2);
            (1.0 + amplitude * (-d2 / (2.0 * sigma * sigma)).exp()) * (d / 2.0)
        })
        .collect()
}

/// Smooth synthetic intensity used by the registration harnesses: a fixed
/// band-limited mixture that is non-constant in every direction.
pub fn smooth_intensity(p: [f64; 2]) -> f64 {
    let [x, y] = p;
    0.5 + 0.3 * (2.1 * x + 0.7).sin() * (1.7 * y - 0.4).cos() + 0.2 * (x * y + 0.5 * x).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_mesh_counts() {
        for m in [1, 2, 5, 18] {
            let mesh = disk_mesh(m);
            assert_eq!(mesh.n_vertices(), 1 + 3 * m * (m + 1));
            assert_eq!(mesh.n_faces(), 6 * m * m);
            assert_eq!(mesh.boundary_loops().len(), 1);
            assert_eq!(mesh.boundary_loops()[0].len(), 6 * m);
        }
    }

    #[test]
    fn disk_mesh_area_approaches_pi() {
        let mesh = disk_mesh(24);
        let area: f64 = mesh.face_areas().iter().sum::<f64>() / 2.0;
        assert!((area - std::f64::consts::PI).abs() < 0.02);
    }

    #[test]
    fn annulus_mesh_counts() {
        let mesh = annulus_mesh(2, 5);
        assert_eq!(mesh.boundary_loops().len(), 2);
        let nv: usize = (2..=5).map(|j| 6 * j).sum();
        assert_eq!(mesh.n_vertices(), nv);
    }

    #[test]
    fn fan_polygon_is_exactly_determined() {
        let mut r = rng(11);
        for n in [3, 10, 37, 60] {
            let mesh = fan_polygon(&mut r, n);
            assert_eq!(mesh.n_faces(), mesh.n_vertices() - 2);
            assert_eq!(mesh.boundary_loops()[0].len(), n);
        }
    }

    #[test]
    fn random_mu_hits_target_modulus() {
        let mut r = rng(3);
        let mesh = disk_mesh(4);
        let mu = random_mu_vertex(&mut r, &mesh, 0.8);
        let max = mu.iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!((max - 0.8).abs() < 1e-12);
    }

    #[test]
    fn random_homeomorphism_preserves_orientation() {
        let mesh = disk_mesh(5);
        for seed in 0..10 {
            let mut r = rng(seed);
            let image = random_homeomorphism(&mut r, &mesh);
            assert!(deformation_is_tame(&mesh, &image), "seed {seed}");
        }
    }

    #[test]
    fn grid_mesh_validates() {
        let mesh = grid_mesh(6);
        assert_eq!(mesh.n_vertices(), 49);
        assert_eq!(mesh.n_faces(), 72);
    }
}
