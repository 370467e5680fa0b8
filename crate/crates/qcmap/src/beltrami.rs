//! Beltrami coefficients of piecewise-linear maps and their supporting
//! operations.
//!
//! The Beltrami coefficient of a map `f` is `mu = f_zbar / f_z` with the
//! Wirtinger derivatives `f_z = (f_x - i f_y) / 2` and
//! `f_zbar = (f_x + i f_y) / 2`; it measures the local deviation from
//! conformality, and `|mu| < 1` exactly when the map preserves orientation.
//! On a triangle mesh every face carries one affine map piece, so `mu` is
//! piecewise constant and is computed from the exact per-face gradient of
//! the linear interpolant.
//!
//! Optimization variables live per vertex; the solver consumes per-face
//! values through [`vertex_to_face`] (corner averaging). The unconstrained
//! reparameterization is handled by [`activation`], which squashes the
//! modulus through `tanh(|x| / temp)` while preserving the argument, so the
//! constraint `max |mu| < 1` holds by construction.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::mesh::TriMesh;
use crate::C64;

/// Beltrami coefficients in per-vertex and/or per-face representation.
///
/// Serialized as `{"per_vertex": [[re, im], ...], "per_face": [[re, im],
/// ...]}` with either array optional. When both are populated, the per-face
/// values are the corner averages of the per-vertex values.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BeltramiField {
    /// Per-vertex coefficients, if populated.
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "complex_pairs_opt"
    )]
    pub per_vertex: Option<Vec<C64>>,
    /// Per-face coefficients, if populated.
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "complex_pairs_opt"
    )]
    pub per_face: Option<Vec<C64>>,
}

impl BeltramiField {
    /// Field with only per-face values.
    pub fn from_faces(per_face: Vec<C64>) -> Self {
        Self {
            per_vertex: None,
            per_face: Some(per_face),
        }
    }

    /// Field with only per-vertex values.
    pub fn from_vertices(per_vertex: Vec<C64>) -> Self {
        Self {
            per_vertex: Some(per_vertex),
            per_face: None,
        }
    }

    /// Populate (or refresh) the per-face representation by corner-averaging
    /// the per-vertex values.
    pub fn with_faces_from_vertices(mut self, mesh: &TriMesh) -> Self {
        if let Some(v) = &self.per_vertex {
            self.per_face = Some(vertex_to_face(mesh, v));
        }
        self
    }

    /// Largest modulus over whichever representations are populated.
    pub fn sup_norm(&self) -> f64 {
        let m1 = self
            .per_vertex
            .iter()
            .flatten()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        let m2 = self
            .per_face
            .iter()
            .flatten()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        m1.max(m2)
    }
}

/// Serde adapter storing `Option<Vec<C64>>` as `[[re, im], ...]`.
mod complex_pairs_opt {
    use super::C64;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<C64>>, s: S) -> Result<S::Ok, S::Error> {
        let pairs: Option<Vec<[f64; 2]>> = v
            .as_ref()
            .map(|v| v.iter().map(|z| [z.re, z.im]).collect());
        pairs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<C64>>, D::Error> {
        let pairs: Option<Vec<[f64; 2]>> = Option::deserialize(d)?;
        Ok(pairs.map(|v| v.into_iter().map(|[re, im]| C64::new(re, im)).collect()))
    }
}

/// Scalars that can ride through the per-face linear gradient stencil.
pub trait GradScalar:
    Copy
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<f64, Output = Self>
{
    /// Additive zero.
    fn zero() -> Self;
}

impl GradScalar for f64 {
    fn zero() -> Self {
        0.0
    }
}

impl GradScalar for C64 {
    fn zero() -> Self {
        C64::new(0.0, 0.0)
    }
}

/// Exact gradient of the piecewise-linear interpolant of `field` on each
/// face, as `[d/dx, d/dy]` per face. For a face with corners `(v1, v2, v3)`
/// and signed double area `d_T`:
///
/// ```text
/// d/dx = [u1 (y2 - y3) + u2 (y3 - y1) + u3 (y1 - y2)] / d_T
/// d/dy = [u1 (x3 - x2) + u2 (x1 - x3) + u3 (x2 - x1)] / d_T
/// ```
pub fn face_gradient<T: GradScalar>(mesh: &TriMesh, field: &[T]) -> Vec<[T; 2]> {
    assert_eq!(field.len(), mesh.n_vertices(), "field length mismatch");
    mesh.faces()
        .iter()
        .zip(mesh.face_areas())
        .map(|(f, &d)| {
            let [v1, v2, v3] = *f;
            let p = |i: usize| mesh.vertices()[i];
            let (u1, u2, u3) = (field[v1], field[v2], field[v3]);
            let inv = 1.0 / d;
            let gx = (u1 * (p(v2)[1] - p(v3)[1])
                + u2 * (p(v3)[1] - p(v1)[1])
                + u3 * (p(v1)[1] - p(v2)[1]))
                * inv;
            let gy = (u1 * (p(v3)[0] - p(v2)[0])
                + u2 * (p(v1)[0] - p(v3)[0])
                + u3 * (p(v2)[0] - p(v1)[0]))
                * inv;
            [gx, gy]
        })
        .collect()
}

/// Per-face Beltrami coefficient of the piecewise-linear map `f` given by
/// its values at the vertices: `mu_T = f_zbar / f_z` from the per-face
/// gradient. Faces where `|f_z|` falls below `1e-14 *` mesh scale get a
/// NaN-marked entry and are listed in the returned index vector.
pub fn bc_from_map(mesh: &TriMesh, map_values: &[C64]) -> (Vec<C64>, Vec<usize>) {
    let grads = face_gradient(mesh, map_values);
    let threshold = 1e-14 * mesh.scale();
    let mut degenerate = Vec::new();
    let mu = grads
        .iter()
        .enumerate()
        .map(|(fi, [fx, fy])| {
            let fz = (fx - C64::i() * fy) * 0.5;
            let fzb = (fx + C64::i() * fy) * 0.5;
            if fz.norm() < threshold {
                degenerate.push(fi);
                C64::new(f64::NAN, f64::NAN)
            } else {
                fzb / fz
            }
        })
        .collect();
    (mu, degenerate)
}

/// Per-face coefficients as the average of the three corner values:
/// `mu_T = (mu_v1 + mu_v2 + mu_v3) / 3`.
pub fn vertex_to_face(mesh: &TriMesh, per_vertex: &[C64]) -> Vec<C64> {
    assert_eq!(per_vertex.len(), mesh.n_vertices(), "field length mismatch");
    mesh.faces()
        .iter()
        .map(|&[a, b, c]| (per_vertex[a] + per_vertex[b] + per_vertex[c]) / 3.0)
        .collect()
}

/// Modulus-squashing activation `T(x) = tanh(|x| / temp) * e^{i arg x}`:
/// output modulus is strictly below one for every finite input and the
/// argument is preserved. `x = 0` maps to exactly `0` (the limit value).
///
/// `tanh` saturates to exactly `1.0` in floating point for large ratios, so
/// saturated outputs are pulled one epsilon inside the unit circle to keep
/// the strict bound valid numerically (the derivative there is zero to
/// machine precision, so this does not disturb gradients).
pub fn activation(x: C64, temp: f64) -> C64 {
    debug_assert!(temp > 0.0, "activation temperature must be positive");
    let m = x.norm();
    if m == 0.0 {
        return C64::new(0.0, 0.0);
    }
    let mut y = x * ((m / temp).tanh() / m);
    while y.norm() >= 1.0 {
        y *= 1.0 - f64::EPSILON;
    }
    y
}

/// [`activation`] applied elementwise.
pub fn activation_field(xs: &[C64], temp: f64) -> Vec<C64> {
    xs.iter().map(|&x| activation(x, temp)).collect()
}

/// Rescale entries with `|mu| > bound` back to modulus `bound`, preserving
/// the argument; all other entries (and NaN markers) pass through.
pub fn clamp_sup_norm(field: &BeltramiField, bound: f64) -> BeltramiField {
    assert!(
        bound > 0.0 && bound < 1.0,
        "clamp bound must lie in (0, 1), got {bound}"
    );
    let clamp_vec = |v: &Vec<C64>| -> Vec<C64> {
        v.iter()
            .map(|&z| {
                let m = z.norm();
                if m > bound {
                    z * (bound / m)
                } else {
                    z
                }
            })
            .collect()
    };
    BeltramiField {
        per_vertex: field.per_vertex.as_ref().map(clamp_vec),
        per_face: field.per_face.as_ref().map(clamp_vec),
    }
}

// ---------------------------------------------------------------------------
// File helpers
// ---------------------------------------------------------------------------

/// Read a Beltrami field from JSON.
pub fn read_field_json(path: &Path) -> Result<BeltramiField, String> {
    let text =
        std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("bad Beltrami JSON {}: {e}", path.display()))
}

/// Write a Beltrami field as JSON.
pub fn write_field_json(path: &Path, field: &BeltramiField) -> Result<(), String> {
    let text = serde_json::to_string_pretty(field).expect("field serializes");
    std::fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

/// Read per-face coefficients from CSV (`re,im` per line; a `re,im` header
/// row is tolerated).
pub fn read_mu_csv(path: &Path) -> Result<Vec<C64>, String> {
    let text =
        std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let mut out = Vec::new();
    for (ln0, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if ln0 == 0 && line.starts_with("re") {
            continue;
        }
        let mut parts = line.split(',');
        let parse = |s: Option<&str>| -> Result<f64, String> {
            s.map(str::trim)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| format!("bad CSV line {} in {}: {line:?}", ln0 + 1, path.display()))
        };
        let re = parse(parts.next())?;
        let im = parse(parts.next())?;
        out.push(C64::new(re, im));
    }
    Ok(out)
}

/// Write per-face coefficients as CSV with a `re,im` header.
pub fn write_mu_csv(path: &Path, mu: &[C64]) -> Result<(), String> {
    let mut text = String::from("re,im\n");
    for z in mu {
        text.push_str(&format!("{},{}\n", z.re, z.im));
    }
    std::fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))
}
