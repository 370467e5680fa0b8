//! Least-squares solve for a free-boundary map with prescribed Beltrami
//! coefficients.
//!
//! Given per-face coefficients `mu` with `|mu| < 1` and exactly two pinned
//! vertices, the map minimizing the quasiconformal residual energy
//!
//! ```text
//! E(U) = sum_T (1 / d_T) |W_1 u_1 + W_2 u_2 + W_3 u_3|^2
//! ```
//!
//! is found by solving one sparse Hermitian positive definite linear system
//! in the free vertex positions. Here `d_T` is twice the face area,
//! `u_j` are the (complex) image positions of the face corners, and the
//! coefficients are `W_j = e_j + mu_T conj(e_j)` with `e_j` the complex
//! opposite-edge vector `v_{j+2} - v_{j+1}` (cyclic). Each `W` row carries
//! a `1 / sqrt(d_T)` scaling so that the plain sum of squared row residuals
//! is exactly the energy; skipping that scaling changes the minimizer on
//! any irregular mesh.
//!
//! The energy of a map vanishes iff the map's Beltrami coefficient matches
//! `mu` on every face, so two pins suffice: they remove the similarity
//! ambiguity (rotation, scale, translation) of the otherwise-free boundary
//! without constraining its shape.
//!
//! The factorization is retained inside the returned [`MapResult`] so that
//! downstream gradient propagation can reuse it; a token pairs each result
//! with the system that produced it.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::mesh::TriMesh;
use crate::sparse::{self, ProfileFactor, ProfileMatrix, SparseError};
use crate::{Kahan, C64};

/// Errors from system assembly and solving.
#[derive(Debug, Error)]
pub enum LsqcError {
    /// The solve requires exactly two pinned vertices.
    #[error("exactly 2 pinned vertices are required, got {got}")]
    PinCount { got: usize },
    /// A pin referenced a vertex outside the mesh.
    #[error("pinned vertex {vertex} out of range for mesh with {n_vertices} vertices")]
    PinOutOfRange { vertex: usize, n_vertices: usize },
    /// Both pins named the same vertex.
    #[error("pinned vertices must be distinct, vertex {vertex} appears twice")]
    DuplicatePin { vertex: usize },
    /// The coefficient array length does not match the face count.
    #[error("per-face coefficient count {got} does not match face count {want}")]
    MuLength { got: usize, want: usize },
    /// A coefficient had modulus at or above one, or was not finite.
    #[error("coefficient on face {face} has modulus {modulus} outside [0, 1)")]
    MuOutOfRange { face: usize, modulus: f64 },
    /// The sparse backend failed.
    #[error(transparent)]
    Solver(#[from] SparseError),
    /// A gradient propagation was handed a result from a different system.
    #[error("map result does not belong to this system (was it produced by a different assembly?)")]
    MismatchedSystem,
}

/// A vertex held at a prescribed target position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pin {
    /// Vertex index.
    pub vertex: usize,
    /// Prescribed image position.
    pub target: C64,
}

impl Pin {
    /// Pin `vertex` to `target`.
    pub fn new(vertex: usize, target: C64) -> Self {
        Self { vertex, target }
    }
}

/// Assembly switches. The default is the correct solver; the alternative
/// exists only as a negative control for the property-test suites.
#[derive(Debug, Clone, Copy, Default)]
pub struct AssembleOptions {
    /// Skip the `1 / sqrt(d_T)` row scaling. This solves a subtly different
    /// (wrong) least-squares problem on any mesh with unequal face areas,
    /// which the resolution-consistency property test is designed to catch.
    pub skip_row_scaling: bool,
}

static SYSTEM_TOKENS: AtomicU64 = AtomicU64::new(1);

/// Assembled sparse system for one mesh / coefficient field / pin pair.
#[derive(Debug)]
pub struct LsqcSystem {
    pub(crate) faces: Vec<[usize; 3]>,
    /// Scaled coefficients `W_j / sqrt(d_T)` per face corner.
    pub(crate) rows: Vec<[C64; 3]>,
    /// Coefficient derivatives `dW_j/dmu / sqrt(d_T) = conj(e_j) / sqrt(d_T)`
    /// per face corner, retained for gradient propagation.
    pub(crate) dmu_rows: Vec<[C64; 3]>,
    /// Per corner: `Some(column)` into the permuted free unknowns, or
    /// `None` for a pinned corner.
    pub(crate) cols: Vec<[Option<usize>; 3]>,
    /// Per face: the fixed contribution of pinned corners to the row
    /// product.
    pub(crate) pin_contrib: Vec<C64>,
    pub(crate) pins: [Pin; 2],
    /// Permuted free column -> vertex id.
    pub(crate) vertex_of_col: Vec<usize>,
    h: ProfileMatrix<C64>,
    pub(crate) token: u64,
    n_vertices: usize,
    skip_row_scaling: bool,
}

impl LsqcSystem {
    /// Assemble the system with default options.
    pub fn assemble(mesh: &TriMesh, mu_faces: &[C64], pins: &[Pin]) -> Result<Self, LsqcError> {
        Self::assemble_with_options(mesh, mu_faces, pins, AssembleOptions::default())
    }

    /// Assemble with explicit [`AssembleOptions`].
    pub fn assemble_with_options(
        mesh: &TriMesh,
        mu_faces: &[C64],
        pins: &[Pin],
        options: AssembleOptions,
    ) -> Result<Self, LsqcError> {
        if pins.len() != 2 {
            return Err(LsqcError::PinCount { got: pins.len() });
        }
        let n = mesh.n_vertices();
        for p in pins {
            if p.vertex >= n {
                return Err(LsqcError::PinOutOfRange {
                    vertex: p.vertex,
                    n_vertices: n,
                });
            }
        }
        if pins[0].vertex == pins[1].vertex {
            return Err(LsqcError::DuplicatePin {
                vertex: pins[0].vertex,
            });
        }
        if mu_faces.len() != mesh.n_faces() {
            return Err(LsqcError::MuLength {
                got: mu_faces.len(),
                want: mesh.n_faces(),
            });
        }
        for (fi, mu) in mu_faces.iter().enumerate() {
            let m = mu.norm();
            if !m.is_finite() || m >= 1.0 {
                return Err(LsqcError::MuOutOfRange {
                    face: fi,
                    modulus: m,
                });
            }
        }
        let pins = [pins[0], pins[1]];

        // Free-vertex numbering, then a reverse Cuthill-McKee permutation of
        // the free vertices to keep the Cholesky envelope small.
        let is_pinned = |v: usize| v == pins[0].vertex || v == pins[1].vertex;
        let mut free_slot = vec![None; n];
        let mut slot_vertex = Vec::with_capacity(n - 2);
        for v in 0..n {
            if !is_pinned(v) {
                free_slot[v] = Some(slot_vertex.len());
                slot_vertex.push(v);
            }
        }
        let n_free = slot_vertex.len();
        let mut adj = vec![Vec::new(); n_free];
        for f in mesh.faces() {
            for i in 0..3 {
                for j in 0..i {
                    if let (Some(a), Some(b)) = (free_slot[f[i]], free_slot[f[j]]) {
                        if !adj[a].contains(&b) {
                            adj[a].push(b);
                            adj[b].push(a);
                        }
                    }
                }
            }
        }
        let perm = sparse::rcm_order(&adj);
        let mut col_of_slot = vec![0usize; n_free];
        for (new, &old) in perm.iter().enumerate() {
            col_of_slot[old] = new;
        }
        let vertex_of_col: Vec<usize> = perm.iter().map(|&s| slot_vertex[s]).collect();
        let col_of_vertex = |v: usize| free_slot[v].map(|s| col_of_slot[s]);

        // Per-face rows: W_j = e_j + mu conj(e_j), scaled by 1 / sqrt(d_T).
        let mut rows = Vec::with_capacity(mesh.n_faces());
        let mut dmu_rows = Vec::with_capacity(mesh.n_faces());
        let mut cols = Vec::with_capacity(mesh.n_faces());
        let mut pin_contrib = Vec::with_capacity(mesh.n_faces());
        for (fi, f) in mesh.faces().iter().enumerate() {
            let p = |j: usize| mesh.vertex_c(f[j]);
            let scale = if options.skip_row_scaling {
                1.0
            } else {
                1.0 / mesh.face_areas()[fi].sqrt()
            };
            let mut w = [C64::new(0.0, 0.0); 3];
            let mut dw = [C64::new(0.0, 0.0); 3];
            for j in 0..3 {
                let e = p((j + 2) % 3) - p((j + 1) % 3);
                w[j] = (e + mu_faces[fi] * e.conj()) * scale;
                dw[j] = e.conj() * scale;
            }
            let mut c = [None; 3];
            let mut fixed = C64::new(0.0, 0.0);
            for j in 0..3 {
                c[j] = col_of_vertex(f[j]);
                if c[j].is_none() {
                    let pin = pins.iter().find(|p| p.vertex == f[j]).unwrap();
                    fixed += w[j] * pin.target;
                }
            }
            rows.push(w);
            dmu_rows.push(dw);
            cols.push(c);
            pin_contrib.push(fixed);
        }

        // Normal-equation matrix H = Mf* Mf over the permuted free columns,
        // assembled face by face (each face contributes a rank-1 clique).
        let cliques: Vec<Vec<usize>> = cols
            .iter()
            .map(|c| c.iter().flatten().copied().collect())
            .collect();
        let mut h =
            ProfileMatrix::<C64>::symbolic_from_cliques(n_free, cliques.iter().map(|c| c.as_slice()));
        for (w, c) in rows.iter().zip(&cols) {
            for i in 0..3 {
                let Some(ci) = c[i] else { continue };
                h.add_diag(ci, w[i].norm_sqr());
                for j in 0..3 {
                    if i == j {
                        continue;
                    }
                    let Some(cj) = c[j] else { continue };
                    if ci > cj {
                        h.add_lower(ci, cj, w[i].conj() * w[j]);
                    }
                }
            }
        }

        Ok(Self {
            faces: mesh.faces().to_vec(),
            rows,
            dmu_rows,
            cols,
            pin_contrib,
            pins,
            vertex_of_col,
            h,
            token: SYSTEM_TOKENS.fetch_add(1, Ordering::Relaxed),
            n_vertices: n,
            skip_row_scaling: options.skip_row_scaling,
        })
    }

    /// Re-assemble the numeric values for a new coefficient field, keeping
    /// the pins, column permutation, and normal-equation sparsity pattern.
    /// The mesh must be the one the system was assembled from; only the
    /// coefficients may change. Results solved from the previous values no
    /// longer belong to this system afterwards.
    pub fn update_mu(&mut self, mesh: &TriMesh, mu_faces: &[C64]) -> Result<(), LsqcError> {
        assert_eq!(mesh.n_vertices(), self.n_vertices, "mesh changed under the system");
        assert_eq!(mesh.faces(), &self.faces[..], "mesh changed under the system");
        if mu_faces.len() != mesh.n_faces() {
            return Err(LsqcError::MuLength {
                got: mu_faces.len(),
                want: mesh.n_faces(),
            });
        }
        for (fi, mu) in mu_faces.iter().enumerate() {
            let m = mu.norm();
            if !m.is_finite() || m >= 1.0 {
                return Err(LsqcError::MuOutOfRange {
                    face: fi,
                    modulus: m,
                });
            }
        }
        self.h.clear();
        for (fi, f) in mesh.faces().iter().enumerate() {
            let p = |j: usize| mesh.vertex_c(f[j]);
            let scale = if self.skip_row_scaling {
                1.0
            } else {
                1.0 / mesh.face_areas()[fi].sqrt()
            };
            let mut fixed = C64::new(0.0, 0.0);
            for j in 0..3 {
                let e = p((j + 2) % 3) - p((j + 1) % 3);
                self.rows[fi][j] = (e + mu_faces[fi] * e.conj()) * scale;
                self.dmu_rows[fi][j] = e.conj() * scale;
                if self.cols[fi][j].is_none() {
                    let pin = self.pins.iter().find(|p| p.vertex == f[j]).unwrap();
                    fixed += self.rows[fi][j] * pin.target;
                }
            }
            self.pin_contrib[fi] = fixed;
            let (w, c) = (&self.rows[fi], &self.cols[fi]);
            for i in 0..3 {
                let Some(ci) = c[i] else { continue };
                self.h.add_diag(ci, w[i].norm_sqr());
                for j in 0..3 {
                    if i == j {
                        continue;
                    }
                    let Some(cj) = c[j] else { continue };
                    if ci > cj {
                        self.h.add_lower(ci, cj, w[i].conj() * w[j]);
                    }
                }
            }
        }
        self.token = SYSTEM_TOKENS.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    /// Number of free unknowns.
    pub fn n_free(&self) -> usize {
        self.vertex_of_col.len()
    }

    /// The two pins the system was assembled with.
    pub fn pins(&self) -> &[Pin; 2] {
        &self.pins
    }

    /// Row products `(M U)_T` for free unknowns `x` (pins folded in): the
    /// scaled residual of each face.
    pub(crate) fn row_products(&self, x: &[C64]) -> Vec<C64> {
        self.rows
            .iter()
            .zip(&self.cols)
            .zip(&self.pin_contrib)
            .map(|((w, c), &fixed)| {
                let mut s = fixed;
                for j in 0..3 {
                    if let Some(cj) = c[j] {
                        s += w[j] * x[cj];
                    }
                }
                s
            })
            .collect()
    }

    /// Adjoint application `Mf* y` (faces to free columns).
    pub(crate) fn rows_adjoint(&self, y: &[C64]) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); self.n_free()];
        for ((w, c), &yt) in self.rows.iter().zip(&self.cols).zip(y) {
            for j in 0..3 {
                if let Some(cj) = c[j] {
                    out[cj] += w[j].conj() * yt;
                }
            }
        }
        out
    }

    /// Normal-operator application `H x = Mf* (Mf x)` computed face-wise.
    pub(crate) fn normal_apply(&self, x: &[C64]) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); self.n_free()];
        for (w, c) in self.rows.iter().zip(&self.cols) {
            let mut s = C64::new(0.0, 0.0);
            for j in 0..3 {
                if let Some(cj) = c[j] {
                    s += w[j] * x[cj];
                }
            }
            for j in 0..3 {
                if let Some(cj) = c[j] {
                    out[cj] += w[j].conj() * s;
                }
            }
        }
        out
    }

    /// Scatter free unknowns and pins into a full per-vertex position array.
    fn scatter(&self, x: &[C64]) -> Vec<C64> {
        let mut u = vec![C64::new(0.0, 0.0); self.n_vertices];
        for (col, &v) in self.vertex_of_col.iter().enumerate() {
            u[v] = x[col];
        }
        for p in &self.pins {
            u[p.vertex] = p.target;
        }
        u
    }

    /// Solve for the energy-minimizing free vertex positions.
    ///
    /// The normal equations are factored by sparse Cholesky and the solution
    /// is polished with two fixed rounds of residual refinement (solving
    /// the normal equations against the true least-squares residual), which
    /// recovers most of the accuracy a QR factorization would give. If the
    /// factorization breaks down — possible only when some `|mu|` is within
    /// roundoff of one — a Jacobi-preconditioned conjugate-gradient solve is
    /// attempted before giving up.
    pub fn solve(&self) -> Result<MapResult, LsqcError> {
        match self.h.factor() {
            Ok(factor) => {
                let factor = Arc::new(factor);
                let x = self.solve_with_factor(&factor);
                Ok(self.finish(x, SolveEngine::Direct(factor)))
            }
            Err(breakdown) => {
                log::warn!(
                    "normal-equation factorization failed ({breakdown}); \
                     falling back to conjugate gradients"
                );
                let x = self.solve_pcg(None)?;
                Ok(self.finish(x, SolveEngine::Iterative))
            }
        }
    }

    /// Solve iteratively, optionally preconditioned by the factorization
    /// retained in an earlier result (useful when coefficients changed only
    /// slightly since that factorization).
    pub fn solve_iterative(&self, preconditioner: Option<&MapResult>) -> Result<MapResult, LsqcError> {
        let x = self.solve_pcg(preconditioner)?;
        Ok(self.finish(x, SolveEngine::Iterative))
    }

    /// Direct solve with two fixed refinement passes. Pass zero computes the
    /// initial solution (the iterate starts at zero, so its residual is the
    /// full right-hand side); the refinement count is deliberately not
    /// adaptive, keeping the solve a smooth function of its inputs.
    fn solve_with_factor(&self, factor: &ProfileFactor<C64>) -> Vec<C64> {
        let mut x = vec![C64::new(0.0, 0.0); self.n_free()];
        for _pass in 0..3 {
            let residual: Vec<C64> = self.row_products(&x).iter().map(|&r| -r).collect();
            let mut dx = self.rows_adjoint(&residual);
            factor.solve_in_place(&mut dx);
            for (xi, di) in x.iter_mut().zip(dx) {
                *xi += di;
            }
        }
        x
    }

    fn solve_pcg(&self, preconditioner: Option<&MapResult>) -> Result<Vec<C64>, LsqcError> {
        let b: Vec<C64> = {
            let neg_pin: Vec<C64> = self.pin_contrib.iter().map(|&p| -p).collect();
            let mut out = vec![C64::new(0.0, 0.0); self.n_free()];
            for ((w, c), &yt) in self.rows.iter().zip(&self.cols).zip(&neg_pin) {
                for j in 0..3 {
                    if let Some(cj) = c[j] {
                        out[cj] += w[j].conj() * yt;
                    }
                }
            }
            out
        };
        let jacobi: Vec<f64> = {
            let mut d = vec![0.0f64; self.n_free()];
            for (w, c) in self.rows.iter().zip(&self.cols) {
                for j in 0..3 {
                    if let Some(cj) = c[j] {
                        d[cj] += w[j].norm_sqr();
                    }
                }
            }
            d.iter().map(|&v| if v > 0.0 { 1.0 / v } else { 1.0 }).collect()
        };
        let precond = |r: &[C64]| -> Vec<C64> {
            match preconditioner.map(|p| &p.engine) {
                Some(SolveEngine::Direct(factor)) if factor.n() == self.n_free() => factor.solve(r),
                _ => r.iter().zip(&jacobi).map(|(&ri, &di)| ri * di).collect(),
            }
        };
        let (x, iters) = sparse::pcg_hermitian(
            |v| self.normal_apply(v),
            precond,
            &b,
            1e-13,
            20 * self.n_free().max(100),
        )?;
        log::debug!("PCG converged in {iters} iterations");
        Ok(x)
    }

    fn finish(&self, x: Vec<C64>, engine: SolveEngine) -> MapResult {
        let mut energy = Kahan::new();
        for r in self.row_products(&x) {
            energy.add(r.norm_sqr());
        }
        MapResult {
            positions: self.scatter(&x),
            energy: energy.value(),
            engine,
            token: self.token,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) enum SolveEngine {
    Direct(Arc<ProfileFactor<C64>>),
    Iterative,
}

/// Solved map: image positions for every vertex, pinned ones at their
/// targets. Retains the solver state needed for gradient propagation.
#[derive(Debug, Clone)]
pub struct MapResult {
    positions: Vec<C64>,
    energy: f64,
    pub(crate) engine: SolveEngine,
    pub(crate) token: u64,
}

impl MapResult {
    /// Image position of every vertex.
    pub fn positions(&self) -> &[C64] {
        &self.positions
    }

    /// Take ownership of the positions.
    pub fn into_positions(self) -> Vec<C64> {
        self.positions
    }

    /// Residual energy at the solution.
    pub fn energy(&self) -> f64 {
        self.energy
    }
}

/// Residual energy of an arbitrary candidate map under coefficients `mu`:
/// `sum_T |W . u|^2 / d_T`, compensated summation over faces.
pub fn lsqc_energy(mesh: &TriMesh, mu_faces: &[C64], positions: &[C64]) -> f64 {
    assert_eq!(mu_faces.len(), mesh.n_faces());
    assert_eq!(positions.len(), mesh.n_vertices());
    let mut acc = Kahan::new();
    for (fi, f) in mesh.faces().iter().enumerate() {
        let p = |j: usize| mesh.vertex_c(f[j]);
        let mut s = C64::new(0.0, 0.0);
        for j in 0..3 {
            let e = p((j + 2) % 3) - p((j + 1) % 3);
            s += (e + mu_faces[fi] * e.conj()) * positions[f[j]];
        }
        acc.add(s.norm_sqr() / mesh.face_areas()[fi]);
    }
    acc.value()
}

/// Apply the similarity `g(x) = exp(s_tilde) exp(i phi) x + r` to every
/// position.
pub fn apply_similarity(positions: &[C64], phi: f64, s_tilde: f64, r: C64) -> Vec<C64> {
    let w = C64::from_polar(s_tilde.exp(), phi);
    positions.iter().map(|&z| w * z + r).collect()
}

/// Faces whose image under `positions` has nonpositive signed area
/// (orientation flipped or collapsed).
pub fn flipped_faces(faces: &[[usize; 3]], positions: &[C64]) -> Vec<usize> {
    faces
        .iter()
        .enumerate()
        .filter(|(_, f)| {
            let a = positions[f[0]];
            let b = positions[f[1]];
            let c = positions[f[2]];
            let e1 = b - a;
            let e2 = c - a;
            e1.re * e2.im - e1.im * e2.re <= 0.0
        })
        .map(|(fi, _)| fi)
        .collect()
}

/// Pick the two pinned vertices: the pair of boundary vertices at maximum
/// euclidean distance (ties broken toward the lexicographically smallest
/// index pair). Scans all pairs up to 4096 boundary vertices; beyond that
/// the diameter is found on the convex hull with rotating calipers.
pub fn pick_pins(mesh: &TriMesh) -> (usize, usize) {
    let boundary: Vec<usize> = mesh
        .boundary_loops()
        .iter()
        .flat_map(|l| l.iter().copied())
        .collect();
    assert!(
        boundary.len() >= 2,
        "mesh must have at least two boundary vertices"
    );
    let candidates: Vec<usize> = if boundary.len() <= 4096 {
        boundary
    } else {
        convex_hull_vertices(mesh, &boundary)
    };
    let mut best = (f64::NEG_INFINITY, (0usize, 0usize));
    for (a, &i) in candidates.iter().enumerate() {
        for &j in candidates.iter().skip(a + 1) {
            let d = (mesh.vertex_c(i) - mesh.vertex_c(j)).norm_sqr();
            let pair = (i.min(j), i.max(j));
            if d > best.0 || (d == best.0 && pair < best.1) {
                best = (d, pair);
            }
        }
    }
    best.1
}

/// Convex hull (Andrew's monotone chain) of the given vertices, by index.
/// Used only to shrink the candidate set for the diameter search; the
/// remaining pairwise scan over hull vertices keeps tie-breaking identical
/// to the exhaustive path.
fn convex_hull_vertices(mesh: &TriMesh, ids: &[usize]) -> Vec<usize> {
    let mut pts: Vec<usize> = ids.to_vec();
    pts.sort_by(|&a, &b| {
        let pa = mesh.vertices()[a];
        let pb = mesh.vertices()[b];
        pa.partial_cmp(&pb).unwrap().then(a.cmp(&b))
    });
    pts.dedup_by_key(|&mut v| mesh.vertices()[v]);
    if pts.len() <= 2 {
        return pts;
    }
    let cross = |o: usize, a: usize, b: usize| {
        let po = mesh.vertices()[o];
        let pa = mesh.vertices()[a];
        let pb = mesh.vertices()[b];
        (pa[0] - po[0]) * (pb[1] - po[1]) - (pa[1] - po[1]) * (pb[0] - po[0])
    };
    let mut hull: Vec<usize> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let it: Box<dyn Iterator<Item = &usize>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in it {
            while hull.len() >= start + 2
                && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
            {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{beltrami, synth};
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;

    fn right_triangle() -> TriMesh {
        TriMesh::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]]).unwrap()
    }

    #[test]
    fn hand_coefficients_on_unit_right_triangle() {
        // For the unit right triangle and mu = 0 the coefficients are
        // (-1 + i, -i, 1); with mu = 1/2 they become
        // (-3/2 + i/2, -i/2, 3/2). d_T = 1 so the row scaling is trivial.
        let mesh = right_triangle();
        let pins = [Pin::new(0, mesh.vertex_c(0)), Pin::new(1, mesh.vertex_c(1))];
        let sys = LsqcSystem::assemble(&mesh, &[C64::new(0.0, 0.0)], &pins).unwrap();
        let expect = [C64::new(-1.0, 1.0), C64::new(0.0, -1.0), C64::new(1.0, 0.0)];
        for j in 0..3 {
            assert!((sys.rows[0][j] - expect[j]).norm() < 1e-15);
        }
        let sys = LsqcSystem::assemble(&mesh, &[C64::new(0.5, 0.0)], &pins).unwrap();
        let expect = [C64::new(-1.5, 0.5), C64::new(0.0, -0.5), C64::new(1.5, 0.0)];
        for j in 0..3 {
            assert!((sys.rows[0][j] - expect[j]).norm() < 1e-15);
        }
    }

    #[test]
    fn coefficients_sum_to_zero_per_face() {
        let mut rng = synth::rng(41);
        let mesh = synth::fan_polygon(&mut rng, 17);
        let mu = synth::random_mu_faces(&mut rng, mesh.n_faces(), 0.8);
        let pins = [Pin::new(0, C64::new(0.0, 0.0)), Pin::new(1, C64::new(1.0, 0.0))];
        let sys = LsqcSystem::assemble(&mesh, &mu, &pins).unwrap();
        for w in &sys.rows {
            assert!((w[0] + w[1] + w[2]).norm() < 1e-12);
        }
    }

    #[test]
    fn constant_maps_have_zero_energy() {
        let mesh = synth::disk_mesh(3);
        let mut rng = synth::rng(5);
        let mu = synth::random_mu_faces(&mut rng, mesh.n_faces(), 0.7);
        let constant = vec![C64::new(0.3, -1.2); mesh.n_vertices()];
        assert!(lsqc_energy(&mesh, &mu, &constant) < 1e-22);
    }

    #[test]
    fn solution_matches_dense_least_squares_oracle() {
        // Real block formulation solved densely: with M = M1 + i M2 the
        // complex least-squares problem is [[M1, -M2], [M2, M1]] acting on
        // stacked (Re, Im) unknowns. SVD-based dense solve, independent of
        // the sparse path.
        let mesh = synth::disk_mesh(3);
        let mut rng = synth::rng(23);
        let mu = synth::random_mu_faces(&mut rng, mesh.n_faces(), 0.6);
        let (pa, pb) = pick_pins(&mesh);
        let pins = [
            Pin::new(pa, mesh.vertex_c(pa)),
            Pin::new(pb, C64::new(0.4, 1.3)),
        ];
        let sys = LsqcSystem::assemble(&mesh, &mu, &pins).unwrap();
        let map = sys.solve().unwrap();

        let nf = sys.n_free();
        let nt = mesh.n_faces();
        let mut m1 = DMatrix::<f64>::zeros(nt, nf);
        let mut m2 = DMatrix::<f64>::zeros(nt, nf);
        let mut b = DVector::<f64>::zeros(2 * nt);
        for t in 0..nt {
            for j in 0..3 {
                match sys.cols[t][j] {
                    Some(c) => {
                        m1[(t, c)] += sys.rows[t][j].re;
                        m2[(t, c)] += sys.rows[t][j].im;
                    }
                    None => {}
                }
            }
            b[t] = -sys.pin_contrib[t].re;
            b[nt + t] = -sys.pin_contrib[t].im;
        }
        let mut block = DMatrix::<f64>::zeros(2 * nt, 2 * nf);
        block.view_mut((0, 0), (nt, nf)).copy_from(&m1);
        block.view_mut((0, nf), (nt, nf)).copy_from(&(-&m2));
        block.view_mut((nt, 0), (nt, nf)).copy_from(&m2);
        block.view_mut((nt, nf), (nt, nf)).copy_from(&m1);
        let svd = block.svd(true, true);
        let sol = svd.solve(&b, 1e-12).unwrap();
        for (c, &v) in sys.vertex_of_col.iter().enumerate() {
            let dense = C64::new(sol[c], sol[nf + c]);
            assert!(
                (map.positions()[v] - dense).norm() < 1e-9,
                "vertex {v}: sparse {} vs dense {dense}",
                map.positions()[v]
            );
        }
    }

    #[test]
    fn realizable_coefficients_are_reconstructed_exactly() {
        // f(z) = z + mu0 conj(z) realizes a constant coefficient exactly, so
        // the least-squares solution with matching pins must reproduce it to
        // roundoff and reach (near-)zero energy.
        let mesh = synth::disk_mesh(4);
        let mu0 = C64::new(0.4, -0.35);
        let f = |z: C64| z + mu0 * z.conj();
        let mu = vec![mu0; mesh.n_faces()];
        let (pa, pb) = pick_pins(&mesh);
        let pins = [
            Pin::new(pa, f(mesh.vertex_c(pa))),
            Pin::new(pb, f(mesh.vertex_c(pb))),
        ];
        let map = LsqcSystem::assemble(&mesh, &mu, &pins).unwrap().solve().unwrap();
        for v in 0..mesh.n_vertices() {
            assert!((map.positions()[v] - f(mesh.vertex_c(v))).norm() < 1e-10);
        }
        assert!(map.energy() < 1e-18, "energy {}", map.energy());
        // Recovered coefficients close the loop.
        let (mu_back, degenerate) = beltrami::bc_from_map(&mesh, map.positions());
        assert!(degenerate.is_empty());
        for m in mu_back {
            assert!((m - mu0).norm() < 1e-9);
        }
    }

    #[test]
    fn zero_mu_with_identity_pins_is_identity() {
        let mesh = synth::fan_polygon_seeded(8, 14);
        let mu = vec![C64::new(0.0, 0.0); mesh.n_faces()];
        let (pa, pb) = pick_pins(&mesh);
        let pins = [
            Pin::new(pa, mesh.vertex_c(pa)),
            Pin::new(pb, mesh.vertex_c(pb)),
        ];
        let map = LsqcSystem::assemble(&mesh, &mu, &pins).unwrap().solve().unwrap();
        for v in 0..mesh.n_vertices() {
            assert!((map.positions()[v] - mesh.vertex_c(v)).norm() < 1e-10);
        }
    }

    #[test]
    fn solver_energy_is_least_among_perturbations() {
        let mesh = synth::disk_mesh(2);
        let mut rng = synth::rng(71);
        let mu = synth::random_mu_faces(&mut rng, mesh.n_faces(), 0.5);
        let pins = [Pin::new(0, C64::new(0.1, 0.0)), Pin::new(3, C64::new(1.0, 0.6))];
        let sys = LsqcSystem::assemble(&mesh, &mu, &pins).unwrap();
        let map = sys.solve().unwrap();
        let base = lsqc_energy(&mesh, &mu, map.positions());
        assert_abs_diff_eq!(base, map.energy(), epsilon = 1e-12 * (1.0 + base));
        for _ in 0..20 {
            let mut perturbed = map.positions().to_vec();
            let v = loop {
                let v = rng.gen_range(0..mesh.n_vertices());
                if v != 0 && v != 3 {
                    break v;
                }
            };
            perturbed[v] += C64::new(rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01));
            assert!(lsqc_energy(&mesh, &mu, &perturbed) >= base);
        }
    }

    #[test]
    fn unscaled_rows_solve_a_different_problem() {
        // The negative-control switch must actually change the answer on an
        // overdetermined system (interior vertices present) with unequal
        // face areas. A triangulated polygon would not do: there F = V - 2,
        // the pinned system is square, the residual vanishes for any mu and
        // row weights cannot matter.
        let mut rng = synth::rng(35);
        let mesh = synth::disk_mesh(2);
        let mu = synth::random_mu_faces(&mut rng, mesh.n_faces(), 0.5);
        let pins = [Pin::new(0, C64::new(0.0, 0.0)), Pin::new(5, C64::new(1.0, 0.2))];
        let good = LsqcSystem::assemble(&mesh, &mu, &pins).unwrap().solve().unwrap();
        let bad = LsqcSystem::assemble_with_options(
            &mesh,
            &mu,
            &pins,
            AssembleOptions {
                skip_row_scaling: true,
            },
        )
        .unwrap()
        .solve()
        .unwrap();
        let diff: f64 = good
            .positions()
            .iter()
            .zip(bad.positions())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(diff > 1e-6, "solutions should differ, max diff {diff}");
    }

    #[test]
    fn iterative_solve_agrees_with_direct() {
        let mesh = synth::disk_mesh(3);
        let mut rng = synth::rng(92);
        let mu = synth::random_mu_faces(&mut rng, mesh.n_faces(), 0.6);
        let (pa, pb) = pick_pins(&mesh);
        let pins = [
            Pin::new(pa, mesh.vertex_c(pa)),
            Pin::new(pb, mesh.vertex_c(pb)),
        ];
        let sys = LsqcSystem::assemble(&mesh, &mu, &pins).unwrap();
        let direct = sys.solve().unwrap();
        let plain = sys.solve_iterative(None).unwrap();
        let preconditioned = sys.solve_iterative(Some(&direct)).unwrap();
        for v in 0..mesh.n_vertices() {
            assert!((direct.positions()[v] - plain.positions()[v]).norm() < 1e-8);
            assert!((direct.positions()[v] - preconditioned.positions()[v]).norm() < 1e-10);
        }
    }

    #[test]
    fn validation_rejects_bad_inputs() {
        let mesh = right_triangle();
        let mu = [C64::new(0.0, 0.0)];
        let p0 = Pin::new(0, C64::new(0.0, 0.0));
        let p1 = Pin::new(1, C64::new(1.0, 0.0));
        assert!(matches!(
            LsqcSystem::assemble(&mesh, &mu, &[p0]),
            Err(LsqcError::PinCount { got: 1 })
        ));
        assert!(matches!(
            LsqcSystem::assemble(&mesh, &mu, &[p0, Pin::new(0, C64::new(1.0, 0.0))]),
            Err(LsqcError::DuplicatePin { vertex: 0 })
        ));
        assert!(matches!(
            LsqcSystem::assemble(&mesh, &mu, &[p0, Pin::new(7, C64::new(1.0, 0.0))]),
            Err(LsqcError::PinOutOfRange { vertex: 7, .. })
        ));
        assert!(matches!(
            LsqcSystem::assemble(&mesh, &[], &[p0, p1]),
            Err(LsqcError::MuLength { got: 0, want: 1 })
        ));
        assert!(matches!(
            LsqcSystem::assemble(&mesh, &[C64::new(1.0, 0.0)], &[p0, p1]),
            Err(LsqcError::MuOutOfRange { face: 0, .. })
        ));
        assert!(matches!(
            LsqcSystem::assemble(&mesh, &[C64::new(f64::NAN, 0.0)], &[p0, p1]),
            Err(LsqcError::MuOutOfRange { face: 0, .. })
        ));
    }

    #[test]
    fn pick_pins_matches_brute_force_on_small_meshes() {
        for seed in 0..10 {
            let mesh = synth::fan_polygon_seeded(seed, 40);
            let (a, b) = pick_pins(&mesh);
            // Exhaustive oracle over all vertex pairs (boundary pairs are a
            // subset, and the diameter of a fan polygon is on the boundary).
            let mut best = (f64::NEG_INFINITY, (0, 0));
            for i in 0..mesh.n_vertices() {
                for j in i + 1..mesh.n_vertices() {
                    let d = (mesh.vertex_c(i) - mesh.vertex_c(j)).norm_sqr();
                    if d > best.0 {
                        best = (d, (i, j));
                    }
                }
            }
            assert_eq!((a, b), best.1, "seed {seed}");
        }
    }

    #[test]
    fn pick_pins_hull_path_matches_exhaustive_scan() {
        // Force the convex-hull path with > 4096 boundary vertices.
        let mesh = synth::fan_polygon_seeded(2, 4200);
        let (a, b) = pick_pins(&mesh);
        let boundary: Vec<usize> = mesh
            .boundary_loops()
            .iter()
            .flat_map(|l| l.iter().copied())
            .collect();
        assert!(boundary.len() > 4096);
        let mut best = (f64::NEG_INFINITY, (0, 0));
        for (ai, &i) in boundary.iter().enumerate() {
            for &j in boundary.iter().skip(ai + 1) {
                let d = (mesh.vertex_c(i) - mesh.vertex_c(j)).norm_sqr();
                let pair = (i.min(j), i.max(j));
                if d > best.0 || (d == best.0 && pair < best.1) {
                    best = (d, pair);
                }
            }
        }
        assert_eq!((a, b), best.1);
    }

    #[test]
    fn apply_similarity_is_scale_rotation_translation() {
        let z = [C64::new(1.0, 0.0)];
        let out = apply_similarity(&z, std::f64::consts::FRAC_PI_2, 2.0f64.ln(), C64::new(0.5, -1.0));
        // exp(ln 2) * exp(i pi/2) * 1 + (0.5 - i) = 2i + 0.5 - i = 0.5 + i.
        assert!((out[0] - C64::new(0.5, 1.0)).norm() < 1e-14);
    }

    #[test]
    fn flipped_faces_detects_reflections() {
        let mesh = right_triangle();
        let ident = mesh.positions_c();
        assert!(flipped_faces(mesh.faces(), &ident).is_empty());
        let mirrored: Vec<C64> = ident.iter().map(|z| z.conj()).collect();
        assert_eq!(flipped_faces(mesh.faces(), &mirrored), vec![0]);
    }

    #[test]
    fn map_result_keeps_energy_consistent_with_direct_evaluation() {
        let mesh = synth::disk_mesh(2);
        let mut rng = synth::rng(13);
        let mu = synth::random_mu_faces(&mut rng, mesh.n_faces(), 0.4);
        let pins = [Pin::new(2, C64::new(0.0, 0.0)), Pin::new(9, C64::new(1.0, 1.0))];
        let map = LsqcSystem::assemble(&mesh, &mu, &pins).unwrap().solve().unwrap();
        let direct = lsqc_energy(&mesh, &mu, map.positions());
        assert_abs_diff_eq!(map.energy(), direct, epsilon = 1e-13 * (1.0 + direct));
    }

    #[test]
    fn update_mu_matches_fresh_assembly() {
        let mesh = synth::disk_mesh(2);
        let mut rng = synth::rng(14);
        let mu1 = synth::random_mu_faces(&mut rng, mesh.n_faces(), 0.3);
        let mu2 = synth::random_mu_faces(&mut rng, mesh.n_faces(), 0.6);
        let pins = [Pin::new(0, C64::new(0.0, 0.0)), Pin::new(7, C64::new(1.0, 0.0))];
        let mut system = LsqcSystem::assemble(&mesh, &mu1, &pins).unwrap();
        let token_before = system.token;
        system.update_mu(&mesh, &mu2).unwrap();
        assert_ne!(system.token, token_before, "update must invalidate old results");
        let updated = system.solve().unwrap();
        let fresh = LsqcSystem::assemble(&mesh, &mu2, &pins)
            .unwrap()
            .solve()
            .unwrap();
        for (a, b) in updated.positions().iter().zip(fresh.positions()) {
            assert!((a - b).norm() < 1e-13, "updated {a} vs fresh {b}");
        }
        let bad = vec![C64::new(1.2, 0.0); mesh.n_faces()];
        assert!(matches!(
            system.update_mu(&mesh, &bad),
            Err(LsqcError::MuOutOfRange { .. })
        ));
    }
}
