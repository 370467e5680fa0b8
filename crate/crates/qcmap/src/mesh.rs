//! Planar triangle meshes: validation, file I/O, boundary loops, barycentric
//! point location, sparse interpolation, and barycentric face splits.
//!
//! A [`TriMesh`] is immutable after construction and is only handed out once
//! it has passed validation: faces are counter-clockwise (uniformly clockwise
//! input is silently reoriented, mixed orientation is rejected), no face is
//! degenerate relative to the mesh scale, the face graph is edge-connected
//! with no dangling triangles, every interior edge is shared by exactly two
//! faces with opposite winding, and every vertex is referenced. Derived data
//! (signed double areas, boundary loops, a background grid for point
//! location) is computed up front so all queries are lock-free and safe to
//! run concurrently.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::{Kahan, C64};

/// Errors raised by mesh construction, parsing, and editing.
#[derive(Debug, thiserror::Error)]
pub enum MeshError {
    /// Underlying file could not be read or written.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    /// File contents did not parse as the requested format.
    #[error("parse error in {path} (line {line}): {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    /// Mesh parsed but failed validation; every violation is listed.
    #[error("mesh validation failed:\n{}", issues.iter().map(|i| format!("  - {i}")).collect::<Vec<_>>().join("\n"))]
    Validation { issues: Vec<ValidationIssue> },
    /// Face-split weights were non-positive or did not sum to one.
    #[error("invalid split weights {alpha:?}: {reason}")]
    InvalidWeights { alpha: [f64; 3], reason: String },
    /// An operation referenced a face index outside the mesh.
    #[error("face index {face} out of range (mesh has {n_faces} faces)")]
    FaceOutOfRange { face: usize, n_faces: usize },
}

/// One itemized validation violation.
#[derive(Debug, Clone, PartialEq)]
pub enum ValidationIssue {
    /// Mesh has no vertices or no faces.
    Empty,
    /// A face references a vertex index outside the vertex list.
    IndexOutOfRange { face: usize, index: usize },
    /// A face lists the same vertex twice.
    RepeatedVertex { face: usize },
    /// A vertex coordinate is NaN or infinite.
    NonFiniteCoordinate { vertex: usize },
    /// Input declared a third coordinate that is not (numerically) zero.
    NonPlanar { vertex: usize, z: f64 },
    /// |signed double area| is below the scale-relative threshold.
    DegenerateFace { face: usize, double_area: f64 },
    /// Some faces are clockwise and some counter-clockwise.
    MixedOrientation { clockwise_faces: Vec<usize> },
    /// An edge is shared by more than two faces.
    NonManifoldEdge { a: usize, b: usize, count: usize },
    /// Two faces traverse a shared edge in the same direction.
    InconsistentWinding { a: usize, b: usize },
    /// A boundary vertex has more than one outgoing boundary edge.
    NonManifoldVertex { vertex: usize },
    /// A vertex is not referenced by any face.
    UnreferencedVertex { vertex: usize },
    /// The face graph splits into several edge-connected components.
    Disconnected { components: usize },
    /// A face shares no edge with any other face (and the mesh has > 1 face).
    DanglingTriangle { face: usize },
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use ValidationIssue::*;
        match self {
            Empty => write!(f, "mesh has no vertices or no faces"),
            IndexOutOfRange { face, index } => {
                write!(f, "face {face} references missing vertex {index}")
            }
            RepeatedVertex { face } => write!(f, "face {face} lists a vertex twice"),
            NonFiniteCoordinate { vertex } => {
                write!(f, "vertex {vertex} has a non-finite coordinate")
            }
            NonPlanar { vertex, z } => {
                write!(f, "vertex {vertex} has non-zero third coordinate {z}")
            }
            DegenerateFace { face, double_area } => {
                write!(f, "face {face} is degenerate (double area {double_area:.3e})")
            }
            MixedOrientation { clockwise_faces } => write!(
                f,
                "mixed orientation: {} clockwise face(s), e.g. {:?}",
                clockwise_faces.len(),
                &clockwise_faces[..clockwise_faces.len().min(8)]
            ),
            NonManifoldEdge { a, b, count } => {
                write!(f, "edge ({a},{b}) is shared by {count} faces")
            }
            InconsistentWinding { a, b } => {
                write!(f, "edge ({a},{b}) is traversed twice in the same direction")
            }
            NonManifoldVertex { vertex } => {
                write!(f, "boundary vertex {vertex} is a pinch point")
            }
            UnreferencedVertex { vertex } => {
                write!(f, "vertex {vertex} is not used by any face")
            }
            Disconnected { components } => {
                write!(f, "mesh splits into {components} edge-connected components")
            }
            DanglingTriangle { face } => {
                write!(f, "face {face} shares no edge with any other face")
            }
        }
    }
}

/// Relative threshold under which a face counts as degenerate: a face fails
/// validation when its signed double area is at most `1e-14 * diag^2`, with
/// `diag` the bounding-box diagonal of the vertex set.
pub const DEGENERACY_REL_THRESHOLD: f64 = 1e-14;

/// Result of barycentric point location: the face realizing the smallest
/// `|l1| + |l2| + |l3|` over all faces, and those barycentric coordinates.
/// For a point inside the mesh this is a containing face with all
/// coordinates non-negative; outside the mesh the weights extrapolate and
/// some are negative, but they still sum to one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaryLocation {
    /// Index of the located face.
    pub face: usize,
    /// Barycentric coordinates with respect to the face's corners, in corner
    /// order; `lambda[0] + lambda[1] + lambda[2] == 1` up to rounding.
    pub lambda: [f64; 3],
}

/// Sparse barycentric interpolation matrix of shape
/// `targets.len() x source.n_vertices()`, at most three non-zeros per row.
/// Row `t` holds the barycentric weights of target point `t` in one source
/// face; each row sums to one (exactly one for targets coinciding with a
/// source vertex).
#[derive(Debug, Clone)]
pub struct InterpMatrix {
    nrows: usize,
    ncols: usize,
    rows: Vec<InterpRow>,
}

/// One row of an [`InterpMatrix`]: three column indices and their weights.
#[derive(Debug, Clone, Copy)]
pub struct InterpRow {
    /// Source vertex indices (the located face's corners).
    pub verts: [usize; 3],
    /// Barycentric weights; sums to one.
    pub weights: [f64; 3],
}

impl InterpMatrix {
    /// Number of target points (rows).
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    /// Number of source vertices (columns).
    pub fn ncols(&self) -> usize {
        self.ncols
    }

    /// Row view.
    pub fn rows(&self) -> &[InterpRow] {
        &self.rows
    }

    /// Interpolate per-source-vertex complex values to the target points.
    pub fn apply(&self, source_values: &[C64]) -> Vec<C64> {
        assert_eq!(source_values.len(), self.ncols, "source length mismatch");
        self.rows
            .iter()
            .map(|r| {
                source_values[r.verts[0]] * r.weights[0]
                    + source_values[r.verts[1]] * r.weights[1]
                    + source_values[r.verts[2]] * r.weights[2]
            })
            .collect()
    }

    /// Transpose application: scatter per-target values back to source
    /// vertices with the same weights. This is the exact adjoint of
    /// [`InterpMatrix::apply`].
    pub fn apply_transpose(&self, target_values: &[C64]) -> Vec<C64> {
        assert_eq!(target_values.len(), self.nrows, "target length mismatch");
        let mut out = vec![C64::new(0.0, 0.0); self.ncols];
        for (r, &g) in self.rows.iter().zip(target_values) {
            for j in 0..3 {
                out[r.verts[j]] += g * r.weights[j];
            }
        }
        out
    }
}

/// Uniform background grid over the mesh bounding box used to prune
/// candidate faces in [`TriMesh::locate`]. Purely an accelerator: answers
/// always agree with the brute-force minimizer over all faces.
#[derive(Debug, Clone)]
struct LocateGrid {
    x0: f64,
    y0: f64,
    inv_cell_x: f64,
    inv_cell_y: f64,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<u32>>,
}

impl LocateGrid {
    fn build(vertices: &[[f64; 2]], faces: &[[usize; 3]], bbox: [f64; 4]) -> Self {
        let [x0, y0, x1, y1] = bbox;
        let w = (x1 - x0).max(1e-300);
        let h = (y1 - y0).max(1e-300);
        // Aim for ~2 faces per cell, capped to keep the grid small.
        let target_cells = (faces.len() as f64 / 2.0).max(1.0);
        let cell = (w * h / target_cells).sqrt().max(1e-300);
        let nx = ((w / cell).ceil() as usize).clamp(1, 512);
        let ny = ((h / cell).ceil() as usize).clamp(1, 512);
        let inv_cell_x = nx as f64 / w;
        let inv_cell_y = ny as f64 / h;
        let mut cells = vec![Vec::new(); nx * ny];
        for (fi, f) in faces.iter().enumerate() {
            let xs = [vertices[f[0]][0], vertices[f[1]][0], vertices[f[2]][0]];
            let ys = [vertices[f[0]][1], vertices[f[1]][1], vertices[f[2]][1]];
            let fx0 = xs.iter().cloned().fold(f64::INFINITY, f64::min);
            let fx1 = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let fy0 = ys.iter().cloned().fold(f64::INFINITY, f64::min);
            let fy1 = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ix0 = (((fx0 - x0) * inv_cell_x).floor() as isize).clamp(0, nx as isize - 1) as usize;
            let ix1 = (((fx1 - x0) * inv_cell_x).floor() as isize).clamp(0, nx as isize - 1) as usize;
            let iy0 = (((fy0 - y0) * inv_cell_y).floor() as isize).clamp(0, ny as isize - 1) as usize;
            let iy1 = (((fy1 - y0) * inv_cell_y).floor() as isize).clamp(0, ny as isize - 1) as usize;
            for iy in iy0..=iy1 {
                for ix in ix0..=ix1 {
                    cells[iy * nx + ix].push(fi as u32);
                }
            }
        }
        Self {
            x0,
            y0,
            inv_cell_x,
            inv_cell_y,
            nx,
            ny,
            cells,
        }
    }

    fn candidates(&self, p: [f64; 2]) -> &[u32] {
        let ix = (((p[0] - self.x0) * self.inv_cell_x).floor() as isize).clamp(0, self.nx as isize - 1)
            as usize;
        let iy = (((p[1] - self.y0) * self.inv_cell_y).floor() as isize).clamp(0, self.ny as isize - 1)
            as usize;
        &self.cells[iy * self.nx + ix]
    }
}

/// Validated planar triangle mesh.
#[derive(Debug, Clone)]
pub struct TriMesh {
    vertices: Vec<[f64; 2]>,
    faces: Vec<[usize; 3]>,
    /// Signed double areas `d_T`, all positive after validation.
    face_areas: Vec<f64>,
    /// Ordered boundary loops; the outer loop (positive signed area, listed
    /// first) runs counter-clockwise, hole loops clockwise.
    boundary_loops: Vec<Vec<usize>>,
    bbox: [f64; 4],
    grid: LocateGrid,
}

impl TriMesh {
    /// Validate raw vertex and face lists and build the mesh.
    ///
    /// Uniformly clockwise input is reoriented (and logged); every other
    /// violation is collected and reported in one [`MeshError::Validation`].
    pub fn new(vertices: Vec<[f64; 2]>, faces: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        Self::build(vertices, faces, &[])
    }

    /// As [`TriMesh::new`], with third-coordinate violations from a 3D file
    /// reported alongside the other issues.
    fn build(
        vertices: Vec<[f64; 2]>,
        mut faces: Vec<[usize; 3]>,
        planarity_issues: &[ValidationIssue],
    ) -> Result<Self, MeshError> {
        let mut issues: Vec<ValidationIssue> = planarity_issues.to_vec();
        if vertices.is_empty() || faces.is_empty() {
            issues.push(ValidationIssue::Empty);
            return Err(MeshError::Validation { issues });
        }
        // Structural checks must pass before any geometry is evaluated.
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                if v >= n {
                    issues.push(ValidationIssue::IndexOutOfRange { face: fi, index: v });
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                issues.push(ValidationIssue::RepeatedVertex { face: fi });
            }
        }
        for (vi, v) in vertices.iter().enumerate() {
            if !v[0].is_finite() || !v[1].is_finite() {
                issues.push(ValidationIssue::NonFiniteCoordinate { vertex: vi });
            }
        }
        if !issues.is_empty() {
            return Err(MeshError::Validation { issues });
        }

        let bbox = bounding_box(&vertices);
        let diag2 = (bbox[2] - bbox[0]).powi(2) + (bbox[3] - bbox[1]).powi(2);
        let tiny = DEGENERACY_REL_THRESHOLD * diag2;

        let mut areas: Vec<f64> = faces
            .iter()
            .map(|f| double_area(vertices[f[0]], vertices[f[1]], vertices[f[2]]))
            .collect();
        let n_pos = areas.iter().filter(|&&d| d > tiny).count();
        let n_neg = areas.iter().filter(|&&d| d < -tiny).count();
        let degen: Vec<usize> = areas
            .iter()
            .enumerate()
            .filter(|(_, &d)| d.abs() <= tiny)
            .map(|(i, _)| i)
            .collect();
        if !degen.is_empty() {
            for fi in &degen {
                issues.push(ValidationIssue::DegenerateFace {
                    face: *fi,
                    double_area: areas[*fi],
                });
            }
        } else if n_pos == 0 && n_neg > 0 {
            // Uniformly clockwise: a common exporter convention, not
            // corruption. Flip every face and carry on.
            log::warn!("input faces are uniformly clockwise; reorienting all {n_neg} faces");
            for f in faces.iter_mut() {
                f.swap(1, 2);
            }
            for d in areas.iter_mut() {
                *d = -*d;
            }
        } else if n_pos > 0 && n_neg > 0 {
            let clockwise: Vec<usize> = areas
                .iter()
                .enumerate()
                .filter(|(_, &d)| d < -tiny)
                .map(|(i, _)| i)
                .collect();
            issues.push(ValidationIssue::MixedOrientation {
                clockwise_faces: clockwise,
            });
        }
        if !issues.is_empty() {
            return Err(MeshError::Validation { issues });
        }

        // Edge census: interior edges must be shared by exactly two faces
        // with opposite winding; boundary edges by exactly one.
        let mut edges: HashMap<(usize, usize), Vec<(usize, bool)>> = HashMap::new();
        for (fi, f) in faces.iter().enumerate() {
            for k in 0..3 {
                let a = f[k];
                let b = f[(k + 1) % 3];
                let key = (a.min(b), a.max(b));
                edges.entry(key).or_default().push((fi, a < b));
            }
        }
        let mut edge_keys: Vec<&(usize, usize)> = edges.keys().collect();
        edge_keys.sort();
        for key in edge_keys {
            let users = &edges[key];
            if users.len() > 2 {
                issues.push(ValidationIssue::NonManifoldEdge {
                    a: key.0,
                    b: key.1,
                    count: users.len(),
                });
            } else if users.len() == 2 && users[0].1 == users[1].1 {
                issues.push(ValidationIssue::InconsistentWinding { a: key.0, b: key.1 });
            }
        }

        let mut referenced = vec![false; n];
        for f in &faces {
            for &v in f {
                referenced[v] = true;
            }
        }
        for (vi, r) in referenced.iter().enumerate() {
            if !r {
                issues.push(ValidationIssue::UnreferencedVertex { vertex: vi });
            }
        }

        // Edge-connectivity of the face graph.
        if faces.len() > 1 {
            let mut neighbor_count = vec![0usize; faces.len()];
            let mut comp = vec![usize::MAX; faces.len()];
            let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); faces.len()];
            for users in edges.values() {
                if users.len() == 2 {
                    let (a, b) = (users[0].0, users[1].0);
                    adjacency[a].push(b);
                    adjacency[b].push(a);
                    neighbor_count[a] += 1;
                    neighbor_count[b] += 1;
                }
            }
            let mut n_comp = 0;
            for start in 0..faces.len() {
                if comp[start] != usize::MAX {
                    continue;
                }
                let mut stack = vec![start];
                comp[start] = n_comp;
                while let Some(fi) = stack.pop() {
                    for &g in &adjacency[fi] {
                        if comp[g] == usize::MAX {
                            comp[g] = n_comp;
                            stack.push(g);
                        }
                    }
                }
                n_comp += 1;
            }
            if n_comp > 1 {
                for (fi, &c) in neighbor_count.iter().enumerate() {
                    if c == 0 {
                        issues.push(ValidationIssue::DanglingTriangle { face: fi });
                    }
                }
                issues.push(ValidationIssue::Disconnected { components: n_comp });
            }
        }

        // Boundary loops from directed boundary edges. With all faces
        // counter-clockwise the interior lies to the left of each directed
        // boundary edge, so the outer loop comes out counter-clockwise and
        // hole loops clockwise.
        let mut boundary_next: HashMap<usize, usize> = HashMap::new();
        let mut boundary_starts: Vec<usize> = Vec::new();
        for (fi, f) in faces.iter().enumerate() {
            for k in 0..3 {
                let a = f[k];
                let b = f[(k + 1) % 3];
                let key = (a.min(b), a.max(b));
                if edges[&key].len() == 1 {
                    debug_assert_eq!(edges[&key][0].0, fi);
                    if boundary_next.insert(a, b).is_some() {
                        issues.push(ValidationIssue::NonManifoldVertex { vertex: a });
                    }
                    boundary_starts.push(a);
                }
            }
        }
        if !issues.is_empty() {
            return Err(MeshError::Validation { issues });
        }

        boundary_starts.sort_unstable();
        boundary_starts.dedup();
        let mut visited: HashMap<usize, bool> = HashMap::new();
        let mut boundary_loops: Vec<Vec<usize>> = Vec::new();
        for &start in &boundary_starts {
            if visited.get(&start).copied().unwrap_or(false) {
                continue;
            }
            let mut loop_verts = vec![start];
            visited.insert(start, true);
            let mut cur = boundary_next[&start];
            while cur != start {
                loop_verts.push(cur);
                visited.insert(cur, true);
                cur = boundary_next[&cur];
            }
            // Canonical rotation: start each loop at its smallest vertex.
            let min_pos = loop_verts
                .iter()
                .enumerate()
                .min_by_key(|(_, &v)| v)
                .map(|(i, _)| i)
                .unwrap();
            loop_verts.rotate_left(min_pos);
            boundary_loops.push(loop_verts);
        }
        // Outer loop (largest, positive signed area) first; deterministic
        // tie-break on the smallest contained vertex index.
        boundary_loops.sort_by(|a, b| {
            let sa = loop_signed_area(&vertices, a);
            let sb = loop_signed_area(&vertices, b);
            sb.partial_cmp(&sa).unwrap().then(a[0].cmp(&b[0]))
        });

        let grid = LocateGrid::build(&vertices, &faces, bbox);
        Ok(Self {
            vertices,
            faces,
            face_areas: areas,
            boundary_loops,
            bbox,
            grid,
        })
    }

    /// Vertex coordinates.
    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    /// Face corner indices (counter-clockwise).
    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Number of vertices.
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// Number of faces.
    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    /// Signed double areas `d_T` (all positive).
    pub fn face_areas(&self) -> &[f64] {
        &self.face_areas
    }

    /// Ordered boundary loops; outer loop first (counter-clockwise), then
    /// hole loops (clockwise).
    pub fn boundary_loops(&self) -> &[Vec<usize>] {
        &self.boundary_loops
    }

    /// Axis-aligned bounding box `[x0, y0, x1, y1]`.
    pub fn bbox(&self) -> [f64; 4] {
        self.bbox
    }

    /// Mesh scale: the bounding-box diagonal.
    pub fn scale(&self) -> f64 {
        ((self.bbox[2] - self.bbox[0]).powi(2) + (self.bbox[3] - self.bbox[1]).powi(2)).sqrt()
    }

    /// Vertex position as a complex number.
    pub fn vertex_c(&self, i: usize) -> C64 {
        C64::new(self.vertices[i][0], self.vertices[i][1])
    }

    /// All vertex positions as complex numbers.
    pub fn positions_c(&self) -> Vec<C64> {
        self.vertices.iter().map(|v| C64::new(v[0], v[1])).collect()
    }

    /// Centroid of a face.
    pub fn face_centroid(&self, face: usize) -> [f64; 2] {
        let [a, b, c] = self.faces[face];
        [
            (self.vertices[a][0] + self.vertices[b][0] + self.vertices[c][0]) / 3.0,
            (self.vertices[a][1] + self.vertices[b][1] + self.vertices[c][1]) / 3.0,
        ]
    }

    /// Face adjacency over shared edges (computed on demand).
    pub fn face_neighbors(&self) -> Vec<Vec<usize>> {
        let mut edges: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (fi, f) in self.faces.iter().enumerate() {
            for k in 0..3 {
                let a = f[k];
                let b = f[(k + 1) % 3];
                edges.entry((a.min(b), a.max(b))).or_default().push(fi);
            }
        }
        let mut adjacency = vec![Vec::new(); self.faces.len()];
        for users in edges.values() {
            if users.len() == 2 {
                adjacency[users[0]].push(users[1]);
                adjacency[users[1]].push(users[0]);
            }
        }
        for nb in adjacency.iter_mut() {
            nb.sort_unstable();
        }
        adjacency
    }

    /// Barycentric coordinates of `p` with respect to face `face`, solved
    /// from the 2x2 edge-vector system (well-defined for points outside the
    /// face; weights then extrapolate and may be negative). The first weight
    /// is completed as `1 - l2 - l3`, so the sum is exactly one.
    pub fn barycentric(&self, face: usize, p: [f64; 2]) -> [f64; 3] {
        let [i, j, k] = self.faces[face];
        let v1 = self.vertices[i];
        let v2 = self.vertices[j];
        let v3 = self.vertices[k];
        let e1 = [v2[0] - v1[0], v2[1] - v1[1]];
        let e2 = [v3[0] - v1[0], v3[1] - v1[1]];
        let d = e1[0] * e2[1] - e1[1] * e2[0];
        let rel = [p[0] - v1[0], p[1] - v1[1]];
        let l2 = (rel[0] * e2[1] - rel[1] * e2[0]) / d;
        let l3 = (e1[0] * rel[1] - e1[1] * rel[0]) / d;
        [1.0 - l2 - l3, l2, l3]
    }

    /// Locate `p`: return the face (and weights) minimizing
    /// `|l1| + |l2| + |l3|` over all faces. Inside the mesh this is a
    /// containing face with non-negative weights; outside, the minimizing
    /// face extrapolates. A background grid prunes candidates; when the
    /// point is genuinely contained the grid pass is exhaustive, otherwise
    /// the full scan runs, so the answer always matches the brute-force
    /// minimizer.
    pub fn locate(&self, p: [f64; 2]) -> BaryLocation {
        // Grid pass: containing faces must register in the point's cell.
        let mut best: Option<(f64, usize, [f64; 3])> = None;
        for &fi in self.grid.candidates(p) {
            let lambda = self.barycentric(fi as usize, p);
            if lambda.iter().all(|&l| l >= -1e-12) {
                let s = lambda[0].abs() + lambda[1].abs() + lambda[2].abs();
                if best.map_or(true, |(bs, bf, _)| {
                    s < bs || (s == bs && (fi as usize) < bf)
                }) {
                    best = Some((s, fi as usize, lambda));
                }
            }
        }
        if let Some((_, face, lambda)) = best {
            return BaryLocation { face, lambda };
        }
        self.locate_brute(p)
    }

    /// Brute-force location over every face; the reference semantics for
    /// [`TriMesh::locate`].
    pub fn locate_brute(&self, p: [f64; 2]) -> BaryLocation {
        let mut best_face = 0;
        let mut best_lambda = self.barycentric(0, p);
        let mut best_sum = best_lambda.iter().map(|l| l.abs()).sum::<f64>();
        for fi in 1..self.faces.len() {
            let lambda = self.barycentric(fi, p);
            let s = lambda.iter().map(|l| l.abs()).sum::<f64>();
            if s < best_sum {
                best_sum = s;
                best_face = fi;
                best_lambda = lambda;
            }
        }
        BaryLocation {
            face: best_face,
            lambda: best_lambda,
        }
    }

    /// Build the sparse interpolation matrix carrying per-vertex values on
    /// this mesh to arbitrary target points (rows sum to one; points outside
    /// the domain extrapolate from the nearest face in the
    /// minimal-`|lambda|`-sum sense).
    pub fn build_interp(&self, targets: &[[f64; 2]]) -> InterpMatrix {
        use rayon::prelude::*;
        let rows: Vec<InterpRow> = targets
            .par_iter()
            .map(|&p| {
                let loc = self.locate(p);
                InterpRow {
                    verts: self.faces[loc.face],
                    weights: loc.lambda,
                }
            })
            .collect();
        InterpMatrix {
            nrows: targets.len(),
            ncols: self.vertices.len(),
            rows,
        }
    }

    /// Split face `face` at the interior point with barycentric weights
    /// `alpha`, returning the refined mesh and the index of the new vertex.
    ///
    /// The parent face `(v1, v2, v3)` is replaced by three children each
    /// omitting one parent corner; the child omitting `v_i` has double area
    /// `alpha_i * d_T`. The child omitting `v1` reuses the parent's face
    /// slot; the other two are appended, and the new vertex is appended to
    /// the vertex list. All other faces and the boundary are untouched.
    pub fn split_face(&self, face: usize, alpha: [f64; 3]) -> Result<(TriMesh, usize), MeshError> {
        if face >= self.faces.len() {
            return Err(MeshError::FaceOutOfRange {
                face,
                n_faces: self.faces.len(),
            });
        }
        if alpha.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
            return Err(MeshError::InvalidWeights {
                alpha,
                reason: "all weights must be positive".into(),
            });
        }
        let sum: f64 = alpha.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MeshError::InvalidWeights {
                alpha,
                reason: format!("weights sum to {sum}, expected 1"),
            });
        }
        let alpha = [alpha[0] / sum, alpha[1] / sum, alpha[2] / sum];
        let [v1, v2, v3] = self.faces[face];
        let p = |i: usize| self.vertices[i];
        let new_vertex = [
            alpha[0] * p(v1)[0] + alpha[1] * p(v2)[0] + alpha[2] * p(v3)[0],
            alpha[0] * p(v1)[1] + alpha[1] * p(v2)[1] + alpha[2] * p(v3)[1],
        ];
        let mut vertices = self.vertices.clone();
        vertices.push(new_vertex);
        let vn = vertices.len() - 1;
        let mut faces = self.faces.clone();
        faces[face] = [v2, v3, vn]; // omits v1, double area alpha_1 * d_T
        faces.push([v3, v1, vn]); // omits v2
        faces.push([v1, v2, vn]); // omits v3
        let mesh = TriMesh::new(vertices, faces)?;
        Ok((mesh, vn))
    }
}

/// Signed double area of the triangle `(a, b, c)`:
/// `(x1 y2 - y1 x2) + (x2 y3 - y2 x3) + (x3 y1 - y3 x1)`.
pub fn double_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (a[0] * b[1] - a[1] * b[0]) + (b[0] * c[1] - b[1] * c[0]) + (c[0] * a[1] - c[1] * a[0])
}

fn bounding_box(vertices: &[[f64; 2]]) -> [f64; 4] {
    let mut bb = [
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    ];
    for v in vertices {
        bb[0] = bb[0].min(v[0]);
        bb[1] = bb[1].min(v[1]);
        bb[2] = bb[2].max(v[0]);
        bb[3] = bb[3].max(v[1]);
    }
    bb
}

/// Shoelace signed area of the polygon with the listed vertex indices.
fn loop_signed_area(vertices: &[[f64; 2]], indices: &[usize]) -> f64 {
    let mut acc = Kahan::new();
    for (k, &i) in indices.iter().enumerate() {
        let j = indices[(k + 1) % indices.len()];
        acc.add(vertices[i][0] * vertices[j][1] - vertices[i][1] * vertices[j][0]);
    }
    acc.value() / 2.0
}

// ---------------------------------------------------------------------------
// File I/O
// ---------------------------------------------------------------------------

/// Supported mesh file formats (triangles only; OBJ texture/normal
/// references are ignored on read).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Off,
    Obj,
}

impl MeshFormat {
    /// Infer the format from a path extension (`.off` / `.obj`,
    /// case-insensitive).
    pub fn from_path(path: &Path) -> Option<MeshFormat> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("off") => Some(MeshFormat::Off),
            Some("obj") => Some(MeshFormat::Obj),
            _ => None,
        }
    }
}

/// Raw parse result before validation: vertex coordinates, face index
/// triples, and any third-coordinate violations found in a 3D file.
struct RawMesh {
    vertices: Vec<[f64; 2]>,
    faces: Vec<[usize; 3]>,
    planarity_issues: Vec<ValidationIssue>,
}

/// Load and validate a mesh file.
pub fn load_mesh(path: &Path, format: MeshFormat) -> Result<TriMesh, MeshError> {
    let raw = parse_file(path, format)?;
    TriMesh::build(raw.vertices, raw.faces, &raw.planarity_issues)
}

/// Parse a mesh file without validating it, returning raw vertex positions
/// and faces. Used where possibly non-valid geometry must be read back, e.g.
/// solved image meshes whose faces may be flipped.
pub fn parse_positions(path: &Path, format: MeshFormat) -> Result<(Vec<[f64; 2]>, Vec<[usize; 3]>), MeshError> {
    let raw = parse_file(path, format)?;
    Ok((raw.vertices, raw.faces))
}

fn parse_file(path: &Path, format: MeshFormat) -> Result<RawMesh, MeshError> {
    let text = std::fs::read_to_string(path).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })?;
    match format {
        MeshFormat::Off => parse_off(&text, path),
        MeshFormat::Obj => parse_obj(&text, path),
    }
}

/// Planarity tolerance on third coordinates of nominally-2D input.
const PLANARITY_TOL: f64 = 1e-9;

fn parse_off(text: &str, path: &Path) -> Result<RawMesh, MeshError> {
    let err = |line: usize, message: String| MeshError::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    // Tokenize with line tracking, dropping comments.
    let mut tokens: Vec<(usize, &str)> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        for tok in line.split_whitespace() {
            tokens.push((ln + 1, tok));
        }
    }
    let mut pos = 0;
    let next = |pos: &mut usize, what: &str| -> Result<(usize, &str), MeshError> {
        let t = tokens
            .get(*pos)
            .copied()
            .ok_or_else(|| err(tokens.last().map_or(1, |t| t.0), format!("unexpected end of file, expected {what}")))?;
        *pos += 1;
        Ok(t)
    };
    let (ln, magic) = next(&mut pos, "OFF header")?;
    if !magic.eq_ignore_ascii_case("OFF") {
        return Err(err(ln, format!("expected OFF header, found {magic:?}")));
    }
    let parse_count = |t: (usize, &str), what: &str| -> Result<usize, MeshError> {
        t.1.parse::<usize>()
            .map_err(|_| err(t.0, format!("invalid {what} count {:?}", t.1)))
    };
    let nv = parse_count(next(&mut pos, "vertex count")?, "vertex")?;
    let nf = parse_count(next(&mut pos, "face count")?, "face")?;
    let _ne = parse_count(next(&mut pos, "edge count")?, "edge")?;

    let mut vertices = Vec::with_capacity(nv);
    let mut planarity_issues = Vec::new();
    for vi in 0..nv {
        // OFF does not mark vertex dimension per line; we read per line in
        // the original text to distinguish 2D from 3D rows. Re-tokenize by
        // consuming exactly the tokens that belong to this vertex: peek the
        // line number of the first coordinate and take all tokens on it.
        let (line_no, tok) = next(&mut pos, "vertex coordinate")?;
        let x: f64 = tok
            .parse()
            .map_err(|_| err(line_no, format!("invalid coordinate {tok:?}")))?;
        let (_, tok) = next(&mut pos, "vertex coordinate")?;
        let y: f64 = tok
            .parse()
            .map_err(|_| err(line_no, format!("invalid coordinate {tok:?}")))?;
        // Optional z on the same line.
        let mut z = 0.0;
        if let Some(&(ln2, tok2)) = tokens.get(pos) {
            if ln2 == line_no {
                if let Ok(v) = tok2.parse::<f64>() {
                    z = v;
                    pos += 1;
                } else {
                    return Err(err(ln2, format!("invalid coordinate {tok2:?}")));
                }
            }
        }
        if z.abs() > PLANARITY_TOL {
            planarity_issues.push(ValidationIssue::NonPlanar { vertex: vi, z });
        }
        vertices.push([x, y]);
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (ln, tok) = next(&mut pos, "face size")?;
        let k: usize = tok
            .parse()
            .map_err(|_| err(ln, format!("invalid face size {tok:?}")))?;
        if k != 3 {
            return Err(err(ln, format!("only triangular faces are supported, found {k}-gon")));
        }
        let mut f = [0usize; 3];
        for slot in f.iter_mut() {
            let (ln, tok) = next(&mut pos, "face index")?;
            *slot = tok
                .parse()
                .map_err(|_| err(ln, format!("invalid face index {tok:?}")))?;
        }
        faces.push(f);
    }
    Ok(RawMesh {
        vertices,
        faces,
        planarity_issues,
    })
}

fn parse_obj(text: &str, path: &Path) -> Result<RawMesh, MeshError> {
    let err = |line: usize, message: String| MeshError::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut planarity_issues = Vec::new();
    for (ln0, line) in text.lines().enumerate() {
        let ln = ln0 + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let coords: Vec<&str> = it.collect();
                if coords.len() < 2 || coords.len() > 4 {
                    return Err(err(ln, format!("vertex line with {} coordinates", coords.len())));
                }
                let parse = |s: &str| -> Result<f64, MeshError> {
                    s.parse().map_err(|_| err(ln, format!("invalid coordinate {s:?}")))
                };
                let x = parse(coords[0])?;
                let y = parse(coords[1])?;
                let z = if coords.len() >= 3 { parse(coords[2])? } else { 0.0 };
                if z.abs() > PLANARITY_TOL {
                    planarity_issues.push(ValidationIssue::NonPlanar {
                        vertex: vertices.len(),
                        z,
                    });
                }
                vertices.push([x, y]);
            }
            Some("f") => {
                let refs: Vec<&str> = it.collect();
                if refs.len() != 3 {
                    return Err(err(ln, format!("only triangular faces are supported, found {}-gon", refs.len())));
                }
                let mut f = [0usize; 3];
                for (slot, r) in f.iter_mut().zip(&refs) {
                    // "i", "i/t", "i//n", "i/t/n" — only the vertex index is used.
                    let first = r.split('/').next().unwrap_or("");
                    let idx: i64 = first
                        .parse()
                        .map_err(|_| err(ln, format!("invalid face reference {r:?}")))?;
                    if idx < 1 {
                        return Err(err(ln, format!("face index {idx} must be positive (1-based)")));
                    }
                    *slot = (idx - 1) as usize;
                }
                faces.push(f);
            }
            // Texture/normal/group/material lines are ignored.
            _ => {}
        }
    }
    Ok(RawMesh {
        vertices,
        faces,
        planarity_issues,
    })
}

/// Write vertex positions and faces as an OFF file (z = 0).
pub fn write_off(path: &Path, vertices: &[[f64; 2]], faces: &[[usize; 3]]) -> Result<(), MeshError> {
    let mut out = String::new();
    out.push_str("OFF\n");
    out.push_str(&format!("{} {} 0\n", vertices.len(), faces.len()));
    for v in vertices {
        out.push_str(&format!("{} {} 0\n", v[0], v[1]));
    }
    for f in faces {
        out.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
    }
    std::fs::write(path, out).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Write vertex positions and faces as an OBJ file (1-based indices, z = 0).
pub fn write_obj(path: &Path, vertices: &[[f64; 2]], faces: &[[usize; 3]]) -> Result<(), MeshError> {
    let mut out = String::new();
    for v in vertices {
        out.push_str(&format!("v {} {} 0\n", v[0], v[1]));
    }
    for f in faces {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    std::fs::write(path, out).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Write complex image positions over an existing connectivity as OFF.
/// No validation is performed: solved image meshes may legitimately contain
/// flipped faces and must still be representable on disk.
pub fn write_off_positions(path: &Path, positions: &[C64], faces: &[[usize; 3]]) -> Result<(), MeshError> {
    let vertices: Vec<[f64; 2]> = positions.iter().map(|z| [z.re, z.im]).collect();
    write_off(path, &vertices, faces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_right_triangle() -> TriMesh {
        TriMesh::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]]).unwrap()
    }

    fn unit_square() -> TriMesh {
        TriMesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn single_triangle_has_unit_double_area() {
        let m = unit_right_triangle();
        assert_eq!(m.face_areas(), &[1.0]);
        assert_eq!(m.boundary_loops(), &[vec![0, 1, 2]]);
    }

    #[test]
    fn clockwise_input_is_reoriented() {
        let m = TriMesh::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 2, 1]]).unwrap();
        assert_eq!(m.faces(), &[[0, 1, 2]]);
        assert_eq!(m.face_areas(), &[1.0]);
    }

    #[test]
    fn mixed_orientation_is_rejected() {
        let r = TriMesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            vec![[0, 1, 2], [0, 3, 2]],
        );
        match r {
            Err(MeshError::Validation { issues }) => {
                assert!(issues
                    .iter()
                    .any(|i| matches!(i, ValidationIssue::MixedOrientation { .. })));
            }
            other => panic!("expected validation failure, got {other:?}"),
        }
    }

    #[test]
    fn dangling_triangle_is_rejected() {
        let r = TriMesh::new(
            vec![
                [0.0, 0.0],
                [1.0, 0.0],
                [0.0, 1.0],
                [5.0, 5.0],
                [6.0, 5.0],
                [5.0, 6.0],
            ],
            vec![[0, 1, 2], [3, 4, 5]],
        );
        match r {
            Err(MeshError::Validation { issues }) => {
                assert!(issues
                    .iter()
                    .any(|i| matches!(i, ValidationIssue::DanglingTriangle { .. })));
                assert!(issues
                    .iter()
                    .any(|i| matches!(i, ValidationIssue::Disconnected { components: 2 })));
            }
            other => panic!("expected validation failure, got {other:?}"),
        }
    }

    #[test]
    fn degenerate_face_is_rejected() {
        let r = TriMesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]],
            vec![[0, 1, 2]],
        );
        assert!(matches!(r, Err(MeshError::Validation { .. })));
    }

    #[test]
    fn unreferenced_vertex_is_rejected() {
        let r = TriMesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [9.0, 9.0]],
            vec![[0, 1, 2]],
        );
        match r {
            Err(MeshError::Validation { issues }) => {
                assert_eq!(issues, vec![ValidationIssue::UnreferencedVertex { vertex: 3 }]);
            }
            other => panic!("expected validation failure, got {other:?}"),
        }
    }

    #[test]
    fn non_manifold_edge_is_rejected() {
        // Two faces on edge (0,1), traversed in opposite directions: valid.
        let r = TriMesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.5, -1.0]],
            vec![[0, 1, 2], [1, 3, 2], [1, 0, 4]],
        );
        assert!(r.is_ok(), "{r:?}");
        // A third (consistently wound) face on the same edge is non-manifold.
        let r = TriMesh::new(
            vec![
                [0.0, 0.0],
                [1.0, 0.0],
                [0.0, 1.0],
                [1.0, 1.0],
                [0.5, -1.0],
                [-1.0, 0.5],
            ],
            vec![[0, 1, 2], [1, 3, 2], [1, 0, 4], [0, 1, 5]],
        );
        match r {
            Err(MeshError::Validation { issues }) => {
                assert!(
                    issues.iter().any(|i| matches!(
                        i,
                        ValidationIssue::NonManifoldEdge { a: 0, b: 1, count: 3 }
                            | ValidationIssue::InconsistentWinding { .. }
                    )),
                    "unexpected issues {issues:?}"
                );
            }
            other => panic!("expected validation failure, got {other:?}"),
        }
    }

    #[test]
    fn square_boundary_is_one_ccw_loop() {
        let m = unit_square();
        assert_eq!(m.boundary_loops(), &[vec![0, 1, 2, 3]]);
        assert!(loop_signed_area(m.vertices(), &m.boundary_loops()[0]) > 0.0);
    }

    #[test]
    fn total_area_matches_boundary_area() {
        // Sum of d_T / 2 must equal the shoelace area of the boundary loops.
        let m = crate::synth::disk_mesh(4);
        let face_total: f64 = m.face_areas().iter().sum::<f64>() / 2.0;
        let loop_total: f64 = m
            .boundary_loops()
            .iter()
            .map(|l| loop_signed_area(m.vertices(), l))
            .sum();
        assert!(
            (face_total - loop_total).abs() <= 1e-12 * face_total.abs(),
            "face total {face_total} vs loop total {loop_total}"
        );
    }

    #[test]
    fn annulus_has_outer_ccw_and_inner_cw_loop() {
        let m = crate::synth::annulus_mesh(2, 5);
        assert_eq!(m.boundary_loops().len(), 2);
        let outer = loop_signed_area(m.vertices(), &m.boundary_loops()[0]);
        let inner = loop_signed_area(m.vertices(), &m.boundary_loops()[1]);
        assert!(outer > 0.0, "outer loop must be counter-clockwise");
        assert!(inner < 0.0, "inner loop must be clockwise");
        // Region area = outer + inner signed areas; must match face total.
        let face_total: f64 = m.face_areas().iter().sum::<f64>() / 2.0;
        assert!((face_total - (outer + inner)).abs() <= 1e-12 * face_total);
    }

    #[test]
    fn locate_is_exact_on_vertices_and_centroids() {
        let m = crate::synth::disk_mesh(3);
        for vi in 0..m.n_vertices() {
            let loc = m.locate(m.vertices()[vi]);
            let corner = m.faces()[loc.face].iter().position(|&v| v == vi);
            assert!(corner.is_some(), "vertex {vi} located on a non-incident face");
            let c = corner.unwrap();
            for k in 0..3 {
                let expected = if k == c { 1.0 } else { 0.0 };
                assert!(
                    (loc.lambda[k] - expected).abs() < 1e-12,
                    "vertex {vi}: lambda {:?}",
                    loc.lambda
                );
            }
        }
        for fi in 0..m.n_faces() {
            let loc = m.locate(m.face_centroid(fi));
            assert!((loc.lambda[0] - 1.0 / 3.0).abs() < 1e-12);
            assert!((loc.lambda[1] - 1.0 / 3.0).abs() < 1e-12);
            assert!((loc.lambda[2] - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn locate_agrees_with_brute_force_outside() {
        use rand::{Rng, SeedableRng};
        let m = crate::synth::disk_mesh(4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..300 {
            let p = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let fast = m.locate(p);
            let brute = m.locate_brute(p);
            let sum = |l: [f64; 3]| l.iter().map(|x| x.abs()).sum::<f64>();
            assert!(
                (sum(fast.lambda) - sum(brute.lambda)).abs() < 1e-9,
                "point {p:?}: grid sum {} vs brute sum {}",
                sum(fast.lambda),
                sum(brute.lambda)
            );
        }
    }

    #[test]
    fn interp_identity_on_source_vertices() {
        let m = crate::synth::disk_mesh(3);
        let r = m.build_interp(m.vertices());
        let vals = m.positions_c();
        let out = r.apply(&vals);
        for (a, b) in out.iter().zip(&vals) {
            assert_eq!(a, b, "interpolation at a source vertex must be exact");
        }
        for row in r.rows() {
            let s: f64 = row.weights.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn interp_row_at_centroid_is_uniform() {
        let m = unit_right_triangle();
        let r = m.build_interp(&[m.face_centroid(0)]);
        let row = r.rows()[0];
        for w in row.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn interp_extrapolates_outside_with_unit_row_sum() {
        let m = unit_right_triangle();
        let r = m.build_interp(&[[2.0, 2.0]]);
        let row = r.rows()[0];
        assert!(row.weights.iter().any(|&w| w < 0.0));
        let s: f64 = row.weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn split_face_thirds_on_unit_triangle() {
        let m = unit_right_triangle();
        let (refined, vn) = m.split_face(0, [1.0 / 3.0; 3]).unwrap();
        assert_eq!(vn, 3);
        assert_eq!(refined.n_faces(), 3);
        let nv = refined.vertices()[vn];
        assert!((nv[0] - 1.0 / 3.0).abs() < 1e-15 && (nv[1] - 1.0 / 3.0).abs() < 1e-15);
        for &d in refined.face_areas() {
            assert!((d - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn split_face_areas_follow_weights() {
        // Child omitting corner i carries weight alpha_i of the parent area;
        // checked against independent shoelace recomputation.
        let m = unit_right_triangle();
        let alpha = [0.5, 0.25, 0.25];
        let (refined, vn) = m.split_face(0, alpha).unwrap();
        let parent = 1.0;
        // Identify each child by which parent corner it omits.
        for (fi, f) in refined.faces().iter().enumerate() {
            let omitted: Vec<usize> = [0usize, 1, 2]
                .iter()
                .copied()
                .filter(|c| !f.contains(c))
                .collect();
            assert_eq!(omitted.len(), 1);
            let shoelace = double_area(
                refined.vertices()[f[0]],
                refined.vertices()[f[1]],
                refined.vertices()[f[2]],
            );
            assert!((refined.face_areas()[fi] - shoelace).abs() < 1e-15);
            assert!(
                (shoelace - alpha[omitted[0]] * parent).abs() < 1e-12,
                "child {fi} omits {} with area {shoelace}",
                omitted[0]
            );
            assert!(f.contains(&vn));
        }
        // Total area preserved.
        let total: f64 = refined.face_areas().iter().sum();
        assert!((total - parent).abs() < 1e-12 * parent);
    }

    #[test]
    fn split_interior_face_keeps_boundary() {
        let m = crate::synth::disk_mesh(3);
        // Find a face with no boundary vertex.
        let on_boundary: std::collections::HashSet<usize> =
            m.boundary_loops().iter().flatten().copied().collect();
        let interior = (0..m.n_faces())
            .find(|&f| m.faces()[f].iter().all(|v| !on_boundary.contains(v)))
            .expect("disk mesh has interior faces");
        let (refined, _) = m.split_face(interior, [0.2, 0.3, 0.5]).unwrap();
        assert_eq!(refined.boundary_loops(), m.boundary_loops());
        assert_eq!(refined.n_faces(), m.n_faces() + 2);
    }

    #[test]
    fn split_face_rejects_bad_weights() {
        let m = unit_right_triangle();
        assert!(matches!(
            m.split_face(0, [0.5, 0.5, 0.0]),
            Err(MeshError::InvalidWeights { .. })
        ));
        assert!(matches!(
            m.split_face(0, [0.5, 0.4, 0.3]),
            Err(MeshError::InvalidWeights { .. })
        ));
        assert!(matches!(
            m.split_face(0, [-0.2, 0.6, 0.6]),
            Err(MeshError::InvalidWeights { .. })
        ));
    }

    #[test]
    fn off_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tri.off");
        std::fs::write(&p, "OFF\n3 1 0\n0 0\n1 0\n0 1\n3 0 1 2\n").unwrap();
        let m = load_mesh(&p, MeshFormat::Off).unwrap();
        assert_eq!(m.n_vertices(), 3);
        assert_eq!(m.face_areas(), &[1.0]);
        let q = dir.path().join("out.off");
        write_off(&q, m.vertices(), m.faces()).unwrap();
        let m2 = load_mesh(&q, MeshFormat::Off).unwrap();
        assert_eq!(m2.vertices(), m.vertices());
        assert_eq!(m2.faces(), m.faces());
    }

    #[test]
    fn off_flipped_face_is_repaired_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tri.off");
        std::fs::write(&p, "OFF\n3 1 0\n0 0\n1 0\n0 1\n3 0 2 1\n").unwrap();
        let m = load_mesh(&p, MeshFormat::Off).unwrap();
        assert_eq!(m.faces(), &[[0, 1, 2]]);
        assert_eq!(m.face_areas(), &[1.0]);
    }

    #[test]
    fn off_3d_coordinates_must_be_planar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tri.off");
        std::fs::write(&p, "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0.5\n3 0 1 2\n").unwrap();
        match load_mesh(&p, MeshFormat::Off) {
            Err(MeshError::Validation { issues }) => {
                assert!(issues
                    .iter()
                    .any(|i| matches!(i, ValidationIssue::NonPlanar { vertex: 2, .. })));
            }
            other => panic!("expected planarity failure, got {other:?}"),
        }
    }

    #[test]
    fn obj_round_trip_with_texture_refs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tri.obj");
        std::fs::write(
            &p,
            "# comment\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nf 1/1 2/1 3/1\n",
        )
        .unwrap();
        let m = load_mesh(&p, MeshFormat::Obj).unwrap();
        assert_eq!(m.n_vertices(), 3);
        assert_eq!(m.faces(), &[[0, 1, 2]]);
        let q = dir.path().join("out.obj");
        write_obj(&q, m.vertices(), m.faces()).unwrap();
        let m2 = load_mesh(&q, MeshFormat::Obj).unwrap();
        assert_eq!(m2.vertices(), m.vertices());
    }

    #[test]
    fn malformed_off_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.off");
        std::fs::write(&p, "OFF\n3 1 0\n0 0\n1 0\n").unwrap();
        assert!(matches!(
            load_mesh(&p, MeshFormat::Off),
            Err(MeshError::Parse { .. })
        ));
        std::fs::write(&p, "OFF\n3 1 0\n0 0\n1 0\n0 1\n4 0 1 2 2\n").unwrap();
        assert!(matches!(
            load_mesh(&p, MeshFormat::Off),
            Err(MeshError::Parse { .. })
        ));
    }

    proptest! {
        #[test]
        fn barycentric_rows_always_sum_to_one(
            x in -3.0f64..3.0,
            y in -3.0f64..3.0,
            seed in 0u64..32,
        ) {
            let m = crate::synth::fan_polygon_seeded(seed, 12);
            for fi in 0..m.n_faces() {
                let l = m.barycentric(fi, [x, y]);
                prop_assert!((l[0] + l[1] + l[2] - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn interp_reproduces_linear_fields(
            x in -0.9f64..0.9,
            y in -0.9f64..0.9,
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
            c in -2.0f64..2.0,
        ) {
            // Barycentric interpolation of a globally affine field is exact
            // anywhere inside the mesh.
            let m = crate::synth::disk_mesh(4);
            let p = [0.7 * x, 0.7 * y];
            let field: Vec<C64> = m
                .vertices()
                .iter()
                .map(|v| C64::new(a * v[0] + b * v[1] + c, 0.0))
                .collect();
            let r = m.build_interp(&[p]);
            let out = r.apply(&field);
            let expected = a * p[0] + b * p[1] + c;
            prop_assert!((out[0].re - expected).abs() < 1e-10);
        }
    }
}
