//! Least-squares quasiconformal (LSQC) free-boundary mapping toolkit.
//!
//! This crate computes planar free-boundary mappings of triangle meshes with
//! prescribed Beltrami coefficients, differentiates exactly through the solve,
//! and optimizes Beltrami coefficients plus a global similarity against
//! application energies (density equalization, partial-overlap registration).
//!
//! The pipeline, end to end:
//!
//! 1. [`mesh`] — planar triangle meshes: validation, OFF/OBJ I/O, boundary
//!    loops, barycentric point location, sparse interpolation, face splits.
//! 2. [`beltrami`] — Beltrami coefficients of piecewise-linear maps, the
//!    modulus-squashing activation, per-face gradients.
//! 3. [`lsqc`] — assembly of the per-face Beltrami-equation rows, the pinned
//!    least-squares solve, energy evaluation, pin selection, similarity
//!    post-composition.
//! 4. [`adjoint`] — exact gradients of any scalar loss of the solved map with
//!    respect to Beltrami coefficients, pin targets, similarity parameters,
//!    and the activation temperature, via one adjoint solve that reuses the
//!    forward factorization.
//! 5. [`energies`] — density-equalization and registration energies with
//!    analytic gradients.
//! 6. [`optimize`] — the adaptive first-order loop tying everything together.
//! 7. [`spectral`] — cotangent Laplacian / lumped mass diagnostics.
//! 8. [`props`] — randomized property suites (exactness, reconstruction,
//!    similarity invariance, resolution independence, gradient checks).
//!
//! Supporting modules: [`sparse`] (profile Cholesky, reverse Cuthill–McKee,
//! conjugate gradients) and [`synth`] (synthetic meshes, coefficient fields,
//! and homeomorphisms used by the property suites).

pub mod adjoint;
pub mod beltrami;
pub mod energies;
pub mod lsqc;
pub mod mesh;
pub mod optimize;
pub mod props;
pub mod sparse;
pub mod spectral;
pub mod synth;

mod kahan;

pub use kahan::Kahan;

/// Complex scalar used throughout: positions, Beltrami coefficients,
/// matrix entries, and gradients are all `Complex64`.
pub type C64 = num_complex::Complex64;
