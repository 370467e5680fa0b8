//! Exact gradient propagation through the mapping pipeline.
//!
//! Every stage of the forward pipeline — coefficient activation, the
//! linear solve, similarity alignment, interpolation — has a hand-derived
//! adjoint here, so objective gradients cost one extra pair of triangular
//! solves rather than one solve per parameter.
//!
//! Gradients of a real loss with respect to a complex quantity `z` are
//! stored as `g = dL/dRe(z) + i dL/dIm(z)`, so that a perturbation `dz`
//! changes the loss by `Re[conj(g) dz]`. This is the convention every
//! `backprop_*` function below both consumes and produces.
//!
//! The solve adjoint: with `A` the free-column coefficient matrix, `b` the
//! pin right-hand side, `H = A* A`, and `x = H^{-1} A* b` the solution, a
//! loss gradient `G` on the solution pulls back through one adjoint solve
//! `H lambda = G` (reusing the retained factorization). Writing
//! `y = A lambda` and `r = b - A x` for the least-squares residual, the
//! sensitivity to the coefficient of face `T` is assembled from the same
//! per-face quantities the forward assembly used, and the sensitivity to a
//! pin target combines its direct appearance in the output with its
//! appearance in `b`.

use crate::lsqc::{LsqcError, LsqcSystem, MapResult, SolveEngine};
use crate::mesh::InterpMatrix;
use crate::sparse;
use crate::C64;

/// Gradient of one loss evaluation with respect to every pipeline input.
/// Produced in stages: [`backprop_solve`] fills the coefficient and pin
/// entries, [`backprop_similarity`] and [`backprop_activation`] supply the
/// rest.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    /// Gradient with respect to each face's Beltrami coefficient.
    pub d_mu_faces: Vec<C64>,
    /// Gradient with respect to the two pin target positions.
    pub d_pin_targets: [C64; 2],
    /// Gradient with respect to the similarity alignment parameters.
    pub d_similarity: SimilarityGrad,
    /// Gradient with respect to the activation temperature.
    pub d_temp: f64,
}

/// Gradient with respect to the parameters of the similarity
/// `g(x) = exp(s_tilde) exp(i phi) x + r`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimilarityGrad {
    /// Rotation angle.
    pub d_phi: f64,
    /// Log scale.
    pub d_s_tilde: f64,
    /// Translation.
    pub d_r: C64,
}

impl GradBundle {
    /// All-zero bundle for `n_faces` faces.
    pub fn zeros(n_faces: usize) -> Self {
        Self {
            d_mu_faces: vec![C64::new(0.0, 0.0); n_faces],
            d_pin_targets: [C64::new(0.0, 0.0); 2],
            d_similarity: SimilarityGrad::default(),
            d_temp: 0.0,
        }
    }
}

/// Pull a loss gradient on the solved positions back to the per-face
/// coefficients and the pin targets.
///
/// `dl_du` is the loss gradient with respect to every vertex position of
/// `map` (pinned vertices included — their entries feed the pin-target
/// gradient). The result must have been produced by `system`; a result
/// from any other assembly is rejected, since the retained factorization
/// and the coefficient rows would silently disagree.
pub fn backprop_solve(
    system: &LsqcSystem,
    map: &MapResult,
    dl_du: &[C64],
) -> Result<GradBundle, LsqcError> {
    if system.token != map.token {
        return Err(LsqcError::MismatchedSystem);
    }
    let n = map.positions().len();
    assert_eq!(dl_du.len(), n, "gradient length must match vertex count");
    let n_free = system.n_free();

    // Split the upstream gradient into free columns and pins.
    let g_free: Vec<C64> = system
        .vertex_of_col
        .iter()
        .map(|&v| dl_du[v])
        .collect();
    let g_pin = [dl_du[system.pins[0].vertex], dl_du[system.pins[1].vertex]];

    // Adjoint solve H lambda = G_f with the same engine as the forward
    // solve, polished by the same fixed residual-refinement schedule.
    let lambda = match &map.engine {
        SolveEngine::Direct(factor) => {
            let mut lam = factor.solve(&g_free);
            for _ in 0..2 {
                let hy = system.normal_apply(&lam);
                let res: Vec<C64> = g_free.iter().zip(&hy).map(|(&g, &h)| g - h).collect();
                let corr = factor.solve(&res);
                for (l, c) in lam.iter_mut().zip(corr) {
                    *l += c;
                }
            }
            lam
        }
        SolveEngine::Iterative => {
            let jacobi: Vec<f64> = {
                let mut d = vec![0.0f64; n_free];
                for (w, c) in system.rows.iter().zip(&system.cols) {
                    for j in 0..3 {
                        if let Some(cj) = c[j] {
                            d[cj] += w[j].norm_sqr();
                        }
                    }
                }
                d.iter().map(|&v| if v > 0.0 { 1.0 / v } else { 1.0 }).collect()
            };
            let (lam, _) = sparse::pcg_hermitian(
                |v| system.normal_apply(v),
                |r| r.iter().zip(&jacobi).map(|(&ri, &di)| ri * di).collect(),
                &g_free,
                1e-13,
                20 * n_free.max(100),
            )?;
            lam
        }
    };

    // Scatter lambda to vertex indexing (zero at pins), and gather the
    // per-face building blocks: y = A lambda and the residual r = b - A x.
    let mut lambda_full = vec![C64::new(0.0, 0.0); n];
    for (col, &v) in system.vertex_of_col.iter().enumerate() {
        lambda_full[v] = lambda[col];
    }
    let u = map.positions();
    let x: Vec<C64> = system
        .vertex_of_col
        .iter()
        .map(|&v| u[v])
        .collect();
    let residual: Vec<C64> = system.row_products(&x).iter().map(|&r| -r).collect();

    let mut y_rows = Vec::with_capacity(system.faces.len());
    for t in 0..system.faces.len() {
        let mut y = C64::new(0.0, 0.0);
        for j in 0..3 {
            if let Some(cj) = system.cols[t][j] {
                y += system.rows[t][j] * lambda[cj];
            }
        }
        y_rows.push(y);
    }

    // Per-face coefficient sensitivity. The mu-derivative of the scaled row
    // coefficient j is C_j = conj(e_j) / sqrt(d_T) (retained by the
    // assembly as `dmu_rows`), and the loss differential under d mu_T is
    //   Re[ dmu ( conj(r_T) sum_j C_j lambda_j - conj(y_T) sum_j C_j u_j ) ]
    // where lambda is zero at pins and u runs over all corners. The stored
    // gradient is the conjugate of the bracket.
    let mut d_mu = Vec::with_capacity(system.faces.len());
    for (t, ce) in system.dmu_rows.iter().enumerate() {
        let mut s_lambda = C64::new(0.0, 0.0);
        let mut s_u = C64::new(0.0, 0.0);
        for j in 0..3 {
            let v = system.faces[t][j];
            s_lambda += ce[j] * lambda_full[v];
            s_u += ce[j] * u[v];
        }
        let k = residual[t].conj() * s_lambda - y_rows[t].conj() * s_u;
        d_mu.push(k.conj());
    }

    // Pin targets: direct appearance in the output plus the right-hand
    // side route through b = -Mp t.
    let mut d_pins = g_pin;
    for (t, c) in system.cols.iter().enumerate() {
        for j in 0..3 {
            if c[j].is_none() {
                let v = system.faces[t][j];
                let k = if v == system.pins[0].vertex { 0 } else { 1 };
                d_pins[k] -= y_rows[t] * system.rows[t][j].conj();
            }
        }
    }

    Ok(GradBundle {
        d_mu_faces: d_mu,
        d_pin_targets: d_pins,
        d_similarity: SimilarityGrad::default(),
        d_temp: 0.0,
    })
}

/// Pull a loss gradient back through the similarity
/// `y_i = exp(s_tilde) exp(i phi) x_i + r`: returns the gradient with
/// respect to the inputs `x` and the three parameters.
pub fn backprop_similarity(
    x: &[C64],
    phi: f64,
    s_tilde: f64,
    r: C64,
    dl_dy: &[C64],
) -> (Vec<C64>, SimilarityGrad) {
    assert_eq!(x.len(), dl_dy.len());
    let _ = r; // the translation does not enter any derivative
    let w = C64::from_polar(s_tilde.exp(), phi);
    let mut grad = SimilarityGrad::default();
    let g_x: Vec<C64> = x
        .iter()
        .zip(dl_dy)
        .map(|(&xi, &gy)| {
            let wx = w * xi;
            grad.d_phi += (gy.conj() * C64::i() * wx).re;
            grad.d_s_tilde += (gy.conj() * wx).re;
            grad.d_r += gy;
            w.conj() * gy
        })
        .collect();
    (g_x, grad)
}

/// Pull a loss gradient back through the elementwise modulus activation
/// `y = tanh(|x| / temp) x / |x|`: returns the gradient with respect to
/// the inputs and the temperature.
///
/// At `x = 0` the activation is not differentiable; the limit along any
/// ray gives the declared subgradient `g_x = g_y / temp` (and a vanishing
/// temperature contribution), which is what the optimizer uses.
pub fn backprop_activation(x: &[C64], temp: f64, dl_dy: &[C64]) -> (Vec<C64>, f64) {
    assert_eq!(x.len(), dl_dy.len());
    let mut d_temp = 0.0;
    let g_x: Vec<C64> = x
        .iter()
        .zip(dl_dy)
        .map(|(&xi, &gy)| {
            let m = xi.norm();
            if m == 0.0 {
                return gy / temp;
            }
            let hat = xi / m;
            let t = (m / temp).tanh();
            let tp = (1.0 - t * t) / temp;
            let radial = (gy.conj() * hat).re;
            d_temp += radial * (1.0 - t * t) * (-m / (temp * temp));
            hat * ((tp - t / m) * radial) + gy * (t / m)
        })
        .collect();
    (g_x, d_temp)
}

/// Pull a loss gradient on interpolated samples back to the per-vertex
/// field: the transpose of the (real-weighted) interpolation operator.
pub fn backprop_interp(interp: &InterpMatrix, dl_dsamples: &[C64]) -> Vec<C64> {
    interp.apply_transpose(dl_dsamples)
}
