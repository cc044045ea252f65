//! Dense linear-algebra helpers shared across the solvers: symmetric
//! vectorization, eigenvalue utilities, controllability, and a fixed-step
//! RK4 integrator for matrix-valued flows.

use nalgebra::{DMatrix, DVector};

/// Average a square matrix with its transpose in place.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    symmetrize(&mut out);
    out
}

/// Largest absolute deviation from symmetry, `max_ij |m_ij - m_ji|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Eigenvalues of a symmetric matrix, ascending. The input is symmetrized
/// first so tiny asymmetries from arithmetic do not feed the decomposition.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let eig = symmetrized(m).symmetric_eigen();
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    vals
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m)[0]
}

/// Spectral norm of a symmetric matrix (largest |eigenvalue|).
pub fn spectral_norm_sym(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m)
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
}

pub fn svec_dim(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Scaled symmetric vectorization: lower triangle column-major with
/// off-diagonal entries multiplied by sqrt(2), so Euclidean inner products
/// of images equal Frobenius inner products of the matrices.
pub fn svec(m: &DMatrix<f64>) -> DVector<f64> {
    let d = m.nrows();
    debug_assert_eq!(d, m.ncols());
    let mut out = DVector::zeros(svec_dim(d));
    let mut idx = 0;
    for j in 0..d {
        for i in j..d {
            out[idx] = if i == j {
                m[(i, j)]
            } else {
                std::f64::consts::SQRT_2 * m[(i, j)]
            };
            idx += 1;
        }
    }
    out
}

/// Inverse of [`svec`].
pub fn smat(v: &[f64], d: usize) -> DMatrix<f64> {
    debug_assert_eq!(v.len(), svec_dim(d));
    let mut m = DMatrix::zeros(d, d);
    let mut idx = 0;
    for j in 0..d {
        for i in j..d {
            if i == j {
                m[(i, j)] = v[idx];
            } else {
                let val = v[idx] / std::f64::consts::SQRT_2;
                m[(i, j)] = val;
                m[(j, i)] = val;
            }
            idx += 1;
        }
    }
    m
}

/// Plain upper-triangle vectorization (row-major, i <= j), no scaling.
/// Used to parameterize symmetric unknowns for root finding.
pub fn upper_vec(m: &DMatrix<f64>) -> DVector<f64> {
    let d = m.nrows();
    let mut out = DVector::zeros(svec_dim(d));
    let mut idx = 0;
    for i in 0..d {
        for j in i..d {
            out[idx] = m[(i, j)];
            idx += 1;
        }
    }
    out
}

/// Inverse of [`upper_vec`], filling both triangles.
pub fn upper_unvec(v: &[f64], d: usize) -> DMatrix<f64> {
    debug_assert_eq!(v.len(), svec_dim(d));
    let mut m = DMatrix::zeros(d, d);
    let mut idx = 0;
    for i in 0..d {
        for j in i..d {
            m[(i, j)] = v[idx];
            m[(j, i)] = v[idx];
            idx += 1;
        }
    }
    m
}

/// Stack `[B, AB, A^2 B, ..., A^(n-1) B]`.
pub fn controllability_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let m = b.ncols();
    let mut out = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for k in 0..n {
        out.view_mut((0, k * m), (n, m)).copy_from(&block);
        block = a * &block;
    }
    out
}

/// Numerical rank with threshold `rel_tol * sigma_max`, plus the ratio
/// `sigma_min / sigma_max` as a conditioning margin (0 for a zero matrix).
pub fn svd_rank(m: &DMatrix<f64>, rel_tol: f64) -> (usize, f64) {
    let svd = m.clone().svd(false, false);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let smax = sv.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return (0, 0.0);
    }
    let rank = sv.iter().filter(|&&s| s > rel_tol * smax).count();
    let smin = sv.last().copied().unwrap_or(0.0);
    (rank, smin / smax)
}

/// One classical RK4 step for a symmetric matrix flow dY/dt = f(t, Y),
/// with the result symmetrized (the flows integrated here preserve
/// symmetry analytically; re-symmetrizing stops drift from arithmetic).
pub fn rk4_sym_step<F>(f: &mut F, t: f64, y: &DMatrix<f64>, dt: f64) -> DMatrix<f64>
where
    F: FnMut(f64, &DMatrix<f64>) -> DMatrix<f64>,
{
    let k1 = f(t, y);
    let k2 = f(t + 0.5 * dt, &(y + 0.5 * dt * &k1));
    let k3 = f(t + 0.5 * dt, &(y + 0.5 * dt * &k2));
    let k4 = f(t + dt, &(y + dt * &k3));
    let mut next = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    symmetrize(&mut next);
    next
}
