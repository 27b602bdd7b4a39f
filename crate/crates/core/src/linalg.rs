//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Symmetric eigendecomposition with eigenvalues sorted ascending and the
/// eigenvector columns permuted to match.
pub fn sym_eigen_sorted(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let n = m.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, idx.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in idx.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

const TAYLOR_ORDER: usize = 18;

/// Matrix exponential by scaling and squaring with a fixed-order Taylor series.
///
/// The argument is scaled by `2^-s` until its 1-norm is at most 1/8, where an
/// order-18 series is accurate to well below f64 rounding, then squared back.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = one_norm(m);
    let mut s = 0i32;
    if norm > 0.125 {
        s = (norm / 0.125).log2().ceil() as i32;
    }
    let scaled = m / 2f64.powi(s);
    let mut result = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=TAYLOR_ORDER {
        term = &term * &scaled / k as f64;
        result += &term;
    }
    for _ in 0..s {
        result = &result * &result;
    }
    result
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Directional derivative of `exp` at `s` in direction `e`, read off the
/// upper-right block of `exp([[s, e], [0, s]])`.
pub fn expm_frechet(s: &DMatrix<f64>, e: &DMatrix<f64>) -> DMatrix<f64> {
    let n = s.nrows();
    let mut big = DMatrix::zeros(2 * n, 2 * n);
    big.view_mut((0, 0), (n, n)).copy_from(s);
    big.view_mut((n, n), (n, n)).copy_from(s);
    big.view_mut((0, n), (n, n)).copy_from(e);
    let ex = expm(&big);
    ex.view((0, n), (n, n)).into_owned()
}

/// Number of strict upper-triangle coordinates of a `p x p` matrix.
pub fn skew_dim(p: usize) -> usize {
    p * (p.saturating_sub(1)) / 2
}

/// Skew-symmetric basis matrix for coordinate `k` (row-major over `i < j`).
///
/// Oriented so that `exp(θ E_k)` is the plane rotation with `-sin θ` at
/// `(i, j)` and `+sin θ` at `(j, i)`, the same orientation as the Givens
/// factors used for scenario matrices.
pub fn skew_basis(p: usize, k: usize) -> DMatrix<f64> {
    let (i, j) = skew_pair(p, k);
    let mut e = DMatrix::zeros(p, p);
    e[(i, j)] = -1.0;
    e[(j, i)] = 1.0;
    e
}

/// `(i, j)` with `i < j` for skew coordinate `k`.
pub fn skew_pair(p: usize, k: usize) -> (usize, usize) {
    let mut idx = 0;
    for i in 0..p {
        for j in (i + 1)..p {
            if idx == k {
                return (i, j);
            }
            idx += 1;
        }
    }
    panic!("skew coordinate {k} out of range for p = {p}");
}

pub fn sym_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn skew_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m - m.transpose()) * 0.5
}

/// Orthonormalize the columns of `m` by modified Gram-Schmidt. Columns that
/// collapse below `tol` are replaced by standard basis vectors until the
/// result has `m.ncols()` orthonormal columns.
pub fn orthonormalize(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let p = m.nrows();
    let k = m.ncols();
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(k);
    let mut candidates: Vec<DVector<f64>> = m.column_iter().map(|c| c.into_owned()).collect();
    for i in 0..p {
        let mut e = DVector::zeros(p);
        e[i] = 1.0;
        candidates.push(e);
    }
    for mut v in candidates {
        if out.len() == k {
            break;
        }
        for _ in 0..2 {
            for q in &out {
                let d = q.dot(&v);
                v -= q * d;
            }
        }
        let n = v.norm();
        if n > tol {
            out.push(v / n);
        }
    }
    DMatrix::from_columns(&out)
}

/// `max |MᵀM - I|`.
pub fn orthogonality_error(m: &DMatrix<f64>) -> f64 {
    let g = m.transpose() * m;
    let n = g.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}
