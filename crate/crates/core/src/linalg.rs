//! Dense linear-algebra kernels sized for the small systems in this crate (n <= 10).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

/// Symmetric part `(M + M^T) / 2`.
pub fn sym<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * lit::<T>(0.5)
}

pub fn frobenius<T: Real>(m: &DMatrix<T>) -> T {
    m.norm()
}

pub fn check_square<T: Real>(m: &DMatrix<T>, what: &str) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m.nrows())
}

pub fn check_shape<T: Real>(m: &DMatrix<T>, rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::ShapeMismatch(format!(
            "{what} expected {rows}x{cols}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// Singular values sorted in decreasing order.
pub fn singular_values<T: Real>(m: &DMatrix<T>) -> Vec<T> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<T> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    s
}

/// Spectral norm (largest singular value).
pub fn spectral_norm<T: Real>(m: &DMatrix<T>) -> T {
    singular_values(m).first().copied().unwrap_or_else(T::zero)
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues<T: Real>(m: &DMatrix<T>) -> Vec<T> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut e: Vec<T> = sym(m).symmetric_eigenvalues().iter().copied().collect();
    e.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    e
}

pub fn min_eigenvalue<T: Real>(m: &DMatrix<T>) -> T {
    sym_eigenvalues(m).first().copied().unwrap_or_else(T::zero)
}

pub fn max_eigenvalue<T: Real>(m: &DMatrix<T>) -> T {
    sym_eigenvalues(m).last().copied().unwrap_or_else(T::zero)
}

/// Largest real part over the spectrum of a general square matrix.
pub fn spectral_abscissa<T: Real>(m: &DMatrix<T>) -> T {
    if m.nrows() == 0 {
        return -T::max_value().unwrap_or_else(T::one);
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(-T::max_value().unwrap_or_else(T::one), |a, b| a.max(b))
}

/// True when every eigenvalue has real part `<= -margin`.
pub fn is_hurwitz<T: Real>(m: &DMatrix<T>, margin: T) -> bool {
    spectral_abscissa(m) <= -margin
}

/// Moore-Penrose pseudoinverse via SVD, with the numerical rank.
///
/// Singular values below `rtol * sigma_max` are treated as zero.
pub fn pinv<T: Real>(m: &DMatrix<T>, rtol: T) -> (DMatrix<T>, usize) {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return (DMatrix::zeros(c, r), 0);
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let smax = svd.singular_values.iter().fold(T::zero(), |a, &b| a.max(b));
    let cut = rtol * smax;
    let mut out = DMatrix::zeros(c, r);
    let mut rank = 0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cut && s > T::zero() {
            rank += 1;
            out += vt.row(k).transpose() * u.column(k).transpose() * (T::one() / s);
        }
    }
    (out, rank)
}

/// Orthonormal basis (columns) of the null space of `m`.
pub fn null_space<T: Real>(m: &DMatrix<T>, rtol: T) -> DMatrix<T> {
    let (r, c) = m.shape();
    if c == 0 {
        return DMatrix::zeros(0, 0);
    }
    // Pad to square so the SVD returns a full right basis.
    let rows = r.max(c);
    let mut padded = DMatrix::zeros(rows, c);
    padded.rows_mut(0, r).copy_from(m);
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("v_t requested");
    let smax = svd.singular_values.iter().fold(T::zero(), |a, &b| a.max(b));
    let cut = rtol * smax.max(T::one());
    let cols: Vec<DVector<T>> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s <= cut)
        .map(|(k, _)| vt.row(k).transpose())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(c, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Orthonormal basis of the controllable subspace of `(a, b)`.
pub fn controllable_basis<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>, rtol: T) -> DMatrix<T> {
    let n = a.nrows();
    let m = b.ncols();
    let mut krylov = DMatrix::zeros(n, n * m);
    let mut blk = b.clone();
    for k in 0..n {
        krylov.columns_mut(k * m, m).copy_from(&blk);
        blk = a * &blk;
    }
    let svd = krylov.svd(true, false);
    let u = svd.u.expect("u requested");
    let smax = svd.singular_values.iter().fold(T::zero(), |a, &b| a.max(b));
    let cols: Vec<DVector<T>> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > rtol * smax)
        .map(|(k, _)| u.column(k).into_owned())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Solves the continuous Lyapunov equation `A^T X + X A + Q = 0`.
///
/// Uses the Kronecker-vectorized form, which is exact up to LU roundoff for small n.
pub fn lyap<T: Real>(a: &DMatrix<T>, q: &DMatrix<T>) -> Result<DMatrix<T>> {
    let n = check_square(a, "A")?;
    check_shape(q, n, n, "Q")?;
    let eye = DMatrix::<T>::identity(n, n);
    let at = a.transpose();
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = DVector::from_iterator(n * n, q.iter().map(|&v| -v));
    let sol = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("Lyapunov operator (A and -A share eigenvalues)".into()))?;
    let x = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok(sym(&x))
}

/// Solves the Sylvester equation `A X + X B + C = 0` (Kronecker-vectorized).
pub fn sylvester<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>, c: &DMatrix<T>) -> Result<DMatrix<T>> {
    let n = check_square(a, "A")?;
    let m = check_square(b, "B")?;
    check_shape(c, n, m, "C")?;
    let op = DMatrix::<T>::identity(m, m).kronecker(a) + b.transpose().kronecker(&DMatrix::<T>::identity(n, n));
    let rhs = DVector::from_iterator(n * m, c.iter().map(|&v| -v));
    let sol = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("Sylvester operator (A and -B share eigenvalues)".into()))?;
    Ok(DMatrix::from_column_slice(n, m, sol.as_slice()))
}

/// Matrix exponential (Pade scaling and squaring).
pub fn expm<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    if m.nrows() == 0 {
        return m.clone();
    }
    m.exp()
}

/// Zero-order-hold discretization: returns `(e^{A dt}, int_0^dt e^{A s} ds B)`.
pub fn discretize<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>, dt: T) -> (DMatrix<T>, DMatrix<T>) {
    let n = a.nrows();
    let m = b.ncols();
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * dt));
    aug.view_mut((0, n), (n, m)).copy_from(&(b * dt));
    let e = expm(&aug);
    (
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, m)).into_owned(),
    )
}

/// Block-diagonal concatenation.
pub fn block_diag<T: Real>(blocks: &[&DMatrix<T>]) -> DMatrix<T> {
    let r: usize = blocks.iter().map(|b| b.nrows()).sum();
    let c: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(r, c);
    let (mut i, mut j) = (0, 0);
    for b in blocks {
        out.view_mut((i, j), b.shape()).copy_from(*b);
        i += b.nrows();
        j += b.ncols();
    }
    out
}

/// Horizontal concatenation of blocks with equal row counts.
pub fn hstack<T: Real>(blocks: &[&DMatrix<T>]) -> DMatrix<T> {
    let r = blocks.first().map(|b| b.nrows()).unwrap_or(0);
    let c: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(r, c);
    let mut j = 0;
    for b in blocks {
        out.columns_mut(j, b.ncols()).copy_from(*b);
        j += b.ncols();
    }
    out
}

/// Vertical concatenation of blocks with equal column counts.
pub fn vstack<T: Real>(blocks: &[&DMatrix<T>]) -> DMatrix<T> {
    let c = blocks.first().map(|b| b.ncols()).unwrap_or(0);
    let r: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(r, c);
    let mut i = 0;
    for b in blocks {
        out.rows_mut(i, b.nrows()).copy_from(*b);
        i += b.nrows();
    }
    out
}

/// Projects a symmetric matrix onto `{X : lo I <= X <= hi I}` in Frobenius norm.
pub fn clamp_eigenvalues<T: Real>(m: &DMatrix<T>, lo: T, hi: T) -> DMatrix<T> {
    let eig = sym(m).symmetric_eigen();
    let d = eig.eigenvalues.map(|v| v.max(lo).min(hi));
    let v = &eig.eigenvectors;
    sym(&(v * DMatrix::from_diagonal(&d) * v.transpose()))
}

/// Projects onto the spectral-norm ball of radius `rho`.
pub fn clamp_singular_values<T: Real>(m: &DMatrix<T>, rho: T) -> DMatrix<T> {
    if m.nrows() == 1 || m.ncols() == 1 {
        let nrm = m.norm();
        return if nrm > rho { m * (rho / nrm) } else { m.clone() };
    }
    let mut svd = m.clone().svd(true, true);
    if svd.singular_values.iter().all(|&s| s <= rho) {
        return m.clone();
    }
    svd.singular_values.apply(|s| *s = s.min(rho));
    svd.recompose().expect("u and v_t requested")
}

/// Solves the continuous algebraic Riccati equation
/// `A^T P + P A + Q - P B R^{-1} B^T P = 0` for the stabilizing solution.
///
/// The matrix sign function of the Hamiltonian gives the stable invariant subspace;
/// a few Newton-Kleinman steps then polish the result to working precision.
pub fn care<T: Real>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    q: &DMatrix<T>,
    r: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    let n = check_square(a, "A")?;
    check_shape(q, n, n, "Q")?;
    if b.nrows() != n {
        return Err(Error::ShapeMismatch(format!("B must have {n} rows, has {}", b.nrows())));
    }
    let m = b.ncols();
    check_shape(r, m, m, "R")?;
    let r_inv = r
        .clone()
        .cholesky()
        .ok_or_else(|| Error::IndefiniteWeight("R is not positive definite".into()))?
        .inverse();
    let g = sym(&(b * &r_inv * b.transpose()));
    let q = sym(q);

    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-&g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-&q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    let eps = T::default_epsilon();
    let conv = eps * lit(100.0);
    let half = lit::<T>(0.5);
    let two_n = lit::<T>((2 * n) as f64);
    let mut z = h;
    let mut converged = false;
    for _ in 0..100 {
        let lu = z.clone().lu();
        let det = lu.determinant().abs();
        let z_inv = lu.try_inverse().ok_or(Error::NonStabilizable)?;
        if !(det > T::zero()) || !det.is_finite() {
            return Err(Error::NonStabilizable);
        }
        let c = det.powf(T::one() / two_n);
        let next = (&z / c + z_inv * c) * half;
        let diff = (&next - &z).norm();
        let scale = next.norm();
        z = next;
        if !scale.is_finite() {
            return Err(Error::NonStabilizable);
        }
        if diff <= conv * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonStabilizable);
    }
    let eye = DMatrix::<T>::identity(n, n);
    let lhs = vstack(&[
        &z.view((0, n), (n, n)).into_owned(),
        &(z.view((n, n), (n, n)).into_owned() + &eye),
    ]);
    let rhs = -vstack(&[
        &(z.view((0, 0), (n, n)).into_owned() + &eye),
        &z.view((n, 0), (n, n)).into_owned(),
    ]);
    let p = lhs
        .svd(true, true)
        .solve(&rhs, eps)
        .map_err(|_| Error::NonStabilizable)?;
    let mut p = sym(&p);
    let residual = |p: &DMatrix<T>| -> T {
        (a.transpose() * p + p * a + &q - p * &g * p).norm()
    };

    let mut res = residual(&p);
    for _ in 0..6 {
        let k = &r_inv * b.transpose() * &p;
        let ac = a - b * &k;
        let rhs = &q + k.transpose() * r * &k;
        let Ok(next) = lyap(&ac, &rhs) else { break };
        let next_res = residual(&next);
        if next_res.is_finite() && next_res < res {
            p = next;
            res = next_res;
        } else {
            break;
        }
    }
    if !res.is_finite() {
        return Err(Error::NonStabilizable);
    }
    let k = &r_inv * b.transpose() * &p;
    if !is_hurwitz(&(a - b * k), T::zero()) {
        return Err(Error::NonStabilizable);
    }
    Ok(p)
}
