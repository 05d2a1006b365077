//! Small dense linear-algebra and quadrature helpers shared by the modules.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub(crate) const ZERO: C64 = C64::new(0.0, 0.0);
pub(crate) const ONE: C64 = C64::new(1.0, 0.0);

/// Ascending eigenvalues of a Hermitian matrix.
pub fn hermitian_eigenvalues(m: DMatrix<C64>) -> Result<Vec<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Eigensolver("matrix is not square".into()));
    }
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    let vals = m.symmetric_eigenvalues();
    let mut out: Vec<f64> = vals.iter().copied().collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigensolver("non-finite eigenvalue".into()));
    }
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues ascending with
/// matching eigenvector columns.
pub fn hermitian_eigen(m: DMatrix<C64>) -> Result<(Vec<f64>, DMatrix<C64>)> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::Eigensolver("matrix is not square".into()));
    }
    if n == 0 {
        return Ok((Vec::new(), DMatrix::zeros(0, 0)));
    }
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigensolver("non-finite eigenvalue".into()));
    }
    let mut vecs = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok((vals, vecs))
}

/// Singular values of a dense matrix, descending.
pub fn singular_values(m: DMatrix<C64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Connected components of an undirected graph on `n` vertices.
/// Components are returned with their vertices ascending, ordered by their
/// smallest vertex.
pub fn components(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (a, b) in edges {
        let ra = find(&mut parent, a);
        let rb = find(&mut parent, b);
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            parent[hi] = lo;
        }
    }
    let mut label = vec![usize::MAX; n];
    let mut out: Vec<Vec<usize>> = Vec::new();
    for v in 0..n {
        let r = find(&mut parent, v);
        if label[r] == usize::MAX {
            label[r] = out.len();
            out.push(Vec::new());
        }
        out[label[r]].push(v);
    }
    out
}

/// `exp(scale * H) v0` for a Hermitian operator given by its action, using
/// Lanczos with full reorthogonalization.
///
/// Stops when the a-posteriori estimate `|beta_k [exp(scale T_k) e_1]_k|`
/// drops below `tol` (relative to `|v0|`) or the Krylov space is exhausted.
pub fn lanczos_expv<F>(mut apply: F, v0: &[C64], scale: f64, tol: f64, max_iter: usize) -> Vec<C64>
where
    F: FnMut(&[C64], &mut [C64]),
{
    let n = v0.len();
    let norm0 = norm(v0);
    if norm0 == 0.0 {
        return vec![ZERO; n];
    }
    let mut basis: Vec<Vec<C64>> = vec![v0.iter().map(|x| x / norm0).collect()];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut w = vec![ZERO; n];
    let max_iter = max_iter.min(n).max(1);
    let coeffs = loop {
        let k = basis.len();
        apply(&basis[k - 1], &mut w);
        let a = dot(&basis[k - 1], &w).re;
        alpha.push(a);
        // full reorthogonalization (twice is enough)
        for _ in 0..2 {
            for q in &basis {
                let c = dot(q, &w);
                for (wi, qi) in w.iter_mut().zip(q) {
                    *wi -= c * qi;
                }
            }
        }
        let b = norm(&w);
        let y = tridiag_exp_first_column(&alpha, &beta, scale);
        let estimate = b * y[k - 1].abs();
        if b <= 1e-14 * (alpha.iter().fold(0.0f64, |m, x| m.max(x.abs())) + 1.0)
            || estimate < tol
            || k >= max_iter
        {
            break y;
        }
        beta.push(b);
        basis.push(w.iter().map(|x| x / b).collect());
    };
    let mut out = vec![ZERO; n];
    for (q, c) in basis.iter().zip(&coeffs) {
        for (o, qi) in out.iter_mut().zip(q) {
            *o += qi * (c * norm0);
        }
    }
    out
}

fn tridiag_exp_first_column(alpha: &[f64], beta: &[f64], scale: f64) -> Vec<f64> {
    let k = alpha.len();
    let mut t = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alpha[i];
        if i + 1 < k {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = t.symmetric_eigen();
    (0..k)
        .map(|row| {
            (0..k)
                .map(|j| {
                    eig.eigenvectors[(row, j)]
                        * (scale * eig.eigenvalues[j]).exp()
                        * eig.eigenvectors[(0, j)]
                })
                .sum()
        })
        .collect()
}

pub(crate) fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub(crate) fn norm(a: &[C64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Ordinary least-squares polynomial fit `y ~ sum_k c_k x^k`, `k <= degree`.
/// Returns coefficients and their standard errors.
pub fn poly_fit(x: &[f64], y: &[f64], degree: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x.len();
    let p = degree + 1;
    if n < p || n != y.len() {
        return Err(Error::InsufficientData { need: p, got: n });
    }
    let a = DMatrix::from_fn(n, p, |i, j| x[i].powi(j as i32));
    let b = DVector::from_column_slice(y);
    let svd = a.clone().svd(true, true);
    let coef = svd
        .solve(&b, 1e-14)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let resid = &b - &a * &coef;
    let dof = n.saturating_sub(p);
    let sigma2 = if dof > 0 { resid.norm_squared() / dof as f64 } else { 0.0 };
    let ata = a.transpose() * &a;
    let cov = ata
        .try_inverse()
        .unwrap_or_else(|| DMatrix::from_element(p, p, f64::NAN));
    let stderr = (0..p).map(|j| (sigma2 * cov[(j, j)]).max(0.0).sqrt()).collect();
    Ok((coef.iter().copied().collect(), stderr))
}

/// Deterministic pairwise (tree) summation.
pub fn pairwise_sum(v: &[C64]) -> C64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}
