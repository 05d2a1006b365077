//! Finite sections of operators on the GNS space `H_0` with orthonormal
//! basis `{U^m V^n}`, truncated to a box window `|m|, |n| <= N`.
//!
//! Operators are stored column-sparse. Spectra are computed block by block
//! over the connected components of the sparsity graph, which is exact (a
//! simultaneous row/column permutation makes the matrix block diagonal).

use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::algebra::{ConformalData, ModuliPoint, NcElement};
use crate::error::{Error, Result};
use crate::linalg::{self, C64, ONE, ZERO};

/// Largest tolerated `|M - M^dagger|` entry for operators flagged selfadjoint.
pub const SELFADJOINT_TOL: f64 = 1e-10;

/// The index box `{(m, n) : |m|, |n| <= N}` enumerated row-major by `m` then `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BasisWindow {
    bandwidth: u32,
}

impl BasisWindow {
    pub fn new(bandwidth: u32) -> Self {
        Self { bandwidth }
    }

    pub fn bandwidth(&self) -> u32 {
        self.bandwidth
    }

    pub fn side(&self) -> usize {
        2 * self.bandwidth as usize + 1
    }

    pub fn dim(&self) -> usize {
        self.side() * self.side()
    }

    pub fn contains(&self, m: i32, n: i32) -> bool {
        let b = self.bandwidth as i32;
        m.abs() <= b && n.abs() <= b
    }

    pub fn pair_to_index(&self, m: i32, n: i32) -> usize {
        let b = self.bandwidth as i32;
        debug_assert!(self.contains(m, n));
        (m + b) as usize * self.side() + (n + b) as usize
    }

    pub fn index_to_pair(&self, i: usize) -> (i32, i32) {
        let b = self.bandwidth as i32;
        let s = self.side();
        ((i / s) as i32 - b, (i % s) as i32 - b)
    }

    /// Index of `(0, 0)`.
    pub fn vacuum(&self) -> usize {
        self.pair_to_index(0, 0)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (i32, i32)> + '_ {
        (0..self.dim()).map(|i| self.index_to_pair(i))
    }
}

/// Column-sparse complex matrix over a [`BasisWindow`].
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteSectionOperator {
    window: BasisWindow,
    /// `columns[j]` holds `(row, value)` pairs sorted by row, no duplicates.
    columns: Vec<Vec<(usize, C64)>>,
    selfadjoint: bool,
}

impl FiniteSectionOperator {
    pub fn zeros(window: BasisWindow) -> Self {
        Self { window, columns: vec![Vec::new(); window.dim()], selfadjoint: false }
    }

    pub fn identity(window: BasisWindow) -> Self {
        Self::diagonal(window, |_, _| ONE)
    }

    pub fn diagonal(window: BasisWindow, f: impl Fn(i32, i32) -> C64) -> Self {
        let columns = (0..window.dim())
            .map(|j| {
                let (m, n) = window.index_to_pair(j);
                let v = f(m, n);
                if v == ZERO {
                    Vec::new()
                } else {
                    vec![(j, v)]
                }
            })
            .collect();
        let mut op = Self { window, columns, selfadjoint: false };
        op.selfadjoint = op.asymmetry() == 0.0;
        op
    }

    /// Builds column `j` from `f(j)`, which may repeat rows (values are summed).
    pub fn from_columns(window: BasisWindow, mut f: impl FnMut(usize) -> Vec<(usize, C64)>) -> Self {
        let columns = (0..window.dim())
            .map(|j| {
                let mut col = f(j);
                col.sort_by_key(|e| e.0);
                let mut merged: Vec<(usize, C64)> = Vec::with_capacity(col.len());
                for (r, v) in col {
                    match merged.last_mut() {
                        Some(last) if last.0 == r => last.1 += v,
                        _ => merged.push((r, v)),
                    }
                }
                merged.retain(|e| e.1 != ZERO);
                merged
            })
            .collect();
        Self { window, columns, selfadjoint: false }
    }

    pub fn from_dense(window: BasisWindow, m: &DMatrix<C64>) -> Self {
        assert_eq!(m.nrows(), window.dim());
        Self::from_columns(window, |j| (0..m.nrows()).filter(|&i| m[(i, j)] != ZERO).map(|i| (i, m[(i, j)])).collect())
    }

    pub fn window(&self) -> BasisWindow {
        self.window
    }

    pub fn dim(&self) -> usize {
        self.window.dim()
    }

    pub fn is_selfadjoint(&self) -> bool {
        self.selfadjoint
    }

    /// Sets the selfadjoint flag after checking `max |M - M^dagger| < 1e-10`.
    pub fn flag_selfadjoint(mut self) -> Result<Self> {
        let a = self.asymmetry();
        if a >= SELFADJOINT_TOL {
            return Err(Error::Asymmetric(a));
        }
        self.selfadjoint = true;
        Ok(self)
    }

    pub fn get(&self, row: usize, col: usize) -> C64 {
        let c = &self.columns[col];
        c.binary_search_by_key(&row, |e| e.0).map(|k| c[k].1).unwrap_or(ZERO)
    }

    pub fn column(&self, col: usize) -> &[(usize, C64)] {
        &self.columns[col]
    }

    pub fn nnz(&self) -> usize {
        self.columns.iter().map(Vec::len).sum()
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for (j, col) in self.columns.iter().enumerate() {
            for &(i, v) in col {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// Dense principal submatrix on the given indices.
    pub fn dense_block(&self, idx: &[usize]) -> DMatrix<C64> {
        let mut pos = vec![usize::MAX; self.dim()];
        for (k, &i) in idx.iter().enumerate() {
            pos[i] = k;
        }
        let mut m = DMatrix::zeros(idx.len(), idx.len());
        for (kc, &j) in idx.iter().enumerate() {
            for &(i, v) in &self.columns[j] {
                if pos[i] != usize::MAX {
                    m[(pos[i], kc)] = v;
                }
            }
        }
        m
    }

    pub fn adjoint(&self) -> Self {
        let mut cols: Vec<Vec<(usize, C64)>> = vec![Vec::new(); self.dim()];
        for (j, col) in self.columns.iter().enumerate() {
            for &(i, v) in col {
                cols[i].push((j, v.conj()));
            }
        }
        Self { window: self.window, columns: cols, selfadjoint: self.selfadjoint }
    }

    /// Largest entry of `M - M^dagger`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (j, col) in self.columns.iter().enumerate() {
            for &(i, v) in col {
                worst = worst.max((v - self.get(j, i).conj()).norm());
            }
        }
        worst
    }

    /// `(M + M^dagger) / 2`, flagged selfadjoint.
    pub fn symmetrized(&self) -> Self {
        let adj = self.adjoint();
        let mut out = self.add(&adj).scale(C64::new(0.5, 0.0));
        out.selfadjoint = true;
        out
    }

    pub fn scale(&self, c: C64) -> Self {
        let columns = self.columns.iter().map(|col| col.iter().map(|&(i, v)| (i, v * c)).collect()).collect();
        Self { window: self.window, columns, selfadjoint: self.selfadjoint && c.im == 0.0 }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.window, other.window);
        Self::from_columns(self.window, |j| {
            let mut c = self.columns[j].clone();
            c.extend_from_slice(&other.columns[j]);
            c
        })
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(C64::new(-1.0, 0.0)))
    }

    /// Sparse product `self * other`.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.window, other.window);
        Self::from_columns(self.window, |j| {
            let mut out = Vec::new();
            for &(k, b) in &other.columns[j] {
                for &(i, a) in &self.columns[k] {
                    out.push((i, a * b));
                }
            }
            out
        })
    }

    pub fn apply(&self, x: &[C64]) -> Vec<C64> {
        let mut y = vec![ZERO; self.dim()];
        for (j, col) in self.columns.iter().enumerate() {
            if x[j] == ZERO {
                continue;
            }
            for &(i, v) in col {
                y[i] += v * x[j];
            }
        }
        y
    }

    /// Largest entry-wise difference on the indices whose window pair lies
    /// within `radius` of the centre.
    pub fn max_diff_interior(&self, other: &Self, radius: u32) -> f64 {
        let w = self.window;
        let inner: Vec<usize> = (0..w.dim())
            .filter(|&i| {
                let (m, n) = w.index_to_pair(i);
                m.unsigned_abs() <= radius && n.unsigned_abs() <= radius
            })
            .collect();
        let mut worst: f64 = 0.0;
        for &j in &inner {
            for &i in &inner {
                worst = worst.max((self.get(i, j) - other.get(i, j)).norm());
            }
        }
        worst
    }

    /// Connected components of the symmetrized sparsity graph.
    pub fn blocks(&self) -> Vec<Vec<usize>> {
        Self::joint_blocks(&[self])
    }

    /// Components of the union of the sparsity graphs of several operators on
    /// the same window.
    pub fn joint_blocks(ops: &[&Self]) -> Vec<Vec<usize>> {
        let n = ops[0].dim();
        let edges = ops
            .iter()
            .flat_map(|op| op.columns.iter().enumerate().flat_map(|(j, col)| col.iter().map(move |&(i, _)| (i, j))));
        linalg::components(n, edges)
    }

    /// The component of the joint sparsity graph containing the vacuum.
    pub fn vacuum_block(ops: &[&Self]) -> Vec<usize> {
        let vac = ops[0].window.vacuum();
        Self::joint_blocks(ops).into_iter().find(|b| b.contains(&vac)).expect("vacuum lies in some block")
    }

    /// Writes `"NCT0"`, u32 dimension, u32 bandwidth, 4 reserved zero bytes,
    /// then the dense matrix row-major as little-endian `(re, im)` f64 pairs.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.dim();
        w.write_all(b"NCT0")?;
        w.write_all(&(n as u32).to_le_bytes())?;
        w.write_all(&self.window.bandwidth.to_le_bytes())?;
        w.write_all(&[0u8; 4])?;
        let mut row = vec![ZERO; n];
        // rows of a column-sparse matrix: transpose once
        let t = self.transpose_rows();
        for r in t.iter() {
            row.iter_mut().for_each(|v| *v = ZERO);
            for &(j, v) in r {
                row[j] = v;
            }
            for v in &row {
                w.write_all(&v.re.to_le_bytes())?;
                w.write_all(&v.im.to_le_bytes())?;
            }
        }
        Ok(())
    }

    fn transpose_rows(&self) -> Vec<Vec<(usize, C64)>> {
        let mut rows: Vec<Vec<(usize, C64)>> = vec![Vec::new(); self.dim()];
        for (j, col) in self.columns.iter().enumerate() {
            for &(i, v) in col {
                rows[i].push((j, v));
            }
        }
        rows
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(|e| Error::Format(e.to_string()))?;
        if &header[..4] != b"NCT0" {
            return Err(Error::Format("bad magic".into()));
        }
        let n = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let bw = u32::from_le_bytes(header[8..12].try_into().unwrap());
        let window = BasisWindow::new(bw);
        if window.dim() != n {
            return Err(Error::Format(format!("dimension {n} does not match bandwidth {bw}")));
        }
        let mut buf = vec![0u8; 16 * n];
        let mut dense = DMatrix::zeros(n, n);
        for i in 0..n {
            r.read_exact(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
            for j in 0..n {
                let re = f64::from_le_bytes(buf[16 * j..16 * j + 8].try_into().unwrap());
                let im = f64::from_le_bytes(buf[16 * j + 8..16 * j + 16].try_into().unwrap());
                dense[(i, j)] = C64::new(re, im);
            }
        }
        Ok(Self::from_dense(window, &dense))
    }
}

/// Ascending eigenvalues with optional residual diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumResult {
    pub eigenvalues: Vec<f64>,
    pub max_residual: Option<f64>,
}

impl SpectrumResult {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(f64::NAN)
    }

    pub fn max(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(f64::NAN)
    }

    /// CSV with header `index,eigenvalue`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,eigenvalue\n");
        for (i, v) in self.eigenvalues.iter().enumerate() {
            s.push_str(&format!("{i},{v:e}\n"));
        }
        s
    }
}

/// Finite section of left multiplication by `a`: the entry at row
/// `(m + p, n + q)`, column `(m, n)` is `a_{p,q} e^{2 pi i theta q m}`;
/// images leaving the window are dropped.
pub fn left_mult_matrix(a: &NcElement, w: &BasisWindow) -> FiniteSectionOperator {
    let theta = a.theta();
    let terms: Vec<((i32, i32), C64)> = a.iter().filter(|(_, c)| *c != ZERO).collect();
    FiniteSectionOperator::from_columns(*w, |j| {
        let (m, n) = w.index_to_pair(j);
        terms
            .iter()
            .filter(|((p, q), _)| w.contains(m + p, n + q))
            .map(|&((p, q), c)| (w.pair_to_index(m + p, n + q), c * theta.twist(q as i64 * m as i64)))
            .collect()
    })
}

/// Finite section of right multiplication by `a`.
pub fn right_mult_matrix(a: &NcElement, w: &BasisWindow) -> FiniteSectionOperator {
    let theta = a.theta();
    let terms: Vec<((i32, i32), C64)> = a.iter().filter(|(_, c)| *c != ZERO).collect();
    FiniteSectionOperator::from_columns(*w, |j| {
        let (m, n) = w.index_to_pair(j);
        terms
            .iter()
            .filter(|((p, q), _)| w.contains(m + p, n + q))
            .map(|&((p, q), c)| (w.pair_to_index(m + p, n + q), c * theta.twist(n as i64 * p as i64)))
            .collect()
    })
}

/// The flat Laplacian `delta_1^2 + 2 Re(tau) delta_1 delta_2 + |tau|^2 delta_2^2`,
/// diagonal with entries `Q(m, n)`.
pub fn flat_laplacian_matrix(tau: ModuliPoint, w: &BasisWindow) -> FiniteSectionOperator {
    let mut op = FiniteSectionOperator::diagonal(*w, |m, n| C64::new(tau.q(m as f64, n as f64), 0.0));
    op.selfadjoint = true;
    op
}

/// `K D K` with `K` the finite section of left multiplication by `k`,
/// symmetrized. Returns the operator and the raw asymmetry.
pub fn perturbed_laplacian_matrix(cd: &ConformalData, w: &BasisWindow) -> Result<(FiniteSectionOperator, f64)> {
    let k = left_mult_matrix(&cd.k, w);
    let d = flat_laplacian_matrix(cd.tau, w);
    let kdk = k.matmul(&d).matmul(&k);
    let asym = kdk.asymmetry();
    let scale = kdk.columns.iter().flatten().fold(1.0f64, |m, e| m.max(e.1.norm()));
    if asym > 1e-8 * scale {
        return Err(Error::Asymmetric(asym));
    }
    Ok((kdk.symmetrized(), asym))
}

/// The pencil `(A^dagger G_1 A, G_phi)` whose generalized eigenvalues
/// approximate the spectrum of the Laplacian on the weighted space.
///
/// `A` is the diagonal matrix of `d = delta_1 + conj(tau) delta_2`,
/// `G_phi[(m,n),(p,q)] = phi((U^p V^q)^* U^m V^n)` and `G_1` the Gram matrix
/// `t(x y^*)` of the basis in the space of (1,0)-forms.
pub fn gram_laplacian_matrix(
    cd: &ConformalData,
    w: &BasisWindow,
) -> Result<(FiniteSectionOperator, FiniteSectionOperator)> {
    let theta = cd.theta();
    let basis: Vec<NcElement> = w.pairs().map(|(m, n)| NcElement::monomial(m, n, ONE, theta)).collect();
    // t(x e^{-h} y^*) pairs only basis elements whose index difference lies in
    // the support of e^{-h}.
    let weight: Vec<((i32, i32), C64)> = cd.k_inv2.iter().filter(|(_, c)| *c != ZERO).collect();
    let gram_phi = FiniteSectionOperator::from_columns(*w, |col| {
        let (p, q) = w.index_to_pair(col);
        let mut out = Vec::new();
        for &((a, b), _) in &weight {
            // rows (m, n) with (m, n) + (a, b) = (p, q)
            let (m, n) = (p - a, q - b);
            if !w.contains(m, n) {
                continue;
            }
            let row = w.pair_to_index(m, n);
            let y = basis[col].adjoint();
            let v = y.mul(&basis[row]).and_then(|yx| cd.phi(&yx)).expect("common theta");
            out.push((row, v));
        }
        out
    });
    let gram_one = FiniteSectionOperator::from_columns(*w, |col| {
        // t(x y^*) vanishes unless x and y are the same monomial
        let y = basis[col].adjoint();
        let v = basis[col].trace_of_product(&y).expect("common theta");
        vec![(col, v)]
    });
    let a = FiniteSectionOperator::diagonal(*w, |m, n| m as f64 + cd.tau.as_complex().conj() * n as f64);
    let op = a.adjoint().matmul(&gram_one).matmul(&a).flag_selfadjoint()?;
    let gram = gram_phi.flag_selfadjoint()?;
    Ok((op, gram))
}

/// Full ascending spectrum of a selfadjoint finite section.
pub fn hermitian_spectrum(m: &FiniteSectionOperator) -> Result<SpectrumResult> {
    if !m.is_selfadjoint() {
        return Err(Error::NotFlaggedSelfadjoint);
    }
    let mut eigenvalues = Vec::with_capacity(m.dim());
    for block in m.blocks() {
        eigenvalues.extend(linalg::hermitian_eigenvalues(m.dense_block(&block))?);
    }
    eigenvalues.sort_by(f64::total_cmp);
    Ok(SpectrumResult { eigenvalues, max_residual: None })
}

/// Generalized eigenvalues of the Hermitian pencil `(A, B)` with `B`
/// positive definite, via Cholesky reduction per joint block.
pub fn generalized_spectrum(a: &FiniteSectionOperator, b: &FiniteSectionOperator) -> Result<SpectrumResult> {
    if !a.is_selfadjoint() || !b.is_selfadjoint() {
        return Err(Error::NotFlaggedSelfadjoint);
    }
    let mut eigenvalues = Vec::with_capacity(a.dim());
    let mut worst_residual: f64 = 0.0;
    for block in FiniteSectionOperator::joint_blocks(&[a, b]) {
        let ab = a.dense_block(&block);
        let bb = b.dense_block(&block);
        let chol = nalgebra::Cholesky::new(bb.clone()).ok_or(Error::GramNotPositive)?;
        let l = chol.l();
        let linv = l.clone().try_inverse().ok_or(Error::GramNotPositive)?;
        let c = &linv * &ab * linv.adjoint();
        let c = (&c + c.adjoint()) * C64::new(0.5, 0.0);
        let (vals, vecs) = linalg::hermitian_eigen(c)?;
        // residual |A x - lambda B x| for x = L^{-dagger} y
        let x = linv.adjoint() * &vecs;
        for (k, &lam) in vals.iter().enumerate() {
            let xk = x.column(k);
            let r = &ab * xk - (&bb * xk) * C64::new(lam, 0.0);
            worst_residual = worst_residual.max(r.norm() / (1.0 + lam.abs()));
        }
        eigenvalues.extend(vals);
    }
    eigenvalues.sort_by(f64::total_cmp);
    Ok(SpectrumResult { eigenvalues, max_residual: Some(worst_residual) })
}

/// The vacuum matrix entry `<M 1, 1>`.
pub fn vacuum_expectation(m: &FiniteSectionOperator) -> C64 {
    let v = m.window().vacuum();
    m.get(v, v)
}

/// `<M^{-1} 1, 1>`, solving on the vacuum component only.
pub fn vacuum_expectation_of_inverse(m: &FiniteSectionOperator) -> Result<C64> {
    let block = FiniteSectionOperator::vacuum_block(&[m]);
    let vac = m.window().vacuum();
    let pos = block.iter().position(|&i| i == vac).expect("vacuum in its block");
    let dense = m.dense_block(&block);
    let mut rhs = nalgebra::DVector::zeros(block.len());
    rhs[pos] = ONE;
    let x = dense.lu().solve(&rhs).ok_or(Error::NearSingular(0.0))?;
    Ok(x[pos])
}

/// `<g(M) 1, 1>` for selfadjoint `M`, by spectral calculus on the vacuum component.
pub fn vacuum_expectation_of_function(m: &FiniteSectionOperator, g: impl Fn(f64) -> f64) -> Result<f64> {
    if !m.is_selfadjoint() {
        return Err(Error::NotFlaggedSelfadjoint);
    }
    let block = FiniteSectionOperator::vacuum_block(&[m]);
    let vac = m.window().vacuum();
    let pos = block.iter().position(|&i| i == vac).expect("vacuum in its block");
    let (vals, vecs) = linalg::hermitian_eigen(m.dense_block(&block))?;
    Ok(vals.iter().enumerate().map(|(k, &mu)| g(mu) * vecs[(pos, k)].norm_sqr()).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{hermitian_pair, DeformationAngle, DEFAULT_PAD};

    fn th() -> DeformationAngle {
        DeformationAngle::golden()
    }

    #[test]
    fn window_enumeration_roundtrips() {
        let w = BasisWindow::new(3);
        assert_eq!(w.dim(), 49);
        assert_eq!(w.index_to_pair(0), (-3, -3));
        assert_eq!(w.index_to_pair(1), (-3, -2));
        for i in 0..w.dim() {
            let (m, n) = w.index_to_pair(i);
            assert_eq!(w.pair_to_index(m, n), i);
        }
        assert_eq!(w.index_to_pair(w.vacuum()), (0, 0));
    }

    #[test]
    fn left_mult_of_unit_is_identity() {
        let w = BasisWindow::new(2);
        let l = left_mult_matrix(&NcElement::one(th()), &w);
        assert_eq!(l.to_dense(), DMatrix::identity(w.dim(), w.dim()));
    }

    #[test]
    fn left_mult_by_u_shifts_and_clips() {
        let w = BasisWindow::new(2);
        let u = NcElement::monomial(1, 0, ONE, th());
        let l = left_mult_matrix(&u, &w);
        for j in 0..w.dim() {
            let (m, n) = w.index_to_pair(j);
            let image = u.mul(&NcElement::monomial(m, n, ONE, th())).unwrap();
            if m == 2 {
                assert!(l.column(j).is_empty());
            } else {
                assert_eq!(l.column(j).len(), 1);
                let (row, v) = l.column(j)[0];
                assert_eq!(w.index_to_pair(row), (m + 1, n));
                assert!((v - image.coeff(m + 1, n)).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn flat_laplacian_entries() {
        let w = BasisWindow::new(3);
        let d = flat_laplacian_matrix(ModuliPoint::i(), &w);
        assert_eq!(vacuum_expectation(&d), ZERO);
        assert_eq!(d.get(w.pair_to_index(2, -1), w.pair_to_index(2, -1)).re, 5.0);
        let d2 = flat_laplacian_matrix(ModuliPoint::new(0.0, 2.0).unwrap(), &w);
        let i = w.pair_to_index(1, 1);
        assert_eq!(d2.get(i, i).re, 5.0);
        assert_eq!(d2.nnz(), w.dim() - 1);
    }

    #[test]
    fn flat_spectrum_matches_enumeration() {
        let w = BasisWindow::new(3);
        let spec = hermitian_spectrum(&flat_laplacian_matrix(ModuliPoint::i(), &w)).unwrap();
        let mut expected: Vec<f64> = w.pairs().map(|(m, n)| (m * m + n * n) as f64).collect();
        expected.sort_by(f64::total_cmp);
        assert_eq!(spec.eigenvalues, expected);
        let tau = ModuliPoint::new(1.0, 1.0).unwrap();
        let spec = hermitian_spectrum(&flat_laplacian_matrix(tau, &w)).unwrap();
        let mut expected: Vec<f64> = w.pairs().map(|(m, n)| (m * m + 2 * m * n + 2 * n * n) as f64).collect();
        expected.sort_by(f64::total_cmp);
        assert_eq!(spec.eigenvalues, expected);
    }

    #[test]
    fn spectrum_requires_flag() {
        let w = BasisWindow::new(1);
        let m = left_mult_matrix(&NcElement::monomial(1, 0, ONE, th()), &w);
        assert!(matches!(hermitian_spectrum(&m), Err(Error::NotFlaggedSelfadjoint)));
    }

    #[test]
    fn perturbed_with_zero_h_is_flat() {
        let w = BasisWindow::new(4);
        let cd = ConformalData::flat(th(), ModuliPoint::i());
        let (kdk, asym) = perturbed_laplacian_matrix(&cd, &w).unwrap();
        assert_eq!(asym, 0.0);
        assert_eq!(kdk.to_dense(), flat_laplacian_matrix(ModuliPoint::i(), &w).to_dense());
    }

    #[test]
    fn scalar_conformal_factor_scales_diagonal() {
        let w = BasisWindow::new(3);
        let h = NcElement::scalar(th(), C64::new(0.6, 0.0));
        let cd = ConformalData::new(ModuliPoint::i(), h, 4).unwrap();
        let (kdk, _) = perturbed_laplacian_matrix(&cd, &w).unwrap();
        let c2 = 0.6f64.exp();
        for (i, (m, n)) in w.pairs().enumerate() {
            assert!((kdk.get(i, i).re - c2 * (m * m + n * n) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn gram_pencil_flat_case() {
        let w = BasisWindow::new(3);
        let tau = ModuliPoint::new(0.5, 1.5).unwrap();
        let cd = ConformalData::flat(th(), tau);
        let (op, gram) = gram_laplacian_matrix(&cd, &w).unwrap();
        let diff = gram.to_dense() - DMatrix::<C64>::identity(w.dim(), w.dim());
        assert!(diff.iter().all(|v| v.norm() < 1e-14));
        for (i, (m, n)) in w.pairs().enumerate() {
            let z = m as f64 + tau.as_complex().conj() * n as f64;
            assert!((op.get(i, i) - C64::new(z.norm_sqr(), 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn pencil_has_one_dimensional_kernel() {
        let cd = ConformalData::new(ModuliPoint::i(), hermitian_pair(th(), 1, 0, 0.4), DEFAULT_PAD).unwrap();
        for n in [3, 6] {
            let (op, gram) = gram_laplacian_matrix(&cd, &BasisWindow::new(n)).unwrap();
            let spec = generalized_spectrum(&op, &gram).unwrap();
            let zeros = spec.eigenvalues.iter().filter(|v| v.abs() < 1e-9).count();
            assert_eq!(zeros, 1);
        }
    }

    #[test]
    fn vacuum_expectation_reads_trace() {
        let a = &hermitian_pair(th(), 1, 1, 0.3) + &NcElement::scalar(th(), C64::new(0.7, 0.1));
        let l = left_mult_matrix(&a, &BasisWindow::new(3));
        assert_eq!(vacuum_expectation(&l), a.trace());
        assert_eq!(vacuum_expectation(&FiniteSectionOperator::identity(BasisWindow::new(2))), ONE);
    }

    #[test]
    fn binary_roundtrip() {
        let a = &hermitian_pair(th(), 1, 1, 0.3) + &NcElement::monomial(0, 1, C64::new(0.1, -0.2), th());
        let l = left_mult_matrix(&a, &BasisWindow::new(2));
        let mut buf = Vec::new();
        l.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"NCT0");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 25);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(buf.len(), 16 + 25 * 25 * 16);
        // row 0, col 1 entry at offset 16 + 16
        let re = f64::from_le_bytes(buf[32..40].try_into().unwrap());
        assert_eq!(re, l.get(0, 1).re);
        let back = FiniteSectionOperator::read_binary(&buf[..]).unwrap();
        assert_eq!(back.to_dense(), l.to_dense());
    }
}
