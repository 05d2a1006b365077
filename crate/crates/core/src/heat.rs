//! Heat coefficients of `k Delta k` from the resolvent parametrix
//! `b_0 + b_1 + b_2`, and direct fits of heat traces of finite sections.
//!
//! The parametrix terms are kept as explicit sums of words in the resolvent
//! `B0 = (Q(xi) k^2 - lambda)^{-1}` and a fixed table of algebra elements
//! (derivatives of `k^2` and of the coefficients of `a_1`, `a_0`), each word
//! carrying a real coefficient and a `xi`-monomial.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::algebra::{ConformalData, DeformationAngle, ModuliPoint, NcElement};
use crate::error::{Error, Result};
use crate::gns::{left_mult_matrix, BasisWindow, FiniteSectionOperator, SpectrumResult};
use crate::linalg::{self, C64, ZERO};
use crate::psido::{classicalize_resolvent, GradedSymbol, PolySymbol};

const PRUNE: f64 = 1e-20;
/// Smallest tolerated distance between `lambda` and the spectrum of `Q(xi) K2`.
pub const NEAR_SINGULAR_TOL: f64 = 1e-10;

/// The symbol `a_2 + a_1 + a_0` of `k Delta k`.
#[derive(Debug, Clone)]
pub struct LaplaceSymbolData {
    pub tau: ModuliPoint,
    /// `(1, 2 Re tau, |tau|^2)`.
    pub a2_q: [f64; 3],
    pub k2: NcElement,
    /// Coefficients of `xi_1` and `xi_2` in `a_1`.
    pub a1_coeffs: [NcElement; 2],
    pub a0: NcElement,
}

pub fn laplace_symbol(cd: &ConformalData) -> Result<LaplaceSymbolData> {
    let k = &cd.k;
    let [_, re2, abs2] = cd.tau.quadratic_form();
    let kd1 = k.mul(&k.delta(1)?)?;
    let kd2 = k.mul(&k.delta(2)?)?;
    let a1x = &kd1.scale_re(2.0) + &kd2.scale_re(re2);
    let a1y = &kd2.scale_re(2.0 * abs2) + &kd1.scale_re(re2);
    let a0 = &(&k.mul(&k.delta_pow(2, 0))? + &k.mul(&k.delta_pow(0, 2))?.scale_re(abs2))
        + &k.mul(&k.delta_pow(1, 1))?.scale_re(re2);
    let clean = |a: NcElement| a.prune(PRUNE).tighten();
    Ok(LaplaceSymbolData {
        tau: cd.tau,
        a2_q: cd.tau.quadratic_form(),
        k2: cd.k2(),
        a1_coeffs: [clean(a1x), clean(a1y)],
        a0: clean(a0),
    })
}

impl LaplaceSymbolData {
    pub fn theta(&self) -> DeformationAngle {
        self.k2.theta()
    }

    /// The algebra element behind an [`Atom`].
    pub fn atom(&self, a: Atom) -> NcElement {
        let base = match a.base {
            AtomBase::K2 => &self.k2,
            AtomBase::A1Xi1 => &self.a1_coeffs[0],
            AtomBase::A1Xi2 => &self.a1_coeffs[1],
            AtomBase::A0 => &self.a0,
        };
        base.delta_pow(a.d1 as u32, a.d2 as u32).prune(PRUNE).tighten()
    }

    fn atom_vanishes(&self, a: Atom) -> bool {
        self.atom(a).max_abs() == 0.0
    }

    /// Full symbol as a polynomial symbol in `xi`.
    pub fn to_poly(&self) -> PolySymbol {
        let [q0, q1, q2] = self.a2_q;
        PolySymbol::new(self.theta())
            .with_term(2, 0, self.k2.scale_re(q0))
            .with_term(1, 1, self.k2.scale_re(q1))
            .with_term(0, 2, self.k2.scale_re(q2))
            .with_term(1, 0, self.a1_coeffs[0].clone())
            .with_term(0, 1, self.a1_coeffs[1].clone())
            .with_term(0, 0, self.a0.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum AtomBase {
    K2,
    A1Xi1,
    A1Xi2,
    A0,
}

/// `delta_1^{d1} delta_2^{d2}` of a base element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Atom {
    pub base: AtomBase,
    pub d1: u8,
    pub d2: u8,
}

impl Atom {
    pub fn new(base: AtomBase, d1: u8, d2: u8) -> Self {
        Self { base, d1, d2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Factor {
    /// `(Q(xi) k^2 - lambda)^{-1}`.
    Resolvent,
    /// `Q(xi) k^2 - lambda`.
    Pencil,
    Atom(Atom),
}

type Word = Vec<Factor>;

/// Sum of `coeff * xi_1^{p1} xi_2^{p2} * f_1 f_2 ... f_r`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolventExpr {
    q: [f64; 3],
    terms: BTreeMap<(Word, (u32, u32)), f64>,
}

/// Homogeneity order of a word with its monomial, `lambda` counting as order 2.
pub fn term_order(factors: &[Factor], xi: (u32, u32)) -> i32 {
    let mut d = (xi.0 + xi.1) as i32;
    for f in factors {
        match f {
            Factor::Resolvent => d -= 2,
            Factor::Pencil => d += 2,
            Factor::Atom(_) => {}
        }
    }
    d
}

impl ResolventExpr {
    pub fn zero(q: [f64; 3]) -> Self {
        Self { q, terms: BTreeMap::new() }
    }

    fn word(q: [f64; 3], factors: Word, xi: (u32, u32), c: f64) -> Self {
        let mut out = Self::zero(q);
        out.push(factors, xi, c);
        out
    }

    pub fn resolvent(q: [f64; 3]) -> Self {
        Self::word(q, vec![Factor::Resolvent], (0, 0), 1.0)
    }

    pub fn pencil(q: [f64; 3]) -> Self {
        Self::word(q, vec![Factor::Pencil], (0, 0), 1.0)
    }

    pub fn atom(q: [f64; 3], a: Atom) -> Self {
        Self::word(q, vec![Factor::Atom(a)], (0, 0), 1.0)
    }

    pub fn monomial(q: [f64; 3], p1: u32, p2: u32, c: f64) -> Self {
        Self::word(q, Vec::new(), (p1, p2), c)
    }

    fn push(&mut self, factors: Word, xi: (u32, u32), c: f64) {
        if c == 0.0 {
            return;
        }
        let key = (factors, xi);
        let v = self.terms.entry(key.clone()).or_insert(0.0);
        *v += c;
        if *v == 0.0 {
            self.terms.remove(&key);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn term_count(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&[Factor], (u32, u32), f64)> {
        self.terms.iter().map(|((f, xi), &c)| (f.as_slice(), *xi, c))
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (f, xi, c) in other.terms() {
            out.push(f.to_vec(), xi, c);
        }
        out
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut out = Self::zero(self.q);
        for (f, xi, v) in self.terms() {
            out.push(f.to_vec(), xi, v * c);
        }
        out
    }

    /// Product; monomials commute with everything.
    pub fn mul(&self, other: &Self) -> Self {
        let mut out = Self::zero(self.q);
        for (f1, x1, c1) in self.terms() {
            for (f2, x2, c2) in other.terms() {
                let mut f = f1.to_vec();
                f.extend_from_slice(f2);
                out.push(f, (x1.0 + x2.0, x1.1 + x2.1), c1 * c2);
            }
        }
        out
    }

    /// `d/d xi_axis`, with `d B0 = -B0 (dQ) K2 B0` and `d Pencil = (dQ) K2`.
    pub fn xi_derivative(&self, axis: u8) -> Result<Self> {
        let [q0, q1, q2] = self.q;
        // dQ as (p1, p2, coefficient) monomials
        let dq: [((u32, u32), f64); 2] = match axis {
            1 => [((1, 0), 2.0 * q0), ((0, 1), q1)],
            2 => [((1, 0), q1), ((0, 1), 2.0 * q2)],
            _ => return Err(Error::InvalidAxis(axis)),
        };
        let k2 = Factor::Atom(Atom::new(AtomBase::K2, 0, 0));
        let mut out = Self::zero(self.q);
        for (f, (p1, p2), c) in self.terms() {
            let p = if axis == 1 { p1 } else { p2 };
            if p > 0 {
                let xi = if axis == 1 { (p1 - 1, p2) } else { (p1, p2 - 1) };
                out.push(f.to_vec(), xi, c * p as f64);
            }
            for (pos, fac) in f.iter().enumerate() {
                let (replacement, sign): (Vec<Factor>, f64) = match fac {
                    Factor::Resolvent => (vec![Factor::Resolvent, k2, Factor::Resolvent], -1.0),
                    Factor::Pencil => (vec![k2], 1.0),
                    Factor::Atom(_) => continue,
                };
                for &((e1, e2), dc) in &dq {
                    let mut word = f[..pos].to_vec();
                    word.extend_from_slice(&replacement);
                    word.extend_from_slice(&f[pos + 1..]);
                    out.push(word, (p1 + e1, p2 + e2), sign * c * dc);
                }
            }
        }
        Ok(out)
    }

    pub fn xi_derivative_pow(&self, l1: u32, l2: u32) -> Result<Self> {
        let mut out = self.clone();
        for _ in 0..l1 {
            out = out.xi_derivative(1)?;
        }
        for _ in 0..l2 {
            out = out.xi_derivative(2)?;
        }
        Ok(out)
    }

    /// Highest homogeneity order present.
    pub fn order(&self) -> Option<i32> {
        self.terms().map(|(f, xi, _)| term_order(f, xi)).max()
    }

    /// Splits into homogeneous parts.
    pub fn by_order(&self) -> BTreeMap<i32, Self> {
        let mut out: BTreeMap<i32, Self> = BTreeMap::new();
        for (f, xi, c) in self.terms() {
            out.entry(term_order(f, xi)).or_insert_with(|| Self::zero(self.q)).push(f.to_vec(), xi, c);
        }
        out
    }

    pub fn atoms(&self) -> BTreeSet<Atom> {
        self.terms()
            .flat_map(|(f, _, _)| f.iter().filter_map(|x| if let Factor::Atom(a) = x { Some(*a) } else { None }))
            .collect()
    }

    /// Drops every word containing an atom for which `vanishes` holds.
    pub fn without_atoms(&self, vanishes: impl Fn(Atom) -> bool) -> Self {
        let mut out = Self::zero(self.q);
        for (f, xi, c) in self.terms() {
            if f.iter().all(|x| !matches!(x, Factor::Atom(a) if vanishes(*a))) {
                out.push(f.to_vec(), xi, c);
            }
        }
        out
    }

    /// Largest number of resolvent factors in a word.
    pub fn max_resolvents(&self) -> usize {
        self.terms().map(|(f, _, _)| f.iter().filter(|x| **x == Factor::Resolvent).count()).max().unwrap_or(0)
    }
}

/// `delta^{l}(a_k)` as an expression; `shifted` replaces `a_2` by `a_2 - lambda`
/// when no derivative is taken.
fn symbol_part(q: [f64; 3], k: usize, l1: u32, l2: u32, shifted: bool) -> ResolventExpr {
    let (d1, d2) = (l1 as u8, l2 as u8);
    match k {
        2 if shifted && l1 + l2 == 0 => ResolventExpr::pencil(q),
        2 => {
            let k2 = ResolventExpr::atom(q, Atom::new(AtomBase::K2, d1, d2));
            ResolventExpr::monomial(q, 2, 0, q[0])
                .add(&ResolventExpr::monomial(q, 1, 1, q[1]))
                .add(&ResolventExpr::monomial(q, 0, 2, q[2]))
                .mul(&k2)
        }
        1 => ResolventExpr::monomial(q, 1, 0, 1.0)
            .mul(&ResolventExpr::atom(q, Atom::new(AtomBase::A1Xi1, d1, d2)))
            .add(&ResolventExpr::monomial(q, 0, 1, 1.0).mul(&ResolventExpr::atom(q, Atom::new(AtomBase::A1Xi2, d1, d2)))),
        _ => ResolventExpr::atom(q, Atom::new(AtomBase::A0, d1, d2)),
    }
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

/// `b_0, ..., b_{n_max}` from `b_0 = B0` and
/// `b_n = -sum (l!)^{-1} d^l(b_j) delta^l(a_k) b_0` over `2 + j + |l| - k = n`,
/// `j < n`, `k <= 2`. Words through vanishing atoms are dropped.
pub fn parametrix_terms(ls: &LaplaceSymbolData, n_max: usize) -> Result<Vec<ResolventExpr>> {
    if n_max > 2 {
        return Err(Error::UnsupportedOrder(n_max));
    }
    let q = ls.a2_q;
    let vanishing = atom_vanishing_table(ls);
    let r = ResolventExpr::resolvent(q);
    let mut b = vec![r.clone()];
    for n in 1..=n_max {
        let mut acc = ResolventExpr::zero(q);
        for (j, bj) in b.iter().enumerate() {
            for k in 0..=2usize {
                let l = n as i32 + k as i32 - 2 - j as i32;
                if l < 0 {
                    continue;
                }
                for l1 in 0..=l as u32 {
                    let l2 = l as u32 - l1;
                    let part = symbol_part(q, k, l1, l2, false).without_atoms(|a| vanishing(a));
                    if part.is_zero() {
                        continue;
                    }
                    let w = 1.0 / (factorial(l1) * factorial(l2));
                    acc = acc.add(&bj.xi_derivative_pow(l1, l2)?.mul(&part).mul(&r).scale(w));
                }
            }
        }
        b.push(acc.scale(-1.0));
    }
    Ok(b)
}

fn atom_vanishing_table(ls: &LaplaceSymbolData) -> impl Fn(Atom) -> bool {
    let mut table = BTreeMap::new();
    for base in [AtomBase::K2, AtomBase::A1Xi1, AtomBase::A1Xi2, AtomBase::A0] {
        for d1 in 0..=4u8 {
            for d2 in 0..=4u8 {
                let a = Atom::new(base, d1, d2);
                table.insert(a, ls.atom_vanishes(a));
            }
        }
    }
    move |a: Atom| table.get(&a).copied().unwrap_or(false)
}

/// Homogeneous parts of orders `>= lowest_order` of the symbol composition
/// `(sum_j b_j) o ((a_2 - lambda) + a_1 + a_0)`.
pub fn parametrix_composition(
    ls: &LaplaceSymbolData,
    b: &[ResolventExpr],
    lowest_order: i32,
) -> Result<BTreeMap<i32, ResolventExpr>> {
    let q = ls.a2_q;
    let vanishing = atom_vanishing_table(ls);
    let mut acc = ResolventExpr::zero(q);
    for (j, bj) in b.iter().enumerate() {
        for k in 0..=2i32 {
            let max_l = k - 2 - j as i32 - lowest_order;
            for l in 0..=max_l.max(-1) {
                for l1 in 0..=l as u32 {
                    let l2 = l as u32 - l1;
                    let part = symbol_part(q, k as usize, l1, l2, true).without_atoms(|a| vanishing(a));
                    if part.is_zero() {
                        continue;
                    }
                    let w = 1.0 / (factorial(l1) * factorial(l2));
                    acc = acc.add(&bj.xi_derivative_pow(l1, l2)?.mul(&part).scale(w));
                }
            }
        }
    }
    let mut parts = acc.by_order();
    for d in lowest_order..=0 {
        parts.entry(d).or_insert_with(|| ResolventExpr::zero(q));
    }
    parts.retain(|&d, _| d >= lowest_order);
    Ok(parts)
}

/// Dense per-block evaluation of expressions as finite sections.
#[derive(Debug, Clone)]
pub struct ExprEvaluator {
    window: BasisWindow,
    blocks: Vec<Vec<usize>>,
    k2: Vec<DMatrix<C64>>,
    k2_spectrum: Vec<Vec<f64>>,
    atoms: BTreeMap<Atom, Vec<DMatrix<C64>>>,
}

impl ExprEvaluator {
    pub fn new(ls: &LaplaceSymbolData, atoms: &BTreeSet<Atom>, window: BasisWindow) -> Result<Self> {
        let k2 = left_mult_matrix(&ls.k2, &window);
        let ops: BTreeMap<Atom, FiniteSectionOperator> =
            atoms.iter().map(|&a| (a, left_mult_matrix(&ls.atom(a), &window))).collect();
        let mut all: Vec<&FiniteSectionOperator> = vec![&k2];
        all.extend(ops.values());
        let blocks = FiniteSectionOperator::joint_blocks(&all);
        let k2_blocks: Vec<DMatrix<C64>> = blocks.iter().map(|b| k2.dense_block(b)).collect();
        let k2_spectrum = k2_blocks
            .iter()
            .map(|m| linalg::hermitian_eigenvalues(m.clone()))
            .collect::<Result<Vec<_>>>()?;
        let atoms = ops.iter().map(|(&a, op)| (a, blocks.iter().map(|b| op.dense_block(b)).collect())).collect();
        Ok(Self { window, blocks, k2: k2_blocks, k2_spectrum, atoms })
    }

    pub fn for_exprs(ls: &LaplaceSymbolData, exprs: &[&ResolventExpr], window: BasisWindow) -> Result<Self> {
        let atoms: BTreeSet<Atom> = exprs.iter().flat_map(|e| e.atoms()).collect();
        Self::new(ls, &atoms, window)
    }

    /// `min |Q(xi) mu - lambda|` over the spectrum of the `k^2` finite section.
    pub fn distance_to_spectrum(&self, qxi: f64, lambda: C64) -> f64 {
        self.k2_spectrum.iter().flatten().map(|&mu| (C64::new(qxi * mu, 0.0) - lambda).norm()).fold(f64::INFINITY, f64::min)
    }

    pub fn eval(&self, e: &ResolventExpr, xi: [f64; 2], lambda: C64) -> Result<FiniteSectionOperator> {
        let [q0, q1, q2] = e.q;
        let qxi = q0 * xi[0] * xi[0] + q1 * xi[0] * xi[1] + q2 * xi[1] * xi[1];
        let dist = self.distance_to_spectrum(qxi, lambda);
        if dist < NEAR_SINGULAR_TOL * (1.0 + lambda.norm()) {
            return Err(Error::NearSingular(dist));
        }
        let mut values: Vec<DMatrix<C64>> = Vec::with_capacity(self.blocks.len());
        for (bi, block) in self.blocks.iter().enumerate() {
            let n = block.len();
            let pencil = &self.k2[bi] * C64::new(qxi, 0.0) - DMatrix::<C64>::identity(n, n) * lambda;
            let resolvent = pencil.clone().lu().try_inverse().ok_or(Error::NearSingular(dist))?;
            let mut total = DMatrix::<C64>::zeros(n, n);
            for (f, (p1, p2), c) in e.terms() {
                let scalar = c * xi[0].powi(p1 as i32) * xi[1].powi(p2 as i32);
                if scalar == 0.0 {
                    continue;
                }
                let mut prod = DMatrix::<C64>::identity(n, n);
                for fac in f {
                    let m = match fac {
                        Factor::Resolvent => &resolvent,
                        Factor::Pencil => &pencil,
                        Factor::Atom(a) => self
                            .atoms
                            .get(a)
                            .map(|v| &v[bi])
                            .ok_or_else(|| Error::InvalidArgument(format!("atom {a:?} not prepared")))?,
                    };
                    prod = &prod * m;
                }
                total += prod * C64::new(scalar, 0.0);
            }
            values.push(total);
        }
        Ok(assemble(self.window, &self.blocks, &values))
    }
}

fn assemble(window: BasisWindow, blocks: &[Vec<usize>], values: &[DMatrix<C64>]) -> FiniteSectionOperator {
    let mut loc = vec![(0usize, 0usize); window.dim()];
    for (bi, b) in blocks.iter().enumerate() {
        for (pos, &i) in b.iter().enumerate() {
            loc[i] = (bi, pos);
        }
    }
    FiniteSectionOperator::from_columns(window, |j| {
        let (bi, pos) = loc[j];
        let m = &values[bi];
        blocks[bi].iter().enumerate().map(|(r, &i)| (i, m[(r, pos)])).filter(|e| e.1 != ZERO).collect()
    })
}

/// One-shot evaluation of `e` at `(xi, lambda)` on `w`.
pub fn eval_expr(
    e: &ResolventExpr,
    ls: &LaplaceSymbolData,
    xi: [f64; 2],
    lambda: C64,
    w: BasisWindow,
) -> Result<FiniteSectionOperator> {
    ExprEvaluator::for_exprs(ls, &[e], w)?.eval(e, xi, lambda)
}

/// Parabola `lambda(u) = (u + i a)^2`, `|u| <= half_width`, sampled by the
/// trapezoidal rule. It passes through `-a^2` and opens around `[0, inf)`,
/// traversed from `Im lambda < 0` to `Im lambda > 0`, the orientation for
/// which `(2 pi i)^{-1} int e^{-lambda} (s - lambda)^{-1} d lambda = e^{-s}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct ContourSpec {
    pub offset: f64,
    pub half_width: f64,
    pub nodes: usize,
}

impl Default for ContourSpec {
    fn default() -> Self {
        Self { offset: 1.0, half_width: 6.6, nodes: 89 }
    }
}

impl ContourSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.offset > 0.0) || !(self.half_width > 0.0) || self.nodes < 5 || self.nodes % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "contour needs offset > 0, half_width > 0 and an odd node count >= 5, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Nodes and weights with `(2 pi i)^{-1} int_C f ~ sum_k w_k f(lambda_k)`.
    pub fn rule(&self) -> Vec<(C64, C64)> {
        let h = 2.0 * self.half_width / (self.nodes - 1) as f64;
        let two_pi_i = C64::new(0.0, 2.0 * PI);
        (0..self.nodes)
            .map(|k| {
                let z = C64::new(-self.half_width + k as f64 * h, self.offset);
                (z * z, z * 2.0 * h / two_pi_i)
            })
            .collect()
    }

    /// Same as [`ContourSpec::rule`] with the heat weight `e^{-lambda}` folded in.
    pub fn heat_rule(&self) -> Vec<(C64, C64)> {
        self.rule().into_iter().map(|(l, w)| (l, w * (-l).exp())).collect()
    }
}

/// Largest entry of `(2 pi i)^{-1} int_C e^{-lambda} (M - lambda)^{-1} d lambda - e^{-M}`
/// for Hermitian positive semidefinite `M`.
pub fn contour_exp_check(m: &DMatrix<C64>, contour: &ContourSpec) -> Result<f64> {
    contour.validate()?;
    let n = m.nrows();
    let (vals, vecs) = linalg::hermitian_eigen(m.clone())?;
    let exact = &vecs * DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(n, vals.iter().map(|v| C64::new((-v).exp(), 0.0)))) * vecs.adjoint();
    let mut approx = DMatrix::<C64>::zeros(n, n);
    for (lam, w) in contour.heat_rule() {
        let shifted = m - DMatrix::<C64>::identity(n, n) * lam;
        let inv = shifted.lu().try_inverse().ok_or(Error::NearSingular(0.0))?;
        approx += inv * w;
    }
    Ok((approx - exact).iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Radial/angular grid for the `xi`-integral in the coordinates
/// `xi_1 = r cos t - r (Re tau / Im tau) sin t`, `xi_2 = r sin t / Im tau`,
/// where `Q(xi) = r^2` and `d xi = (r / Im tau) dr dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct XiQuadrature {
    pub radial_nodes: usize,
    /// Radial cutoff; chosen from the decay rate when absent.
    pub radius: Option<f64>,
    pub angular_nodes: usize,
    /// Window of the finite sections used for the trace.
    pub window: u32,
    pub tail_tol: f64,
}

impl Default for XiQuadrature {
    fn default() -> Self {
        Self { radial_nodes: 40, radius: None, angular_nodes: 64, window: 16, tail_tol: 1e-9 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HeatCoefficient {
    /// Subscript of `B_n`.
    pub n: usize,
    pub value: f64,
    /// Imaginary part of the raw quadrature sum (zero in exact arithmetic).
    pub imaginary_part: f64,
    /// Change against a coarser radial rule plus a coarser contour rule.
    pub error_estimate: f64,
    pub tail_bound: f64,
    pub radius: f64,
    pub terms: usize,
    pub words: usize,
    pub block_size: usize,
}

/// `int_0^{2 pi} xi_1^{p1} xi_2^{p2} dt` at `r = 1`; exact for `p1 + p2 < nodes`.
fn angular_moment(tau: ModuliPoint, p1: u32, p2: u32, nodes: usize) -> f64 {
    if (p1 + p2) % 2 == 1 {
        return 0.0;
    }
    let slope = tau.tau_re / tau.tau_im;
    let h = 2.0 * PI / nodes as f64;
    (0..nodes)
        .map(|k| {
            let t = k as f64 * h;
            let x = t.cos() - slope * t.sin();
            let y = t.sin() / tau.tau_im;
            x.powi(p1 as i32) * y.powi(p2 as i32)
        })
        .sum::<f64>()
        * h
}

/// Trie over reversed words: evaluation proceeds right to left and shares suffixes.
#[derive(Debug, Default)]
struct WordTrie {
    children: Vec<Vec<(Factor, usize)>>,
    ends: Vec<Vec<usize>>,
}

impl WordTrie {
    fn new() -> Self {
        Self { children: vec![Vec::new()], ends: vec![Vec::new()] }
    }

    fn insert(&mut self, word: &[Factor], id: usize) {
        let mut node = 0;
        for &f in word.iter().rev() {
            node = match self.children[node].iter().find(|(g, _)| *g == f) {
                Some(&(_, c)) => c,
                None => {
                    self.children.push(Vec::new());
                    self.ends.push(Vec::new());
                    let c = self.children.len() - 1;
                    self.children[node].push((f, c));
                    c
                }
            };
        }
        self.ends[node].push(id);
    }
}

/// Vacuum matrix elements `<w(s, lambda) 1, 1>` of words on the vacuum component,
/// in the eigenbasis of the `k^2` finite section where resolvents are diagonal.
struct VacuumEvaluator {
    spectrum: Vec<f64>,
    atoms: BTreeMap<Atom, DMatrix<C64>>,
    start: Vec<C64>,
}

impl VacuumEvaluator {
    fn new(ls: &LaplaceSymbolData, atoms: &BTreeSet<Atom>, window: BasisWindow) -> Result<Self> {
        let k2 = left_mult_matrix(&ls.k2, &window);
        let ops: BTreeMap<Atom, FiniteSectionOperator> =
            atoms.iter().map(|&a| (a, left_mult_matrix(&ls.atom(a), &window))).collect();
        let mut all: Vec<&FiniteSectionOperator> = vec![&k2];
        all.extend(ops.values());
        let block = FiniteSectionOperator::vacuum_block(&all);
        let pos = block.iter().position(|&i| i == window.vacuum()).expect("vacuum in its block");
        let (spectrum, v) = linalg::hermitian_eigen(k2.dense_block(&block))?;
        if spectrum[0] <= 0.0 {
            return Err(Error::InvalidArgument("k^2 finite section is not positive".into()));
        }
        let vh = v.adjoint();
        let atoms = ops.iter().map(|(&a, op)| (a, &vh * op.dense_block(&block) * &v)).collect();
        let start = (0..block.len()).map(|i| v[(pos, i)].conj()).collect();
        Ok(Self { spectrum, atoms, start })
    }

    fn dim(&self) -> usize {
        self.start.len()
    }

    /// `values[id][k] = <word_id(s, lambda_k) 1, 1>`.
    fn eval(&self, trie: &WordTrie, words: usize, s: f64, lambdas: &[C64]) -> Vec<Vec<C64>> {
        let n = self.dim();
        let kn = lambdas.len();
        let x = DMatrix::from_fn(n, kn, |i, _| self.start[i]);
        let mut out = vec![vec![ZERO; kn]; words];
        let mut stack: Vec<(usize, DMatrix<C64>)> = vec![(0, x)];
        while let Some((node, m)) = stack.pop() {
            for &id in &trie.ends[node] {
                for k in 0..kn {
                    out[id][k] = (0..n).map(|i| self.start[i].conj() * m[(i, k)]).sum();
                }
            }
            for &(f, child) in &trie.children[node] {
                let next = match f {
                    Factor::Atom(a) => &self.atoms[&a] * &m,
                    Factor::Resolvent | Factor::Pencil => {
                        let mut next = m.clone();
                        for k in 0..kn {
                            for i in 0..n {
                                let p = C64::new(s * self.spectrum[i], 0.0) - lambdas[k];
                                next[(i, k)] = if f == Factor::Resolvent { next[(i, k)] / p } else { next[(i, k)] * p };
                            }
                        }
                        next
                    }
                };
                stack.push((child, next));
            }
        }
        out
    }
}

/// `B_n = (2 pi i)^{-1} int int_C e^{-lambda} t(b_n(xi, lambda)) d lambda d xi`
/// for `n` in `{0, 2}`.
pub fn heat_coefficient(
    n: usize,
    ls: &LaplaceSymbolData,
    contour: &ContourSpec,
    xi: &XiQuadrature,
) -> Result<HeatCoefficient> {
    if n != 0 && n != 2 {
        return Err(Error::UnsupportedOrder(n));
    }
    contour.validate()?;
    let b = parametrix_terms(ls, n)?;
    let expr = &b[n];
    let tau = ls.tau;

    // angular integration turns each word's monomials into a polynomial in r
    let mut polys: BTreeMap<Word, Vec<f64>> = BTreeMap::new();
    for (f, (p1, p2), c) in expr.terms() {
        let deg = (p1 + p2) as usize;
        if deg >= xi.angular_nodes {
            return Err(Error::InvalidArgument(format!("angular rule too coarse for degree {deg}")));
        }
        let m = angular_moment(tau, p1, p2, xi.angular_nodes);
        let poly = polys.entry(f.to_vec()).or_default();
        if poly.len() <= deg {
            poly.resize(deg + 1, 0.0);
        }
        poly[deg] += c * m;
    }
    polys.retain(|_, p| p.iter().any(|&c| c != 0.0));
    let words: Vec<(Word, Vec<f64>)> = polys.into_iter().collect();
    let max_deg = words.iter().map(|(_, p)| p.len().saturating_sub(1)).max().unwrap_or(0);

    let atoms: BTreeSet<Atom> = words
        .iter()
        .flat_map(|(w, _)| w.iter().filter_map(|f| if let Factor::Atom(a) = f { Some(*a) } else { None }))
        .collect();
    let ev = VacuumEvaluator::new(ls, &atoms, BasisWindow::new(xi.window))?;
    let mut trie = WordTrie::new();
    for (id, (w, _)) in words.iter().enumerate() {
        trie.insert(w, id);
    }
    let mu = ev.spectrum[0];
    let radius = xi.radius.unwrap_or_else(|| ((8.0 - xi.tail_tol.ln()) / mu).sqrt());

    let rule = contour.heat_rule();
    let lambdas: Vec<C64> = rule.iter().map(|r| r.0).collect();
    // integrand r * sum_w poly_w(r) F_w(r^2) / Im tau, on the full and on the coarse contour rule
    let integrand = |r: f64| -> (C64, C64) {
        let vals = ev.eval(&trie, words.len(), r * r, &lambdas);
        let mut fine = ZERO;
        let mut coarse = ZERO;
        for ((_, poly), v) in words.iter().zip(&vals) {
            let pr: f64 = poly.iter().enumerate().map(|(d, c)| c * r.powi(d as i32)).sum();
            let terms: Vec<C64> = v.iter().zip(&rule).map(|(x, (_, w))| x * w).collect();
            fine += linalg::pairwise_sum(&terms) * pr;
            let even: Vec<C64> = terms.iter().step_by(2).map(|x| x * 2.0).collect();
            coarse += linalg::pairwise_sum(&even) * pr;
        }
        (fine * (r / tau.tau_im), coarse * (r / tau.tau_im))
    };
    let radial = |nodes: usize| -> (C64, C64) {
        let (x, w) = linalg::gauss_legendre(nodes);
        let mut fine = Vec::with_capacity(nodes);
        let mut coarse = Vec::with_capacity(nodes);
        for (xk, wk) in x.iter().zip(&w) {
            let r = 0.5 * radius * (xk + 1.0);
            let (f, c) = integrand(r);
            fine.push(f * (0.5 * radius * wk));
            coarse.push(c * (0.5 * radius * wk));
        }
        (linalg::pairwise_sum(&fine), linalg::pairwise_sum(&coarse))
    };
    let (value, coarse_contour) = radial(xi.radial_nodes);
    let (coarse_radial, _) = radial((xi.radial_nodes / 2).max(2));
    let edge = integrand(radius).0.norm();
    let q = (max_deg + 1) as f64;
    let denom = 2.0 * mu * radius - q / radius;
    let tail_bound = if denom > 0.0 { edge / denom } else { f64::INFINITY };
    if tail_bound > xi.tail_tol {
        return Err(Error::TailBound(tail_bound));
    }
    Ok(HeatCoefficient {
        n,
        value: value.re,
        imaginary_part: value.im,
        error_estimate: (value - coarse_contour).norm() + (value - coarse_radial).norm(),
        tail_bound,
        radius,
        terms: expr.term_count(),
        words: words.len(),
        block_size: ev.dim(),
    })
}

/// Result of [`heat_trace_fit`].
#[derive(Debug, Clone, Serialize)]
pub struct HeatFit {
    pub b0: f64,
    pub b2: f64,
    /// Coefficient of the `t^2` guard term.
    pub guard: f64,
    pub b0_stderr: f64,
    pub b2_stderr: f64,
    /// `[t_min, t_max]` actually used.
    pub t_window: (f64, f64),
    pub ceiling: f64,
    /// `(t, t * sum_j e^{-t lambda_j})` on the admissible grid.
    pub points: Vec<(f64, f64)>,
}

/// Truncation guard: `e^{-t * ceiling}` must stay below this on the fit window.
pub const HEAT_TRUNCATION_GUARD: f64 = 1e-12;

/// `t * sum_j e^{-t lambda_j}`, summed from the largest eigenvalue down.
pub fn scaled_heat_trace(eigenvalues: &[f64], t: f64) -> f64 {
    t * eigenvalues.iter().rev().map(|l| (-t * l).exp()).sum::<f64>()
}

/// Log-spaced grid of `n` points on `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|k| lo * (hi / lo).powf(k as f64 / (n - 1) as f64)).collect()
}

/// Least-squares fit of `t * Tr e^{-t L} ~ B_0 + B_2 t + c t^2` over the part
/// of `t_grid` where `e^{-t * ceiling} < 1e-12`, `ceiling` being the largest
/// eigenvalue up to which the spectrum is trusted.
pub fn heat_trace_fit(spectrum: &SpectrumResult, t_grid: &[f64], ceiling: f64) -> Result<HeatFit> {
    let lmax = spectrum.max();
    if !(ceiling > 0.0) || ceiling > lmax {
        return Err(Error::NoAdmissibleWindow(format!("ceiling {ceiling} outside (0, {lmax}]")));
    }
    let t_min = -HEAT_TRUNCATION_GUARD.ln() / ceiling;
    let ts: Vec<f64> = t_grid.iter().copied().filter(|&t| t >= t_min).collect();
    if ts.len() < 4 {
        return Err(Error::NoAdmissibleWindow(format!(
            "{} grid points with t >= {t_min:.3e}; need at least 4",
            ts.len()
        )));
    }
    let ys: Vec<f64> = ts.iter().map(|&t| scaled_heat_trace(&spectrum.eigenvalues, t)).collect();
    let (c, se) = linalg::poly_fit(&ts, &ys, 2)?;
    Ok(HeatFit {
        b0: c[0],
        b2: c[1],
        guard: c[2],
        b0_stderr: se[0],
        b2_stderr: se[1],
        t_window: (ts[0], ts[ts.len() - 1]),
        ceiling,
        points: ts.into_iter().zip(ys).collect(),
    })
}

/// Maximum entry of the composition defect at each order.
#[derive(Debug, Clone, Serialize)]
pub struct ParametrixReport {
    /// `(order, max |entry|)`; order 0 is measured against the identity.
    pub orders: Vec<(i32, f64)>,
    pub samples: usize,
}

/// Evaluates the homogeneous parts of `(b_0 + b_1 + b_2) o (a_2 - lambda + a_1 + a_0)`
/// at the given `(xi, lambda)` samples on `window`.
pub fn parametrix_identity_check(
    ls: &LaplaceSymbolData,
    window: BasisWindow,
    samples: &[([f64; 2], C64)],
) -> Result<ParametrixReport> {
    let b = parametrix_terms(ls, 2)?;
    let parts = parametrix_composition(ls, &b, -2)?;
    let exprs: Vec<&ResolventExpr> = parts.values().collect();
    let ev = ExprEvaluator::for_exprs(ls, &exprs, window)?;
    let id = FiniteSectionOperator::identity(window);
    let mut worst: BTreeMap<i32, f64> = parts.keys().map(|&d| (d, 0.0)).collect();
    for &(xi, lambda) in samples {
        for (&d, e) in &parts {
            let mut v = ev.eval(e, xi, lambda)?;
            if d == 0 {
                v = v.sub(&id);
            }
            let m = (0..v.dim()).flat_map(|j| v.column(j).iter().map(|e| e.1.norm())).fold(0.0, f64::max);
            let slot = worst.get_mut(&d).expect("order present");
            *slot = slot.max(m);
        }
    }
    Ok(ParametrixReport { orders: worst.into_iter().rev().collect(), samples: samples.len() })
}

/// The value of `e` at `lambda = 0` as a classical symbol: `B0 -> Q^{-1} k^{-2}`,
/// `Pencil -> a_2`. `k_inv2` is the algebra inverse of `k^2`.
pub fn graded_at_zero(
    e: &ResolventExpr,
    ls: &LaplaceSymbolData,
    k_inv2: &NcElement,
    winding_cutoff: i32,
) -> Result<GradedSymbol> {
    let theta = ls.theta();
    let qinv = classicalize_resolvent(theta, 0.0, ls.tau, 1, winding_cutoff)?.without_exact().left_mul(k_inv2)?;
    let [q0, q1, q2] = ls.a2_q;
    let pencil = PolySymbol::new(theta)
        .with_term(2, 0, ls.k2.scale_re(q0))
        .with_term(1, 1, ls.k2.scale_re(q1))
        .with_term(0, 2, ls.k2.scale_re(q2))
        .to_graded()
        .truncate_below(2)
        .with_winding_cutoff(winding_cutoff);
    let order = e.order().unwrap_or(0);
    let min = e.terms().map(|(f, xi, _)| term_order(f, xi)).min().unwrap_or(order);
    let mut out = GradedSymbol::zero(theta, order, (order - min + 1) as u32).with_winding_cutoff(winding_cutoff);
    for (f, (p1, p2), c) in e.terms() {
        let d = term_order(f, (p1, p2));
        let mut acc = PolySymbol::new(theta)
            .with_term(p1, p2, NcElement::scalar(theta, C64::new(c, 0.0)))
            .to_graded()
            .truncate_below((p1 + p2) as i32)
            .with_winding_cutoff(winding_cutoff);
        for fac in f {
            let g = match fac {
                Factor::Resolvent => qinv.clone(),
                Factor::Pencil => pencil.clone(),
                Factor::Atom(a) => GradedSymbol::constant(&ls.atom(*a)),
            };
            acc = acc.product(&g, d)?;
        }
        out = out.add(&acc);
    }
    Ok(out)
}

/// `pi / Im tau * t(k^{-2})` from the inverse of the `k^2` finite section.
pub fn b0_closed_form(ls: &LaplaceSymbolData, window: BasisWindow) -> Result<f64> {
    let inv = crate::gns::vacuum_expectation_of_inverse(&left_mult_matrix(&ls.k2, &window))?;
    Ok(PI / ls.tau.tau_im * inv.re)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{hermitian_pair, DEFAULT_PAD};
    use crate::psido::compose;

    fn th() -> DeformationAngle {
        DeformationAngle::golden()
    }

    fn default_cd(tau: ModuliPoint) -> ConformalData {
        ConformalData::new(tau, hermitian_pair(th(), 1, 0, 0.4), DEFAULT_PAD).unwrap()
    }

    #[test]
    fn flat_symbol_has_no_lower_terms() {
        let ls = laplace_symbol(&ConformalData::flat(th(), ModuliPoint::i())).unwrap();
        assert!(ls.a1_coeffs.iter().all(|a| a.max_abs() == 0.0) && ls.a0.max_abs() == 0.0);
        assert!(ls.k2.approx_eq(&NcElement::one(th()), 0.0));
        let b = parametrix_terms(&ls, 2).unwrap();
        assert!(b[1].is_zero() && b[2].is_zero());
    }

    #[test]
    fn scalar_weyl_factor_scales_a2() {
        let s = 0.3;
        let h = NcElement::scalar(th(), C64::new(s, 0.0));
        let ls = laplace_symbol(&ConformalData::new(ModuliPoint::i(), h, DEFAULT_PAD).unwrap()).unwrap();
        assert!(ls.a1_coeffs.iter().all(|a| a.max_abs() == 0.0) && ls.a0.max_abs() == 0.0);
        assert!((ls.k2.coeff(0, 0).re - s.exp()).abs() < 1e-13);
    }

    #[test]
    fn symbol_matches_composition_of_k_laplacian_k() {
        for tau in [ModuliPoint::i(), ModuliPoint::new(0.4, 1.3).unwrap()] {
            let cd = default_cd(tau);
            let ls = laplace_symbol(&cd).unwrap();
            let k = GradedSymbol::constant(&cd.k);
            let lap = PolySymbol::flat_laplacian(th(), tau).to_graded();
            let klk = compose(&compose(&k, &lap, 0).unwrap(), &k, 0).unwrap();
            let expected = ls.to_poly().to_graded();
            for d in 0..=2 {
                for w in -2..=2 {
                    assert!(klk.coeff(d, w).max_diff(&expected.coeff(d, w)) < 1e-12, "layer {d} winding {w}");
                }
            }
        }
    }

    #[test]
    fn b1_contains_minus_b0_a1_b0() {
        let ls = laplace_symbol(&default_cd(ModuliPoint::i())).unwrap();
        let b = parametrix_terms(&ls, 2).unwrap();
        let word = vec![Factor::Resolvent, Factor::Atom(Atom::new(AtomBase::A1Xi1, 0, 0)), Factor::Resolvent];
        let c = b[1].terms().find(|(f, xi, _)| *f == word.as_slice() && *xi == (1, 0)).map(|t| t.2);
        assert_eq!(c, Some(-1.0));
        for (j, bj) in b.iter().enumerate() {
            let orders: BTreeSet<i32> = bj.terms().map(|(f, xi, _)| term_order(f, xi)).collect();
            assert_eq!(orders.into_iter().collect::<Vec<_>>(), vec![-2 - j as i32]);
        }
        assert!(parametrix_terms(&ls, 3).is_err());
    }

    #[test]
    fn resolvent_inverts_pencil() {
        let ls = laplace_symbol(&default_cd(ModuliPoint::new(1.0, 1.0).unwrap())).unwrap();
        let q = ls.a2_q;
        let w = BasisWindow::new(6);
        let xi = [0.7, -1.3];
        let lambda = C64::new(-0.4, 0.9);
        let r = eval_expr(&ResolventExpr::resolvent(q), &ls, xi, lambda, w).unwrap();
        let p = eval_expr(&ResolventExpr::pencil(q), &ls, xi, lambda, w).unwrap();
        let defect = r.matmul(&p).sub(&FiniteSectionOperator::identity(w));
        assert!(defect.to_dense().iter().all(|z| z.norm() < 1e-12));
    }

    #[test]
    fn flat_resolvent_is_scalar() {
        let ls = laplace_symbol(&ConformalData::flat(th(), ModuliPoint::i())).unwrap();
        let w = BasisWindow::new(3);
        let lambda = C64::new(0.5, 1.0);
        let r = eval_expr(&ResolventExpr::resolvent(ls.a2_q), &ls, [1.0, 2.0], lambda, w).unwrap();
        let expected = FiniteSectionOperator::identity(w).scale((C64::new(5.0, 0.0) - lambda).inv());
        assert!(r.sub(&expected).to_dense().iter().all(|z| z.norm() < 1e-15));
    }

    #[test]
    fn near_singular_solve_is_reported() {
        let ls = laplace_symbol(&ConformalData::flat(th(), ModuliPoint::i())).unwrap();
        let err = eval_expr(&ResolventExpr::resolvent(ls.a2_q), &ls, [1.0, 1.0], C64::new(2.0, 0.0), BasisWindow::new(2));
        assert!(matches!(err, Err(Error::NearSingular(_))));
    }

    #[test]
    fn xi_derivatives_match_central_differences() {
        let ls = laplace_symbol(&default_cd(ModuliPoint::new(0.5, 1.2).unwrap())).unwrap();
        let w = BasisWindow::new(5);
        let b = parametrix_terms(&ls, 1).unwrap();
        let lambda = C64::new(-0.3, 0.8);
        let xi = [0.6, -0.4];
        for expr in [&b[0], &b[1]] {
            for axis in [1u8, 2] {
                let d = expr.xi_derivative(axis).unwrap();
                let ev = ExprEvaluator::for_exprs(&ls, &[expr, &d], w).unwrap();
                let exact = ev.eval(&d, xi, lambda).unwrap().to_dense();
                let err = |h: f64| {
                    let shift = |s: f64| {
                        let mut x = xi;
                        x[(axis - 1) as usize] += s;
                        ev.eval(expr, x, lambda).unwrap().to_dense()
                    };
                    let fd = (shift(h) - shift(-h)) / C64::new(2.0 * h, 0.0);
                    (fd - &exact).iter().map(|z| z.norm()).fold(0.0, f64::max)
                };
                let (e1, e2) = (err(1e-3), err(5e-4));
                let rate = (e1 / e2).log2();
                assert!(rate >= 1.9, "observed order {rate} ({e1:e}, {e2:e})");
            }
        }
    }

    #[test]
    fn contour_reproduces_matrix_exponential() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for n in [3usize, 6] {
            let a = DMatrix::<C64>::from_fn(n, n, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            let m = &a * a.adjoint() * C64::new(2.0, 0.0);
            let err = contour_exp_check(&m, &ContourSpec::default()).unwrap();
            assert!(err < 1e-8, "{err:e}");
        }
    }

    #[test]
    fn b0_flat_is_pi_over_im_tau() {
        for (tau, expected) in [(ModuliPoint::i(), PI), (ModuliPoint::new(0.0, 2.0).unwrap(), PI / 2.0)] {
            let ls = laplace_symbol(&ConformalData::flat(th(), tau)).unwrap();
            let b0 = heat_coefficient(0, &ls, &ContourSpec::default(), &XiQuadrature::default()).unwrap();
            assert!((b0.value - expected).abs() < 1e-8, "{} vs {expected}", b0.value);
            let b2 = heat_coefficient(2, &ls, &ContourSpec::default(), &XiQuadrature::default()).unwrap();
            assert_eq!(b2.value, 0.0);
        }
    }

    #[test]
    fn b0_matches_closed_form_under_perturbation() {
        let tau = ModuliPoint::new(1.0, 1.0).unwrap();
        let ls = laplace_symbol(&default_cd(tau)).unwrap();
        let b0 = heat_coefficient(0, &ls, &ContourSpec::default(), &XiQuadrature::default()).unwrap();
        let closed = b0_closed_form(&ls, BasisWindow::new(24)).unwrap();
        assert!((b0.value - closed).abs() < 1e-4, "{} vs {closed}", b0.value);
        assert!(b0.imaginary_part.abs() < 1e-10);
    }

    #[test]
    fn b0_scales_with_weyl_factor() {
        let c: f64 = 1.7;
        let h = hermitian_pair(th(), 1, 0, 0.4);
        let shifted = &h + &NcElement::scalar(th(), C64::new(2.0 * c.ln(), 0.0));
        let base = laplace_symbol(&ConformalData::new(ModuliPoint::i(), h, DEFAULT_PAD).unwrap()).unwrap();
        let scaled = laplace_symbol(&ConformalData::new(ModuliPoint::i(), shifted, DEFAULT_PAD).unwrap()).unwrap();
        let w = BasisWindow::new(24);
        let (cb, cs) = (b0_closed_form(&base, w).unwrap(), b0_closed_form(&scaled, w).unwrap());
        assert!((cb / cs - c * c).abs() < 1e-10);
        let q = XiQuadrature::default();
        let nb = heat_coefficient(0, &base, &ContourSpec::default(), &q).unwrap().value;
        let ns = heat_coefficient(0, &scaled, &ContourSpec::default(), &q).unwrap().value;
        assert!((nb / ns - c * c).abs() < 1e-6);
    }

    #[test]
    fn unsupported_heat_orders_fail() {
        let ls = laplace_symbol(&ConformalData::flat(th(), ModuliPoint::i())).unwrap();
        assert!(matches!(heat_coefficient(1, &ls, &ContourSpec::default(), &XiQuadrature::default()), Err(Error::UnsupportedOrder(1))));
        assert!(matches!(heat_coefficient(4, &ls, &ContourSpec::default(), &XiQuadrature::default()), Err(Error::UnsupportedOrder(4))));
    }

    #[test]
    fn parametrix_composition_leaves_identity() {
        let ls = laplace_symbol(&default_cd(ModuliPoint::new(1.0, 1.0).unwrap())).unwrap();
        let samples: Vec<([f64; 2], C64)> = ContourSpec::default()
            .rule()
            .into_iter()
            .step_by(22)
            .zip([[0.3, 0.2], [1.0, -0.5], [2.0, 1.0], [0.0, 0.7], [-1.5, 0.1]])
            .map(|((l, _), x)| (x, l))
            .collect();
        let rep = parametrix_identity_check(&ls, BasisWindow::new(4), &samples).unwrap();
        assert_eq!(rep.orders.iter().map(|o| o.0).collect::<Vec<_>>(), vec![0, -1, -2]);
        for (d, m) in rep.orders {
            assert!(m < 1e-10, "order {d}: {m:e}");
        }
    }

    #[test]
    fn flat_heat_fit_recovers_pi() {
        let n = 120i32;
        let mut eig: Vec<f64> = (-n..=n).flat_map(|m| (-n..=n).map(move |k| (m * m + k * k) as f64)).collect();
        eig.sort_by(f64::total_cmp);
        let spec = SpectrumResult { eigenvalues: eig, max_residual: None };
        let ceiling = (n * n) as f64;
        let fit = heat_trace_fit(&spec, &log_grid(2e-3, 0.5, 30), ceiling).unwrap();
        assert!((fit.b0 - PI).abs() < 1e-6, "{}", fit.b0);
        assert!(heat_trace_fit(&spec, &log_grid(1e-4, 1e-3, 10), ceiling).is_err());
    }
}
