//! Arithmetic in the smooth noncommutative torus on truncated twisted
//! Fourier series `sum a_{m,n} U^m V^n` with `V U = e^{2 pi i theta} U V`.
//!
//! Products never truncate: the bandwidth of `a * b` is the sum of the
//! bandwidths. Dropping coefficients is always an explicit call
//! ([`NcElement::truncate`], [`NcElement::prune`]).

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::ops::{Add, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gns::BasisWindow;
use crate::linalg::{self, C64, ONE, ZERO};

/// Default absolute tolerance for coefficient-wise comparisons.
pub const COEFF_TOL: f64 = 1e-12;
/// Default tolerance on the pad-to-pad change of [`exp_selfadjoint`].
pub const EXP_TOL: f64 = 1e-10;
/// Default padding for the finite-section exponential.
pub const DEFAULT_PAD: u32 = 16;

/// Deformation parameter `theta` of the relation `VU = e^{2 pi i theta} UV`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct DeformationAngle(f64);

impl DeformationAngle {
    pub fn new(theta: f64) -> Result<Self> {
        if theta > 0.0 && theta < 1.0 {
            Ok(Self(theta))
        } else {
            Err(Error::InvalidTheta(theta))
        }
    }

    /// The golden-ratio angle `(sqrt 5 - 1) / 2`, badly approximable by rationals.
    pub fn golden() -> Self {
        Self((5f64.sqrt() - 1.0) / 2.0)
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `e^{2 pi i theta k}` with the argument reduced mod 1 before scaling.
    pub fn twist(self, k: i64) -> C64 {
        if k == 0 {
            return ONE;
        }
        let x = (self.0 * k as f64).rem_euclid(1.0);
        C64::from_polar(1.0, 2.0 * PI * x)
    }
}

impl TryFrom<f64> for DeformationAngle {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<DeformationAngle> for f64 {
    fn from(t: DeformationAngle) -> f64 {
        t.0
    }
}

/// Point `tau` of the upper half-plane fixing the conformal structure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModuliPoint {
    pub tau_re: f64,
    pub tau_im: f64,
}

impl ModuliPoint {
    pub fn new(tau_re: f64, tau_im: f64) -> Result<Self> {
        if tau_im > 0.0 && tau_re.is_finite() && tau_im.is_finite() {
            Ok(Self { tau_re, tau_im })
        } else {
            Err(Error::InvalidTau(tau_im))
        }
    }

    /// `tau = i`.
    pub fn i() -> Self {
        Self { tau_re: 0.0, tau_im: 1.0 }
    }

    pub fn abs_sqr(self) -> f64 {
        self.tau_re * self.tau_re + self.tau_im * self.tau_im
    }

    pub fn as_complex(self) -> C64 {
        C64::new(self.tau_re, self.tau_im)
    }

    /// Coefficients `(1, 2 Re tau, |tau|^2)` of `Q(xi) = |xi_1 + tau xi_2|^2`.
    pub fn quadratic_form(self) -> [f64; 3] {
        [1.0, 2.0 * self.tau_re, self.abs_sqr()]
    }

    pub fn q(self, x: f64, y: f64) -> f64 {
        x * x + 2.0 * self.tau_re * x * y + self.abs_sqr() * y * y
    }
}

/// A finite twisted Fourier series `sum a_{m,n} U^m V^n` with all indices
/// inside the box `|m|, |n| <= bandwidth`.
#[derive(Debug, Clone, PartialEq)]
pub struct NcElement {
    theta: DeformationAngle,
    bandwidth: u32,
    coeffs: BTreeMap<(i32, i32), C64>,
}

/// Index box radius of `(m, n)`.
fn radius(m: i32, n: i32) -> u32 {
    m.unsigned_abs().max(n.unsigned_abs())
}

impl NcElement {
    pub fn zero(theta: DeformationAngle) -> Self {
        Self { theta, bandwidth: 0, coeffs: BTreeMap::new() }
    }

    pub fn one(theta: DeformationAngle) -> Self {
        Self::scalar(theta, ONE)
    }

    pub fn scalar(theta: DeformationAngle, c: C64) -> Self {
        Self::monomial(0, 0, c, theta)
    }

    /// `c U^m V^n`, with bandwidth `max(|m|, |n|)`.
    pub fn monomial(m: i32, n: i32, c: C64, theta: DeformationAngle) -> Self {
        let mut coeffs = BTreeMap::new();
        coeffs.insert((m, n), c);
        Self { theta, bandwidth: radius(m, n), coeffs }
    }

    /// Builds an element from coefficient triples; repeated indices add up.
    /// The bandwidth is the smallest box containing every index given.
    pub fn from_coeffs(theta: DeformationAngle, coeffs: impl IntoIterator<Item = ((i32, i32), C64)>) -> Self {
        let mut out = Self::zero(theta);
        for ((m, n), c) in coeffs {
            out.bandwidth = out.bandwidth.max(radius(m, n));
            *out.coeffs.entry((m, n)).or_insert(ZERO) += c;
        }
        out
    }

    pub(crate) fn from_map(theta: DeformationAngle, bandwidth: u32, coeffs: BTreeMap<(i32, i32), C64>) -> Self {
        debug_assert!(coeffs.keys().all(|&(m, n)| radius(m, n) <= bandwidth));
        Self { theta, bandwidth, coeffs }
    }

    pub fn theta(&self) -> DeformationAngle {
        self.theta
    }

    pub fn bandwidth(&self) -> u32 {
        self.bandwidth
    }

    /// Largest box radius among stored non-zero coefficients.
    pub fn support_radius(&self) -> u32 {
        self.coeffs
            .iter()
            .filter(|(_, c)| **c != ZERO)
            .map(|(&(m, n), _)| radius(m, n))
            .max()
            .unwrap_or(0)
    }

    pub fn coeff(&self, m: i32, n: i32) -> C64 {
        self.coeffs.get(&(m, n)).copied().unwrap_or(ZERO)
    }

    /// Stored coefficients in lexicographic `(m, n)` order.
    pub fn iter(&self) -> impl Iterator<Item = ((i32, i32), C64)> + '_ {
        self.coeffs.iter().map(|(&k, &c)| (k, c))
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn l1_norm(&self) -> f64 {
        self.coeffs.values().map(|c| c.norm()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.values().fold(0.0, |m, c| m.max(c.norm()))
    }

    fn check_theta(&self, other: &Self) -> Result<()> {
        if self.theta == other.theta {
            Ok(())
        } else {
            Err(Error::ThetaMismatch(self.theta.0, other.theta.0))
        }
    }

    /// Coefficient-wise comparison; absent entries count as zero.
    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        self.theta == other.theta && self.max_diff(other) <= tol
    }

    /// Largest coefficient-wise difference.
    pub fn max_diff(&self, other: &Self) -> f64 {
        let mut worst: f64 = 0.0;
        for (k, c) in &self.coeffs {
            worst = worst.max((c - other.coeffs.get(k).copied().unwrap_or(ZERO)).norm());
        }
        for (k, c) in &other.coeffs {
            if !self.coeffs.contains_key(k) {
                worst = worst.max(c.norm());
            }
        }
        worst
    }

    pub fn scale(&self, c: C64) -> Self {
        Self {
            theta: self.theta,
            bandwidth: self.bandwidth,
            coeffs: self.coeffs.iter().map(|(&k, &v)| (k, v * c)).collect(),
        }
    }

    pub fn scale_re(&self, c: f64) -> Self {
        self.scale(C64::new(c, 0.0))
    }

    /// Twisted product; `(U^m V^n)(U^p V^q) = e^{2 pi i theta n p} U^{m+p} V^{n+q}`.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.check_theta(other)?;
        let bw = self.bandwidth + other.bandwidth;
        let side = 2 * bw as usize + 1;
        let work = self.coeffs.len() * other.coeffs.len();
        if work > 4096 && side * side <= 4 * work.max(1 << 16) {
            return Ok(self.mul_dense(other, bw));
        }
        let mut out: BTreeMap<(i32, i32), C64> = BTreeMap::new();
        for (&(m, n), &a) in &self.coeffs {
            for (&(p, q), &b) in &other.coeffs {
                let c = a * b * self.theta.twist(n as i64 * p as i64);
                *out.entry((m + p, n + q)).or_insert(ZERO) += c;
            }
        }
        Ok(Self::from_map(self.theta, self.bandwidth + other.bandwidth, out))
    }

    /// Same product accumulated on a dense box, with the phases
    /// `e^{2 pi i theta n p}` tabulated once per `(n, p)`.
    fn mul_dense(&self, other: &Self, bw: u32) -> Self {
        let b = bw as i32;
        let side = 2 * bw as usize + 1;
        let (ba, bb) = (self.bandwidth as i32, other.bandwidth as i32);
        let pw = 2 * bb as usize + 1;
        let mut phase = vec![ZERO; (2 * ba as usize + 1) * pw];
        for n in -ba..=ba {
            for p in -bb..=bb {
                phase[(n + ba) as usize * pw + (p + bb) as usize] = self.theta.twist(n as i64 * p as i64);
            }
        }
        let mut acc = vec![ZERO; side * side];
        let mut touched = vec![false; side * side];
        let rhs: Vec<((i32, i32), C64)> = other.iter().collect();
        for (&(m, n), &a) in &self.coeffs {
            let row = &phase[(n + ba) as usize * pw..(n + ba + 1) as usize * pw];
            for &((p, q), c) in &rhs {
                let idx = (m + p + b) as usize * side + (n + q + b) as usize;
                acc[idx] += a * c * row[(p + bb) as usize];
                touched[idx] = true;
            }
        }
        let coeffs = (0..side * side)
            .filter(|&i| touched[i])
            .map(|i| (((i / side) as i32 - b, (i % side) as i32 - b), acc[i]))
            .collect();
        Self::from_map(self.theta, bw, coeffs)
    }

    /// `a^*`, using `(U^m V^n)^* = e^{2 pi i theta m n} U^{-m} V^{-n}`.
    pub fn adjoint(&self) -> Self {
        let coeffs = self
            .coeffs
            .iter()
            .map(|(&(m, n), &c)| ((-m, -n), c.conj() * self.theta.twist(m as i64 * n as i64)))
            .collect();
        Self::from_map(self.theta, self.bandwidth, coeffs)
    }

    /// Largest coefficient of `a - a^*`.
    pub fn selfadjoint_defect(&self) -> f64 {
        self.max_diff(&self.adjoint())
    }

    /// The normalized trace: the `(0, 0)` coefficient.
    pub fn trace(&self) -> C64 {
        self.coeff(0, 0)
    }

    /// `t(a b)` without forming the product.
    pub fn trace_of_product(&self, other: &Self) -> Result<C64> {
        self.check_theta(other)?;
        let mut terms = Vec::with_capacity(self.coeffs.len());
        for (&(m, n), &a) in &self.coeffs {
            if let Some(&b) = other.coeffs.get(&(-m, -n)) {
                terms.push(a * b * self.theta.twist(-(n as i64) * m as i64));
            }
        }
        Ok(linalg::pairwise_sum(&terms))
    }

    /// The derivation `delta_j`, multiplying the `(m, n)` coefficient by `m`
    /// (`j = 1`) or `n` (`j = 2`).
    pub fn delta(&self, axis: u8) -> Result<Self> {
        let pick: fn(i32, i32) -> i32 = match axis {
            1 => |m, _| m,
            2 => |_, n| n,
            other => return Err(Error::InvalidAxis(other)),
        };
        Ok(self.map_weights(|m, n| C64::new(pick(m, n) as f64, 0.0)))
    }

    /// `delta_1^{j1} delta_2^{j2}`.
    pub fn delta_pow(&self, j1: u32, j2: u32) -> Self {
        self.map_weights(|m, n| C64::new((m as f64).powi(j1 as i32) * (n as f64).powi(j2 as i32), 0.0))
    }

    /// `d = delta_1 + conj(tau) delta_2`.
    pub fn dbar(&self, tau: ModuliPoint) -> Self {
        let t = tau.as_complex().conj();
        self.map_weights(|m, n| m as f64 + t * n as f64)
    }

    /// `d^* = delta_1 + tau delta_2`.
    pub fn dbar_star(&self, tau: ModuliPoint) -> Self {
        let t = tau.as_complex();
        self.map_weights(|m, n| m as f64 + t * n as f64)
    }

    fn map_weights(&self, f: impl Fn(i32, i32) -> C64) -> Self {
        let coeffs = self.coeffs.iter().map(|(&(m, n), &c)| ((m, n), c * f(m, n))).collect();
        Self::from_map(self.theta, self.bandwidth, coeffs)
    }

    /// Drops coefficients outside the box of radius `n`; returns the result
    /// and the discarded l1 mass.
    pub fn truncate(&self, n: u32) -> (Self, f64) {
        let mut kept = BTreeMap::new();
        let mut lost = 0.0;
        for (&(p, q), &c) in &self.coeffs {
            if radius(p, q) <= n {
                kept.insert((p, q), c);
            } else {
                lost += c.norm();
            }
        }
        (Self::from_map(self.theta, self.bandwidth.min(n), kept), lost)
    }

    /// Removes coefficients with `|c| <= tol`; bandwidth is kept.
    pub fn prune(&self, tol: f64) -> Self {
        let coeffs = self.coeffs.iter().filter(|(_, c)| c.norm() > tol).map(|(&k, &c)| (k, c)).collect();
        Self::from_map(self.theta, self.bandwidth, coeffs)
    }

    /// Same coefficients, bandwidth shrunk to the support radius.
    pub fn tighten(&self) -> Self {
        Self::from_map(self.theta, self.support_radius(), self.coeffs.clone())
    }

    /// Applies the left-multiplication finite section on `window` to a
    /// coefficient vector (row-major window enumeration), accumulating into `out`.
    pub fn left_apply(&self, window: &BasisWindow, x: &[C64], out: &mut [C64]) {
        out.iter_mut().for_each(|o| *o = ZERO);
        let nb = window.bandwidth() as i32;
        let bw = self.bandwidth as i32;
        let side = 2 * nb as usize + 1;
        // phase[(q + bw) * side + (m + nb)] = e^{2 pi i theta q m}
        let mut phase = vec![ZERO; (2 * bw as usize + 1) * side];
        for q in -bw..=bw {
            for m in -nb..=nb {
                phase[(q + bw) as usize * side + (m + nb) as usize] = self.theta.twist(q as i64 * m as i64);
            }
        }
        for (col, &xv) in x.iter().enumerate() {
            if xv == ZERO {
                continue;
            }
            let (m, n) = window.index_to_pair(col);
            for (&(p, q), &a) in &self.coeffs {
                let (r, s) = (m + p, n + q);
                if r.abs() > nb || s.abs() > nb {
                    continue;
                }
                out[window.pair_to_index(r, s)] += a * phase[(q + bw) as usize * side + (m + nb) as usize] * xv;
            }
        }
    }
}

impl Add for &NcElement {
    type Output = NcElement;
    fn add(self, rhs: &NcElement) -> NcElement {
        assert_eq!(self.theta, rhs.theta, "mismatched deformation angles");
        let mut coeffs = self.coeffs.clone();
        for (&k, &c) in &rhs.coeffs {
            *coeffs.entry(k).or_insert(ZERO) += c;
        }
        NcElement::from_map(self.theta, self.bandwidth.max(rhs.bandwidth), coeffs)
    }
}

impl Sub for &NcElement {
    type Output = NcElement;
    fn sub(self, rhs: &NcElement) -> NcElement {
        self + &(-rhs)
    }
}

impl Neg for &NcElement {
    type Output = NcElement;
    fn neg(self) -> NcElement {
        self.scale_re(-1.0)
    }
}

#[derive(Serialize, Deserialize)]
struct NcElementJson {
    theta: f64,
    coeffs: Vec<(i64, i64, f64, f64)>,
}

impl Serialize for NcElement {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        NcElementJson {
            theta: self.theta.0,
            coeffs: self.coeffs.iter().map(|(&(m, n), c)| (m as i64, n as i64, c.re, c.im)).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for NcElement {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = NcElementJson::deserialize(d)?;
        let theta = DeformationAngle::new(raw.theta).map_err(serde::de::Error::custom)?;
        let mut coeffs = Vec::with_capacity(raw.coeffs.len());
        for (m, n, re, im) in raw.coeffs {
            let m = i32::try_from(m).map_err(serde::de::Error::custom)?;
            let n = i32::try_from(n).map_err(serde::de::Error::custom)?;
            coeffs.push(((m, n), C64::new(re, im)));
        }
        Ok(NcElement::from_coeffs(theta, coeffs))
    }
}

/// Result of [`exp_selfadjoint`]: the element and the l1 change between
/// pads `pad` and `pad - 1`.
#[derive(Debug, Clone)]
pub struct ExpResult {
    pub element: NcElement,
    pub convergence: f64,
}

/// `e^{scale h}` for selfadjoint `h`, from the vacuum column of the matrix
/// exponential of the left-multiplication finite section on the window of
/// radius `h.bandwidth + pad`.
pub fn exp_selfadjoint(h: &NcElement, scale: f64, pad: u32) -> Result<ExpResult> {
    exp_selfadjoint_with(h, scale, pad, EXP_TOL)
}

pub fn exp_selfadjoint_with(h: &NcElement, scale: f64, pad: u32, tol: f64) -> Result<ExpResult> {
    let defect = h.selfadjoint_defect();
    if defect > 1e-10 {
        return Err(Error::NotSelfadjoint(defect));
    }
    let element = exp_on_window(h, scale, h.bandwidth + pad);
    let convergence = if pad == 0 {
        element.max_abs()
    } else {
        let coarse = exp_on_window(h, scale, h.bandwidth + pad - 1);
        (&element - &coarse).l1_norm()
    };
    if convergence > tol {
        return Err(Error::ExpNotConverged { metric: convergence, tol });
    }
    Ok(ExpResult { element, convergence })
}

fn exp_on_window(h: &NcElement, scale: f64, radius: u32) -> NcElement {
    let window = BasisWindow::new(radius);
    let mut v0 = vec![ZERO; window.dim()];
    v0[window.vacuum()] = ONE;
    let out = linalg::lanczos_expv(|x, y| h.left_apply(&window, x, y), &v0, scale, 1e-17, 400);
    let coeffs = out
        .iter()
        .enumerate()
        .filter(|(_, c)| c.norm() > 1e-300)
        .map(|(i, &c)| (window.index_to_pair(i), c))
        .collect();
    NcElement::from_map(h.theta, radius, coeffs)
}

/// Inverse by a Neumann series around the scalar `c = l1 norm`: for positive `a`,
/// `a^{-1} = c^{-1} sum_j (1 - a/c)^j`. Intermediate powers are truncated to
/// the box of radius `cap` and coefficients below `1e-18` are pruned.
pub fn inverse_neumann(a: &NcElement, cap: u32, tol: f64, max_terms: usize) -> Result<NcElement> {
    let theta = a.theta;
    let c = a.l1_norm();
    if c == 0.0 {
        return Err(Error::InvalidArgument("cannot invert zero".into()));
    }
    let one = NcElement::one(theta);
    let x = &one - &a.scale_re(1.0 / c);
    let mut term = one.clone();
    let mut sum = one;
    for _ in 0..max_terms {
        term = term.mul(&x)?.truncate(cap).0.prune(1e-18);
        let size = term.l1_norm();
        sum = &sum + &term;
        if size < tol {
            return Ok(sum.scale_re(1.0 / c).truncate(cap).0);
        }
    }
    Err(Error::NeumannNotConverged(max_terms))
}

/// Conformal data: `tau`, a selfadjoint `h`, and cached exponentials
/// `k = e^{h/2}`, `k^{-2} = e^{-h}` and `e^{h}`.
#[derive(Debug, Clone)]
pub struct ConformalData {
    pub tau: ModuliPoint,
    pub h: NcElement,
    pub k: NcElement,
    pub k_inv2: NcElement,
    exp_h: NcElement,
    pub pad: u32,
}

impl ConformalData {
    pub fn new(tau: ModuliPoint, h: NcElement, pad: u32) -> Result<Self> {
        Self::with_tolerance(tau, h, pad, EXP_TOL)
    }

    pub fn with_tolerance(tau: ModuliPoint, h: NcElement, pad: u32, tol: f64) -> Result<Self> {
        let prune = 1e-20;
        let k = exp_selfadjoint_with(&h, 0.5, pad, tol)?.element.prune(prune).tighten();
        let k_inv2 = exp_selfadjoint_with(&h, -1.0, pad, tol)?.element.prune(prune).tighten();
        let exp_h = exp_selfadjoint_with(&h, 1.0, pad, tol)?.element.prune(prune).tighten();
        // coefficients this small cannot move the defect past tol
        let small = |x: &NcElement| x.prune(1e-17 * x.max_abs());
        let check = small(&k_inv2).mul(&small(&k).mul(&small(&k))?)?;
        let defect = check.max_diff(&NcElement::one(h.theta));
        if defect > tol {
            return Err(Error::InconsistentWeylFactor(defect));
        }
        Ok(Self { tau, h, k, k_inv2, exp_h, pad })
    }

    /// Flat metric: `h = 0`.
    pub fn flat(theta: DeformationAngle, tau: ModuliPoint) -> Self {
        let one = NcElement::one(theta);
        Self {
            tau,
            h: NcElement::zero(theta),
            k: one.clone(),
            k_inv2: one.clone(),
            exp_h: one,
            pad: 0,
        }
    }

    pub fn theta(&self) -> DeformationAngle {
        self.h.theta
    }

    /// `k^2`.
    pub fn k2(&self) -> NcElement {
        self.k.mul(&self.k).expect("k shares theta with itself").prune(1e-20).tighten()
    }

    pub fn exp_h(&self) -> &NcElement {
        &self.exp_h
    }

    /// `phi(a) = t(a e^{-h})`.
    pub fn phi(&self, a: &NcElement) -> Result<C64> {
        a.trace_of_product(&self.k_inv2)
    }

    /// Modular operator `Delta(a) = e^{-h} a e^{h}`.
    pub fn modular(&self, a: &NcElement) -> Result<NcElement> {
        self.k_inv2.mul(a)?.mul(&self.exp_h)
    }
}

/// The element `c (U^m V^n + (U^m V^n)^*)`, selfadjoint for real `c`.
pub fn hermitian_pair(theta: DeformationAngle, m: i32, n: i32, c: f64) -> NcElement {
    let x = NcElement::monomial(m, n, C64::new(c, 0.0), theta);
    &x + &x.adjoint()
}

/// `(lower, upper)` bounds on the C*-norm: the largest singular value of the
/// left-multiplication finite section on `window`, and the l1 norm.
pub fn norm_bounds(a: &NcElement, window: u32) -> (f64, f64) {
    let op = crate::gns::left_mult_matrix(a, &BasisWindow::new(window));
    let lower = op
        .blocks()
        .into_iter()
        .map(|idx| linalg::singular_values(op.dense_block(&idx)).first().copied().unwrap_or(0.0))
        .fold(0.0, f64::max);
    (lower, a.l1_norm())
}
