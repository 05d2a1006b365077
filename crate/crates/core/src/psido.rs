//! Classical pseudodifferential symbols on the noncommutative torus.
//!
//! A [`GradedSymbol`] stores each positively homogeneous component in polar
//! form: the value at `xi = r (cos phi, sin phi)` is
//! `sum_d r^d sum_w e^{i w phi} c_{d,w}` with algebra-valued `c_{d,w}`.
//! Differentiation in `xi` acts exactly on `r^d e^{i w phi}`, so composition
//! and adjoints truncated at a fixed order are finite exact computations, up
//! to the winding cutoff.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::algebra::{DeformationAngle, ModuliPoint, NcElement};
use crate::error::{Error, Result};
use crate::gns::{left_mult_matrix, BasisWindow, FiniteSectionOperator};
use crate::linalg::{self, C64, ONE, ZERO};

pub const DEFAULT_WINDING_CUTOFF: i32 = 32;
/// Layers retained below the leading one by default.
pub const DEFAULT_LAYERS_BELOW: i32 = 3;
/// Discarded angular mass above which [`classicalize_resolvent`] refuses to
/// return a truncated expansion.
pub const WINDING_TAIL_TOL: f64 = 1e-3;

/// Closed form attached to a symbol, used verbatim by [`apply_op`].
#[derive(Debug, Clone, PartialEq)]
pub enum ExactForm {
    /// `coeff * (c0 + Q(xi))^{-1}`.
    QuadraticResolvent { c0: f64, tau: ModuliPoint, coeff: NcElement },
}

impl ExactForm {
    fn value_at(&self, x: f64, y: f64) -> Option<NcElement> {
        match self {
            ExactForm::QuadraticResolvent { c0, tau, coeff } => {
                let denom = c0 + tau.q(x, y);
                (denom != 0.0).then(|| coeff.scale_re(1.0 / denom))
            }
        }
    }
}

/// How negative-order layers are evaluated at `xi = 0` when no exact form
/// is attached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OriginPolicy {
    /// Map the origin mode to zero and report it.
    #[default]
    ZeroAndReport,
    /// Fail with [`Error::OriginSingularity`].
    Reject,
}

/// Classical symbol as `{degree -> {winding -> coefficient}}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradedSymbol {
    theta: DeformationAngle,
    top_order: i32,
    depth: u32,
    layers: BTreeMap<i32, BTreeMap<i32, NcElement>>,
    winding_cutoff: i32,
    exact: Option<ExactForm>,
    /// Accumulated l1 mass dropped by the winding cutoff.
    discarded: f64,
}

impl GradedSymbol {
    /// Empty symbol with layer slots `top_order, ..., top_order - depth + 1`.
    pub fn zero(theta: DeformationAngle, top_order: i32, depth: u32) -> Self {
        assert!(depth >= 1, "depth must be positive");
        Self {
            theta,
            top_order,
            depth,
            layers: (0..depth as i32).map(|j| (top_order - j, BTreeMap::new())).collect(),
            winding_cutoff: DEFAULT_WINDING_CUTOFF,
            exact: None,
            discarded: 0.0,
        }
    }

    /// The constant symbol `c` (order 0).
    pub fn constant(c: &NcElement) -> Self {
        let mut s = Self::zero(c.theta(), 0, 1);
        s.insert(0, 0, c.clone());
        s
    }

    /// The scalar symbol `|xi|^d`.
    pub fn radial_power(theta: DeformationAngle, d: i32) -> Self {
        let mut s = Self::zero(theta, d, 1);
        s.insert(d, 0, NcElement::one(theta));
        s
    }

    pub fn with_winding_cutoff(mut self, w: i32) -> Self {
        self.winding_cutoff = w;
        self.apply_cutoff();
        self
    }

    pub fn with_exact(mut self, exact: ExactForm) -> Self {
        self.exact = Some(exact);
        self
    }

    pub fn without_exact(mut self) -> Self {
        self.exact = None;
        self
    }

    pub fn theta(&self) -> DeformationAngle {
        self.theta
    }

    pub fn top_order(&self) -> i32 {
        self.top_order
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn min_order(&self) -> i32 {
        self.top_order - self.depth as i32 + 1
    }

    pub fn winding_cutoff(&self) -> i32 {
        self.winding_cutoff
    }

    pub fn exact(&self) -> Option<&ExactForm> {
        self.exact.as_ref()
    }

    pub fn discarded_mass(&self) -> f64 {
        self.discarded
    }

    pub fn layer(&self, d: i32) -> Option<&BTreeMap<i32, NcElement>> {
        self.layers.get(&d)
    }

    pub fn layers(&self) -> impl Iterator<Item = (i32, &BTreeMap<i32, NcElement>)> {
        self.layers.iter().rev().map(|(&d, l)| (d, l))
    }

    pub fn coeff(&self, d: i32, w: i32) -> NcElement {
        self.layers
            .get(&d)
            .and_then(|l| l.get(&w))
            .cloned()
            .unwrap_or_else(|| NcElement::zero(self.theta))
    }

    /// Adds `c` to the coefficient of `r^d e^{i w phi}`. Degrees outside the
    /// layer range are ignored.
    pub fn insert(&mut self, d: i32, w: i32, c: NcElement) {
        if d > self.top_order || d < self.min_order() {
            return;
        }
        if w.abs() > self.winding_cutoff {
            self.discarded += c.l1_norm();
            return;
        }
        let layer = self.layers.entry(d).or_default();
        match layer.get_mut(&w) {
            Some(existing) => *existing = &*existing + &c,
            None => {
                layer.insert(w, c);
            }
        }
    }

    fn apply_cutoff(&mut self) {
        let w = self.winding_cutoff;
        for layer in self.layers.values_mut() {
            let dropped: Vec<i32> = layer.keys().copied().filter(|k| k.abs() > w).collect();
            for k in dropped {
                self.discarded += layer.remove(&k).map(|c| c.l1_norm()).unwrap_or(0.0);
            }
        }
    }

    fn empty_like(&self, top_order: i32, depth: u32) -> Self {
        let mut s = Self::zero(self.theta, top_order, depth);
        s.winding_cutoff = self.winding_cutoff;
        s.discarded = self.discarded;
        s
    }

    /// All `(degree, winding, coefficient)` triples.
    pub fn terms(&self) -> impl Iterator<Item = (i32, i32, &NcElement)> {
        self.layers.iter().flat_map(|(&d, l)| l.iter().map(move |(&w, c)| (d, w, c)))
    }

    /// Largest coefficient magnitude over all layers.
    pub fn max_abs(&self) -> f64 {
        self.terms().map(|(_, _, c)| c.max_abs()).fold(0.0, f64::max)
    }

    /// Largest coefficient magnitude in layer `d`.
    pub fn layer_max_abs(&self, d: i32) -> f64 {
        self.layers.get(&d).map(|l| l.values().map(NcElement::max_abs).fold(0.0, f64::max)).unwrap_or(0.0)
    }

    /// Sum; the layer range is the union of both ranges.
    pub fn add(&self, other: &Self) -> Self {
        let top = self.top_order.max(other.top_order);
        let min = self.min_order().min(other.min_order());
        let mut out = self.empty_like(top, (top - min + 1) as u32);
        out.winding_cutoff = self.winding_cutoff.max(other.winding_cutoff);
        out.discarded = self.discarded + other.discarded;
        for (d, w, c) in self.terms().chain(other.terms()) {
            out.insert(d, w, c.clone());
        }
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(C64::new(-1.0, 0.0)))
    }

    pub fn scale(&self, c: C64) -> Self {
        let mut out = self.empty_like(self.top_order, self.depth);
        for (d, w, x) in self.terms() {
            out.insert(d, w, x.scale(c));
        }
        out.exact = self.exact.as_ref().map(|ExactForm::QuadraticResolvent { c0, tau, coeff }| {
            ExactForm::QuadraticResolvent { c0: *c0, tau: *tau, coeff: coeff.scale(c) }
        });
        out
    }

    /// Drops layers below `order`.
    pub fn truncate_below(&self, order: i32) -> Self {
        let depth = (self.top_order - order + 1).max(1) as u32;
        let mut out = self.empty_like(self.top_order, depth);
        for (d, w, c) in self.terms() {
            out.insert(d, w, c.clone());
        }
        out
    }

    /// Pointwise product `rho(xi) rho'(xi)`, retaining degrees `>= cutoff`.
    pub fn product(&self, other: &Self, cutoff: i32) -> Result<Self> {
        let top = self.top_order + other.top_order;
        let depth = (top - cutoff + 1).max(1) as u32;
        let mut out = self.empty_like(top, depth);
        out.winding_cutoff = self.winding_cutoff.min(other.winding_cutoff);
        out.discarded = self.discarded + other.discarded;
        for (d1, w1, a) in self.terms() {
            for (d2, w2, b) in other.terms() {
                if d1 + d2 < cutoff {
                    continue;
                }
                out.insert(d1 + d2, w1 + w2, a.mul(b)?);
            }
        }
        Ok(out)
    }

    /// `c * rho(xi)` for an algebra element `c`.
    pub fn left_mul(&self, c: &NcElement) -> Result<Self> {
        let mut out = self.empty_like(self.top_order, self.depth);
        for (d, w, x) in self.terms() {
            out.insert(d, w, c.mul(x)?);
        }
        out.exact = match &self.exact {
            Some(ExactForm::QuadraticResolvent { c0, tau, coeff }) => {
                Some(ExactForm::QuadraticResolvent { c0: *c0, tau: *tau, coeff: c.mul(coeff)? })
            }
            None => None,
        };
        Ok(out)
    }

    /// `delta_1^{j1} delta_2^{j2}` applied to every coefficient.
    pub fn delta_pow(&self, j1: u32, j2: u32) -> Self {
        let mut out = self.empty_like(self.top_order, self.depth);
        for (d, w, c) in self.terms() {
            out.insert(d, w, c.delta_pow(j1, j2));
        }
        out
    }

    /// Exact `d/d xi_axis`: every degree drops by one and windings spread by one.
    pub fn xi_derivative(&self, axis: u8) -> Result<Self> {
        let i = C64::new(0.0, 1.0);
        let (up, down) = match axis {
            // multipliers of e^{i(w+1)phi} and e^{i(w-1)phi}, per unit (d -/+ w)/2
            1 => (ONE, ONE),
            2 => (-i, i),
            other => return Err(Error::InvalidAxis(other)),
        };
        let mut out = self.empty_like(self.top_order - 1, self.depth);
        for (d, w, c) in self.terms() {
            let a = (d - w) as f64 / 2.0;
            let b = (d + w) as f64 / 2.0;
            if a != 0.0 {
                out.insert(d - 1, w + 1, c.scale(up * a));
            }
            if b != 0.0 {
                out.insert(d - 1, w - 1, c.scale(down * b));
            }
        }
        Ok(out)
    }

    fn xi_derivative_pow(&self, l1: u32, l2: u32) -> Result<Self> {
        let mut s = self.clone();
        for _ in 0..l1 {
            s = s.xi_derivative(1)?;
        }
        for _ in 0..l2 {
            s = s.xi_derivative(2)?;
        }
        Ok(s)
    }

    /// Pointwise adjoint `rho(xi)^*`.
    pub fn pointwise_adjoint(&self) -> Self {
        let mut out = self.empty_like(self.top_order, self.depth);
        for (d, w, c) in self.terms() {
            out.insert(d, -w, c.adjoint());
        }
        out
    }

    /// Value at `xi = r (cos phi, sin phi)`, `r > 0`.
    pub fn eval_polar(&self, r: f64, phi: f64) -> NcElement {
        let mut acc = NcElement::zero(self.theta);
        for (d, w, c) in self.terms() {
            acc = &acc + &c.scale(C64::from_polar(r.powi(d), w as f64 * phi));
        }
        acc
    }

    /// Value at integer frequency `(m, n)` following the origin policy. The
    /// flag reports whether the origin was regularized.
    pub fn eval_at(&self, m: i32, n: i32, policy: OriginPolicy) -> Result<(NcElement, bool)> {
        let (x, y) = (m as f64, n as f64);
        if let Some(exact) = &self.exact {
            if let Some(v) = exact.value_at(x, y) {
                return Ok((v, false));
            }
        }
        if m != 0 || n != 0 {
            return Ok((self.eval_polar(x.hypot(y), y.atan2(x)), false));
        }
        let singular = self.terms().any(|(d, _, c)| d < 0 && c.max_abs() > 0.0);
        if singular && policy == OriginPolicy::Reject {
            return Err(Error::OriginSingularity);
        }
        Ok((self.coeff(0, 0), singular))
    }

    /// Order of the leading layer that actually carries coefficients.
    pub fn principal_layer(&self) -> Option<i32> {
        self.layers.iter().rev().find(|(_, l)| l.values().any(|c| c.max_abs() > 0.0)).map(|(&d, _)| d)
    }
}

impl fmt::Display for GradedSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "symbol of order {} ({} layers)", self.top_order, self.depth)?;
        for (d, layer) in self.layers() {
            if layer.is_empty() {
                writeln!(f, "  |xi|^{d}: 0")?;
                continue;
            }
            writeln!(f, "  |xi|^{d} * [")?;
            for (w, c) in layer {
                let terms: Vec<String> = c
                    .iter()
                    .filter(|(_, v)| v.norm() > 1e-14)
                    .map(|((m, n), v)| format!("({:.6}{:+.6}i) U^{m}V^{n}", v.re, v.im))
                    .collect();
                let body = if terms.is_empty() { "0".to_string() } else { terms.join(" + ") };
                writeln!(f, "    e^{{{w}i phi}}: {body}")?;
            }
            writeln!(f, "  ]")?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct GradedSymbolJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    theta: Option<f64>,
    top_order: i32,
    layers: BTreeMap<String, BTreeMap<String, NcElement>>,
}

impl Serialize for GradedSymbol {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        // numeric order, not string order, for readability; keys stay strings
        let layers = self
            .layers
            .iter()
            .map(|(d, l)| (d.to_string(), l.iter().map(|(w, c)| (w.to_string(), c.clone())).collect()))
            .collect();
        GradedSymbolJson { theta: Some(self.theta.value()), top_order: self.top_order, layers }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for GradedSymbol {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let raw = GradedSymbolJson::deserialize(d)?;
        let mut parsed: Vec<(i32, i32, NcElement)> = Vec::new();
        let mut min_order = raw.top_order;
        for (ds, layer) in &raw.layers {
            let deg: i32 = ds.parse().map_err(D::Error::custom)?;
            if deg > raw.top_order {
                return Err(D::Error::custom(format!("layer {deg} above top_order {}", raw.top_order)));
            }
            min_order = min_order.min(deg);
            for (ws, c) in layer {
                let w: i32 = ws.parse().map_err(D::Error::custom)?;
                parsed.push((deg, w, c.clone()));
            }
        }
        let theta = match raw.theta {
            Some(t) => DeformationAngle::new(t).map_err(D::Error::custom)?,
            None => parsed.first().map(|p| p.2.theta()).ok_or_else(|| D::Error::custom("missing theta"))?,
        };
        let max_w = parsed.iter().map(|p| p.1.abs()).max().unwrap_or(0);
        let mut s = GradedSymbol::zero(theta, raw.top_order, (raw.top_order - min_order + 1) as u32);
        s.winding_cutoff = s.winding_cutoff.max(max_w);
        for (deg, w, c) in parsed {
            if c.theta() != theta {
                return Err(D::Error::custom("mixed deformation angles"));
            }
            s.insert(deg, w, c);
        }
        Ok(s)
    }
}

/// Symbol `sum a_{j1,j2} xi_1^{j1} xi_2^{j2}` of a differential operator
/// `sum a_{j1,j2} delta_1^{j1} delta_2^{j2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolySymbol {
    theta: DeformationAngle,
    monomials: BTreeMap<(u32, u32), NcElement>,
}

impl PolySymbol {
    pub fn new(theta: DeformationAngle) -> Self {
        Self { theta, monomials: BTreeMap::new() }
    }

    /// Adds `a xi_1^{j1} xi_2^{j2}`.
    pub fn with_term(mut self, j1: u32, j2: u32, a: NcElement) -> Self {
        self.add_term(j1, j2, a);
        self
    }

    pub fn add_term(&mut self, j1: u32, j2: u32, a: NcElement) {
        match self.monomials.get_mut(&(j1, j2)) {
            Some(x) => *x = &*x + &a,
            None => {
                self.monomials.insert((j1, j2), a);
            }
        }
    }

    /// `a delta_axis`.
    pub fn derivation(axis: u8, a: &NcElement) -> Self {
        let (j1, j2) = if axis == 1 { (1, 0) } else { (0, 1) };
        Self::new(a.theta()).with_term(j1, j2, a.clone())
    }

    /// Multiplication by `a` (order 0).
    pub fn multiplication(a: &NcElement) -> Self {
        Self::new(a.theta()).with_term(0, 0, a.clone())
    }

    /// `delta_1^2 + 2 Re(tau) delta_1 delta_2 + |tau|^2 delta_2^2`.
    pub fn flat_laplacian(theta: DeformationAngle, tau: ModuliPoint) -> Self {
        let [a, b, c] = tau.quadratic_form();
        let s = |x: f64| NcElement::scalar(theta, C64::new(x, 0.0));
        Self::new(theta).with_term(2, 0, s(a)).with_term(1, 1, s(b)).with_term(0, 2, s(c))
    }

    pub fn order(&self) -> u32 {
        self.monomials.keys().map(|(a, b)| a + b).max().unwrap_or(0)
    }

    pub fn monomials(&self) -> impl Iterator<Item = ((u32, u32), &NcElement)> {
        self.monomials.iter().map(|(&k, v)| (k, v))
    }

    /// Exact polar expansion. The graded symbol spans all degrees from the
    /// order down to 0.
    pub fn to_graded(&self) -> GradedSymbol {
        let top = self.order() as i32;
        let mut s = GradedSymbol::zero(self.theta, top, (top + 1) as u32);
        for (&(j1, j2), a) in &self.monomials {
            for (w, c) in trig_monomial(j1, j2) {
                s.insert((j1 + j2) as i32, w, a.scale(c));
            }
        }
        s
    }

    /// `P(U^m V^n) = (sum a_j m^{j1} n^{j2}) U^m V^n`, extended linearly.
    pub fn apply(&self, x: &NcElement) -> Result<NcElement> {
        let mut out = NcElement::zero(self.theta);
        for ((m, n), c) in x.iter() {
            let mono = NcElement::monomial(m, n, c, self.theta);
            for (&(j1, j2), a) in &self.monomials {
                let w = (m as f64).powi(j1 as i32) * (n as f64).powi(j2 as i32);
                if w != 0.0 {
                    out = &out + &a.mul(&mono)?.scale_re(w);
                }
            }
        }
        Ok(out)
    }
}

/// Fourier coefficients of `cos^{j1}(phi) sin^{j2}(phi)`.
fn trig_monomial(j1: u32, j2: u32) -> BTreeMap<i32, C64> {
    let mut out: BTreeMap<i32, C64> = BTreeMap::new();
    let norm = C64::new(2f64.powi(j1 as i32), 0.0) * C64::new(0.0, 2.0).powu(j2);
    for a in 0..=j1 {
        for b in 0..=j2 {
            let w = (2 * a as i32 - j1 as i32) + (2 * b as i32 - j2 as i32);
            let sign = if (j2 - b) % 2 == 0 { 1.0 } else { -1.0 };
            let c = binomial(j1, a) * binomial(j2, b) * sign;
            *out.entry(w).or_insert(ZERO) += C64::new(c, 0.0) / norm;
        }
    }
    out.retain(|_, c| c.norm() > 0.0);
    out
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(n: u32) -> f64 {
    (1..=n).fold(1.0, |acc, i| acc * i as f64)
}

fn check_cutoff(p: &GradedSymbol, q: &GradedSymbol, order_cutoff: i32) -> Result<()> {
    if p.theta != q.theta {
        return Err(Error::ThetaMismatch(p.theta.value(), q.theta.value()));
    }
    if order_cutoff > p.top_order + q.top_order {
        return Err(Error::InvalidArgument(format!(
            "order cutoff {order_cutoff} above total order {}",
            p.top_order + q.top_order
        )));
    }
    Ok(())
}

/// Symbol of the product `P Q`:
/// `sum_{l1,l2} (l1! l2!)^{-1} d_1^{l1} d_2^{l2} p * delta_1^{l1} delta_2^{l2} q`,
/// keeping every homogeneous term of order `>= order_cutoff`.
pub fn compose(p: &GradedSymbol, q: &GradedSymbol, order_cutoff: i32) -> Result<GradedSymbol> {
    check_cutoff(p, q, order_cutoff)?;
    let top = p.top_order + q.top_order;
    let span = (top - order_cutoff) as u32;
    let mut out = GradedSymbol::zero(p.theta, top, span + 1);
    out.winding_cutoff = p.winding_cutoff.min(q.winding_cutoff);
    out.discarded = p.discarded + q.discarded;
    for l1 in 0..=span {
        for l2 in 0..=(span - l1) {
            let dp = p.xi_derivative_pow(l1, l2)?;
            let dq = q.delta_pow(l1, l2);
            let term = dp.product(&dq, order_cutoff)?;
            let w = 1.0 / (factorial(l1) * factorial(l2));
            out = out.add(&term.scale(C64::new(w, 0.0))).truncate_below(order_cutoff);
            // add() keeps the wider range; restore the nominal top
            out = reslot(out, top, span + 1);
        }
    }
    Ok(out)
}

fn reslot(s: GradedSymbol, top: i32, depth: u32) -> GradedSymbol {
    let mut out = GradedSymbol::zero(s.theta, top, depth);
    out.winding_cutoff = s.winding_cutoff;
    out.discarded = s.discarded;
    for (d, w, c) in s.terms() {
        out.insert(d, w, c.clone());
    }
    out
}

/// Symbol of the formal adjoint:
/// `sum (l1! l2!)^{-1} d_1^{l1} d_2^{l2} delta_1^{l1} delta_2^{l2} (rho^*)`.
pub fn adjoint_symbol(p: &GradedSymbol, order_cutoff: i32) -> Result<GradedSymbol> {
    if order_cutoff > p.top_order {
        return Err(Error::InvalidArgument(format!("order cutoff {order_cutoff} above order {}", p.top_order)));
    }
    let star = p.pointwise_adjoint();
    let span = (p.top_order - order_cutoff) as u32;
    let mut out = GradedSymbol::zero(p.theta, p.top_order, span + 1);
    out.winding_cutoff = p.winding_cutoff;
    out.discarded = p.discarded;
    for l1 in 0..=span {
        for l2 in 0..=(span - l1) {
            let term = star.delta_pow(l1, l2).xi_derivative_pow(l1, l2)?;
            let w = 1.0 / (factorial(l1) * factorial(l2));
            out = reslot(out.add(&term.scale(C64::new(w, 0.0))), p.top_order, span + 1);
        }
    }
    Ok(out)
}

/// `P_rho(a)`; on monomials `P_rho(U^m V^n) = rho(m, n) U^m V^n`. Returns the
/// image and whether the origin mode was regularized.
pub fn apply_op(p: &GradedSymbol, a: &NcElement, policy: OriginPolicy) -> Result<(NcElement, bool)> {
    let mut out = NcElement::zero(p.theta);
    let mut regularized = false;
    for ((m, n), c) in a.iter() {
        let (value, reg) = p.eval_at(m, n, policy)?;
        regularized |= reg;
        out = &out + &value.mul(&NcElement::monomial(m, n, c, p.theta))?;
    }
    Ok((out, regularized))
}

/// Finite section of `P_rho`: column `(m, n)` is `P_rho(U^m V^n)` clipped to
/// the window. Also reports whether the origin was regularized.
pub fn finite_section_of_op(
    p: &GradedSymbol,
    w: &BasisWindow,
    policy: OriginPolicy,
) -> Result<(FiniteSectionOperator, bool)> {
    let mut values = Vec::with_capacity(w.dim());
    let mut regularized = false;
    for (m, n) in w.pairs() {
        let (v, reg) = p.eval_at(m, n, policy)?;
        regularized |= reg;
        values.push(v);
    }
    let theta = p.theta;
    let op = FiniteSectionOperator::from_columns(*w, |j| {
        let (m, n) = w.index_to_pair(j);
        values[j]
            .iter()
            .filter(|&((a, b), c)| c != ZERO && w.contains(m + a, n + b))
            .map(|((a, b), c)| (w.pair_to_index(m + a, n + b), c * theta.twist(b as i64 * m as i64)))
            .collect()
    });
    Ok((op, regularized))
}

/// Finite section of a differential operator.
pub fn finite_section_of_poly(p: &PolySymbol, w: &BasisWindow) -> FiniteSectionOperator {
    let theta = p.theta;
    FiniteSectionOperator::from_columns(*w, |j| {
        let (m, n) = w.index_to_pair(j);
        let mut out = Vec::new();
        for (&(j1, j2), a) in &p.monomials {
            let s = (m as f64).powi(j1 as i32) * (n as f64).powi(j2 as i32);
            if s == 0.0 {
                continue;
            }
            for ((x, y), c) in a.iter() {
                if w.contains(m + x, n + y) {
                    out.push((w.pair_to_index(m + x, n + y), c * s * theta.twist(y as i64 * m as i64)));
                }
            }
        }
        out
    })
}

/// Classical expansion of `(c0 + Q(xi))^{-1}`: layers
/// `(-1)^j c0^j Q^{-1-j}` for `j < depth`, each expanded in windings.
/// The exact rational symbol is attached for [`apply_op`].
pub fn classicalize_resolvent(
    theta: DeformationAngle,
    c0: f64,
    tau: ModuliPoint,
    depth: u32,
    winding_cutoff: i32,
) -> Result<GradedSymbol> {
    if depth == 0 {
        return Err(Error::InvalidArgument("depth must be at least 1".into()));
    }
    let mut s = GradedSymbol::zero(theta, -2, 2 * depth - 1);
    s.winding_cutoff = winding_cutoff;
    let round = tau.tau_re == 0.0 && tau.tau_im == 1.0;
    for j in 0..depth {
        let scale = (-1f64).powi(j as i32) * c0.powi(j as i32);
        let d = -2 - 2 * j as i32;
        if round {
            s.insert(d, 0, NcElement::scalar(theta, C64::new(scale, 0.0)));
            continue;
        }
        let f = |phi: f64| tau.q(phi.cos(), phi.sin()).powi(-1 - j as i32);
        let (coeffs, tail) = angular_fourier(f, winding_cutoff);
        if tail > WINDING_TAIL_TOL {
            return Err(Error::WindingCutoff(tail));
        }
        s.discarded += tail * c0.abs().powi(j as i32);
        for (w, c) in coeffs {
            if c.norm() > 1e-17 {
                s.insert(d, w, NcElement::scalar(theta, c * scale));
            }
        }
    }
    Ok(s.with_exact(ExactForm::QuadraticResolvent { c0, tau, coeff: NcElement::one(theta) }))
}

/// Fourier coefficients `|w| <= cutoff` of a smooth function on the circle by
/// equispaced quadrature, with the l1 mass found at windings beyond the cutoff.
pub fn angular_fourier(f: impl Fn(f64) -> f64, cutoff: i32) -> (BTreeMap<i32, C64>, f64) {
    let samples = (8 * cutoff.max(8) as usize).next_power_of_two();
    let values: Vec<f64> = (0..samples).map(|k| f(2.0 * PI * k as f64 / samples as f64)).collect();
    let coeff = |w: i32| -> C64 {
        let terms: Vec<C64> = values
            .iter()
            .enumerate()
            .map(|(k, &v)| C64::from_polar(v, -2.0 * PI * w as f64 * k as f64 / samples as f64))
            .collect();
        linalg::pairwise_sum(&terms) / samples as f64
    };
    let kept = (-cutoff..=cutoff).map(|w| (w, coeff(w))).collect();
    let half = samples as i32 / 2;
    let tail = ((cutoff + 1)..half).map(|w| coeff(w).norm() + coeff(-w).norm()).sum();
    (kept, tail)
}

/// `res(P_rho) = integral over the unit circle of t(rho_{-2})`, i.e.
/// `2 pi t(c_{-2,0})`.
pub fn residue(p: &GradedSymbol) -> C64 {
    p.layer(-2).and_then(|l| l.get(&0)).map(|c| c.trace() * (2.0 * PI)).unwrap_or(ZERO)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Elliptic,
    Degenerate,
    Inconclusive,
}

#[derive(Debug, Clone, Serialize)]
pub struct EllipticityReport {
    pub verdict: Verdict,
    /// Empirical `sup_dir |rho(xi)^{-1}| (1 + |xi|)^n` in the large-`|xi|` limit.
    pub constant: f64,
    pub min_singular_value: f64,
    pub directions: usize,
}

/// Samples the principal layer on `grid` directions and tests invertibility of
/// its left-multiplication finite section on `window` (and half of it).
pub fn ellipticity_check(p: &GradedSymbol, grid: usize, window: u32) -> EllipticityReport {
    let tol = 1e-10;
    let Some(d) = p.principal_layer() else {
        return EllipticityReport { verdict: Verdict::Degenerate, constant: f64::INFINITY, min_singular_value: 0.0, directions: grid };
    };
    let principal = p.truncate_below(d);
    let smin = |phi: f64, win: u32| -> f64 {
        let value = principal.eval_polar(1.0, phi);
        let op = left_mult_matrix(&value, &BasisWindow::new(win));
        op.blocks()
            .into_iter()
            .map(|b| linalg::singular_values(op.dense_block(&b)).last().copied().unwrap_or(0.0))
            .fold(f64::INFINITY, f64::min)
    };
    let mut worst: f64 = f64::INFINITY;
    let mut unstable = false;
    for k in 0..grid {
        let phi = 2.0 * PI * k as f64 / grid as f64;
        let s = smin(phi, window);
        let s_half = smin(phi, (window / 2).max(1));
        if s > tol && (s - s_half).abs() > 0.1 * s {
            unstable = true;
        }
        worst = worst.min(s);
    }
    let verdict = if worst <= tol {
        Verdict::Degenerate
    } else if unstable {
        Verdict::Inconclusive
    } else {
        Verdict::Elliptic
    };
    EllipticityReport { verdict, constant: 1.0 / worst, min_singular_value: worst, directions: grid }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{hermitian_pair, ConformalData, DEFAULT_PAD};
    use crate::gns::flat_laplacian_matrix;

    fn th() -> DeformationAngle {
        DeformationAngle::golden()
    }

    fn scalar(x: f64) -> NcElement {
        NcElement::scalar(th(), C64::new(x, 0.0))
    }

    #[test]
    fn derivative_of_radial_square() {
        // |xi|^2 -> 2 xi_1 = r (e^{i phi} + e^{-i phi})
        let s = GradedSymbol::radial_power(th(), 2);
        let d = s.xi_derivative(1).unwrap();
        assert_eq!(d.top_order(), 1);
        assert!((d.coeff(1, 1).trace() - ONE).norm() < 1e-15);
        assert!((d.coeff(1, -1).trace() - ONE).norm() < 1e-15);
        let c = GradedSymbol::constant(&scalar(3.0)).xi_derivative(2).unwrap();
        assert_eq!(c.max_abs(), 0.0);
    }

    #[test]
    fn derivative_matches_polynomial_route() {
        let xy = PolySymbol::new(th()).with_term(1, 1, scalar(1.0));
        let x = PolySymbol::new(th()).with_term(1, 0, scalar(1.0));
        let d = xy.to_graded().xi_derivative(2).unwrap();
        let expected = x.to_graded();
        for w in -3..=3 {
            assert!(d.coeff(1, w).max_diff(&expected.coeff(1, w)) < 1e-15, "winding {w}");
        }
    }

    #[test]
    fn compose_constant_derivations() {
        let d1 = PolySymbol::derivation(1, &scalar(1.0)).to_graded();
        let sq = compose(&d1, &d1, 0).unwrap();
        let expected = PolySymbol::new(th()).with_term(2, 0, scalar(1.0)).to_graded();
        for (d, w, c) in expected.terms() {
            assert!(sq.coeff(d, w).max_diff(c) < 1e-15);
        }
        assert!(sq.layer_max_abs(1) < 1e-15 && sq.layer_max_abs(0) < 1e-15);
    }

    #[test]
    fn compose_with_coefficients() {
        let a = &hermitian_pair(th(), 1, 0, 0.3) + &NcElement::monomial(0, 1, C64::new(0.2, 0.1), th());
        let b = &NcElement::monomial(1, 1, C64::new(-0.4, 0.0), th()) + &scalar(0.5);
        let p = PolySymbol::derivation(1, &a).to_graded();
        let q = PolySymbol::derivation(1, &b).to_graded();
        let got = compose(&p, &q, 0).unwrap();
        let expected = PolySymbol::new(th())
            .with_term(2, 0, a.mul(&b).unwrap())
            .with_term(1, 0, a.mul(&b.delta(1).unwrap()).unwrap())
            .to_graded();
        for d in 0..=2 {
            for w in -3..=3 {
                assert!(got.coeff(d, w).max_diff(&expected.coeff(d, w)) < 1e-14);
            }
        }
        // and against operator action on monomials
        let pp = PolySymbol::derivation(1, &a);
        let qq = PolySymbol::derivation(1, &b);
        for (m, n) in [(2, -1), (0, 3), (-1, -1)] {
            let x = NcElement::monomial(m, n, ONE, th());
            let direct = pp.apply(&qq.apply(&x).unwrap()).unwrap();
            let (via, _) = apply_op(&got, &x, OriginPolicy::Reject).unwrap();
            assert!(direct.max_diff(&via) < 1e-12);
        }
    }

    #[test]
    fn parametrix_leading_identity() {
        let h = hermitian_pair(th(), 1, 0, 0.4);
        for tau in [ModuliPoint::i(), ModuliPoint::new(1.0, 1.0).unwrap()] {
            let cd = ConformalData::new(tau, h.clone(), DEFAULT_PAD).unwrap();
            let a2 = PolySymbol::flat_laplacian(th(), tau).to_graded().truncate_below(2).left_mul(&cd.k2()).unwrap();
            let qinv = classicalize_resolvent(th(), 0.0, tau, 1, 96).unwrap();
            let b0 = GradedSymbol { exact: None, ..qinv }.left_mul(&cd.k_inv2).unwrap();
            let c = compose(&b0, &a2, 0).unwrap();
            let top = c.coeff(0, 0);
            assert!(top.max_diff(&NcElement::one(th())) < 1e-9);
            for w in 1..=8 {
                assert!(c.coeff(0, w).max_abs() < 1e-9 && c.coeff(0, -w).max_abs() < 1e-9);
            }
        }
    }

    #[test]
    fn adjoint_examples() {
        let c = C64::new(0.3, -0.7);
        let p = PolySymbol::derivation(1, &NcElement::scalar(th(), c)).to_graded();
        let adj = adjoint_symbol(&p, 0).unwrap();
        let expected = PolySymbol::derivation(1, &NcElement::scalar(th(), c.conj())).to_graded();
        for (d, w, x) in expected.terms() {
            assert!(adj.coeff(d, w).max_diff(x) < 1e-15);
        }
        let a = &NcElement::monomial(1, 2, C64::new(0.3, 0.2), th()) + &scalar(0.1);
        let adj = adjoint_symbol(&PolySymbol::derivation(1, &a).to_graded(), 0).unwrap();
        let astar = a.adjoint();
        let expected = PolySymbol::derivation(1, &astar)
            .with_term(0, 0, astar.delta(1).unwrap())
            .to_graded();
        for d in 0..=1 {
            for w in -2..=2 {
                assert!(adj.coeff(d, w).max_diff(&expected.coeff(d, w)) < 1e-15);
            }
        }
        let lap = PolySymbol::flat_laplacian(th(), ModuliPoint::new(0.4, 1.3).unwrap()).to_graded();
        let adj = adjoint_symbol(&lap, 0).unwrap();
        for (d, w, x) in lap.terms() {
            assert!(adj.coeff(d, w).max_diff(x) < 1e-14);
        }
    }

    #[test]
    fn apply_op_examples() {
        let d1 = PolySymbol::derivation(1, &scalar(1.0)).to_graded();
        let x = NcElement::monomial(3, -2, ONE, th());
        let (y, _) = apply_op(&d1, &x, OriginPolicy::Reject).unwrap();
        assert!((y.coeff(3, -2) - C64::new(3.0, 0.0)).norm() < 1e-13);
        let one = GradedSymbol::constant(&NcElement::one(th()));
        let a = &x + &scalar(2.0);
        assert!(apply_op(&one, &a, OriginPolicy::Reject).unwrap().0.max_diff(&a) < 1e-15);
        let res = classicalize_resolvent(th(), 1.0, ModuliPoint::i(), 3, 32).unwrap();
        for (m, n) in [(0, 0), (1, 2), (-4, 3)] {
            let e = NcElement::monomial(m, n, ONE, th());
            let (y, reg) = apply_op(&res, &e, OriginPolicy::Reject).unwrap();
            assert!(!reg);
            let expected = 1.0 / (1.0 + (m * m + n * n) as f64);
            assert!((y.coeff(m, n).re - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn origin_policy() {
        let s = GradedSymbol::radial_power(th(), -2);
        let e = NcElement::one(th());
        assert!(matches!(apply_op(&s, &e, OriginPolicy::Reject), Err(Error::OriginSingularity)));
        let (y, reg) = apply_op(&s, &e, OriginPolicy::ZeroAndReport).unwrap();
        assert!(reg && y.max_abs() == 0.0);
    }

    #[test]
    fn finite_sections_of_symbols() {
        let w = BasisWindow::new(3);
        let (id, _) = finite_section_of_op(&GradedSymbol::constant(&NcElement::one(th())), &w, OriginPolicy::Reject).unwrap();
        assert_eq!(id.nnz(), w.dim());
        let tau = ModuliPoint::new(0.5, 1.2).unwrap();
        let (lap, _) = finite_section_of_op(&PolySymbol::flat_laplacian(th(), tau).to_graded(), &w, OriginPolicy::Reject).unwrap();
        let flat = flat_laplacian_matrix(tau, &w);
        assert!(lap.max_diff_interior(&flat, 3) < 1e-12);
        let (inv, reg) = finite_section_of_op(&GradedSymbol::radial_power(th(), -2), &w, OriginPolicy::ZeroAndReport).unwrap();
        assert!(reg);
        for (i, (m, n)) in w.pairs().enumerate() {
            let expected = if (m, n) == (0, 0) { 0.0 } else { 1.0 / (m * m + n * n) as f64 };
            assert!((inv.get(i, i).re - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn resolvent_classicalization() {
        let s = classicalize_resolvent(th(), 1.0, ModuliPoint::i(), 1, 32).unwrap();
        assert_eq!(s.top_order(), -2);
        assert_eq!(s.coeff(-2, 0).trace(), ONE);
        let s2 = classicalize_resolvent(th(), 1.0, ModuliPoint::i(), 2, 32).unwrap();
        assert_eq!(s2.coeff(-4, 0).trace(), C64::new(-1.0, 0.0));
        assert_eq!(s2.layer_max_abs(-3), 0.0);
        let tau = ModuliPoint::new(1.0, 1.0).unwrap();
        let coarse = classicalize_resolvent(th(), 1.0, tau, 1, 32).unwrap();
        assert!(coarse.discarded_mass() > 1e-7 && coarse.discarded_mass() < 1e-4);
        assert!(classicalize_resolvent(th(), 1.0, tau, 1, 8).is_err());
        let s = classicalize_resolvent(th(), 1.0, tau, 1, 96).unwrap();
        assert!(s.discarded_mass() < 1e-11);
        assert!(s.coeff(-2, 2).max_abs() > 1e-3);
        assert!(s.coeff(-2, 1).max_abs() < 1e-15);
        for k in 0..97 {
            let phi = 2.0 * PI * k as f64 / 97.0;
            let v = s.eval_polar(1.0, phi).trace();
            let exact = 1.0 / tau.q(phi.cos(), phi.sin());
            assert!((v.re - exact).abs() < 1e-12 && v.im.abs() < 1e-12);
        }
    }

    #[test]
    fn residue_examples() {
        let s = classicalize_resolvent(th(), 1.0, ModuliPoint::i(), 3, 32).unwrap();
        assert!((residue(&s).re - 2.0 * PI).abs() < 1e-12);
        let s3 = GradedSymbol::radial_power(th(), -3);
        assert_eq!(residue(&s3), ZERO);
    }

    #[test]
    fn ellipticity_examples() {
        let lap = PolySymbol::flat_laplacian(th(), ModuliPoint::i()).to_graded();
        assert_eq!(ellipticity_check(&lap, 16, 4).verdict, Verdict::Elliptic);
        let zero = GradedSymbol::zero(th(), 2, 3);
        assert_eq!(ellipticity_check(&zero, 16, 4).verdict, Verdict::Degenerate);
        // xi_1^2 alone vanishes along the xi_2 axis
        let x2 = PolySymbol::new(th()).with_term(2, 0, scalar(1.0)).to_graded();
        assert_eq!(ellipticity_check(&x2, 16, 4).verdict, Verdict::Degenerate);
    }

    #[test]
    fn json_roundtrip() {
        let s = classicalize_resolvent(th(), 1.0, ModuliPoint::new(0.2, 1.1).unwrap(), 2, 16).unwrap();
        let js = serde_json::to_string(&s).unwrap();
        assert!(js.contains("\"top_order\":-2"));
        let back: GradedSymbol = serde_json::from_str(&js).unwrap();
        for (d, w, c) in s.terms() {
            assert_eq!(&back.coeff(d, w), c);
        }
        assert_eq!(back.depth(), s.depth());
    }
}
