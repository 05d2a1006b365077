//! Eigenvalue counting and Weyl-law slopes, Dixmier-trace estimates from
//! singular-value sequences, and the comparison with the residue.

use std::f64::consts::{E, PI};

use serde::Serialize;

use crate::algebra::{inverse_neumann, ConformalData, ModuliPoint};
use crate::error::{Error, Result};
use crate::gns::{left_mult_matrix, vacuum_expectation_of_inverse, BasisWindow, SpectrumResult};
use crate::linalg;
use crate::psido::{finite_section_of_op, residue, GradedSymbol, OriginPolicy};

/// Default share of the spectrum (from the top) excluded from counting.
pub const DEFAULT_CEILING_FRACTION: f64 = 0.25;
/// Default share of the largest singular values trusted by [`connes_trace_check`].
pub const DEFAULT_TRUST_FRACTION: f64 = 0.5;
/// Minimum sequence length for [`dixmier_estimate`].
pub const MIN_DIXMIER_LEN: usize = 1000;

/// Sorted eigenvalues with the ceiling below which counting is trusted.
#[derive(Debug, Clone, Serialize)]
pub struct CountingData {
    eigenvalues: Vec<f64>,
    bandwidth: u32,
    ceiling: f64,
    ceiling_rule: String,
}

impl CountingData {
    /// Sorts `eigenvalues`; `ceiling` must not exceed the largest eigenvalue.
    pub fn new(mut eigenvalues: Vec<f64>, bandwidth: u32, ceiling: f64, ceiling_rule: impl Into<String>) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::InsufficientData { need: 1, got: 0 });
        }
        eigenvalues.sort_by(f64::total_cmp);
        let top = eigenvalues[eigenvalues.len() - 1];
        if !(ceiling > 0.0) || ceiling > top {
            return Err(Error::InvalidArgument(format!("ceiling {ceiling} outside (0, {top}]")));
        }
        Ok(Self { eigenvalues, bandwidth, ceiling, ceiling_rule: ceiling_rule.into() })
    }

    /// Ceiling at `fraction` of the largest eigenvalue.
    pub fn from_spectrum(spectrum: &SpectrumResult, bandwidth: u32, fraction: f64) -> Result<Self> {
        let ceiling = fraction * spectrum.max();
        Self::new(spectrum.eigenvalues.clone(), bandwidth, ceiling, format!("{fraction} x largest eigenvalue"))
    }

    /// Ceiling for a finite section of `k L k` on the box of half-width
    /// `bandwidth`: the smaller of `fraction` of the top eigenvalue and
    /// `(N+1)^2 min Q * inf k^2`, below which no mode outside the box can
    /// contribute. `inf k^2` is bounded below by `1 / |k^{-2}|_1`.
    pub fn for_conformal(spectrum: &SpectrumResult, cd: &ConformalData, bandwidth: u32, fraction: f64) -> Result<Self> {
        let top = fraction * spectrum.max();
        let box_bound = flat_outside_bound(cd.tau, bandwidth) / cd.k_inv2.l1_norm();
        let (ceiling, rule) = if top <= box_bound {
            (top, format!("{fraction} x largest eigenvalue"))
        } else {
            (box_bound, "box edge times lower bound of k^2".to_string())
        };
        Self::new(spectrum.eigenvalues.clone(), bandwidth, ceiling, rule)
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn bandwidth(&self) -> u32 {
        self.bandwidth
    }

    pub fn ceiling(&self) -> f64 {
        self.ceiling
    }

    pub fn ceiling_rule(&self) -> &str {
        &self.ceiling_rule
    }

    /// `(lambda, N(lambda^+))` at every distinct eigenvalue up to the ceiling.
    pub fn staircase(&self) -> Vec<(f64, usize)> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for (j, &l) in self.eigenvalues.iter().enumerate() {
            if l > self.ceiling {
                break;
            }
            match out.last_mut() {
                Some(last) if last.0 == l => last.1 = j + 1,
                _ => out.push((l, j + 1)),
            }
        }
        out
    }
}

/// `#{j : lambda_j < lambda}`.
pub fn counting_function(cd: &CountingData, lambda: f64) -> Result<usize> {
    if lambda > cd.ceiling {
        return Err(Error::BeyondCeiling { lambda, ceiling: cd.ceiling });
    }
    Ok(cd.eigenvalues.partition_point(|&x| x < lambda))
}

#[derive(Debug, Clone, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
    pub window: (f64, f64),
    pub points: usize,
}

/// Number of log-spaced sample points used by [`weyl_slope`].
pub const SLOPE_POINTS: usize = 200;

/// Least-squares slope of `N(lambda)` against `lambda` on a log-spaced grid
/// over `[lo, hi]`.
pub fn weyl_slope(cd: &CountingData, window: (f64, f64)) -> Result<SlopeFit> {
    let (lo, hi) = window;
    if !(lo > 0.0) || !(hi > lo) {
        return Err(Error::EmptyWindow);
    }
    if hi > cd.ceiling {
        return Err(Error::BeyondCeiling { lambda: hi, ceiling: cd.ceiling });
    }
    let x = crate::heat::log_grid(lo, hi, SLOPE_POINTS);
    let y = x.iter().map(|&l| counting_function(cd, l).map(|n| n as f64)).collect::<Result<Vec<_>>>()?;
    let (c, se) = linalg::poly_fit(&x, &y, 1)?;
    Ok(SlopeFit { slope: c[1], stderr: se[1], intercept: c[0], window, points: x.len() })
}

#[derive(Debug, Clone, Serialize)]
pub struct WeylConstant {
    /// `pi / Im tau * t(k^{-2})`.
    pub constant: f64,
    /// `4 pi^2 / Im tau * t(k^{-2})`.
    pub volume: f64,
    /// `t(k^{-2})` from the inverse of the `k^2` finite section.
    pub trace_k_inv2: f64,
    /// `t(k^{-2})` from the Neumann series in the algebra.
    pub neumann_trace: f64,
}

/// Closed-form Weyl constant; `window` sizes the finite section used for
/// the matrix-inverse route.
pub fn weyl_constant_closed_form(cd: &ConformalData, window: BasisWindow) -> Result<WeylConstant> {
    let k2 = cd.k2();
    let t = vacuum_expectation_of_inverse(&left_mult_matrix(&k2, &window))?.re;
    let cap = window.bandwidth().max(k2.bandwidth() * 4);
    let neumann = inverse_neumann(&k2, cap, 1e-14, 20_000)?.trace().re;
    let im = cd.tau.tau_im;
    Ok(WeylConstant { constant: PI / im * t, volume: 4.0 * PI * PI / im * t, trace_k_inv2: t, neumann_trace: neumann })
}

/// `Q(m, n)` over the box `|m|, |n| <= bandwidth`, ascending.
pub fn flat_spectrum(tau: ModuliPoint, bandwidth: u32) -> Vec<f64> {
    let b = bandwidth as i32;
    let mut out: Vec<f64> = (-b..=b).flat_map(|m| (-b..=b).map(move |n| tau.q(m as f64, n as f64))).collect();
    out.sort_by(f64::total_cmp);
    out
}

/// Lower bound for `Q` on lattice points outside the box: the form restricted
/// to `|x| >= N + 1` or `|y| >= N + 1`.
pub fn flat_outside_bound(tau: ModuliPoint, bandwidth: u32) -> f64 {
    let edge = (bandwidth as f64 + 1.0).powi(2);
    let im2 = tau.tau_im * tau.tau_im;
    edge * (im2 / tau.abs_sqr()).min(im2)
}

/// Counting data for the analytic flat spectrum; the ceiling is the smaller of
/// `fraction` of the top eigenvalue and the first eigenvalue missing from the box.
pub fn flat_counting_data(tau: ModuliPoint, bandwidth: u32, fraction: f64) -> Result<CountingData> {
    let eig = flat_spectrum(tau, bandwidth);
    let top = eig[eig.len() - 1];
    let outside = flat_outside_bound(tau, bandwidth);
    let (ceiling, rule) = if fraction * top <= outside {
        (fraction * top, format!("{fraction} x largest eigenvalue"))
    } else {
        (outside, "smallest Q outside the box".to_string())
    };
    CountingData::new(eig, bandwidth, ceiling, rule)
}

/// Descending singular values with partial sums.
#[derive(Debug, Clone, Serialize)]
pub struct DixmierData {
    mu: Vec<f64>,
    partial: Vec<f64>,
}

impl DixmierData {
    /// Takes absolute values and sorts descending.
    pub fn new(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut mu: Vec<f64> = values.into_iter().map(f64::abs).collect();
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite singular value".into()));
        }
        mu.sort_by(|a, b| b.total_cmp(a));
        let mut partial = Vec::with_capacity(mu.len());
        // compensated running sum
        let (mut s, mut comp) = (0.0f64, 0.0f64);
        for &m in &mu {
            let y = m - comp;
            let t = s + y;
            comp = (t - s) - y;
            s = t;
            partial.push(s);
        }
        Ok(Self { mu, partial })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.mu
    }

    /// `Trace_N = mu_1 + ... + mu_N`.
    pub fn trace_n(&self, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else {
            self.partial[n.min(self.partial.len()) - 1]
        }
    }

    /// Piecewise affine interpolation of `Trace_N` at real `r >= 1`.
    pub fn trace_r(&self, r: f64) -> f64 {
        let lo = r.floor() as usize;
        let frac = r - lo as f64;
        self.trace_n(lo) * (1.0 - frac) + self.trace_n(lo + 1) * frac
    }

    /// `tau_L = (log L)^{-1} int_e^L Trace_r / log r dr / r`, by the
    /// trapezoidal rule in `x = log r`.
    pub fn cesaro(&self, lambda: f64) -> f64 {
        let top = lambda.ln();
        if top <= 1.0 {
            return 0.0;
        }
        let steps = 4096;
        let h = (top - 1.0) / steps as f64;
        let f = |x: f64| self.trace_r(x.exp()) / x;
        let mut s = 0.5 * (f(1.0) + f(top));
        for k in 1..steps {
            s += f(1.0 + k as f64 * h);
        }
        s * h / top
    }

    /// Slope of `Trace_N` against `log N` for `N` in `[lo, hi]`.
    pub fn log_slope(&self, lo: usize, hi: usize) -> Result<(f64, f64)> {
        let lo = lo.max(1);
        if hi <= lo + 1 {
            return Err(Error::EmptyWindow);
        }
        let grid = crate::heat::log_grid(lo as f64, hi as f64, 64);
        let mut ns: Vec<usize> = grid.iter().map(|&x| x.round() as usize).collect();
        ns.dedup();
        let x: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
        let y: Vec<f64> = ns.iter().map(|&n| self.trace_n(n)).collect();
        let (c, se) = linalg::poly_fit(&x, &y, 1)?;
        Ok((c[1], se[1]))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DixmierEstimate {
    /// Slope of `Trace_N` against `log N` over the trailing half.
    pub value: f64,
    pub stderr: f64,
    /// Relative change between the slopes on `[n/4, n/2]` and `[n/2, n]`.
    pub drift: f64,
    /// Slope on `[n/4, n/2]`.
    pub previous_value: f64,
    /// Cesaro mean `tau_n`.
    pub cesaro: f64,
    /// `Trace_n / log n`.
    pub log_mean: f64,
    /// Set when the slope is negligible against `Trace_n / log n`, or is
    /// still falling by more than [`VANISHING_DRIFT`] per doubling.
    pub vanishing: bool,
    pub count: usize,
}

/// Slope below which the estimate is reported as vanishing, relative to `Trace_n / log n`.
pub const VANISHING_RATIO: f64 = 0.05;
/// Relative decrease between consecutive dyadic windows that marks a decaying slope.
pub const VANISHING_DRIFT: f64 = 0.25;

pub fn dixmier_estimate(dd: &DixmierData) -> Result<DixmierEstimate> {
    let n = dd.len();
    if n < MIN_DIXMIER_LEN {
        return Err(Error::InsufficientData { need: MIN_DIXMIER_LEN, got: n });
    }
    let (value, stderr) = dd.log_slope(n / 2, n)?;
    let (previous_value, _) = dd.log_slope(n / 4, n / 2)?;
    let drift = (value - previous_value).abs() / value.abs().max(f64::MIN_POSITIVE);
    let log_mean = dd.trace_n(n) / (n as f64).ln();
    Ok(DixmierEstimate {
        value,
        stderr,
        drift,
        previous_value,
        cesaro: dd.cesaro(n as f64),
        log_mean,
        vanishing: value.abs() < VANISHING_RATIO * log_mean.abs()
            || (value.abs() < previous_value.abs() && drift > VANISHING_DRIFT),
        count: n,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConnesTraceReport {
    pub residue: f64,
    pub half_residue: f64,
    pub dixmier: DixmierEstimate,
    /// `dixmier / residue`.
    pub ratio: f64,
    pub trust_fraction: f64,
    pub singular_values: usize,
    /// Whether the origin mode of a negative-order symbol was zeroed.
    pub origin_regularized: bool,
}

/// Finite section of `P_p` on `w`, its singular values (largest
/// `trust_fraction` of them), the Dixmier estimate, and `res(p)`.
pub fn connes_trace_check(p: &GradedSymbol, w: BasisWindow, trust_fraction: f64) -> Result<ConnesTraceReport> {
    if p.top_order() != -2 {
        return Err(Error::InvalidArgument(format!("symbol order must be -2, got {}", p.top_order())));
    }
    if !(trust_fraction > 0.0 && trust_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("trust fraction {trust_fraction} outside (0, 1]")));
    }
    let (op, origin_regularized) = finite_section_of_op(p, &w, OriginPolicy::ZeroAndReport)?;
    let mut sv: Vec<f64> = Vec::with_capacity(op.dim());
    for block in op.blocks() {
        sv.extend(linalg::singular_values(op.dense_block(&block)));
    }
    sv.sort_by(|a, b| b.total_cmp(a));
    let kept = ((sv.len() as f64 * trust_fraction).round() as usize).max(1);
    sv.truncate(kept);
    let dixmier = dixmier_estimate(&DixmierData::new(sv)?)?;
    let res = residue(p).re;
    let ratio = if res != 0.0 { dixmier.value / res } else { f64::NAN };
    Ok(ConnesTraceReport {
        residue: res,
        half_residue: 0.5 * res,
        dixmier,
        ratio,
        trust_fraction,
        singular_values: kept,
        origin_regularized,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolventTraceReport {
    pub dixmier: DixmierEstimate,
    /// `pi phi(1) / Im tau`.
    pub expected: f64,
    pub ratio: f64,
    pub ceiling: f64,
}

/// Dixmier estimate of `(1 + L)^{-1}` from the trusted part of a spectrum of `L`,
/// against `pi phi(1) / Im tau`.
pub fn resolvent_dixmier_preset(cd: &CountingData, expected: f64) -> Result<ResolventTraceReport> {
    let vals = cd.eigenvalues().iter().filter(|&&l| l <= cd.ceiling()).map(|l| 1.0 / (1.0 + l));
    let dixmier = dixmier_estimate(&DixmierData::new(vals)?)?;
    Ok(ResolventTraceReport { ratio: dixmier.value / expected, expected, ceiling: cd.ceiling(), dixmier })
}

/// `(1 + m^2 + n^2)^{-1}` over `m^2 + n^2 <= radius_sq`.
pub fn flat_resolvent_values(radius_sq: u64) -> Vec<f64> {
    let r = (radius_sq as f64).sqrt().floor() as i64;
    let mut out = Vec::new();
    for m in -r..=r {
        let rest = radius_sq as i64 - m * m;
        let span = (rest as f64).sqrt().floor() as i64;
        for n in -span..=span {
            if m * m + n * n <= radius_sq as i64 {
                out.push(1.0 / (1.0 + (m * m + n * n) as f64));
            }
        }
    }
    out
}

/// `e`, the lower limit of the Cesaro integral.
pub const CESARO_START: f64 = E;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{hermitian_pair, DeformationAngle, NcElement, DEFAULT_PAD};
    use crate::psido::classicalize_resolvent;

    #[test]
    fn counting_small_flat_values() {
        let cd = flat_counting_data(ModuliPoint::i(), 10, 0.25).unwrap();
        assert_eq!(counting_function(&cd, 0.5).unwrap(), 1);
        assert_eq!(counting_function(&cd, 1.5).unwrap(), 5);
        let lattice = (-3i32..=3).flat_map(|m| (-3i32..=3).map(move |n| m * m + n * n)).filter(|&q| (q as f64) < 7.5).count();
        assert_eq!(counting_function(&cd, 7.5).unwrap(), lattice);
        assert!(matches!(counting_function(&cd, 1e6), Err(Error::BeyondCeiling { .. })));
    }

    #[test]
    fn counting_matches_gauss_circle() {
        let cd = flat_counting_data(ModuliPoint::i(), 200, 0.25).unwrap();
        let n = counting_function(&cd, 1e4).unwrap() as f64;
        assert!((n - PI * 1e4).abs() < 300.0);
    }

    #[test]
    fn flat_ceiling_respects_missing_modes() {
        let tau = ModuliPoint::new(1.0, 1.0).unwrap();
        assert_eq!(flat_outside_bound(tau, 9), 50.0);
        let cd = flat_counting_data(tau, 9, 0.25).unwrap();
        assert!(cd.ceiling() <= 50.0);
    }

    #[test]
    fn flat_slopes() {
        for (tau, expected) in [(ModuliPoint::i(), PI), (ModuliPoint::new(0.0, 2.0).unwrap(), PI / 2.0)] {
            let cd = flat_counting_data(tau, 150, 0.25).unwrap();
            let fit = weyl_slope(&cd, (0.05 * cd.ceiling(), cd.ceiling())).unwrap();
            assert!((fit.slope / expected - 1.0).abs() < 0.03, "{}", fit.slope);
        }
        let cd = flat_counting_data(ModuliPoint::i(), 20, 0.25).unwrap();
        assert!(matches!(weyl_slope(&cd, (10.0, 10.0)), Err(Error::EmptyWindow)));
    }

    #[test]
    fn closed_form_constants() {
        let th = DeformationAngle::golden();
        let flat = weyl_constant_closed_form(&ConformalData::flat(th, ModuliPoint::i()), BasisWindow::new(4)).unwrap();
        assert!((flat.constant - PI).abs() < 1e-14 && (flat.volume - 4.0 * PI * PI).abs() < 1e-13);
        let flat2 = weyl_constant_closed_form(&ConformalData::flat(th, ModuliPoint::new(0.0, 2.0).unwrap()), BasisWindow::new(4)).unwrap();
        assert!((flat2.constant - PI / 2.0).abs() < 1e-14);
        let cd = ConformalData::new(ModuliPoint::i(), hermitian_pair(th, 1, 0, 0.4), DEFAULT_PAD).unwrap();
        let w = weyl_constant_closed_form(&cd, BasisWindow::new(24)).unwrap();
        assert!((w.trace_k_inv2 - w.neumann_trace).abs() < 1e-8);
        // t(e^{-0.8 cos x}) = I_0(0.8)
        assert!((w.trace_k_inv2 - 1.166_514_922_869_803).abs() < 1e-10);
    }

    #[test]
    fn harmonic_sequence_has_unit_dixmier_trace() {
        let dd = DixmierData::new((1..=100_000).map(|n| 1.0 / n as f64)).unwrap();
        let est = dixmier_estimate(&dd).unwrap();
        assert!((est.value - 1.0).abs() < 1e-4 && est.drift < 1e-3);
        assert!(!est.vanishing);
        assert!(dixmier_estimate(&DixmierData::new(vec![1.0; 10]).unwrap()).is_err());
    }

    #[test]
    fn trace_class_sequence_vanishes() {
        let dd = DixmierData::new((1..=100_000).map(|n| (n as f64).powf(-1.5))).unwrap();
        let est = dixmier_estimate(&dd).unwrap();
        assert!(est.vanishing && est.value < 0.01);
    }

    #[test]
    fn dixmier_uses_only_the_sorted_multiset() {
        let mut v: Vec<f64> = (1..=5000).map(|n| 1.0 / n as f64).collect();
        let a = dixmier_estimate(&DixmierData::new(v.clone()).unwrap()).unwrap();
        v.reverse();
        v.iter_mut().step_by(2).for_each(|x| *x = -*x);
        let b = dixmier_estimate(&DixmierData::new(v).unwrap()).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.drift, b.drift);
    }

    #[test]
    fn flat_resolvent_symbol_matches_half_residue() {
        let th = DeformationAngle::golden();
        let p = classicalize_resolvent(th, 1.0, ModuliPoint::i(), 3, 32).unwrap();
        let rep = connes_trace_check(&p, BasisWindow::new(40), DEFAULT_TRUST_FRACTION).unwrap();
        assert!((rep.residue - 2.0 * PI).abs() < 1e-12);
        assert!((rep.ratio - 0.5).abs() < 0.075, "{}", rep.ratio);
    }

    #[test]
    fn weightless_order_minus_two_padding_gives_zero() {
        let th = DeformationAngle::golden();
        let mut p = GradedSymbol::zero(th, -2, 2);
        p.insert(-3, 0, NcElement::one(th));
        let rep = connes_trace_check(&p, BasisWindow::new(32), DEFAULT_TRUST_FRACTION).unwrap();
        assert_eq!(rep.residue, 0.0);
        assert!(rep.dixmier.vanishing, "{:?}", rep.dixmier);
    }
}
