//! Experiment configuration: JSON with a default for every field.

use std::fmt;
use std::path::Path;

use nctorus::algebra::{DeformationAngle, ModuliPoint, NcElement, DEFAULT_PAD};
use nctorus::heat::{ContourSpec, XiQuadrature};
use nctorus::psido::{PolySymbol, DEFAULT_WINDING_CUTOFF};
use nctorus::{Complex64, ConformalData};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// A `(m, n, re, im)` coefficient of `U^m V^n`.
pub type Coeff = (i32, i32, f64, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub theta: f64,
    /// `[Re tau, Im tau]`.
    pub tau: [f64; 2],
    /// Coefficients of `h`; the adjoint half is filled in at load. Empty means flat.
    pub h_spec: Vec<Coeff>,
    pub bandwidth: u32,
    pub pad: u32,
    pub contour: ContourSpec,
    pub xi_quadrature: XiQuadrature,
    pub weyl: WeylSettings,
    pub heat: HeatSettings,
    pub connes: ConnesSettings,
    pub compose: ComposeSettings,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            theta: DeformationAngle::golden().value(),
            tau: [0.0, 1.0],
            h_spec: vec![(-1, 0, 0.4, 0.0), (1, 0, 0.4, 0.0)],
            bandwidth: 48,
            pad: DEFAULT_PAD,
            contour: ContourSpec::default(),
            xi_quadrature: XiQuadrature::default(),
            weyl: WeylSettings::default(),
            heat: HeatSettings::default(),
            connes: ConnesSettings::default(),
            compose: ComposeSettings::default(),
            output_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeylSettings {
    /// Counting ceiling as a share of the largest eigenvalue (further capped
    /// by the box edge).
    pub ceiling_fraction: f64,
    /// Fit window as fractions of the ceiling.
    pub window: [f64; 2],
    /// Relative tolerance on slope / expected.
    pub tolerance: f64,
}

impl Default for WeylSettings {
    fn default() -> Self {
        Self { ceiling_fraction: 0.25, window: [0.05, 1.0], tolerance: 0.10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatSettings {
    pub t_min: f64,
    pub t_max: f64,
    pub t_points: usize,
    /// Pairwise relative tolerance between the three B0 routes.
    pub tolerance: f64,
    /// Absolute tolerance against `pi / Im tau` when `h` is zero.
    pub flat_tolerance: f64,
    /// Window of the `k^2` finite section inverted for the closed form.
    pub closed_form_window: u32,
    /// Also run the contour identity check on a small finite section.
    pub contour_check: bool,
    pub contour_check_window: u32,
}

impl Default for HeatSettings {
    fn default() -> Self {
        Self {
            t_min: 1e-3,
            t_max: 1.0,
            t_points: 60,
            tolerance: 0.05,
            flat_tolerance: 0.01,
            closed_form_window: 24,
            contour_check: false,
            contour_check_window: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnesPreset {
    /// `(1 + Q(xi))^{-1}`.
    FlatResolvent,
    /// `k^{-2} Q(xi)^{-1}`.
    KWeighted,
    /// Order -2 with only a `|xi|^{-3}` layer.
    OrderMinusThree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConnesSettings {
    pub preset: ConnesPreset,
    pub trust_fraction: f64,
    /// Absolute tolerance on Dixmier / residue around 1/2.
    pub tolerance: f64,
    pub winding_cutoff: i32,
}

impl Default for ConnesSettings {
    fn default() -> Self {
        Self {
            preset: ConnesPreset::KWeighted,
            trust_fraction: nctorus::spectral::DEFAULT_TRUST_FRACTION,
            tolerance: 0.075,
            winding_cutoff: DEFAULT_WINDING_CUTOFF,
        }
    }
}

/// One term `a(U, V) xi_1^j1 xi_2^j2` of a differential operator symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolyTerm {
    pub xi: [u32; 2],
    pub coeffs: Vec<Coeff>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComposeSettings {
    pub left: Vec<PolyTerm>,
    pub right: Vec<PolyTerm>,
    pub order_cutoff: i32,
}

impl Default for ComposeSettings {
    fn default() -> Self {
        // delta_1 composed with (U + U^*) delta_1
        Self {
            left: vec![PolyTerm { xi: [1, 0], coeffs: vec![(0, 0, 1.0, 0.0)] }],
            right: vec![PolyTerm { xi: [1, 0], coeffs: vec![(1, 0, 1.0, 0.0), (-1, 0, 1.0, 0.0)] }],
            order_cutoff: 0,
        }
    }
}

/// Validation failure, with the 1-based line in the source text when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub source: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{}: {}", self.source, l, self.message),
            None => write!(f, "{}: {}", self.source, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// 1-based line of the first occurrence of `"key"` as an object key.
fn key_line(text: &str, key: &str) -> Option<usize> {
    let pat = format!("\"{key}\"");
    let mut from = 0;
    while let Some(pos) = text[from..].find(&pat) {
        let at = from + pos;
        let rest = text[at + pat.len()..].trim_start();
        if rest.starts_with(':') {
            return Some(text[..at].matches('\n').count() + 1);
        }
        from = at + pat.len();
    }
    None
}

/// Lines on which the elements of the array under `"key"` start.
fn array_item_lines(text: &str, key: &str) -> Vec<usize> {
    let pat = format!("\"{key}\"");
    let Some(pos) = text.find(&pat) else { return Vec::new() };
    let mut line = text[..pos].matches('\n').count() + 1;
    let mut depth = 0;
    let mut out = Vec::new();
    let mut in_str = false;
    for c in text[pos + pat.len()..].chars() {
        match c {
            '\n' => line += 1,
            '"' => in_str = !in_str,
            '[' if !in_str => {
                depth += 1;
                if depth == 2 {
                    out.push(line);
                }
            }
            ']' if !in_str => {
                depth -= 1;
                if depth == 0 {
                    break;
                }
            }
            _ => {}
        }
    }
    out
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            source: path.display().to_string(),
            line: None,
            message: e.to_string(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses, validates and Hermitian-symmetrizes `h_spec`.
    pub fn parse(text: &str, source: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError {
            source: source.into(),
            line: Some(e.line()),
            message: e.to_string(),
        })?;
        cfg.validated(text, source)
    }

    fn validated(mut self, text: &str, source: &str) -> Result<Self, ConfigError> {
        let err = |key: &str, message: String| ConfigError { source: source.into(), line: key_line(text, key), message };
        if self.schema_version != SCHEMA_VERSION {
            return Err(err("schema_version", format!("unsupported schema_version {}", self.schema_version)));
        }
        let theta = DeformationAngle::new(self.theta).map_err(|e| err("theta", e.to_string()))?;
        if !(self.tau[1] > 0.0) || !self.tau[0].is_finite() || !self.tau[1].is_finite() {
            return Err(err("tau", format!("tau must lie in the upper half-plane, got {:?}", self.tau)));
        }
        self.contour.validate().map_err(|e| err("contour", e.to_string()))?;
        if self.bandwidth == 0 {
            return Err(err("bandwidth", "bandwidth must be positive".into()));
        }
        let w = &self.weyl;
        if !(w.ceiling_fraction > 0.0 && w.ceiling_fraction <= 1.0) {
            return Err(err("ceiling_fraction", format!("ceiling_fraction {} outside (0, 1]", w.ceiling_fraction)));
        }
        if !(w.window[0] > 0.0 && w.window[0] < w.window[1] && w.window[1] <= 1.0) {
            return Err(err("window", format!("weyl window {:?} must satisfy 0 < lo < hi <= 1", w.window)));
        }
        let h = &self.heat;
        if !(h.t_min > 0.0 && h.t_min < h.t_max) || h.t_points < 4 {
            return Err(err("t_min", "heat grid needs 0 < t_min < t_max and t_points >= 4".into()));
        }
        let c = &self.connes;
        if !(c.trust_fraction > 0.0 && c.trust_fraction <= 1.0) {
            return Err(err("trust_fraction", format!("trust_fraction {} outside (0, 1]", c.trust_fraction)));
        }
        for (key, tol) in [("tolerance", w.tolerance), ("tolerance", h.tolerance), ("flat_tolerance", h.flat_tolerance), ("tolerance", c.tolerance)] {
            if !(tol > 0.0) {
                return Err(err(key, format!("tolerances must be positive, got {tol}")));
            }
        }
        let lines = array_item_lines(text, "h_spec");
        self.h_spec = symmetrize(theta, &self.h_spec).map_err(|(i, message)| ConfigError {
            source: source.into(),
            line: lines.get(i).copied().or_else(|| key_line(text, "h_spec")),
            message,
        })?;
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn theta(&self) -> DeformationAngle {
        DeformationAngle::new(self.theta).expect("validated")
    }

    pub fn tau(&self) -> ModuliPoint {
        ModuliPoint::new(self.tau[0], self.tau[1]).expect("validated")
    }

    pub fn is_flat(&self) -> bool {
        self.h_spec.iter().all(|c| c.2 == 0.0 && c.3 == 0.0)
    }

    pub fn h(&self) -> NcElement {
        element(self.theta(), &self.h_spec)
    }

    pub fn conformal_data(&self) -> nctorus::Result<ConformalData> {
        if self.is_flat() {
            Ok(ConformalData::flat(self.theta(), self.tau()))
        } else {
            ConformalData::new(self.tau(), self.h(), self.pad)
        }
    }

    /// Multiplies every tolerance by `s`.
    pub fn scale_tolerances(&mut self, s: f64) {
        self.weyl.tolerance *= s;
        self.heat.tolerance *= s;
        self.heat.flat_tolerance *= s;
        self.connes.tolerance *= s;
    }
}

pub fn element(theta: DeformationAngle, coeffs: &[Coeff]) -> NcElement {
    NcElement::from_coeffs(theta, coeffs.iter().map(|&(m, n, re, im)| ((m, n), Complex64::new(re, im))))
}

pub fn poly_symbol(theta: DeformationAngle, terms: &[PolyTerm]) -> PolySymbol {
    let mut p = PolySymbol::new(theta);
    for t in terms {
        p.add_term(t.xi[0], t.xi[1], element(theta, &t.coeffs));
    }
    p
}

/// Fills in `(-m, -n)` from `(m, n)` by the adjoint rule
/// `(c U^m V^n)^* = conj(c) e^{2 pi i theta m n} U^{-m} V^{-n}`.
/// Entries that disagree with their mirror are rejected, by index.
fn symmetrize(theta: DeformationAngle, spec: &[Coeff]) -> Result<Vec<Coeff>, (usize, String)> {
    use std::collections::BTreeMap;
    let mut given: BTreeMap<(i32, i32), (usize, Complex64)> = BTreeMap::new();
    for (i, &(m, n, re, im)) in spec.iter().enumerate() {
        if !re.is_finite() || !im.is_finite() {
            return Err((i, format!("h_spec entry ({m}, {n}) is not finite")));
        }
        if given.insert((m, n), (i, Complex64::new(re, im))).is_some() {
            return Err((i, format!("h_spec lists ({m}, {n}) twice")));
        }
    }
    let mut out: BTreeMap<(i32, i32), Complex64> = BTreeMap::new();
    for (&(m, n), &(i, c)) in &given {
        let mirror = c.conj() * theta.twist(m as i64 * n as i64);
        if (m, n) == (0, 0) && c.im != 0.0 {
            return Err((i, format!("constant term of h must be real, got {c}")));
        }
        if let Some(&(_, other)) = given.get(&(-m, -n)) {
            if (other - mirror).norm() > 1e-12 * (1.0 + c.norm()) {
                return Err((i, format!("h_spec entries ({m}, {n}) and ({}, {}) are not adjoint to each other", -m, -n)));
            }
        }
        out.insert((m, n), c);
        out.entry((-m, -n)).or_insert(mirror);
    }
    Ok(out.into_iter().map(|((m, n), c)| (m, n, c.re, c.im)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::parse(&cfg.to_json(), "mem").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(ExperimentConfig::parse("{}", "mem").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn half_spec_is_completed() {
        let cfg = ExperimentConfig::parse(r#"{"h_spec": [[1, 0, 0.4, 0.0]]}"#, "mem").unwrap();
        assert_eq!(cfg.h_spec, vec![(-1, 0, 0.4, 0.0), (1, 0, 0.4, 0.0)]);
        let cfg = ExperimentConfig::parse(r#"{"h_spec": [[1, 1, 0.2, 0.1]]}"#, "mem").unwrap();
        assert!(cfg.h().selfadjoint_defect() < 1e-15);
    }

    #[test]
    fn errors_carry_lines() {
        let text = "{\n  \"theta\": 0.3,\n  \"tau\": [0.0, -1.0]\n}";
        let e = ExperimentConfig::parse(text, "c.json").unwrap_err();
        assert_eq!(e.line, Some(3));
        assert!(e.to_string().starts_with("c.json:3:"));
        let text = "{\n  \"h_spec\": [\n    [1, 0, 0.4, 0.0],\n    [-1, 0, 0.5, 0.0]\n  ]\n}";
        let e = ExperimentConfig::parse(text, "c.json").unwrap_err();
        assert!(e.line == Some(3) || e.line == Some(4), "{e}");
        let e = ExperimentConfig::parse("{\n  \"bandwith\": 3\n}", "c.json").unwrap_err();
        assert_eq!(e.line, Some(2));
        let e = ExperimentConfig::parse("{\n  \"h_spec\": [[0, 0, 1.0, 0.5]]\n}", "c.json").unwrap_err();
        assert_eq!(e.line, Some(2));
    }
}
