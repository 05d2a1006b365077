//! The experiment pipelines behind each subcommand. Each returns a
//! [`Report`]; nothing here touches the filesystem.

use std::f64::consts::PI;

use anyhow::{Context, Result};
use nctorus::algebra::NcElement;
use nctorus::gns::{hermitian_spectrum, perturbed_laplacian_matrix, BasisWindow, SpectrumResult};
use nctorus::heat::{contour_exp_check, heat_coefficient, heat_trace_fit, laplace_symbol, log_grid};
use nctorus::psido::{apply_op, classicalize_resolvent, compose, residue, GradedSymbol, OriginPolicy};
use nctorus::spectral::{
    connes_trace_check, flat_counting_data, flat_spectrum, weyl_constant_closed_form, weyl_slope, CountingData,
};
use nctorus::{Complex64, ConformalData};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{poly_symbol, ConnesPreset, ExperimentConfig, SCHEMA_VERSION};

/// A CSV table: file name, header, rows of already formatted fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, header: &[&str]) -> Self {
        Self { name: name.into(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }
}

/// Outcome of one pipeline run.
#[derive(Debug, Clone)]
pub struct Report {
    pub command: String,
    pub pass: bool,
    /// Written as `<command>_report.json`; always carries `schema_version`.
    pub json: Value,
    pub tables: Vec<Table>,
}

fn report(command: &str, pass: bool, body: Value, tables: Vec<Table>) -> Report {
    let mut json = json!({ "schema_version": SCHEMA_VERSION, "command": command, "pass": pass });
    if let (Value::Object(dst), Value::Object(src)) = (&mut json, body) {
        dst.extend(src);
    }
    Report { command: command.into(), pass, json, tables }
}

/// Full-precision, locale-free float formatting for CSV cells.
fn num(x: f64) -> String {
    format!("{x:e}")
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

/// Spectrum used for counting and heat fits: the analytic box spectrum when
/// `h = 0`, otherwise the finite section of `k L k`.
pub struct SpectrumData {
    pub spectrum: SpectrumResult,
    pub counting: CountingData,
    pub analytic: bool,
}

pub fn spectrum_data(cfg: &ExperimentConfig, cd: &ConformalData) -> Result<SpectrumData> {
    let n = cfg.bandwidth;
    let frac = cfg.weyl.ceiling_fraction;
    if cfg.is_flat() {
        let counting = flat_counting_data(cfg.tau(), n, frac)?;
        let spectrum = SpectrumResult { eigenvalues: flat_spectrum(cfg.tau(), n), max_residual: None };
        Ok(SpectrumData { spectrum, counting, analytic: true })
    } else {
        let (op, _) = perturbed_laplacian_matrix(cd, &BasisWindow::new(n))?;
        let spectrum = hermitian_spectrum(&op)?;
        let counting = CountingData::for_conformal(&spectrum, cd, n, frac)?;
        Ok(SpectrumData { spectrum, counting, analytic: false })
    }
}

#[derive(Serialize)]
struct WeylBody {
    slope: f64,
    slope_stderr: f64,
    expected: f64,
    ratio: f64,
    tolerance: f64,
    fit_window: (f64, f64),
    ceiling: f64,
    ceiling_rule: String,
    analytic_spectrum: bool,
    eigenvalues: usize,
    trace_k_inv2: f64,
}

pub fn run_weyl(cfg: &ExperimentConfig) -> Result<Report> {
    let cd = cfg.conformal_data()?;
    let sd = spectrum_data(cfg, &cd)?;
    let c = sd.counting.ceiling();
    let window = (cfg.weyl.window[0] * c, cfg.weyl.window[1] * c);
    let fit = weyl_slope(&sd.counting, window)?;
    let closed = weyl_constant_closed_form(&cd, BasisWindow::new(cfg.heat.closed_form_window))?;
    let ratio = fit.slope / closed.constant;
    let pass = (ratio - 1.0).abs() <= cfg.weyl.tolerance;

    let mut spectrum = Table::new("spectrum.csv", &["index", "eigenvalue"]);
    spectrum.rows = sd.spectrum.eigenvalues.iter().enumerate().map(|(i, v)| vec![i.to_string(), num(*v)]).collect();
    let mut stair = Table::new("staircase.csv", &["lambda", "count"]);
    stair.rows = sd.counting.staircase().into_iter().map(|(l, n)| vec![num(l), n.to_string()]).collect();
    let body = WeylBody {
        slope: fit.slope,
        slope_stderr: fit.stderr,
        expected: closed.constant,
        ratio,
        tolerance: cfg.weyl.tolerance,
        fit_window: window,
        ceiling: c,
        ceiling_rule: sd.counting.ceiling_rule().into(),
        analytic_spectrum: sd.analytic,
        eigenvalues: sd.spectrum.len(),
        trace_k_inv2: closed.trace_k_inv2,
    };
    Ok(report("weyl", pass, serde_json::to_value(body)?, vec![spectrum, stair]))
}

pub fn run_heat(cfg: &ExperimentConfig) -> Result<Report> {
    let cd = cfg.conformal_data()?;
    let ls = laplace_symbol(&cd)?;
    let b0 = heat_coefficient(0, &ls, &cfg.contour, &cfg.xi_quadrature)?;
    let b2 = heat_coefficient(2, &ls, &cfg.contour, &cfg.xi_quadrature)?;
    let closed = weyl_constant_closed_form(&cd, BasisWindow::new(cfg.heat.closed_form_window))?.constant;
    let sd = spectrum_data(cfg, &cd)?;
    let grid = log_grid(cfg.heat.t_min, cfg.heat.t_max, cfg.heat.t_points);
    let fit = heat_trace_fit(&sd.spectrum, &grid, sd.counting.ceiling())?;

    let routes = [("quadrature", b0.value), ("fit", fit.b0), ("closed_form", closed)];
    let mut pairs = Vec::new();
    let mut pass = true;
    for i in 0..3 {
        for j in i + 1..3 {
            let d = rel(routes[i].1, routes[j].1);
            pass &= d <= cfg.heat.tolerance;
            pairs.push(json!({ "a": routes[i].0, "b": routes[j].0, "relative_difference": d }));
        }
    }
    let mut flat_check = Value::Null;
    if cfg.is_flat() {
        let expected = PI / cfg.tau[1];
        let worst = routes.iter().map(|r| (r.1 - expected).abs()).fold(0.0, f64::max);
        pass &= worst <= cfg.heat.flat_tolerance;
        flat_check = json!({ "expected": expected, "worst_abs_error": worst, "tolerance": cfg.heat.flat_tolerance });
    }
    let mut contour = Value::Null;
    if cfg.heat.contour_check {
        let (op, _) = perturbed_laplacian_matrix(&cd, &BasisWindow::new(cfg.heat.contour_check_window))?;
        let err = contour_exp_check(&op.to_dense(), &cfg.contour)?;
        pass &= err <= 1e-8;
        contour = json!({ "max_error": err, "tolerance": 1e-8 });
    }
    let mut table = Table::new("heat_trace.csv", &["t", "t_trace"]);
    table.rows = fit.points.iter().map(|&(t, y)| vec![num(t), num(y)]).collect();
    let body = json!({
        "b0": { "quadrature": b0, "fit": fit.b0, "fit_stderr": fit.b0_stderr, "closed_form": closed },
        "b2": { "quadrature": b2, "fit": fit.b2, "fit_stderr": fit.b2_stderr },
        "pairwise": pairs,
        "tolerance": cfg.heat.tolerance,
        "fit_window": fit.t_window,
        "ceiling": fit.ceiling,
        "flat_check": flat_check,
        "contour_check": contour,
    });
    Ok(report("heat", pass, body, vec![table]))
}

/// The order -2 symbol selected by `cfg.connes.preset`, with the value the
/// residue should take.
pub fn preset_symbol(cfg: &ExperimentConfig) -> Result<(GradedSymbol, f64)> {
    let theta = cfg.theta();
    let tau = cfg.tau();
    let w = cfg.connes.winding_cutoff;
    let sphere = 2.0 * PI / tau.tau_im;
    Ok(match cfg.connes.preset {
        ConnesPreset::FlatResolvent => (classicalize_resolvent(theta, 1.0, tau, 3, w)?, sphere),
        ConnesPreset::KWeighted => {
            let cd = cfg.conformal_data()?;
            let p = classicalize_resolvent(theta, 0.0, tau, 1, w)?.without_exact().left_mul(&cd.k_inv2)?;
            (p, sphere * cd.k_inv2.trace().re)
        }
        ConnesPreset::OrderMinusThree => {
            let mut p = GradedSymbol::zero(theta, -2, 2).with_winding_cutoff(w);
            p.insert(-3, 0, NcElement::one(theta));
            (p, 0.0)
        }
    })
}

pub fn run_residue(cfg: &ExperimentConfig) -> Result<Report> {
    let (p, expected) = preset_symbol(cfg)?;
    let res = residue(&p);
    let err = (res.re - expected).abs() + res.im.abs();
    // discarded angular mass bounds the error for anisotropic tau
    let tol = 1e-10 + 2.0 * PI * p.discarded_mass();
    let pass = err <= tol;
    let body = json!({
        "preset": cfg.connes.preset,
        "residue": { "re": res.re, "im": res.im },
        "expected": expected,
        "abs_error": err,
        "tolerance": tol,
        "discarded_mass": p.discarded_mass(),
    });
    Ok(report("residue", pass, body, Vec::new()))
}

pub fn run_connes_trace(cfg: &ExperimentConfig) -> Result<Report> {
    let (p, _) = preset_symbol(cfg)?;
    let rep = connes_trace_check(&p, BasisWindow::new(cfg.bandwidth), cfg.connes.trust_fraction)?;
    let pass = match cfg.connes.preset {
        ConnesPreset::OrderMinusThree => rep.dixmier.vanishing,
        _ => (rep.ratio - 0.5).abs() <= cfg.connes.tolerance,
    };
    let body = json!({ "preset": cfg.connes.preset, "tolerance": cfg.connes.tolerance, "result": rep });
    Ok(report("connes-trace", pass, body, Vec::new()))
}

pub fn run_compose(cfg: &ExperimentConfig) -> Result<Report> {
    let theta = cfg.theta();
    let p = poly_symbol(theta, &cfg.compose.left);
    let q = poly_symbol(theta, &cfg.compose.right);
    let pq = compose(&p.to_graded(), &q.to_graded(), cfg.compose.order_cutoff).context("composing symbols")?;
    // operator check on the monomials of a small box
    let mut worst: f64 = 0.0;
    let exact = cfg.compose.order_cutoff <= 0;
    if exact {
        for m in -3..=3 {
            for n in -3..=3 {
                let x = NcElement::monomial(m, n, Complex64::new(1.0, 0.0), theta);
                let direct = p.apply(&q.apply(&x)?)?;
                let (via, _) = apply_op(&pq, &x, OriginPolicy::Reject)?;
                worst = worst.max(direct.max_diff(&via));
            }
        }
    }
    let pass = !exact || worst < 1e-10;
    let body = json!({
        "order_cutoff": cfg.compose.order_cutoff,
        "symbol": pq,
        "operator_check": if exact { json!({ "max_diff": worst, "tolerance": 1e-10 }) } else { Value::Null },
    });
    Ok(report("compose", pass, body, Vec::new()))
}

pub fn run(command: &str, cfg: &ExperimentConfig) -> Result<Report> {
    match command {
        "weyl" => run_weyl(cfg),
        "heat" => run_heat(cfg),
        "residue" => run_residue(cfg),
        "connes-trace" => run_connes_trace(cfg),
        "compose" => run_compose(cfg),
        other => anyhow::bail!("unknown command {other}"),
    }
}
