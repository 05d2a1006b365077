//! The acceptance suite run by `nct verify`.

use std::f64::consts::PI;
use std::time::Instant;

use anyhow::Result;
use nctorus::algebra::{ConformalData, DeformationAngle, ModuliPoint, NcElement};
use nctorus::gns::{generalized_spectrum, gram_laplacian_matrix, hermitian_spectrum, perturbed_laplacian_matrix, BasisWindow};
use nctorus::heat::{graded_at_zero, laplace_symbol, parametrix_terms};
use nctorus::psido::{adjoint_symbol, apply_op, classicalize_resolvent, compose, residue, OriginPolicy, PolySymbol, DEFAULT_WINDING_CUTOFF};
use nctorus::spectral::{dixmier_estimate, flat_resolvent_values, DixmierData};
use nctorus::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ConnesPreset, ExperimentConfig};
use crate::pipelines::{run_connes_trace, run_heat, run_weyl};

#[derive(Debug, Clone)]
pub struct Criterion {
    pub id: usize,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Criterion {
    /// One TAP line, with the detail as a directive comment.
    pub fn tap_line(&self) -> String {
        let status = if self.pass { "ok" } else { "not ok" };
        format!("{status} {} - {} # {} ({:.2}s)", self.id, self.name, self.detail, self.seconds)
    }
}

/// Flat analytic configuration on the box of half-width `bandwidth`.
pub fn flat_config(tau: [f64; 2], bandwidth: u32) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { tau, h_spec: Vec::new(), bandwidth, ..Default::default() };
    cfg.weyl.tolerance = 0.03;
    cfg
}

/// `theta` golden, `tau = i`, `h = 0.4 (U + U^*)`, `N = 48`.
pub fn perturbed_config() -> ExperimentConfig {
    ExperimentConfig::default()
}

fn timed(id: usize, name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Criterion {
    let start = Instant::now();
    let (pass, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e:#}")),
    };
    Criterion { id, name, pass, detail, seconds: start.elapsed().as_secs_f64() }
}

fn weyl_ratio(cfg: &ExperimentConfig) -> Result<(bool, f64)> {
    let r = run_weyl(cfg)?;
    Ok((r.pass, r.json["ratio"].as_f64().unwrap_or(f64::NAN)))
}

pub fn flat_weyl(scale: f64) -> Criterion {
    timed(1, "flat Weyl law, tau = i", || {
        let mut cfg = flat_config([0.0, 1.0], 400);
        cfg.scale_tolerances(scale);
        let (pass, ratio) = weyl_ratio(&cfg)?;
        Ok((pass, format!("slope/pi = {ratio:.5}, tol {:.3}", cfg.weyl.tolerance)))
    })
}

pub fn anisotropic_weyl(scale: f64) -> Criterion {
    timed(2, "anisotropic flat Weyl law, tau = 2i and 1 + i", || {
        let mut details = Vec::new();
        let mut pass = true;
        for tau in [[0.0, 2.0], [1.0, 1.0]] {
            let mut cfg = flat_config(tau, 400);
            cfg.scale_tolerances(scale);
            let (p, ratio) = weyl_ratio(&cfg)?;
            pass &= p;
            details.push(format!("tau {:?}: ratio {ratio:.5}", tau));
        }
        Ok((pass, details.join("; ")))
    })
}

pub fn perturbed_weyl(scale: f64) -> Criterion {
    timed(3, "perturbed Weyl law, N = 48", || {
        let mut cfg = perturbed_config();
        cfg.scale_tolerances(scale);
        let (pass, ratio) = weyl_ratio(&cfg)?;
        Ok((pass, format!("slope / (pi t(k^-2)) = {ratio:.5}, tol {:.3}", cfg.weyl.tolerance)))
    })
}

pub fn heat_routes(scale: f64) -> Criterion {
    timed(4, "B0 three-route agreement", || {
        let mut cfg = perturbed_config();
        cfg.scale_tolerances(scale);
        let r = run_heat(&cfg)?;
        let b0 = &r.json["b0"];
        let mut flat = flat_config([0.0, 1.0], 400);
        flat.scale_tolerances(scale);
        let f = run_heat(&flat)?;
        let worst = r.json["pairwise"]
            .as_array()
            .map(|a| a.iter().filter_map(|p| p["relative_difference"].as_f64()).fold(0.0, f64::max))
            .unwrap_or(f64::NAN);
        Ok((
            r.pass && f.pass,
            format!(
                "perturbed: quadrature {:.6}, fit {:.6}, closed {:.6}, worst pair {:.2e}; flat worst |B0 - pi| {:.2e}",
                b0["quadrature"]["value"].as_f64().unwrap_or(f64::NAN),
                b0["fit"].as_f64().unwrap_or(f64::NAN),
                b0["closed_form"].as_f64().unwrap_or(f64::NAN),
                worst,
                f.json["flat_check"]["worst_abs_error"].as_f64().unwrap_or(f64::NAN),
            ),
        ))
    })
}

pub fn residue_anchor(scale: f64) -> Criterion {
    timed(5, "residue of (1 + L0)^-1", || {
        let p = classicalize_resolvent(DeformationAngle::golden(), 1.0, ModuliPoint::i(), 3, DEFAULT_WINDING_CUTOFF)?;
        let r = residue(&p);
        let err = (r - C64::new(2.0 * PI, 0.0)).norm();
        Ok((err <= 1e-10 * scale, format!("res = {:.15}, |res - 2 pi| = {err:.2e}", r.re)))
    })
}

pub fn dixmier_anchor(scale: f64) -> Criterion {
    timed(6, "Dixmier anchor (1 + m^2 + n^2)^-1", || {
        let est = dixmier_estimate(&DixmierData::new(flat_resolvent_values(1_000_000))?)?;
        let ratio = est.value / PI;
        let pass = (ratio - 1.0).abs() <= 0.05 * scale && est.drift < 0.02 * scale;
        Ok((pass, format!("value/pi = {ratio:.6}, drift {:.2e}, {} values", est.drift, est.count)))
    })
}

pub fn connes_trace(scale: f64) -> Criterion {
    timed(7, "Dixmier / residue for k^-2 |xi|^-2", || {
        let mut cfg = perturbed_config();
        cfg.connes.preset = ConnesPreset::KWeighted;
        cfg.scale_tolerances(scale);
        let r = run_connes_trace(&cfg)?;
        let ratio = r.json["result"]["ratio"].as_f64().unwrap_or(f64::NAN);
        Ok((r.pass, format!("ratio {ratio:.5}, accepted 0.5 +- {:.3}", cfg.connes.tolerance)))
    })
}

pub fn parametrix(scale: f64) -> Criterion {
    timed(8, "parametrix identity at orders -1, -2", || {
        let cfg = perturbed_config();
        let cd = cfg.conformal_data()?;
        let ls = laplace_symbol(&cd)?;
        let b = parametrix_terms(&ls, 2)?;
        let total = b[0].add(&b[1]).add(&b[2]);
        let g = graded_at_zero(&total, &ls, &cd.k_inv2, DEFAULT_WINDING_CUTOFF)?;
        let c = compose(&g, &ls.to_poly().to_graded(), -2)?;
        let top = c.coeff(0, 0).max_diff(&NcElement::one(cfg.theta()));
        let (d1, d2) = (c.layer_max_abs(-1), c.layer_max_abs(-2));
        let tol = 1e-8 * scale;
        Ok((d1 < tol && d2 < tol, format!("order 0 defect {top:.1e}, order -1 {d1:.1e}, order -2 {d2:.1e}")))
    })
}

fn random_element(rng: &mut ChaCha8Rng, theta: DeformationAngle, max_terms: usize) -> NcElement {
    let k = rng.gen_range(1..=max_terms);
    NcElement::from_coeffs(
        theta,
        (0..k).map(|_| {
            let mn = (rng.gen_range(-4..=4), rng.gen_range(-4..=4));
            (mn, C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        }),
    )
}

fn random_poly(rng: &mut ChaCha8Rng, theta: DeformationAngle) -> PolySymbol {
    let mut p = PolySymbol::new(theta);
    for _ in 0..rng.gen_range(1..=3) {
        let j1 = rng.gen_range(0..=2);
        let j2 = rng.gen_range(0..=2 - j1);
        p.add_term(j1, j2, random_element(rng, theta, 6));
    }
    p
}

/// Largest violation of each identity over `cases` random inputs, relative
/// to the stated tolerance (values <= 1 pass).
pub fn invariant_violations(cases: usize, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let th = DeformationAngle::golden();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 8];
    let size = |a: &NcElement| 1.0 + a.l1_norm();
    for _ in 0..cases {
        let a = random_element(&mut rng, th, 12);
        let b = random_element(&mut rng, th, 12);
        let axis = rng.gen_range(1..=2u8);
        let (m, n, p, q) = (rng.gen_range(-4..=4), rng.gen_range(-4..=4), rng.gen_range(-4..=4), rng.gen_range(-4..=4));
        let one = C64::new(1.0, 0.0);
        let x = NcElement::monomial(m, n, one, th).mul(&NcElement::monomial(p, q, one, th))?;
        let y = NcElement::monomial(p, q, one, th).mul(&NcElement::monomial(m, n, one, th))?;
        let phase = th.twist(n as i64 * p as i64 - m as i64 * q as i64);
        worst[0] = worst[0].max(x.max_diff(&y.scale(phase)) / 1e-12);

        let s = size(&a) * size(&b);
        let cyc = (a.mul(&b)?.trace() - b.mul(&a)?.trace()).norm();
        worst[1] = worst[1].max(cyc / (1e-12 * s));

        let ibp = (a.trace_of_product(&b.delta(axis)?)? + a.delta(axis)?.trace_of_product(&b)?).norm();
        worst[2] = worst[2].max((ibp / (1e-11 * s)).max(a.delta(axis)?.trace().norm() / 1e-12));

        let star = a.adjoint().delta(axis)?.max_diff(&(-&a.delta(axis)?.adjoint()));
        worst[3] = worst[3].max(star / 1e-12);

        let lhs = a.mul(&b)?.delta(axis)?;
        let rhs = &a.delta(axis)?.mul(&b)? + &a.mul(&b.delta(axis)?)?;
        worst[4] = worst[4].max(lhs.max_diff(&rhs) / (1e-11 * s));

        let hraw = random_element(&mut rng, th, 3);
        let h = (&hraw + &hraw.adjoint()).scale_re(0.1);
        let pad = nctorus::algebra::DEFAULT_PAD / 2 * (h.bandwidth() + 1);
        let cd = ConformalData::new(ModuliPoint::i(), h, pad)?;
        let kms = (cd.phi(&a.mul(&b)?)? - cd.phi(&b.mul(&cd.modular(&a)?)?)?).norm();
        worst[5] = worst[5].max(kms / (1e-10 * s));

        let pp = random_poly(&mut rng, th);
        let qq = random_poly(&mut rng, th);
        let g = pp.to_graded();
        let adj = adjoint_symbol(&g, 0)?;
        let (pa, _) = apply_op(&g, &a, OriginPolicy::Reject)?;
        let (ab, _) = apply_op(&adj, &b, OriginPolicy::Reject)?;
        let l = b.adjoint().trace_of_product(&pa)?;
        let r = ab.adjoint().trace_of_product(&a)?;
        worst[6] = worst[6].max((l - r).norm() / (1e-10 * (1.0 + l.norm())));

        let pq = compose(&g, &qq.to_graded(), 0)?;
        let direct = pp.apply(&qq.apply(&a)?)?;
        let (via, _) = apply_op(&pq, &a, OriginPolicy::Reject)?;
        worst[7] = worst[7].max(direct.max_diff(&via) / (1e-10 * size(&direct)));
    }
    let names = [
        "commutation",
        "trace cyclicity",
        "integration by parts",
        "star derivation",
        "Leibniz",
        "KMS twisted trace",
        "adjoint symbol pairing",
        "composition vs operator product",
    ];
    Ok(names.into_iter().zip(worst).collect())
}

pub fn invariants(scale: f64) -> Criterion {
    timed(9, "algebraic invariant suite, 200 cases each", || {
        let v = invariant_violations(200, 0x5eed)?;
        let pass = v.iter().all(|(_, x)| *x <= scale);
        let worst = v.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
        Ok((pass, format!("worst {} at {:.2e} of tolerance", worst.0, worst.1)))
    })
}

/// Lowest `count` eigenvalues above `floor`.
fn lowest_nonzero(vals: &[f64], count: usize, floor: f64) -> Vec<f64> {
    vals.iter().copied().filter(|&x| x > floor).take(count).collect()
}

pub fn pencil_vs_kdk(scale: f64) -> Criterion {
    timed(10, "pencil vs K D K lowest eigenvalues", || {
        let cd = perturbed_config().conformal_data()?;
        let mut pass = true;
        let mut details = Vec::new();
        for (n, tol) in [(16u32, 0.01), (24, 0.003)] {
            let w = BasisWindow::new(n);
            let (a, g) = gram_laplacian_matrix(&cd, &w)?;
            let pencil = generalized_spectrum(&a, &g)?;
            let (kdk, _) = perturbed_laplacian_matrix(&cd, &w)?;
            let direct = hermitian_spectrum(&kdk)?;
            let x = lowest_nonzero(&pencil.eigenvalues, 10, 1e-8);
            let y = lowest_nonzero(&direct.eigenvalues, 10, 1e-8);
            let worst = x.iter().zip(&y).map(|(a, b)| (a / b - 1.0).abs()).fold(0.0, f64::max);
            pass &= x.len() == 10 && y.len() == 10 && worst <= tol * scale;
            details.push(format!("N={n}: worst rel {worst:.1e}"));
        }
        Ok((pass, details.join("; ")))
    })
}

pub fn all(scale: f64) -> Vec<Criterion> {
    vec![
        flat_weyl(scale),
        anisotropic_weyl(scale),
        perturbed_weyl(scale),
        heat_routes(scale),
        residue_anchor(scale),
        dixmier_anchor(scale),
        connes_trace(scale),
        parametrix(scale),
        invariants(scale),
        pencil_vs_kdk(scale),
    ]
}

/// Runs a single criterion by number.
pub fn by_id(id: usize, scale: f64) -> Option<Criterion> {
    Some(match id {
        1 => flat_weyl(scale),
        2 => anisotropic_weyl(scale),
        3 => perturbed_weyl(scale),
        4 => heat_routes(scale),
        5 => residue_anchor(scale),
        6 => dixmier_anchor(scale),
        7 => connes_trace(scale),
        8 => parametrix(scale),
        9 => invariants(scale),
        10 => pencil_vs_kdk(scale),
        _ => return None,
    })
}
