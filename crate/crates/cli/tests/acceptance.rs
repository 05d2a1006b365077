//! Acceptance suite: one test per criterion, each printing a single
//! PASS/FAIL line to stderr (bypassing the harness capture).

use std::io::Write;

use nctorus_cli::criteria::{self, Criterion};

fn report(c: Criterion) {
    let line = format!(
        "[acceptance] criterion {:>2} {}: {} | {} | {:.2}s\n",
        c.id,
        if c.pass { "PASS" } else { "FAIL" },
        c.name,
        c.detail,
        c.seconds
    );
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(c.pass, "{}", line.trim_end());
}

macro_rules! criterion {
    ($name:ident, $f:path) => {
        #[test]
        fn $name() {
            report($f(1.0));
        }
    };
}

criterion!(c01_flat_weyl, criteria::flat_weyl);
criterion!(c02_anisotropic_weyl, criteria::anisotropic_weyl);
criterion!(c03_perturbed_weyl, criteria::perturbed_weyl);
criterion!(c04_heat_three_routes, criteria::heat_routes);
criterion!(c05_residue_anchor, criteria::residue_anchor);
criterion!(c06_dixmier_anchor, criteria::dixmier_anchor);
criterion!(c07_connes_trace, criteria::connes_trace);
criterion!(c08_parametrix_identity, criteria::parametrix);
criterion!(c09_invariant_suite, criteria::invariants);
criterion!(c10_pencil_vs_kdk, criteria::pencil_vs_kdk);
