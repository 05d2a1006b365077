//! Randomized algebraic identities on bandwidth-4 elements.

use nctorus::algebra::{hermitian_pair, ConformalData, DeformationAngle, ModuliPoint, NcElement, DEFAULT_PAD};
use nctorus::psido::{adjoint_symbol, apply_op, compose, OriginPolicy, PolySymbol};
use nctorus::Complex64 as C64;
use proptest::prelude::*;

const B: i32 = 4;

fn th() -> DeformationAngle {
    DeformationAngle::golden()
}

fn sparse_element(max_terms: usize) -> impl Strategy<Value = NcElement> {
    prop::collection::vec(((-B..=B, -B..=B), -1.0..1.0f64, -1.0..1.0f64), 1..max_terms).prop_map(|terms| {
        NcElement::from_coeffs(th(), terms.into_iter().map(|(mn, re, im)| (mn, C64::new(re, im))))
    })
}

fn element() -> impl Strategy<Value = NcElement> {
    sparse_element(12)
}

/// Small selfadjoint weight; few terms keep the exponentials cheap.
fn selfadjoint() -> impl Strategy<Value = NcElement> {
    sparse_element(4).prop_map(|a| (&a + &a.adjoint()).scale_re(0.1))
}

/// Differential operator of order <= 2 with random coefficients.
fn poly() -> impl Strategy<Value = PolySymbol> {
    prop::collection::vec(((0u32..=2, 0u32..=2), element()), 1..4).prop_map(|terms| {
        let mut p = PolySymbol::new(th());
        for ((j1, j2), a) in terms {
            if j1 + j2 <= 2 {
                p.add_term(j1, j2, a);
            }
        }
        p
    })
}

fn mono(m: i32, n: i32) -> NcElement {
    NcElement::monomial(m, n, C64::new(1.0, 0.0), th())
}

/// `<a, b> = t(b^* a)`.
fn inner(a: &NcElement, b: &NcElement) -> C64 {
    b.adjoint().trace_of_product(a).unwrap()
}

fn scale(a: &NcElement) -> f64 {
    1.0 + a.l1_norm()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn commutation(m in -B..=B, n in -B..=B, p in -B..=B, q in -B..=B) {
        let lhs = mono(m, n).mul(&mono(p, q)).unwrap();
        let rhs = mono(p, q).mul(&mono(m, n)).unwrap();
        // U^m V^n U^p V^q = e^{2 pi i theta (np - mq)} U^p V^q U^m V^n
        let phase = th().twist(n as i64 * p as i64 - m as i64 * q as i64);
        prop_assert!(lhs.max_diff(&rhs.scale(phase)) < 1e-12);
        let vu = mono(0, 1).mul(&mono(1, 0)).unwrap();
        let uv = mono(1, 0).mul(&mono(0, 1)).unwrap();
        prop_assert!(vu.max_diff(&uv.scale(th().twist(1))) < 1e-15);
    }

    #[test]
    fn trace_cyclicity(a in element(), b in element()) {
        let ab = a.mul(&b).unwrap().trace();
        let ba = b.mul(&a).unwrap().trace();
        prop_assert!((ab - ba).norm() < 1e-12 * scale(&a) * scale(&b));
        prop_assert!((a.trace_of_product(&b).unwrap() - ab).norm() < 1e-12 * scale(&a) * scale(&b));
    }

    #[test]
    fn integration_by_parts(a in element(), b in element(), axis in 1u8..=2) {
        prop_assert!(a.delta(axis).unwrap().trace().norm() < 1e-12);
        let lhs = a.trace_of_product(&b.delta(axis).unwrap()).unwrap();
        let rhs = -a.delta(axis).unwrap().trace_of_product(&b).unwrap();
        prop_assert!((lhs - rhs).norm() < 1e-11 * scale(&a) * scale(&b));
    }

    #[test]
    fn star_derivation(a in element(), axis in 1u8..=2) {
        let lhs = a.adjoint().delta(axis).unwrap();
        let rhs = -&a.delta(axis).unwrap().adjoint();
        prop_assert!(lhs.max_diff(&rhs) < 1e-12);
    }

    #[test]
    fn leibniz(a in element(), b in element(), axis in 1u8..=2) {
        let lhs = a.mul(&b).unwrap().delta(axis).unwrap();
        let rhs = &a.delta(axis).unwrap().mul(&b).unwrap() + &a.mul(&b.delta(axis).unwrap()).unwrap();
        prop_assert!(lhs.max_diff(&rhs) < 1e-11 * scale(&a) * scale(&b));
    }

    #[test]
    fn kms_twisted_trace(h in selfadjoint(), a in element(), b in element()) {
        // pad counts modes, not powers of h
        let pad = DEFAULT_PAD / 2 * (h.bandwidth() + 1);
        let cd = ConformalData::new(ModuliPoint::i(), h, pad).unwrap();
        // phi(a b) = phi(b Delta(a))
        let lhs = cd.phi(&a.mul(&b).unwrap()).unwrap();
        let rhs = cd.phi(&b.mul(&cd.modular(&a).unwrap()).unwrap()).unwrap();
        prop_assert!((lhs - rhs).norm() < 1e-10 * scale(&a) * scale(&b));
    }

    #[test]
    fn adjoint_symbol_pairing(p in poly(), x in element(), y in element()) {
        let g = p.to_graded();
        let adj = adjoint_symbol(&g, 0).unwrap();
        let (px, _) = apply_op(&g, &x, OriginPolicy::Reject).unwrap();
        let (ay, _) = apply_op(&adj, &y, OriginPolicy::Reject).unwrap();
        let lhs = inner(&px, &y);
        let rhs = inner(&x, &ay);
        prop_assert!((lhs - rhs).norm() < 1e-10 * (1.0 + lhs.norm()), "{lhs} vs {rhs}");
    }

    #[test]
    fn composition_matches_operator_product(p in poly(), q in poly(), x in element()) {
        let pq = compose(&p.to_graded(), &q.to_graded(), 0).unwrap();
        let direct = p.apply(&q.apply(&x).unwrap()).unwrap();
        let (via, _) = apply_op(&pq, &x, OriginPolicy::Reject).unwrap();
        prop_assert!(direct.max_diff(&via) < 1e-10 * scale(&direct));
    }

    #[test]
    fn composition_is_associative(p in poly(), q in poly(), r in poly()) {
        let (p, q, r) = (p.to_graded(), q.to_graded(), r.to_graded());
        let left = compose(&compose(&p, &q, 0).unwrap(), &r, 0).unwrap();
        let right = compose(&p, &compose(&q, &r, 0).unwrap(), 0).unwrap();
        prop_assert!(left.sub(&right).max_abs() < 1e-10 * (1.0 + left.max_abs()));
    }
}

#[test]
fn default_weight_is_hermitian() {
    let h = hermitian_pair(th(), 1, 0, 0.4);
    assert_eq!(h.selfadjoint_defect(), 0.0);
}
