use std::collections::BTreeMap;

use shannon_cert::analysis;
use shannon_cert::catalog::{self, CatalogEntry, Relaxation};
use shannon_cert::entropy::{self, CertifyOptions};
use shannon_cert::par;
use shannon_cert::probbounds::{self, BoundOptions};
use shannon_cert::sdp::SolveStatus;

fn entry(name: &str) -> CatalogEntry {
    catalog::get(name, &BTreeMap::new()).unwrap()
}

fn quick() -> CertifyOptions {
    CertifyOptions {
        restarts: Some(200),
        ..CertifyOptions::default()
    }
}

#[test]
fn extras_never_lower_the_bound() {
    for name in ["CHSH", "ModCHSH"] {
        let e = entry(name);
        for p in [0.03, 0.1, 0.2] {
            let plain = entropy::certify(&e, p, e.default_spot(), &quick()).unwrap();
            let extras = CertifyOptions {
                extras: true,
                ..quick()
            };
            let more = entropy::certify(&e, p, e.default_spot(), &extras).unwrap();
            assert!(
                more.shannon_lower >= plain.shannon_lower - 1e-6,
                "{name} p={p}: {} < {}",
                more.shannon_lower,
                plain.shannon_lower
            );
            assert_eq!(more.bounds.entries.len(), 14);
        }
    }
}

#[test]
fn certificate_is_internally_consistent() {
    let e = entry("CHSH");
    let c = entropy::certify(&e, 0.1, (0, 0), &quick()).unwrap();
    assert!(c.min_entropy <= c.shannon_lower + 1e-12);
    assert!(c.bounds.violation(&c.optimizer_dist) < 1e-8);
    let h = entropy::shannon_entropy(&c.optimizer_dist).unwrap();
    assert!(h >= c.shannon_lower - 1e-12);
    assert!(c.agreement.unwrap() < 1e-6);
    assert!(c.bounds.worst_status().is_usable());
    assert_eq!(c.level, Relaxation::default());
    // Bell target is (1 - p) times the verified bound.
    assert!((c.bounds.bell_target - 0.9 * 2.0 * std::f64::consts::SQRT_2).abs() < 1e-6);
}

#[test]
fn sequential_and_parallel_agree() {
    let e = entry("ModCHSH");
    let grid = [0.05, 0.15];
    let a = analysis::sweep(&e, e.default_spot(), &grid, &quick()).unwrap();
    par::set_sequential(true);
    let b = analysis::sweep(&e, e.default_spot(), &grid, &quick());
    par::set_sequential(false);
    let b = b.unwrap();
    for (x, y) in a.points.iter().zip(&b.points) {
        assert_eq!(x.certificate, y.certificate);
    }
}

#[test]
fn werner_witness_lies_in_its_box() {
    let e = entry("CHSH");
    let p = 0.12;
    let w = e.witness_behavior(p).unwrap();
    let exprs = probbounds::standard_expressions(true);
    let bx = probbounds::bound_box(&e, p, (0, 0), &exprs, &BoundOptions::default()).unwrap();
    let d = w.setting_distribution(0, 0).unwrap();
    assert!(bx.violation(&d) <= 1e-7, "violation {}", bx.violation(&d));
}

#[test]
fn full_noise_allows_any_distribution_consistent_with_zero_bell_value() {
    let e = entry("CHSH");
    let bx = probbounds::bound_box(&e, 1.0, (0, 0), &probbounds::standard_expressions(false), &BoundOptions::default())
        .unwrap();
    let (lo, hi) = bx.singles().unwrap();
    for k in 0..4 {
        assert!(lo[k] < 1e-6);
        assert!(hi[k] > 0.5 - 1e-6);
    }
    let c = entropy::certify_box(bx, &quick()).unwrap();
    assert!(c.shannon_lower.abs() < 1e-9);
}

#[test]
fn invalid_inputs_are_rejected_before_solving() {
    let e = entry("CHSH");
    assert!(entropy::certify(&e, 1.5, (0, 0), &quick()).is_err());
    assert!(entropy::certify(&e, 0.1, (2, 0), &quick()).is_err());
    assert!(analysis::sweep(&e, (0, 0), &[0.2, 0.1], &quick()).is_err());
    let stalled = CertifyOptions {
        tolerances: shannon_cert::sdp::Tolerances {
            max_iterations: 2,
            ..Default::default()
        },
        ..quick()
    };
    let err = entropy::certify(&e, 0.1, (0, 0), &stalled).unwrap_err();
    assert!(err.solver_status().is_some_and(|s| s != SolveStatus::Optimal));
}
