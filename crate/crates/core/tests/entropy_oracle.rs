//! Entropy minimization against brute-force vertex enumeration. The entropy
//! is concave, so its minimum over a polytope sits at a vertex.

use proptest::prelude::*;
use shannon_cert::entropy::{conjecture, minimize_entropy, shannon_entropy, DEFAULT_RESTARTS};
use shannon_cert::probbounds::{standard_expressions, BoundBox};

/// `a . v <= b` in the free coordinates `v = (q_mm, q_mp, q_pm)`.
fn halfspaces(bx: &BoundBox) -> Vec<([f64; 3], f64)> {
    let mut rows = Vec::new();
    // c . q = c3 + sum_k (c_k - c3) v_k
    let mut push = |c: [f64; 4], lo: f64, hi: f64| {
        let a = [c[0] - c[3], c[1] - c[3], c[2] - c[3]];
        rows.push((a, hi - c[3]));
        rows.push((a.map(|x| -x), c[3] - lo));
    };
    for k in 0..4 {
        let mut c = [0.0; 4];
        c[k] = 1.0;
        push(c, 0.0, 1.0);
    }
    for e in &bx.entries {
        push(e.expr.coeffs, e.lo, e.hi);
    }
    rows
}

fn det3(m: [[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn vertices(bx: &BoundBox) -> Vec<[f64; 4]> {
    let rows = halfspaces(bx);
    let n = rows.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let m = [rows[i].0, rows[j].0, rows[k].0];
                let b = [rows[i].1, rows[j].1, rows[k].1];
                let d = det3(m);
                if d.abs() < 1e-12 {
                    continue;
                }
                let mut v = [0.0; 3];
                for (c, vc) in v.iter_mut().enumerate() {
                    let mut mc = m;
                    for r in 0..3 {
                        mc[r][c] = b[r];
                    }
                    *vc = det3(mc) / d;
                }
                let ok = rows.iter().all(|(a, rhs)| a[0] * v[0] + a[1] * v[1] + a[2] * v[2] <= rhs + 1e-10);
                if ok {
                    let q = [v[0], v[1], v[2], 1.0 - v[0] - v[1] - v[2]].map(|x| x.max(0.0));
                    let s: f64 = q.iter().sum();
                    let q = q.map(|x| x / s);
                    // Degenerate vertices show up once per active triple.
                    if !out.iter().any(|u: &[f64; 4]| (0..4).all(|t| (u[t] - q[t]).abs() < 1e-12)) {
                        out.push(q);
                    }
                }
            }
        }
    }
    out
}

fn oracle_min(bx: &BoundBox) -> f64 {
    vertices(bx)
        .iter()
        .map(|q| shannon_entropy(q).unwrap())
        .fold(f64::INFINITY, f64::min)
}

fn simplex_point() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(0.0f64..1.0).prop_map(|w| {
        let s: f64 = w.iter().sum::<f64>() + 1e-12;
        w.map(|x| x / s)
    })
}

fn singles_box() -> impl Strategy<Value = BoundBox> {
    (simplex_point(), prop::array::uniform4(0.0f64..0.3), prop::array::uniform4(0.0f64..0.3)).prop_map(
        |(d, below, above)| {
            let lo: [f64; 4] = std::array::from_fn(|i| (d[i] - below[i]).max(0.0));
            let hi: [f64; 4] = std::array::from_fn(|i| (d[i] + above[i]).min(1.0));
            BoundBox::from_singles(lo, hi).unwrap()
        },
    )
}

fn extras_box() -> impl Strategy<Value = BoundBox> {
    (simplex_point(), prop::collection::vec((0.0f64..0.2, 0.0f64..0.2), 14)).prop_map(|(d, widths)| {
        let exprs = standard_expressions(true);
        let iv: Vec<(f64, f64)> = exprs
            .iter()
            .zip(&widths)
            .map(|(e, &(a, b))| {
                let v = e.evaluate(&d);
                ((v - a).max(0.0), (v + b).min(1.0))
            })
            .collect();
        BoundBox::from_intervals(exprs, &iv).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn optimizer_matches_vertex_minimum(bx in singles_box(), seed in 0u64..1000) {
        let (dist, h) = minimize_entropy(&bx, DEFAULT_RESTARTS, seed, 1e-10).unwrap();
        let want = oracle_min(&bx);
        prop_assert!((h - want).abs() < 1e-6, "optimizer {h} vs vertices {want}");
        prop_assert!(bx.violation(&dist) < 1e-8);
    }

    #[test]
    fn optimizer_matches_vertex_minimum_with_pair_sums(bx in extras_box()) {
        let (dist, h) = minimize_entropy(&bx, 100, 42, 1e-10).unwrap();
        let want = oracle_min(&bx);
        prop_assert!((h - want).abs() < 1e-6, "optimizer {h} vs vertices {want}");
        prop_assert!(bx.violation(&dist) < 1e-8);
    }

    #[test]
    fn closed_form_is_never_below_the_minimum(bx in singles_box()) {
        if let Some(c) = conjecture(&bx).unwrap() {
            prop_assert!(c.entropy >= oracle_min(&bx) - 1e-9);
            prop_assert!(bx.violation(&c.dist) <= 1e-8);
        }
    }

    #[test]
    fn feasible_points_bound_the_minimum(bx in singles_box(), weights in prop::collection::vec(0.01f64..1.0, 1..8)) {
        let verts = vertices(&bx);
        let total: f64 = weights.iter().sum();
        let mut q = [0.0; 4];
        for (k, w) in weights.iter().enumerate() {
            let v = verts[k % verts.len()];
            for i in 0..4 {
                q[i] += w / total * v[i];
            }
        }
        let s: f64 = q.iter().sum();
        let q = q.map(|x| x / s);
        prop_assert!(bx.violation(&q) < 1e-9);
        let (_, h) = minimize_entropy(&bx, 200, 42, 1e-10).unwrap();
        prop_assert!(shannon_entropy(&q).unwrap() >= h - 1e-9);
    }

    #[test]
    fn shrinking_the_box_never_lowers_the_minimum(bx in singles_box(), cut in 0.0f64..0.5) {
        let (lo, hi) = bx.singles().unwrap();
        let lo2: [f64; 4] = std::array::from_fn(|i| lo[i] + cut * 0.5 * (hi[i] - lo[i]));
        let hi2: [f64; 4] = std::array::from_fn(|i| hi[i] - cut * 0.5 * (hi[i] - lo[i]));
        let inner = BoundBox::from_singles(lo2, hi2).unwrap();
        if !vertices(&inner).is_empty() {
            prop_assert!(oracle_min(&inner) >= oracle_min(&bx) - 1e-12);
            let (_, h_in) = minimize_entropy(&inner, 200, 42, 1e-10).unwrap();
            let (_, h_out) = minimize_entropy(&bx, 200, 42, 1e-10).unwrap();
            prop_assert!(h_in >= h_out - 1e-7);
        }
    }

    #[test]
    fn entropy_is_permutation_invariant_and_bounded(d in simplex_point(), k in 0usize..4) {
        let h = shannon_entropy(&d).unwrap();
        let mut e = d;
        e.rotate_left(k);
        prop_assert!((shannon_entropy(&e).unwrap() - h).abs() < 1e-12);
        prop_assert!((0.0..=2.0 + 1e-12).contains(&h));
    }
}

#[test]
fn point_box_has_its_own_entropy() {
    let d = [0.1, 0.2, 0.3, 0.4];
    let bx = BoundBox::from_singles(d, d).unwrap();
    let (_, h) = minimize_entropy(&bx, 16, 1, 1e-10).unwrap();
    assert!((h - shannon_entropy(&d).unwrap()).abs() < 1e-9);
}

#[test]
fn full_simplex_minimum_is_zero() {
    let bx = BoundBox::from_singles([0.0; 4], [1.0; 4]).unwrap();
    assert_eq!(vertices(&bx).len(), 4);
    let (_, h) = minimize_entropy(&bx, 64, 3, 1e-10).unwrap();
    assert!(h.abs() < 1e-9);
}
