//! Entropy lower bounds over the polytope of outcome distributions allowed
//! by a [`BoundBox`].

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{CatalogEntry, Relaxation};
use crate::error::{Error, Result};
use crate::par;
use crate::probbounds::{self, BoundBox, BoundOptions};
use crate::sdp::{Relation, Tolerances};

/// Independent basin-hopping chains, one per corner of the three free
/// coordinates; fixed so results do not depend on the thread count.
pub const CHAINS: usize = 8;
pub const DEFAULT_RESTARTS: usize = 1500;
pub const DEFAULT_RESTARTS_EXTRAS: usize = 100;
pub const DEFAULT_SEED: u64 = 42;

const STEP: f64 = 0.1;
const FEASIBILITY: f64 = 1e-8;
const GRADIENT_CAP: f64 = 60.0;

/// Shannon entropy in bits.
pub fn shannon_entropy(dist: &[f64]) -> Result<f64> {
    if dist.is_empty() {
        return Err(Error::arg("empty distribution"));
    }
    if dist.iter().any(|&q| !(q >= 0.0) || !q.is_finite()) {
        return Err(Error::arg("distribution has a negative or non-finite entry"));
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > 1e-10 {
        return Err(Error::arg(format!("distribution sums to {sum}, not 1")));
    }
    Ok(entropy_unchecked(dist).clamp(0.0, (dist.len() as f64).log2()))
}

fn entropy_unchecked(dist: &[f64]) -> f64 {
    // Subtracting from 0.0 avoids returning -0.0.
    0.0 - dist
        .iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| q * q.log2())
        .sum::<f64>()
}

/// `-log2` of the largest upper bound on a single outcome probability.
pub fn min_entropy(bounds: &BoundBox) -> Result<f64> {
    let (_, hi) = bounds.singles()?;
    let max = hi.iter().copied().fold(0.0f64, f64::max);
    Ok(0.0 - max.log2())
}

/// Half-spaces `a . v <= c` in the free coordinates `v = (q0, q1, q2)`,
/// with `q3 = 1 - v0 - v1 - v2`.
#[derive(Clone, Debug)]
struct Polytope {
    rows: Vec<([f64; 3], f64)>,
    /// Coordinate ranges from the single-probability bounds; chain starts
    /// are drawn from here.
    span: [(f64, f64); 3],
}

impl Polytope {
    fn from_box(bounds: &BoundBox) -> Polytope {
        let mut rows = Vec::new();
        let mut push = |a: [f64; 3], c: f64| {
            let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
            if n > 0.0 {
                rows.push(([a[0] / n, a[1] / n, a[2] / n], c / n));
            }
        };
        let mut span = [(0.0, 1.0); 3];
        for e in &bounds.entries {
            if let Some(k @ 0..=2) = e.expr.single_index() {
                span[k] = (e.lo.max(0.0), e.hi.min(1.0).max(e.lo.max(0.0)));
            }
        }
        // Simplex.
        for k in 0..3 {
            let mut a = [0.0; 3];
            a[k] = -1.0;
            push(a, 0.0);
        }
        push([1.0; 3], 1.0);
        for e in &bounds.entries {
            let c = e.expr.coeffs;
            let a = [c[0] - c[3], c[1] - c[3], c[2] - c[3]];
            push(a, e.hi - c[3]);
            push([-a[0], -a[1], -a[2]], c[3] - e.lo);
        }
        Polytope { rows, span }
    }

    fn violation(&self, v: &[f64; 3]) -> f64 {
        self.rows
            .iter()
            .map(|(a, c)| dot3(a, v) - c)
            .fold(0.0, f64::max)
    }

    /// Euclidean projection. In three dimensions the nearest point lies in
    /// the affine hull of at most three active planes, so it is the closest
    /// feasible projection onto such a hull.
    fn project(&self, y: &[f64; 3]) -> [f64; 3] {
        if self.violation(y) <= PROJECTION_SLACK {
            return *y;
        }
        let n = self.rows.len();
        let mut best: Option<([f64; 3], f64)> = None;
        let mut fallback = (*y, f64::INFINITY);
        let mut consider = |x: [f64; 3]| {
            let viol = self.violation(&x);
            let d = (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2);
            if viol <= PROJECTION_SLACK {
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((x, d));
                }
            } else if viol < fallback.1 {
                fallback = (x, viol);
            }
        };
        for i in 0..n {
            // A plane that `y` already satisfies cannot be the only active one.
            let (a, c) = &self.rows[i];
            if dot3(a, y) > *c {
                consider(onto_planes(y, &[&self.rows[i]]).unwrap());
            }
            for j in i + 1..n {
                if let Some(x) = onto_planes(y, &[&self.rows[i], &self.rows[j]]) {
                    consider(x);
                }
                for k in j + 1..n {
                    if let Some(x) = onto_planes(y, &[&self.rows[i], &self.rows[j], &self.rows[k]]) {
                        consider(x);
                    }
                }
            }
        }
        best.map_or(fallback.0, |b| b.0)
    }
}

/// Slack allowed on unit-normal constraints after projection.
const PROJECTION_SLACK: f64 = 1e-12;

/// Projection of `y` onto the intersection of up to three planes with
/// unit normals; `None` when they are dependent.
fn onto_planes(y: &[f64; 3], planes: &[&([f64; 3], f64)]) -> Option<[f64; 3]> {
    let m = planes.len();
    let mut gram = [[0.0; 3]; 3];
    let mut rhs = [0.0; 3];
    for i in 0..m {
        for j in 0..m {
            gram[i][j] = dot3(&planes[i].0, &planes[j].0);
        }
        rhs[i] = dot3(&planes[i].0, y) - planes[i].1;
    }
    let lambda = solve_small(&gram, &rhs, m)?;
    let mut x = *y;
    for i in 0..m {
        for d in 0..3 {
            x[d] -= lambda[i] * planes[i].0[d];
        }
    }
    Some(x)
}

/// Gaussian elimination with partial pivoting on the leading `m x m` block.
fn solve_small(a: &[[f64; 3]; 3], b: &[f64; 3], m: usize) -> Option<[f64; 3]> {
    let mut a = *a;
    let mut b = *b;
    for col in 0..m {
        let piv = (col..m).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-10 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..m {
            let f = a[r][col] / a[col][col];
            for c in col..m {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for r in (0..m).rev() {
        let s: f64 = (r + 1..m).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn full(v: &[f64; 3]) -> [f64; 4] {
    let r = 1.0 - v[0] - v[1] - v[2];
    [v[0].max(0.0), v[1].max(0.0), v[2].max(0.0), r.max(0.0)]
}

fn objective(v: &[f64; 3]) -> f64 {
    entropy_unchecked(&full(v))
}

/// Gradient in the free coordinates: `log2(q3 / q_k)`, capped near the
/// boundary where it diverges.
fn gradient(v: &[f64; 3]) -> [f64; 3] {
    let q = full(v);
    let lr = q[3].max(1e-300).log2();
    let mut g = [0.0; 3];
    for k in 0..3 {
        g[k] = (lr - q[k].max(1e-300).log2()).clamp(-GRADIENT_CAP, GRADIENT_CAP);
    }
    g
}

/// Projected gradient descent with Armijo backtracking.
fn descend(poly: &Polytope, start: [f64; 3], tol: f64) -> ([f64; 3], f64) {
    let mut x = start;
    let mut h = objective(&x);
    let mut t = 0.05;
    for _ in 0..1000 {
        let g = gradient(&x);
        let mut next = None;
        while t > 1e-14 {
            let y = poly.project(&[x[0] - t * g[0], x[1] - t * g[1], x[2] - t * g[2]]);
            let d = [y[0] - x[0], y[1] - x[1], y[2] - x[2]];
            if d.iter().all(|v| v.abs() < 1e-15) {
                break;
            }
            let hy = objective(&y);
            if hy <= h + 1e-4 * dot3(&g, &d) {
                next = Some((y, hy));
                break;
            }
            t *= 0.5;
        }
        match next {
            Some((y, hy)) => {
                let decrease = h - hy;
                x = y;
                h = hy;
                t = (2.0 * t).min(10.0);
                if decrease <= 1e-3 * tol && t < 1e-6 {
                    break;
                }
            }
            None => break,
        }
    }
    (x, h)
}

/// Corner `chain` (bit k picks the upper end of coordinate k) of the
/// coordinate ranges. Concave minima sit at extreme points, and simplex-uniform
/// starts crowd one end of thin sets after projection.
fn corner_start(poly: &Polytope, chain: usize) -> [f64; 3] {
    std::array::from_fn(|k| {
        let (lo, hi) = poly.span[k];
        if chain >> k & 1 == 1 {
            hi
        } else {
            lo
        }
    })
}

#[derive(Clone, Copy, Debug)]
struct ChainResult {
    v: [f64; 3],
    h: f64,
}

fn better(a: &ChainResult, b: &ChainResult) -> Ordering {
    a.h.total_cmp(&b.h).then_with(|| {
        let (qa, qb) = (full(&a.v), full(&b.v));
        qa.iter()
            .zip(&qb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

fn run_chain(poly: &Polytope, hops: usize, seed: u64, chain: usize, tol: f64) -> ChainResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    let start = poly.project(&corner_start(poly, chain));
    let (v, h) = descend(poly, start, tol);
    let mut best = ChainResult { v, h };
    for _ in 0..hops {
        let mut y = best.v;
        for c in y.iter_mut() {
            *c += rng.random_range(-STEP..STEP);
        }
        let (v, h) = descend(poly, poly.project(&y), tol);
        if h < best.h {
            best = ChainResult { v, h };
        }
    }
    best
}

/// Minimum of the Shannon entropy over the box polytope by basin hopping.
/// `restarts` perturbation rounds are split over [`CHAINS`] seeded chains.
pub fn minimize_entropy(bounds: &BoundBox, restarts: usize, seed: u64, tol: f64) -> Result<([f64; 4], f64)> {
    if !(tol > 0.0) {
        return Err(Error::arg("tolerance must be positive"));
    }
    if bounds.entries.iter().any(|e| !(e.lo <= e.hi) || !e.lo.is_finite() || !e.hi.is_finite()) {
        return Err(Error::Infeasible("bound box has an empty or undefined interval".into()));
    }
    let poly = Polytope::from_box(bounds);
    let probe = poly.project(&[0.25; 3]);
    if poly.violation(&probe) > FEASIBILITY {
        return Err(Error::Infeasible(format!(
            "no distribution satisfies the bounds (violation {:.2e})",
            poly.violation(&probe)
        )));
    }
    let results = par::map_range(CHAINS, |c| {
        let hops = restarts / CHAINS + usize::from(c < restarts % CHAINS);
        run_chain(&poly, hops, seed, c, tol)
    });
    let best = results
        .into_iter()
        .min_by(better)
        .expect("at least one chain");
    let dist = full(&best.v);
    Ok((dist, entropy_unchecked(&dist).clamp(0.0, 2.0)))
}

/// Which outcome sits at its upper bound and which takes the remainder in
/// the closed-form candidate; the other two sit at their lower bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConjectureRoles {
    pub lower: [usize; 2],
    pub upper: usize,
    pub residual: usize,
}

impl ConjectureRoles {
    /// The three bound values that determine the candidate, ordered
    /// (first lower, second lower, upper).
    pub fn bound_values(&self, lo: &[f64; 4], hi: &[f64; 4]) -> [f64; 3] {
        [lo[self.lower[0]], lo[self.lower[1]], hi[self.upper]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conjecture {
    pub roles: ConjectureRoles,
    pub dist: [f64; 4],
    pub entropy: f64,
}

/// Every feasible closed-form candidate: one outcome at its upper bound,
/// two at their lower bounds and the last taking the remainder. Sorted by
/// entropy, ties broken by the lexicographically smaller distribution.
pub fn conjecture_candidates(bounds: &BoundBox) -> Result<Vec<Conjecture>> {
    let (lo, hi) = bounds.singles()?;
    let mut out = Vec::new();
    for upper in 0..4 {
        for residual in (0..4).filter(|&r| r != upper) {
            let mut q = lo;
            q[upper] = hi[upper];
            let rest: f64 = (0..4).filter(|&k| k != residual).map(|k| q[k]).sum();
            q[residual] = 1.0 - rest;
            if q[residual] < -FEASIBILITY || bounds.violation(&q) > FEASIBILITY {
                continue;
            }
            q[residual] = q[residual].max(0.0);
            let mut lower = (0..4).filter(|&k| k != upper && k != residual);
            let roles = ConjectureRoles {
                lower: [lower.next().unwrap(), lower.next().unwrap()],
                upper,
                residual,
            };
            out.push(Conjecture {
                roles,
                dist: q,
                entropy: entropy_unchecked(&q),
            });
        }
    }
    let lex = |a: &[f64; 4], b: &[f64; 4]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    };
    out.sort_by(|a, b| {
        if (a.entropy - b.entropy).abs() <= 1e-12 {
            lex(&a.dist, &b.dist)
        } else {
            a.entropy.total_cmp(&b.entropy)
        }
    });
    Ok(out)
}

/// The least-entropy candidate of [`conjecture_candidates`], or `None`
/// when no role assignment fits the box.
pub fn conjecture(bounds: &BoundBox) -> Result<Option<Conjecture>> {
    Ok(conjecture_candidates(bounds)?.into_iter().next())
}

/// Distribution and entropy of [`conjecture`].
pub fn conjecture_distribution(bounds: &BoundBox) -> Result<Option<([f64; 4], f64)>> {
    Ok(conjecture(bounds)?.map(|c| (c.dist, c.entropy)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CertifyOptions {
    pub relaxation: Relaxation,
    /// Also bound the pair and triple sums.
    pub extras: bool,
    /// Perturbation rounds; `None` picks the default for `extras`.
    pub restarts: Option<usize>,
    pub seed: u64,
    pub relation: Relation,
    pub tolerances: Tolerances,
    pub entropy_tol: f64,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        CertifyOptions {
            relaxation: Relaxation::default(),
            extras: false,
            restarts: None,
            seed: DEFAULT_SEED,
            relation: Relation::Equal,
            tolerances: Tolerances::default(),
            entropy_tol: 1e-9,
        }
    }
}

impl CertifyOptions {
    pub fn restarts(&self) -> usize {
        self.restarts.unwrap_or(if self.extras {
            DEFAULT_RESTARTS_EXTRAS
        } else {
            DEFAULT_RESTARTS
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyCertificate {
    pub inequality: String,
    pub p: f64,
    /// 0-based setting.
    pub spot: (usize, usize),
    pub shannon_lower: f64,
    pub min_entropy: f64,
    pub optimizer_dist: [f64; 4],
    pub conjecture_dist: Option<[f64; 4]>,
    pub conjecture_entropy: Option<f64>,
    pub conjecture_roles: Option<ConjectureRoles>,
    pub agreement: Option<f64>,
    pub restarts_used: usize,
    pub level: Relaxation,
    pub bounds: BoundBox,
}

/// Bounds the outcome probabilities at `spot`, then minimizes the entropy
/// over them.
pub fn certify(entry: &CatalogEntry, p: f64, spot: (usize, usize), options: &CertifyOptions) -> Result<EntropyCertificate> {
    let exprs = probbounds::standard_expressions(options.extras);
    let bound_options = BoundOptions {
        relaxation: options.relaxation,
        relation: options.relation,
        tolerances: options.tolerances,
    };
    let bounds = probbounds::bound_box(entry, p, spot, &exprs, &bound_options).map_err(|e| e.in_stage("bounds"))?;
    certify_box(bounds, options)
}

/// The entropy stages of [`certify`] on an already computed box.
pub fn certify_box(bounds: BoundBox, options: &CertifyOptions) -> Result<EntropyCertificate> {
    let restarts = options.restarts();
    let (dist, shannon) =
        minimize_entropy(&bounds, restarts, options.seed, options.entropy_tol).map_err(|e| e.in_stage("entropy"))?;
    let hmin = min_entropy(&bounds).map_err(|e| e.in_stage("min-entropy"))?;
    let closed = conjecture(&bounds).map_err(|e| e.in_stage("conjecture"))?;
    if closed.is_none() {
        log::debug!("closed-form candidate infeasible for {} at p={}", bounds.inequality, bounds.p);
    }
    // The closed-form point is feasible, so its entropy also bounds the
    // minimum from above.
    let lowest = closed.map_or(shannon, |c| shannon.min(c.entropy));
    Ok(EntropyCertificate {
        inequality: bounds.inequality.clone(),
        p: bounds.p,
        spot: bounds.spot,
        shannon_lower: lowest,
        min_entropy: hmin,
        optimizer_dist: dist,
        conjecture_dist: closed.map(|c| c.dist),
        conjecture_entropy: closed.map(|c| c.entropy),
        conjecture_roles: closed.map(|c| c.roles),
        agreement: closed.map(|c| (shannon - c.entropy).abs()),
        restarts_used: restarts,
        level: bounds.relaxation,
        bounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probbounds::{standard_expressions, LinearExpr};

    fn pinned(q: [f64; 4]) -> BoundBox {
        BoundBox::from_singles(q, q).unwrap()
    }

    #[test]
    fn entropy_examples() {
        assert!((shannon_entropy(&[0.25; 4]).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(shannon_entropy(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 0.0);
        let h = shannon_entropy(&[0.4267767, 0.0732233, 0.0732233, 0.4267767]).unwrap();
        assert!((h - 1.6009).abs() < 1e-3, "{h}");
        assert!(shannon_entropy(&[0.5, 0.6, -0.1]).is_err());
        assert!(shannon_entropy(&[0.5, 0.4]).is_err());
    }

    #[test]
    fn min_entropy_of_uniform_box() {
        let b = pinned([0.25; 4]);
        assert!((min_entropy(&b).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pinned_box_gives_uniform() {
        let b = pinned([0.25; 4]);
        let (q, h) = minimize_entropy(&b, 16, 1, 1e-9).unwrap();
        assert!((h - 2.0).abs() < 1e-9);
        for v in q {
            assert!((v - 0.25).abs() < 1e-9);
        }
        let (q, h) = conjecture_distribution(&b).unwrap().unwrap();
        assert_eq!(q, [0.25; 4]);
        assert!((h - 2.0).abs() < 1e-12);
    }

    #[test]
    fn unconstrained_minimum_is_deterministic_point() {
        let b = BoundBox::from_singles([0.0; 4], [1.0; 4]).unwrap();
        let (q, h) = minimize_entropy(&b, 40, 3, 1e-9).unwrap();
        assert!(h < 1e-9, "{h} at {q:?}");
    }

    #[test]
    fn infeasible_box_is_reported() {
        let b = BoundBox::from_singles([0.3; 4], [0.4; 4]).unwrap();
        assert!(matches!(minimize_entropy(&b, 8, 0, 1e-9), Err(Error::Infeasible(_))));
        assert_eq!(conjecture_distribution(&b).unwrap(), None);
    }

    #[test]
    fn conjecture_checks_pair_constraints() {
        let exprs = standard_expressions(true);
        let box_with = |pair_hi: f64| {
            let mut iv: Vec<(f64, f64)> = vec![(0.1, 0.5); 4];
            for e in &exprs[4..] {
                let n = e.coeffs.iter().sum::<f64>();
                iv.push((0.1 * n, if n == 2.0 { pair_hi } else { 1.0 }));
            }
            BoundBox::from_intervals(exprs.clone(), &iv).unwrap()
        };
        // Every candidate puts 0.5 and the 0.3 remainder on a pair.
        assert_eq!(conjecture_distribution(&box_with(0.55)).unwrap(), None);
        let b = box_with(0.8);
        let (q, h) = conjecture_distribution(&b).unwrap().unwrap();
        assert!(b.violation(&q) <= 1e-12);
        for (a, b) in q.iter().zip([0.1, 0.1, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-12, "{q:?}");
        }
        let (_, hopt) = minimize_entropy(&b, 80, 2, 1e-9).unwrap();
        assert!((h - hopt).abs() < 1e-9, "{h} vs {hopt}");
    }

    #[test]
    fn chains_are_reproducible() {
        let b = BoundBox::from_singles([0.05, 0.1, 0.15, 0.2], [0.4, 0.45, 0.5, 0.55]).unwrap();
        let a = minimize_entropy(&b, 50, 9, 1e-9).unwrap();
        let c = minimize_entropy(&b, 50, 9, 1e-9).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn single_expression_box() {
        let e = LinearExpr::sum_of(&[0, 3]);
        let mut exprs = standard_expressions(false);
        exprs.push(e);
        let iv = [(0.0, 1.0), (0.0, 1.0), (0.0, 1.0), (0.0, 1.0), (0.8, 0.9)];
        let b = BoundBox::from_intervals(exprs, &iv).unwrap();
        let (q, h) = minimize_entropy(&b, 40, 5, 1e-9).unwrap();
        assert!(b.violation(&q) < 1e-8);
        // Best is all mass at one of the two outcomes, the rest forced
        // elsewhere: [0.9, 0.1] split -> H(0.1).
        let want = -(0.9f64 * 0.9f64.log2() + 0.1 * 0.1f64.log2());
        assert!((h - want).abs() < 1e-7, "{h} vs {want}");
    }
}
