//! Certified intervals for linear combinations of the outcome
//! probabilities at one input pair, under a noise-scaled Bell constraint.

use serde::{Deserialize, Serialize};

use crate::catalog::{CatalogEntry, Relaxation};
use crate::error::{Error, Result};
use crate::npa::{LinearFunctional, MomentProblem};
use crate::par;
use crate::scenario::JOINT_OUTCOMES;
use crate::sdp::{self, Direction, LinearConstraint, Relation, SolveStatus, Tolerances};

const SHORT: [&str; 4] = ["P_mm", "P_mp", "P_pm", "P_pp"];

/// Linear combination of `P(a,b|x0,y0)`; coefficients follow the fixed
/// outcome order (-1,-1), (-1,+1), (+1,-1), (+1,+1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearExpr {
    pub label: String,
    pub coeffs: [f64; 4],
}

impl LinearExpr {
    pub fn new(label: impl Into<String>, coeffs: [f64; 4]) -> Result<Self> {
        if coeffs.iter().all(|&c| c == 0.0) || coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::arg("linear expression needs finite, not all zero coefficients"));
        }
        Ok(LinearExpr {
            label: label.into(),
            coeffs,
        })
    }

    /// Sum of the outcome probabilities with the given indices.
    pub fn sum_of(indices: &[usize]) -> Self {
        let mut coeffs = [0.0; 4];
        for &i in indices {
            coeffs[i] = 1.0;
        }
        let label = indices.iter().map(|&i| SHORT[i]).collect::<Vec<_>>().join("+");
        LinearExpr { label, coeffs }
    }

    pub fn single(index: usize) -> Self {
        Self::sum_of(&[index])
    }

    /// Outcome index when this is a single probability.
    pub fn single_index(&self) -> Option<usize> {
        let ones: Vec<usize> = (0..4).filter(|&i| self.coeffs[i] != 0.0).collect();
        match ones.as_slice() {
            [i] if self.coeffs[*i] == 1.0 => Some(*i),
            _ => None,
        }
    }

    pub fn evaluate(&self, dist: &[f64; 4]) -> f64 {
        self.coeffs.iter().zip(dist).map(|(c, q)| c * q).sum()
    }

    /// Range implied by `0 <= q <= 1`, `sum q = 1` alone.
    fn trivial_range(&self) -> (f64, f64) {
        let lo = self.coeffs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.coeffs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    pub fn functional(&self, problem: &MomentProblem, spot: (usize, usize)) -> Result<LinearFunctional> {
        let mut f = LinearFunctional::zero();
        for (i, &(a, b)) in JOINT_OUTCOMES.iter().enumerate() {
            if self.coeffs[i] != 0.0 {
                f.add_scaled(&problem.probability_functional(a, b, spot.0, spot.1)?, self.coeffs[i]);
            }
        }
        Ok(f)
    }
}

/// The four singles, then (with extras) the six pairwise and four triple
/// sums.
pub fn standard_expressions(include_extras: bool) -> Vec<LinearExpr> {
    let mut out: Vec<LinearExpr> = (0..4).map(LinearExpr::single).collect();
    if include_extras {
        for i in 0..4 {
            for j in i + 1..4 {
                out.push(LinearExpr::sum_of(&[i, j]));
            }
        }
        for skip in (0..4).rev() {
            let idx: Vec<usize> = (0..4).filter(|&k| k != skip).collect();
            out.push(LinearExpr::sum_of(&idx));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundEntry {
    pub expr: LinearExpr,
    pub lo: f64,
    pub hi: f64,
    pub status_lo: SolveStatus,
    pub status_hi: SolveStatus,
    pub gap_lo: f64,
    pub gap_hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundBox {
    pub inequality: String,
    pub p: f64,
    /// 0-based setting.
    pub spot: (usize, usize),
    pub relaxation: Relaxation,
    pub relation: Relation,
    /// Bell value imposed, `(1-p) B` with `B` the numerical bound.
    pub bell_target: f64,
    pub entries: Vec<BoundEntry>,
}

impl BoundBox {
    /// Builds a box directly from intervals (no solving); used for tests and
    /// for replaying stored bounds.
    pub fn from_intervals(exprs: Vec<LinearExpr>, intervals: &[(f64, f64)]) -> Result<BoundBox> {
        if exprs.len() != intervals.len() {
            return Err(Error::arg("one interval per expression required"));
        }
        let entries = exprs
            .into_iter()
            .zip(intervals)
            .map(|(expr, &(lo, hi))| BoundEntry {
                expr,
                lo,
                hi,
                status_lo: SolveStatus::Optimal,
                status_hi: SolveStatus::Optimal,
                gap_lo: 0.0,
                gap_hi: 0.0,
            })
            .collect();
        let b = BoundBox {
            inequality: "manual".into(),
            p: f64::NAN,
            spot: (0, 0),
            relaxation: Relaxation::default(),
            relation: Relation::Equal,
            bell_target: f64::NAN,
            entries,
        };
        b.singles()?;
        Ok(b)
    }

    /// Box of the four singles only.
    pub fn from_singles(lo: [f64; 4], hi: [f64; 4]) -> Result<BoundBox> {
        let iv: Vec<(f64, f64)> = (0..4).map(|i| (lo[i], hi[i])).collect();
        Self::from_intervals(standard_expressions(false), &iv)
    }

    /// Lower and upper bounds of the four single probabilities.
    pub fn singles(&self) -> Result<([f64; 4], [f64; 4])> {
        let mut lo = [f64::NAN; 4];
        let mut hi = [f64::NAN; 4];
        for e in &self.entries {
            if let Some(i) = e.expr.single_index() {
                if lo[i].is_nan() {
                    lo[i] = e.lo;
                    hi[i] = e.hi;
                }
            }
        }
        if lo.iter().any(|v| v.is_nan()) {
            return Err(Error::arg("bound box lacks one of the four single probabilities"));
        }
        Ok((lo, hi))
    }

    /// Largest violation of any interval by `dist`.
    pub fn violation(&self, dist: &[f64; 4]) -> f64 {
        self.entries
            .iter()
            .map(|e| {
                let v = e.expr.evaluate(dist);
                (e.lo - v).max(v - e.hi).max(0.0)
            })
            .fold(0.0, f64::max)
    }

    /// Worst status over all solves, for reporting.
    pub fn worst_status(&self) -> SolveStatus {
        let rank = |s: SolveStatus| match s {
            SolveStatus::Optimal => 0,
            SolveStatus::NearOptimal => 1,
            _ => 2,
        };
        self.entries
            .iter()
            .flat_map(|e| [e.status_lo, e.status_hi])
            .max_by_key(|&s| rank(s))
            .unwrap_or(SolveStatus::Optimal)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundOptions {
    pub relaxation: Relaxation,
    pub relation: Relation,
    pub tolerances: Tolerances,
}

impl Default for BoundOptions {
    fn default() -> Self {
        BoundOptions {
            relaxation: Relaxation::default(),
            relation: Relation::Equal,
            tolerances: Tolerances::default(),
        }
    }
}

/// Relative Bell-value slack for the fallback solve.
const FALLBACK_SLACK: f64 = 1e-7;

/// Intervals smaller than this are treated as collapsed and padded.
const DEGENERATE_WIDTH: f64 = 1e-9;

/// Minimizes and maximizes every expression subject to the relaxation and
/// `bell (relation) (1-p) B`. The `2 * exprs.len()` solves run in parallel.
pub fn bound_box(
    entry: &CatalogEntry,
    p: f64,
    spot: (usize, usize),
    exprs: &[LinearExpr],
    options: &BoundOptions,
) -> Result<BoundBox> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::arg(format!("noise p = {p} outside [0, 1]")));
    }
    entry.scenario().check_setting(spot.0, spot.1)?;
    if exprs.is_empty() {
        return Err(Error::arg("no expressions to bound"));
    }
    let tol = &options.tolerances;
    let tsirelson = entry.tsirelson_numeric(options.relaxation, tol)?;
    // At p = 0 the certified bound may sit a hair above what the
    // relaxation can reach; cap at the attained value.
    let target = ((1.0 - p) * tsirelson.upper).min(tsirelson.attained);

    let problem = options.relaxation.build(entry.scenario())?;
    let bell = problem.bell_functional(entry.expression())?;
    let constraint = LinearConstraint {
        functional: bell,
        relation: options.relation,
        rhs: target,
    };
    let objectives: Vec<LinearFunctional> = exprs
        .iter()
        .map(|e| e.functional(&problem, spot))
        .collect::<Result<_>>()?;

    // Near the Tsirelson bound the constraint leaves no interior and the
    // solver can stall; the superset `bell >= target - slack` still gives
    // valid outer bounds.
    let relaxed = LinearConstraint {
        functional: constraint.functional.clone(),
        relation: Relation::AtLeast,
        rhs: target - FALLBACK_SLACK * (1.0 + target.abs()),
    };
    let solutions = par::map_range(2 * exprs.len(), |k| {
        let dir = if k % 2 == 0 { Direction::Minimize } else { Direction::Maximize };
        let first = sdp::solve(&problem, &objectives[k / 2], dir, std::slice::from_ref(&constraint), tol)?;
        if first.status.is_usable() {
            return Ok(first);
        }
        log::debug!("{}: retrying {} with relaxed Bell constraint", entry.display_name(), exprs[k / 2].label);
        let second = sdp::solve(&problem, &objectives[k / 2], dir, std::slice::from_ref(&relaxed), tol)?;
        Ok(if second.status.is_usable() { second } else { first })
    });

    let mut entries = Vec::with_capacity(exprs.len());
    let mut solutions = solutions.into_iter();
    for expr in exprs {
        let lo_sol = solutions.next().expect("two solves per expression")?;
        let hi_sol = solutions.next().expect("two solves per expression")?;
        let lo = lo_sol.bound(format!("lower bound of {}", expr.label))?;
        let hi = hi_sol.bound(format!("upper bound of {}", expr.label))?;
        let (tlo, thi) = expr.trivial_range();
        let mut lo = lo.max(tlo);
        let mut hi = hi.min(thi);
        if hi - lo < DEGENERATE_WIDTH {
            let pad = lo_sol.duality_gap.max(hi_sol.duality_gap).max(DEGENERATE_WIDTH);
            let mid = 0.5 * (lo + hi);
            lo = (mid - pad).max(tlo);
            hi = (mid + pad).min(thi);
        }
        entries.push(BoundEntry {
            expr: expr.clone(),
            lo,
            hi,
            status_lo: lo_sol.status,
            status_hi: hi_sol.status,
            gap_lo: lo_sol.duality_gap,
            gap_hi: hi_sol.duality_gap,
        });
    }
    Ok(BoundBox {
        inequality: entry.display_name(),
        p,
        spot,
        relaxation: options.relaxation,
        relation: options.relation,
        bell_target: target,
        entries,
    })
}
