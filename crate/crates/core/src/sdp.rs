//! Linear optimization over a moment relaxation.
//!
//! The equalities (normalization plus any user constraints) are eliminated
//! first, leaving a pure linear matrix inequality in the free moments `z`:
//!
//! ```text
//! maximize  b'z   subject to   Z = C - sum_j z_j A_j  >= 0
//! ```
//!
//! with one block for the moment matrix and one 1x1 block per inequality
//! constraint. Its conic dual is `min <C,X>` over `X >= 0` with
//! `<A_j, X> = b_j`. Both are solved together by an infeasible-start
//! primal-dual interior-point method (HKM search direction, Mehrotra
//! predictor-corrector).
//!
//! Every moment variable of a projector relaxation is bounded by one in
//! absolute value, so `<C,X> + |b - A(X)|_1` is a valid upper bound even when
//! `X` is slightly infeasible. That padded value is what gets reported as the
//! certified objective.

use std::collections::{BTreeMap, HashMap};

use faer::linalg::solvers::DenseSolveCore;
use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npa::{LinearFunctional, MomentProblem};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    NearOptimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

impl SolveStatus {
    /// Whether the solution carries a usable bound.
    pub fn is_usable(self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::NearOptimal)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::NearOptimal => "near_optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::NumericalFailure => "numerical_failure",
        }
    }
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Maximize,
    Minimize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Relative primal and dual residual.
    pub feasibility: f64,
    /// Relative duality gap.
    pub gap: f64,
    pub max_iterations: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            feasibility: 1e-9,
            gap: 1e-8,
            max_iterations: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Equal,
    AtLeast,
}

/// `functional (relation) rhs`
#[derive(Clone, Debug, PartialEq)]
pub struct LinearConstraint {
    pub functional: LinearFunctional,
    pub relation: Relation,
    pub rhs: f64,
}

impl LinearConstraint {
    pub fn equal(functional: LinearFunctional, rhs: f64) -> Self {
        LinearConstraint {
            functional,
            relation: Relation::Equal,
            rhs,
        }
    }

    pub fn at_least(functional: LinearFunctional, rhs: f64) -> Self {
        LinearConstraint {
            functional,
            relation: Relation::AtLeast,
            rhs,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SdpSolution {
    pub status: SolveStatus,
    /// Safe-side bound: an upper bound when maximizing, a lower bound when
    /// minimizing.
    pub objective_value: f64,
    /// Objective at `moment_vector`, the inner side of the bracket.
    pub attained_value: f64,
    /// `|objective_value - attained_value|`
    pub duality_gap: f64,
    pub moment_vector: Vec<f64>,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

impl SdpSolution {
    fn failed(status: SolveStatus, iterations: usize) -> Self {
        SdpSolution {
            status,
            objective_value: f64::NAN,
            attained_value: f64::NAN,
            duality_gap: f64::NAN,
            moment_vector: Vec::new(),
            iterations,
            primal_residual: f64::NAN,
            dual_residual: f64::NAN,
        }
    }

    /// The certified value, or an error carrying the status.
    pub fn bound(&self, context: impl Into<String>) -> Result<f64> {
        if self.status.is_usable() {
            Ok(self.objective_value)
        } else {
            Err(Error::Solver {
                status: self.status,
                context: context.into(),
            })
        }
    }
}

/// Extremizes `objective` over the relaxation intersected with the given
/// constraints.
pub fn solve(
    problem: &MomentProblem,
    objective: &LinearFunctional,
    direction: Direction,
    constraints: &[LinearConstraint],
    tol: &Tolerances,
) -> Result<SdpSolution> {
    let m = problem.num_variables();
    let check = |f: &LinearFunctional, what: &str| -> Result<()> {
        match f.max_variable() {
            Some(id) if id >= m => Err(Error::arg(format!(
                "{what} references moment variable {id}, problem has {m}"
            ))),
            _ => Ok(()),
        }
    };
    check(objective, "objective")?;
    for c in constraints {
        check(&c.functional, "constraint")?;
    }
    if !(tol.feasibility > 0.0 && tol.gap > 0.0 && tol.max_iterations > 0) {
        return Err(Error::arg("tolerances must be positive"));
    }

    let sign = match direction {
        Direction::Maximize => 1.0,
        Direction::Minimize => -1.0,
    };
    let lmi = match Lmi::assemble(problem, &objective.scaled(sign), constraints) {
        Some(lmi) => lmi,
        None => return Ok(SdpSolution::failed(SolveStatus::Infeasible, 0)),
    };
    let mut raw = if lmi.b.is_empty() {
        lmi.solve_fixed()
    } else {
        lmi.interior_point(tol)
    };
    if lmi.b.iter().all(|&v| v == 0.0) {
        // Constant objective: only feasibility was in question.
        raw.upper = 0.0;
        raw.inner = 0.0;
    }
    let mut sol = SdpSolution {
        status: raw.status,
        objective_value: sign * (raw.upper + lmi.b_const),
        attained_value: sign * (raw.inner + lmi.b_const),
        duality_gap: (raw.upper - raw.inner).abs(),
        moment_vector: if raw.status.is_usable() {
            lmi.moments(&raw.z)
        } else {
            Vec::new()
        },
        iterations: raw.iterations,
        primal_residual: raw.pinf,
        dual_residual: raw.dinf,
    };
    if !raw.status.is_usable() {
        sol.objective_value = f64::NAN;
        sol.attained_value = f64::NAN;
        sol.duality_gap = f64::NAN;
    }
    log::debug!(
        "sdp: status={} iterations={} objective={:.10} gap={:.2e} pinf={:.2e} dinf={:.2e}",
        sol.status,
        sol.iterations,
        sol.objective_value,
        sol.duality_gap,
        sol.primal_residual,
        sol.dual_residual
    );
    Ok(sol)
}

/// Affine expression `d + sum e_j z_j` of an eliminated moment.
#[derive(Clone, Debug, Default)]
struct Affine {
    constant: f64,
    terms: BTreeMap<usize, f64>,
}

/// One symmetric-matrix coefficient entry `(block, row, col, value)`; both
/// triangles are listed.
#[derive(Clone, Copy, Debug)]
struct Entry {
    block: u32,
    row: u32,
    col: u32,
    val: f64,
}

struct Lmi {
    sizes: Vec<usize>,
    c: Vec<Mat<f64>>,
    a: Vec<Vec<Entry>>,
    b: Vec<f64>,
    b_const: f64,
    /// Moment id of each free column.
    free: Vec<usize>,
    eliminated: Vec<(usize, Affine)>,
    num_moments: usize,
}

const STALL_ITERATIONS: usize = 12;
const NEAR_OPTIMAL: f64 = 1e-5;

#[derive(Clone)]
struct RawSolution {
    status: SolveStatus,
    upper: f64,
    inner: f64,
    z: Vec<f64>,
    iterations: usize,
    pinf: f64,
    dinf: f64,
}

impl RawSolution {
    fn merit(&self) -> f64 {
        let gap = (self.upper - self.inner).abs() / (1.0 + self.upper.abs() + self.inner.abs());
        let m = self.pinf.max(self.dinf).max(gap);
        if m.is_nan() { f64::INFINITY } else { m }
    }
}

/// Returns `None` when the equalities are contradictory.
fn eliminate(m: usize, equalities: &[(LinearFunctional, f64)]) -> Option<HashMap<usize, Affine>> {
    let mut elim: HashMap<usize, Affine> = HashMap::new();
    for (f, rhs) in equalities {
        let mut coef: BTreeMap<usize, f64> = BTreeMap::new();
        let mut r = rhs - f.offset();
        let scale = f.terms().values().fold(1.0f64, |s, c| s.max(c.abs()));
        for (&k, &c) in f.terms() {
            match elim.get(&k) {
                Some(e) => {
                    r -= c * e.constant;
                    for (&j, &v) in &e.terms {
                        *coef.entry(j).or_insert(0.0) += c * v;
                    }
                }
                None => *coef.entry(k).or_insert(0.0) += c,
            }
        }
        let mut pivot: Option<(usize, f64)> = None;
        for (&j, &v) in &coef {
            if pivot.is_none_or(|(_, pv)| v.abs() > pv.abs()) {
                pivot = Some((j, v));
            }
        }
        let (p, cp) = match pivot {
            Some((p, cp)) if cp.abs() > 1e-12 * scale => (p, cp),
            _ => {
                if r.abs() > 1e-9 * scale.max(rhs.abs()) {
                    return None;
                }
                continue;
            }
        };
        let mut expr = Affine {
            constant: r / cp,
            terms: BTreeMap::new(),
        };
        for (&j, &v) in &coef {
            if j != p && v != 0.0 {
                expr.terms.insert(j, -v / cp);
            }
        }
        for e in elim.values_mut() {
            if let Some(w) = e.terms.remove(&p) {
                e.constant += w * expr.constant;
                for (&j, &v) in &expr.terms {
                    *e.terms.entry(j).or_insert(0.0) += w * v;
                }
            }
        }
        debug_assert!(p < m);
        elim.insert(p, expr);
    }
    Some(elim)
}

impl Lmi {
    fn assemble(problem: &MomentProblem, objective: &LinearFunctional, constraints: &[LinearConstraint]) -> Option<Lmi> {
        let m = problem.num_variables();
        let mut equalities: Vec<(LinearFunctional, f64)> = problem.equalities().to_vec();
        for c in constraints {
            if c.relation == Relation::Equal {
                equalities.push((c.functional.clone(), c.rhs));
            }
        }
        let elim = eliminate(m, &equalities)?;
        let free: Vec<usize> = (0..m).filter(|k| !elim.contains_key(k)).collect();
        let col: HashMap<usize, usize> = free.iter().enumerate().map(|(j, &k)| (k, j)).collect();

        // Expresses a functional over moments as (constant, coefficients on z).
        let reduce = |f: &LinearFunctional| -> (f64, BTreeMap<usize, f64>) {
            let mut constant = f.offset();
            let mut out = BTreeMap::new();
            for (&k, &c) in f.terms() {
                match elim.get(&k) {
                    Some(e) => {
                        constant += c * e.constant;
                        for (&j, &v) in &e.terms {
                            *out.entry(col[&j]).or_insert(0.0) += c * v;
                        }
                    }
                    None => *out.entry(col[&k]).or_insert(0.0) += c,
                }
            }
            (constant, out)
        };

        let inequalities: Vec<&LinearConstraint> =
            constraints.iter().filter(|c| c.relation == Relation::AtLeast).collect();
        let n = problem.psd_dim();
        let mut sizes = vec![n];
        sizes.extend(std::iter::repeat_n(1, inequalities.len()));

        // Upper-triangle accumulation of G_j (M = C + sum z_j G_j).
        let mut g: Vec<BTreeMap<(u32, u32, u32), f64>> = vec![BTreeMap::new(); free.len()];
        let mut c0 = Mat::<f64>::zeros(n, n);
        for (k, positions) in problem.variable_positions().into_iter().enumerate() {
            match elim.get(&k) {
                Some(e) => {
                    for &(r, s) in &positions {
                        c0[(r, s)] += e.constant;
                        if r != s {
                            c0[(s, r)] += e.constant;
                        }
                        for (&j, &v) in &e.terms {
                            *g[col[&j]].entry((0, r as u32, s as u32)).or_insert(0.0) += v;
                        }
                    }
                }
                None => {
                    for &(r, s) in &positions {
                        *g[col[&k]].entry((0, r as u32, s as u32)).or_insert(0.0) += 1.0;
                    }
                }
            }
        }
        let mut c = vec![c0];
        for (i, ineq) in inequalities.iter().enumerate() {
            let (constant, coefs) = reduce(&ineq.functional);
            c.push(Mat::from_fn(1, 1, |_, _| constant - ineq.rhs));
            for (j, v) in coefs {
                *g[j].entry((i as u32 + 1, 0, 0)).or_insert(0.0) += v;
            }
        }

        let (b_const, obj) = reduce(objective);
        let mut b = vec![0.0; free.len()];
        for (j, v) in obj {
            b[j] = v;
        }

        // A_j = -G_j, both triangles.
        let a: Vec<Vec<Entry>> = g
            .into_iter()
            .map(|gj| {
                let mut entries = Vec::new();
                for ((block, r, s), v) in gj {
                    if v.abs() <= 1e-15 {
                        continue;
                    }
                    entries.push(Entry {
                        block,
                        row: r,
                        col: s,
                        val: -v,
                    });
                    if r != s {
                        entries.push(Entry {
                            block,
                            row: s,
                            col: r,
                            val: -v,
                        });
                    }
                }
                entries
            })
            .collect();

        let mut eliminated: Vec<(usize, Affine)> = elim
            .into_iter()
            .map(|(k, mut e)| {
                e.terms = e.terms.into_iter().map(|(j, v)| (col[&j], v)).collect();
                (k, e)
            })
            .collect();
        eliminated.sort_by_key(|(k, _)| *k);
        Some(Lmi {
            sizes,
            c,
            a,
            b,
            b_const,
            free,
            eliminated,
            num_moments: m,
        })
    }

    fn moments(&self, z: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.num_moments];
        for (j, &k) in self.free.iter().enumerate() {
            y[k] = z[j];
        }
        for (k, e) in &self.eliminated {
            y[*k] = e.constant + e.terms.iter().map(|(&j, &v)| v * z[j]).sum::<f64>();
        }
        y
    }

    /// No free moments: the equalities pin everything; only feasibility of
    /// the constant matrix is left to check.
    fn solve_fixed(&self) -> RawSolution {
        let min_eig = self
            .c
            .iter()
            .map(|c| min_eigenvalue(c).unwrap_or(f64::NEG_INFINITY))
            .fold(f64::INFINITY, f64::min);
        let status = if min_eig >= -1e-9 {
            SolveStatus::Optimal
        } else {
            SolveStatus::Infeasible
        };
        RawSolution {
            status,
            upper: 0.0,
            inner: 0.0,
            z: Vec::new(),
            iterations: 0,
            pinf: 0.0,
            dinf: min_eig.min(0.0).abs(),
        }
    }

    fn total_dim(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// `<A_j, G>` for every j.
    fn apply(&self, g: &[Mat<f64>]) -> Vec<f64> {
        self.a
            .iter()
            .map(|aj| {
                aj.iter()
                    .map(|e| e.val * g[e.block as usize][(e.row as usize, e.col as usize)])
                    .sum()
            })
            .collect()
    }

    /// `sum_j w_j A_j`
    fn adjoint(&self, w: &[f64]) -> Vec<Mat<f64>> {
        let mut out: Vec<Mat<f64>> = self.sizes.iter().map(|&s| Mat::zeros(s, s)).collect();
        for (aj, &wj) in self.a.iter().zip(w) {
            if wj == 0.0 {
                continue;
            }
            for e in aj {
                out[e.block as usize][(e.row as usize, e.col as usize)] += wj * e.val;
            }
        }
        out
    }

    /// Schur complement `O_ij = tr(A_i X A_j Z^-1)`.
    fn schur(&self, x: &[Dense], zi: &[Dense]) -> Mat<f64> {
        let m = self.a.len();
        let rows: Vec<Vec<f64>> = par::map_range(m, |i| {
            let mut row = vec![0.0; m];
            for (j, slot) in row.iter_mut().enumerate().skip(i) {
                let mut s = 0.0;
                for e in &self.a[i] {
                    let bx = &x[e.block as usize];
                    let bz = &zi[e.block as usize];
                    let (r, c) = (e.row as usize, e.col as usize);
                    for f in &self.a[j] {
                        if f.block != e.block {
                            continue;
                        }
                        s += e.val * f.val * bx.get(c, f.row as usize) * bz.get(f.col as usize, r);
                    }
                }
                *slot = s;
            }
            row
        });
        let mut o = Mat::<f64>::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                o[(i, j)] = rows[i][j];
                o[(j, i)] = rows[i][j];
            }
        }
        o
    }

    fn interior_point(&self, tol: &Tolerances) -> RawSolution {
        let m = self.b.len();
        let nb = self.sizes.len();
        let n_tot = self.total_dim() as f64;

        let a_norms: Vec<f64> = self
            .a
            .iter()
            .map(|aj| aj.iter().map(|e| e.val * e.val).sum::<f64>().sqrt())
            .collect();
        let c_norm = frob(&self.c);
        let b_norm = self.b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let alpha0 = (0..m)
            .map(|j| n_tot * (1.0 + self.b[j].abs()) / (1.0 + a_norms[j]))
            .fold(0.0f64, f64::max);
        let beta0 = (1.0 + a_norms.iter().copied().fold(c_norm, f64::max)) / n_tot.sqrt();

        let mut x: Vec<Mat<f64>> = self.sizes.iter().map(|&s| identity(s, 10.0 * alpha0)).collect();
        let mut zm: Vec<Mat<f64>> = self.sizes.iter().map(|&s| identity(s, 10.0 * beta0)).collect();
        let mut z = vec![0.0; m];

        let mut best_merit = f64::INFINITY;
        let mut best_iter = 0;
        let mut last = RawSolution {
            status: SolveStatus::NumericalFailure,
            upper: f64::NAN,
            inner: f64::NAN,
            z: z.clone(),
            iterations: 0,
            pinf: f64::INFINITY,
            dinf: f64::INFINITY,
        };

        let mut best = last.clone();
        for iter in 0..=tol.max_iterations {
            let zi: Vec<Mat<f64>> = match zm.iter().map(spd_inverse).collect::<Option<Vec<_>>>() {
                Some(v) => v,
                None => break,
            };
            let ax = self.apply(&x);
            let rp: Vec<f64> = (0..m).map(|j| self.b[j] - ax[j]).collect();
            let sum_za = self.adjoint(&z);
            let rd: Vec<Mat<f64>> = (0..nb).map(|k| &self.c[k] - &zm[k] - &sum_za[k]).collect();
            let pobj = inner(&self.c, &x);
            let dobj = dot(&self.b, &z);
            let xz = inner(&x, &zm);
            let mu = xz / n_tot;
            let rp_norm = dot(&rp, &rp).sqrt();
            let pinf = rp_norm / (1.0 + b_norm);
            let dinf = frob(&rd) / (1.0 + c_norm);
            let rel_gap = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());
            let rp_l1: f64 = rp.iter().map(|v| v.abs()).sum();

            last = RawSolution {
                status: SolveStatus::NumericalFailure,
                upper: pobj + rp_l1,
                inner: dobj,
                z: z.clone(),
                iterations: iter,
                pinf,
                dinf,
            };
            let merit = pinf.max(dinf).max(rel_gap);
            if merit.is_finite() && merit < 0.5 * best_merit {
                best_merit = merit;
                best_iter = iter;
            }
            if merit.is_finite() && merit <= best.merit() {
                best = last.clone();
            }
            log::trace!(
                "iter {iter}: pobj={pobj:.10e} dobj={dobj:.10e} pinf={pinf:.2e} dinf={dinf:.2e} gap={rel_gap:.2e} mu={mu:.2e}"
            );
            if pinf <= tol.feasibility && dinf <= tol.feasibility && rel_gap <= tol.gap {
                last.status = SolveStatus::Optimal;
                return last;
            }
            // Certificate that the matrix inequality has no solution:
            // X >= 0 with <C,X> < 0 and A(X) negligible relative to it.
            if pobj < 0.0 && rp_norm.max(dot(&ax, &ax).sqrt()) <= 1e-8 * pobj.abs() {
                last.status = SolveStatus::Infeasible;
                return last;
            }
            if pobj < -1e10 {
                last.status = SolveStatus::Infeasible;
                return last;
            }
            if dinf <= tol.feasibility.max(1e-8) && dobj > 1e10 * (1.0 + pobj.abs().min(1e10)) {
                last.status = SolveStatus::Unbounded;
                return last;
            }
            if iter == tol.max_iterations || iter - best_iter > STALL_ITERATIONS {
                break;
            }

            let xd: Vec<Dense> = x.iter().map(Dense::from_mat).collect();
            let zid: Vec<Dense> = zi.iter().map(Dense::from_mat).collect();
            let schur = self.schur(&xd, &zid);
            let factor = match Factor::new(&schur) {
                Some(f) => f,
                None => break,
            };

            let x_rd_zi: Vec<Mat<f64>> = (0..nb).map(|k| &x[k] * &rd[k] * &zi[k]).collect();
            let a_xrdzi = self.apply(&x_rd_zi);
            let a_zi = self.apply(&zi);

            // Predictor.
            let rhs: Vec<f64> = (0..m).map(|j| self.b[j] + a_xrdzi[j]).collect();
            let dz = factor.solve(&rhs);
            let sum_dza = self.adjoint(&dz);
            let dzm_a: Vec<Mat<f64>> = (0..nb).map(|k| &rd[k] - &sum_dza[k]).collect();
            let dx_a: Vec<Mat<f64>> = (0..nb)
                .map(|k| symmetrize(&(-&x[k] - &x[k] * &dzm_a[k] * &zi[k])))
                .collect();
            let ap = max_step(&x, &dx_a);
            let ad = max_step(&zm, &dzm_a);
            let (ap, ad) = (ap.min(1.0), ad.min(1.0));
            let x_aff: Vec<Mat<f64>> = (0..nb).map(|k| &x[k] + ap * &dx_a[k]).collect();
            let z_aff: Vec<Mat<f64>> = (0..nb).map(|k| &zm[k] + ad * &dzm_a[k]).collect();
            let sigma = if xz > 0.0 {
                (inner(&x_aff, &z_aff) / xz).clamp(0.0, 1.0).powi(3)
            } else {
                0.0
            };

            // Corrector.
            let corr: Vec<Mat<f64>> = (0..nb).map(|k| &dx_a[k] * &dzm_a[k] * &zi[k]).collect();
            let a_corr = self.apply(&corr);
            let rhs: Vec<f64> = (0..m)
                .map(|j| self.b[j] - sigma * mu * a_zi[j] + a_xrdzi[j] + a_corr[j])
                .collect();
            let direction = |dz: &[f64]| {
                let sum_dza = self.adjoint(dz);
                let dzm: Vec<Mat<f64>> = (0..nb).map(|k| &rd[k] - &sum_dza[k]).collect();
                let dx: Vec<Mat<f64>> = (0..nb)
                    .map(|k| {
                        symmetrize(&(sigma * mu * &zi[k] - &x[k] - &x[k] * &dzm[k] * &zi[k] - &corr[k]))
                    })
                    .collect();
                let adx = self.apply(&dx);
                let r: Vec<f64> = (0..m).map(|j| rp[j] - adx[j]).collect();
                (dzm, dx, r)
            };
            let mut dz = factor.solve(&rhs);
            let (mut dzm, mut dx, mut r) = direction(&dz);
            // Refine against the unfactored operator; the Schur matrix loses
            // accuracy as X and Z^-1 grow apart.
            for _ in 0..3 {
                let r_norm = dot(&r, &r).sqrt();
                if r_norm <= 1e-15 * (1.0 + b_norm) {
                    break;
                }
                let delta = factor.solve(&r);
                let trial: Vec<f64> = dz.iter().zip(&delta).map(|(a, d)| a + d).collect();
                let (tzm, tx, tr) = direction(&trial);
                if dot(&tr, &tr).sqrt() >= r_norm {
                    break;
                }
                dz = trial;
                dzm = tzm;
                dx = tx;
                r = tr;
            }
            let ap = (0.95 * max_step(&x, &dx)).min(1.0);
            let ad = (0.95 * max_step(&zm, &dzm)).min(1.0);
            if !(ap.is_finite() && ad.is_finite()) || (ap < 1e-10 && ad < 1e-10) {
                break;
            }
            for k in 0..nb {
                x[k] += ap * &dx[k];
                zm[k] += ad * &dzm[k];
            }
            for j in 0..m {
                z[j] += ad * dz[j];
            }
        }

        if best.merit() <= NEAR_OPTIMAL {
            best.status = SolveStatus::NearOptimal;
        }
        best
    }
}

/// Row-major copy of a square block, for the Schur hot loop.
struct Dense {
    n: usize,
    data: Vec<f64>,
}

impl Dense {
    fn from_mat(m: &Mat<f64>) -> Self {
        let n = m.nrows();
        let mut data = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                data.push(m[(r, c)]);
            }
        }
        Dense { n, data }
    }

    #[inline]
    fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.n + c]
    }
}

/// Cholesky factor of the Schur complement, with a diagonal shift retried
/// when the matrix has lost definiteness numerically.
struct Factor(faer::linalg::solvers::Llt<f64>);

impl Factor {
    fn new(o: &Mat<f64>) -> Option<Self> {
        if let Ok(l) = o.llt(Side::Lower) {
            return Some(Factor(l));
        }
        let scale = (0..o.nrows()).map(|i| o[(i, i)].abs()).fold(0.0f64, f64::max).max(1e-300);
        let mut shift = 1e-14 * scale;
        for _ in 0..8 {
            let mut shifted = o.clone();
            for i in 0..o.nrows() {
                shifted[(i, i)] += shift;
            }
            if let Ok(l) = shifted.llt(Side::Lower) {
                return Some(Factor(l));
            }
            shift *= 100.0;
        }
        None
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let b = Mat::from_fn(rhs.len(), 1, |i, _| rhs[i]);
        let x = self.0.solve(&b);
        (0..rhs.len()).map(|i| x[(i, 0)]).collect()
    }
}

fn identity(n: usize, scale: f64) -> Mat<f64> {
    Mat::from_fn(n, n, |i, j| if i == j { scale } else { 0.0 })
}

fn symmetrize(m: &Mat<f64>) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| 0.5 * (m[(i, j)] + m[(j, i)]))
}

fn inner(a: &[Mat<f64>], b: &[Mat<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| {
            let mut s = 0.0;
            for j in 0..p.ncols() {
                for i in 0..p.nrows() {
                    s += p[(i, j)] * q[(i, j)];
                }
            }
            s
        })
        .sum()
}

fn frob(a: &[Mat<f64>]) -> f64 {
    inner(a, a).sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

fn spd_inverse(m: &Mat<f64>) -> Option<Mat<f64>> {
    let l = m.llt(Side::Lower).ok()?;
    Some(symmetrize(&l.inverse()))
}

pub(crate) fn min_eigenvalue(m: &Mat<f64>) -> Option<f64> {
    if m.nrows() == 0 {
        return Some(f64::INFINITY);
    }
    let ev = m.self_adjoint_eigenvalues(Side::Lower).ok()?;
    ev.first().copied()
}

/// Largest `t` with `X + t dX >= 0` (infinite when `dX >= 0`).
fn max_step(x: &[Mat<f64>], dx: &[Mat<f64>]) -> f64 {
    let mut step = f64::INFINITY;
    for (xb, db) in x.iter().zip(dx) {
        let n = xb.nrows();
        if n == 1 {
            if db[(0, 0)] < 0.0 {
                step = step.min(-xb[(0, 0)] / db[(0, 0)]);
            }
            continue;
        }
        let l = match xb.llt(Side::Lower) {
            Ok(l) => l,
            Err(_) => return 0.0,
        };
        let lm = l.L();
        let mut w = db.clone();
        faer::linalg::triangular_solve::solve_lower_triangular_in_place(lm, w.as_mut(), faer::Par::Seq);
        let mut w2 = w.transpose().to_owned();
        faer::linalg::triangular_solve::solve_lower_triangular_in_place(lm, w2.as_mut(), faer::Par::Seq);
        let lam = match min_eigenvalue(&symmetrize(&w2)) {
            Some(v) => v,
            None => return 0.0,
        };
        if lam < 0.0 {
            step = step.min(-1.0 / lam);
        }
    }
    step
}

/// Minimum eigenvalue of the moment matrix built from `moments`.
pub fn moment_matrix_min_eigenvalue(problem: &MomentProblem, moments: &[f64]) -> f64 {
    let n = problem.psd_dim();
    let dense = problem.moment_matrix(moments);
    let m = Mat::from_fn(n, n, |i, j| dense[i * n + j]);
    min_eigenvalue(&m).unwrap_or(f64::NEG_INFINITY)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::npa::{Letter, Monomial};
    use crate::scenario::{BellExpression, Scenario};
    use rand::{Rng, SeedableRng};

    fn chsh(s: Scenario) -> BellExpression {
        BellExpression::new("CHSH", s, [((0, 0), 1.0), ((0, 1), 1.0), ((1, 0), 1.0), ((1, 1), -1.0)], 0.0).unwrap()
    }

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    #[test]
    fn chsh_level_one_reaches_tsirelson() {
        let s = Scenario::new(2, 2).unwrap();
        let p = MomentProblem::build(s, 1).unwrap();
        let f = p.bell_functional(&chsh(s)).unwrap();
        let sol = solve(&p, &f, Direction::Maximize, &[], &tol()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.objective_value - 2.0 * 2f64.sqrt()).abs() < 1e-5, "{sol:?}");
        assert!(sol.objective_value >= 2.0 * 2f64.sqrt() - 1e-9);
        assert!(moment_matrix_min_eigenvalue(&p, &sol.moment_vector) >= -1e-8);
    }

    #[test]
    fn constant_functional_is_exact() {
        let p = MomentProblem::build(Scenario::new(2, 2).unwrap(), 2).unwrap();
        let sol = solve(&p, &LinearFunctional::variable(0), Direction::Maximize, &[], &tol()).unwrap();
        assert!(sol.status.is_usable());
        assert!((sol.objective_value - 1.0).abs() < 1e-12);
        let sol = solve(&p, &LinearFunctional::constant(1.0), Direction::Minimize, &[], &tol()).unwrap();
        assert!((sol.objective_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bell_value_above_quantum_bound_is_infeasible() {
        let s = Scenario::new(2, 2).unwrap();
        let p = MomentProblem::build(s, 2).unwrap();
        let f = p.bell_functional(&chsh(s)).unwrap();
        let c = LinearConstraint::equal(f.clone(), 1.1 * 2.0 * 2f64.sqrt());
        let sol = solve(&p, &LinearFunctional::variable(1), Direction::Maximize, &[c], &tol()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
        let c = LinearConstraint::at_least(f, 3.0);
        let sol = solve(&p, &LinearFunctional::variable(1), Direction::Maximize, &[c], &tol()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn contradictory_equalities_are_infeasible() {
        let p = MomentProblem::build(Scenario::new(2, 2).unwrap(), 1).unwrap();
        let c = LinearConstraint::equal(LinearFunctional::variable(0), 2.0);
        let sol = solve(&p, &LinearFunctional::variable(1), Direction::Maximize, &[c], &tol()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn unknown_variable_rejected() {
        let p = MomentProblem::build(Scenario::new(2, 2).unwrap(), 1).unwrap();
        let f = LinearFunctional::variable(p.num_variables());
        assert!(solve(&p, &f, Direction::Maximize, &[], &tol()).is_err());
    }

    fn random_functional(p: &MomentProblem, rng: &mut impl Rng) -> LinearFunctional {
        LinearFunctional::from_terms(
            rng.random_range(-1.0..1.0),
            (1..p.num_variables()).map(|k| (k, rng.random_range(-1.0..1.0))),
        )
    }

    #[test]
    fn max_of_negation_is_minus_min() {
        let p = MomentProblem::build(Scenario::new(2, 2).unwrap(), 2).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let f = random_functional(&p, &mut rng);
            let lo = solve(&p, &f, Direction::Minimize, &[], &tol()).unwrap();
            let hi = solve(&p, &f.scaled(-1.0), Direction::Maximize, &[], &tol()).unwrap();
            assert_eq!(lo.status, SolveStatus::Optimal);
            assert_eq!(hi.status, SolveStatus::Optimal);
            assert!((lo.objective_value + hi.objective_value).abs() < 1e-9);
        }
    }

    #[test]
    fn extra_equality_never_raises_maximum() {
        let s = Scenario::new(2, 2).unwrap();
        let p = MomentProblem::build(s, 2).unwrap();
        let bell = p.bell_functional(&chsh(s)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let f = random_functional(&p, &mut rng);
            let target = rng.random_range(-2.5..2.5);
            let free = solve(&p, &f, Direction::Maximize, &[], &tol()).unwrap();
            let c = LinearConstraint::equal(bell.clone(), target);
            let held = solve(&p, &f, Direction::Maximize, &[c], &tol()).unwrap();
            assert!(held.status.is_usable(), "{held:?}");
            assert!(held.objective_value <= free.objective_value + 1e-8);
            assert!(moment_matrix_min_eigenvalue(&p, &held.moment_vector) >= -1e-8);
            assert!((bell.evaluate(&held.moment_vector) - target).abs() < 1e-7);
        }
    }

    #[test]
    fn at_least_constraint_matches_equality_when_binding() {
        let s = Scenario::new(2, 2).unwrap();
        let p = MomentProblem::build(s, 2).unwrap();
        let bell = p.bell_functional(&chsh(s)).unwrap();
        let target = 2.7;
        let pp = p
            .variable_of(&Monomial::new([Letter::alice(0), Letter::bob(0)]))
            .unwrap();
        let f = LinearFunctional::variable(pp);
        let eq = solve(&p, &f, Direction::Maximize, &[LinearConstraint::equal(bell.clone(), target)], &tol()).unwrap();
        let ge = solve(&p, &f, Direction::Maximize, &[LinearConstraint::at_least(bell, target)], &tol()).unwrap();
        assert!(ge.status.is_usable());
        assert!(ge.objective_value >= eq.objective_value - 1e-8);
    }
}
