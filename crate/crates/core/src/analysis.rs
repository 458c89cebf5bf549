//! Noise sweeps, crossover search and the convexity analysis of the
//! closed-form entropy along a sweep.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::catalog::CatalogEntry;
use crate::entropy::{self, CertifyOptions, ConjectureRoles, EntropyCertificate};
use crate::error::{Error, Result};
use crate::par;

/// Zero threshold for second-derivative signs.
pub const SIGN_EPS: f64 = 1e-9;
const VANISHING: f64 = 1e-12;
/// Entropy slack within which closed-form role assignments count as tied.
pub const ROLE_TIE: f64 = 1e-6;

/// `start, start + step, ...` up to `stop` inclusive (within `step / 1e6`).
pub fn uniform_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(start <= stop) || !start.is_finite() || !stop.is_finite() {
        return Err(Error::arg(format!("bad grid {start}..{stop} step {step}")));
    }
    let n = ((stop - start) / step + 1e-6).floor() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

fn grid_step(grid: &[f64]) -> Result<f64> {
    if grid.len() < 3 {
        return Err(Error::arg("central differences need at least 3 grid points"));
    }
    let h = (grid[grid.len() - 1] - grid[0]) / (grid.len() - 1) as f64;
    if !(h > 0.0) {
        return Err(Error::arg("grid must be strictly increasing"));
    }
    for w in grid.windows(2) {
        if ((w[1] - w[0]) - h).abs() > 1e-6 * h {
            return Err(Error::arg("grid is not uniform"));
        }
    }
    Ok(h)
}

/// Central differences of order 1 or 2 at the interior grid points.
pub fn central_difference(grid: &[f64], values: &[f64], order: u8) -> Result<Vec<f64>> {
    if grid.len() != values.len() {
        return Err(Error::arg("grid and values differ in length"));
    }
    let h = grid_step(grid)?;
    let out = values.windows(3);
    match order {
        1 => Ok(out.map(|w| (w[2] - w[0]) / (2.0 * h)).collect()),
        2 => Ok(out.map(|w| (w[2] - 2.0 * w[1] + w[0]) / (h * h)).collect()),
        _ => Err(Error::arg(format!("difference order must be 1 or 2, got {order}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub p: f64,
    pub certificate: Option<EntropyCertificate>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub entry: CatalogEntry,
    pub spot: (usize, usize),
    pub options: CertifyOptions,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn grid(&self) -> Vec<f64> {
        self.points.iter().map(|pt| pt.p).collect()
    }

    /// Certified entropy per point, `NaN` where the point failed.
    pub fn shannon(&self) -> Vec<f64> {
        self.points
            .iter()
            .map(|pt| pt.certificate.as_ref().map_or(f64::NAN, |c| c.shannon_lower))
            .collect()
    }

    /// Lower and upper bound of each single probability along the grid.
    pub fn bound_trajectories(&self) -> [(Vec<f64>, Vec<f64>); 4] {
        std::array::from_fn(|k| {
            self.points
                .iter()
                .map(|pt| {
                    pt.certificate
                        .as_ref()
                        .and_then(|c| c.bounds.singles().ok())
                        .map_or((f64::NAN, f64::NAN), |(lo, hi)| (lo[k], hi[k]))
                })
                .unzip()
        })
    }

    /// Bound values in the closed-form roles at each point. Where several
    /// assignments come within [`ROLE_TIE`] of the least entropy (symmetric
    /// boxes), the one used at the previous point is kept.
    pub fn role_trajectory(&self) -> Vec<RolePoint> {
        let mut prev: Option<ConjectureRoles> = None;
        let mut out = Vec::with_capacity(self.points.len());
        for pt in &self.points {
            let found = pt.certificate.as_ref().and_then(|c| {
                let (lo, hi) = c.bounds.singles().ok()?;
                let cands = entropy::conjecture_candidates(&c.bounds).ok()?;
                let best = cands.first()?;
                let chosen = prev
                    .and_then(|r| cands.iter().find(|k| k.roles == r && k.entropy - best.entropy <= ROLE_TIE))
                    .unwrap_or(best);
                Some((chosen.roles, chosen.roles.bound_values(&lo, &hi)))
            });
            prev = found.map(|f| f.0);
            out.push(match found {
                Some((roles, values)) => RolePoint {
                    roles: Some(roles),
                    values,
                },
                None => RolePoint {
                    roles: None,
                    values: [f64::NAN; 3],
                },
            });
        }
        out
    }

    pub fn failures(&self) -> usize {
        self.points.iter().filter(|pt| pt.certificate.is_none()).count()
    }
}

/// Certifies every grid point. Failures are recorded per point.
pub fn sweep(entry: &CatalogEntry, spot: (usize, usize), grid: &[f64], options: &CertifyOptions) -> Result<SweepResult> {
    if grid.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::arg("sweep grid must lie in [0, 1]"));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::arg("sweep grid must be strictly increasing"));
    }
    entry.scenario().check_setting(spot.0, spot.1)?;
    // Warm the Bell-bound cache once instead of racing on it.
    entry
        .tsirelson_numeric(options.relaxation, &options.tolerances)
        .map_err(|e| e.in_stage("bell bound"))?;
    let points = par::map_slice(grid, |&p| match entropy::certify(entry, p, spot, options) {
        Ok(c) => SweepPoint {
            p,
            certificate: Some(c),
            error: None,
        },
        Err(e) => {
            log::warn!("{} at p={p}: {e}", entry.display_name());
            SweepPoint {
                p,
                certificate: None,
                error: Some(e.to_string()),
            }
        }
    });
    Ok(SweepResult {
        entry: entry.clone(),
        spot,
        options: *options,
        points,
    })
}

/// Bound values `(l_a, l_b, u)` of the closed-form candidate at one grid
/// point; `roles` is `None` where no candidate was feasible.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolePoint {
    pub roles: Option<ConjectureRoles>,
    pub values: [f64; 3],
}

/// Entropy of `(v1, v2, v3, 1 - v1 - v2 - v3)`.
fn composite_entropy(v: &[f64; 3]) -> f64 {
    let r = 1.0 - v.iter().sum::<f64>();
    -[v[0], v[1], v[2], r]
        .iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| q * q.log2())
        .sum::<f64>()
}

/// `alpha` and `beta_k` exactly as used by the printed assembly.
pub fn printed_coefficients(v: &[f64; 3]) -> (f64, [f64; 3]) {
    let r = 1.0 - v[0] - v[1] - v[2];
    let alpha = 1.0 / r;
    let beta = std::array::from_fn(|k| {
        let others: f64 = (0..3).filter(|&j| j != k).map(|j| v[j]).sum();
        (1.0 - others) / (1.0 - v[k] * v[k] - others)
    });
    (alpha, beta)
}

/// Hessian of [`composite_entropy`] in bits.
pub fn analytic_hessian(v: &[f64; 3]) -> [[f64; 3]; 3] {
    let r = 1.0 - v[0] - v[1] - v[2];
    std::array::from_fn(|k| {
        std::array::from_fn(|l| {
            if k == l {
                -(1.0 / v[k] + 1.0 / r) / LN_2
            } else {
                -1.0 / (r * LN_2)
            }
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivativeRow {
    pub p: f64,
    pub segment: usize,
    pub values: [f64; 3],
    pub first: [f64; 3],
    pub second: [f64; 3],
    pub alpha: f64,
    pub beta: [f64; 3],
    pub entropy: f64,
    pub dh_dp: f64,
    /// Assembly with the printed `alpha`, `beta_k`.
    pub d2h_printed: f64,
    /// Assembly with the analytic Hessian.
    pub d2h_analytic: f64,
    /// Second central difference of the composite entropy itself.
    pub d2h_direct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub roles: ConjectureRoles,
    pub p_start: f64,
    pub p_end: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curvature {
    Concave,
    Convex,
    Flat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexityRegion {
    pub curvature: Curvature,
    pub p_start: f64,
    pub p_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivativeReport {
    pub rows: Vec<DerivativeRow>,
    pub segments: Vec<Segment>,
    /// Grid points where the roles change or the candidate is missing.
    pub boundaries: Vec<f64>,
    /// From the analytic assembly.
    pub regions: Vec<ConvexityRegion>,
    pub max_dev_printed: f64,
    pub max_dev_analytic: f64,
}

impl DerivativeReport {
    /// Which assembly lies closer to the direct difference.
    pub fn closer_path(&self) -> &'static str {
        if self.max_dev_analytic <= self.max_dev_printed {
            "analytic"
        } else {
            "printed"
        }
    }
}

/// Second derivative in `p` of the closed-form entropy along a sweep.
/// Consecutive points with the same roles form a segment; derivatives are
/// taken within segments only.
pub fn entropy_second_derivative(grid: &[f64], points: &[RolePoint]) -> Result<DerivativeReport> {
    if grid.len() != points.len() {
        return Err(Error::arg("one role point per grid point required"));
    }
    grid_step(grid)?;

    // A run keeps its roles and stays on one side of the simplex boundary:
    // once the remainder is exhausted the closed form is clamped and no
    // longer smooth across that point.
    let regime = |pt: &RolePoint| -> Option<(ConjectureRoles, bool)> {
        let roles = pt.roles?;
        if !pt.values.iter().all(|v| v.is_finite()) {
            return None;
        }
        let remainder = 1.0 - pt.values.iter().sum::<f64>();
        Some((roles, remainder <= VANISHING))
    };
    let mut runs: Vec<(usize, usize, ConjectureRoles)> = Vec::new();
    let mut boundaries = Vec::new();
    let mut i = 0;
    while i < points.len() {
        let Some(key) = regime(&points[i]) else {
            boundaries.push(grid[i]);
            i += 1;
            continue;
        };
        let mut j = i + 1;
        while j < points.len() && regime(&points[j]) == Some(key) {
            j += 1;
        }
        if i > 0 && !boundaries.contains(&grid[i]) {
            boundaries.push(grid[i]);
        }
        runs.push((i, j, key.0));
        i = j;
    }

    let mut rows = Vec::new();
    let mut segments = Vec::new();
    for (start, end, roles) in runs {
        if end - start < 3 {
            continue;
        }
        let seg = segments.len();
        segments.push(Segment {
            roles,
            p_start: grid[start],
            p_end: grid[end - 1],
        });
        let g = &grid[start..end];
        let h_values: Vec<f64> = points[start..end].iter().map(|pt| composite_entropy(&pt.values)).collect();
        let d2_direct = central_difference(g, &h_values, 2)?;
        let mut first = vec![[0.0; 3]; end - start - 2];
        let mut second = vec![[0.0; 3]; end - start - 2];
        for k in 0..3 {
            let traj: Vec<f64> = points[start..end].iter().map(|pt| pt.values[k]).collect();
            for (i, d) in central_difference(g, &traj, 1)?.into_iter().enumerate() {
                first[i][k] = d;
            }
            for (i, d) in central_difference(g, &traj, 2)?.into_iter().enumerate() {
                second[i][k] = d;
            }
        }
        for i in 0..first.len() {
            let v = points[start + 1 + i].values;
            rows.push(assemble(g[i + 1], seg, v, first[i], second[i], h_values[i + 1], d2_direct[i]));
        }
    }

    let dev = |f: fn(&DerivativeRow) -> f64| {
        rows.iter()
            .map(|r| (f(r) - r.d2h_direct).abs())
            .filter(|d| d.is_finite())
            .fold(0.0, f64::max)
    };
    let max_dev_printed = dev(|r| r.d2h_printed);
    let max_dev_analytic = dev(|r| r.d2h_analytic);
    let regions = convexity_regions(&rows);
    Ok(DerivativeReport {
        rows,
        segments,
        boundaries,
        regions,
        max_dev_printed,
        max_dev_analytic,
    })
}

fn assemble(p: f64, segment: usize, v: [f64; 3], d1: [f64; 3], d2: [f64; 3], entropy: f64, direct: f64) -> DerivativeRow {
    let r = 1.0 - v[0] - v[1] - v[2];
    let (alpha, beta) = printed_coefficients(&v);
    let hess = analytic_hessian(&v);
    // Bounds that do not move contribute nothing; skipping them also avoids
    // undefined log terms where a probability sits at 0.
    let live: [bool; 3] = std::array::from_fn(|k| !(d1[k].abs() <= VANISHING && d2[k].abs() <= VANISHING));
    let grad: [f64; 3] = std::array::from_fn(|k| (r / v[k]).log2());

    let mut dh = 0.0;
    let mut printed = 0.0;
    let mut analytic = 0.0;
    for k in (0..3).filter(|&k| live[k]) {
        dh += grad[k] * d1[k];
        let cross: f64 = (0..3).filter(|&l| l != k && live[l]).map(|l| d1[l]).sum();
        printed += d2[k] * (1.0 / (alpha * v[k])).log2() - (beta[k] * d1[k] * d1[k] + alpha * d1[k] * cross) / LN_2;
        analytic += grad[k] * d2[k];
        for l in (0..3).filter(|&l| live[l]) {
            analytic += hess[k][l] * d1[k] * d1[l];
        }
    }
    DerivativeRow {
        p,
        segment,
        values: v,
        first: d1,
        second: d2,
        alpha,
        beta,
        entropy,
        dh_dp: dh,
        d2h_printed: printed,
        d2h_analytic: analytic,
        d2h_direct: direct,
    }
}

fn curvature_of(d: f64) -> Curvature {
    if d < -SIGN_EPS {
        Curvature::Concave
    } else if d > SIGN_EPS {
        Curvature::Convex
    } else {
        Curvature::Flat
    }
}

/// Maximal runs of one curvature sign. Flat points join the run in
/// progress, or the next one when they come first, so regions change only
/// where the sign actually flips.
pub fn convexity_regions(rows: &[DerivativeRow]) -> Vec<ConvexityRegion> {
    let usable: Vec<&DerivativeRow> = rows.iter().filter(|r| r.d2h_analytic.is_finite()).collect();
    let mut regions: Vec<ConvexityRegion> = Vec::new();
    let mut pending_flat: Option<f64> = None;
    for r in usable {
        let c = curvature_of(r.d2h_analytic);
        match (regions.last_mut(), c) {
            (None, Curvature::Flat) => {
                pending_flat.get_or_insert(r.p);
            }
            (None, _) => regions.push(ConvexityRegion {
                curvature: c,
                p_start: pending_flat.take().unwrap_or(r.p),
                p_end: r.p,
            }),
            (Some(last), Curvature::Flat) => last.p_end = r.p,
            (Some(last), c) if c == last.curvature => last.p_end = r.p,
            (Some(_), c) => regions.push(ConvexityRegion {
                curvature: c,
                p_start: r.p,
                p_end: r.p,
            }),
        }
    }
    if regions.is_empty() {
        if let (Some(start), Some(last)) = (pending_flat, rows.last()) {
            regions.push(ConvexityRegion {
                curvature: Curvature::Flat,
                p_start: start,
                p_end: last.p,
            });
        }
    }
    regions
}

/// Noise level where the certified entropies of two sweeps cross, refined
/// by bisection with fresh certificates until the bracket is below `tol`.
/// The first sign change along the grid is used; `None` if there is none.
pub fn find_crossover(a: &SweepResult, b: &SweepResult, tol: f64) -> Result<Option<f64>> {
    if a.grid() != b.grid() {
        return Err(Error::arg("crossover needs sweeps on identical grids"));
    }
    if !(tol > 0.0) {
        return Err(Error::arg("crossover tolerance must be positive"));
    }
    // Fixed orientation so that swapping the arguments changes nothing.
    let (a, b) = if (a.entry.display_name(), a.spot) <= (b.entry.display_name(), b.spot) {
        (a, b)
    } else {
        (b, a)
    };
    let diff: Vec<(f64, f64)> = a
        .grid()
        .into_iter()
        .zip(a.shannon().into_iter().zip(b.shannon()))
        .map(|(p, (x, y))| (p, x - y))
        .filter(|(_, d)| d.is_finite() && d.abs() > SIGN_EPS)
        .collect();
    let Some(w) = diff.windows(2).find(|w| w[0].1.signum() != w[1].1.signum()) else {
        return Ok(None);
    };
    let (mut lo, mut hi) = (w[0].0, w[1].0);
    let lo_sign = w[0].1.signum();
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let ha = entropy::certify(&a.entry, mid, a.spot, &a.options)?.shannon_lower;
        let hb = entropy::certify(&b.entry, mid, b.spot, &b.options)?.shannon_lower;
        let d = ha - hb;
        if d.abs() <= SIGN_EPS {
            return Ok(Some(mid));
        }
        if d.signum() == lo_sign {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}
