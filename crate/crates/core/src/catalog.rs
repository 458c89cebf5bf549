//! Bell-expression families with their quantum bounds and spot settings.
//!
//! Families use their customary input labels: CHSH, ModCHSH, BC_n, I1 and
//! I2 count inputs from 1, Idelta and Jgamma from 0. Expressions are stored
//! with 0-based indices; [`CatalogEntry::spot_from_label`] and
//! [`CatalogEntry::spot_labels`] translate.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, FRAC_PI_6, PI, SQRT_2};
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npa::{Letter, Monomial, MomentProblem};
use crate::scenario::{werner_behavior, BellExpression, Behavior, Scenario};
use crate::sdp::{self, Direction, Tolerances};

/// Claimed and verified bounds further apart than this mark an entry suspect.
pub const SUSPECT_TOLERANCE: f64 = 1e-4;

/// A relaxation level: all words up to `level`, optionally plus every
/// Alice-Bob product ("1+AB").
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Relaxation {
    pub level: usize,
    pub extra_ab: bool,
}

impl Relaxation {
    pub const fn level(level: usize) -> Self {
        Relaxation { level, extra_ab: false }
    }

    pub fn build(&self, scenario: Scenario) -> Result<MomentProblem> {
        if self.extra_ab {
            let extra: Vec<Monomial> = (0..scenario.alice_inputs())
                .flat_map(|x| (0..scenario.bob_inputs()).map(move |y| Monomial::new([Letter::alice(x), Letter::bob(y)])))
                .collect();
            MomentProblem::build_with_extra(scenario, self.level, &extra)
        } else {
            MomentProblem::build(scenario, self.level)
        }
    }
}

impl Default for Relaxation {
    fn default() -> Self {
        Relaxation::level(2)
    }
}

impl fmt::Display for Relaxation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.extra_ab {
            write!(f, "{}+AB", self.level)
        } else {
            write!(f, "{}", self.level)
        }
    }
}

impl FromStr for Relaxation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let (num, extra_ab) = match t.strip_suffix("+AB").or_else(|| t.strip_suffix("+ab")) {
            Some(rest) => (rest, true),
            None => (t, false),
        };
        let level: usize = num
            .trim()
            .parse()
            .map_err(|_| Error::arg(format!("bad relaxation level '{s}' (expected e.g. 2 or 1+AB)")))?;
        if level == 0 {
            return Err(Error::arg("relaxation level must be at least 1"));
        }
        Ok(Relaxation { level, extra_ab })
    }
}

/// How the Jgamma coefficient argument is read: `Shifted` uses
/// `gamma + pi/6`, which turns gamma = pi/12 into CHSH; `Literal` uses
/// `(gamma + pi)/6`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaForm {
    Shifted,
    Literal,
}

impl GammaForm {
    pub fn angle(self, gamma: f64) -> f64 {
        match self {
            GammaForm::Shifted => gamma + FRAC_PI_6,
            GammaForm::Literal => (gamma + PI) / 6.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Chsh,
    ModChsh,
    BraunsteinCaves { n: usize },
    I1,
    I2,
    IDelta { delta: f64 },
    JGamma { gamma: f64, form: GammaForm },
}

pub const NAMES: [&str; 7] = ["CHSH", "ModCHSH", "BC", "I1", "I2", "Idelta", "Jgamma"];

impl Family {
    /// Looks a family up by catalog name and `key=value` parameters.
    pub fn from_name(name: &str, params: &BTreeMap<String, f64>) -> Result<Family> {
        let param = |key: &str| -> Result<f64> {
            params
                .get(key)
                .copied()
                .ok_or_else(|| Error::arg(format!("{name} requires parameter '{key}'")))
        };
        let allow = |keys: &[&str]| -> Result<()> {
            match params.keys().find(|k| !keys.contains(&k.as_str())) {
                Some(k) => Err(Error::arg(format!("{name} does not take parameter '{k}'"))),
                None => Ok(()),
            }
        };
        // "BC3" is shorthand for "BC" with n = 3.
        let lower = name.to_ascii_lowercase();
        if let Some(n) = lower.strip_prefix("bc").and_then(|d| d.parse::<usize>().ok()) {
            if params.contains_key("n") {
                return Err(Error::arg(format!("{name} already fixes n")));
            }
            let mut with_n = params.clone();
            with_n.insert("n".into(), n as f64);
            return Family::from_name("BC", &with_n);
        }
        let family = match lower.as_str() {
            "chsh" => {
                allow(&[])?;
                Family::Chsh
            }
            "modchsh" => {
                allow(&[])?;
                Family::ModChsh
            }
            "bc" => {
                allow(&["n"])?;
                let n = param("n")?;
                if n.fract() != 0.0 || !(2.0..=12.0).contains(&n) {
                    return Err(Error::arg(format!("BC requires an integer n in 2..=12, got {n}")));
                }
                Family::BraunsteinCaves { n: n as usize }
            }
            "i1" => {
                allow(&[])?;
                Family::I1
            }
            "i2" => {
                allow(&[])?;
                Family::I2
            }
            "idelta" => {
                allow(&["delta"])?;
                let delta = params.get("delta").copied().unwrap_or(FRAC_PI_6);
                Family::IDelta { delta }
            }
            "jgamma" => {
                allow(&["gamma", "literal"])?;
                let gamma = params.get("gamma").copied().unwrap_or(PI / 12.0);
                let form = match params.get("literal").copied().unwrap_or(0.0) {
                    0.0 => GammaForm::Shifted,
                    1.0 => GammaForm::Literal,
                    v => return Err(Error::arg(format!("Jgamma 'literal' must be 0 or 1, got {v}"))),
                };
                Family::JGamma { gamma, form }
            }
            _ => {
                return Err(Error::arg(format!(
                    "unknown inequality '{name}' (known: {})",
                    NAMES.join(", ")
                )))
            }
        };
        family.validate()?;
        Ok(family)
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Family::IDelta { delta } => {
                if !(delta > 0.0 && delta < FRAC_PI_4) || (2.0 * delta).cos().abs() < 1e-9 {
                    return Err(Error::arg(format!("Idelta requires 0 < delta < pi/4, got {delta}")));
                }
            }
            Family::JGamma { gamma, form } => {
                let c = 4.0 * form.angle(gamma).cos().powi(2) - 1.0;
                if !gamma.is_finite() || !c.is_finite() || c.abs() < 1e-12 {
                    return Err(Error::arg(format!("Jgamma coefficient degenerates at gamma = {gamma}")));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Chsh => "CHSH",
            Family::ModChsh => "ModCHSH",
            Family::BraunsteinCaves { .. } => "BC",
            Family::I1 => "I1",
            Family::I2 => "I2",
            Family::IDelta { .. } => "Idelta",
            Family::JGamma { .. } => "Jgamma",
        }
    }

    pub fn params(&self) -> BTreeMap<String, f64> {
        let mut p = BTreeMap::new();
        match *self {
            Family::BraunsteinCaves { n } => {
                p.insert("n".into(), n as f64);
            }
            Family::IDelta { delta } => {
                p.insert("delta".into(), delta);
            }
            Family::JGamma { gamma, form } => {
                p.insert("gamma".into(), gamma);
                if form == GammaForm::Literal {
                    p.insert("literal".into(), 1.0);
                }
            }
            _ => {}
        }
        p
    }

    /// Offset between customary input labels and 0-based indices.
    pub fn label_base(&self) -> usize {
        match self {
            Family::IDelta { .. } | Family::JGamma { .. } => 0,
            _ => 1,
        }
    }

    /// Display name including parameters, e.g. `BC3`.
    pub fn display_name(&self) -> String {
        match *self {
            Family::BraunsteinCaves { n } => format!("BC{n}"),
            Family::IDelta { delta } => format!("Idelta(delta={delta:.7})"),
            Family::JGamma { gamma, form: GammaForm::Shifted } => format!("Jgamma(gamma={gamma:.7})"),
            Family::JGamma { gamma, form: GammaForm::Literal } => format!("Jgamma(gamma={gamma:.7},literal)"),
            _ => self.name().to_string(),
        }
    }
}

#[derive(Debug)]
pub struct CatalogEntry {
    family: Family,
    expression: BellExpression,
    tsirelson_claimed: Option<f64>,
    /// The printed bound is known to be unreliable regardless of numerics.
    printed_suspect: bool,
    spot_settings: Vec<(usize, usize)>,
    cache: Mutex<HashMap<Relaxation, TsirelsonBound>>,
}

impl Clone for CatalogEntry {
    fn clone(&self) -> Self {
        CatalogEntry {
            family: self.family,
            expression: self.expression.clone(),
            tsirelson_claimed: self.tsirelson_claimed,
            printed_suspect: self.printed_suspect,
            spot_settings: self.spot_settings.clone(),
            cache: Mutex::new(self.cache.lock().expect("cache lock").clone()),
        }
    }
}

/// Numerical maximum of a Bell expression over one relaxation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsirelsonBound {
    pub relaxation: Relaxation,
    /// Certified upper bound.
    pub upper: f64,
    /// Value reached by the returned moments; never above `upper`.
    pub attained: f64,
    pub status: sdp::SolveStatus,
}

/// Coefficient record in customary input labels, for serialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoeffRecord {
    pub x: usize,
    pub y: usize,
    pub coeff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogRecord {
    pub name: String,
    pub params: BTreeMap<String, f64>,
    pub coeffs: Vec<CoeffRecord>,
    pub constant: f64,
    pub tsirelson_claimed: Option<f64>,
    pub tsirelson_verified: f64,
    pub spot_settings: Vec<(usize, usize)>,
}

/// Looks up a catalog entry by name and parameters.
pub fn get(name: &str, params: &BTreeMap<String, f64>) -> Result<CatalogEntry> {
    Ok(CatalogEntry::new(Family::from_name(name, params)?))
}

fn chained_coeffs(n: usize) -> Vec<((usize, usize), f64)> {
    let mut c = Vec::with_capacity(2 * n);
    for i in 0..n {
        c.push(((i, i), 1.0));
        if i + 1 < n {
            c.push(((i, i + 1), 1.0));
        }
    }
    c.push(((n - 1, 0), -1.0));
    c
}

/// 1-based `(x, y, coeff)` triples to 0-based coefficients.
fn from_labels(terms: &[(usize, usize, f64)]) -> Vec<((usize, usize), f64)> {
    terms.iter().map(|&(x, y, c)| ((x - 1, y - 1), c)).collect()
}

impl CatalogEntry {
    pub fn new(family: Family) -> CatalogEntry {
        let sc = |a, b| Scenario::new(a, b).expect("catalog scenarios have at least two inputs");
        let (scenario, coeffs, claimed, printed_suspect, spots): (Scenario, Vec<((usize, usize), f64)>, Option<f64>, bool, Vec<(usize, usize)>) =
            match family {
                Family::Chsh => (
                    sc(2, 2),
                    from_labels(&[(1, 1, 1.0), (1, 2, 1.0), (2, 1, 1.0), (2, 2, -1.0)]),
                    Some(2.0 * SQRT_2),
                    false,
                    vec![(0, 0)],
                ),
                Family::ModChsh => (
                    sc(2, 3),
                    from_labels(&[(1, 2, 1.0), (1, 3, 1.0), (2, 1, 1.0), (2, 2, 1.0), (2, 3, -1.0)]),
                    Some(1.0 + 2.0 * SQRT_2),
                    false,
                    vec![(0, 0)],
                ),
                Family::BraunsteinCaves { n } => {
                    let spots = match n {
                        3 => vec![(0, 2)],
                        5 => vec![(3, 1), (0, 3)],
                        7 => vec![(3, 0), (0, 4)],
                        _ => vec![(0, 0)],
                    };
                    let b = 2.0 * n as f64 * (PI / (2.0 * n as f64)).cos();
                    (sc(n, n), chained_coeffs(n), Some(b), false, spots)
                }
                Family::I1 => (
                    sc(4, 3),
                    from_labels(&[
                        (1, 2, 1.0),
                        (1, 3, -1.0),
                        (2, 1, -1.0),
                        (2, 2, -1.0),
                        (3, 1, 1.0),
                        (3, 3, 1.0),
                        (4, 1, 1.0),
                    ]),
                    Some(1.0 + 6.0 * FRAC_PI_2.cos()),
                    true,
                    vec![(0, 0)],
                ),
                Family::I2 => (
                    sc(4, 3),
                    from_labels(&[
                        (1, 2, -1.0),
                        (1, 3, 1.0),
                        (2, 1, 1.0),
                        (2, 2, 1.0),
                        (2, 3, 1.0),
                        (3, 2, 1.0),
                        (3, 3, -1.0),
                        (4, 1, 1.0),
                        (4, 2, 1.0),
                        (4, 3, 1.0),
                    ]),
                    Some(2.0 + 4.0 * SQRT_2),
                    false,
                    vec![(0, 0)],
                ),
                Family::IDelta { delta } => {
                    let s = delta.sin();
                    let c2 = (2.0 * delta).cos();
                    // As printed: 2cos^3(d) / (cos(2d) * (1/sin(d))).
                    let claimed = 2.0 * delta.cos().powi(3) / (c2 * (1.0 / s));
                    (
                        sc(2, 2),
                        vec![((0, 0), 1.0), ((0, 1), 1.0 / s), ((1, 0), 1.0 / s), ((1, 1), -1.0 / c2)],
                        Some(claimed),
                        true,
                        vec![(0, 0)],
                    )
                }
                Family::JGamma { gamma, form } => {
                    let t = form.angle(gamma);
                    let c = 4.0 * t.cos().powi(2) - 1.0;
                    (
                        sc(2, 2),
                        vec![((0, 0), 1.0), ((1, 1), -1.0), ((0, 1), c), ((1, 0), c)],
                        Some(8.0 * t.cos().powi(3)),
                        false,
                        vec![(0, 0)],
                    )
                }
            };
        let expression = BellExpression::new(family.display_name(), scenario, coeffs, 0.0)
            .expect("catalog coefficients are valid");
        CatalogEntry {
            family,
            expression,
            tsirelson_claimed: claimed,
            printed_suspect,
            spot_settings: spots,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn name(&self) -> &'static str {
        self.family.name()
    }

    pub fn display_name(&self) -> String {
        self.family.display_name()
    }

    pub fn params(&self) -> BTreeMap<String, f64> {
        self.family.params()
    }

    pub fn expression(&self) -> &BellExpression {
        &self.expression
    }

    pub fn scenario(&self) -> Scenario {
        self.expression.scenario()
    }

    pub fn tsirelson_claimed(&self) -> Option<f64> {
        self.tsirelson_claimed
    }

    /// 0-based spot settings; the first is the default.
    pub fn spot_settings(&self) -> &[(usize, usize)] {
        &self.spot_settings
    }

    pub fn default_spot(&self) -> (usize, usize) {
        self.spot_settings[0]
    }

    pub fn spot_labels(&self) -> Vec<(usize, usize)> {
        self.spot_settings.iter().map(|&s| self.to_label(s)).collect()
    }

    pub fn to_label(&self, (x, y): (usize, usize)) -> (usize, usize) {
        let b = self.family.label_base();
        (x + b, y + b)
    }

    /// Translates a customary-label setting into 0-based indices.
    pub fn spot_from_label(&self, (x, y): (usize, usize)) -> Result<(usize, usize)> {
        let b = self.family.label_base();
        if x < b || y < b {
            return Err(Error::arg(format!(
                "{} inputs are labeled from {b}, got ({x},{y})",
                self.name()
            )));
        }
        let spot = (x - b, y - b);
        self.scenario().check_setting(spot.0, spot.1)?;
        Ok(spot)
    }

    pub fn local_bound(&self) -> Result<f64> {
        self.expression.local_bound()
    }

    /// NPA maximum of the expression at `relaxation`, memoized per
    /// relaxation when solved with default tolerances.
    pub fn tsirelson_numeric(&self, relaxation: Relaxation, tol: &Tolerances) -> Result<TsirelsonBound> {
        let cacheable = *tol == Tolerances::default();
        if cacheable {
            if let Some(b) = self.cache.lock().expect("cache lock").get(&relaxation) {
                return Ok(*b);
            }
        }
        let problem = relaxation.build(self.scenario())?;
        let f = problem.bell_functional(&self.expression)?;
        let sol = sdp::solve(&problem, &f, Direction::Maximize, &[], tol)?;
        let upper = sol.bound(format!("Tsirelson bound of {}", self.display_name()))?;
        let bound = TsirelsonBound {
            relaxation,
            upper,
            attained: sol.attained_value.min(upper),
            status: sol.status,
        };
        if cacheable {
            self.cache.lock().expect("cache lock").insert(relaxation, bound);
        }
        Ok(bound)
    }

    /// Numerical bound at the default relaxation (level 2).
    pub fn tsirelson_verified(&self) -> Result<TsirelsonBound> {
        self.tsirelson_numeric(Relaxation::default(), &Tolerances::default())
    }

    /// True when the printed bound is known to be wrong or disagrees with
    /// the numerical one by more than [`SUSPECT_TOLERANCE`].
    pub fn is_suspect(&self) -> Result<bool> {
        if self.printed_suspect {
            return Ok(true);
        }
        match self.tsirelson_claimed {
            Some(claimed) => Ok((claimed - self.tsirelson_verified()?.upper).abs() > SUSPECT_TOLERANCE),
            None => Ok(true),
        }
    }

    pub fn record(&self) -> Result<CatalogRecord> {
        self.record_with(Relaxation::default(), &Tolerances::default())
    }

    /// [`record`](Self::record) with the bound verified at `relaxation`.
    pub fn record_with(&self, relaxation: Relaxation, tol: &Tolerances) -> Result<CatalogRecord> {
        let b = self.family.label_base();
        Ok(CatalogRecord {
            name: self.name().to_string(),
            params: self.params(),
            coeffs: self
                .expression
                .coeffs()
                .iter()
                .map(|(&(x, y), &c)| CoeffRecord {
                    x: x + b,
                    y: y + b,
                    coeff: c,
                })
                .collect(),
            constant: self.expression.constant(),
            tsirelson_claimed: self.tsirelson_claimed,
            tsirelson_verified: self.tsirelson_numeric(relaxation, tol)?.upper,
            spot_settings: self.spot_labels(),
        })
    }

    /// Measurement angles for the p = 0 Werner witness: the best of several
    /// alternating-maximization runs of `sum c_xy cos(a_x - b_y)`.
    pub fn witness_angles(&self) -> (Vec<f64>, Vec<f64>) {
        optimize_angles(&self.expression, 16, 0x5eed)
    }

    /// Werner behavior at noise `p` with the witness angles.
    pub fn witness_behavior(&self, p: f64) -> Result<Behavior> {
        let (a, b) = self.witness_angles();
        werner_behavior(&a, &b, p)
    }
}

/// Maximizes `sum c_xy cos(a_x - b_y)` over angles. For fixed Bob angles the
/// best `a_x` is the phase of `sum_y c_xy e^{i b_y}`, and symmetrically.
pub fn optimize_angles(expr: &BellExpression, starts: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let s = expr.scenario();
    let (na, nb) = (s.alice_inputs(), s.bob_inputs());
    let value = |a: &[f64], b: &[f64]| -> f64 {
        expr.coeffs()
            .iter()
            .map(|(&(x, y), &c)| c * (a[x] - b[y]).cos())
            .sum()
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    for _ in 0..starts {
        let mut a: Vec<f64> = (0..na).map(|_| rng.random_range(-PI..PI)).collect();
        let mut b: Vec<f64> = (0..nb).map(|_| rng.random_range(-PI..PI)).collect();
        let mut prev = f64::NEG_INFINITY;
        for _ in 0..2000 {
            for (x, ax) in a.iter_mut().enumerate() {
                let (mut re, mut im) = (0.0, 0.0);
                for (y, by) in b.iter().enumerate() {
                    let c = expr.coeff(x, y);
                    re += c * by.cos();
                    im += c * by.sin();
                }
                if re != 0.0 || im != 0.0 {
                    *ax = im.atan2(re);
                }
            }
            for (y, by) in b.iter_mut().enumerate() {
                let (mut re, mut im) = (0.0, 0.0);
                for (x, ax) in a.iter().enumerate() {
                    let c = expr.coeff(x, y);
                    re += c * ax.cos();
                    im += c * ax.sin();
                }
                if re != 0.0 || im != 0.0 {
                    *by = im.atan2(re);
                }
            }
            let v = value(&a, &b);
            if v - prev < 1e-15 {
                break;
            }
            prev = v;
        }
        let v = value(&a, &b);
        if best.as_ref().is_none_or(|(bv, _, _)| v > *bv) {
            best = Some((v, a, b));
        }
    }
    let (_, a, b) = best.expect("at least one start");
    (a, b)
}

/// The catalog entries with their default parameters, in a fixed order.
pub fn standard_entries() -> Vec<CatalogEntry> {
    let mut out = vec![CatalogEntry::new(Family::Chsh), CatalogEntry::new(Family::ModChsh)];
    for n in [3, 5, 7] {
        out.push(CatalogEntry::new(Family::BraunsteinCaves { n }));
    }
    out.push(CatalogEntry::new(Family::I1));
    out.push(CatalogEntry::new(Family::I2));
    out.push(CatalogEntry::new(Family::IDelta { delta: FRAC_PI_6 }));
    out.push(CatalogEntry::new(Family::JGamma {
        gamma: PI / 12.0,
        form: GammaForm::Shifted,
    }));
    out
}
