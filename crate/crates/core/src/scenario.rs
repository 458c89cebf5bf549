//! Bipartite Bell scenarios with two binary-outcome parties.
//!
//! Inputs are 0-based everywhere in this module. Outcomes are the labels
//! `-1` and `+1`; the "+" projector of a measurement is the primitive
//! operator and "-" is its complement.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_1_SQRT_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NORMALIZATION_TOL: f64 = 1e-12;
const NO_SIGNALING_TOL: f64 = 1e-10;
const MAX_ENUMERATED_INPUTS: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Party {
    Alice,
    Bob,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Outcome {
    Minus,
    Plus,
}

impl Outcome {
    pub const ALL: [Outcome; 2] = [Outcome::Minus, Outcome::Plus];

    pub fn sign(self) -> f64 {
        match self {
            Outcome::Minus => -1.0,
            Outcome::Plus => 1.0,
        }
    }

    pub fn from_label(label: i32) -> Result<Self> {
        match label {
            -1 => Ok(Outcome::Minus),
            1 => Ok(Outcome::Plus),
            other => Err(Error::arg(format!("outcome label must be -1 or +1, got {other}"))),
        }
    }

    pub fn label(self) -> i32 {
        match self {
            Outcome::Minus => -1,
            Outcome::Plus => 1,
        }
    }

    fn index(self) -> usize {
        match self {
            Outcome::Minus => 0,
            Outcome::Plus => 1,
        }
    }
}

/// The four joint outcomes at one setting, in the fixed order used for every
/// four-entry distribution in this crate: (-1,-1), (-1,+1), (+1,-1), (+1,+1).
pub const JOINT_OUTCOMES: [(Outcome, Outcome); 4] = [
    (Outcome::Minus, Outcome::Minus),
    (Outcome::Minus, Outcome::Plus),
    (Outcome::Plus, Outcome::Minus),
    (Outcome::Plus, Outcome::Plus),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scenario {
    alice_inputs: usize,
    bob_inputs: usize,
}

impl Scenario {
    pub fn new(alice_inputs: usize, bob_inputs: usize) -> Result<Self> {
        if alice_inputs < 2 || bob_inputs < 2 {
            return Err(Error::arg(format!(
                "each party needs at least two inputs, got ({alice_inputs}, {bob_inputs})"
            )));
        }
        Ok(Scenario {
            alice_inputs,
            bob_inputs,
        })
    }

    pub fn alice_inputs(&self) -> usize {
        self.alice_inputs
    }

    pub fn bob_inputs(&self) -> usize {
        self.bob_inputs
    }

    pub fn inputs(&self, party: Party) -> usize {
        match party {
            Party::Alice => self.alice_inputs,
            Party::Bob => self.bob_inputs,
        }
    }

    pub fn check_setting(&self, x: usize, y: usize) -> Result<()> {
        if x >= self.alice_inputs || y >= self.bob_inputs {
            return Err(Error::arg(format!(
                "setting ({x}, {y}) outside scenario with {} x {} inputs",
                self.alice_inputs, self.bob_inputs
            )));
        }
        Ok(())
    }

    fn table_len(&self) -> usize {
        self.alice_inputs * self.bob_inputs * 4
    }

    fn slot(&self, a: Outcome, b: Outcome, x: usize, y: usize) -> usize {
        ((x * self.bob_inputs + y) * 2 + a.index()) * 2 + b.index()
    }
}

/// Conditional probability table `P(a,b|x,y)`, stored densely by setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Behavior {
    scenario: Scenario,
    table: Vec<f64>,
}

impl Behavior {
    /// Builds a behavior from a closure, validating range, normalization and
    /// no-signaling.
    pub fn from_fn<F>(scenario: Scenario, mut prob: F) -> Result<Self>
    where
        F: FnMut(Outcome, Outcome, usize, usize) -> f64,
    {
        let mut table = vec![0.0; scenario.table_len()];
        for x in 0..scenario.alice_inputs {
            for y in 0..scenario.bob_inputs {
                for (a, b) in JOINT_OUTCOMES {
                    table[scenario.slot(a, b, x, y)] = prob(a, b, x, y);
                }
            }
        }
        let behavior = Behavior { scenario, table };
        behavior.validate()?;
        Ok(behavior)
    }

    pub fn uniform(scenario: Scenario) -> Self {
        Behavior {
            scenario,
            table: vec![0.25; scenario.table_len()],
        }
    }

    /// Deterministic local strategy: Alice answers `alice[x]`, Bob `bob[y]`.
    pub fn deterministic(scenario: Scenario, alice: &[Outcome], bob: &[Outcome]) -> Result<Self> {
        if alice.len() != scenario.alice_inputs || bob.len() != scenario.bob_inputs {
            return Err(Error::arg("strategy length does not match the scenario"));
        }
        Behavior::from_fn(scenario, |a, b, x, y| {
            if alice[x] == a && bob[y] == b {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario
    }

    pub fn prob(&self, a: Outcome, b: Outcome, x: usize, y: usize) -> f64 {
        self.table[self.scenario.slot(a, b, x, y)]
    }

    /// The four joint probabilities at `(x, y)` in [`JOINT_OUTCOMES`] order.
    pub fn setting_distribution(&self, x: usize, y: usize) -> Result<[f64; 4]> {
        self.scenario.check_setting(x, y)?;
        Ok(JOINT_OUTCOMES.map(|(a, b)| self.prob(a, b, x, y)))
    }

    pub fn correlator(&self, x: usize, y: usize) -> Result<f64> {
        self.scenario.check_setting(x, y)?;
        Ok(JOINT_OUTCOMES
            .iter()
            .map(|&(a, b)| a.sign() * b.sign() * self.prob(a, b, x, y))
            .sum())
    }

    /// Convex combination `weight * self + (1 - weight) * other`.
    pub fn mix(&self, other: &Behavior, weight: f64) -> Result<Behavior> {
        if self.scenario != other.scenario {
            return Err(Error::arg("cannot mix behaviors from different scenarios"));
        }
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::arg(format!("mixing weight {weight} outside [0, 1]")));
        }
        let table = self
            .table
            .iter()
            .zip(&other.table)
            .map(|(p, q)| weight * p + (1.0 - weight) * q)
            .collect();
        Ok(Behavior {
            scenario: self.scenario,
            table,
        })
    }

    fn validate(&self) -> Result<()> {
        let s = self.scenario;
        if let Some(bad) = self.table.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::arg(format!("probability {bad} outside [0, 1]")));
        }
        for x in 0..s.alice_inputs {
            for y in 0..s.bob_inputs {
                let total: f64 = JOINT_OUTCOMES.iter().map(|&(a, b)| self.prob(a, b, x, y)).sum();
                if (total - 1.0).abs() > NORMALIZATION_TOL {
                    return Err(Error::arg(format!(
                        "setting ({x}, {y}) sums to {total}, not 1"
                    )));
                }
            }
        }
        if let Some(gap) = self.max_signaling() {
            if gap > NO_SIGNALING_TOL {
                return Err(Error::arg(format!("behavior signals (deviation {gap:e})")));
            }
        }
        Ok(())
    }

    /// Largest deviation of a marginal across the other party's inputs.
    pub fn max_signaling(&self) -> Option<f64> {
        let s = self.scenario;
        let mut worst: f64 = 0.0;
        for a in Outcome::ALL {
            for x in 0..s.alice_inputs {
                let marginal = |y: usize| Outcome::ALL.iter().map(|&b| self.prob(a, b, x, y)).sum::<f64>();
                let first = marginal(0);
                for y in 1..s.bob_inputs {
                    worst = worst.max((marginal(y) - first).abs());
                }
            }
        }
        for b in Outcome::ALL {
            for y in 0..s.bob_inputs {
                let marginal = |x: usize| Outcome::ALL.iter().map(|&a| self.prob(a, b, x, y)).sum::<f64>();
                let first = marginal(0);
                for x in 1..s.alice_inputs {
                    worst = worst.max((marginal(x) - first).abs());
                }
            }
        }
        Some(worst)
    }
}

/// A Bell expression `constant + sum coeff(x,y) * C(x,y)` over correlators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BellExpression {
    scenario: Scenario,
    coeffs: BTreeMap<(usize, usize), f64>,
    constant: f64,
    name: String,
}

impl BellExpression {
    pub fn new(
        name: impl Into<String>,
        scenario: Scenario,
        coeffs: impl IntoIterator<Item = ((usize, usize), f64)>,
        constant: f64,
    ) -> Result<Self> {
        let expr = Self::build(name.into(), scenario, coeffs, constant)?;
        if expr.coeffs.is_empty() {
            return Err(Error::arg(format!(
                "Bell expression '{}' has no nonzero correlator coefficient",
                expr.name
            )));
        }
        Ok(expr)
    }

    /// Expression with no correlator terms. Only meaningful as a functional;
    /// it separates nothing.
    pub fn offset_only(scenario: Scenario, constant: f64) -> Self {
        BellExpression {
            scenario,
            coeffs: BTreeMap::new(),
            constant,
            name: "offset".into(),
        }
    }

    fn build(
        name: String,
        scenario: Scenario,
        coeffs: impl IntoIterator<Item = ((usize, usize), f64)>,
        constant: f64,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for ((x, y), c) in coeffs {
            scenario.check_setting(x, y)?;
            if !c.is_finite() || !constant.is_finite() {
                return Err(Error::arg(format!("non-finite coefficient in '{name}'")));
            }
            *map.entry((x, y)).or_insert(0.0) += c;
        }
        map.retain(|_, c| *c != 0.0);
        Ok(BellExpression {
            scenario,
            coeffs: map,
            constant,
            name,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn coeffs(&self) -> &BTreeMap<(usize, usize), f64> {
        &self.coeffs
    }

    pub fn coeff(&self, x: usize, y: usize) -> f64 {
        self.coeffs.get(&(x, y)).copied().unwrap_or(0.0)
    }

    pub fn bell_value(&self, behavior: &Behavior) -> Result<f64> {
        if behavior.scenario() != self.scenario {
            return Err(Error::arg(format!(
                "expression '{}' and behavior belong to different scenarios",
                self.name
            )));
        }
        let mut value = self.constant;
        for (&(x, y), &c) in &self.coeffs {
            value += c * behavior.correlator(x, y)?;
        }
        Ok(value)
    }

    /// Value of the expression for deterministic ±1 answers.
    pub fn deterministic_value(&self, alice: &[f64], bob: &[f64]) -> f64 {
        self.constant
            + self
                .coeffs
                .iter()
                .map(|(&(x, y), &c)| c * alice[x] * bob[y])
                .sum::<f64>()
    }

    /// Classical bound: maximum over deterministic local strategies.
    ///
    /// Alice's answers are enumerated; Bob's best response to each is exact
    /// because the expression is linear in each of his answers separately.
    pub fn local_bound(&self) -> Result<f64> {
        let (na, nb) = (self.scenario.alice_inputs, self.scenario.bob_inputs);
        if na + nb > MAX_ENUMERATED_INPUTS {
            return Err(Error::Capacity(format!(
                "local bound enumeration limited to {MAX_ENUMERATED_INPUTS} inputs, got {}",
                na + nb
            )));
        }
        let mut best = f64::NEG_INFINITY;
        let mut alice = vec![0.0; na];
        for mask in 0u64..(1u64 << na) {
            for (x, a) in alice.iter_mut().enumerate() {
                *a = if mask >> x & 1 == 1 { 1.0 } else { -1.0 };
            }
            let mut value = self.constant;
            for y in 0..nb {
                let pull: f64 = (0..na).map(|x| self.coeff(x, y) * alice[x]).sum();
                value += pull.abs();
            }
            best = best.max(value);
        }
        Ok(best)
    }
}

/// Behavior of the Werner state `p * I/4 + (1 - p) |psi+><psi+|` under
/// qubit measurements `cos(t) Z + sin(t) X`, one angle per input.
pub fn werner_behavior(alice_angles: &[f64], bob_angles: &[f64], p: f64) -> Result<Behavior> {
    let realization = WernerRealization::new(alice_angles, bob_angles, p)?;
    let scenario = realization.scenario;
    Behavior::from_fn(scenario, |a, b, x, y| {
        let e = (1.0 - p) * (alice_angles[x] - bob_angles[y]).cos();
        (1.0 + a.sign() * b.sign() * e) / 4.0
    })
}

type Mat4 = [[f64; 4]; 4];

fn mat_mul(lhs: &Mat4, rhs: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for k in 0..4 {
            if lhs[i][k] == 0.0 {
                continue;
            }
            for j in 0..4 {
                out[i][j] += lhs[i][k] * rhs[k][j];
            }
        }
    }
    out
}

/// Explicit two-qubit realization of a Werner behavior. Evaluates
/// expectations of arbitrary products of "+" projectors, which is what the
/// moment-matrix soundness checks need.
#[derive(Clone, Debug)]
pub struct WernerRealization {
    scenario: Scenario,
    state: Mat4,
    alice: Vec<Mat4>,
    bob: Vec<Mat4>,
}

impl WernerRealization {
    pub fn new(alice_angles: &[f64], bob_angles: &[f64], p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::arg(format!("noise level {p} outside [0, 1]")));
        }
        let scenario = Scenario::new(alice_angles.len(), bob_angles.len())?;
        // |psi+> = (|00> + |11>)/sqrt2 in the basis 00, 01, 10, 11.
        let psi = [FRAC_1_SQRT_2, 0.0, 0.0, FRAC_1_SQRT_2];
        let mut state = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                state[i][j] = (1.0 - p) * psi[i] * psi[j] + if i == j { p / 4.0 } else { 0.0 };
            }
        }
        let projector = |t: f64| -> [[f64; 2]; 2] {
            let (s, c) = t.sin_cos();
            [[(1.0 + c) / 2.0, s / 2.0], [s / 2.0, (1.0 - c) / 2.0]]
        };
        let on_alice = |q: [[f64; 2]; 2]| -> Mat4 {
            let mut m = [[0.0; 4]; 4];
            for (i, row) in m.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    if i % 2 == j % 2 {
                        *v = q[i / 2][j / 2];
                    }
                }
            }
            m
        };
        let on_bob = |q: [[f64; 2]; 2]| -> Mat4 {
            let mut m = [[0.0; 4]; 4];
            for (i, row) in m.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    if i / 2 == j / 2 {
                        *v = q[i % 2][j % 2];
                    }
                }
            }
            m
        };
        Ok(WernerRealization {
            scenario,
            state,
            alice: alice_angles.iter().map(|&t| on_alice(projector(t))).collect(),
            bob: bob_angles.iter().map(|&t| on_bob(projector(t))).collect(),
        })
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario
    }

    /// Real part of `tr(rho * P_1 P_2 ... P_k)` for the given projector word.
    pub fn expectation<I>(&self, word: I) -> f64
    where
        I: IntoIterator<Item = (Party, usize)>,
    {
        let mut acc = self.state;
        for (party, input) in word {
            let op = match party {
                Party::Alice => &self.alice[input],
                Party::Bob => &self.bob[input],
            };
            acc = mat_mul(&acc, op);
        }
        (0..4).map(|i| acc[i][i]).sum()
    }
}
