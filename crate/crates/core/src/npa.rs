//! Moment-matrix relaxations of the quantum set (NPA hierarchy).
//!
//! Every binary measurement is represented by its "+" projector; the "-"
//! projector is the complement `1 - P`. Words over these projectors are
//! reduced with two rules: Alice's letters commute with Bob's, and every
//! letter is idempotent. The moment matrix is real symmetric, so a word and
//! its adjoint share one moment variable.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{BellExpression, Outcome, Party, Scenario};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Letter {
    pub party: Party,
    pub input: usize,
}

impl Letter {
    pub fn alice(input: usize) -> Self {
        Letter {
            party: Party::Alice,
            input,
        }
    }

    pub fn bob(input: usize) -> Self {
        Letter {
            party: Party::Bob,
            input,
        }
    }
}

impl fmt::Display for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.party {
            Party::Alice => write!(f, "A{}", self.input),
            Party::Bob => write!(f, "B{}", self.input),
        }
    }
}

/// A word of projectors; the empty word is the identity.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Monomial(Vec<Letter>);

impl Monomial {
    pub fn identity() -> Self {
        Monomial(Vec::new())
    }

    pub fn new(letters: impl IntoIterator<Item = Letter>) -> Self {
        Monomial(letters.into_iter().collect())
    }

    pub fn letters(&self) -> &[Letter] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn concat(&self, other: &Monomial) -> Monomial {
        let mut letters = self.0.clone();
        letters.extend_from_slice(&other.0);
        Monomial(letters)
    }

    /// Adjoint of a word: the letters are self-adjoint, so this is the
    /// reversal.
    pub fn adjoint(&self) -> Monomial {
        Monomial(self.0.iter().rev().copied().collect())
    }

    pub fn canonical(&self) -> Monomial {
        canonicalize(self)
    }

    /// Key of the real moment variable this word evaluates to.
    pub fn moment_key(&self) -> Monomial {
        let direct = canonicalize(self);
        let flipped = canonicalize(&direct.adjoint());
        direct.min(flipped)
    }

    pub fn is_canonical(&self) -> bool {
        canonicalize(self) == *self
    }

    /// Iterator in the `(party, input)` form accepted by
    /// [`crate::scenario::WernerRealization::expectation`].
    pub fn party_inputs(&self) -> impl Iterator<Item = (Party, usize)> + '_ {
        self.0.iter().map(|l| (l.party, l.input))
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "1");
        }
        for l in &self.0 {
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

/// Normal form: Alice's letters first (relative order kept), then Bob's,
/// with runs of a repeated letter collapsed. Never lengthens the word.
pub fn canonicalize(word: &Monomial) -> Monomial {
    let mut out = Vec::with_capacity(word.len());
    for party in [Party::Alice, Party::Bob] {
        let start = out.len();
        for &l in word.0.iter().filter(|l| l.party == party) {
            if out.len() > start && out.last() == Some(&l) {
                continue;
            }
            out.push(l);
        }
    }
    Monomial(out)
}

fn party_words(party: Party, inputs: usize, len: usize) -> Vec<Vec<Letter>> {
    let mut words: Vec<Vec<Letter>> = vec![Vec::new()];
    for _ in 0..len {
        let mut next = Vec::new();
        for w in &words {
            for i in 0..inputs {
                let l = Letter { party, input: i };
                if w.last() != Some(&l) {
                    let mut nw = w.clone();
                    nw.push(l);
                    next.push(nw);
                }
            }
        }
        words = next;
    }
    words
}

/// All canonical words of length at most `level`, ordered by length, then by
/// the number of Alice letters (descending), then lexicographically.
pub fn canonical_words(scenario: Scenario, level: usize) -> Vec<Monomial> {
    let mut out = vec![Monomial::identity()];
    for len in 1..=level {
        for alice_len in (0..=len).rev() {
            let alice = party_words(Party::Alice, scenario.alice_inputs(), alice_len);
            let bob = party_words(Party::Bob, scenario.bob_inputs(), len - alice_len);
            for a in &alice {
                for b in &bob {
                    out.push(Monomial(a.iter().chain(b).copied().collect()));
                }
            }
        }
    }
    out
}

/// Affine function `constant + sum coef * y[var]` of the moment variables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinearFunctional {
    constant: f64,
    terms: BTreeMap<usize, f64>,
}

const PRUNE_TOL: f64 = 1e-14;

impl LinearFunctional {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(value: f64) -> Self {
        LinearFunctional {
            constant: value,
            terms: BTreeMap::new(),
        }
    }

    pub fn variable(id: usize) -> Self {
        let mut terms = BTreeMap::new();
        terms.insert(id, 1.0);
        LinearFunctional {
            constant: 0.0,
            terms,
        }
    }

    pub fn from_terms(constant: f64, terms: impl IntoIterator<Item = (usize, f64)>) -> Self {
        let mut f = LinearFunctional::constant(constant);
        for (id, c) in terms {
            *f.terms.entry(id).or_insert(0.0) += c;
        }
        f.prune();
        f
    }

    pub fn offset(&self) -> f64 {
        self.constant
    }

    pub fn terms(&self) -> &BTreeMap<usize, f64> {
        &self.terms
    }

    pub fn coeff(&self, id: usize) -> f64 {
        self.terms.get(&id).copied().unwrap_or(0.0)
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn max_variable(&self) -> Option<usize> {
        self.terms.keys().next_back().copied()
    }

    /// `self + scale * other`
    pub fn add_scaled(&mut self, other: &LinearFunctional, scale: f64) {
        self.constant += scale * other.constant;
        for (&id, &c) in &other.terms {
            *self.terms.entry(id).or_insert(0.0) += scale * c;
        }
        self.prune();
    }

    pub fn scaled(&self, scale: f64) -> LinearFunctional {
        let mut f = LinearFunctional::zero();
        f.add_scaled(self, scale);
        f
    }

    pub fn evaluate(&self, moments: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|(&id, &c)| c * moments[id]).sum::<f64>()
    }

    fn prune(&mut self) {
        self.terms.retain(|_, c| c.abs() > PRUNE_TOL);
    }
}

impl std::ops::Add for LinearFunctional {
    type Output = LinearFunctional;

    fn add(mut self, rhs: LinearFunctional) -> LinearFunctional {
        self.add_scaled(&rhs, 1.0);
        self
    }
}

impl std::ops::Sub for LinearFunctional {
    type Output = LinearFunctional;

    fn sub(mut self, rhs: LinearFunctional) -> LinearFunctional {
        self.add_scaled(&rhs, -1.0);
        self
    }
}

/// One relaxation level: the moment matrix pattern plus its equalities.
#[derive(Clone, Debug)]
pub struct MomentProblem {
    scenario: Scenario,
    level: usize,
    monomials: Vec<Monomial>,
    variables: Vec<Monomial>,
    index: HashMap<Monomial, usize>,
    entries: Vec<usize>,
    equalities: Vec<(LinearFunctional, f64)>,
}

impl MomentProblem {
    pub fn build(scenario: Scenario, level: usize) -> Result<Self> {
        Self::build_with_extra(scenario, level, &[])
    }

    /// Builds the relaxation at `level` with additional rows/columns, which
    /// gives intermediate levels such as "1 + AB".
    pub fn build_with_extra(scenario: Scenario, level: usize, extra: &[Monomial]) -> Result<Self> {
        if level == 0 {
            return Err(Error::arg("hierarchy level must be at least 1"));
        }
        let mut monomials = canonical_words(scenario, level);
        for m in extra {
            for l in m.letters() {
                if l.input >= scenario.inputs(l.party) {
                    return Err(Error::arg(format!("extra monomial {m} uses an unknown input")));
                }
            }
            let c = canonicalize(m);
            if !monomials.contains(&c) {
                monomials.push(c);
            }
        }
        let n = monomials.len();
        let adjoints: Vec<Monomial> = monomials.iter().map(Monomial::adjoint).collect();
        let mut variables = Vec::new();
        let mut index = HashMap::new();
        let mut entries = vec![0usize; n * n];
        for i in 0..n {
            for j in i..n {
                let key = adjoints[i].concat(&monomials[j]).moment_key();
                let id = *index.entry(key.clone()).or_insert_with(|| {
                    variables.push(key);
                    variables.len() - 1
                });
                entries[i * n + j] = id;
                entries[j * n + i] = id;
            }
        }
        debug_assert_eq!(index[&Monomial::identity()], 0);
        let equalities = vec![(LinearFunctional::variable(0), 1.0)];
        Ok(MomentProblem {
            scenario,
            level,
            monomials,
            variables,
            index,
            entries,
            equalities,
        })
    }

    /// Level 1 plus every Alice-Bob product.
    pub fn build_one_plus_ab(scenario: Scenario) -> Result<Self> {
        let extra: Vec<Monomial> = (0..scenario.alice_inputs())
            .flat_map(|x| (0..scenario.bob_inputs()).map(move |y| Monomial::new([Letter::alice(x), Letter::bob(y)])))
            .collect();
        Self::build_with_extra(scenario, 1, &extra)
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn monomials(&self) -> &[Monomial] {
        &self.monomials
    }

    pub fn psd_dim(&self) -> usize {
        self.monomials.len()
    }

    pub fn num_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn variables(&self) -> &[Monomial] {
        &self.variables
    }

    /// Moment variable of entry `(i, j)` of the moment matrix.
    pub fn entry(&self, i: usize, j: usize) -> usize {
        self.entries[i * self.monomials.len() + j]
    }

    pub fn equalities(&self) -> &[(LinearFunctional, f64)] {
        &self.equalities
    }

    /// Variable id of an arbitrary word, if it occurs in the matrix.
    pub fn variable_of(&self, word: &Monomial) -> Option<usize> {
        self.index.get(&word.moment_key()).copied()
    }

    fn var(&self, word: Monomial) -> LinearFunctional {
        let id = self
            .variable_of(&word)
            .expect("products of at most one letter per party occur at every level");
        LinearFunctional::variable(id)
    }

    /// Upper-triangle positions `(i, j)`, `i <= j`, of every variable.
    pub fn variable_positions(&self) -> Vec<Vec<(usize, usize)>> {
        let n = self.monomials.len();
        let mut pos = vec![Vec::new(); self.variables.len()];
        for i in 0..n {
            for j in i..n {
                pos[self.entry(i, j)].push((i, j));
            }
        }
        pos
    }

    /// `P(a,b|x,y)` as a functional of the moments.
    pub fn probability_functional(&self, a: Outcome, b: Outcome, x: usize, y: usize) -> Result<LinearFunctional> {
        self.scenario.check_setting(x, y)?;
        let pa = self.var(Monomial::new([Letter::alice(x)]));
        let pb = self.var(Monomial::new([Letter::bob(y)]));
        let pab = self.var(Monomial::new([Letter::alice(x), Letter::bob(y)]));
        Ok(match (a, b) {
            (Outcome::Plus, Outcome::Plus) => pab,
            (Outcome::Plus, Outcome::Minus) => pa - pab,
            (Outcome::Minus, Outcome::Plus) => pb - pab,
            (Outcome::Minus, Outcome::Minus) => LinearFunctional::constant(1.0) - pa - pb + pab,
        })
    }

    /// `C(x,y) = 1 - 2<A_x> - 2<B_y> + 4<A_x B_y>`.
    pub fn correlator_functional(&self, x: usize, y: usize) -> Result<LinearFunctional> {
        self.scenario.check_setting(x, y)?;
        let mut f = LinearFunctional::constant(1.0);
        f.add_scaled(&self.var(Monomial::new([Letter::alice(x)])), -2.0);
        f.add_scaled(&self.var(Monomial::new([Letter::bob(y)])), -2.0);
        f.add_scaled(&self.var(Monomial::new([Letter::alice(x), Letter::bob(y)])), 4.0);
        Ok(f)
    }

    pub fn bell_functional(&self, expr: &BellExpression) -> Result<LinearFunctional> {
        if expr.scenario() != self.scenario {
            return Err(Error::arg(format!(
                "expression '{}' does not match the moment problem's scenario",
                expr.name()
            )));
        }
        let mut f = LinearFunctional::constant(expr.constant());
        for (&(x, y), &c) in expr.coeffs() {
            f.add_scaled(&self.correlator_functional(x, y)?, c);
        }
        Ok(f)
    }

    /// Moment vector induced by an explicit realization, given as the
    /// expectation of a word.
    pub fn moment_vector<F>(&self, expectation: F) -> Vec<f64>
    where
        F: FnMut(&Monomial) -> f64,
    {
        self.variables.iter().map(expectation).collect()
    }

    /// Dense row-major moment matrix for a moment vector.
    pub fn moment_matrix(&self, moments: &[f64]) -> Vec<f64> {
        self.entries.iter().map(|&id| moments[id]).collect()
    }

    /// Sparse text dump: a header, one `row col var` line per upper-triangle
    /// entry, then one `eq rhs var:coef ...` line per equality.
    pub fn write_sparse<W: Write>(&self, mut out: W) -> io::Result<()> {
        let n = self.psd_dim();
        writeln!(
            out,
            "# moment problem scenario={}x{} level={} psd_dim={} variables={}",
            self.scenario.alice_inputs(),
            self.scenario.bob_inputs(),
            self.level,
            n,
            self.num_variables()
        )?;
        for (id, w) in self.variables.iter().enumerate() {
            writeln!(out, "# var {id} {w}")?;
        }
        for i in 0..n {
            for j in i..n {
                writeln!(out, "{i} {j} {}", self.entry(i, j))?;
            }
        }
        for (f, rhs) in &self.equalities {
            write!(out, "eq {}", rhs - f.offset())?;
            for (id, c) in f.terms() {
                write!(out, " {id}:{c}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}
