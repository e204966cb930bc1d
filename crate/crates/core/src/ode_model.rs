//! Mass-action ODE systems.
//!
//! Every equation is a signed sum of rate constants times products of
//! distinct state variables:
//!
//! ```text
//! ẋ_k = Σ_terms sign · θ_i · Π_{j ∈ S} x_j
//! ```
//!
//! so the right-hand side is linear in `θ` and affine in any single state.
//! Indices are zero-based in the API; the text format uses one-based names
//! (`x1`, `theta1`).

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Product of distinct state variables. Empty means the constant 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Monomial(Vec<usize>);

impl Monomial {
    pub fn new(mut states: Vec<usize>) -> Result<Self> {
        states.sort_unstable();
        if states.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput(format!(
                "monomial repeats a state ({states:?}); only products of distinct states are supported"
            )));
        }
        Ok(Monomial(states))
    }

    pub fn constant() -> Self {
        Monomial(Vec::new())
    }

    pub fn states(&self) -> &[usize] {
        &self.0
    }

    pub fn contains(&self, state: usize) -> bool {
        self.0.binary_search(&state).is_ok()
    }

    pub fn is_constant(&self) -> bool {
        self.0.is_empty()
    }

    /// The monomial with `state` removed.
    pub fn without(&self, state: usize) -> Monomial {
        Monomial(self.0.iter().copied().filter(|&s| s != state).collect())
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.0.iter().map(|&j| x[j]).product()
    }
}

impl TryFrom<Vec<usize>> for Monomial {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Monomial::new(v)
    }
}

impl From<Monomial> for Vec<usize> {
    fn from(m: Monomial) -> Self {
        m.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub param: usize,
    /// `+1.0` or `-1.0`.
    pub sign: f64,
    pub monomial: Monomial,
}

impl Term {
    pub fn new(param: usize, sign: f64, states: Vec<usize>) -> Result<Self> {
        if sign != 1.0 && sign != -1.0 {
            return Err(Error::InvalidInput(format!("term sign must be ±1, got {sign}")));
        }
        Ok(Term {
            param,
            sign,
            monomial: Monomial::new(states)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeSystem {
    num_states: usize,
    num_params: usize,
    equations: Vec<Vec<Term>>,
}

impl OdeSystem {
    pub fn new(num_params: usize, equations: Vec<Vec<Term>>) -> Result<Self> {
        let num_states = equations.len();
        if num_states == 0 || num_params == 0 {
            return Err(Error::InvalidInput("a system needs at least one state and one parameter".into()));
        }
        for (k, eq) in equations.iter().enumerate() {
            for term in eq {
                if term.param >= num_params {
                    return Err(Error::IndexOutOfRange(format!(
                        "equation {} uses parameter {} but the system has {num_params}",
                        k + 1,
                        term.param + 1
                    )));
                }
                if let Some(&j) = term.monomial.states().iter().find(|&&j| j >= num_states) {
                    return Err(Error::IndexOutOfRange(format!(
                        "equation {} uses state {} but the system has {num_states}",
                        k + 1,
                        j + 1
                    )));
                }
            }
        }
        Ok(OdeSystem {
            num_states,
            num_params,
            equations,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn equations(&self) -> &[Vec<Term>] {
        &self.equations
    }

    pub fn equation(&self, k: usize) -> &[Term] {
        &self.equations[k]
    }

    fn check_dims(&self, theta: &[f64], x: &[f64]) -> Result<()> {
        if theta.len() != self.num_params {
            return Err(Error::DimensionMismatch(format!(
                "theta has {} entries, system has {} parameters",
                theta.len(),
                self.num_params
            )));
        }
        if x.len() != self.num_states {
            return Err(Error::DimensionMismatch(format!(
                "state has {} entries, system has {} states",
                x.len(),
                self.num_states
            )));
        }
        Ok(())
    }

    /// Right-hand side `f(x, θ)`.
    pub fn evaluate(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(theta, x)?;
        Ok(self.eval_unchecked(theta, x))
    }

    pub(crate) fn eval_unchecked(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        self.equations
            .iter()
            .map(|eq| eq.iter().map(|t| t.sign * theta[t.param] * t.monomial.eval(x)).sum())
            .collect()
    }

    /// `G_k` with `f_k(X, θ) = G_k θ` row by row over the columns of `X`.
    pub fn design_matrix(&self, x: &StateMatrix, k: usize) -> Result<DMatrix<f64>> {
        if x.num_states() != self.num_states {
            return Err(Error::DimensionMismatch(format!(
                "state matrix has {} rows, system has {} states",
                x.num_states(),
                self.num_states
            )));
        }
        if k >= self.num_states {
            return Err(Error::IndexOutOfRange(format!(
                "state index {k} for a {}-state system",
                self.num_states
            )));
        }
        let n = x.num_times();
        let mut g = DMatrix::zeros(n, self.num_params);
        for t in 0..n {
            let col: Vec<f64> = x.column(t);
            for term in &self.equations[k] {
                g[(t, term.param)] += term.sign * term.monomial.eval(&col);
            }
        }
        Ok(g)
    }

    /// Splits every equation at one time point into `slope · x_u + intercept`.
    pub fn affine_in_state(&self, theta: &[f64], x: &[f64], u: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_dims(theta, x)?;
        if u >= self.num_states {
            return Err(Error::IndexOutOfRange(format!(
                "state index {u} for a {}-state system",
                self.num_states
            )));
        }
        let mut slope = vec![0.0; self.num_states];
        let mut intercept = vec![0.0; self.num_states];
        for (k, eq) in self.equations.iter().enumerate() {
            for term in eq {
                let c = term.sign * theta[term.param];
                if term.monomial.contains(u) {
                    slope[k] += c * term.monomial.without(u).eval(x);
                } else {
                    intercept[k] += c * term.monomial.eval(x);
                }
            }
        }
        Ok((slope, intercept))
    }

    /// Parses the line-oriented text format, e.g.
    ///
    /// ```text
    /// dx1 = +theta1*x1 - theta2*x1*x2
    /// dx2 = -theta3*x2 + theta4*x1*x2
    /// ```
    ///
    /// `#` starts a comment; blank lines are ignored; `0` is an empty
    /// right-hand side.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows: Vec<(usize, Vec<Term>, usize)> = Vec::new();
        let mut max_param = 0;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: line_no, msg };
            let (lhs, rhs) = line.split_once('=').ok_or_else(|| err("expected `dxK = ...`".into()))?;
            let k = parse_index(lhs.trim(), "dx").ok_or_else(|| err(format!("bad left-hand side `{}`", lhs.trim())))?;
            let terms = parse_rhs(rhs).map_err(err)?;
            for t in &terms {
                max_param = max_param.max(t.param + 1);
            }
            rows.push((k, terms, line_no));
        }
        if rows.is_empty() {
            return Err(Error::Parse {
                line: 0,
                msg: "no equations".into(),
            });
        }
        let num_states = rows.len();
        let mut equations: Vec<Option<Vec<Term>>> = vec![None; num_states];
        for (k, terms, line) in rows {
            if k >= num_states {
                return Err(Error::Parse {
                    line,
                    msg: format!("dx{} defined but only {num_states} equations present", k + 1),
                });
            }
            if equations[k].is_some() {
                return Err(Error::Parse {
                    line,
                    msg: format!("dx{} defined twice", k + 1),
                });
            }
            for t in &terms {
                if let Some(&j) = t.monomial.states().iter().find(|&&j| j >= num_states) {
                    return Err(Error::Parse {
                        line,
                        msg: format!("x{} used but only {num_states} equations present", j + 1),
                    });
                }
            }
            equations[k] = Some(terms);
        }
        OdeSystem::new(max_param, equations.into_iter().map(|e| e.unwrap_or_default()).collect())
    }

    pub fn builtin_lotka_volterra() -> Self {
        let t = |p, s, m: &[usize]| Term::new(p, s, m.to_vec()).expect("valid builtin term");
        OdeSystem::new(
            4,
            vec![
                vec![t(0, 1.0, &[0]), t(1, -1.0, &[0, 1])],
                vec![t(2, -1.0, &[1]), t(3, 1.0, &[0, 1])],
            ],
        )
        .expect("valid builtin system")
    }

    /// Signalling pathway in the transformed coordinates
    /// `x = (S, Sd, R, RS, Rpp/(Km+Rpp))`, `θ = (k1, k2, k3, k4, V)`, with
    /// the Michaelis–Menten term replaced by `x5` directly.
    pub fn builtin_protein_pathway() -> Self {
        let t = |p, s, m: &[usize]| Term::new(p, s, m.to_vec()).expect("valid builtin term");
        OdeSystem::new(
            5,
            vec![
                vec![t(0, -1.0, &[0]), t(1, -1.0, &[0, 2]), t(2, 1.0, &[3])],
                vec![t(0, 1.0, &[0])],
                vec![t(1, -1.0, &[0, 2]), t(2, 1.0, &[3]), t(4, 1.0, &[4])],
                vec![t(1, 1.0, &[0, 2]), t(2, -1.0, &[3]), t(3, -1.0, &[3])],
                vec![t(3, 1.0, &[3]), t(4, -1.0, &[4])],
            ],
        )
        .expect("valid builtin system")
    }
}

impl fmt::Display for OdeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, eq) in self.equations.iter().enumerate() {
            write!(f, "dx{} =", k + 1)?;
            if eq.is_empty() {
                write!(f, " 0")?;
            }
            for (i, term) in eq.iter().enumerate() {
                let sign = if term.sign < 0.0 { '-' } else { '+' };
                if i == 0 {
                    write!(f, " {sign}theta{}", term.param + 1)?;
                } else {
                    write!(f, " {sign} theta{}", term.param + 1)?;
                }
                for j in term.monomial.states() {
                    write!(f, "*x{}", j + 1)?;
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Parses `<prefix><n>` with `n >= 1` into the zero-based index `n - 1`.
fn parse_index(token: &str, prefix: &str) -> Option<usize> {
    let digits = token.strip_prefix(prefix)?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let n: usize = digits.parse().ok()?;
    n.checked_sub(1)
}

fn parse_rhs(rhs: &str) -> std::result::Result<Vec<Term>, String> {
    let compact: String = rhs.chars().filter(|c| !c.is_whitespace()).collect();
    if compact.is_empty() {
        return Err("empty right-hand side (write `0` for no terms)".into());
    }
    if compact == "0" {
        return Ok(Vec::new());
    }
    let mut terms = Vec::new();
    let mut rest = compact.as_str();
    while !rest.is_empty() {
        let (sign, body) = match rest.as_bytes()[0] {
            b'+' => (1.0, &rest[1..]),
            b'-' => (-1.0, &rest[1..]),
            _ if terms.is_empty() => (1.0, rest),
            _ => return Err(format!("expected `+` or `-` before `{rest}`")),
        };
        let end = body.find(['+', '-']).unwrap_or(body.len());
        let (term_text, tail) = body.split_at(end);
        if term_text.is_empty() {
            return Err("dangling sign".into());
        }
        let mut param = None;
        let mut states = Vec::new();
        for factor in term_text.split('*') {
            if let Some(p) = parse_index(factor, "theta") {
                if param.replace(p).is_some() {
                    return Err(format!("term `{term_text}` has more than one parameter"));
                }
            } else if let Some(j) = parse_index(factor, "x") {
                if states.contains(&j) {
                    return Err(format!(
                        "term `{term_text}` repeats x{}; mass-action monomials are products of distinct states",
                        j + 1
                    ));
                }
                states.push(j);
            } else {
                return Err(format!("unrecognized factor `{factor}`"));
            }
        }
        let param = param.ok_or_else(|| format!("term `{term_text}` has no thetaN factor"))?;
        terms.push(Term::new(param, sign, states).map_err(|e| e.to_string())?);
        rest = tail;
    }
    Ok(terms)
}

/// States by time: row `k` is the trajectory of state `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMatrix(DMatrix<f64>);

impl StateMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("state matrix contains non-finite entries".into()));
        }
        Ok(StateMatrix(values))
    }

    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let k = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != k) {
            return Err(Error::DimensionMismatch("ragged state columns".into()));
        }
        StateMatrix::new(DMatrix::from_fn(k, columns.len(), |i, j| columns[j][i]))
    }

    pub fn num_states(&self) -> usize {
        self.0.nrows()
    }

    pub fn num_times(&self) -> usize {
        self.0.ncols()
    }

    pub fn column(&self, t: usize) -> Vec<f64> {
        self.0.column(t).iter().copied().collect()
    }

    pub fn row(&self, k: usize) -> Vec<f64> {
        self.0.row(k).iter().copied().collect()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LV_THETA: [f64; 4] = [2.0, 1.0, 4.0, 1.0];

    #[test]
    fn lotka_volterra_evaluate() {
        let lv = OdeSystem::builtin_lotka_volterra();
        assert_eq!(lv.evaluate(&LV_THETA, &[5.0, 3.0]).unwrap(), vec![-5.0, 3.0]);
        assert_eq!(lv.evaluate(&LV_THETA, &[1.0, 1.0]).unwrap(), vec![1.0, -3.0]);
        assert_eq!(lv.evaluate(&[0.0; 4], &[5.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(lv.equation(0).len(), 2);
        assert_eq!(lv.equation(1).len(), 2);
    }

    #[test]
    fn unit_state_sums_signed_theta() {
        let sys = OdeSystem::builtin_protein_pathway();
        let theta = [0.3, 0.5, 0.7, 1.1, 1.3];
        let out = sys.evaluate(&theta, &[1.0; 5]).unwrap();
        for (k, eq) in sys.equations().iter().enumerate() {
            let expected: f64 = eq.iter().map(|t| t.sign * theta[t.param]).sum();
            assert!((out[k] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn protein_pathway_values() {
        let sys = OdeSystem::builtin_protein_pathway();
        assert_eq!((sys.num_states(), sys.num_params()), (5, 5));
        let theta = [0.07, 0.6, 0.05, 0.3, 0.017];
        let out = sys.evaluate(&theta, &[1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((out[0] + 0.67).abs() < 1e-15);
        assert_eq!(sys.evaluate(&theta, &[0.0; 5]).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn dimension_mismatch() {
        let lv = OdeSystem::builtin_lotka_volterra();
        assert!(matches!(lv.evaluate(&[1.0; 3], &[1.0, 1.0]), Err(Error::DimensionMismatch(_))));
        assert!(matches!(lv.evaluate(&LV_THETA, &[1.0]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn design_matrix_single_column() {
        let lv = OdeSystem::builtin_lotka_volterra();
        let x = StateMatrix::from_columns(&[vec![5.0, 3.0]]).unwrap();
        let g = lv.design_matrix(&x, 0).unwrap();
        assert_eq!(g.row(0).iter().copied().collect::<Vec<_>>(), vec![5.0, -15.0, 0.0, 0.0]);
    }

    #[test]
    fn design_matrix_empty_equation_is_zero() {
        let sys = OdeSystem::parse("dx1 = +theta1*x2\ndx2 = 0\n").unwrap();
        let x = StateMatrix::from_columns(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(sys.design_matrix(&x, 1).unwrap(), DMatrix::zeros(2, 1));
    }

    #[test]
    fn affine_split_lotka_volterra() {
        let lv = OdeSystem::builtin_lotka_volterra();
        let (slope, intercept) = lv.affine_in_state(&LV_THETA, &[5.0, 123.0], 1).unwrap();
        // dx2 = -θ3 x2 + θ4 x1 x2 contributes -4 + 5 to the x2 slope
        assert_eq!(slope, vec![-5.0, 1.0]);
        assert_eq!(intercept, vec![10.0, 0.0]);
    }

    #[test]
    fn affine_split_absent_state() {
        let sys = OdeSystem::parse("dx1 = -theta1*x1\ndx2 = +theta2*x1\ndx3 = 0").unwrap();
        let x = [0.5, -2.0, 4.0];
        let theta = [1.5, 0.25];
        let (slope, intercept) = sys.affine_in_state(&theta, &x, 2).unwrap();
        assert_eq!(slope, vec![0.0; 3]);
        assert_eq!(intercept, sys.evaluate(&theta, &x).unwrap());
    }

    #[test]
    fn text_format_parse_errors() {
        assert!(matches!(OdeSystem::parse("dx1 = +theta1*x1*x1"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(OdeSystem::parse("dx1 = +x1"), Err(Error::Parse { .. })));
        assert!(matches!(OdeSystem::parse("dx1 = +theta1*x2"), Err(Error::Parse { .. })));
        assert!(matches!(OdeSystem::parse("# nothing\n\n"), Err(Error::Parse { .. })));
        assert!(matches!(
            OdeSystem::parse("dx1 = theta1\ndx1 = theta1"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(OdeSystem::parse("dx1 = 2*theta1"), Err(Error::Parse { .. })));
    }

    #[test]
    fn text_format_display() {
        let text = OdeSystem::builtin_lotka_volterra().to_string();
        assert_eq!(text, "dx1 = +theta1*x1 - theta2*x1*x2\ndx2 = -theta3*x2 + theta4*x1*x2\n");
    }

    #[test]
    fn builtins_round_trip_through_text() {
        for sys in [OdeSystem::builtin_lotka_volterra(), OdeSystem::builtin_protein_pathway()] {
            let text = sys.to_string();
            let back = OdeSystem::parse(&text).unwrap();
            assert_eq!(back, sys);
            assert_eq!(back.to_string(), text);
        }
    }

    fn arb_system() -> impl Strategy<Value = OdeSystem> {
        (1usize..4, 1usize..5).prop_flat_map(|(k, m)| {
            let term = (0..m, prop::bool::ANY, prop::collection::btree_set(0..k, 0..=k))
                .prop_map(|(p, neg, set)| Term::new(p, if neg { -1.0 } else { 1.0 }, set.into_iter().collect()).unwrap());
            prop::collection::vec(prop::collection::vec(term, 0..4), k).prop_map(move |eqs| {
                // keep M equal to the highest parameter actually used so text round-trips
                let used = eqs.iter().flatten().map(|t| t.param + 1).max().unwrap_or(0).max(1);
                let mut eqs = eqs;
                if eqs.iter().flatten().count() == 0 {
                    eqs[0].push(Term::new(0, 1.0, vec![]).unwrap());
                }
                OdeSystem::new(used, eqs).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn text_round_trip(sys in arb_system()) {
            let back = OdeSystem::parse(&sys.to_string()).unwrap();
            prop_assert_eq!(back, sys);
        }

        #[test]
        fn affine_split_reconstructs_rhs(
            theta in prop::collection::vec(-3.0f64..3.0, 5),
            x in prop::collection::vec(-3.0f64..3.0, 5),
            u in 0usize..5,
            lambda in -2.0f64..2.0,
        ) {
            let sys = OdeSystem::builtin_protein_pathway();
            let (slope, intercept) = sys.affine_in_state(&theta, &x, u).unwrap();
            let mut xs = x.clone();
            xs[u] = lambda;
            let f = sys.evaluate(&theta, &xs).unwrap();
            for k in 0..5 {
                prop_assert!((slope[k] * lambda + intercept[k] - f[k]).abs() < 1e-12);
            }
        }

        #[test]
        fn design_matrix_matches_evaluate(
            theta in prop::collection::vec(-3.0f64..3.0, 4),
            x in prop::collection::vec(-5.0f64..5.0, 2),
        ) {
            let lv = OdeSystem::builtin_lotka_volterra();
            let f = lv.evaluate(&theta, &x).unwrap();
            let xm = StateMatrix::from_columns(std::slice::from_ref(&x)).unwrap();
            for k in 0..2 {
                let g = lv.design_matrix(&xm, k).unwrap();
                let gk: f64 = (0..4).map(|i| g[(0, i)] * theta[i]).sum();
                prop_assert!((gk - f[k]).abs() < 1e-12);
            }
        }
    }
}
