//! The regularized bound program on a finite grid.
//!
//! Upper bound at `y0`:
//!
//! ```text
//! minimize   γ0 - γ1'Δ0(y0)
//! subject to γ0 + γ1'Δ1(y_m) >= F(y_m)   for every grid point y_m
//!            |γ|² <= τ
//! ```
//!
//! The lower bound maximizes the same objective with the inequalities reversed.
//! The ball is imposed by tangent cutting planes added only when the polyhedral
//! optimum lies outside it.

mod diagnostics;
mod simplex;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::CoefficientTriple;
use simplex::{SfStatus, StandardForm};

pub use diagnostics::{active_set, recession_margin, slater_check, ActivePoint, ActiveSet, SLATER_MARGIN};
pub(crate) use diagnostics::matrix_rank;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToleranceSet {
    pub feas: f64,
    pub gap: f64,
    pub act: f64,
    pub mass: f64,
    pub ball: f64,
    pub max_cuts: usize,
    pub max_iter: usize,
}

impl Default for ToleranceSet {
    fn default() -> Self {
        Self {
            feas: 1e-9,
            gap: 1e-8,
            act: 1e-7,
            mass: 1e-9,
            ball: 1e-8,
            max_cuts: 100,
            max_iter: 50_000,
        }
    }
}

/// Bound program on a grid. For `Minimize` the grid constraints read
/// `row_m'γ >= rhs_m`; for `Maximize` they read `row_m'γ <= rhs_m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilpProblem {
    pub sense: Sense,
    pub objective: Vec<f64>,
    pub grid: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
    /// Squared ball radius; infinite disables the ball.
    #[serde(with = "crate::floats::scalar")]
    pub tau: f64,
}

fn build(xi: &CoefficientTriple, tau: f64, sense: Sense) -> Result<SilpProblem> {
    xi.validate()?;
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
    }
    Ok(SilpProblem {
        sense,
        objective: xi.objective(),
        grid: xi.grid.points().to_vec(),
        rows: (0..xi.grid.len()).map(|m| xi.row(m)).collect(),
        rhs: xi.f_treated.clone(),
        tau,
    })
}

pub fn build_upper(xi: &CoefficientTriple, tau: f64) -> Result<SilpProblem> {
    build(xi, tau, Sense::Minimize)
}

pub fn build_lower(xi: &CoefficientTriple, tau: f64) -> Result<SilpProblem> {
    build(xi, tau, Sense::Maximize)
}

impl SilpProblem {
    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    fn validate(&self) -> Result<()> {
        let l = self.num_vars();
        if self.rows.len() != self.rhs.len() || self.rows.len() != self.grid.len() {
            return Err(Error::DimensionMismatch("rows, rhs and grid differ in length".into()));
        }
        if self.rows.iter().any(|r| r.len() != l) {
            return Err(Error::DimensionMismatch("constraint row length differs from objective".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidParameter(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    /// Objective `c'γ` in the problem's own sense.
    pub fn objective_value(&self, gamma: &[f64]) -> f64 {
        dot(&self.objective, gamma)
    }

    /// Signed slack of grid constraint `m` (nonnegative when satisfied).
    pub fn slack(&self, m: usize, gamma: &[f64]) -> f64 {
        let v = dot(&self.rows[m], gamma) - self.rhs[m];
        match self.sense {
            Sense::Minimize => v,
            Sense::Maximize => -v,
        }
    }

    /// Largest violation of a grid constraint.
    pub fn max_violation(&self, gamma: &[f64]) -> f64 {
        (0..self.rows.len()).map(|m| (-self.slack(m, gamma)).max(0.0)).fold(0.0, f64::max)
    }

    /// Text dump in the layout of fixed-format MPS, with free variables and a
    /// trailing comment carrying the ball radius.
    pub fn to_mps(&self, name: &str) -> String {
        let mut s = String::new();
        let dir = match self.sense {
            Sense::Minimize => "G",
            Sense::Maximize => "L",
        };
        let _ = writeln!(s, "NAME          {name}");
        let _ = writeln!(
            s,
            "OBJSENSE\n    {}",
            if self.sense == Sense::Minimize { "MIN" } else { "MAX" }
        );
        let _ = writeln!(s, "ROWS\n N  OBJ");
        for m in 0..self.rows.len() {
            let _ = writeln!(s, " {dir}  R{m}");
        }
        let _ = writeln!(s, "COLUMNS");
        for j in 0..self.num_vars() {
            let _ = writeln!(s, "    G{j}  OBJ  {:.17e}", self.objective[j]);
            for (m, row) in self.rows.iter().enumerate() {
                if row[j] != 0.0 {
                    let _ = writeln!(s, "    G{j}  R{m}  {:.17e}", row[j]);
                }
            }
        }
        let _ = writeln!(s, "RHS");
        for (m, b) in self.rhs.iter().enumerate() {
            if *b != 0.0 {
                let _ = writeln!(s, "    RHS  R{m}  {b:.17e}");
            }
        }
        let _ = writeln!(s, "BOUNDS");
        for j in 0..self.num_vars() {
            let _ = writeln!(s, " FR BND  G{j}");
        }
        let _ = writeln!(s, "* quadratic constraint: sum G_j^2 <= {:.17e}", self.tau);
        let _ = writeln!(s, "ENDATA");
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    BallActive,
    MaxIter,
}

impl SolveStatus {
    /// Whether the reported value is a valid bound.
    pub fn has_value(self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::BallActive)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::BallActive => "ball_active",
            SolveStatus::MaxIter => "max_iter",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub index: usize,
    pub y: f64,
    pub mass: f64,
}

/// Nonnegative multipliers on grid constraints.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DualMeasure {
    pub atoms: Vec<Atom>,
}

impl DualMeasure {
    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.mass).sum()
    }

    fn from_multipliers(grid: &[f64], lambda: &[f64], mass_tol: f64) -> Self {
        Self {
            atoms: lambda
                .iter()
                .enumerate()
                .filter(|(_, &w)| w > mass_tol)
                .map(|(index, &mass)| Atom { index, y: grid[index], mass })
                .collect(),
        }
    }

    /// `Σ λ_m v_m` for a grid-tabulated `v`.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.atoms.iter().map(|a| a.mass * values[a.index]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub sense: Sense,
    pub gamma: Vec<f64>,
    pub value: f64,
    /// Multipliers on grid constraints (unnormalized; sum to 1 when no cut is active).
    pub dual: DualMeasure,
    pub status: SolveStatus,
    pub duality_gap: f64,
    pub iterations: usize,
    pub max_violation: f64,
    /// Unit normals `g` of the cuts `g'γ <= √τ` added during the solve.
    pub cuts: Vec<Vec<f64>>,
    pub cut_multipliers: Vec<f64>,
    /// True when the program without the ball has no finite optimum.
    pub unbounded_without_ball: bool,
    /// True when the multipliers are not unique (zero reduced costs or
    /// degenerate basic multipliers at the optimum).
    pub degenerate: bool,
}

impl LpSolution {
    pub fn ball_norm_sq(&self) -> f64 {
        dot(&self.gamma, &self.gamma)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Generic `min c'γ  s.t.  rows γ >= rhs` with optional ball `|γ|² <= tau`.
pub(crate) struct GenericLp<'a> {
    pub c: &'a [f64],
    pub rows: &'a [Vec<f64>],
    pub rhs: &'a [f64],
    pub tau: f64,
}

pub(crate) struct GenericSolution {
    pub status: SolveStatus,
    pub gamma: Vec<f64>,
    pub lambda: Vec<f64>,
    pub cuts: Vec<Vec<f64>>,
    pub cut_multipliers: Vec<f64>,
    pub iterations: usize,
    pub unbounded_without_ball: bool,
    pub sf: Option<StandardForm>,
}

pub(crate) fn solve_generic(lp: &GenericLp, tol: &ToleranceSet) -> GenericSolution {
    let l = lp.c.len();
    let m = lp.rows.len();
    let mut sf = StandardForm::new(lp.c);
    for (row, &b) in lp.rows.iter().zip(lp.rhs) {
        sf.add_column(row, -b);
    }
    let radius = lp.tau.sqrt();
    let mut cuts: Vec<Vec<f64>> = Vec::new();
    let mut unbounded_without_ball = false;
    let fail = |status, sf: &StandardForm, cuts, unb| GenericSolution {
        status,
        gamma: vec![f64::NAN; l],
        lambda: vec![0.0; m],
        cuts,
        cut_multipliers: Vec::new(),
        iterations: sf.iterations,
        unbounded_without_ball: unb,
        sf: None,
    };
    loop {
        match sf.solve(tol.max_iter) {
            SfStatus::Optimal => {}
            SfStatus::Infeasible => {
                if lp.tau.is_finite() && !unbounded_without_ball {
                    unbounded_without_ball = true;
                    for i in 0..l {
                        for s in [1.0, -1.0] {
                            let mut g = vec![0.0; l];
                            g[i] = s;
                            let col: Vec<f64> = g.iter().map(|v| -v).collect();
                            sf.add_column(&col, radius);
                            cuts.push(g);
                        }
                    }
                    continue;
                }
                return fail(SolveStatus::Unbounded, &sf, cuts, true);
            }
            SfStatus::Unbounded => return fail(SolveStatus::Infeasible, &sf, cuts, unbounded_without_ball),
            SfStatus::MaxIter => return fail(SolveStatus::MaxIter, &sf, cuts, unbounded_without_ball),
        }
        let gamma: Vec<f64> = sf.pi().iter().map(|p| -p).collect();
        let norm_sq = dot(&gamma, &gamma);
        if lp.tau.is_finite() && norm_sq > lp.tau * (1.0 + tol.ball) {
            if cuts.len() >= tol.max_cuts + if unbounded_without_ball { 2 * l } else { 0 } {
                let x = sf.x();
                return GenericSolution {
                    status: SolveStatus::MaxIter,
                    gamma,
                    lambda: x[..m].to_vec(),
                    cut_multipliers: x[m..].to_vec(),
                    cuts,
                    iterations: sf.iterations,
                    unbounded_without_ball,
                    sf: Some(sf),
                };
            }
            let norm = norm_sq.sqrt();
            let g: Vec<f64> = gamma.iter().map(|v| v / norm).collect();
            let col: Vec<f64> = g.iter().map(|v| -v).collect();
            sf.add_column(&col, radius);
            cuts.push(g);
            continue;
        }
        let x = sf.x();
        let cut_multipliers = x[m..].to_vec();
        let status = if cut_multipliers.iter().any(|&w| w > tol.mass) {
            SolveStatus::BallActive
        } else {
            SolveStatus::Optimal
        };
        return GenericSolution {
            status,
            gamma,
            lambda: x[..m].to_vec(),
            cuts,
            cut_multipliers,
            iterations: sf.iterations,
            unbounded_without_ball,
            sf: Some(sf),
        };
    }
}

/// Sign-adjusted `(c, rows, rhs)` so that both senses read `min c'γ s.t. rows γ >= rhs`.
fn minimization_form(p: &SilpProblem) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
    match p.sense {
        Sense::Minimize => (p.objective.clone(), p.rows.clone(), p.rhs.clone()),
        Sense::Maximize => (
            p.objective.iter().map(|v| -v).collect(),
            p.rows.iter().map(|r| r.iter().map(|v| -v).collect()).collect(),
            p.rhs.iter().map(|v| -v).collect(),
        ),
    }
}

fn solve_inner(p: &SilpProblem, tol: &ToleranceSet) -> Result<(LpSolution, Option<StandardForm>)> {
    p.validate()?;
    let (c, rows, rhs) = minimization_form(p);
    let lp = GenericLp { c: &c, rows: &rows, rhs: &rhs, tau: p.tau };
    let g = solve_generic(&lp, tol);
    let sign = if p.sense == Sense::Minimize { 1.0 } else { -1.0 };
    let (value, gap, violation) = if g.gamma.iter().all(|v| v.is_finite()) {
        let primal = dot(&c, &g.gamma);
        // no cuts exist when the ball is absent
        let ball: f64 = g.cut_multipliers.iter().map(|mu| p.tau.sqrt() * mu).sum();
        let dual = dot(&rhs, &g.lambda) - ball;
        (sign * primal, (primal - dual).abs(), p.max_violation(&g.gamma))
    } else {
        (f64::NAN, f64::NAN, f64::NAN)
    };
    let degenerate = g.sf.as_ref().map_or(false, |sf| sf.optimal_bases(2, 1e-9).0.len() > 1);
    let sol = LpSolution {
        sense: p.sense,
        gamma: g.gamma,
        value,
        dual: DualMeasure::from_multipliers(&p.grid, &g.lambda, tol.mass),
        status: g.status,
        duality_gap: gap,
        iterations: g.iterations,
        max_violation: violation,
        cuts: g.cuts,
        cut_multipliers: g.cut_multipliers,
        unbounded_without_ball: g.unbounded_without_ball,
        degenerate,
    };
    Ok((sol, g.sf))
}

/// Solves the program; infeasible and unbounded outcomes are reported through
/// `status`, not as errors.
pub fn solve(p: &SilpProblem, tol: &ToleranceSet) -> Result<LpSolution> {
    solve_inner(p, tol).map(|(s, _)| s)
}

/// The grid multipliers as a probability measure.
pub fn extract_dual(sol: &LpSolution) -> Result<DualMeasure> {
    match sol.status {
        SolveStatus::Optimal => {}
        SolveStatus::BallActive => return Err(Error::BallActive),
        s => return Err(Error::NotOptimal(s.as_str().into())),
    }
    let total = sol.dual.total_mass();
    Ok(DualMeasure {
        atoms: sol.dual.atoms.iter().map(|a| Atom { mass: a.mass / total, ..*a }).collect(),
    })
}

/// Distinct optimal primal points, each with the optimal grid multipliers
/// found alongside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionSets {
    pub gammas: Vec<Vec<f64>>,
    pub lambdas: Vec<Vec<DualMeasure>>,
    pub truncated: bool,
}

impl SolutionSets {
    pub fn singleton(sol: &LpSolution) -> Self {
        Self {
            gammas: vec![sol.gamma.clone()],
            lambdas: vec![vec![sol.dual.clone()]],
            truncated: false,
        }
    }

    pub fn is_unique(&self) -> bool {
        self.gammas.len() == 1 && self.lambdas[0].len() == 1
    }
}

pub const MAX_SOLUTION_VERTICES: usize = 50;

/// Solves and enumerates optimal vertices within `value_tol` of the optimum by
/// walking neighbouring optimal bases. Since every optimal multiplier vector is
/// complementary to every optimal `γ`, all multipliers found are attached to
/// each `γ`.
pub fn solution_sets(p: &SilpProblem, tol: &ToleranceSet, value_tol: f64) -> Result<(LpSolution, SolutionSets)> {
    let (sol, sf) = solve_inner(p, tol)?;
    let Some(sf) = sf.filter(|_| sol.status.has_value()) else {
        return Err(Error::NotOptimal(sol.status.as_str().into()));
    };
    let m = p.rows.len();
    let (points, truncated) = sf.optimal_bases(4 * MAX_SOLUTION_VERTICES, value_tol);
    let mut gammas: Vec<Vec<f64>> = Vec::new();
    let mut lambdas: Vec<DualMeasure> = Vec::new();
    let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9 * (1.0 + y.abs()));
    let mut full = false;
    for pt in points {
        let gamma: Vec<f64> = pt.pi.iter().map(|v| -v).collect();
        if !gammas.iter().any(|g| same(g, &gamma)) {
            if gammas.len() < MAX_SOLUTION_VERTICES {
                gammas.push(gamma);
            } else {
                full = true;
            }
        }
        let lam = &pt.x[..m];
        let measure = DualMeasure::from_multipliers(&p.grid, lam, tol.mass);
        let dense = |d: &DualMeasure| {
            let mut v = vec![0.0; m];
            for a in &d.atoms {
                v[a.index] = a.mass;
            }
            v
        };
        if !lambdas.iter().any(|d| same(&dense(d), lam)) {
            if lambdas.len() < MAX_SOLUTION_VERTICES {
                lambdas.push(measure);
            } else {
                full = true;
            }
        }
    }
    let sets = SolutionSets {
        lambdas: vec![lambdas; gammas.len()],
        gammas,
        truncated: truncated || full,
    };
    Ok((sol, sets))
}
