//! Saddle-point and sensitivity tools for the bound program: the Lagrangian,
//! the directional derivative of the optimal value, envelope derivatives of
//! the inner/outer decomposition, and numerical-delta confidence intervals.
//!
//! Everything below works on the minimization form of a program. For the
//! upper bound that is the program itself. For the lower bound every
//! coefficient is negated, so `Q` and the residuals are those of
//! `min -obj s.t. -row >= -F`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::BoundConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{CoefficientFunctions, CoefficientModel, CoefficientTriple};
use crate::floats;
use crate::numeric::percentile;
use crate::silp::{
    self, dot, matrix_rank, solve_generic, ActiveSet, Atom, DualMeasure, GenericLp, LpSolution, Sense,
    SolutionSets, SolveStatus, ToleranceSet,
};
use crate::sim::derive_seed;

fn sign(sense: Sense) -> f64 {
    match sense {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    }
}

/// `γ0 - γ1'Δ0(y0) + Σ λ_m [F(y_m) - γ0 - γ1'Δ1(y_m)]`.
pub fn lagrangian(xi: &CoefficientTriple, gamma: &[f64], lambda: &DualMeasure) -> f64 {
    let penalty: f64 = lambda
        .atoms
        .iter()
        .map(|a| a.mass * (xi.f_treated[a.index] - dot(&xi.row(a.index), gamma)))
        .sum();
    dot(&xi.objective(), gamma) + penalty
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaddleState {
    pub gamma: Vec<f64>,
    pub lambda: DualMeasure,
    pub lagrangian_value: f64,
}

impl SaddleState {
    pub fn new(xi: &CoefficientTriple, gamma: Vec<f64>, lambda: DualMeasure) -> Self {
        let lagrangian_value = lagrangian(xi, &gamma, &lambda);
        Self { gamma, lambda, lagrangian_value }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaddleReport {
    pub value: f64,
    pub probes: usize,
    /// Largest amount by which either saddle inequality fails.
    pub worst_violation: f64,
    /// Smallest margin `L(γ*, λ*) - L(γ*, λ)` over dual probes (sense-adjusted).
    pub dual_side_gap: f64,
    /// Smallest margin `L(γ, λ*) - L(γ*, λ*)` over primal probes (sense-adjusted).
    pub primal_side_gap: f64,
}

/// Checks the saddle inequalities at `(γ*, λ*)` against random points of the
/// ball and random probability measures on the grid. For the upper bound
/// these read `L(γ*, λ) <= L(γ*, λ*) <= L(γ, λ*)`; both flip for the lower.
pub fn saddle_check(
    xi: &CoefficientTriple,
    sense: Sense,
    tau: f64,
    gamma: &[f64],
    lambda: &DualMeasure,
    probes: usize,
    seed: u64,
) -> SaddleReport {
    let s = sign(sense);
    let value = lagrangian(xi, gamma, lambda);
    let l = gamma.len();
    let m = xi.grid.len();
    let radius = if tau.is_finite() { tau.sqrt() } else { 2.0 * (1.0 + dot(gamma, gamma).sqrt()) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dual_gap = f64::INFINITY;
    let mut primal_gap = f64::INFINITY;
    for _ in 0..probes {
        let atoms = rng.random_range(1..=3.min(m));
        let weights: Vec<f64> = (0..atoms).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let total: f64 = weights.iter().sum();
        let probe = DualMeasure {
            atoms: weights
                .iter()
                .map(|w| {
                    let index = rng.random_range(0..m);
                    Atom { index, y: xi.grid.points()[index], mass: w / total }
                })
                .collect(),
        };
        dual_gap = dual_gap.min(s * (value - lagrangian(xi, gamma, &probe)));

        let dir: Vec<f64> = (0..l).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = dot(&dir, &dir).sqrt();
        let r = radius * rng.random::<f64>().powf(1.0 / l as f64);
        let point: Vec<f64> = dir.iter().map(|d| d / norm * r).collect();
        primal_gap = primal_gap.min(s * (lagrangian(xi, &point, lambda) - value));
    }
    SaddleReport {
        value,
        probes,
        worst_violation: (-dual_gap).max(-primal_gap).max(0.0),
        dual_side_gap: dual_gap,
        primal_side_gap: primal_gap,
    }
}

/// A direction `δ = (δ0, δ1, δF)` in the space of program inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationDirection {
    pub delta0: Vec<f64>,
    pub delta1: Vec<Vec<f64>>,
    pub delta_f: Vec<f64>,
}

impl PerturbationDirection {
    pub fn zero(xi: &CoefficientTriple) -> Self {
        Self {
            delta0: vec![0.0; xi.num_contrasts()],
            delta1: vec![vec![0.0; xi.grid.len()]; xi.num_contrasts()],
            delta_f: vec![0.0; xi.grid.len()],
        }
    }

    /// `scale * (other - base)`.
    pub fn between(base: &CoefficientTriple, other: &CoefficientTriple, scale: f64) -> Result<Self> {
        if base.grid != other.grid || base.num_contrasts() != other.num_contrasts() {
            return Err(Error::DimensionMismatch("triples are tabulated on different grids".into()));
        }
        let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| scale * (y - x)).collect::<Vec<_>>();
        Ok(Self {
            delta0: diff(&base.delta0_at_y0, &other.delta0_at_y0),
            delta1: base.delta1.iter().zip(&other.delta1).map(|(a, b)| diff(a, b)).collect(),
            delta_f: diff(&base.f_treated, &other.f_treated),
        })
    }

    pub fn validate(&self, xi: &CoefficientTriple) -> Result<()> {
        let m = xi.grid.len();
        if self.delta0.len() != xi.num_contrasts()
            || self.delta1.len() != xi.num_contrasts()
            || self.delta1.iter().any(|d| d.len() != m)
            || self.delta_f.len() != m
        {
            return Err(Error::DimensionMismatch("direction does not match the triple".into()));
        }
        let finite = self.delta0.iter().chain(self.delta1.iter().flatten()).chain(&self.delta_f).all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParameter("direction has non-finite entries".into()));
        }
        Ok(())
    }

    /// `ξ + t δ`.
    pub fn apply(&self, xi: &CoefficientTriple, t: f64) -> CoefficientTriple {
        let add = |a: &[f64], d: &[f64]| a.iter().zip(d).map(|(x, y)| x + t * y).collect::<Vec<_>>();
        CoefficientTriple {
            delta0_at_y0: add(&xi.delta0_at_y0, &self.delta0),
            delta1: xi.delta1.iter().zip(&self.delta1).map(|(a, d)| add(a, d)).collect(),
            f_treated: add(&xi.f_treated, &self.delta_f),
            ..xi.clone()
        }
    }
}

/// `-γ1'δ0 + Σ λ_m [δF(y_m) - γ1'δ1(y_m)]`, the derivative of the Lagrangian
/// along `δ` at a fixed `(γ, λ)`.
pub fn directional_term(gamma: &[f64], lambda: &DualMeasure, dir: &PerturbationDirection) -> f64 {
    let g1 = &gamma[1..];
    let head = -dot(g1, &dir.delta0);
    head + lambda
        .atoms
        .iter()
        .map(|a| a.mass * (dir.delta_f[a.index] - g1.iter().zip(&dir.delta1).map(|(g, d)| g * d[a.index]).sum::<f64>()))
        .sum::<f64>()
}

/// Directional derivative of the optimal value along `dir`: min over optimal
/// `γ` of the max over its optimal multipliers (max-min for the lower bound).
pub fn hadamard_derivative(sense: Sense, sets: &SolutionSets, dir: &PerturbationDirection) -> Result<f64> {
    if sets.gammas.is_empty() || sets.lambdas.iter().any(Vec::is_empty) || sets.lambdas.len() != sets.gammas.len() {
        return Err(Error::EmptySet);
    }
    let s = sign(sense);
    let outer = sets
        .gammas
        .iter()
        .zip(&sets.lambdas)
        .map(|(g, lams)| lams.iter().map(|l| s * directional_term(g, l, dir)).fold(f64::NEG_INFINITY, f64::max))
        .fold(f64::INFINITY, f64::min);
    Ok(s * outer)
}

/// The program split into an inner part in `θ1` (the `K` columns selected for
/// the active constraints) and an outer part in the remaining `θ2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerOuterSplit {
    pub sense: Sense,
    pub k: usize,
    /// Original coordinates of `γ` in split order: the first `k` form `θ1`.
    pub columns: Vec<usize>,
    pub theta1: Vec<f64>,
    pub theta2: Vec<f64>,
    pub active_index: Vec<usize>,
    pub active_y: Vec<f64>,
    /// Multipliers of the active constraints as reported by the solver.
    pub multipliers: Vec<f64>,
    pub psi01: Vec<f64>,
    pub psi02: Vec<f64>,
    /// `Ψ11(y_m)` and `Ψ12(y_m)` for every grid point.
    pub psi11: Vec<Vec<f64>>,
    pub psi12: Vec<Vec<f64>>,
    /// `K x K`, column `k` is `Ψ11(y_k)`.
    pub a11: Vec<Vec<f64>>,
    /// `(L-K) x K`, column `k` is `Ψ12(y_k)`.
    pub a12: Vec<Vec<f64>>,
    #[serde(with = "floats::scalar")]
    pub condition: f64,
}

fn to_matrix(rows: &[Vec<f64>], ncols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j])
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 1.0;
    }
    let sv = m.singular_values();
    let hi = sv.max();
    let lo = sv.min();
    if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    }
}

/// Greedy choice of `k` columns of `rows` (a `k x L` matrix) that are linearly
/// independent, preferring leading columns.
fn select_columns(rows: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    let l = rows.first().map_or(0, Vec::len);
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for j in 0..l {
        if chosen.len() == k {
            break;
        }
        let mut trial = chosen.clone();
        trial.push(j);
        let sub: Vec<Vec<f64>> = rows.iter().map(|r| trial.iter().map(|&c| r[c]).collect()).collect();
        let transposed: Vec<Vec<f64>> = (0..trial.len()).map(|c| sub.iter().map(|r| r[c]).collect()).collect();
        if matrix_rank(&transposed) == trial.len() {
            chosen = trial;
        }
    }
    if chosen.len() < k {
        return Err(Error::RegularityViolated(format!(
            "no invertible {k} x {k} block among the active constraint columns"
        )));
    }
    let rest: Vec<usize> = (0..l).filter(|j| !chosen.contains(j)).collect();
    chosen.extend(rest);
    Ok(chosen)
}

fn permute(v: &[f64], columns: &[usize]) -> Vec<f64> {
    columns.iter().map(|&j| v[j]).collect()
}

fn unpermute(theta: &[f64], columns: &[usize]) -> Vec<f64> {
    let mut g = vec![0.0; theta.len()];
    for (&j, &v) in columns.iter().zip(theta) {
        g[j] = v;
    }
    g
}

fn min_form_objective(xi: &CoefficientTriple, sense: Sense) -> Vec<f64> {
    let s = sign(sense);
    xi.objective().iter().map(|v| s * v).collect()
}

fn min_form_row(xi: &CoefficientTriple, sense: Sense, m: usize) -> Vec<f64> {
    let s = sign(sense);
    xi.row(m).iter().map(|v| s * v).collect()
}

struct Blocks {
    psi01: Vec<f64>,
    psi02: Vec<f64>,
    psi11: Vec<Vec<f64>>,
    psi12: Vec<Vec<f64>>,
}

fn blocks(xi: &CoefficientTriple, sense: Sense, columns: &[usize], k: usize) -> Blocks {
    let psi0: Vec<f64> = permute(&min_form_objective(xi, sense), columns).iter().map(|v| -v).collect();
    let (mut psi11, mut psi12) = (Vec::with_capacity(xi.grid.len()), Vec::with_capacity(xi.grid.len()));
    for m in 0..xi.grid.len() {
        let row = permute(&min_form_row(xi, sense, m), columns);
        psi12.push(row[k..].to_vec());
        psi11.push(row[..k].to_vec());
    }
    Blocks { psi01: psi0[..k].to_vec(), psi02: psi0[k..].to_vec(), psi11, psi12 }
}

fn jacobians(cols11: &[Vec<f64>], cols12: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let k = cols11.len();
    let r = cols12.first().map_or(0, Vec::len);
    let a11 = (0..k).map(|i| cols11.iter().map(|c| c[i]).collect()).collect();
    let a12 = (0..r).map(|i| cols12.iter().map(|c| c[i]).collect()).collect();
    (a11, a12)
}

/// Splits `γ` at a solved grid program whose active set is regular.
pub fn split_inner_outer(xi: &CoefficientTriple, sol: &LpSolution, act: &ActiveSet) -> Result<InnerOuterSplit> {
    match sol.status {
        SolveStatus::Optimal => {}
        SolveStatus::BallActive => return Err(Error::BallActive),
        s => return Err(Error::NotOptimal(s.as_str().into())),
    }
    if !act.regular() {
        return Err(Error::RegularityViolated(format!(
            "k={}, rank={}, L={}, positive multipliers={}",
            act.k, act.rank, act.num_vars, act.multipliers_positive
        )));
    }
    let k = act.k;
    let rows: Vec<Vec<f64>> = act.points.iter().map(|p| min_form_row(xi, sol.sense, p.index)).collect();
    let columns = select_columns(&rows, k)?;
    let theta = permute(&sol.gamma, &columns);
    let b = blocks(xi, sol.sense, &columns, k);
    let cols11: Vec<Vec<f64>> = act.points.iter().map(|p| b.psi11[p.index].clone()).collect();
    let cols12: Vec<Vec<f64>> = act.points.iter().map(|p| b.psi12[p.index].clone()).collect();
    let (a11, a12) = jacobians(&cols11, &cols12);
    let condition = condition_number(&to_matrix(&a11, k));
    Ok(InnerOuterSplit {
        sense: sol.sense,
        k,
        theta1: theta[..k].to_vec(),
        theta2: theta[k..].to_vec(),
        columns,
        active_index: act.points.iter().map(|p| p.index).collect(),
        active_y: act.points.iter().map(|p| p.y).collect(),
        multipliers: act.points.iter().map(|p| p.mass).collect(),
        psi01: b.psi01,
        psi02: b.psi02,
        psi11: b.psi11,
        psi12: b.psi12,
        a11,
        a12,
        condition,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeGradient {
    /// `-Ψ02 - A12 λ` with the solver's multipliers.
    pub multiplier_form: Vec<f64>,
    /// `-Ψ02 + A12 A11⁻¹ Ψ01`.
    pub inverse_form: Vec<f64>,
    pub discrepancy: f64,
}

fn a11_inverse_times(split: &InnerOuterSplit, v: &[f64]) -> Result<DVector<f64>> {
    to_matrix(&split.a11, split.k)
        .lu()
        .solve(&DVector::from_column_slice(v))
        .ok_or_else(|| Error::Singular("active constraint block".into()))
}

/// `∂Q/∂θ2` in both algebraic forms.
pub fn envelope_gradient(split: &InnerOuterSplit) -> Result<EnvelopeGradient> {
    let r = split.theta2.len();
    let w = a11_inverse_times(split, &split.psi01)?;
    let a12 = to_matrix(&split.a12, split.k);
    let lam = DVector::from_column_slice(&split.multipliers);
    let inv = a12.clone() * w;
    let mul = a12 * lam;
    let inverse_form: Vec<f64> = (0..r).map(|i| -split.psi02[i] + inv[i]).collect();
    let multiplier_form: Vec<f64> = (0..r).map(|i| -split.psi02[i] - mul[i]).collect();
    let discrepancy = inverse_form.iter().zip(&multiplier_form).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(EnvelopeGradient { multiplier_form, inverse_form, discrepancy })
}

/// Inner optimal value `Q(θ2) = -θ1'Ψ01 - θ2'Ψ02` at the split's point.
pub fn inner_value(split: &InnerOuterSplit) -> f64 {
    -dot(&split.theta1, &split.psi01) - dot(&split.theta2, &split.psi02)
}

/// Min-form constraint coefficients at an off-grid point, permuted, with two
/// derivatives: `(a, a', a'')` and `(b, b', b'')`.
fn continuum_row(model: &dyn CoefficientFunctions, sense: Sense, columns: &[usize], y: f64) -> ([Vec<f64>; 3], [f64; 3]) {
    let s = sign(sense);
    let p = model.at(y);
    let raw = |d: usize| {
        let mut v = Vec::with_capacity(columns.len());
        v.push(if d == 0 { s } else { 0.0 });
        v.extend(p.delta1.iter().map(|c| s * c[d]));
        permute(&v, columns)
    };
    ([raw(0), raw(1), raw(2)], [s * p.f[0], s * p.f[1], s * p.f[2]])
}

/// Residual `r = b - θ'a` and its first two derivatives at `y`.
fn residual(model: &dyn CoefficientFunctions, sense: Sense, columns: &[usize], theta: &[f64], y: f64) -> [f64; 3] {
    let (a, b) = continuum_row(model, sense, columns, y);
    [b[0] - dot(theta, &a[0]), b[1] - dot(theta, &a[1]), b[2] - dot(theta, &a[2])]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeHessian {
    pub matrix: Vec<Vec<f64>>,
    /// `-r''(y_k)` at each active point.
    pub curvatures: Vec<f64>,
    #[serde(with = "floats::scalar")]
    pub min_eigenvalue: f64,
    pub psd: bool,
}

/// `∂²Q/∂θ2∂θ2'` from the tangency conditions at the active points; needs
/// coefficient functions with meaningful `y`-derivatives.
pub fn envelope_hessian(split: &InnerOuterSplit, model: &dyn CoefficientFunctions) -> Result<EnvelopeHessian> {
    if !model.is_smooth() {
        return Err(Error::InvalidParameter("the Hessian needs smoothed coefficient functions".into()));
    }
    let r = split.theta2.len();
    let k = split.k;
    if r == 0 {
        return Ok(EnvelopeHessian { matrix: vec![], curvatures: vec![], min_eigenvalue: 0.0, psd: true });
    }
    let theta: Vec<f64> = split.theta1.iter().chain(&split.theta2).copied().collect();
    let w = a11_inverse_times(split, &split.psi01)?;
    let a11 = to_matrix(&split.a11, k);
    let a12 = to_matrix(&split.a12, k);
    let lu = a11.lu();
    let mut h = DMatrix::<f64>::zeros(r, r);
    let mut curvatures = Vec::with_capacity(k);
    for (kk, &y) in split.active_y.iter().enumerate() {
        let curvature = -residual(model, split.sense, &split.columns, &theta, y)[2];
        if !(curvature > 0.0) {
            return Err(Error::DegenerateTangency { y, curvature });
        }
        curvatures.push(curvature);
        let (a, _) = continuum_row(model, split.sense, &split.columns, y);
        let d11 = DVector::from_column_slice(&a[1][..k]);
        let d12 = DVector::from_column_slice(&a[1][k..]);
        let solved = lu.solve(&d11).ok_or_else(|| Error::Singular("active constraint block".into()))?;
        let v = d12 - &a12 * solved;
        h += (v.clone() * v.transpose()) * (-w[kk] / curvature);
    }
    let sym = (&h + h.transpose()) * 0.5;
    let min_eigenvalue = SymmetricEigen::new(sym.clone()).eigenvalues.min();
    Ok(EnvelopeHessian {
        matrix: (0..r).map(|i| (0..r).map(|j| sym[(i, j)]).collect()).collect(),
        curvatures,
        min_eigenvalue,
        psd: min_eigenvalue >= -1e-8,
    })
}

/// Inner program with `θ2` fixed, on the continuum: solves the grid program in
/// `θ1`, merges active grid points that belong to one tangency, and refines
/// the tangencies and `θ1` by Newton's method on `r(y_k) = r'(y_k) = 0`.
pub struct ContinuumInner<'a> {
    pub model: &'a dyn CoefficientFunctions,
    pub xi: &'a CoefficientTriple,
    pub sense: Sense,
    pub tau: f64,
    pub tol: ToleranceSet,
}

/// Active grid points closer than this many grid steps are one tangency.
const MERGE_GAP: usize = 2;

fn merge_atoms(atoms: &[Atom]) -> Vec<(usize, f64, f64)> {
    let mut sorted = atoms.to_vec();
    sorted.sort_by_key(|a| a.index);
    let mut groups: Vec<Vec<Atom>> = Vec::new();
    for a in sorted {
        match groups.last_mut() {
            Some(g) if a.index - g.last().map_or(0, |b| b.index) <= MERGE_GAP => g.push(a),
            _ => groups.push(vec![a]),
        }
    }
    groups
        .iter()
        .map(|g| {
            let mass: f64 = g.iter().map(|a| a.mass).sum();
            let y = g.iter().map(|a| a.mass * a.y).sum::<f64>() / mass;
            let index = g.iter().max_by(|a, b| a.mass.total_cmp(&b.mass)).map_or(0, |a| a.index);
            (index, y, mass)
        })
        .collect()
}

impl<'a> ContinuumInner<'a> {
    /// Split at a solved full program, with the tangencies refined.
    pub fn from_solution(&self, sol: &LpSolution) -> Result<InnerOuterSplit> {
        match sol.status {
            SolveStatus::Optimal => {}
            SolveStatus::BallActive => return Err(Error::BallActive),
            s => return Err(Error::NotOptimal(s.as_str().into())),
        }
        let merged = merge_atoms(&sol.dual.atoms);
        let k = merged.len();
        let rows: Vec<Vec<f64>> = merged
            .iter()
            .map(|&(_, y, _)| continuum_row(self.model, self.sense, &(0..sol.gamma.len()).collect::<Vec<_>>(), y).0[0].clone())
            .collect();
        let columns = select_columns(&rows, k)?;
        let theta = permute(&sol.gamma, &columns);
        self.solve(&columns, k, &theta[k..])
    }

    /// Solves the inner program at `theta2` for the given column split.
    pub fn solve(&self, columns: &[usize], k: usize, theta2: &[f64]) -> Result<InnerOuterSplit> {
        let b = blocks(self.xi, self.sense, columns, k);
        let m = self.xi.grid.len();
        let s = sign(self.sense);
        let c: Vec<f64> = b.psi01.iter().map(|v| -v).collect();
        let rhs: Vec<f64> = (0..m).map(|i| s * self.xi.f_treated[i] - dot(theta2, &b.psi12[i])).collect();
        let lp = GenericLp { c: &c, rows: &b.psi11, rhs: &rhs, tau: self.tau };
        let g = solve_generic(&lp, &self.tol);
        match g.status {
            SolveStatus::Optimal => {}
            SolveStatus::BallActive => return Err(Error::BallActive),
            st => return Err(Error::NotOptimal(st.as_str().into())),
        }
        let atoms: Vec<Atom> = g
            .lambda
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > self.tol.mass)
            .map(|(index, &mass)| Atom { index, y: self.xi.grid.points()[index], mass })
            .collect();
        let merged = merge_atoms(&atoms);
        if merged.len() != k {
            return Err(Error::RegularityViolated(format!(
                "inner program has {} tangencies, expected {k}",
                merged.len()
            )));
        }
        let mut theta1 = g.gamma.clone();
        let mut ys: Vec<f64> = merged.iter().map(|&(_, y, _)| y).collect();
        self.newton(columns, k, theta2, &mut theta1, &mut ys)?;

        let psi0 = permute(
            &min_form_objective(
                &CoefficientTriple { delta0_at_y0: self.model.delta0(self.xi.y0), ..self.xi.clone() },
                self.sense,
            ),
            columns,
        )
        .iter()
        .map(|v| -v)
        .collect::<Vec<_>>();
        let rows: Vec<Vec<f64>> = ys.iter().map(|&y| continuum_row(self.model, self.sense, columns, y).0[0].clone()).collect();
        let cols11: Vec<Vec<f64>> = rows.iter().map(|r| r[..k].to_vec()).collect();
        let cols12: Vec<Vec<f64>> = rows.iter().map(|r| r[k..].to_vec()).collect();
        let (a11, a12) = jacobians(&cols11, &cols12);
        let condition = condition_number(&to_matrix(&a11, k));
        Ok(InnerOuterSplit {
            sense: self.sense,
            k,
            columns: columns.to_vec(),
            theta1,
            theta2: theta2.to_vec(),
            active_index: ys.iter().map(|&y| self.xi.grid.nearest(y)).collect(),
            active_y: ys,
            multipliers: merged.iter().map(|&(_, _, mass)| mass).collect(),
            psi01: psi0[..k].to_vec(),
            psi02: psi0[k..].to_vec(),
            psi11: b.psi11,
            psi12: b.psi12,
            a11,
            a12,
            condition,
        })
    }

    fn newton(&self, columns: &[usize], k: usize, theta2: &[f64], theta1: &mut [f64], ys: &mut [f64]) -> Result<()> {
        let (lo, hi) = (self.xi.grid.lo(), self.xi.grid.hi());
        for _ in 0..100 {
            let theta: Vec<f64> = theta1.iter().chain(theta2).copied().collect();
            let mut jac = DMatrix::<f64>::zeros(2 * k, 2 * k);
            let mut res = DVector::<f64>::zeros(2 * k);
            for (j, &y) in ys.iter().enumerate() {
                let (a, _) = continuum_row(self.model, self.sense, columns, y);
                let r = residual(self.model, self.sense, columns, &theta, y);
                res[j] = r[0];
                res[k + j] = r[1];
                for i in 0..k {
                    jac[(j, i)] = -a[0][i];
                    jac[(k + j, i)] = -a[1][i];
                }
                jac[(j, k + j)] = r[1];
                jac[(k + j, k + j)] = r[2];
            }
            let step = jac.lu().solve(&(-res)).ok_or_else(|| Error::Singular("tangency system".into()))?;
            for i in 0..k {
                theta1[i] += step[i];
                ys[i] = (ys[i] + step[k + i]).clamp(lo, hi);
            }
            if step.amax() <= 1e-13 * (1.0 + theta1.iter().chain(ys.iter()).fold(0.0f64, |m, v| m.max(v.abs()))) {
                return Ok(());
            }
        }
        Err(Error::MaxIterations("tangency refinement".into()))
    }

    /// Newton iterations on the outer problem `min Q(θ2)` using the envelope
    /// gradient and Hessian.
    pub fn outer_newton(&self, split: &InnerOuterSplit, max_iter: usize) -> Result<InnerOuterSplit> {
        let mut cur = split.clone();
        for _ in 0..max_iter {
            let g = envelope_gradient(&cur)?.inverse_form;
            if g.is_empty() || g.iter().all(|v| v.abs() <= 1e-13) {
                break;
            }
            let h = envelope_hessian(&cur, self.model)?;
            let r = g.len();
            let step = to_matrix(&h.matrix, r)
                .lu()
                .solve(&DVector::from_column_slice(&g))
                .ok_or_else(|| Error::Singular("outer Hessian".into()))?;
            let theta2: Vec<f64> = cur.theta2.iter().zip(step.iter()).map(|(t, s)| t - s).collect();
            cur = self.solve(&cur.columns, cur.k, &theta2)?;
        }
        Ok(cur)
    }
}

/// `γ` in original coordinates from a split.
pub fn split_gamma(split: &InnerOuterSplit) -> Vec<f64> {
    let theta: Vec<f64> = split.theta1.iter().chain(&split.theta2).copied().collect();
    unpermute(&theta, &split.columns)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    Replication,
    NumericalDelta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMode {
    /// Directional derivative over the base solution sets.
    Derivative,
    /// Difference quotient with a re-solve at `ξ̂ + t_n δ`.
    Resolve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeltaOptions {
    pub level: f64,
    pub draws: usize,
    pub kappa: f64,
    /// Step `t_n` for the re-solve mode; `n^{-κ/2}` when absent.
    pub step: Option<f64>,
    pub mode: DeltaMode,
    pub seed: u64,
    pub value_tol: f64,
}

impl Default for DeltaOptions {
    fn default() -> Self {
        Self { level: 0.95, draws: 200, kappa: 0.5, step: None, mode: DeltaMode::Derivative, seed: 0, value_tol: 1e-7 }
    }
}

impl DeltaOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidParameter(format!("level must lie in (0, 1), got {}", self.level)));
        }
        if self.draws < 100 {
            return Err(Error::InvalidParameter(format!("at least 100 draws required, got {}", self.draws)));
        }
        if !(self.kappa > 0.0 && self.kappa <= 0.5) {
            return Err(Error::InvalidParameter(format!("kappa must lie in (0, 1/2], got {}", self.kappa)));
        }
        if self.step.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::InvalidParameter("step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiResult {
    pub y0: f64,
    /// `minimize` for the upper bound, `maximize` for the lower.
    pub sense: Sense,
    #[serde(with = "floats::scalar")]
    pub point: f64,
    #[serde(with = "floats::scalar")]
    pub ci_lo: f64,
    #[serde(with = "floats::scalar")]
    pub ci_hi: f64,
    pub level: f64,
    pub method: CiMethod,
    pub n_draws: usize,
    pub failed_draws: usize,
    /// Optimal primal and dual sets were single points.
    pub unique: bool,
    /// Set when the interval does not contain the point estimate.
    pub flagged: bool,
    pub caveat: Option<String>,
    pub error: Option<String>,
}

const NONUNIQUE_CAVEAT: &str =
    "optimal sets are not singletons; the value is only directionally differentiable and resampling may be invalid";

struct BasePoint {
    xi: CoefficientTriple,
    sense: Sense,
    value: f64,
    sets: SolutionSets,
}

fn base_point(xi: &CoefficientTriple, sense: Sense, cfg: &BoundConfig, value_tol: f64) -> Result<BasePoint> {
    let p = match sense {
        Sense::Minimize => silp::build_upper(xi, cfg.tau)?,
        Sense::Maximize => silp::build_lower(xi, cfg.tau)?,
    };
    let (sol, sets) = silp::solution_sets(&p, &cfg.tolerances, value_tol)?;
    Ok(BasePoint { xi: xi.clone(), sense, value: sol.value, sets })
}

fn resolve_value(xi: &CoefficientTriple, sense: Sense, cfg: &BoundConfig) -> Result<f64> {
    let p = match sense {
        Sense::Minimize => silp::build_upper(xi, cfg.tau)?,
        Sense::Maximize => silp::build_lower(xi, cfg.tau)?,
    };
    let sol = silp::solve(&p, &cfg.tolerances)?;
    if !sol.status.has_value() {
        return Err(Error::NotOptimal(sol.status.as_str().into()));
    }
    Ok(sol.value)
}

/// Numerical-delta intervals for the upper and lower bounds at every `y0`.
/// Each draw resamples the observations, re-estimates the coefficients with
/// the base grid and bandwidths, and maps `n^κ(ξ* - ξ̂)` through the
/// directional derivative. Results come in `y0` order, upper before lower.
pub fn numerical_delta_curve(
    ds: &Dataset,
    x: Option<&[f64]>,
    y0_grid: &[f64],
    opts: &DeltaOptions,
    cfg: &BoundConfig,
) -> Result<Vec<CiResult>> {
    opts.validate()?;
    let bw = cfg.resolve_bandwidths(ds);
    let grid = cfg.resolve_grid(ds)?;
    let model = CoefficientModel::estimate(ds, x, &grid, &bw, cfg.kind)?;
    let n = ds.len() as f64;
    let scale = n.powf(opts.kappa);
    let step = opts.step.unwrap_or_else(|| n.powf(-opts.kappa / 2.0));

    let bases: Vec<Result<BasePoint>> = y0_grid
        .par_iter()
        .flat_map_iter(|&y0| {
            let xi = model.triple(y0);
            [Sense::Minimize, Sense::Maximize].map(|s| base_point(&xi, s, cfg, opts.value_tol))
        })
        .collect();

    let draws: Vec<Option<Vec<f64>>> = (0..opts.draws)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, b as u64, 0));
            let sample = ds.resample(&mut rng);
            let m = CoefficientModel::estimate(&sample, x, &grid, &bw, cfg.kind).ok()?;
            let vals = bases
                .iter()
                .map(|base| {
                    let draw = |base: &BasePoint| -> Result<f64> {
                        let dir = PerturbationDirection::between(&base.xi, &m.triple(base.xi.y0), scale)?;
                        match opts.mode {
                            DeltaMode::Derivative => hadamard_derivative(base.sense, &base.sets, &dir),
                            DeltaMode::Resolve => {
                                Ok((resolve_value(&dir.apply(&base.xi, step), base.sense, cfg)? - base.value) / step)
                            }
                        }
                    };
                    base.as_ref().ok().and_then(|b| draw(b).ok()).unwrap_or(f64::NAN)
                })
                .collect();
            Some(vals)
        })
        .collect();

    let alpha = 1.0 - opts.level;
    Ok(bases
        .iter()
        .enumerate()
        .map(|(i, base)| {
            let y0 = y0_grid[i / 2];
            let sense = if i % 2 == 0 { Sense::Minimize } else { Sense::Maximize };
            let blank = |error: String| CiResult {
                y0,
                sense,
                point: f64::NAN,
                ci_lo: f64::NAN,
                ci_hi: f64::NAN,
                level: opts.level,
                method: CiMethod::NumericalDelta,
                n_draws: 0,
                failed_draws: opts.draws,
                unique: false,
                flagged: true,
                caveat: None,
                error: Some(error),
            };
            let base = match base {
                Ok(b) => b,
                Err(e) => return blank(e.to_string()),
            };
            let values: Vec<f64> =
                draws.iter().filter_map(|d| d.as_ref().map(|v| v[i])).filter(|v| v.is_finite()).collect();
            if values.is_empty() {
                return blank("every draw failed".into());
            }
            let ci_lo = base.value - percentile(&values, 1.0 - alpha / 2.0) / scale;
            let ci_hi = base.value - percentile(&values, alpha / 2.0) / scale;
            let unique = base.sets.is_unique();
            CiResult {
                y0,
                sense,
                point: base.value,
                ci_lo,
                ci_hi,
                level: opts.level,
                method: CiMethod::NumericalDelta,
                n_draws: values.len(),
                failed_draws: opts.draws - values.len(),
                unique,
                flagged: !(ci_lo <= base.value && base.value <= ci_hi),
                caveat: (!unique).then(|| NONUNIQUE_CAVEAT.to_string()),
                error: None,
            }
        })
        .collect())
}

/// Numerical-delta interval for one bound at one `y0`.
pub fn numerical_delta_ci(
    ds: &Dataset,
    x: Option<&[f64]>,
    y0: f64,
    sense: Sense,
    opts: &DeltaOptions,
    cfg: &BoundConfig,
) -> Result<CiResult> {
    let out = numerical_delta_curve(ds, x, &[y0], opts, cfg)?;
    let ci = out.into_iter().find(|c| c.sense == sense).ok_or(Error::EmptySet)?;
    match &ci.error {
        Some(e) => Err(Error::NotOptimal(e.clone())),
        None => Ok(ci),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaLimitReport {
    /// Per draw: `A11'⁻¹ n^κ (r̂* - r̂)(y*)`.
    pub residual_term: Vec<Vec<f64>>,
    /// Per draw: `A11'⁻¹ A12' H⁻¹ n^κ ∂Q̂*/∂θ2`; absent when `θ2` is empty
    /// or the Hessian is singular.
    pub outer_term: Option<Vec<Vec<f64>>>,
    pub residual_variance: Vec<f64>,
    pub outer_variance: Option<Vec<f64>>,
    pub total_variance: Vec<f64>,
    pub hessian_singular: bool,
}

fn column_variance(rows: &[Vec<f64>], k: usize) -> Vec<f64> {
    (0..k)
        .map(|j| {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            if col.len() < 2 {
                return 0.0;
            }
            let m = col.iter().sum::<f64>() / col.len() as f64;
            col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (col.len() - 1) as f64
        })
        .collect()
}

/// Gradient of the grid inner value at `θ2`, multiplier form.
fn grid_inner_gradient(
    xi: &CoefficientTriple,
    split: &InnerOuterSplit,
    tau: f64,
    tol: &ToleranceSet,
) -> Result<Vec<f64>> {
    let b = blocks(xi, split.sense, &split.columns, split.k);
    let s = sign(split.sense);
    let c: Vec<f64> = b.psi01.iter().map(|v| -v).collect();
    let rhs: Vec<f64> = (0..xi.grid.len()).map(|i| s * xi.f_treated[i] - dot(&split.theta2, &b.psi12[i])).collect();
    let g = solve_generic(&GenericLp { c: &c, rows: &b.psi11, rhs: &rhs, tau }, tol);
    if g.status != SolveStatus::Optimal {
        return Err(Error::NotOptimal(g.status.as_str().into()));
    }
    let r = split.theta2.len();
    let mut grad: Vec<f64> = b.psi02.iter().map(|v| -v).collect();
    for (m, &w) in g.lambda.iter().enumerate() {
        if w > tol.mass {
            for i in 0..r {
                grad[i] -= w * b.psi12[m][i];
            }
        }
    }
    Ok(grad)
}

/// Assembles the two terms of the linear representation of `n^κ(θ̂1 - θ1*)`
/// from resampled triples on the base grid.
pub fn theta_limit_terms(
    split: &InnerOuterSplit,
    base: &CoefficientTriple,
    draws: &[CoefficientTriple],
    scale: f64,
    hessian: Option<&EnvelopeHessian>,
    tau: f64,
    tol: &ToleranceSet,
) -> Result<ThetaLimitReport> {
    let k = split.k;
    let r = split.theta2.len();
    let s = sign(split.sense);
    let theta = split_gamma(split);
    let a11t = to_matrix(&split.a11, k).transpose();
    let lu = a11t.clone().lu();
    let resid = |xi: &CoefficientTriple, m: usize| s * xi.f_treated[m] - dot(&theta, &min_form_row(xi, split.sense, m));

    let mut residual_term = Vec::with_capacity(draws.len());
    for d in draws {
        let dr: Vec<f64> = split.active_index.iter().map(|&m| scale * (resid(d, m) - resid(base, m))).collect();
        let t = lu.solve(&DVector::from_vec(dr)).ok_or_else(|| Error::Singular("active constraint block".into()))?;
        residual_term.push(t.iter().copied().collect::<Vec<f64>>());
    }

    let hinv = hessian.filter(|_| r > 0).and_then(|h| to_matrix(&h.matrix, r).try_inverse());
    let hessian_singular = r > 0 && hinv.is_none();
    let outer_term = match hinv {
        Some(hinv) => {
            let base_grad = grid_inner_gradient(base, split, tau, tol)?;
            let map = lu
                .solve(&(to_matrix(&split.a12, k).transpose() * hinv))
                .ok_or_else(|| Error::Singular("active constraint block".into()))?;
            let mut rows = Vec::with_capacity(draws.len());
            for d in draws {
                let g = grid_inner_gradient(d, split, tau, tol)?;
                let dg = DVector::from_iterator(r, g.iter().zip(&base_grad).map(|(a, b)| scale * (a - b)));
                rows.push((&map * dg).iter().copied().collect::<Vec<f64>>());
            }
            Some(rows)
        }
        None => None,
    };

    let residual_variance = column_variance(&residual_term, k);
    let outer_variance = outer_term.as_ref().map(|t| column_variance(t, k));
    let total: Vec<Vec<f64>> = match &outer_term {
        Some(t) => residual_term.iter().zip(t).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect(),
        None => residual_term.clone(),
    };
    Ok(ThetaLimitReport {
        total_variance: column_variance(&total, k),
        residual_term,
        outer_term,
        residual_variance,
        outer_variance,
        hessian_singular,
    })
}
