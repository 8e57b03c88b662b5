//! Regularity diagnostics: active sets, recession margin, strict feasibility.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{solve_generic, GenericLp, LpSolution, SolveStatus, ToleranceSet};
use crate::estimators::CoefficientTriple;

/// Slack used by [`slater_check`] for the strictly feasible candidate.
pub const SLATER_MARGIN: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivePoint {
    pub index: usize,
    pub y: f64,
    pub mass: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveSet {
    pub points: Vec<ActivePoint>,
    pub k: usize,
    pub num_vars: usize,
    /// Rank of the `K x L` matrix of active rows `(1, Δ1(y_k))`.
    pub rank: usize,
    pub k_within_l: bool,
    pub multipliers_positive: bool,
    pub full_rank: bool,
}

impl ActiveSet {
    /// All regularity requirements on the active set hold.
    pub fn regular(&self) -> bool {
        self.k >= 1 && self.k_within_l && self.multipliers_positive && self.full_rank
    }
}

pub(crate) fn matrix_rank(rows: &[Vec<f64>]) -> usize {
    if rows.is_empty() {
        return 0;
    }
    let m = DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]);
    let sv = m.singular_values();
    let top = sv.iter().copied().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > 1e-10 * top.max(1.0)).count()
}

/// Grid points whose constraint binds within `act_tol` and carries multiplier
/// mass above the solver's mass tolerance.
pub fn active_set(sol: &LpSolution, xi: &CoefficientTriple, act_tol: f64) -> ActiveSet {
    let sign = match sol.sense {
        super::Sense::Minimize => 1.0,
        super::Sense::Maximize => -1.0,
    };
    let points: Vec<ActivePoint> = sol
        .dual
        .atoms
        .iter()
        .map(|a| {
            let residual = sign * (super::dot(&xi.row(a.index), &sol.gamma) - xi.f_treated[a.index]);
            ActivePoint { index: a.index, y: a.y, mass: a.mass, residual }
        })
        .filter(|p| p.residual.abs() <= act_tol)
        .collect();
    let rows: Vec<Vec<f64>> = points.iter().map(|p| xi.row(p.index)).collect();
    let rank = matrix_rank(&rows);
    let k = points.len();
    ActiveSet {
        k,
        num_vars: xi.num_vars(),
        rank,
        k_within_l: k <= xi.num_vars(),
        multipliers_positive: points.iter().all(|p| p.mass > 0.0),
        full_rank: rank == k,
        points,
    }
}

/// Minimum of `δ0 - δ1'Δ0(y0)` over recession directions of the constraint
/// set, normalized by `|δ|_1 = 1`. One auxiliary program per sign orthant.
/// The same number governs the lower-bound program (substitute `-δ`).
pub fn recession_margin(xi: &CoefficientTriple) -> f64 {
    let l = xi.num_vars();
    let c = xi.objective();
    let base_rows: Vec<Vec<f64>> = (0..xi.grid.len()).map(|m| xi.row(m)).collect();
    let tol = ToleranceSet::default();
    let mut best = f64::INFINITY;
    for pattern in 0..(1usize << l) {
        let sigma: Vec<f64> = (0..l).map(|i| if pattern >> i & 1 == 1 { -1.0 } else { 1.0 }).collect();
        let mut rows = base_rows.clone();
        let mut rhs = vec![0.0; rows.len()];
        for i in 0..l {
            let mut e = vec![0.0; l];
            e[i] = sigma[i];
            rows.push(e);
            rhs.push(0.0);
        }
        rows.push(sigma.clone());
        rhs.push(1.0);
        rows.push(sigma.iter().map(|s| -s).collect());
        rhs.push(-1.0);
        let lp = GenericLp { c: &c, rows: &rows, rhs: &rhs, tau: f64::INFINITY };
        let sol = solve_generic(&lp, &tol);
        if sol.status == SolveStatus::Optimal {
            best = best.min(super::dot(&c, &sol.gamma));
        }
    }
    best
}

/// Whether `γ = (1 + margin, 0, ..., 0)` satisfies every upper-program grid
/// constraint strictly.
pub fn slater_check(xi: &CoefficientTriple, margin: f64) -> bool {
    xi.f_treated.iter().all(|&f| f < 1.0 + margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::silp::tests::triple;
    use crate::silp::{build_upper, solve};

    #[test]
    fn flat_instrument_margin_is_zero() {
        let xi = triple(vec![0.0, 1.0, 2.0], vec![0.0, 0.5, 1.0], vec![vec![0.0; 3]], vec![0.0]);
        assert!(recession_margin(&xi).abs() < 1e-12);
        let sol = solve(&build_upper(&xi, 100.0).unwrap(), &ToleranceSet::default()).unwrap();
        let act = active_set(&sol, &xi, 1e-7);
        assert_eq!(act.k, 1);
        assert!((act.points[0].mass - 1.0).abs() < 1e-12);
        assert!(act.regular());
    }

    #[test]
    fn sign_changing_contrast_gives_positive_margin() {
        let xi = triple(vec![0.0, 1.0, 2.0], vec![0.0, 0.5, 1.0], vec![vec![-0.2, 0.1, 0.3]], vec![0.05]);
        let margin = recession_margin(&xi);
        assert!(margin > 0.0);
        // dense sampling of the normalized directions
        let mut best = f64::INFINITY;
        for i in 0..40000 {
            let t = 2.0 * std::f64::consts::PI * i as f64 / 40000.0;
            let (c, s) = (t.cos(), t.sin());
            let (d0, d1) = (c / (c.abs() + s.abs()), s / (c.abs() + s.abs()));
            if xi.delta1[0].iter().all(|v| d0 + d1 * v >= 0.0) {
                best = best.min(d0 - d1 * xi.delta0_at_y0[0]);
            }
        }
        assert!((margin - best).abs() < 1e-3, "{margin} vs {best}");
        let scaled = triple(vec![0.0, 1.0, 2.0], vec![0.0, 0.5, 1.0], vec![vec![-0.6, 0.3, 0.9]], vec![0.15]);
        assert!(recession_margin(&scaled) > 0.0);
    }

    #[test]
    fn slater() {
        let ok = triple(vec![0.0, 1.0], vec![0.3, 1.0], vec![vec![0.0, 0.0]], vec![0.0]);
        assert!(slater_check(&ok, SLATER_MARGIN));
        let bad = triple(vec![0.0, 1.0], vec![0.3, 2.0], vec![vec![0.0, 0.0]], vec![0.0]);
        assert!(!slater_check(&bad, SLATER_MARGIN));
    }
}
