//! Dense revised simplex on `min cost'x  s.t.  A x = rhs, x >= 0`.
//!
//! The bound programs are solved through this form: their constraint rows
//! become columns here and the program's decision vector is recovered from the
//! simplex multipliers.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::DMatrix;

const PIV_TOL: f64 = 1e-9;
const COST_TOL: f64 = 1e-11;
const PHASE1_TOL: f64 = 1e-9;
const REFACTOR_EVERY: usize = 64;
const STALL_LIMIT: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub(crate) enum Var {
    Art(usize),
    Col(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum SfStatus {
    Optimal,
    /// No feasible `x`.
    Infeasible,
    /// Objective unbounded below.
    Unbounded,
    MaxIter,
}

#[derive(Debug, Clone)]
pub(crate) struct StandardForm {
    m: usize,
    sign: Vec<f64>,
    rhs: Vec<f64>,
    cols: Vec<Vec<f64>>,
    cost: Vec<f64>,
    basis: Vec<Var>,
    binv: DMatrix<f64>,
    xb: Vec<f64>,
    phase1_done: bool,
    pub iterations: usize,
}

/// One optimal basis: multipliers (original row signs) and the primal vector.
#[derive(Debug, Clone)]
pub(crate) struct BasisPoint {
    pub pi: Vec<f64>,
    pub x: Vec<f64>,
}

impl StandardForm {
    pub fn new(rhs: &[f64]) -> Self {
        let m = rhs.len();
        let sign: Vec<f64> = rhs.iter().map(|&b| if b < 0.0 { -1.0 } else { 1.0 }).collect();
        Self {
            m,
            rhs: rhs.iter().zip(&sign).map(|(b, s)| b * s).collect(),
            sign,
            cols: Vec::new(),
            cost: Vec::new(),
            basis: (0..m).map(Var::Art).collect(),
            binv: DMatrix::identity(m, m),
            xb: rhs.iter().map(|b| b.abs()).collect(),
            phase1_done: false,
            iterations: 0,
        }
    }

    pub fn add_column(&mut self, col: &[f64], cost: f64) -> usize {
        debug_assert_eq!(col.len(), self.m);
        self.cols.push(col.iter().zip(&self.sign).map(|(a, s)| a * s).collect());
        self.cost.push(cost);
        self.cols.len() - 1
    }

    fn column(&self, v: Var) -> Vec<f64> {
        match v {
            Var::Col(j) => self.cols[j].clone(),
            Var::Art(i) => {
                let mut e = vec![0.0; self.m];
                e[i] = 1.0;
                e
            }
        }
    }

    fn var_cost(&self, v: Var, phase1: bool) -> f64 {
        match (v, phase1) {
            (Var::Art(_), true) => 1.0,
            (Var::Art(_), false) => 0.0,
            (Var::Col(_), true) => 0.0,
            (Var::Col(j), false) => self.cost[j],
        }
    }

    fn ftran(&self, binv: &DMatrix<f64>, col: &[f64]) -> Vec<f64> {
        (0..self.m)
            .map(|i| (0..self.m).map(|k| binv[(i, k)] * col[k]).sum())
            .collect()
    }

    fn duals(&self, basis: &[Var], binv: &DMatrix<f64>, phase1: bool) -> Vec<f64> {
        let cb: Vec<f64> = basis.iter().map(|&v| self.var_cost(v, phase1)).collect();
        (0..self.m)
            .map(|k| (0..self.m).map(|i| cb[i] * binv[(i, k)]).sum())
            .collect()
    }

    fn reduced_cost(&self, j: usize, pi: &[f64], phase1: bool) -> f64 {
        let c = if phase1 { 0.0 } else { self.cost[j] };
        c - self.cols[j].iter().zip(pi).map(|(a, p)| a * p).sum::<f64>()
    }

    fn factor(&self, basis: &[Var]) -> Option<(DMatrix<f64>, Vec<f64>)> {
        let mut b = DMatrix::zeros(self.m, self.m);
        for (i, &v) in basis.iter().enumerate() {
            for (k, a) in self.column(v).into_iter().enumerate() {
                b[(k, i)] = a;
            }
        }
        let binv = b.try_inverse()?;
        let xb = self.ftran(&binv, &self.rhs);
        Some((binv, xb))
    }

    fn refactor(&mut self) {
        if let Some((binv, xb)) = self.factor(&self.basis) {
            self.binv = binv;
            self.xb = xb.into_iter().map(|v| if v.abs() < 1e-13 { 0.0 } else { v }).collect();
        }
    }

    fn pivot(&mut self, r: usize, entering: Var, alpha: &[f64]) {
        let p = alpha[r];
        let step = self.xb[r] / p;
        for i in 0..self.m {
            if i != r {
                self.xb[i] -= step * alpha[i];
            }
        }
        self.xb[r] = step;
        for k in 0..self.m {
            self.binv[(r, k)] /= p;
        }
        for i in 0..self.m {
            if i != r && alpha[i] != 0.0 {
                let f = alpha[i];
                for k in 0..self.m {
                    let v = self.binv[(r, k)];
                    self.binv[(i, k)] -= f * v;
                }
            }
        }
        self.basis[r] = entering;
        self.iterations += 1;
        if self.iterations % REFACTOR_EVERY == 0 {
            self.refactor();
        }
    }

    fn run(&mut self, phase1: bool, max_iter: usize) -> SfStatus {
        let mut stalled = 0usize;
        let mut bland = false;
        let start = self.iterations;
        loop {
            if self.iterations - start >= max_iter {
                return SfStatus::MaxIter;
            }
            let pi = self.duals(&self.basis, &self.binv, phase1);
            let basic: BTreeSet<Var> = self.basis.iter().copied().collect();
            let mut entering: Option<(usize, f64)> = None;
            for j in 0..self.cols.len() {
                if basic.contains(&Var::Col(j)) {
                    continue;
                }
                let d = self.reduced_cost(j, &pi, phase1);
                if d >= -COST_TOL {
                    continue;
                }
                if bland {
                    entering = Some((j, d));
                    break;
                }
                match entering {
                    Some((_, best)) if d > best + 1e-14 => {}
                    _ => entering = Some((j, d)),
                }
            }
            let Some((j, _)) = entering else {
                return SfStatus::Optimal;
            };
            let alpha = self.ftran(&self.binv, &self.cols[j]);
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.m {
                let a = alpha[i];
                let ratio = if !phase1 && matches!(self.basis[i], Var::Art(_)) && a.abs() > PIV_TOL {
                    0.0
                } else if a > PIV_TOL {
                    self.xb[i].max(0.0) / a
                } else {
                    continue;
                };
                leave = match leave {
                    None => Some((i, ratio)),
                    Some((r, best)) => {
                        if ratio < best - 1e-12 {
                            Some((i, ratio))
                        } else if ratio <= best + 1e-12 {
                            let better = if bland {
                                self.basis[i] < self.basis[r]
                            } else {
                                matches!(self.basis[i], Var::Art(_)) && !matches!(self.basis[r], Var::Art(_))
                                    || (matches!(self.basis[i], Var::Art(_)) == matches!(self.basis[r], Var::Art(_))
                                        && a.abs() > alpha[r].abs())
                            };
                            if better {
                                Some((i, ratio))
                            } else {
                                Some((r, best))
                            }
                        } else {
                            Some((r, best))
                        }
                    }
                };
            }
            let Some((r, ratio)) = leave else {
                return SfStatus::Unbounded;
            };
            if ratio <= 1e-14 {
                stalled += 1;
                if stalled > STALL_LIMIT {
                    bland = true;
                }
            } else {
                stalled = 0;
                bland = false;
            }
            self.xb[r] = ratio * alpha[r];
            self.pivot(r, Var::Col(j), &alpha);
        }
    }

    fn drive_out_artificials(&mut self) {
        for r in 0..self.m {
            if !matches!(self.basis[r], Var::Art(_)) {
                continue;
            }
            let basic: BTreeSet<Var> = self.basis.iter().copied().collect();
            let mut best: Option<(usize, f64)> = None;
            for j in 0..self.cols.len() {
                if basic.contains(&Var::Col(j)) {
                    continue;
                }
                let a: f64 = (0..self.m).map(|k| self.binv[(r, k)] * self.cols[j][k]).sum();
                if a.abs() > PIV_TOL && best.map_or(true, |(_, b)| a.abs() > b.abs()) {
                    best = Some((j, a));
                }
            }
            if let Some((j, _)) = best {
                let alpha = self.ftran(&self.binv, &self.cols[j]);
                self.xb[r] = 0.0;
                self.pivot(r, Var::Col(j), &alpha);
            }
        }
    }

    pub fn solve(&mut self, max_iter: usize) -> SfStatus {
        if !self.phase1_done {
            match self.run(true, max_iter) {
                SfStatus::Optimal => {}
                SfStatus::MaxIter => return SfStatus::MaxIter,
                _ => return SfStatus::Infeasible,
            }
            let infeas: f64 = self
                .basis
                .iter()
                .zip(&self.xb)
                .filter(|(v, _)| matches!(v, Var::Art(_)))
                .map(|(_, x)| x.max(0.0))
                .sum();
            if infeas > PHASE1_TOL * (1.0 + self.rhs.iter().map(|b| b.abs()).sum::<f64>()) {
                return SfStatus::Infeasible;
            }
            self.drive_out_artificials();
            self.refactor();
            self.phase1_done = true;
        }
        self.run(false, max_iter)
    }

    fn expand_x(&self, basis: &[Var], xb: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.cols.len()];
        for (v, &val) in basis.iter().zip(xb) {
            if let Var::Col(j) = v {
                x[*j] = val.max(0.0);
            }
        }
        x
    }

    fn unflip(&self, pi: Vec<f64>) -> Vec<f64> {
        pi.into_iter().zip(&self.sign).map(|(p, s)| p * s).collect()
    }

    /// Current simplex multipliers in the original row orientation.
    pub fn pi(&self) -> Vec<f64> {
        self.unflip(self.duals(&self.basis, &self.binv, false))
    }

    pub fn x(&self) -> Vec<f64> {
        self.expand_x(&self.basis, &self.xb)
    }

    fn objective(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.cost).map(|(a, c)| a * c).sum()
    }

    /// Breadth-first walk over optimal bases reachable from the current one by
    /// degenerate or zero-reduced-cost pivots. Returns distinct basis points and
    /// whether the walk was cut short.
    pub fn optimal_bases(&self, max_bases: usize, value_tol: f64) -> (Vec<BasisPoint>, bool) {
        let target = self.objective(&self.x());
        let start: BTreeSet<Var> = self.basis.iter().copied().collect();
        let mut seen = BTreeSet::new();
        seen.insert(start);
        let mut queue = VecDeque::new();
        queue.push_back(self.basis.clone());
        let mut out = Vec::new();
        let mut truncated = false;
        while let Some(basis) = queue.pop_front() {
            let Some((binv, xb)) = self.factor(&basis) else {
                continue;
            };
            let pi = self.duals(&basis, &binv, false);
            let x = self.expand_x(&basis, &xb);
            if (self.objective(&x) - target).abs() > value_tol * (1.0 + target.abs()) {
                continue;
            }
            out.push(BasisPoint { pi: self.unflip(pi.clone()), x });
            if out.len() >= max_bases {
                truncated = !queue.is_empty();
                break;
            }
            let basic: BTreeSet<Var> = basis.iter().copied().collect();
            let nonbasic: Vec<usize> = (0..self.cols.len()).filter(|j| !basic.contains(&Var::Col(*j))).collect();
            let d: Vec<f64> = nonbasic.iter().map(|&j| self.reduced_cost(j, &pi, false)).collect();
            let alphas: Vec<Vec<f64>> = nonbasic.iter().map(|&j| self.ftran(&binv, &self.cols[j])).collect();
            let mut candidates = Vec::new();
            for (t, &j) in nonbasic.iter().enumerate() {
                if d[t].abs() > 1e-9 {
                    continue;
                }
                let a = &alphas[t];
                let ratios: Vec<(usize, f64)> = (0..self.m)
                    .filter(|&i| a[i] > PIV_TOL)
                    .map(|i| (i, xb[i].max(0.0) / a[i]))
                    .collect();
                if let Some(min) = ratios.iter().map(|r| r.1).reduce(f64::min) {
                    for &(i, ratio) in &ratios {
                        if ratio <= min + 1e-10 {
                            candidates.push((i, j));
                        }
                    }
                }
            }
            for r in 0..self.m {
                if xb[r] > 1e-9 {
                    continue;
                }
                let neg: Vec<(usize, f64)> = nonbasic
                    .iter()
                    .enumerate()
                    .filter(|(t, _)| alphas[*t][r] < -PIV_TOL)
                    .map(|(t, &j)| (j, d[t].max(0.0) / -alphas[t][r]))
                    .collect();
                if let Some(min) = neg.iter().map(|v| v.1).reduce(f64::min) {
                    for &(j, ratio) in &neg {
                        if ratio <= min + 1e-10 {
                            candidates.push((r, j));
                        }
                    }
                }
            }
            for (r, j) in candidates {
                let mut next = basis.clone();
                next[r] = Var::Col(j);
                let key: BTreeSet<Var> = next.iter().copied().collect();
                if !seen.insert(key) {
                    continue;
                }
                let Some((nbinv, nxb)) = self.factor(&next) else {
                    continue;
                };
                if nxb.iter().any(|&v| v < -1e-9) {
                    continue;
                }
                let npi = self.duals(&next, &nbinv, false);
                let nbasic: BTreeSet<Var> = next.iter().copied().collect();
                let optimal = (0..self.cols.len())
                    .filter(|j| !nbasic.contains(&Var::Col(*j)))
                    .all(|j| self.reduced_cost(j, &npi, false) >= -1e-9);
                if optimal {
                    queue.push_back(next);
                }
            }
        }
        (out, truncated)
    }
}
