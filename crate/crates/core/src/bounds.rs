//! Pointwise bound curves for the counterfactual CDF, their monotone
//! envelopes, quantile inversion, and QTE bounds.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{default_bandwidths, Bandwidths, CdfKind, CoefficientModel, CoefficientTriple, EvalGrid, DEFAULT_GRID_CAP};
use crate::floats;
use crate::silp::{self, recession_margin, LpSolution, ToleranceSet};

/// Rule deciding which `y0` points are trusted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum TrustRule {
    /// Trusted iff the recession margin is at least `min`.
    Margin { min: f64 },
    /// Trusted iff `lo <= y0 <= hi`.
    Interval { lo: f64, hi: f64 },
}

impl Default for TrustRule {
    fn default() -> Self {
        TrustRule::Margin { min: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundConfig {
    #[serde(with = "floats::scalar")]
    pub tau: f64,
    pub kind: CdfKind,
    /// Covariate and outcome bandwidths; rule-of-thumb values when absent.
    pub bandwidths: Option<Bandwidths>,
    /// Constraint grid; the treated outcomes plus endpoints when absent.
    pub constraint_grid: Option<EvalGrid>,
    pub grid_cap: usize,
    pub trust: TrustRule,
    /// Replace untrusted points by the restricted-solution-set surrogate.
    pub fallback: bool,
    pub tolerances: ToleranceSet,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            tau: 100.0,
            kind: CdfKind::Step,
            bandwidths: None,
            constraint_grid: None,
            grid_cap: DEFAULT_GRID_CAP,
            trust: TrustRule::default(),
            fallback: false,
            tolerances: ToleranceSet::default(),
        }
    }
}

impl BoundConfig {
    /// Bandwidths actually used for `ds`.
    pub fn resolve_bandwidths(&self, ds: &Dataset) -> Bandwidths {
        let smoothing = self.kind == CdfKind::Smoothed;
        match &self.bandwidths {
            Some(bw) if smoothing && bw.outcome.is_none() => {
                bw.clone().with_outcome(default_bandwidths(ds, true).outcome)
            }
            Some(bw) => bw.clone(),
            None => default_bandwidths(ds, smoothing),
        }
    }

    /// Constraint grid actually used for `ds`.
    pub fn resolve_grid(&self, ds: &Dataset) -> Result<EvalGrid> {
        match &self.constraint_grid {
            Some(g) => Ok(g.clone()),
            None => EvalGrid::from_treated_outcomes(ds, crate::estimators::outcome_bandwidth_rule(ds), self.grid_cap),
        }
    }

    pub fn estimate(&self, ds: &Dataset, x: Option<&[f64]>) -> Result<CoefficientModel> {
        let bw = self.resolve_bandwidths(ds);
        let grid = self.resolve_grid(ds)?;
        CoefficientModel::estimate(ds, x, &grid, &bw, self.kind)
    }
}

/// Per-point solver outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSolve {
    pub y0: f64,
    pub upper: Option<LpSolution>,
    pub lower: Option<LpSolution>,
    #[serde(with = "floats::scalar")]
    pub margin: f64,
    pub error: Option<String>,
}

impl PointSolve {
    pub fn failed(&self) -> bool {
        self.error.is_some()
            || !self.upper.as_ref().is_some_and(|s| s.status.has_value())
            || !self.lower.as_ref().is_some_and(|s| s.status.has_value())
    }
}

fn status_str(s: &Option<LpSolution>) -> &'static str {
    s.as_ref().map_or("error", |s| s.status.as_str())
}

/// Solves the upper and lower programs for one coefficient triple.
pub fn solve_point(xi: &CoefficientTriple, tau: f64, tol: &ToleranceSet) -> PointSolve {
    let run = || -> Result<(LpSolution, LpSolution)> {
        let up = silp::solve(&silp::build_upper(xi, tau)?, tol)?;
        let lo = silp::solve(&silp::build_lower(xi, tau)?, tol)?;
        Ok((up, lo))
    };
    match run() {
        Ok((up, lo)) => PointSolve {
            y0: xi.y0,
            upper: Some(up),
            lower: Some(lo),
            margin: recession_margin(xi),
            error: None,
        },
        Err(e) => PointSolve { y0: xi.y0, upper: None, lower: None, margin: f64::NAN, error: Some(e.to_string()) },
    }
}

/// A primal solution retained for the restricted-set fallback. The grid
/// constraints do not depend on `y0`, so a banked `γ` stays feasible for
/// the program of the same sense at every other `y0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub y0: f64,
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolutionBank {
    pub upper: Vec<BankEntry>,
    pub lower: Vec<BankEntry>,
}

impl SolutionBank {
    /// The same solutions serve both senses.
    pub fn shared(entries: Vec<BankEntry>) -> Self {
        Self { upper: entries.clone(), lower: entries }
    }

    pub fn is_empty(&self) -> bool {
        self.upper.is_empty() && self.lower.is_empty()
    }
}

fn evaluate(gamma: &[f64], xi: &CoefficientTriple) -> f64 {
    silp::dot(&xi.objective(), gamma)
}

/// Surrogate `(lower, upper)` at `y0` from banked solutions: the minimum of
/// the objective over the upper bank and the maximum over the lower bank.
pub fn fallback_outside(bank: &SolutionBank, xi: &CoefficientTriple) -> Result<(f64, f64)> {
    if bank.upper.is_empty() || bank.lower.is_empty() {
        return Err(Error::EmptySet);
    }
    let upper = bank.upper.iter().map(|e| evaluate(&e.gamma, xi)).fold(f64::INFINITY, f64::min);
    let lower = bank.lower.iter().map(|e| evaluate(&e.gamma, xi)).fold(f64::NEG_INFINITY, f64::max);
    Ok((lower, upper))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCurve {
    #[serde(with = "floats::vector")]
    pub y0_grid: Vec<f64>,
    #[serde(with = "floats::vector")]
    pub upper_raw: Vec<f64>,
    #[serde(with = "floats::vector")]
    pub lower_raw: Vec<f64>,
    /// Clipped to `[0, 1]`, then running minimum from the right.
    #[serde(with = "floats::vector")]
    pub upper: Vec<f64>,
    /// Clipped to `[0, 1]`, then running maximum from the left.
    #[serde(with = "floats::vector")]
    pub lower: Vec<f64>,
    pub upper_status: Vec<String>,
    pub lower_status: Vec<String>,
    #[serde(with = "floats::vector")]
    pub margin: Vec<f64>,
    pub trusted: Vec<bool>,
    /// Point value replaced by the bank surrogate.
    pub fallback: Vec<bool>,
    /// `lower > upper` after monotonization (flagged, not altered).
    pub crossing: Vec<bool>,
    pub errors: Vec<Option<String>>,
}

impl BoundCurve {
    pub fn len(&self) -> usize {
        self.y0_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y0_grid.is_empty()
    }

    pub fn failures(&self) -> usize {
        (0..self.len())
            .filter(|&i| self.errors[i].is_some() || !self.upper_raw[i].is_finite() || !self.lower_raw[i].is_finite())
            .count()
    }

    pub fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    /// Mean of `upper - lower` over trusted points.
    pub fn mean_trusted_width(&self) -> f64 {
        let w: Vec<f64> = (0..self.len()).filter(|&i| self.trusted[i]).map(|i| self.width(i)).collect();
        crate::numeric::mean(&w)
    }

    pub fn write_csv<W: Write>(&self, mut out: W, header: &[String]) -> Result<()> {
        for line in header {
            writeln!(out, "# {line}")?;
        }
        writeln!(
            out,
            "y0,lower_raw,upper_raw,lower,upper,lower_status,upper_status,margin,trusted,fallback,crossing,error"
        )?;
        for i in 0..self.len() {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                floats::fmt(self.y0_grid[i]),
                floats::fmt(self.lower_raw[i]),
                floats::fmt(self.upper_raw[i]),
                floats::fmt(self.lower[i]),
                floats::fmt(self.upper[i]),
                self.lower_status[i],
                self.upper_status[i],
                floats::fmt(self.margin[i]),
                self.trusted[i],
                self.fallback[i],
                self.crossing[i],
                self.errors[i].as_deref().unwrap_or("").replace([',', '\n'], ";"),
            )?;
        }
        Ok(())
    }

    /// Plot data: `x, lower, upper[, truth]`.
    pub fn write_plot_data<W: Write>(&self, mut out: W, header: &[String], truth: Option<&[f64]>) -> Result<()> {
        for line in header {
            writeln!(out, "# {line}")?;
        }
        writeln!(out, "{}", if truth.is_some() { "x,lower,upper,truth" } else { "x,lower,upper" })?;
        for i in 0..self.len() {
            write!(out, "{},{},{}", floats::fmt(self.y0_grid[i]), floats::fmt(self.lower[i]), floats::fmt(self.upper[i]))?;
            if let Some(t) = truth {
                write!(out, ",{}", floats::fmt(t[i]))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Clips to `[0, 1]` and takes the validity-preserving monotone envelopes:
/// running minimum from the right for the upper curve, running maximum from
/// the left for the lower curve. Non-finite entries become vacuous (1 or 0);
/// values within `snap` of 0 or 1 are set to it.
pub fn monotonize(upper_raw: &[f64], lower_raw: &[f64], snap: f64) -> (Vec<f64>, Vec<f64>) {
    let clip = |v: f64, vacuous: f64| {
        if !v.is_finite() {
            vacuous
        } else if v <= snap {
            0.0
        } else if v >= 1.0 - snap {
            1.0
        } else {
            v
        }
    };
    let mut upper: Vec<f64> = upper_raw.iter().map(|&v| clip(v, 1.0)).collect();
    let mut lower: Vec<f64> = lower_raw.iter().map(|&v| clip(v, 0.0)).collect();
    for i in (0..upper.len().saturating_sub(1)).rev() {
        upper[i] = upper[i].min(upper[i + 1]);
    }
    for i in 1..lower.len() {
        lower[i] = lower[i].max(lower[i - 1]);
    }
    (upper, lower)
}

/// Assembles a curve from per-point solves. `triples` supplies the
/// coefficient triple at any `y0` (needed for the fallback surrogate).
pub fn assemble_curve(
    solves: Vec<PointSolve>,
    trust: TrustRule,
    fallback: Option<&dyn Fn(f64) -> Result<CoefficientTriple>>,
    snap: f64,
) -> Result<(BoundCurve, SolutionBank)> {
    let n = solves.len();
    let y0: Vec<f64> = solves.iter().map(|s| s.y0).collect();
    let value = |s: &Option<LpSolution>| s.as_ref().filter(|s| s.status.has_value()).map_or(f64::NAN, |s| s.value);
    let mut upper_raw: Vec<f64> = solves.iter().map(|s| value(&s.upper)).collect();
    let mut lower_raw: Vec<f64> = solves.iter().map(|s| value(&s.lower)).collect();
    let margin: Vec<f64> = solves.iter().map(|s| s.margin).collect();
    let trusted: Vec<bool> = solves
        .iter()
        .map(|s| match trust {
            TrustRule::Margin { min } => s.margin >= min,
            TrustRule::Interval { lo, hi } => s.y0 >= lo && s.y0 <= hi,
        })
        .collect();
    let mut bank = SolutionBank::default();
    for (s, &t) in solves.iter().zip(&trusted) {
        if !t {
            continue;
        }
        if let Some(u) = s.upper.as_ref().filter(|u| u.status.has_value()) {
            bank.upper.push(BankEntry { y0: s.y0, gamma: u.gamma.clone() });
        }
        if let Some(l) = s.lower.as_ref().filter(|l| l.status.has_value()) {
            bank.lower.push(BankEntry { y0: s.y0, gamma: l.gamma.clone() });
        }
    }
    let mut used_fallback = vec![false; n];
    let mut errors: Vec<Option<String>> = solves.iter().map(|s| s.error.clone()).collect();
    if let Some(make) = fallback {
        if !bank.upper.is_empty() && !bank.lower.is_empty() {
            for i in (0..n).filter(|&i| !trusted[i]) {
                match make(y0[i]).and_then(|xi| fallback_outside(&bank, &xi)) {
                    Ok((lo, up)) => {
                        lower_raw[i] = lo;
                        upper_raw[i] = up;
                        used_fallback[i] = true;
                    }
                    Err(e) => errors[i] = Some(e.to_string()),
                }
            }
        }
    }
    let (upper, lower) = monotonize(&upper_raw, &lower_raw, snap);
    let crossing = (0..n).map(|i| lower[i] > upper[i]).collect();
    Ok((
        BoundCurve {
            upper_status: solves.iter().map(|s| status_str(&s.upper).to_string()).collect(),
            lower_status: solves.iter().map(|s| status_str(&s.lower).to_string()).collect(),
            y0_grid: y0,
            upper_raw,
            lower_raw,
            upper,
            lower,
            margin,
            trusted,
            fallback: used_fallback,
            crossing,
            errors,
        },
        bank,
    ))
}

/// Bound curve over `y0_grid` for triples produced by `triple_at`.
pub fn curve_from_triples<F>(triple_at: F, y0_grid: &[f64], cfg: &BoundConfig) -> Result<(BoundCurve, SolutionBank)>
where
    F: Fn(f64) -> Result<CoefficientTriple> + Sync,
{
    let solves: Vec<PointSolve> = y0_grid
        .par_iter()
        .map(|&y0| match triple_at(y0) {
            Ok(xi) => solve_point(&xi, cfg.tau, &cfg.tolerances),
            Err(e) => PointSolve { y0, upper: None, lower: None, margin: f64::NAN, error: Some(e.to_string()) },
        })
        .collect();
    let fb: Option<&dyn Fn(f64) -> Result<CoefficientTriple>> = if cfg.fallback { Some(&triple_at) } else { None };
    assemble_curve(solves, cfg.trust, fb, cfg.tolerances.feas)
}

/// Estimates coefficients from `ds` and computes the bound curve.
pub fn bound_curve(ds: &Dataset, x: Option<&[f64]>, y0_grid: &[f64], cfg: &BoundConfig) -> Result<BoundCurve> {
    bound_curve_with_bank(ds, x, y0_grid, cfg).map(|(c, _)| c)
}

pub fn bound_curve_with_bank(
    ds: &Dataset,
    x: Option<&[f64]>,
    y0_grid: &[f64],
    cfg: &BoundConfig,
) -> Result<(BoundCurve, SolutionBank)> {
    if y0_grid.is_empty() {
        return Err(Error::InvalidGrid("empty y0 grid".into()));
    }
    let model = cfg.estimate(ds, x)?;
    curve_from_triples(|y0| Ok(model.triple(y0)), y0_grid, cfg)
}

/// `(q0_lb, q0_ub)`: first grid points where the upper and lower curves reach
/// `tau_q`; `+inf` when never reached.
pub fn quantile_invert(curve: &BoundCurve, tau_q: f64) -> (f64, f64) {
    let first = |v: &[f64]| {
        v.iter()
            .position(|&f| f >= tau_q)
            .map_or(f64::INFINITY, |i| curve.y0_grid[i])
    };
    (first(&curve.upper), first(&curve.lower))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QteBounds {
    pub tau_q: f64,
    #[serde(with = "floats::scalar")]
    pub q1: f64,
    #[serde(with = "floats::scalar")]
    pub q0_lb: f64,
    #[serde(with = "floats::scalar")]
    pub q0_ub: f64,
    #[serde(with = "floats::scalar")]
    pub qte_lb: f64,
    #[serde(with = "floats::scalar")]
    pub qte_ub: f64,
}

impl QteBounds {
    pub fn new(tau_q: f64, q1: f64, q0_lb: f64, q0_ub: f64) -> Self {
        Self { tau_q, q1, q0_lb, q0_ub, qte_lb: q1 - q0_ub, qte_ub: q1 - q0_lb }
    }

    pub fn write_csv<W: Write>(rows: &[QteBounds], mut out: W, header: &[String]) -> Result<()> {
        for line in header {
            writeln!(out, "# {line}")?;
        }
        writeln!(out, "tau_q,q1,q0_lb,q0_ub,qte_lb,qte_ub")?;
        for r in rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                floats::fmt(r.tau_q),
                floats::fmt(r.q1),
                floats::fmt(r.q0_lb),
                floats::fmt(r.q0_ub),
                floats::fmt(r.qte_lb),
                floats::fmt(r.qte_ub)
            )?;
        }
        Ok(())
    }
}

/// QTE bounds at each level in `taus` from a single bound curve.
pub fn qte_bounds(
    ds: &Dataset,
    x: Option<&[f64]>,
    taus: &[f64],
    y0_grid: &[f64],
    cfg: &BoundConfig,
) -> Result<(Vec<QteBounds>, BoundCurve)> {
    if let Some(t) = taus.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::InvalidParameter(format!("quantile level {t} outside (0, 1)")));
    }
    let model = cfg.estimate(ds, x)?;
    let (curve, _) = curve_from_triples(|y0| Ok(model.triple(y0)), y0_grid, cfg)?;
    let rows = taus
        .iter()
        .map(|&t| {
            let (lb, ub) = quantile_invert(&curve, t);
            QteBounds::new(t, model.treated_quantile(t), lb, ub)
        })
        .collect();
    Ok((rows, curve))
}
