//! First-stage estimators for the coefficient functions of the bound program.
//!
//! For a covariate point `x` the program needs
//!
//! * `F(y | D=1, x)`, the outcome CDF among the treated,
//! * `Δ_dz(y | x) = P(Y <= y, D = d | Z = z, x) - P(Y <= y, D = d | Z = z_L, x)`
//!   for every non-reference instrument value `z`,
//!
//! estimated by kernel-weighted empirical CDFs (Epanechnikov product kernel in
//! `x`). The smoothed variant replaces `1(Y_i <= y)` by `Phi((y - Y_i) / b)`.

mod sample;

use serde::{Deserialize, Serialize};

pub use sample::{epanechnikov, WeightedSample};

use crate::dataset::{Dataset, InstrumentSupport, Observation};
use crate::error::{Error, Result};
use crate::numeric::{mean, sample_sd, sorted_quantile, weighted_quantile};

/// Maximum number of points in the default evaluation grid.
pub const DEFAULT_GRID_CAP: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CdfKind {
    Step,
    Smoothed,
}

/// Strictly increasing, finite evaluation points spanning `[y_lo, y_hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EvalGrid {
    points: Vec<f64>,
}

impl TryFrom<Vec<f64>> for EvalGrid {
    type Error = Error;

    fn try_from(points: Vec<f64>) -> Result<Self> {
        Self::new(points)
    }
}

impl From<EvalGrid> for Vec<f64> {
    fn from(g: EvalGrid) -> Self {
        g.points
    }
}

impl EvalGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidGrid("need at least 2 points".into()));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidGrid("non-finite point".into()));
        }
        if points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidGrid("points must be strictly increasing".into()));
        }
        Ok(Self { points })
    }

    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 2 || !(hi > lo) {
            return Err(Error::InvalidGrid(format!("uniform grid [{lo}, {hi}] with {n} points")));
        }
        let step = (hi - lo) / (n - 1) as f64;
        let mut points: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
        points[n - 1] = hi;
        Self::new(points)
    }

    /// Sorted distinct outcomes of the treated sample plus both endpoints,
    /// thinned by quantiles to at most `cap` points.
    pub fn from_treated_outcomes(ds: &Dataset, extension: f64, cap: usize) -> Result<Self> {
        let (ymin, ymax) = ds.outcome_range();
        let lo = ymin - extension;
        let hi = ymax + extension;
        let mut ys: Vec<f64> = ds
            .observations()
            .iter()
            .filter(|o| o.d == 1)
            .map(|o| o.y)
            .filter(|&y| y > lo && y < hi)
            .collect();
        ys.sort_by(f64::total_cmp);
        ys.dedup();
        let inner = cap.max(3) - 2;
        if ys.len() > inner {
            let n = ys.len();
            ys = (0..inner)
                .map(|k| ys[((k as f64) * (n - 1) as f64 / (inner - 1) as f64).round() as usize])
                .collect();
            ys.dedup();
        }
        let mut points = Vec::with_capacity(ys.len() + 2);
        points.push(lo);
        points.extend(ys);
        points.push(hi);
        Self::new(points)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn lo(&self) -> f64 {
        self.points[0]
    }

    pub fn hi(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    /// Index of the grid point closest to `y`.
    pub fn nearest(&self, y: f64) -> usize {
        let i = self.points.partition_point(|&p| p < y);
        if i == 0 {
            0
        } else if i == self.points.len() {
            i - 1
        } else if (self.points[i] - y) < (y - self.points[i - 1]) {
            i
        } else {
            i - 1
        }
    }
}

/// Covariate bandwidths per conditioning group plus the optional outcome
/// smoothing bandwidth `b_n`. Covariate vectors are empty when `x_dim = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bandwidths {
    /// `h_d` for `F(y | d, x)`, indexed by `d`.
    pub treatment_groups: [Vec<f64>; 2],
    /// `h'_d` for `F(y | d, z, x)`, indexed by `[z][d]`.
    pub instrument_cells: Vec<[Vec<f64>; 2]>,
    /// `h†` for the propensity score, indexed by `z`.
    pub propensity: Vec<Vec<f64>>,
    /// `b_n`; `None` for step estimators.
    pub outcome: Option<f64>,
}

impl Bandwidths {
    /// Bandwidths for data without covariates.
    pub fn unused(num_instruments: usize, outcome: Option<f64>) -> Self {
        Self {
            treatment_groups: [Vec::new(), Vec::new()],
            instrument_cells: vec![[Vec::new(), Vec::new()]; num_instruments],
            propensity: vec![Vec::new(); num_instruments],
            outcome,
        }
    }

    /// True when no covariate kernel is in use.
    pub fn covariates_unused(&self) -> bool {
        self.treatment_groups.iter().all(Vec::is_empty)
    }

    pub fn with_outcome(mut self, b: Option<f64>) -> Self {
        self.outcome = b;
        self
    }

    fn validate(&self, x_dim: usize, num_instruments: usize) -> Result<()> {
        let check = |h: &Vec<f64>, what: &str| -> Result<()> {
            if h.len() != x_dim {
                return Err(Error::InvalidParameter(format!(
                    "{what}: expected {x_dim} bandwidths, found {}",
                    h.len()
                )));
            }
            if h.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{what}: bandwidths must be positive")));
            }
            Ok(())
        };
        for h in &self.treatment_groups {
            check(h, "treatment-group bandwidth")?;
        }
        if self.instrument_cells.len() != num_instruments || self.propensity.len() != num_instruments {
            return Err(Error::InvalidParameter("bandwidth tables do not match instrument support".into()));
        }
        for cell in &self.instrument_cells {
            for h in cell {
                check(h, "instrument-cell bandwidth")?;
            }
        }
        for h in &self.propensity {
            check(h, "propensity bandwidth")?;
        }
        if let Some(b) = self.outcome {
            if !(b > 0.0) || !b.is_finite() {
                return Err(Error::InvalidParameter(format!("outcome bandwidth must be positive, got {b}")));
            }
        }
        Ok(())
    }
}

/// Outcome smoothing rule `1.06 * sd(Y) * n^(-1/3)`.
pub fn outcome_bandwidth_rule(ds: &Dataset) -> f64 {
    let ys: Vec<f64> = ds.observations().iter().map(|o| o.y).collect();
    let sd = sample_sd(&ys);
    let sd = if sd > 0.0 { sd } else { 1.0 };
    1.06 * sd * (ds.len() as f64).powf(-1.0 / 3.0)
}

fn silverman(ds: &Dataset, filter: impl Fn(&Observation) -> bool) -> Vec<f64> {
    let rows: Vec<&Observation> = ds.observations().iter().filter(|o| filter(o)).collect();
    let n = rows.len().max(1) as f64;
    (0..ds.x_dim())
        .map(|j| {
            let col: Vec<f64> = rows.iter().map(|o| o.x[j]).collect();
            let sd = sample_sd(&col);
            let sd = if sd > 0.0 { sd } else { 1.0 };
            1.06 * sd * n.powf(-0.2)
        })
        .collect()
}

/// Silverman-rule covariate bandwidths per conditioning group, and `b_n` when
/// `smoothing` is requested.
pub fn default_bandwidths(ds: &Dataset, smoothing: bool) -> Bandwidths {
    let num_z = ds.num_instruments();
    let outcome = smoothing.then(|| outcome_bandwidth_rule(ds));
    if ds.x_dim() == 0 {
        return Bandwidths::unused(num_z, outcome);
    }
    Bandwidths {
        treatment_groups: [silverman(ds, |o| o.d == 0), silverman(ds, |o| o.d == 1)],
        instrument_cells: (0..num_z)
            .map(|z| {
                [
                    silverman(ds, |o| o.d == 0 && o.z_index == z),
                    silverman(ds, |o| o.d == 1 && o.z_index == z),
                ]
            })
            .collect(),
        propensity: (0..num_z).map(|z| silverman(ds, |o| o.z_index == z)).collect(),
        outcome,
    }
}

/// A CDF tabulated on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfEstimate {
    pub grid: EvalGrid,
    pub values: Vec<f64>,
    pub kind: CdfKind,
    pub covariate_bandwidth: Vec<f64>,
    pub outcome_bandwidth: Option<f64>,
}

fn kernel_sample(
    ds: &Dataset,
    x: Option<&[f64]>,
    h: &[f64],
    filter: impl Fn(&Observation) -> bool,
) -> WeightedSample {
    let pairs = ds
        .observations()
        .iter()
        .filter(|o| filter(o))
        .map(|o| {
            let w = match x {
                Some(x) if !h.is_empty() => epanechnikov(x, &o.x, h),
                _ => 1.0,
            };
            (o.y, w)
        })
        .collect();
    WeightedSample::new(pairs)
}

fn check_x(ds: &Dataset, x: Option<&[f64]>) -> Result<()> {
    match x {
        Some(x) if x.len() != ds.x_dim() => Err(Error::DimensionMismatch(format!(
            "covariate point has {} components, dataset has {}",
            x.len(),
            ds.x_dim()
        ))),
        None if ds.x_dim() > 0 => Err(Error::InvalidParameter(
            "dataset has covariates; an evaluation point x is required".into(),
        )),
        _ => Ok(()),
    }
}

fn conditional_sample(
    ds: &Dataset,
    d: u8,
    z: Option<usize>,
    x: Option<&[f64]>,
    bw: &Bandwidths,
) -> Result<(WeightedSample, Vec<f64>)> {
    check_x(ds, x)?;
    let h = match z {
        Some(z) => bw.instrument_cells[z][d as usize].clone(),
        None => bw.treatment_groups[d as usize].clone(),
    };
    let count = ds
        .observations()
        .iter()
        .filter(|o| o.d == d && z.map_or(true, |z| o.z_index == z))
        .count();
    if count == 0 {
        return Err(Error::EmptyCell { d, z: z.unwrap_or(usize::MAX) });
    }
    let sample = kernel_sample(ds, x, &h, |o| o.d == d && z.map_or(true, |z| o.z_index == z));
    if !(sample.total_weight() > 0.0) {
        return Err(Error::ZeroKernelWeight(format!("d={d}, z={z:?}")));
    }
    Ok((sample, h))
}

fn conditional_cdf(
    ds: &Dataset,
    d: u8,
    z: Option<usize>,
    x: Option<&[f64]>,
    bw: &Bandwidths,
    grid: &EvalGrid,
    kind: CdfKind,
) -> Result<CdfEstimate> {
    bw.validate(ds.x_dim(), ds.num_instruments())?;
    let b = match kind {
        CdfKind::Smoothed => Some(bw.outcome.ok_or_else(|| {
            Error::InvalidParameter("smoothed estimator requires an outcome bandwidth".into())
        })?),
        CdfKind::Step => None,
    };
    let (sample, h) = conditional_sample(ds, d, z, x, bw)?;
    let total = sample.total_weight();
    let values = grid
        .points()
        .iter()
        .map(|&y| match b {
            Some(b) => sample.smooth_mass(y, b)[0] / total,
            None => sample.step_mass(y) / total,
        })
        .collect();
    Ok(CdfEstimate {
        grid: grid.clone(),
        values,
        kind,
        covariate_bandwidth: h,
        outcome_bandwidth: b,
    })
}

/// Kernel-weighted empirical CDF of `Y` given `D = d` (and `Z = z` when given).
pub fn cdf_step(
    ds: &Dataset,
    d: u8,
    z: Option<usize>,
    x: Option<&[f64]>,
    bw: &Bandwidths,
    grid: &EvalGrid,
) -> Result<CdfEstimate> {
    conditional_cdf(ds, d, z, x, bw, grid, CdfKind::Step)
}

/// Gaussian-smoothed counterpart of [`cdf_step`] with bandwidth `bw.outcome`.
pub fn cdf_smoothed(
    ds: &Dataset,
    d: u8,
    z: Option<usize>,
    x: Option<&[f64]>,
    bw: &Bandwidths,
    grid: &EvalGrid,
) -> Result<CdfEstimate> {
    conditional_cdf(ds, d, z, x, bw, grid, CdfKind::Smoothed)
}

/// Kernel estimate of `P(D = 1 | Z = z, x)`.
pub fn propensity(ds: &Dataset, z: usize, x: Option<&[f64]>, bw: &Bandwidths) -> Result<f64> {
    check_x(ds, x)?;
    let h = &bw.propensity[z];
    let mut num = 0.0;
    let mut den = 0.0;
    let mut count = 0usize;
    for o in ds.observations().iter().filter(|o| o.z_index == z) {
        count += 1;
        let w = match x {
            Some(x) if !h.is_empty() => epanechnikov(x, &o.x, h),
            _ => 1.0,
        };
        den += w;
        if o.d == 1 {
            num += w;
        }
    }
    if count == 0 {
        return Err(Error::EmptyInstrumentCell(z));
    }
    if !(den > 0.0) {
        return Err(Error::ZeroKernelWeight(format!("propensity z={z}")));
    }
    Ok(num / den)
}

fn arm_weight(p: f64, d: u8) -> f64 {
    if d == 1 {
        p
    } else {
        1.0 - p
    }
}

/// `Δ_dz(· | x)` tabulated on `grid`; identically zero for the reference value.
pub fn delta_dz(
    ds: &Dataset,
    d: u8,
    z: usize,
    x: Option<&[f64]>,
    bw: &Bandwidths,
    grid: &EvalGrid,
    kind: CdfKind,
) -> Result<Vec<f64>> {
    let zl = ds.support().reference_index();
    if z == zl {
        return Ok(vec![0.0; grid.len()]);
    }
    let fz = conditional_cdf(ds, d, Some(z), x, bw, grid, kind)?;
    let fl = conditional_cdf(ds, d, Some(zl), x, bw, grid, kind)?;
    let wz = arm_weight(propensity(ds, z, x, bw)?, d);
    let wl = arm_weight(propensity(ds, zl, x, bw)?, d);
    Ok(fz.values.iter().zip(&fl.values).map(|(a, b)| a * wz - b * wl).collect())
}

/// The program's inputs at one `(x, y0)`: `Δ_0(y0 | x)`, `Δ_1(· | x)` and
/// `F(· | 1, x)` on a common grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientTriple {
    pub y0: f64,
    pub x: Vec<f64>,
    pub kind: CdfKind,
    pub grid: EvalGrid,
    /// `Δ_0(y0 | x)`, one entry per non-reference instrument value.
    pub delta0_at_y0: Vec<f64>,
    /// `Δ_1(· | x)` components, each tabulated on `grid`.
    pub delta1: Vec<Vec<f64>>,
    /// `F(· | D = 1, x)` tabulated on `grid`.
    pub f_treated: Vec<f64>,
}

impl CoefficientTriple {
    /// Number of decision variables `L = 1 + (L - 1)`.
    pub fn num_vars(&self) -> usize {
        self.delta0_at_y0.len() + 1
    }

    pub fn num_contrasts(&self) -> usize {
        self.delta0_at_y0.len()
    }

    /// Constraint row `(1, Δ_1(y_m))`.
    pub fn row(&self, m: usize) -> Vec<f64> {
        let mut r = Vec::with_capacity(self.num_vars());
        r.push(1.0);
        r.extend(self.delta1.iter().map(|c| c[m]));
        r
    }

    /// Objective `(1, -Δ_0(y0))` of the upper-bound program.
    pub fn objective(&self) -> Vec<f64> {
        let mut c = Vec::with_capacity(self.num_vars());
        c.push(1.0);
        c.extend(self.delta0_at_y0.iter().map(|v| -v));
        c
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.grid.len();
        if self.f_treated.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "F has {} values for a grid of {m}",
                self.f_treated.len()
            )));
        }
        if self.delta1.len() != self.delta0_at_y0.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} Δ1 components but {} Δ0 components",
                self.delta1.len(),
                self.delta0_at_y0.len()
            )));
        }
        for (k, c) in self.delta1.iter().enumerate() {
            if c.len() != m {
                return Err(Error::DimensionMismatch(format!(
                    "Δ1 component {k} has {} values for a grid of {m}",
                    c.len()
                )));
            }
        }
        let all = self.delta1.iter().flatten().chain(&self.delta0_at_y0).chain(&self.f_treated);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite coefficient".into()));
        }
        Ok(())
    }
}

/// Value and first two `y`-derivatives of the coefficient functions at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientPoint {
    pub f: [f64; 3],
    pub delta1: Vec<[f64; 3]>,
}

/// Continuous view of the coefficient functions, used where the program has to
/// be evaluated off the tabulation grid.
pub trait CoefficientFunctions: Send + Sync {
    fn num_contrasts(&self) -> usize;

    /// `F(y | 1, x)` and `Δ_1(y | x)` with derivatives.
    fn at(&self, y: f64) -> CoefficientPoint;

    /// `Δ_0(y0 | x)`.
    fn delta0(&self, y0: f64) -> Vec<f64>;

    /// Whether `at` returns meaningful derivatives.
    fn is_smooth(&self) -> bool;

    /// Tabulates the program inputs on `grid`.
    fn triple_on(&self, grid: &EvalGrid, y0: f64) -> CoefficientTriple {
        let l1 = self.num_contrasts();
        let mut delta1 = vec![Vec::with_capacity(grid.len()); l1];
        let mut f = Vec::with_capacity(grid.len());
        for &y in grid.points() {
            let p = self.at(y);
            f.push(p.f[0]);
            for (k, v) in p.delta1.iter().enumerate() {
                delta1[k].push(v[0]);
            }
        }
        CoefficientTriple {
            y0,
            x: Vec::new(),
            kind: if self.is_smooth() { CdfKind::Smoothed } else { CdfKind::Step },
            grid: grid.clone(),
            delta0_at_y0: self.delta0(y0),
            delta1,
            f_treated: f,
        }
    }
}

/// All first-stage estimates for one covariate point, tabulated once on the
/// grid; triples for individual `y0` values are then cheap.
#[derive(Debug, Clone)]
pub struct CoefficientModel {
    kind: CdfKind,
    outcome_bandwidth: Option<f64>,
    x: Vec<f64>,
    grid: EvalGrid,
    contrast_z: Vec<usize>,
    reference_z: usize,
    treated: WeightedSample,
    /// Kernel samples indexed by `[z][d]`.
    cells: Vec<[WeightedSample; 2]>,
    propensities: Vec<f64>,
    f_treated: Vec<f64>,
    delta1: Vec<Vec<f64>>,
    x_at_boundary: bool,
}

impl CoefficientModel {
    pub fn estimate(
        ds: &Dataset,
        x: Option<&[f64]>,
        grid: &EvalGrid,
        bw: &Bandwidths,
        kind: CdfKind,
    ) -> Result<Self> {
        check_x(ds, x)?;
        bw.validate(ds.x_dim(), ds.num_instruments())?;
        let b = match kind {
            CdfKind::Smoothed => Some(bw.outcome.ok_or_else(|| {
                Error::InvalidParameter("smoothed estimator requires an outcome bandwidth".into())
            })?),
            CdfKind::Step => None,
        };
        let counts = ds.cell_counts();
        for (d, z, n) in counts.cells() {
            if n < 2 {
                return Err(Error::SparseCell { d, z, count: n });
            }
        }
        let support: &InstrumentSupport = ds.support();
        let (treated, _) = conditional_sample(ds, 1, None, x, bw)?;
        let mut cells = Vec::with_capacity(support.len());
        let mut propensities = Vec::with_capacity(support.len());
        for z in 0..support.len() {
            let (s0, _) = conditional_sample(ds, 0, Some(z), x, bw)?;
            let (s1, _) = conditional_sample(ds, 1, Some(z), x, bw)?;
            cells.push([s0, s1]);
            propensities.push(propensity(ds, z, x, bw)?);
        }
        let x_at_boundary = match x {
            Some(x) if ds.x_dim() > 0 => (0..ds.x_dim()).any(|j| {
                let (lo, hi) = ds
                    .observations()
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), o| (a.min(o.x[j]), b.max(o.x[j])));
                let h = bw.propensity.iter().map(|h| h[j]).fold(0.0, f64::max);
                x[j] - lo < h || hi - x[j] < h
            }),
            _ => false,
        };
        let mut model = Self {
            kind,
            outcome_bandwidth: b,
            x: x.map(<[f64]>::to_vec).unwrap_or_default(),
            grid: grid.clone(),
            contrast_z: support.contrast_indices(),
            reference_z: support.reference_index(),
            treated,
            cells,
            propensities,
            f_treated: Vec::new(),
            delta1: Vec::new(),
            x_at_boundary,
        };
        model.f_treated = grid.points().iter().map(|&y| model.treated_cdf(y)[0]).collect();
        model.delta1 = (0..model.contrast_z.len())
            .map(|k| grid.points().iter().map(|&y| model.delta_component(1, k, y)[0]).collect())
            .collect();
        Ok(model)
    }

    fn mass(&self, s: &WeightedSample, y: f64) -> [f64; 3] {
        let t = s.total_weight();
        match self.outcome_bandwidth {
            Some(b) => {
                let m = s.smooth_mass(y, b);
                [m[0] / t, m[1] / t, m[2] / t]
            }
            None => [s.step_mass(y) / t, 0.0, 0.0],
        }
    }

    fn treated_cdf(&self, y: f64) -> [f64; 3] {
        self.mass(&self.treated, y)
    }

    /// `Δ_{d, z_k}(y)` and derivatives for contrast component `k`.
    fn delta_component(&self, d: u8, k: usize, y: f64) -> [f64; 3] {
        let z = self.contrast_z[k];
        let zl = self.reference_z;
        let a = self.mass(&self.cells[z][d as usize], y);
        let b = self.mass(&self.cells[zl][d as usize], y);
        let wa = arm_weight(self.propensities[z], d);
        let wb = arm_weight(self.propensities[zl], d);
        [a[0] * wa - b[0] * wb, a[1] * wa - b[1] * wb, a[2] * wa - b[2] * wb]
    }

    pub fn kind(&self) -> CdfKind {
        self.kind
    }

    pub fn grid(&self) -> &EvalGrid {
        &self.grid
    }

    pub fn propensities(&self) -> &[f64] {
        &self.propensities
    }

    pub fn x_at_boundary(&self) -> bool {
        self.x_at_boundary
    }

    pub fn f_treated(&self) -> &[f64] {
        &self.f_treated
    }

    pub fn delta1(&self) -> &[Vec<f64>] {
        &self.delta1
    }

    /// `τ`-quantile of `Y` among the treated (kernel-weighted when `x` is given).
    pub fn treated_quantile(&self, tau: f64) -> f64 {
        weighted_quantile(&self.treated.pairs(), tau)
    }

    pub fn triple(&self, y0: f64) -> CoefficientTriple {
        CoefficientTriple {
            y0,
            x: self.x.clone(),
            kind: self.kind,
            grid: self.grid.clone(),
            delta0_at_y0: CoefficientFunctions::delta0(self, y0),
            delta1: self.delta1.clone(),
            f_treated: self.f_treated.clone(),
        }
    }
}

impl CoefficientFunctions for CoefficientModel {
    fn num_contrasts(&self) -> usize {
        self.contrast_z.len()
    }

    fn at(&self, y: f64) -> CoefficientPoint {
        CoefficientPoint {
            f: self.treated_cdf(y),
            delta1: (0..self.contrast_z.len()).map(|k| self.delta_component(1, k, y)).collect(),
        }
    }

    fn delta0(&self, y0: f64) -> Vec<f64> {
        (0..self.contrast_z.len()).map(|k| self.delta_component(0, k, y0)[0]).collect()
    }

    fn is_smooth(&self) -> bool {
        self.kind == CdfKind::Smoothed
    }
}

/// Assembles the coefficient triple at `(x, y0)`.
pub fn coefficient_triple(
    ds: &Dataset,
    x: Option<&[f64]>,
    y0: f64,
    grid: &EvalGrid,
    bw: &Bandwidths,
    kind: CdfKind,
) -> Result<CoefficientTriple> {
    Ok(CoefficientModel::estimate(ds, x, grid, bw, kind)?.triple(y0))
}

/// Unweighted `τ`-quantile of the treated outcomes.
pub fn treated_quantile(ds: &Dataset, tau: f64) -> f64 {
    let mut ys: Vec<f64> = ds.observations().iter().filter(|o| o.d == 1).map(|o| o.y).collect();
    ys.sort_by(f64::total_cmp);
    sorted_quantile(&ys, tau)
}

/// Mean outcome, used by summaries.
pub fn outcome_mean(ds: &Dataset) -> f64 {
    let ys: Vec<f64> = ds.observations().iter().map(|o| o.y).collect();
    mean(&ys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::norm_cdf;

    fn ds(rows: &[(f64, u8, f64)]) -> Dataset {
        Dataset::from_raw(rows.iter().map(|&(y, d, z)| (y, d, z, vec![])).collect(), None).unwrap()
    }

    fn grid(points: &[f64]) -> EvalGrid {
        EvalGrid::new(points.to_vec()).unwrap()
    }

    #[test]
    fn step_cdf_is_empirical_cdf() {
        let data = ds(&[(1.0, 1, 0.0), (2.0, 1, 0.0), (5.0, 0, 1.0), (6.0, 1, 1.0)]);
        let bw = default_bandwidths(&data, false);
        let g = grid(&[0.0, 1.5, 2.0, 10.0]);
        let f = cdf_step(&data, 1, Some(0), None, &bw, &g).unwrap();
        assert_eq!(f.values, vec![0.0, 0.5, 1.0, 1.0]);
        let all = cdf_step(&data, 1, None, None, &bw, &g).unwrap();
        assert_eq!(all.values, vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
    }

    #[test]
    fn smoothed_cdf_values() {
        let single = ds(&[(0.0, 1, 0.0), (3.0, 0, 1.0)]);
        let bw = Bandwidths::unused(2, Some(1.0));
        let f = cdf_smoothed(&single, 1, Some(0), None, &bw, &grid(&[-1.0, 0.0])).unwrap();
        assert!((f.values[1] - 0.5).abs() < 1e-15);

        let pair = ds(&[(-1.0, 1, 0.0), (1.0, 1, 0.0), (3.0, 0, 1.0)]);
        let bw = Bandwidths::unused(2, Some(0.5));
        let f = cdf_smoothed(&pair, 1, Some(0), None, &bw, &grid(&[0.0, 1.0])).unwrap();
        let expect = (norm_cdf(2.0) + norm_cdf(-2.0)) / 2.0;
        assert!((f.values[0] - expect).abs() < 1e-15);
        assert!((f.values[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn smoothed_converges_to_step_off_data() {
        let data = ds(&[(0.3, 1, 0.0), (1.7, 1, 0.0), (0.9, 1, 0.0), (2.0, 0, 1.0), (2.5, 1, 1.0)]);
        let g = grid(&[0.0, 0.5, 1.0, 1.5, 2.0]);
        let step = cdf_step(&data, 1, Some(0), None, &Bandwidths::unused(2, None), &g).unwrap();
        let smooth = cdf_smoothed(&data, 1, Some(0), None, &Bandwidths::unused(2, Some(1e-6)), &g).unwrap();
        for (a, b) in step.values.iter().zip(&smooth.values) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn propensity_values() {
        let data = ds(&[(1.0, 1, 0.0), (1.0, 1, 0.0), (1.0, 0, 0.0), (1.0, 0, 0.0), (2.0, 1, 1.0), (3.0, 1, 1.0)]);
        let bw = default_bandwidths(&data, false);
        assert_eq!(propensity(&data, 0, None, &bw).unwrap(), 0.5);
        assert_eq!(propensity(&data, 1, None, &bw).unwrap(), 1.0);
    }

    #[test]
    fn empty_cell_is_an_error() {
        let data = ds(&[(1.0, 1, 0.0), (2.0, 0, 0.0), (3.0, 0, 1.0)]);
        let bw = default_bandwidths(&data, false);
        let g = grid(&[0.0, 4.0]);
        assert!(matches!(cdf_step(&data, 1, Some(1), None, &bw, &g), Err(Error::EmptyCell { d: 1, z: 1 })));
        assert!(matches!(
            CoefficientModel::estimate(&data, None, &g, &bw, CdfKind::Step),
            Err(Error::SparseCell { .. })
        ));
    }

    #[test]
    fn delta_limits() {
        let data = ds(&[
            (1.0, 1, 0.0),
            (2.0, 0, 0.0),
            (3.0, 1, 0.0),
            (0.5, 0, 0.0),
            (1.5, 1, 1.0),
            (2.5, 1, 1.0),
            (3.5, 0, 1.0),
            (0.2, 1, 1.0),
        ]);
        let bw = default_bandwidths(&data, false);
        let g = grid(&[-1.0, 0.0, 1.2, 2.2, 10.0]);
        let zero = delta_dz(&data, 1, 1, None, &bw, &g, CdfKind::Step).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        let d1 = delta_dz(&data, 1, 0, None, &bw, &g, CdfKind::Step).unwrap();
        assert_eq!(d1[0], 0.0);
        let p0 = propensity(&data, 0, None, &bw).unwrap();
        let p1 = propensity(&data, 1, None, &bw).unwrap();
        assert!((d1[4] - (p0 - p1)).abs() < 1e-15);
        let d0 = delta_dz(&data, 0, 0, None, &bw, &g, CdfKind::Step).unwrap();
        assert!((d0[4] + (p0 - p1)).abs() < 1e-15);
    }

    #[test]
    fn triple_dimensions_and_joint_identity() {
        let data = ds(&[
            (1.0, 1, 0.0),
            (2.0, 0, 0.0),
            (3.0, 1, 0.0),
            (0.5, 0, 0.0),
            (1.5, 1, 1.0),
            (2.5, 1, 1.0),
            (3.5, 0, 1.0),
            (0.2, 0, 1.0),
        ]);
        let bw = default_bandwidths(&data, false);
        let g = EvalGrid::from_treated_outcomes(&data, 0.1, 64).unwrap();
        let t = coefficient_triple(&data, None, 2.0, &g, &bw, CdfKind::Step).unwrap();
        t.validate().unwrap();
        assert_eq!(t.delta0_at_y0.len(), 1);
        assert_eq!(t.delta1.len(), 1);
        // joint sub-distribution differences computed directly
        for (m, &y) in g.points().iter().enumerate() {
            let joint = |z: f64| {
                let nz = data.observations().iter().filter(|o| data.support().values()[o.z_index] == z).count();
                let hits = data
                    .observations()
                    .iter()
                    .filter(|o| data.support().values()[o.z_index] == z && o.d == 1 && o.y <= y)
                    .count();
                hits as f64 / nz as f64
            };
            assert!((t.delta1[0][m] - (joint(0.0) - joint(1.0))).abs() < 1e-12);
        }
    }

    #[test]
    fn bandwidth_rules() {
        let rows: Vec<(f64, u8, f64, Vec<f64>)> =
            (0..1000).map(|i| (i as f64, (i % 2) as u8, (i % 3 == 0) as u8 as f64, vec![])).collect();
        let data = Dataset::from_raw(rows.clone(), None).unwrap();
        let bw = default_bandwidths(&data, true);
        assert!(bw.covariates_unused());
        let sd = sample_sd(&rows.iter().map(|r| r.0).collect::<Vec<_>>());
        let expect = 1.06 * sd * 1000f64.powf(-1.0 / 3.0);
        assert!((bw.outcome.unwrap() - expect).abs() < 1e-12);
        let doubled = Dataset::from_raw(rows.iter().map(|r| (2.0 * r.0, r.1, r.2, vec![])).collect(), None).unwrap();
        let ratio = default_bandwidths(&doubled, true).outcome.unwrap() / bw.outcome.unwrap();
        assert!((ratio - 2.0).abs() < 1e-12);
        assert!(default_bandwidths(&data, false).outcome.is_none());
    }

    #[test]
    fn covariate_kernel_localizes() {
        let mut rows = Vec::new();
        for i in 0..200 {
            let x = i as f64 / 200.0;
            let z = (i % 2) as f64;
            let d = ((i / 2) % 2) as u8;
            rows.push((if x < 0.5 { 0.0 } else { 10.0 }, d, z, vec![x]));
        }
        let data = Dataset::from_raw(rows, None).unwrap();
        let mut bw = default_bandwidths(&data, false);
        bw.treatment_groups = [vec![0.1], vec![0.1]];
        let g = grid(&[-1.0, 5.0, 11.0]);
        let left = cdf_step(&data, 1, None, Some(&[0.2]), &bw, &g).unwrap();
        assert_eq!(left.values, vec![0.0, 1.0, 1.0]);
        let right = cdf_step(&data, 1, None, Some(&[0.8]), &bw, &g).unwrap();
        assert_eq!(right.values, vec![0.0, 0.0, 1.0]);
        assert!(matches!(
            cdf_step(&data, 1, None, Some(&[5.0]), &bw, &g),
            Err(Error::ZeroKernelWeight(_))
        ));
    }

    #[test]
    fn default_grid_is_capped() {
        let rows: Vec<(f64, u8, f64, Vec<f64>)> =
            (0..5000).map(|i| ((i as f64).sin() * 3.0, 1, (i % 2) as f64, vec![])).collect();
        let data = Dataset::from_raw(rows, None).unwrap();
        let g = EvalGrid::from_treated_outcomes(&data, 0.5, 256).unwrap();
        assert!(g.len() <= 256);
        let (lo, hi) = data.outcome_range();
        assert_eq!(g.lo(), lo - 0.5);
        assert_eq!(g.hi(), hi + 0.5);
    }
}
