//! Monte Carlo design with a binomial instrument and correlated selection,
//! its quadrature truth oracle, and replication drivers.
//!
//! ```text
//! (U, η) ~ N(0, [1 ρ; ρ 1]),  U1 = U + ξ1,  U0 = U1 + ν
//! Z = Bin(L - 1, p) / (L - 1),  D = 1(η <= π0 + π1 Z)
//! Y1 = 2 U1,  Y0 = 1 + U0,  Y = D Y1 + (1 - D) Y0
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{curve_from_triples, BoundConfig, BoundCurve, TrustRule};
use crate::dataset::{Dataset, InstrumentSupport, Observation};
use crate::error::{Error, Result};
use crate::estimators::{CoefficientFunctions, CoefficientPoint, CoefficientTriple, EvalGrid};
use crate::floats;
use crate::numeric::{integrate, norm_cdf, norm_pdf, percentile};

/// Lower integration limit standing in for `-inf` on the selection index.
const E_LO: f64 = -9.0;
const QUAD_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    pub n: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub p: f64,
    pub pi0: f64,
    pub pi1: f64,
    pub rho: f64,
    pub sigma_xi1: f64,
    pub sigma_nu: f64,
    pub seed: u64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self { n: 100_000, l: 2, p: 0.5, pi0: 0.2, pi1: 0.5, rho: 0.8, sigma_xi1: 1.0, sigma_nu: 1.0, seed: 0 }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.n < 1 {
            return bad("n must be at least 1".into());
        }
        if self.l < 2 {
            return bad(format!("L must be at least 2, got {}", self.l));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return bad(format!("p must lie in (0, 1), got {}", self.p));
        }
        if !(self.rho.abs() < 1.0) {
            return bad(format!("|rho| must be below 1, got {}", self.rho));
        }
        if !(self.sigma_xi1 > 0.0 && self.sigma_nu > 0.0) {
            return bad("shock standard deviations must be positive".into());
        }
        Ok(())
    }

    /// Instrument support `k / (L - 1)`, `k = 0..L-1`.
    pub fn support(&self) -> Vec<f64> {
        (0..self.l).map(|k| k as f64 / (self.l - 1) as f64).collect()
    }

    /// Binomial probabilities of the support points.
    pub fn weights(&self) -> Vec<f64> {
        let m = self.l - 1;
        let mut w = Vec::with_capacity(self.l);
        let mut binom = 1.0;
        for k in 0..=m {
            if k > 0 {
                binom = binom * (m + 1 - k) as f64 / k as f64;
            }
            w.push(binom * self.p.powi(k as i32) * (1.0 - self.p).powi((m - k) as i32));
        }
        w
    }

    fn cutoff(&self, z: f64) -> f64 {
        self.pi0 + self.pi1 * z
    }

    fn sd_treated(&self) -> f64 {
        (1.0 - self.rho * self.rho + self.sigma_xi1.powi(2)).sqrt()
    }

    fn sd_untreated(&self) -> f64 {
        (1.0 - self.rho * self.rho + self.sigma_xi1.powi(2) + self.sigma_nu.powi(2)).sqrt()
    }
}

/// Mixes `(seed, a, b)` into an independent stream seed.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed;
    for v in [a, b] {
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(v.wrapping_mul(0xD1B5_4A32_D192_ED03));
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

/// One sample of size `params.n` drawn with `params.seed`.
pub fn dgp_sample(params: &SimParams) -> Result<Dataset> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let m = (params.l - 1) as u64;
    let binom = Binomial::new(m, params.p).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let support = params.support();
    let cov = (1.0 - params.rho * params.rho).sqrt();
    let mut obs = Vec::with_capacity(params.n);
    for _ in 0..params.n {
        let eta: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let xi1: f64 = rng.sample(StandardNormal);
        let nu: f64 = rng.sample(StandardNormal);
        let k = binom.sample(&mut rng) as usize;
        let u = params.rho * eta + cov * e2;
        let u1 = u + params.sigma_xi1 * xi1;
        let u0 = u1 + params.sigma_nu * nu;
        let d = (eta <= params.cutoff(support[k])) as u8;
        let y = if d == 1 { 2.0 * u1 } else { 1.0 + u0 };
        obs.push(Observation { y, d, z_index: k, x: Vec::new() });
    }
    Dataset::new(obs, InstrumentSupport::new(support)?, 0)
}

/// `F_{Y0|D=1}(y0)` by quadrature over the selection index.
pub fn truth_cdf(y0: f64, params: &SimParams) -> Result<f64> {
    params.validate()?;
    let s0 = params.sd_untreated();
    let mut num = 0.0;
    let mut den = 0.0;
    for (z, w) in params.support().into_iter().zip(params.weights()) {
        let c = params.cutoff(z);
        let inner = |e: f64| norm_pdf(e) * norm_cdf((y0 - 1.0 - params.rho * e) / s0);
        num += w * integrate(inner, E_LO.min(c), c, QUAD_TOL)?;
        den += w * norm_cdf(c);
    }
    Ok((num / den).clamp(0.0, 1.0))
}

/// Quantile of [`truth_cdf`] by bisection.
pub fn truth_quantile(tau: f64, params: &SimParams) -> Result<f64> {
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if truth_cdf(mid, params)? >= tau {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok(hi)
}

/// Quantile of the treated outcome `Y1 | D = 1` by bisection.
pub fn treated_quantile_truth(tau: f64, params: &SimParams) -> Result<f64> {
    let pop = PopulationModel::new(params.clone())?;
    let (mut lo, mut hi) = (-40.0, 40.0);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if pop.at(mid).f[0] >= tau {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Population coefficient functions of the design, computed by quadrature.
#[derive(Debug, Clone)]
pub struct PopulationModel {
    params: SimParams,
    treated_share: f64,
}

impl PopulationModel {
    pub fn new(params: SimParams) -> Result<Self> {
        params.validate()?;
        let treated_share = params
            .support()
            .into_iter()
            .zip(params.weights())
            .map(|(z, w)| w * norm_cdf(params.cutoff(z)))
            .sum();
        Ok(Self { params, treated_share })
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    /// `∫_a^b φ(e) g((t - ρe)/s) de / s^k` for `g = Φ, φ, φ'`.
    fn kernel_integrals(&self, t: f64, s: f64, scale: f64, a: f64, b: f64) -> [f64; 3] {
        if b <= a {
            return [0.0; 3];
        }
        let rho = self.params.rho;
        let f0 = |e: f64| norm_pdf(e) * norm_cdf((t - rho * e) / s);
        let f1 = |e: f64| norm_pdf(e) * norm_pdf((t - rho * e) / s);
        let f2 = |e: f64| {
            let u = (t - rho * e) / s;
            -norm_pdf(e) * u * norm_pdf(u)
        };
        let q = |f: &dyn Fn(f64) -> f64| integrate(f, a, b, QUAD_TOL).unwrap_or(f64::NAN);
        [q(&f0), q(&f1) * scale / s, q(&f2) * (scale / s).powi(2)]
    }

    /// `P(Y <= y, D = 1 | Z = z)` with two derivatives.
    fn joint_treated(&self, y: f64, a: f64, b: f64) -> [f64; 3] {
        self.kernel_integrals(y / 2.0, self.params.sd_treated(), 0.5, a, b)
    }

    fn joint_untreated(&self, y: f64, a: f64, b: f64) -> [f64; 3] {
        self.kernel_integrals(y - 1.0, self.params.sd_untreated(), 1.0, a, b)
    }

    fn cutoffs(&self) -> Vec<f64> {
        self.params.support().into_iter().map(|z| self.params.cutoff(z)).collect()
    }

    /// Tabulates the program inputs on `grid` in parallel.
    pub fn tabulate(&self, grid: &EvalGrid) -> PopulationTable {
        let points: Vec<CoefficientPoint> = grid.points().par_iter().map(|&y| self.at(y)).collect();
        PopulationTable { grid: grid.clone(), points }
    }
}

impl CoefficientFunctions for PopulationModel {
    fn num_contrasts(&self) -> usize {
        self.params.l - 1
    }

    fn at(&self, y: f64) -> CoefficientPoint {
        let cuts = self.cutoffs();
        let weights = self.params.weights();
        let cl = cuts[cuts.len() - 1];
        let mut f = [0.0; 3];
        for (c, w) in cuts.iter().zip(&weights) {
            let j = self.joint_treated(y, E_LO.min(*c), *c);
            for i in 0..3 {
                f[i] += w * j[i] / self.treated_share;
            }
        }
        let delta1 = cuts[..cuts.len() - 1]
            .iter()
            .map(|&c| {
                let j = self.joint_treated(y, c, cl);
                [-j[0], -j[1], -j[2]]
            })
            .collect();
        CoefficientPoint { f, delta1 }
    }

    fn delta0(&self, y0: f64) -> Vec<f64> {
        let cuts = self.cutoffs();
        let cl = cuts[cuts.len() - 1];
        cuts[..cuts.len() - 1].iter().map(|&c| self.joint_untreated(y0, c, cl)[0]).collect()
    }

    fn is_smooth(&self) -> bool {
        true
    }
}

/// Population coefficients tabulated once on a grid.
#[derive(Debug, Clone)]
pub struct PopulationTable {
    pub grid: EvalGrid,
    pub points: Vec<CoefficientPoint>,
}

impl PopulationTable {
    pub fn triple(&self, model: &PopulationModel, y0: f64) -> CoefficientTriple {
        let l1 = model.num_contrasts();
        CoefficientTriple {
            y0,
            x: Vec::new(),
            kind: crate::estimators::CdfKind::Smoothed,
            grid: self.grid.clone(),
            delta0_at_y0: model.delta0(y0),
            delta1: (0..l1).map(|k| self.points.iter().map(|p| p.delta1[k][0]).collect()).collect(),
            f_treated: self.points.iter().map(|p| p.f[0]).collect(),
        }
    }
}

/// Bound curve from the population coefficients on `grid`.
pub fn population_curve(params: &SimParams, grid: &EvalGrid, y0_grid: &[f64], cfg: &BoundConfig) -> Result<BoundCurve> {
    let model = PopulationModel::new(params.clone())?;
    let table = model.tabulate(grid);
    curve_from_triples(|y0| Ok(table.triple(&model, y0)), y0_grid, cfg).map(|(c, _)| c)
}

/// Uniform `y0` grid specification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { lo: -6.0, hi: 6.0, points: 49 }
    }
}

impl GridSpec {
    pub fn values(&self) -> Vec<f64> {
        if self.points < 2 {
            return vec![self.lo];
        }
        let step = (self.hi - self.lo) / (self.points - 1) as f64;
        (0..self.points).map(|i| self.lo + step * i as f64).collect()
    }
}

/// Quartiles of the counterfactual CDF in the default design.
pub const STUDY_TRUSTED: (f64, f64) = (-0.520, 1.688);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub params: SimParams,
    #[serde(rename = "R")]
    pub r: usize,
    pub n_list: Vec<usize>,
    pub l_list: Vec<usize>,
    pub y0_grid: GridSpec,
    pub level: f64,
    pub bounds: BoundConfig,
    /// Sample size of the single-draw runs across `l_list`.
    pub n_large: usize,
    /// Dense constraint grid for the population reference bound.
    pub reference_grid: GridSpec,
}

impl Default for StudyConfig {
    fn default() -> Self {
        let bounds = BoundConfig {
            trust: TrustRule::Interval { lo: STUDY_TRUSTED.0, hi: STUDY_TRUSTED.1 },
            fallback: true,
            ..BoundConfig::default()
        };
        Self {
            params: SimParams::default(),
            r: 200,
            n_list: vec![1000, 2000, 4000],
            l_list: vec![2, 3, 4, 5],
            y0_grid: GridSpec::default(),
            level: 0.95,
            bounds,
            n_large: 100_000,
            reference_grid: GridSpec { lo: -12.0, hi: 12.0, points: 2001 },
        }
    }
}

impl StudyConfig {
    /// Parses JSON, or TOML when the path ends in `.toml`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::InvalidParameter(format!("config: {e}")))
        } else {
            Ok(serde_json::from_str(&text)?)
        }
    }

    /// Two replications at `N = 200`.
    pub fn smoke() -> Self {
        Self { r: 2, n_list: vec![200], l_list: vec![2], n_large: 2000, ..Self::default() }
    }
}

/// Pointwise summaries over replications for one sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeSummary {
    pub n: usize,
    pub replications: usize,
    pub failed_replications: usize,
    #[serde(with = "floats::vector")]
    pub mean_lower: Vec<f64>,
    #[serde(with = "floats::vector")]
    pub mean_upper: Vec<f64>,
    #[serde(with = "floats::vector")]
    pub lower_band_lo: Vec<f64>,
    #[serde(with = "floats::vector")]
    pub lower_band_hi: Vec<f64>,
    #[serde(with = "floats::vector")]
    pub upper_band_lo: Vec<f64>,
    #[serde(with = "floats::vector")]
    pub upper_band_hi: Vec<f64>,
    /// Share of replications with `lower <= truth <= upper`.
    #[serde(with = "floats::vector")]
    pub truth_coverage: Vec<f64>,
    /// Reference lower bound inside the lower band and reference upper bound
    /// inside the upper band.
    pub reference_covered: Vec<bool>,
}

impl SizeSummary {
    /// Width of the union of the two percentile bands at each point.
    pub fn band_width(&self, i: usize) -> f64 {
        self.upper_band_hi[i] - self.lower_band_lo[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    #[serde(with = "floats::vector")]
    pub y0_grid: Vec<f64>,
    #[serde(with = "floats::vector")]
    pub truth: Vec<f64>,
    pub reference: BoundCurve,
    pub trusted: Vec<bool>,
    pub level: f64,
    pub sizes: Vec<SizeSummary>,
    /// `curves[s][r]`: replication `r` at sample size `n_list[s]`.
    pub curves: Vec<Vec<Option<BoundCurve>>>,
}

fn run_replication(params: &SimParams, n: usize, rep: usize, y0: &[f64], cfg: &BoundConfig) -> Result<BoundCurve> {
    let p = SimParams { n, seed: derive_seed(params.seed, n as u64, rep as u64), ..params.clone() };
    let ds = dgp_sample(&p)?;
    crate::bounds::bound_curve(&ds, None, y0, cfg)
}

fn summarize(n: usize, curves: &[Option<BoundCurve>], reference: &BoundCurve, truth: &[f64], level: f64) -> SizeSummary {
    let ok: Vec<&BoundCurve> = curves.iter().flatten().collect();
    let m = reference.len();
    let col = |f: &dyn Fn(&BoundCurve) -> f64| -> Vec<f64> { ok.iter().map(|c| f(c)).collect() };
    let (a, b) = ((1.0 - level) / 2.0, 1.0 - (1.0 - level) / 2.0);
    let mut s = SizeSummary {
        n,
        replications: curves.len(),
        failed_replications: curves.len() - ok.len(),
        mean_lower: vec![f64::NAN; m],
        mean_upper: vec![f64::NAN; m],
        lower_band_lo: vec![f64::NAN; m],
        lower_band_hi: vec![f64::NAN; m],
        upper_band_lo: vec![f64::NAN; m],
        upper_band_hi: vec![f64::NAN; m],
        truth_coverage: vec![f64::NAN; m],
        reference_covered: vec![false; m],
    };
    if ok.is_empty() {
        return s;
    }
    for i in 0..m {
        let lo = col(&|c| c.lower[i]);
        let up = col(&|c| c.upper[i]);
        s.mean_lower[i] = crate::numeric::mean(&lo);
        s.mean_upper[i] = crate::numeric::mean(&up);
        s.lower_band_lo[i] = percentile(&lo, a);
        s.lower_band_hi[i] = percentile(&lo, b);
        s.upper_band_lo[i] = percentile(&up, a);
        s.upper_band_hi[i] = percentile(&up, b);
        let hits = ok.iter().filter(|c| c.lower[i] <= truth[i] && truth[i] <= c.upper[i]).count();
        s.truth_coverage[i] = hits as f64 / ok.len() as f64;
        let eps = 1e-12;
        s.reference_covered[i] = reference.lower[i] >= s.lower_band_lo[i] - eps
            && reference.lower[i] <= s.lower_band_hi[i] + eps
            && reference.upper[i] >= s.upper_band_lo[i] - eps
            && reference.upper[i] <= s.upper_band_hi[i] + eps;
    }
    s
}

/// Replication study: `r` fresh samples per size in `n_list`, each with its
/// own derived seed, summarized pointwise against the truth and the
/// population reference bound.
pub fn replicate(study: &StudyConfig) -> Result<SimResult> {
    if study.r < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 replications, got {}", study.r)));
    }
    study.params.validate()?;
    let y0 = study.y0_grid.values();
    let truth: Vec<f64> = y0.iter().map(|&y| truth_cdf(y, &study.params)).collect::<Result<_>>()?;
    let ref_grid = EvalGrid::uniform(study.reference_grid.lo, study.reference_grid.hi, study.reference_grid.points)?;
    let reference = population_curve(&study.params, &ref_grid, &y0, &study.bounds)?;
    let jobs: Vec<(usize, usize)> = (0..study.n_list.len()).flat_map(|s| (0..study.r).map(move |r| (s, r))).collect();
    let results: Vec<Option<BoundCurve>> = jobs
        .par_iter()
        .map(|&(s, r)| run_replication(&study.params, study.n_list[s], r, &y0, &study.bounds).ok())
        .collect();
    let curves: Vec<Vec<Option<BoundCurve>>> = results.chunks(study.r).map(|c| c.to_vec()).collect();
    let sizes = study
        .n_list
        .iter()
        .zip(&curves)
        .map(|(&n, c)| summarize(n, c, &reference, &truth, study.level))
        .collect();
    let trusted = reference.trusted.clone();
    Ok(SimResult { y0_grid: y0, truth, reference, trusted, level: study.level, sizes, curves })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightenRow {
    #[serde(rename = "L")]
    pub l: usize,
    pub curve: BoundCurve,
    #[serde(with = "floats::scalar")]
    pub mean_trusted_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightenReport {
    #[serde(with = "floats::vector")]
    pub y0_grid: Vec<f64>,
    #[serde(with = "floats::vector")]
    pub truth: Vec<f64>,
    pub rows: Vec<TightenRow>,
    /// Mean trusted width never grows by more than the slack from one `L` to the next.
    pub weakly_decreasing: bool,
    pub slack: f64,
}

/// One large sample per `L`, same seed, with the mean trusted-interval width
/// of each bound curve.
pub fn tighten_report(base: &SimParams, l_list: &[usize], n_large: usize, y0_grid: &[f64], cfg: &BoundConfig) -> Result<TightenReport> {
    if l_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter("L list must be increasing".into()));
    }
    let truth: Vec<f64> = y0_grid.iter().map(|&y| truth_cdf(y, base)).collect::<Result<_>>()?;
    let rows = l_list
        .iter()
        .map(|&l| {
            let p = SimParams { l, n: n_large, ..base.clone() };
            let ds = dgp_sample(&p)?;
            let curve = crate::bounds::bound_curve(&ds, None, y0_grid, cfg)?;
            let w = curve.mean_trusted_width();
            Ok(TightenRow { l, curve, mean_trusted_width: w })
        })
        .collect::<Result<Vec<_>>>()?;
    let slack = 0.005;
    let weakly_decreasing = rows.windows(2).all(|w| w[1].mean_trusted_width <= w[0].mean_trusted_width + slack);
    Ok(TightenReport { y0_grid: y0_grid.to_vec(), truth, rows, weakly_decreasing, slack })
}
