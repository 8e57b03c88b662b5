use rayon::prelude::*;
use rnbounds::bounds::{bound_curve, qte_bounds, BoundCurve, QteBounds};
use rnbounds::dataset::{ColumnMap, Dataset, ValidationReport};
use rnbounds::estimators::Bandwidths;
use rnbounds::floats::{self, fmt};
use rnbounds::inference::{numerical_delta_curve, CiResult};
use rnbounds::silp::{self, active_set, recession_margin, slater_check, Sense, SLATER_MARGIN};
use rnbounds::sim::{replicate, tighten_report, truth_cdf, SimResult, SizeSummary, StudyConfig};
use rnbounds::{Error, Result};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{DataSource, RunConfig};
use crate::output::{cell, Artifacts};

/// Per-point failures (exit 2) and informational notes (exit unaffected),
/// both reported on stderr as JSON lines.
#[derive(Debug, Default)]
pub struct Outcome {
    pub failures: Vec<Value>,
    pub notes: Vec<Value>,
}

/// Loads the data, resolves the grid and bandwidths, and records them in `cfg`.
fn prepare(cfg: &mut RunConfig, outcome_bandwidth: Option<f64>) -> Result<(Dataset, Vec<f64>)> {
    if let Some(DataSource::Simulated { params }) = &mut cfg.data {
        params.seed = cfg.seed;
    }
    let ds = cfg.load_data()?;
    let y0 = cfg.resolve_grid(&ds);
    let mut bw: Bandwidths = cfg.bounds.resolve_bandwidths(&ds);
    if let Some(b) = outcome_bandwidth {
        if !(b > 0.0) {
            return Err(Error::InvalidParameter(format!("outcome bandwidth must be positive, got {b}")));
        }
        bw = bw.with_outcome(Some(b));
    }
    cfg.bounds.bandwidths = Some(bw);
    Ok((ds, y0))
}

fn simulated_truth(cfg: &RunConfig, y0: &[f64]) -> Result<Option<Vec<f64>>> {
    match &cfg.data {
        Some(DataSource::Simulated { params }) => Ok(Some(y0.iter().map(|&y| truth_cdf(y, params)).collect::<Result<_>>()?)),
        _ => Ok(None),
    }
}

fn curve_failures(curve: &BoundCurve) -> Vec<Value> {
    (0..curve.len())
        .filter(|&i| curve.errors[i].is_some() || !curve.upper_raw[i].is_finite() || !curve.lower_raw[i].is_finite())
        .map(|i| {
            let message = curve.errors[i]
                .clone()
                .unwrap_or_else(|| format!("upper status {}, lower status {}", curve.upper_status[i], curve.lower_status[i]));
            json!({ "level": "warning", "y0": fmt(curve.y0_grid[i]), "message": message })
        })
        .collect()
}

#[derive(Serialize)]
struct PointDiagnostic<'a> {
    #[serde(with = "floats::scalar")]
    y0: f64,
    upper_status: &'a str,
    lower_status: &'a str,
    #[serde(with = "floats::scalar")]
    margin: f64,
    trusted: bool,
    fallback: bool,
    crossing: bool,
    error: Option<&'a str>,
}

#[derive(Serialize)]
struct SolverDiagnostics<'a> {
    observations: usize,
    instrument_support: &'a [f64],
    reference_index: usize,
    constraint_grid_points: usize,
    failures: usize,
    trusted_points: usize,
    fallback_points: usize,
    crossings: usize,
    points: Vec<PointDiagnostic<'a>>,
}

fn diagnostics<'a>(curve: &'a BoundCurve, ds: &'a Dataset, cfg: &RunConfig) -> Result<SolverDiagnostics<'a>> {
    let count = |v: &[bool]| v.iter().filter(|&&b| b).count();
    Ok(SolverDiagnostics {
        observations: ds.len(),
        instrument_support: ds.support().values(),
        reference_index: ds.support().reference_index(),
        constraint_grid_points: cfg.bounds.resolve_grid(ds)?.len(),
        failures: curve.failures(),
        trusted_points: count(&curve.trusted),
        fallback_points: count(&curve.fallback),
        crossings: count(&curve.crossing),
        points: (0..curve.len())
            .map(|i| PointDiagnostic {
                y0: curve.y0_grid[i],
                upper_status: &curve.upper_status[i],
                lower_status: &curve.lower_status[i],
                margin: curve.margin[i],
                trusted: curve.trusted[i],
                fallback: curve.fallback[i],
                crossing: curve.crossing[i],
                error: curve.errors[i].as_deref(),
            })
            .collect(),
    })
}

pub fn bounds(cfg: &mut RunConfig, outcome_bandwidth: Option<f64>) -> Result<Outcome> {
    let (ds, y0) = prepare(cfg, outcome_bandwidth)?;
    let curve = bound_curve(&ds, cfg.x.as_deref(), &y0, &cfg.bounds)?;
    let truth = simulated_truth(cfg, &y0)?;
    let out = Artifacts::new(cfg)?;
    out.csv("bounds.csv", |w, h| curve.write_csv(w, h))?;
    out.csv("plot_data.csv", |w, h| curve.write_plot_data(w, h, truth.as_deref()))?;
    out.json("bounds.json", &curve)?;
    out.json("diagnostics.json", &diagnostics(&curve, &ds, cfg)?)?;
    Ok(Outcome { failures: curve_failures(&curve), notes: Vec::new() })
}

pub fn qte(cfg: &mut RunConfig, outcome_bandwidth: Option<f64>) -> Result<Outcome> {
    let (ds, y0) = prepare(cfg, outcome_bandwidth)?;
    let taus = cfg.quantiles.get_or_insert_with(|| vec![0.5]).clone();
    let (rows, curve) = qte_bounds(&ds, cfg.x.as_deref(), &taus, &y0, &cfg.bounds)?;
    let out = Artifacts::new(cfg)?;
    out.csv("qte.csv", |w, h| QteBounds::write_csv(&rows, w, h))?;
    out.csv("bounds.csv", |w, h| curve.write_csv(w, h))?;
    out.json("qte.json", &json!({ "rows": rows, "curve": curve }))?;
    let notes = rows
        .iter()
        .filter(|r| !r.q0_ub.is_finite())
        .map(|r| {
            json!({
                "level": "note",
                "tau_q": r.tau_q,
                "message": "lower bound curve never reaches the quantile level; qte_lb is unbounded",
            })
        })
        .collect();
    Ok(Outcome { failures: curve_failures(&curve), notes })
}

pub fn inference(cfg: &mut RunConfig, outcome_bandwidth: Option<f64>) -> Result<Outcome> {
    let (ds, y0) = prepare(cfg, outcome_bandwidth)?;
    let mut opts = cfg.inference.clone().unwrap_or_default();
    opts.seed = cfg.seed;
    cfg.inference = Some(opts.clone());
    let rows = numerical_delta_curve(&ds, cfg.x.as_deref(), &y0, &opts, &cfg.bounds)?;
    let out = Artifacts::new(cfg)?;
    let lines: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                fmt(r.y0),
                bound_name(r.sense),
                fmt(r.point),
                fmt(r.ci_lo),
                fmt(r.ci_hi),
                fmt(r.level),
                r.n_draws,
                r.failed_draws,
                r.unique,
                r.flagged,
                cell(r.caveat.as_deref()),
                cell(r.error.as_deref())
            )
        })
        .collect();
    out.table(
        "inference.csv",
        "y0,bound,point,ci_lo,ci_hi,level,n_draws,failed_draws,unique,flagged,caveat,error",
        &lines,
    )?;
    out.json("inference.json", &rows)?;
    Ok(Outcome { failures: ci_failures(&rows), notes: Vec::new() })
}

fn bound_name(sense: Sense) -> &'static str {
    match sense {
        Sense::Minimize => "upper",
        Sense::Maximize => "lower",
    }
}

fn ci_failures(rows: &[CiResult]) -> Vec<Value> {
    rows.iter()
        .filter_map(|r| {
            r.error.as_ref().map(|e| json!({ "level": "warning", "y0": fmt(r.y0), "bound": bound_name(r.sense), "message": e }))
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct SideCheck {
    status: String,
    #[serde(with = "floats::scalar")]
    value: f64,
    active_points: usize,
    rank: usize,
    num_vars: usize,
    regular: bool,
    /// `K=<active points>`.
    assumption_r: String,
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct PointCheck {
    #[serde(with = "floats::scalar")]
    y0: f64,
    slater: bool,
    #[serde(with = "floats::scalar")]
    recession_margin: f64,
    upper: SideCheck,
    lower: SideCheck,
}

#[derive(Debug, Serialize)]
struct CheckReport {
    slater_margin: f64,
    all_slater: bool,
    #[serde(with = "floats::scalar")]
    min_recession_margin: f64,
    regular_points: usize,
    points: Vec<PointCheck>,
}

fn check_side(xi: &rnbounds::estimators::CoefficientTriple, sense: Sense, cfg: &RunConfig) -> SideCheck {
    let tol = &cfg.bounds.tolerances;
    let run = || -> Result<(silp::LpSolution, silp::ActiveSet)> {
        let p = match sense {
            Sense::Minimize => silp::build_upper(xi, cfg.bounds.tau)?,
            Sense::Maximize => silp::build_lower(xi, cfg.bounds.tau)?,
        };
        let sol = silp::solve(&p, tol)?;
        let act = active_set(&sol, xi, tol.act);
        Ok((sol, act))
    };
    match run() {
        Ok((sol, act)) => SideCheck {
            status: sol.status.as_str().to_string(),
            value: sol.value,
            active_points: act.k,
            rank: act.rank,
            num_vars: act.num_vars,
            regular: act.regular(),
            assumption_r: format!("K={}", act.k),
            error: None,
        },
        Err(e) => SideCheck {
            status: "error".into(),
            value: f64::NAN,
            active_points: 0,
            rank: 0,
            num_vars: xi.num_vars(),
            regular: false,
            assumption_r: "K=0".into(),
            error: Some(e.to_string()),
        },
    }
}

pub fn check(cfg: &mut RunConfig, outcome_bandwidth: Option<f64>) -> Result<Outcome> {
    let (ds, y0) = prepare(cfg, outcome_bandwidth)?;
    let model = cfg.bounds.estimate(&ds, cfg.x.as_deref())?;
    let cfg_ref = &*cfg;
    let points: Vec<PointCheck> = y0
        .par_iter()
        .map(|&y| {
            let xi = model.triple(y);
            PointCheck {
                y0: y,
                slater: slater_check(&xi, SLATER_MARGIN),
                recession_margin: recession_margin(&xi),
                upper: check_side(&xi, Sense::Minimize, cfg_ref),
                lower: check_side(&xi, Sense::Maximize, cfg_ref),
            }
        })
        .collect();
    let report = CheckReport {
        slater_margin: SLATER_MARGIN,
        all_slater: points.iter().all(|p| p.slater),
        min_recession_margin: points.iter().map(|p| p.recession_margin).fold(f64::INFINITY, f64::min),
        regular_points: points.iter().filter(|p| p.upper.regular && p.lower.regular).count(),
        points,
    };
    let out = Artifacts::new(cfg)?;
    let lines: Vec<String> = report
        .points
        .iter()
        .map(|p| {
            format!(
                "{},{},{},{},{},{},{},{},{}",
                fmt(p.y0),
                p.slater,
                fmt(p.recession_margin),
                p.upper.status,
                p.upper.assumption_r,
                p.upper.regular,
                p.lower.status,
                p.lower.assumption_r,
                p.lower.regular
            )
        })
        .collect();
    out.table(
        "check.csv",
        "y0,slater,recession_margin,upper_status,upper_assumption_r,upper_regular,lower_status,lower_assumption_r,lower_regular",
        &lines,
    )?;
    out.json("check.json", &report)?;
    let failures = report
        .points
        .iter()
        .flat_map(|p| {
            [(&p.upper, "upper"), (&p.lower, "lower")].into_iter().filter_map(move |(s, name)| {
                s.error.as_ref().map(|e| json!({ "level": "warning", "y0": fmt(p.y0), "bound": name, "message": e }))
            })
        })
        .collect();
    Ok(Outcome { failures, notes: Vec::new() })
}

#[derive(Serialize)]
struct DatasetSummary<'a> {
    observations: usize,
    x_dim: usize,
    instrument_support: &'a [f64],
    reference_index: usize,
    /// `(d, z_index, count)`.
    cells: Vec<(u8, usize, usize)>,
    validation: ValidationReport,
    estimable: bool,
    dump_columns: ColumnMap,
}

pub fn dataset_dump(cfg: &mut RunConfig) -> Result<Outcome> {
    if let Some(DataSource::Simulated { params }) = &mut cfg.data {
        params.seed = cfg.seed;
    }
    let ds = cfg.load_data()?;
    let validation = ds.validation_report();
    let estimable = validation.is_estimable();
    let notes = validation
        .sparse_cells
        .iter()
        .map(|c| json!({ "level": "note", "d": c.d, "z_index": c.z_index, "count": c.count, "message": "sparse cell" }))
        .collect();
    let summary = DatasetSummary {
        observations: ds.len(),
        x_dim: ds.x_dim(),
        instrument_support: ds.support().values(),
        reference_index: ds.support().reference_index(),
        cells: ds.cell_counts().cells().collect(),
        validation,
        estimable,
        dump_columns: ds.dump_columns(),
    };
    let out = Artifacts::new(cfg)?;
    out.csv("dataset.csv", |w, h| ds.write_csv(w, h))?;
    out.json("dataset.json", &summary)?;
    Ok(Outcome { failures: Vec::new(), notes })
}

/// [`SimResult`] without the per-replication curves.
#[derive(Serialize)]
struct SimSummary<'a> {
    #[serde(with = "floats::vector")]
    y0_grid: &'a [f64],
    #[serde(with = "floats::vector")]
    truth: &'a [f64],
    reference: &'a BoundCurve,
    trusted: &'a [bool],
    level: f64,
    sizes: &'a [SizeSummary],
}

impl<'a> From<&'a SimResult> for SimSummary<'a> {
    fn from(r: &'a SimResult) -> Self {
        Self { y0_grid: &r.y0_grid, truth: &r.truth, reference: &r.reference, trusted: &r.trusted, level: r.level, sizes: &r.sizes }
    }
}

fn band_rows(res: &SimResult) -> Vec<String> {
    let mut rows = Vec::new();
    for s in &res.sizes {
        for i in 0..res.y0_grid.len() {
            rows.push(format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                s.n,
                fmt(res.y0_grid[i]),
                fmt(res.truth[i]),
                res.trusted[i],
                fmt(res.reference.lower[i]),
                fmt(res.reference.upper[i]),
                fmt(s.mean_lower[i]),
                fmt(s.mean_upper[i]),
                fmt(s.lower_band_lo[i]),
                fmt(s.lower_band_hi[i]),
                fmt(s.upper_band_lo[i]),
                fmt(s.upper_band_hi[i]),
                fmt(s.truth_coverage[i]),
                s.reference_covered[i]
            ));
        }
    }
    rows
}

const BAND_COLUMNS: &str = "n,y0,truth,trusted,reference_lower,reference_upper,mean_lower,mean_upper,\
lower_band_lo,lower_band_hi,upper_band_lo,upper_band_hi,truth_coverage,reference_covered";

fn replication_failures(res: &SimResult, l: usize) -> Vec<Value> {
    res.sizes
        .iter()
        .filter(|s| s.failed_replications > 0)
        .map(|s| {
            json!({
                "level": "warning",
                "L": l,
                "n": s.n,
                "failed_replications": s.failed_replications,
                "message": "replications failed and were dropped from the summaries",
            })
        })
        .collect()
}

/// One panel of a confidence-band figure: reference bound, truth, and the
/// percentile band of one bound for every sample size.
fn band_panel(res: &SimResult, upper: bool) -> (String, Vec<String>) {
    let mut cols = vec!["x".to_string(), "truth".into(), "reference".into(), "trusted".into()];
    for s in &res.sizes {
        cols.extend([format!("n{}_mean", s.n), format!("n{}_lo", s.n), format!("n{}_hi", s.n)]);
    }
    let rows = (0..res.y0_grid.len())
        .map(|i| {
            let reference = if upper { res.reference.upper[i] } else { res.reference.lower[i] };
            let mut r = vec![fmt(res.y0_grid[i]), fmt(res.truth[i]), fmt(reference), res.trusted[i].to_string()];
            for s in &res.sizes {
                let (m, lo, hi) = if upper {
                    (s.mean_upper[i], s.upper_band_lo[i], s.upper_band_hi[i])
                } else {
                    (s.mean_lower[i], s.lower_band_lo[i], s.lower_band_hi[i])
                };
                r.extend([fmt(m), fmt(lo), fmt(hi)]);
            }
            r.join(",")
        })
        .collect();
    (cols.join(","), rows)
}

pub fn simulate(cfg: &mut RunConfig) -> Result<Outcome> {
    let mut study = cfg.study.take().unwrap_or_default();
    study.params.seed = cfg.seed;
    cfg.study = Some(study.clone());
    let out = Artifacts::new(cfg)?;
    let mut failures = Vec::new();
    if !cfg.figure_mode {
        let res = replicate(&study)?;
        out.json("simulation.json", &SimSummary::from(&res))?;
        out.table("simulation_bands.csv", BAND_COLUMNS, &band_rows(&res))?;
        failures.extend(replication_failures(&res, study.params.l));
        return Ok(Outcome { failures, notes: Vec::new() });
    }

    let fig = out.sub("figures")?;
    let y0 = study.y0_grid.values();
    let tighten = tighten_report(&study.params, &study.l_list, study.n_large, &y0, &study.bounds)?;
    for row in &tighten.rows {
        fig.csv(&format!("fig1_bounds_L{}.csv", row.l), |w, h| row.curve.write_plot_data(w, h, Some(tighten.truth.as_slice())))?;
        failures.extend(curve_failures(&row.curve).into_iter().map(|mut v| {
            v["L"] = json!(row.l);
            v
        }));
    }
    let mut panels = Vec::new();
    for &l in &study.l_list {
        let per_l = StudyConfig { params: rnbounds::sim::SimParams { l, ..study.params.clone() }, ..study.clone() };
        let res = replicate(&per_l)?;
        for (upper, name) in [(true, "fig2_upper"), (false, "fig3_lower")] {
            let (cols, rows) = band_panel(&res, upper);
            fig.table(&format!("{name}_L{l}.csv"), &cols, &rows)?;
        }
        failures.extend(replication_failures(&res, l));
        panels.push(json!({ "L": l, "simulation": SimSummary::from(&res) }));
    }
    fig.json("figures.json", &json!({ "tighten": tighten, "replications": panels }))?;
    Ok(Outcome { failures, notes: Vec::new() })
}
