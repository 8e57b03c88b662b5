//! Resolved run configuration: defaults, then the `--config` file, then flags.

use std::path::{Path, PathBuf};

use rnbounds::bounds::BoundConfig;
use rnbounds::dataset::{ColumnMap, Dataset};
use rnbounds::inference::DeltaOptions;
use rnbounds::sim::{dgp_sample, GridSpec, SimParams, StudyConfig};
use rnbounds::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Default number of `y0` points when the grid is derived from the data.
pub const DEFAULT_GRID_POINTS: usize = 49;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Csv { path: PathBuf },
    Simulated { params: SimParams },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSource>,
    pub columns: ColumnMap,
    /// Position of the reference value in the sorted instrument support.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<usize>,
    /// Covariate value the bounds condition on.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y0_grid: Option<GridSpec>,
    pub bounds: BoundConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quantiles: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inference: Option<DeltaOptions>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub study: Option<StudyConfig>,
    pub figure_mode: bool,
    pub seed: u64,
    pub output: PathBuf,
    /// Left out of artifact headers: results do not depend on it.
    #[serde(skip_serializing)]
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            data: None,
            columns: ColumnMap::default(),
            reference: None,
            x: None,
            y0_grid: None,
            bounds: BoundConfig::default(),
            quantiles: None,
            inference: None,
            study: None,
            figure_mode: false,
            seed: 0,
            output: PathBuf::from("out"),
            threads: None,
        }
    }
}

impl RunConfig {
    /// JSON, or TOML when the extension is `.toml`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::InvalidParameter(format!("config {}: {e}", path.display())))
        } else {
            serde_json::from_str(&text).map_err(|e| Error::InvalidParameter(format!("config {}: {e}", path.display())))
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bounds.tau > 0.0) {
            return Err(Error::InvalidParameter(format!("tau must be positive, got {}", self.bounds.tau)));
        }
        if let Some(g) = &self.y0_grid {
            if !(g.lo.is_finite() && g.hi.is_finite() && g.lo <= g.hi && g.points >= 1) {
                return Err(Error::InvalidGrid(format!("bad y0 grid {},{},{}", g.lo, g.hi, g.points)));
            }
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidParameter("threads must be at least 1".into()));
        }
        Ok(())
    }

    pub fn load_data(&self) -> Result<Dataset> {
        match &self.data {
            Some(DataSource::Csv { path }) => Dataset::load_csv(path, &self.columns, self.reference),
            Some(DataSource::Simulated { params }) => dgp_sample(params),
            None => Err(Error::InvalidParameter("no data: pass --input or --sim-n".into())),
        }
    }

    /// Fills in the `y0` grid from the outcome range when none was given.
    pub fn resolve_grid(&mut self, ds: &Dataset) -> Vec<f64> {
        let spec = *self.y0_grid.get_or_insert_with(|| {
            let (lo, hi) = ds.outcome_range();
            GridSpec { lo, hi, points: DEFAULT_GRID_POINTS }
        });
        spec.values()
    }

    pub fn header_lines(&self) -> Vec<String> {
        vec![
            format!("schema_version: {SCHEMA_VERSION}"),
            format!("rnbounds {}", rnbounds::VERSION),
            format!("config: {}", serde_json::to_string(self).expect("config serializes")),
        ]
    }

    /// Wraps a result payload with the schema version, library version and config.
    pub fn envelope<T: Serialize>(&self, result: &T) -> serde_json::Value {
        serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "version": rnbounds::VERSION,
            "config": self,
            "result": result,
        })
    }
}

/// Parses `LO,HI,POINTS`.
pub fn parse_grid(s: &str) -> std::result::Result<GridSpec, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected LO,HI,POINTS, got `{s}`"));
    }
    let num = |t: &str| t.parse::<f64>().map_err(|_| format!("cannot parse `{t}`"));
    let points = parts[2].parse::<usize>().map_err(|_| format!("cannot parse point count `{}`", parts[2]))?;
    Ok(GridSpec { lo: num(parts[0])?, hi: num(parts[1])?, points })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let g = parse_grid("-1, 2,4").unwrap();
        assert_eq!(g, GridSpec { lo: -1.0, hi: 2.0, points: 4 });
        assert!(parse_grid("1,2").is_err());
        assert!(parse_grid("1,2,x").is_err());
    }

    #[test]
    fn partial_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 4\n[bounds]\ntau = 10.0\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.bounds.tau, 10.0);
        assert_eq!(cfg.bounds.grid_cap, BoundConfig::default().grid_cap);
        let json = dir.path().join("run.json");
        std::fs::write(&json, r#"{"data": {"source": "simulated", "params": {"n": 50}}}"#).unwrap();
        let cfg = RunConfig::load(&json).unwrap();
        assert!(matches!(cfg.data, Some(DataSource::Simulated { ref params }) if params.n == 50 && params.l == 2));
    }

    #[test]
    fn infinite_tau_survives_the_header() {
        let mut cfg = RunConfig::default();
        cfg.bounds.tau = f64::INFINITY;
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains(r#""tau":"inf""#));
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.bounds.tau, f64::INFINITY);
        let toml: RunConfig = toml::from_str("[bounds]\ntau = 25\n").unwrap();
        assert_eq!(toml.bounds.tau, 25.0);
    }
}
