//! Run configuration (JSON). Unknown keys are rejected everywhere.

use std::path::Path;

use serde::{Deserialize, Serialize};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_ORDER: usize = 10;
pub const DEFAULT_SAMPLES: usize = 101;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<MetricConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear: Option<LinearConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub series_order: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_switch: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub handoff: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    pub dim_p: usize,
    #[serde(default)]
    pub dim_m: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagonal: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<BlockConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conformal: Option<ConformalConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_validate: Option<f64>,
}

/// `P|𝔭 = t²I + t⁴B`, `P|𝔪 = A0 + t·A1 + t²A`, `P|𝔭𝔪 = t²C0 + t³C`.
/// Omitted constant blocks are zero, omitted function blocks are `"0"`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub a0: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a1: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c0: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<Vec<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<Vec<Vec<String>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConformalConfig {
    pub alpha: String,
    pub n: usize,
}

/// `ẏ = M₋₁(y)/t + M(t, y)` with expressions in `t, y1, …, yk`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub singular: Vec<String>,
    pub regular: Vec<String>,
    pub y0: Vec<f64>,
}

/// `dY/ds + A(s)·Y/s = h(s)` with expressions in `s`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LinearConfig {
    pub a: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<Vec<String>>,
    /// Radius of validity; unbounded when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    /// Interpret `a` as `A₀` of the Euler form `s·dY/ds = A₀·Y`.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub euler_form: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z0: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z1: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y0: Option<Vec<[f64; 2]>>,
}

/// Parameter grids as `start:stop:count`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<String>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<RunConfig, LoadError> {
        let text = std::fs::read_to_string(path).map_err(LoadError::Io)?;
        RunConfig::from_json(&text).map_err(LoadError::Parse)
    }

    pub fn tol(&self) -> f64 {
        self.tolerance.unwrap_or(DEFAULT_TOL)
    }

    pub fn order(&self) -> usize {
        self.series_order.unwrap_or(DEFAULT_ORDER)
    }

    pub fn samples(&self) -> usize {
        self.samples.unwrap_or(DEFAULT_SAMPLES)
    }
}

#[derive(Debug)]
pub enum LoadError {
    Io(std::io::Error),
    Parse(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unknown_keys() {
        assert!(RunConfig::from_json(r#"{"v": 1, "colour": 2}"#).is_err());
        assert!(RunConfig::from_json(r#"{"metric": {"dim_p": 1, "diagonl": ["t^2"]}}"#).is_err());
    }

    #[test]
    fn round_trips() {
        let text = r#"{"problem":"harmonic","metric":{"dim_p":2,"dim_m":0,"diagonal":["sin(t)^2","sin(t)^2"]},
            "v":1.0,"t_end":1.5,"tolerance":1e-9,"sweep":{"v":"0:2:5"}}"#;
        let cfg = RunConfig::from_json(text).unwrap();
        let back = RunConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.order(), DEFAULT_ORDER);
    }
}
