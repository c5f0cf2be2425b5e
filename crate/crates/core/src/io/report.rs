//! Calibration reports: per-hook reconstruction error, totals and a config
//! echo, emitted as deterministic JSON.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::ErrorMetrics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HookReport {
    pub quantizer: String,
    pub bits: u8,
    pub metrics: ErrorMetrics,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportTotals {
    pub hook_count: usize,
    /// Sum of the per-hook MSE values in `hooks`.
    #[serde(with = "crate::io::lossy")]
    pub hook_mse_sum: f64,
    /// Network output error on the calibration inputs, when a network ran.
    pub output: Option<ErrorMetrics>,
    /// Network output error on held-out inputs.
    pub eval_output: Option<ErrorMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    /// Activation quantizers, keyed by hook name.
    pub hooks: BTreeMap<String, HookReport>,
    /// Weight quantizers, keyed by weight name.
    pub weights: BTreeMap<String, HookReport>,
    pub totals: ReportTotals,
    /// Calibration events worth surfacing (fallbacks, search traces).
    pub notes: Vec<String>,
}

impl CalibrationReport {
    pub fn new(seed: Option<u64>, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            seed,
            config: serde_json::to_value(config).map_err(|e| Error::Format(e.to_string()))?,
            hooks: BTreeMap::new(),
            weights: BTreeMap::new(),
            totals: ReportTotals::default(),
            notes: Vec::new(),
        })
    }

    pub fn add_hook(&mut self, name: &str, quantizer: &str, bits: u8, metrics: ErrorMetrics) {
        self.hooks.insert(
            name.to_owned(),
            HookReport {
                quantizer: quantizer.to_owned(),
                bits,
                metrics,
            },
        );
        self.refresh_totals();
    }

    pub fn add_weight(&mut self, name: &str, bits: u8, metrics: ErrorMetrics) {
        self.weights.insert(
            name.to_owned(),
            HookReport {
                quantizer: "uniform".to_owned(),
                bits,
                metrics,
            },
        );
    }

    fn refresh_totals(&mut self) {
        self.totals.hook_count = self.hooks.len();
        self.totals.hook_mse_sum = self.hooks.values().map(|h| h.metrics.mse).sum();
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(mse: f64, sqnr_db: f64) -> ErrorMetrics {
        ErrorMetrics {
            mse,
            sqnr_db,
            cosine: 1.0,
        }
    }

    #[test]
    fn totals_track_hooks_and_infinity_survives_json() {
        let mut r =
            CalibrationReport::new(Some(0), &serde_json::json!({"preset": "W8A8"})).unwrap();
        r.add_hook("b", "uniform", 8, m(0.25, 10.0));
        r.add_hook("a", "drq", 8, m(0.0, f64::INFINITY));
        r.add_hook("b", "uniform", 8, m(0.5, 3.0));
        assert_eq!(r.totals.hook_count, 2);
        assert_eq!(r.totals.hook_mse_sum, 0.5);
        let s = r.to_json().unwrap();
        assert!(s.contains("\"inf\""));
        assert!(s.find("\"a\"").unwrap() < s.find("\"b\"").unwrap());
        assert_eq!(CalibrationReport::from_json(&s).unwrap(), r);
    }
}
