//! TOML run configuration and `key=value` overrides.

use std::fs;
use std::path::Path;

use epiwarp::field::{DipoleSpec, Perturbation};
use epiwarp::forward::ShiftFormula;
use epiwarp::{BenchmarkConfig, DwiParams, EpiParams, PeDirection, RestoreOptions};
use serde::Deserialize;
use toml::{Table, Value};

use crate::error::CliError;

/// Everything a subcommand may read from the config file.
///
/// The top-level `seed` drives every stochastic output; seeds nested in the
/// sections are overwritten by it.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub phantom: PhantomConfig,
    pub simulate: SimulateConfig,
    pub dataset: BenchmarkConfig,
    pub restore: RestoreOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub width: usize,
    pub height: usize,
    pub noise_sigma: f64,
    /// Draw anatomy and lesions from the seed instead of the centred
    /// default layout.
    pub randomized: bool,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            width: 96,
            height: 96,
            noise_sigma: 0.02,
            randomized: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub direction: PeDirection,
    /// Base acquisition; axis and polarity come from `direction`.
    pub epi: EpiParams,
    pub dwi: DwiParams,
    /// Field sources, used when no field image is given.
    pub dipoles: Option<DipoleSpec>,
    pub harmonic_order: usize,
    /// When set, the field is expanded in the harmonic basis and its higher
    /// orders rescaled before distortion.
    pub perturbation: Option<Perturbation>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            direction: PeDirection::Ap,
            epi: EpiParams::default(),
            dwi: DwiParams::default(),
            dipoles: None,
            harmonic_order: 6,
            perturbation: None,
        }
    }
}

impl Config {
    /// Loads `path` (or the defaults), then applies each `key=value`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Config, CliError> {
        let origin = path.map_or_else(|| "from --set".to_string(), |p| p.display().to_string());
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Config {
                    origin: origin.clone(),
                    message: e.to_string(),
                })?;
                text.parse::<Table>().map_err(|e| CliError::Config {
                    origin: origin.clone(),
                    message: e.to_string(),
                })?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Config::deserialize(Value::Table(table)).map_err(|e| CliError::Config {
            origin,
            message: e.to_string(),
        })
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.dataset.seed = seed;
    }

    pub fn use_literal_formula(&mut self) {
        self.dataset.epi.formula = ShiftFormula::Eq1Literal;
        self.simulate.epi.formula = ShiftFormula::Eq1Literal;
    }
}

/// Parses the right-hand side as a TOML value, falling back to a bare
/// string so `simulate.direction=pa` works without quotes.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets a dotted key such as `dataset.epi.esp_s=4e-4` in `table`.
pub fn apply_override(table: &mut Table, item: &str) -> Result<(), CliError> {
    let bad = |m: &str| CliError::Usage(format!("--set {item}: {m}"));
    let (key, raw) = item.split_once('=').ok_or_else(|| bad("expected key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(bad("empty key segment"));
    }
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut node = table;
    for p in path {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| bad(&format!("`{p}` is not a table")))?;
    }
    node.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_nest_and_type() {
        let mut t = Table::new();
        apply_override(&mut t, "dataset.epi.esp_s=4e-4").unwrap();
        apply_override(&mut t, "dataset.directions=[\"ap\", \"pa\"]").unwrap();
        apply_override(&mut t, "simulate.direction=rl").unwrap();
        apply_override(&mut t, "seed=9").unwrap();
        let cfg = Config::deserialize(Value::Table(t)).unwrap();
        assert_eq!(cfg.dataset.epi.esp_s, 4e-4);
        assert_eq!(cfg.dataset.directions, vec![PeDirection::Ap, PeDirection::Pa]);
        assert_eq!(cfg.simulate.direction, PeDirection::Rl);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.dataset.epi.n_pe, EpiParams::default().n_pe);
    }

    #[test]
    fn later_override_wins() {
        let mut t = Table::new();
        apply_override(&mut t, "phantom.width=40").unwrap();
        apply_override(&mut t, "phantom.width=48").unwrap();
        let cfg = Config::deserialize(Value::Table(t)).unwrap();
        assert_eq!(cfg.phantom.width, 48);
    }

    #[test]
    fn malformed_overrides_are_rejected() {
        let mut t = Table::new();
        assert!(apply_override(&mut t, "novalue").is_err());
        assert!(apply_override(&mut t, "a..b=1").is_err());
        apply_override(&mut t, "seed=1").unwrap();
        assert!(apply_override(&mut t, "seed.x=1").is_err());
    }

    #[test]
    fn unknown_keys_name_the_field() {
        let mut t = Table::new();
        apply_override(&mut t, "dataset.phantomz=3").unwrap();
        let err = Config::deserialize(Value::Table(t)).unwrap_err().to_string();
        assert!(err.contains("phantomz"), "{err}");
    }
}
