//! Run configuration: a TOML file with one table per stage, overridden by
//! `--set section.key=value` and then by dedicated flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use smartcampus::impute::{KnnConfig, StrategyArg};
use smartcampus::pipeline::{CounterConfig, EvalSpec, ForecastConfig};
use smartcampus::simnet::SimConfig;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub cadence_minutes: u32,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { cadence_minutes: 15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    pub remove_outliers: bool,
    pub iqr_factor: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig { remove_outliers: false, iqr_factor: smartcampus::ingest::DEFAULT_IQR_FACTOR }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub strategies: Vec<String>,
    pub mask_fraction: f64,
    pub k_candidates: Vec<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let spec = EvalSpec::default();
        EvalConfig {
            strategies: spec.strategies.iter().map(ToString::to_string).collect(),
            mask_fraction: spec.mask_fraction,
            k_candidates: spec.k_candidates,
            seed: spec.seed,
        }
    }
}

impl EvalConfig {
    pub fn parsed_strategies(&self) -> Result<Vec<StrategyArg>> {
        self.strategies
            .iter()
            .map(|s| s.parse().map_err(|e: smartcampus::impute::ImputeError| CliError::ConfigInvalid(format!("eval.strategies: {e}"))))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces every per-section seed.
    pub seed: Option<u64>,
    pub grid: GridConfig,
    pub ingest: IngestConfig,
    pub sim: SimConfig,
    pub knn: KnnConfig,
    pub eval: EvalConfig,
    pub forecast: ForecastConfig,
    pub counter: CounterConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Seed,
    Grid,
    Ingest,
    Sim,
    Knn,
    Eval,
    Forecast,
    Counter,
}

impl Section {
    pub const ALL: [Section; 8] = [
        Section::Seed,
        Section::Grid,
        Section::Ingest,
        Section::Sim,
        Section::Knn,
        Section::Eval,
        Section::Forecast,
        Section::Counter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Section::Seed => "seed",
            Section::Grid => "grid",
            Section::Ingest => "ingest",
            Section::Sim => "sim",
            Section::Knn => "knn",
            Section::Eval => "eval",
            Section::Forecast => "forecast",
            Section::Counter => "counter",
        }
    }

    /// Documented keys with a one-line description each. `Seed` is the
    /// top-level key itself.
    pub fn keys(self) -> &'static [(&'static str, &'static str)] {
        match self {
            Section::Seed => &[("seed", "global seed; overrides sim, eval, forecast and counter seeds")],
            Section::Grid => &[("cadence_minutes", "sampling interval of the input files")],
            Section::Ingest => &[
                ("remove_outliers", "blank values outside the IQR fences per device and field"),
                ("iqr_factor", "fence width in IQRs beyond the quartiles"),
            ],
            Section::Sim => &[
                ("n_devices", "number of simulated devices"),
                ("kind_mix", "relative weights of co2, sound and moisture devices"),
                ("start", "first slot, ISO-8601 string"),
                ("end", "end of the simulated span (exclusive), ISO-8601 string"),
                ("cadence_minutes", "reporting interval"),
                ("drop_prob", "probability that an uplink is lost"),
                ("seed", "generator seed"),
                ("occupancy_rooms", "co2 devices that carry an occupancy signal"),
                ("max_occupancy", "largest head count"),
                ("noise_sd", "co2 noise standard deviation in ppm"),
            ],
            Section::Knn => &[
                ("k", "neighbours for knn strategies without an explicit k"),
                ("feature_set", "companion fields used as features; empty means all"),
                ("time_features", "add sin/cos of time of day"),
                ("standardize", "z-score features before distances"),
            ],
            Section::Eval => &[
                ("strategies", "strategies to compare, e.g. [\"zero\", \"knn:auto\"]"),
                ("mask_fraction", "share of known cells hidden for scoring"),
                ("k_candidates", "k values tried by knn:auto"),
                ("seed", "seed for the hidden-cell mask"),
            ],
            Section::Forecast => &[
                ("window", "input slots per forecast"),
                ("horizon", "predicted slots per forecast"),
                ("dims", "LSTM hidden sizes, outermost first"),
                ("epochs", "maximum training epochs"),
                ("batch_size", "windows per gradient step"),
                ("optimizer", "rmsprop or adam"),
                ("lr", "learning rate"),
                ("normalization", "z_score or min_max"),
                ("patience", "epochs without validation gain before stopping"),
                ("val_fraction", "trailing share of training windows used for early stopping"),
                ("test_fraction", "trailing share of the series held out for testing"),
                ("seed", "weight init and shuffling seed"),
            ],
            Section::Counter => &[
                ("hidden", "MLP hidden sizes"),
                ("classes", "expected number of occupancy classes"),
                ("epochs", "maximum training epochs"),
                ("batch_size", "rows per gradient step"),
                ("optimizer", "rmsprop or adam"),
                ("lr", "learning rate"),
                ("split", "train, validation and test shares"),
                ("oversample", "duplicate minority-class rows up to the majority count"),
                ("patience", "epochs without validation gain before stopping"),
                ("seed", "init, oversampling and split seed"),
            ],
        }
    }
}

/// Help text listing every key a subcommand reads.
pub fn config_help(sections: &[Section]) -> String {
    if sections.is_empty() {
        return "Config keys: none.".to_string();
    }
    let mut s = String::from("Config keys (TOML file via --config, or --set KEY=VALUE):\n");
    for sec in sections {
        for (key, doc) in sec.keys() {
            let full = match sec {
                Section::Seed => key.to_string(),
                _ => format!("{}.{key}", sec.name()),
            };
            s.push_str(&format!("  {full:<28} {doc}\n"));
        }
    }
    s
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_set(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{assignment}`")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) || path.len() > 2 {
        return Err(CliError::Usage(format!("--set key `{key}` must be `key` or `section.key`")));
    }
    let mut cur = table;
    for part in &path[..path.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::ConfigInvalid(format!("`{part}` is not a section")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Defaults, then the file, then `--set` overrides.
    pub fn load(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let text = match file {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::input(p, e))?,
            None => String::new(),
        };
        let origin = file.map_or_else(|| "<defaults>".to_string(), |p| p.display().to_string());
        if sets.is_empty() {
            return toml::from_str(&text).map_err(|e| CliError::ConfigInvalid(format!("{origin}: {e}")));
        }
        let mut table: toml::Table =
            toml::from_str(&text).map_err(|e| CliError::ConfigInvalid(format!("{origin}: {e}")))?;
        for s in sets {
            apply_set(&mut table, s)?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e| CliError::ConfigInvalid(format!("{origin} with --set overrides: {e}")))
    }

    /// Pushes the global seed into every section.
    pub fn apply_global_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.sim.seed = seed;
            self.eval.seed = seed;
            self.forecast.seed = seed;
            self.counter.seed = seed;
        }
    }

    pub fn validate(&self, sections: &[Section]) -> Result<()> {
        let bad = |m: String| Err(CliError::ConfigInvalid(m));
        for sec in sections {
            match sec {
                Section::Seed => {}
                Section::Grid => {
                    if self.grid.cadence_minutes == 0 {
                        return bad("grid.cadence_minutes must be positive".into());
                    }
                }
                Section::Ingest => {
                    if !(self.ingest.iqr_factor > 0.0 && self.ingest.iqr_factor.is_finite()) {
                        return bad("ingest.iqr_factor must be positive".into());
                    }
                }
                Section::Sim => {
                    self.sim.validate().map_err(|e| CliError::ConfigInvalid(format!("sim: {e}")))?;
                }
                Section::Knn => {
                    if self.knn.k == 0 {
                        return bad("knn.k must be positive".into());
                    }
                }
                Section::Eval => {
                    let e = &self.eval;
                    if e.strategies.is_empty() {
                        return bad("eval.strategies must not be empty".into());
                    }
                    e.parsed_strategies()?;
                    if !(e.mask_fraction > 0.0 && e.mask_fraction < 1.0) {
                        return bad("eval.mask_fraction must lie in (0, 1)".into());
                    }
                    if e.k_candidates.is_empty() || e.k_candidates.contains(&0) {
                        return bad("eval.k_candidates must be a nonempty list of positive values".into());
                    }
                }
                Section::Forecast => self.forecast.validate()?,
                Section::Counter => self.counter.validate()?,
            }
        }
        Ok(())
    }

    /// The sections a subcommand reads, as a JSON object with sorted keys.
    pub fn effective(&self, sections: &[Section]) -> serde_json::Value {
        let full = serde_json::to_value(self).expect("config serializes");
        let mut out = serde_json::Map::new();
        for sec in sections {
            if let Some(v) = full.get(sec.name()) {
                out.insert(sec.name().to_string(), v.clone());
            }
        }
        serde_json::Value::Object(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_overrides_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[forecast]\nepochs = 7\nwindow = 12\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &["forecast.epochs=3".into(), "forecast.dims=[8, 4]".into()]).unwrap();
        assert_eq!((cfg.forecast.epochs, cfg.forecast.window, cfg.forecast.dims.clone()), (3, 12, vec![8, 4]));
        let bare = RunConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(bare.forecast.epochs, 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::load(None, &["forecast.epoch=3".into()]), Err(CliError::ConfigInvalid(_))));
        assert!(matches!(RunConfig::load(None, &["nosuch=1".into()]), Err(CliError::ConfigInvalid(_))));
        assert!(matches!(RunConfig::load(None, &["noequals".into()]), Err(CliError::Usage(_))));
    }

    #[test]
    fn string_values_need_no_quotes() {
        let cfg = RunConfig::load(None, &["forecast.optimizer=adam".into(), "sim.start=2021-01-01T00:00:00Z".into()])
            .unwrap();
        assert_eq!(cfg.forecast.optimizer, smartcampus::neural::OptKind::Adam);
        assert_eq!(cfg.sim.start.to_iso8601(), "2021-01-01T00:00:00.000Z");
    }

    #[test]
    fn global_seed_reaches_every_section() {
        let mut cfg = RunConfig { seed: Some(9), ..RunConfig::default() };
        cfg.apply_global_seed();
        assert_eq!([cfg.sim.seed, cfg.eval.seed, cfg.forecast.seed, cfg.counter.seed], [9; 4]);
    }

    #[test]
    fn documented_keys_match_struct_fields() {
        let full = serde_json::to_value(RunConfig::default()).unwrap();
        let top: Vec<&String> = full.as_object().unwrap().keys().collect();
        assert_eq!(top.len(), Section::ALL.len());
        for sec in Section::ALL {
            let mut documented: Vec<&str> = sec.keys().iter().map(|(k, _)| *k).collect();
            let mut actual: Vec<String> = match sec {
                Section::Seed => vec!["seed".into()],
                _ => full[sec.name()].as_object().unwrap().keys().cloned().collect(),
            };
            documented.sort_unstable();
            actual.sort_unstable();
            assert_eq!(documented, actual, "section {}", sec.name());
        }
    }
}
