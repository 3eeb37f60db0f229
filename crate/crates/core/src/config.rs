//! Experiment configuration: a flat TOML file whose defaults reproduce the
//! reference experimental setup (10 clients, 100 rounds, 5 local epochs,
//! batch 64, learning rate 0.005, seed 13, full participation).

use serde::{Deserialize, Serialize};

use crate::error::{Result, SentinelError};
use crate::loss::DeltaMode;
use crate::metrics::MacroMode;
use crate::model::Variant;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    /// `synthetic` or `csv`.
    pub source: String,
    pub csv_path: Option<String>,
    pub label_column: Option<String>,
    pub synth_counts: Vec<usize>,
    pub synth_features: usize,
    pub synth_separation: f64,

    pub num_clients: usize,
    pub rounds: u64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// `sentinel-1`, `sentinel-2` or `fedavg`.
    pub variant: String,
    /// Dirichlet concentration; `inf` selects the IID equal-size partition.
    pub alpha: f64,
    pub seed: u64,
    pub rho: f64,
    pub p_drop: f64,
    pub t_thresh: f64,
    pub eta: f64,
    pub beta_momentum: f64,

    pub use_balanced: Option<bool>,
    pub use_kd: Option<bool>,
    pub use_align: Option<bool>,

    pub out_dir: String,
    pub threads: usize,
    pub train_fraction: f64,
    pub min_per_client: usize,
    pub bank_capacity: usize,
    pub clip_max_norm: f64,
    pub lr_decay: f64,
    pub reset_student_opt: bool,
    pub balance_beta: f64,
    /// `mean-product` (default) or `geometric-mean`.
    pub delta_mode: String,
    /// `all-classes` (default) or `present-only`.
    pub macro_mode: String,
    /// `local` (per-client fit, default) or `global`.
    pub scaler_scope: String,
    /// When set, replaces measured wall time as every client's `t_c`;
    /// makes report files byte-deterministic.
    pub synthetic_time_s: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            source: "synthetic".into(),
            csv_path: None,
            label_column: None,
            synth_counts: vec![2000, 400, 200, 100],
            synth_features: 20,
            synth_separation: 3.0,
            num_clients: 10,
            rounds: 100,
            local_epochs: 5,
            batch_size: 64,
            lr: 0.005,
            variant: "sentinel-1".into(),
            alpha: 1.0,
            seed: 13,
            rho: 1.0,
            p_drop: 0.0,
            t_thresh: 10_000.0,
            eta: 1.0,
            beta_momentum: 0.9,
            use_balanced: None,
            use_kd: None,
            use_align: None,
            out_dir: "out".into(),
            threads: 1,
            train_fraction: 0.8,
            min_per_client: 10,
            bank_capacity: 1024,
            clip_max_norm: 1.0,
            lr_decay: 1.0,
            reset_student_opt: false,
            balance_beta: 0.999,
            delta_mode: "mean-product".into(),
            macro_mode: "all-classes".into(),
            scaler_scope: "local".into(),
            synthetic_time_s: None,
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "source",
    "csv_path",
    "label_column",
    "synth_counts",
    "synth_features",
    "synth_separation",
    "num_clients",
    "rounds",
    "local_epochs",
    "batch_size",
    "lr",
    "variant",
    "alpha",
    "seed",
    "rho",
    "p_drop",
    "t_thresh",
    "eta",
    "beta_momentum",
    "use_balanced",
    "use_kd",
    "use_align",
    "out_dir",
    "threads",
    "train_fraction",
    "min_per_client",
    "bank_capacity",
    "clip_max_norm",
    "lr_decay",
    "reset_student_opt",
    "balance_beta",
    "delta_mode",
    "macro_mode",
    "scaler_scope",
    "synthetic_time_s",
];

impl RunConfig {
    /// Parse and validate a flat TOML document, rejecting unknown keys.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| SentinelError::Config(format!("TOML parse error: {e}")))?;
        let unknown: Vec<String> = table
            .keys()
            .filter(|k| !KNOWN_KEYS.contains(&k.as_str()))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(SentinelError::Config(format!(
                "unknown configuration keys: {}",
                unknown.join(", ")
            )));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| SentinelError::Config(format!("invalid configuration value: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &str) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| SentinelError::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let variant = Variant::parse(&self.variant);
        if variant.is_err() {
            problems.push(format!("variant: '{}' is not recognized", self.variant));
        }
        if let Ok(Variant::FedAvg) = variant {
            for (key, value) in [
                ("use_balanced", self.use_balanced),
                ("use_kd", self.use_kd),
                ("use_align", self.use_align),
            ] {
                if value == Some(true) {
                    problems.push(format!(
                        "{key}: incompatible with variant=fedavg (single-model baseline)"
                    ));
                }
            }
        }
        match self.source.as_str() {
            "synthetic" => {
                if self.synth_counts.is_empty() || self.synth_counts.iter().any(|&n| n == 0) {
                    problems.push("synth_counts: every class needs at least one sample".into());
                }
                if self.synth_features == 0 {
                    problems.push("synth_features: must be at least 1".into());
                }
            }
            "csv" => {
                if self.csv_path.is_none() {
                    problems.push("csv_path: required when source=csv".into());
                }
                if self.label_column.is_none() {
                    problems.push("label_column: required when source=csv".into());
                }
            }
            other => problems.push(format!("source: '{other}' is not 'synthetic' or 'csv'")),
        }
        if self.num_clients == 0 {
            problems.push("num_clients: must be at least 1".into());
        }
        if self.batch_size == 0 {
            problems.push("batch_size: must be at least 1".into());
        }
        if !(self.lr > 0.0) {
            problems.push("lr: must be positive".into());
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            problems.push("rho: must lie in (0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            problems.push("p_drop: must lie in [0, 1)".into());
        }
        if !(self.alpha > 0.0) {
            problems.push("alpha: must be positive (or inf for IID)".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            problems.push("train_fraction: must lie in (0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.balance_beta) {
            problems.push("balance_beta: must lie in [0, 1)".into());
        }
        if !(self.eta > 0.0) {
            problems.push("eta: must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta_momentum) {
            problems.push("beta_momentum: must lie in [0, 1)".into());
        }
        if self.parse_delta_mode().is_err() {
            problems.push(format!("delta_mode: '{}' is not recognized", self.delta_mode));
        }
        if self.parse_macro_mode().is_err() {
            problems.push(format!("macro_mode: '{}' is not recognized", self.macro_mode));
        }
        if !["local", "global"].contains(&self.scaler_scope.as_str()) {
            problems.push(format!("scaler_scope: '{}' is not 'local' or 'global'", self.scaler_scope));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SentinelError::Config(format!(
                "invalid configuration: {}",
                problems.join("; ")
            )))
        }
    }

    pub fn parse_variant(&self) -> Result<Variant> {
        Variant::parse(&self.variant)
    }

    pub fn parse_delta_mode(&self) -> Result<DeltaMode> {
        match self.delta_mode.as_str() {
            "mean-product" => Ok(DeltaMode::MeanProduct),
            "geometric-mean" => Ok(DeltaMode::GeometricMean),
            other => Err(SentinelError::Config(format!("unknown delta_mode '{other}'"))),
        }
    }

    pub fn parse_macro_mode(&self) -> Result<MacroMode> {
        match self.macro_mode.as_str() {
            "all-classes" => Ok(MacroMode::AllClasses),
            "present-only" => Ok(MacroMode::PresentOnly),
            other => Err(SentinelError::Config(format!("unknown macro_mode '{other}'"))),
        }
    }

    /// Effective ablation flags: on by default for the dual-model variants,
    /// forced off for the baseline.
    pub fn effective_flags(&self) -> (bool, bool, bool) {
        match self.parse_variant() {
            Ok(Variant::FedAvg) => (false, false, false),
            _ => (
                self.use_balanced.unwrap_or(true),
                self.use_kd.unwrap_or(true),
                self.use_align.unwrap_or(true),
            ),
        }
    }

    /// Copy with every optional flag resolved; what the echo file records.
    pub fn effective(&self) -> RunConfig {
        let (balanced, kd, align) = self.effective_flags();
        let mut out = self.clone();
        out.use_balanced = Some(balanced);
        out.use_kd = Some(kd);
        out.use_align = Some(align);
        out
    }

    /// Serialize back to the flat TOML format.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SentinelError::Config(format!("serialize: {e}")))
    }

    /// Overwrite a single key from its TOML value text (e.g. `"0.1"` or
    /// `"\"fedavg\""`), then re-validate the whole configuration.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(SentinelError::Config(format!(
                "unknown configuration keys: {key}"
            )));
        }
        let mut table: toml::Table = self
            .to_toml()?
            .parse()
            .map_err(|e| SentinelError::Config(format!("serialized config reparse: {e}")))?;
        let wrapper: toml::Table = format!("v = {value}")
            .parse()
            .map_err(|e| SentinelError::Config(format!("invalid TOML value for {key}: {e}")))?;
        let v = wrapper
            .get("v")
            .cloned()
            .ok_or_else(|| SentinelError::Config(format!("empty value for {key}")))?;
        table.insert(key.to_string(), v);
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| SentinelError::Config(format!("invalid value for {key}: {e}")))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_setup() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.num_clients, 10);
        assert_eq!(cfg.rounds, 100);
        assert_eq!(cfg.local_epochs, 5);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.lr, 0.005);
        assert_eq!(cfg.seed, 13);
        assert_eq!(cfg.rho, 1.0);
        assert_eq!(cfg.p_drop, 0.0);
        assert_eq!(cfg.t_thresh, 10_000.0);
        assert_eq!(cfg.eta, 1.0);
        assert_eq!(cfg.beta_momentum, 0.9);
        cfg.validate().unwrap();
    }

    #[test]
    fn parse_round_trip_is_semantically_identical() {
        let text = "variant = \"sentinel-2\"\nalpha = 0.1\nrounds = 30\nseed = 7\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.alpha, 0.1);
        let echoed = cfg.effective().to_toml().unwrap();
        let reparsed = RunConfig::parse(&echoed).unwrap();
        assert_eq!(reparsed.effective(), cfg.effective());
    }

    #[test]
    fn unknown_keys_are_listed() {
        let err = RunConfig::parse("rounds = 5\nbogus_key = 1\nother_bad = 2\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus_key") && msg.contains("other_bad"), "{msg}");
    }

    #[test]
    fn fedavg_rejects_distillation_flags() {
        let err = RunConfig::parse("variant = \"fedavg\"\nuse_kd = true\n").unwrap_err();
        assert!(err.to_string().contains("use_kd"), "{err}");
        // explicit false is fine
        RunConfig::parse("variant = \"fedavg\"\nuse_kd = false\n").unwrap();
    }

    #[test]
    fn infinite_alpha_parses_as_iid() {
        let cfg = RunConfig::parse("alpha = inf\n").unwrap();
        assert!(cfg.alpha.is_infinite());
    }

    #[test]
    fn csv_source_requires_path_and_label() {
        let err = RunConfig::parse("source = \"csv\"\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("csv_path") && msg.contains("label_column"), "{msg}");
    }
}
