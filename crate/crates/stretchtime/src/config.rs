//! Experiment configuration: a flat, line-oriented `key = value` file with
//! `#` comments. Unknown keys are rejected; every run writes the fully
//! resolved configuration (defaults included) next to its outputs, and that
//! sidecar re-parses to the identical configuration.

use crate::attention::{PeKind, WarpMode};
use crate::data::{default_phases, SyntheticConfig};
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("{path}: unknown key `{key}`")]
    UnknownKey { path: String, key: String },
    #[error("{path}: key `{key}`: {detail}")]
    BadValue {
        path: String,
        key: String,
        detail: String,
    },
}

/// Where the series comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Csv(PathBuf),
}

/// Complete experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub synth: SyntheticConfig,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    pub lookback: usize,
    pub horizons: Vec<usize>,
    pub d_model: usize,
    pub d_global: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub pe_mode: PeKind,
    pub warp_mode: WarpMode,
    pub use_mlp: bool,
    pub dropout: f64,
    pub channel_dropout_min_keep: f64,
    pub train: TrainConfig,
    pub compare_seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// Synthetic desk-scale defaults.
    pub fn default_synthetic() -> Self {
        let synth = SyntheticConfig::default_desk();
        let mut train = TrainConfig::default_for_lr(2e-4);
        train.max_epochs = 10;
        ExperimentConfig {
            data: DataSource::Synthetic,
            synth,
            train_ratio: 0.7,
            val_ratio: 0.1,
            test_ratio: 0.2,
            lookback: 96,
            horizons: vec![96, 336],
            d_model: 64,
            d_global: 32,
            n_layers: 1,
            n_heads: 4,
            pe_mode: PeKind::Sype,
            warp_mode: WarpMode::Adaptive,
            use_mlp: true,
            dropout: 0.1,
            channel_dropout_min_keep: 0.5,
            train,
            compare_seeds: vec![2026, 2027, 2028],
            out_dir: PathBuf::from("runs/synthetic"),
        }
    }

    /// The model architecture for one forecast horizon.
    pub fn model_config(&self, horizon: usize, channels: usize) -> ModelConfig {
        ModelConfig {
            lookback: self.lookback,
            horizon,
            channels,
            d_model: self.d_model,
            d_global: self.d_global,
            d_local: self.d_model - self.d_global,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            pe_kind: self.pe_mode,
            warp_mode: self.warp_mode,
            use_mlp: self.use_mlp,
            dropout_rate: self.dropout,
            channel_dropout_min_keep: self.channel_dropout_min_keep,
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let pstr = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: pstr.clone(),
            source,
        })?;
        Self::from_str_named(&text, &pstr)
    }

    /// Parse from text; `origin` labels errors (file name or "<inline>").
    pub fn from_str_named(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse {
                path: origin.into(),
                detail: e.to_string(),
            })?;

        let known: BTreeSet<&str> = KNOWN_KEYS.iter().copied().collect();
        for key in table.keys() {
            if !known.contains(key.as_str()) {
                return Err(ConfigError::UnknownKey {
                    path: origin.into(),
                    key: key.clone(),
                });
            }
        }

        let bad = |key: &str, detail: String| ConfigError::BadValue {
            path: origin.into(),
            key: key.into(),
            detail,
        };
        let get_usize = |key: &str, default: usize| -> Result<usize, ConfigError> {
            match table.get(key) {
                None => Ok(default),
                Some(toml::Value::Integer(i)) if *i >= 0 => Ok(*i as usize),
                Some(v) => Err(bad(key, format!("expected non-negative integer, got {v}"))),
            }
        };
        let get_u64 = |key: &str, default: u64| -> Result<u64, ConfigError> {
            match table.get(key) {
                None => Ok(default),
                Some(toml::Value::Integer(i)) if *i >= 0 => Ok(*i as u64),
                Some(v) => Err(bad(key, format!("expected non-negative integer, got {v}"))),
            }
        };
        let get_f64 = |key: &str, default: f64| -> Result<f64, ConfigError> {
            match table.get(key) {
                None => Ok(default),
                Some(toml::Value::Float(f)) => Ok(*f),
                Some(toml::Value::Integer(i)) => Ok(*i as f64),
                Some(v) => Err(bad(key, format!("expected number, got {v}"))),
            }
        };
        let get_bool = |key: &str, default: bool| -> Result<bool, ConfigError> {
            match table.get(key) {
                None => Ok(default),
                Some(toml::Value::Boolean(b)) => Ok(*b),
                Some(v) => Err(bad(key, format!("expected bool, got {v}"))),
            }
        };
        let get_str = |key: &str| -> Result<Option<&str>, ConfigError> {
            match table.get(key) {
                None => Ok(None),
                Some(toml::Value::String(s)) => Ok(Some(s.as_str())),
                Some(v) => Err(bad(key, format!("expected string, got {v}"))),
            }
        };

        let defaults = Self::default_synthetic();

        let data = match get_str("data")? {
            None | Some("synthetic") => DataSource::Synthetic,
            Some(p) => DataSource::Csv(PathBuf::from(p)),
        };
        let synthetic = data == DataSource::Synthetic;

        let channels = get_usize("channels", defaults.synth.channels)?;
        let mut synth = SyntheticConfig {
            length: get_usize("length", defaults.synth.length)?,
            channels,
            phi: get_f64("phi", defaults.synth.phi)?,
            amplitude: get_f64("amplitude", defaults.synth.amplitude)?,
            omega0: get_f64("omega0", defaults.synth.omega0)?,
            noise_std: get_f64("noise_std", defaults.synth.noise_std)?,
            warp_amplitude: get_f64("warp_amplitude", defaults.synth.warp_amplitude)?,
            warp_period: get_usize("warp_period", defaults.synth.warp_period)?,
            phases: default_phases(channels),
            seed: get_u64("data_seed", defaults.synth.seed)?,
        };
        if let Some(toml::Value::Array(a)) = table.get("phases") {
            let mut phases = Vec::with_capacity(a.len());
            for v in a {
                match v {
                    toml::Value::Float(f) => phases.push(*f),
                    toml::Value::Integer(i) => phases.push(*i as f64),
                    other => return Err(bad("phases", format!("expected numbers, got {other}"))),
                }
            }
            synth.phases = phases;
        } else if let Some(v) = table.get("phases") {
            return Err(bad("phases", format!("expected array, got {v}")));
        }

        let horizons = match table.get("horizons") {
            None => defaults.horizons.clone(),
            Some(toml::Value::Array(a)) => {
                let mut hs = Vec::with_capacity(a.len());
                for v in a {
                    match v {
                        toml::Value::Integer(i) if *i > 0 => hs.push(*i as usize),
                        other => {
                            return Err(bad(
                                "horizons",
                                format!("expected positive integers, got {other}"),
                            ))
                        }
                    }
                }
                hs
            }
            Some(v) => return Err(bad("horizons", format!("expected array, got {v}"))),
        };
        let compare_seeds = match table.get("compare_seeds") {
            None => defaults.compare_seeds.clone(),
            Some(toml::Value::Array(a)) => {
                let mut ss = Vec::with_capacity(a.len());
                for v in a {
                    match v {
                        toml::Value::Integer(i) if *i >= 0 => ss.push(*i as u64),
                        other => {
                            return Err(bad(
                                "compare_seeds",
                                format!("expected non-negative integers, got {other}"),
                            ))
                        }
                    }
                }
                ss
            }
            Some(v) => return Err(bad("compare_seeds", format!("expected array, got {v}"))),
        };

        let pe_mode = match get_str("pe_mode")? {
            None => defaults.pe_mode,
            Some("sype") => PeKind::Sype,
            Some("rope") => PeKind::Rope,
            Some("none") => PeKind::None,
            Some(other) => {
                return Err(bad(
                    "pe_mode",
                    format!("expected sype|rope|none, got {other}"),
                ))
            }
        };
        // rope and none default to the static clock; sype defaults to the
        // adaptive warp. An explicit key overrides either way (rope +
        // adaptive is the w/o-Symplectic ablation).
        let warp_default = if pe_mode == PeKind::Sype {
            WarpMode::Adaptive
        } else {
            WarpMode::Identity
        };
        let warp_mode = match get_str("warp_mode")? {
            None => warp_default,
            Some("adaptive") => WarpMode::Adaptive,
            Some("identity") => WarpMode::Identity,
            Some(other) => {
                return Err(bad(
                    "warp_mode",
                    format!("expected adaptive|identity, got {other}"),
                ))
            }
        };

        let d_model = get_usize("d_model", defaults.d_model)?;
        let d_global = get_usize("d_global", d_model / 2)?;

        let default_lr = if synthetic { 2e-4 } else { 5e-4 };
        let learning_rate = get_f64("learning_rate", default_lr)?;
        let effective_batch = get_usize("effective_batch", 32)?;
        let train = TrainConfig {
            learning_rate,
            effective_batch,
            physical_batch: get_usize("physical_batch", effective_batch)?,
            max_epochs: get_usize("max_epochs", defaults.train.max_epochs)?,
            patience: get_usize("patience", 12)?,
            seed: get_u64("seed", 2026)?,
            weight_decay: get_f64("weight_decay", 0.01)?,
            beta1: get_f64("beta1", 0.9)?,
            beta2: get_f64("beta2", 0.999)?,
            epsilon: get_f64("epsilon", 1e-8)?,
            lr_floor: get_f64("lr_floor", learning_rate / 100.0)?,
            train_stride: get_usize("train_stride", 1)?,
            eval_stride: get_usize("eval_stride", 1)?,
            threads: get_usize("threads", 1)?,
            progress: false,
        };

        Ok(ExperimentConfig {
            data,
            synth,
            train_ratio: get_f64("train_ratio", defaults.train_ratio)?,
            val_ratio: get_f64("val_ratio", defaults.val_ratio)?,
            test_ratio: get_f64("test_ratio", defaults.test_ratio)?,
            lookback: get_usize("lookback", defaults.lookback)?,
            horizons,
            d_model,
            d_global,
            n_layers: get_usize("n_layers", defaults.n_layers)?,
            n_heads: get_usize("n_heads", defaults.n_heads)?,
            pe_mode,
            warp_mode,
            use_mlp: get_bool("use_mlp", true)?,
            dropout: get_f64("dropout", defaults.dropout)?,
            channel_dropout_min_keep: get_f64(
                "channel_dropout_min_keep",
                defaults.channel_dropout_min_keep,
            )?,
            train,
            compare_seeds,
            out_dir: PathBuf::from(get_str("out_dir")?.unwrap_or("runs/run")),
        })
    }

    /// Fully resolved text form; parses back to an identical config.
    pub fn to_config_text(&self) -> String {
        let mut s = String::new();
        let kv = |s: &mut String, k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        let fnum = |v: f64| -> String {
            // Keep a float marker so toml re-parses the same type.
            let t = format!("{v}");
            if t.contains('.') || t.contains('e') || t.contains("inf") || t.contains("nan") {
                t
            } else {
                format!("{t}.0")
            }
        };
        s.push_str("# resolved experiment configuration\n");
        match &self.data {
            DataSource::Synthetic => kv(&mut s, "data", "\"synthetic\"".into()),
            DataSource::Csv(p) => kv(&mut s, "data", format!("{:?}", p.display().to_string())),
        }
        kv(&mut s, "length", self.synth.length.to_string());
        kv(&mut s, "channels", self.synth.channels.to_string());
        kv(&mut s, "phi", fnum(self.synth.phi));
        kv(&mut s, "amplitude", fnum(self.synth.amplitude));
        kv(&mut s, "omega0", fnum(self.synth.omega0));
        kv(&mut s, "noise_std", fnum(self.synth.noise_std));
        kv(&mut s, "warp_amplitude", fnum(self.synth.warp_amplitude));
        kv(&mut s, "warp_period", self.synth.warp_period.to_string());
        let phases: Vec<String> = self.synth.phases.iter().map(|p| fnum(*p)).collect();
        kv(&mut s, "phases", format!("[{}]", phases.join(", ")));
        kv(&mut s, "data_seed", self.synth.seed.to_string());
        kv(&mut s, "train_ratio", fnum(self.train_ratio));
        kv(&mut s, "val_ratio", fnum(self.val_ratio));
        kv(&mut s, "test_ratio", fnum(self.test_ratio));
        kv(&mut s, "lookback", self.lookback.to_string());
        let hs: Vec<String> = self.horizons.iter().map(|h| h.to_string()).collect();
        kv(&mut s, "horizons", format!("[{}]", hs.join(", ")));
        kv(&mut s, "d_model", self.d_model.to_string());
        kv(&mut s, "d_global", self.d_global.to_string());
        kv(&mut s, "n_layers", self.n_layers.to_string());
        kv(&mut s, "n_heads", self.n_heads.to_string());
        let pe = match self.pe_mode {
            PeKind::Sype => "sype",
            PeKind::Rope => "rope",
            PeKind::None => "none",
        };
        kv(&mut s, "pe_mode", format!("\"{pe}\""));
        let wm = match self.warp_mode {
            WarpMode::Adaptive => "adaptive",
            WarpMode::Identity => "identity",
        };
        kv(&mut s, "warp_mode", format!("\"{wm}\""));
        kv(&mut s, "use_mlp", self.use_mlp.to_string());
        kv(&mut s, "dropout", fnum(self.dropout));
        kv(
            &mut s,
            "channel_dropout_min_keep",
            fnum(self.channel_dropout_min_keep),
        );
        kv(&mut s, "learning_rate", fnum(self.train.learning_rate));
        kv(
            &mut s,
            "effective_batch",
            self.train.effective_batch.to_string(),
        );
        kv(
            &mut s,
            "physical_batch",
            self.train.physical_batch.to_string(),
        );
        kv(&mut s, "max_epochs", self.train.max_epochs.to_string());
        kv(&mut s, "patience", self.train.patience.to_string());
        kv(&mut s, "seed", self.train.seed.to_string());
        kv(&mut s, "weight_decay", fnum(self.train.weight_decay));
        kv(&mut s, "beta1", fnum(self.train.beta1));
        kv(&mut s, "beta2", fnum(self.train.beta2));
        kv(&mut s, "epsilon", fnum(self.train.epsilon));
        kv(&mut s, "lr_floor", fnum(self.train.lr_floor));
        kv(&mut s, "train_stride", self.train.train_stride.to_string());
        kv(&mut s, "eval_stride", self.train.eval_stride.to_string());
        kv(&mut s, "threads", self.train.threads.to_string());
        let seeds: Vec<String> = self.compare_seeds.iter().map(|x| x.to_string()).collect();
        kv(&mut s, "compare_seeds", format!("[{}]", seeds.join(", ")));
        kv(
            &mut s,
            "out_dir",
            format!("{:?}", self.out_dir.display().to_string()),
        );
        s
    }

    pub fn write_resolved(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_config_text()).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

const KNOWN_KEYS: &[&str] = &[
    "data",
    "length",
    "channels",
    "phi",
    "amplitude",
    "omega0",
    "noise_std",
    "warp_amplitude",
    "warp_period",
    "phases",
    "data_seed",
    "train_ratio",
    "val_ratio",
    "test_ratio",
    "lookback",
    "horizons",
    "d_model",
    "d_global",
    "n_layers",
    "n_heads",
    "pe_mode",
    "warp_mode",
    "use_mlp",
    "dropout",
    "channel_dropout_min_keep",
    "learning_rate",
    "effective_batch",
    "physical_batch",
    "max_epochs",
    "patience",
    "seed",
    "weight_decay",
    "beta1",
    "beta2",
    "epsilon",
    "lr_floor",
    "train_stride",
    "eval_stride",
    "threads",
    "compare_seeds",
    "out_dir",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_keys() {
        let cfg = ExperimentConfig::from_str_named("", "<inline>").unwrap();
        assert_eq!(cfg.data, DataSource::Synthetic);
        assert_eq!(cfg.train.learning_rate, 2e-4, "synthetic lr default");
        assert_eq!(cfg.train.patience, 12);
        assert_eq!(cfg.train.seed, 2026);
        assert_eq!(cfg.horizons, vec![96, 336]);
        assert_eq!(cfg.warp_mode, WarpMode::Adaptive);
    }

    #[test]
    fn csv_source_changes_lr_default() {
        let cfg = ExperimentConfig::from_str_named("data = \"some/file.csv\"", "<inline>").unwrap();
        assert_eq!(cfg.data, DataSource::Csv(PathBuf::from("some/file.csv")));
        assert_eq!(cfg.train.learning_rate, 5e-4);
    }

    #[test]
    fn rope_defaults_to_identity_warp_but_can_combine() {
        let cfg = ExperimentConfig::from_str_named("pe_mode = \"rope\"", "<inline>").unwrap();
        assert_eq!(cfg.warp_mode, WarpMode::Identity);
        let ablation = ExperimentConfig::from_str_named(
            "pe_mode = \"rope\"\nwarp_mode = \"adaptive\"",
            "<inline>",
        )
        .unwrap();
        assert_eq!(ablation.warp_mode, WarpMode::Adaptive);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_str_named("lookbck = 96", "<inline>").unwrap_err();
        match err {
            ConfigError::UnknownKey { key, .. } => assert_eq!(key, "lookbck"),
            other => panic!("expected UnknownKey, got {other}"),
        }
    }

    #[test]
    fn type_errors_name_the_key() {
        let err = ExperimentConfig::from_str_named("lookback = \"big\"", "<inline>").unwrap_err();
        match err {
            ConfigError::BadValue { key, .. } => assert_eq!(key, "lookback"),
            other => panic!("expected BadValue, got {other}"),
        }
    }

    #[test]
    fn comments_and_values_parse() {
        let text = "# an experiment\nlookback = 48\nhorizons = [24, 48]\ndropout = 0.0\n";
        let cfg = ExperimentConfig::from_str_named(text, "<inline>").unwrap();
        assert_eq!(cfg.lookback, 48);
        assert_eq!(cfg.horizons, vec![24, 48]);
        assert_eq!(cfg.dropout, 0.0);
    }

    #[test]
    fn resolved_text_roundtrips_exactly() {
        let mut cfg = ExperimentConfig::default_synthetic();
        cfg.horizons = vec![24];
        cfg.train.learning_rate = 3.5e-4;
        cfg.train.lr_floor = 3.5e-6;
        cfg.pe_mode = PeKind::Rope;
        cfg.warp_mode = WarpMode::Adaptive;
        cfg.out_dir = PathBuf::from("runs/x");
        let text = cfg.to_config_text();
        let back = ExperimentConfig::from_str_named(&text, "<inline>").unwrap();
        assert_eq!(back, cfg);
        // And the sidecar of the sidecar is byte-identical.
        assert_eq!(back.to_config_text(), text);
    }

    #[test]
    fn model_config_projection() {
        let cfg = ExperimentConfig::default_synthetic();
        let mc = cfg.model_config(96, 3);
        assert_eq!(mc.horizon, 96);
        assert_eq!(mc.channels, 3);
        assert_eq!(mc.d_global + mc.d_local, mc.d_model);
        mc.validate().unwrap();
    }
}
