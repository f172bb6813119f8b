//! Sectioned `key = value` run configuration.
//!
//! ```text
//! [model]
//! layers = 2
//! # comments start with '#'
//! [train]
//! seed = 7
//! ```
//!
//! Every key has a default; unknown sections or keys are errors.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{SplitSpec, SynthConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelSpec};
use crate::tokenizer::{PatchSpec, TokenScheme};
use crate::topology::PeKind;
use crate::trainer::{InnerOptimizer, OuterMode, TrainConfig};

const DEFAULTS: &[(&str, &str)] = &[
    // empty path: generate a synthetic series
    ("data.path", ""),
    ("data.split", "0.7,0.1,0.2"),
    ("data.overhang", "true"),
    ("data.synth_length", "4000"),
    ("data.synth_vars", "7"),
    ("data.synth_periods", "24,48,168"),
    ("data.synth_noise", "0.1"),
    ("data.synth_seed", "0"),
    ("model.arch", "single"),
    ("model.scheme", "variable"),
    ("model.pe", "auto"),
    ("model.layers", "2"),
    ("model.heads", "8"),
    ("model.d_model", "32"),
    ("model.d_ff", "128"),
    ("model.lookback", "96"),
    ("model.horizon", "96"),
    ("model.patch_len", "16"),
    ("model.patch_stride", "8"),
    ("model.tem", "true"),
    ("model.ln_eps", "1e-5"),
    ("model.init_raw", "-6"),
    ("train.eta1", "1e-3"),
    ("train.eta2", "1e-3"),
    ("train.batch_size", "32"),
    ("train.epochs", "40"),
    ("train.patience", "3"),
    ("train.seed", "0"),
    ("train.outer_mode", "first-order"),
    ("train.inner_optimizer", "adam"),
    ("train.window_stride", "1"),
    ("train.eval_stride", "1"),
    ("diagnose.enabled", "false"),
    ("diagnose.probes", "8"),
    ("diagnose.probe_seed", "0"),
    ("diagnose.branch", "0"),
];

/// Raw key/value store over the fixed key set, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigMap {
    values: Vec<String>,
}

impl Default for ConfigMap {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(_, v)| v.to_string()).collect(),
        }
    }
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = Self::default();
        map.merge(text)?;
        Ok(map)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies the entries of a config text on top of the current values.
    pub fn merge(&mut self, text: &str) -> Result<()> {
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !DEFAULTS.iter().any(|(k, _)| k.split('.').next() == Some(name)) {
                    return Err(Error::Config(format!("line {}: unknown section [{name}]", n + 1)));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let sec = section
                .as_deref()
                .ok_or_else(|| Error::Config(format!("line {}: key outside of a section", n + 1)))?;
            self.set(&format!("{sec}.{}", k.trim()), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let i = DEFAULTS
            .iter()
            .position(|(k, _)| *k == key)
            .ok_or_else(|| Error::Config(format!("unknown key '{key}'")))?;
        self.values[i] = value.to_string();
        Ok(())
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{kv}' is not KEY=VALUE")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        DEFAULTS.iter().position(|(k, _)| *k == key).map(|i| self.values[i].as_str())
    }

    /// Canonical text with every key spelled out.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for ((key, _), v) in DEFAULTS.iter().zip(&self.values) {
            let (sec, name) = key.split_once('.').expect("dotted key");
            if sec != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{sec}]");
                current = sec;
            }
            let _ = writeln!(out, "{name} = {v}");
        }
        out
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key).expect("known key");
        v.parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
    }

    fn boolean(&self, key: &str) -> Result<bool> {
        match self.get(key).expect("known key") {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(Error::Config(format!("{key}: expected true/false, got '{v}'"))),
        }
    }

    fn list(&self, key: &str) -> Result<Vec<f64>> {
        self.get(key)
            .expect("known key")
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Config(format!("{key}: bad number '{s}'"))))
            .collect()
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let split_text = self.get("data.split").expect("known key");
        let parts = self.list("data.split")?;
        if parts.len() != 3 {
            return Err(Error::Config("data.split needs three comma-separated values".into()));
        }
        let split = if split_text.contains('.') {
            SplitSpec::Ratios(parts[0], parts[1], parts[2])
        } else {
            SplitSpec::Counts(parts[0] as usize, parts[1] as usize, parts[2] as usize)
        };
        let path = self.get("data.path").expect("known key");
        let data = DataSection {
            path: (!path.is_empty()).then(|| path.to_string()),
            split,
            overhang: self.boolean("data.overhang")?,
            synth: SynthConfig {
                n_vars: self.parsed("data.synth_vars")?,
                length: self.parsed("data.synth_length")?,
                periods: self.list("data.synth_periods")?,
                noise_std: self.parsed("data.synth_noise")?,
                seed: self.parsed("data.synth_seed")?,
            },
        };
        let arch = match self.get("model.arch").expect("known key") {
            "single" => Arch::Single,
            "cdtf" => Arch::Cdtf,
            v => return Err(Error::Config(format!("model.arch: expected single or cdtf, got '{v}'"))),
        };
        let scheme: TokenScheme = self.parsed_with("model.scheme")?;
        let pe = match self.get("model.pe").expect("known key") {
            "auto" => None,
            v => Some(v.parse::<PeKind>().map_err(|e| Error::Config(format!("model.pe: {e}")))?),
        };
        let model = ModelSection {
            arch,
            pe,
            base: ModelConfig {
                n_layers: self.parsed("model.layers")?,
                n_heads: self.parsed("model.heads")?,
                d_model: self.parsed("model.d_model")?,
                d_ff: self.parsed("model.d_ff")?,
                scheme,
                patch: Some(PatchSpec {
                    patch_len: self.parsed("model.patch_len")?,
                    stride: self.parsed("model.patch_stride")?,
                }),
                lookback: self.parsed("model.lookback")?,
                horizon: self.parsed("model.horizon")?,
                n_vars: 0,
                pe_kind: PeKind::Sinusoidal,
                tem_enabled: self.boolean("model.tem")?,
                ln_eps: self.parsed("model.ln_eps")?,
                init_raw: self.parsed("model.init_raw")?,
            },
        };
        let train = TrainConfig {
            eta1: self.parsed("train.eta1")?,
            eta2: self.parsed("train.eta2")?,
            batch_size: self.parsed("train.batch_size")?,
            max_epochs: self.parsed("train.epochs")?,
            patience: self.parsed("train.patience")?,
            seed: self.parsed("train.seed")?,
            outer_mode: self.parsed_with::<OuterMode>("train.outer_mode")?,
            inner_optimizer: self.parsed_with::<InnerOptimizer>("train.inner_optimizer")?,
            window_stride: self.parsed("train.window_stride")?,
            eval_stride: self.parsed("train.eval_stride")?,
        };
        train.validate()?;
        let diagnose = DiagnoseSection {
            enabled: self.boolean("diagnose.enabled")?,
            probes: self.parsed("diagnose.probes")?,
            probe_seed: self.parsed("diagnose.probe_seed")?,
            branch: self.parsed("diagnose.branch")?,
        };
        if diagnose.probes == 0 {
            return Err(Error::Config("diagnose.probes must be >= 1".into()));
        }
        Ok(RunConfig {
            data,
            model,
            train,
            diagnose,
        })
    }

    fn parsed_with<T: std::str::FromStr<Err = Error>>(&self, key: &str) -> Result<T> {
        self.get(key)
            .expect("known key")
            .parse()
            .map_err(|e| Error::Config(format!("{key}: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Single,
    Cdtf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub path: Option<String>,
    pub split: SplitSpec,
    pub overhang: bool,
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub arch: Arch,
    /// `None` picks convolutional for variable tokens, sinusoidal otherwise.
    pub pe: Option<PeKind>,
    pub base: ModelConfig,
}

impl ModelSection {
    fn branch(&self, scheme: TokenScheme, n_vars: usize) -> ModelConfig {
        let pe_kind = self.pe.unwrap_or(match scheme {
            TokenScheme::Variable => PeKind::Convolutional,
            _ => PeKind::Sinusoidal,
        });
        ModelConfig {
            scheme,
            n_vars,
            pe_kind,
            patch: (scheme == TokenScheme::Patch).then_some(self.base.patch).flatten(),
            ..self.base.clone()
        }
    }

    /// Full model specification once the variable count is known.
    pub fn spec(&self, n_vars: usize) -> Result<ModelSpec> {
        let spec = match self.arch {
            Arch::Single => ModelSpec::Single(self.branch(self.base.scheme, n_vars)),
            Arch::Cdtf => ModelSpec::Cdtf {
                temporal: self.branch(TokenScheme::Temporal, n_vars),
                variable: self.branch(TokenScheme::Variable, n_vars),
            },
        };
        match &spec {
            ModelSpec::Single(c) => c.validate()?,
            ModelSpec::Cdtf { temporal, variable } => {
                temporal.validate()?;
                variable.validate()?;
            }
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnoseSection {
    pub enabled: bool,
    pub probes: usize,
    pub probe_seed: u64,
    pub branch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub diagnose: DiagnoseSection,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let rc = ConfigMap::default().resolve().unwrap();
        assert_eq!(rc.train.max_epochs, 40);
        assert_eq!(rc.train.patience, 3);
        assert_eq!(rc.train.eta2, 1e-3);
        assert_eq!(rc.model.base.n_heads, 8);
        assert_eq!((rc.model.base.lookback, rc.model.base.horizon), (96, 96));
        assert_eq!(rc.data.split, SplitSpec::Ratios(0.7, 0.1, 0.2));
        let spec = rc.model.spec(7).unwrap();
        assert!(matches!(spec, ModelSpec::Single(ref c) if c.pe_kind == PeKind::Convolutional && c.n_vars == 7));
    }

    #[test]
    fn file_values_then_overrides() {
        let mut m = ConfigMap::parse("[train]\nseed = 3 # inline\nepochs=5\n\n[data]\nsplit = 8545,2881,2881\n").unwrap();
        m.apply_override("train.seed=9").unwrap();
        let rc = m.resolve().unwrap();
        assert_eq!((rc.train.seed, rc.train.max_epochs), (9, 5));
        assert_eq!(rc.data.split, SplitSpec::Counts(8545, 2881, 2881));
    }

    #[test]
    fn unknown_keys_and_sections_fail() {
        assert!(ConfigMap::parse("[train]\nsed = 3\n").is_err());
        assert!(ConfigMap::parse("[nope]\n").is_err());
        assert!(ConfigMap::parse("seed = 3\n").is_err());
        assert!(ConfigMap::default().apply_override("model.layerz=3").is_err());
        assert!(ConfigMap::default().apply_override("model.layers").is_err());
    }

    #[test]
    fn invalid_combination_fails() {
        let m = ConfigMap::parse("[train]\nouter_mode = exact\ninner_optimizer = adam\n").unwrap();
        assert!(matches!(m.resolve(), Err(Error::Unsupported(_))));
        let m = ConfigMap::parse("[model]\ntem = maybe\n").unwrap();
        assert!(m.resolve().is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let mut m = ConfigMap::default();
        m.apply_override("model.arch=cdtf").unwrap();
        m.apply_override("data.synth_periods=12,30").unwrap();
        let again = ConfigMap::parse(&m.to_text()).unwrap();
        assert_eq!(again, m);
        let spec = again.resolve().unwrap().model.spec(3).unwrap();
        assert!(matches!(spec, ModelSpec::Cdtf { .. }));
    }
}
