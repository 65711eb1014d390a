//! Flat `key=value` run configuration.
//!
//! Resolution order: preset, then the config file, then command-line flags.
//! The resolved configuration is echoed into every output directory in the
//! same syntax, so `--config <out>/config.txt` reproduces a run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cap_core::model::HeadVariant;
use cap_core::synthetic::STANDARD_SUITE;
use cap_core::trainer::TrainingConfig;

use crate::error::{CliError, CliResult};

pub const KEYS: &[&str] = &[
    "preset",
    "k",
    "lambda",
    "lr",
    "batch",
    "epochs",
    "seed",
    "head",
    "attention",
    "beta1",
    "beta2",
    "epsilon",
    "euclid_per_dim",
    "bank",
    "model",
    "test",
    "maps",
    "input",
    "out",
    "suite",
    "sweep",
    "values",
    "size",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    K,
    Lambda,
}

impl Sweep {
    pub fn name(self) -> &'static str {
        match self {
            Sweep::K => "k",
            Sweep::Lambda => "lambda",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            Sweep::K => vec![1.0, 4.0, 8.0, 16.0, 32.0, 64.0],
            Sweep::Lambda => vec![0.0, 0.1, 1.0, 2.0, 10.0, 100.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub training: TrainingConfig,
    /// Whether `k` was set explicitly rather than inherited from the preset.
    pub k_explicit: bool,
    pub bank: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub maps: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub suite: Option<String>,
    pub sweep: Option<Sweep>,
    pub values: Option<Vec<f64>>,
    pub size: (usize, usize),
}

fn parse<T: FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| CliError::usage(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> CliResult<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(CliError::usage(format!("invalid value {value:?} for {key}"))),
    }
}

fn parse_size(value: &str) -> CliResult<(usize, usize)> {
    let (h, w) = value.split_once('x').unwrap_or((value, value));
    let h: usize = parse("size", h)?;
    let w: usize = parse("size", w)?;
    if h == 0 || w == 0 {
        return Err(CliError::usage("size must be positive"));
    }
    Ok((h, w))
}

/// Parses config-file text into ordered `(key, value)` pairs.
pub fn parse_file_text(text: &str) -> CliResult<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("config line {}: expected key=value", lineno + 1)))?;
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(CliError::usage(format!("config line {}: unknown key {key:?}", lineno + 1)));
        }
        pairs.push((key.to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

impl RunConfig {
    pub fn from_preset(name: &str) -> CliResult<Self> {
        let training = TrainingConfig::preset(name).map_err(|_| {
            CliError::usage(format!(
                "unknown preset {name:?} (expected one of {})",
                TrainingConfig::PRESETS.join(", ")
            ))
        })?;
        Ok(Self {
            preset: name.to_string(),
            training,
            k_explicit: false,
            bank: None,
            model: None,
            test: None,
            maps: None,
            input: None,
            out: None,
            suite: None,
            sweep: None,
            values: None,
            size: (224, 224),
        })
    }

    /// Builds a config from file pairs and flag pairs; a `preset` in either
    /// source is applied first.
    pub fn resolve(file: &[(String, String)], flags: &[(String, String)]) -> CliResult<Self> {
        let find = |pairs: &[(String, String)]| {
            pairs
                .iter()
                .rev()
                .find(|(k, _)| k == "preset")
                .map(|(_, v)| v.clone())
        };
        let preset = find(flags).or_else(|| find(file)).unwrap_or_else(|| "cifar".to_string());
        let preset = preset.as_str();
        let mut config = Self::from_preset(preset)?;
        for (key, value) in file.iter().chain(flags) {
            if key != "preset" {
                config.apply(key, value)?;
            }
        }
        config.training.validate()?;
        Ok(config)
    }

    pub fn apply(&mut self, key: &str, value: &str) -> CliResult<()> {
        let t = &mut self.training;
        match key {
            "k" => {
                t.k = parse(key, value)?;
                self.k_explicit = true;
            }
            "lambda" => t.lambda = parse(key, value)?,
            "lr" => t.learning_rate = parse(key, value)?,
            "batch" => t.batch_size = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "head" => t.head_variant = HeadVariant::from_str(value).map_err(|_| {
                CliError::usage(format!("invalid head {value:?} (expected l, l-relu or l-relu-l)"))
            })?,
            "attention" => t.attention_enabled = parse_bool(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "epsilon" => t.epsilon = parse(key, value)?,
            "euclid_per_dim" => t.euclid_per_dim = parse_bool(key, value)?,
            "bank" => self.bank = Some(PathBuf::from(value)),
            "model" => self.model = Some(PathBuf::from(value)),
            "test" => self.test = Some(PathBuf::from(value)),
            "maps" => self.maps = Some(PathBuf::from(value)),
            "input" => self.input = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "suite" => {
                if value != STANDARD_SUITE {
                    return Err(CliError::usage(format!(
                        "unknown synthetic suite {value:?} (expected {STANDARD_SUITE})"
                    )));
                }
                self.suite = Some(value.to_string());
            }
            "sweep" => {
                self.sweep = Some(match value {
                    "k" => Sweep::K,
                    "lambda" => Sweep::Lambda,
                    _ => return Err(CliError::usage(format!("invalid sweep {value:?} (expected k or lambda)"))),
                })
            }
            "values" => {
                let values = value
                    .split(',')
                    .map(|v| parse::<f64>(key, v.trim()))
                    .collect::<CliResult<Vec<_>>>()?;
                if values.is_empty() {
                    return Err(CliError::usage("values must not be empty"));
                }
                self.values = Some(values);
            }
            "size" => self.size = parse_size(value)?,
            "preset" => return Err(CliError::usage("preset must be applied before other keys")),
            other => return Err(CliError::usage(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn require<'a>(&self, path: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
        path.as_deref()
            .ok_or_else(|| CliError::usage(format!("missing required --{flag}")))
    }

    /// The fully resolved configuration in config-file syntax.
    pub fn echo(&self) -> String {
        let t = &self.training;
        let mut out = String::new();
        let mut put = |key: &str, value: String| {
            writeln!(out, "{key}={value}").expect("string write");
        };
        put("preset", self.preset.clone());
        put("k", t.k.to_string());
        put("lambda", t.lambda.to_string());
        put("lr", t.learning_rate.to_string());
        put("batch", t.batch_size.to_string());
        put("epochs", t.epochs.to_string());
        put("seed", t.seed.to_string());
        put("head", t.head_variant.as_str().to_string());
        put("attention", t.attention_enabled.to_string());
        put("beta1", t.beta1.to_string());
        put("beta2", t.beta2.to_string());
        put("epsilon", t.epsilon.to_string());
        put("euclid_per_dim", t.euclid_per_dim.to_string());
        for (key, path) in [
            ("bank", &self.bank),
            ("model", &self.model),
            ("test", &self.test),
            ("maps", &self.maps),
            ("input", &self.input),
            ("out", &self.out),
        ] {
            if let Some(p) = path {
                put(key, p.display().to_string());
            }
        }
        if let Some(s) = &self.suite {
            put("suite", s.clone());
        }
        if let Some(s) = self.sweep {
            put("sweep", s.name().to_string());
        }
        if let Some(v) = &self.values {
            put("values", v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","));
        }
        put("size", format!("{}x{}", self.size.0, self.size.1));
        out
    }
}
