//! Settings resolution: defaults, then a `key = value` file, then flags.

use std::collections::HashMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use spheregate_core::config::{SinkhornConfig, TrainConfig};

use crate::{CliError, CliResult, TrainOverrides};

/// Every key a config file may set. Unknown keys are rejected so a typo
/// cannot silently fall back to a default.
const KNOWN_KEYS: [&str; 19] = [
    "alpha",
    "batch_size",
    "beta",
    "checkpoint_every",
    "epochs",
    "expert",
    "gamma",
    "hidden_dim",
    "kappa_max",
    "lambda_a",
    "lambda_f",
    "latent_dim",
    "learning_rate",
    "samples_per_posterior",
    "seed",
    "sinkhorn_convergence_tol",
    "sinkhorn_epsilon",
    "sinkhorn_max_iters",
    "standardize",
];

/// Parsed config file contents. The same `key = value` grammar the reports
/// embed, so a report's config block can be replayed as-is.
pub struct FileConfig {
    values: HashMap<String, String>,
    origin: String,
}

impl FileConfig {
    pub fn empty() -> Self {
        FileConfig {
            values: HashMap::new(),
            origin: "<none>".into(),
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        let mut values = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!(
                    "{} line {}: expected `key = value`, got `{line}`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(CliError::Config(format!(
                    "{} line {}: unknown setting `{key}`",
                    path.display(),
                    lineno + 1
                )));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(FileConfig {
            values,
            origin: path.display().to_string(),
        })
    }

    /// Parses the value under `key`, if present.
    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|e| {
                CliError::Config(format!(
                    "{}: setting `{key}`: cannot parse `{raw}`: {e}",
                    self.origin
                ))
            }),
        }
    }

    pub fn get_raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn load_or_empty(path: Option<&Path>) -> CliResult<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::empty()),
        }
    }
}

/// Builds the effective training configuration. Precedence per field:
/// command-line flag, then config file entry, then the built-in default.
pub fn resolve_train(file: &FileConfig, o: &TrainOverrides) -> CliResult<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        lambda_f: o.lambda_f.or(file.get("lambda_f")?).unwrap_or(d.lambda_f),
        lambda_a: o.lambda_a.or(file.get("lambda_a")?).unwrap_or(d.lambda_a),
        alpha: o.alpha.or(file.get("alpha")?).unwrap_or(d.alpha),
        beta: o.beta.or(file.get("beta")?).unwrap_or(d.beta),
        learning_rate: o
            .lr
            .or(file.get("learning_rate")?)
            .unwrap_or(d.learning_rate),
        batch_size: o
            .batch_size
            .or(file.get("batch_size")?)
            .unwrap_or(d.batch_size),
        epochs: o.epochs.or(file.get("epochs")?).unwrap_or(d.epochs),
        latent_dim: o
            .latent_dim
            .or(file.get("latent_dim")?)
            .unwrap_or(d.latent_dim),
        hidden_dim: o
            .hidden_dim
            .or(file.get("hidden_dim")?)
            .unwrap_or(d.hidden_dim),
        samples_per_posterior: o
            .samples_per_posterior
            .or(file.get("samples_per_posterior")?)
            .unwrap_or(d.samples_per_posterior),
        kappa_max: o.kappa_max.or(file.get("kappa_max")?).unwrap_or(d.kappa_max),
        standardize: o
            .standardize
            .or(file.get("standardize")?)
            .unwrap_or(d.standardize),
        sinkhorn: SinkhornConfig {
            epsilon: o
                .sinkhorn_eps
                .or(file.get("sinkhorn_epsilon")?)
                .unwrap_or(d.sinkhorn.epsilon),
            max_iters: file
                .get("sinkhorn_max_iters")?
                .unwrap_or(d.sinkhorn.max_iters),
            convergence_tol: file
                .get("sinkhorn_convergence_tol")?
                .unwrap_or(d.sinkhorn.convergence_tol),
        },
        seed: o.seed.or(file.get("seed")?).unwrap_or(d.seed),
    };
    let weights = [
        ("lambda_f", cfg.lambda_f),
        ("lambda_a", cfg.lambda_a),
        ("alpha", cfg.alpha),
        ("beta", cfg.beta),
    ];
    for (name, v) in weights {
        if !(v.is_finite() && v >= 0.0) {
            return Err(CliError::Config(format!(
                "{name} must be finite and nonnegative, got {v}"
            )));
        }
    }
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0) {
        return Err(CliError::Config(format!(
            "learning_rate must be positive, got {}",
            cfg.learning_rate
        )));
    }
    if cfg.batch_size == 0 || cfg.samples_per_posterior == 0 {
        return Err(CliError::Config(
            "batch_size and samples_per_posterior must be >= 1".into(),
        ));
    }
    if cfg.latent_dim < 2 {
        return Err(CliError::Config(format!(
            "latent_dim must be >= 2 for a spherical latent, got {}",
            cfg.latent_dim
        )));
    }
    if !(cfg.sinkhorn.epsilon.is_finite() && cfg.sinkhorn.epsilon > 0.0) {
        return Err(CliError::Config(format!(
            "sinkhorn_epsilon must be positive, got {}",
            cfg.sinkhorn.epsilon
        )));
    }
    Ok(cfg)
}

pub fn resolve_gamma(file: &FileConfig, flag: Option<f64>) -> CliResult<f64> {
    let gamma = match flag.or(file.get("gamma")?) {
        Some(g) => g,
        None => 0.9,
    };
    validate_gamma(gamma)?;
    Ok(gamma)
}

pub fn validate_gamma(gamma: f64) -> CliResult<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(CliError::Config(format!(
            "gamma must lie strictly inside (0, 1), got {gamma}"
        )));
    }
    Ok(())
}

/// FNV-1a over the rendered config text; reports carry it so two outputs
/// can be compared for identical settings at a glance.
pub fn digest(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    format!("{h:016x}")
}
