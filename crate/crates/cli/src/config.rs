//! Flat `key = value` configuration with `[section]` headers.
//!
//! ```text
//! # comment
//! [run]
//! rounds = 40
//! seed = 7
//!
//! [partition]
//! scheme = imbalance
//! ```
//!
//! Keys before the first header belong to `[run]`. Overrides given as
//! `section.key=value` replace file entries. Every key is checked against the
//! schema in [`apply`]; unknown keys and bad values are reported with the
//! place they came from.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use pfpt_core::aggregation::AggregationConfig;
use pfpt_core::clients::TuningMode;
use pfpt_core::partition::Scheme;
use pfpt_core::runner::{Aggregator, ExperimentConfig};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Where a configuration entry was written.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    File { path: String, line: usize },
    Flag,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::File { path, line } => write!(f, "{path}:{line}"),
            Origin::Flag => f.write_str("--set"),
        }
    }
}

#[derive(Debug, Error)]
#[error("{origin}: {message}")]
pub struct ConfigError {
    pub origin: Origin,
    pub message: String,
}

impl ConfigError {
    fn new(origin: &Origin, message: impl Into<String>) -> Self {
        Self {
            origin: origin.clone(),
            message: message.into(),
        }
    }
}

#[derive(Clone, Debug)]
struct Entry {
    value: String,
    origin: Origin,
}

/// Parsed entries keyed by `section.key`.
#[derive(Clone, Debug, Default)]
pub struct ConfigDoc {
    entries: BTreeMap<String, Entry>,
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v)
}

impl ConfigDoc {
    pub fn parse(text: &str, path: &str) -> Result<Self, ConfigError> {
        let mut doc = Self::default();
        let mut section = String::from("run");
        for (i, raw) in text.lines().enumerate() {
            let origin = Origin::File {
                path: path.to_owned(),
                line: i + 1,
            };
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .map(str::trim)
                    .filter(|s| !s.is_empty() && !s.contains(char::is_whitespace))
                    .ok_or_else(|| ConfigError::new(&origin, format!("malformed section header `{line}`")))?;
                section = name.to_owned();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::new(&origin, format!("expected `key = value`, found `{line}`")))?;
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(ConfigError::new(&origin, format!("malformed key `{key}`")));
            }
            let full = format!("{section}.{key}");
            if let Some(prev) = doc.entries.get(&full) {
                return Err(ConfigError::new(
                    &origin,
                    format!("duplicate key `{full}` (first set at {})", prev.origin),
                ));
            }
            doc.entries.insert(
                full,
                Entry {
                    value: unquote(value.trim()).to_owned(),
                    origin,
                },
            );
        }
        Ok(doc)
    }

    /// Applies one `section.key=value` override.
    pub fn set(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| ConfigError::new(&Origin::Flag, format!("expected `section.key=value`, found `{spec}`")))?;
        let key = key.trim();
        let key = if key.contains('.') { key.to_owned() } else { format!("run.{key}") };
        self.entries.insert(
            key,
            Entry {
                value: unquote(value.trim()).to_owned(),
                origin: Origin::Flag,
            },
        );
        Ok(())
    }

    /// Canonical `section.key=value` lines, sorted by key.
    pub fn canonical(&self) -> String {
        self.entries.iter().map(|(k, e)| format!("{k}={}\n", e.value)).collect()
    }

    /// SHA-256 of [`ConfigDoc::canonical`], hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Settings that only the command-line front end uses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OutputSettings {
    /// Write a pool snapshot every this many rounds; 0 disables it.
    pub checkpoint_every: usize,
}

fn value<T: FromStr>(key: &str, e: &Entry) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    e.value
        .parse()
        .map_err(|err| ConfigError::new(&e.origin, format!("bad value `{}` for `{key}`: {err}", e.value)))
}

fn list(key: &str, e: &Entry) -> Result<Vec<u64>, ConfigError> {
    e.value
        .split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|err| ConfigError::new(&e.origin, format!("bad entry `{t}` in `{key}`: {err}")))
        })
        .collect()
}

#[derive(Default)]
struct Pending {
    mode: Option<String>,
    noise_std: Option<f64>,
    drift_steps: Option<usize>,
    drift_step_size: Option<f64>,
    drift_jitter: Option<f64>,
    per_class: Option<u64>,
    class_totals: Option<Vec<u64>>,
    mode_origin: Option<Origin>,
}

const DRIFT_STEPS: usize = 5;
const DRIFT_STEP_SIZE: f64 = 0.2;
const DRIFT_JITTER: f64 = 0.05;
const PER_CLASS: u64 = 500;

/// Builds the experiment configuration from defaults plus `doc`.
pub fn apply(doc: &ConfigDoc) -> Result<(ExperimentConfig, OutputSettings), ConfigError> {
    let mut cfg = ExperimentConfig::default();
    let mut out = OutputSettings::default();
    let mut p = Pending::default();
    for (key, e) in &doc.entries {
        let k = key.as_str();
        let a: &mut AggregationConfig = &mut cfg.aggregation;
        match k {
            "run.rounds" => cfg.rounds = value(k, e)?,
            "run.clients_per_round" => cfg.sampled_per_round = value(k, e)?,
            "run.dim" => cfg.dim = value(k, e)?,
            "run.seed" => cfg.seed = value(k, e)?,
            "run.aggregator" => {
                cfg.aggregator = e
                    .value
                    .parse::<Aggregator>()
                    .map_err(|err| ConfigError::new(&e.origin, err.to_string()))?
            }
            "run.gmm_k" => cfg.gmm_k = Some(value(k, e)?),
            "run.hidden" => cfg.hidden = value(k, e)?,
            "run.reinit_nets" => cfg.reinit_nets = value(k, e)?,
            "run.init_pool_size" => cfg.init_pool_size = value(k, e)?,
            "run.checkpoint_every" => out.checkpoint_every = value(k, e)?,

            "partition.scheme" => {
                cfg.partition.scheme = e
                    .value
                    .parse::<Scheme>()
                    .map_err(|err| ConfigError::new(&e.origin, err.to_string()))?
            }
            "partition.classes" => cfg.partition.classes = value(k, e)?,
            "partition.clients" => cfg.partition.clients = value(k, e)?,
            "partition.alpha" => cfg.partition.alpha = value(k, e)?,
            "partition.dominant_frac" => cfg.partition.dominant_frac = value(k, e)?,
            "partition.dominant_share" => cfg.partition.dominant_share = value(k, e)?,
            "partition.imbalance_factor" => cfg.partition.imbalance_factor = value(k, e)?,
            "partition.per_class" => p.per_class = Some(value(k, e)?),
            "partition.class_totals" => p.class_totals = Some(list(k, e)?),

            "client.k" => cfg.client.k = value(k, e)?,
            "client.mode" => {
                p.mode = Some(e.value.clone());
                p.mode_origin = Some(e.origin.clone());
            }
            "client.noise_std" => p.noise_std = Some(value(k, e)?),
            "client.drift_steps" => p.drift_steps = Some(value(k, e)?),
            "client.drift_step_size" => p.drift_step_size = Some(value(k, e)?),
            "client.drift_jitter" => p.drift_jitter = Some(value(k, e)?),
            "client.dominant_mass" => cfg.client.dominant_mass = value(k, e)?,
            "client.prototype_scale" => cfg.client.prototype_scale = value(k, e)?,

            "truth.n_star" => cfg.truth.n_star = value(k, e)?,
            "truth.separation" => cfg.truth.separation = value(k, e)?,
            "truth.inclusion_logit" => cfg.truth.inclusion_logit = value(k, e)?,
            "truth.variance" => cfg.truth.variance = value(k, e)?,
            "truth.hidden" => cfg.truth.hidden = value(k, e)?,

            "aggregation.max_alternations" => a.max_alternations = value(k, e)?,
            "aggregation.param_steps_per_alt" => a.param_steps_per_alt = value(k, e)?,
            "aggregation.initial_step_size" => a.initial_step_size = value(k, e)?,
            "aggregation.backtrack_factor" => a.backtrack_factor = value(k, e)?,
            "aggregation.backtrack_max" => a.backtrack_max = value(k, e)?,
            "aggregation.objective_tol" => a.objective_tol = value(k, e)?,
            "aggregation.dedup_radius_frac" => a.dedup_radius_frac = value(k, e)?,
            "aggregation.full_assignment" => a.full_assignment = value(k, e)?,

            _ => return Err(ConfigError::new(&e.origin, format!("unknown key `{key}`"))),
        }
    }

    let default_noise = match cfg.client.mode {
        TuningMode::Generative { noise_std } => noise_std,
        TuningMode::Drift { .. } => 0.05,
    };
    let mode = p.mode.as_deref().unwrap_or("generative");
    cfg.client.mode = match mode {
        "generative" => TuningMode::Generative {
            noise_std: p.noise_std.unwrap_or(default_noise),
        },
        "drift" => TuningMode::Drift {
            steps: p.drift_steps.unwrap_or(DRIFT_STEPS),
            step_size: p.drift_step_size.unwrap_or(DRIFT_STEP_SIZE),
            jitter: p.drift_jitter.unwrap_or(DRIFT_JITTER),
        },
        other => {
            return Err(ConfigError::new(
                p.mode_origin.as_ref().unwrap_or(&Origin::Flag),
                format!("unknown client mode `{other}` (expected generative or drift)"),
            ))
        }
    };

    let per_class = p
        .per_class
        .unwrap_or_else(|| cfg.partition.class_totals.first().copied().unwrap_or(PER_CLASS));
    cfg.partition.class_totals = p
        .class_totals
        .unwrap_or_else(|| vec![per_class; cfg.partition.classes]);
    Ok((cfg, out))
}
