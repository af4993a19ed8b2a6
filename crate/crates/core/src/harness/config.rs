//! TOML experiment configuration.
//!
//! ```toml
//! [experiment]
//! protocols = ["cwfl", "cotaf", "local-only"]   # any of cwfl, cwfl-prox, cotaf, cotaf-prox, dsgd, local-only
//! seeds = [1, 2, 3]                              # run seeds: initialization, batches, channel noise
//! output_dir = "out"                             # relative to the config file
//! layout_seed = 0                                # optional; defaults to data.seed
//! log_loss = false                               # also log the global training loss
//!
//! [data]
//! source = "quadratic"        # or "mnist"
//! seed = 0
//! per_client = 200            # quadratic: instances per client
//! features = 10               # quadratic: m
//! heterogeneity = 0.5         # quadratic: 0 shared truth, 1 per-client truth
//! classes_per_client = 4      # mnist: label-skew classes per client
//! test_fraction = 0.1         # mnist: central held-out split
//! instances = 6000            # mnist: size of the synthetic stand-in
//! dir = "path/to/idx"         # mnist: optional, else OTAFL_DATA_DIR, else synthetic
//!
//! [model]
//! kind = "ridge"              # ridge, logistic or mlp
//! l2 = 0.1
//! hidden = 32                 # mlp only
//!
//! [training]
//! clients = 25
//! clusters = 4
//! epochs = 3                  # local steps per round (E)
//! steps = 150                 # total local steps (T)
//! batch_size = 8              # 0 means full batch
//! learning_rate = 0.001       # a number, or "theorem" for 2/(mu(gamma+t))
//! prox_lambda = 0.1           # used by the -prox protocols
//! mixing = "complete"         # or "ring"
//!
//! [channel]
//! p1 = 1.0
//! p2 = 1.0
//! snr_db = 10.0               # omit for a noiseless channel
//! head_snr_db = 11.0          # optional SNR at cluster-heads; defaults to snr_db
//! precoding = "genie"         # or "bound"
//! decode = "normalized"       # or "literal"
//! consensus_noise = "per-link" # or "direct"
//! grad_bound_safety = 1.5
//! ```
//!
//! Unknown keys are rejected. Noise variances follow the per-symbol
//! convention `σ² = (P1/d) / 10^(snr_db/10)`.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::protocols::ProtocolKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    #[serde(default)]
    pub channel: ChannelSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub protocols: Vec<ProtocolKind>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub layout_seed: Option<u64>,
    #[serde(default)]
    pub log_loss: bool,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Quadratic,
    Mnist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_per_client")]
    pub per_client: usize,
    #[serde(default = "default_features")]
    pub features: usize,
    #[serde(default = "default_het")]
    pub heterogeneity: f64,
    #[serde(default = "default_cpc")]
    pub classes_per_client: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_instances")]
    pub instances: usize,
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

fn default_per_client() -> usize {
    200
}
fn default_features() -> usize {
    10
}
fn default_het() -> f64 {
    0.5
}
fn default_cpc() -> usize {
    4
}
fn default_test_fraction() -> f64 {
    0.1
}
fn default_instances() -> usize {
    6000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelChoice {
    Ridge,
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelChoice,
    #[serde(default = "default_l2")]
    pub l2: f64,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

fn default_l2() -> f64 {
    0.1
}
fn default_hidden() -> usize {
    32
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LearningRateSetting {
    Value(f64),
    Named(NamedSchedule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NamedSchedule {
    Theorem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixingChoice {
    Complete,
    Ring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub clients: usize,
    #[serde(default = "default_clusters")]
    pub clusters: usize,
    pub epochs: usize,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub learning_rate: LearningRateSetting,
    #[serde(default = "default_prox")]
    pub prox_lambda: f64,
    #[serde(default = "default_mixing")]
    pub mixing: MixingChoice,
}

fn default_clusters() -> usize {
    1
}
fn default_batch() -> usize {
    8
}
fn default_prox() -> f64 {
    0.1
}
fn default_mixing() -> MixingChoice {
    MixingChoice::Complete
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrecodingChoice {
    #[default]
    Genie,
    Bound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    #[serde(default = "one")]
    pub p1: f64,
    #[serde(default = "one")]
    pub p2: f64,
    #[serde(default)]
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub head_snr_db: Option<f64>,
    #[serde(default)]
    pub precoding: PrecodingChoice,
    #[serde(default)]
    pub decode: crate::channel::DecodeMode,
    #[serde(default)]
    pub consensus_noise: crate::protocols::ConsensusNoise,
    #[serde(default = "default_safety")]
    pub grad_bound_safety: f64,
}

fn one() -> f64 {
    1.0
}
fn default_safety() -> f64 {
    1.5
}

impl Default for ChannelSection {
    fn default() -> Self {
        Self {
            p1: 1.0,
            p2: 1.0,
            snr_db: None,
            head_snr_db: None,
            precoding: PrecodingChoice::Genie,
            decode: Default::default(),
            consensus_noise: Default::default(),
            grad_bound_safety: 1.5,
        }
    }
}

/// A configuration error tied to a location in the source file.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{}: {}", self.path, l, self.message),
            None => write!(f, "{}: {}", self.path, self.message),
        }
    }
}

/// 1-based line of `key` inside `[section]`, if present.
fn find_key_line(source: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in source.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

fn line_of_offset(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].matches('\n').count() + 1
}

impl ExperimentConfig {
    /// Parses and validates. `origin` names the source in error messages.
    pub fn from_toml(source: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(source).map_err(|e| ConfigError {
            path: origin.to_string(),
            line: e.span().map(|s| line_of_offset(source, s.start)),
            message: e.message().trim().to_string(),
        })?;
        cfg.validate()
            .map_err(|(section, key, message)| ConfigError {
                path: origin.to_string(),
                line: find_key_line(source, section, key),
                message: format!("{section}.{key}: {message}"),
            })?;
        Ok(cfg)
    }

    /// Reads a file; relative `output_dir` and `data.dir` resolve against the
    /// file's directory, and a configured data directory must exist.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let source = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let origin = path.display().to_string();
        let mut cfg = Self::from_toml(&source, &origin)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.experiment.output_dir.is_relative() {
            cfg.experiment.output_dir = base.join(&cfg.experiment.output_dir);
        }
        if let Some(dir) = &cfg.data.dir {
            let dir = if dir.is_relative() {
                base.join(dir)
            } else {
                dir.clone()
            };
            if !dir.is_dir() {
                return Err(ConfigError {
                    path: origin,
                    line: find_key_line(&source, "data", "dir"),
                    message: format!("data.dir: {} does not exist", dir.display()),
                }
                .into());
            }
            cfg.data.dir = Some(dir);
        }
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), (&'static str, &'static str, String)> {
        let e = &self.experiment;
        if e.protocols.is_empty() {
            return Err((
                "experiment",
                "protocols",
                "at least one protocol is required".into(),
            ));
        }
        if e.seeds.is_empty() {
            return Err(("experiment", "seeds", "seed list must be nonempty".into()));
        }
        let t = &self.training;
        if t.clients == 0 {
            return Err(("training", "clients", "must be >= 1".into()));
        }
        if t.clusters == 0 || t.clusters > t.clients {
            return Err((
                "training",
                "clusters",
                format!("need 1 <= clusters <= clients ({})", t.clients),
            ));
        }
        if t.epochs == 0 {
            return Err(("training", "epochs", "must be >= 1".into()));
        }
        if t.steps < t.epochs {
            return Err((
                "training",
                "steps",
                format!("must be >= epochs ({})", t.epochs),
            ));
        }
        if let LearningRateSetting::Value(v) = t.learning_rate {
            if !(v > 0.0) || !v.is_finite() {
                return Err(("training", "learning_rate", format!("must be > 0, got {v}")));
            }
        }
        if !(t.prox_lambda >= 0.0) {
            return Err(("training", "prox_lambda", "must be >= 0".into()));
        }
        if e.protocols.iter().any(|p| p.is_prox()) && !(t.prox_lambda > 0.0) {
            return Err((
                "training",
                "prox_lambda",
                "proximal protocols need prox_lambda > 0".into(),
            ));
        }
        if t.mixing == MixingChoice::Ring
            && t.clusters < 3
            && e.protocols.iter().any(|p| p.is_clustered())
        {
            return Err((
                "training",
                "mixing",
                "ring mixing needs at least 3 clusters".into(),
            ));
        }
        let d = &self.data;
        if !(0.0..=1.0).contains(&d.heterogeneity) {
            return Err(("data", "heterogeneity", "must lie in [0, 1]".into()));
        }
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(("data", "test_fraction", "must lie in (0, 1)".into()));
        }
        if d.classes_per_client == 0 {
            return Err(("data", "classes_per_client", "must be >= 1".into()));
        }
        let m = &self.model;
        match (d.source, m.kind) {
            (DataSource::Quadratic, ModelChoice::Ridge) => {}
            (DataSource::Mnist, ModelChoice::Logistic | ModelChoice::Mlp) => {}
            _ => {
                return Err((
                    "model",
                    "kind",
                    "ridge pairs with quadratic data, classifiers with mnist".into(),
                ))
            }
        }
        if !(m.l2 >= 0.0) || (m.kind != ModelChoice::Mlp && m.l2 == 0.0) {
            return Err(("model", "l2", "convex models need l2 > 0".into()));
        }
        let c = &self.channel;
        if !(c.p1 > 0.0) {
            return Err(("channel", "p1", "must be > 0".into()));
        }
        if !(c.p2 > 0.0) {
            return Err(("channel", "p2", "must be > 0".into()));
        }
        if !(c.grad_bound_safety >= 1.0) {
            return Err(("channel", "grad_bound_safety", "must be >= 1".into()));
        }
        let needs_constants = matches!(t.learning_rate, LearningRateSetting::Named(_))
            || c.precoding == PrecodingChoice::Bound;
        if needs_constants && m.kind != ModelChoice::Ridge {
            return Err((
                "training",
                "learning_rate",
                "the theorem schedule and bound precoding need the ridge model".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[experiment]
protocols = ["cwfl", "cotaf"]
seeds = [1, 2]

[data]
source = "quadratic"

[model]
kind = "ridge"

[training]
clients = 8
clusters = 2
epochs = 2
steps = 10
learning_rate = "theorem"

[channel]
snr_db = 10.0
"#;

    #[test]
    fn parses_defaults() {
        let cfg = ExperimentConfig::from_toml(BASE, "x.toml").unwrap();
        assert_eq!(
            cfg.training.learning_rate,
            LearningRateSetting::Named(NamedSchedule::Theorem)
        );
        assert_eq!(cfg.channel.grad_bound_safety, 1.5);
        assert_eq!(cfg.data.test_fraction, 0.1);
        let again = ExperimentConfig::from_toml(&cfg.to_toml(), "y").unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn numeric_learning_rate() {
        let src = BASE.replace("\"theorem\"", "0.001");
        let cfg = ExperimentConfig::from_toml(&src, "x").unwrap();
        assert_eq!(
            cfg.training.learning_rate,
            LearningRateSetting::Value(0.001)
        );
    }

    #[test]
    fn unknown_key_reports_line() {
        let src = BASE.replace("epochs = 2", "epochs = 2\nepoch = 3");
        let err = ExperimentConfig::from_toml(&src, "x.toml").unwrap_err();
        assert_eq!(err.line, Some(16));
        assert!(err.message.contains("epoch"), "{err}");
        assert!(err.to_string().starts_with("x.toml:16:"));
    }

    #[test]
    fn semantic_error_reports_line() {
        let src = BASE.replace("clusters = 2", "clusters = 9");
        let err = ExperimentConfig::from_toml(&src, "x.toml").unwrap_err();
        assert_eq!(err.line, Some(14));
        assert!(err.message.contains("training.clusters"));
        let src = BASE.replace("seeds = [1, 2]", "seeds = []");
        assert_eq!(
            ExperimentConfig::from_toml(&src, "x").unwrap_err().line,
            Some(4)
        );
    }

    #[test]
    fn rejects_unknown_protocol() {
        let src = BASE.replace("\"cotaf\"", "\"fedavg\"");
        let err = ExperimentConfig::from_toml(&src, "x").unwrap_err();
        assert_eq!(err.line, Some(3));
    }
}
