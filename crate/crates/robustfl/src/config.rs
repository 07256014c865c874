//! Experiment configuration: a single TOML file describing the population,
//! attack, defense, data source, partitioning, schedule, and seeds.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackKind;
use crate::error::{Error, Result};

/// Which aggregation rule the server runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseRule {
    Robustfl,
    Fedavg,
    Median,
    TrimmedMean,
    MultiKrum,
    Faba,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default = "default_attack_kind")]
    pub kind: AttackKind,
    /// Sign-flip magnitude.
    #[serde(default = "default_sign_flip_c")]
    pub sign_flip_c: f64,
    /// LIE deviation multiplier.
    #[serde(default = "default_lie_z")]
    pub lie_z: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::None,
            sign_flip_c: default_sign_flip_c(),
            lie_z: default_lie_z(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    pub rule: DefenseRule,
    /// Smoothing factor for the prediction-based defense; must sit strictly
    /// inside (0,1).
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Trim width for trimmed_mean; defaults to the true attacker count,
    /// capped so that 2*beta < K.
    #[serde(default)]
    pub trim_beta: Option<usize>,
    /// Assumed attacker count for multi_krum/faba; the baselines receive
    /// the true count when unset. The prediction-based defense never uses it.
    #[serde(default)]
    pub f: Option<usize>,
    /// Multi-Krum selection size; defaults to K - f.
    #[serde(default)]
    pub m: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    /// Synthetic Gaussian class clusters, generated from the master seed.
    Blobs {
        n_per_class: usize,
        test_per_class: usize,
        num_classes: usize,
        n_features: usize,
        spread: f64,
    },
    /// IDX image/label file pairs (MNIST layout).
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    Iid,
    Noniid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub scheme: PartitionScheme,
    /// Non-IID degree: probability that a sample lands in its label's home
    /// group. Required for the noniid scheme, ignored for iid.
    #[serde(default)]
    pub q: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidingConfig {
    /// Guiding dataset size, drawn from the test split.
    #[serde(default = "default_guiding_size")]
    pub size: usize,
    /// Training passes over the guiding data before round 1.
    #[serde(default = "default_guiding_epochs")]
    pub epochs: usize,
    /// Step size for the guided pre-training; defaults to the client
    /// learning rate. A handful of passes over a handful of samples must
    /// still produce a usable bias model, so this often wants to be larger.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    /// Mini-batch size for the guided pre-training; defaults to the client
    /// batch size. Smaller batches mean more steps per pass over the tiny
    /// guiding set, which strengthens the bias model.
    #[serde(default)]
    pub batch_size: Option<usize>,
}

impl Default for GuidingConfig {
    fn default() -> Self {
        Self {
            size: default_guiding_size(),
            epochs: default_guiding_epochs(),
            learning_rate: None,
            batch_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_local_iterations")]
    pub local_iterations: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            local_iterations: default_local_iterations(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; input and output widths come from the data.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate on the first `test_limit` test rows; unset = full split.
    #[serde(default)]
    pub test_limit: Option<usize>,
}

/// Full experiment description. A run is a pure function of this value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub rounds: usize,
    /// Client count K; all clients participate every round.
    pub clients: usize,
    /// Fraction of compromised clients in [0,1); the lowest
    /// `ceil(fraction * K)` client ids are malicious.
    pub attacker_fraction: f64,
    /// Train clients concurrently. Output is identical either way.
    #[serde(default = "default_true")]
    pub parallel: bool,
    #[serde(default)]
    pub attack: AttackConfig,
    pub defense: DefenseConfig,
    pub data: DataConfig,
    pub partition: PartitionConfig,
    #[serde(default)]
    pub guiding: GuidingConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_true() -> bool {
    true
}
fn default_attack_kind() -> AttackKind {
    AttackKind::None
}
fn default_sign_flip_c() -> f64 {
    0.8
}
fn default_lie_z() -> f64 {
    0.3
}
fn default_alpha() -> f64 {
    0.8
}
fn default_guiding_size() -> usize {
    10
}
fn default_guiding_epochs() -> usize {
    10
}
fn default_local_iterations() -> usize {
    3
}
fn default_batch_size() -> usize {
    32
}
fn default_learning_rate() -> f64 {
    0.05
}
fn default_hidden() -> Vec<usize> {
    vec![32]
}

impl SimConfig {
    /// Number of compromised clients: the lowest `ceil(fraction * K)` ids.
    pub fn num_malicious(&self) -> usize {
        if self.attack.kind == AttackKind::None {
            0
        } else {
            (self.attacker_fraction * self.clients as f64).ceil() as usize
        }
    }

    pub fn malicious_ids(&self) -> BTreeSet<usize> {
        (0..self.num_malicious()).collect()
    }

    pub fn num_classes(&self) -> usize {
        match &self.data {
            DataConfig::Blobs { num_classes, .. } => *num_classes,
            DataConfig::Mnist { .. } => 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds must be >= 1"));
        }
        if self.clients == 0 {
            return Err(Error::config("clients must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.attacker_fraction) {
            return Err(Error::config(format!(
                "attacker_fraction {} outside [0,1)",
                self.attacker_fraction
            )));
        }
        if self.attack.kind == AttackKind::None && self.attacker_fraction > 0.0 {
            return Err(Error::config(
                "attacker_fraction > 0 needs an attack kind other than none",
            ));
        }
        let malicious = self.num_malicious();
        if malicious >= self.clients && self.clients > 0 && self.attack.kind != AttackKind::None {
            return Err(Error::config(format!(
                "{malicious} attackers leave no honest client among {}",
                self.clients
            )));
        }
        if !(self.attack.sign_flip_c > 0.0) || !self.attack.sign_flip_c.is_finite() {
            return Err(Error::config("attack.sign_flip_c must be positive"));
        }
        if !self.attack.lie_z.is_finite() {
            return Err(Error::config("attack.lie_z must be finite"));
        }

        if self.defense.rule == DefenseRule::Robustfl {
            if !(self.defense.alpha > 0.0 && self.defense.alpha < 1.0) {
                return Err(Error::config(format!(
                    "defense.alpha {} outside (0,1)",
                    self.defense.alpha
                )));
            }
            if self.guiding.size == 0 || self.guiding.epochs == 0 {
                return Err(Error::config("guiding size and epochs must be >= 1"));
            }
            if let Some(lr) = self.guiding.learning_rate {
                if !(lr > 0.0) || !lr.is_finite() {
                    return Err(Error::config("guiding.learning_rate must be positive"));
                }
            }
            if self.guiding.batch_size == Some(0) {
                return Err(Error::config("guiding.batch_size must be >= 1"));
            }
        }
        if let Some(beta) = self.defense.trim_beta {
            if 2 * beta >= self.clients {
                return Err(Error::config(format!(
                    "trim_beta {beta} needs 2*beta < {} clients",
                    self.clients
                )));
            }
        }
        if let Some(f) = self.defense.f {
            if self.defense.rule == DefenseRule::MultiKrum && self.clients < f + 3 {
                return Err(Error::config("multi_krum needs clients >= f + 3"));
            }
            if self.defense.rule == DefenseRule::Faba && f >= self.clients {
                return Err(Error::config("faba needs f < clients"));
            }
        }
        if let Some(m) = self.defense.m {
            if m == 0 || m > self.clients {
                return Err(Error::config("defense.m must lie in [1, clients]"));
            }
        }

        match &self.data {
            DataConfig::Blobs {
                n_per_class,
                test_per_class,
                num_classes,
                n_features,
                spread,
            } => {
                if *n_per_class == 0 || *test_per_class == 0 || *num_classes == 0 || *n_features == 0
                {
                    return Err(Error::config("blob counts must be positive"));
                }
                if !(*spread > 0.0) || !spread.is_finite() {
                    return Err(Error::config("blob spread must be positive"));
                }
            }
            DataConfig::Mnist { .. } => {}
        }

        match self.partition.scheme {
            PartitionScheme::Iid => {}
            PartitionScheme::Noniid => {
                let q = self.partition.q.ok_or_else(|| {
                    Error::config("partition.q is required for the noniid scheme")
                })?;
                if !(0.0..=1.0).contains(&q) {
                    return Err(Error::config(format!("partition.q {q} outside [0,1]")));
                }
                if self.clients % self.num_classes() != 0 {
                    return Err(Error::config(format!(
                        "noniid partitioning needs clients ({}) divisible by classes ({})",
                        self.clients,
                        self.num_classes()
                    )));
                }
            }
        }

        if self.training.local_iterations == 0 || self.training.batch_size == 0 {
            return Err(Error::config("training counts must be >= 1"));
        }
        if !(self.training.learning_rate > 0.0) || !self.training.learning_rate.is_finite() {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.model.hidden.iter().any(|&h| h == 0) {
            return Err(Error::config("hidden layer widths must be positive"));
        }
        Ok(())
    }
}

/// Parses and validates a TOML config file.
pub fn load_config(path: &Path) -> Result<SimConfig> {
    let text = std::fs::read_to_string(path)?;
    let config: SimConfig =
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_toml() -> String {
        r#"
seed = 42
rounds = 5
clients = 10
attacker_fraction = 0.5

[attack]
kind = "sign_flip"

[defense]
rule = "robustfl"
alpha = 0.8

[data]
source = "blobs"
n_per_class = 20
test_per_class = 10
num_classes = 2
n_features = 4
spread = 0.1

[partition]
scheme = "iid"
"#
        .to_string()
    }

    #[test]
    fn parses_and_fills_defaults() {
        let cfg: SimConfig = toml::from_str(&base_toml()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.training.batch_size, 32);
        assert_eq!(cfg.training.local_iterations, 3);
        assert_eq!(cfg.guiding.size, 10);
        assert_eq!(cfg.model.hidden, vec![32]);
        assert!(cfg.parallel);
        assert_eq!(cfg.attack.sign_flip_c, 0.8);
        assert_eq!(cfg.num_malicious(), 5);
        assert_eq!(cfg.malicious_ids(), (0..5).collect());
    }

    #[test]
    fn rejects_unknown_fields() {
        let text = base_toml() + "\nnot_a_field = 3\n";
        assert!(toml::from_str::<SimConfig>(&text).is_err());
    }

    #[test]
    fn rejects_all_malicious_population() {
        let mut cfg: SimConfig = toml::from_str(&base_toml()).unwrap();
        cfg.attacker_fraction = 0.99; // ceil(9.9) = 10 = K
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_attack_none_with_positive_fraction() {
        let mut cfg: SimConfig = toml::from_str(&base_toml()).unwrap();
        cfg.attack.kind = AttackKind::None;
        assert!(cfg.validate().is_err());
        cfg.attacker_fraction = 0.0;
        cfg.validate().unwrap();
        assert_eq!(cfg.num_malicious(), 0);
    }

    #[test]
    fn rejects_alpha_outside_open_interval() {
        let mut cfg: SimConfig = toml::from_str(&base_toml()).unwrap();
        for alpha in [0.0, 1.0, -0.1, 1.5] {
            cfg.defense.alpha = alpha;
            assert!(cfg.validate().is_err(), "alpha {alpha} accepted");
        }
    }

    #[test]
    fn noniid_requires_q_and_divisibility() {
        let mut cfg: SimConfig = toml::from_str(&base_toml()).unwrap();
        cfg.partition.scheme = PartitionScheme::Noniid;
        assert!(cfg.validate().is_err()); // q missing
        cfg.partition.q = Some(0.95);
        cfg.validate().unwrap(); // 10 clients, 2 classes
        cfg.clients = 11;
        cfg.attacker_fraction = 0.4;
        assert!(cfg.validate().is_err()); // 11 % 2 != 0
    }

    #[test]
    fn mnist_source_parses() {
        let text = r#"
seed = 1
rounds = 2
clients = 30
attacker_fraction = 0.0

[defense]
rule = "fedavg"

[data]
source = "mnist"
train_images = "data/train-images-idx3-ubyte"
train_labels = "data/train-labels-idx1-ubyte"
test_images = "data/t10k-images-idx3-ubyte"
test_labels = "data/t10k-labels-idx1-ubyte"
train_limit = 6000

[partition]
scheme = "iid"
"#;
        let cfg: SimConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.num_classes(), 10);
        match cfg.data {
            DataConfig::Mnist { train_limit, .. } => assert_eq!(train_limit, Some(6000)),
            _ => panic!("expected mnist source"),
        }
    }
}
