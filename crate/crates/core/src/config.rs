//! Run configuration: a UTF-8 `key = value` file with `#` comments.
//!
//! Defaults follow the adaptation recipe (λ₁ = 0.05, λ₂ = 1, θ = 0.5,
//! ρ = 0.7, γ = 0.1, T = 2, SGD momentum 0.9 at lr 1e-3); unknown or
//! duplicate keys are rejected so typos cannot silently fall back to a
//! default.

use std::path::{Path, PathBuf};

use crate::Error;

/// Everything a training, pretraining, or evaluation run needs.
#[derive(Clone, Debug)]
pub struct Config {
    /// Score threshold of the confidence weight `w1`.
    pub tau: f64,
    /// Blend between confidence and class-balance weights.
    pub theta: f64,
    /// EMA momentum of global prototypes.
    pub rho: f64,
    /// Weight of the prediction-consistency term.
    pub gamma: f64,
    /// Softmax temperature of the prediction-consistency term.
    pub temperature: f64,
    /// Weight of the image-level adversarial term.
    pub lambda1: f64,
    /// Weight of the pattern-matching and category-alignment terms.
    pub lambda2: f64,
    /// Dimension of the randomized fusion projections.
    pub fused_dim: usize,
    /// Contrastive separation margin.
    pub margin: f64,
    /// Gradient-reversal scale.
    pub grl_beta: f64,
    pub learning_rate: f64,
    /// Epoch index at which the learning rate drops to a tenth;
    /// defaults to 60% of `epochs`.
    pub lr_decay_epoch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Adaptation epochs.
    pub epochs: usize,
    /// Detection-only warm-up epochs on source before adaptation starts,
    /// mirroring the protocol of fine-tuning from a detector that already
    /// works on source. The source-only baseline trains for
    /// `det_warmup_epochs + epochs` total so comparisons are step-for-step
    /// fair.
    pub det_warmup_epochs: usize,
    /// Multi-label pretraining epochs.
    pub mlc_epochs: usize,
    pub batch_source: usize,
    pub batch_target: usize,
    pub seed: u64,
    /// Labeled source training set directory.
    pub source_dir: PathBuf,
    /// Unlabeled target training set directory.
    pub target_dir: PathBuf,
    /// Where `pretrain-mlc` writes its checkpoint and `train` warm-starts
    /// from.
    pub mlc_checkpoint: PathBuf,
    pub enable_dcbr: bool,
    pub enable_copm: bool,
    pub enable_rjca: bool,
}

impl Default for Config {
    fn default() -> Self {
        let epochs = 8;
        let det_warmup_epochs = 8;
        Config {
            tau: 0.5,
            theta: 0.5,
            rho: 0.7,
            gamma: 0.1,
            temperature: 2.0,
            lambda1: 0.05,
            lambda2: 1.0,
            fused_dim: 64,
            margin: 1.0,
            grl_beta: 1.0,
            learning_rate: 1e-3,
            lr_decay_epoch: default_decay_epoch(det_warmup_epochs + epochs),
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs,
            det_warmup_epochs,
            mlc_epochs: 5,
            batch_source: 8,
            batch_target: 8,
            seed: 1,
            source_dir: PathBuf::from("data/source_train"),
            target_dir: PathBuf::from("data/target_train"),
            mlc_checkpoint: PathBuf::from("pretrain_mlc.i3nt"),
            enable_dcbr: true,
            enable_copm: true,
            enable_rjca: true,
        }
    }
}

/// Learning rate decays at 60% of the run (warm-up plus adaptation) by
/// default.
fn default_decay_epoch(total_epochs: usize) -> usize {
    ((total_epochs as f64) * 0.6).ceil() as usize
}

fn parse_bool(key: &str, v: &str) -> Result<bool, Error> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got {v:?}"))),
    }
}

impl Config {
    /// Parse a config file. Keys may appear at most once; later validation
    /// enforces the documented ranges.
    pub fn from_file(path: &Path) -> Result<Config, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Config::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<Config, Error> {
        let mut cfg = Config::default();
        let mut seen = std::collections::BTreeSet::new();
        let mut decay_set = false;
        let mut epochs_set = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1)));
            };
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
            let bad_num = |e: std::num::ParseFloatError| Error::Config(format!("{key}: {e}"));
            let bad_int = |e: std::num::ParseIntError| Error::Config(format!("{key}: {e}"));
            match key {
                "tau" => cfg.tau = value.parse().map_err(bad_num)?,
                "theta" => cfg.theta = value.parse().map_err(bad_num)?,
                "rho" => cfg.rho = value.parse().map_err(bad_num)?,
                "gamma" => cfg.gamma = value.parse().map_err(bad_num)?,
                "temperature" => cfg.temperature = value.parse().map_err(bad_num)?,
                "lambda1" => cfg.lambda1 = value.parse().map_err(bad_num)?,
                "lambda2" => cfg.lambda2 = value.parse().map_err(bad_num)?,
                "fused_dim" => cfg.fused_dim = value.parse().map_err(bad_int)?,
                "margin" => cfg.margin = value.parse().map_err(bad_num)?,
                "grl_beta" => cfg.grl_beta = value.parse().map_err(bad_num)?,
                "learning_rate" => cfg.learning_rate = value.parse().map_err(bad_num)?,
                "lr_decay_epoch" => {
                    cfg.lr_decay_epoch = value.parse().map_err(bad_int)?;
                    decay_set = true;
                }
                "momentum" => cfg.momentum = value.parse().map_err(bad_num)?,
                "weight_decay" => cfg.weight_decay = value.parse().map_err(bad_num)?,
                "epochs" => {
                    cfg.epochs = value.parse().map_err(bad_int)?;
                    epochs_set = true;
                }
                "det_warmup_epochs" => {
                    cfg.det_warmup_epochs = value.parse().map_err(bad_int)?;
                    epochs_set = true;
                }
                "mlc_epochs" => cfg.mlc_epochs = value.parse().map_err(bad_int)?,
                "batch_source" => cfg.batch_source = value.parse().map_err(bad_int)?,
                "batch_target" => cfg.batch_target = value.parse().map_err(bad_int)?,
                "seed" => cfg.seed = value.parse().map_err(bad_int)?,
                "source_dir" => cfg.source_dir = PathBuf::from(value),
                "target_dir" => cfg.target_dir = PathBuf::from(value),
                "mlc_checkpoint" => cfg.mlc_checkpoint = PathBuf::from(value),
                "dcbr" => cfg.enable_dcbr = parse_bool(key, value)?,
                "copm" => cfg.enable_copm = parse_bool(key, value)?,
                "rjca" => cfg.enable_rjca = parse_bool(key, value)?,
                _ => return Err(Error::Config(format!("line {}: unknown key {key:?}", lineno + 1))),
            }
        }
        if epochs_set && !decay_set {
            cfg.lr_decay_epoch = default_decay_epoch(cfg.det_warmup_epochs + cfg.epochs);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        let checks: [(&str, bool); 16] = [
            ("tau must lie in (0,1)", self.tau > 0.0 && self.tau < 1.0),
            ("theta must lie in [0,1]", (0.0..=1.0).contains(&self.theta)),
            ("rho must lie in [0,1)", (0.0..1.0).contains(&self.rho)),
            ("gamma must be nonnegative", self.gamma >= 0.0),
            ("temperature must be positive", self.temperature > 0.0),
            ("lambda1 must be nonnegative", self.lambda1 >= 0.0),
            ("lambda2 must be nonnegative", self.lambda2 >= 0.0),
            ("fused_dim must be positive", self.fused_dim > 0),
            ("margin must be nonnegative", self.margin >= 0.0),
            ("grl_beta must be nonnegative", self.grl_beta >= 0.0),
            ("learning_rate must be positive", self.learning_rate > 0.0),
            ("momentum must lie in [0,1)", (0.0..1.0).contains(&self.momentum)),
            ("weight_decay must be nonnegative", self.weight_decay >= 0.0),
            ("epochs must be positive", self.epochs > 0),
            ("mlc_epochs must be positive", self.mlc_epochs > 0),
            (
                "batch sizes must be positive",
                self.batch_source > 0 && self.batch_target > 0,
            ),
        ];
        for (msg, ok) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_recipe() {
        let c = Config::default();
        assert_eq!(c.tau, 0.5);
        assert_eq!(c.theta, 0.5);
        assert_eq!(c.rho, 0.7);
        assert_eq!(c.gamma, 0.1);
        assert_eq!(c.temperature, 2.0);
        assert_eq!(c.lambda1, 0.05);
        assert_eq!(c.lambda2, 1.0);
        assert_eq!(c.fused_dim, 64);
        assert_eq!(c.margin, 1.0);
        assert_eq!(c.grl_beta, 1.0);
        assert_eq!(c.learning_rate, 1e-3);
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.weight_decay, 5e-4);
        assert!(c.enable_dcbr && c.enable_copm && c.enable_rjca);
        c.validate().unwrap();
    }

    #[test]
    fn parses_keys_comments_and_blank_lines() {
        let text = "\
# adaptation run
epochs = 4
det_warmup_epochs = 1
seed = 9   # inline comment
source_dir = /tmp/src
dcbr = off

learning_rate = 0.01
";
        let c = Config::from_str_contents(text).unwrap();
        assert_eq!(c.epochs, 4);
        assert_eq!(c.det_warmup_epochs, 1);
        assert_eq!(c.seed, 9);
        assert_eq!(c.source_dir, PathBuf::from("/tmp/src"));
        assert!(!c.enable_dcbr);
        assert_eq!(c.learning_rate, 0.01);
        assert_eq!(c.lr_decay_epoch, 3, "decay defaults to 60% of warm-up plus adaptation epochs");
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        assert!(matches!(
            Config::from_str_contents("not_a_key = 1").unwrap_err(),
            Error::Config(msg) if msg.contains("unknown key")
        ));
        assert!(matches!(
            Config::from_str_contents("seed = 1\nseed = 2").unwrap_err(),
            Error::Config(msg) if msg.contains("duplicate")
        ));
        assert!(Config::from_str_contents("just some words").is_err());
        assert!(Config::from_str_contents("tau = fast").is_err());
    }

    #[test]
    fn range_validation() {
        assert!(Config::from_str_contents("tau = 0").is_err());
        assert!(Config::from_str_contents("theta = 1.5").is_err());
        assert!(Config::from_str_contents("rho = 1.0").is_err());
        assert!(Config::from_str_contents("momentum = 1.0").is_err());
        assert!(Config::from_str_contents("learning_rate = 0").is_err());
        assert!(Config::from_str_contents("epochs = 0").is_err());
        assert!(Config::from_str_contents("lr_decay_epoch = 2").is_ok());
    }

    #[test]
    fn explicit_decay_epoch_survives_epoch_change() {
        let c = Config::from_str_contents("epochs = 10\nlr_decay_epoch = 2").unwrap();
        assert_eq!(c.lr_decay_epoch, 2);
        let c = Config::from_str_contents("lr_decay_epoch = 2\nepochs = 10").unwrap();
        assert_eq!(c.lr_decay_epoch, 2, "key order must not matter");
    }
}
