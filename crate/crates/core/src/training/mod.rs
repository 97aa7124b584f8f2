//! Optimisation of the passage model and snippet-level pretraining.

pub mod data;
mod passage;
mod snippet;

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{argument, config, Error, Result};
use crate::features::HopConfig;
use crate::model::ModelConfig;
use crate::optim::Adam;
use crate::seed;

pub use data::{fit_norm, PassageSet, PreparedSet, SnippetPairSet};
pub use passage::{passage_step, train_passage_model, TrainOutcome};
pub use snippet::{pretrain_snippet_model, snippet_step, PretrainOutcome};

/// Model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Snippet model with voting retrieval (also the pretraining stage).
    #[serde(rename = "bl")]
    Bl,
    #[serde(rename = "rnn")]
    Rnn,
    #[serde(rename = "rnn-ft")]
    RnnFt,
    #[serde(rename = "rnn-fz")]
    RnnFz,
    #[serde(rename = "rnn-ft-cca")]
    RnnFtCca,
    #[serde(rename = "rnn-fz-cca")]
    RnnFzCca,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Bl,
        Variant::Rnn,
        Variant::RnnFt,
        Variant::RnnFz,
        Variant::RnnFtCca,
        Variant::RnnFzCca,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Bl => "bl",
            Variant::Rnn => "rnn",
            Variant::RnnFt => "rnn-ft",
            Variant::RnnFz => "rnn-fz",
            Variant::RnnFtCca => "rnn-ft-cca",
            Variant::RnnFzCca => "rnn-fz-cca",
        }
    }

    /// Starts from pretrained encoders.
    pub fn needs_pretrained(self) -> bool {
        !matches!(self, Variant::Bl | Variant::Rnn)
    }

    pub fn frozen(self) -> bool {
        matches!(self, Variant::RnnFz | Variant::RnnFzCca)
    }

    pub fn uses_cca(self) -> bool {
        matches!(self, Variant::RnnFtCca | Variant::RnnFzCca)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| argument(format!("unknown variant {s:?}")))
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Hinge margin.
    pub margin: f64,
    /// In-batch negatives per anchor; capped at `batch - 1` for short batches.
    pub negatives: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier applied when validation MRR stalls.
    pub lr_decay: f64,
    pub lr_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Regulariser of the post-training CCA fit.
    pub cca_reg: f64,
    /// Cap on validation snippet pairs during pretraining.
    pub snippet_val_pairs: usize,
    pub hops: HopConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.7,
            negatives: 15,
            batch_size: 16,
            learning_rate: 1e-3,
            lr_decay: 0.5,
            lr_patience: 5,
            early_stop_patience: 15,
            max_epochs: 100,
            seed: 0,
            variant: Variant::Rnn,
            cca_reg: 1e-4,
            snippet_val_pairs: 100,
            hops: HopConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(config("batch size must be at least 2"));
        }
        if self.negatives == 0 || self.negatives >= self.batch_size {
            return Err(config(format!(
                "negatives must be in 1..={}, got {}",
                self.batch_size - 1,
                self.negatives
            )));
        }
        if !(self.margin > 0.0) {
            return Err(config("margin must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(config("learning rate must be positive and decay in (0, 1]"));
        }
        if self.lr_patience == 0 || self.early_stop_patience == 0 {
            return Err(config("patience values must be positive"));
        }
        if self.cca_reg < 0.0 {
            return Err(config("CCA regulariser must be non-negative"));
        }
        if self.hops.sheet == 0 || self.hops.audio == 0 {
            return Err(config("hops must be positive"));
        }
        self.model.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config(format!("cannot serialise config: {e}")))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| config(format!("bad training config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&s)
    }

    /// Hex SHA-256 of the materialised config.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    fn effective_negatives(&self, batch: usize) -> usize {
        self.negatives.min(batch - 1)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_mrr: f64,
    pub lr: f64,
    pub best: bool,
}

pub fn write_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in log {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Shuffled mini-batches of `0..n` for one epoch; a trailing singleton
/// is merged into the previous batch.
fn epoch_batches(n: usize, batch: usize, rng: &mut seed::Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out: Vec<Vec<usize>> = idx.chunks(batch).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

struct LoopResult<M> {
    best: M,
    log: Vec<EpochRecord>,
}

/// Shared epoch loop: validation after each epoch, learning-rate decay on
/// plateaus, early stopping, best-validation selection (later epochs win
/// ties).
fn fit_loop<M: Clone>(
    model: &mut M,
    cfg: &TrainConfig,
    tag: &str,
    mut run_epoch: impl FnMut(&mut M, &mut Adam<f32>, usize) -> Result<f64>,
    validate: impl Fn(&M) -> Result<f64>,
) -> Result<LoopResult<M>> {
    let mut opt = Adam::<f32>::new(cfg.learning_rate);
    let mut best = model.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut stall = 0;
    let mut log = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let loss = run_epoch(model, &mut opt, epoch)?;
        let val = validate(model)?;
        let improved = val > best_val + 1e-12;
        let tie = !improved && (val - best_val).abs() <= 1e-12;
        if improved || tie {
            best = model.clone();
        }
        if improved {
            best_val = val;
            stall = 0;
        } else {
            stall += 1;
        }
        log::info!(
            "{tag} epoch {epoch}: loss {loss:.4}, val MRR {val:.4}, lr {:.2e}",
            opt.lr
        );
        log.push(EpochRecord {
            epoch,
            loss,
            val_mrr: val,
            lr: opt.lr,
            best: improved || tie,
        });
        if stall >= cfg.early_stop_patience {
            log::info!("{tag}: early stop after {epoch} epochs");
            break;
        }
        if stall > 0 && stall % cfg.lr_patience == 0 {
            opt.lr *= cfg.lr_decay;
        }
    }
    Ok(LoopResult { best, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = TrainConfig {
            variant: Variant::RnnFtCca,
            ..Default::default()
        };
        let text = cfg.to_toml().unwrap();
        assert!(text.contains("variant = \"rnn-ft-cca\""));
        assert!(text.contains("margin = 0.7"));
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for bad in [
            TrainConfig { negatives: 16, ..Default::default() },
            TrainConfig { negatives: 0, ..Default::default() },
            TrainConfig { margin: 0.0, ..Default::default() },
            TrainConfig { batch_size: 1, negatives: 1, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn variants_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("rnn-xx".parse::<Variant>().is_err());
    }

    #[test]
    fn batches_cover_everything_once() {
        let mut rng = seed::stream(1, "b");
        let b = epoch_batches(33, 16, &mut rng);
        assert_eq!(b.len(), 2);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..33).collect::<Vec<_>>());
        assert!(b.iter().all(|x| x.len() >= 2));
    }

    #[test]
    fn loop_keeps_the_best_and_stops_early() {
        let cfg = TrainConfig {
            max_epochs: 50,
            early_stop_patience: 3,
            lr_patience: 2,
            ..Default::default()
        };
        let mut m = 0usize;
        let vals = [0.1, 0.5, 0.4, 0.5, 0.3, 0.2, 0.1];
        let r = fit_loop(&mut m, &cfg, "t", |m, _, e| { *m = e; Ok(1.0) }, |m| Ok(vals[*m - 1])).unwrap();
        // epoch 4 ties epoch 2 and wins; stops after three stalled epochs
        assert_eq!(r.best, 4);
        assert_eq!(r.log.len(), 5);
        assert!(r.log[4].lr < r.log[0].lr);
    }
}
