//! Run configuration: one TOML document with a shared `[base]` phase section
//! and per-phase `[phases.<name>]` sections that override it.
//!
//! Values resolve as built-in defaults, then the file, then `key=value`
//! overrides with dotted keys (`phases.finetune1.max_epochs=10`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Phase;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Which split drives best-checkpoint selection and early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectOn {
    Train,
    Test,
}

/// Hyperparameters of one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseConfig {
    pub batch_size: usize,
    /// Negatives per anchor.
    pub k: usize,
    pub tau: f32,
    pub lr_start: f64,
    pub lr_end: f64,
    pub max_epochs: usize,
    /// Epochs without improvement before stopping; 0 disables early stopping.
    pub patience: usize,
    /// ELBO KL weight in pre-training phases.
    pub kl_weight: f32,
    /// Fraction of the phase's steps over which the pre-training KL weight
    /// ramps up linearly.
    pub kl_warmup: f64,
    /// Phrase-level KL weight in the second fine-tuning step.
    pub beta: f32,
    /// Weight of every contrastive term.
    pub contrastive_weight: f32,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f32,
    /// Candidates of the other factor are negatives too.
    pub cross_factor: bool,
    /// Stop once the melody accuracy on the selection split reaches this
    /// value.
    pub target_accuracy: Option<f64>,
    pub select_on: SelectOn,
    /// Each epoch, every training window is transposed by a uniform random
    /// shift in `[-n, n]` semitones (limited to the MIDI range); 0 disables.
    pub augment_semitones: u8,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            k: 512,
            tau: 1.0,
            lr_start: 1e-3,
            lr_end: 1e-5,
            max_epochs: 200,
            patience: 10,
            kl_weight: 0.1,
            kl_warmup: 0.1,
            beta: 0.1,
            contrastive_weight: 1.0,
            grad_clip: 1.0,
            cross_factor: true,
            target_accuracy: None,
            select_on: SelectOn::Test,
            augment_semitones: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub split_ratio: f64,
    /// Hop between 8-bar phrase windows stored in the dataset cache.
    pub phrase_hop_bars: usize,
    /// Hop between training windows at every scale.
    pub train_hop_bars: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            split_ratio: 0.9,
            phrase_hop_bars: 8,
            train_hop_bars: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub bpm: f64,
    /// Chords follow the phrase that supplies `z_p` (`"pitch"`) or `z_r`
    /// (`"rhythm"`).
    pub chord_source: String,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            bpm: 120.0,
            chord_source: "pitch".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Dataset cache written by `prep`.
    pub cache: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub base: PhaseConfig,
    /// Per-phase overrides of `base`, keyed by phase name.
    pub phases: BTreeMap<String, toml::Table>,
    pub generation: GenerationConfig,
}

fn table(pairs: &[(&str, toml::Value)]) -> toml::Table {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

impl Default for Config {
    /// Published settings: batch 128 and K = 512 in pre-training, batch 64
    /// and K = 256 in fine-tuning, about 25 epochs with the encoder frozen.
    fn default() -> Self {
        let finetune = [("batch_size", toml::Value::Integer(64)), ("k", toml::Value::Integer(256))];
        let mut ft1 = finetune.to_vec();
        ft1.push(("max_epochs", toml::Value::Integer(25)));
        ft1.push(("target_accuracy", toml::Value::Float(0.8)));
        let mut phases = BTreeMap::new();
        phases.insert(Phase::Finetune1.name().to_string(), table(&ft1));
        phases.insert(Phase::Finetune2.name().to_string(), table(&finetune));
        Self {
            seed: 0,
            cache: None,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::paper(),
            data: DataConfig::default(),
            base: PhaseConfig::default(),
            phases,
            generation: GenerationConfig::default(),
        }
    }
}

fn merge(dst: &mut toml::Table, src: &toml::Table) {
    for (k, v) in src {
        match (dst.get_mut(k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge(d, s),
            _ => {
                dst.insert(k.clone(), v.clone());
            }
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `dotted.key=value` override to a TOML table.
pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl Config {
    /// Settings sized for a single CPU and a corpus of a few dozen phrases.
    pub fn desk() -> Self {
        let mut c = Self::from_toml_str(DESK_TOML, &[] as &[&str]).expect("built-in desk config parses");
        c.out_dir = PathBuf::from("runs/desk");
        c
    }

    pub fn from_toml_str<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Table::try_from(Config::default()).map_err(|e| Error::Config(e.to_string()))?;
        let file: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        merge(&mut root, &file);
        Self::finish(root, overrides)
    }

    /// Defaults, then `path` if given, then `overrides`.
    pub fn load<S: AsRef<str>>(path: Option<&Path>, overrides: &[S]) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml_str(&text, overrides)
            }
            None => Self::from_toml_str("", overrides),
        }
    }

    /// Applies overrides on top of an already resolved configuration.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let root = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        Self::finish(root, overrides)
    }

    fn finish<S: AsRef<str>>(mut root: toml::Table, overrides: &[S]) -> Result<Self> {
        for o in overrides {
            apply_override(&mut root, o.as_ref())?;
        }
        let cfg: Config = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for name in self.phases.keys() {
            Phase::from_name(name)?;
        }
        for phase in Phase::ALL {
            let p = self.phase(phase)?;
            if p.batch_size == 0 || p.max_epochs == 0 {
                return Err(Error::Config(format!("{phase}: batch_size and max_epochs must be positive")));
            }
            if !(p.tau > 0.0) {
                return Err(Error::Config(format!("{phase}: tau must be positive")));
            }
            if !(p.lr_start >= p.lr_end && p.lr_end > 0.0) {
                return Err(Error::Config(format!("{phase}: need lr_start >= lr_end > 0")));
            }
            if p.augment_semitones > 12 {
                return Err(Error::Config(format!("{phase}: augment_semitones must be at most 12")));
            }
        }
        if !(self.data.split_ratio > 0.0 && self.data.split_ratio < 1.0) {
            return Err(Error::Config("data.split_ratio must lie in (0, 1)".into()));
        }
        if self.data.phrase_hop_bars == 0 || self.data.train_hop_bars == 0 {
            return Err(Error::Config("hops must be at least one bar".into()));
        }
        Ok(())
    }

    /// `base` with the phase's overrides applied.
    pub fn phase(&self, phase: Phase) -> Result<PhaseConfig> {
        let mut t = toml::Table::try_from(&self.base).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(o) = self.phases.get(phase.name()) {
            merge(&mut t, o);
        }
        toml::Value::Table(t)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("phases.{phase}: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&self.to_json()).unwrap_or_default();
        hex::encode(Sha256::digest(json))
    }
}

/// Desk-scale settings; also shipped as `configs/desk.toml`.
pub const DESK_TOML: &str = r#"
seed = 0

[model]
latent_dim = 32
hidden = 256
expander_hidden = 128

[data]
train_hop_bars = 2

[base]
batch_size = 16
k = 64
lr_start = 3e-3
lr_end = 3e-4
max_epochs = 60
patience = 0
select_on = "train"

[phases.pretrain2]
max_epochs = 100

[phases.pretrain4]
max_epochs = 20

[phases.pretrain8]
max_epochs = 80

[phases.finetune1]
batch_size = 16
k = 64
max_epochs = 25
target_accuracy = 0.8

[phases.finetune2]
batch_size = 16
k = 64
max_epochs = 160
"#;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_defaults_per_phase() {
        let c = Config::default();
        let p8 = c.phase(Phase::Pretrain8).unwrap();
        assert_eq!((p8.batch_size, p8.k, p8.tau), (128, 512, 1.0));
        let f1 = c.phase(Phase::Finetune1).unwrap();
        assert_eq!((f1.batch_size, f1.k, f1.beta, f1.max_epochs), (64, 256, 0.1, 25));
        assert_eq!(f1.target_accuracy, Some(0.8));
        let f2 = c.phase(Phase::Finetune2).unwrap();
        assert_eq!((f2.batch_size, f2.k), (64, 256));
        assert_eq!(c.model, ModelConfig::paper());
    }

    #[test]
    fn override_precedence() {
        let file = "seed = 5\n[base]\nk = 100\n[phases.pretrain4]\nk = 50\n";
        let c = Config::from_toml_str(file, &[] as &[&str]).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.phase(Phase::Pretrain2).unwrap().k, 100);
        assert_eq!(c.phase(Phase::Pretrain4).unwrap().k, 50);
        // the built-in fine-tuning section survives a file that does not touch it
        assert_eq!(c.phase(Phase::Finetune1).unwrap().k, 256);

        let c = Config::from_toml_str(file, &["seed=9", "phases.pretrain4.k=7", "base.tau=0.5"]).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.phase(Phase::Pretrain4).unwrap().k, 7);
        assert_eq!(c.phase(Phase::Pretrain2).unwrap().k, 100);
        assert_eq!(c.phase(Phase::Finetune2).unwrap().tau, 0.5);
        let again = c.with_overrides(&["model.latent_dim=8"]).unwrap();
        assert_eq!(again.model.latent_dim, 8);
        assert_eq!(again.seed, 9);
    }

    #[test]
    fn bad_keys_are_rejected() {
        assert!(Config::from_toml_str("[base]\nbatchsize = 3\n", &[] as &[&str]).is_err());
        assert!(Config::from_toml_str("[phases.pretrain9]\nk = 3\n", &[] as &[&str]).is_err());
        assert!(Config::from_toml_str("", &["base.k"]).is_err());
        assert!(Config::from_toml_str("", &["phases.finetune1.bogus=1"]).is_err());
        assert!(Config::from_toml_str("", &["base.tau=0"]).is_err());
    }

    #[test]
    fn desk_config_parses_and_round_trips() {
        let c = Config::desk();
        assert_eq!(c.model.latent_dim, 32);
        let text = c.to_toml().unwrap();
        let back = Config::from_toml_str(&text, &[] as &[&str]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }
}
