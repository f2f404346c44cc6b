//! Phases, their declarative plans, and the learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::config::{Config, PhaseConfig};
use crate::error::{Error, Result};
use crate::model::{Scale, GROUP_ENCODER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain2,
    Pretrain4,
    Pretrain8,
    Finetune1,
    Finetune2,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::Pretrain2,
        Phase::Pretrain4,
        Phase::Pretrain8,
        Phase::Finetune1,
        Phase::Finetune2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain2 => "pretrain2",
            Phase::Pretrain4 => "pretrain4",
            Phase::Pretrain8 => "pretrain8",
            Phase::Finetune1 => "finetune1",
            Phase::Finetune2 => "finetune2",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown phase {name:?}")))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Phase whose checkpoint must exist before this one runs.
    pub fn prerequisite(self) -> Option<Phase> {
        match self {
            Phase::Pretrain2 => None,
            Phase::Pretrain4 => Some(Phase::Pretrain2),
            Phase::Pretrain8 => Some(Phase::Pretrain4),
            Phase::Finetune1 => Some(Phase::Pretrain8),
            Phase::Finetune2 => Some(Phase::Finetune1),
        }
    }

    /// Window length of the training items.
    pub fn scale(self) -> Scale {
        match self {
            Phase::Pretrain2 => Scale::Bars2,
            Phase::Pretrain4 => Scale::Bars4,
            _ => Scale::Bars8,
        }
    }

    pub fn is_finetune(self) -> bool {
        matches!(self, Phase::Finetune1 | Phase::Finetune2)
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Loss terms a phase optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Recon,
    Rhythm,
    /// ELBO KL of the scale's posterior, warmed up.
    Kl,
    /// Phrase-level KL weighted by β.
    KlPhrase,
    StructuredInfonce,
    /// Level-wise InfoNCE at the intermediate and bar levels.
    Infonce,
}

/// Variants used by the ablation table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Zero every contrastive term.
    pub no_contrastive: bool,
    /// Skip the frozen-encoder step and fine-tune end to end from pre-training.
    pub no_fixed: bool,
}

/// Exponential decay from `start` to `end` over `horizon` steps, constant
/// afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
    pub horizon: u64,
}

pub fn lr_at(schedule: &LrSchedule, step: u64) -> f64 {
    if schedule.horizon == 0 || step >= schedule.horizon {
        return schedule.end;
    }
    let frac = step as f64 / schedule.horizon as f64;
    let lr = schedule.start * (schedule.end / schedule.start).powf(frac);
    lr.clamp(schedule.end, schedule.start)
}

/// Everything one phase needs to know about what to optimize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub phase: Phase,
    pub frozen_groups: Vec<String>,
    pub active_terms: Vec<LossTerm>,
    pub hyper: PhaseConfig,
    pub seed: u64,
}

impl TrainPlan {
    pub fn new(config: &Config, phase: Phase, ablation: Ablation) -> Result<Self> {
        let hyper = config.phase(phase)?;
        let mut terms = vec![LossTerm::Recon, LossTerm::Rhythm];
        let contrastive = !ablation.no_contrastive && hyper.contrastive_weight != 0.0;
        match phase {
            Phase::Pretrain2 => terms.push(LossTerm::Kl),
            Phase::Pretrain4 | Phase::Pretrain8 => {
                terms.push(LossTerm::Kl);
                if contrastive {
                    terms.push(LossTerm::StructuredInfonce);
                }
            }
            Phase::Finetune1 => {
                if contrastive {
                    terms.push(LossTerm::Infonce);
                }
            }
            Phase::Finetune2 => {
                terms.push(LossTerm::KlPhrase);
                if contrastive {
                    terms.push(LossTerm::Infonce);
                    terms.push(LossTerm::StructuredInfonce);
                }
            }
        }
        let frozen_groups = if phase == Phase::Finetune1 {
            vec![GROUP_ENCODER.to_string()]
        } else {
            Vec::new()
        };
        Ok(Self {
            phase,
            frozen_groups,
            active_terms: terms,
            hyper,
            seed: config.seed,
        })
    }

    pub fn has(&self, term: LossTerm) -> bool {
        self.active_terms.contains(&term)
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> LrSchedule {
        LrSchedule {
            start: self.hyper.lr_start,
            end: self.hyper.lr_end,
            horizon: (self.hyper.max_epochs * steps_per_epoch) as u64,
        }
    }

    /// Pre-training KL weight after linear warm-up.
    pub fn kl_weight(&self, step: u64, total_steps: u64) -> f32 {
        let warm = (self.hyper.kl_warmup * total_steps as f64).ceil();
        if warm <= 0.0 {
            return self.hyper.kl_weight;
        }
        (self.hyper.kl_weight as f64 * ((step as f64 + 1.0) / warm).min(1.0)) as f32
    }

    /// RNG seed for a purpose within this phase.
    pub fn stream_seed(&self, stream: u64) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((self.phase.index() as u64 + 1) << 32)
            .wrapping_add(stream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_examples() {
        let s = LrSchedule {
            start: 1e-3,
            end: 1e-5,
            horizon: 1000,
        };
        assert_eq!(lr_at(&s, 0), 1e-3);
        assert_eq!(lr_at(&s, 1000), 1e-5);
        assert_eq!(lr_at(&s, 5000), 1e-5);
        assert!((lr_at(&s, 500) - 1e-4).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for step in 0..1200 {
            let lr = lr_at(&s, step);
            assert!(lr <= prev && (1e-5..=1e-3).contains(&lr));
            prev = lr;
        }
    }

    #[test]
    fn plan_invariants() {
        let c = Config::default();
        let f1 = TrainPlan::new(&c, Phase::Finetune1, Ablation::default()).unwrap();
        assert_eq!(f1.frozen_groups, vec!["encoder"]);
        assert!(f1.has(LossTerm::Infonce) && !f1.has(LossTerm::KlPhrase));
        let f2 = TrainPlan::new(&c, Phase::Finetune2, Ablation::default()).unwrap();
        assert!(f2.frozen_groups.is_empty());
        assert!(f2.has(LossTerm::Infonce) && f2.has(LossTerm::StructuredInfonce) && f2.has(LossTerm::KlPhrase));
        let p8 = TrainPlan::new(&c, Phase::Pretrain8, Ablation::default()).unwrap();
        assert!(p8.has(LossTerm::StructuredInfonce) && p8.has(LossTerm::Kl));
        let p2 = TrainPlan::new(&c, Phase::Pretrain2, Ablation::default()).unwrap();
        assert!(!p2.has(LossTerm::StructuredInfonce));
        let ablated = Ablation {
            no_contrastive: true,
            no_fixed: false,
        };
        for phase in Phase::ALL {
            let p = TrainPlan::new(&c, phase, ablated).unwrap();
            assert!(!p.has(LossTerm::Infonce) && !p.has(LossTerm::StructuredInfonce));
        }
    }

    #[test]
    fn kl_warmup_is_linear_then_flat() {
        let p = TrainPlan::new(&Config::default(), Phase::Pretrain2, Ablation::default()).unwrap();
        assert!((p.kl_weight(0, 100) - 0.01).abs() < 1e-7);
        assert!((p.kl_weight(4, 100) - 0.05).abs() < 1e-7);
        assert_eq!(p.kl_weight(9, 100), 0.1);
        assert_eq!(p.kl_weight(90, 100), 0.1);
    }

    #[test]
    fn prerequisites_chain_in_order() {
        for w in Phase::ALL.windows(2) {
            assert_eq!(w[1].prerequisite(), Some(w[0]));
        }
        assert_eq!(Phase::from_name("finetune2").unwrap(), Phase::Finetune2);
        assert!(Phase::from_name("nope").is_err());
    }
}
