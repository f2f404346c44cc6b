//! The ablation table: flat baselines, the full pipeline, and its two
//! ablated variants, trained from one configuration and seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{reconstruction_accuracy, AccuracyResult, EvalMode};
use crate::error::Result;
use crate::model::load_checkpoint;
use crate::training::{checkpoint_path, run_pipeline, Ablation, Config, Dataset, Phase, PipelineOptions, PipelineResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub checkpoint: PathBuf,
    pub mode: EvalMode,
    pub seed: u64,
    pub train: AccuracyResult,
    pub test: Option<AccuracyResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
    /// Pipeline runs by variant name.
    pub runs: BTreeMap<String, PipelineResult>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("model\tseed\ttrain_recon_acc\ttrain_rhythm_acc\ttest_recon_acc\ttest_rhythm_acc\n");
        for r in &self.rows {
            let (tm, tr) = r
                .test
                .map(|a| (format!("{:.4}", a.recon_acc), format!("{:.4}", a.rhythm_acc)))
                .unwrap_or_default();
            let _ = writeln!(
                s,
                "{}\t{}\t{:.4}\t{:.4}\t{tm}\t{tr}",
                r.name, r.seed, r.train.recon_acc, r.train.rhythm_acc
            );
        }
        s
    }
}

pub const ROW_BASELINE: &str = "EC2-VAE (8-bar)";
pub const ROW_LONG: &str = "Long-EC2-VAE";
pub const ROW_FULL: &str = "Ours";
pub const ROW_NO_CL: &str = "w/o CL";
pub const ROW_NO_FIXED: &str = "w/o fixed";

/// Trains the full pipeline and its variants under `out_dir` and evaluates
/// every row on both splits. Variants reuse the phases they share with the
/// full pipeline; the no-contrastive 8-bar model is the flat baseline.
pub fn run_ablations(config: &Config, data: &Dataset, out_dir: &Path) -> Result<AblationReport> {
    let full_dir = out_dir.join("full");
    let full = run_pipeline(
        config,
        data,
        &PipelineOptions {
            out_dir: full_dir.clone(),
            resume: true,
            ..Default::default()
        },
    )?;

    let shared = |phases: &[Phase]| -> BTreeMap<Phase, PathBuf> {
        phases.iter().map(|&p| (p, checkpoint_path(&full_dir, p))).collect()
    };
    let no_cl_dir = out_dir.join("no_contrastive");
    let no_cl = run_pipeline(
        config,
        data,
        &PipelineOptions {
            out_dir: no_cl_dir.clone(),
            ablation: Ablation {
                no_contrastive: true,
                no_fixed: false,
            },
            reuse: shared(&[Phase::Pretrain2]),
            resume: true,
            ..Default::default()
        },
    )?;
    let no_fixed_dir = out_dir.join("no_fixed");
    let no_fixed = run_pipeline(
        config,
        data,
        &PipelineOptions {
            out_dir: no_fixed_dir.clone(),
            ablation: Ablation {
                no_contrastive: false,
                no_fixed: true,
            },
            reuse: shared(&[Phase::Pretrain2, Phase::Pretrain4, Phase::Pretrain8]),
            resume: true,
            ..Default::default()
        },
    )?;

    let (train, _) = data.windows(true, 8, config.data.phrase_hop_bars)?;
    let (test, _) = data.windows(false, 8, config.data.phrase_hop_bars)?;
    let specs = [
        (ROW_BASELINE, checkpoint_path(&no_cl_dir, Phase::Pretrain8), EvalMode::Flat),
        (ROW_LONG, checkpoint_path(&full_dir, Phase::Pretrain8), EvalMode::Flat),
        (ROW_FULL, checkpoint_path(&full_dir, Phase::Finetune2), EvalMode::Hierarchical),
        (ROW_NO_CL, checkpoint_path(&no_cl_dir, Phase::Finetune2), EvalMode::Hierarchical),
        (ROW_NO_FIXED, checkpoint_path(&no_fixed_dir, Phase::Finetune2), EvalMode::Hierarchical),
    ];
    let mut rows = Vec::with_capacity(specs.len());
    for (name, path, mode) in specs {
        let (header, model) = load_checkpoint(&path)?;
        rows.push(AblationRow {
            name: name.to_string(),
            checkpoint: path,
            mode,
            seed: header.seed,
            train: reconstruction_accuracy(&model, &train, mode)?,
            test: if test.is_empty() {
                None
            } else {
                Some(reconstruction_accuracy(&model, &test, mode)?)
            },
        });
    }
    let runs = [
        ("full".to_string(), full),
        ("no_contrastive".to_string(), no_cl),
        ("no_fixed".to_string(), no_fixed),
    ]
    .into_iter()
    .collect();
    Ok(AblationReport {
        seed: config.seed,
        rows,
        runs,
    })
}
