//! Reconstruction accuracy, the transposition disentanglement probe,
//! accuracy curves, and the ablation table.

pub mod ablation;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{pitch_range, transpose, PhraseSample};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::model::{AnyModel, FlatModel, HierModel, Model};
use crate::training::RunRecord;

pub use ablation::{run_ablations, AblationReport, AblationRow};

/// Teacher-forced per-step argmax accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyResult {
    pub recon_acc: f64,
    pub rhythm_acc: f64,
    pub n_sequences: usize,
    pub n_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Flat,
    Hierarchical,
}

#[derive(Debug, Default, Clone, Copy)]
struct Counts {
    melody: usize,
    rhythm: usize,
    steps: usize,
}

fn count(logits: &Tensor, targets: &[usize]) -> Result<usize> {
    if logits.rows != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} targets",
            logits.rows,
            targets.len()
        )));
    }
    Ok(logits
        .argmax_rows()
        .iter()
        .zip(targets)
        .filter(|(a, b)| a == b)
        .count())
}

/// Accuracy of time-major logits against their targets.
pub fn accuracy_from_logits(
    melody_logits: &Tensor,
    rhythm_logits: &Tensor,
    melody_targets: &[usize],
    rhythm_targets: &[usize],
    n_sequences: usize,
) -> Result<AccuracyResult> {
    if melody_targets.len() != rhythm_targets.len() || melody_targets.is_empty() {
        return Err(Error::Shape("melody and rhythm targets differ in length".into()));
    }
    let m = count(melody_logits, melody_targets)?;
    let r = count(rhythm_logits, rhythm_targets)?;
    let n = melody_targets.len();
    Ok(AccuracyResult {
        recon_acc: m as f64 / n as f64,
        rhythm_acc: r as f64 / n as f64,
        n_sequences,
        n_steps: n,
    })
}

const EVAL_BATCH: usize = 32;

fn accumulate<F>(samples: &[PhraseSample], mut run: F) -> Result<AccuracyResult>
where
    F: FnMut(&[&PhraseSample]) -> Result<(Tensor, Tensor, crate::model::SeqBatch)>,
{
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no sequences to evaluate".into()));
    }
    let mut c = Counts::default();
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&PhraseSample> = chunk.iter().collect();
        let (ml, rl, batch) = run(&refs)?;
        c.melody += count(&ml, &batch.melody)?;
        c.rhythm += count(&rl, &batch.rhythm)?;
        c.steps += batch.melody.len();
    }
    Ok(AccuracyResult {
        recon_acc: c.melody as f64 / c.steps as f64,
        rhythm_acc: c.rhythm as f64 / c.steps as f64,
        n_sequences: samples.len(),
        n_steps: c.steps,
    })
}

pub fn flat_accuracy(model: &FlatModel, samples: &[PhraseSample]) -> Result<AccuracyResult> {
    accumulate(samples, |refs| model.teacher_forced(refs))
}

pub fn hier_accuracy(model: &HierModel, samples: &[PhraseSample]) -> Result<AccuracyResult> {
    accumulate(samples, |refs| model.teacher_forced(refs))
}

/// Teacher-forced accuracy from posterior means. The mode must match the
/// model kind and the windows the model's scale.
pub fn reconstruction_accuracy(model: &AnyModel, samples: &[PhraseSample], mode: EvalMode) -> Result<AccuracyResult> {
    match (model, mode) {
        (AnyModel::Flat(m), EvalMode::Flat) => flat_accuracy(m, samples),
        (AnyModel::Hier(m), EvalMode::Hierarchical) => hier_accuracy(m, samples),
        (m, mode) => Err(Error::InvalidArgument(format!(
            "{mode:?} evaluation of a {} model",
            m.kind()
        ))),
    }
}

pub fn default_mode(model: &AnyModel) -> EvalMode {
    match model {
        AnyModel::Flat(_) => EvalMode::Flat,
        AnyModel::Hier(_) => EvalMode::Hierarchical,
    }
}

/// Mean latent change for one transposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub semitones: i32,
    /// Mean over the probe set of `Σ|Δz_p|`.
    pub delta_zp: f64,
    pub delta_zr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub rows: Vec<ProbeRow>,
    pub n_probe: usize,
    /// Melodies dropped because the largest shift would leave the MIDI range.
    pub excluded: usize,
}

impl ProbeResult {
    pub fn mean_delta_zp(&self) -> f64 {
        self.rows.iter().map(|r| r.delta_zp).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_delta_zr(&self) -> f64 {
        self.rows.iter().map(|r| r.delta_zr).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("semitones\tdelta_zp\tdelta_zr\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{:.6}\t{:.6}", r.semitones, r.delta_zp, r.delta_zr);
        }
        s
    }
}

fn abs_diff_sum(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum()
}

/// Transposes every probe melody by each shift (chords and rhythm unchanged)
/// and averages the per-melody `Σ|Δz|` of the posterior means.
pub fn disentanglement_probe<M: Model>(model: &M, probe: &[PhraseSample], shifts: &[i32]) -> Result<ProbeResult> {
    let max_up = shifts.iter().copied().filter(|s| *s > 0).max().unwrap_or(0);
    let max_down = shifts.iter().copied().filter(|s| *s < 0).min().unwrap_or(0);
    let kept: Vec<&PhraseSample> = probe
        .iter()
        .filter(|p| match pitch_range(&p.melody) {
            Some((lo, hi)) => hi as i32 + max_up <= 127 && lo as i32 + max_down >= 0,
            None => true,
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::InvalidArgument("probe set is empty after filtering".into()));
    }
    let excluded = probe.len() - kept.len();
    let base = model.encode_batch(&kept)?;
    let mut rows = Vec::with_capacity(shifts.len());
    for &i in shifts {
        let moved: Vec<PhraseSample> = kept
            .iter()
            .map(|p| {
                PhraseSample::new(
                    transpose(&p.melody, i)?,
                    p.chord.clone(),
                    p.song_id.clone(),
                    p.bar_offset,
                )
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&PhraseSample> = moved.iter().collect();
        let shifted = model.encode_batch(&refs)?;
        let mut dp: Vec<f64> = Vec::with_capacity(kept.len());
        let mut dr: Vec<f64> = Vec::with_capacity(kept.len());
        for (a, b) in base.iter().zip(&shifted) {
            dp.push(abs_diff_sum(&a.mean_p, &b.mean_p));
            dr.push(abs_diff_sum(&a.mean_r, &b.mean_r));
        }
        // sorted sums do not depend on the probe order
        let mean = |mut v: Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v.iter().sum::<f64>() / v.len() as f64
        };
        rows.push(ProbeRow {
            semitones: i,
            delta_zp: mean(dp),
            delta_zr: mean(dr),
        });
    }
    Ok(ProbeResult {
        rows,
        n_probe: kept.len(),
        excluded,
    })
}

/// Accuracy series of one model variant.
#[derive(Debug, Clone)]
pub struct CurveSeries<'a> {
    pub variant: String,
    pub records: Vec<&'a RunRecord>,
}

/// Tab-separated per-epoch accuracies of every variant and phase. Epochs
/// missing from a record keep an empty row.
pub fn emit_curves(series: &[CurveSeries]) -> String {
    let mut s = String::from("variant\tphase\tepoch\ttrain_recon_acc\ttrain_rhythm_acc\ttest_recon_acc\ttest_rhythm_acc\n");
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for v in series {
        for rec in &v.records {
            let last = rec.epochs.iter().map(|e| e.epoch).max();
            let Some(last) = last else { continue };
            for epoch in 0..=last {
                let e = rec.epochs.iter().find(|e| e.epoch == epoch);
                let tr = e.and_then(|e| e.train_acc);
                let te = e.and_then(|e| e.test_acc);
                let _ = writeln!(
                    s,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    v.variant,
                    rec.phase,
                    epoch,
                    fmt(tr.map(|a| a.recon_acc)),
                    fmt(tr.map(|a| a.rhythm_acc)),
                    fmt(te.map(|a| a.recon_acc)),
                    fmt(te.map(|a| a.rhythm_acc)),
                );
            }
        }
    }
    s
}

/// First epoch (counted across the records in order) whose melody accuracy
/// on the chosen split reaches `threshold`.
pub fn first_epoch_reaching(records: &[&RunRecord], threshold: f64, train_split: bool) -> Option<usize> {
    let mut offset = 0;
    for rec in records {
        for e in &rec.epochs {
            let acc = if train_split { e.train_acc } else { e.test_acc };
            if acc.is_some_and(|a| a.recon_acc >= threshold) {
                return Some(offset + e.epoch);
            }
        }
        offset += rec.epochs.iter().map(|e| e.epoch + 1).max().unwrap_or(0);
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth;
    use crate::model::{ModelConfig, Scale};

    fn one_hot(targets: &[usize], classes: usize, scale: f32) -> Tensor {
        let mut t = Tensor::zeros(targets.len(), classes);
        for (r, &c) in targets.iter().enumerate() {
            t.data[r * classes + c] = scale;
        }
        t
    }

    #[test]
    fn perfect_and_orthogonal_logits() {
        let m = [60usize, 128, 129, 62];
        let r = [0usize, 1, 2, 0];
        let acc = accuracy_from_logits(&one_hot(&m, 130, 1.0), &one_hot(&r, 3, 1.0), &m, &r, 1).unwrap();
        assert_eq!((acc.recon_acc, acc.rhythm_acc), (1.0, 1.0));
        let wrong_m: Vec<usize> = m.iter().map(|t| (t + 1) % 130).collect();
        let wrong_r: Vec<usize> = r.iter().map(|t| (t + 1) % 3).collect();
        let acc = accuracy_from_logits(&one_hot(&wrong_m, 130, 1.0), &one_hot(&wrong_r, 3, 1.0), &m, &r, 1).unwrap();
        assert_eq!((acc.recon_acc, acc.rhythm_acc), (0.0, 0.0));
    }

    #[test]
    fn uniform_logits_match_brute_force_count() {
        // argmax of a uniform row is class 0, so exactly the targets equal to
        // 0 count as hits
        let m = [0usize, 5, 0, 129];
        let r = [0usize, 2, 1, 0];
        let acc = accuracy_from_logits(&Tensor::zeros(4, 130), &Tensor::zeros(4, 3), &m, &r, 1).unwrap();
        let brute_m = m.iter().filter(|&&t| t == 0).count() as f64 / 4.0;
        let brute_r = r.iter().filter(|&&t| t == 0).count() as f64 / 4.0;
        assert_eq!((acc.recon_acc, acc.rhythm_acc), (brute_m, brute_r));
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            latent_dim: 4,
            hidden: 8,
            expander_hidden: 6,
            use_chords: false,
        }
    }

    fn phrases(n: usize, bars: usize) -> Vec<PhraseSample> {
        synth::synth_corpus(&synth::SynthOptions {
            songs: n,
            ..Default::default()
        })
        .unwrap()
        .iter()
        .map(|s| crate::corpus::segment(s, bars, 8).unwrap().remove(0))
        .collect()
    }

    #[test]
    fn model_accuracy_checks_mode_and_scale() {
        let ps = phrases(3, 8);
        let flat = AnyModel::Flat(FlatModel::new(tiny(), Scale::Bars8, 0).unwrap());
        let acc = reconstruction_accuracy(&flat, &ps, EvalMode::Flat).unwrap();
        assert_eq!((acc.n_sequences, acc.n_steps), (3, 384));
        assert!((0.0..=1.0).contains(&acc.recon_acc));
        assert!(reconstruction_accuracy(&flat, &ps, EvalMode::Hierarchical).is_err());
        let short = AnyModel::Flat(FlatModel::new(tiny(), Scale::Bars2, 0).unwrap());
        assert!(matches!(reconstruction_accuracy(&short, &ps, EvalMode::Flat), Err(Error::Shape(_))));
        let hier = AnyModel::Hier(HierModel::new(tiny(), 0).unwrap());
        let acc = reconstruction_accuracy(&hier, &ps, EvalMode::Hierarchical).unwrap();
        assert_eq!(acc.n_steps, 384);
    }

    #[test]
    fn probe_identity_and_order_invariance() {
        let ps = phrases(5, 8);
        let m = FlatModel::new(tiny(), Scale::Bars8, 1).unwrap();
        let shifts: Vec<i32> = (0..=12).collect();
        let res = disentanglement_probe(&m, &ps, &shifts).unwrap();
        assert_eq!(res.rows.len(), 13);
        assert_eq!((res.rows[0].delta_zp, res.rows[0].delta_zr), (0.0, 0.0));
        assert!(res.rows.iter().all(|r| r.delta_zp.is_finite() && r.delta_zr >= 0.0));
        let mut reversed = ps.clone();
        reversed.reverse();
        let again = disentanglement_probe(&m, &reversed, &shifts).unwrap();
        assert_eq!(res.rows, again.rows);

        let mut high = ps[0].clone();
        high.melody = transpose(&high.melody, 60).unwrap_or(high.melody);
        let high = PhraseSample::new(
            crate::corpus::MelodyTokenSeq::new(vec![120; 1].into_iter().chain(vec![128; 127]).collect()).unwrap(),
            None,
            "hi",
            0,
        )
        .unwrap();
        let res = disentanglement_probe(&m, &[high.clone(), ps[1].clone()], &shifts).unwrap();
        assert_eq!((res.n_probe, res.excluded), (1, 1));
        assert!(disentanglement_probe(&m, &[high], &shifts).is_err());
    }
}
