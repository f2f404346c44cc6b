//! Phase runner and the five-phase pipeline.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Config, SelectOn};
use super::plan::{lr_at, Ablation, LossTerm, Phase, TrainPlan};
use crate::contrastive::{window_offsets, Factor, LossReport, TargetBank};
use crate::corpus::synth::{synth_corpus, SynthOptions};
use crate::corpus::cache::DatasetCache;
use crate::corpus::{pitch_range, segment, split_corpus, transpose, PhraseSample, Song};
use crate::engine::{Adam, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::evaluation::{reconstruction_accuracy, default_mode, AccuracyResult};
use crate::model::{
    load_checkpoint, read_header, save_checkpoint, AnyModel, FlatModel, HierModel, Scale, SeqBatch,
    GROUP_ENCODER, LEAVES,
};

/// Train and test songs.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Song>,
    pub test: Vec<Song>,
}

impl Dataset {
    pub fn from_cache(cache: &DatasetCache) -> Self {
        Self {
            train: cache.songs_in(true).into_iter().cloned().collect(),
            test: cache.songs_in(false).into_iter().cloned().collect(),
        }
    }

    /// A synthetic corpus split by song.
    pub fn synthetic(opts: &SynthOptions, split_ratio: f64) -> Result<Self> {
        let songs = synth_corpus(opts)?;
        let ids: Vec<&str> = songs.iter().map(|s| s.id.as_str()).collect();
        let split = split_corpus(&ids, split_ratio, opts.seed)?;
        let (train, test) = songs.into_iter().partition(|s| split.is_train(&s.id));
        Ok(Self { train, test })
    }

    /// Windows of `bars` bars every `hop` bars with the index of their song.
    pub fn windows(&self, train: bool, bars: usize, hop: usize) -> Result<(Vec<PhraseSample>, Vec<usize>)> {
        let songs = if train { &self.train } else { &self.test };
        let mut items = Vec::new();
        let mut groups = Vec::new();
        for (g, song) in songs.iter().enumerate() {
            for w in segment(song, bars, hop)? {
                items.push(w);
                groups.push(g);
            }
        }
        Ok((items, groups))
    }
}

/// Frozen shorter-scale encoders supplying contrastive targets.
#[derive(Debug, Clone, Default)]
pub struct Teachers {
    pub pretrain2: Option<FlatModel>,
    pub pretrain4: Option<FlatModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Mean of the step reports.
    pub loss: LossReport,
    pub lr: f64,
    pub train_acc: Option<AccuracyResult>,
    pub test_acc: Option<AccuracyResult>,
    /// SHA-256 of the encoder parameters at the end of the epoch.
    pub encoder_hash: String,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub phase: Phase,
    pub seed: u64,
    pub ablation: Ablation,
    pub config_hash: String,
    pub active_terms: Vec<LossTerm>,
    pub frozen_groups: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_score: Option<f64>,
    pub stop_reason: String,
    pub wall_time_s: f64,
    pub checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

impl RunRecord {
    pub fn final_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn path(out_dir: &Path, phase: Phase) -> PathBuf {
        out_dir.join(format!("{phase}.record.json"))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

pub fn checkpoint_path(out_dir: &Path, phase: Phase) -> PathBuf {
    out_dir.join(format!("{phase}.ckpt"))
}

pub fn best_checkpoint_path(out_dir: &Path, phase: Phase) -> PathBuf {
    out_dir.join(format!("{phase}.best.ckpt"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Site {
    /// Phrase latent against every short window of the phrase.
    Phrase,
    /// Intermediate latents against the 4-bar halves.
    Intermediate,
    /// Bar-level latents against the 2-bar quarters.
    Bar,
}

struct Banks {
    sites: Vec<(Site, TargetBank)>,
}

fn teacher<'a>(t: &'a Option<FlatModel>, phase: Phase, missing: Phase) -> Result<&'a FlatModel> {
    t.as_ref().ok_or_else(|| Error::MissingPrerequisite {
        phase: phase.to_string(),
        missing: missing.to_string(),
    })
}

fn build_banks(plan: &TrainPlan, teachers: &Teachers, items: &[PhraseSample], groups: &[usize]) -> Result<Banks> {
    let refs: Vec<&PhraseSample> = items.iter().collect();
    let cross = plan.hyper.cross_factor;
    let phase = plan.phase;
    let mut sites = Vec::new();
    if plan.has(LossTerm::StructuredInfonce) {
        let (t, short) = match phase {
            Phase::Pretrain4 => (teacher(&teachers.pretrain2, phase, Phase::Pretrain2)?, 2),
            _ => (teacher(&teachers.pretrain4, phase, Phase::Pretrain4)?, 4),
        };
        let bars = phase.scale().bars();
        let offsets = window_offsets(bars, short, short / 2)?;
        sites.push((Site::Phrase, TargetBank::build(t, &refs, groups, &offsets, cross)?));
    }
    if plan.has(LossTerm::Infonce) {
        let t4 = teacher(&teachers.pretrain4, phase, Phase::Pretrain4)?;
        let t2 = teacher(&teachers.pretrain2, phase, Phase::Pretrain2)?;
        let inter = window_offsets(8, 4, 4)?;
        let bar = window_offsets(8, 2, 2)?;
        sites.push((Site::Intermediate, TargetBank::build(t4, &refs, groups, &inter, cross)?));
        sites.push((Site::Bar, TargetBank::build(t2, &refs, groups, &bar, cross)?));
    }
    Ok(Banks { sites })
}

/// Every window transposed by its own uniform shift in `[-max, max]`,
/// narrowed so that all pitches stay in the MIDI range. Chords move along.
fn transpose_windows(items: &[PhraseSample], max: i32, rng: &mut ChaCha8Rng) -> Result<Vec<PhraseSample>> {
    items
        .iter()
        .map(|p| {
            let (lo, hi) = pitch_range(&p.melody).map_or((0, 0), |(lo, hi)| (-(lo as i32), 127 - hi as i32));
            let s = rng.random_range(lo.max(-max)..=hi.min(max));
            PhraseSample::new(
                transpose(&p.melody, s)?,
                p.chord.as_ref().map(|c| c.transpose(s)),
                p.song_id.clone(),
                p.bar_offset,
            )
        })
        .collect()
}

struct StepRngs {
    noise: ChaCha8Rng,
    negatives: ChaCha8Rng,
}

struct Latents {
    mu_p: Var,
    mu_r: Var,
    lv_p: Var,
    lv_r: Var,
    /// Intermediate and bar latents of the hierarchical decoder.
    hier: Option<crate::model::HierVars>,
}

fn head_ids(model: &AnyModel) -> (ParamId, ParamId) {
    let heads = match model {
        AnyModel::Flat(m) => &m.heads,
        AnyModel::Hier(m) => &m.heads,
    };
    (heads.get(Factor::Pitch).w, heads.get(Factor::Rhythm).w)
}

/// Loss of one batch on `tape`, with its report.
fn batch_loss(
    tape: &mut Tape,
    model: &AnyModel,
    plan: &TrainPlan,
    banks: &Banks,
    batch_items: &[(usize, &PhraseSample, usize)],
    kl_weight: f32,
    rngs: &mut StepRngs,
) -> Result<(Var, LossReport)> {
    let samples: Vec<&PhraseSample> = batch_items.iter().map(|(_, s, _)| *s).collect();
    let (ml, rl, targets, lat) = match model {
        AnyModel::Flat(m) => {
            let sb = SeqBatch::new(&samples, m.config.use_chords)?;
            m.encoder.check_steps(sb.steps)?;
            let post = m.encoder.forward(tape, &sb);
            let (zp, zr) = post.sample(tape, &mut rngs.noise);
            let (ml, rl) = m.decoder.forward(tape, zp, zr, &sb);
            let lat = Latents {
                mu_p: post.mu_p,
                mu_r: post.mu_r,
                lv_p: post.lv_p,
                lv_r: post.lv_r,
                hier: None,
            };
            (ml, rl, sb, lat)
        }
        AnyModel::Hier(m) => {
            let sb = SeqBatch::new(&samples, m.config.use_chords)?;
            m.encoder.check_steps(sb.steps)?;
            let leaves = sb.split(LEAVES)?;
            let post = m.encoder.forward(tape, &sb);
            let (zp, zr) = post.sample(tape, &mut rngs.noise);
            let vars = m.expand(tape, zp, zr);
            let (ml, rl) = m.leaf_forward(tape, &vars, &leaves);
            let lat = Latents {
                mu_p: post.mu_p,
                mu_r: post.mu_r,
                lv_p: post.lv_p,
                lv_r: post.lv_r,
                hier: Some(vars),
            };
            (ml, rl, leaves, lat)
        }
    };
    let recon = tape.cross_entropy(ml, &targets.melody)?;
    let rhythm = tape.cross_entropy(rl, &targets.rhythm)?;
    let mut terms = vec![(recon, 1.0), (rhythm, 1.0)];
    let mut report = LossReport {
        recon_ce: tape.value(recon).item(),
        rhythm_ce: tape.value(rhythm).item(),
        ..Default::default()
    };

    let kl_w = if plan.has(LossTerm::Kl) {
        Some(kl_weight)
    } else if plan.has(LossTerm::KlPhrase) {
        Some(plan.hyper.beta)
    } else {
        None
    };
    if let Some(w) = kl_w {
        let kp = tape.kl_normal(lat.mu_p, lat.lv_p)?;
        let kr = tape.kl_normal(lat.mu_r, lat.lv_r)?;
        let kl = tape.add(kp, kr);
        // reconstruction is a per-step mean, so the sequence KL is spread
        // over the phrase's steps
        let w = w / samples[0].melody.len() as f32;
        report.kl = tape.value(kl).item();
        report.kl_weight = w;
        terms.push((kl, w));
    }

    let (wp, wr) = head_ids(model);
    let cw = plan.hyper.contrastive_weight;
    let mut infonce = Vec::new();
    let mut structured = Vec::new();
    for (site, bank) in &banks.sites {
        for factor in Factor::BOTH {
            let w = if factor == Factor::Pitch { wp } else { wr };
            let (source, anchors): (Var, Vec<(usize, usize, Vec<usize>)>) = match site {
                Site::Phrase => {
                    let mu = if factor == Factor::Pitch { lat.mu_p } else { lat.mu_r };
                    let segs: Vec<usize> = (0..bank.segments).collect();
                    let a = batch_items.iter().map(|&(i, _, g)| (i, g, segs.clone())).collect();
                    (mu, a)
                }
                Site::Intermediate | Site::Bar => {
                    let vars = lat
                        .hier
                        .as_ref()
                        .ok_or_else(|| Error::InvalidArgument("level-wise targets need the hierarchical model".into()))?;
                    let v = match (site, factor) {
                        (Site::Intermediate, Factor::Pitch) => vars.inter_p,
                        (Site::Intermediate, Factor::Rhythm) => vars.inter_r,
                        (_, Factor::Pitch) => vars.bar_p,
                        (_, Factor::Rhythm) => vars.bar_r,
                    };
                    // rows are segment-major: segment k of item b is row k·B + b
                    let a = (0..bank.segments)
                        .flat_map(|k| batch_items.iter().map(move |&(i, _, g)| (i, g, vec![k])))
                        .collect();
                    (v, a)
                }
            };
            let anchor = tape.normalize_rows(source)?;
            let t = bank.targets(&anchors, factor, plan.hyper.k, plan.hyper.tau, &mut rngs.negatives)?;
            let loss = tape.infonce(anchor, w, &t)?;
            if *site == Site::Phrase {
                structured.push(loss);
            } else {
                infonce.push(loss);
            }
        }
    }
    for (list, slot, weight) in [
        (&infonce, &mut report.infonce, &mut report.infonce_weight),
        (&structured, &mut report.structured_infonce, &mut report.structured_weight),
    ] {
        if list.is_empty() {
            continue;
        }
        let sum = tape.weighted_sum(&list.iter().map(|&v| (v, 1.0)).collect::<Vec<_>>());
        *slot = tape.value(sum).item();
        *weight = cw;
        terms.push((sum, cw));
    }
    let total = tape.weighted_sum(&terms);
    report.total = tape.value(total).item();
    Ok((total, report))
}

fn store_mut(model: &mut AnyModel) -> &mut ParamStore {
    match model {
        AnyModel::Flat(m) => &mut m.store,
        AnyModel::Hier(m) => &mut m.store,
    }
}

fn save_any(model: &AnyModel, path: &Path, phase: Phase, seed: u64, config: &Config) -> Result<()> {
    let json = config.to_json();
    match model {
        AnyModel::Flat(m) => save_checkpoint(m, path, phase.name(), seed, json),
        AnyModel::Hier(m) => save_checkpoint(m, path, phase.name(), seed, json),
    }
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f32;
    let mut m = LossReport::default();
    for r in reports {
        m.recon_ce += r.recon_ce / n;
        m.rhythm_ce += r.rhythm_ce / n;
        m.kl += r.kl / n;
        m.infonce += r.infonce / n;
        m.structured_infonce += r.structured_infonce / n;
        m.total += r.total / n;
        m.kl_weight += r.kl_weight / n;
        m.infonce_weight = r.infonce_weight;
        m.structured_weight = r.structured_weight;
    }
    m
}

struct Metrics(Option<File>);

impl Metrics {
    fn open(path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self(Some(f)))
    }

    fn line(&mut self, value: serde_json::Value) {
        if let Some(f) = self.0.as_mut() {
            if writeln!(f, "{value}").is_err() {
                log::warn!("metrics log is no longer writable");
                self.0 = None;
            }
        }
    }
}

/// Trains `model` through one phase. Writes `<phase>.ckpt` at the end,
/// `<phase>.best.ckpt` at the best selection score, `<phase>.record.json`,
/// and appends to `metrics.jsonl` in `out_dir`.
pub fn run_phase(
    config: &Config,
    plan: &TrainPlan,
    model: &mut AnyModel,
    teachers: &Teachers,
    data: &Dataset,
    out_dir: &Path,
) -> Result<RunRecord> {
    let phase = plan.phase;
    let hyper = &plan.hyper;
    let expected_kind = match phase {
        Phase::Finetune1 | Phase::Finetune2 => matches!(model, AnyModel::Hier(_)),
        _ => matches!(model, AnyModel::Flat(m) if m.scale == phase.scale()),
    };
    if !expected_kind {
        return Err(Error::InvalidArgument(format!("{phase} cannot train a {} model", model.kind())));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let bars = phase.scale().bars();
    let hop = config.data.train_hop_bars;
    let (items, groups) = data.windows(true, bars, hop)?;
    let (test_items, _) = data.windows(false, bars, hop)?;
    if items.is_empty() {
        return Err(Error::InvalidArgument(format!("no {bars}-bar training windows")));
    }

    {
        let store = store_mut(model);
        store.unfreeze_all();
        store.freeze(&plan.frozen_groups)?;
    }
    match model {
        AnyModel::Flat(m) => m.heads.set_tau(hyper.tau),
        AnyModel::Hier(m) => m.heads.set_tau(hyper.tau),
    }
    let mut banks = build_banks(plan, teachers, &items, &groups)?;
    let augment = i32::from(hyper.augment_semitones);

    let batch_size = hyper.batch_size.clamp(1, items.len());
    let steps_per_epoch = items.len().div_ceil(batch_size);
    let total_steps = (hyper.max_epochs * steps_per_epoch) as u64;
    let schedule = plan.schedule(steps_per_epoch);
    let mut adam = Adam::default();
    let mut order_rng = ChaCha8Rng::seed_from_u64(plan.stream_seed(1));
    let mut rngs = StepRngs {
        noise: ChaCha8Rng::seed_from_u64(plan.stream_seed(2)),
        negatives: ChaCha8Rng::seed_from_u64(plan.stream_seed(3)),
    };
    let mut augment_rng = ChaCha8Rng::seed_from_u64(plan.stream_seed(4));
    let mut metrics = Metrics::open(&out_dir.join("metrics.jsonl"))?;
    let mode = default_mode(model);
    let ckpt = checkpoint_path(out_dir, phase);
    let best_ckpt = best_checkpoint_path(out_dir, phase);

    let start = Instant::now();
    let mut record = RunRecord {
        phase,
        seed: plan.seed,
        ablation: Ablation::default(),
        config_hash: config.hash(),
        active_terms: plan.active_terms.clone(),
        frozen_groups: plan.frozen_groups.clone(),
        n_train: items.len(),
        n_test: test_items.len(),
        epochs: Vec::new(),
        best_epoch: None,
        best_score: None,
        stop_reason: "max_epochs".into(),
        wall_time_s: 0.0,
        checkpoint: ckpt.clone(),
        best_checkpoint: best_ckpt.clone(),
    };
    log::info!(
        "{phase}: {} train / {} test windows, {steps_per_epoch} steps per epoch, terms {:?}",
        items.len(),
        test_items.len(),
        plan.active_terms
    );

    let mut last_good = model.store().clone();
    let mut since_best = 0;
    let mut step: u64 = 0;
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..hyper.max_epochs {
        order.shuffle(&mut order_rng);
        // teacher targets are recomputed from the transposed windows
        let shifted;
        let epoch_items = if augment > 0 {
            shifted = transpose_windows(&items, augment, &mut augment_rng)?;
            banks = build_banks(plan, teachers, &shifted, &groups)?;
            &shifted
        } else {
            &items
        };
        let mut reports = Vec::with_capacity(steps_per_epoch);
        let mut lr = schedule.start;
        for chunk in order.chunks(batch_size) {
            lr = lr_at(&schedule, step);
            let batch: Vec<(usize, &PhraseSample, usize)> = chunk.iter().map(|&i| (i, &epoch_items[i], groups[i])).collect();
            let kl_w = plan.kl_weight(step, total_steps);
            let outcome = {
                let mut tape = Tape::new(model.store());
                batch_loss(&mut tape, model, plan, &banks, &batch, kl_w, &mut rngs).and_then(|(loss, report)| {
                    if report.is_finite() {
                        Ok((report, Some(tape.backward(loss)?)))
                    } else {
                        Ok((report, None))
                    }
                })
            };
            let (report, mut grads) = match outcome {
                Ok((report, grads)) => (report, grads.filter(|g| g.is_finite())),
                Err(Error::Numerical(_)) => (LossReport::default(), None),
                Err(e) => return Err(e),
            };
            if grads.is_none() {
                let path = out_dir.join(format!("{phase}.last_good.ckpt"));
                *store_mut(model) = last_good;
                save_any(model, &path, phase, plan.seed, config)?;
                return Err(Error::Diverged {
                    phase: phase.to_string(),
                    epoch,
                    detail: format!("non-finite loss or gradient at step {step}; last good weights in {}", path.display()),
                });
            }
            let grads = grads.as_mut().expect("checked finite");
            let norm = grads.global_norm();
            if hyper.grad_clip > 0.0 && norm > hyper.grad_clip {
                grads.scale(hyper.grad_clip / norm);
            }
            adam.step(store_mut(model), grads, lr as f32);
            metrics.line(serde_json::json!({
                "phase": phase, "epoch": epoch, "step": step, "lr": lr,
                "grad_norm": norm, "loss": report,
            }));
            reports.push(report);
            step += 1;
        }

        let train_acc = Some(reconstruction_accuracy(model, &items, mode)?);
        let test_acc = if test_items.is_empty() {
            None
        } else {
            Some(reconstruction_accuracy(model, &test_items, mode)?)
        };
        let rec = EpochRecord {
            epoch,
            steps: reports.len(),
            loss: mean_report(&reports),
            lr,
            train_acc,
            test_acc,
            encoder_hash: model.store().group_hash(GROUP_ENCODER),
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        let selected = match hyper.select_on {
            SelectOn::Test => test_acc.or(train_acc),
            SelectOn::Train => train_acc,
        };
        let score = selected.map(|a| a.recon_acc).unwrap_or(0.0);
        log::info!(
            "{phase} epoch {epoch}: loss {:.4} train acc {:.4} test acc {}",
            rec.loss.total,
            train_acc.map(|a| a.recon_acc).unwrap_or(f64::NAN),
            test_acc.map(|a| format!("{:.4}", a.recon_acc)).unwrap_or_else(|| "-".into()),
        );
        metrics.line(serde_json::json!({ "phase": phase, "epoch_end": rec }));
        record.epochs.push(rec);
        last_good = model.store().clone();

        if record.best_score.is_none_or(|b| score > b) {
            record.best_score = Some(score);
            record.best_epoch = Some(epoch);
            since_best = 0;
            save_any(model, &best_ckpt, phase, plan.seed, config)?;
        } else {
            since_best += 1;
        }
        if hyper.target_accuracy.is_some_and(|t| score >= t) {
            record.stop_reason = "target_accuracy".into();
            break;
        }
        if hyper.patience > 0 && since_best >= hyper.patience {
            record.stop_reason = "patience".into();
            break;
        }
    }
    store_mut(model).unfreeze_all();
    save_any(model, &ckpt, phase, plan.seed, config)?;
    record.wall_time_s = start.elapsed().as_secs_f64();
    record.write(&RunRecord::path(out_dir, phase))?;
    Ok(record)
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    pub out_dir: PathBuf,
    pub ablation: Ablation,
    /// Phases to run; the default runs every phase the ablation keeps.
    pub phases: Option<Vec<Phase>>,
    /// Finished checkpoints to use instead of training a phase.
    pub reuse: BTreeMap<Phase, PathBuf>,
    /// Skip phases whose checkpoint already exists in `out_dir`.
    pub resume: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PipelineResult {
    pub records: BTreeMap<Phase, RunRecord>,
    pub checkpoints: BTreeMap<Phase, PathBuf>,
}

impl PipelineResult {
    /// Records in phase order.
    pub fn ordered(&self) -> Vec<&RunRecord> {
        self.records.values().collect()
    }
}

fn load_stage(path: &Path, phase: Phase) -> Result<AnyModel> {
    let header = read_header(path)?;
    if header.stage != phase.name() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("holds stage {}, expected {phase}", header.stage),
        });
    }
    Ok(load_checkpoint(path)?.1)
}

/// Phases that run under `ablation`, in order.
pub fn pipeline_phases(ablation: Ablation) -> Vec<Phase> {
    Phase::ALL
        .into_iter()
        .filter(|p| !(ablation.no_fixed && *p == Phase::Finetune1))
        .collect()
}

/// Runs the pipeline phase by phase, loading what earlier phases produced
/// from `out_dir` (or `reuse`) when they are not run here.
pub fn run_pipeline(config: &Config, data: &Dataset, opts: &PipelineOptions) -> Result<PipelineResult> {
    let out = &opts.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let phases = opts.phases.clone().unwrap_or_else(|| pipeline_phases(opts.ablation));
    let mut result = PipelineResult::default();
    let mut models: BTreeMap<Phase, AnyModel> = BTreeMap::new();
    let locate = |p: Phase| opts.reuse.get(&p).cloned().unwrap_or_else(|| checkpoint_path(out, p));

    let need = |p: Phase, wanted_by: Phase, models: &mut BTreeMap<Phase, AnyModel>| -> Result<()> {
        if models.contains_key(&p) {
            return Ok(());
        }
        let path = locate(p);
        if !path.exists() {
            return Err(Error::MissingPrerequisite {
                phase: wanted_by.to_string(),
                missing: p.to_string(),
            });
        }
        models.insert(p, load_stage(&path, p)?);
        Ok(())
    };

    for phase in phases {
        let path = checkpoint_path(out, phase);
        if let Some(src) = opts.reuse.get(&phase) {
            models.insert(phase, load_stage(src, phase)?);
            result.checkpoints.insert(phase, src.clone());
            let rec = src.with_file_name(format!("{phase}.record.json"));
            if let Ok(r) = RunRecord::read(&rec) {
                result.records.insert(phase, r);
            }
            continue;
        }
        if opts.resume && path.exists() {
            log::info!("{phase}: resuming from {}", path.display());
            models.insert(phase, load_stage(&path, phase)?);
            result.checkpoints.insert(phase, path.clone());
            if let Ok(r) = RunRecord::read(&RunRecord::path(out, phase)) {
                result.records.insert(phase, r);
            }
            continue;
        }

        let plan = TrainPlan::new(config, phase, opts.ablation)?;
        let init_seed = plan.stream_seed(0);
        let mut teachers = Teachers::default();
        let mut model = match phase {
            Phase::Pretrain2 => AnyModel::Flat(FlatModel::new(config.model.clone(), Scale::Bars2, init_seed)?),
            Phase::Pretrain4 => {
                need(Phase::Pretrain2, phase, &mut models)?;
                AnyModel::Flat(FlatModel::new(config.model.clone(), Scale::Bars4, init_seed)?)
            }
            Phase::Pretrain8 => {
                need(Phase::Pretrain4, phase, &mut models)?;
                AnyModel::Flat(FlatModel::new(config.model.clone(), Scale::Bars8, init_seed)?)
            }
            Phase::Finetune1 | Phase::Finetune2 => {
                let from_scratch = phase == Phase::Finetune1 || opts.ablation.no_fixed;
                let init = if from_scratch { Phase::Pretrain8 } else { Phase::Finetune1 };
                need(init, phase, &mut models)?;
                need(Phase::Pretrain2, phase, &mut models)?;
                need(Phase::Pretrain4, phase, &mut models)?;
                if from_scratch {
                    let mut h = HierModel::new(config.model.clone(), init_seed)?;
                    let p8 = models[&Phase::Pretrain8].store();
                    h.store.copy_from(p8, "encoder.", "encoder.")?;
                    h.store.copy_from(p8, "heads.", "heads.")?;
                    h.store.copy_from(models[&Phase::Pretrain2].store(), "decoder.", "leaf.")?;
                    AnyModel::Hier(h)
                } else {
                    models[&Phase::Finetune1].clone()
                }
            }
        };
        if phase != Phase::Pretrain2 {
            teachers.pretrain2 = models.get(&Phase::Pretrain2).cloned().map(AnyModel::into_flat).transpose()?;
        }
        if phase.index() > Phase::Pretrain4.index() {
            teachers.pretrain4 = models.get(&Phase::Pretrain4).cloned().map(AnyModel::into_flat).transpose()?;
        }
        let mut record = run_phase(config, &plan, &mut model, &teachers, data, out)?;
        record.ablation = opts.ablation;
        record.write(&RunRecord::path(out, phase))?;
        result.records.insert(phase, record);
        result.checkpoints.insert(phase, path);
        models.insert(phase, model);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_config(dir: &Path) -> Config {
        let mut c = Config::desk();
        c.out_dir = dir.to_path_buf();
        c.model = ModelConfig {
            latent_dim: 4,
            hidden: 8,
            expander_hidden: 6,
            use_chords: false,
        };
        c.base.max_epochs = 1;
        c.base.batch_size = 4;
        c.base.k = 8;
        c.phases.clear();
        c
    }

    fn tiny_data() -> Dataset {
        Dataset::synthetic(
            &SynthOptions {
                songs: 8,
                ..Default::default()
            },
            0.75,
        )
        .unwrap()
    }

    #[test]
    fn windows_carry_song_groups() {
        let d = tiny_data();
        let (items, groups) = d.windows(true, 2, 1).unwrap();
        assert_eq!(items.len(), d.train.len() * 7);
        assert_eq!(groups.len(), items.len());
        assert!(items.iter().zip(&groups).all(|(w, &g)| w.song_id == d.train[g].id));
    }

    #[test]
    fn augmentation_keeps_rhythm_and_range() {
        let d = tiny_data();
        let (mut items, _) = d.windows(true, 2, 1).unwrap();
        // a window at the top of the range can only move down
        let top = crate::corpus::MelodyTokenSeq::new(vec![127; 32]).unwrap();
        items.push(PhraseSample::new(top, None, "top", 0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let moved = transpose_windows(&items, 12, &mut rng).unwrap();
        let mut changed = 0;
        for (a, b) in items.iter().zip(&moved) {
            assert_eq!(a.rhythm, b.rhythm);
            assert_eq!((a.song_id.as_str(), a.bar_offset), (b.song_id.as_str(), b.bar_offset));
            let shift = a
                .melody
                .tokens()
                .iter()
                .zip(b.melody.tokens())
                .find(|(x, _)| **x < 128)
                .map(|(x, y)| *y as i32 - *x as i32);
            assert!(shift.is_none_or(|s| (-12..=12).contains(&s)));
            changed += (a.melody != b.melody) as usize;
        }
        assert!(changed > items.len() / 2);
        assert!((115..=127).contains(&moved.last().unwrap().melody.tokens()[0]));
        let again = transpose_windows(&items, 12, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(again, moved);
        assert_eq!(transpose_windows(&items, 0, &mut rng).unwrap(), items);
    }

    #[test]
    fn pipeline_runs_every_phase_and_freezes_encoder() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_config(dir.path());
        let d = tiny_data();
        let opts = PipelineOptions {
            out_dir: dir.path().to_path_buf(),
            ..Default::default()
        };
        let res = run_pipeline(&c, &d, &opts).unwrap();
        assert_eq!(res.records.len(), 5);
        for phase in Phase::ALL {
            assert!(checkpoint_path(dir.path(), phase).exists());
            assert!(best_checkpoint_path(dir.path(), phase).exists());
        }
        let ft1 = &res.records[&Phase::Finetune1];
        let p8 = load_checkpoint(&checkpoint_path(dir.path(), Phase::Pretrain8)).unwrap().1;
        let hash = p8.store().group_hash(GROUP_ENCODER);
        assert!(ft1.epochs.iter().all(|e| e.encoder_hash == hash));
        let ft2 = &res.records[&Phase::Finetune2];
        assert!(ft2.epochs.iter().all(|e| e.encoder_hash != hash));
        let lines = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert!(lines.lines().count() > 5);
    }

    #[test]
    fn missing_prerequisite_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_config(dir.path());
        let opts = PipelineOptions {
            out_dir: dir.path().to_path_buf(),
            phases: Some(vec![Phase::Finetune1]),
            ..Default::default()
        };
        let err = run_pipeline(&c, &tiny_data(), &opts).unwrap_err();
        assert!(matches!(err, Error::MissingPrerequisite { .. }), "{err}");
    }

    #[test]
    fn divergence_aborts_with_last_good_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny_config(dir.path());
        c.base.lr_start = 1e30;
        c.base.lr_end = 1e30;
        c.base.grad_clip = 0.0;
        c.base.max_epochs = 50;
        let plan = TrainPlan::new(&c, Phase::Pretrain2, Ablation::default()).unwrap();
        let mut model = AnyModel::Flat(FlatModel::new(c.model.clone(), Scale::Bars2, 0).unwrap());
        let err = run_phase(&c, &plan, &mut model, &Teachers::default(), &tiny_data(), dir.path()).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
        assert!(dir.path().join("pretrain2.last_good.ckpt").exists());
    }
}
