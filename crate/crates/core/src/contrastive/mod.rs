//! Contrastive heads, positive targets from frozen shorter-scale encoders,
//! negative sampling, and the loss report.

pub mod losses;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PhraseSample;
use crate::engine::{ContrastiveTargets, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{FlatModel, Model, GROUP_HEADS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Factor {
    Pitch,
    Rhythm,
}

impl Factor {
    pub const BOTH: [Factor; 2] = [Factor::Pitch, Factor::Rhythm];
}

/// Bilinear similarity `aᵀ W c / τ` for one factor.
#[derive(Debug, Clone)]
pub struct SimilarityHead {
    pub w: ParamId,
    pub tau: f32,
    pub factor: Factor,
}

impl SimilarityHead {
    pub fn weights<'s>(&self, store: &'s ParamStore) -> &'s [f32] {
        &store.value(self.w).data
    }
}

/// One head per factor, shared by every level. `W` starts at the identity.
#[derive(Debug, Clone)]
pub struct Heads {
    pub pitch: SimilarityHead,
    pub rhythm: SimilarityHead,
}

impl Heads {
    pub fn new(store: &mut ParamStore, d: usize) -> Self {
        let head = |store: &mut ParamStore, name: &str, factor| SimilarityHead {
            w: store.add_identity(format!("heads.{name}"), GROUP_HEADS, d),
            tau: 1.0,
            factor,
        };
        Self {
            pitch: head(store, "w_pitch", Factor::Pitch),
            rhythm: head(store, "w_rhythm", Factor::Rhythm),
        }
    }

    pub fn get(&self, factor: Factor) -> &SimilarityHead {
        match factor {
            Factor::Pitch => &self.pitch,
            Factor::Rhythm => &self.rhythm,
        }
    }

    pub fn set_tau(&mut self, tau: f32) {
        self.pitch.tau = tau;
        self.rhythm.tau = tau;
    }
}

/// An anchor with its positives and negatives, all normalized on
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub anchor: Vec<f32>,
    pub positives: Vec<Vec<f32>>,
    pub negatives: Vec<Vec<f32>>,
}

impl ContrastiveBatch {
    pub fn new(anchor: &[f32], positives: &[Vec<f32>], negatives: &[Vec<f32>]) -> Result<Self> {
        if negatives.is_empty() {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        let norm_all = |vs: &[Vec<f32>]| vs.iter().map(|v| losses::normalize(v)).collect::<Result<Vec<_>>>();
        Ok(Self {
            anchor: losses::normalize(anchor)?,
            positives: norm_all(positives)?,
            negatives: norm_all(negatives)?,
        })
    }

    pub fn k(&self) -> usize {
        self.negatives.len()
    }

    fn parts(&self) -> (Vec<&[f32]>, Vec<&[f32]>) {
        (
            self.positives.iter().map(|v| v.as_slice()).collect(),
            self.negatives.iter().map(|v| v.as_slice()).collect(),
        )
    }

    /// Single-positive InfoNCE under `head`.
    pub fn infonce(&self, head: &SimilarityHead, store: &ParamStore) -> Result<f32> {
        if self.positives.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "InfoNCE takes exactly one positive, got {}",
                self.positives.len()
            )));
        }
        self.structured_infonce(head, store)
    }

    /// InfoNCE averaged over every positive.
    pub fn structured_infonce(&self, head: &SimilarityHead, store: &ParamStore) -> Result<f32> {
        let (pos, neg) = self.parts();
        Ok(losses::structured_infonce(&self.anchor, head.weights(store), &pos, &neg, head.tau)?.0)
    }
}

/// Mean melody and rhythm cross-entropy of time-major logits.
pub fn recon_losses(
    melody_logits: &Tensor,
    rhythm_logits: &Tensor,
    melody_targets: &[usize],
    rhythm_targets: &[usize],
) -> Result<(f32, f32)> {
    let (m, _) = losses::cross_entropy(&melody_logits.data, melody_targets, melody_logits.cols)?;
    let (r, _) = losses::cross_entropy(&rhythm_logits.data, rhythm_targets, rhythm_logits.cols)?;
    Ok((m, r))
}

/// Per-step values of every loss term.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon_ce: f32,
    pub rhythm_ce: f32,
    pub kl: f32,
    /// Level-wise InfoNCE, summed over levels and factors.
    pub infonce: f32,
    pub structured_infonce: f32,
    pub total: f32,
    pub kl_weight: f32,
    pub infonce_weight: f32,
    pub structured_weight: f32,
}

impl LossReport {
    pub fn recompute_total(&self) -> f32 {
        self.recon_ce
            + self.rhythm_ce
            + self.kl_weight * self.kl
            + self.infonce_weight * self.infonce
            + self.structured_weight * self.structured_infonce
    }

    pub fn is_finite(&self) -> bool {
        [
            self.recon_ce,
            self.rhythm_ce,
            self.kl,
            self.infonce,
            self.structured_infonce,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Bar offsets of the `short_bars` windows inside a `phrase_bars` window,
/// every `hop` bars.
pub fn window_offsets(phrase_bars: usize, short_bars: usize, hop: usize) -> Result<Vec<usize>> {
    if short_bars == 0 || short_bars > phrase_bars || hop == 0 {
        return Err(Error::Shape(format!(
            "no {short_bars}-bar windows with hop {hop} in {phrase_bars} bars"
        )));
    }
    Ok((0..=phrase_bars - short_bars).step_by(hop).collect())
}

/// Normalized posterior means of the frozen `short_model` over the
/// half-overlapping windows of `phrase` (hop of half the short scale).
pub fn build_positives(phrase: &PhraseSample, short_model: &FlatModel) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
    let short = short_model.scale.bars();
    if phrase.bars() != 2 * short {
        return Err(Error::Shape(format!(
            "a {}-bar model gives positives for {}-bar windows, not {}",
            short,
            2 * short,
            phrase.bars()
        )));
    }
    let offsets = window_offsets(phrase.bars(), short, short / 2)?;
    encode_windows(short_model, &[phrase], &offsets)?
        .into_iter()
        .map(|(p, r)| Ok((losses::normalize(&p)?, losses::normalize(&r)?)))
        .collect()
}

/// Posterior means of `model` over every `offset` window of every sample, in
/// sample-major order.
pub fn encode_windows(model: &FlatModel, samples: &[&PhraseSample], offsets: &[usize]) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
    let bars = model.scale.bars();
    let windows: Vec<PhraseSample> = samples
        .iter()
        .flat_map(|s| offsets.iter().map(move |&o| s.sub_window(o, bars)))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(64) {
        let refs: Vec<&PhraseSample> = chunk.iter().collect();
        for post in model.encode_batch(&refs)? {
            out.push((post.mean_p, post.mean_r));
        }
    }
    Ok(out)
}

/// Identity of one bank entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BankKey {
    /// Source group (song); same-factor entries of the anchor's group are
    /// never negatives.
    pub group: usize,
    /// Training item the entry was computed from.
    pub item: usize,
    /// Window index within the item.
    pub segment: usize,
    pub factor: Factor,
}

/// Normalized target latents for one contrastive site.
#[derive(Debug, Clone)]
pub struct TargetBank {
    pub latents: Tensor,
    pub keys: Vec<BankKey>,
    pub segments: usize,
    pub cross_factor: bool,
    index: HashMap<(usize, usize, Factor), usize>,
}

impl TargetBank {
    /// Encodes the `offsets` windows of every item with the frozen `model`.
    /// `groups[i]` is the exclusion group of item `i`.
    pub fn build(
        model: &FlatModel,
        items: &[&PhraseSample],
        groups: &[usize],
        offsets: &[usize],
        cross_factor: bool,
    ) -> Result<Self> {
        if groups.len() != items.len() {
            return Err(Error::Shape("one group per item is required".into()));
        }
        let means = encode_windows(model, items, offsets)?;
        let d = model.config.latent_dim;
        let mut data = Vec::with_capacity(means.len() * 2 * d);
        let mut keys = Vec::with_capacity(means.len() * 2);
        for (n, (p, r)) in means.iter().enumerate() {
            let (item, segment) = (n / offsets.len(), n % offsets.len());
            for (factor, v) in [(Factor::Pitch, p), (Factor::Rhythm, r)] {
                data.extend(losses::normalize(v)?);
                keys.push(BankKey {
                    group: groups[item],
                    item,
                    segment,
                    factor,
                });
            }
        }
        Ok(Self::from_parts(Tensor::new(keys.len(), d, data), keys, offsets.len(), cross_factor))
    }

    pub fn from_parts(latents: Tensor, keys: Vec<BankKey>, segments: usize, cross_factor: bool) -> Self {
        let index = keys
            .iter()
            .enumerate()
            .map(|(i, k)| ((k.item, k.segment, k.factor), i))
            .collect();
        Self {
            latents,
            keys,
            segments,
            cross_factor,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn position(&self, item: usize, segment: usize, factor: Factor) -> Option<usize> {
        self.index.get(&(item, segment, factor)).copied()
    }

    fn eligible(&self, group: usize, factor: Factor) -> Vec<usize> {
        self.keys
            .iter()
            .enumerate()
            .filter(|(_, k)| {
                if k.factor == factor {
                    k.group != group
                } else {
                    self.cross_factor
                }
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// `k` distinct negatives for an anchor of `group` and `factor`.
    pub fn draw(&self, group: usize, factor: Factor, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        let pool = self.eligible(group, factor);
        if pool.len() < k || k == 0 {
            return Err(Error::InsufficientPool {
                available: pool.len(),
                requested: k,
            });
        }
        Ok(rand::seq::index::sample(rng, pool.len(), k)
            .into_iter()
            .map(|i| pool[i])
            .collect())
    }

    /// Targets for anchors `(item, group, segments)` of one factor: the
    /// positives are the listed segments of the item with the same factor.
    pub fn targets(
        &self,
        anchors: &[(usize, usize, Vec<usize>)],
        factor: Factor,
        k: usize,
        tau: f32,
        rng: &mut ChaCha8Rng,
    ) -> Result<ContrastiveTargets> {
        let mut positives = Vec::with_capacity(anchors.len());
        let mut negatives = Vec::with_capacity(anchors.len());
        for (item, group, segs) in anchors {
            let pos = segs
                .iter()
                .map(|&s| {
                    self.position(*item, s, factor)
                        .ok_or_else(|| Error::Shape(format!("no target for item {item} segment {s}")))
                })
                .collect::<Result<Vec<_>>>()?;
            positives.push(pos);
            negatives.push(self.draw(*group, factor, k, rng)?);
        }
        Ok(ContrastiveTargets {
            bank: self.latents.clone(),
            positives,
            negatives,
            tau,
        })
    }
}

/// `K` negatives from `bank` for an anchor of `group` and `factor`, seeded.
pub fn draw_negatives(bank: &TargetBank, group: usize, factor: Factor, k: usize, seed: u64) -> Result<Vec<usize>> {
    bank.draw(group, factor, k, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Scale};

    fn toy_bank(items: usize, segments: usize, cross_factor: bool) -> TargetBank {
        let mut keys = Vec::new();
        let mut data = Vec::new();
        for item in 0..items {
            for segment in 0..segments {
                for factor in Factor::BOTH {
                    keys.push(BankKey {
                        group: item,
                        item,
                        segment,
                        factor,
                    });
                    data.extend([1.0f32, 0.0]);
                }
            }
        }
        TargetBank::from_parts(Tensor::new(keys.len(), 2, data), keys, segments, cross_factor)
    }

    #[test]
    fn negatives_exclude_own_phrase_and_factor() {
        // 100 items × 3 segments × 2 factors = 600 entries
        let bank = toy_bank(100, 3, true);
        assert_eq!(bank.len(), 600);
        let draw = draw_negatives(&bank, 7, Factor::Pitch, 512, 1).unwrap();
        assert_eq!(draw.len(), 512);
        let mut sorted = draw.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 512);
        assert!(draw
            .iter()
            .all(|&i| !(bank.keys[i].group == 7 && bank.keys[i].factor == Factor::Pitch)));
        assert_eq!(draw, draw_negatives(&bank, 7, Factor::Pitch, 512, 1).unwrap());

        let small = toy_bank(17, 3, false);
        assert!(matches!(
            draw_negatives(&small, 0, Factor::Rhythm, 512, 0),
            Err(Error::InsufficientPool { available: 48, requested: 512 })
        ));
        let same_factor_only = draw_negatives(&small, 0, Factor::Rhythm, 48, 0).unwrap();
        assert!(same_factor_only.iter().all(|&i| small.keys[i].factor == Factor::Rhythm));
    }

    #[test]
    fn positives_cover_half_overlapping_windows() {
        assert_eq!(window_offsets(8, 4, 2).unwrap(), vec![0, 2, 4]);
        assert_eq!(window_offsets(4, 2, 1).unwrap(), vec![0, 1, 2]);
        assert_eq!(window_offsets(8, 2, 2).unwrap(), vec![0, 2, 4, 6]);
        let songs = crate::corpus::synth::synth_corpus(&Default::default()).unwrap();
        let cfg = ModelConfig {
            latent_dim: 4,
            hidden: 6,
            expander_hidden: 4,
            use_chords: false,
        };
        let phrase = crate::corpus::segment(&songs[0], 8, 8).unwrap().remove(0);
        let four = FlatModel::new(cfg.clone(), Scale::Bars4, 0).unwrap();
        let pos = build_positives(&phrase, &four).unwrap();
        assert_eq!(pos.len(), 3);
        for (p, r) in &pos {
            for v in [p, r] {
                let n: f32 = v.iter().map(|x| x * x).sum();
                assert!((n - 1.0).abs() < 1e-5);
            }
        }
        let seg4 = phrase.sub_window(2, 4).unwrap();
        let two = FlatModel::new(cfg, Scale::Bars2, 0).unwrap();
        assert_eq!(build_positives(&seg4, &two).unwrap().len(), 3);
        assert!(build_positives(&phrase, &two).is_err());
    }

    #[test]
    fn batch_normalizes_and_matches_closed_form() {
        let mut store = ParamStore::new();
        let heads = Heads::new(&mut store, 2);
        let b = ContrastiveBatch::new(&[2.0, 0.0], &[vec![3.0, 0.0]], &[vec![0.0, 5.0]]).unwrap();
        let l = b.infonce(&heads.pitch, &store).unwrap();
        assert!((l - (1.0 + (-1.0f32).exp()).ln()).abs() < 1e-6);
        let multi = ContrastiveBatch::new(&[2.0, 0.0], &[vec![3.0, 0.0], vec![1.0, 0.0]], &[vec![0.0, 5.0]]).unwrap();
        assert!(multi.infonce(&heads.pitch, &store).is_err());
        assert!((multi.structured_infonce(&heads.pitch, &store).unwrap() - l).abs() < 1e-6);
    }

    #[test]
    fn recon_losses_examples() {
        let uniform_m = Tensor::zeros(4, 130);
        let uniform_r = Tensor::zeros(4, 3);
        let (m, r) = recon_losses(&uniform_m, &uniform_r, &[0, 5, 128, 129], &[0, 1, 2, 0]).unwrap();
        assert!((m - 130f32.ln()).abs() < 1e-5);
        assert!((r - 3f32.ln()).abs() < 1e-6);
        assert!(recon_losses(&uniform_m, &uniform_r, &[0, 5], &[0, 1, 2, 0]).is_err());
    }
}
