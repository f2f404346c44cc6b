//! Recurrent VAE networks at 2-, 4- and 8-bar scales and the hierarchical
//! phrase decoder, with checkpoint I/O.
//!
//! Parameters live in one [`ParamStore`] per model, grouped as `encoder`,
//! `decoder`, `expander` and `heads` so whole groups can be frozen.

pub mod checkpoint;
pub mod flat;
pub mod hier;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{PhraseSample, MELODY_CLASSES, RHYTHM_CLASSES, STEPS_PER_BAR};
use crate::engine::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_header, save_checkpoint, AnyModel, CheckpointHeader, ModelKind};
pub use flat::{Decoded, Decoder, Encoder, FlatModel, PosteriorVars};
pub use hier::{Expander, HierModel, HierOutput, HierVars, LEAF_STEPS, LEAVES};

pub const GROUP_ENCODER: &str = "encoder";
pub const GROUP_DECODER: &str = "decoder";
pub const GROUP_EXPANDER: &str = "expander";
pub const GROUP_HEADS: &str = "heads";

/// Decoder start symbols, one past the last real token.
pub const MELODY_START: usize = MELODY_CLASSES;
pub const RHYTHM_START: usize = RHYTHM_CLASSES;

/// Network sizes shared by every scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Dimension of each factor, `z_p` and `z_r` alike.
    pub latent_dim: usize,
    /// GRU hidden size of encoders and decoders.
    pub hidden: usize,
    /// GRU hidden size of the hierarchical expanders.
    pub expander_hidden: usize,
    /// Feed per-step chord chroma to encoders and melody decoders.
    pub use_chords: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            hidden: 256,
            expander_hidden: 128,
            use_chords: false,
        }
    }
}

impl ModelConfig {
    /// Sizes used for the published results.
    pub fn paper() -> Self {
        Self {
            latent_dim: 128,
            hidden: 2048,
            expander_hidden: 1024,
            use_chords: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden == 0 || self.expander_hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scale {
    #[serde(rename = "2bar")]
    Bars2,
    #[serde(rename = "4bar")]
    Bars4,
    #[serde(rename = "8bar")]
    Bars8,
}

impl Scale {
    pub fn bars(self) -> usize {
        match self {
            Scale::Bars2 => 2,
            Scale::Bars4 => 4,
            Scale::Bars8 => 8,
        }
    }

    pub fn steps(self) -> usize {
        self.bars() * STEPS_PER_BAR
    }

    pub fn from_bars(bars: usize) -> Result<Self> {
        match bars {
            2 => Ok(Scale::Bars2),
            4 => Ok(Scale::Bars4),
            8 => Ok(Scale::Bars8),
            _ => Err(Error::InvalidArgument(format!("no model scale of {bars} bars"))),
        }
    }

    /// The next shorter scale, whose encoder supplies contrastive targets.
    pub fn shorter(self) -> Option<Scale> {
        match self {
            Scale::Bars2 => None,
            Scale::Bars4 => Some(Scale::Bars2),
            Scale::Bars8 => Some(Scale::Bars4),
        }
    }
}

impl std::fmt::Display for Scale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}bar", self.bars())
    }
}

/// Pitch and rhythm factors of one latent code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPair {
    pub z_p: Vec<f32>,
    pub z_r: Vec<f32>,
}

impl LatentPair {
    pub fn new(z_p: Vec<f32>, z_r: Vec<f32>) -> Result<Self> {
        if z_p.len() != z_r.len() || z_p.is_empty() {
            return Err(Error::Shape(format!(
                "factor dimensions differ: z_p {} vs z_r {}",
                z_p.len(),
                z_r.len()
            )));
        }
        if !z_p.iter().chain(&z_r).all(|v| v.is_finite()) {
            return Err(Error::Numerical("latent has non-finite entries".into()));
        }
        Ok(Self { z_p, z_r })
    }

    pub fn dim(&self) -> usize {
        self.z_p.len()
    }

    pub(crate) fn stack(pairs: &[&LatentPair]) -> Result<(Tensor, Tensor)> {
        let d = pairs.first().map(|p| p.dim()).unwrap_or(0);
        if pairs.iter().any(|p| p.dim() != d || p.z_r.len() != d) {
            return Err(Error::Shape("latent pairs of different dimension".into()));
        }
        let zp = pairs.iter().flat_map(|p| p.z_p.iter().copied()).collect();
        let zr = pairs.iter().flat_map(|p| p.z_r.iter().copied()).collect();
        Ok((Tensor::new(pairs.len(), d, zp), Tensor::new(pairs.len(), d, zr)))
    }

    pub(crate) fn unstack(zp: &Tensor, zr: &Tensor) -> Vec<LatentPair> {
        (0..zp.rows)
            .map(|r| LatentPair {
                z_p: zp.row(r).to_vec(),
                z_r: zr.row(r).to_vec(),
            })
            .collect()
    }
}

/// Diagonal Gaussian posterior over both factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mean_p: Vec<f32>,
    pub logvar_p: Vec<f32>,
    pub mean_r: Vec<f32>,
    pub logvar_r: Vec<f32>,
}

impl GaussianPosterior {
    pub fn dim(&self) -> usize {
        self.mean_p.len()
    }

    pub fn mean(&self) -> LatentPair {
        LatentPair {
            z_p: self.mean_p.clone(),
            z_r: self.mean_r.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Sample,
    Mean,
}

/// Posterior mean, or a reparameterized draw `mean + exp(logvar/2)·ε`.
pub fn sample_latent(post: &GaussianPosterior, mode: SampleMode, seed: u64) -> LatentPair {
    match mode {
        SampleMode::Mean => post.mean(),
        SampleMode::Sample => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = |mean: &[f32], logvar: &[f32]| -> Vec<f32> {
                mean.iter()
                    .zip(logvar)
                    .map(|(&m, &lv)| {
                        let e: f32 = StandardNormal.sample(&mut rng);
                        m + (0.5 * lv).exp() * e
                    })
                    .collect()
            };
            let z_p = draw(&post.mean_p, &post.logvar_p);
            let z_r = draw(&post.mean_r, &post.logvar_r);
            LatentPair { z_p, z_r }
        }
    }
}

/// Token sequences of a batch in time-major order: entry `t * batch + b` is
/// step `t` of item `b`.
#[derive(Debug, Clone)]
pub struct SeqBatch {
    pub steps: usize,
    pub batch: usize,
    pub melody: Vec<usize>,
    pub rhythm: Vec<usize>,
    /// `steps·batch × 12` chroma, present when the model uses chords.
    pub chroma: Option<Tensor>,
}

impl SeqBatch {
    pub fn new(samples: &[&PhraseSample], use_chords: bool) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let steps = first.melody.len();
        if let Some(bad) = samples.iter().find(|s| s.melody.len() != steps) {
            return Err(Error::Shape(format!(
                "batch mixes {steps}-step and {}-step sequences",
                bad.melody.len()
            )));
        }
        let batch = samples.len();
        let mut melody = vec![0; steps * batch];
        let mut rhythm = vec![0; steps * batch];
        for (b, s) in samples.iter().enumerate() {
            for t in 0..steps {
                melody[t * batch + b] = s.melody.tokens()[t] as usize;
                rhythm[t * batch + b] = s.rhythm.tokens()[t] as usize;
            }
        }
        let chroma = use_chords.then(|| {
            let mut data = vec![0f32; steps * batch * 12];
            for (b, s) in samples.iter().enumerate() {
                if let Some(c) = &s.chord {
                    for t in 0..steps {
                        let row = t * batch + b;
                        data[row * 12..(row + 1) * 12].copy_from_slice(&c.chroma(t));
                    }
                }
            }
            Tensor::new(steps * batch, 12, data)
        });
        Ok(Self {
            steps,
            batch,
            melody,
            rhythm,
            chroma,
        })
    }

    /// Previous-token inputs for teacher forcing.
    pub fn melody_prev(&self) -> Vec<usize> {
        shift_right(&self.melody, self.batch, MELODY_START)
    }

    pub fn rhythm_prev(&self) -> Vec<usize> {
        shift_right(&self.rhythm, self.batch, RHYTHM_START)
    }

    /// Cuts every sequence into `parts` equal segments and lays them out as a
    /// batch of `parts·batch` shorter sequences; segment `k` of item `b`
    /// becomes item `k * batch + b`. Tokens are copied verbatim, so a segment
    /// may start with a hold.
    pub fn split(&self, parts: usize) -> Result<SeqBatch> {
        if parts == 0 || self.steps % parts != 0 {
            return Err(Error::Shape(format!("cannot cut {} steps into {parts} parts", self.steps)));
        }
        let seg = self.steps / parts;
        let nb = parts * self.batch;
        let mut melody = vec![0; seg * nb];
        let mut rhythm = vec![0; seg * nb];
        let mut chroma = self.chroma.as_ref().map(|_| vec![0f32; seg * nb * 12]);
        for k in 0..parts {
            for b in 0..self.batch {
                for t in 0..seg {
                    let src = (k * seg + t) * self.batch + b;
                    let dst = t * nb + k * self.batch + b;
                    melody[dst] = self.melody[src];
                    rhythm[dst] = self.rhythm[src];
                    if let (Some(c), Some(src_c)) = (chroma.as_mut(), self.chroma.as_ref()) {
                        c[dst * 12..(dst + 1) * 12].copy_from_slice(src_c.row(src));
                    }
                }
            }
        }
        Ok(SeqBatch {
            steps: seg,
            batch: nb,
            melody,
            rhythm,
            chroma: chroma.map(|c| Tensor::new(seg * nb, 12, c)),
        })
    }

    /// Per-item token sequences from time-major flat tokens.
    pub fn unflatten(tokens: &[usize], steps: usize, batch: usize) -> Vec<Vec<u8>> {
        (0..batch)
            .map(|b| (0..steps).map(|t| tokens[t * batch + b] as u8).collect())
            .collect()
    }
}

fn shift_right(tokens: &[usize], batch: usize, start: usize) -> Vec<usize> {
    let mut prev = vec![start; tokens.len()];
    prev[batch..].copy_from_slice(&tokens[..tokens.len() - batch]);
    prev
}

pub(crate) fn new_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Shared accessors of flat and hierarchical models.
pub trait Model {
    fn config(&self) -> &ModelConfig;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn kind(&self) -> ModelKind;
    fn encoder(&self) -> &Encoder;

    fn freeze<S: AsRef<str>>(&mut self, groups: &[S]) -> Result<()> {
        self.store_mut().freeze(groups)
    }

    fn unfreeze<S: AsRef<str>>(&mut self, groups: &[S]) -> Result<()> {
        self.store_mut().unfreeze(groups)
    }

    /// Posterior of one melody; the length must match the encoder's scale.
    fn encode(
        &self,
        melody: &crate::corpus::MelodyTokenSeq,
        chord: Option<&crate::corpus::ChordSeq>,
    ) -> Result<GaussianPosterior> {
        let sample = PhraseSample::new(melody.clone(), chord.cloned(), "", 0)?;
        Ok(self.encode_batch(&[&sample])?.remove(0))
    }

    /// Posteriors of a batch of equally long windows.
    fn encode_batch(&self, samples: &[&PhraseSample]) -> Result<Vec<GaussianPosterior>> {
        let enc = self.encoder();
        let batch = SeqBatch::new(samples, self.config().use_chords)?;
        enc.check_steps(batch.steps)?;
        let mut tape = crate::engine::Tape::new(self.store());
        let post = enc.forward(&mut tape, &batch);
        Ok(post.read(&tape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapsed_variance_sample_is_the_mean() {
        let post = GaussianPosterior {
            mean_p: vec![0.3, -1.2],
            logvar_p: vec![-30.0; 2],
            mean_r: vec![2.0, 0.5],
            logvar_r: vec![-30.0; 2],
        };
        let s = sample_latent(&post, SampleMode::Sample, 7);
        for (a, b) in s.z_p.iter().chain(&s.z_r).zip(post.mean_p.iter().chain(&post.mean_r)) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(sample_latent(&post, SampleMode::Mean, 7), post.mean());
        let wide = GaussianPosterior {
            logvar_p: vec![0.0; 2],
            logvar_r: vec![0.0; 2],
            ..post
        };
        assert_eq!(
            sample_latent(&wide, SampleMode::Sample, 3),
            sample_latent(&wide, SampleMode::Sample, 3)
        );
        assert_ne!(
            sample_latent(&wide, SampleMode::Sample, 3),
            sample_latent(&wide, SampleMode::Sample, 4)
        );
    }

    #[test]
    fn split_lays_segments_out_by_segment_then_item() {
        let batch = SeqBatch {
            steps: 4,
            batch: 2,
            // item 0: 10 11 12 13, item 1: 20 21 22 23
            melody: vec![10, 20, 11, 21, 12, 22, 13, 23],
            rhythm: vec![0; 8],
            chroma: None,
        };
        let s = batch.split(2).unwrap();
        assert_eq!((s.steps, s.batch), (2, 4));
        let items = SeqBatch::unflatten(&s.melody, s.steps, s.batch);
        assert_eq!(items, vec![vec![10, 11], vec![20, 21], vec![12, 13], vec![22, 23]]);
        assert_eq!(s.melody_prev()[..4], [MELODY_START; 4]);
        assert!(batch.split(3).is_err());
    }
}
