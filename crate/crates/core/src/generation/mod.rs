//! Latent manipulations: factor swapping, rhythm interpolation by SLERP, and
//! theme variation by noise on `z_r`, with MIDI export.
//!
//! Every phrase is encoded and decoded on its own, so a piece never depends
//! on what else was generated alongside it.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::midi::melody_to_midi_bytes;
use crate::corpus::{derive_rhythm, ChordSeq, MelodyTokenSeq, PhraseSample};
use crate::error::{Error, Result};
use crate::model::{AnyModel, FlatModel, HierModel, LatentPair, Model};

/// Models that map a phrase to latent means and back to tokens.
pub trait PhraseModel {
    fn encode_phrase(&self, phrase: &PhraseSample) -> Result<LatentPair>;
    fn decode_phrase(&self, z: &LatentPair, chord: Option<&ChordSeq>) -> Result<MelodyTokenSeq>;
}

impl PhraseModel for FlatModel {
    fn encode_phrase(&self, phrase: &PhraseSample) -> Result<LatentPair> {
        Ok(self.encode_batch(&[phrase])?.remove(0).mean())
    }

    fn decode_phrase(&self, z: &LatentPair, chord: Option<&ChordSeq>) -> Result<MelodyTokenSeq> {
        let out = self.decode_greedy(&[z], &[chord])?;
        Ok(MelodyTokenSeq::from_decoded(out.melody.into_iter().next().unwrap_or_default()))
    }
}

impl PhraseModel for HierModel {
    fn encode_phrase(&self, phrase: &PhraseSample) -> Result<LatentPair> {
        Ok(self.encode_batch(&[phrase])?.remove(0).mean())
    }

    fn decode_phrase(&self, z: &LatentPair, chord: Option<&ChordSeq>) -> Result<MelodyTokenSeq> {
        Ok(self.decode_greedy(&[z], &[chord])?.remove(0))
    }
}

impl PhraseModel for AnyModel {
    fn encode_phrase(&self, phrase: &PhraseSample) -> Result<LatentPair> {
        match self {
            AnyModel::Flat(m) => m.encode_phrase(phrase),
            AnyModel::Hier(m) => m.encode_phrase(phrase),
        }
    }

    fn decode_phrase(&self, z: &LatentPair, chord: Option<&ChordSeq>) -> Result<MelodyTokenSeq> {
        match self {
            AnyModel::Flat(m) => m.decode_phrase(z, chord),
            AnyModel::Hier(m) => m.decode_phrase(z, chord),
        }
    }
}

/// Which phrase supplies the chord stream when factors are mixed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChordPolicy {
    /// The phrase whose `z_p` is used.
    #[default]
    Pitch,
    /// The phrase whose `z_r` is used.
    Rhythm,
}

impl ChordPolicy {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "pitch" => Ok(ChordPolicy::Pitch),
            "rhythm" => Ok(ChordPolicy::Rhythm),
            other => Err(Error::Config(format!("chord source must be \"pitch\" or \"rhythm\", got {other:?}"))),
        }
    }

    fn pick<'a>(self, pitch_from: &'a PhraseSample, rhythm_from: &'a PhraseSample) -> Option<&'a ChordSeq> {
        match self {
            ChordPolicy::Pitch => pitch_from.chord.as_ref(),
            ChordPolicy::Rhythm => rhythm_from.chord.as_ref(),
        }
    }
}

/// Greedy decode of the posterior mean.
pub fn reconstruct<M: PhraseModel + ?Sized>(model: &M, phrase: &PhraseSample) -> Result<MelodyTokenSeq> {
    let z = model.encode_phrase(phrase)?;
    model.decode_phrase(&z, phrase.chord.as_ref())
}

/// Pieces C = (z_p of A, z_r of B) and D = (z_p of B, z_r of A).
pub fn style_transfer<M: PhraseModel + ?Sized>(
    a: &PhraseSample,
    b: &PhraseSample,
    model: &M,
    chords: ChordPolicy,
) -> Result<(MelodyTokenSeq, MelodyTokenSeq)> {
    let za = model.encode_phrase(a)?;
    let zb = model.encode_phrase(b)?;
    let c = LatentPair::new(za.z_p.clone(), zb.z_r.clone())?;
    let d = LatentPair::new(zb.z_p, za.z_r)?;
    Ok((
        model.decode_phrase(&c, chords.pick(a, b))?,
        model.decode_phrase(&d, chords.pick(b, a))?,
    ))
}

/// Spherical interpolation between two nonzero vectors; linear when they are
/// colinear. The endpoints are returned exactly.
pub fn slerp(a: &[f32], b: &[f32], t: f64) -> Result<Vec<f32>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("slerp of lengths {} and {}", a.len(), b.len())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("slerp weight {t} outside [0, 1]")));
    }
    let norm = |v: &[f32]| v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("slerp of a zero vector".into()));
    }
    if t == 0.0 {
        return Ok(a.to_vec());
    }
    if t == 1.0 {
        return Ok(b.to_vec());
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let omega = (dot / (na * nb)).clamp(-1.0, 1.0).acos();
    let s = omega.sin();
    let (wa, wb) = if s.abs() < 1e-6 {
        (1.0 - t, t)
    } else {
        (((1.0 - t) * omega).sin() / s, (t * omega).sin() / s)
    };
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| (wa * x as f64 + wb * y as f64) as f32)
        .collect())
}

/// Decodes A's `z_p` with `slerp(z_r of A, z_r of B, t)` for every weight.
/// The chord stream is the same for every weight.
pub fn interpolate_rhythm<M: PhraseModel + ?Sized>(
    a: &PhraseSample,
    b: &PhraseSample,
    weights: &[f64],
    model: &M,
    chords: ChordPolicy,
) -> Result<Vec<MelodyTokenSeq>> {
    let za = model.encode_phrase(a)?;
    let zb = model.encode_phrase(b)?;
    let chord = chords.pick(a, b);
    weights
        .iter()
        .map(|&t| {
            let z = LatentPair::new(za.z_p.clone(), slerp(&za.z_r, &zb.z_r, t)?)?;
            model.decode_phrase(&z, chord)
        })
        .collect()
}

/// `n` decodes of `(z_p, z_r + ε)` with `ε ~ N(0, σ²I)` drawn from `seed`.
pub fn theme_variation<M: PhraseModel + ?Sized>(
    phrase: &PhraseSample,
    sigma: f64,
    n: usize,
    seed: u64,
    model: &M,
) -> Result<Vec<MelodyTokenSeq>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise scale {sigma} must be non-negative")));
    }
    let z = model.encode_phrase(phrase)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let z_r = if sigma == 0.0 {
                z.z_r.clone()
            } else {
                z.z_r
                    .iter()
                    .map(|&v| v + (sigma * rng.sample::<f64, _>(StandardNormal)) as f32)
                    .collect()
            };
            model.decode_phrase(&LatentPair::new(z.z_p.clone(), z_r)?, phrase.chord.as_ref())
        })
        .collect()
}

/// Writes `melody` as a standard MIDI file.
pub fn export_midi(melody: &MelodyTokenSeq, path: &Path, bpm: f64) -> Result<()> {
    let bytes = melody_to_midi_bytes(melody, bpm)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Fraction of steps whose rhythm tokens agree.
pub fn rhythm_agreement(a: &MelodyTokenSeq, b: &MelodyTokenSeq) -> f64 {
    let (ra, rb) = (derive_rhythm(a), derive_rhythm(b));
    let n = ra.len().min(rb.len());
    if n == 0 {
        return 0.0;
    }
    ra.tokens().iter().zip(rb.tokens()).filter(|(x, y)| x == y).count() as f64 / n as f64
}

/// Levenshtein distance between token sequences.
pub fn token_edit_distance(a: &[u8], b: &[u8]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operation {
    Swap,
    Interpolate,
    Variate,
}

/// One generation request over phrases already selected by the caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub operation: Operation,
    /// SLERP weights for `interpolate`.
    pub weights: Vec<f64>,
    /// Noise scale for `variate`.
    pub sigma: f64,
    pub samples: usize,
    pub seed: u64,
    pub chords: ChordPolicy,
}

impl GenRequest {
    pub fn validate(&self, phrases: usize) -> Result<()> {
        let need = match self.operation {
            Operation::Swap | Operation::Interpolate => 2,
            Operation::Variate => 1,
        };
        if phrases != need {
            return Err(Error::InvalidArgument(format!(
                "{:?} takes {need} phrase(s), got {phrases}",
                self.operation
            )));
        }
        if self.operation == Operation::Interpolate && self.weights.is_empty() {
            return Err(Error::InvalidArgument("interpolation needs at least one weight".into()));
        }
        if self.operation == Operation::Variate && !(self.sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("noise scale {} must be non-negative", self.sigma)));
        }
        Ok(())
    }
}

/// A generated piece with its file stem.
#[derive(Debug, Clone, PartialEq)]
pub struct Piece {
    pub name: String,
    pub melody: MelodyTokenSeq,
}

pub fn generate<M: PhraseModel + ?Sized>(model: &M, request: &GenRequest, phrases: &[PhraseSample]) -> Result<Vec<Piece>> {
    request.validate(phrases.len())?;
    let named = |prefix: &str, pieces: Vec<MelodyTokenSeq>| -> Vec<Piece> {
        pieces
            .into_iter()
            .enumerate()
            .map(|(i, melody)| Piece {
                name: format!("{prefix}_{i:02}"),
                melody,
            })
            .collect()
    };
    Ok(match request.operation {
        Operation::Swap => {
            let (c, d) = style_transfer(&phrases[0], &phrases[1], model, request.chords)?;
            vec![
                Piece {
                    name: "swap_c".into(),
                    melody: c,
                },
                Piece {
                    name: "swap_d".into(),
                    melody: d,
                },
            ]
        }
        Operation::Interpolate => named(
            "interp",
            interpolate_rhythm(&phrases[0], &phrases[1], &request.weights, model, request.chords)?,
        ),
        Operation::Variate => named(
            "variation",
            theme_variation(&phrases[0], request.sigma, request.samples, request.seed, model)?,
        ),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenManifest {
    pub request: GenRequest,
    pub checkpoint: PathBuf,
    pub sources: Vec<String>,
    pub bpm: f64,
    pub files: Vec<PathBuf>,
}

/// Exports every piece as `<name>.mid` in `dir` and writes `manifest.json`.
pub fn write_pieces(
    pieces: &[Piece],
    dir: &Path,
    bpm: f64,
    request: &GenRequest,
    checkpoint: &Path,
    sources: &[PhraseSample],
) -> Result<GenManifest> {
    let mut files = Vec::with_capacity(pieces.len());
    for p in pieces {
        let path = dir.join(format!("{}.mid", p.name));
        export_midi(&p.melody, &path, bpm)?;
        files.push(path);
    }
    let manifest = GenManifest {
        request: request.clone(),
        checkpoint: checkpoint.to_path_buf(),
        sources: sources
            .iter()
            .map(|s| format!("{}@{}", s.song_id, s.bar_offset))
            .collect(),
        bpm,
        files,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::midi::{melody_from_midi_bytes, midi_duration_seconds};
    use crate::corpus::{segment, synth};
    use crate::model::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            latent_dim: 4,
            hidden: 8,
            expander_hidden: 6,
            use_chords: true,
        }
    }

    fn phrases() -> Vec<PhraseSample> {
        synth::synth_corpus(&synth::SynthOptions {
            songs: 2,
            with_chords: true,
            ..Default::default()
        })
        .unwrap()
        .iter()
        .map(|s| segment(s, 8, 8).unwrap().remove(0))
        .collect()
    }

    #[test]
    fn slerp_closed_forms() {
        let a = [1.0f32, 0.0];
        let b = [0.0f32, 1.0];
        let mid = slerp(&a, &b, 0.5).unwrap();
        let r = std::f32::consts::FRAC_1_SQRT_2;
        assert!((mid[0] - r).abs() < 1e-7 && (mid[1] - r).abs() < 1e-7);
        assert_eq!(slerp(&a, &b, 0.0).unwrap(), a);
        assert_eq!(slerp(&a, &b, 1.0).unwrap(), b);
        let same = slerp(&[0.3, -2.0], &[0.3, -2.0], 0.37).unwrap();
        assert!((same[0] - 0.3).abs() < 1e-6 && (same[1] + 2.0).abs() < 1e-6);
        assert!(slerp(&[0.0, 0.0], &b, 0.5).is_err());
        assert!(slerp(&a, &b, 1.5).is_err());
    }

    #[test]
    fn identities_on_an_untrained_model() {
        let ps = phrases();
        let m = HierModel::new(tiny(), 3).unwrap();
        let recon = reconstruct(&m, &ps[0]).unwrap();
        assert_eq!(recon.len(), 128);
        let (c, d) = style_transfer(&ps[0], &ps[0], &m, ChordPolicy::Pitch).unwrap();
        assert_eq!((&c, &d), (&recon, &recon));
        let v = theme_variation(&ps[0], 0.0, 2, 9, &m).unwrap();
        assert!(v.iter().all(|p| *p == recon));
        let a = theme_variation(&ps[0], 1.0, 3, 9, &m).unwrap();
        assert_eq!(a, theme_variation(&ps[0], 1.0, 3, 9, &m).unwrap());
        let pieces = interpolate_rhythm(&ps[0], &ps[1], &[0.0, 0.25, 0.5, 0.75, 1.0], &m, ChordPolicy::Pitch).unwrap();
        assert_eq!(pieces.len(), 5);
        assert_eq!(pieces[0], recon);
        assert!(theme_variation(&ps[0], -1.0, 1, 0, &m).is_err());
    }

    #[test]
    fn midi_round_trip_and_duration() {
        let dir = tempfile::tempdir().unwrap();
        let ps = phrases();
        let path = dir.path().join("a.mid");
        export_midi(&ps[0].melody, &path, 120.0).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(melody_from_midi_bytes(&bytes).unwrap(), ps[0].melody);
        assert!((midi_duration_seconds(&bytes).unwrap() - 16.0).abs() < 1e-9);
        let rests = MelodyTokenSeq::rests(128);
        export_midi(&rests, &path, 120.0).unwrap();
        assert_eq!(melody_from_midi_bytes(&std::fs::read(&path).unwrap()).unwrap(), rests);
    }

    #[test]
    fn requests_are_validated_and_written() {
        let dir = tempfile::tempdir().unwrap();
        let ps = phrases();
        let m = AnyModel::Hier(HierModel::new(tiny(), 0).unwrap());
        let req = GenRequest {
            operation: Operation::Interpolate,
            weights: vec![0.0, 0.5, 1.0],
            sigma: 0.0,
            samples: 1,
            seed: 0,
            chords: ChordPolicy::Pitch,
        };
        assert!(generate(&m, &req, &ps[..1]).is_err());
        let pieces = generate(&m, &req, &ps).unwrap();
        let manifest = write_pieces(&pieces, dir.path(), 120.0, &req, Path::new("x.ckpt"), &ps).unwrap();
        assert_eq!(manifest.files.len(), 3);
        assert!(dir.path().join("manifest.json").exists());
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(token_edit_distance(b"kitten", b"sitting"), 3);
        assert_eq!(token_edit_distance(b"", b"abc"), 3);
        assert_eq!(token_edit_distance(b"abc", b"abc"), 0);
    }
}
