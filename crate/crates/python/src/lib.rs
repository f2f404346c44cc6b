//! Python bindings: tokenization, contrastive losses, checkpoints, and
//! latent-space generation.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use phrasevae_core::contrastive::losses;
use phrasevae_core::corpus::cache::DatasetCache;
use phrasevae_core::corpus::midi::melody_to_midi_bytes;
use phrasevae_core::corpus::synth::{synth_corpus, SynthOptions};
use phrasevae_core::corpus::{self as corpus, MelodyTokenSeq, NoteEvent, PhraseSample};
use phrasevae_core::generation::{self as gen, PhraseModel};
use phrasevae_core::model::{load_checkpoint, AnyModel, LatentPair};
use phrasevae_core::training::{run_pipeline, Ablation, Config, Dataset, Phase, PipelineOptions};

create_exception!(phrasevae, PhraseVaeError, PyException);

fn err(e: phrasevae_core::Error) -> PyErr {
    match e {
        phrasevae_core::Error::InvalidArgument(_) | phrasevae_core::Error::Config(_) | phrasevae_core::Error::Shape(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PhraseVaeError::new_err(other.to_string()),
    }
}

fn melody(tokens: Vec<u8>) -> PyResult<MelodyTokenSeq> {
    MelodyTokenSeq::new(tokens).map_err(err)
}

/// Token lists go back to Python as `list[int]` rather than `bytes`.
fn list(tokens: MelodyTokenSeq) -> Vec<u16> {
    tokens.into_inner().into_iter().map(u16::from).collect()
}

fn phrase(tokens: Vec<u8>) -> PyResult<PhraseSample> {
    PhraseSample::new(melody(tokens)?, None, "python", 0).map_err(err)
}

/// Note events `(pitch, onset, duration)` in sixteenth-note steps to a
/// melody token list of `length` steps.
#[pyfunction]
fn tokenize(notes: Vec<(u8, usize, usize)>, length: usize) -> PyResult<Vec<u16>> {
    let events: Vec<NoteEvent> = notes.into_iter().map(|(p, o, d)| NoteEvent::new(p, o, d)).collect();
    Ok(list(corpus::tokenize_melody(&events, length).map_err(err)?.melody))
}

#[pyfunction]
fn detokenize(tokens: Vec<u8>) -> PyResult<Vec<(u8, usize, usize)>> {
    Ok(corpus::detokenize(&melody(tokens)?)
        .into_iter()
        .map(|n| (n.pitch, n.onset, n.duration))
        .collect())
}

/// Rhythm tokens: 0 onset, 1 hold, 2 rest.
#[pyfunction]
fn rhythm(tokens: Vec<u8>) -> PyResult<Vec<u16>> {
    Ok(corpus::derive_rhythm(&melody(tokens)?).tokens().iter().map(|&t| u16::from(t)).collect())
}

#[pyfunction]
fn transpose(tokens: Vec<u8>, semitones: i32) -> PyResult<Vec<u16>> {
    Ok(list(corpus::transpose(&melody(tokens)?, semitones).map_err(err)?))
}

#[pyfunction]
#[pyo3(signature = (songs, bars = 8, seed = 0))]
fn synthetic_melodies(songs: usize, bars: usize, seed: u64) -> PyResult<Vec<Vec<u16>>> {
    let songs = synth_corpus(&SynthOptions {
        songs,
        bars,
        with_chords: false,
        seed,
    })
    .map_err(err)?;
    Ok(songs.into_iter().map(|s| list(s.melody)).collect())
}

/// InfoNCE loss of one anchor against a positive and negatives, with a
/// row-major `d × d` similarity matrix.
#[pyfunction]
#[pyo3(signature = (anchor, w, positive, negatives, tau = 1.0))]
fn infonce(anchor: Vec<f64>, w: Vec<f64>, positive: Vec<f64>, negatives: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let negs: Vec<&[f64]> = negatives.iter().map(Vec::as_slice).collect();
    Ok(losses::infonce(&anchor, &w, &positive, &negs, tau).map_err(err)?.0)
}

#[pyfunction]
#[pyo3(signature = (anchor, w, positives, negatives, tau = 1.0))]
fn structured_infonce(
    anchor: Vec<f64>,
    w: Vec<f64>,
    positives: Vec<Vec<f64>>,
    negatives: Vec<Vec<f64>>,
    tau: f64,
) -> PyResult<f64> {
    let pos: Vec<&[f64]> = positives.iter().map(Vec::as_slice).collect();
    let negs: Vec<&[f64]> = negatives.iter().map(Vec::as_slice).collect();
    Ok(losses::structured_infonce(&anchor, &w, &pos, &negs, tau).map_err(err)?.0)
}

#[pyfunction]
fn slerp(a: Vec<f32>, b: Vec<f32>, t: f64) -> PyResult<Vec<f32>> {
    gen::slerp(&a, &b, t).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (tokens, path, bpm = 120.0))]
fn write_midi(tokens: Vec<u8>, path: PathBuf, bpm: f64) -> PyResult<()> {
    let bytes = melody_to_midi_bytes(&melody(tokens)?, bpm).map_err(err)?;
    std::fs::write(&path, bytes).map_err(|e| PhraseVaeError::new_err(format!("{}: {e}", path.display())))
}

/// Trains the pipeline (or selected phases) on a dataset cache, or on a
/// synthetic corpus of `synthetic` songs when no cache is given. Returns the
/// checkpoint path of each phase.
#[pyfunction]
#[pyo3(signature = (out_dir, cache = None, synthetic = None, config = None, overrides = vec![], phases = None, no_contrastive = false, no_fixed = false))]
#[allow(clippy::too_many_arguments)]
fn train(
    out_dir: PathBuf,
    cache: Option<PathBuf>,
    synthetic: Option<usize>,
    config: Option<PathBuf>,
    overrides: Vec<String>,
    phases: Option<Vec<String>>,
    no_contrastive: bool,
    no_fixed: bool,
) -> PyResult<Vec<(String, String)>> {
    let config = Config::load(config.as_deref(), &overrides).map_err(err)?;
    let data = match (cache, synthetic) {
        (Some(path), _) => Dataset::from_cache(&DatasetCache::read(&path).map_err(err)?),
        (None, Some(n)) => Dataset::synthetic(
            &SynthOptions {
                songs: n,
                seed: config.seed,
                ..Default::default()
            },
            config.data.split_ratio,
        )
        .map_err(err)?,
        (None, None) => return Err(PyValueError::new_err("either cache or synthetic is required")),
    };
    let phases = phases
        .map(|ps| ps.iter().map(|p| Phase::from_name(p)).collect::<phrasevae_core::Result<Vec<_>>>())
        .transpose()
        .map_err(err)?;
    let result = run_pipeline(
        &config,
        &data,
        &PipelineOptions {
            out_dir,
            ablation: Ablation {
                no_contrastive,
                no_fixed,
            },
            phases,
            resume: true,
            ..Default::default()
        },
    )
    .map_err(err)?;
    Ok(result
        .checkpoints
        .into_iter()
        .map(|(p, path)| (p.to_string(), path.display().to_string()))
        .collect())
}

/// A trained flat or hierarchical model loaded from a checkpoint.
#[pyclass(name = "Model", unsendable)]
struct PyModel {
    inner: AnyModel,
    path: PathBuf,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (_, inner) = load_checkpoint(&path).map_err(err)?;
        Ok(Self { inner, path })
    }

    #[getter]
    fn kind(&self) -> String {
        format!("{:?}", self.inner.kind())
    }

    #[getter]
    fn steps(&self) -> usize {
        match &self.inner {
            AnyModel::Flat(m) => m.steps(),
            AnyModel::Hier(_) => phrasevae_core::model::Scale::Bars8.steps(),
        }
    }

    /// Posterior means `(z_p, z_r)` of a melody.
    fn encode(&self, tokens: Vec<u8>) -> PyResult<(Vec<f32>, Vec<f32>)> {
        let z = self.inner.encode_phrase(&phrase(tokens)?).map_err(err)?;
        Ok((z.z_p, z.z_r))
    }

    fn decode(&self, z_p: Vec<f32>, z_r: Vec<f32>) -> PyResult<Vec<u16>> {
        let z = LatentPair::new(z_p, z_r).map_err(err)?;
        Ok(list(self.inner.decode_phrase(&z, None).map_err(err)?))
    }

    fn reconstruct(&self, tokens: Vec<u8>) -> PyResult<Vec<u16>> {
        Ok(list(gen::reconstruct(&self.inner, &phrase(tokens)?).map_err(err)?))
    }

    /// Pitch of `a` with rhythm of `b`, and the reverse.
    fn swap(&self, a: Vec<u8>, b: Vec<u8>) -> PyResult<(Vec<u16>, Vec<u16>)> {
        let (c, d) = gen::style_transfer(&phrase(a)?, &phrase(b)?, &self.inner, gen::ChordPolicy::default())
            .map_err(err)?;
        Ok((list(c), list(d)))
    }

    fn interpolate_rhythm(&self, a: Vec<u8>, b: Vec<u8>, weights: Vec<f64>) -> PyResult<Vec<Vec<u16>>> {
        let out = gen::interpolate_rhythm(&phrase(a)?, &phrase(b)?, &weights, &self.inner, gen::ChordPolicy::default())
            .map_err(err)?;
        Ok(out.into_iter().map(list).collect())
    }

    #[pyo3(signature = (tokens, sigma, n, seed = 0))]
    fn variations(&self, tokens: Vec<u8>, sigma: f64, n: usize, seed: u64) -> PyResult<Vec<Vec<u16>>> {
        let out = gen::theme_variation(&phrase(tokens)?, sigma, n, seed, &self.inner).map_err(err)?;
        Ok(out.into_iter().map(list).collect())
    }

    fn __repr__(&self) -> String {
        format!("Model(kind={}, path={:?})", self.kind(), self.path.display().to_string())
    }
}

#[pymodule]
fn phrasevae(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PhraseVaeError", m.py().get_type::<PhraseVaeError>())?;
    m.add("HOLD", corpus::HOLD)?;
    m.add("REST", corpus::REST)?;
    m.add("STEPS_PER_BAR", phrasevae_core::model::Scale::Bars2.steps() / 2)?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(detokenize, m)?)?;
    m.add_function(wrap_pyfunction!(rhythm, m)?)?;
    m.add_function(wrap_pyfunction!(transpose, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_melodies, m)?)?;
    m.add_function(wrap_pyfunction!(infonce, m)?)?;
    m.add_function(wrap_pyfunction!(structured_infonce, m)?)?;
    m.add_function(wrap_pyfunction!(slerp, m)?)?;
    m.add_function(wrap_pyfunction!(write_midi, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
