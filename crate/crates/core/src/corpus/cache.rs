//! Versioned on-disk dataset cache and directory ingestion.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "PHVDATA\0"
//! version u32      CACHE_VERSION
//! hlen    u64      length of the JSON header
//! header  hlen     CacheHeader as JSON
//! body             per song, in header order: `steps` melody tokens (u8),
//!                  then `steps` chroma masks (u16) when `has_chord`
//! ```
//!
//! `header.body_sha256` is the SHA-256 of the body and is checked on load.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::chords::ChordSeq;
use super::midi::parse_midi;
use super::{
    segment, split_corpus, tokenize_melody, CorpusSplit, MelodyTokenSeq, PhraseSample, Song,
    PHRASE_BARS, STEPS_PER_BAR, STEPS_PER_BEAT,
};
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 8] = b"PHVDATA\0";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongEntry {
    pub id: String,
    pub steps: usize,
    pub has_chord: bool,
    pub source: String,
}

/// Location of one phrase window inside the cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowEntry {
    pub song: usize,
    pub bar_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub format_version: u32,
    pub meter: String,
    pub steps_per_bar: usize,
    pub steps_per_beat: usize,
    pub phrase_bars: usize,
    pub phrase_hop_bars: usize,
    pub seed: u64,
    pub split: CorpusSplit,
    pub songs: Vec<SongEntry>,
    pub windows: Vec<WindowEntry>,
    pub body_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetCache {
    pub header: CacheHeader,
    pub songs: Vec<Song>,
}

impl DatasetCache {
    /// Splits `songs` by song id and indexes their phrase windows.
    pub fn build(
        songs: Vec<Song>,
        sources: Vec<String>,
        split_ratio: f64,
        phrase_hop_bars: usize,
        seed: u64,
    ) -> Result<Self> {
        let ids: Vec<&str> = songs.iter().map(|s| s.id.as_str()).collect();
        let split = split_corpus(&ids, split_ratio, seed)?;
        let mut windows = Vec::new();
        for (i, song) in songs.iter().enumerate() {
            for w in segment(song, PHRASE_BARS, phrase_hop_bars)? {
                windows.push(WindowEntry {
                    song: i,
                    bar_offset: w.bar_offset,
                });
            }
        }
        let entries = songs
            .iter()
            .zip(sources)
            .map(|(s, source)| SongEntry {
                id: s.id.clone(),
                steps: s.melody.len(),
                has_chord: s.chord.is_some(),
                source,
            })
            .collect();
        let mut cache = Self {
            header: CacheHeader {
                format_version: CACHE_VERSION,
                meter: "4/4".into(),
                steps_per_bar: STEPS_PER_BAR,
                steps_per_beat: STEPS_PER_BEAT,
                phrase_bars: PHRASE_BARS,
                phrase_hop_bars,
                seed,
                split,
                songs: entries,
                windows,
                body_sha256: String::new(),
            },
            songs,
        };
        cache.header.body_sha256 = hex::encode(Sha256::digest(cache.body()));
        Ok(cache)
    }

    fn body(&self) -> Vec<u8> {
        let mut body = Vec::new();
        for song in &self.songs {
            body.extend_from_slice(song.melody.tokens());
            if let Some(c) = &song.chord {
                for m in c.masks() {
                    body.extend_from_slice(&m.to_le_bytes());
                }
            }
        }
        body
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.body());
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    /// Reads only the header.
    pub fn read_header(path: &Path) -> Result<CacheHeader> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(split_header(path, &bytes)?.0)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Cache {
            path: path.to_path_buf(),
            reason,
        };
        let (header, body) = split_header(path, bytes)?;
        if hex::encode(Sha256::digest(body)) != header.body_sha256 {
            return Err(bad("body hash mismatch".into()));
        }
        let mut songs = Vec::with_capacity(header.songs.len());
        let mut at = 0usize;
        for entry in &header.songs {
            let need = entry.steps * if entry.has_chord { 3 } else { 1 };
            if body.len() < at + need {
                return Err(bad(format!("body truncated in song {}", entry.id)));
            }
            let melody = MelodyTokenSeq::new(body[at..at + entry.steps].to_vec())?;
            at += entry.steps;
            let chord = if entry.has_chord {
                let masks = body[at..at + 2 * entry.steps]
                    .chunks_exact(2)
                    .map(|b| u16::from_le_bytes([b[0], b[1]]))
                    .collect();
                at += 2 * entry.steps;
                Some(ChordSeq::new(masks)?)
            } else {
                None
            };
            songs.push(Song {
                id: entry.id.clone(),
                melody,
                chord,
            });
        }
        if at != body.len() {
            return Err(bad("trailing bytes after the last song".into()));
        }
        Ok(Self { header, songs })
    }

    /// Phrase windows of the train or test songs, in cache order.
    pub fn phrases(&self, train: bool) -> Result<Vec<PhraseSample>> {
        self.header
            .windows
            .iter()
            .filter(|w| self.header.split.is_train(&self.songs[w.song].id) == train)
            .map(|w| {
                let song = &self.songs[w.song];
                let start = w.bar_offset * STEPS_PER_BAR;
                let len = PHRASE_BARS * STEPS_PER_BAR;
                PhraseSample::new(
                    song.melody.window(start, len),
                    song.chord.as_ref().map(|c| c.window(start, len)),
                    song.id.clone(),
                    w.bar_offset,
                )
            })
            .collect()
    }

    pub fn songs_in(&self, train: bool) -> Vec<&Song> {
        self.songs
            .iter()
            .filter(|s| self.header.split.is_train(&s.id) == train)
            .collect()
    }
}

fn split_header<'a>(path: &Path, bytes: &'a [u8]) -> Result<(CacheHeader, &'a [u8])> {
    let bad = |reason: &str| Error::Cache {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 20 || &bytes[..8] != CACHE_MAGIC {
        return Err(bad("not a dataset cache (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(bad(&format!(
            "format version {version}, expected {CACHE_VERSION}"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() < 20 + hlen {
        return Err(bad("header truncated"));
    }
    let header: CacheHeader = serde_json::from_slice(&bytes[20..20 + hlen])?;
    if header.steps_per_bar != STEPS_PER_BAR || header.meter != "4/4" {
        return Err(bad("unsupported grid or meter"));
    }
    Ok((header, &bytes[20 + hlen..]))
}

/// Outcome of scanning a MIDI directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub kept: Vec<String>,
    pub dropped: Vec<DroppedFile>,
    pub truncated: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedFile {
    pub file: String,
    pub reason: String,
}

/// Tokenizes every `.mid`/`.midi` file under `midi_dir` (sorted by name).
/// A chord sidecar `<stem>.chords` or `<stem>.txt` in `chord_dir` is attached
/// when present; it is cut or padded with silence to the melody length.
/// Songs shorter than one phrase are dropped.
pub fn ingest_directory(
    midi_dir: &Path,
    chord_dir: Option<&Path>,
) -> Result<(Vec<Song>, Vec<String>, IngestReport)> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(midi_dir)
        .map_err(|e| Error::io(midi_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
        })
        .collect();
    files.sort();

    let mut report = IngestReport::default();
    let mut songs = Vec::new();
    let mut sources = Vec::new();
    for path in files {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let stem = path
            .file_stem()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let drop = |reason: String, report: &mut IngestReport| {
            report.dropped.push(DroppedFile {
                file: name.clone(),
                reason,
            })
        };
        let parsed = match parse_midi(&path) {
            Ok(mut p) => p.remove(0),
            Err(e) => {
                drop(e.to_string(), &mut report);
                continue;
            }
        };
        let len = parsed.length_steps.div_ceil(STEPS_PER_BAR) * STEPS_PER_BAR;
        if len < PHRASE_BARS * STEPS_PER_BAR {
            drop(format!("shorter than {PHRASE_BARS} bars"), &mut report);
            continue;
        }
        let tokenized = match tokenize_melody(&parsed.events, len) {
            Ok(t) => t,
            Err(e) => {
                drop(e.to_string(), &mut report);
                continue;
            }
        };
        if tokenized.truncated {
            report.truncated.push(name.clone());
        }
        let chord = match chord_dir.and_then(|d| find_sidecar(d, &stem)) {
            Some(p) => match ChordSeq::read(&p) {
                Ok(c) => {
                    let mut masks = c.masks().to_vec();
                    masks.resize(len, 0);
                    Some(ChordSeq::new(masks)?)
                }
                Err(e) => {
                    drop(e.to_string(), &mut report);
                    continue;
                }
            },
            None => None,
        };
        report.kept.push(name.clone());
        sources.push(name);
        songs.push(Song {
            id: stem,
            melody: tokenized.melody,
            chord,
        });
    }
    Ok((songs, sources, report))
}

fn find_sidecar(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["chords", "txt"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth::{synth_corpus, SynthOptions};

    fn cache() -> DatasetCache {
        let songs = synth_corpus(&SynthOptions {
            songs: 10,
            bars: 16,
            with_chords: true,
            seed: 4,
        })
        .unwrap();
        let sources = songs.iter().map(|s| format!("{}.mid", s.id)).collect();
        DatasetCache::build(songs, sources, 0.9, 8, 11).unwrap()
    }

    #[test]
    fn round_trip_and_determinism() {
        let c = cache();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(bytes, cache().to_bytes().unwrap());
        let back = DatasetCache::from_bytes(Path::new("mem"), &bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.header.split.train.len(), 9);
        assert_eq!(c.header.windows.len(), 20);
        assert_eq!(c.phrases(true).unwrap().len(), 18);
        assert_eq!(c.phrases(false).unwrap().len(), 2);
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = cache().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 1;
        assert!(matches!(
            DatasetCache::from_bytes(Path::new("mem"), &bytes),
            Err(Error::Cache { .. })
        ));
        bytes[0] = b'X';
        assert!(DatasetCache::from_bytes(Path::new("mem"), &bytes).is_err());
    }
}
