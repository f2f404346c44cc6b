//! Symbolic melody ingestion and the 16th-note token formats.
//!
//! A melody is a sequence of tokens, one per 16th-note step: `0..=127` start a
//! note at that MIDI pitch, [`HOLD`] sustains the previous note and [`REST`]
//! is silence. The rhythm view collapses this to onset / hold / rest.

pub mod cache;
pub mod chords;
pub mod midi;
pub mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use chords::ChordSeq;

/// Sustain token.
pub const HOLD: u8 = 128;
/// Silence token.
pub const REST: u8 = 129;
/// Size of the melody alphabet (128 pitches, hold, rest).
pub const MELODY_CLASSES: usize = 130;
/// Size of the rhythm alphabet.
pub const RHYTHM_CLASSES: usize = 3;
pub const RHYTHM_ONSET: u8 = 0;
pub const RHYTHM_HOLD: u8 = 1;
pub const RHYTHM_REST: u8 = 2;
/// 16th-note steps in one 4/4 bar.
pub const STEPS_PER_BAR: usize = 16;
/// Steps in one beat (a quarter note).
pub const STEPS_PER_BEAT: usize = 4;
/// Bars in a phrase.
pub const PHRASE_BARS: usize = 8;
pub const PHRASE_STEPS: usize = PHRASE_BARS * STEPS_PER_BAR;

/// One note on the 16th-note grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoteEvent {
    pub pitch: u8,
    pub onset: usize,
    pub duration: usize,
}

impl NoteEvent {
    pub fn new(pitch: u8, onset: usize, duration: usize) -> Self {
        Self {
            pitch,
            onset,
            duration,
        }
    }

    pub fn end(&self) -> usize {
        self.onset + self.duration
    }
}

/// Validated melody token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct MelodyTokenSeq(Vec<u8>);

impl MelodyTokenSeq {
    /// Checks the alphabet and the hold placement rules.
    pub fn new(tokens: Vec<u8>) -> Result<Self> {
        for (i, &tok) in tokens.iter().enumerate() {
            if tok > REST {
                return Err(Error::InvalidTokens(format!(
                    "token {tok} at step {i} is outside [0, 129]"
                )));
            }
            if tok == HOLD && (i == 0 || tokens[i - 1] == REST) {
                return Err(Error::InvalidTokens(format!(
                    "hold at step {i} does not continue a note"
                )));
            }
        }
        Ok(Self(tokens))
    }

    /// Builds a sequence from raw decoder output, turning holds that follow
    /// nothing (step 0 or a rest) into rests.
    pub fn from_decoded(mut tokens: Vec<u8>) -> Self {
        for i in 0..tokens.len() {
            if tokens[i] > REST {
                tokens[i] = REST;
            }
            if tokens[i] == HOLD && (i == 0 || tokens[i - 1] == REST) {
                tokens[i] = REST;
            }
        }
        Self(tokens)
    }

    pub fn rests(len: usize) -> Self {
        Self(vec![REST; len])
    }

    pub fn tokens(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_whole_bars(&self) -> bool {
        self.0.len() % STEPS_PER_BAR == 0
    }

    pub fn bars(&self) -> usize {
        self.0.len() / STEPS_PER_BAR
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.0
    }

    /// Sub-sequence `[start, start + len)`. A leading hold is re-struck as the
    /// pitch that is sounding at `start`.
    pub fn window(&self, start: usize, len: usize) -> Self {
        let mut out = self.0[start..start + len].to_vec();
        if out.first() == Some(&HOLD) {
            let sounding = self.0[..start]
                .iter()
                .rev()
                .find(|&&t| t != HOLD)
                .copied()
                .unwrap_or(REST);
            out[0] = sounding;
        }
        Self(out)
    }
}

impl TryFrom<Vec<u8>> for MelodyTokenSeq {
    type Error = Error;

    fn try_from(v: Vec<u8>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MelodyTokenSeq> for Vec<u8> {
    fn from(m: MelodyTokenSeq) -> Self {
        m.0
    }
}

/// Onset / hold / rest view of a melody.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RhythmTokenSeq(Vec<u8>);

impl RhythmTokenSeq {
    pub fn tokens(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Result of [`tokenize_melody`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenized {
    pub melody: MelodyTokenSeq,
    /// Set when an event ran past the end of the grid and was cut.
    pub truncated: bool,
}

/// Writes sorted, monophonic note events onto a grid of `len` steps.
pub fn tokenize_melody(events: &[NoteEvent], len: usize) -> Result<Tokenized> {
    let mut tokens = vec![REST; len];
    let mut truncated = false;
    let mut last_end = 0usize;
    for (i, ev) in events.iter().enumerate() {
        if ev.pitch > 127 {
            return Err(Error::InvalidTokens(format!(
                "event {i} has pitch {} outside [0, 127]",
                ev.pitch
            )));
        }
        if ev.duration == 0 {
            return Err(Error::InvalidTokens(format!("event {i} has zero duration")));
        }
        if i > 0 && ev.onset < last_end {
            return Err(Error::InvalidTokens(format!(
                "event {i} at step {} overlaps the previous note or is out of order",
                ev.onset
            )));
        }
        last_end = ev.end();
        if ev.onset >= len {
            truncated = true;
            continue;
        }
        let end = if ev.end() > len {
            truncated = true;
            len
        } else {
            ev.end()
        };
        tokens[ev.onset] = ev.pitch;
        for t in tokens.iter_mut().take(end).skip(ev.onset + 1) {
            *t = HOLD;
        }
    }
    Ok(Tokenized {
        melody: MelodyTokenSeq(tokens),
        truncated,
    })
}

/// Collapses melody tokens to rhythm tokens.
pub fn derive_rhythm(melody: &MelodyTokenSeq) -> RhythmTokenSeq {
    RhythmTokenSeq(
        melody
            .0
            .iter()
            .map(|&t| match t {
                HOLD => RHYTHM_HOLD,
                REST => RHYTHM_REST,
                _ => RHYTHM_ONSET,
            })
            .collect(),
    )
}

/// Inverse of [`tokenize_melody`] at 16th-note resolution.
pub fn detokenize(melody: &MelodyTokenSeq) -> Vec<NoteEvent> {
    let mut events: Vec<NoteEvent> = Vec::new();
    let mut open = false;
    for (step, &tok) in melody.0.iter().enumerate() {
        match tok {
            HOLD if open => {
                if let Some(last) = events.last_mut() {
                    last.duration += 1;
                }
            }
            HOLD | REST => open = false,
            pitch => {
                events.push(NoteEvent::new(pitch, step, 1));
                open = true;
            }
        }
    }
    events
}

/// Shifts every pitch token by `semitones` (in `[-12, 12]`).
pub fn transpose(melody: &MelodyTokenSeq, semitones: i32) -> Result<MelodyTokenSeq> {
    if !(-12..=12).contains(&semitones) {
        return Err(Error::InvalidArgument(format!(
            "transposition of {semitones} semitones is outside [-12, 12]"
        )));
    }
    let mut out = Vec::with_capacity(melody.len());
    for &tok in &melody.0 {
        if tok >= HOLD {
            out.push(tok);
            continue;
        }
        let shifted = tok as i32 + semitones;
        if !(0..=127).contains(&shifted) {
            return Err(Error::PitchOutOfRange {
                pitch: tok,
                semitones,
            });
        }
        out.push(shifted as u8);
    }
    Ok(MelodyTokenSeq(out))
}

/// Highest and lowest pitch in a melody, if it has any notes.
pub fn pitch_range(melody: &MelodyTokenSeq) -> Option<(u8, u8)> {
    let mut it = melody.0.iter().copied().filter(|&t| t < HOLD);
    let first = it.next()?;
    Some(it.fold((first, first), |(lo, hi), t| (lo.min(t), hi.max(t))))
}

/// A tokenized song.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Song {
    pub id: String,
    pub melody: MelodyTokenSeq,
    pub chord: Option<ChordSeq>,
}

/// A fixed-length window of a song: the melody, its rhythm, and chords.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseSample {
    pub melody: MelodyTokenSeq,
    pub rhythm: RhythmTokenSeq,
    pub chord: Option<ChordSeq>,
    pub song_id: String,
    pub bar_offset: usize,
}

impl PhraseSample {
    pub fn new(
        melody: MelodyTokenSeq,
        chord: Option<ChordSeq>,
        song_id: impl Into<String>,
        bar_offset: usize,
    ) -> Result<Self> {
        if !melody.is_whole_bars() || melody.is_empty() {
            return Err(Error::Shape(format!(
                "window of {} steps is not a whole number of bars",
                melody.len()
            )));
        }
        if let Some(c) = &chord {
            if c.len() != melody.len() {
                return Err(Error::Shape(format!(
                    "chord length {} differs from melody length {}",
                    c.len(),
                    melody.len()
                )));
            }
        }
        let rhythm = derive_rhythm(&melody);
        Ok(Self {
            melody,
            rhythm,
            chord,
            song_id: song_id.into(),
            bar_offset,
        })
    }

    pub fn bars(&self) -> usize {
        self.melody.bars()
    }

    /// The `bars`-long sub-window starting `bar_offset` bars into this one.
    pub fn sub_window(&self, bar_offset: usize, bars: usize) -> Result<PhraseSample> {
        if bar_offset + bars > self.bars() || bars == 0 {
            return Err(Error::Shape(format!(
                "sub-window of {bars} bars at offset {bar_offset} exceeds a {}-bar window",
                self.bars()
            )));
        }
        let start = bar_offset * STEPS_PER_BAR;
        let len = bars * STEPS_PER_BAR;
        PhraseSample::new(
            self.melody.window(start, len),
            self.chord.as_ref().map(|c| c.window(start, len)),
            self.song_id.clone(),
            self.bar_offset + bar_offset,
        )
    }
}

/// Sliding windows of `bars` bars every `hop_bars` bars. Songs shorter than
/// one window yield nothing.
pub fn segment(song: &Song, bars: usize, hop_bars: usize) -> Result<Vec<PhraseSample>> {
    if ![2, 4, 8].contains(&bars) {
        return Err(Error::InvalidArgument(format!(
            "window length must be 2, 4 or 8 bars, got {bars}"
        )));
    }
    if hop_bars == 0 {
        return Err(Error::InvalidArgument("hop must be at least one bar".into()));
    }
    let song_bars = song.melody.len() / STEPS_PER_BAR;
    if song_bars < bars {
        return Ok(Vec::new());
    }
    let len = bars * STEPS_PER_BAR;
    (0..=song_bars - bars)
        .step_by(hop_bars)
        .map(|offset| {
            let start = offset * STEPS_PER_BAR;
            PhraseSample::new(
                song.melody.window(start, len),
                song.chord.as_ref().map(|c| c.window(start, len)),
                song.id.clone(),
                offset,
            )
        })
        .collect()
}

/// Song-level train/test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl CorpusSplit {
    pub fn is_train(&self, id: &str) -> bool {
        self.train.iter().any(|s| s == id)
    }
}

/// Shuffles song ids under `seed` and keeps `floor(n * ratio)` for training,
/// clamped so that both sides are non-empty.
pub fn split_corpus<S: AsRef<str>>(songs: &[S], ratio: f64, seed: u64) -> Result<CorpusSplit> {
    if songs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 songs to split, got {}",
            songs.len()
        )));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("split ratio {ratio} outside [0, 1]")));
    }
    let mut ids: Vec<String> = songs.iter().map(|s| s.as_ref().to_string()).collect();
    ids.sort();
    ids.dedup();
    if ids.len() != songs.len() {
        return Err(Error::InvalidArgument("song ids must be unique".into()));
    }
    let n = ids.len();
    let n_train = ((n as f64 * ratio + 1e-9).floor() as usize).clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let test = ids.split_off(n_train);
    Ok(CorpusSplit { train: ids, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(v: &[u8]) -> MelodyTokenSeq {
        MelodyTokenSeq::new(v.to_vec()).unwrap()
    }

    #[test]
    fn tokenize_examples() {
        let t = tokenize_melody(&[NoteEvent::new(60, 0, 4)], 8).unwrap();
        assert_eq!(t.melody.tokens(), &[60, 128, 128, 128, 129, 129, 129, 129]);
        assert!(!t.truncated);
        assert_eq!(tokenize_melody(&[], 4).unwrap().melody.tokens(), &[129; 4]);
        let t = tokenize_melody(&[NoteEvent::new(72, 2, 2)], 4).unwrap();
        assert_eq!(t.melody.tokens(), &[129, 129, 72, 128]);
    }

    #[test]
    fn tokenize_truncates_with_flag() {
        let t = tokenize_melody(&[NoteEvent::new(60, 2, 5)], 4).unwrap();
        assert_eq!(t.melody.tokens(), &[129, 129, 60, 128]);
        assert!(t.truncated);
    }

    #[test]
    fn tokenize_rejects_overlap() {
        let evs = [NoteEvent::new(60, 0, 4), NoteEvent::new(62, 2, 2)];
        assert!(tokenize_melody(&evs, 8).is_err());
    }

    #[test]
    fn rhythm_examples() {
        assert_eq!(derive_rhythm(&seq(&[60, 128, 128, 129])).tokens(), &[0, 1, 1, 2]);
        assert_eq!(derive_rhythm(&seq(&[129; 5])).tokens(), &[2; 5]);
        assert_eq!(derive_rhythm(&seq(&[60, 62, 128, 129])).tokens(), &[0, 0, 1, 2]);
    }

    #[test]
    fn detokenize_examples() {
        assert_eq!(detokenize(&seq(&[60, 128, 128, 128])), vec![NoteEvent::new(60, 0, 4)]);
        assert!(detokenize(&seq(&[129, 129])).is_empty());
        assert_eq!(
            detokenize(&seq(&[60, 62])),
            vec![NoteEvent::new(60, 0, 1), NoteEvent::new(62, 1, 1)]
        );
    }

    #[test]
    fn invalid_holds_rejected() {
        assert!(MelodyTokenSeq::new(vec![128, 129]).is_err());
        assert!(MelodyTokenSeq::new(vec![60, 129, 128]).is_err());
        assert!(MelodyTokenSeq::new(vec![130]).is_err());
    }

    #[test]
    fn decoded_holds_are_repaired() {
        let m = MelodyTokenSeq::from_decoded(vec![128, 60, 128, 129, 128]);
        assert_eq!(m.tokens(), &[129, 60, 128, 129, 129]);
    }

    #[test]
    fn transpose_examples() {
        assert_eq!(transpose(&seq(&[60, 128, 129]), 2).unwrap().tokens(), &[62, 128, 129]);
        let m = seq(&[60, 128, 64, 129]);
        assert_eq!(transpose(&m, 0).unwrap(), m);
        assert!(matches!(
            transpose(&seq(&[127, 129]), 1),
            Err(Error::PitchOutOfRange { .. })
        ));
        assert!(transpose(&m, 13).is_err());
    }

    fn song(bars: usize) -> Song {
        let mut tokens = Vec::new();
        for b in 0..bars {
            tokens.push(60 + b as u8);
            tokens.extend(std::iter::repeat_n(HOLD, 15));
        }
        Song {
            id: "s".into(),
            melody: seq(&tokens),
            chord: None,
        }
    }

    #[test]
    fn segment_examples() {
        let w = segment(&song(8), 8, 8).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].bar_offset, 0);
        let offsets: Vec<_> = segment(&song(8), 4, 2).unwrap().iter().map(|w| w.bar_offset).collect();
        assert_eq!(offsets, vec![0, 2, 4]);
        assert!(segment(&song(3), 4, 1).unwrap().is_empty());
    }

    #[test]
    fn segment_windows_cover_bar_spans() {
        let s = song(8);
        for w in segment(&s, 4, 2).unwrap() {
            let start = w.bar_offset * STEPS_PER_BAR;
            assert_eq!(w.melody.tokens(), &s.melody.tokens()[start..start + 64]);
        }
    }

    #[test]
    fn window_restrikes_leading_hold() {
        let m = seq(&[60, 128, 128, 128]);
        assert_eq!(m.window(2, 2).tokens(), &[60, 128]);
    }

    #[test]
    fn split_examples() {
        let ids: Vec<String> = (0..10).map(|i| format!("song{i}")).collect();
        let s = split_corpus(&ids, 0.9, 3).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (9, 1));
        assert_eq!(s, split_corpus(&ids, 0.9, 3).unwrap());
        let big: Vec<String> = (0..2154).map(|i| format!("{i:05}")).collect();
        let s = split_corpus(&big, 0.9, 0).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (1938, 216));
        assert!(s.train.iter().all(|id| !s.test.contains(id)));
        assert!(split_corpus(&ids[..1], 0.9, 0).is_err());
    }
}
