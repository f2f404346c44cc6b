//! Seeded generator of small folk-style melodies.
//!
//! Songs are built from one-bar rhythm cells and a diatonic random walk, with
//! two-bar motifs that recur inside each phrase, so they have the repetition
//! structure of real tunes while staying cheap to produce in tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{tokenize_melody, ChordSeq, NoteEvent, Song, PHRASE_BARS, STEPS_PER_BAR};
use crate::error::Result;

/// One-bar rhythm cells in 16th steps; negative entries are rests.
const CELLS: &[&[i32]] = &[
    &[4, 4, 4, 4],
    &[8, 8],
    &[2, 2, 2, 2, 4, 4],
    &[6, 2, 8],
    &[4, 2, 2, 8],
    &[16],
    &[4, 4, 8],
    &[2, 2, 4, 2, 2, 4],
    &[4, -4, 4, 4],
    &[12, -4],
    &[3, 1, 4, 4, 4],
    &[2, 2, 2, 2, 2, 2, 4],
];

const MAJOR: [i32; 7] = [0, 2, 4, 5, 7, 9, 11];
const MINOR: [i32; 7] = [0, 2, 3, 5, 7, 8, 10];

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub songs: usize,
    /// Bars per song; rounded up to a whole number of phrases.
    pub bars: usize,
    pub with_chords: bool,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            songs: 32,
            bars: PHRASE_BARS,
            with_chords: false,
            seed: 0,
        }
    }
}

pub fn synth_corpus(opts: &SynthOptions) -> Result<Vec<Song>> {
    let bars = opts.bars.div_ceil(PHRASE_BARS).max(1) * PHRASE_BARS;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    (0..opts.songs)
        .map(|i| synth_song(&mut rng, format!("synth-{i:04}"), bars, opts.with_chords))
        .collect()
}

fn synth_song(rng: &mut ChaCha8Rng, id: String, bars: usize, with_chords: bool) -> Result<Song> {
    let root: i32 = rng.random_range(55..=67);
    let scale = if rng.random_bool(0.7) { MAJOR } else { MINOR };
    let pitch_of = |degree: i32| -> u8 {
        let octave = degree.div_euclid(7);
        (root + 12 * octave + scale[degree.rem_euclid(7) as usize]) as u8
    };

    let mut events = Vec::new();
    let mut bar_degrees = Vec::with_capacity(bars);
    let mut degree: i32 = rng.random_range(0..5);
    for phrase in 0..bars / PHRASE_BARS {
        // a phrase is four two-bar motifs: A A' B A''
        let motif_a: [usize; 2] = [rng.random_range(0..CELLS.len()), rng.random_range(0..CELLS.len())];
        let motif_b: [usize; 2] = [rng.random_range(0..CELLS.len()), rng.random_range(0..CELLS.len())];
        let plan = [motif_a, motif_a, motif_b, motif_a];
        let mut motif_start_degree = degree;
        for (m, cells) in plan.iter().enumerate() {
            if m == 1 || m == 3 {
                degree = motif_start_degree + rng.random_range(-1..=1);
            } else {
                motif_start_degree = degree;
            }
            for (k, &cell) in cells.iter().enumerate() {
                let bar = phrase * PHRASE_BARS + m * 2 + k;
                let last_bar = bar + 1 == (phrase + 1) * PHRASE_BARS;
                let cell: &[i32] = if last_bar { &[12, -4] } else { CELLS[cell] };
                bar_degrees.push(degree);
                let mut step = bar * STEPS_PER_BAR;
                for (j, &dur) in cell.iter().enumerate() {
                    if dur < 0 {
                        step += (-dur) as usize;
                        continue;
                    }
                    if last_bar && j == 0 {
                        degree = 7 * degree.div_euclid(7);
                    } else {
                        let mv: i32 = match rng.random_range(0..10) {
                            0 => -2,
                            1..=3 => -1,
                            4 => 0,
                            5..=7 => 1,
                            _ => 2,
                        };
                        degree = (degree + mv).clamp(-3, 11);
                    }
                    events.push(NoteEvent::new(pitch_of(degree), step, dur as usize));
                    step += dur as usize;
                }
            }
        }
    }

    let len = bars * STEPS_PER_BAR;
    let melody = tokenize_melody(&events, len)?.melody;
    let chord = with_chords.then(|| {
        let masks = bar_degrees
            .iter()
            .flat_map(|&d| {
                // triad on the nearest of I, IV, V
                let chord_root = match d.rem_euclid(7) {
                    0 | 2 => 0,
                    3 | 5 => 3,
                    _ => 4,
                };
                let mask = [0, 2, 4].iter().fold(0u16, |m, &iv| {
                    m | 1 << (pitch_of(chord_root + iv) % 12)
                });
                std::iter::repeat_n(mask, STEPS_PER_BAR)
            })
            .collect();
        ChordSeq::new(masks).expect("triad masks fit in 12 bits")
    });
    Ok(Song { id, melody, chord })
}
