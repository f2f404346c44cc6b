//! Standard MIDI file ingestion and export on the 16th-note grid.

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use midly::num::{u15, u24, u28, u4, u7};
use midly::{Format, Header, MetaMessage, MidiMessage, Smf, Timing, TrackEvent, TrackEventKind};

use super::{ChordSeq, MelodyTokenSeq, NoteEvent, STEPS_PER_BAR, STEPS_PER_BEAT};
use crate::error::{Error, Result};

/// Ticks per quarter note used when writing files.
pub const EXPORT_TICKS_PER_BEAT: u16 = 480;
const DRUM_CHANNEL: u8 = 9;

/// Melody extracted from one MIDI file.
#[derive(Debug, Clone, PartialEq)]
pub struct MidiMelody {
    pub events: Vec<NoteEvent>,
    pub chord: Option<ChordSeq>,
    /// Length of the file on the 16th-note grid (end of the last event).
    pub length_steps: usize,
    /// Tempo of the first tempo event, in beats per minute.
    pub bpm: f64,
}

/// Reads a MIDI file. A track named `MELODY` is used on its own when present;
/// otherwise all non-drum tracks are merged and the highest sounding note wins.
pub fn parse_midi(path: &Path) -> Result<Vec<MidiMelody>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_midi_bytes(&bytes).map_err(|e| match e {
        Error::Ingest { reason, .. } => Error::Ingest {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}

pub fn parse_midi_bytes(bytes: &[u8]) -> Result<Vec<MidiMelody>> {
    let melody = extract(bytes)?;
    if melody.events.is_empty() {
        return Err(Error::EmptyMelody);
    }
    Ok(vec![melody])
}

/// Reads a file written by [`melody_to_midi_bytes`] back into tokens. The
/// length is the file length rounded up to whole bars; silent files are
/// accepted.
pub fn melody_from_midi_bytes(bytes: &[u8]) -> Result<MelodyTokenSeq> {
    let melody = extract(bytes)?;
    let len = melody.length_steps.div_ceil(STEPS_PER_BAR) * STEPS_PER_BAR;
    Ok(super::tokenize_melody(&melody.events, len)?.melody)
}

fn extract(bytes: &[u8]) -> Result<MidiMelody> {
    let ingest = |reason: String| Error::Ingest {
        path: Default::default(),
        reason,
    };
    let smf = Smf::parse(bytes).map_err(|e| ingest(format!("not a standard MIDI file: {e}")))?;
    let tpb = match smf.header.timing {
        Timing::Metrical(t) => t.as_int() as u64,
        Timing::Timecode(..) => return Err(ingest("SMPTE timecode timing is not supported".into())),
    };
    if tpb == 0 {
        return Err(ingest("zero ticks per beat".into()));
    }

    let melody_track = smf.tracks.iter().position(|track| {
        track.iter().any(|ev| {
            matches!(ev.kind, TrackEventKind::Meta(MetaMessage::TrackName(name))
                if String::from_utf8_lossy(name).trim().eq_ignore_ascii_case("melody"))
        })
    });

    let mut notes: Vec<(u64, u64, u8)> = Vec::new();
    let mut last_tick = 0u64;
    let mut bpm = None;
    for (ti, track) in smf.tracks.iter().enumerate() {
        let use_notes = melody_track.is_none_or(|m| m == ti);
        let mut tick = 0u64;
        let mut open: HashMap<(u8, u8), VecDeque<u64>> = HashMap::new();
        for ev in track {
            tick += ev.delta.as_int() as u64;
            last_tick = last_tick.max(tick);
            match ev.kind {
                TrackEventKind::Meta(MetaMessage::TimeSignature(num, denom_pow, _, _)) => {
                    let denominator = 1u8.checked_shl(denom_pow as u32).unwrap_or(0);
                    if num != 4 || denominator != 4 {
                        return Err(Error::UnsupportedMeter {
                            numerator: num,
                            denominator,
                        });
                    }
                }
                TrackEventKind::Meta(MetaMessage::Tempo(us)) if bpm.is_none() => {
                    bpm = Some(60_000_000.0 / us.as_int() as f64);
                }
                TrackEventKind::Midi { channel, message } if use_notes => {
                    let ch = channel.as_int();
                    if ch == DRUM_CHANNEL {
                        continue;
                    }
                    match message {
                        MidiMessage::NoteOn { key, vel } if vel.as_int() > 0 => {
                            open.entry((ch, key.as_int())).or_default().push_back(tick);
                        }
                        MidiMessage::NoteOn { key, .. } | MidiMessage::NoteOff { key, .. } => {
                            if let Some(start) =
                                open.get_mut(&(ch, key.as_int())).and_then(|q| q.pop_front())
                            {
                                notes.push((start, tick, key.as_int()));
                            }
                        }
                        _ => {}
                    }
                }
                _ => {}
            }
        }
        // notes never released end with their track
        for ((_, key), starts) in open {
            for start in starts {
                notes.push((start, tick, key));
            }
        }
    }

    let quantize = |tick: u64| ((tick * STEPS_PER_BEAT as u64 * 2 + tpb) / (2 * tpb)) as usize;
    let spans: Vec<(usize, usize, u8)> = notes
        .iter()
        .map(|&(on, off, key)| {
            let s = quantize(on);
            (s, quantize(off).max(s + 1), key)
        })
        .collect();
    let events = skyline(&spans);
    let length_steps = quantize(last_tick).max(events.last().map_or(0, |e| e.end()));
    Ok(MidiMelody {
        events,
        chord: None,
        length_steps,
        bpm: bpm.unwrap_or(120.0),
    })
}

/// Reduces possibly overlapping `(onset, end, pitch)` spans to a monophonic
/// line by keeping the highest pitch sounding at each step.
fn skyline(spans: &[(usize, usize, u8)]) -> Vec<NoteEvent> {
    let total = spans.iter().map(|s| s.1).max().unwrap_or(0);
    let mut winner: Vec<Option<usize>> = vec![None; total];
    for (i, &(on, off, pitch)) in spans.iter().enumerate() {
        for w in &mut winner[on..off] {
            match *w {
                Some(j) if spans[j].2 >= pitch => {}
                _ => *w = Some(i),
            }
        }
    }
    let mut events: Vec<NoteEvent> = Vec::new();
    let mut prev: Option<usize> = None;
    for (step, w) in winner.iter().enumerate() {
        match *w {
            Some(i) if prev == Some(i) => {
                if let Some(last) = events.last_mut() {
                    last.duration += 1;
                }
            }
            Some(i) => events.push(NoteEvent::new(spans[i].2, step, 1)),
            None => {}
        }
        prev = *w;
    }
    events
}

/// Encodes a melody as a format-0 MIDI file at `bpm`. The end-of-track marker
/// sits at the end of the last step so the file spans the whole grid.
pub fn melody_to_midi_bytes(melody: &MelodyTokenSeq, bpm: f64) -> Result<Vec<u8>> {
    if !(bpm.is_finite() && bpm > 0.0) {
        return Err(Error::InvalidArgument(format!("tempo {bpm} bpm is not positive")));
    }
    let ticks_per_step = EXPORT_TICKS_PER_BEAT as u32 / STEPS_PER_BEAT as u32;
    let us_per_beat = (60_000_000.0 / bpm).round() as u32;

    // (tick, is_note_on, pitch); note-offs sort before note-ons at the same tick
    let mut timeline: Vec<(u32, bool, u8)> = Vec::new();
    for ev in super::detokenize(melody) {
        timeline.push((ev.onset as u32 * ticks_per_step, true, ev.pitch));
        timeline.push((ev.end() as u32 * ticks_per_step, false, ev.pitch));
    }
    timeline.sort_by_key(|&(tick, on, _)| (tick, on));

    let mut track: Vec<TrackEvent<'static>> = vec![
        TrackEvent {
            delta: u28::new(0),
            kind: TrackEventKind::Meta(MetaMessage::Tempo(u24::new(us_per_beat))),
        },
        TrackEvent {
            delta: u28::new(0),
            kind: TrackEventKind::Meta(MetaMessage::TimeSignature(4, 2, 24, 8)),
        },
    ];
    let mut now = 0u32;
    for (tick, on, pitch) in timeline {
        let message = if on {
            MidiMessage::NoteOn {
                key: u7::new(pitch),
                vel: u7::new(80),
            }
        } else {
            MidiMessage::NoteOff {
                key: u7::new(pitch),
                vel: u7::new(0),
            }
        };
        track.push(TrackEvent {
            delta: u28::new(tick - now),
            kind: TrackEventKind::Midi {
                channel: u4::new(0),
                message,
            },
        });
        now = tick;
    }
    let end = melody.len() as u32 * ticks_per_step;
    track.push(TrackEvent {
        delta: u28::new(end.saturating_sub(now)),
        kind: TrackEventKind::Meta(MetaMessage::EndOfTrack),
    });

    let smf = Smf {
        header: Header::new(
            Format::SingleTrack,
            Timing::Metrical(u15::new(EXPORT_TICKS_PER_BEAT)),
        ),
        tracks: vec![track],
    };
    let mut out = Vec::new();
    smf.write_std(&mut out)
        .map_err(|e| Error::InvalidArgument(format!("cannot encode MIDI: {e}")))?;
    Ok(out)
}

/// Playing time of a MIDI file in seconds, following tempo changes.
pub fn midi_duration_seconds(bytes: &[u8]) -> Result<f64> {
    let smf = Smf::parse(bytes).map_err(|e| Error::Ingest {
        path: Default::default(),
        reason: e.to_string(),
    })?;
    let tpb = match smf.header.timing {
        Timing::Metrical(t) => t.as_int() as f64,
        Timing::Timecode(..) => {
            return Err(Error::Ingest {
                path: Default::default(),
                reason: "timecode timing".into(),
            })
        }
    };
    // merge tempo changes and track ends from all tracks
    let mut tempos: Vec<(u64, f64)> = Vec::new();
    let mut end = 0u64;
    for track in &smf.tracks {
        let mut tick = 0u64;
        for ev in track {
            tick += ev.delta.as_int() as u64;
            if let TrackEventKind::Meta(MetaMessage::Tempo(us)) = ev.kind {
                tempos.push((tick, us.as_int() as f64));
            }
        }
        end = end.max(tick);
    }
    tempos.sort_by_key(|t| t.0);
    let mut seconds = 0.0;
    let mut at = 0u64;
    let mut us_per_beat = 500_000.0;
    for (tick, us) in tempos {
        if tick >= end {
            break;
        }
        seconds += (tick - at) as f64 / tpb * us_per_beat / 1e6;
        at = tick;
        us_per_beat = us;
    }
    seconds += (end - at) as f64 / tpb * us_per_beat / 1e6;
    Ok(seconds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize_melody;

    fn file(tpb: u16, notes: &[(u32, u32, u8)], time_sig: Option<(u8, u8)>) -> Vec<u8> {
        let mut events: Vec<(u32, TrackEventKind<'static>)> = Vec::new();
        if let Some((n, d)) = time_sig {
            events.push((0, TrackEventKind::Meta(MetaMessage::TimeSignature(n, d, 24, 8))));
        }
        for &(on, off, key) in notes {
            events.push((
                on,
                TrackEventKind::Midi {
                    channel: u4::new(0),
                    message: MidiMessage::NoteOn {
                        key: u7::new(key),
                        vel: u7::new(100),
                    },
                },
            ));
            events.push((
                off,
                TrackEventKind::Midi {
                    channel: u4::new(0),
                    message: MidiMessage::NoteOff {
                        key: u7::new(key),
                        vel: u7::new(0),
                    },
                },
            ));
        }
        events.sort_by_key(|e| e.0);
        let mut now = 0;
        let mut track: Vec<TrackEvent<'static>> = events
            .into_iter()
            .map(|(t, kind)| {
                let ev = TrackEvent {
                    delta: u28::new(t - now),
                    kind,
                };
                now = t;
                ev
            })
            .collect();
        track.push(TrackEvent {
            delta: u28::new(0),
            kind: TrackEventKind::Meta(MetaMessage::EndOfTrack),
        });
        let smf = Smf {
            header: Header::new(Format::SingleTrack, Timing::Metrical(u15::new(tpb))),
            tracks: vec![track],
        };
        let mut out = Vec::new();
        smf.write_std(&mut out).unwrap();
        out
    }

    #[test]
    fn single_quarter_note() {
        let m = parse_midi_bytes(&file(96, &[(0, 96, 60)], None)).unwrap();
        assert_eq!(m[0].events, vec![NoteEvent::new(60, 0, 4)]);
    }

    #[test]
    fn highest_simultaneous_note_wins() {
        let m = parse_midi_bytes(&file(96, &[(0, 96, 60), (0, 96, 64)], None)).unwrap();
        assert_eq!(m[0].events, vec![NoteEvent::new(64, 0, 4)]);
    }

    #[test]
    fn empty_track_is_an_error() {
        assert!(matches!(parse_midi_bytes(&file(96, &[], None)), Err(Error::EmptyMelody)));
    }

    #[test]
    fn quantization_rounds_ties_up() {
        // 1/32 note offsets (12 ticks at 96 tpb) are exact half steps
        let m = parse_midi_bytes(&file(96, &[(12, 36, 60)], None)).unwrap();
        assert_eq!(m[0].events, vec![NoteEvent::new(60, 1, 1)]);
    }

    #[test]
    fn non_four_four_rejected() {
        let r = parse_midi_bytes(&file(96, &[(0, 96, 60)], Some((3, 2))));
        assert!(matches!(
            r,
            Err(Error::UnsupportedMeter {
                numerator: 3,
                denominator: 4
            })
        ));
    }

    #[test]
    fn export_round_trip_and_duration() {
        let m = MelodyTokenSeq::new(
            [60, 128, 60, 129, 62, 128, 128, 64]
                .iter()
                .copied()
                .cycle()
                .take(128)
                .collect(),
        )
        .unwrap();
        let bytes = melody_to_midi_bytes(&m, 120.0).unwrap();
        let back = parse_midi_bytes(&bytes).unwrap();
        assert_eq!(tokenize_melody(&back[0].events, 128).unwrap().melody, m);
        assert_eq!(back[0].length_steps, 128);
        assert!((midi_duration_seconds(&bytes).unwrap() - 16.0).abs() < 1e-9);
    }

    #[test]
    fn all_rest_export_is_valid() {
        let bytes = melody_to_midi_bytes(&MelodyTokenSeq::rests(32), 100.0).unwrap();
        assert!(Smf::parse(&bytes).is_ok());
        assert!(matches!(parse_midi_bytes(&bytes), Err(Error::EmptyMelody)));
        assert_eq!(melody_from_midi_bytes(&bytes).unwrap(), MelodyTokenSeq::rests(32));
    }
}
