//! Per-step chord chroma and the sidecar annotation format.
//!
//! A sidecar file has one line per 16th-note step. Each line is either a
//! 12-character chroma bitstring (`C` first, e.g. `100010010000` for C major)
//! or a chord symbol such as `C`, `F#m`, `Bb7`, `Gmaj7`, `Edim` or `N` for no
//! chord. Blank lines and lines starting with `#` are ignored.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One 12-bit chroma mask per step (bit `i` = pitch class `i`, C = 0).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChordSeq(Vec<u16>);

impl ChordSeq {
    pub fn new(masks: Vec<u16>) -> Result<Self> {
        if let Some((i, m)) = masks.iter().enumerate().find(|(_, &m)| m >= 1 << 12) {
            return Err(Error::InvalidArgument(format!(
                "chroma mask {m:#x} at step {i} uses more than 12 bits"
            )));
        }
        Ok(Self(masks))
    }

    pub fn silent(len: usize) -> Self {
        Self(vec![0; len])
    }

    pub fn masks(&self) -> &[u16] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Every mask rotated by `semitones` pitch classes.
    pub fn transpose(&self, semitones: i32) -> Self {
        let k = semitones.rem_euclid(12) as u32;
        Self(
            self.0
                .iter()
                .map(|&m| ((m << k) | (m >> ((12 - k) % 12))) & 0xFFF)
                .collect(),
        )
    }

    /// Chroma vector of one step as 0/1 floats.
    pub fn chroma(&self, step: usize) -> [f32; 12] {
        let m = self.0[step];
        std::array::from_fn(|i| ((m >> i) & 1) as f32)
    }

    pub fn window(&self, start: usize, len: usize) -> ChordSeq {
        ChordSeq(self.0[start..start + len].to_vec())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_sidecar(&text)
    }
}

/// Parses the sidecar text format.
pub fn parse_sidecar(text: &str) -> Result<ChordSeq> {
    let mut masks = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mask = if line.len() == 12 && line.bytes().all(|b| b == b'0' || b == b'1') {
            line.bytes()
                .enumerate()
                .fold(0u16, |m, (k, b)| m | (((b == b'1') as u16) << k))
        } else {
            chord_symbol_mask(line).ok_or_else(|| Error::Chord {
                line: i + 1,
                text: line.to_string(),
            })?
        };
        masks.push(mask);
    }
    Ok(ChordSeq(masks))
}

/// Chroma mask of a chord symbol, or `None` if the symbol is not recognised.
pub fn chord_symbol_mask(symbol: &str) -> Option<u16> {
    if symbol == "N" || symbol == "N.C." {
        return Some(0);
    }
    let mut chars = symbol.chars();
    let letter = chars.next()?;
    let mut root: i32 = match letter {
        'C' => 0,
        'D' => 2,
        'E' => 4,
        'F' => 5,
        'G' => 7,
        'A' => 9,
        'B' => 11,
        _ => return None,
    };
    let rest = chars.as_str();
    let quality = if let Some(q) = rest.strip_prefix('#') {
        root += 1;
        q
    } else if let Some(q) = rest.strip_prefix('b') {
        root -= 1;
        q
    } else {
        rest
    };
    let intervals: &[i32] = match quality {
        "" | "maj" => &[0, 4, 7],
        "m" | "min" => &[0, 3, 7],
        "7" => &[0, 4, 7, 10],
        "maj7" => &[0, 4, 7, 11],
        "m7" | "min7" => &[0, 3, 7, 10],
        "dim" => &[0, 3, 6],
        "dim7" => &[0, 3, 6, 9],
        "aug" => &[0, 4, 8],
        "sus2" => &[0, 2, 7],
        "sus4" => &[0, 5, 7],
        "6" => &[0, 4, 7, 9],
        "m6" => &[0, 3, 7, 9],
        _ => return None,
    };
    Some(
        intervals
            .iter()
            .fold(0u16, |m, iv| m | 1 << (root + iv).rem_euclid(12)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symbols() {
        assert_eq!(chord_symbol_mask("C"), Some(0b1001_0001));
        assert_eq!(chord_symbol_mask("Am"), Some(0b0010_0001_0001));
        assert_eq!(chord_symbol_mask("N"), Some(0));
        assert_eq!(chord_symbol_mask("Cb"), chord_symbol_mask("B"));
        assert_eq!(chord_symbol_mask("H"), None);
    }

    #[test]
    fn sidecar_mixes_bitstrings_and_symbols() {
        let c = parse_sidecar("# intro\n100010010000\nC\n\nG7\nN\n").unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(c.masks()[0], c.masks()[1]);
        assert_eq!(c.chroma(0)[0], 1.0);
        assert_eq!(c.chroma(0)[4], 1.0);
        assert_eq!(c.chroma(0)[1], 0.0);
        assert_eq!(c.masks()[3], 0);
        assert!(matches!(parse_sidecar("C\nXq\n"), Err(Error::Chord { line: 2, .. })));
    }

    #[test]
    fn transposition_rotates_chroma() {
        let c = ChordSeq::new(vec![chord_symbol_mask("C").unwrap(), chord_symbol_mask("Am").unwrap(), 0]).unwrap();
        let up = c.transpose(2);
        assert_eq!(up.masks()[0], chord_symbol_mask("D").unwrap());
        assert_eq!(up.masks()[1], chord_symbol_mask("Bm").unwrap());
        assert_eq!(up.masks()[2], 0);
        assert_eq!(c.transpose(-5).masks()[0], chord_symbol_mask("G").unwrap());
        assert_eq!(c.transpose(12), c);
    }
}
