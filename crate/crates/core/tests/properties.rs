use proptest::prelude::*;

use phrasevae::contrastive::losses::infonce;
use phrasevae::corpus::{derive_rhythm, detokenize, tokenize_melody, transpose, NoteEvent};
use phrasevae::generation::slerp;

/// Monotonic note lists on a grid of `bars` bars.
fn notes() -> impl Strategy<Value = (Vec<NoteEvent>, usize)> {
    (1usize..=8, prop::collection::vec((0u8..=127, 1usize..=8, 0usize..=3), 0..48)).prop_map(|(bars, raw)| {
        let len = bars * 16;
        let mut t = 0;
        let mut out = Vec::new();
        for (pitch, dur, gap) in raw {
            t += gap;
            if t >= len {
                break;
            }
            let dur = dur.min(len - t);
            out.push(NoteEvent::new(pitch, t, dur));
            t += dur;
        }
        (out, len)
    })
}

fn unit(v: &[f32]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn norm(v: &[f32]) -> f32 {
    v.iter().map(|x| x * x).sum::<f32>().sqrt()
}

proptest! {
    #[test]
    fn tokenize_round_trips((events, len) in notes()) {
        let tok = tokenize_melody(&events, len).unwrap();
        prop_assert!(!tok.truncated);
        prop_assert_eq!(tok.melody.len(), len);
        let back = detokenize(&tok.melody);
        prop_assert_eq!(&back, &events);
        prop_assert_eq!(tokenize_melody(&back, len).unwrap().melody, tok.melody);
    }

    #[test]
    fn transposition_keeps_rhythm((events, len) in notes(), shift in -12i32..=12) {
        let m = tokenize_melody(&events, len).unwrap().melody;
        let in_range = events.iter().all(|n| (0..=127).contains(&(n.pitch as i32 + shift)));
        match transpose(&m, shift) {
            Ok(t) => {
                prop_assert!(in_range);
                prop_assert_eq!(derive_rhythm(&t), derive_rhythm(&m));
                prop_assert_eq!(transpose(&t, -shift).unwrap(), m);
            }
            Err(_) => prop_assert!(!in_range),
        }
    }

    #[test]
    fn slerp_stays_on_the_sphere(
        a in prop::collection::vec(-1.0f32..1.0, 8),
        b in prop::collection::vec(-1.0f32..1.0, 8),
        t in 0.0f64..=1.0,
    ) {
        prop_assume!(norm(&a) > 0.1 && norm(&b) > 0.1);
        let (a, b) = (unit(&a), unit(&b));
        let cos: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        prop_assume!(cos > -0.99);
        let m = slerp(&a, &b, t).unwrap();
        prop_assert!((norm(&m) - 1.0).abs() < 1e-4, "norm {}", norm(&m));
    }

    #[test]
    fn infonce_falls_as_the_positive_moves_toward_the_anchor(
        anchor in prop::collection::vec(-1.0f64..1.0, 4),
        positive in prop::collection::vec(-1.0f64..1.0, 4),
        negatives in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..6),
        step in 0.05f64..1.0,
    ) {
        let aa: f64 = anchor.iter().map(|x| x * x).sum();
        prop_assume!(aa > 1e-2);
        let w: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        let negs: Vec<&[f64]> = negatives.iter().map(Vec::as_slice).collect();
        let closer: Vec<f64> = positive.iter().zip(&anchor).map(|(p, a)| p + step * a).collect();
        let (before, _) = infonce(&anchor, &w, &positive, &negs, 1.0).unwrap();
        let (after, _) = infonce(&anchor, &w, &closer, &negs, 1.0).unwrap();
        prop_assert!(after < before, "{after} >= {before}");

        let mut more = negs.clone();
        more.push(&anchor);
        let (crowded, _) = infonce(&anchor, &w, &positive, &more, 1.0).unwrap();
        prop_assert!(crowded > before);
    }
}
