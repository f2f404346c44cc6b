//! Hierarchical phrase decoder: phrase latent → 2 intermediate (4-bar)
//! latents → 4 bar-level (2-bar) latents → a shared 2-bar decoder.

use rand_chacha::ChaCha8Rng;

use super::flat::{Decoded, Decoder, Encoder};
use super::{
    new_rng, LatentPair, Model, ModelConfig, ModelKind, SeqBatch, GROUP_EXPANDER,
};
use crate::contrastive::Heads;
use crate::corpus::{ChordSeq, MelodyTokenSeq, PhraseSample, MELODY_CLASSES, PHRASE_STEPS, RHYTHM_CLASSES};
use crate::engine::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Segments per phrase at the bar level.
pub const LEAVES: usize = 4;
pub const LEAF_STEPS: usize = PHRASE_STEPS / LEAVES;

/// Two-layer recurrent expander that turns each input latent of one factor
/// into two child latents of the same factor. The parent initializes both
/// layers' states and is fed at each of the two steps; each step's top-layer
/// output is projected to one child.
#[derive(Debug, Clone)]
pub struct Expander {
    in_w: ParamId,
    in_b: ParamId,
    h0: [(ParamId, ParamId); 2],
    gru: [(ParamId, ParamId); 2],
    mid_w: ParamId,
    mid_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl Expander {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize, he: usize) -> Self {
        let g = GROUP_EXPANDER;
        let z = d;
        let mut add = |name: &str, rows: usize, cols: usize, fan_in: usize| {
            store.add_uniform(rng, format!("{prefix}{name}"), g, rows, cols, fan_in)
        };
        let in_w = add("in_w", z, 3 * he, z);
        let in_b = add("in_b", 1, 3 * he, he);
        let h0 = [
            (add("h0_w_0", z, he, z), add("h0_b_0", 1, he, z)),
            (add("h0_w_1", z, he, z), add("h0_b_1", 1, he, z)),
        ];
        let gru = [
            (add("gru_w_0", he, 3 * he, he), add("gru_b_0", 1, 3 * he, he)),
            (add("gru_w_1", he, 3 * he, he), add("gru_b_1", 1, 3 * he, he)),
        ];
        let mid_w = add("mid_w", he, 3 * he, he);
        let mid_b = add("mid_b", 1, 3 * he, he);
        let out_w = add("out_w", he, z, he);
        let out_b = add("out_b", 1, z, he);
        Self {
            in_w,
            in_b,
            h0,
            gru,
            mid_w,
            mid_b,
            out_w,
            out_b,
        }
    }

    /// `n × d` parents to `2n × d` children; row `t * n + i` is child `t` of
    /// parent `i`.
    pub fn forward(&self, tape: &mut Tape, z: Var) -> Var {
        let x = tape.linear(z, self.in_w, self.in_b);
        let x = tape.repeat(x, 2);
        let h0 = tape.linear(z, self.h0[0].0, self.h0[0].1);
        let h0 = tape.tanh(h0);
        let out = tape.gru(x, h0, self.gru[0].0, self.gru[0].1, false);
        let x2 = tape.linear(out, self.mid_w, self.mid_b);
        let h1 = tape.linear(z, self.h0[1].0, self.h0[1].1);
        let h1 = tape.tanh(h1);
        let out = tape.gru(x2, h1, self.gru[1].0, self.gru[1].1, false);
        tape.linear(out, self.out_w, self.out_b)
    }
}

/// Tape handles of one hierarchical decode of `batch` phrases.
#[derive(Debug, Clone, Copy)]
pub struct HierVars {
    /// `2·batch × d`, row `t * batch + b` is half `t` of phrase `b`.
    pub inter_p: Var,
    pub inter_r: Var,
    /// `4·batch × d`, row `k * batch + b` is segment `k` of phrase `b`.
    pub bar_p: Var,
    pub bar_r: Var,
}

/// Result of [`HierModel::hier_decode`] for one phrase.
#[derive(Debug, Clone)]
pub struct HierOutput {
    pub intermediate: Vec<LatentPair>,
    pub bar: Vec<LatentPair>,
    /// `128 × 130`, in phrase step order.
    pub melody_logits: Tensor,
    /// `128 × 3`.
    pub rhythm_logits: Tensor,
}

/// Long-scale encoder with the hierarchical decoder.
#[derive(Debug, Clone)]
pub struct HierModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    /// Pitch and rhythm expanders of each level, in that order. The factors
    /// never mix, so rhythm children depend on `z_r` alone.
    pub level1: [Expander; 2],
    pub level2: [Expander; 2],
    pub leaf: Decoder,
    pub heads: Heads,
}

impl HierModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = new_rng(seed);
        let mut store = ParamStore::new();
        let (d, he) = (config.latent_dim, config.expander_hidden);
        let encoder = Encoder::new(&mut store, &mut rng, "encoder.", &config, PHRASE_STEPS);
        let level1 = [
            Expander::new(&mut store, &mut rng, "level1.p.", d, he),
            Expander::new(&mut store, &mut rng, "level1.r.", d, he),
        ];
        let level2 = [
            Expander::new(&mut store, &mut rng, "level2.p.", d, he),
            Expander::new(&mut store, &mut rng, "level2.r.", d, he),
        ];
        let leaf = Decoder::new(&mut store, &mut rng, "leaf.", &config, LEAF_STEPS);
        let heads = Heads::new(&mut store, d);
        Ok(Self {
            config,
            store,
            encoder,
            level1,
            level2,
            leaf,
            heads,
        })
    }

    /// Intermediate and bar-level latents for phrase latents `batch × d`.
    pub fn expand(&self, tape: &mut Tape, zp: Var, zr: Var) -> HierVars {
        let batch = tape.value(zp).rows;
        // level 2 row s·2B + t·B + b holds segment 2t + s of phrase b
        let mut order = Vec::with_capacity(LEAVES * batch);
        for k in 0..LEAVES {
            let (t, s) = (k / 2, k % 2);
            for b in 0..batch {
                order.push(s * 2 * batch + t * batch + b);
            }
        }
        let mut factor = |f: usize, z: Var| {
            let inter = self.level1[f].forward(tape, z);
            let grand = self.level2[f].forward(tape, inter);
            (inter, tape.gather(grand, order.clone()))
        };
        let (inter_p, bar_p) = factor(0, zp);
        let (inter_r, bar_r) = factor(1, zr);
        HierVars {
            inter_p,
            inter_r,
            bar_p,
            bar_r,
        }
    }

    /// Teacher-forced leaf logits for `leaves`, the phrase batch split into
    /// [`LEAVES`] segments.
    pub fn leaf_forward(&self, tape: &mut Tape, vars: &HierVars, leaves: &SeqBatch) -> (Var, Var) {
        self.leaf.forward(tape, vars.bar_p, vars.bar_r, leaves)
    }

    /// Teacher-forced `(melody, rhythm)` logits from the posterior means of
    /// 8-bar `samples`, in the layout of the returned leaf batch.
    pub fn teacher_forced(&self, samples: &[&PhraseSample]) -> Result<(Tensor, Tensor, SeqBatch)> {
        let batch = SeqBatch::new(samples, self.config.use_chords)?;
        self.encoder.check_steps(batch.steps)?;
        let leaves = batch.split(LEAVES)?;
        let mut tape = Tape::new(&self.store);
        let post = self.encoder.forward(&mut tape, &batch);
        let vars = self.expand(&mut tape, post.mu_p, post.mu_r);
        let (m, r) = self.leaf_forward(&mut tape, &vars, &leaves);
        Ok((tape.value(m).clone(), tape.value(r).clone(), leaves))
    }

    /// Decodes one phrase latent, exposing every level. With `teacher` the
    /// leaves are teacher-forced on its segments, otherwise greedy.
    pub fn hier_decode(
        &self,
        z: &LatentPair,
        chord: Option<&ChordSeq>,
        teacher: Option<&MelodyTokenSeq>,
    ) -> Result<HierOutput> {
        let d = self.config.latent_dim;
        if z.z_p.len() != d || z.z_r.len() != d {
            return Err(Error::Shape(format!(
                "latent of dimension {}/{} for a model with d = {d}",
                z.z_p.len(),
                z.z_r.len()
            )));
        }
        let (zp, zr) = LatentPair::stack(&[z])?;
        let mut tape = Tape::new(&self.store);
        let zp = tape.constant(zp);
        let zr = tape.constant(zr);
        let vars = self.expand(&mut tape, zp, zr);
        let intermediate = LatentPair::unstack(tape.value(vars.inter_p), tape.value(vars.inter_r));
        let bar = LatentPair::unstack(tape.value(vars.bar_p), tape.value(vars.bar_r));
        let (melody, rhythm) = match teacher {
            Some(m) => {
                let sample = PhraseSample::new(m.clone(), chord.cloned(), "", 0)?;
                let batch = SeqBatch::new(&[&sample], self.config.use_chords)?;
                self.encoder.check_steps(batch.steps)?;
                let leaves = batch.split(LEAVES)?;
                let (ml, rl) = self.leaf_forward(&mut tape, &vars, &leaves);
                (tape.value(ml).clone(), tape.value(rl).clone())
            }
            None => {
                let out = self.greedy_leaves(&tape, &vars, &[chord]);
                (out.melody_logits, out.rhythm_logits)
            }
        };
        Ok(HierOutput {
            intermediate,
            bar,
            melody_logits: leaf_rows_to_phrase(&melody, 1),
            rhythm_logits: leaf_rows_to_phrase(&rhythm, 1),
        })
    }

    fn greedy_leaves(&self, tape: &Tape, vars: &HierVars, chords: &[Option<&ChordSeq>]) -> Decoded {
        let chroma = self.config.use_chords.then(|| leaf_chroma(chords));
        self.leaf.greedy(
            &self.store,
            tape.value(vars.bar_p),
            tape.value(vars.bar_r),
            LEAF_STEPS,
            chroma.as_ref(),
        )
    }

    /// Greedy phrase decodes of latent pairs.
    pub fn decode_greedy(&self, zs: &[&LatentPair], chords: &[Option<&ChordSeq>]) -> Result<Vec<MelodyTokenSeq>> {
        let (zp, zr) = LatentPair::stack(zs)?;
        if zp.cols != self.config.latent_dim {
            return Err(Error::Shape(format!("latent dimension {} for d = {}", zp.cols, self.config.latent_dim)));
        }
        let mut tape = Tape::new(&self.store);
        let zp = tape.constant(zp);
        let zr = tape.constant(zr);
        let vars = self.expand(&mut tape, zp, zr);
        let out = self.greedy_leaves(&tape, &vars, chords);
        let batch = zs.len();
        Ok((0..batch)
            .map(|b| {
                let tokens: Vec<u8> = (0..LEAVES)
                    .flat_map(|k| out.melody[k * batch + b].iter().copied())
                    .collect();
                MelodyTokenSeq::from_decoded(tokens)
            })
            .collect())
    }

    /// Greedy decodes of the posterior means.
    pub fn reconstruct(&self, samples: &[&PhraseSample]) -> Result<Vec<MelodyTokenSeq>> {
        let posts = self.encode_batch(samples)?;
        let zs: Vec<LatentPair> = posts.iter().map(|p| p.mean()).collect();
        let refs: Vec<&LatentPair> = zs.iter().collect();
        let chords: Vec<Option<&ChordSeq>> = samples.iter().map(|s| s.chord.as_ref()).collect();
        self.decode_greedy(&refs, &chords)
    }
}

/// Chroma for a leaf batch: segment `k` of phrase `b` is item `k·B + b`.
fn leaf_chroma(chords: &[Option<&ChordSeq>]) -> Tensor {
    let batch = chords.len();
    let nb = LEAVES * batch;
    let mut data = vec![0f32; LEAF_STEPS * nb * 12];
    for (b, c) in chords.iter().enumerate() {
        let Some(c) = c else { continue };
        for k in 0..LEAVES {
            for t in 0..LEAF_STEPS {
                let step = k * LEAF_STEPS + t;
                if step < c.len() {
                    let row = t * nb + k * batch + b;
                    data[row * 12..(row + 1) * 12].copy_from_slice(&c.chroma(step));
                }
            }
        }
    }
    Tensor::new(LEAF_STEPS * nb, 12, data)
}

/// Reorders leaf-layout rows into per-phrase step order: phrase `b`, step
/// `32k + t` comes from leaf row `t·4B + k·B + b`.
fn leaf_rows_to_phrase(t: &Tensor, batch: usize) -> Tensor {
    let nb = LEAVES * batch;
    let mut data = Vec::with_capacity(t.data.len());
    for b in 0..batch {
        for k in 0..LEAVES {
            for s in 0..LEAF_STEPS {
                data.extend_from_slice(t.row(s * nb + k * batch + b));
            }
        }
    }
    debug_assert!(t.cols == MELODY_CLASSES || t.cols == RHYTHM_CLASSES);
    Tensor::new(t.rows, t.cols, data)
}

impl Model for HierModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn kind(&self) -> ModelKind {
        ModelKind::Hier
    }

    fn encoder(&self) -> &Encoder {
        &self.encoder
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth;

    fn tiny() -> ModelConfig {
        ModelConfig {
            latent_dim: 4,
            hidden: 8,
            expander_hidden: 6,
            use_chords: true,
        }
    }

    #[test]
    fn hierarchy_shapes() {
        let m = HierModel::new(tiny(), 5).unwrap();
        let songs = synth::synth_corpus(&synth::SynthOptions {
            songs: 1,
            with_chords: true,
            ..Default::default()
        })
        .unwrap();
        let p = crate::corpus::segment(&songs[0], 8, 8).unwrap().remove(0);
        let z = m.encode(&p.melody, p.chord.as_ref()).unwrap().mean();
        for teacher in [Some(&p.melody), None] {
            let out = m.hier_decode(&z, p.chord.as_ref(), teacher).unwrap();
            assert_eq!(out.intermediate.len(), 2);
            assert_eq!(out.bar.len(), 4);
            assert!(out.intermediate.iter().chain(&out.bar).all(|l| l.dim() == 4));
            assert_eq!(out.melody_logits.shape(), (128, 130));
            assert_eq!(out.rhythm_logits.shape(), (128, 3));
        }
        let rec = m.reconstruct(&[&p]).unwrap();
        assert_eq!(rec[0].len(), 128);
    }

    #[test]
    fn phrase_order_matches_batched_layout() {
        let m = HierModel::new(tiny(), 6).unwrap();
        let songs = synth::synth_corpus(&synth::SynthOptions {
            songs: 2,
            with_chords: true,
            ..Default::default()
        })
        .unwrap();
        let ps: Vec<PhraseSample> = songs
            .iter()
            .map(|s| crate::corpus::segment(s, 8, 8).unwrap().remove(0))
            .collect();
        let refs: Vec<&PhraseSample> = ps.iter().collect();
        let (ml, _, _) = m.teacher_forced(&refs).unwrap();
        let z = m.encode(&ps[1].melody, ps[1].chord.as_ref()).unwrap().mean();
        let single = m.hier_decode(&z, ps[1].chord.as_ref(), Some(&ps[1].melody)).unwrap();
        let batched = leaf_rows_to_phrase(&ml, 2);
        for (a, b) in batched.data[128 * 130..].iter().zip(&single.melody_logits.data) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
