//! Single-scale encoder and the rhythm/global decoder pair.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{
    new_rng, GaussianPosterior, LatentPair, Model, ModelConfig, ModelKind, Scale, SeqBatch, GROUP_DECODER,
    GROUP_ENCODER, MELODY_START, RHYTHM_START,
};
use crate::contrastive::Heads;
use crate::corpus::{ChordSeq, MelodyTokenSeq, PhraseSample, MELODY_CLASSES, RHYTHM_CLASSES};
use crate::engine::kernels::{gemm, gru_forward, GruDims};
use crate::engine::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

const CHROMA: usize = 12;

/// Tape handles of a batch of posteriors, each `batch × d`.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorVars {
    pub mu_p: Var,
    pub mu_r: Var,
    pub lv_p: Var,
    pub lv_r: Var,
}

impl PosteriorVars {
    pub fn read(&self, tape: &Tape) -> Vec<GaussianPosterior> {
        let (mp, mr, lp, lr) = (
            tape.value(self.mu_p),
            tape.value(self.mu_r),
            tape.value(self.lv_p),
            tape.value(self.lv_r),
        );
        (0..mp.rows)
            .map(|b| GaussianPosterior {
                mean_p: mp.row(b).to_vec(),
                logvar_p: lp.row(b).to_vec(),
                mean_r: mr.row(b).to_vec(),
                logvar_r: lr.row(b).to_vec(),
            })
            .collect()
    }

    /// Reparameterized samples of both factors.
    pub fn sample(&self, tape: &mut Tape, rng: &mut ChaCha8Rng) -> (Var, Var) {
        let n = tape.value(self.mu_p).data.len();
        let mut noise = || -> Vec<f32> { (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect() };
        let (ep, er) = (noise(), noise());
        let zp = tape.reparam(self.mu_p, self.lv_p, ep);
        let zr = tape.reparam(self.mu_r, self.lv_r, er);
        (zp, zr)
    }
}

/// Bidirectional GRU encoder producing the factorized posterior.
#[derive(Debug, Clone)]
pub struct Encoder {
    steps: usize,
    latent_dim: usize,
    hidden: usize,
    emb: [ParamId; 2],
    chord: Option<[ParamId; 2]>,
    gru_w: [ParamId; 2],
    gru_b: [ParamId; 2],
    out_w: ParamId,
    out_b: ParamId,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: &ModelConfig, steps: usize) -> Self {
        let (h, d, g) = (cfg.hidden, cfg.latent_dim, GROUP_ENCODER);
        let mut pair = |store: &mut ParamStore, name: &str, rows: usize| -> [ParamId; 2] {
            [
                store.add_uniform(rng, format!("{prefix}{name}_fwd"), g, rows, 3 * h, h),
                store.add_uniform(rng, format!("{prefix}{name}_bwd"), g, rows, 3 * h, h),
            ]
        };
        let emb = pair(store, "embed", MELODY_CLASSES);
        let chord = cfg.use_chords.then(|| pair(store, "chord", CHROMA));
        let gru_w = pair(store, "gru_w", h);
        let gru_b = pair(store, "gru_b", 1);
        let out_w = store.add_uniform(rng, format!("{prefix}out_w"), g, 2 * h, 4 * d, 2 * h);
        let out_b = store.add_uniform(rng, format!("{prefix}out_b"), g, 1, 4 * d, 2 * h);
        Self {
            steps,
            latent_dim: d,
            hidden: h,
            emb,
            chord,
            gru_w,
            gru_b,
            out_w,
            out_b,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub(crate) fn check_steps(&self, steps: usize) -> Result<()> {
        if steps != self.steps {
            return Err(Error::Shape(format!(
                "encoder expects {} steps, got {steps}",
                self.steps
            )));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, batch: &SeqBatch) -> PosteriorVars {
        let (b, t, d) = (batch.batch, batch.steps, self.latent_dim);
        let h0 = tape.constant(Tensor::zeros(b, self.hidden));
        let chroma = batch.chroma.as_ref().map(|c| tape.constant(c.clone()));
        let mut finals = Vec::with_capacity(2);
        for dir in 0..2 {
            let table = tape.param(self.emb[dir]);
            let mut x = tape.gather(table, batch.melody.clone());
            if let (Some(ids), Some(c)) = (self.chord, chroma) {
                let w = tape.param(ids[dir]);
                let proj = tape.matmul(c, w);
                x = tape.add(x, proj);
            }
            let out = tape.gru(x, h0, self.gru_w[dir], self.gru_b[dir], dir == 1);
            // forward pass ends at the last step, the reverse pass at the first
            let row = if dir == 0 { (t - 1) * b } else { 0 };
            finals.push(tape.rows(out, row, b));
        }
        let both = tape.concat_cols(&finals);
        let stats = tape.linear(both, self.out_w, self.out_b);
        PosteriorVars {
            mu_p: tape.cols(stats, 0, d),
            mu_r: tape.cols(stats, d, d),
            lv_p: tape.cols(stats, 2 * d, d),
            lv_r: tape.cols(stats, 3 * d, d),
        }
    }
}

#[derive(Debug, Clone)]
struct RecurrentHead {
    z_in_w: ParamId,
    z_in_b: ParamId,
    h0_w: ParamId,
    h0_b: ParamId,
    gru_w: ParamId,
    gru_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl RecurrentHead {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize, h: usize, classes: usize) -> Self {
        let g = GROUP_DECODER;
        Self {
            z_in_w: store.add_uniform(rng, format!("{prefix}z_in_w"), g, d, 3 * h, d),
            z_in_b: store.add_uniform(rng, format!("{prefix}z_in_b"), g, 1, 3 * h, h),
            h0_w: store.add_uniform(rng, format!("{prefix}h0_w"), g, d, h, d),
            h0_b: store.add_uniform(rng, format!("{prefix}h0_b"), g, 1, h, d),
            gru_w: store.add_uniform(rng, format!("{prefix}gru_w"), g, h, 3 * h, h),
            gru_b: store.add_uniform(rng, format!("{prefix}gru_b"), g, 1, 3 * h, h),
            out_w: store.add_uniform(rng, format!("{prefix}out_w"), g, h, classes, h),
            out_b: store.add_uniform(rng, format!("{prefix}out_b"), g, 1, classes, h),
        }
    }

    /// Runs the recurrence over precomputed per-step inputs.
    fn forward(&self, tape: &mut Tape, x: Var, z: Var) -> Var {
        let z_in = tape.linear(z, self.z_in_w, self.z_in_b);
        let x = tape.add_repeated(x, z_in);
        let h0 = tape.linear(z, self.h0_w, self.h0_b);
        let h0 = tape.tanh(h0);
        let out = tape.gru(x, h0, self.gru_w, self.gru_b, false);
        tape.linear(out, self.out_w, self.out_b)
    }
}

/// Greedy decoding result. Logits are time-major like [`SeqBatch`]; token
/// sequences are per item and may violate the melody invariants.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub melody_logits: Tensor,
    pub rhythm_logits: Tensor,
    pub melody: Vec<Vec<u8>>,
    pub rhythm: Vec<Vec<u8>>,
}

/// Rhythm decoder from `z_r`, then global decoder from `z_p`, the decoded
/// rhythm distribution and optional chords.
#[derive(Debug, Clone)]
pub struct Decoder {
    steps: usize,
    hidden: usize,
    rhythm_embed: ParamId,
    rhythm: RecurrentHead,
    melody_embed: ParamId,
    rhythm_in: ParamId,
    chord_in: Option<ParamId>,
    melody: RecurrentHead,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: &ModelConfig, steps: usize) -> Self {
        let (h, d, g) = (cfg.hidden, cfg.latent_dim, GROUP_DECODER);
        let rhythm_embed = store.add_uniform(rng, format!("{prefix}rhythm_embed"), g, RHYTHM_START + 1, 3 * h, h);
        let rhythm = RecurrentHead::new(store, rng, &format!("{prefix}rhythm_"), d, h, RHYTHM_CLASSES);
        let melody_embed = store.add_uniform(rng, format!("{prefix}melody_embed"), g, MELODY_START + 1, 3 * h, h);
        let rhythm_in = store.add_uniform(rng, format!("{prefix}rhythm_in"), g, RHYTHM_CLASSES, 3 * h, h);
        let chord_in = cfg
            .use_chords
            .then(|| store.add_uniform(rng, format!("{prefix}chord_in"), g, CHROMA, 3 * h, h));
        let melody = RecurrentHead::new(store, rng, &format!("{prefix}melody_"), d, h, MELODY_CLASSES);
        Self {
            steps,
            hidden: h,
            rhythm_embed,
            rhythm,
            melody_embed,
            rhythm_in,
            chord_in,
            melody,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Teacher-forced logits `(melody, rhythm)` for `z_p`, `z_r` of shape
    /// `batch × d`.
    pub fn forward(&self, tape: &mut Tape, zp: Var, zr: Var, batch: &SeqBatch) -> (Var, Var) {
        let table = tape.param(self.rhythm_embed);
        let xr = tape.gather(table, batch.rhythm_prev());
        let rhythm_logits = self.rhythm.forward(tape, xr, zr);
        let stream = tape.softmax_rows(rhythm_logits);

        let table = tape.param(self.melody_embed);
        let mut xm = tape.gather(table, batch.melody_prev());
        let w = tape.param(self.rhythm_in);
        let r_in = tape.matmul(stream, w);
        xm = tape.add(xm, r_in);
        if let (Some(id), Some(c)) = (self.chord_in, batch.chroma.as_ref()) {
            let c = tape.constant(c.clone());
            let w = tape.param(id);
            let c_in = tape.matmul(c, w);
            xm = tape.add(xm, c_in);
        }
        let melody_logits = self.melody.forward(tape, xm, zp);
        (melody_logits, rhythm_logits)
    }

    /// Free-running argmax decoding of `steps` steps.
    pub fn greedy(
        &self,
        store: &ParamStore,
        zp: &Tensor,
        zr: &Tensor,
        steps: usize,
        chroma: Option<&Tensor>,
    ) -> Decoded {
        let b = zp.rows;
        let v = |id: ParamId| store.value(id);
        let (rhythm_logits, rhythm_tokens) =
            self.run_greedy(store, &self.rhythm, v(self.rhythm_embed), zr, steps, None, RHYTHM_START);

        let mut extra = vec![0f32; steps * b * 3 * self.hidden];
        let mut stream = rhythm_logits.data.clone();
        for row in stream.chunks_exact_mut(RHYTHM_CLASSES) {
            softmax_in_place(row);
        }
        let rin = v(self.rhythm_in);
        gemm(steps * b, RHYTHM_CLASSES, rin.cols, &stream, false, &rin.data, false, &mut extra, false);
        if let (Some(id), Some(c)) = (self.chord_in, chroma) {
            let w = v(id);
            gemm(steps * b, CHROMA, w.cols, &c.data, false, &w.data, false, &mut extra, true);
        }
        let (melody_logits, melody_tokens) = self.run_greedy(
            store,
            &self.melody,
            v(self.melody_embed),
            zp,
            steps,
            Some(&extra),
            MELODY_START,
        );
        Decoded {
            melody: SeqBatch::unflatten(&melody_tokens, steps, b),
            rhythm: SeqBatch::unflatten(&rhythm_tokens, steps, b),
            melody_logits,
            rhythm_logits,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run_greedy(
        &self,
        store: &ParamStore,
        head: &RecurrentHead,
        embed: &Tensor,
        z: &Tensor,
        steps: usize,
        extra: Option<&[f32]>,
        start: usize,
    ) -> (Tensor, Vec<usize>) {
        let (b, h) = (z.rows, self.hidden);
        let v = |id: ParamId| store.value(id);
        let z_in = affine(&z.data, b, v(head.z_in_w), v(head.z_in_b));
        let mut state: Vec<f32> = affine(&z.data, b, v(head.h0_w), v(head.h0_b))
            .into_iter()
            .map(f32::tanh)
            .collect();
        let (out_w, out_b) = (v(head.out_w), v(head.out_b));
        let classes = out_w.cols;
        let mut logits = vec![0f32; steps * b * classes];
        let mut tokens = vec![0usize; steps * b];
        let mut prev = vec![start; b];
        let dims = GruDims {
            steps: 1,
            batch: b,
            hidden: h,
            reverse: false,
        };
        let mut x = vec![0f32; b * 3 * h];
        for t in 0..steps {
            for i in 0..b {
                let row = &mut x[i * 3 * h..(i + 1) * 3 * h];
                for (j, o) in row.iter_mut().enumerate() {
                    *o = embed.data[prev[i] * 3 * h + j] + z_in[i * 3 * h + j];
                }
                if let Some(e) = extra {
                    let src = &e[(t * b + i) * 3 * h..(t * b + i + 1) * 3 * h];
                    for (o, s) in row.iter_mut().zip(src) {
                        *o += s;
                    }
                }
            }
            let (next, _) = gru_forward(dims, &x, &state, &v(head.gru_w).data, &v(head.gru_b).data);
            state = next;
            let step_logits = affine(&state, b, out_w, out_b);
            let step = Tensor::new(b, classes, step_logits);
            let best = step.argmax_rows();
            logits[t * b * classes..(t + 1) * b * classes].copy_from_slice(&step.data);
            tokens[t * b..(t + 1) * b].copy_from_slice(&best);
            prev = best;
        }
        (Tensor::new(steps * b, classes, logits), tokens)
    }
}

fn affine(x: &[f32], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f32> {
    let mut out = b.data.repeat(rows);
    gemm(rows, w.rows, w.cols, x, false, &w.data, false, &mut out, true);
    out
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

pub(crate) fn chroma_rows(chords: &[Option<&ChordSeq>], steps: usize) -> Tensor {
    let b = chords.len();
    let mut data = vec![0f32; steps * b * CHROMA];
    for (i, c) in chords.iter().enumerate() {
        if let Some(c) = c {
            for t in 0..steps.min(c.len()) {
                let row = t * b + i;
                data[row * CHROMA..(row + 1) * CHROMA].copy_from_slice(&c.chroma(t));
            }
        }
    }
    Tensor::new(steps * b, CHROMA, data)
}

/// An encoder/decoder pair at one scale.
#[derive(Debug, Clone)]
pub struct FlatModel {
    pub config: ModelConfig,
    pub scale: Scale,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub heads: Heads,
}

impl FlatModel {
    pub fn new(config: ModelConfig, scale: Scale, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = new_rng(seed);
        let mut store = ParamStore::new();
        let steps = scale.steps();
        let encoder = Encoder::new(&mut store, &mut rng, "encoder.", &config, steps);
        let decoder = Decoder::new(&mut store, &mut rng, "decoder.", &config, steps);
        let heads = Heads::new(&mut store, config.latent_dim);
        Ok(Self {
            config,
            scale,
            store,
            encoder,
            decoder,
            heads,
        })
    }

    pub fn steps(&self) -> usize {
        self.scale.steps()
    }

    /// Teacher-forced `(melody, rhythm)` logits from the posterior means of
    /// `samples`, with the batch they were scored against.
    pub fn teacher_forced(&self, samples: &[&PhraseSample]) -> Result<(Tensor, Tensor, SeqBatch)> {
        let batch = SeqBatch::new(samples, self.config.use_chords)?;
        self.encoder.check_steps(batch.steps)?;
        let mut tape = Tape::new(&self.store);
        let post = self.encoder.forward(&mut tape, &batch);
        let (m, r) = self.decoder.forward(&mut tape, post.mu_p, post.mu_r, &batch);
        Ok((tape.value(m).clone(), tape.value(r).clone(), batch))
    }

    /// Logits `(steps × 130, steps × 3)` for one latent pair. With `teacher`
    /// the decoders are teacher-forced on it, otherwise they run greedily.
    pub fn decode_flat(
        &self,
        z: &LatentPair,
        chord: Option<&ChordSeq>,
        teacher: Option<&MelodyTokenSeq>,
    ) -> Result<(Tensor, Tensor)> {
        let d = self.config.latent_dim;
        if z.z_p.len() != d || z.z_r.len() != d {
            return Err(Error::Shape(format!(
                "latent of dimension {}/{} for a model with d = {d}",
                z.z_p.len(),
                z.z_r.len()
            )));
        }
        let (zp, zr) = LatentPair::stack(&[z])?;
        match teacher {
            Some(m) => {
                let sample = PhraseSample::new(m.clone(), chord.cloned(), "", 0)?;
                let batch = SeqBatch::new(&[&sample], self.config.use_chords)?;
                self.encoder.check_steps(batch.steps)?;
                let mut tape = Tape::new(&self.store);
                let zp = tape.constant(zp);
                let zr = tape.constant(zr);
                let (m, r) = self.decoder.forward(&mut tape, zp, zr, &batch);
                Ok((tape.value(m).clone(), tape.value(r).clone()))
            }
            None => {
                let out = self.decode_greedy(&[z], &[chord])?;
                Ok((out.melody_logits, out.rhythm_logits))
            }
        }
    }

    pub fn decode_greedy(&self, zs: &[&LatentPair], chords: &[Option<&ChordSeq>]) -> Result<Decoded> {
        let (zp, zr) = LatentPair::stack(zs)?;
        if zp.cols != self.config.latent_dim {
            return Err(Error::Shape(format!("latent dimension {} for d = {}", zp.cols, self.config.latent_dim)));
        }
        let chroma = self.config.use_chords.then(|| chroma_rows(chords, self.steps()));
        Ok(self.decoder.greedy(&self.store, &zp, &zr, self.steps(), chroma.as_ref()))
    }

    /// Greedy decodes of the posterior means.
    pub fn reconstruct(&self, samples: &[&PhraseSample]) -> Result<Vec<MelodyTokenSeq>> {
        let posts = self.encode_batch(samples)?;
        let zs: Vec<LatentPair> = posts.iter().map(|p| p.mean()).collect();
        let refs: Vec<&LatentPair> = zs.iter().collect();
        let chords: Vec<Option<&ChordSeq>> = samples.iter().map(|s| s.chord.as_ref()).collect();
        let out = self.decode_greedy(&refs, &chords)?;
        Ok(out.melody.into_iter().map(MelodyTokenSeq::from_decoded).collect())
    }
}

impl Model for FlatModel {
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
        ModelKind::Flat { scale: self.scale }
    }

    fn encoder(&self) -> &Encoder {
        &self.encoder
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth, PhraseSample};
    use crate::engine::Adam;

    fn tiny() -> ModelConfig {
        ModelConfig {
            latent_dim: 4,
            hidden: 8,
            expander_hidden: 8,
            use_chords: false,
        }
    }

    fn phrase(bars: usize) -> PhraseSample {
        let songs = synth::synth_corpus(&synth::SynthOptions {
            songs: 1,
            ..Default::default()
        })
        .unwrap();
        crate::corpus::segment(&songs[0], bars, 8).unwrap().remove(0)
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let m = FlatModel::new(tiny(), Scale::Bars2, 1).unwrap();
        let p = phrase(2);
        let a = m.encode(&p.melody, None).unwrap();
        assert_eq!(a.mean_p.len(), 4);
        assert_eq!(a.logvar_r.len(), 4);
        assert_eq!(a, m.encode(&p.melody, None).unwrap());
        let long = FlatModel::new(tiny(), Scale::Bars8, 1).unwrap();
        assert!(matches!(long.encode(&p.melody, None), Err(Error::Shape(_))));
    }

    #[test]
    fn decode_shapes_and_rhythm_isolation() {
        let m = FlatModel::new(tiny(), Scale::Bars2, 2).unwrap();
        let p = phrase(2);
        let z = m.encode(&p.melody, None).unwrap().mean();
        let (ml, rl) = m.decode_flat(&z, None, Some(&p.melody)).unwrap();
        assert_eq!((ml.rows, ml.cols, rl.rows, rl.cols), (32, 130, 32, 3));
        let mut moved = z.clone();
        moved.z_p.iter_mut().for_each(|v| *v += 1.5);
        let (ml2, rl2) = m.decode_flat(&moved, None, Some(&p.melody)).unwrap();
        assert_eq!(rl, rl2);
        assert_ne!(ml, ml2);
        let (gl, gr) = m.decode_flat(&z, None, None).unwrap();
        assert_eq!((gl.rows, gr.rows), (32, 32));
        let bad = LatentPair::new(vec![0.0; 3], vec![0.0; 3]).unwrap();
        assert!(m.decode_flat(&bad, None, None).is_err());
    }

    #[test]
    fn freezing_keeps_encoder_bitwise() {
        let mut m = FlatModel::new(tiny(), Scale::Bars2, 3).unwrap();
        m.freeze(&[GROUP_ENCODER]).unwrap();
        let before = m.store.group_hash(GROUP_ENCODER);
        let dec_before = m.store.group_hash(GROUP_DECODER);
        let p = phrase(2);
        let batch = SeqBatch::new(&[&p], false).unwrap();
        let grads = {
            let mut tape = Tape::new(&m.store);
            let post = m.encoder.forward(&mut tape, &batch);
            let (ml, rl) = m.decoder.forward(&mut tape, post.mu_p, post.mu_r, &batch);
            let a = tape.cross_entropy(ml, &batch.melody).unwrap();
            let b = tape.cross_entropy(rl, &batch.rhythm).unwrap();
            let l = tape.weighted_sum(&[(a, 1.0), (b, 1.0)]);
            tape.backward(l).unwrap()
        };
        Adam::default().step(&mut m.store, &grads, 1e-2);
        assert_eq!(before, m.store.group_hash(GROUP_ENCODER));
        assert_ne!(dec_before, m.store.group_hash(GROUP_DECODER));
        assert!(m.freeze(&["nonexistent"]).is_err());
        m.store.unfreeze_all();
        assert!(m.store.iter().all(|(id, _)| !m.store.is_frozen(id)));
    }

    #[test]
    fn greedy_matches_teacher_forcing_on_its_own_output() {
        let m = FlatModel::new(tiny(), Scale::Bars2, 4).unwrap();
        let p = phrase(2);
        let z = m.encode(&p.melody, None).unwrap().mean();
        let out = m.decode_greedy(&[&z], &[None]).unwrap();
        // teacher forcing on the greedy output reproduces the greedy logits
        let tokens: Vec<usize> = out.melody[0].iter().map(|&t| t as usize).collect();
        let rhythm: Vec<usize> = out.rhythm[0].iter().map(|&t| t as usize).collect();
        let batch = SeqBatch {
            steps: 32,
            batch: 1,
            melody: tokens,
            rhythm,
            chroma: None,
        };
        let mut tape = Tape::new(&m.store);
        let (zp, zr) = LatentPair::stack(&[&z]).unwrap();
        let zp = tape.constant(zp);
        let zr = tape.constant(zr);
        let (ml, rl) = m.decoder.forward(&mut tape, zp, zr, &batch);
        for (a, b) in tape.value(ml).data.iter().zip(&out.melody_logits.data) {
            assert!((a - b).abs() < 1e-4);
        }
        for (a, b) in tape.value(rl).data.iter().zip(&out.rhythm_logits.data) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
