use rand::Rng;

use crate::error::{Error, Result};
use crate::numkit::nn::{positional_encoding, Conv1dLayer, LayerNorm, Linear};
use crate::numkit::tape::sigmoid_scalar;
use crate::numkit::{Tape, Tensor};

use super::{Snapshot, TTSConfig};

/// Multi-head scaled dot-product attention; records per-head weights.
struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    fn new<R: Rng>(rng: &mut R, dim: usize, heads: usize) -> Self {
        MultiHeadAttention {
            wq: Linear::new(rng, dim, dim),
            wk: Linear::new(rng, dim, dim),
            wv: Linear::new(rng, dim, dim),
            wo: Linear::new(rng, dim, dim),
            heads,
        }
    }

    /// `mask` is additive over scores [Tq, Tk] (0 or a large negative).
    fn forward(
        &self,
        tape: &Tape,
        q_in: &Tensor,
        kv_in: &Tensor,
        mask: Option<&Tensor>,
    ) -> (Tensor, Vec<Tensor>) {
        let dim = q_in.shape()[1];
        let head_dim = dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let q = self.wq.forward(tape, q_in);
        let k = self.wk.forward(tape, kv_in);
        let v = self.wv.forward(tape, kv_in);
        let mut outs = Vec::with_capacity(self.heads);
        let mut attns = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let qh = tape.slice_cols(&q, lo, hi);
            let kh = tape.slice_cols(&k, lo, hi);
            let vh = tape.slice_cols(&v, lo, hi);
            let mut scores = tape.scale(&tape.matmul(&qh, &tape.transpose(&kh)), scale);
            if let Some(m) = mask {
                scores = tape.add(&scores, m);
            }
            let attn = tape.softmax_rows(&scores);
            outs.push(tape.matmul(&attn, &vh));
            attns.push(attn);
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        let concat = tape.concat_cols(&refs);
        (self.wo.forward(tape, &concat), attns)
    }

    fn params(&self) -> Vec<Tensor> {
        let mut p = self.wq.params();
        p.extend(self.wk.params());
        p.extend(self.wv.params());
        p.extend(self.wo.params());
        p
    }

    fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{}.wq.w", prefix), self.wq.w.clone()),
            (format!("{}.wq.b", prefix), self.wq.b.clone()),
            (format!("{}.wk.w", prefix), self.wk.w.clone()),
            (format!("{}.wk.b", prefix), self.wk.b.clone()),
            (format!("{}.wv.w", prefix), self.wv.w.clone()),
            (format!("{}.wv.b", prefix), self.wv.b.clone()),
            (format!("{}.wo.w", prefix), self.wo.w.clone()),
            (format!("{}.wo.b", prefix), self.wo.b.clone()),
        ]
    }
}

struct FeedForward {
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    fn new<R: Rng>(rng: &mut R, dim: usize) -> Self {
        FeedForward { lin1: Linear::new(rng, dim, dim * 2), lin2: Linear::new(rng, dim * 2, dim) }
    }

    fn forward(&self, tape: &Tape, x: &Tensor) -> Tensor {
        self.lin2.forward(tape, &tape.relu(&self.lin1.forward(tape, x)))
    }

    fn params(&self) -> Vec<Tensor> {
        let mut p = self.lin1.params();
        p.extend(self.lin2.params());
        p
    }

    fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{}.ff1.w", prefix), self.lin1.w.clone()),
            (format!("{}.ff1.b", prefix), self.lin1.b.clone()),
            (format!("{}.ff2.w", prefix), self.lin2.w.clone()),
            (format!("{}.ff2.b", prefix), self.lin2.b.clone()),
        ]
    }
}

struct EncoderLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ff: FeedForward,
}

struct SpeakerModule {
    table: Tensor,
    style_tokens: Tensor,
    ref_proj: Linear,
}

const N_STYLE_TOKENS: usize = 4;

/// How synthesis identifies the voice for a multi-speaker model: a trained
/// speaker id plus reference frames for the style encoder.
#[derive(Debug, Clone)]
pub struct SpeakerRef {
    pub speaker_id: usize,
    pub reference_frames: Vec<f64>,
}

pub struct TeacherOutput {
    pub pre: Tensor,
    pub post: Tensor,
    pub stop_logits: Tensor,
    pub cross_attns: Vec<Tensor>,
    /// Style attention weights over the token bank, when speaker-conditioned.
    pub style_weights: Option<Tensor>,
}

/// Transformer encoder-decoder with a pre-net on previous-frame input, a
/// residual convolutional post-net, a stop head, and optional speaker
/// embedding + style tokens added to every encoder output.
pub struct TTSModel {
    pub config: TTSConfig,
    pub feature_dim: usize,
    pub n_phones: usize,
    pub n_speakers: usize,
    embed: Tensor,
    enc: Vec<EncoderLayer>,
    enc_ln: LayerNorm,
    prenet1: Linear,
    prenet2: Linear,
    dec: Vec<DecoderLayer>,
    dec_ln: LayerNorm,
    out_pre: Linear,
    stop_head: Linear,
    postnet1: Conv1dLayer,
    postnet2: Conv1dLayer,
    speaker: Option<SpeakerModule>,
}

impl TTSModel {
    /// `n_speakers > 1` enables the speaker table and style-token bank.
    pub fn new<R: Rng>(
        rng: &mut R,
        config: &TTSConfig,
        feature_dim: usize,
        n_phones: usize,
        n_speakers: usize,
    ) -> Result<TTSModel> {
        config.validate()?;
        let dim = config.model_dim;
        let kp = config.postnet_kernel / 2;
        let embed_data: Vec<f64> =
            (0..n_phones * dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let enc = (0..config.enc_layers)
            .map(|_| EncoderLayer {
                ln1: LayerNorm::new(dim),
                attn: MultiHeadAttention::new(rng, dim, config.heads),
                ln2: LayerNorm::new(dim),
                ff: FeedForward::new(rng, dim),
            })
            .collect();
        let dec = (0..config.dec_layers)
            .map(|_| DecoderLayer {
                ln1: LayerNorm::new(dim),
                self_attn: MultiHeadAttention::new(rng, dim, config.heads),
                ln2: LayerNorm::new(dim),
                cross_attn: MultiHeadAttention::new(rng, dim, config.heads),
                ln3: LayerNorm::new(dim),
                ff: FeedForward::new(rng, dim),
            })
            .collect();
        let speaker = if n_speakers > 1 {
            Some(SpeakerModule {
                table: Tensor::param(
                    vec![n_speakers, dim],
                    (0..n_speakers * dim).map(|_| rng.gen_range(-0.1..0.1)).collect(),
                ),
                style_tokens: Tensor::param(
                    vec![N_STYLE_TOKENS, dim],
                    (0..N_STYLE_TOKENS * dim).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                ),
                ref_proj: Linear::new(rng, feature_dim, dim),
            })
        } else {
            None
        };
        Ok(TTSModel {
            config: config.clone(),
            feature_dim,
            n_phones,
            n_speakers,
            embed: Tensor::param(vec![n_phones, dim], embed_data),
            enc,
            enc_ln: LayerNorm::new(dim),
            prenet1: Linear::new(rng, feature_dim, config.prenet_dim),
            prenet2: Linear::new(rng, config.prenet_dim, dim),
            dec,
            dec_ln: LayerNorm::new(dim),
            out_pre: Linear::new(rng, dim, feature_dim),
            stop_head: Linear::new(rng, dim, 1),
            postnet1: Conv1dLayer::new(rng, config.postnet_kernel, feature_dim, dim, 1, kp),
            postnet2: Conv1dLayer::new(rng, config.postnet_kernel, dim, feature_dim, 1, kp),
            speaker,
        })
    }

    pub fn is_multi_speaker(&self) -> bool {
        self.speaker.is_some()
    }

    /// Style vector: a learned projection of mean-pooled reference frames
    /// queries the token bank. Returns ([1, dim] style, [4] weights).
    fn style_vector(&self, tape: &Tape, reference_frames: &[f64]) -> Result<(Tensor, Tensor)> {
        let spk = self.speaker.as_ref().expect("style_vector on single-speaker model");
        let rows = reference_frames.len() / self.feature_dim;
        if rows == 0 {
            return Err(Error::Contract("speaker reference frames are empty".into()));
        }
        let mut mean = vec![0.0; self.feature_dim];
        for row in reference_frames.chunks(self.feature_dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= rows as f64);
        let q = spk.ref_proj.forward(tape, &Tensor::constant(vec![1, self.feature_dim], mean));
        let scale = 1.0 / (self.config.model_dim as f64).sqrt();
        let scores = tape.scale(&tape.matmul(&q, &tape.transpose(&spk.style_tokens)), scale);
        let weights = tape.softmax_rows(&scores);
        let style = tape.matmul(&weights, &spk.style_tokens);
        Ok((style, tape.reshape(&weights, &[N_STYLE_TOKENS])))
    }

    /// Encoder output [T_in, dim], with speaker + style conditioning added
    /// to every row for multi-speaker models.
    fn encode(
        &self,
        tape: &Tape,
        phones: &[usize],
        speaker: Option<&SpeakerRef>,
    ) -> Result<(Tensor, Option<Tensor>)> {
        if phones.is_empty() {
            return Err(Error::Contract("encode: empty phone sequence".into()));
        }
        for &p in phones {
            if p >= self.n_phones {
                return Err(Error::Contract(format!("encode: phone id {} out of range", p)));
            }
        }
        let t_in = phones.len();
        let mut x = tape.add(
            &tape.gather_rows(&self.embed, phones),
            &positional_encoding(t_in, self.config.model_dim),
        );
        for layer in &self.enc {
            let normed = layer.ln1.forward(tape, &x);
            let (a, _) = layer.attn.forward(tape, &normed, &normed, None);
            x = tape.add(&x, &a);
            let f = layer.ff.forward(tape, &layer.ln2.forward(tape, &x));
            x = tape.add(&x, &f);
        }
        let mut enc_out = self.enc_ln.forward(tape, &x);

        let mut style_weights = None;
        if let Some(spk_mod) = &self.speaker {
            let sref = speaker.ok_or_else(|| {
                Error::Contract("multi-speaker model requires a speaker reference".into())
            })?;
            if sref.speaker_id >= self.n_speakers {
                return Err(Error::Contract(format!(
                    "unknown speaker id {} (model has {})",
                    sref.speaker_id, self.n_speakers
                )));
            }
            let emb = tape.gather_rows(&spk_mod.table, &[sref.speaker_id]);
            let (style, weights) = self.style_vector(tape, &sref.reference_frames)?;
            let cond = tape.add(&emb, &style);
            let cond_rows = tape.gather_rows(&cond, &vec![0; t_in]);
            enc_out = tape.add(&enc_out, &cond_rows);
            style_weights = Some(weights);
        } else if speaker.is_some() && self.n_speakers <= 1 {
            // Single-speaker models ignore the reference.
        }
        Ok((enc_out, style_weights))
    }

    fn prenet(&self, tape: &Tape, frames_in: &Tensor) -> Tensor {
        let h = tape.relu(&self.prenet1.forward(tape, frames_in));
        tape.relu(&self.prenet2.forward(tape, &h))
    }

    fn causal_mask(t: usize) -> Tensor {
        let mut m = vec![0.0; t * t];
        for i in 0..t {
            for j in i + 1..t {
                m[i * t + j] = -1e30;
            }
        }
        Tensor::constant(vec![t, t], m)
    }

    /// Decoder over teacher-forced inputs [T, feature_dim] (already shifted:
    /// row t is the frame preceding output t). Returns hidden states and
    /// cross-attention matrices from every layer and head.
    fn decode(
        &self,
        tape: &Tape,
        dec_inputs: &Tensor,
        enc_out: &Tensor,
    ) -> (Tensor, Vec<Tensor>) {
        let t = dec_inputs.shape()[0];
        let mut x = tape.add(
            &self.prenet(tape, dec_inputs),
            &positional_encoding(t, self.config.model_dim),
        );
        let mask = Self::causal_mask(t);
        let mut cross_attns = Vec::new();
        for layer in &self.dec {
            let normed = layer.ln1.forward(tape, &x);
            let (a, _) = layer.self_attn.forward(tape, &normed, &normed, Some(&mask));
            x = tape.add(&x, &a);
            let normed = layer.ln2.forward(tape, &x);
            let (c, attns) = layer.cross_attn.forward(tape, &normed, enc_out, None);
            cross_attns.extend(attns);
            x = tape.add(&x, &c);
            let f = layer.ff.forward(tape, &layer.ln3.forward(tape, &x));
            x = tape.add(&x, &f);
        }
        (self.dec_ln.forward(tape, &x), cross_attns)
    }

    fn postnet(&self, tape: &Tape, pre: &Tensor) -> Tensor {
        let h = tape.relu(&self.postnet1.forward(tape, pre));
        let residual = self.postnet2.forward(tape, &h);
        tape.add(pre, &residual)
    }

    /// Teacher-forced pass over target frames [T x feature_dim].
    pub fn forward_teacher(
        &self,
        tape: &Tape,
        phones: &[usize],
        target_frames: &[f64],
        speaker: Option<&SpeakerRef>,
    ) -> Result<TeacherOutput> {
        let t = target_frames.len() / self.feature_dim;
        if t == 0 {
            return Err(Error::Contract("forward_teacher: empty target frames".into()));
        }
        let (enc_out, style_weights) = self.encode(tape, phones, speaker)?;
        // Shift right: decoder input t is frame t-1, with a zero first row.
        let mut shifted = vec![0.0; self.feature_dim];
        shifted.extend_from_slice(&target_frames[..(t - 1) * self.feature_dim]);
        let dec_in = Tensor::constant(vec![t, self.feature_dim], shifted);
        let (hidden, cross_attns) = self.decode(tape, &dec_in, &enc_out);
        let pre = self.out_pre.forward(tape, &hidden);
        let post = self.postnet(tape, &pre);
        let stop_logits = tape.reshape(&self.stop_head.forward(tape, &hidden), &[t]);
        Ok(TeacherOutput { pre, post, stop_logits, cross_attns, style_weights })
    }

    /// Autoregressive synthesis from a zero frame. Stops when the stop
    /// head fires (sigmoid >= stop_threshold) or at max_frames; the
    /// post-net is applied to the completed sequence.
    pub fn synthesize(
        &self,
        phones: &[usize],
        speaker: Option<&SpeakerRef>,
    ) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let (enc_out, _) = self.encode(&tape, phones, speaker)?;
        let mut generated: Vec<f64> = Vec::new();
        let mut t = 0;
        loop {
            let mut dec_in = vec![0.0; self.feature_dim];
            dec_in.extend_from_slice(&generated);
            let rows = t + 1;
            let dec_in = Tensor::constant(vec![rows, self.feature_dim], dec_in);
            let (hidden, _) = self.decode(&tape, &dec_in, &enc_out);
            let last = tape.slice_rows(&hidden, rows - 1, rows);
            let frame = self.out_pre.forward(&tape, &last);
            generated.extend_from_slice(&frame.data());
            let stop_logit = self.stop_head.forward(&tape, &last).item();
            t += 1;
            if sigmoid_scalar(stop_logit) >= self.config.stop_threshold || t >= self.config.max_frames
            {
                break;
            }
        }
        let pre = Tensor::constant(vec![t, self.feature_dim], generated);
        let post = self.postnet(&tape, &pre);
        Ok(post.to_vec())
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("embed".to_string(), self.embed.clone())];
        for (i, l) in self.enc.iter().enumerate() {
            let p = format!("enc.{}", i);
            out.push((format!("{}.ln1.gain", p), l.ln1.gain.clone()));
            out.push((format!("{}.ln1.bias", p), l.ln1.bias.clone()));
            out.extend(l.attn.named(&format!("{}.attn", p)));
            out.push((format!("{}.ln2.gain", p), l.ln2.gain.clone()));
            out.push((format!("{}.ln2.bias", p), l.ln2.bias.clone()));
            out.extend(l.ff.named(&p));
        }
        out.push(("enc_ln.gain".into(), self.enc_ln.gain.clone()));
        out.push(("enc_ln.bias".into(), self.enc_ln.bias.clone()));
        out.push(("prenet1.w".into(), self.prenet1.w.clone()));
        out.push(("prenet1.b".into(), self.prenet1.b.clone()));
        out.push(("prenet2.w".into(), self.prenet2.w.clone()));
        out.push(("prenet2.b".into(), self.prenet2.b.clone()));
        for (i, l) in self.dec.iter().enumerate() {
            let p = format!("dec.{}", i);
            out.push((format!("{}.ln1.gain", p), l.ln1.gain.clone()));
            out.push((format!("{}.ln1.bias", p), l.ln1.bias.clone()));
            out.extend(l.self_attn.named(&format!("{}.self", p)));
            out.push((format!("{}.ln2.gain", p), l.ln2.gain.clone()));
            out.push((format!("{}.ln2.bias", p), l.ln2.bias.clone()));
            out.extend(l.cross_attn.named(&format!("{}.cross", p)));
            out.push((format!("{}.ln3.gain", p), l.ln3.gain.clone()));
            out.push((format!("{}.ln3.bias", p), l.ln3.bias.clone()));
            out.extend(l.ff.named(&p));
        }
        out.push(("dec_ln.gain".into(), self.dec_ln.gain.clone()));
        out.push(("dec_ln.bias".into(), self.dec_ln.bias.clone()));
        out.push(("out_pre.w".into(), self.out_pre.w.clone()));
        out.push(("out_pre.b".into(), self.out_pre.b.clone()));
        out.push(("stop.w".into(), self.stop_head.w.clone()));
        out.push(("stop.b".into(), self.stop_head.b.clone()));
        out.push(("postnet1.k".into(), self.postnet1.k.clone()));
        out.push(("postnet1.b".into(), self.postnet1.b.clone()));
        out.push(("postnet2.k".into(), self.postnet2.k.clone()));
        out.push(("postnet2.b".into(), self.postnet2.b.clone()));
        if let Some(spk) = &self.speaker {
            out.push(("speaker.table".into(), spk.table.clone()));
            out.push(("speaker.style_tokens".into(), spk.style_tokens.clone()));
            out.push(("speaker.ref_proj.w".into(), spk.ref_proj.w.clone()));
            out.push(("speaker.ref_proj.b".into(), spk.ref_proj.b.clone()));
        }
        out
    }

    pub fn snapshot(&self) -> Snapshot {
        self.named_tensors().into_iter().map(|(n, t)| (n, t.to_vec())).collect()
    }

    pub fn restore(&self, snapshot: &Snapshot) -> Result<()> {
        for (name, tensor) in self.named_tensors() {
            let data = snapshot.get(&name).ok_or_else(|| {
                Error::Contract(format!("snapshot missing tensor '{}'", name))
            })?;
            if data.len() != tensor.numel() {
                return Err(Error::Contract(format!(
                    "snapshot tensor '{}' has {} elements vs {}",
                    name,
                    data.len(),
                    tensor.numel()
                )));
            }
            tensor.set_data(data);
        }
        Ok(())
    }

    /// Independent copy with identical weights.
    pub fn clone_model(&self) -> TTSModel {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let copy = TTSModel::new(
            &mut rng,
            &self.config,
            self.feature_dim,
            self.n_phones,
            self.n_speakers,
        )
        .expect("config already validated");
        copy.restore(&self.snapshot()).expect("same architecture");
        copy
    }
}
