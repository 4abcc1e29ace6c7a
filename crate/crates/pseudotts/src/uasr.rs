//! Adversarially trained phone recognizer: pseudo-labels the audio corpus
//! without paired data. The recognizer maps feature frames to stepwise
//! phone distributions; a convolutional critic tells its merged output
//! sequences apart from one-hot phonemized text.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::nn::{BatchNormTime, Conv1dLayer, Linear};
use crate::numkit::{argmax_rows, Adam, Tape, Tensor};
use crate::phonelm::NGramModel;
use crate::textproc;
use crate::toyworld::{Dataset, Inventory};

/// Recognizer frames-per-prediction window and hop.
pub const WINDOW: usize = 9;
pub const STRIDE: usize = 3;
/// Critic kernel width; two layers give a receptive field of 9.
const DISC_KERNEL: usize = 5;
const DISC_HIDDEN: usize = 64;
const LEAKY_SLOPE: f64 = 0.2;

/// Stepwise phone distributions (or logits): row-major [rows x cols].
#[derive(Debug, Clone, PartialEq)]
pub struct Emissions {
    pub data: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Emissions {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn argmaxes(&self) -> Vec<usize> {
        argmax_rows(&self.data, self.cols)
    }
}

/// Batch-norm over time, a linear projection, and one strided convolution
/// producing per-step logits over phones + SIL.
pub struct RecognizerNet {
    pub bn: BatchNormTime,
    pub lin: Linear,
    pub conv: Conv1dLayer,
    pub feature_dim: usize,
    pub hidden: usize,
    pub n_emit: usize,
}

impl RecognizerNet {
    pub fn new<R: Rng>(rng: &mut R, feature_dim: usize, hidden: usize, n_emit: usize) -> Self {
        let conv = Conv1dLayer::new(rng, WINDOW, hidden, n_emit, STRIDE, 0);
        // Sharpen the output layer at init: near-uniform starting logits
        // collapse into giant argmax runs (adjacent windows share 6 of 9
        // frames), which degenerates merging before training can start.
        let sharpened: Vec<f64> = conv.k.data().iter().map(|v| v * 4.0).collect();
        conv.k.set_data(&sharpened);
        RecognizerNet {
            bn: BatchNormTime::new(feature_dim),
            lin: Linear::new(rng, feature_dim, hidden),
            conv,
            feature_dim,
            hidden,
            n_emit,
        }
    }

    /// Logits [floor((T-9)/3)+1, n_emit]. Caller guarantees T >= 9.
    pub fn forward_logits(&self, tape: &Tape, frames: &Tensor, training: bool) -> Tensor {
        let h = self.bn.forward(tape, frames, training);
        let h = self.lin.forward(tape, &h);
        self.conv.forward(tape, &h)
    }

    /// Batched training forward: batch-norm statistics are computed over
    /// all frames of the batch jointly, then each utterance runs through
    /// the projection and convolution separately.
    pub fn forward_logits_batch(&self, tape: &Tape, frames: &[Tensor]) -> Vec<Tensor> {
        let refs: Vec<&Tensor> = frames.iter().collect();
        let all = tape.concat_rows(&refs);
        let normed = self.bn.forward(tape, &all, true);
        let mut out = Vec::with_capacity(frames.len());
        let mut offset = 0;
        for f in frames {
            let rows = f.shape()[0];
            let slice = tape.slice_rows(&normed, offset, offset + rows);
            let h = self.lin.forward(tape, &slice);
            out.push(self.conv.forward(tape, &h));
            offset += rows;
        }
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.bn.params();
        p.extend(self.lin.params());
        p.extend(self.conv.params());
        p
    }

    /// Every tensor that belongs in a checkpoint, including BN statistics.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        vec![
            ("bn.gain".into(), self.bn.gain.clone()),
            ("bn.bias".into(), self.bn.bias.clone()),
            ("bn.running_mean".into(), self.bn.running_mean.clone()),
            ("bn.running_var".into(), self.bn.running_var.clone()),
            ("lin.w".into(), self.lin.w.clone()),
            ("lin.b".into(), self.lin.b.clone()),
            ("conv.k".into(), self.conv.k.clone()),
            ("conv.b".into(), self.conv.b.clone()),
        ]
    }

    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.named_tensors().iter().map(|(_, t)| t.to_vec()).collect()
    }

    pub fn restore(&self, snapshot: &[Vec<f64>]) {
        for ((_, t), values) in self.named_tensors().iter().zip(snapshot) {
            t.set_data(values);
        }
    }
}

/// Anything that maps a distribution sequence to a scalar realness score.
pub trait Critic {
    fn score(&self, tape: &Tape, x: &Tensor) -> Tensor;
}

/// Two same-length convolutions (kernel 5, stride 1) around a leaky
/// rectifier, with the final single channel mean-pooled to a scalar.
pub struct DiscriminatorNet {
    pub conv1: Conv1dLayer,
    pub conv2: Conv1dLayer,
}

impl DiscriminatorNet {
    pub fn new<R: Rng>(rng: &mut R, n_emit: usize) -> Self {
        DiscriminatorNet {
            conv1: Conv1dLayer::new(rng, DISC_KERNEL, n_emit, DISC_HIDDEN, 1, DISC_KERNEL / 2),
            conv2: Conv1dLayer::new(rng, DISC_KERNEL, DISC_HIDDEN, 1, 1, DISC_KERNEL / 2),
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.conv1.params();
        p.extend(self.conv2.params());
        p
    }
}

impl Critic for DiscriminatorNet {
    fn score(&self, tape: &Tape, x: &Tensor) -> Tensor {
        assert!(
            x.shape()[0] >= WINDOW,
            "discriminator input length {} below receptive field {}",
            x.shape()[0],
            WINDOW
        );
        let h = self.conv1.forward(tape, x);
        let h = tape.leaky_relu(&h, LEAKY_SLOPE);
        let h = self.conv2.forward(tape, &h);
        tape.mean_all(&h)
    }
}

/// Repeat the final frame until the sequence reaches `min_rows`; the
/// documented padding policy for inputs shorter than the window.
pub fn pad_frames_min(frames: &[f64], dim: usize, min_rows: usize) -> Vec<f64> {
    let rows = frames.len() / dim;
    if rows >= min_rows {
        return frames.to_vec();
    }
    assert!(rows > 0, "pad_frames_min: empty input");
    let mut out = frames.to_vec();
    let last = frames[(rows - 1) * dim..rows * dim].to_vec();
    for _ in rows..min_rows {
        out.extend_from_slice(&last);
    }
    out
}

/// Inference-mode forward pass: stepwise phone distributions.
pub fn recognize(net: &RecognizerNet, frames: &[f64], dim: usize) -> Result<Emissions> {
    let rows = frames.len() / dim;
    if rows < WINDOW {
        return Err(Error::Contract(format!(
            "recognize: {} frames but at least {} required; pad by repeating the last frame (pad_frames_min)",
            rows, WINDOW
        )));
    }
    let tape = Tape::new();
    let x = Tensor::constant(vec![rows, dim], frames.to_vec());
    let logits = net.forward_logits(&tape, &x, false);
    let dists = tape.softmax_rows(&logits);
    Ok(Emissions {
        rows: dists.shape()[0],
        cols: dists.shape()[1],
        data: dists.to_vec(),
    })
}

/// One surviving index per run of equal argmaxes, chosen uniformly.
pub fn merge_indices<R: Rng>(argmaxes: &[usize], rng: &mut R) -> Vec<usize> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < argmaxes.len() {
        let mut end = start + 1;
        while end < argmaxes.len() && argmaxes[end] == argmaxes[start] {
            end += 1;
        }
        out.push(rng.gen_range(start..end));
        start = end;
    }
    out
}

/// Collapse consecutive equal-argmax steps, keeping one full distribution
/// per run by random selection.
pub fn merge_repeats<R: Rng>(dists: &Emissions, rng: &mut R) -> Emissions {
    let idx = merge_indices(&dists.argmaxes(), rng);
    let mut data = Vec::with_capacity(idx.len() * dists.cols);
    for &i in &idx {
        data.extend_from_slice(dists.row(i));
    }
    Emissions { data, rows: idx.len(), cols: dists.cols }
}

/// Mean squared distance between consecutive logit rows; 0 for length 1.
pub fn smoothness_penalty(tape: &Tape, logits: &Tensor) -> Tensor {
    let t = logits.shape()[0];
    if t < 2 {
        return Tensor::scalar(0.0);
    }
    let a = tape.slice_rows(logits, 1, t);
    let b = tape.slice_rows(logits, 0, t - 1);
    let d = tape.sub(&a, &b);
    tape.scale(&tape.sum_all(&tape.mul(&d, &d)), 1.0 / (t - 1) as f64)
}

/// log V minus the entropy of the batch-mean distribution, in nats.
pub fn diversity_loss(tape: &Tape, dist_seqs: &[&Tensor]) -> Tensor {
    assert!(!dist_seqs.is_empty(), "diversity_loss: empty batch");
    let v = dist_seqs[0].shape()[1];
    let all = tape.concat_rows(dist_seqs);
    let rows = all.shape()[0] as f64;
    let mean = tape.scale(&tape.col_sum(&all), 1.0 / rows);
    let plnp = tape.mul(&mean, &tape.ln(&mean));
    tape.add_scalar(&tape.sum_all(&plnp), (v as f64).ln())
}

/// Mean over real/fake pairs of (||grad_x critic(interp)|| - 1)^2, where
/// interp is a uniform random convex combination of the pair. Pairs must be
/// pre-aligned to a shared shape. Differentiable w.r.t. critic parameters.
pub fn gradient_penalty<C: Critic, R: Rng>(
    tape: &Tape,
    critic: &C,
    reals: &[Tensor],
    fakes: &[Tensor],
    rng: &mut R,
) -> Result<Tensor> {
    if reals.is_empty() || reals.len() != fakes.len() {
        return Err(Error::Contract(format!(
            "gradient_penalty: {} real vs {} fake sequences",
            reals.len(),
            fakes.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for (r, f) in reals.iter().zip(fakes) {
        if r.shape() != f.shape() {
            return Err(Error::Contract(format!(
                "gradient_penalty: pair shapes {:?} vs {:?}",
                r.shape(),
                f.shape()
            )));
        }
        let alpha: f64 = rng.gen_range(0.0..1.0);
        let mixed: Vec<f64> = r
            .data()
            .iter()
            .zip(f.data().iter())
            .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
            .collect();
        let x = Tensor::param(r.shape().to_vec(), mixed);
        let score = critic.score(tape, &x);
        let g = tape.grad(&score, &[&x])?.remove(0);
        // Tiny floor keeps the norm's gradient finite when g vanishes.
        let norm = tape.sqrt(&tape.add_scalar(&tape.sum_all(&tape.mul(&g, &g)), 1e-24));
        let d = tape.add_scalar(&norm, -1.0);
        let pen = tape.mul(&d, &d);
        total = Some(match total {
            Some(t) => tape.add(&t, &pen),
            None => pen,
        });
    }
    Ok(tape.scale(&total.unwrap(), 1.0 / reals.len() as f64))
}

/// Perplexity under the phone LM divided by inventory usage (distinct
/// non-silence phones over the phone inventory); lower is better. Returns
/// +infinity with the warning flag set when every transcript is empty.
pub fn selection_metric(
    transcripts: &[Vec<usize>],
    lm: &NGramModel,
    inventory: Inventory,
) -> Result<(f64, bool)> {
    if transcripts.is_empty() {
        return Err(Error::Contract("selection_metric: no transcripts".into()));
    }
    if transcripts.iter().all(|t| t.is_empty()) {
        return Ok((f64::INFINITY, true));
    }
    let mut seen = vec![false; inventory.n_phones];
    for t in transcripts {
        for &p in t {
            if p < inventory.n_phones {
                seen[p] = true;
            }
        }
    }
    let usage = seen.iter().filter(|&&s| s).count() as f64 / inventory.n_phones as f64;
    let ppl = lm.perplexity(transcripts)?;
    if usage == 0.0 {
        return Ok((f64::INFINITY, false));
    }
    Ok((ppl / usage, false))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub lambda_gp: f64,
    pub gamma_sm: f64,
    pub eta_div: f64,
    pub steps: usize,
    pub batch: usize,
    pub gen_lr: f64,
    pub disc_lr: f64,
    pub selection_interval: usize,
    /// Recognizer hidden width.
    pub hidden: usize,
    /// Leading audio utterances greedily decoded for the selection metric.
    pub selection_subset: usize,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> GanConfig {
        GanConfig {
            lambda_gp: 1.5,
            gamma_sm: 0.5,
            eta_div: 2.0,
            steps: 3000,
            batch: 16,
            gen_lr: 1e-3,
            disc_lr: 3e-4,
            selection_interval: 100,
            hidden: 64,
            selection_subset: 32,
            seed: 1,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        let named = |field: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("invalid gan config field: {}", field)))
            }
        };
        named("lambda_gp", self.lambda_gp >= 0.0)?;
        named("gamma_sm", self.gamma_sm >= 0.0)?;
        named("eta_div", self.eta_div >= 0.0)?;
        named("steps", self.steps >= 1)?;
        named("batch", self.batch >= 1)?;
        named("gen_lr", self.gen_lr > 0.0)?;
        named("disc_lr", self.disc_lr > 0.0)?;
        named("selection_interval", self.selection_interval >= 1)?;
        named("hidden", self.hidden >= 1)?;
        named("selection_subset", self.selection_subset >= 1)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub adv: f64,
    pub smooth: f64,
    pub div: f64,
    pub gp: f64,
    pub selection: Option<f64>,
}

/// Crop `target` rows starting at `offset`, or pad by repeating the last
/// row when the sequence is shorter than `target`.
fn crop_or_pad_rows(data: &[f64], cols: usize, offset: usize, target: usize) -> Vec<f64> {
    let rows = data.len() / cols;
    if rows >= target {
        return data[offset * cols..(offset + target) * cols].to_vec();
    }
    pad_frames_min(data, cols, target)
}

fn one_hot(seq: &[usize], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; seq.len() * n];
    for (i, &s) in seq.iter().enumerate() {
        out[i * n + s] = 1.0;
    }
    out
}

/// Extend a taped sequence to `target` rows by repeating its last row
/// (differentiable), or truncate to `target`.
fn tape_fit_rows(tape: &Tape, x: &Tensor, target: usize) -> Tensor {
    let rows = x.shape()[0];
    if rows == target {
        x.clone()
    } else if rows > target {
        tape.slice_rows(x, 0, target)
    } else {
        let mut idx: Vec<usize> = (0..rows).collect();
        idx.resize(target, rows - 1);
        tape.gather_rows(x, &idx)
    }
}

fn check_finite(step: usize, name: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Diverged { step, detail: format!("{} is {}", name, value) })
    }
}

/// Greedy transcripts (merged argmaxes, silences kept) of the selection
/// subset, scored with the unsupervised metric.
fn selection_score(
    net: &RecognizerNet,
    dataset: &Dataset,
    lm: &NGramModel,
    subset: usize,
) -> Result<f64> {
    let inv = dataset.inventory();
    let dim = dataset.config.feature_dim;
    let n = subset.min(dataset.audio_train.len());
    let mut transcripts = Vec::with_capacity(n);
    for utt in &dataset.audio_train[..n] {
        let frames = pad_frames_min(&utt.frames, dim, WINDOW);
        let dists = recognize(net, &frames, dim)?;
        // Greedy: merge runs, keep every symbol including SIL.
        let argmaxes = dists.argmaxes();
        let mut merged = Vec::new();
        for &a in &argmaxes {
            if merged.last() != Some(&a) {
                merged.push(a);
            }
        }
        transcripts.push(merged);
    }
    let (score, _) = selection_metric(&transcripts, lm, inv)?;
    Ok(score)
}

#[derive(Serialize)]
struct CkptMeta {
    format_version: u32,
    step: usize,
    d_loss: f64,
    g_loss: f64,
    selection_metric: f64,
    config_hash: String,
}

/// Alternating adversarial training. Returns the checkpoint with the best
/// (lowest) selection metric and the full loss history.
pub fn gan_train(
    dataset: &Dataset,
    lm: &NGramModel,
    config: &GanConfig,
    ckpt_dir: Option<&Path>,
) -> Result<(RecognizerNet, Vec<StepRecord>)> {
    config.validate()?;
    let inv = dataset.inventory();
    let dim = dataset.config.feature_dim;
    let n_emit = inv.n_emit();
    let config_hash = crate::util::hash_canonical(config)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let net = RecognizerNet::new(&mut rng, dim, config.hidden, n_emit);
    let disc = DiscriminatorNet::new(&mut rng, n_emit);
    let gen_params = net.params();
    let disc_params = disc.params();
    let mut gen_opt = Adam::new(&gen_params, config.gen_lr, 0.5, 0.98, 1e-8);
    let mut disc_opt = Adam::new(&disc_params, config.disc_lr, 0.5, 0.98, 1e-8);

    let mut history = Vec::with_capacity(config.steps);
    let mut snapshots: Vec<(usize, f64, Vec<Vec<f64>>)> = Vec::new();

    for step in 0..config.steps {
        // ── batch assembly ──────────────────────────────────────────
        let gen_tape = Tape::new();
        let frame_tensors: Vec<Tensor> = (0..config.batch)
            .map(|_| {
                let utt = &dataset.audio_train[rng.gen_range(0..dataset.audio_train.len())];
                let frames = pad_frames_min(&utt.frames, dim, WINDOW);
                let rows = frames.len() / dim;
                Tensor::constant(vec![rows, dim], frames)
            })
            .collect();
        let logits_taped = net.forward_logits_batch(&gen_tape, &frame_tensors);
        let mut fakes_taped = Vec::with_capacity(config.batch);
        let mut dists_taped = Vec::with_capacity(config.batch);
        for logits in &logits_taped {
            let dists = gen_tape.softmax_rows(logits);
            let idx = merge_indices(&argmax_rows(&dists.data(), n_emit), &mut rng);
            let merged = gen_tape.gather_rows(&dists, &idx);
            dists_taped.push(dists);
            fakes_taped.push(merged);
        }

        let mut reals = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            let sent = &dataset.text_train[rng.gen_range(0..dataset.text_train.len())];
            let groups = textproc::phonemize_words(sent, &dataset.lexicon)?;
            let phones = textproc::insert_silences(
                &groups,
                inv.sil(),
                dataset.config.p_sil_between_words,
                &mut rng,
            );
            reals.push(phones);
        }

        // Length alignment: pair rank-by-length so truncation stays small
        // and both sides usually keep their boundary silences. Sequences
        // stay head-anchored; leading silence is the strongest early cue.
        let mut real_order: Vec<usize> = (0..config.batch).collect();
        real_order.sort_by_key(|&i| (reals[i].len(), i));
        let mut fake_order: Vec<usize> = (0..config.batch).collect();
        fake_order.sort_by_key(|&i| (fakes_taped[i].shape()[0], i));
        let mut pair_of_fake = vec![0usize; config.batch];
        for (r, f) in real_order.iter().zip(&fake_order) {
            pair_of_fake[*f] = *r;
        }
        let targets: Vec<usize> = (0..config.batch)
            .map(|f| {
                reals[pair_of_fake[f]]
                    .len()
                    .min(fakes_taped[f].shape()[0])
                    .max(WINDOW)
            })
            .collect();
        let real_offsets = vec![0usize; config.batch];
        let fake_offsets = vec![0usize; config.batch];

        // ── discriminator update (fakes detached) ───────────────────
        let disc_tape = Tape::new();
        let mut d_real_sum: Option<Tensor> = None;
        let mut d_fake_sum: Option<Tensor> = None;
        let mut real_tensors = Vec::with_capacity(config.batch);
        let mut fake_tensors = Vec::with_capacity(config.batch);
        for i in 0..config.batch {
            let target = targets[i];
            let rhot = one_hot(&reals[pair_of_fake[i]], n_emit);
            let rdata = crop_or_pad_rows(&rhot, n_emit, real_offsets[i], target);
            let real = Tensor::constant(vec![target, n_emit], rdata);
            let fdata = crop_or_pad_rows(
                &fakes_taped[i].data(),
                n_emit,
                fake_offsets[i],
                target,
            );
            let fake = Tensor::constant(vec![target, n_emit], fdata);
            let dr = disc.score(&disc_tape, &real);
            let df = disc.score(&disc_tape, &fake);
            d_real_sum = Some(match d_real_sum {
                Some(t) => disc_tape.add(&t, &disc_tape.softplus(&disc_tape.scale(&dr, -1.0))),
                None => disc_tape.softplus(&disc_tape.scale(&dr, -1.0)),
            });
            d_fake_sum = Some(match d_fake_sum {
                Some(t) => disc_tape.add(&t, &disc_tape.softplus(&df)),
                None => disc_tape.softplus(&df),
            });
            real_tensors.push(real);
            fake_tensors.push(fake);
        }
        let inv_b = 1.0 / config.batch as f64;
        let d_adv = disc_tape.scale(
            &disc_tape.add(&d_real_sum.unwrap(), &d_fake_sum.unwrap()),
            inv_b,
        );
        let gp = gradient_penalty(&disc_tape, &disc, &real_tensors, &fake_tensors, &mut rng)?;
        let d_loss = disc_tape.add(&d_adv, &disc_tape.scale(&gp, config.lambda_gp));
        let d_loss_v = check_finite(step, "discriminator loss", d_loss.item())?;
        let gp_v = gp.item();
        disc_tape.backward(&d_loss)?;
        disc_opt.step(&disc_params)?;

        // ── generator update (against the refreshed critic) ─────────
        let mut g_adv_sum: Option<Tensor> = None;
        let mut smooth_sum: Option<Tensor> = None;
        for i in 0..config.batch {
            let rows = fakes_taped[i].shape()[0];
            let fitted = if rows > targets[i] {
                gen_tape.slice_rows(&fakes_taped[i], fake_offsets[i], fake_offsets[i] + targets[i])
            } else {
                tape_fit_rows(&gen_tape, &fakes_taped[i], targets[i])
            };
            let df = disc.score(&gen_tape, &fitted);
            let adv = gen_tape.softplus(&gen_tape.scale(&df, -1.0));
            g_adv_sum = Some(match g_adv_sum {
                Some(t) => gen_tape.add(&t, &adv),
                None => adv,
            });
            let sm = smoothness_penalty(&gen_tape, &logits_taped[i]);
            smooth_sum = Some(match smooth_sum {
                Some(t) => gen_tape.add(&t, &sm),
                None => sm,
            });
        }
        let g_adv = gen_tape.scale(&g_adv_sum.unwrap(), inv_b);
        let smooth = gen_tape.scale(&smooth_sum.unwrap(), inv_b);
        let dist_refs: Vec<&Tensor> = dists_taped.iter().collect();
        let div = diversity_loss(&gen_tape, &dist_refs);
        let g_loss = gen_tape.add(
            &gen_tape.add(&g_adv, &gen_tape.scale(&smooth, config.gamma_sm)),
            &gen_tape.scale(&div, config.eta_div),
        );
        let g_loss_v = check_finite(step, "generator loss", g_loss.item())?;
        gen_tape.backward(&g_loss)?;
        gen_opt.step(&gen_params)?;
        // The generator pass also deposited gradients on critic parameters.
        crate::numkit::zero_grads(&disc_params);

        // ── selection + checkpointing ───────────────────────────────
        let mut selection = None;
        if (step + 1) % config.selection_interval == 0 || step + 1 == config.steps {
            let score = selection_score(&net, dataset, lm, config.selection_subset)?;
            selection = Some(score);
            snapshots.push((step + 1, score, net.snapshot()));
            if let Some(dir) = ckpt_dir {
                let ckpt = dir.join(format!("uasr-step-{}.ckpt", step + 1));
                crate::numkit::io::save_checkpoint(&ckpt, &net.named_tensors())?;
                let meta = CkptMeta {
                    format_version: crate::toyworld::FORMAT_VERSION,
                    step: step + 1,
                    d_loss: d_loss_v,
                    g_loss: g_loss_v,
                    selection_metric: score,
                    config_hash: config_hash.clone(),
                };
                std::fs::write(ckpt.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
            }
        }

        history.push(StepRecord {
            step: step + 1,
            d_loss: d_loss_v,
            g_loss: g_loss_v,
            adv: g_adv.item(),
            smooth: smooth.item(),
            div: div.item(),
            gp: gp_v,
            selection,
        });
    }

    // Restore the snapshot with the best (lowest) metric; earliest wins ties.
    let best = snapshots
        .iter()
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
        .expect("at least the final step is snapshotted");
    net.restore(&best.2);
    Ok((net, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phonelm::train_lm;
    use crate::toyworld::{build_world, WorldConfig};

    fn tiny_world(seed: u64) -> Dataset {
        build_world(&WorldConfig {
            n_audio_utts: 12,
            n_text_sents: 20,
            n_test_utts: 4,
            seed,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    fn tiny_lm(ds: &Dataset) -> NGramModel {
        let inv = ds.inventory();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seqs: Vec<Vec<usize>> = ds
            .text_train
            .iter()
            .map(|s| {
                let groups = textproc::phonemize_words(s, &ds.lexicon).unwrap();
                textproc::insert_silences(&groups, inv.sil(), 0.5, &mut rng)
            })
            .collect();
        train_lm(&seqs, 3, 0.1, None, inv).unwrap()
    }

    #[test]
    fn recognize_shapes_and_determinism() {
        let ds = tiny_world(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = RecognizerNet::new(&mut rng, 16, 32, ds.inventory().n_emit());

        let frames9 = vec![0.1; 9 * 16];
        let e = recognize(&net, &frames9, 16).unwrap();
        assert_eq!((e.rows, e.cols), (1, 9));
        assert!((e.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let frames15 = vec![0.1; 15 * 16];
        let e = recognize(&net, &frames15, 16).unwrap();
        assert_eq!(e.rows, 3);

        let again = recognize(&net, &frames15, 16).unwrap();
        assert_eq!(e, again);
    }

    #[test]
    fn recognize_short_input_instructs_padding() {
        let ds = tiny_world(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = RecognizerNet::new(&mut rng, 16, 32, ds.inventory().n_emit());
        let err = recognize(&net, &vec![0.0; 5 * 16], 16).unwrap_err().to_string();
        assert!(err.contains("pad"), "{}", err);

        let padded = pad_frames_min(&vec![0.25; 5 * 16], 16, 9);
        assert_eq!(padded.len(), 9 * 16);
        assert!(recognize(&net, &padded, 16).is_ok());
    }

    #[test]
    fn merge_collapses_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // argmax pattern [a, a, b]
        let dists = Emissions {
            data: vec![0.8, 0.2, 0.7, 0.3, 0.1, 0.9],
            rows: 3,
            cols: 2,
        };
        let merged = merge_repeats(&dists, &mut rng);
        assert_eq!(merged.rows, 2);
        assert_eq!(merged.argmaxes(), vec![0, 1]);

        // already collapsed input is identity
        let dists = Emissions { data: vec![0.9, 0.1, 0.1, 0.9], rows: 2, cols: 2 };
        let merged = merge_repeats(&dists, &mut rng);
        assert_eq!(merged.data, vec![0.9, 0.1, 0.1, 0.9]);

        // all-same argmax collapses to one element
        let dists = Emissions { data: vec![0.9, 0.1, 0.8, 0.2, 0.7, 0.3], rows: 3, cols: 2 };
        assert_eq!(merge_repeats(&dists, &mut rng).rows, 1);
    }

    #[test]
    fn merge_never_leaves_adjacent_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let n = rng.gen_range(1..30);
            let argmaxes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let idx = merge_indices(&argmaxes, &mut rng);
            let merged: Vec<usize> = idx.iter().map(|&i| argmaxes[i]).collect();
            for w in merged.windows(2) {
                assert_ne!(w[0], w[1]);
            }
        }
    }

    #[test]
    fn merge_selection_is_uniform_over_run_members() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut first = 0usize;
        for _ in 0..10_000 {
            let idx = merge_indices(&[7, 7], &mut rng);
            assert_eq!(idx.len(), 1);
            if idx[0] == 0 {
                first += 1;
            }
        }
        // binomial(10000, .5): 3 sigma = 150
        assert!((first as f64 - 5000.0).abs() <= 150.0, "first chosen {} times", first);
    }

    #[test]
    fn smoothness_examples() {
        let tape = Tape::new();
        let constant = Tensor::constant(vec![3, 4], vec![0.7; 12]);
        assert_eq!(smoothness_penalty(&tape, &constant).item(), 0.0);

        let mut two = vec![0.5; 8];
        two[4] += 0.3; // second step differs by delta in one coordinate
        let t = Tensor::constant(vec![2, 4], two);
        assert!((smoothness_penalty(&tape, &t).item() - 0.09).abs() < 1e-12);

        let single = Tensor::constant(vec![1, 4], vec![1.0; 4]);
        assert_eq!(smoothness_penalty(&tape, &single).item(), 0.0);
    }

    #[test]
    fn diversity_examples() {
        let tape = Tape::new();
        // all mass on one phone -> log V
        let peaked = Tensor::constant(vec![4, 3], vec![1.0, 0.0, 0.0].repeat(4));
        let loss = diversity_loss(&tape, &[&peaked]).item();
        assert!((loss - 3f64.ln()).abs() < 1e-9);

        // uniform mean -> 0
        let uniform = Tensor::constant(vec![2, 4], vec![0.25; 8]);
        assert!(diversity_loss(&tape, &[&uniform]).item().abs() < 1e-12);

        // two-phone inventory, mean (0.75, 0.25)
        let a = Tensor::constant(vec![1, 2], vec![1.0, 0.0]);
        let b = Tensor::constant(vec![1, 2], vec![0.5, 0.5]);
        let loss = diversity_loss(&tape, &[&a, &b]).item();
        let expected = 2f64.ln() - (-(0.75f64.ln() * 0.75 + 0.25f64.ln() * 0.25));
        assert!((loss - expected).abs() < 1e-6, "{} vs {}", loss, expected);
        assert!((loss - 0.1308).abs() < 5e-4);
    }

    #[test]
    fn diversity_bounds_hold_on_random_batches() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let rows = rng.gen_range(1..6);
            let v = rng.gen_range(2..6);
            let mut data = Vec::new();
            for _ in 0..rows {
                let mut row: Vec<f64> = (0..v).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= s);
                data.extend(row);
            }
            let t = Tensor::constant(vec![rows, v], data);
            let loss = diversity_loss(&tape, &[&t]).item();
            assert!(loss >= -1e-12 && loss <= (v as f64).ln() + 1e-12);
        }
    }

    struct LinearCritic {
        w: Tensor,
    }

    impl Critic for LinearCritic {
        fn score(&self, tape: &Tape, x: &Tensor) -> Tensor {
            tape.sum_all(&tape.mul(x, &self.w))
        }
    }

    struct ConstantCritic;

    impl Critic for ConstantCritic {
        fn score(&self, _tape: &Tape, _x: &Tensor) -> Tensor {
            Tensor::scalar(3.0)
        }
    }

    #[test]
    fn unit_norm_linear_critic_has_zero_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let rows = rng.gen_range(9..14);
            let cols = 4;
            let mut w: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm: f64 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            w.iter_mut().for_each(|v| *v /= norm);
            let critic = LinearCritic { w: Tensor::constant(vec![rows, cols], w) };
            let real: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(0.0..1.0)).collect();
            let fake: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(0.0..1.0)).collect();
            let tape = Tape::new();
            let pen = gradient_penalty(
                &tape,
                &critic,
                &[Tensor::constant(vec![rows, cols], real)],
                &[Tensor::constant(vec![rows, cols], fake)],
                &mut rng,
            )
            .unwrap();
            assert!(pen.item() < 1e-10, "penalty {}", pen.item());
        }
    }

    #[test]
    fn constant_critic_has_unit_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tape = Tape::new();
        let r = Tensor::constant(vec![9, 3], vec![0.5; 27]);
        let f = Tensor::constant(vec![9, 3], vec![0.1; 27]);
        let pen = gradient_penalty(&tape, &ConstantCritic, &[r], &[f], &mut rng).unwrap();
        assert!((pen.item() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gradient_penalty_is_seed_deterministic() {
        let ds = tiny_world(2);
        let n_emit = ds.inventory().n_emit();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let disc = DiscriminatorNet::new(&mut rng, n_emit);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tape = Tape::new();
            let r = Tensor::constant(vec![10, n_emit], vec![0.3; 10 * n_emit]);
            let f = Tensor::constant(vec![10, n_emit], vec![0.6; 10 * n_emit]);
            gradient_penalty(&tape, &disc, &[r], &[f], &mut rng).unwrap().item()
        };
        assert_eq!(run(42).to_bits(), run(42).to_bits());
    }

    #[test]
    fn gradient_penalty_gradients_match_finite_differences() {
        // d penalty / d critic-weight must follow the double-backward path.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let rows = 9;
        let cols = 3;
        let real: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(0.0..1.0)).collect();
        let fake: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(0.0..1.0)).collect();
        let w0: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-0.8..0.8)).collect();

        let eval = |w: &Tensor, with_grad: bool| -> (f64, Vec<f64>) {
            let tape = Tape::new();
            // Quadratic critic so the penalty actually depends on w.
            let critic = QuadCritic { w: w.clone() };
            let r = Tensor::constant(vec![rows, cols], real.clone());
            let f = Tensor::constant(vec![rows, cols], fake.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let pen = gradient_penalty(&tape, &critic, &[r], &[f], &mut rng).unwrap();
            let v = pen.item();
            if with_grad {
                tape.backward(&pen).unwrap();
                (v, w.grad_or_zeros())
            } else {
                (v, vec![])
            }
        };

        struct QuadCritic {
            w: Tensor,
        }
        impl Critic for QuadCritic {
            fn score(&self, tape: &Tape, x: &Tensor) -> Tensor {
                let wx = tape.mul(x, &self.w);
                tape.add(&tape.sum_all(&tape.mul(&wx, x)), &tape.sum_all(&wx))
            }
        }

        let w = Tensor::param(vec![rows, cols], w0.clone());
        let (_, g_auto) = eval(&w, true);
        let eps = 1e-6;
        for i in (0..rows * cols).step_by(7) {
            let mut wp = w0.clone();
            wp[i] += eps;
            let mut wm = w0.clone();
            wm[i] -= eps;
            let (vp, _) = eval(&Tensor::constant(vec![rows, cols], wp), false);
            let (vm, _) = eval(&Tensor::constant(vec![rows, cols], wm), false);
            let fd = (vp - vm) / (2.0 * eps);
            assert!(
                (g_auto[i] - fd).abs() / fd.abs().max(1.0) < 1e-4,
                "w[{}]: auto {} vs fd {}",
                i,
                g_auto[i],
                fd
            );
        }
    }

    #[test]
    fn selection_metric_examples() {
        let ds = tiny_world(3);
        let lm = tiny_lm(&ds);
        let inv = ds.inventory();

        // Full-usage transcripts score exactly their perplexity.
        let mut transcripts: Vec<Vec<usize>> = vec![(0..inv.n_phones).collect()];
        transcripts.push(vec![0, 1]);
        let (score, warn) = selection_metric(&transcripts, &lm, inv).unwrap();
        assert!(!warn);
        let ppl = lm.perplexity(&transcripts).unwrap();
        assert!((score - ppl).abs() < 1e-12);

        // Half usage doubles the metric.
        let half: Vec<Vec<usize>> = vec![(0..inv.n_phones / 2).collect()];
        let (score_half, _) = selection_metric(&half, &lm, inv).unwrap();
        let ppl_half = lm.perplexity(&half).unwrap();
        assert!((score_half - 2.0 * ppl_half).abs() < 1e-9);

        // Degenerate single-phone transcripts are dominated by the usage term.
        let degenerate = vec![vec![0usize; 6]];
        let (score_deg, _) = selection_metric(&degenerate, &lm, inv).unwrap();
        let ppl_deg = lm.perplexity(&degenerate).unwrap();
        assert!(score_deg >= inv.n_phones as f64 * ppl_deg - 1e-9);

        // All-empty transcripts: infinity plus warning flag.
        let (score_empty, warn) = selection_metric(&[vec![], vec![]], &lm, inv).unwrap();
        assert!(score_empty.is_infinite() && warn);
    }

    #[test]
    fn gan_train_history_contract_and_determinism() {
        let ds = tiny_world(4);
        let lm = tiny_lm(&ds);
        let config = GanConfig {
            steps: 10,
            batch: 4,
            selection_interval: 5,
            seed: 11,
            ..GanConfig::default()
        };
        let (_, h1) = gan_train(&ds, &lm, &config, None).unwrap();
        assert_eq!(h1.len(), 10);
        for rec in &h1 {
            assert!(rec.d_loss.is_finite() && rec.g_loss.is_finite());
        }
        let (_, h2) = gan_train(&ds, &lm, &config, None).unwrap();
        let a = serde_json::to_string(&h1).unwrap();
        let b = serde_json::to_string(&h2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gan_train_pure_adversarial_ablation_runs() {
        let ds = tiny_world(5);
        let lm = tiny_lm(&ds);
        let config = GanConfig {
            steps: 6,
            batch: 4,
            selection_interval: 3,
            lambda_gp: 0.0,
            gamma_sm: 0.0,
            eta_div: 0.0,
            seed: 12,
            ..GanConfig::default()
        };
        let (_, history) = gan_train(&ds, &lm, &config, None).unwrap();
        assert!(history.iter().all(|r| r.d_loss.is_finite() && r.g_loss.is_finite()));
    }
}
