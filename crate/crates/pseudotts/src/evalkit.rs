//! Objective evaluation: pseudo-label PER, a frozen judge recognizer as
//! the intelligibility proxy, word recovery, DTW feature distance, the
//! first-stage-error robustness experiment, and report assembly.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{self, DecodeParams, PseudoLabel};
use crate::error::{Error, Result};
use crate::numkit::{Adam, Tape, Tensor};
use crate::phonelm::NGramModel;
use crate::textproc::{self, Lexicon};
use crate::toyworld::{oracle_alignment, Dataset, Utterance};
use crate::tts::{SpeakerRef, TTSModel};
use crate::uasr::{self, RecognizerNet};

// ── edit distance and PER ───────────────────────────────────────────

/// Uniform-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let n = b.len();
    let mut prev: Vec<usize> = (0..=n).collect();
    let mut cur = vec![0usize; n + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let cost = if x == y { 0 } else { 1 };
            cur[j + 1] = (prev[j] + cost).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[n]
}

/// Phone error rate: edit distance over reference length.
pub fn per(reference: &[usize], hypothesis: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Contract("per: empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Pooled PER over a corpus: total edits over total reference length.
pub fn pooled_per(pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
    let total_ref: usize = pairs.iter().map(|(r, _)| r.len()).sum();
    if total_ref == 0 {
        return Err(Error::Contract("pooled_per: empty references".into()));
    }
    let edits: usize = pairs.iter().map(|(r, h)| edit_distance(r, h)).sum();
    Ok(edits as f64 / total_ref as f64)
}

/// Empirical PER of a uniform-random transcriber that guesses a random
/// phone sequence of the reference's (silence-free) length.
pub fn chance_per(dataset: &Dataset, seed: u64) -> Result<f64> {
    let sil = dataset.inventory().sil();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = dataset
        .test
        .iter()
        .map(|u| {
            let reference = decode::strip_silence(&u.phones, sil);
            let hyp: Vec<usize> = (0..reference.len())
                .map(|_| rng.gen_range(0..dataset.config.n_phones))
                .collect();
            (reference, hyp)
        })
        .collect();
    pooled_per(&pairs)
}

// ── judge recognizer ────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct JudgeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for JudgeConfig {
    fn default() -> JudgeConfig {
        JudgeConfig { epochs: 12, lr: 1e-3, hidden: 64, seed: 1 }
    }
}

/// Majority-vote phone label of each recognizer window (ties toward the
/// smaller phone id).
fn window_targets(frame_labels: &[usize], n_windows: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n_windows);
    for w in 0..n_windows {
        let lo = w * uasr::STRIDE;
        let hi = (lo + uasr::WINDOW).min(frame_labels.len());
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &l in &frame_labels[lo..hi] {
            *counts.entry(l).or_insert(0) += 1;
        }
        let best = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&p, _)| p)
            .unwrap();
        out.push(best);
    }
    out
}

/// Supervised recognizer trained with per-window cross-entropy against
/// oracle alignments of natural frames; frozen afterwards and decoded
/// through the same beam/LM machinery as the unsupervised model.
pub fn train_judge(dataset: &Dataset, config: &JudgeConfig) -> Result<RecognizerNet> {
    let inv = dataset.inventory();
    let dim = dataset.config.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let net = RecognizerNet::new(&mut rng, dim, config.hidden, inv.n_emit());
    let params = net.params();
    let mut opt = Adam::new(&params, config.lr, 0.9, 0.98, 1e-8);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.audio_train.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for &i in &order {
            let utt = &dataset.audio_train[i];
            let frames = uasr::pad_frames_min(&utt.frames, dim, uasr::WINDOW);
            let rows = frames.len() / dim;
            let mut labels = oracle_alignment(utt);
            labels.resize(rows, *labels.last().expect("nonempty utterance"));
            let tape = Tape::new();
            let x = Tensor::constant(vec![rows, dim], frames);
            let logits = net.forward_logits(&tape, &x, true);
            let targets = window_targets(&labels, logits.shape()[0]);
            let loss = tape.cross_entropy_mean(&logits, &targets);
            let v = loss.item();
            if !v.is_finite() {
                return Err(Error::Diverged {
                    step: epoch * dataset.audio_train.len() + i,
                    detail: format!("judge loss {}", v),
                });
            }
            tape.backward(&loss)?;
            opt.step(&params)?;
        }
    }
    Ok(net)
}

/// recognize -> merge -> beam decode -> strip, for raw frames.
pub fn transcribe_frames(
    net: &RecognizerNet,
    frames: &[f64],
    dataset: &Dataset,
    lm: &NGramModel,
    params: &DecodeParams,
    seed: u64,
) -> Result<Vec<usize>> {
    let inv = dataset.inventory();
    let dim = dataset.config.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let padded = uasr::pad_frames_min(frames, dim, uasr::WINDOW);
    let dists = uasr::recognize(net, &padded, dim)?;
    let merged = uasr::merge_repeats(&dists, &mut rng);
    let with_sil = decode::beam_decode(&merged, lm, params, inv)?;
    Ok(decode::strip_silence(&with_sil, inv.sil()))
}

/// PER of a recognizer on the held-out natural test frames.
pub fn test_per(
    net: &RecognizerNet,
    dataset: &Dataset,
    lm: &NGramModel,
    params: &DecodeParams,
    seed: u64,
) -> Result<f64> {
    let sil = dataset.inventory().sil();
    let mut pairs = Vec::with_capacity(dataset.test.len());
    for (i, utt) in dataset.test.iter().enumerate() {
        let hyp = transcribe_frames(net, &utt.frames, dataset, lm, params, seed ^ (i as u64 + 1))?;
        pairs.push((decode::strip_silence(&utt.phones, sil), hyp));
    }
    pooled_per(&pairs)
}

// ── word recovery ───────────────────────────────────────────────────

/// Recovered token: a lexicon word or an unsegmentable phone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recovered {
    Word(usize),
    Unk,
}

/// Add-one smoothed unigram word log-probabilities from a corpus.
pub fn word_unigram_logprobs(sentences: &[Vec<usize>], n_words: usize) -> Vec<f64> {
    let mut counts = vec![1.0f64; n_words];
    let mut total = n_words as f64;
    for s in sentences {
        for &w in s {
            if w < n_words {
                counts[w] += 1.0;
                total += 1.0;
            }
        }
    }
    counts.into_iter().map(|c| (c / total).ln()).collect()
}

/// Per-phone score of unsegmentable material; below any real word.
const UNK_LOGPROB: f64 = -20.0;

/// Scores are summed in 32.32 fixed point: addition is exact and
/// associative, so equal-probability parses tie exactly and the
/// lexicographic tie-break is well defined.
pub fn quantize_logprob(lp: f64) -> i64 {
    (lp * 4294967296.0).round() as i64
}

/// Segment a silence-free phone string into lexicon words maximizing
/// unigram log-probability; unsegmentable phones become Unk at a fixed
/// per-phone penalty. Ties prefer the lexicographically smaller parse.
pub fn word_recover(
    phones: &[usize],
    lexicon: &Lexicon,
    word_logprobs: &[f64],
) -> Vec<Recovered> {
    #[derive(Clone)]
    struct Cell {
        score: i64,
        parse: Vec<Recovered>,
    }
    let qlp: Vec<i64> = word_logprobs.iter().map(|&l| quantize_logprob(l)).collect();
    let unk = quantize_logprob(UNK_LOGPROB);
    let n = phones.len();
    let mut best: Vec<Option<Cell>> = vec![None; n + 1];
    best[0] = Some(Cell { score: 0, parse: Vec::new() });
    let parse_key = |p: &[Recovered]| -> Vec<i64> {
        p.iter()
            .map(|r| match r {
                Recovered::Word(w) => *w as i64,
                Recovered::Unk => i64::MAX,
            })
            .collect()
    };
    for i in 1..=n {
        let mut candidates: Vec<Cell> = Vec::new();
        // consume one phone as unsegmentable
        if let Some(prev) = &best[i - 1] {
            let mut parse = prev.parse.clone();
            parse.push(Recovered::Unk);
            candidates.push(Cell { score: prev.score + unk, parse });
        }
        for (w, pron) in lexicon.iter() {
            let l = pron.len();
            if l <= i && phones[i - l..i] == *pron {
                if let Some(prev) = &best[i - l] {
                    let mut parse = prev.parse.clone();
                    parse.push(Recovered::Word(w));
                    candidates.push(Cell { score: prev.score + qlp[w], parse });
                }
            }
        }
        best[i] = candidates.into_iter().max_by(|a, b| {
            a.score
                .cmp(&b.score)
                .then_with(|| parse_key(&b.parse).cmp(&parse_key(&a.parse)))
        });
    }
    best[n].take().expect("position 0 always reachable").parse
}

// ── DTW ─────────────────────────────────────────────────────────────

/// Minimum-cost monotone alignment under per-pair Euclidean frame
/// distance with steps (1,0), (0,1), (1,1), normalized by the node count
/// of the optimal path (shortest among cost ties).
pub fn dtw_distance(x: &[f64], y: &[f64], dim: usize) -> f64 {
    let n = x.len() / dim;
    let m = y.len() / dim;
    assert!(n > 0 && m > 0, "dtw_distance: empty input");
    let d = |i: usize, j: usize| -> f64 {
        let a = &x[i * dim..(i + 1) * dim];
        let b = &y[j * dim..(j + 1) * dim];
        a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
    };
    // (cost, path length) minimized lexicographically.
    let mut dp = vec![(f64::INFINITY, 0usize); n * m];
    for i in 0..n {
        for j in 0..m {
            let cell = d(i, j);
            let mut best = if i == 0 && j == 0 {
                (cell, 1)
            } else {
                (f64::INFINITY, 0)
            };
            let mut consider = |prev: (f64, usize)| {
                let cand = (prev.0 + cell, prev.1 + 1);
                if cand.0 < best.0 || (cand.0 == best.0 && cand.1 < best.1) {
                    best = cand;
                }
            };
            if i > 0 && j > 0 {
                consider(dp[(i - 1) * m + (j - 1)]);
            }
            if i > 0 {
                consider(dp[(i - 1) * m + j]);
            }
            if j > 0 {
                consider(dp[i * m + (j - 1)]);
            }
            dp[i * m + j] = best;
        }
    }
    let (cost, len) = dp[n * m - 1];
    cost / len as f64
}

// ── proxy WER ───────────────────────────────────────────────────────

/// Everything needed to judge synthesized or natural frames.
pub struct EvalContext<'a> {
    pub dataset: &'a Dataset,
    pub judge: &'a RecognizerNet,
    pub lm: &'a NGramModel,
    pub judge_params: DecodeParams,
    pub word_logprobs: Vec<f64>,
    pub seed: u64,
}

impl<'a> EvalContext<'a> {
    pub fn new(
        dataset: &'a Dataset,
        judge: &'a RecognizerNet,
        lm: &'a NGramModel,
        judge_params: DecodeParams,
        seed: u64,
    ) -> EvalContext<'a> {
        let word_logprobs = word_unigram_logprobs(&dataset.text_train, dataset.config.n_words);
        EvalContext { dataset, judge, lm, judge_params, word_logprobs, seed }
    }

    fn frames_to_words(&self, frames: &[f64], salt: u64) -> Result<Vec<Recovered>> {
        let phones = transcribe_frames(
            self.judge,
            frames,
            self.dataset,
            self.lm,
            &self.judge_params,
            self.seed ^ salt,
        )?;
        Ok(word_recover(&phones, &self.dataset.lexicon, &self.word_logprobs))
    }

    /// Pooled word error rate of arbitrary per-sentence frames against the
    /// test sentences. `frames[i]` may be empty (counted as full deletion).
    fn wer_against_test(&self, frames: &[Vec<f64>]) -> Result<(f64, usize)> {
        let mut edits = 0usize;
        let mut total = 0usize;
        let mut empty = 0usize;
        for (i, utt) in self.dataset.test.iter().enumerate() {
            let reference: Vec<Recovered> =
                utt.words.iter().map(|&w| Recovered::Word(w)).collect();
            total += reference.len();
            if frames[i].is_empty() {
                edits += reference.len();
                empty += 1;
                continue;
            }
            let hyp = self.frames_to_words(&frames[i], 0x77 * (i as u64 + 1))?;
            edits += edit_distance(&reference, &hyp);
        }
        Ok((edits as f64 / total as f64, empty))
    }

    /// The Nat row: judge the natural test frames.
    pub fn proxy_wer_natural(&self) -> Result<f64> {
        let frames: Vec<Vec<f64>> = self.dataset.test.iter().map(|u| u.frames.clone()).collect();
        Ok(self.wer_against_test(&frames)?.0)
    }

    fn speaker_ref_for(&self, utt: &Utterance, model: &TTSModel) -> Option<SpeakerRef> {
        if !model.is_multi_speaker() {
            return None;
        }
        // Reference: the speaker's first training utterance.
        let reference = self
            .dataset
            .audio_train
            .iter()
            .find(|u| u.speaker_id == utt.speaker_id)
            .map(|u| u.frames.clone())
            .unwrap_or_else(|| utt.frames.clone());
        Some(SpeakerRef { speaker_id: utt.speaker_id, reference_frames: reference })
    }

    /// Synthesize each test sentence from the given phone inputs and judge
    /// the result. `inputs[i]` empty means synthesis is impossible; the
    /// sentence counts as fully deleted.
    pub fn proxy_wer_tts_with_inputs(
        &self,
        model: &TTSModel,
        inputs: &[Vec<usize>],
    ) -> Result<f64> {
        let mut frames = Vec::with_capacity(self.dataset.test.len());
        for (utt, phones) in self.dataset.test.iter().zip(inputs) {
            if phones.is_empty() {
                frames.push(Vec::new());
                continue;
            }
            let speaker = self.speaker_ref_for(utt, model);
            frames.push(model.synthesize(phones, speaker.as_ref())?);
        }
        Ok(self.wer_against_test(&frames)?.0)
    }

    /// The Sup/Unsup rows: synthesize from ground-truth phonemizations.
    pub fn proxy_wer_tts(&self, model: &TTSModel) -> Result<f64> {
        let inputs = self.truth_inputs()?;
        self.proxy_wer_tts_with_inputs(model, &inputs)
    }

    pub fn truth_inputs(&self) -> Result<Vec<Vec<usize>>> {
        self.dataset
            .test
            .iter()
            .map(|u| textproc::phonemize(&u.words, &self.dataset.lexicon))
            .collect()
    }
}

/// Feed the unsupervised TTS both ground-truth phonemizations and
/// first-stage transcriptions of the same test utterances; report both
/// rates. A fault-tolerant model keeps them close.
pub fn robustness_experiment(
    ctx: &EvalContext<'_>,
    tts_unsup: &TTSModel,
    uasr_net: &RecognizerNet,
    uasr_params: &DecodeParams,
) -> Result<(f64, f64)> {
    let truth = ctx.proxy_wer_tts(tts_unsup)?;
    let mut asr_inputs = Vec::with_capacity(ctx.dataset.test.len());
    for (i, utt) in ctx.dataset.test.iter().enumerate() {
        asr_inputs.push(transcribe_frames(
            uasr_net,
            &utt.frames,
            ctx.dataset,
            ctx.lm,
            uasr_params,
            ctx.seed ^ (0x3d * (i as u64 + 1)),
        )?);
    }
    let asr_input = ctx.proxy_wer_tts_with_inputs(tts_unsup, &asr_inputs)?;
    Ok((truth, asr_input))
}

// ── report ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedEval {
    pub seed: u64,
    pub per_pseudo: f64,
    pub per_sup_asr: f64,
    pub wer_proxy: BTreeMap<String, f64>,
    pub dtw_dist: BTreeMap<String, f64>,
    pub ambiguity_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub wer_normalization: String,
    pub per_seed: Vec<SeedEval>,
    pub aggregate: BTreeMap<String, Stats>,
    /// Reference numbers from the source experiments; context only, not
    /// reproduced at this scale.
    pub context: Vec<String>,
}

/// Everything one seed's pipeline produced, ready for evaluation.
pub struct SeedArtifacts<'a> {
    pub seed: u64,
    pub dataset: &'a Dataset,
    pub lm: &'a NGramModel,
    pub judge: &'a RecognizerNet,
    pub uasr_net: &'a RecognizerNet,
    pub uasr_params: &'a DecodeParams,
    pub pseudo_labels: &'a [PseudoLabel],
    pub tts_sup: &'a TTSModel,
    pub tts_unsup: &'a TTSModel,
}

/// The per-seed evaluation matrix: pseudo-label PER, judge PER, proxy WER
/// for Nat/Sup/Unsup plus the robustness row, and DTW distances of both
/// syntheses against noiseless re-renders.
pub fn evaluate_seed(artifacts: &SeedArtifacts<'_>) -> Result<SeedEval> {
    let ds = artifacts.dataset;
    let sil = ds.inventory().sil();

    // Pseudo-label quality against eval-only ground truth.
    let by_id: BTreeMap<&str, &PseudoLabel> =
        artifacts.pseudo_labels.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut pairs = Vec::with_capacity(ds.audio_train.len());
    for utt in &ds.audio_train {
        let label = by_id.get(utt.id.as_str()).ok_or_else(|| {
            Error::Dependency(format!("pseudo label missing for utterance {}", utt.id))
        })?;
        pairs.push((decode::strip_silence(&utt.phones, sil), label.phones.clone()));
    }
    let per_pseudo = pooled_per(&pairs)?;

    let ctx = EvalContext::new(
        ds,
        artifacts.judge,
        artifacts.lm,
        DecodeParams::default(),
        artifacts.seed,
    );

    let per_sup_asr = test_per(
        artifacts.judge,
        ds,
        artifacts.lm,
        &ctx.judge_params,
        artifacts.seed ^ 0xbead,
    )?;

    let mut wer_proxy = BTreeMap::new();
    wer_proxy.insert("nat".to_string(), ctx.proxy_wer_natural()?);
    wer_proxy.insert("sup".to_string(), ctx.proxy_wer_tts(artifacts.tts_sup)?);
    let (unsup, unsup_asr_input) =
        robustness_experiment(&ctx, artifacts.tts_unsup, artifacts.uasr_net, artifacts.uasr_params)?;
    wer_proxy.insert("unsup".to_string(), unsup);
    wer_proxy.insert("unsup_asr_input".to_string(), unsup_asr_input);

    // DTW against noiseless re-renders of the same sentences.
    let dim = ds.config.feature_dim;
    let mut dtw_sup = 0.0;
    let mut dtw_unsup = 0.0;
    let inputs = ctx.truth_inputs()?;
    for (i, utt) in ds.test.iter().enumerate() {
        let reference = ds.rerender(utt, ds.config.smoothing_window)?;
        let speaker_sup = ctx.speaker_ref_for(utt, artifacts.tts_sup);
        let speaker_unsup = ctx.speaker_ref_for(utt, artifacts.tts_unsup);
        let sup_frames = artifacts.tts_sup.synthesize(&inputs[i], speaker_sup.as_ref())?;
        let unsup_frames = artifacts.tts_unsup.synthesize(&inputs[i], speaker_unsup.as_ref())?;
        dtw_sup += dtw_distance(&sup_frames, &reference, dim);
        dtw_unsup += dtw_distance(&unsup_frames, &reference, dim);
    }
    let n = ds.test.len() as f64;
    let mut dtw_dist = BTreeMap::new();
    dtw_dist.insert("sup".to_string(), dtw_sup / n);
    dtw_dist.insert("unsup".to_string(), dtw_unsup / n);

    Ok(SeedEval {
        seed: artifacts.seed,
        per_pseudo,
        per_sup_asr,
        wer_proxy,
        dtw_dist,
        ambiguity_count: ds.ambiguity_count,
    })
}

/// Reference lines printed beside the reproduced structure.
pub fn context_lines() -> Vec<String> {
    vec![
        "reference (not reproduced at this scale): MOS 4.05 natural / 3.94 supervised / 3.91 unsupervised".into(),
        "reference (not reproduced at this scale): unsupervised WER 21.7%, 2.5% above supervised and 3.7% above natural".into(),
        "reference (not reproduced at this scale): pseudo-label PER 6.97% single-speaker / 7.78% multi-speaker".into(),
        "reference gap context: supervised-vs-unsupervised gaps of 2.5% WER and 0.03 MOS".into(),
    ]
}

/// Aggregate per-seed evaluations into the final report.
pub fn full_report(per_seed: Vec<SeedEval>, config_hash: String) -> Result<EvalReport> {
    if per_seed.is_empty() {
        return Err(Error::Contract("full_report: no seed evaluations".into()));
    }
    let seeds: Vec<u64> = per_seed.iter().map(|s| s.seed).collect();
    let mut aggregate = BTreeMap::new();
    let collect = |f: &dyn Fn(&SeedEval) -> f64| -> Vec<f64> { per_seed.iter().map(f).collect() };
    let mut insert = |key: &str, values: Vec<f64>| {
        let (mean, std) = crate::util::mean_std(&values);
        aggregate.insert(key.to_string(), Stats { mean, std });
    };
    insert("per_pseudo", collect(&|s| s.per_pseudo));
    insert("per_sup_asr", collect(&|s| s.per_sup_asr));
    for key in ["nat", "sup", "unsup", "unsup_asr_input"] {
        insert(&format!("wer_{}", key), collect(&|s| s.wer_proxy[key]));
    }
    for key in ["sup", "unsup"] {
        insert(&format!("dtw_{}", key), collect(&|s| s.dtw_dist[key]));
    }
    insert(
        "wer_gap_sup_unsup",
        per_seed.iter().map(|s| s.wer_proxy["unsup"] - s.wer_proxy["sup"]).collect(),
    );
    Ok(EvalReport {
        schema_version: crate::toyworld::FORMAT_VERSION,
        config_hash,
        seeds,
        wer_normalization: "pooled".to_string(),
        per_seed,
        aggregate,
        context: context_lines(),
    })
}

/// Human-readable table mirroring the natural/supervised/unsupervised
/// comparison layout.
pub fn render_markdown(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str("# Evaluation report\n\n");
    out.push_str(&format!(
        "seeds: {:?}; config: `{}`; WER normalization: {}\n\n",
        report.seeds, report.config_hash, report.wer_normalization
    ));
    out.push_str("| system | proxy WER (mean ± std) | DTW distance (mean ± std) |\n");
    out.push_str("|---|---|---|\n");
    let fmt = |s: &Stats| format!("{:.4} ± {:.4}", s.mean, s.std);
    out.push_str(&format!("| natural | {} | — |\n", fmt(&report.aggregate["wer_nat"])));
    out.push_str(&format!(
        "| supervised | {} | {} |\n",
        fmt(&report.aggregate["wer_sup"]),
        fmt(&report.aggregate["dtw_sup"])
    ));
    out.push_str(&format!(
        "| unsupervised | {} | {} |\n",
        fmt(&report.aggregate["wer_unsup"]),
        fmt(&report.aggregate["dtw_unsup"])
    ));
    out.push_str(&format!(
        "| unsupervised (ASR-transcript input) | {} | — |\n\n",
        fmt(&report.aggregate["wer_unsup_asr_input"])
    ));
    out.push_str(&format!(
        "pseudo-label PER: {}\n\nsupervised judge PER: {}\n\nsupervised-to-unsupervised WER gap: {}\n\n",
        fmt(&report.aggregate["per_pseudo"]),
        fmt(&report.aggregate["per_sup_asr"]),
        fmt(&report.aggregate["wer_gap_sup_unsup"]),
    ));
    out.push_str("## Context\n\n");
    for line in &report.context {
        out.push_str(&format!("- {}\n", line));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_examples() {
        assert_eq!(per(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert!((per(&[0, 1, 2], &[0, 2]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(per(&[4, 5], &[]).unwrap(), 1.0);
        assert!(per(&[], &[1]).is_err());
    }

    #[test]
    fn edit_distance_is_a_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let mut gen = |max: usize| -> Vec<usize> {
                (0..rng.gen_range(0..max)).map(|_| rng.gen_range(0..4)).collect()
            };
            let (a, b, c) = (gen(8), gen(8), gen(8));
            let dab = edit_distance(&a, &b);
            let dba = edit_distance(&b, &a);
            assert_eq!(dab, dba);
            assert_eq!(edit_distance(&a, &a), 0);
            let dac = edit_distance(&a, &c);
            let dcb = edit_distance(&c, &b);
            assert!(dab <= dac + dcb, "triangle violated");
        }
    }

    #[test]
    fn word_recover_unambiguous_and_empty() {
        let lexicon = Lexicon::new(vec![vec![0, 1], vec![2], vec![1, 2]]).unwrap();
        let lp = vec![-1.0, -1.0, -1.0];
        assert_eq!(
            word_recover(&[0, 1, 2], &lexicon, &lp),
            vec![Recovered::Word(0), Recovered::Word(1)]
        );
        assert_eq!(word_recover(&[], &lexicon, &lp), Vec::<Recovered>::new());
    }

    #[test]
    fn word_recover_prefers_higher_unigram_probability() {
        // [0,1,2] parses as w0(0,1)+w1(2) or w2(0)+w3(1,2).
        let lexicon = Lexicon::new(vec![vec![0, 1], vec![2], vec![0], vec![1, 2]]).unwrap();
        let mut lp = vec![-2.0, -2.0, -1.0, -1.0];
        assert_eq!(
            word_recover(&[0, 1, 2], &lexicon, &lp),
            vec![Recovered::Word(2), Recovered::Word(3)]
        );
        lp = vec![-1.0, -1.0, -2.0, -2.0];
        assert_eq!(
            word_recover(&[0, 1, 2], &lexicon, &lp),
            vec![Recovered::Word(0), Recovered::Word(1)]
        );
    }

    /// All segmentations by recursion: the independent oracle.
    fn brute_force_recover(
        phones: &[usize],
        lexicon: &Lexicon,
        word_logprobs: &[f64],
    ) -> Vec<Recovered> {
        fn go(
            pos: usize,
            phones: &[usize],
            lexicon: &Lexicon,
            lp: &[i64],
            current: &mut Vec<Recovered>,
            best: &mut Option<(i64, Vec<Recovered>)>,
            score: i64,
        ) {
            if pos == phones.len() {
                let key: Vec<i64> = current
                    .iter()
                    .map(|r| match r {
                        Recovered::Word(w) => *w as i64,
                        Recovered::Unk => i64::MAX,
                    })
                    .collect();
                let better = match best {
                    None => true,
                    Some((bs, bp)) => {
                        let bkey: Vec<i64> = bp
                            .iter()
                            .map(|r| match r {
                                Recovered::Word(w) => *w as i64,
                                Recovered::Unk => i64::MAX,
                            })
                            .collect();
                        score > *bs || (score == *bs && key < bkey)
                    }
                };
                if better {
                    *best = Some((score, current.clone()));
                }
                return;
            }
            current.push(Recovered::Unk);
            go(pos + 1, phones, lexicon, lp, current, best, score + quantize_logprob(UNK_LOGPROB));
            current.pop();
            for (w, pron) in lexicon.iter() {
                if phones[pos..].starts_with(pron) {
                    current.push(Recovered::Word(w));
                    go(pos + pron.len(), phones, lexicon, lp, current, best, score + lp[w]);
                    current.pop();
                }
            }
        }
        let qlp: Vec<i64> = word_logprobs.iter().map(|&l| quantize_logprob(l)).collect();
        let mut best = None;
        go(0, phones, lexicon, &qlp, &mut Vec::new(), &mut best, 0);
        best.expect("unk path always exists").1
    }

    #[test]
    fn word_recover_matches_oracle_exhaustively() {
        // Five words over a three-phone alphabet; every string up to
        // length 8.
        let lexicon =
            Lexicon::new(vec![vec![0], vec![0, 1], vec![1, 2], vec![2], vec![1, 0, 2]]).unwrap();
        let lp = vec![-1.2, -0.7, -2.1, -0.9, -1.6];
        for len in 0..=8usize {
            let mut string = vec![0usize; len];
            loop {
                let dp = word_recover(&string, &lexicon, &lp);
                let oracle = brute_force_recover(&string, &lexicon, &lp);
                assert_eq!(dp, oracle, "string {:?}", string);
                let mut pos = len;
                loop {
                    if pos == 0 {
                        break;
                    }
                    pos -= 1;
                    string[pos] += 1;
                    if string[pos] < 3 {
                        break;
                    }
                    string[pos] = 0;
                }
                if string.iter().all(|&p| p == 0) {
                    break;
                }
            }
        }
    }

    #[test]
    fn dtw_examples_and_properties() {
        // identical sequences
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(dtw_distance(&x, &x, 2), 0.0);

        // one frame each: plain Euclidean distance
        let a = vec![0.0, 3.0];
        let b = vec![4.0, 0.0];
        assert!((dtw_distance(&a, &b, 2) - 5.0).abs() < 1e-12);

        // symmetry / identity on random pairs
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = rng.gen_range(1..6);
            let m = rng.gen_range(1..6);
            let x: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..m * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let d1 = dtw_distance(&x, &y, 3);
            let d2 = dtw_distance(&y, &x, 3);
            assert!((d1 - d2).abs() < 1e-12);
            assert!(dtw_distance(&x, &x, 3).abs() < 1e-12);
        }
    }

    /// Exhaustive monotone-path enumeration for the 2x3 case.
    #[test]
    fn dtw_matches_brute_force_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 2;
        for _ in 0..50 {
            let x: Vec<f64> = (0..2 * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..3 * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let d = |i: usize, j: usize| -> f64 {
                let a = &x[i * dim..(i + 1) * dim];
                let b = &y[j * dim..(j + 1) * dim];
                a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
            };
            // enumerate all monotone paths from (0,0) to (1,2)
            let mut best: Option<(f64, usize)> = None;
            fn walk(
                i: usize,
                j: usize,
                cost: f64,
                len: usize,
                d: &dyn Fn(usize, usize) -> f64,
                best: &mut Option<(f64, usize)>,
            ) {
                let c = cost + d(i, j);
                if i == 1 && j == 2 {
                    let cand = (c, len + 1);
                    let better = match best {
                        None => true,
                        Some((bc, bl)) => cand.0 < *bc || (cand.0 == *bc && cand.1 < *bl),
                    };
                    if better {
                        *best = Some(cand);
                    }
                    return;
                }
                if i < 1 {
                    walk(i + 1, j, c, len + 1, d, best);
                }
                if j < 2 {
                    walk(i, j + 1, c, len + 1, d, best);
                }
                if i < 1 && j < 2 {
                    walk(i + 1, j + 1, c, len + 1, d, best);
                }
            }
            walk(0, 0, 0.0, 0, &d, &mut best);
            let (cost, len) = best.unwrap();
            let expected = cost / len as f64;
            let got = dtw_distance(&x, &y, dim);
            assert!((got - expected).abs() < 1e-12, "{} vs {}", got, expected);
        }
    }

    #[test]
    fn judge_is_deterministic() {
        use crate::toyworld::{build_world, WorldConfig};
        let ds = build_world(&WorldConfig {
            n_audio_utts: 8,
            n_text_sents: 15,
            n_test_utts: 3,
            seed: 4,
            ..WorldConfig::default()
        })
        .unwrap();
        let config = JudgeConfig { epochs: 1, ..JudgeConfig::default() };
        let a = train_judge(&ds, &config).unwrap();
        let b = train_judge(&ds, &config).unwrap();
        assert_eq!(a.snapshot(), b.snapshot());
    }

    #[test]
    fn window_targets_majority_vote() {
        // 9 frames of phone 2, then 6 of phone 0: window 0 -> 2, window 2 -> 0.
        let mut labels = vec![2usize; 9];
        labels.extend(vec![0usize; 6]);
        let targets = window_targets(&labels, 3);
        assert_eq!(targets[0], 2);
        assert_eq!(targets[2], 0);
        // tie prefers the smaller id: window of 4x1 + 4x3 + 1x1 -> 1
        let tie = vec![1, 1, 1, 1, 3, 3, 3, 3, 1];
        assert_eq!(window_targets(&tie, 1), vec![1]);
    }

    #[test]
    fn chance_per_is_high_on_default_world() {
        use crate::toyworld::{build_world, WorldConfig};
        let ds = build_world(&WorldConfig {
            n_audio_utts: 8,
            n_text_sents: 15,
            n_test_utts: 10,
            seed: 5,
            ..WorldConfig::default()
        })
        .unwrap();
        let c = chance_per(&ds, 7).unwrap();
        assert!(c > 0.5, "chance PER {}", c);
    }
}
