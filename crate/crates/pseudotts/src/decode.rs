//! Beam-search transcription of merged recognizer outputs with phone-LM
//! fusion and silence stripping; emits one symbol per emission step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phonelm::{LmState, NGramModel};
use crate::toyworld::{Dataset, Inventory, Utterance};
use crate::uasr::{self, Emissions, RecognizerNet};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeParams {
    pub beam: usize,
    pub lm_weight: f64,
    /// Additive log-score for emitting SIL at a step.
    pub sil_bonus: f64,
    /// Safety cap on the number of emission steps consumed.
    pub max_hyp_len: usize,
}

impl Default for DecodeParams {
    fn default() -> DecodeParams {
        DecodeParams { beam: 15, lm_weight: 1.0, sil_bonus: 0.0, max_hyp_len: 1000 }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<()> {
        if self.beam < 1 {
            return Err(Error::Config("invalid decode config field: beam".into()));
        }
        if self.lm_weight < 0.0 {
            return Err(Error::Config("invalid decode config field: lm_weight".into()));
        }
        if self.max_hyp_len < 1 {
            return Err(Error::Config("invalid decode config field: max_hyp_len".into()));
        }
        Ok(())
    }
}

#[derive(Clone)]
struct Hypothesis {
    seq: Vec<usize>,
    score: f64,
    lm_state: LmState,
}

/// Best-scoring hypothesis and its internal score. The objective is
/// sum_t ln e_t(p_t) + lm_weight * lm logprob (end marker included) +
/// sil_bonus * #SIL, with ties broken toward the lexicographically
/// smaller sequence.
pub fn beam_decode_scored(
    emissions: &Emissions,
    lm: &NGramModel,
    params: &DecodeParams,
    inventory: Inventory,
) -> Result<(Vec<usize>, f64)> {
    params.validate()?;
    if emissions.rows == 0 {
        return Err(Error::Contract("beam_decode: empty emissions".into()));
    }
    if emissions.cols > inventory.n_emit() {
        return Err(Error::Contract(format!(
            "beam_decode: emissions over {} symbols but inventory has {}",
            emissions.cols,
            inventory.n_emit()
        )));
    }
    let steps = emissions.rows.min(params.max_hyp_len);
    let sil = inventory.sil();

    let mut beam = vec![Hypothesis { seq: Vec::new(), score: 0.0, lm_state: lm.start_state() }];
    for t in 0..steps {
        let row = emissions.row(t);
        let mut next: Vec<Hypothesis> = Vec::with_capacity(beam.len() * emissions.cols);
        for hyp in &beam {
            for (sym, &e) in row.iter().enumerate() {
                let (lm_lp, lm_state) = lm.step(&hyp.lm_state, sym)?;
                let mut score = hyp.score + e.ln() + params.lm_weight * lm_lp;
                if sym == sil {
                    score += params.sil_bonus;
                }
                let mut seq = hyp.seq.clone();
                seq.push(sym);
                next.push(Hypothesis { seq, score, lm_state });
            }
        }
        next.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.seq.cmp(&b.seq))
        });
        next.truncate(params.beam);
        beam = next;
    }

    let best = beam
        .into_iter()
        .map(|mut h| {
            h.score += params.lm_weight * lm.end_logprob(&h.lm_state);
            h
        })
        .max_by(|a, b| {
            a.score
                .partial_cmp(&b.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| b.seq.cmp(&a.seq))
        })
        .expect("beam never empty");
    Ok((best.seq, best.score))
}

pub fn beam_decode(
    emissions: &Emissions,
    lm: &NGramModel,
    params: &DecodeParams,
    inventory: Inventory,
) -> Result<Vec<usize>> {
    beam_decode_scored(emissions, lm, params, inventory).map(|(seq, _)| seq)
}

/// All SIL tokens removed, order preserved. May return empty.
pub fn strip_silence(phones: &[usize], sil: usize) -> Vec<usize> {
    phones.iter().copied().filter(|&p| p != sil).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PseudoLabel {
    pub id: String,
    pub phones: Vec<usize>,
    pub score: f64,
    pub flags: Vec<String>,
}

/// recognize -> merge -> beam decode -> strip silence, per utterance.
/// Per-utterance rngs are derived from `seed` and the utterance position,
/// so results do not depend on scheduling.
pub fn transcribe_corpus(
    net: &RecognizerNet,
    utterances: &[Utterance],
    feature_dim: usize,
    lm: &NGramModel,
    params: &DecodeParams,
    inventory: Inventory,
    seed: u64,
) -> Result<Vec<PseudoLabel>> {
    let mut out = Vec::with_capacity(utterances.len());
    for (i, utt) in utterances.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(i as u64 + 1)));
        let frames = uasr::pad_frames_min(&utt.frames, feature_dim, uasr::WINDOW);
        let dists = uasr::recognize(net, &frames, feature_dim)?;
        let merged = uasr::merge_repeats(&dists, &mut rng);
        let (with_sil, score) = beam_decode_scored(&merged, lm, params, inventory)?;
        let phones = strip_silence(&with_sil, inventory.sil());
        let mut flags = Vec::new();
        if phones.is_empty() {
            flags.push("empty_transcript".to_string());
        }
        out.push(PseudoLabel { id: utt.id.clone(), phones, score, flags });
    }
    Ok(out)
}

/// Decode parameter grid; swept with the unsupervised selection metric.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeGrid {
    pub lm_weights: Vec<f64>,
    pub sil_bonuses: Vec<f64>,
    pub beam: usize,
    pub max_hyp_len: usize,
    /// Leading audio utterances used as the sweep's dev set.
    pub dev_subset: usize,
}

impl Default for DecodeGrid {
    fn default() -> DecodeGrid {
        DecodeGrid {
            lm_weights: vec![0.0, 0.5, 1.0, 2.0],
            sil_bonuses: vec![-0.5, 0.0, 0.5],
            beam: 15,
            max_hyp_len: 1000,
            dev_subset: 40,
        }
    }
}

impl DecodeGrid {
    pub fn points(&self) -> Vec<DecodeParams> {
        let mut out = Vec::new();
        for &lw in &self.lm_weights {
            for &sb in &self.sil_bonuses {
                out.push(DecodeParams {
                    beam: self.beam,
                    lm_weight: lw,
                    sil_bonus: sb,
                    max_hyp_len: self.max_hyp_len,
                });
            }
        }
        out
    }
}

/// Decode the dev audio under every grid point and keep the argmin of the
/// selection metric; ties prefer smaller lm_weight, then smaller sil_bonus.
/// Transcripts are scored before silence stripping, matching the LM's
/// silence-inserted training convention.
pub fn sweep(
    grid: &[DecodeParams],
    net: &RecognizerNet,
    dev_audio: &[Utterance],
    feature_dim: usize,
    lm: &NGramModel,
    inventory: Inventory,
    seed: u64,
) -> Result<DecodeParams> {
    if grid.is_empty() {
        return Err(Error::Contract("sweep: empty parameter grid".into()));
    }
    let mut ordered: Vec<&DecodeParams> = grid.iter().collect();
    ordered.sort_by(|a, b| {
        a.lm_weight
            .partial_cmp(&b.lm_weight)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.sil_bonus.partial_cmp(&b.sil_bonus).unwrap_or(std::cmp::Ordering::Equal))
    });
    let mut best: Option<(f64, DecodeParams)> = None;
    for params in ordered {
        let mut transcripts = Vec::with_capacity(dev_audio.len());
        for (i, utt) in dev_audio.iter().enumerate() {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (0x5851f42d4c957f2du64.wrapping_mul(i as u64 + 1)));
            let frames = uasr::pad_frames_min(&utt.frames, feature_dim, uasr::WINDOW);
            let dists = uasr::recognize(net, &frames, feature_dim)?;
            let merged = uasr::merge_repeats(&dists, &mut rng);
            let (with_sil, _) = beam_decode_scored(&merged, lm, params, inventory)?;
            transcripts.push(with_sil);
        }
        let (metric, _) = uasr::selection_metric(&transcripts, lm, inventory)?;
        let better = match &best {
            None => true,
            Some((m, _)) => metric < *m,
        };
        if better {
            best = Some((metric, params.clone()));
        }
    }
    Ok(best.expect("grid nonempty").1)
}
