use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::nn::mse;
use crate::numkit::{Adam, Tape};
use crate::util::fnv1a64;

use super::model::{SpeakerRef, TTSModel};
use super::{average_checkpoints, guided_attention_loss, Snapshot, TTSConfig};

/// One training example: silence-free phone input, rendered frames target.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub id: String,
    pub phones: Vec<usize>,
    pub frames: Vec<f64>,
    pub speaker_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Pseudo,
    Truth,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Reconstruction part only (pre + post L2), for progress checks.
    pub val_l2: f64,
}

/// Validation membership: stable hash of the utterance id.
fn is_validation(id: &str) -> bool {
    fnv1a64(id.as_bytes()) % 10 == 0
}

fn speaker_ref_for<'a>(pair: &'a TrainPair, multi: bool) -> Option<SpeakerRef> {
    if multi {
        Some(SpeakerRef { speaker_id: pair.speaker_id, reference_frames: pair.frames.clone() })
    } else {
        None
    }
}

/// Composite loss for one pair under teacher forcing.
fn pair_loss(tape: &Tape, model: &TTSModel, pair: &TrainPair) -> Result<crate::numkit::Tensor> {
    let t = pair.frames.len() / model.feature_dim;
    let speaker = speaker_ref_for(pair, model.is_multi_speaker());
    let out = model.forward_teacher(tape, &pair.phones, &pair.frames, speaker.as_ref())?;
    let target = crate::numkit::Tensor::constant(vec![t, model.feature_dim], pair.frames.clone());
    let l2 = tape.add(&mse(tape, &out.pre, &target), &mse(tape, &out.post, &target));

    let mut stop_targets = vec![0.0; t];
    stop_targets[t - 1] = 1.0;
    let stop = tape.bce_logits_mean(&out.stop_logits, &stop_targets, model.config.stop_pos_weight);

    let mut loss = tape.add(&l2, &stop);
    if model.config.guided_weight > 0.0 {
        let mut guided_sum: Option<crate::numkit::Tensor> = None;
        for attn in &out.cross_attns {
            let g = guided_attention_loss(tape, attn, model.config.guided_g)?;
            guided_sum = Some(match guided_sum {
                Some(s) => tape.add(&s, &g),
                None => g,
            });
        }
        let guided = tape.scale(&guided_sum.unwrap(), 1.0 / out.cross_attns.len() as f64);
        loss = tape.add(&loss, &tape.scale(&guided, model.config.guided_weight));
    }
    Ok(loss)
}

/// Reconstruction L2 (pre + post) without the stop and guided terms.
fn pair_l2(model: &TTSModel, pair: &TrainPair) -> Result<f64> {
    let tape = Tape::new();
    let t = pair.frames.len() / model.feature_dim;
    let speaker = speaker_ref_for(pair, model.is_multi_speaker());
    let out = model.forward_teacher(&tape, &pair.phones, &pair.frames, speaker.as_ref())?;
    let target = crate::numkit::Tensor::constant(vec![t, model.feature_dim], pair.frames.clone());
    Ok(tape.add(&mse(&tape, &out.pre, &target), &mse(&tape, &out.post, &target)).item())
}

fn eval_split(model: &TTSModel, pairs: &[&TrainPair]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut l2 = 0.0;
    for pair in pairs {
        let tape = Tape::new();
        loss += pair_loss(&tape, model, pair)?.item();
        l2 += pair_l2(model, pair)?;
    }
    let n = pairs.len().max(1) as f64;
    Ok((loss / n, l2 / n))
}

fn validate_pairs(pairs: &[TrainPair], model: &TTSModel) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Contract("train_tts: no training pairs".into()));
    }
    for p in pairs {
        if p.phones.is_empty() {
            return Err(Error::Contract(format!("pair {}: empty phone sequence", p.id)));
        }
        if p.frames.is_empty() || p.frames.len() % model.feature_dim != 0 {
            return Err(Error::Contract(format!("pair {}: bad frame buffer", p.id)));
        }
        for &ph in &p.phones {
            if ph >= model.n_phones {
                return Err(Error::Contract(format!("pair {}: phone {} out of range", p.id, ph)));
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct CkptMeta {
    format_version: u32,
    epoch: usize,
    val_loss: f64,
    config_hash: String,
    label_source: LabelSource,
}

/// Teacher-forced training with per-utterance steps. After the last epoch
/// the checkpoint_keep checkpoints with lowest validation loss are
/// parameter-averaged into the returned model.
pub fn train_tts(
    pairs: &[TrainPair],
    feature_dim: usize,
    n_phones: usize,
    n_speakers: usize,
    config: &TTSConfig,
    label_source: LabelSource,
    ckpt_dir: Option<&Path>,
) -> Result<(TTSModel, Vec<EpochRecord>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = TTSModel::new(&mut rng, config, feature_dim, n_phones, n_speakers)?;
    validate_pairs(pairs, &model)?;
    let config_hash = crate::util::hash_canonical(config)?;

    let mut train: Vec<&TrainPair> = pairs.iter().filter(|p| !is_validation(&p.id)).collect();
    let mut val: Vec<&TrainPair> = pairs.iter().filter(|p| is_validation(&p.id)).collect();
    if val.is_empty() {
        // Tiny corpora: keep the last pair for validation.
        val.push(train.pop().ok_or_else(|| Error::Contract("train_tts: no training pairs".into()))?);
    }
    if train.is_empty() {
        return Err(Error::Contract("train_tts: validation split consumed all pairs".into()));
    }

    let params = model.params();
    let mut opt = Adam::new(&params, config.lr, 0.9, 0.98, 1e-8);
    let mut history = Vec::with_capacity(config.epochs);
    // (val_loss, epoch, snapshot), kept sorted, truncated to checkpoint_keep.
    let mut kept: Vec<(f64, usize, Snapshot)> = Vec::new();

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut train_loss = 0.0;
        for &i in &order {
            let tape = Tape::new();
            let loss = pair_loss(&tape, &model, train[i])?;
            let v = loss.item();
            if !v.is_finite() {
                return Err(Error::Diverged {
                    step: epoch,
                    detail: format!("tts loss {} on pair {}", v, train[i].id),
                });
            }
            tape.backward(&loss)?;
            opt.step(&params)?;
            train_loss += v;
        }
        train_loss /= train.len() as f64;

        let (val_loss, val_l2) = eval_split(&model, &val)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { step: epoch, detail: format!("tts val loss {}", val_loss) });
        }
        history.push(EpochRecord { epoch, train_loss, val_loss, val_l2 });

        kept.push((val_loss, epoch, model.snapshot()));
        kept.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
        kept.truncate(config.checkpoint_keep);
    }

    if let Some(dir) = ckpt_dir {
        std::fs::create_dir_all(dir)?;
        for (val_loss, epoch, snap) in &kept {
            let ckpt = dir.join(format!("tts-epoch-{}.ckpt", epoch));
            let entries: Vec<(String, crate::numkit::Tensor)> = snap
                .iter()
                .map(|(n, d)| {
                    (n.clone(), crate::numkit::Tensor::constant(vec![d.len()], d.clone()))
                })
                .collect();
            crate::numkit::io::save_checkpoint(&ckpt, &entries)?;
            let meta = CkptMeta {
                format_version: crate::toyworld::FORMAT_VERSION,
                epoch: *epoch,
                val_loss: *val_loss,
                config_hash: config_hash.clone(),
                label_source,
            };
            std::fs::write(ckpt.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        }
    }

    let snapshots: Vec<Snapshot> = kept.into_iter().map(|(_, _, s)| s).collect();
    let averaged = average_checkpoints(&snapshots)?;
    model.restore(&averaged)?;
    Ok((model, history))
}

/// Continue training an existing multi-speaker model on one speaker's
/// pairs; embeddings of other speakers receive no gradient. Returns a new
/// model, leaving the input untouched.
pub fn finetune_speaker(
    model: &TTSModel,
    speaker_id: usize,
    pairs: &[TrainPair],
    epochs: usize,
) -> Result<(TTSModel, Vec<EpochRecord>)> {
    if !model.is_multi_speaker() {
        return Err(Error::Contract("finetune_speaker: model is single-speaker".into()));
    }
    if speaker_id >= model.n_speakers {
        return Err(Error::Contract(format!("finetune_speaker: unknown speaker id {}", speaker_id)));
    }
    let speaker_pairs: Vec<&TrainPair> = pairs.iter().filter(|p| p.speaker_id == speaker_id).collect();
    if speaker_pairs.is_empty() {
        return Err(Error::Contract(format!(
            "finetune_speaker: no pairs for speaker {}",
            speaker_id
        )));
    }

    let tuned = model.clone_model();
    if epochs == 0 {
        return Ok((tuned, Vec::new()));
    }
    let mut train: Vec<&TrainPair> = speaker_pairs.iter().copied().filter(|p| !is_validation(&p.id)).collect();
    let mut val: Vec<&TrainPair> = speaker_pairs.iter().copied().filter(|p| is_validation(&p.id)).collect();
    if val.is_empty() {
        val.push(train.pop().ok_or_else(|| {
            Error::Contract("finetune_speaker: not enough pairs to split".into())
        })?);
    }
    if train.is_empty() {
        return Err(Error::Contract("finetune_speaker: not enough pairs to split".into()));
    }

    let params = tuned.params();
    let mut opt = Adam::new(&params, tuned.config.lr, 0.9, 0.98, 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(tuned.config.seed ^ 0xf17e);
    let mut history = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut train_loss = 0.0;
        for &i in &order {
            let tape = Tape::new();
            let loss = pair_loss(&tape, &tuned, train[i])?;
            let v = loss.item();
            if !v.is_finite() {
                return Err(Error::Diverged {
                    step: epoch,
                    detail: format!("finetune loss {} on pair {}", v, train[i].id),
                });
            }
            tape.backward(&loss)?;
            opt.step(&params)?;
            train_loss += v;
        }
        let (val_loss, val_l2) = eval_split(&tuned, &val)?;
        history.push(EpochRecord {
            epoch,
            train_loss: train_loss / train.len() as f64,
            val_loss,
            val_l2,
        });
    }
    Ok((tuned, history))
}

/// Validation L2 of a model on one speaker's validation split; the
/// before/after measurement around finetuning.
pub fn speaker_val_l2(model: &TTSModel, pairs: &[TrainPair], speaker_id: usize) -> Result<f64> {
    let speaker_pairs: Vec<&TrainPair> =
        pairs.iter().filter(|p| p.speaker_id == speaker_id).collect();
    let mut val: Vec<&TrainPair> =
        speaker_pairs.iter().copied().filter(|p| is_validation(&p.id)).collect();
    if val.is_empty() {
        val = speaker_pairs.last().into_iter().copied().collect();
    }
    if val.is_empty() {
        return Err(Error::Contract(format!("no pairs for speaker {}", speaker_id)));
    }
    let (_, l2) = eval_split(model, &val)?;
    Ok(l2)
}

/// Mean teacher-forced cross-attention mass inside the diagonal band
/// |n/N - t/T| < 2g, averaged over heads and pairs.
pub fn attention_band_mass(model: &TTSModel, pairs: &[TrainPair], g: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("attention_band_mass: no pairs".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for pair in pairs {
        let tape = Tape::new();
        let speaker = speaker_ref_for(pair, model.is_multi_speaker());
        let out = model.forward_teacher(&tape, &pair.phones, &pair.frames, speaker.as_ref())?;
        for attn in &out.cross_attns {
            let (n_out, t_in) = (attn.shape()[0], attn.shape()[1]);
            let data = attn.data();
            let mut mass = 0.0;
            for n in 0..n_out {
                for t in 0..t_in {
                    if (n as f64 / n_out as f64 - t as f64 / t_in as f64).abs() < 2.0 * g {
                        mass += data[n * t_in + t];
                    }
                }
            }
            total += mass / n_out as f64;
            count += 1;
        }
    }
    Ok(total / count as f64)
}
