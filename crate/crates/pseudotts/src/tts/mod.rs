//! Sequence-to-sequence acoustic model: phone sequence in, feature frames
//! out. Trained on pseudo-labels (unsupervised) or ground truth
//! (supervised topline) with L2 reconstruction, a stop head, and guided
//! attention on every decoder cross-attention head.

mod model;
mod train;

pub use model::{SpeakerRef, TeacherOutput, TTSModel};
pub use train::{
    attention_band_mass, finetune_speaker, train_tts, EpochRecord, LabelSource, TrainPair,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Tape, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TTSConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub prenet_dim: usize,
    pub postnet_kernel: usize,
    pub guided_g: f64,
    pub guided_weight: f64,
    pub epochs: usize,
    pub checkpoint_keep: usize,
    pub stop_threshold: f64,
    /// Final-frame class weight in the stop-token cross-entropy.
    pub stop_pos_weight: f64,
    pub max_frames: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TTSConfig {
    fn default() -> TTSConfig {
        TTSConfig {
            enc_layers: 2,
            dec_layers: 2,
            heads: 2,
            model_dim: 32,
            prenet_dim: 32,
            postnet_kernel: 5,
            guided_g: 0.2,
            guided_weight: 1.0,
            epochs: 60,
            checkpoint_keep: 5,
            stop_threshold: 0.5,
            stop_pos_weight: 5.0,
            max_frames: 200,
            lr: 1e-3,
            seed: 1,
        }
    }
}

impl TTSConfig {
    pub fn validate(&self) -> Result<()> {
        let named = |field: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("invalid tts config field: {}", field)))
            }
        };
        named("enc_layers", self.enc_layers >= 1)?;
        named("dec_layers", self.dec_layers >= 1)?;
        named("heads", self.heads >= 1 && self.model_dim % self.heads == 0)?;
        named("model_dim", self.model_dim >= 2)?;
        named("prenet_dim", self.prenet_dim >= 1)?;
        named("postnet_kernel", self.postnet_kernel >= 1 && self.postnet_kernel % 2 == 1)?;
        named("guided_g", self.guided_g > 0.0)?;
        named("guided_weight", self.guided_weight >= 0.0)?;
        named("epochs", self.epochs >= 1)?;
        named("checkpoint_keep", self.checkpoint_keep >= 1)?;
        named("stop_threshold", self.stop_threshold > 0.0)?;
        named("stop_pos_weight", self.stop_pos_weight >= 1.0)?;
        named("max_frames", self.max_frames >= 1)?;
        named("lr", self.lr > 0.0)?;
        Ok(())
    }
}

/// Attention-to-diagonal penalty: mean over all cells of A[n,t] * W[n,t]
/// with W[n,t] = 1 - exp(-(n/N - t/T)^2 / (2 g^2)).
pub fn guided_attention_loss(tape: &Tape, attention: &Tensor, g: f64) -> Result<Tensor> {
    if g <= 0.0 {
        return Err(Error::Contract(format!("guided_attention_loss: g must be > 0, got {}", g)));
    }
    let (n_out, t_in) = (attention.shape()[0], attention.shape()[1]);
    Ok(tape.mean_all(&tape.mul(attention, &guided_weight_matrix(n_out, t_in, g))))
}

pub fn guided_weight_matrix(n_out: usize, t_in: usize, g: f64) -> Tensor {
    let mut w = vec![0.0; n_out * t_in];
    for n in 0..n_out {
        for t in 0..t_in {
            let d = n as f64 / n_out as f64 - t as f64 / t_in as f64;
            w[n * t_in + t] = 1.0 - (-d * d / (2.0 * g * g)).exp();
        }
    }
    Tensor::constant(vec![n_out, t_in], w)
}

/// Checkpoint contents keyed by tensor name.
pub type Snapshot = BTreeMap<String, Vec<f64>>;

/// Elementwise arithmetic mean of every tensor across checkpoints. Addends
/// are sorted before summation so the result is independent of checkpoint
/// order, bitwise.
pub fn average_checkpoints(checkpoints: &[Snapshot]) -> Result<Snapshot> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::Contract("average_checkpoints: no checkpoints".into()))?;
    let n = checkpoints.len() as f64;
    let mut out = Snapshot::new();
    for (name, base) in first {
        let mut avg = vec![0.0; base.len()];
        let mut addends = vec![0.0f64; checkpoints.len()];
        for (i, value) in avg.iter_mut().enumerate() {
            for (c, ckpt) in checkpoints.iter().enumerate() {
                let data = ckpt.get(name).ok_or_else(|| {
                    Error::Contract(format!("average_checkpoints: tensor '{}' missing", name))
                })?;
                if data.len() != base.len() {
                    return Err(Error::Contract(format!(
                        "average_checkpoints: tensor '{}' has {} elements vs {}",
                        name,
                        data.len(),
                        base.len()
                    )));
                }
                addends[c] = data[i];
            }
            addends.sort_by(f64::total_cmp);
            *value = addends.iter().sum::<f64>() / n;
        }
        out.insert(name.clone(), avg);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guided_loss_is_zero_on_the_diagonal_permutation() {
        let tape = Tape::new();
        let n = 5;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] = 1.0;
        }
        let att = Tensor::constant(vec![n, n], a);
        assert_eq!(guided_attention_loss(&tape, &att, 0.2).unwrap().item(), 0.0);
    }

    #[test]
    fn guided_loss_two_by_two_uniform_case() {
        let tape = Tape::new();
        let att = Tensor::constant(vec![2, 2], vec![0.5; 4]);
        let loss = guided_attention_loss(&tape, &att, 0.2).unwrap().item();
        // W(0,1) = W(1,0) = 1 - exp(-(1/2)^2 / (2 * 0.04)) = 1 - exp(-3.125)
        let w = 1.0 - (-3.125f64).exp();
        let expected = (2.0 * 0.5 * w) / 4.0;
        assert!((loss - expected).abs() < 1e-15);
        assert!((loss - 0.2390).abs() < 1e-4, "loss {}", loss);
    }

    #[test]
    fn guided_loss_vanishes_for_large_g() {
        let tape = Tape::new();
        let att = Tensor::constant(vec![3, 4], vec![0.25; 12]);
        let loss = guided_attention_loss(&tape, &att, 1e6).unwrap().item();
        assert!(loss.abs() < 1e-9, "loss {}", loss);
    }

    #[test]
    fn guided_loss_rejects_nonpositive_g() {
        let tape = Tape::new();
        let att = Tensor::constant(vec![2, 2], vec![0.5; 4]);
        assert!(guided_attention_loss(&tape, &att, 0.0).is_err());
        assert!(guided_attention_loss(&tape, &att, -1.0).is_err());
    }

    #[test]
    fn guided_loss_composed_with_softmax_passes_grad_check() {
        let f = |tape: &Tape, x: &Tensor| {
            let a = tape.softmax_rows(x);
            guided_attention_loss(tape, &a, 0.2).unwrap()
        };
        let point = Tensor::constant(
            vec![3, 4],
            vec![0.3, -0.7, 1.1, 0.2, -0.5, 0.9, 0.1, -1.3, 0.8, 0.4, -0.2, 0.6],
        );
        let err = crate::numkit::grad_check(f, &point, 1e-5).unwrap();
        assert!(err < 1e-4, "err {}", err);
    }

    fn snap(pairs: &[(&str, Vec<f64>)]) -> Snapshot {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn averaging_identities() {
        let a = snap(&[("w", vec![1.0, 2.0]), ("b", vec![3.0])]);
        assert_eq!(average_checkpoints(&[a.clone()]).unwrap(), a);

        let b = snap(&[("w", vec![3.0, 6.0]), ("b", vec![5.0])]);
        let avg = average_checkpoints(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(avg["w"], vec![2.0, 4.0]);
        assert_eq!(avg["b"], vec![4.0]);

        // permutation invariance, bitwise
        let c = snap(&[("w", vec![0.1, -0.7]), ("b", vec![0.3])]);
        let abc = average_checkpoints(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let cba = average_checkpoints(&[c, b, a]).unwrap();
        for k in ["w", "b"] {
            let x: Vec<u64> = abc[k].iter().map(|v| v.to_bits()).collect();
            let y: Vec<u64> = cba[k].iter().map(|v| v.to_bits()).collect();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn averaging_identical_checkpoints_is_identity() {
        let a = snap(&[("w", vec![0.25, -1.5, 7.0])]);
        let avg = average_checkpoints(&[a.clone(), a.clone(), a.clone(), a.clone(), a.clone()])
            .unwrap();
        assert_eq!(avg, a);
    }

    #[test]
    fn averaging_shape_mismatch_names_tensor() {
        let a = snap(&[("w", vec![1.0, 2.0])]);
        let b = snap(&[("w", vec![1.0])]);
        let err = average_checkpoints(&[a, b]).unwrap_err().to_string();
        assert!(err.contains("'w'"), "{}", err);
    }
}
