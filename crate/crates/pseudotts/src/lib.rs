//! Two-step unsupervised speech synthesis on a synthetic speech world.
//!
//! An adversarially trained phone recognizer pseudo-labels an unlabeled
//! audio corpus, then a sequence-to-sequence acoustic model is trained on
//! those pseudo-labels. The synthetic world keeps ground truth hidden from
//! training so every stage can be verified against it.

pub mod decode;
pub mod error;
pub mod evalkit;
pub mod numkit;
pub mod phonelm;
pub mod textproc;
pub mod uasr;
pub mod toyworld;
pub mod tts;
pub mod util;

pub use error::{Error, Result};
