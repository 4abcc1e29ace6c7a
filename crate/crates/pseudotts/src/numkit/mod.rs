//! Dense f64 tensors with reverse-mode autodiff, the optimizer, and the
//! checkpoint blob format. All model code in this crate is built on this.

pub mod adam;
pub mod gradcheck;
pub mod io;
pub mod nn;
pub mod tape;
pub mod tensor;

pub use adam::{zero_grads, Adam};
pub use gradcheck::grad_check;
pub use tape::Tape;
pub use tensor::Tensor;

/// Deterministic row-wise argmax with first-max tie-break.
pub fn argmax_rows(data: &[f64], cols: usize) -> Vec<usize> {
    assert!(cols > 0);
    data.chunks_exact(cols)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
