use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::Tape;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compare reverse-mode gradients of `f` at `point` against central finite
/// differences. Returns max_i |g_auto[i] - g_fd[i]| / max(1, |g_fd[i]|).
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Tensor,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::Contract(format!(
            "grad_check: epsilon must be in (0, 1e-2], got {}",
            epsilon
        )));
    }
    let shape = point.shape().to_vec();
    let base = point.to_vec();

    let x = Tensor::param(shape.clone(), base.clone());
    let tape = Tape::new();
    let loss = f(&tape, &x);
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check: function output must be scalar, got shape {:?}",
            loss.shape()
        )));
    }
    tape.backward(&loss)?;
    let g_auto = x.grad_or_zeros();

    let eval = |data: Vec<f64>| -> f64 {
        let x = Tensor::constant(shape.clone(), data);
        let tape = Tape::new();
        f(&tape, &x).item()
    };

    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += epsilon;
        let mut minus = base.clone();
        minus[i] -= epsilon;
        let g_fd = (eval(plus) - eval(minus)) / (2.0 * epsilon);
        let rel = (g_auto[i] - g_fd).abs() / g_fd.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Worst grad_check error over `n_comps` random smooth compositions of
/// depth <= 4, each evaluated at `n_points` random points. The composition
/// chain is seeded and reproducible.
pub fn composition_suite(seed: u64, n_comps: usize, n_points: usize, epsilon: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for comp in 0..n_comps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(comp as u64));
        let rows = rng.gen_range(2..=4usize);
        let cols = rng.gen_range(2..=4usize);
        let depth = rng.gen_range(1..=4usize);
        let steps: Vec<u8> = (0..depth).map(|_| rng.gen_range(0..10u8)).collect();
        // Constant companions drawn once so the closure is a pure fn of x.
        let consts: Vec<Vec<f64>> = (0..depth)
            .map(|_| (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();

        let f = |tape: &Tape, x: &Tensor| -> Tensor {
            let mut t = x.clone();
            for (si, &s) in steps.iter().enumerate() {
                let c = &consts[si];
                let (r, k) = (t.shape()[0], t.shape()[1]);
                t = match s {
                    0 => tape.sigmoid(&t),
                    1 => tape.softplus(&t),
                    2 => tape.scale(&t, 1.7),
                    3 => {
                        let cc = Tensor::constant(vec![r, k], c[..r * k].to_vec());
                        tape.add(&t, &cc)
                    }
                    4 => {
                        let cc = Tensor::constant(vec![r, k], c[..r * k].to_vec());
                        tape.mul(&t, &cc)
                    }
                    5 => {
                        let n = 3usize;
                        let cc = Tensor::constant(vec![k, n], c[..k * n].to_vec());
                        tape.matmul(&t, &cc)
                    }
                    6 => tape.softmax_rows(&t),
                    7 => tape.transpose(&t),
                    8 => tape.ln(&tape.add_scalar(&tape.sigmoid(&t), 0.5)),
                    _ => tape.sqrt(&tape.add_scalar(&tape.softplus(&t), 0.1)),
                };
            }
            tape.mean_all(&t)
        };

        for p in 0..n_points {
            let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd ^ ((comp * 131 + p) as u64));
            let data: Vec<f64> = (0..rows * cols).map(|_| prng.gen_range(-2.0..2.0)).collect();
            let point = Tensor::constant(vec![rows, cols], data);
            worst = worst.max(grad_check(&f, &point, epsilon)?);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_to_rounding() {
        let f = |tape: &Tape, x: &Tensor| tape.sum_all(&tape.mul(x, x));
        let p = Tensor::constant(vec![2], vec![1.0, 2.0]);
        let err = grad_check(f, &p, 1e-5).unwrap();
        assert!(err < 1e-8, "err={}", err);
    }

    #[test]
    fn two_layer_conv_net_mse_under_1e4() {
        // Gradient w.r.t. the input of a fixed two-conv-layer net with an
        // MSE head.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k1: Vec<f64> = (0..3 * 2 * 4).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let k2: Vec<f64> = (0..3 * 4 * 2).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let target: Vec<f64> = (0..8 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = move |tape: &Tape, x: &Tensor| {
            let k1 = Tensor::constant(vec![3, 2, 4], k1.clone());
            let k2 = Tensor::constant(vec![3, 4, 2], k2.clone());
            let t = Tensor::constant(vec![8, 2], target.clone());
            let h = tape.conv1d(&tape.pad_rows(x, 1, 1), &k1, 1).unwrap();
            let h = tape.sigmoid(&h);
            let y = tape.conv1d(&tape.pad_rows(&h, 1, 1), &k2, 1).unwrap();
            let d = tape.sub(&y, &t);
            tape.mean_all(&tape.mul(&d, &d))
        };
        let point: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let err = grad_check(f, &Tensor::constant(vec![8, 2], point), 1e-5).unwrap();
        assert!(err < 1e-4, "err={}", err);
    }

    #[test]
    fn every_primitive_passes_grad_check() {
        type Case = (&'static str, Box<dyn Fn(&Tape, &Tensor) -> Tensor>);
        let cases: Vec<Case> = vec![
            ("add", Box::new(|t, x| {
                let c = Tensor::constant(vec![2, 3], vec![0.3; 6]);
                t.mean_all(&t.add(x, &c))
            })),
            ("sub", Box::new(|t, x| {
                let c = Tensor::constant(vec![2, 3], vec![0.3; 6]);
                t.mean_all(&t.sub(&c, x))
            })),
            ("mul_self", Box::new(|t, x| t.mean_all(&t.mul(x, x)))),
            ("scale", Box::new(|t, x| t.mean_all(&t.scale(x, -2.5)))),
            ("add_scalar", Box::new(|t, x| t.mean_all(&t.add_scalar(x, 3.0)))),
            ("matmul", Box::new(|t, x| {
                let c = Tensor::constant(vec![3, 2], vec![0.2, -0.4, 0.6, 0.1, -0.9, 0.5]);
                t.mean_all(&t.matmul(x, &c))
            })),
            ("matmul_self_gram", Box::new(|t, x| t.mean_all(&t.matmul(x, &t.transpose(x))))),
            ("transpose", Box::new(|t, x| t.mean_all(&t.mul(&t.transpose(x), &t.transpose(x))))),
            ("sigmoid", Box::new(|t, x| t.mean_all(&t.sigmoid(x)))),
            ("softplus", Box::new(|t, x| t.mean_all(&t.softplus(x)))),
            ("sqrt", Box::new(|t, x| t.mean_all(&t.sqrt(&t.add_scalar(&t.softplus(x), 0.1))))),
            ("recip", Box::new(|t, x| t.mean_all(&t.recip(&t.add_scalar(&t.softplus(x), 0.5))))),
            ("ln", Box::new(|t, x| t.mean_all(&t.ln(&t.add_scalar(&t.softplus(x), 0.2))))),
            ("softmax_rows", Box::new(|t, x| {
                let w = Tensor::constant(vec![2, 3], vec![1.0, -1.0, 0.5, 0.2, 0.9, -0.3]);
                t.mean_all(&t.mul(&t.softmax_rows(x), &w))
            })),
            ("conv1d_input", Box::new(|t, x| {
                let k = Tensor::constant(vec![2, 3, 2], (0..12).map(|i| 0.1 * i as f64 - 0.5).collect());
                t.mean_all(&t.conv1d(x, &k, 1).unwrap())
            })),
            ("pad_slice_rows", Box::new(|t, x| {
                t.mean_all(&t.mul(&t.slice_rows(&t.pad_rows(x, 1, 2), 0, 3), &t.pad_rows(&t.slice_rows(x, 0, 1), 0, 2)))
            })),
            ("concat_rows", Box::new(|t, x| {
                let y = t.scale(x, 2.0);
                t.mean_all(&t.mul(&t.concat_rows(&[x, &y]), &t.concat_rows(&[&y, x])))
            })),
            ("cols_ops", Box::new(|t, x| {
                let a = t.slice_cols(x, 0, 2);
                let b = t.slice_cols(x, 1, 3);
                t.mean_all(&t.mul(&t.concat_cols(&[&a, &b]), &t.pad_cols(&a, 0, 2)))
            })),
            ("gather_rows", Box::new(|t, x| {
                t.mean_all(&t.mul(&t.gather_rows(x, &[1, 0, 1]), &t.gather_rows(x, &[0, 0, 1])))
            })),
            ("sums_broadcasts", Box::new(|t, x| {
                let rs = t.row_sum(x);
                let cs = t.col_sum(x);
                let m = t.mul(&t.col_broadcast(&rs, 3), &t.broadcast_row(&cs, 2));
                t.add(&t.mean_all(&m), &t.sum_all(&t.scalar_expand(&t.mean_all(x), 0.5, &[4])))
            })),
            ("cross_entropy", Box::new(|t, x| t.cross_entropy_mean(x, &[2, 0]))),
        ];
        for (name, f) in cases {
            let point = Tensor::constant(
                vec![2, 3],
                vec![0.31, -0.22, 0.87, -0.54, 0.12, 0.66],
            );
            let err = grad_check(f, &point, 1e-5).unwrap();
            assert!(err < 1e-4, "{}: err={}", name, err);
        }

        // relu family away from kinks; bce on rank-1 logits
        let relu_point = Tensor::constant(vec![2, 3], vec![0.5, -0.6, 1.2, -1.1, 0.8, -0.4]);
        let err = grad_check(|t, x| t.mean_all(&t.relu(x)), &relu_point, 1e-5).unwrap();
        assert!(err < 1e-4, "relu: {}", err);
        let err = grad_check(|t, x| t.mean_all(&t.leaky_relu(x, 0.2)), &relu_point, 1e-5).unwrap();
        assert!(err < 1e-4, "leaky_relu: {}", err);
        let bce_point = Tensor::constant(vec![4], vec![0.4, -1.2, 2.0, -0.1]);
        let err = grad_check(
            |t, x| t.bce_logits_mean(x, &[0.0, 1.0, 0.0, 1.0], 5.0),
            &bce_point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "bce: {}", err);
    }

    #[test]
    fn small_composition_suite_passes() {
        let worst = composition_suite(11, 5, 2, 1e-5).unwrap();
        assert!(worst < 1e-4, "worst={}", worst);
    }

    #[test]
    fn epsilon_contract_enforced() {
        let f = |tape: &Tape, x: &Tensor| tape.sum_all(x);
        let p = Tensor::constant(vec![1], vec![0.0]);
        assert!(grad_check(f, &p, 0.0).is_err());
        assert!(grad_check(f, &p, 0.5).is_err());
    }

    #[test]
    fn non_scalar_output_is_contract_error() {
        let f = |tape: &Tape, x: &Tensor| tape.scale(x, 1.0);
        let p = Tensor::constant(vec![2], vec![0.0, 1.0]);
        assert!(grad_check(f, &p, 1e-5).is_err());
    }
}
