//! Reverse-mode autodiff over a per-forward-pass tape.
//!
//! Every primitive evaluates eagerly and records itself. Backward replays
//! the records in reverse and *emits the gradient computation as further
//! tape operations*, so gradients are tensors on the same tape and can be
//! differentiated again (needed for the critic's gradient penalty).

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone)]
enum Op {
    Add { a: Tensor, b: Tensor },
    Sub { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    Scale { a: Tensor, c: f64 },
    AddScalar { a: Tensor },
    Matmul { a: Tensor, b: Tensor },
    Transpose { a: Tensor },
    Relu { a: Tensor, mask: Tensor },
    LeakyRelu { a: Tensor, mask: Tensor },
    Sigmoid { a: Tensor },
    Softplus { a: Tensor },
    Sqrt { a: Tensor },
    Recip { a: Tensor },
    Ln { a: Tensor },
    SoftmaxRows { a: Tensor },
    Conv1d { x: Tensor, k: Tensor, stride: usize },
    Conv1dBackInput { g: Tensor, k: Tensor, stride: usize },
    Conv1dBackKernel { g: Tensor, x: Tensor, stride: usize, kw: usize },
    PadRows { x: Tensor, before: usize },
    SliceRows { x: Tensor, start: usize, end: usize },
    ConcatRows { xs: Vec<Tensor> },
    PadCols { x: Tensor, before: usize },
    SliceCols { x: Tensor, start: usize, end: usize },
    ConcatCols { xs: Vec<Tensor> },
    GatherRows { x: Tensor, idx: Rc<Vec<usize>> },
    ScatterAddRows { x: Tensor, idx: Rc<Vec<usize>> },
    SumAll { a: Tensor },
    MeanAll { a: Tensor },
    ScalarExpand { s: Tensor, factor: f64 },
    RowSum { a: Tensor },
    ColSum { a: Tensor },
    BroadcastRow { v: Tensor },
    ColBroadcast { v: Tensor },
    Reshape { x: Tensor },
    CrossEntropyMean { logits: Tensor, onehot: Tensor },
    BceLogitsMean { logits: Tensor, targets: Tensor, w_over_n: Tensor },
}

#[derive(Clone)]
struct OpRecord {
    op: Op,
    out: Tensor,
}

/// Records one forward pass. Dropped (with all intermediates) after use.
#[derive(Default)]
pub struct Tape {
    records: RefCell<Vec<OpRecord>>,
}

fn any_grad(ts: &[&Tensor]) -> bool {
    ts.iter().any(|t| t.requires_grad())
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.borrow().is_empty()
    }

    fn push(&self, op: Op, out: &Tensor) {
        self.records.borrow_mut().push(OpRecord { op, out: out.clone() });
    }

    fn output(&self, shape: Vec<usize>, data: Vec<f64>, inputs: &[&Tensor], op: Op) -> Tensor {
        let requires = any_grad(inputs);
        let out = Tensor::op_output(shape, data, requires);
        if requires {
            self.push(op, &out);
        }
        out
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
        self.output(a.shape().to_vec(), data, &[a, b], Op::Add { a: a.clone(), b: b.clone() })
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x - y).collect();
        self.output(a.shape().to_vec(), data, &[a, b], Op::Sub { a: a.clone(), b: b.clone() })
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
        self.output(a.shape().to_vec(), data, &[a, b], Op::Mul { a: a.clone(), b: b.clone() })
    }

    pub fn scale(&self, a: &Tensor, c: f64) -> Tensor {
        let data = a.data().iter().map(|x| x * c).collect();
        self.output(a.shape().to_vec(), data, &[a], Op::Scale { a: a.clone(), c })
    }

    pub fn add_scalar(&self, a: &Tensor, c: f64) -> Tensor {
        let data = a.data().iter().map(|x| x + c).collect();
        self.output(a.shape().to_vec(), data, &[a], Op::AddScalar { a: a.clone() })
    }

    pub fn relu(&self, a: &Tensor) -> Tensor {
        let mask: Vec<f64> = a.data().iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
        let data = a.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let mask = Tensor::constant(a.shape().to_vec(), mask);
        self.output(a.shape().to_vec(), data, &[a], Op::Relu { a: a.clone(), mask })
    }

    pub fn leaky_relu(&self, a: &Tensor, slope: f64) -> Tensor {
        let mask: Vec<f64> = a.data().iter().map(|&x| if x > 0.0 { 1.0 } else { slope }).collect();
        let data = a.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let mask = Tensor::constant(a.shape().to_vec(), mask);
        self.output(a.shape().to_vec(), data, &[a], Op::LeakyRelu { a: a.clone(), mask })
    }

    pub fn sigmoid(&self, a: &Tensor) -> Tensor {
        let data = a.data().iter().map(|&x| sigmoid_scalar(x)).collect();
        self.output(a.shape().to_vec(), data, &[a], Op::Sigmoid { a: a.clone() })
    }

    /// Numerically stable log(1 + exp(x)).
    pub fn softplus(&self, a: &Tensor) -> Tensor {
        let data = a
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() })
            .collect();
        self.output(a.shape().to_vec(), data, &[a], Op::Softplus { a: a.clone() })
    }

    pub fn sqrt(&self, a: &Tensor) -> Tensor {
        let data = a.data().iter().map(|x| x.sqrt()).collect();
        self.output(a.shape().to_vec(), data, &[a], Op::Sqrt { a: a.clone() })
    }

    pub fn recip(&self, a: &Tensor) -> Tensor {
        let data = a.data().iter().map(|x| 1.0 / x).collect();
        self.output(a.shape().to_vec(), data, &[a], Op::Recip { a: a.clone() })
    }

    /// Natural log, input clamped below at 1e-300.
    pub fn ln(&self, a: &Tensor) -> Tensor {
        let data = a.data().iter().map(|x| x.max(1e-300).ln()).collect();
        self.output(a.shape().to_vec(), data, &[a], Op::Ln { a: a.clone() })
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape().len(), 2, "matmul: a must be rank-2");
        assert_eq!(b.shape().len(), 2, "matmul: b must be rank-2");
        let (m, ka) = (a.shape()[0], a.shape()[1]);
        let (kb, n) = (b.shape()[0], b.shape()[1]);
        assert_eq!(ka, kb, "matmul: inner dims {} vs {}", ka, kb);
        let ad = a.data();
        let bd = b.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ad[i * ka..(i + 1) * ka];
            let orow = &mut out[i * n..(i + 1) * n];
            for (k, &aik) in arow.iter().enumerate() {
                let brow = &bd[k * n..(k + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
        drop(ad);
        drop(bd);
        self.output(vec![m, n], out, &[a, b], Op::Matmul { a: a.clone(), b: b.clone() })
    }

    pub fn transpose(&self, a: &Tensor) -> Tensor {
        assert_eq!(a.shape().len(), 2, "transpose: rank-2 only");
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let ad = a.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ad[i * c + j];
            }
        }
        drop(ad);
        self.output(vec![c, r], out, &[a], Op::Transpose { a: a.clone() })
    }

    // ── softmax and losses ──────────────────────────────────────────

    /// Row-wise softmax with max subtraction. Panics on non-finite input.
    pub fn softmax_rows(&self, a: &Tensor) -> Tensor {
        let (r, c) = (a.rows(), a.cols());
        let ad = a.data();
        assert!(ad.iter().all(|v| !v.is_nan()), "softmax: non-finite input");
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &ad[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = (x - m).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        drop(ad);
        self.output(a.shape().to_vec(), out, &[a], Op::SoftmaxRows { a: a.clone() })
    }

    /// Mean cross-entropy of row-wise logits against class indices.
    pub fn cross_entropy_mean(&self, logits: &Tensor, targets: &[usize]) -> Tensor {
        assert_eq!(logits.shape().len(), 2, "cross_entropy: logits must be rank-2");
        let (t, v) = (logits.shape()[0], logits.shape()[1]);
        assert_eq!(t, targets.len(), "cross_entropy: {} rows vs {} targets", t, targets.len());
        let ld = logits.data();
        let mut total = 0.0;
        let mut onehot = vec![0.0; t * v];
        for (i, &y) in targets.iter().enumerate() {
            assert!(y < v, "cross_entropy: target {} out of range {}", y, v);
            let row = &ld[i * v..(i + 1) * v];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
            onehot[i * v + y] = 1.0;
        }
        drop(ld);
        let onehot = Tensor::constant(vec![t, v], onehot);
        self.output(
            vec![1],
            vec![total / t as f64],
            &[logits],
            Op::CrossEntropyMean { logits: logits.clone(), onehot },
        )
    }

    /// Mean binary cross-entropy with logits; per-element weight
    /// 1 + (pos_weight - 1) * target.
    pub fn bce_logits_mean(&self, logits: &Tensor, targets: &[f64], pos_weight: f64) -> Tensor {
        assert_eq!(logits.shape().len(), 1, "bce: logits must be rank-1");
        let n = logits.numel();
        assert_eq!(n, targets.len(), "bce: {} logits vs {} targets", n, targets.len());
        let ld = logits.data();
        let mut total = 0.0;
        let mut wn = vec![0.0; n];
        for i in 0..n {
            let z = ld[i];
            let y = targets[i];
            let w = 1.0 + (pos_weight - 1.0) * y;
            let l = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            total += w * l;
            wn[i] = w / n as f64;
        }
        drop(ld);
        let t = Tensor::constant(vec![n], targets.to_vec());
        let w_over_n = Tensor::constant(vec![n], wn);
        self.output(
            vec![1],
            vec![total / n as f64],
            &[logits],
            Op::BceLogitsMean { logits: logits.clone(), targets: t, w_over_n },
        )
    }

    // ── convolution ─────────────────────────────────────────────────

    /// 1-D convolution: input [T, Din], kernel [k, Din, Dout], output
    /// [floor((T-k)/stride)+1, Dout].
    pub fn conv1d(&self, x: &Tensor, k: &Tensor, stride: usize) -> Result<Tensor> {
        assert_eq!(x.shape().len(), 2, "conv1d: input must be rank-2");
        assert_eq!(k.shape().len(), 3, "conv1d: kernel must be rank-3");
        if stride == 0 {
            return Err(Error::Contract("conv1d: stride must be >= 1".into()));
        }
        let (t, di) = (x.shape()[0], x.shape()[1]);
        let (kw, kdi, dout) = (k.shape()[0], k.shape()[1], k.shape()[2]);
        assert_eq!(di, kdi, "conv1d: input dim {} vs kernel dim {}", di, kdi);
        if t < kw {
            return Err(Error::Shape(format!(
                "conv1d: input length {} is shorter than kernel width {}",
                t, kw
            )));
        }
        let t_out = (t - kw) / stride + 1;
        let xd = x.data();
        let kd = k.data();
        let mut out = vec![0.0; t_out * dout];
        for tp in 0..t_out {
            let orow = &mut out[tp * dout..(tp + 1) * dout];
            for j in 0..kw {
                let xrow = &xd[(tp * stride + j) * di..(tp * stride + j + 1) * di];
                for (i, &xv) in xrow.iter().enumerate() {
                    let krow = &kd[(j * di + i) * dout..(j * di + i + 1) * dout];
                    for (o, kv) in orow.iter_mut().zip(krow) {
                        *o += xv * kv;
                    }
                }
            }
        }
        drop(xd);
        drop(kd);
        Ok(self.output(
            vec![t_out, dout],
            out,
            &[x, k],
            Op::Conv1d { x: x.clone(), k: k.clone(), stride },
        ))
    }

    /// Gradient of conv1d w.r.t. its input: g [T', Dout], kernel as in
    /// forward, result [t_in, Din].
    fn conv1d_back_input(&self, g: &Tensor, k: &Tensor, stride: usize, t_in: usize) -> Tensor {
        let (t_out, dout) = (g.shape()[0], g.shape()[1]);
        let (kw, di, kdo) = (k.shape()[0], k.shape()[1], k.shape()[2]);
        assert_eq!(dout, kdo);
        let gd = g.data();
        let kd = k.data();
        let mut out = vec![0.0; t_in * di];
        for tp in 0..t_out {
            let grow = &gd[tp * dout..(tp + 1) * dout];
            for j in 0..kw {
                let xrow = &mut out[(tp * stride + j) * di..(tp * stride + j + 1) * di];
                for (i, xv) in xrow.iter_mut().enumerate() {
                    let krow = &kd[(j * di + i) * dout..(j * di + i + 1) * dout];
                    let mut acc = 0.0;
                    for (gv, kv) in grow.iter().zip(krow) {
                        acc += gv * kv;
                    }
                    *xv += acc;
                }
            }
        }
        drop(gd);
        drop(kd);
        self.output(
            vec![t_in, di],
            out,
            &[g, k],
            Op::Conv1dBackInput { g: g.clone(), k: k.clone(), stride },
        )
    }

    /// Gradient of conv1d w.r.t. its kernel: g [T', Dout], x [T, Din],
    /// result [kw, Din, Dout].
    fn conv1d_back_kernel(&self, g: &Tensor, x: &Tensor, stride: usize, kw: usize) -> Tensor {
        let (t_out, dout) = (g.shape()[0], g.shape()[1]);
        let (_t, di) = (x.shape()[0], x.shape()[1]);
        let gd = g.data();
        let xd = x.data();
        let mut out = vec![0.0; kw * di * dout];
        for tp in 0..t_out {
            let grow = &gd[tp * dout..(tp + 1) * dout];
            for j in 0..kw {
                let xrow = &xd[(tp * stride + j) * di..(tp * stride + j + 1) * di];
                for (i, &xv) in xrow.iter().enumerate() {
                    let krow = &mut out[(j * di + i) * dout..(j * di + i + 1) * dout];
                    for (kv, gv) in krow.iter_mut().zip(grow) {
                        *kv += xv * gv;
                    }
                }
            }
        }
        drop(gd);
        drop(xd);
        self.output(
            vec![kw, di, dout],
            out,
            &[g, x],
            Op::Conv1dBackKernel { g: g.clone(), x: x.clone(), stride, kw },
        )
    }

    // ── structure: rows / cols ──────────────────────────────────────

    pub fn pad_rows(&self, x: &Tensor, before: usize, after: usize) -> Tensor {
        assert_eq!(x.shape().len(), 2, "pad_rows: rank-2 only");
        let (t, c) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![0.0; (before + t + after) * c];
        out[before * c..(before + t) * c].copy_from_slice(&x.data());
        self.output(
            vec![before + t + after, c],
            out,
            &[x],
            Op::PadRows { x: x.clone(), before },
        )
    }

    pub fn slice_rows(&self, x: &Tensor, start: usize, end: usize) -> Tensor {
        assert_eq!(x.shape().len(), 2, "slice_rows: rank-2 only");
        let (t, c) = (x.shape()[0], x.shape()[1]);
        assert!(start <= end && end <= t, "slice_rows: bad range {}..{} of {}", start, end, t);
        let out = x.data()[start * c..end * c].to_vec();
        self.output(
            vec![end - start, c],
            out,
            &[x],
            Op::SliceRows { x: x.clone(), start, end },
        )
    }

    pub fn concat_rows(&self, xs: &[&Tensor]) -> Tensor {
        assert!(!xs.is_empty(), "concat_rows: empty list");
        let c = xs[0].shape()[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for x in xs {
            assert_eq!(x.shape().len(), 2, "concat_rows: rank-2 only");
            assert_eq!(x.shape()[1], c, "concat_rows: column mismatch");
            rows += x.shape()[0];
            data.extend_from_slice(&x.data());
        }
        let owned: Vec<Tensor> = xs.iter().map(|x| (*x).clone()).collect();
        self.output(vec![rows, c], data, xs, Op::ConcatRows { xs: owned })
    }

    pub fn pad_cols(&self, x: &Tensor, before: usize, after: usize) -> Tensor {
        assert_eq!(x.shape().len(), 2, "pad_cols: rank-2 only");
        let (t, c) = (x.shape()[0], x.shape()[1]);
        let w = before + c + after;
        let xd = x.data();
        let mut out = vec![0.0; t * w];
        for i in 0..t {
            out[i * w + before..i * w + before + c].copy_from_slice(&xd[i * c..(i + 1) * c]);
        }
        drop(xd);
        self.output(vec![t, w], out, &[x], Op::PadCols { x: x.clone(), before })
    }

    pub fn slice_cols(&self, x: &Tensor, start: usize, end: usize) -> Tensor {
        assert_eq!(x.shape().len(), 2, "slice_cols: rank-2 only");
        let (t, c) = (x.shape()[0], x.shape()[1]);
        assert!(start <= end && end <= c, "slice_cols: bad range {}..{} of {}", start, end, c);
        let w = end - start;
        let xd = x.data();
        let mut out = vec![0.0; t * w];
        for i in 0..t {
            out[i * w..(i + 1) * w].copy_from_slice(&xd[i * c + start..i * c + end]);
        }
        drop(xd);
        self.output(vec![t, w], out, &[x], Op::SliceCols { x: x.clone(), start, end })
    }

    pub fn concat_cols(&self, xs: &[&Tensor]) -> Tensor {
        assert!(!xs.is_empty(), "concat_cols: empty list");
        let t = xs[0].shape()[0];
        let total: usize = xs.iter().map(|x| x.shape()[1]).sum();
        let mut out = vec![0.0; t * total];
        let mut off = 0;
        for x in xs {
            assert_eq!(x.shape().len(), 2, "concat_cols: rank-2 only");
            assert_eq!(x.shape()[0], t, "concat_cols: row mismatch");
            let c = x.shape()[1];
            let xd = x.data();
            for i in 0..t {
                out[i * total + off..i * total + off + c]
                    .copy_from_slice(&xd[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let owned: Vec<Tensor> = xs.iter().map(|x| (*x).clone()).collect();
        self.output(vec![t, total], out, xs, Op::ConcatCols { xs: owned })
    }

    /// Row gather: out[i, :] = x[idx[i], :]. Also serves as embedding lookup.
    pub fn gather_rows(&self, x: &Tensor, idx: &[usize]) -> Tensor {
        assert_eq!(x.shape().len(), 2, "gather_rows: rank-2 only");
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let xd = x.data();
        let mut out = vec![0.0; idx.len() * c];
        for (i, &j) in idx.iter().enumerate() {
            assert!(j < r, "gather_rows: index {} out of {} rows", j, r);
            out[i * c..(i + 1) * c].copy_from_slice(&xd[j * c..(j + 1) * c]);
        }
        drop(xd);
        self.output(
            vec![idx.len(), c],
            out,
            &[x],
            Op::GatherRows { x: x.clone(), idx: Rc::new(idx.to_vec()) },
        )
    }

    fn scatter_add_rows(&self, x: &Tensor, idx: &Rc<Vec<usize>>, n_rows: usize) -> Tensor {
        let c = x.shape()[1];
        let xd = x.data();
        let mut out = vec![0.0; n_rows * c];
        for (i, &j) in idx.iter().enumerate() {
            for k in 0..c {
                out[j * c + k] += xd[i * c + k];
            }
        }
        drop(xd);
        self.output(
            vec![n_rows, c],
            out,
            &[x],
            Op::ScatterAddRows { x: x.clone(), idx: idx.clone() },
        )
    }

    /// Same data, new shape (element count preserved).
    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(n, x.numel(), "reshape: {:?} -> {:?}", x.shape(), shape);
        self.output(shape.to_vec(), x.to_vec(), &[x], Op::Reshape { x: x.clone() })
    }

    // ── reductions / broadcasts ─────────────────────────────────────

    pub fn sum_all(&self, a: &Tensor) -> Tensor {
        let s: f64 = a.data().iter().sum();
        self.output(vec![1], vec![s], &[a], Op::SumAll { a: a.clone() })
    }

    pub fn mean_all(&self, a: &Tensor) -> Tensor {
        let n = a.numel() as f64;
        let s: f64 = a.data().iter().sum();
        self.output(vec![1], vec![s / n], &[a], Op::MeanAll { a: a.clone() })
    }

    /// out = factor * s broadcast to `shape` (s is a [1] tensor).
    pub fn scalar_expand(&self, s: &Tensor, factor: f64, shape: &[usize]) -> Tensor {
        assert_eq!(s.numel(), 1, "scalar_expand: source must be scalar");
        let v = s.item() * factor;
        let n: usize = shape.iter().product();
        self.output(
            shape.to_vec(),
            vec![v; n],
            &[s],
            Op::ScalarExpand { s: s.clone(), factor },
        )
    }

    /// Per-row sum of a rank-2 tensor: [r, c] -> [r].
    pub fn row_sum(&self, a: &Tensor) -> Tensor {
        assert_eq!(a.shape().len(), 2, "row_sum: rank-2 only");
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let ad = a.data();
        let out: Vec<f64> = (0..r).map(|i| ad[i * c..(i + 1) * c].iter().sum()).collect();
        drop(ad);
        self.output(vec![r], out, &[a], Op::RowSum { a: a.clone() })
    }

    /// Per-column sum of a rank-2 tensor: [r, c] -> [c].
    pub fn col_sum(&self, a: &Tensor) -> Tensor {
        assert_eq!(a.shape().len(), 2, "col_sum: rank-2 only");
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let ad = a.data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(&ad[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        drop(ad);
        self.output(vec![c], out, &[a], Op::ColSum { a: a.clone() })
    }

    /// Repeat a [c] vector as every row of an [rows, c] matrix.
    pub fn broadcast_row(&self, v: &Tensor, rows: usize) -> Tensor {
        assert_eq!(v.shape().len(), 1, "broadcast_row: rank-1 only");
        let c = v.shape()[0];
        let vd = v.data();
        let mut out = vec![0.0; rows * c];
        for i in 0..rows {
            out[i * c..(i + 1) * c].copy_from_slice(&vd);
        }
        drop(vd);
        self.output(vec![rows, c], out, &[v], Op::BroadcastRow { v: v.clone() })
    }

    /// Repeat an [r] vector as every column of an [r, cols] matrix.
    pub fn col_broadcast(&self, v: &Tensor, cols: usize) -> Tensor {
        assert_eq!(v.shape().len(), 1, "col_broadcast: rank-1 only");
        let r = v.shape()[0];
        let vd = v.data();
        let mut out = vec![0.0; r * cols];
        for i in 0..r {
            for j in 0..cols {
                out[i * cols + j] = vd[i];
            }
        }
        drop(vd);
        self.output(vec![r, cols], out, &[v], Op::ColBroadcast { v: v.clone() })
    }

    // ── backward ────────────────────────────────────────────────────

    /// Populate `.grad` on every requires-grad leaf reachable from `loss`.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let grads = self.run_backward(loss);
        for (tensor, grad) in grads.values() {
            if tensor.is_leaf() && tensor.requires_grad() {
                tensor.accumulate_grad(&grad.data());
            }
        }
        Ok(())
    }

    /// Gradients of `loss` w.r.t. `wrt`, returned as tensors on this tape
    /// (differentiable again). Leaf `.grad` fields are not touched.
    pub fn grad(&self, loss: &Tensor, wrt: &[&Tensor]) -> Result<Vec<Tensor>> {
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "grad: loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let grads = self.run_backward(loss);
        Ok(wrt
            .iter()
            .map(|t| match grads.get(&t.id()) {
                Some((_, g)) => g.clone(),
                None => Tensor::zeros(t.shape().to_vec()),
            })
            .collect())
    }

    fn run_backward(&self, loss: &Tensor) -> HashMap<u64, (Tensor, Tensor)> {
        let mut grads: HashMap<u64, (Tensor, Tensor)> = HashMap::new();
        let seed = Tensor::constant(loss.shape().to_vec(), vec![1.0]);
        grads.insert(loss.id(), (loss.clone(), seed));
        let n = self.records.borrow().len();
        for i in (0..n).rev() {
            let rec = self.records.borrow()[i].clone();
            let gout = match grads.get(&rec.out.id()) {
                Some((_, g)) => g.clone(),
                None => continue,
            };
            let mut sink = |input: &Tensor, contrib: Tensor| {
                match grads.get(&input.id()) {
                    Some((t, g)) => {
                        let sum = self.add(g, &contrib);
                        grads.insert(t.id(), (t.clone(), sum));
                    }
                    None => {
                        grads.insert(input.id(), (input.clone(), contrib));
                    }
                }
            };
            self.vjp(&rec.op, &gout, &mut sink);
        }
        grads
    }

    fn vjp(&self, op: &Op, g: &Tensor, sink: &mut dyn FnMut(&Tensor, Tensor)) {
        match op {
            Op::Add { a, b } => {
                if a.requires_grad() {
                    sink(a, g.clone());
                }
                if b.requires_grad() {
                    sink(b, g.clone());
                }
            }
            Op::Sub { a, b } => {
                if a.requires_grad() {
                    sink(a, g.clone());
                }
                if b.requires_grad() {
                    sink(b, self.scale(g, -1.0));
                }
            }
            Op::Mul { a, b } => {
                if a.requires_grad() {
                    sink(a, self.mul(g, b));
                }
                if b.requires_grad() {
                    sink(b, self.mul(g, a));
                }
            }
            Op::Scale { a, c } => {
                if a.requires_grad() {
                    sink(a, self.scale(g, *c));
                }
            }
            Op::AddScalar { a } => {
                if a.requires_grad() {
                    sink(a, g.clone());
                }
            }
            Op::Matmul { a, b } => {
                if a.requires_grad() {
                    sink(a, self.matmul(g, &self.transpose(b)));
                }
                if b.requires_grad() {
                    sink(b, self.matmul(&self.transpose(a), g));
                }
            }
            Op::Transpose { a } => {
                if a.requires_grad() {
                    sink(a, self.transpose(g));
                }
            }
            Op::Relu { a, mask } | Op::LeakyRelu { a, mask } => {
                if a.requires_grad() {
                    sink(a, self.mul(g, mask));
                }
            }
            Op::Sigmoid { a } => {
                if a.requires_grad() {
                    let y = self.sigmoid(a);
                    let gy = self.mul(g, &y);
                    sink(a, self.sub(&gy, &self.mul(&gy, &y)));
                }
            }
            Op::Softplus { a } => {
                if a.requires_grad() {
                    sink(a, self.mul(g, &self.sigmoid(a)));
                }
            }
            Op::Sqrt { a } => {
                if a.requires_grad() {
                    let y = self.sqrt(a);
                    sink(a, self.mul(g, &self.scale(&self.recip(&y), 0.5)));
                }
            }
            Op::Recip { a } => {
                if a.requires_grad() {
                    let y = self.recip(a);
                    sink(a, self.scale(&self.mul(&self.mul(g, &y), &y), -1.0));
                }
            }
            Op::Ln { a } => {
                if a.requires_grad() {
                    sink(a, self.mul(g, &self.recip(a)));
                }
            }
            Op::SoftmaxRows { a } => {
                if a.requires_grad() {
                    let s = self.softmax_rows(a);
                    let gs = self.mul(g, &s);
                    let contrib = if a.shape().len() == 1 {
                        let rs = self.sum_all(&gs);
                        let expanded = self.scalar_expand(&rs, 1.0, a.shape());
                        self.mul(&s, &self.sub(g, &expanded))
                    } else {
                        let rs = self.row_sum(&gs);
                        let expanded = self.col_broadcast(&rs, a.shape()[1]);
                        self.mul(&s, &self.sub(g, &expanded))
                    };
                    sink(a, contrib);
                }
            }
            Op::Conv1d { x, k, stride } => {
                if x.requires_grad() {
                    sink(x, self.conv1d_back_input(g, k, *stride, x.shape()[0]));
                }
                if k.requires_grad() {
                    sink(k, self.conv1d_back_kernel(g, x, *stride, k.shape()[0]));
                }
            }
            Op::Conv1dBackInput { g: g0, k, stride } => {
                // out = A_k^T g0; d/d g0 = conv(upstream, k); d/d k bilinear.
                if g0.requires_grad() {
                    sink(g0, self.conv1d(g, k, *stride).expect("conv shapes fixed"));
                }
                if k.requires_grad() {
                    sink(k, self.conv1d_back_kernel(g0, g, *stride, k.shape()[0]));
                }
            }
            Op::Conv1dBackKernel { g: g0, x, stride, kw } => {
                // out = kernel-grad of <g0, conv(x, .)>.
                if g0.requires_grad() {
                    sink(g0, self.conv1d(x, g, *stride).expect("conv shapes fixed"));
                }
                if x.requires_grad() {
                    sink(x, self.conv1d_back_input(g0, g, *stride, x.shape()[0]));
                }
                let _ = kw;
            }
            Op::PadRows { x, before } => {
                if x.requires_grad() {
                    sink(x, self.slice_rows(g, *before, before + x.shape()[0]));
                }
            }
            Op::SliceRows { x, start, end } => {
                if x.requires_grad() {
                    sink(x, self.pad_rows(g, *start, x.shape()[0] - end));
                }
            }
            Op::ConcatRows { xs } => {
                let mut off = 0;
                for x in xs {
                    let r = x.shape()[0];
                    if x.requires_grad() {
                        sink(x, self.slice_rows(g, off, off + r));
                    }
                    off += r;
                }
            }
            Op::PadCols { x, before } => {
                if x.requires_grad() {
                    sink(x, self.slice_cols(g, *before, before + x.shape()[1]));
                }
            }
            Op::SliceCols { x, start, end } => {
                if x.requires_grad() {
                    sink(x, self.pad_cols(g, *start, x.shape()[1] - end));
                }
            }
            Op::ConcatCols { xs } => {
                let mut off = 0;
                for x in xs {
                    let c = x.shape()[1];
                    if x.requires_grad() {
                        sink(x, self.slice_cols(g, off, off + c));
                    }
                    off += c;
                }
            }
            Op::GatherRows { x, idx } => {
                if x.requires_grad() {
                    sink(x, self.scatter_add_rows(g, idx, x.shape()[0]));
                }
            }
            Op::ScatterAddRows { x, idx } => {
                if x.requires_grad() {
                    sink(x, self.gather_rows(g, idx));
                }
            }
            Op::SumAll { a } => {
                if a.requires_grad() {
                    sink(a, self.scalar_expand(g, 1.0, a.shape()));
                }
            }
            Op::MeanAll { a } => {
                if a.requires_grad() {
                    sink(a, self.scalar_expand(g, 1.0 / a.numel() as f64, a.shape()));
                }
            }
            Op::ScalarExpand { s, factor } => {
                if s.requires_grad() {
                    sink(s, self.scale(&self.sum_all(g), *factor));
                }
            }
            Op::RowSum { a } => {
                if a.requires_grad() {
                    sink(a, self.col_broadcast(g, a.shape()[1]));
                }
            }
            Op::ColSum { a } => {
                if a.requires_grad() {
                    sink(a, self.broadcast_row(g, a.shape()[0]));
                }
            }
            Op::BroadcastRow { v } => {
                if v.requires_grad() {
                    sink(v, self.col_sum(g));
                }
            }
            Op::ColBroadcast { v } => {
                if v.requires_grad() {
                    sink(v, self.row_sum(g));
                }
            }
            Op::Reshape { x } => {
                if x.requires_grad() {
                    sink(x, self.reshape(g, x.shape()));
                }
            }
            Op::CrossEntropyMean { logits, onehot } => {
                if logits.requires_grad() {
                    let t = logits.shape()[0] as f64;
                    let sm = self.softmax_rows(logits);
                    let diff = self.sub(&sm, onehot);
                    let gexp = self.scalar_expand(g, 1.0 / t, logits.shape());
                    sink(logits, self.mul(&diff, &gexp));
                }
            }
            Op::BceLogitsMean { logits, targets, w_over_n } => {
                if logits.requires_grad() {
                    let s = self.sigmoid(logits);
                    let d = self.mul(&self.sub(&s, targets), w_over_n);
                    let gexp = self.scalar_expand(g, 1.0, logits.shape());
                    sink(logits, self.mul(&d, &gexp));
                }
            }
        }
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn conv1d_output_lengths() {
        let tape = Tape::new();
        let x = Tensor::constant(vec![9, 2], vec![1.0; 18]);
        let k = Tensor::constant(vec![9, 2, 3], vec![0.5; 54]);
        let y = tape.conv1d(&x, &k, 3).unwrap();
        assert_eq!(y.shape(), &[1, 3]);

        let x = Tensor::constant(vec![15, 2], vec![1.0; 30]);
        let y = tape.conv1d(&x, &k, 3).unwrap();
        assert_eq!(y.shape(), &[3, 3]);
    }

    #[test]
    fn conv1d_zero_kernel_gives_zero_output() {
        let tape = Tape::new();
        let x = Tensor::constant(vec![12, 3], (0..36).map(|i| i as f64).collect());
        let k = Tensor::constant(vec![4, 3, 5], vec![0.0; 60]);
        let y = tape.conv1d(&x, &k, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv1d_too_short_input_is_shape_error() {
        let tape = Tape::new();
        let x = Tensor::constant(vec![5, 2], vec![1.0; 10]);
        let k = Tensor::constant(vec![9, 2, 3], vec![0.5; 54]);
        let err = tape.conv1d(&x, &k, 3).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('5') && msg.contains('9'), "message should name both: {}", msg);
    }

    #[test]
    fn conv1d_length_formula_exhaustive() {
        let tape = Tape::new();
        for t in 1..=32usize {
            for k in 1..=t {
                for s in 1..=4usize {
                    let x = Tensor::constant(vec![t, 1], vec![1.0; t]);
                    let ker = Tensor::constant(vec![k, 1, 1], vec![1.0; k]);
                    let y = tape.conv1d(&x, &ker, s).unwrap();
                    assert_eq!(y.shape()[0], (t - k) / s + 1, "t={} k={} s={}", t, k, s);
                }
            }
        }
    }

    #[test]
    fn conv1d_known_contraction() {
        // x = [[1],[2],[3],[4]], k = [1,1] stride 1 -> sliding sums.
        let tape = Tape::new();
        let x = Tensor::constant(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let k = Tensor::constant(vec![2, 1, 1], vec![1.0, 1.0]);
        let y = tape.conv1d(&x, &k, 1).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 5.0, 7.0]);
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let tape = Tape::new();
        let y = tape.softmax_rows(&Tensor::constant(vec![2], vec![0.0, 0.0]));
        assert_eq!(y.to_vec(), vec![0.5, 0.5]);

        let y = tape.softmax_rows(&Tensor::constant(vec![4], vec![3.7, 3.7, 3.7, 3.7]));
        for v in y.to_vec() {
            assert!(close(v, 0.25, 1e-12));
        }

        // shift invariance and normalization
        let a = Tensor::constant(vec![2, 3], vec![0.1, -2.0, 3.0, 1.0, 1.5, -0.5]);
        let b = Tensor::constant(vec![2, 3], vec![100.1, 98.0, 103.0, 101.0, 101.5, 99.5]);
        let sa = tape.softmax_rows(&a).to_vec();
        let sb = tape.softmax_rows(&b).to_vec();
        for (x, y) in sa.iter().zip(&sb) {
            assert!(close(*x, *y, 1e-12));
        }
        for row in sa.chunks(3) {
            assert!(close(row.iter().sum::<f64>(), 1.0, 1e-12));
        }
    }

    #[test]
    fn softmax_gradient_matches_analytic_jacobian() {
        let tape = Tape::new();
        let x = Tensor::param(vec![2], vec![0.0, 0.0]);
        let s = tape.softmax_rows(&x);
        let pick = Tensor::constant(vec![2], vec![1.0, 0.0]);
        let loss = tape.sum_all(&tape.mul(&s, &pick));
        tape.backward(&loss).unwrap();
        let g = x.grad().unwrap();
        assert!(close(g[0], 0.25, 1e-15) && close(g[1], -0.25, 1e-15), "{:?}", g);
    }

    #[test]
    #[should_panic(expected = "softmax: non-finite input")]
    fn softmax_rejects_nan() {
        let tape = Tape::new();
        tape.softmax_rows(&Tensor::constant(vec![2], vec![f64::NAN, 0.0]));
    }

    #[test]
    fn backward_quadratic() {
        let tape = Tape::new();
        let x = Tensor::param(vec![2], vec![1.0, 2.0]);
        let loss = tape.sum_all(&tape.mul(&x, &x));
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_constant_loss_leaves_grads_zero() {
        let tape = Tape::new();
        let x = Tensor::param(vec![2], vec![1.0, 2.0]);
        let c = Tensor::constant(vec![1], vec![5.0]);
        // x participates but the loss path is constant
        let _unused = tape.mul(&x, &x);
        let loss = tape.scale(&c, 2.0);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad_or_zeros(), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = Tensor::param(vec![2], vec![1.0, 2.0]);
        let y = tape.mul(&x, &x);
        assert!(tape.backward(&y).is_err());
    }

    #[test]
    fn backward_fanout_accumulates() {
        let tape = Tape::new();
        let x = Tensor::param(vec![1], vec![3.0]);
        let a = tape.scale(&x, 2.0);
        let b = tape.scale(&x, 5.0);
        let loss = tape.sum_all(&tape.add(&a, &b));
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let run = || {
            let tape = Tape::new();
            let x = Tensor::constant(vec![7, 4], (0..28).map(|i| (i as f64) * 0.37 - 2.0).collect());
            let k = Tensor::constant(vec![3, 4, 5], (0..60).map(|i| ((i * 17) % 13) as f64 * 0.1).collect());
            let y = tape.conv1d(&x, &k, 2).unwrap();
            let s = tape.softmax_rows(&y);
            tape.mean_all(&s).item()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn second_order_gradients_through_grad() {
        // f(x) = sum(x^3); g = df/dx = 3x^2; h = sum(g) has dh/dx = 6x.
        let tape = Tape::new();
        let x = Tensor::param(vec![2], vec![1.0, 2.0]);
        let x2 = tape.mul(&x, &x);
        let f = tape.sum_all(&tape.mul(&x2, &x));
        let g = tape.grad(&f, &[&x]).unwrap().remove(0);
        assert_eq!(g.to_vec(), vec![3.0, 12.0]);
        let h = tape.sum_all(&g);
        tape.backward(&h).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0, 12.0]);
    }
}
