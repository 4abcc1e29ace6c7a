use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Dense 64-bit tensor, row-major. Cheap to clone: clones share storage.
///
/// A tensor is either a leaf (created directly; parameters and constants)
/// or the output of a tape operation. Gradients accumulate into `grad`
/// when `Tape::backward` reaches a leaf with `requires_grad`.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    leaf: bool,
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, leaf: bool) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                leaf,
            }),
        }
    }

    /// Leaf tensor that does not take gradients.
    pub fn constant(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::build(shape, data, false, true)
    }

    /// Trainable leaf tensor.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::build(shape, data, true, true)
    }

    /// Non-leaf output of a tape operation.
    pub(crate) fn op_output(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor::build(shape, data, requires_grad, false)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::constant(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(vec![1], vec![v])
    }

    /// New no-grad leaf holding a copy of this tensor's current values.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.shape().to_vec(), self.data().clone())
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.leaf
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    /// Copy of the values (convenient when a borrow must not be held).
    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value; panics if numel != 1.
    pub fn item(&self) -> f64 {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor with {} elements", d.len());
        d[0]
    }

    /// Overwrite values in place (optimizer updates). Shape must match.
    pub fn set_data(&self, values: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), values.len(), "set_data length mismatch");
        d.copy_from_slice(values);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    /// Accumulated gradient, or zeros when none has flowed.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.inner
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    /// Rows of a rank-2 tensor (or length of a rank-1 tensor viewed as one row).
    pub fn rows(&self) -> usize {
        match self.inner.shape.len() {
            1 => 1,
            2 => self.inner.shape[0],
            r => panic!("rows() on rank-{} tensor", r),
        }
    }

    /// Columns of a rank-1 or rank-2 tensor.
    pub fn cols(&self) -> usize {
        match self.inner.shape.len() {
            1 => self.inner.shape[0],
            2 => self.inner.shape[1],
            r => panic!("cols() on rank-{} tensor", r),
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}
