//! Dense 2-D tensors with reverse-mode automatic differentiation.
//!
//! Everything neural in this crate runs on [`Tensor`]: row-major `f32`
//! storage, explicit shapes (no broadcasting), and a tape built implicitly as
//! ops execute. [`Tensor::backward`] walks the tape once in reverse
//! topological order and accumulates gradients into every `requires_grad`
//! leaf. Reductions, matmuls and normalizations accumulate in `f64` so the
//! tight equality tolerances used by the attention diagnostics hold in f32
//! storage.
//!
//! Conventions:
//! - every tensor is 2-D; scalars are 1x1, vectors are 1xN or Nx1
//! - shape mismatches panic with the op name and both shapes (programmer
//!   error, fail fast)
//! - gradients accumulate across `backward` calls until `zero_grad`
//! - `relu`/`max_const` use subgradient 0 at the kink

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;

mod ops;
pub mod store;

pub use ops::Mask;
pub(crate) use ops::Op;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TensorError {
    #[error("backward requires a scalar loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("softmax row {row} has every column masked")]
    AllMaskedRow { row: usize },
}

pub(crate) struct Node {
    pub(crate) rows: usize,
    pub(crate) cols: usize,
    pub(crate) data: Vec<f32>,
    pub(crate) grad: Option<Vec<f32>>,
    pub(crate) requires_grad: bool,
    pub(crate) parents: Vec<Tensor>,
    pub(crate) op: Option<Op>,
    /// Full-precision value of a 1x1 reduction result, kept so
    /// finite-difference probes are not limited by f32 output rounding.
    pub(crate) scalar64: Option<f64>,
}

/// Shared handle to a node in the autodiff graph. Cloning is cheap and
/// aliases the same storage.
pub struct Tensor(pub(crate) Rc<RefCell<Node>>);

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.0.borrow();
        write!(f, "Tensor({}x{}, grad={})", n.rows, n.cols, n.requires_grad)
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables tape recording while the returned guard lives. Used by sampling
/// and finite-difference evaluation, where gradients are never needed.
pub struct NoGradGuard {
    prev: bool,
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        let prev = self.prev;
        GRAD_ENABLED.with(|g| g.set(prev));
    }
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

impl Tensor {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Tensor {
        assert_eq!(
            data.len(),
            rows * cols,
            "from_vec: data length {} does not fill {}x{}",
            data.len(),
            rows,
            cols
        );
        Tensor(Rc::new(RefCell::new(Node {
            rows,
            cols,
            data,
            grad: None,
            requires_grad: false,
            parents: Vec::new(),
            op: None,
            scalar64: None,
        })))
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(rows, cols, vec![0.0; rows * cols])
    }

    pub fn full(rows: usize, cols: usize, value: f32) -> Tensor {
        Tensor::from_vec(rows, cols, vec![value; rows * cols])
    }

    pub fn eye(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::from_vec(n, n, data)
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::from_vec(1, 1, vec![value])
    }

    /// Gaussian init via Box-Muller; depends only on the RNG stream, so a
    /// seeded rng gives identical weights on every platform.
    pub fn randn<R: rand::Rng>(rows: usize, cols: usize, std: f32, rng: &mut R) -> Tensor {
        let n = rows * cols;
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
            data.push((r * c * std as f64) as f32);
            if data.len() < n {
                data.push((r * s * std as f64) as f32);
            }
        }
        Tensor::from_vec(rows, cols, data)
    }

    /// Marks this leaf as a trainable parameter.
    pub fn with_grad(self) -> Tensor {
        {
            let mut n = self.0.borrow_mut();
            assert!(n.op.is_none(), "with_grad only applies to leaf tensors");
            n.requires_grad = true;
        }
        self
    }

    pub(crate) fn from_op(
        rows: usize,
        cols: usize,
        data: Vec<f32>,
        parents: Vec<Tensor>,
        op: Op,
    ) -> Tensor {
        debug_assert_eq!(data.len(), rows * cols);
        let record = grad_enabled() && parents.iter().any(|p| p.traced());
        Tensor(Rc::new(RefCell::new(Node {
            rows,
            cols,
            data,
            grad: None,
            requires_grad: false,
            parents: if record { parents } else { Vec::new() },
            op: record.then_some(op),
            scalar64: None,
        })))
    }

    pub(crate) fn cache_scalar64(self, v: f64) -> Tensor {
        self.0.borrow_mut().scalar64 = Some(v);
        self
    }

    /// Scalar value at the precision it was reduced in; falls back to the
    /// stored f32 for non-reduction nodes.
    pub fn item_f64(&self) -> f64 {
        let n = self.0.borrow();
        assert_eq!(n.rows * n.cols, 1, "item_f64() requires a 1x1 tensor");
        n.scalar64.unwrap_or(n.data[0] as f64)
    }

    pub fn rows(&self) -> usize {
        self.0.borrow().rows
    }

    pub fn cols(&self) -> usize {
        self.0.borrow().cols
    }

    pub fn shape(&self) -> (usize, usize) {
        let n = self.0.borrow();
        (n.rows, n.cols)
    }

    pub fn len(&self) -> usize {
        let n = self.0.borrow();
        n.rows * n.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> Ref<'_, [f32]> {
        Ref::map(self.0.borrow(), |n| n.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.borrow().data.clone()
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        let n = self.0.borrow();
        assert!(r < n.rows && c < n.cols, "get({r},{c}) out of {}x{}", n.rows, n.cols);
        n.data[r * n.cols + c]
    }

    pub fn item(&self) -> f32 {
        let n = self.0.borrow();
        assert_eq!(n.rows * n.cols, 1, "item() requires a 1x1 tensor, got {}x{}", n.rows, n.cols);
        n.data[0]
    }

    /// Overwrites the payload of a leaf tensor in place (optimizer updates,
    /// finite-difference probes). Not allowed on op outputs: their data is a
    /// function of their parents.
    pub fn set_data(&self, data: &[f32]) {
        let mut n = self.0.borrow_mut();
        assert!(n.op.is_none(), "set_data only applies to leaf tensors");
        assert_eq!(data.len(), n.data.len(), "set_data: length mismatch");
        n.data.copy_from_slice(data);
    }

    pub fn data_mut(&self) -> RefMut<'_, Vec<f32>> {
        let n = self.0.borrow();
        assert!(n.op.is_none(), "data_mut only applies to leaf tensors");
        drop(n);
        RefMut::map(self.0.borrow_mut(), |n| &mut n.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        let mut n = self.0.borrow_mut();
        n.grad = None;
    }

    /// Leaf copy of the current values, disconnected from the tape.
    pub fn detach(&self) -> Tensor {
        let n = self.0.borrow();
        Tensor::from_vec(n.rows, n.cols, n.data.clone())
    }

    /// Stable identity of the underlying node, usable as a map key.
    pub fn id(&self) -> usize {
        Rc::as_ptr(&self.0) as *const () as usize
    }

    pub(crate) fn traced(&self) -> bool {
        let n = self.0.borrow();
        n.requires_grad || n.op.is_some()
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[f32]) {
        let mut n = self.0.borrow_mut();
        let len = n.rows * n.cols;
        debug_assert_eq!(contribution.len(), len);
        let grad = n.grad.get_or_insert_with(|| vec![0.0; len]);
        for (g, c) in grad.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    /// Reverse-mode pass from a scalar loss. Gradients accumulate into every
    /// `requires_grad` leaf reachable from `self`; call `zero_grad` between
    /// steps to reset.
    pub fn backward(&self) -> Result<(), TensorError> {
        {
            let n = self.0.borrow();
            if n.rows * n.cols != 1 {
                return Err(TensorError::NonScalarLoss { rows: n.rows, cols: n.cols });
            }
        }
        let order = topo_order(self);
        self.accumulate_grad(&[1.0]);
        for t in order.iter().rev() {
            let (op, parents, out_grad) = {
                let n = t.0.borrow();
                let Some(op) = n.op.clone() else { continue };
                let Some(grad) = n.grad.clone() else { continue };
                (op, n.parents.clone(), grad)
            };
            ops::backprop(&op, t, &parents, &out_grad);
        }
        // Intermediate grads are only needed within this pass; dropping them
        // keeps repeated-forward loops from holding stale buffers.
        for t in order.iter() {
            let mut n = t.0.borrow_mut();
            if !n.requires_grad && n.op.is_some() && !Rc::ptr_eq(&t.0, &self.0) {
                n.grad = None;
            }
        }
        Ok(())
    }
}

/// Post-order over the tape: every node appears after all of its parents.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<usize> = HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = Vec::new();
    visited.insert(root.id());
    stack.push((root.clone(), 0));
    while let Some((t, pi)) = stack.pop() {
        let next = {
            let n = t.0.borrow();
            n.parents.get(pi).cloned()
        };
        match next {
            Some(p) => {
                stack.push((t, pi + 1));
                if visited.insert(p.id()) {
                    stack.push((p, 0));
                }
            }
            None => order.push(t),
        }
    }
    order
}

/// Compares analytic gradients against central finite differences.
///
/// Returns the max over all input elements of
/// `|analytic - cd| / (|analytic| + |cd| + 1e-8)`. `f` must be scalar-valued
/// and twice differentiable at `inputs` away from relu kinks; a kink inside
/// the probe interval makes the central difference meaningless for that
/// element.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f32) -> Result<f32, TensorError>
where
    F: Fn(&[Tensor]) -> Tensor,
{
    for t in inputs {
        assert!(t.requires_grad(), "grad_check inputs must require grad");
        t.zero_grad();
    }
    let out = f(inputs);
    out.backward()?;
    let analytic: Vec<Vec<f32>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let _guard = no_grad();
    let mut max_rel = 0.0f32;
    for (ti, t) in inputs.iter().enumerate() {
        let base = t.to_vec();
        for j in 0..base.len() {
            let mut probe = base.clone();
            probe[j] = base[j] + eps;
            let stored_plus = probe[j];
            t.set_data(&probe);
            let f_plus = f(inputs).item_f64();
            probe[j] = base[j] - eps;
            let stored_minus = probe[j];
            t.set_data(&probe);
            let f_minus = f(inputs).item_f64();
            t.set_data(&base);
            // Divide by the step as actually stored in f32, not the nominal
            // 2*eps; otherwise representation rounding of x±eps dominates.
            let cd = ((f_plus - f_minus) / (stored_plus - stored_minus) as f64) as f32;
            let a = analytic[ti][j];
            let rel = (a - cd).abs() / (a.abs() + cd.abs() + 1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Single-input convenience wrapper around [`grad_check`].
pub fn grad_check_one<F>(f: F, x: &Tensor, eps: f32) -> Result<f32, TensorError>
where
    F: Fn(&Tensor) -> Tensor,
{
    grad_check(|xs| f(&xs[0]), std::slice::from_ref(x), eps)
}
