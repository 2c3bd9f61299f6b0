//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a reference-counted node in a computation graph. Leaves
//! created with [`Tensor::param`] accumulate gradients when
//! [`Tensor::backward`] is called on a scalar that depends on them. Every
//! differentiable primitive lives in one of the submodules and is built on
//! [`Tensor::from_op`], which is also public so that loss functions elsewhere
//! in the crate can define fused ops with hand-written backward passes.
//!
//! Values are immutable after creation; only gradient buffers change.

mod conv;
pub mod gradcheck;
mod norm;
mod ops;
pub mod optim;

pub use conv::{bilinear_upsample2x, conv2d, depthwise_conv2d};
pub use norm::{batchnorm2d, layer_norm, BnMode, RunningStats};
pub use ops::{concat_channels, linear, matmul, sigmoid};
pub(crate) use ops::softmax_in_place;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Vector-Jacobian product of one recorded op: maps the output gradient to one
/// optional gradient per input (in input order).
pub type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct OpRecord {
    name: &'static str,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: RefCell<Option<Vec<f64>>>,
    op: Option<OpRecord>,
    requires_grad: bool,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
    static FAULTY_OP: RefCell<Option<String>> = const { RefCell::new(None) };
}

/// Runs `f` without recording any operations. Results are plain leaves.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = NO_GRAD.with(|c| c.replace(true));
    let out = f();
    NO_GRAD.with(|c| c.set(prev));
    out
}

fn grad_enabled() -> bool {
    !NO_GRAD.with(|c| c.get())
}

/// Test hook: corrupts the backward pass of the named op (scales its input
/// gradients by 1.5). Pass `None` to restore correct behavior.
#[doc(hidden)]
pub fn inject_backward_fault(op: Option<&str>) {
    FAULTY_OP.with(|f| *f.borrow_mut() = op.map(str::to_owned));
}

fn fault_for(name: &str) -> bool {
    FAULTY_OP.with(|f| f.borrow().as_deref() == Some(name))
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            shape,
            data,
            grad: RefCell::new(None),
            op: None,
            requires_grad,
        }))
    }

    /// Constant tensor (never receives gradient).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Tensor::leaf(data, shape.to_vec(), false))
    }

    /// Trainable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::new(data, shape)?;
        Ok(Tensor::leaf(t.0.data.clone(), t.0.shape.clone(), true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::leaf(vec![0.0; numel(shape)], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::leaf(vec![value; numel(shape)], shape.to_vec(), false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(vec![value], vec![], false)
    }

    /// Builds the output of a differentiable op.
    ///
    /// When gradients are disabled or no input requires them, the result is a
    /// plain leaf and `backward` is dropped.
    pub fn from_op(
        name: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        inputs: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len(), "{name}: output size");
        let requires_grad = grad_enabled() && inputs.iter().any(Tensor::requires_grad);
        if !requires_grad {
            return Tensor::leaf(data, shape, false);
        }
        Tensor(Rc::new(Node {
            shape,
            data,
            grad: RefCell::new(None),
            op: Some(OpRecord { name, inputs, backward }),
            requires_grad: true,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Name of the producing op, if any.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.op.as_ref().map(|o| o.name)
    }

    pub fn grad(&self) -> Option<Ref<'_, Vec<f64>>> {
        let g = self.0.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().unwrap()))
        } else {
            None
        }
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Returns a new constant leaf sharing this tensor's values.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.0.data.clone(), self.0.shape.clone(), false)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor with shape {:?}", self.shape());
        self.0.data[0]
    }

    fn id(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    /// Reverse pass from a scalar. Gradients are added into the `grad`
    /// buffer of every reachable leaf that requires grad.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Contract(
                "loss is not connected to any tensor that requires grad".into(),
            ));
        }

        // Iterative post-order DFS gives a topological order.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashMap<*const Node, ()> = HashMap::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if visited.insert(t.id(), ()).is_some() {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for inp in &op.inputs {
                    if inp.requires_grad() && !visited.contains_key(&inp.id()) {
                        stack.push((inp.clone(), false));
                    }
                }
            }
        }

        let mut grads: HashMap<*const Node, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else { continue };
            match &t.0.op {
                None => {
                    let mut slot = t.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    let mut input_grads = (op.backward)(&g);
                    if fault_for(op.name) {
                        for ig in input_grads.iter_mut().flatten() {
                            ig.iter_mut().for_each(|v| *v *= 1.5);
                        }
                    }
                    debug_assert_eq!(input_grads.len(), op.inputs.len(), "{}", op.name);
                    for (inp, ig) in op.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !inp.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), inp.numel(), "{} grad size", op.name);
                        match grads.get_mut(&inp.id()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(inp.id(), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("op", &self.op_name())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}
