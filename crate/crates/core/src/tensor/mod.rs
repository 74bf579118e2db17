//! Dense tensors with a reverse-mode autodiff graph.
//!
//! Every op that sees at least one input with `requires_grad` records a node
//! holding its inputs and a backward closure. [`Tensor::backward`] walks the
//! nodes reachable from a scalar loss in reverse topological order, pushes
//! gradients to leaves, and then consumes the graph.

mod gradcheck;
mod ops;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::iter::Sum;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};

use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub(crate) use ops::{gemm, gemm_nt};

/// On-disk element type tag, shared by the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Element type of a tensor: `f32` for training, `f64` for verification.
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: DType;

    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any graph nodes on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Backward rule: maps the output gradient to one optional gradient per input.
pub type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Node<T: Real> {
    op: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Real> {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    node: Mutex<Option<Node<T>>>,
    consumed: AtomicBool,
}

/// Shared handle to a dense row-major tensor. Cloning is cheap.
pub struct Tensor<T: Real> {
    inner: Arc<Inner<T>>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("op", &self.op_name())
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    fn build(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                requires_grad,
                grad: Mutex::new(None),
                node: Mutex::new(node),
                consumed: AtomicBool::new(false),
            }),
        }
    }

    fn check_shape(data_len: usize, shape: &[usize]) -> Result<()> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim(format!(
                "shape {shape:?} must be non-empty with positive sizes"
            )));
        }
        if numel_of(shape) != data_len {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {} values but data has {data_len}",
                numel_of(shape)
            )));
        }
        Ok(())
    }

    /// Constant tensor (never accumulates gradient).
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::check_shape(data.len(), shape)?;
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// Trainable leaf.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        Self::check_shape(data.len(), shape)?;
        Ok(Self::build(data, shape.to_vec(), true, None))
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| T::lit(v)).collect(), shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(!shape.is_empty() && !shape.contains(&0), "invalid shape {shape:?}");
        Self::build(vec![value; numel_of(shape)], shape.to_vec(), false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::build(vec![value], vec![1], false, None)
    }

    /// Gaussian values scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n = numel_of(shape);
        let data = (0..n)
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        Self::build(data, shape.to_vec(), false, None)
    }

    /// Same data, now a trainable leaf.
    pub fn into_param(self) -> Self {
        let data = self.to_vec();
        Self::build(data, self.inner.shape.clone(), true, None)
    }

    /// Same data as a fresh constant with no history.
    pub fn detach(&self) -> Self {
        Self::build(self.to_vec(), self.inner.shape.clone(), false, None)
    }

    /// Records an op result. A node is kept only when grad recording is on
    /// and some input requires grad.
    pub fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        op: &'static str,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let track = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if track {
            Self::build(
                data,
                shape,
                true,
                Some(Node {
                    op,
                    inputs,
                    backward,
                }),
            )
        } else {
            Self::build(data, shape, false, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.inner.shape[axis]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True when this tensor carries a recorded op (not a leaf).
    pub fn has_graph(&self) -> bool {
        self.inner.node.lock().unwrap().is_some()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.inner.node.lock().unwrap().as_ref().map(|n| n.op)
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<T>> {
        self.inner.data.read().unwrap()
    }

    /// Direct mutable access, used by optimizers and checkpoint restore.
    pub fn data_mut(&self) -> RwLockWriteGuard<'_, Vec<T>> {
        self.inner.data.write().unwrap()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data().iter().map(|v| v.as_f64()).collect()
    }

    /// Replaces the values of this tensor in place.
    pub fn set_data(&self, values: Vec<T>) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::dim(format!(
                "cannot assign {} values to tensor of shape {:?}",
                values.len(),
                self.shape()
            )));
        }
        *self.data_mut() = values;
        Ok(())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.data()[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.inner.grad.lock().unwrap();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|v| U::lit(v.as_f64())).collect();
        Tensor::build(data, self.inner.shape.clone(), false, None)
    }

    /// Reverse-mode sweep from this scalar. Leaf gradients are accumulated
    /// additively; the traversed graph is consumed afterwards.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if self.inner.consumed.load(Ordering::Acquire) {
            return Err(Error::State("graph already consumed by a previous backward".into()));
        }
        if !self.requires_grad() {
            return Err(Error::Contract("loss is not attached to any trainable input".into()));
        }

        let order = self.topo_order()?;
        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);

        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            let node = t.inner.node.lock().unwrap();
            match node.as_ref() {
                Some(node) => {
                    let input_grads = (node.backward)(&g);
                    debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.op);
                    for (input, ig) in node.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), input.numel(), "op {}", node.op);
                        match grads.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                            None => {
                                grads.insert(input.id(), ig);
                            }
                        }
                    }
                }
                None => t.accumulate_grad(&g),
            }
        }

        for t in &order {
            let mut node = t.inner.node.lock().unwrap();
            if node.take().is_some() {
                t.inner.consumed.store(true, Ordering::Release);
            }
        }
        Ok(())
    }

    /// Post-order DFS over recorded nodes, children before parents.
    fn topo_order(&self) -> Result<Vec<Tensor<T>>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            if t.inner.consumed.load(Ordering::Acquire) {
                return Err(Error::State(
                    "graph reaches a tensor whose history was consumed by an earlier backward".into(),
                ));
            }
            let inputs: Vec<Tensor<T>> = t
                .inner
                .node
                .lock()
                .unwrap()
                .as_ref()
                .map(|n| n.inputs.iter().filter(|i| i.requires_grad()).cloned().collect())
                .unwrap_or_default();
            stack.push((t, true));
            for input in inputs.into_iter().rev() {
                if !visited.contains(&input.id()) {
                    stack.push((input, false));
                }
            }
        }
        Ok(order)
    }
}
