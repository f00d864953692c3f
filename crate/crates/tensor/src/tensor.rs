use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Result, TensorError};
use crate::precision::precision;

/// Gradient rule of a recorded op: maps the gradient of the op's output to
/// one optional gradient per input, in input order.
pub type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

struct GradFn {
    op: &'static str,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    grad_fn: Option<GradFn>,
}

/// Immutable n-dimensional array; cloning is a reference-count bump.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl Tensor {
    fn make(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, grad_fn: Option<GradFn>) -> Self {
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            grad_fn,
        }))
    }

    /// Leaf tensor from row-major values. Values are rounded to the current
    /// precision.
    pub fn new(mut data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::dim(
                "new",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        if shape.contains(&0) {
            return Err(TensorError::dim("new", format!("zero extent in {shape:?}")));
        }
        precision().round_slice(&mut data);
        Ok(Self::make(shape.to_vec(), data, false, None))
    }

    pub fn from_f32(data: &[f32], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| v as f64).collect(), shape)
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![v], &[1]).expect("scalar shape")
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::new(vec![v; shape.iter().product()], shape).expect("full shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// Trainable leaf.
    pub fn parameter(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Ok(Self::new(data, shape)?.with_requires_grad(true))
    }

    /// A new leaf sharing this tensor's values, with the given grad flag.
    /// Any recorded history is dropped.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Self {
        Self::make(self.0.shape.clone(), self.0.data.clone(), requires_grad, None)
    }

    /// A leaf copy that does not participate in differentiation.
    pub fn detach(&self) -> Self {
        self.with_requires_grad(false)
    }

    /// Records the result of a custom op. `data` is rounded to the current
    /// precision. When no input requires a gradient the result is a plain
    /// leaf and `backward` is dropped.
    pub fn from_op(
        op: &'static str,
        mut data: Vec<f64>,
        shape: Vec<usize>,
        inputs: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{op}: shape/data");
        precision().round_slice(&mut data);
        if inputs.iter().any(Tensor::requires_grad) {
            Self::make(
                shape,
                data,
                true,
                Some(GradFn {
                    op,
                    inputs,
                    backward,
                }),
            )
        } else {
            Self::make(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.0.data.iter().map(|&v| v as f32).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Name of the op that produced this tensor, if it was recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.op)
    }

    /// Accumulated gradient of a leaf after [`Tensor::backward`].
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    /// True when both tensors are the same node.
    pub fn same_node(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Reverse-mode pass from a single-element loss. Gradients are
    /// accumulated into every reachable leaf that requires them.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.0.id) {
                continue;
            }
            if let Some(g) = &t.0.grad_fn {
                for input in &g.inputs {
                    if input.requires_grad() && !seen.contains(&input.0.id) {
                        stack.push(input.clone());
                    }
                }
            }
            order.push(t);
        }
        order.sort_by_key(|e| std::cmp::Reverse(e.0.id));

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.0.id, vec![1.0]);
        for t in &order {
            let Some(g) = grads.remove(&t.0.id) else {
                continue;
            };
            match &t.0.grad_fn {
                Some(f) => {
                    let input_grads = (f.backward)(&g);
                    debug_assert_eq!(input_grads.len(), f.inputs.len(), "{}", f.op);
                    for (input, ig) in f.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), input.numel(), "{}: grad size", f.op);
                        match grads.get_mut(&input.0.id) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(input.0.id, ig);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = t.0.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.op_name())
            .field("data", &preview)
            .finish()
    }
}
