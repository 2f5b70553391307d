use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

/// Computes the gradient contribution for each parent from the output gradient.
pub(crate) type GradFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct Op {
    parents: Vec<Tensor>,
    grad_fn: GradFn,
}

struct Node {
    id: usize,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    op: Option<Op>,
}

/// Dense row-major `f64` array with an optional gradient slot.
///
/// Tensors are cheap to clone (reference counted) and immutable once built.
/// Operations on tensors that require gradients record a backward closure so
/// that [`Tensor::backward`] can propagate through the graph.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            op,
        }))
    }

    /// Constant tensor; never receives a gradient.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        check_len(&data, shape)?;
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that accumulates gradients (a trainable parameter).
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        check_len(&data, shape)?;
        Ok(Self::build(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), vec![0.0; n], false, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![], vec![value], false, None)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::build(vec![n], data, false, None)
    }

    pub fn matrix(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Contract("ragged matrix rows".into()));
        }
        Self::new(rows.into_iter().flatten().collect(), &[r, c])
    }

    /// Result of an operation. Records `grad_fn` only if some parent needs gradients.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        grad_fn: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    ) -> Self {
        if parents.iter().any(Tensor::requires_grad) {
            let op = Op {
                parents,
                grad_fn: Box::new(grad_fn),
            };
            Self::build(shape, data, true, Some(op))
        } else {
            Self::build(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.0.data
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data[0])
    }

    /// Number of rows when viewed as a matrix (1 for vectors and scalars).
    pub fn rows(&self) -> usize {
        match self.shape() {
            [r, _] => *r,
            _ => 1,
        }
    }

    /// Trailing dimension (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape().last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.0.data[r * c..(r + 1) * c]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// Same values and shape as a fresh trainable leaf.
    pub fn to_param(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.0.data.clone(), true, None)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            self.0.data.clone(),
            shape.to_vec(),
            vec![self.clone()],
            |g| vec![Some(g.to_vec())],
        ))
    }

    /// Reverse-mode sweep from a scalar. Gradients are added to the grad slot
    /// of every reachable tensor that requires them.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
        pending.insert(self.0.id, vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.0.id) else {
                continue;
            };
            {
                let mut slot = node.0.grad.lock().expect("grad lock poisoned");
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g.clone()),
                }
            }
            if let Some(op) = &node.0.op {
                let grads = (op.grad_fn)(&g);
                for (parent, pg) in op.parents.iter().zip(grads) {
                    let Some(pg) = pg else { continue };
                    if !parent.requires_grad() {
                        continue;
                    }
                    match pending.get_mut(&parent.0.id) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(parent.0.id, pg);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes reachable from `self` that require gradients, parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.0.id) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(op) = &node.0.op {
                for p in &op.parents {
                    if p.requires_grad() && !visited.contains(&p.0.id) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

fn check_len(data: &[f64], shape: &[usize]) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::shape("tensor", &[data.len()], shape));
    }
    Ok(())
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("values", &self.0.data)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl PartialEq for Tensor {
    /// Value equality (shape and elementwise `==`); ignores gradient state.
    fn eq(&self, other: &Self) -> bool {
        self.shape() == other.shape() && self.values() == other.values()
    }
}
