//! Define-by-run reverse-mode differentiation tape.
//!
//! A [`Tape`] records one forward pass; [`Tape::backward`] replays it in
//! reverse and accumulates gradients into the watched parameters. Tapes are
//! rebuilt per forward pass and confined to one execution context.

use std::cell::RefCell;
use std::rc::Rc;

use crate::autodiff::params::{ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// n-dimensional value array, optionally connected to a tape node.
///
/// Values are shared (`Rc`) so backward closures can capture them without
/// copying. `product(shape) == values.len()` always holds.
#[derive(Clone)]
pub struct Tensor<F: Scalar> {
    pub(crate) shape: Vec<usize>,
    pub(crate) values: Rc<Vec<F>>,
    pub(crate) node: Option<NodeId>,
}

impl<F: Scalar> Tensor<F> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self) -> F {
        debug_assert_eq!(self.values.len(), 1);
        self.values[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.as_f64()).collect()
    }
}

impl<F: Scalar> std::fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

/// Gradient buffers indexed by node, lazily allocated during the sweep.
pub struct GradStore<F: Scalar> {
    bufs: Vec<Vec<F>>,
    lens: Vec<usize>,
}

impl<F: Scalar> GradStore<F> {
    fn new(lens: Vec<usize>) -> Self {
        let bufs = vec![Vec::new(); lens.len()];
        GradStore { bufs, lens }
    }

    /// Mutable gradient buffer of a node, zero-filled on first access.
    pub fn buf_mut(&mut self, id: NodeId) -> &mut [F] {
        let slot = &mut self.bufs[id.0];
        if slot.is_empty() && self.lens[id.0] > 0 {
            *slot = vec![F::zero(); self.lens[id.0]];
        }
        slot
    }

    fn take(&mut self, idx: usize) -> Vec<F> {
        std::mem::take(&mut self.bufs[idx])
    }

    fn restore(&mut self, idx: usize, buf: Vec<F>) {
        self.bufs[idx] = buf;
    }

    /// Gradient of a node, `None` if the node was never reached.
    pub fn get(&self, id: NodeId) -> Option<&[F]> {
        let b = &self.bufs[id.0];
        if b.is_empty() {
            None
        } else {
            Some(b)
        }
    }
}

/// Result of a backward sweep; resolves gradients of watched tensors.
pub struct Gradients<F: Scalar> {
    store: GradStore<F>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient w.r.t. a tracked tensor; zeros if it was not reached.
    pub fn wrt(&self, t: &Tensor<F>) -> Vec<F> {
        match t.node.and_then(|n| self.store.get(n)) {
            Some(g) => g.to_vec(),
            None => vec![F::zero(); t.len()],
        }
    }
}

pub(crate) type BackFn<F> = Box<dyn Fn(&[F], &mut GradStore<F>)>;

struct Node<F: Scalar> {
    len: usize,
    back: Option<BackFn<F>>,
}

/// Wengert list of one forward pass.
pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
    param_nodes: RefCell<Vec<(ParamId, NodeId)>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub(crate) fn push(&self, len: usize, back: Option<BackFn<F>>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(Node { len, back });
        id
    }

    /// Untracked tensor; participates in forward values only.
    pub fn constant(&self, shape: Vec<usize>, values: Vec<F>) -> Tensor<F> {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor { shape, values: Rc::new(values), node: None }
    }

    pub fn scalar(&self, v: F) -> Tensor<F> {
        self.constant(vec![1], vec![v])
    }

    /// Tracked leaf: its gradient can be read from [`Gradients::wrt`].
    pub fn watch(&self, shape: Vec<usize>, values: Vec<F>) -> Tensor<F> {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let node = self.push(values.len(), None);
        Tensor { shape, values: Rc::new(values), node: Some(node) }
    }

    /// Bind a parameter to the tape as a tracked leaf. After `backward`,
    /// its gradient is accumulated into `ParamSet::grad`.
    pub fn param(&self, params: &ParamSet<F>, id: ParamId) -> Tensor<F> {
        let p = params.get(id);
        let node = self.push(p.values.len(), None);
        self.param_nodes.borrow_mut().push((id, node));
        Tensor {
            shape: p.shape.clone(),
            values: Rc::new(p.values.clone()),
            node: Some(node),
        }
    }

    /// Bind a parameter without tracking (evaluation mode).
    pub fn param_frozen(&self, params: &ParamSet<F>, id: ParamId) -> Tensor<F> {
        let p = params.get(id);
        Tensor {
            shape: p.shape.clone(),
            values: Rc::new(p.values.clone()),
            node: None,
        }
    }

    /// Reverse sweep from a scalar loss. Gradients of bound parameters are
    /// added into `params`; the returned [`Gradients`] resolves watched
    /// leaves. The sweep is sequential and deterministic.
    pub fn backward(&self, loss: &Tensor<F>, params: &mut ParamSet<F>) -> Result<Gradients<F>> {
        let root = loss
            .node
            .ok_or_else(|| Error::validation("backward: loss is not connected to the tape"))?;
        if loss.len() != 1 {
            return Err(Error::validation(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape
            )));
        }
        let nodes = self.nodes.borrow();
        let lens: Vec<usize> = nodes.iter().map(|n| n.len).collect();
        let mut store = GradStore::new(lens);
        store.buf_mut(root)[0] = F::one();

        for idx in (0..=root.0).rev() {
            let buf = store.take(idx);
            if buf.is_empty() {
                continue;
            }
            if let Some(back) = &nodes[idx].back {
                back(&buf, &mut store);
            }
            store.restore(idx, buf);
        }
        drop(nodes);

        for &(pid, nid) in self.param_nodes.borrow().iter() {
            if let Some(g) = store.get(nid) {
                let grad = &mut params.get_mut(pid).grad;
                for (dst, src) in grad.iter_mut().zip(g.iter()) {
                    *dst += *src;
                }
            }
        }
        Ok(Gradients { store })
    }
}
