//! Reverse-mode autodiff on a flat tape. Nodes are appended in evaluation
//! order, so the tape order is already topological; backward walks it in
//! reverse once, handing each node's output gradient to a closure that
//! scatters into its parents.

use std::collections::HashMap;

use super::elem::Elem;
use super::value::Value;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tx(pub(crate) usize);

pub(crate) type BackFn<E> = Box<dyn FnOnce(&[E], &mut GradStore<E>)>;

struct Node<E: Elem> {
    value: Value<E>,
    requires_grad: bool,
    back: Option<BackFn<E>>,
}

pub struct Graph<E: Elem> {
    nodes: Vec<Node<E>>,
    recording: bool,
    /// Memoizes parameter leaves so each parameter appears once per graph
    /// and naturally accumulates gradients from all of its uses.
    pub(crate) param_memo: HashMap<(u64, usize), Tx>,
}

impl<E: Elem> Graph<E> {
    /// Graph that records backward closures (training / gradient checks).
    pub fn recording() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
            param_memo: HashMap::new(),
        }
    }

    /// Forward-only graph: no backward closures are built.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: false,
            param_memo: HashMap::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Value<E>, requires_grad: bool) -> Tx {
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.recording,
            back: None,
        });
        Tx(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Value<E>) -> Tx {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Tx {
        self.constant(Value::scalar(E::from_f64(v)))
    }

    pub fn val(&self, t: Tx) -> &Value<E> {
        &self.nodes[t.0].value
    }

    pub fn requires_grad(&self, t: Tx) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Detached copy of a node's value, for reuse outside this graph.
    pub fn detach(&self, t: Tx) -> Value<E> {
        self.nodes[t.0].value.clone()
    }

    /// Append an op node. `back` is only built when some parent needs a
    /// gradient and the graph is recording.
    pub(crate) fn push(
        &mut self,
        value: Value<E>,
        parents: &[Tx],
        back: impl FnOnce() -> BackFn<E>,
    ) -> Tx {
        let needs = self.recording && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad: needs,
            back: if needs { Some(back()) } else { None },
        });
        Tx(self.nodes.len() - 1)
    }

    /// Backpropagate from a scalar node. Consumes the tape's backward
    /// closures; gradients of leaves are retained in the returned store.
    pub fn backward(&mut self, loss: Tx) -> Grads<E> {
        assert_eq!(self.val(loss).numel(), 1, "backward requires a scalar loss");
        let n = self.nodes.len();
        let mut store = GradStore {
            grads: vec![None; n],
            needs: self.nodes.iter().map(|nd| nd.requires_grad).collect(),
            numel: self.nodes.iter().map(|nd| nd.value.numel()).collect(),
        };
        if !self.nodes[loss.0].requires_grad {
            return Grads { inner: store.grads };
        }
        store.grads[loss.0] = Some(vec![E::ONE]);
        for id in (0..=loss.0).rev() {
            if store.grads[id].is_none() {
                continue;
            }
            if let Some(back) = self.nodes[id].back.take() {
                let g = store.grads[id].take().expect("grad present");
                back(&g, &mut store);
            }
            // Leaves keep their gradient for retrieval by the caller.
        }
        Grads { inner: store.grads }
    }
}

/// Gradient accumulation buffers, indexed by node.
pub struct GradStore<E> {
    grads: Vec<Option<Vec<E>>>,
    needs: Vec<bool>,
    numel: Vec<usize>,
}

impl<E: Elem> GradStore<E> {
    /// Whether this node wants a gradient at all. Lets expensive backward
    /// paths skip work for frozen inputs.
    pub fn wants(&self, t: Tx) -> bool {
        self.needs[t.0]
    }

    /// Zero-initialized accumulation buffer for `t`, or `None` if the node
    /// does not require a gradient.
    pub fn buf(&mut self, t: Tx) -> Option<&mut [E]> {
        if !self.needs[t.0] {
            return None;
        }
        let n = self.numel[t.0];
        Some(
            self.grads[t.0]
                .get_or_insert_with(|| vec![E::ZERO; n])
                .as_mut_slice(),
        )
    }

    /// Elementwise `grad[t] += src`.
    pub fn add_slice(&mut self, t: Tx, src: &[E]) {
        if let Some(buf) = self.buf(t) {
            debug_assert_eq!(buf.len(), src.len());
            for (b, s) in buf.iter_mut().zip(src) {
                *b += *s;
            }
        }
    }

    /// `grad[t][i] += f(i)` over all elements.
    pub fn add_with(&mut self, t: Tx, f: impl Fn(usize) -> E) {
        if let Some(buf) = self.buf(t) {
            for (i, b) in buf.iter_mut().enumerate() {
                *b += f(i);
            }
        }
    }
}

/// Gradients retained after [`Graph::backward`]; only leaves still hold data.
pub struct Grads<E> {
    inner: Vec<Option<Vec<E>>>,
}

impl<E: Elem> Grads<E> {
    pub fn get(&self, t: Tx) -> Option<&[E]> {
        self.inner.get(t.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, t: Tx) -> Option<Vec<E>> {
        self.inner.get_mut(t.0).and_then(|g| g.take())
    }
}
