//! Graph-recording variables and the reverse-mode gradient engine.
//!
//! Every backward rule is itself written in terms of differentiable [`Var`]
//! operations, so running [`grad`] with `create_graph = true` yields
//! gradients that can be differentiated again.

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Whether newly created ops record their inputs on this thread.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Restores the previous grad mode on drop.
pub struct GradModeGuard {
    prev: bool,
}

impl GradModeGuard {
    pub fn new(enabled: bool) -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
        Self { prev }
    }
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Run `f` without recording any graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = GradModeGuard::new(false);
    f()
}

/// Everything a backward rule gets to see.
pub struct BackwardCtx<'a> {
    pub inputs: &'a [Var],
    pub output: &'a Var,
    pub grad: &'a Var,
    /// `needs[i]` is false when nothing downstream wants the gradient of input `i`.
    pub needs: &'a [bool],
}

/// A differentiable operation. Implementations return one entry per input.
pub trait Function {
    fn name(&self) -> &'static str;
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Var>>;
}

struct Node {
    func: Box<dyn Function>,
    inputs: Vec<Var>,
}

struct Inner {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    node: Option<Node>,
}

/// A tensor value plus (optionally) the op that produced it.
#[derive(Clone)]
pub struct Var(Rc<Inner>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.0.node.as_ref().map(|n| n.func.name()).unwrap_or("leaf");
        write!(f, "Var#{}({}, {:?})", self.0.id, op, self.0.value)
    }
}

impl Var {
    /// A leaf that does not require gradients.
    pub fn constant(value: Tensor) -> Self {
        Self::leaf(value, false)
    }

    /// A leaf whose gradient can be requested.
    pub fn parameter(value: Tensor) -> Self {
        Self::leaf(value, true)
    }

    fn leaf(value: Tensor, requires_grad: bool) -> Self {
        Var(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            node: None,
        }))
    }

    /// Record `value` as the result of `func` applied to `inputs`. Falls back
    /// to a constant when grad mode is off or no input requires a gradient.
    pub fn from_op(value: Tensor, inputs: Vec<Var>, func: Box<dyn Function>) -> Self {
        if !is_grad_enabled() || !inputs.iter().any(|v| v.requires_grad()) {
            return Self::constant(value);
        }
        Var(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad: true,
            node: Some(Node { func, inputs }),
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }
}

/// Gradients of a scalar `output` with respect to each of `wrt`.
///
/// Returns `None` for inputs the output does not depend on. With
/// `create_graph` the returned gradients are themselves differentiable.
pub fn grad(output: &Var, wrt: &[&Var], create_graph: bool) -> Vec<Option<Var>> {
    assert_eq!(
        output.value().len(),
        1,
        "grad() needs a scalar output, got shape {:?}",
        output.shape()
    );
    let seed = Var::constant(Tensor::full(output.shape(), 1.0));
    grad_with_seed(output, seed, wrt, create_graph)
}

/// Vector-Jacobian product: gradients of `<seed, output>` with respect to `wrt`.
pub fn grad_with_seed(output: &Var, seed: Var, wrt: &[&Var], create_graph: bool) -> Vec<Option<Var>> {
    assert_eq!(seed.shape(), output.shape(), "seed shape must match output");
    if !output.requires_grad() {
        return vec![None; wrt.len()];
    }
    let targets: HashMap<u64, usize> = wrt.iter().enumerate().map(|(i, v)| (v.id(), i)).collect();
    let order = topo_order(output);

    // A node is relevant when some target is reachable through its inputs.
    let mut relevant: HashMap<u64, bool> = HashMap::with_capacity(order.len());
    for v in &order {
        let mut r = targets.contains_key(&v.id());
        if let Some(node) = &v.0.node {
            for inp in &node.inputs {
                if relevant.get(&inp.id()).copied().unwrap_or(false) {
                    r = true;
                }
            }
        }
        relevant.insert(v.id(), r);
    }

    let _guard = GradModeGuard::new(create_graph);
    let mut grads: HashMap<u64, Var> = HashMap::new();
    grads.insert(output.id(), seed);
    for v in order.iter().rev() {
        let Some(node) = &v.0.node else { continue };
        if !relevant[&v.id()] {
            continue;
        }
        let Some(g) = grads.get(&v.id()).cloned() else { continue };
        let needs: Vec<bool> = node
            .inputs
            .iter()
            .map(|i| i.requires_grad() && relevant.get(&i.id()).copied().unwrap_or(false))
            .collect();
        let ctx = BackwardCtx {
            inputs: &node.inputs,
            output: v,
            grad: &g,
            needs: &needs,
        };
        let input_grads = node.func.backward(&ctx);
        debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.func.name());
        for ((inp, gi), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
            let (Some(gi), true) = (gi, *need) else { continue };
            debug_assert_eq!(gi.shape(), inp.shape(), "grad shape from {}", node.func.name());
            let acc = match grads.remove(&inp.id()) {
                Some(prev) => prev.add(&gi),
                None => gi,
            };
            grads.insert(inp.id(), acc);
        }
        if !targets.contains_key(&v.id()) {
            grads.remove(&v.id());
        }
    }
    wrt.iter().map(|v| grads.get(&v.id()).cloned()).collect()
}

/// Post-order over all grad-requiring nodes reachable from `root`.
fn topo_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut visited: HashMap<u64, ()> = HashMap::new();
    let mut stack: Vec<(Var, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.id(), ());
    while let Some((v, child)) = stack.pop() {
        let inputs = v.0.node.as_ref().map(|n| n.inputs.as_slice()).unwrap_or(&[]);
        if child < inputs.len() {
            let next = inputs[child].clone();
            stack.push((v, child + 1));
            if next.requires_grad() && visited.insert(next.id(), ()).is_none() {
                stack.push((next, 0));
            }
        } else {
            order.push(v);
        }
    }
    order
}
