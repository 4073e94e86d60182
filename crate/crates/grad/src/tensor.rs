use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{GradError, Result};

/// Dense row-major tensor of `f64` values.
///
/// Cloning is cheap: a `Tensor` is a shared handle onto immutable data. Results of
/// operations on tensors that require gradients carry a graph node so that
/// [`Tensor::backward`] can route gradients back to the leaves.
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<Inner>);

pub(crate) struct Inner {
    pub(crate) data: Vec<f64>,
    pub(crate) shape: Vec<usize>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: RefCell<Option<Vec<f64>>>,
    pub(crate) node: Option<Node>,
}

pub(crate) struct Node {
    pub(crate) parents: Vec<Tensor>,
    pub(crate) rule: Box<dyn Backward>,
}

/// What a backward rule sees for one recorded operation.
pub(crate) struct BackwardCtx<'a> {
    pub parents: &'a [Tensor],
    pub out: &'a Tensor,
    pub grad: &'a [f64],
    /// `needs[i]` is true when parent `i` requires a gradient.
    pub needs: &'a [bool],
}

pub(crate) trait Backward {
    fn name(&self) -> &'static str;
    /// Gradient contribution per parent, `None` where not needed.
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>;
}

impl Tensor {
    /// Constant tensor; never accumulates gradient.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    /// Leaf tensor that accumulates gradient during [`Tensor::backward`].
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, true)
    }

    fn leaf(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(GradError::Contract(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self::raw(data, shape.to_vec(), requires_grad, None))
    }

    pub fn scalar(value: f64) -> Self {
        Self::raw(vec![value], Vec::new(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::raw(vec![0.0; n], shape.to_vec(), false, None)
    }

    pub(crate) fn raw(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        node: Option<Node>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Inner {
            data,
            shape,
            requires_grad,
            grad: RefCell::new(None),
            node,
        }))
    }

    /// Builds an op result, attaching a graph node only when some parent needs gradient.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: &[&Tensor],
        rule: impl Backward + 'static,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = requires_grad.then(|| Node {
            parents: parents.iter().map(|&p| p.clone()).collect(),
            rule: Box::new(rule),
        });
        Self::raw(data, shape, requires_grad, node)
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
        self.0.node.is_none()
    }

    /// Name of the op that produced this tensor, if it is not a leaf.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.rule.name())
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.0.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(GradError::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            ))),
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::raw(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    /// Accumulated gradient of a leaf after [`Tensor::backward`].
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Reverse-mode sweep from a one-element tensor.
    ///
    /// Leaf gradients accumulate: calling this twice without [`Tensor::zero_grad`]
    /// adds the second gradient onto the first.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(GradError::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(GradError::Contract(
                "backward() on a tensor that does not require grad".into(),
            ));
        }

        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
        pending.insert(self.key(), vec![1.0]);

        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.key()) else {
                continue;
            };
            let Some(node) = &t.0.node else {
                accumulate(&t.0.grad, g);
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Tensor::requires_grad).collect();
            let ctx = BackwardCtx {
                parents: &node.parents,
                out: t,
                grad: &g,
                needs: &needs,
            };
            let grads = node.rule.backward(&ctx);
            debug_assert_eq!(grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(grads) {
                let Some(pg) = pg else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), parent.numel(), "{}", node.rule.name());
                match pending.get_mut(&parent.key()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    None => {
                        pending.insert(parent.key(), pg);
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the subgraph that requires grad; parents precede children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for p in node.parents.iter().rev() {
                    if p.requires_grad() && !seen.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

fn accumulate(slot: &RefCell<Option<Vec<f64>>>, g: Vec<f64>) {
    let mut slot = slot.borrow_mut();
    match slot.as_mut() {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape);
        if self.numel() <= 16 {
            s.field("data", &self.0.data);
        }
        s.field("requires_grad", &self.0.requires_grad);
        if let Some(op) = self.op_name() {
            s.field("op", &op);
        }
        s.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![1.0, 2.0, 3.0], &[2, 2]).is_err());
        let t = Tensor::new(vec![1.0; 6], &[2, 3]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(t.rank(), 2);
    }

    #[test]
    fn constants_never_accumulate() {
        let w = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let c = Tensor::new(vec![3.0, 4.0], &[2]).unwrap();
        let loss = crate::ops::sum(&crate::ops::mul(&w, &c).unwrap());
        loss.backward().unwrap();
        assert_eq!(w.grad(), Some(vec![3.0, 4.0]));
        assert_eq!(c.grad(), None);
        assert!(c.is_leaf());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let w = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = crate::ops::scale(&w, 2.0);
        assert!(matches!(y.backward(), Err(GradError::Contract(_))));
    }

    #[test]
    fn backward_twice_accumulates() {
        let w = Tensor::param(vec![1.0, -2.0, 0.5, 3.0], &[2, 2]).unwrap();
        let loss = crate::ops::sum(&w);
        loss.backward().unwrap();
        assert_eq!(w.grad(), Some(vec![1.0; 4]));
        loss.backward().unwrap();
        assert_eq!(w.grad(), Some(vec![2.0; 4]));
        w.zero_grad();
        assert_eq!(w.grad(), None);
    }

    #[test]
    fn shared_subexpression_visited_once() {
        // loss = sum(y + y) with y = 3w: each path contributes once.
        let w = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = crate::ops::scale(&w, 3.0);
        let loss = crate::ops::sum(&crate::ops::add(&y, &y).unwrap());
        loss.backward().unwrap();
        assert_eq!(w.grad(), Some(vec![6.0, 6.0]));
    }
}
