use super::ops::{self, Function};
use super::{ArrayF, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node {
    value: ArrayF,
    inputs: Vec<Var>,
    func: Option<Box<dyn Function>>,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Append-only record of primitive applications.
///
/// Nodes are stored in creation order, so inputs always precede their
/// consumers and a reverse sweep is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every recorded node that
/// required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<ArrayF>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&ArrayF> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: ArrayF, param: Option<ParamId>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            func: None,
            param,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: ArrayF) -> Var {
        self.push_leaf(value, None, false)
    }

    /// A leaf whose gradient is tracked (useful for input sensitivities).
    pub fn input(&mut self, value: ArrayF) -> Var {
        self.push_leaf(value, None, true)
    }

    /// A leaf bound to a stored parameter; tracked only when trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push_leaf(p.value().clone(), Some(id), p.trainable())
    }

    pub fn value(&self, v: Var) -> &ArrayF {
        &self.nodes[v.0].value
    }

    /// Records `func(inputs)` and returns its output handle.
    pub fn apply(&mut self, func: Box<dyn Function>, inputs: &[Var]) -> Result<Var> {
        let value = {
            let vals: Vec<&ArrayF> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            func.forward(&vals)?
        };
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            func: Some(func),
            param: None,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv1d(&mut self, x: Var, kernels: Var, bias: Var) -> Result<Var> {
        self.apply(Box::new(ops::Conv1d), &[x, kernels, bias])
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.apply(Box::new(ops::Dense), &[x, w, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Box::new(ops::Relu), &[x])
    }

    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        let mask = ops::dropout_mask(self.value(x).len(), rate, training, rng)?;
        self.apply(Box::new(ops::Dropout { mask }), &[x])
    }

    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(Box::new(ops::GlobalMaxPool), &[x])
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.apply(
            Box::new(ops::SoftmaxCrossEntropy {
                labels: labels.to_vec(),
            }),
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Box::new(ops::Sum), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<ArrayF>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(ArrayF::full(loss_value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(func) = &node.func else { continue };
            let Some(g) = grads[i].take() else { continue };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let vals: Vec<&ArrayF> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = func.backward(&vals, &node.value, &g, &needs);
            for ((v, need), ig) in node.inputs.iter().zip(&needs).zip(input_grads) {
                if !need {
                    continue;
                }
                let Some(ig) = ig else { continue };
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds the gradients of trainable parameter
    /// leaves into `store`. Frozen parameters are left untouched.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            let (Some(id), Some(g)) = (node.param, grads.grads[i].as_ref()) else {
                continue;
            };
            let p = store.get_mut(id);
            if p.trainable() {
                p.accumulate_grad(g);
            }
        }
        Ok(grads)
    }

    /// Recomputes every node from the leaves with the recorded functions.
    pub fn replay(&self) -> Result<Vec<ArrayF>> {
        let mut values: Vec<ArrayF> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.func {
                None => node.value.clone(),
                Some(f) => {
                    let ins: Vec<&ArrayF> = node.inputs.iter().map(|v| &values[v.0]).collect();
                    f.forward(&ins)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut store = ParamStore::new();
        let w = store.add("w", ArrayF::full(&[2, 2], 0.5));
        let mut tape = Tape::new();
        let _wv = tape.param(&store, w);
        let c = tape.constant(ArrayF::scalar(3.0));
        tape.backward_into(c, &mut store).unwrap();
        assert!(store.get(w).grad().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn linear_loss_gradient_is_broadcast_input() {
        let mut store = ParamStore::new();
        let w = store.add("w", ArrayF::new(vec![3, 2], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap());
        let b = store.add("b", ArrayF::zeros(&[2]));
        let mut tape = Tape::new();
        let x = tape.constant(ArrayF::from_vec(vec![1.0, -2.0, 3.0]).unwrap());
        let (wv, bv) = (tape.param(&store, w), tape.param(&store, b));
        let y = tape.dense(x, wv, bv).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad().data(), &[1.0, 1.0, -2.0, -2.0, 3.0, 3.0]);
        assert_eq!(store.get(b).grad().data(), &[1.0, 1.0]);
    }

    #[test]
    fn frozen_parameters_receive_nothing() {
        let mut store = ParamStore::new();
        let w = store.add("w", ArrayF::full(&[2, 2], 1.0));
        let b = store.add("b", ArrayF::zeros(&[2]));
        store.set_trainable(w, false);
        let mut tape = Tape::new();
        let x = tape.constant(ArrayF::from_vec(vec![1.0, 2.0]).unwrap());
        let (wv, bv) = (tape.param(&store, w), tape.param(&store, b));
        let y = tape.dense(x, wv, bv).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward_into(loss, &mut store).unwrap();
        assert!(store.get(w).grad().data().iter().all(|&g| g == 0.0));
        assert_eq!(store.get(b).grad().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(ArrayF::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn replay_reproduces_forward_values() {
        let mut tape = Tape::new();
        let x = tape.input(ArrayF::new(vec![5, 2], (0..10).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap());
        let k = tape.constant(ArrayF::full(&[2, 2, 3], 0.2));
        let b = tape.constant(ArrayF::full(&[3], -0.1));
        let c = tape.conv1d(x, k, b).unwrap();
        let r = tape.relu(c).unwrap();
        let d = tape.dropout(r, 0.3, true, &mut seeded(9)).unwrap();
        let p = tape.global_max_pool(d).unwrap();
        let s = tape.sum(p).unwrap();
        let replayed = tape.replay().unwrap();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v, tape.value(Var(i)));
        }
        assert_eq!(replayed[s.index()], *tape.value(s));
    }
}
