//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Tape`] records every operation applied during a forward pass as a
//! node holding its output value and the inputs its backward rule needs.
//! Nodes are appended in execution order, so the node list is already a
//! topological order and [`Tape::backward`] just walks it in reverse.
//!
//! Leaves are either named trainable parameters ([`Tape::param`]) or
//! constants ([`Tape::constant`]). Gradients are reported only for
//! parameters the loss actually depends on; a parameter the loss never
//! touches has no entry in the returned [`Gradients`].
//!
//! ```
//! use debias::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.constant(Tensor::from_f64(&[1, 1], &[2.0]).unwrap());
//! let w = tape.param("w", Tensor::from_f64(&[1, 1], &[1.0]).unwrap());
//! let b = tape.constant(Tensor::zeros(&[1]));
//! let y = tape.dense(x, w, b).unwrap();
//! let zero = tape.constant(Tensor::zeros(&[1, 1]));
//! let loss = tape.mse_loss(y, zero).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! // d/dw (w·x)² = 2·(w·x)·x
//! assert_eq!(grads.get("w").unwrap().data(), &[8.0]);
//! ```

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::ops::{self, activation, conv, dense, loss, ConvSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, spec: ConvSpec },
    ConvTranspose2d { input: Var, weight: Var, bias: Var, spec: ConvSpec },
    Dense { x: Var, weight: Var, bias: Var },
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Softmax(Var, usize),
    Reshape(Var),
    Mse { pred: Var, target: Var },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    WeightedSum { x: Var, weights: Tensor<T> },
    Combine { a: Var, alpha: T, b: Var, beta: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<String>,
    requires_grad: bool,
}

/// Gradient table keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.by_name
    }
}

/// Computation record for one forward/backward pass. Not shared across
/// threads.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable parameter.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, Some(name.into()), true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> Option<T> {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, param: Option<String>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, param, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, None, rg)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let spec = ConvSpec { stride, padding };
        let y = conv::conv2d(self.value(input), self.value(weight), self.value(bias), spec)?;
        Ok(self.derived(y, Op::Conv2d { input, weight, bias, spec }, &[input, weight, bias]))
    }

    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let spec = ConvSpec { stride, padding };
        let y = conv::conv_transpose2d(self.value(input), self.value(weight), self.value(bias), spec)?;
        Ok(self.derived(y, Op::ConvTranspose2d { input, weight, bias, spec }, &[input, weight, bias]))
    }

    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = dense::dense(self.value(x), self.value(weight), self.value(bias))?;
        Ok(self.derived(y, Op::Dense { x, weight, bias }, &[x, weight, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.derived(y, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: T) -> Var {
        let y = ops::leaky_relu(self.value(x), alpha);
        self.derived(y, Op::LeakyRelu(x, alpha), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        self.derived(y, Op::Sigmoid(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = ops::softmax(self.value(x), axis)?;
        Ok(self.derived(y, Op::Softmax(x, axis), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.derived(y, Op::Reshape(x), &[x]))
    }

    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let l = loss::mse_loss(self.value(pred), self.value(target))?;
        Ok(self.derived(Tensor::scalar(l), Op::Mse { pred, target }, &[pred, target]))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = loss::cross_entropy_loss(self.value(logits), labels)?;
        let op = Op::CrossEntropy { logits, labels: labels.to_vec() };
        Ok(self.derived(Tensor::scalar(l), op, &[logits]))
    }

    /// `Σ x ⊙ weights` with constant weights; reduces any node to a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let s = self.value(x).dot(&weights)?;
        Ok(self.derived(Tensor::scalar(T::of(s)), Op::WeightedSum { x, weights }, &[x]))
    }

    /// `alpha·a + beta·b` for equally shaped nodes.
    pub fn combine(&mut self, a: Var, alpha: T, b: Var, beta: T) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("combine", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| alpha * x + beta * y).collect();
        let y = Tensor::new(va.shape(), data)?;
        Ok(self.derived(y, Op::Combine { a, alpha, b, beta }, &[a, b]))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));

        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Some(name) = &node.param {
                accumulate_named(&mut out.by_name, name, g);
                continue;
            }
            for (var, contribution) in self.backward_rule(node, &g)? {
                if self.nodes[var.0].requires_grad {
                    accumulate(&mut grads[var.0], contribution);
                }
            }
        }
        Ok(out)
    }

    fn backward_rule(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let v = |var: Var| self.value(var);
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { input, weight, bias, spec } => {
                let (dx, dw, db) = conv::conv2d_backward(v(*input), v(*weight), v(*bias), *spec, g)?;
                vec![(*input, dx), (*weight, dw), (*bias, db)]
            }
            Op::ConvTranspose2d { input, weight, bias, spec } => {
                let (dx, dw, db) =
                    conv::conv_transpose2d_backward(v(*input), v(*weight), v(*bias), *spec, g)?;
                vec![(*input, dx), (*weight, dw), (*bias, db)]
            }
            Op::Dense { x, weight, bias } => {
                let (dx, dw, db) = dense::dense_backward(v(*x), v(*weight), v(*bias), g)?;
                vec![(*x, dx), (*weight, dw), (*bias, db)]
            }
            Op::Relu(x) => vec![(*x, activation::relu_backward(v(*x), g))],
            Op::LeakyRelu(x, alpha) => vec![(*x, activation::leaky_relu_backward(v(*x), *alpha, g))],
            Op::Sigmoid(x) => vec![(*x, activation::sigmoid_backward(&node.value, g))],
            Op::Softmax(x, axis) => vec![(*x, activation::softmax_backward(&node.value, *axis, g)?)],
            Op::Reshape(x) => vec![(*x, g.reshape(v(*x).shape())?)],
            Op::Mse { pred, target } => {
                let up = g.data()[0];
                let dp = loss::mse_loss_backward(v(*pred), v(*target), up);
                let dt = dp.map(|e| -e);
                vec![(*pred, dp), (*target, dt)]
            }
            Op::CrossEntropy { logits, labels } => {
                vec![(*logits, loss::cross_entropy_backward(v(*logits), labels, g.data()[0])?)]
            }
            Op::WeightedSum { x, weights } => {
                let up = g.data()[0];
                vec![(*x, weights.map(|w| w * up))]
            }
            Op::Combine { a, alpha, b, beta } => {
                vec![(*a, g.map(|e| e * *alpha)), (*b, g.map(|e| e * *beta))]
            }
        })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn accumulate_named<T: Scalar>(map: &mut BTreeMap<String, Tensor<T>>, name: &str, g: Tensor<T>) {
    match map.get_mut(name) {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => {
            map.insert(name.to_string(), g);
        }
    }
}
