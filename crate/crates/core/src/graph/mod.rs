//! Reverse-mode automatic differentiation over an eagerly evaluated tape.
//!
//! Every builder method validates shapes, runs the forward computation
//! immediately, and appends one node; topological order therefore equals
//! insertion order and `backward` is a single reverse sweep. Trainable
//! parameters are leaf nodes carrying a unique name; `backward` returns a
//! name-keyed gradient map.

mod conv;
mod linear;
mod loss;
mod norm;


pub use loss::{median_heuristic_sigma_sqs, rbf_kernel, LossConfig, DEFAULT_BANDWIDTH_MULTIPLIERS};
pub use norm::RunningStats;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::collections::{BTreeMap, HashSet};

/// Whether batch statistics are computed (Train) or running statistics
/// are applied (Eval). Batchnorm is the only mode-dependent operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Gradient map returned by [`Graph::backward`]: parameter name → gradient.
pub type GradMap<F> = BTreeMap<String, Tensor<F>>;

enum Op<F: Scalar> {
    Leaf,
    /// inputs: [x, kernels, bias]
    Conv2d { stride: usize, padding: usize },
    /// `argmax` holds, per output element, the flat input index of its max.
    MaxPool2d { argmax: Vec<usize> },
    /// inputs: [x, gamma, beta]; statistics saved at forward time.
    BatchNorm2d {
        mean: Vec<F>,
        inv_std: Vec<F>,
        mode: Mode,
    },
    /// inputs: [x, weights, bias]
    Dense,
    Relu,
    Softmax,
    Flatten,
    GlobalAvgPool,
    Add,
    Scale(F),
    /// Elementwise product with a constant tensor (no gradient to the constant).
    MulConst(Tensor<F>),
    /// Sum of all elements to a scalar.
    Sum,
    /// inputs: [logits]; per-sample weights resolved at node creation.
    WeightedCe {
        labels: Vec<usize>,
        sample_weights: Vec<F>,
        weight_sum: F,
        softmax: Vec<F>,
    },
    /// inputs: [a, b]; squared bandwidths fixed at node creation.
    Mmd { sigma_sqs: Vec<F> },
}

struct Node<F: Scalar> {
    op: Op<F>,
    inputs: Vec<NodeId>,
    value: Tensor<F>,
    param: Option<String>,
    needs_grad: bool,
}

/// An append-only computation tape. See module docs.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    param_names: HashSet<String>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_names: HashSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    fn push(
        &mut self,
        op: Op<F>,
        inputs: Vec<NodeId>,
        value: Tensor<F>,
        param: Option<String>,
    ) -> NodeId {
        let needs_grad =
            param.is_some() || inputs.iter().any(|&i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            param,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-trainable leaf (network input). Receives no gradient.
    pub fn input(&mut self, value: Tensor<F>) -> NodeId {
        self.push(Op::Leaf, vec![], value, None)
    }

    /// Trainable leaf. Names must be unique within a graph.
    pub fn param(&mut self, name: &str, value: Tensor<F>) -> Result<NodeId> {
        if !self.param_names.insert(name.to_string()) {
            return Err(Error::State(format!(
                "parameter {name:?} already bound in this graph"
            )));
        }
        Ok(self.push(Op::Leaf, vec![], value, Some(name.to_string())))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let out = conv::conv2d_forward(
            self.value(x),
            self.value(kernels),
            self.value(bias),
            stride,
            padding,
        )?;
        Ok(self.push(
            Op::Conv2d { stride, padding },
            vec![x, kernels, bias],
            out,
            None,
        ))
    }

    pub fn maxpool2d(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let (out, argmax) = conv::maxpool2d_forward(self.value(x), kernel, stride)?;
        Ok(self.push(Op::MaxPool2d { argmax }, vec![x], out, None))
    }

    pub fn batchnorm2d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: &mut RunningStats<F>,
        mode: Mode,
    ) -> Result<NodeId> {
        let (out, mean, inv_std) = norm::batchnorm_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running,
            mode,
        )?;
        Ok(self.push(
            Op::BatchNorm2d { mean, inv_std, mode },
            vec![x, gamma, beta],
            out,
            None,
        ))
    }

    pub fn dense(&mut self, x: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = linear::dense_forward(self.value(x), self.value(weights), self.value(bias))?;
        Ok(self.push(Op::Dense, vec![x, weights, bias], out, None))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        self.push(Op::Relu, vec![x], out, None)
    }

    /// Row-wise softmax over the last dimension, max-subtracted for stability.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let out = linear::softmax_forward(self.value(x))?;
        Ok(self.push(Op::Softmax, vec![x], out, None))
    }

    /// Collapse all but the leading dimension.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let dims = self.value(x).dims();
        if dims.len() < 2 {
            return Err(Error::Shape(format!("flatten needs rank >= 2, got {dims:?}")));
        }
        let new_dims = vec![dims[0], dims[1..].iter().product()];
        let out = self.value(x).clone().reshape(new_dims)?;
        Ok(self.push(Op::Flatten, vec![x], out, None))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let out = linear::gap_forward(self.value(x))?;
        Ok(self.push(Op::GlobalAvgPool, vec![x], out, None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(Error::Shape(format!(
                "add dims mismatch: {:?} vs {:?}",
                ta.dims(),
                tb.dims()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(ta.dims().to_vec(), data)?;
        Ok(self.push(Op::Add, vec![a, b], out, None))
    }

    pub fn scale(&mut self, x: NodeId, c: F) -> NodeId {
        let out = self.value(x).map(|v| v * c);
        self.push(Op::Scale(c), vec![x], out, None)
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, x: NodeId, c: Tensor<F>) -> Result<NodeId> {
        let t = self.value(x);
        if t.dims() != c.dims() {
            return Err(Error::Shape(format!(
                "mul_const dims mismatch: {:?} vs {:?}",
                t.dims(),
                c.dims()
            )));
        }
        let data = t.data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect();
        let out = Tensor::new(t.dims().to_vec(), data)?;
        Ok(self.push(Op::MulConst(c), vec![x], out, None))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = F::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        self.push(Op::Sum, vec![x], Tensor::scalar(acc), None)
    }

    /// Weighted cross-entropy over logits (N, K): per-sample losses weighted
    /// by the class weight of the true label and normalized by the summed
    /// weights of the batch.
    pub fn weighted_ce(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        cfg: &LossConfig<F>,
    ) -> Result<NodeId> {
        let (out, op) = loss::weighted_ce_forward(self.value(logits), labels, cfg)?;
        Ok(self.push(op, vec![logits], out, None))
    }

    /// Unbiased MMD estimator between two equal-size batches of embeddings,
    /// with the kernel averaged over the given squared bandwidths.
    pub fn mmd(&mut self, a: NodeId, b: NodeId, sigma_sqs: &[F]) -> Result<NodeId> {
        let out = loss::mmd_forward(self.value(a), self.value(b), sigma_sqs)?;
        Ok(self.push(
            Op::Mmd {
                sigma_sqs: sigma_sqs.to_vec(),
            },
            vec![a, b],
            out,
            None,
        ))
    }

    /// Reverse sweep from a scalar loss node. Returns gradients for every
    /// trainable parameter bound in this graph.
    pub fn backward(&self, target: NodeId) -> Result<GradMap<F>> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward on empty graph".into()));
        }
        if target.0 >= self.nodes.len() {
            return Err(Error::State("backward target not in graph".into()));
        }
        if self.nodes[target.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward target must be scalar, got dims {:?}",
                self.nodes[target.0].value.dims()
            )));
        }

        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[target.0] = Some(Tensor::filled(self.nodes[target.0].value.dims(), F::one()));

        for idx in (0..=target.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let dy = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let input_grads = self.backward_node(node, &dy)?;
            for (slot, grad) in node.inputs.iter().zip(input_grads) {
                let (slot, grad) = (*slot, match grad {
                    Some(g) => g,
                    None => continue,
                });
                if !self.nodes[slot.0].needs_grad {
                    continue;
                }
                match &mut grads[slot.0] {
                    Some(acc) => {
                        for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a += *g;
                        }
                    }
                    empty => *empty = Some(grad),
                }
            }
            if node.param.is_some() {
                grads[idx] = Some(dy);
            }
        }

        let mut map = GradMap::new();
        for (node, grad) in self.nodes.iter().zip(grads) {
            if let Some(name) = &node.param {
                let grad = grad
                    .unwrap_or_else(|| Tensor::zeros(node.value.dims()));
                map.insert(name.clone(), grad);
            }
        }
        Ok(map)
    }

    /// Per-op vector-Jacobian products. Returns one optional gradient per input.
    fn backward_node(&self, node: &Node<F>, dy: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { stride, padding } => {
                let [dx, dw, db] = conv::conv2d_backward(
                    val(node.inputs[0]),
                    val(node.inputs[1]),
                    dy,
                    *stride,
                    *padding,
                );
                vec![Some(dx), Some(dw), Some(db)]
            }
            Op::MaxPool2d { argmax } => {
                vec![Some(conv::maxpool2d_backward(val(node.inputs[0]), argmax, dy))]
            }
            Op::BatchNorm2d { mean, inv_std, mode } => {
                let [dx, dgamma, dbeta] = norm::batchnorm_backward(
                    val(node.inputs[0]),
                    val(node.inputs[1]),
                    mean,
                    inv_std,
                    *mode,
                    dy,
                );
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }
            Op::Dense => {
                let [dx, dw, db] =
                    linear::dense_backward(val(node.inputs[0]), val(node.inputs[1]), dy);
                vec![Some(dx), Some(dw), Some(db)]
            }
            Op::Relu => {
                let x = val(node.inputs[0]);
                let data = x
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&x, &g)| if x > F::zero() { g } else { F::zero() })
                    .collect();
                vec![Some(Tensor::new(x.dims().to_vec(), data)?)]
            }
            Op::Softmax => {
                vec![Some(linear::softmax_backward(&node.value, dy))]
            }
            Op::Flatten => {
                let dims = val(node.inputs[0]).dims().to_vec();
                vec![Some(dy.clone().reshape(dims)?)]
            }
            Op::GlobalAvgPool => {
                vec![Some(linear::gap_backward(val(node.inputs[0]), dy))]
            }
            Op::Add => vec![Some(dy.clone()), Some(dy.clone())],
            Op::Scale(c) => vec![Some(dy.map(|g| g * *c))],
            Op::MulConst(c) => {
                let data = dy.data().iter().zip(c.data()).map(|(&g, &v)| g * v).collect();
                vec![Some(Tensor::new(c.dims().to_vec(), data)?)]
            }
            Op::Sum => {
                let g = dy.item()?;
                vec![Some(Tensor::filled(
                    self.nodes[node.inputs[0].0].value.dims(),
                    g,
                ))]
            }
            Op::WeightedCe {
                labels,
                sample_weights,
                weight_sum,
                softmax,
            } => {
                let dlogits = loss::weighted_ce_backward(
                    val(node.inputs[0]).dims(),
                    labels,
                    sample_weights,
                    *weight_sum,
                    softmax,
                    dy.item()?,
                );
                vec![Some(dlogits)]
            }
            Op::Mmd { sigma_sqs } => {
                let [da, db] = loss::mmd_backward(
                    val(node.inputs[0]),
                    val(node.inputs[1]),
                    sigma_sqs,
                    dy.item()?,
                );
                vec![Some(da), Some(db)]
            }
        })
    }
}
