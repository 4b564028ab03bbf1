//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node whose parents were recorded earlier, so the
//! node list is already in topological order and the backward pass is a single
//! reverse sweep. A tape belongs to one worker; parallel training gives each
//! sample its own tape and reduces the leaf gradients afterwards.

use crate::error::{Error, Result};
use crate::kernels::{self, PoolMode};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        filters: Var,
        stride: usize,
        padding: usize,
    },
    BiasAdd {
        input: Var,
        bias: Var,
    },
    Elementwise {
        input: Var,
        kind: Activation,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Linear {
        input: Var,
        weights: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    L2DistanceMap {
        z: Var,
        p: Var,
    },
    /// Minimum over a subset of a tensor's flat entries.
    MinOver {
        input: Var,
        argmin: usize,
    },
    /// Concatenation of scalars into a vector.
    Stack(Vec<Var>),
    PrototypeActivation {
        input: Var,
        epsilon: f64,
    },
    Sum(Var),
    /// `Σ coeff_i · input_i` over scalar inputs.
    WeightedSum {
        inputs: Vec<Var>,
        coeffs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient tape: the recorded forward graph plus, after [`Tape::backward`],
/// the gradient of the loss with respect to every tracked node.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Drops every recorded node and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward loss with respect to `v`, if `v` is
    /// tracked and received any gradient.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.backward_done = false;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        filters: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = kernels::conv2d(self.value(input), self.value(filters), stride, padding)?;
        let rg = self.tracked(&[input, filters]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                filters,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let out = kernels::bias_add(self.value(input), self.value(bias))?;
        let rg = self.tracked(&[input, bias]);
        Ok(self.push(out, Op::BiasAdd { input, bias }, rg))
    }

    pub fn elementwise(&mut self, input: Var, kind: Activation) -> Var {
        let x = self.value(input);
        let f = match kind {
            Activation::Relu => kernels::relu,
            Activation::Sigmoid => kernels::sigmoid,
        };
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
            .expect("shape preserved");
        let rg = self.tracked(&[input]);
        self.push(out, Op::Elementwise { input, kind }, rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.elementwise(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.elementwise(input, Activation::Sigmoid)
    }

    pub fn max_pool(&mut self, input: Var, mode: PoolMode) -> Result<Var> {
        let (out, argmax) = kernels::max_pool(self.value(input), mode)?;
        let rg = self.tracked(&[input]);
        Ok(self.push(out, Op::MaxPool { input, argmax }, rg))
    }

    pub fn linear(&mut self, input: Var, weights: Var) -> Result<Var> {
        let out = kernels::linear(self.value(input), self.value(weights))?;
        let rg = self.tracked(&[input, weights]);
        Ok(self.push(out, Op::Linear { input, weights }, rg))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let l = self.value(logits).data();
        let loss = kernels::cross_entropy(l, label)?;
        let probs = kernels::softmax(l);
        let rg = self.tracked(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            },
            rg,
        ))
    }

    pub fn l2_distance_map(&mut self, z: Var, p: Var) -> Result<Var> {
        let out = kernels::l2_distance_map(self.value(z), self.value(p))?;
        let rg = self.tracked(&[z, p]);
        Ok(self.push(out, Op::L2DistanceMap { z, p }, rg))
    }

    /// Smallest entry of the whole tensor.
    pub fn min_all(&mut self, input: Var) -> Var {
        let n = self.value(input).numel();
        self.min_over(input, &(0..n).collect::<Vec<_>>())
            .expect("full index set is valid")
    }

    /// Smallest of the given flat entries; the gradient goes to the first
    /// minimiser in the order of `indices`.
    pub fn min_over(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(input).data();
        if indices.is_empty() || indices.iter().any(|&i| i >= x.len()) {
            return Err(Error::InvalidArgument(
                "min_over needs a non-empty set of in-range indices".into(),
            ));
        }
        let mut best = indices[0];
        for &i in indices {
            if x[i] < x[best] {
                best = i;
            }
        }
        let value = x[best];
        let rg = self.tracked(&[input]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::MinOver {
                input,
                argmin: best,
            },
            rg,
        ))
    }

    /// Packs one-element tensors into a vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        let mut out = Vec::with_capacity(scalars.len());
        for &s in scalars {
            let t = self.value(s);
            if !t.is_scalar() {
                return Err(Error::InvalidShape(format!(
                    "stack expects scalars, got shape {:?}",
                    t.shape()
                )));
            }
            out.push(t.item());
        }
        let rg = self.tracked(scalars);
        Ok(self.push(Tensor::from_vec(out), Op::Stack(scalars.to_vec()), rg))
    }

    /// Element-wise `ln((d + 1) / (d + ε))`.
    pub fn prototype_activation(&mut self, input: Var, epsilon: f64) -> Var {
        let x = self.value(input);
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data()
                .iter()
                .map(|&d| crate::model::prototype_activation(d, epsilon))
                .collect(),
        )
        .expect("shape preserved");
        let rg = self.tracked(&[input]);
        self.push(out, Op::PrototypeActivation { input, epsilon }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().sum();
        let rg = self.tracked(&[input]);
        self.push(Tensor::scalar(total), Op::Sum(input), rg)
    }

    pub fn weighted_sum(&mut self, inputs: &[Var], coeffs: &[f64]) -> Result<Var> {
        if inputs.len() != coeffs.len() {
            return Err(Error::InvalidArgument(
                "weighted_sum needs one coefficient per input".into(),
            ));
        }
        let mut total = 0.0;
        for (&v, &c) in inputs.iter().zip(coeffs) {
            let t = self.value(v);
            if !t.is_scalar() {
                return Err(Error::InvalidShape("weighted_sum expects scalars".into()));
            }
            total += c * t.item();
        }
        let rg = self.tracked(inputs);
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                inputs: inputs.to_vec(),
                coeffs: coeffs.to_vec(),
            },
            rg,
        ))
    }

    /// Fills in `∂loss/∂v` for every tracked node `v` recorded before `loss`.
    /// Calling it twice without recording anything new (or resetting) is an
    /// error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::InvalidArgument(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        // Lazily allocated accumulator for a parent.
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
        }

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                filters,
                stride,
                padding,
            } => {
                let mut gi = wants(*input).then(|| vec![0.0; nodes[input.0].value.numel()]);
                let mut gf = wants(*filters).then(|| vec![0.0; nodes[filters.0].value.numel()]);
                kernels::conv2d_backward(
                    &nodes[input.0].value,
                    &nodes[filters.0].value,
                    *stride,
                    *padding,
                    g,
                    gi.as_deref_mut(),
                    gf.as_deref_mut(),
                )?;
                if let Some(gi) = gi {
                    add_into(slot(grads, nodes, *input), &gi);
                }
                if let Some(gf) = gf {
                    add_into(slot(grads, nodes, *filters), &gf);
                }
            }
            Op::BiasAdd { input, bias } => {
                if wants(*input) {
                    add_into(slot(grads, nodes, *input), g);
                }
                if wants(*bias) {
                    let c = nodes[bias.0].value.numel();
                    let gb = slot(grads, nodes, *bias);
                    for px in g.chunks_exact(c) {
                        add_into(gb, px);
                    }
                }
            }
            Op::Elementwise { input, kind } => {
                if wants(*input) {
                    let x = nodes[input.0].value.data();
                    let y = node.value.data();
                    let gi = slot(grads, nodes, *input);
                    match kind {
                        Activation::Relu => {
                            for i in 0..g.len() {
                                if x[i] > 0.0 {
                                    gi[i] += g[i];
                                }
                            }
                        }
                        Activation::Sigmoid => {
                            for i in 0..g.len() {
                                gi[i] += g[i] * y[i] * (1.0 - y[i]);
                            }
                        }
                    }
                }
            }
            Op::MaxPool { input, argmax } => {
                if wants(*input) {
                    let gi = slot(grads, nodes, *input);
                    for (o, &src) in argmax.iter().enumerate() {
                        gi[src] += g[o];
                    }
                }
            }
            Op::Linear { input, weights } => {
                let x = nodes[input.0].value.data();
                let w = nodes[weights.0].value.data();
                let m = x.len();
                if wants(*input) {
                    let gi = slot(grads, nodes, *input);
                    for (k, row) in w.chunks_exact(m).enumerate() {
                        for j in 0..m {
                            gi[j] += g[k] * row[j];
                        }
                    }
                }
                if wants(*weights) {
                    let gw = slot(grads, nodes, *weights);
                    for (k, row) in gw.chunks_exact_mut(m).enumerate() {
                        for j in 0..m {
                            row[j] += g[k] * x[j];
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            } => {
                if wants(*logits) {
                    let gl = slot(grads, nodes, *logits);
                    for (k, p) in probs.iter().enumerate() {
                        let onehot = if k == *label { 1.0 } else { 0.0 };
                        gl[k] += g[0] * (p - onehot);
                    }
                }
            }
            Op::L2DistanceMap { z, p } => {
                let mut gz = wants(*z).then(|| vec![0.0; nodes[z.0].value.numel()]);
                let mut gp = wants(*p).then(|| vec![0.0; nodes[p.0].value.numel()]);
                kernels::l2_distance_map_backward(
                    &nodes[z.0].value,
                    &nodes[p.0].value,
                    g,
                    gz.as_deref_mut(),
                    gp.as_deref_mut(),
                )?;
                if let Some(gz) = gz {
                    add_into(slot(grads, nodes, *z), &gz);
                }
                if let Some(gp) = gp {
                    add_into(slot(grads, nodes, *p), &gp);
                }
            }
            Op::MinOver { input, argmin } => {
                if wants(*input) {
                    slot(grads, nodes, *input)[*argmin] += g[0];
                }
            }
            Op::Stack(parts) => {
                for (i, &v) in parts.iter().enumerate() {
                    if wants(v) {
                        slot(grads, nodes, v)[0] += g[i];
                    }
                }
            }
            Op::PrototypeActivation { input, epsilon } => {
                if wants(*input) {
                    let x = nodes[input.0].value.data();
                    let gi = slot(grads, nodes, *input);
                    for i in 0..g.len() {
                        // d/dd ln((d+1)/(d+ε)) = 1/(d+1) − 1/(d+ε)
                        gi[i] += g[i] * (1.0 / (x[i] + 1.0) - 1.0 / (x[i] + epsilon));
                    }
                }
            }
            Op::Sum(input) => {
                if wants(*input) {
                    for v in slot(grads, nodes, *input).iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::WeightedSum { inputs, coeffs } => {
                for (&v, &c) in inputs.iter().zip(coeffs) {
                    if wants(v) {
                        slot(grads, nodes, v)[0] += c * g[0];
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Central-difference gradient of `f` at `at`:
/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad<F>(f: F, at: &Tensor, step: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut probe = at.clone();
    let mut out = Vec::with_capacity(at.numel());
    for i in 0..at.numel() {
        let orig = at.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    Tensor::new(at.shape().to_vec(), out)
}

/// Largest coordinate-wise relative error between an analytic and a numeric
/// gradient. The denominator is floored at `floor` so that coordinates whose
/// true gradient is numerically zero are compared absolutely.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
