//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! A [`Var`] is a shared tensor value plus, when it participates in
//! differentiation, the index of the tape node that produced it. Nodes are
//! appended in execution order, so the tape is always topologically sorted
//! and [`Tape::backward`] is a single reverse sweep.
//!
//! Operations whose inputs carry no node are evaluated but not recorded, so a
//! non-recording tape doubles as a plain inference executor that frees
//! intermediates as soon as they go out of scope.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{self, Activation, BinaryOp, Broadcast, ConvParams, NormMode, RunningStats};
use crate::tensor::{Shape, Tensor};

/// Handle to a tensor value, possibly tracked on a [`Tape`].
#[derive(Clone, Debug)]
pub struct Var {
    value: Arc<Tensor>,
    node: Option<usize>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn node(&self) -> Option<usize> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Arc<Tensor>,
        weight: Arc<Tensor>,
        params: ConvParams,
    },
    BatchNorm {
        input: Arc<Tensor>,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        gamma: Arc<Tensor>,
        mode: NormMode,
    },
    Activation {
        input: Arc<Tensor>,
        kind: Activation,
    },
    Softmax {
        output: Arc<Tensor>,
        axis: usize,
    },
    AvgPool {
        input_shape: Shape,
    },
    Add {
        broadcast: Broadcast,
    },
    Mul {
        a: Arc<Tensor>,
        b: Arc<Tensor>,
        broadcast: Broadcast,
    },
    MatMul {
        a: Arc<Tensor>,
        b: Arc<Tensor>,
        trans_a: bool,
        trans_b: bool,
    },
    Reshape {
        from: Shape,
    },
    Scale {
        factor: f64,
    },
    Sum {
        input_shape: Shape,
    },
    CrossEntropy {
        probs: Tensor,
        labels: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Activation { .. } => "activation",
            Op::Softmax { .. } => "softmax",
            Op::AvgPool { .. } => "global_avg_pool",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::MatMul { .. } => "matmul_batched",
            Op::Reshape { .. } => "reshape",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<Option<usize>>,
    shape: Shape,
}

/// Batch statistics observed by a train-mode batch norm, keyed by layer name.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub layer: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Recorded computation for one forward/backward pass.
///
/// One tape per training step; tapes are not shared between threads.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    track_params: bool,
    check_finite: bool,
    params: HashMap<String, Var>,
    stat_updates: Vec<StatUpdate>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape that tracks parameters.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            track_params: true,
            check_finite: false,
            params: HashMap::new(),
            stat_updates: Vec::new(),
        }
    }

    /// A tape that records nothing; every op is evaluated eagerly.
    pub fn inference() -> Self {
        Self {
            recording: false,
            track_params: false,
            ..Self::new()
        }
    }

    /// A recording tape on which parameters are constants. Only values
    /// explicitly passed to [`Tape::watch`] or [`Tape::leaf`] get gradients.
    pub fn frozen_params() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    /// Fail any op that produces a NaN or infinity, naming the op and node.
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
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

    pub fn constant(&self, value: Tensor) -> Var {
        Var {
            value: Arc::new(value),
            node: None,
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_arc(Arc::new(value), requires_grad)
    }

    fn leaf_arc(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        if !(requires_grad && self.recording) {
            return Var { value, node: None };
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            shape: value.shape(),
        });
        Var {
            value,
            node: Some(id),
        }
    }

    /// Turns an untracked value into a gradient-carrying leaf. Tracked values
    /// are returned unchanged.
    pub fn watch(&mut self, var: &Var) -> Var {
        if var.node.is_some() {
            return var.clone();
        }
        self.leaf_arc(var.value.clone(), true)
    }

    /// Binds a named parameter. Repeated calls with the same name within one
    /// tape return the same leaf.
    pub fn param(&mut self, name: &str, value: &Arc<Tensor>) -> Var {
        if let Some(v) = self.params.get(name) {
            return v.clone();
        }
        let track = self.track_params;
        let var = self.leaf_arc(value.clone(), track);
        self.params.insert(name.to_string(), var.clone());
        var
    }

    /// Batch statistics gathered by train-mode batch norms since the last call.
    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    fn push(&mut self, op: Op, inputs: &[&Var], value: Tensor) -> Result<Var> {
        let input_ids: Vec<Option<usize>> = inputs.iter().map(|v| v.node).collect();
        let record = self.recording && input_ids.iter().any(Option::is_some);
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node: self.nodes.len(),
            });
        }
        if !record {
            return Ok(Var {
                value: Arc::new(value),
                node: None,
            });
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            inputs: input_ids,
            shape: value.shape(),
        });
        Ok(Var {
            value: Arc::new(value),
            node: Some(id),
        })
    }

    fn any_tracked(&self, vars: &[&Var]) -> bool {
        self.recording && vars.iter().any(|v| v.node.is_some())
    }

    pub fn conv2d(
        &mut self,
        x: &Var,
        weight: &Var,
        bias: Option<&Var>,
        params: ConvParams,
    ) -> Result<Var> {
        let y = ops::conv2d(&x.value, &weight.value, bias.map(|b| b.value()), params)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        let op = if self.any_tracked(&inputs) {
            Op::Conv2d {
                input: x.value.clone(),
                weight: weight.value.clone(),
                params,
            }
        } else {
            Op::Leaf
        };
        self.push(op, &inputs, y)
    }

    /// Batch norm; in train mode the batch statistics are queued under `layer`
    /// for [`Tape::take_stat_updates`].
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        layer: &str,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        running: &RunningStats,
        mode: NormMode,
        eps: f64,
    ) -> Result<Var> {
        let out = ops::batch_norm(&x.value, &gamma.value, &beta.value, running, mode, eps)?;
        if let Some((mean, var)) = out.batch_stats {
            self.stat_updates.push(StatUpdate {
                layer: layer.to_string(),
                mean,
                var,
            });
        }
        let inputs = [x, gamma, beta];
        let op = if self.any_tracked(&inputs) {
            Op::BatchNorm {
                input: x.value.clone(),
                mean: out.mean,
                inv_std: out.inv_std,
                gamma: gamma.value.clone(),
                mode,
            }
        } else {
            Op::Leaf
        };
        self.push(op, &inputs, out.output)
    }

    pub fn activation(&mut self, x: &Var, kind: Activation) -> Result<Var> {
        let y = ops::activation(&x.value, kind);
        let op = Op::Activation {
            input: x.value.clone(),
            kind,
        };
        self.push(op, &[x], y)
    }

    /// The tensor of an untracked value that nothing else holds, so an op can
    /// overwrite it instead of allocating.
    fn reclaim(x: Var) -> std::result::Result<Tensor, Var> {
        if x.node.is_some() {
            return Err(x);
        }
        Arc::try_unwrap(x.value).map_err(|value| Var { value, node: None })
    }

    fn finish_in_place(&self, op: &'static str, value: Tensor) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite {
                op,
                node: self.nodes.len(),
            });
        }
        Ok(self.constant(value))
    }

    /// [`Tape::activation`] that reuses the buffer of an unshared, untracked input.
    pub fn activation_owned(&mut self, x: Var, kind: Activation) -> Result<Var> {
        match Self::reclaim(x) {
            Ok(mut t) => {
                t.data_mut().iter_mut().for_each(|v| *v = kind.apply(*v));
                self.finish_in_place("activation", t)
            }
            Err(x) => self.activation(&x, kind),
        }
    }

    /// Infer-mode [`Tape::batch_norm`] that reuses the buffer of an unshared,
    /// untracked input when the affine parameters are untracked too.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_owned(
        &mut self,
        layer: &str,
        x: Var,
        gamma: &Var,
        beta: &Var,
        running: &RunningStats,
        mode: NormMode,
        eps: f64,
    ) -> Result<Var> {
        if mode == NormMode::Train || gamma.node.is_some() || beta.node.is_some() {
            return self.batch_norm(layer, &x, gamma, beta, running, mode, eps);
        }
        match Self::reclaim(x) {
            Ok(mut t) => {
                ops::batch_norm_infer_in_place(&mut t, &gamma.value, &beta.value, running, eps)?;
                self.finish_in_place("batch_norm", t)
            }
            Err(x) => self.batch_norm(layer, &x, gamma, beta, running, mode, eps),
        }
    }

    /// [`Tape::mul`] that overwrites an unshared, untracked `a` when `b` is untracked.
    pub fn mul_owned(&mut self, a: Var, b: &Var, broadcast: Broadcast) -> Result<Var> {
        if b.node.is_some() {
            return self.mul(&a, b, broadcast);
        }
        match Self::reclaim(a) {
            Ok(mut t) => {
                ops::mul_in_place(&mut t, &b.value, broadcast)?;
                self.finish_in_place("mul", t)
            }
            Err(a) => self.mul(&a, b, broadcast),
        }
    }

    /// [`Tape::scale`] that reuses the buffer of an unshared, untracked input.
    pub fn scale_owned(&mut self, x: Var, factor: f64) -> Result<Var> {
        match Self::reclaim(x) {
            Ok(mut t) => {
                t.data_mut().iter_mut().for_each(|v| *v *= factor);
                self.finish_in_place("scale", t)
            }
            Err(x) => self.scale(&x, factor),
        }
    }

    /// [`Tape::softmax`] that reuses the buffer of an unshared, untracked input.
    pub fn softmax_owned(&mut self, x: Var, axis: usize) -> Result<Var> {
        match Self::reclaim(x) {
            Ok(mut t) => {
                ops::softmax_in_place(&mut t, axis)?;
                self.finish_in_place("softmax", t)
            }
            Err(x) => self.softmax(&x, axis),
        }
    }

    pub fn softmax(&mut self, x: &Var, axis: usize) -> Result<Var> {
        let y = Arc::new(ops::softmax(&x.value, axis)?);
        if self.check_finite && !y.all_finite() {
            return Err(Error::NonFinite {
                op: "softmax",
                node: self.nodes.len(),
            });
        }
        if !self.any_tracked(&[x]) {
            return Ok(Var {
                value: y,
                node: None,
            });
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Softmax {
                output: y.clone(),
                axis,
            },
            inputs: vec![x.node],
            shape: y.shape(),
        });
        Ok(Var {
            value: y,
            node: Some(id),
        })
    }

    pub fn global_avg_pool(&mut self, x: &Var) -> Result<Var> {
        let y = ops::global_avg_pool(&x.value)?;
        self.push(
            Op::AvgPool {
                input_shape: x.shape(),
            },
            &[x],
            y,
        )
    }

    pub fn add(&mut self, a: &Var, b: &Var, broadcast: Broadcast) -> Result<Var> {
        let y = ops::elementwise(&a.value, &b.value, BinaryOp::Add, broadcast)?;
        self.push(Op::Add { broadcast }, &[a, b], y)
    }

    pub fn mul(&mut self, a: &Var, b: &Var, broadcast: Broadcast) -> Result<Var> {
        let y = ops::elementwise(&a.value, &b.value, BinaryOp::Mul, broadcast)?;
        let op = Op::Mul {
            a: a.value.clone(),
            b: b.value.clone(),
            broadcast,
        };
        self.push(op, &[a, b], y)
    }

    pub fn matmul(&mut self, a: &Var, b: &Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let y = ops::matmul_batched(&a.value, &b.value, trans_a, trans_b)?;
        let op = Op::MatMul {
            a: a.value.clone(),
            b: b.value.clone(),
            trans_a,
            trans_b,
        };
        self.push(op, &[a, b], y)
    }

    pub fn reshape(&mut self, x: &Var, shape: Shape) -> Result<Var> {
        let y = (*x.value).clone().reshape(shape)?;
        self.push(Op::Reshape { from: x.shape() }, &[x], y)
    }

    pub fn scale(&mut self, x: &Var, factor: f64) -> Result<Var> {
        let y = x.value.map(|v| v * factor);
        self.push(Op::Scale { factor }, &[x], y)
    }

    /// Sum of all elements as a `(1,1,1,1)` scalar.
    pub fn sum(&mut self, x: &Var) -> Result<Var> {
        let y = Tensor::scalar(x.value.sum());
        self.push(
            Op::Sum {
                input_shape: x.shape(),
            },
            &[x],
            y,
        )
    }

    /// Mean softmax cross-entropy of `(n, k, 1, 1)` logits.
    pub fn cross_entropy(&mut self, logits: &Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy(&logits.value, labels)?;
        let op = Op::CrossEntropy {
            probs,
            labels: labels.to_vec(),
        };
        self.push(op, &[logits], Tensor::scalar(loss))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if loss.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let root = loss
            .node
            .ok_or_else(|| Error::Contract("loss is not recorded on this tape".into()))?;
        if root >= self.nodes.len() {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::full(self.nodes[root].shape, 1.0));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let input_grads = backward_node(node, &g)?;
            for (slot, ig) in node.inputs.iter().zip(input_grads) {
                if let (Some(src), Some(ig)) = (slot, ig) {
                    accumulate(&mut grads[*src], ig);
                }
            }
            grads[id] = Some(g);
        }
        let params = self
            .params
            .iter()
            .filter_map(|(k, v)| v.node.map(|n| (k.clone(), n)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn backward_node(node: &Node, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
    let wants = |i: usize| node.inputs.get(i).is_some_and(Option::is_some);
    Ok(match &node.op {
        Op::Leaf => Vec::new(),
        Op::Conv2d {
            input,
            weight,
            params,
        } => {
            let cg = ops::conv2d_backward(input, weight, g, *params)?;
            vec![Some(cg.input), Some(cg.weight), Some(cg.bias)]
        }
        Op::BatchNorm {
            input,
            mean,
            inv_std,
            gamma,
            mode,
        } => {
            let (dx, dg, db) = ops::batch_norm_backward(g, input, mean, inv_std, gamma, *mode)?;
            let dg = dg.reshape(gamma.shape())?;
            let db = db.reshape(gamma.shape())?;
            vec![Some(dx), Some(dg), Some(db)]
        }
        Op::Activation { input, kind } => vec![Some(ops::activation_backward(input, g, *kind)?)],
        Op::Softmax { output, axis } => vec![Some(ops::softmax_backward(output, g, *axis)?)],
        Op::AvgPool { input_shape } => vec![Some(ops::global_avg_pool_backward(*input_shape, g)?)],
        Op::Add { broadcast } => {
            let db = match broadcast {
                Broadcast::None => g.clone(),
                Broadcast::PerChannel => ops::reduce_per_channel(g),
            };
            vec![Some(g.clone()), Some(db)]
        }
        Op::Mul { a, b, broadcast } => {
            let da = wants(0)
                .then(|| ops::elementwise(g, b, BinaryOp::Mul, *broadcast))
                .transpose()?;
            let db = if wants(1) {
                let full = ops::elementwise(g, a, BinaryOp::Mul, Broadcast::None)?;
                Some(match broadcast {
                    Broadcast::None => full,
                    Broadcast::PerChannel => ops::reduce_per_channel(&full),
                })
            } else {
                None
            };
            vec![da, db]
        }
        Op::MatMul {
            a,
            b,
            trans_a,
            trans_b,
        } => {
            let (da, db) = ops::matmul_batched_backward(a, b, *trans_a, *trans_b, g)?;
            vec![Some(da), Some(db)]
        }
        Op::Reshape { from } => vec![Some(g.clone().reshape(*from)?)],
        Op::Scale { factor } => vec![Some(g.map(|v| v * factor))],
        Op::Sum { input_shape } => vec![Some(Tensor::full(*input_shape, g.item()?))],
        Op::CrossEntropy { probs, labels } => {
            let [n, k, _, _] = probs.shape();
            let upstream = g.item()? / n as f64;
            let mut d = probs.clone();
            for (row, &label) in labels.iter().enumerate() {
                d.data_mut()[row * k + label] -= 1.0;
            }
            vec![Some(d.map(|v| v * upstream))]
        }
    })
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<String, usize>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        var.node.and_then(|n| self.grads.get(n)?.as_ref())
    }

    /// Gradient of a parameter bound with [`Tape::param`].
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|&n| self.grads[n].as_ref())
    }
}

/// Settings for [`grad_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Seeds the random output projection and coordinate sampling.
    pub seed: u64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            seed: 0,
            max_coords: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over all checked coordinates.
    pub max_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares the tape gradient of `forward` against central finite differences.
///
/// `forward` receives one `Var` per entry of `inputs` and may return any
/// shape; the scalar objective is `Σ r ⊙ output` with a fixed random `r`
/// drawn from `cfg.seed`, which exercises every output element.
pub fn grad_check<F>(forward: F, inputs: &[Tensor], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut tape = Tape::new().with_finite_checks();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = forward(&mut tape, &vars)?;
    let projection = Tensor::uniform(out.shape(), -1.0, 1.0, &mut rng);
    let loss = {
        let r = tape.constant(projection.clone());
        let prod = tape.mul(&out, &r, Broadcast::None)?;
        tape.sum(&prod)?
    };
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(v.shape()))
        })
        .collect();
    drop(tape);

    let objective = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::inference().with_finite_checks();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = forward(&mut tape, &vars)?;
        Ok(out
            .value()
            .data()
            .iter()
            .zip(projection.data())
            .map(|(a, b)| a * b)
            .sum())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for idx in 0..inputs.len() {
        let len = inputs[idx].numel();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < len => (0..m).map(|_| rng.gen_range(0..len)).collect(),
            _ => (0..len).collect(),
        };
        for coord in coords {
            let orig = inputs[idx].data()[coord];
            work[idx].data_mut()[coord] = orig + cfg.step;
            let plus = objective(&work)?;
            work[idx].data_mut()[coord] = orig - cfg.step;
            let minus = objective(&work)?;
            work[idx].data_mut()[coord] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = (analytic[idx].data()[coord] - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if err > report.max_error {
                report.max_error = err;
                report.worst = (idx, coord);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_gradient_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let loss = tape.sum(&x).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[1.0]);
        assert_eq!(g.get(&loss).unwrap().data(), &[1.0]);
    }

    #[test]
    fn relu_subgradient() {
        for (x0, expect) in [(2.0, 1.0), (-3.0, 0.0), (0.0, 0.0)] {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::scalar(x0), true);
            let y = tape.activation(&x, Activation::Relu).unwrap();
            let g = tape.backward(&y).unwrap();
            assert_eq!(g.get(&x).unwrap().data(), &[expect]);
        }
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let av = Tensor::new([1, 1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let bv = Tensor::new([1, 1, 1, 3], vec![4.0, 3.0, -1.0]).unwrap();
        let a = tape.leaf(av.clone(), true);
        let b = tape.leaf(bv.clone(), true);
        let p = tape.mul(&a, &b, Broadcast::None).unwrap();
        let loss = tape.sum(&p).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&a).unwrap(), &bv);
        assert_eq!(g.get(&b).unwrap(), &av);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.mul(&x, &x, Broadcast::None).unwrap();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([1, 2, 1, 1]), true);
        let y = tape.scale(&x, 2.0).unwrap();
        assert!(matches!(tape.backward(&y), Err(Error::Contract(_))));
    }

    #[test]
    fn inference_tape_records_nothing() {
        let mut tape = Tape::inference();
        let w = Arc::new(Tensor::full([1, 1, 1, 1], 2.0));
        let x = tape.constant(Tensor::full([1, 1, 2, 2], 1.0));
        let wv = tape.param("w", &w);
        let y = tape.conv2d(&x, &wv, None, ConvParams::POINTWISE).unwrap();
        assert!(tape.is_empty());
        assert!(!y.is_tracked());
        assert_eq!(y.value().data(), &[2.0; 4]);
    }

    #[test]
    fn nodes_are_topologically_ordered() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full([1, 2, 2, 2], 0.5), true);
        let a = tape.activation(&x, Activation::Sigmoid).unwrap();
        let b = tape.global_avg_pool(&a).unwrap();
        let c = tape.mul(&x, &b, Broadcast::PerChannel).unwrap();
        let _ = tape.sum(&c).unwrap();
        for (id, node) in tape.nodes.iter().enumerate() {
            for src in node.inputs.iter().flatten() {
                assert!(*src < id);
            }
        }
    }

    #[test]
    fn finite_checks_name_the_op() {
        let mut tape = Tape::new().with_finite_checks();
        let x = tape.leaf(Tensor::scalar(f64::MAX), true);
        let r = tape.scale(&x, 10.0);
        assert!(matches!(
            r,
            Err(Error::NonFinite {
                op: "scale",
                node: 1
            })
        ));
    }

    #[test]
    fn grad_check_catches_a_wrong_gradient() {
        // d/dx of x*x evaluated through two different leaves is fine ...
        let x = Tensor::new([1, 1, 1, 4], vec![0.3, -0.7, 1.1, 2.0]).unwrap();
        let ok = grad_check(
            |t, v| t.mul(&v[0], &v[0], Broadcast::None),
            std::slice::from_ref(&x),
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(ok.max_error < 1e-8);
        // ... while treating one factor as a constant halves the gradient.
        let bad = grad_check(
            |t, v| {
                let c = t.constant(v[0].value().clone());
                t.mul(&v[0], &c, Broadcast::None)
            },
            &[x],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(bad.max_error > 0.1);
    }
}
