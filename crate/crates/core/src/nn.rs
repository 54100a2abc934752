//! Network building blocks.
//!
//! Blocks own no tensors. Their weights live in a [`ParamStore`] under
//! dotted names (`stage1.block0.expand.conv.weight`) and are bound to the
//! tape at forward time through a [`Ctx`]. This keeps parameter enumeration
//! in one ordered place for the optimizer, the checkpoint writer and the
//! complexity counter.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{
    Activation, Broadcast, ConvParams, NormMode, RunningStats, BN_EPSILON, BN_MOMENTUM,
};
use crate::tensor::{Shape, Tensor};

/// Ordered, named storage for trainable tensors and batch-norm statistics.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<(String, Arc<Tensor>)>,
    index: HashMap<String, usize>,
    stats: Vec<(String, RunningStats)>,
    stats_index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push((name, Arc::new(value)));
        Ok(())
    }

    pub fn insert_stats(&mut self, name: impl Into<String>, stats: RunningStats) -> Result<()> {
        let name = name.into();
        if self.stats_index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate norm layer `{name}`")));
        }
        self.stats_index.insert(name.clone(), self.stats.len());
        self.stats.push((name, stats));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor>> {
        self.index
            .get(name)
            .map(|&i| &self.params[i].1)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    /// Mutable access; clones the tensor if a tape still shares it.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        Ok(Arc::make_mut(&mut self.params[i].1))
    }

    pub fn stats(&self, name: &str) -> Result<&RunningStats> {
        self.stats_index
            .get(name)
            .map(|&i| &self.stats[i].1)
            .ok_or_else(|| Error::Config(format!("unknown norm layer `{name}`")))
    }

    pub fn stats_mut(&mut self, name: &str) -> Result<&mut RunningStats> {
        let i = *self
            .stats_index
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown norm layer `{name}`")))?;
        Ok(&mut self.stats[i].1)
    }

    /// Parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Tensor>)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params
            .iter_mut()
            .map(|(n, t)| (n.as_str(), Arc::make_mut(t)))
    }

    pub fn stats_iter(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.stats.iter().map(|(n, s)| (n.as_str(), s))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn apply_stat_updates(&mut self, updates: &[crate::autograd::StatUpdate]) -> Result<()> {
        for u in updates {
            self.stats_mut(&u.layer)?
                .update(&u.mean, &u.var, BN_MOMENTUM);
        }
        Ok(())
    }
}

/// Forward-pass context: the tape, the parameters and the norm mode.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub mode: NormMode,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: NormMode) -> Self {
        Self { tape, store, mode }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let value = self.store.get(name)?;
        Ok(self.tape.param(name, value))
    }
}

/// Architectural description of one layer, consumed by the complexity counter.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Activation(Activation),
    AvgPool,
    /// Elementwise add or multiply (including per-channel broadcast).
    Elementwise,
    /// Score product, softmax and value product of global attention.
    Attention {
        heads: usize,
        head_dim: usize,
        tokens: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub input: Shape,
    pub output: Shape,
}

fn fan_in_uniform(shape: Shape, rng: &mut impl Rng) -> Tensor {
    let fan_in = (shape[1] * shape[2] * shape[3]).max(1) as f64;
    let bound = 1.0 / fan_in.sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Convolution layer: `{name}.weight` and optionally `{name}.bias`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub params: ConvParams,
    pub bias: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        params: ConvParams,
        bias: bool,
    ) -> Result<Self> {
        let name = name.into();
        let g = params.groups;
        if g == 0 || !c_in.is_multiple_of(g) || !c_out.is_multiple_of(g) {
            return Err(Error::Config(format!(
                "{name}: {g} groups must divide {c_in} input and {c_out} output channels"
            )));
        }
        store.insert(
            format!("{name}.weight"),
            fan_in_uniform([c_out, c_in / g, kernel, kernel], rng),
        )?;
        if bias {
            store.insert(format!("{name}.bias"), Tensor::vector(vec![0.0; c_out]))?;
        }
        Ok(Self {
            name,
            c_in,
            c_out,
            kernel,
            params,
            bias,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Var) -> Result<Var> {
        let w = ctx.param(&format!("{}.weight", self.name))?;
        let b = if self.bias {
            Some(ctx.param(&format!("{}.bias", self.name))?)
        } else {
            None
        };
        ctx.tape.conv2d(x, &w, b.as_ref(), self.params)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let [n, c, h, w] = input;
        if c != self.c_in {
            return Err(Error::dim(
                "conv2d",
                "c_in",
                format!("{}: expected {} channels, got {c}", self.name, self.c_in),
            ));
        }
        let p = self.params;
        let ho = crate::ops::conv_output_len(h, self.kernel, p.stride, p.padding);
        let wo = crate::ops::conv_output_len(w, self.kernel, p.stride, p.padding);
        match (ho, wo) {
            (Some(ho), Some(wo)) => Ok([n, self.c_out, ho, wo]),
            _ => Err(Error::dim(
                "conv2d",
                "spatial",
                format!("{}: input {h}x{w} too small", self.name),
            )),
        }
    }

    pub fn describe(&self, input: Shape, out: &mut Vec<LayerSpec>) -> Result<Shape> {
        let output = self.output_shape(input)?;
        out.push(LayerSpec {
            name: self.name.clone(),
            kind: LayerKind::Conv {
                c_in: self.c_in,
                c_out: self.c_out,
                kernel: self.kernel,
                stride: self.params.stride,
                padding: self.params.padding,
                groups: self.params.groups,
                bias: self.bias,
            },
            input,
            output,
        });
        Ok(output)
    }
}

/// Batch norm: `{name}.gamma`, `{name}.beta` plus running statistics.
#[derive(Clone, Debug)]
pub struct Norm {
    pub name: String,
    pub channels: usize,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: impl Into<String>, channels: usize) -> Result<Self> {
        let name = name.into();
        store.insert(format!("{name}.gamma"), Tensor::vector(vec![1.0; channels]))?;
        store.insert(format!("{name}.beta"), Tensor::vector(vec![0.0; channels]))?;
        store.insert_stats(name.clone(), RunningStats::new(channels))?;
        Ok(Self { name, channels })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Var) -> Result<Var> {
        let gamma = ctx.param(&format!("{}.gamma", self.name))?;
        let beta = ctx.param(&format!("{}.beta", self.name))?;
        let stats = ctx.store.stats(&self.name)?;
        ctx.tape
            .batch_norm(&self.name, x, &gamma, &beta, stats, ctx.mode, BN_EPSILON)
    }

    /// Like [`Norm::forward`], reusing `x`'s buffer when possible.
    pub fn forward_owned(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let gamma = ctx.param(&format!("{}.gamma", self.name))?;
        let beta = ctx.param(&format!("{}.beta", self.name))?;
        let stats = ctx.store.stats(&self.name)?;
        ctx.tape
            .batch_norm_owned(&self.name, x, &gamma, &beta, stats, ctx.mode, BN_EPSILON)
    }

    pub fn describe(&self, input: Shape, out: &mut Vec<LayerSpec>) -> Shape {
        out.push(LayerSpec {
            name: self.name.clone(),
            kind: LayerKind::BatchNorm {
                channels: self.channels,
            },
            input,
            output: input,
        });
        input
    }
}

fn describe_pointwise_op(
    name: String,
    kind: LayerKind,
    input: Shape,
    out: &mut Vec<LayerSpec>,
) -> Shape {
    out.push(LayerSpec {
        name,
        kind,
        input,
        output: input,
    });
    input
}

/// Convolution → batch norm → optional activation.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv,
    pub norm: Norm,
    pub act: Option<Activation>,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        params: ConvParams,
        act: Option<Activation>,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(
                store,
                rng,
                format!("{name}.conv"),
                c_in,
                c_out,
                kernel,
                params,
                true,
            )?,
            norm: Norm::new(store, format!("{name}.bn"), c_out)?,
            act,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        self.norm_act(ctx, y)
    }

    /// Like [`ConvBn::forward`], releasing `x` as soon as the convolution is done.
    pub fn forward_owned(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, &x)?;
        drop(x);
        self.norm_act(ctx, y)
    }

    fn norm_act(&self, ctx: &mut Ctx, y: Var) -> Result<Var> {
        let y = self.norm.forward_owned(ctx, y)?;
        match self.act {
            Some(kind) => ctx.tape.activation_owned(y, kind),
            None => Ok(y),
        }
    }

    pub fn describe(&self, input: Shape, out: &mut Vec<LayerSpec>) -> Result<Shape> {
        let s = self.conv.describe(input, out)?;
        let s = self.norm.describe(s, out);
        if let Some(kind) = self.act {
            describe_pointwise_op(
                format!("{}.act", self.norm.name),
                LayerKind::Activation(kind),
                s,
                out,
            );
        }
        Ok(s)
    }
}

/// Order of the squeeze-excitation sub-operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SeOrder {
    /// `σ(excite(avgpool(ReLU(squeeze(x))))) ⊙ x`: the squeeze convolution
    /// runs on the full map before pooling.
    #[default]
    Literal,
    /// `σ(excite(ReLU(squeeze(avgpool(x))))) ⊙ x`.
    Standard,
}

/// Squeeze-and-excitation channel gate.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub squeeze: Conv,
    pub excite: Conv,
    pub order: SeOrder,
}

impl SqueezeExcite {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        reduced: usize,
        order: SeOrder,
    ) -> Result<Self> {
        let pw = ConvParams::POINTWISE;
        Ok(Self {
            squeeze: Conv::new(
                store,
                rng,
                format!("{name}.squeeze"),
                channels,
                reduced,
                1,
                pw,
                true,
            )?,
            excite: Conv::new(
                store,
                rng,
                format!("{name}.excite"),
                reduced,
                channels,
                1,
                pw,
                true,
            )?,
            order,
        })
    }

    /// Per-channel gates in `(0, 1)`, shape `(n, c, 1, 1)`.
    pub fn gates(&self, ctx: &mut Ctx, x: &Var) -> Result<Var> {
        let pooled = match self.order {
            SeOrder::Literal => {
                let mut s = self.squeeze.forward(ctx, x)?;
                s = ctx.tape.activation(&s, Activation::Relu)?;
                ctx.tape.global_avg_pool(&s)?
            }
            SeOrder::Standard => {
                let p = ctx.tape.global_avg_pool(x)?;
                let s = self.squeeze.forward(ctx, &p)?;
                ctx.tape.activation(&s, Activation::Relu)?
            }
        };
        let e = self.excite.forward(ctx, &pooled)?;
        ctx.tape.activation(&e, Activation::Sigmoid)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Var) -> Result<Var> {
        let g = self.gates(ctx, x)?;
        ctx.tape.mul(x, &g, Broadcast::PerChannel)
    }

    /// Like [`SqueezeExcite::forward`], gating `x` in place when possible.
    pub fn forward_owned(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let g = self.gates(ctx, &x)?;
        ctx.tape.mul_owned(x, &g, Broadcast::PerChannel)
    }

    pub fn describe(&self, input: Shape, out: &mut Vec<LayerSpec>) -> Result<Shape> {
        let [n, c, h, w] = input;
        let pooled = [n, c, 1, 1];
        let name = self.squeeze.name.trim_end_matches(".squeeze").to_string();
        let squeezed = match self.order {
            SeOrder::Literal => {
                let s = self.squeeze.describe(input, out)?;
                describe_pointwise_op(
                    format!("{name}.relu"),
                    LayerKind::Activation(Activation::Relu),
                    s,
                    out,
                );
                out.push(LayerSpec {
                    name: format!("{name}.pool"),
                    kind: LayerKind::AvgPool,
                    input: s,
                    output: [n, s[1], 1, 1],
                });
                [n, s[1], 1, 1]
            }
            SeOrder::Standard => {
                out.push(LayerSpec {
                    name: format!("{name}.pool"),
                    kind: LayerKind::AvgPool,
                    input,
                    output: pooled,
                });
                let s = self.squeeze.describe(pooled, out)?;
                describe_pointwise_op(
                    format!("{name}.relu"),
                    LayerKind::Activation(Activation::Relu),
                    s,
                    out,
                )
            }
        };
        let e = self.excite.describe(squeezed, out)?;
        describe_pointwise_op(
            format!("{name}.sigmoid"),
            LayerKind::Activation(Activation::Sigmoid),
            e,
            out,
        );
        out.push(LayerSpec {
            name: format!("{name}.gate"),
            kind: LayerKind::Elementwise,
            input: [n, c, h, w],
            output: [n, c, h, w],
        });
        Ok(input)
    }
}

/// Options shared by every MBConv3 block of a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MbConvOptions {
    pub expansion: usize,
    pub se_ratio: usize,
    pub activation: Activation,
    pub se_order: SeOrder,
}

impl Default for MbConvOptions {
    fn default() -> Self {
        Self {
            expansion: 3,
            se_ratio: 4,
            activation: Activation::HardSwish,
            se_order: SeOrder::Literal,
        }
    }
}

/// Inverted bottleneck: 1×1 expansion, 3×3 depthwise (carrying the stride),
/// squeeze-excitation, 1×1 projection, identity skip when shapes allow.
#[derive(Clone, Debug)]
pub struct MbConv3 {
    pub name: String,
    pub expand: ConvBn,
    pub depthwise: ConvBn,
    pub se: SqueezeExcite,
    pub reduce: ConvBn,
    pub residual: bool,
}

impl MbConv3 {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        opts: MbConvOptions,
    ) -> Result<Self> {
        if opts.expansion == 0 || opts.se_ratio == 0 {
            return Err(Error::Config(format!(
                "{name}: expansion and se_ratio must be positive"
            )));
        }
        let mid = c_in * opts.expansion;
        let act = Some(opts.activation);
        Ok(Self {
            name: name.to_string(),
            expand: ConvBn::new(
                store,
                rng,
                &format!("{name}.expand"),
                c_in,
                mid,
                1,
                ConvParams::POINTWISE,
                act,
            )?,
            depthwise: ConvBn::new(
                store,
                rng,
                &format!("{name}.depthwise"),
                mid,
                mid,
                3,
                ConvParams::new(stride, 1, mid),
                act,
            )?,
            se: SqueezeExcite::new(
                store,
                rng,
                &format!("{name}.se"),
                mid,
                (mid / opts.se_ratio).max(1),
                opts.se_order,
            )?,
            reduce: ConvBn::new(
                store,
                rng,
                &format!("{name}.reduce"),
                mid,
                c_out,
                1,
                ConvParams::POINTWISE,
                None,
            )?,
            residual: stride == 1 && c_in == c_out,
        })
    }

    /// Expansion and depthwise stages (the input to the SE gate).
    pub fn local_features(&self, ctx: &mut Ctx, x: &Var) -> Result<Var> {
        let y = self.expand.forward(ctx, x)?;
        self.depthwise.forward_owned(ctx, y)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Var) -> Result<Var> {
        if x.shape()[1] != self.expand.conv.c_in {
            return Err(Error::dim(
                "mbconv3",
                "channels",
                format!(
                    "{}: expected {} channels, got {}",
                    self.name,
                    self.expand.conv.c_in,
                    x.shape()[1]
                ),
            ));
        }
        let mut y = self.local_features(ctx, x)?;
        y = self.se.forward_owned(ctx, y)?;
        y = self.reduce.forward(ctx, &y)?;
        if self.residual {
            ctx.tape.add(x, &y, Broadcast::None)
        } else {
            Ok(y)
        }
    }

    pub fn describe(&self, input: Shape, out: &mut Vec<LayerSpec>) -> Result<Shape> {
        let s = self.expand.describe(input, out)?;
        let s = self.depthwise.describe(s, out)?;
        let s = self.se.describe(s, out)?;
        let s = self.reduce.describe(s, out)?;
        if self.residual {
            describe_pointwise_op(
                format!("{}.residual", self.name),
                LayerKind::Elementwise,
                s,
                out,
            );
        }
        Ok(s)
    }
}

/// `c·(c/g)` weights plus `c` biases: the size of a grouped pointwise projection.
pub fn grouped_pointwise_param_count(channels: usize, groups: usize) -> usize {
    channels * (channels / groups) + channels
}

/// 1×1 convolution with `groups` groups over `x`.
pub fn grouped_pointwise(
    tape: &mut Tape,
    x: &Var,
    weight: &Var,
    bias: Option<&Var>,
    groups: usize,
) -> Result<Var> {
    tape.conv2d(x, weight, bias, ConvParams::new(1, 0, groups))
}

/// Global multi-head self-attention over all `h·w` positions with grouped
/// pointwise query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct Mhsa2d {
    pub name: String,
    pub channels: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub groups: usize,
    pub query: Conv,
    pub key: Conv,
    pub value: Conv,
    pub output: Conv,
}

impl Mhsa2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        heads: usize,
        groups: usize,
    ) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: {heads} heads do not divide {channels} channels"
            )));
        }
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "{name}: {groups} projection groups do not divide {channels} channels"
            )));
        }
        let p = ConvParams::new(1, 0, groups);
        let mut proj = |suffix: &str| {
            Conv::new(
                store,
                rng,
                format!("{name}.{suffix}"),
                channels,
                channels,
                1,
                p,
                true,
            )
        };
        Ok(Self {
            name: name.to_string(),
            channels,
            heads,
            head_dim: channels / heads,
            groups,
            query: proj("query")?,
            key: proj("key")?,
            value: proj("value")?,
            output: proj("output")?,
        })
    }

    /// Returns the output and the `(n, heads, tokens, tokens)` attention weights.
    pub fn forward_with_weights(&self, ctx: &mut Ctx, x: &Var) -> Result<(Var, Var)> {
        let [n, c, h, w] = x.shape();
        if c != self.channels {
            return Err(Error::Config(format!(
                "{}: expected {} channels, got {c}",
                self.name, self.channels
            )));
        }
        let tokens = h * w;
        let split = [n, self.heads, self.head_dim, tokens];
        let mut q = self.query.forward(ctx, x)?;
        q = ctx.tape.reshape(&q, split)?;
        let mut k = self.key.forward(ctx, x)?;
        k = ctx.tape.reshape(&k, split)?;
        let mut v = self.value.forward(ctx, x)?;
        v = ctx.tape.reshape(&v, split)?;
        // scores[i, j] = Σ_d q[d, i] k[d, j]
        let scores = ctx.tape.matmul(&q, &k, true, false)?;
        drop((q, k));
        let scores = ctx
            .tape
            .scale_owned(scores, 1.0 / (self.head_dim as f64).sqrt())?;
        let attn = ctx.tape.softmax_owned(scores, 3)?;
        // mixed[d, i] = Σ_j v[d, j] attn[i, j]
        let mut mixed = ctx.tape.matmul(&v, &attn, false, true)?;
        mixed = ctx.tape.reshape(&mixed, [n, c, h, w])?;
        let out = self.output.forward(ctx, &mixed)?;
        Ok((out, attn))
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Var) -> Result<Var> {
        self.forward_with_weights(ctx, x).map(|(o, _)| o)
    }

    pub fn describe(&self, input: Shape, out: &mut Vec<LayerSpec>) -> Result<Shape> {
        for proj in [&self.query, &self.key, &self.value] {
            proj.describe(input, out)?;
        }
        let [n, _, h, w] = input;
        out.push(LayerSpec {
            name: format!("{}.attention", self.name),
            kind: LayerKind::Attention {
                heads: self.heads,
                head_dim: self.head_dim,
                tokens: h * w,
            },
            input,
            output: [n, self.heads * self.head_dim, h, w],
        });
        self.output.describe(input, out)
    }
}

/// Pre-norm attention with a residual connection: `x + mhsa(bn(x))`.
#[derive(Clone, Debug)]
pub struct MhsaBlock {
    pub name: String,
    pub norm: Norm,
    pub attn: Mhsa2d,
}

impl MhsaBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        heads: usize,
        groups: usize,
    ) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            norm: Norm::new(store, format!("{name}.bn"), channels)?,
            attn: Mhsa2d::new(store, rng, &format!("{name}.mhsa"), channels, heads, groups)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Var) -> Result<Var> {
        let mut y = self.norm.forward(ctx, x)?;
        y = self.attn.forward(ctx, &y)?;
        ctx.tape.add(x, &y, Broadcast::None)
    }

    pub fn describe(&self, input: Shape, out: &mut Vec<LayerSpec>) -> Result<Shape> {
        let s = self.norm.describe(input, out);
        let s = self.attn.describe(s, out)?;
        Ok(describe_pointwise_op(
            format!("{}.residual", self.name),
            LayerKind::Elementwise,
            s,
            out,
        ))
    }
}

/// Stem: 3×3 convolution (stride 1, padding 1), batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct Stem {
    pub layer: ConvBn,
}

impl Stem {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, c_out: usize) -> Result<Self> {
        Ok(Self {
            layer: ConvBn::new(
                store,
                rng,
                "stem",
                3,
                c_out,
                3,
                ConvParams::new(1, 1, 1),
                Some(Activation::Relu),
            )?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Var) -> Result<Var> {
        let [_, c, h, w] = x.shape();
        if c != 3 {
            return Err(Error::dim(
                "stem",
                "channels",
                format!("expected 3 input channels, got {c}"),
            ));
        }
        if h < 3 || w < 3 {
            return Err(Error::dim(
                "stem",
                "spatial",
                format!("input {h}x{w} smaller than 3x3"),
            ));
        }
        self.layer.forward(ctx, x)
    }

    pub fn describe(&self, input: Shape, out: &mut Vec<LayerSpec>) -> Result<Shape> {
        self.layer.describe(input, out)
    }
}

/// Stride-2 3×3 convolution with batch norm between stages.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub layer: ConvBn,
}

impl Downsample {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            layer: ConvBn::new(
                store,
                rng,
                name,
                c_in,
                c_out,
                3,
                ConvParams::new(2, 1, 1),
                None,
            )?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: &Var) -> Result<Var> {
        let [_, _, h, w] = x.shape();
        if h < 2 || w < 2 {
            return Err(Error::dim(
                "downsample",
                "spatial",
                format!("input {h}x{w} below 2x2"),
            ));
        }
        self.layer.forward(ctx, x)
    }

    pub fn describe(&self, input: Shape, out: &mut Vec<LayerSpec>) -> Result<Shape> {
        self.layer.describe(input, out)
    }
}

/// `local ⊕ global`: elementwise sum of equally shaped feature maps.
pub fn fuse_local_global(tape: &mut Tape, local: &Var, global: &Var) -> Result<Var> {
    if local.shape() != global.shape() {
        return Err(Error::dim(
            "fuse_local_global",
            "shape",
            format!("local {:?} vs global {:?}", local.shape(), global.shape()),
        ));
    }
    tape.add(local, global, Broadcast::None)
}

/// Global average pool followed by a 1×1 affine map to class logits.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub fc: Conv,
}

impl ClassifierHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        c_in: usize,
        classes: usize,
    ) -> Result<Self> {
        Ok(Self {
            fc: Conv::new(
                store,
                rng,
                "head.fc",
                c_in,
                classes,
                1,
                ConvParams::POINTWISE,
                true,
            )?,
        })
    }

    /// Logits of shape `(n, classes, 1, 1)`.
    pub fn forward(&self, ctx: &mut Ctx, x: &Var) -> Result<Var> {
        let pooled = ctx.tape.global_avg_pool(x)?;
        self.fc.forward(ctx, &pooled)
    }

    pub fn describe(&self, input: Shape, out: &mut Vec<LayerSpec>) -> Result<Shape> {
        let [n, c, _, _] = input;
        out.push(LayerSpec {
            name: "head.pool".into(),
            kind: LayerKind::AvgPool,
            input,
            output: [n, c, 1, 1],
        });
        self.fc.describe([n, c, 1, 1], out)
    }
}
