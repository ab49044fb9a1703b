use std::collections::{HashMap, HashSet};
use std::str::FromStr;

use super::kernels::{self, ConvGeom};
use super::store::{BnUpdate, ParameterStore, StoreId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How a graph treats gradients and normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Records every primitive for backward; batchnorm uses batch statistics.
    Recording,
    /// No recording; batchnorm uses batch statistics (target branch).
    BatchStats,
    /// No recording; batchnorm uses running statistics.
    Frozen,
}

impl Mode {
    pub fn records(self) -> bool {
        matches!(self, Mode::Recording)
    }

    pub fn batch_stats(self) -> bool {
        !matches!(self, Mode::Frozen)
    }
}

/// Kinds of primitive the tape can apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimitiveKind {
    Matmul,
    BatchMatmul,
    Conv2d,
    DepthwiseConv2d,
    Add,
    Sub,
    Mul,
    Relu,
    BatchNormTrain,
    BatchNormEval,
    SoftmaxLastDim,
    GlobalAvgPool,
    Reshape,
    Scale,
    ConcatChannels,
    SliceLeading,
    L2Normalize,
    Sum,
    Mean,
    SoftmaxCrossEntropy,
}

impl FromStr for PrimitiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => PrimitiveKind::Matmul,
            "batch-matmul" => PrimitiveKind::BatchMatmul,
            "conv2d" => PrimitiveKind::Conv2d,
            "depthwise-conv2d" => PrimitiveKind::DepthwiseConv2d,
            "add" => PrimitiveKind::Add,
            "sub" => PrimitiveKind::Sub,
            "mul" => PrimitiveKind::Mul,
            "relu" => PrimitiveKind::Relu,
            "batchnorm-train" => PrimitiveKind::BatchNormTrain,
            "batchnorm-eval" => PrimitiveKind::BatchNormEval,
            "softmax-lastdim" => PrimitiveKind::SoftmaxLastDim,
            "global-avg-pool" => PrimitiveKind::GlobalAvgPool,
            "reshape" => PrimitiveKind::Reshape,
            "scale" => PrimitiveKind::Scale,
            "concat-channels" => PrimitiveKind::ConcatChannels,
            "slice-leading" => PrimitiveKind::SliceLeading,
            "l2-normalize" => PrimitiveKind::L2Normalize,
            "sum" => PrimitiveKind::Sum,
            "mean" => PrimitiveKind::Mean,
            "softmax-cross-entropy" => PrimitiveKind::SoftmaxCrossEntropy,
            other => return Err(Error::UnknownPrimitive(other.to_string())),
        })
    }
}

/// Untyped attribute bag used by [`forward_primitive`].
#[derive(Clone, Debug, Default)]
pub struct Attrs {
    pub stride: Option<usize>,
    pub eps: Option<f64>,
    pub factor: Option<f64>,
    pub shape: Option<Vec<usize>>,
    pub transpose_a: bool,
    pub transpose_b: bool,
    pub labels: Option<Vec<usize>>,
}

pub const BN_EPS: f64 = 1e-5;
pub const NORMALIZE_EPS: f64 = 1e-12;

/// A primitive with its attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Matmul,
    BatchMatmul {
        transpose_a: bool,
        transpose_b: bool,
    },
    Conv2d {
        stride: usize,
    },
    DepthwiseConv2d {
        stride: usize,
    },
    /// Elementwise, or a `[C]` vector broadcast over dim 1.
    Add,
    Sub,
    Mul,
    Relu,
    /// Inputs: x, gamma, beta.
    BatchNormTrain {
        eps: f64,
    },
    /// Inputs: x, gamma, beta, running mean, running var.
    BatchNormEval {
        eps: f64,
    },
    SoftmaxLastDim,
    GlobalAvgPool,
    Reshape {
        shape: Vec<usize>,
    },
    Scale {
        factor: f64,
    },
    ConcatChannels,
    SliceLeading {
        shape: Vec<usize>,
    },
    L2Normalize {
        eps: f64,
    },
    Sum,
    Mean,
    SoftmaxCrossEntropy {
        labels: Vec<usize>,
    },
}

impl Primitive {
    pub fn from_kind(kind: PrimitiveKind, attrs: &Attrs) -> Result<Self> {
        let stride = attrs.stride.unwrap_or(1);
        if !(1..=2).contains(&stride) {
            return Err(Error::shape(
                "attrs",
                format!("stride must be 1 or 2, got {stride}"),
            ));
        }
        let need_shape = || {
            attrs
                .shape
                .clone()
                .ok_or_else(|| Error::shape("attrs", "missing `shape` attribute"))
        };
        Ok(match kind {
            PrimitiveKind::Matmul => Primitive::Matmul,
            PrimitiveKind::BatchMatmul => Primitive::BatchMatmul {
                transpose_a: attrs.transpose_a,
                transpose_b: attrs.transpose_b,
            },
            PrimitiveKind::Conv2d => Primitive::Conv2d { stride },
            PrimitiveKind::DepthwiseConv2d => Primitive::DepthwiseConv2d { stride },
            PrimitiveKind::Add => Primitive::Add,
            PrimitiveKind::Sub => Primitive::Sub,
            PrimitiveKind::Mul => Primitive::Mul,
            PrimitiveKind::Relu => Primitive::Relu,
            PrimitiveKind::BatchNormTrain => Primitive::BatchNormTrain {
                eps: attrs.eps.unwrap_or(BN_EPS),
            },
            PrimitiveKind::BatchNormEval => Primitive::BatchNormEval {
                eps: attrs.eps.unwrap_or(BN_EPS),
            },
            PrimitiveKind::SoftmaxLastDim => Primitive::SoftmaxLastDim,
            PrimitiveKind::GlobalAvgPool => Primitive::GlobalAvgPool,
            PrimitiveKind::Reshape => Primitive::Reshape {
                shape: need_shape()?,
            },
            PrimitiveKind::Scale => Primitive::Scale {
                factor: attrs
                    .factor
                    .ok_or_else(|| Error::shape("attrs", "missing `factor` attribute"))?,
            },
            PrimitiveKind::ConcatChannels => Primitive::ConcatChannels,
            PrimitiveKind::SliceLeading => Primitive::SliceLeading {
                shape: need_shape()?,
            },
            PrimitiveKind::L2Normalize => Primitive::L2Normalize {
                eps: attrs.eps.unwrap_or(NORMALIZE_EPS),
            },
            PrimitiveKind::Sum => Primitive::Sum,
            PrimitiveKind::Mean => Primitive::Mean,
            PrimitiveKind::SoftmaxCrossEntropy => Primitive::SoftmaxCrossEntropy {
                labels: attrs
                    .labels
                    .clone()
                    .ok_or_else(|| Error::shape("attrs", "missing `labels` attribute"))?,
            },
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Matmul => "matmul",
            Primitive::BatchMatmul { .. } => "batch-matmul",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::DepthwiseConv2d { .. } => "depthwise-conv2d",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Relu => "relu",
            Primitive::BatchNormTrain { .. } => "batchnorm-train",
            Primitive::BatchNormEval { .. } => "batchnorm-eval",
            Primitive::SoftmaxLastDim => "softmax-lastdim",
            Primitive::GlobalAvgPool => "global-avg-pool",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Scale { .. } => "scale",
            Primitive::ConcatChannels => "concat-channels",
            Primitive::SliceLeading { .. } => "slice-leading",
            Primitive::L2Normalize { .. } => "l2-normalize",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::SoftmaxCrossEntropy { .. } => "softmax-cross-entropy",
        }
    }
}

/// Evaluates one primitive on concrete tensors, outside any graph.
pub fn forward_primitive(kind: &str, inputs: &[Tensor], attrs: &Attrs) -> Result<Tensor> {
    let prim = Primitive::from_kind(kind.parse()?, attrs)?;
    let refs: Vec<&Tensor> = inputs.iter().collect();
    Ok(compute(&prim, &refs)?.value)
}

#[derive(Debug)]
enum Saved {
    None,
    /// Normalized activations and inverse standard deviation per channel.
    Bn {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Row norms before clamping.
    Norms(Vec<f64>),
    /// Softmax probabilities for cross entropy.
    Probs(Vec<f64>),
}

struct Computed {
    value: Tensor,
    saved: Saved,
    stats: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param {
        store: StoreId,
        name: String,
    },
    Apply {
        prim: Primitive,
        inputs: Vec<Var>,
        saved: Saved,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so every
/// input precedes its consumer and a reverse sweep is a valid topological
/// traversal.
#[derive(Debug)]
pub struct Graph {
    mode: Mode,
    nodes: Vec<Node>,
    params: HashMap<(StoreId, String), Var>,
    bn_updates: Vec<BnUpdate>,
    consumed: bool,
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Graph {
            mode,
            nodes: Vec::new(),
            params: HashMap::new(),
            bn_updates: Vec::new(),
            consumed: false,
        }
    }

    pub fn recording() -> Self {
        Self::new(Mode::Recording)
    }

    pub fn frozen() -> Self {
        Self::new(Mode::Frozen)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Number of recorded primitive applications.
    pub fn recorded_len(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Apply { .. }))
            .count()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf: receives no gradient that is ever applied anywhere.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a parameter; repeated binds of the same parameter share one node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        let key = (store.id(), name.to_string());
        if let Some(&v) = self.params.get(&key) {
            return Ok(v);
        }
        let value = store.param(name)?.clone();
        let value = Tensor::new(value.shape().to_vec(), value.into_data())?;
        let v = self.push(
            value,
            Op::Param {
                store: store.id(),
                name: name.to_string(),
            },
        );
        self.params.insert(key, v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Copies a value into a fresh leaf, cutting every gradient path through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.input(value)
    }

    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let computed = {
            let refs: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            compute(&prim, &refs)?
        };
        let op = if self.mode.records() {
            Op::Apply {
                prim,
                inputs: inputs.to_vec(),
                saved: computed.saved,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(computed.value, op))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Matmul, &[a, b])
    }

    pub fn bmm(&mut self, a: Var, b: Var, transpose_a: bool, transpose_b: bool) -> Result<Var> {
        self.apply(
            Primitive::BatchMatmul {
                transpose_a,
                transpose_b,
            },
            &[a, b],
        )
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        self.apply(Primitive::Conv2d { stride }, &[x, w])
    }

    pub fn depthwise(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        self.apply(Primitive::DepthwiseConv2d { stride }, &[x, w])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::SoftmaxLastDim, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::GlobalAvgPool, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::Reshape { shape }, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.apply(Primitive::Scale { factor }, &[x])
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::ConcatChannels, parts)
    }

    pub fn slice_leading(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::SliceLeading { shape }, &[x])
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::L2Normalize { eps: NORMALIZE_EPS }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[x])
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::SoftmaxCrossEntropy { labels }, &[logits])
    }

    /// Pads dim 1 with zeros up to `channels`; identity when already that wide.
    pub fn pad_channels(&mut self, x: Var, channels: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape[1] == channels {
            return Ok(x);
        }
        if shape[1] > channels {
            return Err(Error::shape(
                "pad-channels",
                format!("{} channels exceed target {channels}", shape[1]),
            ));
        }
        let mut zshape = shape;
        zshape[1] = channels - zshape[1];
        let zeros = self.input(Tensor::zeros(&zshape));
        self.concat_channels(&[x, zeros])
    }

    /// Batch normalization in train mode; returns the output and the batch
    /// statistics (mean, unbiased variance) used for running averages.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let prim = Primitive::BatchNormTrain { eps: BN_EPS };
        let inputs = [x, gamma, beta];
        let computed = {
            let refs: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            compute(&prim, &refs)?
        };
        let (mean, var) = computed.stats.expect("batchnorm-train yields statistics");
        let op = if self.mode.records() {
            Op::Apply {
                prim,
                inputs: inputs.to_vec(),
                saved: computed.saved,
            }
        } else {
            Op::Leaf
        };
        Ok((self.push(computed.value, op), mean, var))
    }

    pub fn push_bn_update(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Reverse sweep from a scalar loss. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !self.mode.records() {
            return Err(Error::NotRecording);
        }
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        self.consumed = true;
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        let mut by_param = HashMap::new();
        let mut bound = HashSet::new();
        let mut leaves = HashMap::new();
        for i in (0..nodes.len()).rev() {
            let node = &nodes[i];
            match &node.op {
                Op::Param { store, name } => {
                    bound.insert(*store);
                    if let Some(g) = grads[i].take() {
                        by_param.insert((*store, name.clone()), g);
                    }
                }
                Op::Leaf => {
                    if let Some(g) = grads[i].take() {
                        leaves.insert(i, g);
                    }
                }
                Op::Apply {
                    prim,
                    inputs,
                    saved,
                } => {
                    let Some(gout) = grads[i].take() else {
                        continue;
                    };
                    let refs: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                    let gin = backward_prim(prim, &refs, &node.value, saved, &gout)?;
                    for (v, g) in inputs.iter().zip(gin) {
                        let Some(g) = g else { continue };
                        match &mut grads[v.0] {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
        }
        self.params.clear();
        Ok(Gradients {
            by_param,
            bound,
            leaves,
        })
    }
}

/// Result of a backward sweep.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: HashMap<(StoreId, String), Vec<f64>>,
    bound: HashSet<StoreId>,
    leaves: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, store: &ParameterStore, name: &str) -> Option<&[f64]> {
        self.by_param
            .get(&(store.id(), name.to_string()))
            .map(Vec::as_slice)
    }

    /// Gradient reaching a constant leaf (e.g. an input image).
    pub fn wrt_input(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }

    /// True when any parameter of `store` lies on a path to the loss.
    pub fn reaches(&self, store: StoreId) -> bool {
        self.by_param.keys().any(|(s, _)| *s == store)
    }

    /// Writes gradients into every parameter of a store bound on the tape;
    /// parameters with no path to the loss receive zeros. Returns whether the
    /// store was bound at all.
    pub fn apply_to(&self, store: &mut ParameterStore) -> Result<bool> {
        let id = store.id();
        if !self.bound.contains(&id) {
            return Ok(false);
        }
        for (name, t) in store.params_mut() {
            let g = match self.by_param.get(&(id, name.clone())) {
                Some(g) => g.clone(),
                None => vec![0.0; t.numel()],
            };
            match t.grad() {
                Some(prev) => {
                    let sum: Vec<f64> = prev.iter().zip(&g).map(|(a, b)| a + b).collect();
                    t.set_grad(sum)?;
                }
                None => t.set_grad(g)?,
            }
        }
        Ok(true)
    }
}

fn dims4(t: &Tensor, op: &'static str) -> Result<[usize; 4]> {
    match t.shape() {
        &[n, c, h, w] => Ok([n, c, h, w]),
        s => Err(Error::shape(
            op,
            format!("expected a 4-D tensor, got {s:?}"),
        )),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn arity(inputs: &[&Tensor], n: usize, op: &'static str) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::shape(
            op,
            format!("expected {n} inputs, got {}", inputs.len()),
        ));
    }
    Ok(())
}

fn plain(value: Tensor) -> Computed {
    Computed {
        value,
        saved: Saved::None,
        stats: None,
    }
}

/// Channel-wise layout shared by batchnorm and bias add: (outer, channels, inner).
fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let outer = shape[0];
    let channels = shape[1];
    let inner = shape[2..].iter().product::<usize>();
    (outer, channels, inner)
}

/// Dimensions (batch, m, k, n) of a batched product, with operands possibly transposed.
fn bmm_dims(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<(usize, usize, usize, usize)> {
    let (ab, a0, a1) = match a.shape() {
        &[r, c] => (1, r, c),
        &[bt, r, c] => (bt, r, c),
        s => {
            return Err(Error::shape(
                "matmul",
                format!("left operand must be 2-D or 3-D, got {s:?}"),
            ))
        }
    };
    let (bb, b0, b1) = match b.shape() {
        &[r, c] => (1, r, c),
        &[bt, r, c] => (bt, r, c),
        s => {
            return Err(Error::shape(
                "matmul",
                format!("right operand must be 2-D or 3-D, got {s:?}"),
            ))
        }
    };
    if ab != bb {
        return Err(Error::shape("matmul", format!("batch {ab} vs {bb}")));
    }
    let (m, k) = if ta { (a1, a0) } else { (a0, a1) };
    let (k2, n) = if tb { (b1, b0) } else { (b0, b1) };
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!(
                "inner dimensions differ: {:?} x {:?} (k={k} vs {k2})",
                a.shape(),
                b.shape()
            ),
        ));
    }
    Ok((ab, m, k, n))
}

fn compute(prim: &Primitive, inputs: &[&Tensor]) -> Result<Computed> {
    match prim {
        Primitive::Matmul | Primitive::BatchMatmul { .. } => {
            arity(inputs, 2, "matmul")?;
            let (ta, tb) = match prim {
                Primitive::BatchMatmul {
                    transpose_a,
                    transpose_b,
                } => (*transpose_a, *transpose_b),
                _ => (false, false),
            };
            let (a, b) = (inputs[0], inputs[1]);
            if matches!(prim, Primitive::Matmul) && (a.shape().len() != 2 || b.shape().len() != 2) {
                return Err(Error::shape(
                    "matmul",
                    format!(
                        "operands must be 2-D, got {:?} and {:?}",
                        a.shape(),
                        b.shape()
                    ),
                ));
            }
            let (batch, m, k, n) = bmm_dims(a, b, ta, tb)?;
            let mut out = vec![0.0; batch * m * n];
            for i in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..(i + 1) * m * k],
                    ta,
                    &b.data()[i * k * n..(i + 1) * k * n],
                    tb,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
            let shape = if a.shape().len() == 3 {
                vec![batch, m, n]
            } else {
                vec![m, n]
            };
            Ok(plain(Tensor::new(shape, out)?))
        }
        Primitive::Conv2d { stride } | Primitive::DepthwiseConv2d { stride } => {
            let depthwise = matches!(prim, Primitive::DepthwiseConv2d { .. });
            let op = if depthwise {
                "depthwise-conv2d"
            } else {
                "conv2d"
            };
            arity(inputs, 2, op)?;
            let [n, c, h, w] = dims4(inputs[0], op)?;
            let [co, ci, kh, kw] = dims4(inputs[1], op)?;
            if kh != kw || kh % 2 == 0 {
                return Err(Error::shape(
                    op,
                    format!("kernel must be square and odd, got {kh}x{kw}"),
                ));
            }
            if !(1..=2).contains(stride) {
                return Err(Error::shape(
                    op,
                    format!("stride must be 1 or 2, got {stride}"),
                ));
            }
            let geom = ConvGeom::new(c, h, w, kh, *stride);
            let out = if depthwise {
                if co != c || ci != 1 {
                    return Err(Error::shape(
                        op,
                        format!("weight [{co}, {ci}, ..] does not match {c} input channels (expected [{c}, 1, k, k])"),
                    ));
                }
                kernels::depthwise(inputs[0].data(), n, &geom, inputs[1].data())
            } else {
                if ci != c {
                    return Err(Error::shape(
                        op,
                        format!("weight expects {ci} input channels, input has {c}"),
                    ));
                }
                kernels::conv2d(inputs[0].data(), n, &geom, inputs[1].data(), co)
            };
            Ok(plain(Tensor::new(
                vec![n, co, geom.out_h, geom.out_w],
                out,
            )?))
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            arity(inputs, 2, prim.name())?;
            let (a, b) = (inputs[0], inputs[1]);
            if matches!(prim, Primitive::Add)
                && b.shape().len() == 1
                && a.shape().len() >= 2
                && a.shape() != b.shape()
            {
                let (outer, ch, inner) = channel_layout(a.shape());
                if b.numel() != ch {
                    return Err(Error::shape(
                        "add",
                        format!(
                            "bias of {} does not match {ch} channels of {:?}",
                            b.numel(),
                            a.shape()
                        ),
                    ));
                }
                let mut out = a.data().to_vec();
                for o in 0..outer {
                    for c in 0..ch {
                        let bv = b.data()[c];
                        out[(o * ch + c) * inner..(o * ch + c + 1) * inner]
                            .iter_mut()
                            .for_each(|v| *v += bv);
                    }
                }
                return Ok(plain(Tensor::new(a.shape().to_vec(), out)?));
            }
            same_shape(a, b, prim.name())?;
            let f: fn(f64, f64) -> f64 = match prim {
                Primitive::Add => |x, y| x + y,
                Primitive::Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let out = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Ok(plain(Tensor::new(a.shape().to_vec(), out)?))
        }
        Primitive::Relu => {
            arity(inputs, 1, "relu")?;
            let out = inputs[0].data().iter().map(|&v| v.max(0.0)).collect();
            Ok(plain(Tensor::new(inputs[0].shape().to_vec(), out)?))
        }
        Primitive::BatchNormTrain { eps } => {
            arity(inputs, 3, "batchnorm-train")?;
            let x = inputs[0];
            if x.shape().len() < 2 {
                return Err(Error::shape(
                    "batchnorm-train",
                    format!("need rank >= 2, got {:?}", x.shape()),
                ));
            }
            let (outer, ch, inner) = channel_layout(x.shape());
            check_channel_vec(inputs[1], ch, "batchnorm-train")?;
            check_channel_vec(inputs[2], ch, "batchnorm-train")?;
            let count = (outer * inner) as f64;
            let mut mean = vec![0.0; ch];
            let mut var = vec![0.0; ch];
            for o in 0..outer {
                for (c, m) in mean.iter_mut().enumerate() {
                    let s = &x.data()[(o * ch + c) * inner..(o * ch + c + 1) * inner];
                    *m += s.iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for o in 0..outer {
                for c in 0..ch {
                    let s = &x.data()[(o * ch + c) * inner..(o * ch + c + 1) * inner];
                    var[c] += s.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                }
            }
            let biased: Vec<f64> = var.iter().map(|v| v / count).collect();
            let unbiased: Vec<f64> = if count > 1.0 {
                var.iter().map(|v| v / (count - 1.0)).collect()
            } else {
                biased.clone()
            };
            let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let (gamma, beta) = (inputs[1].data(), inputs[2].data());
            let mut xhat = vec![0.0; x.numel()];
            let mut out = vec![0.0; x.numel()];
            for o in 0..outer {
                for c in 0..ch {
                    let range = (o * ch + c) * inner..(o * ch + c + 1) * inner;
                    for i in range {
                        let h = (x.data()[i] - mean[c]) * inv_std[c];
                        xhat[i] = h;
                        out[i] = gamma[c] * h + beta[c];
                    }
                }
            }
            Ok(Computed {
                value: Tensor::new(x.shape().to_vec(), out)?,
                saved: Saved::Bn { xhat, inv_std },
                stats: Some((mean, unbiased)),
            })
        }
        Primitive::BatchNormEval { eps } => {
            arity(inputs, 5, "batchnorm-eval")?;
            let x = inputs[0];
            if x.shape().len() < 2 {
                return Err(Error::shape(
                    "batchnorm-eval",
                    format!("need rank >= 2, got {:?}", x.shape()),
                ));
            }
            let (outer, ch, inner) = channel_layout(x.shape());
            for t in &inputs[1..] {
                check_channel_vec(t, ch, "batchnorm-eval")?;
            }
            let (gamma, beta, rm, rv) = (
                inputs[1].data(),
                inputs[2].data(),
                inputs[3].data(),
                inputs[4].data(),
            );
            let mut out = vec![0.0; x.numel()];
            for o in 0..outer {
                for c in 0..ch {
                    let inv = 1.0 / (rv[c] + eps).sqrt();
                    let range = (o * ch + c) * inner..(o * ch + c + 1) * inner;
                    for i in range {
                        out[i] = gamma[c] * (x.data()[i] - rm[c]) * inv + beta[c];
                    }
                }
            }
            Ok(plain(Tensor::new(x.shape().to_vec(), out)?))
        }
        Primitive::SoftmaxLastDim => {
            arity(inputs, 1, "softmax-lastdim")?;
            let x = inputs[0];
            let last = *x.shape().last().expect("non-empty shape");
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(last) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
            Ok(plain(Tensor::new(x.shape().to_vec(), out)?))
        }
        Primitive::GlobalAvgPool => {
            arity(inputs, 1, "global-avg-pool")?;
            let [n, c, h, w] = dims4(inputs[0], "global-avg-pool")?;
            let plane = h * w;
            let out = inputs[0]
                .data()
                .chunks(plane)
                .map(|s| s.iter().sum::<f64>() / plane as f64)
                .collect();
            Ok(plain(Tensor::new(vec![n, c, 1, 1], out)?))
        }
        Primitive::Reshape { shape } => {
            arity(inputs, 1, "reshape")?;
            Ok(plain(inputs[0].clone().reshape(shape.clone())?))
        }
        Primitive::Scale { factor } => {
            arity(inputs, 1, "scale")?;
            let out = inputs[0].data().iter().map(|v| v * factor).collect();
            Ok(plain(Tensor::new(inputs[0].shape().to_vec(), out)?))
        }
        Primitive::ConcatChannels => {
            if inputs.is_empty() {
                return Err(Error::shape("concat-channels", "no inputs"));
            }
            let first = inputs[0].shape();
            if first.len() < 2 {
                return Err(Error::shape(
                    "concat-channels",
                    format!("need rank >= 2, got {first:?}"),
                ));
            }
            let mut total = 0;
            for t in inputs {
                let s = t.shape();
                if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                    return Err(Error::shape(
                        "concat-channels",
                        format!("{s:?} incompatible with {first:?}"),
                    ));
                }
                total += s[1];
            }
            let inner: usize = first[2..].iter().product();
            let mut out = Vec::with_capacity(first[0] * total * inner);
            for n in 0..first[0] {
                for t in inputs {
                    let c = t.shape()[1];
                    out.extend_from_slice(&t.data()[n * c * inner..(n + 1) * c * inner]);
                }
            }
            let mut shape = first.to_vec();
            shape[1] = total;
            Ok(plain(Tensor::new(shape, out)?))
        }
        Primitive::SliceLeading { shape } => {
            arity(inputs, 1, "slice-leading")?;
            let src = inputs[0].shape();
            if shape.len() != src.len() || shape.iter().zip(src).any(|(a, b)| a > b || *a == 0) {
                return Err(Error::shape(
                    "slice-leading",
                    format!("cannot take {shape:?} from {src:?}"),
                ));
            }
            let idx = slice_indices(src, shape);
            let out = idx.iter().map(|&i| inputs[0].data()[i]).collect();
            Ok(plain(Tensor::new(shape.clone(), out)?))
        }
        Primitive::L2Normalize { eps } => {
            arity(inputs, 1, "l2-normalize")?;
            let x = inputs[0];
            if x.shape().len() != 2 {
                return Err(Error::shape(
                    "l2-normalize",
                    format!("expected [batch, dim], got {:?}", x.shape()),
                ));
            }
            let dim = x.shape()[1];
            let mut norms = Vec::with_capacity(x.shape()[0]);
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(dim) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                norms.push(n);
                let d = n.max(*eps);
                row.iter_mut().for_each(|v| *v /= d);
            }
            Ok(Computed {
                value: Tensor::new(x.shape().to_vec(), out)?,
                saved: Saved::Norms(norms),
                stats: None,
            })
        }
        Primitive::Sum | Primitive::Mean => {
            arity(inputs, 1, prim.name())?;
            let s: f64 = inputs[0].data().iter().sum();
            let v = if matches!(prim, Primitive::Mean) {
                s / inputs[0].numel() as f64
            } else {
                s
            };
            Ok(plain(Tensor::scalar(v)))
        }
        Primitive::SoftmaxCrossEntropy { labels } => {
            arity(inputs, 1, "softmax-cross-entropy")?;
            let x = inputs[0];
            let &[n, k] = x.shape() else {
                return Err(Error::shape(
                    "softmax-cross-entropy",
                    format!("expected [batch, classes], got {:?}", x.shape()),
                ));
            };
            if labels.len() != n || labels.iter().any(|&l| l >= k) {
                return Err(Error::shape(
                    "softmax-cross-entropy",
                    format!("{} labels for batch {n} with {k} classes", labels.len()),
                ));
            }
            let mut probs = x.data().to_vec();
            let mut loss = 0.0;
            for (row, &label) in probs.chunks_mut(k).zip(labels) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - row[label];
                row.iter_mut().for_each(|v| *v = (*v - lse).exp());
            }
            Ok(Computed {
                value: Tensor::scalar(loss / n as f64),
                saved: Saved::Probs(probs),
                stats: None,
            })
        }
    }
}

fn check_channel_vec(t: &Tensor, ch: usize, op: &'static str) -> Result<()> {
    if t.numel() != ch {
        return Err(Error::shape(
            op,
            format!("per-channel tensor of {} for {ch} channels", t.numel()),
        ));
    }
    Ok(())
}

/// Flat source indices of the leading sub-block `shape` within `src`.
fn slice_indices(src: &[usize], shape: &[usize]) -> Vec<usize> {
    let rank = src.len();
    let mut strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * src[d + 1];
    }
    let total: usize = shape.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0; rank];
    for _ in 0..total {
        out.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn backward_prim(
    prim: &Primitive,
    inputs: &[&Tensor],
    out: &Tensor,
    saved: &Saved,
    gout: &[f64],
) -> Result<Vec<Option<Vec<f64>>>> {
    Ok(match prim {
        Primitive::Matmul | Primitive::BatchMatmul { .. } => {
            let (ta, tb) = match prim {
                Primitive::BatchMatmul {
                    transpose_a,
                    transpose_b,
                } => (*transpose_a, *transpose_b),
                _ => (false, false),
            };
            let (a, b) = (inputs[0], inputs[1]);
            let (batch, m, k, n) = bmm_dims(a, b, ta, tb)?;
            let mut da = vec![0.0; a.numel()];
            let mut db = vec![0.0; b.numel()];
            for i in 0..batch {
                let ai = &a.data()[i * m * k..(i + 1) * m * k];
                let bi = &b.data()[i * k * n..(i + 1) * k * n];
                let gi = &gout[i * m * n..(i + 1) * m * n];
                let dai = &mut da[i * m * k..(i + 1) * m * k];
                if ta {
                    kernels::gemm(k, n, m, bi, tb, gi, true, 0.0, dai);
                } else {
                    kernels::gemm(m, n, k, gi, false, bi, !tb, 0.0, dai);
                }
                let dbi = &mut db[i * k * n..(i + 1) * k * n];
                if tb {
                    kernels::gemm(n, m, k, gi, true, ai, ta, 0.0, dbi);
                } else {
                    kernels::gemm(k, m, n, ai, !ta, gi, false, 0.0, dbi);
                }
            }
            vec![Some(da), Some(db)]
        }
        Primitive::Conv2d { stride } | Primitive::DepthwiseConv2d { stride } => {
            let [n, c, h, w] = dims4(inputs[0], "conv")?;
            let [co, _, k, _] = dims4(inputs[1], "conv")?;
            let geom = ConvGeom::new(c, h, w, k, *stride);
            let (dx, dw) = if matches!(prim, Primitive::DepthwiseConv2d { .. }) {
                kernels::depthwise_backward(inputs[0].data(), n, &geom, inputs[1].data(), gout)
            } else {
                kernels::conv2d_backward(inputs[0].data(), n, &geom, inputs[1].data(), co, gout)
            };
            vec![Some(dx), Some(dw)]
        }
        Primitive::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                let (outer, ch, inner) = channel_layout(a.shape());
                let mut db = vec![0.0; ch];
                for o in 0..outer {
                    for (c, d) in db.iter_mut().enumerate() {
                        *d += gout[(o * ch + c) * inner..(o * ch + c + 1) * inner]
                            .iter()
                            .sum::<f64>();
                    }
                }
                vec![Some(gout.to_vec()), Some(db)]
            } else {
                vec![Some(gout.to_vec()), Some(gout.to_vec())]
            }
        }
        Primitive::Sub => vec![Some(gout.to_vec()), Some(gout.iter().map(|g| -g).collect())],
        Primitive::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let da = gout.iter().zip(b.data()).map(|(g, y)| g * y).collect();
            let db = gout.iter().zip(a.data()).map(|(g, x)| g * x).collect();
            vec![Some(da), Some(db)]
        }
        Primitive::Relu => {
            let dx = gout
                .iter()
                .zip(inputs[0].data())
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect();
            vec![Some(dx)]
        }
        Primitive::BatchNormTrain { .. } => {
            let Saved::Bn { xhat, inv_std } = saved else {
                unreachable!("batchnorm-train saves normalized activations")
            };
            let (outer, ch, inner) = channel_layout(inputs[0].shape());
            let count = (outer * inner) as f64;
            let gamma = inputs[1].data();
            let mut dgamma = vec![0.0; ch];
            let mut dbeta = vec![0.0; ch];
            for o in 0..outer {
                for c in 0..ch {
                    for i in (o * ch + c) * inner..(o * ch + c + 1) * inner {
                        dbeta[c] += gout[i];
                        dgamma[c] += gout[i] * xhat[i];
                    }
                }
            }
            let mut dx = vec![0.0; gout.len()];
            for o in 0..outer {
                for c in 0..ch {
                    let k = gamma[c] * inv_std[c] / count;
                    for i in (o * ch + c) * inner..(o * ch + c + 1) * inner {
                        dx[i] = k * (count * gout[i] - dbeta[c] - xhat[i] * dgamma[c]);
                    }
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        }
        Primitive::BatchNormEval { eps } => {
            let (outer, ch, inner) = channel_layout(inputs[0].shape());
            let (x, gamma, rm, rv) = (
                inputs[0].data(),
                inputs[1].data(),
                inputs[3].data(),
                inputs[4].data(),
            );
            let mut dx = vec![0.0; gout.len()];
            let mut dgamma = vec![0.0; ch];
            let mut dbeta = vec![0.0; ch];
            for o in 0..outer {
                for c in 0..ch {
                    let inv = 1.0 / (rv[c] + eps).sqrt();
                    for i in (o * ch + c) * inner..(o * ch + c + 1) * inner {
                        dx[i] = gout[i] * gamma[c] * inv;
                        dgamma[c] += gout[i] * (x[i] - rm[c]) * inv;
                        dbeta[c] += gout[i];
                    }
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta), None, None]
        }
        Primitive::SoftmaxLastDim => {
            let last = *out.shape().last().expect("non-empty shape");
            let mut dx = vec![0.0; gout.len()];
            for ((y, g), d) in out
                .data()
                .chunks(last)
                .zip(gout.chunks(last))
                .zip(dx.chunks_mut(last))
            {
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                for i in 0..last {
                    d[i] = y[i] * (g[i] - dot);
                }
            }
            vec![Some(dx)]
        }
        Primitive::GlobalAvgPool => {
            let [_, _, h, w] = dims4(inputs[0], "global-avg-pool")?;
            let plane = h * w;
            let mut dx = vec![0.0; inputs[0].numel()];
            for (d, g) in dx.chunks_mut(plane).zip(gout) {
                d.iter_mut().for_each(|v| *v = g / plane as f64);
            }
            vec![Some(dx)]
        }
        Primitive::Reshape { .. } => vec![Some(gout.to_vec())],
        Primitive::Scale { factor } => vec![Some(gout.iter().map(|g| g * factor).collect())],
        Primitive::ConcatChannels => {
            let shape = out.shape();
            let inner: usize = shape[2..].iter().product();
            let mut grads: Vec<Vec<f64>> = inputs
                .iter()
                .map(|t| Vec::with_capacity(t.numel()))
                .collect();
            let mut offset = 0;
            for _ in 0..shape[0] {
                for (t, g) in inputs.iter().zip(grads.iter_mut()) {
                    let len = t.shape()[1] * inner;
                    g.extend_from_slice(&gout[offset..offset + len]);
                    offset += len;
                }
            }
            grads.into_iter().map(Some).collect()
        }
        Primitive::SliceLeading { shape } => {
            let idx = slice_indices(inputs[0].shape(), shape);
            let mut dx = vec![0.0; inputs[0].numel()];
            for (&i, g) in idx.iter().zip(gout) {
                dx[i] += g;
            }
            vec![Some(dx)]
        }
        Primitive::L2Normalize { eps } => {
            let Saved::Norms(norms) = saved else {
                unreachable!("l2-normalize saves row norms")
            };
            let dim = out.shape()[1];
            let mut dx = vec![0.0; gout.len()];
            for (((y, g), d), &n) in out
                .data()
                .chunks(dim)
                .zip(gout.chunks(dim))
                .zip(dx.chunks_mut(dim))
                .zip(norms)
            {
                if n > *eps {
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for i in 0..dim {
                        d[i] = (g[i] - y[i] * dot) / n;
                    }
                } else {
                    for i in 0..dim {
                        d[i] = g[i] / eps;
                    }
                }
            }
            vec![Some(dx)]
        }
        Primitive::Sum => vec![Some(vec![gout[0]; inputs[0].numel()])],
        Primitive::Mean => {
            let n = inputs[0].numel() as f64;
            vec![Some(vec![gout[0] / n; inputs[0].numel()])]
        }
        Primitive::SoftmaxCrossEntropy { labels } => {
            let Saved::Probs(probs) = saved else {
                unreachable!("cross entropy saves probabilities")
            };
            let k = inputs[0].shape()[1];
            let n = labels.len() as f64;
            let mut dx = probs.clone();
            for (row, &label) in dx.chunks_mut(k).zip(labels) {
                row[label] -= 1.0;
                row.iter_mut().for_each(|v| *v *= gout[0] / n);
            }
            vec![Some(dx)]
        }
    })
}
