use super::tensor::{Scalar, Tensor};
use super::ConvGeom;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    SpatialSoftmax(Var),
    ExpectedCoords(Var),
    GaussianRender {
        coords: Var,
        sigma: Var,
    },
    Upsample {
        x: Var,
    },
    Transport {
        psi_s: Var,
        psi_t: Var,
        phi_s: Var,
        phi_t: Var,
        weights: Option<Var>,
        history: Vec<Vec<T>>,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    GlobalAvgPool(Var),
    GlobalMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    ChannelMean(Var),
    ChannelMax {
        x: Var,
        argmax: Vec<usize>,
    },
    ConcatChannels(Vec<Var>),
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Dynamic reverse-mode tape for one forward/backward pass.
///
/// Nodes are appended in creation order, which is a valid topological order,
/// so backward is a single reverse sweep.
pub struct Graph<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
    kinks: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            kinks: FNV_OFFSET,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    /// Fingerprint of every non-smooth branch taken during the forward pass
    /// (ReLU signs, max-pool winners). Two evaluations with equal fingerprints
    /// lie on the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    pub(crate) fn mix_kinks(&mut self, bits: impl IntoIterator<Item = u64>) {
        for b in bits {
            self.kinks ^= b;
            self.kinks = self.kinks.wrapping_mul(FNV_PRIME);
        }
    }

    pub(crate) fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBcast(a, b)
            | Op::MulBcast(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::SpatialSoftmax(a)
            | Op::ExpectedCoords(a)
            | Op::GlobalAvgPool(a)
            | Op::ChannelMean(a) => vec![*a],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } | Op::BatchNormEval { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::GaussianRender { coords, sigma } => vec![*coords, *sigma],
            Op::Upsample { x, .. } => vec![*x],
            Op::Transport {
                psi_s,
                psi_t,
                phi_s,
                phi_t,
                weights,
                ..
            } => {
                let mut v = vec![*psi_s, *psi_t, *phi_s, *phi_t];
                v.extend(weights);
                v
            }
            Op::Mse { pred, target } => vec![*pred, *target],
            Op::GlobalMaxPool { x, .. } | Op::ChannelMax { x, .. } => vec![*x],
            Op::ConcatChannels(vs) => vs.clone(),
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got {:?}", node.value.shape()),
            ));
        }
        if !node.requires_grad {
            return Err(Error::InvalidArgument(
                "backward: loss does not depend on any trainable input".into(),
            ));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(Tensor::full(node.value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            let mut acc = Accum {
                nodes: &self.nodes,
                grads: &mut self.grads,
            };
            super::backward::dispatch(&mut acc, i, gout.data())?;
            self.grads[i] = Some(gout);
        }
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::NonFinite {
                        op: op_label(&self.nodes[i].op),
                    });
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn op_label<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddBcast(..) => "add_broadcast",
        Op::MulBcast(..) => "mul_broadcast",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Softplus(..) => "softplus",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::Reshape(..) => "reshape",
        Op::Conv2d { .. } => "conv2d",
        Op::BatchNorm { .. } => "batchnorm2d",
        Op::BatchNormEval { .. } => "batchnorm2d_eval",
        Op::SpatialSoftmax(..) => "spatial_softmax",
        Op::ExpectedCoords(..) => "expected_coords",
        Op::GaussianRender { .. } => "gaussian_render",
        Op::Upsample { .. } => "bilinear_upsample",
        Op::Transport { .. } => "transport",
        Op::Mse { .. } => "mse_loss",
        Op::GlobalAvgPool(..) => "global_avg_pool",
        Op::GlobalMaxPool { .. } => "global_max_pool",
        Op::ChannelMean(..) => "channel_mean",
        Op::ChannelMax { .. } => "channel_max",
        Op::ConcatChannels(..) => "concat_channels",
    }
}

/// Read access to node values plus write access to gradient buffers during
/// the reverse sweep.
pub(crate) struct Accum<'g, T: Scalar> {
    pub(crate) nodes: &'g [Node<T>],
    grads: &'g mut [Option<Tensor<T>>],
}

impl<T: Scalar> Accum<'_, T> {
    pub(crate) fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient buffer for `v`, allocated on first use; `None` when `v` is
    /// not differentiable.
    pub(crate) fn buf(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        Some(
            self.grads[v.0]
                .get_or_insert_with(|| Tensor::zeros(shape))
                .data_mut(),
        )
    }

    pub(crate) fn add(&mut self, v: Var, contribution: &[T]) {
        if let Some(buf) = self.buf(v) {
            for (g, c) in buf.iter_mut().zip(contribution) {
                *g = *g + *c;
            }
        }
    }
}
