use super::graph::{Accum, Op};
use super::tensor::Scalar;
use crate::error::Result;

pub(crate) fn dispatch<T: Scalar>(acc: &mut Accum<'_, T>, node: usize, g: &[T]) -> Result<()> {
    match &acc.nodes[node].op {
        Op::Leaf => Ok(()),
        Op::Add(..)
        | Op::Sub(..)
        | Op::Mul(..)
        | Op::AddBcast(..)
        | Op::MulBcast(..)
        | Op::Scale(..)
        | Op::AddScalar(..)
        | Op::Relu(..)
        | Op::Sigmoid(..)
        | Op::Softplus(..)
        | Op::Sum(..)
        | Op::Mean(..)
        | Op::Reshape(..) => super::ops::backward_elementwise(acc, node, g),
        Op::Conv2d { .. } => super::conv::backward_conv(acc, node, g),
        Op::BatchNorm { .. } | Op::BatchNormEval { .. } => super::conv::backward_batchnorm(acc, node, g),
        Op::Transport { .. } => crate::transporter::transport::backward_transport(acc, node, g),
        Op::SpatialSoftmax(..)
        | Op::ExpectedCoords(..)
        | Op::GaussianRender { .. }
        | Op::Upsample { .. }
        | Op::Mse { .. }
        | Op::GlobalAvgPool(..)
        | Op::GlobalMaxPool { .. }
        | Op::ChannelMean(..)
        | Op::ChannelMax { .. }
        | Op::ConcatChannels(..) => super::spatial::backward_spatial(acc, node, g),
    }
}
