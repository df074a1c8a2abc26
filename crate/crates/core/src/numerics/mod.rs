//! Dense tensors, a reverse-mode tape with the layer set the Transporter
//! networks need, the Adam optimizer and a finite-difference checker.

mod backward;
mod cbam;
mod conv;
pub(crate) mod graph;
mod ops;
mod spatial;

pub mod adam;
pub mod gradcheck;
pub mod params;
pub mod t32;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use cbam::{CbamOutput, CbamVars, CBAM_KERNEL};
pub use conv::{BN_EPS, BN_MOMENTUM};
pub use graph::{Graph, Var};
pub use params::{Binder, ParamStore};
pub use spatial::grid_coord;
pub use tensor::{Scalar, Tensor};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    Batchnorm2d,
    Relu,
    SpatialSoftmax,
    BilinearUpsample,
    Cbam,
}

/// Static description of one layer; used both to drive `conv2d` and to
/// fingerprint network architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d,
            kernel: (kernel, kernel),
            stride,
            padding,
            in_channels,
            out_channels,
        }
    }

    pub fn simple(kind: LayerKind, channels: usize) -> Self {
        LayerSpec {
            kind,
            kernel: (1, 1),
            stride: 1,
            padding: 0,
            in_channels: channels,
            out_channels: channels,
        }
    }

    /// Output extent along one axis: `floor((n + 2p - k) / s) + 1`.
    pub fn out_extent(&self, n: usize, k: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be positive".into()));
        }
        let padded = n + 2 * self.padding;
        if padded < k {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {k} larger than padded input {padded}"),
            ));
        }
        Ok((padded - k) / self.stride + 1)
    }

    pub(crate) fn conv_geom(&self, h: usize, w: usize) -> Result<ConvGeom> {
        Ok(ConvGeom {
            in_c: self.in_channels,
            out_c: self.out_channels,
            kh: self.kernel.0,
            kw: self.kernel.1,
            stride: self.stride,
            pad: self.padding,
            h,
            w,
            oh: self.out_extent(h, self.kernel.0)?,
            ow: self.out_extent(w, self.kernel.1)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}
