//! Small parameterized layers shared by the blocks and the network: plain
//! convolutions, depthwise separable convolutions, and norms. Each layer
//! struct owns its parameter paths; `init` writes freshly initialized
//! entries into a [`ParamStore`] and `forward` replays the layer inside a
//! graph through a [`Binding`].

use crate::autodiff::{Graph, VarId};
use crate::error::ShapeError;
use crate::params::{Binding, Init, ParamStore};

pub const GROUP_NORM_EPS: f64 = 1e-5;
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Depthwise 3x3 + pointwise 1x1 separable convolution (with pointwise bias)
/// applied to VarIds directly. Spatial dims are preserved.
pub fn dwconv_var(
    g: &mut Graph,
    x: VarId,
    depthwise: VarId,
    pointwise: VarId,
    bias: VarId,
) -> Result<VarId, ShapeError> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 4 {
        return Err(ShapeError(format!("dwconv input must be rank 4, got {xs:?}")));
    }
    let c_in = xs[1];
    if g.shape(depthwise) != [c_in, 3, 3] {
        return Err(ShapeError(format!(
            "depthwise kernel must be ({c_in},3,3), got {:?}",
            g.shape(depthwise)
        )));
    }
    let pw = g.shape(pointwise).to_vec();
    if pw.len() != 4 || pw[1] != c_in || pw[2] != 1 || pw[3] != 1 {
        return Err(ShapeError(format!(
            "pointwise kernel must be (c_out,{c_in},1,1), got {pw:?}"
        )));
    }
    if g.shape(bias) != [pw[0]] {
        return Err(ShapeError("pointwise bias must be (c_out,)".into()));
    }
    let dw = g.depthwise3x3(x, depthwise);
    let pwv = g.conv2d(dw, pointwise, 1, 0);
    Ok(g.add_bias_channel(pwv, bias))
}

/// Weight-only parameter count of a depthwise separable convolution.
pub fn dwconv_weight_count(c_in: usize, c_out: usize) -> usize {
    c_in * 3 * 3 + c_in * c_out
}

/// Weight-only parameter count of a standard 3x3 convolution.
pub fn standard_conv3x3_weight_count(c_in: usize, c_out: usize) -> usize {
    c_in * c_out * 3 * 3
}

#[derive(Debug, Clone)]
pub struct DwConvLayer {
    pub prefix: String,
    pub c_in: usize,
    pub c_out: usize,
}

impl DwConvLayer {
    pub fn new(prefix: impl Into<String>, c_in: usize, c_out: usize) -> DwConvLayer {
        DwConvLayer {
            prefix: prefix.into(),
            c_in,
            c_out,
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) {
        store.insert(
            format!("{}.depthwise", self.prefix),
            init.conv(&[self.c_in, 3, 3]),
        );
        store.insert(
            format!("{}.pointwise", self.prefix),
            init.conv(&[self.c_out, self.c_in, 1, 1]),
        );
        store.insert(format!("{}.bias", self.prefix), init.zeros(&[self.c_out]));
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: VarId) -> Result<VarId, ShapeError> {
        if g.shape(x).len() != 4 || g.shape(x)[1] != self.c_in {
            return Err(ShapeError(format!(
                "{}: expected rank-4 input with {} channels, got {:?}",
                self.prefix,
                self.c_in,
                g.shape(x)
            )));
        }
        dwconv_var(
            g,
            x,
            bind.id(&format!("{}.depthwise", self.prefix)),
            bind.id(&format!("{}.pointwise", self.prefix)),
            bind.id(&format!("{}.bias", self.prefix)),
        )
    }
}

/// Standard convolution + bias.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub prefix: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    pub fn new(
        prefix: impl Into<String>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> ConvLayer {
        ConvLayer {
            prefix: prefix.into(),
            c_in,
            c_out,
            kernel,
            stride,
            pad,
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) {
        store.insert(
            format!("{}.weight", self.prefix),
            init.conv(&[self.c_out, self.c_in, self.kernel, self.kernel]),
        );
        store.insert(format!("{}.bias", self.prefix), init.zeros(&[self.c_out]));
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: VarId) -> VarId {
        let w = bind.id(&format!("{}.weight", self.prefix));
        let b = bind.id(&format!("{}.bias", self.prefix));
        let y = g.conv2d(x, w, self.stride, self.pad);
        g.add_bias_channel(y, b)
    }
}

/// GroupNorm with per-channel affine.
#[derive(Debug, Clone)]
pub struct NormLayer {
    pub prefix: String,
    pub channels: usize,
    pub groups: usize,
}

impl NormLayer {
    pub fn new(prefix: impl Into<String>, channels: usize, groups: usize) -> NormLayer {
        NormLayer {
            prefix: prefix.into(),
            channels,
            groups,
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) {
        store.insert(format!("{}.scale", self.prefix), init.ones(&[self.channels]));
        store.insert(format!("{}.shift", self.prefix), init.zeros(&[self.channels]));
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: VarId) -> VarId {
        let gamma = bind.id(&format!("{}.scale", self.prefix));
        let beta = bind.id(&format!("{}.shift", self.prefix));
        g.group_norm(x, gamma, beta, self.groups, GROUP_NORM_EPS)
    }
}

/// LayerNorm over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNormLayer {
    pub prefix: String,
    pub dim: usize,
}

impl LayerNormLayer {
    pub fn new(prefix: impl Into<String>, dim: usize) -> LayerNormLayer {
        LayerNormLayer {
            prefix: prefix.into(),
            dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) {
        store.insert(format!("{}.scale", self.prefix), init.ones(&[self.dim]));
        store.insert(format!("{}.shift", self.prefix), init.zeros(&[self.dim]));
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: VarId) -> VarId {
        let gamma = bind.id(&format!("{}.scale", self.prefix));
        let beta = bind.id(&format!("{}.shift", self.prefix));
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Dense layer on the last axis.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub prefix: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearLayer {
    pub fn new(prefix: impl Into<String>, d_in: usize, d_out: usize) -> LinearLayer {
        LinearLayer {
            prefix: prefix.into(),
            d_in,
            d_out,
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) {
        store.insert(
            format!("{}.weight", self.prefix),
            init.normal(&[self.d_in, self.d_out], 0.02),
        );
        store.insert(format!("{}.bias", self.prefix), init.zeros(&[self.d_out]));
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: VarId) -> VarId {
        let w = bind.id(&format!("{}.weight", self.prefix));
        let b = bind.id(&format!("{}.bias", self.prefix));
        g.linear(x, w, b)
    }
}
