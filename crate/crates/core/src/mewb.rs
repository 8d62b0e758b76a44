//! Multi-axis external-weights block.
//!
//! GroupNorm, then four parallel branches over an even channel split: three
//! spectral branches filter the height-width, channel-width, and
//! channel-height planes with learnable complex half-spectrum weights, and a
//! local branch runs a depthwise separable convolution. Branch outputs are
//! concatenated back to the input width, followed by a pointwise
//! feed-forward layer; residual connections join before the branches and
//! around the feed-forward layer.

use crate::autodiff::{Graph, VarId};
use crate::error::ShapeError;
use crate::layers::{dwconv_var, DwConvLayer, NormLayer, GROUP_NORM_EPS};
use crate::params::{Binding, Init, ParamStore};
use crate::types::FeatureMap;

/// The plane a 2D DFT acts on, in (batch, channel, height, width) layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisPair {
    HW,
    CW,
    CH,
}

impl AxisPair {
    pub const ALL: [AxisPair; 3] = [AxisPair::HW, AxisPair::CW, AxisPair::CH];

    /// Absolute axis indices (first, half-spectrum) of the transform plane.
    pub fn axes(self) -> (usize, usize) {
        match self {
            AxisPair::HW => (2, 3),
            AxisPair::CW => (1, 3),
            AxisPair::CH => (1, 2),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AxisPair::HW => "hw",
            AxisPair::CW => "cw",
            AxisPair::CH => "ch",
        }
    }

    /// Expected weight shape for a branch input of shape (B, c, h, w): the
    /// half spectrum of the transform plane, broadcast over the rest.
    pub fn weight_shape(self, c: usize, h: usize, w: usize) -> [usize; 2] {
        match self {
            AxisPair::HW => [h, w / 2 + 1],
            AxisPair::CW => [c, w / 2 + 1],
            AxisPair::CH => [c, h / 2 + 1],
        }
    }
}

/// GroupNorm with explicit affine parameters; errors if the channel count is
/// not divisible by the group count.
pub fn group_normalize(
    g: &mut Graph,
    x: VarId,
    scale: VarId,
    shift: VarId,
    groups: usize,
) -> Result<VarId, ShapeError> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(ShapeError(format!(
            "group_normalize expects rank-4 input, got {shape:?}"
        )));
    }
    if shape[1] % groups != 0 {
        return Err(ShapeError(format!(
            "channel count {} not divisible by group count {groups}",
            shape[1]
        )));
    }
    Ok(g.group_norm(x, scale, shift, groups, GROUP_NORM_EPS))
}

/// One spectral branch: filter the `axis` plane of a real rank-4 input with
/// complex weights given as separate real and imaginary arrays.
pub fn spectral_branch(
    g: &mut Graph,
    x: VarId,
    w_re: VarId,
    w_im: VarId,
    axis: AxisPair,
) -> Result<VarId, ShapeError> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(ShapeError(format!(
            "spectral_branch expects rank-4 input, got {shape:?}"
        )));
    }
    let expected = axis.weight_shape(shape[1], shape[2], shape[3]);
    if g.shape(w_re) != expected || g.shape(w_im) != expected {
        return Err(ShapeError(format!(
            "spectral weights for {:?} must be {:?} for input {:?}, got {:?}/{:?}",
            axis,
            expected,
            shape,
            g.shape(w_re),
            g.shape(w_im)
        )));
    }
    let (a, b) = axis.axes();
    Ok(g.spectral_filter(x, w_re, w_im, a, b))
}

/// The local branch: depthwise 3x3 + pointwise 1x1, width-preserving.
pub fn local_branch(
    g: &mut Graph,
    x: VarId,
    depthwise: VarId,
    pointwise: VarId,
    bias: VarId,
) -> Result<VarId, ShapeError> {
    let c = g.shape(x)[1];
    if g.shape(pointwise).first() != Some(&c) {
        return Err(ShapeError(
            "local branch must preserve the channel count".into(),
        ));
    }
    dwconv_var(g, x, depthwise, pointwise, bias)
}

/// Block descriptor: channel count, the spatial extent it was built for
/// (spectral weights are tied to it), group count, and FFN expansion.
#[derive(Debug, Clone)]
pub struct MewbBlock {
    pub prefix: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub groups: usize,
    pub expansion: usize,
    local: DwConvLayer,
    norm: NormLayer,
}

impl MewbBlock {
    pub fn new(
        prefix: impl Into<String>,
        channels: usize,
        height: usize,
        width: usize,
        groups: usize,
        expansion: usize,
    ) -> Result<MewbBlock, ShapeError> {
        let prefix = prefix.into();
        if channels % 4 != 0 {
            return Err(ShapeError(format!(
                "{prefix}: channel count {channels} must be divisible by 4"
            )));
        }
        if channels % groups != 0 {
            return Err(ShapeError(format!(
                "{prefix}: channel count {channels} must be divisible by groups {groups}"
            )));
        }
        let local = DwConvLayer::new(format!("{prefix}.local"), channels / 4, channels / 4);
        let norm = NormLayer::new(format!("{prefix}.norm"), channels, groups);
        Ok(MewbBlock {
            prefix,
            channels,
            height,
            width,
            groups,
            expansion,
            local,
            norm,
        })
    }

    /// Initialize parameters: identity spectral filters (1 + 0i), zeroed FFN
    /// output layer, so a fresh block is a benign near-identity.
    pub fn init(&self, store: &mut ParamStore, init: &mut Init) {
        self.norm.init(store, init);
        let q = self.channels / 4;
        for axis in AxisPair::ALL {
            let shape = axis.weight_shape(q, self.height, self.width);
            store.insert(
                format!("{}.spectral.{}.real", self.prefix, axis.name()),
                init.ones(&shape),
            );
            store.insert(
                format!("{}.spectral.{}.imag", self.prefix, axis.name()),
                init.zeros(&shape),
            );
        }
        self.local.init(store, init);
        let e = self.expansion * self.channels;
        store.insert(
            format!("{}.ffn.conv1.weight", self.prefix),
            init.conv(&[e, self.channels, 1, 1]),
        );
        store.insert(format!("{}.ffn.conv1.bias", self.prefix), init.zeros(&[e]));
        store.insert(
            format!("{}.ffn.conv2.weight", self.prefix),
            init.zeros(&[self.channels, e, 1, 1]),
        );
        store.insert(
            format!("{}.ffn.conv2.bias", self.prefix),
            init.zeros(&[self.channels]),
        );
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: VarId) -> Result<VarId, ShapeError> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4
            || shape[1] != self.channels
            || shape[2] != self.height
            || shape[3] != self.width
        {
            return Err(ShapeError(format!(
                "{}: expected (B,{},{},{}), got {:?}; spectral weights cannot be reshaped at runtime",
                self.prefix, self.channels, self.height, self.width, shape
            )));
        }
        let u = self.norm.forward(g, bind, x);
        let q = self.channels / 4;
        let mut branches = Vec::with_capacity(4);
        for (i, axis) in AxisPair::ALL.into_iter().enumerate() {
            let part = g.slice_axis(u, 1, i * q, q);
            let w_re = bind.id(&format!("{}.spectral.{}.real", self.prefix, axis.name()));
            let w_im = bind.id(&format!("{}.spectral.{}.imag", self.prefix, axis.name()));
            branches.push(spectral_branch(g, part, w_re, w_im, axis)?);
        }
        let local_in = g.slice_axis(u, 1, 3 * q, q);
        branches.push(self.local.forward(g, bind, local_in)?);
        let cat = g.concat(&branches, 1);

        let v = g.add(x, cat);

        let w1 = bind.id(&format!("{}.ffn.conv1.weight", self.prefix));
        let b1 = bind.id(&format!("{}.ffn.conv1.bias", self.prefix));
        let w2 = bind.id(&format!("{}.ffn.conv2.weight", self.prefix));
        let b2 = bind.id(&format!("{}.ffn.conv2.bias", self.prefix));
        let h1 = g.conv2d(v, w1, 1, 0);
        let h1 = g.add_bias_channel(h1, b1);
        let h1 = g.gelu(h1);
        let h2 = g.conv2d(h1, w2, 1, 0);
        let h2 = g.add_bias_channel(h2, b2);
        Ok(g.add(v, h2))
    }
}

/// Convenience eval-mode forward on a concrete feature map.
pub fn mewb_eval(
    block: &MewbBlock,
    store: &ParamStore,
    x: &FeatureMap,
) -> Result<FeatureMap, ShapeError> {
    let mut g = Graph::new();
    let bind = store.bind(&mut g, false);
    let xid = g.leaf(x.0.clone().into_dyn(), false);
    let y = block.forward(&mut g, &bind, xid)?;
    let arr = g
        .value(y)
        .clone()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("rank 4");
    FeatureMap::new(arr)
}
