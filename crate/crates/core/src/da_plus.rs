//! Improved dual-attention block.
//!
//! Two parallel branches — position attention over spatial locations and
//! channel attention over a Gram map — each sandwiched between depthwise
//! separable convolutions that compress the channel dimension by the
//! configured reduction; the branch sum is restored to the input width by a
//! final separable convolution. Both attention residuals are gated by
//! scalars initialized to zero, so a fresh block is a pure convolutional
//! path.

use crate::autodiff::{Graph, VarId};
use crate::error::ShapeError;
use crate::layers::DwConvLayer;
use crate::params::{Binding, Init, ParamStore};

pub use crate::layers::{
    dwconv_var as dwconv, dwconv_weight_count, standard_conv3x3_weight_count,
};

/// Smallest pooling stride that brings `h x w` positions under `max_pos`.
fn pool_stride(h: usize, w: usize, max_pos: usize) -> usize {
    let mut p = 1;
    while h.div_ceil(p) * w.div_ceil(p) > max_pos {
        p += 1;
    }
    p
}

/// Position attention: every spatial location attends over all (possibly
/// pooled) locations; softmax rows sum to 1; the residual is gated by a
/// learnable scalar starting at 0.
#[derive(Debug, Clone)]
pub struct PamModule {
    pub prefix: String,
    pub channels: usize,
    pub qk_channels: usize,
    /// Keys/values are average-pooled when the map has more positions than
    /// this, keeping the attention matrix bounded. Below the bound the
    /// attention is the exact (H*W) x (H*W) map.
    pub max_positions: usize,
}

impl PamModule {
    pub fn new(prefix: impl Into<String>, channels: usize, max_positions: usize) -> PamModule {
        PamModule {
            prefix: prefix.into(),
            channels,
            qk_channels: (channels / 8).max(1),
            max_positions,
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) {
        let (c, cq) = (self.channels, self.qk_channels);
        store.insert(format!("{}.query.weight", self.prefix), init.conv(&[cq, c, 1, 1]));
        store.insert(format!("{}.query.bias", self.prefix), init.zeros(&[cq]));
        store.insert(format!("{}.key.weight", self.prefix), init.conv(&[cq, c, 1, 1]));
        store.insert(format!("{}.key.bias", self.prefix), init.zeros(&[cq]));
        store.insert(format!("{}.value.weight", self.prefix), init.conv(&[c, c, 1, 1]));
        store.insert(format!("{}.value.bias", self.prefix), init.zeros(&[c]));
        store.insert(format!("{}.alpha", self.prefix), init.zeros(&[]));
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: VarId) -> Result<VarId, ShapeError> {
        self.forward_with_attention(g, bind, x).map(|(y, _)| y)
    }

    /// Returns (output, attention) — attention has shape (B, H*W, P) with P
    /// the (possibly pooled) key position count.
    pub fn forward_with_attention(
        &self,
        g: &mut Graph,
        bind: &Binding,
        x: VarId,
    ) -> Result<(VarId, VarId), ShapeError> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(ShapeError(format!(
                "{}: expected (B,{},H,W), got {shape:?}",
                self.prefix, self.channels
            )));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = h * w;

        let conv1x1 = |g: &mut Graph, x, name: &str| {
            let wid = bind.id(&format!("{}.{name}.weight", self.prefix));
            let bid = bind.id(&format!("{}.{name}.bias", self.prefix));
            let y = g.conv2d(x, wid, 1, 0);
            g.add_bias_channel(y, bid)
        };
        let q = conv1x1(g, x, "query");
        let mut k = conv1x1(g, x, "key");
        let mut v = conv1x1(g, x, "value");

        let p = pool_stride(h, w, self.max_positions);
        let (ph, pw) = (h.div_ceil(p), w.div_ceil(p));
        if p > 1 {
            k = g.avg_pool(k, p);
            v = g.avg_pool(v, p);
        }
        let pos = ph * pw;

        let qf = g.reshape(q, &[b, self.qk_channels, hw]);
        let qt = g.permute(qf, &[0, 2, 1]); // (B, HW, cq)
        let kf = g.reshape(k, &[b, self.qk_channels, pos]);
        let energy = g.bmm(qt, kf); // (B, HW, P)
        let attn = g.softmax(energy, 2);

        let vf = g.reshape(v, &[b, c, pos]);
        let attn_t = g.permute(attn, &[0, 2, 1]); // (B, P, HW)
        let out = g.bmm(vf, attn_t); // (B, C, HW)
        let out = g.reshape(out, &[b, c, h, w]);

        let alpha = bind.id(&format!("{}.alpha", self.prefix));
        let gated = g.scale_by_gate(out, alpha);
        Ok((g.add(x, gated), attn))
    }
}

/// Channel attention: softmax-normalized Gram map over channels with a
/// zero-initialized residual gate.
#[derive(Debug, Clone)]
pub struct CamModule {
    pub prefix: String,
    pub channels: usize,
}

impl CamModule {
    pub fn new(prefix: impl Into<String>, channels: usize) -> CamModule {
        CamModule {
            prefix: prefix.into(),
            channels,
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) {
        store.insert(format!("{}.beta", self.prefix), init.zeros(&[]));
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: VarId) -> Result<VarId, ShapeError> {
        self.forward_with_attention(g, bind, x).map(|(y, _)| y)
    }

    pub fn forward_with_attention(
        &self,
        g: &mut Graph,
        bind: &Binding,
        x: VarId,
    ) -> Result<(VarId, VarId), ShapeError> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(ShapeError(format!(
                "{}: expected (B,{},H,W), got {shape:?}",
                self.prefix, self.channels
            )));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let xf = g.reshape(x, &[b, c, h * w]);
        let xt = g.permute(xf, &[0, 2, 1]);
        let energy = g.bmm(xf, xt); // (B, C, C)
        let attn = g.softmax(energy, 2);
        let out = g.bmm(attn, xf);
        let out = g.reshape(out, &[b, c, h, w]);
        let beta = bind.id(&format!("{}.beta", self.prefix));
        let gated = g.scale_by_gate(out, beta);
        Ok((g.add(x, gated), attn))
    }
}

/// The full block: Eq-style composition of separable convolutions around the
/// two attention branches.
#[derive(Debug, Clone)]
pub struct DaPlusBlock {
    pub prefix: String,
    pub channels: usize,
    pub reduction: usize,
    pam_in: DwConvLayer,
    pam: PamModule,
    pam_out: DwConvLayer,
    cam_in: DwConvLayer,
    cam: CamModule,
    cam_out: DwConvLayer,
    restore: DwConvLayer,
}

impl DaPlusBlock {
    pub fn new(
        prefix: impl Into<String>,
        channels: usize,
        reduction: usize,
        max_positions: usize,
    ) -> Result<DaPlusBlock, ShapeError> {
        let prefix = prefix.into();
        if reduction == 0 || channels % reduction != 0 {
            return Err(ShapeError(format!(
                "{prefix}: channels {channels} must be divisible by reduction {reduction}"
            )));
        }
        let cr = channels / reduction;
        Ok(DaPlusBlock {
            pam_in: DwConvLayer::new(format!("{prefix}.pam_in"), channels, cr),
            pam: PamModule::new(format!("{prefix}.pam"), cr, max_positions),
            pam_out: DwConvLayer::new(format!("{prefix}.pam_out"), cr, cr),
            cam_in: DwConvLayer::new(format!("{prefix}.cam_in"), channels, cr),
            cam: CamModule::new(format!("{prefix}.cam"), cr),
            cam_out: DwConvLayer::new(format!("{prefix}.cam_out"), cr, cr),
            restore: DwConvLayer::new(format!("{prefix}.restore"), cr, channels),
            prefix,
            channels,
            reduction,
        })
    }

    /// Compressed internal width.
    pub fn inner_channels(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) {
        self.pam_in.init(store, init);
        self.pam.init(store, init);
        self.pam_out.init(store, init);
        self.cam_in.init(store, init);
        self.cam.init(store, init);
        self.cam_out.init(store, init);
        self.restore.init(store, init);
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: VarId) -> Result<VarId, ShapeError> {
        self.forward_instrumented(g, bind, x).map(|(y, _, _)| y)
    }

    /// Returns (output, eta1, eta2) so the branch composition is observable.
    pub fn forward_instrumented(
        &self,
        g: &mut Graph,
        bind: &Binding,
        x: VarId,
    ) -> Result<(VarId, VarId, VarId), ShapeError> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(ShapeError(format!(
                "{}: expected (B,{},H,W), got {shape:?}",
                self.prefix, self.channels
            )));
        }
        let p_in = self.pam_in.forward(g, bind, x)?;
        let p_att = self.pam.forward(g, bind, p_in)?;
        let eta1 = self.pam_out.forward(g, bind, p_att)?;

        let c_in = self.cam_in.forward(g, bind, x)?;
        let c_att = self.cam.forward(g, bind, c_in)?;
        let eta2 = self.cam_out.forward(g, bind, c_att)?;

        let sum = g.add(eta1, eta2);
        let y = self.restore.forward(g, bind, sum)?;
        Ok((y, eta1, eta2))
    }

    /// Weight-only parameter count of the five separable convolutions.
    pub fn dwconv_weight_count_total(channels: usize, reduction: usize) -> usize {
        let cr = channels / reduction;
        2 * dwconv_weight_count(channels, cr)
            + 2 * dwconv_weight_count(cr, cr)
            + dwconv_weight_count(cr, channels)
    }

    /// The same topology with standard 3x3 convolutions in every DWConv slot.
    pub fn standard_conv_weight_count_total(channels: usize, reduction: usize) -> usize {
        let cr = channels / reduction;
        2 * standard_conv3x3_weight_count(channels, cr)
            + 2 * standard_conv3x3_weight_count(cr, cr)
            + standard_conv3x3_weight_count(cr, channels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_input(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    fn init_in_store(f: impl Fn(&mut ParamStore, &mut Init)) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(1234);
        f(&mut store, &mut Init::new(&mut rng));
        store
    }

    #[test]
    fn pam_gate_closed_is_exact_identity() {
        let pam = PamModule::new("pam", 4, 1 << 20);
        let store = init_in_store(|s, i| pam.init(s, i));
        let mut g = Graph::new();
        let bind = store.bind(&mut g, false);
        let x = g.leaf(rand_input(&[2, 4, 5, 5], 3), false);
        let y = pam.forward(&mut g, &bind, x).unwrap();
        assert_eq!(g.value(x), g.value(y));
    }

    #[test]
    fn pam_attention_rows_sum_to_one() {
        let pam = PamModule::new("pam", 8, 1 << 20);
        let store = init_in_store(|s, i| pam.init(s, i));
        let mut g = Graph::new();
        let bind = store.bind(&mut g, false);
        let x = g.leaf(rand_input(&[1, 8, 4, 4], 5), false);
        let (_, attn) = pam.forward_with_attention(&mut g, &bind, x).unwrap();
        assert_eq!(g.shape(attn), &[1, 16, 16]);
        for row in g.value(attn).lanes(ndarray::Axis(2)) {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pam_degenerate_single_position() {
        let pam = PamModule::new("pam", 4, 1 << 20);
        let mut store = init_in_store(|s, i| pam.init(s, i));
        store.update("pam.alpha", |a| a[[]] = 0.5);
        let mut g = Graph::new();
        let bind = store.bind(&mut g, false);
        let x = g.leaf(rand_input(&[1, 4, 1, 1], 7), false);
        let (y, attn) = pam.forward_with_attention(&mut g, &bind, x).unwrap();
        // softmax over a single position is exactly [1]
        assert_eq!(g.shape(attn), &[1, 1, 1]);
        assert_eq!(g.value(attn)[[0, 0, 0]], 1.0);
        // y = x + alpha * V
        let wv = bind.id("pam.value.weight");
        let bv = bind.id("pam.value.bias");
        let v = g.conv2d(x, wv, 1, 0);
        let v = g.add_bias_channel(v, bv);
        let sv = g.scale(v, 0.5);
        let expected = g.add(x, sv);
        for (a, b) in g.value(y).iter().zip(g.value(expected).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pam_pools_large_maps() {
        let pam = PamModule::new("pam", 4, 16);
        let store = init_in_store(|s, i| pam.init(s, i));
        let mut g = Graph::new();
        let bind = store.bind(&mut g, false);
        let x = g.leaf(rand_input(&[1, 4, 8, 8], 11), false);
        let (y, attn) = pam.forward_with_attention(&mut g, &bind, x).unwrap();
        // 64 positions pooled by stride 2 -> 16 keys; rows still sum to 1.
        assert_eq!(g.shape(attn), &[1, 64, 16]);
        for row in g.value(attn).lanes(ndarray::Axis(2)) {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        assert_eq!(g.shape(y), &[1, 4, 8, 8]);
    }

    #[test]
    fn cam_gate_closed_is_exact_identity_and_rows_normalize() {
        let cam = CamModule::new("cam", 6);
        let store = init_in_store(|s, i| cam.init(s, i));
        let mut g = Graph::new();
        let bind = store.bind(&mut g, false);
        let x = g.leaf(rand_input(&[2, 6, 3, 3], 13), false);
        let (y, attn) = cam.forward_with_attention(&mut g, &bind, x).unwrap();
        assert_eq!(g.value(x), g.value(y));
        for row in g.value(attn).lanes(ndarray::Axis(2)) {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cam_single_channel_scales_by_one_plus_beta() {
        let cam = CamModule::new("cam", 1);
        let mut store = init_in_store(|s, i| cam.init(s, i));
        store.update("cam.beta", |b| b[[]] = 0.25);
        let mut g = Graph::new();
        let bind = store.bind(&mut g, false);
        let x = g.leaf(rand_input(&[1, 1, 4, 4], 17), false);
        let (y, attn) = cam.forward_with_attention(&mut g, &bind, x).unwrap();
        assert_eq!(g.value(attn)[[0, 0, 0]], 1.0);
        for (a, b) in g.value(x).iter().zip(g.value(y).iter()) {
            assert!((b - a * 1.25).abs() < 1e-12);
        }
    }

    #[test]
    fn block_shape_contract_and_inner_width() {
        let block = DaPlusBlock::new("da", 64, 8, 1 << 20).unwrap();
        assert_eq!(block.inner_channels(), 8);
        let store = init_in_store(|s, i| block.init(s, i));
        let mut g = Graph::new();
        let bind = store.bind(&mut g, false);
        let x = g.leaf(rand_input(&[2, 64, 7, 7], 19), false);
        let (y, eta1, eta2) = block.forward_instrumented(&mut g, &bind, x).unwrap();
        assert_eq!(g.shape(y), &[2, 64, 7, 7]);
        assert_eq!(g.shape(eta1), &[2, 8, 7, 7]);
        assert_eq!(g.shape(eta2), &[2, 8, 7, 7]);
    }

    #[test]
    fn block_rejects_indivisible_reduction() {
        assert!(DaPlusBlock::new("da", 60, 8, 1024).is_err());
    }

    #[test]
    fn eta1_matches_independent_recomputation() {
        let block = DaPlusBlock::new("da", 16, 4, 1 << 20).unwrap();
        let store = init_in_store(|s, i| block.init(s, i));
        let mut g = Graph::new();
        let bind = store.bind(&mut g, false);
        let x = g.leaf(rand_input(&[1, 16, 5, 5], 23), false);
        let (_, eta1, _) = block.forward_instrumented(&mut g, &bind, x).unwrap();

        // Recompose eta1 from the published pieces.
        let pam_in = DwConvLayer::new("da.pam_in", 16, 4);
        let pam = PamModule::new("da.pam", 4, 1 << 20);
        let pam_out = DwConvLayer::new("da.pam_out", 4, 4);
        let a = pam_in.forward(&mut g, &bind, x).unwrap();
        let b = pam.forward(&mut g, &bind, a).unwrap();
        let expected = pam_out.forward(&mut g, &bind, b).unwrap();
        assert_eq!(g.value(eta1), g.value(expected));
    }

    #[test]
    fn identity_composition_with_unit_reduction() {
        // r = 1 lets every separable conv be configured as an identity;
        // gates are zero at init, so the branch sum is 2x and a restore
        // equal to half the identity returns exactly x.
        let block = DaPlusBlock::new("da", 4, 1, 1 << 20).unwrap();
        let mut store = init_in_store(|s, i| block.init(s, i));
        let set_identity = |store: &mut ParamStore, prefix: &str, scale: f64| {
            store.update(&format!("{prefix}.depthwise"), |k| {
                k.fill(0.0);
                for c in 0..4 {
                    k[[c, 1, 1]] = 1.0;
                }
            });
            store.update(&format!("{prefix}.pointwise"), |k| {
                k.fill(0.0);
                for c in 0..4 {
                    k[[c, c, 0, 0]] = scale;
                }
            });
            store.update(&format!("{prefix}.bias"), |b| b.fill(0.0));
        };
        set_identity(&mut store, "da.pam_in", 1.0);
        set_identity(&mut store, "da.pam_out", 1.0);
        set_identity(&mut store, "da.cam_in", 1.0);
        set_identity(&mut store, "da.cam_out", 1.0);
        set_identity(&mut store, "da.restore", 0.5);

        let mut g = Graph::new();
        let bind = store.bind(&mut g, false);
        let x = g.leaf(rand_input(&[1, 4, 6, 6], 29), false);
        let y = block.forward(&mut g, &bind, x).unwrap();
        for (a, b) in g.value(x).iter().zip(g.value(y).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn separable_convolutions_use_fewer_weights() {
        for c in [64usize, 128, 256] {
            let dw = DaPlusBlock::dwconv_weight_count_total(c, 8);
            let std = DaPlusBlock::standard_conv_weight_count_total(c, 8);
            assert!(dw < std, "C={c}: {dw} !< {std}");
        }
        // Single-layer closed form from the contract.
        assert_eq!(dwconv_weight_count(64, 64), 4672);
        assert_eq!(standard_conv3x3_weight_count(64, 64), 36864);
    }
}
