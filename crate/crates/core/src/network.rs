//! Full encoder-decoder assembly.
//!
//! The encoder is a three-block convolutional stem (skips at 1/2, 1/4, 1/8
//! resolution) followed by a stride-16 projection, the optional bottleneck
//! blocks (multi-axis spectral, dual attention), patch embedding onto a
//! 14x14 token grid, and a pre-norm transformer. Skip connections are
//! optionally refined by dual-attention blocks; the decoder upsamples three
//! times, fusing each refined skip with a 3x3 convolution and an optional
//! spectral block, and a final upsample + 1x1 head produces the class
//! logits.

use std::path::Path;

use ndarray::{Array4, Ix4};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{Graph, VarId};
use crate::config::{ModelConfig, Variant, INPUT_SIZE, TOKEN_GRID};
use crate::containers::read_params_file;
use crate::da_plus::DaPlusBlock;
use crate::error::{CheckpointError, ShapeError};
use crate::layers::{ConvLayer, LayerNormLayer, LinearLayer, NormLayer};
use crate::mewb::MewbBlock;
use crate::params::{Binding, Init, ParamStore};
use crate::types::ImageBatch;

fn debug_assert_finite(g: &Graph, id: VarId, context: &str) {
    debug_assert!(
        g.value(id).iter().all(|v| v.is_finite()),
        "non-finite activation after {context}"
    );
}

#[derive(Debug, Clone)]
struct StemBlock {
    conv1: ConvLayer,
    norm1: NormLayer,
    conv2: ConvLayer,
    norm2: NormLayer,
}

impl StemBlock {
    fn new(prefix: &str, c_in: usize, c_out: usize, groups: usize) -> StemBlock {
        StemBlock {
            conv1: ConvLayer::new(format!("{prefix}.conv1"), c_in, c_out, 3, 2, 1),
            norm1: NormLayer::new(format!("{prefix}.norm1"), c_out, groups),
            conv2: ConvLayer::new(format!("{prefix}.conv2"), c_out, c_out, 3, 1, 1),
            norm2: NormLayer::new(format!("{prefix}.norm2"), c_out, groups),
        }
    }

    fn init(&self, store: &mut ParamStore, init: &mut Init) {
        self.conv1.init(store, init);
        self.norm1.init(store, init);
        self.conv2.init(store, init);
        self.norm2.init(store, init);
    }

    fn forward(&self, g: &mut Graph, bind: &Binding, x: VarId) -> VarId {
        let y = self.conv1.forward(g, bind, x);
        let y = self.norm1.forward(g, bind, y);
        let y = g.relu(y);
        let y = self.conv2.forward(g, bind, y);
        let y = self.norm2.forward(g, bind, y);
        g.relu(y)
    }
}

#[derive(Debug, Clone)]
struct TransformerBlock {
    norm1: LayerNormLayer,
    qkv: LinearLayer,
    proj: LinearLayer,
    norm2: LayerNormLayer,
    fc1: LinearLayer,
    fc2: LinearLayer,
    heads: usize,
}

impl TransformerBlock {
    fn new(prefix: &str, hidden: usize, heads: usize, expansion: usize) -> TransformerBlock {
        TransformerBlock {
            norm1: LayerNormLayer::new(format!("{prefix}.norm1"), hidden),
            qkv: LinearLayer::new(format!("{prefix}.attn.qkv"), hidden, 3 * hidden),
            proj: LinearLayer::new(format!("{prefix}.attn.proj"), hidden, hidden),
            norm2: LayerNormLayer::new(format!("{prefix}.norm2"), hidden),
            fc1: LinearLayer::new(format!("{prefix}.ffn.fc1"), hidden, expansion * hidden),
            fc2: LinearLayer::new(format!("{prefix}.ffn.fc2"), expansion * hidden, hidden),
            heads,
        }
    }

    fn init(&self, store: &mut ParamStore, init: &mut Init) {
        self.norm1.init(store, init);
        self.qkv.init(store, init);
        self.proj.init(store, init);
        self.norm2.init(store, init);
        self.fc1.init(store, init);
        self.fc2.init(store, init);
    }

    fn forward(&self, g: &mut Graph, bind: &Binding, x: VarId) -> VarId {
        let shape = g.shape(x).to_vec();
        let (b, n, hidden) = (shape[0], shape[1], shape[2]);
        let heads = self.heads;
        let hd = hidden / heads;

        let normed = self.norm1.forward(g, bind, x);
        let qkv = self.qkv.forward(g, bind, normed); // (B, N, 3H)
        let qkv = g.reshape(qkv, &[b, n, 3, heads, hd]);
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4]); // (3, B, heads, N, hd)
        let q = g.slice_axis(qkv, 0, 0, 1);
        let k = g.slice_axis(qkv, 0, 1, 1);
        let v = g.slice_axis(qkv, 0, 2, 1);
        let q = g.reshape(q, &[b * heads, n, hd]);
        let k = g.reshape(k, &[b * heads, n, hd]);
        let v = g.reshape(v, &[b * heads, n, hd]);

        let kt = g.permute(k, &[0, 2, 1]);
        let scores = g.bmm(q, kt);
        let scores = g.scale(scores, 1.0 / (hd as f64).sqrt());
        let attn = g.softmax(scores, 2);
        let ctx = g.bmm(attn, v); // (B*heads, N, hd)
        let ctx = g.reshape(ctx, &[b, heads, n, hd]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[b, n, hidden]);
        let proj = self.proj.forward(g, bind, ctx);
        let x = g.add(x, proj);

        let normed = self.norm2.forward(g, bind, x);
        let h1 = self.fc1.forward(g, bind, normed);
        let h1 = g.gelu(h1);
        let h2 = self.fc2.forward(g, bind, h1);
        g.add(x, h2)
    }
}

#[derive(Debug, Clone)]
struct DecoderStage {
    fuse: ConvLayer,
    norm: NormLayer,
    mewb: Option<MewbBlock>,
}

/// Everything produced by the encoder: raw skips and bottleneck tokens.
pub struct EncoderFeatures {
    pub skips: [VarId; 3],
    pub tokens: VarId,
}

/// Intermediate taps for instrumentation and variant-isolation tests.
pub struct ForwardTrace {
    pub skips: [VarId; 3],
    pub skips_refined: [VarId; 3],
    pub stem_out: VarId,
    pub post_mewb: Option<VarId>,
    pub post_da: Option<VarId>,
    pub tokens: VarId,
    pub logits: VarId,
}

pub struct Model {
    pub config: ModelConfig,
    stem_blocks: [StemBlock; 3],
    stem_down: ConvLayer,
    stem_down_norm: NormLayer,
    enc_mewb: Option<MewbBlock>,
    enc_da: Option<DaPlusBlock>,
    embed_proj: ConvLayer,
    tblocks: Vec<TransformerBlock>,
    final_norm: LayerNormLayer,
    /// Indexed by skip position (0 = highest resolution).
    skip_da: [Option<DaPlusBlock>; 3],
    neck: ConvLayer,
    neck_norm: NormLayer,
    stages: [DecoderStage; 3],
    head: ConvLayer,
}

impl Model {
    /// Instantiate exactly the blocks the config's variant demands, with a
    /// deterministic seed-derived initialization.
    pub fn build(config: &ModelConfig) -> Result<(Model, ParamStore), ShapeError> {
        let config = config
            .clone()
            .validated()
            .map_err(|e| ShapeError(e.to_string()))?;
        let [c1, c2, c3, c4] = config.stem_channels;
        let [d0, d1, d2, d3] = config.decoder_channels;
        let groups = config.group_norm_groups;
        let grid = TOKEN_GRID;

        let stem_blocks = [
            StemBlock::new("stem.block1", 1, c1, groups),
            StemBlock::new("stem.block2", c1, c2, groups),
            StemBlock::new("stem.block3", c2, c3, groups),
        ];
        let stem_down = ConvLayer::new("stem.down.conv", c3, c4, 3, 2, 1);
        let stem_down_norm = NormLayer::new("stem.down.norm", c4, groups);

        let enc_mewb = config
            .variant
            .uses_mewb()
            .then(|| MewbBlock::new("enc.mewb", c4, grid, grid, groups, config.ffn_expansion))
            .transpose()?;
        let enc_da = config
            .variant
            .uses_da_plus()
            .then(|| {
                DaPlusBlock::new(
                    "enc.da",
                    c4,
                    config.attention_reduction,
                    config.pam_max_positions,
                )
            })
            .transpose()?;

        let embed_proj = ConvLayer::new("embed.proj", c4, config.hidden_dim, 1, 1, 0);
        let tblocks: Vec<TransformerBlock> = (0..config.transformer_layers)
            .map(|i| {
                TransformerBlock::new(
                    &format!("transformer.layer{i}"),
                    config.hidden_dim,
                    config.attention_heads,
                    config.ffn_expansion,
                )
            })
            .collect();
        let final_norm = LayerNormLayer::new("transformer.norm", config.hidden_dim);

        let mut skip_da: [Option<DaPlusBlock>; 3] = [None, None, None];
        for layer in &config.skip_da_layers {
            let idx = config.skip_index_for_layer(*layer);
            skip_da[idx] = Some(DaPlusBlock::new(
                format!("skip{}.da", idx + 1),
                config.skip_channels()[idx],
                config.attention_reduction,
                config.pam_max_positions,
            )?);
        }

        let neck = ConvLayer::new("dec.neck.conv", config.hidden_dim, d0, 3, 1, 1);
        let neck_norm = NormLayer::new("dec.neck.norm", d0, groups);
        let mk_stage = |i: usize, c_in: usize, c_skip: usize, c_out: usize, h: usize| {
            Ok::<DecoderStage, ShapeError>(DecoderStage {
                fuse: ConvLayer::new(format!("dec.stage{i}.fuse"), c_in + c_skip, c_out, 3, 1, 1),
                norm: NormLayer::new(format!("dec.stage{i}.norm"), c_out, groups),
                mewb: config
                    .variant
                    .uses_mewb()
                    .then(|| {
                        MewbBlock::new(
                            format!("dec.stage{i}.mewb"),
                            c_out,
                            h,
                            h,
                            groups,
                            config.ffn_expansion,
                        )
                    })
                    .transpose()?,
            })
        };
        let stages = [
            mk_stage(1, d0, c3, d1, 2 * grid)?,
            mk_stage(2, d1, c2, d2, 4 * grid)?,
            mk_stage(3, d2, c1, d3, 8 * grid)?,
        ];
        let head = ConvLayer::new("head.conv", d3, config.num_classes, 1, 1, 0);

        let model = Model {
            config: config.clone(),
            stem_blocks,
            stem_down,
            stem_down_norm,
            enc_mewb,
            enc_da,
            embed_proj,
            tblocks,
            final_norm,
            skip_da,
            neck,
            neck_norm,
            stages,
            head,
        };

        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let mut init = Init::new(&mut rng);
        for block in &model.stem_blocks {
            block.init(&mut store, &mut init);
        }
        model.stem_down.init(&mut store, &mut init);
        model.stem_down_norm.init(&mut store, &mut init);
        if let Some(b) = &model.enc_mewb {
            b.init(&mut store, &mut init);
        }
        if let Some(b) = &model.enc_da {
            b.init(&mut store, &mut init);
        }
        model.embed_proj.init(&mut store, &mut init);
        store.insert(
            "embed.pos",
            init.normal(&[grid * grid, config.hidden_dim], 0.02),
        );
        for block in &model.tblocks {
            block.init(&mut store, &mut init);
        }
        model.final_norm.init(&mut store, &mut init);
        for b in model.skip_da.iter().flatten() {
            b.init(&mut store, &mut init);
        }
        model.neck.init(&mut store, &mut init);
        model.neck_norm.init(&mut store, &mut init);
        for stage in &model.stages {
            stage.fuse.init(&mut store, &mut init);
            stage.norm.init(&mut store, &mut init);
            if let Some(b) = &stage.mewb {
                b.init(&mut store, &mut init);
            }
        }
        model.head.init(&mut store, &mut init);

        Ok((model, store))
    }

    /// Build and then overwrite any parameters found in a weight file
    /// (parameter-map container). Missing names keep their fresh init.
    pub fn build_with_weights(
        config: &ModelConfig,
        weights: Option<&Path>,
    ) -> Result<(Model, ParamStore), CheckpointError> {
        let (model, mut store) =
            Model::build(config).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        if let Some(path) = weights {
            let loaded = read_params_file(path)?;
            store
                .load_matching(&loaded)
                .map_err(CheckpointError::Malformed)?;
        }
        Ok((model, store))
    }

    /// The convolutional stem: three downsampling blocks whose outputs are
    /// the skip connections, plus the stride-16 projection.
    pub fn conv_stem(
        &self,
        g: &mut Graph,
        bind: &Binding,
        img: VarId,
    ) -> Result<([VarId; 3], VarId), ShapeError> {
        let shape = g.shape(img).to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != INPUT_SIZE || shape[3] != INPUT_SIZE {
            return Err(ShapeError(format!(
                "stem expects (B,1,{INPUT_SIZE},{INPUT_SIZE}), got {shape:?}"
            )));
        }
        let s1 = self.stem_blocks[0].forward(g, bind, img);
        let s2 = self.stem_blocks[1].forward(g, bind, s1);
        let s3 = self.stem_blocks[2].forward(g, bind, s2);
        let down = self.stem_down.forward(g, bind, s3);
        let down = self.stem_down_norm.forward(g, bind, down);
        let out = g.relu(down);
        debug_assert_finite(g, out, "conv stem");
        Ok(([s1, s2, s3], out))
    }

    /// Stem -> optional bottleneck blocks -> patch embedding -> transformer.
    pub fn encoder_forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        img: VarId,
    ) -> Result<EncoderFeatures, ShapeError> {
        let trace = self.encoder_traced(g, bind, img)?;
        Ok(EncoderFeatures {
            skips: trace.0,
            tokens: trace.4,
        })
    }

    #[allow(clippy::type_complexity)]
    fn encoder_traced(
        &self,
        g: &mut Graph,
        bind: &Binding,
        img: VarId,
    ) -> Result<([VarId; 3], VarId, Option<VarId>, Option<VarId>, VarId), ShapeError> {
        let (skips, stem_out) = self.conv_stem(g, bind, img)?;
        let mut u = stem_out;
        let post_mewb = match &self.enc_mewb {
            Some(block) => {
                u = block.forward(g, bind, u)?;
                debug_assert_finite(g, u, "encoder spectral block");
                Some(u)
            }
            None => None,
        };
        let post_da = match &self.enc_da {
            Some(block) => {
                u = block.forward(g, bind, u)?;
                debug_assert_finite(g, u, "encoder dual-attention block");
                Some(u)
            }
            None => None,
        };

        let b = g.shape(u)[0];
        let grid = TOKEN_GRID;
        let n = grid * grid;
        let proj = self.embed_proj.forward(g, bind, u); // (B, hidden, 14, 14)
        let flat = g.reshape(proj, &[b, self.config.hidden_dim, n]);
        let tokens = g.permute(flat, &[0, 2, 1]); // (B, N, hidden)
        let pos = bind.id("embed.pos");
        let mut x = g.add_broadcast_batch(tokens, pos);
        for block in &self.tblocks {
            x = block.forward(g, bind, x);
        }
        x = self.final_norm.forward(g, bind, x);
        debug_assert_finite(g, x, "transformer");
        Ok((skips, stem_out, post_mewb, post_da, x))
    }

    /// Pass each skip through its dual-attention block when configured,
    /// otherwise through unchanged.
    pub fn skip_refine(
        &self,
        g: &mut Graph,
        bind: &Binding,
        skips: [VarId; 3],
    ) -> Result<[VarId; 3], ShapeError> {
        let mut out = skips;
        for (i, slot) in self.skip_da.iter().enumerate() {
            if let Some(block) = slot {
                out[i] = block.forward(g, bind, skips[i])?;
                debug_assert_finite(g, out[i], "skip refinement");
            }
        }
        Ok(out)
    }

    /// Tokens + refined skips -> logits at (B, num_classes, 224, 224).
    pub fn decoder_forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        tokens: VarId,
        refined_skips: [VarId; 3],
    ) -> Result<VarId, ShapeError> {
        let shape = g.shape(tokens).to_vec();
        let grid = TOKEN_GRID;
        if shape.len() != 3 || shape[1] != grid * grid || shape[2] != self.config.hidden_dim {
            return Err(ShapeError(format!(
                "decoder expects (B,{},{}) tokens, got {shape:?}",
                grid * grid,
                self.config.hidden_dim
            )));
        }
        let b = shape[0];
        let t = g.permute(tokens, &[0, 2, 1]);
        let mut x = g.reshape(t, &[b, self.config.hidden_dim, grid, grid]);
        x = self.neck.forward(g, bind, x);
        x = self.neck_norm.forward(g, bind, x);
        x = g.relu(x);

        for (i, stage) in self.stages.iter().enumerate() {
            let up = g.upsample2x(x);
            let skip = refined_skips[2 - i];
            if g.shape(up)[2] != g.shape(skip)[2] || g.shape(up)[3] != g.shape(skip)[3] {
                return Err(ShapeError(format!(
                    "decoder stage {}: upsampled {:?} does not match skip {:?}",
                    i + 1,
                    g.shape(up),
                    g.shape(skip)
                )));
            }
            let cat = g.concat(&[up, skip], 1);
            let fused = stage.fuse.forward(g, bind, cat);
            let fused = stage.norm.forward(g, bind, fused);
            x = g.relu(fused);
            if let Some(block) = &stage.mewb {
                x = block.forward(g, bind, x)?;
            }
            debug_assert_finite(g, x, "decoder stage");
        }

        let up = g.upsample2x(x);
        let logits = self.head.forward(g, bind, up);
        debug_assert_finite(g, logits, "segmentation head");
        Ok(logits)
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, img: VarId) -> Result<VarId, ShapeError> {
        self.forward_traced(g, bind, img).map(|t| t.logits)
    }

    pub fn forward_traced(
        &self,
        g: &mut Graph,
        bind: &Binding,
        img: VarId,
    ) -> Result<ForwardTrace, ShapeError> {
        let (skips, stem_out, post_mewb, post_da, tokens) = self.encoder_traced(g, bind, img)?;
        let skips_refined = self.skip_refine(g, bind, skips)?;
        let logits = self.decoder_forward(g, bind, tokens, skips_refined)?;
        Ok(ForwardTrace {
            skips,
            skips_refined,
            stem_out,
            post_mewb,
            post_da,
            tokens,
            logits,
        })
    }

    /// Inference convenience: logits for a batch without gradient tracking.
    pub fn infer_logits(
        &self,
        store: &ParamStore,
        batch: &ImageBatch,
    ) -> Result<Array4<f64>, ShapeError> {
        let mut g = Graph::new();
        let bind = store.bind(&mut g, false);
        let img = g.leaf(batch.0.clone().into_dyn(), false);
        let logits = self.forward(&mut g, &bind, img)?;
        Ok(g
            .value(logits)
            .clone()
            .into_dimensionality::<Ix4>()
            .expect("rank 4"))
    }
}

/// Spec-facing alias: a variant's parameters are the store built for it.
pub fn build_variant(config: &ModelConfig) -> Result<(Model, ParamStore), ShapeError> {
    Model::build(config)
}

pub fn parameter_count(config: &ModelConfig) -> Result<usize, ShapeError> {
    Model::build(config).map(|(_, store)| store.count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::NUM_CLASSES;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    fn compact(variant: Variant) -> ModelConfig {
        ModelConfig::compact(variant)
    }

    fn rand_image(b: usize, seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(&[b, 1, INPUT_SIZE, INPUT_SIZE]), |_| {
            rng.gen_range(0.0..1.0)
        })
    }

    #[test]
    fn stem_strides_and_monotone_channels() {
        let cfg = compact(Variant::Baseline);
        let (model, store) = Model::build(&cfg).unwrap();
        let mut g = Graph::new();
        let bind = store.bind(&mut g, false);
        let img = g.leaf(rand_image(1, 3), false);
        let (skips, out) = model.conv_stem(&mut g, &bind, img).unwrap();
        assert_eq!(g.shape(skips[0]), &[1, 8, 112, 112]);
        assert_eq!(g.shape(skips[1]), &[1, 16, 56, 56]);
        assert_eq!(g.shape(skips[2]), &[1, 32, 28, 28]);
        assert_eq!(g.shape(out), &[1, 64, 14, 14]);
        let channels = [8, 16, 32, 64];
        assert!(channels.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn stem_rejects_wrong_input_size() {
        let cfg = compact(Variant::Baseline);
        let (model, store) = Model::build(&cfg).unwrap();
        let mut g = Graph::new();
        let bind = store.bind(&mut g, false);
        let img = g.constant(ArrayD::zeros(IxDyn(&[1, 1, 64, 64])));
        assert!(model.conv_stem(&mut g, &bind, img).is_err());
    }

    #[test]
    fn zero_image_stays_finite() {
        let cfg = compact(Variant::Full);
        let (model, store) = Model::build(&cfg).unwrap();
        let mut g = Graph::new();
        let bind = store.bind(&mut g, false);
        let img = g.constant(ArrayD::zeros(IxDyn(&[1, 1, INPUT_SIZE, INPUT_SIZE])));
        let logits = model.forward(&mut g, &bind, img).unwrap();
        assert!(g.value(logits).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn full_variant_end_to_end_shapes_and_softmax() {
        let cfg = compact(Variant::Full);
        let (model, store) = Model::build(&cfg).unwrap();
        let mut g = Graph::new();
        let bind = store.bind(&mut g, false);
        let img = g.leaf(rand_image(2, 7), false);
        let logits = model.forward(&mut g, &bind, img).unwrap();
        assert_eq!(
            g.shape(logits),
            &[2, NUM_CLASSES, INPUT_SIZE, INPUT_SIZE]
        );
        let probs = g.softmax(logits, 1);
        let pv = g.value(probs);
        for lane in pv.lanes(ndarray::Axis(1)) {
            assert!((lane.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn bottleneck_token_shape_with_default_hidden() {
        let mut cfg = compact(Variant::Full);
        cfg.hidden_dim = 768;
        cfg.attention_heads = 12;
        cfg.transformer_layers = 2;
        let (model, store) = Model::build(&cfg).unwrap();
        let mut g = Graph::new();
        let bind = store.bind(&mut g, false);
        let img = g.leaf(rand_image(2, 9), false);
        let features = model.encoder_forward(&mut g, &bind, img).unwrap();
        assert_eq!(g.shape(features.tokens), &[2, 196, 768]);
    }

    #[test]
    fn baseline_matches_only_mewb_up_to_insertion_point() {
        let base_cfg = compact(Variant::Baseline);
        let mut mewb_cfg = compact(Variant::OnlyMewb);
        mewb_cfg.seed = base_cfg.seed;
        let (base, base_store) = Model::build(&base_cfg).unwrap();
        let (mewb, mewb_store) = Model::build(&mewb_cfg).unwrap();

        let img = rand_image(1, 11);
        let mut g1 = Graph::new();
        let b1 = base_store.bind(&mut g1, false);
        let i1 = g1.leaf(img.clone(), false);
        let t1 = base.forward_traced(&mut g1, &b1, i1).unwrap();

        let mut g2 = Graph::new();
        let b2 = mewb_store.bind(&mut g2, false);
        let i2 = g2.leaf(img, false);
        let t2 = mewb.forward_traced(&mut g2, &b2, i2).unwrap();

        // Same seed, same stem draw order: identical up to the stem output.
        assert_eq!(g1.value(t1.stem_out), g2.value(t2.stem_out));
        assert_eq!(g1.value(t1.skips[0]), g2.value(t2.skips[0]));
        // Divergence begins at the inserted block.
        assert!(t2.post_mewb.is_some());
        assert_ne!(g1.value(t1.tokens), g2.value(t2.tokens));
    }

    #[test]
    fn skip_refine_leaves_unconfigured_skips_untouched() {
        let mut cfg = compact(Variant::OnlyDaPlus);
        cfg.skip_da_layers = [1u8].into_iter().collect();
        let (model, store) = Model::build(&cfg).unwrap();
        let mut g = Graph::new();
        let bind = store.bind(&mut g, false);
        let img = g.leaf(rand_image(1, 13), false);
        let trace = model.forward_traced(&mut g, &bind, img).unwrap();
        // Layer 1 (shallowest) refined, 2 and 3 passed through.
        assert_ne!(g.value(trace.skips_refined[0]), g.value(trace.skips[0]));
        assert_eq!(g.value(trace.skips_refined[1]), g.value(trace.skips[1]));
        assert_eq!(g.value(trace.skips_refined[2]), g.value(trace.skips[2]));
    }

    #[test]
    fn baseline_decoder_has_no_spectral_parameters() {
        let (_, store) = Model::build(&compact(Variant::Baseline)).unwrap();
        assert!(store.names().all(|n| !n.contains("mewb")));
        assert!(store.names().all(|n| !n.contains(".da.")));
        let (_, store) = Model::build(&compact(Variant::OnlyMewb)).unwrap();
        assert!(store.names().any(|n| n.contains("dec.stage2.mewb")));
        assert!(store.names().all(|n| !n.contains(".da.")));
    }

    #[test]
    fn parameter_count_ordering() {
        let count = |v| parameter_count(&compact(v)).unwrap();
        let base = count(Variant::Baseline);
        let mewb = count(Variant::OnlyMewb);
        let da = count(Variant::OnlyDaPlus);
        let full = count(Variant::Full);
        assert!(full > mewb, "{full} !> {mewb}");
        assert!(full > da, "{full} !> {da}");
        assert!(mewb > base);
        assert!(da > base);
    }

    #[test]
    fn same_seed_gives_bitwise_identical_parameters() {
        let cfg = compact(Variant::Full);
        let (_, s1) = Model::build(&cfg).unwrap();
        let (_, s2) = Model::build(&cfg).unwrap();
        assert_eq!(s1.len(), s2.len());
        for ((n1, a1), (n2, a2)) in s1.iter().zip(s2.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(
                a1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                a2.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "parameter {n1} differs"
            );
        }
    }

    #[test]
    fn all_four_variants_instantiate_from_one_field_change() {
        for v in Variant::ALL {
            let cfg = compact(v);
            let (model, _) = Model::build(&cfg).unwrap();
            assert_eq!(model.config.variant, v);
        }
    }

    #[test]
    fn weight_file_round_trip_restores_parameters() {
        let cfg = compact(Variant::OnlyMewb);
        let (_, store) = Model::build(&cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("fsg-weights-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("w.params");
        crate::containers::write_params_file(&path, &store).unwrap();

        let mut other = cfg.clone();
        other.seed = cfg.seed + 1;
        let (_, fresh) = Model::build(&other).unwrap();
        assert_ne!(fresh.get("stem.block1.conv1.weight"), store.get("stem.block1.conv1.weight"));
        let (_, loaded) = Model::build_with_weights(&other, Some(&path)).unwrap();
        assert_eq!(
            loaded.get("stem.block1.conv1.weight"),
            store.get("stem.block1.conv1.weight")
        );

        // Malformed weight files are rejected.
        let bad = dir.join("bad.params");
        std::fs::write(&bad, b"junk").unwrap();
        assert!(Model::build_with_weights(&cfg, Some(&bad)).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
