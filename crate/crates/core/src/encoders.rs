//! Dual-branch visual encoding.
//!
//! A patch-transformer branch encodes the low-resolution view globally; a
//! strided conv stack encodes the high-resolution view into a 4-level
//! pyramid (strides 4/8/16/32). The two streams fuse by cross-attention
//! with a residual MLP, and a zero-initialized gated cross-attention
//! adapter lifts pyramid detail into a small set of learnable queries:
//!
//! ```text
//! h' = h + tanh(gamma) * CrossAttn(h, G_p(f))
//! out = h' + tanh(beta) * FFN(h')
//! ```
//!
//! With both gates at zero the adapter is the identity on queries, exactly.

use ndarray::{Array3, ArrayD, IxDyn};

use crate::nn::{self, AttnBias, Conv2d, FeedForward, GroupNorm, Linear, MultiHeadAttention, TransformerBlock};
use crate::params::{ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum EncodeError {
    #[error("shape: {0}")]
    Shape(String),
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub low_res: usize,
    pub high_res: usize,
    pub patch: usize,
    pub d_model: usize,
    pub vanilla_blocks: usize,
    pub heads: usize,
    pub stem_channels: usize,
    pub level_channels: [usize; 4],
    pub adapter_queries: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            low_res: 64,
            high_res: 128,
            patch: 8,
            d_model: 64,
            vanilla_blocks: 2,
            heads: 4,
            stem_channels: 16,
            level_channels: [32, 64, 96, 128],
            adapter_queries: 16,
        }
    }
}

impl EncoderConfig {
    pub fn low_tokens(&self) -> usize {
        (self.low_res / self.patch) * (self.low_res / self.patch)
    }

    /// Pyramid level spatial sides for the configured high resolution.
    pub fn level_sides(&self) -> [usize; 4] {
        [
            self.high_res / 4,
            self.high_res / 8,
            self.high_res / 16,
            self.high_res / 32,
        ]
    }
}

/// Low-res patch transformer ("global" branch).
pub struct VanillaEncoder {
    patch_embed: Conv2d,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    cfg: EncoderConfig,
}

impl VanillaEncoder {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        group: &str,
        cfg: &EncoderConfig,
    ) -> Self {
        let patch_embed = Conv2d::new(
            ps,
            rng,
            "vanilla.patch_embed",
            group,
            3,
            cfg.d_model,
            cfg.patch,
            cfg.patch,
            0,
        );
        let pos = ps.register(
            "vanilla.pos",
            group,
            nn::normal_init(rng, &[cfg.low_tokens(), cfg.d_model], 0.02),
        );
        let blocks = (0..cfg.vanilla_blocks)
            .map(|i| {
                TransformerBlock::new(
                    ps,
                    rng,
                    &format!("vanilla.block{i}"),
                    group,
                    cfg.d_model,
                    cfg.heads,
                    cfg.d_model * 4,
                )
            })
            .collect();
        Self {
            patch_embed,
            pos,
            blocks,
            cfg: cfg.clone(),
        }
    }

    /// [3, H, W] low-res image variable -> [L, D] token sequence.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        x: Var,
    ) -> Result<Var, EncodeError> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(EncodeError::Shape(format!("expected [3,H,W], got {shape:?}")));
        }
        let (h, w) = (shape[1], shape[2]);
        if h % self.cfg.patch != 0 || w % self.cfg.patch != 0 {
            return Err(EncodeError::Shape(format!(
                "dims {h}x{w} not divisible by patch {}",
                self.cfg.patch
            )));
        }
        let grid = tape.shape(x)[1] / self.cfg.patch;
        let tokens_hw = grid * (w / self.cfg.patch);
        let emb = self.patch_embed.forward(tape, ps, x); // [D, h/p, w/p]
        let d = self.cfg.d_model;
        let flat = tape.reshape(emb, &[d, tokens_hw]);
        let seq = tape.transpose2(flat); // [L, D]
        let pos = tape.param(ps, self.pos);
        let mut h = if tape.shape(seq)[0] == tape.shape(pos)[0] {
            tape.add(seq, pos)
        } else {
            seq
        };
        for blk in &self.blocks {
            h = blk.forward(tape, ps, h, AttnBias::None);
        }
        Ok(h)
    }
}

/// High-res strided conv stack ("detail" branch) producing a 4-level pyramid.
pub struct HierEncoder {
    stem: Conv2d,
    stage_convs: Vec<Conv2d>,
    stage_norms: Vec<GroupNorm>,
}

impl HierEncoder {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        group: &str,
        cfg: &EncoderConfig,
    ) -> Self {
        let stem = Conv2d::new(ps, rng, "hier.stem", group, 3, cfg.stem_channels, 3, 2, 1);
        let mut stage_convs = Vec::new();
        let mut stage_norms = Vec::new();
        let mut prev = cfg.stem_channels;
        for (i, &ch) in cfg.level_channels.iter().enumerate() {
            stage_convs.push(Conv2d::new(
                ps,
                rng,
                &format!("hier.stage{i}"),
                group,
                prev,
                ch,
                3,
                2,
                1,
            ));
            stage_norms.push(GroupNorm::new(ps, &format!("hier.norm{i}"), group, ch, 4));
            prev = ch;
        }
        let _ = cfg;
        Self {
            stem,
            stage_convs,
            stage_norms,
        }
    }

    /// [3, H, W] high-res image variable -> pyramid, finest first.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        x: Var,
    ) -> Result<Vec<Var>, EncodeError> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(EncodeError::Shape(format!("expected [3,H,W], got {shape:?}")));
        }
        if shape[1] % 32 != 0 || shape[2] % 32 != 0 {
            return Err(EncodeError::Shape(format!(
                "dims {}x{} not divisible by 32",
                shape[1], shape[2]
            )));
        }
        let mut h = self.stem.forward(tape, ps, x);
        h = tape.gelu(h);
        let mut levels = Vec::with_capacity(4);
        for (conv, norm) in self.stage_convs.iter().zip(self.stage_norms.iter()) {
            h = conv.forward(tape, ps, h);
            h = norm.forward(tape, ps, h);
            h = tape.gelu(h);
            levels.push(h);
        }
        Ok(levels)
    }
}

pub struct FusedEmbedding {
    /// E'_img, the cross-attended sequence before the residual MLP.
    pub pre_mlp: Var,
    /// E_img = MLP(E'_img) + E'_img.
    pub fused: Var,
}

/// Cross-attention fusion of low-res tokens with the finest pyramid level.
pub struct FusionBlock {
    ln_q: nn::LayerNorm,
    kv_proj: Linear,
    attn: MultiHeadAttention,
    mlp: FeedForward,
    cfg: EncoderConfig,
}

impl FusionBlock {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        group: &str,
        cfg: &EncoderConfig,
    ) -> Self {
        Self {
            ln_q: nn::LayerNorm::new(ps, "fuse.ln_q", group, cfg.d_model),
            kv_proj: Linear::new(
                ps,
                rng,
                "fuse.kv_proj",
                group,
                cfg.level_channels[0],
                cfg.d_model,
                true,
            ),
            attn: MultiHeadAttention::new(
                ps,
                rng,
                "fuse.attn",
                group,
                cfg.d_model,
                cfg.d_model,
                cfg.heads,
            ),
            mlp: FeedForward::new(ps, rng, "fuse.mlp", group, cfg.d_model, cfg.d_model * 4),
            cfg: cfg.clone(),
        }
    }

    /// The finest level carries the most detail and flattens to the
    /// key/value sequence; coarser levels feed the adapter instead.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        low_tokens: Var,
        finest_level: Var,
    ) -> Result<FusedEmbedding, EncodeError> {
        let lv = tape.shape(finest_level).to_vec();
        if lv.len() != 3 || lv[0] != self.cfg.level_channels[0] {
            return Err(EncodeError::Shape(format!(
                "finest level expected [{}, h, w], got {lv:?}",
                self.cfg.level_channels[0]
            )));
        }
        let flat = tape.reshape(finest_level, &[lv[0], lv[1] * lv[2]]);
        let kv_seq = tape.transpose2(flat);
        let kv = self.kv_proj.forward(tape, ps, kv_seq);
        let q = self.ln_q.forward(tape, ps, low_tokens);
        let att = self.attn.forward(tape, ps, q, kv, AttnBias::None);
        let pre_mlp = tape.add(low_tokens, att);
        let m = self.mlp.forward(tape, ps, pre_mlp);
        let fused = tape.add(m, pre_mlp);
        Ok(FusedEmbedding { pre_mlp, fused })
    }
}

/// One adapter layer per pyramid scale, applied coarse to fine.
pub struct GatedAdapter {
    pub initial_queries: ParamId,
    layers: Vec<AdapterLayer>,
    cfg: EncoderConfig,
}

struct AdapterLayer {
    gamma: ParamId,
    beta: ParamId,
    proj: Linear,
    attn: MultiHeadAttention,
    ffn: FeedForward,
}

pub struct AdapterTrace {
    /// Query states after each layer.
    pub per_layer: Vec<Var>,
    /// Final adapter queries handed to the language core.
    pub queries: Var,
}

impl GatedAdapter {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        group: &str,
        cfg: &EncoderConfig,
    ) -> Self {
        let initial_queries = ps.register(
            "adapter.queries",
            group,
            nn::normal_init(rng, &[cfg.adapter_queries, cfg.d_model], 0.02),
        );
        let layers = (0..4)
            .map(|l| {
                // scale j pairs with layer l; gates start at zero so the
                // stack is the identity until training opens it
                let ch = cfg.level_channels[3 - l];
                AdapterLayer {
                    gamma: ps.register(&format!("adapter.layer{l}.gamma"), group, nn::zeros::<T>(&[1])),
                    beta: ps.register(&format!("adapter.layer{l}.beta"), group, nn::zeros::<T>(&[1])),
                    proj: Linear::new(
                        ps,
                        rng,
                        &format!("adapter.layer{l}.proj"),
                        group,
                        ch,
                        cfg.d_model,
                        true,
                    ),
                    attn: MultiHeadAttention::new(
                        ps,
                        rng,
                        &format!("adapter.layer{l}.attn"),
                        group,
                        cfg.d_model,
                        cfg.d_model,
                        cfg.heads,
                    ),
                    ffn: FeedForward::new(
                        ps,
                        rng,
                        &format!("adapter.layer{l}.ffn"),
                        group,
                        cfg.d_model,
                        cfg.d_model * 4,
                    ),
                }
            })
            .collect();
        Self {
            initial_queries,
            layers,
            cfg: cfg.clone(),
        }
    }

    /// Apply one gated layer: queries enhanced with one pyramid scale.
    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        queries: Var,
        level: Var,
        layer: usize,
    ) -> Var {
        let l = &self.layers[layer];
        let lv = tape.shape(level).to_vec();
        let flat = tape.reshape(level, &[lv[0], lv[1] * lv[2]]);
        let kv_seq = tape.transpose2(flat);
        let kv = l.proj.forward(tape, ps, kv_seq);
        let att = l.attn.forward(tape, ps, queries, kv, AttnBias::None);
        let gamma = tape.param(ps, l.gamma);
        let tg = tape.tanh(gamma);
        let scaled = tape.scale_by_var(att, tg);
        let hprime = tape.add(queries, scaled);
        let f = l.ffn.forward(tape, ps, hprime);
        let beta = tape.param(ps, l.beta);
        let tb = tape.tanh(beta);
        let scaled_f = tape.scale_by_var(f, tb);
        tape.add(hprime, scaled_f)
    }

    /// Run all four layers, coarsest scale first.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        pyramid: &[Var],
    ) -> AdapterTrace {
        assert_eq!(pyramid.len(), 4, "adapter expects a 4-level pyramid");
        let mut q = tape.param(ps, self.initial_queries);
        let mut per_layer = Vec::with_capacity(4);
        for l in 0..4 {
            let level = pyramid[3 - l];
            q = self.step(tape, ps, q, level, l);
            per_layer.push(q);
        }
        AdapterTrace {
            per_layer,
            queries: q,
        }
    }

    pub fn query_count(&self) -> usize {
        self.cfg.adapter_queries
    }
}

/// The full visual front end.
pub struct Encoders {
    pub vanilla: VanillaEncoder,
    pub hier: HierEncoder,
    pub fuse: FusionBlock,
    pub adapter: GatedAdapter,
    pub cfg: EncoderConfig,
}

pub struct EncodeOut {
    pub low_tokens: Var,
    /// Finest-first pyramid levels.
    pub pyramid: Vec<Var>,
    pub embedding: FusedEmbedding,
    pub adapter: AdapterTrace,
}

impl Encoders {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut SplitMix64, cfg: &EncoderConfig) -> Self {
        Self {
            vanilla: VanillaEncoder::new(ps, rng, "encoders.vanilla", cfg),
            hier: HierEncoder::new(ps, rng, "encoders.hierarchical", cfg),
            fuse: FusionBlock::new(ps, rng, "encoders.fusion", cfg),
            adapter: GatedAdapter::new(ps, rng, "encoders.adapter", cfg),
            cfg: cfg.clone(),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        low: Var,
        high: Var,
    ) -> Result<EncodeOut, EncodeError> {
        let low_tokens = self.vanilla.forward(tape, ps, low)?;
        let pyramid = self.hier.forward(tape, ps, high)?;
        let embedding = self.fuse.forward(tape, ps, low_tokens, pyramid[0])?;
        let adapter = self.adapter.forward(tape, ps, &pyramid);
        Ok(EncodeOut {
            low_tokens,
            pyramid,
            embedding,
            adapter,
        })
    }
}

/// Convert a channels-first f32 image to the tape scalar type.
pub fn image_to_scalar<T: Scalar>(img: &Array3<f32>) -> ArrayD<T> {
    let mut out = ArrayD::<T>::zeros(IxDyn(img.shape()));
    for (o, &v) in out.iter_mut().zip(img.iter()) {
        *o = T::from_f(v as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn setup() -> (ParamStore<f64>, Encoders, EncoderConfig) {
        let cfg = EncoderConfig::default();
        let mut ps = ParamStore::<f64>::new();
        let mut rng = SplitMix64::new(42);
        let enc = Encoders::new(&mut ps, &mut rng, &cfg);
        (ps, enc, cfg)
    }

    #[test]
    fn vanilla_token_count() {
        let (ps, enc, cfg) = setup();
        let mut tape = Tape::<f64>::no_grad();
        let x = tape.constant(ArrayD::zeros(IxDyn(&[3, cfg.low_res, cfg.low_res])));
        let y = enc.vanilla.forward(&mut tape, &ps, x).unwrap();
        assert_eq!(tape.shape(y), &[cfg.low_tokens(), cfg.d_model]);
    }

    #[test]
    fn vanilla_rejects_bad_dims() {
        let (ps, enc, _) = setup();
        let mut tape = Tape::<f64>::no_grad();
        let x = tape.constant(ArrayD::zeros(IxDyn(&[3, 60, 60])));
        assert!(enc.vanilla.forward(&mut tape, &ps, x).is_err());
    }

    #[test]
    fn pyramid_level_shapes() {
        let (ps, enc, cfg) = setup();
        let mut tape = Tape::<f64>::no_grad();
        let x = tape.constant(ArrayD::zeros(IxDyn(&[3, cfg.high_res, cfg.high_res])));
        let levels = enc.hier.forward(&mut tape, &ps, x).unwrap();
        let sides = cfg.level_sides();
        for (i, lv) in levels.iter().enumerate() {
            assert_eq!(
                tape.shape(*lv),
                &[cfg.level_channels[i], sides[i], sides[i]]
            );
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_pyramid() {
        let (mut ps, enc, cfg) = setup();
        // biases are zero-initialized already; norms' gains are 1, biases 0
        let mut tape = Tape::<f64>::no_grad();
        let x = tape.constant(ArrayD::zeros(IxDyn(&[3, cfg.high_res, cfg.high_res])));
        let levels = enc.hier.forward(&mut tape, &ps, x).unwrap();
        for lv in levels {
            for v in tape.value(lv).iter() {
                assert_eq!(*v, 0.0);
            }
        }
        ps.set_all_trainable();
    }

    #[test]
    fn fusion_residual_identity_with_zero_mlp() {
        let (mut ps, enc, cfg) = setup();
        for name in ["fuse.mlp.w1.w", "fuse.mlp.w1.b", "fuse.mlp.w2.w", "fuse.mlp.w2.b"] {
            let id = ps.id(name).unwrap();
            ps.value_mut(id).fill(0.0);
        }
        let mut rng = SplitMix64::new(7);
        let mut tape = Tape::<f64>::no_grad();
        let low = tape.constant(nn::normal_init(&mut rng, &[3, cfg.low_res, cfg.low_res], 1.0));
        let high = tape.constant(nn::normal_init(&mut rng, &[3, cfg.high_res, cfg.high_res], 1.0));
        let out = enc.forward(&mut tape, &ps, low, high).unwrap();
        let pre = tape.value(out.embedding.pre_mlp);
        let fused = tape.value(out.embedding.fused);
        assert_eq!(pre, fused);
    }

    #[test]
    fn adapter_zero_gates_identity_bit_for_bit() {
        let (ps, enc, cfg) = setup();
        let mut rng = SplitMix64::new(11);
        let mut tape = Tape::<f64>::no_grad();
        let high = tape.constant(nn::normal_init(&mut rng, &[3, cfg.high_res, cfg.high_res], 1.0));
        let pyramid = enc.hier.forward(&mut tape, &ps, high).unwrap();
        let trace = enc.adapter.forward(&mut tape, &ps, &pyramid);
        let initial = ps.value(enc.adapter.initial_queries);
        assert_eq!(initial, tape.value(trace.queries));
        for lay in &trace.per_layer {
            assert_eq!(initial, tape.value(*lay));
        }
    }

    #[test]
    fn adapter_output_shape_per_level() {
        let (ps, enc, cfg) = setup();
        let mut rng = SplitMix64::new(12);
        let mut tape = Tape::<f64>::no_grad();
        let high = tape.constant(nn::normal_init(&mut rng, &[3, cfg.high_res, cfg.high_res], 1.0));
        let pyramid = enc.hier.forward(&mut tape, &ps, high).unwrap();
        let trace = enc.adapter.forward(&mut tape, &ps, &pyramid);
        for lay in &trace.per_layer {
            assert_eq!(tape.shape(*lay), &[cfg.adapter_queries, cfg.d_model]);
        }
    }
}
