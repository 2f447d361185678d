//! Dual vector-quantized visual tokenizer.
//!
//! Semantic branch: fused encoder features on the 8x8 grid are quantized
//! against a frozen random codebook seen through a learnable square
//! projection (the SimVQ arrangement), then decoded by a small transformer
//! with 2-D relative position bias and supervised with a cosine loss
//! against the (detached) original features.
//!
//! Pixel branch: a strided conv encoder produces continuous features on the
//! 16x16 grid; a standard learnable codebook quantizes them with the
//! straight-through estimator. Both token grids decode jointly: the
//! semantic grid is nearest-upsampled to the pixel grid, channel-concatenated,
//! and rendered by a conv decoder whose group norms are spatially modulated
//! by the pixel token grid. Pixel-side supervision is L1 + a frozen-convnet
//! perceptual proxy + a hinge adversarial term from a small patch
//! discriminator.
//!
//! Desk-scale downsampling is 8x (semantic) and 4x (pixel) on 64x64 inputs.
//! The full-scale reference configuration (kept for documentation only) is
//! 28x/16x with codebooks of 32,768 and 98,304 entries.

use ndarray::ArrayD;

use crate::nn::{self, AttnBias, Conv2d, FeedForward, GroupNorm, Linear, LayerNorm, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

/// Full-scale reference constants, documentation only.
pub const FULL_SCALE_K_SEM: usize = 32_768;
pub const FULL_SCALE_K_PIX: usize = 98_304;
pub const FULL_SCALE_DOWN_SEM: usize = 28;
pub const FULL_SCALE_DOWN_PIX: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum TokError {
    #[error("shape: {0}")]
    Shape(String),
    #[error("wrong branch: expected {expected}, got {got}")]
    WrongBranch { expected: &'static str, got: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Semantic,
    Pixel,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Semantic => "semantic",
            Branch::Pixel => "pixel",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TokenizerConfig {
    pub image_res: usize,
    pub sem_grid: usize,
    pub k_sem: usize,
    pub d_sem: usize,
    pub pix_grid: usize,
    pub k_pix: usize,
    pub d_pix: usize,
    pub heads: usize,
    pub w_l1: f64,
    pub w_perceptual: f64,
    pub w_adversarial: f64,
    pub w_cosine: f64,
    pub w_commit: f64,
    pub w_embed: f64,
    /// Fraction of stage-1 steps with the adversarial weight held at zero.
    pub adv_warmup_frac: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            image_res: 64,
            sem_grid: 8,
            k_sem: 512,
            d_sem: 64,
            pix_grid: 16,
            k_pix: 1024,
            d_pix: 32,
            heads: 4,
            w_l1: 1.0,
            w_perceptual: 0.1,
            w_adversarial: 0.1,
            w_cosine: 1.0,
            w_commit: 0.25,
            w_embed: 1.0,
            adv_warmup_frac: 0.3,
        }
    }
}

/// Discrete token grid with its embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub branch: Branch,
    pub h: usize,
    pub w: usize,
    pub indices: Vec<usize>,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Integer-matrix rendering in the annotation text format.
    pub fn render(&self) -> String {
        let mut out = format!(
            "tokens branch={} h={} w={}\n",
            self.branch.name(),
            self.h,
            self.w
        );
        for r in 0..self.h {
            let row: Vec<String> = (0..self.w)
                .map(|c| self.indices[r * self.w + c].to_string())
                .collect();
            out.push_str("row ");
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Result of quantizing a feature sequence on the tape.
pub struct QuantOut {
    /// Straight-through variable: forward value is z_q, backward passes
    /// gradients to the encoder features untouched.
    pub st: Var,
    /// Gathered codebook rows (gradient flows into projection/codebook).
    pub zq: Var,
    /// Original (pre-quantization) feature variable.
    pub features: Var,
    pub grid: TokenGrid,
}

/// Nearest-neighbor assignment under Euclidean distance, computed with the
/// |x|^2 - 2 x.c + |c|^2 expansion over the whole table.
fn nearest_indices<T: Scalar>(features: &ArrayD<T>, table: &ArrayD<T>) -> Vec<usize> {
    let f = features
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("features 2-D");
    let t = table
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("table 2-D");
    assert_eq!(f.ncols(), t.ncols(), "quantizer dim mismatch");
    let prod = f.dot(&t.t()); // [L, K]
    let tnorm: Vec<T> = t
        .rows()
        .into_iter()
        .map(|r| r.fold(T::zero(), |a, &v| a + v * v))
        .collect();
    let two = T::from_f(2.0);
    let mut out = Vec::with_capacity(f.nrows());
    for i in 0..f.nrows() {
        let mut best = 0usize;
        let mut best_d = T::infinity();
        for k in 0..t.nrows() {
            let d = tnorm[k] - two * prod[(i, k)];
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        out.push(best);
    }
    out
}

/// Pixel-branch conv encoder, image [3, R, R] -> features [d_pix, R/4, R/4].
pub struct PixEncoder {
    c1: Conv2d,
    c2: Conv2d,
    n2: GroupNorm,
    c3: Conv2d,
}

impl PixEncoder {
    fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut SplitMix64, group: &str, d_pix: usize) -> Self {
        Self {
            c1: Conv2d::new(ps, rng, "pixenc.c1", group, 3, 32, 3, 2, 1),
            c2: Conv2d::new(ps, rng, "pixenc.c2", group, 32, 64, 3, 2, 1),
            n2: GroupNorm::new(ps, "pixenc.n2", group, 64, 4),
            c3: Conv2d::new(ps, rng, "pixenc.c3", group, 64, d_pix, 3, 1, 1),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ps: &ParamStore<T>, img: Var) -> Var {
        let h = self.c1.forward(tape, ps, img);
        let h = tape.gelu(h);
        let h = self.c2.forward(tape, ps, h);
        let h = self.n2.forward(tape, ps, h);
        let h = tape.gelu(h);
        self.c3.forward(tape, ps, h)
    }
}

/// Semantic token decoder: 4 attention blocks with learned 2-D relative
/// position bias over the semantic grid.
pub struct SemDecoder {
    blocks: Vec<SemBlock>,
    out: Linear,
    grid: usize,
    heads: usize,
}

struct SemBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    rel_bias: ParamId,
    ln2: LayerNorm,
    ffn: FeedForward,
}

impl SemDecoder {
    fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        group: &str,
        cfg: &TokenizerConfig,
    ) -> Self {
        let side = 2 * cfg.sem_grid - 1;
        let blocks = (0..4)
            .map(|i| SemBlock {
                ln1: LayerNorm::new(ps, &format!("semdec.b{i}.ln1"), group, cfg.d_sem),
                attn: MultiHeadAttention::new(
                    ps,
                    rng,
                    &format!("semdec.b{i}.attn"),
                    group,
                    cfg.d_sem,
                    cfg.d_sem,
                    cfg.heads,
                ),
                rel_bias: ps.register(
                    &format!("semdec.b{i}.rel_bias"),
                    group,
                    nn::zeros::<T>(&[side * side, cfg.heads]),
                ),
                ln2: LayerNorm::new(ps, &format!("semdec.b{i}.ln2"), group, cfg.d_sem),
                ffn: FeedForward::new(
                    ps,
                    rng,
                    &format!("semdec.b{i}.ffn"),
                    group,
                    cfg.d_sem,
                    cfg.d_sem * 4,
                ),
            })
            .collect();
        Self {
            blocks,
            out: Linear::new(ps, rng, "semdec.out", group, cfg.d_sem, cfg.d_sem, true),
            grid: cfg.sem_grid,
            heads: cfg.heads,
        }
    }

    fn rel_indices(&self) -> Vec<usize> {
        let g = self.grid;
        let side = 2 * g - 1;
        let mut idx = Vec::with_capacity(g * g * g * g);
        for a in 0..g * g {
            let (ay, ax) = (a / g, a % g);
            for b in 0..g * g {
                let (by, bx) = (b / g, b % g);
                let dy = (ay as isize - by as isize + g as isize - 1) as usize;
                let dx = (ax as isize - bx as isize + g as isize - 1) as usize;
                idx.push(dy * side + dx);
            }
        }
        idx
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ps: &ParamStore<T>, tokens: Var) -> Var {
        let l = self.grid * self.grid;
        assert_eq!(tape.shape(tokens)[0], l, "semantic grid length");
        let rel = self.rel_indices();
        let mut h = tokens;
        for blk in &self.blocks {
            let table = tape.param(ps, blk.rel_bias);
            let gathered = tape.gather_rows(table, &rel); // [L*L, heads]
            let biases: Vec<Var> = (0..self.heads)
                .map(|hh| {
                    let col = tape.slice_cols(gathered, hh, 1);
                    tape.reshape(col, &[l, l])
                })
                .collect();
            let n = blk.ln1.forward(tape, ps, h);
            let a = blk.attn.forward(tape, ps, n, n, AttnBias::PerHead(&biases));
            h = tape.add(h, a);
            let n = blk.ln2.forward(tape, ps, h);
            let f = blk.ffn.forward(tape, ps, n);
            h = tape.add(h, f);
        }
        self.out.forward(tape, ps, h)
    }
}

/// Joint image decoder with spatially modulated group norms.
pub struct JointDecoder {
    c1: Conv2d,
    n1: GroupNorm,
    m1: Conv2d,
    c2: Conv2d,
    n2: GroupNorm,
    m2: Conv2d,
    c3: Conv2d,
    n3: GroupNorm,
    m3: Conv2d,
    out: Conv2d,
    d_pix: usize,
}

impl JointDecoder {
    fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        group: &str,
        cfg: &TokenizerConfig,
    ) -> Self {
        let cin = cfg.d_sem + cfg.d_pix;
        Self {
            c1: Conv2d::new(ps, rng, "jointdec.c1", group, cin, 64, 3, 1, 1),
            n1: GroupNorm::new(ps, "jointdec.n1", group, 64, 4),
            m1: Conv2d::new(ps, rng, "jointdec.m1", group, cfg.d_pix, 128, 1, 1, 0),
            c2: Conv2d::new(ps, rng, "jointdec.c2", group, 64, 32, 3, 1, 1),
            n2: GroupNorm::new(ps, "jointdec.n2", group, 32, 4),
            m2: Conv2d::new(ps, rng, "jointdec.m2", group, cfg.d_pix, 64, 1, 1, 0),
            c3: Conv2d::new(ps, rng, "jointdec.c3", group, 32, 24, 3, 1, 1),
            n3: GroupNorm::new(ps, "jointdec.n3", group, 24, 4),
            m3: Conv2d::new(ps, rng, "jointdec.m3", group, cfg.d_pix, 48, 1, 1, 0),
            out: Conv2d::new(ps, rng, "jointdec.out", group, 24, 3, 3, 1, 1),
            d_pix: cfg.d_pix,
        }
    }

    /// Modulation maps (scale, shift) for `channels` at `factor`x the pixel
    /// grid resolution, predicted from the pixel token embedding grid.
    fn modulation<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        conv: &Conv2d,
        zq_pix_grid: Var,
        channels: usize,
        factor: usize,
    ) -> (Var, Var) {
        let up = if factor == 1 {
            zq_pix_grid
        } else {
            tape.upsample_nearest(zq_pix_grid, factor)
        };
        let maps = conv.forward(tape, ps, up); // [2*channels, H, W]
        let s = tape.shape(maps).to_vec();
        let flat = tape.reshape(maps, &[s[0], s[1] * s[2]]);
        let scale_idx: Vec<usize> = (0..channels).collect();
        let shift_idx: Vec<usize> = (channels..2 * channels).collect();
        let scale_f = tape.gather_rows(flat, &scale_idx);
        let shift_f = tape.gather_rows(flat, &shift_idx);
        let scale = tape.reshape(scale_f, &[channels, s[1], s[2]]);
        let shift = tape.reshape(shift_f, &[channels, s[1], s[2]]);
        (scale, shift)
    }

    /// sem grid [d_sem, g, g] (nearest-upsampled to the pixel grid by the
    /// caller contract), pix grid [d_pix, p, p] -> RGB image in [0, 1].
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        sem_up: Var,
        pix_grid: Var,
    ) -> Var {
        let sp = tape.shape(sem_up).to_vec();
        let pp = tape.shape(pix_grid).to_vec();
        assert_eq!(&sp[1..], &pp[1..], "sem grid must be upsampled to pixel grid");
        assert_eq!(pp[0], self.d_pix);
        // channel concat via [C, HW] row concat
        let sflat = tape.reshape(sem_up, &[sp[0], sp[1] * sp[2]]);
        let pflat = tape.reshape(pix_grid, &[pp[0], pp[1] * pp[2]]);
        let cat = tape.concat_rows(&[sflat, pflat]);
        let x = tape.reshape(cat, &[sp[0] + pp[0], sp[1], sp[2]]);

        let h = self.c1.forward(tape, ps, x);
        let (s1, b1) = self.modulation(tape, ps, &self.m1, pix_grid, 64, 1);
        let h = self.n1.forward_modulated(tape, ps, h, s1, b1);
        let h = tape.gelu(h);
        let h = tape.upsample_nearest(h, 2);

        let h = self.c2.forward(tape, ps, h);
        let (s2, b2) = self.modulation(tape, ps, &self.m2, pix_grid, 32, 2);
        let h = self.n2.forward_modulated(tape, ps, h, s2, b2);
        let h = tape.gelu(h);
        let h = tape.upsample_nearest(h, 2);

        let h = self.c3.forward(tape, ps, h);
        let (s3, b3) = self.modulation(tape, ps, &self.m3, pix_grid, 24, 4);
        let h = self.n3.forward_modulated(tape, ps, h, s3, b3);
        let h = tape.gelu(h);
        let h = self.out.forward(tape, ps, h);
        tape.sigmoid(h)
    }
}

/// 3-layer patch discriminator with hinge objectives.
pub struct Discriminator {
    c1: Conv2d,
    c2: Conv2d,
    n2: GroupNorm,
    c3: Conv2d,
}

impl Discriminator {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut SplitMix64, group: &str) -> Self {
        Self {
            c1: Conv2d::new(ps, rng, "disc.c1", group, 3, 32, 3, 2, 1),
            c2: Conv2d::new(ps, rng, "disc.c2", group, 32, 64, 3, 2, 1),
            n2: GroupNorm::new(ps, "disc.n2", group, 64, 4),
            c3: Conv2d::new(ps, rng, "disc.c3", group, 64, 1, 3, 1, 1),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ps: &ParamStore<T>, img: Var) -> Var {
        let h = self.c1.forward(tape, ps, img);
        let h = tape.gelu(h);
        let h = self.c2.forward(tape, ps, h);
        let h = self.n2.forward(tape, ps, h);
        let h = tape.gelu(h);
        self.c3.forward(tape, ps, h)
    }

    /// Generator-side hinge: mean(max(0, 1 - D(fake))). Zero when the
    /// discriminator scores every fake patch at +1 or above.
    pub fn generator_hinge<T: Scalar>(&self, tape: &mut Tape<T>, fake_logits: Var) -> Var {
        let neg = tape.neg(fake_logits);
        let one_minus = tape.add_scalar(neg, T::one());
        let r = tape.relu(one_minus);
        tape.mean_all(r)
    }

    /// Discriminator-side hinge: mean(max(0,1-D(real))) + mean(max(0,1+D(fake))).
    pub fn discriminator_hinge<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        real_logits: Var,
        fake_logits: Var,
    ) -> Var {
        let nr = tape.neg(real_logits);
        let a = tape.add_scalar(nr, T::one());
        let a = tape.relu(a);
        let a = tape.mean_all(a);
        let b = tape.add_scalar(fake_logits, T::one());
        let b = tape.relu(b);
        let b = tape.mean_all(b);
        tape.add(a, b)
    }
}

/// Frozen random conv net for the perceptual proxy distance.
pub struct PerceptualNet {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
}

impl PerceptualNet {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut SplitMix64, group: &str) -> Self {
        Self {
            c1: Conv2d::new(ps, rng, "perc.c1", group, 3, 16, 3, 2, 1),
            c2: Conv2d::new(ps, rng, "perc.c2", group, 16, 32, 3, 2, 1),
            c3: Conv2d::new(ps, rng, "perc.c3", group, 32, 32, 3, 1, 1),
        }
    }

    pub fn features<T: Scalar>(&self, tape: &mut Tape<T>, ps: &ParamStore<T>, img: Var) -> Var {
        let h = self.c1.forward(tape, ps, img);
        let h = tape.gelu(h);
        let h = self.c2.forward(tape, ps, h);
        let h = tape.gelu(h);
        self.c3.forward(tape, ps, h)
    }
}

/// Loss components of one tokenizer training step.
pub struct TokenizerLossBundle {
    pub cosine: Var,
    pub l1: Var,
    pub perceptual: Var,
    pub adversarial: Var,
    pub commitment: Var,
    pub total: Var,
}

pub struct DualTokenizer {
    pub cfg: TokenizerConfig,
    pub sem_codebook: ParamId,
    pub sem_projection: ParamId,
    pub sem_decoder: SemDecoder,
    pub pix_encoder: PixEncoder,
    pub pix_codebook: ParamId,
    pub joint_decoder: JointDecoder,
}

impl DualTokenizer {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut SplitMix64, cfg: &TokenizerConfig) -> Self {
        // the semantic codebook is frozen by construction: its group is
        // never listed trainable by any stage plan
        let sem_codebook = ps.register(
            "semcb.entries",
            "tokenizer.sem_codebook",
            nn::normal_init(rng, &[cfg.k_sem, cfg.d_sem], 1.0),
        );
        let sem_projection = {
            let mut eye = nn::zeros::<T>(&[cfg.d_sem, cfg.d_sem]);
            for i in 0..cfg.d_sem {
                eye[[i, i]] = T::one();
            }
            ps.register("semcb.projection", "tokenizer.semantic", eye)
        };
        let sem_decoder = SemDecoder::new(ps, rng, "tokenizer.semantic", cfg);
        let pix_encoder = PixEncoder::new(ps, rng, "tokenizer.pixel", cfg.d_pix);
        let pix_codebook = ps.register(
            "pixcb.entries",
            "tokenizer.pixel",
            nn::normal_init(rng, &[cfg.k_pix, cfg.d_pix], 0.5),
        );
        let joint_decoder = JointDecoder::new(ps, rng, "tokenizer.pixel", cfg);
        Self {
            cfg: cfg.clone(),
            sem_codebook,
            sem_projection,
            sem_decoder,
            pix_encoder,
            pix_codebook,
            joint_decoder,
        }
    }

    /// Projected semantic codebook (frozen entries through the learnable map).
    pub fn projected_sem_codebook<T: Scalar>(&self, tape: &mut Tape<T>, ps: &ParamStore<T>) -> Var {
        let cb = tape.param(ps, self.sem_codebook);
        let proj = tape.param(ps, self.sem_projection);
        tape.matmul(cb, proj)
    }

    /// Quantize fused features arranged as the semantic grid.
    pub fn semantic_quantize<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        features: Var,
        usage: Option<&mut Vec<u64>>,
    ) -> Result<QuantOut, TokError> {
        let shape = tape.shape(features).to_vec();
        let g = self.cfg.sem_grid;
        if shape.len() != 2 || shape[0] != g * g || shape[1] != self.cfg.d_sem {
            return Err(TokError::Shape(format!(
                "semantic features expected [{}, {}], got {shape:?}",
                g * g,
                self.cfg.d_sem
            )));
        }
        let table = self.projected_sem_codebook(tape, ps);
        let indices = nearest_indices(tape.value(features), tape.value(table));
        if let Some(counts) = usage {
            for &i in &indices {
                counts[i] += 1;
            }
        }
        let zq = tape.gather_rows(table, &indices);
        let st = straight_through(tape, features, zq);
        Ok(QuantOut {
            st,
            zq,
            features,
            grid: TokenGrid {
                branch: Branch::Semantic,
                h: g,
                w: g,
                indices,
            },
        })
    }

    /// Encode an image with the pixel branch and quantize.
    pub fn pixel_quantize<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        image: Var,
        usage: Option<&mut Vec<u64>>,
    ) -> Result<(QuantOut, Var), TokError> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 3 || shape[0] != 3 || shape[1] != self.cfg.image_res {
            return Err(TokError::Shape(format!(
                "pixel branch expects [3, {0}, {0}], got {shape:?}",
                self.cfg.image_res
            )));
        }
        let feat_grid = self.pix_encoder.forward(tape, ps, image); // [d_pix, p, p]
        let p = self.cfg.pix_grid;
        let flat = tape.reshape(feat_grid, &[self.cfg.d_pix, p * p]);
        let features = tape.transpose2(flat); // [L, d_pix]
        let table = tape.param(ps, self.pix_codebook);
        let indices = nearest_indices(tape.value(features), tape.value(table));
        if let Some(counts) = usage {
            for &i in &indices {
                counts[i] += 1;
            }
        }
        let zq = tape.gather_rows(table, &indices);
        let st = straight_through(tape, features, zq);
        Ok((
            QuantOut {
                st,
                zq,
                features,
                grid: TokenGrid {
                    branch: Branch::Pixel,
                    h: p,
                    w: p,
                    indices,
                },
            },
            feat_grid,
        ))
    }

    /// Decode quantized semantic tokens back to feature space.
    pub fn semantic_decode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        quant: &QuantOut,
    ) -> Result<Var, TokError> {
        if quant.grid.branch != Branch::Semantic {
            return Err(TokError::WrongBranch {
                expected: "semantic",
                got: quant.grid.branch.name(),
            });
        }
        Ok(self.sem_decoder.forward(tape, ps, quant.st))
    }

    /// Embedding grids from stored indices (used by the generation path and
    /// the z_q consistency check).
    pub fn embed_indices<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        grid: &TokenGrid,
    ) -> Var {
        let table = match grid.branch {
            Branch::Semantic => self.projected_sem_codebook(tape, ps),
            Branch::Pixel => tape.param(ps, self.pix_codebook),
        };
        let rows = tape.gather_rows(table, &grid.indices);
        let d = tape.shape(rows)[1];
        let t = tape.transpose2(rows);
        tape.reshape(t, &[d, grid.h, grid.w])
    }

    /// Joint reconstruction from the two straight-through token sequences.
    pub fn joint_decode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        sem_st: Var,
        pix_st: Var,
    ) -> Result<Var, TokError> {
        let g = self.cfg.sem_grid;
        let p = self.cfg.pix_grid;
        if p % g != 0 {
            return Err(TokError::Shape("pixel grid must be a multiple of the semantic grid".into()));
        }
        let semt = tape.transpose2(sem_st);
        let sem_grid = tape.reshape(semt, &[self.cfg.d_sem, g, g]);
        let sem_up = tape.upsample_nearest(sem_grid, p / g);
        let pixt = tape.transpose2(pix_st);
        let pix_grid = tape.reshape(pixt, &[self.cfg.d_pix, p, p]);
        Ok(self.joint_decoder.forward(tape, ps, sem_up, pix_grid))
    }

    /// Assemble the loss bundle for one sample:
    /// total = w_cos*cosine + w_l1*l1 + w_perc*perceptual + adv_weight*adversarial + commitment.
    #[allow(clippy::too_many_arguments)]
    pub fn tokenizer_losses<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        original_image: Var,
        original_features: Var,
        reconstruction: Var,
        decoded_features: Var,
        fake_logits: Var,
        disc: &Discriminator,
        perc: &PerceptualNet,
        quants: (&QuantOut, &QuantOut),
        adv_weight: f64,
    ) -> TokenizerLossBundle {
        let target_feat = tape.detach(original_features);
        let cosine = cosine_loss(tape, decoded_features, target_feat);
        let img_const = tape.detach(original_image);
        let l1 = tape.l1_mean(reconstruction, img_const);
        let pf_rec = perc.features(tape, ps, reconstruction);
        let pf_orig = perc.features(tape, ps, img_const);
        let pf_orig = tape.detach(pf_orig);
        let perceptual = tape.mse_mean(pf_rec, pf_orig);
        let adversarial = disc.generator_hinge(tape, fake_logits);
        let commitment = vq_terms(tape, quants.0, self.cfg.w_commit, self.cfg.w_embed);
        let commit_pix = vq_terms(tape, quants.1, self.cfg.w_commit, self.cfg.w_embed);
        let commitment = tape.add(commitment, commit_pix);
        let mut total = tape.scale(cosine, T::from_f(self.cfg.w_cosine));
        let l1w = tape.scale(l1, T::from_f(self.cfg.w_l1));
        total = tape.add(total, l1w);
        let percw = tape.scale(perceptual, T::from_f(self.cfg.w_perceptual));
        total = tape.add(total, percw);
        let advw = tape.scale(adversarial, T::from_f(adv_weight));
        total = tape.add(total, advw);
        total = tape.add(total, commitment);
        TokenizerLossBundle {
            cosine,
            l1,
            perceptual,
            adversarial,
            commitment,
            total,
        }
    }
}

/// Forward = z_q, backward = identity into the features.
fn straight_through<T: Scalar>(tape: &mut Tape<T>, features: Var, zq: Var) -> Var {
    let diff = {
        let f = tape.value(features);
        let q = tape.value(zq);
        q - f
    };
    let c = tape.constant(diff);
    tape.add(features, c)
}

/// Commitment + embedding VQ terms: w_c * |x - sg(zq)|^2 + w_e * |sg(x) - zq|^2.
fn vq_terms<T: Scalar>(tape: &mut Tape<T>, q: &QuantOut, w_commit: f64, w_embed: f64) -> Var {
    let zq_const = tape.detach(q.zq);
    let commit = tape.mse_mean(q.features, zq_const);
    let x_const = tape.detach(q.features);
    let embed = tape.mse_mean(q.zq, x_const);
    let a = tape.scale(commit, T::from_f(w_commit));
    let b = tape.scale(embed, T::from_f(w_embed));
    tape.add(a, b)
}

/// Mean over rows of (1 - cos(a_i, b_i)).
pub fn cosine_loss<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Var {
    let prod = tape.mul(a, b);
    let dot = tape.sum_last(prod);
    let a2 = tape.square(a);
    let na2 = tape.sum_last(a2);
    let b2 = tape.square(b);
    let nb2 = tape.sum_last(b2);
    let na = tape.sqrt(na2);
    let nb = tape.sqrt(nb2);
    let denom0 = tape.mul(na, nb);
    let denom = tape.add_scalar(denom0, T::from_f(1e-12));
    let cos = tape.div(dot, denom);
    let one_minus = tape.affine(cos, -T::one(), T::one());
    tape.mean_all(one_minus)
}
