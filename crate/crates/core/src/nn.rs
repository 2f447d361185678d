//! Layers over the autodiff tape: linear, conv, norms, attention,
//! transformer blocks, embeddings, plus weight init and mask helpers.

use ndarray::{Array1, Array2, ArrayD, IxDyn};

use crate::params::{ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

pub const MASK_NEG: f64 = -1e30;

pub fn xavier<T: Scalar>(rng: &mut SplitMix64, shape: &[usize], fan_in: usize, fan_out: usize) -> ArrayD<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut out = ArrayD::<T>::zeros(IxDyn(shape));
    for v in out.iter_mut() {
        *v = T::from_f((rng.next_f64() * 2.0 - 1.0) * limit);
    }
    out
}

pub fn normal_init<T: Scalar>(rng: &mut SplitMix64, shape: &[usize], std: f64) -> ArrayD<T> {
    let mut out = ArrayD::<T>::zeros(IxDyn(shape));
    for v in out.iter_mut() {
        *v = T::from_f(rng.next_normal() * std);
    }
    out
}

pub fn zeros<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(shape), T::one())
}

/// y = x·W + b for row-major sequences [L, din] -> [L, dout].
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        name: &str,
        group: &str,
        din: usize,
        dout: usize,
        bias: bool,
    ) -> Self {
        let w = ps.register(&format!("{name}.w"), group, xavier(rng, &[din, dout], din, dout));
        let b = bias.then(|| ps.register(&format!("{name}.b"), group, zeros::<T>(&[dout])));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(ps, self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let bv = tape.param(ps, b);
                tape.row_bias(y, bv)
            }
            None => y,
        }
    }
}

/// LayerNorm over the last axis with learned gain/bias.
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, group: &str, dim: usize) -> Self {
        let gain = ps.register(&format!("{name}.gain"), group, ones::<T>(&[dim]));
        let bias = ps.register(&format!("{name}.bias"), group, zeros::<T>(&[dim]));
        Self {
            gain,
            bias,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let n = tape.layer_norm_last(x, T::from_f(self.eps));
        let g = tape.param(ps, self.gain);
        let b = tape.param(ps, self.bias);
        tape.row_scale_shift(n, g, b)
    }
}

/// GroupNorm on [C, H, W] with per-channel affine.
pub struct GroupNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        group: &str,
        channels: usize,
        groups: usize,
    ) -> Self {
        let gain = ps.register(&format!("{name}.gain"), group, ones::<T>(&[channels]));
        let bias = ps.register(&format!("{name}.bias"), group, zeros::<T>(&[channels]));
        Self {
            gain,
            bias,
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let n = tape.group_norm(x, self.groups, T::from_f(self.eps));
        let g = tape.param(ps, self.gain);
        let b = tape.param(ps, self.bias);
        tape.channel_scale_shift(n, g, b)
    }

    /// Normalize, then apply spatially-varying scale/shift maps instead of
    /// the per-channel affine (the modulated-decoder path).
    pub fn forward_modulated<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        x: Var,
        scale_map: Var,
        shift_map: Var,
    ) -> Var {
        let n = tape.group_norm(x, self.groups, T::from_f(self.eps));
        let g = tape.param(ps, self.gain);
        let b = tape.param(ps, self.bias);
        let n = tape.channel_scale_shift(n, g, b);
        let one_plus = tape.add_scalar(scale_map, T::one());
        let scaled = tape.mul(n, one_plus);
        tape.add(scaled, shift_map)
    }
}

/// 3x3/1x1 convolution layer with bias.
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        name: &str,
        group: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = cin * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        let w = ps.register(
            &format!("{name}.w"),
            group,
            normal_init(rng, &[cout, cin, k, k], std),
        );
        let b = ps.register(&format!("{name}.b"), group, zeros::<T>(&[cout]));
        Self {
            w,
            b,
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(ps, self.w);
        let y = tape.conv2d(x, w, self.stride, self.pad);
        let b = tape.param(ps, self.b);
        tape.channel_bias(y, b)
    }
}

/// Additive attention bias: shared across heads or one per head.
pub enum AttnBias<'a> {
    None,
    Shared(Var),
    PerHead(&'a [Var]),
}

/// Multi-head attention; query and key/value streams may differ in width.
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        name: &str,
        group: &str,
        d_model: usize,
        d_kv: usize,
        heads: usize,
    ) -> Self {
        assert!(d_model % heads == 0);
        Self {
            wq: Linear::new(ps, rng, &format!("{name}.wq"), group, d_model, d_model, true),
            wk: Linear::new(ps, rng, &format!("{name}.wk"), group, d_kv, d_model, true),
            wv: Linear::new(ps, rng, &format!("{name}.wv"), group, d_kv, d_model, true),
            wo: Linear::new(ps, rng, &format!("{name}.wo"), group, d_model, d_model, true),
            heads,
            d_model,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        q_in: Var,
        kv_in: Var,
        bias: AttnBias<'_>,
    ) -> Var {
        let q = self.wq.forward(tape, ps, q_in);
        let k = self.wk.forward(tape, ps, kv_in);
        let v = self.wv.forward(tape, ps, kv_in);
        let dh = self.d_model / self.heads;
        let scale = T::from_f(1.0 / (dh as f64).sqrt());
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let kt = tape.transpose2(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let scores = match &bias {
                AttnBias::None => scores,
                AttnBias::Shared(m) => tape.add(scores, *m),
                AttnBias::PerHead(ms) => tape.add(scores, ms[h]),
            };
            let attn = tape.softmax_last(scores);
            head_outs.push(tape.matmul(attn, vh));
        }
        let cat = tape.concat_cols(&head_outs);
        self.wo.forward(tape, ps, cat)
    }
}

/// Two-layer GELU feed-forward.
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        name: &str,
        group: &str,
        d_model: usize,
        d_hidden: usize,
    ) -> Self {
        Self {
            w1: Linear::new(ps, rng, &format!("{name}.w1"), group, d_model, d_hidden, true),
            w2: Linear::new(ps, rng, &format!("{name}.w2"), group, d_hidden, d_model, true),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let h = self.w1.forward(tape, ps, x);
        let h = tape.gelu(h);
        self.w2.forward(tape, ps, h)
    }
}

/// Pre-norm self-attention transformer block.
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        name: &str,
        group: &str,
        d_model: usize,
        heads: usize,
        d_hidden: usize,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), group, d_model),
            attn: MultiHeadAttention::new(
                ps,
                rng,
                &format!("{name}.attn"),
                group,
                d_model,
                d_model,
                heads,
            ),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), group, d_model),
            ffn: FeedForward::new(ps, rng, &format!("{name}.ffn"), group, d_model, d_hidden),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        x: Var,
        bias: AttnBias<'_>,
    ) -> Var {
        let n = self.ln1.forward(tape, ps, x);
        let a = self.attn.forward(tape, ps, n, n, bias);
        let x = tape.add(x, a);
        let n = self.ln2.forward(tape, ps, x);
        let f = self.ffn.forward(tape, ps, n);
        tape.add(x, f)
    }
}

/// Token embedding table.
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        name: &str,
        group: &str,
        vocab: usize,
        dim: usize,
    ) -> Self {
        let table = ps.register(
            &format!("{name}.table"),
            group,
            normal_init(rng, &[vocab, dim], 0.02),
        );
        Self { table }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        ids: &[usize],
    ) -> Var {
        let t = tape.param(ps, self.table);
        tape.gather_rows(t, ids)
    }
}

/// Additive causal mask [L, L]: 0 on/below the diagonal, large negative above.
pub fn causal_mask<T: Scalar>(len: usize) -> ArrayD<T> {
    let mut m = Array2::<T>::zeros((len, len));
    let neg = T::from_f(MASK_NEG);
    for i in 0..len {
        for j in i + 1..len {
            m[(i, j)] = neg;
        }
    }
    m.into_dyn()
}

/// Fixed sinusoidal code for a scalar position, `dim` even.
pub fn sincos_code(pos: f64, dim: usize) -> Array1<f64> {
    let mut out = Array1::<f64>::zeros(dim);
    let half = dim / 2;
    for i in 0..half {
        let freq = (10000.0f64).powf(-(i as f64) / half as f64);
        out[2 * i] = (pos * freq).sin();
        out[2 * i + 1] = (pos * freq).cos();
    }
    out
}

/// Fixed 2-D sinusoidal code: first half encodes the row, second the column.
pub fn sincos_code_2d(row: f64, col: f64, dim: usize) -> Array1<f64> {
    assert!(dim % 2 == 0);
    let half = dim / 2;
    let r = sincos_code(row, half);
    let c = sincos_code(col, half);
    let mut out = Array1::<f64>::zeros(dim);
    out.slice_mut(ndarray::s![..half]).assign(&r);
    out.slice_mut(ndarray::s![half..]).assign(&c);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_shapes() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = SplitMix64::new(1);
        let lin = Linear::new(&mut ps, &mut rng, "l", "g", 4, 6, true);
        let mut tape = Tape::new();
        let x = tape.constant(ArrayD::zeros(IxDyn(&[3, 4])));
        let y = lin.forward(&mut tape, &ps, x);
        assert_eq!(tape.shape(y), &[3, 6]);
    }

    #[test]
    fn attention_output_shape_matches_queries() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = SplitMix64::new(2);
        let mha = MultiHeadAttention::new(&mut ps, &mut rng, "a", "g", 8, 12, 2);
        let mut tape = Tape::new();
        let q = tape.constant(normal_init(&mut rng, &[5, 8], 1.0));
        let kv = tape.constant(normal_init(&mut rng, &[7, 12], 1.0));
        let y = mha.forward(&mut tape, &ps, q, kv, AttnBias::None);
        assert_eq!(tape.shape(y), &[5, 8]);
    }

    #[test]
    fn causal_mask_blocks_future() {
        let m = causal_mask::<f64>(3);
        assert_eq!(m[[0, 0]], 0.0);
        assert!(m[[0, 2]] < -1e29);
        assert_eq!(m[[2, 0]], 0.0);
    }

    #[test]
    fn transformer_block_runs() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = SplitMix64::new(3);
        let blk = TransformerBlock::new(&mut ps, &mut rng, "b", "g", 8, 2, 16);
        let mut tape = Tape::new();
        let x = tape.constant(normal_init(&mut rng, &[4, 8], 1.0));
        let m = tape.constant(causal_mask(4));
        let y = blk.forward(&mut tape, &ps, x, AttnBias::Shared(m));
        assert_eq!(tape.shape(y), &[4, 8]);
    }
}
