//! Reverse-mode autodiff over dynamic-dimension `ndarray` tensors.
//!
//! A [`Tape`] records one forward computation; `backward` walks it in
//! reverse. Nodes are append-only so parent indices are always smaller than
//! child indices, which makes the reverse sweep a plain loop. Parameters
//! live outside the tape in a [`crate::params::ParamStore`] and are copied
//! in as leaves each forward pass; after `backward`,
//! [`Tape::scatter_param_grads`] accumulates leaf gradients back into the
//! store.
//!
//! Everything is generic over [`Scalar`] so models train at f32 and are
//! gradient-checked at f64 from the same code path.

use ndarray::{concatenate, s, Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Gelu,
    Tanh,
    Sigmoid,
    Exp,
    Ln,
    Sqrt,
    Square,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T: Scalar> {
    Leaf,
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    /// mul * x + add, elementwise with scalar constants.
    AffineScalar {
        a: usize,
        mul: T,
    },
    /// x * s where `s` is a single-element tracked variable.
    ScaleByScalarVar {
        a: usize,
        s: usize,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Transpose2 {
        a: usize,
    },
    Reshape {
        a: usize,
        from: Vec<usize>,
    },
    SliceCols {
        a: usize,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<usize>,
    },
    SumAll {
        a: usize,
    },
    MeanAll {
        a: usize,
    },
    SumLast {
        a: usize,
    },
    SoftmaxLast {
        a: usize,
    },
    /// x[.., D] + bias[D]
    RowBias {
        a: usize,
        bias: usize,
    },
    /// x[.., D] * gain[D] + bias[D]
    RowScaleShift {
        a: usize,
        gain: usize,
        bias: usize,
    },
    /// x[C, H, W] + bias[C]
    ChannelBias {
        a: usize,
        bias: usize,
    },
    /// x[C, H, W] * gain[C] + bias[C]
    ChannelScaleShift {
        a: usize,
        gain: usize,
        bias: usize,
    },
    LayerNormLast {
        a: usize,
        rstd: Array1<T>,
    },
    GroupNorm {
        a: usize,
        groups: usize,
        rstd: Array1<T>,
    },
    Conv2d {
        a: usize,
        w: usize,
        stride: usize,
        pad: usize,
        cols: Array2<T>,
    },
    UpsampleNearest {
        a: usize,
        factor: usize,
    },
    UpsampleBilinear {
        a: usize,
        factor: usize,
    },
    AvgPool {
        a: usize,
        win: usize,
    },
    GatherRows {
        a: usize,
        indices: Vec<usize>,
    },
    /// Mean over supervised rows of -log softmax(logits)[target].
    /// `usize::MAX` marks unsupervised rows. `probs` caches the softmax.
    CeMean {
        logits: usize,
        targets: Vec<usize>,
        probs: Array2<T>,
    },
    /// Mean over elements of max(x,0) - x*t + ln(1 + exp(-|x|)).
    BceLogitsMean {
        logits: usize,
        target: ArrayD<T>,
    },
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    grad: Option<ArrayD<T>>,
    op: Op<T>,
    needs_grad: bool,
    keep_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    param_leaves: Vec<(usize, ParamId)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            param_leaves: Vec::new(),
        }
    }

    /// A tape that records values only; `backward` is unavailable.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
            param_leaves: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, needs_grad: bool, keep_grad: bool) -> Var {
        self.nodes.push(Node {
            value: standardize(value),
            grad: None,
            op,
            needs_grad: needs_grad && self.grad_enabled,
            keep_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar_value on non-scalar");
        *val.iter().next().unwrap()
    }

    /// Gradient of a kept leaf after `backward`.
    pub fn grad(&self, v: Var) -> Option<&ArrayD<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Untracked constant.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, false, false)
    }

    /// Tracked leaf (gradient retained after backward).
    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, true, true)
    }

    /// Copy a parameter onto the tape. Tracked only while the parameter is
    /// trainable, which is how stage freezing excludes frozen groups from
    /// gradient computation entirely.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        let v = self.push(store.value(id).clone(), Op::Leaf, trainable, trainable);
        if trainable && self.grad_enabled {
            self.param_leaves.push((v.0, id));
        }
        v
    }

    /// Value copy with gradient flow cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let val = self.nodes[v.0].value.clone();
        self.constant(val)
    }

    // ---- op builders -------------------------------------------------

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let value = {
            let x = &self.nodes[a.0].value;
            x.mapv(|v| unary_forward(kind, v))
        };
        let ng = self.needs(a.0);
        self.push(value, Op::Unary { kind, a: a.0 }, ng, false)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Gelu, a)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Ln, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sqrt, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Var {
        let value = {
            let xa = &self.nodes[a.0].value;
            let xb = &self.nodes[b.0].value;
            assert_eq!(xa.shape(), xb.shape(), "binary op shape mismatch");
            match kind {
                BinaryKind::Add => xa + xb,
                BinaryKind::Sub => xa - xb,
                BinaryKind::Mul => xa * xb,
                BinaryKind::Div => xa / xb,
            }
        };
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::Binary { kind, a: a.0, b: b.0 }, ng, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Div, a, b)
    }

    /// mul * x + add with plain constants.
    pub fn affine(&mut self, a: Var, mul: T, add: T) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| mul * v + add);
        let ng = self.needs(a.0);
        self.push(value, Op::AffineScalar { a: a.0, mul }, ng, false)
    }

    pub fn scale(&mut self, a: Var, mul: T) -> Var {
        self.affine(a, mul, T::zero())
    }

    pub fn add_scalar(&mut self, a: Var, add: T) -> Var {
        self.affine(a, T::one(), add)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -T::one(), T::zero())
    }

    /// Multiply a tensor by a single-element tracked variable.
    pub fn scale_by_var(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.nodes[s.0].value.len(), 1, "scale_by_var needs scalar");
        let sv = *self.nodes[s.0].value.iter().next().unwrap();
        let value = self.nodes[a.0].value.mapv(|v| v * sv);
        let ng = self.needs(a.0) || self.needs(s.0);
        self.push(value, Op::ScaleByScalarVar { a: a.0, s: s.0 }, ng, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = {
            let xa = as2(&self.nodes[a.0].value);
            let xb = as2(&self.nodes[b.0].value);
            assert_eq!(xa.ncols(), xb.nrows(), "matmul inner dim mismatch");
            xa.dot(&xb).into_dyn()
        };
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(value, Op::MatMul { a: a.0, b: b.0 }, ng, false)
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let value = as2(&self.nodes[a.0].value).t().to_owned().into_dyn();
        let ng = self.needs(a.0);
        self.push(value, Op::Transpose2 { a: a.0 }, ng, false)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let from = self.nodes[a.0].value.shape().to_vec();
        let value = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let ng = self.needs(a.0);
        self.push(value, Op::Reshape { a: a.0, from }, ng, false)
    }

    /// Columns [start, start+len) of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = as2(&self.nodes[a.0].value)
            .slice(s![.., start..start + len])
            .to_owned()
            .into_dyn();
        let ng = self.needs(a.0);
        self.push(value, Op::SliceCols { a: a.0, start, len }, ng, false)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| as2(&self.nodes[p.0].value)).collect();
        let value = concatenate(
            Axis(1),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .expect("concat_cols")
        .into_dyn();
        let ng = parts.iter().any(|p| self.needs(p.0));
        let parts = parts.iter().map(|p| p.0).collect();
        self.push(value, Op::ConcatCols { parts }, ng, false)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| as2(&self.nodes[p.0].value)).collect();
        let value = concatenate(
            Axis(0),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .expect("concat_rows")
        .into_dyn();
        let ng = parts.iter().any(|p| self.needs(p.0));
        let parts = parts.iter().map(|p| p.0).collect();
        self.push(value, Op::ConcatRows { parts }, ng, false)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum());
        let ng = self.needs(a.0);
        self.push(value, Op::SumAll { a: a.0 }, ng, false)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let value = ArrayD::from_elem(
            IxDyn(&[]),
            self.nodes[a.0].value.sum() / T::from_f(n as f64),
        );
        let ng = self.needs(a.0);
        self.push(value, Op::MeanAll { a: a.0 }, ng, false)
    }

    /// Sum over the last axis: [.., D] -> [..].
    pub fn sum_last(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let last = x.ndim() - 1;
        let value = x.sum_axis(Axis(last));
        let ng = self.needs(a.0);
        self.push(value, Op::SumLast { a: a.0 }, ng, false)
    }

    /// Row-stable softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let value = softmax_last_arr(&self.nodes[a.0].value);
        let ng = self.needs(a.0);
        self.push(value, Op::SoftmaxLast { a: a.0 }, ng, false)
    }

    pub fn row_bias(&mut self, a: Var, bias: Var) -> Var {
        let value = {
            let x = &self.nodes[a.0].value;
            let b = as1(&self.nodes[bias.0].value);
            let d = *x.shape().last().unwrap();
            assert_eq!(b.len(), d, "row_bias dim mismatch");
            let mut out = x.clone();
            for mut row in out.rows_mut() {
                row += &b;
            }
            out
        };
        let ng = self.needs(a.0) || self.needs(bias.0);
        self.push(value, Op::RowBias { a: a.0, bias: bias.0 }, ng, false)
    }

    pub fn row_scale_shift(&mut self, a: Var, gain: Var, bias: Var) -> Var {
        let value = {
            let x = &self.nodes[a.0].value;
            let gn = as1(&self.nodes[gain.0].value);
            let b = as1(&self.nodes[bias.0].value);
            let d = *x.shape().last().unwrap();
            assert_eq!(gn.len(), d);
            assert_eq!(b.len(), d);
            let mut out = x.clone();
            for mut row in out.rows_mut() {
                row.zip_mut_with(&gn, |r, g| *r *= *g);
                row += &b;
            }
            out
        };
        let ng = self.needs(a.0) || self.needs(gain.0) || self.needs(bias.0);
        self.push(
            value,
            Op::RowScaleShift {
                a: a.0,
                gain: gain.0,
                bias: bias.0,
            },
            ng,
            false,
        )
    }

    pub fn channel_bias(&mut self, a: Var, bias: Var) -> Var {
        let value = {
            let x = as3(&self.nodes[a.0].value);
            let b = as1(&self.nodes[bias.0].value);
            assert_eq!(b.len(), x.shape()[0], "channel_bias dim mismatch");
            let mut out = x.to_owned();
            for (c, mut plane) in out.outer_iter_mut().enumerate() {
                plane += b[c];
            }
            out.into_dyn()
        };
        let ng = self.needs(a.0) || self.needs(bias.0);
        self.push(value, Op::ChannelBias { a: a.0, bias: bias.0 }, ng, false)
    }

    pub fn channel_scale_shift(&mut self, a: Var, gain: Var, bias: Var) -> Var {
        let value = {
            let x = as3(&self.nodes[a.0].value);
            let g = as1(&self.nodes[gain.0].value);
            let b = as1(&self.nodes[bias.0].value);
            assert_eq!(g.len(), x.shape()[0]);
            assert_eq!(b.len(), x.shape()[0]);
            let mut out = x.to_owned();
            for (c, mut plane) in out.outer_iter_mut().enumerate() {
                plane.mapv_inplace(|v| v * g[c] + b[c]);
            }
            out.into_dyn()
        };
        let ng = self.needs(a.0) || self.needs(gain.0) || self.needs(bias.0);
        self.push(
            value,
            Op::ChannelScaleShift {
                a: a.0,
                gain: gain.0,
                bias: bias.0,
            },
            ng,
            false,
        )
    }

    /// Normalize over the last axis (no affine part).
    pub fn layer_norm_last(&mut self, a: Var, eps: T) -> Var {
        let x = &self.nodes[a.0].value;
        let d = *x.shape().last().unwrap();
        let rows = x.len() / d;
        let x2 = x
            .view()
            .into_shape_with_order((rows, d))
            .expect("layer_norm view");
        let mut out = Array2::<T>::zeros((rows, d));
        let mut rstd = Array1::<T>::zeros(rows);
        let dn = T::from_f(d as f64);
        for r in 0..rows {
            let row = x2.row(r);
            let mean = row.sum() / dn;
            let var = row.fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                out[(r, c)] = (row[c] - mean) * rs;
            }
        }
        let value = out.into_dyn().into_shape_with_order(x.raw_dim()).unwrap();
        let ng = self.needs(a.0);
        self.push(value, Op::LayerNormLast { a: a.0, rstd }, ng, false)
    }

    /// Normalize [C, H, W] per channel group (no affine part).
    pub fn group_norm(&mut self, a: Var, groups: usize, eps: T) -> Var {
        let x = as3(&self.nodes[a.0].value);
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert!(c % groups == 0, "groups must divide channels");
        let per = c / groups;
        let mut out = x.to_owned();
        let mut rstd = Array1::<T>::zeros(groups);
        let n = T::from_f((per * h * w) as f64);
        for g in 0..groups {
            let sl = s![g * per..(g + 1) * per, .., ..];
            let block = x.slice(sl);
            let mean = block.sum() / n;
            let var = block.fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[g] = rs;
            out.slice_mut(sl).mapv_inplace(|v| (v - mean) * rs);
        }
        let value = out.into_dyn();
        let ng = self.needs(a.0);
        self.push(
            value,
            Op::GroupNorm {
                a: a.0,
                groups,
                rstd,
            },
            ng,
            false,
        )
    }

    /// 2-D convolution, input [Cin, H, W], weight [Cout, Cin, k, k].
    pub fn conv2d(&mut self, a: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (value, cols) = {
            let x = as3(&self.nodes[a.0].value);
            let wt = &self.nodes[w.0].value;
            assert_eq!(wt.ndim(), 4, "conv weight must be 4-D");
            let (cout, cin, k) = (wt.shape()[0], wt.shape()[1], wt.shape()[2]);
            assert_eq!(wt.shape()[3], k, "square kernels only");
            assert_eq!(x.shape()[0], cin, "conv in-channel mismatch");
            let (h, wd) = (x.shape()[1], x.shape()[2]);
            let ho = (h + 2 * pad - k) / stride + 1;
            let wo = (wd + 2 * pad - k) / stride + 1;
            let wmat = wt
                .view()
                .into_shape_with_order((cout, cin * k * k))
                .unwrap();
            // pointwise convs skip materializing columns
            if k == 1 && stride == 1 && pad == 0 {
                let xflat = x.into_shape_with_order((cin, h * wd)).unwrap();
                let out = wmat.dot(&xflat);
                let value = out.into_shape_with_order(IxDyn(&[cout, ho, wo])).unwrap();
                (value, Array2::zeros((0, 0)))
            } else {
                let cols = im2col(&x, k, stride, pad, ho, wo);
                let out = wmat.dot(&cols);
                let value = out
                    .into_shape_with_order(IxDyn(&[cout, ho, wo]))
                    .unwrap();
                (value, cols)
            }
        };
        let ng = self.needs(a.0) || self.needs(w.0);
        let pointwise = {
            let wt = &self.nodes[w.0].value;
            wt.shape()[2] == 1 && stride == 1 && pad == 0
        };
        // cols are only needed for backward of non-pointwise convs
        let cols = if ng && !pointwise {
            cols
        } else {
            Array2::zeros((0, 0))
        };
        self.push(
            value,
            Op::Conv2d {
                a: a.0,
                w: w.0,
                stride,
                pad,
                cols,
            },
            ng,
            false,
        )
    }

    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Var {
        let x = as3(&self.nodes[a.0].value);
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (ho, wo) = (h * factor, w * factor);
        let mut out = ndarray::Array3::<T>::zeros((c, ho, wo));
        {
            let xs = x.to_slice().expect("upsample standard layout");
            let os = out.as_slice_mut().unwrap();
            for ci in 0..c {
                for i in 0..h {
                    // expand one input row, then replicate it factor times
                    let src = &xs[ci * h * w + i * w..ci * h * w + (i + 1) * w];
                    let row0 = ci * ho * wo + i * factor * wo;
                    for (j, &v) in src.iter().enumerate() {
                        for f in 0..factor {
                            os[row0 + j * factor + f] = v;
                        }
                    }
                    for r in 1..factor {
                        let (a_part, b_part) = os.split_at_mut(row0 + r * wo);
                        b_part[..wo].copy_from_slice(&a_part[row0..row0 + wo]);
                    }
                }
            }
        }
        let ng = self.needs(a.0);
        self.push(
            out.into_dyn(),
            Op::UpsampleNearest { a: a.0, factor },
            ng,
            false,
        )
    }

    /// Bilinear upsample by an integer factor (half-pixel centers).
    pub fn upsample_bilinear(&mut self, a: Var, factor: usize) -> Var {
        let x = as3(&self.nodes[a.0].value);
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (ho, wo) = (h * factor, w * factor);
        let mut out = ndarray::Array3::<T>::zeros((c, ho, wo));
        for i in 0..ho {
            let (i0, i1, wy) = bilinear_axis(i, factor, h);
            for j in 0..wo {
                let (j0, j1, wx) = bilinear_axis(j, factor, w);
                for ci in 0..c {
                    let v00 = x[(ci, i0, j0)].to_f();
                    let v01 = x[(ci, i0, j1)].to_f();
                    let v10 = x[(ci, i1, j0)].to_f();
                    let v11 = x[(ci, i1, j1)].to_f();
                    let v = v00 * (1.0 - wy) * (1.0 - wx)
                        + v01 * (1.0 - wy) * wx
                        + v10 * wy * (1.0 - wx)
                        + v11 * wy * wx;
                    out[(ci, i, j)] = T::from_f(v);
                }
            }
        }
        let ng = self.needs(a.0);
        self.push(
            out.into_dyn(),
            Op::UpsampleBilinear { a: a.0, factor },
            ng,
            false,
        )
    }

    /// Non-overlapping average pooling with window == stride.
    pub fn avg_pool(&mut self, a: Var, win: usize) -> Var {
        let x = as3(&self.nodes[a.0].value);
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert!(h % win == 0 && w % win == 0, "avg_pool window must divide dims");
        let (ho, wo) = (h / win, w / win);
        let inv = T::from_f(1.0 / (win * win) as f64);
        let mut out = ndarray::Array3::<T>::zeros((c, ho, wo));
        {
            let xs = x.to_slice().expect("avg_pool standard layout");
            let os = out.as_slice_mut().unwrap();
            for ci in 0..c {
                for i in 0..ho {
                    let orow = ci * ho * wo + i * wo;
                    for di in 0..win {
                        let xrow = ci * h * w + (i * win + di) * w;
                        for j in 0..wo {
                            let mut a2 = T::zero();
                            for dj in 0..win {
                                a2 += xs[xrow + j * win + dj];
                            }
                            os[orow + j] += a2;
                        }
                    }
                    for j in 0..wo {
                        os[orow + j] *= inv;
                    }
                }
            }
        }
        let ng = self.needs(a.0);
        self.push(out.into_dyn(), Op::AvgPool { a: a.0, win }, ng, false)
    }

    /// Gather rows of a 2-D tensor: out[i] = a[indices[i]].
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let x = as2(&self.nodes[a.0].value);
        let d = x.ncols();
        let mut out = Array2::<T>::zeros((indices.len(), d));
        for (i, &ix) in indices.iter().enumerate() {
            out.row_mut(i).assign(&x.row(ix));
        }
        let ng = self.needs(a.0);
        self.push(
            out.into_dyn(),
            Op::GatherRows {
                a: a.0,
                indices: indices.to_vec(),
            },
            ng,
            false,
        )
    }

    /// Token cross-entropy: mean over supervised rows (target != usize::MAX).
    pub fn ce_mean(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = as2(&self.nodes[logits.0].value);
        assert_eq!(x.nrows(), targets.len(), "ce targets length mismatch");
        let probs2 = softmax_last_arr(&self.nodes[logits.0].value);
        let probs = as2(&probs2).to_owned();
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == usize::MAX {
                continue;
            }
            assert!(t < x.ncols(), "ce target out of vocab");
            total += -(probs[(r, t)].to_f().max(1e-300)).ln();
            count += 1;
        }
        assert!(count > 0, "ce with zero supervised rows");
        let value = ArrayD::from_elem(IxDyn(&[]), T::from_f(total / count as f64));
        let ng = self.needs(logits.0);
        self.push(
            value,
            Op::CeMean {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            ng,
            false,
        )
    }

    /// Numerically stable binary cross-entropy with logits, mean reduction.
    pub fn bce_logits_mean(&mut self, logits: Var, target: &ArrayD<T>) -> Var {
        let x = &self.nodes[logits.0].value;
        assert_eq!(x.shape(), target.shape(), "bce shape mismatch");
        let mut total = 0.0f64;
        for (xv, tv) in x.iter().zip(target.iter()) {
            let xf = xv.to_f();
            let tf = tv.to_f();
            total += xf.max(0.0) - xf * tf + (-xf.abs()).exp().ln_1p();
        }
        let value = ArrayD::from_elem(IxDyn(&[]), T::from_f(total / x.len() as f64));
        let ng = self.needs(logits.0);
        self.push(
            value,
            Op::BceLogitsMean {
                logits: logits.0,
                target: target.clone(),
            },
            ng,
            false,
        )
    }

    /// Mean squared error against another variable.
    pub fn mse_mean(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean_all(sq)
    }

    /// Mean absolute error against another variable.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let ab = self.abs(d);
        self.mean_all(ab)
    }

    // ---- backward -----------------------------------------------------

    pub fn backward(&mut self, root: Var) {
        assert!(self.grad_enabled, "backward on no-grad tape");
        let n = root.0;
        assert_eq!(
            self.nodes[n].value.len(),
            1,
            "backward root must be scalar"
        );
        assert!(self.nodes[n].needs_grad, "root does not require grad");
        self.nodes[n].grad = Some(ArrayD::ones(self.nodes[n].value.raw_dim()));
        for i in (0..=n).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.step_backward(i, &g);
            if self.nodes[i].keep_grad {
                self.nodes[i].grad = Some(g);
            }
        }
    }

    /// Accumulate parameter-leaf gradients into the store.
    pub fn scatter_param_grads(&self, store: &mut ParamStore<T>) {
        for &(node, id) in &self.param_leaves {
            if let Some(g) = &self.nodes[node].grad {
                store.accumulate_grad(id, g);
            }
        }
    }

    fn step_backward(&mut self, i: usize, g: &ArrayD<T>) {
        let (left, right) = self.nodes.split_at_mut(i);
        let node = &right[0];
        let acc = |left: &mut [Node<T>], p: usize, delta: ArrayD<T>| {
            if !left[p].needs_grad {
                return;
            }
            match &mut left[p].grad {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(standardize(delta)),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Unary { kind, a } => {
                let dx = unary_backward(*kind, &left[*a].value, &node.value, g);
                acc(left, *a, dx);
            }
            Op::Binary { kind, a, b } => match kind {
                BinaryKind::Add => {
                    acc(left, *a, g.clone());
                    acc(left, *b, g.clone());
                }
                BinaryKind::Sub => {
                    acc(left, *a, g.clone());
                    acc(left, *b, g.mapv(|v| -v));
                }
                BinaryKind::Mul => {
                    let da = g * &left[*b].value;
                    acc(left, *a, da);
                    let db = g * &left[*a].value;
                    acc(left, *b, db);
                }
                BinaryKind::Div => {
                    let da = g / &left[*b].value;
                    acc(left, *a, da);
                    let bb = &left[*b].value;
                    let db = -(g * &left[*a].value) / (bb * bb);
                    acc(left, *b, db);
                }
            },
            Op::AffineScalar { a, mul } => {
                acc(left, *a, g.mapv(|v| v * *mul));
            }
            Op::ScaleByScalarVar { a, s } => {
                let sv = *left[*s].value.iter().next().unwrap();
                acc(left, *a, g.mapv(|v| v * sv));
                let ds = (g * &left[*a].value).sum();
                acc(
                    left,
                    *s,
                    ArrayD::from_elem(left[*s].value.raw_dim(), ds),
                );
            }
            Op::MatMul { a, b } => {
                let ga = as2(g);
                let da = ga.dot(&as2(&left[*b].value).t()).into_dyn();
                acc(left, *a, da);
                let db = as2(&left[*a].value).t().dot(&as2(g)).into_dyn();
                acc(left, *b, db);
            }
            Op::Transpose2 { a } => {
                acc(left, *a, as2(g).t().to_owned().into_dyn());
            }
            Op::Reshape { a, from } => {
                let d = g
                    .clone()
                    .into_shape_with_order(IxDyn(from))
                    .expect("reshape backward");
                acc(left, *a, d);
            }
            Op::SliceCols { a, start, len } => {
                let mut d = ArrayD::<T>::zeros(left[*a].value.raw_dim());
                {
                    let mut d2 = d
                        .view_mut()
                        .into_dimensionality::<Ix2>()
                        .expect("slice backward");
                    d2.slice_mut(s![.., *start..*start + *len]).assign(&as2(g));
                }
                acc(left, *a, d);
            }
            Op::ConcatCols { parts } => {
                let g2 = as2(g);
                let mut off = 0usize;
                for &p in parts {
                    let w = left[p].value.shape()[1];
                    let d = g2.slice(s![.., off..off + w]).to_owned().into_dyn();
                    acc(left, p, d);
                    off += w;
                }
            }
            Op::ConcatRows { parts } => {
                let g2 = as2(g);
                let mut off = 0usize;
                for &p in parts {
                    let h = left[p].value.shape()[0];
                    let d = g2.slice(s![off..off + h, ..]).to_owned().into_dyn();
                    acc(left, p, d);
                    off += h;
                }
            }
            Op::SumAll { a } => {
                let gv = *g.iter().next().unwrap();
                acc(left, *a, ArrayD::from_elem(left[*a].value.raw_dim(), gv));
            }
            Op::MeanAll { a } => {
                let n = T::from_f(left[*a].value.len() as f64);
                let gv = *g.iter().next().unwrap() / n;
                acc(left, *a, ArrayD::from_elem(left[*a].value.raw_dim(), gv));
            }
            Op::SumLast { a } => {
                let xs = left[*a].value.shape().to_vec();
                let d = *xs.last().unwrap();
                let mut out = ArrayD::<T>::zeros(left[*a].value.raw_dim());
                {
                    let rows = out.len() / d;
                    let mut o2 = out
                        .view_mut()
                        .into_shape_with_order((rows, d))
                        .unwrap();
                    let gflat = g
                        .view()
                        .into_shape_with_order(rows)
                        .expect("sum_last backward");
                    for r in 0..rows {
                        o2.row_mut(r).fill(gflat[r]);
                    }
                }
                acc(left, *a, out);
            }
            Op::SoftmaxLast { a } => {
                // dx = y * (g - sum(g*y, last))
                let y = &node.value;
                let d = *y.shape().last().unwrap();
                let rows = y.len() / d;
                let y2 = y.view().into_shape_with_order((rows, d)).unwrap();
                let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
                let mut out = Array2::<T>::zeros((rows, d));
                for r in 0..rows {
                    let dot = y2
                        .row(r)
                        .iter()
                        .zip(g2.row(r).iter())
                        .fold(T::zero(), |acc2, (&yv, &gv)| acc2 + yv * gv);
                    for c in 0..d {
                        out[(r, c)] = y2[(r, c)] * (g2[(r, c)] - dot);
                    }
                }
                let out = out
                    .into_dyn()
                    .into_shape_with_order(y.raw_dim())
                    .unwrap();
                acc(left, *a, out);
            }
            Op::RowBias { a, bias } => {
                acc(left, *a, g.clone());
                let d = *g.shape().last().unwrap();
                let rows = g.len() / d;
                let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
                let db = g2.sum_axis(Axis(0)).into_dyn();
                acc(left, *bias, db);
            }
            Op::RowScaleShift { a, gain, bias } => {
                let d = *g.shape().last().unwrap();
                let rows = g.len() / d;
                let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
                let (da, dg) = {
                    let x2 = left[*a]
                        .value
                        .view()
                        .into_shape_with_order((rows, d))
                        .unwrap();
                    let gn = as1(&left[*gain].value);
                    let mut da = Array2::<T>::zeros((rows, d));
                    let mut dg = Array1::<T>::zeros(d);
                    for r in 0..rows {
                        for c in 0..d {
                            da[(r, c)] = g2[(r, c)] * gn[c];
                            dg[c] += g2[(r, c)] * x2[(r, c)];
                        }
                    }
                    (
                        da.into_dyn()
                            .into_shape_with_order(left[*a].value.raw_dim())
                            .unwrap(),
                        dg,
                    )
                };
                acc(left, *a, da);
                acc(left, *gain, dg.into_dyn());
                let db = g2.sum_axis(Axis(0)).into_dyn();
                acc(left, *bias, db);
            }
            Op::ChannelBias { a, bias } => {
                acc(left, *a, g.clone());
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let c = g3.shape()[0];
                let mut db = Array1::<T>::zeros(c);
                for (ci, plane) in g3.outer_iter().enumerate() {
                    db[ci] = plane.sum();
                }
                acc(left, *bias, db.into_dyn());
            }
            Op::ChannelScaleShift { a, gain, bias } => {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let c = g3.shape()[0];
                let (da, dg, db) = {
                    let x3 = left[*a]
                        .value
                        .view()
                        .into_dimensionality::<Ix3>()
                        .unwrap();
                    let gn = as1(&left[*gain].value);
                    let mut da = g3.to_owned();
                    for (ci, mut plane) in da.outer_iter_mut().enumerate() {
                        plane.mapv_inplace(|v| v * gn[ci]);
                    }
                    let mut dg = Array1::<T>::zeros(c);
                    let mut db = Array1::<T>::zeros(c);
                    for ci in 0..c {
                        let gp = g3.index_axis(Axis(0), ci);
                        let xp = x3.index_axis(Axis(0), ci);
                        dg[ci] = gp
                            .iter()
                            .zip(xp.iter())
                            .fold(T::zero(), |acc2, (&gv, &xv)| acc2 + gv * xv);
                        db[ci] = gp.sum();
                    }
                    (da, dg, db)
                };
                acc(left, *a, da.into_dyn());
                acc(left, *gain, dg.into_dyn());
                acc(left, *bias, db.into_dyn());
            }
            Op::LayerNormLast { a, rstd, .. } => {
                let y = &node.value;
                let d = *y.shape().last().unwrap();
                let rows = y.len() / d;
                let y2 = y.view().into_shape_with_order((rows, d)).unwrap();
                let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
                let dn = T::from_f(d as f64);
                let mut out = Array2::<T>::zeros((rows, d));
                for r in 0..rows {
                    let gm = g2.row(r).sum() / dn;
                    let gym = g2
                        .row(r)
                        .iter()
                        .zip(y2.row(r).iter())
                        .fold(T::zero(), |acc2, (&gv, &yv)| acc2 + gv * yv)
                        / dn;
                    for c in 0..d {
                        out[(r, c)] = rstd[r] * (g2[(r, c)] - gm - y2[(r, c)] * gym);
                    }
                }
                let out = out
                    .into_dyn()
                    .into_shape_with_order(left[*a].value.raw_dim())
                    .unwrap();
                acc(left, *a, out);
            }
            Op::GroupNorm { a, groups, rstd } => {
                let y = node.value.view().into_dimensionality::<Ix3>().unwrap();
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let (c, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2]);
                let per = c / groups;
                let n = T::from_f((per * h * w) as f64);
                let mut out = ndarray::Array3::<T>::zeros((c, h, w));
                for gi in 0..*groups {
                    let sl = s![gi * per..(gi + 1) * per, .., ..];
                    let yb = y.slice(sl);
                    let gb = g3.slice(sl);
                    let gm = gb.sum() / n;
                    let gym = gb
                        .iter()
                        .zip(yb.iter())
                        .fold(T::zero(), |acc2, (&gv, &yv)| acc2 + gv * yv)
                        / n;
                    let rs = rstd[gi];
                    let mut ob = out.slice_mut(sl);
                    for ((o, &gv), &yv) in ob.iter_mut().zip(gb.iter()).zip(yb.iter()) {
                        *o = rs * (gv - gm - yv * gym);
                    }
                }
                acc(left, *a, out.into_dyn());
            }
            Op::Conv2d {
                a,
                w,
                stride,
                pad,
                cols,
            } => {
                let wt = &left[*w].value;
                let (cout, cin, k) = (wt.shape()[0], wt.shape()[1], wt.shape()[2]);
                let (ho, wo) = (node.value.shape()[1], node.value.shape()[2]);
                let pointwise = k == 1 && *stride == 1 && *pad == 0;
                let gmat = g
                    .view()
                    .into_shape_with_order((cout, ho * wo))
                    .unwrap();
                let (h, wd) = (left[*a].value.shape()[1], left[*a].value.shape()[2]);
                let dw = if left[*w].needs_grad {
                    let dw = if pointwise {
                        let xflat = left[*a]
                            .value
                            .view()
                            .into_shape_with_order((cin, h * wd))
                            .unwrap();
                        gmat.dot(&xflat.t())
                    } else {
                        gmat.dot(&cols.t())
                    };
                    Some(
                        dw.into_shape_with_order(IxDyn(&[cout, cin, k, k]))
                            .unwrap(),
                    )
                } else {
                    None
                };
                let da = if left[*a].needs_grad {
                    let wmat = wt
                        .view()
                        .into_shape_with_order((cout, cin * k * k))
                        .unwrap();
                    let dcols = wmat.t().dot(&gmat);
                    if pointwise {
                        Some(
                            dcols
                                .into_shape_with_order(IxDyn(&[cin, h, wd]))
                                .unwrap(),
                        )
                    } else {
                        Some(col2im(&dcols, cin, h, wd, k, *stride, *pad, ho, wo).into_dyn())
                    }
                } else {
                    None
                };
                if let Some(dw) = dw {
                    acc(left, *w, dw);
                }
                if let Some(da) = da {
                    acc(left, *a, da);
                }
            }
            Op::UpsampleNearest { a, factor } => {
                let shape = left[*a].value.shape();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (ho, wo) = (h * factor, w * factor);
                let mut out = ndarray::Array3::<T>::zeros((c, h, w));
                {
                    let gs = g.as_slice().expect("upsample grad layout");
                    let os = out.as_slice_mut().unwrap();
                    for ci in 0..c {
                        for oi in 0..ho {
                            let grow = ci * ho * wo + oi * wo;
                            let orow = ci * h * w + (oi / factor) * w;
                            for oj in 0..wo {
                                os[orow + oj / factor] += gs[grow + oj];
                            }
                        }
                    }
                }
                acc(left, *a, out.into_dyn());
            }
            Op::UpsampleBilinear { a, factor } => {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let xs = left[*a].value.shape();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (ho, wo) = (h * factor, w * factor);
                let mut out = ndarray::Array3::<T>::zeros((c, h, w));
                for i in 0..ho {
                    let (i0, i1, wy) = bilinear_axis(i, *factor, h);
                    for j in 0..wo {
                        let (j0, j1, wx) = bilinear_axis(j, *factor, w);
                        for ci in 0..c {
                            let gv = g3[(ci, i, j)].to_f();
                            out[(ci, i0, j0)] += T::from_f(gv * (1.0 - wy) * (1.0 - wx));
                            out[(ci, i0, j1)] += T::from_f(gv * (1.0 - wy) * wx);
                            out[(ci, i1, j0)] += T::from_f(gv * wy * (1.0 - wx));
                            out[(ci, i1, j1)] += T::from_f(gv * wy * wx);
                        }
                    }
                }
                acc(left, *a, out.into_dyn());
            }
            Op::AvgPool { a, win } => {
                let shape = left[*a].value.shape();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (ho, wo) = (h / win, w / win);
                let inv = T::from_f(1.0 / (win * win) as f64);
                let mut out = ndarray::Array3::<T>::zeros((c, h, w));
                {
                    let gs = g.as_slice().expect("avg_pool grad layout");
                    let os = out.as_slice_mut().unwrap();
                    for ci in 0..c {
                        for i in 0..h {
                            let grow = ci * ho * wo + (i / win) * wo;
                            let orow = ci * h * w + i * w;
                            for j in 0..w {
                                os[orow + j] = gs[grow + j / win] * inv;
                            }
                        }
                    }
                }
                acc(left, *a, out.into_dyn());
            }
            Op::GatherRows { a, indices } => {
                let g2 = as2(g);
                let mut out = Array2::<T>::zeros((
                    left[*a].value.shape()[0],
                    left[*a].value.shape()[1],
                ));
                for (i, &ix) in indices.iter().enumerate() {
                    let mut row = out.row_mut(ix);
                    row += &g2.row(i);
                }
                acc(left, *a, out.into_dyn());
            }
            Op::CeMean {
                logits,
                targets,
                probs,
            } => {
                let gv = g.iter().next().unwrap().to_f();
                let count = targets.iter().filter(|&&t| t != usize::MAX).count();
                let scale = T::from_f(gv / count as f64);
                let mut out = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    if t == usize::MAX {
                        out.row_mut(r).fill(T::zero());
                    } else {
                        out[(r, t)] -= T::one();
                        out.row_mut(r).mapv_inplace(|v| v * scale);
                    }
                }
                acc(left, *logits, out.into_dyn());
            }
            Op::BceLogitsMean { logits, target } => {
                let gv = g.iter().next().unwrap().to_f();
                let n = target.len() as f64;
                let x = &left[*logits].value;
                let mut out = ArrayD::<T>::zeros(x.raw_dim());
                for ((o, xv), tv) in out.iter_mut().zip(x.iter()).zip(target.iter()) {
                    let sig = 1.0 / (1.0 + (-xv.to_f()).exp());
                    *o = T::from_f((sig - tv.to_f()) * gv / n);
                }
                acc(left, *logits, out);
            }
        }
    }
}

// ---- helpers ---------------------------------------------------------

/// Node values and gradients are kept in standard (C) layout so reshapes
/// are always valid.
fn standardize<T: Scalar>(a: ArrayD<T>) -> ArrayD<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn as1<T: Scalar>(x: &ArrayD<T>) -> ndarray::ArrayView1<'_, T> {
    x.view().into_dimensionality::<Ix1>().expect("expected 1-D")
}

fn as2<T: Scalar>(x: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    x.view().into_dimensionality::<Ix2>().expect("expected 2-D")
}

fn as3<T: Scalar>(x: &ArrayD<T>) -> ndarray::ArrayView3<'_, T> {
    x.view().into_dimensionality::<Ix3>().expect("expected 3-D")
}

fn unary_forward<T: Scalar>(kind: UnaryKind, v: T) -> T {
    match kind {
        UnaryKind::Relu => {
            if v > T::zero() {
                v
            } else {
                T::zero()
            }
        }
        UnaryKind::Gelu => gelu_f(v),
        UnaryKind::Tanh => v.tanh(),
        UnaryKind::Sigmoid => T::one() / (T::one() + (-v).exp()),
        UnaryKind::Exp => v.exp(),
        UnaryKind::Ln => v.ln(),
        UnaryKind::Sqrt => v.sqrt(),
        UnaryKind::Square => v * v,
        UnaryKind::Abs => v.abs(),
    }
}

/// tanh-approximation GELU; the backward uses the exact derivative of this
/// same approximation so finite-difference checks agree.
fn gelu_f<T: Scalar>(x: T) -> T {
    let c = T::from_f(0.7978845608028654); // sqrt(2/pi)
    let k = T::from_f(0.044715);
    let half = T::from_f(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_df<T: Scalar>(x: T) -> T {
    let c = T::from_f(0.7978845608028654);
    let k = T::from_f(0.044715);
    let half = T::from_f(0.5);
    let three = T::from_f(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

fn unary_backward<T: Scalar>(
    kind: UnaryKind,
    x: &ArrayD<T>,
    y: &ArrayD<T>,
    g: &ArrayD<T>,
) -> ArrayD<T> {
    let mut out = g.clone();
    match kind {
        UnaryKind::Relu => out.zip_mut_with(x, |o, &xv| {
            if xv <= T::zero() {
                *o = T::zero()
            }
        }),
        UnaryKind::Gelu => out.zip_mut_with(x, |o, &xv| *o *= gelu_df(xv)),
        UnaryKind::Tanh => out.zip_mut_with(y, |o, &yv| *o *= T::one() - yv * yv),
        UnaryKind::Sigmoid => out.zip_mut_with(y, |o, &yv| *o *= yv * (T::one() - yv)),
        UnaryKind::Exp => out.zip_mut_with(y, |o, &yv| *o *= yv),
        UnaryKind::Ln => out.zip_mut_with(x, |o, &xv| *o /= xv),
        UnaryKind::Sqrt => {
            let two = T::from_f(2.0);
            out.zip_mut_with(y, |o, &yv| *o /= two * yv)
        }
        UnaryKind::Square => {
            let two = T::from_f(2.0);
            out.zip_mut_with(x, |o, &xv| *o *= two * xv)
        }
        UnaryKind::Abs => out.zip_mut_with(x, |o, &xv| {
            if xv < T::zero() {
                *o = -*o
            } else if xv == T::zero() {
                *o = T::zero()
            }
        }),
    }
    out
}

fn softmax_last_arr<T: Scalar>(x: &ArrayD<T>) -> ArrayD<T> {
    let d = *x.shape().last().unwrap();
    let rows = x.len() / d;
    let x2 = x.view().into_shape_with_order((rows, d)).unwrap();
    let mut out = Array2::<T>::zeros((rows, d));
    for r in 0..rows {
        let row = x2.row(r);
        let mx = row.fold(T::neg_infinity(), |a, &b| if b > a { b } else { a });
        let mut sum = T::zero();
        for c in 0..d {
            let e = (row[c] - mx).exp();
            out[(r, c)] = e;
            sum += e;
        }
        for c in 0..d {
            out[(r, c)] /= sum;
        }
    }
    out.into_dyn().into_shape_with_order(x.raw_dim()).unwrap()
}

fn im2col<T: Scalar>(
    x: &ndarray::ArrayView3<'_, T>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<T> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut cols = Array2::<T>::zeros((cin * k * k, ho * wo));
    let xs = x.to_slice().expect("im2col expects standard layout");
    let cs = cols.as_slice_mut().unwrap();
    for c in 0..cin {
        let xbase = c * h * w;
        for ki in 0..k {
            for kj in 0..k {
                let row_base = ((c * k + ki) * k + kj) * (ho * wo);
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let xrow = xbase + ii as usize * w;
                    let crow = row_base + oi * wo;
                    if stride == 1 {
                        // jj = oj + kj - pad must lie in [0, w)
                        let oj_lo = pad.saturating_sub(kj);
                        let oj_hi = (w + pad - kj).min(wo);
                        if oj_lo < oj_hi {
                            let src_lo = xrow + oj_lo + kj - pad;
                            cs[crow + oj_lo..crow + oj_hi]
                                .copy_from_slice(&xs[src_lo..src_lo + (oj_hi - oj_lo)]);
                        }
                    } else {
                        for oj in 0..wo {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            cs[crow + oj] = xs[xrow + jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    dcols: &Array2<T>,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> ndarray::Array3<T> {
    let mut out = ndarray::Array3::<T>::zeros((cin, h, w));
    let ds = dcols.as_slice().expect("col2im standard layout");
    let os = out.as_slice_mut().unwrap();
    for c in 0..cin {
        let obase = c * h * w;
        for ki in 0..k {
            for kj in 0..k {
                let row_base = ((c * k + ki) * k + kj) * (ho * wo);
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let orow = obase + ii as usize * w;
                    let drow = row_base + oi * wo;
                    if stride == 1 {
                        let oj_lo = pad.saturating_sub(kj);
                        let oj_hi = (w + pad - kj).min(wo);
                        for oj in oj_lo..oj_hi {
                            os[orow + oj + kj - pad] += ds[drow + oj];
                        }
                    } else {
                        for oj in 0..wo {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            os[orow + jj as usize] += ds[drow + oj];
                        }
                    }
                }
            }
        }
    }
    out
}

/// (low index, high index, weight of high) for half-pixel bilinear mapping.
fn bilinear_axis(o: usize, factor: usize, size: usize) -> (usize, usize, f64) {
    let src = (o as f64 + 0.5) / factor as f64 - 0.5;
    let floor = src.floor();
    let wfrac = src - floor;
    let i0 = floor.max(0.0) as usize;
    let i0 = i0.min(size - 1);
    let i1 = (i0 + 1).min(size - 1);
    // when clamped at the edges the weight collapses correctly
    let w = if floor < 0.0 { 0.0 } else { wfrac };
    (i0, i1, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    fn t64(v: Vec<f64>, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
    }

    #[test]
    fn matmul_forward_and_backward() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = tape.leaf(arr2(&[[5.0, 6.0], [7.0, 8.0]]).into_dyn());
        let c = tape.matmul(a, b);
        let loss = tape.sum_all(c);
        tape.backward(loss);
        // dA = 1s * B^T, dB = A^T * 1s
        let da = tape.grad(a).unwrap();
        assert_eq!(da[[0, 0]], 11.0);
        assert_eq!(da[[0, 1]], 15.0);
        let db = tape.grad(b).unwrap();
        assert_eq!(db[[0, 0]], 4.0);
        assert_eq!(db[[1, 1]], 6.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::no_grad();
        let a = tape.constant(t64(vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0], &[2, 3]));
        let y = tape.softmax_last(a);
        let v = as2(tape.value(y));
        for r in 0..2 {
            let s: f64 = v.row(r).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_matches_manual_nll() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(t64(vec![0.2, -0.1, 0.5, 1.0, 0.0, -1.0], &[2, 3]));
        let loss = tape.ce_mean(logits, &[2, usize::MAX]);
        let manual = {
            let row: Vec<f64> = vec![0.2, -0.1, 0.5];
            let mx = 0.5f64;
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            lse - 0.5
        };
        assert!((tape.scalar_value(loss) - manual).abs() < 1e-12);
    }

    #[test]
    fn conv2d_known_values() {
        let mut tape = Tape::<f64>::no_grad();
        // 1x3x3 input, 1x1x2x2 kernel of ones, stride 1, no pad -> sums of 2x2 windows
        let x = tape.constant(t64(
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
            &[1, 3, 3],
        ));
        let w = tape.constant(t64(vec![1.0; 4], &[1, 1, 2, 2]));
        let y = tape.conv2d(x, w, 1, 0);
        let v = tape.value(y);
        assert_eq!(v.shape(), &[1, 2, 2]);
        assert_eq!(v[[0, 0, 0]], 12.0);
        assert_eq!(v[[0, 1, 1]], 28.0);
    }

    #[test]
    fn avg_pool_and_upsample_shapes() {
        let mut tape = Tape::<f64>::no_grad();
        let x = tape.constant(ArrayD::from_elem(IxDyn(&[2, 4, 4]), 3.0));
        let p = tape.avg_pool(x, 2);
        assert_eq!(tape.shape(p), &[2, 2, 2]);
        assert_eq!(tape.value(p)[[0, 0, 0]], 3.0);
        let u = tape.upsample_nearest(p, 4);
        assert_eq!(tape.shape(u), &[2, 8, 8]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(vec![2.0], &[1]));
        let d = tape.detach(x);
        let y = tape.mul(d, d);
        let s = tape.sum_all(y);
        // root does not require grad because the path was detached
        assert!(!tape.nodes[s.0].needs_grad);
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let mut tape = Tape::<f64>::no_grad();
        let x = tape.constant(t64(vec![1.0, 2.0, 3.0, 4.0], &[1, 4]));
        let y = tape.layer_norm_last(x, 1e-12);
        let v = tape.value(y);
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        let var: f64 = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn bilinear_upsample_preserves_constant() {
        let mut tape = Tape::<f64>::no_grad();
        let x = tape.constant(ArrayD::from_elem(IxDyn(&[1, 3, 3]), 0.7));
        let y = tape.upsample_bilinear(x, 4);
        for v in tape.value(y).iter() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_rows_scatters_gradient() {
        let mut tape = Tape::<f64>::new();
        let table = tape.leaf(arr2(&[[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]]).into_dyn());
        let g = tape.gather_rows(table, &[2, 2, 0]);
        let s = tape.sum_all(g);
        tape.backward(s);
        let gr = tape.grad(table).unwrap();
        assert_eq!(gr[[2, 0]], 2.0);
        assert_eq!(gr[[0, 0]], 1.0);
        assert_eq!(gr[[1, 0]], 0.0);
    }

    #[test]
    fn row_bias_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(vec![0.0; 6], &[3, 2]));
        let b = tape.leaf(arr1(&[1.0, 2.0]).into_dyn());
        let y = tape.row_bias(x, b);
        let s = tape.sum_all(y);
        tape.backward(s);
        assert_eq!(tape.grad(b).unwrap()[[0]], 3.0);
    }
}
