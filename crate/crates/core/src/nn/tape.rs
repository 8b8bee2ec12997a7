//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Forward calls record one node per op; `backward` replays the tape in
//! reverse, accumulating gradients. The op set is exactly what the two
//! models need: dense/conv linear algebra, the transformer's normalization
//! and attention pieces, the straight-through binarizer, and fused losses
//! with hand-derived adjoints (each verified by finite differences in the
//! gradient-check suite).
//!
//! Node ids are insertion-ordered, so the tape order is already a
//! topological order and the backward pass is a single reverse sweep.

use crate::error::{Error, Result};
use crate::nn::tensor::{Scalar, Tensor};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

const BCE_EPS: f64 = 1e-7;

enum OpRecord<S: Scalar> {
    Leaf,
    Add(usize, usize),
    AxpBy {
        a: usize,
        b: usize,
        alpha: f64,
        beta: f64,
    },
    Scale {
        x: usize,
        alpha: f64,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    Matmul {
        a: usize,
        b: usize,
    },
    MatmulNT {
        a: usize,
        b: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        stride: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    Softmax {
        x: usize,
    },
    Gelu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Tanh {
        x: usize,
    },
    Relu {
        x: usize,
    },
    BinarizeSte {
        x: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    GatherRows {
        x: usize,
        rows: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<usize>,
    },
    SliceCols {
        x: usize,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<usize>,
    },
    ChwToRows {
        x: usize,
    },
    RowsToChw {
        x: usize,
    },
    DotConst {
        x: usize,
        weights: Tensor<S>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
    },
    BceLoss {
        pred: usize,
        target: Tensor<S>,
    },
    SoftIouLoss {
        pred: usize,
        target: Tensor<S>,
    },
    VqQuantizeSte {
        z: usize,
        indices: Vec<usize>,
    },
    VqCodebookLoss {
        z: usize,
        codebook: usize,
        indices: Vec<usize>,
    },
    VqCommitLoss {
        z: usize,
        codebook: usize,
        indices: Vec<usize>,
    },
}

pub struct Tape<S: Scalar> {
    values: Vec<Tensor<S>>,
    grads: Vec<Tensor<S>>,
    ops: Vec<OpRecord<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// raw kernels shared by forward and backward
// ---------------------------------------------------------------------------

/// C[m,n] += A[m,k] * B[k,n]
fn mm_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += av * bv;
            }
        }
    }
}

/// Dot product with eight independent accumulator lanes. The reduction
/// order is fixed, so results are reproducible run to run; the lanes exist
/// to break the serial FP dependency chain.
#[inline]
fn dot8<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut lanes = [S::ZERO; 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let ab = &a[c * 8..c * 8 + 8];
        let bb = &b[c * 8..c * 8 + 8];
        for k in 0..8 {
            lanes[k] += ab[k] * bb[k];
        }
    }
    let mut tail = S::ZERO;
    for k in chunks * 8..n {
        tail += a[k] * b[k];
    }
    let s01 = lanes[0] + lanes[1];
    let s23 = lanes[2] + lanes[3];
    let s45 = lanes[4] + lanes[5];
    let s67 = lanes[6] + lanes[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

/// C[m,n] += A[m,k] * B[n,k]^T
fn mm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot8(arow, brow);
        }
    }
}

/// C[k,n] += A[m,k]^T * B[m,n]
fn mm_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let crow = &mut out[kk * n..(kk + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += av * bv;
            }
        }
    }
}

fn gelu_forward<S: Scalar>(x: S) -> S {
    // tanh approximation
    let c = S::from_f64(0.7978845608028654);
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (S::ONE + inner.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.7978845608028654);
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    let du = c * (S::ONE + three * a * x * x);
    half * (S::ONE + t) + half * x * (S::ONE - t * t) * du
}

fn sigmoid_forward<S: Scalar>(x: S) -> S {
    if x >= S::ZERO {
        S::ONE / (S::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::ONE + e)
    }
}

fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output-column range `[oj0, oj1)` for which `oj*s + v - p` stays inside
/// `[0, width)`.
#[inline]
fn valid_out_cols(width: usize, wo: usize, stride: usize, v: usize, padding: usize) -> (usize, usize) {
    let oj0 = if padding > v {
        (padding - v).div_ceil(stride)
    } else {
        0
    };
    // largest oj with oj*s + v - p <= width - 1
    let oj1 = if width + padding > v {
        (((width + padding - v - 1) / stride) + 1).min(wo)
    } else {
        0
    };
    (oj0.min(oj1), oj1)
}

/// Copy the (cin, kh, kw) window at (`y0`, `x0`) into a contiguous buffer,
/// channel-major.
#[inline]
fn gather_patch<S: Scalar>(
    xd: &[S],
    block: &mut [S],
    cin: usize,
    h: usize,
    wd: usize,
    y0: usize,
    x0: usize,
    kh: usize,
    kw: usize,
) {
    let mut idx = 0;
    for ci in 0..cin {
        let base = ci * h * wd + y0 * wd + x0;
        for u in 0..kh {
            block[idx..idx + kw].copy_from_slice(&xd[base + u * wd..base + u * wd + kw]);
            idx += kw;
        }
    }
}

/// Add `block` (channel-major (cin, kh, kw)) into the window at (`y0`, `x0`).
#[inline]
fn scatter_patch_add<S: Scalar>(
    xd: &mut [S],
    block: &[S],
    cin: usize,
    h: usize,
    wd: usize,
    y0: usize,
    x0: usize,
    kh: usize,
    kw: usize,
) {
    let mut idx = 0;
    for ci in 0..cin {
        let base = ci * h * wd + y0 * wd + x0;
        for u in 0..kh {
            for (dst, &src) in xd[base + u * wd..base + u * wd + kw]
                .iter_mut()
                .zip(&block[idx..idx + kw])
            {
                *dst += src;
            }
            idx += kw;
        }
    }
}

/// Nearest codebook row by squared Euclidean distance; ties -> lowest index.
pub(crate) fn nearest_code<S: Scalar>(query: &[S], codebook: &[S], dim: usize) -> usize {
    let rows = codebook.len() / dim;
    debug_assert!(rows > 0);
    let mut best = 0usize;
    let mut best_d = S::from_f64(f64::INFINITY);
    for r in 0..rows {
        let row = &codebook[r * dim..(r + 1) * dim];
        let mut d = S::ZERO;
        for (&q, &e) in query.iter().zip(row) {
            let diff = q - e;
            d += diff * diff;
        }
        if d < best_d {
            best_d = d;
            best = r;
        }
    }
    best
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<S>, op: OpRecord<S>) -> Var {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.values.push(value);
        self.grads.push(grad);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push(t, OpRecord::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> &Tensor<S> {
        &self.grads[v.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    // -- elementwise and affine ---------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::shape(
                "add",
                self.values[a.0].shape(),
                self.values[b.0].shape(),
            ));
        }
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::from_vec(self.values[a.0].shape().to_vec(), data)?;
        Ok(self.push(t, OpRecord::Add(a.0, b.0)))
    }

    /// `alpha * a + beta * b`, elementwise on equal shapes.
    pub fn axpby(&mut self, alpha: f64, a: Var, beta: f64, b: Var) -> Result<Var> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::shape(
                "axpby",
                self.values[a.0].shape(),
                self.values[b.0].shape(),
            ));
        }
        let al = S::from_f64(alpha);
        let be = S::from_f64(beta);
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| al * x + be * y)
            .collect();
        let t = Tensor::from_vec(self.values[a.0].shape().to_vec(), data)?;
        Ok(self.push(t, OpRecord::AxpBy { a: a.0, b: b.0, alpha, beta }))
    }

    pub fn scale(&mut self, alpha: f64, x: Var) -> Var {
        let al = S::from_f64(alpha);
        let t = self.values[x.0].map(|v| al * v);
        self.push(t, OpRecord::Scale { x: x.0, alpha })
    }

    /// Matrix (R, D) plus a row vector (D) broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.values[x.0].shape().to_vec();
        let bs = self.values[bias.0].shape().to_vec();
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(Error::shape("add_bias", &xs, &bs));
        }
        let d = xs[1];
        let bdata = self.values[bias.0].data().to_vec();
        let data = self.values[x.0]
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bdata[i % d])
            .collect();
        let t = Tensor::from_vec(xs, data)?;
        Ok(self.push(t, OpRecord::AddBias { x: x.0, bias: bias.0 }))
    }

    // -- matrix products ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.values[a.0].shape().to_vec();
        let sb = self.values[b.0].shape().to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::ZERO; m * n];
        mm_nn(self.values[a.0].data(), self.values[b.0].data(), m, k, n, &mut out);
        let t = Tensor::from_vec(vec![m, n], out)?;
        Ok(self.push(t, OpRecord::Matmul { a: a.0, b: b.0 }))
    }

    /// `a (m,k) x b(n,k)^T -> (m,n)`; attention scores without materializing
    /// a transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.values[a.0].shape().to_vec();
        let sb = self.values[b.0].shape().to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_nt", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![S::ZERO; m * n];
        mm_nt(self.values[a.0].data(), self.values[b.0].data(), m, k, n, &mut out);
        let t = Tensor::from_vec(vec![m, n], out)?;
        Ok(self.push(t, OpRecord::MatmulNT { a: a.0, b: b.0 }))
    }

    /// `x (R,Din) x w (Din,Dout) + bias (Dout)`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, bias)
    }

    // -- convolutions ---------------------------------------------------------

    /// x (Cin,H,W), w (Cout,Cin,kh,kw) -> (Cout,Ho,Wo).
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.values[x.0].shape().to_vec();
        let ws = self.values[w.0].shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 || xs[0] != ws[1] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let ho = conv_out_dim(h, kh, stride, padding)
            .ok_or_else(|| Error::shape("conv2d output", &xs, &ws))?;
        let wo = conv_out_dim(wd, kw, stride, padding)
            .ok_or_else(|| Error::shape("conv2d output", &xs, &ws))?;
        if let Some(b) = bias {
            let bs = self.values[b.0].shape();
            if bs != [cout] {
                return Err(Error::shape("conv2d bias", &ws, bs));
            }
        }

        let xd = self.values[x.0].data();
        let wdta = self.values[w.0].data();
        let mut out = vec![S::ZERO; cout * ho * wo];
        if let Some(b) = bias {
            let bd = self.values[b.0].data();
            for co in 0..cout {
                out[co * ho * wo..(co + 1) * ho * wo].fill(bd[co]);
            }
        }
        if stride == kh && stride == kw && padding == 0 {
            // Patchwise case (kernel == stride): gather each input patch
            // once, then one long dot per output channel.
            let klen = cin * kh * kw;
            let mut xblock = vec![S::ZERO; klen];
            for oi in 0..ho {
                for oj in 0..wo {
                    gather_patch(xd, &mut xblock, cin, h, wd, oi * stride, oj * stride, kh, kw);
                    for co in 0..cout {
                        out[(co * ho + oi) * wo + oj] +=
                            dot8(&xblock, &wdta[co * klen..(co + 1) * klen]);
                    }
                }
            }
        } else {
            // One shifted row-accumulate per (co, ci, u, v) tap; inner loops
            // run over contiguous slices.
            for co in 0..cout {
                for ci in 0..cin {
                    for u in 0..kh {
                        for v in 0..kw {
                            let wv = wdta[((co * cin + ci) * kh + u) * kw + v];
                            let (oj0, oj1) = valid_out_cols(wd, wo, stride, v, padding);
                            if oj1 <= oj0 {
                                continue;
                            }
                            for oi in 0..ho {
                                let y = (oi * stride + u) as isize - padding as isize;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                let xrow = &xd[ci * h * wd + y as usize * wd..][..wd];
                                let orow = &mut out[(co * ho + oi) * wo..][..wo];
                                if stride == 1 {
                                    let xoff = oj0 + v - padding;
                                    for (o, &xv) in orow[oj0..oj1]
                                        .iter_mut()
                                        .zip(&xrow[xoff..xoff + (oj1 - oj0)])
                                    {
                                        *o += wv * xv;
                                    }
                                } else {
                                    for oj in oj0..oj1 {
                                        orow[oj] += wv * xrow[oj * stride + v - padding];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::from_vec(vec![cout, ho, wo], out)?;
        Ok(self.push(
            t,
            OpRecord::Conv2d {
                x: x.0,
                w: w.0,
                bias: bias.map(|b| b.0),
                stride,
                padding,
            },
        ))
    }

    /// x (Cin,h,w), w (Cin,Cout,kh,kw) -> (Cout, (h-1)*s+kh, (w-1)*s+kw).
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        let xs = self.values[x.0].shape().to_vec();
        let ws = self.values[w.0].shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 || xs[0] != ws[0] || stride == 0 {
            return Err(Error::shape("conv_transpose2d", &xs, &ws));
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
        let ho = (h - 1) * stride + kh;
        let wo = (wd - 1) * stride + kw;
        if let Some(b) = bias {
            let bs = self.values[b.0].shape();
            if bs != [cout] {
                return Err(Error::shape("conv_transpose2d bias", &ws, bs));
            }
        }

        let xd = self.values[x.0].data();
        let wdta = self.values[w.0].data();
        let mut out = vec![S::ZERO; cout * ho * wo];
        // Accumulate each input position's full output block contiguously,
        // then scatter-add it into place (overlaps are fine).
        let blen = cout * kh * kw;
        let mut block = vec![S::ZERO; blen];
        for i in 0..h {
            for j in 0..wd {
                block.fill(S::ZERO);
                for ci in 0..cin {
                    let xv = xd[(ci * h + i) * wd + j];
                    let wrow = &wdta[ci * blen..(ci + 1) * blen];
                    for (bv, &wv) in block.iter_mut().zip(wrow) {
                        *bv += xv * wv;
                    }
                }
                scatter_patch_add(&mut out, &block, cout, ho, wo, i * stride, j * stride, kh, kw);
            }
        }
        if let Some(b) = bias {
            let bd = self.values[b.0].data().to_vec();
            for co in 0..cout {
                for p in out[co * ho * wo..(co + 1) * ho * wo].iter_mut() {
                    *p += bd[co];
                }
            }
        }
        let t = Tensor::from_vec(vec![cout, ho, wo], out)?;
        Ok(self.push(
            t,
            OpRecord::ConvTranspose2d {
                x: x.0,
                w: w.0,
                bias: bias.map(|b| b.0),
                stride,
            },
        ))
    }

    // -- normalization and activations -----------------------------------------

    /// Row-wise layer norm over the last axis of an (R, D) matrix.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.values[x.0].shape().to_vec();
        let gs = self.values[gamma.0].shape().to_vec();
        let bs = self.values[beta.0].shape().to_vec();
        if xs.len() != 2 || gs != [xs[1]] || bs != [xs[1]] {
            return Err(Error::shape("layer_norm", &xs, &gs));
        }
        let (r, d) = (xs[0], xs[1]);
        let e = S::from_f64(eps);
        let inv_d = S::from_f64(1.0 / d as f64);
        let xd = self.values[x.0].data();
        let g = self.values[gamma.0].data();
        let b = self.values[beta.0].data();
        let mut out = vec![S::ZERO; r * d];
        for i in 0..r {
            let row = &xd[i * d..(i + 1) * d];
            let mut mean = S::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = S::ZERO;
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var = var * inv_d;
            let inv_std = S::ONE / (var + e).sqrt();
            for j in 0..d {
                out[i * d + j] = g[j] * (row[j] - mean) * inv_std + b[j];
            }
        }
        let t = Tensor::from_vec(xs, out)?;
        Ok(self.push(
            t,
            OpRecord::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
        ))
    }

    /// Row-wise softmax over the last axis of an (R, D) matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.values[x.0].shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("softmax", &xs, &[0]));
        }
        let (r, d) = (xs[0], xs[1]);
        let xd = self.values[x.0].data();
        let mut out = vec![S::ZERO; r * d];
        for i in 0..r {
            let row = &xd[i * d..(i + 1) * d];
            let mut mx = row[0];
            for &v in row {
                mx = mx.maximum(v);
            }
            let mut denom = S::ZERO;
            for j in 0..d {
                let e = (row[j] - mx).exp();
                out[i * d + j] = e;
                denom += e;
            }
            let inv = S::ONE / denom;
            for j in 0..d {
                out[i * d + j] = out[i * d + j] * inv;
            }
        }
        let t = Tensor::from_vec(xs, out)?;
        Ok(self.push(t, OpRecord::Softmax { x: x.0 }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.values[x.0].map(gelu_forward);
        self.push(t, OpRecord::Gelu { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.values[x.0].map(sigmoid_forward);
        self.push(t, OpRecord::Sigmoid { x: x.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.values[x.0].map(|v| v.tanh());
        self.push(t, OpRecord::Tanh { x: x.0 })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.values[x.0].map(|v| v.maximum(S::ZERO));
        self.push(t, OpRecord::Relu { x: x.0 })
    }

    /// Sign binarization (0 maps to -1) with a straight-through backward:
    /// the incoming gradient passes unchanged where |x| <= 1 and is cut off
    /// outside that interval.
    pub fn binarize_ste(&mut self, x: Var) -> Var {
        let t = self.values[x.0].map(|v| if v > S::ZERO { S::ONE } else { -S::ONE });
        self.push(t, OpRecord::BinarizeSte { x: x.0 })
    }

    // -- indexing ---------------------------------------------------------------

    /// Rows of a (V, D) table selected by ids -> (ids.len(), D).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.values[table.0].shape().to_vec();
        if ts.len() != 2 {
            return Err(Error::shape("embedding table", &ts, &[0]));
        }
        let (v, d) = (ts[0], ts[1]);
        for &id in ids {
            if id >= v {
                return Err(Error::invalid(format!(
                    "embedding id {id} out of range [0, {v})"
                )));
            }
        }
        let td = self.values[table.0].data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let t = Tensor::from_vec(vec![ids.len(), d], out)?;
        Ok(self.push(
            t,
            OpRecord::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xs = self.values[x.0].shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("gather_rows", &xs, &[0]));
        }
        let (r, d) = (xs[0], xs[1]);
        for &row in rows {
            if row >= r {
                return Err(Error::invalid(format!(
                    "gather row {row} out of range [0, {r})"
                )));
            }
        }
        let xd = self.values[x.0].data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &row in rows {
            out.extend_from_slice(&xd[row * d..(row + 1) * d]);
        }
        let t = Tensor::from_vec(vec![rows.len(), d], out)?;
        Ok(self.push(
            t,
            OpRecord::GatherRows {
                x: x.0,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows needs at least one part"));
        }
        let d = {
            let s = self.values[parts[0].0].shape();
            if s.len() != 2 {
                return Err(Error::shape("concat_rows", s, &[0]));
            }
            s[1]
        };
        let mut rows = 0usize;
        for p in parts {
            let s = self.values[p.0].shape();
            if s.len() != 2 || s[1] != d {
                return Err(Error::shape("concat_rows", s, &[rows, d]));
            }
            rows += s[0];
        }
        let mut out = Vec::with_capacity(rows * d);
        for p in parts {
            out.extend_from_slice(self.values[p.0].data());
        }
        let t = Tensor::from_vec(vec![rows, d], out)?;
        Ok(self.push(
            t,
            OpRecord::ConcatRows {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    /// Columns `[start, start+len)` of an (R, D) matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.values[x.0].shape().to_vec();
        if xs.len() != 2 || start + len > xs[1] || len == 0 {
            return Err(Error::shape("slice_cols", &xs, &[start, len]));
        }
        let (r, d) = (xs[0], xs[1]);
        let xd = self.values[x.0].data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xd[i * d + start..i * d + start + len]);
        }
        let t = Tensor::from_vec(vec![r, len], out)?;
        Ok(self.push(t, OpRecord::SliceCols { x: x.0, start, len }))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols needs at least one part"));
        }
        let r = {
            let s = self.values[parts[0].0].shape();
            if s.len() != 2 {
                return Err(Error::shape("concat_cols", s, &[0]));
            }
            s[0]
        };
        let mut total = 0usize;
        for p in parts {
            let s = self.values[p.0].shape();
            if s.len() != 2 || s[0] != r {
                return Err(Error::shape("concat_cols", s, &[r, total]));
            }
            total += s[1];
        }
        let mut out = vec![S::ZERO; r * total];
        let mut col = 0usize;
        for p in parts {
            let d = self.values[p.0].shape()[1];
            let pd = self.values[p.0].data();
            for i in 0..r {
                out[i * total + col..i * total + col + d]
                    .copy_from_slice(&pd[i * d..(i + 1) * d]);
            }
            col += d;
        }
        let t = Tensor::from_vec(vec![r, total], out)?;
        Ok(self.push(
            t,
            OpRecord::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    /// (C, H, W) -> (H*W, C): one row per spatial position.
    pub fn chw_to_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.values[x.0].shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("chw_to_rows", &xs, &[3]));
        }
        let (c, plane) = (xs[0], xs[1] * xs[2]);
        let xd = self.values[x.0].data();
        let mut out = vec![S::ZERO; c * plane];
        for ch in 0..c {
            for idx in 0..plane {
                out[idx * c + ch] = xd[ch * plane + idx];
            }
        }
        let t = Tensor::from_vec(vec![plane, c], out)?;
        Ok(self.push(t, OpRecord::ChwToRows { x: x.0 }))
    }

    /// (H*W, C) -> (C, H, W): inverse of [`Tape::chw_to_rows`].
    pub fn rows_to_chw(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xs = self.values[x.0].shape().to_vec();
        if xs.len() != 2 || xs[0] != h * w {
            return Err(Error::shape("rows_to_chw", &xs, &[h * w]));
        }
        let (c, plane) = (xs[1], h * w);
        let xd = self.values[x.0].data();
        let mut out = vec![S::ZERO; c * plane];
        for idx in 0..plane {
            for ch in 0..c {
                out[ch * plane + idx] = xd[idx * c + ch];
            }
        }
        let t = Tensor::from_vec(vec![c, h, w], out)?;
        Ok(self.push(t, OpRecord::RowsToChw { x: x.0 }))
    }

    /// Weighted sum against a constant tensor -> scalar. Reduces any op
    /// output to a scalar loss for gradient checking.
    pub fn dot_const(&mut self, x: Var, weights: &Tensor<S>) -> Result<Var> {
        if self.values[x.0].shape() != weights.shape() {
            return Err(Error::shape(
                "dot_const",
                self.values[x.0].shape(),
                weights.shape(),
            ));
        }
        let mut acc = S::ZERO;
        for (&a, &b) in self.values[x.0].data().iter().zip(weights.data()) {
            acc += a * b;
        }
        Ok(self.push(
            Tensor::scalar(acc),
            OpRecord::DotConst {
                x: x.0,
                weights: weights.clone(),
            },
        ))
    }

    // -- losses -------------------------------------------------------------------

    /// Mean cross-entropy of (N, K) logits against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let ls = self.values[logits.0].shape().to_vec();
        if ls.len() != 2 || ls[0] != targets.len() {
            return Err(Error::shape("cross_entropy", &ls, &[targets.len()]));
        }
        let (n, k) = (ls[0], ls[1]);
        if n == 0 {
            return Err(Error::invalid("cross_entropy over zero rows"));
        }
        for &t in targets {
            if t >= k {
                return Err(Error::invalid(format!(
                    "cross_entropy target {t} out of range [0, {k})"
                )));
            }
        }
        let ld = self.values[logits.0].data();
        let mut total = S::ZERO;
        for (i, &t) in targets.iter().enumerate() {
            let row = &ld[i * k..(i + 1) * k];
            let mut mx = row[0];
            for &v in row {
                mx = mx.maximum(v);
            }
            let mut denom = S::ZERO;
            for &v in row {
                denom += (v - mx).exp();
            }
            total += mx + denom.ln() - row[t];
        }
        let loss = total * S::from_f64(1.0 / n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            OpRecord::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean binary cross-entropy of probabilities against a {0,1} target,
    /// clamping predictions to [eps, 1-eps], eps = 1e-7.
    pub fn bce_loss(&mut self, pred: Var, target: &Tensor<S>) -> Result<Var> {
        if self.values[pred.0].shape() != target.shape() {
            return Err(Error::shape(
                "bce_loss",
                self.values[pred.0].shape(),
                target.shape(),
            ));
        }
        let n = target.len();
        if n == 0 {
            return Err(Error::invalid("bce_loss over zero elements"));
        }
        let lo = S::from_f64(BCE_EPS);
        let hi = S::from_f64(1.0 - BCE_EPS);
        let mut total = S::ZERO;
        for (&p, &t) in self.values[pred.0].data().iter().zip(target.data()) {
            let pc = p.maximum(lo).minimum(hi);
            total += -(t * pc.ln() + (S::ONE - t) * (S::ONE - pc).ln());
        }
        let loss = total * S::from_f64(1.0 / n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            OpRecord::BceLoss {
                pred: pred.0,
                target: target.clone(),
            },
        ))
    }

    /// Soft IoU loss `1 - mean_c inter_c / union_c` over a (C, H, W)
    /// probability map against a one-hot target. A channel empty on both
    /// sides (no target cells, all predictions below 0.5) counts as perfect.
    pub fn soft_iou_loss(&mut self, pred: Var, target: &Tensor<S>) -> Result<Var> {
        let ps = self.values[pred.0].shape().to_vec();
        if ps != target.shape() || ps.len() != 3 {
            return Err(Error::shape("soft_iou_loss", &ps, target.shape()));
        }
        let channels = ps[0];
        let plane = ps[1] * ps[2];
        let pd = self.values[pred.0].data();
        let td = target.data();
        let half = S::from_f64(0.5);
        let mut ratio_sum = S::ZERO;
        for c in 0..channels {
            let p = &pd[c * plane..(c + 1) * plane];
            let t = &td[c * plane..(c + 1) * plane];
            let mut inter = S::ZERO;
            let mut union = S::ZERO;
            let mut target_active = false;
            let mut pred_active = false;
            for (&pv, &tv) in p.iter().zip(t) {
                inter += tv * pv;
                union += tv + pv - tv * pv;
                if tv > half {
                    target_active = true;
                }
                if pv >= half {
                    pred_active = true;
                }
            }
            if !target_active && !pred_active {
                ratio_sum += S::ONE;
            } else {
                ratio_sum += inter / union;
            }
        }
        let loss = S::ONE - ratio_sum * S::from_f64(1.0 / channels as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            OpRecord::SoftIouLoss {
                pred: pred.0,
                target: target.clone(),
            },
        ))
    }

    // -- vector quantization ---------------------------------------------------

    /// Quantize rows of z (N, D) to their nearest codebook rows (V, D).
    /// Forward emits the selected codebook vectors; backward passes the
    /// output gradient straight through to `z`. Returns the selected indices.
    pub fn vq_quantize_ste(&mut self, z: Var, codebook: Var) -> Result<(Var, Vec<usize>)> {
        let zs = self.values[z.0].shape().to_vec();
        let cs = self.values[codebook.0].shape().to_vec();
        if zs.len() != 2 || cs.len() != 2 || zs[1] != cs[1] {
            return Err(Error::shape("vq_quantize", &zs, &cs));
        }
        if cs[0] == 0 {
            return Err(Error::invalid("vq_quantize with empty codebook"));
        }
        let (n, d) = (zs[0], zs[1]);
        let zd = self.values[z.0].data();
        let cd = self.values[codebook.0].data();
        let mut indices = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            let q = &zd[i * d..(i + 1) * d];
            let k = nearest_code(q, cd, d);
            indices.push(k);
            out.extend_from_slice(&cd[k * d..(k + 1) * d]);
        }
        let t = Tensor::from_vec(vec![n, d], out)?;
        let var = self.push(
            t,
            OpRecord::VqQuantizeSte {
                z: z.0,
                indices: indices.clone(),
            },
        );
        Ok((var, indices))
    }

    fn vq_mean_distance(&self, z: Var, codebook: Var, indices: &[usize]) -> Result<S> {
        let zs = self.values[z.0].shape().to_vec();
        let cs = self.values[codebook.0].shape().to_vec();
        if zs.len() != 2 || cs.len() != 2 || zs[1] != cs[1] || indices.len() != zs[0] {
            return Err(Error::shape("vq loss", &zs, &cs));
        }
        let (n, d) = (zs[0], zs[1]);
        let zd = self.values[z.0].data();
        let cd = self.values[codebook.0].data();
        let mut dist = S::ZERO;
        for (i, &k) in indices.iter().enumerate() {
            if k >= cs[0] {
                return Err(Error::invalid(format!("vq index {k} out of range")));
            }
            for j in 0..d {
                let diff = zd[i * d + j] - cd[k * d + j];
                dist += diff * diff;
            }
        }
        Ok(dist * S::from_f64(1.0 / (n * d) as f64))
    }

    /// Codebook half of the VQ objective: `mean ||sg(z) - e_k||^2`.
    /// Gradients reach the codebook only.
    pub fn vq_codebook_loss(&mut self, z: Var, codebook: Var, indices: &[usize]) -> Result<Var> {
        let mean = self.vq_mean_distance(z, codebook, indices)?;
        Ok(self.push(
            Tensor::scalar(mean),
            OpRecord::VqCodebookLoss {
                z: z.0,
                codebook: codebook.0,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Commitment half of the VQ objective: `mean ||z - sg(e_k)||^2`.
    /// Gradients reach the encoder output only.
    pub fn vq_commitment_loss(&mut self, z: Var, codebook: Var, indices: &[usize]) -> Result<Var> {
        let mean = self.vq_mean_distance(z, codebook, indices)?;
        Ok(self.push(
            Tensor::scalar(mean),
            OpRecord::VqCommitLoss {
                z: z.0,
                codebook: codebook.0,
                indices: indices.to_vec(),
            },
        ))
    }

    // -- backward ------------------------------------------------------------

    /// Seed d(loss)/d(loss) = 1 and sweep the tape in reverse.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        self.grads[loss.0].data_mut()[0] = S::ONE;

        for id in (0..=loss.0).rev() {
            let g = self.grads[id].clone();
            match &self.ops[id] {
                OpRecord::Leaf => {}
                OpRecord::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    for (dst, &gv) in self.grads[a].data_mut().iter_mut().zip(g.data()) {
                        *dst += gv;
                    }
                    for (dst, &gv) in self.grads[b].data_mut().iter_mut().zip(g.data()) {
                        *dst += gv;
                    }
                }
                OpRecord::AxpBy { a, b, alpha, beta } => {
                    let (a, b) = (*a, *b);
                    let al = S::from_f64(*alpha);
                    let be = S::from_f64(*beta);
                    for (dst, &gv) in self.grads[a].data_mut().iter_mut().zip(g.data()) {
                        *dst += al * gv;
                    }
                    for (dst, &gv) in self.grads[b].data_mut().iter_mut().zip(g.data()) {
                        *dst += be * gv;
                    }
                }
                OpRecord::Scale { x, alpha } => {
                    let x = *x;
                    let al = S::from_f64(*alpha);
                    for (dst, &gv) in self.grads[x].data_mut().iter_mut().zip(g.data()) {
                        *dst += al * gv;
                    }
                }
                OpRecord::AddBias { x, bias } => {
                    let (x, bias) = (*x, *bias);
                    let d = self.values[bias].len();
                    for (dst, &gv) in self.grads[x].data_mut().iter_mut().zip(g.data()) {
                        *dst += gv;
                    }
                    let bg = self.grads[bias].data_mut();
                    for (i, &gv) in g.data().iter().enumerate() {
                        bg[i % d] += gv;
                    }
                }
                OpRecord::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let m = self.values[a].shape()[0];
                    let k = self.values[a].shape()[1];
                    let n = self.values[b].shape()[1];
                    // dA += dC * B^T
                    let mut da = std::mem::take(&mut self.grads[a]);
                    mm_nt(g.data(), self.values[b].data(), m, n, k, da.data_mut());
                    self.grads[a] = da;
                    // dB += A^T * dC
                    let mut db = std::mem::take(&mut self.grads[b]);
                    mm_tn(self.values[a].data(), g.data(), m, k, n, db.data_mut());
                    self.grads[b] = db;
                }
                OpRecord::MatmulNT { a, b } => {
                    let (a, b) = (*a, *b);
                    let m = self.values[a].shape()[0];
                    let k = self.values[a].shape()[1];
                    let n = self.values[b].shape()[0];
                    // O = A B^T: dA += dO * B
                    let mut da = std::mem::take(&mut self.grads[a]);
                    mm_nn(g.data(), self.values[b].data(), m, n, k, da.data_mut());
                    self.grads[a] = da;
                    // dB += dO^T * A
                    let mut db = std::mem::take(&mut self.grads[b]);
                    mm_tn(g.data(), self.values[a].data(), m, n, k, db.data_mut());
                    self.grads[b] = db;
                }
                OpRecord::Conv2d {
                    x,
                    w,
                    bias,
                    stride,
                    padding,
                } => {
                    let (x, w, bias, stride, padding) = (*x, *w, *bias, *stride, *padding);
                    let xs = self.values[x].shape().to_vec();
                    let ws = self.values[w].shape().to_vec();
                    let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                    let os = g.shape().to_vec();
                    let (ho, wo) = (os[1], os[2]);

                    let xd = self.values[x].data().to_vec();
                    let wdta = self.values[w].data().to_vec();
                    let mut dx = std::mem::take(&mut self.grads[x]);
                    let mut dw = std::mem::take(&mut self.grads[w]);
                    let dxd = dx.data_mut();
                    let dwd = dw.data_mut();
                    if stride == kh && stride == kw && padding == 0 {
                        let klen = cin * kh * kw;
                        let mut xblock = vec![S::ZERO; klen];
                        let mut dxblock = vec![S::ZERO; klen];
                        for oi in 0..ho {
                            for oj in 0..wo {
                                gather_patch(
                                    &xd,
                                    &mut xblock,
                                    cin,
                                    h,
                                    wd,
                                    oi * stride,
                                    oj * stride,
                                    kh,
                                    kw,
                                );
                                dxblock.fill(S::ZERO);
                                for co in 0..cout {
                                    let gv = g.data()[(co * ho + oi) * wo + oj];
                                    let wrow = &wdta[co * klen..(co + 1) * klen];
                                    let dwrow = &mut dwd[co * klen..(co + 1) * klen];
                                    for k in 0..klen {
                                        dwrow[k] += gv * xblock[k];
                                        dxblock[k] += gv * wrow[k];
                                    }
                                }
                                scatter_patch_add(
                                    dxd,
                                    &dxblock,
                                    cin,
                                    h,
                                    wd,
                                    oi * stride,
                                    oj * stride,
                                    kh,
                                    kw,
                                );
                            }
                        }
                        self.grads[x] = dx;
                        self.grads[w] = dw;
                        if let Some(b) = bias {
                            let bg = self.grads[b].data_mut();
                            for co in 0..cout {
                                let mut acc = S::ZERO;
                                for &gv in &g.data()[co * ho * wo..(co + 1) * ho * wo] {
                                    acc += gv;
                                }
                                bg[co] += acc;
                            }
                        }
                        continue;
                    }
                    for co in 0..cout {
                        for ci in 0..cin {
                            for u in 0..kh {
                                for v in 0..kw {
                                    let widx = ((co * cin + ci) * kh + u) * kw + v;
                                    let wv = wdta[widx];
                                    let (oj0, oj1) = valid_out_cols(wd, wo, stride, v, padding);
                                    if oj1 <= oj0 {
                                        continue;
                                    }
                                    let mut dwacc = S::ZERO;
                                    for oi in 0..ho {
                                        let y = (oi * stride + u) as isize - padding as isize;
                                        if y < 0 || y >= h as isize {
                                            continue;
                                        }
                                        let xbase = ci * h * wd + y as usize * wd;
                                        let grow = &g.data()[(co * ho + oi) * wo..][..wo];
                                        if stride == 1 {
                                            let xoff = xbase + oj0 + v - padding;
                                            let n = oj1 - oj0;
                                            dwacc += dot8(&grow[oj0..oj1], &xd[xoff..xoff + n]);
                                            for (dst, &gv) in dxd[xoff..xoff + n]
                                                .iter_mut()
                                                .zip(&grow[oj0..oj1])
                                            {
                                                *dst += wv * gv;
                                            }
                                        } else {
                                            for oj in oj0..oj1 {
                                                let xi = xbase + oj * stride + v - padding;
                                                let gv = grow[oj];
                                                dwacc += gv * xd[xi];
                                                dxd[xi] += wv * gv;
                                            }
                                        }
                                    }
                                    dwd[widx] += dwacc;
                                }
                            }
                        }
                    }
                    self.grads[x] = dx;
                    self.grads[w] = dw;
                    if let Some(b) = bias {
                        let bg = self.grads[b].data_mut();
                        for co in 0..cout {
                            let mut acc = S::ZERO;
                            for &gv in &g.data()[co * ho * wo..(co + 1) * ho * wo] {
                                acc += gv;
                            }
                            bg[co] += acc;
                        }
                    }
                }
                OpRecord::ConvTranspose2d { x, w, bias, stride } => {
                    let (x, w, bias, stride) = (*x, *w, *bias, *stride);
                    let xs = self.values[x].shape().to_vec();
                    let ws = self.values[w].shape().to_vec();
                    let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                    let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
                    let os = g.shape().to_vec();
                    let (ho, wo) = (os[1], os[2]);

                    let xd = self.values[x].data().to_vec();
                    let wdta = self.values[w].data().to_vec();
                    let mut dx = std::mem::take(&mut self.grads[x]);
                    let mut dw = std::mem::take(&mut self.grads[w]);
                    let dxd = dx.data_mut();
                    let dwd = dw.data_mut();
                    let blen = cout * kh * kw;
                    let mut gblock = vec![S::ZERO; blen];
                    for i in 0..h {
                        for j in 0..wd {
                            gather_patch(
                                g.data(),
                                &mut gblock,
                                cout,
                                ho,
                                wo,
                                i * stride,
                                j * stride,
                                kh,
                                kw,
                            );
                            for ci in 0..cin {
                                let xi = (ci * h + i) * wd + j;
                                let xv = xd[xi];
                                let wrow = &wdta[ci * blen..(ci + 1) * blen];
                                dxd[xi] += dot8(&gblock, wrow);
                                for (dwv, &gv) in
                                    dwd[ci * blen..(ci + 1) * blen].iter_mut().zip(&gblock)
                                {
                                    *dwv += xv * gv;
                                }
                            }
                        }
                    }
                    self.grads[x] = dx;
                    self.grads[w] = dw;
                    if let Some(b) = bias {
                        let bg = self.grads[b].data_mut();
                        for co in 0..cout {
                            let mut acc = S::ZERO;
                            for &gv in &g.data()[co * ho * wo..(co + 1) * ho * wo] {
                                acc += gv;
                            }
                            bg[co] += acc;
                        }
                    }
                }
                OpRecord::LayerNorm {
                    x,
                    gamma,
                    beta,
                    eps,
                } => {
                    let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                    let xs = self.values[x].shape().to_vec();
                    let (r, d) = (xs[0], xs[1]);
                    let e = S::from_f64(eps);
                    let inv_d = S::from_f64(1.0 / d as f64);
                    let xd = self.values[x].data().to_vec();
                    let gam = self.values[gamma].data().to_vec();

                    let mut dx = std::mem::take(&mut self.grads[x]);
                    let mut dgamma = std::mem::take(&mut self.grads[gamma]);
                    let mut dbeta = std::mem::take(&mut self.grads[beta]);
                    for i in 0..r {
                        let row = &xd[i * d..(i + 1) * d];
                        let grow = &g.data()[i * d..(i + 1) * d];
                        let mut mean = S::ZERO;
                        for &v in row {
                            mean += v;
                        }
                        mean = mean * inv_d;
                        let mut var = S::ZERO;
                        for &v in row {
                            let c = v - mean;
                            var += c * c;
                        }
                        var = var * inv_d;
                        let inv_std = S::ONE / (var + e).sqrt();

                        let mut sum_gdy = S::ZERO;
                        let mut sum_gdy_xhat = S::ZERO;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv_std;
                            let gdy = gam[j] * grow[j];
                            sum_gdy += gdy;
                            sum_gdy_xhat += gdy * xhat;
                            dgamma.data_mut()[j] += grow[j] * xhat;
                            dbeta.data_mut()[j] += grow[j];
                        }
                        let mean_gdy = sum_gdy * inv_d;
                        let mean_gdy_xhat = sum_gdy_xhat * inv_d;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv_std;
                            let gdy = gam[j] * grow[j];
                            dx.data_mut()[i * d + j] +=
                                (gdy - mean_gdy - xhat * mean_gdy_xhat) * inv_std;
                        }
                    }
                    self.grads[x] = dx;
                    self.grads[gamma] = dgamma;
                    self.grads[beta] = dbeta;
                }
                OpRecord::Softmax { x } => {
                    let x = *x;
                    let shape = g.shape().to_vec();
                    let (r, d) = (shape[0], shape[1]);
                    let y = self.values[id].data().to_vec();
                    let dx = self.grads[x].data_mut();
                    for i in 0..r {
                        let yrow = &y[i * d..(i + 1) * d];
                        let grow = &g.data()[i * d..(i + 1) * d];
                        let mut dot = S::ZERO;
                        for (&yv, &gv) in yrow.iter().zip(grow) {
                            dot += yv * gv;
                        }
                        for j in 0..d {
                            dx[i * d + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
                OpRecord::Gelu { x } => {
                    let x = *x;
                    let xv = self.values[x].data().to_vec();
                    for ((dst, &gv), &v) in self.grads[x]
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(&xv)
                    {
                        *dst += gv * gelu_grad(v);
                    }
                }
                OpRecord::Sigmoid { x } => {
                    let x = *x;
                    let y = self.values[id].data().to_vec();
                    for ((dst, &gv), &yv) in self.grads[x]
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(&y)
                    {
                        *dst += gv * yv * (S::ONE - yv);
                    }
                }
                OpRecord::Tanh { x } => {
                    let x = *x;
                    let y = self.values[id].data().to_vec();
                    for ((dst, &gv), &yv) in self.grads[x]
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(&y)
                    {
                        *dst += gv * (S::ONE - yv * yv);
                    }
                }
                OpRecord::Relu { x } => {
                    let x = *x;
                    let xv = self.values[x].data().to_vec();
                    for ((dst, &gv), &v) in self.grads[x]
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(&xv)
                    {
                        if v > S::ZERO {
                            *dst += gv;
                        }
                    }
                }
                OpRecord::BinarizeSte { x } => {
                    let x = *x;
                    let xv = self.values[x].data().to_vec();
                    for ((dst, &gv), &v) in self.grads[x]
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(&xv)
                    {
                        if v.abs() <= S::ONE {
                            *dst += gv;
                        }
                    }
                }
                OpRecord::Embedding { table, ids } => {
                    let table = *table;
                    let d = self.values[table].shape()[1];
                    let tg = self.grads[table].data_mut();
                    for (i, &id_) in ids.iter().enumerate() {
                        for j in 0..d {
                            tg[id_ * d + j] += g.data()[i * d + j];
                        }
                    }
                }
                OpRecord::GatherRows { x, rows } => {
                    let x = *x;
                    let d = self.values[x].shape()[1];
                    let xg = self.grads[x].data_mut();
                    for (i, &row) in rows.iter().enumerate() {
                        for j in 0..d {
                            xg[row * d + j] += g.data()[i * d + j];
                        }
                    }
                }
                OpRecord::ConcatRows { parts } => {
                    let parts = parts.clone();
                    let mut offset = 0usize;
                    for p in parts {
                        let len = self.values[p].len();
                        for (dst, &gv) in self.grads[p]
                            .data_mut()
                            .iter_mut()
                            .zip(&g.data()[offset..offset + len])
                        {
                            *dst += gv;
                        }
                        offset += len;
                    }
                }
                OpRecord::SliceCols { x, start, len } => {
                    let (x, start, len) = (*x, *start, *len);
                    let d = self.values[x].shape()[1];
                    let r = self.values[x].shape()[0];
                    let xg = self.grads[x].data_mut();
                    for i in 0..r {
                        for j in 0..len {
                            xg[i * d + start + j] += g.data()[i * len + j];
                        }
                    }
                }
                OpRecord::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let r = g.shape()[0];
                    let total = g.shape()[1];
                    let mut col = 0usize;
                    for p in parts {
                        let d = self.values[p].shape()[1];
                        let pg = self.grads[p].data_mut();
                        for i in 0..r {
                            for j in 0..d {
                                pg[i * d + j] += g.data()[i * total + col + j];
                            }
                        }
                        col += d;
                    }
                }
                OpRecord::ChwToRows { x } => {
                    let x = *x;
                    let xs = self.values[x].shape().to_vec();
                    let (c, plane) = (xs[0], xs[1] * xs[2]);
                    let xg = self.grads[x].data_mut();
                    for ch in 0..c {
                        for idx in 0..plane {
                            xg[ch * plane + idx] += g.data()[idx * c + ch];
                        }
                    }
                }
                OpRecord::RowsToChw { x } => {
                    let x = *x;
                    let os = g.shape().to_vec();
                    let (c, plane) = (os[0], os[1] * os[2]);
                    let xg = self.grads[x].data_mut();
                    for idx in 0..plane {
                        for ch in 0..c {
                            xg[idx * c + ch] += g.data()[ch * plane + idx];
                        }
                    }
                }
                OpRecord::DotConst { x, weights } => {
                    let x = *x;
                    let gv = g.data()[0];
                    let wdata = weights.data().to_vec();
                    for (dst, &wv) in self.grads[x].data_mut().iter_mut().zip(&wdata) {
                        *dst += gv * wv;
                    }
                }
                OpRecord::CrossEntropy { logits, targets } => {
                    let logits = *logits;
                    let gv = g.data()[0];
                    let shape = self.values[logits].shape().to_vec();
                    let (n, k) = (shape[0], shape[1]);
                    let scale = S::from_f64(1.0 / n as f64) * gv;
                    let ld = self.values[logits].data().to_vec();
                    let lg = self.grads[logits].data_mut();
                    for (i, &t) in targets.iter().enumerate() {
                        let row = &ld[i * k..(i + 1) * k];
                        let mut mx = row[0];
                        for &v in row {
                            mx = mx.maximum(v);
                        }
                        let mut denom = S::ZERO;
                        for &v in row {
                            denom += (v - mx).exp();
                        }
                        for j in 0..k {
                            let soft = (row[j] - mx).exp() / denom;
                            let delta = if j == t { S::ONE } else { S::ZERO };
                            lg[i * k + j] += (soft - delta) * scale;
                        }
                    }
                }
                OpRecord::BceLoss { pred, target } => {
                    let pred = *pred;
                    let gv = g.data()[0];
                    let n = target.len();
                    let scale = S::from_f64(1.0 / n as f64) * gv;
                    let lo = S::from_f64(BCE_EPS);
                    let hi = S::from_f64(1.0 - BCE_EPS);
                    let pv = self.values[pred].data().to_vec();
                    let tv = target.data().to_vec();
                    let pg = self.grads[pred].data_mut();
                    for i in 0..n {
                        let p = pv[i];
                        // Clamped predictions sit on a constant branch.
                        if p < lo || p > hi {
                            continue;
                        }
                        let t = tv[i];
                        pg[i] += (-(t / p) + (S::ONE - t) / (S::ONE - p)) * scale;
                    }
                }
                OpRecord::SoftIouLoss { pred, target } => {
                    let pred = *pred;
                    let gv = g.data()[0];
                    let shape = self.values[pred].shape().to_vec();
                    let channels = shape[0];
                    let plane = shape[1] * shape[2];
                    let half = S::from_f64(0.5);
                    let scale = S::from_f64(1.0 / channels as f64) * gv;
                    let pv = self.values[pred].data().to_vec();
                    let tv = target.data().to_vec();
                    let pg = self.grads[pred].data_mut();
                    for c in 0..channels {
                        let p = &pv[c * plane..(c + 1) * plane];
                        let t = &tv[c * plane..(c + 1) * plane];
                        let mut inter = S::ZERO;
                        let mut union = S::ZERO;
                        let mut target_active = false;
                        let mut pred_active = false;
                        for (&pvx, &tvx) in p.iter().zip(t) {
                            inter += tvx * pvx;
                            union += tvx + pvx - tvx * pvx;
                            if tvx > half {
                                target_active = true;
                            }
                            if pvx >= half {
                                pred_active = true;
                            }
                        }
                        if !target_active && !pred_active {
                            continue; // ratio pinned to 1; no gradient
                        }
                        let inv_u2 = S::ONE / (union * union);
                        for (j, &tvx) in t.iter().enumerate() {
                            // d(inter/union)/dp = (t*union - inter*(1-t)) / union^2
                            let dratio = (tvx * union - inter * (S::ONE - tvx)) * inv_u2;
                            // loss = 1 - mean ratio, so the sign flips
                            pg[c * plane + j] += -dratio * scale;
                        }
                    }
                }
                OpRecord::VqQuantizeSte { z, indices } => {
                    let z = *z;
                    let _ = indices;
                    for (dst, &gv) in self.grads[z].data_mut().iter_mut().zip(g.data()) {
                        *dst += gv;
                    }
                }
                OpRecord::VqCodebookLoss {
                    z,
                    codebook,
                    indices,
                } => {
                    let (z, codebook) = (*z, *codebook);
                    let gv = g.data()[0];
                    let d = self.values[z].shape()[1];
                    let n = indices.len();
                    let scale = S::from_f64(2.0 / (n * d) as f64) * gv;
                    let zv = self.values[z].data().to_vec();
                    let cv = self.values[codebook].data().to_vec();
                    let indices = indices.clone();
                    let cg = self.grads[codebook].data_mut();
                    for (i, &k) in indices.iter().enumerate() {
                        for j in 0..d {
                            cg[k * d + j] += (cv[k * d + j] - zv[i * d + j]) * scale;
                        }
                    }
                }
                OpRecord::VqCommitLoss {
                    z,
                    codebook,
                    indices,
                } => {
                    let (z, codebook) = (*z, *codebook);
                    let gv = g.data()[0];
                    let d = self.values[z].shape()[1];
                    let n = indices.len();
                    let scale = S::from_f64(2.0 / (n * d) as f64) * gv;
                    let zv = self.values[z].data().to_vec();
                    let cv = self.values[codebook].data().to_vec();
                    let indices = indices.clone();
                    let zg = self.grads[z].data_mut();
                    for (i, &k) in indices.iter().enumerate() {
                        for j in 0..d {
                            zg[i * d + j] += (zv[i * d + j] - cv[k * d + j]) * scale;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.leaf(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let x = tape.leaf(t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn matmul_shape_error_names_operands() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t2(2, 3, &[0.0; 6]));
        let b = tape.leaf(t2(2, 3, &[0.0; 6]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_uniform_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(2, 4, &[3.0; 8]));
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(3, 5, &[0.3, -1.0, 2.0, 0.0, 1.5, 9.0, 8.0, 7.0, -2.0, 0.1, 0.0, 0.0, 0.0, 0.0, 1.0]));
        let y = tape.softmax(x).unwrap();
        let data = tape.value(y).data();
        for i in 0..3 {
            let s: f64 = data[i * 5..(i + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(t2(3, 8, &[0.5; 24]));
        let loss = tape.cross_entropy(logits, &[0, 3, 7]).unwrap();
        assert!((tape.value(loss).item() - (8.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_goes_to_zero() {
        let mut tape = Tape::<f64>::new();
        let mut data = vec![0.0; 5];
        data[2] = 60.0;
        let logits = tape.leaf(t2(1, 5, &data));
        let loss = tape.cross_entropy(logits, &[2]).unwrap();
        assert!(tape.value(loss).item() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_naive_oracle() {
        // Oracle: per-row log-sum-exp evaluated directly.
        let mut rng = crate::rng::Rng::new(12);
        let data: Vec<f64> = (0..20).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let targets = [4usize, 0, 2, 1];
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(t2(4, 5, &data));
        let loss = tape.cross_entropy(logits, &targets).unwrap();

        let mut expect = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &data[i * 5..(i + 1) * 5];
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            expect += lse - row[t];
        }
        expect /= 4.0;
        assert!((tape.value(loss).item() - expect).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(t2(1, 4, &[0.0; 4]));
        assert!(tape.cross_entropy(logits, &[4]).is_err());
    }

    #[test]
    fn bce_half_is_ln_two() {
        let mut tape = Tape::<f64>::new();
        let pred = tape.leaf(t2(2, 3, &[0.5; 6]));
        let target = t2(2, 3, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let loss = tape.bce_loss(pred, &target).unwrap();
        assert!((tape.value(loss).item() - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_perfect_prediction_is_tiny() {
        let mut tape = Tape::<f64>::new();
        let target = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let pred = tape.leaf(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let loss = tape.bce_loss(pred, &target).unwrap();
        assert!(tape.value(loss).item() <= 1.2e-7);
    }

    #[test]
    fn bce_matches_elementwise_oracle() {
        let mut rng = crate::rng::Rng::new(5);
        let pred_data: Vec<f64> = (0..12).map(|_| rng.uniform(0.05, 0.95)).collect();
        let target_data: Vec<f64> = (0..12).map(|_| rng.below(2) as f64).collect();
        let target = Tensor::from_vec(vec![2, 2, 3], target_data.clone()).unwrap();
        let mut tape = Tape::<f64>::new();
        let pred = tape.leaf(Tensor::from_vec(vec![2, 2, 3], pred_data.clone()).unwrap());
        let loss = tape.bce_loss(pred, &target).unwrap();

        let expect: f64 = pred_data
            .iter()
            .zip(&target_data)
            .map(|(&p, &t)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
            .sum::<f64>()
            / 12.0;
        assert!((tape.value(loss).item() - expect).abs() < 1e-6);
    }

    #[test]
    fn binarize_maps_zero_to_minus_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![4], vec![0.7, -0.2, 0.0, 1e-9]).unwrap());
        let y = tape.binarize_ste(x);
        assert_eq!(tape.value(y).data(), &[1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn binarize_idempotent_on_signs() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, -1.0]).unwrap());
        let y = tape.binarize_ste(x);
        let z = tape.binarize_ste(y);
        assert_eq!(tape.value(z).data(), &[1.0, -1.0]);
    }

    #[test]
    fn ste_gradient_passes_through_within_unit_interval() {
        // Straight-through contract: gradient at the binarizer input equals
        // the gradient at its output wherever |x| <= 1, and is cut outside.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![4], vec![0.3, -0.8, 1.7, -2.5]).unwrap());
        let y = tape.binarize_ste(x);
        let weights = Tensor::from_vec(vec![4], vec![0.9, -1.3, 0.4, 2.0]).unwrap();
        let loss = tape.dot_const(y, &weights).unwrap();
        tape.backward(loss).unwrap();
        let gy = tape.grad(y).data().to_vec();
        let gx = tape.grad(x).data().to_vec();
        assert_eq!(gx[0], gy[0]);
        assert_eq!(gx[1], gy[1]);
        assert_eq!(gx[2], 0.0);
        assert_eq!(gx[3], 0.0);
    }

    #[test]
    fn vq_picks_nearest_with_tie_to_lowest() {
        let mut tape = Tape::<f64>::new();
        let codebook = tape.leaf(t2(2, 2, &[0.0, 0.0, 1.0, 1.0]));
        let z = tape.leaf(t2(1, 2, &[0.9, 0.8]));
        let (_, idx) = tape.vq_quantize_ste(z, codebook).unwrap();
        assert_eq!(idx, vec![1]);

        // Equidistant query: lowest index wins.
        let mut tape = Tape::<f64>::new();
        let codebook = tape.leaf(t2(2, 1, &[-1.0, 1.0]));
        let z = tape.leaf(t2(1, 1, &[0.0]));
        let (_, idx) = tape.vq_quantize_ste(z, codebook).unwrap();
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn vq_exact_match_has_zero_error() {
        let mut tape = Tape::<f64>::new();
        let codebook = tape.leaf(t2(3, 2, &[0.0, 0.0, 0.5, -0.5, 1.0, 1.0]));
        let z = tape.leaf(t2(1, 2, &[0.5, -0.5]));
        let (q, idx) = tape.vq_quantize_ste(z, codebook).unwrap();
        assert_eq!(idx, vec![1]);
        assert_eq!(tape.value(q).data(), &[0.5, -0.5]);
        let cb_loss = tape.vq_codebook_loss(z, codebook, &idx).unwrap();
        let commit = tape.vq_commitment_loss(z, codebook, &idx).unwrap();
        assert_eq!(tape.value(cb_loss).item(), 0.0);
        assert_eq!(tape.value(commit).item(), 0.0);
    }

    #[test]
    fn vq_matches_exhaustive_scan() {
        let mut rng = crate::rng::Rng::new(33);
        let dim = 4;
        let rows = 16;
        let cb_data: Vec<f64> = (0..rows * dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
        for _ in 0..100 {
            let q: Vec<f64> = (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let got = nearest_code(&q, &cb_data, dim);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for r in 0..rows {
                let d: f64 = (0..dim)
                    .map(|j| (q[j] - cb_data[r * dim + j]).powi(2))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = r;
                }
            }
            assert_eq!(got, best);
        }
    }

    #[test]
    fn empty_codebook_rejected() {
        let mut tape = Tape::<f64>::new();
        let codebook = tape.leaf(Tensor::from_vec(vec![0, 2], vec![]).unwrap());
        let z = tape.leaf(t2(1, 2, &[0.0, 0.0]));
        assert!(tape.vq_quantize_ste(z, codebook).is_err());
    }

    #[test]
    fn gather_and_concat_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let top = tape.gather_rows(x, &[0]).unwrap();
        let rest = tape.gather_rows(x, &[1, 2]).unwrap();
        let back = tape.concat_rows(&[top, rest]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(2, 2, &[1.0; 4]));
        assert!(tape.backward(x).is_err());
    }
}
