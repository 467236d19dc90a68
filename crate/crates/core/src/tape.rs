//! Reverse-mode autodiff over an explicitly recorded operation tape.
//!
//! Forward calls compute immediately and append an op record; `backward`
//! replays the records in reverse, accumulating vector-Jacobian products.
//! Nodes whose inputs carry no trainable ancestry are pruned from the
//! backward pass (`needs_grad` propagation), which is what keeps the frozen
//! encoder cheap to train through.

use crate::kernels;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a value on the tape.
pub type ValueId = usize;

struct Node<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    needs_grad: bool,
}

enum Op<S: Scalar> {
    Matmul { a: ValueId, b: ValueId, out: ValueId, m: usize, k: usize, n: usize },
    /// out = a @ b^T with b: [n,k]
    MatmulTB { a: ValueId, b: ValueId, out: ValueId, m: usize, k: usize, n: usize },
    Conv2d {
        input: ValueId,
        kernel: ValueId,
        bias: ValueId,
        out: ValueId,
        ci: usize,
        h: usize,
        w: usize,
        co: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool2 { input: ValueId, out: ValueId, argmax: Vec<u32> },
    Resize { input: ValueId, out: ValueId, c: usize, h: usize, w: usize, oh: usize, ow: usize },
    Patchify { image: ValueId, out: ValueId, c: usize, h: usize, w: usize, patch: usize },
    SoftmaxRows { out: ValueId, input: ValueId, rows: usize, cols: usize },
    LayerNorm {
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        out: ValueId,
        rows: usize,
        cols: usize,
        mean: Vec<S>,
        rstd: Vec<S>,
    },
    AddRowBias { input: ValueId, bias: ValueId, out: ValueId, rows: usize, cols: usize },
    Sigmoid { input: ValueId, out: ValueId },
    Relu { input: ValueId, out: ValueId },
    Gelu { input: ValueId, out: ValueId },
    Log { input: ValueId, out: ValueId },
    Add { a: ValueId, b: ValueId, out: ValueId },
    Sub { a: ValueId, b: ValueId, out: ValueId },
    Mul { a: ValueId, b: ValueId, out: ValueId },
    AffineConst { input: ValueId, out: ValueId, mul: S },
    MulConst { input: ValueId, out: ValueId, weights: Vec<S> },
    ScalarMul { input: ValueId, scalar: ValueId, out: ValueId },
    MulChannelMap { input: ValueId, map: ValueId, out: ValueId, c: usize, hw: usize },
    ConcatCh { a: ValueId, b: ValueId, out: ValueId, a_len: usize },
    SliceCols { input: ValueId, out: ValueId, rows: usize, cols: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<(ValueId, usize)>, out: ValueId, rows: usize },
    Sum { input: ValueId, out: ValueId },
    DivScalars { num: ValueId, den: ValueId, out: ValueId },
    /// Per-row weighted sum `out[i] = sum_j w[j] * x[i,j]`, accumulated in a
    /// canonical value order so permuting (columns, weights) together leaves
    /// the result bit-identical.
    SimAggregate { sims: ValueId, weights: ValueId, out: ValueId, n: usize, k: usize },
    CosineSim { a: ValueId, b: ValueId, out: ValueId, n: usize, d: usize, k: usize, eps: S },
    Reshape { input: ValueId, out: ValueId },
}

/// Operation tape: value arena plus the recorded forward ops.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    ops: Vec<Op<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), ops: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, needs_grad: bool) -> ValueId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = self.nodes.len();
        self.nodes.push(Node { shape, data, needs_grad });
        self.grads.push(None);
        id
    }

    /// Register a tensor as a leaf; trainable tensors receive gradients.
    pub fn leaf(&mut self, t: &Tensor<S>) -> ValueId {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.is_trainable())
    }

    /// Register a read-only input (never receives gradients).
    pub fn constant(&mut self, t: &Tensor<S>) -> ValueId {
        self.push(t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn leaf_from(&mut self, shape: &[usize], data: Vec<S>, needs_grad: bool) -> ValueId {
        self.push(shape.to_vec(), data, needs_grad)
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn value(&self, id: ValueId) -> &[S] {
        &self.nodes[id].data
    }

    pub fn value_scalar(&self, id: ValueId) -> S {
        debug_assert_eq!(self.nodes[id].data.len(), 1);
        self.nodes[id].data[0]
    }

    pub fn grad(&self, id: ValueId) -> Option<&[S]> {
        self.grads[id].as_deref()
    }

    pub fn to_tensor(&self, id: ValueId) -> Tensor<S> {
        Tensor::from_vec(&self.nodes[id].shape, self.nodes[id].data.clone()).expect("node invariant")
    }

    fn needs(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    // ---- forward ops ---------------------------------------------------

    /// out = a @ b with a: [m,k], b: [k,n].
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::config(format!("matmul shape mismatch: {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![S::ZERO; m * n];
        kernels::matmul_acc(&self.nodes[a].data, &self.nodes[b].data, &mut data, m, k, n);
        let out = self.push(vec![m, n], data, self.needs(&[a, b]));
        self.ops.push(Op::Matmul { a, b, out, m, k, n });
        Ok(out)
    }

    /// out = a @ b^T with a: [m,k], b: [n,k].
    pub fn matmul_tb(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::config(format!("matmul_tb shape mismatch: {:?} x {:?}^T", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut data = vec![S::ZERO; m * n];
        kernels::matmul_tb_acc(&self.nodes[a].data, &self.nodes[b].data, &mut data, m, k, n);
        let out = self.push(vec![m, n], data, self.needs(&[a, b]));
        self.ops.push(Op::MatmulTB { a, b, out, m, k, n });
        Ok(out)
    }

    /// Cross-correlation of input [ci,h,w] with kernel [co,ci,kh,kw] plus bias [co].
    pub fn conv2d(
        &mut self,
        input: ValueId,
        kernel: ValueId,
        bias: ValueId,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        let si = self.nodes[input].shape.clone();
        let sk = self.nodes[kernel].shape.clone();
        let sb = self.nodes[bias].shape.clone();
        if si.len() != 3 || sk.len() != 4 {
            return Err(Error::config(format!(
                "conv2d expects input [C,H,W] and kernel [Co,Ci,kh,kw], got {:?} and {:?}",
                si, sk
            )));
        }
        let (ci, h, w) = (si[0], si[1], si[2]);
        let (co, kci, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if kci != ci {
            return Err(Error::config(format!(
                "conv2d channel mismatch: input has {} channels, kernel expects {}",
                ci, kci
            )));
        }
        if sb != [co] {
            return Err(Error::config(format!("conv2d bias shape {:?}, expected [{}]", sb, co)));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be >= 1"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::config(format!(
                "conv2d kernel {}x{} exceeds padded input {}x{}",
                kh,
                kw,
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let oh = kernels::conv_out_dim(h, kh, stride, pad);
        let ow = kernels::conv_out_dim(w, kw, stride, pad);
        let kdim = ci * kh * kw;
        let n = oh * ow;
        let mut cols = vec![S::ZERO; kdim * n];
        kernels::im2col(&self.nodes[input].data, ci, h, w, kh, kw, stride, pad, &mut cols);
        let mut data = vec![S::ZERO; co * n];
        kernels::matmul_acc(&self.nodes[kernel].data, &cols, &mut data, co, kdim, n);
        for c in 0..co {
            let bv = self.nodes[bias].data[c];
            for v in data[c * n..(c + 1) * n].iter_mut() {
                *v += bv;
            }
        }
        let out = self.push(vec![co, oh, ow], data, self.needs(&[input, kernel, bias]));
        self.ops.push(Op::Conv2d { input, kernel, bias, out, ci, h, w, co, kh, kw, stride, pad });
        Ok(out)
    }

    /// 2x2 stride-2 max pooling over [c,h,w]; h and w must be even.
    pub fn maxpool2(&mut self, input: ValueId) -> Result<ValueId> {
        let s = self.nodes[input].shape.clone();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::config(format!("maxpool2 needs [C,2a,2b], got {:?}", s)));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut data = vec![S::ZERO; c * (h / 2) * (w / 2)];
        let mut argmax = vec![0u32; data.len()];
        kernels::maxpool2(&self.nodes[input].data, c, h, w, &mut data, &mut argmax);
        let out = self.push(vec![c, h / 2, w / 2], data, self.nodes[input].needs_grad);
        self.ops.push(Op::MaxPool2 { input, out, argmax });
        Ok(out)
    }

    /// Bilinear resize (align-corners-false, edges clamped) of [c,h,w] to [c,oh,ow].
    pub fn resize(&mut self, input: ValueId, oh: usize, ow: usize) -> Result<ValueId> {
        let s = self.nodes[input].shape.clone();
        if s.len() != 3 {
            return Err(Error::config(format!("resize expects [C,H,W], got {:?}", s)));
        }
        if oh == 0 || ow == 0 {
            return Err(Error::config(format!("resize target {}x{} has a zero dimension", oh, ow)));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut data = vec![S::ZERO; c * oh * ow];
        for ch in 0..c {
            kernels::resize_plane(
                &self.nodes[input].data[ch * h * w..(ch + 1) * h * w],
                h,
                w,
                oh,
                ow,
                &mut data[ch * oh * ow..(ch + 1) * oh * ow],
            );
        }
        let out = self.push(vec![c, oh, ow], data, self.nodes[input].needs_grad);
        self.ops.push(Op::Resize { input, out, c, h, w, oh, ow });
        Ok(out)
    }

    /// Rearrange [c,h,w] into per-patch rows [(h/p)*(w/p), c*p*p].
    pub fn patchify(&mut self, image: ValueId, patch: usize) -> Result<ValueId> {
        let s = self.nodes[image].shape.clone();
        if s.len() != 3 {
            return Err(Error::config(format!("patchify expects [C,H,W], got {:?}", s)));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::config(format!(
                "patch size {} does not divide image {}x{}",
                patch, h, w
            )));
        }
        let (gh, gw) = (h / patch, w / patch);
        let n = gh * gw;
        let dim = c * patch * patch;
        let mut data = vec![S::ZERO; n * dim];
        let src = &self.nodes[image].data;
        for gy in 0..gh {
            for gx in 0..gw {
                let row = &mut data[(gy * gw + gx) * dim..(gy * gw + gx + 1) * dim];
                for ch in 0..c {
                    for py in 0..patch {
                        for px in 0..patch {
                            row[(ch * patch + py) * patch + px] =
                                src[ch * h * w + (gy * patch + py) * w + gx * patch + px];
                        }
                    }
                }
            }
        }
        let out = self.push(vec![n, dim], data, self.nodes[image].needs_grad);
        self.ops.push(Op::Patchify { image, out, c, h, w, patch });
        Ok(out)
    }

    pub fn softmax_rows(&mut self, input: ValueId) -> Result<ValueId> {
        let s = self.nodes[input].shape.clone();
        if s.len() != 2 {
            return Err(Error::config(format!("softmax_rows expects [R,C], got {:?}", s)));
        }
        let (rows, cols) = (s[0], s[1]);
        let mut data = vec![S::ZERO; rows * cols];
        kernels::softmax_rows(&self.nodes[input].data, rows, cols, &mut data);
        let out = self.push(s, data, self.nodes[input].needs_grad);
        self.ops.push(Op::SoftmaxRows { input, out, rows, cols });
        Ok(out)
    }

    /// Row-wise layer normalization with affine parameters gamma/beta of [cols].
    pub fn layer_norm(
        &mut self,
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> Result<ValueId> {
        let s = self.nodes[input].shape.clone();
        if s.len() != 2 {
            return Err(Error::config(format!("layer_norm expects [R,C], got {:?}", s)));
        }
        let (rows, cols) = (s[0], s[1]);
        if self.nodes[gamma].shape != [cols] || self.nodes[beta].shape != [cols] {
            return Err(Error::config(format!(
                "layer_norm affine shapes {:?}/{:?}, expected [{}]",
                self.nodes[gamma].shape, self.nodes[beta].shape, cols
            )));
        }
        let epss = S::from_f64(eps);
        let inv_c = S::from_f64(1.0 / cols as f64);
        let mut data = vec![S::ZERO; rows * cols];
        let mut means = vec![S::ZERO; rows];
        let mut rstds = vec![S::ZERO; rows];
        for r in 0..rows {
            let x = &self.nodes[input].data[r * cols..(r + 1) * cols];
            let mean = x.iter().copied().sum::<S>() * inv_c;
            let mut var = S::ZERO;
            for &v in x {
                let d = v - mean;
                var = d.mul_add_s(d, var);
            }
            var = var * inv_c;
            let rstd = S::ONE / (var + epss).sqrt();
            means[r] = mean;
            rstds[r] = rstd;
            let out_row = &mut data[r * cols..(r + 1) * cols];
            for (j, o) in out_row.iter_mut().enumerate() {
                let xhat = (x[j] - mean) * rstd;
                *o = xhat * self.nodes[gamma].data[j] + self.nodes[beta].data[j];
            }
        }
        let out = self.push(s, data, self.needs(&[input, gamma, beta]));
        self.ops.push(Op::LayerNorm { input, gamma, beta, out, rows, cols, mean: means, rstd: rstds });
        Ok(out)
    }

    /// x[r,c] + bias[c] broadcast over rows.
    pub fn add_row_bias(&mut self, input: ValueId, bias: ValueId) -> Result<ValueId> {
        let s = self.nodes[input].shape.clone();
        if s.len() != 2 || self.nodes[bias].shape != [s[1]] {
            return Err(Error::config(format!(
                "add_row_bias: input {:?} with bias {:?}",
                s, self.nodes[bias].shape
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        let mut data = self.nodes[input].data.clone();
        for r in 0..rows {
            for (o, &b) in data[r * cols..(r + 1) * cols].iter_mut().zip(self.nodes[bias].data.iter()) {
                *o += b;
            }
        }
        let out = self.push(s, data, self.needs(&[input, bias]));
        self.ops.push(Op::AddRowBias { input, bias, out, rows, cols });
        Ok(out)
    }

    pub fn sigmoid(&mut self, input: ValueId) -> ValueId {
        let data: Vec<S> = self.nodes[input].data.iter().map(|&x| kernels::sigmoid(x)).collect();
        let shape = self.nodes[input].shape.clone();
        let out = self.push(shape, data, self.nodes[input].needs_grad);
        self.ops.push(Op::Sigmoid { input, out });
        out
    }

    pub fn relu(&mut self, input: ValueId) -> ValueId {
        let data: Vec<S> = self.nodes[input].data.iter().map(|&x| x.max_s(S::ZERO)).collect();
        let shape = self.nodes[input].shape.clone();
        let out = self.push(shape, data, self.nodes[input].needs_grad);
        self.ops.push(Op::Relu { input, out });
        out
    }

    pub fn gelu(&mut self, input: ValueId) -> ValueId {
        let data: Vec<S> = self.nodes[input].data.iter().map(|&x| kernels::gelu(x)).collect();
        let shape = self.nodes[input].shape.clone();
        let out = self.push(shape, data, self.nodes[input].needs_grad);
        self.ops.push(Op::Gelu { input, out });
        out
    }

    /// Natural log; caller guarantees positive inputs (losses clamp upstream).
    pub fn log(&mut self, input: ValueId) -> ValueId {
        let data: Vec<S> = self.nodes[input].data.iter().map(|&x| x.ln()).collect();
        let shape = self.nodes[input].shape.clone();
        let out = self.push(shape, data, self.nodes[input].needs_grad);
        self.ops.push(Op::Log { input, out });
        out
    }

    fn binary_same_shape(&self, a: ValueId, b: ValueId, name: &str) -> Result<()> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::config(format!(
                "{} shape mismatch: {:?} vs {:?}",
                name, self.nodes[a].shape, self.nodes[b].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape(a, b, "add")?;
        let data: Vec<S> = self.nodes[a]
            .data
            .iter()
            .zip(self.nodes[b].data.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        let out = self.push(shape, data, self.needs(&[a, b]));
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape(a, b, "sub")?;
        let data: Vec<S> = self.nodes[a]
            .data
            .iter()
            .zip(self.nodes[b].data.iter())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        let out = self.push(shape, data, self.needs(&[a, b]));
        self.ops.push(Op::Sub { a, b, out });
        Ok(out)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape(a, b, "mul")?;
        let data: Vec<S> = self.nodes[a]
            .data
            .iter()
            .zip(self.nodes[b].data.iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        let out = self.push(shape, data, self.needs(&[a, b]));
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    /// mul * x + add, with compile-time constants.
    pub fn affine(&mut self, input: ValueId, mul: f64, add: f64) -> ValueId {
        let m = S::from_f64(mul);
        let a = S::from_f64(add);
        let data: Vec<S> = self.nodes[input].data.iter().map(|&x| m * x + a).collect();
        let shape = self.nodes[input].shape.clone();
        let out = self.push(shape, data, self.nodes[input].needs_grad);
        self.ops.push(Op::AffineConst { input, out, mul: m });
        out
    }

    /// Elementwise product with a fixed weight vector (no gradient to weights).
    pub fn mul_const(&mut self, input: ValueId, weights: Vec<S>) -> Result<ValueId> {
        if weights.len() != self.nodes[input].data.len() {
            return Err(Error::config(format!(
                "mul_const weights length {} vs input {}",
                weights.len(),
                self.nodes[input].data.len()
            )));
        }
        let data: Vec<S> =
            self.nodes[input].data.iter().zip(weights.iter()).map(|(&x, &w)| x * w).collect();
        let shape = self.nodes[input].shape.clone();
        let out = self.push(shape, data, self.nodes[input].needs_grad);
        self.ops.push(Op::MulConst { input, out, weights });
        Ok(out)
    }

    /// Multiply every entry of `input` by a single-element node `scalar`.
    pub fn scalar_mul(&mut self, input: ValueId, scalar: ValueId) -> Result<ValueId> {
        if self.nodes[scalar].data.len() != 1 {
            return Err(Error::config(format!(
                "scalar_mul expects a [1] scalar node, got {:?}",
                self.nodes[scalar].shape
            )));
        }
        let sv = self.nodes[scalar].data[0];
        let data: Vec<S> = self.nodes[input].data.iter().map(|&x| sv * x).collect();
        let shape = self.nodes[input].shape.clone();
        let out = self.push(shape, data, self.needs(&[input, scalar]));
        self.ops.push(Op::ScalarMul { input, scalar, out });
        Ok(out)
    }

    /// x[c,h,w] * map[h,w] broadcast over channels.
    pub fn mul_channel_map(&mut self, input: ValueId, map: ValueId) -> Result<ValueId> {
        let si = self.nodes[input].shape.clone();
        let sm = self.nodes[map].shape.clone();
        if si.len() != 3 || sm != [si[1], si[2]] {
            return Err(Error::config(format!(
                "mul_channel_map: features {:?} with map {:?}",
                si, sm
            )));
        }
        let (c, hw) = (si[0], si[1] * si[2]);
        let mut data = vec![S::ZERO; c * hw];
        for ch in 0..c {
            let x = &self.nodes[input].data[ch * hw..(ch + 1) * hw];
            let o = &mut data[ch * hw..(ch + 1) * hw];
            for ((oo, &xx), &mm) in o.iter_mut().zip(x.iter()).zip(self.nodes[map].data.iter()) {
                *oo = xx * mm;
            }
        }
        let out = self.push(si, data, self.needs(&[input, map]));
        self.ops.push(Op::MulChannelMap { input, map, out, c, hw });
        Ok(out)
    }

    /// Concatenate along the channel axis: [c1,h,w] ++ [c2,h,w].
    pub fn concat_ch(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.nodes[a].shape.clone(), self.nodes[b].shape.clone());
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(Error::config(format!("concat_ch spatial mismatch: {:?} vs {:?}", sa, sb)));
        }
        let mut data = self.nodes[a].data.clone();
        data.extend_from_slice(&self.nodes[b].data);
        let a_len = self.nodes[a].data.len();
        let out = self.push(vec![sa[0] + sb[0], sa[1], sa[2]], data, self.needs(&[a, b]));
        self.ops.push(Op::ConcatCh { a, b, out, a_len });
        Ok(out)
    }

    /// Columns [start, start+len) of a [rows, cols] matrix.
    pub fn slice_cols(&mut self, input: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let s = self.nodes[input].shape.clone();
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::config(format!(
                "slice_cols [{}..{}) out of bounds for {:?}",
                start,
                start + len,
                s
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        let mut data = vec![S::ZERO; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&self.nodes[input].data[r * cols + start..r * cols + start + len]);
        }
        let out = self.push(vec![rows, len], data, self.nodes[input].needs_grad);
        self.ops.push(Op::SliceCols { input, out, rows, cols, start, len });
        Ok(out)
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, ids: &[ValueId]) -> Result<ValueId> {
        if ids.is_empty() {
            return Err(Error::config("concat_cols needs at least one part"));
        }
        let rows = self.nodes[ids[0]].shape[0];
        let mut parts = Vec::with_capacity(ids.len());
        let mut total = 0usize;
        for &id in ids {
            let s = &self.nodes[id].shape;
            if s.len() != 2 || s[0] != rows {
                return Err(Error::config(format!("concat_cols row mismatch: {:?}", s)));
            }
            parts.push((id, s[1]));
            total += s[1];
        }
        let mut data = vec![S::ZERO; rows * total];
        let mut off = 0usize;
        for &(id, cols) in &parts {
            for r in 0..rows {
                data[r * total + off..r * total + off + cols]
                    .copy_from_slice(&self.nodes[id].data[r * cols..(r + 1) * cols]);
            }
            off += cols;
        }
        let needs = self.needs(ids);
        let out = self.push(vec![rows, total], data, needs);
        self.ops.push(Op::ConcatCols { parts, out, rows });
        Ok(out)
    }

    /// Sum of all entries, as a [1] node.
    pub fn sum(&mut self, input: ValueId) -> ValueId {
        let total: S = self.nodes[input].data.iter().copied().sum();
        let out = self.push(vec![1], vec![total], self.nodes[input].needs_grad);
        self.ops.push(Op::Sum { input, out });
        out
    }

    /// Mean of all entries, as a [1] node.
    pub fn mean(&mut self, input: ValueId) -> ValueId {
        let n = self.nodes[input].data.len();
        let s = self.sum(input);
        self.affine(s, 1.0 / n as f64, 0.0)
    }

    /// out[i] = sum_j weights[j] * sims[i,j], with the per-row sum taken in a
    /// canonical (sorted) order: permutation-invariant down to the bit.
    pub fn sim_aggregate(&mut self, sims: ValueId, weights: ValueId) -> Result<ValueId> {
        let ss = self.nodes[sims].shape.clone();
        let sw = self.nodes[weights].shape.clone();
        if ss.len() != 2 || sw != [ss[1]] {
            return Err(Error::config(format!(
                "sim_aggregate: sims {:?} with weights {:?}",
                ss, sw
            )));
        }
        let (n, k) = (ss[0], ss[1]);
        let mut data = vec![S::ZERO; n];
        let mut products: Vec<S> = vec![S::ZERO; k];
        for i in 0..n {
            let row = &self.nodes[sims].data[i * k..(i + 1) * k];
            for (p, (&s, &w)) in products.iter_mut().zip(row.iter().zip(self.nodes[weights].data.iter()))
            {
                *p = s * w;
            }
            products.sort_by(|a, b| a.total_cmp_s(b));
            data[i] = products.iter().copied().sum();
        }
        let out = self.push(vec![n], data, self.needs(&[sims, weights]));
        self.ops.push(Op::SimAggregate { sims, weights, out, n, k });
        Ok(out)
    }

    /// num / den for [1] nodes.
    pub fn div_scalars(&mut self, num: ValueId, den: ValueId) -> Result<ValueId> {
        if self.nodes[num].data.len() != 1 || self.nodes[den].data.len() != 1 {
            return Err(Error::config("div_scalars expects [1] nodes"));
        }
        let v = self.nodes[num].data[0] / self.nodes[den].data[0];
        let out = self.push(vec![1], vec![v], self.needs(&[num, den]));
        self.ops.push(Op::DivScalars { num, den, out });
        Ok(out)
    }

    /// Pairwise cosine similarity out[i,j] = a_i . b_j / (|a_i||b_j| + eps)
    /// for a: [n,d], b: [k,d].
    pub fn cosine_sim(&mut self, a: ValueId, b: ValueId, eps: f64) -> Result<ValueId> {
        let (sa, sb) = (self.nodes[a].shape.clone(), self.nodes[b].shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::config(format!(
                "cosine_sim dimension mismatch: {:?} vs {:?}",
                sa, sb
            )));
        }
        let (n, d, k) = (sa[0], sa[1], sb[0]);
        let epss = S::from_f64(eps);
        let norm = |row: &[S]| -> S {
            let mut acc = S::ZERO;
            for &v in row {
                acc = v.mul_add_s(v, acc);
            }
            acc.sqrt()
        };
        let na: Vec<S> = (0..n).map(|i| norm(&self.nodes[a].data[i * d..(i + 1) * d])).collect();
        let nb: Vec<S> = (0..k).map(|j| norm(&self.nodes[b].data[j * d..(j + 1) * d])).collect();
        let mut data = vec![S::ZERO; n * k];
        for i in 0..n {
            let arow = &self.nodes[a].data[i * d..(i + 1) * d];
            for j in 0..k {
                let brow = &self.nodes[b].data[j * d..(j + 1) * d];
                let mut dot = S::ZERO;
                for (&x, &y) in arow.iter().zip(brow.iter()) {
                    dot = x.mul_add_s(y, dot);
                }
                data[i * k + j] = dot / (na[i] * nb[j] + epss);
            }
        }
        let out = self.push(vec![n, k], data, self.needs(&[a, b]));
        self.ops.push(Op::CosineSim { a, b, out, n, d, k, eps: epss });
        Ok(out)
    }

    /// Same data, new shape (copied so the node arena stays append-only).
    pub fn reshape(&mut self, input: ValueId, shape: &[usize]) -> Result<ValueId> {
        let n: usize = shape.iter().product();
        if n != self.nodes[input].data.len() {
            return Err(Error::config(format!(
                "reshape {:?} -> {:?} changes element count",
                self.nodes[input].shape, shape
            )));
        }
        let data = self.nodes[input].data.clone();
        let out = self.push(shape.to_vec(), data, self.nodes[input].needs_grad);
        self.ops.push(Op::Reshape { input, out });
        Ok(out)
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar loss node. Seeds d(loss)/d(loss) = 1.
    pub fn backward(&mut self, loss: ValueId) {
        assert_eq!(self.nodes[loss].data.len(), 1, "backward expects a scalar loss node");
        if self.grads[loss].is_none() {
            self.grads[loss] = Some(vec![S::ONE]);
        }
        let Tape { nodes, grads, ops } = self;
        for op in ops.iter().rev() {
            backward_op(nodes, grads, op);
        }
    }
}

fn acc_grad<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    id: ValueId,
    f: impl FnOnce(&mut [S]),
) {
    if !nodes[id].needs_grad {
        return;
    }
    let g = grads[id].get_or_insert_with(|| vec![S::ZERO; nodes[id].data.len()]);
    f(g);
}

#[allow(clippy::too_many_lines)]
fn backward_op<S: Scalar>(nodes: &[Node<S>], grads: &mut [Option<Vec<S>>], op: &Op<S>) {
    macro_rules! take_dout {
        ($out:expr) => {
            match grads[*$out].take() {
                Some(d) => d,
                None => return,
            }
        };
    }

    match op {
        Op::Matmul { a, b, out, m, k, n } => {
            let d_out = take_dout!(out);
            // d_a = d_out @ b^T ; d_b = a^T @ d_out
            acc_grad(nodes, grads, *a, |g| {
                kernels::matmul_tb_acc(&d_out, &nodes[*b].data, g, *m, *n, *k);
            });
            acc_grad(nodes, grads, *b, |g| {
                kernels::matmul_ta_acc(&nodes[*a].data, &d_out, g, *m, *k, *n);
            });
            grads[*out] = Some(d_out);
        }
        Op::MatmulTB { a, b, out, m, k, n } => {
            let d_out = take_dout!(out);
            // out = a @ b^T: d_a = d_out @ b ; d_b = d_out^T @ a
            acc_grad(nodes, grads, *a, |g| {
                kernels::matmul_acc(&d_out, &nodes[*b].data, g, *m, *n, *k);
            });
            acc_grad(nodes, grads, *b, |g| {
                kernels::matmul_ta_acc(&d_out, &nodes[*a].data, g, *m, *n, *k);
            });
            grads[*out] = Some(d_out);
        }
        Op::Conv2d { input, kernel, bias, out, ci, h, w, co, kh, kw, stride, pad } => {
            let d_out = take_dout!(out);
            let oh = kernels::conv_out_dim(*h, *kh, *stride, *pad);
            let ow = kernels::conv_out_dim(*w, *kw, *stride, *pad);
            let n = oh * ow;
            let kdim = ci * kh * kw;
            acc_grad(nodes, grads, *bias, |g| {
                for c in 0..*co {
                    let mut s = S::ZERO;
                    for &v in &d_out[c * n..(c + 1) * n] {
                        s += v;
                    }
                    g[c] += s;
                }
            });
            if nodes[*kernel].needs_grad {
                // d_W = d_out [co,n] @ cols^T [n,kdim]; cols recomputed from the input.
                let mut cols = vec![S::ZERO; kdim * n];
                kernels::im2col(&nodes[*input].data, *ci, *h, *w, *kh, *kw, *stride, *pad, &mut cols);
                acc_grad(nodes, grads, *kernel, |g| {
                    kernels::matmul_tb_acc(&d_out, &cols, g, *co, n, kdim);
                });
            }
            if nodes[*input].needs_grad {
                // d_cols = W^T [kdim,co] @ d_out [co,n], then scatter back.
                let mut d_cols = vec![S::ZERO; kdim * n];
                kernels::matmul_ta_acc(&nodes[*kernel].data, &d_out, &mut d_cols, *co, kdim, n);
                acc_grad(nodes, grads, *input, |g| {
                    kernels::col2im_acc(&d_cols, *ci, *h, *w, *kh, *kw, *stride, *pad, g);
                });
            }
            grads[*out] = Some(d_out);
        }
        Op::MaxPool2 { input, out, argmax } => {
            let d_out = take_dout!(out);
            acc_grad(nodes, grads, *input, |g| {
                for (&src, &d) in argmax.iter().zip(d_out.iter()) {
                    g[src as usize] += d;
                }
            });
            grads[*out] = Some(d_out);
        }
        Op::Resize { input, out, c, h, w, oh, ow } => {
            let d_out = take_dout!(out);
            acc_grad(nodes, grads, *input, |g| {
                for ch in 0..*c {
                    kernels::resize_plane_grad_acc(
                        &d_out[ch * oh * ow..(ch + 1) * oh * ow],
                        *h,
                        *w,
                        *oh,
                        *ow,
                        &mut g[ch * h * w..(ch + 1) * h * w],
                    );
                }
            });
            grads[*out] = Some(d_out);
        }
        Op::Patchify { image, out, c, h, w, patch } => {
            let d_out = take_dout!(out);
            let (gh, gw) = (h / patch, w / patch);
            let dim = c * patch * patch;
            acc_grad(nodes, grads, *image, |g| {
                for gy in 0..gh {
                    for gx in 0..gw {
                        let row = &d_out[(gy * gw + gx) * dim..(gy * gw + gx + 1) * dim];
                        for ch in 0..*c {
                            for py in 0..*patch {
                                for px in 0..*patch {
                                    g[ch * h * w + (gy * patch + py) * w + gx * patch + px] +=
                                        row[(ch * patch + py) * patch + px];
                                }
                            }
                        }
                    }
                }
            });
            grads[*out] = Some(d_out);
        }
        Op::SoftmaxRows { input, out, rows, cols } => {
            let d_out = take_dout!(out);
            acc_grad(nodes, grads, *input, |g| {
                for r in 0..*rows {
                    let y = &nodes[*out].data[r * cols..(r + 1) * cols];
                    let d = &d_out[r * cols..(r + 1) * cols];
                    let mut dot = S::ZERO;
                    for (&yv, &dv) in y.iter().zip(d.iter()) {
                        dot = yv.mul_add_s(dv, dot);
                    }
                    let grow = &mut g[r * cols..(r + 1) * cols];
                    for ((gv, &yv), &dv) in grow.iter_mut().zip(y.iter()).zip(d.iter()) {
                        *gv += yv * (dv - dot);
                    }
                }
            });
            grads[*out] = Some(d_out);
        }
        Op::LayerNorm { input, gamma, beta, out, rows, cols, mean, rstd } => {
            let d_out = take_dout!(out);
            let inv_c = S::from_f64(1.0 / *cols as f64);
            acc_grad(nodes, grads, *beta, |g| {
                for r in 0..*rows {
                    for (gv, &dv) in g.iter_mut().zip(d_out[r * cols..(r + 1) * cols].iter()) {
                        *gv += dv;
                    }
                }
            });
            acc_grad(nodes, grads, *gamma, |g| {
                for r in 0..*rows {
                    let x = &nodes[*input].data[r * cols..(r + 1) * cols];
                    let d = &d_out[r * cols..(r + 1) * cols];
                    for j in 0..*cols {
                        let xhat = (x[j] - mean[r]) * rstd[r];
                        g[j] += d[j] * xhat;
                    }
                }
            });
            acc_grad(nodes, grads, *input, |g| {
                for r in 0..*rows {
                    let x = &nodes[*input].data[r * cols..(r + 1) * cols];
                    let d = &d_out[r * cols..(r + 1) * cols];
                    // d_xhat = d_out * gamma; project out mean and xhat components.
                    let mut sum_dx = S::ZERO;
                    let mut sum_dx_xhat = S::ZERO;
                    for j in 0..*cols {
                        let xhat = (x[j] - mean[r]) * rstd[r];
                        let dx = d[j] * nodes[*gamma].data[j];
                        sum_dx += dx;
                        sum_dx_xhat = dx.mul_add_s(xhat, sum_dx_xhat);
                    }
                    let mean_dx = sum_dx * inv_c;
                    let mean_dx_xhat = sum_dx_xhat * inv_c;
                    let grow = &mut g[r * cols..(r + 1) * cols];
                    for j in 0..*cols {
                        let xhat = (x[j] - mean[r]) * rstd[r];
                        let dx = d[j] * nodes[*gamma].data[j];
                        grow[j] += rstd[r] * (dx - mean_dx - xhat * mean_dx_xhat);
                    }
                }
            });
            grads[*out] = Some(d_out);
        }
        Op::AddRowBias { input, bias, out, rows, cols } => {
            let d_out = take_dout!(out);
            acc_grad(nodes, grads, *input, |g| {
                for (gv, &dv) in g.iter_mut().zip(d_out.iter()) {
                    *gv += dv;
                }
            });
            acc_grad(nodes, grads, *bias, |g| {
                for r in 0..*rows {
                    for (gv, &dv) in g.iter_mut().zip(d_out[r * cols..(r + 1) * cols].iter()) {
                        *gv += dv;
                    }
                }
            });
            grads[*out] = Some(d_out);
        }
        Op::Sigmoid { input, out } => {
            let d_out = take_dout!(out);
            let (lo, hi) = S::sigmoid_bounds();
            acc_grad(nodes, grads, *input, |g| {
                for ((gv, &y), &dv) in g.iter_mut().zip(nodes[*out].data.iter()).zip(d_out.iter()) {
                    // zero slope on the clamped tails
                    if y > lo && y < hi {
                        *gv += dv * y * (S::ONE - y);
                    }
                }
            });
            grads[*out] = Some(d_out);
        }
        Op::Relu { input, out } => {
            let d_out = take_dout!(out);
            acc_grad(nodes, grads, *input, |g| {
                for ((gv, &x), &dv) in g.iter_mut().zip(nodes[*input].data.iter()).zip(d_out.iter()) {
                    if x > S::ZERO {
                        *gv += dv;
                    }
                }
            });
            grads[*out] = Some(d_out);
        }
        Op::Gelu { input, out } => {
            let d_out = take_dout!(out);
            acc_grad(nodes, grads, *input, |g| {
                for ((gv, &x), &dv) in g.iter_mut().zip(nodes[*input].data.iter()).zip(d_out.iter()) {
                    *gv += dv * kernels::gelu_grad(x);
                }
            });
            grads[*out] = Some(d_out);
        }
        Op::Log { input, out } => {
            let d_out = take_dout!(out);
            acc_grad(nodes, grads, *input, |g| {
                for ((gv, &x), &dv) in g.iter_mut().zip(nodes[*input].data.iter()).zip(d_out.iter()) {
                    *gv += dv / x;
                }
            });
            grads[*out] = Some(d_out);
        }
        Op::Add { a, b, out } => {
            let d_out = take_dout!(out);
            acc_grad(nodes, grads, *a, |g| {
                for (gv, &dv) in g.iter_mut().zip(d_out.iter()) {
                    *gv += dv;
                }
            });
            acc_grad(nodes, grads, *b, |g| {
                for (gv, &dv) in g.iter_mut().zip(d_out.iter()) {
                    *gv += dv;
                }
            });
            grads[*out] = Some(d_out);
        }
        Op::Sub { a, b, out } => {
            let d_out = take_dout!(out);
            acc_grad(nodes, grads, *a, |g| {
                for (gv, &dv) in g.iter_mut().zip(d_out.iter()) {
                    *gv += dv;
                }
            });
            acc_grad(nodes, grads, *b, |g| {
                for (gv, &dv) in g.iter_mut().zip(d_out.iter()) {
                    *gv = *gv - dv;
                }
            });
            grads[*out] = Some(d_out);
        }
        Op::Mul { a, b, out } => {
            let d_out = take_dout!(out);
            acc_grad(nodes, grads, *a, |g| {
                for ((gv, &bv), &dv) in g.iter_mut().zip(nodes[*b].data.iter()).zip(d_out.iter()) {
                    *gv = dv.mul_add_s(bv, *gv);
                }
            });
            acc_grad(nodes, grads, *b, |g| {
                for ((gv, &av), &dv) in g.iter_mut().zip(nodes[*a].data.iter()).zip(d_out.iter()) {
                    *gv = dv.mul_add_s(av, *gv);
                }
            });
            grads[*out] = Some(d_out);
        }
        Op::AffineConst { input, out, mul } => {
            let d_out = take_dout!(out);
            acc_grad(nodes, grads, *input, |g| {
                for (gv, &dv) in g.iter_mut().zip(d_out.iter()) {
                    *gv = dv.mul_add_s(*mul, *gv);
                }
            });
            grads[*out] = Some(d_out);
        }
        Op::MulConst { input, out, weights } => {
            let d_out = take_dout!(out);
            acc_grad(nodes, grads, *input, |g| {
                for ((gv, &wv), &dv) in g.iter_mut().zip(weights.iter()).zip(d_out.iter()) {
                    *gv = dv.mul_add_s(wv, *gv);
                }
            });
            grads[*out] = Some(d_out);
        }
        Op::ScalarMul { input, scalar, out } => {
            let d_out = take_dout!(out);
            let sv = nodes[*scalar].data[0];
            acc_grad(nodes, grads, *input, |g| {
                for (gv, &dv) in g.iter_mut().zip(d_out.iter()) {
                    *gv = dv.mul_add_s(sv, *gv);
                }
            });
            acc_grad(nodes, grads, *scalar, |g| {
                let mut acc = S::ZERO;
                for (&xv, &dv) in nodes[*input].data.iter().zip(d_out.iter()) {
                    acc = xv.mul_add_s(dv, acc);
                }
                g[0] += acc;
            });
            grads[*out] = Some(d_out);
        }
        Op::MulChannelMap { input, map, out, c, hw } => {
            let d_out = take_dout!(out);
            acc_grad(nodes, grads, *input, |g| {
                for ch in 0..*c {
                    let d = &d_out[ch * hw..(ch + 1) * hw];
                    let grow = &mut g[ch * hw..(ch + 1) * hw];
                    for ((gv, &dv), &mv) in grow.iter_mut().zip(d.iter()).zip(nodes[*map].data.iter())
                    {
                        *gv = dv.mul_add_s(mv, *gv);
                    }
                }
            });
            acc_grad(nodes, grads, *map, |g| {
                for ch in 0..*c {
                    let d = &d_out[ch * hw..(ch + 1) * hw];
                    let x = &nodes[*input].data[ch * hw..(ch + 1) * hw];
                    for ((gv, &dv), &xv) in g.iter_mut().zip(d.iter()).zip(x.iter()) {
                        *gv = dv.mul_add_s(xv, *gv);
                    }
                }
            });
            grads[*out] = Some(d_out);
        }
        Op::ConcatCh { a, b, out, a_len } => {
            let d_out = take_dout!(out);
            acc_grad(nodes, grads, *a, |g| {
                for (gv, &dv) in g.iter_mut().zip(d_out[..*a_len].iter()) {
                    *gv += dv;
                }
            });
            acc_grad(nodes, grads, *b, |g| {
                for (gv, &dv) in g.iter_mut().zip(d_out[*a_len..].iter()) {
                    *gv += dv;
                }
            });
            grads[*out] = Some(d_out);
        }
        Op::SliceCols { input, out, rows, cols, start, len } => {
            let d_out = take_dout!(out);
            acc_grad(nodes, grads, *input, |g| {
                for r in 0..*rows {
                    let d = &d_out[r * len..(r + 1) * len];
                    let grow = &mut g[r * cols + start..r * cols + start + len];
                    for (gv, &dv) in grow.iter_mut().zip(d.iter()) {
                        *gv += dv;
                    }
                }
            });
            grads[*out] = Some(d_out);
        }
        Op::ConcatCols { parts, out, rows } => {
            let d_out = take_dout!(out);
            let total: usize = parts.iter().map(|&(_, c)| c).sum();
            let mut off = 0usize;
            for &(id, cols) in parts {
                acc_grad(nodes, grads, id, |g| {
                    for r in 0..*rows {
                        let d = &d_out[r * total + off..r * total + off + cols];
                        for (gv, &dv) in g[r * cols..(r + 1) * cols].iter_mut().zip(d.iter()) {
                            *gv += dv;
                        }
                    }
                });
                off += cols;
            }
            grads[*out] = Some(d_out);
        }
        Op::Sum { input, out } => {
            let d_out = take_dout!(out);
            let dv = d_out[0];
            acc_grad(nodes, grads, *input, |g| {
                for gv in g.iter_mut() {
                    *gv += dv;
                }
            });
            grads[*out] = Some(d_out);
        }
        Op::SimAggregate { sims, weights, out, n, k } => {
            let d_out = take_dout!(out);
            acc_grad(nodes, grads, *sims, |g| {
                for i in 0..*n {
                    let d = d_out[i];
                    let grow = &mut g[i * k..(i + 1) * k];
                    for (gv, &wv) in grow.iter_mut().zip(nodes[*weights].data.iter()) {
                        *gv = d.mul_add_s(wv, *gv);
                    }
                }
            });
            acc_grad(nodes, grads, *weights, |g| {
                for i in 0..*n {
                    let d = d_out[i];
                    let row = &nodes[*sims].data[i * k..(i + 1) * k];
                    for (gv, &sv) in g.iter_mut().zip(row.iter()) {
                        *gv = d.mul_add_s(sv, *gv);
                    }
                }
            });
            grads[*out] = Some(d_out);
        }
        Op::DivScalars { num, den, out } => {
            let d_out = take_dout!(out);
            let dv = d_out[0];
            let nv = nodes[*num].data[0];
            let de = nodes[*den].data[0];
            acc_grad(nodes, grads, *num, |g| {
                g[0] += dv / de;
            });
            acc_grad(nodes, grads, *den, |g| {
                g[0] += -dv * nv / (de * de);
            });
            grads[*out] = Some(d_out);
        }
        Op::CosineSim { a, b, out, n, d, k, eps } => {
            let d_out = take_dout!(out);
            let norm = |row: &[S]| -> S {
                let mut acc = S::ZERO;
                for &v in row {
                    acc = v.mul_add_s(v, acc);
                }
                acc.sqrt()
            };
            let na: Vec<S> = (0..*n).map(|i| norm(&nodes[*a].data[i * d..(i + 1) * d])).collect();
            let nb: Vec<S> = (0..*k).map(|j| norm(&nodes[*b].data[j * d..(j + 1) * d])).collect();
            // c = s / D with s = u.v, D = |u||v| + eps
            // dc/du = v/D - s*|v|/(D^2) * u/|u|   (u-direction term dropped at |u|=0)
            acc_grad(nodes, grads, *a, |g| {
                for i in 0..*n {
                    let u = &nodes[*a].data[i * d..(i + 1) * d];
                    let grow = &mut g[i * d..(i + 1) * d];
                    for j in 0..*k {
                        let gout = d_out[i * k + j];
                        if gout.to_f64() == 0.0 {
                            continue;
                        }
                        let v = &nodes[*b].data[j * d..(j + 1) * d];
                        let mut s = S::ZERO;
                        for (&x, &y) in u.iter().zip(v.iter()) {
                            s = x.mul_add_s(y, s);
                        }
                        let den = na[i] * nb[j] + *eps;
                        let coef_v = gout / den;
                        let coef_u = if na[i].to_f64() > 0.0 {
                            gout * s * nb[j] / (den * den * na[i])
                        } else {
                            S::ZERO
                        };
                        for ((gv, &vv), &uv) in grow.iter_mut().zip(v.iter()).zip(u.iter()) {
                            *gv += coef_v * vv - coef_u * uv;
                        }
                    }
                }
            });
            acc_grad(nodes, grads, *b, |g| {
                for j in 0..*k {
                    let v = &nodes[*b].data[j * d..(j + 1) * d];
                    let grow = &mut g[j * d..(j + 1) * d];
                    for i in 0..*n {
                        let gout = d_out[i * k + j];
                        if gout.to_f64() == 0.0 {
                            continue;
                        }
                        let u = &nodes[*a].data[i * d..(i + 1) * d];
                        let mut s = S::ZERO;
                        for (&x, &y) in u.iter().zip(v.iter()) {
                            s = x.mul_add_s(y, s);
                        }
                        let den = na[i] * nb[j] + *eps;
                        let coef_u = gout / den;
                        let coef_v = if nb[j].to_f64() > 0.0 {
                            gout * s * na[i] / (den * den * nb[j])
                        } else {
                            S::ZERO
                        };
                        for ((gv, &uv), &vv) in grow.iter_mut().zip(u.iter()).zip(v.iter()) {
                            *gv += coef_u * uv - coef_v * vv;
                        }
                    }
                }
            });
            grads[*out] = Some(d_out);
        }
        Op::Reshape { input, out } => {
            let d_out = take_dout!(out);
            acc_grad(nodes, grads, *input, |g| {
                for (gv, &dv) in g.iter_mut().zip(d_out.iter()) {
                    *gv += dv;
                }
            });
            grads[*out] = Some(d_out);
        }
    }
}

/// Scaled dot-product attention for single-head operands Q, K, V of [n, dh]:
/// `softmax(Q K^T / sqrt(dh)) V`. Rows of the softmax sum to one.
pub fn attention<S: Scalar>(
    tape: &mut Tape<S>,
    q: ValueId,
    k: ValueId,
    v: ValueId,
) -> Result<ValueId> {
    let sq = tape.shape(q).to_vec();
    let sk = tape.shape(k).to_vec();
    let sv = tape.shape(v).to_vec();
    if sq != sk || sq != sv || sq.len() != 2 {
        return Err(Error::config(format!(
            "attention expects matching [n,dh] operands, got Q{:?} K{:?} V{:?}",
            sq, sk, sv
        )));
    }
    let dh = sq[1];
    let scores = tape.matmul_tb(q, k)?;
    let scaled = tape.affine(scores, 1.0 / (dh as f64).sqrt(), 0.0);
    let weights = tape.softmax_rows(scaled)?;
    tape.matmul(weights, v)
}
