//! Raw forward/backward compute kernels shared by the tape operations.
//!
//! Everything is single-threaded and deterministic; parallelism lives at the
//! sample level in the training loop, never inside a kernel.

use crate::tensor::Scalar;

/// `out += a @ b` with `a: [m,k]`, `b: [k,n]`, `out: [m,n]`.
/// 4x16 register tiles accumulate across the whole k loop, so the kernel is
/// FMA-bound instead of store-bound; ragged edges fall back to axpy rows.
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    const RB: usize = 4;
    const CB: usize = 16;

    let axpy_block = |out: &mut [S], i_lo: usize, i_hi: usize, j_lo: usize, j_hi: usize| {
        for i in i_lo..i_hi {
            let out_row = &mut out[i * n + j_lo..i * n + j_hi];
            for kk in 0..k {
                let aik = a[i * k + kk];
                let b_row = &b[kk * n + j_lo..kk * n + j_hi];
                for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                    *o = aik.mul_add_s(bv, *o);
                }
            }
        }
    };

    // Pack the current B panel [k x CB] contiguously when several row blocks
    // will sweep it; turns the panel walk into a linear stream.
    let pack_worthwhile = m >= 2 * RB && k >= 32;
    let mut panel = if pack_worthwhile { vec![S::ZERO; k * CB] } else { Vec::new() };

    let mut j0 = 0usize;
    while j0 + CB <= n {
        if pack_worthwhile {
            for kk in 0..k {
                panel[kk * CB..(kk + 1) * CB].copy_from_slice(&b[kk * n + j0..kk * n + j0 + CB]);
            }
        }
        let mut i0 = 0usize;
        while i0 + RB <= m {
            let mut acc = [[S::ZERO; CB]; RB];
            for (r, accr) in acc.iter_mut().enumerate() {
                accr.copy_from_slice(&out[(i0 + r) * n + j0..(i0 + r) * n + j0 + CB]);
            }
            for kk in 0..k {
                let bvec: &[S] = if pack_worthwhile {
                    &panel[kk * CB..(kk + 1) * CB]
                } else {
                    &b[kk * n + j0..kk * n + j0 + CB]
                };
                for (r, accr) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + r) * k + kk];
                    for (x, &bv) in accr.iter_mut().zip(bvec.iter()) {
                        *x = av.mul_add_s(bv, *x);
                    }
                }
            }
            for (r, accr) in acc.iter().enumerate() {
                out[(i0 + r) * n + j0..(i0 + r) * n + j0 + CB].copy_from_slice(accr);
            }
            i0 += RB;
        }
        axpy_block(out, i0, m, j0, j0 + CB);
        j0 += CB;
    }
    if j0 < n {
        axpy_block(out, 0, m, j0, n);
    }
}

/// `out += a @ b^T` with `a: [m,k]`, `b: [n,k]`, `out: [m,n]`.
/// Eight accumulator lanes break the FMA dependency chain of the dot product.
pub fn matmul_tb_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    const LANES: usize = 8;
    let chunks = k / LANES;
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = [S::ZERO; LANES];
            for c in 0..chunks {
                let av = &a_row[c * LANES..(c + 1) * LANES];
                let bv = &b_row[c * LANES..(c + 1) * LANES];
                for l in 0..LANES {
                    acc[l] = av[l].mul_add_s(bv[l], acc[l]);
                }
            }
            let mut tail = S::ZERO;
            for l in chunks * LANES..k {
                tail = a_row[l].mul_add_s(b_row[l], tail);
            }
            let pair = |x: S, y: S| x + y;
            let s01 = pair(acc[0], acc[1]);
            let s23 = pair(acc[2], acc[3]);
            let s45 = pair(acc[4], acc[5]);
            let s67 = pair(acc[6], acc[7]);
            *o += (s01 + s23) + (s45 + s67) + tail;
        }
    }
}

/// `out += a^T @ b` with `a: [m,k]`, `b: [m,n]`, `out: [k,n]`.
/// Transposes `a` (small) and reuses the tiled kernel.
pub fn matmul_ta_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let mut at = vec![S::ZERO; k * m];
    for i in 0..m {
        for kk in 0..k {
            at[kk * m + i] = a[i * k + kk];
        }
    }
    matmul_acc(&at, b, out, k, m, n);
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold `input: [ci,h,w]` into columns `[ci*kh*kw, oh*ow]` for cross-correlation.
/// Out-of-bounds taps (padding) contribute zero.
pub fn im2col<S: Scalar>(
    input: &[S],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut [S],
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    debug_assert_eq!(cols.len(), ci * kh * kw * oh * ow);
    let n = oh * ow;
    for c in 0..ci {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut cols[((c * kh + ky) * kw + kx) * n..((c * kh + ky) * kw + kx + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = S::ZERO);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        // contiguous segment: dst[ox] = src[ox + kx - pad]
                        // for ox in [pad - kx, w - 1 - kx + pad] intersect [0, ow)
                        let off = kx as isize - pad as isize;
                        let lo = (-off).clamp(0, ow as isize) as usize;
                        let hi = ((w as isize - off).clamp(0, ow as isize)) as usize;
                        dst[..lo].iter_mut().for_each(|v| *v = S::ZERO);
                        dst[hi..].iter_mut().for_each(|v| *v = S::ZERO);
                        if hi > lo {
                            let s0 = (lo as isize + off) as usize;
                            dst[lo..hi].copy_from_slice(&src_row[s0..s0 + hi - lo]);
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            *d = if ix < 0 || ix >= w as isize {
                                S::ZERO
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the column gradient back onto the input image (inverse of [`im2col`]).
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<S: Scalar>(
    cols: &[S],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    input_grad: &mut [S],
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let n = oh * ow;
    for c in 0..ci {
        let plane = &mut input_grad[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &cols[((c * kh + ky) * kw + kx) * n..((c * kh + ky) * kw + kx + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &row[oy * ow..(oy + 1) * ow];
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        let off = kx as isize - pad as isize;
                        let lo = (-off).clamp(0, ow as isize) as usize;
                        let hi = ((w as isize - off).clamp(0, ow as isize)) as usize;
                        if hi > lo {
                            let s0 = (lo as isize + off) as usize;
                            for (d, &v) in dst_row[s0..s0 + hi - lo].iter_mut().zip(src[lo..hi].iter())
                            {
                                *d += v;
                            }
                        }
                    } else {
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-destination source coordinate for align-corners-false bilinear resize:
/// `(dst + 0.5) * src/dst - 0.5`, clamped to the valid range. Returns
/// `(lo, hi, frac)` with `value = (1-frac)*in[lo] + frac*in[hi]`.
pub fn resize_coord(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, s - lo as f64)
}

/// Bilinear resize of one `[h,w]` plane into `[oh,ow]` (align-corners-false).
pub fn resize_plane<S: Scalar>(input: &[S], h: usize, w: usize, oh: usize, ow: usize, out: &mut [S]) {
    if oh == h && ow == w {
        out.copy_from_slice(input);
        return;
    }
    for oy in 0..oh {
        let (y0, y1, fy) = resize_coord(oy, h, oh);
        let fy = S::from_f64(fy);
        let wy0 = S::ONE - fy;
        let row0 = &input[y0 * w..(y0 + 1) * w];
        let row1 = &input[y1 * w..(y1 + 1) * w];
        let out_row = &mut out[oy * ow..(oy + 1) * ow];
        for (ox, o) in out_row.iter_mut().enumerate() {
            let (x0, x1, fx) = resize_coord(ox, w, ow);
            let fx = S::from_f64(fx);
            let wx0 = S::ONE - fx;
            let top = wx0 * row0[x0] + fx * row0[x1];
            let bot = wx0 * row1[x0] + fx * row1[x1];
            *o = wy0 * top + fy * bot;
        }
    }
}

/// Scatter the resize gradient back onto the source plane.
pub fn resize_plane_grad_acc<S: Scalar>(
    d_out: &[S],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    d_in: &mut [S],
) {
    if oh == h && ow == w {
        for (d, g) in d_in.iter_mut().zip(d_out.iter()) {
            *d += *g;
        }
        return;
    }
    for oy in 0..oh {
        let (y0, y1, fy) = resize_coord(oy, h, oh);
        let fy = S::from_f64(fy);
        let wy0 = S::ONE - fy;
        for ox in 0..ow {
            let (x0, x1, fx) = resize_coord(ox, w, ow);
            let fx = S::from_f64(fx);
            let wx0 = S::ONE - fx;
            let g = d_out[oy * ow + ox];
            d_in[y0 * w + x0] += wy0 * wx0 * g;
            d_in[y0 * w + x1] += wy0 * fx * g;
            d_in[y1 * w + x0] += fy * wx0 * g;
            d_in[y1 * w + x1] += fy * fx * g;
        }
    }
}

/// 2x2 max pooling (stride 2) over `[c,h,w]`; records the flat argmax per cell.
pub fn maxpool2<S: Scalar>(input: &[S], c: usize, h: usize, w: usize, out: &mut [S], argmax: &mut [u32]) {
    let oh = h / 2;
    let ow = w / 2;
    debug_assert_eq!(out.len(), c * oh * ow);
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = (2 * oy) * w + 2 * ox;
                let mut best = plane[best_idx];
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = (2 * oy + dy) * w + 2 * ox + dx;
                    if plane[idx] > best {
                        best = plane[idx];
                        best_idx = idx;
                    }
                }
                out[ch * oh * ow + oy * ow + ox] = best;
                argmax[ch * oh * ow + oy * ow + ox] = (ch * h * w + best_idx) as u32;
            }
        }
    }
}

/// Numerically stable in-place row softmax over `[rows, cols]`.
pub fn softmax_rows<S: Scalar>(x: &[S], rows: usize, cols: usize, out: &mut [S]) {
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let out_row = &mut out[r * cols..(r + 1) * cols];
        let mut m = row[0];
        for &v in row.iter() {
            m = m.max_s(v);
        }
        let mut sum = S::ZERO;
        for (o, &v) in out_row.iter_mut().zip(row.iter()) {
            let e = (v - m).exp();
            *o = e;
            sum += e;
        }
        for o in out_row.iter_mut() {
            *o = *o / sum;
        }
    }
}

/// Sigmoid clamped into the open interval (0, 1) at this precision.
pub fn sigmoid<S: Scalar>(x: S) -> S {
    let (lo, hi) = S::sigmoid_bounds();
    let s = if x.to_f64() >= 0.0 {
        S::ONE / (S::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::ONE + e)
    };
    s.max_s(lo).min_s(hi)
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu<S: Scalar>(x: S) -> S {
    let c0 = S::from_f64(GELU_C0);
    let c1 = S::from_f64(GELU_C1);
    let half = S::from_f64(0.5);
    let u = c0 * (x + c1 * x * x * x);
    half * x * (S::ONE + u.tanh())
}

/// d/dx of the tanh-approximation GELU.
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c0 = S::from_f64(GELU_C0);
    let c1 = S::from_f64(GELU_C1);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let sech2 = S::ONE - t * t;
    half * (S::ONE + t) + half * x * sech2 * c0 * (S::ONE + three * c1 * x * x)
}
