//! Slice-level numeric kernels behind the tape ops.
//!
//! Storage is `T`; every reduction accumulates in `f64` in a fixed order.
//! Batched kernels split work per sample or per output row via [`crate::par`].

use crate::par;
use crate::scalar::Scalar;

/// Dot product with eight independent `f64` lanes, combined pairwise.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l].to_f64() * y[l].to_f64();
        }
    }
    for (l, (x, y)) in ta.iter().zip(tb).enumerate() {
        acc[l] += x.to_f64() * y.to_f64();
    }
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))
}

#[inline]
fn axpy<T: Scalar>(acc: &mut [f64], w: f64, x: &[T]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += w * v.to_f64();
    }
}

#[inline]
fn store<T: Scalar>(dst: &mut [T], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = T::from_f64(*s);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }
    /// Rows of the unfolded patch matrix.
    pub fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds one image `[cin,h,w]` into `col[patch][positions]`.
pub fn im2col<T: Scalar>(g: &ConvGeom, image: &[T], col: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for ci in 0..g.cin {
        let plane = &image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adds `col[patch][positions]` back into an image buffer.
fn col2im_acc(g: &ConvGeom, col: &[f64], image: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for ci in 0..g.cin {
        let plane = &mut image[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            plane[iy as usize * g.w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

const MR: usize = 4;
const NR: usize = 16;

/// `acc[r][c] += sum_k a[r][k] * b[k][c]`. Full `MR x NR` blocks of `acc`
/// stay in registers across the whole `k` loop; ragged edges fall back to
/// a row-at-a-time loop.
fn gemm_acc<T: Scalar>(rows: usize, k: usize, p: usize, a: &[T], b: &[T], acc: &mut [f64]) {
    let full_rows = rows - rows % MR;
    let full_cols = p - p % NR;
    for c in (0..full_cols).step_by(NR) {
        for r in (0..full_rows).step_by(MR) {
            let mut blk = [[0f64; NR]; MR];
            for (j, row) in blk.iter_mut().enumerate() {
                row.copy_from_slice(&acc[(r + j) * p + c..(r + j) * p + c + NR]);
            }
            let arows: [&[T]; MR] = std::array::from_fn(|j| &a[(r + j) * k..(r + j + 1) * k]);
            for (kk, brow) in b.chunks_exact(p).take(k).enumerate() {
                let brow: &[T; NR] = brow[c..c + NR].try_into().expect("block");
                let bv: [f64; NR] = std::array::from_fn(|i| brow[i].to_f64());
                for (row, ar) in blk.iter_mut().zip(arows) {
                    let w = ar[kk].to_f64();
                    for i in 0..NR {
                        row[i] += w * bv[i];
                    }
                }
            }
            for (j, row) in blk.iter().enumerate() {
                acc[(r + j) * p + c..(r + j) * p + c + NR].copy_from_slice(row);
            }
        }
    }
    for r in 0..rows {
        let c0 = if r < full_rows { full_cols } else { 0 };
        if c0 == p {
            continue;
        }
        let line = &mut acc[r * p + c0..(r + 1) * p];
        for kk in 0..k {
            axpy(line, a[r * k + kk].to_f64(), &b[kk * p + c0..kk * p + p]);
        }
    }
}

/// `out[r][p] = bias[r] + sum_k a[r][k] * b[k][p]`, accumulated in `f64`.
fn gemm_rows<T: Scalar, U: Scalar>(
    rows: usize,
    k: usize,
    p: usize,
    a: &[T],
    bias: Option<&[T]>,
    b: &[T],
    out: &mut [U],
) {
    let mut acc = vec![0f64; rows * p];
    if let Some(bv) = bias {
        for (r, row) in acc.chunks_exact_mut(p).enumerate() {
            row.fill(bv[r].to_f64());
        }
    }
    gemm_acc(rows, k, p, a, b, &mut acc);
    store(out, &acc);
}

fn transpose<T: Scalar>(rows: usize, cols: usize, src: &[T], dst: &mut [T]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Batched forward convolution. Returns the unfolded patches when `keep_cols`
/// is set, for reuse by the backward pass.
pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    keep_cols: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let (k, p) = (g.patch(), g.positions());
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); batch * g.cout * p];
    if keep_cols {
        let mut cols = vec![T::zero(); batch * k * p];
        par::for_each_chunk_mut(&mut cols, k * p, |b, col| {
            im2col(g, &input[b * in_len..(b + 1) * in_len], col)
        });
        par::for_each_chunk_mut(&mut out, g.cout * p, |b, o| {
            gemm_rows(g.cout, k, p, weight, bias, &cols[b * k * p..(b + 1) * k * p], o)
        });
        (out, Some(cols))
    } else {
        par::for_each_chunk_mut(&mut out, g.cout * p, |b, o| {
            let mut col = vec![T::zero(); k * p];
            im2col(g, &input[b * in_len..(b + 1) * in_len], &mut col);
            gemm_rows(g.cout, k, p, weight, bias, &col, o)
        });
        (out, None)
    }
}

/// Gradient of a batched convolution w.r.t. its kernel, shape `[cout][patch]`.
pub fn conv2d_grad_weight<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    grad_out: &[T],
    cols: &[T],
) -> Vec<T> {
    let (k, p) = (g.patch(), g.positions());
    let mut acc = vec![0f64; g.cout * k];
    let mut col_t = vec![T::zero(); p * k];
    for b in 0..batch {
        let go = &grad_out[b * g.cout * p..(b + 1) * g.cout * p];
        transpose(k, p, &cols[b * k * p..(b + 1) * k * p], &mut col_t);
        gemm_acc(g.cout, p, k, go, &col_t, &mut acc);
    }
    let mut gw = vec![T::zero(); g.cout * k];
    store(&mut gw, &acc);
    gw
}

pub fn conv2d_grad_bias<T: Scalar>(g: &ConvGeom, batch: usize, grad_out: &[T]) -> Vec<T> {
    let p = g.positions();
    (0..g.cout)
        .map(|co| {
            let mut s = 0.0;
            for b in 0..batch {
                for v in &grad_out[(b * g.cout + co) * p..(b * g.cout + co + 1) * p] {
                    s += v.to_f64();
                }
            }
            T::from_f64(s)
        })
        .collect()
}

/// Gradient of a batched convolution w.r.t. its input.
pub fn conv2d_grad_input<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    grad_out: &[T],
    weight: &[T],
) -> Vec<T> {
    let (k, p) = (g.patch(), g.positions());
    let in_len = g.cin * g.h * g.w;
    let mut wt = vec![T::zero(); k * g.cout];
    for co in 0..g.cout {
        for kk in 0..k {
            wt[kk * g.cout + co] = weight[co * k + kk];
        }
    }
    let mut gi = vec![T::zero(); batch * in_len];
    par::for_each_chunk_mut(&mut gi, in_len, |b, dst| {
        let go = &grad_out[b * g.cout * p..(b + 1) * g.cout * p];
        let mut dcol = vec![0f64; k * p];
        gemm_rows(k, g.cout, p, &wt, None, go, &mut dcol);
        let mut img = vec![0f64; in_len];
        col2im_acc(g, &dcol, &mut img);
        store(dst, &img);
    });
    gi
}

/// Windowed max over the last two axes. Returns values and, per output cell,
/// the flat input index of the first maximum in scan order.
pub fn max_pool2d<T: Scalar>(
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    input: &[T],
) -> (Vec<T>, Vec<usize>) {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Non-overlapping `kh x kw` mean pooling over the last two axes.
pub fn avg_pool_rect<T: Scalar>(
    planes: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    input: &[T],
) -> Vec<T> {
    let (oh, ow) = (h / kh, w / kw);
    let norm = (kh * kw) as f64;
    let mut out = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for y in oy * kh..(oy + 1) * kh {
                    for x in ox * kw..(ox + 1) * kw {
                        s += input[base + y * w + x].to_f64();
                    }
                }
                out.push(T::from_f64(s / norm));
            }
        }
    }
    out
}

/// `out[b][j] = bias[j] + sum_d input[b][d] * weight[d][j]`.
pub fn linear<T: Scalar>(
    batch: usize,
    d: usize,
    k: usize,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * k];
    par::for_each_chunk_mut(&mut out, k, |b, row| {
        let mut acc: Vec<f64> = match bias {
            Some(bv) => bv.iter().map(|v| v.to_f64()).collect(),
            None => vec![0.0; k],
        };
        for (dd, x) in input[b * d..(b + 1) * d].iter().enumerate() {
            axpy(&mut acc, x.to_f64(), &weight[dd * k..(dd + 1) * k]);
        }
        store(row, &acc);
    });
    out
}

pub fn linear_grad_input<T: Scalar>(
    batch: usize,
    d: usize,
    k: usize,
    grad_out: &[T],
    weight: &[T],
) -> Vec<T> {
    let mut gi = vec![T::zero(); batch * d];
    for b in 0..batch {
        let go = &grad_out[b * k..(b + 1) * k];
        for dd in 0..d {
            gi[b * d + dd] = T::from_f64(dot(go, &weight[dd * k..(dd + 1) * k]));
        }
    }
    gi
}

pub fn linear_grad_weight<T: Scalar>(
    batch: usize,
    d: usize,
    k: usize,
    grad_out: &[T],
    input: &[T],
) -> Vec<T> {
    let mut gw = vec![T::zero(); d * k];
    par::for_each_chunk_mut(&mut gw, k, |dd, row| {
        let mut acc = vec![0f64; k];
        for b in 0..batch {
            axpy(&mut acc, input[b * d + dd].to_f64(), &grad_out[b * k..(b + 1) * k]);
        }
        store(row, &acc);
    });
    gw
}

pub fn sum_rows<T: Scalar>(batch: usize, k: usize, grad_out: &[T]) -> Vec<T> {
    let mut acc = vec![0f64; k];
    for b in 0..batch {
        axpy(&mut acc, 1.0, &grad_out[b * k..(b + 1) * k]);
    }
    acc.into_iter().map(T::from_f64).collect()
}

/// One axis of a bilinear resize: `(low, high, high_weight)` per output index.
///
/// Uses half-pixel centres: `src = (dst + 0.5) * in/out - 0.5`, clamped to
/// `[0, in - 1]`.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn bilinear_resize<T: Scalar>(
    planes: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    input: &[T],
) -> Vec<T> {
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for pl in 0..planes {
        let src = &input[pl * h * w..(pl + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let a = src[y0 * w + x0].to_f64();
                let b = src[y0 * w + x1].to_f64();
                let c = src[y1 * w + x0].to_f64();
                let d = src[y1 * w + x1].to_f64();
                let top = a + (b - a) * fx;
                let bot = c + (d - c) * fx;
                out.push(T::from_f64(top + (bot - top) * fy));
            }
        }
    }
    out
}

pub fn bilinear_resize_grad<T: Scalar>(
    planes: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    grad_out: &[T],
) -> Vec<T> {
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut acc = vec![0f64; planes * h * w];
    for pl in 0..planes {
        let dst = &mut acc[pl * h * w..(pl + 1) * h * w];
        let go = &grad_out[pl * out_h * out_w..(pl + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = go[oy * out_w + ox].to_f64();
                dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += g * (1.0 - fy) * fx;
                dst[y1 * w + x0] += g * fy * (1.0 - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    acc.into_iter().map(T::from_f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_sequential_sum() {
        let a: Vec<f64> = (0..29).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..29).map(|i| 1.0 - i as f64 * 0.25).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-9);
    }

    #[test]
    fn taps_identity_when_sizes_match() {
        for (i, &(lo, hi, f)) in bilinear_taps(7, 7).iter().enumerate() {
            assert_eq!(lo, i);
            assert!(f == 0.0 || hi == lo);
        }
    }

    #[test]
    fn max_pool_routes_to_first_max() {
        let input = [1.0f32, 5.0, 5.0, 0.0];
        let (out, arg) = max_pool2d(1, 2, 2, 2, 2, &input);
        assert_eq!(out, vec![5.0]);
        assert_eq!(arg, vec![1]);
    }
}
