//! Raw numeric kernels behind the tape ops: matmul, im2col convolution,
//! pooling, upsampling and batch-norm statistics.
//!
//! Everything here is plain data-in/data-out so the tape can call the same
//! routine from both the forward pass and the backward rules.

use crate::error::{Error, Result};
use crate::tensor::{c, Elem, Tensor};

/// C[m×n] += A[m×k] · B[k×n], row-major. i-k-j loop order so the inner
/// loop runs over contiguous rows of B and C.
pub fn matmul_acc<T: Elem>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

/// C[m×p] += A[m×n] · B[p×n]ᵀ (dot products of rows).
pub fn matmul_nt_acc<T: Elem>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, p: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(out.len(), m * p);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..p {
            let b_row = &b[j * n..(j + 1) * n];
            let mut acc = T::zero();
            for l in 0..n {
                acc += a_row[l] * b_row[l];
            }
            out[i * p + j] += acc;
        }
    }
}

/// C[k×n] += A[m×k]ᵀ · B[m×n].
pub fn matmul_tn_acc<T: Elem>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[l * n..(l + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Static geometry of one conv application.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: Padding,
        h: usize,
        w: usize,
    ) -> Result<Self> {
        if !(k == 1 || k == 3) || !(stride == 1 || stride == 2) {
            return Err(Error::invalid(format!(
                "unsupported conv geometry: kernel {k}×{k}, stride {stride} (kernel must be 1 or 3, stride 1 or 2)"
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::invalid("conv input has empty spatial extent"));
        }
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Same => {
                let out_h = h.div_ceil(stride);
                let out_w = w.div_ceil(stride);
                let pad_h = ((out_h - 1) * stride + k).saturating_sub(h);
                let pad_w = ((out_w - 1) * stride + k).saturating_sub(w);
                (out_h, out_w, pad_h / 2, pad_w / 2)
            }
            Padding::Valid => {
                if h < k || w < k {
                    return Err(Error::invalid(format!(
                        "valid conv needs input ≥ kernel, got {h}×{w} for kernel {k}"
                    )));
                }
                ((h - k) / stride + 1, (w - k) / stride + 1, 0, 0)
            }
        };
        Ok(ConvGeom {
            c_in,
            c_out,
            k,
            stride,
            h,
            w,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }
}

/// Expand one sample (C×H×W slice) into the column matrix
/// [C·k·k × outH·outW]; zero padding outside the image.
pub fn im2col<T: Elem>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let npos = g.out_h * g.out_w;
    debug_assert_eq!(cols.len(), g.c_in * g.k * g.k * npos);
    debug_assert_eq!(x.len(), g.c_in * g.h * g.w);
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * npos;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    let dst = &mut cols[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        for v in dst.iter_mut() {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the column-gradient matrix back onto the input plane;
/// inverse mapping of [`im2col`].
pub fn col2im_acc<T: Elem>(cols: &[T], g: &ConvGeom, grad_x: &mut [T]) {
    let npos = g.out_h * g.out_w;
    debug_assert_eq!(grad_x.len(), g.c_in * g.h * g.w);
    for ci in 0..g.c_in {
        let plane = &mut grad_x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * npos;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward over a batch. `x` is N×C×H×W, `kernel`
/// C_out×C_in×k×k, optional bias per output channel.
pub fn conv2d_forward<T: Elem>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Tensor<T> {
    let n = x.shape()[0];
    let npos = g.out_h * g.out_w;
    let ckk = g.c_in * g.k * g.k;
    let mut cols = vec![T::zero(); ckk * npos];
    let mut out = Tensor::zeros(&[n, g.c_out, g.out_h, g.out_w]);
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * npos;
    for s in 0..n {
        let xs = &x.data()[s * in_stride..(s + 1) * in_stride];
        im2col(xs, g, &mut cols);
        let os = &mut out.data_mut()[s * out_stride..(s + 1) * out_stride];
        matmul_acc(kernel.data(), &cols, os, g.c_out, ckk, npos);
        if let Some(b) = bias {
            for co in 0..g.c_out {
                let bv = b.data()[co];
                for v in os[co * npos..(co + 1) * npos].iter_mut() {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Backward of [`conv2d_forward`]; recomputes im2col per sample instead of
/// keeping the column matrices alive across the whole tape.
pub fn conv2d_backward<T: Elem>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: &ConvGeom,
    with_bias: bool,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let n = x.shape()[0];
    let npos = g.out_h * g.out_w;
    let ckk = g.c_in * g.k * g.k;
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * npos;

    let mut grad_x = Tensor::zeros(x.shape());
    let mut grad_k = Tensor::zeros(kernel.shape());
    let mut grad_b = if with_bias {
        Some(Tensor::zeros(&[g.c_out]))
    } else {
        None
    };

    let mut cols = vec![T::zero(); ckk * npos];
    let mut grad_cols = vec![T::zero(); ckk * npos];
    for s in 0..n {
        let xs = &x.data()[s * in_stride..(s + 1) * in_stride];
        let gs = &grad_out.data()[s * out_stride..(s + 1) * out_stride];

        im2col(xs, g, &mut cols);
        matmul_nt_acc(gs, &cols, grad_k.data_mut(), g.c_out, npos, ckk);

        grad_cols.iter_mut().for_each(|v| *v = T::zero());
        matmul_tn_acc(kernel.data(), gs, &mut grad_cols, g.c_out, ckk, npos);
        col2im_acc(
            &grad_cols,
            g,
            &mut grad_x.data_mut()[s * in_stride..(s + 1) * in_stride],
        );

        if let Some(gb) = grad_b.as_mut() {
            for co in 0..g.c_out {
                let mut acc = T::zero();
                for &v in &gs[co * npos..(co + 1) * npos] {
                    acc += v;
                }
                gb.data_mut()[co] += acc;
            }
        }
    }
    (grad_x, grad_k, grad_b)
}

/// 2×2 stride-2 max pooling; returns the pooled tensor and per-output
/// argmax flat indices (first occurrence wins on ties).
pub fn maxpool2_forward<T: Elem>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let s = x.shape();
    let (n, ch, h, w) = (s[0], s[1], s[2], s[3]);
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!(
            "maxpool2 needs spatial size ≥ 2, got {h}×{w}"
        )));
    }
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut out = Tensor::zeros(&[n, ch, oh, ow]);
    let mut argmax = vec![0u32; n * ch * oh * ow];
    for nc in 0..n * ch {
        let plane = &x.data()[nc * h * w..(nc + 1) * h * w];
        let out_plane = &mut out.data_mut()[nc * oh * ow..(nc + 1) * oh * ow];
        let arg_plane = &mut argmax[nc * oh * ow..(nc + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = 0usize;
                // row-major scan keeps the first-tie rule deterministic
                for dy in 0..2usize.min(h - oy * 2) {
                    for dx in 0..2usize.min(w - ox * 2) {
                        let idx = (oy * 2 + dy) * w + (ox * 2 + dx);
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                out_plane[oy * ow + ox] = best;
                arg_plane[oy * ow + ox] = best_idx as u32;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2_backward<T: Elem>(
    input_shape: &[usize],
    argmax: &[u32],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let (n, ch, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let oh = grad_out.shape()[2];
    let ow = grad_out.shape()[3];
    let mut grad_x = Tensor::zeros(input_shape);
    for nc in 0..n * ch {
        let g_plane = &grad_out.data()[nc * oh * ow..(nc + 1) * oh * ow];
        let a_plane = &argmax[nc * oh * ow..(nc + 1) * oh * ow];
        let x_plane = &mut grad_x.data_mut()[nc * h * w..(nc + 1) * h * w];
        for (i, &g) in g_plane.iter().enumerate() {
            x_plane[a_plane[i] as usize] += g;
        }
    }
    grad_x
}

/// Each pixel becomes a 2×2 block.
pub fn upsample2_forward<T: Elem>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (n, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(&[n, ch, h * 2, w * 2]);
    for nc in 0..n * ch {
        let src = &x.data()[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out.data_mut()[nc * 4 * h * w..(nc + 1) * 4 * h * w];
        for y in 0..h {
            for x_ in 0..w {
                let v = src[y * w + x_];
                let base = (y * 2) * (w * 2) + x_ * 2;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + w * 2] = v;
                dst[base + w * 2 + 1] = v;
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Elem>(grad_out: &Tensor<T>) -> Tensor<T> {
    let s = grad_out.shape();
    let (n, ch, oh, ow) = (s[0], s[1], s[2], s[3]);
    let (h, w) = (oh / 2, ow / 2);
    let mut grad_x = Tensor::zeros(&[n, ch, h, w]);
    for nc in 0..n * ch {
        let src = &grad_out.data()[nc * oh * ow..(nc + 1) * oh * ow];
        let dst = &mut grad_x.data_mut()[nc * h * w..(nc + 1) * h * w];
        for y in 0..h {
            for x_ in 0..w {
                let base = (y * 2) * ow + x_ * 2;
                dst[y * w + x_] = src[base] + src[base + 1] + src[base + ow] + src[base + ow + 1];
            }
        }
    }
    grad_x
}

/// Per-channel spatial mean: N×C×H×W → N×C.
pub fn gap_forward<T: Elem>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (n, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let area = c::<T>((h * w) as f64);
    let mut out = Tensor::zeros(&[n, ch]);
    for nc in 0..n * ch {
        let mut acc = T::zero();
        for &v in &x.data()[nc * h * w..(nc + 1) * h * w] {
            acc += v;
        }
        out.data_mut()[nc] = acc / area;
    }
    out
}

pub fn gap_backward<T: Elem>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let (n, ch, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let area = c::<T>((h * w) as f64);
    let mut grad_x = Tensor::zeros(input_shape);
    for nc in 0..n * ch {
        let g = grad_out.data()[nc] / area;
        for v in &mut grad_x.data_mut()[nc * h * w..(nc + 1) * h * w] {
            *v = g;
        }
    }
    grad_x
}

/// Saved forward state the batch-norm backward rule needs.
#[derive(Debug, Clone)]
pub struct BnSaved<T> {
    /// Normalized activations x̂ (same shape as input).
    pub x_hat: Tensor<T>,
    /// Per-channel 1/√(var+ε).
    pub inv_std: Vec<T>,
    /// Values per channel that entered the statistics (N·H·W in train mode).
    pub count: usize,
    /// True when batch statistics were used (train mode).
    pub batch_stats: bool,
}

/// Normalize per channel. In train mode uses batch statistics and reports
/// them so the caller can fold them into running averages; in eval mode
/// uses the provided running statistics.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward<T: Elem>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    train: bool,
    eps: T,
) -> Result<(Tensor<T>, BnSaved<T>, Option<(Tensor<T>, Tensor<T>)>)> {
    let s = x.shape();
    let (n, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let count = n * h * w;
    if train && count < 2 {
        return Err(Error::DegenerateBatch(count));
    }

    let mut mean = vec![T::zero(); ch];
    let mut var = vec![T::zero(); ch];
    if train {
        let cnt = c::<T>(count as f64);
        for cc in 0..ch {
            let mut acc = T::zero();
            for nn in 0..n {
                let base = (nn * ch + cc) * h * w;
                for &v in &x.data()[base..base + h * w] {
                    acc += v;
                }
            }
            mean[cc] = acc / cnt;
            let mut vacc = T::zero();
            for nn in 0..n {
                let base = (nn * ch + cc) * h * w;
                for &v in &x.data()[base..base + h * w] {
                    let d = v - mean[cc];
                    vacc += d * d;
                }
            }
            var[cc] = vacc / cnt; // biased estimate, standard for BN
        }
    } else {
        mean.copy_from_slice(running_mean.data());
        var.copy_from_slice(running_var.data());
    }

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    for nn in 0..n {
        for cc in 0..ch {
            let base = (nn * ch + cc) * h * w;
            let (m, is, g, b) = (mean[cc], inv_std[cc], gamma.data()[cc], beta.data()[cc]);
            for i in base..base + h * w {
                let xh = (x.data()[i] - m) * is;
                x_hat.data_mut()[i] = xh;
                out.data_mut()[i] = g * xh + b;
            }
        }
    }

    let stats = if train {
        Some((
            Tensor::from_vec(vec![ch], mean)?,
            Tensor::from_vec(vec![ch], var)?,
        ))
    } else {
        None
    };
    Ok((
        out,
        BnSaved {
            x_hat,
            inv_std,
            count,
            batch_stats: train,
        },
        stats,
    ))
}

/// Full batch-norm backward. With batch statistics the mean/variance terms
/// couple every value in the channel; with running statistics the map is
/// a per-element affine transform.
pub fn batchnorm_backward<T: Elem>(
    gamma: &Tensor<T>,
    saved: &BnSaved<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = grad_out.shape();
    let (n, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let mut grad_x = Tensor::zeros(s);
    let mut grad_gamma = Tensor::zeros(&[ch]);
    let mut grad_beta = Tensor::zeros(&[ch]);
    let cnt = c::<T>(saved.count as f64);

    for cc in 0..ch {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for nn in 0..n {
            let base = (nn * ch + cc) * h * w;
            for i in base..base + h * w {
                sum_dy += grad_out.data()[i];
                sum_dy_xhat += grad_out.data()[i] * saved.x_hat.data()[i];
            }
        }
        grad_beta.data_mut()[cc] = sum_dy;
        grad_gamma.data_mut()[cc] = sum_dy_xhat;

        let g = gamma.data()[cc];
        let is = saved.inv_std[cc];
        for nn in 0..n {
            let base = (nn * ch + cc) * h * w;
            for i in base..base + h * w {
                let dy = grad_out.data()[i];
                grad_x.data_mut()[i] = if saved.batch_stats {
                    g * is * (dy - sum_dy / cnt - saved.x_hat.data()[i] * sum_dy_xhat / cnt)
                } else {
                    g * is * dy
                };
            }
        }
    }
    (grad_x, grad_gamma, grad_beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] · [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = vec![1.0f64, 2.0, 3.0, 4.0];
        let b = vec![5.0, 6.0, 7.0, 8.0];
        let mut out = vec![0.0; 4];
        matmul_acc(&a, &b, &mut out, 2, 2, 2);
        assert_eq!(out, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn same_padding_geometry() {
        let g = ConvGeom::new(1, 1, 3, 1, Padding::Same, 5, 5).unwrap();
        assert_eq!((g.out_h, g.out_w, g.pad_top, g.pad_left), (5, 5, 1, 1));
        let g = ConvGeom::new(1, 1, 3, 2, Padding::Same, 5, 5).unwrap();
        assert_eq!((g.out_h, g.out_w), (3, 3));
        assert!(ConvGeom::new(1, 1, 5, 1, Padding::Same, 5, 5).is_err());
        assert!(ConvGeom::new(1, 1, 3, 3, Padding::Same, 5, 5).is_err());
    }

    #[test]
    fn conv_all_ones_counts_neighbors() {
        // 3×3 ones kernel on constant-1 5×5 input, same padding:
        // interior 9, corners 4.
        let x = Tensor::full(&[1, 1, 5, 5], 1.0f64);
        let kernel = Tensor::full(&[1, 1, 3, 3], 1.0f64);
        let g = ConvGeom::new(1, 1, 3, 1, Padding::Same, 5, 5).unwrap();
        let out = conv2d_forward(&x, &kernel, None, &g);
        let d = out.data();
        assert_eq!(d[0], 4.0); // corner
        assert_eq!(d[12], 9.0); // center
        assert_eq!(d[2], 6.0); // top edge
    }

    #[test]
    fn maxpool_tie_goes_first() {
        let x = Tensor::full(&[1, 1, 2, 2], 7.0f64);
        let (out, argmax) = maxpool2_forward(&x).unwrap();
        assert_eq!(out.data(), &[7.0]);
        assert_eq!(argmax, vec![0]);
    }

    #[test]
    fn upsample_mean_preserved() {
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let up = upsample2_forward(&x);
        let mean_in: f64 = x.data().iter().sum::<f64>() / 4.0;
        let mean_out: f64 = up.data().iter().sum::<f64>() / 16.0;
        assert!((mean_in - mean_out).abs() < 1e-12);
    }
}
