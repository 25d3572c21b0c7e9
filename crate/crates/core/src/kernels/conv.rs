//! 2-d cross-correlation (NCHW input, OIKK kernel).
//!
//! The stride-1 path is written as accumulated shifted-row AXPY so the inner
//! loops stay contiguous and vectorize. Accumulation order is fixed per
//! output plane; parallelism only splits disjoint planes.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Dot product with four independent accumulators (fixed combination order,
/// so results stay reproducible while the loop pipelines).
#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut s = [S::zero(); 4];
    let mut ac = a.chunks_exact(4);
    let mut bc = b.chunks_exact(4);
    for (a4, b4) in (&mut ac).zip(&mut bc) {
        s[0] = s[0] + a4[0] * b4[0];
        s[1] = s[1] + a4[1] * b4[1];
        s[2] = s[2] + a4[2] * b4[2];
        s[3] = s[3] + a4[3] * b4[3];
    }
    let mut rem = S::zero();
    for (&x, &y) in ac.remainder().iter().zip(bc.remainder()) {
        rem = rem + x * y;
    }
    (s[0] + s[1]) + (s[2] + s[3]) + rem
}

pub fn out_spatial(in_dim: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = in_dim + 2 * pad;
    if padded < k {
        return Err(Error::Dim(format!(
            "kernel size {k} exceeds padded input {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn check_shapes<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (n, c_in, h, w) = input.dims4()?;
    let (c_out, k_in, kh, kw) = kernel.dims4()?;
    if k_in != c_in {
        return Err(Error::Dim(format!(
            "kernel input channels {k_in} (kernel {:?}) do not match input channels {c_in} (input {:?})",
            kernel.shape(),
            input.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::Dim("stride must be >= 1".into()));
    }
    Ok((n, c_in, h, w, c_out, kh, kw))
}

pub fn forward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let (n, c_in, h, w, c_out, kh, kw) = check_shapes(input, kernel, stride)?;
    let ho = out_spatial(h, kh, stride, pad)?;
    let wo = out_spatial(w, kw, stride, pad)?;

    let mut out = Tensor::zeros(&[n, c_out, ho, wo]);
    let in_data = input.data();
    let k_data = kernel.data();
    let in_plane = h * w;
    let out_plane = ho * wo;

    // One task per (batch, out-channel) plane; coarse splits keep the
    // scheduler overhead below the kernel work.
    out.data_mut()
        .par_chunks_mut(out_plane)
        .with_min_len(8)
        .enumerate()
        .for_each(|(plane, out_p)| {
            let b = plane / c_out;
            let o = plane % c_out;
            let in_base = b * c_in * in_plane;
            let k_base = o * c_in * kh * kw;
            if stride == 1 {
                for ci in 0..c_in {
                    let in_ch = &in_data[in_base + ci * in_plane..in_base + (ci + 1) * in_plane];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let kv = k_data[k_base + (ci * kh + ky) * kw + kx];
                            // ox range keeping ix = ox + kx - pad inside [0, w)
                            let ox_lo = pad.saturating_sub(kx);
                            let ox_hi = (w + pad - kx).min(wo);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            for oy in 0..ho {
                                let iy = oy + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let in_row = (iy - pad) * w + ox_lo + kx - pad;
                                let dst = &mut out_p[oy * wo + ox_lo..oy * wo + ox_hi];
                                let src = &in_ch[in_row..in_row + (ox_hi - ox_lo)];
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d = *d + kv * s;
                                }
                            }
                        }
                    }
                }
            } else {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = S::zero();
                        for ci in 0..c_in {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix as usize >= w {
                                        continue;
                                    }
                                    let iv = in_data
                                        [in_base + ci * in_plane + iy as usize * w + ix as usize];
                                    let kv = k_data[k_base + (ci * kh + ky) * kw + kx];
                                    acc = acc + iv * kv;
                                }
                            }
                        }
                        out_p[oy * wo + ox] = acc;
                    }
                }
            }
        });
    Ok(out)
}

/// Gradient w.r.t. the input: full correlation of the output gradient with
/// the kernel. One task per (batch, in-channel) plane.
pub fn backward_input<S: Scalar>(
    input_shape: &[usize],
    kernel: &Tensor<S>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<S>,
    dinput: &mut Tensor<S>,
) {
    let (n, c_in, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let (c_out, _, kh, kw) = kernel.dims4().expect("kernel shape");
    let (_, _, ho, wo) = grad_out.dims4().expect("grad shape");
    let g_data = grad_out.data();
    let k_data = kernel.data();
    let in_plane = h * w;
    let out_plane = ho * wo;
    debug_assert_eq!(n * c_in * in_plane, dinput.numel());

    dinput
        .data_mut()
        .par_chunks_mut(in_plane)
        .with_min_len(8)
        .enumerate()
        .for_each(|(plane, din_p)| {
            let b = plane / c_in;
            let ci = plane % c_in;
            if stride == 1 {
                for o in 0..c_out {
                    let g_ch = &g_data[(b * c_out + o) * out_plane..(b * c_out + o + 1) * out_plane];
                    let k_base = (o * c_in + ci) * kh * kw;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let kv = k_data[k_base + ky * kw + kx];
                            let ox_lo = pad.saturating_sub(kx);
                            let ox_hi = (w + pad - kx).min(wo);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            for oy in 0..ho {
                                let iy = oy + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let in_row = (iy - pad) * w + ox_lo + kx - pad;
                                let dst = &mut din_p[in_row..in_row + (ox_hi - ox_lo)];
                                let src = &g_ch[oy * wo + ox_lo..oy * wo + ox_hi];
                                for (d, &g) in dst.iter_mut().zip(src) {
                                    *d = *d + kv * g;
                                }
                            }
                        }
                    }
                }
            } else {
                for o in 0..c_out {
                    let g_ch = &g_data[(b * c_out + o) * out_plane..(b * c_out + o + 1) * out_plane];
                    let k_base = (o * c_in + ci) * kh * kw;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let g = g_ch[oy * wo + ox];
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix as usize >= w {
                                        continue;
                                    }
                                    let idx = iy as usize * w + ix as usize;
                                    din_p[idx] = din_p[idx] + g * k_data[k_base + ky * kw + kx];
                                }
                            }
                        }
                    }
                }
            }
        });
}

/// Gradient w.r.t. the kernel. One task per output channel; inner order over
/// (in-channel, tap, batch, row) is fixed.
pub fn backward_kernel<S: Scalar>(
    input: &Tensor<S>,
    kernel_shape: &[usize],
    stride: usize,
    pad: usize,
    grad_out: &Tensor<S>,
    dkernel: &mut Tensor<S>,
) {
    let (n, c_in, h, w) = input.dims4().expect("input shape");
    let (c_out, _, kh, kw) = (
        kernel_shape[0],
        kernel_shape[1],
        kernel_shape[2],
        kernel_shape[3],
    );
    let (_, _, ho, wo) = grad_out.dims4().expect("grad shape");
    let in_data = input.data();
    let g_data = grad_out.data();
    let in_plane = h * w;
    let out_plane = ho * wo;

    dkernel
        .data_mut()
        .par_chunks_mut(c_in * kh * kw)
        .with_min_len(2)
        .enumerate()
        .for_each(|(o, dk_o)| {
            for ci in 0..c_in {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = S::zero();
                        for b in 0..n {
                            let in_ch = &in_data
                                [(b * c_in + ci) * in_plane..(b * c_in + ci + 1) * in_plane];
                            let g_ch = &g_data
                                [(b * c_out + o) * out_plane..(b * c_out + o + 1) * out_plane];
                            if stride == 1 {
                                let ox_lo = pad.saturating_sub(kx);
                                let ox_hi = (w + pad - kx).min(wo);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                for oy in 0..ho {
                                    let iy = oy + ky;
                                    if iy < pad || iy - pad >= h {
                                        continue;
                                    }
                                    let in_row = (iy - pad) * w + ox_lo + kx - pad;
                                    let g_row = &g_ch[oy * wo + ox_lo..oy * wo + ox_hi];
                                    let i_row = &in_ch[in_row..in_row + g_row.len()];
                                    acc = acc + dot(g_row, i_row);
                                }
                            } else {
                                for oy in 0..ho {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy as usize >= h {
                                        continue;
                                    }
                                    for ox in 0..wo {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix as usize >= w {
                                            continue;
                                        }
                                        acc = acc
                                            + g_ch[oy * wo + ox]
                                                * in_ch[iy as usize * w + ix as usize];
                                    }
                                }
                            }
                        }
                        dk_o[(ci * kh + ky) * kw + kx] = dk_o[(ci * kh + ky) * kw + kx] + acc;
                    }
                }
            }
        });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_one_by_one_kernel() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::<f64>::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let y = forward(&x, &k, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_three_by_three() {
        let x = Tensor::<f64>::filled(&[1, 1, 3, 3], 1.0);
        let k = Tensor::<f64>::filled(&[1, 1, 3, 3], 1.0);
        let y = forward(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let k = Tensor::<f64>::zeros(&[2, 4, 1, 1]);
        let err = forward(&x, &k, 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 4, 1, 1]") && msg.contains("[1, 3, 4, 4]"), "{msg}");
    }

    #[test]
    fn strided_matches_dense_reference() {
        // 5x5 ramp, 3x3 ramp kernel, stride 2, pad 1 against a hand loop.
        let x = Tensor::<f64>::from_vec(&[1, 1, 5, 5], (0..25).map(|v| v as f64).collect()).unwrap();
        let k = Tensor::<f64>::from_vec(&[1, 1, 3, 3], (0..9).map(|v| v as f64 * 0.1).collect())
            .unwrap();
        let y = forward(&x, &k, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        for oy in 0..3usize {
            for ox in 0..3usize {
                let mut acc = 0.0;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let iy = (oy * 2 + ky) as isize - 1;
                        let ix = (ox * 2 + kx) as isize - 1;
                        if iy >= 0 && iy < 5 && ix >= 0 && ix < 5 {
                            acc += x.data()[(iy * 5 + ix) as usize] * k.data()[ky * 3 + kx];
                        }
                    }
                }
                let got = y.data()[oy * 3 + ox];
                assert!((got - acc).abs() < 1e-12, "({oy},{ox}): {got} vs {acc}");
            }
        }
    }
}
