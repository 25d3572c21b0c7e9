//! Bilinear and nearest-neighbor spatial resizing.
//!
//! Bilinear uses the half-pixel (align-corners-false) convention: the source
//! coordinate of output index `i` is `(i + 0.5) * in/out - 0.5`, clamped to
//! `[0, in-1]`. Resizing to the same size is the exact identity.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-axis sample: two source indices and their interpolation weights.
#[derive(Clone, Copy)]
struct AxisSample {
    lo: usize,
    hi: usize,
    w_lo: f64,
    w_hi: f64,
}

fn axis_samples(in_dim: usize, out_dim: usize) -> Vec<AxisSample> {
    let scale = in_dim as f64 / out_dim as f64;
    (0..out_dim)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_dim - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_dim - 1);
            let f = src - lo as f64;
            AxisSample {
                lo,
                hi,
                w_lo: 1.0 - f,
                w_hi: f,
            }
        })
        .collect()
}

pub fn forward<S: Scalar>(input: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    let (n, c, h, w) = input.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Dim("resize target must be >= 1".into()));
    }
    let ys = axis_samples(h, out_h);
    let xs = axis_samples(w, out_w);
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    let in_data = input.data();
    let out_data = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        let obase = plane * out_h * out_w;
        for (oy, sy) in ys.iter().enumerate() {
            for (ox, sx) in xs.iter().enumerate() {
                let v00 = in_data[base + sy.lo * w + sx.lo].as_f64();
                let v01 = in_data[base + sy.lo * w + sx.hi].as_f64();
                let v10 = in_data[base + sy.hi * w + sx.lo].as_f64();
                let v11 = in_data[base + sy.hi * w + sx.hi].as_f64();
                let top = v00 * sx.w_lo + v01 * sx.w_hi;
                let bot = v10 * sx.w_lo + v11 * sx.w_hi;
                out_data[obase + oy * out_w + ox] = S::from_f64(top * sy.w_lo + bot * sy.w_hi);
            }
        }
    }
    Ok(out)
}

pub fn backward<S: Scalar>(input_shape: &[usize], grad_out: &Tensor<S>, dinput: &mut Tensor<S>) {
    let (n, c, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let (_, _, oh, ow) = grad_out.dims4().expect("grad shape");
    let ys = axis_samples(h, oh);
    let xs = axis_samples(w, ow);
    let g_data = grad_out.data();
    let din = dinput.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        let obase = plane * oh * ow;
        for (oy, sy) in ys.iter().enumerate() {
            for (ox, sx) in xs.iter().enumerate() {
                let g = g_data[obase + oy * ow + ox].as_f64();
                din[base + sy.lo * w + sx.lo] =
                    din[base + sy.lo * w + sx.lo] + S::from_f64(g * sy.w_lo * sx.w_lo);
                din[base + sy.lo * w + sx.hi] =
                    din[base + sy.lo * w + sx.hi] + S::from_f64(g * sy.w_lo * sx.w_hi);
                din[base + sy.hi * w + sx.lo] =
                    din[base + sy.hi * w + sx.lo] + S::from_f64(g * sy.w_hi * sx.w_lo);
                din[base + sy.hi * w + sx.hi] =
                    din[base + sy.hi * w + sx.hi] + S::from_f64(g * sy.w_hi * sx.w_hi);
            }
        }
    }
}

/// Nearest-neighbor resize for weight maps (not differentiated; weights are
/// constants). Uses the same half-pixel source coordinate, rounded.
pub fn nearest<S: Scalar>(input: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    let (n, c, h, w) = input.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Dim("resize target must be >= 1".into()));
    }
    let pick = |in_dim: usize, out_dim: usize| -> Vec<usize> {
        let scale = in_dim as f64 / out_dim as f64;
        (0..out_dim)
            .map(|i| {
                (((i as f64 + 0.5) * scale - 0.5).round().max(0.0) as usize).min(in_dim - 1)
            })
            .collect()
    };
    let ys = pick(h, out_h);
    let xs = pick(w, out_w);
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    let in_data = input.data();
    let out_data = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        let obase = plane * out_h * out_w;
        for (oy, &sy) in ys.iter().enumerate() {
            for (ox, &sx) in xs.iter().enumerate() {
                out_data[obase + oy * out_w + ox] = in_data[base + sy * w + sx];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_exact_identity() {
        let x = Tensor::<f32>::from_vec(&[1, 2, 2, 3], (0..12).map(|v| v as f32 * 0.37).collect())
            .unwrap();
        let y = forward(&x, 2, 3).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn width_two_to_four() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        let y = forward(&x, 1, 4).unwrap();
        let want = [0.0, 0.5, 1.5, 2.0];
        for (g, w) in y.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{:?}", y.data());
        }
    }

    #[test]
    fn constants_stay_constant() {
        let x = Tensor::<f64>::filled(&[1, 1, 3, 5], 0.7310586);
        let y = forward(&x, 7, 2).unwrap();
        for v in y.data() {
            assert!((v - 0.7310586).abs() < 1e-12);
        }
    }

    #[test]
    fn nearest_identity_and_upscale() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 2], vec![1.0, 4.0]).unwrap();
        assert_eq!(nearest(&x, 1, 2).unwrap(), x);
        let up = nearest(&x, 1, 4).unwrap();
        assert_eq!(up.data(), &[1.0, 1.0, 4.0, 4.0]);
    }
}
