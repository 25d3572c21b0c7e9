//! 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Returns the pooled tensor plus the flat input index of each selected
/// maximum (first occurrence wins on ties, scan order fixed).
pub fn forward<S: Scalar>(input: &Tensor<S>) -> Result<(Tensor<S>, Vec<u32>)> {
    let (n, c, h, w) = input.dims4()?;
    let ho = h / 2;
    let wo = w / 2;
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut argmax = vec![0u32; out.numel()];
    let in_data = input.data();
    let out_data = out.data_mut();
    let mut oi = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = base + (oy * 2) * w + ox * 2;
                let mut best = in_data[best_idx];
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = base + (oy * 2 + dy) * w + ox * 2 + dx;
                        if in_data[idx] > best {
                            best = in_data[idx];
                            best_idx = idx;
                        }
                    }
                }
                out_data[oi] = best;
                argmax[oi] = best_idx as u32;
                oi += 1;
            }
        }
    }
    Ok((out, argmax))
}

pub fn backward<S: Scalar>(argmax: &[u32], grad_out: &Tensor<S>, dinput: &mut Tensor<S>) {
    let din = dinput.data_mut();
    for (g, &idx) in grad_out.data().iter().zip(argmax) {
        din[idx as usize] = din[idx as usize] + *g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_max_and_routes_gradient() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 4], vec![1., 5., 2., 2., 3., 4., 2., 2.])
            .unwrap();
        let (y, arg) = forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.data(), &[5.0, 2.0]);
        // Tie in the second window: first scanned element (row 0, col 2) wins.
        assert_eq!(arg, vec![1, 2]);

        let g = Tensor::<f64>::from_vec(&[1, 1, 1, 2], vec![10.0, 20.0]).unwrap();
        let mut din = Tensor::<f64>::zeros(&[1, 1, 2, 4]);
        backward(&arg, &g, &mut din);
        assert_eq!(din.data(), &[0., 10., 20., 0., 0., 0., 0., 0.]);
    }

    #[test]
    fn odd_dims_are_truncated() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 3, 3], (0..9).map(|v| v as f64).collect()).unwrap();
        let (y, _) = forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 4.0);
    }
}
