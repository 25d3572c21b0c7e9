//! Per-location channel statistics of NCHW feature maps.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatMode {
    Mean,
    Variance,
}

/// Reduce the channel axis to a scalar statistic per location, giving an
/// N x 1 x H x W map. Variance is the population variance (divide by C).
pub fn channel_stats<S: Scalar>(feature: &Tensor<S>, mode: StatMode) -> Result<Tensor<S>> {
    let (n, c, h, w) = feature.dims4()?;
    if c == 0 {
        return Err(Error::Dim("channel_stats requires C >= 1".into()));
    }
    let plane = h * w;
    let inv_c = S::one() / S::from_f64(c as f64);
    let mut out = Tensor::zeros(&[n, 1, h, w]);
    let data = feature.data();
    let od = out.data_mut();
    for b in 0..n {
        let obase = b * plane;
        for ci in 0..c {
            let base = (b * c + ci) * plane;
            for i in 0..plane {
                od[obase + i] = od[obase + i] + data[base + i];
            }
        }
        for i in 0..plane {
            od[obase + i] = od[obase + i] * inv_c;
        }
        if mode == StatMode::Variance {
            // Second pass over (x - mean)^2 keeps the result exactly >= 0.
            let mut var = vec![S::zero(); plane];
            for ci in 0..c {
                let base = (b * c + ci) * plane;
                for i in 0..plane {
                    let d = data[base + i] - od[obase + i];
                    var[i] = var[i] + d * d;
                }
            }
            for i in 0..plane {
                od[obase + i] = var[i] * inv_c;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_vector_has_zero_mean() {
        let f = Tensor::<f64>::zeros(&[1, 4, 1, 1]);
        let m = channel_stats(&f, StatMode::Mean).unwrap();
        assert_eq!(m.item(), 0.0);
    }

    #[test]
    fn constant_vector_has_zero_variance() {
        let f = Tensor::<f64>::filled(&[1, 5, 2, 2], 3.25);
        let v = channel_stats(&f, StatMode::Variance).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn variance_of_one_three_is_one() {
        let f = Tensor::<f64>::from_vec(&[1, 2, 1, 1], vec![1.0, 3.0]).unwrap();
        let v = channel_stats(&f, StatMode::Variance).unwrap();
        assert_eq!(v.item(), 1.0);
        let m = channel_stats(&f, StatMode::Mean).unwrap();
        assert_eq!(m.item(), 2.0);
    }

    #[test]
    fn variance_never_negative() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let data: Vec<f32> = (0..2 * 6 * 3 * 3).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let f = Tensor::<f32>::from_vec(&[2, 6, 3, 3], data).unwrap();
            let v = channel_stats(&f, StatMode::Variance).unwrap();
            assert!(v.data().iter().all(|&x| x >= 0.0));
        }
    }
}
