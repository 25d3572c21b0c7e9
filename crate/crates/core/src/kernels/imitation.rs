//! Feature-imitation distance kernels.
//!
//! The per-location distance between a student channel vector V and a
//! teacher channel vector Z is either the squared L2 distance or the cosine
//! distance `1 - V.Z / max(|V||Z|, eps)`. A degenerate pair whose norm
//! product falls below `eps` is measured against the constant `eps`, so a
//! true zero vector scores 1 (no direction information).
//!
//! Stage kernels aggregate over all locations of an NCHW pair, optionally
//! weighted per image (macro weight `u`) and per location (micro map `v`,
//! normalized by its own sum). The batch dimension is averaged. Weights are
//! constants: no gradient flows through them.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Distance metric between per-location channel vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    L2,
    Cosine,
}

/// Constant weights for one stage of one batch: `u[n]` scales image n's
/// stage term and `v` (shape N x 1 x H x W) weights locations, normalized
/// per image by its sum. An image whose `v` sums to zero is skipped.
#[derive(Clone, Debug)]
pub struct StageWeights<S> {
    pub u: Vec<S>,
    pub v: Tensor<S>,
}

pub fn l2_vec<S: Scalar>(v: &[S], z: &[S]) -> S {
    let mut acc = S::zero();
    for (&a, &b) in v.iter().zip(z) {
        let d = a - b;
        acc = acc + d * d;
    }
    acc
}

pub fn l2_grad_vec<S: Scalar>(v: &[S], z: &[S]) -> Vec<S> {
    v.iter()
        .zip(z)
        .map(|(&a, &b)| S::from_f64(2.0) * (a - b))
        .collect()
}

pub fn cosine_vec<S: Scalar>(v: &[S], z: &[S], eps: S) -> S {
    let dot = v.iter().zip(z).map(|(&a, &b)| a * b).sum::<S>();
    let nv = v.iter().map(|&a| a * a).sum::<S>().sqrt();
    let nz = z.iter().map(|&b| b * b).sum::<S>().sqrt();
    S::one() - dot / (nv * nz).max(eps)
}

pub fn cosine_grad_vec<S: Scalar>(v: &[S], z: &[S], eps: S) -> Vec<S> {
    let dot = v.iter().zip(z).map(|(&a, &b)| a * b).sum::<S>();
    let nv2 = v.iter().map(|&a| a * a).sum::<S>();
    let nz2 = z.iter().map(|&b| b * b).sum::<S>();
    let den = (nv2 * nz2).sqrt();
    if den > eps {
        // d/dV [1 - dot/den] = dot*V/(nv^2 * den) - Z/den
        let a = dot / (nv2 * den);
        let b = S::one() / den;
        v.iter().zip(z).map(|(&x, &y)| a * x - b * y).collect()
    } else {
        z.iter().map(|&y| -(y / eps)).collect()
    }
}

fn check_pair<S: Scalar>(
    student: &Tensor<S>,
    teacher: &Tensor<S>,
) -> Result<(usize, usize, usize, usize)> {
    if student.shape() != teacher.shape() {
        return Err(Error::Dim(format!(
            "student {:?} vs teacher {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    student.dims4()
}

/// Per-location sufficient statistics: dot, |V|^2, |Z|^2 for every (n,i,j).
/// Accumulated channel-plane by channel-plane so the inner loops stay
/// contiguous.
fn location_stats<S: Scalar>(student: &Tensor<S>, teacher: &Tensor<S>) -> (Vec<S>, Vec<S>, Vec<S>) {
    let (n, c, h, w) = student.dims4().expect("checked");
    let plane = h * w;
    let mut dot = vec![S::zero(); n * plane];
    let mut nv2 = vec![S::zero(); n * plane];
    let mut nz2 = vec![S::zero(); n * plane];
    let sd = student.data();
    let td = teacher.data();
    for b in 0..n {
        let out = b * plane;
        for ci in 0..c {
            let base = (b * c + ci) * plane;
            for i in 0..plane {
                let v = sd[base + i];
                let z = td[base + i];
                dot[out + i] = dot[out + i] + v * z;
                nv2[out + i] = nv2[out + i] + v * v;
                nz2[out + i] = nz2[out + i] + z * z;
            }
        }
    }
    (dot, nv2, nz2)
}

fn location_loss<S: Scalar>(metric: Metric, eps: S, dot: S, nv2: S, nz2: S) -> S {
    match metric {
        // |V - Z|^2 = |V|^2 - 2 V.Z + |Z|^2
        Metric::L2 => nv2 - S::from_f64(2.0) * dot + nz2,
        Metric::Cosine => S::one() - dot / (nv2 * nz2).sqrt().max(eps),
    }
}

/// Per-location coefficient of image `b`: the constant that multiplies each
/// location's loss in the stage term, before batch averaging.
fn location_coeffs<S: Scalar>(
    weights: Option<&StageWeights<S>>,
    b: usize,
    plane: usize,
) -> Option<(S, Vec<S>)> {
    match weights {
        None => {
            let c = S::one() / S::from_f64(plane as f64);
            Some((c, Vec::new()))
        }
        Some(sw) => {
            let vmap = &sw.v.data()[b * plane..(b + 1) * plane];
            let vsum: S = vmap.iter().cloned().sum();
            if vsum <= S::zero() {
                return None; // whole image skipped for this stage
            }
            let scale = sw.u[b] / vsum;
            Some((scale, vmap.iter().map(|&v| v * scale).collect()))
        }
    }
}

/// Stage term value. Returns the batch-averaged weighted mean plus the
/// number of images skipped because their weight map summed to zero.
pub fn stage_forward<S: Scalar>(
    student: &Tensor<S>,
    teacher: &Tensor<S>,
    metric: Metric,
    eps: S,
    weights: Option<&StageWeights<S>>,
) -> Result<(S, usize)> {
    let (n, _, h, w) = check_pair(student, teacher)?;
    if let Some(sw) = weights {
        if sw.u.len() != n || sw.v.shape() != [n, 1, h, w] {
            return Err(Error::Dim(format!(
                "weights u[{}] v{:?} for pair {:?}",
                sw.u.len(),
                sw.v.shape(),
                student.shape()
            )));
        }
    }
    let plane = h * w;
    let (dot, nv2, nz2) = location_stats(student, teacher);
    let mut total = S::zero();
    let mut skipped = 0usize;
    for b in 0..n {
        let Some((uniform, per_loc)) = location_coeffs(weights, b, plane) else {
            skipped += 1;
            continue;
        };
        let mut img = S::zero();
        for i in 0..plane {
            let l = location_loss(metric, eps, dot[b * plane + i], nv2[b * plane + i], nz2[b * plane + i]);
            let cfc = if per_loc.is_empty() { uniform } else { per_loc[i] };
            img = img + cfc * l;
        }
        total = total + img;
    }
    Ok((total / S::from_f64(n as f64), skipped))
}

/// Gradients of the stage term into `dstudent` / `dteacher` (either may be
/// absent when that side does not require gradients).
#[allow(clippy::too_many_arguments)]
pub fn stage_backward<S: Scalar>(
    student: &Tensor<S>,
    teacher: &Tensor<S>,
    metric: Metric,
    eps: S,
    weights: Option<&StageWeights<S>>,
    upstream: S,
    mut dstudent: Option<&mut Tensor<S>>,
    mut dteacher: Option<&mut Tensor<S>>,
) {
    let (n, c, h, w) = student.dims4().expect("checked in forward");
    let plane = h * w;
    let (dot, nv2, nz2) = location_stats(student, teacher);
    let inv_batch = upstream / S::from_f64(n as f64);

    // Per-location multipliers: dL/dV = av*V + bv*Z, dL/dZ = az*Z + bz*V.
    let mut av = vec![S::zero(); n * plane];
    let mut bv = vec![S::zero(); n * plane];
    let mut az = vec![S::zero(); n * plane];
    let mut bz = vec![S::zero(); n * plane];
    for b in 0..n {
        let Some((uniform, per_loc)) = location_coeffs(weights, b, plane) else {
            continue;
        };
        for i in 0..plane {
            let k = b * plane + i;
            let coef = inv_batch * if per_loc.is_empty() { uniform } else { per_loc[i] };
            match metric {
                Metric::L2 => {
                    let two = S::from_f64(2.0);
                    av[k] = coef * two;
                    bv[k] = -(coef * two);
                    az[k] = coef * two;
                    bz[k] = -(coef * two);
                }
                Metric::Cosine => {
                    let den = (nv2[k] * nz2[k]).sqrt();
                    if den > eps {
                        av[k] = coef * dot[k] / (nv2[k] * den);
                        bv[k] = -(coef / den);
                        az[k] = coef * dot[k] / (nz2[k] * den);
                        bz[k] = -(coef / den);
                    } else {
                        bv[k] = -(coef / eps);
                        bz[k] = -(coef / eps);
                    }
                }
            }
        }
    }

    let sd = student.data();
    let td = teacher.data();
    for b in 0..n {
        for ci in 0..c {
            let base = (b * c + ci) * plane;
            let stat = b * plane;
            if let Some(ds) = dstudent.as_deref_mut() {
                let d = ds.data_mut();
                for i in 0..plane {
                    d[base + i] = d[base + i] + av[stat + i] * sd[base + i] + bv[stat + i] * td[base + i];
                }
            }
            if let Some(dt) = dteacher.as_deref_mut() {
                let d = dt.data_mut();
                for i in 0..plane {
                    d[base + i] = d[base + i] + az[stat + i] * td[base + i] + bz[stat + i] * sd[base + i];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l2_examples() {
        assert_eq!(l2_vec(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(l2_vec(&[1.0, 2.0], &[0.0, 0.0]), 5.0);
        assert_eq!(l2_grad_vec(&[1.0, 2.0], &[0.0, 0.0]), vec![2.0, 4.0]);
    }

    #[test]
    fn cosine_examples() {
        let eps = 1e-8f64;
        assert!((cosine_vec(&[1.0, 0.0], &[0.0, 1.0], eps) - 1.0).abs() < 1e-12);
        assert!((cosine_vec(&[1.0, 0.0], &[-1.0, 0.0], eps) - 2.0).abs() < 1e-12);
        assert!(cosine_vec(&[2.0, 0.0], &[1.0, 0.0], eps).abs() < 1e-12);
        assert!(cosine_vec(&[3.0, 4.0], &[3.0, 4.0], eps).abs() < 1e-12);
        // Zero vector: no direction, loss 1.
        assert_eq!(cosine_vec(&[0.0, 0.0], &[1.0, 1.0], eps), 1.0);
    }

    #[test]
    fn stage_forward_single_location_matches_vector_loss() {
        let s = Tensor::<f64>::from_vec(&[1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        let t = Tensor::<f64>::from_vec(&[1, 2, 1, 1], vec![0.0, 0.0]).unwrap();
        let (v, skipped) = stage_forward(&s, &t, Metric::L2, 1e-8, None).unwrap();
        assert_eq!(v, 5.0);
        assert_eq!(skipped, 0);
    }

    #[test]
    fn zero_weight_map_skips_image() {
        let s = Tensor::<f64>::filled(&[1, 2, 2, 2], 1.0);
        let t = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        let w = StageWeights {
            u: vec![1.0],
            v: Tensor::zeros(&[1, 1, 2, 2]),
        };
        let (v, skipped) = stage_forward(&s, &t, Metric::L2, 1e-8, Some(&w)).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(skipped, 1);
    }
}
