//! Macro stage weights and micro spatial weight maps.
//!
//! Macro strategies produce one scalar `u` per stage: focal down-weighting of
//! well-imitated stages, or the mean of a sigmoid-statistic map. Micro
//! strategies produce a per-location map `v`: sigmoid of channel mean or
//! variance of the raw (pre-adaptation) student feature, or a binary
//! ground-truth foreground mask. Weight maps are recomputed every step and
//! treated as constants by the optimizer.

use std::str::FromStr;

use crate::data::BoundingBox;
use crate::error::{Error, Result};
use crate::kernels::resize;
use crate::matching::MatchedPair;
use crate::stats::{channel_stats, StatMode};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MacroWeight {
    None,
    Focal,
    StageMean,
    StageVariance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MicroWeight {
    None,
    SpatialMean,
    SpatialVariance,
    GtMask,
}

impl FromStr for MacroWeight {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MacroWeight::None),
            "focal" => Ok(MacroWeight::Focal),
            "stage_mean" => Ok(MacroWeight::StageMean),
            "stage_variance" => Ok(MacroWeight::StageVariance),
            other => Err(Error::Config(format!("unknown macro weight `{other}`"))),
        }
    }
}

impl std::fmt::Display for MacroWeight {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MacroWeight::None => "none",
            MacroWeight::Focal => "focal",
            MacroWeight::StageMean => "stage_mean",
            MacroWeight::StageVariance => "stage_variance",
        };
        f.write_str(s)
    }
}

impl FromStr for MicroWeight {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MicroWeight::None),
            "spatial_mean" => Ok(MicroWeight::SpatialMean),
            "spatial_variance" => Ok(MicroWeight::SpatialVariance),
            "gt_mask" => Ok(MicroWeight::GtMask),
            other => Err(Error::Config(format!("unknown micro weight `{other}`"))),
        }
    }
}

impl std::fmt::Display for MicroWeight {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MicroWeight::None => "none",
            MicroWeight::SpatialMean => "spatial_mean",
            MicroWeight::SpatialVariance => "spatial_variance",
            MicroWeight::GtMask => "gt_mask",
        };
        f.write_str(s)
    }
}

/// Per-stage weights for one image: scalars `u` and maps `v` (1x1xHxW at the
/// matched resolution).
#[derive(Clone, Debug)]
pub struct WeightMaps<S> {
    pub u: Vec<S>,
    pub v: Vec<Tensor<S>>,
    pub provenance: String,
}

/// Focal macro weights from raw per-stage losses: `u_i = (1 - l_i/sum)^gamma`.
/// All-zero losses degenerate to uniform weights of 1.
pub fn focal_stage_weights<S: Scalar>(stage_losses: &[S], gamma: S) -> Result<Vec<S>> {
    if stage_losses.is_empty() {
        return Err(Error::Dim("focal weights need at least one stage loss".into()));
    }
    if stage_losses.iter().any(|l| *l < S::zero()) {
        return Err(Error::Invariant("stage losses must be >= 0".into()));
    }
    let total: S = stage_losses.iter().cloned().sum();
    if total <= S::zero() {
        return Ok(vec![S::one(); stage_losses.len()]);
    }
    Ok(stage_losses
        .iter()
        .map(|&l| (S::one() - l / total).powf(gamma))
        .collect())
}

/// Sigmoid of per-location channel statistics of the raw student feature.
pub fn spatial_stat_weights<S: Scalar>(student_raw: &Tensor<S>, mode: StatMode) -> Result<Tensor<S>> {
    let stats = channel_stats(student_raw, mode)?;
    Ok(stats.map(|x| S::one() / (S::one() + (-x).exp())))
}

/// Stage weight as the mean of all spatial weight entries.
pub fn stage_weight_from_spatial<S: Scalar>(v: &Tensor<S>) -> Result<S> {
    if v.numel() == 0 {
        return Err(Error::Dim("empty spatial weight map".into()));
    }
    let total: S = v.data().iter().cloned().sum();
    Ok(total / S::from_f64(v.numel() as f64))
}

/// Binary foreground mask: cell (i,j) is 1 iff its center lies inside any
/// ground-truth box. No boxes gives an all-zero map; the stage is then
/// skipped by the re-weighted aggregation.
pub fn gt_mask_weights<S: Scalar>(boxes: &[BoundingBox], h: usize, w: usize) -> Tensor<S> {
    let mut m = Tensor::zeros(&[1, 1, h, w]);
    let data = m.data_mut();
    for i in 0..h {
        let cy = (i as f64 + 0.5) / h as f64;
        for j in 0..w {
            let cx = (j as f64 + 0.5) / w as f64;
            if boxes.iter().any(|b| b.contains_point(cx, cy)) {
                data[i * w + j] = S::one();
            }
        }
    }
    m
}

/// Strategy choices feeding [`compose_weights`].
#[derive(Clone, Copy, Debug)]
pub struct WeightConfig {
    pub macro_weight: MacroWeight,
    pub micro_weight: MicroWeight,
    pub gamma: f64,
}

/// Build the weight maps for one image's matched pairs.
///
/// `stage_losses` are the raw (unweighted) per-stage imitation losses of the
/// same step, feeding the focal strategy. Statistic-based macro weights are
/// computed from the raw student feature at its own resolution, regardless
/// of the micro choice; micro statistic maps are nearest-resized onto the
/// matched grid when the pair was resample-tagged.
pub fn compose_weights<S: Scalar>(
    cfg: &WeightConfig,
    pairs: &[MatchedPair<S>],
    stage_losses: &[S],
    boxes: &[BoundingBox],
) -> Result<WeightMaps<S>> {
    let u = match cfg.macro_weight {
        MacroWeight::None => vec![S::one(); pairs.len()],
        MacroWeight::Focal => {
            if stage_losses.len() != pairs.len() {
                return Err(Error::Dim(format!(
                    "{} stage losses for {} pairs",
                    stage_losses.len(),
                    pairs.len()
                )));
            }
            focal_stage_weights(stage_losses, S::from_f64(cfg.gamma))?
        }
        MacroWeight::StageMean | MacroWeight::StageVariance => {
            let mode = if cfg.macro_weight == MacroWeight::StageMean {
                StatMode::Mean
            } else {
                StatMode::Variance
            };
            pairs
                .iter()
                .map(|p| stage_weight_from_spatial(&spatial_stat_weights(&p.student_raw, mode)?))
                .collect::<Result<Vec<_>>>()?
        }
    };

    let v = pairs
        .iter()
        .map(|p| {
            let (_, _, th, tw) = p.teacher.dims4()?;
            match cfg.micro_weight {
                MicroWeight::None => Ok(Tensor::filled(&[1, 1, th, tw], S::one())),
                MicroWeight::SpatialMean | MicroWeight::SpatialVariance => {
                    let mode = if cfg.micro_weight == MicroWeight::SpatialMean {
                        StatMode::Mean
                    } else {
                        StatMode::Variance
                    };
                    let map = spatial_stat_weights(&p.student_raw, mode)?;
                    let (_, _, rh, rw) = map.dims4()?;
                    if (rh, rw) == (th, tw) {
                        Ok(map)
                    } else {
                        resize::nearest(&map, th, tw)
                    }
                }
                MicroWeight::GtMask => Ok(gt_mask_weights(boxes, th, tw)),
            }
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(WeightMaps {
        u,
        v,
        provenance: format!("macro={}, micro={}", cfg.macro_weight, cfg.micro_weight),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_hand_cases() {
        // gamma 0: all ones
        let u = focal_stage_weights(&[0.5, 2.0], 0.0).unwrap();
        assert_eq!(u, vec![1.0, 1.0]);
        // single stage: p = 1 -> u = 0
        let u = focal_stage_weights(&[3.0], 2.0).unwrap();
        assert_eq!(u, vec![0.0]);
        // equal losses at gamma 2: (1 - 0.5)^2
        let u = focal_stage_weights(&[1.0, 1.0], 2.0).unwrap();
        assert_eq!(u, vec![0.25, 0.25]);
        // all zero: degenerate uniform
        let u = focal_stage_weights(&[0.0, 0.0], 2.0).unwrap();
        assert_eq!(u, vec![1.0, 1.0]);
    }

    #[test]
    fn focal_monotone_in_loss_share() {
        for gamma in [0.5, 1.0, 2.0] {
            let mut prev = f64::INFINITY;
            for k in 0..=10 {
                let p = k as f64 / 10.0;
                // Two stages with shares (p, 1-p); u of the first stage.
                let u = if p == 0.0 && k == 0 {
                    focal_stage_weights(&[0.0, 1.0], gamma).unwrap()[0]
                } else {
                    focal_stage_weights(&[p, 1.0 - p], gamma).unwrap()[0]
                };
                assert!(u <= prev + 1e-12, "gamma {gamma}, p {p}: {u} > {prev}");
                prev = u;
            }
        }
    }

    #[test]
    fn sigmoid_stat_weights_match_hand_values() {
        // zero feature, mean -> all 0.5
        let zero = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        let v = spatial_stat_weights(&zero, StatMode::Mean).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.5));
        // constant feature, variance -> all 0.5
        let c = Tensor::<f64>::filled(&[1, 3, 2, 2], 4.2);
        let v = spatial_stat_weights(&c, StatMode::Variance).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.5));
        // vector (1,3): variance 1 -> sigmoid(1)
        let f = Tensor::<f64>::from_vec(&[1, 2, 1, 1], vec![1.0, 3.0]).unwrap();
        let v = spatial_stat_weights(&f, StatMode::Variance).unwrap();
        assert!((v.item() - 0.7310586).abs() < 1e-6);
        // strictly inside (0,1)
        assert!(v.data().iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn stage_weight_is_plain_mean() {
        let v = Tensor::<f64>::from_vec(&[1, 1, 1, 3], vec![0.2, 0.4, 0.6]).unwrap();
        assert!((stage_weight_from_spatial(&v).unwrap() - 0.4).abs() < 1e-12);
        let v = Tensor::<f64>::from_vec(&[1, 1, 2, 1], vec![0.0, 1.0]).unwrap();
        assert_eq!(stage_weight_from_spatial(&v).unwrap(), 0.5);
        let v = Tensor::<f64>::filled(&[1, 1, 4, 4], 0.5);
        assert_eq!(stage_weight_from_spatial(&v).unwrap(), 0.5);
    }

    #[test]
    fn gt_mask_cases() {
        // full-frame box: every cell foreground
        let full = BoundingBox::new(0, 0.0, 0.0, 1.0, 1.0).unwrap();
        let m = gt_mask_weights::<f64>(&[full], 3, 4);
        assert!(m.data().iter().all(|&x| x == 1.0));
        // no boxes: all zero
        let m = gt_mask_weights::<f64>(&[], 3, 4);
        assert!(m.data().iter().all(|&x| x == 0.0));
        // left-half box on a 1x2 grid: centers at x = 0.25 and 0.75
        let half = BoundingBox::new(0, 0.0, 0.0, 0.5, 1.0).unwrap();
        let m = gt_mask_weights::<f64>(&[half], 1, 2);
        assert_eq!(m.data(), &[1.0, 0.0]);
    }
}
