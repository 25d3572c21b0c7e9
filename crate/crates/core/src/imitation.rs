//! Imitation losses and the multi-task objective.
//!
//! Per-location metrics compare the student channel vector V against the
//! teacher vector Z. The aggregated loss sums the per-stage spatial means;
//! the re-weighted variant scales each stage by a macro weight `u` and each
//! location by a normalized micro weight map `v`. With uniform weights the
//! two coincide. All weights are constants under differentiation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::imitation as kern;
pub use crate::kernels::imitation::{Metric, StageWeights};
use crate::matching::MatchedPair;
use crate::reweight::{MacroWeight, MicroWeight, WeightMaps};
use crate::tensor::Scalar;

/// Every knob of the imitation objective.
#[derive(Clone, Debug)]
pub struct ImitationConfig {
    pub metric: Metric,
    pub macro_weight: MacroWeight,
    pub micro_weight: MicroWeight,
    /// Focal exponent.
    pub gamma: f64,
    /// Localization weight in the multi-task total.
    pub lambda1: f64,
    /// Imitation weight in the multi-task total.
    pub lambda2: f64,
    /// Cosine denominator guard.
    pub epsilon: f64,
}

impl Default for ImitationConfig {
    fn default() -> Self {
        ImitationConfig {
            metric: Metric::Cosine,
            macro_weight: MacroWeight::None,
            micro_weight: MicroWeight::None,
            gamma: 2.0,
            lambda1: 1.0,
            lambda2: 1.0,
            epsilon: 1e-8,
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(Metric::L2),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::Config(format!("unknown metric `{other}` (use l2|cosine)"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::L2 => "l2",
            Metric::Cosine => "cosine",
        })
    }
}

impl ImitationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config(format!(
                "lambda1/lambda2 must be >= 0, got {}/{}",
                self.lambda1, self.lambda2
            )));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

fn check_lengths<S: Scalar>(v: &[S], z: &[S]) -> Result<()> {
    if v.len() != z.len() {
        return Err(Error::Dim(format!(
            "vector lengths differ: {} vs {}",
            v.len(),
            z.len()
        )));
    }
    Ok(())
}

/// Squared Euclidean distance between channel vectors.
pub fn l2_imitation<S: Scalar>(v: &[S], z: &[S]) -> Result<S> {
    check_lengths(v, z)?;
    Ok(kern::l2_vec(v, z))
}

/// Analytic gradient of [`l2_imitation`] w.r.t. the student vector.
pub fn l2_imitation_grad<S: Scalar>(v: &[S], z: &[S]) -> Result<Vec<S>> {
    check_lengths(v, z)?;
    Ok(kern::l2_grad_vec(v, z))
}

/// Cosine distance `1 - V.Z / max(|V||Z|, eps)`, in `[0, 2]` for nonzero
/// vectors and invariant under positive scaling of either side.
pub fn cosine_imitation<S: Scalar>(v: &[S], z: &[S], eps: S) -> Result<S> {
    check_lengths(v, z)?;
    Ok(kern::cosine_vec(v, z, eps))
}

/// Analytic gradient of [`cosine_imitation`] w.r.t. the student vector.
pub fn cosine_imitation_grad<S: Scalar>(v: &[S], z: &[S], eps: S) -> Result<Vec<S>> {
    check_lengths(v, z)?;
    Ok(kern::cosine_grad_vec(v, z, eps))
}

/// Sum over stages of the spatial mean of per-location losses. Batched
/// pairs contribute their per-image average.
pub fn aggregate_imitation<S: Scalar>(
    pairs: &[MatchedPair<S>],
    metric: Metric,
    eps: S,
) -> Result<S> {
    if pairs.is_empty() {
        return Err(Error::Dim("aggregate_imitation needs at least one pair".into()));
    }
    let mut total = S::zero();
    for p in pairs {
        let (v, _) = kern::stage_forward(&p.student_adapted, &p.teacher, metric, eps, None)?;
        total = total + v;
    }
    Ok(total)
}

/// Outcome of the re-weighted aggregation: the value plus, per stage, whether
/// that stage was skipped because its weight map summed to zero.
#[derive(Clone, Debug)]
pub struct ReweightedLoss<S> {
    pub total: S,
    pub stage_terms: Vec<S>,
    pub skipped: Vec<bool>,
}

/// Re-weighted aggregation over single-image pairs with per-stage weights.
pub fn reweighted_aggregate<S: Scalar>(
    pairs: &[MatchedPair<S>],
    metric: Metric,
    eps: S,
    weights: &WeightMaps<S>,
) -> Result<ReweightedLoss<S>> {
    if pairs.is_empty() {
        return Err(Error::Dim("reweighted_aggregate needs at least one pair".into()));
    }
    if weights.u.len() != pairs.len() || weights.v.len() != pairs.len() {
        return Err(Error::Dim(format!(
            "{} weight entries for {} pairs",
            weights.u.len().min(weights.v.len()),
            pairs.len()
        )));
    }
    let mut total = S::zero();
    let mut stage_terms = Vec::with_capacity(pairs.len());
    let mut skipped = Vec::with_capacity(pairs.len());
    for (k, p) in pairs.iter().enumerate() {
        let (n, _, _, _) = p.student_adapted.dims4()?;
        if n != 1 {
            return Err(Error::Dim(
                "reweighted_aggregate expects single-image pairs; batch training packs weights per image".into(),
            ));
        }
        let sw = StageWeights {
            u: vec![weights.u[k]],
            v: weights.v[k].clone(),
        };
        let (v, skip) = kern::stage_forward(&p.student_adapted, &p.teacher, metric, eps, Some(&sw))?;
        stage_terms.push(v);
        skipped.push(skip > 0);
        total = total + v;
    }
    Ok(ReweightedLoss {
        total,
        stage_terms,
        skipped,
    })
}

/// Multi-task total `L_c + lambda1 * L_l + lambda2 * L_i`. Non-finite
/// components abort training, naming the offender.
pub fn total_loss<S: Scalar>(l_c: S, l_l: S, l_i: S, lambda1: S, lambda2: S) -> Result<S> {
    for (name, v) in [("L_c", l_c), ("L_l", l_l), ("L_i", l_i)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                component: match name {
                    "L_c" => "L_c",
                    "L_l" => "L_l",
                    _ => "L_i",
                },
            });
        }
    }
    Ok(l_c + lambda1 * l_l + lambda2 * l_i)
}

/// Per-step loss record, one JSON line per training step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageLossBreakdown {
    pub step: u64,
    pub loss_cls: f64,
    pub loss_loc: f64,
    pub loss_imit: f64,
    pub total: f64,
    /// Raw (unweighted) per-stage imitation terms.
    pub stage_losses: Vec<f64>,
    /// Macro weights in effect, batch-averaged per stage.
    pub stage_weights: Vec<f64>,
    /// Images whose weight map summed to zero, per stage.
    pub skipped_images: Vec<usize>,
    pub lambda1: f64,
    pub lambda2: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn pair_from(student: Vec<f64>, teacher: Vec<f64>, shape: &[usize]) -> MatchedPair<f64> {
        let s = Tensor::from_vec(shape, student).unwrap();
        let t = Tensor::from_vec(shape, teacher).unwrap();
        MatchedPair::new(s.clone(), t, 0, s).unwrap()
    }

    #[test]
    fn l2_examples_from_hand() {
        assert_eq!(l2_imitation(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(l2_imitation(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert_eq!(
            l2_imitation_grad(&[1.0, 2.0], &[0.0, 0.0]).unwrap(),
            vec![2.0, 4.0]
        );
        assert!(matches!(
            l2_imitation(&[1.0], &[1.0, 2.0]),
            Err(Error::Dim(_))
        ));
    }

    #[test]
    fn cosine_corner_cases() {
        let eps = 1e-8f64;
        assert!(cosine_imitation(&[3.0, 4.0], &[3.0, 4.0], eps).unwrap().abs() < 1e-12);
        assert!((cosine_imitation(&[1.0, 0.0], &[0.0, 1.0], eps).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_imitation(&[1.0, 0.0], &[-1.0, 0.0], eps).unwrap() - 2.0).abs() < 1e-12);
        assert!(cosine_imitation(&[2.0, 0.0], &[1.0, 0.0], eps).unwrap().abs() < 1e-12);
    }

    #[test]
    fn single_location_aggregate_equals_vector_loss() {
        let p = pair_from(vec![1.0, 2.0], vec![0.0, 0.0], &[1, 2, 1, 1]);
        let agg = aggregate_imitation(&[p], Metric::L2, 1e-8).unwrap();
        assert_eq!(agg, 5.0);
    }

    #[test]
    fn identical_features_give_zero() {
        let a = pair_from(vec![0.3; 8], vec![0.3; 8], &[1, 2, 2, 2]);
        let b = pair_from(vec![1.5; 4], vec![1.5; 4], &[1, 4, 1, 1]);
        assert_eq!(aggregate_imitation(&[a, b], Metric::L2, 1e-8).unwrap(), 0.0);
    }

    #[test]
    fn two_stage_hand_sum() {
        // stage 0: 2x1 map, C=1: losses (1-0)^2=1 and (3-1)^2=4, mean 2.5
        // stage 1: 1x1 map, C=2: (1,2) vs (0,0) -> 5
        let p0 = pair_from(vec![1.0, 3.0], vec![0.0, 1.0], &[1, 1, 2, 1]);
        let p1 = pair_from(vec![1.0, 2.0], vec![0.0, 0.0], &[1, 2, 1, 1]);
        let agg = aggregate_imitation(&[p0, p1], Metric::L2, 1e-8).unwrap();
        assert!((agg - 7.5).abs() < 1e-12);
    }

    #[test]
    fn masked_location_drops_its_loss() {
        // 2x1 map, per-location losses (a, b) = (1, 4); v = (1, 0) keeps a.
        let p = pair_from(vec![1.0, 3.0], vec![0.0, 1.0], &[1, 1, 2, 1]);
        let w = WeightMaps {
            u: vec![0.5],
            v: vec![Tensor::from_vec(&[1, 1, 2, 1], vec![1.0, 0.0]).unwrap()],
            provenance: String::new(),
        };
        let out = reweighted_aggregate(&[p], Metric::L2, 1e-8, &w).unwrap();
        assert!((out.total - 0.5).abs() < 1e-12); // u * a = 0.5 * 1
        assert_eq!(out.skipped, vec![false]);
    }

    #[test]
    fn total_loss_hand_sum_and_abort() {
        assert_eq!(total_loss(1.0, 2.0, 3.0, 1.0, 0.5).unwrap(), 4.5);
        assert_eq!(total_loss(1.0, 2.0, 3.0, 0.0, 0.0).unwrap(), 1.0);
        let err = total_loss(1.0, f64::NAN, 0.0, 1.0, 1.0).unwrap_err();
        assert!(err.to_string().contains("L_l"), "{err}");
    }
}
