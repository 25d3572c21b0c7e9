//! Stage correspondence between student and teacher feature pyramids.
//!
//! Features are grouped into stages by spatial size (a size change starts a
//! new stage), the last feature of each stage is selected, and stage k of
//! the student is paired with stage k of the teacher. Trailing unmatched
//! stages are dropped and reported; pairs whose resolutions differ are
//! tagged for bilinear resampling of the student onto the teacher's grid,
//! unless the ratio is extreme (> 4x), in which case the pair is dropped.
//!
//! A 1x1 conv adapter per pair maps student channels onto teacher channels.
//! Adapters exist only on the distillation side branch; the deployed student
//! never runs them.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{conv, resize};
use crate::tensor::{Scalar, Tensor};

/// Features in forward order with their stage ids.
#[derive(Clone, Debug)]
pub struct StageFeatureSet<S> {
    pub features: Vec<Tensor<S>>,
    pub stage_ids: Vec<usize>,
}

/// Assign contiguous stage ids to spatial sizes in forward order.
pub fn assign_stage_ids(sizes: &[(usize, usize)]) -> Result<Vec<usize>> {
    if sizes.is_empty() {
        return Err(Error::Ordering("empty feature list".into()));
    }
    let mut ids = Vec::with_capacity(sizes.len());
    let mut stage = 0usize;
    ids.push(0);
    for i in 1..sizes.len() {
        let (ph, pw) = sizes[i - 1];
        let (h, w) = sizes[i];
        if h > ph || w > pw {
            return Err(Error::Ordering(format!(
                "spatial size increases at feature {i}: {}x{} after {}x{}",
                h, w, ph, pw
            )));
        }
        if (h, w) != (ph, pw) {
            stage += 1;
        }
        ids.push(stage);
    }
    Ok(ids)
}

pub fn group_stages<S: Scalar>(features: Vec<Tensor<S>>) -> Result<StageFeatureSet<S>> {
    let sizes: Vec<(usize, usize)> = features
        .iter()
        .map(|f| f.dims4().map(|(_, _, h, w)| (h, w)))
        .collect::<Result<_>>()?;
    let stage_ids = assign_stage_ids(&sizes)?;
    Ok(StageFeatureSet {
        features,
        stage_ids,
    })
}

/// Index of the last feature of each stage, in stage order.
pub fn select_last_indices(stage_ids: &[usize]) -> Vec<usize> {
    assert!(!stage_ids.is_empty(), "stage set cannot be empty");
    let mut last = Vec::new();
    for (i, &s) in stage_ids.iter().enumerate() {
        if s == last.len() {
            last.push(i);
        } else {
            last[s] = i;
        }
    }
    last
}

impl<S: Scalar> StageFeatureSet<S> {
    pub fn num_stages(&self) -> usize {
        self.stage_ids.last().map_or(0, |s| s + 1)
    }

    /// The last feature of each stage, preserving stage order.
    pub fn select_last(&self) -> Vec<&Tensor<S>> {
        select_last_indices(&self.stage_ids)
            .into_iter()
            .map(|i| &self.features[i])
            .collect()
    }
}

/// Shape of one selected stage feature (batch dim excluded).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatShape {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
}

impl FeatShape {
    pub fn of<S: Scalar>(t: &Tensor<S>) -> Result<Self> {
        let (_, c, h, w) = t.dims4()?;
        Ok(FeatShape { channels: c, h, w })
    }
}

/// One planned student/teacher stage pair.
#[derive(Clone, Copy, Debug)]
pub struct PairPlan {
    pub stage: usize,
    pub student: FeatShape,
    pub teacher: FeatShape,
    /// Student must be bilinearly resampled onto the teacher's grid.
    pub resample: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropReason {
    ExtraStudentStage,
    ExtraTeacherStage,
    ExtremeResolutionRatio,
}

#[derive(Clone, Copy, Debug)]
pub struct Dropped {
    pub stage: usize,
    pub reason: DropReason,
}

#[derive(Clone, Debug, Default)]
pub struct MatchPlan {
    pub pairs: Vec<PairPlan>,
    pub dropped: Vec<Dropped>,
}

/// Pair stage k of the student with stage k of the teacher.
pub fn build_match_plan(student: &[FeatShape], teacher: &[FeatShape]) -> Result<MatchPlan> {
    if student.is_empty() || teacher.is_empty() {
        return Err(Error::Dim("match plan needs at least one stage per side".into()));
    }
    let mut plan = MatchPlan::default();
    let common = student.len().min(teacher.len());
    for k in common..student.len() {
        plan.dropped.push(Dropped {
            stage: k,
            reason: DropReason::ExtraStudentStage,
        });
    }
    for k in common..teacher.len() {
        plan.dropped.push(Dropped {
            stage: k,
            reason: DropReason::ExtraTeacherStage,
        });
    }
    for k in 0..common {
        let (s, t) = (student[k], teacher[k]);
        let ratio = |a: usize, b: usize| a.max(b) as f64 / a.min(b).max(1) as f64;
        if ratio(s.h, t.h) > 4.0 || ratio(s.w, t.w) > 4.0 {
            plan.dropped.push(Dropped {
                stage: k,
                reason: DropReason::ExtremeResolutionRatio,
            });
            continue;
        }
        plan.pairs.push(PairPlan {
            stage: k,
            student: s,
            teacher: t,
            resample: (s.h, s.w) != (t.h, t.w),
        });
    }
    Ok(plan)
}

impl fmt::Display for MatchPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "stage match plan: {} pair(s)", self.pairs.len())?;
        for p in &self.pairs {
            writeln!(
                f,
                "  stage {}: student {}x{}x{} -> teacher {}x{}x{}{}",
                p.stage,
                p.student.channels,
                p.student.h,
                p.student.w,
                p.teacher.channels,
                p.teacher.h,
                p.teacher.w,
                if p.resample { " (resample to teacher)" } else { "" }
            )?;
        }
        for d in &self.dropped {
            let why = match d.reason {
                DropReason::ExtraStudentStage => "unmatched trailing student stage",
                DropReason::ExtraTeacherStage => "unmatched trailing teacher stage",
                DropReason::ExtremeResolutionRatio => "resolution ratio exceeds 4x",
            };
            writeln!(f, "  dropped stage {}: {}", d.stage, why)?;
        }
        Ok(())
    }
}

/// Student and teacher features aligned for one stage.
#[derive(Clone, Debug)]
pub struct MatchedPair<S> {
    pub student_adapted: Tensor<S>,
    pub teacher: Tensor<S>,
    pub stage: usize,
    /// Pre-adaptation student feature; statistics weights read this.
    pub student_raw: Tensor<S>,
}

impl<S: Scalar> MatchedPair<S> {
    pub fn new(
        student_adapted: Tensor<S>,
        teacher: Tensor<S>,
        stage: usize,
        student_raw: Tensor<S>,
    ) -> Result<Self> {
        if student_adapted.shape() != teacher.shape() {
            return Err(Error::Dim(format!(
                "adapted student {:?} does not match teacher {:?}",
                student_adapted.shape(),
                teacher.shape()
            )));
        }
        Ok(MatchedPair {
            student_adapted,
            teacher,
            stage,
            student_raw,
        })
    }
}

/// Trainable 1x1 conv per matched stage (student -> teacher channels).
#[derive(Clone, Debug)]
pub struct Adapter<S> {
    pub stage: usize,
    pub kernel: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct AdapterBank<S> {
    pub adapters: Vec<Adapter<S>>,
}

impl<S: Scalar> AdapterBank<S> {
    /// Small uniform init scaled by 1/sqrt(fan_in) keeps the initial
    /// imitation loss finite and non-degenerate.
    pub fn init(plan: &MatchPlan, rng: &mut impl Rng) -> Self {
        let adapters = plan
            .pairs
            .iter()
            .map(|p| {
                let fan_in = p.student.channels;
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data: Vec<S> = (0..p.teacher.channels * fan_in)
                    .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
                    .collect();
                Adapter {
                    stage: p.stage,
                    kernel: Tensor::from_vec(&[p.teacher.channels, fan_in, 1, 1], data)
                        .expect("adapter kernel shape"),
                }
            })
            .collect();
        AdapterBank { adapters }
    }

    pub fn get(&self, stage: usize) -> Option<&Adapter<S>> {
        self.adapters.iter().find(|a| a.stage == stage)
    }
}

/// Run one stage's adaptation outside any tape: 1x1 conv to teacher channels,
/// then bilinear resize onto the teacher grid when the plan says so.
pub fn adapt<S: Scalar>(
    student_raw: &Tensor<S>,
    teacher: &Tensor<S>,
    pair: &PairPlan,
    bank: &AdapterBank<S>,
) -> Result<MatchedPair<S>> {
    let adapter = bank.get(pair.stage).ok_or_else(|| {
        Error::Config(format!("no adapter configured for stage {}", pair.stage))
    })?;
    let mut adapted = conv::forward(student_raw, &adapter.kernel, 1, 0)?;
    if pair.resample {
        adapted = resize::forward(&adapted, pair.teacher.h, pair.teacher.w)?;
    }
    MatchedPair::new(adapted, teacher.clone(), pair.stage, student_raw.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shapes(sizes: &[usize]) -> Vec<(usize, usize)> {
        sizes.iter().map(|&s| (s, s)).collect()
    }

    #[test]
    fn grouping_rule_matches_hand_result() {
        let ids = assign_stage_ids(&shapes(&[38, 38, 19, 19, 10])).unwrap();
        assert_eq!(ids, vec![0, 0, 1, 1, 2]);
    }

    #[test]
    fn single_feature_is_stage_zero() {
        assert_eq!(assign_stage_ids(&shapes(&[7])).unwrap(), vec![0]);
    }

    #[test]
    fn increasing_size_is_an_ordering_error() {
        let err = assign_stage_ids(&shapes(&[19, 38])).unwrap_err();
        assert!(matches!(err, Error::Ordering(_)));
    }

    #[test]
    fn select_last_takes_final_feature_per_stage() {
        assert_eq!(select_last_indices(&[0, 0, 1]), vec![1, 2]);
        assert_eq!(select_last_indices(&[0, 1, 2]), vec![0, 1, 2]);
    }

    #[test]
    fn plan_pairs_diagonally_and_reports_drops() {
        let fs = |c: usize, s: usize| FeatShape {
            channels: c,
            h: s,
            w: s,
        };
        let student: Vec<_> = (0..6).map(|k| fs(8, 32 >> k.min(4))).collect();
        let teacher: Vec<_> = (0..5).map(|k| fs(16, 32 >> k.min(4))).collect();
        let plan = build_match_plan(&student, &teacher).unwrap();
        assert_eq!(plan.pairs.len(), 5);
        assert_eq!(plan.dropped.len(), 1);
        assert_eq!(plan.dropped[0].stage, 5);
        assert!(matches!(plan.dropped[0].reason, DropReason::ExtraStudentStage));
        assert!(plan.pairs.iter().all(|p| !p.resample));
    }

    #[test]
    fn size_mismatch_tags_resample_and_extreme_ratio_drops() {
        let fs = |c: usize, h: usize, w: usize| FeatShape { channels: c, h, w };
        let plan = build_match_plan(&[fs(8, 20, 20)], &[fs(16, 19, 19)]).unwrap();
        assert!(plan.pairs[0].resample);
        let plan = build_match_plan(&[fs(8, 64, 64)], &[fs(16, 8, 8)]).unwrap();
        assert!(plan.pairs.is_empty());
        assert!(matches!(
            plan.dropped[0].reason,
            DropReason::ExtremeResolutionRatio
        ));
    }

    #[test]
    fn adapt_matches_channels_and_optionally_resizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fs = |c: usize, s: usize| FeatShape {
            channels: c,
            h: s,
            w: s,
        };
        // channel-only
        let plan = build_match_plan(&[fs(8, 10)], &[fs(16, 10)]).unwrap();
        let bank = AdapterBank::<f64>::init(&plan, &mut rng);
        let student = Tensor::filled(&[1, 8, 10, 10], 0.5);
        let teacher = Tensor::zeros(&[1, 16, 10, 10]);
        let pair = adapt(&student, &teacher, &plan.pairs[0], &bank).unwrap();
        assert_eq!(pair.student_adapted.shape(), teacher.shape());
        assert_eq!(pair.student_raw, student);

        // resample 20x20 -> 10x10
        let plan = build_match_plan(&[fs(8, 20)], &[fs(16, 10)]).unwrap();
        let bank = AdapterBank::<f64>::init(&plan, &mut rng);
        let student = Tensor::filled(&[1, 8, 20, 20], 0.5);
        let pair = adapt(&student, &teacher, &plan.pairs[0], &bank).unwrap();
        assert_eq!(pair.student_adapted.shape(), &[1, 16, 10, 10]);
    }

    #[test]
    fn missing_adapter_is_a_configuration_error() {
        let fs = FeatShape {
            channels: 4,
            h: 4,
            w: 4,
        };
        let plan = build_match_plan(&[fs], &[fs]).unwrap();
        let bank = AdapterBank::<f64> { adapters: vec![] };
        let student = Tensor::zeros(&[1, 4, 4, 4]);
        let teacher = Tensor::zeros(&[1, 4, 4, 4]);
        let err = adapt(&student, &teacher, &plan.pairs[0], &bank).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn identity_adapter_preserves_values() {
        // Same channel count with an identity 1x1 kernel: adapted == raw.
        let fs = FeatShape {
            channels: 2,
            h: 3,
            w: 3,
        };
        let plan = build_match_plan(&[fs], &[fs]).unwrap();
        let mut kernel = Tensor::<f64>::zeros(&[2, 2, 1, 1]);
        kernel.data_mut()[0] = 1.0; // [0,0]
        kernel.data_mut()[3] = 1.0; // [1,1]
        let bank = AdapterBank {
            adapters: vec![Adapter { stage: 0, kernel }],
        };
        let student =
            Tensor::from_vec(&[1, 2, 3, 3], (0..18).map(|v| v as f64 * 0.1).collect()).unwrap();
        let teacher = Tensor::zeros(&[1, 2, 3, 3]);
        let pair = adapt(&student, &teacher, &plan.pairs[0], &bank).unwrap();
        assert_eq!(pair.student_adapted, student);
    }
}
