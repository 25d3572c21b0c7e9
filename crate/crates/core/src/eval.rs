//! VOC-style mean average precision.
//!
//! Detections are greedily matched to unmatched ground truth at an IoU
//! threshold (default 0.5) in descending score order; AP is the area under
//! the monotone precision envelope over all recall points (all-point
//! interpolation). mAP averages the APs of classes that have at least one
//! ground-truth box.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::BoundingBox;

/// One scored detection; `bbox.class_id` carries the predicted class.
#[derive(Clone, Copy, Debug)]
pub struct Detection {
    pub score: f64,
    pub bbox: BoundingBox,
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ClassEval {
    pub ap: f64,
    pub gt_count: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalResult {
    pub iou_threshold: f64,
    pub per_class: BTreeMap<usize, ClassEval>,
    pub map: f64,
}

/// AP for one class. `dets` are (image, score, box); `gts` are (image, box).
pub fn average_precision(
    dets: &[(usize, f64, BoundingBox)],
    gts: &[(usize, BoundingBox)],
    iou_thresh: f64,
) -> ClassEval {
    let npos = gts.len();
    if npos == 0 {
        return ClassEval {
            ap: 0.0,
            gt_count: 0,
            tp: 0,
            fp: dets.len(),
            fn_count: 0,
        };
    }

    // Descending score, stable on ties.
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].1
            .partial_cmp(&dets[a].1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut matched = vec![false; gts.len()];
    let mut tp_cum = Vec::with_capacity(dets.len());
    let mut fp_cum = Vec::with_capacity(dets.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &di in &order {
        let (img, _, dbox) = dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, &(gimg, gbox)) in gts.iter().enumerate() {
            if gimg != img || matched[gi] {
                continue;
            }
            let v = iou(&dbox, &gbox);
            if v >= iou_thresh && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[gi] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        tp_cum.push(tp);
        fp_cum.push(fp);
    }

    // Area under the monotone precision envelope, scanned from the right.
    let mut ap = 0.0;
    let mut env = 0.0f64;
    for k in (0..tp_cum.len()).rev() {
        let prec = tp_cum[k] as f64 / (tp_cum[k] + fp_cum[k]) as f64;
        env = env.max(prec);
        let r_here = tp_cum[k] as f64 / npos as f64;
        let r_prev = if k == 0 {
            0.0
        } else {
            tp_cum[k - 1] as f64 / npos as f64
        };
        if r_here > r_prev {
            ap += (r_here - r_prev) * env;
        }
    }

    ClassEval {
        ap,
        gt_count: npos,
        tp,
        fp,
        fn_count: npos - tp,
    }
}

/// Evaluate per-image detections against per-image ground truth.
pub fn mean_ap(
    dets_per_image: &[Vec<Detection>],
    gts_per_image: &[Vec<BoundingBox>],
    iou_thresh: f64,
) -> EvalResult {
    assert_eq!(dets_per_image.len(), gts_per_image.len());
    let mut classes: Vec<usize> = gts_per_image
        .iter()
        .flatten()
        .map(|b| b.class_id)
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let mut per_class = BTreeMap::new();
    let mut sum = 0.0;
    for &class in &classes {
        let dets: Vec<(usize, f64, BoundingBox)> = dets_per_image
            .iter()
            .enumerate()
            .flat_map(|(img, ds)| {
                ds.iter()
                    .filter(|d| d.bbox.class_id == class)
                    .map(move |d| (img, d.score, d.bbox))
            })
            .collect();
        let gts: Vec<(usize, BoundingBox)> = gts_per_image
            .iter()
            .enumerate()
            .flat_map(|(img, bs)| {
                bs.iter()
                    .filter(|b| b.class_id == class)
                    .map(move |b| (img, *b))
            })
            .collect();
        let ce = average_precision(&dets, &gts, iou_thresh);
        sum += ce.ap;
        per_class.insert(class, ce);
    }
    let map = if classes.is_empty() {
        0.0
    } else {
        sum / classes.len() as f64
    };
    EvalResult {
        iou_threshold: iou_thresh,
        per_class,
        map,
    }
}

/// mAP at several IoU thresholds (e.g. a 0.5:0.95 sweep).
pub fn mean_ap_sweep(
    dets_per_image: &[Vec<Detection>],
    gts_per_image: &[Vec<BoundingBox>],
    thresholds: &[f64],
) -> Vec<EvalResult> {
    thresholds
        .iter()
        .map(|&t| mean_ap(dets_per_image, gts_per_image, t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(class: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(class, x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_hand_values() {
        let a = bb(0, 0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        let disjoint = bb(0, 0.0, 0.0, 0.1, 0.1);
        let far = bb(0, 0.5, 0.5, 0.9, 0.9);
        assert_eq!(iou(&disjoint, &far), 0.0);
        let b = bb(0, 0.5, 0.0, 1.5, 1.0);
        assert_eq!(iou(&a, &b), 1.0 / 3.0);
    }

    /// 3 GT, detections scored descending as TP, FP, TP, TP.
    /// Precision/recall: (1,1/3),(1/2,1/3),(2/3,2/3),(3/4,1);
    /// all-point AP = 1/3 + (3/4)(2/3) = 5/6.
    #[test]
    fn hand_derived_ap_fixture() {
        let g = |x: f64| bb(0, x, 0.0, x + 0.1, 0.1);
        let gts = vec![(0usize, g(0.0)), (0, g(0.3)), (0, g(0.6))];
        let dets = vec![
            (0usize, 0.9, g(0.0)),              // TP
            (0, 0.8, bb(0, 0.0, 0.5, 0.1, 0.6)), // FP (no GT there)
            (0, 0.7, g(0.3)),                   // TP
            (0, 0.6, g(0.6)),                   // TP
        ];
        let ce = average_precision(&dets, &gts, 0.5);
        assert!((ce.ap - 5.0 / 6.0).abs() < 1e-12, "ap = {}", ce.ap);
        assert_eq!((ce.tp, ce.fp, ce.fn_count), (3, 1, 0));
    }

    #[test]
    fn perfect_and_empty_cases() {
        let g = bb(0, 0.2, 0.2, 0.4, 0.4);
        let ce = average_precision(&[(0, 0.9, g)], &[(0, g)], 0.5);
        assert_eq!(ce.ap, 1.0);
        let ce = average_precision(&[], &[(0, g)], 0.5);
        assert_eq!(ce.ap, 0.0);
        assert_eq!(ce.fn_count, 1);
    }

    #[test]
    fn map_averages_classes_with_gt_only() {
        let g0 = bb(0, 0.1, 0.1, 0.3, 0.3);
        let g1 = bb(1, 0.5, 0.5, 0.7, 0.7);
        let gts = vec![vec![g0, g1]];
        // class 0 found perfectly, class 1 missed, class 7 absent from GT
        let dets = vec![vec![
            Detection { score: 0.9, bbox: g0 },
            Detection {
                score: 0.8,
                bbox: bb(7, 0.0, 0.0, 0.1, 0.1),
            },
        ]];
        let res = mean_ap(&dets, &gts, 0.5);
        assert_eq!(res.per_class.len(), 2);
        assert_eq!(res.map, 0.5);
        // one class alone: mAP equals its AP
        let res = mean_ap(&dets, &[vec![g0]], 0.5);
        assert_eq!(res.map, 1.0);
    }

    #[test]
    fn ap_invariant_to_score_rescaling() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let gts: Vec<(usize, BoundingBox)> = (0..4)
                .map(|i| (i % 2, bb(0, 0.2 * i as f64, 0.1, 0.2 * i as f64 + 0.15, 0.3)))
                .collect();
            let dets: Vec<(usize, f64, BoundingBox)> = (0..6)
                .map(|i| {
                    let jitter = rng.gen_range(-0.05..0.05);
                    (
                        i % 2,
                        rng.gen_range(0.1..0.9),
                        bb(
                            0,
                            (0.2 * (i % 4) as f64 + jitter).max(0.0),
                            0.1,
                            0.2 * (i % 4) as f64 + 0.15 + jitter.max(0.0) + 0.01,
                            0.3,
                        ),
                    )
                })
                .collect();
            let base = average_precision(&dets, &gts, 0.5).ap;
            let scaled: Vec<_> = dets.iter().map(|&(i, s, b)| (i, s * 3.7, b)).collect();
            let ap2 = average_precision(&scaled, &gts, 0.5).ap;
            assert!((base - ap2).abs() < 1e-12);
        }
    }

    #[test]
    fn trailing_zero_iou_fp_never_raises_ap() {
        let g = bb(0, 0.2, 0.2, 0.4, 0.4);
        let dets = vec![(0usize, 0.9, g), (0, 0.7, bb(0, 0.6, 0.6, 0.7, 0.7))];
        let base = average_precision(&dets[..1], &[(0, g)], 0.5).ap;
        let with_fp = average_precision(&dets, &[(0, g)], 0.5).ap;
        assert!(with_fp <= base + 1e-12);
    }
}
