//! A small multi-stage single-shot detector.
//!
//! Each stage halves the resolution (2x2 maxpool) and runs `blocks` conv3x3
//! + relu blocks; every post-activation feature is collected for stage
//! matching. Head stages carry 3x3 class and box convolutions over a grid of
//! one square anchor per cell. The student architecture is the teacher with
//! channel widths halved.
//!
//! Checkpoint format (little-endian): magic `HGD1`, u32 spec-JSON length,
//! the spec JSON, its 32-byte SHA-256, u32 parameter count, then per
//! parameter: u32 name length, name, u32 ndim, dims, f32 values.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{write_atomic, BoundingBox};
use crate::error::{Error, Result};
use crate::eval::{iou, Detection};
use crate::kernels::detect::row_ce;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Architecture description; all sizes derive from it deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub input_size: usize,
    pub in_channels: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Stages carrying detection heads (0-based).
    pub head_stages: Vec<usize>,
    /// Foreground classes; logits get one extra background column.
    pub num_classes: usize,
    /// Per head stage: anchor side = scale * stride / input_size.
    pub anchor_scales: Vec<f64>,
}

impl DetectorSpec {
    pub fn toy_teacher(num_classes: usize) -> Self {
        DetectorSpec {
            input_size: 64,
            in_channels: 3,
            stage_widths: vec![16, 32, 64, 64],
            blocks_per_stage: 2,
            head_stages: vec![1, 2, 3],
            num_classes,
            anchor_scales: vec![2.4, 1.9, 1.4],
        }
    }

    /// Student counterpart: widths halved (rounded up), all else shared.
    pub fn halved(&self) -> Self {
        DetectorSpec {
            stage_widths: self.stage_widths.iter().map(|w| (w + 1) / 2).collect(),
            ..self.clone()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_widths.len()
    }

    pub fn stage_spatial(&self, stage: usize) -> usize {
        self.input_size >> (stage + 1)
    }

    pub fn stage_stride(&self, stage: usize) -> usize {
        1 << (stage + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() {
            return Err(Error::Config("detector needs at least one stage".into()));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be >= 1".into()));
        }
        if self.input_size % (1 << self.num_stages()) != 0 {
            return Err(Error::Config(format!(
                "input size {} not divisible by 2^{}",
                self.input_size,
                self.num_stages()
            )));
        }
        let mut prev = None;
        for &s in &self.head_stages {
            if s >= self.num_stages() {
                return Err(Error::Config(format!(
                    "head stage {s} outside {} stages",
                    self.num_stages()
                )));
            }
            if prev.map_or(false, |p| s <= p) {
                return Err(Error::Config("head stages must be strictly increasing".into()));
            }
            prev = Some(s);
        }
        if self.head_stages.is_empty() {
            return Err(Error::Config("at least one head stage required".into()));
        }
        if self.anchor_scales.len() != self.head_stages.len() {
            return Err(Error::Config(format!(
                "{} anchor scales for {} head stages",
                self.anchor_scales.len(),
                self.head_stages.len()
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    pub fn digest(&self) -> String {
        hex_digest(self.canonical_json().as_bytes())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(64);
    for b in Sha256::digest(bytes) {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
}

/// Parameters plus the spec that shapes them.
#[derive(Clone, Debug)]
pub struct Detector<S> {
    spec: DetectorSpec,
    params: Vec<Param<S>>,
}

/// Everything a forward pass exposes.
pub struct ForwardPass {
    /// Every post-activation feature in forward order.
    pub features: Vec<Var>,
    /// Per-anchor class logits, shape [N * anchors, classes + 1].
    pub cls_rows: Var,
    /// Per-anchor box offsets, shape [N * anchors, 4].
    pub loc_rows: Var,
}

impl<S: Scalar> Detector<S> {
    /// Fresh detector with uniform(-1/sqrt(fan_in), ..) conv weights and
    /// zero biases, drawn in a fixed parameter order.
    pub fn new(spec: DetectorSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        let mut conv = |name: String, c_out: usize, c_in: usize, k: usize, rng: &mut dyn rand::RngCore| {
            let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
            let data: Vec<S> = (0..c_out * c_in * k * k)
                .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
                .collect();
            params.push(Param {
                name: format!("{name}.weight"),
                value: Tensor::from_vec(&[c_out, c_in, k, k], data).expect("conv shape"),
            });
            params.push(Param {
                name: format!("{name}.bias"),
                value: Tensor::zeros(&[c_out]),
            });
        };
        let mut prev = spec.in_channels;
        for (s, &width) in spec.stage_widths.iter().enumerate() {
            for b in 0..spec.blocks_per_stage {
                conv(format!("stage{s}.block{b}"), width, prev, 3, rng);
                prev = width;
            }
        }
        for &hs in &spec.head_stages {
            let width = spec.stage_widths[hs];
            conv(format!("head{hs}.cls"), spec.num_classes + 1, width, 3, rng);
            conv(format!("head{hs}.loc"), 4, width, 3, rng);
        }
        Ok(Detector { spec, params })
    }

    pub fn spec(&self) -> &DetectorSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<S>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Put every parameter on a tape, in order.
    pub fn add_params(&self, tape: &mut Tape<S>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), requires_grad))
            .collect()
    }

    /// Index of the last feature of `stage` in the collected feature list.
    pub fn last_feature_index(&self, stage: usize) -> usize {
        stage * self.spec.blocks_per_stage + self.spec.blocks_per_stage - 1
    }

    /// Run the network on a tape, collecting every feature and the head rows.
    pub fn forward_collect(
        &self,
        tape: &mut Tape<S>,
        param_vars: &[Var],
        images: Var,
    ) -> Result<ForwardPass> {
        let (_, c, h, w) = tape.value(images).dims4()?;
        if c != self.spec.in_channels || h != self.spec.input_size || w != self.spec.input_size {
            return Err(Error::Dim(format!(
                "expected {}x{}x{} images, got {:?}",
                self.spec.in_channels,
                self.spec.input_size,
                self.spec.input_size,
                tape.value(images).shape()
            )));
        }
        let mut features = Vec::new();
        let mut x = images;
        let mut pi = 0usize;
        for _s in 0..self.spec.num_stages() {
            x = tape.maxpool2(x)?;
            for _b in 0..self.spec.blocks_per_stage {
                let y = tape.conv2d(x, param_vars[pi], 1, 1)?;
                let y = tape.add_bias(y, param_vars[pi + 1])?;
                pi += 2;
                x = tape.relu(y);
                features.push(x);
            }
        }
        let mut cls_maps = Vec::new();
        let mut loc_maps = Vec::new();
        for &hs in &self.spec.head_stages {
            let input = features[self.last_feature_index(hs)];
            let cls = tape.conv2d(input, param_vars[pi], 1, 1)?;
            let cls = tape.add_bias(cls, param_vars[pi + 1])?;
            let loc = tape.conv2d(input, param_vars[pi + 2], 1, 1)?;
            let loc = tape.add_bias(loc, param_vars[pi + 3])?;
            pi += 4;
            cls_maps.push(cls);
            loc_maps.push(loc);
        }
        debug_assert_eq!(pi, param_vars.len());
        Ok(ForwardPass {
            features,
            cls_rows: tape.concat_rows(&cls_maps)?,
            loc_rows: tape.concat_rows(&loc_maps)?,
        })
    }

    /// SHA-256 over the parameter names and value bytes, for frozen-teacher
    /// and determinism checks.
    pub fn params_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.name.as_bytes());
            for v in p.value.data() {
                hasher.update(v.as_f64().to_le_bytes());
            }
        }
        let mut out = String::with_capacity(64);
        for b in hasher.finalize() {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

/// The halved student must stay well under the teacher's size; halving both
/// fan-in and fan-out shrinks every conv by about 4x.
pub fn verify_compression<S: Scalar>(teacher: &Detector<S>, student: &Detector<S>) -> Result<()> {
    let (t, s) = (teacher.param_count(), student.param_count());
    if (s as f64) >= 0.30 * t as f64 {
        return Err(Error::Invariant(format!(
            "student has {s} parameters, not under 30% of the teacher's {t}"
        )));
    }
    Ok(())
}

/// One square anchor per head-stage cell, in (cx, cy, w, h) normalized form.
#[derive(Clone, Copy, Debug)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub fn corners(&self) -> BoundingBox {
        BoundingBox {
            class_id: 0,
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AnchorGrid {
    pub anchors: Vec<Anchor>,
}

impl AnchorGrid {
    /// Anchors in the exact row order of the head row matrices.
    pub fn build(spec: &DetectorSpec) -> Self {
        let mut anchors = Vec::new();
        for (k, &hs) in spec.head_stages.iter().enumerate() {
            let n = spec.stage_spatial(hs);
            let side = spec.anchor_scales[k] * spec.stage_stride(hs) as f64
                / spec.input_size as f64;
            for i in 0..n {
                for j in 0..n {
                    let cx = (j as f64 + 0.5) / n as f64;
                    let cy = (i as f64 + 0.5) / n as f64;
                    // clamp corners into the image, then re-center
                    let x1 = (cx - side / 2.0).max(0.0);
                    let y1 = (cy - side / 2.0).max(0.0);
                    let x2 = (cx + side / 2.0).min(1.0);
                    let y2 = (cy + side / 2.0).min(1.0);
                    anchors.push(Anchor {
                        cx: 0.5 * (x1 + x2),
                        cy: 0.5 * (y1 + y2),
                        w: x2 - x1,
                        h: y2 - y1,
                    });
                }
            }
        }
        AnchorGrid { anchors }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Per-anchor assignment: label 0 is background, `c + 1` is foreground
/// class c; offsets follow the usual center/size encoding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorTarget {
    pub label: u32,
    pub offsets: [f64; 4],
}

fn encode_offsets(anchor: &Anchor, gt: &BoundingBox) -> [f64; 4] {
    [
        (gt.cx() - anchor.cx) / anchor.w,
        (gt.cy() - anchor.cy) / anchor.h,
        (gt.width() / anchor.w).ln(),
        (gt.height() / anchor.h).ln(),
    ]
}

/// SSD-style matching: IoU >= 0.5 marks an anchor positive for its best box,
/// and every box additionally claims its single best anchor.
pub fn assign_targets(grid: &AnchorGrid, boxes: &[BoundingBox]) -> Vec<AnchorTarget> {
    let mut targets = vec![
        AnchorTarget {
            label: 0,
            offsets: [0.0; 4],
        };
        grid.len()
    ];
    if boxes.is_empty() {
        return targets;
    }
    for (ai, anchor) in grid.anchors.iter().enumerate() {
        let ab = anchor.corners();
        let mut best = (0usize, 0.0f64);
        for (bi, b) in boxes.iter().enumerate() {
            let v = iou(&ab, b);
            if v > best.1 {
                best = (bi, v);
            }
        }
        if best.1 >= 0.5 {
            let b = &boxes[best.0];
            targets[ai] = AnchorTarget {
                label: b.class_id as u32 + 1,
                offsets: encode_offsets(anchor, b),
            };
        }
    }
    for b in boxes {
        let mut best = (0usize, -1.0f64);
        for (ai, anchor) in grid.anchors.iter().enumerate() {
            let v = iou(&anchor.corners(), b);
            if v > best.1 {
                best = (ai, v);
            }
        }
        targets[best.0] = AnchorTarget {
            label: b.class_id as u32 + 1,
            offsets: encode_offsets(&grid.anchors[best.0], b),
        };
    }
    targets
}

pub struct DetectionLoss {
    pub l_c: Var,
    pub l_l: Var,
    pub num_pos: usize,
    pub num_neg: usize,
}

/// Classification + localization loss over head rows.
///
/// Localization: mean smooth-L1 over every coordinate of positive anchors.
/// Classification: mean cross-entropy over positives plus per-image hard
/// negatives at 3:1 (top-8 negatives when an image has no positives),
/// ranked by their background cross-entropy.
pub fn detection_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pass: &ForwardPass,
    targets_per_image: &[Vec<AnchorTarget>],
    anchors_per_image: usize,
) -> Result<DetectionLoss> {
    let rows = tape.value(pass.cls_rows).shape()[0];
    if rows != targets_per_image.len() * anchors_per_image {
        return Err(Error::Dim(format!(
            "{rows} rows vs {} images x {anchors_per_image} anchors",
            targets_per_image.len()
        )));
    }

    let mut pos_rows: Vec<u32> = Vec::new();
    let mut ce_rows: Vec<u32> = Vec::new();
    let mut ce_targets: Vec<u32> = Vec::new();
    let mut loc_target = Tensor::<S>::zeros(&[rows, 4]);
    let mut num_neg = 0usize;

    for (n, targets) in targets_per_image.iter().enumerate() {
        debug_assert_eq!(targets.len(), anchors_per_image);
        let base = (n * anchors_per_image) as u32;
        let mut image_pos = Vec::new();
        for (a, t) in targets.iter().enumerate() {
            if t.label > 0 {
                let row = base + a as u32;
                image_pos.push(row);
                for k in 0..4 {
                    loc_target.data_mut()[row as usize * 4 + k] = S::from_f64(t.offsets[k]);
                }
            }
        }
        // Rank this image's negatives by background CE, descending.
        let cls_vals = tape.value(pass.cls_rows);
        let mut negs: Vec<(u32, f64)> = targets
            .iter()
            .enumerate()
            .filter(|(_, t)| t.label == 0)
            .map(|(a, _)| {
                let row = base + a as u32;
                (row, row_ce(cls_vals, row as usize, 0).as_f64())
            })
            .collect();
        negs.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        let keep = if image_pos.is_empty() {
            8
        } else {
            3 * image_pos.len()
        };
        let keep = keep.min(negs.len());
        num_neg += keep;

        for &row in &image_pos {
            let t = targets[(row - base) as usize];
            ce_rows.push(row);
            ce_targets.push(t.label);
        }
        for &(row, _) in negs.iter().take(keep) {
            ce_rows.push(row);
            ce_targets.push(0);
        }
        pos_rows.extend(image_pos);
    }

    let num_pos = pos_rows.len();
    let l_c = tape.softmax_ce_rows(pass.cls_rows, ce_rows, ce_targets)?;
    let l_l = tape.smooth_l1_rows(pass.loc_rows, loc_target, pos_rows)?;
    Ok(DetectionLoss {
        l_c,
        l_l,
        num_pos,
        num_neg,
    })
}

/// Greedy per-class non-maximum suppression; a candidate is dropped when its
/// IoU with an already kept box of the same class exceeds the threshold.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        let suppressed = keep
            .iter()
            .any(|k| k.bbox.class_id == d.bbox.class_id && iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            keep.push(d);
        }
    }
    keep
}

/// Decode one image's head rows into scored, NMS-filtered detections.
pub fn infer_decode<S: Scalar>(
    cls_rows: &Tensor<S>,
    loc_rows: &Tensor<S>,
    image_index: usize,
    grid: &AnchorGrid,
    score_thresh: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    let k1 = cls_rows.shape()[1];
    let a = grid.len();
    let base = image_index * a;
    if (base + a) * k1 > cls_rows.numel() {
        return Err(Error::Dim(format!(
            "image {image_index} outside {} rows",
            cls_rows.shape()[0]
        )));
    }
    let mut candidates = Vec::new();
    for ai in 0..a {
        let row = &cls_rows.data()[(base + ai) * k1..(base + ai + 1) * k1];
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let denom: f64 = row.iter().map(|&v| (v - max).as_f64().exp()).sum();
        let anchor = &grid.anchors[ai];
        let off = &loc_rows.data()[(base + ai) * 4..(base + ai) * 4 + 4];
        for c in 1..k1 {
            let p = (row[c] - max).as_f64().exp() / denom;
            if p < score_thresh {
                continue;
            }
            let dx = off[0].as_f64();
            let dy = off[1].as_f64();
            let dw = off[2].as_f64().clamp(-4.0, 4.0);
            let dh = off[3].as_f64().clamp(-4.0, 4.0);
            let cx = anchor.cx + dx * anchor.w;
            let cy = anchor.cy + dy * anchor.h;
            let w = anchor.w * dw.exp();
            let h = anchor.h * dh.exp();
            let bb = BoundingBox::new(
                c - 1,
                (cx - w / 2.0).clamp(0.0, 1.0),
                (cy - h / 2.0).clamp(0.0, 1.0),
                (cx + w / 2.0).clamp(0.0, 1.0),
                (cy + h / 2.0).clamp(0.0, 1.0),
            );
            if let Ok(bbox) = bb {
                candidates.push(Detection { score: p, bbox });
            }
        }
    }
    Ok(nms(candidates, nms_iou))
}

// ---- checkpoints (training precision only) --------------------------------

impl Detector<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let spec_json = self.spec.canonical_json();
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(b"HGD1");
        out.extend_from_slice(&(spec_json.len() as u32).to_le_bytes());
        out.extend_from_slice(spec_json.as_bytes());
        out.extend_from_slice(&Sha256::digest(spec_json.as_bytes()));
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        write_atomic(path, &out)
    }

    pub fn load(path: &Path) -> Result<Detector<f32>> {
        let name = path.display().to_string();
        let bytes = fs::read(path).map_err(|e| Error::Data(format!("{name}: {e}")))?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Data(format!("{name}: truncated checkpoint")));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let u32_at = |pos: &mut usize| -> Result<usize> {
            let b = take(pos, 4)?;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
        };
        if take(&mut pos, 4)? != b"HGD1" {
            return Err(Error::Data(format!("{name}: bad magic, not a checkpoint")));
        }
        let spec_len = u32_at(&mut pos)?;
        let spec_json = std::str::from_utf8(take(&mut pos, spec_len)?)
            .map_err(|_| Error::Data(format!("{name}: spec block is not UTF-8")))?
            .to_string();
        let stored_hash = take(&mut pos, 32)?.to_vec();
        if stored_hash != Sha256::digest(spec_json.as_bytes()).as_slice() {
            return Err(Error::Data(format!("{name}: spec hash mismatch (corrupt)")));
        }
        let spec: DetectorSpec = serde_json::from_str(&spec_json)
            .map_err(|e| Error::Data(format!("{name}: bad spec block: {e}")))?;
        spec.validate()?;
        let n_params = u32_at(&mut pos)?;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name_len = u32_at(&mut pos)?;
            let pname = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| Error::Data(format!("{name}: bad parameter name")))?
                .to_string();
            let ndim = u32_at(&mut pos)?;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32_at(&mut pos)?);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut pos, numel * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.push(Param {
                name: pname,
                value: Tensor::from_vec(&shape, data)?,
            });
        }
        if pos != bytes.len() {
            return Err(Error::Data(format!("{name}: trailing bytes in checkpoint")));
        }
        Ok(Detector { spec, params })
    }

    /// Load and reject a checkpoint whose spec hash differs from `expected`.
    pub fn load_expect(path: &Path, expected: &DetectorSpec) -> Result<Detector<f32>> {
        let det = Self::load(path)?;
        if det.spec.digest() != expected.digest() {
            return Err(Error::Data(format!(
                "{}: checkpoint spec hash {} does not match expected {}",
                path.display(),
                det.spec.digest(),
                expected.digest()
            )));
        }
        Ok(det)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec() -> DetectorSpec {
        DetectorSpec {
            input_size: 16,
            in_channels: 3,
            stage_widths: vec![4, 8],
            blocks_per_stage: 1,
            head_stages: vec![1],
            num_classes: 2,
            anchor_scales: vec![2.0],
        }
    }

    #[test]
    fn forward_feature_sizes_follow_stride_arithmetic() {
        let spec = DetectorSpec::toy_teacher(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let det = Detector::<f32>::new(spec, &mut rng).unwrap();
        let mut tape = Tape::new();
        let imgs = tape.constant(Tensor::zeros(&[2, 3, 64, 64]));
        let pvars = det.add_params(&mut tape, false);
        let pass = det.forward_collect(&mut tape, &pvars, imgs).unwrap();
        let sizes: Vec<usize> = pass
            .features
            .iter()
            .map(|&f| tape.value(f).shape()[2])
            .collect();
        assert_eq!(sizes, vec![32, 32, 16, 16, 8, 8, 4, 4]);
        for &f in &pass.features {
            assert_eq!(tape.value(f).shape()[0], 2, "batch dim preserved");
        }
        // anchors: 16^2 + 8^2 + 4^2 = 336 per image
        let grid = AnchorGrid::build(det.spec());
        assert_eq!(grid.len(), 336);
        assert_eq!(tape.value(pass.cls_rows).shape(), &[2 * 336, 3]);
        assert_eq!(tape.value(pass.loc_rows).shape(), &[2 * 336, 4]);
    }

    #[test]
    fn teacher_student_spatial_sizes_match() {
        let teacher = DetectorSpec::toy_teacher(2);
        let student = teacher.halved();
        assert_eq!(student.stage_widths, vec![8, 16, 32, 32]);
        for s in 0..teacher.num_stages() {
            assert_eq!(teacher.stage_spatial(s), student.stage_spatial(s));
        }
    }

    #[test]
    fn student_parameter_count_under_thirty_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Detector::<f32>::new(DetectorSpec::toy_teacher(2), &mut rng).unwrap();
        let s = Detector::<f32>::new(t.spec().halved(), &mut rng).unwrap();
        verify_compression(&t, &s).unwrap();
        assert!((s.param_count() as f64) < 0.3 * t.param_count() as f64);
    }

    #[test]
    fn anchors_stay_inside_unit_square() {
        let grid = AnchorGrid::build(&DetectorSpec::toy_teacher(2));
        for a in &grid.anchors {
            let c = a.corners();
            assert!(c.x1 >= 0.0 && c.y1 >= 0.0 && c.x2 <= 1.0 && c.y2 <= 1.0);
            assert!(c.x2 > c.x1 && c.y2 > c.y1);
        }
    }

    #[test]
    fn exact_anchor_match_gives_zero_offsets() {
        let grid = AnchorGrid::build(&tiny_spec());
        let a = grid.anchors[10];
        let gt = a.corners();
        let gt = BoundingBox::new(1, gt.x1, gt.y1, gt.x2, gt.y2).unwrap();
        let targets = assign_targets(&grid, &[gt]);
        assert_eq!(targets[10].label, 2);
        for k in 0..4 {
            assert!(targets[10].offsets[k].abs() < 1e-12);
        }
    }

    #[test]
    fn no_boxes_means_all_background() {
        let grid = AnchorGrid::build(&tiny_spec());
        let targets = assign_targets(&grid, &[]);
        assert!(targets.iter().all(|t| t.label == 0));
    }

    #[test]
    fn best_anchor_is_forced_positive_below_threshold() {
        let grid = AnchorGrid::build(&tiny_spec());
        // A tiny box matches no anchor at IoU >= 0.5 but still claims its best.
        let gt = BoundingBox::new(0, 0.01, 0.01, 0.09, 0.09).unwrap();
        let best = grid
            .anchors
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| {
                iou(&a.corners(), &gt)
                    .partial_cmp(&iou(&b.corners(), &gt))
                    .unwrap()
            })
            .unwrap()
            .0;
        assert!(iou(&grid.anchors[best].corners(), &gt) < 0.5);
        let targets = assign_targets(&grid, &[gt]);
        assert_eq!(targets.iter().filter(|t| t.label > 0).count(), 1);
        assert_eq!(targets[best].label, 1);
    }

    #[test]
    fn nms_keeps_hand_derived_survivors() {
        let d = |x1: f64, x2: f64, score: f64| Detection {
            score,
            bbox: BoundingBox::new(0, x1, 0.0, x2, 0.4).unwrap(),
        };
        // IoU(A,B) = 0.778 > 0.5 suppresses B; IoU(A,D) = 0.143 keeps D.
        let a = d(0.0, 0.4, 0.9);
        let b = d(0.05, 0.45, 0.8);
        let dd = d(0.3, 0.7, 0.6);
        let c = Detection {
            score: 0.7,
            bbox: BoundingBox::new(0, 0.5, 0.5, 0.9, 0.9).unwrap(),
        };
        let kept = nms(vec![a, b, c, dd], 0.5);
        let scores: Vec<f64> = kept.iter().map(|k| k.score).collect();
        assert_eq!(scores, vec![0.9, 0.7, 0.6]);
        // identical duplicate collapses to one
        let kept = nms(vec![a, a], 0.5);
        assert_eq!(kept.len(), 1);
        // different classes never suppress each other
        let mut other = a;
        other.bbox.class_id = 1;
        other.score = 0.85;
        let kept = nms(vec![a, other], 0.5);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn decode_thresholds_scores() {
        let spec = tiny_spec();
        let grid = AnchorGrid::build(&spec);
        let a = grid.len();
        // All logits flat: every class at 1/3 < 0.5 threshold -> empty.
        let cls = Tensor::<f32>::zeros(&[a, 3]);
        let loc = Tensor::<f32>::zeros(&[a, 4]);
        let dets = infer_decode(&cls, &loc, 0, &grid, 0.5, 0.45).unwrap();
        assert!(dets.is_empty());
        // Boost one anchor's class-1 logit: exactly one detection at its anchor.
        let mut cls = Tensor::<f32>::zeros(&[a, 3]);
        cls.data_mut()[5 * 3 + 1] = 10.0;
        let dets = infer_decode(&cls, &loc, 0, &grid, 0.5, 0.45).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].bbox.class_id, 0);
        let want = grid.anchors[5].corners();
        assert!((dets[0].bbox.x1 - want.x1).abs() < 1e-6);
    }

    #[test]
    fn checkpoint_roundtrip_and_spec_hash_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let det = Detector::<f32>::new(tiny_spec(), &mut rng).unwrap();
        let path = dir.path().join("model.hgd");
        det.save(&path).unwrap();
        let back = Detector::<f32>::load(&path).unwrap();
        assert_eq!(back.params_digest(), det.params_digest());
        assert_eq!(back.spec(), det.spec());
        Detector::<f32>::load_expect(&path, &tiny_spec()).unwrap();
        let err = Detector::<f32>::load_expect(&path, &DetectorSpec::toy_teacher(2)).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }
}
