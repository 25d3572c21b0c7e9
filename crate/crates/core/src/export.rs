//! Artifact exports: stage heatmaps, training curves and CSV grids.

use std::path::Path;

use crate::data::write_atomic;
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::matching::group_stages;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::TrainReport;

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

/// Channel-mean activation of the selected (last) feature of one stage.
pub fn stage_heatmap(det: &Detector<f32>, image: &Tensor<f32>, stage: usize) -> Result<Tensor<f32>> {
    let num_stages = det.spec().num_stages();
    if stage >= num_stages {
        return Err(Error::Config(format!(
            "stage {stage} does not exist; valid stages are 0..{}",
            num_stages - 1
        )));
    }
    let (c, h, w) = match image.shape()[..] {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::Dim(format!(
                "expected CHW image, got {:?}",
                image.shape()
            )))
        }
    };
    let mut batched = Tensor::zeros(&[1, c, h, w]);
    batched.data_mut().copy_from_slice(image.data());

    let mut tape = Tape::new();
    let img = tape.constant(batched);
    let pvars = det.add_params(&mut tape, false);
    let pass = det.forward_collect(&mut tape, &pvars, img)?;
    let feats: Vec<Tensor<f32>> = pass
        .features
        .iter()
        .map(|&f| tape.value(f).clone())
        .collect();
    let set = group_stages(feats)?;
    let selected = set.select_last();
    let feat = selected[stage];
    let (_, fc, fh, fw) = feat.dims4()?;
    let mut grid = Tensor::zeros(&[fh, fw]);
    for ci in 0..fc {
        for i in 0..fh * fw {
            grid.data_mut()[i] += feat.data()[ci * fh * fw + i];
        }
    }
    let inv = 1.0 / fc as f32;
    for v in grid.data_mut() {
        *v *= inv;
    }
    Ok(grid)
}

/// Write a 2-d tensor as a CSV grid (rows = H).
pub fn write_csv_grid(path: &Path, grid: &Tensor<f32>) -> Result<()> {
    let (h, w) = match grid.shape()[..] {
        [h, w] => (h, w),
        _ => {
            return Err(Error::Dim(format!(
                "expected 2-d grid, got {:?}",
                grid.shape()
            )))
        }
    };
    let mut out = String::new();
    for i in 0..h {
        let row: Vec<String> = (0..w)
            .map(|j| format!("{:.6}", grid.data()[i * w + j]))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_text(path, &out)
}

/// Write an N x 1 x H x W weight map (first image) as a CSV grid.
pub fn write_weight_map_csv(path: &Path, map: &Tensor<f32>) -> Result<()> {
    let (_, _, h, w) = map.dims4()?;
    let grid = Tensor::from_vec(&[h, w], map.data()[..h * w].to_vec())?;
    write_csv_grid(path, &grid)
}

/// Long-format curves: run,epoch,metric,value for five per-epoch metrics.
pub fn curves_csv(reports: &[TrainReport]) -> String {
    let mut out = String::from("run,epoch,metric,value\n");
    let mut seen: Vec<String> = Vec::new();
    for r in reports {
        // Keep run names unique across merged reports.
        let mut name = r.run.clone();
        let mut k = 1;
        while seen.contains(&name) {
            k += 1;
            name = format!("{}#{k}", r.run);
        }
        seen.push(name.clone());
        for e in &r.epochs {
            for (metric, value) in [
                ("loss_cls", e.loss_cls),
                ("loss_loc", e.loss_loc),
                ("loss_imit", e.loss_imit),
                ("lr", e.lr),
                ("map", e.map),
            ] {
                out.push_str(&format!("{name},{},{metric},{value}\n", e.epoch));
            }
        }
    }
    out
}

/// Parse a report JSON file written by a training run.
pub fn read_report(path: &Path) -> Result<TrainReport> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::EpochRecord;

    fn fake_report(run: &str, epochs: usize) -> TrainReport {
        TrainReport {
            run: run.into(),
            config_hash: "x".into(),
            spec_digest: "y".into(),
            lambda1: 1.0,
            lambda2: 0.5,
            warmup_epochs: 1,
            epochs: (0..epochs)
                .map(|e| EpochRecord {
                    epoch: e,
                    loss_cls: 1.0,
                    loss_loc: 2.0,
                    loss_imit: 3.0,
                    loss_total: 6.0,
                    lr: 0.1,
                    map: 0.5,
                })
                .collect(),
            final_checkpoint: "c".into(),
            teacher_digest_pre: None,
            teacher_digest_post: None,
        }
    }

    #[test]
    fn curves_have_five_rows_per_epoch() {
        let csv = curves_csv(&[fake_report("a", 4)]);
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), 5 * 4);
        assert!(rows[0].starts_with("a,0,loss_cls,"));
    }

    #[test]
    fn merged_runs_stay_unique() {
        let csv = curves_csv(&[fake_report("a", 1), fake_report("a", 1)]);
        let names: Vec<&str> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap())
            .collect();
        assert!(names.contains(&"a"));
        assert!(names.contains(&"a#2"));
    }

    #[test]
    fn zero_weight_model_yields_zero_heatmap() {
        use rand::SeedableRng;
        let spec = crate::detector::DetectorSpec {
            input_size: 16,
            in_channels: 3,
            stage_widths: vec![4, 8],
            blocks_per_stage: 1,
            head_stages: vec![1],
            num_classes: 2,
            anchor_scales: vec![2.0],
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut det = Detector::<f32>::new(spec, &mut rng).unwrap();
        for p in det.params_mut() {
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        let img = Tensor::filled(&[3, 16, 16], 0.5);
        let grid = stage_heatmap(&det, &img, 1).unwrap();
        assert_eq!(grid.shape(), &[4, 4]);
        assert!(grid.data().iter().all(|&v| v == 0.0));
        // bad stage index errors with the valid range
        let err = stage_heatmap(&det, &img, 9).unwrap_err();
        assert!(err.to_string().contains("0..1"));
    }
}
