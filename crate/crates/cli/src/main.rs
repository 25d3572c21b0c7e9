//! hgd: train, distill, ablate, evaluate and export on the toy detection task.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 invariant
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hgd_core::config::{ExperimentConfig, StageSubset};
use hgd_core::data::{self, Split};
use hgd_core::detector::Detector;
use hgd_core::error::Error;
use hgd_core::eval::mean_ap_sweep;
use hgd_core::export;
use hgd_core::train;

#[derive(Parser)]
#[command(name = "hgd", version, about = "feature-imitation distillation kit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file (key = value lines); defaults apply if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override single keys, e.g. --set epochs=30 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-width teacher on ground truth only.
    TrainTeacher {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory name under out_dir.
        #[arg(long, default_value = "teacher")]
        run_name: String,
    },
    /// Train the channel-halved student under a frozen teacher.
    Distill {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Teacher checkpoint produced by train-teacher.
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, default_value = "distill")]
        run_name: String,
    },
    /// Distill once per stage subset per seed and tabulate final mAP.
    AblateStages {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        teacher: PathBuf,
        /// Comma-separated subsets (default: none,early,late,all).
        #[arg(long, default_value = "none,early,late,all")]
        subsets: String,
    },
    /// Evaluate a checkpoint on one dataset split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; omitted = synthesize from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: String,
        /// Extra IoU thresholds; result becomes a JSON array.
        #[arg(long)]
        iou_thresholds: Option<String>,
        /// Write the JSON here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export a stage's channel-mean activation as a CSV grid.
    ExportHeatmaps {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image (binary PPM).
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        stage: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge training reports into one long-format curve CSV.
    ExportCurves {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// report.json files from training runs.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::TrainTeacher { cfg, run_name } => {
            let cfg = cfg.load()?;
            let dataset = train::load_or_generate_data(&cfg)?;
            if cfg.dataset_dir.is_none() {
                data::write_dataset(&cfg.out_dir.join("dataset"), &dataset)?;
            }
            let outcome = train::train_teacher(&cfg, &dataset, &run_name)?;
            let on_train = train::evaluate(&outcome.detector, &dataset, Split::Train, &cfg)?;
            let on_test = train::evaluate(&outcome.detector, &dataset, Split::Test, &cfg)?;
            println!(
                "teacher done: train mAP {:.4}, test mAP {:.4}, checkpoint {}",
                on_train.map, on_test.map, outcome.report.final_checkpoint
            );
            Ok(())
        }
        Command::Distill {
            cfg,
            teacher,
            run_name,
        } => {
            let cfg = cfg.load()?;
            let dataset = train::load_or_generate_data(&cfg)?;
            let teacher = Detector::load(&teacher)?;
            let outcome = train::train_student(&cfg, &dataset, Some(&teacher), &run_name)?;
            let last = outcome.report.epochs.last().expect("epochs recorded");
            println!(
                "student done: test mAP {:.4}, checkpoint {}",
                last.map, outcome.report.final_checkpoint
            );
            Ok(())
        }
        Command::AblateStages {
            cfg,
            teacher,
            subsets,
        } => {
            let cfg = cfg.load()?;
            let dataset = train::load_or_generate_data(&cfg)?;
            let teacher = Detector::load(&teacher)?;
            let subsets: Vec<StageSubset> = subsets
                .split(';')
                .flat_map(|g| g.split(',').map(str::trim))
                .filter(|s| !s.is_empty())
                .map(str::parse)
                .collect::<Result<_, _>>()?;
            let table = train::ablate_stages(&cfg, &dataset, &teacher, &subsets)?;
            print!("{}", table.pivot());
            println!("tables written under {}", cfg.out_dir.display());
            Ok(())
        }
        Command::Eval {
            cfg,
            checkpoint,
            data,
            split,
            iou_thresholds,
            out,
        } => {
            let mut cfg = cfg.load()?;
            if let Some(d) = data {
                cfg.dataset_dir = Some(d);
            }
            let split: Split = split.parse()?;
            let dataset = train::load_or_generate_data(&cfg)?;
            if dataset.split_indices(split).is_empty() {
                return Err(Error::Data(format!("split `{split}` has no scenes")));
            }
            let det = Detector::load(&checkpoint)?;
            let json = match iou_thresholds {
                None => {
                    let res = train::evaluate(&det, &dataset, split, &cfg)?;
                    serde_json::to_string_pretty(&res).expect("serializable")
                }
                Some(list) => {
                    let thresholds: Vec<f64> = list
                        .split(',')
                        .map(|t| {
                            t.trim().parse::<f64>().map_err(|_| {
                                Error::Config(format!("bad IoU threshold `{t}`"))
                            })
                        })
                        .collect::<Result<_, _>>()?;
                    let (dets, gts) = collect_detections(&det, &dataset, split, &cfg)?;
                    let res = mean_ap_sweep(&dets, &gts, &thresholds);
                    serde_json::to_string_pretty(&res).expect("serializable")
                }
            };
            println!("{json}");
            if let Some(path) = out {
                export::write_text(&path, &json)?;
            }
            Ok(())
        }
        Command::ExportHeatmaps {
            cfg: _,
            checkpoint,
            image,
            stage,
            out,
        } => {
            let det = Detector::load(&checkpoint)?;
            let img = data::read_ppm(&image)?;
            let grid = export::stage_heatmap(&det, &img, stage)?;
            export::write_csv_grid(&out, &grid)?;
            println!(
                "stage {stage} heatmap ({}x{}) written to {}",
                grid.shape()[0],
                grid.shape()[1],
                out.display()
            );
            Ok(())
        }
        Command::ExportCurves { cfg: _, out, reports } => {
            let parsed: Vec<_> = reports
                .iter()
                .map(|p| export::read_report(p))
                .collect::<Result<_, _>>()?;
            let csv = export::curves_csv(&parsed);
            export::write_text(&out, &csv)?;
            println!("{} run(s), CSV written to {}", parsed.len(), out.display());
            Ok(())
        }
    }
}

fn collect_detections(
    det: &Detector<f32>,
    dataset: &data::Dataset,
    split: Split,
    cfg: &ExperimentConfig,
) -> Result<
    (
        Vec<Vec<hgd_core::eval::Detection>>,
        Vec<Vec<data::BoundingBox>>,
    ),
    Error,
> {
    use hgd_core::detector::{infer_decode, AnchorGrid};
    use hgd_core::tape::Tape;
    use hgd_core::tensor::Tensor;

    let ids = dataset.split_indices(split);
    let grid = AnchorGrid::build(det.spec());
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for chunk in ids.chunks(cfg.batch_size.max(1)) {
        let mut tape = Tape::new();
        let mut data_buf = Vec::new();
        for &i in chunk {
            data_buf.extend_from_slice(dataset.scenes[i].image.data());
        }
        let s = cfg.image_size;
        let imgs = tape.constant(Tensor::from_vec(&[chunk.len(), 3, s, s], data_buf)?);
        let pvars = det.add_params(&mut tape, false);
        let pass = det.forward_collect(&mut tape, &pvars, imgs)?;
        for (bi, &i) in chunk.iter().enumerate() {
            dets.push(infer_decode(
                tape.value(pass.cls_rows),
                tape.value(pass.loc_rows),
                bi,
                &grid,
                cfg.eval_score_thresh,
                cfg.eval_nms_iou,
            )?);
            gts.push(dataset.scenes[i].boxes.clone());
        }
    }
    Ok((dets, gts))
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Parse { .. } | Error::Io(_) => 3,
        Error::Dim(_) | Error::Ordering(_) | Error::Invariant(_) | Error::NonFinite { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
