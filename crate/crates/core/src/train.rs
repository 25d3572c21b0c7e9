//! Deterministic training harness.
//!
//! Teacher and student runs share one loop: SGD with momentum, step-decay
//! learning rate, per-epoch evaluation on the test split, JSON-lines step
//! logs and a JSON report. Distillation adds the imitation branch: the
//! frozen teacher's selected stage features are cached once, the student's
//! features pass through 1x1 adapters (plus resize when planned), and the
//! re-weighted imitation loss joins the objective after the warmup epochs.
//!
//! Every random choice draws from a stream derived from the run seed
//! (parameters, batch order and adapters use separate streams, so a run
//! with imitation disabled reproduces the plain baseline exactly). Repeated
//! runs of the same config are bit-identical.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, StageSubset};
use crate::data::{self, Dataset, LabeledScene, Split};
use crate::detector::{
    assign_targets, detection_loss, infer_decode, verify_compression, AnchorGrid, AnchorTarget,
    Detector, DetectorSpec,
};
use crate::error::{Error, Result};
use crate::eval::{mean_ap, Detection, EvalResult};
use crate::export;
use crate::imitation::{self, StageLossBreakdown, StageWeights};
use crate::kernels::imitation::stage_forward;
use crate::matching::{
    build_match_plan, group_stages, AdapterBank, FeatShape, MatchPlan, MatchedPair, PairPlan,
};
use crate::reweight::{compose_weights, MacroWeight, MicroWeight, WeightConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Plain SGD with momentum over a flat parameter list.
pub struct Sgd {
    pub momentum: f32,
    velocity: Vec<Tensor<f32>>,
}

impl Sgd {
    pub fn new(shapes: &[&[usize]], momentum: f32) -> Self {
        Sgd {
            momentum,
            velocity: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// `params[i] -= lr * (momentum * v + g)`; missing gradients skip.
    pub fn step(&mut self, lr: f32, params: &mut [&mut Tensor<f32>], grads: &[Option<&Tensor<f32>>]) {
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + *gv;
                *pv -= lr * *vv;
            }
        }
    }
}

/// Step-decay schedule: lr * factor^(number of passed milestones).
pub struct LrSchedule {
    pub base: f64,
    pub factor: f64,
    pub milestones: Vec<usize>,
}

impl LrSchedule {
    pub fn resolve(cfg: &ExperimentConfig, run_epochs: usize) -> Result<Self> {
        let milestones = match &cfg.lr_milestones {
            Some(m) => m.clone(),
            None => {
                let mut m = vec![run_epochs * 60 / 100, run_epochs * 80 / 100];
                m.retain(|&e| e > 0 && e < run_epochs);
                m.dedup();
                m
            }
        };
        for w in milestones.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config(format!(
                    "lr_milestones must be strictly increasing, got {milestones:?}"
                )));
            }
        }
        if milestones.iter().any(|&m| m >= run_epochs) {
            return Err(Error::Config(format!(
                "lr_milestones {milestones:?} must be < epochs {run_epochs}"
            )));
        }
        Ok(LrSchedule {
            base: cfg.lr,
            factor: cfg.lr_decay_factor,
            milestones,
        })
    }

    pub fn at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.factor.powi(passed as i32)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_cls: f64,
    pub loss_loc: f64,
    pub loss_imit: f64,
    pub loss_total: f64,
    pub lr: f64,
    pub map: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub run: String,
    pub config_hash: String,
    pub spec_digest: String,
    pub lambda1: f64,
    /// Resolved imitation weight (0 when imitation never activates).
    pub lambda2: f64,
    pub warmup_epochs: usize,
    pub epochs: Vec<EpochRecord>,
    pub final_checkpoint: String,
    pub teacher_digest_pre: Option<String>,
    pub teacher_digest_post: Option<String>,
}

pub struct TrainOutcome {
    pub detector: Detector<f32>,
    pub adapters: Option<AdapterBank<f32>>,
    pub report: TrainReport,
    pub run_dir: PathBuf,
}

/// Load the configured dataset from `dataset_dir` or synthesize it.
pub fn load_or_generate_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    if let Some(dir) = &cfg.dataset_dir {
        let ds = data::read_dataset(dir)?;
        let (tr, te) = (
            ds.split_indices(Split::Train).len(),
            ds.split_indices(Split::Test).len(),
        );
        if tr != cfg.train_count || te != cfg.test_count {
            return Err(Error::Data(format!(
                "dataset at {} has {tr} train / {te} test scenes, config wants {} / {}",
                dir.display(),
                cfg.train_count,
                cfg.test_count
            )));
        }
        Ok(ds)
    } else {
        Ok(data::generate_dataset(
            cfg.data_seed,
            cfg.train_count,
            cfg.test_count,
            &cfg.scene_spec(),
        ))
    }
}

fn assemble_images(scenes: &[&LabeledScene]) -> Result<Tensor<f32>> {
    let size = scenes[0].image.shape()[1];
    let mut data = Vec::with_capacity(scenes.len() * 3 * size * size);
    for s in scenes {
        data.extend_from_slice(s.image.data());
    }
    Tensor::from_vec(&[scenes.len(), 3, size, size], data)
}

/// Selected (last-of-stage) feature shapes probed by a real forward pass.
fn probe_selected_shapes(det: &Detector<f32>, image_size: usize) -> Result<Vec<FeatShape>> {
    let mut tape = Tape::new();
    let img = tape.constant(Tensor::zeros(&[1, 3, image_size, image_size]));
    let pvars = det.add_params(&mut tape, false);
    let pass = det.forward_collect(&mut tape, &pvars, img)?;
    let feats: Vec<Tensor<f32>> = pass
        .features
        .iter()
        .map(|&f| tape.value(f).clone())
        .collect();
    let set = group_stages(feats)?;
    set.select_last().iter().map(|t| FeatShape::of(t)).collect()
}

/// Evaluate a detector on one dataset split.
pub fn evaluate(
    det: &Detector<f32>,
    dataset: &Dataset,
    split: Split,
    cfg: &ExperimentConfig,
) -> Result<EvalResult> {
    let ids = dataset.split_indices(split);
    let grid = AnchorGrid::build(det.spec());
    let mut dets: Vec<Vec<Detection>> = Vec::with_capacity(ids.len());
    let mut gts: Vec<Vec<crate::data::BoundingBox>> = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(cfg.batch_size.max(1)) {
        let scenes: Vec<&LabeledScene> = chunk.iter().map(|&i| &dataset.scenes[i]).collect();
        let mut tape = Tape::new();
        let imgs = tape.constant(assemble_images(&scenes)?);
        let pvars = det.add_params(&mut tape, false);
        let pass = det.forward_collect(&mut tape, &pvars, imgs)?;
        for (bi, &i) in chunk.iter().enumerate() {
            let d = infer_decode(
                tape.value(pass.cls_rows),
                tape.value(pass.loc_rows),
                bi,
                &grid,
                cfg.eval_score_thresh,
                cfg.eval_nms_iou,
            )?;
            dets.push(d);
            gts.push(dataset.scenes[i].boxes.clone());
        }
    }
    Ok(mean_ap(&dets, &gts, 0.5))
}

/// What a run trains.
enum Role<'a> {
    Teacher,
    Student { teacher: Option<&'a Detector<f32>> },
}

/// Train the teacher model on ground truth only.
pub fn train_teacher(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    run_name: &str,
) -> Result<TrainOutcome> {
    run_training(cfg, dataset, Role::Teacher, run_name)
}

/// Train the channel-halved student, optionally under a frozen teacher.
pub fn train_student(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    teacher: Option<&Detector<f32>>,
    run_name: &str,
) -> Result<TrainOutcome> {
    run_training(cfg, dataset, Role::Student { teacher }, run_name)
}

struct ImitationSetup {
    plan: MatchPlan,
    /// Indices into `plan.pairs` that receive imitation loss.
    chosen: Vec<usize>,
    bank: AdapterBank<f32>,
    /// Per train scene, per chosen pair: teacher feature [1,C,H,W].
    cache: Vec<Vec<Tensor<f32>>>,
    /// Map from global scene index to cache row.
    cache_row: Vec<Option<usize>>,
}

fn setup_imitation(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    teacher: &Detector<f32>,
    student: &Detector<f32>,
    run_dir: &Path,
    seed_adapters: u64,
) -> Result<Option<ImitationSetup>> {
    let s_shapes = probe_selected_shapes(student, cfg.image_size)?;
    let t_shapes = probe_selected_shapes(teacher, cfg.image_size)?;
    let plan = build_match_plan(&s_shapes, &t_shapes)?;
    if plan.pairs.is_empty() {
        return Err(Error::Config(
            "teacher and student share no matchable stages".into(),
        ));
    }
    let head_pairs: Vec<usize> = plan
        .pairs
        .iter()
        .enumerate()
        .filter(|(_, p)| student.spec().head_stages.contains(&p.stage))
        .map(|(i, _)| i)
        .collect();
    let chosen = cfg.stages.resolve(plan.pairs.len(), &head_pairs);
    export::write_text(&run_dir.join("match_plan.txt"), &format!("{plan}\nimitated pairs: {chosen:?}\n"))?;
    if chosen.is_empty() {
        return Ok(None);
    }

    // Adapters only for the pairs that will be trained.
    let sub_plan = MatchPlan {
        pairs: chosen.iter().map(|&i| plan.pairs[i]).collect(),
        dropped: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed_adapters);
    let bank = AdapterBank::init(&sub_plan, &mut rng);

    // Freeze the teacher's selected features for every train scene.
    let train_ids = dataset.split_indices(Split::Train);
    let mut cache_row = vec![None; dataset.scenes.len()];
    let mut cache: Vec<Vec<Tensor<f32>>> = Vec::with_capacity(train_ids.len());
    for chunk in train_ids.chunks(cfg.batch_size.max(1)) {
        let scenes: Vec<&LabeledScene> = chunk.iter().map(|&i| &dataset.scenes[i]).collect();
        let mut tape = Tape::new();
        let imgs = tape.constant(assemble_images(&scenes)?);
        let pvars = teacher.add_params(&mut tape, false);
        let pass = teacher.forward_collect(&mut tape, &pvars, imgs)?;
        for (bi, &i) in chunk.iter().enumerate() {
            cache_row[i] = Some(cache.len());
            let feats = chosen
                .iter()
                .map(|&k| {
                    let stage = plan.pairs[k].stage;
                    let var = pass.features[teacher.last_feature_index(stage)];
                    tape.value(var).select_batch(bi)
                })
                .collect::<Result<Vec<_>>>()?;
            cache.push(feats);
        }
    }
    Ok(Some(ImitationSetup {
        plan,
        chosen,
        bank,
        cache,
        cache_row,
    }))
}

fn run_training(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    role: Role<'_>,
    run_name: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let run_dir = cfg.out_dir.join(run_name);
    fs::create_dir_all(&run_dir)?;

    let seed_params = data::mix_seed(cfg.seed, 1);
    let seed_batches = data::mix_seed(cfg.seed, 2);
    let seed_adapters = data::mix_seed(cfg.seed, 3);

    let teacher_spec = cfg.teacher_spec();
    let (spec, teacher): (DetectorSpec, Option<&Detector<f32>>) = match &role {
        Role::Teacher => (teacher_spec.clone(), None),
        Role::Student { teacher } => {
            if let Some(t) = teacher {
                if t.spec().digest() != teacher_spec.digest() {
                    return Err(Error::Config(format!(
                        "teacher checkpoint spec ({}) differs from the configured teacher spec ({})",
                        t.spec().digest(),
                        teacher_spec.digest()
                    )));
                }
            }
            (teacher_spec.halved(), *teacher)
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed_params);
    let mut model = Detector::<f32>::new(spec, &mut rng)?;
    let teacher_digest_pre = teacher.map(|t| {
        verify_compression(t, &model).map(|_| t.params_digest())
    }).transpose()?;

    // Imitation setup decides whether this run is a distillation run at all;
    // that in turn sets the epoch count (distill runs get extra iterations).
    let mut setup = None;
    if let Some(t) = teacher {
        if cfg.lambda2 != Some(0.0) {
            setup = setup_imitation(cfg, dataset, t, &model, &run_dir, seed_adapters)?;
        }
    }
    let imitation_active = setup.is_some();
    let run_epochs = if imitation_active {
        ((cfg.epochs as f64) * cfg.distill_epoch_factor).round() as usize
    } else {
        cfg.epochs
    };
    let warmup = match cfg.warmup_epochs {
        Some(w) => w,
        None => {
            if imitation_active {
                (run_epochs / 10).max(1)
            } else {
                0
            }
        }
    };
    if warmup >= run_epochs {
        return Err(Error::Config(format!(
            "warmup_epochs {warmup} must be < epochs {run_epochs}"
        )));
    }
    let schedule = LrSchedule::resolve(cfg, run_epochs)?;

    // Fixed per-scene anchor targets.
    let grid = AnchorGrid::build(model.spec());
    let train_ids = dataset.split_indices(Split::Train);
    let targets: Vec<Vec<AnchorTarget>> = dataset
        .scenes
        .iter()
        .map(|s| assign_targets(&grid, &s.boxes))
        .collect();

    let weight_cfg = WeightConfig {
        macro_weight: cfg.macro_weight,
        micro_weight: cfg.micro_weight,
        gamma: cfg.gamma,
    };
    let plain_weights =
        cfg.macro_weight == MacroWeight::None && cfg.micro_weight == MicroWeight::None;

    let mut sgd = {
        let mut shapes: Vec<&[usize]> = model.params().iter().map(|p| p.value.shape()).collect();
        if let Some(s) = &setup {
            shapes.extend(s.bank.adapters.iter().map(|a| a.kernel.shape()));
        }
        Sgd::new(&shapes, 0.9)
    };

    let steps_path = run_dir.join("steps.jsonl");
    let mut steps_file = fs::File::create(&steps_path)?;
    let mut lambda2_resolved: Option<f64> = cfg.lambda2;
    let mut epochs_out: Vec<EpochRecord> = Vec::with_capacity(run_epochs);
    let mut step: u64 = 0;

    for epoch in 0..run_epochs {
        let lr = schedule.at(epoch);
        let mut order = train_ids.clone();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(data::mix_seed(seed_batches, epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let imitate_now = imitation_active && epoch >= warmup;
        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64); // c, l, i, total
        let mut batches = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let scenes: Vec<&LabeledScene> = chunk.iter().map(|&i| &dataset.scenes[i]).collect();
            let batch_targets: Vec<Vec<AnchorTarget>> =
                chunk.iter().map(|&i| targets[i].clone()).collect();

            let mut tape = Tape::new();
            let imgs = tape.constant(assemble_images(&scenes)?);
            let pvars = model.add_params(&mut tape, true);
            let avars: Vec<Var> = match &setup {
                Some(s) => s
                    .bank
                    .adapters
                    .iter()
                    .map(|a| tape.leaf(a.kernel.clone(), true))
                    .collect(),
                None => Vec::new(),
            };

            let pass = model.forward_collect(&mut tape, &pvars, imgs)?;
            let det = detection_loss(&mut tape, &pass, &batch_targets, grid.len())?;
            let l_c_val = tape.value(det.l_c).item() as f64;
            let l_l_val = tape.value(det.l_l).item() as f64;

            // Imitation branch.
            let mut l_i_var: Option<Var> = None;
            let mut stage_losses_raw: Vec<f64> = Vec::new();
            let mut stage_u_log: Vec<f64> = Vec::new();
            let mut skipped_log: Vec<usize> = Vec::new();
            if imitate_now {
                let s = setup.as_ref().expect("imitation setup");
                let b = scenes.len();
                // adapted student + frozen teacher per chosen pair
                let mut adapted_vars = Vec::new();
                let mut teacher_vars = Vec::new();
                for (ci, &k) in s.chosen.iter().enumerate() {
                    let pair: &PairPlan = &s.plan.pairs[k];
                    let raw = pass.features[model.last_feature_index(pair.stage)];
                    let mut adapted = tape.conv2d(raw, avars[ci], 1, 0)?;
                    if pair.resample {
                        adapted = tape.bilinear_resize(adapted, pair.teacher.h, pair.teacher.w)?;
                    }
                    let t_parts: Vec<&Tensor<f32>> = chunk
                        .iter()
                        .map(|&i| &s.cache[s.cache_row[i].expect("train scene cached")][ci])
                        .collect();
                    let t_batch = Tensor::concat_batch(&t_parts)?;
                    let t_var = tape.constant(t_batch);
                    adapted_vars.push(adapted);
                    teacher_vars.push(t_var);
                }

                // Raw per-stage losses (logging, focal input, Eq.3 view).
                let eps = cfg.epsilon as f32;
                for ci in 0..s.chosen.len() {
                    let (v, _) = stage_forward(
                        tape.value(adapted_vars[ci]),
                        tape.value(teacher_vars[ci]),
                        cfg.metric,
                        eps,
                        None,
                    )?;
                    stage_losses_raw.push(v as f64);
                }

                // Per-image weights, packed per stage.
                let weights: Vec<Option<StageWeights<f32>>> = if plain_weights {
                    vec![None; s.chosen.len()]
                } else {
                    let mut u_per_stage: Vec<Vec<f32>> = vec![Vec::with_capacity(b); s.chosen.len()];
                    let mut v_per_stage: Vec<Vec<Tensor<f32>>> =
                        vec![Vec::with_capacity(b); s.chosen.len()];
                    for (bi, &scene_id) in chunk.iter().enumerate() {
                        let mut pairs_n: Vec<MatchedPair<f32>> = Vec::with_capacity(s.chosen.len());
                        for (ci, &k) in s.chosen.iter().enumerate() {
                            let pair = &s.plan.pairs[k];
                            let raw = pass.features[model.last_feature_index(pair.stage)];
                            pairs_n.push(MatchedPair::new(
                                tape.value(adapted_vars[ci]).select_batch(bi)?,
                                tape.value(teacher_vars[ci]).select_batch(bi)?,
                                pair.stage,
                                tape.value(raw).select_batch(bi)?,
                            )?);
                        }
                        let stage_losses_n: Vec<f32> = if cfg.macro_weight == MacroWeight::Focal {
                            pairs_n
                                .iter()
                                .map(|p| {
                                    stage_forward(
                                        &p.student_adapted,
                                        &p.teacher,
                                        cfg.metric,
                                        eps,
                                        None,
                                    )
                                    .map(|(v, _)| v)
                                })
                                .collect::<Result<_>>()?
                        } else {
                            vec![0.0; pairs_n.len()]
                        };
                        let w = compose_weights(
                            &weight_cfg,
                            &pairs_n,
                            &stage_losses_n,
                            &dataset.scenes[scene_id].boxes,
                        )?;
                        for ci in 0..s.chosen.len() {
                            u_per_stage[ci].push(w.u[ci]);
                            v_per_stage[ci].push(w.v[ci].clone());
                        }
                    }
                    stage_u_log = u_per_stage
                        .iter()
                        .map(|us| us.iter().map(|&u| u as f64).sum::<f64>() / b as f64)
                        .collect();
                    u_per_stage
                        .into_iter()
                        .zip(v_per_stage)
                        .map(|(u, v)| {
                            let refs: Vec<&Tensor<f32>> = v.iter().collect();
                            Ok(Some(StageWeights {
                                u,
                                v: Tensor::concat_batch(&refs)?,
                            }))
                        })
                        .collect::<Result<_>>()?
                };

                if plain_weights {
                    stage_u_log = vec![1.0; s.chosen.len()];
                }
                // Per stage, how many images carry an all-zero weight map.
                skipped_log = weights
                    .iter()
                    .map(|w| match w {
                        None => 0,
                        Some(sw) => {
                            let (n, _, hh, ww) = sw.v.dims4().expect("weight shape");
                            let plane = hh * ww;
                            (0..n)
                                .filter(|&bi| {
                                    sw.v.data()[bi * plane..(bi + 1) * plane]
                                        .iter()
                                        .sum::<f32>()
                                        <= 0.0
                                })
                                .count()
                        }
                    })
                    .collect();

                if cfg.dump_weight_maps && batches == 0 {
                    if let Some(Some(w0)) = weights.first() {
                        let dir = run_dir.join("weights");
                        fs::create_dir_all(&dir)?;
                        export::write_weight_map_csv(
                            &dir.join(format!("epoch{epoch:03}_stage0.csv")),
                            &w0.v.select_batch(0)?,
                        )?;
                    }
                }

                let mut acc: Option<Var> = None;
                for (ci, w) in weights.into_iter().enumerate() {
                    let term = tape.imitation_stage(
                        adapted_vars[ci],
                        teacher_vars[ci],
                        cfg.metric,
                        eps,
                        w,
                    )?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, term)?,
                        None => term,
                    });
                }
                l_i_var = acc;
            }

            let l_i_val = l_i_var.map_or(0.0, |v| tape.value(v).item() as f64);
            if imitate_now && lambda2_resolved.is_none() {
                // One-time auto-scale: lambda2 * L_i ~ L_c + L_l at warmup end.
                let l2 = if l_i_val > 1e-12 {
                    (l_c_val + l_l_val) / l_i_val
                } else {
                    1.0
                };
                lambda2_resolved = Some(l2);
                println!("[{run_name}] lambda2 auto-scaled to {l2:.6}");
            }
            let lambda2_now = if imitate_now {
                lambda2_resolved.unwrap_or(0.0)
            } else {
                0.0
            };

            // Abort on non-finite components before composing the total.
            let total_val =
                imitation::total_loss(l_c_val, l_l_val, l_i_val, cfg.lambda1, lambda2_now)?;

            let mut total = {
                let scaled_l = tape.scale(det.l_l, cfg.lambda1 as f32);
                tape.add(det.l_c, scaled_l)?
            };
            if let Some(li) = l_i_var {
                let scaled_i = tape.scale(li, lambda2_now as f32);
                total = tape.add(total, scaled_i)?;
            }
            tape.backward(total)?;

            // Gradient step over model params then adapters, fixed order.
            {
                let grads: Vec<Option<&Tensor<f32>>> = pvars
                    .iter()
                    .chain(avars.iter())
                    .map(|&v| tape.grad(v))
                    .collect();
                let mut refs: Vec<&mut Tensor<f32>> = Vec::new();
                for p in model.params_mut() {
                    refs.push(&mut p.value);
                }
                if let Some(s) = setup.as_mut() {
                    for a in &mut s.bank.adapters {
                        refs.push(&mut a.kernel);
                    }
                }
                sgd.step(lr as f32, &mut refs, &grads);
            }

            let record = StageLossBreakdown {
                step,
                loss_cls: l_c_val,
                loss_loc: l_l_val,
                loss_imit: l_i_val,
                total: total_val,
                stage_losses: stage_losses_raw,
                stage_weights: stage_u_log.clone(),
                skipped_images: skipped_log.clone(),
                lambda1: cfg.lambda1,
                lambda2: lambda2_now,
            };
            serde_json::to_writer(&mut steps_file, &record)
                .map_err(|e| Error::Data(format!("step log: {e}")))?;
            steps_file.write_all(b"\n")?;

            sums.0 += l_c_val;
            sums.1 += l_l_val;
            sums.2 += l_i_val;
            sums.3 += total_val;
            batches += 1;
            step += 1;
        }

        let inv = 1.0 / batches.max(1) as f64;
        let eval = evaluate(&model, dataset, Split::Test, cfg)?;
        println!(
            "[{run_name}] epoch {:>3}/{run_epochs} lr {:.4} L_c {:.4} L_l {:.4} L_i {:.4} mAP {:.4}",
            epoch + 1,
            lr,
            sums.0 * inv,
            sums.1 * inv,
            sums.2 * inv,
            eval.map
        );
        epochs_out.push(EpochRecord {
            epoch,
            loss_cls: sums.0 * inv,
            loss_loc: sums.1 * inv,
            loss_imit: sums.2 * inv,
            loss_total: sums.3 * inv,
            lr,
            map: eval.map,
        });
    }

    // Frozen-teacher invariant.
    let teacher_digest_post = teacher.map(|t| t.params_digest());
    if teacher_digest_pre != teacher_digest_post {
        return Err(Error::Invariant(
            "teacher parameters changed during distillation".into(),
        ));
    }

    let ckpt = run_dir.join("model.hgd");
    model.save(&ckpt)?;
    let report = TrainReport {
        run: run_name.to_string(),
        config_hash: cfg.hash(),
        spec_digest: model.spec().digest(),
        lambda1: cfg.lambda1,
        lambda2: if imitation_active {
            lambda2_resolved.unwrap_or(0.0)
        } else {
            0.0
        },
        warmup_epochs: warmup,
        epochs: epochs_out,
        final_checkpoint: ckpt.display().to_string(),
        teacher_digest_pre,
        teacher_digest_post,
    };
    export::write_text(
        &run_dir.join("report.json"),
        &serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?,
    )?;
    Ok(TrainOutcome {
        detector: model,
        adapters: setup.map(|s| s.bank),
        report,
        run_dir,
    })
}

/// Stage-subset ablation: distill once per (subset, seed) with shared data.
pub struct AblationRow {
    pub subset: String,
    pub seed: u64,
    pub map: f64,
}

pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("subset,seed,map\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.subset, r.seed, r.map));
        }
        s
    }

    /// One column per subset, one row per seed, plus the mean.
    pub fn pivot(&self) -> String {
        let mut subsets: Vec<String> = Vec::new();
        for r in &self.rows {
            if !subsets.contains(&r.subset) {
                subsets.push(r.subset.clone());
            }
        }
        let mut seeds: Vec<u64> = Vec::new();
        for r in &self.rows {
            if !seeds.contains(&r.seed) {
                seeds.push(r.seed);
            }
        }
        let cell = |subset: &str, seed: u64| {
            self.rows
                .iter()
                .find(|r| r.subset == subset && r.seed == seed)
                .map_or(String::from("-"), |r| format!("{:.4}", r.map))
        };
        let mut out = String::from("seed");
        for s in &subsets {
            out.push_str(&format!(",{s}"));
        }
        out.push('\n');
        for &seed in &seeds {
            out.push_str(&seed.to_string());
            for s in &subsets {
                out.push(',');
                out.push_str(&cell(s, seed));
            }
            out.push('\n');
        }
        out.push_str("mean");
        for s in &subsets {
            let vals: Vec<f64> = self
                .rows
                .iter()
                .filter(|r| &r.subset == s)
                .map(|r| r.map)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
            out.push_str(&format!(",{mean:.4}"));
        }
        out.push('\n');
        out
    }
}

pub fn ablate_stages(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    teacher: &Detector<f32>,
    subsets: &[StageSubset],
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for subset in subsets {
        for &seed in &cfg.seeds {
            let run_name = format!("ablate/{subset}/seed{seed}");
            let run_dir = cfg.out_dir.join(&run_name);
            if run_dir.join("report.json").exists() {
                return Err(Error::Config(format!(
                    "refusing to overwrite existing run at {}",
                    run_dir.display()
                )));
            }
            let mut run_cfg = cfg.clone();
            run_cfg.stages = subset.clone();
            run_cfg.seed = seed;
            let outcome = train_student(&run_cfg, dataset, Some(teacher), &run_name)?;
            let map = outcome.report.epochs.last().map_or(0.0, |e| e.map);
            rows.push(AblationRow {
                subset: subset.to_string(),
                seed,
                map,
            });
        }
    }
    let table = AblationTable { rows };
    export::write_text(&cfg.out_dir.join("ablation.csv"), &table.to_csv())?;
    export::write_text(&cfg.out_dir.join("ablation_pivot.csv"), &table.pivot())?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.train_count = 12;
        cfg.test_count = 6;
        cfg.epochs = 2;
        cfg.batch_size = 4;
        cfg.teacher_widths = vec![16, 32];
        cfg.head_stages = vec![1];
        cfg.anchor_scales = vec![2.4];
        cfg.image_size = 32;
        cfg.out_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn lr_schedule_steps_at_milestones() {
        let mut cfg = ExperimentConfig::default();
        cfg.lr = 0.1;
        cfg.lr_decay_factor = 0.1;
        cfg.lr_milestones = Some(vec![2, 4]);
        let s = LrSchedule::resolve(&cfg, 6).unwrap();
        assert_eq!(s.at(0), 0.1);
        assert!((s.at(2) - 0.01).abs() < 1e-12);
        assert!((s.at(5) - 0.001).abs() < 1e-12);
        cfg.lr_milestones = Some(vec![4, 2]);
        assert!(LrSchedule::resolve(&cfg, 6).is_err());
        cfg.lr_milestones = Some(vec![7]);
        assert!(LrSchedule::resolve(&cfg, 6).is_err());
    }

    #[test]
    fn teacher_run_is_deterministic_and_reports_epochs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let data = load_or_generate_data(&cfg).unwrap();
        let a = train_teacher(&cfg, &data, "t1").unwrap();
        let b = train_teacher(&cfg, &data, "t2").unwrap();
        assert_eq!(a.detector.params_digest(), b.detector.params_digest());
        assert_eq!(a.report.epochs.len(), cfg.epochs);
        assert_eq!(a.report.config_hash, cfg.hash());
        let ja = serde_json::to_string(&a.report.epochs).unwrap();
        let jb = serde_json::to_string(&b.report.epochs).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn distill_with_zero_lambda_matches_baseline_losses() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        let data = load_or_generate_data(&cfg).unwrap();
        let teacher = train_teacher(&cfg, &data, "teacher").unwrap();

        let baseline = train_student(&cfg, &data, None, "baseline").unwrap();
        cfg.lambda2 = Some(0.0);
        let degenerate = train_student(&cfg, &data, Some(&teacher.detector), "zl").unwrap();
        assert_eq!(
            baseline.detector.params_digest(),
            degenerate.detector.params_digest(),
            "lambda2=0 distillation must replay the baseline trajectory"
        );
        for (a, b) in baseline.report.epochs.iter().zip(&degenerate.report.epochs) {
            assert_eq!(a.loss_cls, b.loss_cls);
            assert_eq!(a.loss_loc, b.loss_loc);
        }
    }

    #[test]
    fn distill_keeps_teacher_frozen_and_warmup_contributes_zero() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.epochs = 2;
        cfg.warmup_epochs = Some(1);
        cfg.distill_epoch_factor = 1.0;
        let data = load_or_generate_data(&cfg).unwrap();
        let teacher = train_teacher(&cfg, &data, "teacher").unwrap();
        let pre = teacher.detector.params_digest();
        let out = train_student(&cfg, &data, Some(&teacher.detector), "distill").unwrap();
        assert_eq!(teacher.detector.params_digest(), pre);
        assert_eq!(out.report.teacher_digest_pre, Some(pre.clone()));
        assert_eq!(out.report.teacher_digest_post, Some(pre));
        // Warmup epoch logs zero imitation contribution.
        assert_eq!(out.report.epochs[0].loss_imit, 0.0);
        assert!(out.adapters.is_some());
    }
}
