//! Subcommand implementations: dataset assembly, training runs, evaluation,
//! attribution, quantification, previews, and sweeps.

use crate::config::{ExperimentConfig, RunManifest};
use crate::plots;
use dtkd_core::attribution::{
    attribute, contribution_ratios, grid_partition, mean_image, quantify_fg_bg, FgBgSums,
};
use dtkd_core::data::{
    apply_corruption, apply_label_noise, load_cifar10_binary, load_coco_mask, load_idx,
    resize_bilinear, subset_training_fraction, synthetic_dataset, write_ppm, CorruptionKind,
    CorruptionSpec, ImageDataset, Split,
};
use dtkd_core::losses::DistillationConfig;
use dtkd_core::metrics::{confusion_matrix, metrics_from_cm, tp_change_table, wilcoxon_signed_rank_exact, ConfusionMatrix, MetricsReport};
use dtkd_core::nn::{build_student_for, build_teacher_for, Model};
use dtkd_core::rng::SplitMix64;
use dtkd_core::train::{accuracy, predict, train_tl, train_tl_kd, TrainingHistory};
use dtkd_core::{Error, Result, Tensor};
use rayon::prelude::*;
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// dataset assembly

fn resize_all(ds: ImageDataset, side: usize) -> ImageDataset {
    if ds.images.is_empty() || ds.images[0].shape[1] == side {
        return ds;
    }
    ImageDataset {
        images: ds
            .images
            .iter()
            .map(|img| resize_bilinear(img, side, side))
            .collect(),
        ..ds
    }
}

fn concat(mut a: ImageDataset, b: ImageDataset) -> ImageDataset {
    a.images.extend(b.images);
    a.labels.extend(b.labels);
    a
}

/// Loads the full labeled set for one split, resized to the configured side.
pub fn load_full(cfg: &ExperimentConfig, split: Split) -> Result<ImageDataset> {
    let ds = match cfg.dataset.as_str() {
        "synthetic" => {
            let per_class = match split {
                Split::Train => cfg.per_class_train,
                Split::Val => cfg.per_class_val,
            };
            synthetic_dataset(cfg.num_classes, per_class, cfg.image_side, cfg.data_seed, split)
        }
        "cifar10" => {
            let dir = cfg.data_dir.as_ref().unwrap();
            match split {
                Split::Train => {
                    let mut ds = load_cifar10_binary(&dir.join("data_batch_1.bin"))?;
                    for i in 2..=5 {
                        let path = dir.join(format!("data_batch_{i}.bin"));
                        if path.exists() {
                            ds = concat(ds, load_cifar10_binary(&path)?);
                        }
                    }
                    ds
                }
                Split::Val => {
                    let mut ds = load_cifar10_binary(&dir.join("test_batch.bin"))?;
                    ds.split = Split::Val;
                    ds
                }
            }
        }
        "idx" => {
            let dir = cfg.data_dir.as_ref().unwrap();
            let (imgs, labs) = match split {
                Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
                Split::Val => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
            };
            let mut ds = load_idx(&dir.join(imgs), &dir.join(labs))?;
            ds.split = split;
            ds
        }
        other => return Err(Error::Config(format!("unknown dataset {other:?}"))),
    };
    Ok(resize_all(ds, cfg.image_side))
}

/// One class group of a split, labels remapped to 0..n.
pub fn load_group(cfg: &ExperimentConfig, split: Split, classes: &[usize]) -> Result<ImageDataset> {
    let ds = load_full(cfg, split)?.take_classes(classes);
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(ds)
}

/// Target-group training set with the configured subsetting, label noise,
/// and image corruption applied (in that order).
pub fn transformed_target_train(cfg: &ExperimentConfig) -> Result<ImageDataset> {
    let mut ds = load_group(cfg, Split::Train, &cfg.target_classes)?;
    if cfg.train_fraction < 1.0 {
        ds = subset_training_fraction(&ds, cfg.train_fraction, cfg.corruption_seed)?;
    }
    if cfg.label_noise_fraction > 0.0 {
        ds = apply_label_noise(&ds, cfg.label_noise_fraction, cfg.corruption_seed)?;
    }
    if cfg.corruption != "none" && cfg.image_noise_train_fraction > 0.0 {
        let spec = CorruptionSpec {
            kind: corruption_kind(&cfg.corruption)?,
            apply_fraction: cfg.image_noise_train_fraction,
            side_range: (cfg.center_min, cfg.center_max),
            seed: cfg.corruption_seed,
        };
        ds = apply_corruption(&ds, &spec)?;
    }
    Ok(ds)
}

pub fn corruption_kind(name: &str) -> Result<CorruptionKind> {
    match name {
        "center_black" => Ok(CorruptionKind::CenterBlack),
        "quarter_black" => Ok(CorruptionKind::QuarterBlack),
        other => Err(Error::Config(format!("unknown corruption {other:?}"))),
    }
}

// ---------------------------------------------------------------------------
// model helpers

pub fn build_model(arch: &str, side: usize, num_classes: usize, seed: u64) -> Result<Model> {
    match arch {
        "student" => Ok(build_student_for(side, num_classes, seed)),
        "teacher" => Ok(build_teacher_for(side, num_classes, seed)),
        other => Err(Error::Config(format!("unknown arch {other:?}"))),
    }
}

/// Loads a checkpoint into the named architecture; with arch "auto" it
/// tries the student shape first, then the teacher.
pub fn load_model(arch: &str, side: usize, num_classes: usize, path: &Path) -> Result<Model> {
    let candidates: Vec<&str> = match arch {
        "auto" => vec!["student", "teacher"],
        other => vec![other],
    };
    let mut last_err = None;
    for cand in candidates {
        let mut m = build_model(cand, side, num_classes, 0)?;
        match m.load_from(path) {
            Ok(()) => return Ok(m),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap())
}

// ---------------------------------------------------------------------------
// per-seed outputs

#[derive(Serialize)]
struct SeedMetrics {
    seed: u64,
    epochs_trained: usize,
    best_val_acc: f64,
    final_val_acc: f64,
    report: MetricsReport,
}

fn write_seed_outputs(
    dir: &Path,
    seed: u64,
    model: &Model,
    history: &TrainingHistory,
    val: &ImageDataset,
    batch_size: usize,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("history.csv"), history.to_csv())?;
    model.save(&dir.join("best.dtkd"))?;
    let preds = predict(model, val, batch_size)?;
    let cm = confusion_matrix(&val.labels, &preds, val.num_classes())?;
    let report = metrics_from_cm(&cm)?;
    let metrics = SeedMetrics {
        seed,
        epochs_trained: history.epochs.len(),
        best_val_acc: history.best_val_acc(),
        final_val_acc: accuracy(model, val, batch_size)?,
        report,
    };
    fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(&metrics)? + "\n",
    )?;
    fs::write(dir.join("confusion.csv"), cm.to_csv(&val.class_names))?;
    Ok(())
}

fn write_manifest(run_dir: &Path, manifest: &RunManifest) -> Result<()> {
    fs::create_dir_all(run_dir)?;
    fs::write(
        run_dir.join("manifest.json"),
        serde_json::to_string_pretty(manifest)? + "\n",
    )?;
    Ok(())
}

fn seeds_to_run(cfg: &ExperimentConfig, only: Option<u64>) -> Vec<u64> {
    match only {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    }
}

// ---------------------------------------------------------------------------
// subcommands

pub fn pretrain(
    cfg: &ExperimentConfig,
    arch: &str,
    only_seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<PathBuf> {
    let train = load_group(cfg, Split::Train, &cfg.source_classes)?;
    let val = load_group(cfg, Split::Val, &cfg.source_classes)?;
    let out_dir = out.unwrap_or_else(|| cfg.out_dir.clone());
    let run_dir = out_dir.join(format!("{}-pretrain-{arch}", cfg.run_name));
    let seeds = seeds_to_run(cfg, only_seed);
    for &seed in &seeds {
        let mut model = build_model(arch, cfg.image_side, cfg.source_classes.len(), seed)?;
        let history = train_tl(&mut model, &train, &val, &cfg.training(seed))?;
        write_seed_outputs(&run_dir.join(seed.to_string()), seed, &model, &history, &val, cfg.batch_size)?;
    }
    let manifest = RunManifest::new(
        "pretrain",
        cfg,
        vec![("arch".into(), arch.into())],
        seeds.iter().map(|s| s.to_string()).collect(),
    );
    write_manifest(&run_dir, &manifest)?;
    Ok(run_dir)
}

pub struct FinetuneArgs {
    pub arch: String,
    pub init: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
    pub teacher_arch: String,
    pub only_seed: Option<u64>,
    pub out: Option<PathBuf>,
}

pub fn finetune(cfg: &ExperimentConfig, args: &FinetuneArgs) -> Result<PathBuf> {
    let train = transformed_target_train(cfg)?;
    let val = load_group(cfg, Split::Val, &cfg.target_classes)?;
    let k = cfg.target_classes.len();
    let out_dir = args.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    let run_dir = out_dir.join(&cfg.run_name);
    let teacher = match &args.teacher {
        Some(path) => Some(load_model(&args.teacher_arch, cfg.image_side, k, path)?),
        None => None,
    };
    let seeds = seeds_to_run(cfg, args.only_seed);
    for &seed in &seeds {
        let mut student = match &args.init {
            Some(path) => {
                // pretrained checkpoint carries the source-group head
                let mut m = load_model(&args.arch, cfg.image_side, cfg.source_classes.len(), path)?;
                m.replace_head(k, seed);
                m.freeze_backbone();
                m
            }
            None => build_model(&args.arch, cfg.image_side, k, seed)?,
        };
        let tcfg = cfg.training(seed);
        let history = match &teacher {
            Some(t) => {
                let dcfg = DistillationConfig::new(cfg.temperature, cfg.alpha)?;
                train_tl_kd(&mut student, t, &train, &val, &tcfg, &dcfg)?
            }
            None => train_tl(&mut student, &train, &val, &tcfg)?,
        };
        write_seed_outputs(&run_dir.join(seed.to_string()), seed, &student, &history, &val, cfg.batch_size)?;
    }
    let mut overrides = vec![("arch".into(), args.arch.clone())];
    if let Some(t) = &args.teacher {
        overrides.push(("teacher".into(), t.display().to_string()));
    }
    if let Some(i) = &args.init {
        overrides.push(("init".into(), i.display().to_string()));
    }
    let manifest = RunManifest::new(
        "finetune",
        cfg,
        overrides,
        seeds.iter().map(|s| s.to_string()).collect(),
    );
    write_manifest(&run_dir, &manifest)?;
    Ok(run_dir)
}

#[derive(Serialize)]
struct EvaluatePair {
    seed: u64,
    metrics_a: MetricsReport,
    metrics_b: MetricsReport,
}

pub fn evaluate(
    cfg: &ExperimentConfig,
    run_a: &Path,
    run_b: &Path,
    out: Option<PathBuf>,
) -> Result<PathBuf> {
    let val = load_group(cfg, Split::Val, &cfg.target_classes)?;
    let k = cfg.target_classes.len();
    let out_dir = out.unwrap_or_else(|| cfg.out_dir.clone());
    let eval_dir = out_dir.join(format!("{}-eval", cfg.run_name));
    let mut any = false;
    for &seed in &cfg.seeds {
        let ckpt_a = run_a.join(seed.to_string()).join("best.dtkd");
        let ckpt_b = run_b.join(seed.to_string()).join("best.dtkd");
        if !ckpt_a.exists() || !ckpt_b.exists() {
            continue;
        }
        any = true;
        let model_a = load_model("auto", cfg.image_side, k, &ckpt_a)?;
        let model_b = load_model("auto", cfg.image_side, k, &ckpt_b)?;
        let cm_a = cm_for(&model_a, &val, cfg.batch_size)?;
        let cm_b = cm_for(&model_b, &val, cfg.batch_size)?;
        let per_class_n = cm_a.total() / k as u64;
        let table = tp_change_table(&cm_a, &cm_b, &val.class_names, per_class_n)?;
        let dir = eval_dir.join(seed.to_string());
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("confusion_a.csv"), cm_a.to_csv(&val.class_names))?;
        fs::write(dir.join("confusion_b.csv"), cm_b.to_csv(&val.class_names))?;
        fs::write(dir.join("tp_change.csv"), table.to_csv())?;
        let pair = EvaluatePair {
            seed,
            metrics_a: metrics_from_cm(&cm_a)?,
            metrics_b: metrics_from_cm(&cm_b)?,
        };
        fs::write(
            dir.join("metrics.json"),
            serde_json::to_string_pretty(&pair)? + "\n",
        )?;
    }
    if !any {
        return Err(Error::EmptyResult(
            "no seed directory present in both runs".into(),
        ));
    }
    Ok(eval_dir)
}

fn cm_for(model: &Model, val: &ImageDataset, batch: usize) -> Result<ConfusionMatrix> {
    let preds = predict(model, val, batch)?;
    confusion_matrix(&val.labels, &preds, val.num_classes())
}

pub fn parse_grid(grid: &str) -> Result<(usize, usize)> {
    let (r, c) = grid
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Config(format!("grid {grid:?} is not RxC")))?;
    Ok((
        r.parse()
            .map_err(|_| Error::Config(format!("bad grid rows {r:?}")))?,
        c.parse()
            .map_err(|_| Error::Config(format!("bad grid cols {c:?}")))?,
    ))
}

pub fn attribute_cmd(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    arch: &str,
    sample: usize,
    grid: &str,
    background: &str,
    out: Option<PathBuf>,
) -> Result<PathBuf> {
    let val = load_group(cfg, Split::Val, &cfg.target_classes)?;
    if sample >= val.len() {
        return Err(Error::IndexOutOfRange {
            what: "sample",
            index: sample,
            size: val.len(),
        });
    }
    let k = cfg.target_classes.len();
    let model = load_model(arch, cfg.image_side, k, checkpoint)?;
    let (rows, cols) = parse_grid(grid)?;
    let part = grid_partition(cfg.image_side, cfg.image_side, rows, cols)?;
    let bg = background_image(&val, background)?;
    let report = attribute(&model, &val.images[sample], &bg, &part)?;
    let out_dir = out.unwrap_or_else(|| cfg.out_dir.clone());
    let dir = out_dir.join(format!("{}-attribute", cfg.run_name));
    fs::create_dir_all(&dir)?;
    fs::write(
        dir.join(format!("attribution_{sample}.json")),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    write_ppm(&val.images[sample], &dir.join(format!("sample_{sample}.ppm")))?;
    Ok(dir)
}

pub fn background_image(val: &ImageDataset, kind: &str) -> Result<Tensor> {
    match kind {
        "mean" => mean_image(&val.images),
        "zeros" => Ok(Tensor::zeros(val.images[0].shape.clone())),
        other => Err(Error::Config(format!("unknown background {other:?}"))),
    }
}

#[derive(Serialize)]
struct QuantifyOut {
    samples: usize,
    wilcoxon_fg_p: f64,
    wilcoxon_bg_p: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn quantify(
    cfg: &ExperimentConfig,
    ckpt_a: &Path,
    ckpt_b: &Path,
    mask_path: &Path,
    image_id: u64,
    samples: usize,
    grid: &str,
    out: Option<PathBuf>,
) -> Result<PathBuf> {
    let val = load_group(cfg, Split::Val, &cfg.target_classes)?;
    let n = samples.min(val.len());
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let k = cfg.target_classes.len();
    let model_a = load_model("auto", cfg.image_side, k, ckpt_a)?;
    let model_b = load_model("auto", cfg.image_side, k, ckpt_b)?;
    let mask = load_coco_mask(mask_path, image_id, cfg.image_side, cfg.image_side)?;
    let (rows, cols) = parse_grid(grid)?;
    let part = grid_partition(cfg.image_side, cfg.image_side, rows, cols)?;
    let bg = background_image(&val, "mean")?;

    let mut csv = String::from(
        "sample,fg_pos_a,fg_neg_a,fg_diff_a,bg_pos_a,bg_neg_a,bg_diff_a,\
         fg_pos_b,fg_neg_b,fg_diff_b,bg_pos_b,bg_neg_b,bg_diff_b,\
         fg_ratio,bg_ratio,combined\n",
    );
    let mut fg_a = Vec::new();
    let mut fg_b = Vec::new();
    let mut bg_a = Vec::new();
    let mut bg_b = Vec::new();
    let pairs: Vec<(FgBgSums, FgBgSums)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ra = attribute(&model_a, &val.images[i], &bg, &part)?;
            let rb = attribute(&model_b, &val.images[i], &bg, &part)?;
            Ok((
                quantify_fg_bg(&ra.pixel_map, &mask)?,
                quantify_fg_bg(&rb.pixel_map, &mask)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    for (i, (sa, sb)) in pairs.iter().enumerate() {
        let r = contribution_ratios(sa, sb);
        let fmt = |o: Option<f64>| o.map(|v| format!("{v:.6}")).unwrap_or_else(|| "N/A".into());
        csv.push_str(&format!(
            "{i},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            sa.foreground.positive, sa.foreground.negative, sa.foreground.diff,
            sa.background.positive, sa.background.negative, sa.background.diff,
            sb.foreground.positive, sb.foreground.negative, sb.foreground.diff,
            sb.background.positive, sb.background.negative, sb.background.diff,
            fmt(r.fg_ratio), fmt(r.bg_ratio), fmt(r.combined),
        ));
        fg_a.push(sa.foreground.diff);
        fg_b.push(sb.foreground.diff);
        bg_a.push(sa.background.diff);
        bg_b.push(sb.background.diff);
    }
    let out_dir = out.unwrap_or_else(|| cfg.out_dir.clone());
    let dir = out_dir.join(format!("{}-quantify", cfg.run_name));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("fgbg.csv"), csv)?;
    let wq = QuantifyOut {
        samples: n,
        wilcoxon_fg_p: wilcoxon_signed_rank_exact(&fg_a, &fg_b)?.p_value,
        wilcoxon_bg_p: wilcoxon_signed_rank_exact(&bg_a, &bg_b)?.p_value,
    };
    fs::write(
        dir.join("quantify.json"),
        serde_json::to_string_pretty(&wq)? + "\n",
    )?;
    Ok(dir)
}

pub fn corrupt_preview(
    cfg: &ExperimentConfig,
    corruption: &str,
    count: usize,
    out: Option<PathBuf>,
) -> Result<PathBuf> {
    let kind = corruption_kind(corruption)?;
    let train = load_group(cfg, Split::Train, &cfg.target_classes)?;
    let out_dir = out.unwrap_or_else(|| cfg.out_dir.clone());
    let dir = out_dir.join(format!("{}-preview", cfg.run_name));
    fs::create_dir_all(&dir)?;
    for i in 0..count.min(train.len()) {
        let img = &train.images[i];
        let mut rng = SplitMix64::stream(cfg.corruption_seed, i as u64, 99);
        let corrupted = match kind {
            CorruptionKind::CenterBlack => {
                dtkd_core::data::center_black(img, cfg.center_min, cfg.center_max, &mut rng)?
            }
            CorruptionKind::QuarterBlack => dtkd_core::data::quarter_black(img, &mut rng)?,
            CorruptionKind::LabelNoise => {
                return Err(Error::Config("label noise has no image preview".into()))
            }
        };
        write_ppm(img, &dir.join(format!("{i}_before.ppm")))?;
        write_ppm(&corrupted, &dir.join(format!("{i}_after.ppm")))?;
    }
    Ok(dir)
}

pub fn gradcheck(configs: usize, seed: u64) -> Result<String> {
    let report = dtkd_core::gradcheck::gradient_check_suite(configs, seed)?;
    let json = serde_json::to_string_pretty(&report)?;
    if !report.passed(1e-4) {
        return Err(Error::Domain(format!(
            "gradient check failed: max relative error {}",
            report.max_rel_err
        )));
    }
    Ok(json)
}

fn set_param(cfg: &mut ExperimentConfig, param: &str, value: f64) -> Result<()> {
    match param {
        "train_fraction" => cfg.train_fraction = value,
        "label_noise_fraction" => cfg.label_noise_fraction = value,
        "image_noise_train_fraction" => cfg.image_noise_train_fraction = value,
        other => return Err(Error::Config(format!("unknown sweep param {other:?}"))),
    }
    Ok(())
}

/// Grid over one fraction parameter x all seeds; each point trains a TL
/// student and a TL+KD student against a per-seed teacher and records the
/// final validation accuracies.
pub fn sweep(
    cfg: &ExperimentConfig,
    param: &str,
    values: &[f64],
    teacher_ckpt: Option<&Path>,
    out: Option<PathBuf>,
) -> Result<PathBuf> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let k = cfg.target_classes.len();
    let val = load_group(cfg, Split::Val, &cfg.target_classes)?;
    // one teacher per seed, trained on the clean target split unless a
    // checkpoint is supplied
    let teachers: Vec<Model> = cfg
        .seeds
        .par_iter()
        .map(|&seed| match teacher_ckpt {
            Some(path) => load_model("teacher", cfg.image_side, k, path),
            None => {
                let clean = load_group(cfg, Split::Train, &cfg.target_classes)?;
                let mut t = build_teacher_for(cfg.image_side, k, seed);
                train_tl(&mut t, &clean, &val, &cfg.training(seed))?;
                Ok(t)
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let grid: Vec<(f64, usize)> = values
        .iter()
        .flat_map(|&v| (0..cfg.seeds.len()).map(move |si| (v, si)))
        .collect();
    let rows: Vec<(f64, u64, f64, f64)> = grid
        .par_iter()
        .map(|&(value, si)| {
            let seed = cfg.seeds[si];
            let mut point_cfg = cfg.clone();
            set_param(&mut point_cfg, param, value)?;
            let train = transformed_target_train(&point_cfg)?;
            let tcfg = point_cfg.training(seed);
            let mut tl_student = build_student_for(cfg.image_side, k, seed);
            let tl_hist = train_tl(&mut tl_student, &train, &val, &tcfg)?;
            let mut kd_student = build_student_for(cfg.image_side, k, seed);
            let dcfg = DistillationConfig::new(cfg.temperature, cfg.alpha)?;
            let kd_hist = train_tl_kd(&mut kd_student, &teachers[si], &train, &val, &tcfg, &dcfg)?;
            Ok((value, seed, tl_hist.best_val_acc(), kd_hist.best_val_acc()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut csv = String::from("param,value,seed,tl_acc,kd_acc,improvement\n");
    for (value, seed, tl, kd) in &rows {
        csv.push_str(&format!(
            "{param},{value},{seed},{tl:.6},{kd:.6},{:.6}\n",
            kd - tl
        ));
    }
    let out_dir = out.unwrap_or_else(|| cfg.out_dir.clone());
    let dir = out_dir.join(format!("{}-sweep-{param}", cfg.run_name));
    fs::create_dir_all(&dir)?;
    let csv_path = dir.join("sweep.csv");
    fs::write(&csv_path, csv)?;
    let (acc_svg, delta_svg) = plots::sweep_plots(&csv_path, param)?;
    fs::write(dir.join("accuracy.svg"), acc_svg)?;
    fs::write(dir.join("improvement.svg"), delta_svg)?;
    Ok(dir)
}
