//! The four pipeline stages: synth → inject → train → eval.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use casc_core::io::{encode_mask_png, encode_rgb_png};
use casc_core::metrics::{label_accuracy, wilcoxon_signed_rank, Wilcoxon};
use casc_core::model::ModelState;
use casc_core::noisegen::inject::corrupt_label;
use casc_core::noisegen::synth::synth_dataset;
use casc_core::noisegen::StainMatrix;
use casc_core::rng::{self, Stream};
use casc_core::trainer::{self, mean_std, split_slides, EvalRow, Split, SplitPlan};
use casc_core::Error as CoreError;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::dataset::{
    atomic_write, csv_bytes, csv_reader, load_lenient, load_strict, non_empty_dir, read_manifest, LabelSource,
    ManifestRow, IMAGES, MANIFEST, MANIFEST_COLUMNS, MASKS_CLEAN, MASKS_NOISY,
};

pub const NOISE_REPORT: &str = "noise_report.csv";
pub const LABEL_ACCURACY: &str = "label_accuracy.csv";
pub const CHECKPOINT: &str = "checkpoint.casc";
pub const HISTORY: &str = "history.csv";
pub const SPLIT_FILE: &str = "split.csv";
pub const METRICS: &str = "metrics.csv";
pub const COMPARE: &str = "compare.csv";

pub const HISTORY_COLUMNS: [&str; 6] = [
    "epoch",
    "train_loss",
    "dice_term",
    "bce_term",
    "contrastive_term",
    "val_mean_dice",
];
pub const METRICS_COLUMNS: [&str; 11] = [
    "image_id",
    "class",
    "dice",
    "f1",
    "fp_iou",
    "fn_iou",
    "split",
    "tp_dice",
    "tp_f1",
    "fp_iou_win",
    "fn_iou_win",
];

fn num(v: f64) -> String {
    format!("{v:.6}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub patches: usize,
    pub split_counts: [usize; 3],
}

pub fn synth(cfg: &RunConfig, force: bool) -> Result<SynthSummary> {
    let dir = &cfg.data_dir;
    if non_empty_dir(dir)? {
        if !force {
            bail!("{} is not empty; pass --force to overwrite", dir.display());
        }
        for sub in [IMAGES, MASKS_CLEAN, MASKS_NOISY] {
            let p = dir.join(sub);
            if p.exists() {
                fs::remove_dir_all(&p).with_context(|| format!("removing {}", p.display()))?;
            }
        }
        for f in [MANIFEST, NOISE_REPORT, LABEL_ACCURACY] {
            let p = dir.join(f);
            if p.exists() {
                fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
            }
        }
    }
    let ds = synth_dataset(&cfg.experiment.synth_params())?;
    let classes = &cfg.experiment.classes;
    let mut rows = Vec::with_capacity(ds.patches.len());
    for p in &ds.patches {
        let image_path = format!("{IMAGES}/{}.png", p.id);
        let mask_path = format!("{MASKS_CLEAN}/{}.png", p.id);
        atomic_write(&dir.join(&image_path), &encode_rgb_png(&p.image)?)?;
        atomic_write(&dir.join(&mask_path), &encode_mask_png(&p.clean)?)?;
        rows.push([p.slide_id.clone(), image_path, mask_path, classes[p.class_index].clone()]);
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    atomic_write(&dir.join(MANIFEST), &csv_bytes(&cfg.header("synth"), &MANIFEST_COLUMNS, rows)?)?;
    let mut split_counts = [0; 3];
    for p in &ds.patches {
        split_counts[p.split as usize] += 1;
    }
    Ok(SynthSummary {
        patches: ds.patches.len(),
        split_counts,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAccuracy {
    pub class: String,
    pub n: usize,
    pub dice: (f64, f64),
    pub f1: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectSummary {
    pub added: usize,
    pub removed: usize,
    pub empty_labels: usize,
    pub accuracy: Vec<ClassAccuracy>,
}

pub fn inject(cfg: &RunConfig) -> Result<InjectSummary> {
    let dir = &cfg.data_dir;
    let rows = read_manifest(dir)?;
    let classes = &cfg.experiment.classes;
    let samples = load_strict(dir, &rows, classes, LabelSource::Clean)?;
    let recipe = cfg.experiment.noise_recipe();
    let stains = StainMatrix::default();
    let results: Vec<_> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let noisy = corrupt_label(&s.image, &s.clean, &recipe, &stains, i as u64)?;
            let acc = label_accuracy(&noisy.mask, &s.clean)?;
            Ok((noisy, acc))
        })
        .collect::<Result<Vec<_>, CoreError>>()?;

    let mut report = Vec::new();
    let (mut added, mut removed, mut empty_labels) = (0, 0, 0);
    let mut per_class: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for ((row, s), (noisy, acc)) in rows.iter().zip(&samples).zip(&results) {
        atomic_write(&row.noisy_path(dir), &encode_mask_png(&noisy.mask)?)?;
        if noisy.empty_label {
            empty_labels += 1;
            eprintln!("warning: {} has no annotations; no false positives injected", s.id);
        }
        for e in &noisy.events {
            match e.action {
                casc_core::noisegen::NoiseAction::Add => added += 1,
                casc_core::noisegen::NoiseAction::Remove => removed += 1,
            }
            report.push([
                s.id.clone(),
                e.contour_index.to_string(),
                e.action.to_string(),
                e.area.to_string(),
                num(e.centroid.0),
                num(e.centroid.1),
            ]);
        }
        per_class.entry(s.class_index).or_default().push(*acc);
    }
    let header = cfg.header("inject");
    atomic_write(
        &dir.join(NOISE_REPORT),
        &csv_bytes(
            &header,
            &["image_id", "contour_index", "action", "area", "centroid_x", "centroid_y"],
            report,
        )?,
    )?;

    let mut accuracy = Vec::new();
    let summarize = |class: String, vals: &[(f64, f64)]| {
        let d: Vec<f64> = vals.iter().map(|v| v.0).collect();
        let f: Vec<f64> = vals.iter().map(|v| v.1).collect();
        ClassAccuracy {
            class,
            n: vals.len(),
            dice: mean_std(&d).unwrap_or((0.0, 0.0)),
            f1: mean_std(&f).unwrap_or((0.0, 0.0)),
        }
    };
    for (c, vals) in &per_class {
        accuracy.push(summarize(classes[*c].clone(), vals));
    }
    let all: Vec<(f64, f64)> = per_class.values().flatten().copied().collect();
    if !all.is_empty() {
        accuracy.push(summarize("all".into(), &all));
    }
    let table = accuracy.iter().map(|a| {
        [
            a.class.clone(),
            a.n.to_string(),
            num(a.dice.0),
            num(a.dice.1),
            num(a.f1.0),
            num(a.f1.1),
        ]
    });
    atomic_write(
        &dir.join(LABEL_ACCURACY),
        &csv_bytes(&header, &["class", "n", "dice_mean", "dice_std", "f1_mean", "f1_std"], table)?,
    )?;
    Ok(InjectSummary {
        added,
        removed,
        empty_labels,
        accuracy,
    })
}

fn label_source(data_dir: &Path, rows: &[ManifestRow]) -> LabelSource {
    if rows.iter().all(|r| r.noisy_path(data_dir).exists()) {
        LabelSource::Noisy
    } else {
        LabelSource::Clean
    }
}

fn plan_from_rows(rows: &[ManifestRow], seed: u64) -> Result<SplitPlan> {
    let ids: Vec<&str> = rows.iter().map(|r| r.slide_id.as_str()).collect();
    Ok(split_slides(&ids, rng::sub_seed(seed, Stream::Split))?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub label_source: LabelSource,
}

pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    let rows = read_manifest(&cfg.data_dir)?;
    let source = label_source(&cfg.data_dir, &rows);
    if source == LabelSource::Clean {
        eprintln!("warning: no complete {MASKS_NOISY}/ found; training on clean masks");
    }
    let samples = load_strict(&cfg.data_dir, &rows, &cfg.experiment.classes, source)?;
    let out = trainer::train(&cfg.experiment, &samples)?;

    let header = cfg.header("train");
    let mut ckpt = Vec::new();
    out.best.write_checkpoint(&mut ckpt)?;
    atomic_write(&cfg.run_dir.join(CHECKPOINT), &ckpt)?;
    let history = out.history.iter().map(|h| {
        [
            h.epoch.to_string(),
            num(h.train_loss),
            num(h.dice_term),
            num(h.bce_term),
            num(h.contrastive_term),
            num(h.val_mean_dice),
        ]
    });
    atomic_write(&cfg.run_dir.join(HISTORY), &csv_bytes(&header, &HISTORY_COLUMNS, history)?)?;
    let split = out
        .plan
        .assignments()
        .iter()
        .map(|(slide, s)| [slide.clone(), s.to_string()]);
    atomic_write(&cfg.run_dir.join(SPLIT_FILE), &csv_bytes(&header, &["slide_id", "split"], split)?)?;
    let best_val_dice = out.history.get(out.best_epoch.saturating_sub(1)).map_or(0.0, |h| h.val_mean_dice);
    Ok(TrainSummary {
        best_epoch: out.best_epoch,
        best_val_dice,
        label_source: source,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSummary {
    pub split: Split,
    pub class: String,
    pub n: usize,
    pub dice: (f64, f64),
    pub f1: (f64, f64),
    pub fp_iou: Option<(f64, f64)>,
    pub fn_iou: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Comparison {
    NoSignal,
    TooFewPairs(usize),
    Tested(Wilcoxon),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub rows: Vec<EvalRow>,
    pub skipped: Vec<String>,
    pub classes: Vec<ClassSummary>,
    pub comparison: Option<Comparison>,
}

fn summarize(rows: &[&EvalRow], split: Split, class: String) -> ClassSummary {
    let pick = |f: &dyn Fn(&EvalRow) -> Option<f64>| -> Vec<f64> { rows.iter().filter_map(|r| f(r)).collect() };
    ClassSummary {
        split,
        class,
        n: rows.len(),
        dice: mean_std(&pick(&|r| Some(r.dice))).unwrap_or((0.0, 0.0)),
        f1: mean_std(&pick(&|r| Some(r.f1))).unwrap_or((0.0, 0.0)),
        fp_iou: mean_std(&pick(&|r| r.fp_iou)),
        fn_iou: mean_std(&pick(&|r| r.fn_iou)),
    }
}

pub fn eval(cfg: &RunConfig, compare: Option<&Path>) -> Result<EvalSummary> {
    let classes = &cfg.experiment.classes;
    let model = ModelState::load(&cfg.run_dir.join(CHECKPOINT))?;
    if model.architecture().class_count != classes.len() {
        bail!(
            "checkpoint has {} classes, configuration lists {}",
            model.architecture().class_count,
            classes.len()
        );
    }
    let rows = read_manifest(&cfg.data_dir)?;
    let plan = plan_from_rows(&rows, cfg.experiment.seed)?;
    if !rows.iter().any(|r| plan.split_of(&r.slide_id) == Some(Split::Test)) {
        bail!("test split is empty");
    }
    let source = label_source(&cfg.data_dir, &rows);
    let (samples, failures) = load_lenient(&cfg.data_dir, &rows, classes, source);
    for (_, id, e) in &failures {
        eprintln!("warning: skipping {id}: {e}");
    }
    let results = trainer::evaluate(&model, &samples, &plan, &[Split::Train, Split::Test])?;

    let mut out_rows: Vec<[String; 11]> = results
        .iter()
        .map(|r| {
            [
                r.image_id.clone(),
                classes[r.class_index].clone(),
                num(r.dice),
                num(r.f1),
                opt(r.fp_iou),
                opt(r.fn_iou),
                r.split.to_string(),
                opt(r.tp_dice),
                opt(r.tp_f1),
                opt(r.fp_iou_window),
                opt(r.fn_iou_window),
            ]
        })
        .collect();
    for (i, id, _) in &failures {
        let class = rows[*i].class_name.clone();
        let mut row: [String; 11] = Default::default();
        row[0] = id.clone();
        row[1] = class;
        row[6] = "skipped".into();
        out_rows.push(row);
    }

    let mut summaries = Vec::new();
    for split in [Split::Train, Split::Test] {
        let in_split: Vec<&EvalRow> = results.iter().filter(|r| r.split == split).collect();
        if in_split.is_empty() {
            continue;
        }
        for (c, name) in classes.iter().enumerate() {
            let rs: Vec<&EvalRow> = in_split.iter().copied().filter(|r| r.class_index == c).collect();
            if !rs.is_empty() {
                summaries.push(summarize(&rs, split, name.clone()));
            }
        }
        summaries.push(summarize(&in_split, split, "all".into()));
    }
    for s in &summaries {
        let pair = |v: Option<(f64, f64)>| (opt(v.map(|x| x.0)), opt(v.map(|x| x.1)));
        let (fpm, fps) = pair(s.fp_iou);
        let (fnm, fns) = pair(s.fn_iou);
        let mk = |stat: &str, d: f64, f: f64, fp: &str, fn_: &str| -> [String; 11] {
            let mut row: [String; 11] = Default::default();
            row[0] = stat.into();
            row[1] = s.class.clone();
            row[2] = num(d);
            row[3] = num(f);
            row[4] = fp.into();
            row[5] = fn_.into();
            row[6] = s.split.to_string();
            row
        };
        out_rows.push(mk("mean", s.dice.0, s.f1.0, &fpm, &fnm));
        out_rows.push(mk("std", s.dice.1, s.f1.1, &fps, &fns));
    }
    let header = cfg.header("eval");
    atomic_write(&cfg.run_dir.join(METRICS), &csv_bytes(&header, &METRICS_COLUMNS, out_rows)?)?;

    let comparison = match compare {
        Some(other) => Some(compare_runs(cfg, &results, other)?),
        None => None,
    };
    Ok(EvalSummary {
        rows: results,
        skipped: failures.into_iter().map(|f| f.1).collect(),
        classes: summaries,
        comparison,
    })
}

/// Test-split Dice per image from a metrics file.
pub fn read_test_dice(path: &Path) -> Result<BTreeMap<String, f64>> {
    let mut r = csv_reader(path)?;
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let (id, split, dice) = (&rec[0], &rec[6], &rec[2]);
        if split == "test" && id != "mean" && id != "std" {
            let v: f64 = dice.parse().with_context(|| format!("{}: bad dice {dice:?}", path.display()))?;
            out.insert(id.to_string(), v);
        }
    }
    Ok(out)
}

fn compare_runs(cfg: &RunConfig, ours: &[EvalRow], other: &Path) -> Result<Comparison> {
    let theirs = read_test_dice(other)?;
    // compare at the precision written to disk so a run compared with its
    // own metrics file pairs exactly
    let mine: BTreeMap<String, f64> = ours
        .iter()
        .filter(|r| r.split == Split::Test)
        .map(|r| (r.image_id.clone(), num(r.dice).parse().expect("formatted float")))
        .collect();
    if mine.keys().ne(theirs.keys()) {
        bail!(
            "incompatible compare sets: {} has {} test images, this run has {}",
            other.display(),
            theirs.len(),
            mine.len()
        );
    }
    let a: Vec<f64> = mine.values().copied().collect();
    let b: Vec<f64> = theirs.values().copied().collect();
    let (comparison, fields) = match wilcoxon_signed_rank(&a, &b) {
        Ok(w) => {
            let fields = [
                w.n.to_string(),
                num(w.w_plus),
                num(w.w_minus),
                num(w.statistic),
                format!("{:.6e}", w.p_value),
                if w.exact { "exact" } else { "normal" }.to_string(),
                w.bucket.to_string(),
            ];
            (Comparison::Tested(w), fields)
        }
        Err(CoreError::NoSignal) => {
            let mut f: [String; 7] = Default::default();
            f[0] = "0".into();
            f[6] = "no-signal".into();
            (Comparison::NoSignal, f)
        }
        Err(CoreError::TooFewPairs { got, .. }) => {
            let mut f: [String; 7] = Default::default();
            f[0] = got.to_string();
            f[6] = "too-few-pairs".into();
            (Comparison::TooFewPairs(got), f)
        }
        Err(e) => return Err(e.into()),
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let mut row = fields.to_vec();
    row.push(num(mean(&a)));
    row.push(num(mean(&b)));
    let header = format!("{}# compare={}\n", cfg.header("eval"), other.display());
    atomic_write(
        &cfg.run_dir.join(COMPARE),
        &csv_bytes(
            &header,
            &[
                "n",
                "w_plus",
                "w_minus",
                "statistic",
                "p_value",
                "method",
                "bucket",
                "dice_mean",
                "dice_mean_other",
            ],
            [row],
        )?,
    )?;
    Ok(comparison)
}
