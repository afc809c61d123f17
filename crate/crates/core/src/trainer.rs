//! Experiment configuration, training loop, model selection and evaluation.

use std::fmt::Display;
use std::str::FromStr;

use rayon::prelude::*;

use crate::consensus::{consensus_partition, default_k, DEFAULT_TAU};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, FeatureMap, RgbImage, Size};
use crate::loss::{total_loss, ContrastiveMode, ObjectiveConfig, TrainingMode};
use crate::metrics::{dice_score, instance_f1, training_region_report, DEFAULT_IOU_THRESHOLD};
use crate::model::{
    encode_input, ModelState, DEFAULT_CHANNELS, DEFAULT_LEARNING_RATE,
    DEFAULT_MOMENTUM,
};
use crate::noisegen::inject::{default_area_bounds, NoiseRecipe, DEFAULT_MISSING_RATIO, DEFAULT_RHO_FP, DEFAULT_THRESHOLD};
use crate::noisegen::synth::{SynthParams, DEFAULT_CLASSES};
use crate::rng::{self, Stream};
pub use crate::split::{apportion, split_slides, Split, SplitPlan, SPLIT_RATIO};

pub const PREDICTION_THRESHOLD: f64 = 0.5;
pub const DEFAULT_EPOCHS: usize = 100;

/// Every knob of an experiment, serialisable as flat `key=value` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mode: TrainingMode,
    /// `None` picks [`default_k`] for the patch size.
    pub k: Option<usize>,
    pub tau: f64,
    pub lambda_con: f64,
    pub margin: f64,
    pub contrastive: ContrastiveMode,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub channels: usize,
    pub classes: Vec<String>,
    pub patch_size: usize,
    pub patches: usize,
    pub slides: usize,
    pub cells_min: usize,
    pub cells_max: usize,
    pub distractors_min: usize,
    pub distractors_max: usize,
    pub threshold: u8,
    pub rho_fp: f64,
    pub missing_ratio: f64,
    /// `None` scales the reference cell size bounds to the patch size.
    pub area_min: Option<usize>,
    pub area_max: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: TrainingMode::Casc,
            k: None,
            tau: DEFAULT_TAU,
            lambda_con: 1.0,
            margin: 1.0,
            contrastive: ContrastiveMode::Separative,
            lr: DEFAULT_LEARNING_RATE,
            momentum: DEFAULT_MOMENTUM,
            epochs: DEFAULT_EPOCHS,
            batch_size: 1,
            channels: DEFAULT_CHANNELS,
            classes: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            patch_size: 64,
            patches: 100,
            slides: 21,
            cells_min: 4,
            cells_max: 8,
            distractors_min: 6,
            distractors_max: 10,
            threshold: DEFAULT_THRESHOLD,
            rho_fp: DEFAULT_RHO_FP,
            missing_ratio: DEFAULT_MISSING_RATIO,
            area_min: None,
            area_max: None,
        }
    }
}

fn auto<T: Display>(v: Option<T>) -> String {
    v.map_or_else(|| "auto".to_string(), |v| v.to_string())
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value for {key}: {value:?}")))
}

fn parse_auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl ExperimentConfig {
    pub fn size(&self) -> Size {
        Size::new(self.patch_size, self.patch_size)
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn resolved_k(&self) -> usize {
        self.k.unwrap_or_else(|| default_k(self.size()))
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            mode: self.mode,
            k: self.resolved_k(),
            lambda_con: self.lambda_con,
            margin: self.margin,
            contrastive: self.contrastive,
        }
    }

    pub fn noise_recipe(&self) -> NoiseRecipe {
        let (lo, hi) = default_area_bounds(self.size());
        NoiseRecipe {
            threshold: self.threshold,
            rho_fp: self.rho_fp,
            missing_ratio: self.missing_ratio,
            area_min: self.area_min.unwrap_or(lo),
            area_max: self.area_max.unwrap_or(hi),
            seed: rng::sub_seed(self.seed, Stream::Noise),
        }
    }

    pub fn synth_params(&self) -> SynthParams {
        let mut p = SynthParams::new(self.size(), self.patches, self.slides, self.seed);
        p.cells = (self.cells_min, self.cells_max);
        p.distractors = (self.distractors_min, self.distractors_max);
        p.class_names = self.classes.clone();
        p
    }

    /// All keys in a fixed order, defaults included.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("mode", self.mode.to_string()),
            ("k", auto(self.k)),
            ("tau", self.tau.to_string()),
            ("lambda_con", self.lambda_con.to_string()),
            ("margin", self.margin.to_string()),
            ("contrastive", self.contrastive.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("channels", self.channels.to_string()),
            ("classes", self.classes.join(",")),
            ("patch_size", self.patch_size.to_string()),
            ("patches", self.patches.to_string()),
            ("slides", self.slides.to_string()),
            ("cells_min", self.cells_min.to_string()),
            ("cells_max", self.cells_max.to_string()),
            ("distractors_min", self.distractors_min.to_string()),
            ("distractors_max", self.distractors_max.to_string()),
            ("threshold", self.threshold.to_string()),
            ("rho_fp", self.rho_fp.to_string()),
            ("missing_ratio", self.missing_ratio.to_string()),
            ("area_min", auto(self.area_min)),
            ("area_max", auto(self.area_max)),
        ]
    }

    /// Sets one key; returns `false` for keys this struct does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "k" => self.k = parse_auto(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "lambda_con" => self.lambda_con = parse(key, v)?,
            "margin" => self.margin = parse(key, v)?,
            "contrastive" => self.contrastive = v.parse()?,
            "lr" => self.lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "classes" => self.classes = v.split(',').map(|s| s.trim().to_string()).collect(),
            "patch_size" => self.patch_size = parse(key, v)?,
            "patches" => self.patches = parse(key, v)?,
            "slides" => self.slides = parse(key, v)?,
            "cells_min" => self.cells_min = parse(key, v)?,
            "cells_max" => self.cells_max = parse(key, v)?,
            "distractors_min" => self.distractors_min = parse(key, v)?,
            "distractors_max" => self.distractors_max = parse(key, v)?,
            "threshold" => self.threshold = parse(key, v)?,
            "rho_fp" => self.rho_fp = parse(key, v)?,
            "missing_ratio" => self.missing_ratio = parse(key, v)?,
            "area_min" => self.area_min = parse_auto(key, v)?,
            "area_max" => self.area_max = parse_auto(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size != 1 {
            return bad(format!("batch_size must be 1, got {}", self.batch_size));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau {} outside (0, 1)", self.tau));
        }
        if self.channels < 2 {
            return bad(format!("channels {} < 2", self.channels));
        }
        if self.classes.is_empty() || self.classes.iter().any(|c| c.is_empty() || c.contains(',')) {
            return bad(format!("bad class list {:?}", self.classes));
        }
        if let Some(k) = self.k {
            if k < 2 || k % 2 != 0 {
                return bad(format!("k must be a positive even number, got {k}"));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return bad(format!("bad optimiser settings lr={} momentum={}", self.lr, self.momentum));
        }
        if !(self.lambda_con.is_finite() && self.margin.is_finite()) {
            return bad("lambda_con and margin must be finite".into());
        }
        self.noise_recipe().validate()
    }
}

/// One patch with its training target and clean ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub slide_id: String,
    pub class_index: usize,
    pub image: RgbImage,
    /// Target used for gradients; the noisy label when one exists.
    pub label: BinaryMask,
    pub clean: BinaryMask,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dice_term: f64,
    pub bce_term: f64,
    pub contrastive_term: f64,
    pub val_mean_dice: f64,
    /// Share of training pixels where model and label disagree.
    pub disagreement: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: ModelState,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub plan: SplitPlan,
    /// Sample ids that produced gradients, in step order of the first epoch.
    pub gradient_ids: Vec<String>,
}

/// Splits samples by slide with the experiment's split stream.
pub fn plan_for(samples: &[Sample], seed: u64) -> Result<SplitPlan> {
    let slides: Vec<&str> = samples.iter().map(|s| s.slide_id.as_str()).collect();
    split_slides(&slides, rng::sub_seed(seed, Stream::Split))
}

pub fn indices_in(samples: &[Sample], plan: &SplitPlan, split: Split) -> Vec<usize> {
    (0..samples.len())
        .filter(|&i| plan.split_of(&samples[i].slide_id) == Some(split))
        .collect()
}

pub fn predict_mask(model: &ModelState, input: &FeatureMap) -> Result<BinaryMask> {
    Ok(model.forward(input)?.confidence.threshold(PREDICTION_THRESHOLD))
}

fn encode(sample: &Sample, class_count: usize) -> Result<FeatureMap> {
    encode_input(&sample.image, sample.class_index, class_count)
}

/// Mean over classes of the per-class mean Dice against the clean masks;
/// classes without samples are skipped.
pub fn mean_class_dice(model: &ModelState, samples: &[Sample], inputs: &[FeatureMap], class_count: usize) -> Result<f64> {
    let dice: Vec<(usize, f64)> = samples
        .par_iter()
        .zip(inputs)
        .map(|(s, x)| Ok((s.class_index, dice_score(&predict_mask(model, x)?, &s.clean)?)))
        .collect::<Result<_>>()?;
    let mut sums = vec![(0.0, 0usize); class_count];
    for (c, d) in dice {
        sums[c].0 += d;
        sums[c].1 += 1;
    }
    let per_class: Vec<f64> = sums.iter().filter(|s| s.1 > 0).map(|s| s.0 / s.1 as f64).collect();
    if per_class.is_empty() {
        return Ok(0.0);
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Per-patch SGD over shuffled training patches; keeps the epoch with the
/// best mean validation Dice (earliest on ties).
pub fn train(config: &ExperimentConfig, samples: &[Sample]) -> Result<TrainOutcome> {
    config.validate()?;
    let class_count = config.class_count();
    if let Some(s) = samples.iter().find(|s| s.class_index >= class_count) {
        return Err(Error::InvalidArgument(format!("{}: class index {} out of range", s.id, s.class_index)));
    }
    let plan = plan_for(samples, config.seed)?;
    let train_idx = indices_in(samples, &plan, Split::Train);
    let val_idx = indices_in(samples, &plan, Split::Val);
    if train_idx.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    if val_idx.is_empty() {
        return Err(Error::InvalidArgument("validation split is empty".into()));
    }
    let inputs: Vec<FeatureMap> = samples.iter().map(|s| encode(s, class_count)).collect::<Result<_>>()?;
    let val_samples: Vec<Sample> = val_idx.iter().map(|&i| samples[i].clone()).collect();
    let val_inputs: Vec<FeatureMap> = val_idx.iter().map(|&i| inputs[i].clone()).collect();

    let objective = config.objective();
    let mut model = ModelState::init(rng::sub_seed(config.seed, Stream::Init), config.channels, class_count)?;
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_dice = f64::NEG_INFINITY;
    let mut history = Vec::with_capacity(config.epochs);
    let mut gradient_ids = Vec::new();

    for epoch in 1..=config.epochs {
        let mut order = train_idx.clone();
        rng::shuffle(&mut rng::seeded(rng::indexed_seed(config.seed, Stream::Shuffle, epoch as u64)), &mut order);
        // per-sample terms, summed in sample order so lr = 0 gives a flat history
        let mut terms = vec![[0.0f64; 5]; samples.len()];
        for &i in &order {
            let s = &samples[i];
            if epoch == 1 {
                gradient_ids.push(s.id.clone());
            }
            let out = model.forward_cached(&inputs[i])?;
            let (loss, grads) = total_loss(&out.confidence, &out.features, &s.label, &objective)?;
            if !loss.total.is_finite() {
                return Err(Error::DivergedLoss { epoch });
            }
            let part = consensus_partition(&out.confidence, &s.label, config.tau)?;
            let disagree = (part.dm.count() + part.dh.count()) as f64 / s.label.len() as f64;
            terms[i] = [loss.total, loss.dice_term, loss.bce_term, loss.contrastive, disagree];
            let grad_logits = grads.logits(&out.confidence)?;
            model.backward(&grad_logits, &grads.features)?;
            model.sgd_step(config.lr, config.momentum)?;
        }
        let n = train_idx.len() as f64;
        let mean = |k: usize| train_idx.iter().map(|&i| terms[i][k]).sum::<f64>() / n;
        let val_mean_dice = mean_class_dice(&model, &val_samples, &val_inputs, class_count)?;
        history.push(EpochRecord {
            epoch,
            train_loss: mean(0),
            dice_term: mean(1),
            bce_term: mean(2),
            contrastive_term: mean(3),
            val_mean_dice,
            disagreement: mean(4),
        });
        if val_mean_dice > best_dice {
            best_dice = val_mean_dice;
            best_epoch = epoch;
            best = model.clone();
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
        plan,
        gradient_ids,
    })
}

/// One metrics row. Region columns are filled for training patches whose
/// noisy label differs from the clean one.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub image_id: String,
    pub class_index: usize,
    pub split: Split,
    pub dice: f64,
    pub f1: f64,
    pub fp_iou: Option<f64>,
    pub fn_iou: Option<f64>,
    pub tp_dice: Option<f64>,
    pub tp_f1: Option<f64>,
    pub fp_iou_window: Option<f64>,
    pub fn_iou_window: Option<f64>,
}

/// Scores every sample of `splits` against its clean mask; training
/// patches also get the noise-region report. Rows follow sample order.
pub fn evaluate(
    model: &ModelState,
    samples: &[Sample],
    plan: &SplitPlan,
    splits: &[Split],
) -> Result<Vec<EvalRow>> {
    let class_count = model.architecture().class_count;
    let chosen: Vec<(usize, Split)> = samples
        .iter()
        .enumerate()
        .filter_map(|(i, s)| plan.split_of(&s.slide_id).filter(|sp| splits.contains(sp)).map(|sp| (i, sp)))
        .collect();
    chosen
        .par_iter()
        .map(|&(i, split)| {
            let s = &samples[i];
            let pred = predict_mask(model, &encode(s, class_count)?)?;
            let mut row = EvalRow {
                image_id: s.id.clone(),
                class_index: s.class_index,
                split,
                dice: dice_score(&pred, &s.clean)?,
                f1: instance_f1(&pred, &s.clean, DEFAULT_IOU_THRESHOLD)?,
                fp_iou: None,
                fn_iou: None,
                tp_dice: None,
                tp_f1: None,
                fp_iou_window: None,
                fn_iou_window: None,
            };
            if split == Split::Train {
                let r = training_region_report(&pred, &s.label, &s.clean)?;
                row.fp_iou = r.fp_iou;
                row.fn_iou = r.fn_iou;
                row.tp_dice = Some(r.tp_dice);
                row.tp_f1 = Some(r.tp_f1);
                row.fp_iou_window = r.fp_iou_window;
                row.fn_iou_window = r.fn_iou_window;
            }
            Ok(row)
        })
        .collect()
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}
