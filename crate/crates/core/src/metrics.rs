//! Segmentation metrics, noise-region overlap and the Wilcoxon signed-rank test.

use std::collections::HashMap;
use std::fmt;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::grid::BinaryMask;
use crate::noisegen::contours::label_components;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const REGION_WINDOW_RADIUS: usize = 2;
pub const EXACT_MAX_N: usize = 12;
pub const MIN_PAIRS: usize = 5;

fn check(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.size() != b.size() {
        return Err(Error::shape("mask sizes", a.size(), b.size()));
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)`; two empty masks score 1.
pub fn dice_score(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check(pred, gt)?;
    let inter = pred.intersection_count(gt)?;
    let total = pred.count() + gt.count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Instance counts after greedy one-to-one matching by descending IoU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceMatch {
    pub true_positives: usize,
    pub predicted: usize,
    pub ground_truth: usize,
}

impl InstanceMatch {
    pub fn f1(&self) -> f64 {
        let denom = self.predicted + self.ground_truth;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.true_positives as f64 / denom as f64
        }
    }
}

pub fn match_instances(pred: &BinaryMask, gt: &BinaryMask, iou_threshold: f64) -> Result<InstanceMatch> {
    check(pred, gt)?;
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!("IoU threshold {iou_threshold} outside (0, 1]")));
    }
    let (lp, np) = label_components(pred);
    let (lg, ng) = label_components(gt);
    let mut area_p = vec![0usize; np + 1];
    let mut area_g = vec![0usize; ng + 1];
    let mut inter: HashMap<(u32, u32), usize> = HashMap::new();
    for (&a, &b) in lp.iter().zip(&lg) {
        area_p[a as usize] += 1;
        area_g[b as usize] += 1;
        if a > 0 && b > 0 {
            *inter.entry((a, b)).or_default() += 1;
        }
    }
    let mut pairs: Vec<(f64, u32, u32)> = inter
        .into_iter()
        .map(|((a, b), i)| {
            let union = area_p[a as usize] + area_g[b as usize] - i;
            (i as f64 / union as f64, a, b)
        })
        .filter(|&(iou, _, _)| iou >= iou_threshold)
        .collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_p = vec![false; np + 1];
    let mut used_g = vec![false; ng + 1];
    let mut tp = 0;
    for (_, a, b) in pairs {
        if !used_p[a as usize] && !used_g[b as usize] {
            used_p[a as usize] = true;
            used_g[b as usize] = true;
            tp += 1;
        }
    }
    Ok(InstanceMatch {
        true_positives: tp,
        predicted: np,
        ground_truth: ng,
    })
}

/// Instance F1 over 8-connected components; no instances on either side scores 1.
pub fn instance_f1(pred: &BinaryMask, gt: &BinaryMask, iou_threshold: f64) -> Result<f64> {
    match_instances(pred, gt, iou_threshold).map(|m| m.f1())
}

/// Share of `region` covered by `pred`; `None` for an empty region.
pub fn region_iou(pred: &BinaryMask, region: &BinaryMask) -> Result<Option<f64>> {
    check(pred, region)?;
    let r = region.count();
    if r == 0 {
        return Ok(None);
    }
    Ok(Some(pred.intersection_count(region)? as f64 / r as f64))
}

/// IoU of `region` with the prediction clipped to the region dilated by
/// [`REGION_WINDOW_RADIUS`]; `None` for an empty region.
pub fn region_iou_windowed(pred: &BinaryMask, region: &BinaryMask) -> Result<Option<f64>> {
    check(pred, region)?;
    if !region.any() {
        return Ok(None);
    }
    let clipped = pred.and(&region.dilate(REGION_WINDOW_RADIUS))?;
    let inter = clipped.intersection_count(region)?;
    let union = clipped.or(region)?.count();
    Ok(Some(inter as f64 / union as f64))
}

/// Noise regions of a training label relative to its clean ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseRegions {
    pub tp: BinaryMask,
    pub fp: BinaryMask,
    pub fn_: BinaryMask,
}

pub fn noise_regions(noisy: &BinaryMask, clean: &BinaryMask) -> Result<NoiseRegions> {
    Ok(NoiseRegions {
        tp: noisy.and(clean)?,
        fp: noisy.and_not(clean)?,
        fn_: clean.and_not(noisy)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionReport {
    pub tp_dice: f64,
    pub tp_f1: f64,
    /// Lower means fewer predictions on injected false positives.
    pub fp_iou: Option<f64>,
    /// Higher means more recovery of omitted cells.
    pub fn_iou: Option<f64>,
    pub fp_iou_window: Option<f64>,
    pub fn_iou_window: Option<f64>,
}

pub fn training_region_report(pred: &BinaryMask, noisy: &BinaryMask, clean: &BinaryMask) -> Result<RegionReport> {
    check(pred, noisy)?;
    let r = noise_regions(noisy, clean)?;
    Ok(RegionReport {
        tp_dice: dice_score(pred, &r.tp)?,
        tp_f1: instance_f1(pred, &r.tp, DEFAULT_IOU_THRESHOLD)?,
        fp_iou: region_iou(pred, &r.fp)?,
        fn_iou: region_iou(pred, &r.fn_)?,
        fp_iou_window: region_iou_windowed(pred, &r.fp)?,
        fn_iou_window: region_iou_windowed(pred, &r.fn_)?,
    })
}

/// Dice and instance F1 of a noisy label against the clean one.
pub fn label_accuracy(noisy: &BinaryMask, clean: &BinaryMask) -> Result<(f64, f64)> {
    Ok((
        dice_score(noisy, clean)?,
        instance_f1(noisy, clean, DEFAULT_IOU_THRESHOLD)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PBucket {
    Below001,
    Below01,
    Below05,
    NotSignificant,
}

impl PBucket {
    pub fn of(p: f64) -> Self {
        if p < 0.001 {
            PBucket::Below001
        } else if p < 0.01 {
            PBucket::Below01
        } else if p < 0.05 {
            PBucket::Below05
        } else {
            PBucket::NotSignificant
        }
    }
}

impl fmt::Display for PBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PBucket::Below001 => "p<0.001",
            PBucket::Below01 => "p<0.01",
            PBucket::Below05 => "p<0.05",
            PBucket::NotSignificant => "n.s.",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Wilcoxon {
    /// Non-zero pairs used.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(W+, W−)`.
    pub statistic: f64,
    /// Two-sided.
    pub p_value: f64,
    pub exact: bool,
    pub bucket: PBucket,
}

/// Average ranks (1-based) of `values`.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test on `a − b`; zero differences are
/// dropped. Exact for up to [`EXACT_MAX_N`] pairs, otherwise a normal
/// approximation with continuity and tie corrections.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("paired differences"));
    }
    if diffs.is_empty() {
        return Err(Error::NoSignal);
    }
    let n = diffs.len();
    if n < MIN_PAIRS {
        return Err(Error::TooFewPairs { need: MIN_PAIRS, got: n });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let statistic = w_plus.min(w_minus);
    let exact = n <= EXACT_MAX_N;
    let p_value = if exact {
        exact_p(&ranks, statistic)
    } else {
        normal_p(&abs, n, statistic)
    };
    Ok(Wilcoxon {
        n,
        w_plus,
        w_minus,
        statistic,
        p_value,
        exact,
        bucket: PBucket::of(p_value),
    })
}

/// `min(1, 2·P(W+ ≤ w))` under random signs, counting sums of doubled ranks.
pub fn exact_p(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0f64; max + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &d in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] > 0.0 {
                counts[s + d] += counts[s];
            }
        }
        reach += d;
    }
    let limit = (2.0 * w).round() as usize;
    let below: f64 = counts[..=limit.min(max)].iter().sum();
    (2.0 * below / 2f64.powi(ranks.len() as i32)).min(1.0)
}

fn normal_p(abs: &[f64], n: usize, w: f64) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut sorted = abs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    for group in sorted.chunk_by(|x, y| x == y) {
        let t = group.len() as f64;
        tie_term += t * t * t - t;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::standard();
    (2.0 * (1.0 - normal.cdf(z)) as f64).min(1.0)
}
