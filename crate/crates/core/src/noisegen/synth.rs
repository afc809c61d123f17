//! Synthetic stained patches with elliptical cells and stain-only distractors.
//!
//! Cells carry both hematoxylin and PAS; distractors carry PAS alone, so the
//! PAS-analog channel sees both while the colour image lets a model tell
//! them apart. Patches are dealt to synthetic slides so that the slide-level
//! split drawn from the same seed yields the requested patch counts.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, RgbImage, Size};
use crate::model::DOWNSAMPLE;
use crate::rng::{self, Rng, Stream};
use crate::split::{apportion, split_slides, Split, SplitPlan, SPLIT_RATIO};

use super::stain::{intensity, StainMatrix};

pub const DEFAULT_CLASSES: [&str; 4] = ["Pod", "Mes", "Endo", "Pecs"];

/// Semi-axis ranges at a 64 px patch, per class (cycled for extra classes).
const CLASS_RADII: [(f64, f64); 4] = [(4.0, 5.5), (3.5, 5.0), (3.0, 4.0), (4.5, 6.0)];
const PLACEMENT_ATTEMPTS: usize = 60;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub size: Size,
    pub patches: usize,
    pub slides: usize,
    pub cells: (usize, usize),
    pub distractors: (usize, usize),
    pub class_names: Vec<String>,
    pub seed: u64,
}

impl SynthParams {
    pub fn new(size: Size, patches: usize, slides: usize, seed: u64) -> Self {
        Self {
            size,
            patches,
            slides,
            cells: (4, 8),
            distractors: (6, 10),
            class_names: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            seed,
        }
    }

    fn radius_scale(&self) -> f64 {
        self.size.width.min(self.size.height) as f64 / 64.0
    }

    fn radii(&self, class_index: usize) -> (f64, f64) {
        let (lo, hi) = CLASS_RADII[class_index % CLASS_RADII.len()];
        (lo * self.radius_scale(), hi * self.radius_scale())
    }

    pub fn validate(&self) -> Result<()> {
        let Size { width, height } = self.size;
        if width == 0 || height == 0 || width % DOWNSAMPLE != 0 || height % DOWNSAMPLE != 0 {
            return Err(Error::BadSpatialSize {
                width,
                height,
                factor: DOWNSAMPLE,
            });
        }
        if self.cells.0 > self.cells.1 || self.distractors.0 > self.distractors.1 {
            return Err(Error::ImpossibleGeometry("object count range has min > max".into()));
        }
        if self.class_names.is_empty() {
            return Err(Error::InvalidArgument("no classes".into()));
        }
        let widest = (0..self.class_names.len()).map(|c| self.radii(c).1).fold(0.0, f64::max);
        if 2.0 * widest + 4.0 > width.min(height) as f64 {
            return Err(Error::ImpossibleGeometry(format!(
                "cells of radius {widest:.1} do not fit a {} patch",
                self.size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPatch {
    pub id: String,
    pub slide_id: String,
    pub split: Split,
    pub class_index: usize,
    pub image: RgbImage,
    pub clean: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub patches: Vec<SynthPatch>,
    pub plan: Option<SplitPlan>,
}

pub fn slide_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("slide{i:02}")).collect()
}

pub fn synth_dataset(params: &SynthParams) -> Result<SynthDataset> {
    params.validate()?;
    if params.patches == 0 {
        return Ok(SynthDataset {
            patches: Vec::new(),
            plan: None,
        });
    }
    let plan = split_slides(&slide_ids(params.slides), rng::sub_seed(params.seed, Stream::Split))?;
    let counts = apportion(params.patches, &SPLIT_RATIO);
    let stains = StainMatrix::default();
    let mut patches = Vec::with_capacity(params.patches);
    for (split, n) in Split::ALL.into_iter().zip(counts) {
        let slides = plan.slides(split);
        if n > 0 && slides.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{n} {split} patches requested but no {split} slides among {}",
                params.slides
            )));
        }
        for j in 0..n {
            let index = patches.len();
            let class_index = index % params.class_names.len();
            let mut r = rng::seeded(rng::indexed_seed(params.seed, Stream::Dataset, index as u64));
            let (image, clean) = render_patch(params, class_index, &stains, &mut r);
            patches.push(SynthPatch {
                id: format!("patch{index:04}"),
                slide_id: slides[j % slides.len()].to_string(),
                split,
                class_index,
                image,
                clean,
            });
        }
    }
    Ok(SynthDataset {
        patches,
        plan: Some(plan),
    })
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn sample(r: &mut Rng, size: Size, (lo, hi): (f64, f64)) -> Self {
        let a = rng::uniform(r, lo, hi);
        let b = a * rng::uniform(r, 0.7, 1.0);
        let m = a + 1.0;
        Self {
            cx: rng::uniform(r, m, size.width as f64 - m),
            cy: rng::uniform(r, m, size.height as f64 - m),
            a,
            b,
            theta: rng::uniform(r, 0.0, PI),
        }
    }

    fn pixels(&self, size: Size) -> Vec<usize> {
        let (s, c) = self.theta.sin_cos();
        let x0 = (self.cx - self.a).floor().max(0.0) as usize;
        let x1 = ((self.cx + self.a).ceil() as usize).min(size.width - 1);
        let y0 = (self.cy - self.a).floor().max(0.0) as usize;
        let y1 = ((self.cy + self.a).ceil() as usize).min(size.height - 1);
        let mut out = Vec::new();
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
                let u = (dx * c + dy * s) / self.a;
                let v = (-dx * s + dy * c) / self.b;
                if u * u + v * v <= 1.0 {
                    out.push(size.index(x, y));
                }
            }
        }
        out
    }
}

/// Places up to `count` non-touching ellipses; returns their pixel lists.
fn place(
    r: &mut Rng,
    size: Size,
    count: usize,
    radii: (f64, f64),
    occupied: &mut BinaryMask,
) -> Vec<Vec<usize>> {
    let mut placed = Vec::new();
    for _ in 0..count {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let px = Ellipse::sample(r, size, radii).pixels(size);
            // one background pixel between objects keeps components apart
            let clear = !px.is_empty()
                && px.iter().all(|&i| {
                    let (x, y) = size.coords(i);
                    (x.saturating_sub(1)..=(x + 1).min(size.width - 1))
                        .all(|nx| (y.saturating_sub(1)..=(y + 1).min(size.height - 1)).all(|ny| !occupied.get(nx, ny)))
                });
            if clear {
                for &i in &px {
                    occupied.bits_mut()[i] = true;
                }
                placed.push(px);
                break;
            }
        }
    }
    placed
}

fn render_patch(params: &SynthParams, class_index: usize, stains: &StainMatrix, r: &mut Rng) -> (RgbImage, BinaryMask) {
    let size = params.size;
    let n = size.area();
    let count = |r: &mut Rng, (lo, hi): (usize, usize)| lo + rng::below(r, hi - lo + 1);
    let n_cells = count(r, params.cells);
    let n_distractors = count(r, params.distractors);

    let tone = [rng::uniform(r, 0.03, 0.07), rng::uniform(r, 0.07, 0.12), rng::uniform(r, 0.0, 0.03)];
    let mut conc: Vec<[f64; 3]> = vec![tone; n];

    let mut occupied = BinaryMask::empty(size.width, size.height);
    let radii = params.radii(class_index);
    let cells = place(r, size, n_cells, radii, &mut occupied);
    let distractors = place(r, size, n_distractors, radii, &mut occupied);

    let mut clean = BinaryMask::empty(size.width, size.height);
    for px in &cells {
        let h = rng::uniform(r, 0.45, 0.65);
        let p = rng::uniform(r, 0.38, 0.52);
        for &i in px {
            conc[i] = [h, p, tone[2]];
            clean.bits_mut()[i] = true;
        }
    }
    for px in &distractors {
        let p = rng::uniform(r, 0.40, 0.60);
        for &i in px {
            conc[i] = [tone[0], p, tone[2]];
        }
    }

    let mut data = Vec::with_capacity(3 * n);
    for c in conc {
        let jitter = [
            rng::uniform(r, -0.02, 0.02),
            rng::uniform(r, -0.02, 0.02),
            rng::uniform(r, -0.01, 0.01),
        ];
        let c = std::array::from_fn(|k| (c[k] + jitter[k]).max(0.0));
        data.extend(intensity(stains.mix(c)));
    }
    let image = RgbImage::new(size.width, size.height, data).expect("3 bytes per pixel");
    (image, clean)
}
