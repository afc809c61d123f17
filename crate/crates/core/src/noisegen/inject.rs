//! Instance-level label noise: proximity-guided false positives and random
//! omissions.

use std::fmt;

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, RgbImage, Size};
use crate::rng;

use super::contours::{extract_contours, Contour};
use super::stain::{color_deconvolve, threshold_mask, to_8bit, StainMatrix, PAS_CHANNEL};

pub const DEFAULT_THRESHOLD: u8 = 30;
pub const DEFAULT_RHO_FP: f64 = 0.5;
pub const DEFAULT_MISSING_RATIO: f64 = 0.3;
/// Cell size bounds at 512 px, scaled linearly with the patch side.
pub const REFERENCE_SIDE: f64 = 512.0;
pub const REFERENCE_AREA_MIN: f64 = 30.0;
pub const REFERENCE_AREA_MAX: f64 = 1500.0;

// Guards floor() against products like 0.1 * 10 = 0.9999999999999998.
const FLOOR_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRecipe {
    pub threshold: u8,
    pub rho_fp: f64,
    pub missing_ratio: f64,
    pub area_min: usize,
    pub area_max: usize,
    pub seed: u64,
}

impl NoiseRecipe {
    /// Defaults with area bounds scaled to the patch side.
    pub fn for_size(size: Size, seed: u64) -> Self {
        let (area_min, area_max) = default_area_bounds(size);
        Self {
            threshold: DEFAULT_THRESHOLD,
            rho_fp: DEFAULT_RHO_FP,
            missing_ratio: DEFAULT_MISSING_RATIO,
            area_min,
            area_max,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.missing_ratio) {
            return Err(Error::InvalidArgument(format!(
                "missing_ratio {} outside [0, 1]",
                self.missing_ratio
            )));
        }
        if !(self.rho_fp >= 0.0 && self.rho_fp.is_finite()) {
            return Err(Error::InvalidArgument(format!("rho_fp {} must be >= 0", self.rho_fp)));
        }
        if self.area_min > self.area_max {
            return Err(Error::InvalidArgument(format!(
                "area_min {} > area_max {}",
                self.area_min, self.area_max
            )));
        }
        Ok(())
    }
}

pub fn default_area_bounds(size: Size) -> (usize, usize) {
    let side = ((size.width * size.height) as f64).sqrt();
    let s = side / REFERENCE_SIDE;
    (
        (REFERENCE_AREA_MIN * s).round().max(1.0) as usize,
        (REFERENCE_AREA_MAX * s).round().max(1.0) as usize,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseAction {
    Add,
    Remove,
}

impl fmt::Display for NoiseAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseAction::Add => "add",
            NoiseAction::Remove => "remove",
        })
    }
}

/// One added or removed contour.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseEvent {
    pub contour_index: usize,
    pub action: NoiseAction,
    pub area: usize,
    pub centroid: (f64, f64),
}

impl NoiseEvent {
    fn new(contour_index: usize, action: NoiseAction, c: &Contour) -> Self {
        Self {
            contour_index,
            action,
            area: c.area,
            centroid: c.centroid,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Injection {
    pub mask: BinaryMask,
    pub added: BinaryMask,
    pub events: Vec<NoiseEvent>,
    pub limit: usize,
    /// Set when the label had no annotations to anchor on.
    pub empty_label: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Removal {
    pub mask: BinaryMask,
    pub events: Vec<NoiseEvent>,
    pub kept: usize,
}

/// `round(rho_fp × cells)`.
pub fn injection_limit(rho_fp: f64, cells: usize) -> usize {
    (rho_fp * cells as f64).round() as usize
}

/// `floor((1 − missing_ratio) × n)`.
pub fn keep_count(missing_ratio: f64, n: usize) -> usize {
    (((1.0 - missing_ratio) * n as f64) + FLOOR_SLACK).floor().min(n as f64) as usize
}

/// Candidate contours from the thresholded PAS-analog stain channel.
pub fn stain_candidates(image: &RgbImage, stains: &StainMatrix, threshold: u8) -> Vec<Contour> {
    let [_, pas, _] = {
        let mut planes = color_deconvolve(image, stains);
        planes[PAS_CHANNEL] = to_8bit(&planes[PAS_CHANNEL]);
        planes
    };
    extract_contours(&threshold_mask(&pas, f64::from(threshold)))
}

/// Adds stain-positive contours closest to existing annotations until
/// `round(rho_fp × cells in Y)` have been placed, skipping candidates that
/// touch `Y` or an earlier addition and those outside the cell size range.
pub fn inject_fp(image: &RgbImage, label: &BinaryMask, recipe: &NoiseRecipe, stains: &StainMatrix) -> Result<Injection> {
    if image.size() != label.size() {
        return Err(Error::shape("image vs label", image.size(), label.size()));
    }
    recipe.validate()?;
    let size = label.size();
    let cells = extract_contours(label).len();
    let limit = injection_limit(recipe.rho_fp, cells);
    let mut added = BinaryMask::empty(size.width, size.height);
    let mut events = Vec::new();
    if cells > 0 && limit > 0 {
        let candidates = stain_candidates(image, stains, recipe.threshold);
        let annotated: Vec<(f64, f64)> = label
            .bits()
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| {
                let (x, y) = size.coords(i);
                (x as f64, y as f64)
            })
            .collect();
        let mut order: Vec<(f64, usize)> = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| (nearest_sq_distance(c.centroid, &annotated), i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (_, i) in order {
            if events.len() == limit {
                break;
            }
            let c = &candidates[i];
            if c.area < recipe.area_min || c.area > recipe.area_max {
                continue;
            }
            if c.overlaps(label) || c.overlaps(&added) {
                continue;
            }
            c.draw(&mut added);
            events.push(NoiseEvent::new(i, NoiseAction::Add, c));
        }
    }
    Ok(Injection {
        mask: label.or(&added)?,
        added,
        events,
        limit,
        empty_label: cells == 0,
    })
}

fn nearest_sq_distance(p: (f64, f64), points: &[(f64, f64)]) -> f64 {
    points
        .iter()
        .map(|q| (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2))
        .fold(f64::INFINITY, f64::min)
}

/// Keeps a seeded random `floor((1 − missing_ratio) × n)` of the contours.
pub fn remove_fn(mask: &BinaryMask, missing_ratio: f64, seed: u64) -> Result<Removal> {
    if !(0.0..=1.0).contains(&missing_ratio) {
        return Err(Error::InvalidArgument(format!("missing_ratio {missing_ratio} outside [0, 1]")));
    }
    let contours = extract_contours(mask);
    let mut order: Vec<usize> = (0..contours.len()).collect();
    rng::shuffle(&mut rng::seeded(seed), &mut order);
    let kept = keep_count(missing_ratio, contours.len());
    let mut out = BinaryMask::empty(mask.width(), mask.height());
    for &i in &order[..kept] {
        contours[i].draw(&mut out);
    }
    let mut removed: Vec<usize> = order[kept..].to_vec();
    removed.sort_unstable();
    let events = removed
        .into_iter()
        .map(|i| NoiseEvent::new(i, NoiseAction::Remove, &contours[i]))
        .collect();
    Ok(Removal { mask: out, events, kept })
}

/// Noisy label for one patch: omissions drawn from the clean label plus
/// false positives placed against the clean label. Both steps see the clean
/// annotation, so removed cells are never re-added as false positives.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyLabel {
    pub mask: BinaryMask,
    pub events: Vec<NoiseEvent>,
    pub empty_label: bool,
}

pub fn corrupt_label(
    image: &RgbImage,
    clean: &BinaryMask,
    recipe: &NoiseRecipe,
    stains: &StainMatrix,
    patch_index: u64,
) -> Result<NoisyLabel> {
    let seed = rng::indexed_seed(recipe.seed, rng::Stream::Noise, patch_index);
    let removal = remove_fn(clean, recipe.missing_ratio, seed)?;
    let injection = inject_fp(image, clean, recipe, stains)?;
    let mut events = injection.events;
    events.extend(removal.events);
    Ok(NoisyLabel {
        mask: removal.mask.or(&injection.added)?,
        events,
        empty_label: injection.empty_label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noisegen::stain::intensity;

    fn blank(w: usize, h: usize) -> RgbImage {
        RgbImage::filled(w, h, [250, 250, 250])
    }

    fn paint(img: &mut RgbImage, mask: &mut Option<&mut BinaryMask>, x0: usize, y0: usize, side: usize) {
        let stains = StainMatrix::default();
        let rgb = intensity(stains.mix([0.0, 0.6, 0.0]));
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                img.set_pixel(y * img.width() + x, rgb);
                if let Some(m) = mask {
                    m.set(x, y, true);
                }
            }
        }
    }

    fn recipe() -> NoiseRecipe {
        NoiseRecipe {
            threshold: 30,
            rho_fp: 0.5,
            missing_ratio: 0.3,
            area_min: 4,
            area_max: 16,
            seed: 1,
        }
    }

    #[test]
    fn limit_and_keep_rules() {
        assert_eq!(injection_limit(0.5, 6), 3);
        assert_eq!(injection_limit(0.5, 5), 3);
        assert_eq!(keep_count(0.3, 10), 7);
        assert_eq!(keep_count(0.9, 10), 1);
        assert_eq!(keep_count(0.0, 10), 10);
        assert_eq!(keep_count(1.0, 10), 0);
    }

    #[test]
    fn area_bounds_scale_with_side() {
        assert_eq!(default_area_bounds(Size::new(512, 512)), (30, 1500));
        assert_eq!(default_area_bounds(Size::new(64, 64)), (4, 188));
    }

    #[test]
    fn six_cells_get_at_most_three_fps() {
        let mut img = blank(40, 40);
        let mut y = BinaryMask::empty(40, 40);
        for i in 0..6 {
            paint(&mut img, &mut Some(&mut y), 2 + 6 * i, 2, 3);
        }
        for i in 0..6 {
            paint(&mut img, &mut None, 2 + 6 * i, 20, 3);
        }
        let inj = inject_fp(&img, &y, &recipe(), &StainMatrix::default()).unwrap();
        assert_eq!(inj.limit, 3);
        assert_eq!(inj.events.len(), 3);
        assert!(y.is_subset_of(&inj.mask));
        assert_eq!(inj.added.intersection_count(&y).unwrap(), 0);
    }

    #[test]
    fn overlapping_and_oversized_candidates_skipped() {
        let mut img = blank(30, 30);
        let mut y = BinaryMask::empty(30, 30);
        y.set(5, 5, true);
        y.set(20, 20, true);
        // stain blob overlapping the annotation
        paint(&mut img, &mut None, 4, 4, 3);
        // area 25 > area_max 16
        paint(&mut img, &mut None, 10, 10, 5);
        let inj = inject_fp(&img, &y, &recipe(), &StainMatrix::default()).unwrap();
        assert!(inj.events.is_empty());
        assert_eq!(inj.mask, y);
    }

    #[test]
    fn empty_label_injects_nothing() {
        let mut img = blank(10, 10);
        paint(&mut img, &mut None, 2, 2, 3);
        let y = BinaryMask::empty(10, 10);
        let inj = inject_fp(&img, &y, &recipe(), &StainMatrix::default()).unwrap();
        assert!(inj.empty_label);
        assert_eq!(inj.limit, 0);
        assert_eq!(inj.mask, y);
    }

    #[test]
    fn nearest_candidate_wins() {
        let mut img = blank(40, 10);
        let mut y = BinaryMask::empty(40, 10);
        paint(&mut img, &mut Some(&mut y), 1, 1, 3);
        paint(&mut img, &mut None, 30, 1, 3);
        paint(&mut img, &mut None, 8, 1, 3);
        let mut r = recipe();
        r.rho_fp = 1.0;
        let inj = inject_fp(&img, &y, &r, &StainMatrix::default()).unwrap();
        assert_eq!(inj.events.len(), 1);
        assert_eq!(inj.events[0].centroid, (9.0, 2.0));
    }

    fn ten_dots() -> BinaryMask {
        let mut m = BinaryMask::empty(30, 3);
        for i in 0..10 {
            m.set(3 * i, 1, true);
        }
        m
    }

    #[test]
    fn removal_keeps_floor_share() {
        let m = ten_dots();
        let r = remove_fn(&m, 0.3, 9).unwrap();
        assert_eq!(r.kept, 7);
        assert_eq!(extract_contours(&r.mask).len(), 7);
        assert_eq!(r.events.len(), 3);
        assert!(r.mask.is_subset_of(&m));
        assert_eq!(remove_fn(&m, 0.0, 9).unwrap().mask, m);
        assert_eq!(remove_fn(&m, 1.0, 9).unwrap().mask.count(), 0);
        assert!(remove_fn(&m, 1.5, 9).is_err());
    }

    #[test]
    fn removal_depends_on_seed() {
        let m = ten_dots();
        let sets: std::collections::HashSet<Vec<bool>> =
            (0..20).map(|s| remove_fn(&m, 0.5, s).unwrap().mask.bits().to_vec()).collect();
        assert!(sets.len() > 1);
        assert_eq!(remove_fn(&m, 0.5, 4).unwrap(), remove_fn(&m, 0.5, 4).unwrap());
    }
}
