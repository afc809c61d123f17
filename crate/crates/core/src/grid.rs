//! Dense 2-D and 3-D real grids shared by every stage of the pipeline.
//!
//! Pixels are addressed row-major: the flattened index of `(x, y)` is
//! `y * width + x`. Multi-channel maps store each channel as a contiguous
//! plane, so channel `ch` of pixel `i` lives at `ch * width * height + i`.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

/// Norms below this are treated as degenerate; cosine against them is 0.
pub const EPS_NORM: f64 = 1e-12;

/// Confidence values are kept this far inside (0, 1).
const C_EDGE: f64 = f64::EPSILON / 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Size {
    pub width: usize,
    pub height: usize,
}

impl Size {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    pub fn area(self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn index(self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn coords(self, index: usize) -> (usize, usize) {
        (index % self.width, index / self.width)
    }
}

impl fmt::Display for Size {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// A real scalar field over a `W x H` patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    size: Size,
    values: Vec<f64>,
}

impl PixelGrid {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width >= 1 && height >= 1, "grid must be at least 1x1");
        Self {
            size: Size::new(width, height),
            values: vec![value; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn from_vec(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::shape("pixel grid", format!("{width}x{height}"), values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pixel grid"));
        }
        Ok(Self {
            size: Size::new(width, height),
            values,
        })
    }

    /// Builds a grid from rows given top to bottom.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Self::from_vec(width, height, rows.concat())
    }

    pub fn size(&self) -> Size {
        self.size
    }

    pub fn width(&self) -> usize {
        self.size.width
    }

    pub fn height(&self) -> usize {
        self.size.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[self.size.index(x, y)]
    }

    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        let i = self.size.index(x, y);
        self.values[i] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            size: self.size,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        ensure_same_size("pixel grids", self.size, other.size)?;
        Ok(Self {
            size: self.size,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Pixels `>= threshold` become foreground.
    pub fn threshold(&self, threshold: f64) -> BinaryMask {
        BinaryMask {
            size: self.size,
            bits: self.values.iter().map(|&v| v >= threshold).collect(),
        }
    }
}

/// A pixel grid restricted to {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    size: Size,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        assert!(width >= 1 && height >= 1, "mask must be at least 1x1");
        Self {
            size: Size::new(width, height),
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        let mut m = Self::empty(width, height);
        m.bits.fill(true);
        m
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || bits.len() != width * height {
            return Err(Error::shape("binary mask", format!("{width}x{height}"), bits.len()));
        }
        Ok(Self {
            size: Size::new(width, height),
            bits,
        })
    }

    /// Builds a mask from 0/1 rows given top to bottom.
    pub fn from_rows(rows: &[&[u8]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        let mut bits = Vec::with_capacity(width * height);
        for row in rows {
            if row.len() != width {
                return Err(Error::InvalidArgument("ragged rows".into()));
            }
            for &v in *row {
                match v {
                    0 => bits.push(false),
                    1 => bits.push(true),
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "mask value {other} is not 0 or 1"
                        )))
                    }
                }
            }
        }
        Self::from_bits(width, height, bits)
    }

    pub fn size(&self) -> Size {
        self.size
    }

    pub fn width(&self) -> usize {
        self.size.width
    }

    pub fn height(&self) -> usize {
        self.size.height
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[self.size.index(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        let i = self.size.index(x, y);
        self.bits[i] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    pub fn to_grid(&self) -> PixelGrid {
        PixelGrid {
            size: self.size,
            values: self.bits.iter().map(|&b| f64::from(u8::from(b))).collect(),
        }
    }

    fn combine(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Result<Self> {
        ensure_same_size("binary masks", self.size, other.size)?;
        Ok(Self {
            size: self.size,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        self.combine(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Self) -> Result<Self> {
        self.combine(other, |a, b| a || b)
    }

    /// `self ∧ ¬other`.
    pub fn and_not(&self, other: &Self) -> Result<Self> {
        self.combine(other, |a, b| a && !b)
    }

    pub fn not(&self) -> Self {
        Self {
            size: self.size,
            bits: self.bits.iter().map(|&b| !b).collect(),
        }
    }

    pub fn intersection_count(&self, other: &Self) -> Result<usize> {
        ensure_same_size("binary masks", self.size, other.size)?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a && b).count())
    }

    /// True when every foreground pixel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.size == other.size && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Chebyshev dilation by `radius` pixels (square structuring element).
    pub fn dilate(&self, radius: usize) -> Self {
        let Size { width, height } = self.size;
        let r = radius as isize;
        let mut out = Self::empty(width, height);
        for y in 0..height {
            for x in 0..width {
                if !self.get(x, y) {
                    continue;
                }
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (nx, ny) = (x as isize + dx, y as isize + dy);
                        if nx >= 0 && ny >= 0 && (nx as usize) < width && (ny as usize) < height {
                            out.set(nx as usize, ny as usize, true);
                        }
                    }
                }
            }
        }
        out
    }
}

/// 8-bit RGB image, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RgbImage {
    size: Size,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("empty image".into()));
        }
        if data.len() != 3 * width * height {
            return Err(Error::LengthMismatch(data.len(), 3 * width * height));
        }
        Ok(Self {
            size: Size::new(width, height),
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(3 * width * height).collect();
        Self {
            size: Size::new(width, height),
            data,
        }
    }

    pub fn size(&self) -> Size {
        self.size
    }

    pub fn width(&self) -> usize {
        self.size.width
    }

    pub fn height(&self) -> usize {
        self.size.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn pixel(&self, index: usize) -> [u8; 3] {
        [self.data[3 * index], self.data[3 * index + 1], self.data[3 * index + 2]]
    }

    pub fn set_pixel(&mut self, index: usize, rgb: [u8; 3]) {
        self.data[3 * index..3 * index + 3].copy_from_slice(&rgb);
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }
}

/// A `Ch x W x H` real field stored channel-planar.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    size: Size,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, width: usize, height: usize) -> Self {
        assert!(channels >= 1 && width >= 1 && height >= 1, "empty feature map");
        Self {
            channels,
            size: Size::new(width, height),
            values: vec![0.0; channels * width * height],
        }
    }

    pub fn from_vec(channels: usize, width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || width == 0 || height == 0 || values.len() != channels * width * height {
            return Err(Error::shape(
                "feature map",
                format!("{channels}x{width}x{height}"),
                values.len(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map"));
        }
        Ok(Self {
            channels,
            size: Size::new(width, height),
            values,
        })
    }

    /// Every pixel carries the same vector.
    pub fn constant(vector: &[f64], width: usize, height: usize) -> Self {
        let n = width * height;
        let mut values = Vec::with_capacity(vector.len() * n);
        for &v in vector {
            values.extend(std::iter::repeat_n(v, n));
        }
        Self {
            channels: vector.len(),
            size: Size::new(width, height),
            values,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> Size {
        self.size
    }

    pub fn width(&self) -> usize {
        self.size.width
    }

    pub fn height(&self) -> usize {
        self.size.height
    }

    pub fn plane(&self, ch: usize) -> &[f64] {
        let n = self.size.area();
        &self.values[ch * n..(ch + 1) * n]
    }

    pub fn plane_mut(&mut self, ch: usize) -> &mut [f64] {
        let n = self.size.area();
        &mut self.values[ch * n..(ch + 1) * n]
    }

    #[inline]
    pub fn at(&self, ch: usize, index: usize) -> f64 {
        self.values[ch * self.size.area() + index]
    }

    #[inline]
    pub fn at_mut(&mut self, ch: usize, index: usize) -> &mut f64 {
        let n = self.size.area();
        &mut self.values[ch * n + index]
    }

    /// The channel vector at one flattened pixel index.
    pub fn pixel(&self, index: usize) -> FeatureVector {
        FeatureVector((0..self.channels).map(|ch| self.at(ch, index)).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            channels: self.channels,
            size: self.size,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

/// A `Ch`-dimensional feature vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl Deref for FeatureVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for FeatureVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for FeatureVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Two-channel prediction logits: channel 0 background, channel 1 foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    size: Size,
    background: Vec<f64>,
    foreground: Vec<f64>,
}

impl Logits {
    pub fn new(width: usize, height: usize, background: Vec<f64>, foreground: Vec<f64>) -> Result<Self> {
        let n = width * height;
        if n == 0 || background.len() != n || foreground.len() != n {
            return Err(Error::shape(
                "logits",
                format!("{width}x{height}"),
                format!("{}+{}", background.len(), foreground.len()),
            ));
        }
        Ok(Self {
            size: Size::new(width, height),
            background,
            foreground,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            size: Size::new(width, height),
            background: vec![0.0; n],
            foreground: vec![0.0; n],
        }
    }

    pub fn size(&self) -> Size {
        self.size
    }

    pub fn background(&self) -> &[f64] {
        &self.background
    }

    pub fn foreground(&self) -> &[f64] {
        &self.foreground
    }

    pub fn background_mut(&mut self) -> &mut [f64] {
        &mut self.background
    }

    pub fn foreground_mut(&mut self) -> &mut [f64] {
        &mut self.foreground
    }
}

pub(crate) fn ensure_same_size(what: &'static str, a: Size, b: Size) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::shape(what, a, b))
    }
}

/// Foreground probability per pixel, `exp(fg) / (exp(fg) + exp(bg))`.
///
/// Evaluated with the per-pixel max subtracted; results are clamped to stay
/// strictly inside (0, 1) even when one logit dominates.
pub fn softmax_foreground(logits: &Logits) -> Result<PixelGrid> {
    let mut values = Vec::with_capacity(logits.foreground.len());
    for (i, (&bg, &fg)) in logits.background.iter().zip(&logits.foreground).enumerate() {
        if !bg.is_finite() || !fg.is_finite() {
            return Err(Error::InvalidLogits(i));
        }
        let m = bg.max(fg);
        let eb = (bg - m).exp();
        let ef = (fg - m).exp();
        values.push((ef / (eb + ef)).clamp(C_EDGE, 1.0 - C_EDGE));
    }
    Ok(PixelGrid {
        size: logits.size,
        values,
    })
}

/// Cosine similarity; 0 when either vector has a degenerate norm.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::LengthMismatch(u.len(), v.len()));
    }
    Ok(cosine_unchecked(u, v))
}

#[inline]
pub(crate) fn cosine_unchecked(u: &[f64], v: &[f64]) -> f64 {
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (&a, &b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let (nu, nv) = (nu.sqrt(), nv.sqrt());
    if nu < EPS_NORM || nv < EPS_NORM {
        return 0.0;
    }
    (dot / (nu * nv)).clamp(-1.0, 1.0)
}

/// Flattened indices of the `k` largest values, highest first; ties go to
/// the lower index.
pub fn top_k_indices(grid: &PixelGrid, k: usize) -> Result<Vec<usize>> {
    top_k_of_slice(grid.as_slice(), k)
}

pub(crate) fn top_k_of_slice(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::KOutOfRange {
            k,
            max: scores.len(),
        });
    }
    let order = |&a: &usize, &b: &usize| -> Ordering {
        scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
    };
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(order);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits1(bg: f64, fg: f64) -> Logits {
        Logits::new(1, 1, vec![bg], vec![fg]).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let c = softmax_foreground(&logits1(0.0, 0.0)).unwrap();
        assert_eq!(c.get(0, 0), 0.5);
        let c = softmax_foreground(&logits1(0.0, 3f64.ln())).unwrap();
        assert!((c.get(0, 0) - 0.75).abs() < 1e-15);
        let c = softmax_foreground(&logits1(1000.0, 1000.0)).unwrap();
        assert_eq!(c.get(0, 0), 0.5);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax_foreground(&logits1(f64::NAN, 0.0)),
            Err(Error::InvalidLogits(0))
        ));
        assert!(softmax_foreground(&logits1(0.0, f64::INFINITY)).is_err());
    }

    #[test]
    fn softmax_stays_open_interval_at_extremes() {
        for (bg, fg) in [(0.0, 800.0), (800.0, 0.0), (-1e300, 1e300)] {
            let c = softmax_foreground(&logits1(bg, fg)).unwrap().get(0, 0);
            assert!(c > 0.0 && c < 1.0, "{c}");
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(cosine(&[1.0], &[1.0, 2.0]), Err(Error::LengthMismatch(1, 2))));
    }

    #[test]
    fn top_k_examples() {
        let g = PixelGrid::from_rows(&[&[0.9, 0.1], &[0.5, 0.9]]).unwrap();
        assert_eq!(top_k_indices(&g, 2).unwrap(), vec![0, 3]);
        assert_eq!(top_k_indices(&g, 4).unwrap(), vec![0, 3, 2, 1]);
        let flat = PixelGrid::filled(3, 3, 0.25);
        assert_eq!(top_k_indices(&flat, 3).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn top_k_range_checked() {
        let g = PixelGrid::zeros(2, 2);
        assert!(matches!(top_k_indices(&g, 0), Err(Error::KOutOfRange { .. })));
        assert!(matches!(top_k_indices(&g, 5), Err(Error::KOutOfRange { k: 5, max: 4 })));
    }

    #[test]
    fn row_major_addressing() {
        let s = Size::new(5, 3);
        assert_eq!(s.index(2, 1), 7);
        assert_eq!(s.coords(7), (2, 1));
    }

    #[test]
    fn mask_from_rows_rejects_non_binary() {
        assert!(BinaryMask::from_rows(&[&[0, 2]]).is_err());
    }

    #[test]
    fn dilation_grows_by_radius() {
        let mut m = BinaryMask::empty(7, 7);
        m.set(3, 3, true);
        assert_eq!(m.dilate(2).count(), 25);
        assert_eq!(m.dilate(0), m);
    }
}
