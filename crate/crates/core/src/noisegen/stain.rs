//! Colour deconvolution into stain concentrations.

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, PixelGrid, RgbImage};

/// Optical density of a saturated 8-bit channel, `-log10(1/256)`.
pub const MAX_OD: f64 = 2.408_239_965_311_849_3;

/// Rows are unit optical-density vectors of each stain in RGB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StainMatrix {
    rows: [[f64; 3]; 3],
    inverse: [[f64; 3]; 3],
}

pub const HEMATOXYLIN: [f64; 3] = [0.650, 0.704, 0.286];
pub const PAS: [f64; 3] = [0.175, 0.972, 0.154];

/// Index of the PAS-analog channel in [`StainMatrix::hematoxylin_pas`].
pub const PAS_CHANNEL: usize = 1;

impl StainMatrix {
    /// Rows are normalised to unit length.
    pub fn new(rows: [[f64; 3]; 3]) -> Result<Self> {
        let mut unit = rows;
        for row in &mut unit {
            let n = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
            if !(n.is_finite() && n > 0.0) {
                return Err(Error::SingularMatrix);
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        let inverse = invert(&unit).ok_or(Error::SingularMatrix)?;
        Ok(Self { rows: unit, inverse })
    }

    /// Hematoxylin, PAS and their cross product as the residual stain.
    pub fn hematoxylin_pas() -> Self {
        let (h, p) = (HEMATOXYLIN, PAS);
        let residual = [
            h[1] * p[2] - h[2] * p[1],
            h[2] * p[0] - h[0] * p[2],
            h[0] * p[1] - h[1] * p[0],
        ];
        Self::new([h, p, residual]).expect("default stains are independent")
    }

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.rows
    }

    /// Unclamped concentrations `od · M⁻¹`.
    pub fn unmix(&self, od: [f64; 3]) -> [f64; 3] {
        let m = &self.inverse;
        std::array::from_fn(|j| od[0] * m[0][j] + od[1] * m[1][j] + od[2] * m[2][j])
    }

    /// Optical density `conc · M`.
    pub fn mix(&self, conc: [f64; 3]) -> [f64; 3] {
        let m = &self.rows;
        std::array::from_fn(|j| conc[0] * m[0][j] + conc[1] * m[1][j] + conc[2] * m[2][j])
    }
}

impl Default for StainMatrix {
    fn default() -> Self {
        Self::hematoxylin_pas()
    }
}

fn invert(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let cof = [
        [c(1, 1, 2, 2), -c(1, 0, 2, 2), c(1, 0, 2, 1)],
        [-c(0, 1, 2, 2), c(0, 0, 2, 2), -c(0, 0, 2, 1)],
        [c(0, 1, 1, 2), -c(0, 0, 1, 2), c(0, 0, 1, 1)],
    ];
    let det = m[0][0] * cof[0][0] + m[0][1] * cof[0][1] + m[0][2] * cof[0][2];
    if !det.is_finite() || det.abs() < 1e-9 {
        return None;
    }
    // inverse = adjugate / det, adjugate = cofactorᵀ
    Some(std::array::from_fn(|i| std::array::from_fn(|j| cof[j][i] / det)))
}

pub fn optical_density(rgb: [u8; 3]) -> [f64; 3] {
    rgb.map(|v| -((f64::from(v) + 1.0) / 256.0).log10())
}

/// Inverse of [`optical_density`], rounded and clamped to 8 bits.
pub fn intensity(od: [f64; 3]) -> [u8; 3] {
    od.map(|d| (256.0 * 10f64.powf(-d) - 1.0).round().clamp(0.0, 255.0) as u8)
}

/// Non-negative stain concentrations, one grid per stain.
pub fn color_deconvolve(image: &RgbImage, stains: &StainMatrix) -> [PixelGrid; 3] {
    let (w, h) = (image.width(), image.height());
    let mut planes: [Vec<f64>; 3] = std::array::from_fn(|_| Vec::with_capacity(w * h));
    for i in 0..w * h {
        let conc = stains.unmix(optical_density(image.pixel(i)));
        for (plane, c) in planes.iter_mut().zip(conc) {
            plane.push(c.max(0.0));
        }
    }
    planes.map(|p| PixelGrid::from_vec(w, h, p).expect("finite concentrations"))
}

/// Concentration rescaled to an 8-bit intensity scale, saturating at 255.
pub fn to_8bit(concentration: &PixelGrid) -> PixelGrid {
    concentration.map(|c| (255.0 * c / MAX_OD).min(255.0))
}

/// Foreground where `channel >= t`.
pub fn threshold_mask(channel: &PixelGrid, t: f64) -> BinaryMask {
    channel.threshold(t)
}
