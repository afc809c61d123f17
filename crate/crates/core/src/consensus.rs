//! Consensus Matrix and feature distillation.
//!
//! The model's confidence map `c` and the annotator mask `y` split every
//! pixel into one of four classes: consensus positive (both say cell),
//! consensus negative (both say background), model-positive disagreement and
//! human-positive disagreement. The highest-agreement pixels give a
//! representative cell feature; the strongest disagreements are pooled into
//! a noise feature, weighted towards candidates least similar to the cell
//! feature.
//!
//! Index selections are constants of the current step; every differentiable
//! path (gather, mean, cosine, softmax, weighted sum) has a matching
//! `*_backward` below.

use crate::error::{Error, Result};
use crate::grid::{
    cosine_unchecked, ensure_same_size, top_k_of_slice, BinaryMask, FeatureMap, FeatureVector,
    PixelGrid, Size, EPS_NORM,
};

pub const DEFAULT_TAU: f64 = 0.5;

/// Spreads below this collapse min-max normalisation to the constant 0.5.
const EPS_RANGE: f64 = 1e-12;

/// `max(16, round(1% of pixels))`, rounded up to even and capped at the
/// largest even count that fits the patch.
pub fn default_k(size: Size) -> usize {
    let area = size.area();
    let mut k = 16usize.max((0.01 * area as f64).round() as usize);
    k += k % 2;
    let cap = area - area % 2;
    k.min(cap).max(2)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsensusPartition {
    pub cp: BinaryMask,
    pub cn: BinaryMask,
    pub dm: BinaryMask,
    pub dh: BinaryMask,
}

impl ConsensusPartition {
    pub fn size(&self) -> Size {
        self.cp.size()
    }
}

pub fn consensus_partition(c: &PixelGrid, y: &BinaryMask, tau: f64) -> Result<ConsensusPartition> {
    ensure_same_size("confidence vs annotation", c.size(), y.size())?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("tau {tau} outside (0, 1)")));
    }
    let Size { width, height } = c.size();
    let mut cp = BinaryMask::empty(width, height);
    let mut cn = cp.clone();
    let mut dm = cp.clone();
    let mut dh = cp.clone();
    for (i, (&ci, &yi)) in c.as_slice().iter().zip(y.bits()).enumerate() {
        let model_pos = ci >= tau;
        let target = match (model_pos, yi) {
            (true, true) => &mut cp,
            (false, false) => &mut cn,
            (true, false) => &mut dm,
            (false, true) => &mut dh,
        };
        target.bits_mut()[i] = true;
    }
    Ok(ConsensusPartition { cp, cn, dm, dh })
}

/// Channel-wise mean of `f_d` over the given pixels.
pub fn gather_mean(f_d: &FeatureMap, indices: &[usize]) -> FeatureVector {
    let k = indices.len() as f64;
    (0..f_d.channels())
        .map(|ch| {
            let plane = f_d.plane(ch);
            indices.iter().map(|&i| plane[i]).sum::<f64>() / k
        })
        .collect::<Vec<_>>()
        .into()
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellDistillation {
    Consensus {
        feature: FeatureVector,
        indices: Vec<usize>,
    },
    /// No pixel has positive agreement score; distillation is skipped.
    NoConsensus,
}

/// Top-`k` pixels by `a_CP = c · y` and the mean feature over them.
pub fn distill_cell_feature(
    f_d: &FeatureMap,
    c: &PixelGrid,
    y: &BinaryMask,
    k: usize,
) -> Result<CellDistillation> {
    ensure_same_size("confidence vs annotation", c.size(), y.size())?;
    ensure_same_size("features vs confidence", f_d.size(), c.size())?;
    let scores: Vec<f64> = c
        .as_slice()
        .iter()
        .zip(y.bits())
        .map(|(&ci, &yi)| if yi { ci } else { 0.0 })
        .collect();
    let indices = top_k_of_slice(&scores, k)?;
    if scores[indices[0]] <= 0.0 {
        return Ok(CellDistillation::NoConsensus);
    }
    let feature = gather_mean(f_d, &indices);
    Ok(CellDistillation::Consensus { feature, indices })
}

/// Top `k/2` pixels by `a_DM = c · (1 - y)` and by `a_DH = (1 - c) · y`.
pub fn disagreement_indices(
    c: &PixelGrid,
    y: &BinaryMask,
    k: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    ensure_same_size("confidence vs annotation", c.size(), y.size())?;
    if k % 2 == 1 {
        return Err(Error::OddK(k));
    }
    if k < 2 || k > c.len() {
        return Err(Error::KOutOfRange { k, max: c.len() });
    }
    let mut a_dm = Vec::with_capacity(c.len());
    let mut a_dh = Vec::with_capacity(c.len());
    for (&ci, &yi) in c.as_slice().iter().zip(y.bits()) {
        a_dm.push(if yi { 0.0 } else { ci });
        a_dh.push(if yi { 1.0 - ci } else { 0.0 });
    }
    let dm = top_k_of_slice(&a_dm, k / 2)?;
    let dh = top_k_of_slice(&a_dh, k / 2)?;
    // Positive scores have disjoint supports; only zero-score fillers may repeat.
    debug_assert!(dm
        .iter()
        .filter(|&&i| a_dm[i] > 0.0)
        .all(|i| !dh.iter().any(|j| j == i && a_dh[*j] > 0.0)));
    Ok((dm, dh))
}

/// Pooled noise feature and the intermediates needed for its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDistillation {
    pub f_noise: FeatureVector,
    pub weights: Vec<f64>,
    /// Cosine of each gathered vector against the cell feature.
    pub s_cell: Vec<f64>,
    /// `s_cell` min-max rescaled to [0, 1].
    pub normalized: Vec<f64>,
    /// Gathered candidate vectors, DM picks first.
    pub candidates: Vec<FeatureVector>,
    argmin: usize,
    argmax: usize,
    range: f64,
}

/// Min-max rescale; a constant input maps to 0.5 everywhere.
pub fn min_max_normalize(values: &[f64]) -> (Vec<f64>, usize, usize, f64) {
    let mut lo = 0;
    let mut hi = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[lo] {
            lo = i;
        }
        if v > values[hi] {
            hi = i;
        }
    }
    let range = values[hi] - values[lo];
    if range <= EPS_RANGE {
        return (vec![0.5; values.len()], lo, hi, 0.0);
    }
    let normalized = values.iter().map(|v| (v - values[lo]) / range).collect();
    (normalized, lo, hi, range)
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn distill_noise_feature(
    f_d: &FeatureMap,
    dm_indices: &[usize],
    dh_indices: &[usize],
    f_cell: &[f64],
) -> Result<NoiseDistillation> {
    if dm_indices.is_empty() || dh_indices.is_empty() {
        return Err(Error::EmptyIndices);
    }
    if f_cell.len() != f_d.channels() {
        return Err(Error::LengthMismatch(f_cell.len(), f_d.channels()));
    }
    let n = f_d.size().area();
    if let Some(&bad) = dm_indices.iter().chain(dh_indices).find(|&&i| i >= n) {
        return Err(Error::InvalidArgument(format!("pixel index {bad} out of range")));
    }
    let candidates: Vec<FeatureVector> = dm_indices
        .iter()
        .chain(dh_indices)
        .map(|&i| f_d.pixel(i))
        .collect();
    let s_cell: Vec<f64> = candidates.iter().map(|v| cosine_unchecked(v, f_cell)).collect();
    let (normalized, argmin, argmax, range) = min_max_normalize(&s_cell);
    let logits: Vec<f64> = normalized.iter().map(|v| 1.0 - v).collect();
    let weights = softmax(&logits);
    let mut f_noise = vec![0.0; f_cell.len()];
    for (w, v) in weights.iter().zip(&candidates) {
        for (acc, x) in f_noise.iter_mut().zip(v.iter()) {
            *acc += w * x;
        }
    }
    Ok(NoiseDistillation {
        f_noise: f_noise.into(),
        weights,
        s_cell,
        normalized,
        candidates,
        argmin,
        argmax,
        range,
    })
}

/// Gradients of a scalar loss with respect to the candidates and `f_cell`,
/// given its gradient with respect to `f_noise`.
pub fn noise_feature_backward(
    nd: &NoiseDistillation,
    f_cell: &[f64],
    grad_f_noise: &[f64],
) -> (Vec<FeatureVector>, FeatureVector) {
    let ch = f_cell.len();
    let mut grad_candidates: Vec<FeatureVector> = nd
        .weights
        .iter()
        .map(|&w| grad_f_noise.iter().map(|g| w * g).collect::<Vec<_>>().into())
        .collect();
    let mut grad_cell = vec![0.0; ch];
    if nd.range == 0.0 {
        return (grad_candidates, grad_cell.into());
    }

    // through f_noise = Σ w_i v_i into the softmax logits z_i = 1 - n_i
    let d_w: Vec<f64> = nd.candidates.iter().map(|v| dot(v, grad_f_noise)).collect();
    let mean: f64 = nd.weights.iter().zip(&d_w).map(|(w, d)| w * d).sum();
    let d_n: Vec<f64> = nd
        .weights
        .iter()
        .zip(&d_w)
        .map(|(w, d)| -(w * (d - mean)))
        .collect();

    // through min-max normalisation
    let r = nd.range;
    let total: f64 = d_n.iter().sum();
    let weighted: f64 = d_n.iter().zip(&nd.normalized).map(|(d, n)| d * n).sum();
    let mut d_s: Vec<f64> = d_n.iter().map(|d| d / r).collect();
    d_s[nd.argmin] += (weighted - total) / r;
    d_s[nd.argmax] -= weighted / r;

    for ((v, g), ds) in nd.candidates.iter().zip(grad_candidates.iter_mut()).zip(&d_s) {
        if *ds == 0.0 {
            continue;
        }
        let (du, dv) = cosine_backward(v, f_cell);
        for c in 0..ch {
            g[c] += ds * du[c];
            grad_cell[c] += ds * dv[c];
        }
    }
    (grad_candidates, grad_cell.into())
}

/// Partial derivatives of `cosine(u, v)`; zero when either norm is degenerate.
pub fn cosine_backward(u: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu < EPS_NORM || nv < EPS_NORM {
        return (vec![0.0; u.len()], vec![0.0; v.len()]);
    }
    let cos = dot(u, v) / (nu * nv);
    let du = u
        .iter()
        .zip(v)
        .map(|(a, b)| b / (nu * nv) - cos * a / (nu * nu))
        .collect();
    let dv = u
        .iter()
        .zip(v)
        .map(|(a, b)| a / (nu * nv) - cos * b / (nv * nv))
        .collect();
    (du, dv)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-pixel cosine of `f_d` against the cell and noise features.
pub fn similarity_maps(
    f_d: &FeatureMap,
    f_cell: &[f64],
    f_noise: &[f64],
) -> Result<(PixelGrid, PixelGrid)> {
    for v in [f_cell, f_noise] {
        if v.len() != f_d.channels() {
            return Err(Error::LengthMismatch(v.len(), f_d.channels()));
        }
    }
    let Size { width, height } = f_d.size();
    let n = width * height;
    let nc = f_cell.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = f_noise.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut dot_c = vec![0.0; n];
    let mut dot_n = vec![0.0; n];
    let mut sq = vec![0.0; n];
    for ch in 0..f_d.channels() {
        let plane = f_d.plane(ch);
        for i in 0..n {
            let x = plane[i];
            dot_c[i] += x * f_cell[ch];
            dot_n[i] += x * f_noise[ch];
            sq[i] += x * x;
        }
    }
    let sim = |dots: &[f64], other: f64| -> Vec<f64> {
        dots.iter()
            .zip(&sq)
            .map(|(&d, &s)| {
                let nf = s.sqrt();
                if nf < EPS_NORM || other < EPS_NORM {
                    0.0
                } else {
                    (d / (nf * other)).clamp(-1.0, 1.0)
                }
            })
            .collect()
    };
    Ok((
        PixelGrid::from_vec(width, height, sim(&dot_c, nc))?,
        PixelGrid::from_vec(width, height, sim(&dot_n, nn))?,
    ))
}

/// Everything distillation produces for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DistilledFeatures {
    pub f_cell: FeatureVector,
    pub cell_indices: Vec<usize>,
    pub dm_indices: Vec<usize>,
    pub dh_indices: Vec<usize>,
    pub noise: NoiseDistillation,
}

impl DistilledFeatures {
    pub fn f_noise(&self) -> &FeatureVector {
        &self.noise.f_noise
    }

    pub fn noise_weights(&self) -> &[f64] {
        &self.noise.weights
    }

    /// DM picks followed by DH picks, in candidate order.
    pub fn noise_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.dm_indices.iter().chain(&self.dh_indices).copied()
    }
}

/// Runs cell and noise distillation; `None` when there is no consensus.
pub fn distill(
    f_d: &FeatureMap,
    c: &PixelGrid,
    y: &BinaryMask,
    k: usize,
) -> Result<Option<DistilledFeatures>> {
    let (f_cell, cell_indices) = match distill_cell_feature(f_d, c, y, k)? {
        CellDistillation::Consensus { feature, indices } => (feature, indices),
        CellDistillation::NoConsensus => return Ok(None),
    };
    let (dm_indices, dh_indices) = disagreement_indices(c, y, k)?;
    let noise = distill_noise_feature(f_d, &dm_indices, &dh_indices, &f_cell)?;
    Ok(Some(DistilledFeatures {
        f_cell,
        cell_indices,
        dm_indices,
        dh_indices,
        noise,
    }))
}

/// Routes gradients on `f_cell` and `f_noise` back onto the feature map.
pub fn distill_backward(
    df: &DistilledFeatures,
    grad_f_cell: &[f64],
    grad_f_noise: &[f64],
    grad_f_d: &mut FeatureMap,
) {
    let (grad_candidates, grad_cell_via_noise) =
        noise_feature_backward(&df.noise, &df.f_cell, grad_f_noise);
    for (i, g) in df.noise_indices().zip(&grad_candidates) {
        for (ch, gv) in g.iter().enumerate() {
            *grad_f_d.at_mut(ch, i) += gv;
        }
    }
    let k = df.cell_indices.len() as f64;
    for ch in 0..grad_f_d.channels() {
        let g = (grad_f_cell[ch] + grad_cell_via_noise[ch]) / k;
        for &i in &df.cell_indices {
            *grad_f_d.at_mut(ch, i) += g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&[u8]]) -> BinaryMask {
        BinaryMask::from_rows(rows).unwrap()
    }

    fn grid(rows: &[&[f64]]) -> PixelGrid {
        PixelGrid::from_rows(rows).unwrap()
    }

    #[test]
    fn partition_example() {
        let c = grid(&[&[0.9, 0.2], &[0.6, 0.4]]);
        let y = mask(&[&[1, 0], &[0, 1]]);
        let p = consensus_partition(&c, &y, 0.5).unwrap();
        assert_eq!(p.cp, mask(&[&[1, 0], &[0, 0]]));
        assert_eq!(p.cn, mask(&[&[0, 1], &[0, 0]]));
        assert_eq!(p.dm, mask(&[&[0, 0], &[1, 0]]));
        assert_eq!(p.dh, mask(&[&[0, 0], &[0, 1]]));
    }

    #[test]
    fn partition_full_agreement_and_full_dm() {
        let c = PixelGrid::filled(3, 2, 0.8);
        let p = consensus_partition(&c, &BinaryMask::full(3, 2), 0.5).unwrap();
        assert_eq!(p.cp.count(), 6);
        assert_eq!(p.cn.count() + p.dm.count() + p.dh.count(), 0);
        let p = consensus_partition(&c, &BinaryMask::empty(3, 2), 0.5).unwrap();
        assert_eq!(p.dm.count(), 6);
    }

    #[test]
    fn partition_rejects_shape_mismatch() {
        let c = PixelGrid::filled(3, 2, 0.8);
        assert!(matches!(
            consensus_partition(&c, &BinaryMask::full(2, 3), 0.5),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    fn two_channel_map() -> FeatureMap {
        // 2x2, channel 0 then channel 1
        FeatureMap::from_vec(2, 2, 2, vec![1.0, 0.3, 0.2, 0.0, 0.0, 0.4, 0.5, 1.0]).unwrap()
    }

    #[test]
    fn cell_feature_example() {
        let f = two_channel_map();
        let c = grid(&[&[0.9, 0.2], &[0.3, 0.8]]);
        let y = mask(&[&[1, 0], &[0, 1]]);
        match distill_cell_feature(&f, &c, &y, 2).unwrap() {
            CellDistillation::Consensus { feature, indices } => {
                assert_eq!(indices, vec![0, 3]);
                assert_eq!(feature.0, vec![0.5, 0.5]);
            }
            other => panic!("{other:?}"),
        }
        match distill_cell_feature(&f, &c, &y, 1).unwrap() {
            CellDistillation::Consensus { feature, .. } => assert_eq!(feature.0, vec![1.0, 0.0]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn no_consensus_when_labels_empty() {
        let f = two_channel_map();
        let c = PixelGrid::filled(2, 2, 0.7);
        assert_eq!(
            distill_cell_feature(&f, &c, &BinaryMask::empty(2, 2), 2).unwrap(),
            CellDistillation::NoConsensus
        );
    }

    #[test]
    fn disagreement_example() {
        let c = grid(&[&[0.9, 0.8], &[0.1, 0.2]]);
        let y = mask(&[&[0, 0], &[1, 1]]);
        let (dm, dh) = disagreement_indices(&c, &y, 2).unwrap();
        assert_eq!(dm, vec![0]);
        assert_eq!(dh, vec![2]);
    }

    #[test]
    fn disagreement_zero_scores_fall_back_to_index_order() {
        let c = PixelGrid::filled(3, 3, 1.0);
        let y = BinaryMask::full(3, 3);
        let (dm, dh) = disagreement_indices(&c, &y, 4).unwrap();
        assert_eq!(dm, vec![0, 1]);
        assert_eq!(dh, vec![0, 1]);
    }

    #[test]
    fn disagreement_full_k_takes_top_half_of_confidence() {
        let c = grid(&[&[0.1, 0.7], &[0.4, 0.9]]);
        let (dm, _) = disagreement_indices(&c, &BinaryMask::empty(2, 2), 4).unwrap();
        assert_eq!(dm, vec![3, 1]);
    }

    #[test]
    fn odd_k_rejected() {
        let c = PixelGrid::filled(2, 2, 0.5);
        assert!(matches!(
            disagreement_indices(&c, &BinaryMask::empty(2, 2), 3),
            Err(Error::OddK(3))
        ));
    }

    #[test]
    fn noise_feature_example() {
        // candidates (1,0) and (0,1) against f_cell (1,0)
        let f = FeatureMap::from_vec(2, 2, 1, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let nd = distill_noise_feature(&f, &[0], &[1], &[1.0, 0.0]).unwrap();
        assert_eq!(nd.s_cell, vec![1.0, 0.0]);
        assert_eq!(nd.normalized, vec![1.0, 0.0]);
        let e = std::f64::consts::E;
        let w0 = 1.0 / (1.0 + e);
        assert!((nd.weights[0] - w0).abs() < 1e-15);
        assert!((nd.weights[0] - 0.2689).abs() < 1e-4);
        assert!((nd.f_noise[0] - w0).abs() < 1e-15);
        assert!((nd.f_noise[1] - (1.0 - w0)).abs() < 1e-15);
    }

    #[test]
    fn identical_candidates_give_uniform_weights() {
        let f = FeatureMap::constant(&[0.3, -0.2, 0.7], 2, 2);
        let f_cell = [0.3, -0.2, 0.7];
        let nd = distill_noise_feature(&f, &[0, 1], &[2, 3], &f_cell).unwrap();
        assert!(nd.weights.iter().all(|w| (w - 0.25).abs() < 1e-15));
        for (a, b) in nd.f_noise.iter().zip(f_cell) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn noise_feature_rejects_empty_lists() {
        let f = FeatureMap::constant(&[1.0], 2, 2);
        assert!(matches!(
            distill_noise_feature(&f, &[], &[1], &[1.0]),
            Err(Error::EmptyIndices)
        ));
    }

    #[test]
    fn similarity_examples() {
        let v = [0.4, -1.0, 2.0];
        let f = FeatureMap::constant(&v, 3, 2);
        let (sc, _) = similarity_maps(&f, &v, &v).unwrap();
        assert!(sc.as_slice().iter().all(|s| (s - 1.0).abs() < 1e-12));

        let f = FeatureMap::constant(&[0.0, 2.0], 2, 2);
        let (sc, _) = similarity_maps(&f, &[3.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!(sc.as_slice().iter().all(|&s| s == 0.0));

        let f = FeatureMap::constant(&[3.0, 4.0], 1, 1);
        let (sc, _) = similarity_maps(&f, &[30.0, 40.0], &[1.0, 0.0]).unwrap();
        assert!((sc.get(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn similarity_rejects_channel_mismatch() {
        let f = FeatureMap::constant(&[1.0, 2.0], 2, 2);
        assert!(similarity_maps(&f, &[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn default_k_rule() {
        assert_eq!(default_k(Size::new(64, 64)), 42);
        assert_eq!(default_k(Size::new(16, 16)), 16);
        assert_eq!(default_k(Size::new(512, 512)), 2622);
        assert_eq!(default_k(Size::new(3, 3)), 8);
    }

    /// Central differences on a scalar probe `L = g1·f_noise + g2·f_cell`.
    #[test]
    fn noise_backward_matches_finite_differences() {
        let vals: Vec<f64> = (0..3 * 4 * 4)
            .map(|i| (i as f64 * 0.731).sin() + 0.2 * (i as f64 * 1.37).cos())
            .collect();
        let f = FeatureMap::from_vec(3, 4, 4, vals).unwrap();
        let dm = [1usize, 6, 9];
        let dh = [3usize, 12, 14];
        let cell_idx = [0usize, 5, 10, 15];
        let g_noise = [0.3, -0.7, 1.1];
        let g_cell = [-0.4, 0.2, 0.5];

        let probe = |f: &FeatureMap| -> f64 {
            let f_cell = gather_mean(f, &cell_idx);
            let nd = distill_noise_feature(f, &dm, &dh, &f_cell).unwrap();
            dot(&nd.f_noise, &g_noise) + dot(&f_cell, &g_cell)
        };

        let f_cell = gather_mean(&f, &cell_idx);
        let noise = distill_noise_feature(&f, &dm, &dh, &f_cell).unwrap();
        let df = DistilledFeatures {
            f_cell,
            cell_indices: cell_idx.to_vec(),
            dm_indices: dm.to_vec(),
            dh_indices: dh.to_vec(),
            noise,
        };
        let mut grad = FeatureMap::zeros(3, 4, 4);
        distill_backward(&df, &g_cell, &g_noise, &mut grad);

        let h = 1e-6;
        for j in 0..f.as_slice().len() {
            let mut plus = f.clone();
            plus.as_mut_slice()[j] += h;
            let mut minus = f.clone();
            minus.as_mut_slice()[j] -= h;
            let numeric = (probe(&plus) - probe(&minus)) / (2.0 * h);
            let analytic = grad.as_slice()[j];
            assert!(
                (numeric - analytic).abs() < 1e-7,
                "entry {j}: numeric {numeric} analytic {analytic}"
            );
        }
    }
}
