//! Consensus-aware supervised loss, contrastive noise separation and the
//! combined objective.
//!
//! The per-pixel weight maps `ω_c` and `ω_sim` multiply inside both the BCE
//! mean and the soft-Dice sums, and are detached: gradients flow into the
//! confidence map only through the base Dice/BCE terms. Every loss here
//! returns its value together with the gradient the model needs.

use std::f64::consts::E;
use std::fmt;
use std::str::FromStr;

use crate::consensus::{distill, distill_backward, similarity_maps, DistilledFeatures};
use crate::error::{Error, Result};
use crate::grid::{ensure_same_size, BinaryMask, FeatureMap, Logits, PixelGrid};

/// Clamp applied to confidences inside the BCE logarithms.
pub const EPS_PROB: f64 = 1e-7;
/// Additive smoothing in the soft-Dice ratio.
pub const EPS_DICE: f64 = 1.0;
/// Floor for the second distribution inside KL.
pub const KL_FLOOR: f64 = 1e-12;

pub fn omega_c(c: &PixelGrid, y: &BinaryMask) -> Result<PixelGrid> {
    c.zip_map(&y.to_grid(), |ci, yi| (ci * yi + (1.0 - ci) * (1.0 - yi)).exp())
}

pub fn omega_sim(sim_cell: &PixelGrid, sim_noise: &PixelGrid) -> Result<PixelGrid> {
    sim_cell.zip_map(sim_noise, |a, b| (a - b).exp())
}

fn check_inputs(c: &PixelGrid, y: &BinaryMask, weight: &PixelGrid) -> Result<()> {
    ensure_same_size("confidence vs annotation", c.size(), y.size())?;
    ensure_same_size("confidence vs weight", c.size(), weight.size())
}

/// Pixel-weighted mean binary cross-entropy and its gradient in `c`.
pub fn weighted_bce_with_grad(
    c: &PixelGrid,
    y: &BinaryMask,
    weight: &PixelGrid,
) -> Result<(f64, PixelGrid)> {
    check_inputs(c, y, weight)?;
    let n = c.len() as f64;
    let mut grad = PixelGrid::zeros(c.width(), c.height());
    let mut total = 0.0;
    for (i, ((&ci, &yi), &wi)) in c
        .as_slice()
        .iter()
        .zip(y.bits())
        .zip(weight.as_slice())
        .enumerate()
    {
        let p = ci.clamp(EPS_PROB, 1.0 - EPS_PROB);
        let inside = ci > EPS_PROB && ci < 1.0 - EPS_PROB;
        if yi {
            total += -wi * p.ln();
            if inside {
                grad.as_mut_slice()[i] = -wi / (p * n);
            }
        } else {
            total += -wi * (1.0 - p).ln();
            if inside {
                grad.as_mut_slice()[i] = wi / ((1.0 - p) * n);
            }
        }
    }
    Ok((total / n, grad))
}

/// BCE gradient with respect to the logit margin `z = fg - bg`, where
/// `c = σ(z)`: `w (c - y) / N`. Unlike the clamped gradient in `c` it does
/// not vanish once the softmax saturates.
pub fn weighted_bce_margin_grad(c: &PixelGrid, y: &BinaryMask, weight: &PixelGrid) -> Result<PixelGrid> {
    check_inputs(c, y, weight)?;
    let n = c.len() as f64;
    let mut grad = PixelGrid::zeros(c.width(), c.height());
    for (((g, &ci), &yi), &wi) in grad.as_mut_slice().iter_mut().zip(c.as_slice()).zip(y.bits()).zip(weight.as_slice()) {
        *g = wi * (ci - f64::from(u8::from(yi))) / n;
    }
    Ok(grad)
}

pub fn weighted_bce(c: &PixelGrid, y: &BinaryMask, weight: &PixelGrid) -> Result<f64> {
    weighted_bce_with_grad(c, y, weight).map(|(v, _)| v)
}

/// `1 - (2 Σ w c y + ε) / (Σ w (c + y) + ε)` and its gradient in `c`.
pub fn weighted_soft_dice_with_grad(
    c: &PixelGrid,
    y: &BinaryMask,
    weight: &PixelGrid,
) -> Result<(f64, PixelGrid)> {
    check_inputs(c, y, weight)?;
    let (mut inter, mut denom) = (0.0, 0.0);
    for ((&ci, &yi), &wi) in c.as_slice().iter().zip(y.bits()).zip(weight.as_slice()) {
        let yv = f64::from(u8::from(yi));
        inter += wi * ci * yv;
        denom += wi * (ci + yv);
    }
    let num = 2.0 * inter + EPS_DICE;
    let den = denom + EPS_DICE;
    let loss = 1.0 - num / den;
    let mut grad = PixelGrid::zeros(c.width(), c.height());
    for ((g, &yi), &wi) in grad.as_mut_slice().iter_mut().zip(y.bits()).zip(weight.as_slice()) {
        let yv = f64::from(u8::from(yi));
        *g = -(2.0 * wi * yv * den - num * wi) / (den * den);
    }
    Ok((loss, grad))
}

pub fn weighted_soft_dice(c: &PixelGrid, y: &BinaryMask, weight: &PixelGrid) -> Result<f64> {
    weighted_soft_dice_with_grad(c, y, weight).map(|(v, _)| v)
}

/// Soft Dice plus BCE under a shared pixel weight.
#[derive(Debug, Clone)]
pub struct SupervisedTerms {
    pub dice: f64,
    pub bce: f64,
    /// Gradient of the sum in `c`.
    pub grad_c: PixelGrid,
    pub grad_dice: PixelGrid,
    /// BCE gradient in the logit margin.
    pub bce_margin: PixelGrid,
}

impl SupervisedTerms {
    pub fn total(&self) -> f64 {
        self.dice + self.bce
    }
}

pub fn weighted_dice_bce(c: &PixelGrid, y: &BinaryMask, weight: &PixelGrid) -> Result<SupervisedTerms> {
    let (dice, gd) = weighted_soft_dice_with_grad(c, y, weight)?;
    let (bce, gb) = weighted_bce_with_grad(c, y, weight)?;
    let grad_c = gd.zip_map(&gb, |a, b| a + b)?;
    let bce_margin = weighted_bce_margin_grad(c, y, weight)?;
    Ok(SupervisedTerms {
        dice,
        bce,
        grad_c,
        grad_dice: gd,
        bce_margin,
    })
}

/// Consensus-aware supervised loss with weight `ω_c ⊙ ω_sim`.
pub fn supervised_loss(
    c: &PixelGrid,
    y: &BinaryMask,
    sim_cell: &PixelGrid,
    sim_noise: &PixelGrid,
) -> Result<f64> {
    let weight = omega_c(c, y)?.zip_map(&omega_sim(sim_cell, sim_noise)?, |a, b| a * b)?;
    Ok(weighted_dice_bce(c, y, &weight)?.total())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContrastiveMode {
    /// The divergence itself, minimised as written in the combined objective.
    Literal,
    /// `max(0, m - D)`: minimised by pushing the divergence past the margin.
    #[default]
    Separative,
}

impl fmt::Display for ContrastiveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContrastiveMode::Literal => "literal",
            ContrastiveMode::Separative => "separative",
        })
    }
}

impl FromStr for ContrastiveMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "separative" => Ok(Self::Separative),
            other => Err(Error::InvalidArgument(format!("unknown contrastive mode {other:?}"))),
        }
    }
}

/// `KL(P‖Q) + MSE(P, Q)` over channel softmaxes, with gradients in both
/// raw vectors.
pub fn softmax_divergence_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    let log_p = log_softmax(a);
    let log_q = log_softmax(b);
    let p: Vec<f64> = log_p.iter().map(|v| v.exp()).collect();
    let q: Vec<f64> = log_q.iter().map(|v| v.exp()).collect();
    let floor = KL_FLOOR.ln();
    let clamped: Vec<bool> = log_q.iter().map(|&v| v < floor).collect();
    let r: Vec<f64> = (0..n).map(|i| log_p[i] - log_q[i].max(floor)).collect();

    let kl: f64 = (0..n).map(|i| p[i] * r[i]).sum();
    let mse: f64 = (0..n).map(|i| (p[i] - q[i]).powi(2)).sum::<f64>() / n as f64;

    // KL: dKL/da_j = P_j (r_j - Σ P r); dKL/db_j = -(P_j [unclamped] - Q_j Σ_unclamped P)
    let mut ga: Vec<f64> = (0..n).map(|j| p[j] * (r[j] - kl)).collect();
    let p_free: f64 = (0..n).filter(|&i| !clamped[i]).map(|i| p[i]).sum();
    let mut gb: Vec<f64> = (0..n)
        .map(|j| {
            let own = if clamped[j] { 0.0 } else { p[j] };
            -(own - q[j] * p_free)
        })
        .collect();

    // MSE through both softmaxes
    let e: Vec<f64> = (0..n).map(|i| 2.0 * (p[i] - q[i]) / n as f64).collect();
    let pe: f64 = (0..n).map(|i| p[i] * e[i]).sum();
    let qe: f64 = (0..n).map(|i| q[i] * e[i]).sum();
    for j in 0..n {
        ga[j] += p[j] * (e[j] - pe);
        gb[j] += q[j] * (-e[j] + qe);
    }
    Ok((kl + mse, ga, gb))
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

/// Contrastive separation term and its gradients in `f_cell` and `f_noise`.
pub fn contrastive_loss_with_grad(
    f_cell: &[f64],
    f_noise: &[f64],
    mode: ContrastiveMode,
    margin: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (d, ga, gb) = softmax_divergence_with_grad(f_cell, f_noise)?;
    Ok(match mode {
        ContrastiveMode::Literal => (d, ga, gb),
        ContrastiveMode::Separative if d < margin => (
            margin - d,
            ga.into_iter().map(|g| -g).collect(),
            gb.into_iter().map(|g| -g).collect(),
        ),
        ContrastiveMode::Separative => (0.0, vec![0.0; f_cell.len()], vec![0.0; f_noise.len()]),
    })
}

pub fn contrastive_loss(f_cell: &[f64], f_noise: &[f64], mode: ContrastiveMode, margin: f64) -> Result<f64> {
    contrastive_loss_with_grad(f_cell, f_noise, mode, margin).map(|(v, _, _)| v)
}

/// Which objective a training step optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrainingMode {
    /// Plain unweighted Dice + BCE.
    Supervised,
    /// Consensus-aware weighting plus contrastive separation.
    #[default]
    Casc,
}

impl fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainingMode::Supervised => "supervised",
            TrainingMode::Casc => "casc",
        })
    }
}

impl FromStr for TrainingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Self::Supervised),
            "casc" => Ok(Self::Casc),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub mode: TrainingMode,
    pub k: usize,
    pub lambda_con: f64,
    pub margin: f64,
    pub contrastive: ContrastiveMode,
}

impl ObjectiveConfig {
    pub fn casc(k: usize) -> Self {
        Self {
            mode: TrainingMode::Casc,
            k,
            lambda_con: 1.0,
            margin: 1.0,
            contrastive: ContrastiveMode::Separative,
        }
    }

    pub fn supervised() -> Self {
        Self {
            mode: TrainingMode::Supervised,
            ..Self::casc(2)
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub dice_term: f64,
    pub bce_term: f64,
    pub supervised: f64,
    pub contrastive: f64,
    pub total: f64,
    pub omega_c: PixelGrid,
    pub omega_sim: PixelGrid,
    /// False when the sample had no consensus pixel and fell back to plain
    /// supervision.
    pub consensus: bool,
}

/// Gradients of the total loss with respect to the model outputs.
///
/// The Dice part arrives in `c` and the BCE part directly in the logit
/// margin; [`LossGradients::logits`] combines them.
#[derive(Debug, Clone)]
pub struct LossGradients {
    pub confidence: PixelGrid,
    pub margin: PixelGrid,
    pub features: FeatureMap,
}

impl LossGradients {
    pub fn logits(&self, confidence: &PixelGrid) -> Result<Logits> {
        ensure_same_size("confidence vs gradient", confidence.size(), self.confidence.size())?;
        let fg: Vec<f64> = confidence
            .as_slice()
            .iter()
            .zip(self.confidence.as_slice())
            .zip(self.margin.as_slice())
            .map(|((&c, &g), &m)| g * c * (1.0 - c) + m)
            .collect();
        let bg = fg.iter().map(|v| -v).collect();
        Logits::new(confidence.width(), confidence.height(), bg, fg)
    }
}

/// Evaluates the training objective for one sample.
pub fn total_loss(
    c: &PixelGrid,
    f_d: &FeatureMap,
    y: &BinaryMask,
    cfg: &ObjectiveConfig,
) -> Result<(LossBreakdown, LossGradients)> {
    ensure_same_size("confidence vs annotation", c.size(), y.size())?;
    ensure_same_size("features vs confidence", f_d.size(), c.size())?;
    let (w, h) = (c.width(), c.height());
    let ones = PixelGrid::filled(w, h, 1.0);
    let mut grad_features = FeatureMap::zeros(f_d.channels(), w, h);

    let distilled: Option<DistilledFeatures> = match cfg.mode {
        TrainingMode::Supervised => None,
        TrainingMode::Casc => distill(f_d, c, y, cfg.k)?,
    };

    let Some(df) = distilled else {
        let terms = weighted_dice_bce(c, y, &ones)?;
        let breakdown = LossBreakdown {
            dice_term: terms.dice,
            bce_term: terms.bce,
            supervised: terms.total(),
            contrastive: 0.0,
            total: terms.total(),
            omega_c: ones.clone(),
            omega_sim: ones,
            consensus: false,
        };
        let grads = LossGradients {
            confidence: terms.grad_dice,
            margin: terms.bce_margin,
            features: grad_features,
        };
        return Ok((breakdown, grads));
    };

    let (sim_cell, sim_noise) = similarity_maps(f_d, &df.f_cell, df.f_noise())?;
    let om_c = omega_c(c, y)?;
    let om_sim = omega_sim(&sim_cell, &sim_noise)?;
    let weight = om_c.zip_map(&om_sim, |a, b| a * b)?;
    let terms = weighted_dice_bce(c, y, &weight)?;

    let (con, g_cell, g_noise) =
        contrastive_loss_with_grad(&df.f_cell, df.f_noise(), cfg.contrastive, cfg.margin)?;
    if cfg.lambda_con != 0.0 {
        let g_cell: Vec<f64> = g_cell.iter().map(|g| g * cfg.lambda_con).collect();
        let g_noise: Vec<f64> = g_noise.iter().map(|g| g * cfg.lambda_con).collect();
        distill_backward(&df, &g_cell, &g_noise, &mut grad_features);
    }

    let supervised = terms.total();
    let breakdown = LossBreakdown {
        dice_term: terms.dice,
        bce_term: terms.bce,
        supervised,
        contrastive: con,
        total: supervised + cfg.lambda_con * con,
        omega_c: om_c,
        omega_sim: om_sim,
        consensus: true,
    };
    Ok((
        breakdown,
        LossGradients {
            confidence: terms.grad_dice,
            margin: terms.bce_margin,
            features: grad_features,
        },
    ))
}

/// Range of `ω_c`.
pub const OMEGA_C_RANGE: (f64, f64) = (1.0, E);

/// Range of `ω_sim`.
pub fn omega_sim_range() -> (f64, f64) {
    ((-2.0f64).exp(), 2.0f64.exp())
}
