//! Composite training objective: Dice + pixel BCE segmentation loss, guide
//! supervision BCE weighted by lambda, and an optional boundary hinge.
//!
//! The hinge acts on a band of pixels within Chebyshev distance `band_radius`
//! of a ground-truth boundary pixel (a pixel with a 4-neighbor of opposite
//! label) and penalizes `max(0, m - (2p-1)(2y-1))`.

use crate::synth::BinaryMask;
use crate::tape::{Tape, ValueId};
use crate::tensor::{Scalar, Tensor};
use crate::tokenbook::GuideMask;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Weight of the guide supervision term.
    pub lambda: f64,
    pub seg_dice_weight: f64,
    pub seg_bce_weight: f64,
    pub hinge_enabled: bool,
    /// Margin m in (0, 1].
    pub hinge_margin: f64,
    /// Band half-width around ground-truth boundaries, in pixels.
    pub band_radius: usize,
    /// Dice smoothing.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.5,
            seg_dice_weight: 1.0,
            seg_bce_weight: 1.0,
            hinge_enabled: false,
            hinge_margin: 0.2,
            band_radius: 2,
            eps: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("seg_dice_weight", self.seg_dice_weight),
            ("seg_bce_weight", self.seg_bce_weight),
            ("eps", self.eps),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        if self.hinge_enabled {
            if !(0.0 < self.hinge_margin && self.hinge_margin <= 1.0) {
                return Err(Error::config(format!(
                    "hinge margin {} must lie in (0, 1]",
                    self.hinge_margin
                )));
            }
            if self.band_radius == 0 {
                return Err(Error::config("hinge band radius must be positive"));
            }
        }
        Ok(())
    }
}

/// Per-term values of one composite loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub dice: f64,
    pub seg_bce: f64,
    pub guide_bce: f64,
    pub hinge: f64,
    pub total: f64,
}

/// Tape nodes of the composite loss, for the training loop.
pub(crate) struct LossNodes {
    pub total: ValueId,
    pub dice: ValueId,
    pub seg_bce: ValueId,
    pub guide_bce: Option<ValueId>,
    pub hinge: Option<ValueId>,
}

impl LossNodes {
    pub fn breakdown<S: Scalar>(&self, tape: &Tape<S>) -> LossBreakdown {
        LossBreakdown {
            dice: tape.value_scalar(self.dice).to_f64(),
            seg_bce: tape.value_scalar(self.seg_bce).to_f64(),
            guide_bce: self.guide_bce.map(|id| tape.value_scalar(id).to_f64()).unwrap_or(0.0),
            hinge: self.hinge.map(|id| tape.value_scalar(id).to_f64()).unwrap_or(0.0),
            total: tape.value_scalar(self.total).to_f64(),
        }
    }
}

fn check_len<S: Scalar>(tape: &Tape<S>, id: ValueId, gt: &BinaryMask, what: &str) -> Result<()> {
    if tape.value(id).len() != gt.h() * gt.w() {
        return Err(Error::config(format!(
            "{what} shape {:?} does not match ground truth {}x{}",
            tape.shape(id),
            gt.h(),
            gt.w()
        )));
    }
    Ok(())
}

/// 1 - (2 sum(p*y) + eps) / (sum(p) + sum(y) + eps)
pub(crate) fn dice_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    probs: ValueId,
    gt: &BinaryMask,
    eps: f64,
) -> Result<ValueId> {
    check_len(tape, probs, gt, "dice probs")?;
    let y: Vec<S> = gt.data().iter().map(|&v| S::from_f64(v as f64)).collect();
    let sum_y = gt.count_ones() as f64;
    let py = tape.mul_const(probs, y)?;
    let inter = tape.sum(py);
    let num = tape.affine(inter, 2.0, eps);
    let sum_p = tape.sum(probs);
    let den = tape.affine(sum_p, 1.0, sum_y + eps);
    let ratio = tape.div_scalars(num, den)?;
    Ok(tape.affine(ratio, -1.0, 1.0))
}

/// Mean binary cross-entropy of probabilities in (0,1) against the mask.
pub(crate) fn bce_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    probs: ValueId,
    gt: &BinaryMask,
) -> Result<ValueId> {
    check_len(tape, probs, gt, "bce probs")?;
    let n = gt.h() * gt.w();
    let y: Vec<S> = gt.data().iter().map(|&v| S::from_f64(v as f64)).collect();
    let y_inv: Vec<S> = gt.data().iter().map(|&v| S::from_f64(1.0 - v as f64)).collect();
    let log_p = tape.log(probs);
    let pos = tape.mul_const(log_p, y)?;
    let one_minus = tape.affine(probs, -1.0, 1.0);
    let log_q = tape.log(one_minus);
    let neg = tape.mul_const(log_q, y_inv)?;
    let both = tape.add(pos, neg)?;
    let total = tape.sum(both);
    Ok(tape.affine(total, -1.0 / n as f64, 0.0))
}

/// Guide supervision BCE; rejects guide entries outside the open interval.
pub(crate) fn guide_bce_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    guide: ValueId,
    gt: &BinaryMask,
) -> Result<ValueId> {
    check_len(tape, guide, gt, "guide")?;
    for (i, v) in tape.value(guide).iter().enumerate() {
        let x = v.to_f64();
        if !(x > 0.0 && x < 1.0) {
            return Err(Error::numerical(format!(
                "guide mask contract violated: entry {i} = {x} outside (0,1)"
            )));
        }
    }
    bce_on_tape(tape, guide, gt)
}

/// Boundary band indicator and its pixel count.
pub fn boundary_band(gt: &BinaryMask, band_radius: usize) -> (Vec<u8>, usize) {
    let (h, w) = (gt.h(), gt.w());
    let mut boundary = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = gt.get(y, x);
            let differing = (y > 0 && gt.get(y - 1, x) != v)
                || (y + 1 < h && gt.get(y + 1, x) != v)
                || (x > 0 && gt.get(y, x - 1) != v)
                || (x + 1 < w && gt.get(y, x + 1) != v);
            if differing {
                boundary[y * w + x] = true;
            }
        }
    }
    let r = band_radius as isize;
    let mut band = vec![0u8; h * w];
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny >= 0
                        && ny < h as isize
                        && nx >= 0
                        && nx < w as isize
                        && boundary[ny as usize * w + nx as usize]
                    {
                        band[y * w + x] = 1;
                        count += 1;
                        break 'scan;
                    }
                }
            }
        }
    }
    (band, count)
}

/// Mean over the band of `max(0, m - (2p-1)(2y-1))`; zero on an empty band.
pub(crate) fn hinge_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    probs: ValueId,
    gt: &BinaryMask,
    margin: f64,
    band_radius: usize,
) -> Result<ValueId> {
    check_len(tape, probs, gt, "hinge probs")?;
    let (band, count) = boundary_band(gt, band_radius);
    if count == 0 {
        return Ok(tape.leaf_from(&[1], vec![S::ZERO], false));
    }
    let sign_y: Vec<S> = gt.data().iter().map(|&v| S::from_f64(2.0 * v as f64 - 1.0)).collect();
    let pm = tape.affine(probs, 2.0, -1.0);
    let agree = tape.mul_const(pm, sign_y)?;
    let slack = tape.affine(agree, -1.0, margin);
    let hinge = tape.relu(slack);
    let weights: Vec<S> = band.iter().map(|&b| S::from_f64(b as f64 / count as f64)).collect();
    let banded = tape.mul_const(hinge, weights)?;
    Ok(tape.sum(banded))
}

/// Composite objective on the tape. `guide` (if any) must already be at the
/// ground-truth resolution.
pub(crate) fn total_loss_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    logits: ValueId,
    guide: Option<ValueId>,
    gt: &BinaryMask,
    cfg: &LossConfig,
) -> Result<LossNodes> {
    cfg.validate()?;
    check_len(tape, logits, gt, "logits")?;
    let probs = tape.sigmoid(logits);
    let dice = dice_on_tape(tape, probs, gt, cfg.eps)?;
    let seg_bce = bce_on_tape(tape, probs, gt)?;
    let wd = tape.affine(dice, cfg.seg_dice_weight, 0.0);
    let wb = tape.affine(seg_bce, cfg.seg_bce_weight, 0.0);
    let mut total = tape.add(wd, wb)?;

    let guide_bce = match guide {
        Some(g) => {
            let gb = guide_bce_on_tape(tape, g, gt)?;
            let weighted = tape.affine(gb, cfg.lambda, 0.0);
            total = tape.add(total, weighted)?;
            Some(gb)
        }
        None => None,
    };
    let hinge = if cfg.hinge_enabled {
        let h = hinge_on_tape(tape, probs, gt, cfg.hinge_margin, cfg.band_radius)?;
        total = tape.add(total, h)?;
        Some(h)
    } else {
        None
    };
    Ok(LossNodes { total, dice, seg_bce, guide_bce, hinge })
}

// ---- tensor-level wrappers -------------------------------------------------

/// Dice loss of probabilities (entries in (0,1)) against a binary mask.
pub fn dice_loss<S: Scalar>(probs: &Tensor<S>, gt: &BinaryMask, eps: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(probs);
    let id = dice_on_tape(&mut tape, p, gt, eps)?;
    Ok(tape.value_scalar(id).to_f64())
}

/// Guide supervision BCE at ground-truth resolution.
pub fn guide_bce<S: Scalar>(guide: &GuideMask<S>, gt: &BinaryMask) -> Result<f64> {
    let mut tape = Tape::new();
    let g = tape.constant(&guide.values);
    let id = guide_bce_on_tape(&mut tape, g, gt)?;
    Ok(tape.value_scalar(id).to_f64())
}

/// Boundary hinge loss of probabilities against a binary mask.
pub fn boundary_hinge<S: Scalar>(
    probs: &Tensor<S>,
    gt: &BinaryMask,
    margin: f64,
    band_radius: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(probs);
    let id = hinge_on_tape(&mut tape, p, gt, margin, band_radius)?;
    Ok(tape.value_scalar(id).to_f64())
}

/// Composite loss of logits (+ optional guide) against a mask, with breakdown.
pub fn total_loss<S: Scalar>(
    logits: &Tensor<S>,
    guide: Option<&GuideMask<S>>,
    gt: &BinaryMask,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let g = guide.map(|g| tape.constant(&g.values));
    let nodes = total_loss_on_tape(&mut tape, l, g, gt, cfg)?;
    Ok(nodes.breakdown(&tape))
}
