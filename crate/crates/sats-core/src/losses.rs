//! Segmentation losses: soft Dice, logit-stable binary cross-entropy, the
//! voxel-wise margin loss over Siamese feature maps, and their weighted sum.
//!
//! The margin loss has two conventions. `Prose` (default) pushes features
//! apart on asymmetric-lesion voxels (`m = 1` contributes
//! `max(t − d², 0)`) and pulls them together elsewhere (`m = 0` contributes
//! `d²`). `Literal` swaps the two assignments exactly as printed in the
//! source equation; the two are related by complementing `m`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{numel, AutodiffError, Graph, Result, Scalar, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginConvention {
    Prose,
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Margin `t` of the hinge on squared feature distance.
    pub margin_t: f64,
    /// Weight of the margin term in the total loss.
    pub beta: f64,
    pub margin_convention: MarginConvention,
    pub reduction: Reduction,
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin_t: 20.0,
            beta: 1.0,
            margin_convention: MarginConvention::Prose,
            reduction: Reduction::Mean,
            dice_eps: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin_t <= 0.0 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "margin t must be > 0, got {}",
                self.margin_t
            )));
        }
        if self.beta < 0.0 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "beta must be ≥ 0, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Soft Dice loss `1 − (2·Σ p·g + ε)/(Σ p + Σ g + ε)` with `p = σ(logits)`.
pub fn dice_loss<S: Scalar>(
    g: &mut Graph<S>,
    logits: TensorId,
    target: TensorId,
    eps: f64,
) -> Result<TensorId> {
    shape_eq(g, logits, target, "dice_loss")?;
    let e = S::from_f64(eps);
    let p = g.sigmoid(logits);
    let pg = g.mul(p, target)?;
    let inter = g.sum(pg);
    let num = g.affine(inter, S::from_f64(2.0), e);
    let sp = g.sum(p);
    let sg = g.sum(target);
    let den_sum = g.add(sp, sg)?;
    let den = g.affine(den_sum, S::one(), e);
    let ratio = g.div(num, den)?;
    Ok(g.affine(ratio, -S::one(), S::one()))
}

/// Mean binary cross-entropy from logits, in the stable form
/// `softplus(x) − x·g` (finite for all finite logits).
pub fn bce_loss<S: Scalar>(
    g: &mut Graph<S>,
    logits: TensorId,
    target: TensorId,
) -> Result<TensorId> {
    shape_eq(g, logits, target, "bce_loss")?;
    let sp = g.softplus(logits);
    let xg = g.mul(logits, target)?;
    let per = g.sub(sp, xg)?;
    Ok(g.mean(per))
}

fn shape_eq<S: Scalar>(
    g: &Graph<S>,
    a: TensorId,
    b: TensorId,
    what: &str,
) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(AutodiffError::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

/// Voxel-wise margin loss between Siamese feature maps.
///
/// `m` flags asymmetric voxels and `valid` (when given) restricts the loss
/// to voxels whose mirror correspondence is defined; both are flattened
/// over `[N,D,H,W]`. Mean reduction divides by the number of voxels
/// considered. Returns an untracked zero scalar when no voxel is valid.
pub fn margin_loss<S: Scalar>(
    g: &mut Graph<S>,
    e: TensorId,
    e_flip: TensorId,
    m: &[u8],
    valid: Option<&[u8]>,
    cfg: &LossConfig,
) -> Result<TensorId> {
    cfg.validate()?;
    shape_eq(g, e, e_flip, "margin_loss features")?;
    let s = g.shape(e).to_vec();
    if s.len() != 5 {
        return Err(AutodiffError::ShapeMismatch(format!(
            "margin_loss expects 5-axis features, got {s:?}"
        )));
    }
    let voxels = s[0] * s[1] * s[2] * s[3];
    if m.len() != voxels {
        return Err(AutodiffError::ShapeMismatch(format!(
            "asym mask has {} voxels, features imply {voxels}",
            m.len()
        )));
    }
    if let Some(v) = valid {
        if v.len() != voxels {
            return Err(AutodiffError::ShapeMismatch(format!(
                "validity mask has {} voxels, features imply {voxels}",
                v.len()
            )));
        }
    }

    let mut w_d2 = vec![S::zero(); voxels];
    let mut w_hinge = vec![S::zero(); voxels];
    let mut n_valid = 0usize;
    for q in 0..voxels {
        if valid.map_or(false, |v| v[q] == 0) {
            continue;
        }
        n_valid += 1;
        let asym = m[q] == 1;
        let hinge_side = match cfg.margin_convention {
            MarginConvention::Prose => asym,
            MarginConvention::Literal => !asym,
        };
        if hinge_side {
            w_hinge[q] = S::one();
        } else {
            w_d2[q] = S::one();
        }
    }
    if n_valid == 0 {
        return Ok(g.scalar(S::zero()));
    }

    let wshape = vec![s[0], s[1], s[2], s[3], 1];
    let w_d2 = g.leaf(&wshape, w_d2, false)?;
    let w_hinge = g.leaf(&wshape, w_hinge, false)?;

    let diff = g.sub(e, e_flip)?;
    let sq = g.square(diff);
    let d2 = g.sum_channels(sq)?;
    let t = S::from_f64(cfg.margin_t);
    let neg = g.affine(d2, -S::one(), t);
    let hinge = g.max_with_constant(neg, S::zero());
    let pull = g.mul(d2, w_d2)?;
    let push = g.mul(hinge, w_hinge)?;
    let term = g.add(pull, push)?;
    let total = g.sum(term);
    Ok(match cfg.reduction {
        Reduction::Sum => total,
        Reduction::Mean => g.affine(total, S::from_f64(1.0 / n_valid as f64), S::zero()),
    })
}

/// The individual loss terms plus the combined scalar.
pub struct LossOutput {
    pub total: TensorId,
    pub dice: TensorId,
    pub bce: TensorId,
    pub margin: Option<TensorId>,
}

/// `dice + bce + β·margin`; with `β = 0` the margin branch is skipped and
/// the total equals the plain segmentation loss bit-for-bit.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<S: Scalar>(
    g: &mut Graph<S>,
    logits: TensorId,
    target: TensorId,
    e: TensorId,
    e_flip: TensorId,
    m: &[u8],
    valid: Option<&[u8]>,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let dice = dice_loss(g, logits, target, cfg.dice_eps)?;
    let bce = bce_loss(g, logits, target)?;
    let seg = g.add(dice, bce)?;
    if cfg.beta == 0.0 {
        return Ok(LossOutput {
            total: seg,
            dice,
            bce,
            margin: None,
        });
    }
    let margin = margin_loss(g, e, e_flip, m, valid, cfg)?;
    let scaled = g.affine(margin, S::from_f64(cfg.beta), S::zero());
    let total = g.add(seg, scaled)?;
    Ok(LossOutput {
        total,
        dice,
        bce,
        margin: Some(margin),
    })
}
