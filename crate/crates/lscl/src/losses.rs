//! Training loss: 0.6 * cross-entropy + 0.4 * dice loss, recorded on the
//! tape so it is differentiable w.r.t. the logits (and through them, the
//! input image and the parameters).

use crate::error::{LsclError, Result};
use crate::metrics::LabelMap;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const CE_WEIGHT: f64 = 0.6;
pub const DICE_WEIGHT: f64 = 0.4;
pub const DICE_SMOOTH: f64 = 1.0;

/// Combined loss against hard labels. Returns a scalar node.
pub fn combined_loss(logits: NodeId, labels: &[LabelMap], tape: &mut Tape) -> Result<NodeId> {
    let shape = tape.value(logits).shape.clone();
    let (b, c, h, w) = match shape.as_slice() {
        [b, c, h, w] => (*b, *c, *h, *w),
        other => {
            return Err(LsclError::shape(
                "combined_loss",
                format!("logits must be rank-4, got {other:?}"),
            ))
        }
    };
    if labels.len() != b {
        return Err(LsclError::shape(
            "combined_loss",
            format!("{} label maps for batch of {b}", labels.len()),
        ));
    }
    let plane = h * w;
    let mut flat = Vec::with_capacity(b * plane);
    for lm in labels {
        if lm.h != h || lm.w != w {
            return Err(LsclError::shape(
                "combined_loss",
                format!("label map {}x{} vs logits {h}x{w}", lm.h, lm.w),
            ));
        }
        for &v in &lm.data {
            let id = v as usize;
            if id >= c {
                return Err(LsclError::InvalidLabel {
                    id,
                    num_classes: c,
                });
            }
            flat.push(id);
        }
    }
    // One-hot label tensor for the dice terms.
    let mut onehot = Tensor::zeros(&[b, c, h, w]);
    for i in 0..b {
        for px in 0..plane {
            onehot.data[i * c * plane + flat[i * plane + px] * plane + px] = 1.0;
        }
    }
    build_loss(logits, tape, b, c, h, w, Some(&flat), &onehot)
}

/// Combined loss against soft (probabilistic) labels, used by mixup.
/// `soft` is [b, c, h, w] and must sum to 1 over channels.
pub fn combined_loss_soft(logits: NodeId, soft: &Tensor, tape: &mut Tape) -> Result<NodeId> {
    let shape = tape.value(logits).shape.clone();
    let (b, c, h, w) = match shape.as_slice() {
        [b, c, h, w] => (*b, *c, *h, *w),
        other => {
            return Err(LsclError::shape(
                "combined_loss_soft",
                format!("logits must be rank-4, got {other:?}"),
            ))
        }
    };
    if soft.shape != shape {
        return Err(LsclError::shape(
            "combined_loss_soft",
            format!("soft labels {:?} vs logits {:?}", soft.shape, shape),
        ));
    }
    build_loss(logits, tape, b, c, h, w, None, soft)
}

/// Shared loss graph. For hard labels `flat` carries the class ids (used by
/// the cheaper one-hot-select CE path); otherwise CE is the full soft
/// cross-entropy against `target`.
#[allow(clippy::too_many_arguments)]
fn build_loss(
    logits: NodeId,
    tape: &mut Tape,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    flat: Option<&[usize]>,
    target: &Tensor,
) -> Result<NodeId> {
    let plane = h * w;
    let probs = tape.softmax_channels(logits)?;
    // Guard against exact zeros before the log; inactive at training scales.
    let safe = tape.clamp(probs, 1e-300, 1.0)?;
    let logp = tape.log(safe)?;

    let target_node = tape.constant(target.clone())?;
    let ce = match flat {
        Some(flat) => {
            let sel = tape.one_hot_select(logp, flat)?;
            let m = tape.mean(sel)?;
            tape.scale(m, -1.0)?
        }
        None => {
            let weighted = tape.mul(logp, target_node)?;
            let s = tape.sum(weighted)?;
            tape.scale(s, -1.0 / (b * plane) as f64)?
        }
    };

    // Per (batch element, class) dice ratio, smoothed, averaged: all ratios
    // are computed at once on [b, c] tensors.
    let p_sums = tape.sum_planes(probs)?;
    let g_sums = tape.sum_planes(target_node)?;
    let pg = tape.mul(probs, target_node)?;
    let inters = tape.sum_planes(pg)?;

    let smooth = tape.constant(Tensor::full(&[b, c], DICE_SMOOTH))?;
    let two_inters = tape.scale(inters, 2.0)?;
    let numer = tape.add(two_inters, smooth)?;
    let pg_sums = tape.add(p_sums, g_sums)?;
    let denom = tape.add(pg_sums, smooth)?;
    let ratios = tape.div(numer, denom)?;
    let ratio_sum = tape.sum(ratios)?;
    let dice_mean = tape.scale(ratio_sum, 1.0 / (b * c) as f64)?;
    let one = tape.constant(Tensor::scalar(1.0))?;
    let dice_loss = tape.sub(one, dice_mean)?;

    let ce_w = tape.scale(ce, CE_WEIGHT)?;
    let dice_w = tape.scale(dice_loss, DICE_WEIGHT)?;
    tape.add(ce_w, dice_w)
}
