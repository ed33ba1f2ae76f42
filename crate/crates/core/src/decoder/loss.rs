use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::tensorkit::{bilinear_resize, sigmoid, Real, Tape, Tensor, Var};

const DICE_SMOOTH: f64 = 1.0;

pub struct LossParts {
    pub total: Var,
    pub bce: f64,
    pub dice: f64,
}

/// Mean BCE from logits plus `1 - soft Dice`. `target` must match the
/// logits' shape and hold only 0 and 1.
pub fn seg_loss<T: Real>(tape: &mut Tape<T>, logits: Var, target: &Tensor<T>) -> Result<LossParts> {
    if target.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::invalid("segmentation target must be binary (0 or 1)"));
    }
    let bce = tape.bce_with_logits(logits, target)?;
    let dice = tape.soft_dice_loss(logits, target, T::of(DICE_SMOOTH))?;
    let total = tape.add(bce, dice)?;
    Ok(LossParts {
        total,
        bce: tape.value(bce).data()[0].as_f64(),
        dice: tape.value(dice).data()[0].as_f64(),
    })
}

/// Nearest-neighbour resampling of a mask to `[1, 1, h, w]`, sampling each
/// output cell at its center.
pub fn mask_to_target<T: Real>(mask: &Mask, h: usize, w: usize) -> Result<Tensor<T>> {
    let (mh, mw) = (mask.height(), mask.width());
    Tensor::from_fn(&[1, 1, h, w], |i| {
        let (r, c) = (i / w, i % w);
        let sr = ((2 * r + 1) * mh) / (2 * h);
        let sc = ((2 * c + 1) * mw) / (2 * w);
        if mask.get(sr, sc) {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// `sigmoid(logits)` resized bilinearly to `out_h x out_w`; pixels strictly
/// above `threshold` are foreground.
pub fn predict_mask<T: Real>(logits: &Tensor<T>, threshold: f64, out_h: usize, out_w: usize) -> Result<Mask> {
    let (n, c, _, _) = logits.dims4()?;
    if (n, c) != (1, 1) {
        return Err(Error::invalid(format!(
            "expected [1, 1, H, W] logits, got {:?}",
            logits.shape()
        )));
    }
    let prob = bilinear_resize(&sigmoid(logits), out_h, out_w)?;
    Mask::new(
        out_h,
        out_w,
        prob.data().iter().map(|p| p.as_f64() > threshold).collect(),
    )
}
