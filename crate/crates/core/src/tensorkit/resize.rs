use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Source taps `(i0, i1, w0, w1)` for each output position along one axis,
/// align-corners=false: `src = (dst + 0.5) * in / out - 0.5`, clamped at 0.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

/// Bilinear resize of the spatial axes of `[B, C, H, W]` with the
/// align-corners=false convention. Same-size requests return the input
/// unchanged.
pub fn bilinear_resize<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be at least 1x1"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let mut out = Vec::with_capacity(b * c * out_h * out_w);
    for bi in 0..b {
        for ch in 0..c {
            let p = x.plane(bi, ch);
            for &(y0, y1, wy0, wy1) in &ty {
                let (wy0, wy1) = (T::of(wy0), T::of(wy1));
                for &(x0, x1, wx0, wx1) in &tx {
                    let (wx0, wx1) = (T::of(wx0), T::of(wx1));
                    let top = wx0 * p[y0 * w + x0] + wx1 * p[y0 * w + x1];
                    let bot = wx0 * p[y1 * w + x0] + wx1 * p[y1 * w + x1];
                    out.push(wy0 * top + wy1 * bot);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, out_h, out_w], out))
}

/// Adjoint of [`bilinear_resize`]: scatters the output gradient back onto
/// an input of shape `in_shape`.
pub(crate) fn bilinear_resize_backward<T: Real>(grad_out: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (b, c, out_h, out_w) = grad_out.dims4().expect("rank-4 gradient");
    let (h, w) = (in_shape[2], in_shape[3]);
    if (out_h, out_w) == (h, w) {
        return grad_out.clone();
    }
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let mut gin = vec![T::zero(); b * c * h * w];
    for bi in 0..b {
        for ch in 0..c {
            let g = grad_out.plane(bi, ch);
            let base = (bi * c + ch) * h * w;
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let v = g[oy * out_w + ox];
                    gin[base + y0 * w + x0] += v * T::of(wy0 * wx0);
                    gin[base + y0 * w + x1] += v * T::of(wy0 * wx1);
                    gin[base + y1 * w + x0] += v * T::of(wy1 * wx0);
                    gin[base + y1 * w + x1] += v * T::of(wy1 * wx1);
                }
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), gin)
}
