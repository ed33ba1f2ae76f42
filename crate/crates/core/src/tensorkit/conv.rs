use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Extent covered by a `k`-tap kernel with dilation `r`: `k + (k - 1)(r - 1)`.
pub fn effective_kernel(k: usize, dilation: usize) -> usize {
    k + (k - 1) * (dilation - 1)
}

/// Geometry of a 2D cross-correlation.
///
/// One primitive covers pointwise (1x1), dense, depthwise (`groups ==
/// channels`) and dilated variants. Padding is symmetric and applied to both
/// spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(kernel_h: usize, kernel_w: usize) -> Self {
        ConvSpec {
            kernel_h,
            kernel_w,
            stride: 1,
            dilation: 1,
            groups: 1,
            padding: 0,
        }
    }

    pub fn pointwise() -> Self {
        ConvSpec::new(1, 1)
    }

    /// Square kernel with "same" padding: `floor(effective / 2)` per side.
    /// Even effective extents are rejected since they cannot be padded
    /// symmetrically.
    pub fn same(kernel: usize, dilation: usize) -> Result<Self> {
        if kernel == 0 || dilation == 0 {
            return Err(Error::invalid("kernel size and dilation must be positive"));
        }
        let eff = effective_kernel(kernel, dilation);
        if eff.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "same padding needs an odd effective kernel, got {eff} (k={kernel}, r={dilation})"
            )));
        }
        Ok(ConvSpec {
            dilation,
            padding: eff / 2,
            ..ConvSpec::new(kernel, kernel)
        })
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn effective_h(&self) -> usize {
        effective_kernel(self.kernel_h, self.dilation)
    }

    pub fn effective_w(&self) -> usize {
        effective_kernel(self.kernel_w, self.dilation)
    }

    fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::invalid("kernel dimensions must be positive"));
        }
        if self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(Error::invalid("stride, dilation and groups must be positive"));
        }
        Ok(())
    }

    /// Output spatial size `floor((n + 2p - eff) / s) + 1` per axis.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let axis = |n: usize, eff: usize| -> Result<usize> {
            let padded = n + 2 * self.padding;
            if padded < eff {
                return Err(Error::invalid(format!(
                    "convolution output would be empty: input {n} + 2*{} < kernel extent {eff}",
                    self.padding
                )));
            }
            Ok((padded - eff) / self.stride + 1)
        };
        Ok((axis(h, self.effective_h())?, axis(w, self.effective_w())?))
    }
}

/// Input/output plane sizes plus the conv settings, for the per-tap loops.
#[derive(Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

/// Output positions `o` in `[lo, hi)` for which `o * stride + off` lands
/// inside `0..n_in`.
fn valid_range(n_in: usize, n_out: usize, stride: usize, off: isize) -> (usize, usize) {
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    let lim = n_in as isize - off;
    let hi = if lim <= 0 { 0 } else { (lim as usize).div_ceil(stride) };
    (lo.min(n_out), hi.min(n_out))
}

impl Geometry {
    fn tap(&self, ky: usize, kx: usize) -> TapRange {
        let s = &self.spec;
        let offy = (ky * s.dilation) as isize - s.padding as isize;
        let offx = (kx * s.dilation) as isize - s.padding as isize;
        let (ylo, yhi) = valid_range(self.h, self.ho, s.stride, offy);
        let (xlo, xhi) = valid_range(self.w, self.wo, s.stride, offx);
        TapRange {
            offy,
            offx,
            ylo,
            yhi,
            xlo,
            xhi,
        }
    }

    /// `out[o] += wv * inp[o*s + off]` over the valid window of one tap.
    fn acc_forward<T: Real>(&self, out: &mut [T], inp: &[T], ky: usize, kx: usize, wv: T) {
        let t = self.tap(ky, kx);
        let s = self.spec.stride;
        for oy in t.ylo..t.yhi {
            let iy = (oy * s) as isize + t.offy;
            let row_in = &inp[iy as usize * self.w..(iy as usize + 1) * self.w];
            let row_out = &mut out[oy * self.wo..(oy + 1) * self.wo];
            let x0 = (t.xlo * s) as isize + t.offx;
            for (j, o) in row_out[t.xlo..t.xhi].iter_mut().enumerate() {
                *o += wv * row_in[(x0 + (j * s) as isize) as usize];
            }
        }
    }

    /// Adjoint of [`Self::acc_forward`] with respect to the input plane.
    fn acc_grad_input<T: Real>(&self, gin: &mut [T], gout: &[T], ky: usize, kx: usize, wv: T) {
        let t = self.tap(ky, kx);
        let s = self.spec.stride;
        for oy in t.ylo..t.yhi {
            let iy = ((oy * s) as isize + t.offy) as usize;
            for ox in t.xlo..t.xhi {
                let ix = ((ox * s) as isize + t.offx) as usize;
                gin[iy * self.w + ix] += wv * gout[oy * self.wo + ox];
            }
        }
    }

    /// Gradient of one kernel tap: correlation of input with output gradient.
    fn tap_grad<T: Real>(&self, inp: &[T], gout: &[T], ky: usize, kx: usize) -> T {
        let t = self.tap(ky, kx);
        let s = self.spec.stride;
        let mut acc = T::zero();
        for oy in t.ylo..t.yhi {
            let iy = ((oy * s) as isize + t.offy) as usize;
            for ox in t.xlo..t.xhi {
                let ix = ((ox * s) as isize + t.offx) as usize;
                acc += inp[iy * self.w + ix] * gout[oy * self.wo + ox];
            }
        }
        acc
    }
}

struct TapRange {
    offy: isize,
    offx: isize,
    ylo: usize,
    yhi: usize,
    xlo: usize,
    xhi: usize,
}

/// Checks channel/group bookkeeping and returns `(cout, cin_per_group)`.
fn check_channels<T: Real>(
    cin: usize,
    weight: &Tensor<T>,
    depth: Option<usize>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<(usize, usize)> {
    spec.validate()?;
    let ws = weight.shape();
    let expected_rank = if depth.is_some() { 5 } else { 4 };
    if ws.len() != expected_rank {
        return Err(Error::invalid(format!(
            "weight must have rank {expected_rank}, got shape {ws:?}"
        )));
    }
    let cout = ws[0];
    let cin_g = ws[1];
    let (kh, kw) = (ws[expected_rank - 2], ws[expected_rank - 1]);
    if (kh, kw) != (spec.kernel_h, spec.kernel_w) {
        return Err(Error::invalid(format!(
            "weight kernel {kh}x{kw} does not match spec {}x{}",
            spec.kernel_h, spec.kernel_w
        )));
    }
    if let Some(d) = depth {
        if ws[2] != d {
            return Err(Error::invalid(format!(
                "input depth {d} does not match kernel depth {}",
                ws[2]
            )));
        }
    }
    let g = spec.groups;
    if !cin.is_multiple_of(g) || !cout.is_multiple_of(g) {
        return Err(Error::invalid(format!(
            "groups {g} must divide in ({cin}) and out ({cout}) channels"
        )));
    }
    if cin_g != cin / g {
        return Err(Error::invalid(format!(
            "weight expects {cin_g} input channels per group, input provides {}",
            cin / g
        )));
    }
    if let Some(b) = bias {
        if b.numel() != cout {
            return Err(Error::invalid(format!(
                "bias has {} entries, expected {cout}",
                b.numel()
            )));
        }
    }
    Ok((cout, cin_g))
}

/// 2D cross-correlation (no kernel flip) with stride, dilation, groups and
/// symmetric zero padding.
///
/// `input` is `[B, Cin, H, W]`, `weight` is `[Cout, Cin / groups, kh, kw]`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (b, cin, h, w) = input.dims4()?;
    let (cout, cin_g) = check_channels(cin, weight, None, bias, spec)?;
    let (ho, wo) = spec.output_size(h, w)?;
    let geo = Geometry {
        h,
        w,
        ho,
        wo,
        spec: *spec,
    };
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let cout_g = cout / spec.groups;
    let wd = weight.data();
    let mut out = vec![T::zero(); b * cout * ho * wo];
    for bi in 0..b {
        for oc in 0..cout {
            let group = oc / cout_g;
            let plane = &mut out[(bi * cout + oc) * ho * wo..(bi * cout + oc + 1) * ho * wo];
            if let Some(bias) = bias {
                plane.fill(bias.data()[oc]);
            }
            for icl in 0..cin_g {
                let inp = input.plane(bi, group * cin_g + icl);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wd[((oc * cin_g + icl) * kh + ky) * kw + kx];
                        geo.acc_forward(plane, inp, ky, kx, wv);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, cout, ho, wo], out))
}

/// Gradients of [`conv2d`] given the output gradient:
/// `(d_input, d_weight, d_bias)`.
pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, cin, h, w) = input.dims4().expect("checked in forward");
    let (_, cout, ho, wo) = grad_out.dims4().expect("checked in forward");
    let geo = Geometry {
        h,
        w,
        ho,
        wo,
        spec: *spec,
    };
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let cin_g = cin / spec.groups;
    let cout_g = cout / spec.groups;
    let wd = weight.data();
    let mut gin = vec![T::zero(); input.numel()];
    let mut gw = vec![T::zero(); weight.numel()];
    let mut gb = vec![T::zero(); cout];
    for bi in 0..b {
        for (oc, gbo) in gb.iter_mut().enumerate() {
            let group = oc / cout_g;
            let gplane = grad_out.plane(bi, oc);
            *gbo += gplane.iter().copied().sum();
            for icl in 0..cin_g {
                let ic = group * cin_g + icl;
                let inp = input.plane(bi, ic);
                let gin_plane = &mut gin[(bi * cin + ic) * h * w..(bi * cin + ic + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = ((oc * cin_g + icl) * kh + ky) * kw + kx;
                        geo.acc_grad_input(gin_plane, gplane, ky, kx, wd[widx]);
                        gw[widx] += geo.tap_grad(inp, gplane, ky, kx);
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(input.shape().to_vec(), gin),
        Tensor::from_parts(weight.shape().to_vec(), gw),
        Tensor::from_parts(vec![cout], gb),
    )
}

fn dims5<T: Real>(t: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
    match t.shape()[..] {
        [b, d, c, h, w] => Ok((b, d, c, h, w)),
        _ => Err(Error::invalid(format!(
            "expected a rank-5 (B,D,C,H,W) tensor, got shape {:?}",
            t.shape()
        ))),
    }
}

/// 3D convolution whose kernel depth equals the input depth, so the depth
/// axis collapses.
///
/// `stacked` is `[B, D, C, H, W]` (D planes stacked, e.g. prototype plane and
/// query plane), `weight` is `[Cout, C / groups, D, kh, kw]`. The result is
/// `[B, Cout, H', W']` with the spatial geometry of `spec`.
pub fn conv3d_fuse<T: Real>(
    stacked: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (b, depth, cin, h, w) = dims5(stacked)?;
    let (cout, cin_g) = check_channels(cin, weight, Some(depth), bias, spec)?;
    let (ho, wo) = spec.output_size(h, w)?;
    let geo = Geometry {
        h,
        w,
        ho,
        wo,
        spec: *spec,
    };
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let cout_g = cout / spec.groups;
    let wd = weight.data();
    let sd = stacked.data();
    let hw = h * w;
    let mut out = vec![T::zero(); b * cout * ho * wo];
    for bi in 0..b {
        for oc in 0..cout {
            let group = oc / cout_g;
            let plane = &mut out[(bi * cout + oc) * ho * wo..(bi * cout + oc + 1) * ho * wo];
            if let Some(bias) = bias {
                plane.fill(bias.data()[oc]);
            }
            for icl in 0..cin_g {
                let ic = group * cin_g + icl;
                for d in 0..depth {
                    let start = ((bi * depth + d) * cin + ic) * hw;
                    let inp = &sd[start..start + hw];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = wd[(((oc * cin_g + icl) * depth + d) * kh + ky) * kw + kx];
                            geo.acc_forward(plane, inp, ky, kx, wv);
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, cout, ho, wo], out))
}

pub(crate) fn conv3d_fuse_backward<T: Real>(
    stacked: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, depth, cin, h, w) = dims5(stacked).expect("checked in forward");
    let (_, cout, ho, wo) = grad_out.dims4().expect("checked in forward");
    let geo = Geometry {
        h,
        w,
        ho,
        wo,
        spec: *spec,
    };
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let cin_g = cin / spec.groups;
    let cout_g = cout / spec.groups;
    let wd = weight.data();
    let sd = stacked.data();
    let hw = h * w;
    let mut gin = vec![T::zero(); stacked.numel()];
    let mut gw = vec![T::zero(); weight.numel()];
    let mut gb = vec![T::zero(); cout];
    for bi in 0..b {
        for (oc, gbo) in gb.iter_mut().enumerate() {
            let group = oc / cout_g;
            let gplane = grad_out.plane(bi, oc);
            *gbo += gplane.iter().copied().sum();
            for icl in 0..cin_g {
                let ic = group * cin_g + icl;
                for d in 0..depth {
                    let start = ((bi * depth + d) * cin + ic) * hw;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let widx = (((oc * cin_g + icl) * depth + d) * kh + ky) * kw + kx;
                            geo.acc_grad_input(&mut gin[start..start + hw], gplane, ky, kx, wd[widx]);
                            gw[widx] += geo.tap_grad(&sd[start..start + hw], gplane, ky, kx);
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(stacked.shape().to_vec(), gin),
        Tensor::from_parts(weight.shape().to_vec(), gw),
        Tensor::from_parts(vec![cout], gb),
    )
}
