//! Direct 2-D cross-correlation with stride, dilation, zero padding and channel groups.

use serde::{Deserialize, Serialize};

use super::{Float, Tensor};
use crate::error::{config_err, dim_err, Result};
use crate::par;

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl ConvSpec {
    /// Square kernel, stride 1, no dilation, no padding, one group.
    pub fn square(kernel: usize) -> Self {
        ConvSpec {
            kernel: (kernel, kernel),
            stride: (1, 1),
            dilation: (1, 1),
            padding: (0, 0),
            groups: 1,
        }
    }

    pub fn with_stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn with_dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }

    pub fn with_padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub fn with_groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    /// Padding that keeps branches of different dilation spatially aligned:
    /// `dilation * (kernel - 1) / 2`. With stride `s` and an input divisible
    /// by `s` this yields exactly `input / s` outputs for odd kernels.
    pub fn aligned(kernel: usize, stride: usize, dilation: usize) -> Self {
        ConvSpec::square(kernel)
            .with_stride(stride)
            .with_dilation(dilation)
            .with_padding(dilation * (kernel - 1) / 2)
    }

    fn axis_out(input: usize, k: usize, s: usize, d: usize, p: usize) -> Option<usize> {
        let span = d * (k - 1) + 1;
        let padded = input + 2 * p;
        if s == 0 || padded < span {
            return None;
        }
        Some((padded - span) / s + 1)
    }

    /// Output spatial size for an `h×w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.dilation.0 == 0 || self.dilation.1 == 0
        {
            return Err(config_err!("convolution kernel and dilation must be positive: {self:?}"));
        }
        let oh = Self::axis_out(h, self.kernel.0, self.stride.0, self.dilation.0, self.padding.0);
        let ow = Self::axis_out(w, self.kernel.1, self.stride.1, self.dilation.1, self.padding.1);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok((oh, ow)),
            _ => Err(config_err!(
                "convolution {self:?} has no valid output position on a {h}x{w} input"
            )),
        }
    }
}

/// Resolved sizes of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub oh: usize,
    pub ow: usize,
    pub spec: ConvSpec,
}

impl ConvDims {
    pub fn resolve(x_shape: &[usize], w_shape: &[usize], spec: ConvSpec) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(dim_err!(
                "conv2d expects NCHW input and OIHW weight, got {:?} and {:?}",
                x_shape,
                w_shape
            ));
        }
        let (n, cin, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (cout, cin_g, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        let g = spec.groups;
        if g == 0 || cin % g != 0 || cout % g != 0 {
            return Err(dim_err!(
                "groups={g} must divide input channels {cin} and output channels {cout}"
            ));
        }
        if cin_g != cin / g {
            return Err(dim_err!(
                "weight expects {cin_g} input channels per group, input provides {}",
                cin / g
            ));
        }
        if (kh, kw) != spec.kernel {
            return Err(dim_err!(
                "weight kernel {kh}x{kw} disagrees with spec {:?}",
                spec.kernel
            ));
        }
        let (oh, ow) = spec.output_size(h, w)?;
        Ok(ConvDims {
            n,
            cin,
            h,
            w,
            cout,
            oh,
            ow,
            spec,
        })
    }

    fn cin_g(&self) -> usize {
        self.cin / self.spec.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.spec.groups
    }

    fn macs(&self) -> usize {
        self.n * self.cout * self.oh * self.ow * self.cin_g() * self.spec.kernel.0 * self.spec.kernel.1
    }
}

/// Output index range `[lo, hi)` whose input coordinate `o*s + k*d - p` lies in `[0, len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, s: usize, offset: isize) -> (usize, usize) {
    // input = o*s + offset
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(s)
    };
    let last_ok = in_len as isize - 1 - offset;
    let hi = if last_ok < 0 {
        0
    } else {
        (last_ok as usize / s + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

/// Forward cross-correlation. `bias`, when given, has `cout` entries.
pub fn conv2d_forward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let dims = ConvDims::resolve(x.shape(), weight.shape(), spec)?;
    if let Some(b) = bias {
        if b.numel() != dims.cout {
            return Err(dim_err!(
                "bias has {} entries, expected {}",
                b.numel(),
                dims.cout
            ));
        }
    }
    Ok(forward_kernel(x.data(), weight.data(), bias.map(|b| b.data()), &dims))
}

pub(crate) fn forward_kernel<T: Float>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
) -> Tensor<T> {
    let ConvDims {
        n,
        cin,
        h,
        w,
        cout,
        oh,
        ow,
        spec,
    } = *d;
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (dh, dw) = spec.dilation;
    let (ph, pw) = spec.padding;
    let cin_g = d.cin_g();
    let cout_g = d.cout_g();
    let plane = oh * ow;
    let mut out = vec![T::zero(); n * cout * plane];
    let parallel = par::worth_it(d.macs(), n * cout);
    par::for_each_chunk(&mut out, plane.max(1), parallel, |idx, o| {
        let (b, oc) = (idx / cout, idx % cout);
        let g = oc / cout_g;
        if let Some(bias) = bias {
            o.fill(bias[oc]);
        }
        for icl in 0..cin_g {
            let ic = g * cin_g + icl;
            let xin = &x[(b * cin + ic) * h * w..(b * cin + ic + 1) * h * w];
            let wbase = (oc * cin_g + icl) * kh * kw;
            for ky in 0..kh {
                let off_y = (ky * dh) as isize - ph as isize;
                let (y0, y1) = valid_range(oh, h, sh, off_y);
                for kx in 0..kw {
                    let wv = weight[wbase + ky * kw + kx];
                    let off_x = (kx * dw) as isize - pw as isize;
                    let (x0, x1) = valid_range(ow, w, sw, off_x);
                    if x0 >= x1 {
                        continue;
                    }
                    for oy in y0..y1 {
                        let iy = (oy * sh) as isize + off_y;
                        let row = &xin[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut o[oy * ow..(oy + 1) * ow];
                        let ix0 = (x0 * sw) as isize + off_x;
                        if sw == 1 {
                            let src = &row[ix0 as usize..ix0 as usize + (x1 - x0)];
                            for (ov, &xv) in orow[x0..x1].iter_mut().zip(src) {
                                *ov += wv * xv;
                            }
                        } else {
                            for (j, ov) in orow[x0..x1].iter_mut().enumerate() {
                                *ov += wv * row[ix0 as usize + j * sw];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor {
        shape: vec![n, cout, oh, ow],
        data: out,
    }
}

/// Gradient with respect to the input.
pub(crate) fn backward_input<T: Float>(dy: &[T], weight: &[T], d: &ConvDims) -> Vec<T> {
    let ConvDims {
        cin,
        h,
        w,
        cout,
        oh,
        ow,
        spec,
        ..
    } = *d;
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (dh, dw) = spec.dilation;
    let (ph, pw) = spec.padding;
    let cin_g = d.cin_g();
    let cout_g = d.cout_g();
    let mut dx = vec![T::zero(); d.n * cin * h * w];
    let parallel = par::worth_it(d.macs(), d.n * cin);
    par::for_each_chunk(&mut dx, (h * w).max(1), parallel, |idx, dxp| {
        let (b, ic) = (idx / cin, idx % cin);
        let g = ic / cin_g;
        let icl = ic % cin_g;
        for ocl in 0..cout_g {
            let oc = g * cout_g + ocl;
            let dyp = &dy[(b * cout + oc) * oh * ow..(b * cout + oc + 1) * oh * ow];
            let wbase = (oc * cin_g + icl) * kh * kw;
            for ky in 0..kh {
                let off_y = (ky * dh) as isize - ph as isize;
                let (y0, y1) = valid_range(oh, h, sh, off_y);
                for kx in 0..kw {
                    let wv = weight[wbase + ky * kw + kx];
                    let off_x = (kx * dw) as isize - pw as isize;
                    let (x0, x1) = valid_range(ow, w, sw, off_x);
                    for oy in y0..y1 {
                        let iy = ((oy * sh) as isize + off_y) as usize;
                        let drow = &dyp[oy * ow..(oy + 1) * ow];
                        let xrow = &mut dxp[iy * w..(iy + 1) * w];
                        for ox in x0..x1 {
                            let ix = ((ox * sw) as isize + off_x) as usize;
                            xrow[ix] += wv * drow[ox];
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Gradient with respect to the weight.
pub(crate) fn backward_weight<T: Float>(dy: &[T], x: &[T], d: &ConvDims) -> Vec<T> {
    let ConvDims {
        n,
        cin,
        h,
        w,
        cout,
        oh,
        ow,
        spec,
    } = *d;
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (dh, dw) = spec.dilation;
    let (ph, pw) = spec.padding;
    let cin_g = d.cin_g();
    let cout_g = d.cout_g();
    let per_oc = cin_g * kh * kw;
    let mut dw_buf = vec![T::zero(); cout * per_oc];
    let parallel = par::worth_it(d.macs(), cout);
    par::for_each_chunk(&mut dw_buf, per_oc.max(1), parallel, |oc, dwo| {
        let g = oc / cout_g;
        for icl in 0..cin_g {
            let ic = g * cin_g + icl;
            for ky in 0..kh {
                let off_y = (ky * dh) as isize - ph as isize;
                let (y0, y1) = valid_range(oh, h, sh, off_y);
                for kx in 0..kw {
                    let off_x = (kx * dw) as isize - pw as isize;
                    let (x0, x1) = valid_range(ow, w, sw, off_x);
                    let mut acc = T::zero();
                    for b in 0..n {
                        let dyp = &dy[(b * cout + oc) * oh * ow..(b * cout + oc + 1) * oh * ow];
                        let xp = &x[(b * cin + ic) * h * w..(b * cin + ic + 1) * h * w];
                        for oy in y0..y1 {
                            let iy = ((oy * sh) as isize + off_y) as usize;
                            let drow = &dyp[oy * ow..(oy + 1) * ow];
                            let xrow = &xp[iy * w..(iy + 1) * w];
                            for ox in x0..x1 {
                                let ix = ((ox * sw) as isize + off_x) as usize;
                                acc += drow[ox] * xrow[ix];
                            }
                        }
                    }
                    dwo[(icl * kh + ky) * kw + kx] = acc;
                }
            }
        }
    });
    dw_buf
}

pub(crate) fn backward_bias<T: Float>(dy: &[T], d: &ConvDims) -> Vec<T> {
    let plane = d.oh * d.ow;
    let mut db = vec![T::zero(); d.cout];
    for b in 0..d.n {
        for (oc, acc) in db.iter_mut().enumerate() {
            let p = &dy[(b * d.cout + oc) * plane..(b * d.cout + oc + 1) * plane];
            *acc += p.iter().copied().sum::<T>();
        }
    }
    db
}
