//! 2-D convolution (cross-correlation) and its transposed form, forward and
//! backward, with zero padding.
//!
//! Parallel layout: every task owns one output plane (or one weight slice in
//! the backward pass) and reduces serially inside it, so results do not
//! depend on the thread count.

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor4;

/// Static description of one convolutional layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
}

impl ConvSpec {
    /// Spatial-preserving 3x3, stride 1, padding 1.
    pub fn k3(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_size: 3,
            stride: 1,
            padding: 1,
            transposed: false,
        }
    }

    /// Pointwise 1x1, stride 1, no padding.
    pub fn k1(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_size: 1,
            stride: 1,
            padding: 0,
            transposed: false,
        }
    }

    /// Transposed 3x3 with stride 2; spatial dims exactly double.
    pub fn upsample2(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_size: 3,
            stride: 2,
            padding: 1,
            transposed: true,
        }
    }

    /// Output padding for the transposed form, fixed so stride-2 doubles dims.
    fn output_padding(&self) -> usize {
        self.stride - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!("conv with zero channels: {self:?}")));
        }
        if self.kernel_size != 1 && self.kernel_size != 3 {
            return Err(Error::Config(format!(
                "kernel size {} not in {{1, 3}}",
                self.kernel_size
            )));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::Config(format!("stride {} not in {{1, 2}}", self.stride)));
        }
        if self.kernel_size == 3 && self.stride == 1 && !self.transposed && self.padding != 1 {
            return Err(Error::Config(
                "3x3 stride-1 convolutions must use padding 1".into(),
            ));
        }
        if self.kernel_size == 1 && self.padding != 0 {
            return Err(Error::Config("1x1 convolutions must use padding 0".into()));
        }
        Ok(())
    }

    /// Output spatial dims for an input of (h, w).
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel_size;
        let s = self.stride;
        let p = self.padding;
        if self.transposed {
            let op = self.output_padding();
            Ok(((h - 1) * s + k + op - 2 * p, (w - 1) * s + k + op - 2 * p))
        } else {
            if h + 2 * p < k || w + 2 * p < k {
                return Err(Error::shape(
                    "conv2d",
                    format!("input {h}x{w} smaller than kernel {k} with padding {p}"),
                ));
            }
            Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
        }
    }
}

fn check_operands(
    input: &Tensor4,
    weight: &Tensor4,
    bias: &[f64],
    spec: &ConvSpec,
) -> Result<()> {
    spec.validate()?;
    let k = spec.kernel_size;
    if weight.dims() != (spec.out_channels, spec.in_channels, k, k) {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight {:?}, expected ({}, {}, {k}, {k})",
                weight.dims(),
                spec.out_channels,
                spec.in_channels
            ),
        ));
    }
    if input.channels() != spec.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input has {} channels, spec expects {}",
                input.channels(),
                spec.in_channels
            ),
        ));
    }
    if bias.len() != spec.out_channels {
        return Err(Error::shape(
            "conv2d",
            format!("bias length {} != {}", bias.len(), spec.out_channels),
        ));
    }
    Ok(())
}

/// Forward convolution. `weight` is (out, in, k, k); `transposed` selects the
/// stride-`s` upsampling form.
pub fn conv2d_forward(
    input: &Tensor4,
    weight: &Tensor4,
    bias: &[f64],
    spec: &ConvSpec,
) -> Result<Tensor4> {
    check_operands(input, weight, bias, spec)?;
    let (b, _, h, w) = input.dims();
    let (oh, ow) = spec.out_hw(h, w)?;
    let mut out = Tensor4::zeros(b, spec.out_channels, oh, ow);

    if spec.transposed {
        transposed_forward_into(input, weight, bias, spec, &mut out);
    } else {
        standard_forward_into(input, weight, bias, spec, &mut out);
    }
    Ok(out)
}

fn standard_forward_into(
    input: &Tensor4,
    weight: &Tensor4,
    bias: &[f64],
    spec: &ConvSpec,
    out: &mut Tensor4,
) {
    let (batch, ic, h, w) = input.dims();
    let (_, oc, oh, ow) = out.dims();
    let k = spec.kernel_size;
    let s = spec.stride;
    let p = spec.padding as isize;

    exec::for_each_chunk(out.data_mut(), batch * oc, |plane_idx, out_plane| {
        let bi = plane_idx / oc;
        let o = plane_idx % oc;
        out_plane.fill(bias[o]);
        for i in 0..ic {
            let in_plane = input.plane(bi, i);
            for kh in 0..k {
                for kw in 0..k {
                    let wv = weight.at(o, i, kh, kw);
                    for ohh in 0..oh {
                        let ih = (ohh * s) as isize + kh as isize - p;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let in_row = &in_plane[ih as usize * w..ih as usize * w + w];
                        let out_row = &mut out_plane[ohh * ow..ohh * ow + ow];
                        if s == 1 {
                            // iw = ow + kw - p must lie in [0, w)
                            let shift = kw as isize - p;
                            let lo = (-shift).max(0) as usize;
                            let hi = ow.min((w as isize - shift).max(0) as usize);
                            if lo >= hi {
                                continue;
                            }
                            let src = &in_row[(lo as isize + shift) as usize
                                ..(hi as isize + shift) as usize];
                            for (ov, iv) in out_row[lo..hi].iter_mut().zip(src) {
                                *ov += wv * iv;
                            }
                        } else {
                            for (oww, ov) in out_row.iter_mut().enumerate() {
                                let iw = (oww * s) as isize + kw as isize - p;
                                if iw >= 0 && iw < w as isize {
                                    *ov += wv * in_row[iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

fn transposed_forward_into(
    input: &Tensor4,
    weight: &Tensor4,
    bias: &[f64],
    spec: &ConvSpec,
    out: &mut Tensor4,
) {
    let (batch, ic, h, w) = input.dims();
    let (_, oc, oh, ow) = out.dims();
    let k = spec.kernel_size;
    let s = spec.stride as isize;
    let p = spec.padding as isize;

    // gather form: out[oh, ow] sums input[(oh + p - kh)/s, (ow + p - kw)/s]
    exec::for_each_chunk(out.data_mut(), batch * oc, |plane_idx, out_plane| {
        let bi = plane_idx / oc;
        let o = plane_idx % oc;
        out_plane.fill(bias[o]);
        for i in 0..ic {
            let in_plane = input.plane(bi, i);
            for kh in 0..k {
                for kw in 0..k {
                    let wv = weight.at(o, i, kh, kw);
                    for ohh in 0..oh {
                        let t = ohh as isize + p - kh as isize;
                        if t < 0 || t % s != 0 {
                            continue;
                        }
                        let ih = t / s;
                        if ih >= h as isize {
                            continue;
                        }
                        let in_row = &in_plane[ih as usize * w..ih as usize * w + w];
                        let out_row = &mut out_plane[ohh * ow..ohh * ow + ow];
                        for (oww, ov) in out_row.iter_mut().enumerate() {
                            let u = oww as isize + p - kw as isize;
                            if u >= 0 && u % s == 0 {
                                let iw = u / s;
                                if iw < w as isize {
                                    *ov += wv * in_row[iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Backward convolution: gradients for input, weight and bias.
pub fn conv2d_backward(
    grad_out: &Tensor4,
    saved_input: &Tensor4,
    weight: &Tensor4,
    spec: &ConvSpec,
) -> Result<(Tensor4, Tensor4, Vec<f64>)> {
    check_operands(saved_input, weight, &vec![0.0; spec.out_channels], spec)?;
    let (b, ic, h, w) = saved_input.dims();
    let (oh, ow) = spec.out_hw(h, w)?;
    if grad_out.dims() != (b, spec.out_channels, oh, ow) {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "grad_out {:?}, forward output was ({b}, {}, {oh}, {ow})",
                grad_out.dims(),
                spec.out_channels
            ),
        ));
    }
    let oc = spec.out_channels;
    let k = spec.kernel_size;

    let mut grad_input = Tensor4::zeros(b, ic, h, w);
    let mut grad_weight = Tensor4::zeros(oc, ic, k, k);

    if spec.transposed {
        transposed_backward(grad_out, saved_input, weight, spec, &mut grad_input, &mut grad_weight);
    } else {
        standard_backward(grad_out, saved_input, weight, spec, &mut grad_input, &mut grad_weight);
    }

    // bias gradient: one plane sum per output channel
    let grad_bias = exec::map_indexed(oc, |o| {
        let mut acc = 0.0;
        for bi in 0..b {
            acc += grad_out.plane(bi, o).iter().sum::<f64>();
        }
        acc
    });

    Ok((grad_input, grad_weight, grad_bias))
}

fn standard_backward(
    grad_out: &Tensor4,
    input: &Tensor4,
    weight: &Tensor4,
    spec: &ConvSpec,
    grad_input: &mut Tensor4,
    grad_weight: &mut Tensor4,
) {
    let (batch, ic, h, w) = input.dims();
    let (_, oc, oh, ow) = grad_out.dims();
    let k = spec.kernel_size;
    let s = spec.stride;
    let p = spec.padding as isize;

    // d/d input: each task owns one (batch, in-channel) plane
    exec::for_each_chunk(grad_input.data_mut(), batch * ic, |plane_idx, gin_plane| {
        let bi = plane_idx / ic;
        let i = plane_idx % ic;
        for o in 0..oc {
            let gout_plane = grad_out.plane(bi, o);
            for kh in 0..k {
                for kw in 0..k {
                    let wv = weight.at(o, i, kh, kw);
                    for ohh in 0..oh {
                        let ih = (ohh * s) as isize + kh as isize - p;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let gout_row = &gout_plane[ohh * ow..ohh * ow + ow];
                        let gin_row =
                            &mut gin_plane[ih as usize * w..ih as usize * w + w];
                        if s == 1 {
                            let shift = kw as isize - p;
                            let lo = (-shift).max(0) as usize;
                            let hi = ow.min((w as isize - shift).max(0) as usize);
                            if lo >= hi {
                                continue;
                            }
                            let dst = &mut gin_row[(lo as isize + shift) as usize
                                ..(hi as isize + shift) as usize];
                            for (gv, ov) in dst.iter_mut().zip(&gout_row[lo..hi]) {
                                *gv += wv * ov;
                            }
                        } else {
                            for (oww, ov) in gout_row.iter().enumerate() {
                                let iw = (oww * s) as isize + kw as isize - p;
                                if iw >= 0 && iw < w as isize {
                                    gin_row[iw as usize] += wv * ov;
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    // d/d weight: each task owns one (out-channel, in-channel) slice
    exec::for_each_chunk(grad_weight.data_mut(), oc * ic, |pair_idx, gw_slice| {
        let o = pair_idx / ic;
        let i = pair_idx % ic;
        for kh in 0..k {
            for kw in 0..k {
                let mut acc = 0.0;
                for bi in 0..batch {
                    let in_plane = input.plane(bi, i);
                    let gout_plane = grad_out.plane(bi, o);
                    for ohh in 0..oh {
                        let ih = (ohh * s) as isize + kh as isize - p;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let in_row = &in_plane[ih as usize * w..ih as usize * w + w];
                        let gout_row = &gout_plane[ohh * ow..ohh * ow + ow];
                        if s == 1 {
                            let shift = kw as isize - p;
                            let lo = (-shift).max(0) as usize;
                            let hi = ow.min((w as isize - shift).max(0) as usize);
                            if lo >= hi {
                                continue;
                            }
                            let src = &in_row[(lo as isize + shift) as usize
                                ..(hi as isize + shift) as usize];
                            acc += gout_row[lo..hi]
                                .iter()
                                .zip(src)
                                .map(|(g, x)| g * x)
                                .sum::<f64>();
                        } else {
                            for (oww, gv) in gout_row.iter().enumerate() {
                                let iw = (oww * s) as isize + kw as isize - p;
                                if iw >= 0 && iw < w as isize {
                                    acc += gv * in_row[iw as usize];
                                }
                            }
                        }
                    }
                }
                gw_slice[kh * k + kw] = acc;
            }
        }
    });
}

fn transposed_backward(
    grad_out: &Tensor4,
    input: &Tensor4,
    weight: &Tensor4,
    spec: &ConvSpec,
    grad_input: &mut Tensor4,
    grad_weight: &mut Tensor4,
) {
    let (batch, ic, h, w) = input.dims();
    let (_, oc, oh, ow) = grad_out.dims();
    let k = spec.kernel_size;
    let s = spec.stride as isize;
    let p = spec.padding as isize;

    // input position (ih, iw) scattered to (ih*s - p + kh, iw*s - p + kw)
    exec::for_each_chunk(grad_input.data_mut(), batch * ic, |plane_idx, gin_plane| {
        let bi = plane_idx / ic;
        let i = plane_idx % ic;
        for o in 0..oc {
            let gout_plane = grad_out.plane(bi, o);
            for kh in 0..k {
                for kw in 0..k {
                    let wv = weight.at(o, i, kh, kw);
                    for ih in 0..h {
                        let ohh = ih as isize * s - p + kh as isize;
                        if ohh < 0 || ohh >= oh as isize {
                            continue;
                        }
                        let gout_row =
                            &gout_plane[ohh as usize * ow..ohh as usize * ow + ow];
                        let gin_row = &mut gin_plane[ih * w..ih * w + w];
                        for (iw, gv) in gin_row.iter_mut().enumerate() {
                            let oww = iw as isize * s - p + kw as isize;
                            if oww >= 0 && oww < ow as isize {
                                *gv += wv * gout_row[oww as usize];
                            }
                        }
                    }
                }
            }
        }
    });

    exec::for_each_chunk(grad_weight.data_mut(), oc * ic, |pair_idx, gw_slice| {
        let o = pair_idx / ic;
        let i = pair_idx % ic;
        for kh in 0..k {
            for kw in 0..k {
                let mut acc = 0.0;
                for bi in 0..batch {
                    let in_plane = input.plane(bi, i);
                    let gout_plane = grad_out.plane(bi, o);
                    for ih in 0..h {
                        let ohh = ih as isize * s - p + kh as isize;
                        if ohh < 0 || ohh >= oh as isize {
                            continue;
                        }
                        let in_row = &in_plane[ih * w..ih * w + w];
                        let gout_row =
                            &gout_plane[ohh as usize * ow..ohh as usize * ow + ow];
                        for (iw, xv) in in_row.iter().enumerate() {
                            let oww = iw as isize * s - p + kw as isize;
                            if oww >= 0 && oww < ow as isize {
                                acc += xv * gout_row[oww as usize];
                            }
                        }
                    }
                }
                gw_slice[kh * k + kw] = acc;
            }
        }
    });
}
