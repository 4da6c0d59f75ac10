//! 2x2 average pooling and nearest-neighbour upsampling.

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor4;

/// 2x2 mean pooling; spatial dims must be even.
pub fn avg_pool2(input: &Tensor4) -> Result<Tensor4> {
    let (b, c, h, w) = input.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "avg_pool2",
            format!("spatial dims {h}x{w} not even"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros(b, c, oh, ow);
    exec::for_each_chunk(out.data_mut(), b * c, |plane_idx, out_plane| {
        let in_plane = input.plane(plane_idx / c, plane_idx % c);
        for y in 0..oh {
            let r0 = &in_plane[2 * y * w..2 * y * w + w];
            let r1 = &in_plane[(2 * y + 1) * w..(2 * y + 1) * w + w];
            let out_row = &mut out_plane[y * ow..y * ow + ow];
            for (x, ov) in out_row.iter_mut().enumerate() {
                *ov = 0.25 * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]);
            }
        }
    });
    Ok(out)
}

/// Backward of [`avg_pool2`]: each input position gets a quarter of the
/// upstream gradient of its window.
pub fn avg_pool2_backward(grad_out: &Tensor4, in_h: usize, in_w: usize) -> Result<Tensor4> {
    let (b, c, oh, ow) = grad_out.dims();
    if in_h != 2 * oh || in_w != 2 * ow {
        return Err(Error::shape(
            "avg_pool2_backward",
            format!("input {in_h}x{in_w} vs pooled {oh}x{ow}"),
        ));
    }
    let mut grad_in = Tensor4::zeros(b, c, in_h, in_w);
    exec::for_each_chunk(grad_in.data_mut(), b * c, |plane_idx, gin_plane| {
        let gout_plane = grad_out.plane(plane_idx / c, plane_idx % c);
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * gout_plane[y * ow + x];
                gin_plane[2 * y * in_w + 2 * x] = g;
                gin_plane[2 * y * in_w + 2 * x + 1] = g;
                gin_plane[(2 * y + 1) * in_w + 2 * x] = g;
                gin_plane[(2 * y + 1) * in_w + 2 * x + 1] = g;
            }
        }
    });
    Ok(grad_in)
}

/// Repeat every value into a 2x2 block.
pub fn upsample_nearest2(input: &Tensor4) -> Tensor4 {
    let (b, c, h, w) = input.dims();
    let mut out = Tensor4::zeros(b, c, 2 * h, 2 * w);
    let ow = 2 * w;
    exec::for_each_chunk(out.data_mut(), b * c, |plane_idx, out_plane| {
        let in_plane = input.plane(plane_idx / c, plane_idx % c);
        for y in 0..h {
            for x in 0..w {
                let v = in_plane[y * w + x];
                out_plane[2 * y * ow + 2 * x] = v;
                out_plane[2 * y * ow + 2 * x + 1] = v;
                out_plane[(2 * y + 1) * ow + 2 * x] = v;
                out_plane[(2 * y + 1) * ow + 2 * x + 1] = v;
            }
        }
    });
    out
}

/// Apply [`avg_pool2`] `times` times.
pub fn avg_pool2_n(input: &Tensor4, times: usize) -> Result<Tensor4> {
    let mut t = input.clone();
    for _ in 0..times {
        t = avg_pool2(&t)?;
    }
    Ok(t)
}
