//! Image quality metrics: PSNR and single-scale SSIM.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// PSNR on identical images is reported as this cap instead of infinity.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

/// Peak signal-to-noise ratio in dB; `peak` is 1.0 for [0,1] images.
pub fn psnr(a: &Tensor4, b: &Tensor4, peak: f64) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::shape(
            "psnr",
            format!("left {:?} vs right {:?}", a.dims(), b.dims()),
        ));
    }
    let n = a.len() as f64;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean local structural similarity over all valid 11x11 windows, averaged
/// across channels and batch. Peak is fixed at 1.0.
pub fn ssim(a: &Tensor4, b: &Tensor4) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::shape(
            "ssim",
            format!("left {:?} vs right {:?}", a.dims(), b.dims()),
        ));
    }
    let (batch, channels, h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidParam(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let peak = 1.0;
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let win = gaussian_window();

    let mut total = 0.0;
    let mut count = 0usize;
    for bi in 0..batch {
        for ci in 0..channels {
            let pa = a.plane(bi, ci);
            let pb = b.plane(bi, ci);
            for y0 in 0..=(h - SSIM_WINDOW) {
                for x0 in 0..=(w - SSIM_WINDOW) {
                    let mut mx = 0.0;
                    let mut my = 0.0;
                    let mut xx = 0.0;
                    let mut yy = 0.0;
                    let mut xy = 0.0;
                    for wy in 0..SSIM_WINDOW {
                        let row = (y0 + wy) * w + x0;
                        for wx in 0..SSIM_WINDOW {
                            let g = win[wy * SSIM_WINDOW + wx];
                            let xv = pa[row + wx];
                            let yv = pb[row + wx];
                            mx += g * xv;
                            my += g * yv;
                            xx += g * xv * xv;
                            yy += g * yv * yv;
                            xy += g * xv * yv;
                        }
                    }
                    let vx = xx - mx * mx;
                    let vy = yy - my * my;
                    let cov = xy - mx * my;
                    let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    total += s;
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

/// Per-image metric rows plus the dataset mean.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub rows: Vec<(String, f64, f64)>,
}

impl MetricReport {
    pub fn push(&mut self, id: impl Into<String>, psnr_db: f64, ssim_val: f64) {
        self.rows.push((id.into(), psnr_db, ssim_val));
    }

    pub fn mean_psnr(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.1).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.2).sum::<f64>() / self.rows.len() as f64
    }

    /// Line-oriented text: one `id<TAB>psnr<TAB>ssim` row per image plus a
    /// trailing MEAN row.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (id, p, m) in &self.rows {
            s.push_str(&format!("{id}\t{p:.4}\t{m:.6}\n"));
        }
        s.push_str(&format!(
            "MEAN\t{:.4}\t{:.6}\n",
            self.mean_psnr(),
            self.mean_ssim()
        ));
        s
    }
}
