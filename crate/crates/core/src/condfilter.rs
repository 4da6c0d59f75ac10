//! Content-conditioned filtering: per-position kernels inferred from image
//! and noise features, combined by Hadamard product and applied with
//! channel-group sharing.

use crate::error::{Error, Result};
use crate::exec;
use crate::layers::{Conv, Init, PRelu};
use crate::ops::ConvSpec;
use crate::params::ParamStore;
use crate::rng::DetRng;
use crate::tensor::Tensor4;

/// Conditional-filter geometry: kernel size `k`, channel-group count `g`,
/// and the channel count `channels` of the features being filtered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CfbConfig {
    pub k: usize,
    pub g: usize,
    pub channels: usize,
}

impl CfbConfig {
    pub fn new(k: usize, g: usize, channels: usize) -> Result<Self> {
        let cfg = CfbConfig { k, g, channels };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k % 2 == 0 {
            return Err(Error::Config(format!("kernel size {} must be odd", self.k)));
        }
        if self.g == 0 {
            return Err(Error::Config("group count must be positive".into()));
        }
        if self.channels == 0 || self.channels % self.g != 0 {
            return Err(Error::Config(format!(
                "channel count {} not divisible by group count {}",
                self.channels, self.g
            )));
        }
        Ok(())
    }

    /// Channels sharing one kernel.
    pub fn sharing(&self) -> usize {
        self.channels / self.g
    }
}

/// Per-position kernels of logical shape (B, g, k^2, H, W), stored as a
/// rank-4 tensor with the g and k^2 axes flattened into the channel axis.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelField {
    data: Tensor4,
    pub k: usize,
    pub g: usize,
}

impl KernelField {
    pub fn from_tensor(data: Tensor4, k: usize, g: usize) -> Result<Self> {
        if data.channels() != g * k * k {
            return Err(Error::shape(
                "kernel_field",
                format!(
                    "tensor has {} channels, expected g*k^2 = {}",
                    data.channels(),
                    g * k * k
                ),
            ));
        }
        Ok(KernelField { data, k, g })
    }

    pub fn tensor(&self) -> &Tensor4 {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor4 {
        self.data
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.data.dims()
    }

    /// Kernel weight at (batch, group, window index, position).
    #[inline]
    pub fn at(&self, b: usize, group: usize, idx: usize, h: usize, w: usize) -> f64 {
        self.data.at(b, group * self.k * self.k + idx, h, w)
    }

    /// The k^2 weights of one position, row-major over the window.
    pub fn kernel_at(&self, b: usize, group: usize, h: usize, w: usize) -> Vec<f64> {
        (0..self.k * self.k)
            .map(|i| self.at(b, group, i, h, w))
            .collect()
    }
}

/// The conditional kernel tau = mu * gamma, elementwise.
pub fn hadamard_kernels(mu: &KernelField, gamma: &KernelField) -> Result<KernelField> {
    if mu.dims() != gamma.dims() || mu.k != gamma.k || mu.g != gamma.g {
        return Err(Error::shape(
            "hadamard_kernels",
            format!("mu {:?} vs gamma {:?}", mu.dims(), gamma.dims()),
        ));
    }
    Ok(KernelField {
        data: mu.data.mul(&gamma.data)?,
        k: mu.k,
        g: mu.g,
    })
}

/// Product-rule gradients of [`hadamard_kernels`].
pub fn hadamard_kernels_backward(
    grad_tau: &Tensor4,
    mu: &KernelField,
    gamma: &KernelField,
) -> Result<(Tensor4, Tensor4)> {
    Ok((grad_tau.mul(&gamma.data)?, grad_tau.mul(&mu.data)?))
}

fn check_cc_operands(features: &Tensor4, tau: &KernelField, cfg: &CfbConfig) -> Result<()> {
    cfg.validate()?;
    if features.channels() != cfg.channels {
        return Err(Error::Config(format!(
            "features carry {} channels, config expects {}",
            features.channels(),
            cfg.channels
        )));
    }
    let (fb, _, fh, fw) = features.dims();
    let (tb, _, th, tw) = tau.dims();
    if (fb, fh, fw) != (tb, th, tw) || tau.k != cfg.k || tau.g != cfg.g {
        return Err(Error::shape(
            "conditional_conv",
            format!(
                "features {:?} vs kernels {:?} (k {}, g {})",
                features.dims(),
                tau.dims(),
                tau.k,
                tau.g
            ),
        ));
    }
    Ok(())
}

/// Filter `features` with one inferred kernel per spatial position per
/// channel group; the window is zero padded at the borders.
pub fn conditional_conv(
    features: &Tensor4,
    tau: &KernelField,
    cfg: &CfbConfig,
) -> Result<Tensor4> {
    check_cc_operands(features, tau, cfg)?;
    let (b, c, h, w) = features.dims();
    let k = cfg.k;
    let r = cfg.sharing();
    let half = (k / 2) as isize;
    let k2 = k * k;

    let mut out = Tensor4::zeros(b, c, h, w);
    exec::for_each_chunk(out.data_mut(), b * c, |plane_idx, out_plane| {
        let bi = plane_idx / c;
        let ci = plane_idx % c;
        let group = ci / r;
        let f_plane = features.plane(bi, ci);
        for (idx, (dy, dx)) in window_offsets(k).enumerate() {
            let t_plane = tau.data.plane(bi, group * k2 + idx);
            for y in 0..h {
                let sy = y as isize + dy - half;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let f_row = &f_plane[sy as usize * w..sy as usize * w + w];
                let t_row = &t_plane[y * w..y * w + w];
                let o_row = &mut out_plane[y * w..y * w + w];
                let shift = dx - half;
                let lo = (-shift).max(0) as usize;
                let hi = w.min((w as isize - shift).max(0) as usize);
                for x in lo..hi {
                    o_row[x] += t_row[x] * f_row[(x as isize + shift) as usize];
                }
            }
        }
    });
    Ok(out)
}

/// Gradients of [`conditional_conv`] for the features and the kernel field.
pub fn conditional_conv_backward(
    grad_out: &Tensor4,
    features: &Tensor4,
    tau: &KernelField,
    cfg: &CfbConfig,
) -> Result<(Tensor4, Tensor4)> {
    check_cc_operands(features, tau, cfg)?;
    if !grad_out.same_dims(features) {
        return Err(Error::shape(
            "conditional_conv_backward",
            format!(
                "grad {:?} vs features {:?}",
                grad_out.dims(),
                features.dims()
            ),
        ));
    }
    let (b, c, h, w) = features.dims();
    let k = cfg.k;
    let r = cfg.sharing();
    let half = (k / 2) as isize;
    let k2 = k * k;

    // d/d features: position q collects tau[idx, q-u] * grad[q-u]
    let mut grad_features = Tensor4::zeros(b, c, h, w);
    exec::for_each_chunk(grad_features.data_mut(), b * c, |plane_idx, gf_plane| {
        let bi = plane_idx / c;
        let ci = plane_idx % c;
        let group = ci / r;
        let g_plane = grad_out.plane(bi, ci);
        for (idx, (dy, dx)) in window_offsets(k).enumerate() {
            let t_plane = tau.data.plane(bi, group * k2 + idx);
            for y in 0..h {
                // center position p with p.y = q.y - (dy - half)
                let py = y as isize - (dy - half);
                if py < 0 || py >= h as isize {
                    continue;
                }
                let t_row = &t_plane[py as usize * w..py as usize * w + w];
                let g_row = &g_plane[py as usize * w..py as usize * w + w];
                let gf_row = &mut gf_plane[y * w..y * w + w];
                let shift = dx - half;
                // q.x = p.x + shift, so p.x = q.x - shift
                let lo = shift.max(0) as usize;
                let hi = w.min((w as isize + shift).max(0) as usize);
                for x in lo..hi {
                    let px = (x as isize - shift) as usize;
                    gf_row[x] += t_row[px] * g_row[px];
                }
            }
        }
    });

    // d/d tau: each (batch, group, window index) plane sums its r channels
    let mut grad_tau = Tensor4::zeros(b, cfg.g * k2, h, w);
    exec::for_each_chunk(grad_tau.data_mut(), b * cfg.g * k2, |plane_idx, gt_plane| {
        let bi = plane_idx / (cfg.g * k2);
        let rest = plane_idx % (cfg.g * k2);
        let group = rest / k2;
        let idx = rest % k2;
        let dy = (idx / k) as isize;
        let dx = (idx % k) as isize;
        for ci in group * r..(group + 1) * r {
            let f_plane = features.plane(bi, ci);
            let g_plane = grad_out.plane(bi, ci);
            for y in 0..h {
                let sy = y as isize + dy - half;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let f_row = &f_plane[sy as usize * w..sy as usize * w + w];
                let g_row = &g_plane[y * w..y * w + w];
                let gt_row = &mut gt_plane[y * w..y * w + w];
                let shift = dx - half;
                let lo = (-shift).max(0) as usize;
                let hi = w.min((w as isize - shift).max(0) as usize);
                for x in lo..hi {
                    gt_row[x] += g_row[x] * f_row[(x as isize + shift) as usize];
                }
            }
        }
    });

    Ok((grad_features, grad_tau))
}

/// Row-major window offsets (dy, dx) in [0, k) x [0, k).
fn window_offsets(k: usize) -> impl Iterator<Item = (isize, isize)> {
    (0..k as isize).flat_map(move |dy| (0..k as isize).map(move |dx| (dy, dx)))
}

/// Five-layer kernel generation subnetwork mapping C feature channels to
/// g*k^2 kernel channels: two 3x3 stages, then a 1x1 bottleneck at C/2, no
/// activation on the last layer so kernels can take negative weights.
#[derive(Debug, Clone)]
pub struct KernelGenerator {
    conv1: Conv,
    act1: PRelu,
    conv2: Conv,
    act2: PRelu,
    conv3: Conv,
    act3: PRelu,
    conv4: Conv,
    act4: PRelu,
    conv5: Conv,
    cfg: CfbConfig,
}

/// Saved activations of one generator forward pass.
#[derive(Debug, Clone)]
pub struct KernelGeneratorCtx {
    input: Tensor4,
    c1: Tensor4,
    a1: Tensor4,
    c2: Tensor4,
    a2: Tensor4,
    c3: Tensor4,
    a3: Tensor4,
    c4: Tensor4,
    a4: Tensor4,
}

impl KernelGenerator {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut DetRng,
        name: &str,
        in_channels: usize,
        cfg: CfbConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mid = (in_channels / 2).max(1);
        let out = cfg.g * cfg.k * cfg.k;
        Ok(KernelGenerator {
            conv1: Conv::build(
                store,
                rng,
                &format!("{name}.conv1"),
                ConvSpec::k3(in_channels, in_channels),
                Init::Kaiming,
            )?,
            act1: PRelu::build(store, &format!("{name}.act1"), in_channels)?,
            conv2: Conv::build(
                store,
                rng,
                &format!("{name}.conv2"),
                ConvSpec::k3(in_channels, in_channels),
                Init::Kaiming,
            )?,
            act2: PRelu::build(store, &format!("{name}.act2"), in_channels)?,
            conv3: Conv::build(
                store,
                rng,
                &format!("{name}.conv3"),
                ConvSpec::k1(in_channels, mid),
                Init::Kaiming,
            )?,
            act3: PRelu::build(store, &format!("{name}.act3"), mid)?,
            conv4: Conv::build(
                store,
                rng,
                &format!("{name}.conv4"),
                ConvSpec::k1(mid, mid),
                Init::Kaiming,
            )?,
            act4: PRelu::build(store, &format!("{name}.act4"), mid)?,
            conv5: Conv::build(
                store,
                rng,
                &format!("{name}.conv5"),
                ConvSpec::k1(mid, out),
                Init::Kaiming,
            )?,
            cfg,
        })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        features: &Tensor4,
    ) -> Result<(KernelField, KernelGeneratorCtx)> {
        let c1 = self.conv1.forward(store, features)?;
        let a1 = self.act1.forward(store, &c1)?;
        let c2 = self.conv2.forward(store, &a1)?;
        let a2 = self.act2.forward(store, &c2)?;
        let c3 = self.conv3.forward(store, &a2)?;
        let a3 = self.act3.forward(store, &c3)?;
        let c4 = self.conv4.forward(store, &a3)?;
        let a4 = self.act4.forward(store, &c4)?;
        let c5 = self.conv5.forward(store, &a4)?;
        let field = KernelField::from_tensor(c5, self.cfg.k, self.cfg.g)?;
        let ctx = KernelGeneratorCtx {
            input: features.clone(),
            c1,
            a1,
            c2,
            a2,
            c3,
            a3,
            c4,
            a4,
        };
        Ok((field, ctx))
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        ctx: &KernelGeneratorCtx,
        grad_field: &Tensor4,
    ) -> Result<Tensor4> {
        let g = self.conv5.backward(store, &ctx.a4, grad_field)?;
        let g = self.act4.backward(store, &ctx.c4, &g)?;
        let g = self.conv4.backward(store, &ctx.a3, &g)?;
        let g = self.act3.backward(store, &ctx.c3, &g)?;
        let g = self.conv3.backward(store, &ctx.a2, &g)?;
        let g = self.act2.backward(store, &ctx.c2, &g)?;
        let g = self.conv2.backward(store, &ctx.a1, &g)?;
        let g = self.act1.backward(store, &ctx.c1, &g)?;
        self.conv1.backward(store, &ctx.input, &g)
    }
}

/// Conditional filter block: two kernel generators (image and noise
/// branches), the Hadamard-combined conditional filter, two trailing 3x3
/// convolutions, and a residual skip from input to output. The tail
/// convolution starts at zero so the block is the identity at init.
#[derive(Debug, Clone)]
pub struct Cfb {
    img_gen: KernelGenerator,
    noise_gen: KernelGenerator,
    conv1: Conv,
    act: PRelu,
    conv2: Conv,
    cfg: CfbConfig,
}

/// Saved tensors of one CFB forward pass.
#[derive(Debug, Clone)]
pub struct CfbCtx {
    img: Tensor4,
    mu: KernelField,
    gamma: KernelField,
    tau: KernelField,
    filtered: Tensor4,
    c1: Tensor4,
    a1: Tensor4,
    img_gen: KernelGeneratorCtx,
    noise_gen: KernelGeneratorCtx,
}

impl CfbCtx {
    /// Inferred conditional kernels, for introspection exports.
    pub fn tau(&self) -> &KernelField {
        &self.tau
    }
}

impl Cfb {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut DetRng,
        name: &str,
        noise_channels: usize,
        cfg: CfbConfig,
    ) -> Result<Self> {
        let c = cfg.channels;
        Ok(Cfb {
            img_gen: KernelGenerator::build(store, rng, &format!("{name}.img_gen"), c, cfg)?,
            noise_gen: KernelGenerator::build(
                store,
                rng,
                &format!("{name}.noise_gen"),
                noise_channels,
                cfg,
            )?,
            conv1: Conv::build(
                store,
                rng,
                &format!("{name}.conv1"),
                ConvSpec::k3(c, c),
                Init::Kaiming,
            )?,
            act: PRelu::build(store, &format!("{name}.act"), c)?,
            conv2: Conv::build(
                store,
                rng,
                &format!("{name}.conv2"),
                ConvSpec::k3(c, c),
                Init::Zero,
            )?,
            cfg,
        })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        img: &Tensor4,
        noise: &Tensor4,
    ) -> Result<(Tensor4, CfbCtx)> {
        let (ib, _, ih, iw) = img.dims();
        let (nb, _, nh, nw) = noise.dims();
        if (ib, ih, iw) != (nb, nh, nw) {
            return Err(Error::shape(
                "cfb_forward",
                format!("image {:?} vs noise {:?}", img.dims(), noise.dims()),
            ));
        }
        let (mu, img_gen_ctx) = self.img_gen.forward(store, img)?;
        let (gamma, noise_gen_ctx) = self.noise_gen.forward(store, noise)?;
        let tau = hadamard_kernels(&mu, &gamma)?;
        let filtered = conditional_conv(img, &tau, &self.cfg)?;
        let c1 = self.conv1.forward(store, &filtered)?;
        let a1 = self.act.forward(store, &c1)?;
        let c2 = self.conv2.forward(store, &a1)?;
        let out = img.add(&c2)?;
        let ctx = CfbCtx {
            img: img.clone(),
            mu,
            gamma,
            tau,
            filtered,
            c1,
            a1,
            img_gen: img_gen_ctx,
            noise_gen: noise_gen_ctx,
        };
        Ok((out, ctx))
    }

    /// Returns gradients for the image features and the noise features.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        ctx: &CfbCtx,
        grad_out: &Tensor4,
    ) -> Result<(Tensor4, Tensor4)> {
        let g = self.conv2.backward(store, &ctx.a1, grad_out)?;
        let g = self.act.backward(store, &ctx.c1, &g)?;
        let g_filtered = self.conv1.backward(store, &ctx.filtered, &g)?;

        let (g_img_cc, g_tau) =
            conditional_conv_backward(&g_filtered, &ctx.img, &ctx.tau, &self.cfg)?;
        let (g_mu, g_gamma) = hadamard_kernels_backward(&g_tau, &ctx.mu, &ctx.gamma)?;

        let g_img_gen = self.img_gen.backward(store, &ctx.img_gen, &g_mu)?;
        let g_noise = self.noise_gen.backward(store, &ctx.noise_gen, &g_gamma)?;

        // skip path plus the filter path plus the generator path
        let mut g_img = grad_out.add(&g_img_cc)?;
        g_img.accumulate(&g_img_gen)?;
        Ok((g_img, g_noise))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{
        max_rel_err, numeric_grad_param, numeric_grad_tensor, projection, rel_err, DEFAULT_EPS,
    };

    /// Independent five-nested-loop evaluation of the conditional filter.
    fn naive_conditional_conv(features: &Tensor4, tau: &KernelField, cfg: &CfbConfig) -> Tensor4 {
        let (b, c, h, w) = features.dims();
        let k = cfg.k;
        let r = cfg.sharing();
        let half = (k / 2) as isize;
        let mut out = Tensor4::zeros(b, c, h, w);
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for idx in 0..k * k {
                            let dy = (idx / k) as isize - half;
                            let dx = (idx % k) as isize - half;
                            let sy = y as isize + dy;
                            let sx = x as isize + dx;
                            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                acc += tau.at(bi, ci / r, idx, y, x)
                                    * features.at(bi, ci, sy as usize, sx as usize);
                            }
                        }
                        out.set(bi, ci, y, x, acc);
                    }
                }
            }
        }
        out
    }

    fn rand_tensor(b: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor4 {
        let mut rng = DetRng::new(seed);
        let mut t = Tensor4::zeros(b, c, h, w);
        for v in t.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        t
    }

    fn rand_field(b: usize, g: usize, k: usize, h: usize, w: usize, seed: u64) -> KernelField {
        KernelField::from_tensor(rand_tensor(b, g * k * k, h, w, seed), k, g).unwrap()
    }

    #[test]
    fn delta_kernel_is_identity() {
        let cfg = CfbConfig::new(3, 2, 4).unwrap();
        let features = rand_tensor(1, 4, 5, 5, 1);
        let mut field = Tensor4::zeros(1, 2 * 9, 5, 5);
        for group in 0..2 {
            for v in field.plane_mut(0, group * 9 + 4) {
                *v = 1.0; // center of the row-major 3x3 window
            }
        }
        let tau = KernelField::from_tensor(field, 3, 2).unwrap();
        let out = conditional_conv(&features, &tau, &cfg).unwrap();
        assert_eq!(out, features);
    }

    #[test]
    fn uniform_kernel_is_box_blur() {
        let cfg = CfbConfig::new(3, 1, 1).unwrap();
        let features = rand_tensor(1, 1, 4, 4, 2);
        let tau =
            KernelField::from_tensor(Tensor4::filled(1, 9, 4, 4, 1.0 / 9.0), 3, 1).unwrap();
        let out = conditional_conv(&features, &tau, &cfg).unwrap();
        // zero-padded box blur reference
        let (_, _, h, w) = features.dims();
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        let sy = y as i32 + dy;
                        let sx = x as i32 + dx;
                        if sy >= 0 && sy < h as i32 && sx >= 0 && sx < w as i32 {
                            acc += features.at(0, 0, sy as usize, sx as usize);
                        }
                    }
                }
                assert!((out.at(0, 0, y, x) - acc / 9.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_naive_loop_oracle() {
        let cfg = CfbConfig::new(3, 2, 4).unwrap();
        let features = rand_tensor(1, 4, 6, 6, 3);
        let tau = rand_field(1, 2, 3, 6, 6, 4);
        let fast = conditional_conv(&features, &tau, &cfg).unwrap();
        let slow = naive_conditional_conv(&features, &tau, &cfg);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = CfbConfig::new(3, 2, 4).unwrap();
        let features = rand_tensor(1, 4, 6, 6, 5);
        let tau = rand_field(1, 2, 3, 6, 6, 6);
        let out = conditional_conv(&features, &tau, &cfg).unwrap();
        let proj = projection(out.dims(), 7);

        let (gf, gt) = conditional_conv_backward(&proj, &features, &tau, &cfg).unwrap();

        let num_gf = numeric_grad_tensor(&features, DEFAULT_EPS, |x| {
            Ok(conditional_conv(x, &tau, &cfg)?.mul(&proj)?.sum())
        })
        .unwrap();
        assert!(max_rel_err(&gf, &num_gf) < 1e-4);

        let num_gt = numeric_grad_tensor(tau.tensor(), DEFAULT_EPS, |t| {
            let field = KernelField::from_tensor(t.clone(), 3, 2)?;
            Ok(conditional_conv(&features, &field, &cfg)?.mul(&proj)?.sum())
        })
        .unwrap();
        assert!(max_rel_err(&gt, &num_gt) < 1e-4);
    }

    #[test]
    fn linear_in_features() {
        let cfg = CfbConfig::new(3, 4, 8).unwrap();
        let features = rand_tensor(2, 8, 4, 4, 8);
        let tau = rand_field(2, 4, 3, 4, 4, 9);
        let a = 2.75;
        let lhs = conditional_conv(&features.scale(a), &tau, &cfg).unwrap();
        let rhs = conditional_conv(&features, &tau, &cfg).unwrap().scale(a);
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn group_sharing_channel_permutation_invariance() {
        // swapping the r channels of one group and unswapping the output
        // leaves the result unchanged
        let cfg = CfbConfig::new(3, 2, 4).unwrap();
        let features = rand_tensor(1, 4, 5, 5, 10);
        let tau = rand_field(1, 2, 3, 5, 5, 11);
        let base = conditional_conv(&features, &tau, &cfg).unwrap();

        let mut permuted = features.clone();
        let (b, _, h, w) = features.dims();
        for bi in 0..b {
            let p0 = features.plane(bi, 0).to_vec();
            let p1 = features.plane(bi, 1).to_vec();
            permuted.plane_mut(bi, 0).copy_from_slice(&p1);
            permuted.plane_mut(bi, 1).copy_from_slice(&p0);
        }
        let out_perm = conditional_conv(&permuted, &tau, &cfg).unwrap();
        for y in 0..h {
            for x in 0..w {
                assert!((out_perm.at(0, 1, y, x) - base.at(0, 0, y, x)).abs() < 1e-15);
                assert!((out_perm.at(0, 0, y, x) - base.at(0, 1, y, x)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hadamard_identity_and_annihilation() {
        let mu = rand_field(1, 2, 3, 3, 3, 12);
        let ones =
            KernelField::from_tensor(Tensor4::filled(1, 18, 3, 3, 1.0), 3, 2).unwrap();
        assert_eq!(hadamard_kernels(&mu, &ones).unwrap(), mu);

        let zeros = KernelField::from_tensor(Tensor4::zeros(1, 18, 3, 3), 3, 2).unwrap();
        let tau = hadamard_kernels(&zeros, &mu).unwrap();
        assert!(tau.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hadamard_gradients_match_finite_differences() {
        // field of logical shape (1, 2, 9, 3, 3)
        let mu = rand_field(1, 2, 3, 3, 3, 13);
        let gamma = rand_field(1, 2, 3, 3, 3, 14);
        let proj = projection(mu.dims(), 15);
        let (g_mu, g_gamma) = hadamard_kernels_backward(&proj, &mu, &gamma).unwrap();

        let num_mu = numeric_grad_tensor(mu.tensor(), DEFAULT_EPS, |t| {
            let f = KernelField::from_tensor(t.clone(), 3, 2)?;
            Ok(hadamard_kernels(&f, &gamma)?.tensor().mul(&proj)?.sum())
        })
        .unwrap();
        assert!(max_rel_err(&g_mu, &num_mu) < 1e-5);

        let num_gamma = numeric_grad_tensor(gamma.tensor(), DEFAULT_EPS, |t| {
            let f = KernelField::from_tensor(t.clone(), 3, 2)?;
            Ok(hadamard_kernels(&mu, &f)?.tensor().mul(&proj)?.sum())
        })
        .unwrap();
        assert!(max_rel_err(&g_gamma, &num_gamma) < 1e-5);
    }

    #[test]
    fn generator_shape_contract_and_zero_case() {
        let cfg = CfbConfig::new(3, 2, 4).unwrap();
        let mut store = ParamStore::new();
        let mut rng = DetRng::new(16);
        let gen = KernelGenerator::build(&mut store, &mut rng, "kg", 4, cfg).unwrap();

        let zero = Tensor4::zeros(1, 4, 5, 6);
        let (field, _) = gen.forward(&store, &zero).unwrap();
        let (b, ch, h, w) = field.dims();
        assert_eq!((b, ch, h, w), (1, 18, 5, 6));
        // zero input with zero biases gives a zero field
        assert!(field.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generator_weight_gradients_match_finite_differences() {
        let cfg = CfbConfig::new(3, 1, 2).unwrap();
        let mut store = ParamStore::new();
        let mut rng = DetRng::new(17);
        let gen = KernelGenerator::build(&mut store, &mut rng, "kg", 2, cfg).unwrap();
        let input = rand_tensor(1, 2, 4, 4, 18);

        let (field, ctx) = gen.forward(&store, &input).unwrap();
        let proj = projection(field.dims(), 19);
        store.zero_grads();
        gen.backward(&mut store, &ctx, &proj).unwrap();

        let names: Vec<String> = store.names().map(str::to_string).collect();
        let mut worst: f64 = 0.0;
        for name in &names {
            let len = store.value(name).len();
            for i in (0..len).step_by((len / 4).max(1)) {
                let analytic = store.grad(name).data()[i];
                let numeric = numeric_grad_param(&mut store, name, i, DEFAULT_EPS, |s| {
                    Ok(gen.forward(s, &input)?.0.tensor().mul(&proj)?.sum())
                })
                .unwrap();
                worst = worst.max(rel_err(analytic, numeric));
            }
        }
        assert!(worst < 1e-4, "worst {worst}");
    }

    #[test]
    fn cfb_identity_at_init_and_shape_contract() {
        let cfg = CfbConfig::new(3, 4, 8).unwrap();
        let mut store = ParamStore::new();
        let mut rng = DetRng::new(20);
        let cfb = Cfb::build(&mut store, &mut rng, "cfb", 8, cfg).unwrap();
        let img = rand_tensor(2, 8, 6, 6, 21);
        let noise = rand_tensor(2, 8, 6, 6, 22);
        let (out, _) = cfb.forward(&store, &img, &noise).unwrap();
        assert_eq!(out.dims(), img.dims());
        // tail conv is zero-initialised, so the block starts as the identity
        assert_eq!(out, img);
    }

    #[test]
    fn cfb_directional_asymmetry() {
        let cfg = CfbConfig::new(3, 4, 8).unwrap();
        let mut store = ParamStore::new();
        let mut rng = DetRng::new(23);
        let cfb = Cfb::build(&mut store, &mut rng, "cfb", 8, cfg).unwrap();
        // activate the tail so the output depends on the filter path
        let mut r2 = DetRng::new(24);
        for v in store.value_mut(&cfb.conv2.weight).data_mut() {
            *v = r2.uniform(-0.2, 0.2);
        }
        let img = rand_tensor(1, 8, 6, 6, 25);
        let noise = rand_tensor(1, 8, 6, 6, 26);
        let (ab, _) = cfb.forward(&store, &img, &noise).unwrap();
        let (ba, _) = cfb.forward(&store, &noise, &img).unwrap();
        let diff: f64 = ab
            .data()
            .iter()
            .zip(ba.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-3, "swapping the streams changed nothing");
    }

    #[test]
    fn cfb_end_to_end_gradients_match_finite_differences() {
        // g = 16 with 16 channels means one channel per group
        let cfg = CfbConfig::new(3, 16, 16).unwrap();
        let mut store = ParamStore::new();
        let mut rng = DetRng::new(27);
        let cfb = Cfb::build(&mut store, &mut rng, "cfb", 16, cfg).unwrap();
        // make the tail nonzero so its upstream gradients are exercised
        {
            let mut r2 = DetRng::new(28);
            let w = store.value_mut(&cfb.conv2.weight);
            for v in w.data_mut() {
                *v = r2.uniform(-0.2, 0.2);
            }
        }
        let img = rand_tensor(1, 16, 6, 6, 29);
        let noise = rand_tensor(1, 16, 6, 6, 30);

        let (out, ctx) = cfb.forward(&store, &img, &noise).unwrap();
        let proj = projection(out.dims(), 31);
        store.zero_grads();
        let (g_img, g_noise) = cfb.backward(&mut store, &ctx, &proj).unwrap();

        // sampled parameter check across every tensor in the block
        let names: Vec<String> = store.names().map(str::to_string).collect();
        let mut worst: f64 = 0.0;
        for name in &names {
            let len = store.value(name).len();
            for i in (0..len).step_by((len / 2).max(1)) {
                let analytic = store.grad(name).data()[i];
                let numeric = numeric_grad_param(&mut store, name, i, DEFAULT_EPS, |s| {
                    Ok(cfb.forward(s, &img, &noise)?.0.mul(&proj)?.sum())
                })
                .unwrap();
                worst = worst.max(rel_err(analytic, numeric));
            }
        }
        assert!(worst < 1e-4, "worst param err {worst}");

        // input gradients, sampled
        let num_g_img = numeric_grad_tensor(&img, DEFAULT_EPS, |x| {
            Ok(cfb.forward(&store, x, &noise)?.0.mul(&proj)?.sum())
        })
        .unwrap();
        assert!(max_rel_err(&g_img, &num_g_img) < 1e-4);
        let num_g_noise = numeric_grad_tensor(&noise, DEFAULT_EPS, |x| {
            Ok(cfb.forward(&store, &img, x)?.0.mul(&proj)?.sum())
        })
        .unwrap();
        assert!(max_rel_err(&g_noise, &num_g_noise) < 1e-4);
    }
}
