//! Full denoiser assembly: shallow feature extraction, six conditional
//! denoising modules in a U-shaped encoder/decoder with symmetric skips,
//! paired noise-estimation stages, and a global residual output.

use crate::condfilter::{Cfb, CfbConfig, CfbCtx, KernelField};
use crate::error::{Error, Result};
use crate::layers::{Conv, ConvChain, ConvChainCtx, Init, PRelu};
use crate::nem::{NemCore, NemStage, NemStageCtx};
use crate::noise::SigmaMap;
use crate::ops::{self, ConvSpec};
use crate::params::ParamStore;
use crate::rng::DetRng;
use crate::tensor::Tensor4;

pub const STAGES: usize = 6;

/// Per-stage pooling depth below full resolution.
const STAGE_DEPTH: [usize; STAGES] = [0, 1, 2, 2, 1, 0];

/// Architecture hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchConfig {
    /// 1 for grayscale, 3 for colour.
    pub input_channels: usize,
    /// Feature widths of the six denoising stages; must be symmetric.
    pub width_plan: [usize; STAGES],
    /// Conditional filter blocks per denoising module (t).
    pub cfbs_per_module: usize,
    /// Conditional kernel size (k).
    pub kernel_size: usize,
    /// Channel-group count of the conditional filters (g).
    pub groups: usize,
}

impl ArchConfig {
    /// CPU-trainable default that keeps every structural ratio.
    pub fn desk() -> Self {
        ArchConfig {
            input_channels: 1,
            width_plan: [16, 32, 64, 64, 32, 16],
            cfbs_per_module: 2,
            kernel_size: 3,
            groups: 16,
        }
    }

    /// The reference full-scale widths.
    pub fn full_scale() -> Self {
        ArchConfig {
            width_plan: [64, 128, 256, 256, 128, 64],
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels != 1 && self.input_channels != 3 {
            return Err(Error::Config(format!(
                "input channels {} not in {{1, 3}}",
                self.input_channels
            )));
        }
        for i in 0..STAGES {
            if self.width_plan[i] == 0 {
                return Err(Error::Config("zero width in plan".into()));
            }
            if self.width_plan[i] != self.width_plan[STAGES - 1 - i] {
                return Err(Error::Config(format!(
                    "width plan {:?} is not symmetric",
                    self.width_plan
                )));
            }
            if self.width_plan[i] % self.groups != 0 {
                return Err(Error::Config(format!(
                    "width {} not divisible by group count {}",
                    self.width_plan[i], self.groups
                )));
            }
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config("conditional kernel size must be odd".into()));
        }
        Ok(())
    }

    fn cfb_config(&self, stage: usize) -> Result<CfbConfig> {
        CfbConfig::new(self.kernel_size, self.groups, self.width_plan[stage])
    }
}

/// Ablation switchboard. The named variants map onto the three independent
/// replacements; `Baseline` applies all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoAtb,
    NoCfb,
    NoDne,
    Baseline,
}

impl Variant {
    pub fn uses_atb(&self) -> bool {
        !matches!(self, Variant::NoAtb | Variant::Baseline)
    }

    pub fn uses_cfb(&self) -> bool {
        !matches!(self, Variant::NoCfb | Variant::Baseline)
    }

    pub fn uses_dne(&self) -> bool {
        !matches!(self, Variant::NoDne | Variant::Baseline)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAtb => "no-atb",
            Variant::NoCfb => "no-cfb",
            Variant::NoDne => "no-dne",
            Variant::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no-atb" => Ok(Variant::NoAtb),
            "no-cfb" => Ok(Variant::NoCfb),
            "no-dne" => Ok(Variant::NoDne),
            "baseline" => Ok(Variant::Baseline),
            other => Err(Error::InvalidParam(format!("unknown variant {other}"))),
        }
    }

    pub fn all() -> [Variant; 5] {
        [
            Variant::Full,
            Variant::NoAtb,
            Variant::NoCfb,
            Variant::NoDne,
            Variant::Baseline,
        ]
    }
}

/// A conditional filter block or its ablation replacement (concatenation
/// followed by one 3x3 convolution, keeping the residual skip).
#[derive(Debug, Clone)]
enum FilterBlock {
    Cond(Cfb),
    ConcatFuse(Conv),
}

#[derive(Debug, Clone)]
enum FilterBlockCtx {
    Cond(CfbCtx),
    ConcatFuse { img: Tensor4, cat: Tensor4 },
}

impl FilterBlock {
    fn build(
        store: &mut ParamStore,
        rng: &mut DetRng,
        name: &str,
        cfg: &ArchConfig,
        stage: usize,
        use_cfb: bool,
    ) -> Result<Self> {
        let c = cfg.width_plan[stage];
        if use_cfb {
            Ok(FilterBlock::Cond(Cfb::build(
                store,
                rng,
                name,
                c,
                cfg.cfb_config(stage)?,
            )?))
        } else {
            Ok(FilterBlock::ConcatFuse(Conv::build(
                store,
                rng,
                &format!("{name}.fuse"),
                ConvSpec::k3(2 * c, c),
                Init::Zero,
            )?))
        }
    }

    fn forward(
        &self,
        store: &ParamStore,
        img: &Tensor4,
        noise: &Tensor4,
    ) -> Result<(Tensor4, FilterBlockCtx)> {
        match self {
            FilterBlock::Cond(cfb) => {
                let (out, ctx) = cfb.forward(store, img, noise)?;
                Ok((out, FilterBlockCtx::Cond(ctx)))
            }
            FilterBlock::ConcatFuse(conv) => {
                let cat = Tensor4::concat_channels(img, noise)?;
                let out = img.add(&conv.forward(store, &cat)?)?;
                Ok((
                    out,
                    FilterBlockCtx::ConcatFuse {
                        img: img.clone(),
                        cat,
                    },
                ))
            }
        }
    }

    fn backward(
        &self,
        store: &mut ParamStore,
        ctx: &FilterBlockCtx,
        grad_out: &Tensor4,
    ) -> Result<(Tensor4, Tensor4)> {
        match (self, ctx) {
            (FilterBlock::Cond(cfb), FilterBlockCtx::Cond(c)) => {
                cfb.backward(store, c, grad_out)
            }
            (FilterBlock::ConcatFuse(conv), FilterBlockCtx::ConcatFuse { img, cat }) => {
                let g_cat = conv.backward(store, cat, grad_out)?;
                let (g_img_c, g_noise) = g_cat.split_channels(img.channels())?;
                Ok((grad_out.add(&g_img_c)?, g_noise))
            }
            _ => Err(Error::Config("filter block context mismatch".into())),
        }
    }
}

/// One conditional denoising module: feature refinement followed by the
/// stage's filter blocks, all sharing that stage's noise features.
#[derive(Debug, Clone)]
struct Cdm {
    frb: ConvChain,
    filters: Vec<FilterBlock>,
}

#[derive(Debug, Clone)]
struct CdmCtx {
    frb: ConvChainCtx,
    noise_dims: (usize, usize, usize, usize),
    filters: Vec<FilterBlockCtx>,
}

impl Cdm {
    fn build(
        store: &mut ParamStore,
        rng: &mut DetRng,
        name: &str,
        cfg: &ArchConfig,
        stage: usize,
        use_cfb: bool,
    ) -> Result<Self> {
        let c = cfg.width_plan[stage];
        let frb = ConvChain::build(
            store,
            rng,
            &format!("{name}.frb"),
            &[ConvSpec::k3(c, c); 5],
            Init::Kaiming,
        )?;
        let mut filters = Vec::with_capacity(cfg.cfbs_per_module);
        for t in 0..cfg.cfbs_per_module {
            filters.push(FilterBlock::build(
                store,
                rng,
                &format!("{name}.cfb{}", t + 1),
                cfg,
                stage,
                use_cfb,
            )?);
        }
        Ok(Cdm { frb, filters })
    }

    /// Returns the module output and the refinement-block output (the skip
    /// source for the symmetric stage).
    fn forward(
        &self,
        store: &ParamStore,
        x: &Tensor4,
        noise: &Tensor4,
    ) -> Result<(Tensor4, Tensor4, CdmCtx)> {
        let (frb_out, frb_ctx) = self.frb.forward(store, x)?;
        let mut cur = frb_out.clone();
        let mut filter_ctxs = Vec::with_capacity(self.filters.len());
        for f in &self.filters {
            let (next, ctx) = f.forward(store, &cur, noise)?;
            filter_ctxs.push(ctx);
            cur = next;
        }
        Ok((
            cur,
            frb_out.clone(),
            CdmCtx {
                frb: frb_ctx,
                noise_dims: noise.dims(),
                filters: filter_ctxs,
            },
        ))
    }

    /// `grad_frb_extra` carries the skip-connection gradient flowing into
    /// this module's refinement output from the symmetric stage.
    fn backward(
        &self,
        store: &mut ParamStore,
        ctx: &CdmCtx,
        grad_out: &Tensor4,
        grad_frb_extra: Option<&Tensor4>,
    ) -> Result<(Tensor4, Tensor4)> {
        let mut g = grad_out.clone();
        let (nb, nc, nh, nw) = ctx.noise_dims;
        let mut g_noise = Tensor4::zeros(nb, nc, nh, nw);
        for (f, c) in self.filters.iter().zip(&ctx.filters).rev() {
            let (g_img, g_n) = f.backward(store, c, &g)?;
            g = g_img;
            g_noise.accumulate(&g_n)?;
        }
        if let Some(extra) = grad_frb_extra {
            g.accumulate(extra)?;
        }
        let g_x = self.frb.backward(store, &ctx.frb, &g)?;
        Ok((g_x, g_noise))
    }
}

/// Encoder link: 2x2 mean pool then a 3x3 convolution adjusting channels.
#[derive(Debug, Clone)]
struct DownLink {
    conv: Conv,
    act: PRelu,
}

#[derive(Debug, Clone)]
struct DownLinkCtx {
    in_hw: (usize, usize),
    pooled: Tensor4,
    pre_act: Tensor4,
}

impl DownLink {
    fn build(
        store: &mut ParamStore,
        rng: &mut DetRng,
        name: &str,
        in_c: usize,
        out_c: usize,
    ) -> Result<Self> {
        Ok(DownLink {
            conv: Conv::build(store, rng, &format!("{name}.conv"), ConvSpec::k3(in_c, out_c), Init::Kaiming)?,
            act: PRelu::build(store, &format!("{name}.act"), out_c)?,
        })
    }

    fn forward(&self, store: &ParamStore, x: &Tensor4) -> Result<(Tensor4, DownLinkCtx)> {
        let pooled = ops::avg_pool2(x)?;
        let pre_act = self.conv.forward(store, &pooled)?;
        let out = self.act.forward(store, &pre_act)?;
        Ok((
            out,
            DownLinkCtx {
                in_hw: (x.height(), x.width()),
                pooled,
                pre_act,
            },
        ))
    }

    fn backward(
        &self,
        store: &mut ParamStore,
        ctx: &DownLinkCtx,
        grad_out: &Tensor4,
    ) -> Result<Tensor4> {
        let g = self.act.backward(store, &ctx.pre_act, grad_out)?;
        let g = self.conv.backward(store, &ctx.pooled, &g)?;
        ops::avg_pool2_backward(&g, ctx.in_hw.0, ctx.in_hw.1)
    }
}

/// Decoder link: transposed 3x3 convolution doubling the spatial dims.
#[derive(Debug, Clone)]
struct UpLink {
    conv: Conv,
    act: PRelu,
}

#[derive(Debug, Clone)]
struct UpLinkCtx {
    input: Tensor4,
    pre_act: Tensor4,
}

impl UpLink {
    fn build(
        store: &mut ParamStore,
        rng: &mut DetRng,
        name: &str,
        in_c: usize,
        out_c: usize,
    ) -> Result<Self> {
        Ok(UpLink {
            conv: Conv::build(
                store,
                rng,
                &format!("{name}.conv"),
                ConvSpec::upsample2(in_c, out_c),
                Init::Kaiming,
            )?,
            act: PRelu::build(store, &format!("{name}.act"), out_c)?,
        })
    }

    fn forward(&self, store: &ParamStore, x: &Tensor4) -> Result<(Tensor4, UpLinkCtx)> {
        let pre_act = self.conv.forward(store, x)?;
        let out = self.act.forward(store, &pre_act)?;
        Ok((
            out,
            UpLinkCtx {
                input: x.clone(),
                pre_act,
            },
        ))
    }

    fn backward(
        &self,
        store: &mut ParamStore,
        ctx: &UpLinkCtx,
        grad_out: &Tensor4,
    ) -> Result<Tensor4> {
        let g = self.act.backward(store, &ctx.pre_act, grad_out)?;
        self.conv.backward(store, &ctx.input, &g)
    }
}

/// How stage noise features are produced: re-estimated per stage, or (for
/// the static ablation) estimated once and resampled to each stage.
#[derive(Debug, Clone)]
enum NoiseWiring {
    Dynamic { stages: Vec<NemStage> },
    Static { stage1: NemStage, ports: Vec<Conv> },
}

#[derive(Debug, Clone)]
enum NoiseWiringCtx {
    Dynamic {
        stages: Vec<NemStageCtx>,
    },
    Static {
        stage1: NemStageCtx,
        /// the shared full-resolution feature map the ports read from
        fused: Tensor4,
        /// per-stage port inputs (resampled core output), stages 2..6
        pooled: Vec<Tensor4>,
        /// per-stage port outputs, stages 2..6
        features: Vec<Tensor4>,
    },
}

/// The assembled network.
#[derive(Debug, Clone)]
pub struct CfNet {
    pub cfg: ArchConfig,
    pub variant: Variant,
    sfeb: ConvChain,
    noise: NoiseWiring,
    cdms: Vec<Cdm>,
    downs: Vec<DownLink>,
    ups: Vec<UpLink>,
    final_conv: Conv,
}

/// Saved tensors of one full forward pass.
pub struct ForwardCtx {
    sfeb: ConvChainCtx,
    noise: NoiseWiringCtx,
    cdms: Vec<CdmCtx>,
    downs: Vec<DownLinkCtx>,
    ups: Vec<UpLinkCtx>,
    final_input: Tensor4,
}

impl ForwardCtx {
    /// Stage noise features, for the introspection exports.
    pub fn noise_features(&self, stage: usize) -> &Tensor4 {
        match &self.noise {
            NoiseWiringCtx::Dynamic { stages } => stages[stage].noise_features(),
            NoiseWiringCtx::Static {
                stage1, features, ..
            } => {
                if stage == 0 {
                    stage1.noise_features()
                } else {
                    &features[stage - 1]
                }
            }
        }
    }

    /// Conditional kernels of one filter block, when the variant has them.
    pub fn conditional_kernels(&self, stage: usize, block: usize) -> Option<&KernelField> {
        match self.cdms.get(stage)?.filters.get(block)? {
            FilterBlockCtx::Cond(c) => Some(c.tau()),
            FilterBlockCtx::ConcatFuse { .. } => None,
        }
    }
}

impl CfNet {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut DetRng,
        cfg: ArchConfig,
        variant: Variant,
    ) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width_plan;
        let in_c = cfg.input_channels;

        let sfeb = ConvChain::build(
            store,
            rng,
            "sfeb",
            &[
                ConvSpec::k3(in_c, w[0]),
                ConvSpec::k3(w[0], w[0]),
                ConvSpec::k3(w[0], w[0]),
            ],
            Init::Kaiming,
        )?;

        let core = NemCore::build(store, rng, "nem.core", variant.uses_atb())?;
        let noise = if variant.uses_dne() {
            let mut stages = Vec::with_capacity(STAGES);
            for i in 0..STAGES {
                let stage_in = if i == 0 { in_c } else { w[i] };
                stages.push(NemStage::build(
                    store,
                    rng,
                    &format!("nem.s{}", i + 1),
                    i + 1,
                    stage_in,
                    w[i],
                    &core,
                    if i == 0 { Some(in_c) } else { None },
                )?);
            }
            NoiseWiring::Dynamic { stages }
        } else {
            let stage1 = NemStage::build(
                store,
                rng,
                "nem.s1",
                1,
                in_c,
                w[0],
                &core,
                Some(in_c),
            )?;
            let mut ports = Vec::with_capacity(STAGES - 1);
            for i in 1..STAGES {
                ports.push(Conv::build(
                    store,
                    rng,
                    &format!("nem.s{}.out_port", i + 1),
                    ConvSpec::k1(crate::nem::NEM_WIDTH, w[i]),
                    Init::Kaiming,
                )?);
            }
            NoiseWiring::Static { stage1, ports }
        };

        let mut cdms = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            cdms.push(Cdm::build(
                store,
                rng,
                &format!("cdm{}", i + 1),
                &cfg,
                i,
                variant.uses_cfb(),
            )?);
        }

        let downs = vec![
            DownLink::build(store, rng, "down1", w[0], w[1])?,
            DownLink::build(store, rng, "down2", w[1], w[2])?,
        ];
        let ups = vec![
            UpLink::build(store, rng, "up1", w[3], w[4])?,
            UpLink::build(store, rng, "up2", w[4], w[5])?,
        ];

        // zero-initialised so the network is the identity at step 0
        let final_conv = Conv::build(
            store,
            rng,
            "final",
            ConvSpec::k3(w[5], in_c),
            Init::Zero,
        )?;

        Ok(CfNet {
            cfg,
            variant,
            sfeb,
            noise,
            cdms,
            downs,
            ups,
            final_conv,
        })
    }

    /// Noise features for stage `i` given its input tensor. Static wiring
    /// ignores the stage input and resamples the shared stage-1 features.
    fn stage_noise(
        &self,
        store: &ParamStore,
        stage: usize,
        stage_input: &Tensor4,
        wiring_ctx: &mut NoiseWiringCtx,
    ) -> Result<Tensor4> {
        match (&self.noise, wiring_ctx) {
            (NoiseWiring::Dynamic { stages }, NoiseWiringCtx::Dynamic { stages: ctxs }) => {
                let (features, _, ctx) = stages[stage].forward(store, stage_input)?;
                ctxs.push(ctx);
                Ok(features)
            }
            (
                NoiseWiring::Static { ports, .. },
                NoiseWiringCtx::Static {
                    fused,
                    pooled,
                    features,
                    ..
                },
            ) => {
                // stage >= 1 here; stage 0 is produced in forward() directly
                let resampled = ops::avg_pool2_n(fused, STAGE_DEPTH[stage])?;
                let out = ports[stage - 1].forward(store, &resampled)?;
                pooled.push(resampled);
                features.push(out.clone());
                Ok(out)
            }
            _ => Err(Error::Config("noise wiring context mismatch".into())),
        }
    }

    /// Run the network. Spatial dims must be divisible by 4; the caller pads.
    pub fn forward(
        &self,
        store: &ParamStore,
        noisy: &Tensor4,
    ) -> Result<(Tensor4, SigmaMap, ForwardCtx)> {
        let (_, c, h, w) = noisy.dims();
        if c != self.cfg.input_channels {
            return Err(Error::shape(
                "cfnet_forward",
                format!("input carries {c} channels, network expects {}", self.cfg.input_channels),
            ));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(
                "cfnet_forward",
                format!("spatial dims {h}x{w} not divisible by 4"),
            ));
        }
        // stage-1 noise estimation always reads the raw noisy image
        let (sigma_pred, mut wiring_ctx, n1) = match &self.noise {
            NoiseWiring::Dynamic { stages } => {
                let (n1, sigma, ctx) = stages[0].forward(store, noisy)?;
                (
                    sigma.expect("stage 1 carries the sigma head"),
                    NoiseWiringCtx::Dynamic { stages: vec![ctx] },
                    n1,
                )
            }
            NoiseWiring::Static { stage1, .. } => {
                let (n1, sigma, ctx) = stage1.forward(store, noisy)?;
                let fused = ctx.core_fused().clone();
                (
                    sigma.expect("stage 1 carries the sigma head"),
                    NoiseWiringCtx::Static {
                        stage1: ctx,
                        fused,
                        pooled: Vec::with_capacity(STAGES - 1),
                        features: Vec::with_capacity(STAGES - 1),
                    },
                    n1,
                )
            }
        };

        let (sfeb_out, sfeb_ctx) = self.sfeb.forward(store, noisy)?;

        let mut cdm_ctxs = Vec::with_capacity(STAGES);
        let mut down_ctxs = Vec::with_capacity(2);
        let mut up_ctxs = Vec::with_capacity(2);

        // encoder
        let (c1, frb1, ctx1) = self.cdms[0].forward(store, &sfeb_out, &n1)?;
        cdm_ctxs.push(ctx1);

        let (d1, dctx1) = self.downs[0].forward(store, &c1)?;
        down_ctxs.push(dctx1);
        let n2 = self.stage_noise(store, 1, &d1, &mut wiring_ctx)?;
        let (c2, frb2, ctx2) = self.cdms[1].forward(store, &d1, &n2)?;
        cdm_ctxs.push(ctx2);

        let (d2, dctx2) = self.downs[1].forward(store, &c2)?;
        down_ctxs.push(dctx2);
        let n3 = self.stage_noise(store, 2, &d2, &mut wiring_ctx)?;
        let (c3, _, ctx3) = self.cdms[2].forward(store, &d2, &n3)?;
        cdm_ctxs.push(ctx3);

        // innermost pair links directly, no skip
        let n4 = self.stage_noise(store, 3, &c3, &mut wiring_ctx)?;
        let (c4, _, ctx4) = self.cdms[3].forward(store, &c3, &n4)?;
        cdm_ctxs.push(ctx4);

        // decoder
        let (u1, uctx1) = self.ups[0].forward(store, &c4)?;
        up_ctxs.push(uctx1);
        let x5 = u1.add(&frb2)?;
        let n5 = self.stage_noise(store, 4, &x5, &mut wiring_ctx)?;
        let (c5, _, ctx5) = self.cdms[4].forward(store, &x5, &n5)?;
        cdm_ctxs.push(ctx5);

        let (u2, uctx2) = self.ups[1].forward(store, &c5)?;
        up_ctxs.push(uctx2);
        let x6 = u2.add(&frb1)?;
        let n6 = self.stage_noise(store, 5, &x6, &mut wiring_ctx)?;
        let (c6, _, ctx6) = self.cdms[5].forward(store, &x6, &n6)?;
        cdm_ctxs.push(ctx6);

        let residual = self.final_conv.forward(store, &c6)?;
        let denoised = noisy.add(&residual)?;

        let ctx = ForwardCtx {
            sfeb: sfeb_ctx,
            noise: wiring_ctx,
            cdms: cdm_ctxs,
            downs: down_ctxs,
            ups: up_ctxs,
            final_input: c6,
        };
        Ok((denoised, sigma_pred, ctx))
    }

    /// Backward of one stage's noise features; returns the gradient for the
    /// stage input (dynamic wiring) or accumulates into the shared fused
    /// field (static wiring).
    fn stage_noise_backward(
        &self,
        store: &mut ParamStore,
        stage: usize,
        ctx: &ForwardCtx,
        grad_noise: &Tensor4,
        g_fused_acc: &mut Option<Tensor4>,
    ) -> Result<Option<Tensor4>> {
        match (&self.noise, &ctx.noise) {
            (NoiseWiring::Dynamic { stages }, NoiseWiringCtx::Dynamic { stages: ctxs }) => Ok(
                Some(stages[stage].backward(store, &ctxs[stage], grad_noise, None)?),
            ),
            (NoiseWiring::Static { ports, .. }, NoiseWiringCtx::Static { pooled, .. }) => {
                let resampled = &pooled[stage - 1];
                let mut g = ports[stage - 1].backward(store, resampled, grad_noise)?;
                // undo the pooling chain back up to full resolution
                for _ in 0..STAGE_DEPTH[stage] {
                    g = ops::avg_pool2_backward(&g, g.height() * 2, g.width() * 2)?;
                }
                match g_fused_acc {
                    Some(acc) => acc.accumulate(&g)?,
                    None => *g_fused_acc = Some(g),
                }
                Ok(None)
            }
            _ => Err(Error::Config("noise wiring context mismatch".into())),
        }
    }

    /// Propagate loss gradients into the parameter store. `grad_sigma` is
    /// the gradient on the predicted sigma map, when supervised.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        ctx: &ForwardCtx,
        grad_denoised: &Tensor4,
        grad_sigma: Option<&Tensor4>,
    ) -> Result<()> {
        // residual head
        let g_c6 = self
            .final_conv
            .backward(store, &ctx.final_input, grad_denoised)?;

        let mut g_fused_static: Option<Tensor4> = None;

        // stage 6
        let (g_x6, g_n6) = self.cdms[5].backward(store, &ctx.cdms[5], &g_c6, None)?;
        let mut g_x6 = g_x6;
        if let Some(g) =
            self.stage_noise_backward(store, 5, ctx, &g_n6, &mut g_fused_static)?
        {
            g_x6.accumulate(&g)?;
        }
        // x6 = up2(c5) + frb1
        let g_frb1 = g_x6.clone();
        let g_c5 = self.ups[1].backward(store, &ctx.ups[1], &g_x6)?;

        // stage 5
        let (g_x5, g_n5) = self.cdms[4].backward(store, &ctx.cdms[4], &g_c5, None)?;
        let mut g_x5 = g_x5;
        if let Some(g) =
            self.stage_noise_backward(store, 4, ctx, &g_n5, &mut g_fused_static)?
        {
            g_x5.accumulate(&g)?;
        }
        let g_frb2 = g_x5.clone();
        let g_c4 = self.ups[0].backward(store, &ctx.ups[0], &g_x5)?;

        // stage 4
        let (g_x4, g_n4) = self.cdms[3].backward(store, &ctx.cdms[3], &g_c4, None)?;
        let mut g_c3 = g_x4;
        if let Some(g) =
            self.stage_noise_backward(store, 3, ctx, &g_n4, &mut g_fused_static)?
        {
            g_c3.accumulate(&g)?;
        }

        // stage 3
        let (g_x3, g_n3) = self.cdms[2].backward(store, &ctx.cdms[2], &g_c3, None)?;
        let mut g_d2 = g_x3;
        if let Some(g) =
            self.stage_noise_backward(store, 2, ctx, &g_n3, &mut g_fused_static)?
        {
            g_d2.accumulate(&g)?;
        }
        let g_c2 = self.downs[1].backward(store, &ctx.downs[1], &g_d2)?;

        // stage 2, including the skip gradient into its refinement output
        let (g_x2, g_n2) =
            self.cdms[1].backward(store, &ctx.cdms[1], &g_c2, Some(&g_frb2))?;
        let mut g_d1 = g_x2;
        if let Some(g) =
            self.stage_noise_backward(store, 1, ctx, &g_n2, &mut g_fused_static)?
        {
            g_d1.accumulate(&g)?;
        }
        let g_c1 = self.downs[0].backward(store, &ctx.downs[0], &g_d1)?;

        // stage 1
        let (g_sfeb_out, g_n1) =
            self.cdms[0].backward(store, &ctx.cdms[0], &g_c1, Some(&g_frb1))?;
        self.sfeb.backward(store, &ctx.sfeb, &g_sfeb_out)?;

        // stage-1 noise estimation (input gradient lands on the data, so it
        // is dropped), together with the supervised head and, for static
        // wiring, the accumulated port gradients flowing into the core
        match (&self.noise, &ctx.noise) {
            (NoiseWiring::Dynamic { stages }, NoiseWiringCtx::Dynamic { stages: ctxs }) => {
                stages[0].backward(store, &ctxs[0], &g_n1, grad_sigma)?;
            }
            (NoiseWiring::Static { stage1, .. }, NoiseWiringCtx::Static { stage1: c1, .. }) => {
                stage1.backward_with_core_extra(
                    store,
                    c1,
                    &g_n1,
                    grad_sigma,
                    g_fused_static.as_ref(),
                )?;
            }
            _ => return Err(Error::Config("noise wiring context mismatch".into())),
        }
        Ok(())
    }

    /// Total number of learnable scalars.
    pub fn parameter_count(store: &ParamStore) -> usize {
        store.scalar_count()
    }
}
