//! Per-stage noise-prior estimation.
//!
//! Each stage routes its input through a 1x1 in-port to 64 channels, two
//! affine transform blocks evaluated in parallel and concatenated, a 1x1
//! fusion, and a 1x1 out-port matching the paired denoising stage. The core
//! between the ports is built once and reused by every stage; only the ports
//! are per-stage. Stage 1 additionally emits a supervised sigma map through
//! a softplus head.

use crate::error::{Error, Result};
use crate::layers::{Conv, ConvChain, ConvChainCtx, Init, PRelu};
use crate::noise::SigmaMap;
use crate::ops::{self, ConvSpec};
use crate::params::ParamStore;
use crate::rng::DetRng;
use crate::tensor::Tensor4;

/// Channel width of the shared core.
pub const NEM_WIDTH: usize = 64;

/// Shared-group tag on every core parameter.
pub const NEM_CORE_GROUP: &str = "nem_core";

/// Affine transform block: a sigmoid-gated scaling head modelling the
/// signal-dependent component and a translation head modelling the
/// stationary one, combined as scale(x) * x + translate(x).
#[derive(Debug, Clone)]
pub struct Atb {
    scale1: Conv,
    scale_act: PRelu,
    scale2: Conv,
    trans1: Conv,
    trans_act: PRelu,
    trans2: Conv,
}

/// Saved tensors of one ATB forward pass.
#[derive(Debug, Clone)]
pub struct AtbCtx {
    input: Tensor4,
    s1: Tensor4,
    sa: Tensor4,
    scale: Tensor4, // sigmoid output
    t1: Tensor4,
    ta: Tensor4,
}

impl Atb {
    pub fn build(store: &mut ParamStore, rng: &mut DetRng, name: &str) -> Result<Self> {
        let spec = ConvSpec::k1(NEM_WIDTH, NEM_WIDTH);
        let g = Some(NEM_CORE_GROUP);
        Ok(Atb {
            scale1: Conv::build_grouped(store, rng, &format!("{name}.scale1"), spec, Init::Kaiming, g)?,
            scale_act: PRelu::build_grouped(store, &format!("{name}.scale_act"), NEM_WIDTH, g)?,
            scale2: Conv::build_grouped(store, rng, &format!("{name}.scale2"), spec, Init::Kaiming, g)?,
            trans1: Conv::build_grouped(store, rng, &format!("{name}.trans1"), spec, Init::Kaiming, g)?,
            trans_act: PRelu::build_grouped(store, &format!("{name}.trans_act"), NEM_WIDTH, g)?,
            trans2: Conv::build_grouped(store, rng, &format!("{name}.trans2"), spec, Init::Kaiming, g)?,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor4) -> Result<(Tensor4, AtbCtx)> {
        if x.channels() != NEM_WIDTH {
            return Err(Error::shape(
                "atb_forward",
                format!("input carries {} channels, core is {NEM_WIDTH}", x.channels()),
            ));
        }
        let s1 = self.scale1.forward(store, x)?;
        let sa = self.scale_act.forward(store, &s1)?;
        let scale = ops::sigmoid(&self.scale2.forward(store, &sa)?);
        let t1 = self.trans1.forward(store, x)?;
        let ta = self.trans_act.forward(store, &t1)?;
        let trans = self.trans2.forward(store, &ta)?;
        let out = scale.mul(x)?.add(&trans)?;
        let ctx = AtbCtx {
            input: x.clone(),
            s1,
            sa,
            scale,
            t1,
            ta,
        };
        Ok((out, ctx))
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        ctx: &AtbCtx,
        grad_out: &Tensor4,
    ) -> Result<Tensor4> {
        // out = scale * x + trans
        let g_scale = grad_out.mul(&ctx.input)?;
        let mut g_x = grad_out.mul(&ctx.scale)?;

        // translation head
        let g = self.trans2.backward(store, &ctx.ta, grad_out)?;
        let g = self.trans_act.backward(store, &ctx.t1, &g)?;
        g_x.accumulate(&self.trans1.backward(store, &ctx.input, &g)?)?;

        // scaling head through the sigmoid
        let g = ops::sigmoid_backward(&g_scale, &ctx.scale)?;
        let g = self.scale2.backward(store, &ctx.sa, &g)?;
        let g = self.scale_act.backward(store, &ctx.s1, &g)?;
        g_x.accumulate(&self.scale1.backward(store, &ctx.input, &g)?)?;

        Ok(g_x)
    }
}

/// Either the affine transform block or its ablation replacement, a ten-layer
/// stack of 1x1 convolutions at the same width.
#[derive(Debug, Clone)]
pub enum NoiseBranch {
    Affine(Atb),
    Stack(ConvChain),
}

#[derive(Debug, Clone)]
pub enum NoiseBranchCtx {
    Affine(AtbCtx),
    Stack(ConvChainCtx),
}

impl NoiseBranch {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut DetRng,
        name: &str,
        use_atb: bool,
    ) -> Result<Self> {
        if use_atb {
            Ok(NoiseBranch::Affine(Atb::build(store, rng, name)?))
        } else {
            let specs = vec![ConvSpec::k1(NEM_WIDTH, NEM_WIDTH); 10];
            Ok(NoiseBranch::Stack(ConvChain::build_grouped(
                store,
                rng,
                name,
                &specs,
                Init::Kaiming,
                Some(NEM_CORE_GROUP),
            )?))
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor4) -> Result<(Tensor4, NoiseBranchCtx)> {
        match self {
            NoiseBranch::Affine(atb) => {
                let (y, ctx) = atb.forward(store, x)?;
                Ok((y, NoiseBranchCtx::Affine(ctx)))
            }
            NoiseBranch::Stack(chain) => {
                let (y, ctx) = chain.forward(store, x)?;
                Ok((y, NoiseBranchCtx::Stack(ctx)))
            }
        }
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        ctx: &NoiseBranchCtx,
        grad_out: &Tensor4,
    ) -> Result<Tensor4> {
        match (self, ctx) {
            (NoiseBranch::Affine(atb), NoiseBranchCtx::Affine(c)) => {
                atb.backward(store, c, grad_out)
            }
            (NoiseBranch::Stack(chain), NoiseBranchCtx::Stack(c)) => {
                chain.backward(store, c, grad_out)
            }
            _ => Err(Error::Config("noise branch context mismatch".into())),
        }
    }
}

/// The stage-shared middle of every noise estimation module: two branches
/// whose outputs are concatenated and fused back to 64 channels.
#[derive(Debug, Clone)]
pub struct NemCore {
    branch1: NoiseBranch,
    branch2: NoiseBranch,
    fuse: Conv,
    fuse_act: PRelu,
}

#[derive(Debug, Clone)]
pub struct NemCoreCtx {
    branch1: NoiseBranchCtx,
    branch2: NoiseBranchCtx,
    cat: Tensor4,
    fused: Tensor4,
}

impl NemCore {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut DetRng,
        name: &str,
        use_atb: bool,
    ) -> Result<Self> {
        Ok(NemCore {
            branch1: NoiseBranch::build(store, rng, &format!("{name}.atb1"), use_atb)?,
            branch2: NoiseBranch::build(store, rng, &format!("{name}.atb2"), use_atb)?,
            fuse: Conv::build_grouped(
                store,
                rng,
                &format!("{name}.fuse"),
                ConvSpec::k1(2 * NEM_WIDTH, NEM_WIDTH),
                Init::Kaiming,
                Some(NEM_CORE_GROUP),
            )?,
            fuse_act: PRelu::build_grouped(
                store,
                &format!("{name}.fuse_act"),
                NEM_WIDTH,
                Some(NEM_CORE_GROUP),
            )?,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor4) -> Result<(Tensor4, NemCoreCtx)> {
        let (a1, b1_ctx) = self.branch1.forward(store, x)?;
        let (a2, b2_ctx) = self.branch2.forward(store, x)?;
        let cat = Tensor4::concat_channels(&a1, &a2)?;
        let fused = self.fuse.forward(store, &cat)?;
        let out = self.fuse_act.forward(store, &fused)?;
        Ok((
            out,
            NemCoreCtx {
                branch1: b1_ctx,
                branch2: b2_ctx,
                cat,
                fused,
            },
        ))
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        ctx: &NemCoreCtx,
        grad_out: &Tensor4,
    ) -> Result<Tensor4> {
        let g = self.fuse_act.backward(store, &ctx.fused, grad_out)?;
        let g_cat = self.fuse.backward(store, &ctx.cat, &g)?;
        let (g_a1, g_a2) = g_cat.split_channels(NEM_WIDTH)?;
        let mut g_x = self.branch1.backward(store, &ctx.branch1, &g_a1)?;
        g_x.accumulate(&self.branch2.backward(store, &ctx.branch2, &g_a2)?)?;
        Ok(g_x)
    }
}

/// One noise estimation stage: per-stage ports around the shared core, with
/// the supervised sigma head on stage 1 only.
#[derive(Debug, Clone)]
pub struct NemStage {
    pub index: usize,
    in_port: Conv,
    out_port: Conv,
    core: NemCore,
    sigma_head: Option<Conv>,
}

#[derive(Debug, Clone)]
pub struct NemStageCtx {
    input: Tensor4,
    core: NemCoreCtx,
    fused: Tensor4,
    /// saved pre-softplus head output; present on stage 1 only
    head_raw: Option<Tensor4>,
    noise_features: Tensor4,
}

impl NemStageCtx {
    pub fn noise_features(&self) -> &Tensor4 {
        &self.noise_features
    }

    /// The shared-core output the out-port reads; the static ablation taps
    /// this tensor for every later stage.
    pub fn core_fused(&self) -> &Tensor4 {
        &self.fused
    }
}

impl NemStage {
    /// `in_channels` is the stage input width (image channels for stage 1,
    /// the paired stage's feature width otherwise); `out_channels` matches
    /// the paired refinement-block output. `sigma_channels` attaches the
    /// supervised head (stage 1).
    pub fn build(
        store: &mut ParamStore,
        rng: &mut DetRng,
        name: &str,
        index: usize,
        in_channels: usize,
        out_channels: usize,
        core: &NemCore,
        sigma_channels: Option<usize>,
    ) -> Result<Self> {
        let in_port = Conv::build(
            store,
            rng,
            &format!("{name}.in_port"),
            ConvSpec::k1(in_channels, NEM_WIDTH),
            Init::Kaiming,
        )?;
        let out_port = Conv::build(
            store,
            rng,
            &format!("{name}.out_port"),
            ConvSpec::k1(NEM_WIDTH, out_channels),
            Init::Kaiming,
        )?;
        let sigma_head = match sigma_channels {
            Some(c) => Some(Conv::build(
                store,
                rng,
                &format!("{name}.sigma_head"),
                ConvSpec::k3(out_channels, c),
                Init::Kaiming,
            )?),
            None => None,
        };
        Ok(NemStage {
            index,
            in_port,
            out_port,
            core: core.clone(),
            sigma_head,
        })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        stage_input: &Tensor4,
    ) -> Result<(Tensor4, Option<SigmaMap>, NemStageCtx)> {
        let ported = self.in_port.forward(store, stage_input)?;
        let (fused, core_ctx) = self.core.forward(store, &ported)?;
        let noise_features = self.out_port.forward(store, &fused)?;
        let (sigma, head_raw) = match &self.sigma_head {
            Some(head) => {
                let raw = head.forward(store, &noise_features)?;
                (Some(ops::softplus(&raw)), Some(raw))
            }
            None => (None, None),
        };
        let ctx = NemStageCtx {
            input: stage_input.clone(),
            core: core_ctx,
            fused,
            head_raw,
            noise_features: noise_features.clone(),
        };
        Ok((noise_features, sigma, ctx))
    }

    /// `grad_sigma` feeds the supervised head (stage 1 only); returns the
    /// gradient for the stage input.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        ctx: &NemStageCtx,
        grad_features: &Tensor4,
        grad_sigma: Option<&Tensor4>,
    ) -> Result<Tensor4> {
        self.backward_with_core_extra(store, ctx, grad_features, grad_sigma, None)
    }

    /// Backward with an additional gradient entering at the shared-core
    /// output (used by the static ablation, where later stages tap it).
    pub fn backward_with_core_extra(
        &self,
        store: &mut ParamStore,
        ctx: &NemStageCtx,
        grad_features: &Tensor4,
        grad_sigma: Option<&Tensor4>,
        grad_core_extra: Option<&Tensor4>,
    ) -> Result<Tensor4> {
        let mut g_feat = grad_features.clone();
        if let Some(gs) = grad_sigma {
            let head = self
                .sigma_head
                .as_ref()
                .ok_or_else(|| Error::Config("sigma gradient on a stage without a head".into()))?;
            let raw = ctx.head_raw.as_ref().expect("head context saved");
            let g = ops::softplus_backward(gs, raw)?;
            g_feat.accumulate(&head.backward(store, &ctx.noise_features, &g)?)?;
        }
        let mut g = self.out_port.backward(store, &ctx.fused, &g_feat)?;
        if let Some(extra) = grad_core_extra {
            g.accumulate(extra)?;
        }
        let g = self.core.backward(store, &ctx.core, &g)?;
        self.in_port.backward(store, &ctx.input, &g)
    }
}
