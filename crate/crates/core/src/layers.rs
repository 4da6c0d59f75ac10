//! Store-backed layers: parameter names paired with the primitive ops.
//!
//! Blocks compose these and keep their own saved-context records for the
//! backward pass; the graph is static, so no tape is needed.

use crate::error::Result;
use crate::ops::{self, ConvSpec};
use crate::params::{kaiming_conv, ParamStore};
use crate::rng::DetRng;
use crate::tensor::Tensor4;

/// Weight initialisation choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Kaiming fan-in normal weights, zero bias.
    Kaiming,
    /// All-zero weights and bias (residual heads).
    Zero,
}

/// Convolution layer bound to named store entries.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: String,
    pub bias: String,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut DetRng,
        name: &str,
        spec: ConvSpec,
        init: Init,
    ) -> Result<Self> {
        Self::build_grouped(store, rng, name, spec, init, None)
    }

    pub fn build_grouped(
        store: &mut ParamStore,
        rng: &mut DetRng,
        name: &str,
        spec: ConvSpec,
        init: Init,
        group: Option<&str>,
    ) -> Result<Self> {
        spec.validate()?;
        let k = spec.kernel_size;
        let weight = match init {
            Init::Kaiming => kaiming_conv(spec.out_channels, spec.in_channels, k, rng),
            Init::Zero => Tensor4::zeros(spec.out_channels, spec.in_channels, k, k),
        };
        let bias = Tensor4::zeros(1, spec.out_channels, 1, 1);
        store.insert_grouped(format!("{name}.w"), weight, group)?;
        store.insert_grouped(format!("{name}.b"), bias, group)?;
        Ok(Conv {
            weight: format!("{name}.w"),
            bias: format!("{name}.b"),
            spec,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor4) -> Result<Tensor4> {
        ops::conv2d_forward(
            x,
            store.value(&self.weight),
            store.value(&self.bias).data(),
            &self.spec,
        )
    }

    /// Accumulates weight/bias gradients into the store, returns the input
    /// gradient.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        saved_input: &Tensor4,
        grad_out: &Tensor4,
    ) -> Result<Tensor4> {
        let (gi, gw, gb) =
            ops::conv2d_backward(grad_out, saved_input, store.value(&self.weight), &self.spec)?;
        store.accumulate_grad(&self.weight, &gw)?;
        let gb_t = Tensor4::from_vec(gb, 1, self.spec.out_channels, 1, 1)?;
        store.accumulate_grad(&self.bias, &gb_t)?;
        Ok(gi)
    }
}

/// Per-channel PReLU bound to a named slope vector.
#[derive(Debug, Clone)]
pub struct PRelu {
    pub slope: String,
    pub channels: usize,
}

impl PRelu {
    pub const INITIAL_SLOPE: f64 = 0.25;

    pub fn build(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Self::build_grouped(store, name, channels, None)
    }

    pub fn build_grouped(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        group: Option<&str>,
    ) -> Result<Self> {
        store.insert_grouped(
            format!("{name}.slope"),
            Tensor4::filled(1, channels, 1, 1, Self::INITIAL_SLOPE),
            group,
        )?;
        Ok(PRelu {
            slope: format!("{name}.slope"),
            channels,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor4) -> Result<Tensor4> {
        ops::prelu(x, store.value(&self.slope).data())
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        saved_input: &Tensor4,
        grad_out: &Tensor4,
    ) -> Result<Tensor4> {
        let (gi, gs) =
            ops::prelu_backward(grad_out, saved_input, store.value(&self.slope).data())?;
        let gs_t = Tensor4::from_vec(gs, 1, self.channels, 1, 1)?;
        store.accumulate_grad(&self.slope, &gs_t)?;
        Ok(gi)
    }
}

/// Sequence of convolutions with PReLU between consecutive layers (none
/// after the last).
#[derive(Debug, Clone)]
pub struct ConvChain {
    convs: Vec<Conv>,
    acts: Vec<PRelu>,
}

/// Saved inputs of each conv and each activation in a [`ConvChain`] pass.
#[derive(Debug, Clone)]
pub struct ConvChainCtx {
    conv_inputs: Vec<Tensor4>,
    act_inputs: Vec<Tensor4>,
}

impl ConvChain {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut DetRng,
        name: &str,
        specs: &[ConvSpec],
        last_init: Init,
    ) -> Result<Self> {
        Self::build_grouped(store, rng, name, specs, last_init, None)
    }

    pub fn build_grouped(
        store: &mut ParamStore,
        rng: &mut DetRng,
        name: &str,
        specs: &[ConvSpec],
        last_init: Init,
        group: Option<&str>,
    ) -> Result<Self> {
        let mut convs = Vec::with_capacity(specs.len());
        let mut acts = Vec::with_capacity(specs.len().saturating_sub(1));
        for (i, spec) in specs.iter().enumerate() {
            let init = if i + 1 == specs.len() { last_init } else { Init::Kaiming };
            convs.push(Conv::build_grouped(
                store,
                rng,
                &format!("{name}.conv{}", i + 1),
                *spec,
                init,
                group,
            )?);
            if i + 1 < specs.len() {
                acts.push(PRelu::build_grouped(
                    store,
                    &format!("{name}.act{}", i + 1),
                    spec.out_channels,
                    group,
                )?);
            }
        }
        Ok(ConvChain { convs, acts })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor4) -> Result<(Tensor4, ConvChainCtx)> {
        let mut conv_inputs = Vec::with_capacity(self.convs.len());
        let mut act_inputs = Vec::with_capacity(self.acts.len());
        let mut cur = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            conv_inputs.push(cur.clone());
            cur = conv.forward(store, &cur)?;
            if i < self.acts.len() {
                act_inputs.push(cur.clone());
                cur = self.acts[i].forward(store, &cur)?;
            }
        }
        Ok((cur, ConvChainCtx { conv_inputs, act_inputs }))
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        ctx: &ConvChainCtx,
        grad_out: &Tensor4,
    ) -> Result<Tensor4> {
        let mut g = grad_out.clone();
        for i in (0..self.convs.len()).rev() {
            if i < self.acts.len() {
                g = self.acts[i].backward(store, &ctx.act_inputs[i], &g)?;
            }
            g = self.convs[i].backward(store, &ctx.conv_inputs[i], &g)?;
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_rel_err, numeric_grad_param, projection, DEFAULT_EPS};

    #[test]
    fn conv_layer_round_trip_through_store() {
        let mut store = ParamStore::new();
        let mut rng = DetRng::new(1);
        let conv = Conv::build(&mut store, &mut rng, "c", ConvSpec::k3(2, 3), Init::Kaiming)
            .unwrap();
        let x = Tensor4::randn(1, 2, 4, 4, 1.0, &mut rng);
        let y = conv.forward(&store, &x).unwrap();
        assert_eq!(y.dims(), (1, 3, 4, 4));

        let proj = projection(y.dims(), 99);
        let _ = conv.backward(&mut store, &x, &proj).unwrap();

        // store-accumulated weight gradient agrees with central differences
        let analytic = store.grad(&conv.weight).clone();
        let mut numeric = analytic.clone();
        for i in 0..numeric.len() {
            let g = numeric_grad_param(&mut store, &conv.weight, i, DEFAULT_EPS, |s| {
                Ok(conv.forward(s, &x)?.mul(&proj)?.sum())
            })
            .unwrap();
            numeric.data_mut()[i] = g;
        }
        assert!(max_rel_err(&analytic, &numeric) < 1e-5);
    }

    #[test]
    fn prelu_layer_accumulates_slope_grad() {
        let mut store = ParamStore::new();
        let mut rng = DetRng::new(2);
        let act = PRelu::build(&mut store, "a", 2).unwrap();
        let x = Tensor4::randn(1, 2, 3, 3, 1.0, &mut rng);
        let y = act.forward(&store, &x).unwrap();
        let proj = projection(y.dims(), 5);
        let _ = act.backward(&mut store, &x, &proj).unwrap();

        let analytic = store.grad(&act.slope).clone();
        let mut numeric = analytic.clone();
        for i in 0..numeric.len() {
            let g = numeric_grad_param(&mut store, &act.slope, i, DEFAULT_EPS, |s| {
                Ok(act.forward(s, &x)?.mul(&proj)?.sum())
            })
            .unwrap();
            numeric.data_mut()[i] = g;
        }
        assert!(max_rel_err(&analytic, &numeric) < 1e-6);
    }
}
