//! Synthetic noise generation: AWGN for benchmark training and a
//! signal-dependent Gaussian model routed through a small in-camera pipeline
//! (gamma curve, clipping, optional quantisation) for real-noise
//! approximation.
//!
//! Every pixel draws from its own counter-derived stream, so the result is
//! independent of generation order and safe to produce row-parallel.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, DetRng};
use crate::tensor::Tensor4;

/// Per-pixel noise standard deviation, ground truth or predicted. Same dims
/// as the image it describes; non-negative everywhere.
pub type SigmaMap = Tensor4;

/// Noise synthesis mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    Awgn,
    Hetero,
}

/// Parameters of the noise model.
///
/// `sigma_d` scales the signal-dependent variance component, `sigma_s` the
/// stationary one, both in linear-irradiance units. `awgn_sigma` is on the
/// 0..255 intensity scale.
#[derive(Debug, Clone, Copy)]
pub struct NoiseParams {
    pub sigma_d: f64,
    pub sigma_s: f64,
    pub awgn_sigma: f64,
    pub mode: NoiseMode,
}

impl NoiseParams {
    pub fn awgn(sigma: f64) -> Self {
        NoiseParams {
            sigma_d: 0.0,
            sigma_s: 0.0,
            awgn_sigma: sigma,
            mode: NoiseMode::Awgn,
        }
    }

    pub fn hetero(sigma_d: f64, sigma_s: f64) -> Self {
        NoiseParams {
            sigma_d,
            sigma_s,
            awgn_sigma: 0.0,
            mode: NoiseMode::Hetero,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_d < 0.0 || self.sigma_s < 0.0 || self.awgn_sigma < 0.0 {
            return Err(Error::InvalidParam(format!(
                "noise stddev parameters must be non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Simplified in-camera pipeline: gamma curve, clipping, optional
/// quantisation.
#[derive(Debug, Clone, Copy)]
pub struct IspConfig {
    pub gamma: f64,
    /// 0 disables quantisation; 8 and 16 quantise to that bit depth.
    pub quantize_bits: u32,
    pub clip: bool,
}

impl Default for IspConfig {
    fn default() -> Self {
        IspConfig {
            gamma: 2.2,
            quantize_bits: 0,
            clip: true,
        }
    }
}

impl IspConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1.0..=4.0).contains(&self.gamma) {
            return Err(Error::InvalidParam(format!(
                "gamma {} outside [1, 4]",
                self.gamma
            )));
        }
        if ![0, 8, 16].contains(&self.quantize_bits) {
            return Err(Error::InvalidParam(format!(
                "quantize_bits {} not in {{0, 8, 16}}",
                self.quantize_bits
            )));
        }
        Ok(())
    }
}

// stream tags keeping the independent consumers of one seed apart
const STREAM_AWGN: u64 = 0x01;
const STREAM_HETERO: u64 = 0x02;
const STREAM_SIGMA_RANGE: u64 = 0x03;

#[inline]
fn pixel_normal(seed: u64, stream: u64, index: usize) -> f64 {
    DetRng::new(derive_seed(seed, stream, index as u64)).normal()
}

/// Additive white Gaussian noise at `sigma` on the 0..255 scale.
///
/// The output is intentionally not clipped; the ground-truth map is the
/// constant sigma/255.
pub fn synth_awgn(clean: &Tensor4, sigma: f64, seed: u64) -> Result<(Tensor4, SigmaMap)> {
    if sigma < 0.0 {
        return Err(Error::InvalidParam(format!("awgn sigma {sigma} < 0")));
    }
    let (b, c, h, w) = clean.dims();
    let s = sigma / 255.0;
    let gt = Tensor4::filled(b, c, h, w, s);
    if sigma == 0.0 {
        return Ok((clean.clone(), gt));
    }
    let mut noisy = clean.clone();
    for (i, v) in noisy.data_mut().iter_mut().enumerate() {
        *v += s * pixel_normal(seed, STREAM_AWGN, i);
    }
    Ok((noisy, gt))
}

/// Signal-dependent Gaussian noise: variance `L * sigma_d^2 + sigma_s^2` in
/// the linear domain, applied between the inverse and forward gamma curves.
///
/// Returns the observed image and the linear-domain ground-truth sigma map.
pub fn synth_hetero(
    clean_srgb: &Tensor4,
    params: &NoiseParams,
    isp: &IspConfig,
    seed: u64,
) -> Result<(Tensor4, SigmaMap)> {
    params.validate()?;
    isp.validate()?;
    let (b, c, h, w) = clean_srgb.dims();

    // valid degenerate case: no noise requested
    if params.sigma_d == 0.0 && params.sigma_s == 0.0 {
        return Ok((clean_srgb.clone(), Tensor4::zeros(b, c, h, w)));
    }

    let vd = params.sigma_d * params.sigma_d;
    let vs = params.sigma_s * params.sigma_s;

    let mut noisy = Tensor4::zeros(b, c, h, w);
    let mut gt = Tensor4::zeros(b, c, h, w);
    for i in 0..clean_srgb.len() {
        let srgb = clean_srgb.data()[i].clamp(0.0, 1.0);
        let lin = srgb.powf(isp.gamma);
        let std = (lin * vd + vs).sqrt();
        gt.data_mut()[i] = std;
        let observed = lin + std * pixel_normal(seed, STREAM_HETERO, i);
        let limited = if isp.clip {
            observed.clamp(0.0, 1.0)
        } else {
            observed.max(0.0)
        };
        let mut out = limited.powf(1.0 / isp.gamma);
        if isp.quantize_bits > 0 {
            let levels = ((1u32 << isp.quantize_bits) - 1) as f64;
            out = (out * levels).round() / levels;
        }
        noisy.data_mut()[i] = out;
    }
    Ok((noisy, gt))
}

/// Ground-truth sigma map of [`synth_hetero`] without drawing any noise.
pub fn hetero_sigma_map(clean_srgb: &Tensor4, params: &NoiseParams, isp: &IspConfig) -> SigmaMap {
    let vd = params.sigma_d * params.sigma_d;
    let vs = params.sigma_s * params.sigma_s;
    clean_srgb.map(|srgb| (srgb.clamp(0.0, 1.0).powf(isp.gamma) * vd + vs).sqrt())
}

/// Uniform draw from [lo, hi], deterministic per seed.
pub fn sample_sigma_range(lo: f64, hi: f64, seed: u64) -> Result<f64> {
    if !(0.0 <= lo && lo <= hi) {
        return Err(Error::InvalidParam(format!(
            "sigma range [{lo}, {hi}] invalid"
        )));
    }
    Ok(DetRng::new(derive_seed(seed, STREAM_SIGMA_RANGE, 0)).uniform(lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    fn std_dev(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
    }

    #[test]
    fn awgn_zero_sigma_is_identity() {
        let clean = Tensor4::filled(1, 1, 8, 8, 0.5);
        let (noisy, gt) = synth_awgn(&clean, 0.0, 99).unwrap();
        assert_eq!(noisy, clean);
        assert!(gt.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn awgn_negative_sigma_rejected() {
        let clean = Tensor4::zeros(1, 1, 2, 2);
        assert!(synth_awgn(&clean, -1.0, 0).is_err());
    }

    #[test]
    fn awgn_empirical_std_matches_target() {
        let clean = Tensor4::filled(1, 1, 256, 256, 0.5);
        let (noisy, gt) = synth_awgn(&clean, 25.0, 7).unwrap();
        let deltas: Vec<f64> = noisy
            .data()
            .iter()
            .zip(clean.data())
            .map(|(n, c)| n - c)
            .collect();
        let target = 25.0 / 255.0;
        let got = std_dev(&deltas);
        assert!(
            (got - target).abs() / target < 0.02,
            "std {got} vs {target}"
        );
        assert!(gt.data().iter().all(|&v| v == target));
    }

    #[test]
    fn awgn_same_seed_bit_identical() {
        let clean = Tensor4::filled(1, 3, 16, 16, 0.25);
        let (a, _) = synth_awgn(&clean, 25.0, 42).unwrap();
        let (b, _) = synth_awgn(&clean, 25.0, 42).unwrap();
        assert_eq!(a, b);
        let (c, _) = synth_awgn(&clean, 25.0, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn hetero_stationary_only_gives_constant_map() {
        let mut rng = DetRng::new(1);
        let mut clean = Tensor4::zeros(1, 1, 16, 16);
        for v in clean.data_mut() {
            *v = rng.next_f64();
        }
        let params = NoiseParams::hetero(0.0, 0.03);
        let (_, gt) = synth_hetero(&clean, &params, &IspConfig::default(), 5).unwrap();
        assert!(gt.data().iter().all(|&v| (v - 0.03).abs() < 1e-15));
    }

    #[test]
    fn hetero_unit_irradiance_signal_term() {
        let clean = Tensor4::filled(1, 1, 8, 8, 1.0);
        let params = NoiseParams::hetero(0.1, 0.0);
        let (_, gt) = synth_hetero(&clean, &params, &IspConfig::default(), 5).unwrap();
        assert!(gt.data().iter().all(|&v| (v - 0.1).abs() < 1e-15));
    }

    #[test]
    fn hetero_both_zero_is_identity() {
        let clean = Tensor4::filled(1, 1, 4, 4, 0.3);
        let params = NoiseParams::hetero(0.0, 0.0);
        let isp = IspConfig {
            quantize_bits: 8,
            ..IspConfig::default()
        };
        let (noisy, gt) = synth_hetero(&clean, &params, &isp, 5).unwrap();
        assert_eq!(noisy, clean);
        assert!(gt.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hetero_sigma_map_independent_of_seed() {
        let mut rng = DetRng::new(2);
        let mut clean = Tensor4::zeros(1, 1, 12, 12);
        for v in clean.data_mut() {
            *v = rng.next_f64();
        }
        let params = NoiseParams::hetero(0.08, 0.02);
        let isp = IspConfig::default();
        let (_, g1) = synth_hetero(&clean, &params, &isp, 1).unwrap();
        let (_, g2) = synth_hetero(&clean, &params, &isp, 2).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(g1, hetero_sigma_map(&clean, &params, &isp));
    }

    #[test]
    fn hetero_binned_variance_follows_model() {
        // one constant-irradiance block per bin; levels kept several sigma
        // above zero so the non-negativity clamp stays inactive
        let per_bin = 40_000;
        let levels = [0.45f64, 0.65, 0.8, 0.95];
        let params = NoiseParams::hetero(0.08, 0.02);
        let isp = IspConfig {
            clip: false,
            ..IspConfig::default()
        };
        for (bin, &srgb) in levels.iter().enumerate() {
            let clean = Tensor4::filled(1, 1, 200, 200, srgb);
            let (noisy, _) = synth_hetero(&clean, &params, &isp, 100 + bin as u64).unwrap();
            let lin = srgb.powf(isp.gamma);
            // invert the forward gamma to recover linear-domain noise
            let deltas: Vec<f64> = noisy
                .data()
                .iter()
                .take(per_bin)
                .map(|v| v.powf(isp.gamma) - lin)
                .collect();
            let expect_var = lin * params.sigma_d * params.sigma_d
                + params.sigma_s * params.sigma_s;
            let got_var = std_dev(&deltas).powi(2);
            assert!(
                (got_var - expect_var).abs() / expect_var < 0.05,
                "bin {bin}: var {got_var} vs {expect_var}"
            );
        }
    }

    #[test]
    fn gamma_out_of_range_rejected() {
        let isp = IspConfig {
            gamma: 5.0,
            ..IspConfig::default()
        };
        assert!(isp.validate().is_err());
    }

    #[test]
    fn sigma_range_degenerate_and_deterministic() {
        assert_eq!(sample_sigma_range(25.0, 25.0, 1).unwrap(), 25.0);
        assert_eq!(
            sample_sigma_range(0.0, 55.0, 9).unwrap(),
            sample_sigma_range(0.0, 55.0, 9).unwrap()
        );
        assert!(sample_sigma_range(10.0, 5.0, 0).is_err());
    }

    #[test]
    fn sigma_range_mean() {
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|i| sample_sigma_range(0.0, 55.0, i as u64).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 27.5).abs() / 27.5 < 0.01, "mean {mean}");
    }
}
