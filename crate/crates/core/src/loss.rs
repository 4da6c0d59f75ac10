//! Training objectives: asymmetric noise-estimation loss, reconstruction
//! losses, and their weighted total. All reductions are per-element means so
//! the balance weight keeps its meaning across patch sizes.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Reconstruction norm; L2 for synthetic noise, L1 for real noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecNorm {
    L1,
    L2,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::InvalidParam(format!(
            "over-estimation factor {alpha} outside (0, 0.5)"
        )));
    }
    Ok(())
}

/// Asymmetric penalty on the predicted sigma map:
/// mean of |alpha - [e < 0]| * e^2 with e = predicted - ground truth.
///
/// For alpha < 0.5 under-estimation costs more than over-estimation.
pub fn asymm_loss(sigma_pred: &Tensor4, sigma_gt: &Tensor4, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if !sigma_pred.same_dims(sigma_gt) {
        return Err(Error::shape(
            "asymm_loss",
            format!("pred {:?} vs gt {:?}", sigma_pred.dims(), sigma_gt.dims()),
        ));
    }
    let n = sigma_pred.len() as f64;
    let mut acc = 0.0;
    for (&p, &g) in sigma_pred.data().iter().zip(sigma_gt.data()) {
        let e = p - g;
        let w = if e < 0.0 { 1.0 - alpha } else { alpha };
        acc += w * e * e;
    }
    Ok(acc / n)
}

/// Gradient of [`asymm_loss`] with respect to the prediction.
pub fn asymm_loss_grad(sigma_pred: &Tensor4, sigma_gt: &Tensor4, alpha: f64) -> Result<Tensor4> {
    check_alpha(alpha)?;
    if !sigma_pred.same_dims(sigma_gt) {
        return Err(Error::shape(
            "asymm_loss_grad",
            format!("pred {:?} vs gt {:?}", sigma_pred.dims(), sigma_gt.dims()),
        ));
    }
    let n = sigma_pred.len() as f64;
    let mut grad = sigma_pred.clone();
    for (gv, (&p, &g)) in grad
        .data_mut()
        .iter_mut()
        .zip(sigma_pred.data().iter().zip(sigma_gt.data()))
    {
        let e = p - g;
        let w = if e < 0.0 { 1.0 - alpha } else { alpha };
        *gv = 2.0 * w * e / n;
    }
    Ok(grad)
}

/// Mean reconstruction error under the chosen norm.
pub fn rec_loss(denoised: &Tensor4, clean: &Tensor4, norm: RecNorm) -> Result<f64> {
    if !denoised.same_dims(clean) {
        return Err(Error::shape(
            "rec_loss",
            format!("denoised {:?} vs clean {:?}", denoised.dims(), clean.dims()),
        ));
    }
    let n = denoised.len() as f64;
    let acc: f64 = denoised
        .data()
        .iter()
        .zip(clean.data())
        .map(|(&d, &c)| match norm {
            RecNorm::L1 => (d - c).abs(),
            RecNorm::L2 => (d - c) * (d - c),
        })
        .sum();
    Ok(acc / n)
}

/// Gradient of [`rec_loss`] with respect to `denoised`. The L1 subgradient
/// at zero is taken as 0.
pub fn rec_loss_grad(denoised: &Tensor4, clean: &Tensor4, norm: RecNorm) -> Result<Tensor4> {
    if !denoised.same_dims(clean) {
        return Err(Error::shape(
            "rec_loss_grad",
            format!("denoised {:?} vs clean {:?}", denoised.dims(), clean.dims()),
        ));
    }
    let n = denoised.len() as f64;
    let mut grad = denoised.clone();
    for (gv, (&d, &c)) in grad
        .data_mut()
        .iter_mut()
        .zip(denoised.data().iter().zip(clean.data()))
    {
        let e = d - c;
        *gv = match norm {
            RecNorm::L1 => {
                if e > 0.0 {
                    1.0 / n
                } else if e < 0.0 {
                    -1.0 / n
                } else {
                    0.0
                }
            }
            RecNorm::L2 => 2.0 * e / n,
        };
    }
    Ok(grad)
}

/// Balanced total: rec + lambda * asymm. `asymm` is absent for real data
/// without sigma supervision.
pub fn total_loss(rec: f64, asymm: Option<f64>, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::InvalidParam(format!("lambda {lambda} < 0")));
    }
    Ok(match asymm {
        Some(a) => rec + lambda * a,
        None => rec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_rel_err, numeric_grad_tensor};
    use crate::rng::DetRng;

    #[test]
    fn asymm_zero_when_exact() {
        let p = Tensor4::filled(1, 1, 3, 3, 0.4);
        assert_eq!(asymm_loss(&p, &p, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn asymm_hand_computed_cases() {
        // over-estimate: |0.3 - 0| * 0.1^2 = 0.003
        let pred = Tensor4::filled(1, 1, 1, 1, 0.5);
        let gt = Tensor4::filled(1, 1, 1, 1, 0.4);
        assert!((asymm_loss(&pred, &gt, 0.3).unwrap() - 0.003).abs() < 1e-12);
        // under-estimate: |0.3 - 1| * 0.1^2 = 0.007
        let pred = Tensor4::filled(1, 1, 1, 1, 0.3);
        assert!((asymm_loss(&pred, &gt, 0.3).unwrap() - 0.007).abs() < 1e-12);
    }

    #[test]
    fn asymm_alpha_range_enforced() {
        let p = Tensor4::zeros(1, 1, 1, 1);
        assert!(asymm_loss(&p, &p, 0.0).is_err());
        assert!(asymm_loss(&p, &p, 0.5).is_err());
    }

    #[test]
    fn asymm_underestimation_costs_more() {
        let mut rng = DetRng::new(8);
        for _ in 0..200 {
            let alpha = rng.uniform(0.01, 0.49);
            let gt_v = rng.uniform(0.1, 0.9);
            let err = rng.uniform(0.01, 0.1);
            let gt = Tensor4::filled(1, 1, 2, 2, gt_v);
            let over = Tensor4::filled(1, 1, 2, 2, gt_v + err);
            let under = Tensor4::filled(1, 1, 2, 2, gt_v - err);
            let lo = asymm_loss(&over, &gt, alpha).unwrap();
            let lu = asymm_loss(&under, &gt, alpha).unwrap();
            assert!(lu > lo, "alpha {alpha}: under {lu} <= over {lo}");
        }
    }

    #[test]
    fn asymm_grad_matches_finite_differences() {
        let mut rng = DetRng::new(9);
        let mut pred = Tensor4::zeros(1, 2, 3, 3);
        let mut gt = Tensor4::zeros(1, 2, 3, 3);
        for v in pred.data_mut() {
            *v = rng.uniform(0.1, 0.9);
        }
        for v in gt.data_mut() {
            *v = rng.uniform(0.1, 0.9);
        }
        let analytic = asymm_loss_grad(&pred, &gt, 0.35).unwrap();
        let numeric =
            numeric_grad_tensor(&pred, 1e-6, |p| asymm_loss(p, &gt, 0.35)).unwrap();
        assert!(max_rel_err(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn rec_loss_constant_offset() {
        let a = Tensor4::filled(1, 1, 4, 4, 0.6);
        let b = Tensor4::filled(1, 1, 4, 4, 0.5);
        assert!((rec_loss(&a, &b, RecNorm::L1).unwrap() - 0.1).abs() < 1e-12);
        assert!((rec_loss(&a, &b, RecNorm::L2).unwrap() - 0.01).abs() < 1e-12);
        assert_eq!(rec_loss(&a, &a, RecNorm::L1).unwrap(), 0.0);
        assert_eq!(rec_loss(&a, &a, RecNorm::L2).unwrap(), 0.0);
    }

    #[test]
    fn rec_grads_match_finite_differences_away_from_ties() {
        let mut rng = DetRng::new(10);
        let mut d = Tensor4::zeros(1, 1, 4, 4);
        let mut c = Tensor4::zeros(1, 1, 4, 4);
        for v in d.data_mut() {
            *v = rng.uniform(0.0, 1.0);
        }
        for v in c.data_mut() {
            *v = rng.uniform(0.0, 1.0);
        }
        for norm in [RecNorm::L1, RecNorm::L2] {
            let analytic = rec_loss_grad(&d, &c, norm).unwrap();
            let numeric = numeric_grad_tensor(&d, 1e-6, |x| rec_loss(x, &c, norm)).unwrap();
            assert!(max_rel_err(&analytic, &numeric) < 1e-6, "{norm:?}");
        }
    }

    #[test]
    fn total_loss_composition() {
        assert_eq!(total_loss(1.0, Some(2.0), 0.5).unwrap(), 2.0);
        assert_eq!(total_loss(1.0, Some(2.0), 0.0).unwrap(), 1.0);
        assert_eq!(total_loss(1.5, None, 0.5).unwrap(), 1.5);
        assert!(total_loss(1.0, Some(1.0), -0.1).is_err());
    }

    #[test]
    fn asymm_becomes_symmetric_as_alpha_approaches_half() {
        // swapping operands flips which branch weight applies, so the gap is
        // bounded by (1 - 2 alpha) * mean(e^2) and vanishes at alpha = 1/2
        let mut rng = DetRng::new(11);
        let mut a = Tensor4::zeros(1, 1, 3, 3);
        let mut b = Tensor4::zeros(1, 1, 3, 3);
        for v in a.data_mut() {
            *v = rng.uniform(0.0, 1.0);
        }
        for v in b.data_mut() {
            *v = rng.uniform(0.0, 1.0);
        }
        let mse = rec_loss(&a, &b, RecNorm::L2).unwrap();
        let mut last_gap = f64::INFINITY;
        for alpha in [0.3, 0.45, 0.4999] {
            let gap =
                (asymm_loss(&a, &b, alpha).unwrap() - asymm_loss(&b, &a, alpha).unwrap()).abs();
            assert!(gap <= (1.0 - 2.0 * alpha) * mse + 1e-15, "alpha {alpha}");
            assert!(gap < last_gap);
            last_gap = gap;
        }
        assert!(last_gap < 1e-3 * mse);
    }
}
