//! Activation functions with explicit backward passes.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// PReLU with one learnable slope per channel: x for x >= 0, slope_c * x below.
pub fn prelu(input: &Tensor4, slope: &[f64]) -> Result<Tensor4> {
    let (b, c, _, _) = input.dims();
    if slope.len() != c {
        return Err(Error::shape(
            "prelu",
            format!("slope length {} != {} channels", slope.len(), c),
        ));
    }
    let mut out = input.clone();
    for bi in 0..b {
        for ci in 0..c {
            let a = slope[ci];
            for v in out.plane_mut(bi, ci) {
                if *v < 0.0 {
                    *v *= a;
                }
            }
        }
    }
    Ok(out)
}

/// Backward of [`prelu`]: gradient for the input and the per-channel slope.
pub fn prelu_backward(
    grad_out: &Tensor4,
    saved_input: &Tensor4,
    slope: &[f64],
) -> Result<(Tensor4, Vec<f64>)> {
    if !grad_out.same_dims(saved_input) {
        return Err(Error::shape(
            "prelu_backward",
            format!("grad {:?} vs input {:?}", grad_out.dims(), saved_input.dims()),
        ));
    }
    let (b, c, _, _) = saved_input.dims();
    let mut grad_in = grad_out.clone();
    let mut grad_slope = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let a = slope[ci];
            let xs = saved_input.plane(bi, ci);
            let gs = grad_out.plane(bi, ci);
            let gi = grad_in.plane_mut(bi, ci);
            let mut acc = 0.0;
            for ((x, g), out) in xs.iter().zip(gs).zip(gi.iter_mut()) {
                if *x < 0.0 {
                    *out = g * a;
                    acc += g * x;
                }
            }
            grad_slope[ci] += acc;
        }
    }
    Ok((grad_in, grad_slope))
}

/// Logistic sigmoid, output in (0, 1).
pub fn sigmoid(input: &Tensor4) -> Tensor4 {
    input.map(|x| 1.0 / (1.0 + (-x).exp()))
}

/// Backward of [`sigmoid`] in terms of the saved output: g * y * (1 - y).
pub fn sigmoid_backward(grad_out: &Tensor4, saved_output: &Tensor4) -> Result<Tensor4> {
    if !grad_out.same_dims(saved_output) {
        return Err(Error::shape(
            "sigmoid_backward",
            format!(
                "grad {:?} vs output {:?}",
                grad_out.dims(),
                saved_output.dims()
            ),
        ));
    }
    let mut g = grad_out.clone();
    for (gv, y) in g.data_mut().iter_mut().zip(saved_output.data()) {
        *gv *= y * (1.0 - y);
    }
    Ok(g)
}

/// Numerically stable softplus ln(1 + e^x); maps onto (0, inf).
pub fn softplus(input: &Tensor4) -> Tensor4 {
    input.map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p())
}

/// Backward of [`softplus`]: g * sigmoid(x).
pub fn softplus_backward(grad_out: &Tensor4, saved_input: &Tensor4) -> Result<Tensor4> {
    if !grad_out.same_dims(saved_input) {
        return Err(Error::shape(
            "softplus_backward",
            format!(
                "grad {:?} vs input {:?}",
                grad_out.dims(),
                saved_input.dims()
            ),
        ));
    }
    let mut g = grad_out.clone();
    for (gv, x) in g.data_mut().iter_mut().zip(saved_input.data()) {
        *gv *= 1.0 / (1.0 + (-x).exp());
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prelu_values() {
        let t = Tensor4::from_vec(vec![-2.0, 3.0], 1, 1, 1, 2).unwrap();
        let out = prelu(&t, &[0.25]).unwrap();
        assert_eq!(out.data(), &[-0.5, 3.0]);
    }

    #[test]
    fn prelu_nonnegative_is_identity() {
        let t = Tensor4::from_vec(vec![0.0, 1.0, 2.5], 1, 1, 1, 3).unwrap();
        let out = prelu(&t, &[0.7]).unwrap();
        assert_eq!(out.data(), t.data());
    }

    #[test]
    fn prelu_slope_length_checked() {
        let t = Tensor4::zeros(1, 2, 2, 2);
        assert!(prelu(&t, &[0.25]).is_err());
    }

    #[test]
    fn prelu_slope_gradient_is_negative_side_sum() {
        // d out / d slope = x on the negative side, 0 elsewhere
        let t = Tensor4::from_vec(vec![-2.0, -1.0, 3.0, 4.0], 1, 1, 2, 2).unwrap();
        let ones = Tensor4::filled(1, 1, 2, 2, 1.0);
        let (_, gs) = prelu_backward(&ones, &t, &[0.25]).unwrap();
        assert!((gs[0] - (-3.0)).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_values() {
        let t = Tensor4::from_vec(vec![0.0, 30.0, -30.0], 1, 1, 1, 3).unwrap();
        let out = sigmoid(&t);
        assert!((out.data()[0] - 0.5).abs() < 1e-15);
        assert!(out.data()[1] > 0.999_999_9 && out.data()[1] < 1.0);
        assert!(out.data()[2] > 0.0 && out.data()[2] < 1e-7);
    }

    #[test]
    fn sigmoid_monotone() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 - 10.0).collect();
        let t = Tensor4::from_vec(xs, 1, 1, 1, 20).unwrap();
        let out = sigmoid(&t);
        for pair in out.data().windows(2) {
            assert!(pair[1] > pair[0]);
        }
    }

    #[test]
    fn softplus_positive_and_stable() {
        let t = Tensor4::from_vec(vec![-800.0, 0.0, 800.0], 1, 1, 1, 3).unwrap();
        let out = softplus(&t);
        assert!(out.data()[0] >= 0.0 && out.data()[0] < 1e-12);
        assert!((out.data()[1] - 2f64.ln()).abs() < 1e-15);
        assert!((out.data()[2] - 800.0).abs() < 1e-12);
        assert!(out.all_finite());
    }
}
